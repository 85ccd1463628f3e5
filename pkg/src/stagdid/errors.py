"""Exception type shared by every module.

Each error carries a stable, machine-readable ``code`` so the CLI can emit
error records without parsing messages.
"""


class DidError(ValueError):
    """Raised for invalid inputs or estimation failures.

    Parameters
    ----------
    code : str
        Stable error code, e.g. ``"UNBALANCED"`` or ``"SEPARATION_DETECTED"``.
    message : str
        Human-readable detail.
    """

    def __init__(self, code, message=""):
        self.code = code
        self.message = message
        super().__init__(f"{code}: {message}" if message else code)

    def to_record(self):
        return {"code": self.code, "message": self.message}
