"""Least squares, IRLS logistic regression, two-way demeaning and cluster-robust covariance."""

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import solve_triangular
from sklearn.base import BaseEstimator, ClassifierMixin

from stagdid.errors import DidError

COLLINEAR_TOL = 1e-10
RIDGE = 1e-8


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Regressor matrix with column names and optional cluster ids / row weights.

    ``n_absorbed`` counts fixed effects removed by demeaning before the fit;
    ``n_absorbed_nested`` is the part of those nested within the clusters
    (unit effects when clustering on unit), which the CR1 factor skips.
    """

    values: np.ndarray
    names: Tuple[str, ...]
    clusters: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    n_absorbed: int = 0
    n_absorbed_nested: int = 0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) != values.shape[1]:
            raise DidError("BAD_DESIGN", f"{len(self.names)} names for {values.shape[1]} columns")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (values.shape[0],) or not np.isfinite(w).all() or (w < 0).any():
                raise DidError("BAD_WEIGHTS", "weights must be finite, nonnegative, one per row")
            object.__setattr__(self, "weights", w)
        if self.clusters is not None:
            object.__setattr__(self, "clusters", np.asarray(self.clusters))

    @classmethod
    def from_array(cls, values, names=None, **kwargs):
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if names is None:
            names = [f"x{j}" for j in range(values.shape[1])]
        return cls(values, tuple(names), **kwargs)

    @property
    def shape(self):
        return self.values.shape


@dataclass(eq=False)
class FitResult:
    coef: np.ndarray
    names: Tuple[str, ...]
    vcov: np.ndarray
    residuals: np.ndarray
    fitted: np.ndarray
    kept: np.ndarray
    dropped: Tuple[str, ...] = ()
    bread: Optional[np.ndarray] = field(default=None, repr=False)
    n_iter: int = 0
    step_norm: float = 0.0
    converged: bool = True
    ridge_used: bool = False

    def get(self, name):
        return self.coef[self.names.index(name)]

    def se(self, name=None):
        s = np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))
        return s if name is None else s[self.names.index(name)]


def independent_columns(values, tol=COLLINEAR_TOL):
    """Indices of columns kept by the earliest-column-wins collinearity rule.

    A column is dropped when its residual norm after projection on the kept
    columns before it is below ``tol`` times its own norm.
    """
    n, p = values.shape
    basis = np.zeros((n, 0))
    kept = []
    for j in range(p):
        x = values[:, j]
        norm = np.linalg.norm(x)
        if norm == 0.0:
            continue
        r = x - basis @ (basis.T @ x)
        r = r - basis @ (basis.T @ r)
        rnorm = np.linalg.norm(r)
        if rnorm < tol * norm:
            continue
        basis = np.column_stack([basis, r / rnorm])
        kept.append(j)
    return np.array(kept, dtype=int)


def _check_finite(*arrays):
    for a in arrays:
        if a is not None and not np.all(np.isfinite(a)):
            raise DidError("NONFINITE_INPUT", "inputs contain NaN or infinite values")


def ols_fit(X: DesignMatrix, y) -> FitResult:
    """Weighted least squares via QR on the non-collinear columns.

    The returned ``vcov`` is the classical ``s^2 (X'WX)^{-1}``; use
    :func:`cluster_robust_vcov` for clustered inference.
    """
    y = np.asarray(y, dtype=float)
    A = X.values
    n = A.shape[0]
    if n < 1 or y.shape != (n,):
        raise DidError("BAD_DESIGN", "y must have one entry per design row")
    _check_finite(A, y)
    sw = np.ones(n) if X.weights is None else np.sqrt(X.weights)
    Aw = A * sw[:, None]
    kept = independent_columns(Aw)
    if len(kept) == 0:
        raise DidError("ALL_COLUMNS_DROPPED", "every column is zero or collinear")
    Q, R = np.linalg.qr(Aw[:, kept])
    coef = solve_triangular(R, Q.T @ (y * sw))
    Rinv = solve_triangular(R, np.eye(len(kept)))
    bread = Rinv @ Rinv.T
    fitted = A[:, kept] @ coef
    resid = y - fitted
    dof = n - len(kept) - X.n_absorbed
    s2 = np.sum((resid * sw) ** 2) / dof if dof > 0 else np.nan
    names = tuple(X.names[j] for j in kept)
    dropped = tuple(X.names[j] for j in range(A.shape[1]) if j not in set(kept))
    return FitResult(coef, names, s2 * bread, resid, fitted, kept, dropped, bread)


def cluster_robust_vcov(fit: FitResult, X: DesignMatrix, clusters=None, count_nested=False):
    """CR1 sandwich ``c (X'WX)^{-1} (sum_c X_c' u_c u_c' X_c) (X'WX)^{-1}``.

    ``c = C/(C-1) * (n-1)/(n-k)`` where ``k`` counts kept columns plus
    absorbed fixed effects, except those nested in the clusters unless
    ``count_nested`` is set.
    """
    clusters = X.clusters if clusters is None else np.asarray(clusters)
    if clusters is None:
        raise DidError("MISSING_CLUSTER", "cluster ids are required")
    codes, _ = _factorize(clusters)
    C = codes.max() + 1
    if C < 2:
        raise DidError("SINGLE_CLUSTER", "at least two clusters are required")
    A = X.values[:, fit.kept]
    w = np.ones(A.shape[0]) if X.weights is None else X.weights
    scores = A * (w * fit.residuals)[:, None]
    S = np.zeros((C, A.shape[1]))
    np.add.at(S, codes, scores)
    meat = S.T @ S
    n = A.shape[0]
    k = len(fit.kept) + X.n_absorbed - (0 if count_nested else X.n_absorbed_nested)
    factor = C / (C - 1) * (n - 1) / (n - k) if n > k else np.nan
    V = factor * fit.bread @ meat @ fit.bread
    return (V + V.T) / 2


def cross_cluster_vcov(fit_a, X_a, fit_b, X_b):
    """Cross-covariance of two least-squares fits sharing the same clusters.

    This is the off-diagonal block of the stacked-moment sandwich, with the
    same CR1-style factor as :func:`cluster_robust_vcov` (geometric mean of
    the two fits' factors).
    """
    codes, _ = _factorize(X_a.clusters)
    codes_b, _ = _factorize(X_b.clusters)
    C = codes.max() + 1
    Sa = np.zeros((C, len(fit_a.kept)))
    Sb = np.zeros((C, len(fit_b.kept)))
    np.add.at(Sa, codes, X_a.values[:, fit_a.kept] * fit_a.residuals[:, None])
    np.add.at(Sb, codes_b, X_b.values[:, fit_b.kept] * fit_b.residuals[:, None])
    n = X_a.values.shape[0]
    ka = len(fit_a.kept) + X_a.n_absorbed - X_a.n_absorbed_nested
    kb = len(fit_b.kept) + X_b.n_absorbed - X_b.n_absorbed_nested
    factor = C / (C - 1) * (n - 1) / np.sqrt((n - ka) * (n - kb))
    return factor * fit_a.bread @ (Sa.T @ Sb) @ fit_b.bread.T


def _factorize(labels):
    uniq, codes = np.unique(np.asarray(labels), return_inverse=True)
    return codes.reshape(-1), uniq


def _sigmoid(eta):
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    e = np.exp(eta[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def logit_fit(X: DesignMatrix, y, max_iter=100, score_tol=1e-8, step_tol=1e-10) -> FitResult:
    """Bernoulli maximum likelihood by iteratively reweighted least squares.

    Converges when the largest score component is below ``score_tol`` or the
    relative step is below ``step_tol``. ``vcov`` is the inverse Fisher
    information.

    Raises
    ------
    DidError
        ``NO_VARIATION`` when ``y`` is constant; ``SEPARATION_DETECTED`` when
        fitted probabilities collapse onto 0/1 for a whole class, a
        standardized coefficient exceeds 1e3 in magnitude, or the fitted
        index separates the classes.
    """
    y = np.asarray(y, dtype=float)
    A = X.values
    _check_finite(A, y)
    if not np.isin(y, (0.0, 1.0)).all():
        raise DidError("BAD_RESPONSE", "logistic response must be 0/1")
    if y.min() == y.max():
        raise DidError("NO_VARIATION", "response is constant")
    w = np.ones(len(y)) if X.weights is None else X.weights
    kept = independent_columns(A * np.sqrt(w)[:, None])
    if len(kept) == 0:
        raise DidError("ALL_COLUMNS_DROPPED", "every column is zero or collinear")
    Z = A[:, kept]
    scale = _column_scale(Z)
    beta = np.zeros(Z.shape[1])
    ridge_used = False
    converged = False
    step_norm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        p = _sigmoid(Z @ beta)
        score = Z.T @ (w * (y - p))
        if _separated(p, y) or _diverged(beta, Z, scale):
            raise DidError("SEPARATION_DETECTED", "fitted probabilities collapse onto 0/1")
        if np.abs(score).max() < score_tol:
            converged = True
            break
        H = (Z * (w * p * (1 - p))[:, None]).T @ Z
        try:
            step = np.linalg.solve(H, score)
            if not np.all(np.isfinite(step)):
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            ridge_used = True
            step = np.linalg.solve(H + RIDGE * np.eye(len(beta)), score)
        beta = beta + step
        step_norm = np.linalg.norm(step)
        if step_norm < step_tol * max(1.0, np.linalg.norm(beta)):
            converged = True
            break
    eta = Z @ beta
    p = _sigmoid(eta)
    if _separated(p, y) or _diverged(beta, Z, scale) or _index_separates(eta, y, Z, w):
        raise DidError("SEPARATION_DETECTED", "fitted probabilities collapse onto 0/1")
    H = (Z * (w * p * (1 - p))[:, None]).T @ Z
    try:
        bread = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        ridge_used = True
        bread = np.linalg.inv(H + RIDGE * np.eye(len(beta)))
    names = tuple(X.names[j] for j in kept)
    dropped = tuple(X.names[j] for j in range(A.shape[1]) if j not in set(kept))
    return FitResult(
        beta, names, bread, y - p, p, kept, dropped, bread,
        n_iter=it, step_norm=float(step_norm), converged=converged, ridge_used=ridge_used,
    )


def _separated(p, y):
    ones, zeros = y == 1, y == 0
    return bool(np.all(p[ones] > 1 - 1e-10) or np.all(p[zeros] < 1e-10))


def _column_scale(Z):
    """Column standard deviations and column means; constant columns get SD 0."""
    sd = Z.std(axis=0)
    sd[sd <= COLLINEAR_TOL * np.maximum(1.0, np.abs(Z).max(axis=0))] = 0.0
    return sd, Z.mean(axis=0)


def _diverged(beta, Z, scale=None, limit=1e3):
    """Coefficients beyond ``limit`` on the standardized scale.

    Slopes are measured per standard deviation of their column and the
    constant as the mean linear index, so the rule does not depend on
    covariate units or location.
    """
    sd, mean = _column_scale(Z) if scale is None else scale
    slopes = np.abs(beta * sd)
    centre = abs(float(mean @ beta))
    return bool(max(slopes.max(initial=0.0), centre) > limit)


def _index_separates(eta, y, Z, w):
    """True when the fitted index splits the classes, so no finite maximizer exists.

    Scaling a separating direction raises the likelihood without bound. The
    threshold may be any value when a constant lies in the column span,
    otherwise it must be zero.
    """
    pos = w > 0
    eta, y, Z = eta[pos], y[pos], Z[pos]
    lo, hi = eta[y == 1].min(), eta[y == 0].max()
    if lo <= hi:
        return False
    ones = np.ones(len(eta))
    resid = ones - Z @ np.linalg.lstsq(Z, ones, rcond=None)[0]
    if np.linalg.norm(resid) < COLLINEAR_TOL * np.sqrt(len(eta)):
        return True
    return lo > 0 > hi


class LogisticIRLS(BaseEstimator, ClassifierMixin):
    """scikit-learn style wrapper around :func:`logit_fit`.

    Parameters
    ----------
    fit_intercept : bool, default=True
    max_iter : int, default=100
    """

    def __init__(self, fit_intercept=True, max_iter=100):
        self.fit_intercept = fit_intercept
        self.max_iter = max_iter

    def _design(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if self.fit_intercept:
            X = np.column_stack([np.ones(len(X)), X])
        return X

    def fit(self, X, y):
        Z = self._design(X)
        y = np.asarray(y)
        self.classes_ = np.array([0, 1])
        self.fit_ = logit_fit(DesignMatrix.from_array(Z), y.astype(float), max_iter=self.max_iter)
        full = np.zeros(Z.shape[1])
        full[self.fit_.kept] = self.fit_.coef
        if self.fit_intercept:
            self.intercept_, self.coef_ = full[0], full[1:]
        else:
            self.intercept_, self.coef_ = 0.0, full
        self.n_iter_ = self.fit_.n_iter
        return self

    def decision_function(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        return self.intercept_ + X @ self.coef_

    def predict_proba(self, X):
        p = _sigmoid(self.decision_function(X))
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)


def demean_two_way(x, tol=COLLINEAR_TOL):
    """Double-demean a balanced ``(n_units, T)`` array.

    Columns that vanish up to rounding (time- or unit-constant inputs) are
    snapped to exact zeros so the collinearity rule drops them.
    """
    x = np.asarray(x, dtype=float)
    out = x - x.mean(axis=1, keepdims=True) - x.mean(axis=0, keepdims=True) + x.mean()
    if np.linalg.norm(out) <= tol * np.linalg.norm(x):
        out = np.zeros_like(out)
    return out


def within_transform(panel, columns: Sequence, extra=None) -> DesignMatrix:
    """Two-way (unit and period) demeaned design from a balanced panel.

    ``columns`` may name panel covariates or be ``(name, (n_units, T) array)``
    pairs; ``extra`` is a mapping of additional named arrays. Rows are
    unit-major and clustered on unit.
    """
    names, mats = [], []
    for col in columns:
        if isinstance(col, str):
            names.append(col)
            mats.append(panel.covariate(col))
        else:
            name, arr = col
            names.append(name)
            mats.append(np.asarray(arr, dtype=float))
    for name, arr in (extra or {}).items():
        names.append(name)
        mats.append(np.asarray(arr, dtype=float))
    n, T = panel.n_units, panel.T
    values = np.column_stack([demean_two_way(m).reshape(-1) for m in mats]) if mats else np.zeros((n * T, 0))
    return DesignMatrix(
        values,
        tuple(names),
        clusters=np.repeat(np.arange(n), T),
        n_absorbed=n + T - 1,
        n_absorbed_nested=n,
    )
