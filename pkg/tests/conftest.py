import numpy as np
import pandas as pd
import pytest
from hypothesis import HealthCheck, settings

from stagdid.panel import NEVER, PanelDataset
from stagdid.simlab import ScenarioSpec, gen_panel

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_panel(rng, n_units=None, T=None, n_covariates=0):
    """A random balanced panel with at least one never-treated unit and one unit per cohort."""
    T = T or int(rng.integers(2, 7))
    n = n_units or int(rng.integers(6, 201))
    cohorts = list(range(2, T + 1))
    k = int(rng.integers(1, len(cohorts) + 1))
    chosen = sorted(rng.choice(cohorts, size=k, replace=False).tolist())
    g = np.full(n, NEVER)
    perm = rng.permutation(n)
    # guarantee every chosen cohort and the never treated are populated
    for j, c in enumerate(chosen):
        g[perm[j]] = c
    rest = perm[len(chosen) + 1:]
    g[rest] = rng.choice([NEVER] + chosen, size=len(rest))
    y = rng.normal(size=(n, T)) * rng.uniform(0.1, 5) + rng.normal(size=(n, 1)) * 3
    X = rng.normal(size=(n, T, n_covariates))
    return PanelDataset(np.arange(n), tuple(range(1, T + 1)), y, X,
                        tuple(f"x{j + 1}" for j in range(n_covariates)), g)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_frame():
    # two cohorts (2, 3) and two never-treated units over three periods
    rows = []
    data = {
        "a": (2, [1.0, 4.0, 6.0]),
        "b": (2, [2.0, 5.5, 7.0]),
        "c": (3, [0.0, 1.0, 5.0]),
        "d": ("never", [1.0, 2.0, 3.5]),
        "e": ("never", [3.0, 3.5, 4.0]),
    }
    for u, (g, ys) in data.items():
        for t, y in zip((2001, 2002, 2003), ys):
            rows.append({"unit": u, "period": t, "outcome": y, "cohort": g if g == "never" else 2000 + g,
                         "x1": float(ord(u) % 5)})
    return pd.DataFrame(rows)


@pytest.fixture
def reference_like():
    spec = ScenarioSpec({2: 60, 3: 90}, 400, 4, seed=5, tau={(2, 2): 2.3, (2, 3): 3.1, (2, 4): 3.2,
                                                             (3, 3): 0.9, (3, 4): 1.5})
    return gen_panel(spec)[0]
