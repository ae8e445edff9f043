"""Influence functions, joint covariance and the multiplier bootstrap.

Influence values are on the root-n scale: for a cell estimate,
``sqrt(n) * (att_hat - att) ~ n**-0.5 * sum_i psi_i``, so the analytic
standard error is ``sqrt(mean(psi**2) / n)``.
"""

from __future__ import annotations

import enum
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .errors import LengthMismatch, TooFewDraws
from .rng import derive_key, stream

# z_{0.75} - z_{0.25} for the standard normal
NORMAL_IQR = 1.348979500392164

DEFAULT_DRAWS = 999


class WeightLaw(enum.Enum):
    RADEMACHER = "rademacher"
    NORMAL = "normal"


def _rademacher(rng, n):
    return rng.integers(0, 2, size=n) * 2.0 - 1.0


def _normal(rng, n):
    return rng.standard_normal(n)


_LAWS = {WeightLaw.RADEMACHER: _rademacher, WeightLaw.NORMAL: _normal}


@dataclass(frozen=True, eq=False)
class InfluencePanel:
    """``values[:, k]`` is the influence vector of the k-th estimate."""

    values: np.ndarray
    cells: list

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def column(self, cell) -> np.ndarray:
        return self.values[:, self.cells.index(cell)]


@dataclass(eq=False)
class CellResults:
    """Cell-level estimates with their stacked influence functions.

    Produced by every cell estimator in the package (the GMM estimator and
    the comparison estimators alike) so aggregation and inference are shared.
    ``requested`` lists the cells that were attempted; ``failures`` maps
    cells that could not be estimated to the exception raised.
    """

    cells: list
    estimates: np.ndarray
    panel: InfluencePanel
    n_periods: int
    requested: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)
    details: list = field(default_factory=list, repr=False)
    label: str = ""

    def __post_init__(self):
        if not self.requested:
            self.requested = list(self.cells)

    @property
    def n(self) -> int:
        return self.panel.n

    @property
    def se(self) -> np.ndarray:
        return analytic_se(self.panel)

    def index(self, g, t) -> int | None:
        for k, c in enumerate(self.cells):
            if c.g == g and c.t == t:
                return k
        return None

    def estimate(self, g, t) -> float:
        k = self.index(g, t)
        if k is None:
            raise KeyError((g, t))
        return float(self.estimates[k])

    def as_map(self) -> dict:
        return {(c.g, c.t): float(v) for c, v in zip(self.cells, self.estimates)}


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    """Root-n scaled bootstrap deviations ``sqrt(n) * (att_star - att_hat)``."""

    draws: np.ndarray
    seed: object
    weight_law: object
    estimates: np.ndarray
    n: int

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    def bootstrap_estimates(self) -> np.ndarray:
        return self.estimates + self.draws / math.sqrt(self.n)


def influence_attgt(cell, fit, att, data) -> np.ndarray:
    """Plug-in influence function of ATT_hat(g, t).

    Sum of four pieces: sampling error in the treated group's outcome
    change, estimation error in (theta*, F*) propagated through
    ``B = (G'WG)^-1 G'W``, sampling error in the treated group's pre-period
    regressors, and sampling error in the treated share ``p_g``.
    """
    design = fit.design
    if design.data is not data:
        from .estimator import cell_design

        design = cell_design(cell, fit.omega, data)
    p = design.p_g
    D = design.treated
    y = design.y
    delta = fit.delta
    a_mean = att.a_mean

    dy = D * y
    psi1 = (dy - dy.mean()) / p
    v = y - fit.theta_star - design.xt @ fit.f_star
    coef = fit.b_matrix.T @ a_mean
    psi2 = -((design.ell * v[:, None]) @ coef) / p
    A = D[:, None] * design.regressors
    psi3 = -((A - a_mean) @ delta) / p
    psi4 = -(att.att / p) * (D - p)
    return psi1 + psi2 + psi3 + psi4


def stack_influence(cells: Sequence, per_cell: Sequence) -> InfluencePanel:
    cells = list(cells)
    per_cell = [np.asarray(v, dtype=float) for v in per_cell]
    if len(cells) != len(per_cell):
        raise LengthMismatch(f"{len(cells)} cells but {len(per_cell)} influence vectors")
    if not per_cell:
        return InfluencePanel(np.zeros((0, 0)), cells)
    n = per_cell[0].shape[0]
    bad = [k for k, v in enumerate(per_cell) if v.shape != (n,)]
    if bad:
        raise LengthMismatch(f"influence vector {bad[0]} does not have length {n}")
    return InfluencePanel(np.column_stack(per_cell), cells)


def joint_vcov(panel: InfluencePanel) -> np.ndarray:
    """Estimated covariance of the stacked estimates, ``E_n[Psi Psi'] / n``."""
    psi = panel.values
    n = psi.shape[0]
    return (psi.T @ psi) / n / n


def analytic_se(panel: InfluencePanel) -> np.ndarray:
    psi = panel.values
    n = psi.shape[0]
    return np.sqrt(np.mean(psi**2, axis=0) / n)


def _resolve_law(weight_law) -> Callable:
    if callable(weight_law) and not isinstance(weight_law, WeightLaw):
        return weight_law
    return _LAWS[WeightLaw(weight_law)]


def multiplier_bootstrap(
    panel: InfluencePanel,
    estimates,
    B: int = DEFAULT_DRAWS,
    weight_law=WeightLaw.RADEMACHER,
    seed=0,
    workers: int = 1,
    chunk: int = 256,
) -> BootstrapResult:
    """Perturb influence values with iid mean-zero, unit-variance multipliers.

    Draw ``b`` uses its own random stream keyed on ``(seed, b)``, so the
    result is identical whether draws are generated serially or split
    across ``workers`` threads.

    ``weight_law`` is a :class:`WeightLaw` or a callable ``(rng, n) -> zeta``.
    """
    if B < 1:
        raise TooFewDraws("need at least one bootstrap draw")
    psi = np.asarray(panel.values, dtype=float)
    n, K = psi.shape
    if n == 0 or K == 0:
        raise ValueError("influence panel is empty")
    estimates = np.asarray(estimates, dtype=float)
    if estimates.shape != (K,):
        raise LengthMismatch(f"{K} influence columns but {estimates.shape} estimates")
    law = _resolve_law(weight_law)
    key = derive_key(seed)
    scale = 1.0 / math.sqrt(n)

    psi_t = np.ascontiguousarray(psi.T)

    # one matrix-vector product per draw: a blocked matrix product would
    # round differently depending on how the draws are chunked
    def run(b0, b1):
        out = np.empty((b1 - b0, K))
        for j, b in enumerate(range(b0, b1)):
            out[j] = psi_t @ law(stream(key, b), n)
        return out * scale

    bounds = [(b0, min(b0 + chunk, B)) for b0 in range(0, B, chunk)]
    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda ab: run(*ab), bounds))
    else:
        parts = [run(*ab) for ab in bounds]
    draws = np.vstack(parts)
    return BootstrapResult(draws, seed, weight_law, estimates, n)


def bootstrap_sigma(result: BootstrapResult) -> np.ndarray:
    """IQR-based scale of the root-n draws, one per column."""
    if result.n_draws < 2:
        raise TooFewDraws(f"need at least 2 draws, got {result.n_draws}")
    if result.n_draws < 20:
        warnings.warn("fewer than 20 bootstrap draws; quantiles are unstable", stacklevel=2)
    q25, q75 = np.quantile(result.draws, [0.25, 0.75], axis=0, method="weibull")
    return (q75 - q25) / NORMAL_IQR


def se_from_bootstrap(result: BootstrapResult, cell_index: int) -> float:
    """Standard error of estimate ``cell_index`` from the bootstrap IQR."""
    sigma = bootstrap_sigma(result)[cell_index]
    return float(sigma / math.sqrt(result.n))


def uniform_critical_value(result: BootstrapResult, level: float = 0.95) -> float:
    """Sup-t critical value for simultaneous bands over all columns."""
    sigma = bootstrap_sigma(result)
    keep = sigma > 0
    if not keep.any():
        return float("nan")
    t = np.max(np.abs(result.draws[:, keep]) / sigma[keep], axis=1)
    return float(np.quantile(t, level, method="weibull"))


@dataclass(frozen=True)
class WaldResult:
    z: float
    p: float
    ci_low: float
    ci_high: float


def wald(estimate: float, se: float, level: float = 0.95, null: float = 0.0) -> WaldResult:
    """Two-sided normal test of ``estimate == null`` and the matching interval."""
    crit = stats.norm.ppf(0.5 + level / 2)
    if not se > 0:
        return WaldResult(float("nan"), float("nan"), estimate, estimate)
    z = (estimate - null) / se
    p = 2 * stats.norm.sf(abs(z))
    return WaldResult(float(z), float(p), estimate - crit * se, estimate + crit * se)
