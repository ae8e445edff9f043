"""Per-cell GMM estimation of (theta*, F*) and ATT(g, t).

For a target cell the untreated change ``Y_t - Y_{g-1}`` of every
not-yet-treated group is linear in the group's mean projected pre-period
differences.  One moment per comparison group gives the linear system
``Gamma @ delta = m`` which is solved by weighted least squares; the treated
group's counterfactual change is then predicted from its own pre-period
differences.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DegenerateDenominator,
    EmptyComparisonGroup,
    EmptyTreatedGroup,
    EstimationError,
    InfeasibleCell,
    SingularDesign,
)
from .identification import (
    RANK_TOL,
    CellIndex,
    GammaHat,
    OmegaKind,
    OmegaMatrix,
    OmegaSpec,
    build_omega,
    comparison_set,
    feasible_cells,
    rank_diagnostic,
)
from .inference import CellResults, influence_attgt, stack_influence
from .panel import PanelDataset, first_differences

logger = logging.getLogger(__name__)

COND_LIMIT = 1e12
DEG_TOL = 1e-10
RIDGE = 1e-10


class WeightMode(enum.Enum):
    IDENTITY = "identity"
    TWO_STEP = "two-step"


@dataclass(frozen=True, eq=False)
class CellDesign:
    """Unit-level ingredients of one cell's moment system.

    ``y`` is Y_t - Y_{g-1}; ``xt`` the projected pre-period differences
    (n x r); ``ell`` the comparison indicators scaled by 1/p_g' (n x K).
    """

    cell: CellIndex
    data: PanelDataset = field(repr=False)
    members: tuple
    y: np.ndarray = field(repr=False)
    xt: np.ndarray = field(repr=False)
    ell: np.ndarray = field(repr=False)
    treated: np.ndarray = field(repr=False)
    p_g: float

    @property
    def regressors(self) -> np.ndarray:
        return np.column_stack([np.ones(self.y.shape[0]), self.xt])


def cell_design(cell: CellIndex, omega: OmegaMatrix, data: PanelDataset) -> CellDesign:
    g, t = cell.g, cell.t
    if not (2 <= g <= t <= data.n_periods):
        raise InfeasibleCell("need 2 <= g <= t <= T", cell)
    members = comparison_set(g, t, data.groups_present()).members
    if not members:
        raise EmptyComparisonGroup("no not-yet-treated comparison group", cell)
    groups = data.groups
    n = data.n_units
    y = data.y(t) - data.y(g - 1)
    xt = first_differences(data).pre(g) @ omega.values
    ell = np.empty((n, len(members)))
    for k, gp in enumerate(members):
        ind = groups == gp
        cnt = np.count_nonzero(ind)
        if cnt == 0:
            raise EmptyComparisonGroup(f"comparison group {gp} has no units", cell)
        ell[:, k] = ind * (n / cnt)
    treated = (groups == g).astype(float)
    return CellDesign(cell, data, members, y, xt, ell, treated, float(treated.mean()))


@dataclass(frozen=True, eq=False)
class GmmFit:
    """Fitted nuisance parameters for one cell."""

    cell: CellIndex
    theta_star: float
    f_star: np.ndarray
    gamma: GammaHat
    weight: np.ndarray
    b_matrix: np.ndarray
    moment_values: np.ndarray
    omega: OmegaMatrix = field(repr=False)
    design: CellDesign = field(repr=False)

    @property
    def delta(self) -> np.ndarray:
        return np.concatenate(([self.theta_star], self.f_star))


@dataclass(frozen=True, eq=False)
class AttEstimate:
    cell: CellIndex
    att: float
    fit: GmmFit = field(repr=False)
    a_mean: np.ndarray = field(repr=False)
    influence: np.ndarray | None = field(default=None, repr=False)
    se: float = float("nan")


def _check_weight(weight: np.ndarray, k: int, cell) -> np.ndarray:
    w = np.asarray(weight, dtype=float)
    if w.shape != (k, k):
        raise ValueError(f"weight must be {k}x{k}, got {w.shape}")
    if not np.allclose(w, w.T, rtol=1e-10, atol=1e-12 * np.abs(w).max()):
        raise ValueError("weight matrix must be symmetric")
    if np.linalg.eigvalsh(w).min() <= 0:
        raise ValueError("weight matrix must be positive definite")
    return w


def _fit_design(design, omega, weight, rank_tol, cond_limit) -> GmmFit:
    cell = design.cell
    n = design.y.shape[0]
    Z = design.regressors
    gamma = design.ell.T @ Z / n
    m = design.ell.T @ design.y / n
    k = len(design.members)
    if k < cell.r + 1:
        raise InfeasibleCell(f"{k} comparison group(s) for {cell.r + 1} parameters", cell)
    report = rank_diagnostic(gamma, rank_tol)
    if not report.rank_ok:
        raise SingularDesign(
            f"Gamma is rank deficient (condition number {report.condition_number:.3g})", cell
        )
    W = np.eye(k) if weight is None else _check_weight(weight, k, cell)
    gw = gamma.T @ W
    M = gw @ gamma
    u, s, vt = np.linalg.svd(M)
    if s[-1] <= 0 or s[0] / s[-1] > cond_limit:
        raise SingularDesign("Gamma' W Gamma is numerically singular", cell)
    m_inv = (vt.T / s) @ u.T
    B = m_inv @ gw
    delta = B @ m
    return GmmFit(
        cell=cell,
        theta_star=float(delta[0]),
        f_star=delta[1:].copy(),
        gamma=GammaHat(gamma, cell, design.members),
        weight=W,
        b_matrix=B,
        moment_values=m - gamma @ delta,
        omega=omega,
        design=design,
    )


def estimate_delta_star(
    cell: CellIndex,
    omega: OmegaMatrix,
    data: PanelDataset,
    weight: np.ndarray | None = None,
    rank_tol: float = RANK_TOL,
    cond_limit: float = COND_LIMIT,
) -> GmmFit:
    """GMM estimate of ``delta* = (theta*, F*')'`` for one cell.

    ``delta = (G'WG)^-1 G'W m`` where ``G`` stacks ``(1, mean Omega' dY_pre)``
    and ``m`` the mean of ``Y_t - Y_{g-1}`` over each comparison group.
    ``weight`` defaults to the identity.

    Raises
    ------
    SingularDesign
        If ``G`` fails the relative rank check or ``G'WG`` has condition
        number above ``cond_limit``.
    """
    design = cell_design(cell, omega, data)
    return _fit_design(design, omega, weight, rank_tol, cond_limit)


def baseline_f3_closed_form(moments, scale: float = 1.0, deg_tol: float = DEG_TOL):
    """Closed-form (theta_3*, F_3*) for T=4, groups {3, 4, never}, one factor.

    Parameters
    ----------
    moments : sequence of 4 floats
        ``(E[dY3 | never], E[dY3 | 4], E[dY2 | never], E[dY2 | 4])``.
    scale : float
        Scale of dY_2 used to make the zero-denominator test dimensionless.

    Returns
    -------
    (theta3_star, f3_star)
    """
    dy3_never, dy3_4, dy2_never, dy2_4 = (float(v) for v in moments)
    den = dy2_never - dy2_4
    if abs(den) <= deg_tol * scale:
        raise DegenerateDenominator(
            "groups 4 and never-treated share the period-2 trend; F_3* is not identified"
        )
    f3 = (dy3_never - dy3_4) / den
    return dy3_4 - f3 * dy2_4, f3


def default_weight(
    size: int,
    mode: WeightMode = WeightMode.IDENTITY,
    first_stage: GmmFit | None = None,
    data: PanelDataset | None = None,
    ridge: float = RIDGE,
) -> np.ndarray:
    """Identity, or the inverse covariance of the first-stage moments."""
    mode = WeightMode(mode)
    if mode is WeightMode.IDENTITY:
        return np.eye(size)
    if first_stage is None:
        raise ValueError("two-step weighting needs a first-stage fit")
    design = first_stage.design
    if data is not None and design.data is not data:
        design = cell_design(first_stage.cell, first_stage.omega, data)
    v = design.y - first_stage.theta_star - design.xt @ first_stage.f_star
    gi = design.ell * v[:, None]
    if gi.shape[1] != size:
        raise ValueError(f"first stage has {gi.shape[1]} moments, expected {size}")
    gi = gi - gi.mean(axis=0)
    S = gi.T @ gi / gi.shape[0]
    S = S + ridge * (np.trace(S) / size if np.trace(S) > 0 else 1.0) * np.eye(size)
    W = np.linalg.inv(S)
    return (W + W.T) / 2


def estimate_attgt(cell: CellIndex, fit: GmmFit, data: PanelDataset) -> AttEstimate:
    """ATT_hat(g, t) with its influence function and analytic standard error."""
    design = fit.design
    if design.data is not data:
        design = cell_design(cell, fit.omega, data)
    p = design.p_g
    if p <= 0:
        raise EmptyTreatedGroup(f"no units in group {cell.g}", cell)
    D = design.treated
    a_mean = np.concatenate(([p], (D[:, None] * design.xt).mean(axis=0)))
    att = (np.mean(D * design.y) - a_mean @ fit.delta) / p
    est = AttEstimate(cell, float(att), fit, a_mean)
    psi = influence_attgt(cell, fit, est, data)
    se = float(np.sqrt(np.mean(psi**2) / psi.shape[0]))
    return replace(est, influence=psi, se=se)


def fit_cell(
    cell: CellIndex,
    data: PanelDataset,
    omega_spec: OmegaSpec | None = None,
    weight_mode: WeightMode = WeightMode.IDENTITY,
    rank_tol: float = RANK_TOL,
) -> AttEstimate:
    """Omega construction, GMM fit (one or two step) and ATT for one cell."""
    if omega_spec is None:
        omega_spec = OmegaSpec(OmegaKind.LAST_BLOCK, cell.r)
    members = comparison_set(cell.g, cell.t, data.groups_present()).members
    comp_mask = np.isin(data.groups, members)
    comp_pre = first_differences(data).pre(cell.g)[comp_mask]
    omega = build_omega(omega_spec, cell, comp_pre, rank_tol)
    fit = estimate_delta_star(cell, omega, data, rank_tol=rank_tol)
    if WeightMode(weight_mode) is WeightMode.TWO_STEP:
        W = default_weight(len(members), WeightMode.TWO_STEP, fit, data)
        fit = _fit_design(fit.design, omega, W, rank_tol, COND_LIMIT)
    return estimate_attgt(cell, fit, data)


def estimate_cells(
    data: PanelDataset,
    r: int,
    omega: OmegaKind | str = OmegaKind.LAST_BLOCK,
    weight: WeightMode | str = WeightMode.IDENTITY,
    cells=None,
    keep_going: bool = False,
    omega_periods=None,
    rank_tol: float = RANK_TOL,
) -> CellResults:
    """Estimate every requested cell independently.

    ``cells`` defaults to all feasible cells for ``r`` factors; it may also
    be a list of ``(g, t)`` pairs.  With ``keep_going`` a failing cell is
    recorded in ``failures`` instead of aborting the run.
    """
    spec = OmegaSpec(OmegaKind(omega), r, tuple(omega_periods) if omega_periods else None)
    feasible = feasible_cells(data.groups_present(), data.n_periods, r)
    if cells is None:
        requested = feasible
    else:
        allowed = {c.key for c in feasible}
        requested = []
        for c in cells:
            g, t = (c.g, c.t) if isinstance(c, CellIndex) else (int(c[0]), int(c[1]))
            if (g, t) not in allowed:
                raise InfeasibleCell(
                    f"not identifiable with {r} factor(s)", CellIndex(g, t, r)
                )
            requested.append(CellIndex(g, t, r))
    done, failures = [], {}
    for cell in requested:
        try:
            done.append(fit_cell(cell, data, spec, WeightMode(weight), rank_tol))
        except EstimationError as exc:
            if not keep_going:
                raise
            logger.warning("%s", exc)
            failures[cell] = exc
    panel = stack_influence([a.cell for a in done], [a.influence for a in done])
    return CellResults(
        cells=[a.cell for a in done],
        estimates=np.array([a.att for a in done]),
        panel=panel,
        n_periods=data.n_periods,
        requested=list(requested),
        failures=failures,
        details=done,
        label=f"ife:{r}",
    )
