"""Comparison groups, feasible cells, the Omega projection and rank checks."""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    EmptyComparisonGroup,
    InfeasibleCell,
    InsufficientComparisonGroups,
    NoFeasibleCells,
    RankDeficientOmega,
)
from .panel import PanelDataset, first_differences, is_never

RANK_TOL = 1e-8


@dataclass(frozen=True, order=True)
class CellIndex:
    """Target cell ATT(g, t) estimated with ``r`` interactive fixed effects."""

    g: int
    t: int
    r: int = 0

    @property
    def event_time(self) -> int:
        return self.t - self.g

    @property
    def key(self) -> tuple[int, int]:
        return (self.g, self.t)


@dataclass(frozen=True)
class ComparisonSet:
    members: tuple

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __contains__(self, g):
        return g in self.members


class OmegaKind(enum.Enum):
    LAST_BLOCK = "last-block"
    PRINCIPAL_COMPONENTS = "pca"


@dataclass(frozen=True)
class OmegaSpec:
    """How to compress the ``g-2`` pre-period differences to ``r`` regressors.

    ``periods`` (LAST_BLOCK only) replaces the default "last r differences"
    with an explicit list of difference periods; each must precede the
    treated group's first period.
    """

    kind: OmegaKind = OmegaKind.LAST_BLOCK
    r: int = 0
    periods: tuple | None = None

    def __post_init__(self):
        if self.r < 0:
            raise ValueError("number of factors must be non-negative")
        if self.periods is not None:
            if self.kind is not OmegaKind.LAST_BLOCK:
                raise ValueError("explicit Omega periods only apply to LAST_BLOCK")
            if len(self.periods) != self.r:
                raise ValueError(
                    f"need exactly {self.r} Omega periods, got {len(self.periods)}"
                )


@dataclass(frozen=True, eq=False)
class OmegaMatrix:
    values: np.ndarray
    kind: OmegaKind = OmegaKind.LAST_BLOCK

    @property
    def estimated(self) -> bool:
        return self.kind is OmegaKind.PRINCIPAL_COMPONENTS


@dataclass(frozen=True, eq=False)
class GammaHat:
    """Rows ``(1, mean of Omega' dY_pre(g) within g')`` for each comparison group."""

    values: np.ndarray
    cell: CellIndex
    members: tuple = ()


@dataclass(frozen=True)
class RankReport:
    rank_ok: bool
    singular_values: list
    condition_number: float


@dataclass
class TrendGapReport:
    g: int
    t: int
    comparison_groups: tuple
    pairwise_trend_gaps: dict
    z_scores: dict = field(repr=False)
    suggests_more_factors: bool = False

    @property
    def flag(self) -> bool:
        return self.suggests_more_factors


def comparison_set(g, t, groups_present: Iterable) -> ComparisonSet:
    """Groups not yet treated at ``t`` (NEVER included), ascending, NEVER last."""
    if is_never(g):
        raise ValueError("target group must be finite")
    if t < g:
        raise ValueError(f"t={t} precedes treatment start g={g}")
    return ComparisonSet(tuple(sorted(gp for gp in set(groups_present) if gp > t)))


def t_max(g, groups_present: Iterable, T: int, r: int) -> int | None:
    """Last period with at least ``r + 1`` comparison groups, or None."""
    groups = set(groups_present)
    last = None
    for t in range(int(g), T + 1):
        if len(comparison_set(g, t, groups)) >= r + 1:
            last = t
        else:
            break
    return last


def feasible_cells(groups_present: Iterable, T: int, r: int) -> list[CellIndex]:
    """All identifiable cells, ordered by ``g`` then ``t``.

    Raises
    ------
    NoFeasibleCells
        If no treated group has ``g - 2 >= r`` together with ``r + 1``
        not-yet-treated comparison groups at ``t = g``.
    """
    if r < 0:
        raise ValueError("number of factors must be non-negative")
    groups = set(groups_present)
    cells = []
    for g in sorted(gp for gp in groups if not is_never(gp)):
        g = int(g)
        if g - 2 < r or g > T:
            continue
        tm = t_max(g, groups, T, r)
        if tm is None:
            continue
        cells.extend(CellIndex(g, t, r) for t in range(g, tm + 1))
    if not cells:
        raise NoFeasibleCells(
            f"no identifiable (g, t) cells with {r} factor(s): every treated group "
            "lacks enough pre-periods or not-yet-treated comparison groups"
        )
    return cells


def _selection_matrix(n_pre: int, rows: Sequence[int]) -> np.ndarray:
    omega = np.zeros((n_pre, len(rows)))
    for j, row in enumerate(rows):
        omega[row, j] = 1.0
    return omega


def build_omega(
    spec: OmegaSpec,
    cell: CellIndex,
    comp_prediffs: np.ndarray | None = None,
    rank_tol: float = RANK_TOL,
) -> OmegaMatrix:
    """Construct the ``(g-2) x r`` Omega matrix for one cell.

    ``comp_prediffs`` holds the pre-period differences (columns t = 2..g-1)
    of the comparison-group units.  It is required for principal components
    and, when given, is also used to check that the projected regressors are
    not collinear.
    """
    n_pre, r = cell.g - 2, spec.r
    if r != cell.r:
        raise ValueError(f"Omega spec has r={r} but cell has r={cell.r}")
    if n_pre < r:
        raise InfeasibleCell(f"only {n_pre} pre-period difference(s) for {r} factor(s)", cell)
    if r == 0:
        return OmegaMatrix(np.zeros((n_pre, 0)), spec.kind)

    centered = None
    if comp_prediffs is not None:
        x = np.asarray(comp_prediffs, dtype=float)
        if x.ndim != 2 or x.shape[1] != n_pre:
            raise ValueError(f"comparison pre-differences must have {n_pre} columns")
        centered = x - x.mean(axis=0)

    if spec.kind is OmegaKind.LAST_BLOCK:
        if spec.periods is None:
            rows = list(range(n_pre - r, n_pre))
        else:
            bad = [p for p in spec.periods if not 2 <= p <= cell.g - 1]
            if bad:
                raise InfeasibleCell(f"Omega periods {bad} are not pre-treatment differences", cell)
            rows = [p - 2 for p in spec.periods]
        omega = _selection_matrix(n_pre, rows)
    else:
        if centered is None or centered.shape[0] < r:
            raise RankDeficientOmega("principal components need at least r comparison units", cell)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        omega = vt[:r].T.copy()
        for j in range(r):
            col = omega[:, j]
            if col[np.argmax(np.abs(col))] < 0:
                omega[:, j] = -col

    s_omega = np.linalg.svd(omega, compute_uv=False)
    if s_omega[-1] <= rank_tol * s_omega[0]:
        raise RankDeficientOmega("Omega does not have full column rank", cell)
    if centered is not None:
        s_all = np.linalg.svd(centered, compute_uv=False)
        s_proj = np.linalg.svd(centered @ omega, compute_uv=False)
        if s_all.size == 0 or s_all[0] == 0 or s_proj[-1] <= rank_tol * s_all[0]:
            raise RankDeficientOmega(
                "projected pre-period differences of the comparison groups are collinear", cell
            )
    return OmegaMatrix(omega, spec.kind)


def gamma_hat(
    cell: CellIndex,
    omega: OmegaMatrix,
    data: PanelDataset,
    members: Iterable | None = None,
) -> GammaHat:
    if members is None:
        members = comparison_set(cell.g, cell.t, data.groups_present()).members
    members = tuple(members)
    if not members:
        raise EmptyComparisonGroup("no not-yet-treated comparison group", cell)
    pre = first_differences(data).pre(cell.g) @ omega.values
    rows = []
    for gp in members:
        mask = data.groups == gp
        if not mask.any():
            raise EmptyComparisonGroup(f"comparison group {gp} has no units", cell)
        rows.append(np.concatenate(([1.0], pre[mask].mean(axis=0))))
    return GammaHat(np.array(rows), cell, members)


def rank_diagnostic(gamma, tol: float = RANK_TOL) -> RankReport:
    """Relative rank check: ok iff sigma_{r+1} / sigma_1 > tol."""
    g = gamma.values if isinstance(gamma, GammaHat) else np.asarray(gamma, dtype=float)
    k = g.shape[1]
    s = np.linalg.svd(g, compute_uv=False)
    if s.size < k or s[0] == 0:
        return RankReport(False, s.tolist(), float("inf"))
    ratio = s[k - 1] / s[0]
    cond = float("inf") if s[k - 1] == 0 else float(s[0] / s[k - 1])
    return RankReport(bool(ratio > tol), s.tolist(), cond)


def _z(gap: float, se: float, scale: float) -> float:
    if se > 0:
        return gap / se
    if abs(gap) <= 1e-12 * (1.0 + scale):
        return 0.0
    return float(np.sign(gap)) * float("inf")


def factor_count_diagnostic(
    data: PanelDataset, g, t: int, z_crit: float = 1.96
) -> TrendGapReport:
    """Compare trends across not-yet-treated groups as an informal factor check.

    For every pair of comparison groups at ``t`` and every period s = 2..t,
    reports the gap in mean first differences.  The flag is raised when for
    some pair every pre-period gap (s < g) is statistically indistinguishable
    from zero while the period-``t`` gap is not: flat pre-trends that later
    diverge point to a factor that was not moving before treatment.
    """
    comp = comparison_set(g, t, data.groups_present()).members
    if len(comp) < 2:
        raise InsufficientComparisonGroups(
            f"need two not-yet-treated groups at t={t}, found {len(comp)}"
        )
    d = first_differences(data)
    scale = float(np.std(d.diffs)) if d.diffs.size else 0.0
    stats = {}
    for gp in comp:
        x = d.diffs[data.groups == gp]
        var = x.var(axis=0, ddof=1) if x.shape[0] > 1 else np.zeros(x.shape[1])
        stats[gp] = (x.mean(axis=0), var / x.shape[0])
    gaps, zs = {}, {}
    flag = False
    for a, b in itertools.combinations(comp, 2):
        (ma, va), (mb, vb) = stats[a], stats[b]
        for s in range(2, t + 1):
            gap = float(ma[s - 2] - mb[s - 2])
            gaps[(a, b, s)] = gap
            zs[(a, b, s)] = _z(gap, float(np.sqrt(va[s - 2] + vb[s - 2])), scale)
        pre_flat = all(abs(zs[(a, b, s)]) <= z_crit for s in range(2, int(g)))
        if pre_flat and abs(zs[(a, b, t)]) > z_crit:
            flag = True
    return TrendGapReport(int(g), t, comp, gaps, zs, flag)
