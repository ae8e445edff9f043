"""Event-study, per-group and overall summaries of cell-level estimates.

Share-weighted averages use estimated group probabilities, so their
influence functions carry an extra term for the estimation error in the
weights.  Cells that were requested but could not be estimated are dropped
from every average and listed in ``excluded``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyEventTime, GroupInfeasible, MissingCellEstimate, NoFeasibleCells
from .identification import CellIndex
from .inference import CellResults, InfluencePanel
from .panel import GroupShares

DRIFT_TOL = 1e-14


class AggKind(enum.Enum):
    EVENT_STUDY = "event"
    GROUP = "group"
    OVERALL = "overall"


@dataclass(frozen=True, eq=False)
class AggregationResult:
    kind: AggKind
    index: int | None
    estimate: float
    se: float
    weights: dict
    influence: np.ndarray = field(repr=False)
    excluded: tuple = ()

    @property
    def label(self) -> str:
        if self.kind is AggKind.OVERALL:
            return "overall"
        return f"{self.kind.value}:{self.index}"

    def weight_records(self) -> list[dict]:
        """``[{g, t, weight}, ...]`` for audit and external reweighting."""
        return [
            {"g": c.g, "t": c.t, "weight": w}
            for c, w in sorted(self.weights.items(), key=lambda kv: kv[0].key)
        ]


def _normalize(raw: dict) -> dict:
    total = math.fsum(raw.values())
    w = {k: v / total for k, v in raw.items()}
    drift = abs(math.fsum(w.values()) - 1.0)
    if drift > DRIFT_TOL:
        # push the residual onto the largest weight
        k = max(w, key=w.get)
        w[k] -= math.fsum(w.values()) - 1.0
    return w


def share_weight_influence(shares: GroupShares, groups) -> dict:
    """Linearization of ``p_g / sum_{g' in S} p_g'`` for each ``g`` in ``S``."""
    groups = list(groups)
    pi = math.fsum(shares[g] for g in groups)
    dev = {g: shares.indicator(g) - shares[g] for g in groups}
    total_dev = sum(dev.values())
    return {g: dev[g] / pi - (shares[g] / pi**2) * total_dev for g in groups}


def _se(psi: np.ndarray) -> float:
    return float(np.sqrt(np.mean(psi**2) / psi.shape[0]))


def _cell_map(atts: CellResults) -> dict:
    return {c.key: k for k, c in enumerate(atts.cells)}


def _failed_keys(atts: CellResults) -> set:
    done = {c.key for c in atts.cells}
    return {c.key for c in atts.requested if c.key not in done}


def event_times(atts: CellResults) -> list[int]:
    return sorted({c.event_time for c in atts.cells})


def event_study(atts: CellResults, e: int, shares: GroupShares) -> AggregationResult:
    """Share-weighted average of ATT(g, g+e) over groups where that cell is available."""
    if e < 0:
        raise EmptyEventTime(f"event time {e} < 0 is not defined for this estimator")
    index = _cell_map(atts)
    groups = sorted({c.g for c in atts.requested} | {c.g for c in atts.cells})
    included, excluded = [], []
    for g in groups:
        key = (g, g + e)
        if key in index:
            included.append(g)
        elif g + e <= atts.n_periods:
            excluded.append(CellIndex(g, g + e, atts.requested[0].r if atts.requested else 0))
    if not included:
        raise EmptyEventTime(f"no estimated cell at event time {e}")
    raw = {g: shares[g] for g in included}
    w = _normalize(raw)
    wi = share_weight_influence(shares, included)
    psi = np.zeros(atts.n)
    est = 0.0
    weights = {}
    for g in included:
        k = index[(g, g + e)]
        att = float(atts.estimates[k])
        est += w[g] * att
        psi += w[g] * atts.panel.values[:, k] + att * wi[g]
        weights[atts.cells[k]] = w[g]
    return AggregationResult(AggKind.EVENT_STUDY, e, est, _se(psi), weights, psi, tuple(excluded))


def group_average(atts: CellResults, g: int) -> AggregationResult:
    """Equal-weight average of ATT(g, t) over the estimated periods of group ``g``."""
    ks = [k for k, c in enumerate(atts.cells) if c.g == g]
    if not ks:
        raise GroupInfeasible(f"group {g} has no estimated cell")
    excluded = tuple(c for c in atts.requested if c.g == g and c.key in _failed_keys(atts))
    w = _normalize({atts.cells[k]: 1.0 for k in ks})
    est = math.fsum(w[atts.cells[k]] * float(atts.estimates[k]) for k in ks)
    psi = atts.panel.values[:, ks] @ np.array([w[atts.cells[k]] for k in ks])
    return AggregationResult(AggKind.GROUP, g, est, _se(psi), w, psi, excluded)


def overall(atts: CellResults, shares: GroupShares) -> AggregationResult:
    """Share-weighted average of the per-group averages."""
    groups = sorted({c.g for c in atts.cells})
    if not groups:
        raise NoFeasibleCells("no estimated cells to aggregate")
    per_group = {g: group_average(atts, g) for g in groups}
    wg = _normalize({g: shares[g] for g in groups})
    wi = share_weight_influence(shares, groups)
    psi = np.zeros(atts.n)
    est = 0.0
    raw = {}
    for g in groups:
        r = per_group[g]
        est += wg[g] * r.estimate
        psi += wg[g] * r.influence + r.estimate * wi[g]
        for c, wc in r.weights.items():
            raw[c] = wg[g] * wc
    weights = _normalize(raw)
    excluded = tuple(c for r in per_group.values() for c in r.excluded)
    failed_groups = {c.g for c in atts.requested} - set(groups)
    excluded += tuple(c for c in atts.requested if c.g in failed_groups)
    return AggregationResult(AggKind.OVERALL, None, est, _se(psi), weights, psi, excluded)


def aggregate_all(atts: CellResults, shares: GroupShares, kind: str = "overall") -> list:
    """Every aggregate of one kind: ``event``, ``group``, ``overall`` or ``none``."""
    if kind == "none":
        return []
    if kind == "overall":
        return [overall(atts, shares)]
    if kind == "group":
        return [group_average(atts, g) for g in sorted({c.g for c in atts.cells})]
    if kind == "event":
        return [event_study(atts, e, shares) for e in event_times(atts) if e >= 0]
    raise ValueError(f"unknown aggregate kind {kind!r}")


def aggregate_panel(results) -> InfluencePanel:
    """Stack aggregate influence vectors so they can be bootstrapped jointly."""
    return InfluencePanel(
        np.column_stack([r.influence for r in results]), [r.label for r in results]
    )


def reweight_external(atts_external: dict, weights_from: AggregationResult) -> float:
    """Apply an aggregate's cell weights to externally supplied cell estimates.

    Keys of ``atts_external`` may be :class:`CellIndex` objects or ``(g, t)``
    tuples.  Cells outside this estimator's weight map receive weight zero.
    """
    ext = {}
    for k, v in atts_external.items():
        key = k.key if isinstance(k, CellIndex) else (int(k[0]), int(k[1]))
        ext[key] = float(v)
    total = []
    for cell, w in weights_from.weights.items():
        if w == 0:
            continue
        if cell.key not in ext:
            raise MissingCellEstimate(f"no external estimate for cell {cell.key}", cell)
        total.append(w * ext[cell.key])
    return math.fsum(total)
