"""Balanced panel ingestion and the basic transforms the estimator needs.

Groups are stored as floats: a finite value ``g`` is the first treated
period (re-indexed so the first observed period is 1) and ``NEVER``
(``math.inf``) marks never-treated units.  Using infinity keeps the natural
ordering ``g' > t`` correct for the never-treated group without a magic
integer that could collide with a real period.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    EmptyDataset,
    FirstPeriodTreated,
    GroupOutOfRange,
    MissingCell,
    PanelValidationError,
)

logger = logging.getLogger(__name__)

NEVER = math.inf
REQUIRED_COLUMNS = ("unit", "period", "outcome", "group")


def is_never(g) -> bool:
    return math.isinf(g)


def format_group(g) -> str:
    return "inf" if is_never(g) else str(int(g))


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Balanced ``n x T`` outcome matrix with one group label per unit.

    Attributes
    ----------
    outcomes : ndarray, shape (n, T)
        ``outcomes[i, t-1]`` is Y_it for periods ``t = 1..T``.
    groups : ndarray, shape (n,)
        Treatment start period in ``{2..T}`` or ``NEVER``.
    unit_ids : tuple
        Original unit identifiers, in row order.
    first_period : int
        Original label of period 1, so period ``t`` maps back to
        ``first_period + t - 1``.
    """

    outcomes: np.ndarray
    groups: np.ndarray
    unit_ids: tuple = ()
    first_period: int = 1

    def __post_init__(self):
        y = _frozen(self.outcomes)
        g = _frozen(self.groups)
        if y.ndim != 2:
            raise PanelValidationError("outcomes must be a 2-d array")
        if y.shape[0] == 0:
            raise EmptyDataset("panel has no units")
        if g.shape != (y.shape[0],):
            raise PanelValidationError("groups must have one entry per unit")
        n, T = y.shape
        if T < 3:
            raise PanelValidationError(f"need at least 3 periods, got {T}")
        if not np.all(np.isfinite(y)):
            raise MissingCell("outcomes contain missing or non-finite values")
        finite = g[np.isfinite(g)]
        if np.any(finite != np.round(finite)):
            raise PanelValidationError("group labels must be integers or NEVER")
        if np.any(finite <= 1):
            raise FirstPeriodTreated(
                f"{int(np.sum(finite <= 1))} unit(s) treated in the first period"
            )
        if np.any(finite > T):
            raise GroupOutOfRange(f"group label exceeds the last period {T}")
        if np.any(np.isnan(g)) or np.any(g == -np.inf):
            raise PanelValidationError("invalid group label")
        ids = tuple(self.unit_ids) if len(self.unit_ids) else tuple(range(n))
        if len(ids) != n:
            raise PanelValidationError("unit_ids length does not match outcomes")
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "groups", g)
        object.__setattr__(self, "unit_ids", ids)

    @property
    def n_units(self) -> int:
        return self.outcomes.shape[0]

    @property
    def n_periods(self) -> int:
        return self.outcomes.shape[1]

    T = n_periods

    @property
    def periods(self) -> list[int]:
        return list(range(1, self.n_periods + 1))

    def groups_present(self) -> tuple:
        """Distinct group labels, ascending with NEVER last."""
        return tuple(sorted(set(self.groups.tolist())))

    def y(self, t: int) -> np.ndarray:
        """Outcome column for period ``t`` (1-based)."""
        return self.outcomes[:, t - 1]

    def with_outcomes(self, outcomes) -> "PanelDataset":
        return PanelDataset(outcomes, self.groups, self.unit_ids, self.first_period)


@dataclass(frozen=True, eq=False)
class DiffPanel:
    """First differences; ``diffs[:, t-2]`` holds Y_it - Y_i,t-1 for t = 2..T."""

    diffs: np.ndarray
    source: PanelDataset = field(repr=False)

    def column(self, t: int) -> np.ndarray:
        if not 2 <= t <= self.source.n_periods:
            raise IndexError(f"difference period {t} out of range")
        return self.diffs[:, t - 2]

    def pre(self, g) -> np.ndarray:
        """Pre-treatment differences for group ``g``: columns t = 2..g-1."""
        return self.diffs[:, : int(g) - 2]


@dataclass(frozen=True)
class GroupShares:
    """Empirical group probabilities plus the unit-level labels they came from."""

    probs: dict
    labels: np.ndarray = field(repr=False, compare=False)

    def __getitem__(self, g):
        return self.probs[g]

    def indicator(self, g) -> np.ndarray:
        return (self.labels == g).astype(float)


def first_differences(data: PanelDataset) -> DiffPanel:
    d = np.diff(data.outcomes, axis=1)
    d.setflags(write=False)
    return DiffPanel(d, data)


def group_shares(data: PanelDataset) -> GroupShares:
    n = data.n_units
    probs = {g: float(np.count_nonzero(data.groups == g)) / n for g in data.groups_present()}
    return GroupShares(probs, data.groups)


def periods_without_comparison(data: PanelDataset) -> list[int]:
    """Periods in which every unit is already treated.

    Such periods cannot be used by any comparison-group strategy; users are
    expected to trim them before estimation.
    """
    gmax = float(np.max(data.groups))
    return [t for t in data.periods if not gmax > t]


def _parse_group(raw: str, line: int):
    s = raw.strip().lower()
    if s in ("inf", "+inf", "infinity"):
        return NEVER
    try:
        v = float(s)
    except ValueError:
        raise PanelValidationError(f"group value {raw!r} is not an integer or 'inf'", line)
    if not math.isfinite(v) or v != int(v):
        raise PanelValidationError(f"group value {raw!r} is not an integer or 'inf'", line)
    return int(v)


def _parse_period(raw: str, line: int) -> int:
    try:
        v = float(raw)
    except ValueError:
        raise PanelValidationError(f"period value {raw!r} is not an integer", line)
    if not math.isfinite(v) or v != int(v):
        raise PanelValidationError(f"period value {raw!r} is not an integer", line)
    return int(v)


def load_panel(source, drop_g1: bool = False) -> PanelDataset:
    """Read a long-format CSV (``unit,period,outcome,group``) into a panel.

    Parameters
    ----------
    source : str, Path or text stream
        File path or an open text stream.
    drop_g1 : bool
        Drop units treated in (or before) the first period instead of
        raising :class:`FirstPeriodTreated`.  The number dropped is logged.

    Raises
    ------
    MissingCell, FirstPeriodTreated, GroupOutOfRange, EmptyDataset,
    PanelValidationError
    """
    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8") as fh:
            return _read(fh, drop_g1)
    return _read(source, drop_g1)


def _read(fh, drop_g1: bool) -> PanelDataset:
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise EmptyDataset("input is empty")
    except csv.Error as exc:
        raise PanelValidationError(str(exc), 1)
    header = [h.strip().lstrip("﻿") for h in header]
    missing = [c for c in REQUIRED_COLUMNS if c not in header]
    if missing:
        raise PanelValidationError(f"missing column(s): {', '.join(missing)}", 1)
    idx = {c: header.index(c) for c in REQUIRED_COLUMNS}

    cells: dict = {}
    unit_group: dict = {}
    unit_order: list = []
    try:
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise PanelValidationError(
                    f"expected {len(header)} fields, found {len(row)}", line
                )
            unit = row[idx["unit"]].strip()
            period = _parse_period(row[idx["period"]], line)
            try:
                y = float(row[idx["outcome"]])
            except ValueError:
                raise PanelValidationError(
                    f"outcome value {row[idx['outcome']]!r} is not a number", line
                )
            if not math.isfinite(y):
                raise MissingCell(f"outcome for unit {unit!r} is not finite", line)
            g = _parse_group(row[idx["group"]], line)
            if unit not in unit_group:
                unit_group[unit] = g
                unit_order.append(unit)
            elif unit_group[unit] != g:
                raise PanelValidationError(f"unit {unit!r} has more than one group value", line)
            if (unit, period) in cells:
                raise PanelValidationError(
                    f"duplicate observation for unit {unit!r}, period {period}", line
                )
            cells[(unit, period)] = y
    except csv.Error as exc:
        raise PanelValidationError(str(exc), reader.line_num)

    if not cells:
        raise EmptyDataset("input has a header but no observations")

    period_values = sorted({p for _, p in cells})
    p0, p1 = period_values[0], period_values[-1]
    if len(period_values) != p1 - p0 + 1:
        raise PanelValidationError(
            "period values are not a contiguous integer range; map calendar dates to indices first"
        )
    T = p1 - p0 + 1

    early = [u for u in unit_order if not is_never(unit_group[u]) and unit_group[u] <= p0]
    if early:
        if not drop_g1:
            raise FirstPeriodTreated(
                f"{len(early)} unit(s) treated in the first period (e.g. unit {early[0]!r}); "
                "pass drop_g1 to drop them"
            )
        logger.warning("dropping %d unit(s) treated in the first period", len(early))
        dropped = set(early)
        unit_order = [u for u in unit_order if u not in dropped]
        if not unit_order:
            raise EmptyDataset("no units left after dropping first-period-treated units")
    late = [u for u in unit_order if not is_never(unit_group[u]) and unit_group[u] > p1]
    if late:
        raise GroupOutOfRange(
            f"unit {late[0]!r} has group {unit_group[late[0]]} beyond the last period {p1}; "
            "use 'inf' for never-treated units"
        )

    n = len(unit_order)
    y = np.empty((n, T))
    for i, u in enumerate(unit_order):
        for t in range(T):
            try:
                y[i, t] = cells[(u, p0 + t)]
            except KeyError:
                raise MissingCell(f"unit {u!r} has no observation for period {p0 + t}")
    groups = np.array(
        [NEVER if is_never(unit_group[u]) else unit_group[u] - p0 + 1 for u in unit_order],
        dtype=float,
    )
    data = PanelDataset(y, groups, tuple(unit_order), p0)
    gaps = periods_without_comparison(data)
    if gaps:
        logger.warning(
            "no untreated units remain in period(s) %s; trim them before estimation",
            [p0 + t - 1 for t in gaps],
        )
    return data


def write_panel(data: PanelDataset, dest=None) -> str | None:
    """Serialize to the long CSV format read by :func:`load_panel`.

    Outcomes are written with ``repr`` so a round trip is bit-exact.  Returns
    the CSV text when ``dest`` is None.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REQUIRED_COLUMNS)
    p0 = data.first_period
    for i, u in enumerate(data.unit_ids):
        g = data.groups[i]
        glabel = "inf" if is_never(g) else str(int(g) + p0 - 1)
        for t in range(data.n_periods):
            w.writerow([u, p0 + t, repr(float(data.outcomes[i, t])), glabel])
    text = buf.getvalue()
    if dest is None:
        return text
    if isinstance(dest, (str, Path)):
        Path(dest).write_text(text, encoding="utf-8")
    else:
        dest.write(text)
    return None
