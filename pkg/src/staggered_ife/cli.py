"""Command-line interface: ``estimate``, ``simulate`` and ``diagnose``.

Exit codes: 0 success, 2 invalid input or arguments, 3 estimation failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import aggregate as agg
from . import simulate as sim
from .errors import EstimationError, PanelValidationError, StaggeredIFEError
from .estimator import WeightMode, estimate_cells
from .identification import (
    CellIndex,
    OmegaKind,
    OmegaSpec,
    build_omega,
    comparison_set,
    factor_count_diagnostic,
    feasible_cells,
    gamma_hat,
    rank_diagnostic,
)
from .inference import (
    DEFAULT_DRAWS,
    InfluencePanel,
    WeightLaw,
    multiplier_bootstrap,
    se_from_bootstrap,
    uniform_critical_value,
    wald,
)
from .panel import first_differences, group_shares, is_never, load_panel

EXIT_OK, EXIT_INPUT, EXIT_ESTIMATION = 0, 2, 3
THREADS_ENV = "STAGGERED_IFE_THREADS"

log = logging.getLogger("staggered_ife")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _clean(x):
    """JSON-safe value: NaN and infinities become null, numpy scalars become Python."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _write_json(path: Path, obj) -> None:
    # json serializes floats with repr, i.e. the shortest string that round-trips
    path.write_text(json.dumps(_clean(obj), indent=2, allow_nan=False) + "\n", encoding="utf-8")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["" if isinstance(v, float) and not math.isfinite(v) else
                        repr(v) if isinstance(v, float) else v for v in row])


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _threads(arg) -> int:
    if arg is not None:
        n = arg
    elif os.environ.get(THREADS_ENV):
        try:
            n = int(os.environ[THREADS_ENV])
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer")
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise UsageError("thread count must be at least 1")
    return n


def _write_manifest(out: Path, command: str, flags: dict, inputs: dict, seeds, outputs, started):
    manifest = {
        "command": command,
        "flags": flags,
        "inputs": {name: {"path": str(p), "sha256": _sha256(p)} for name, p in inputs.items()},
        "seeds": seeds,
        "version": __version__,
        "started": started,
        "finished": dt.datetime.now(dt.timezone.utc).isoformat(),
        "outputs": {p.name: _sha256(p) for p in outputs},
    }
    _write_json(out / "manifest.json", manifest)


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return "NA"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _print_table(header, rows, stream=None) -> None:
    stream = stream or sys.stdout
    cells = [[_fmt(v) for v in row] for row in rows]
    widths = [max(len(h), *(len(r[k]) for r in cells)) if cells else len(h)
              for k, h in enumerate(header)]
    print("  ".join(h.rjust(w) for h, w in zip(header, widths)), file=stream)
    for r in cells:
        print("  ".join(v.rjust(w) for v, w in zip(r, widths)), file=stream)


def _parse_cells(text: str):
    if text == "all":
        return None
    out = []
    for item in text.replace(";", " ").split():
        try:
            g, t = item.split(",")
            out.append((int(g), int(t)))
        except ValueError:
            raise UsageError(f"bad cell {item!r}; expected g,t pairs such as '5,5 5,6'")
    if not out:
        raise UsageError("--cells is empty")
    return out


def _prepare_out(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- estimate


def cmd_estimate(args) -> int:
    started = dt.datetime.now(dt.timezone.utc).isoformat()
    if args.bootstrap < 0:
        raise UsageError("--bootstrap must be non-negative")
    if args.bootstrap == 1:
        raise UsageError("--bootstrap needs at least 2 draws")
    if args.omega_periods and args.omega != "last-block":
        raise UsageError("--omega-periods only applies to --omega last-block")
    threads = _threads(args.threads)
    data = load_panel(args.data, drop_g1=args.drop_g1)
    p0 = data.first_period
    cells = _parse_cells(args.cells)
    if cells is not None:
        cells = [(g - p0 + 1, t - p0 + 1) for g, t in cells]
    omega_periods = None
    if args.omega_periods:
        omega_periods = [int(p) - p0 + 1 for p in args.omega_periods.split(",")]
    # surfaces NoFeasibleCells before any estimation work
    feasible_cells(data.groups_present(), data.n_periods, args.factors)
    if args.bootstrap > 0 and args.seed is None:
        raise UsageError("--seed is required when --bootstrap > 0")

    res = estimate_cells(
        data, args.factors, OmegaKind(args.omega), WeightMode(args.weight),
        cells=cells, keep_going=args.keep_going, omega_periods=omega_periods,
    )
    shares = group_shares(data)
    aggs = []
    if res.cells:
        for kind in (["event", "group", "overall"] if args.aggregate == "all" else [args.aggregate]):
            aggs.extend(agg.aggregate_all(res, shares, kind))

    labels = [f"cell:{c.g},{c.t}" for c in res.cells] + [a.label for a in aggs]
    estimates = np.concatenate([res.estimates, [a.estimate for a in aggs]])
    analytic = np.concatenate([res.se, [a.se for a in aggs]]) if labels else np.zeros(0)
    se = analytic
    crit_uniform = None
    if labels and args.bootstrap > 0:
        psi = np.column_stack([res.panel.values] + [a.influence[:, None] for a in aggs])
        boot = multiplier_bootstrap(
            InfluencePanel(psi, labels), estimates, args.bootstrap,
            WeightLaw(args.mult), seed=args.seed, workers=threads,
        )
        se = np.array([se_from_bootstrap(boot, k) for k in range(len(labels))])
        if res.cells:
            cell_boot = multiplier_bootstrap(
                res.panel, res.estimates, args.bootstrap, WeightLaw(args.mult),
                seed=args.seed, workers=threads,
            )
            crit_uniform = uniform_critical_value(cell_boot, args.level)

    def period(t):
        return t + p0 - 1

    cell_rows = []
    for k, c in enumerate(res.cells):
        w = wald(float(estimates[k]), float(se[k]), args.level)
        row = {
            "g": period(c.g), "t": period(c.t), "e": c.event_time, "att": float(estimates[k]),
            "se": float(se[k]), "se_analytic": float(analytic[k]),
            "ci_low": w.ci_low, "ci_high": w.ci_high, "z": w.z, "p": w.p,
        }
        if crit_uniform is not None and math.isfinite(crit_uniform):
            row["band_low"] = row["att"] - crit_uniform * row["se"]
            row["band_high"] = row["att"] + crit_uniform * row["se"]
        cell_rows.append(row)
    agg_rows = []
    for j, a in enumerate(aggs):
        k = len(res.cells) + j
        w = wald(a.estimate, float(se[k]), args.level)
        index = None if a.index is None else (period(a.index) if a.kind is agg.AggKind.GROUP else a.index)
        agg_rows.append({
            "kind": a.kind.value, "index": index, "estimate": a.estimate, "se": float(se[k]),
            "se_analytic": a.se, "ci_low": w.ci_low, "ci_high": w.ci_high, "z": w.z, "p": w.p,
            "weights": [{"g": period(r["g"]), "t": period(r["t"]), "weight": r["weight"]}
                        for r in a.weight_records()],
            "excluded": [{"g": period(c.g), "t": period(c.t)} for c in a.excluded],
        })

    failures = [
        {"g": period(c.g), "t": period(c.t), "error": type(e).__name__, "message": str(e)}
        for c, e in res.failures.items()
    ]
    out = _prepare_out(args.out)
    cell_cols = ["g", "t", "e", "att", "se", "se_analytic", "ci_low", "ci_high", "z", "p"]
    if crit_uniform is not None and math.isfinite(crit_uniform):
        cell_cols += ["band_low", "band_high"]
    _write_csv(out / "cells.csv", cell_cols, [[r[c] for c in cell_cols] for r in cell_rows])
    agg_cols = ["kind", "index", "estimate", "se", "se_analytic", "ci_low", "ci_high", "z", "p"]
    _write_csv(out / "aggregates.csv", agg_cols,
               [["" if r[c] is None else r[c] for c in agg_cols] for r in agg_rows])
    report = {
        "manifest": "manifest.json",
        "n_units": data.n_units,
        "n_periods": data.n_periods,
        "factors": args.factors,
        "omega": args.omega,
        "se_method": "bootstrap" if args.bootstrap > 0 else "analytic",
        "se_note": "uncorrected for estimated Omega" if args.omega == "pca" else None,
        "uniform_critical_value": crit_uniform,
        "cells": cell_rows,
        "aggregates": agg_rows,
        "failures": failures,
    }
    _write_json(out / "results.json", report)
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    _write_manifest(
        out, "estimate", flags, {"data": Path(args.data)}, [args.seed],
        [out / "cells.csv", out / "aggregates.csv", out / "results.json"], started,
    )

    _print_table(["g", "t", "att", "se", "ci_low", "ci_high"],
                 [[r["g"], r["t"], r["att"], r["se"], r["ci_low"], r["ci_high"]] for r in cell_rows])
    if agg_rows:
        print()
        _print_table(["aggregate", "index", "estimate", "se"],
                     [[r["kind"], "" if r["index"] is None else r["index"], r["estimate"], r["se"]]
                      for r in agg_rows])
    for f in failures:
        print(f"failed: cell (g={f['g']}, t={f['t']}): {f['error']}: {f['message']}", file=sys.stderr)
    return EXIT_ESTIMATION if failures else EXIT_OK


# ---------------------------------------------------------------- simulate


def _sim_summaries(args):
    overrides = {}
    if args.se_method:
        overrides["se_method"] = args.se_method
    if args.preset:
        if args.config:
            raise UsageError("use either --preset or --config, not both")
        n = args.n if args.n is not None else 1000
        reps = args.reps if args.reps is not None else 1000
        seed = args.seed if args.seed is not None else 0
        if reps < 1:
            raise UsageError("--reps must be at least 1")
        if args.preset == "table1":
            return sim.table1_configs(n, reps, seed, **overrides), sim.TABLE1_ROWS, ("overall",)
        return (sim.table2_configs(n, reps, seed, **overrides), sim.TABLE2_ROWS,
                ("overall", "es:0", "es:1", "es:2"))
    if not args.config:
        raise UsageError("simulate needs --preset or --config")
    try:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config: {exc}")
    for key in ("n", "reps", "seed"):
        if getattr(args, key) is not None:
            raw[key] = getattr(args, key)
    raw.update(overrides)
    if raw.get("reps", 1) < 1:
        raise UsageError("--reps must be at least 1")
    try:
        cfg = sim.SimConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}")
    rows = tuple((e, e) for e in cfg.estimators)
    return {"config": cfg}, rows, cfg.parameters


def cmd_simulate(args) -> int:
    started = dt.datetime.now(dt.timezone.utc).isoformat()
    if args.reps is not None and args.reps < 1:
        raise UsageError("--reps must be at least 1")
    workers = _threads(args.threads)
    configs, rows, params = _sim_summaries(args)
    summaries = {}
    for name, cfg in configs.items():
        log.info("running %s (%d reps)", name, cfg.reps)
        summaries[name] = sim.run_monte_carlo(cfg, workers=workers)
    out = _prepare_out(args.out)
    stem = args.preset or "simulation"
    header = ["parameter"] + sim.table_header(summaries)
    table = []
    for p in params:
        table.extend([p] + r for r in sim.table_rows(summaries, rows, p))
    _write_csv(out / f"{stem}.csv", header, table)
    archive = {
        "manifest": "manifest.json",
        "designs": {name: s.to_dict(include_records=True) for name, s in summaries.items()},
    }
    _write_json(out / f"{stem}_archive.json", archive)
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    inputs = {"config": Path(args.config)} if args.config else {}
    _write_manifest(
        out, "simulate", flags, inputs, [c.seed for c in configs.values()],
        [out / f"{stem}.csv", out / f"{stem}_archive.json"], started,
    )
    _print_table(header, table)
    fails = {f"{d}/{e}": k for d, s in summaries.items() for e, k in s.failures.items() if k}
    if fails:
        print(f"failed replications (excluded): {fails}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------- diagnose


def cmd_diagnose(args) -> int:
    started = dt.datetime.now(dt.timezone.utc).isoformat()
    data = load_panel(args.data, drop_g1=args.drop_g1)
    p0 = data.first_period
    r = args.factors
    labels = data.groups_present()
    feasible = set()
    try:
        feasible = {c.key for c in feasible_cells(labels, data.n_periods, r)}
    except PanelValidationError:
        pass
    d = first_differences(data)
    reports = []
    for g in (int(x) for x in labels if not is_never(x)):
        for t in range(g, data.n_periods + 1):
            cell = CellIndex(g, t, r)
            comp = comparison_set(g, t, labels).members
            entry = {"g": g + p0 - 1, "t": t + p0 - 1, "comparison_groups":
                     [c if is_never(c) else int(c) + p0 - 1 for c in comp]}
            if (g, t) not in feasible:
                entry.update(feasible=False, reason=(
                    f"needs {r} pre-period difference(s) and {r + 1} not-yet-treated "
                    f"group(s); has {g - 2} and {len(comp)}"))
            else:
                entry["feasible"] = True
                try:
                    comp_pre = d.pre(g)[np.isin(data.groups, comp)]
                    omega = build_omega(OmegaSpec(OmegaKind(args.omega), r), cell, comp_pre)
                    rep = rank_diagnostic(gamma_hat(cell, omega, data, comp))
                    entry.update(rank_ok=rep.rank_ok, singular_values=rep.singular_values,
                                 condition_number=rep.condition_number)
                except EstimationError as exc:
                    entry.update(rank_ok=False, reason=str(exc))
            if len(comp) >= 2:
                tg = factor_count_diagnostic(data, g, t, args.z_crit)
                entry["suggests_more_factors"] = tg.suggests_more_factors
                entry["max_abs_trend_gap_z"] = max(
                    (abs(z) for (a, b, s), z in tg.z_scores.items() if s == t), default=None)
            reports.append(entry)
    out = _prepare_out(args.out)
    _write_json(out / "diagnostics.json", {"manifest": "manifest.json", "factors": r,
                                           "omega": args.omega, "cells": reports})
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    _write_manifest(out, "diagnose", flags, {"data": Path(args.data)}, [],
                    [out / "diagnostics.json"], started)
    _print_table(["g", "t", "feasible", "rank_ok", "more_factors?"],
                 [[e["g"], e["t"], e["feasible"], e.get("rank_ok", ""),
                   e.get("suggests_more_factors", "")] for e in reports])
    return EXIT_OK


# ---------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="staggered-ife", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--out", default="out", help="output directory (created if missing)")
        sp.add_argument("--threads", type=int, default=None,
                        help=f"worker cap; falls back to ${THREADS_ENV}, then the core count")

    e = sub.add_parser("estimate", help="estimate ATT(g,t) and aggregates from a CSV panel")
    e.add_argument("data", help="long CSV with columns unit,period,outcome,group")
    e.add_argument("--factors", type=int, default=1, metavar="R")
    e.add_argument("--omega", choices=["last-block", "pca"], default="last-block")
    e.add_argument("--omega-periods", default=None,
                   help="comma-separated difference periods replacing the last-R default")
    e.add_argument("--weight", choices=["identity", "two-step"], default="identity")
    e.add_argument("--cells", default="all", help="'all' or pairs like '5,5 5,6'")
    e.add_argument("--aggregate", choices=["none", "event", "group", "overall", "all"],
                   default="all")
    e.add_argument("--bootstrap", type=int, default=DEFAULT_DRAWS, metavar="B",
                   help="multiplier bootstrap draws (0 for analytic standard errors)")
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--mult", choices=["rademacher", "normal"], default="rademacher")
    e.add_argument("--level", type=float, default=0.95)
    e.add_argument("--keep-going", action="store_true",
                   help="record failing cells and continue")
    e.add_argument("--drop-g1", action="store_true",
                   help="drop units treated in the first period")
    common(e)
    e.set_defaults(func=cmd_estimate)

    s = sub.add_parser("simulate", help="run Monte Carlo designs")
    s.add_argument("--config", default=None, help="JSON file mirroring SimConfig")
    s.add_argument("--preset", choices=["table1", "table2"], default=None)
    s.add_argument("--reps", type=int, default=None)
    s.add_argument("--n", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--se-method", choices=["analytic", "bootstrap"], default=None)
    common(s)
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("diagnose", help="rank and factor-count diagnostics per cell")
    d.add_argument("data")
    d.add_argument("--factors", type=int, default=1, metavar="R")
    d.add_argument("--omega", choices=["last-block", "pca"], default="last-block")
    d.add_argument("--z-crit", type=float, default=1.96)
    d.add_argument("--drop-g1", action="store_true")
    common(d)
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    if getattr(args, "factors", 0) is not None and getattr(args, "factors", 0) < 0:
        print("error: --factors must be non-negative", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (PanelValidationError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except EstimationError as exc:
        print(f"estimation failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except (StaggeredIFEError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
