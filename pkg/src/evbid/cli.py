"""Command-line entry point: ``evbid run | compare | validate | expand | list``.

Exit codes: 0 success, 1 validation failure, 2 scenario/schema error,
3 infeasible market, 4 file I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness, market, scenario

EXIT_OK, EXIT_CHECK, EXIT_SCHEMA, EXIT_INFEASIBLE, EXIT_IO = 0, 1, 2, 3, 4


def _load(ref, seed=None):
    """A file path, or the name of a bundled scenario."""
    try:
        return _load_unchecked(ref, seed)
    except scenario.ScenarioError:
        raise
    except (ValueError, KeyError) as exc:
        raise scenario.ScenarioError(str(exc), source=str(ref)) from exc


def _load_unchecked(ref, seed):
    path = Path(ref)
    if not path.exists() and ref in scenario.bundled_names():
        sc = scenario.bundled(ref)
        if seed is not None:
            return scenario.build(sc.raw, seed=seed, source=ref)
        return sc
    return scenario.load(path, seed=seed)


def _parse_sweep(text):
    name, _, values = text.partition("=")
    name = name.strip()
    if name not in ("V", "alpha") or not values:
        raise argparse.ArgumentTypeError("expected V=v1,v2,... or alpha=v1,v2,...")
    try:
        vals = [float(v) for v in values.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    if any(v <= 0 for v in vals):
        raise argparse.ArgumentTypeError("sweep values must be positive")
    return name, vals


def metrics_csv(metrics):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(harness.METRIC_COLUMNS)
    for m in metrics:
        w.writerow([repr(v) if isinstance(v, float) else v for v in m.row()])
    return buf.getvalue()


def summary_json(summary):
    d = summary.to_dict()
    d.pop("runtime_s", None)  # wall time would break byte-identical reruns
    return json.dumps(d, indent=2, sort_keys=True, default=float) + "\n"


def comparison_csv(results):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["algorithm", "total_cost", "relative_value", "unit_cost"])
    labels = {"online": "proposed", "b1": "B1", "b2": "B2", "b3": "B3"}
    for name, total, rel, unit in harness.comparison_table(results):
        w.writerow([labels[name], f"{total:.6f}", f"{rel:.6f}", f"{unit:.6f}"])
    return buf.getvalue()


def _write(out, files):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out / name).write_text(text)


def cmd_run(args):
    sc = _load(args.scenario, args.seed)
    if args.sweep:
        name, values = args.sweep
        sums = harness.sweep(sc, name, values)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([name, "total_cost", "energy_kwh", "completion_rate", "mean_delay"])
        for v, s in sums.items():
            w.writerow([repr(v), repr(s.total_cost), repr(s.energy_kwh), repr(s.completion_rate),
                        repr(harness.mean_delay(s))])
        _write(args.out, {"sweep.csv": buf.getvalue(),
                          "summary.json": json.dumps([json.loads(summary_json(s)) for s in sums.values()],
                                                     indent=2, sort_keys=True) + "\n"})
        sys.stdout.write(buf.getvalue())
        return EXIT_OK
    result = harness.run_strategy(sc, args.strategy, debug=args.debug_solver)
    _write(args.out, {"metrics.csv": metrics_csv(result.metrics), "summary.json": summary_json(result.summary)})
    s = result.summary
    print(f"{s.strategy}: total cost {s.total_cost:.4f}, unit cost {s.unit_cost:.4f}, "
          f"completion {s.completion_rate:.4f}, seed {s.seed}")
    return EXIT_OK


def cmd_compare(args):
    sc = _load(args.scenario, args.seed)
    text = comparison_csv(harness.compare(sc))
    if args.out:
        _write(args.out, {"compare.csv": text})
    sys.stdout.write(text)
    return EXIT_OK


def check_scenario(sc, offline=True):
    """Run the invariant suite on one scenario; returns ``[(name, ok, detail)]``."""
    shape = {"worst": 0.0}

    def watch(t, k, curve, price, x):
        if curve is None or not curve.segments:
            return
        segs = curve.segments
        scale = 1.0 + abs(segs[0].price_hi) * curve.domain_max
        for a, b in zip(segs, segs[1:]):
            shape["worst"] = max(shape["worst"], abs(float(a.value(a.x_hi)) - b.u_lo) / scale,
                                 (b.price_hi - a.price_lo) / (1.0 + abs(a.price_lo)))
        for s in segs:
            shape["worst"] = max(shape["worst"], s.slope)

    run = harness.run_online(sc, observer=watch)
    s = run.summary
    checks = [("bid curve continuous and concave", shape["worst"] <= 1e-9, f"worst {shape['worst']:.2e}"),
              ("market allocation matches own response", s.prop4_max_mismatch <= 1e-4,
               f"max {s.prop4_max_mismatch:.2e}"),
              ("delays within bound", s.delay_violations == 0, f"{s.delay_violations} violations")]
    paid = sum(m.lmp * m.x * sc.params.dt for m in run.metrics)
    rel = abs(paid - s.total_cost) / max(1.0, abs(s.total_cost))
    checks.append(("payments add up", rel <= 1e-6, f"rel {rel:.2e}"))
    over = max((float(np.max(f.energy - f.e_target, initial=0.0)) for f in run.fleets), default=0.0)
    checks.append(("no EV charged past target", over <= 1e-9, f"max excess {over:.2e}"))
    if offline:
        ref = harness.run_offline_oracle(sc, reference=run)
        gap = (s.total_cost - ref.summary.total_cost) / sc.params.horizon
        checks.append(("cost gap within bound", gap <= s.gap_bound, f"gap {gap:.4g} <= {s.gap_bound:.4g}"))
    return checks


def cmd_validate(args):
    targets = []
    if args.scenario:
        targets.append((args.scenario, _load(args.scenario, args.seed)))
    base = 0 if args.seed is None else args.seed
    for i in range(args.fuzz):
        doc = scenario.fuzz_document(base + i)
        targets.append((doc["name"], scenario.build(doc)))
    if not targets:
        print("nothing to validate: give a scenario or --fuzz N", file=sys.stderr)
        return EXIT_SCHEMA
    failed = 0
    for name, sc in targets:
        for check, ok, detail in check_scenario(sc, offline=not args.no_offline):
            failed += not ok
            print(f"{'PASS' if ok else 'FAIL'}  {name}: {check} ({detail})")
    print(f"{len(targets)} scenario(s), {failed} failed check(s)")
    return EXIT_CHECK if failed else EXIT_OK


def cmd_expand(args):
    sc = _load(args.scenario, args.seed)
    scenario.dump(scenario.expand(sc), args.output)
    return EXIT_OK


def cmd_list(args):
    for name in scenario.bundled_names():
        print(name)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="evbid", description="EV aggregator bidding and market clearing.")
    p.add_argument("-v", "--verbose", action="store_true", help="log clearing details")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("scenario", help="scenario JSON file or bundled scenario name")
        sp.add_argument("--seed", type=int, default=None, help="override the scenario seed")

    r = sub.add_parser("run", help="simulate one strategy and write metrics.csv + summary.json")
    common(r)
    r.add_argument("--out", default="out", help="output directory (default: out)")
    r.add_argument("--strategy", choices=harness.STRATEGIES, default="online")
    r.add_argument("--sweep", type=_parse_sweep, default=None, metavar="PARAM=v1,v2,...",
                   help="run the online strategy over V or alpha values")
    r.add_argument("--debug-solver", action="store_true", help="trace active-set iterations")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="proposed method against the three benchmarks (CSV)")
    common(c)
    c.add_argument("--out", default=None, help="also write compare.csv here")
    c.set_defaults(func=cmd_compare)

    v = sub.add_parser("validate", help="check invariants on a scenario and/or fuzzed scenarios")
    v.add_argument("scenario", nargs="?", default=None)
    v.add_argument("--seed", type=int, default=None)
    v.add_argument("--fuzz", type=int, default=0, metavar="N", help="also check N random small scenarios")
    v.add_argument("--no-offline", action="store_true", help="skip the offline cost-gap check")
    v.set_defaults(func=cmd_validate)

    e = sub.add_parser("expand", help="write a scenario with every generated EV spelled out")
    common(e)
    e.add_argument("output")
    e.set_defaults(func=cmd_expand)

    ls = sub.add_parser("list", help="list bundled scenarios")
    ls.set_defaults(func=cmd_list)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose or getattr(args, "debug_solver", False)
                        else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except scenario.ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (market.MarketInfeasibleError, market.SegmentSelectionError) as exc:
        print(f"error: infeasible market: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
