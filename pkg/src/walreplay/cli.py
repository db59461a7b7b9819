"""walreplay command line: run, explore, fuzz, bench.

Exit status is 0 only when the verdict is pass; 1 for a failed check,
2 for bad arguments or an unparsable scenario.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional

from .harness.explorer import (BoundsExceeded, ExplorerConfig, MAX_FAILURES, MAX_MESSAGES,
                               MAX_TARGETS, explore, replay_file)
from .harness.scenario import ScenarioParseError, bundled, bundled_names, load_scenario
from .harness.system import MUTANTS

EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

MUTANT_NAMES = sorted(m for m in MUTANTS if m)


def _out_dir(path: Optional[str], default: str) -> Path:
    p = Path(path or default)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


# -- run ------------------------------------------------------------------------

def _load(spec: str):
    if Path(spec).is_file():
        return load_scenario(spec)
    if spec in bundled_names():
        return bundled(spec)
    raise FileNotFoundError(f"{spec}: no such file or bundled scenario (bundled: {', '.join(bundled_names())})")


def recovery_report(trace: list) -> list:
    lines = []
    for ev in trace:
        if ev["ev"] == "restart":
            acks = ev["last_acks"]
            reach = ev["reachable"]
            lo = min((acks[str(t)] for t in reach), default=None)
            basis = f"min(last_acks over reachable {reach}) + 1 = {lo + 1}" if lo is not None else "no target reachable"
            lines.append(f"step {ev['step']:>6}  replayer start: main fetcher at {ev['start_index']} ({basis})")
        elif ev["ev"] == "up":
            lines.append(f"step {ev['step']:>6}  target {ev['target']} up: term {ev['term']}, "
                         f"persisted {ev['persisted']}, current_index {ev['current_index']}")
        elif ev["ev"] == "fetcher" and ev["kind"] == "recovery":
            lines.append(f"step {ev['step']:>6}  recovery fetcher for target {ev['target']}: "
                         f"[{ev['start']}, {ev['end']}] term {ev['term']}")
        elif ev["ev"] == "down":
            lines.append(f"step {ev['step']:>6}  target {ev['target']} down (suspended)")
    return lines


def cmd_run(args) -> int:
    from .harness.sim import run_scenario, trace_header, write_counterexample, write_trace
    from .plotting import plot_delays

    try:
        sc = _load(args.scenario)
    except (ScenarioParseError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    if args.mutant:
        sc = sc.with_(mutant=args.mutant)
    r = run_scenario(sc, seed=args.seed)
    out = _out_dir(args.out, f"out/run-{sc.name}-{args.seed}")
    write_trace(r.trace, out / "trace.jsonl", trace_header(sc, args.seed))
    r.metrics.write_csv(out / "records.csv")
    r.metrics.write_summary_csv(out / "summary.csv")
    figures = plot_delays(r.metrics, out, unit="scheduler steps", title=sc.name) if len(r.metrics) else []

    print(f"scenario {sc.name}  seed {args.seed}  targets {sc.targets}  entries {sc.workload.entries}  "
          f"mode {sc.mode.value}  mutant {sc.mutant or '-'}")
    for line in recovery_report(r.trace):
        print("  " + line)
    print(r.metrics.table())
    print(f"steps {r.steps}  faults {r.faults_fired}  drain {r.drain_steps}/{r.drain_budget} "
          f"(liveness is checked as bounded drain)")
    print(f"records {out / 'records.csv'}  trace {out / 'trace.jsonl'}"
          + "".join(f"  figure {p}" for p in figures))
    if not r.ok:
        write_counterexample(r, out / "counterexample.json")
        print(f"counterexample {out / 'counterexample.json'}")
    print(r.verdict())
    return EXIT_PASS if r.ok else EXIT_FAIL


# -- explore --------------------------------------------------------------------

def cmd_explore(args) -> int:
    if args.replay:
        v = replay_file(args.replay)
        print(f"replayed {args.replay}: {v.prop}: {v.detail}")
        return EXIT_FAIL
    modes = ["fail", "flush"] if args.mode == "both" else [args.mode]
    starts = tuple(args.initial_last_ack) if args.initial_last_ack else None
    status = EXIT_PASS
    for mode in modes:
        try:
            cfg = ExplorerConfig(nmessages=args.nmessages, nfailures=args.nfailures,
                                 initial_last_acks=starts, targets=args.targets,
                                 max_batch_size=args.batch_size, mode=mode, mutant=args.mutant,
                                 goal=args.goal, max_states=args.max_states)
            r = explore(cfg, force=args.force)
        except BoundsExceeded as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_USAGE
        except ValueError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_USAGE
        print(r.summary())
        if r.truncated:
            print(f"state bound {cfg.max_states} reached; result incomplete")
            status = EXIT_FAIL
        if r.counterexample is not None:
            out = Path(args.out or f"out/counterexample-{args.mutant or 'ref'}-{mode}.json")
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(r.counterexample.to_json() + "\n")
            print(f"  {r.counterexample.prop}: {r.counterexample.detail}")
            print(f"  choices ({len(r.counterexample.choices)}): {' '.join(r.counterexample.choices)}")
            print(f"  counterexample written to {out}; replay with: walreplay explore --replay {out}")
            status = EXIT_FAIL
    return status


# -- fuzz -----------------------------------------------------------------------

def cmd_fuzz(args) -> int:
    from .harness.fuzz import FuzzBounds, fuzz, random_scenario, run_case
    from .harness.sim import trace_header, write_counterexample, write_trace

    bounds = FuzzBounds(args.max_entries, args.max_targets, args.max_faults)
    if args.case is not None:
        sc = random_scenario(args.case, bounds, args.mutant)
        r = run_case(args.case, bounds, args.mutant)
        out = _out_dir(args.out, f"out/fuzz-case-{args.case}")
        (out / "scenario.scn").write_text(sc.to_text())
        write_trace(r.trace, out / "trace.jsonl", trace_header(sc, args.case))
        if not r.ok:
            write_counterexample(r, out / "counterexample.json")
        print(sc.to_text().rstrip())
        print(f"trace {out / 'trace.jsonl'}")
        print(r.verdict())
        return EXIT_PASS if r.ok else EXIT_FAIL

    rep = fuzz(args.iterations, seed=args.seed, bounds=bounds, mutant=args.mutant,
               stop_after=args.stop_after, report=print)
    print(rep.summary())
    if args.out:
        out = _out_dir(args.out, args.out)
        _write_json(out / "fuzz.json", {"seed": rep.seed, "iterations": rep.iterations,
                                        "mutant": rep.mutant, "seconds": rep.seconds,
                                        "failures": [list(f) for f in rep.failures]})
        for case, _, _ in rep.failures[:10]:
            r = run_case(case, bounds, args.mutant)
            write_counterexample(r, out / f"counterexample-{case}.json")
            write_trace(r.trace, out / f"trace-{case}.jsonl",
                        trace_header(random_scenario(case, bounds, args.mutant), case))
    return EXIT_PASS if rep.ok else EXIT_FAIL


# -- bench ----------------------------------------------------------------------

def cmd_bench(args) -> int:
    from .bench import BenchConfig, run_bench
    from .plotting import plot_delays

    try:
        cfg = BenchConfig(targets=args.targets, payload_kb=args.payload_kb, entries=args.entries,
                          batch_size=args.batch_size, dummy_interval=args.dummy_interval,
                          append_latency_us=args.append_latency_us, seed=args.seed)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    r = run_bench(cfg)
    out = _out_dir(args.out, f"out/bench-{cfg.targets}t-{cfg.payload_kb}kb")
    r.metrics.write_csv(out / "records.csv")
    r.metrics.write_summary_csv(out / "summary.csv", scale=1e-6, unit="ms")
    figures = plot_delays(r.metrics, out, scale=1e-6, unit="ms",
                          title=f"{cfg.targets} targets, {cfg.payload_kb} KB entries")
    bad = r.metrics.disordered()
    print(f"bench targets={cfg.targets} payload={cfg.payload_kb}KB entries={cfg.entries} "
          f"batch={cfg.batch_size} time={r.seconds:.2f}s rate={r.entries_per_second:.0f} entries/s")
    print(r.table())
    print(f"records {out / 'records.csv'}  summary {out / 'summary.csv'}"
          + "".join(f"  figure {p}" for p in figures))
    ok = r.complete and not bad
    if bad:
        print(f"{len(bad)} rows break apply >= dispatch >= commit, e.g. {bad[0]}")
    if not r.complete:
        print("not every entry was applied before the timeout")
    print("PASS" if ok else "FAIL")
    return EXIT_PASS if ok else EXIT_FAIL


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="walreplay", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one scenario under the deterministic scheduler")
    r.add_argument("scenario_pos", nargs="?", metavar="SCENARIO")
    r.add_argument("--scenario", help=f"scenario file or bundled name ({', '.join(bundled_names())})")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--mutant", choices=MUTANT_NAMES)
    r.add_argument("--out", help="output directory")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("explore", help="exhaustively explore interleavings (single target by default)")
    e.add_argument("--nmessages", type=int, default=3)
    e.add_argument("--nfailures", type=int, default=1)
    e.add_argument("--targets", type=int, default=1)
    e.add_argument("--batch-size", type=int, default=2)
    e.add_argument("--initial-last-ack", type=int, nargs="+",
                   help="starting persisted index values (default: every value in 0..nmessages)")
    e.add_argument("--mode", choices=["fail", "flush", "both"], default="both",
                   help="completion-queue behavior for broken streams")
    e.add_argument("--mutant", choices=MUTANT_NAMES)
    e.add_argument("--goal", help="only stop on this property (e.g. duplicate-delivery)")
    e.add_argument("--max-states", type=int, default=3_000_000)
    e.add_argument("--force", action="store_true",
                   help=f"allow bounds above {MAX_MESSAGES} messages / {MAX_FAILURES} failures / "
                        f"{MAX_TARGETS} targets")
    e.add_argument("--out", help="counterexample file")
    e.add_argument("--replay", metavar="FILE", help="replay a counterexample file instead")
    e.set_defaults(func=cmd_explore)

    f = sub.add_parser("fuzz", help="randomized scenarios")
    f.add_argument("--iterations", type=int, default=10_000)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--case", type=int, help="run one case (as printed by a failing fuzz run) with a trace")
    f.add_argument("--mutant", choices=MUTANT_NAMES)
    f.add_argument("--max-entries", type=int, default=50)
    f.add_argument("--max-targets", type=int, default=4)
    f.add_argument("--max-faults", type=int, default=3)
    f.add_argument("--stop-after", type=int, help="stop after this many failures")
    f.add_argument("--out", help="output directory")
    f.set_defaults(func=cmd_fuzz)

    b = sub.add_parser("bench", help="wall-clock latency benchmark on real threads")
    b.add_argument("--targets", type=int, default=4)
    b.add_argument("--payload-kb", type=int, default=1)
    b.add_argument("--entries", type=int, default=10_000)
    b.add_argument("--batch-size", type=int, default=16)
    b.add_argument("--dummy-interval", type=int)
    b.add_argument("--append-latency-us", type=float, default=200.0)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="output directory")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        args.scenario = args.scenario or args.scenario_pos
        if not args.scenario:
            print("error: run needs a scenario (file or bundled name)", file=sys.stderr)
            return EXIT_USAGE
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
