"""Command-line entry point: simulate, plan, verify, render, fixtures."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

from . import fixtures as fx
from .planner import PlanError, plan, validate_plan
from .profile import (ParallelConfig, ProfileError, dump_cluster, dump_model_profile,
                      load_cluster, load_model_profile)
from .render import FORMATS, RenderError, render_timeline
from .schedule import Policy
from .semantics import ToyModel, TrainerConfig, loss_curve_compare, verify_grid
from .simulator import SimReport, SimulationError, run

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class InputError(Exception):
    pass


def _policy(text):
    try:
        return Policy.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _read(path):
    try:
        with open(path) as fh:
            return fh.read()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None


def _write(path, text, mode="w"):
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, mode) as fh:
        fh.write(text)


def _inputs(args):
    if getattr(args, "fixture", None):
        try:
            f = fx.figure(args.fixture)
        except KeyError as exc:
            raise InputError(exc.args[0]) from None
        return f.model, f.cluster, f
    if not args.model or not args.cluster:
        raise InputError("--model and --cluster are required unless --fixture is given")
    return load_model_profile(_read(args.model)), load_cluster(_read(args.cluster)), None


def cmd_simulate(args) -> int:
    model, cluster, fixture = _inputs(args)
    if fixture is not None:
        policy = args.policy or fixture.policy
        cfg = fixture.config
        batches = args.batches or fixture.num_batches
    else:
        missing = [f"--{n}" for n in ("policy", "width", "depth", "microbatch")
                   if getattr(args, n) is None]
        if missing:
            raise InputError(f"missing {', '.join(missing)}")
        policy = args.policy
        cfg = ParallelConfig(args.width, args.depth, args.microbatch, recompute=args.recompute,
                             grad_accum=args.accum)
        batches = args.batches or 10
    report = run(policy, model, cluster, cfg, batches)
    first_batch_end = report.batch_end_times[0]
    print(f"policy={policy.value} w={cfg.width} d={cfg.depth} b={cfg.microbatch_size} "
          f"m={cfg.microbatches} recompute={cfg.recompute} batches={batches}")
    print(f"throughput={report.throughput:.6g} samples/s")
    print(f"steady_batch_time={report.steady_batch_time:.6g} s")
    print(f"bubble_fraction={report.bubble_fraction:.4f}")
    print("worker,peak_gb,peak_versions,steady_versions,peak_stashes")
    for w, tr in enumerate(report.memory):
        print(f"{w},{tr.peak_bytes / 1e9:.6g},{tr.peak_versions},"
              f"{tr.peak_versions_after(first_batch_end)},{tr.peak_stashes}")
    steady = max(tr.peak_versions_after(first_batch_end) for tr in report.memory)
    stashes = max(tr.peak_stashes for tr in report.memory)
    print(f"weight versions held (after first batch): {steady}")
    print(f"activation stashes held (max over workers): {stashes}")
    if args.out:
        _write(args.out, report.to_json())
        print(f"report written to {args.out}")
    if args.figures:
        from .plotting import write_report_bundle

        for p in write_report_bundle(report, args.figures):
            print(f"wrote {p}")
    return EXIT_OK


def cmd_plan(args) -> int:
    model = load_model_profile(_read(args.model))
    cluster = load_cluster(_read(args.cluster))
    if args.max_batch < 1:
        raise InputError("--max-batch must be >= 1")
    t = time.perf_counter()
    result = plan(model, cluster, args.max_batch, jobs=args.jobs)
    elapsed = time.perf_counter() - t
    print(result.table(args.top))
    print(f"examined {result.pairs_examined} (w, d) pairs in {elapsed:.3f} s")
    if args.out:
        _write(os.path.join(args.out, "plan.csv"), result.to_csv())
        _write(os.path.join(args.out, "plan.json"), json.dumps(result.to_dict(), indent=2))
        if result.feasible:
            from .plotting import plan_png

            plan_png(result, os.path.join(args.out, "plan.png"))
        print(f"plan written to {args.out}")
    if not result.feasible:
        print("infeasible: no (w, d, b, r) fits in memory under the batch cap", file=sys.stderr)
        return EXIT_FAIL
    if args.validate:
        v = validate_plan(result, model, cluster, args.batches)
        print(f"validate: predicted={v.predicted_throughput:.6g} simulated="
              f"{v.simulated_throughput:.6g} throughput_error={v.throughput_error:.3%} "
              f"memory_error={v.memory_error:.3%} "
              f"allreduce_hidden={v.details.get('allreduce_hidden')}")
        if v.throughput_error > 0.02 or v.memory_error > 0:
            print("validate: prediction error above tolerance", file=sys.stderr)
            return EXIT_FAIL
    return EXIT_OK


def cmd_verify(args) -> int:
    t = time.perf_counter()
    failed = 0
    for name, err, ok, msg in verify_grid(args.grid, inject_delay=args.inject_delay):
        status = "PASS" if ok else "FAIL"
        print(f"{status} {name} rel_err={err:.3g}" + (f" ({msg})" if msg else ""))
        failed += not ok
    cmp = loss_curve_compare(ToyModel.quadratic(), TrainerConfig(0.05, 4, 200))
    ok = cmp.relative_tail_gap < 1e-3
    failed += not ok
    print(f"{'PASS' if ok else 'FAIL'} loss-curve tail gap={cmp.relative_tail_gap:.3g} of scale")
    if args.out:
        _write(os.path.join(args.out, "loss_curves.csv"), cmp.to_csv())
        from .plotting import loss_png

        loss_png(cmp, os.path.join(args.out, "loss_curves.png"))
    print(f"{failed} failure(s) in {time.perf_counter() - t:.2f} s")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_render(args) -> int:
    try:
        report = SimReport.from_json(_read(args.report))
    except ValueError as exc:
        raise InputError(str(exc)) from None
    text = render_timeline(report, args.format, args.start, args.end)
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_fixtures(args) -> int:
    if args.list:
        for name in sorted(fx.FIGURES):
            print(f"{name}: {fx.figure(name).description}")
        return EXIT_OK
    out = args.out
    for name in sorted(fx.FIGURES):
        f = fx.figure(name)
        _write(os.path.join(out, f"{name}_model.json"), dump_model_profile(f.model))
        _write(os.path.join(out, f"{name}_cluster.json"), dump_cluster(f.cluster))
        meta = {"policy": f.policy.value, "config": f.config.to_dict(),
                "num_batches": f.num_batches, "description": f.description}
        _write(os.path.join(out, f"{name}.json"), json.dumps(meta, indent=2))
    _write(os.path.join(out, "uniform_model.json"), dump_model_profile(fx.planner_model()))
    for n in (8, 16, 64):
        _write(os.path.join(out, f"uniform_cluster_{n}.json"), dump_cluster(fx.planner_cluster(n)))
    print(f"fixtures written to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pipesim",
                                description="Pipeline-parallel schedule simulator and planner")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run one configuration through the simulator")
    s.add_argument("--model")
    s.add_argument("--cluster")
    s.add_argument("--fixture", help=f"built-in fixture instead of files ({', '.join(sorted(fx.FIGURES))})")
    s.add_argument("--policy", type=_policy)
    s.add_argument("--width", type=int)
    s.add_argument("--depth", type=int)
    s.add_argument("--microbatch", type=int)
    s.add_argument("--accum", type=int, default=1)
    s.add_argument("--recompute", action="store_true")
    s.add_argument("--batches", type=int)
    s.add_argument("--out", help="write the report document here")
    s.add_argument("--figures", help="directory for PNG figures and CSV tables")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("plan", help="choose width, depth, microbatch size and recomputation")
    s.add_argument("--model", required=True)
    s.add_argument("--cluster", required=True)
    s.add_argument("--max-batch", type=int, required=True)
    s.add_argument("--validate", action="store_true")
    s.add_argument("--batches", type=int, default=50, help="batches simulated by --validate")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--top", type=int, default=10)
    s.add_argument("--out", help="directory for plan.csv, plan.json and plan.png")
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("verify", help="check update semantics against reference training loops")
    s.add_argument("--grid", choices=("small", "full"), default="small")
    s.add_argument("--inject-delay", type=int, default=None, help=argparse.SUPPRESS)
    s.add_argument("--out", help="directory for loss_curves.csv and loss_curves.png")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("render", help="draw a saved report as a Gantt chart")
    s.add_argument("--report", required=True)
    s.add_argument("--format", choices=FORMATS, default="ascii")
    s.add_argument("--out")
    s.add_argument("--start", type=float)
    s.add_argument("--end", type=float)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("fixtures", help="write the built-in fixtures as JSON files")
    s.add_argument("--out", default="fixtures")
    s.add_argument("--list", action="store_true")
    s.set_defaults(func=cmd_fixtures)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name in ("jobs", "batches", "width", "depth", "microbatch", "accum"):
        v = getattr(args, name, None)
        if v is not None and v < 1:
            print(f"error: --{name} must be >= 1", file=sys.stderr)
            return EXIT_USAGE
    try:
        return args.func(args)
    except (InputError, ProfileError, RenderError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SimulationError, PlanError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except ValueError as exc:
        # schedule shape errors such as 2BW with m < d
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
