"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""
import itertools
import time

import pytest

from pipesim import costmodel
from pipesim.fixtures import PLANNER_MAX_BATCH, figure, planner_cluster, planner_model
from pipesim.planner import plan, simulated_best, simulated_throughput
from pipesim.profile import GB, ParallelConfig, partition_equal, uniform_profile
from pipesim.render import render_svg, svg_ops
from pipesim.schedule import Policy, weight_version_2bw
from pipesim.semantics import ToyModel, TrainerConfig, loss_curve_compare, verify_grid
from pipesim.simulator import measure_high_water, run

from conftest import big_cluster

GRID_D = (1, 2, 4, 8)
GRID_G = (1, 2, 4)
GRID_BATCHES = 5


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail, elapsed, budget):
        ok = ok and elapsed < budget
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail} [{elapsed:.2f}s / {budget:g}s]")
        return ok
    return emit


# 8 blocks split evenly for every grid depth
GRID_MODEL = uniform_profile(8, 1.0, 2.0, 0.5 * GB, 0.3 * GB, 0.1 * GB,
                             act_boundary_bytes=0.05 * GB)


def _grid_runs(recompute=(False,)):
    for pol, d, g, r in itertools.product(Policy, GRID_D, GRID_G, recompute):
        model = GRID_MODEL
        cfg = ParallelConfig(1, d, 1, grad_accum=g, recompute=r)
        yield pol, model, cfg, run(pol, model, big_cluster(d, low=10.0), cfg, GRID_BATCHES)


def test_criterion_1_version_formula(report):
    t = time.perf_counter()
    formula = weight_version_2bw(9, 4)
    f = figure("figure2")
    rep = run(f.policy, f.model, f.cluster, f.config, f.num_batches)
    labelled = (3, "F", "9", "1") in set(svg_ops(render_svg(rep)))
    ok = report(1, formula == 1 and labelled,
                f"weight_version_2bw(9,4)={formula}, figure-2 worker 4 F9 labelled v1: {labelled}",
                time.perf_counter() - t, 1.0)
    assert ok


def test_criterion_2_version_counts(report):
    t = time.perf_counter()
    bad = []
    n = 0
    for pol, _, cfg, rep in _grid_runs():
        n += 1
        d = cfg.depth
        after = rep.batch_end_times[0]
        steady = [tr.peak_versions_after(after) for tr in rep.memory]
        peak = [tr.peak_versions for tr in rep.memory]
        if pol is Policy.TWO_BW:
            good = all(v == 2 for v in steady) and max(peak) == 2
        elif pol is Policy.PIPEDREAM:
            good = max(peak) <= d
        else:
            good = all(v == 1 for v in peak)
        if not good:
            bad.append((pol.value, d, cfg.grad_accum, peak))
    ok = report(2, not bad, f"{n} runs, violations: {bad[:3]}", time.perf_counter() - t, 10.0)
    assert ok


def test_criterion_3_stash_counts(report):
    t = time.perf_counter()
    bad = []
    n = 0
    for pol, _, cfg, rep in _grid_runs():
        n += 1
        d, m = cfg.depth, cfg.microbatches
        peak = max(tr.peak_stashes for tr in rep.memory)
        if pol is Policy.GPIPE:
            good = peak == m
        elif pol in (Policy.FLUSH, Policy.TWO_BW):
            good = peak <= d
        else:
            good = True
        if not good:
            bad.append((pol.value, d, m, peak))
    ok = report(3, not bad, f"{n} runs, violations: {bad[:3]}", time.perf_counter() - t, 10.0)
    assert ok


def test_criterion_4_memory_agreement(report):
    t = time.perf_counter()
    bad = []
    n = 0
    for pol, model, cfg, rep in _grid_runs(recompute=(False, True)):
        n += 1
        want = costmodel.memory_per_stage(partition_equal(model, cfg.depth), cfg, pol)
        if measure_high_water(rep) != want:
            bad.append((pol.value, cfg.depth, cfg.grad_accum, cfg.recompute))
    # worked examples: 8 GB weights, 4 GB activations, 1 GB stage input, d=4
    ex = uniform_profile(4, 1.0, 2.0, 2 * GB, 1 * GB, 1 * GB)
    two_bw = run(Policy.TWO_BW, ex, big_cluster(4), ParallelConfig(1, 4, 1, recompute=True), 5)
    gpipe = run(Policy.GPIPE, ex, big_cluster(4),
                ParallelConfig(1, 4, 1, recompute=True, grad_accum=2), 3)
    examples = (measure_high_water(two_bw)[0] / GB, measure_high_water(gpipe)[0] / GB)
    ok = report(4, not bad and examples == (9.0, 11.0),
                f"{n} runs exact, worked examples {examples[0]:g} GB and {examples[1]:g} GB, "
                f"mismatches: {bad[:3]}", time.perf_counter() - t, 10.0)
    assert ok


def test_criterion_5_semantics(report):
    t = time.perf_counter()
    rows = list(verify_grid("small", num_batches=20))
    worst = max(err for _, err, _, _ in rows)
    failed = [name for name, _, good, _ in rows if not good]
    ok = report(5, not failed and worst <= 1e-10,
                f"{len(rows)} cases, max relative error {worst:.2e}, failures: {failed[:3]}",
                time.perf_counter() - t, 60.0)
    assert ok


def test_criterion_6_costmodel_vs_simulator(report):
    t = time.perf_counter()
    model = uniform_profile(8, 2.0, 4.0, 0.25 * GB, 0.05 * GB, 0.01 * GB,
                            act_boundary_bytes=0.01 * GB, batch_sizes=(1, 8), time_exponent=0.8)
    worst = 0.0
    n = skipped = 0
    for d, w, g, b, r, low in itertools.product(GRID_D, (1, 4, 16), GRID_G, (1, 8),
                                                (False, True), (10.0, 1.0)):
        cl = big_cluster(w * d, low=low)
        cfg = ParallelConfig(w, d, b, grad_accum=g, recompute=r)
        stages = partition_equal(model, d)
        # a longer all-reduce than the 1-stale slack stalls forwards; see allreduce_hidden
        if not costmodel.allreduce_hidden(stages, cl, cfg):
            skipped += 1
            continue
        pred = costmodel.throughput_pipelined(stages, cl, cfg)
        rep = run(Policy.TWO_BW, model, cl, cfg, 50)
        worst = max(worst, abs(rep.throughput - pred) / pred)
        n += 1
    ok = report(6, worst <= 0.02 and n > 0,
                f"{n} 2BW fixtures x 50 batches, max error {worst:.2e} "
                f"({skipped} all-reduce-bound fixtures outside the grid)",
                time.perf_counter() - t, 120.0)
    assert ok


def test_criterion_7_planner_optimality(report):
    t = time.perf_counter()
    model = planner_model()
    ratios = {}
    for n in (8, 16):
        cl = planner_cluster(n)
        res = plan(model, cl, PLANNER_MAX_BATCH)
        best, _ = simulated_best(model, cl, PLANNER_MAX_BATCH, num_batches=5)
        ratios[n] = simulated_throughput(res.best, model, cl, 5) / best.throughput
    t64 = time.perf_counter()
    plan(model, planner_cluster(64), PLANNER_MAX_BATCH)
    t64 = time.perf_counter() - t64
    ok = report(7, all(r >= 0.98 for r in ratios.values()) and t64 < 1.0,
                f"chosen/oracle = {ratios[8]:.4f} (N=8), {ratios[16]:.4f} (N=16); "
                f"plan at N=64 took {t64:.3f}s", time.perf_counter() - t, 300.0)
    assert ok


def test_criterion_8_trends(report):
    t = time.perf_counter()
    # (a) flush policies amortize the bubble as m grows
    model = uniform_profile(8, 1.0, 2.0, 0.5 * GB, 0.1 * GB, 0.05 * GB,
                            act_boundary_bytes=0.01 * GB)
    mono = True
    for pol, d in itertools.product((Policy.GPIPE, Policy.FLUSH), (2, 4, 8)):
        thr = [run(pol, model, big_cluster(2 * d), ParallelConfig(2, d, 1, grad_accum=g), 4)
               .throughput for g in (1, 2, 4, 8)]
        mono &= all(a < b for a, b in zip(thr, thr[1:]))

    # (b) 16 replicas span two servers, so the all-reduce rides the slow link
    heavy = uniform_profile(4, 10.0, 20.0, 1 * GB, 0.02 * GB, 0.002 * GB,
                            act_boundary_bytes=0.002 * GB)
    cfg = ParallelConfig(16, 4, 1, grad_accum=8)
    speedups = []
    for low in (25.0, 10.0, 5.0, 2.5):
        cl = big_cluster(64, low=low)
        fast = run(Policy.TWO_BW, heavy, cl, cfg, 6).throughput
        base = run(Policy.NO_PIPELINING, heavy, cl, cfg, 6).throughput
        speedups.append(fast / base)
    grows = speedups[0] > 1 and all(a < b for a, b in zip(speedups, speedups[1:]))

    # (c) recomputation inflates per-microbatch compute by (2f + b) / (f + b)
    factors = []
    for fwd, bwd in ((1.0, 2.0), (1.0, 3.0), (2.0, 5.0)):
        for pol, d in itertools.product((Policy.TWO_BW, Policy.FLUSH), (1, 2, 4)):
            m = uniform_profile(d, fwd, bwd, 0.0, 0.0, 0.0)
            plain = run(pol, m, big_cluster(d), ParallelConfig(1, d, 1, grad_accum=2), 10)
            rec = run(pol, m, big_cluster(d),
                      ParallelConfig(1, d, 1, grad_accum=2, recompute=True), 10)
            factors.append(rec.steady_batch_time / plain.steady_batch_time)
    in_range = all(1 < f <= 4 / 3 + 1e-9 for f in factors)

    ok = report(8, mono and grows and in_range,
                f"(a) monotone in m: {mono}; (b) 2BW/no-pipelining at B_low 25,10,5,2.5 GB/s = "
                + ", ".join(f"{s:.2f}" for s in speedups)
                + f"; (c) recompute factor in [{min(factors):.4f}, {max(factors):.4f}]",
                time.perf_counter() - t, 60.0)
    assert ok


def test_criterion_9_loss_tracking(report):
    t = time.perf_counter()
    cmp = loss_curve_compare(ToyModel.quadratic(), TrainerConfig(0.05, 4, 200))
    ok = report(9, cmp.relative_tail_gap < 1e-3,
                f"tail gap {cmp.max_tail_gap:.3e} = {cmp.relative_tail_gap:.2e} of loss scale "
                f"{cmp.loss_scale:.3e}", time.perf_counter() - t, 10.0)
    assert ok
