"""Exhaustive width/depth sweep with per-configuration microbatch search."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Tuple

from . import costmodel
from .profile import ClusterSpec, ModelProfile, ParallelConfig, partition_equal
from .schedule import Policy
from .simulator import run as simulate_policy

# executions considered for every (w, d): pipelined 2BW with or without
# recomputation, and plain model parallelism with a flush per batch
EXECUTIONS = (Policy.TWO_BW, Policy.NO_PIPELINING)


class PlanError(RuntimeError):
    pass


@dataclass(frozen=True)
class Candidate:
    config: ParallelConfig
    execution: Policy
    throughput: float
    memory: float

    def sort_key(self):
        c = self.config
        # round so that float noise does not defeat the tie-break
        return (-float(f"{self.throughput:.12g}"), c.depth, c.width, c.recompute,
                -c.microbatch_size, self.execution.value)

    def row(self) -> dict:
        c = self.config
        return {"width": c.width, "depth": c.depth, "microbatch": c.microbatch_size,
                "recompute": c.recompute, "accum": c.grad_accum, "execution": self.execution.value,
                "throughput": self.throughput, "memory_gb": self.memory / 1e9}


@dataclass
class PlanResult:
    best: Optional[Candidate]
    ranked_alternatives: List[Candidate]
    rejected: List[Tuple[int, int, str]]
    pairs_examined: int
    max_batch: int

    @property
    def feasible(self) -> bool:
        return self.best is not None

    def _need(self) -> Candidate:
        if self.best is None:
            raise PlanError("no feasible configuration")
        return self.best

    w_opt = property(lambda self: self._need().config.width)
    d_opt = property(lambda self: self._need().config.depth)
    b_opt = property(lambda self: self._need().config.microbatch_size)
    r_opt = property(lambda self: self._need().config.recompute)
    g_opt = property(lambda self: self._need().config.grad_accum)
    execution = property(lambda self: self._need().execution)
    predicted_throughput = property(lambda self: self._need().throughput)
    predicted_memory = property(lambda self: self._need().memory)

    def to_dict(self) -> dict:
        return {
            "feasible": self.feasible,
            "max_batch": self.max_batch,
            "pairs_examined": self.pairs_examined,
            "best": self.best.row() if self.best else None,
            "ranked": [c.row() for c in self.ranked_alternatives],
            "rejected": [{"width": w, "depth": d, "reason": r} for w, d, r in self.rejected],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["rank", "width", "depth", "microbatch", "recompute", "accum", "execution",
                "throughput", "memory_gb", "status"]
        out = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        out.writeheader()
        for i, c in enumerate(self.ranked_alternatives, 1):
            out.writerow({"rank": i, "status": "feasible", **c.row()})
        for w, d, reason in self.rejected:
            out.writerow({"rank": "", "width": w, "depth": d, "status": reason})
        return buf.getvalue()

    def table(self, limit: int = 10) -> str:
        lines = []
        if self.best:
            c = self.best
            lines.append(f"best: w={self.w_opt} d={self.d_opt} b={self.b_opt} r={self.r_opt} "
                         f"g={self.g_opt} exec={c.execution.value} "
                         f"throughput={c.throughput:.4g}/s memory={c.memory / 1e9:.4g}GB")
        else:
            lines.append("no feasible configuration")
        lines.append(f"{'w':>4} {'d':>4} {'b':>5} {'r':>5} {'g':>5} {'exec':>7} "
                     f"{'samples/s':>12} {'mem GB':>9}")
        for c in self.ranked_alternatives[:limit]:
            cf = c.config
            lines.append(f"{cf.width:>4} {cf.depth:>4} {cf.microbatch_size:>5} "
                         f"{str(cf.recompute):>5} {cf.grad_accum:>5} {c.execution.value:>7} "
                         f"{c.throughput:>12.4g} {c.memory / 1e9:>9.4g}")
        skipped = [r for r in self.rejected if "does not divide" in r[2]]
        if skipped:
            lines.append(f"skipped {len(skipped)} (w, d) pairs whose depth does not divide "
                         f"the block count")
        for w, d, reason in self.rejected:
            if "does not divide" not in reason:
                lines.append(f"rejected w={w} d={d}: {reason}")
        return "\n".join(lines)


def width_depth_pairs(n: int) -> List[Tuple[int, int]]:
    return [(w, d) for w in range(1, n + 1) for d in range(1, n // w + 1)]


def _score(stages, cluster, cfg, execution) -> Tuple[float, float]:
    if execution is Policy.NO_PIPELINING:
        thr = costmodel.throughput_nopipeline(stages, cluster, cfg)
    else:
        thr = costmodel.throughput_pipelined(stages, cluster, cfg)
    mem = costmodel.memory_footprint(stages, cfg, execution)
    return thr, mem


def configurations(model: ModelProfile, w: int, d: int, max_batch: int) -> Iterable[Tuple[ParallelConfig, Policy]]:
    """Every (b, r, execution) for one (w, d) whose global batch fits under ``max_batch``."""
    for b in model.batch_sizes:
        g = max_batch // (b * w * d)
        if g < 1:
            continue
        for execution in EXECUTIONS:
            for r in (False, True):
                if r and execution is Policy.NO_PIPELINING:
                    continue
                yield ParallelConfig(w, d, b, recompute=r, grad_accum=g), execution


def search(model: ModelProfile, cluster: ClusterSpec, w: int, d: int,
           max_batch: int) -> Tuple[List[Candidate], Optional[str]]:
    """All feasible candidates for one (w, d), best first, or a rejection reason."""
    if w * d > cluster.total_workers:
        return [], f"w*d={w * d} exceeds {cluster.total_workers} workers"
    if model.num_blocks % d:
        return [], f"depth {d} does not divide {model.num_blocks} blocks"
    stages = partition_equal(model, d)
    found, seen = [], 0
    for cfg, execution in configurations(model, w, d, max_batch):
        seen += 1
        thr, mem = _score(stages, cluster, cfg, execution)
        if mem > cluster.memory_capacity:
            continue
        found.append(Candidate(cfg, execution, thr, mem))
    if found:
        return sorted(found, key=Candidate.sort_key), None
    if not seen:
        return [], f"b*w*d exceeds max batch {max_batch} for every microbatch size"
    return [], "no microbatch size fits in memory"


def plan(model: ModelProfile, cluster: ClusterSpec, max_batch: int, jobs: int = 1) -> PlanResult:
    if max_batch < 1:
        raise PlanError("max batch size must be >= 1")
    pairs = width_depth_pairs(cluster.total_workers)

    def one(pair):
        return pair, search(model, cluster, pair[0], pair[1], max_batch)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, pairs))
    else:
        results = [one(p) for p in pairs]

    best_per_pair, rejected = [], []
    for (w, d), (cands, reason) in results:
        if cands:
            best_per_pair.append(cands[0])
        else:
            rejected.append((w, d, reason))
    ranked = sorted(best_per_pair, key=Candidate.sort_key)
    return PlanResult(ranked[0] if ranked else None, ranked, rejected, len(pairs), max_batch)


@dataclass
class Validation:
    predicted_throughput: float
    simulated_throughput: float
    predicted_memory: float
    simulated_memory: float
    num_batches: int
    details: dict = field(default_factory=dict)

    @property
    def throughput_error(self) -> float:
        return abs(self.predicted_throughput - self.simulated_throughput) / self.simulated_throughput

    @property
    def memory_error(self) -> float:
        if self.simulated_memory == 0:
            return 0.0 if self.predicted_memory == 0 else float("inf")
        return abs(self.predicted_memory - self.simulated_memory) / self.simulated_memory

    def to_dict(self) -> dict:
        return {"predicted_throughput": self.predicted_throughput,
                "simulated_throughput": self.simulated_throughput,
                "throughput_error": self.throughput_error,
                "predicted_memory": self.predicted_memory,
                "simulated_memory": self.simulated_memory,
                "memory_error": self.memory_error, "num_batches": self.num_batches,
                **self.details}


def validate_candidate(cand: Candidate, model: ModelProfile, cluster: ClusterSpec,
                       num_batches: int = 50) -> Validation:
    rep = simulate_policy(cand.execution, model, cluster, cand.config, num_batches)
    sim_mem = max(tr.peak_bytes for tr in rep.memory)
    stages = partition_equal(model, cand.config.depth)
    hidden = costmodel.allreduce_hidden(stages, cluster, cand.config)
    return Validation(cand.throughput, rep.throughput, cand.memory, sim_mem, num_batches,
                      {"allreduce_hidden": hidden})


def validate_plan(result: PlanResult, model: ModelProfile, cluster: ClusterSpec,
                  num_batches: int = 50) -> Validation:
    if not result.feasible:
        raise PlanError("cannot validate an infeasible plan")
    return validate_candidate(result.best, model, cluster, num_batches)


def simulated_best(model: ModelProfile, cluster: ClusterSpec, max_batch: int,
                   num_batches: int = 12) -> Tuple[Optional[Candidate], List[Candidate]]:
    """Brute-force oracle: simulate every (w, d, b, r, execution) and keep the fastest.

    Feasibility uses the simulator's measured peak memory, not the closed form.
    """
    scored = []
    for w, d in width_depth_pairs(cluster.total_workers):
        if model.num_blocks % d:
            continue
        for cfg, execution in configurations(model, w, d, max_batch):
            if execution is Policy.TWO_BW and cfg.microbatches < d:
                continue
            rep = simulate_policy(execution, model, cluster, cfg, num_batches)
            mem = max(tr.peak_bytes for tr in rep.memory)
            if mem <= cluster.memory_capacity:
                scored.append(Candidate(cfg, execution, rep.throughput, mem))
    scored.sort(key=Candidate.sort_key)
    return (scored[0] if scored else None), scored


def simulated_throughput(cand: Candidate, model: ModelProfile, cluster: ClusterSpec,
                         num_batches: int = 12) -> float:
    return simulate_policy(cand.execution, model, cluster, cand.config, num_batches).throughput


