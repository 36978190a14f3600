"""Closed-form throughput and memory cost functions.

Throughputs are in samples/second summed over all ``w`` parallel pipelines.
"""

from __future__ import annotations

from dataclasses import replace
from functools import lru_cache
from typing import List, Optional, Sequence

from .profile import ClusterSpec, ParallelConfig, ProfileError, StageProfile
from .schedule import Policy

C_EXTRA = 4.0 / 3.0


def bwdth_width(w: int, cluster: ClusterSpec) -> float:
    # replicas of a stage are packed onto one server first; exactly-full servers
    # still keep the all-reduce on the fast links
    return cluster.bandwidth_high if w <= cluster.gpus_per_server else cluster.bandwidth_low


def bwdth_depth(d: int, w: int, cluster: ClusterSpec) -> float:
    """Bandwidth between adjacent stages of one pipeline.

    Ranks are laid out stage-major (all replicas of stage 0, then stage 1, ...),
    so a link stays intra-server only if every replica pair shares a server.
    """
    if _links_intra_server(d, w, cluster.gpus_per_server):
        return cluster.bandwidth_high
    return cluster.bandwidth_low


@lru_cache(maxsize=None)
def _links_intra_server(d: int, w: int, gps: int) -> bool:
    for s in range(d - 1):
        for r in range(w):
            if (s * w + r) // gps != ((s + 1) * w + r) // gps:
                return False
    return True


def comm_interstage(boundary_bytes: float, cluster: ClusterSpec, d: int, w: int = 1) -> float:
    """Activation plus gradient transfer time across one stage boundary."""
    if d <= 1:
        return 0.0
    return 2 * boundary_bytes / bwdth_depth(d, w, cluster)


def allreduce_time(weight_bytes: float, w: int, cluster: ClusterSpec) -> float:
    """Ring all-reduce of one stage's gradients across ``w`` replicas."""
    if w <= 1:
        return 0.0
    return 2 * (w - 1) / w * weight_bytes / bwdth_width(w, cluster)


def _stage_terms(stages: Sequence[StageProfile], cluster: ClusterSpec, cfg: ParallelConfig,
                 b: int, compute_scale: float = 1.0):
    d, w = len(stages), cfg.width
    m = cfg.microbatches
    terms = []
    for i, st in enumerate(stages):
        comm = 0.0
        if i > 0:
            comm += comm_interstage(stages[i - 1].act_boundary(b), cluster, d, w)
        if i < d - 1:
            comm += comm_interstage(st.act_boundary(b), cluster, d, w)
        busy = compute_scale * st.compute_time(b) + comm
        terms.append((busy, allreduce_time(st.weight_bytes, w, cluster) / m))
    return terms


def _check(stages, cfg):
    if len(stages) != cfg.depth:
        raise ProfileError(f"got {len(stages)} stages for depth {cfg.depth}")


def microbatch_time_nopipeline(stages, cluster, cfg) -> float:
    _check(stages, cfg)
    return sum(max(busy, ar) for busy, ar in
               _stage_terms(stages, cluster, cfg, cfg.microbatch_size))


def microbatch_time_pipelined(stages, cluster, cfg, recompute: Optional[bool] = None,
                              c_extra: float = C_EXTRA) -> float:
    _check(stages, cfg)
    if recompute is None:
        recompute = cfg.recompute
    scale = c_extra if recompute else 1.0
    return max(max(busy, ar) for busy, ar in
               _stage_terms(stages, cluster, cfg, cfg.microbatch_size, scale))


def throughput_nopipeline(stages: Sequence[StageProfile], cluster: ClusterSpec,
                          cfg: ParallelConfig) -> float:
    return cfg.width * cfg.microbatch_size / microbatch_time_nopipeline(stages, cluster, cfg)


def throughput_pipelined(stages: Sequence[StageProfile], cluster: ClusterSpec,
                         cfg: ParallelConfig, recompute: Optional[bool] = None,
                         c_extra: float = C_EXTRA) -> float:
    """Bottleneck-stage throughput; ``cfg.microbatch_size`` plays the role of b'
    without recomputation and of b with it."""
    t = microbatch_time_pipelined(stages, cluster, cfg, recompute, c_extra)
    return cfg.width * cfg.microbatch_size / t


def allreduce_hidden(stages: Sequence[StageProfile], cluster: ClusterSpec, cfg: ParallelConfig,
                     recompute: Optional[bool] = None, c_extra: float = C_EXTRA) -> bool:
    """Whether every stage's all-reduce fits in the slack a 1-stale 1F1B schedule leaves.

    At the first stage, the first forward that needs the new version follows the
    batch's last backward by m - d + 1 microbatch slots. When an all-reduce is
    longer than that, forwards stall and the pipelined formula is optimistic.
    """
    _check(stages, cfg)
    if recompute is None:
        recompute = cfg.recompute
    scale = c_extra if recompute else 1.0
    terms = _stage_terms(stages, cluster, cfg, cfg.microbatch_size, scale)
    slot = max(busy for busy, _ in terms)
    slack = (cfg.microbatches - cfg.depth + 1) * slot
    return all(ar * cfg.microbatches <= slack for _, ar in terms)


def versions_held(policy: Policy, d: int, stage: int) -> int:
    if policy is Policy.TWO_BW:
        return 2
    if policy is Policy.PIPEDREAM:
        return d - stage
    return 1


def stashes_held(policy: Policy, d: int, m: int, stage: int) -> int:
    if policy is Policy.GPIPE:
        return m
    if policy is Policy.NO_PIPELINING:
        return 1
    return d - stage


def stage_memory(stage: StageProfile, d: int, m: int, b: int, policy: Policy,
                 recompute: bool) -> float:
    n_stash = stashes_held(policy, d, m, stage.index)
    weights = versions_held(policy, d, stage.index) * stage.weight_bytes
    if recompute:
        acts = stage.act_total(b) + n_stash * stage.act_input(b)
    else:
        acts = n_stash * (stage.act_total(b) + stage.act_input(b))
    return weights + acts


def memory_per_stage(stages: Sequence[StageProfile], cfg: ParallelConfig, policy: Policy,
                     recompute: Optional[bool] = None) -> List[float]:
    _check(stages, cfg)
    if recompute is None:
        recompute = cfg.recompute
    return [stage_memory(st, cfg.depth, cfg.microbatches, cfg.microbatch_size, policy, recompute)
            for st in stages]


def memory_footprint(stages: Sequence[StageProfile], cfg: ParallelConfig, policy: Policy,
                     recompute: Optional[bool] = None) -> float:
    """Worst-case bytes resident on any worker (weights and activations only)."""
    return max(memory_per_stage(stages, cfg, policy, recompute))


def largest_microbatch(stages: Sequence[StageProfile], cluster: ClusterSpec, cfg: ParallelConfig,
                       policy: Policy = Policy.TWO_BW, recompute: bool = False) -> Optional[int]:
    """Largest profiled microbatch size whose footprint fits (b' when not recomputing).

    Bisection over the table keys; footprints grow with b.
    """
    keys = stages[0].blocks[0].batch_sizes

    def fits(b):
        return memory_footprint(stages, replace(cfg, microbatch_size=b), policy,
                                recompute) <= cluster.memory_capacity

    lo, hi = 0, len(keys)
    while lo < hi:
        mid = (lo + hi) // 2
        if fits(keys[mid]):
            lo = mid + 1
        else:
            hi = mid
    return keys[lo - 1] if lo else None
