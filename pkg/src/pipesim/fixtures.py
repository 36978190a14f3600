"""Shared fixtures: timelines shaped like the classic pipeline figures plus planner inputs."""

from __future__ import annotations

from dataclasses import dataclass

from .profile import GB, ClusterSpec, ModelProfile, ParallelConfig, uniform_profile
from .schedule import Policy


@dataclass(frozen=True)
class Fixture:
    name: str
    policy: Policy
    model: ModelProfile
    cluster: ClusterSpec
    config: ParallelConfig
    num_batches: int
    description: str = ""


def _timeline_model(d: int) -> ModelProfile:
    # one block per stage, backward twice as long as forward, nothing to transfer
    return uniform_profile(d, fwd_ms=1000.0, bwd_ms=2000.0, weight_bytes=0.0,
                           act_total_bytes=0.0, act_input_bytes=0.0, name=f"timeline-d{d}")


def _roomy_cluster(workers: int) -> ClusterSpec:
    return ClusterSpec(total_workers=workers, gpus_per_server=8, bandwidth_high=100 * GB,
                       bandwidth_low=10 * GB, memory_capacity=1000 * GB)


def _timeline(name, policy, d, m, batches, description) -> Fixture:
    return Fixture(name, policy, _timeline_model(d), _roomy_cluster(d),
                   ParallelConfig(1, d, 1, grad_accum=m // d), batches, description)


FIGURES = {
    "figure1a": lambda: _timeline("figure1a", Policy.GPIPE, 4, 4, 2,
                                  "GPipe, 4 stages, 4 microbatches per batch"),
    "figure1b": lambda: _timeline("figure1b", Policy.PIPEDREAM, 4, 4, 2,
                                  "1F1B with weight stashing, 4 stages"),
    "figure2": lambda: _timeline("figure2", Policy.TWO_BW, 4, 4, 3,
                                 "double-buffered updates, 4 stages, m=4"),
    "figure3a": lambda: _timeline("figure3a", Policy.GPIPE, 2, 4, 2, "GPipe, 2 stages, m=4"),
    "figure3b": lambda: _timeline("figure3b", Policy.FLUSH, 2, 4, 2,
                                  "1F1B with flushes, 2 stages, m=4"),
}


def figure(name: str) -> Fixture:
    try:
        return FIGURES[name]()
    except KeyError:
        raise KeyError(f"unknown fixture {name!r}; choose from {sorted(FIGURES)}") from None


def planner_model(num_blocks: int = 16) -> ModelProfile:
    """Transformer-like uniform profile, 8 GB of weights when 16 blocks."""
    return uniform_profile(num_blocks, fwd_ms=10.0, bwd_ms=20.0, weight_bytes=0.5 * GB,
                           act_total_bytes=0.25 * GB, act_input_bytes=0.02 * GB,
                           batch_sizes=(1, 2, 4, 8, 16), time_exponent=0.8,
                           name=f"uniform-{num_blocks}")


def planner_cluster(workers: int, memory_gb: float = 16.0, gpus_per_server: int = 8,
                    high_gbps: float = 100.0, low_gbps: float = 10.0) -> ClusterSpec:
    return ClusterSpec(total_workers=workers, gpus_per_server=gpus_per_server,
                       bandwidth_high=high_gbps * GB, bandwidth_low=low_gbps * GB,
                       memory_capacity=memory_gb * GB)


PLANNER_MAX_BATCH = 512
