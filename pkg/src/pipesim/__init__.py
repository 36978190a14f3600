"""Simulator, semantics checker and planner for pipeline-parallel training schedules."""

from .profile import ClusterSpec, ModelProfile, ParallelConfig, partition_equal, uniform_profile
from .schedule import Policy, generate_schedule, weight_version_2bw
from .simulator import SimReport, simulate

__all__ = ["ClusterSpec", "ModelProfile", "ParallelConfig", "Policy", "SimReport",
           "generate_schedule", "partition_equal", "simulate", "uniform_profile",
           "weight_version_2bw"]
