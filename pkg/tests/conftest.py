import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from pipesim.profile import GB, ClusterSpec, uniform_profile  # noqa: E402

GOLDEN = os.path.join(os.path.dirname(__file__), "golden")


def zero_comm_model(d, fwd_ms=1000.0, bwd_ms=2000.0):
    return uniform_profile(d, fwd_ms=fwd_ms, bwd_ms=bwd_ms, weight_bytes=0.0,
                           act_total_bytes=0.0, act_input_bytes=0.0)


def big_cluster(n, gps=8, high=100.0, low=10.0, mem_gb=1e6):
    return ClusterSpec(n, gps, high * GB, low * GB, mem_gb * GB)


@pytest.fixture
def golden_dir():
    return GOLDEN
