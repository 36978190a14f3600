"""Model cost profiles, cluster descriptions and parallel configurations.

Profiles are tables keyed on a discrete set of microbatch sizes. A lookup for a
size that was not profiled is an error; nothing is interpolated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO, Any, Dict, List, Mapping, Sequence, Union

GB = 1e9

_TABLE_FIELDS = ("fwd_ms", "bwd_ms", "act_total_bytes", "act_input_bytes", "act_boundary_bytes")


class ProfileError(ValueError):
    """Raised for malformed profile/cluster documents or violated invariants."""


def _lookup(table: Mapping[int, float], b: int, name: str) -> float:
    try:
        return table[b]
    except KeyError:
        raise ProfileError(f"{name}: microbatch size {b} not profiled (have {sorted(table)})") from None


@dataclass(frozen=True)
class BlockProfile:
    fwd_ms: Dict[int, float]
    bwd_ms: Dict[int, float]
    weight_bytes: float
    act_total_bytes: Dict[int, float]
    act_input_bytes: Dict[int, float]
    act_boundary_bytes: Dict[int, float]

    def validate(self, where: str = "block") -> None:
        keys = list(self.fwd_ms)
        if not keys:
            raise ProfileError(f"{where}.fwd_ms: empty table")
        if keys != sorted(keys):
            raise ProfileError(f"{where}.fwd_ms: microbatch sizes must be ascending")
        for name in _TABLE_FIELDS:
            table = getattr(self, name)
            if list(table) != keys:
                raise ProfileError(
                    f"{where}.{name}: keys {list(table)} do not match fwd_ms keys {keys}")
            for b, v in table.items():
                if b < 1:
                    raise ProfileError(f"{where}.{name}: microbatch size {b} must be >= 1")
                if name.endswith("_ms"):
                    if not v > 0:
                        raise ProfileError(f"{where}.{name}[{b}]: time must be > 0, got {v}")
                elif v < 0:
                    raise ProfileError(f"{where}.{name}[{b}]: size must be >= 0, got {v}")
        if self.weight_bytes < 0:
            raise ProfileError(f"{where}.weight_bytes: must be >= 0, got {self.weight_bytes}")
        for b in keys:
            if self.act_input_bytes[b] > self.act_total_bytes[b]:
                raise ProfileError(
                    f"{where}.act_input_bytes[{b}]: exceeds act_total_bytes[{b}]")

    @property
    def batch_sizes(self) -> List[int]:
        return list(self.fwd_ms)


@dataclass(frozen=True)
class ModelProfile:
    name: str
    blocks: List[BlockProfile]

    def __post_init__(self):
        if not self.blocks:
            raise ProfileError("blocks: model must have at least one block")
        keys = self.blocks[0].batch_sizes
        for i, blk in enumerate(self.blocks):
            blk.validate(f"blocks[{i}]")
            if blk.batch_sizes != keys:
                raise ProfileError(f"blocks[{i}]: microbatch sizes differ from blocks[0]")

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    @property
    def batch_sizes(self) -> List[int]:
        return self.blocks[0].batch_sizes

    @property
    def weight_bytes(self) -> float:
        return sum(blk.weight_bytes for blk in self.blocks)

    def to_dict(self) -> dict:
        def table(t):
            return {str(b): v for b, v in t.items()}

        return {
            "model": self.name,
            "blocks": [
                {
                    "fwd_ms": table(blk.fwd_ms),
                    "bwd_ms": table(blk.bwd_ms),
                    "weight_bytes": blk.weight_bytes,
                    "act_total_bytes": table(blk.act_total_bytes),
                    "act_input_bytes": table(blk.act_input_bytes),
                    "act_boundary_bytes": table(blk.act_boundary_bytes),
                }
                for blk in self.blocks
            ],
        }


@dataclass(frozen=True)
class StageProfile:
    """Aggregate of consecutive blocks assigned to one pipeline stage."""

    index: int
    blocks: List[BlockProfile] = field(repr=False)

    @property
    def weight_bytes(self) -> float:
        return sum(blk.weight_bytes for blk in self.blocks)

    def fwd_time(self, b: int) -> float:
        return sum(_lookup(blk.fwd_ms, b, "fwd_ms") for blk in self.blocks) / 1000.0

    def bwd_time(self, b: int) -> float:
        return sum(_lookup(blk.bwd_ms, b, "bwd_ms") for blk in self.blocks) / 1000.0

    def compute_time(self, b: int) -> float:
        return self.fwd_time(b) + self.bwd_time(b)

    def act_total(self, b: int) -> float:
        return sum(_lookup(blk.act_total_bytes, b, "act_total_bytes") for blk in self.blocks)

    def act_input(self, b: int) -> float:
        return _lookup(self.blocks[0].act_input_bytes, b, "act_input_bytes")

    def act_boundary(self, b: int) -> float:
        # tensor sent to the next stage comes from the last block
        return _lookup(self.blocks[-1].act_boundary_bytes, b, "act_boundary_bytes")


def partition_equal(model: ModelProfile, d: int) -> List[StageProfile]:
    if d < 1 or model.num_blocks % d:
        raise ProfileError(
            f"depth {d} does not divide block count {model.num_blocks}")
    per = model.num_blocks // d
    return [StageProfile(i, model.blocks[i * per:(i + 1) * per]) for i in range(d)]


@dataclass(frozen=True)
class ClusterSpec:
    total_workers: int
    gpus_per_server: int
    bandwidth_high: float  # bytes/s, intra-server
    bandwidth_low: float  # bytes/s, inter-server
    memory_capacity: float  # bytes per worker

    def __post_init__(self):
        if self.total_workers < 1:
            raise ProfileError("total_workers: must be >= 1")
        if self.gpus_per_server < 1:
            raise ProfileError("gpus_per_server: must be >= 1")
        if not self.bandwidth_low > 0:
            raise ProfileError("bandwidth_low_gbps: must be > 0")
        if self.bandwidth_high < self.bandwidth_low:
            raise ProfileError("bandwidth_high_gbps: must be >= bandwidth_low_gbps")
        # zero capacity is accepted so the planner can report infeasibility
        if self.memory_capacity < 0:
            raise ProfileError("memory_capacity_gb: must be >= 0")

    def to_dict(self) -> dict:
        return {
            "total_workers": self.total_workers,
            "gpus_per_server": self.gpus_per_server,
            "bandwidth_high_gbps": self.bandwidth_high / GB,
            "bandwidth_low_gbps": self.bandwidth_low / GB,
            "memory_capacity_gb": self.memory_capacity / GB,
        }


@dataclass(frozen=True)
class ParallelConfig:
    width: int
    depth: int
    microbatch_size: int
    recompute: bool = False
    grad_accum: int = 1

    def __post_init__(self):
        for name in ("width", "depth", "microbatch_size", "grad_accum"):
            if getattr(self, name) < 1:
                raise ProfileError(f"{name}: must be >= 1")

    @property
    def microbatches(self) -> int:
        """Microbatches per batch per pipeline (m = d * g)."""
        return self.depth * self.grad_accum

    @property
    def global_batch(self) -> int:
        return self.microbatch_size * self.width * self.depth * self.grad_accum

    def check_cluster(self, cluster: ClusterSpec) -> None:
        if self.width * self.depth > cluster.total_workers:
            raise ProfileError(
                f"width*depth = {self.width * self.depth} exceeds total_workers "
                f"{cluster.total_workers}")

    def to_dict(self) -> dict:
        return {"width": self.width, "depth": self.depth, "microbatch_size": self.microbatch_size,
                "recompute": self.recompute, "grad_accum": self.grad_accum}


Source = Union[str, bytes, IO[str], IO[bytes], Mapping[str, Any]]


def _read_doc(source: Source) -> Mapping[str, Any]:
    if isinstance(source, Mapping):
        return source
    if hasattr(source, "read"):
        source = source.read()
    try:
        doc = json.loads(source)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ProfileError(f"malformed document: {exc}") from None
    if not isinstance(doc, dict):
        raise ProfileError("malformed document: top level must be an object")
    return doc


def _num(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ProfileError(f"{where}: expected a number, got {value!r}")
    return value


def _table(raw, where: str) -> Dict[int, float]:
    if not isinstance(raw, dict):
        raise ProfileError(f"{where}: expected a map from microbatch size to number")
    out = {}
    for key, value in raw.items():
        try:
            b = int(key)
        except ValueError:
            raise ProfileError(f"{where}: key {key!r} is not an integer microbatch size") from None
        out[b] = _num(value, f"{where}[{key}]")
    return out


def load_model_profile(source: Source) -> ModelProfile:
    doc = _read_doc(source)
    if "blocks" not in doc or not isinstance(doc["blocks"], list):
        raise ProfileError("blocks: missing or not a list")
    blocks = []
    for i, raw in enumerate(doc["blocks"]):
        where = f"blocks[{i}]"
        if not isinstance(raw, dict):
            raise ProfileError(f"{where}: expected an object")
        missing = [k for k in ("weight_bytes",) + _TABLE_FIELDS if k not in raw]
        if missing:
            raise ProfileError(f"{where}.{missing[0]}: missing field")
        blocks.append(BlockProfile(
            fwd_ms=_table(raw["fwd_ms"], f"{where}.fwd_ms"),
            bwd_ms=_table(raw["bwd_ms"], f"{where}.bwd_ms"),
            weight_bytes=_num(raw["weight_bytes"], f"{where}.weight_bytes"),
            act_total_bytes=_table(raw["act_total_bytes"], f"{where}.act_total_bytes"),
            act_input_bytes=_table(raw["act_input_bytes"], f"{where}.act_input_bytes"),
            act_boundary_bytes=_table(raw["act_boundary_bytes"], f"{where}.act_boundary_bytes"),
        ))
    return ModelProfile(name=str(doc.get("model", "model")), blocks=blocks)


def dump_model_profile(model: ModelProfile) -> str:
    return json.dumps(model.to_dict(), indent=2)


def load_cluster(source: Source) -> ClusterSpec:
    doc = _read_doc(source)
    keys = ("total_workers", "gpus_per_server", "bandwidth_high_gbps",
            "bandwidth_low_gbps", "memory_capacity_gb")
    for k in keys:
        if k not in doc:
            raise ProfileError(f"{k}: missing field")
        _num(doc[k], k)
    return ClusterSpec(
        total_workers=int(doc["total_workers"]),
        gpus_per_server=int(doc["gpus_per_server"]),
        bandwidth_high=doc["bandwidth_high_gbps"] * GB,
        bandwidth_low=doc["bandwidth_low_gbps"] * GB,
        memory_capacity=doc["memory_capacity_gb"] * GB,
    )


def dump_cluster(cluster: ClusterSpec) -> str:
    return json.dumps(cluster.to_dict(), indent=2)


def uniform_profile(num_blocks: int, fwd_ms: float, bwd_ms: float, weight_bytes: float,
                    act_total_bytes: float, act_input_bytes: float,
                    act_boundary_bytes: float | None = None,
                    batch_sizes: Sequence[int] = (1,), time_exponent: float = 1.0,
                    name: str = "uniform") -> ModelProfile:
    """Build an n-block profile of identical blocks.

    Scalars are given at microbatch size 1. Activation sizes scale linearly with b;
    times scale as b**time_exponent (values below 1 model better arithmetic
    intensity at larger microbatches). The boundary tensor defaults to the input
    activation size.
    """
    if act_boundary_bytes is None:
        act_boundary_bytes = act_input_bytes

    def scaled(v, exp=1.0):
        return {b: v * b ** exp if b != 1 else v for b in batch_sizes}

    block = BlockProfile(
        fwd_ms=scaled(fwd_ms, time_exponent),
        bwd_ms=scaled(bwd_ms, time_exponent),
        weight_bytes=weight_bytes,
        act_total_bytes=scaled(act_total_bytes),
        act_input_bytes=scaled(act_input_bytes),
        act_boundary_bytes=scaled(act_boundary_bytes),
    )
    return ModelProfile(name=name, blocks=[block] * num_blocks)
