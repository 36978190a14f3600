"""Deterministic discrete-event execution of stage programs.

Each worker has two lanes. The compute lane runs forward, backward and
recompute ops plus the local cost of point-to-point sends and receives (a
transfer of ``n`` bytes occupies the sender for ``n/bw`` and, once the data has
arrived, the receiver for another ``n/bw``). The comm lane runs gradient
all-reduces and applies weight updates, so they overlap with compute unless a
flush barrier makes the next forward wait for them.

Only one pipeline is simulated; the ``w`` replicas run identical programs and
meet only in the all-reduce, whose cost is charged on every replica.
"""

from __future__ import annotations

import json
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from . import costmodel
from .profile import ClusterSpec, ModelProfile, ParallelConfig, partition_equal
from .schedule import (COMM_KINDS, COMPUTE_KINDS, LATEST, OpKind, Policy, ScheduledOp,
                       StageProgram, generate_schedule)

COMPUTE, COMM = "compute", "comm"


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class TimelineEntry:
    worker: int
    lane: str
    kind: OpKind
    microbatch: Optional[int]
    weight_version: Optional[int]
    start: float
    end: float

    def to_list(self):
        return [self.worker, self.lane, self.kind.value, self.microbatch, self.weight_version,
                self.start, self.end]

    @classmethod
    def from_list(cls, row):
        w, lane, kind, mb, ver, start, end = row
        return cls(int(w), lane, OpKind(kind), mb, ver, float(start), float(end))


@dataclass(frozen=True)
class MemorySample:
    time: float
    weight_versions: int
    activation_stashes: int
    bytes_resident: float


@dataclass
class MemoryTrace:
    samples: List[MemorySample] = field(default_factory=list)

    @property
    def peak_bytes(self) -> float:
        return max((s.bytes_resident for s in self.samples), default=0.0)

    @property
    def peak_versions(self) -> int:
        return max((s.weight_versions for s in self.samples), default=0)

    @property
    def peak_stashes(self) -> int:
        return max((s.activation_stashes for s in self.samples), default=0)

    def peak_versions_after(self, t: float) -> int:
        return max((s.weight_versions for s in self.samples if s.time >= t), default=0)


@dataclass
class SimReport:
    policy: Policy
    config: ParallelConfig
    num_batches: int
    timeline: List[TimelineEntry]
    throughput: float
    bubble_fraction: float
    steady_batch_time: float
    batch_end_times: List[float]
    memory: List[MemoryTrace]

    @property
    def microbatch_period(self) -> float:
        return self.steady_batch_time / self.config.microbatches

    def to_dict(self) -> dict:
        return {
            "policy": self.policy.value,
            "config": self.config.to_dict(),
            "num_batches": self.num_batches,
            "throughput": self.throughput,
            "bubble_fraction": self.bubble_fraction,
            "steady_batch_time": self.steady_batch_time,
            "batch_end_times": self.batch_end_times,
            "timeline": [e.to_list() for e in self.timeline],
            "memory": [[[s.time, s.weight_versions, s.activation_stashes, s.bytes_resident]
                        for s in tr.samples] for tr in self.memory],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "SimReport":
        try:
            return cls(
                policy=Policy(doc["policy"]),
                config=ParallelConfig(**doc["config"]),
                num_batches=int(doc["num_batches"]),
                timeline=[TimelineEntry.from_list(r) for r in doc["timeline"]],
                throughput=float(doc["throughput"]),
                bubble_fraction=float(doc["bubble_fraction"]),
                steady_batch_time=float(doc["steady_batch_time"]),
                batch_end_times=[float(x) for x in doc["batch_end_times"]],
                memory=[MemoryTrace([MemorySample(t, int(v), int(a), b) for t, v, a, b in tr])
                        for tr in doc["memory"]],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"corrupt simulation report: {exc!r}") from None

    @classmethod
    def from_json(cls, text: str) -> "SimReport":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"corrupt simulation report: {exc}") from None
        if not isinstance(doc, dict):
            raise ValueError("corrupt simulation report: not an object")
        return cls.from_dict(doc)


def lower_program(program: StageProgram, recompute: bool) -> List[ScheduledOp]:
    """Insert point-to-point transfers and recompute ops around forwards/backwards."""
    s, d = program.stage, program.depth
    kinds = {op.kind for op in program.ops}
    if kinds & COMM_KINDS or OpKind.RECOMPUTE in kinds:
        return list(program.ops)  # already lowered
    out = []
    for op in program.ops:
        k, v = op.microbatch, op.weight_version
        if op.kind is OpKind.FORWARD:
            if s > 0:
                out.append(ScheduledOp(OpKind.ACT_RECV, k))
            out.append(op)
            if s < d - 1:
                out.append(ScheduledOp(OpKind.ACT_SEND, k))
        elif op.kind is OpKind.BACKWARD:
            if s < d - 1:
                out.append(ScheduledOp(OpKind.GRAD_RECV, k))
            if recompute:
                out.append(ScheduledOp(OpKind.RECOMPUTE, k, v))
            out.append(op)
            if s > 0:
                out.append(ScheduledOp(OpKind.GRAD_SEND, k))
        else:
            out.append(op)
    return out


class _Stage:
    def __init__(self, index, ops):
        self.index = index
        self.ops = ops
        self.pc = 0
        self.t = 0.0  # compute lane free
        self.comm_free = 0.0
        self.last_ar_end = 0.0
        self.pending_flush = False
        self.version_times = [0.0]  # creation time of version v
        self.mb_version: Dict[int, int] = {}
        self.last_use: Dict[int, float] = {}
        self.stash_events: List[Tuple[float, int]] = []
        self.entries: List[TimelineEntry] = []


def simulate(programs: Sequence[StageProgram], model: ModelProfile, cluster: ClusterSpec,
             cfg: ParallelConfig, num_batches: Optional[int] = None) -> SimReport:
    d = cfg.depth
    if len(programs) != d:
        raise SimulationError(f"{len(programs)} programs for depth {d}")
    policy = programs[0].policy
    m = programs[0].microbatches
    if num_batches is None:
        num_batches = programs[0].num_batches
    if num_batches != programs[0].num_batches:
        raise SimulationError("num_batches does not match the generated programs")
    if m != cfg.microbatches:
        raise SimulationError(f"programs use m={m} but config implies m={cfg.microbatches}")
    cfg.check_cluster(cluster)
    b, w = cfg.microbatch_size, cfg.width
    stages = partition_equal(model, d)
    fwd = [st.fwd_time(b) for st in stages]
    bwd = [st.bwd_time(b) for st in stages]
    bw_depth = costmodel.bwdth_depth(d, w, cluster)
    link = [stages[s].act_boundary(b) / bw_depth for s in range(d - 1)]
    ar = [costmodel.allreduce_time(st.weight_bytes, w, cluster) for st in stages]

    state = [_Stage(s, lower_program(p, cfg.recompute)) for s, p in enumerate(programs)]
    arrivals: Dict[Tuple[str, int, int], float] = {}
    waiting: Dict[Tuple[str, int, int], List[int]] = defaultdict(list)
    ready = deque(range(d))

    def emit(st, lane, op, start, end, ver=None):
        st.entries.append(TimelineEntry(st.index, lane, op.kind, op.microbatch,
                                        op.weight_version if ver is None else ver, start, end))

    def run(st: _Stage):
        s = st.index
        while st.pc < len(st.ops):
            op = st.ops[st.pc]
            kind, k = op.kind, op.microbatch
            if kind in (OpKind.ACT_RECV, OpKind.GRAD_RECV):
                key = ("act" if kind is OpKind.ACT_RECV else "grad", k, s)
                if key not in arrivals:
                    waiting[key].append(s)
                    return
                dur = link[s - 1] if kind is OpKind.ACT_RECV else link[s]
                start = max(st.t, arrivals[key])
                st.t = start + dur
                emit(st, COMPUTE, op, start, st.t)
            elif kind in (OpKind.ACT_SEND, OpKind.GRAD_SEND):
                if kind is OpKind.ACT_SEND:
                    dur, key = link[s], ("act", k, s + 1)
                else:
                    dur, key = link[s - 1], ("grad", k, s - 1)
                start = st.t
                st.t = start + dur
                emit(st, COMPUTE, op, start, st.t)
                arrivals[key] = st.t
                ready.extend(waiting.pop(key, ()))
            elif kind is OpKind.FORWARD:
                ver = op.weight_version
                if ver is None or not 0 <= ver < len(st.version_times):
                    raise SimulationError(
                        f"stage {s}: forward {k} needs version {ver} which is never produced "
                        f"before it in program order")
                if policy.flushes and ver != len(st.version_times) - 1:
                    raise SimulationError(f"stage {s}: forward {k} uses stale version {ver}")
                start = max(st.t, st.version_times[ver])
                st.mb_version[k] = ver
                st.t = start + fwd[s]
                st.stash_events.append((start, +1))
                emit(st, COMPUTE, op, start, st.t, ver)
            elif kind in (OpKind.BACKWARD, OpKind.RECOMPUTE):
                if k not in st.mb_version:
                    raise SimulationError(f"stage {s}: backward {k} before its forward")
                ver = st.mb_version[k]
                if op.weight_version not in (None, LATEST) and op.weight_version != ver:
                    raise SimulationError(
                        f"stage {s}: microbatch {k} forward used v{ver}, backward asks "
                        f"v{op.weight_version}")
                start = st.t
                st.t = start + (bwd[s] if kind is OpKind.BACKWARD else fwd[s])
                emit(st, COMPUTE, op, start, st.t, ver)
                if kind is OpKind.BACKWARD:
                    st.stash_events.append((st.t, -1))
                    st.last_use[ver] = max(st.last_use.get(ver, 0.0), st.t)
            elif kind is OpKind.ALL_REDUCE:
                start = max(st.t, st.comm_free)
                st.comm_free = st.last_ar_end = start + ar[s]
                emit(st, COMM, op, start, st.comm_free)
            elif kind is OpKind.WEIGHT_UPDATE:
                when = max(st.t, st.last_ar_end)
                st.version_times.append(when)
                emit(st, COMM, op, when, when, len(st.version_times) - 1)
                if st.pending_flush:
                    emit(st, COMPUTE, ScheduledOp(OpKind.FLUSH_BARRIER), st.t, max(st.t, when))
                    st.t = max(st.t, when)
                    st.pending_flush = False
            elif kind is OpKind.FLUSH_BARRIER:
                st.pending_flush = True
            else:
                raise SimulationError(f"unsupported op {kind}")
            st.pc += 1

    while ready:
        run(state[ready.popleft()])
    stuck = [st.index for st in state if st.pc < len(st.ops)]
    if stuck:
        st = state[stuck[0]]
        raise SimulationError(f"deadlock: stage {st.index} blocked at {st.ops[st.pc]}")

    memory = [_memory_trace(st, stages[st.index], policy, cfg) for st in state]

    per_update = m if policy is Policy.PIPEDREAM else 1
    ends = []
    for t in range(1, num_batches + 1):
        ends.append(max(st.version_times[t * per_update] for st in state))
    if num_batches >= 3:
        lo, hi = ends[0], ends[-2]
        steady = (hi - lo) / (num_batches - 2)
    else:
        lo, hi = 0.0, ends[-1]
        steady = hi / num_batches
    busy = 0.0
    for st in state:
        for e in st.entries:
            if e.lane == COMPUTE and (e.kind in COMPUTE_KINDS or e.kind in COMM_KINDS):
                busy += max(0.0, min(e.end, hi) - max(e.start, lo))
    span = d * (hi - lo)
    bubble = (span - busy) / span if span > 0 else 0.0
    bubble = min(1.0, max(0.0, bubble))

    timeline = []
    for st in state:
        lane_order = {COMPUTE: 0, COMM: 1}
        timeline += sorted(st.entries, key=lambda e: (lane_order[e.lane], e.start, e.end))
    global_batch = b * w * m
    return SimReport(policy, cfg, num_batches, timeline, global_batch / steady, bubble,
                     steady, ends, memory)


def _memory_trace(st: _Stage, stage, policy: Policy, cfg: ParallelConfig) -> MemoryTrace:
    vt = st.version_times
    events = [(0.0, 1, 1, 0)]  # (time, order, d_versions, d_stashes); releases sort first
    for v in range(1, len(vt)):
        events.append((vt[v], 1, 1, 0))
    for v in range(len(vt)):
        if policy is Policy.TWO_BW:
            if v + 2 >= len(vt):
                continue
            release = vt[v + 2]
            if st.last_use.get(v, 0.0) > release:
                raise SimulationError(f"stage {st.index}: version {v} used after discard")
        elif policy is Policy.PIPEDREAM:
            if v + 1 >= len(vt):
                continue
            release = max(vt[v + 1], st.last_use.get(v, 0.0))
        else:
            if v + 1 >= len(vt):
                continue
            release = vt[v + 1]
        events.append((release, 0, -1, 0))
    for t, delta in st.stash_events:
        events.append((t, 0 if delta < 0 else 1, 0, delta))
    events.sort(key=lambda e: (e[0], e[1]))

    b = cfg.microbatch_size
    w_bytes, a_tot, a_in = stage.weight_bytes, stage.act_total(b), stage.act_input(b)
    trace = MemoryTrace()
    versions = stashes = 0
    for t, _, dv, ds in events:
        versions += dv
        stashes += ds
        if cfg.recompute:
            acts = stashes * a_in + (a_tot if stashes else 0.0)
        else:
            acts = stashes * (a_tot + a_in)
        trace.samples.append(MemorySample(t, versions, stashes, versions * w_bytes + acts))
    return trace


def measure_high_water(report: SimReport) -> List[float]:
    return [tr.peak_bytes for tr in report.memory]


def run(policy: Policy, model: ModelProfile, cluster: ClusterSpec, cfg: ParallelConfig,
        num_batches: int) -> SimReport:
    """Generate the programs for ``cfg`` and simulate them."""
    programs = generate_schedule(policy, cfg.depth, cfg.microbatches, num_batches)
    return simulate(programs, model, cluster, cfg, num_batches)

