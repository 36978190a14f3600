"""Per-stage operation programs for each pipelining policy."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import List, Optional, Tuple


class Policy(enum.Enum):
    NO_PIPELINING = "nopipe"
    GPIPE = "gpipe"
    PIPEDREAM = "pipedream"  # 1F1B with weight stashing
    FLUSH = "flush"  # PipeDream-Flush
    TWO_BW = "2bw"

    @classmethod
    def parse(cls, text: str) -> "Policy":
        aliases = {"nopipelining": "nopipe", "pipedream1f1b": "pipedream",
                   "pipedreamflush": "flush", "twobw": "2bw"}
        key = text.strip().lower().replace("-", "").replace("_", "")
        key = aliases.get(key, key)
        for p in cls:
            if p.value == key:
                return p
        raise ValueError(f"unknown policy {text!r}; choose from {[p.value for p in cls]}")

    @property
    def flushes(self) -> bool:
        return self in (Policy.GPIPE, Policy.FLUSH, Policy.NO_PIPELINING)


class OpKind(enum.Enum):
    FORWARD = "F"
    BACKWARD = "B"
    RECOMPUTE = "R"
    WEIGHT_UPDATE = "U"
    FLUSH_BARRIER = "FLUSH"
    ACT_SEND = "SEND_ACT"
    ACT_RECV = "RECV_ACT"
    GRAD_SEND = "SEND_GRAD"
    GRAD_RECV = "RECV_GRAD"
    ALL_REDUCE = "ALLREDUCE"


COMPUTE_KINDS = frozenset({OpKind.FORWARD, OpKind.BACKWARD, OpKind.RECOMPUTE})
COMM_KINDS = frozenset({OpKind.ACT_SEND, OpKind.ACT_RECV, OpKind.GRAD_SEND, OpKind.GRAD_RECV})

# weight_version marker for weight stashing: resolved when the forward executes
LATEST = -1


@dataclass(frozen=True)
class ScheduledOp:
    kind: OpKind
    microbatch: Optional[int] = None
    weight_version: Optional[int] = None

    def to_text(self, stage: int) -> str:
        mb = "-" if self.microbatch is None else self.microbatch
        if self.weight_version is None:
            ver = "-"
        elif self.weight_version == LATEST:
            ver = "latest"
        else:
            ver = self.weight_version
        return f"stage={stage} op={self.kind.value} mb={mb} ver={ver}"

    @classmethod
    def from_text(cls, line: str) -> Tuple[int, "ScheduledOp"]:
        fields = dict(part.split("=", 1) for part in line.split())
        kind = OpKind(fields["op"])
        mb = None if fields["mb"] == "-" else int(fields["mb"])
        ver = {"-": None, "latest": LATEST}.get(fields["ver"])
        if ver is None and fields["ver"] not in ("-",):
            ver = int(fields["ver"])
        return int(fields["stage"]), cls(kind, mb, ver)


@dataclass(frozen=True)
class StageProgram:
    stage: int
    depth: int
    microbatches: int  # m, per batch
    num_batches: int
    policy: Policy
    ops: Tuple[ScheduledOp, ...]

    def to_text(self) -> str:
        return "\n".join(op.to_text(self.stage) for op in self.ops)


def weight_version_2bw(k: int, m: int) -> int:
    """Weight version used by (1-indexed) microbatch k under double buffering."""
    if k < 1 or m < 1:
        raise ValueError("k and m must be >= 1")
    return max((k - 1) // m - 1, 0)


def required_versions(policy: Policy, d: int, m: int) -> int:
    if policy is Policy.TWO_BW:
        return 2
    if policy is Policy.PIPEDREAM:
        return d
    return 1


def _one_f_one_b(stage: int, d: int, first: int, count: int) -> List[Tuple[OpKind, int]]:
    """1F1B order over microbatches first..first+count-1 at one stage."""
    warmup = min(d - stage, count)
    seq = [(OpKind.FORWARD, first + i) for i in range(warmup)]
    next_f, next_b = first + warmup, first
    last = first + count
    while next_b < last:
        seq.append((OpKind.BACKWARD, next_b))
        next_b += 1
        if next_f < last:
            seq.append((OpKind.FORWARD, next_f))
            next_f += 1
    return seq


def _update_ops() -> List[ScheduledOp]:
    return [ScheduledOp(OpKind.ALL_REDUCE), ScheduledOp(OpKind.WEIGHT_UPDATE)]


def generate_schedule(policy: Policy, d: int, m: int, num_batches: int,
                      version_delay: int = 1) -> List[StageProgram]:
    """Build one program per stage.

    ``version_delay`` only affects TWO_BW and exists so tests can inject a wrong
    staleness and check that verification catches it.
    """
    if d < 1 or m < 1 or num_batches < 1:
        raise ValueError("depth, microbatches and num_batches must all be >= 1")
    if policy is Policy.TWO_BW and m < d:
        raise ValueError(f"2BW needs m >= d (got m={m}, d={d})")
    total = m * num_batches
    programs = []
    for s in range(d):
        ops: List[ScheduledOp] = []
        if policy.flushes:
            for t in range(num_batches):
                first = t * m + 1
                if policy is Policy.GPIPE:
                    seq = ([(OpKind.FORWARD, first + i) for i in range(m)]
                           + [(OpKind.BACKWARD, first + i) for i in range(m)])
                elif policy is Policy.FLUSH:
                    seq = _one_f_one_b(s, d, first, m)
                else:
                    seq = [x for i in range(m)
                           for x in ((OpKind.FORWARD, first + i), (OpKind.BACKWARD, first + i))]
                ops += [ScheduledOp(kind, k, t) for kind, k in seq]
                ops.append(ScheduledOp(OpKind.FLUSH_BARRIER))
                ops += _update_ops()
        else:
            for kind, k in _one_f_one_b(s, d, 1, total):
                if policy is Policy.TWO_BW:
                    ver = max((k - 1) // m - version_delay, 0)
                else:
                    # one update per backward, so forward k follows k - (d - s) of them
                    ver = max(k - (d - s), 0)
                ops.append(ScheduledOp(kind, k, ver))
                if kind is OpKind.BACKWARD and (policy is Policy.PIPEDREAM or k % m == 0):
                    ops += _update_ops()
        programs.append(StageProgram(s, d, m, num_batches, policy, tuple(ops)))
    return programs


def programs_to_text(programs: List[StageProgram]) -> str:
    return "\n".join(p.to_text() for p in programs) + "\n"


def compact(program: StageProgram, kinds=(OpKind.FORWARD, OpKind.BACKWARD, OpKind.WEIGHT_UPDATE)) -> str:
    """Short form such as ``F1 F2 B1 U`` used in docs and tests."""
    out = []
    for op in program.ops:
        if op.kind in kinds:
            out.append(op.kind.value + ("" if op.microbatch is None else str(op.microbatch)))
    return " ".join(out)
