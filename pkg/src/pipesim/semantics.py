"""Weight-update semantics of the schedules, executed on a small linear chain.

The toy network is a chain of dense layers ``h <- h @ W`` with loss
``0.5 * mean_i ||y_i - t_i||^2``. Gradients are exact, so a schedule replay and
a plain training loop can be compared in double precision.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .schedule import LATEST, OpKind, Policy, generate_schedule

Weights = List[np.ndarray]


class SemanticsError(RuntimeError):
    pass


@dataclass
class ToyModel:
    init_weights: Weights
    inputs: np.ndarray  # (K, b, n_in); microbatch k uses index (k-1) % K
    targets: np.ndarray  # (K, b, n_out)

    @classmethod
    def random(cls, num_layers: int = 4, width: int = 3, microbatch: int = 2,
               num_microbatches: int = 64, seed: int = 0, scale: float = 0.5) -> "ToyModel":
        rng = np.random.default_rng(seed)
        weights = [np.eye(width) + scale * rng.standard_normal((width, width)) / np.sqrt(width)
                   for _ in range(num_layers)]
        x = rng.standard_normal((num_microbatches, microbatch, width))
        y = rng.standard_normal((num_microbatches, microbatch, width))
        return cls(weights, x, y)

    @classmethod
    def quadratic(cls, dim: int = 4, microbatch: int = 4, num_microbatches: int = 64,
                  seed: int = 0) -> "ToyModel":
        """Single-layer least squares with realizable targets (minimum loss 0)."""
        rng = np.random.default_rng(seed)
        w_star = rng.standard_normal((dim, dim))
        x = rng.standard_normal((num_microbatches, microbatch, dim))
        return cls([np.zeros((dim, dim))], x, x @ w_star)

    @property
    def num_layers(self) -> int:
        return len(self.init_weights)

    def microbatch(self, k: int) -> Tuple[np.ndarray, np.ndarray]:
        i = (k - 1) % len(self.inputs)
        return self.inputs[i], self.targets[i]

    def batch(self, t: int, m: int) -> Tuple[np.ndarray, np.ndarray]:
        """All samples of (0-indexed) batch t, i.e. microbatches t*m+1 .. (t+1)*m."""
        xs, ys = zip(*(self.microbatch(t * m + j + 1) for j in range(m)))
        return np.concatenate(xs), np.concatenate(ys)


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float
    microbatches: int
    num_batches: int
    momentum: float = 0.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.microbatches < 1 or self.num_batches < 0:
            raise ValueError("microbatches must be >= 1 and num_batches >= 0")


def chain_forward(weights: Sequence[np.ndarray], x: np.ndarray) -> List[np.ndarray]:
    acts = [x]
    for w in weights:
        acts.append(acts[-1] @ w)
    return acts


def chain_backward(weights: Sequence[np.ndarray], acts: Sequence[np.ndarray],
                   grad_out: np.ndarray) -> Tuple[Weights, np.ndarray]:
    grads = [None] * len(weights)
    g = grad_out
    for i in reversed(range(len(weights))):
        grads[i] = acts[i].T @ g
        g = g @ weights[i].T
    return grads, g


def loss_and_grad(weights: Sequence[np.ndarray], x: np.ndarray,
                  y: np.ndarray) -> Tuple[float, Weights]:
    acts = chain_forward(weights, x)
    diff = acts[-1] - y
    n = len(x)
    loss = 0.5 * float(np.sum(diff * diff)) / n
    grads, _ = chain_backward(weights, acts, diff / n)
    return loss, grads


def _step(weights, grads, velocity, cfg: TrainerConfig):
    if cfg.momentum:
        velocity = [cfg.momentum * v + (1 - cfg.momentum) * g for v, g in zip(velocity, grads)]
        direction = velocity
    else:
        direction = grads
    return [w - cfg.learning_rate * g for w, g in zip(weights, direction)], velocity


def reference_vanilla(model: ToyModel, cfg: TrainerConfig) -> List[Weights]:
    traj = [[w.copy() for w in model.init_weights]]
    velocity = [np.zeros_like(w) for w in model.init_weights]
    for t in range(cfg.num_batches):
        x, y = model.batch(t, cfg.microbatches)
        _, grads = loss_and_grad(traj[-1], x, y)
        new, velocity = _step(traj[-1], grads, velocity, cfg)
        traj.append(new)
    return traj


def reference_2bw(model: ToyModel, cfg: TrainerConfig, delay: int = 1) -> List[Weights]:
    """Delayed-gradient loop: batch t's gradient is taken at version max(t - delay, 0)."""
    traj = [[w.copy() for w in model.init_weights]]
    velocity = [np.zeros_like(w) for w in model.init_weights]
    for t in range(cfg.num_batches):
        x, y = model.batch(t, cfg.microbatches)
        _, grads = loss_and_grad(traj[max(t - delay, 0)], x, y)
        new, velocity = _step(traj[-1], grads, velocity, cfg)
        traj.append(new)
    return traj


class _StageState:
    def __init__(self, weights: Weights, policy: Policy):
        self.policy = policy
        self.versions: Dict[int, Weights] = {0: [w.copy() for w in weights]}
        self.latest = 0
        self.velocity = [np.zeros_like(w) for w in weights]
        self.grad_acc = [np.zeros_like(w) for w in weights]
        self.acc_count = 0
        self.stash: Dict[int, Tuple[int, List[np.ndarray]]] = {}
        self.history: List[Weights] = [self.versions[0]]
        self.used: Dict[int, Tuple[int, int]] = {}  # mb -> (forward ver, backward ver)
        self.max_versions = 1

    def get(self, v: int, who: str) -> Weights:
        if v not in self.versions:
            raise SemanticsError(f"{who} needs weight version {v}, which is not resident "
                                 f"(held: {sorted(self.versions)})")
        return self.versions[v]


def pipelined_execute(model: ToyModel, cfg: TrainerConfig, policy: Policy, depth: int,
                      programs=None, return_stats: bool = False):
    """Replay the generated programs op by op on real tensors.

    Every stage keeps only the weight versions its policy allows and the inputs
    of in-flight microbatches; updates happen exactly at the WeightUpdate ops.
    Returns the trajectory of full-model weights after each batch.
    """
    if policy is Policy.NO_PIPELINING:
        raise SemanticsError("semantics replay covers pipelined policies only")
    if model.num_layers % depth:
        raise SemanticsError(f"{model.num_layers} layers cannot be split into {depth} stages")
    m = cfg.microbatches
    if programs is None:
        programs = generate_schedule(policy, depth, m, cfg.num_batches)
    if len(programs) != depth or programs[0].microbatches != m:
        raise SemanticsError("programs do not match the model/trainer shape")
    per = model.num_layers // depth
    stages = [_StageState(model.init_weights[s * per:(s + 1) * per], policy)
              for s in range(depth)]
    acts_in: Dict[Tuple[int, int], np.ndarray] = {}
    grads_in: Dict[Tuple[int, int], np.ndarray] = {}
    losses: Dict[int, float] = {}
    pcs = [0] * depth
    n_ops = sum(len(p.ops) for p in programs)
    done = 0

    def step_stage(s: int) -> bool:
        st, prog = stages[s], programs[s]
        if pcs[s] >= len(prog.ops):
            return False
        op = prog.ops[pcs[s]]
        k = op.microbatch
        if op.kind is OpKind.FORWARD:
            if s == 0:
                x = model.microbatch(k)[0]
            elif (s, k) in acts_in:
                x = acts_in.pop((s, k))
            else:
                return False
            ver = st.latest if op.weight_version == LATEST else op.weight_version
            if policy.flushes and ver != st.latest:
                raise SemanticsError(f"stage {s}: forward {k} on stale version {ver}")
            acts = chain_forward(st.get(ver, f"stage {s} forward {k}"), x)
            st.stash[k] = (ver, acts[:-1])
            st.used[k] = (ver, None)
            if s == depth - 1:
                y = model.microbatch(k)[1]
                diff = acts[-1] - y
                losses[k] = 0.5 * float(np.sum(diff * diff)) / len(y)
                grads_in[(s, k)] = diff / len(y)
            else:
                acts_in[(s + 1, k)] = acts[-1]
        elif op.kind is OpKind.BACKWARD:
            if (s, k) not in grads_in:
                return False
            g = grads_in.pop((s, k))
            ver, acts = st.stash.pop(k)
            if op.weight_version not in (None, LATEST) and op.weight_version != ver:
                raise SemanticsError(f"stage {s}: microbatch {k} backward version mismatch")
            weights = st.get(ver, f"stage {s} backward {k}")
            wgrads, gin = chain_backward(weights, acts + [None], g)
            st.used[k] = (ver, ver)
            st.grad_acc = [a + w for a, w in zip(st.grad_acc, wgrads)]
            st.acc_count += 1
            if s > 0:
                grads_in[(s - 1, k)] = gin
        elif op.kind is OpKind.WEIGHT_UPDATE:
            avg = [a / st.acc_count for a in st.grad_acc]
            new, st.velocity = _step(st.versions[st.latest], avg, st.velocity, cfg)
            st.grad_acc = [np.zeros_like(a) for a in st.grad_acc]
            st.acc_count = 0
            st.latest += 1
            st.versions[st.latest] = new
            if policy.flushes:
                # single version: updated in place
                del st.versions[st.latest - 1]
            elif policy is Policy.TWO_BW:
                st.versions.pop(st.latest - 2, None)
            else:
                live = {v for v, _ in st.stash.values()} | {st.latest}
                for v in list(st.versions):
                    if v not in live:
                        del st.versions[v]
            st.max_versions = max(st.max_versions, len(st.versions))
            st.history.append(new)
        # FlushBarrier / AllReduce carry no numerical effect with a single replica
        pcs[s] += 1
        return True

    while done < n_ops:
        progressed = False
        for s in range(depth):
            while step_stage(s):
                done += 1
                progressed = True
        if not progressed:
            raise SemanticsError(f"replay deadlocked at program counters {pcs}")
        if policy is Policy.PIPEDREAM:
            # pipedream stashes live versions of in-flight inputs only
            for st in stages:
                live = {v for v, _ in st.stash.values()} | {st.latest}
                for v in list(st.versions):
                    if v not in live:
                        del st.versions[v]

    if policy is Policy.PIPEDREAM:
        n_versions = min(len(st.history) for st in stages)
        traj = [[w for st in stages for w in st.history[v]] for v in range(n_versions)]
    else:
        traj = [[w for st in stages for w in st.history[t]] for t in range(cfg.num_batches + 1)]
    if return_stats:
        stats = {
            "max_versions": [st.max_versions for st in stages],
            "versions_used": [dict(st.used) for st in stages],
            "losses": [losses[k] for k in sorted(losses)],
        }
        return traj, stats
    return traj


def relative_error(a: Sequence[Weights], b: Sequence[Weights]) -> float:
    """Max over steps of ||a_t - b_t|| / ||b_t|| (all layers flattened)."""
    if len(a) != len(b):
        return float("inf")
    worst = 0.0
    for wa, wb in zip(a, b):
        va = np.concatenate([x.ravel() for x in wa])
        vb = np.concatenate([x.ravel() for x in wb])
        denom = max(np.linalg.norm(vb), 1e-300)
        worst = max(worst, float(np.linalg.norm(va - vb)) / denom)
    return worst


def batch_losses(model: ToyModel, cfg: TrainerConfig, traj: Sequence[Weights],
                 delay: int = 0) -> List[float]:
    """Training loss of batch t at the weights its gradient is computed on."""
    out = []
    for t in range(cfg.num_batches):
        x, y = model.batch(t, cfg.microbatches)
        out.append(loss_and_grad(traj[max(t - delay, 0)], x, y)[0])
    return out


@dataclass
class LossComparison:
    vanilla: List[float]
    two_bw: List[float]
    max_tail_gap: float
    loss_scale: float

    @property
    def relative_tail_gap(self) -> float:
        return self.max_tail_gap / self.loss_scale if self.loss_scale else 0.0

    def to_csv(self) -> str:
        rows = ["batch,vanilla_loss,2bw_loss"]
        rows += [f"{t},{a!r},{b!r}" for t, (a, b) in enumerate(zip(self.vanilla, self.two_bw))]
        return "\n".join(rows) + "\n"


def loss_curve_compare(model: ToyModel, cfg: TrainerConfig) -> LossComparison:
    vanilla = batch_losses(model, cfg, reference_vanilla(model, cfg), delay=0)
    two_bw = batch_losses(model, cfg, reference_2bw(model, cfg), delay=1)
    tail = range(cfg.num_batches // 2, cfg.num_batches)
    gap = max((abs(vanilla[t] - two_bw[t]) for t in tail), default=0.0)
    scale = vanilla[0] if vanilla else 0.0
    return LossComparison(vanilla, two_bw, gap, scale)


def verify_grid(grid: str = "small", inject_delay: Optional[int] = None,
                num_batches: int = 20, seed: int = 0):
    """Run every (policy, d, m, momentum) equivalence case; yields (name, error, ok)."""
    if grid == "small":
        depths, mults = (1, 2, 4), (1, 2)
    elif grid == "full":
        depths, mults = (1, 2, 4, 8), (1, 2, 3, 4)
    else:
        raise ValueError(f"unknown grid {grid!r}")
    for d in depths:
        model = ToyModel.random(num_layers=max(d, 4), seed=seed + d)
        for mult in mults:
            m = d * mult
            for beta in (0.0, 0.9):
                cfg = TrainerConfig(learning_rate=0.05, microbatches=m,
                                    num_batches=num_batches, momentum=beta)
                for policy in (Policy.GPIPE, Policy.FLUSH, Policy.TWO_BW):
                    name = f"{policy.value} d={d} m={m} beta={beta}"
                    try:
                        if policy is Policy.TWO_BW:
                            programs = generate_schedule(policy, d, m, num_batches,
                                                         version_delay=inject_delay or 1)
                            got = pipelined_execute(model, cfg, policy, d, programs)
                            want = reference_2bw(model, cfg)
                        else:
                            got = pipelined_execute(model, cfg, policy, d)
                            want = reference_vanilla(model, cfg)
                        err = relative_error(got, want)
                    except SemanticsError as exc:
                        yield name, float("inf"), False, str(exc)
                        continue
                    yield name, err, err <= 1e-10, ""
