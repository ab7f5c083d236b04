"""Feed-forward Q-network with hand-written backprop.

Parameters live in one flat float64 vector so the continual-learning code can
treat gradients as plain vectors (A-GEM projections, EWC penalties, Fisher
diagonals).  Layer ``l`` stores ``W_l`` (out x in, row-major) followed by
``b_l``; hidden layers come first, then the Q head, then the optional
auxiliary own-hand head, which reads the last hidden layer.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import NumericError, UsageError
from .features import ENCODING_VERSION


@dataclass(frozen=True)
class Architecture:
    input_len: int
    hidden_dims: tuple[int, ...]
    num_actions: int
    aux_head: bool = False
    aux_slots: int = 0
    aux_classes: int = 0
    dropout_rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.hidden_dims:
            raise UsageError("at least one hidden layer is required")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise UsageError("dropout_rate must lie in [0, 1)")
        if self.aux_head and (self.aux_slots < 1 or self.aux_classes < 2):
            raise UsageError("aux head needs aux_slots >= 1 and aux_classes >= 2")

    @cached_property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = (self.input_len,) + self.hidden_dims
        shapes = [(dims[i + 1], dims[i]) for i in range(len(self.hidden_dims))]
        shapes.append((self.num_actions, dims[-1]))
        if self.aux_head:
            shapes.append((self.aux_slots * self.aux_classes, dims[-1]))
        return shapes

    @cached_property
    def layout(self) -> list[tuple[slice, slice]]:
        out, off = [], 0
        for o, i in self.layer_shapes:
            w = slice(off, off + o * i)
            off += o * i
            b = slice(off, off + o)
            off += o
            out.append((w, b))
        return out

    @property
    def num_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes)

    def to_dict(self) -> dict:
        return {
            "input_len": self.input_len,
            "hidden_dims": list(self.hidden_dims),
            "num_actions": self.num_actions,
            "aux_head": self.aux_head,
            "aux_slots": self.aux_slots,
            "aux_classes": self.aux_classes,
            "dropout_rate": self.dropout_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(**{**d, "hidden_dims": tuple(d["hidden_dims"])})


def unflatten(theta: np.ndarray, arch: Architecture) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-layer ``(W, b)`` views into ``theta``."""
    if theta.shape != (arch.num_params,):
        raise UsageError(f"parameter vector has shape {theta.shape}, expected ({arch.num_params},)")
    return [
        (theta[w].reshape(shape), theta[b]) for (w, b), shape in zip(arch.layout, arch.layer_shapes)
    ]


def flatten(layers: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    return np.concatenate([np.concatenate([W.ravel(), b.ravel()]) for W, b in layers])


def init_params(arch: Architecture, seed: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    rng = np.random.default_rng(seed)
    theta = np.empty(arch.num_params)
    for (w, b), (o, i) in zip(arch.layout, arch.layer_shapes):
        bound = 1.0 / np.sqrt(i)
        theta[w] = rng.uniform(-bound, bound, size=o * i)
        theta[b] = rng.uniform(-bound, bound, size=o)
    return theta


# -- forward ------------------------------------------------------------------


@dataclass
class _Cache:
    inputs: list[np.ndarray]  # input to each layer
    masks: list[np.ndarray]  # relu * dropout scale per hidden layer


def _forward(theta, arch, X, dropout_seed=None):
    layers = unflatten(theta, arch)
    n_hidden = len(arch.hidden_dims)
    drop = arch.dropout_rate > 0 and dropout_seed is not None
    rng = np.random.default_rng(dropout_seed) if drop else None
    h = X
    inputs, masks = [], []
    for l in range(n_hidden):
        W, b = layers[l]
        inputs.append(h)
        z = h @ W.T + b
        m = (z > 0).astype(z.dtype)
        if drop:
            keep = rng.random(z.shape) >= arch.dropout_rate
            m *= keep / (1.0 - arch.dropout_rate)
        masks.append(m)
        h = z * m
    inputs.append(h)
    Wq, bq = layers[n_hidden]
    q = h @ Wq.T + bq
    aux = None
    if arch.aux_head:
        Wa, ba = layers[n_hidden + 1]
        aux = (h @ Wa.T + ba).reshape(-1, arch.aux_slots, arch.aux_classes)
    return q, aux, _Cache(inputs, masks)


def forward(
    theta: np.ndarray, arch: Architecture, x: np.ndarray, dropout_seed: int | None = None
) -> tuple[np.ndarray, np.ndarray | None]:
    """Q-values (and own-hand logits when the arch has an aux head).

    Passing ``dropout_seed`` selects training mode, in which dropout is
    applied after every hidden layer; ``None`` is evaluation mode.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[-1] != arch.input_len:
        raise UsageError(f"input length {X.shape[-1]} != {arch.input_len}")
    q, aux, _ = _forward(theta, arch, X, dropout_seed)
    if single:
        return q[0], None if aux is None else aux[0]
    return q, aux


def _backward_deltas(theta, arch, cache, dq, daux):
    """Per-layer ``(delta_rows, input_rows)`` so that dL/dW_l = delta^T @ input."""
    layers = unflatten(theta, arch)
    n_hidden = len(arch.hidden_dims)
    out = [None] * len(arch.layer_shapes)
    h_last = cache.inputs[n_hidden]
    out[n_hidden] = (dq, h_last)
    dh = dq @ layers[n_hidden][0]
    if arch.aux_head:
        da = daux.reshape(daux.shape[0], -1)
        out[n_hidden + 1] = (da, h_last)
        dh = dh + da @ layers[n_hidden + 1][0]
    for l in range(n_hidden - 1, -1, -1):
        dz = dh * cache.masks[l]
        out[l] = (dz, cache.inputs[l])
        if l > 0:
            dh = dz @ layers[l][0]
    return out


def _grad_from_deltas(arch, deltas) -> np.ndarray:
    g = np.zeros(arch.num_params)
    for (w, b), (d, inp) in zip(arch.layout, deltas):
        if d is None:
            continue
        g[w] = (d.T @ inp).ravel()
        g[b] = d.sum(axis=0)
    return g


# -- losses -------------------------------------------------------------------


@dataclass
class Batch:
    """Transitions stacked over ``K`` controlled seats (1 for IQL, 2 for VDN)."""

    obs: np.ndarray  # [N, K, D]
    action: np.ndarray  # [N, K]
    reward: np.ndarray  # [N]
    next_obs: np.ndarray  # [N, K, D]
    terminal: np.ndarray  # [N]
    next_legal: np.ndarray  # [N, K, A] bool
    legal: np.ndarray | None = None  # [N, K, A] bool
    aux_labels: np.ndarray | None = None  # [N, K, S], -1 marks an empty slot
    weights: np.ndarray | None = None  # [N] importance weights

    def __len__(self):
        return self.obs.shape[0]

    @property
    def seats(self) -> int:
        return self.obs.shape[1]

    def subset(self, idx) -> "Batch":
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return Batch(
            obs=self.obs[idx],
            action=self.action[idx],
            reward=self.reward[idx],
            next_obs=self.next_obs[idx],
            terminal=self.terminal[idx],
            next_legal=self.next_legal[idx],
            legal=pick(self.legal),
            aux_labels=pick(self.aux_labels),
            weights=pick(self.weights),
        )

    @staticmethod
    def concat(batches: list["Batch"]) -> "Batch":
        batches = [b for b in batches if b is not None and len(b) > 0]
        if not batches:
            raise UsageError("nothing to concatenate")

        def cat(name, fill=None):
            parts = [getattr(b, name) for b in batches]
            if all(p is None for p in parts):
                return None
            if any(p is None for p in parts):
                if fill is None:
                    raise UsageError(f"field {name} missing from some batches")
                parts = [fill(b) if p is None else p for b, p in zip(batches, parts)]
            return np.concatenate(parts)

        return Batch(
            obs=cat("obs"),
            action=cat("action"),
            reward=cat("reward"),
            next_obs=cat("next_obs"),
            terminal=cat("terminal"),
            next_legal=cat("next_legal"),
            legal=cat("legal"),
            aux_labels=cat("aux_labels"),
            weights=cat("weights", fill=lambda b: np.ones(len(b))),
        )


@dataclass
class LossSpec:
    """Which scalar ``backward`` differentiates: ``td_weight*TD + aux_weight*AUX``."""

    target_params: np.ndarray | None = None
    discount: float = 0.99
    td_weight: float = 1.0
    aux_weight: float = 0.0
    dropout_seed: int | None = None


@dataclass
class LossResult:
    loss: float
    grad: np.ndarray
    td: np.ndarray  # per-sample TD errors (target - Q)
    td_loss: float
    aux_loss: float


def _check_batch(batch: Batch, arch: Architecture) -> None:
    if len(batch) == 0:
        raise UsageError("empty batch")
    if batch.obs.shape[-1] != arch.input_len:
        raise UsageError(f"batch features {batch.obs.shape[-1]} != input_len {arch.input_len}")
    if batch.next_legal.shape[-1] != arch.num_actions:
        raise UsageError("legal-action masks do not match the action count")


def td_targets(theta, theta_target, arch, batch: Batch, discount: float) -> np.ndarray:
    """Double-Q targets ``r + discount * sum_k Q_target(s'_k, argmax_legal Q(s'_k))``."""
    N, K, D = batch.next_obs.shape
    if theta_target is None:
        theta_target = theta
    live = ~batch.terminal.astype(bool)
    boot = np.zeros(N)
    if discount != 0.0 and live.any():
        X = batch.next_obs[live].reshape(-1, D)
        legal = batch.next_legal[live].reshape(-1, arch.num_actions)
        q_online, _, _ = _forward(theta, arch, X)
        q_tgt, _, _ = _forward(theta_target, arch, X)
        masked = np.where(legal, q_online, -np.inf)
        a_star = masked.argmax(axis=1)
        vals = q_tgt[np.arange(len(a_star)), a_star] * legal.any(axis=1)
        boot[live] = vals.reshape(-1, K).sum(axis=1)
    return batch.reward + discount * boot


def _aux_terms(aux, labels):
    """Mean cross-entropy over occupied slots and its gradient w.r.t. the logits."""
    valid = labels >= 0
    count = valid.sum()
    if count == 0:
        return 0.0, np.zeros_like(aux)
    z = aux - aux.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -(picked * valid).sum() / count
    grad = np.exp(logp)
    np.put_along_axis(grad, safe[..., None], np.take_along_axis(grad, safe[..., None], -1) - 1.0, -1)
    grad *= valid[..., None] / count
    return float(loss), grad


def loss_and_grad(theta, arch: Architecture, batch: Batch, spec: LossSpec) -> LossResult:
    _check_batch(batch, arch)
    N, K, D = batch.obs.shape
    need_aux = spec.aux_weight != 0.0
    if need_aux:
        if not arch.aux_head:
            raise UsageError("aux loss requested for an architecture without an aux head")
        if batch.aux_labels is None:
            raise UsageError("aux loss requested but the batch carries no own-hand labels")
    X = batch.obs.reshape(N * K, D)
    q, aux, cache = _forward(theta, arch, X, spec.dropout_seed)
    rows = np.arange(N * K)
    acts = batch.action.reshape(-1)
    q_sa = q[rows, acts].reshape(N, K).sum(axis=1)
    target = td_targets(theta, spec.target_params, arch, batch, spec.discount)
    td = target - q_sa
    w = np.ones(N) if batch.weights is None else batch.weights
    td_loss = float(np.mean(w * td * td))

    dq = np.zeros_like(q)
    if spec.td_weight != 0.0:
        dq[rows, acts] = np.repeat(spec.td_weight * (-2.0) * w * td / N, K)
    aux_loss = 0.0
    daux = None
    if arch.aux_head:
        daux = np.zeros_like(aux)
        if need_aux:
            aux_loss, g = _aux_terms(aux, batch.aux_labels.reshape(N * K, arch.aux_slots))
            daux = spec.aux_weight * g
    deltas = _backward_deltas(theta, arch, cache, dq, daux)
    grad = _grad_from_deltas(arch, deltas)
    loss = spec.td_weight * td_loss + spec.aux_weight * aux_loss
    return LossResult(loss=loss, grad=grad, td=td, td_loss=td_loss, aux_loss=aux_loss)


def td_loss(theta, theta_target, arch, batch: Batch, discount: float) -> tuple[float, np.ndarray]:
    """``(mean squared TD error, per-sample TD errors)``."""
    _check_batch(batch, arch)
    N, K, D = batch.obs.shape
    q, _, _ = _forward(theta, arch, batch.obs.reshape(N * K, D))
    q_sa = q[np.arange(N * K), batch.action.reshape(-1)].reshape(N, K).sum(axis=1)
    td = td_targets(theta, theta_target, arch, batch, discount) - q_sa
    w = np.ones(N) if batch.weights is None else batch.weights
    return float(np.mean(w * td * td)), td


def backward(theta, arch: Architecture, batch: Batch, loss_spec: LossSpec) -> np.ndarray:
    return loss_and_grad(theta, arch, batch, loss_spec).grad


def aux_loss(theta, arch: Architecture, batch: Batch) -> tuple[float, np.ndarray]:
    """Own-hand cross-entropy and its gradient."""
    r = loss_and_grad(theta, arch, batch, LossSpec(td_weight=0.0, aux_weight=1.0))
    return r.aux_loss, r.grad


def per_sample_gradients(
    theta, arch: Architecture, batch: Batch, spec: LossSpec, chunk: int = 64
) -> Iterator[np.ndarray]:
    """Yield ``[n, P]`` blocks of gradients of each sample's own TD loss ``w_i * delta_i**2``."""
    _check_batch(batch, arch)
    N = len(batch)
    for start in range(0, N, chunk):
        sub = batch.subset(slice(start, start + chunk))
        n, K, D = sub.obs.shape
        q, aux, cache = _forward(theta, arch, sub.obs.reshape(n * K, D), spec.dropout_seed)
        rows = np.arange(n * K)
        acts = sub.action.reshape(-1)
        q_sa = q[rows, acts].reshape(n, K).sum(axis=1)
        td = td_targets(theta, spec.target_params, arch, sub, spec.discount) - q_sa
        w = np.ones(n) if sub.weights is None else sub.weights
        dq = np.zeros_like(q)
        dq[rows, acts] = np.repeat(spec.td_weight * (-2.0) * w * td, K)
        daux = None if aux is None else np.zeros_like(aux)
        deltas = _backward_deltas(theta, arch, cache, dq, daux)
        G = np.zeros((n, arch.num_params))
        for (ws, bs), (d, inp), (o, i) in zip(arch.layout, deltas, arch.layer_shapes):
            d3 = d.reshape(n, K, o)
            G[:, ws] = np.einsum("nko,nki->noi", d3, inp.reshape(n, K, i)).reshape(n, -1)
            G[:, bs] = d3.sum(axis=1)
        yield G


# -- optimisers ---------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str = "adam"  # "adam" or "sgd"
    learning_rate: float = 1e-3
    lr_decay: float = 1.0  # multiplied into the rate at each epoch boundary
    momentum: float = 0.8  # sgd only
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    step: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)
    velocity: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise UsageError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate < 0:
            raise UsageError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise UsageError("momentum must lie in [0, 1)")

    def fresh(self) -> "OptimizerState":
        """Same hyperparameters, zeroed moments."""
        return replace(self, step=0, m=None, v=None, velocity=None)


def optimizer_step(
    opt: OptimizerState, theta: np.ndarray, g: np.ndarray
) -> tuple[np.ndarray, OptimizerState]:
    if g.shape != theta.shape:
        raise UsageError(f"gradient shape {g.shape} != parameter shape {theta.shape}")
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient; step refused")
    if opt.kind == "adam":
        m = np.zeros_like(theta) if opt.m is None else opt.m
        v = np.zeros_like(theta) if opt.v is None else opt.v
        t = opt.step + 1
        m = opt.beta1 * m + (1.0 - opt.beta1) * g
        v = opt.beta2 * v + (1.0 - opt.beta2) * (g * g)
        m_hat = m / (1.0 - opt.beta1**t)
        v_hat = v / (1.0 - opt.beta2**t)
        new = theta - opt.learning_rate * m_hat / (np.sqrt(v_hat) + opt.eps)
        return new, replace(opt, step=t, m=m, v=v)
    vel = np.zeros_like(theta) if opt.velocity is None else opt.velocity
    vel = opt.momentum * vel + g
    return theta - opt.learning_rate * vel, replace(opt, step=opt.step + 1, velocity=vel)


def decay_learning_rate(opt: OptimizerState) -> OptimizerState:
    return replace(opt, learning_rate=opt.learning_rate * opt.lr_decay)


def clip_grad_norm(g: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return g
    n = float(np.linalg.norm(g))
    return g * (max_norm / n) if n > max_norm else g


# -- acting -------------------------------------------------------------------


def _as_rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def greedy(q: np.ndarray, legal: np.ndarray) -> np.ndarray:
    """Legal argmax per row; ties go to the lowest index."""
    return np.where(legal, q, -np.inf).argmax(axis=-1)


def epsilon_greedy(q: np.ndarray, legal: np.ndarray, epsilon: float, seed) -> int:
    legal = np.asarray(legal, dtype=bool)
    if not legal.any():
        raise UsageError("no legal action")
    rng = _as_rng(seed)
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.choice(np.flatnonzero(legal)))
    return int(greedy(np.asarray(q), legal))


def epsilon_greedy_batch(q: np.ndarray, legal: np.ndarray, epsilon: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise epsilon-greedy; returns ``(actions, greedy_actions)``."""
    if not legal.any(axis=1).all():
        raise UsageError("a row has no legal action")
    g = greedy(q, legal)
    if epsilon <= 0:
        return g, g
    rng = _as_rng(rng)
    explore = rng.random(len(g)) < epsilon
    # uniform legal pick: the k-th legal entry for a uniform k
    u = rng.random(len(g))
    counts = legal.sum(axis=1)
    k = np.minimum((u * counts).astype(np.int64), counts - 1)
    cum = np.cumsum(legal, axis=1)
    rand = (cum > k[:, None]).argmax(axis=1)
    return np.where(explore, rand, g), g


def linear_epsilon(step: int, total: int, start: float = 1.0, end: float = 0.05, fraction: float = 0.5) -> float:
    span = max(1, int(total * fraction))
    if step >= span:
        return end
    return start + (end - start) * step / span


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_MAGIC = b"LHCK"
CHECKPOINT_FORMAT = 1


@dataclass
class Checkpoint:
    """Network parameters plus everything needed to rebuild the agent.

    Parameters are rounded to float32 on construction so an in-memory
    checkpoint behaves exactly like one reloaded from disk.
    """

    arch: Architecture
    params: np.ndarray
    encoding: dict
    agent: dict
    seed: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.params.shape != (self.arch.num_params,):
            raise UsageError("parameter vector does not match the architecture")
        self.params = np.asarray(self.params, dtype=np.float32).astype(np.float64)

    def header(self) -> dict:
        return {
            "encoding_version": ENCODING_VERSION,
            "architecture": self.arch.to_dict(),
            "encoding": self.encoding,
            "agent": self.agent,
            "seed": self.seed,
            "meta": self.meta,
            "num_params": self.arch.num_params,
        }

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True).encode()
        return (
            CHECKPOINT_MAGIC
            + struct.pack("<II", CHECKPOINT_FORMAT, len(head))
            + head
            + self.params.astype("<f4").tobytes()
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:4] != CHECKPOINT_MAGIC:
            raise UsageError("not a checkpoint file")
        fmt, n = struct.unpack("<II", data[4:12])
        if fmt != CHECKPOINT_FORMAT:
            raise UsageError(f"checkpoint format {fmt} != {CHECKPOINT_FORMAT}")
        head = json.loads(data[12 : 12 + n])
        if head["encoding_version"] != ENCODING_VERSION:
            raise UsageError(
                f"checkpoint encoding version {head['encoding_version']} != {ENCODING_VERSION}"
            )
        arch = Architecture.from_dict(head["architecture"])
        params = np.frombuffer(data[12 + n :], dtype="<f4")
        if params.size != head["num_params"] or params.size != arch.num_params:
            raise UsageError("checkpoint parameter count mismatch")
        return cls(
            arch=arch,
            params=params.astype(np.float64),
            encoding=head["encoding"],
            agent=head["agent"],
            seed=head["seed"],
            meta=head["meta"],
        )


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(ckpt.to_bytes())
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())
