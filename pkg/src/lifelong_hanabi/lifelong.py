"""Sequential training of one learner against a fixed list of frozen partners.

Algorithms: plain fine-tuning (``naive``), experience replay (``er``),
averaged gradient episodic memory (``agem``), elastic weight consolidation
with one anchor per task (``ewc_offline``) or a single running anchor
(``ewc_online``), and the multi-task upper bound (``multitask``) that trains
on all partners at once through one shared buffer.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .agents import Agent, Role, Rollout, check_compatible
from .errors import ConfigError, NumericError, UsageError
from .evaluation import FewShotConfig, few_shot_eval, normalize_score, play_match
from .learner import (
    Batch,
    LossSpec,
    OptimizerState,
    clip_grad_norm,
    decay_learning_rate,
    loss_and_grad,
    optimizer_step,
    per_sample_gradients,
)
from .memory import EpisodicMemory, ReplayBuffer, sample_memory, snapshot_task
from .seeding import derive_seed

log = logging.getLogger(__name__)

ALGORITHMS = ("naive", "er", "agem", "ewc_offline", "ewc_online", "multitask")


@dataclass
class LLLConfig:
    algorithm: str = "naive"
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    lr_decay: float = 1.0
    sgd_momentum: float = 0.8
    dropout_rate: float = 0.0
    batch_size: int = 32
    epochs_per_task: int = 10
    epoch_len: int = 200
    eval_freq: int = 25
    burn_in_frames: int = 10000
    buffer_size: int = 32768
    multitask_buffer_size: int = 163840
    memory_strategy: str = "surprise"
    priority_alpha: float = 0.9
    priority_beta: float = 0.6
    per_task_size: int = 2000
    ewc_lambda: float = 50000.0
    ewc_gamma: float = 1.0
    fisher_samples: int = 1024
    epsilon: float = 0.05
    transitions_per_step: int = 4
    n_parallel: int = 32  # games stepped in lockstep by the learner's actors
    eval_n_parallel: int = 10  # same, for few-shot data collection
    target_update: int = 500
    discount: float = 0.99
    grad_clip: float | None = 5.0
    aux_weight: float = 0.0
    eval_games: int = 200
    few_shot_steps: int = 50
    eval_burn_in_frames: int = 1000
    eval_buffer_size: int = 10000
    few_shot_lr: float | None = None  # None: same as learning_rate
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.ewc_lambda < 0:
            raise ConfigError("ewc_lambda must be non-negative")
        if not 0.0 <= self.ewc_gamma <= 1.0:
            raise ConfigError("ewc_gamma must lie in [0, 1]")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.epochs_per_task < 1 or self.epoch_len < 1 or self.eval_freq < 1:
            raise ConfigError("epochs_per_task, epoch_len and eval_freq must be positive")

    @classmethod
    def stable(cls, **overrides) -> "LLLConfig":
        """SGD with momentum, a high decaying learning rate and dropout."""
        base = dict(optimizer="sgd", learning_rate=0.02, lr_decay=0.9, dropout_rate=0.1)
        base.update(overrides)
        return cls(**base)

    def optimizer_state(self) -> OptimizerState:
        return OptimizerState(
            kind=self.optimizer,
            learning_rate=self.learning_rate,
            lr_decay=self.lr_decay,
            momentum=self.sgd_momentum,
            batch_size=self.batch_size,
        )

    def few_shot_config(self) -> FewShotConfig:
        lr = self.learning_rate if self.few_shot_lr is None else self.few_shot_lr
        return FewShotConfig(
            k_steps=self.few_shot_steps,
            burn_in=self.eval_burn_in_frames,
            buffer_size=self.eval_buffer_size,
            batch_size=self.batch_size,
            epsilon=self.epsilon,
            discount=self.discount,
            grad_clip=self.grad_clip,
            n_parallel=self.eval_n_parallel,
            optimizer=replace(self.optimizer_state(), learning_rate=lr, lr_decay=1.0),
        )


# -- algorithm pieces ------------------------------------------------------------


def agem_project(g: np.ndarray, g_ref: np.ndarray) -> np.ndarray:
    """Remove the component of ``g`` that would increase the reference loss."""
    if g.shape != g_ref.shape:
        raise UsageError("gradient lengths differ")
    dot = float(g @ g_ref)
    if dot >= 0.0:
        return g
    # rescale first so tiny reference gradients do not underflow when squared
    u = g_ref / np.abs(g_ref).max()
    return g - (float(g @ u) / float(u @ u)) * u


@dataclass
class EWCState:
    mode: str = "online"  # "online" or "offline"
    anchors: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)  # (theta_star, fisher)

    def __post_init__(self):
        if self.mode not in ("online", "offline"):
            raise ConfigError(f"unknown EWC mode {self.mode!r}")


def ewc_penalty(theta: np.ndarray, state: EWCState, lam: float) -> tuple[float, np.ndarray]:
    """``sum_anchors lam/2 * sum_i F_i (theta_i - theta*_i)^2`` and its gradient."""
    if not state.anchors:
        raise UsageError("EWC penalty needs at least one anchor")
    pen = 0.0
    grad = np.zeros_like(theta)
    for star, fisher in state.anchors:
        if star.shape != theta.shape or fisher.shape != theta.shape:
            raise UsageError("EWC anchor length does not match the parameters")
        d = theta - star
        pen += 0.5 * lam * float(fisher @ (d * d))
        grad += lam * fisher * d
    return pen, grad


def fisher_diag(theta: np.ndarray, arch, batch: Batch, spec: LossSpec | None = None) -> np.ndarray:
    """Empirical diagonal Fisher: mean squared per-sample TD-loss gradient."""
    if len(batch) == 0:
        raise UsageError("empty batch")
    spec = spec or LossSpec()
    acc = np.zeros(arch.num_params)
    for G in per_sample_gradients(theta, arch, batch, spec):
        acc += (G * G).sum(axis=0)
    return acc / len(batch)


def consolidate_online(state: EWCState, fisher_new: np.ndarray, theta_new: np.ndarray, gamma: float) -> EWCState:
    if state.mode != "online":
        raise UsageError("online consolidation on an offline EWC state")
    if not state.anchors:
        return EWCState("online", [(theta_new.copy(), fisher_new.copy())])
    _, f_old = state.anchors[0]
    return EWCState("online", [(theta_new.copy(), gamma * f_old + fisher_new)])


def consolidate(state: EWCState, fisher_new: np.ndarray, theta_new: np.ndarray, gamma: float) -> EWCState:
    if state.mode == "online":
        return consolidate_online(state, fisher_new, theta_new, gamma)
    return EWCState("offline", state.anchors + [(theta_new.copy(), fisher_new.copy())])


def er_step(theta, arch, b_k: Batch, b_m: Batch | None, opt: OptimizerState, spec: LossSpec, grad_clip=None):
    """One optimizer step on the stacked current-task and memory batches."""
    batch = b_k if b_m is None or len(b_m) == 0 else Batch.concat([b_k, b_m])
    r = loss_and_grad(theta, arch, batch, spec)
    theta, opt = optimizer_step(opt, theta, clip_grad_norm(r.grad, grad_clip))
    return theta, opt, r


# -- continual runs ------------------------------------------------------------------


@dataclass
class ContinualResult:
    agent: Agent
    zero_shot: np.ndarray  # [T + 1, T]
    few_shot: np.ndarray  # [T + 1, T]
    history: list[dict]
    heldout_zero_shot: np.ndarray | None = None  # [2, K]: before and after


def params_digest(a: Agent) -> str:
    return hashlib.sha256(np.ascontiguousarray(a.params).tobytes()).hexdigest()


class _Learner:
    """Mutable training state shared by the sequential and multi-task loops."""

    def __init__(self, learner: Agent, cfg: LLLConfig):
        self.cfg = cfg
        arch = replace(learner.arch, dropout_rate=cfg.dropout_rate)
        self.agent = replace(learner, arch=arch, params=learner.params.copy())
        self.theta = self.agent.params
        self.target = self.theta.copy()
        self.opt = cfg.optimizer_state()
        self.rng = np.random.default_rng(derive_seed(cfg.seed, "learner"))
        self.role = Role(self.agent, epsilon=cfg.epsilon, collect=True)
        self.step = 0
        self.ewc = EWCState("offline" if cfg.algorithm == "ewc_offline" else "online")
        self.memory = EpisodicMemory(cfg.per_task_size)

    def snapshot(self) -> Agent:
        return replace(self.agent, params=self.theta.copy())

    def loss_spec(self) -> LossSpec:
        seed = derive_seed(self.cfg.seed, "dropout", self.step) if self.cfg.dropout_rate > 0 else None
        aux = self.cfg.aux_weight if self.agent.arch.aux_head else 0.0
        return LossSpec(target_params=self.target, discount=self.cfg.discount, aux_weight=aux, dropout_seed=seed)

    def update(self, buf: ReplayBuffer, task: int) -> float:
        cfg = self.cfg
        b_k, ids, _w = buf.sample(cfg.batch_size, self.rng)
        spec = self.loss_spec()
        algo = cfg.algorithm
        has_memory = task > 1 and algo in ("er", "agem")
        if algo == "er" and has_memory:
            b_m = sample_memory(self.memory, cfg.batch_size, task, self.rng)
            r = loss_and_grad(self.theta, self.agent.arch, Batch.concat([b_k, b_m]), spec)
            td_k = r.td[: len(b_k)]
            g = r.grad
        else:
            r = loss_and_grad(self.theta, self.agent.arch, b_k, spec)
            td_k = r.td
            g = r.grad
            if algo == "agem" and has_memory:
                b_m = sample_memory(self.memory, cfg.batch_size, task, self.rng)
                g_ref = loss_and_grad(self.theta, self.agent.arch, b_m, spec).grad
                g = agem_project(g, g_ref)
            elif algo.startswith("ewc") and self.ewc.anchors:
                _pen, g_pen = ewc_penalty(self.theta, self.ewc, cfg.ewc_lambda)
                g = g + g_pen
        if not np.isfinite(r.loss):
            raise NumericError(f"non-finite loss at step {self.step}")
        buf.update_priorities(ids, td_k)
        self.theta, self.opt = optimizer_step(self.opt, self.theta, clip_grad_norm(g, cfg.grad_clip))
        self.role.params = self.theta
        self.step += 1
        if self.step % cfg.target_update == 0:
            self.target = self.theta.copy()
        return r.loss

    def end_task(self, task: int, buf: ReplayBuffer, partner: Agent) -> None:
        cfg = self.cfg
        if cfg.algorithm in ("er", "agem"):
            snapshot_task(buf, self.memory, task)
        elif cfg.algorithm.startswith("ewc"):
            # fresh play with the final parameters of this task
            role = Role(self.snapshot(), epsilon=cfg.epsilon, collect=True)
            ro = Rollout([role, Role(partner)], self.agent.config, n_parallel=32,
                         seed=derive_seed(cfg.seed, "fisher", task))
            data = ro.collect(cfg.fisher_samples)[: cfg.fisher_samples]
            fbuf = ReplayBuffer(len(data), strategy="fifo")
            fbuf.extend(data)
            batch = fbuf.batch_at(np.arange(len(data)))
            fisher = fisher_diag(self.theta, self.agent.arch, batch, LossSpec(target_params=self.target, discount=cfg.discount))
            self.ewc = consolidate(self.ewc, fisher, self.theta, cfg.ewc_gamma)


def _evaluate(learner: Agent, partners: list[Agent], cfg: LLLConfig, key: tuple) -> tuple[np.ndarray, np.ndarray]:
    """Zero- and few-shot normalized scores against every partner.

    Match seeds depend only on the partner, so rows of the score matrix are
    comparable across evaluation points and algorithms.
    """
    fs = cfg.few_shot_config()
    zero, few = [], []
    for j, p in enumerate(partners):
        match_seed = derive_seed(cfg.seed, "eval", j)
        zero.append(normalize_score(play_match(learner, p, cfg.eval_games, match_seed).mean, learner.config))
        if cfg.few_shot_steps > 0:
            few.append(few_shot_eval(learner, p, fs, derive_seed(cfg.seed, "few_shot", *key, j), cfg.eval_games, match_seed))
        else:
            few.append(zero[-1])
    return np.array(zero), np.array(few)


def _records(task: int, epoch: int, partners: list[Agent], zero, few) -> list[dict]:
    return [
        {"task": task, "epoch": epoch, "partner": p.name, "zero_shot": float(z), "few_shot": float(f)}
        for p, z, f in zip(partners, zero, few)
    ]


def _check_partners(learner: Agent, partners: list[Agent]) -> None:
    if not partners:
        raise UsageError("at least one partner is required")
    for p in partners:
        check_compatible(learner, p)
        if p.encoding.to_dict()["version"] != learner.encoding.to_dict()["version"]:
            raise UsageError(f"partner {p.name} uses a different encoding version")


def _heldout(agent: Agent, heldout: list[Agent] | None, cfg: LLLConfig) -> np.ndarray | None:
    if not heldout:
        return None
    return np.array([
        normalize_score(play_match(agent, h, cfg.eval_games, derive_seed(cfg.seed, "heldout", k)).mean, agent.config)
        for k, h in enumerate(heldout)
    ])


def run_continual(
    learner: Agent,
    partners: list[Agent],
    cfg: LLLConfig,
    heldout: list[Agent] | None = None,
) -> ContinualResult:
    if cfg.algorithm == "multitask":
        return run_multitask(learner, partners, cfg, heldout)
    _check_partners(learner, partners)
    digests = [params_digest(p) for p in partners]
    T = len(partners)
    st = _Learner(learner, cfg)
    zero = np.full((T + 1, T), np.nan)
    few = np.full((T + 1, T), np.nan)
    history: list[dict] = []
    zero[0], few[0] = _evaluate(st.snapshot(), partners, cfg, (0, 0))
    history += _records(0, 0, partners, zero[0], few[0])
    base_heldout = _heldout(st.snapshot(), heldout, cfg)
    buf = ReplayBuffer(cfg.buffer_size, strategy=cfg.memory_strategy, alpha=cfg.priority_alpha, beta=cfg.priority_beta)
    chunk = max(1, cfg.n_parallel // max(1, cfg.transitions_per_step))

    for t, partner in enumerate(partners, start=1):
        buf.reset()
        ro = Rollout([st.role, Role(partner)], learner.config, n_parallel=cfg.n_parallel, seed=derive_seed(cfg.seed, "task", t), tag=t)
        buf.extend(ro.collect(cfg.burn_in_frames))
        for epoch in range(1, cfg.epochs_per_task + 1):
            for _ in range(cfg.epoch_len):
                if st.step % chunk == 0:
                    buf.extend(ro.collect(chunk * cfg.transitions_per_step))
                loss = st.update(buf, t)
            st.opt = decay_learning_rate(st.opt)
            if epoch % cfg.eval_freq == 0 or epoch == cfg.epochs_per_task:
                z, f = _evaluate(st.snapshot(), partners, cfg, (t, epoch))
                history += _records(t, epoch, partners, z, f)
                log.info("task %d epoch %d loss %.4f zero-shot %s", t, epoch, loss, np.round(z, 3))
                if epoch == cfg.epochs_per_task:
                    zero[t], few[t] = z, f
        st.end_task(t, buf, partner)

    if [params_digest(p) for p in partners] != digests:
        raise RuntimeError("a partner's parameters changed during continual training")
    final = st.snapshot()
    final = replace(final, arch=learner.arch)
    held = None if base_heldout is None else np.stack([base_heldout, _heldout(final, heldout, cfg)])
    return ContinualResult(final, zero, few, history, held)


def run_multitask(
    learner: Agent,
    partners: list[Agent],
    cfg: LLLConfig,
    heldout: list[Agent] | None = None,
) -> ContinualResult:
    """Train against all partners through one buffer, with the same total budget.

    Collection cycles through the partners chunk by chunk.  Row ``t`` of the
    score matrix is taken after ``t`` tasks' worth of gradient steps.
    """
    _check_partners(learner, partners)
    digests = [params_digest(p) for p in partners]
    T = len(partners)
    st = _Learner(learner, replace(cfg, algorithm="naive"))
    zero = np.full((T + 1, T), np.nan)
    few = np.full((T + 1, T), np.nan)
    history: list[dict] = []
    zero[0], few[0] = _evaluate(st.snapshot(), partners, cfg, (0, 0))
    history += _records(0, 0, partners, zero[0], few[0])
    base_heldout = _heldout(st.snapshot(), heldout, cfg)
    buf = ReplayBuffer(cfg.multitask_buffer_size, strategy=cfg.memory_strategy, alpha=cfg.priority_alpha, beta=cfg.priority_beta)
    rollouts = [
        Rollout([st.role, Role(p)], learner.config, n_parallel=cfg.n_parallel, seed=derive_seed(cfg.seed, "task", j + 1), tag=j + 1)
        for j, p in enumerate(partners)
    ]
    per = -(-cfg.burn_in_frames // T)
    for ro in rollouts:
        buf.extend(ro.collect(per))
    chunk = max(1, cfg.n_parallel // max(1, cfg.transitions_per_step))
    turn = 0
    for t in range(1, T + 1):
        for epoch in range(1, cfg.epochs_per_task + 1):
            for _ in range(cfg.epoch_len):
                if st.step % chunk == 0:
                    buf.extend(rollouts[turn % T].collect(chunk * cfg.transitions_per_step))
                    turn += 1
                loss = st.update(buf, 1)
            st.opt = decay_learning_rate(st.opt)
            if epoch % cfg.eval_freq == 0 or epoch == cfg.epochs_per_task:
                z, f = _evaluate(st.snapshot(), partners, cfg, (t, epoch))
                history += _records(t, epoch, partners, z, f)
                log.info("multitask block %d epoch %d loss %.4f zero-shot %s", t, epoch, loss, np.round(z, 3))
                if epoch == cfg.epochs_per_task:
                    zero[t], few[t] = z, f

    if [params_digest(p) for p in partners] != digests:
        raise RuntimeError("a partner's parameters changed during multi-task training")
    final = replace(st.snapshot(), arch=learner.arch)
    held = None if base_heldout is None else np.stack([base_heldout, _heldout(final, heldout, cfg)])
    return ContinualResult(final, zero, few, history, held)


def write_history(path, history: list[dict]) -> None:
    with Path(path).open("w") as f:
        for rec in history:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def config_dict(cfg: LLLConfig) -> dict:
    return asdict(cfg)
