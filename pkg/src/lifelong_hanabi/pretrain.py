"""Self-play pre-training of individual agents and of a diverse pool."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .agents import Agent, AgentSpec, Role, Rollout
from .engine import GameConfig
from .errors import NumericError, UsageError
from .evaluation import play_match
from .learner import (
    Architecture,
    Checkpoint,
    LossSpec,
    OptimizerState,
    clip_grad_norm,
    init_params,
    linear_epsilon,
    load_checkpoint,
    loss_and_grad,
    optimizer_step,
    save_checkpoint,
)
from .memory import ReplayBuffer, Transition
from .seeding import derive_seed

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    budget: int = 30000  # gradient steps
    batch_size: int = 32
    burn_in_frames: int = 10000
    epoch_len: int = 200
    buffer_size: int = 32768
    learning_rate: float = 3e-4
    adam_eps: float = 1.5e-5
    discount: float = 0.99
    target_update: int = 500
    transitions_per_step: int = 4
    n_parallel: int = 32
    eps_start: float = 1.0
    eps_end: float = 0.01
    eps_fraction: float = 0.3
    aux_weight: float = 0.25
    grad_clip: float | None = 5.0
    priority_alpha: float = 0.9
    priority_beta: float = 0.6
    eval_games: int = 500


def self_play_episode(
    theta: np.ndarray,
    arch: Architecture,
    spec: AgentSpec,
    config: GameConfig,
    epsilon: float,
    seed: int,
) -> tuple[list[Transition], int]:
    """One game with both seats driven by ``theta``; returns transitions and score."""
    agent = Agent(spec, arch, theta, spec.encoding(config), spec.agent_id)
    role = Role(agent, epsilon=epsilon, collect=True, op=spec.op)
    ro = Rollout(
        [role, role], config, n_parallel=1, seed=seed, joint=spec.method == "vdn", share_greedy=spec.sad
    )
    return ro.play_episode(derive_seed(seed, "deal"))


def _finish(agent: Agent, cfg: PretrainConfig, meta: dict) -> Checkpoint:
    ck = agent.to_checkpoint(meta)
    # score the rounded parameters so the manifest matches a reloaded checkpoint
    res = play_match(replace(agent, params=ck.params), replace(agent, params=ck.params),
                     cfg.eval_games, derive_seed(agent.spec.seed, "self_play_eval"))
    ck.meta.update(self_play_mean=res.mean, self_play_sem=res.sem, eval_games=res.n_games)
    return ck


def train_self_play(spec: AgentSpec, config: GameConfig, cfg: PretrainConfig | None = None) -> Checkpoint:
    cfg = cfg or PretrainConfig()
    if cfg.budget < 0:
        raise UsageError("budget must be non-negative")
    arch = spec.build_architecture(config)
    theta = init_params(arch, derive_seed(spec.seed, "init", spec.agent_id))
    agent = Agent(spec, arch, theta, spec.encoding(config), spec.agent_id)
    meta = {"budget": cfg.budget, "trained": cfg.budget > 0, "pretrain": asdict(cfg)}
    if cfg.budget == 0:
        return _finish(agent, cfg, meta)

    role = Role(agent, epsilon=cfg.eps_start, collect=True, op=spec.op)
    ro = Rollout(
        [role, role],
        config,
        n_parallel=cfg.n_parallel,
        seed=derive_seed(spec.seed, "actors", spec.agent_id),
        joint=spec.method == "vdn",
        share_greedy=spec.sad,
    )
    buf = ReplayBuffer(cfg.buffer_size, alpha=cfg.priority_alpha, beta=cfg.priority_beta)
    buf.extend(ro.collect(cfg.burn_in_frames))
    rng = np.random.default_rng(derive_seed(spec.seed, "learner", spec.agent_id))
    opt = OptimizerState(learning_rate=cfg.learning_rate, eps=cfg.adam_eps, batch_size=cfg.batch_size)
    target = theta.copy()
    aux_w = cfg.aux_weight if spec.aux else 0.0
    # actors refresh their parameter snapshot once per collection chunk
    chunk = max(1, cfg.n_parallel // max(1, cfg.transitions_per_step))
    for step in range(cfg.budget):
        if step % chunk == 0:
            role.params = theta
            role.epsilon = linear_epsilon(step, cfg.budget, cfg.eps_start, cfg.eps_end, cfg.eps_fraction)
            buf.extend(ro.collect(chunk * cfg.transitions_per_step))
        batch, ids, _w = buf.sample(cfg.batch_size, rng)
        r = loss_and_grad(theta, arch, batch, LossSpec(target_params=target, discount=cfg.discount, aux_weight=aux_w))
        if not np.isfinite(r.loss):
            raise NumericError(f"{spec.agent_id}: non-finite loss at step {step} (td_loss={r.td_loss})")
        buf.update_priorities(ids, r.td)
        theta, opt = optimizer_step(opt, theta, clip_grad_norm(r.grad, cfg.grad_clip))
        if (step + 1) % cfg.target_update == 0:
            target = theta.copy()
        if (step + 1) % (cfg.epoch_len * 25) == 0:
            recent = ro.episode_scores[-200:]
            log.info("%s step %d eps %.3f loss %.4f train score %.2f", spec.agent_id, step + 1,
                     role.epsilon, r.loss, float(np.mean(recent)) if recent else float("nan"))
    agent = replace(agent, params=theta)
    return _finish(agent, cfg, meta)


# -- pools ----------------------------------------------------------------------

MANIFEST = "manifest.json"


def checkpoint_name(spec: AgentSpec) -> str:
    return f"{spec.agent_id}.ckpt"


def _train_member(args) -> tuple[str, dict]:
    spec, config, cfg, out_dir = args
    ck = train_self_play(spec, config, cfg)
    path = Path(out_dir) / checkpoint_name(spec)
    save_checkpoint(path, ck)
    return spec.agent_id, {"file": path.name, "spec": spec.to_dict(), **_manifest_meta(ck)}


def _manifest_meta(ck: Checkpoint) -> dict:
    keep = ("budget", "trained", "self_play_mean", "self_play_sem", "eval_games")
    return {k: ck.meta[k] for k in keep if k in ck.meta}


def build_pool(
    specs: list[AgentSpec],
    config: GameConfig,
    out_dir,
    cfg: PretrainConfig | None = None,
    jobs: int = 1,
) -> dict:
    """Train every spec (skipping members already on disk) and write the manifest."""
    cfg = cfg or PretrainConfig()
    ids = [s.agent_id for s in specs]
    if len(set(ids)) != len(ids):
        raise UsageError("duplicate agent specs in pool")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    members: dict[str, dict] = {}
    todo = []
    for s in specs:
        path = out / checkpoint_name(s)
        if path.exists():
            ck = load_checkpoint(path)
            if ck.agent == s.to_dict() and ck.meta.get("pretrain") == asdict(cfg):
                members[s.agent_id] = {"file": path.name, "spec": s.to_dict(), **_manifest_meta(ck)}
                continue
        todo.append((s, config, cfg, str(out)))
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(todo), os.cpu_count() or 1)) as ex:
            done = list(ex.map(_train_member, todo))
    else:
        done = [_train_member(t) for t in todo]
    members.update(done)
    manifest = {
        "game": config.to_dict(),
        "pretrain": asdict(cfg),
        "members": {i: members[i] for i in ids},
    }
    tmp = out / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(out / MANIFEST)
    return manifest


def load_pool(pool_dir) -> list[Agent]:
    d = Path(pool_dir)
    manifest_path = d / MANIFEST
    if not manifest_path.exists():
        raise UsageError(f"no pool manifest in {d}")
    manifest = json.loads(manifest_path.read_text())
    return [Agent.from_checkpoint(load_checkpoint(d / m["file"]), i) for i, m in manifest["members"].items()]
