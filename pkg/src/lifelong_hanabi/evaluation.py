"""Head-to-head matches, cross-play matrices, zero-/few-shot evaluation and the
continual-learning metrics.

Score matrices are 2-D arrays ``a`` with ``a[t, j - 1]`` holding the
normalized score against partner ``j`` (1-based) after training on task
``t``; row 0 is the learner before any continual training.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .agents import Agent, Role, Rollout, check_compatible
from .engine import GameConfig, apply_action, legal_actions, new_game, score
from .errors import UsageError
from .learner import LossSpec, OptimizerState, clip_grad_norm, loss_and_grad, optimizer_step
from .memory import ReplayBuffer
from .seeding import derive_seed


@dataclass(frozen=True)
class MatchResult:
    mean: float
    sem: float
    n_games: int
    seed: int
    scores: tuple[int, ...] = field(default=(), repr=False)

    @classmethod
    def from_scores(cls, scores, seed: int) -> "MatchResult":
        s = np.asarray(scores, dtype=np.float64)
        sem = float(s.std(ddof=1) / math.sqrt(len(s))) if len(s) > 1 else 0.0
        return cls(float(s.mean()), sem, len(s), seed, tuple(int(x) for x in scores))


def match_schedule(n_games: int, seed: int) -> list[tuple[int, bool]]:
    """Game ``i`` deals ``derive_seed(seed, "deal", i // 2)``; odd games swap seats.

    With an even ``n_games`` every deal is played from both seats, so a match
    of A vs B and one of B vs A contain exactly the same games.
    """
    return [(derive_seed(seed, "deal", i // 2), i % 2 == 1) for i in range(n_games)]


def play_match(a: Agent, b: Agent, n_games: int, seed: int, n_parallel: int = 64) -> MatchResult:
    """Greedy play of ``a`` (seat 0 on even games) with ``b``."""
    if n_games < 1:
        raise UsageError("n_games must be positive")
    check_compatible(a, b)
    ro = Rollout([Role(a), Role(b)], a.config, n_parallel=n_parallel, seed=seed)
    return MatchResult.from_scores(ro.run_schedule(match_schedule(n_games, seed)), seed)


def random_policy_baseline(config: GameConfig, n_games: int, seed: int) -> MatchResult:
    """Both seats pick uniformly among legal moves; deals follow :func:`match_schedule`."""
    if n_games < 1:
        raise UsageError("n_games must be positive")
    rng = np.random.default_rng(derive_seed(seed, "random_policy"))
    scores = []
    for deal, _swap in match_schedule(n_games, seed):
        state = new_game(config, deal)
        while not state.terminal:
            legal = legal_actions(state)
            state, _, _ = apply_action(state, legal[int(rng.integers(len(legal)))])
        scores.append(score(state))
    return MatchResult.from_scores(scores, seed)


@dataclass
class CrossPlay:
    ids: list[str]
    results: list[list[MatchResult]]

    @property
    def means(self) -> np.ndarray:
        return np.array([[r.mean for r in row] for row in self.results])

    @property
    def sems(self) -> np.ndarray:
        return np.array([[r.sem for r in row] for row in self.results])

    def write_csv(self, path, value: str = "mean") -> None:
        """Write means (or ``value="sem"``) with agent ids as header row and column."""
        with Path(path).open("w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["agent"] + self.ids)
            for name, row in zip(self.ids, self.results):
                w.writerow([name] + [f"{getattr(r, value):.6f}" for r in row])

    @staticmethod
    def read_csv(path) -> tuple[list[str], np.ndarray]:
        with Path(path).open(newline="") as f:
            rows = list(csv.reader(f))
        ids = rows[0][1:]
        return ids, np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def cross_play_matrix(agents: list[Agent], n_games: int, seed: int) -> CrossPlay:
    """All ordered pairs including self-play.

    Pairs share a seed regardless of order and the schedule is seat-swap
    symmetric, so only the upper triangle is played and then mirrored.
    """
    if not agents:
        raise UsageError("empty pool")
    if n_games % 2:
        raise UsageError("cross-play needs an even n_games so both seat orders are covered")
    n = len(agents)
    res: list[list[MatchResult | None]] = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(i, n):
            r = play_match(agents[i], agents[j], n_games, derive_seed(seed, "pair", i, j))
            res[i][j] = res[j][i] = r
    return CrossPlay([a.name for a in agents], res)


def normalize_score(raw: float, config: GameConfig) -> float:
    if not 0 <= raw <= config.max_score:
        raise UsageError(f"score {raw} outside [0, {config.max_score}]")
    return raw / config.max_score


def zero_shot_eval(learner: Agent, partners: list[Agent], n_games: int, seed: int) -> np.ndarray:
    """Normalized greedy match score against each partner, no updates."""
    return np.array(
        [
            normalize_score(play_match(learner, p, n_games, derive_seed(seed, "partner", j)).mean, learner.config)
            for j, p in enumerate(partners)
        ]
    )


@dataclass
class FewShotConfig:
    k_steps: int = 50
    burn_in: int = 1000
    buffer_size: int = 10000
    batch_size: int = 32
    epsilon: float = 0.05
    discount: float = 0.99
    grad_clip: float | None = 5.0
    n_parallel: int = 10
    optimizer: OptimizerState = field(default_factory=OptimizerState)


def fine_tune(learner: Agent, partner: Agent, cfg: FewShotConfig, seed: int) -> Agent:
    """Copy of ``learner`` after ``cfg.k_steps`` updates on fresh play with ``partner``."""
    check_compatible(learner, partner)
    theta = learner.params.copy()
    role = Role(replace(learner, params=theta), epsilon=cfg.epsilon, collect=True)
    ro = Rollout([role, Role(partner)], learner.config, n_parallel=cfg.n_parallel, seed=derive_seed(seed, "play"))
    buf = ReplayBuffer(capacity=cfg.buffer_size)
    buf.extend(ro.collect(cfg.burn_in))
    rng = np.random.default_rng(derive_seed(seed, "sample"))
    opt = cfg.optimizer.fresh()
    target = theta.copy()
    spec = LossSpec(target_params=target, discount=cfg.discount)
    for _ in range(cfg.k_steps):
        batch, ids, _w = buf.sample(cfg.batch_size, rng)
        r = loss_and_grad(theta, learner.arch, batch, spec)
        buf.update_priorities(ids, r.td)
        theta, opt = optimizer_step(opt, theta, clip_grad_norm(r.grad, cfg.grad_clip))
    return replace(learner, params=theta)


def few_shot_eval(
    learner: Agent, partner: Agent, cfg: FewShotConfig, seed: int, n_games: int, match_seed: int
) -> float:
    """Normalized score of a briefly fine-tuned copy; ``learner`` itself is untouched."""
    if cfg.k_steps < 1:
        raise UsageError("k_steps must be positive")
    tuned = fine_tune(learner, partner, cfg, seed)
    return normalize_score(play_match(tuned, partner, n_games, match_seed).mean, learner.config)


# -- metrics --------------------------------------------------------------------


def _check_range(value: float, lo: float, hi: float, name: str) -> float:
    if not lo - 1e-12 <= value <= hi + 1e-12:
        raise ValueError(f"{name}={value} outside [{lo}, {hi}]")
    return value


def _row(a, t: int, upto: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if t >= a.shape[0] or upto > a.shape[1]:
        raise UsageError(f"score matrix {a.shape} has no entries for t={t}")
    return a[t, :upto]


def average_score(a, t: int) -> float:
    """Mean score over the partners seen so far, after training on task ``t``."""
    if t < 1:
        raise UsageError("t must be at least 1")
    return _check_range(float(_row(a, t, t).mean()), 0.0, 1.0, "A")


def forgetting(a, t: int) -> tuple[np.ndarray, float]:
    """Per-task drop from the best earlier score, and its mean over tasks ``j < t``."""
    if t < 2:
        raise UsageError("forgetting needs t >= 2")
    a = np.asarray(a, dtype=np.float64)
    if t >= a.shape[0]:
        raise UsageError(f"score matrix {a.shape} has no row {t}")
    best = a[1:t, : t - 1].max(axis=0)
    f = best - a[t, : t - 1]
    return f, _check_range(float(f.mean()), -1.0, 1.0, "F")


def future_score(a, t: int, T: int) -> float:
    """Mean score on partners not yet trained with, after task ``t``."""
    if not 0 <= t < T:
        raise UsageError("future score needs t < T")
    a = np.asarray(a, dtype=np.float64)
    return _check_range(float(a[t, t:T].mean()), 0.0, 1.0, "FT")


def gis(a_final, a_base) -> float:
    """Mean gain against held-out agents from before to after continual training."""
    fin = np.asarray(a_final, dtype=np.float64)
    base = np.asarray(a_base, dtype=np.float64)
    if fin.shape != base.shape or fin.ndim != 1 or len(fin) < 1:
        raise UsageError("GIS needs two equal-length non-empty score vectors")
    return _check_range(float((fin - base).mean()), -1.0, 1.0, "GIS")


@dataclass(frozen=True)
class CPAggregate:
    mean: float
    sem: float
    n_partners: int
    partners: tuple[str, ...]


def _aggregate(results: dict[str, MatchResult]) -> CPAggregate:
    if not results:
        return CPAggregate(float("nan"), float("nan"), 0, ())
    means = np.array([r.mean for r in results.values()])
    sem = float(means.std(ddof=1) / math.sqrt(len(means))) if len(means) > 1 else 0.0
    return CPAggregate(float(means.mean()), sem, len(means), tuple(results))


def intra_inter_cp(
    agent: Agent,
    pool: list[Agent],
    n_games: int,
    seed: int,
    inter_ids: list[str] | None = None,
) -> tuple[CPAggregate, CPAggregate]:
    """Cross-play against same-method peers and against a cross-method held-out set.

    ``inter_ids`` names the held-out set; by default every other pool member.
    The agent itself is never part of either set.
    """
    others = [p for p in pool if p.name != agent.name]
    inter_set = set(inter_ids) if inter_ids is not None else {p.name for p in others}
    played: dict[str, MatchResult] = {}

    def result(p: Agent) -> MatchResult:
        if p.name not in played:
            played[p.name] = play_match(agent, p, n_games, derive_seed(seed, "cp", p.name))
        return played[p.name]

    intra = {p.name: result(p) for p in others if p.spec.tag == agent.spec.tag}
    inter = {p.name: result(p) for p in others if p.name in inter_set}
    return _aggregate(intra), _aggregate(inter)
