"""Agent descriptions and the lockstep game runner shared by training and evaluation.

Agents act over ``num_moves + 1`` outputs: the engine's relative move indices
plus a final no-op, which is the only legal output for a seat that is not on
turn (used by VDN's joint transitions; never legal on one's own turn).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import (
    GameConfig,
    GameState,
    apply_action,
    index_to_action,
    legal_move_mask,
    new_game,
    observe,
    score,
)
from .errors import ConfigError, UsageError
from .features import (
    ColorPermutation,
    EncodingSpec,
    augment_greedy,
    encode,
    encode_base,
    move_permutation,
    permute_observation,
)
from .learner import Architecture, Checkpoint, _forward, epsilon_greedy_batch
from .memory import Transition
from .seeding import derive_seed

# Feed-forward stand-ins for the pool's five recurrent architecture types.
ARCHITECTURES: dict[str, tuple[int, ...]] = {
    "type1": (128,),
    "type2": (128, 128),
    "type3": (256,),
    "type4": (96, 96),
    "type5": (192, 96),
}

METHODS = ("iql", "vdn")


@dataclass(frozen=True)
class AgentSpec:
    method: str = "iql"
    sad: bool = False
    op: bool = False
    aux: bool = False
    architecture: str = "type2"
    seed: int = 0
    knowledge: bool = False  # add card-knowledge blocks to the encoding

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}")

    @property
    def tag(self) -> str:
        """Method tag, e.g. ``IQL+OP`` or ``VDN+SAD+AUX``."""
        parts = [self.method.upper()]
        parts += [name for name, on in (("SAD", self.sad), ("OP", self.op), ("AUX", self.aux)) if on]
        return "+".join(parts)

    @property
    def agent_id(self) -> str:
        kn = "-kn" if self.knowledge else ""
        return f"{self.tag.lower().replace('+', '-')}{kn}-{self.architecture}-s{self.seed}"

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "sad": self.sad,
            "op": self.op,
            "aux": self.aux,
            "architecture": self.architecture,
            "seed": self.seed,
            "knowledge": self.knowledge,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AgentSpec":
        return cls(**d)

    @classmethod
    def parse(cls, text: str) -> "AgentSpec":
        """Parse ``iql-op-type2-s1`` style ids (the inverse of :attr:`agent_id`)."""
        parts = text.strip().lower().split("-")
        if len(parts) < 3 or not parts[-1].startswith("s"):
            raise ConfigError(f"cannot parse agent spec {text!r}")
        flags = set(parts[1:-2])
        unknown = flags - {"sad", "op", "aux", "kn"}
        if unknown:
            raise ConfigError(f"unknown flags {sorted(unknown)} in {text!r}")
        return cls(
            method=parts[0],
            sad="sad" in flags,
            op="op" in flags,
            aux="aux" in flags,
            architecture=parts[-2],
            seed=int(parts[-1][1:]),
            knowledge="kn" in flags,
        )

    def encoding(self, config: GameConfig) -> EncodingSpec:
        return EncodingSpec(config, include_card_knowledge=self.knowledge, sad_augment=self.sad)

    def build_architecture(self, config: GameConfig, dropout_rate: float = 0.0) -> Architecture:
        return Architecture(
            input_len=self.encoding(config).feature_length,
            hidden_dims=ARCHITECTURES[self.architecture],
            num_actions=config.num_moves + 1,
            aux_head=self.aux,
            aux_slots=config.hand_size if self.aux else 0,
            aux_classes=config.num_card_types if self.aux else 0,
            dropout_rate=dropout_rate,
        )


@dataclass
class Agent:
    spec: AgentSpec
    arch: Architecture
    params: np.ndarray
    encoding: EncodingSpec
    name: str = ""

    @property
    def config(self) -> GameConfig:
        return self.encoding.config

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, name: str | None = None) -> "Agent":
        spec = AgentSpec.from_dict(ckpt.agent)
        enc = EncodingSpec.from_dict(ckpt.encoding)
        if ckpt.arch.input_len != enc.feature_length:
            raise UsageError("checkpoint architecture does not match its encoding")
        return cls(spec, ckpt.arch, ckpt.params.copy(), enc, name or spec.agent_id)

    def to_checkpoint(self, meta: dict | None = None) -> Checkpoint:
        return Checkpoint(
            arch=self.arch,
            params=self.params,
            encoding=self.encoding.to_dict(),
            agent=self.spec.to_dict(),
            seed=self.spec.seed,
            meta=dict(meta or {}),
        )


def check_compatible(a: Agent, b: Agent) -> None:
    if a.config != b.config:
        raise UsageError(f"{a.name} and {b.name} were built for different games")
    if a.arch.num_actions != b.arch.num_actions:
        raise UsageError(f"{a.name} and {b.name} have different action spaces")


@dataclass
class Role:
    """One side of a game: an agent with the parameters it currently acts with."""

    agent: Agent
    epsilon: float = 0.0
    collect: bool = False
    op: bool = False  # random colour permutation per episode (self-play training only)
    params: np.ndarray | None = None

    def __post_init__(self):
        if self.params is None:
            self.params = self.agent.params


@dataclass
class _Game:
    state: GameState
    index: int
    role_at_seat: tuple[int, int]
    perm_at_seat: tuple[int, int]
    pending: list = field(default_factory=lambda: [None, None])
    joint_pending: dict | None = None
    last_greedy: list = field(default_factory=lambda: [None, None])


class Rollout:
    """Plays many two-player games in lockstep, batching network calls per role.

    ``joint=True`` records VDN-style transitions that stack both seats at
    every step; otherwise each collecting seat records its own transitions
    from one of its turns to the next, with the rewards of both moves summed.
    ``share_greedy=True`` feeds SAD agents their partner's greedy move
    instead of the executed one.
    """

    def __init__(
        self,
        roles: list[Role],
        config: GameConfig,
        n_parallel: int = 16,
        seed: int = 0,
        joint: bool = False,
        share_greedy: bool = False,
        alternate_seats: bool = True,
        tag: int = 0,
    ):
        if len(roles) != 2:
            raise UsageError("a rollout needs exactly two roles")
        if config.num_players != 2:
            raise NotImplementedError("only two-player games are implemented")
        for r in roles:
            if r.agent.config != config:
                raise UsageError(f"agent {r.agent.name} was built for a different game")
        if roles[0].agent.arch.num_actions != roles[1].agent.arch.num_actions:
            raise UsageError("roles disagree on the action space")
        if joint and roles[0] is not roles[1]:
            raise UsageError("joint transitions are only defined for self-play")
        self.roles = roles
        self.config = config
        self.n_parallel = n_parallel
        self.seed = seed
        self.joint = joint
        self.share_greedy = share_greedy
        self.alternate_seats = alternate_seats
        self.tag = tag
        self.rng = np.random.default_rng(derive_seed(seed, "actions"))
        self.perm_rng = np.random.default_rng(derive_seed(seed, "permutations"))
        self.perms = ColorPermutation.all(config.num_colors)
        self._mperm = [move_permutation(p, config) for p in self.perms]
        self._mperm_inv = [np.argsort(m) for m in self._mperm]
        R = config.num_ranks
        self._tperm = [[p.perm[t // R] * R + t % R for t in range(config.num_card_types)] for p in self.perms]
        self.noop = config.num_moves
        self.games: list[_Game] = []
        self.games_started = 0
        self.episode_scores: list[int] = []
        self.episode_lengths: list[int] = []

    # -- game lifecycle --------------------------------------------------------

    def _start(self, index: int, deal_seed: int | None = None, swap: bool | None = None) -> _Game:
        if deal_seed is None:
            deal_seed = derive_seed(self.seed, "game", index)
        if swap is None:
            swap = self.alternate_seats and index % 2 == 1
        roles = (1, 0) if swap else (0, 1)
        perms = [0, 0]
        if self.roles[roles[1]].op:
            perms[1] = int(self.perm_rng.integers(len(self.perms)))
        return _Game(new_game(self.config, deal_seed), index, roles, tuple(perms))

    def _top_up(self) -> None:
        while len(self.games) < self.n_parallel:
            self.games.append(self._start(self.games_started))
            self.games_started += 1

    # -- per-seat views ----------------------------------------------------------

    def _encode(self, g: _Game, seat: int) -> np.ndarray:
        role = self.roles[g.role_at_seat[seat]]
        enc = role.agent.encoding
        obs = observe(g.state, seat)
        pidx = g.perm_at_seat[seat]
        if pidx:
            obs = permute_observation(obs, self.perms[pidx])
        if enc.sad_augment and self.share_greedy:
            la = g.state.last_action
            gm = None
            if la is not None and la.actor != seat:
                gm = g.last_greedy[la.actor]
                if gm is not None:
                    gm = int(self._mperm[pidx][gm])
            return augment_greedy(encode_base(obs, enc), gm, enc)
        return encode(obs, enc)

    def _mask(self, g: _Game, seat: int) -> np.ndarray:
        m = np.zeros(self.noop + 1, dtype=bool)
        if g.state.current_player == seat:
            real = np.asarray(legal_move_mask(g.state), dtype=bool)
            m[self._mperm[g.perm_at_seat[seat]]] = real
        else:
            m[self.noop] = True
        return m

    def _aux_labels(self, g: _Game, seat: int) -> np.ndarray:
        out = np.full(self.config.hand_size, -1, dtype=np.int64)
        tp = self._tperm[g.perm_at_seat[seat]]
        R = self.config.num_ranks
        for i, c in enumerate(g.state.hands[seat]):
            out[i] = tp[c.color * R + c.rank]
        return out

    # -- stepping ------------------------------------------------------------------

    def _step(self, games: list[_Game], out: list[Transition] | None) -> list[_Game]:
        """Advance every game one move; return the games that just ended."""
        seats = [g.state.current_player for g in games]
        xs = [self._encode(g, s) for g, s in zip(games, seats)]
        masks = [self._mask(g, s) for g, s in zip(games, seats)]
        actions = np.empty(len(games), dtype=np.int64)
        greedies = np.empty(len(games), dtype=np.int64)
        groups: dict[int, list[int]] = {}
        for i, (g, s) in enumerate(zip(games, seats)):
            groups.setdefault(g.role_at_seat[s], []).append(i)
        for ridx in sorted(groups):
            rows = groups[ridx]
            role = self.roles[ridx]
            X = np.stack([xs[i] for i in rows])
            M = np.stack([masks[i] for i in rows])
            q, _, _ = _forward(role.params, role.agent.arch, X)
            a, gr = epsilon_greedy_batch(q, M, role.epsilon, self.rng)
            actions[rows] = a
            greedies[rows] = gr

        ended = []
        for i, g in enumerate(games):
            s = seats[i]
            role = self.roles[g.role_at_seat[s]]
            inv = self._mperm_inv[g.perm_at_seat[s]]
            real_move = int(inv[actions[i]])
            g.last_greedy[s] = int(inv[greedies[i]])

            record = out is not None and role.collect
            if record and self.joint:
                other = 1 - s
                x2 = [None, None]
                m2 = [None, None]
                x2[s], m2[s] = xs[i], masks[i]
                x2[other] = self._encode(g, other)
                m2[other] = self._mask(g, other)
                if g.joint_pending is not None:
                    out.append(self._finish_joint(g.joint_pending, np.stack(x2), np.stack(m2), False))
                act = np.full(2, self.noop, dtype=np.int64)
                act[s] = actions[i]
                g.joint_pending = {
                    "obs": np.stack(x2),
                    "action": act,
                    "legal": np.stack(m2),
                    "aux": np.stack([self._aux_labels(g, 0), self._aux_labels(g, 1)]),
                    "reward": 0.0,
                }
            elif record:
                if g.pending[s] is not None:
                    out.append(self._finish(g.pending[s], xs[i], masks[i], False))
                g.pending[s] = {
                    "obs": xs[i],
                    "action": int(actions[i]),
                    "legal": masks[i],
                    "aux": self._aux_labels(g, s),
                    "reward": 0.0,
                }

            action = index_to_action(real_move, s, self.config)
            g.state, r, done = apply_action(g.state, action)
            if g.joint_pending is not None:
                g.joint_pending["reward"] += r
            for p in g.pending:
                if p is not None:
                    p["reward"] += r
            if done:
                if out is not None:
                    D = xs[i].shape[0]
                    for p in g.pending:
                        if p is not None:
                            out.append(self._finish(p, np.zeros(D), np.zeros(self.noop + 1, dtype=bool), True))
                    if g.joint_pending is not None:
                        z = np.zeros((2, D))
                        out.append(self._finish_joint(g.joint_pending, z, np.zeros((2, self.noop + 1), dtype=bool), True))
                g.pending = [None, None]
                g.joint_pending = None
                ended.append(g)
        return ended

    def _finish(self, p: dict, next_x, next_mask, terminal: bool) -> Transition:
        return Transition(
            obs=p["obs"][None, :],
            action=np.array([p["action"]], dtype=np.int64),
            reward=p["reward"],
            next_obs=np.asarray(next_x)[None, :],
            terminal=terminal,
            legal=p["legal"][None, :],
            next_legal=np.asarray(next_mask)[None, :],
            aux_labels=p["aux"][None, :],
            tag=self.tag,
        )

    def _finish_joint(self, p: dict, next_x, next_mask, terminal: bool) -> Transition:
        return Transition(
            obs=p["obs"],
            action=p["action"],
            reward=p["reward"],
            next_obs=next_x,
            terminal=terminal,
            legal=p["legal"],
            next_legal=next_mask,
            aux_labels=p["aux"],
            tag=self.tag,
        )

    # -- public entry points -------------------------------------------------------

    def collect(self, n: int) -> list[Transition]:
        """Step the persistent pool of games until at least ``n`` transitions exist."""
        out: list[Transition] = []
        while len(out) < n:
            self._top_up()
            ended = self._step(self.games, out)
            for g in ended:
                self.episode_scores.append(score(g.state))
                self.episode_lengths.append(g.state.turn)
            if ended:
                done = {id(g) for g in ended}
                self.games = [g for g in self.games if id(g) not in done]
        return out

    def play_episode(self, deal_seed: int | None = None) -> tuple[list[Transition], int]:
        """Play a single fresh game to the end; returns its transitions and score."""
        g = self._start(self.games_started, deal_seed)
        self.games_started += 1
        out: list[Transition] = []
        while not g.state.terminal:
            self._step([g], out)
        self.episode_scores.append(score(g.state))
        self.episode_lengths.append(g.state.turn)
        return out, score(g.state)

    def run_schedule(self, schedule: list[tuple[int, bool]]) -> list[int]:
        """Play ``(deal_seed, swap_seats)`` games greedily and return their scores in order."""
        scores = [0] * len(schedule)
        for start in range(0, len(schedule), self.n_parallel):
            live = [
                self._start(k, seed, swap)
                for k, (seed, swap) in enumerate(schedule[start : start + self.n_parallel], start)
            ]
            while live:
                ended = self._step(live, None)
                for g in ended:
                    scores[g.index] = score(g.state)
                done = {id(g) for g in ended}
                live = [g for g in live if id(g) not in done]
        return scores
