"""Two-player Hanabi with configurable deck geometry.

Rules follow the Hanabi Learning Environment conventions: discarding is
illegal while hint tokens are full, completing a colour refunds a hint
token, and once the deck runs out every player (including the one who drew
the last card) gets exactly one more turn.

States are immutable values; :func:`apply_action` returns a fresh state.
Ranks are stored 0-based (rank index 0 is the card printed "1"), and a
firework height ``h`` means ranks ``0..h-1`` of that colour are on the table.

Deck shuffles use SplitMix64 (Steele, Lea & Flood 2014) with rejection
sampling for bounded draws, so a ``(config, seed)`` pair deals the same
game on every platform.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, NamedTuple, Sequence

from .errors import ConfigError, UsageError

MASK64 = (1 << 64) - 1


class SplitMix64:
    """SplitMix64 generator; the reference deck-shuffling RNG."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` without modulo bias."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (MASK64 + 1) - ((MASK64 + 1) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]


@dataclass(frozen=True)
class GameConfig:
    num_colors: int = 5
    num_ranks: int = 5
    rank_counts: tuple[int, ...] = (3, 2, 2, 2, 1)
    num_players: int = 2
    hand_size: int = 5
    max_hint_tokens: int = 8
    max_life_tokens: int = 3
    # False: a game lost on lives keeps its fireworks sum (HLE default).
    zero_score_on_lives_exhausted: bool = False

    def __post_init__(self):
        object.__setattr__(self, "rank_counts", tuple(int(c) for c in self.rank_counts))
        if self.num_colors < 1 or self.num_ranks < 1:
            raise ConfigError("need at least one colour and one rank")
        if len(self.rank_counts) != self.num_ranks:
            raise ConfigError(
                f"rank_counts has {len(self.rank_counts)} entries for {self.num_ranks} ranks"
            )
        if any(c < 1 for c in self.rank_counts):
            raise ConfigError("every rank needs at least one copy")
        if self.num_players < 2:
            raise ConfigError("Hanabi needs at least two players")
        if self.hand_size < 1:
            raise ConfigError("hand_size must be positive")
        if self.max_hint_tokens < 1 or self.max_life_tokens < 1:
            raise ConfigError("token maxima must be positive")
        if self.hand_size * self.num_players > self.deck_size:
            raise ConfigError(
                f"hands need {self.hand_size * self.num_players} cards but the deck has {self.deck_size}"
            )

    @classmethod
    def standard(cls) -> "GameConfig":
        return cls()

    @classmethod
    def small(cls) -> "GameConfig":
        """Hanabi-Small: two colours, hand of two, 3 hints, 1 life."""
        return cls(num_colors=2, hand_size=2, max_hint_tokens=3, max_life_tokens=1)

    @property
    def deck_size(self) -> int:
        return self.num_colors * sum(self.rank_counts)

    @property
    def max_score(self) -> int:
        return self.num_colors * self.num_ranks

    @property
    def num_card_types(self) -> int:
        return self.num_colors * self.num_ranks

    @property
    def num_moves(self) -> int:
        """Size of the per-player move index space."""
        return 2 * self.hand_size + (self.num_players - 1) * (self.num_colors + self.num_ranks)

    def to_dict(self) -> dict:
        return {
            "num_colors": self.num_colors,
            "num_ranks": self.num_ranks,
            "rank_counts": list(self.rank_counts),
            "num_players": self.num_players,
            "hand_size": self.hand_size,
            "max_hint_tokens": self.max_hint_tokens,
            "max_life_tokens": self.max_life_tokens,
            "zero_score_on_lives_exhausted": self.zero_score_on_lives_exhausted,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GameConfig":
        return cls(**{**d, "rank_counts": tuple(d["rank_counts"])})


class Card(NamedTuple):
    color: int
    rank: int  # 0-based

    def __str__(self):
        return f"{'RYGWBOPCMK'[self.color] if self.color < 10 else self.color}{self.rank + 1}"


class SlotKnowledge(NamedTuple):
    """Colours and ranks still possible for one hidden card, as told by hints."""

    colors: frozenset
    ranks: frozenset


class ActionKind(enum.IntEnum):
    DISCARD = 0
    PLAY = 1
    HINT_COLOR = 2
    HINT_RANK = 3


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    slot: int = -1
    target: int = -1  # absolute player index for hints
    value: int = -1  # colour or 0-based rank for hints

    @classmethod
    def play(cls, slot: int) -> "Action":
        return cls(ActionKind.PLAY, slot=slot)

    @classmethod
    def discard(cls, slot: int) -> "Action":
        return cls(ActionKind.DISCARD, slot=slot)

    @classmethod
    def hint_color(cls, target: int, color: int) -> "Action":
        return cls(ActionKind.HINT_COLOR, target=target, value=color)

    @classmethod
    def hint_rank(cls, target: int, rank: int) -> "Action":
        return cls(ActionKind.HINT_RANK, target=target, value=rank)

    @property
    def is_hint(self) -> bool:
        return self.kind >= ActionKind.HINT_COLOR

    def __str__(self):
        if self.kind == ActionKind.PLAY:
            return f"play:{self.slot}"
        if self.kind == ActionKind.DISCARD:
            return f"discard:{self.slot}"
        name = "hint_color" if self.kind == ActionKind.HINT_COLOR else "hint_rank"
        return f"{name}:{self.target}:{self.value}"

    @classmethod
    def parse(cls, text: str) -> "Action":
        parts = text.split(":")
        if parts[0] == "play":
            return cls.play(int(parts[1]))
        if parts[0] == "discard":
            return cls.discard(int(parts[1]))
        if parts[0] == "hint_color":
            return cls.hint_color(int(parts[1]), int(parts[2]))
        if parts[0] == "hint_rank":
            return cls.hint_rank(int(parts[1]), int(parts[2]))
        raise ValueError(f"unparseable action {text!r}")


class LastAction(NamedTuple):
    actor: int
    action: Action
    card: Card | None  # the card played or discarded
    success: bool | None  # play outcome
    hinted_slots: tuple[int, ...]  # slots in the target's hand touched by a hint


@dataclass(frozen=True)
class GameState:
    config: GameConfig
    deck: tuple[Card, ...]  # drawn from the end
    hands: tuple[tuple[Card, ...], ...]
    card_knowledge: tuple[tuple[SlotKnowledge, ...], ...]
    fireworks: tuple[int, ...]
    discard: tuple[Card, ...]
    hint_tokens: int
    life_tokens: int
    current_player: int
    terminal: bool = False
    final_turn_counter: int | None = None
    turn: int = 0
    last_action: LastAction | None = None


@dataclass(frozen=True)
class Observation:
    viewer: int
    others_hands: tuple[tuple[Card, ...], ...]  # ordered by seat offset 1..P-1
    own_knowledge: tuple[SlotKnowledge, ...]
    others_knowledge: tuple[tuple[SlotKnowledge, ...], ...]
    fireworks: tuple[int, ...]
    discard: tuple[Card, ...]
    hint_tokens: int
    life_tokens: int
    deck_size: int
    current_player: int
    last_action: LastAction | None
    config: GameConfig = field(repr=False)


def _full_knowledge(config: GameConfig) -> SlotKnowledge:
    return SlotKnowledge(frozenset(range(config.num_colors)), frozenset(range(config.num_ranks)))


def _require_two_players(config: GameConfig) -> None:
    if config.num_players != 2:
        raise NotImplementedError("only two-player games are implemented")


def build_deck(config: GameConfig) -> list[Card]:
    return [
        Card(c, r)
        for c in range(config.num_colors)
        for r in range(config.num_ranks)
        for _ in range(config.rank_counts[r])
    ]


def new_game(config: GameConfig, seed: int) -> GameState:
    _require_two_players(config)
    deck = build_deck(config)
    SplitMix64(seed).shuffle(deck)
    full = _full_knowledge(config)
    hands = []
    for _ in range(config.num_players):
        hand = []
        for _ in range(config.hand_size):
            hand.append(deck.pop())
        hands.append(tuple(hand))
    return GameState(
        config=config,
        deck=tuple(deck),
        hands=tuple(hands),
        card_knowledge=tuple((full,) * config.hand_size for _ in range(config.num_players)),
        fireworks=(0,) * config.num_colors,
        discard=(),
        hint_tokens=config.max_hint_tokens,
        life_tokens=config.max_life_tokens,
        current_player=0,
    )


def score(state: GameState) -> int:
    if state.life_tokens == 0 and state.config.zero_score_on_lives_exhausted:
        return 0
    return sum(state.fireworks)


def legal_actions(state: GameState) -> list[Action]:
    """Legal actions for the current player, in move-index order."""
    if state.terminal:
        raise UsageError("no legal actions in a terminal state")
    cfg = state.config
    p = state.current_player
    n_slots = len(state.hands[p])
    acts: list[Action] = []
    if state.hint_tokens < cfg.max_hint_tokens:
        acts.extend(Action.discard(s) for s in range(n_slots))
    acts.extend(Action.play(s) for s in range(n_slots))
    if state.hint_tokens > 0:
        for off in range(1, cfg.num_players):
            target = (p + off) % cfg.num_players
            hand = state.hands[target]
            colors = {c.color for c in hand}
            ranks = {c.rank for c in hand}
            acts.extend(Action.hint_color(target, c) for c in sorted(colors))
            acts.extend(Action.hint_rank(target, r) for r in sorted(ranks))
    return acts


def is_legal(state: GameState, action: Action) -> bool:
    if state.terminal:
        return False
    cfg = state.config
    p = state.current_player
    if action.kind in (ActionKind.PLAY, ActionKind.DISCARD):
        if not 0 <= action.slot < len(state.hands[p]):
            return False
        return action.kind == ActionKind.PLAY or state.hint_tokens < cfg.max_hint_tokens
    if state.hint_tokens <= 0:
        return False
    if action.target == p or not 0 <= action.target < cfg.num_players:
        return False
    hand = state.hands[action.target]
    if action.kind == ActionKind.HINT_COLOR:
        return any(c.color == action.value for c in hand)
    return any(c.rank == action.value for c in hand)


def apply_action(state: GameState, action: Action) -> tuple[GameState, float, bool]:
    """Apply ``action``; return ``(next_state, reward, terminal)``."""
    if state.terminal:
        raise UsageError("game is already over")
    if not is_legal(state, action):
        raise UsageError(f"illegal action {action} for player {state.current_player}")
    cfg = state.config
    p = state.current_player
    deck = state.deck
    hands = list(state.hands)
    know = list(state.card_knowledge)
    fireworks = state.fireworks
    discard = state.discard
    hints = state.hint_tokens
    lives = state.life_tokens
    counter = state.final_turn_counter
    if counter is not None:
        counter -= 1
    reward = 0.0
    card = None
    success = None
    touched: tuple[int, ...] = ()

    if action.kind in (ActionKind.PLAY, ActionKind.DISCARD):
        hand = list(hands[p])
        kn = list(know[p])
        card = hand.pop(action.slot)
        kn.pop(action.slot)
        if action.kind == ActionKind.PLAY:
            if fireworks[card.color] == card.rank:
                success = True
                fw = list(fireworks)
                fw[card.color] += 1
                fireworks = tuple(fw)
                reward = 1.0
                if fw[card.color] == cfg.num_ranks and hints < cfg.max_hint_tokens:
                    hints += 1
            else:
                success = False
                lives -= 1
                discard = discard + (card,)
        else:
            discard = discard + (card,)
            hints += 1
        if deck:
            hand.append(deck[-1])
            kn.append(_full_knowledge(cfg))
            deck = deck[:-1]
            if not deck:
                counter = cfg.num_players
        hands[p] = tuple(hand)
        know[p] = tuple(kn)
    else:
        t = action.target
        hints -= 1
        if action.kind == ActionKind.HINT_COLOR:
            touched = tuple(i for i, c in enumerate(hands[t]) if c.color == action.value)
            only = frozenset((action.value,))
            know[t] = tuple(
                k._replace(colors=k.colors & only) if i in touched else k._replace(colors=k.colors - only)
                for i, k in enumerate(know[t])
            )
        else:
            touched = tuple(i for i, c in enumerate(hands[t]) if c.rank == action.value)
            only = frozenset((action.value,))
            know[t] = tuple(
                k._replace(ranks=k.ranks & only) if i in touched else k._replace(ranks=k.ranks - only)
                for i, k in enumerate(know[t])
            )

    terminal = lives <= 0 or sum(fireworks) == cfg.max_score or (counter is not None and counter <= 0)
    if lives <= 0 and cfg.zero_score_on_lives_exhausted:
        reward -= sum(state.fireworks)
    nxt = GameState(
        config=cfg,
        deck=deck,
        hands=tuple(hands),
        card_knowledge=tuple(know),
        fireworks=fireworks,
        discard=discard,
        hint_tokens=hints,
        life_tokens=lives,
        current_player=(p + 1) % cfg.num_players,
        terminal=terminal,
        final_turn_counter=counter,
        turn=state.turn + 1,
        last_action=LastAction(p, action, card, success, touched),
    )
    return nxt, reward, terminal


def observe(state: GameState, player: int) -> Observation:
    cfg = state.config
    if not 0 <= player < cfg.num_players:
        raise UsageError(f"no player {player}")
    others = tuple((player + off) % cfg.num_players for off in range(1, cfg.num_players))
    return Observation(
        viewer=player,
        others_hands=tuple(state.hands[o] for o in others),
        own_knowledge=state.card_knowledge[player],
        others_knowledge=tuple(state.card_knowledge[o] for o in others),
        fireworks=state.fireworks,
        discard=state.discard,
        hint_tokens=state.hint_tokens,
        life_tokens=state.life_tokens,
        deck_size=len(state.deck),
        current_player=state.current_player,
        last_action=state.last_action,
        config=cfg,
    )


# Move indices are relative to the acting player:
#   [0, H)            discard slot
#   [H, 2H)           play slot
#   [2H, 2H+C)        hint colour to the next player
#   [2H+C, 2H+C+R)    hint rank to the next player
# and the block of C+R hint indices repeats for each further seat offset.


def action_to_index(action: Action, actor: int, config: GameConfig) -> int:
    h = config.hand_size
    if action.kind == ActionKind.DISCARD:
        return action.slot
    if action.kind == ActionKind.PLAY:
        return h + action.slot
    off = (action.target - actor) % config.num_players
    base = 2 * h + (off - 1) * (config.num_colors + config.num_ranks)
    if action.kind == ActionKind.HINT_COLOR:
        return base + action.value
    return base + config.num_colors + action.value


def index_to_action(index: int, actor: int, config: GameConfig) -> Action:
    h = config.hand_size
    if not 0 <= index < config.num_moves:
        raise UsageError(f"move index {index} out of range")
    if index < h:
        return Action.discard(index)
    if index < 2 * h:
        return Action.play(index - h)
    rel = index - 2 * h
    per = config.num_colors + config.num_ranks
    off, v = divmod(rel, per)
    target = (actor + off + 1) % config.num_players
    if v < config.num_colors:
        return Action.hint_color(target, v)
    return Action.hint_rank(target, v - config.num_colors)


def legal_move_mask(state: GameState) -> list[bool]:
    mask = [False] * state.config.num_moves
    for a in legal_actions(state):
        mask[action_to_index(a, state.current_player, state.config)] = True
    return mask


# -- traces -----------------------------------------------------------------


def trace_record(step: int, actor: int, action: Action, reward: float, after: GameState) -> dict:
    return {
        "step": step,
        "actor": actor,
        "action": str(action),
        "reward": reward,
        "hint_tokens": after.hint_tokens,
        "life_tokens": after.life_tokens,
        "score": score(after),
    }


def play_actions(
    config: GameConfig, seed: int, actions: Iterable[Action]
) -> Iterator[tuple[GameState, Action, float, GameState]]:
    """Replay ``actions`` from a fresh deal, yielding ``(before, action, reward, after)``."""
    state = new_game(config, seed)
    for a in actions:
        nxt, r, _ = apply_action(state, a)
        yield state, a, r, nxt
        state = nxt


def write_trace(path, records: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_trace(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def replay_trace(config: GameConfig, seed: int, records: Sequence[dict]) -> GameState:
    """Re-run a recorded trace and check each record against the replay."""
    state = new_game(config, seed)
    for rec in records:
        actor = state.current_player
        action = Action.parse(rec["action"])
        state, r, _ = apply_action(state, action)
        if trace_record(rec["step"], actor, action, r, state) != rec:
            raise UsageError(f"trace diverges at step {rec['step']}")
    return state


def with_fireworks(state: GameState, fireworks: Sequence[int]) -> GameState:
    """Copy of ``state`` with the given firework heights (test/setup helper)."""
    return replace(state, fireworks=tuple(fireworks))
