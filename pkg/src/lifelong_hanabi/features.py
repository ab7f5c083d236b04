"""Fixed-length binary encodings of observations, colour permutations for
Other-Play, and the greedy-action block used by SAD agents.

Encoding layout, version 1 (all entries are 0/1, blocks in this order)::

    others_hands     (P-1)*H*C*R   one-hot card type per visible slot
    fireworks        C*(R+1)       one-hot height per colour
    hint_tokens      max_hints     thermometer
    life_tokens      max_lives     thermometer
    deck             deck-P*H      thermometer of cards left to draw
    discard          C*sum(counts) per card type, thermometer of copies discarded
    own_knowledge    H*(C+R)       possible colours / ranks per own slot   [knowledge]
    others_knowledge (P-1)*H*(C+R) same for every partner slot             [knowledge]
    last_action      P + M + C*R + 2 + H                                   [last action]
                     actor offset, move index (relative to the actor),
                     revealed card, play success / misplay, hinted slots
    greedy_action    M + 1         partner's greedy move, last slot = none  [sad]

``C*R`` card types are indexed ``color * R + rank``; ``M`` is the number of
moves per player. The layout is an analog of the Hanabi Learning
Environment's canonical encoder, not a byte-compatible copy of it.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

from .engine import (
    Action,
    ActionKind,
    Card,
    GameConfig,
    LastAction,
    Observation,
    SlotKnowledge,
    action_to_index,
    index_to_action,
)
from .errors import UsageError

ENCODING_VERSION = 1


@dataclass(frozen=True)
class EncodingSpec:
    config: GameConfig
    include_last_action: bool = True
    include_card_knowledge: bool = True
    sad_augment: bool = False

    @cached_property
    def blocks(self) -> dict[str, tuple[int, int]]:
        """Block name -> (offset, length)."""
        cfg = self.config
        P, H, C, R = cfg.num_players, cfg.hand_size, cfg.num_colors, cfg.num_ranks
        sizes = [
            ("others_hands", (P - 1) * H * C * R),
            ("fireworks", C * (R + 1)),
            ("hint_tokens", cfg.max_hint_tokens),
            ("life_tokens", cfg.max_life_tokens),
            ("deck", cfg.deck_size - P * H),
            ("discard", C * sum(cfg.rank_counts)),
        ]
        if self.include_card_knowledge:
            sizes.append(("own_knowledge", H * (C + R)))
            sizes.append(("others_knowledge", (P - 1) * H * (C + R)))
        if self.include_last_action:
            sizes.append(("last_action", P + cfg.num_moves + C * R + 2 + H))
        if self.sad_augment:
            sizes.append(("greedy_action", cfg.num_moves + 1))
        out = {}
        off = 0
        for name, n in sizes:
            out[name] = (off, n)
            off += n
        return out

    @property
    def feature_length(self) -> int:
        off, n = list(self.blocks.values())[-1]
        return off + n

    @property
    def base_length(self) -> int:
        """Length before the greedy-action block."""
        return self.feature_length - (self.greedy_block_length if self.sad_augment else 0)

    @property
    def greedy_block_length(self) -> int:
        return self.config.num_moves + 1

    @cached_property
    def _discard_offsets(self) -> list[int]:
        # start of the thermometer for card type (c, r)
        cfg = self.config
        offs, o = [], 0
        for _c in range(cfg.num_colors):
            for r in range(cfg.num_ranks):
                offs.append(o)
                o += cfg.rank_counts[r]
        return offs

    def to_dict(self) -> dict:
        return {
            "version": ENCODING_VERSION,
            "game": self.config.to_dict(),
            "include_last_action": self.include_last_action,
            "include_card_knowledge": self.include_card_knowledge,
            "sad_augment": self.sad_augment,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncodingSpec":
        if d.get("version") != ENCODING_VERSION:
            raise UsageError(f"encoding version {d.get('version')} != {ENCODING_VERSION}")
        return cls(
            config=GameConfig.from_dict(d["game"]),
            include_last_action=d["include_last_action"],
            include_card_knowledge=d["include_card_knowledge"],
            sad_augment=d["sad_augment"],
        )


def partner_last_move(obs: Observation) -> int | None:
    """Move index of the partner's most recent action, if it was the last one played."""
    la = obs.last_action
    if la is None or la.actor == obs.viewer:
        return None
    return action_to_index(la.action, la.actor, obs.config)


def active_indices(obs: Observation, spec: EncodingSpec) -> list[int]:
    """Positions of the ones in the base encoding (no greedy block)."""
    cfg = spec.config
    if obs.config != cfg:
        raise UsageError("observation comes from a different game configuration")
    P, H, C, R = cfg.num_players, cfg.hand_size, cfg.num_colors, cfg.num_ranks
    blocks = spec.blocks
    idx: list[int] = []

    off = blocks["others_hands"][0]
    for hand in obs.others_hands:
        for s, card in enumerate(hand):
            idx.append(off + s * C * R + card.color * R + card.rank)
        off += H * C * R

    off = blocks["fireworks"][0]
    for c, h in enumerate(obs.fireworks):
        idx.append(off + c * (R + 1) + h)

    off = blocks["hint_tokens"][0]
    idx.extend(range(off, off + obs.hint_tokens))
    off = blocks["life_tokens"][0]
    idx.extend(range(off, off + obs.life_tokens))
    off = blocks["deck"][0]
    idx.extend(range(off, off + obs.deck_size))

    off = blocks["discard"][0]
    seen: dict[Card, int] = {}
    doffs = spec._discard_offsets
    for card in obs.discard:
        k = seen.get(card, 0)
        idx.append(off + doffs[card.color * R + card.rank] + k)
        seen[card] = k + 1

    if spec.include_card_knowledge:
        off = blocks["own_knowledge"][0]
        _knowledge_indices(obs.own_knowledge, off, C, R, idx)
        off = blocks["others_knowledge"][0]
        for kn in obs.others_knowledge:
            _knowledge_indices(kn, off, C, R, idx)
            off += H * (C + R)

    if spec.include_last_action and obs.last_action is not None:
        la = obs.last_action
        off = blocks["last_action"][0]
        idx.append(off + (la.actor - obs.viewer) % P)
        off += P
        idx.append(off + action_to_index(la.action, la.actor, cfg))
        off += cfg.num_moves
        if la.card is not None:
            idx.append(off + la.card.color * R + la.card.rank)
        off += C * R
        if la.success is True:
            idx.append(off)
        elif la.success is False:
            idx.append(off + 1)
        off += 2
        idx.extend(off + s for s in la.hinted_slots)
    return idx


def _knowledge_indices(kn, off: int, C: int, R: int, idx: list[int]) -> None:
    for s, k in enumerate(kn):
        base = off + s * (C + R)
        idx.extend(base + c for c in k.colors)
        idx.extend(base + C + r for r in k.ranks)


def encode_base(obs: Observation, spec: EncodingSpec) -> np.ndarray:
    x = np.zeros(spec.base_length)
    x[active_indices(obs, spec)] = 1.0
    return x


def encode(obs: Observation, spec: EncodingSpec) -> np.ndarray:
    """Encode ``obs``; SAD specs fill the greedy block with the partner's actual last move."""
    x = np.zeros(spec.feature_length)
    x[active_indices(obs, spec)] = 1.0
    if spec.sad_augment:
        g = partner_last_move(obs)
        off = spec.blocks["greedy_action"][0]
        x[off + (spec.config.num_moves if g is None else g)] = 1.0
    return x


def augment_greedy(x: np.ndarray, partner_greedy: int | None, spec: EncodingSpec) -> np.ndarray:
    """Append the partner's greedy move as a one-hot block (last slot means none)."""
    if not spec.sad_augment:
        raise UsageError("greedy-action augmentation requested for a non-SAD encoding")
    if x.shape[-1] != spec.base_length:
        raise UsageError(f"expected base encoding of length {spec.base_length}, got {x.shape[-1]}")
    block = np.zeros(spec.greedy_block_length)
    M = spec.config.num_moves
    if partner_greedy is None:
        block[M] = 1.0
    else:
        if not 0 <= partner_greedy < M:
            raise UsageError(f"greedy move {partner_greedy} out of range")
        block[partner_greedy] = 1.0
    return np.concatenate([x, block])


# -- colour permutations ------------------------------------------------------


@dataclass(frozen=True)
class ColorPermutation:
    """``perm[c]`` is the new label of colour ``c``."""

    perm: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "perm", tuple(int(c) for c in self.perm))
        if sorted(self.perm) != list(range(len(self.perm))):
            raise UsageError(f"{self.perm} is not a permutation")

    @classmethod
    def identity(cls, n: int) -> "ColorPermutation":
        return cls(tuple(range(n)))

    @classmethod
    def swap(cls, n: int, a: int, b: int) -> "ColorPermutation":
        p = list(range(n))
        p[a], p[b] = p[b], p[a]
        return cls(tuple(p))

    @classmethod
    def all(cls, n: int) -> list["ColorPermutation"]:
        return [cls(p) for p in itertools.permutations(range(n))]

    @property
    def is_identity(self) -> bool:
        return self.perm == tuple(range(len(self.perm)))

    def inverse(self) -> "ColorPermutation":
        inv = [0] * len(self.perm)
        for c, d in enumerate(self.perm):
            inv[d] = c
        return ColorPermutation(tuple(inv))

    def compose(self, other: "ColorPermutation") -> "ColorPermutation":
        """Apply ``other`` first, then ``self``."""
        return ColorPermutation(tuple(self.perm[other.perm[c]] for c in range(len(self.perm))))


def _pcard(card: Card, p: tuple[int, ...]) -> Card:
    return Card(p[card.color], card.rank)


def _pknow(k: SlotKnowledge, p: tuple[int, ...]) -> SlotKnowledge:
    return SlotKnowledge(frozenset(p[c] for c in k.colors), k.ranks)


def permute_action(a: Action, p: ColorPermutation) -> Action:
    if a.kind == ActionKind.HINT_COLOR:
        return replace(a, value=p.perm[a.value])
    return a


def permute_observation(obs: Observation, p: ColorPermutation) -> Observation:
    if p.is_identity:
        return obs
    q = p.perm
    fw = [0] * len(obs.fireworks)
    for c, h in enumerate(obs.fireworks):
        fw[q[c]] = h
    la = obs.last_action
    if la is not None:
        la = LastAction(
            la.actor,
            permute_action(la.action, p),
            None if la.card is None else _pcard(la.card, q),
            la.success,
            la.hinted_slots,
        )
    return replace(
        obs,
        others_hands=tuple(tuple(_pcard(c, q) for c in h) for h in obs.others_hands),
        own_knowledge=tuple(_pknow(k, q) for k in obs.own_knowledge),
        others_knowledge=tuple(tuple(_pknow(k, q) for k in kn) for kn in obs.others_knowledge),
        fireworks=tuple(fw),
        discard=tuple(_pcard(c, q) for c in obs.discard),
        last_action=la,
    )


def move_permutation(p: ColorPermutation, config: GameConfig) -> np.ndarray:
    """``out[i]`` is the move index of move ``i`` after relabelling colours by ``p``."""
    out = np.empty(config.num_moves, dtype=np.int64)
    for i in range(config.num_moves):
        a = index_to_action(i, 0, config)
        out[i] = action_to_index(permute_action(a, p), 0, config)
    return out


def card_type_permutation(p: ColorPermutation, config: GameConfig) -> np.ndarray:
    """``out[t]`` is the card-type index of type ``t`` after relabelling colours."""
    R = config.num_ranks
    return np.array(
        [p.perm[t // R] * R + t % R for t in range(config.num_card_types)], dtype=np.int64
    )
