"""Prioritized replay and per-task episodic memory.

Priority strategies:

* ``surprise`` - new transitions enter at the running max priority and are
  re-prioritized by ``|TD| + eps`` after every learning step;
* ``fifo`` - every priority is 1 and the exponent is forced to 0 (uniform);
* ``reward`` - priority ``|r| + eps``, never updated.

Sampling draws i.i.d. with probability ``p_i**alpha / sum_j p_j**alpha``
through a sum tree. Sample ids are insertion counters, so an id whose slot
has since been overwritten (or cleared by :meth:`ReplayBuffer.reset`) is
recognised as stale.
"""

from __future__ import annotations

import json
import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import UsageError
from .learner import Batch

STRATEGIES = ("surprise", "fifo", "reward")


class SumTree:
    def __init__(self, capacity: int):
        self.capacity = capacity
        self.leaves = 1 << max(0, (capacity - 1).bit_length())
        self.tree = np.zeros(2 * self.leaves)

    @property
    def total(self) -> float:
        return float(self.tree[1])

    def set_one(self, idx: int, value: float) -> None:
        pos = idx + self.leaves
        tree = self.tree
        tree[pos] = value
        pos >>= 1
        while pos:
            tree[pos] = tree[2 * pos] + tree[2 * pos + 1]
            pos >>= 1

    def set_many(self, idx: np.ndarray, values: np.ndarray) -> None:
        pos = np.asarray(idx, dtype=np.int64) + self.leaves
        self.tree[pos] = values
        pos = np.unique(pos >> 1)
        while pos[0] >= 1:
            self.tree[pos] = self.tree[2 * pos] + self.tree[2 * pos + 1]
            if pos[0] == 1:
                break
            pos = np.unique(pos >> 1)

    def leaf_values(self, idx) -> np.ndarray:
        return self.tree[np.asarray(idx) + self.leaves]

    def find(self, u: np.ndarray) -> np.ndarray:
        """Leaf indices whose cumulative-sum interval contains each ``u``."""
        u = np.array(u, dtype=np.float64)
        pos = np.ones(len(u), dtype=np.int64)
        tree = self.tree
        while pos[0] < self.leaves:
            left = tree[2 * pos]
            right_ok = tree[2 * pos + 1] > 0
            go_right = ((u >= left) & right_ok) | (left <= 0)
            u = np.where(go_right, u - left, u)
            pos = 2 * pos + go_right
        return pos - self.leaves

    def clear(self) -> None:
        self.tree[:] = 0.0


@dataclass
class Transition:
    obs: np.ndarray  # [K, D]
    action: np.ndarray  # [K]
    reward: float
    next_obs: np.ndarray  # [K, D]
    terminal: bool
    legal: np.ndarray  # [K, A]
    next_legal: np.ndarray  # [K, A]
    aux_labels: np.ndarray | None = None  # [K, S]
    partner_greedy: np.ndarray | None = None  # [K], -1 = none
    priority: float = 1.0
    tag: int = 0  # provenance, e.g. partner index


_FIELDS = ("obs", "action", "reward", "next_obs", "terminal", "legal", "next_legal", "aux_labels", "partner_greedy", "tag")


class ReplayBuffer:
    def __init__(
        self,
        capacity: int = 32768,
        strategy: str = "surprise",
        alpha: float = 0.9,
        beta: float = 0.6,
        priority_eps: float = 1e-3,
    ):
        if strategy not in STRATEGIES:
            raise UsageError(f"unknown strategy {strategy!r}")
        if capacity < 1:
            raise UsageError("capacity must be positive")
        self.capacity = capacity
        self.strategy = strategy
        self.alpha = 0.0 if strategy == "fifo" else alpha
        self.beta = beta
        self.priority_eps = priority_eps
        self.tree = SumTree(capacity)
        self.priorities = np.zeros(capacity)  # raw, before the exponent
        self.ids = np.full(capacity, -1, dtype=np.int64)
        self.max_priority = 1.0
        self.stale_updates = 0
        self._next_id = 0
        self._base_id = 0
        self._data: dict[str, np.ndarray] | None = None
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return min(self._next_id - self._base_id, self.capacity)

    @property
    def total_pushed(self) -> int:
        return self._next_id

    def _allocate(self, t: Transition) -> None:
        K, D = t.obs.shape
        A = t.legal.shape[-1]
        cap = self.capacity
        d = {
            "obs": np.zeros((cap, K, D), dtype=np.float32),
            "next_obs": np.zeros((cap, K, D), dtype=np.float32),
            "action": np.zeros((cap, K), dtype=np.int64),
            "reward": np.zeros(cap),
            "terminal": np.zeros(cap, dtype=bool),
            "legal": np.zeros((cap, K, A), dtype=bool),
            "next_legal": np.zeros((cap, K, A), dtype=bool),
            "partner_greedy": np.full((cap, K), -1, dtype=np.int64),
            "tag": np.zeros(cap, dtype=np.int64),
        }
        if t.aux_labels is not None:
            d["aux_labels"] = np.full((cap,) + t.aux_labels.shape, -1, dtype=np.int64)
        self._data = d

    def _initial_priority(self, t: Transition) -> float:
        if self.strategy == "surprise":
            return self.max_priority
        if self.strategy == "fifo":
            return 1.0
        return abs(float(t.reward)) + self.priority_eps

    def _push_locked(self, t: Transition) -> None:
        if self._data is None:
            self._allocate(t)
        slot = self._next_id % self.capacity
        d = self._data
        d["obs"][slot] = t.obs
        d["next_obs"][slot] = t.next_obs
        d["action"][slot] = t.action
        d["reward"][slot] = t.reward
        d["terminal"][slot] = t.terminal
        d["legal"][slot] = t.legal
        d["next_legal"][slot] = t.next_legal
        d["partner_greedy"][slot] = -1 if t.partner_greedy is None else t.partner_greedy
        d["tag"][slot] = t.tag
        if "aux_labels" in d:
            d["aux_labels"][slot] = t.aux_labels
        p = self._initial_priority(t)
        self.priorities[slot] = p
        self.ids[slot] = self._next_id
        self.tree.set_one(slot, p**self.alpha)
        self._next_id += 1

    def push(self, t: Transition) -> None:
        with self._lock:
            self._push_locked(t)

    def extend(self, ts) -> None:
        with self._lock:
            for t in ts:
                self._push_locked(t)

    def _slots(self) -> np.ndarray:
        n = len(self)
        return (np.arange(self._next_id - n, self._next_id)) % self.capacity

    def batch_at(self, slots: np.ndarray, weights: np.ndarray | None = None) -> Batch:
        d = self._data
        return Batch(
            obs=d["obs"][slots].astype(np.float64),
            action=d["action"][slots],
            reward=d["reward"][slots],
            next_obs=d["next_obs"][slots].astype(np.float64),
            terminal=d["terminal"][slots],
            next_legal=d["next_legal"][slots],
            legal=d["legal"][slots],
            aux_labels=d["aux_labels"][slots] if "aux_labels" in d else None,
            weights=weights,
        )

    def tags(self) -> np.ndarray:
        return self._data["tag"][self._slots()] if self._data is not None else np.zeros(0, dtype=np.int64)

    def sample(self, n: int, seed) -> tuple[Batch, np.ndarray, np.ndarray]:
        """``(batch, ids, importance_weights)``; weights are ``(N*P_i)**-beta / max``."""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        with self._lock:
            size = len(self)
            if n < 1 or size < n:
                raise UsageError(f"cannot sample {n} from a buffer holding {size}")
            total = self.tree.total
            slots = self.tree.find(rng.random(n) * total)
            probs = self.tree.leaf_values(slots) / total
            w = (size * probs) ** (-self.beta)
            w = w / w.max()
            return self.batch_at(slots, w), self.ids[slots].copy(), w

    def probabilities(self) -> np.ndarray:
        """Sampling probability of every stored transition, oldest first."""
        slots = self._slots()
        v = self.tree.leaf_values(slots)
        return v / v.sum()

    def update_priorities(self, ids: np.ndarray, td: np.ndarray) -> None:
        if self.strategy != "surprise":
            return
        ids = np.asarray(ids, dtype=np.int64)
        td = np.asarray(td, dtype=np.float64)
        with self._lock:
            slots = ids % self.capacity
            fresh = (ids >= self._base_id) & (ids >= self._next_id - self.capacity) & (self.ids[slots] == ids)
            self.stale_updates += int((~fresh).sum())
            if not fresh.any():
                return
            slots = slots[fresh]
            p = np.abs(td[fresh]) + self.priority_eps
            self.priorities[slots] = p
            self.tree.set_many(slots, p**self.alpha)
            self.max_priority = max(self.max_priority, float(p.max()))

    def reset(self) -> None:
        """Forget all stored transitions (used between continual-learning tasks)."""
        with self._lock:
            self._base_id = self._next_id
            self.tree.clear()
            self.priorities[:] = 0.0
            self.ids[:] = -1
            self.max_priority = 1.0

    def top_slots(self, k: int) -> np.ndarray:
        """Slots of the ``k`` highest-priority transitions, ties to the most recent."""
        slots = self._slots()
        ids = self.ids[slots]
        order = np.lexsort((-ids, -self.priorities[slots]))
        return slots[order[:k]]


# -- episodic memory ------------------------------------------------------------------

MEMORY_MAGIC = b"LHEM"
MEMORY_FORMAT = 1


@dataclass(frozen=True)
class MemorySlice:
    task_id: int
    batch: Batch
    priorities: np.ndarray
    alpha: float

    def __len__(self):
        return len(self.batch)


def _freeze(a):
    if a is not None:
        a.setflags(write=False)
    return a


class EpisodicMemory:
    def __init__(self, per_task_size: int = 2000):
        self.per_task_size = per_task_size
        self.slices: dict[int, MemorySlice] = {}

    @property
    def task_ids(self) -> list[int]:
        return sorted(self.slices)

    def add(self, s: MemorySlice) -> None:
        if s.task_id in self.slices:
            raise UsageError(f"task {s.task_id} already has a memory slice")
        b = s.batch
        for a in (b.obs, b.action, b.reward, b.next_obs, b.terminal, b.next_legal, b.legal, b.aux_labels, s.priorities):
            _freeze(a)
        self.slices[s.task_id] = s

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for tid, s in self.slices.items():
            save_slice(directory / f"task_{tid:03d}.mem", s)

    @classmethod
    def load(cls, directory, per_task_size: int) -> "EpisodicMemory":
        mem = cls(per_task_size)
        for path in sorted(Path(directory).glob("task_*.mem")):
            mem.add(load_slice(path))
        return mem


def snapshot_task(buf: ReplayBuffer, mem: EpisodicMemory, task_id: int, per_task_size: int | None = None) -> MemorySlice:
    """Freeze the top-priority transitions of the current task into ``mem``."""
    k = mem.per_task_size if per_task_size is None else per_task_size
    if task_id in mem.slices:
        raise UsageError(f"task {task_id} already snapshotted")
    if len(buf) < k:
        raise UsageError(f"buffer holds {len(buf)} transitions, {k} requested")
    slots = buf.top_slots(k)
    batch = buf.batch_at(slots)
    batch.obs = batch.obs.astype(np.float32).astype(np.float64)
    batch.next_obs = batch.next_obs.astype(np.float32).astype(np.float64)
    # rounded to the on-disk precision so a reloaded memory samples identically
    prios = buf.priorities[slots].astype(np.float32).astype(np.float64)
    s = MemorySlice(task_id=task_id, batch=batch, priorities=prios, alpha=buf.alpha)
    mem.add(s)
    return s


def memory_counts(n: int, t: int) -> list[int]:
    """Draws per prior task when the current task is ``t`` (1-based)."""
    if t < 2:
        raise UsageError("memory sampling needs at least one previous task")
    base, rem = divmod(n, t - 1)
    return [base + (1 if i < rem else 0) for i in range(t - 1)]


def sample_memory(mem: EpisodicMemory, n: int, t: int, seed) -> Batch:
    """Equal share of ``n`` draws from each task before ``t``; prioritized within a task."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    prior = [tid for tid in mem.task_ids if tid < t]
    if not prior:
        raise UsageError("no previous tasks in episodic memory")
    counts = memory_counts(n, len(prior) + 1)
    parts = []
    for tid, cnt in zip(prior, counts):
        if cnt == 0:
            continue
        s = mem.slices[tid]
        if len(s) == 0:
            raise UsageError(f"memory slice for task {tid} is empty")
        w = s.priorities**s.alpha
        cdf = np.cumsum(w)
        idx = np.searchsorted(cdf, rng.random(cnt) * cdf[-1], side="right")
        idx = np.minimum(idx, len(s) - 1)
        parts.append(s.batch.subset(idx))
    out = Batch.concat(parts)
    out.weights = np.ones(len(out))
    return out


_SLICE_ARRAYS = ("obs", "action", "reward", "next_obs", "terminal", "next_legal", "legal", "aux_labels")


def save_slice(path, s: MemorySlice) -> None:
    arrays = {name: getattr(s.batch, name) for name in _SLICE_ARRAYS if getattr(s.batch, name) is not None}
    arrays["priorities"] = s.priorities
    head = {
        "task_id": s.task_id,
        "alpha": s.alpha,
        "arrays": [[name, list(a.shape), str(a.dtype)] for name, a in arrays.items()],
    }
    hb = json.dumps(head, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays.values())
    Path(path).write_bytes(MEMORY_MAGIC + struct.pack("<II", MEMORY_FORMAT, len(hb)) + hb + body)


def load_slice(path) -> MemorySlice:
    data = Path(path).read_bytes()
    if data[:4] != MEMORY_MAGIC:
        raise UsageError(f"{path} is not an episodic-memory file")
    fmt, n = struct.unpack("<II", data[4:12])
    if fmt != MEMORY_FORMAT:
        raise UsageError(f"memory format {fmt} != {MEMORY_FORMAT}")
    head = json.loads(data[12 : 12 + n])
    off = 12 + n
    arrays = {}
    for name, shape, dtype in head["arrays"]:
        count = int(np.prod(shape))
        a = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        arrays[name] = a.astype(np.dtype(dtype))
    batch = Batch(**{k: arrays.get(k) for k in _SLICE_ARRAYS})
    return MemorySlice(task_id=head["task_id"], batch=batch, priorities=arrays["priorities"], alpha=head["alpha"])
