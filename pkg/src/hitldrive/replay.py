"""Prioritized replay over human/agent transition pairs, plus the append-only
evaluative store consumed by the post-hoc intervention assessment.

The sum tree stores p^alpha at its leaves; raw priorities (|TD| + eps) are
kept alongside so tests and diagnostics can read them unexponentiated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NO_HUMAN_ACTION = -1

# Documented field order for on-disk transition records (see EvaluativeStore).
TRANSITION_FIELDS = (
    "s", "a_agent", "a_human", "r", "s_next", "done", "crashed", "intervened",
    "lambda_h", "episode", "sim",
)
STORE_SCHEMA_VERSION = 1


class RejectedTransition(ValueError):
    pass


class BufferNotReady(RuntimeError):
    pass


class StorageError(OSError):
    pass


@dataclass
class Transition:
    """One environment step with both the agent's and the human's action.

    a_human is -1 when no intervention occurred; `intervened` must agree.
    lambda_h records the human-weight schedule value at storage time, and
    `sim` carries an optional simulator snapshot for oracle-mode rollouts.
    """

    s: np.ndarray
    a_agent: int
    a_human: int
    r: float
    s_next: np.ndarray
    done: bool
    intervened: int
    crashed: bool = False
    lambda_h: float = 0.0
    episode: int = 0
    sim: dict | None = None

    def validate(self, n_actions: int = 33) -> None:
        if not 0 <= self.a_agent < n_actions:
            raise RejectedTransition(f"a_agent out of range: {self.a_agent}")
        if self.a_human != NO_HUMAN_ACTION and not 0 <= self.a_human < n_actions:
            raise RejectedTransition(f"a_human out of range: {self.a_human}")
        if bool(self.intervened) != (self.a_human != NO_HUMAN_ACTION):
            raise RejectedTransition(
                f"intervened={self.intervened} inconsistent with a_human={self.a_human}"
            )

    def to_record(self) -> dict:
        rec = {
            "s": [float(v) for v in self.s],
            "a_agent": int(self.a_agent),
            "a_human": int(self.a_human),
            "r": float(self.r),
            "s_next": [float(v) for v in self.s_next],
            "done": bool(self.done),
            "crashed": bool(self.crashed),
            "intervened": int(self.intervened),
            "lambda_h": float(self.lambda_h),
            "episode": int(self.episode),
        }
        if self.sim is not None:
            rec["sim"] = self.sim
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Transition":
        return cls(
            s=np.array(rec["s"], dtype=np.float64),
            a_agent=rec["a_agent"],
            a_human=rec["a_human"],
            r=rec["r"],
            s_next=np.array(rec["s_next"], dtype=np.float64),
            done=rec["done"],
            intervened=rec["intervened"],
            crashed=rec.get("crashed", False),
            lambda_h=rec.get("lambda_h", 0.0),
            episode=rec.get("episode", 0),
            sim=rec.get("sim"),
        )


class SumTree:
    """Array-backed binary sum tree over a fixed number of leaves.

    Leaf count is padded to a power of two; unused leaves stay at zero so
    proportional retrieval never lands on them.
    """

    def __init__(self, capacity: int):
        self.capacity = int(capacity)
        size = 1
        while size < capacity:
            size *= 2
        self._leaf_base = size - 1
        self.nodes = np.zeros(2 * size - 1, dtype=np.float64)
        self._n_leaves = size

    @property
    def total(self) -> float:
        return float(self.nodes[0])

    def get(self, leaf: int) -> float:
        return float(self.nodes[self._leaf_base + leaf])

    def set(self, leaf: int, value: float) -> None:
        if not 0 <= leaf < self.capacity:
            raise IndexError(f"leaf {leaf} out of range")
        idx = self._leaf_base + leaf
        change = value - self.nodes[idx]
        self.nodes[idx] = value
        while idx > 0:
            idx = (idx - 1) // 2
            self.nodes[idx] += change

    def retrieve(self, mass: float) -> int:
        """Leaf index whose cumulative-priority interval contains `mass`."""
        idx = 0
        while idx < self._leaf_base:
            left = 2 * idx + 1
            if mass <= self.nodes[left] or self.nodes[left + 1] == 0.0:
                idx = left
            else:
                mass -= self.nodes[left]
                idx = left + 1
        return idx - self._leaf_base

    def leaves(self) -> np.ndarray:
        return self.nodes[self._leaf_base : self._leaf_base + self.capacity]


@dataclass
class ReplayConfig:
    capacity: int = 50000
    alpha: float = 0.9
    beta_is: float = 0.4
    epsilon_priority: float = 1e-3
    # Optional multiplicative boost for intervened transitions (1.0 = off);
    # covers the reading of "human prioritization" as an intervention bonus.
    intervened_boost: float = 1.0


class PriorityBuffer:
    """Sum-tree prioritized replay with max-normalized IS weights.

    New transitions enter at the current maximum stored priority (or the
    supplied initial priority if larger) so they are sampled at least once.
    Ring eviction skips the first `n_pinned` slots, which lets demonstration
    data stay resident for DQfD-style fine-tuning.
    """

    def __init__(self, cfg: ReplayConfig | None = None):
        self.cfg = cfg or ReplayConfig()
        self.tree = SumTree(self.cfg.capacity)
        self.data: list[Transition | None] = [None] * self.cfg.capacity
        self.raw_priority = np.zeros(self.cfg.capacity, dtype=np.float64)
        self.size = 0
        self._write = 0
        self.n_pinned = 0

    def __len__(self) -> int:
        return self.size

    def pin_current(self) -> None:
        """Protect everything currently stored from ring eviction."""
        self.n_pinned = self.size

    def _raw_max(self) -> float:
        if self.size == 0:
            return 0.0
        return float(self.raw_priority[: self.size].max())

    def push(self, transition: Transition, initial_priority: float = 1.0) -> int:
        transition.validate()
        if initial_priority <= 0 and self.size == 0:
            raise RejectedTransition("first priority must be > 0")
        p = max(self._raw_max(), float(initial_priority))
        slot = self._write
        self.data[slot] = transition
        self.raw_priority[slot] = p
        self.tree.set(slot, p ** self.cfg.alpha)
        if self.size < self.cfg.capacity:
            self.size += 1
        self._write += 1
        if self._write >= self.cfg.capacity:
            self._write = self.n_pinned  # wrap into the unpinned region
        return slot

    def sample(self, batch_size: int, rng: np.random.Generator):
        """Stratified proportional sample on p^alpha.

        Returns (transitions, leaf indices, IS weights with max weight 1).
        """
        if self.size < batch_size:
            raise BufferNotReady(
                f"buffer has {self.size} < batch {batch_size} transitions"
            )
        total = self.tree.total
        seg = total / batch_size
        idx = np.empty(batch_size, dtype=np.int64)
        for i in range(batch_size):
            mass = rng.uniform(seg * i, seg * (i + 1))
            leaf = self.tree.retrieve(mass)
            if leaf >= self.size:  # numerical edge at segment boundaries
                leaf = self.size - 1
            idx[i] = leaf
        probs = self.tree.leaves()[idx] / total
        weights = (1.0 / (self.size * probs)) ** self.cfg.beta_is
        weights = weights / weights.max()
        batch = [self.data[i] for i in idx]
        return batch, idx, weights

    def update_priorities(self, tree_indices, td_errors) -> None:
        """Set each sampled leaf's priority to |TD| + epsilon (boost applies
        to intervened transitions when configured)."""
        idx = np.asarray(tree_indices, dtype=np.int64)
        tds = np.asarray(td_errors, dtype=np.float64)
        if np.any(idx < 0) or np.any(idx >= self.size):
            raise IndexError(f"tree index out of range (size {self.size})")
        for i, td in zip(idx, tds):
            p = abs(float(td)) + self.cfg.epsilon_priority
            tr = self.data[i]
            if tr is not None and tr.intervened:
                p *= self.cfg.intervened_boost
            self.raw_priority[i] = p
            self.tree.set(int(i), p ** self.cfg.alpha)

    def priority_of(self, slot: int) -> float:
        return float(self.raw_priority[slot])


class EvaluativeStore:
    """Append-only, episode-ordered transition log; never sampled for training.

    Concurrency: appends come from the single training thread; readers take
    an immutable snapshot via `snapshot()`.
    """

    def __init__(self):
        self._items: list[Transition] = []

    def append(self, transition: Transition) -> None:
        transition.validate()
        self._items.append(transition)

    def snapshot(self) -> list[Transition]:
        return list(self._items)

    def episode_starts(self) -> list[int]:
        """Indices where a new episode begins (derived from the episode field)."""
        starts = []
        prev = None
        for i, tr in enumerate(self._items):
            if tr.episode != prev:
                starts.append(i)
                prev = tr.episode
        return starts

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def save(self, path) -> None:
        """Line-delimited records: a schema header line, then one transition
        per line with fields in TRANSITION_FIELDS order."""
        try:
            with open(path, "w") as f:
                f.write(json.dumps({
                    "schema": "hitldrive-evaluative-store",
                    "v": STORE_SCHEMA_VERSION,
                    "fields": list(TRANSITION_FIELDS),
                }) + "\n")
                for tr in self._items:
                    f.write(json.dumps(tr.to_record()) + "\n")
        except OSError as e:
            raise StorageError(f"cannot write evaluative store at {path}: {e}") from e

    @classmethod
    def load(cls, path) -> "EvaluativeStore":
        p = Path(path)
        if not p.exists():
            raise StorageError(f"evaluative store not found: {p}")
        store = cls()
        try:
            with open(p) as f:
                header = json.loads(f.readline())
                if header.get("schema") != "hitldrive-evaluative-store":
                    raise StorageError(f"{p} is not an evaluative store file")
                for line in f:
                    store._items.append(Transition.from_record(json.loads(line)))
        except OSError as e:
            raise StorageError(f"cannot read evaluative store at {p}: {e}") from e
        return store
