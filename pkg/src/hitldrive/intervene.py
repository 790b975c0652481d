"""Intervention gating and intervention sources.

The gate opens a window of h_steps steps at every positive multiple of
h_freq, up to H_limit windows per run. Sources share one non-blocking
polling contract: poll(step, observation, vehicle_state) -> action index
or None. The global step is part of the contract so recorded traces can
be replayed at exactly the steps they were captured at.
"""

from __future__ import annotations

import json
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .track import (
    STEER_MAX,
    WHEELBASE,
    TrackSpec,
    VehicleState,
    steering_to_action,
)

TRACE_SCHEMA_VERSION = 1
LIVE_STALE_S = 0.5  # steering input older than this is discarded


class ReplayDivergence(RuntimeError):
    pass


@dataclass
class InterventionSchedule:
    """Window constants: a window of h_steps opens every h_freq steps,
    at most h_limit windows per run."""

    h_freq: int = 2000
    h_steps: int = 200
    h_limit: int = 5

    def __post_init__(self):
        if self.h_freq < 1:
            raise ValueError("h_freq must be >= 1")
        if not 0 <= self.h_steps <= self.h_freq:
            raise ValueError("h_steps must be in [0, h_freq]")
        if self.h_limit < 0:
            raise ValueError("h_limit must be >= 0")

    def gate(self, global_step: int) -> bool:
        """True iff `global_step` falls inside an active window.

        Pure in (constants, step): window k covers steps
        [k*h_freq, k*h_freq + h_steps) for k = 1..h_limit.
        """
        if self.h_limit == 0 or global_step < self.h_freq:
            return False
        k = global_step // self.h_freq
        if k > self.h_limit:
            return False
        return global_step - k * self.h_freq < self.h_steps

    def windows_used(self, global_step: int) -> int:
        return min(global_step // self.h_freq, self.h_limit)


class NullSource:
    """No human available; gate-open polls always come back empty."""

    def poll(self, step: int, obs, state) -> int | None:
        return None


class ScriptedExpert:
    """Pure-pursuit waypoint follower standing in for a human operator.

    Deterministic: aims at the waypoint nearest to the point `lookahead`
    meters ahead along the current heading, steers by the pure-pursuit law,
    clamps, and snaps to the 33-action grid (ties resolve toward center).
    """

    def __init__(self, track: TrackSpec, lookahead: float = 6.0):
        self.track = track
        self.lookahead = float(lookahead)

    def steering_for(self, state: VehicleState) -> float:
        probe = state.position + self.lookahead * np.array(
            [math.cos(state.heading), math.sin(state.heading)]
        )
        d = np.hypot(*(self.track.waypoints - probe).T)
        target = self.track.waypoints[int(np.argmin(d))]
        rel = target - state.position
        alpha = math.remainder(
            math.atan2(rel[1], rel[0]) - state.heading, 2 * math.pi
        )
        raw = math.atan2(2.0 * WHEELBASE * math.sin(alpha), self.lookahead)
        return min(max(raw, -STEER_MAX), STEER_MAX)

    def action_for(self, state: VehicleState) -> int:
        return steering_to_action(self.steering_for(state))

    def poll(self, step: int, obs, state: VehicleState) -> int | None:
        return self.action_for(state)


class LiveSource:
    """Mailbox bridging a network handler (producer) to the training loop
    (consumer). Overwrite-on-write, read-clears; inputs are only delivered
    while the operator holds intervention engaged, and entries older than
    LIVE_STALE_S seconds are dropped.
    """

    def __init__(self, clock=time.monotonic):
        self._lock = threading.Lock()
        self._clock = clock
        self._action: int | None = None
        self._stamp = 0.0
        self._engaged = False
        self._warned_empty = False

    def offer(self, action_index: int) -> None:
        """Producer side: latest steering message wins."""
        with self._lock:
            self._action = int(action_index)
            self._stamp = self._clock()

    def set_engaged(self, on: bool) -> None:
        with self._lock:
            self._engaged = bool(on)
            if not on:
                self._action = None

    @property
    def engaged(self) -> bool:
        with self._lock:
            return self._engaged

    def poll(self, step: int, obs, state) -> int | None:
        with self._lock:
            if not self._engaged or self._action is None:
                return None
            action, stamp = self._action, self._stamp
            self._action = None  # read clears
        if self._clock() - stamp > LIVE_STALE_S:
            return None
        return action


class TraceRecorder:
    """Wraps a source and logs every delivered (step, action) pair."""

    def __init__(self, source, tag: str = "expert"):
        self.source = source
        self.tag = tag
        self.entries: list[tuple[int, int]] = []

    def poll(self, step: int, obs, state) -> int | None:
        action = self.source.poll(step, obs, state)
        if action is not None:
            self.entries.append((step, int(action)))
        return action

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(json.dumps({
                "schema": "hitldrive-trace", "v": TRACE_SCHEMA_VERSION,
                "source_tag": self.tag,
            }) + "\n")
            for step, action in self.entries:
                f.write(json.dumps(
                    {"step": step, "action_index": action, "source_tag": self.tag}
                ) + "\n")
            f.write(json.dumps({"end": True, "n": len(self.entries)}) + "\n")


class TraceSource:
    """Replays a recorded trace at exactly the recorded steps.

    A file without its end marker is treated as truncated: replay raises
    ReplayDivergence the first time it is polled past the last recorded
    step, since fidelity can no longer be guaranteed. Entries the run never
    consumes (a step mismatch) surface via `verify_exhausted()`.
    """

    def __init__(self, path):
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"trace file not found: {p}")
        self.by_step: dict[int, int] = {}
        self.complete = False
        self.declared_n: int | None = None
        with open(p) as f:
            header = json.loads(f.readline())
            if header.get("schema") != "hitldrive-trace":
                raise ValueError(f"{p} is not a trace file")
            for line in f:
                rec = json.loads(line)
                if rec.get("end"):
                    self.complete = True
                    self.declared_n = rec.get("n")
                    break
                self.by_step[rec["step"]] = rec["action_index"]
        if self.complete and self.declared_n != len(self.by_step):
            raise ReplayDivergence(
                f"trace declares {self.declared_n} entries, found {len(self.by_step)}"
            )
        self._consumed: set[int] = set()
        self._last_step = max(self.by_step) if self.by_step else -1

    def poll(self, step: int, obs, state) -> int | None:
        if not self.complete and step > self._last_step:
            raise ReplayDivergence(
                f"truncated trace: no entries at or beyond step {step} "
                f"(last recorded step {self._last_step})"
            )
        action = self.by_step.get(step)
        if action is not None:
            self._consumed.add(step)
        return action

    def verify_exhausted(self) -> None:
        missed = sorted(set(self.by_step) - self._consumed)
        if missed:
            raise ReplayDivergence(
                f"replay never polled at recorded steps {missed[:5]} "
                f"({len(missed)} total); run/gate configuration diverged"
            )
