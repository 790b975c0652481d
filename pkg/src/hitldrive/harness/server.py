"""Live-session server bridging a browser cockpit to a running trainer.

One trainer thread, one asyncio websocket context. Inbound steering flows
through the LiveSource mailbox (overwrite-on-write, read-clears); outbound
state flows through a single newest-wins frame cell, so a slow client drops
frames instead of stalling the training loop. Exactly one operator client
is admitted at a time.
"""

from __future__ import annotations

import asyncio
import json
import logging
import threading

from ..intervene import LiveSource
from ..track import N_ACTIONS
from .config import ConfigError, RunConfig
from .runs import execute_train
from ..agent import TrainerHooks

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
FRAME_INTERVAL_S = 0.05  # 20 Hz send cadence, comfortably above the 10 Hz floor


class FrameCell:
    """Latest-frame slot shared between trainer thread and sender task."""

    def __init__(self):
        self._lock = threading.Lock()
        self._frame: dict | None = None
        self._seq = 0

    def put(self, frame: dict) -> None:
        with self._lock:
            self._frame = frame
            self._seq += 1

    def get(self) -> tuple[dict | None, int]:
        with self._lock:
            return self._frame, self._seq


class SessionServer:
    def __init__(self, cfg: RunConfig, port: int, rate: float = 10.0,
                 host: str = "127.0.0.1"):
        self.cfg = cfg
        self.port = port
        self.host = host
        self.rate = rate
        self.live = LiveSource()
        self.cell = FrameCell()
        self.paused = threading.Event()
        self.stopped = threading.Event()
        self.trainer_error: BaseException | None = None
        self._client = None
        self._track_dict = cfg.env.track.build().to_dict()

    # ------------------------------------------------------------------
    def _train(self) -> None:
        hooks = TrainerHooks(
            on_frame=self.cell.put,
            pause_check=self.paused.is_set,
            stop_check=self.stopped.is_set,
            steps_per_second=self.rate,
        )
        try:
            execute_train(self.cfg, live=self.live, hooks_extra=hooks)
        except BaseException as e:  # surfaced after the server winds down
            self.trainer_error = e
            log.exception("trainer failed")

    async def _handle(self, websocket) -> None:
        if self._client is not None:
            await websocket.send(json.dumps({
                "type": "rejected", "v": PROTOCOL_VERSION,
                "reason": "single-operator session already has a client",
            }))
            await websocket.close(code=1013, reason="session busy: one operator only")
            return
        self._client = websocket
        try:
            await websocket.send(json.dumps({
                "type": "hello", "v": PROTOCOL_VERSION,
                "track": self._track_dict,
                "n_actions": N_ACTIONS,
                "rate": self.rate,
            }))
            sender = asyncio.create_task(self._send_frames(websocket))
            try:
                async for raw in websocket:
                    await self._on_message(websocket, raw)
            finally:
                sender.cancel()
        except Exception:
            pass
        finally:
            self._client = None
            self.live.set_engaged(False)

    async def _send_frames(self, websocket) -> None:
        last_seq = -1
        while True:
            frame, seq = self.cell.get()
            if frame is not None:
                payload = {"type": "frame", "v": PROTOCOL_VERSION, **frame,
                           "fresh": seq != last_seq}
                last_seq = seq
                await websocket.send(json.dumps(payload))
            await asyncio.sleep(FRAME_INTERVAL_S)

    async def _on_message(self, websocket, raw: str) -> None:
        try:
            msg = json.loads(raw)
        except json.JSONDecodeError:
            await websocket.send(json.dumps(
                {"type": "warning", "message": "undecodable message"}))
            return
        kind = msg.get("type")
        if kind == "steer":
            index = msg.get("index")
            if isinstance(index, int) and 0 <= index < N_ACTIONS:
                self.live.offer(index)
            else:
                await websocket.send(json.dumps(
                    {"type": "warning", "message": f"bad steer index {index!r}"}))
        elif kind == "engage":
            self.live.set_engaged(bool(msg.get("on")))
        elif kind == "pause":
            self.paused.set()
        elif kind == "resume":
            self.paused.clear()
        else:
            await websocket.send(json.dumps(
                {"type": "warning", "message": f"unknown message type {kind!r}"}))

    async def _run(self) -> None:
        try:
            from websockets.asyncio.server import serve
        except ImportError:  # websockets < 13
            from websockets.server import serve  # type: ignore
        trainer = threading.Thread(target=self._train, daemon=True)
        try:
            async with serve(self._handle, self.host, self.port):
                trainer.start()
                while trainer.is_alive():
                    await asyncio.sleep(0.2)
        except OSError as e:
            self.stopped.set()
            raise ConfigError("serve.port", f"cannot bind port {self.port}: {e}") from e
        finally:
            self.stopped.set()
            if trainer.is_alive():
                trainer.join(timeout=10)
        if self.trainer_error is not None:
            raise self.trainer_error

    def run(self) -> None:
        asyncio.run(self._run())
