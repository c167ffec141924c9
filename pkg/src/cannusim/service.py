"""Live session server: streams frames and FSM state, accepts targets,
mode switches and teleop keys over a persistent bidirectional channel.

The deterministic core (:class:`SessionCore`) is plain Python with no I/O,
so a timestamped command script always produces an identical message
stream; the WebSocket layer only moves bytes. Binary frame layout is
documented in docs/protocol.md.
"""
from __future__ import annotations

import asyncio
import secrets
import struct
from dataclasses import dataclass, field
from typing import Optional

from .controller import ControllerPhase
from .errors import BindFailure, SessionLimitReached, UnknownSession
from .harness import outcome_class
from .scenario import Scenario
from .session import TrialEngine, cmd_from_dict
from .world import (AxialInsertion, Hold, MotionCommand, PlanarVelocity,
                    ZStep, inject_air)

__all__ = ["SessionCore", "SessionManager", "encode_frame", "decode_frame",
           "serve", "PROTOCOL_MAGIC", "KIND_MICROSCOPE", "KIND_BSCAN"]

PROTOCOL_MAGIC = 0x434E5331  # "CNS1"
KIND_MICROSCOPE = 2
KIND_BSCAN = 3
_HEADER = struct.Struct(">IBQdHHdI")  # magic, kind, seq, t, width, height, scale, payload len


def encode_frame(kind: int, seq: int, frame) -> bytes:
    h, w = frame.pixels.shape
    payload = frame.pixels.tobytes()
    return _HEADER.pack(PROTOCOL_MAGIC, kind, seq, frame.t, w, h,
                        frame.scale_mm_per_px, len(payload)) + payload


def decode_frame(buf: bytes) -> dict:
    magic, kind, seq, t, w, h, scale, n = _HEADER.unpack_from(buf, 0)
    if magic != PROTOCOL_MAGIC:
        raise ValueError(f"bad magic 0x{magic:08x}")
    payload = buf[_HEADER.size:_HEADER.size + n]
    if len(payload) != n:
        raise ValueError("short frame payload")
    return {"kind": kind, "seq": seq, "t": t, "width": w, "height": h,
            "scale": scale, "pixels": payload}


_KEY_TO_AXIS = {"+x": (1, 0), "-x": (-1, 0), "+y": (0, 1), "-y": (0, -1)}


class TeleopPolicy:
    """Keyboard-driven session policy: motion comes from the client, while
    perception runs for overlays and recognizes the puncture endpoint."""

    def __init__(self, cfg, key_step_mm: float):
        self.cfg = cfg
        self.key_step = key_step_mm
        self.phase = ControllerPhase.NAVIGATING
        self.navigation_s = 0.0
        self.puncture_s = 0.0
        self.attempts = 0
        self.verdict: Optional[int] = None
        self.abort_reason: Optional[str] = None
        self.last_note = "manual control"
        self.pending: Optional[MotionCommand] = None
        self.last_contact = None
        self.last_puncture = None

    @property
    def done(self) -> bool:
        return self.phase in (ControllerPhase.DONE, ControllerPhase.ABORTED)

    def needs(self) -> set:
        if self.phase == ControllerPhase.NAVIGATING:
            return {"tip", "contact"}
        return {"contact", "puncture"}

    def queue_key(self, direction: str, dt: float) -> None:
        if direction in _KEY_TO_AXIS:
            ax, ay = _KEY_TO_AXIS[direction]
            self.pending = PlanarVelocity(ax * self.key_step / dt, ay * self.key_step / dt)
        elif direction in ("+z", "-z"):
            sign = 1.0 if direction == "+z" else -1.0
            self.pending = ZStep(sign * min(self.key_step, 0.099))
        elif direction in ("+axial", "-axial"):
            sign = 1.0 if direction == "+axial" else -1.0
            self.pending = AxialInsertion(sign * self.cfg.insertion_speed_mm_s)

    def tick(self, percepts, pose, dt: float) -> MotionCommand:
        if self.done:
            return Hold()
        if self.phase == ControllerPhase.NAVIGATING:
            self.navigation_s += dt
        else:
            self.puncture_s += dt
        if percepts.contact is not None:
            self.last_contact = percepts.contact
        if percepts.puncture is not None:
            self.last_puncture = percepts.puncture
            if (percepts.puncture.decision == 1
                    and percepts.puncture.confidence >= self.cfg.puncture_conf_min):
                self.verdict = 1
                self.phase = ControllerPhase.DONE
                self.last_note = "puncture recognized"
                return Hold()
        cmd = self.pending if self.pending is not None else Hold()
        self.pending = None
        if self.phase == ControllerPhase.NAVIGATING and (
                isinstance(cmd, ZStep) or isinstance(cmd, AxialInsertion)):
            self.phase = ControllerPhase.CONTACT_SEEK
            self.navigation_s -= dt
            self.puncture_s += dt
        return cmd

    def force_abort(self, reason: str) -> None:
        self.phase = ControllerPhase.ABORTED
        self.abort_reason = reason
        if self.verdict is None:
            self.verdict = 0


@dataclass
class SessionMessage:
    """One server-to-client message: JSON body or binary frame bytes."""
    seq: int
    kind: str
    body: Optional[dict] = None
    blob: Optional[bytes] = None
    droppable: bool = False

    def is_frame(self) -> bool:
        return self.blob is not None


class SessionCore:
    """Deterministic single-trial session: commands in, messages out."""

    def __init__(self, scenario: Scenario, seed: int = 0, token: Optional[str] = None):
        self.scenario = scenario
        self.seed = seed
        self.token = token or secrets.token_hex(16)
        self.seq = 0
        self.started = False
        self.mode = "auto"
        self.result_sent = False
        self._build_engine()

    def _build_engine(self) -> None:
        self.engine = TrialEngine(self.scenario, mode="auto", seed=self.seed,
                                  render_all=True)
        # the engine starts with a provisional auto target; Idle until Start
        self.engine.policy.state = type(self.engine.policy.state)()  # reset to Idle
        self.started = False
        self.mode = "auto"
        self.result_sent = False
        self.last_result: Optional[dict] = None

    # -- commands ------------------------------------------------------------

    def apply_command(self, cmd: dict) -> list[SessionMessage]:
        kind = cmd.get("kind")
        out: list[SessionMessage] = []
        if kind == "set_target":
            return self._set_target(cmd)
        if kind == "set_mode":
            return self._set_mode(cmd)
        if kind == "key":
            return self._key(cmd)
        if kind == "start":
            if self.mode == "auto" and self._auto_state().target_px is None:
                return [self._error("set a target before starting")]
            self.started = True
            return [self._fsm_message()]
        if kind == "abort":
            self.engine.policy.force_abort("user_abort")
            return [self._fsm_message()]
        if kind == "reset":
            self._build_engine()
            return [self._fsm_message()]
        if kind == "snapshot":
            return [self._message("snapshot", self.snapshot())]
        return [self._error(f"unknown command kind {kind!r}")]

    def _auto_state(self):
        return self.engine.policy.state

    def _set_target(self, cmd: dict) -> list[SessionMessage]:
        if self.mode != "auto":
            return [self._error("targets apply to auto mode")]
        from . import controller as ctl
        state = self._auto_state()
        if state.phase not in (ControllerPhase.IDLE, ControllerPhase.NAVIGATING):
            return [self._error(f"cannot set target in phase {state.phase.value}")]
        try:
            self.engine.policy.state = ctl.set_target(state, (cmd["u"], cmd["v"]),
                                                      self.engine.cfg)
        except Exception as e:
            return [self._error(str(e))]
        return [self._message("ack", {"acked": "set_target", "u": cmd["u"], "v": cmd["v"]}),
                self._fsm_message()]

    def _set_mode(self, cmd: dict) -> list[SessionMessage]:
        mode = cmd.get("mode")
        if mode not in ("auto", "manual"):
            return [self._error(f"unknown mode {mode!r}")]
        if mode == self.mode:
            return [self._fsm_message()]
        if mode == "manual":
            pol = TeleopPolicy(self.engine.cfg, self.scenario.operator.key_step_mm)
            self.engine.policy = pol
        else:
            self._build_engine()
        self.mode = mode
        return [self._fsm_message()]

    def _key(self, cmd: dict) -> list[SessionMessage]:
        if self.mode != "manual":
            return [self._error("manual-only command")]
        self.engine.policy.queue_key(cmd.get("direction", ""), self.scenario.dt_s)
        return []

    # -- ticking ------------------------------------------------------------

    def tick(self) -> list[SessionMessage]:
        """Advance one sim tick (if started) and emit the frame/state set."""
        out: list[SessionMessage] = []
        if self.started and not self.engine.policy.done:
            self.engine.tick_once()
        else:
            self.engine.render_current()
        if self.engine.last_microscope is not None:
            out.append(self._frame(KIND_MICROSCOPE, self.engine.last_microscope))
        if self.engine.last_bscan is not None:
            out.append(self._frame(KIND_BSCAN, self.engine.last_bscan))
        out.append(self._fsm_message())
        if self.engine.policy.done and not self.result_sent:
            msg = self._result_message()
            self.last_result = msg.body
            out.append(msg)
            self.result_sent = True
        return out

    def run_script(self, script: dict[int, list[dict]], n_ticks: int) -> list[SessionMessage]:
        """Deterministic driver: apply at most one scripted command per tick
        (extras spill into later ticks), then tick. For tests and replays."""
        out: list[SessionMessage] = []
        backlog: list[dict] = []
        for k in range(n_ticks):
            backlog.extend(script.get(k, []))
            if backlog:
                out.extend(self.apply_command(backlog.pop(0)))
            out.extend(self.tick())
        return out

    # -- message builders ------------------------------------------------------

    def _next_seq(self) -> int:
        self.seq += 1
        return self.seq

    def _message(self, kind: str, body: dict) -> SessionMessage:
        seq = self._next_seq()
        t = self.engine.world.t
        return SessionMessage(seq=seq, kind=kind,
                              body={"kind": kind, "seq": seq, "t": t, **body})

    def _error(self, text: str) -> SessionMessage:
        return self._message("error", {"message": text})

    def _frame(self, kind: int, frame) -> SessionMessage:
        seq = self._next_seq()
        return SessionMessage(seq=seq, kind="frame",
                              blob=encode_frame(kind, seq, frame), droppable=True)

    def _fsm_body(self) -> dict:
        pol = self.engine.policy
        body = {
            "phase": pol.phase.value,
            "mode": self.mode,
            "started": self.started,
            "attempts": pol.attempts if hasattr(pol, "attempts") else 0,
            "navigation_s": pol.navigation_s,
            "puncture_s": pol.puncture_s,
            "verdict": pol.verdict,
            "abort_reason": pol.abort_reason,
            "note": pol.last_note,
            "tick": self.engine.world.tick,
        }
        state = getattr(pol, "state", None)
        if state is not None and state.target_px is not None:
            body["target_px"] = list(state.target_px)
        return body

    def _fsm_message(self) -> SessionMessage:
        return self._message("fsm_state", self._fsm_body())

    def _result_message(self) -> SessionMessage:
        pol = self.engine.policy
        claim = self.engine.claim_world or self.engine.world
        _, gt = inject_air(claim)
        verdict = 1 if pol.verdict == 1 else 0
        return self._message("trial_result", {
            "verdict": verdict,
            "ground_truth": int(gt.success),
            "gt_reason": gt.reason,
            "outcome_class": outcome_class(verdict, int(gt.success)),
            "navigation_s": pol.navigation_s,
            "puncture_s": pol.puncture_s,
            "attempts": getattr(pol, "attempts", 0),
            "abort_reason": pol.abort_reason,
        })

    def snapshot(self) -> dict:
        """Full state document; enough for a reconnecting client to render."""
        pol = self.engine.policy
        doc = {
            "session": self.token,
            "scenario_name": self.scenario.name,
            "scenario_digest": self.scenario.digest(),
            "fsm": self._fsm_body(),
            "frame_seq": self.seq,
            "tick": self.engine.world.tick,
            "t": self.engine.world.t,
        }
        state = getattr(pol, "state", None)
        if state is not None:
            doc["controller"] = state.to_dict()
        if self.last_result is not None:
            doc["trial_result"] = self.last_result
        return doc


# --- websocket transport -----------------------------------------------------------

class _Client:
    def __init__(self, ws):
        self.ws = ws
        self.ctrl: asyncio.Queue = asyncio.Queue()
        self.frames: asyncio.Queue = asyncio.Queue(maxsize=8)
        self.dropped = 0

    def push(self, msg: SessionMessage) -> None:
        import json
        if msg.is_frame():
            try:
                self.frames.put_nowait(msg.blob)
            except asyncio.QueueFull:
                self.dropped += 1  # slow client: frames drop, seq gap shows
        else:
            self.ctrl.put_nowait(json.dumps(msg.body))


class SessionManager:
    """Owns live sessions and their sim-loop tasks."""

    def __init__(self, scenario: Scenario, seed: int = 0, realtime: bool = True,
                 max_sessions: int = 4, grace_s: float = 30.0):
        self.scenario = scenario
        self.seed = seed
        self.realtime = realtime
        self.max_sessions = max_sessions
        self.grace_s = grace_s
        self.sessions: dict[str, SessionCore] = {}
        self.clients: dict[str, list[_Client]] = {}
        self.cmd_queues: dict[str, asyncio.Queue] = {}
        self._tasks: dict[str, asyncio.Task] = {}

    def get_or_create(self, token: Optional[str]) -> SessionCore:
        if token:
            if token not in self.sessions:
                raise UnknownSession(f"no session {token[:8]}...")
            return self.sessions[token]
        if len(self.sessions) >= self.max_sessions:
            raise SessionLimitReached(f"limit {self.max_sessions} reached")
        core = SessionCore(self.scenario, seed=self.seed)
        self.sessions[core.token] = core
        self.clients[core.token] = []
        self.cmd_queues[core.token] = asyncio.Queue()
        self._tasks[core.token] = asyncio.create_task(self._sim_loop(core))
        return core

    async def _sim_loop(self, core: SessionCore) -> None:
        dt = core.scenario.dt_s
        idle_for = 0.0
        while True:
            has_clients = bool(self.clients.get(core.token))
            if not has_clients:
                idle_for += dt
            else:
                idle_for = 0.0
            paused = idle_for > self.grace_s
            msgs: list[SessionMessage] = []
            q = self.cmd_queues[core.token]
            if not q.empty():
                msgs.extend(core.apply_command(q.get_nowait()))
            if not paused:
                msgs.extend(core.tick())
            for client in list(self.clients.get(core.token, [])):
                for m in msgs:
                    client.push(m)
            if self.realtime:
                await asyncio.sleep(dt)
            else:
                await asyncio.sleep(0)

    async def handle(self, ws) -> None:
        import json
        from urllib.parse import parse_qs, urlparse
        try:
            path = ws.request.path if hasattr(ws, "request") else ws.path
        except AttributeError:
            path = "/"
        qs = parse_qs(urlparse(path).query)
        token = qs.get("session", [None])[0]
        try:
            core = self.get_or_create(token)
        except (UnknownSession, SessionLimitReached) as e:
            await ws.send(json.dumps({"kind": "error", "seq": 0, "message": str(e)}))
            await ws.close()
            return
        client = _Client(ws)
        self.clients[core.token].append(client)
        hello = {"kind": "hello", "seq": 0, "session": core.token,
                 "scenario_name": core.scenario.name, "tick_rate_hz": 1.0 / core.scenario.dt_s,
                 "snapshot": core.snapshot()}
        await ws.send(json.dumps(hello))

        async def writer():
            while True:
                if not client.ctrl.empty():
                    await ws.send(client.ctrl.get_nowait())
                elif not client.frames.empty():
                    await ws.send(client.frames.get_nowait())
                else:
                    await asyncio.sleep(0.002)

        wtask = asyncio.create_task(writer())
        try:
            async for raw in ws:
                if isinstance(raw, bytes):
                    continue
                try:
                    cmd = json.loads(raw)
                except json.JSONDecodeError:
                    client.push(SessionMessage(seq=0, kind="error",
                                               body={"kind": "error", "seq": 0,
                                                     "message": "malformed command"}))
                    continue
                if cmd.get("kind") == "snapshot":
                    client.push(SessionMessage(seq=0, kind="snapshot",
                                               body={"kind": "snapshot", "seq": 0,
                                                     **core.snapshot()}))
                else:
                    await self.cmd_queues[core.token].put(cmd)
        finally:
            wtask.cancel()
            self.clients[core.token].remove(client)


async def serve_async(scenario: Scenario, host: str = "127.0.0.1", port: int = 8765,
                      seed: int = 0, realtime: bool = True) -> None:
    import websockets
    manager = SessionManager(scenario, seed=seed, realtime=realtime)
    try:
        async with websockets.serve(manager.handle, host, port, max_size=2 ** 22):
            await asyncio.Future()
    except OSError as e:
        raise BindFailure(f"cannot bind {host}:{port}: {e}") from e


def serve(scenario: Scenario, host: str = "127.0.0.1", port: int = 8765,
          seed: int = 0, realtime: bool = True) -> None:
    """Blocking entry point used by the CLI."""
    asyncio.run(serve_async(scenario, host=host, port=port, seed=seed, realtime=realtime))
