"""Session server: deterministic core, wire codec, live socket round trip."""
import asyncio
import json

import numpy as np
import pytest

from cannusim.scenario import compact_scenario
from cannusim.service import (KIND_BSCAN, KIND_MICROSCOPE, SessionCore,
                              SessionManager, decode_frame, encode_frame)
from cannusim.world import NeedleModel, Pose3, vein_preset


def centered_scenario():
    """Vein through the scene center, so a frame-center click is on target."""
    sc = compact_scenario(name="centered")
    sc.vein = vein_preset("embryo", axis_point=(0.0, 0.0))
    sc.needle = NeedleModel(tip=Pose3(-1.2, -0.8, 2.25))
    return sc


def center_target_cmd():
    return {"kind": "set_target", "u": 256.0, "v": 256.0, "seq": 1}


def drain_kinds(msgs):
    return [m.kind for m in msgs]


# --- deterministic core -------------------------------------------------------------

def test_set_target_then_start_advances_idle_to_navigating():
    core = SessionCore(compact_scenario(), seed=3)
    assert core.snapshot()["fsm"]["phase"] == "Idle"
    msgs = core.apply_command(center_target_cmd())
    assert any(m.kind == "fsm_state" and m.body["phase"] == "Navigating" for m in msgs)
    msgs = core.apply_command({"kind": "start"})
    assert core.started
    out = core.tick()
    fsm = [m for m in out if m.kind == "fsm_state"][-1]
    assert fsm.body["phase"] in ("Navigating", "ContactSeek")


def test_start_without_target_rejected():
    core = SessionCore(compact_scenario(), seed=3)
    msgs = core.apply_command({"kind": "start"})
    assert msgs[0].kind == "error"
    assert not core.started


def test_key_in_auto_mode_is_manual_only_error():
    core = SessionCore(compact_scenario(), seed=3)
    before = core.snapshot()["fsm"]
    msgs = core.apply_command({"kind": "key", "direction": "+z"})
    assert msgs[0].kind == "error"
    assert "manual-only" in msgs[0].body["message"]
    after = core.snapshot()["fsm"]
    assert before["phase"] == after["phase"]


def test_manual_mode_keys_move_the_needle():
    core = SessionCore(compact_scenario(), seed=3)
    core.apply_command({"kind": "set_mode", "mode": "manual"})
    core.apply_command({"kind": "start"})
    x0 = core.engine.world.needle.tip.x
    core.apply_command({"kind": "key", "direction": "+x"})
    core.tick()
    assert core.engine.world.needle.tip.x > x0


def test_snapshot_pure_without_ticks():
    core = SessionCore(compact_scenario(), seed=3)
    core.apply_command(center_target_cmd())
    a = core.snapshot()
    b = core.snapshot()
    assert a == b


def test_sequence_numbers_gapless_and_increasing():
    core = SessionCore(compact_scenario(), seed=3)
    msgs = core.apply_command(center_target_cmd())
    msgs += core.apply_command({"kind": "start"})
    for _ in range(5):
        msgs += core.tick()
    seqs = [m.seq for m in msgs]
    assert seqs == list(range(1, len(seqs) + 1))


def test_reset_is_only_path_out_of_terminal():
    core = SessionCore(compact_scenario(), seed=3)
    core.apply_command(center_target_cmd())
    core.apply_command({"kind": "start"})
    core.apply_command({"kind": "abort"})
    assert core.snapshot()["fsm"]["phase"] == "Aborted"
    core.apply_command({"kind": "start"})
    core.tick()
    assert core.snapshot()["fsm"]["phase"] == "Aborted"
    core.apply_command({"kind": "reset"})
    assert core.snapshot()["fsm"]["phase"] == "Idle"


def test_command_script_determinism():
    script = {0: [center_target_cmd()], 2: [{"kind": "start"}]}
    streams = []
    for _ in range(2):
        core = SessionCore(compact_scenario(), seed=9, token="fixed")
        msgs = core.run_script(script, n_ticks=40)
        streams.append([(m.seq, m.kind, m.blob if m.blob else json.dumps(m.body, sort_keys=True))
                        for m in msgs])
    assert streams[0] == streams[1]


def test_full_auto_trial_over_session_emits_result():
    core = SessionCore(centered_scenario(), seed=5)
    script = {0: [center_target_cmd()], 1: [{"kind": "start"}]}
    msgs = core.run_script(script, n_ticks=250)
    results = [m for m in msgs if m.kind == "trial_result"]
    assert len(results) == 1
    assert results[0].body["outcome_class"] == "TP"
    phases = [m.body["phase"] for m in msgs if m.kind == "fsm_state"]
    assert "Navigating" in phases and "Done" in phases


# --- wire codec ------------------------------------------------------------------------

def test_frame_codec_round_trip():
    core = SessionCore(compact_scenario(), seed=3)
    core.tick()
    msgs = core.tick()
    frames = [m for m in msgs if m.is_frame()]
    assert frames, "expected frame messages each tick"
    for m in frames:
        d = decode_frame(m.blob)
        assert d["seq"] == m.seq
        if d["kind"] == KIND_BSCAN:
            assert (d["width"], d["height"]) == (224, 224)
            assert d["scale"] == 0.0357
        else:
            assert d["kind"] == KIND_MICROSCOPE
            assert (d["width"], d["height"]) == (512, 512)
            assert d["scale"] == 0.0586
        assert len(d["pixels"]) == d["width"] * d["height"]


def test_frame_codec_rejects_bad_magic():
    core = SessionCore(compact_scenario(), seed=3)
    msgs = core.tick()
    blob = bytearray([m for m in msgs if m.is_frame()][0].blob)
    blob[0] ^= 0xFF
    with pytest.raises(ValueError):
        decode_frame(bytes(blob))


# --- live websocket round trip -----------------------------------------------------------

def test_websocket_round_trip():
    import websockets

    async def run() -> dict:
        manager = SessionManager(centered_scenario(), seed=4, realtime=False)
        seen = {"frames": 0, "bscan_ok": True, "phases": [], "hello": None}
        async with websockets.serve(manager.handle, "127.0.0.1", 0, max_size=2 ** 22) as server:
            port = server.sockets[0].getsockname()[1]
            async with websockets.connect(f"ws://127.0.0.1:{port}/", max_size=2 ** 22) as ws:
                hello = json.loads(await ws.recv())
                assert hello["kind"] == "hello"
                seen["hello"] = hello
                await ws.send(json.dumps(center_target_cmd()))
                await ws.send(json.dumps({"kind": "start"}))
                for _ in range(300):
                    raw = await asyncio.wait_for(ws.recv(), timeout=5.0)
                    if isinstance(raw, bytes):
                        d = decode_frame(raw)
                        seen["frames"] += 1
                        if d["kind"] == KIND_BSCAN and (d["width"], d["height"]) != (224, 224):
                            seen["bscan_ok"] = False
                    else:
                        body = json.loads(raw)
                        if body["kind"] == "fsm_state":
                            seen["phases"].append(body["phase"])
                        if body["kind"] == "trial_result":
                            seen["result"] = body
                            break
                # reconnect with the session token: snapshot must render state
                token = seen["hello"]["session"]
                async with websockets.connect(
                        f"ws://127.0.0.1:{port}/?session={token}", max_size=2 ** 22) as ws2:
                    hello2 = json.loads(await ws2.recv())
                    assert hello2["session"] == token
                    assert hello2["snapshot"]["fsm"]["phase"] in ("Done", "FullRetract",
                                                                  "VerifyPuncture", "Retracting",
                                                                  "PunctureStroke", "ContactSeek")
        return seen

    seen = asyncio.run(run())
    assert seen["frames"] > 10
    assert seen["bscan_ok"]
    assert "Navigating" in seen["phases"]
    assert seen["result"]["outcome_class"] == "TP"


def test_unknown_session_token_rejected():
    import websockets

    async def run():
        manager = SessionManager(compact_scenario(), seed=4, realtime=False)
        async with websockets.serve(manager.handle, "127.0.0.1", 0) as server:
            port = server.sockets[0].getsockname()[1]
            async with websockets.connect(f"ws://127.0.0.1:{port}/?session=deadbeef") as ws:
                body = json.loads(await ws.recv())
                assert body["kind"] == "error"

    asyncio.run(run())


def test_backpressure_drops_frames_never_control():
    from cannusim.service import SessionMessage, _Client

    async def run():
        client = _Client(ws=None)
        # saturate the frame queue (maxsize 8), then keep pushing
        for i in range(20):
            client.push(SessionMessage(seq=i + 1, kind="frame", blob=b"x" * 10, droppable=True))
        for i in range(5):
            client.push(SessionMessage(seq=100 + i, kind="fsm_state",
                                       body={"kind": "fsm_state", "seq": 100 + i}))
        assert client.frames.qsize() == 8
        assert client.dropped == 12
        assert client.ctrl.qsize() == 5  # state messages are never dropped

    asyncio.run(run())


def test_session_pauses_without_clients_and_resumes():
    from cannusim.service import SessionManager, _Client

    async def run():
        manager = SessionManager(centered_scenario(), seed=6, realtime=False, grace_s=0.3)
        core = manager.get_or_create(None)
        await manager.cmd_queues[core.token].put(center_target_cmd())
        await manager.cmd_queues[core.token].put({"kind": "start"})
        # no clients attached: the loop runs through the grace budget then pauses
        await asyncio.sleep(0.1)
        frozen = core.engine.world.tick
        await asyncio.sleep(0.1)
        assert core.engine.world.tick == frozen, "sim loop should pause with no clients"
        # attaching a client resumes ticking
        client = _Client(ws=None)
        manager.clients[core.token].append(client)
        await asyncio.sleep(0.1)
        assert core.engine.world.tick > frozen
        task = manager._tasks[core.token]
        task.cancel()

    asyncio.run(run())


def test_session_limit_enforced():
    from cannusim.errors import SessionLimitReached
    from cannusim.service import SessionManager

    async def run():
        manager = SessionManager(centered_scenario(), seed=6, realtime=False, max_sessions=1)
        core = manager.get_or_create(None)
        with pytest.raises(SessionLimitReached):
            manager.get_or_create(None)
        assert manager.get_or_create(core.token) is core
        manager._tasks[core.token].cancel()

    asyncio.run(run())
