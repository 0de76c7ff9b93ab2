from hearth.camera import (
    FileSink,
    FrameChunk,
    MemorySink,
    read_chunk_log,
    synth_payload,
)
from hearth.kernel import SECOND
from hearth.scenario import World


def camera_world(user_nat="open", cam_nat="open", seed=20):
    world = World(seed=seed)
    world.add_camera("cam1", nat=cam_nat)
    alice = world.add_user("alice", secret="pw", nat=user_nat)
    world.run_for(0.2)
    alice.login(gateway_secret="pw")
    world.run_for(0.5)
    return world, alice


def start_stream(world, alice, quality="low"):
    got = {}

    def on_start(receiver, payload):
        got["receiver"] = receiver
        got["payload"] = payload

    alice.start_watching("cam1", quality, done=on_start)
    world.run_for(0.5)
    return got["receiver"], got["payload"]


def test_open_nats_stream_p2p_with_zero_server_payload():
    world, alice = camera_world()
    before = world.rendezvous.relayed_payload_bytes
    receiver, payload = start_stream(world, alice)
    assert payload["path"] == "p2p"
    assert payload["decision"] == "p2p_direct"
    world.run_for(10.0)
    assert receiver.received >= 35
    assert receiver.gaps == 0
    assert receiver.path == "p2p"
    # no frame payload ever crossed the relay
    assert world.rendezvous.relayed_payload_bytes - before < 1024


def test_symmetric_pair_falls_back_to_relay():
    world, alice = camera_world(user_nat="symmetric", cam_nat="symmetric")
    before = world.rendezvous.relayed_payload_bytes
    receiver, payload = start_stream(world, alice)
    assert payload["path"] == "relay"
    assert payload["decision"] == "p2p_failed_fallback_relay"
    world.run_for(5.0)
    assert receiver.received >= 15
    assert world.rendezvous.relayed_payload_bytes - before > 15 * 2048
    punches = world.sim.trace.filter(kind="p2p.punch")
    assert punches and punches[-1].detail["success"] is False


def test_ten_seconds_low_quality_is_80KiB_contiguous():
    world, alice = camera_world()
    receiver, _ = start_stream(world, alice)
    t0 = world.sim.now
    world.sim.run_until(t0 + 10 * SECOND)
    # 8KiB/s in: 2048-byte chunks every 250ms
    assert 38 <= receiver.received <= 41
    assert receiver.bytes == receiver.received * 2048
    assert abs(receiver.bytes - 80 * 1024) <= 3 * 2048
    assert receiver.gaps == 0


def test_control_clamps_and_rides_server_path():
    world, alice = camera_world()
    receiver, _ = start_stream(world, alice)
    got = []
    alice.camera_control("cam1", "rotate", 30.0, done=lambda p, lat: got.append(p))
    world.run_for(0.5)
    assert got[0]["pan_deg"] == 30.0 and not got[0]["clamped"]
    alice.camera_control("cam1", "rotate", 200.0, done=lambda p, lat: got.append(p))
    world.run_for(0.5)
    assert got[1]["pan_deg"] == 170.0 and got[1]["clamped"]
    assert "warning" in got[1]
    alice.camera_control("cam1", "down", 30.0, done=lambda p, lat: got.append(p))
    world.run_for(0.5)
    assert got[2]["tilt_deg"] == -30.0
    # control envelopes traverse the relay even while data is P2P
    ctrl_relays = [e for e in world.sim.trace.filter(kind="relay.deliver")
                   if e.detail["env_kind"] == "CAM_CTRL"]
    assert len(ctrl_relays) >= 6  # three requests plus three replies
    cam = world.cameras["cam1"]
    for stream in cam.streams.values():
        if stream.channel is not None:
            # the p2p channel carried only frame data
            assert stream.channel.bytes_by_end["cam:cam1"] == receiver.bytes


def test_plane_separation_chunks_do_not_touch_registry():
    world, alice = camera_world()
    before = dict(world.coordinator.registry.slaves)
    receiver, _ = start_stream(world, alice)
    world.run_for(5.0)
    assert world.coordinator.registry.slaves == before


def test_save_frames_to_file_and_replay(tmp_path):
    world, alice = camera_world()
    receiver, _ = start_stream(world, alice)
    sink = FileSink(tmp_path / "stream.log")
    receiver.attach_sink(sink)
    world.run_for(10.0)
    sink.close()
    replay = read_chunk_log(tmp_path / "stream.log")
    assert len(replay) == sink.records
    seqs = [c.seq for c in replay]
    assert seqs == sorted(seqs)
    for chunk in replay:
        assert chunk.payload == synth_payload(chunk.stream_id, chunk.seq, 2048)


def test_sink_failure_does_not_stop_stream():
    world, alice = camera_world()
    receiver, _ = start_stream(world, alice)
    sink = MemorySink(fail_after=3)
    receiver.attach_sink(sink)
    world.run_for(5.0)
    assert len(sink.chunks) == 3
    assert receiver.received > 10  # stream kept flowing
    errors = world.sim.trace.filter(kind="sink.error")
    assert errors and errors[0].detail["error"] == "OSError"


def test_gaps_equal_injected_relay_losses():
    from hearth.wan import WanLossWindow

    world, alice = camera_world(user_nat="symmetric", cam_nat="symmetric", seed=21)
    receiver, payload = start_stream(world, alice)
    assert payload["path"] == "relay"
    t0 = world.sim.now
    world.fabric.loss_windows.append(WanLossWindow(t0, t0 + 8 * SECOND, 0.25))
    world.run_for(10.0)
    drops = [e for e in world.sim.trace.events
             if e.kind == "wan.drop" and e.entity == "cam:cam1"]
    assert drops, "no loss injected?"
    assert receiver.gaps == len(drops)


def test_offline_viewer_unavailable():
    world = World(seed=22)
    world.add_camera("cam1", nat="open")
    cam = world.cameras["cam1"]
    result = cam.start_stream("nobody", "low")
    assert result["error"] == "Unavailable"
