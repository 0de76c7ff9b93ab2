"""Camera plane: pan/tilt control on the server path, frames P2P-preferred.

Frame payloads are opaque, deterministically synthesized bytes at the
quality preset's rate.  Streaming always counts as a large transfer, so the
path decision attempts a hole punch first and falls back to the relay; the
control plane never leaves the server path, even while data flows directly.
Received chunks can be appended to pluggable sinks in a simple indexed log.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .kernel import Simulator
from .nat import NatProfile, PathChoice, decide_path
from .rendezvous import PunchFailed, Rendezvous
from .wan import EnvelopeKind, WanEnvelope, WanFabric

PAN_LIMIT_DEG = 170.0
TILT_LIMIT_DEG = 90.0

QUALITY_PRESETS = {
    "low": {"bytes_per_s": 8 * 1024, "chunk_bytes": 2048},
    "high": {"bytes_per_s": 64 * 1024, "chunk_bytes": 2048},
}

# payload size fed to the path decision: one send window of chunks
STREAM_WINDOW_CHUNKS = 8


@dataclass(frozen=True)
class FrameChunk:
    stream_id: int
    seq: int
    timestamp: int
    payload: bytes


def synth_payload(stream_id: int, seq: int, size: int) -> bytes:
    seedling = (stream_id * 2654435761 + seq * 40503) & 0xFFFFFFFF
    return bytes(((seedling >> (i % 24)) + i) & 0xFF for i in range(size))


# -- chunk log file format: len(4) stream_id(8) seq(4) timestamp(8) payload ----

def write_chunk_record(fh, chunk: FrameChunk) -> None:
    fh.write(struct.pack(">IQIQ", len(chunk.payload), chunk.stream_id,
                         chunk.seq, chunk.timestamp))
    fh.write(chunk.payload)


def read_chunk_log(path) -> list[FrameChunk]:
    chunks = []
    with open(path, "rb") as fh:
        while True:
            header = fh.read(24)
            if not header:
                break
            if len(header) < 24:
                raise ValueError("truncated chunk log header")
            size, stream_id, seq, ts = struct.unpack(">IQIQ", header)
            payload = fh.read(size)
            if len(payload) < size:
                raise ValueError("truncated chunk payload")
            chunks.append(FrameChunk(stream_id=stream_id, seq=seq,
                                     timestamp=ts, payload=payload))
    return chunks


class FileSink:
    def __init__(self, path):
        self.path = path
        self._fh = open(path, "wb")
        self.records = 0

    def write(self, chunk: FrameChunk) -> None:
        write_chunk_record(self._fh, chunk)
        self._fh.flush()
        self.records += 1

    def close(self) -> None:
        self._fh.close()


class MemorySink:
    """Generic remote-storage stand-in; can be told to fail for tests."""

    def __init__(self, fail_after: int | None = None):
        self.chunks: list[FrameChunk] = []
        self.fail_after = fail_after

    def write(self, chunk: FrameChunk) -> None:
        if self.fail_after is not None and len(self.chunks) >= self.fail_after:
            raise IOError("sink write failure")
        self.chunks.append(chunk)


class StreamReceiver:
    """Viewer-side chunk collector: ordered-with-gaps, pluggable sinks."""

    def __init__(self, sim: Simulator, owner: str, stream_id: int):
        self.sim = sim
        self.owner = owner
        self.stream_id = stream_id
        self.last_seq = 0
        self.received = 0
        self.bytes = 0
        self.gaps = 0
        self.out_of_order = 0
        self.sinks: list = []
        self.path = None

    def attach_sink(self, sink) -> None:
        self.sinks.append(sink)

    def on_envelope(self, env: WanEnvelope) -> None:
        payload = env.payload
        chunk = FrameChunk(stream_id=payload["stream_id"], seq=payload["seq"],
                           timestamp=payload["ts"],
                           payload=bytes.fromhex(payload["data"]))
        self.path = env.path
        self.on_chunk(chunk)

    def on_chunk(self, chunk: FrameChunk) -> None:
        if chunk.seq <= self.last_seq:
            self.out_of_order += 1
            return
        self.gaps += chunk.seq - self.last_seq - 1
        self.last_seq = chunk.seq
        self.received += 1
        self.bytes += len(chunk.payload)
        self.sim.emit(self.owner, "cam.chunk_rx", stream_id=chunk.stream_id,
                      seq=chunk.seq, path=self.path or "unknown")
        for sink in self.sinks:
            try:
                sink.write(chunk)
            except Exception as exc:
                self.sim.emit(self.owner, "sink.error", stream_id=chunk.stream_id,
                              seq=chunk.seq, error=type(exc).__name__)


@dataclass
class _Stream:
    stream_id: int
    viewer: str
    quality: str
    path: PathChoice
    channel: object = None
    seq: int = 0
    timer: object = None
    running: bool = True


class Camera:
    def __init__(self, sim: Simulator, rendezvous: Rendezvous, fabric: WanFabric,
                 camera_id: str, *, nat: NatProfile, secret: str = "cam-secret"):
        self.sim = sim
        self.rendezvous = rendezvous
        self.fabric = fabric
        self.camera_id = camera_id
        self.principal = f"cam:{camera_id}"
        self.nat = nat
        self.pan_deg = 0.0
        self.tilt_deg = 0.0
        self.streams: dict[int, _Stream] = {}
        self.event_sink = None  # fn(kind, payload), wired to the gateway bus
        self._counter = 0
        self._stream_counter = 0
        if self.principal not in rendezvous.users:
            rendezvous.register_user(self.principal, secret)
        rendezvous.login(self.principal, secret, nat, self._receive)
        self._heartbeat()

    def _heartbeat(self) -> None:
        if self.rendezvous.presence(self.principal) == "online":
            self.rendezvous.heartbeat(self.principal)
        self.sim.schedule_in(30_000_000, self._heartbeat)

    def _next_id(self) -> str:
        self._counter += 1
        return f"{self.principal}:{self._counter}"

    def _emit_event(self, kind: str, payload: dict) -> None:
        if self.event_sink is not None:
            self.event_sink(kind, payload)

    def _reply(self, to: str, payload: dict) -> None:
        env = WanEnvelope(msg_id=self._next_id(), kind=EnvelopeKind.CAM_CTRL,
                          frm=self.principal, to=to, payload=payload)
        self.fabric.deliver(self.rendezvous.on_envelope, env)

    # -- control plane (always via the server path) ------------------------------

    def _receive(self, env: WanEnvelope) -> None:
        if env.kind != EnvelopeKind.CAM_CTRL:
            return
        op = env.payload.get("op")
        if op == "control":
            result = self.apply_control(env.payload.get("action", ""),
                                        float(env.payload.get("magnitude_deg", 0.0)))
            result["about"] = env.msg_id
            self._reply(env.frm, result)
        elif op == "start_stream":
            result = self.start_stream(env.frm, env.payload.get("quality", "low"))
            result["about"] = env.msg_id
            self._reply(env.frm, result)
        elif op == "stop_stream":
            self.stop_stream(env.payload.get("stream_id"))
            self._reply(env.frm, {"about": env.msg_id, "stopped": True})

    def apply_control(self, action: str, magnitude_deg: float) -> dict:
        clamped = False
        if action in ("rotate", "left", "right"):
            delta = -magnitude_deg if action == "left" else magnitude_deg
            target = self.pan_deg + delta
            self.pan_deg = max(-PAN_LIMIT_DEG, min(PAN_LIMIT_DEG, target))
            clamped = self.pan_deg != target
        elif action in ("up", "down"):
            delta = -magnitude_deg if action == "down" else magnitude_deg
            target = self.tilt_deg + delta
            self.tilt_deg = max(-TILT_LIMIT_DEG, min(TILT_LIMIT_DEG, target))
            clamped = self.tilt_deg != target
        self.sim.emit(self.principal, "cam.ctrl", action=action,
                      magnitude=magnitude_deg, pan=self.pan_deg,
                      tilt=self.tilt_deg, clamped=clamped)
        result = {"pan_deg": self.pan_deg, "tilt_deg": self.tilt_deg,
                  "clamped": clamped}
        if clamped:
            result["warning"] = "movement clamped at the mechanical limit"
        self._emit_event("camera_orientation", {"camera_id": self.camera_id, **result})
        return result

    # -- data plane ------------------------------------------------------------------

    def start_stream(self, viewer: str, quality: str) -> dict:
        if quality not in QUALITY_PRESETS:
            return {"error": "UnknownQuality"}
        viewer_session = self.rendezvous.sessions.get(viewer)
        if viewer_session is None:
            return {"error": "Unavailable"}
        preset = QUALITY_PRESETS[quality]
        window_bytes = preset["chunk_bytes"] * STREAM_WINDOW_CHUNKS
        decision = decide_path(window_bytes, self.nat, viewer_session.nat)
        self.sim.emit(self.principal, "path.decision",
                      payload_size=decision.payload_size,
                      nat_a=decision.nat_a.value, nat_b=decision.nat_b.value,
                      decision=decision.decision.value)
        channel = None
        if decision.decision != PathChoice.RELAY:
            # large transfer: request the punch first, relay only if it fails
            try:
                channel = self.rendezvous.broker_p2p(self.principal, viewer)
                channel.attach(self.principal, self._receive)
                channel.attach(viewer, viewer_session.receive)
            except PunchFailed:
                channel = None
        self._stream_counter += 1
        stream_id = self._stream_counter
        stream = _Stream(stream_id=stream_id, viewer=viewer, quality=quality,
                         path=decision.decision, channel=channel)
        self.streams[stream_id] = stream
        interval_us = round(preset["chunk_bytes"] / preset["bytes_per_s"] * 1_000_000)
        stream.timer = self.sim.schedule_in(interval_us,
                                            lambda: self._chunk_tick(stream, interval_us))
        path_label = "p2p" if channel is not None else "relay"
        self.sim.emit(self.principal, "cam.stream_start", stream_id=stream_id,
                      viewer=viewer, quality=quality, path=path_label)
        self._emit_event("camera_stream", {"camera_id": self.camera_id,
                                           "stream_id": stream_id,
                                           "viewer": viewer, "quality": quality,
                                           "path": path_label,
                                           "decision": decision.decision.value})
        return {"stream_id": stream_id, "path": path_label,
                "decision": decision.decision.value}

    def _chunk_tick(self, stream: _Stream, interval_us: int) -> None:
        if not stream.running:
            return
        preset = QUALITY_PRESETS[stream.quality]
        stream.seq += 1
        payload = synth_payload(stream.stream_id, stream.seq, preset["chunk_bytes"])
        env = WanEnvelope(msg_id=self._next_id(), kind=EnvelopeKind.CAM_DATA,
                          frm=self.principal, to=stream.viewer,
                          payload={"stream_id": stream.stream_id, "seq": stream.seq,
                                   "ts": self.sim.now, "size": len(payload),
                                   "data": payload.hex()})
        self.sim.emit(self.principal, "cam.chunk_tx", stream_id=stream.stream_id,
                      seq=stream.seq)
        if stream.channel is not None:
            stream.channel.send(self.principal, env)
        else:
            self.fabric.deliver(self.rendezvous.on_envelope, env)
        stream.timer = self.sim.schedule_in(interval_us,
                                            lambda: self._chunk_tick(stream, interval_us))

    def stop_stream(self, stream_id: int) -> None:
        stream = self.streams.get(stream_id)
        if stream is None:
            return
        stream.running = False
        if stream.timer is not None:
            self.sim.cancel(stream.timer)
        if stream.channel is not None:
            stream.channel.close()
        self.sim.emit(self.principal, "cam.stream_stop", stream_id=stream_id)
