"""Serve mode: the simulation paced against the wall clock, behind a web API.

One thread owns the simulation; HTTP/WebSocket handlers marshal work onto it
through an inbox and never touch simulation state directly.  The gateway
event bus fans out to every connected WebSocket as JSON ``{t, kind,
payload}`` envelopes.  A companion TCP endpoint speaks the rendezvous wire
format: 4-byte big-endian length, then a UTF-8 JSON envelope.
"""

from __future__ import annotations

import json
import queue
import socket
import socketserver
import struct
import threading
import time
from concurrent.futures import Future

from .devices import QUERY_STATE, SET_ACTUATOR, encode_tlv
from .kernel import us_from_s
from .scenario import build_world
from .wan import WanEnvelope

PANEL_USER = "panel"
PANEL_SECRET = "panel-secret"


class ServeRuntime:
    """Owns the simulation thread and paces virtual time against wall time."""

    def __init__(self, world, *, speed: float = 1.0, trace_path=None):
        self.world = world
        self.speed = speed
        self.trace_path = trace_path
        self.inbox: queue.Queue = queue.Queue()
        self.subscribers: list[queue.Queue] = []
        self._subs_lock = threading.Lock()
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, name="sim", daemon=True)
        self.panel = None
        world.gateway.event_bus.append(self._fanout)

    # -- event fan-out (called on the sim thread) ------------------------------

    def _fanout(self, event: dict) -> None:
        with self._subs_lock:
            targets = list(self.subscribers)
        for q in targets:
            q.put(event)

    def subscribe(self) -> queue.Queue:
        q = queue.Queue()
        with self._subs_lock:
            self.subscribers.append(q)
        return q

    def unsubscribe(self, q: queue.Queue) -> None:
        with self._subs_lock:
            if q in self.subscribers:
                self.subscribers.remove(q)

    # -- marshaling -------------------------------------------------------------

    def call(self, fn, timeout: float = 10.0):
        """Run `fn()` on the simulation thread and return its result."""
        future: Future = Future()

        def task():
            try:
                future.set_result(fn())
            except Exception as exc:  # surfaced to the API caller
                future.set_exception(exc)

        self.inbox.put(task)
        return future.result(timeout=timeout)

    # -- lifecycle ----------------------------------------------------------------

    def start(self) -> None:
        self._setup_panel_user()
        self._thread.start()

    def _setup_panel_user(self) -> None:
        world = self.world
        if PANEL_USER not in world.clients:
            client = world.add_user(PANEL_USER, secret=PANEL_SECRET, admin=True)
        else:
            client = world.clients[PANEL_USER]
        self.panel = client

        def login():
            client.login(gateway_secret=PANEL_SECRET,
                         done=lambda token, err: client.subscribe_alarms("push"))

        world.sim.schedule_in(0, login)

    def _loop(self) -> None:
        sim = self.world.sim
        wall0 = time.monotonic()
        sim0 = sim.now
        while not self._stop.is_set():
            while True:
                try:
                    task = self.inbox.get_nowait()
                except queue.Empty:
                    break
                task()
            target = sim0 + int((time.monotonic() - wall0) * self.speed * 1_000_000)
            if target > sim.now:
                sim.run_until(target)
            time.sleep(0.002)

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(timeout=5.0)
        if self.trace_path:
            self.world.sim.trace.write(self.trace_path)


def _tlv_from_body(body: dict) -> bytes:
    if "tlv" in body:
        return bytes.fromhex(body["tlv"])
    action = body.get("action", {})
    if "set" in action:
        return encode_tlv(SET_ACTUATOR, bytes(action["set"]))
    if action.get("query"):
        return encode_tlv(QUERY_STATE, b"")
    raise ValueError("command body needs 'tlv' hex or an 'action' object")


def build_app(runtime: ServeRuntime):
    from fastapi import FastAPI, WebSocket, WebSocketDisconnect
    from fastapi.responses import JSONResponse

    app = FastAPI(title="hearth gateway", docs_url=None, redoc_url=None)
    world = runtime.world

    @app.get("/healthz")
    def healthz():
        return {"ok": True, "sim_t_us": world.sim.now,
                "panel_ready": runtime.panel.token is not None}

    @app.get("/devices")
    def devices():
        return runtime.call(world.gateway.list_devices)

    @app.post("/devices/{addr}/command")
    def device_command(addr: int, body: dict):
        try:
            tlv = _tlv_from_body(body)
        except (ValueError, KeyError) as exc:
            return JSONResponse({"error": str(exc)}, status_code=400)
        msg_id = runtime.call(lambda: runtime.panel.send_command(addr, tlv))
        return {"msg_id": msg_id}

    @app.get("/config")
    def get_config():
        return runtime.call(lambda: world.gateway.config.redacted())

    @app.put("/config/{key}")
    def put_config(key: str, body: dict):
        def apply():
            return runtime.panel.admin("set_config",
                                       {"key": key, "value": body.get("value")})
        msg_id = runtime.call(apply)
        return {"msg_id": msg_id}

    @app.get("/alarms")
    def alarms(page: int = 0, page_size: int = 50):
        def snapshot():
            newest = list(reversed(world.gateway.alarm_log))
            return {"alarms": newest[page * page_size:(page + 1) * page_size],
                    "total": len(world.gateway.alarm_log)}
        return runtime.call(snapshot)

    @app.patch("/alarms/{alarm_id}/ack")
    def ack_alarm(alarm_id: str):
        def apply():
            for entry in world.gateway.alarm_log:
                if entry["alarm_id"] == alarm_id:
                    entry["acknowledged"] = True
                    world.gateway.post_event("alarm_ack", {"alarm_id": alarm_id})
                    return {"acknowledged": alarm_id}
            return {"error": "UnknownAlarm"}
        result = runtime.call(apply)
        status = 404 if "error" in result else 200
        return JSONResponse(result, status_code=status)

    @app.get("/cameras")
    def cameras():
        def snapshot():
            return [{"camera_id": cam_id, "pan_deg": cam.pan_deg,
                     "tilt_deg": cam.tilt_deg,
                     "streams": [{"stream_id": s.stream_id, "quality": s.quality,
                                  "path": "p2p" if s.channel else "relay",
                                  "running": s.running}
                                 for s in cam.streams.values()]}
                    for cam_id, cam in sorted(world.cameras.items())]
        return runtime.call(snapshot)

    @app.post("/cameras/{camera_id}/control")
    def camera_control(camera_id: str, body: dict):
        msg_id = runtime.call(lambda: runtime.panel.camera_control(
            camera_id, body.get("action", "rotate"),
            float(body.get("magnitude_deg", 0.0))))
        return {"msg_id": msg_id}

    @app.post("/cameras/{camera_id}/stream")
    def camera_stream(camera_id: str, body: dict):
        quality = body.get("quality", "low")

        def start():
            def tap(receiver, payload):
                if receiver is None:
                    return
                original = receiver.on_chunk

                def counting(chunk):
                    original(chunk)
                    world.gateway.post_event("camera_chunk", {
                        "camera_id": camera_id, "stream_id": chunk.stream_id,
                        "seq": chunk.seq, "path": receiver.path,
                        "bytes": len(chunk.payload), "gaps": receiver.gaps})

                receiver.on_chunk = counting
            runtime.panel.start_watching(camera_id, quality, done=tap)
            return {"requested": True}

        return runtime.call(start)

    @app.websocket("/events")
    async def events(ws: WebSocket):
        import asyncio

        await ws.accept()
        q = runtime.subscribe()
        try:
            while True:
                try:
                    event = q.get_nowait()
                except queue.Empty:
                    await asyncio.sleep(0.01)
                    continue
                await ws.send_text(json.dumps(event))
        except (WebSocketDisconnect, RuntimeError):
            pass
        finally:
            runtime.unsubscribe(q)

    return app


# -- rendezvous wire endpoint: 4-byte BE length + UTF-8 JSON ---------------------


def read_wire_frame(sock) -> dict | None:
    header = b""
    while len(header) < 4:
        chunk = sock.recv(4 - len(header))
        if not chunk:
            return None
        header += chunk
    (length,) = struct.unpack(">I", header)
    body = b""
    while len(body) < length:
        chunk = sock.recv(length - len(body))
        if not chunk:
            return None
        body += chunk
    return json.loads(body.decode("utf-8"))


def write_wire_frame(sock, obj: dict) -> None:
    body = json.dumps(obj, separators=(",", ":")).encode("utf-8")
    sock.sendall(struct.pack(">I", len(body)) + body)


class _WireHandler(socketserver.BaseRequestHandler):
    def handle(self):
        runtime: ServeRuntime = self.server.runtime
        world = runtime.world
        principal = None
        outbox: queue.Queue = queue.Queue()
        alive = threading.Event()
        alive.set()

        def writer():
            while alive.is_set():
                try:
                    obj = outbox.get(timeout=0.2)
                except queue.Empty:
                    continue
                try:
                    write_wire_frame(self.request, obj)
                except OSError:
                    alive.clear()

        writer_thread = threading.Thread(target=writer, daemon=True)
        writer_thread.start()
        try:
            while alive.is_set():
                try:
                    obj = read_wire_frame(self.request)
                except (OSError, json.JSONDecodeError):
                    break
                if obj is None:
                    break
                op = obj.get("op")
                if op == "register":
                    def do_register():
                        try:
                            world.rendezvous.register_user(obj["name"], obj["secret"])
                            return {"ok": True}
                        except Exception as exc:
                            return {"ok": False, "error": type(exc).__name__}
                    outbox.put({"reply": runtime.call(do_register), "about": obj.get("id")})
                elif op == "login":
                    from .nat import NatProfile, NatType

                    def do_login():
                        try:
                            world.rendezvous.login(
                                obj["name"], obj["secret"],
                                NatProfile(NatType(obj.get("nat", "open"))),
                                lambda env: outbox.put({"envelope": env.to_dict()}))
                            return {"ok": True}
                        except Exception as exc:
                            return {"ok": False, "error": type(exc).__name__}
                    result = runtime.call(do_login)
                    if result.get("ok"):
                        principal = obj["name"]
                    outbox.put({"reply": result, "about": obj.get("id")})
                elif op == "envelope":
                    env = WanEnvelope.from_dict(obj["envelope"])

                    def do_route(env=env):
                        world.fabric.deliver(world.rendezvous.on_envelope, env)
                        return {"ok": True}
                    outbox.put({"reply": runtime.call(do_route), "about": obj.get("id")})
                elif op == "heartbeat":
                    if principal is not None:
                        runtime.call(lambda: world.rendezvous.heartbeat(principal))
                    outbox.put({"reply": {"ok": True}, "about": obj.get("id")})
                else:
                    outbox.put({"reply": {"ok": False, "error": "UnknownOp"},
                                "about": obj.get("id")})
        finally:
            alive.clear()
            if principal is not None:
                try:
                    runtime.call(lambda: world.rendezvous.logout(principal))
                except Exception:
                    pass


class WireServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


def _port_free(host: str, port: int) -> bool:
    probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        probe.bind((host, port))
    except OSError:
        return False
    finally:
        probe.close()
    return True


def serve_forever(doc: dict, *, host: str, port: int, speed: float = 1.0,
                  trace_path=None, wire_port: int | None = None) -> int:
    import uvicorn

    wire_port = wire_port if wire_port is not None else port + 1
    if not _port_free(host, port) or not _port_free(host, wire_port):
        print(f"bind failure: {host}:{port} (wire {wire_port}) unavailable")
        return 3

    world = build_world(doc)
    runtime = ServeRuntime(world, speed=speed, trace_path=trace_path)
    runtime.start()
    app = build_app(runtime)

    wire = WireServer((host, wire_port), _WireHandler)
    wire.runtime = runtime
    wire_thread = threading.Thread(target=wire.serve_forever, daemon=True)
    wire_thread.start()

    config = uvicorn.Config(app, host=host, port=port, log_level="warning")
    server = uvicorn.Server(config)
    try:
        server.run()  # returns after SIGINT/SIGTERM
    except KeyboardInterrupt:
        pass
    finally:
        wire.shutdown()
        runtime.stop()
    return 0
