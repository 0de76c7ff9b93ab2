"""Self-organized star network: discovery, join, downlink routing, slots.

The coordinator (address 0x00) beacons every superframe, answers discovery
probes, assigns the lowest free slave address on join, and queues downlink
payloads for sleeping devices until they poll (the acknowledgment of any
uplink frame carries the pending-frame count, so a device knows whether to
stay awake).  Join and discovery exchanges are budgeted end to end: the
coordinator times its response so a probe answered on an idle channel
completes in ``discovery_latency`` and a join in ``join_latency``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .frame import (
    BROADCAST_ADDR,
    COORDINATOR_ADDR,
    Frame,
    FrameType,
    UNASSIGNED_ADDR,
    WILDCARD_NET,
    encode,
)
from .kernel import Simulator
from .mac import MacNode, MacTimings, SuperframeSchedule
from .medium import Medium
from .radio import airtime

MAX_SLAVES = 254
FIRST_SLAVE_ADDR = 0x01
LAST_SLAVE_ADDR = 0xFE
INDIRECT_QUEUE_CAP = 16

JOIN_OK = 0x00
JOIN_FULL = 0x01


class NetworkError(Exception):
    pass


class UnknownDeviceError(NetworkError):
    pass


class CapacityError(NetworkError):
    pass


class BusyError(NetworkError):
    pass


class JoinTimeout(NetworkError):
    pass


class NoNetworkError(NetworkError):
    pass


@dataclass
class SlaveEntry:
    addr: int
    device_id: int
    sleepy: bool = True
    joined_at: int = 0


@dataclass
class _QueuedDownlink:
    payload: bytes
    done: object = None
    cancelled: bool = False
    frame: object = None  # assigned on first send; retries reuse the same seq


class DownlinkTicket:
    """Handle for a routed downlink; cancel() drops a still-queued payload."""

    def __init__(self, coordinator: "Coordinator", addr: int, entry: _QueuedDownlink):
        self._coordinator = coordinator
        self._addr = addr
        self._entry = entry

    def cancel(self) -> None:
        if not self._entry.cancelled:
            self._entry.cancelled = True
            self._coordinator._drop_cancelled(self._addr)


@dataclass
class NetworkRegistry:
    net_id: int
    coordinator_id: str
    slaves: dict[int, SlaveEntry] = field(default_factory=dict)
    by_device_id: dict[int, int] = field(default_factory=dict)  # device_id -> addr

    def lowest_free_addr(self) -> int | None:
        for addr in range(FIRST_SLAVE_ADDR, LAST_SLAVE_ADDR + 1):
            if addr not in self.slaves:
                return addr
        return None


class Coordinator:
    def __init__(self, sim: Simulator, medium: Medium, mac: MacNode, *,
                 net_id: int = 0x0001, permit_join: bool = True,
                 beacons: bool = True):
        self.sim = sim
        self.medium = medium
        self.mac = mac
        self.net_id = net_id
        self.permit_join = permit_join
        self.timings = mac.timings
        self.registry = NetworkRegistry(net_id=net_id, coordinator_id=mac.node_id)
        self.queues: dict[int, deque[_QueuedDownlink]] = {}
        self.in_flight: set[int] = set()
        self.on_upstream = None  # fn(src_addr, payload_bytes)
        mac.addr = COORDINATOR_ADDR
        mac.net_id = net_id
        mac.on_data = self._on_data
        mac.on_control = self._on_control
        mac.ack_payload_for = self._ack_payload
        beacon_air = airtime(self._beacon_frame().wire_length * 8, mac.profile.rate_bps)
        self.schedule = SuperframeSchedule(sim.now, self.timings, beacon_air)
        mac.schedule = self.schedule
        self._gts_pool = list(range(self.timings.slot_count - self.timings.gts_slot_count,
                                    self.timings.slot_count))
        if beacons:
            self._beacon_tick()

    # -- beaconing and discovery -------------------------------------------

    def _beacon_frame(self) -> Frame:
        return Frame(FrameType.BEACON, self.net_id, COORDINATOR_ADDR, BROADCAST_ADDR,
                     self.mac.next_seq(), bytes([1 if self.permit_join else 0]))

    def _beacon_tick(self) -> None:
        self.mac.raw_send(self._beacon_frame())
        self.sim.schedule_in(self.timings.superframe_period_us, self._beacon_tick)

    def _response_delay(self, budget_us: int, request: Frame, response: Frame) -> int:
        rate = self.mac.profile.rate_bps
        spent = airtime(request.wire_length * 8, rate) + airtime(response.wire_length * 8, rate)
        return max(self.timings.turnaround_us, budget_us - spent)

    def _on_control(self, f: Frame) -> None:
        if f.frame_type == FrameType.DISCOVERY:
            if f.net_id not in (WILDCARD_NET, self.net_id):
                return
            response = self._beacon_frame()
            delay = self._response_delay(self.timings.discovery_latency_us, f, response)
            self.sim.schedule_in(delay, lambda: self.mac.raw_send(response))
        elif f.frame_type == FrameType.JOIN_REQ:
            if f.net_id != self.net_id or len(f.payload) < 9:
                return
            device_id = int.from_bytes(f.payload[:8], "big")
            sleepy = bool(f.payload[8])
            self._handle_join(f, device_id, sleepy)

    def _handle_join(self, req: Frame, device_id: int, sleepy: bool) -> None:
        if device_id in self.registry.by_device_id:
            addr = self.registry.by_device_id[device_id]  # idempotent re-join
            status = JOIN_OK
        else:
            free = self.registry.lowest_free_addr()
            if free is None or not self.permit_join:
                addr = 0
                status = JOIN_FULL
                self.sim.emit(self.mac.node_id, "net.join_reject",
                              device_id=device_id, reason="capacity")
            else:
                addr = free
                status = JOIN_OK
                self.registry.slaves[addr] = SlaveEntry(
                    addr=addr, device_id=device_id, sleepy=sleepy, joined_at=self.sim.now)
                self.registry.by_device_id[device_id] = addr
                self.queues[addr] = deque()
                self.sim.emit(self.mac.node_id, "net.assign", addr=addr, device_id=device_id)
        payload = device_id.to_bytes(8, "big") + bytes([status, addr])
        ack = Frame(FrameType.JOIN_ACK, self.net_id, COORDINATOR_ADDR, BROADCAST_ADDR,
                    self.mac.next_seq(), payload)
        delay = self._response_delay(self.timings.join_latency_us, req, ack)
        self.sim.schedule_in(delay, lambda: self.mac.raw_send(ack))

    # -- uplink ---------------------------------------------------------------

    def _pending_count(self, addr: int) -> int:
        queued = sum(1 for e in self.queues.get(addr, ()) if not e.cancelled)
        return queued + (1 if addr in self.in_flight else 0)

    def _ack_payload(self, f: Frame) -> bytes:
        if f.src in self.registry.slaves:
            return bytes([min(self._pending_count(f.src), 255)])
        return b""

    def _poll_service_delay(self) -> int:
        # let the pending-count ACK go out before the queued frame follows
        rate = self.mac.profile.rate_bps
        return 2 * self.timings.turnaround_us + airtime(12 * 8, rate)

    def _on_data(self, f: Frame) -> None:
        if f.src not in self.registry.slaves:
            return
        if len(f.payload) == 0:  # poll (data request)
            self.sim.schedule_in(self._poll_service_delay(),
                                 lambda: self._service_queue(f.src))
            return
        if self.on_upstream is not None:
            self.on_upstream(f.src, f.payload)

    # -- downlink ---------------------------------------------------------------

    def route_downlink(self, addr: int, payload: bytes, done=None) -> DownlinkTicket:
        if addr not in self.registry.slaves:
            raise UnknownDeviceError(f"address {addr:#04x} not joined")
        entry = self.registry.slaves[addr]
        item = _QueuedDownlink(payload=payload, done=done)
        ticket = DownlinkTicket(self, addr, item)
        queue = self.queues[addr]
        if not entry.sleepy:
            queue.append(item)
            self._service_queue(addr)
            return ticket
        live = sum(1 for e in queue if not e.cancelled)
        if live >= INDIRECT_QUEUE_CAP:
            raise BusyError(f"indirect queue full for {addr:#04x}")
        queue.append(item)
        self.sim.emit(self.mac.node_id, "net.queue", addr=addr, depth=live + 1)
        return ticket

    def _drop_cancelled(self, addr: int) -> None:
        queue = self.queues.get(addr)
        if queue is None:
            return
        kept = deque(e for e in queue if not e.cancelled)
        dropped = len(queue) - len(kept)
        if dropped:
            self.sim.emit(self.mac.node_id, "net.drop", addr=addr,
                          count=dropped, reason="cancelled")
        self.queues[addr] = kept

    def _service_queue(self, addr: int) -> None:
        if addr in self.in_flight:
            return
        queue = self.queues.get(addr)
        if not queue:
            return
        item = queue.popleft()
        while item.cancelled and queue:
            item = queue.popleft()
        if item.cancelled:
            return
        self.in_flight.add(addr)
        if item.frame is None:
            item.frame = Frame(FrameType.DATA, self.net_id, COORDINATOR_ADDR, addr,
                               self.mac.next_seq(), item.payload)
        frame = item.frame

        def finished(outcome):
            self.in_flight.discard(addr)
            entry = self.registry.slaves.get(addr)
            queue_now = self.queues.get(addr)
            if outcome.delivered:
                self.sim.emit(self.mac.node_id, "net.deliver", addr=addr)
                if item.done is not None and not item.cancelled:
                    item.done(outcome)
                if entry is not None and not entry.sleepy:
                    self._service_queue(addr)
                return
            if item.cancelled or entry is None or queue_now is None:
                self.sim.emit(self.mac.node_id, "net.drop", addr=addr,
                              count=1, reason="cancelled" if item.cancelled else "evicted")
                return
            # keep for the next poll (sleepy) or a delayed retry; never silently lost
            queue_now.appendleft(item)
            self.sim.emit(self.mac.node_id, "net.requeue", addr=addr)
            if not entry.sleepy:
                self.sim.schedule_in(100_000, lambda: self._service_queue(addr))

        self.mac.send(frame, done=finished)

    # -- membership ---------------------------------------------------------

    def evict(self, addr: int) -> None:
        if addr == COORDINATOR_ADDR:
            raise NetworkError("coordinator is not evictable")
        if addr not in self.registry.slaves:
            raise UnknownDeviceError(f"address {addr:#04x} not joined")
        entry = self.registry.slaves.pop(addr)
        self.registry.by_device_id.pop(entry.device_id, None)
        queue = self.queues.pop(addr, deque())
        for item in queue:
            if not item.cancelled:
                self.sim.emit(self.mac.node_id, "net.drop", addr=addr,
                              count=1, reason="evicted")
        for slot, owner in list(self.schedule.grants.items()):
            if owner == addr:
                del self.schedule.grants[slot]
        self.sim.emit(self.mac.node_id, "net.evict", addr=addr)

    # -- guaranteed time slots ------------------------------------------------

    def reserve_gts(self, addr: int, slots: int) -> list[int]:
        if addr not in self.registry.slaves:
            raise UnknownDeviceError(f"address {addr:#04x} not joined")
        free = [s for s in self._gts_pool if s not in self.schedule.grants]
        if slots > len(free):
            raise CapacityError(f"requested {slots} guaranteed slots, {len(free)} free")
        granted = free[:slots]
        for s in granted:
            self.schedule.grants[s] = addr
        self.sim.emit(self.mac.node_id, "net.gts_grant", addr=addr, slots=granted)
        return granted

    def release_gts(self, addr: int) -> None:
        for slot, owner in list(self.schedule.grants.items()):
            if owner == addr:
                del self.schedule.grants[slot]


class DeviceLink:
    """Device-side network client: discovery, join, polling."""

    def __init__(self, sim: Simulator, mac: MacNode, device_id: int, *,
                 sleepy: bool = True, schedule: SuperframeSchedule | None = None):
        self.sim = sim
        self.mac = mac
        self.device_id = device_id
        self.sleepy = sleepy
        self.joined = False
        self.addr: int | None = None
        self.net_id: int | None = None
        self.on_downlink = None  # fn(payload_bytes, frame)
        self._beacon_waiter = None
        self._join_waiter = None
        if schedule is not None:
            mac.schedule = schedule
        mac.on_control = self._on_control
        mac.on_data = self._on_data

    # -- discovery -----------------------------------------------------------

    def discover(self, done, timeout_us: int = 500_000) -> None:
        ready = self.mac.ready_at()
        self.sim.schedule_at(ready, lambda: self._discover_now(done, timeout_us))

    def _discover_now(self, done, timeout_us: int) -> None:
        started = self.sim.now
        probe = Frame(FrameType.DISCOVERY, WILDCARD_NET, UNASSIGNED_ADDR,
                      BROADCAST_ADDR, self.mac.next_seq())
        timer = self.sim.schedule_in(timeout_us, lambda: self._discover_timeout(done))
        self._beacon_waiter = (started, done, timer)
        self.mac.send(probe)

    def _discover_timeout(self, done) -> None:
        self._beacon_waiter = None
        done(None, NoNetworkError("no beacon heard"))

    # -- join ------------------------------------------------------------------

    def join(self, net_id: int, done, *, attempts: int = 3,
             attempt_timeout_us: int = 200_000) -> None:
        if self.joined:
            done(self.addr, None)
            return
        ready = self.mac.ready_at()
        self.sim.schedule_at(
            ready, lambda: self._join_attempt(net_id, done, attempts, attempt_timeout_us,
                                              self.sim.now))

    def _join_attempt(self, net_id: int, done, attempts_left: int,
                      attempt_timeout_us: int, started: int) -> None:
        if attempts_left <= 0:
            self._join_waiter = None
            done(None, JoinTimeout(f"device {self.device_id:#x} join timed out"))
            return
        payload = self.device_id.to_bytes(8, "big") + bytes([1 if self.sleepy else 0])
        req = Frame(FrameType.JOIN_REQ, net_id, UNASSIGNED_ADDR, COORDINATOR_ADDR,
                    self.mac.next_seq(), payload)
        timer = self.sim.schedule_in(
            attempt_timeout_us,
            lambda: self._join_attempt(net_id, done, attempts_left - 1,
                                       attempt_timeout_us, started))
        self._join_waiter = (net_id, done, timer, started)
        self.mac.send(req)

    # -- frame handling ---------------------------------------------------------

    def _on_control(self, f: Frame) -> None:
        if f.frame_type == FrameType.BEACON and self._beacon_waiter is not None:
            started, done, timer = self._beacon_waiter
            self._beacon_waiter = None
            self.sim.cancel(timer)
            permit = bool(f.payload[0]) if f.payload else True
            latency = self.sim.now - started
            self.sim.emit(self.mac.node_id, "net.discover", net_id=f.net_id,
                          permit=permit, latency_us=latency)
            done({"net_id": f.net_id, "permit": permit, "latency_us": latency}, None)
        elif f.frame_type == FrameType.JOIN_ACK and self._join_waiter is not None:
            if len(f.payload) < 10:
                return
            device_id = int.from_bytes(f.payload[:8], "big")
            if device_id != self.device_id:
                return
            net_id, done, timer, started = self._join_waiter
            self._join_waiter = None
            self.sim.cancel(timer)
            status, addr = f.payload[8], f.payload[9]
            if status == JOIN_FULL:
                done(None, CapacityError("network full"))
                return
            self.joined = True
            self.addr = addr
            self.net_id = net_id
            self.mac.addr = addr
            self.mac.net_id = net_id
            latency = self.sim.now - started
            self.sim.emit(self.mac.node_id, "net.join", addr=addr, latency_us=latency)
            done(addr, None)

    def _on_data(self, f: Frame) -> None:
        if self.on_downlink is not None:
            self.on_downlink(f.payload, f)

    # -- polling (indirect downlink retrieval) -----------------------------------

    def poll_drain(self, done, *, _empty_waits: int = 0) -> None:
        """Poll the coordinator until no downlink is pending, then call done()."""
        if not self.joined:
            done()
            return
        _PollDrain(self, done, _empty_waits)


class _PollDrain:
    """One poll round-trip, repeated while the coordinator reports pending data."""

    def __init__(self, link: DeviceLink, done, empty_waits: int = 0):
        self.link = link
        self.done = done
        self.empty_waits = empty_waits
        self.got_data = False
        self.window_timer = None
        self.prev = link.on_downlink
        link.on_downlink = self._tapped
        poll = Frame(FrameType.DATA, link.net_id, link.addr, COORDINATOR_ADDR,
                     link.mac.next_seq())
        link.mac.send(poll, done=self._polled)

    def _tapped(self, payload, frame) -> None:
        self.got_data = True
        if self.prev is not None:
            self.prev(payload, frame)
        if self.window_timer is not None:
            self.link.sim.cancel(self.window_timer)
            self.window_timer = None
            self._repoll()

    def _polled(self, outcome) -> None:
        if not outcome.delivered:
            self._finish()
            return
        pending = outcome.ack_payload[0] if outcome.ack_payload else 0
        if self.got_data:
            self._repoll()
            return
        if pending == 0:
            self._finish()
            return
        self.window_timer = self.link.sim.schedule_in(
            self.link.mac.timings.poll_response_window_us, self._window_expired)

    def _window_expired(self) -> None:
        self.window_timer = None
        if self.empty_waits < 1:
            self._restore()
            _PollDrain(self.link, self.done, self.empty_waits + 1)
        else:
            self._finish()

    def _repoll(self) -> None:
        self._restore()
        _PollDrain(self.link, self.done)

    def _restore(self) -> None:
        self.link.on_downlink = self.prev

    def _finish(self) -> None:
        self._restore()
        self.done()
