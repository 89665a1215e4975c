#!/usr/bin/env python3
"""
Deterministic discrete-event simulation: clock, broadcast radio channels,
channel taps, endpoints and the run trace.
"""
import heapq
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, Iterable, List, Optional, Tuple

from core.errors import TraceFormatError
from core.utils import write_lines

logger = logging.getLogger('rkesim.channel')

ADVERSARY_PREFIX = "adv."
DEFAULT_PROPAGATION_DELAY = 1
DEFAULT_RELAY_DELAY = 20
TRACE_MAGIC = "# rkesim trace v1"


class EventKind(Enum):
    DELIVER = "DELIVER"
    TIMER = "TIMER"
    VEHICLE = "VEHICLE"
    BUTTON = "BUTTON"
    ACTION = "ACTION"


@dataclass
class SimEvent:
    at: int
    kind: EventKind
    target: str
    data: Any = None
    sender: Optional[str] = None


class SimClock:
    """
    Simulated milliseconds plus the pending event queue.

    Events are ordered by (timestamp, insertion sequence), so ties resolve
    in scheduling order.
    """

    def __init__(self, now: int = 0):
        self.now = now
        self._queue: List[Tuple[int, int, SimEvent]] = []
        self._seq = 0

    def schedule(self, event: SimEvent) -> None:
        if event.at < self.now:
            raise ValueError(f"cannot schedule at {event.at}, clock is at {self.now}")
        heapq.heappush(self._queue, (event.at, self._seq, event))
        self._seq += 1

    def pop_next(self, t_end: int) -> Optional[SimEvent]:
        if not self._queue or self._queue[0][0] > t_end:
            return None
        at, _seq, event = heapq.heappop(self._queue)
        self.now = at
        return event

    def advance_to(self, t: int) -> None:
        self.now = max(self.now, t)

    def __len__(self) -> int:
        return len(self._queue)


@dataclass(frozen=True)
class TraceRecord:
    """
    One trace line: `<timestamp_ms> TX|RX|ACT|STATE <endpoint> <hex | name>`.

    RX endpoints are written `receiver:sender` so provenance survives
    serialisation.
    """
    at: int
    kind: str
    endpoint: str
    detail: str
    sender: Optional[str] = None

    KINDS = ("TX", "RX", "ACT", "STATE")

    def to_line(self) -> str:
        endpoint = f"{self.endpoint}:{self.sender}" if self.kind == "RX" else self.endpoint
        return f"{self.at} {self.kind} {endpoint} {self.detail}"

    @property
    def from_adversary(self) -> bool:
        origin = self.sender if self.kind == "RX" else self.endpoint
        return bool(origin) and origin.startswith(ADVERSARY_PREFIX)

    @property
    def data(self) -> bytes:
        return bytes.fromhex(self.detail)

    @classmethod
    def from_line(cls, line: str, line_no: int = 0) -> "TraceRecord":
        parts = line.split()
        if len(parts) != 4:
            raise TraceFormatError(line_no, f"expected 4 fields, got {len(parts)}")
        at_text, kind, endpoint, detail = parts
        try:
            at = int(at_text)
        except ValueError:
            raise TraceFormatError(line_no, f"bad timestamp {at_text!r}")
        if at < 0:
            raise TraceFormatError(line_no, "negative timestamp")
        if kind not in cls.KINDS:
            raise TraceFormatError(line_no, f"unknown record kind {kind!r}")
        sender = None
        if kind == "RX":
            if ":" not in endpoint:
                raise TraceFormatError(line_no, "RX endpoint must be receiver:sender")
            endpoint, sender = endpoint.split(":", 1)
        if kind in ("TX", "RX"):
            try:
                bytes.fromhex(detail)
            except ValueError:
                raise TraceFormatError(line_no, f"bad hex payload {detail!r}")
        return cls(at, kind, endpoint, detail, sender)


@dataclass
class Trace:
    """Everything observable about a run, in dispatch order."""
    records: List[TraceRecord] = field(default_factory=list)
    params: Dict[str, str] = field(default_factory=dict)

    def add(self, record: TraceRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def select(self, kind: Optional[str] = None, endpoint: Optional[str] = None,
               detail: Optional[str] = None) -> List[TraceRecord]:
        return [r for r in self.records
                if (kind is None or r.kind == kind)
                and (endpoint is None or r.endpoint == endpoint)
                and (detail is None or r.detail == detail)]

    def actuators(self, endpoint: Optional[str] = None) -> List[TraceRecord]:
        return self.select("ACT", endpoint)

    def lines(self) -> List[str]:
        header = [TRACE_MAGIC]
        header += [f"# param {key}={value}" for key, value in sorted(self.params.items())]
        return header + [record.to_line() for record in self.records]

    def to_text(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def write(self, path: str) -> str:
        return write_lines(self.lines(), path)

    @classmethod
    def parse(cls, lines: Iterable[str]) -> "Trace":
        trace = cls()
        for line_no, raw in enumerate(lines, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("# param "):
                    key, _, value = line[len("# param "):].partition("=")
                    if not key:
                        raise TraceFormatError(line_no, "empty parameter name")
                    trace.params[key.strip()] = value.strip()
                continue
            trace.add(TraceRecord.from_line(line, line_no))
        return trace

    @classmethod
    def read(cls, path: str) -> "Trace":
        with open(path, 'r', encoding='utf-8') as f:
            return cls.parse(f)


class Endpoint:
    """
    A participant attached to one radio channel.

    Handlers queue their effects with `send`, `actuate` and `note`; the
    simulation flushes the queue into the trace and the channel after each
    dispatch, in the order queued.
    """

    def __init__(self, name: str):
        self.name = name
        self.sim: Optional["Simulation"] = None
        self.channel: Optional["RfChannel"] = None
        self._outbox: List[Tuple[str, Any]] = []

    @property
    def is_adversary(self) -> bool:
        return self.name.startswith(ADVERSARY_PREFIX)

    def send(self, data: bytes) -> None:
        self._outbox.append(("TX", bytes(data)))

    def actuate(self, name: str) -> None:
        self._outbox.append(("ACT", name))

    def note(self, label: str) -> None:
        self._outbox.append(("STATE", label))

    def drain(self) -> List[Tuple[str, Any]]:
        pending, self._outbox = self._outbox, []
        return pending

    # handlers; subclasses override what they need

    def on_deliver(self, data: bytes, sender: str, now: int) -> None:
        pass

    def on_timer(self, now: int) -> None:
        pass

    def on_button(self, button: Any, now: int) -> None:
        pass

    def on_vehicle(self, event: Any, now: int) -> None:
        pass

    def next_deadline(self) -> Optional[int]:
        return None


class TapAction(Enum):
    PASS = "pass"
    DROP = "drop"


class ChannelTap:
    """Observer of every transmission on a channel, jammed ones included."""

    def on_transmit(self, channel: "RfChannel", sender: str, data: bytes,
                    now: int, jammed: bool) -> TapAction:
        return TapAction.PASS


@dataclass(frozen=True)
class Recording:
    at: int
    channel: str
    sender: str
    data: bytes
    jammed: bool


class RecorderTap(ChannelTap):
    """Stores every transmission it hears."""

    def __init__(self):
        self.recordings: List[Recording] = []

    def on_transmit(self, channel, sender, data, now, jammed):
        self.recordings.append(Recording(now, channel.name, sender, data, jammed))
        return TapAction.PASS

    def clear(self) -> None:
        self.recordings.clear()


class RelayTap(ChannelTap):
    """
    One direction of an amplifier pair: re-injects what it hears into a
    distant channel after `delay` ms, as transmitted by `relay_name`.
    """

    def __init__(self, relay_name: str, target: "RfChannel", delay: int = DEFAULT_RELAY_DELAY,
                 ignore: Iterable[str] = ()):
        self.relay_name = relay_name
        self.target = target
        self.delay = delay
        self.ignore = set(ignore) | {relay_name}
        self.relayed = 0

    def on_transmit(self, channel, sender, data, now, jammed):
        if sender in self.ignore:
            return TapAction.PASS
        self.relayed += 1
        sim = channel.sim
        sim.schedule_action(now + self.delay,
                            lambda at, payload=data: self.target.transmit(self.relay_name, payload, at),
                            label=self.relay_name)
        return TapAction.PASS


class RfChannel:
    """
    Broadcast medium: every attached endpoint except the sender hears each
    transmission `propagation_delay` ms later, unless a jam window overlaps
    the flight from transmission to delivery or a tap drops it.
    """

    def __init__(self, sim: "Simulation", name: str, propagation_delay: int = DEFAULT_PROPAGATION_DELAY):
        self.sim = sim
        self.name = name
        self.propagation_delay = propagation_delay
        self.endpoints: List[str] = []
        self.jam_windows: List[Tuple[int, int]] = []
        self.taps: List[ChannelTap] = []
        self.delivered = 0
        self.suppressed = 0

    def attach(self, endpoint_name: str) -> None:
        if endpoint_name not in self.endpoints:
            self.endpoints.append(endpoint_name)

    def detach(self, endpoint_name: str) -> None:
        if endpoint_name in self.endpoints:
            self.endpoints.remove(endpoint_name)

    def add_tap(self, tap: ChannelTap) -> ChannelTap:
        self.taps.append(tap)
        return tap

    def add_jam_window(self, start: int, end: int) -> None:
        if end < start:
            raise ValueError(f"jam window end {end} before start {start}")
        self.jam_windows.append((start, end))
        logger.debug(f"Channel {self.name}: jam window [{start}, {end}]")

    def is_jammed(self, t: int, until: Optional[int] = None) -> bool:
        """True if a jam window covers any instant of [t, until]."""
        until = t if until is None else until
        return any(start <= until and t <= end for start, end in self.jam_windows)

    def transmit(self, sender: str, data: bytes, now: int) -> None:
        """
        Put a frame on the air.

        Args:
            sender: Transmitting endpoint name
            data: Encoded frame
            now: Transmission time
        """
        self.sim.trace.add(TraceRecord(now, "TX", sender, data.hex()))
        at = now + self.propagation_delay
        jammed = self.is_jammed(now, at)
        dropped = False
        for tap in self.taps:
            if tap.on_transmit(self, sender, data, now, jammed) is TapAction.DROP:
                dropped = True
        if jammed or dropped:
            self.suppressed += 1
            return
        for endpoint_name in self.endpoints:
            if endpoint_name != sender:
                self.sim.clock.schedule(SimEvent(at, EventKind.DELIVER, endpoint_name, data, sender))
                self.delivered += 1


class Simulation:
    """
    Single-threaded event loop owning the clock, channels, endpoints and trace.
    """

    def __init__(self, params: Optional[Dict[str, Any]] = None):
        self.clock = SimClock()
        self.trace = Trace(params={k: str(v) for k, v in (params or {}).items()})
        self.channels: Dict[str, RfChannel] = {}
        self.endpoints: Dict[str, Endpoint] = {}
        self._pending_timers: Dict[str, set] = {}
        self.dispatched = 0

    @property
    def now(self) -> int:
        return self.clock.now

    def add_channel(self, name: str, propagation_delay: int = DEFAULT_PROPAGATION_DELAY) -> RfChannel:
        channel = RfChannel(self, name, propagation_delay)
        self.channels[name] = channel
        return channel

    def add_endpoint(self, endpoint: Endpoint, channel: Optional[RfChannel] = None) -> Endpoint:
        if endpoint.name in self.endpoints:
            raise ValueError(f"duplicate endpoint name {endpoint.name}")
        endpoint.sim = self
        self.endpoints[endpoint.name] = endpoint
        if channel is not None:
            self.move_endpoint(endpoint, channel)
        self._arm_timer(endpoint)
        return endpoint

    def move_endpoint(self, endpoint: Endpoint, channel: RfChannel) -> None:
        if endpoint.channel is not None:
            endpoint.channel.detach(endpoint.name)
        endpoint.channel = channel
        channel.attach(endpoint.name)

    # -- scheduling ------------------------------------------------------

    def schedule_action(self, at: int, action: Callable[[int], None], label: str = "script") -> None:
        """Run `action(now)` at `at`; when `label` names an endpoint its queued output is flushed."""
        self.clock.schedule(SimEvent(at, EventKind.ACTION, label, action))

    def press_button(self, at: int, fob_name: str, button: Any) -> None:
        self.clock.schedule(SimEvent(at, EventKind.BUTTON, fob_name, button))

    def vehicle_event(self, at: int, car_name: str, event: Any) -> None:
        self.clock.schedule(SimEvent(at, EventKind.VEHICLE, car_name, event))

    def _arm_timer(self, endpoint: Endpoint) -> None:
        deadline = endpoint.next_deadline()
        if deadline is None:
            return
        at = max(deadline, self.clock.now)
        pending = self._pending_timers.setdefault(endpoint.name, set())
        if at not in pending:
            pending.add(at)
            self.clock.schedule(SimEvent(at, EventKind.TIMER, endpoint.name))

    # -- dispatch ----------------------------------------------------------

    def run_until(self, t_end: int) -> Trace:
        """
        Dispatch every event scheduled at or before `t_end`.

        Args:
            t_end: Inclusive end of the run

        Returns:
            Trace: The run trace (shared, keeps growing across calls)
        """
        if t_end < self.clock.now:
            raise ValueError(f"t_end {t_end} is before now {self.clock.now}")
        while True:
            event = self.clock.pop_next(t_end)
            if event is None:
                break
            self._dispatch(event)
            self.dispatched += 1
        self.clock.advance_to(t_end)
        return self.trace

    def _dispatch(self, event: SimEvent) -> None:
        now = event.at
        endpoint = self.endpoints.get(event.target)
        if event.kind is EventKind.ACTION:
            event.data(now)
            if endpoint is not None:
                self._flush(endpoint, now)
                self._arm_timer(endpoint)
            return
        if endpoint is None:
            return
        if event.kind is EventKind.DELIVER:
            if endpoint.channel is None or endpoint.name not in endpoint.channel.endpoints:
                return
            self.trace.add(TraceRecord(now, "RX", endpoint.name, event.data.hex(), event.sender))
            endpoint.on_deliver(event.data, event.sender, now)
            self._flush(endpoint, now)
        elif event.kind is EventKind.TIMER:
            self._pending_timers.get(endpoint.name, set()).discard(now)
            endpoint.on_timer(now)
            self._flush(endpoint, now, marker="TIMER")
        elif event.kind is EventKind.BUTTON:
            self.trace.add(TraceRecord(now, "STATE", endpoint.name, f"PRESS_{_label(event.data)}"))
            endpoint.on_button(event.data, now)
            self._flush(endpoint, now)
        elif event.kind is EventKind.VEHICLE:
            self.trace.add(TraceRecord(now, "STATE", endpoint.name, _label(event.data)))
            endpoint.on_vehicle(event.data, now)
            self._flush(endpoint, now)
        self._arm_timer(endpoint)

    def _flush(self, endpoint: Endpoint, now: int, marker: Optional[str] = None) -> None:
        pending = endpoint.drain()
        if pending and marker:
            self.trace.add(TraceRecord(now, "STATE", endpoint.name, marker))
        for kind, value in pending:
            if kind == "TX":
                if endpoint.channel is not None:
                    endpoint.channel.transmit(endpoint.name, value, now)
            else:
                self.trace.add(TraceRecord(now, kind, endpoint.name, value))


def _label(value: Any) -> str:
    return str(getattr(value, "value", value))


def run_until(sim: Simulation, t_end: int) -> Trace:
    return sim.run_until(t_end)
