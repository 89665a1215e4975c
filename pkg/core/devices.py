#!/usr/bin/env python3
"""
Key fob and car transceiver state machines.

Both machines are pure: they take a decoded Frame (or a button, vehicle
event or timer tick) plus the current simulated time and return the frames
to transmit. The car also returns actuator events. `FobEndpoint` and
`CarEndpoint` plug the machines into the simulation loop.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field

from core.authcrypt import (
    Challenge, build_auth_message, generate_challenge, verify_auth_message
)
from core.channel import Endpoint
from core.errors import DeviceBusy, IndexOutOfRange, WireError
from core.keystore import CarKeyId, EntropySource, KeyTable
from core.wire import Command, Frame, FrameCodec, MessageType

logger = logging.getLogger('rkesim.devices')


class DeviceTimings(BaseModel):
    """Timeouts and policy knobs of both devices, in simulated milliseconds."""
    model_config = ConfigDict(frozen=True, extra='forbid')

    t_challenge: int = Field(500, gt=0)
    t_auth_ok: int = Field(500, gt=0)
    t_command: int = Field(500, gt=0)
    t_response: int = Field(500, gt=0)
    t_start: int = Field(500, gt=0)
    t_jam: int = Field(10_000, gt=0)
    t_autolock: int = Field(10_000, gt=0)
    t_block: int = Field(180_000, gt=0)
    w_fail: int = Field(60_000, gt=0)
    t_ping: int = Field(2_000, gt=0)
    honk_count: int = Field(5, ge=1)
    honk_spacing: int = Field(500, gt=0)
    fail_threshold: int = Field(3, ge=1)
    lockout_enabled: bool = True
    jam_defense_enabled: bool = True


DEFAULT_TIMINGS = DeviceTimings()


class Button(str, Enum):
    LOCK = "LOCK"
    UNLOCK = "UNLOCK"
    BOOT = "BOOT"

    @property
    def command(self) -> Command:
        return BUTTON_COMMANDS[self]


BUTTON_COMMANDS = {
    Button.LOCK: Command.LOCK,
    Button.UNLOCK: Command.UNLOCK,
    Button.BOOT: Command.OPEN_BOOT,
}


class VehicleEvent(str, Enum):
    MOTOR_OFF = "MOTOR_OFF"
    DOOR_OPENED = "DOOR_OPENED"
    DOOR_CLOSED = "DOOR_CLOSED"
    HANDLE_PULLED = "HANDLE_PULLED"


class ActuatorKind(str, Enum):
    LOCK_DOORS = "LOCK_DOORS"
    UNLOCK_DOORS = "UNLOCK_DOORS"
    OPEN_BOOT = "OPEN_BOOT"
    START_ENGINE = "START_ENGINE"
    HONK = "HONK"


COMMAND_ACTUATORS = {
    Command.LOCK: ActuatorKind.LOCK_DOORS,
    Command.UNLOCK: ActuatorKind.UNLOCK_DOORS,
    Command.OPEN_BOOT: ActuatorKind.OPEN_BOOT,
}


@dataclass(frozen=True)
class ActuatorEvent:
    kind: ActuatorKind
    timestamp: int


class FobPhase(Enum):
    IDLE = "IDLE"
    WAIT_CHALLENGE = "WAIT_CHALLENGE"
    WAIT_AUTH_OK = "WAIT_AUTH_OK"
    START_WAIT_AUTH = "START_WAIT_AUTH"


@dataclass(frozen=True)
class FobState:
    phase: FobPhase = FobPhase.IDLE
    deadline: Optional[int] = None
    pending_command: Optional[Command] = None
    sent_challenge: Optional[Challenge] = None


class CarPhase(Enum):
    IDLE = "IDLE"
    WAIT_AUTH = "WAIT_AUTH"
    WAIT_COMMAND = "WAIT_COMMAND"
    START_WAIT_INIT = "START_WAIT_INIT"
    START_WAIT_CONFIRM = "START_WAIT_CONFIRM"
    BLOCKED = "BLOCKED"


@dataclass(frozen=True)
class CarState:
    phase: CarPhase = CarPhase.IDLE
    deadline: Optional[int] = None
    challenge: Optional[Challenge] = None

    @property
    def until(self) -> Optional[int]:
        return self.deadline if self.phase is CarPhase.BLOCKED else None


class JamPhase(Enum):
    INACTIVE = "INACTIVE"
    WATCH_DOOR = "WATCH_DOOR"
    WAIT_LOCK_OR_REPLY = "WAIT_LOCK_OR_REPLY"
    HONKING = "HONKING"
    AUTOLOCK_COUNTDOWN = "AUTOLOCK_COUNTDOWN"


@dataclass(frozen=True)
class JamDefense:
    phase: JamPhase = JamPhase.INACTIVE
    deadline: Optional[int] = None
    door_opened: bool = False
    next_ping: Optional[int] = None
    honks_done: int = 0
    next_honk: Optional[int] = None

    @property
    def armed(self) -> bool:
        return self.phase in (JamPhase.WAIT_LOCK_OR_REPLY, JamPhase.HONKING, JamPhase.AUTOLOCK_COUNTDOWN)


class KeyFob:
    """
    The driver's key fob: three buttons, one transaction in flight at a time.
    """

    def __init__(self, car_id: CarKeyId, table: KeyTable, entropy: EntropySource,
                 timings: DeviceTimings = DEFAULT_TIMINGS):
        self.id = car_id
        self.table = table
        self.entropy = entropy
        self.timings = timings
        self.codec = FrameCodec(table.params)
        self.state = FobState()
        self.transactions = 0
        self.notes: List[str] = []

    def _enter(self, state: FobState) -> None:
        if state.phase is not self.state.phase:
            logger.debug(f"Fob {self.id}: {self.state.phase.value} -> {state.phase.value}")
            self.notes.append(state.phase.value)
        self.state = state

    def drain_notes(self) -> List[str]:
        notes, self.notes = self.notes, []
        return notes

    def next_deadline(self) -> Optional[int]:
        return self.state.deadline

    def press_button(self, button: Button, now: int) -> List[Frame]:
        """
        Start a command transaction.

        Raises:
            DeviceBusy: If a transaction is already in flight
        """
        if self.state.phase is not FobPhase.IDLE:
            raise DeviceBusy(f"fob {self.id} busy in {self.state.phase.value}")
        self.transactions += 1
        self._enter(FobState(FobPhase.WAIT_CHALLENGE, now + self.timings.t_challenge,
                             pending_command=Button(button).command))
        return [self.codec.id_announce(self.id)]

    def handle_frame(self, frame: Frame, now: int) -> List[Frame]:
        codec = self.codec
        phase = self.state.phase
        msg_type = frame.msg_type

        if msg_type is MessageType.PING:
            if codec.parse_car_id(frame) == self.id:
                return [codec.ping_reply(self.id)]
            return []

        if phase is FobPhase.IDLE and msg_type is MessageType.ID_REQUEST:
            own = generate_challenge(self.entropy, self.table.params)
            self.transactions += 1
            self._enter(FobState(FobPhase.START_WAIT_AUTH, now + self.timings.t_start, sent_challenge=own))
            return [codec.start_init(self.id, own)]

        if phase is FobPhase.WAIT_CHALLENGE and msg_type is MessageType.CHALLENGE:
            challenge = codec.parse_challenge(frame)
            try:
                message = build_auth_message(self.table, challenge)
            except (IndexOutOfRange, ValueError) as e:
                logger.debug(f"Fob {self.id}: dropping malformed challenge: {e}")
                return []
            self._enter(FobState(FobPhase.WAIT_AUTH_OK, now + self.timings.t_auth_ok,
                                 pending_command=self.state.pending_command))
            return [codec.auth_response(message)]

        if phase is FobPhase.WAIT_AUTH_OK and msg_type is MessageType.AUTH_OK:
            command = self.state.pending_command
            self._enter(FobState())
            return [codec.command(command)]

        if phase is FobPhase.START_WAIT_AUTH and msg_type is MessageType.START_AUTH:
            message, car_challenge = codec.parse_start_auth(frame)
            own = self.state.sent_challenge
            self._enter(FobState())
            if not verify_auth_message(self.table, own, message):
                # car emulation: abort without an error frame
                logger.info(f"Fob {self.id}: start transaction rejected, car failed verification")
                self.notes.append("START_REJECTED")
                return []
            try:
                reply = build_auth_message(self.table, car_challenge)
            except (IndexOutOfRange, ValueError) as e:
                logger.debug(f"Fob {self.id}: dropping malformed car challenge: {e}")
                return []
            return [codec.start_confirm(reply)]

        return []

    def tick(self, now: int) -> List[Frame]:
        if self.state.phase is not FobPhase.IDLE and now >= self.state.deadline:
            logger.debug(f"Fob {self.id}: {self.state.phase.value} timed out")
            self.notes.append("TIMEOUT")
            self._enter(FobState())
        return []


class CarTransceiver:
    """
    The car side: command and start transactions, lockout after repeated
    wrong messages, and the door/jamming watchdog running alongside.
    """

    def __init__(self, car_id: CarKeyId, table: KeyTable, entropy: EntropySource,
                 timings: DeviceTimings = DEFAULT_TIMINGS):
        self.id = car_id
        self.table = table
        self.entropy = entropy
        self.timings = timings
        self.codec = FrameCodec(table.params)
        self.state = CarState()
        self.jam_defense = JamDefense()
        self.failure_log: List[int] = []
        self.door_locked = True
        self.engine_running = False
        self.foreign_id_count = 0
        self.lockouts = 0
        self.notes: List[str] = []

    # -- bookkeeping -----------------------------------------------------

    def _enter(self, state: CarState) -> None:
        if state.phase is not self.state.phase:
            logger.debug(f"Car {self.id}: {self.state.phase.value} -> {state.phase.value}")
            self.notes.append(state.phase.value)
        self.state = state

    def _jam(self, defense: JamDefense) -> None:
        if defense.phase is not self.jam_defense.phase:
            logger.debug(f"Car {self.id}: jam defense {self.jam_defense.phase.value} -> {defense.phase.value}")
        self.jam_defense = defense

    def drain_notes(self) -> List[str]:
        notes, self.notes = self.notes, []
        return notes

    def next_deadline(self) -> Optional[int]:
        candidates = [self.state.deadline]
        jam = self.jam_defense
        if jam.phase is JamPhase.WAIT_LOCK_OR_REPLY:
            candidates += [jam.deadline, jam.next_ping]
        elif jam.phase is JamPhase.HONKING:
            candidates += [jam.deadline, jam.next_honk]
        elif jam.phase is JamPhase.AUTOLOCK_COUNTDOWN:
            candidates.append(jam.deadline)
        candidates = [c for c in candidates if c is not None]
        return min(candidates) if candidates else None

    def _record_failure(self, now: int) -> None:
        self.notes.append("AUTH_FAILED")
        if not self.timings.lockout_enabled:
            self._enter(CarState())
            return
        cutoff = now - self.timings.w_fail
        self.failure_log = [t for t in self.failure_log if t >= cutoff]
        self.failure_log.append(now)
        if len(self.failure_log) >= self.timings.fail_threshold:
            self.failure_log.clear()
            self.lockouts += 1
            logger.warning(f"Car {self.id}: {self.timings.fail_threshold} wrong messages, "
                           f"blocked until {now + self.timings.t_block}")
            self._enter(CarState(CarPhase.BLOCKED, now + self.timings.t_block))
        else:
            self._enter(CarState())

    def _disarm_jam_defense(self, reason: str) -> None:
        if self.jam_defense.armed:
            logger.info(f"Car {self.id}: jam defense disarmed by {reason}")
            self.notes.append("JAM_DISARMED")
            self._jam(JamDefense())

    def _unblock_if_due(self, now: int) -> None:
        if self.state.phase is CarPhase.BLOCKED and now >= self.state.deadline:
            logger.info(f"Car {self.id}: block lifted")
            self.notes.append("UNBLOCKED")
            self._enter(CarState())

    # -- operations --------------------------------------------------------

    def handle_frame(self, frame: Frame, now: int) -> Tuple[List[Frame], List[ActuatorEvent]]:
        codec = self.codec
        msg_type = frame.msg_type

        if msg_type is MessageType.PING_REPLY:
            if (self.jam_defense.phase is JamPhase.WAIT_LOCK_OR_REPLY
                    and codec.parse_car_id(frame) == self.id):
                self._disarm_jam_defense("ping reply")
            return [], []

        self._unblock_if_due(now)
        phase = self.state.phase
        if phase is CarPhase.BLOCKED:
            return [], []

        if phase is CarPhase.IDLE and msg_type is MessageType.ID_ANNOUNCE:
            if codec.parse_car_id(frame) != self.id:
                self.foreign_id_count += 1
                return [], []
            challenge = generate_challenge(self.entropy, self.table.params)
            self._enter(CarState(CarPhase.WAIT_AUTH, now + self.timings.t_response, challenge))
            return [codec.challenge(challenge)], []

        if phase is CarPhase.WAIT_AUTH and msg_type is MessageType.AUTH_RESPONSE:
            received = codec.parse_auth_message(frame)
            if verify_auth_message(self.table, self.state.challenge, received):
                self.notes.append("VERIFIED")
                self._enter(CarState(CarPhase.WAIT_COMMAND, now + self.timings.t_command))
                return [codec.auth_ok()], []
            self._record_failure(now)
            return [], []

        if phase is CarPhase.WAIT_COMMAND and msg_type is MessageType.COMMAND:
            command = codec.parse_command(frame)
            self._enter(CarState())
            kind = COMMAND_ACTUATORS[command]
            if command is Command.LOCK:
                self.door_locked = True
                self._disarm_jam_defense("lock command")
            elif command is Command.UNLOCK:
                self.door_locked = False
            return [], [ActuatorEvent(kind, now)]

        if phase is CarPhase.START_WAIT_INIT and msg_type is MessageType.START_INIT:
            car_id, fob_challenge = codec.parse_start_init(frame)
            if car_id != self.id:
                self.foreign_id_count += 1
                return [], []
            try:
                message = build_auth_message(self.table, fob_challenge)
            except (IndexOutOfRange, ValueError) as e:
                logger.debug(f"Car {self.id}: dropping malformed fob challenge: {e}")
                return [], []
            own = generate_challenge(self.entropy, self.table.params)
            self._enter(CarState(CarPhase.START_WAIT_CONFIRM, now + self.timings.t_start, own))
            return [codec.start_auth(message, own)], []

        if phase is CarPhase.START_WAIT_CONFIRM and msg_type is MessageType.START_CONFIRM:
            received = codec.parse_auth_message(frame)
            if verify_auth_message(self.table, self.state.challenge, received):
                self.notes.append("START_VERIFIED")
                self._enter(CarState())
                self.engine_running = True
                return [], [ActuatorEvent(ActuatorKind.START_ENGINE, now)]
            self._record_failure(now)
            return [], []

        return [], []

    def press_start(self, now: int) -> List[Frame]:
        """Dashboard start button: ask the fob in range to open a start transaction."""
        self._unblock_if_due(now)
        if self.state.phase is not CarPhase.IDLE:
            return []
        self._enter(CarState(CarPhase.START_WAIT_INIT, now + self.timings.t_start))
        return [self.codec.id_request()]

    def vehicle_event(self, event: VehicleEvent, now: int) -> List[Frame]:
        event = VehicleEvent(event)
        jam = self.jam_defense
        if event is VehicleEvent.MOTOR_OFF:
            self.engine_running = False
            if self.timings.jam_defense_enabled:
                self._jam(JamDefense(JamPhase.WATCH_DOOR))
            return []
        if event is VehicleEvent.DOOR_OPENED:
            if jam.phase is JamPhase.WATCH_DOOR:
                self._jam(JamDefense(JamPhase.WATCH_DOOR, door_opened=True))
            return []
        if event is VehicleEvent.DOOR_CLOSED:
            if jam.phase is JamPhase.WATCH_DOOR and jam.door_opened:
                logger.info(f"Car {self.id}: door closed after motor off, jam defense armed")
                self.notes.append("JAM_ARMED")
                self._jam(JamDefense(JamPhase.WAIT_LOCK_OR_REPLY, now + self.timings.t_jam,
                                     next_ping=now + self.timings.t_ping))
                return [self.codec.ping(self.id)]
            return []
        # HANDLE_PULLED: no passive entry on this car
        return []

    def tick(self, now: int) -> Tuple[List[Frame], List[ActuatorEvent]]:
        frames: List[Frame] = []
        actuators: List[ActuatorEvent] = []
        timings = self.timings

        self._unblock_if_due(now)
        if (self.state.phase not in (CarPhase.IDLE, CarPhase.BLOCKED)
                and now >= self.state.deadline):
            self.notes.append("TIMEOUT")
            self._enter(CarState())

        jam = self.jam_defense
        if jam.phase is JamPhase.WAIT_LOCK_OR_REPLY:
            if now >= jam.deadline:
                logger.warning(f"Car {self.id}: no lock or ping reply, honking")
                actuators.append(ActuatorEvent(ActuatorKind.HONK, now))
                jam = JamDefense(JamPhase.HONKING, now + timings.t_autolock,
                                 honks_done=1, next_honk=now + timings.honk_spacing)
                self._jam(jam)
            elif now >= jam.next_ping:
                frames.append(self.codec.ping(self.id))
                self._jam(JamDefense(jam.phase, jam.deadline, next_ping=jam.next_ping + timings.t_ping))
                jam = self.jam_defense

        if jam.phase is JamPhase.HONKING:
            honks, next_honk = jam.honks_done, jam.next_honk
            while honks < timings.honk_count and now >= next_honk:
                actuators.append(ActuatorEvent(ActuatorKind.HONK, now))
                honks += 1
                next_honk += timings.honk_spacing
            if honks >= timings.honk_count:
                jam = JamDefense(JamPhase.AUTOLOCK_COUNTDOWN, jam.deadline, honks_done=honks)
            else:
                jam = JamDefense(JamPhase.HONKING, jam.deadline, honks_done=honks, next_honk=next_honk)
            self._jam(jam)

        if jam.phase is JamPhase.AUTOLOCK_COUNTDOWN and now >= jam.deadline:
            logger.warning(f"Car {self.id}: auto-locking after jam defense countdown")
            actuators.append(ActuatorEvent(ActuatorKind.LOCK_DOORS, now))
            self.door_locked = True
            self.notes.append("AUTOLOCK")
            self._jam(JamDefense())

        return frames, actuators


# Functional surface over the two machines

def fob_press_button(fob: KeyFob, button: Button, now: int) -> List[Frame]:
    return fob.press_button(button, now)


def fob_handle_frame(fob: KeyFob, frame: Frame, now: int) -> List[Frame]:
    return fob.handle_frame(frame, now)


def fob_tick(fob: KeyFob, now: int) -> List[Frame]:
    return fob.tick(now)


def car_handle_frame(car: CarTransceiver, frame: Frame, now: int) -> Tuple[List[Frame], List[ActuatorEvent]]:
    return car.handle_frame(frame, now)


def car_vehicle_event(car: CarTransceiver, event: VehicleEvent, now: int) -> List[Frame]:
    return car.vehicle_event(event, now)


def car_tick(car: CarTransceiver, now: int) -> Tuple[List[Frame], List[ActuatorEvent]]:
    return car.tick(now)


def car_press_start(car: CarTransceiver, now: int) -> List[Frame]:
    return car.press_start(now)


class DeviceEndpoint(Endpoint):
    """Shared plumbing: decode incoming bytes, forward notes, encode replies."""

    def __init__(self, name: str, device):
        super().__init__(name)
        self.device = device

    def _decode(self, data: bytes) -> Optional[Frame]:
        try:
            return self.device.codec.decode(data)
        except WireError as e:
            logger.debug(f"{self.name}: dropping frame: {e}")
            self.note(f"DROP_{type(e).__name__}")
            return None

    def _emit(self, frames: List[Frame], actuators: List[ActuatorEvent] = ()) -> None:
        for label in self.device.drain_notes():
            self.note(label)
        for event in actuators:
            self.actuate(event.kind.value)
        for frame in frames:
            self.send(self.device.codec.encode(frame))

    def next_deadline(self) -> Optional[int]:
        return self.device.next_deadline()


class FobEndpoint(DeviceEndpoint):

    @property
    def fob(self) -> KeyFob:
        return self.device

    def on_deliver(self, data, sender, now):
        frame = self._decode(data)
        if frame is not None:
            self._emit(self.fob.handle_frame(frame, now))

    def on_button(self, button, now):
        try:
            frames = self.fob.press_button(button, now)
        except DeviceBusy as e:
            logger.debug(str(e))
            self.note("BUSY")
            return
        self._emit(frames)

    def on_timer(self, now):
        self._emit(self.fob.tick(now))


class CarEndpoint(DeviceEndpoint):

    @property
    def car(self) -> CarTransceiver:
        return self.device

    def on_deliver(self, data, sender, now):
        frame = self._decode(data)
        if frame is not None:
            self._emit(*self.car.handle_frame(frame, now))

    def on_vehicle(self, event, now):
        self._emit(self.car.vehicle_event(event, now))

    def on_button(self, button, now):
        # the only button on the car side is the engine start button
        self._emit(self.car.press_start(now))

    def on_timer(self, now):
        self._emit(*self.car.tick(now))
