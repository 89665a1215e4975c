#!/usr/bin/env python3
"""
Reference authentication techniques: fixed code, rolling code and passive
challenge-response. They run on the same channel and frame envelope as the
proposed protocol so attacks and the matrix runner treat all four alike.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

from core.devices import (
    ActuatorEvent, Button, COMMAND_ACTUATORS, DEFAULT_TIMINGS,
    DeviceEndpoint, DeviceTimings, VehicleEvent
)
from core.errors import RollingCodeDesync
from core.keystore import EntropySource
from core.wire import Command, Frame, FrameCodec, MessageType

logger = logging.getLogger('rkesim.baselines')

FEISTEL_ROUNDS = 4
DEFAULT_WINDOW = 16
DEFAULT_CHALLENGE_BITS = 32

Output = Tuple[List[Frame], List[ActuatorEvent]]


@dataclass(frozen=True)
class BaselineParams:
    """Widths of the reference techniques; desk scale shrinks them."""
    code_bits: int = 32
    block_bits: int = 32
    window: int = DEFAULT_WINDOW
    challenge_bits: int = DEFAULT_CHALLENGE_BITS

    def __post_init__(self):
        for name in ("code_bits", "block_bits", "challenge_bits"):
            bits = getattr(self, name)
            if not 2 <= bits <= 32:
                raise ValueError(f"{name} must be in [2, 32], got {bits}")
        for name in ("block_bits", "challenge_bits"):
            if getattr(self, name) % 2:
                raise ValueError(f"{name} must be even, got {getattr(self, name)}")
        if self.window < 1:
            raise ValueError(f"window must be positive, got {self.window}")


FULL_BASELINE = BaselineParams()
DESK_BASELINE = BaselineParams(code_bits=12, block_bits=16, window=DEFAULT_WINDOW, challenge_bits=16)


class FeistelCipher:
    """
    Keyed permutation of `block_bits`-bit words: four Feistel rounds over
    the two halves, one 16-bit subkey of the 64-bit shared key per round.
    """

    def __init__(self, shared_key: int, block_bits: int = 32):
        if not 0 <= shared_key < 2**64:
            raise ValueError("shared key must fit in 64 bits")
        if block_bits % 2 or not 2 <= block_bits <= 32:
            raise ValueError(f"block_bits must be even and in [2, 32], got {block_bits}")
        self.block_bits = block_bits
        self.half_bits = block_bits // 2
        self.mask = (1 << self.half_bits) - 1
        self.subkeys = [(shared_key >> (16 * i)) & 0xFFFF for i in range(FEISTEL_ROUNDS)]

    def _round(self, x: int, subkey: int) -> int:
        y = (x * 0x9E37 + subkey) & self.mask
        y ^= y >> max(1, self.half_bits // 2)
        return (y * 0x5BD1 + (subkey >> 3)) & self.mask

    def encrypt(self, value: int) -> int:
        left, right = (value >> self.half_bits) & self.mask, value & self.mask
        for subkey in self.subkeys:
            left, right = right, left ^ self._round(right, subkey)
        return (left << self.half_bits) | right

    def decrypt(self, value: int) -> int:
        left, right = (value >> self.half_bits) & self.mask, value & self.mask
        for subkey in reversed(self.subkeys):
            left, right = right ^ self._round(left, subkey), left
        return (left << self.half_bits) | right


class BaselineDevice:
    """Common shape: every handler returns (frames, actuator events)."""

    def __init__(self, timings: DeviceTimings = DEFAULT_TIMINGS):
        self.timings = timings
        self.codec = FrameCodec()
        self.notes: List[str] = []
        self.door_locked = True

    def drain_notes(self) -> List[str]:
        notes, self.notes = self.notes, []
        return notes

    def next_deadline(self) -> Optional[int]:
        return None

    def press_button(self, button: Button, now: int) -> List[Frame]:
        return []

    def handle_frame(self, frame: Frame, now: int) -> Output:
        return [], []

    def vehicle_event(self, event: VehicleEvent, now: int) -> Output:
        return [], []

    def tick(self, now: int) -> Output:
        return [], []

    def _actuate(self, command: Command, now: int) -> List[ActuatorEvent]:
        self.notes.append("VERIFIED")
        if command is Command.LOCK:
            self.door_locked = True
        elif command is Command.UNLOCK:
            self.door_locked = False
        return [ActuatorEvent(COMMAND_ACTUATORS[command], now)]


class FixedCodeTransmitter(BaselineDevice):

    def __init__(self, code: int, timings: DeviceTimings = DEFAULT_TIMINGS):
        super().__init__(timings)
        self.code = code

    def press_button(self, button, now):
        return [self.codec.coded_command(MessageType.FIXED_CODE, self.code, Button(button).command)]


class FixedCodeReceiver(BaselineDevice):

    def __init__(self, code: int, timings: DeviceTimings = DEFAULT_TIMINGS):
        super().__init__(timings)
        self.code = code

    def accept(self, code: int) -> bool:
        return code == self.code

    def handle_frame(self, frame, now):
        if frame.msg_type is not MessageType.FIXED_CODE:
            return [], []
        code, command = self.codec.parse_coded_command(frame)
        if not self.accept(code):
            self.notes.append("AUTH_FAILED")
            return [], []
        return [], self._actuate(command, now)


class RollingCodeTransmitter(BaselineDevice):

    def __init__(self, shared_key: int, block_bits: int = 32, counter: int = 0,
                 timings: DeviceTimings = DEFAULT_TIMINGS):
        super().__init__(timings)
        self.cipher = FeistelCipher(shared_key, block_bits)
        self.counter = counter

    def press_button(self, button, now):
        self.counter = (self.counter + 1) % (1 << self.cipher.block_bits)
        ciphertext = self.cipher.encrypt(self.counter)
        return [self.codec.coded_command(MessageType.ROLLING_CODE, ciphertext, Button(button).command)]


class RollingCodeReceiver(BaselineDevice):
    """
    Accepts a code only if it decrypts to a counter in
    (last_accepted, last_accepted + window].
    """

    def __init__(self, shared_key: int, block_bits: int = 32, window: int = DEFAULT_WINDOW,
                 last_accepted: int = 0, timings: DeviceTimings = DEFAULT_TIMINGS):
        super().__init__(timings)
        self.cipher = FeistelCipher(shared_key, block_bits)
        self.window = window
        self.last_accepted = last_accepted

    def accept(self, ciphertext: int) -> bool:
        """
        Raises:
            RollingCodeDesync: Counter lies beyond the acceptance window
        """
        counter = self.cipher.decrypt(ciphertext)
        if counter <= self.last_accepted:
            return False
        if counter > self.last_accepted + self.window:
            raise RollingCodeDesync(
                f"counter {counter} beyond window ({self.last_accepted}, {self.last_accepted + self.window}]"
            )
        self.last_accepted = counter
        return True

    def handle_frame(self, frame, now):
        if frame.msg_type is not MessageType.ROLLING_CODE:
            return [], []
        ciphertext, command = self.codec.parse_coded_command(frame)
        try:
            accepted = self.accept(ciphertext)
        except RollingCodeDesync as e:
            logger.debug(str(e))
            self.notes.append("DESYNC")
            return [], []
        if not accepted:
            self.notes.append("AUTH_FAILED")
            return [], []
        return [], self._actuate(command, now)


class PassiveCRCar(BaselineDevice):
    """
    Passive entry: pulling the handle makes the car interrogate whatever key
    answers on the channel.
    """

    def __init__(self, shared_key: int, entropy: EntropySource,
                 challenge_bits: int = DEFAULT_CHALLENGE_BITS, timings: DeviceTimings = DEFAULT_TIMINGS):
        super().__init__(timings)
        self.cipher = FeistelCipher(shared_key, challenge_bits)
        self.entropy = entropy
        self.challenge_bits = challenge_bits
        self.challenge: Optional[int] = None
        self.deadline: Optional[int] = None

    def next_deadline(self):
        return self.deadline

    def vehicle_event(self, event, now):
        if VehicleEvent(event) is not VehicleEvent.HANDLE_PULLED or self.challenge is not None:
            return [], []
        self.challenge = self.entropy.next_uniform(1 << self.challenge_bits)
        self.deadline = now + self.timings.t_response
        return [self.codec.word32(MessageType.CR_CHALLENGE, self.challenge)], []

    def handle_frame(self, frame, now):
        if frame.msg_type is not MessageType.CR_RESPONSE or self.challenge is None:
            return [], []
        expected = self.cipher.encrypt(self.challenge)
        self.challenge, self.deadline = None, None
        if self.codec.parse_word32(frame) != expected:
            self.notes.append("AUTH_FAILED")
            return [], []
        return [], self._actuate(Command.UNLOCK, now)

    def tick(self, now):
        if self.deadline is not None and now >= self.deadline:
            self.notes.append("TIMEOUT")
            self.challenge, self.deadline = None, None
        return [], []


class PassiveCRKey(BaselineDevice):
    """The car identification device: answers every challenge it hears."""

    def __init__(self, shared_key: int, challenge_bits: int = DEFAULT_CHALLENGE_BITS,
                 timings: DeviceTimings = DEFAULT_TIMINGS):
        super().__init__(timings)
        self.cipher = FeistelCipher(shared_key, challenge_bits)
        self.challenge_bits = challenge_bits

    def respond(self, challenge: int) -> int:
        return self.cipher.encrypt(challenge & ((1 << self.challenge_bits) - 1))

    def handle_frame(self, frame, now):
        if frame.msg_type is not MessageType.CR_CHALLENGE:
            return [], []
        response = self.respond(self.codec.parse_word32(frame))
        return [self.codec.word32(MessageType.CR_RESPONSE, response)], []


def fixed_code_session(tx: FixedCodeTransmitter, rx: FixedCodeReceiver,
                       button: Button = Button.UNLOCK, now: int = 0) -> bool:
    frame = tx.press_button(button, now)[0]
    _frames, actuators = rx.handle_frame(frame, now)
    return bool(actuators)


def rolling_code_session(tx: RollingCodeTransmitter, rx: RollingCodeReceiver,
                         button: Button = Button.UNLOCK, now: int = 0) -> bool:
    """
    One press carried to the receiver.

    Raises:
        RollingCodeDesync: The transmitter ran ahead of the window
    """
    frame = tx.press_button(button, now)[0]
    ciphertext, _command = rx.codec.parse_coded_command(frame)
    return rx.accept(ciphertext)


def passive_cr_session(car: PassiveCRCar, cid: PassiveCRKey, now: int = 0) -> bool:
    frames, _ = car.vehicle_event(VehicleEvent.HANDLE_PULLED, now)
    if not frames:
        return False
    replies, _ = cid.handle_frame(frames[0], now)
    _frames, actuators = car.handle_frame(replies[0], now)
    return bool(actuators)


class BaselineEndpoint(DeviceEndpoint):
    """Puts any baseline device on a radio channel."""

    def on_deliver(self, data, sender, now):
        frame = self._decode(data)
        if frame is not None:
            self._emit(*self.device.handle_frame(frame, now))

    def on_button(self, button, now):
        self._emit(self.device.press_button(button, now))

    def on_vehicle(self, event, now):
        self._emit(*self.device.vehicle_event(event, now))

    def on_timer(self, now):
        self._emit(*self.device.tick(now))
