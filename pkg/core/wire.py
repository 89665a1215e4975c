#!/usr/bin/env python3
"""
Bit-exact framing for every radio and wired message.

Layout: AA 55 | type | len | payload | CRC-16/CCITT-FALSE (big-endian),
with the CRC computed over type + len + payload. All integers are
big-endian.
"""
import logging
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, Dict, List, Sequence, Tuple

from core.authcrypt import AuthMessage, Challenge
from core.errors import BadCrc, BadSync, SchemaViolation, UnknownType
from core.keystore import FULL_SCALE, CarKeyId, CipherParams

logger = logging.getLogger('rkesim.wire')

SYNC = b"\xAA\x55"
HEADER_SIZE = 4
CRC_SIZE = 2
MAX_PAYLOAD = 255

PROG_BLOCK_VALUES = 100
COMMIT_SEQ = 0xFFFF


class MessageType(IntEnum):
    ID_ANNOUNCE = 0x01
    CHALLENGE = 0x02
    AUTH_RESPONSE = 0x03
    AUTH_OK = 0x04
    COMMAND = 0x05
    ID_REQUEST = 0x06
    START_INIT = 0x07
    START_AUTH = 0x08
    START_CONFIRM = 0x09
    PING = 0x0A
    PING_REPLY = 0x0B
    PROG_ID_REQUEST = 0x20
    PROG_ID_RESPONSE = 0x21
    PROG_WRITE = 0x22
    PROG_ACK = 0x23
    PROG_NACK = 0x24
    PROG_COMMIT = 0x25
    PROG_ROLLBACK = 0x26
    # reference techniques
    FIXED_CODE = 0x30
    ROLLING_CODE = 0x31
    CR_CHALLENGE = 0x32
    CR_RESPONSE = 0x33


class Command(IntEnum):
    LOCK = 0x01
    UNLOCK = 0x02
    OPEN_BOOT = 0x03


@dataclass(frozen=True)
class Frame:
    msg_type: MessageType
    payload: bytes = b""

    def __str__(self) -> str:
        return f"{self.msg_type.name}({self.payload.hex()})"


def _make_crc_table(poly: int = 0x1021) -> List[int]:
    table = []
    for byte in range(256):
        crc = byte << 8
        for _ in range(8):
            if crc & 0x8000:
                crc = ((crc << 1) ^ poly) & 0xFFFF
            else:
                crc = (crc << 1) & 0xFFFF
        table.append(crc)
    return table


_CRC_TABLE = _make_crc_table()


def crc16_ccitt_false(data: bytes, init: int = 0xFFFF) -> int:
    """
    CRC-16/CCITT-FALSE: poly 0x1021, init 0xFFFF, no reflection, no final xor.

    Args:
        data: Bytes to checksum
        init: Initial register value

    Returns:
        int: 16-bit CRC
    """
    crc = init
    for byte in data:
        crc = ((crc << 8) & 0xFFFF) ^ _CRC_TABLE[((crc >> 8) ^ byte) & 0xFF]
    return crc


def _fixed(size: int) -> Callable[[bytes], bool]:
    return lambda payload: len(payload) == size


def _command_payload(prefix: int) -> Callable[[bytes], bool]:
    codes = {int(c) for c in Command}
    return lambda payload: len(payload) == prefix + 1 and payload[-1] in codes


def _prog_write_payload(payload: bytes) -> bool:
    if len(payload) < 3:
        return False
    count = payload[2]
    return 1 <= count <= PROG_BLOCK_VALUES and len(payload) == 3 + 2 * count


class FrameCodec:
    """
    Encoder/decoder for one cipher profile.

    Payload lengths of the challenge-carrying messages follow the profile;
    the full-scale codec gives the canonical 20/10/24/30-byte schemas.
    """

    def __init__(self, params: CipherParams = FULL_SCALE):
        self.params = params
        k = params.sum_count
        n = params.index_count
        self.schema: Dict[MessageType, Callable[[bytes], bool]] = {
            MessageType.ID_ANNOUNCE: _fixed(4),
            MessageType.CHALLENGE: _fixed(2 * n),
            MessageType.AUTH_RESPONSE: _fixed(2 * k),
            MessageType.AUTH_OK: _fixed(0),
            MessageType.COMMAND: _command_payload(0),
            MessageType.ID_REQUEST: _fixed(0),
            MessageType.START_INIT: _fixed(4 + 2 * n),
            MessageType.START_AUTH: _fixed(2 * k + 2 * n),
            MessageType.START_CONFIRM: _fixed(2 * k),
            MessageType.PING: _fixed(4),
            MessageType.PING_REPLY: _fixed(4),
            MessageType.PROG_ID_REQUEST: _fixed(0),
            MessageType.PROG_ID_RESPONSE: _fixed(4),
            MessageType.PROG_WRITE: _prog_write_payload,
            MessageType.PROG_ACK: _fixed(2),
            MessageType.PROG_NACK: _fixed(2),
            MessageType.PROG_COMMIT: _fixed(6),
            MessageType.PROG_ROLLBACK: _fixed(0),
            MessageType.FIXED_CODE: _command_payload(4),
            MessageType.ROLLING_CODE: _command_payload(4),
            MessageType.CR_CHALLENGE: _fixed(4),
            MessageType.CR_RESPONSE: _fixed(4),
        }

    # -- framing -------------------------------------------------------

    @staticmethod
    def message_type(code: int) -> MessageType:
        try:
            return MessageType(code)
        except ValueError:
            shown = f"0x{code:02X}" if isinstance(code, int) else repr(code)
            raise UnknownType(f"type {shown} is not in the catalog")

    def check_schema(self, msg_type: MessageType, payload: bytes) -> None:
        if not self.schema[msg_type](payload):
            raise SchemaViolation(f"{msg_type.name} payload of {len(payload)} bytes violates its schema")

    def encode(self, frame: Frame) -> bytes:
        """
        Serialise a frame.

        Args:
            frame: Frame to encode

        Returns:
            bytes: SYNC + type + len + payload + CRC

        Raises:
            SchemaViolation: If the payload does not fit the type's schema
            UnknownType: If the type code is not in the catalog
        """
        msg_type = self.message_type(frame.msg_type)
        payload = bytes(frame.payload)
        if len(payload) > MAX_PAYLOAD:
            raise SchemaViolation(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
        self.check_schema(msg_type, payload)
        body = bytes([int(msg_type), len(payload)]) + payload
        return SYNC + body + crc16_ccitt_false(body).to_bytes(2, "big")

    def decode(self, data: bytes) -> Frame:
        """
        Parse and validate a serialised frame.

        Args:
            data: Raw bytes

        Returns:
            Frame: The decoded frame

        Raises:
            BadSync: Missing AA 55 prefix
            SchemaViolation: Length field inconsistent or payload off-schema
            BadCrc: Checksum mismatch
            UnknownType: Type code not in the catalog
        """
        data = bytes(data)
        if data[:2] != SYNC:
            raise BadSync(f"expected AA55, got {data[:2].hex() or 'nothing'}")
        if len(data) < HEADER_SIZE + CRC_SIZE:
            raise SchemaViolation(f"frame of {len(data)} bytes is truncated")
        length = data[3]
        if len(data) != HEADER_SIZE + length + CRC_SIZE:
            raise SchemaViolation(f"length field {length} does not match frame of {len(data)} bytes")
        body = data[2:HEADER_SIZE + length]
        received = int.from_bytes(data[-2:], "big")
        computed = crc16_ccitt_false(body)
        if received != computed:
            raise BadCrc(f"crc {received:04X} != {computed:04X}")
        msg_type = self.message_type(data[2])
        payload = data[HEADER_SIZE:HEADER_SIZE + length]
        self.check_schema(msg_type, payload)
        return Frame(msg_type, payload)

    # -- typed payloads --------------------------------------------------

    @staticmethod
    def _words(values: Sequence[int]) -> bytes:
        return struct.pack(f">{len(values)}H", *values)

    @staticmethod
    def _unwords(data: bytes) -> Tuple[int, ...]:
        return struct.unpack(f">{len(data) // 2}H", data)

    def id_announce(self, car_id: CarKeyId) -> Frame:
        return Frame(MessageType.ID_ANNOUNCE, car_id.to_bytes())

    def challenge(self, challenge: Challenge) -> Frame:
        return Frame(MessageType.CHALLENGE, self._words(challenge.indices))

    def auth_response(self, message: AuthMessage) -> Frame:
        return Frame(MessageType.AUTH_RESPONSE, self._words(message.sums))

    def auth_ok(self) -> Frame:
        return Frame(MessageType.AUTH_OK)

    def command(self, command: Command) -> Frame:
        return Frame(MessageType.COMMAND, bytes([int(command)]))

    def id_request(self) -> Frame:
        return Frame(MessageType.ID_REQUEST)

    def start_init(self, car_id: CarKeyId, challenge: Challenge) -> Frame:
        return Frame(MessageType.START_INIT, car_id.to_bytes() + self._words(challenge.indices))

    def start_auth(self, message: AuthMessage, challenge: Challenge) -> Frame:
        return Frame(MessageType.START_AUTH, self._words(message.sums) + self._words(challenge.indices))

    def start_confirm(self, message: AuthMessage) -> Frame:
        return Frame(MessageType.START_CONFIRM, self._words(message.sums))

    def ping(self, car_id: CarKeyId) -> Frame:
        return Frame(MessageType.PING, car_id.to_bytes())

    def ping_reply(self, car_id: CarKeyId) -> Frame:
        return Frame(MessageType.PING_REPLY, car_id.to_bytes())

    def parse_car_id(self, frame: Frame) -> CarKeyId:
        return CarKeyId.from_bytes(frame.payload[:4])

    def parse_challenge(self, frame: Frame) -> Challenge:
        return Challenge(self._unwords(frame.payload))

    def parse_auth_message(self, frame: Frame) -> AuthMessage:
        return AuthMessage(self._unwords(frame.payload))

    def parse_command(self, frame: Frame) -> Command:
        return Command(frame.payload[-1])

    def parse_start_init(self, frame: Frame) -> Tuple[CarKeyId, Challenge]:
        return CarKeyId.from_bytes(frame.payload[:4]), Challenge(self._unwords(frame.payload[4:]))

    def parse_start_auth(self, frame: Frame) -> Tuple[AuthMessage, Challenge]:
        k = self.params.sum_count
        words = self._unwords(frame.payload)
        return AuthMessage(words[:k]), Challenge(words[k:])

    # -- provisioning ----------------------------------------------------

    def prog_id_request(self) -> Frame:
        return Frame(MessageType.PROG_ID_REQUEST)

    def prog_id_response(self, car_id: CarKeyId) -> Frame:
        return Frame(MessageType.PROG_ID_RESPONSE, car_id.to_bytes())

    def prog_write(self, seq: int, values: Sequence[int]) -> Frame:
        return Frame(MessageType.PROG_WRITE, struct.pack(">HB", seq, len(values)) + self._words(values))

    def parse_prog_write(self, frame: Frame) -> Tuple[int, Tuple[int, ...]]:
        seq, _count = struct.unpack(">HB", frame.payload[:3])
        return seq, self._unwords(frame.payload[3:])

    def prog_ack(self, seq: int) -> Frame:
        return Frame(MessageType.PROG_ACK, struct.pack(">H", seq))

    def prog_nack(self, seq: int) -> Frame:
        return Frame(MessageType.PROG_NACK, struct.pack(">H", seq))

    def parse_seq(self, frame: Frame) -> int:
        return struct.unpack(">H", frame.payload)[0]

    def prog_commit(self, block_count: int, generation: int) -> Frame:
        return Frame(MessageType.PROG_COMMIT, struct.pack(">HI", block_count, generation))

    def parse_prog_commit(self, frame: Frame) -> Tuple[int, int]:
        return struct.unpack(">HI", frame.payload)

    def prog_rollback(self) -> Frame:
        return Frame(MessageType.PROG_ROLLBACK)

    # -- reference techniques ---------------------------------------------

    def coded_command(self, msg_type: MessageType, code: int, command: Command) -> Frame:
        return Frame(msg_type, struct.pack(">IB", code, int(command)))

    def parse_coded_command(self, frame: Frame) -> Tuple[int, Command]:
        code, command = struct.unpack(">IB", frame.payload)
        return code, Command(command)

    def word32(self, msg_type: MessageType, value: int) -> Frame:
        return Frame(msg_type, struct.pack(">I", value))

    def parse_word32(self, frame: Frame) -> int:
        return struct.unpack(">I", frame.payload)[0]


DEFAULT_CODEC = FrameCodec(FULL_SCALE)


def encode(frame: Frame) -> bytes:
    return DEFAULT_CODEC.encode(frame)


def decode(data: bytes) -> Frame:
    return DEFAULT_CODEC.decode(data)
