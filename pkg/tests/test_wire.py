import binascii

import pytest
from hypothesis import given, settings, strategies as st

from core.authcrypt import AuthMessage, Challenge
from core.errors import BadCrc, BadSync, SchemaViolation, UnknownType, WireError
from core.keystore import CarKeyId, StrongSource
from core.wire import (
    COMMIT_SEQ, SYNC, Command, Frame, FrameCodec, MessageType, crc16_ccitt_false, decode, encode
)
from tests.conftest import CAR_ID, TOY

codec = FrameCodec()


def test_crc_check_value():
    assert crc16_ccitt_false(b"123456789") == 0x29B1


@given(st.binary(max_size=64))
def test_crc_matches_binascii(data):
    assert crc16_ccitt_false(data) == binascii.crc_hqx(data, 0xFFFF)


def test_layout_of_an_encoded_frame():
    data = encode(codec.id_announce(CarKeyId(0x01020304)))
    assert data[:2] == SYNC
    assert data[2] == 0x01
    assert data[3] == 4
    assert data[4:8] == b"\x01\x02\x03\x04"
    assert int.from_bytes(data[8:], "big") == crc16_ccitt_false(data[2:8])


def test_full_scale_payload_lengths():
    challenge = Challenge(tuple(range(10)))
    message = AuthMessage((1, 2, 3, 4, 5))
    assert len(codec.challenge(challenge).payload) == 20
    assert len(codec.auth_response(message).payload) == 10
    assert len(codec.start_init(CAR_ID, challenge).payload) == 24
    assert len(codec.start_auth(message, challenge).payload) == 30
    assert len(codec.command(Command.UNLOCK).payload) == 1


def test_typed_payloads_parse_back():
    challenge = Challenge((1999, 0, 5, 7, 11, 13, 17, 19, 23, 1024))
    message = AuthMessage((65535, 0, 1, 2, 3))
    assert codec.parse_challenge(decode(encode(codec.challenge(challenge)))) == challenge
    assert codec.parse_auth_message(decode(encode(codec.auth_response(message)))) == message
    assert codec.parse_start_auth(decode(encode(codec.start_auth(message, challenge)))) == (message, challenge)
    assert codec.parse_start_init(decode(encode(codec.start_init(CAR_ID, challenge)))) == (CAR_ID, challenge)
    assert codec.parse_command(decode(encode(codec.command(Command.OPEN_BOOT)))) is Command.OPEN_BOOT


def test_provisioning_payloads():
    assert codec.parse_prog_write(codec.prog_write(3, [1, 2, 3])) == (3, (1, 2, 3))
    assert codec.parse_prog_commit(codec.prog_commit(20, 7)) == (20, 7)
    assert codec.parse_seq(codec.prog_ack(COMMIT_SEQ)) == 0xFFFF
    assert decode(encode(codec.prog_rollback())).msg_type is MessageType.PROG_ROLLBACK


def test_toy_codec_lengths():
    toy = FrameCodec(TOY)
    frame = toy.challenge(Challenge((1, 2, 3, 4)))
    assert len(frame.payload) == 8
    assert toy.decode(toy.encode(frame)) == frame
    with pytest.raises(SchemaViolation):
        codec.decode(toy.encode(frame))


def test_error_kinds():
    good = encode(codec.auth_ok())
    with pytest.raises(BadSync):
        decode(b"\x55\xAA" + good[2:])
    corrupted = bytearray(good)
    corrupted[-1] ^= 0x01
    with pytest.raises(BadCrc):
        decode(bytes(corrupted))
    body = bytes([0x7F, 0])
    with pytest.raises(UnknownType):
        decode(SYNC + body + crc16_ccitt_false(body).to_bytes(2, "big"))
    body = bytes([MessageType.COMMAND, 1, 0x09])
    with pytest.raises(SchemaViolation):
        decode(SYNC + body + crc16_ccitt_false(body).to_bytes(2, "big"))
    with pytest.raises(SchemaViolation):
        encode(Frame(MessageType.CHALLENGE, b"\x00" * 19))
    with pytest.raises(WireError):
        decode(good[:-1])


@pytest.mark.parametrize("code", [0x7F, 0x00, "CHALLENGE"])
def test_encoding_an_uncatalogued_type_is_a_wire_error(code):
    with pytest.raises(UnknownType):
        encode(Frame(code, b""))


def _sample_frames():
    entropy = StrongSource(77)
    challenge = Challenge(entropy.draw_many(2000, 10))
    message = AuthMessage(entropy.draw_many(2**16, 5))
    return [
        codec.id_announce(CAR_ID), codec.challenge(challenge), codec.auth_response(message),
        codec.auth_ok(), codec.command(Command.LOCK), codec.id_request(),
        codec.start_init(CAR_ID, challenge), codec.start_auth(message, challenge),
        codec.start_confirm(message), codec.ping(CAR_ID), codec.ping_reply(CAR_ID),
        codec.prog_write(0, list(range(100))), codec.prog_nack(4),
        codec.coded_command(MessageType.ROLLING_CODE, 0xCAFEBABE, Command.UNLOCK),
        codec.word32(MessageType.CR_CHALLENGE, 12345),
    ]


@pytest.mark.parametrize("frame", _sample_frames(), ids=lambda f: f.msg_type.name)
def test_every_single_bit_flip_is_rejected(frame):
    data = encode(frame)
    for position in range(len(data) * 8):
        corrupted = bytearray(data)
        corrupted[position // 8] ^= 1 << (position % 8)
        with pytest.raises(WireError):
            decode(bytes(corrupted))


@settings(max_examples=200)
@given(st.lists(st.integers(0, 1999), min_size=10, max_size=10))
def test_random_challenges_survive_the_wire(indices):
    frame = codec.challenge(Challenge(tuple(indices)))
    assert decode(encode(frame)) == frame
