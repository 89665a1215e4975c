import pytest
from hypothesis import given, settings, strategies as st

from core.devices import CarTransceiver, KeyFob
from core.errors import ExchangeFailed, IdMismatch, PortEmpty, WrongPassword
from core.keystore import CarKeyId, StrongSource, new_key_table
from core.provisioning import (
    RESTORE_PHASE, BoardComputer, ExchangeOutcome, FaultPlan, FobProgrammer, ProgState, RekeyReminder,
    obd_clone, run_key_exchange, tables_consistent
)
from core.wire import FrameCodec, MessageType
from tests.conftest import CAR_ID

PASSWORD = "4711"


@pytest.fixture
def rig(full_table):
    car = CarTransceiver(CAR_ID, full_table, StrongSource(20))
    board = BoardComputer(CAR_ID, full_table, PASSWORD, transceiver=car)
    fob_a = KeyFob(CAR_ID, full_table, StrongSource(21))
    fob_b = KeyFob(CAR_ID, full_table, StrongSource(22))
    board.connect(0, fob_a)
    board.connect(1, fob_b)
    return board, fob_a, fob_b, car


def ready(board):
    board.begin_programming(PASSWORD)
    board.verify_ids()
    return board


def test_wrong_password_keeps_the_board_locked(rig):
    board, *_ = rig
    with pytest.raises(WrongPassword):
        board.begin_programming("0000")
    assert board.prog_state is ProgState.LOCKED


def test_empty_port(rig):
    board, *_ = rig
    board.disconnect(1)
    with pytest.raises(PortEmpty, match="B"):
        board.begin_programming(PASSWORD)


def test_foreign_fob_is_refused(rig):
    board, fob_a, *_ = rig
    board.connect(1, KeyFob(CarKeyId(7), fob_a.table, StrongSource(23)))
    board.begin_programming(PASSWORD)
    with pytest.raises(IdMismatch):
        board.verify_ids()
    assert board.prog_state is ProgState.FAILED


def test_exchange_needs_verified_ids(rig):
    board, *_ = rig
    board.begin_programming(PASSWORD)
    with pytest.raises(IdMismatch):
        board.exchange_keys(StrongSource(1))


def test_successful_exchange(rig):
    board, fob_a, fob_b, car = rig
    old = board.table
    board.begin_programming(PASSWORD)
    report = run_key_exchange(board, fob_a, fob_b, StrongSource(30))

    assert report.outcome is ExchangeOutcome.DONE
    assert report.retries == 0
    assert report.board_written
    assert report.generation_after == old.generation + 1
    assert tables_consistent(board, fob_a, fob_b)
    assert not board.table.same_contents(old)
    assert car.table is board.table
    assert board.prog_state is ProgState.DONE
    assert report.transcript[-1] == f"BOARD_WRITE {report.generation_after}"


def test_transcript_uses_wired_frames(rig):
    board, fob_a, fob_b, _ = rig
    board.begin_programming(PASSWORD)
    report = run_key_exchange(board, fob_a, fob_b, StrongSource(31))
    codec = FrameCodec()
    writes = [line for line in report.transcript if line.startswith("TX A ")]
    types = {codec.decode(bytes.fromhex(line.split()[2])).msg_type for line in writes}
    assert types == {MessageType.PROG_WRITE, MessageType.PROG_COMMIT}
    assert len(writes) == board.block_count + 1


def test_single_lost_block_is_retried(rig):
    board, fob_a, fob_b, _ = rig
    report = ready(board).exchange_keys(StrongSource(32), FaultPlan.single(1, 5))
    assert report.outcome is ExchangeOutcome.DONE
    assert report.retries == 1
    assert "LOST B" in report.transcript
    assert tables_consistent(board, fob_a, fob_b)


def test_first_fob_failing_aborts_with_nothing_changed(rig):
    board, fob_a, fob_b, car = rig
    old = board.table
    report = ready(board).exchange_keys(StrongSource(33), FaultPlan.persistent(0, 3))
    assert report.outcome is ExchangeOutcome.ABORTED
    assert report.failed_fob == "A"
    assert board.table is old and car.table is old
    assert fob_a.table.same_contents(old) and fob_b.table.same_contents(old)
    assert board.prog_state is ProgState.FAILED


def test_second_fob_failing_rolls_the_first_back(rig):
    board, fob_a, fob_b, _ = rig
    old = board.table
    report = ready(board).exchange_keys(StrongSource(34), FaultPlan.persistent(1, 19))
    assert report.outcome is ExchangeOutcome.ROLLED_BACK
    assert report.failed_fob == "B"
    assert not report.board_written
    assert tables_consistent(board, fob_a, fob_b)
    assert fob_a.table.same_contents(old)


def test_failed_restore_is_reported_as_inconsistent(rig):
    board, fob_a, fob_b, _ = rig
    faults = FaultPlan.persistent(1, 0).merged(FaultPlan.persistent(0, 7, RESTORE_PHASE))
    report = ready(board).exchange_keys(StrongSource(35), faults)
    assert report.outcome is ExchangeOutcome.INCONSISTENT
    assert report.divergent_device == "fob A"
    assert not tables_consistent(board, fob_a, fob_b)
    assert not fob_a.table.same_contents(board.table)


def test_run_key_exchange_raises_on_failure(rig):
    board, fob_a, fob_b, _ = rig
    board.begin_programming(PASSWORD)
    with pytest.raises(ExchangeFailed) as info:
        run_key_exchange(board, fob_a, fob_b, StrongSource(36), FaultPlan.persistent(0, 0))
    assert info.value.report.outcome is ExchangeOutcome.ABORTED


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(min_value=0, max_value=10_000), probability=st.sampled_from([0.01, 0.05, 0.2]))
def test_random_faults_never_diverge_silently(seed, probability):
    table = new_key_table(StrongSource(seed))
    board = BoardComputer(CAR_ID, table, PASSWORD)
    fob_a = KeyFob(CAR_ID, table, StrongSource(seed + 1))
    fob_b = KeyFob(CAR_ID, table, StrongSource(seed + 2))
    board.connect(0, fob_a)
    board.connect(1, fob_b)
    report = ready(board).exchange_keys(StrongSource(seed + 3), FaultPlan.random(StrongSource(seed + 4), probability))
    consistent = tables_consistent(board, fob_a, fob_b)
    assert consistent == (report.outcome is not ExchangeOutcome.INCONSISTENT)


def test_fault_plan_probability_bounds():
    with pytest.raises(ValueError):
        FaultPlan.random(StrongSource(1), 1.5)
    assert FaultPlan.random(StrongSource(1), 0.0).failures == frozenset()


def test_incomplete_commit_is_nacked(full_table):
    fob = KeyFob(CAR_ID, full_table, StrongSource(40))
    programmer = FobProgrammer(fob)
    codec = FrameCodec()
    programmer.handle(codec.encode(codec.prog_write(0, full_table.values[:100])))
    reply = codec.decode(programmer.handle(codec.encode(codec.prog_commit(20, 1))))
    assert reply.msg_type is MessageType.PROG_NACK
    assert fob.table is full_table


def test_programmer_drops_corrupt_frames(full_table):
    programmer = FobProgrammer(KeyFob(CAR_ID, full_table, StrongSource(41)))
    data = bytearray(FrameCodec().encode(FrameCodec().prog_id_request()))
    data[-1] ^= 0xFF
    assert programmer.handle(bytes(data)) is None


def test_clone_copies_id_and_table(full_table):
    fob = KeyFob(CAR_ID, full_table, StrongSource(42))
    clone = obd_clone(fob)
    assert clone.id == fob.id
    assert clone.table.same_contents(fob.table)
    assert clone is not fob


def test_rekey_reminder():
    reminder = RekeyReminder(interval_ms=1_000, max_uses=3)
    assert not reminder.is_due(500)
    assert reminder.is_due(1_000)
    reminder.record_exchange(1_000)
    reminder.record_use(3)
    assert reminder.is_due(1_001)
    reminder.record_exchange(1_001)
    assert not reminder.is_due(1_500)
    assert not RekeyReminder().is_due(10**9)
