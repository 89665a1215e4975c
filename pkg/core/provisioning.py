#!/usr/bin/env python3
"""
Wired key exchange: the board computer generates a fresh key table and
programs both connected fobs and then itself, with one retry per block and
rollback when the second fob cannot be written.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, List, Optional, Tuple

from pydantic import BaseModel, Field

from core.errors import (
    ExchangeFailed, IdMismatch, PortEmpty, WireError, WrongPassword
)
from core.devices import CarTransceiver, KeyFob
from core.keystore import CarKeyId, EntropySource, KeyTable, StrongSource, new_key_table
from core.wire import COMMIT_SEQ, PROG_BLOCK_VALUES, Frame, FrameCodec, MessageType

logger = logging.getLogger('rkesim.provisioning')

PORT_NAMES = ("A", "B")
MAX_ATTEMPTS = 2
WRITE_PHASE = "write"
RESTORE_PHASE = "restore"


class ProgState(str, Enum):
    LOCKED = "LOCKED"
    READY = "READY"
    VERIFY_IDS = "VERIFY_IDS"
    WRITING = "WRITING"
    COMMITTING = "COMMITTING"
    ROLLING_BACK = "ROLLING_BACK"
    DONE = "DONE"
    FAILED = "FAILED"


class ExchangeOutcome(str, Enum):
    DONE = "DONE"
    ABORTED = "ABORTED"
    ROLLED_BACK = "ROLLED_BACK"
    INCONSISTENT = "INCONSISTENT"


class ExchangeReport(BaseModel):
    """Result of one key exchange, serialisable into the CLI report."""
    outcome: ExchangeOutcome
    failed_fob: Optional[str] = None
    divergent_device: Optional[str] = None
    retries: int = 0
    generation_before: int = 0
    generation_after: int = 0
    board_written: bool = False
    transcript: List[str] = Field(default_factory=list)


@dataclass(frozen=True)
class FaultPlan:
    """
    Deterministic write-failure schedule.

    A failure key is (fob_index, block_seq, attempt, phase); a listed write
    is lost on the wire and the board sees a timeout.
    """
    failures: FrozenSet[Tuple[int, int, int, str]] = frozenset()

    def fails(self, fob_index: int, block_seq: int, attempt: int, phase: str = WRITE_PHASE) -> bool:
        return (fob_index, block_seq, attempt, phase) in self.failures

    @classmethod
    def none(cls) -> "FaultPlan":
        return cls()

    @classmethod
    def single(cls, fob_index: int, block_seq: int, attempt: int = 1,
               phase: str = WRITE_PHASE) -> "FaultPlan":
        return cls(frozenset({(fob_index, block_seq, attempt, phase)}))

    @classmethod
    def persistent(cls, fob_index: int, block_seq: int, phase: str = WRITE_PHASE) -> "FaultPlan":
        return cls(frozenset((fob_index, block_seq, attempt, phase)
                             for attempt in range(1, MAX_ATTEMPTS + 1)))

    def merged(self, other: "FaultPlan") -> "FaultPlan":
        return FaultPlan(self.failures | other.failures)

    @classmethod
    def random(cls, entropy: EntropySource, probability: float, block_count: int = 20,
               phases: Tuple[str, ...] = (WRITE_PHASE, RESTORE_PHASE)) -> "FaultPlan":
        """
        Draw every (fob, block, attempt, phase) write independently.

        Args:
            entropy: Source of the draws (a seeded source gives a reproducible plan)
            probability: Per-write failure probability in [0, 1]
            block_count: Blocks per fob
            phases: Phases that may fail

        Returns:
            FaultPlan: The drawn plan
        """
        if not 0.0 <= probability <= 1.0:
            raise ValueError(f"probability must be in [0, 1], got {probability}")
        scale = 1_000_000
        threshold = int(round(probability * scale))
        failures = set()
        for phase in phases:
            for fob_index in range(len(PORT_NAMES)):
                for block_seq in range(block_count):
                    for attempt in range(1, MAX_ATTEMPTS + 1):
                        if entropy.next_uniform(scale) < threshold:
                            failures.add((fob_index, block_seq, attempt, phase))
        return cls(frozenset(failures))


class FobProgrammer:
    """
    Fob side of the wired link. Writes land in a staging buffer; the live
    table is swapped only on a complete PROG_COMMIT.
    """

    def __init__(self, fob: KeyFob):
        self.fob = fob
        self.codec = FrameCodec(fob.table.params)
        self.staging: Dict[int, Tuple[int, ...]] = {}
        self.commits = 0

    def handle(self, data: bytes) -> Optional[bytes]:
        try:
            frame = self.codec.decode(data)
        except WireError as e:
            logger.debug(f"Fob {self.fob.id}: dropping wired frame: {e}")
            return None
        reply = self._handle_frame(frame)
        return self.codec.encode(reply) if reply is not None else None

    def _handle_frame(self, frame: Frame) -> Optional[Frame]:
        codec = self.codec
        msg_type = frame.msg_type
        if msg_type is MessageType.PROG_ID_REQUEST:
            return codec.prog_id_response(self.fob.id)
        if msg_type is MessageType.PROG_WRITE:
            seq, values = codec.parse_prog_write(frame)
            self.staging[seq] = values
            return codec.prog_ack(seq)
        if msg_type is MessageType.PROG_COMMIT:
            block_count, generation = codec.parse_prog_commit(frame)
            table = self._assemble(block_count, generation)
            if table is None:
                return codec.prog_nack(COMMIT_SEQ)
            self.fob.table = table
            self.staging.clear()
            self.commits += 1
            return codec.prog_ack(COMMIT_SEQ)
        if msg_type is MessageType.PROG_ROLLBACK:
            self.staging.clear()
            return codec.prog_ack(COMMIT_SEQ)
        return None

    def _assemble(self, block_count: int, generation: int) -> Optional[KeyTable]:
        if any(seq not in self.staging for seq in range(block_count)):
            return None
        values = [v for seq in range(block_count) for v in self.staging[seq]]
        try:
            return KeyTable(tuple(values), generation, self.fob.table.params)
        except ValueError as e:
            logger.warning(f"Fob {self.fob.id}: refusing commit: {e}")
            return None


class BoardComputer:
    """
    The car's central console with its two wired fob ports.
    """

    def __init__(self, car_id: CarKeyId, table: KeyTable, password: str,
                 transceiver: Optional[CarTransceiver] = None):
        self.id = car_id
        self.table = table
        self._password = password
        self.transceiver = transceiver
        self.codec = FrameCodec(table.params)
        self.ports: List[Optional[FobProgrammer]] = [None, None]
        self.prog_state = ProgState.LOCKED
        self.exchanges = 0

    def connect(self, port_index: int, fob: KeyFob) -> FobProgrammer:
        programmer = FobProgrammer(fob)
        self.ports[port_index] = programmer
        return programmer

    def disconnect(self, port_index: int) -> None:
        self.ports[port_index] = None

    def _set_state(self, state: ProgState) -> None:
        logger.debug(f"Board {self.id}: {self.prog_state.value} -> {state.value}")
        self.prog_state = state

    @property
    def block_count(self) -> int:
        return math.ceil(self.table.params.table_size / PROG_BLOCK_VALUES)

    # -- operations --------------------------------------------------------

    def begin_programming(self, password_attempt: str) -> ProgState:
        """
        Unlock the programming function.

        Raises:
            WrongPassword: Password does not match (stays LOCKED)
            PortEmpty: A port has no fob connected
        """
        if password_attempt != self._password:
            logger.warning(f"Board {self.id}: wrong programming password")
            self._set_state(ProgState.LOCKED)
            raise WrongPassword("wrong programming password")
        empty = [PORT_NAMES[i] for i, port in enumerate(self.ports) if port is None]
        if empty:
            raise PortEmpty(f"no fob connected on port(s) {', '.join(empty)}")
        self._set_state(ProgState.READY)
        return self.prog_state

    def verify_ids(self, transcript: Optional[List[str]] = None) -> ProgState:
        """
        Ask both fobs for their id.

        Raises:
            IdMismatch: A fob answered with a foreign id or not at all
        """
        if self.prog_state not in (ProgState.READY, ProgState.VERIFY_IDS, ProgState.DONE, ProgState.FAILED):
            raise WrongPassword("programming is locked")
        transcript = transcript if transcript is not None else []
        for index, port in enumerate(self.ports):
            if port is None:
                raise PortEmpty(f"no fob connected on port {PORT_NAMES[index]}")
            reply = self._transfer(index, self.codec.prog_id_request(), transcript)
            if reply is None or reply.msg_type is not MessageType.PROG_ID_RESPONSE:
                self._set_state(ProgState.FAILED)
                raise IdMismatch(f"fob on port {PORT_NAMES[index]} did not answer")
            fob_id = self.codec.parse_car_id(reply)
            if fob_id != self.id:
                self._set_state(ProgState.FAILED)
                raise IdMismatch(f"fob on port {PORT_NAMES[index]} belongs to car {fob_id}, not {self.id}")
        self._set_state(ProgState.VERIFY_IDS)
        return self.prog_state

    def _transfer(self, index: int, frame: Frame, transcript: List[str],
                  lost: bool = False) -> Optional[Frame]:
        name = PORT_NAMES[index]
        data = self.codec.encode(frame)
        transcript.append(f"TX {name} {data.hex()}")
        if lost:
            transcript.append(f"LOST {name}")
            return None
        reply = self.ports[index].handle(data)
        if reply is None:
            transcript.append(f"TIMEOUT {name}")
            return None
        transcript.append(f"RX {name} {reply.hex()}")
        return self.codec.decode(reply)

    def _program(self, index: int, table: KeyTable, faults: "FaultPlan", phase: str,
                 report: ExchangeReport) -> bool:
        """Stream `table` to one fob and commit it; False if a block failed twice."""
        values = table.values
        for seq in range(self.block_count):
            self._set_state(ProgState.WRITING)
            block = values[seq * PROG_BLOCK_VALUES:(seq + 1) * PROG_BLOCK_VALUES]
            written = False
            for attempt in range(1, MAX_ATTEMPTS + 1):
                if attempt > 1:
                    report.retries += 1
                lost = faults.fails(index, seq, attempt, phase)
                reply = self._transfer(index, self.codec.prog_write(seq, block), report.transcript, lost)
                if reply is not None and reply.msg_type is MessageType.PROG_ACK \
                        and self.codec.parse_seq(reply) == seq:
                    written = True
                    break
            if not written:
                logger.warning(f"Board {self.id}: block {seq} to fob {PORT_NAMES[index]} "
                               f"failed {MAX_ATTEMPTS} times ({phase})")
                return False
        self._set_state(ProgState.COMMITTING)
        reply = self._transfer(index, self.codec.prog_commit(self.block_count, table.generation),
                               report.transcript)
        return reply is not None and reply.msg_type is MessageType.PROG_ACK

    def _discard_staging(self, index: int, report: ExchangeReport) -> None:
        self._transfer(index, self.codec.prog_rollback(), report.transcript)

    def _write_own_table(self, table: KeyTable, report: ExchangeReport) -> None:
        self.table = table
        if self.transceiver is not None:
            self.transceiver.table = table
        report.board_written = True
        report.transcript.append(f"BOARD_WRITE {table.generation}")

    def exchange_keys(self, entropy: EntropySource, faults: Optional[FaultPlan] = None) -> ExchangeReport:
        """
        Generate a new table and program fob A, fob B, then the board.

        Args:
            entropy: Source of the new table
            faults: Write-failure schedule (none by default)

        Returns:
            ExchangeReport: Outcome, retries and wired transcript
        """
        if self.prog_state is not ProgState.VERIFY_IDS:
            raise IdMismatch("fob ids have not been verified")
        faults = faults or FaultPlan()
        old = self.table
        new = new_key_table(entropy, old.params).with_generation(old.generation + 1)
        report = ExchangeReport(outcome=ExchangeOutcome.DONE, generation_before=old.generation,
                                generation_after=old.generation)
        self.exchanges += 1

        if not self._program(0, new, faults, WRITE_PHASE, report):
            self._discard_staging(0, report)
            report.outcome = ExchangeOutcome.ABORTED
            report.failed_fob = PORT_NAMES[0]
            self._set_state(ProgState.FAILED)
            logger.warning(f"Board {self.id}: key exchange aborted, no device changed")
            return report

        if not self._program(1, new, faults, WRITE_PHASE, report):
            report.failed_fob = PORT_NAMES[1]
            self._set_state(ProgState.ROLLING_BACK)
            self._discard_staging(1, report)
            if self._program(0, old, faults, RESTORE_PHASE, report):
                report.outcome = ExchangeOutcome.ROLLED_BACK
                logger.warning(f"Board {self.id}: fob B failed, fob A restored to the old keys")
            else:
                self._discard_staging(0, report)
                report.outcome = ExchangeOutcome.INCONSISTENT
                report.divergent_device = f"fob {PORT_NAMES[0]}"
                logger.error(f"Board {self.id}: restoring fob A failed, fob A holds the new keys")
            self._set_state(ProgState.FAILED)
            return report

        self._write_own_table(new, report)
        report.generation_after = new.generation
        self._set_state(ProgState.DONE)
        logger.info(f"Board {self.id}: key exchange done, generation {new.generation}")
        return report


def begin_programming(board: BoardComputer, password_attempt: str) -> ProgState:
    return board.begin_programming(password_attempt)


def run_key_exchange(board: BoardComputer, fob_a: KeyFob, fob_b: KeyFob, entropy: EntropySource,
                     faults: Optional[FaultPlan] = None) -> ExchangeReport:
    """
    Connect both fobs, verify their ids if needed and run the exchange.

    The board must already have been unlocked with `begin_programming`.

    Raises:
        IdMismatch: A fob belongs to another car (nothing written)
        ExchangeFailed: The exchange did not reach DONE; carries the report
    """
    for index, fob in enumerate((fob_a, fob_b)):
        port = board.ports[index]
        if port is None or port.fob is not fob:
            board.connect(index, fob)
    if board.prog_state is not ProgState.VERIFY_IDS:
        board.verify_ids()
    report = board.exchange_keys(entropy, faults)
    if report.outcome is not ExchangeOutcome.DONE:
        raise ExchangeFailed(report)
    return report


def tables_consistent(board: BoardComputer, fob_a: KeyFob, fob_b: KeyFob) -> bool:
    return board.table.same_contents(fob_a.table) and board.table.same_contents(fob_b.table)


@dataclass
class RekeyReminder:
    """
    Tells the driver a key exchange is due, by elapsed time or by number of
    transactions since the last exchange. A limit of None never triggers.
    """
    interval_ms: Optional[int] = None
    max_uses: Optional[int] = None
    last_exchange: int = 0
    uses: int = field(default=0)

    def record_exchange(self, now: int) -> None:
        self.last_exchange = now
        self.uses = 0

    def record_use(self, count: int = 1) -> None:
        self.uses += count

    def is_due(self, now: int) -> bool:
        if self.interval_ms is not None and now - self.last_exchange >= self.interval_ms:
            return True
        return self.max_uses is not None and self.uses >= self.max_uses


def obd_clone(fob: KeyFob, entropy: Optional[EntropySource] = None) -> KeyFob:
    """
    Copy a fob's id and key table onto a blank fob, the way an OBD key
    programmer does during a test drive.
    """
    return KeyFob(fob.id, fob.table, entropy or StrongSource(fob.id.value), fob.timings)
