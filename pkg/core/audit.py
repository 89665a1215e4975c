#!/usr/bin/env python3
"""
Trace auditor: re-derives which input caused every actuator event and
checks the safety, lockout and jam-defense rules over a recorded run.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from pydantic import BaseModel, Field

from core.channel import ADVERSARY_PREFIX, Trace, TraceRecord
from core.errors import InvariantViolation
from core.wire import SYNC, Command, MessageType

logger = logging.getLogger('rkesim.audit')

# inputs that start a new cause on an endpoint
VEHICLE_MARKERS = {"MOTOR_OFF", "DOOR_OPENED", "DOOR_CLOSED", "HANDLE_PULLED"}
TIMER_MARKER = "TIMER"
PRESS_PREFIX = "PRESS_"

COMMAND_ACTS = {"UNLOCK_DOORS", "LOCK_DOORS", "OPEN_BOOT"}
SUCCESS_ACTS = {"UNLOCK_DOORS", "OPEN_BOOT", "START_ENGINE"}
CREDENTIAL_TYPES = {
    MessageType.AUTH_RESPONSE, MessageType.START_CONFIRM, MessageType.FIXED_CODE,
    MessageType.ROLLING_CODE, MessageType.CR_RESPONSE,
}
CLEARING_NOTES = {"TIMEOUT", "AUTH_FAILED", "BLOCKED"}


def frame_type(record: TraceRecord) -> Optional[MessageType]:
    """Message type of a TX/RX record, None when the bytes are not a frame."""
    data = record.data
    if len(data) < 3 or data[:2] != SYNC:
        return None
    try:
        return MessageType(data[2])
    except ValueError:
        return None


def _disarms(rx: Optional[TraceRecord], at: int) -> bool:
    """A ping reply or a lock command received in the same dispatch."""
    if rx is None or rx.at != at:
        return False
    msg_type = frame_type(rx)
    if msg_type is MessageType.PING_REPLY:
        return True
    data = rx.data
    return msg_type is MessageType.COMMAND and len(data) > 4 and data[4] == Command.LOCK


@dataclass(frozen=True)
class Cause:
    kind: str  # 'frame' | 'timer' | 'input'
    at: int
    sender: Optional[str] = None
    line: int = 0

    @property
    def adversarial(self) -> bool:
        return self.kind == "frame" and bool(self.sender) and self.sender.startswith(ADVERSARY_PREFIX)


@dataclass(frozen=True)
class CausedAct:
    record: TraceRecord
    index: int
    cause: Optional[Cause]

    def describe(self) -> str:
        origin = "unknown"
        if self.cause is not None:
            origin = self.cause.sender if self.cause.kind == "frame" else self.cause.kind
        return f"{self.record.at} {self.record.detail} {self.record.endpoint} <- {origin}"


class AuditReport(BaseModel):
    clean: bool
    records: int
    violations: List[str] = Field(default_factory=list)
    actuators: Dict[str, int] = Field(default_factory=dict)
    lockouts: int = 0
    jam_defenses: int = 0


class AttackOutcome(BaseModel):
    """What an attack achieved, judged from the trace alone."""
    succeeded: bool
    attempts: int = 0
    successes: int = 0
    elapsed: int = 0
    evidence: List[str] = Field(default_factory=list)

    @property
    def rate(self) -> float:
        return self.successes / self.attempts if self.attempts else 0.0


@dataclass
class _EndpointAudit:
    cause: Optional[Cause] = None
    may_command: bool = False
    may_start: bool = False
    blocked_at: Optional[int] = None
    blocked_line: int = 0
    armed_at: Optional[int] = None
    honks: int = 0
    last_rx: Optional[TraceRecord] = None


@dataclass
class TraceAuditor:
    """
    Walks a trace once, attributing every ACT record to the most recent
    input dispatched to the same endpoint: a received frame, a timer
    expiry or a physical input.
    """
    trace: Trace
    violations: List[str] = field(default_factory=list)
    caused: List[CausedAct] = field(default_factory=list)

    def __post_init__(self):
        self._walked = False
        self.lockouts = 0
        self.jam_defenses = 0

    @property
    def t_block(self) -> Optional[int]:
        value = self.trace.params.get("t_block")
        return int(value) if value is not None else None

    @property
    def honk_count(self) -> int:
        return int(self.trace.params.get("honk_count", 5))

    @property
    def _line_offset(self) -> int:
        # file line of the first record when written by Trace.write
        return 2 + len(self.trace.params)

    def _violation(self, line: int, rule: str, message: str) -> None:
        self.violations.append(f"line {line}: {rule}: {message}")

    def walk(self) -> "TraceAuditor":
        if self._walked:
            return self
        self._walked = True
        states: Dict[str, _EndpointAudit] = {}
        for index, record in enumerate(self.trace.records):
            line = index + self._line_offset
            state = states.setdefault(record.endpoint, _EndpointAudit())
            if record.kind == "RX":
                state.cause = Cause("frame", record.at, record.sender, line)
                state.last_rx = record
                continue
            if record.kind == "TX":
                self._check_silent_tx(state, record, line)
                continue
            if record.kind == "STATE":
                self._on_state(state, record, line)
                continue
            self._on_act(state, record, index)
        return self

    def _check_silent_tx(self, state: _EndpointAudit, record: TraceRecord, line: int) -> None:
        if state.blocked_at is not None and frame_type(record) is MessageType.CHALLENGE:
            self._violation(line, "lockout", f"{record.endpoint} sent a challenge while blocked")

    def _on_state(self, state: _EndpointAudit, record: TraceRecord, line: int) -> None:
        label = record.detail
        if label == TIMER_MARKER:
            state.cause = Cause("timer", record.at, line=line)
        elif label.startswith(PRESS_PREFIX) or label in VEHICLE_MARKERS:
            state.cause = Cause("input", record.at, line=line)
        elif label == "VERIFIED":
            state.may_command = True
        elif label == "START_VERIFIED":
            state.may_start = True
        elif label in CLEARING_NOTES:
            state.may_command = state.may_start = False
            if label == "BLOCKED":
                state.blocked_at, state.blocked_line = record.at, line
                self.lockouts += 1
        elif label == "UNBLOCKED":
            if state.blocked_at is None:
                self._violation(line, "lockout", f"{record.endpoint} unblocked without a block")
            elif self.t_block is not None and record.at - state.blocked_at != self.t_block:
                self._violation(line, "lockout",
                                f"block lasted {record.at - state.blocked_at} ms, expected {self.t_block}")
            state.blocked_at = None
        elif label == "JAM_ARMED":
            state.armed_at, state.honks = record.at, 0
            self.jam_defenses += 1
        elif label == "JAM_DISARMED":
            if not _disarms(state.last_rx, record.at):
                self._violation(line, "jam-defense",
                                f"{record.endpoint} disarmed without ping reply or lock command")
            state.armed_at = None

    def _on_act(self, state: _EndpointAudit, record: TraceRecord, index: int) -> None:
        line = index + self._line_offset
        cause = state.cause if state.cause is not None and state.cause.at == record.at else None
        self.caused.append(CausedAct(record, index, cause))
        kind = record.detail
        by_timer = cause is not None and cause.kind == "timer"

        if kind == "HONK":
            if not by_timer or state.armed_at is None:
                self._violation(line, "jam-defense", "HONK outside an armed jam defense")
            state.honks += 1
            return
        if kind == "LOCK_DOORS" and by_timer:
            if state.armed_at is None:
                self._violation(line, "jam-defense", "auto-lock without an armed jam defense")
            elif state.honks != self.honk_count:
                self._violation(line, "jam-defense",
                                f"auto-lock after {state.honks} honks, expected {self.honk_count}")
            state.armed_at = None
            return

        if state.blocked_at is not None:
            self._violation(line, "lockout", f"{kind} processed while {record.endpoint} was blocked")
        if kind == "START_ENGINE":
            if not state.may_start:
                self._violation(line, "safety", "START_ENGINE without a verified start transaction")
            state.may_start = False
        elif kind in COMMAND_ACTS:
            if not state.may_command:
                self._violation(line, "safety", f"{kind} without a verified authentication")
            state.may_command = False

    # -- results -----------------------------------------------------------

    def report(self) -> AuditReport:
        self.walk()
        counts: Dict[str, int] = {}
        for record in self.trace.actuators():
            counts[record.detail] = counts.get(record.detail, 0) + 1
        return AuditReport(clean=not self.violations, records=len(self.trace), violations=list(self.violations),
                           actuators=counts, lockouts=self.lockouts, jam_defenses=self.jam_defenses)

    def check(self) -> AuditReport:
        """
        Raises:
            InvariantViolation: If any rule was broken
        """
        report = self.report()
        if not report.clean:
            raise InvariantViolation(report.violations)
        return report

    def adversarial_acts(self) -> List[CausedAct]:
        self.walk()
        return [act for act in self.caused if act.cause is not None and act.cause.adversarial]

    def attack_outcome(self, attack: Optional[str] = None, since: int = 0) -> AttackOutcome:
        """
        Judge an attack from the trace.

        Success means an unlocking or starting actuator event whose cause is
        a frame sent by an adversary endpoint. For the jam attack success
        means the door never locked after the victim's lock press.

        Args:
            attack: Attack kind; 'jam' switches to the jam criterion
            since: Ignore records before this time (eavesdropping phase)

        Returns:
            AttackOutcome: Success flag, attempts and evidence
        """
        self.walk()
        adversary_tx = [r for r in self.trace.records
                        if r.kind == "TX" and r.at >= since and r.endpoint.startswith(ADVERSARY_PREFIX)]
        attempts = sum(1 for r in adversary_tx if frame_type(r) in CREDENTIAL_TYPES)
        first = min((r.at for r in adversary_tx), default=since)
        last = self.trace.records[-1].at if self.trace.records else since
        elapsed = max(0, last - first)

        if attack == "jam":
            lock_at = int(self.trace.params.get("victim_lock_at", since))
            locks = [r for r in self.trace.actuators() if r.detail == "LOCK_DOORS" and r.at >= lock_at]
            evidence = [f"{r.at} LOCK_DOORS {r.endpoint}" for r in locks]
            return AttackOutcome(succeeded=not locks, attempts=1, successes=int(not locks),
                                 elapsed=elapsed, evidence=evidence)

        wins = [act for act in self.adversarial_acts()
                if act.record.detail in SUCCESS_ACTS and act.record.at >= since]
        return AttackOutcome(succeeded=bool(wins), attempts=attempts, successes=len(wins),
                             elapsed=elapsed, evidence=[act.describe() for act in wins])


def audit_trace(trace: Trace) -> AuditReport:
    return TraceAuditor(trace).report()
