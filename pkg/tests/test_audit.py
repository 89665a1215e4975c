import pytest

from core.adversaries import build_target, jam_attack, scan_attack
from core.audit import TraceAuditor, audit_trace
from core.channel import Trace
from core.errors import InvariantViolation


def happy_trace() -> Trace:
    target = build_target("proposed", seed=1)
    target.legit_session(100)
    return target.sim.run_until(2_000)


def with_lines(trace: Trace, *extra: str):
    lines = trace.lines() + list(extra)
    return lines, Trace.parse(lines)


def test_happy_path_is_clean():
    report = audit_trace(happy_trace())
    assert report.clean
    assert report.actuators == {"UNLOCK_DOORS": 1}
    assert report.lockouts == 0


def test_unverified_unlock_is_flagged_with_its_line():
    lines, trace = with_lines(happy_trace(), "3000 ACT car UNLOCK_DOORS")
    report = audit_trace(trace)
    assert not report.clean
    assert report.violations == [f"line {len(lines)}: safety: UNLOCK_DOORS without a verified authentication"]


def test_check_raises():
    _, trace = with_lines(happy_trace(), "3000 ACT car OPEN_BOOT")
    with pytest.raises(InvariantViolation) as info:
        TraceAuditor(trace).check()
    assert "safety" in info.value.violations[0]


def test_verification_covers_one_command_only():
    trace = happy_trace()
    unlock = trace.actuators()[0]
    _, doubled = with_lines(trace, f"{unlock.at} ACT car UNLOCK_DOORS")
    assert not audit_trace(doubled).clean


def test_unverified_start_is_flagged():
    _, trace = with_lines(happy_trace(), "3000 ACT car START_ENGINE")
    assert "START_ENGINE" in audit_trace(trace).violations[0]


def test_actuator_attribution():
    auditor = TraceAuditor(happy_trace()).walk()
    [act] = auditor.caused
    assert act.cause.kind == "frame"
    assert act.cause.sender == "fob"
    assert not act.cause.adversarial


@pytest.fixture(scope="module")
def lockout_trace():
    return scan_attack(build_target("proposed", seed=2), budget=4).trace


def test_lockout_trace_is_clean(lockout_trace):
    report = audit_trace(lockout_trace)
    assert report.clean
    assert report.lockouts == 1
    blocked = lockout_trace.select("STATE", "car", "BLOCKED")
    unblocked = lockout_trace.select("STATE", "car", "UNBLOCKED")
    assert unblocked[0].at - blocked[0].at == 180_000


def test_wrong_block_duration_is_flagged(lockout_trace):
    tampered = Trace(list(lockout_trace.records), dict(lockout_trace.params, t_block="1000"))
    violations = audit_trace(tampered).violations
    assert any("lockout: block lasted 180000 ms, expected 1000" in v for v in violations)


def test_challenge_during_block_is_flagged(lockout_trace):
    blocked = lockout_trace.select("STATE", "car", "BLOCKED")[0]
    challenge = next(r for r in lockout_trace.select("TX", "car") if r.detail[4:6] == "02")
    records = list(lockout_trace.records)
    position = records.index(blocked) + 1
    forged = Trace.parse([f"{blocked.at} TX car {challenge.detail}"]).records[0]
    records.insert(position, forged)
    violations = audit_trace(Trace(records, dict(lockout_trace.params))).violations
    assert any("challenge while blocked" in v for v in violations)


@pytest.fixture(scope="module")
def jam_trace():
    return jam_attack(build_target("proposed", seed=6)).trace


def test_jam_defense_trace_is_clean(jam_trace):
    report = audit_trace(jam_trace)
    assert report.clean
    assert report.jam_defenses == 1
    assert report.actuators == {"HONK": 5, "LOCK_DOORS": 1}


def test_honk_outside_the_defense_is_flagged(jam_trace):
    _, trace = with_lines(jam_trace, "40000 ACT car HONK")
    assert any("jam-defense: HONK outside" in v for v in audit_trace(trace).violations)


def test_disarm_without_reason_is_flagged(jam_trace):
    _, trace = with_lines(jam_trace, "40000 STATE car JAM_DISARMED")
    assert any("disarmed without ping reply" in v for v in audit_trace(trace).violations)
