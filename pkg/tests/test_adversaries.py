import pytest

from core.adversaries import (
    CAR, LcgPredictor, build_target, cloned_key_attack, forward_prediction_attack, jam_attack,
    playback_attack, record_sessions, relay_attack, replay_success_probability, replay_trials,
    scan_attack
)
from core.audit import TraceAuditor
from core.authcrypt import expected_guess_probability
from core.baselines import BaselineParams
from core.devices import DeviceTimings
from core.errors import PredictorFailed
from core.keystore import CipherParams, KeyTable, StrongSource, WeakSource, new_key_table
from core.stats import within_sigma
from tests.conftest import TOY

REPLAY_TOY = CipherParams(word_bits=16, sum_count=1, table_size=8)


# -- weak generator predictor ---------------------------------------------------

def test_predictor_recovers_weak_state():
    source = WeakSource(12345)
    observed = [source.next_uniform(2000) for _ in range(10)]
    upcoming = [source.next_uniform(2000) for _ in range(5)]
    predictor = LcgPredictor(2000)
    predictor.observe(observed)
    assert predictor.predict(5) == upcoming
    assert predictor.recover().size >= 1


def test_predictor_keeps_filtering_after_recovery():
    source = WeakSource(99)
    predictor = LcgPredictor(2000)
    predictor.observe([source.next_uniform(2000) for _ in range(10)])
    predictor.recover()
    predictor.observe([source.next_uniform(2000) for _ in range(3)])
    assert predictor.predict(1) == [source.next_uniform(2000)]


def test_predictor_rejects_strong_outputs():
    source = StrongSource(1)
    predictor = LcgPredictor(2000)
    predictor.observe([source.next_uniform(2000) for _ in range(10)])
    with pytest.raises(PredictorFailed):
        predictor.predict(1)


def test_predictor_needs_enough_outputs():
    predictor = LcgPredictor(2**16)
    predictor.observe([WeakSource(7).next_uniform(2**16)])
    with pytest.raises(PredictorFailed, match="disagree"):
        predictor.predict(1)


def test_predictor_without_observations():
    with pytest.raises(PredictorFailed):
        LcgPredictor(2000).recover()


def test_predictor_bound_validation():
    with pytest.raises(ValueError):
        LcgPredictor(0)


# -- exact replay odds ---------------------------------------------------------------

def test_replay_oracle_on_a_constant_table():
    table = KeyTable((5,) * 8, 0, REPLAY_TOY)
    recorded, latest = record_sessions(table, StrongSource(1), 3)
    assert replay_success_probability(table, recorded, latest) == 1.0


def test_replay_oracle_counts_recorded_challenges():
    table = new_key_table(StrongSource(2), REPLAY_TOY)
    recorded, latest = record_sessions(table, StrongSource(3), 10)
    p = replay_success_probability(table, recorded, latest)
    assert len(recorded) / 64 <= p <= 1.0


def test_replay_trials_match_the_oracle():
    table = new_key_table(StrongSource(4), REPLAY_TOY)
    recorded, latest = record_sessions(table, StrongSource(5), 6)
    p = replay_success_probability(table, recorded, latest)
    trials = 20_000
    accepted = replay_trials(table, recorded, latest, StrongSource(6), trials)
    assert within_sigma(accepted, trials, p, sigmas=4.0)


def test_replay_oracle_refuses_full_scale(full_table):
    recorded, latest = record_sessions(full_table, StrongSource(1), 1)
    with pytest.raises(ValueError):
        replay_success_probability(full_table, recorded, latest)


# -- scan ------------------------------------------------------------------------------

def test_scan_breaks_a_short_fixed_code():
    target = build_target("fixed", baseline=BaselineParams(code_bits=4), seed=1)
    run = scan_attack(target, budget=200)
    assert run.outcome.attempts == 200
    assert run.outcome.successes > 0


def test_scan_against_proposed_hits_the_lockout():
    target = build_target("proposed", seed=2)
    run = scan_attack(target, budget=6)
    assert run.outcome.attempts == 6
    assert run.outcome.successes == 0
    assert target.car_device.lockouts == 2
    assert run.details["polls"] > 0
    assert TraceAuditor(run.trace).report().clean


def test_scan_without_lockout_never_blocks():
    target = build_target("proposed", timings=DeviceTimings(lockout_enabled=False), seed=3)
    run = scan_attack(target, budget=10)
    assert run.outcome.attempts == 10
    assert target.car_device.lockouts == 0
    assert run.details["polls"] == 0


@pytest.mark.slow
def test_scan_hits_at_the_guess_probability():
    target = build_target("proposed", params=TOY, timings=DeviceTimings(lockout_enabled=False), seed=8)
    run = scan_attack(target, budget=4_000)
    assert run.outcome.attempts == 4_000
    assert within_sigma(run.outcome.successes, run.outcome.attempts, expected_guess_probability(TOY), sigmas=4)


def test_scan_gives_up_when_the_car_never_answers():
    target = build_target("proposed", seed=12)
    run = scan_attack(target, budget=5, learn_sessions=0)
    assert run.details["stalled"]
    assert run.outcome.attempts == 0
    assert target.sim.now < 1_000_000
    assert target.car_device.foreign_id_count > 0


# -- playback ----------------------------------------------------------------------------

def test_playback_opens_a_fixed_code_car_every_time():
    run = playback_attack(build_target("fixed", seed=4), n_record=2, n_replay=3)
    assert run.details["recorded"] == 2
    assert not run.details["stalled"]
    assert run.outcome.attempts == 3
    assert run.outcome.successes == 3
    assert all("adv.recorder" in line for line in run.outcome.evidence)


def test_playback_fails_against_rolling_code():
    run = playback_attack(build_target("rolling", seed=4), n_record=2, n_replay=3)
    assert run.outcome.attempts == 3
    assert run.outcome.successes == 0


def test_playback_fails_against_proposed():
    run = playback_attack(build_target("proposed", seed=4), n_record=3, n_replay=3)
    assert run.details["recorded"] == 3
    assert run.outcome.attempts == 3
    assert not run.outcome.succeeded


def test_playback_on_a_constant_toy_table_always_works():
    target = build_target("proposed", params=REPLAY_TOY, seed=5)
    constant = KeyTable((9,) * 8, 0, REPLAY_TOY)
    target.car_device.table = constant
    target.fob_device.table = constant
    run = playback_attack(target, n_record=1, n_replay=2)
    assert run.outcome.successes == 2


# -- forward prediction ------------------------------------------------------------------

def test_forward_prediction_beats_weak_entropy():
    target = build_target("proposed", entropy="weak", seed=3)
    run = forward_prediction_attack(target, n_observe=1, budget=1)
    assert run.outcome.succeeded
    assert run.details["predicted_ok"] == 1
    assert not run.details["predictor_failed"]


def test_forward_prediction_beats_weak_passive_entry():
    target = build_target("passive_cr", entropy="weak", seed=3)
    run = forward_prediction_attack(target, n_observe=3, budget=1)
    assert run.outcome.succeeded


def test_forward_prediction_fails_loudly_on_strong_entropy():
    target = build_target("proposed", seed=3)
    with pytest.raises(PredictorFailed):
        forward_prediction_attack(target, n_observe=1, budget=1)


def test_forward_prediction_fallback_guesses():
    target = build_target("proposed", seed=3)
    run = forward_prediction_attack(target, n_observe=1, budget=2, fallback=True)
    assert run.details["predictor_failed"]
    assert run.outcome.successes == 0


def test_fixed_code_prediction_is_a_replay():
    run = forward_prediction_attack(build_target("fixed", seed=6), n_observe=1, budget=2)
    assert run.outcome.successes == 2


# -- relay ----------------------------------------------------------------------------

def test_relay_opens_passive_entry():
    run = relay_attack(build_target("passive_cr", seed=2))
    assert run.outcome.succeeded
    unlocks = run.trace.actuators(CAR)
    assert [r.detail for r in unlocks] == ["UNLOCK_DOORS"]
    assert unlocks[0].at > 1_000 + 2 * 20


def test_relay_without_a_button_press_fails_against_proposed():
    run = relay_attack(build_target("proposed", seed=2))
    assert not run.outcome.succeeded
    assert run.trace.actuators() == []


def test_relay_of_a_victim_press_still_works():
    run = relay_attack(build_target("proposed", seed=2), victim_press_at=1_000)
    assert run.outcome.succeeded


# -- jamming -------------------------------------------------------------------------------

def test_jam_defense_honks_then_locks():
    run = jam_attack(build_target("proposed", seed=6))
    assert run.details["honks"] == [13_000, 13_500, 14_000, 14_500, 15_000]
    assert run.details["locks"] == [23_000]
    assert run.details["door_locked"]
    assert not run.outcome.succeeded
    assert TraceAuditor(run.trace).report().clean


def test_jam_without_defense_leaves_the_car_open():
    target = build_target("proposed", timings=DeviceTimings(jam_defense_enabled=False), seed=6)
    run = jam_attack(target)
    assert run.details["honks"] == []
    assert run.details["locks"] == []
    assert run.outcome.succeeded


def test_short_jam_lets_the_ping_reply_through():
    run = jam_attack(build_target("proposed", seed=6), jam_window=(3_000, 4_500))
    assert run.details["honks"] == []
    disarmed = run.trace.select("STATE", CAR, "JAM_DISARMED")
    assert [r.at for r in disarmed] == [5_002]
    assert not run.details["door_locked"]


def test_jam_records_the_blocked_lock_press():
    run = jam_attack(build_target("proposed", seed=6))
    assert run.details["recorded_frames"] >= 1


def test_jam_needs_the_proposed_car():
    with pytest.raises(ValueError):
        jam_attack(build_target("fixed", seed=6))


# -- cloned key --------------------------------------------------------------------------------

def test_cloned_key_opens_the_car():
    run = cloned_key_attack(reprovision=False, seed=1)
    assert run.outcome.succeeded


def test_rekeying_defeats_the_clone():
    run = cloned_key_attack(reprovision=True, seed=1)
    assert not run.outcome.succeeded
    assert run.details["generation"] >= 1
    assert "AUTH_FAILED" in [r.detail for r in run.trace.select("STATE", CAR)]


def test_seeded_runs_are_reproducible():
    texts = [scan_attack(build_target("proposed", seed=9), budget=3).trace.to_text() for _ in range(2)]
    assert texts[0] == texts[1]
