import pytest

from core.keystore import StrongSource
from core.utils import get_config_dir
from core.wire import FrameCodec
from tools.acceptance_runner import AcceptanceRunner, random_frame


def test_random_frames_round_trip():
    codec = FrameCodec()
    entropy = StrongSource(5)
    for _ in range(500):
        frame = random_frame(codec, entropy)
        assert codec.decode(codec.encode(frame)) == frame


def test_budget_never_drops_to_zero():
    runner = AcceptanceRunner(scale=1e-9)
    assert runner.budget(1_000_000) == 1


@pytest.mark.slow
def test_deterministic_criteria_pass_at_small_scale():
    results = AcceptanceRunner(scale=0.001).run([5, 6, 9])
    assert [r.number for r in results] == [5, 6, 9]
    assert all(r.passed for r in results), [r.details for r in results if not r.passed]


def test_config_dir_follows_the_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("RKESIM_CONFIG_DIR", str(tmp_path))
    assert get_config_dir() == str(tmp_path)


@pytest.mark.slow
def test_playback_criterion_replays_recorded_sessions():
    result = AcceptanceRunner(scale=0.001).playback_resistance()
    assert result.passed, result.details
    assert result.details["recorded_pairs"] == 10
    assert result.details["full_scale_attempts"] == 1
