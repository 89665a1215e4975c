#!/usr/bin/env python3
"""
Acceptance experiments for the RKESim project, at full budget.

The pytest suite runs the same experiments at reduced budgets; this tool
runs them at the sizes the acceptance criteria ask for and writes
acceptance.json next to the other reports.
"""
import os
import sys
import glob
import time
import argparse
import logging
import tempfile
from typing import Callable, Dict, List, Optional

from pydantic import BaseModel, Field

# Add the project root to the Python path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from core.adversaries import (
    LcgPredictor, build_target, forward_prediction_attack, playback_attack, record_sessions, relay_attack,
    replay_success_probability, replay_trials, scan_attack
)
from core.audit import TraceAuditor
from core.authcrypt import (
    AuthMessage, build_auth_message, estimate_guess_rate, expected_guess_probability,
    generate_challenge, sum_distribution
)
from core.devices import DeviceTimings
from core.errors import PredictorFailed, WireError
from core.keystore import FULL_SCALE, CarKeyId, CipherParams, EntropySource, StrongSource, WeakSource, new_key_table
from core.matrix import run_matrix
from core.scenario import ProvisionConfig, provision_once, run_scenario
from core.stats import binomial_sigma, chi_square_uniform, is_exactly_uniform, within_sigma
from core.utils import (
    EXIT_INVARIANT_VIOLATION, EXIT_OK,
    configure_logging, get_config_dir, get_output_dir, load_environment, write_json
)
from core.wire import Command, Frame, FrameCodec, MessageType, PROG_BLOCK_VALUES

logger = logging.getLogger('rkesim.tools.acceptance_runner')

TOY = CipherParams(word_bits=4, sum_count=2, table_size=8)
REPLAY_TOY = CipherParams(word_bits=16, sum_count=1, table_size=8)


class CriterionResult(BaseModel):
    number: int
    name: str
    passed: bool
    seconds: float = 0.0
    details: Dict[str, object] = Field(default_factory=dict)


def random_frame(codec: FrameCodec, entropy: EntropySource) -> Frame:
    """A valid frame of a random catalogued type with random contents."""
    params = codec.params
    car_id = CarKeyId(entropy.next_uniform(2**32))
    challenge = generate_challenge(entropy, params)
    message = AuthMessage(entropy.draw_many(params.word_modulus, params.sum_count))
    command = list(Command)[entropy.next_uniform(len(Command))]
    builders: List[Callable[[], Frame]] = [
        lambda: codec.id_announce(car_id),
        lambda: codec.challenge(challenge),
        lambda: codec.auth_response(message),
        codec.auth_ok,
        lambda: codec.command(command),
        codec.id_request,
        lambda: codec.start_init(car_id, challenge),
        lambda: codec.start_auth(message, challenge),
        lambda: codec.start_confirm(message),
        lambda: codec.ping(car_id),
        lambda: codec.ping_reply(car_id),
        codec.prog_id_request,
        lambda: codec.prog_id_response(car_id),
        lambda: codec.prog_write(entropy.next_uniform(2**16),
                                 entropy.draw_many(2**16, 1 + entropy.next_uniform(PROG_BLOCK_VALUES))),
        lambda: codec.prog_ack(entropy.next_uniform(2**16)),
        lambda: codec.prog_nack(entropy.next_uniform(2**16)),
        lambda: codec.prog_commit(entropy.next_uniform(2**16), entropy.next_uniform(2**32)),
        codec.prog_rollback,
        lambda: codec.coded_command(MessageType.FIXED_CODE, entropy.next_uniform(2**32), command),
        lambda: codec.coded_command(MessageType.ROLLING_CODE, entropy.next_uniform(2**32), command),
        lambda: codec.word32(MessageType.CR_CHALLENGE, entropy.next_uniform(2**32)),
        lambda: codec.word32(MessageType.CR_RESPONSE, entropy.next_uniform(2**32)),
    ]
    return builders[entropy.next_uniform(len(builders))]()


class AcceptanceRunner:
    """
    Runs the numbered acceptance experiments.

    Args:
        scale: Multiplier applied to every trial budget (1.0 is full size)
        seed: Base seed for every experiment
        jobs: Worker processes for the attack matrix
    """

    def __init__(self, scale: float = 1.0, seed: int = 1, jobs: int = 1):
        self.scale = scale
        self.seed = seed
        self.jobs = jobs
        self.criteria: Dict[int, Callable[[], CriterionResult]] = {
            1: self.guess_probability,
            2: self.playback_resistance,
            3: self.forward_prediction,
            4: self.two_thief_relay,
            5: self.jamming_defense,
            6: self.lockout,
            7: self.provisioning_atomicity,
            8: self.matrix_ordering,
            9: self.wire_robustness,
            10: self.determinism,
        }
        logger.info(f"AcceptanceRunner initialized (scale {scale}, seed {seed})")

    def budget(self, full: int) -> int:
        return max(1, int(full * self.scale))

    def run(self, numbers: Optional[List[int]] = None) -> List[CriterionResult]:
        results = []
        for number in numbers or sorted(self.criteria):
            started = time.perf_counter()
            result = self.criteria[number]()
            result.seconds = round(time.perf_counter() - started, 2)
            level = logging.INFO if result.passed else logging.ERROR
            logger.log(level, f"Criterion {number} ({result.name}): {'PASS' if result.passed else 'FAIL'} "
                              f"in {result.seconds}s")
            results.append(result)
        return results

    # -- 1 ----------------------------------------------------------------

    def guess_probability(self) -> CriterionResult:
        trials = self.budget(1_000_000)
        hits, rate = estimate_guess_rate(TOY, trials, StrongSource(self.seed))
        expected = expected_guess_probability(TOY)
        guess_ok = within_sigma(hits, trials, expected)

        distinct = sum_distribution(TOY, distinct_only=True)
        uniform_ok = is_exactly_uniform(distinct)

        table = new_key_table(StrongSource(self.seed + 1))
        entropy = StrongSource(self.seed + 2)
        samples = []
        for _ in range(self.budget(100_000) // FULL_SCALE.sum_count + 1):
            samples.extend(build_auth_message(table, generate_challenge(entropy)).sums)
        p_value = chi_square_uniform([s >> 8 for s in samples], 256)

        # the same probability through the car, without the lockout
        target = build_target("proposed", params=TOY, timings=DeviceTimings(lockout_enabled=False), seed=self.seed)
        scan = scan_attack(target, budget=self.budget(100_000))
        scan_ok = (not scan.details["stalled"] and scan.outcome.attempts > 0
                   and within_sigma(scan.outcome.successes, scan.outcome.attempts, expected))

        passed = guess_ok and uniform_ok and p_value > 0.001 and scan_ok
        return CriterionResult(number=1, name="guess probability", passed=passed,
                               details={"trials": trials, "hits": hits, "rate": rate, "expected": expected,
                                        "distinct_pairs_uniform": uniform_ok,
                                        "with_coincident_pairs_uniform": is_exactly_uniform(sum_distribution(TOY)),
                                        "chi_square_samples": len(samples), "chi_square_p": p_value,
                                        "scan_attempts": scan.outcome.attempts, "scan_successes": scan.outcome.successes})

    # -- 2 ----------------------------------------------------------------

    def playback_resistance(self) -> CriterionResult:
        sessions = self.budget(10_000)
        run = playback_attack(build_target("proposed", seed=self.seed), n_record=sessions, n_replay=1)
        full_scale_ok = (run.details["recorded"] > 0 and run.outcome.attempts > 0
                         and run.outcome.successes == 0)

        table = new_key_table(StrongSource(self.seed + 3), REPLAY_TOY)
        recorded, latest = record_sessions(table, StrongSource(self.seed + 4), 10)
        exact = replay_success_probability(table, recorded, latest)
        trials = self.budget(100_000)
        accepted = replay_trials(table, recorded, latest, StrongSource(self.seed + 5), trials)
        toy_ok = within_sigma(accepted, trials, exact)

        return CriterionResult(number=2, name="playback resistance", passed=full_scale_ok and toy_ok,
                               details={"recorded_sessions": sessions, "recorded_pairs": run.details["recorded"],
                                        "full_scale_attempts": run.outcome.attempts,
                                        "full_scale_successes": run.outcome.successes,
                                        "toy_exact_probability": exact, "toy_trials": trials,
                                        "toy_accepted": accepted})

    # -- 3 ----------------------------------------------------------------

    def forward_prediction(self) -> CriterionResult:
        n = FULL_SCALE.index_count
        runs = self.budget(1_000)
        recovered = 0
        for run in range(runs):
            source = WeakSource(self.seed * 100_003 + run + 1)
            predictor = LcgPredictor(FULL_SCALE.table_size)
            for _ in range(5):
                predictor.observe(generate_challenge(source).indices)
                try:
                    predicted = predictor.predict(n)
                except PredictorFailed:
                    continue
                break
            else:
                continue
            recovered += tuple(predicted) == generate_challenge(source).indices

        guesses = self.budget(100_000)
        actual, attacker = StrongSource(self.seed + 6), StrongSource(self.seed + 7)
        hits = sum(actual.next_uniform(FULL_SCALE.table_size) == attacker.next_uniform(FULL_SCALE.table_size)
                   for _ in range(guesses))
        p = 1 / FULL_SCALE.table_size
        strong_ok = hits / guesses <= p + 3 * binomial_sigma(p, guesses)

        # the attack itself against a car with strong entropy
        try:
            forward_prediction_attack(build_target("proposed", seed=self.seed), n_observe=5)
            refused = False
        except PredictorFailed:
            refused = True
        attack = forward_prediction_attack(build_target("proposed", seed=self.seed + 1), n_observe=5,
                                           budget=self.budget(1_000), fallback=True)
        attack_ok = (refused and attack.details["predictor_failed"]
                     and attack.outcome.attempts > 0 and attack.outcome.successes == 0)

        weak_rate = recovered / runs
        return CriterionResult(number=3, name="forward prediction",
                               passed=weak_rate >= 0.99 and strong_ok and attack_ok,
                               details={"weak_runs": runs, "weak_recovered": recovered, "weak_rate": weak_rate,
                                        "strong_guesses": guesses, "strong_hits": hits,
                                        "strong_predictor_refused": refused,
                                        "strong_attack_attempts": attack.outcome.attempts,
                                        "strong_attack_successes": attack.outcome.successes})

    # -- 4 ----------------------------------------------------------------

    def two_thief_relay(self) -> CriterionResult:
        runs = self.budget(1_000)
        counts = {}
        for technique in ("passive_cr", "proposed"):
            counts[technique] = sum(relay_attack(build_target(technique, seed=self.seed + i)).outcome.succeeded
                                    for i in range(runs))
        passed = counts["passive_cr"] == runs and counts["proposed"] == 0
        return CriterionResult(number=4, name="two-thief relay", passed=passed,
                               details={"runs": runs, "successes": counts})

    # -- 5 ----------------------------------------------------------------

    def jamming_defense(self) -> CriterionResult:
        scenarios = os.path.join(get_config_dir(), "scenarios")
        with tempfile.TemporaryDirectory() as out_dir:
            defended = run_scenario(os.path.join(scenarios, "jam_defense.scn"), out_dir=out_dir).runs[0]
            undefended = run_scenario(os.path.join(scenarios, "jam_defense_disabled.scn"), out_dir=out_dir).runs[0]
        t_close = defended.details["t_close"]
        expected_honks = [t_close + 10_000 + 500 * i for i in range(5)]
        passed = (defended.honks == expected_honks and defended.locks == [t_close + 20_000]
                  and undefended.locks == [] and defended.audit.clean)
        return CriterionResult(number=5, name="jamming defense", passed=passed,
                               details={"t_close": t_close, "honks": defended.honks, "locks": defended.locks,
                                        "locks_without_defense": undefended.locks})

    # -- 6 ----------------------------------------------------------------

    def lockout(self) -> CriterionResult:
        target = build_target("proposed", seed=self.seed)
        run = scan_attack(target, budget=4)
        trace = run.trace
        blocked = trace.select("STATE", "car", "BLOCKED")
        unblocked = trace.select("STATE", "car", "UNBLOCKED")
        report = TraceAuditor(trace).report()
        durations = [u.at - b.at for b, u in zip(blocked, unblocked)]
        resumed = any(r.at >= unblocked[0].at for r in trace.select("TX", "car")) if unblocked else False
        passed = (report.clean and bool(blocked) and durations[:1] == [target.timings.t_block] and resumed)
        return CriterionResult(number=6, name="lockout", passed=passed,
                               details={"lockouts": report.lockouts, "block_durations": durations,
                                        "resumed": resumed, "violations": report.violations})

    # -- 7 ----------------------------------------------------------------

    def provisioning_atomicity(self) -> CriterionResult:
        runs = self.budget(10_000)
        probabilities = (0.005, 0.02, 0.1)
        outcomes: Dict[str, int] = {}
        silent = 0
        for run in range(runs):
            config = ProvisionConfig(fault_probability=probabilities[run % len(probabilities)])
            result = provision_once(config, self.seed * 1_000_003 + run)
            key = result.exchange.outcome.value if result.exchange is not None else "NOT_STARTED"
            outcomes[key] = outcomes.get(key, 0) + 1
            silent += result.silent_divergence
        return CriterionResult(number=7, name="provisioning atomicity", passed=silent == 0,
                               details={"runs": runs, "outcomes": outcomes, "silent_divergences": silent})

    # -- 8 ----------------------------------------------------------------

    def matrix_ordering(self) -> CriterionResult:
        with tempfile.TemporaryDirectory() as out_dir:
            report = run_matrix(os.path.join(get_config_dir(), "matrix.cfg"), self.seed, out_dir, self.jobs)
        rates = {f"{c.attack}/{c.technique}": f"{c.successes}/{c.attempts}" for c in report.cells}
        return CriterionResult(number=8, name="matrix ordering", passed=not report.violations,
                               details={"rates": rates, "ordering": report.ordering,
                                        "violations": report.violations})

    # -- 9 ----------------------------------------------------------------

    def wire_robustness(self) -> CriterionResult:
        codec = FrameCodec()
        entropy = StrongSource(self.seed + 8)
        frames = self.budget(100_000)
        round_trips = sum(codec.decode(codec.encode(frame)) == frame
                          for frame in (random_frame(codec, entropy) for _ in range(frames)))

        samples = self.budget(1_000)
        flips = rejected = 0
        for _ in range(samples):
            data = codec.encode(random_frame(codec, entropy))
            for position in range(len(data) * 8):
                corrupted = bytearray(data)
                corrupted[position // 8] ^= 1 << (position % 8)
                flips += 1
                try:
                    codec.decode(bytes(corrupted))
                except WireError:
                    rejected += 1
        passed = round_trips == frames and rejected == flips
        return CriterionResult(number=9, name="wire robustness", passed=passed,
                               details={"frames": frames, "round_trips": round_trips,
                                        "bit_flips": flips, "rejected": rejected})

    # -- 10 ---------------------------------------------------------------

    def determinism(self) -> CriterionResult:
        differing = []
        scenarios = sorted(glob.glob(os.path.join(get_config_dir(), "scenarios", "*.scn")))
        with tempfile.TemporaryDirectory() as first, tempfile.TemporaryDirectory() as second:
            for path in scenarios:
                reports = [run_scenario(path, out_dir=out_dir) for out_dir in (first, second)]
                for run in reports[0].runs:
                    with open(os.path.join(first, run.trace_file), 'rb') as a, \
                            open(os.path.join(second, run.trace_file), 'rb') as b:
                        if a.read() != b.read():
                            differing.append(run.trace_file)
        return CriterionResult(number=10, name="determinism", passed=not differing,
                               details={"scenarios": len(scenarios), "differing": differing})


def main():
    parser = argparse.ArgumentParser(description="Acceptance experiments for RKESim")
    parser.add_argument("--only", help="Comma-separated criterion numbers (default: all)")
    parser.add_argument("--scale", type=float, default=1.0, help="Budget multiplier, e.g. 0.01 for a quick pass")
    parser.add_argument("--seed", type=int, default=1, help="Base seed")
    parser.add_argument("--jobs", type=int, default=1, help="Worker processes for the matrix")
    parser.add_argument("--out-dir", help="Directory for acceptance.json")
    parser.add_argument("--log-level", help="Log level (default: RKESIM_LOG_LEVEL or INFO)")

    args = parser.parse_args()

    load_environment()
    configure_logging(args.log_level)

    numbers = [int(n) for n in args.only.split(",")] if args.only else None
    runner = AcceptanceRunner(args.scale, args.seed, args.jobs)
    results = runner.run(numbers)

    print("\n=== Acceptance Summary ===")
    for result in results:
        print(f"{result.number:>2}. {result.name:<24} {'PASS' if result.passed else 'FAIL'} ({result.seconds}s)")

    path = os.path.join(get_output_dir(args.out_dir), "acceptance.json")
    write_json({"scale": args.scale, "seed": args.seed,
                "results": [r.model_dump(mode='json') for r in results]}, path)
    print(f"\nReport written to: {path}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_INVARIANT_VIOLATION


if __name__ == "__main__":
    sys.exit(main())
