#!/usr/bin/env python3
"""
Attacker models: scan, playback, forward prediction, relay, jamming and the
cloned-key test-drive scenario.

Attackers are simulation endpoints named with the adversary prefix. They
only ever see what the radio carries; success is judged afterwards from the
trace by the auditor.
"""
import itertools
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.audit import AttackOutcome, TraceAuditor
from core.authcrypt import (
    AuthMessage, Challenge, build_auth_message, generate_challenge, verify_auth_message
)
from core.baselines import (
    DESK_BASELINE, BaselineEndpoint, BaselineParams, FixedCodeReceiver, FixedCodeTransmitter,
    PassiveCRCar, PassiveCRKey, RollingCodeReceiver, RollingCodeTransmitter
)
from core.channel import (
    ADVERSARY_PREFIX, DEFAULT_RELAY_DELAY, Endpoint, RecorderTap, RelayTap, RfChannel,
    Simulation, Trace
)
from core.devices import (
    DEFAULT_TIMINGS, Button, CarEndpoint, CarTransceiver, DeviceEndpoint, DeviceTimings,
    FobEndpoint, KeyFob, VehicleEvent
)
from core.errors import PredictorFailed, WireError
from core.keystore import (
    FULL_SCALE, CarKeyId, CipherParams, EntropySource, KeyTable, StrongSource, WeakSource,
    make_entropy, new_key_table
)
from core.provisioning import BoardComputer, obd_clone, run_key_exchange
from core.wire import Command, Frame, FrameCodec, MessageType

logger = logging.getLogger('rkesim.adversaries')

TECHNIQUES = ("fixed", "rolling", "passive_cr", "proposed")
CAR = "car"
FOB = "fob"
NEAR = "near_car"
FAR = "near_owner"

LEARN_SPACING = 2_000
RUN_CHUNK = 60_000
RUN_LIMIT = 10**10
DEFAULT_PASSWORD = "0000"


@dataclass
class Target:
    """A car and its key on two channels: next to the car and next to the owner."""
    technique: str
    sim: Simulation
    near: RfChannel
    far: RfChannel
    car: DeviceEndpoint
    fob: DeviceEndpoint
    params: CipherParams
    baseline: BaselineParams
    timings: DeviceTimings

    @property
    def car_device(self):
        return self.car.device

    @property
    def fob_device(self):
        return self.fob.device

    def codec(self) -> FrameCodec:
        return FrameCodec(self.params) if self.technique == "proposed" else FrameCodec()

    def legit_session(self, at: int, button: Button = Button.UNLOCK) -> None:
        """The owner uses the key: a button press, or a handle pull for passive entry."""
        if self.technique == "passive_cr":
            self.sim.vehicle_event(at, CAR, VehicleEvent.HANDLE_PULLED)
        else:
            self.sim.press_button(at, FOB, button)

    def move_fob(self, at: int, channel: RfChannel) -> None:
        self.sim.schedule_action(at, lambda _now: self.sim.move_endpoint(self.fob, channel))


def _derived_seed(seed: int, lane: int) -> int:
    return seed * 8 + lane


def build_target(technique: str, params: CipherParams = FULL_SCALE,
                 baseline: BaselineParams = DESK_BASELINE, timings: DeviceTimings = DEFAULT_TIMINGS,
                 entropy: str = "strong", seed: int = 0,
                 trace_params: Optional[Dict[str, Any]] = None) -> Target:
    """
    Build a car and its key for one authentication technique.

    Both devices start on the channel next to the car.

    Args:
        technique: One of TECHNIQUES
        params: Cipher profile of the proposed protocol
        baseline: Widths of the reference techniques
        timings: Device timings and policy
        entropy: 'strong' or 'weak', for every device draw
        seed: Run seed; every device seed derives from it
        trace_params: Extra header parameters for the trace

    Returns:
        Target: The assembled simulation
    """
    if technique not in TECHNIQUES:
        raise ValueError(f"Unknown technique: {technique}")
    secrets = StrongSource(_derived_seed(seed, 0))
    car_entropy = make_entropy(entropy, _derived_seed(seed, 1))
    fob_entropy = make_entropy(entropy, _derived_seed(seed, 2))

    header = {
        "technique": technique, "seed": seed, "entropy": entropy,
        "t_block": timings.t_block, "honk_count": timings.honk_count,
        "lockout": timings.lockout_enabled, "jam_defense": timings.jam_defense_enabled,
    }
    if technique == "proposed":
        header.update(word_bits=params.word_bits, sum_count=params.sum_count, table_size=params.table_size)
    header.update(trace_params or {})
    sim = Simulation(header)
    near = sim.add_channel(NEAR)
    far = sim.add_channel(FAR)

    if technique == "proposed":
        car_id = CarKeyId(secrets.next_uniform(2**32))
        table = new_key_table(secrets, params)
        car = CarEndpoint(CAR, CarTransceiver(car_id, table, car_entropy, timings))
        fob = FobEndpoint(FOB, KeyFob(car_id, table, fob_entropy, timings))
    else:
        shared_key = (secrets.next_uniform(2**32) << 32) | secrets.next_uniform(2**32)
        if technique == "fixed":
            code = secrets.next_uniform(1 << baseline.code_bits)
            car = BaselineEndpoint(CAR, FixedCodeReceiver(code, timings))
            fob = BaselineEndpoint(FOB, FixedCodeTransmitter(code, timings))
        elif technique == "rolling":
            car = BaselineEndpoint(CAR, RollingCodeReceiver(shared_key, baseline.block_bits,
                                                            baseline.window, timings=timings))
            fob = BaselineEndpoint(FOB, RollingCodeTransmitter(shared_key, baseline.block_bits, timings=timings))
        else:
            car = BaselineEndpoint(CAR, PassiveCRCar(shared_key, car_entropy, baseline.challenge_bits, timings))
            fob = BaselineEndpoint(FOB, PassiveCRKey(shared_key, baseline.challenge_bits, timings))
    sim.add_endpoint(car, near)
    sim.add_endpoint(fob, near)
    return Target(technique, sim, near, far, car, fob, params, baseline, timings)


@dataclass
class AttackRun:
    outcome: AttackOutcome
    trace: Trace
    details: Dict[str, Any] = field(default_factory=dict)


# -- weak generator state recovery -------------------------------------------

class LcgPredictor:
    """
    Recovers the state of the weak generator from consecutive
    `state mod bound` outputs and forecasts the next ones.
    """

    def __init__(self, bound: int, chunk: int = 1 << 22):
        if not 1 <= bound <= 2**32:
            raise ValueError(f"bound must be in [1, 2**32], got {bound}")
        self.bound = bound
        self.chunk = chunk
        self.modulus = WeakSource.modulus
        self.multiplier = WeakSource.multiplier
        self.outputs: List[int] = []
        self._survivors: Optional[np.ndarray] = None

    def observe(self, values: Sequence[int]) -> None:
        for value in values:
            self.outputs.append(int(value))
            if self._survivors is not None:
                stepped = (self._survivors * self.multiplier) % self.modulus
                self._survivors = stepped[stepped % self.bound == value]

    def _filter(self, states: np.ndarray, outputs: Sequence[int]) -> np.ndarray:
        for value in outputs:
            states = (states * self.multiplier) % self.modulus
            states = states[states % self.bound == value]
            if states.size == 0:
                break
        return states

    def recover(self) -> np.ndarray:
        """
        Every generator state consistent with all observed outputs.

        Raises:
            PredictorFailed: If nothing was observed or no state fits
        """
        if self._survivors is None:
            if not self.outputs:
                raise PredictorFailed("no outputs observed")
            first, rest = self.outputs[0], self.outputs[1:]
            if first >= self.bound:
                raise PredictorFailed(f"output {first} not below bound {self.bound}")
            count = (self.modulus - 1 - first) // self.bound + 1
            found = []
            for start in range(0, count, self.chunk):
                ks = np.arange(start, min(count, start + self.chunk), dtype=np.int64)
                states = first + self.bound * ks
                states = self._filter(states[states > 0], rest)
                if states.size:
                    found.append(states)
            self._survivors = np.concatenate(found) if found else np.empty(0, dtype=np.int64)
        if self._survivors.size == 0:
            raise PredictorFailed("observed outputs do not fit the weak generator")
        return self._survivors

    def predict(self, count: int) -> List[int]:
        """
        Next `count` outputs, without consuming them.

        Raises:
            PredictorFailed: If the outputs are inconsistent or still ambiguous
        """
        states = self.recover().copy()
        predicted = []
        for _ in range(count):
            states = (states * self.multiplier) % self.modulus
            values = np.unique(states % self.bound)
            if values.size != 1:
                raise PredictorFailed(f"{states.size} candidate states disagree, observe more outputs")
            predicted.append(int(values[0]))
        return predicted


# -- attacker endpoints --------------------------------------------------------

class AdversaryEndpoint(Endpoint):
    """Radio-only participant with a single wake-up alarm."""

    def __init__(self, name: str, codec: FrameCodec, entropy: EntropySource):
        if not name.startswith(ADVERSARY_PREFIX):
            name = ADVERSARY_PREFIX + name
        super().__init__(name)
        self.codec = codec
        self.entropy = entropy
        self.wake_at: Optional[int] = None

    def transmit(self, frame: Frame) -> None:
        self.send(self.codec.encode(frame))

    def wake(self, at: int) -> None:
        self.wake_at = at

    def next_deadline(self) -> Optional[int]:
        return self.wake_at

    def on_timer(self, now):
        if self.wake_at is not None and now >= self.wake_at:
            self.wake_at = None
            self.on_wake(now)

    def on_deliver(self, data, sender, now):
        try:
            frame = self.codec.decode(data)
        except WireError:
            return
        self.on_frame(frame, data, sender, now)

    def on_frame(self, frame: Frame, data: bytes, sender: str, now: int) -> None:
        pass

    def on_wake(self, now: int) -> None:
        pass


class CarAttacker(AdversaryEndpoint):
    """
    Listens to legitimate sessions, then repeatedly tries to make the car
    unlock. Subclasses decide what credential to present.
    """

    CHALLENGE_WAIT = 20
    RESPONSE_WAIT = 20
    GAP = 10

    def __init__(self, name: str, target: Target, entropy: EntropySource, budget: int):
        super().__init__(name, target.codec(), entropy)
        self.target = target
        self.technique = target.technique
        self.budget = budget
        self.phase = "LEARN"
        self.attempts = 0
        self.polls = 0
        self.finished = False
        self.stalled = False
        self.poll_delay = 10_000 if self.technique == "proposed" else target.timings.t_response + 100
        # a blocked car answers again after t_block
        self.max_idle_polls = target.timings.t_block // self.poll_delay + 3
        self._idle_polls = 0
        # what the radio gave away
        self.car_id: Optional[CarKeyId] = None
        self.id_frame: Optional[bytes] = None
        self.codes: List[bytes] = []
        self.pairs: Dict[Any, bytes] = {}
        self.last_response: Optional[bytes] = None
        self._pending_challenge: Any = None

    def start(self, at: int) -> None:
        self.wake(at)

    # learning from every frame heard

    def learn(self, frame: Frame, data: bytes, sender: str) -> None:
        msg_type = frame.msg_type
        if sender == FOB:
            if msg_type is MessageType.ID_ANNOUNCE:
                self.car_id = self.codec.parse_car_id(frame)
                self.id_frame = data
            elif msg_type in (MessageType.FIXED_CODE, MessageType.ROLLING_CODE):
                self.codes.append(data)
            elif msg_type in (MessageType.AUTH_RESPONSE, MessageType.CR_RESPONSE):
                if self._pending_challenge is not None:
                    self.pairs[self._pending_challenge] = data
                    self._pending_challenge = None
                self.last_response = data
        elif sender == CAR:
            if msg_type is MessageType.CHALLENGE:
                self._pending_challenge = frame.payload
                self.observe_challenge(self.codec.parse_challenge(frame))
            elif msg_type is MessageType.CR_CHALLENGE:
                value = self.codec.parse_word32(frame)
                self._pending_challenge = value
                self.observe_challenge(value)

    def observe_challenge(self, challenge: Any) -> None:
        pass

    # hooks

    def prepare(self, now: int) -> bool:
        return True

    def code_frame(self) -> bytes:
        raise NotImplementedError

    def proposed_response(self, challenge: Challenge) -> bytes:
        raise NotImplementedError

    def cr_response(self, challenge: int) -> bytes:
        raise NotImplementedError

    # attempt loop

    def on_wake(self, now):
        if self.phase == "LEARN":
            self.phase = "IDLE"
        if self.phase == "AWAIT_CHALLENGE":
            # car is blocked or busy
            self.polls += 1
            self._idle_polls += 1
            if self._idle_polls > self.max_idle_polls:
                logger.warning(f"{self.name}: no challenge after {self._idle_polls} polls, giving up "
                               f"with {self.attempts}/{self.budget} attempts")
                self.finished = self.stalled = True
                return
            self.phase = "IDLE"
            self.wake(now + self.poll_delay)
            return
        if self.phase == "AWAIT_OK":
            self.phase = "IDLE"
        if self.phase == "IDLE":
            if self.attempts >= self.budget:
                self.finished = True
                return
            if not self.prepare(now):
                return
        self._trigger(now)

    def _count_attempt(self) -> None:
        self.attempts += 1
        self._idle_polls = 0

    def _trigger(self, now: int) -> None:
        if self.technique == "proposed":
            car_id = self.car_id or CarKeyId(self.entropy.next_uniform(2**32))
            self.transmit(self.codec.id_announce(car_id))
            self.phase = "AWAIT_CHALLENGE"
            self.wake(now + self.CHALLENGE_WAIT)
        elif self.technique == "passive_cr":
            self.target.sim.vehicle_event(now, CAR, VehicleEvent.HANDLE_PULLED)
            self.phase = "AWAIT_CHALLENGE"
            self.wake(now + self.CHALLENGE_WAIT)
        else:
            self.send(self.code_frame())
            self._count_attempt()
            self.phase = "IDLE"
            self.wake(now + self.GAP)

    def on_frame(self, frame, data, sender, now):
        self.learn(frame, data, sender)
        if sender != CAR:
            return
        msg_type = frame.msg_type
        if self.phase == "AWAIT_CHALLENGE":
            if msg_type is MessageType.CHALLENGE:
                self.send(self.proposed_response(self.codec.parse_challenge(frame)))
                self._count_attempt()
                self.phase = "AWAIT_OK"
                self.wake(now + self.RESPONSE_WAIT)
            elif msg_type is MessageType.CR_CHALLENGE:
                self.send(self.cr_response(self.codec.parse_word32(frame)))
                self._count_attempt()
                self.phase = "IDLE"
                self.wake(now + self.GAP)
        elif self.phase == "AWAIT_OK" and msg_type is MessageType.AUTH_OK:
            self.transmit(self.codec.command(Command.UNLOCK))
            self.phase = "IDLE"
            self.wake(now + self.GAP)

    def _random_auth(self) -> bytes:
        params = self.target.params
        sums = self.entropy.draw_many(params.word_modulus, params.sum_count)
        return self.codec.encode(self.codec.auth_response(AuthMessage(sums)))

    def _random_word(self, msg_type: MessageType, bits: int) -> bytes:
        return self.codec.encode(self.codec.word32(msg_type, self.entropy.next_uniform(1 << bits)))


class ScanAttacker(CarAttacker):
    """Presents uniformly random credentials."""

    def code_frame(self):
        baseline = self.target.baseline
        if self.technique == "fixed":
            code = self.entropy.next_uniform(1 << baseline.code_bits)
            return self.codec.encode(self.codec.coded_command(MessageType.FIXED_CODE, code, Command.UNLOCK))
        code = self.entropy.next_uniform(1 << baseline.block_bits)
        return self.codec.encode(self.codec.coded_command(MessageType.ROLLING_CODE, code, Command.UNLOCK))

    def proposed_response(self, challenge):
        return self._random_auth()

    def cr_response(self, challenge):
        return self._random_word(MessageType.CR_RESPONSE, self.target.baseline.challenge_bits)


class PlaybackAttacker(CarAttacker):
    """Replays recorded frames byte for byte."""

    def code_frame(self):
        if not self.codes:
            raise PredictorFailed("nothing recorded to replay")
        return self.codes[-1 - (self.attempts % len(self.codes))]

    def _recorded(self, key: Any) -> bytes:
        if key in self.pairs:
            return self.pairs[key]
        if self.last_response is None:
            raise PredictorFailed("nothing recorded to replay")
        return self.last_response

    def on_frame(self, frame, data, sender, now):
        if self.phase != "LEARN" and sender == FOB:
            return
        super().on_frame(frame, data, sender, now)

    def proposed_response(self, challenge):
        return self._recorded(self._challenge_key(challenge))

    def _challenge_key(self, challenge: Challenge) -> bytes:
        return self.codec.challenge(challenge).payload

    def cr_response(self, challenge):
        return self._recorded(challenge)


def record_sessions(table: KeyTable, entropy: EntropySource,
                    sessions: int) -> Tuple[Dict[Challenge, AuthMessage], AuthMessage]:
    """Challenges and answers overheard in `sessions` legitimate sessions, plus the latest answer."""
    if sessions < 1:
        raise ValueError("at least one session has to be recorded")
    recorded: Dict[Challenge, AuthMessage] = {}
    latest = None
    for _ in range(sessions):
        challenge = generate_challenge(entropy, table.params)
        latest = build_auth_message(table, challenge)
        recorded[challenge] = latest
    return recorded, latest


def replay_success_probability(table: KeyTable, recorded: Dict[Challenge, AuthMessage],
                               latest: AuthMessage) -> float:
    """
    Exact acceptance probability of one replay, by enumerating every
    challenge of the table's profile. The replayed answer is the recording
    made for the same challenge when there is one, else `latest`.

    Raises:
        ValueError: If the challenge space is too large to enumerate
    """
    params = table.params
    space = params.table_size ** params.index_count
    if space > 1 << 20:
        raise ValueError(f"challenge space of {space} is too large to enumerate")
    accepted = 0
    for indices in itertools.product(range(params.table_size), repeat=params.index_count):
        challenge = Challenge(indices)
        accepted += verify_auth_message(table, challenge, recorded.get(challenge, latest))
    return accepted / space


def replay_trials(table: KeyTable, recorded: Dict[Challenge, AuthMessage], latest: AuthMessage,
                  entropy: EntropySource, trials: int) -> int:
    """Accepted replays out of `trials` fresh challenges."""
    accepted = 0
    for _ in range(trials):
        challenge = generate_challenge(entropy, table.params)
        accepted += verify_auth_message(table, challenge, recorded.get(challenge, latest))
    return accepted


class PredictionAttacker(CarAttacker):
    """
    Forecasts the car's next challenge, obtains the matching answer from the
    owner's key out of the car's range, then presents it to the car.
    """

    HARVEST_WAIT = 200
    # the owner's key must be idle again before the next harvest
    GAP = 1_000

    def __init__(self, name, target, entropy, budget, fallback: bool = False):
        super().__init__(name, target, entropy, budget)
        self.fallback = fallback
        if self.technique == "proposed":
            bound = target.params.table_size
        else:
            bound = 1 << target.baseline.challenge_bits
        self.predictor = LcgPredictor(bound)
        self.accomplice: Optional["OwnerSideAccomplice"] = None
        self.prediction: Any = None
        self.harvested: Optional[bytes] = None
        self.predicted_ok = 0
        self.predictions = 0
        self.predictor_failed = False

    def observe_challenge(self, challenge):
        if isinstance(challenge, Challenge):
            actual = challenge
            self.predictor.observe(challenge.indices)
        else:
            actual = challenge
            self.predictor.observe([challenge])
        if self.prediction is not None and self.phase != "LEARN":
            self.predicted_ok += int(actual == self.prediction)

    def _predict(self) -> Any:
        self.predictions += 1
        count = self.target.params.index_count if self.technique == "proposed" else 1
        try:
            values = self.predictor.predict(count)
        except PredictorFailed:
            self.predictor_failed = True
            if not self.fallback:
                raise
            bound = self.predictor.bound
            values = list(self.entropy.draw_many(bound, count))
        return Challenge(tuple(values)) if self.technique == "proposed" else values[0]

    def prepare(self, now):
        if self.technique in ("fixed", "rolling"):
            return True
        self.prediction = self._predict()
        self.harvested = None
        self.accomplice.expect(self.prediction)
        if self.technique == "proposed":
            # wait for the owner to press a button out of the car's range
            self.target.sim.press_button(now, FOB, Button.LOCK)
        else:
            self.target.sim.schedule_action(now, self.accomplice.interrogate, label=self.accomplice.name)
        self.phase = "PREPARING"
        self.wake(now + self.HARVEST_WAIT)
        return False

    def code_frame(self):
        if self.technique == "fixed":
            if not self.codes:
                raise PredictorFailed("no fixed code observed")
            return self.codes[-1]
        # sequential counters under an unknown key: guess an unseen ciphertext
        bits = self.target.baseline.block_bits
        seen = {self.codec.parse_coded_command(self.codec.decode(c))[0] for c in self.codes}
        while True:
            guess = self.entropy.next_uniform(1 << bits)
            if guess not in seen:
                break
        return self.codec.encode(self.codec.coded_command(MessageType.ROLLING_CODE, guess, Command.UNLOCK))

    def proposed_response(self, challenge):
        return self.harvested if self.harvested is not None else self._random_auth()

    def cr_response(self, challenge):
        if self.harvested is not None:
            return self.harvested
        return self._random_word(MessageType.CR_RESPONSE, self.target.baseline.challenge_bits)


class OwnerSideAccomplice(AdversaryEndpoint):
    """Plays the car towards the owner's key, far from the real car."""

    def __init__(self, name: str, attacker: PredictionAttacker):
        super().__init__(name, attacker.codec, attacker.entropy)
        self.attacker = attacker
        self.expected: Any = None

    def expect(self, prediction: Any) -> None:
        self.expected = prediction

    def interrogate(self, now: int) -> None:
        self.transmit(self.codec.word32(MessageType.CR_CHALLENGE, self.expected))

    def on_frame(self, frame, data, sender, now):
        if sender != FOB or self.expected is None:
            return
        msg_type = frame.msg_type
        if msg_type is MessageType.ID_ANNOUNCE:
            self.transmit(self.codec.challenge(self.expected))
        elif msg_type in (MessageType.AUTH_RESPONSE, MessageType.CR_RESPONSE):
            self.attacker.harvested = data
            self.expected = None


# -- attack drivers ----------------------------------------------------------

def _learn_and_leave(target: Target, sessions: int) -> int:
    """Schedule legitimate sessions next to the car, then the owner walks away."""
    for i in range(sessions):
        target.legit_session(i * LEARN_SPACING)
    leave_at = sessions * LEARN_SPACING + 1_000
    target.move_fob(leave_at, target.far)
    return leave_at + 1_000


def _run_attacker(target: Target, attacker: CarAttacker) -> Trace:
    sim = target.sim
    while not attacker.finished and sim.now < RUN_LIMIT:
        sim.run_until(sim.now + RUN_CHUNK)
    return sim.run_until(sim.now + 1_000)


def _outcome(trace: Trace, since: int = 0, attack: Optional[str] = None) -> AttackOutcome:
    return TraceAuditor(trace).attack_outcome(attack=attack, since=since)


def scan_attack(target: Target, budget: int, entropy: Optional[EntropySource] = None,
                learn_sessions: int = 1) -> AttackRun:
    """
    Random-credential scan after eavesdropping the car id.

    Args:
        target: Simulation from `build_target`
        budget: Number of credentials to present
        entropy: Attacker randomness
        learn_sessions: Legitimate sessions overheard first

    Returns:
        AttackRun: Outcome, trace and polling statistics
    """
    attacker = ScanAttacker("adv.scanner", target, entropy or StrongSource(7), budget)
    start = _learn_and_leave(target, learn_sessions)
    attacker.start(start)
    target.sim.add_endpoint(attacker, target.near)
    trace = _run_attacker(target, attacker)
    outcome = _outcome(trace, since=start)
    logger.info(f"Scan vs {target.technique}: {outcome.successes}/{outcome.attempts}")
    return AttackRun(outcome, trace, {"polls": attacker.polls, "stalled": attacker.stalled,
                                      "attack_start": start})


def playback_attack(target: Target, n_record: int, n_replay: int,
                    entropy: Optional[EntropySource] = None) -> AttackRun:
    """
    Record `n_record` legitimate sessions, then replay recorded credentials
    `n_replay` times, matching the fresh challenge when one was recorded.
    """
    attacker = PlaybackAttacker("adv.recorder", target, entropy or StrongSource(11), n_replay)
    start = _learn_and_leave(target, n_record)
    attacker.start(start)
    target.sim.add_endpoint(attacker, target.near)
    trace = _run_attacker(target, attacker)
    outcome = _outcome(trace, since=start)
    logger.info(f"Playback vs {target.technique}: {outcome.successes}/{outcome.attempts}")
    return AttackRun(outcome, trace, {"recorded": len(attacker.pairs) or len(attacker.codes),
                                      "stalled": attacker.stalled, "attack_start": start})


def forward_prediction_attack(target: Target, n_observe: int, budget: int = 1,
                              entropy: Optional[EntropySource] = None, fallback: bool = False) -> AttackRun:
    """
    Observe `n_observe` challenges, predict the next one, harvest its answer
    from the owner's key out of range, and present it to the car.

    Raises:
        PredictorFailed: If the observations do not fit the weak generator
            and `fallback` is off
    """
    attacker = PredictionAttacker("adv.car_side", target, entropy or StrongSource(13), budget, fallback)
    accomplice = OwnerSideAccomplice("adv.owner_side", attacker)
    attacker.accomplice = accomplice
    start = _learn_and_leave(target, n_observe)
    attacker.start(start)
    target.sim.add_endpoint(attacker, target.near)
    target.sim.add_endpoint(accomplice, target.far)
    trace = _run_attacker(target, attacker)
    outcome = _outcome(trace, since=start)
    logger.info(f"Forward prediction vs {target.technique}: {outcome.successes}/{outcome.attempts}")
    return AttackRun(outcome, trace, {
        "predictions": attacker.predictions,
        "predicted_ok": attacker.predicted_ok,
        "predictor_failed": attacker.predictor_failed,
        "stalled": attacker.stalled,
        "attack_start": start,
    })


def relay_attack(target: Target, relay_delay: int = DEFAULT_RELAY_DELAY,
                 victim_press_at: Optional[int] = None, handle_pull_at: int = 1_000,
                 duration: int = 5_000) -> AttackRun:
    """
    Two thieves bridge the channel next to the car and the channel next to
    the owner while one of them pulls the door handle.

    Args:
        target: Simulation; the key is moved next to the owner
        relay_delay: Added delay per relayed frame
        victim_press_at: Time the owner presses UNLOCK, if at all
        handle_pull_at: Time the thief pulls the handle
        duration: Length of the run

    Returns:
        AttackRun: Outcome and trace
    """
    sim = target.sim
    sim.move_endpoint(target.fob, target.far)
    target.near.add_tap(RelayTap("adv.relay_owner", target.far, relay_delay, ignore={"adv.relay_car"}))
    target.far.add_tap(RelayTap("adv.relay_car", target.near, relay_delay, ignore={"adv.relay_owner"}))
    sim.vehicle_event(handle_pull_at, CAR, VehicleEvent.HANDLE_PULLED)
    if victim_press_at is not None:
        sim.press_button(victim_press_at, FOB, Button.UNLOCK)
    trace = sim.run_until(duration)
    return AttackRun(_outcome(trace), trace, {"relay_delay": relay_delay})


@dataclass(frozen=True)
class JamTimeline:
    motor_off: int = 1_000
    door_opened: int = 2_000
    door_closed: int = 3_000
    lock_press_delay: int = 1_000


def jam_attack(target: Target, jam_window: Optional[Tuple[int, int]] = None,
               timeline: JamTimeline = JamTimeline(), horizon: int = 30_000) -> AttackRun:
    """
    The owner parks, walks away and presses LOCK while a jammer blocks the
    channel. Whether the jam defense runs comes from the target's timings.

    Args:
        target: Proposed-protocol simulation
        jam_window: Jammed interval; defaults to door close + horizon
        timeline: Parking event times
        horizon: Run length after the door closes

    Returns:
        AttackRun: Outcome (success = door still unlocked) plus defense timings
    """
    if target.technique != "proposed":
        raise ValueError("the jam defense exists only on the proposed car")
    sim = target.sim
    t_close = timeline.door_closed
    lock_at = t_close + timeline.lock_press_delay
    window = jam_window or (t_close, t_close + horizon)
    sim.trace.params.update(victim_lock_at=str(lock_at), t_close=str(t_close))

    target.car_device.door_locked = False
    recorder = target.near.add_tap(RecorderTap())
    target.near.add_jam_window(*window)
    sim.vehicle_event(timeline.motor_off, CAR, VehicleEvent.MOTOR_OFF)
    sim.vehicle_event(timeline.door_opened, CAR, VehicleEvent.DOOR_OPENED)
    sim.vehicle_event(t_close, CAR, VehicleEvent.DOOR_CLOSED)
    sim.press_button(lock_at, FOB, Button.LOCK)
    trace = sim.run_until(t_close + horizon)

    honks = [r.at for r in trace.actuators(CAR) if r.detail == "HONK"]
    locks = [r.at for r in trace.actuators(CAR) if r.detail == "LOCK_DOORS"]
    outcome = _outcome(trace, attack="jam")
    return AttackRun(outcome, trace, {
        "t_close": t_close, "jam_window": list(window), "honks": honks, "locks": locks,
        "recorded_frames": len(recorder.recordings),
        "door_locked": target.car_device.door_locked,
    })


def cloned_key_attack(reprovision: bool, seed: int = 0, params: CipherParams = FULL_SCALE,
                      timings: DeviceTimings = DEFAULT_TIMINGS) -> AttackRun:
    """
    A test-drive customer copies a fob's table with an OBD programmer and
    comes back at night. With `reprovision` the dealer re-keys both fobs
    after the test drive.
    """
    target = build_target("proposed", params=params, timings=timings, seed=seed,
                          trace_params={"reprovisioned": reprovision})
    car: CarTransceiver = target.car_device
    fob_a: KeyFob = target.fob_device
    fob_b = KeyFob(fob_a.id, fob_a.table, StrongSource(_derived_seed(seed, 3)), timings)
    clone = obd_clone(fob_a, StrongSource(_derived_seed(seed, 4)))

    details: Dict[str, Any] = {}
    if reprovision:
        board = BoardComputer(car.id, car.table, DEFAULT_PASSWORD, transceiver=car)
        board.connect(0, fob_a)
        board.connect(1, fob_b)
        board.begin_programming(DEFAULT_PASSWORD)
        report = run_key_exchange(board, fob_a, fob_b, StrongSource(_derived_seed(seed, 5)))
        details["generation"] = report.generation_after

    sim = target.sim
    sim.move_endpoint(target.fob, target.far)
    sim.add_endpoint(FobEndpoint("adv.clone", clone), target.near)
    sim.press_button(1_000, "adv.clone", Button.UNLOCK)
    trace = sim.run_until(3_000)
    return AttackRun(_outcome(trace), trace, details)
