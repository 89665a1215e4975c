import pytest
from hypothesis import settings, strategies as st
from hypothesis.stateful import RuleBasedStateMachine, invariant, rule

from core.authcrypt import AuthMessage, Challenge, build_auth_message
from core.devices import (
    DEFAULT_TIMINGS, ActuatorKind, Button, CarPhase, CarTransceiver, DeviceTimings, FobPhase,
    JamPhase, KeyFob, VehicleEvent
)
from core.errors import DeviceBusy
from core.keystore import CarKeyId, StrongSource, new_key_table
from core.wire import Command, FrameCodec, MessageType
from tests.conftest import CAR_ID, TOY

OTHER_ID = CarKeyId(0x0BADF00D)


def make_pair(table, timings=DEFAULT_TIMINGS):
    car = CarTransceiver(CAR_ID, table, StrongSource(11), timings)
    fob = KeyFob(CAR_ID, table, StrongSource(12), timings)
    return car, fob


def wrong(message: AuthMessage, modulus: int) -> AuthMessage:
    return AuthMessage(tuple((s + 1) % modulus for s in message.sums))


def fail_once(car: CarTransceiver, now: int) -> None:
    frames, _ = car.handle_frame(car.codec.id_announce(CAR_ID), now)
    assert [f.msg_type for f in frames] == [MessageType.CHALLENGE]
    correct = build_auth_message(car.table, car.state.challenge)
    frames, actuators = car.handle_frame(car.codec.auth_response(wrong(correct, car.table.params.word_modulus)), now)
    assert frames == [] and actuators == []


# -- command transaction ---------------------------------------------------

def test_unlock_transaction_step_by_step(full_table):
    car, fob = make_pair(full_table)

    announce = fob.press_button(Button.UNLOCK, 0)
    assert [f.msg_type for f in announce] == [MessageType.ID_ANNOUNCE]
    assert fob.state.phase is FobPhase.WAIT_CHALLENGE

    challenge, actuators = car.handle_frame(announce[0], 1)
    assert [f.msg_type for f in challenge] == [MessageType.CHALLENGE] and actuators == []
    assert car.state.phase is CarPhase.WAIT_AUTH

    response = fob.handle_frame(challenge[0], 2)
    assert [f.msg_type for f in response] == [MessageType.AUTH_RESPONSE]

    ok, actuators = car.handle_frame(response[0], 3)
    assert [f.msg_type for f in ok] == [MessageType.AUTH_OK] and actuators == []
    assert "VERIFIED" in car.drain_notes()

    command = fob.handle_frame(ok[0], 4)
    assert fob.state.phase is FobPhase.IDLE
    assert car.codec.parse_command(command[0]) is Command.UNLOCK

    frames, actuators = car.handle_frame(command[0], 5)
    assert frames == []
    assert [(a.kind, a.timestamp) for a in actuators] == [(ActuatorKind.UNLOCK_DOORS, 5)]
    assert car.state.phase is CarPhase.IDLE
    assert not car.door_locked


@pytest.mark.parametrize("button,kind", [
    (Button.LOCK, ActuatorKind.LOCK_DOORS),
    (Button.BOOT, ActuatorKind.OPEN_BOOT),
])
def test_other_buttons(toy_table, button, kind):
    car, fob = make_pair(toy_table)
    frames = fob.press_button(button, 0)
    actuators = []
    for t in range(1, 6):
        frames, actuators = car.handle_frame(frames[0], t) if t % 2 else (fob.handle_frame(frames[0], t), [])
    assert [a.kind for a in actuators] == [kind]


def test_fob_is_busy_during_a_transaction(toy_table):
    _, fob = make_pair(toy_table)
    fob.press_button(Button.UNLOCK, 0)
    with pytest.raises(DeviceBusy):
        fob.press_button(Button.LOCK, 10)


def test_fob_times_out_back_to_idle(toy_table):
    _, fob = make_pair(toy_table)
    fob.press_button(Button.UNLOCK, 0)
    assert fob.next_deadline() == DEFAULT_TIMINGS.t_challenge
    fob.tick(DEFAULT_TIMINGS.t_challenge - 1)
    assert fob.state.phase is FobPhase.WAIT_CHALLENGE
    fob.tick(DEFAULT_TIMINGS.t_challenge)
    assert fob.state.phase is FobPhase.IDLE
    assert "TIMEOUT" in fob.drain_notes()


def test_car_times_out_waiting_for_response(toy_table):
    car, _ = make_pair(toy_table)
    car.handle_frame(car.codec.id_announce(CAR_ID), 0)
    car.tick(DEFAULT_TIMINGS.t_response)
    assert car.state.phase is CarPhase.IDLE
    assert "TIMEOUT" in car.drain_notes()


def test_foreign_id_is_counted_and_ignored(toy_table):
    car, _ = make_pair(toy_table)
    frames, actuators = car.handle_frame(car.codec.id_announce(OTHER_ID), 0)
    assert frames == [] and actuators == []
    assert car.foreign_id_count == 1
    assert car.state.phase is CarPhase.IDLE


def test_command_without_verification_is_ignored(toy_table):
    car, _ = make_pair(toy_table)
    frames, actuators = car.handle_frame(car.codec.command(Command.UNLOCK), 0)
    assert frames == [] and actuators == []
    car.handle_frame(car.codec.id_announce(CAR_ID), 1)
    frames, actuators = car.handle_frame(car.codec.command(Command.UNLOCK), 2)
    assert actuators == []
    assert car.door_locked


def test_stray_auth_ok_does_not_move_an_idle_fob(toy_table):
    _, fob = make_pair(toy_table)
    assert fob.handle_frame(fob.codec.auth_ok(), 0) == []
    assert fob.state.phase is FobPhase.IDLE


# -- lockout ------------------------------------------------------------------

def test_three_failures_block_the_car(full_table):
    car, _ = make_pair(full_table)
    for t in (0, 10, 20):
        fail_once(car, t)
    assert car.state.phase is CarPhase.BLOCKED
    assert car.state.until == 20 + DEFAULT_TIMINGS.t_block
    assert car.lockouts == 1

    frames, _ = car.handle_frame(car.codec.id_announce(CAR_ID), 100_000)
    assert frames == []
    frames, _ = car.handle_frame(car.codec.id_announce(CAR_ID), 20 + DEFAULT_TIMINGS.t_block)
    assert [f.msg_type for f in frames] == [MessageType.CHALLENGE]
    assert "UNBLOCKED" in car.drain_notes()


def test_block_lifts_on_tick(full_table):
    car, _ = make_pair(full_table)
    for t in (0, 1, 2):
        fail_once(car, t)
    assert car.next_deadline() == 2 + DEFAULT_TIMINGS.t_block
    car.tick(2 + DEFAULT_TIMINGS.t_block)
    assert car.state.phase is CarPhase.IDLE


def test_failures_outside_the_window_do_not_block(full_table):
    car, _ = make_pair(full_table)
    spacing = DEFAULT_TIMINGS.w_fail + 1
    for t in (0, spacing, 2 * spacing):
        fail_once(car, t)
    assert car.state.phase is CarPhase.IDLE
    assert car.lockouts == 0


def test_lockout_can_be_disabled(full_table):
    car, _ = make_pair(full_table, DeviceTimings(lockout_enabled=False))
    for t in range(10):
        fail_once(car, t)
    assert car.state.phase is CarPhase.IDLE
    assert car.lockouts == 0


def test_custom_block_duration(full_table):
    car, _ = make_pair(full_table, DeviceTimings(t_block=5_000, fail_threshold=2))
    fail_once(car, 0)
    fail_once(car, 1)
    assert car.state.until == 5_001


# -- start transaction ---------------------------------------------------------

def test_start_engine_mutual_authentication(full_table):
    car, fob = make_pair(full_table)
    request = car.press_start(0)
    assert [f.msg_type for f in request] == [MessageType.ID_REQUEST]

    init = fob.handle_frame(request[0], 1)
    assert [f.msg_type for f in init] == [MessageType.START_INIT]
    auth, _ = car.handle_frame(init[0], 2)
    assert [f.msg_type for f in auth] == [MessageType.START_AUTH]
    confirm = fob.handle_frame(auth[0], 3)
    assert [f.msg_type for f in confirm] == [MessageType.START_CONFIRM]
    frames, actuators = car.handle_frame(confirm[0], 4)
    assert frames == []
    assert [a.kind for a in actuators] == [ActuatorKind.START_ENGINE]
    assert car.engine_running


def test_fob_rejects_an_emulated_car(full_table):
    _, fob = make_pair(full_table)
    impostor_table = new_key_table(StrongSource(99))
    impostor = CarTransceiver(CAR_ID, impostor_table, StrongSource(13))

    init = fob.handle_frame(fob.codec.id_request(), 0)
    impostor.press_start(0)
    auth, _ = impostor.handle_frame(init[0], 1)
    assert [f.msg_type for f in auth] == [MessageType.START_AUTH]
    assert fob.handle_frame(auth[0], 2) == []
    assert "START_REJECTED" in fob.drain_notes()
    assert fob.state.phase is FobPhase.IDLE


def test_wrong_start_confirm_counts_as_failure(full_table):
    car, fob = make_pair(full_table)
    request = car.press_start(0)
    init = fob.handle_frame(request[0], 1)
    car.handle_frame(init[0], 2)
    bogus = FrameCodec().start_confirm(AuthMessage((0, 0, 0, 0, 0)))
    frames, actuators = car.handle_frame(bogus, 3)
    assert actuators == []
    assert len(car.failure_log) == 1
    assert not car.engine_running


# -- jam defense ----------------------------------------------------------------

def arm(car: CarTransceiver):
    car.vehicle_event(VehicleEvent.MOTOR_OFF, 0)
    car.vehicle_event(VehicleEvent.DOOR_OPENED, 100)
    return car.vehicle_event(VehicleEvent.DOOR_CLOSED, 1_000)


def test_door_cycle_arms_and_pings(toy_table):
    car, _ = make_pair(toy_table)
    frames = arm(car)
    assert [f.msg_type for f in frames] == [MessageType.PING]
    assert car.jam_defense.phase is JamPhase.WAIT_LOCK_OR_REPLY
    assert car.next_deadline() == 1_000 + DEFAULT_TIMINGS.t_ping


def test_door_closed_without_opening_does_not_arm(toy_table):
    car, _ = make_pair(toy_table)
    car.vehicle_event(VehicleEvent.MOTOR_OFF, 0)
    assert car.vehicle_event(VehicleEvent.DOOR_CLOSED, 1_000) == []
    assert car.jam_defense.phase is JamPhase.WATCH_DOOR


def test_disabled_defense_never_arms(toy_table):
    car, _ = make_pair(toy_table, DeviceTimings(jam_defense_enabled=False))
    assert arm(car) == []
    assert car.jam_defense.phase is JamPhase.INACTIVE


def test_ping_reply_disarms(toy_table):
    car, fob = make_pair(toy_table)
    ping = arm(car)
    reply = fob.handle_frame(ping[0], 1_001)
    assert [f.msg_type for f in reply] == [MessageType.PING_REPLY]
    car.handle_frame(reply[0], 1_002)
    assert car.jam_defense.phase is JamPhase.INACTIVE
    assert "JAM_DISARMED" in car.drain_notes()


def test_ping_reply_for_another_car_is_ignored(toy_table):
    car, _ = make_pair(toy_table)
    arm(car)
    car.handle_frame(car.codec.ping_reply(OTHER_ID), 1_002)
    assert car.jam_defense.armed


def test_fob_answers_ping_mid_transaction(toy_table):
    _, fob = make_pair(toy_table)
    fob.press_button(Button.UNLOCK, 0)
    reply = fob.handle_frame(fob.codec.ping(CAR_ID), 1)
    assert [f.msg_type for f in reply] == [MessageType.PING_REPLY]
    assert fob.state.phase is FobPhase.WAIT_CHALLENGE


def test_unanswered_pings_lead_to_honks_then_autolock(toy_table):
    timings = DEFAULT_TIMINGS
    car, _ = make_pair(toy_table)
    arm(car)
    honks, locks, pings = [], [], 0
    now = 1_000
    while car.next_deadline() is not None and now < 40_000:
        now = car.next_deadline()
        frames, actuators = car.tick(now)
        pings += sum(f.msg_type is MessageType.PING for f in frames)
        honks += [a.timestamp for a in actuators if a.kind is ActuatorKind.HONK]
        locks += [a.timestamp for a in actuators if a.kind is ActuatorKind.LOCK_DOORS]

    first = 1_000 + timings.t_jam
    assert honks == [first + i * timings.honk_spacing for i in range(timings.honk_count)]
    assert locks == [first + timings.t_autolock]
    assert pings == timings.t_jam // timings.t_ping - 1
    assert car.door_locked
    assert car.jam_defense.phase is JamPhase.INACTIVE


def test_lock_command_disarms(toy_table):
    car, fob = make_pair(toy_table)
    arm(car)
    frames = fob.press_button(Button.LOCK, 2_000)
    actuators = []
    for t in range(2_001, 2_006):
        frames, actuators = car.handle_frame(frames[0], t) if t % 2 else (fob.handle_frame(frames[0], t), [])
    assert [a.kind for a in actuators] == [ActuatorKind.LOCK_DOORS]
    assert car.jam_defense.phase is JamPhase.INACTIVE


# -- stateful fuzzing of the car --------------------------------------------------

class CarUnderFire(RuleBasedStateMachine):
    """
    Arbitrary interleavings of legitimate and forged frames, ticks and start
    presses. Door and boot actuators only follow a verified response, and a
    blocked car answers nothing.
    """

    def __init__(self):
        super().__init__()
        self.table = new_key_table(StrongSource(7), TOY)
        self.car = CarTransceiver(CAR_ID, self.table, StrongSource(8))
        self.codec = FrameCodec(TOY)
        self.now = 0
        self.verified = False
        self.failures = 0

    def _blocked(self) -> bool:
        return self.car.state.phase is CarPhase.BLOCKED and self.now < self.car.state.deadline

    def _deliver(self, frame):
        blocked = self._blocked()
        frames, actuators = self.car.handle_frame(frame, self.now)
        notes = self.car.drain_notes()
        if blocked:
            assert frames == [] and actuators == []
        for event in actuators:
            if event.kind is ActuatorKind.START_ENGINE:
                assert "START_VERIFIED" in notes
            else:
                assert self.verified, f"{event.kind.value} without a verified response"
        self._settle(notes)

    def _settle(self, notes):
        self.failures += notes.count("AUTH_FAILED")
        in_command = self.car.state.phase is CarPhase.WAIT_COMMAND
        self.verified = in_command and ("VERIFIED" in notes or self.verified)

    @rule(dt=st.integers(min_value=0, max_value=100_000))
    def advance(self, dt):
        self.now += dt
        frames, actuators = self.car.tick(self.now)
        assert actuators == []
        self._settle(self.car.drain_notes())

    @rule(own=st.booleans())
    def announce(self, own):
        self._deliver(self.codec.id_announce(CAR_ID if own else OTHER_ID))

    @rule(sums=st.lists(st.integers(min_value=0, max_value=15), min_size=2, max_size=2))
    def forged_response(self, sums):
        self._deliver(self.codec.auth_response(AuthMessage(tuple(sums))))

    @rule()
    def genuine_response(self):
        if self.car.state.phase is CarPhase.WAIT_AUTH:
            self._deliver(self.codec.auth_response(build_auth_message(self.table, self.car.state.challenge)))

    @rule(command=st.sampled_from(list(Command)))
    def command(self, command):
        self._deliver(self.codec.command(command))

    @rule()
    def start_button(self):
        self.car.press_start(self.now)
        self._settle(self.car.drain_notes())

    @rule(indices=st.lists(st.integers(min_value=0, max_value=7), min_size=4, max_size=4))
    def start_init(self, indices):
        self._deliver(self.codec.start_init(CAR_ID, Challenge(tuple(indices))))

    @rule(sums=st.lists(st.integers(min_value=0, max_value=15), min_size=2, max_size=2))
    def forged_start_confirm(self, sums):
        self._deliver(self.codec.start_confirm(AuthMessage(tuple(sums))))

    @invariant()
    def block_never_exceeds_t_block(self):
        if self.car.state.phase is CarPhase.BLOCKED:
            assert self.car.state.deadline - self.now <= DEFAULT_TIMINGS.t_block

    @invariant()
    def lockouts_need_enough_failures(self):
        assert self.car.lockouts * DEFAULT_TIMINGS.fail_threshold <= self.failures


TestCarUnderFire = CarUnderFire.TestCase
TestCarUnderFire.settings = settings(max_examples=60, stateful_step_count=40, deadline=None)
