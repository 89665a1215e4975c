#!/usr/bin/env python3
"""
Scenario, matrix and provisioning configuration, and the scenario runner.

Configuration files are INI-style; every section maps onto a pydantic model
and validation errors are collected into one ConfigError listing each bad
field as 'section.field: reason'.
"""
import configparser
import logging
import os
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from core.adversaries import (
    TECHNIQUES, AttackRun, Target, build_target, cloned_key_attack, forward_prediction_attack,
    jam_attack, playback_attack, relay_attack, scan_attack
)
from core.audit import AuditReport, TraceAuditor
from core.baselines import BaselineParams
from core.channel import Trace
from core.devices import Button, CarTransceiver, DeviceTimings, KeyFob, VehicleEvent
from core.errors import ConfigError, ProvisioningError
from core.keystore import CarKeyId, CipherParams, StrongSource, new_key_table
from core.provisioning import (
    PORT_NAMES, BoardComputer, ExchangeOutcome, ExchangeReport, FaultPlan, RekeyReminder, tables_consistent
)
from core.utils import EXIT_INVARIANT_VIOLATION, EXIT_OK, get_output_dir, write_json

logger = logging.getLogger('rkesim.scenario')

Technique = Literal["fixed", "rolling", "passive_cr", "proposed"]
AttackKind = Literal["none", "scan", "playback", "forward_prediction", "relay", "jam", "cloned_key"]
MATRIX_ATTACKS = ("scan", "playback", "forward_prediction")


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)


class ProtocolSettings(_Section):
    word_bits: int = 16
    sum_count: int = 5
    table_size: int = 2000

    @model_validator(mode='after')
    def _check_profile(self):
        self.cipher_params()
        return self

    def cipher_params(self) -> CipherParams:
        return CipherParams(self.word_bits, self.sum_count, self.table_size)


class EntropySettings(_Section):
    kind: Literal["strong", "weak"] = "strong"
    seed: int = Field(0, ge=0)


class BaselineSettings(_Section):
    code_bits: int = 32
    block_bits: int = 32
    window: int = 16
    challenge_bits: int = 32

    @model_validator(mode='after')
    def _check_widths(self):
        self.baseline_params()
        return self

    def baseline_params(self) -> BaselineParams:
        return BaselineParams(self.code_bits, self.block_bits, self.window, self.challenge_bits)


class AttackSettings(_Section):
    kind: AttackKind = "none"
    budget: int = Field(100, ge=1)
    n_record: int = Field(3, ge=1)
    n_observe: int = Field(3, ge=1)
    fallback: bool = False
    relay_delay: int = Field(20, ge=0)
    victim_press: bool = False
    jam_start: Optional[int] = Field(None, ge=0)
    jam_end: Optional[int] = Field(None, ge=0)
    reprovision: bool = False

    @model_validator(mode='after')
    def _check_jam_window(self):
        if (self.jam_start is None) != (self.jam_end is None):
            raise ValueError("jam_start and jam_end must be given together")
        if self.jam_start is not None and self.jam_end <= self.jam_start:
            raise ValueError("jam_end must be after jam_start")
        return self


class ScriptEvent(_Section):
    """One scripted physical input: `<t_ms> press|start|vehicle|move <endpoint> [arg]`."""
    at: int = Field(ge=0)
    action: Literal["press", "start", "vehicle", "move"]
    target: str
    arg: Optional[str] = None

    @model_validator(mode='after')
    def _check_arg(self):
        if self.action == "press":
            Button(self.arg)
        elif self.action == "vehicle":
            VehicleEvent(self.arg)
        elif self.action == "move" and not self.arg:
            raise ValueError("move needs a channel name")
        return self

    @classmethod
    def parse(cls, line: str) -> "ScriptEvent":
        parts = line.split()
        if len(parts) < 3:
            raise ValueError(f"expected '<t_ms> <action> <endpoint> [arg]', got '{line}'")
        at, action, target = parts[:3]
        arg = parts[3].upper() if len(parts) > 3 and action in ("press", "vehicle") else (
            parts[3] if len(parts) > 3 else None)
        return cls(at=at, action=action, target=target, arg=arg)


class ScenarioConfig(_Section):
    name: str
    technique: Technique = "proposed"
    duration: int = Field(10_000, gt=0)
    repetitions: int = Field(1, ge=1)
    protocol: ProtocolSettings = ProtocolSettings()
    timings: DeviceTimings = DeviceTimings()
    entropy: EntropySettings = EntropySettings()
    baseline: BaselineSettings = BaselineSettings()
    attack: AttackSettings = AttackSettings()
    script: List[ScriptEvent] = Field(default_factory=list)

    @model_validator(mode='after')
    def _check_attack(self):
        kind = self.attack.kind
        if kind in ("jam", "cloned_key") and self.technique != "proposed":
            raise ValueError(f"attack '{kind}' needs technique 'proposed'")
        return self

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return self.model_copy(update={"entropy": self.entropy.model_copy(update={"seed": seed})})


class MatrixBudgets(_Section):
    """Attempts per cell, with optional '<attack>.<technique>' overrides."""
    model_config = ConfigDict(extra='allow', frozen=True)

    scan: int = Field(2000, ge=1)
    playback: int = Field(200, ge=1)
    forward_prediction: int = Field(200, ge=1)
    n_record: int = Field(20, ge=1)
    n_observe: int = Field(5, ge=1)

    @model_validator(mode='after')
    def _check_overrides(self):
        for key, value in (self.model_extra or {}).items():
            attack, _, technique = key.partition(".")
            if attack not in MATRIX_ATTACKS or technique not in TECHNIQUES:
                raise ValueError(f"unknown budget key '{key}'")
            if int(value) < 1:
                raise ValueError(f"budget '{key}' must be positive")
        return self

    def budget_for(self, attack: str, technique: str) -> int:
        override = (self.model_extra or {}).get(f"{attack}.{technique}")
        return int(override) if override is not None else getattr(self, attack)


class MatrixConfig(_Section):
    name: str = "matrix"
    techniques: List[Technique] = Field(default_factory=lambda: list(TECHNIQUES))
    attacks: List[Literal["scan", "playback", "forward_prediction"]] = Field(
        default_factory=lambda: list(MATRIX_ATTACKS))
    repetitions: int = Field(1, ge=1)
    budgets: MatrixBudgets = MatrixBudgets()
    protocol: ProtocolSettings = ProtocolSettings()
    timings: DeviceTimings = DeviceTimings()
    entropy: EntropySettings = EntropySettings()
    baseline: BaselineSettings = BaselineSettings(code_bits=12, block_bits=16, window=16, challenge_bits=16)

    @field_validator("techniques", "attacks", mode='before')
    @classmethod
    def _split(cls, value):
        if isinstance(value, str):
            return [item.strip() for item in value.split(",") if item.strip()]
        return value


class ReminderSettings(_Section):
    interval_ms: Optional[int] = Field(None, gt=0)
    max_uses: Optional[int] = Field(None, gt=0)


class ProvisionConfig(_Section):
    name: str = "provision"
    password: str = "0000"
    attempt_password: str = "0000"
    runs: int = Field(1, ge=1)
    fault_probability: float = Field(0.0, ge=0.0, le=1.0)
    faults: List[Tuple[str, int, int, Literal["write", "restore"]]] = Field(default_factory=list)
    uses_before_exchange: int = Field(0, ge=0)
    protocol: ProtocolSettings = ProtocolSettings()
    entropy: EntropySettings = EntropySettings()
    reminder: ReminderSettings = ReminderSettings()

    @field_validator("faults", mode='before')
    @classmethod
    def _parse_faults(cls, value):
        # "A:3:1, B:5:2:restore" -> (fob, block, attempt, phase)
        if not isinstance(value, str):
            return value
        faults = []
        for item in (part.strip() for part in value.split(",")):
            if not item:
                continue
            fields = item.split(":")
            if len(fields) not in (3, 4):
                raise ValueError(f"fault '{item}' is not fob:block:attempt[:phase]")
            phase = fields[3] if len(fields) == 4 else "write"
            faults.append((fields[0].upper(), fields[1], fields[2], phase))
        return faults

    @field_validator("faults")
    @classmethod
    def _check_fobs(cls, value):
        for fob, _block, _attempt, _phase in value:
            if fob not in ("A", "B"):
                raise ValueError(f"fault fob must be A or B, got {fob}")
        return value


# -- INI loading ---------------------------------------------------------------

def read_ini(path: str) -> configparser.ConfigParser:
    """
    Parse an INI file.

    Raises:
        ConfigError: Missing file or malformed syntax
    """
    if not os.path.exists(path):
        raise ConfigError([f"file: {path} not found"], path)
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, 'r', encoding='utf-8') as f:
            parser.read_file(f)
    except configparser.Error as e:
        raise ConfigError([f"file: {e}"], path)
    return parser


def _sections_to_data(parser: configparser.ConfigParser, top: str) -> Dict[str, Any]:
    data: Dict[str, Any] = {}
    for section in parser.sections():
        values = dict(parser.items(section))
        if section == top:
            data.update(values)
        else:
            data[section] = values
    return data


def _describe(error: Dict[str, Any], top: str, sections: frozenset = frozenset()) -> str:
    loc = [str(part) for part in error.get("loc", ())]
    if not loc:
        where = top
    elif len(loc) == 1 and loc[0] not in sections:
        where = f"{top}.{loc[0]}"
    else:
        where = ".".join(loc[:2]) + "".join(f"[{part}]" for part in loc[2:])
    message = error.get("msg", "invalid value")
    return f"{where}: {message}"


def _validate(model_cls, data: Dict[str, Any], top: str, path: Optional[str], errors: List[str]):
    try:
        config = model_cls.model_validate(data)
    except ValidationError as e:
        sections = frozenset(key for key, value in data.items() if isinstance(value, dict))
        errors.extend(_describe(err, top, sections) for err in e.errors())
        raise ConfigError(errors, path)
    if errors:
        raise ConfigError(errors, path)
    return config


def load_scenario(path: str) -> ScenarioConfig:
    """
    Load and validate a scenario file.

    Args:
        path: Path to the .scn file

    Returns:
        ScenarioConfig: Validated scenario

    Raises:
        ConfigError: Listing every invalid field
    """
    data = _sections_to_data(read_ini(path), "scenario")
    data.setdefault("name", os.path.splitext(os.path.basename(path))[0])
    errors: List[str] = []
    script = data.pop("script", None)
    if script is not None:
        events = []
        lines = [line.strip() for line in script.get("events", "").splitlines() if line.strip()]
        for number, line in enumerate(lines, start=1):
            try:
                events.append(ScriptEvent.parse(line))
            except (ValueError, ValidationError) as e:
                reason = e.errors()[0]["msg"] if isinstance(e, ValidationError) else str(e)
                errors.append(f"script.events: line {number}: {reason}")
        data["script"] = events
    return _validate(ScenarioConfig, data, "scenario", path, errors)


def load_matrix_config(path: str) -> MatrixConfig:
    return _validate(MatrixConfig, _sections_to_data(read_ini(path), "matrix"), "matrix", path, [])


def load_provision_config(path: str) -> ProvisionConfig:
    return _validate(ProvisionConfig, _sections_to_data(read_ini(path), "provision"), "provision", path, [])


# -- scenario runner -----------------------------------------------------------

class RunSummary(BaseModel):
    seed: int
    attack: str
    succeeded: Optional[bool] = None
    attempts: int = 0
    successes: int = 0
    evidence: List[str] = Field(default_factory=list)
    actuators: List[str] = Field(default_factory=list)
    honks: List[int] = Field(default_factory=list)
    locks: List[int] = Field(default_factory=list)
    audit: AuditReport
    details: Dict[str, Any] = Field(default_factory=dict)
    trace_file: Optional[str] = None


class ScenarioReport(BaseModel):
    scenario: str
    technique: str
    seed: int
    repetitions: int
    exit_code: int
    success_rate: Optional[float] = None
    timings: Dict[str, Any]
    runs: List[RunSummary]


def apply_script(target: Target, events: List[ScriptEvent]) -> None:
    """
    Schedule scripted inputs on the target's simulation.

    Raises:
        ConfigError: An event names an unknown endpoint or channel
    """
    sim = target.sim
    errors = []
    for number, event in enumerate(events, start=1):
        if event.target not in sim.endpoints:
            errors.append(f"script.events: line {number}: unknown endpoint '{event.target}'")
            continue
        if event.action == "press":
            sim.press_button(event.at, event.target, Button(event.arg))
        elif event.action == "start":
            sim.press_button(event.at, event.target, "START")
        elif event.action == "vehicle":
            sim.vehicle_event(event.at, event.target, VehicleEvent(event.arg))
        elif event.arg not in sim.channels:
            errors.append(f"script.events: line {number}: unknown channel '{event.arg}'")
        else:
            endpoint, channel = sim.endpoints[event.target], sim.channels[event.arg]
            sim.schedule_action(event.at, lambda _now, e=endpoint, c=channel: sim.move_endpoint(e, c))
    if errors:
        raise ConfigError(errors)


def execute(config: ScenarioConfig, seed: int) -> AttackRun:
    """Run one repetition of a scenario and return its trace and outcome."""
    attack = config.attack
    params = config.protocol.cipher_params()
    if attack.kind == "cloned_key":
        return cloned_key_attack(attack.reprovision, seed=seed, params=params, timings=config.timings)

    target = build_target(config.technique, params=params, baseline=config.baseline.baseline_params(),
                          timings=config.timings, entropy=config.entropy.kind, seed=seed,
                          trace_params={"scenario": config.name})
    apply_script(target, config.script)
    adversary_entropy = StrongSource(seed * 8 + 6)

    if attack.kind == "none":
        trace = target.sim.run_until(config.duration)
        return AttackRun(TraceAuditor(trace).attack_outcome(), trace)
    if attack.kind == "scan":
        return scan_attack(target, attack.budget, adversary_entropy)
    if attack.kind == "playback":
        return playback_attack(target, attack.n_record, attack.budget, adversary_entropy)
    if attack.kind == "forward_prediction":
        return forward_prediction_attack(target, attack.n_observe, attack.budget, adversary_entropy,
                                         fallback=attack.fallback)
    if attack.kind == "relay":
        return relay_attack(target, attack.relay_delay, victim_press_at=1_000 if attack.victim_press else None,
                            duration=config.duration)
    window = (attack.jam_start, attack.jam_end) if attack.jam_start is not None else None
    return jam_attack(target, jam_window=window, horizon=config.duration)


def _summarise(config: ScenarioConfig, seed: int, run: AttackRun, trace_file: Optional[str]) -> RunSummary:
    trace = run.trace
    actuators = trace.actuators()
    scored = config.attack.kind != "none"
    return RunSummary(
        seed=seed,
        attack=config.attack.kind,
        succeeded=run.outcome.succeeded if scored else None,
        attempts=run.outcome.attempts,
        successes=run.outcome.successes,
        evidence=run.outcome.evidence,
        actuators=[f"{r.at} {r.endpoint} {r.detail}" for r in actuators],
        honks=[r.at for r in actuators if r.detail == "HONK"],
        locks=[r.at for r in actuators if r.detail == "LOCK_DOORS"],
        audit=TraceAuditor(trace).report(),
        details=run.details,
        trace_file=trace_file,
    )


def run_scenario(config_path: str, seed: Optional[int] = None, out_dir: Optional[str] = None,
                 write_trace: bool = True) -> ScenarioReport:
    """
    Run a scenario file, write its trace(s) and JSON report.

    Args:
        config_path: Scenario file
        seed: Overrides the scenario seed
        out_dir: Output directory (RKESIM_OUTPUT_DIR or output/ by default)
        write_trace: Write the trace file(s)

    Returns:
        ScenarioReport: Report also written as <name>.report.json

    Raises:
        ConfigError: Invalid scenario file
    """
    config = load_scenario(config_path)
    if seed is not None:
        config = config.with_seed(seed)
    base_seed = config.entropy.seed
    out_dir = get_output_dir(out_dir)
    logger.info(f"Running scenario {config.name} ({config.technique}, attack {config.attack.kind}, "
                f"seed {base_seed}, {config.repetitions} repetition(s))")

    runs = []
    for repetition in range(config.repetitions):
        run_seed = base_seed + repetition
        run = execute(config, run_seed)
        trace_file = None
        if write_trace:
            suffix = f".{repetition}" if config.repetitions > 1 else ""
            trace_file = run.trace.write(os.path.join(out_dir, f"{config.name}{suffix}.trace"))
        runs.append(_summarise(config, run_seed, run, trace_file and os.path.basename(trace_file)))

    clean = all(r.audit.clean for r in runs)
    success_rate = None
    if config.attack.kind != "none":
        success_rate = sum(1 for r in runs if r.succeeded) / len(runs)
    report = ScenarioReport(
        scenario=config.name, technique=config.technique, seed=base_seed,
        repetitions=config.repetitions, exit_code=EXIT_OK if clean else EXIT_INVARIANT_VIOLATION,
        success_rate=success_rate, timings=config.timings.model_dump(), runs=runs,
    )
    for r in runs:
        for violation in r.audit.violations:
            logger.error(f"{config.name} seed {r.seed}: {violation}")
    write_json(report.model_dump(mode='json'), os.path.join(out_dir, f"{config.name}.report.json"))
    return report


def audit_trace_file(trace_path: str) -> AuditReport:
    """
    Audit a trace file.

    Raises:
        TraceFormatError: The file is not in the trace line format
    """
    return TraceAuditor(Trace.read(trace_path)).report()


# -- provisioning demo ---------------------------------------------------------

class ProvisionRun(BaseModel):
    seed: int
    exchange: Optional[ExchangeReport] = None
    error: Optional[str] = None
    consistent: bool
    silent_divergence: bool = False
    reminder_due_before: bool = False
    reminder_due_after: bool = False


class ProvisionReport(BaseModel):
    name: str
    seed: int
    exit_code: int
    outcomes: Dict[str, int]
    silent_divergences: int
    runs: List[ProvisionRun]


def provision_once(config: ProvisionConfig, seed: int) -> ProvisionRun:
    """Build a car with two fobs, re-key them through the board computer and check the result."""
    secrets = StrongSource(seed * 8)
    params = config.protocol.cipher_params()
    car_id = CarKeyId(secrets.next_uniform(2**32))
    table = new_key_table(secrets, params)
    car = CarTransceiver(car_id, table, StrongSource(seed * 8 + 1))
    fob_a = KeyFob(car_id, table, StrongSource(seed * 8 + 2))
    fob_b = KeyFob(car_id, table, StrongSource(seed * 8 + 3))
    board = BoardComputer(car_id, table, config.password, transceiver=car)

    reminder = RekeyReminder(config.reminder.interval_ms, config.reminder.max_uses)
    reminder.record_use(config.uses_before_exchange)
    due_before = reminder.is_due(0)

    faults = FaultPlan(frozenset((PORT_NAMES.index(fob), block, attempt, phase)
                                 for fob, block, attempt, phase in config.faults))
    if config.fault_probability > 0:
        faults = faults.merged(FaultPlan.random(StrongSource(seed * 8 + 4), config.fault_probability,
                                                board.block_count))
    board.connect(0, fob_a)
    board.connect(1, fob_b)

    report, error = None, None
    try:
        board.begin_programming(config.attempt_password)
        board.verify_ids()
        report = board.exchange_keys(StrongSource(seed * 8 + 5), faults)
    except ProvisioningError as e:
        logger.warning(f"Provisioning seed {seed}: {e}")
        error = str(e)

    consistent = tables_consistent(board, fob_a, fob_b) and car.table.same_contents(board.table)
    silent = not consistent and (report is None or report.outcome is not ExchangeOutcome.INCONSISTENT)
    if report is not None and report.outcome is ExchangeOutcome.DONE:
        reminder.record_exchange(0)
    return ProvisionRun(seed=seed, exchange=report, error=error, consistent=consistent,
                        silent_divergence=silent, reminder_due_before=due_before,
                        reminder_due_after=reminder.is_due(0))


def run_provision_demo(config_path: str, seed: Optional[int] = None,
                       out_dir: Optional[str] = None) -> ProvisionReport:
    """
    Run the key-exchange demonstration described by a provisioning file.

    Raises:
        ConfigError: Invalid provisioning file
    """
    config = load_provision_config(config_path)
    base_seed = config.entropy.seed if seed is None else seed
    runs = [provision_once(config, base_seed + i) for i in range(config.runs)]
    outcomes: Dict[str, int] = {}
    for run in runs:
        key = run.exchange.outcome.value if run.exchange is not None else "NOT_STARTED"
        outcomes[key] = outcomes.get(key, 0) + 1
    silent = sum(1 for run in runs if run.silent_divergence)
    if silent:
        logger.error(f"{silent} exchange(s) left the tables divergent without reporting it")
    report = ProvisionReport(name=config.name, seed=base_seed,
                             exit_code=EXIT_INVARIANT_VIOLATION if silent else EXIT_OK,
                             outcomes=outcomes, silent_divergences=silent, runs=runs)
    write_json(report.model_dump(mode='json'), os.path.join(get_output_dir(out_dir), f"{config.name}.report.json"))
    return report
