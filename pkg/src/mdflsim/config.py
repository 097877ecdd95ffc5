"""Experiment configuration: a sectioned key=value file with defaults that
match the reference parameter set (initial energy 1000, per-iteration
energy 5, direct/indirect transmission at 2/5 energy and 1/2 time units,
round budget 10, radius 200 m, trade-off coefficient 1, target
participation 5, 10 vehicles)."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from . import mobility
from .comms import CommParams, ComputeParams
from .flcore import AGGREGATION_KINDS, PARTITION_MODES

SCHEDULERS = ("mappo", "random", "dfl")
SWEEP_AXES = ("E_v", "E_cloud", "N", "epsilon", "r")


class ConfigError(ValueError):
    """Invalid configuration file or value; maps to exit code 1."""


@dataclass
class TraceSection:
    source: str = "generate"  # generate | file
    path: str = ""
    seed: int = 1
    vehicles: int = 10
    rounds: int = 200
    round_duration: float = 10.0
    road_length: float = 3000.0
    road_width: float = 200.0
    exit_ramps: tuple[float, ...] = (500.0, 1000.0, 2500.0)
    entrance_ramp: float = 2000.0  # <= 0 disables the entrance ramp
    speed_min: float = 8.0
    speed_max: float = 12.0
    accel_min: float = -0.5
    accel_max: float = 0.5
    entry_window: int = 20


@dataclass
class CommSection:
    r: float = 200.0
    e_edge: float = 2.0
    e_cloud: float = 5.0
    t_edge: float = 1.0
    t_cloud: float = 2.0


@dataclass
class ComputeSection:
    e_itr: float = 5.0
    t_itr: float = 1.0
    t_round: float = 10.0


@dataclass
class EnergySection:
    initial: float = 1000.0  # E_v, identical for every vehicle


@dataclass
class LeaderSection:
    epsilon: float = 1.0
    rho: float = 5.0


@dataclass
class FlSection:
    task: str = "blobs"  # blobs | idx
    dims: int = 2
    classes: int = 2
    blob_radius: float = 3.0
    blob_noise: float = 1.0
    train_per_client: int = 40
    val_per_client: int = 40
    hidden: int = 16
    activation: str = "tanh"
    lr: float = 0.05
    aggregation: str = "fedavg"
    mu: float = 0.01
    partition: str = "iid"
    alpha: float = 0.3
    seed: int = 7
    idx_train_images: str = ""
    idx_train_labels: str = ""
    idx_val_images: str = ""
    idx_val_labels: str = ""


@dataclass
class MarlSection:
    episodes: int = 300
    steps: int = 100  # environment steps per trajectory
    batch: int = 1  # trajectories per update
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    entropy: float = 0.01
    lr: float = 0.0005
    hidden: tuple[float, ...] = (64.0, 64.0)
    seed: int = 3
    policy: str = ""  # checkpoint path used by `run --scheduler mappo`


@dataclass
class RunSection:
    scheduler: str = "random"
    rounds: int = 200  # cap on executed communication rounds
    seed: int = 0


@dataclass
class ExperimentConfig:
    trace: TraceSection = field(default_factory=TraceSection)
    comm: CommSection = field(default_factory=CommSection)
    compute: ComputeSection = field(default_factory=ComputeSection)
    energy: EnergySection = field(default_factory=EnergySection)
    leader: LeaderSection = field(default_factory=LeaderSection)
    fl: FlSection = field(default_factory=FlSection)
    marl: MarlSection = field(default_factory=MarlSection)
    run: RunSection = field(default_factory=RunSection)

    def validate(self) -> "ExperimentConfig":
        _require(self.trace.source in ("generate", "file"),
                 "trace.source must be generate or file")
        if self.trace.source == "file":
            _require(bool(self.trace.path), "trace.path required when trace.source=file")
        _require(self.trace.vehicles >= 2, "trace.vehicles must be >= 2")
        _require(self.trace.rounds >= 1, "trace.rounds must be >= 1")
        for key in ("round_duration", "road_length", "road_width"):
            _require(getattr(self.trace, key) > 0, f"trace.{key} must be positive")
        _require(0 <= self.trace.speed_min <= self.trace.speed_max,
                 "trace.speed_min/speed_max out of order")
        _require(1 <= self.trace.entry_window <= self.trace.rounds,
                 "trace.entry_window must lie in [1, trace.rounds]")
        for key in ("r", "e_edge", "e_cloud", "t_edge", "t_cloud"):
            _require(getattr(self.comm, key) > 0, f"comm.{key} must be positive")
        _require(self.comm.e_cloud >= self.comm.e_edge,
                 "comm.e_cloud must be >= comm.e_edge")
        _require(self.comm.t_cloud >= self.comm.t_edge,
                 "comm.t_cloud must be >= comm.t_edge")
        for key in ("e_itr", "t_itr", "t_round"):
            _require(getattr(self.compute, key) > 0, f"compute.{key} must be positive")
        _require(self.energy.initial > 0, "energy.initial must be positive")
        _require(self.leader.epsilon >= 0, "leader.epsilon must be >= 0")
        _require(self.leader.rho >= 0, "leader.rho must be >= 0")
        _require(self.fl.task in ("blobs", "idx"), "fl.task must be blobs or idx")
        _require(self.fl.dims >= 1 and self.fl.classes >= 2,
                 "fl.dims must be >= 1 and fl.classes >= 2")
        _require(self.fl.train_per_client >= 1 and self.fl.val_per_client >= 1,
                 "fl.train_per_client and fl.val_per_client must be >= 1")
        _require(self.fl.hidden >= 1, "fl.hidden must be >= 1")
        _require(self.fl.activation in ("relu", "tanh"),
                 "fl.activation must be relu or tanh")
        _require(self.fl.lr > 0, "fl.lr must be positive")
        _require(self.fl.aggregation in AGGREGATION_KINDS,
                 f"fl.aggregation must be one of {', '.join(AGGREGATION_KINDS)}")
        _require(self.fl.mu >= 0, "fl.mu must be >= 0")
        _require(self.fl.partition in PARTITION_MODES,
                 f"fl.partition must be one of {', '.join(PARTITION_MODES)}")
        _require(self.fl.alpha > 0, "fl.alpha must be positive")
        _require(self.marl.episodes >= 1, "marl.episodes must be >= 1")
        _require(self.marl.steps >= 1, "marl.steps must be >= 1")
        _require(self.marl.batch >= 1, "marl.batch must be >= 1")
        _require(0 < self.marl.gamma <= 1, "marl.gamma must lie in (0, 1]")
        _require(0 <= self.marl.lam <= 1, "marl.lam must lie in [0, 1]")
        _require(self.marl.clip > 0, "marl.clip must be positive")
        _require(self.marl.entropy >= 0, "marl.entropy must be >= 0")
        _require(self.marl.lr > 0, "marl.lr must be positive")
        _require(all(h >= 1 for h in self.marl.hidden),
                 "marl.hidden sizes must be >= 1")
        _require(self.run.scheduler in SCHEDULERS,
                 f"run.scheduler must be one of {', '.join(SCHEDULERS)}")
        _require(self.run.rounds >= 1, "run.rounds must be >= 1")
        return self

    def trace_config(self) -> mobility.TraceConfig:
        t = self.trace
        ramp = t.entrance_ramp if t.entrance_ramp > 0 else None
        return mobility.TraceConfig(
            n_vehicles=t.vehicles, rounds=t.rounds, round_duration=t.round_duration,
            road_length=t.road_length, road_width=t.road_width,
            exit_ramps=tuple(t.exit_ramps), entrance_ramp=ramp,
            speed_min=t.speed_min, speed_max=t.speed_max,
            accel_min=t.accel_min, accel_max=t.accel_max,
            entry_window=t.entry_window)

    def comm_params(self) -> CommParams:
        c = self.comm
        return CommParams(r=c.r, e_edge=c.e_edge, e_cloud=c.e_cloud,
                          t_edge=c.t_edge, t_cloud=c.t_cloud)

    def compute_params(self) -> ComputeParams:
        c = self.compute
        return ComputeParams(e_itr=c.e_itr, t_itr=c.t_itr, t_round=c.t_round)


def _require(cond: bool, message: str):
    if not cond:
        raise ConfigError(message)


_SECTION_TYPES = {
    "trace": TraceSection,
    "comm": CommSection,
    "compute": ComputeSection,
    "energy": EnergySection,
    "leader": LeaderSection,
    "fl": FlSection,
    "marl": MarlSection,
    "run": RunSection,
}


def _parse_value(section: str, key: str, raw: str, default):
    path = f"{section}.{key}"
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "0", "1", "yes", "no"):
                raise ValueError("expected a boolean")
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            if not raw:
                return ()
            return tuple(float(part) for part in raw.split(","))
        return raw
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def parse_config(path) -> ExperimentConfig:
    """Read a config file; omitted keys keep their defaults and unknown
    sections or keys are rejected by name."""
    parser = configparser.ConfigParser()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = ExperimentConfig()
    for section in parser.sections():
        if section not in _SECTION_TYPES:
            raise ConfigError(f"unknown section [{section}]")
        target = getattr(cfg, section)
        known = {f.name: getattr(target, f.name) for f in fields(target)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key {section}.{key}")
            setattr(target, key, _parse_value(section, key, raw, known[key]))
    try:
        return cfg.validate()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
