"""Vehicle mobility: synthetic trace generation, trace ingestion, and
current/predicted inter-vehicle distances on a straight multi-lane road."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

TRACE_COLUMNS = ("round", "vehicle_id", "x", "y", "speed", "accel")


class TraceParseError(ValueError):
    """Malformed trace file row; carries the 1-based line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class TraceValidationError(ValueError):
    """Structurally valid file whose contents violate trace invariants."""


@dataclass(frozen=True)
class VehicleKinematics:
    """Position, speed and acceleration of one vehicle at a round start."""

    vehicle_id: int
    x: float  # meters, east-positive along the main road
    y: float  # meters, lateral
    speed: float  # m/s, >= 0
    accel: float  # m/s^2, applied during the upcoming round


@dataclass(frozen=True)
class RoiSpec:
    """Closed rectangular region of interest; membership uses closed bounds."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError("RoI bounds must satisfy x_min < x_max and y_min < y_max")

    def contains(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max


@dataclass(frozen=True)
class Route:
    entry_x: float
    exit_x: float


@dataclass(frozen=True)
class TraceConfig:
    """Road layout and traffic parameters for synthetic trace generation.

    Defaults model a 3 km east-west road with three exit ramps and one
    entrance ramp; vehicles enter from the west end or the entrance ramp
    and leave via a ramp or the east end.
    """

    n_vehicles: int = 10
    rounds: int = 200
    round_duration: float = 10.0  # time units per communication round
    road_length: float = 3000.0
    road_width: float = 200.0
    exit_ramps: tuple[float, ...] = (500.0, 1000.0, 2500.0)
    entrance_ramp: float | None = 2000.0
    lane_ys: tuple[float, ...] = (96.0, 100.0, 104.0)
    speed_min: float = 8.0
    speed_max: float = 12.0
    accel_min: float = -0.5
    accel_max: float = 0.5
    entry_window: int = 20  # entry rounds sampled uniformly from [1, entry_window]

    def validate(self):
        if self.n_vehicles < 2:
            raise ValueError("trace requires at least 2 vehicles")
        if self.rounds < 1:
            raise ValueError("trace requires at least 1 round")
        if self.road_length <= 0 or self.road_width <= 0 or self.round_duration <= 0:
            raise ValueError("road dimensions and round duration must be positive")
        if not (0 <= self.speed_min <= self.speed_max):
            raise ValueError("need 0 <= speed_min <= speed_max")
        if self.accel_min > self.accel_max:
            raise ValueError("need accel_min <= accel_max")
        if not (1 <= self.entry_window <= self.rounds):
            raise ValueError("entry_window must lie in [1, rounds]")
        for ramp in self.exit_ramps:
            if not (0 < ramp < self.road_length):
                raise ValueError("exit ramps must lie strictly inside the road")
        if self.entrance_ramp is not None and not (0 <= self.entrance_ramp < self.road_length):
            raise ValueError("entrance ramp must lie inside the road")
        for y in self.lane_ys:
            if not (0 <= y <= self.road_width):
                raise ValueError("lane positions must lie inside the road width")

    def roi(self) -> RoiSpec:
        return RoiSpec(0.0, self.road_length, 0.0, self.road_width)


@dataclass
class MobilityTrace:
    """Time-indexed vehicle snapshots; snapshots[k-1] is the state at round k."""

    round_duration: float
    snapshots: list[list[VehicleKinematics]]

    @property
    def num_rounds(self) -> int:
        return len(self.snapshots)

    def snapshot(self, k: int) -> list[VehicleKinematics]:
        if not (1 <= k <= self.num_rounds):
            raise IndexError(f"round {k} outside trace range 1..{self.num_rounds}")
        return self.snapshots[k - 1]

    def vehicle_ids(self) -> list[int]:
        ids = {v.vehicle_id for snap in self.snapshots for v in snap}
        return sorted(ids)

    def validate(self):
        for k, snap in enumerate(self.snapshots, start=1):
            seen = set()
            for v in snap:
                if v.vehicle_id in seen:
                    raise TraceValidationError(
                        f"duplicate vehicle_id {v.vehicle_id} in round {k}")
                seen.add(v.vehicle_id)
                if v.speed < 0:
                    raise TraceValidationError(
                        f"negative speed for vehicle {v.vehicle_id} in round {k}")


def distance(a: VehicleKinematics, b: VehicleKinematics) -> float:
    """Euclidean distance between two vehicles' positions."""
    return math.hypot(a.x - b.x, a.y - b.y)


def direct_comm_indicator(d: float, r: float) -> int:
    """1 if the pair can use direct transmission (d <= r, boundary inclusive)."""
    if d < 0 or r <= 0:
        raise ValueError("need d >= 0 and r > 0")
    return 1 if d <= r else 0


def predict_displacement(speed: float, accel: float, t: float) -> float:
    """Distance covered in time t under constant acceleration: s*t + a*t^2/2."""
    if t < 0:
        raise ValueError("prediction horizon must be non-negative")
    return speed * t + 0.5 * accel * t * t


def predict_distance(u: VehicleKinematics, v: VehicleKinematics,
                     d_now: float, t_prev_cmp: float) -> float:
    """Worst-case distance estimate after both vehicles move for t_prev_cmp.

    Only x-axis motion contributes (the road's main direction). The result
    is clamped at zero; with t_prev_cmp = 0 it equals d_now.
    """
    if d_now < 0:
        raise ValueError("current distance must be non-negative")
    dd_u = predict_displacement(u.speed, u.accel, t_prev_cmp)
    dd_v = predict_displacement(v.speed, v.accel, t_prev_cmp)
    predicted = d_now + (u.x - v.x) * (dd_u - dd_v)
    return max(0.0, predicted)


def advanced_position(v: VehicleKinematics, t: float) -> VehicleKinematics:
    """Vehicle state with x advanced by its displacement over time t."""
    return VehicleKinematics(v.vehicle_id, v.x + predict_displacement(v.speed, v.accel, t),
                             v.y, v.speed, v.accel)


def roi_members(snapshot: Iterable[VehicleKinematics], roi: RoiSpec) -> set[int]:
    """Ids of vehicles inside the closed RoI rectangle."""
    return {v.vehicle_id for v in snapshot if roi.contains(v.x, v.y)}


def route_catalog(config: TraceConfig) -> list[Route]:
    """All (entry, exit) combinations with the exit downstream of the entry."""
    entries = [0.0]
    if config.entrance_ramp is not None:
        entries.append(config.entrance_ramp)
    exits = sorted(set(config.exit_ramps) | {config.road_length})
    return [Route(e, x) for e in entries for x in exits if x > e]


def generate_trace(config: TraceConfig, seed: int) -> MobilityTrace:
    """Synthesize a deterministic trace: uniform entry times and routes,
    per-round kinematic integration with bounded random acceleration."""
    config.validate()
    routes = route_catalog(config)
    children = np.random.SeedSequence(seed).spawn(config.n_vehicles)
    snapshots: list[list[VehicleKinematics]] = [[] for _ in range(config.rounds)]
    dt = config.round_duration
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        vid = i + 1
        route = routes[int(rng.integers(len(routes)))]
        entry_round = int(rng.integers(1, config.entry_window + 1))
        lane_y = float(config.lane_ys[int(rng.integers(len(config.lane_ys)))])
        x = route.entry_x
        speed = float(rng.uniform(config.speed_min, config.speed_max))
        for k in range(entry_round, config.rounds + 1):
            if x >= route.exit_x:
                break
            accel = float(rng.uniform(config.accel_min, config.accel_max))
            snapshots[k - 1].append(VehicleKinematics(vid, x, lane_y, speed, accel))
            # vehicles never reverse; displacement is floored at zero
            x += max(0.0, speed * dt + 0.5 * accel * dt * dt)
            speed = min(max(speed + accel * dt, config.speed_min), config.speed_max)
    for snap in snapshots:
        snap.sort(key=lambda v: v.vehicle_id)
    trace = MobilityTrace(round_duration=dt, snapshots=snapshots)
    trace.validate()
    return trace


def write_trace(trace: MobilityTrace, path) -> None:
    """Write a trace as CSV (`round,vehicle_id,x,y,speed,accel`, LF endings)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for k, snap in enumerate(trace.snapshots, start=1):
            for v in snap:
                writer.writerow([k, v.vehicle_id, repr(v.x), repr(v.y),
                                 repr(v.speed), repr(v.accel)])


def ingest_trace(path, round_duration: float = 10.0) -> MobilityTrace:
    """Parse a trace CSV, validating header, types, round ordering and
    per-round vehicle uniqueness. Rows may lie outside any RoI; membership
    is computed downstream per round."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TraceParseError(1, "empty file") from None
        if tuple(h.strip() for h in header) != TRACE_COLUMNS:
            raise TraceParseError(1, f"expected header {','.join(TRACE_COLUMNS)}")
        rows: list[tuple[int, VehicleKinematics]] = []
        last_round = 0
        seen: set[tuple[int, int]] = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(TRACE_COLUMNS):
                raise TraceParseError(lineno, f"expected {len(TRACE_COLUMNS)} fields, got {len(row)}")
            try:
                k = int(row[0])
                vid = int(row[1])
                x, y, speed, accel = (float(c) for c in row[2:])
            except ValueError as exc:
                raise TraceParseError(lineno, str(exc)) from None
            if k < 1:
                raise TraceParseError(lineno, f"round index must be >= 1, got {k}")
            if k < last_round:
                raise TraceValidationError(
                    f"line {lineno}: round index {k} decreases (after {last_round})")
            last_round = max(last_round, k)
            if (k, vid) in seen:
                raise TraceValidationError(
                    f"line {lineno}: duplicate (round, vehicle_id) = ({k}, {vid})")
            seen.add((k, vid))
            rows.append((k, VehicleKinematics(vid, x, y, speed, accel)))
    if not rows:
        raise TraceValidationError("trace contains no rows")
    num_rounds = max(k for k, _ in rows)
    snapshots: list[list[VehicleKinematics]] = [[] for _ in range(num_rounds)]
    for k, v in rows:
        snapshots[k - 1].append(v)
    for snap in snapshots:
        snap.sort(key=lambda v: v.vehicle_id)
    trace = MobilityTrace(round_duration=round_duration, snapshots=snapshots)
    trace.validate()
    return trace
