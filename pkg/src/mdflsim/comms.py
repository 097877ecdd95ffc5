"""Per-round communication/computation energy and time accounting.

All energy and time quantities are exact rationals (fractions.Fraction)
over the base unit so that residual-energy bookkeeping never drifts.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

Number = int | float | Fraction


class LedgerError(RuntimeError):
    """Residual-energy invariant violated; indicates a protocol bug upstream."""


def units(x: Number) -> Fraction:
    """Convert a numeric amount to an exact Fraction.

    Floats are read at their decimal face value (str round-trip), which is
    what configuration files mean by e.g. 2.5 units.
    """
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    if isinstance(x, float):
        if x != x or x in (float("inf"), float("-inf")):
            raise ValueError(f"non-finite amount {x}")
        return Fraction(str(x))
    raise TypeError(f"unsupported amount type {type(x).__name__}")


def _prob(p: Number) -> Fraction:
    p = units(p)
    if not (0 <= p <= 1):
        raise ValueError(f"probability {p} outside [0, 1]")
    return p


@dataclass(frozen=True)
class CommParams:
    """Direct/indirect transmission costs and the direct-range radius."""

    r: Fraction = Fraction(200)  # meters
    e_edge: Fraction = Fraction(2)  # energy per direct transmission phase
    e_cloud: Fraction = Fraction(5)  # energy per indirect (cellular) phase
    t_edge: Fraction = Fraction(1)  # time per direct transmission phase
    t_cloud: Fraction = Fraction(2)  # time per indirect phase

    def __post_init__(self):
        for name in ("r", "e_edge", "e_cloud", "t_edge", "t_cloud"):
            object.__setattr__(self, name, units(getattr(self, name)))
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.e_cloud < self.e_edge:
            raise ValueError("indirect energy must be >= direct energy")
        if self.t_cloud < self.t_edge:
            raise ValueError("indirect time must be >= direct time")


@dataclass(frozen=True)
class ComputeParams:
    """Per-iteration training costs and the round time budget."""

    e_itr: Fraction = Fraction(5)  # energy per local iteration
    t_itr: Fraction = Fraction(1)  # time per local iteration
    t_round: Fraction = Fraction(10)  # duration of one communication round

    def __post_init__(self):
        for name in ("e_itr", "t_itr", "t_round"):
            object.__setattr__(self, name, units(getattr(self, name)))
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def follower_comm_energy(p_suc: Number, comm: CommParams) -> Fraction:
    """Energy of one transmission phase for a follower with direct-use chance p."""
    p = _prob(p_suc)
    return p * comm.e_edge + (1 - p) * comm.e_cloud


def leader_comm_energy(p_list: Iterable[Number], comm: CommParams) -> Fraction:
    """Energy of one transmission phase for the leader: sum over follower links."""
    return sum((follower_comm_energy(p, comm) for p in p_list), Fraction(0))


def follower_comm_time(p_suc: Number, comm: CommParams) -> Fraction:
    """Time of one transmission phase for a follower."""
    p = _prob(p_suc)
    return p * comm.t_edge + (1 - p) * comm.t_cloud


def leader_comm_time(p_list: Sequence[Number], comm: CommParams) -> Fraction:
    """Time of one transmission phase for the leader: slowest follower link."""
    times = [follower_comm_time(p, comm) for p in p_list]
    if not times:
        raise ValueError("leader needs at least one follower link")
    return max(times)


def round_energy(l: int, e_com: Number, compute: ComputeParams) -> Fraction:
    """Total round energy: l training iterations plus three comm phases."""
    _check_iterations(l)
    return compute.e_itr * l + 3 * units(e_com)


def round_time(l: int, t_com: Number, compute: ComputeParams) -> Fraction:
    """Total round time: l training iterations plus three comm phases."""
    _check_iterations(l)
    return compute.t_itr * l + 3 * units(t_com)


def _check_iterations(l: int):
    if not isinstance(l, int) or isinstance(l, bool) or l < 1:
        raise ValueError(f"iteration count must be a positive integer, got {l!r}")


def max_direct_iterations(comm: CommParams, compute: ComputeParams,
                          phases: int = 3) -> int:
    """Largest l that fits the round budget when every phase is direct."""
    budget = compute.t_round - phases * comm.t_edge
    if budget < compute.t_itr:
        return 0
    return int(budget / compute.t_itr)


def predicted_comm_energies(leader_id: int, p_pred: Mapping[int, Number],
                            comm: CommParams) -> dict[int, Fraction]:
    """Per-vehicle predicted single-phase comm energy for a candidate leader.

    p_pred maps each follower id to its predicted direct-use probability;
    the leader's entry is the sum over all follower links.
    """
    out: dict[int, Fraction] = {}
    total = Fraction(0)
    for vid in sorted(p_pred):
        e = follower_comm_energy(p_pred[vid], comm)
        out[vid] = e
        total += e
    out[leader_id] = total
    return out


@dataclass(frozen=True)
class LedgerRow:
    round_k: int
    vehicle_id: int
    e_cmp: Fraction
    e_com: Fraction  # single-phase communication energy
    e_sum: Fraction  # total charged for the round


class EnergyLedger:
    """Tracks initial, spent and residual energy per vehicle.

    Commits are all-or-nothing per round and reject overdrafts, so
    residual(v) = initial(v) - sum of committed e_sum holds exactly.
    """

    def __init__(self, initial: Mapping[int, Number]):
        self.initial: dict[int, Fraction] = {v: units(e) for v, e in initial.items()}
        for v, e in self.initial.items():
            if e <= 0:
                raise ValueError(f"vehicle {v} initial energy must be positive")
        self.spent: dict[int, Fraction] = {v: Fraction(0) for v in self.initial}
        self.per_round: list[LedgerRow] = []

    def residual(self, vehicle_id: int) -> Fraction:
        return self.initial[vehicle_id] - self.spent[vehicle_id]

    def residuals(self, vehicle_ids: Iterable[int] | None = None) -> dict[int, Fraction]:
        ids = self.initial.keys() if vehicle_ids is None else vehicle_ids
        return {v: self.residual(v) for v in ids}

    def commit(self, round_k: int,
               charges: Mapping[int, tuple[Number, Number, Number]]) -> None:
        """Charge (e_cmp, e_com, e_sum) per vehicle for a committed round."""
        rows = []
        for vid in sorted(charges):
            e_cmp, e_com, e_sum = (units(x) for x in charges[vid])
            if e_sum > self.residual(vid):
                raise LedgerError(
                    f"round {round_k}: vehicle {vid} charge {e_sum} exceeds "
                    f"residual {self.residual(vid)}")
            rows.append(LedgerRow(round_k, vid, e_cmp, e_com, e_sum))
        for row in rows:
            self.spent[row.vehicle_id] += row.e_sum
            self.per_round.append(row)

    def committed_rounds(self) -> list[int]:
        return sorted({row.round_k for row in self.per_round})

    def total_spent(self) -> Fraction:
        return sum(self.spent.values(), Fraction(0))
