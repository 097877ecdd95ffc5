"""One communication round end to end: leader scoring and selection, the
feasibility constraint system, round execution with rollback, and the
random / all-neighbor baseline schedulers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping

import numpy as np

from . import comms, flcore, mobility, nn
from .comms import CommParams, ComputeParams, EnergyLedger, units


class InfeasibleRoundError(RuntimeError):
    """Raised when no well-formed plan exists (fewer than 2 members)."""


@dataclass
class ParticipationTracker:
    """Rounds each vehicle has participated in, and the target count rho."""

    rho: float = 5.0
    counts: dict[int, int] = field(default_factory=dict)

    def count(self, vehicle_id: int) -> int:
        return self.counts.get(vehicle_id, 0)

    def record_round(self, members: Iterable[int]) -> None:
        for v in members:
            self.counts[v] = self.counts.get(v, 0) + 1

    def ratio(self, vehicle_id: int) -> float:
        return participation_ratio(self.count(vehicle_id), self.rho)


@dataclass(frozen=True)
class RoundPlan:
    """Joint decision for one round: the leader and per-vehicle iterations."""

    round_k: int
    leader_id: int
    iterations: Mapping[int, int]


@dataclass(frozen=True)
class ChargeRow:
    e_cmp: Fraction
    e_com: Fraction  # single-phase communication energy
    e_sum: Fraction
    t_sum: Fraction


@dataclass
class RoundOutcome:
    plan: RoundPlan
    members: list[int]
    violations: frozenset[str]
    charges: dict[int, ChargeRow]
    committed: bool
    t_max: Fraction

    @property
    def feasible(self) -> bool:
        return not self.violations


def energy_ratio(residuals: Mapping[int, Fraction], leader_id: int) -> Fraction:
    """Leader's share of the members' total residual energy."""
    if leader_id not in residuals:
        raise ValueError(f"leader {leader_id} is not a member")
    total = sum((units(e) for e in residuals.values()), Fraction(0))
    if total <= 0:
        raise ValueError("all residual energies are zero")
    return units(residuals[leader_id]) / total


def participation_ratio(h: int, rho: float) -> float:
    """Gaussian-shaped participation score, peaking at h = rho."""
    if h < 0:
        raise ValueError("participation count must be >= 0")
    return math.exp(-0.5 * (h - rho) ** 2)


def leader_score(candidate: int, residuals: Mapping[int, Fraction],
                 tracker: ParticipationTracker, epsilon: float) -> float:
    """Selection score: energy ratio plus epsilon times participation ratio."""
    w = float(energy_ratio(residuals, candidate))
    return w + epsilon * tracker.ratio(candidate)


def argmax_leader(members: Iterable[int], residuals: Mapping[int, Fraction],
                  tracker: ParticipationTracker, epsilon: float) -> int:
    """Member with the maximal selection score; ties go to the smallest id."""
    members = sorted(members)
    if len(members) < 2:
        raise InfeasibleRoundError("leader selection needs at least 2 members")
    best = members[0]
    best_score = leader_score(best, residuals, tracker, epsilon)
    for v in members[1:]:
        s = leader_score(v, residuals, tracker, epsilon)
        if s > best_score:
            best, best_score = v, s
    return best


def check_constraints(plan: RoundPlan, members: Iterable[int],
                      residuals: Mapping[int, Fraction],
                      predicted_round_energy: Mapping[int, Fraction],
                      realized: Mapping[int, ChargeRow],
                      scores: Mapping[int, float],
                      t_round: Fraction) -> frozenset[str]:
    """Evaluate every feasibility constraint; returns the violated labels.

    b: predicted round energy within residual, per vehicle.
    c: realized round energy within residual.
    d: realized round time within the round budget.
    e: the planned leader attains the maximal selection score (ties allowed).
    f: iteration counts are positive integers and there are >= 2 members.
    """
    members = sorted(members)
    violated: set[str] = set()
    for v in members:
        if predicted_round_energy[v] > residuals[v]:
            violated.add("b")
        if realized[v].e_sum > residuals[v]:
            violated.add("c")
        if realized[v].t_sum > t_round:
            violated.add("d")
    if scores and scores.get(plan.leader_id, -math.inf) < max(scores.values()):
        violated.add("e")
    if len(members) < 2:
        violated.add("f")
    for v in members:
        l = plan.iterations.get(v)
        if not isinstance(l, int) or isinstance(l, bool) or l < 1:
            violated.add("f")
    return frozenset(violated)


@dataclass
class FlTask:
    """The pluggable learning task shared by every scheduler."""

    netspec: nn.NetSpec
    eta: float
    init_params: np.ndarray
    clients: dict[int, flcore.ClientDataset]
    strategy_factory: Callable[[], object]


class SimState:
    """Mutable state of one simulated run over a fixed mobility trace."""

    def __init__(self, trace: mobility.MobilityTrace, roi: mobility.RoiSpec,
                 comm: CommParams, compute: ComputeParams,
                 initial_energy: Mapping[int, object], epsilon: float, rho: float,
                 task: FlTask):
        self.trace = trace
        self.roi = roi
        self.comm = comm
        self.compute = compute
        self.epsilon = float(epsilon)
        self.rho = float(rho)
        self.task = task
        self._initial_energy = dict(initial_energy)
        # a fresh run starts at the first round that can host one at all
        self.start_round = next(
            (k for k in range(1, trace.num_rounds + 1)
             if len(mobility.roi_members(trace.snapshot(k), roi)) >= 2),
            1)
        self.k = self.start_round  # next communication round
        self.reset()

    def vehicle_ids(self) -> list[int]:
        return sorted(self._initial_energy)

    def reset(self) -> None:
        """Fresh energies, models, participation history and trace position."""
        self.ledger = EnergyLedger(self._initial_energy)
        self.tracker = ParticipationTracker(rho=self.rho)
        self.models = {v: self.task.init_params.copy() for v in self._initial_energy}
        self.prev_l = {v: 0 for v in self._initial_energy}
        self.prev_leader: int | None = None
        self.strategy = self.task.strategy_factory()
        self.strategy.prepare(sorted(self._initial_energy), len(self.task.init_params))
        self.k = self.start_round

    # -- membership ------------------------------------------------------

    def min_round_cost(self) -> Fraction:
        """Cheapest conceivable round: one iteration, all phases direct."""
        return self.compute.e_itr + 3 * self.comm.e_edge

    def kinematics(self, k: int) -> dict[int, mobility.VehicleKinematics]:
        return {v.vehicle_id: v for v in self.trace.snapshot(k)}

    def members(self, k: int) -> list[int]:
        """Vehicles inside the RoI that can still afford some round."""
        in_roi = mobility.roi_members(self.trace.snapshot(k), self.roi)
        floor = self.min_round_cost()
        return sorted(v for v in in_roi
                      if v in self.ledger.initial and self.ledger.residual(v) >= floor)

    # -- predicted and realized per-pair communication --------------------

    def predicted_probabilities(self, k: int, leader_id: int,
                                members: Iterable[int]) -> dict[int, Fraction]:
        """Predicted direct-use indicator per follower, from positions advanced
        by each follower's previous-round training time."""
        kin = self.kinematics(k)
        out: dict[int, Fraction] = {}
        for v in sorted(members):
            if v == leader_id:
                continue
            t_prev = float(self.compute.t_itr * self.prev_l[v])
            d_now = mobility.distance(kin[leader_id], kin[v])
            d_pred = mobility.predict_distance(kin[leader_id], kin[v], d_now, t_prev)
            out[v] = Fraction(mobility.direct_comm_indicator(d_pred, float(self.comm.r)))
        return out

    def predicted_round_energy(self, k: int, plan: RoundPlan,
                               members: Iterable[int]) -> dict[int, Fraction]:
        """Planning-time energy bound per vehicle: training for the planned
        iterations plus three phases at the predicted link quality."""
        p_pred = self.predicted_probabilities(k, plan.leader_id, members)
        e_pred = comms.predicted_comm_energies(plan.leader_id, p_pred, self.comm)
        return {v: self.compute.e_itr * plan.iterations[v] + 3 * e_pred[v]
                for v in sorted(members)}

    def realized_charges(self, k: int, leader_id: int,
                         iterations: Mapping[int, int]) -> dict[int, ChargeRow]:
        """Actual charges, with link quality taken at positions advanced by
        each vehicle's own training time within the round."""
        kin = self.kinematics(k)
        members = sorted(iterations)
        advanced = {v: mobility.advanced_position(
            kin[v], float(self.compute.t_itr * iterations[v])) for v in members}
        p_real = {}
        for v in members:
            if v == leader_id:
                continue
            d = mobility.distance(advanced[leader_id], advanced[v])
            p_real[v] = Fraction(mobility.direct_comm_indicator(d, float(self.comm.r)))
        charges: dict[int, ChargeRow] = {}
        for v in members:
            l = iterations[v]
            if v == leader_id:
                e_com = comms.leader_comm_energy(p_real.values(), self.comm)
                t_com = comms.leader_comm_time(list(p_real.values()), self.comm) \
                    if p_real else Fraction(0)
            else:
                e_com = comms.follower_comm_energy(p_real[v], self.comm)
                t_com = comms.follower_comm_time(p_real[v], self.comm)
            e_cmp = self.compute.e_itr * l
            charges[v] = ChargeRow(
                e_cmp=e_cmp,
                e_com=e_com,
                e_sum=e_cmp + 3 * e_com,
                t_sum=self.compute.t_itr * l + 3 * t_com,
            )
        return charges

    def leader_scores(self, members: Iterable[int]) -> dict[int, float]:
        residuals = self.ledger.residuals(members)
        return {v: leader_score(v, residuals, self.tracker, self.epsilon)
                for v in sorted(members)}


def run_round(state: SimState, plan: RoundPlan,
              enforce_leader_rule: bool = True) -> RoundOutcome:
    """Execute one round under the plan.

    All constraints are evaluated first; the expensive training/aggregation
    work runs only when the round is fully feasible. Infeasible rounds leave
    the ledger, the models and the participation history untouched. The
    random baseline replaces the score-argmax selection rule, so it runs
    with enforce_leader_rule off.
    """
    k = plan.round_k
    members = state.members(k)
    if plan.leader_id not in members:
        raise ValueError(f"leader {plan.leader_id} is not a member of round {k}")
    if set(plan.iterations) != set(members):
        raise ValueError("plan iterations must cover exactly the round members")

    residuals = state.ledger.residuals(members)
    predicted = state.predicted_round_energy(k, plan, members)
    realized = state.realized_charges(k, plan.leader_id, plan.iterations)
    scores = state.leader_scores(members) if enforce_leader_rule else {}
    violations = check_constraints(plan, members, residuals, predicted,
                                   realized, scores, state.compute.t_round)
    t_max = max((row.t_sum for row in realized.values()), default=Fraction(0))
    outcome = RoundOutcome(plan=plan, members=members, violations=violations,
                           charges=realized, committed=False, t_max=t_max)
    if violations:
        return outcome

    # distribute, train locally, aggregate at the leader, broadcast
    start_model = state.models[plan.leader_id]
    trained: dict[int, np.ndarray] = {}
    for v in members:
        trained[v] = flcore.local_train(start_model, state.task.clients[v],
                                        plan.iterations[v], state.task.eta,
                                        state.task.netspec, state.strategy, v)
    weights = flcore.sample_weights(state.task.clients, members)
    new_global = state.strategy.aggregate(start_model, trained, weights,
                                          dict(plan.iterations))
    for v in members:
        state.models[v] = new_global.copy()

    state.ledger.commit(k, {v: (row.e_cmp, row.e_com, row.e_sum)
                            for v, row in realized.items()})
    state.tracker.record_round(members)
    for v in members:
        state.prev_l[v] = plan.iterations[v]
    state.prev_leader = plan.leader_id
    outcome.committed = True
    return outcome


def random_plan(round_k: int, members: Iterable[int], comm: CommParams,
                compute: ComputeParams, rng: np.random.Generator) -> RoundPlan:
    """Baseline plan: uniform leader, uniform iteration counts."""
    members = sorted(members)
    if len(members) < 2:
        raise InfeasibleRoundError("random plan needs at least 2 members")
    l_max = comms.max_direct_iterations(comm, compute, phases=3)
    if l_max < 1:
        raise InfeasibleRoundError("round budget admits no direct-range iterations")
    leader = members[int(rng.integers(len(members)))]
    iterations = {v: int(rng.integers(1, l_max + 1)) for v in members}
    return RoundPlan(round_k, leader, iterations)


def dfl_iterations(comm: CommParams, compute: ComputeParams) -> int:
    """Fixed iteration count of the all-neighbor baseline (two comm phases)."""
    return comms.max_direct_iterations(comm, compute, phases=2)


def dfl_round(state: SimState, round_k: int) -> RoundOutcome | None:
    """All-neighbor baseline: every vehicle trains a fixed number of
    iterations, exchanges models pairwise (send and receive phases) and
    averages everything it received with equal weights.

    Vehicles whose energy or time budget cannot cover the exchange are
    dropped and costs re-evaluated until the member set is stable. Rounds
    with fewer than two eligible vehicles are skipped (returns None).
    """
    l = dfl_iterations(state.comm, state.compute)
    if l < 1:
        return None
    kin = state.kinematics(round_k)
    members = state.members(round_k)
    t_cmp = float(state.compute.t_itr * l)
    advanced = {v: mobility.advanced_position(kin[v], t_cmp) for v in members}

    def pair_cost(a: int, b: int):
        p = mobility.direct_comm_indicator(
            mobility.distance(advanced[a], advanced[b]), float(state.comm.r))
        return (comms.follower_comm_energy(p, state.comm),
                comms.follower_comm_time(p, state.comm))

    def charges_for(group: list[int]) -> dict[int, ChargeRow]:
        out = {}
        for v in group:
            peers = [w for w in group if w != v]
            e_com = sum((pair_cost(v, w)[0] for w in peers), Fraction(0))
            t_com = max((pair_cost(v, w)[1] for w in peers), default=Fraction(0))
            e_cmp = state.compute.e_itr * l
            out[v] = ChargeRow(e_cmp=e_cmp, e_com=e_com,
                               e_sum=e_cmp + 2 * e_com,
                               t_sum=state.compute.t_itr * l + 2 * t_com)
        return out

    group = list(members)
    while True:
        if len(group) < 2:
            return None
        charges = charges_for(group)
        bad = [v for v in group
               if charges[v].e_sum > state.ledger.residual(v)
               or charges[v].t_sum > state.compute.t_round]
        if not bad:
            break

        # drop one vehicle per pass: the most isolated one first (so the
        # largest direct clique survives), then the deepest energy deficit
        def badness(v: int):
            indirect = sum(1 for w in group
                           if w != v and pair_cost(v, w)[1] > state.comm.t_edge)
            deficit = charges[v].e_sum - state.ledger.residual(v)
            return (indirect, deficit, v)

        group.remove(max(bad, key=badness))

    iterations = {v: l for v in group}
    plan = RoundPlan(round_k, group[0], iterations)  # no leader role; id is nominal
    trained = {v: flcore.local_train(state.models[v], state.task.clients[v], l,
                                     state.task.eta, state.task.netspec)
               for v in group}
    mean_model = np.mean([trained[v] for v in group], axis=0)
    for v in group:
        state.models[v] = mean_model.copy()
    state.ledger.commit(round_k, {v: (row.e_cmp, row.e_com, row.e_sum)
                                  for v, row in charges.items()})
    state.tracker.record_round(group)
    for v in group:
        state.prev_l[v] = l
    t_max = max(row.t_sum for row in charges.values())
    return RoundOutcome(plan=plan, members=group, violations=frozenset(),
                        charges=charges, committed=True, t_max=t_max)
