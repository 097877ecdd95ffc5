import math
from fractions import Fraction

import numpy as np
import pytest

from mdflsim import flcore, nn
from mdflsim.comms import CommParams, ComputeParams
from mdflsim.mobility import MobilityTrace, RoiSpec, VehicleKinematics
from mdflsim.protocol import (
    ChargeRow, FlTask, InfeasibleRoundError, ParticipationTracker, RoundPlan,
    SimState, argmax_leader, check_constraints, dfl_iterations, dfl_round,
    energy_ratio, leader_score, participation_ratio, random_plan, run_round,
)

COMM = CommParams()
COMPUTE = ComputeParams()


def make_task(n_clients, seed=0, hidden=8, samples=20):
    rng = np.random.default_rng(seed)
    spec = nn.NetSpec((2, hidden, 2), "tanh", "softmax")
    x, y = flcore.make_blobs(samples * n_clients, 2, 2, rng)
    vx, vy = flcore.make_blobs(10 * n_clients, 2, 2, rng)
    clients = flcore.partition(x, y, vx, vy,
                               flcore.PartitionSpec("iid", n_clients, seed=seed))
    return FlTask(netspec=spec, eta=0.05,
                  init_params=nn.init_params(spec, np.random.default_rng(seed + 1)),
                  clients={}, strategy_factory=flcore.FedAvg)


def convoy_state(positions, energy=1000, rounds=30, drift=0.0, seed=0,
                 epsilon=1.0, rho=5.0, aggregation=flcore.FedAvg):
    """Simple state: vehicles cruise east at fixed speed from given x offsets."""
    n = len(positions)
    snapshots = []
    for k in range(rounds):
        snap = [VehicleKinematics(i + 1, x0 + k * drift * (i + 1), 100.0, 5.0, 0.0)
                for i, x0 in enumerate(positions)]
        snapshots.append(snap)
    trace = MobilityTrace(10.0, snapshots)
    task = make_task(n, seed=seed)
    task.strategy_factory = aggregation
    task.clients = {i + 1: c for i, c in enumerate(
        flcore.partition(*_pool(n, seed), flcore.PartitionSpec("iid", n, seed=seed)))}
    return SimState(trace=trace, roi=RoiSpec(0, 1e7, 0, 200), comm=COMM,
                    compute=COMPUTE,
                    initial_energy={i + 1: energy for i in range(n)},
                    epsilon=epsilon, rho=rho, task=task)


def _pool(n, seed):
    rng = np.random.default_rng(seed)
    x, y = flcore.make_blobs(20 * n, 2, 2, rng)
    vx, vy = flcore.make_blobs(10 * n, 2, 2, rng)
    return x, y, vx, vy


class TestEnergyRatio:
    def test_share(self):
        assert energy_ratio({1: 100, 2: 300, 3: 600}, 3) == Fraction(6, 10)

    def test_symmetry(self):
        residuals = {v: 250 for v in range(4)}
        for v in range(4):
            assert energy_ratio(residuals, v) == Fraction(1, 4)

    def test_single_candidate(self):
        assert energy_ratio({7: 123}, 7) == 1

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError):
            energy_ratio({1: 0, 2: 0}, 1)


class TestParticipationRatio:
    def test_peak(self):
        assert participation_ratio(5, 5.0) == 1.0

    def test_two_below(self):
        assert participation_ratio(3, 5.0) == pytest.approx(math.exp(-2))

    def test_symmetry(self):
        assert participation_ratio(7, 5.0) == participation_ratio(3, 5.0)

    def test_unimodal_peak_at_rho(self):
        values = [participation_ratio(h, 5.0) for h in range(13)]
        peak = values.index(max(values))
        assert peak == 5
        assert all(values[i] < values[i + 1] for i in range(peak))
        assert all(values[i] > values[i + 1] for i in range(peak, 12))


class TestLeaderScore:
    def _tracker(self, counts):
        t = ParticipationTracker(rho=5.0)
        t.counts.update(counts)
        return t

    def test_epsilon_zero_is_energy_ratio(self):
        tracker = self._tracker({1: 3, 2: 9})
        residuals = {1: 100, 2: 300}
        assert leader_score(1, residuals, tracker, 0.0) == pytest.approx(0.25)

    def test_linear_combination(self):
        tracker = self._tracker({1: 5})
        residuals = {1: 600, 2: 400}
        assert leader_score(1, residuals, tracker, 1.0) == pytest.approx(1.6)

    def test_large_epsilon_dominates(self):
        # with epsilon 10 a peak participation score beats any energy gap
        tracker = self._tracker({1: 5, 2: 0})
        residuals = {1: 1, 2: 999}
        s1 = leader_score(1, residuals, tracker, 10.0)
        s2 = leader_score(2, residuals, tracker, 10.0)
        assert s1 > s2


class TestArgmaxLeader:
    def test_epsilon_zero_max_residual(self):
        tracker = ParticipationTracker(rho=5.0)
        residuals = {1: 10, 2: 999, 3: 500}
        assert argmax_leader([1, 2, 3], residuals, tracker, 0.0) == 2

    def test_tie_breaks_to_smallest_id(self):
        tracker = ParticipationTracker(rho=5.0)
        residuals = {4: 500, 2: 500, 9: 100}
        assert argmax_leader([4, 2, 9], residuals, tracker, 0.0) == 2

    def test_needs_two_members(self):
        with pytest.raises(InfeasibleRoundError):
            argmax_leader([1], {1: 10}, ParticipationTracker(), 1.0)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(10)
        for trial in range(300):
            n = int(rng.integers(2, 21))
            members = sorted(rng.choice(1000, size=n, replace=False).tolist())
            residuals = {v: int(rng.integers(1, 2000)) for v in members}
            tracker = ParticipationTracker(rho=5.0)
            tracker.counts.update({v: int(rng.integers(0, 15)) for v in members})
            eps = [0.0, 0.01, 0.1, 1.0, 10.0][trial % 5]
            scores = {v: leader_score(v, residuals, tracker, eps) for v in members}
            best = max(scores.values())
            brute = min(v for v in members if scores[v] == best)
            assert argmax_leader(members, residuals, tracker, eps) == brute

    def test_invariant_under_rescaling(self):
        rng = np.random.default_rng(11)
        members = [1, 2, 3, 4, 5]
        residuals = {v: int(rng.integers(1, 500)) for v in members}
        tracker = ParticipationTracker(rho=5.0)
        tracker.counts.update({v: int(rng.integers(0, 9)) for v in members})
        for eps in (0.0, 0.5, 2.0):
            base = argmax_leader(members, residuals, tracker, eps)
            scaled = {v: 17 * r for v, r in residuals.items()}
            assert argmax_leader(members, scaled, tracker, eps) == base


class TestCheckConstraints:
    def _plan(self, iterations, leader=1, k=1):
        return RoundPlan(k, leader, iterations)

    def _charges(self, e_sum, t_sum, e_cmp=0, e_com=0):
        return ChargeRow(Fraction(e_cmp), Fraction(e_com), Fraction(e_sum),
                         Fraction(t_sum))

    def test_feasible_at_budget_boundary(self):
        # direct follower at l = 7 exactly fills the time budget
        plan = self._plan({1: 7, 2: 7})
        realized = {1: self._charges(41, 10), 2: self._charges(41, 10)}
        predicted = {1: Fraction(41), 2: Fraction(41)}
        residuals = {1: Fraction(1000), 2: Fraction(1000)}
        verdict = check_constraints(plan, [1, 2], residuals, predicted, realized,
                                    {1: 1.0, 2: 0.5}, COMPUTE.t_round)
        assert verdict == frozenset()

    def test_time_violation(self):
        plan = self._plan({1: 8, 2: 8})
        realized = {1: self._charges(46, 11), 2: self._charges(46, 11)}
        predicted = {1: Fraction(46), 2: Fraction(46)}
        residuals = {1: Fraction(1000), 2: Fraction(1000)}
        verdict = check_constraints(plan, [1, 2], residuals, predicted, realized,
                                    {1: 1.0, 2: 0.5}, COMPUTE.t_round)
        assert verdict == frozenset({"d"})

    def test_energy_violation(self):
        plan = self._plan({1: 3, 2: 3})
        realized = {1: self._charges(21, 6), 2: self._charges(21, 6)}
        predicted = {1: Fraction(21), 2: Fraction(21)}
        residuals = {1: Fraction(20), 2: Fraction(1000)}
        verdict = check_constraints(plan, [1, 2], residuals, predicted, realized,
                                    {1: 1.0, 2: 0.5}, COMPUTE.t_round)
        assert verdict == frozenset({"b", "c"})

    def test_leader_rule_and_membership(self):
        plan = self._plan({1: 1}, leader=1)
        realized = {1: self._charges(11, 4)}
        predicted = {1: Fraction(11)}
        residuals = {1: Fraction(1000)}
        verdict = check_constraints(plan, [1], residuals, predicted, realized,
                                    {1: 0.2}, COMPUTE.t_round)
        assert verdict == frozenset({"f"})
        plan2 = self._plan({1: 1, 2: 1}, leader=1)
        realized2 = {1: self._charges(11, 4), 2: self._charges(11, 4)}
        predicted2 = {1: Fraction(11), 2: Fraction(11)}
        residuals2 = {1: Fraction(10**3), 2: Fraction(10**3)}
        verdict2 = check_constraints(plan2, [1, 2], residuals2, predicted2,
                                     realized2, {1: 0.2, 2: 0.9}, COMPUTE.t_round)
        assert verdict2 == frozenset({"e"})


class TestRunRound:
    def test_identical_vehicles_identical_models(self):
        state = convoy_state([0.0, 0.0])
        plan = RoundPlan(1, 1, {1: 1, 2: 1})
        outcome = run_round(state, plan, enforce_leader_rule=False)
        assert outcome.committed
        assert np.array_equal(state.models[1], state.models[2])

    def test_three_comm_phases_charged(self):
        state = convoy_state([0.0, 50.0])
        plan = RoundPlan(1, 1, {1: 2, 2: 3})
        outcome = run_round(state, plan, enforce_leader_rule=False)
        assert outcome.committed
        row_leader = outcome.charges[1]
        row_follower = outcome.charges[2]
        assert row_leader.e_sum == row_leader.e_cmp + 3 * row_leader.e_com
        assert row_follower.e_sum == 15 + 3 * 2
        assert state.ledger.residual(2) == 1000 - 21

    def test_aggregation_is_weighted_mean(self):
        state = convoy_state([0.0, 10.0])
        start = state.models[1].copy()
        plan = RoundPlan(1, 1, {1: 1, 2: 1})
        trained = {v: flcore.local_train(start, state.task.clients[v], 1, 0.05,
                                         state.task.netspec) for v in (1, 2)}
        weights = flcore.sample_weights(state.task.clients, [1, 2])
        expected = weights[1] * trained[1] + weights[2] * trained[2]
        run_round(state, plan, enforce_leader_rule=False)
        assert np.allclose(state.models[1], expected, atol=1e-12)

    def test_infeasible_round_rolls_back(self):
        state = convoy_state([0.0, 10.0], energy=30)
        plan = RoundPlan(1, 1, {1: 7, 2: 7})  # 41 energy > 30 residual
        before = state.models[1].copy()
        outcome = run_round(state, plan, enforce_leader_rule=False)
        assert not outcome.committed
        assert {"b", "c"} <= set(outcome.violations)
        assert state.ledger.per_round == []
        assert np.array_equal(state.models[1], before)
        assert state.tracker.counts == {}

    def test_leader_rule_enforced(self):
        state = convoy_state([0.0, 10.0])
        # equal residuals but vehicle 1 sits at the participation peak, so
        # its score is strictly larger and picking vehicle 2 breaks the rule
        state.tracker.counts.update({1: 5})
        plan = RoundPlan(1, 2, {1: 1, 2: 1})
        outcome = run_round(state, plan)
        assert "e" in outcome.violations

    def test_leader_rule_allows_ties(self):
        state = convoy_state([0.0, 10.0])
        for leader in (1, 2):
            state.reset()
            outcome = run_round(state, RoundPlan(1, leader, {1: 1, 2: 1}))
            assert outcome.committed

    def test_malformed_plan_rejected(self):
        state = convoy_state([0.0, 10.0])
        with pytest.raises(ValueError):
            run_round(state, RoundPlan(1, 9, {1: 1, 2: 1}))
        with pytest.raises(ValueError):
            run_round(state, RoundPlan(1, 1, {1: 1}))

    def test_participation_counts_all_members(self):
        state = convoy_state([0.0, 10.0, 20.0])
        plan = RoundPlan(1, 1, {1: 1, 2: 1, 3: 1})
        run_round(state, plan, enforce_leader_rule=False)
        assert state.tracker.counts == {1: 1, 2: 1, 3: 1}


class TestRandomPlan:
    def test_reproducible(self):
        a = random_plan(1, [1, 2, 3], COMM, COMPUTE, np.random.default_rng(5))
        b = random_plan(1, [1, 2, 3], COMM, COMPUTE, np.random.default_rng(5))
        assert a == b

    def test_iteration_bounds(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            plan = random_plan(1, [1, 2, 3, 4], COMM, COMPUTE, rng)
            assert all(1 <= l <= 7 for l in plan.iterations.values())

    def test_leader_uniformity(self):
        rng = np.random.default_rng(7)
        members = [1, 2, 3, 4]
        counts = {v: 0 for v in members}
        n = 10_000
        for _ in range(n):
            counts[random_plan(1, members, COMM, COMPUTE, rng).leader_id] += 1
        expect = n / 4
        sigma = math.sqrt(n * 0.25 * 0.75)
        for v in members:
            assert abs(counts[v] - expect) < 3 * sigma


class TestDfl:
    def test_fixed_iterations(self):
        assert dfl_iterations(COMM, COMPUTE) == 8

    def test_two_vehicles_direct_cost(self):
        state = convoy_state([0.0, 50.0])
        outcome = dfl_round(state, 1)
        assert outcome.committed
        for v in (1, 2):
            row = outcome.charges[v]
            assert row.e_com == 2  # one direct peer, one direction
            assert row.e_sum == 40 + 4  # send + receive phases
            assert row.t_sum == 8 + 2

    def test_comm_grows_linearly_with_peers(self):
        costs = []
        for n in (2, 3, 4, 5):
            state = convoy_state([10.0 * i for i in range(n)])
            outcome = dfl_round(state, 1)
            costs.append(outcome.charges[1].e_com)
        assert costs == [2 * (n - 1) for n in (2, 3, 4, 5)]

    def test_identical_models_mean_noop(self):
        state = convoy_state([0.0, 10.0])
        model = state.models[1].copy()
        trained = flcore.local_train(model, state.task.clients[1], 8, 0.05,
                                     state.task.netspec)
        state2 = convoy_state([0.0, 10.0])
        state2.task.clients[2] = state2.task.clients[1]
        dfl_round(state2, 1)
        assert np.allclose(state2.models[1], trained, atol=1e-12)
        assert np.array_equal(state2.models[1], state2.models[2])

    def test_far_vehicle_dropped_not_whole_round(self):
        state = convoy_state([0.0, 50.0, 5000.0])
        outcome = dfl_round(state, 1)
        assert outcome is not None
        assert outcome.members == [1, 2]

    def test_skips_when_everyone_unaffordable(self):
        state = convoy_state([0.0, 50.0], energy=40)  # 44 needed
        assert dfl_round(state, 1) is None

    def test_dfl_costs_at_least_mdfl_for_direct_cliques(self):
        # hub-and-spoke spends fewer transmissions than all-to-all exchange
        rng = np.random.default_rng(8)
        for n in (3, 4, 5, 6):
            positions = sorted(rng.uniform(0, 120, n).tolist())
            mdfl_state = convoy_state(positions)
            plan = RoundPlan(1, 1, {v: 7 for v in range(1, n + 1)})
            mdfl = run_round(mdfl_state, plan, enforce_leader_rule=False)
            dfl_state = convoy_state(positions)
            dfl = dfl_round(dfl_state, 1)
            # compare communication-only energy at equal compute per vehicle
            mdfl_com = sum(3 * row.e_com for row in mdfl.charges.values())
            dfl_com = sum(2 * row.e_com for row in dfl.charges.values())
            assert dfl_com >= mdfl_com


class TestLedgerReplay:
    def test_committed_rounds_replay_exactly(self):
        state = convoy_state([0.0, 30.0, 60.0], energy=400, rounds=40)
        rng = np.random.default_rng(9)
        committed = []
        for k in range(1, 30):
            members = state.members(k)
            if len(members) < 2:
                break
            plan = random_plan(k, members, COMM, COMPUTE, rng)
            outcome = run_round(state, plan, enforce_leader_rule=False)
            if not outcome.committed:
                break
            committed.append(outcome)
        assert committed, "expected at least one committed round"
        rows = {(r.round_k, r.vehicle_id): r for r in state.ledger.per_round}
        for outcome in committed:
            for v, charge in outcome.charges.items():
                row = rows[(outcome.plan.round_k, v)]
                assert row.e_cmp == charge.e_cmp
                assert row.e_sum == charge.e_sum
                assert charge.e_sum == charge.e_cmp + 3 * charge.e_com
                assert charge.t_sum <= COMPUTE.t_round
