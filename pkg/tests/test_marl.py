import numpy as np
import pytest

from mdflsim import nn
from mdflsim.comms import CommParams, ComputeParams
from mdflsim.marl import (
    DecPomdpSpec, MdflEnv, NetHead, build_bundle, collect,
    discounted_returns, gae, greedy_actions, load_bundle, local_iteration_actions,
    normalize_advantages, ppo_policy_update, ppo_update, ppo_value_update,
    save_bundle, segmented_returns, train,
)
from test_protocol import convoy_state

COMM = CommParams()
COMPUTE = ComputeParams()


def small_env(positions=(0.0, 30.0, 60.0, 2500.0), energy=200, **kwargs):
    state = convoy_state(list(positions), energy=energy, **kwargs)
    return MdflEnv(state)


class TestActionSpaces:
    def test_reference_constants_give_seven(self):
        assert local_iteration_actions(COMM, COMPUTE) == list(range(1, 8))

    def test_singleton_action_set(self):
        compute = ComputeParams(e_itr=5, t_itr=1, t_round=4)
        assert local_iteration_actions(COMM, compute) == [1]

    def test_leader_mask_counts_absent(self):
        env = small_env()
        ob = env.observe()
        # round 1 of the convoy trace has all four vehicles present
        assert ob.active.sum() == 4
        env.state._initial_energy[4] = 1  # below the minimum round cost
        env.reset()
        ob = env.observe()
        assert ob.active.tolist() == [True, True, True, False]


class TestObservations:
    def test_first_round_l_slots_zero(self):
        env = small_env()
        ob = env.observe()
        n = env.n_slots
        for i in range(n):
            assert np.array_equal(ob.local[i, 1:2 * n:2], np.zeros(n))

    def test_self_distance_zero(self):
        env = small_env()
        ob = env.observe()
        for i in range(env.n_slots):
            assert ob.local[i, 2 * i] == 0.0

    def test_absent_vehicle_masked_and_zero(self):
        env = small_env()
        env.state._initial_energy[2] = 1
        env.reset()
        ob = env.observe()
        n = env.n_slots
        j = 1  # slot of vehicle 2
        assert not ob.active[j]
        assert np.array_equal(ob.local[j], np.zeros(3 * n))  # disabled agent
        for i in range(n):
            if ob.active[i]:
                assert ob.local[i, 2 * j] == 0.0  # padded slot
                assert ob.local[i, 2 * n + j] == 0.0

    def test_distances_match_mobility(self):
        env = small_env()
        ob = env.observe()
        kin = env.state.kinematics(1)
        from mdflsim.mobility import distance

        assert ob.local[0, 2] == distance(kin[1], kin[2])

    def test_leader_obs_residuals(self):
        env = small_env(energy=321)
        ob = env.observe()
        n = env.n_slots
        assert np.allclose(ob.leader[1:2 * n:2], np.full(n, 321.0))

    def test_global_state_layout_and_determinism(self):
        env = small_env()
        ob1 = env.observe()
        ob2 = env.observe()
        assert np.array_equal(ob1.global_state, ob2.global_state)
        n = env.n_slots
        assert len(ob1.global_state) == n * 3 * n + 3 * n + n + 1
        assert ob1.global_state[-1] == 1.0  # round counter


class TestRewards:
    def test_local_reward_is_iteration_count(self):
        env = small_env()
        res = env.step(np.array([3, 5, 2, 1]), leader_slot=0)
        assert res.local_rewards.tolist() == [3.0, 5.0, 2.0, 1.0]

    def test_leader_reward_score(self):
        env = small_env()
        ob = env.observe()
        scores = env.state.leader_scores(ob.members)
        res = env.step(np.ones(4, dtype=int), leader_slot=1)
        assert res.leader_reward == pytest.approx(scores[2])

    def test_leader_reward_is_max_energy_share_without_bonus(self):
        env = small_env()
        env.state.epsilon = 0.0
        env.step(np.ones(4, dtype=int), leader_slot=0)  # leader 1 spends extra
        ob = env.observe()
        residuals = env.state.ledger.residuals(ob.members)
        best = max(sorted(residuals), key=lambda v: residuals[v])
        res = env.step(np.ones(4, dtype=int), leader_slot=env.slots.index(best))
        assert res.committed
        expected = residuals[best] / sum(residuals.values())
        assert res.leader_reward == pytest.approx(float(expected))

    def test_inactive_agent_zero_reward(self):
        env = small_env()
        env.state._initial_energy[3] = 1
        env.reset()
        res = env.step(np.array([2, 2, 7, 2]), leader_slot=0)
        assert res.local_rewards[2] == 0.0


class TestEnvStep:
    def test_feasible_step_commits_and_advances(self):
        env = small_env()
        res = env.step(np.ones(4, dtype=int), leader_slot=0)
        assert res.committed and not res.done
        assert env.state.k == 2

    def test_violation_resets(self):
        env = small_env()
        res = env.step(np.full(4, 7), leader_slot=3)  # distant leader: time blows up
        assert not res.committed and res.done
        assert "d" in res.violations
        assert env.state.k == 1
        assert env.state.ledger.per_round == []

    def test_trace_end_resets(self):
        env = small_env(rounds=2)

        def best_slot():
            ob = env.observe()
            scores = env.state.leader_scores(ob.members)
            leader = max(sorted(scores), key=lambda v: scores[v])
            return env.slots.index(leader)

        env.step(np.ones(4, dtype=int), leader_slot=best_slot())
        res = env.step(np.ones(4, dtype=int), leader_slot=best_slot())
        assert res.committed and res.done
        assert env.state.k == 1


class TestGae:
    def test_single_step_example(self):
        adv = gae([1.0], [0.5], bootstrap_value=0.0, gamma=0.99, lam=0.95,
                  dones=[False])
        assert adv[0] == pytest.approx(0.5)

    def test_lambda_zero_is_td_error(self):
        rng = np.random.default_rng(0)
        r = rng.normal(size=10)
        v = rng.normal(size=10)
        boot = float(rng.normal())
        adv = gae(r, v, boot, 0.9, 0.0, np.zeros(10, bool))
        next_v = np.append(v[1:], boot)
        delta = r + 0.9 * next_v - v
        assert np.allclose(adv, delta, atol=1e-12)

    def test_lambda_one_telescopes_to_returns(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            T = int(rng.integers(1, 20))
            r = rng.normal(size=T)
            v = rng.normal(size=T)
            boot = float(rng.normal())
            gamma = float(rng.uniform(0.5, 1.0))
            adv = gae(r, v, boot, gamma, 1.0, np.zeros(T, bool))
            ret = discounted_returns(r, gamma)
            tail = gamma ** (T - np.arange(T)) * boot
            assert np.allclose(adv + v, ret + tail, atol=1e-10)

    def test_done_truncates_bootstrap(self):
        adv = gae([1.0, 1.0], [0.0, 0.0], bootstrap_value=100.0, gamma=0.99,
                  lam=0.95, dones=[True, True])
        assert np.allclose(adv, [1.0, 1.0])


class TestReturns:
    def test_gamma_zero(self):
        r = np.array([3.0, 1.0, 2.0])
        assert np.array_equal(discounted_returns(r, 0.0), r)

    def test_geometric_example(self):
        out = discounted_returns([1.0, 1.0, 1.0], 0.5)
        assert np.allclose(out, [1.75, 1.5, 1.0])

    def test_zero_rewards(self):
        assert np.array_equal(discounted_returns(np.zeros(5), 0.9), np.zeros(5))

    def test_segmented_restarts_at_done(self):
        r = np.ones(4)
        out = segmented_returns(r, [False, True, False, False], 0.5)
        assert np.allclose(out, [1.5, 1.0, 1.5, 1.0])


def bandit_batch(head, value, rng, steps=16):
    """One-armed-bandit style rollout: single observation, two actions with
    rewards 1.0 and 0.2 for arm 0 and arm 1."""
    obs = np.ones((steps, 1))
    actions = np.zeros(steps, dtype=int)
    logps = np.zeros(steps)
    rewards = np.zeros(steps)
    for t in range(steps):
        logits, _ = nn.forward(head.spec, head.params, obs[t])
        probs = nn.masked_softmax(logits, None)
        a, lp = nn.sample_categorical(probs, None, rng)
        actions[t] = a
        logps[t] = lp
        rewards[t] = 1.0 if a == 0 else 0.2
    vout, _ = nn.forward(value.spec, value.params, obs)
    values = vout[:, 0]
    dones = np.ones(steps, bool)  # one-step episodes
    adv = gae(rewards, values, 0.0, 0.99, 0.95, dones)
    ret = segmented_returns(rewards, dones, 0.99)
    return obs, actions, logps, adv, ret, values


def make_bandit_heads(seed):
    rng = np.random.default_rng(seed)
    policy = NetHead(nn.NetSpec((1, 16, 2), "tanh", "linear"),
                     nn.init_params(nn.NetSpec((1, 16, 2)), rng),
                     nn.AdamState.for_params(nn.NetSpec((1, 16, 2)).param_count(),
                                             0.01),
                     np.ones(1))
    vspec = nn.NetSpec((1, 16, 1), "tanh", "linear")
    value = NetHead(vspec, nn.init_params(vspec, rng),
                    nn.AdamState.for_params(vspec.param_count(), 0.01), np.ones(1))
    return policy, value


class TestPpoMechanics:
    def test_ratio_is_one_at_collection(self):
        env = small_env()
        spec = DecPomdpSpec(n_slots=env.n_slots, steps=8, batch=1)
        rng = np.random.default_rng(3)
        bundle = build_bundle(env, spec, rng)
        buf = collect(env, bundle, spec, rng)
        mask = buf["local_active"]
        logits, _ = nn.forward(bundle.local_policy.spec, bundle.local_policy.params,
                               buf["local_in"][mask])
        probs = nn.masked_softmax(logits, None)
        idx = np.arange(mask.sum())
        recomputed = np.log(probs[idx, buf["local_actions"][mask]])
        assert np.allclose(recomputed, buf["local_logp"][mask], atol=1e-9)

    def test_clip_arithmetic(self):
        # ratio 1.5 with positive advantage: the clipped branch at 1.2 wins
        ratio = 1.5
        adv = 2.0
        clipped = np.clip(ratio, 0.8, 1.2) * adv
        assert clipped == pytest.approx(2.4)
        assert min(ratio * adv, clipped) == pytest.approx(2.4)

    def test_value_loss_zero_when_exact(self):
        policy, value = make_bandit_heads(0)
        X = np.ones((8, 1))
        out, _ = nn.forward(value.spec, value.params, X)
        v = out[:, 0]
        loss = ppo_value_update(value, X, v.copy(), v.copy(), clip=0.2)
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_identity_update_keeps_clipped_equal(self):
        policy, value = make_bandit_heads(1)
        rng = np.random.default_rng(2)
        obs, actions, logps, adv, ret, values = bandit_batch(policy, value, rng)
        # new policy == old policy right after collection: ratio exactly 1
        logits, _ = nn.forward(policy.spec, policy.params, obs)
        probs = nn.masked_softmax(logits, None)
        ratio = np.exp(np.log(probs[np.arange(len(actions)), actions]) - logps)
        assert np.allclose(ratio, 1.0, atol=1e-12)

    def test_entropy_bounded_by_log_action_count(self):
        env = small_env()
        spec = DecPomdpSpec(n_slots=env.n_slots, steps=6, batch=1)
        rng = np.random.default_rng(4)
        bundle = build_bundle(env, spec, rng)
        buf = collect(env, bundle, spec, rng)
        diag = ppo_update(bundle, buf, spec)
        assert 0.0 <= diag["entropy"] <= np.log(max(env.l_max, env.n_slots)) + 1e-9

    def test_masked_steps_contribute_zero_gradient(self):
        env = small_env()
        env.state._initial_energy[4] = 1  # slot 3 stays inactive
        env.reset()
        spec = DecPomdpSpec(n_slots=env.n_slots, steps=6, batch=1)
        rng = np.random.default_rng(5)
        bundle = build_bundle(env, spec, rng)
        buf = collect(env, bundle, spec, rng)
        assert not buf["local_active"][:, :, 3].any()
        # poison the masked slot's stored data; the update must not change
        poisoned = {k: (v.copy() if isinstance(v, np.ndarray) else v)
                    for k, v in buf.items()}
        poisoned["local_rewards"][:, :, 3] = 1e6
        poisoned["local_logp"][:, :, 3] = -42.0
        poisoned["local_adv"][:, :, 3] = 1e6

        import copy

        b1 = copy.deepcopy(bundle)
        b2 = copy.deepcopy(bundle)
        ppo_update(b1, buf, spec)
        ppo_update(b2, poisoned, spec)
        assert np.array_equal(b1.local_policy.params, b2.local_policy.params)
        assert np.array_equal(b1.local_value.params, b2.local_value.params)

    def test_advantage_normalization(self):
        adv = np.array([1.0, 2.0, 3.0, 4.0])
        out = normalize_advantages(adv)
        assert out.mean() == pytest.approx(0.0, abs=1e-12)
        assert out.std() == pytest.approx(1.0, rel=1e-6)


class TestBandit:
    def test_learns_the_better_arm(self):
        for seed in (0, 1, 2):
            policy, value = make_bandit_heads(seed)
            rng = np.random.default_rng(seed + 100)
            solved = False
            for update in range(500):
                obs, actions, logps, adv, ret, values = bandit_batch(policy, value,
                                                                     rng)
                ppo_policy_update(policy, obs, None, actions, logps,
                                  normalize_advantages(adv), clip=0.2,
                                  entropy_coeff=0.01)
                ppo_value_update(value, obs, values, ret, clip=0.2)
                logits, _ = nn.forward(policy.spec, policy.params, np.ones(1))
                probs = nn.masked_softmax(logits, None)
                if probs[0] >= 0.95:
                    solved = True
                    break
            assert solved, f"seed {seed} did not converge"


class TestTraining:
    def _spec(self, env, episodes=4):
        return DecPomdpSpec(n_slots=env.n_slots, steps=6, batch=2,
                            episodes=episodes, learning_rate=0.003)

    def test_deterministic_curve(self):
        env1 = small_env()
        env2 = small_env()
        b1, c1 = train(env1, self._spec(env1), seed=9)
        b2, c2 = train(env2, self._spec(env2), seed=9)
        assert [r.accumulated_reward for r in c1] == [r.accumulated_reward for r in c2]
        assert np.array_equal(b1.local_policy.params, b2.local_policy.params)

    def test_checkpoint_roundtrip(self, tmp_path):
        env = small_env()
        bundle, _ = train(env, self._spec(env, episodes=2), seed=10)
        path = tmp_path / "policy.bin"
        save_bundle(path, bundle)
        loaded = load_bundle(path)
        assert loaded.slots == bundle.slots
        assert loaded.l_max == bundle.l_max
        for name in ("local_policy", "leader_policy", "local_value", "leader_value"):
            assert np.array_equal(getattr(loaded, name).params,
                                  getattr(bundle, name).params)
            assert np.array_equal(getattr(loaded, name).input_scale,
                                  getattr(bundle, name).input_scale)

    def test_greedy_actions_deterministic(self):
        env = small_env()
        bundle, _ = train(env, self._spec(env, episodes=2), seed=11)
        env.reset()
        ob = env.observe()
        a1 = greedy_actions(bundle, ob)
        a2 = greedy_actions(bundle, ob)
        assert np.array_equal(a1[0], a2[0]) and a1[1] == a2[1]
