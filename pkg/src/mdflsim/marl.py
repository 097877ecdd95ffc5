"""Multi-agent PPO over the round protocol.

Two agent kinds act each communication round: one iteration selector per
vehicle slot (shared policy network, slot id appended to the observation)
and a single leader selector. Training is centralized (value networks see
the global state), execution is decentralized (policies see local
observations only).
"""

from __future__ import annotations

from dataclasses import dataclass
import json
import struct
import numpy as np

from . import comms, mobility, nn
from .protocol import RoundPlan, SimState, run_round

BUNDLE_MAGIC = b"MDPB"


@dataclass(frozen=True)
class DecPomdpSpec:
    """Agent layout and PPO hyperparameters."""

    n_slots: int
    gamma: float = 0.99
    lam: float = 0.95  # advantage-estimation decay
    clip: float = 0.2
    entropy_coeff: float = 0.01
    steps: int = 100  # environment steps per trajectory
    batch: int = 1  # trajectories per update
    episodes: int = 300
    learning_rate: float = 5e-4
    hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if self.n_slots < 1:
            raise ValueError("need at least one vehicle slot")
        if not (0 < self.gamma <= 1):
            raise ValueError("discount must lie in (0, 1]")
        if not (0 <= self.lam <= 1):
            raise ValueError("advantage decay must lie in [0, 1]")
        if self.clip <= 0:
            raise ValueError("clip range must be positive")
        if self.steps < 1 or self.batch < 1:
            raise ValueError("steps and batch must be >= 1")


def local_iteration_actions(comm: comms.CommParams,
                            compute: comms.ComputeParams) -> list[int]:
    """Choices available to an iteration selector: 1 .. largest count that
    fits the round budget with three direct communication phases."""
    l_max = comms.max_direct_iterations(comm, compute, phases=3)
    if l_max < 1:
        raise ValueError("round budget admits no feasible iteration count")
    return list(range(1, l_max + 1))


@dataclass
class StepObservation:
    local: np.ndarray  # (N, 3N): (distance, previous iterations) pairs + mask
    leader: np.ndarray  # (3N,): (predicted comm energy, residual) pairs + mask
    global_state: np.ndarray
    active: np.ndarray  # (N,) bool, vehicle present and energy-eligible
    members: list[int]
    round_k: int


def _reference_leader(state: SimState, members: list[int]) -> int:
    """Vehicle whose links anchor the predicted energies shown to the leader
    selector: the previous leader while present, else the richest member."""
    if state.prev_leader is not None and state.prev_leader in members:
        return state.prev_leader
    return max(members, key=lambda v: (state.ledger.residual(v), -v))


def build_observations(state: SimState, slots: list[int]) -> StepObservation:
    """Assemble per-agent observations and the global state for round k.

    Absent vehicles contribute zero-padded slots with a zero mask bit. The
    global state concatenates every agent's observation, the participation
    counts and the round counter.
    """
    k = state.k
    n = len(slots)
    members = state.members(k)
    member_set = set(members)
    kin = state.kinematics(k)
    active = np.array([s in member_set for s in slots], dtype=bool)

    local = np.zeros((n, 3 * n))
    for i, vi in enumerate(slots):
        if not active[i]:
            continue
        for j, vj in enumerate(slots):
            if active[j]:
                local[i, 2 * j] = mobility.distance(kin[vi], kin[vj])
                local[i, 2 * j + 1] = float(state.prev_l[vj])
                local[i, 2 * n + j] = 1.0

    leader = np.zeros(3 * n)
    if members:
        ref = _reference_leader(state, members)
        p_pred = state.predicted_probabilities(k, ref, members)
        e_pred = comms.predicted_comm_energies(ref, p_pred, state.comm)
        for j, vj in enumerate(slots):
            if vj in member_set:
                leader[2 * j] = float(e_pred[vj])
                leader[2 * j + 1] = float(state.ledger.residual(vj))
                leader[2 * n + j] = 1.0

    h = np.array([float(state.tracker.count(s)) for s in slots])
    global_state = np.concatenate([local.ravel(), leader, h, [float(k)]])
    return StepObservation(local=local, leader=leader, global_state=global_state,
                           active=active, members=members, round_k=k)


@dataclass
class StepResult:
    local_rewards: np.ndarray  # (N,), zero for inactive agents
    leader_reward: float
    done: bool
    committed: bool
    violations: frozenset[str]


class MdflEnv:
    """One persistent simulation; a step is one communication round.

    A constraint violation (or trace exhaustion) ends the current segment:
    the step reports done and the simulation restarts with fresh energies
    and models while the caller's time step keeps counting.
    """

    def __init__(self, state: SimState):
        self.state = state
        self.slots = state.vehicle_ids()
        self.n_slots = len(self.slots)
        self.actions = local_iteration_actions(state.comm, state.compute)

    @property
    def l_max(self) -> int:
        return self.actions[-1]

    def observe(self) -> StepObservation:
        return build_observations(self.state, self.slots)

    def reset(self) -> None:
        self.state.reset()

    def step(self, local_actions: np.ndarray, leader_slot: int | None,
             ob: StepObservation | None = None) -> StepResult:
        ob = ob if ob is not None else self.observe()
        n = self.n_slots
        rewards = np.zeros(n)
        if not ob.members:
            self.reset()
            return StepResult(rewards, 0.0, True, False, frozenset({"f"}))

        if leader_slot is None or not ob.active[leader_slot]:
            leader_id = ob.members[0]
        else:
            leader_id = self.slots[leader_slot]
        iterations = {}
        for i, vid in enumerate(self.slots):
            if ob.active[i]:
                iterations[vid] = int(local_actions[i])
        plan = RoundPlan(ob.round_k, leader_id, iterations)

        # rewards are paid only for rounds that actually execute: an
        # infeasible plan performs zero local iterations, earns nothing and
        # truncates the segment (otherwise burning energy and resetting
        # would out-earn every sustainable policy)
        scores = self.state.leader_scores(ob.members)
        outcome = run_round(self.state, plan)
        leader_reward = 0.0
        if outcome.committed:
            leader_reward = scores[leader_id]
            for i, vid in enumerate(self.slots):
                if ob.active[i]:
                    rewards[i] = float(iterations[vid])
            self.state.k += 1
            if self.state.k > self.state.trace.num_rounds:
                self.reset()
                return StepResult(rewards, leader_reward, True, True, frozenset())
            return StepResult(rewards, leader_reward, False, True, frozenset())
        self.reset()
        return StepResult(rewards, leader_reward, True, False, outcome.violations)


# -- advantage estimation ---------------------------------------------------

def gae(rewards, values, bootstrap_value, gamma, lam, dones) -> np.ndarray:
    """Generalized advantage estimates from one reward/value sequence.

    The one-step error is r_t + gamma * V(s_{t+1}) * (1 - done_t) - V(s_t);
    done flags cut both the bootstrap and the recursive accumulation.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if not (len(rewards) == len(values) == len(dones)):
        raise ValueError("sequence lengths disagree")
    adv = np.zeros(len(rewards))
    next_value = float(bootstrap_value)
    next_adv = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        nonterminal = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        next_adv = delta + gamma * lam * nonterminal * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv


def discounted_returns(rewards, gamma) -> np.ndarray:
    """Suffix sums of gamma-discounted rewards."""
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def segmented_returns(rewards, dones, gamma) -> np.ndarray:
    """Discounted returns restarted after every done flag."""
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.zeros(len(rewards))
    start = 0
    for t, d in enumerate(dones):
        if d:
            out[start:t + 1] = discounted_returns(rewards[start:t + 1], gamma)
            start = t + 1
    if start < len(rewards):
        out[start:] = discounted_returns(rewards[start:], gamma)
    return out


# -- networks ----------------------------------------------------------------

@dataclass
class NetHead:
    """A network with its optimizer state and fixed input normalization."""

    spec: nn.NetSpec
    params: np.ndarray
    adam: nn.AdamState
    input_scale: np.ndarray

    def scaled(self, raw: np.ndarray) -> np.ndarray:
        return np.asarray(raw, dtype=np.float64) / self.input_scale

    def forward(self, raw: np.ndarray):
        return nn.forward(self.spec, self.params, self.scaled(raw))


def make_head(in_dim: int, out_dim: int, hidden, scale: np.ndarray,
              learning_rate: float, rng: np.random.Generator) -> NetHead:
    spec = nn.NetSpec((in_dim, *hidden, out_dim), hidden_activation="tanh",
                      output_head="linear")
    params = nn.init_params(spec, rng)
    return NetHead(spec, params, nn.AdamState.for_params(spec.param_count(),
                                                         learning_rate), scale)


@dataclass
class PolicyBundle:
    """All trainable networks plus the slot layout they were built for."""

    slots: list[int]
    l_max: int
    local_policy: NetHead
    leader_policy: NetHead
    local_value: NetHead
    leader_value: NetHead

    @property
    def n_slots(self) -> int:
        return len(self.slots)


def _observation_scales(env: MdflEnv):
    """Fixed feature scales so raw meters/units enter the nets near unit size."""
    state = env.state
    n = env.n_slots
    d_scale = 2.0 * float(state.comm.r)
    l_scale = float(env.l_max)
    e_pred_scale = float(state.comm.e_cloud) * max(1, n - 1)
    e_res_scale = max(float(e) for e in state.ledger.initial.values())
    local = np.concatenate([np.tile([d_scale, l_scale], n), np.ones(n)])
    leader = np.concatenate([np.tile([e_pred_scale, e_res_scale], n), np.ones(n)])
    h_scale = np.full(n, max(1.0, 2.0 * state.rho))
    global_scale = np.concatenate([np.tile(local, n), leader, h_scale, [100.0]])
    return local, leader, global_scale


def build_bundle(env: MdflEnv, spec: DecPomdpSpec, rng: np.random.Generator) -> PolicyBundle:
    n = env.n_slots
    local_scale, leader_scale, global_scale = _observation_scales(env)
    onehot = np.ones(n)
    local_policy = make_head(3 * n + n, env.l_max, spec.hidden,
                             np.concatenate([local_scale, onehot]),
                             spec.learning_rate, rng)
    leader_policy = make_head(3 * n, n, spec.hidden, leader_scale,
                              spec.learning_rate, rng)
    local_value = make_head(len(global_scale) + n, 1, spec.hidden,
                            np.concatenate([global_scale, onehot]),
                            spec.learning_rate, rng)
    leader_value = make_head(len(global_scale), 1, spec.hidden, global_scale,
                             spec.learning_rate, rng)
    return PolicyBundle(env.slots, env.l_max, local_policy, leader_policy,
                        local_value, leader_value)


def _onehot(i: int, n: int) -> np.ndarray:
    v = np.zeros(n)
    v[i] = 1.0
    return v


def local_policy_input(bundle: PolicyBundle, local_obs_row: np.ndarray,
                       slot: int) -> np.ndarray:
    return np.concatenate([local_obs_row, _onehot(slot, bundle.n_slots)])


def act_local(bundle: PolicyBundle, local_obs_row: np.ndarray, slot: int,
              rng: np.random.Generator):
    """Sample an iteration count for one slot; returns (l, log_prob, input)."""
    x = local_policy_input(bundle, local_obs_row, slot)
    logits, _ = bundle.local_policy.forward(x)
    probs = nn.masked_softmax(logits, None)
    idx, logp = nn.sample_categorical(probs, None, rng)
    return idx + 1, logp, x

def act_leader(bundle: PolicyBundle, leader_obs: np.ndarray, active: np.ndarray,
               rng: np.random.Generator):
    """Sample a leader slot among the present vehicles."""
    logits, _ = bundle.leader_policy.forward(leader_obs)
    probs = nn.masked_softmax(logits, active)
    slot, logp = nn.sample_categorical(probs, active, rng)
    return slot, logp


def greedy_actions(bundle: PolicyBundle, ob: StepObservation):
    """Deterministic (argmax) decisions for evaluation runs."""
    n = bundle.n_slots
    local_actions = np.ones(n, dtype=int)
    for i in range(n):
        if ob.active[i]:
            logits, _ = bundle.local_policy.forward(
                local_policy_input(bundle, ob.local[i], i))
            local_actions[i] = int(np.argmax(logits)) + 1
    leader_slot = None
    if ob.members:
        logits, _ = bundle.leader_policy.forward(ob.leader)
        masked = np.where(ob.active, logits, -np.inf)
        leader_slot = int(np.argmax(masked))
    return local_actions, leader_slot


# -- PPO updates --------------------------------------------------------------

def ppo_policy_update(head: NetHead, inputs: np.ndarray,
                      action_mask: np.ndarray | None, actions: np.ndarray,
                      old_logp: np.ndarray, advantages: np.ndarray,
                      clip: float, entropy_coeff: float) -> dict:
    """One clipped-surrogate ascent step with an entropy bonus.

    inputs are pre-scaled network inputs; advantages should already be
    normalized. Returns loss diagnostics.
    """
    batch = len(actions)
    logits, cache = nn.forward(head.spec, head.params, inputs)
    probs = nn.masked_softmax(logits, action_mask)
    idx = np.arange(batch)
    logp = np.log(probs[idx, actions])
    ratio = np.exp(logp - old_logp)
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip) * advantages
    surrogate = np.minimum(unclipped, clipped)
    # gradient flows through the ratio wherever the min picks the raw term
    # or the clip is not saturated
    pass_through = (unclipped <= clipped) | ((ratio >= 1.0 - clip) & (ratio <= 1.0 + clip))
    g_logp = np.where(pass_through, unclipped, 0.0)
    onehot = np.zeros_like(probs)
    onehot[idx, actions] = 1.0
    dlogits = g_logp[:, None] * (onehot - probs)

    safe_logp = np.log(np.where(probs > 0, probs, 1.0))
    entropy = -(probs * safe_logp).sum(axis=1)
    dlogits += entropy_coeff * (-probs * (safe_logp + entropy[:, None]))

    grad = nn.backward(head.spec, head.params, cache, -dlogits / batch)
    head.params, head.adam = nn.adam_step(head.adam, head.params, grad)
    if not np.isfinite(surrogate.mean()):
        raise FloatingPointError("non-finite policy objective")
    return {"policy_loss": -float(surrogate.mean()),
            "entropy": float(entropy.mean())}


def ppo_value_update(head: NetHead, inputs: np.ndarray, old_values: np.ndarray,
                     returns: np.ndarray, clip: float) -> float:
    """One descent step on the clipped value regression loss."""
    batch = len(returns)
    out, cache = nn.forward(head.spec, head.params, inputs)
    v = out[:, 0]
    v_clip = np.clip(v, old_values - clip, old_values + clip)
    err = (v - returns) ** 2
    err_clip = (v_clip - returns) ** 2
    loss = float(np.maximum(err, err_clip).mean())
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite value loss")
    g = np.where(err >= err_clip, 2.0 * (v - returns), 0.0)
    dout = (g / batch)[:, None]
    grad = nn.backward(head.spec, head.params, cache, dout)
    head.params, head.adam = nn.adam_step(head.adam, head.params, grad)
    return loss


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    if len(adv) < 2:
        return adv
    return (adv - adv.mean()) / (adv.std() + 1e-8)


# -- trajectory collection and training ---------------------------------------

def collect(env: MdflEnv, bundle: PolicyBundle, spec: DecPomdpSpec,
            rng: np.random.Generator) -> dict:
    """Roll out `batch` trajectories of `steps` rounds with the current nets."""
    Z, T, N = spec.batch, spec.steps, bundle.n_slots
    dp = 4 * N
    dg = len(bundle.leader_value.input_scale)
    buf = {
        "local_in": np.zeros((Z, T, N, dp)),
        "local_value_in": np.zeros((Z, T, N, dg + N)),
        "local_actions": np.zeros((Z, T, N), dtype=int),
        "local_logp": np.zeros((Z, T, N)),
        "local_rewards": np.zeros((Z, T, N)),
        "local_values": np.zeros((Z, T, N)),
        "local_active": np.zeros((Z, T, N), dtype=bool),
        "local_boot": np.zeros((Z, N)),
        "local_boot_active": np.zeros((Z, N), dtype=bool),
        "leader_in": np.zeros((Z, T, 3 * N)),
        "leader_value_in": np.zeros((Z, T, dg)),
        "leader_mask": np.zeros((Z, T, N), dtype=bool),
        "leader_actions": np.zeros((Z, T), dtype=int),
        "leader_logp": np.zeros((Z, T)),
        "leader_rewards": np.zeros((Z, T)),
        "leader_values": np.zeros((Z, T)),
        "leader_active": np.zeros((Z, T), dtype=bool),
        "leader_boot": np.zeros(Z),
        "leader_boot_active": np.zeros(Z, dtype=bool),
        "dones": np.zeros((Z, T), dtype=bool),
        "committed": np.zeros((Z, T), dtype=bool),
    }
    for z in range(Z):
        for t in range(T):
            ob = env.observe()
            gin = bundle.leader_value.scaled(ob.global_state)
            local_actions = np.ones(N, dtype=int)
            for i in range(N):
                vin = np.concatenate([gin, _onehot(i, N)])
                buf["local_value_in"][z, t, i] = vin
                out, _ = nn.forward(bundle.local_value.spec,
                                    bundle.local_value.params, vin)
                buf["local_values"][z, t, i] = out[0]
                if ob.active[i]:
                    l, logp, x = act_local(bundle, ob.local[i], i, rng)
                    local_actions[i] = l
                    buf["local_in"][z, t, i] = bundle.local_policy.scaled(x)
                    buf["local_actions"][z, t, i] = l - 1
                    buf["local_logp"][z, t, i] = logp
            buf["local_active"][z, t] = ob.active
            buf["leader_value_in"][z, t] = gin
            vout, _ = nn.forward(bundle.leader_value.spec,
                                 bundle.leader_value.params, gin)
            buf["leader_values"][z, t] = vout[0]
            leader_slot = None
            if ob.members:
                leader_slot, llogp = act_leader(bundle, ob.leader, ob.active, rng)
                buf["leader_in"][z, t] = bundle.leader_policy.scaled(ob.leader)
                buf["leader_mask"][z, t] = ob.active
                buf["leader_actions"][z, t] = leader_slot
                buf["leader_logp"][z, t] = llogp
                buf["leader_active"][z, t] = True
            res = env.step(local_actions, leader_slot, ob)
            buf["local_rewards"][z, t] = res.local_rewards
            buf["leader_rewards"][z, t] = res.leader_reward
            buf["dones"][z, t] = res.done
            buf["committed"][z, t] = res.committed
        ob = env.observe()
        gin = bundle.leader_value.scaled(ob.global_state)
        if not buf["dones"][z, T - 1]:
            for i in range(N):
                vin = np.concatenate([gin, _onehot(i, N)])
                out, _ = nn.forward(bundle.local_value.spec,
                                    bundle.local_value.params, vin)
                buf["local_boot"][z, i] = out[0]
            vout, _ = nn.forward(bundle.leader_value.spec,
                                 bundle.leader_value.params, gin)
            buf["leader_boot"][z] = vout[0]
            buf["local_boot_active"][z] = ob.active
            buf["leader_boot_active"][z] = bool(ob.members)
    _attach_targets(buf, spec)
    return buf


def _agent_dones(env_dones: np.ndarray, active: np.ndarray,
                 boot_active) -> np.ndarray:
    """A segment also ends for an agent when it is absent at the next step."""
    T = len(env_dones)
    next_active = np.concatenate([active[1:], np.atleast_1d(boot_active)])
    return env_dones | ~next_active


def _attach_targets(buf: dict, spec: DecPomdpSpec) -> None:
    Z, T, N = buf["local_rewards"].shape
    buf["local_adv"] = np.zeros((Z, T, N))
    buf["local_ret"] = np.zeros((Z, T, N))
    buf["leader_adv"] = np.zeros((Z, T))
    buf["leader_ret"] = np.zeros((Z, T))
    for z in range(Z):
        for i in range(N):
            dones = _agent_dones(buf["dones"][z], buf["local_active"][z, :, i],
                                 buf["local_boot_active"][z, i])
            buf["local_adv"][z, :, i] = gae(
                buf["local_rewards"][z, :, i], buf["local_values"][z, :, i],
                buf["local_boot"][z, i], spec.gamma, spec.lam, dones)
            buf["local_ret"][z, :, i] = segmented_returns(
                buf["local_rewards"][z, :, i], dones, spec.gamma)
        dones = _agent_dones(buf["dones"][z], buf["leader_active"][z],
                             buf["leader_boot_active"][z])
        buf["leader_adv"][z] = gae(buf["leader_rewards"][z],
                                   buf["leader_values"][z],
                                   buf["leader_boot"][z],
                                   spec.gamma, spec.lam, dones)
        buf["leader_ret"][z] = segmented_returns(buf["leader_rewards"][z],
                                                 dones, spec.gamma)


def ppo_update(bundle: PolicyBundle, buf: dict, spec: DecPomdpSpec) -> dict:
    """One optimization epoch over the collected batch (single minibatch);
    inactive-agent steps are excluded from every mean."""
    diag = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0}
    weight = 0
    lmask = buf["local_active"]
    if lmask.any():
        n = int(lmask.sum())
        adv = normalize_advantages(buf["local_adv"][lmask])
        d = ppo_policy_update(bundle.local_policy, buf["local_in"][lmask], None,
                              buf["local_actions"][lmask], buf["local_logp"][lmask],
                              adv, spec.clip, spec.entropy_coeff)
        vloss = ppo_value_update(bundle.local_value, buf["local_value_in"][lmask],
                                 buf["local_values"][lmask], buf["local_ret"][lmask],
                                 spec.clip)
        diag = {"policy_loss": d["policy_loss"] * n, "value_loss": vloss * n,
                "entropy": d["entropy"] * n}
        weight += n
    gmask = buf["leader_active"]
    if gmask.any():
        n = int(gmask.sum())
        adv = normalize_advantages(buf["leader_adv"][gmask])
        d = ppo_policy_update(bundle.leader_policy, buf["leader_in"][gmask],
                              buf["leader_mask"][gmask], buf["leader_actions"][gmask],
                              buf["leader_logp"][gmask], adv, spec.clip,
                              spec.entropy_coeff)
        vloss = ppo_value_update(bundle.leader_value, buf["leader_value_in"][gmask],
                                 buf["leader_values"][gmask], buf["leader_ret"][gmask],
                                 spec.clip)
        diag["policy_loss"] += d["policy_loss"] * n
        diag["value_loss"] += vloss * n
        diag["entropy"] += d["entropy"] * n
        weight += n
    if weight:
        diag = {k: v / weight for k, v in diag.items()}
    return diag


@dataclass
class EpisodeRecord:
    episode: int
    accumulated_reward: float
    policy_loss: float
    value_loss: float
    entropy: float


def train(env: MdflEnv, spec: DecPomdpSpec, seed: int,
          bundle: PolicyBundle | None = None):
    """Run the full training loop; returns (bundle, per-episode records)."""
    rng = np.random.default_rng(seed)
    if bundle is None:
        bundle = build_bundle(env, spec, rng)
    curve: list[EpisodeRecord] = []
    for episode in range(1, spec.episodes + 1):
        buf = collect(env, bundle, spec, rng)
        total = float(buf["local_rewards"].sum() + buf["leader_rewards"].sum())
        diag = ppo_update(bundle, buf, spec)
        curve.append(EpisodeRecord(episode, total / spec.batch,
                                   diag["policy_loss"], diag["value_loss"],
                                   diag["entropy"]))
    return bundle, curve


# -- checkpointing -------------------------------------------------------------

_HEAD_NAMES = ("local_policy", "leader_policy", "local_value", "leader_value")


def save_bundle(path, bundle: PolicyBundle) -> None:
    """Single-file checkpoint: JSON manifest then per-net little-endian
    float64 blocks, each preceded by a u64 length."""
    manifest = {
        "slots": list(bundle.slots),
        "l_max": bundle.l_max,
        "nets": {},
    }
    for name in _HEAD_NAMES:
        head: NetHead = getattr(bundle, name)
        manifest["nets"][name] = {
            "layer_sizes": list(head.spec.layer_sizes),
            "hidden_activation": head.spec.hidden_activation,
            "output_head": head.spec.output_head,
            "input_scale": [float(s) for s in head.input_scale],
        }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(BUNDLE_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in _HEAD_NAMES:
            head = getattr(bundle, name)
            values = np.asarray(head.params, dtype="<f8")
            fh.write(struct.pack("<Q", values.size))
            fh.write(values.tobytes())


def load_bundle(path, learning_rate: float = 5e-4) -> PolicyBundle:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != BUNDLE_MAGIC:
        raise ValueError("not a policy checkpoint (bad magic)")
    (blob_len,) = struct.unpack_from("<I", data, 4)
    manifest = json.loads(data[8:8 + blob_len].decode("utf-8"))
    offset = 8 + blob_len
    heads = {}
    for name in _HEAD_NAMES:
        meta = manifest["nets"][name]
        spec = nn.NetSpec(tuple(meta["layer_sizes"]), meta["hidden_activation"],
                          meta["output_head"])
        (count,) = struct.unpack_from("<Q", data, offset)
        offset += 8
        params = np.frombuffer(data, dtype="<f8", count=count, offset=offset).copy()
        offset += 8 * count
        if params.size != spec.param_count():
            raise ValueError(f"checkpoint block {name} does not match its spec")
        heads[name] = NetHead(spec, params,
                              nn.AdamState.for_params(spec.param_count(),
                                                      learning_rate),
                              np.array(meta["input_scale"], dtype=np.float64))
    return PolicyBundle(list(manifest["slots"]), int(manifest["l_max"]), **heads)
