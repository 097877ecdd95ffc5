"""Experiment execution: build a simulation from a config, drive it with one
of the three schedulers, and emit CSV metrics plus rendered figures."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import figures, flcore, marl, mobility, nn
from .config import ConfigError, ExperimentConfig
from .protocol import FlTask, RoundPlan, RoundOutcome, SimState, dfl_round, random_plan, run_round

METRICS_HEADER = ("round", "f_acc", "e_total")
ROUNDS_HEADER = ("round", "leader_id", "member_ids", "l_vector", "t_max",
                 "feasible", "violations")
ENERGY_HEADER = ("round", "vehicle_id", "e_cmp", "e_com", "e_sum", "e_res")
SUMMARY_HEADER = ("scheduler", "final_f_acc", "ecr", "rounds_executed")
SWEEP_HEADER = ("x", "mappo", "dfl", "random")
CURVE_HEADER = ("episode", "accumulated_reward", "policy_loss", "value_loss",
                "entropy")


@dataclass
class RunResult:
    scheduler: str
    final_f_acc: float
    ecr: float
    rounds_executed: int
    metrics_rows: list[tuple] = field(default_factory=list)
    rounds_rows: list[tuple] = field(default_factory=list)
    energy_rows: list[tuple] = field(default_factory=list)


def build_trace(cfg: ExperimentConfig) -> mobility.MobilityTrace:
    if cfg.trace.source == "file":
        return mobility.ingest_trace(cfg.trace.path,
                                     round_duration=cfg.trace.round_duration)
    return mobility.generate_trace(cfg.trace_config(), cfg.trace.seed)


def build_task(cfg: ExperimentConfig, n_clients: int):
    fl = cfg.fl
    rng = np.random.default_rng(fl.seed)
    if fl.task == "blobs":
        x, y = flcore.make_blobs(fl.train_per_client * n_clients, fl.dims,
                                 fl.classes, rng, fl.blob_radius, fl.blob_noise)
        vx, vy = flcore.make_blobs(fl.val_per_client * n_clients, fl.dims,
                                   fl.classes, rng, fl.blob_radius, fl.blob_noise)
        dims = fl.dims
    else:
        x, y = flcore.ingest_idx(fl.idx_train_images, fl.idx_train_labels,
                                 num_classes=fl.classes)
        vx, vy = flcore.ingest_idx(fl.idx_val_images, fl.idx_val_labels,
                                   num_classes=fl.classes)
        dims = x.shape[1]
    spec = flcore.PartitionSpec(mode=fl.partition, num_clients=n_clients,
                                alpha=fl.alpha, seed=fl.seed)
    client_list = flcore.partition(x, y, vx, vy, spec)
    netspec = nn.NetSpec((dims, fl.hidden, fl.classes),
                         hidden_activation=fl.activation, output_head="softmax")
    init_params = nn.init_params(netspec, np.random.default_rng([fl.seed, 1]))
    return FlTask(
        netspec=netspec, eta=fl.lr, init_params=init_params,
        clients={},  # bound to vehicle ids by build_state
        strategy_factory=lambda: flcore.build_strategy(fl.aggregation, fl.mu),
    ), client_list


def build_state(cfg: ExperimentConfig,
                trace: mobility.MobilityTrace | None = None) -> SimState:
    trace = trace if trace is not None else build_trace(cfg)
    universe = trace.vehicle_ids()
    if len(universe) < 2:
        raise ConfigError("trace must contain at least 2 vehicles")
    task, client_list = build_task(cfg, len(universe))
    task.clients = {vid: client_list[i] for i, vid in enumerate(universe)}
    roi = mobility.RoiSpec(0.0, cfg.trace.road_length, 0.0, cfg.trace.road_width)
    initial = {vid: cfg.energy.initial for vid in universe}
    return SimState(trace=trace, roi=roi, comm=cfg.comm_params(),
                    compute=cfg.compute_params(), initial_energy=initial,
                    epsilon=cfg.leader.epsilon, rho=cfg.leader.rho, task=task)


def marl_spec(cfg: ExperimentConfig, n_slots: int) -> marl.DecPomdpSpec:
    m = cfg.marl
    return marl.DecPomdpSpec(
        n_slots=n_slots, gamma=m.gamma, lam=m.lam, clip=m.clip,
        entropy_coeff=m.entropy, steps=m.steps, batch=m.batch,
        episodes=m.episodes, learning_rate=m.lr,
        hidden=tuple(int(h) for h in m.hidden))


# -- single run ----------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, Fraction):
        return str(value.numerator) if value.denominator == 1 else repr(float(value))
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _record_outcome(result: RunResult, state: SimState, outcome: RoundOutcome):
    k = outcome.plan.round_k
    members = outcome.members
    result.rounds_rows.append((
        k, outcome.plan.leader_id,
        ";".join(str(v) for v in members),
        ";".join(str(outcome.plan.iterations[v]) for v in members),
        outcome.t_max, outcome.committed,
        ";".join(sorted(outcome.violations)),
    ))
    if outcome.committed:
        for v in members:
            row = outcome.charges[v]
            result.energy_rows.append((k, v, row.e_cmp, row.e_com, row.e_sum,
                                       state.ledger.residual(v)))
        acc = flcore.f_acc(state.models, members, state.task.clients,
                           state.task.netspec)
        result.metrics_rows.append((k, acc, flcore.e_total(state.ledger)))
        result.final_f_acc = acc
        result.rounds_executed += 1


def run_experiment(cfg: ExperimentConfig, state: SimState | None = None,
                   bundle: marl.PolicyBundle | None = None) -> RunResult:
    """Drive one simulated deployment with the configured scheduler.

    Rounds with fewer than two energy-eligible vehicles in the RoI are
    skipped; an infeasible executed round ends the run (the all-neighbor
    baseline instead drops unaffordable vehicles round by round).
    """
    scheduler = cfg.run.scheduler
    state = state if state is not None else build_state(cfg)
    state.reset()
    rng = np.random.default_rng(cfg.run.seed)
    if scheduler == "mappo":
        if bundle is None:
            if not cfg.marl.policy:
                raise ConfigError("run.scheduler=mappo needs marl.policy or a "
                                  "checkpoint argument")
            bundle = marl.load_bundle(cfg.marl.policy)
        if bundle.slots != state.vehicle_ids():
            raise ConfigError("policy checkpoint was trained for a different "
                              "vehicle universe")
    result = RunResult(scheduler=scheduler, final_f_acc=0.0, ecr=0.0,
                       rounds_executed=0)
    cap = min(cfg.run.rounds, state.trace.num_rounds)
    first_members: list[int] | None = None
    for k in range(1, cap + 1):
        members = state.members(k)
        if len(members) < 2:
            continue
        if first_members is None:
            first_members = members
        if scheduler == "dfl":
            outcome = dfl_round(state, k)
            if outcome is not None:
                _record_outcome(result, state, outcome)
            continue
        if scheduler == "random":
            plan = random_plan(k, members, state.comm, state.compute, rng)
            outcome = run_round(state, plan, enforce_leader_rule=False)
        else:
            state.k = k
            ob = marl.build_observations(state, bundle.slots)
            local_actions, leader_slot = marl.greedy_actions(bundle, ob)
            iterations = {bundle.slots[i]: int(local_actions[i])
                          for i in range(bundle.n_slots) if ob.active[i]}
            plan = RoundPlan(k, bundle.slots[leader_slot], iterations)
            outcome = run_round(state, plan)
        _record_outcome(result, state, outcome)
        if not outcome.committed:
            break
    if result.rounds_executed == 0:
        members = first_members or []
        if members:
            result.final_f_acc = flcore.f_acc(state.models, members,
                                              state.task.clients,
                                              state.task.netspec)
    result.ecr = flcore.ecr(state.ledger)
    return result


def write_run_outputs(result: RunResult, outdir: Path) -> list[Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = [
        _write_csv(outdir / "metrics.csv", METRICS_HEADER, result.metrics_rows),
        _write_csv(outdir / "rounds.csv", ROUNDS_HEADER, result.rounds_rows),
        _write_csv(outdir / "energy.csv", ENERGY_HEADER, result.energy_rows),
        _write_csv(outdir / "summary.csv", SUMMARY_HEADER,
                   [(result.scheduler, result.final_f_acc, result.ecr,
                     result.rounds_executed)]),
    ]
    paths.append(figures.run_metrics_figure(result.metrics_rows,
                                            outdir / "run_metrics.png"))
    return paths


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


# -- training ------------------------------------------------------------------


def train_experiment(cfg: ExperimentConfig, outdir: Path,
                     state: SimState | None = None):
    """Train the two policy kinds on the configured environment; writes the
    training curve, its figure and the policy checkpoint."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    state = state if state is not None else build_state(cfg)
    env = marl.MdflEnv(state)
    spec = marl_spec(cfg, env.n_slots)
    bundle, curve = marl.train(env, spec, cfg.marl.seed)
    rows = [(r.episode, r.accumulated_reward, r.policy_loss, r.value_loss,
             r.entropy) for r in curve]
    paths = [_write_csv(outdir / "curve.csv", CURVE_HEADER, rows)]
    checkpoint = outdir / "policy.bin"
    marl.save_bundle(checkpoint, bundle)
    paths.append(checkpoint)
    paths.append(figures.training_curve_figure(rows, outdir / "curve.png"))
    return bundle, curve, paths


# -- parameter sweeps ----------------------------------------------------------

_AXIS_SETTERS = {
    "E_v": lambda cfg, v: setattr(cfg.energy, "initial", float(v)),
    "E_cloud": lambda cfg, v: setattr(cfg.comm, "e_cloud", float(v)),
    "N": lambda cfg, v: setattr(cfg.trace, "vehicles", int(v)),
    "epsilon": lambda cfg, v: setattr(cfg.leader, "epsilon", float(v)),
    "r": lambda cfg, v: setattr(cfg.comm, "r", float(v)),
}


def _with_axis(cfg: ExperimentConfig, axis: str, value: float) -> ExperimentConfig:
    import copy

    out = copy.deepcopy(cfg)
    _AXIS_SETTERS[axis](out, value)
    return out.validate()


def sweep(cfg: ExperimentConfig, axis: str, values, outdir: Path,
          reuse_policy: bool = False) -> list[Path]:
    """Run every scheduler at each axis value and tabulate final accuracy
    and energy efficiency in the x,mappo,dfl,random plot-data layout."""
    if axis not in _AXIS_SETTERS:
        raise ConfigError(f"unknown sweep axis {axis!r}; "
                          f"choose from {', '.join(_AXIS_SETTERS)}")
    if not values:
        raise ConfigError("sweep needs at least one axis value")
    if axis == "N" and cfg.trace.source == "file":
        raise ConfigError("sweeping N requires a generated trace")
    if axis == "N" and reuse_policy:
        raise ConfigError("--reuse-policy cannot be combined with the N axis "
                          "(the policy input width changes)")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    shared_bundle = None
    if reuse_policy:
        shared_bundle, _, _ = train_experiment(cfg, outdir / "base_policy")
    facc_rows, ecr_rows = [], []
    for value in values:
        point = _with_axis(cfg, axis, value)
        facc = {}
        eff = {}
        for scheduler in ("mappo", "dfl", "random"):
            run_cfg = _with_axis(cfg, axis, value)
            run_cfg.run.scheduler = scheduler
            bundle = None
            if scheduler == "mappo":
                if shared_bundle is not None:
                    bundle = shared_bundle
                else:
                    bundle, _, _ = train_experiment(
                        run_cfg, outdir / f"policy_{axis}_{_fmt(value)}")
            res = run_experiment(run_cfg, bundle=bundle)
            facc[scheduler] = res.final_f_acc
            eff[scheduler] = res.ecr
        facc_rows.append((value, facc["mappo"], facc["dfl"], facc["random"]))
        ecr_rows.append((value, eff["mappo"], eff["dfl"], eff["random"]))
    paths = [
        _write_csv(outdir / "sweep_facc.csv", SWEEP_HEADER, facc_rows),
        _write_csv(outdir / "sweep_ecr.csv", SWEEP_HEADER, ecr_rows),
        figures.sweep_figure(facc_rows, axis, "final accuracy",
                             outdir / "sweep_facc.png"),
        figures.sweep_figure(ecr_rows, axis, "energy consumption ratio",
                             outdir / "sweep_ecr.png"),
    ]
    return paths
