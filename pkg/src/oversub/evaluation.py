"""Policy rollouts and metric tables for both domains.

Learned policies are rolled out autoregressively: at each step the policy
sees the raw feature row, acts, and its own action is committed into its
trajectory history.  Heuristics (static grid rate, moving average) read only
observable history.  All policies are scored by the same simulators.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .baselines import BCModel, BCRunner, grid_search, moving_average_rates, train_plain_bc
from .config import ExperimentConfig
from .errors import ContractViolation
from .policy import PolicyModel, PolicyRunner
from .sim_airline import (AirlineHistory, AirlineOutcome, expert_rates as airline_expert_rates,
                          generate_history, run_rates as airline_run_rates)
from .sim_cloud import (CloudOutcome, Fleet, allocate_best_fit, evaluate as cloud_evaluate,
                        generate_fleet, run_rates as cloud_run_rates,
                        service_expert_rates, service_states)

GRID = [round(0.05 * i, 2) for i in range(21)]
MA_WINDOW_CLOUD = 24
MA_WINDOW_AIRLINE = 4


def fleet_for(config: ExperimentConfig) -> Fleet:
    return generate_fleet(config.seed, services=config.sim.services, nodes=config.sim.nodes,
                          core_capacity=config.sim.core_capacity,
                          mem_capacity=config.sim.mem_capacity, hours=config.sim.hours)


def history_for(config: ExperimentConfig) -> AirlineHistory:
    return generate_history(config.seed, airlines=config.sim.airlines, years=config.sim.years)


# -- rate matrices ------------------------------------------------------------


def rollout_cloud(model: PolicyModel | BCModel, fleet: Fleet) -> np.ndarray:
    """Autoregressive rollout of a learned policy over every service, (S, T)."""
    states = service_states(fleet)
    S, T, _ = states.shape
    rates = np.zeros((S, T))
    for s in range(S):
        runner = PolicyRunner(model) if isinstance(model, PolicyModel) else BCRunner(model)
        for t in range(T):
            a = runner.act(states[s, t])
            rates[s, t] = a
            runner.commit(states[s, t], a)
    return rates


def rollout_airline(model: PolicyModel | BCModel, history: AirlineHistory) -> np.ndarray:
    from .sim_airline import build_trajectories
    trajs = build_trajectories(history)
    A = len(trajs)
    T = len(trajs[0])
    rates = np.zeros((A, T))
    for i, traj in enumerate(trajs):
        runner = PolicyRunner(model) if isinstance(model, PolicyModel) else BCRunner(model)
        for t in range(T):
            a = runner.act(traj.states[t])
            rates[i, t] = a
            runner.commit(traj.states[t], a)
    return rates


def cloud_constant_outcome(fleet: Fleet, rate: float, hot_threshold: float) -> CloudOutcome:
    """Fast path for a static rate: the hourly placement never changes."""
    vm_rates = np.full(len(fleet.vms), rate)
    placement = allocate_best_fit(fleet.vms, fleet.nodes, vm_rates)
    return cloud_evaluate(placement, fleet.traces, fleet, hot_threshold)


def cloud_grid_search(fleet: Fleet, hot_threshold: float,
                      grid: list[float] = GRID) -> tuple[float, CloudOutcome]:
    def score(rate: float) -> tuple[float, float]:
        out = cloud_constant_outcome(fleet, rate, hot_threshold)
        return out.hot_node_rate, out.remain_cores

    rate, _, _ = grid_search(grid, score)
    return rate, cloud_constant_outcome(fleet, rate, hot_threshold)


def cloud_ma_rates(fleet: Fleet, window: int = MA_WINDOW_CLOUD) -> np.ndarray:
    return moving_average_rates(fleet.service_usage(), window)


def airline_grid_search(history: AirlineHistory,
                        grid: list[float] = GRID) -> tuple[float, AirlineOutcome]:
    A, T = len(history.airlines), history.quarters_per_airline

    def score(rate: float) -> tuple[float, float]:
        out = airline_run_rates(history, np.full((A, T), rate))
        return out.cost, out.profit

    rate, _, _ = grid_search(grid, score)
    return rate, airline_run_rates(history, np.full((A, T), rate))


def airline_ma_rates(history: AirlineHistory, window: int = MA_WINDOW_AIRLINE) -> np.ndarray:
    """Cover the recently observed no-show rate: action = mean(no-shows)/margin,
    lagged one quarter."""
    m = history.config.max_margin
    A, T = len(history.airlines), history.quarters_per_airline
    ns = np.array([[q.no_show_rate for q in rec.quarters] for rec in history.airlines])
    rates = np.zeros((A, T))
    for t in range(T):
        if t == 0:
            window_ns = ns[:, :1]
        else:
            window_ns = ns[:, max(0, t - window):t]
        rates[:, t] = np.clip(window_ns.mean(axis=1) / m, 0.0, 1.0)
    return rates


# -- comparison tables ---------------------------------------------------------


@dataclass
class CloudEvalReport:
    rows: list[dict]
    outcomes: dict[str, CloudOutcome]
    rates: dict[str, np.ndarray | float]
    grid_rate: float
    baseline_hot_rate: float          # hot rate with no oversubscription (rate 1.0)


def evaluate_cloud(config: ExperimentConfig, proto_model: PolicyModel | None = None,
                   bc_model: BCModel | None = None,
                   hot_threshold: float | None = None) -> CloudEvalReport:
    fleet = fleet_for(config)
    threshold = config.sim.hot_threshold if hot_threshold is None else hot_threshold
    outcomes: dict[str, CloudOutcome] = {}
    rates: dict[str, np.ndarray | float] = {}

    baseline = cloud_constant_outcome(fleet, 1.0, threshold)
    outcomes["no-oversubscription"] = baseline
    rates["no-oversubscription"] = 1.0

    grid_rate, grid_out = cloud_grid_search(fleet, threshold)
    outcomes["grid-search"] = grid_out
    rates["grid-search"] = grid_rate

    ma = cloud_ma_rates(fleet)
    outcomes["moving-average"] = cloud_run_rates(fleet, ma, threshold)
    rates["moving-average"] = ma

    expert = service_expert_rates(fleet)
    outcomes["expert-replay"] = cloud_run_rates(fleet, expert, threshold)
    rates["expert-replay"] = expert

    if bc_model is not None:
        r = rollout_cloud(bc_model, fleet)
        outcomes["behavior-cloning"] = cloud_run_rates(fleet, r, threshold)
        rates["behavior-cloning"] = r
    if proto_model is not None:
        r = rollout_cloud(proto_model, fleet)
        outcomes["prototype-imitation"] = cloud_run_rates(fleet, r, threshold)
        rates["prototype-imitation"] = r

    rows = [{"approach": name,
             "hot_node_rate": out.hot_node_rate,
             "hot_node_hours": out.hot_node_hours,
             "remain_cores": out.remain_cores,
             "reward_mean": float(out.rewards.mean()),
             "reward_normalized": float((-out.hot_node_rate
                                         + out.remain_cores / (len(fleet.nodes) * fleet.hours
                                                               * config.sim.core_capacity)))}
            for name, out in outcomes.items()]
    return CloudEvalReport(rows=rows, outcomes=outcomes, rates=rates, grid_rate=grid_rate,
                           baseline_hot_rate=baseline.hot_node_rate)


@dataclass
class AirlineEvalReport:
    rows: list[dict]
    outcomes: dict[str, AirlineOutcome]
    rates: dict[str, np.ndarray | float]
    grid_rate: float


def evaluate_airline(config: ExperimentConfig, proto_model: PolicyModel | None = None,
                     bc_model: BCModel | None = None) -> AirlineEvalReport:
    history = history_for(config)
    outcomes: dict[str, AirlineOutcome] = {}
    rates: dict[str, np.ndarray | float] = {}

    grid_rate, grid_out = airline_grid_search(history)
    outcomes["grid-search"] = grid_out
    rates["grid-search"] = grid_rate

    ma = airline_ma_rates(history)
    outcomes["moving-average"] = airline_run_rates(history, ma)
    rates["moving-average"] = ma

    expert = airline_expert_rates(history)
    outcomes["expert-replay"] = airline_run_rates(history, expert)
    rates["expert-replay"] = expert

    if bc_model is not None:
        r = rollout_airline(bc_model, history)
        outcomes["behavior-cloning"] = airline_run_rates(history, r)
        rates["behavior-cloning"] = r
    if proto_model is not None:
        r = rollout_airline(proto_model, history)
        outcomes["prototype-imitation"] = airline_run_rates(history, r)
        rates["prototype-imitation"] = r

    rows = [{"approach": name, "cost": out.cost, "profit": out.profit,
             "offloaded": out.offloaded, "reward_mean": float(out.rewards.mean())}
            for name, out in outcomes.items()]
    return AirlineEvalReport(rows=rows, outcomes=outcomes, rates=rates, grid_rate=grid_rate)


# -- paired training for comparisons ---------------------------------------------


@dataclass
class SeedComparison:
    seed: int
    report: CloudEvalReport | AirlineEvalReport
    queries: int
    edits: int


def train_and_compare(config: ExperimentConfig) -> SeedComparison:
    """Train the prototype policy and the cloning baseline on one seed and
    evaluate both against the heuristics."""
    from .train import generate_dataset, train as run_train

    trajectories = generate_dataset(config)
    result = run_train(config, trajectories)
    keep = set(result.train_ids)
    train_set = [t for t in trajectories if t.entity_id in keep]
    bc_model, _ = train_plain_bc(train_set, epochs=config.epochs, lr=config.learning_rate,
                                 hidden=config.hidden, seed=config.seed,
                                 domain_tag=config.domain, bptt_window=config.bptt_window,
                                 loss_kind=config.bc_loss_kind)
    if config.domain == "cloud":
        report: CloudEvalReport | AirlineEvalReport = evaluate_cloud(
            config, proto_model=result.model, bc_model=bc_model)
    else:
        report = evaluate_airline(config, proto_model=result.model, bc_model=bc_model)
    return SeedComparison(seed=config.seed, report=report,
                          queries=result.queries_published, edits=len(result.edits))


def _sweep_task(args: tuple) -> dict:
    config_dict, k, seed = args
    d = dict(config_dict)
    d.update(k=k, seed=seed, output_dir="")
    cfg = ExperimentConfig.from_dict(d)
    from .train import generate_dataset, train as run_train
    trajectories = generate_dataset(cfg)
    result = run_train(cfg, trajectories)
    if cfg.domain == "cloud":
        fleet = fleet_for(cfg)
        rates = rollout_cloud(result.model, fleet)
        out = cloud_run_rates(fleet, rates, cfg.sim.hot_threshold)
        return {"k": k, "seed": seed, "risk": out.hot_node_rate, "benefit": out.remain_cores}
    history = history_for(cfg)
    rates = rollout_airline(result.model, history)
    out = airline_run_rates(history, rates)
    return {"k": k, "seed": seed, "risk": out.cost, "benefit": out.profit}


def sweep_prototypes(config: ExperimentConfig, k_values: list[int] | None = None,
                     seeds: list[int] | None = None, workers: int = 1) -> dict:
    """Train and evaluate per prototype count; emit per-run and per-K rows.

    Structural edits are disabled so every run keeps its nominal K.
    """
    k_values = k_values or [2, 3, 4, 5, 6]
    seeds = seeds if seeds is not None else [config.seed + i for i in range(5)]
    base = config.to_dict()
    base["hitl"] = dict(base["hitl"], enabled=False)
    tasks = [(base, k, s) for k in k_values for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_sweep_task, tasks))
    else:
        runs = [_sweep_task(t) for t in tasks]
    summary = []
    for k in k_values:
        rows = [r for r in runs if r["k"] == k]
        summary.append({"k": k,
                        "risk_mean": float(np.mean([r["risk"] for r in rows])),
                        "risk_std": float(np.std([r["risk"] for r in rows])),
                        "benefit_mean": float(np.mean([r["benefit"] for r in rows])),
                        "benefit_std": float(np.std([r["benefit"] for r in rows]))})
    best = min(summary, key=lambda row: (row["risk_mean"], -row["benefit_mean"]))
    return {"runs": runs, "summary": summary, "selected_k": best["k"]}


def pressure_test(config: ExperimentConfig, hot_threshold: float,
                  proto_model: PolicyModel, bc_model: BCModel) -> list[dict]:
    """Re-score trained cloud policies under a lowered hot threshold."""
    if config.domain != "cloud":
        raise ContractViolation("the pressure test applies to the cloud domain")
    fleet = fleet_for(config)
    rows = []
    for name, model in (("behavior-cloning", bc_model), ("prototype-imitation", proto_model)):
        rates = rollout_cloud(model, fleet)
        out = cloud_run_rates(fleet, rates, hot_threshold)
        rows.append({"approach": name, "hot_threshold": hot_threshold,
                     "hot_node_rate": out.hot_node_rate, "remain_cores": out.remain_cores})
    return rows
