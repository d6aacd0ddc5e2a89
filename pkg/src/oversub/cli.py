"""The ``oversub`` command line.

Subcommands: simulate, train, evaluate, sweep, pressure, serve, oracle.
Every flag mirrors a config field and overrides the optional ``--config``
YAML file.  Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np
import yaml

from . import checkpoint as ckpt
from . import data as data_io
from . import evaluation as ev
from . import reports
from .baselines import train_plain_bc
from .config import ExperimentConfig, load_config, resolve_output_dir
from .errors import ConfigError, NumericError, OversubError
from .gateway import Gateway, GatewayServer
from .hitl import OracleRules
from .oracle_client import run_oracle
from .prototypes import assign, project_explanations
from .train import Trainer, generate_dataset


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--domain", choices=("cloud", "airline"))
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int, help="prototype count (0 = domain default)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--hidden", type=int)
    for w in ("w1", "w2", "w3", "w4"):
        p.add_argument(f"--{w}", type=float)
    p.add_argument("--train-fraction", type=float, dest="train_fraction")
    p.add_argument("--bc-loss-kind", choices=("cross_entropy", "squared_error"),
                   dest="bc_loss_kind")
    p.add_argument("--hitl", dest="hitl_enabled", action="store_true", default=None)
    p.add_argument("--no-hitl", dest="hitl_enabled", action="store_false", default=None)
    p.add_argument("--feedback-source", choices=("interactive", "oracle", "none"),
                   dest="feedback_source")
    p.add_argument("--frequency", type=int, help="query cadence in iterations")
    p.add_argument("--warmup", type=int, help="first iteration eligible for queries")
    p.add_argument("--u-p", type=float, dest="u_p")
    p.add_argument("--u-a", type=float, dest="u_a")
    p.add_argument("--n-top", type=int, dest="n_top")
    p.add_argument("--shadow-iterations", type=int, dest="shadow_iterations")
    p.add_argument("--oracle-rules", dest="oracle_rules", help="YAML rule table file")
    p.add_argument("--services", type=int)
    p.add_argument("--nodes", type=int)
    p.add_argument("--core-capacity", type=int, dest="core_capacity")
    p.add_argument("--mem-capacity", type=float, dest="mem_capacity")
    p.add_argument("--hours", type=int)
    p.add_argument("--hot-threshold", type=float, dest="hot_threshold")
    p.add_argument("--airlines", type=int)
    p.add_argument("--years", type=int)
    p.add_argument("--output-dir", dest="output_dir")


_TOP_LEVEL = ("domain", "seed", "k", "epochs", "learning_rate", "batch_size", "hidden",
              "w1", "w2", "w3", "w4", "train_fraction", "bc_loss_kind", "output_dir")
_HITL = ("feedback_source", "frequency", "warmup", "u_p", "u_a", "n_top",
         "shadow_iterations")
_SIM = ("services", "nodes", "core_capacity", "mem_capacity", "hours", "hot_threshold",
        "airlines", "years")


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    overrides: dict = {}
    for name in _TOP_LEVEL:
        overrides[name] = getattr(args, name, None)
    for name in _HITL:
        overrides[f"hitl.{name}"] = getattr(args, name, None)
    for name in _SIM:
        overrides[f"sim.{name}"] = getattr(args, name, None)
    if getattr(args, "hitl_enabled", None) is not None:
        overrides["hitl.enabled"] = args.hitl_enabled
    rules_path = getattr(args, "oracle_rules", None)
    if rules_path:
        try:
            with open(rules_path) as f:
                overrides["hitl.oracle_rules"] = yaml.safe_load(f) or {}
        except OSError as e:
            raise ConfigError(f"cannot read oracle rules {rules_path}: {e}") from e
    return load_config(getattr(args, "config", None), overrides)


def _print_rows(rows: list[dict]) -> None:
    if not rows:
        return
    cols = list(rows[0].keys())
    widths = [max(len(c), *(len(reports._fmt(r.get(c, ""))) for r in rows)) for c in cols]
    print("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
    for r in rows:
        print("  ".join(reports._fmt(r.get(c, "")).ljust(w) for c, w in zip(cols, widths)))


# -- subcommands ----------------------------------------------------------------


def cmd_simulate(args) -> int:
    config = _config_from_args(args)
    out_dir = resolve_output_dir(config, "simulate")
    trajectories = generate_dataset(config)
    path = args.out or os.path.join(out_dir, "dataset.jsonl")
    data_io.write_trajectories(path, trajectories)
    summary = [{"entity_id": t.entity_id, "steps": len(t), "domain": t.domain_tag,
                "mean_action": float(np.nanmean(t.actions))} for t in trajectories]
    reports.write_table(os.path.join(out_dir, "dataset_summary.tsv"), summary)
    print(f"wrote {sum(len(t) for t in trajectories)} records for "
          f"{len(trajectories)} entities to {path}")
    return 0


def _train_prototype(config: ExperimentConfig, args, gateway=None):
    trajectories = None
    if getattr(args, "data", None):
        trajectories = data_io.read_trajectories(args.data)
    trainer = Trainer(config, trajectories or generate_dataset(config), gateway=gateway)
    result = trainer.run()
    out_dir = resolve_output_dir(config, "train")
    os.makedirs(out_dir, exist_ok=True)
    ckpt.save_checkpoint(os.path.join(out_dir, "checkpoint.json"), result.model, config,
                         ledger=result.ledger, rng_state=result.rng_state,
                         stats={"effective_iterations": result.effective_iterations,
                                "queries_published": result.queries_published,
                                "edits": len(result.edits),
                                "train_ids": result.train_ids,
                                "test_ids": result.test_ids})
    log_rows = [r.as_row() for r in result.log]
    reports.write_table(os.path.join(out_dir, "train_log.tsv"), log_rows)
    reports.save_loss_curves(log_rows, os.path.join(out_dir, "figures", "loss_curves.png"))
    normed = result.model.scaler.transform_all(trainer.train_raw)
    from .encoder import encode_data
    finals = np.vstack([encode_data(t, result.model.encoder) for t in normed])
    assignment = assign(finals, result.model.protos)
    explanations = project_explanations(result.model.protos, trainer.train_raw)
    reports.save_prototype_clusters(result.model, trainer.train_raw, assignment,
                                    os.path.join(out_dir, "figures", "prototype_clusters.png"),
                                    explanations=explanations)
    print(f"trained {config.domain} policy: {result.effective_iterations} iterations, "
          f"K={result.model.protos.k}, {result.queries_published} queries, "
          f"{len(result.edits)} structural edits")
    print(f"checkpoint: {os.path.join(out_dir, 'checkpoint.json')}")
    return result


def cmd_train(args) -> int:
    config = _config_from_args(args)
    if args.baseline == "bc":
        trajectories = (data_io.read_trajectories(args.data) if getattr(args, "data", None)
                        else generate_dataset(config))
        from .data import split_entities
        train_ids, _ = split_entities([t.entity_id for t in trajectories],
                                      config.train_fraction, config.seed)
        keep = set(train_ids)
        model, log = train_plain_bc([t for t in trajectories if t.entity_id in keep],
                                    epochs=config.epochs, lr=config.learning_rate,
                                    hidden=config.hidden, seed=config.seed,
                                    domain_tag=config.domain,
                                    bptt_window=config.bptt_window,
                                    loss_kind=config.bc_loss_kind)
        out_dir = resolve_output_dir(config, "train-bc")
        ckpt.save_checkpoint(os.path.join(out_dir, "bc-checkpoint.json"), model, config)
        reports.write_table(os.path.join(out_dir, "train_log.tsv"),
                            [{"iteration": i + 1, "im": v} for i, v in enumerate(log.losses)])
        print(f"trained cloning baseline; checkpoint: "
              f"{os.path.join(out_dir, 'bc-checkpoint.json')}")
        return 0
    _train_prototype(config, args)
    return 0


def _load_models(args):
    bundle = ckpt.load_checkpoint(args.checkpoint)
    bc_model = None
    if getattr(args, "bc_checkpoint", None):
        bc_bundle = ckpt.load_checkpoint(args.bc_checkpoint)
        if bc_bundle.kind != "cloning":
            raise ConfigError("--bc-checkpoint must hold a cloning baseline")
        bc_model = bc_bundle.model
    return bundle, bc_model


def cmd_evaluate(args) -> int:
    bundle, bc_model = _load_models(args)
    config = bundle.config
    out_dir = resolve_output_dir(config, "evaluate")
    if config.domain == "cloud":
        report = ev.evaluate_cloud(config, proto_model=bundle.model, bc_model=bc_model,
                                   hot_threshold=getattr(args, "eval_hot_threshold", None))
        risk_key, benefit_key = "hot_node_rate", "remain_cores"
    else:
        report = ev.evaluate_airline(config, proto_model=bundle.model, bc_model=bc_model)
        risk_key, benefit_key = "cost", "profit"
    reports.write_table(os.path.join(out_dir, "comparison.tsv"), report.rows)
    reports.save_metric_bars(report.rows, risk_key, benefit_key,
                             os.path.join(out_dir, "figures", "comparison.png"))
    _print_rows(report.rows)
    print(f"table: {os.path.join(out_dir, 'comparison.tsv')}")
    return 0


def cmd_sweep(args) -> int:
    config = _config_from_args(args)
    k_values = [int(x) for x in args.k_values.split(",")] if args.k_values else None
    seeds = [config.seed + i for i in range(args.n_seeds)]
    result = ev.sweep_prototypes(config, k_values=k_values, seeds=seeds,
                                 workers=args.workers)
    out_dir = resolve_output_dir(config, "sweep")
    reports.write_table(os.path.join(out_dir, "sweep_runs.tsv"), result["runs"])
    reports.write_table(os.path.join(out_dir, "sweep_summary.tsv"), result["summary"])
    reports.save_sweep_figure(result["summary"],
                              os.path.join(out_dir, "figures", "sweep.png"))
    _print_rows(result["summary"])
    print(f"selected K = {result['selected_k']}")
    return 0


def cmd_pressure(args) -> int:
    bundle, bc_model = _load_models(args)
    if bc_model is None:
        raise ConfigError("pressure needs --bc-checkpoint for the comparison")
    rows = ev.pressure_test(bundle.config, args.pressure_threshold, bundle.model, bc_model)
    out_dir = resolve_output_dir(bundle.config, "pressure")
    reports.write_table(os.path.join(out_dir, "pressure.tsv"), rows)
    _print_rows(rows)
    return 0


def cmd_serve(args) -> int:
    config = _config_from_args(args)
    if getattr(args, "feedback_source", None) is None:
        config.hitl.feedback_source = "interactive"
    gateway = Gateway()
    server = GatewayServer(gateway, host=args.host, port=args.port).start()
    print(f"gateway listening on {server.address}")
    try:
        _train_prototype(config, args, gateway=gateway)
        time.sleep(args.linger)
    finally:
        server.stop()
    return 0


def cmd_oracle(args) -> int:
    rules = OracleRules()
    if args.rules:
        with open(args.rules) as f:
            rules = OracleRules.from_dict(yaml.safe_load(f) or {})
    summary = run_oracle(args.url, rules, poll_seconds=args.poll)
    print(json.dumps(summary))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oversub",
        description="prototype-based imitation learning for oversubscription")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate an expert dataset")
    _add_config_flags(p)
    p.add_argument("--out", help="dataset JSONL path")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("train", help="train the prototype policy (or a baseline)")
    _add_config_flags(p)
    p.add_argument("--data", help="trajectory JSONL (defaults to regenerating)")
    p.add_argument("--baseline", choices=("prototype", "bc"), default="prototype")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint against the baselines")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bc-checkpoint", dest="bc_checkpoint")
    p.add_argument("--hot-threshold", type=float, dest="eval_hot_threshold",
                   help="override the hot threshold for this evaluation")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("sweep", help="prototype-count sweep")
    _add_config_flags(p)
    p.add_argument("--k-values", dest="k_values", help="comma-separated, default 2..6")
    p.add_argument("--n-seeds", type=int, default=5, dest="n_seeds")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("pressure", help="re-evaluate under a lowered hot threshold")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bc-checkpoint", dest="bc_checkpoint", required=True)
    p.add_argument("--hot-threshold", type=float, default=0.30, dest="pressure_threshold")
    p.set_defaults(fn=cmd_pressure)

    p = sub.add_parser("serve", help="train with the HTTP feedback gateway attached")
    _add_config_flags(p)
    p.add_argument("--data", help="trajectory JSONL (defaults to regenerating)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)
    p.add_argument("--linger", type=float, default=2.0,
                   help="seconds to keep serving after training completes")
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("oracle", help="run scripted feedback against a serve instance")
    p.add_argument("--url", default="http://127.0.0.1:8321")
    p.add_argument("--rules", help="YAML rule table")
    p.add_argument("--poll", type=float, default=0.2)
    p.set_defaults(fn=cmd_oracle)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except OversubError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
