import json
import os
import subprocess
import sys

import numpy as np
import pytest

from oversub.checkpoint import load_checkpoint, save_checkpoint
from oversub.config import (ExperimentConfig, load_config, output_root,
                            resolve_output_dir)
from oversub.data import read_trajectories, split_entities, write_trajectories
from oversub.encoder import Trajectory
from oversub.errors import ConfigError
from oversub.hitl import FeedbackLedger
from oversub.policy import act
from oversub.train import Trainer, generate_dataset


def small_config(**over):
    sim = {"services": 8, "nodes": 4, "hours": 72, "airlines": 6, "years": 4}
    sim.update(over.pop("sim", {}))
    hitl = {"warmup": 10, "frequency": 5}
    hitl.update(over.pop("hitl", {}))
    return ExperimentConfig(domain=over.pop("domain", "cloud"), epochs=over.pop("epochs", 12),
                            sim=sim, hitl=hitl, **over)


# -- config ---------------------------------------------------------------------


def test_defaults_match_reference_settings():
    cfg = ExperimentConfig()
    assert cfg.learning_rate == 1e-2
    assert cfg.hidden == 64
    assert cfg.batch_size == 128
    assert cfg.epochs == 300
    assert (cfg.w1, cfg.w2, cfg.w3, cfg.w4) == (0.8, 0.1, 0.1, 1.0)
    assert cfg.resolved_k == 3
    assert ExperimentConfig(domain="airline").resolved_k == 4
    assert cfg.hitl.u_p == cfg.hitl.u_a == 0.55
    assert cfg.hitl.n_top == 5
    assert cfg.hitl.frequency == 10
    assert cfg.hitl.shadow_iterations == 30


def test_config_hash_changes_with_any_field():
    base = ExperimentConfig()
    assert base.hash() == ExperimentConfig().hash()
    assert ExperimentConfig(seed=1).hash() != base.hash()
    assert ExperimentConfig(hitl={"frequency": 11}).hash() != base.hash()
    assert ExperimentConfig(sim={"services": 31}).hash() != base.hash()


def test_config_validation_errors():
    with pytest.raises(ConfigError):
        ExperimentConfig(domain="space")
    with pytest.raises(ConfigError):
        ExperimentConfig(w1=1.5)
    with pytest.raises(ConfigError):
        ExperimentConfig(epochs=0)
    with pytest.raises(ConfigError):
        ExperimentConfig(hitl={"feedback_source": "psychic"})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"banana": 1})


def test_yaml_file_and_overrides(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("domain: airline\nepochs: 40\nhitl:\n  frequency: 7\n")
    cfg = load_config(str(path), {"epochs": 55, "hitl.u_p": 0.6})
    assert cfg.domain == "airline"
    assert cfg.epochs == 55          # flag wins over file
    assert cfg.hitl.frequency == 7   # file value preserved
    assert cfg.hitl.u_p == 0.6


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv("OVERSUB_OUTPUT_ROOT", str(tmp_path))
    assert output_root() == str(tmp_path)
    cfg = ExperimentConfig()
    assert resolve_output_dir(cfg).startswith(str(tmp_path))


# -- dataset I/O -------------------------------------------------------------------


def test_jsonl_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    trajs = [Trajectory(f"e{i}", rng.normal(size=(5, 3)), rng.uniform(0, 1, 5),
                        domain_tag="cloud") for i in range(3)]
    trajs[1].actions[-1] = np.nan
    path = str(tmp_path / "d.jsonl")
    write_trajectories(path, trajs)
    back = read_trajectories(path)
    assert [t.entity_id for t in back] == [t.entity_id for t in trajs]
    for a, b in zip(trajs, back):
        assert np.array_equal(a.states, b.states)
        assert np.array_equal(np.isnan(a.actions), np.isnan(b.actions))
        mask = ~np.isnan(a.actions)
        assert np.array_equal(a.actions[mask], b.actions[mask])


def test_jsonl_records_shape(tmp_path):
    trajs = [Trajectory("x", np.zeros((2, 2)), np.array([0.5, 0.25]))]
    path = str(tmp_path / "d.jsonl")
    write_trajectories(path, trajs)
    rows = [json.loads(line) for line in open(path)]
    assert rows[0] == {"entity_id": "x", "t": 0, "state": [0.0, 0.0],
                       "action": 0.5, "domain_tag": "cloud"}


def test_split_is_seeded_and_partition():
    ids = [f"e{i}" for i in range(10)]
    a_train, a_test = split_entities(ids, 0.8, seed=3)
    b_train, b_test = split_entities(ids, 0.8, seed=3)
    assert (a_train, a_test) == (b_train, b_test)
    assert sorted(a_train + a_test) == sorted(ids)
    assert len(a_train) == 8
    c_train, _ = split_entities(ids, 0.8, seed=4)
    assert c_train != a_train  # overwhelmingly likely under reseeding


# -- checkpoint ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained():
    cfg = small_config(hitl={"feedback_source": "none"})
    trajs = generate_dataset(cfg)
    trainer = Trainer(cfg, trajs)
    result = trainer.run()
    return cfg, trajs, result


def test_checkpoint_round_trip_bit_exact(tmp_path, trained):
    cfg, trajs, result = trained
    path = str(tmp_path / "ckpt.json")
    ledger = FeedbackLedger(proto_votes={0: 2}, pair_votes={(0, 1): -1},
                            action_votes={(0, 5): 1}, last_seq=3)
    save_checkpoint(path, result.model, cfg, ledger=ledger, rng_state=result.rng_state,
                    stats={"effective_iterations": result.effective_iterations})
    bundle = load_checkpoint(path)
    assert bundle.kind == "prototype"
    assert bundle.config.hash() == cfg.hash()
    assert bundle.ledger.proto_votes == {0: 2}
    assert bundle.ledger.pair_votes == {(0, 1): -1}
    for p, q in zip(result.model.parameters(), bundle.model.parameters()):
        assert np.array_equal(p.data, q.data)
    rng = np.random.default_rng(9)
    for traj in trajs[:3]:
        k = int(rng.integers(1, len(traj)))
        prefix = traj.prefix(k)
        assert act(prefix, bundle.model) == act(prefix, result.model)


def test_checkpoint_rejects_future_version(tmp_path, trained):
    cfg, _, result = trained
    path = str(tmp_path / "ckpt.json")
    save_checkpoint(path, result.model, cfg)
    doc = json.load(open(path))
    doc["format_version"] = 99
    json.dump(doc, open(path, "w"))
    from oversub.errors import ContractViolation
    with pytest.raises(ContractViolation):
        load_checkpoint(path)


def test_bc_checkpoint_round_trip(tmp_path):
    from oversub.baselines import train_plain_bc
    cfg = small_config()
    trajs = generate_dataset(cfg)[:4]
    model, _ = train_plain_bc(trajs, epochs=3, hidden=8, seed=0)
    path = str(tmp_path / "bc.json")
    save_checkpoint(path, model, cfg)
    bundle = load_checkpoint(path)
    assert bundle.kind == "cloning"
    for p, q in zip(model.parameters(), bundle.model.parameters()):
        assert np.array_equal(p.data, q.data)


# -- trainer behaviour ----------------------------------------------------------------


def test_training_is_deterministic():
    cfg = small_config()
    trajs = generate_dataset(cfg)
    a = Trainer(cfg, trajs).run()
    b = Trainer(cfg, trajs).run()
    assert [r.total for r in a.log] == [r.total for r in b.log]
    assert np.array_equal(a.model.protos.embeddings.data, b.model.protos.embeddings.data)
    assert a.queries_published == b.queries_published


def test_gate_identity_with_silent_feedback():
    cfg_none = small_config(hitl={"feedback_source": "none"})
    cfg_off = small_config(hitl={"enabled": False})
    trajs = generate_dataset(cfg_none)
    silent = Trainer(cfg_none, trajs).run()
    disabled = Trainer(cfg_off, trajs).run()
    assert [r.total for r in silent.log] == [r.total for r in disabled.log]


def test_effective_iterations_account_for_edits():
    cfg = small_config()
    trajs = generate_dataset(cfg)
    result = Trainer(cfg, trajs).run()
    assert result.effective_iterations == cfg.epochs + 30 * len(result.edits)


def test_divergence_aborts_with_numeric_error(tmp_path):
    cfg = small_config()
    trajs = generate_dataset(cfg)
    trainer = Trainer(cfg, trajs)
    # poison the prototypes so squared distances overflow to infinity
    trainer.model.protos.embeddings.data = trainer.model.protos.embeddings.data * 1e200
    from oversub.errors import NumericError
    with pytest.raises(NumericError):
        trainer.run()


# -- CLI ----------------------------------------------------------------------------


def run_cli(args, env_extra=None):
    env = dict(os.environ)
    env.update(env_extra or {})
    return subprocess.run([sys.executable, "-m", "oversub.cli", *args],
                          capture_output=True, text=True, env=env)


def test_cli_exit_codes(tmp_path):
    bad = run_cli(["train", "--domain", "asteroid"])
    assert bad.returncode == 2
    missing = run_cli(["train", "--config", str(tmp_path / "nope.yaml")])
    assert missing.returncode == 2


def test_cli_simulate_and_train_smoke(tmp_path):
    out = str(tmp_path / "ds.jsonl")
    env = {"OVERSUB_OUTPUT_ROOT": str(tmp_path / "runs")}
    r = run_cli(["simulate", "--services", "6", "--nodes", "3", "--hours", "48",
                 "--out", out], env)
    assert r.returncode == 0, r.stderr
    assert os.path.exists(out)
    r = run_cli(["train", "--services", "6", "--nodes", "3", "--hours", "48",
                 "--epochs", "5", "--data", out, "--feedback-source", "none",
                 "--output-dir", str(tmp_path / "run1")], env)
    assert r.returncode == 0, r.stderr
    ckpt = str(tmp_path / "run1" / "checkpoint.json")
    assert os.path.exists(ckpt)
    assert os.path.exists(str(tmp_path / "run1" / "figures" / "loss_curves.png"))
    r = run_cli(["evaluate", "--checkpoint", ckpt], env)
    assert r.returncode == 0, r.stderr
    assert "prototype-imitation" in r.stdout
