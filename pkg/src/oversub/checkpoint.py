"""Checkpointing: a self-describing JSON archive with bit-exact floats.

Python's JSON writer emits the shortest decimal that round-trips each
float64 exactly, so parameters reload to identical bits; an explicit
``format_version`` guards future layout changes.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .baselines import BCModel, MLPHead
from .config import ExperimentConfig
from .encoder import EncoderParams, FeatureScaler
from .errors import ContractViolation
from .hitl import FeedbackLedger
from .numerics import Tensor
from .policy import PolicyHead, PolicyModel
from .prototypes import PrototypeSet

FORMAT_VERSION = 1


def _encoder_to_dict(enc: EncoderParams) -> dict:
    return {"d": enc.d, "m": enc.m,
            "weights": {name: p.data.tolist()
                        for name, p in zip(enc.parameter_names(), enc.parameters())}}


def _encoder_from_dict(d: dict) -> EncoderParams:
    enc = EncoderParams(d=d["d"], m=d["m"], seed=0)
    for name in enc.parameter_names():
        arr = np.array(d["weights"][name], dtype=np.float64)
        tensor = getattr(enc, name)
        if arr.shape != tensor.data.shape:
            raise ContractViolation(f"checkpoint weight {name} has shape {arr.shape}")
        tensor.data = arr
    return enc


@dataclass
class CheckpointBundle:
    kind: str                                  # prototype | cloning
    model: object                              # PolicyModel | BCModel
    config: ExperimentConfig
    ledger: FeedbackLedger
    rng_state: dict | None
    stats: dict


def save_checkpoint(path: str, model: PolicyModel | BCModel, config: ExperimentConfig,
                    ledger: FeedbackLedger | None = None, rng_state: dict | None = None,
                    stats: dict | None = None) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    ledger = ledger or FeedbackLedger()
    doc: dict = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "domain_tag": model.domain_tag,
        "rng_state": rng_state,
        "stats": stats or {},
        "scaler": None if model.scaler is None else
            {"mean": model.scaler.mean.tolist(), "std": model.scaler.std.tolist()},
        "encoder": _encoder_to_dict(model.encoder),
        "ledger": {
            "proto_votes": [[k, v] for k, v in sorted(ledger.proto_votes.items())],
            "pair_votes": [[list(k), v] for k, v in sorted(ledger.pair_votes.items())],
            "action_votes": [[list(k), v] for k, v in sorted(ledger.action_votes.items())],
            "last_seq": ledger.last_seq,
        },
    }
    if isinstance(model, PolicyModel):
        doc["kind"] = "prototype"
        doc["prototypes"] = {
            "ids": model.protos.ids,
            "next_id": model.protos.next_id,
            "embeddings": model.protos.embeddings.data.tolist(),
            "nearest_expert": model.protos.nearest_expert,
            "member_sets": model.protos.member_sets,
        }
        doc["head"] = {"b": model.head.b.data.tolist(), "bias": float(model.head.bias.data)}
    elif isinstance(model, BCModel):
        doc["kind"] = "cloning"
        doc["head"] = {"w1": model.head.w1.data.tolist(), "b1": model.head.b1.data.tolist(),
                       "w2": model.head.w2.data.tolist(), "b2": float(model.head.b2.data)}
    else:
        raise ContractViolation(f"cannot checkpoint {type(model).__name__}")
    with open(path, "w") as f:
        json.dump(doc, f)


def load_checkpoint(path: str) -> CheckpointBundle:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ContractViolation(f"unsupported checkpoint version {doc.get('format_version')}")
    config = ExperimentConfig.from_dict(doc["config"])
    encoder = _encoder_from_dict(doc["encoder"])
    scaler = None
    if doc["scaler"] is not None:
        scaler = FeatureScaler(mean=np.array(doc["scaler"]["mean"]),
                               std=np.array(doc["scaler"]["std"]))
    led = doc["ledger"]
    ledger = FeedbackLedger(
        proto_votes={int(k): int(v) for k, v in led["proto_votes"]},
        pair_votes={tuple(int(x) for x in k): int(v) for k, v in led["pair_votes"]},
        action_votes={tuple(int(x) for x in k): int(v) for k, v in led["action_votes"]},
        last_seq=int(led["last_seq"]),
    )
    if doc["kind"] == "prototype":
        pd = doc["prototypes"]
        protos = PrototypeSet(
            embeddings=Tensor(np.array(pd["embeddings"], dtype=np.float64), requires_grad=True),
            ids=[int(i) for i in pd["ids"]],
            nearest_expert=[int(i) for i in pd["nearest_expert"]],
            member_sets=[list(m) for m in pd["member_sets"]],
            next_id=int(pd["next_id"]),
        )
        head = PolicyHead(k=protos.k, seed=0)
        head.b = Tensor(np.array(doc["head"]["b"], dtype=np.float64), requires_grad=True)
        head.bias = Tensor(float(doc["head"]["bias"]), requires_grad=True)
        model: PolicyModel | BCModel = PolicyModel(
            encoder=encoder, protos=protos, head=head, scaler=scaler,
            domain_tag=doc["domain_tag"])
    elif doc["kind"] == "cloning":
        hd = doc["head"]
        head = MLPHead(m=encoder.m, hidden=len(hd["b1"]), seed=0)
        head.w1 = Tensor(np.array(hd["w1"], dtype=np.float64), requires_grad=True)
        head.b1 = Tensor(np.array(hd["b1"], dtype=np.float64), requires_grad=True)
        head.w2 = Tensor(np.array(hd["w2"], dtype=np.float64), requires_grad=True)
        head.b2 = Tensor(float(hd["b2"]), requires_grad=True)
        model = BCModel(encoder=encoder, head=head, scaler=scaler, domain_tag=doc["domain_tag"])
    else:
        raise ContractViolation(f"unknown checkpoint kind {doc['kind']!r}")
    return CheckpointBundle(kind=doc["kind"], model=model, config=config, ledger=ledger,
                            rng_state=doc.get("rng_state"), stats=doc.get("stats", {}))
