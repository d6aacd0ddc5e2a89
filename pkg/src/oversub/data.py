"""Dataset I/O: trajectories as line-delimited JSON records.

One object per line: {"entity_id", "t", "state", "action", "domain_tag"}.
The final step of a prefix-only trajectory carries action null.
"""

from __future__ import annotations

import json
import math
import os

import numpy as np

from .encoder import Trajectory
from .errors import ContractViolation


def write_trajectories(path: str, trajectories: list[Trajectory]) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        for traj in trajectories:
            for t in range(len(traj)):
                action = traj.actions[t]
                row = {
                    "entity_id": traj.entity_id,
                    "t": t,
                    "state": [float(x) for x in traj.states[t]],
                    "action": None if math.isnan(action) else float(action),
                    "domain_tag": traj.domain_tag,
                }
                f.write(json.dumps(row) + "\n")


def read_trajectories(path: str) -> list[Trajectory]:
    by_entity: dict[str, list[dict]] = {}
    order: list[str] = []
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise ContractViolation(f"{path}:{line_no}: bad JSON record: {e}") from e
            eid = row["entity_id"]
            if eid not in by_entity:
                by_entity[eid] = []
                order.append(eid)
            by_entity[eid].append(row)
    out: list[Trajectory] = []
    for eid in order:
        rows = sorted(by_entity[eid], key=lambda r: r["t"])
        states = np.array([r["state"] for r in rows], dtype=np.float64)
        actions = np.array([np.nan if r["action"] is None else r["action"] for r in rows])
        out.append(Trajectory(entity_id=eid, states=states, actions=actions,
                              domain_tag=rows[0].get("domain_tag", "cloud")))
    return out


def split_entities(entity_ids: list[str], train_fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Seeded 80/20-style split by entity id; at least one entity per side."""
    if len(entity_ids) < 2:
        raise ContractViolation("need at least two entities to split")
    rng = np.random.default_rng(seed)
    shuffled = list(entity_ids)
    rng.shuffle(shuffled)
    n_train = min(max(int(round(train_fraction * len(shuffled))), 1), len(shuffled) - 1)
    return sorted(shuffled[:n_train]), sorted(shuffled[n_train:])
