"""Prototype layer: trainable embeddings with clustering, diversity and
anchoring losses, plus the nearest-expert projection that makes each
prototype explainable by a real trajectory.

Cluster assignment and nearest-expert selection are hard argmins evaluated
outside the graph and held constant within an iteration; gradients flow
through the distances to whichever targets are currently selected.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .encoder import Trajectory
from .errors import ContractViolation
from .numerics import Tensor, take_rows


@dataclass
class PrototypeSet:
    """K trainable embeddings with persistent ids and cluster bookkeeping.

    ``ids`` survive merges/splits so cumulative feedback can be tracked per
    prototype; ``next_id`` hands out fresh ids for structural edits.
    """

    embeddings: Tensor                      # (K, m), requires_grad
    ids: list[int]
    nearest_expert: list[int] = field(default_factory=list)
    member_sets: list[list[str]] = field(default_factory=list)
    next_id: int = 0

    @classmethod
    def init_from_experts(cls, expert_embeddings: np.ndarray, k: int,
                          rng: np.random.Generator) -> "PrototypeSet":
        """Seed prototypes at the embeddings of K distinct expert trajectories."""
        n = len(expert_embeddings)
        if k < 1 or k > n:
            raise ContractViolation(f"need 1 <= K <= {n}, got {k}")
        picks = rng.choice(n, size=k, replace=False)
        emb = Tensor(expert_embeddings[np.sort(picks)].copy(), requires_grad=True)
        return cls(embeddings=emb, ids=list(range(k)),
                   nearest_expert=[int(i) for i in np.sort(picks)],
                   member_sets=[[] for _ in range(k)], next_id=k)

    @property
    def k(self) -> int:
        return self.embeddings.shape[0]

    @property
    def width(self) -> int:
        return self.embeddings.shape[1]

    def index_of(self, proto_id: int) -> int:
        try:
            return self.ids.index(proto_id)
        except ValueError:
            raise ContractViolation(f"unknown prototype id {proto_id}") from None

    def member_counts(self) -> list[int]:
        return [len(m) for m in self.member_sets]

    def pairwise_distances(self) -> np.ndarray:
        """Euclidean distances (not squared) between prototype embeddings."""
        p = self.embeddings.data
        diff = p[:, None, :] - p[None, :, :]
        return np.sqrt((diff * diff).sum(axis=2))


def assign(embeddings: np.ndarray, protos: PrototypeSet) -> np.ndarray:
    """Nearest prototype per embedding; ties go to the lowest index."""
    if protos.k == 0:
        raise ContractViolation("cannot assign against an empty prototype set")
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[1] != protos.width:
        raise ContractViolation("embedding width does not match prototypes")
    d2 = squared_distances(embeddings, protos.embeddings.data)
    return d2.argmin(axis=1)


def squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs squared Euclidean distances, (n, m) x (k, m) -> (n, k)."""
    aa = (a * a).sum(axis=1)[:, None]
    bb = (b * b).sum(axis=1)[None, :]
    return np.maximum(aa - 2.0 * (a @ b.T) + bb, 0.0)


def update_members(protos: PrototypeSet, entity_ids: list[str], assignment: np.ndarray) -> None:
    """Replace member sets from a fresh assignment (a partition by construction)."""
    members: list[list[str]] = [[] for _ in range(protos.k)]
    for eid, k in zip(entity_ids, assignment):
        members[int(k)].append(eid)
    protos.member_sets = members


def loss_rep(protos: PrototypeSet, embeddings: Tensor, assignment: np.ndarray,
             gates: np.ndarray | None = None) -> Tensor:
    """Clustering pull: mean over prototypes of the mean squared distance to
    their members.  Empty clusters contribute 0 so the loss stays total.

    ``gates`` optionally scales each prototype's cluster term (advice gates).
    """
    k = protos.k
    total: Tensor | float = 0.0
    for j in range(k):
        idx = np.nonzero(assignment == j)[0]
        if idx.size == 0:
            continue
        member = take_rows(embeddings, idx)
        p_j = protos.embeddings[j]
        term = (member - p_j).square().sum() * (1.0 / idx.size)
        if gates is not None:
            term = term * float(gates[j])
        total = term + total
    if isinstance(total, float):
        return Tensor(0.0)
    return total * (1.0 / k)


def loss_div(protos: PrototypeSet, pair_gates: np.ndarray | None = None) -> Tensor:
    """Diversity pressure: negative mean squared distance over prototype pairs."""
    k = protos.k
    if k < 2:
        warnings.warn("diversity loss undefined for K<2; returning 0", stacklevel=2)
        return Tensor(0.0)
    p = protos.embeddings
    sq = (p * p).sum(axis=1)
    d2 = sq.reshape(k, 1) + sq.reshape(1, k) - 2.0 * (p @ p.T)
    mask = np.triu(np.ones((k, k)), k=1)
    if pair_gates is not None:
        mask = mask * pair_gates
    pairs = math.comb(k, 2)
    return (d2 * mask).sum() * (-1.0 / pairs)


def loss_int(protos: PrototypeSet, expert_embeddings: Tensor,
             gates: np.ndarray | None = None) -> tuple[Tensor, list[int]]:
    """Anchor each prototype to its nearest expert embedding.

    Returns the loss and the refreshed nearest-expert indices (selection is a
    hard argmin over current values; gradient flows through the distance).
    """
    if expert_embeddings.shape[0] == 0:
        raise ContractViolation("expert embedding list must be non-empty")
    d2 = squared_distances(protos.embeddings.data, expert_embeddings.data)
    nearest = d2.argmin(axis=1)
    anchors = take_rows(expert_embeddings, nearest)
    per_proto = (protos.embeddings - anchors).square().sum(axis=1)
    if gates is not None:
        per_proto = per_proto * Tensor(np.asarray(gates, dtype=np.float64))
    loss = per_proto.sum() * (1.0 / protos.k)
    return loss, [int(i) for i in nearest]


def project_explanations(protos: PrototypeSet, expert_trajectories: list[Trajectory]) -> list[Trajectory]:
    """The real trajectories behind each prototype (for display)."""
    if len(protos.nearest_expert) != protos.k:
        raise ContractViolation("nearest_expert indices are stale")
    return [expert_trajectories[i] for i in protos.nearest_expert]
