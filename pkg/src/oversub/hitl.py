"""Human-in-the-loop machinery.

Training periodically publishes a QuerySet: prototypes that look unstable
(high cluster entropy and large member distances), predicted actions that
look risky or uncertain, and close prototype pairs that may be redundant.
Feedback arrives as up/down votes, merges and splits; votes accumulate in a
ledger whose cumulative totals drive multiplicative advice gates on the
loss, while merges and splits edit the prototype structure directly.

A scripted oracle turns QuerySets into deterministic feedback from a small
rule table so the whole loop can run unattended.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ContractViolation, ReplayError
from .numerics import Tensor, shannon_entropy, softmax
from .policy import PolicyModel
from .prototypes import assign, squared_distances, update_members

LN2 = math.log(2.0)


# -- uncertainty measures ------------------------------------------------------


def prototype_uncertainty(member_sq_dists: np.ndarray) -> float:
    """Cluster entropy of one prototype, in [0, 1].

    Member squared distances are turned into a probability vector with a
    softmax of their negatives (temperature 1); the Shannon entropy of that
    vector is normalised by ln(cluster size).  Singleton or empty clusters
    score 0.
    """
    d = np.asarray(member_sq_dists, dtype=np.float64)
    if d.size <= 1:
        return 0.0
    p = softmax(-d)
    return float(shannon_entropy(p) / math.log(d.size))


def action_uncertainty(a: float) -> float:
    """Normalised Bernoulli entropy of a predicted rate, in [0, 1]."""
    if a <= 0.0 or a >= 1.0:
        return 0.0
    return float(-(a * math.log(a) + (1.0 - a) * math.log(1.0 - a)) / LN2)


# -- query construction --------------------------------------------------------


@dataclass
class PrototypeQuery:
    id: int
    mu: float
    mean_dist: float
    members: int
    risk_fraction: float = 0.0


@dataclass
class ActionQuery:
    traj: str
    step: int
    a: float
    a_expert: float
    mu: float
    risk: bool


@dataclass
class QuerySet:
    iteration: int
    prototype_queries: list[PrototypeQuery] = field(default_factory=list)
    action_queries: list[ActionQuery] = field(default_factory=list)
    suggested_merges: list[tuple[int, int]] = field(default_factory=list)
    merge_distances: list[float] = field(default_factory=list)  # parallel to suggested_merges

    def is_empty(self) -> bool:
        return not (self.prototype_queries or self.action_queries or self.suggested_merges)

    def to_wire(self) -> dict:
        return {
            "prototypes": [q.id for q in self.prototype_queries],
            "actions": [{"traj": q.traj, "step": int(q.step), "a": q.a,
                         "a_expert": q.a_expert, "risk": q.risk}
                        for q in self.action_queries],
            "merge_suggestions": [[int(i), int(j)] for i, j in self.suggested_merges],
        }


@dataclass
class TrainerQueryStats:
    """Per-iteration diagnostics the query builder works from."""

    iteration: int
    proto_ids: list[int]
    mu: np.ndarray                 # (K,)
    mean_dist: np.ndarray          # (K,) mean squared member distance
    members: np.ndarray            # (K,) member counts
    risk_fraction: np.ndarray      # (K,) share of member steps with a < a_expert
    pair_distance: np.ndarray      # (K, K) embedding distances
    action_rows: list[ActionQuery]  # every prefix row's diagnostics


def build_query(stats: TrainerQueryStats, u_p: float, u_a: float, n_top: int,
                suggestion_percentile: float = 10.0, max_actions: int = 10) -> QuerySet:
    """Assemble the QuerySet for one iteration.

    Prototype queries are the uncertain set (mu >= u_p) intersected with the
    top-N prototypes by mean member distance, ordered by descending
    uncertainty.  Action queries are risky predictions (below the expert)
    whose uncertainty also clears u_a, capped at ``max_actions``.  Merge
    suggestions are pairs closer than the given percentile of all pairwise
    prototype distances.
    """
    k = len(stats.proto_ids)
    order_by_dist = sorted(range(k), key=lambda j: (-stats.mean_dist[j], stats.proto_ids[j]))
    top_n = set(order_by_dist[:n_top])
    # singleton/empty clusters carry no uncertainty signal and are never queried
    chosen = [j for j in range(k)
              if stats.members[j] >= 2 and stats.mu[j] >= u_p and j in top_n]
    chosen.sort(key=lambda j: (-stats.mu[j], stats.proto_ids[j]))
    proto_queries = [PrototypeQuery(id=stats.proto_ids[j], mu=float(stats.mu[j]),
                                    mean_dist=float(stats.mean_dist[j]),
                                    members=int(stats.members[j]),
                                    risk_fraction=float(stats.risk_fraction[j]))
                     for j in chosen]

    flagged = [r for r in stats.action_rows if r.mu >= u_a or r.risk]
    flagged.sort(key=lambda r: (not r.risk, -r.mu, r.traj, r.step))
    action_queries = flagged[:max_actions]

    merges: list[tuple[int, int]] = []
    distances: list[float] = []
    if k >= 2:
        iu = np.triu_indices(k, 1)
        vals = stats.pair_distance[iu]
        cutoff = float(np.percentile(vals, suggestion_percentile))
        for a_idx, b_idx, d in sorted(zip(iu[0], iu[1], vals), key=lambda t: t[2]):
            if d < cutoff:
                merges.append((stats.proto_ids[int(a_idx)], stats.proto_ids[int(b_idx)]))
                distances.append(float(d))
    return QuerySet(iteration=stats.iteration, prototype_queries=proto_queries,
                    action_queries=action_queries, suggested_merges=merges,
                    merge_distances=distances)


# -- feedback ledger -----------------------------------------------------------


@dataclass
class FeedbackEvent:
    """A validated, resolved feedback event.

    ``target`` is one of ("proto", id), ("pair", i, j) with i < j, or
    ("action", proto_id, decile).  Merge targets are ("pair", i, j); split
    targets ("proto", id).
    """

    seq: int
    kind: str                      # up | down | merge | split
    target: tuple
    iteration: int = 0

    def __post_init__(self):
        if self.kind not in ("up", "down", "merge", "split"):
            raise ContractViolation(f"unknown feedback kind {self.kind!r}")
        if self.kind == "merge" and (self.target[0] != "pair" or self.target[1] == self.target[2]):
            raise ContractViolation("merge requires two distinct prototype ids")
        if self.kind == "split" and self.target[0] != "proto":
            raise ContractViolation("split targets a single prototype")


@dataclass
class FeedbackLedger:
    """Cumulative vote totals per prototype, prototype pair and action bucket."""

    proto_votes: dict[int, int] = field(default_factory=dict)
    pair_votes: dict[tuple[int, int], int] = field(default_factory=dict)
    action_votes: dict[tuple[int, int], int] = field(default_factory=dict)
    last_seq: int = 0
    history: list[FeedbackEvent] = field(default_factory=list)

    def record(self, event: FeedbackEvent) -> FeedbackEvent:
        """Validate ordering and fold votes into the cumulative totals.

        Merge/split events are sequence-checked and logged here but applied
        by the caller (they mutate model structure, not the ledger).
        """
        if event.seq <= self.last_seq:
            raise ReplayError(f"sequence {event.seq} already seen (last={self.last_seq})")
        self.last_seq = event.seq
        self.history.append(event)
        if event.kind in ("up", "down"):
            delta = 1 if event.kind == "up" else -1
            kind = event.target[0]
            if kind == "proto":
                key = event.target[1]
                self.proto_votes[key] = self.proto_votes.get(key, 0) + delta
            elif kind == "pair":
                key = tuple(sorted(event.target[1:3]))
                self.pair_votes[key] = self.pair_votes.get(key, 0) + delta
            elif kind == "action":
                key = (event.target[1], event.target[2])
                self.action_votes[key] = self.action_votes.get(key, 0) + delta
            else:
                raise ContractViolation(f"unknown vote target {event.target!r}")
        return event

    def is_empty(self) -> bool:
        return not (any(self.proto_votes.values()) or any(self.pair_votes.values())
                    or any(self.action_votes.values()))

    # gate lookups -------------------------------------------------------

    def proto_gates(self, proto_ids: list[int]) -> np.ndarray:
        return np.array([advice_gate(self.proto_votes.get(pid, 0)) for pid in proto_ids])

    def pair_gates(self, proto_ids: list[int]) -> np.ndarray:
        k = len(proto_ids)
        g = np.ones((k, k))
        for i in range(k):
            for j in range(i + 1, k):
                key = tuple(sorted((proto_ids[i], proto_ids[j])))
                g[i, j] = g[j, i] = advice_gate(self.pair_votes.get(key, 0))
        return g

    def action_gate(self, bucket: tuple[int, int]) -> float:
        return advice_gate(self.action_votes.get(bucket, 0))


def record_feedback(ledger: FeedbackLedger, event: FeedbackEvent) -> FeedbackLedger:
    """Functional wrapper over ``FeedbackLedger.record``."""
    ledger.record(event)
    return ledger


def advice_gate(cumulative: float) -> float:
    """exp(-tanh(F)): neutral at 0, relaxes toward 1/e with approval,
    amplifies toward e with rejection."""
    return float(math.exp(-math.tanh(cumulative)))


# -- structural edits ----------------------------------------------------------


@dataclass
class StructuralEdit:
    kind: str                     # merge | split
    removed_ids: list[int]
    new_id: int
    shadow_iterations: int = 30


def apply_merge(model: PolicyModel, id_i: int, id_j: int,
                shadow_iterations: int = 30) -> StructuralEdit:
    """Replace prototypes i and j with one at the mean of their embeddings.

    The merged prototype gets a fresh id, the union of both member sets and
    the mean of the two head weights; K drops by one.
    """
    if id_i == id_j:
        raise ContractViolation("cannot merge a prototype with itself")
    protos, head = model.protos, model.head
    a, b = protos.index_of(id_i), protos.index_of(id_j)
    lo, hi = min(a, b), max(a, b)

    emb = protos.embeddings.data.copy()
    merged_row = 0.5 * (emb[a] + emb[b])
    new_emb = np.delete(emb, hi, axis=0)
    new_emb[lo] = merged_row

    weights = head.b.data.copy()
    merged_w = 0.5 * (weights[a] + weights[b])
    new_w = np.delete(weights, hi)
    new_w[lo] = merged_w

    new_id = protos.next_id
    protos.next_id += 1
    merged_members = protos.member_sets[a] + protos.member_sets[b]
    protos.member_sets = [m for idx, m in enumerate(protos.member_sets) if idx != hi]
    protos.member_sets[lo] = merged_members
    protos.nearest_expert = [n for idx, n in enumerate(protos.nearest_expert) if idx != hi]
    protos.ids = [pid for idx, pid in enumerate(protos.ids) if idx != hi]
    protos.ids[lo] = new_id
    protos.embeddings = Tensor(new_emb, requires_grad=True)
    head.b = Tensor(new_w, requires_grad=True)
    return StructuralEdit(kind="merge", removed_ids=[id_i, id_j], new_id=new_id,
                          shadow_iterations=shadow_iterations)


def apply_split(model: PolicyModel, id_k: int, finals: np.ndarray, entity_ids: list[str],
                shadow_iterations: int = 30) -> StructuralEdit:
    """Split a prototype: seed a new one at its farthest member's embedding.

    Requires at least two members.  All members are re-assigned by nearest
    prototype afterwards; the new head weight copies the parent's.
    """
    protos, head = model.protos, model.head
    idx = protos.index_of(id_k)
    members = protos.member_sets[idx]
    if len(members) < 2:
        raise ContractViolation(f"prototype {id_k} has fewer than 2 members; cannot split")
    id_to_row = {eid: i for i, eid in enumerate(entity_ids)}
    rows = np.array([id_to_row[eid] for eid in members], dtype=np.intp)
    d2 = squared_distances(finals[rows], protos.embeddings.data[idx][None, :])[:, 0]
    far_row = rows[int(d2.argmax())]

    new_id = protos.next_id
    protos.next_id += 1
    protos.embeddings = Tensor(np.vstack([protos.embeddings.data, finals[far_row][None, :]]),
                               requires_grad=True)
    head.b = Tensor(np.append(head.b.data, head.b.data[idx]), requires_grad=True)
    protos.ids = protos.ids + [new_id]
    protos.nearest_expert = protos.nearest_expert + [protos.nearest_expert[idx]]
    protos.member_sets = protos.member_sets + [[]]
    assignment = assign(finals, protos)
    update_members(protos, entity_ids, assignment)
    return StructuralEdit(kind="split", removed_ids=[], new_id=new_id,
                          shadow_iterations=shadow_iterations)


# -- scripted oracle -----------------------------------------------------------


@dataclass
class OracleRules:
    """Deterministic stand-in for the human operator.

    Thresholds express when to vote a queried prototype up or down, when a
    suggested merge is close enough to accept, when a split is warranted and
    how risky actions are treated.  ``risk_direction`` chooses which side of
    the expert action is unsafe in the current domain.
    """

    downvote_mu: float = 0.9
    upvote_mu: float = 0.25
    downvote_risk_fraction: float = 0.6
    split_mu: float = 2.0            # > 1 disables splitting
    split_min_members: int = 6
    merge_max_distance: float = 0.5
    merge_limit: int = 1
    merge_budget: int = 1
    suggestion_percentile: float = 10.0
    action_vote: str = "down"
    risk_direction: str = "below"    # below | above: which deviation endangers
    risk_margin: float = 0.02        # minimum deviation on the risk side to act on
    downvote_waste: bool = True      # also flag overshoot on the opposite side
    waste_margin: float = 0.05
    max_action_votes: int = 8

    @classmethod
    def from_dict(cls, d: dict) -> "OracleRules":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ContractViolation(f"unknown oracle rule keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class ScriptedOracle:
    """Applies the rule table to QuerySets; produces wire-format feedback."""

    def __init__(self, rules: OracleRules | None = None):
        self.rules = rules or OracleRules()
        self.merges_done = 0

    def decide(self, queries: QuerySet) -> list[dict]:
        """Wire feedback dicts (without sequence numbers) for one QuerySet."""
        r = self.rules
        out: list[dict] = []
        split_done = False
        for q in queries.prototype_queries:
            if (q.mu >= r.split_mu and q.members >= r.split_min_members and not split_done):
                out.append({"kind": "split", "target": [q.id]})
                split_done = True
            elif q.mu >= r.downvote_mu or q.risk_fraction >= r.downvote_risk_fraction:
                out.append({"kind": "down", "target": [q.id]})
            elif q.mu <= r.upvote_mu:
                out.append({"kind": "up", "target": [q.id]})

        merged_here = 0
        have_dist = len(queries.merge_distances) == len(queries.suggested_merges)
        for pos, pair in enumerate(queries.suggested_merges):
            if merged_here >= r.merge_limit or self.merges_done >= r.merge_budget:
                break
            if have_dist and queries.merge_distances[pos] > r.merge_max_distance:
                continue
            out.append({"kind": "merge", "target": [int(pair[0]), int(pair[1])]})
            merged_here += 1
            self.merges_done += 1

        voted = 0
        for aq in queries.action_queries:
            if voted >= r.max_action_votes:
                break
            shortfall = aq.a_expert - aq.a
            deviation = shortfall if r.risk_direction == "below" else -shortfall
            bad = deviation > r.risk_margin or (
                r.downvote_waste and -deviation > r.waste_margin)
            if bad:
                out.append({"kind": r.action_vote,
                            "target": {"traj": aq.traj, "step": int(aq.step)}})
                voted += 1
        return out
