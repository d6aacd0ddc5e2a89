"""Action head and training objectives.

The policy scores a trajectory embedding against every prototype with
negative squared Euclidean distance, feeds the similarity vector through a
linear layer with a bias, and squashes with a sigmoid; the output is the
oversubscription rate directly.

Because the similarities are quadratics in the embedding, the pre-sigmoid
logit collapses to a single quadratic form — ``quadratic_view`` exposes its
coefficients for introspection and the dashboard.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import (EncodedBatch, EncoderParams, FeatureScaler,
                      IncrementalEncoder, Trajectory, encode_batch, encode_data)
from .errors import ContractViolation
from .numerics import Tensor, concat, sigmoid
from .prototypes import PrototypeSet, assign, squared_distances

LOG_CLAMP = 1e-12


class PolicyHead:
    """Per-prototype linear weights plus a bias, sigmoid-activated."""

    def __init__(self, k: int, seed: int = 0, scale: float = 0.1):
        rng = np.random.default_rng(seed)
        self.b = Tensor(rng.uniform(-scale, scale, size=k), requires_grad=True)
        self.bias = Tensor(0.0, requires_grad=True)

    @property
    def k(self) -> int:
        return int(self.b.shape[0])

    def parameters(self) -> list[Tensor]:
        return [self.b, self.bias]


@dataclass
class PolicyModel:
    """Everything needed to act: encoder, prototypes, head, input scaling."""

    encoder: EncoderParams
    protos: PrototypeSet
    head: PolicyHead
    scaler: FeatureScaler | None = None
    domain_tag: str = "cloud"

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + [self.protos.embeddings] + self.head.parameters()

    def parameter_names(self) -> list[str]:
        return self.encoder.parameter_names() + ["prototypes", "head_b", "head_bias"]

    def validate(self) -> None:
        if self.encoder.m != self.protos.width:
            raise ContractViolation("encoder width does not match prototype width")
        if self.head.k != self.protos.k:
            raise ContractViolation("head width does not match prototype count")


def similarity(h: Tensor | np.ndarray, protos: PrototypeSet) -> Tensor:
    """Negative squared distance of one embedding to every prototype, (K,)."""
    h = h if isinstance(h, Tensor) else Tensor(h)
    if h.shape != (protos.width,):
        raise ContractViolation(f"embedding shape {h.shape} does not match prototype width")
    return -((protos.embeddings - h).square().sum(axis=1))


def policy_logits(embeddings: Tensor, protos: PrototypeSet, head: PolicyHead) -> Tensor:
    """Pre-sigmoid logits for a batch of embeddings, (N, m) -> (N,)."""
    n = embeddings.shape[0]
    p = protos.embeddings
    hh = (embeddings * embeddings).sum(axis=1).reshape(n, 1)
    hp = embeddings @ p.T
    pp = (p * p).sum(axis=1).reshape(1, protos.k)
    d2 = hh - 2.0 * hp + pp
    return (-d2) @ head.b + head.bias


def act(traj_prefix: Trajectory, model: PolicyModel) -> float:
    """Action in (0, 1) for a trajectory prefix; deterministic."""
    model.validate()
    traj = model.scaler.transform(traj_prefix) if model.scaler is not None else traj_prefix
    h = encode_data(traj, model.encoder)
    return act_from_embedding(h, model)


def act_from_embedding(h: np.ndarray, model: PolicyModel) -> float:
    d2 = squared_distances(h[None, :], model.protos.embeddings.data)[0]
    logit = float(-(d2 @ model.head.b.data) + model.head.bias.data)
    return float(sigmoid(logit))


class PolicyRunner:
    """Streaming rollout helper: one ``act`` per step in O(1) per step."""

    def __init__(self, model: PolicyModel):
        model.validate()
        self.model = model
        self.enc = IncrementalEncoder(model.encoder)

    def _scale(self, state: np.ndarray) -> np.ndarray:
        sc = self.model.scaler
        return (state - sc.mean) / sc.std if sc is not None else state

    def act(self, state: np.ndarray) -> float:
        """Action for the trajectory so far extended by ``state``."""
        h = self.enc.embed(self._scale(state))
        return act_from_embedding(h, self.model)

    def commit(self, state: np.ndarray, action: float) -> None:
        self.enc.advance(self._scale(state), action)


def imitation_terms(actions: Tensor, labels: np.ndarray,
                    row_gates: np.ndarray | None = None,
                    kind: str = "cross_entropy") -> Tensor:
    """Per-step imitation penalties (a vector; callers reduce).

    cross_entropy: soft-label form with log arguments clamped at 1e-12.
    squared_error: the ablation variant.  ``row_gates`` scales step terms.
    """
    y = np.asarray(labels, dtype=np.float64)
    if y.size and (y.min() < 0.0 or y.max() > 1.0):
        raise ContractViolation("expert action labels must lie in [0, 1]")
    if kind == "cross_entropy":
        terms = -(Tensor(y) * actions.clamp_min(LOG_CLAMP).log()
                  + Tensor(1.0 - y) * (1.0 - actions).clamp_min(LOG_CLAMP).log())
    elif kind == "squared_error":
        terms = (actions - Tensor(y)).square()
    else:
        raise ContractViolation(f"unknown imitation loss kind {kind!r}")
    if row_gates is not None:
        terms = terms * Tensor(np.asarray(row_gates, dtype=np.float64))
    return terms


def soft_cross_entropy(actions: Tensor, labels: np.ndarray,
                       row_gates: np.ndarray | None = None) -> Tensor:
    """Mean soft-label cross-entropy over steps."""
    return imitation_terms(actions, labels, row_gates, "cross_entropy").mean()


def squared_error_imitation(actions: Tensor, labels: np.ndarray,
                            row_gates: np.ndarray | None = None) -> Tensor:
    """Ablation variant of the imitation term: mean squared action error."""
    return imitation_terms(actions, labels, row_gates, "squared_error").mean()


def bc_loss(model: PolicyModel, expert_trajectories: list[Trajectory]) -> Tensor:
    """Imitation loss over every prefix of every expert trajectory."""
    model.validate()
    for t in expert_trajectories:
        if not t.fully_labelled:
            raise ContractViolation(f"trajectory {t.entity_id} is missing action labels")
    parts: list[Tensor] = []
    labels: list[np.ndarray] = []
    for group in group_by_length(expert_trajectories):
        batch = encode_batch(group, model.encoder)
        logits = policy_logits(batch.prefixes, model.protos, model.head)
        parts.append(logits.sigmoid())
        labels.append(batch.labels)
    actions = parts[0] if len(parts) == 1 else concat(parts, axis=0)
    return soft_cross_entropy(actions, np.concatenate(labels))


def group_by_length(trajectories: list[Trajectory]) -> list[list[Trajectory]]:
    groups: dict[int, list[Trajectory]] = {}
    for t in trajectories:
        groups.setdefault(len(t), []).append(t)
    return [groups[k] for k in sorted(groups)]


@dataclass
class LossWeights:
    """Mixing weights for the four loss components."""

    w1: float = 0.8   # representation (clustering)
    w2: float = 0.1   # diversity
    w3: float = 0.1   # interpretability anchor
    w4: float = 1.0   # imitation

    def __post_init__(self):
        for name in ("w1", "w2", "w3", "w4"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ContractViolation(f"{name} must lie in [0, 1], got {v}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.w1, self.w2, self.w3, self.w4)


@dataclass
class FullLossResult:
    total: Tensor
    components: dict[str, float]
    nearest_expert: list[int]
    assignment: np.ndarray
    finals: np.ndarray               # (n, m) full-trajectory embeddings
    predicted: np.ndarray            # (P,) per-prefix predicted actions
    labels: np.ndarray               # (P,) per-prefix expert actions
    row_entity: list[str]            # entity id per prefix row
    row_step: np.ndarray             # step index per prefix row
    row_bucket: list[tuple[int, int]]  # (prototype id, action decile) per row


def action_bucket(proto_id: int, predicted: float) -> tuple[int, int]:
    """Feedback bucket for one action: nearest prototype and predicted-rate decile."""
    return proto_id, min(int(predicted * 10.0), 9)


def full_loss(model: PolicyModel, trajectories: list[Trajectory], weights: LossWeights,
              assignment: np.ndarray | None = None,
              proto_gates: np.ndarray | None = None,
              pair_gates: np.ndarray | None = None,
              action_gate_fn=None,
              im_loss_kind: str = "cross_entropy",
              detach_cluster_inputs: bool = False) -> FullLossResult:
    """The weighted four-part objective with an optional advice-gate overlay.

    With no gates (or an empty feedback ledger upstream) this is exactly the
    ungated objective; gate factors multiply individual cluster, pair and
    step terms inside each component.  ``detach_cluster_inputs`` feeds the
    clustering terms constant embeddings (the trainer's gradient routing);
    the default keeps every dependency differentiable.
    """
    from .prototypes import loss_div, loss_int, loss_rep, update_members

    model.validate()
    groups = group_by_length(trajectories)
    batches: list[EncodedBatch] = [encode_batch(g, model.encoder) for g in groups]
    finals = batches[0].finals if len(batches) == 1 else concat([b.finals for b in batches], axis=0)
    entity_ids = [eid for b in batches for eid in b.entity_ids]

    if assignment is None:
        assignment = assign(finals.data, model.protos)
        update_members(model.protos, entity_ids, assignment)

    cluster_view = Tensor(finals.data) if detach_cluster_inputs else finals
    l_rep = loss_rep(model.protos, cluster_view, assignment, gates=proto_gates)
    l_div = loss_div(model.protos, pair_gates=pair_gates)
    l_int, nearest = loss_int(model.protos, cluster_view, gates=proto_gates)

    # imitation over every prefix row, gated per (nearest prototype, decile) bucket
    prefix_parts = [policy_logits(b.prefixes, model.protos, model.head).sigmoid() for b in batches]
    actions = prefix_parts[0] if len(prefix_parts) == 1 else concat(prefix_parts, axis=0)
    labels = np.concatenate([b.labels for b in batches])
    row_entity = [b.entity_ids[i] for b in batches for i in b.row_entity]
    row_step = np.concatenate([b.steps for b in batches])

    predicted = actions.data.copy()
    d2_rows = squared_distances(np.concatenate([b.prefixes.data for b in batches], axis=0),
                                model.protos.embeddings.data)
    nearest_proto_rows = d2_rows.argmin(axis=1)
    row_bucket = [action_bucket(model.protos.ids[j], a)
                  for j, a in zip(nearest_proto_rows, predicted)]
    row_gates = None
    if action_gate_fn is not None:
        row_gates = np.asarray([action_gate_fn(bk) for bk in row_bucket], dtype=np.float64)
    l_im = imitation_terms(actions, labels, row_gates=row_gates, kind=im_loss_kind).mean()

    w1, w2, w3, w4 = weights.as_tuple()
    total = w1 * l_rep + w2 * l_div + w3 * l_int + w4 * l_im
    components = {"rep": float(l_rep.data), "div": float(l_div.data),
                  "int": float(l_int.data), "im": float(l_im.data),
                  "total": float(total.data)}
    return FullLossResult(total=total, components=components, nearest_expert=nearest,
                          assignment=assignment, finals=finals.data.copy(),
                          predicted=predicted, labels=labels, row_entity=row_entity,
                          row_step=row_step, row_bucket=row_bucket)


@dataclass
class QuadraticView:
    """Closed-form view of the pre-sigmoid logit as one quadratic in the embedding."""

    quad_coeff: float                # of h.h  (equals -sum of head weights)
    linear: np.ndarray               # (m,)    (equals sum of 2 b_k p_k)
    constant: float                  # includes the head bias
    sum_b_sign: int                  # sign of the shared quadratic coefficient's negation
    monotonic_pieces: int            # the logit splits into at most this many monotone pieces

    def logit(self, h: np.ndarray) -> float:
        h = np.asarray(h, dtype=np.float64)
        return float(self.quad_coeff * (h @ h) + self.linear @ h + self.constant)


def quadratic_view(model: PolicyModel) -> QuadraticView:
    b = model.head.b.data
    p = model.protos.embeddings.data
    sum_b = float(b.sum())
    quad = -sum_b
    linear = 2.0 * (b[:, None] * p).sum(axis=0)
    constant = float(-(b * (p * p).sum(axis=1)).sum() + model.head.bias.data)
    sign = 0 if sum_b == 0.0 else (1 if sum_b > 0 else -1)
    return QuadraticView(quad_coeff=quad, linear=linear, constant=constant,
                         sum_b_sign=sign, monotonic_pieces=1 if sign == 0 else 2)
