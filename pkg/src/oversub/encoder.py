"""Trajectory encoder: a single-layer gated recurrent unit.

A trajectory is consumed step by step.  Each step's input is the state
feature vector with the step's action appended as one extra feature; the
final step of whatever is being encoded always gets 0 in the action slot,
because a trajectory prefix ends on a state whose action is still to be
chosen.  The embedding is the hidden state after the last step.

Hidden width and embedding width are unified at 64 so prototype embeddings
live in the same space as encoded trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .numerics import Tensor, concat, sigmoid

DEFAULT_HIDDEN = 64


@dataclass
class Trajectory:
    """One entity's timestamped record of states and expert actions.

    ``actions[t]`` may be NaN only at the final step (a prefix awaiting its
    action); every other step must carry a label in [0, 1].
    """

    entity_id: str
    states: np.ndarray          # (T, d)
    actions: np.ndarray         # (T,)
    domain_tag: str = "cloud"

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.states.ndim != 2 or len(self.states) == 0:
            raise ContractViolation("trajectory needs at least one step of 2D states")
        if len(self.actions) != len(self.states):
            raise ContractViolation("one action slot per step required")
        labelled = self.actions[:-1]
        if np.any(np.isnan(labelled)):
            raise ContractViolation("only the final step may lack an action")
        present = self.actions[~np.isnan(self.actions)]
        if present.size and (present.min() < 0.0 or present.max() > 1.0):
            raise ContractViolation("actions must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.states)

    @property
    def width(self) -> int:
        return self.states.shape[1]

    def prefix(self, k: int) -> "Trajectory":
        """First ``k`` steps; the k-th action is dropped (it is the target)."""
        if not (1 <= k <= len(self)):
            raise ContractViolation(f"prefix length {k} out of range")
        actions = self.actions[:k].copy()
        actions[-1] = np.nan
        return Trajectory(self.entity_id, self.states[:k].copy(), actions, self.domain_tag)

    @property
    def fully_labelled(self) -> bool:
        return not np.isnan(self.actions[-1])

    @property
    def labelled_actions(self) -> np.ndarray:
        """Actions with a trailing NaN replaced by 0 for encoder input."""
        a = self.actions.copy()
        if np.isnan(a[-1]):
            a[-1] = 0.0
        return a


@dataclass
class FeatureScaler:
    """Per-feature z-score normalisation fit on the training split.

    The constants persist in checkpoints so evaluation sees the same inputs
    as training did.
    """

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, trajectories: list[Trajectory]) -> "FeatureScaler":
        stacked = np.concatenate([t.states for t in trajectories], axis=0)
        mean = stacked.mean(axis=0)
        std = stacked.std(axis=0)
        std = np.where(std < 1e-8, 1.0, std)
        return cls(mean=mean, std=std)

    def transform(self, traj: Trajectory) -> Trajectory:
        return Trajectory(traj.entity_id, (traj.states - self.mean) / self.std,
                          traj.actions.copy(), traj.domain_tag)

    def transform_all(self, trajectories: list[Trajectory]) -> list[Trajectory]:
        return [self.transform(t) for t in trajectories]


class EncoderParams:
    """Gated-recurrent-unit weights sized for [state+action (+) hidden] input."""

    def __init__(self, d: int, m: int = DEFAULT_HIDDEN, seed: int = 0):
        self.d = d
        self.m = m
        rng = np.random.default_rng(seed)
        width = d + 1 + m  # state features, the action slot, previous hidden
        scale = 1.0 / np.sqrt(m)

        def init(*shape):
            return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)

        self.w_update = init(width, m)
        self.w_reset = init(width, m)
        self.w_cand = init(width, m)
        self.b_update = init(m)
        self.b_reset = init(m)
        self.b_cand = init(m)

    def parameters(self) -> list[Tensor]:
        return [self.w_update, self.w_reset, self.w_cand,
                self.b_update, self.b_reset, self.b_cand]

    def parameter_names(self) -> list[str]:
        return ["w_update", "w_reset", "w_cand", "b_update", "b_reset", "b_cand"]

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        """One recurrence on a batch: x (B, d+1), h (B, m) -> (B, m)."""
        xh = concat([x, h], axis=1)
        z = (xh @ self.w_update + self.b_update).sigmoid()
        r = (xh @ self.w_reset + self.b_reset).sigmoid()
        xrh = concat([x, r * h], axis=1)
        c = (xrh @ self.w_cand + self.b_cand).tanh()
        return (1.0 - z) * h + z * c

    # graph-free mirror of ``step`` for fast policy rollouts
    def step_data(self, x: np.ndarray, h: np.ndarray) -> np.ndarray:
        xh = np.concatenate([x, h], axis=-1)
        z = sigmoid(xh @ self.w_update.data + self.b_update.data)
        r = sigmoid(xh @ self.w_reset.data + self.b_reset.data)
        xrh = np.concatenate([x, r * h], axis=-1)
        c = np.tanh(xrh @ self.w_cand.data + self.b_cand.data)
        return (1.0 - z) * h + z * c


def _check_width(traj: Trajectory, params: EncoderParams) -> None:
    if traj.width != params.d:
        raise ContractViolation(
            f"trajectory feature width {traj.width} != encoder input width {params.d}")


def encode(traj: Trajectory, params: EncoderParams) -> Tensor:
    """Embed one trajectory: final hidden state, starting from zeros.

    The last step's action slot is fed as 0 regardless of whether a label is
    present, matching the prefix convention above.
    """
    _check_width(traj, params)
    T = len(traj)
    actions = traj.labelled_actions
    h = Tensor(np.zeros((1, params.m)))
    for t in range(T):
        a = 0.0 if t == T - 1 else actions[t]
        x = Tensor(np.concatenate([traj.states[t], [a]])[None, :])
        h = params.step(x, h)
    return h.reshape(params.m)


def encode_all_prefixes(traj: Trajectory, params: EncoderParams) -> list[Tensor]:
    """Embeddings of every prefix, one left-to-right pass.

    At step t the running hidden (which consumed actions up to t-1) is
    branched once with the action slot zeroed — that branch is exactly
    ``encode(traj.prefix(t+1))`` — and advanced once with the real action to
    serve the later prefixes.
    """
    _check_width(traj, params)
    T = len(traj)
    actions = traj.labelled_actions
    h = Tensor(np.zeros((1, params.m)))
    out: list[Tensor] = []
    for t in range(T):
        x_masked = Tensor(np.concatenate([traj.states[t], [0.0]])[None, :])
        out.append(params.step(x_masked, h).reshape(params.m))
        if t < T - 1:
            x = Tensor(np.concatenate([traj.states[t], [actions[t]]])[None, :])
            h = params.step(x, h)
    return out


@dataclass
class EncodedBatch:
    """Graph outputs for a group of equal-length trajectories.

    ``finals`` are full-trajectory embeddings (B, m); ``prefixes`` holds the
    per-step prefix embeddings stacked to (T*B, m) with step-major order; the
    matching labels/ids are flattened the same way.
    """

    finals: Tensor
    prefixes: Tensor
    labels: np.ndarray          # (T*B,)
    entity_ids: list[str]       # length B
    steps: np.ndarray           # (T*B,) step index of each prefix row
    row_entity: np.ndarray      # (T*B,) batch index of each prefix row


def encode_batch(trajectories: list[Trajectory], params: EncoderParams) -> EncodedBatch:
    """Vectorised version of ``encode_all_prefixes`` over same-length trajectories."""
    if not trajectories:
        raise ContractViolation("empty batch")
    T = len(trajectories[0])
    if any(len(t) != T for t in trajectories):
        raise ContractViolation("encode_batch requires equal-length trajectories")
    for t in trajectories:
        _check_width(t, params)
    B = len(trajectories)
    states = np.stack([t.states for t in trajectories])            # (B, T, d)
    actions = np.stack([t.labelled_actions for t in trajectories])  # (B, T)

    # the prefix branch (action slot zeroed) and the advancing chain share the
    # previous hidden state, so both recurrences run as one double-height step
    masked = np.concatenate([states, np.zeros((B, T, 1))], axis=2)
    labelled = np.concatenate([states, actions[:, :, None]], axis=2)
    h = Tensor(np.zeros((B, params.m)))
    branches: list[Tensor] = []
    for t in range(T):
        if t < T - 1:
            x2 = Tensor(np.concatenate([masked[:, t, :], labelled[:, t, :]], axis=0))
            out = params.step(x2, concat([h, h], axis=0))
            branches.append(out[:B])
            h = out[B:]
        else:
            branches.append(params.step(Tensor(masked[:, t, :]), h))

    prefixes = concat(branches, axis=0)                            # (T*B, m)
    labels = np.concatenate([actions[:, t] for t in range(T)])
    steps = np.concatenate([np.full(B, t, dtype=np.intp) for t in range(T)])
    row_entity = np.concatenate([np.arange(B, dtype=np.intp) for _ in range(T)])
    final_from_branch = branches[-1]  # last step branch == final embedding (action slot zeroed)
    return EncodedBatch(finals=final_from_branch, prefixes=prefixes, labels=labels,
                        entity_ids=[t.entity_id for t in trajectories],
                        steps=steps, row_entity=row_entity)


def encode_data(traj: Trajectory, params: EncoderParams) -> np.ndarray:
    """Graph-free ``encode`` (same arithmetic, raw arrays)."""
    _check_width(traj, params)
    T = len(traj)
    actions = traj.labelled_actions
    h = np.zeros((1, params.m))
    for t in range(T):
        a = 0.0 if t == T - 1 else actions[t]
        x = np.concatenate([traj.states[t], [a]])[None, :]
        h = params.step_data(x, h)
    return h[0]


class IncrementalEncoder:
    """Streaming encoder for rollouts: feed (state, chosen action) pairs.

    ``embed(state)`` returns the embedding of the trajectory so far extended
    by ``state`` (action slot zeroed); ``advance(state, action)`` commits the
    step.  Mirrors the training arithmetic exactly.
    """

    def __init__(self, params: EncoderParams):
        self.params = params
        self.h = np.zeros((1, params.m))

    def embed(self, state: np.ndarray) -> np.ndarray:
        x = np.concatenate([np.asarray(state, dtype=np.float64), [0.0]])[None, :]
        return self.params.step_data(x, self.h)[0]

    def advance(self, state: np.ndarray, action: float) -> None:
        x = np.concatenate([np.asarray(state, dtype=np.float64), [action]])[None, :]
        self.h = self.params.step_data(x, self.h)
