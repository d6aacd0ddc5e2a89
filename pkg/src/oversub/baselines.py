"""Comparison policies: static grid-search, moving average, and plain
behavior cloning (same encoder, plain MLP head, no prototypes, no feedback).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .encoder import (EncoderParams, FeatureScaler, IncrementalEncoder,
                      Trajectory, encode_batch)
from .errors import ContractViolation
from .numerics import AdamState, Tensor, concat, optimizer_step, sigmoid
from .policy import group_by_length


def grid_search(grid: Sequence[float],
                evaluate: Callable[[float], tuple[float, float]]) -> tuple[float, float, float]:
    """Pick the static rate minimising risk, then maximising benefit.

    ``evaluate`` maps a rate to (risk, benefit).  Ties after both criteria go
    to the smallest rate, so the result is independent of grid order.
    Returns (rate, risk, benefit).
    """
    if not grid:
        raise ContractViolation("grid must be non-empty")
    if any(not (0.0 <= r <= 1.0) for r in grid):
        raise ContractViolation("grid rates must lie in [0, 1]")
    results = [(float(r),) + tuple(evaluate(float(r))) for r in grid]
    best = min(results, key=lambda t: (t[1], -t[2], t[0]))
    return best


def moving_average(window: int, usage_history: Sequence[float]) -> float:
    """Mean of the last ``window`` usage fractions, clamped to [0, 1]."""
    if window < 1:
        raise ContractViolation("window must be >= 1")
    hist = np.asarray(usage_history, dtype=np.float64)
    if hist.size == 0:
        raise ContractViolation("usage history must be non-empty")
    return float(np.clip(hist[-window:].mean(), 0.0, 1.0))


def moving_average_rates(usage: np.ndarray, window: int) -> np.ndarray:
    """Hourly moving-average actions for every row of a usage matrix.

    The action at step t averages observations up to and including t-1; the
    first step falls back to its own observation (no history yet).
    """
    usage = np.asarray(usage, dtype=np.float64)
    n, T = usage.shape
    out = np.empty_like(usage)
    for t in range(T):
        if t == 0:
            out[:, 0] = np.clip(usage[:, 0], 0.0, 1.0)
        else:
            lo = max(0, t - window)
            out[:, t] = np.clip(usage[:, lo:t].mean(axis=1), 0.0, 1.0)
    return out


# -- plain behavior cloning ------------------------------------------------------


class MLPHead:
    """Single hidden layer (tanh) with a sigmoid output."""

    def __init__(self, m: int, hidden: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(hidden)
        self.w1 = Tensor(rng.uniform(-scale, scale, size=(m, hidden)), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(rng.uniform(-scale, scale, size=hidden), requires_grad=True)
        self.b2 = Tensor(0.0, requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def logits(self, h: Tensor) -> Tensor:
        return (h @ self.w1 + self.b1).tanh() @ self.w2 + self.b2

    def logits_data(self, h: np.ndarray) -> np.ndarray:
        return np.tanh(h @ self.w1.data + self.b1.data) @ self.w2.data + float(self.b2.data)


@dataclass
class BCModel:
    encoder: EncoderParams
    head: MLPHead
    scaler: FeatureScaler | None = None
    domain_tag: str = "cloud"

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.head.parameters()


class BCRunner:
    """Streaming rollout helper for the plain cloning policy."""

    def __init__(self, model: BCModel):
        self.model = model
        self.enc = IncrementalEncoder(model.encoder)

    def _scale(self, state: np.ndarray) -> np.ndarray:
        sc = self.model.scaler
        return (state - sc.mean) / sc.std if sc is not None else state

    def act(self, state: np.ndarray) -> float:
        h = self.enc.embed(self._scale(state))
        return float(sigmoid(self.model.head.logits_data(h)))

    def commit(self, state: np.ndarray, action: float) -> None:
        self.enc.advance(self._scale(state), action)


@dataclass
class BCTrainLog:
    losses: list[float]


def train_plain_bc(trajectories: list[Trajectory], *, epochs: int = 300, lr: float = 1e-2,
                   hidden: int = 64, seed: int = 0, scaler: FeatureScaler | None = None,
                   domain_tag: str = "cloud", bptt_window: int = 24,
                   loss_kind: str = "cross_entropy") -> tuple[BCModel, BCTrainLog]:
    """Fit the cloning baseline with the shared imitation loss.

    Uses the same truncated-backprop window regime as the prototype trainer
    (one update per time window, hidden carried across windows) so the two
    learners see identical optimisation budgets.
    """
    from .policy import imitation_terms

    if not trajectories:
        raise ContractViolation("no training trajectories")
    if scaler is None:
        scaler = FeatureScaler.fit(trajectories)
    normed = scaler.transform_all(trajectories)
    d = normed[0].width
    encoder = EncoderParams(d=d, m=hidden, seed=seed)
    head = MLPHead(m=hidden, hidden=hidden, seed=seed + 1)
    model = BCModel(encoder=encoder, head=head, scaler=scaler, domain_tag=domain_tag)
    params = model.parameters()
    opt = AdamState.for_params(params, lr=lr)
    losses: list[float] = []

    lengths = {len(t) for t in normed}
    uniform = len(lengths) == 1
    if uniform:
        B = len(normed)
        T = lengths.pop()
        states = np.stack([t.states for t in normed])
        actions_arr = np.stack([t.labelled_actions for t in normed])
        masked = np.concatenate([states, np.zeros((B, T, 1))], axis=2)
        labelled = np.concatenate([states, actions_arr[:, :, None]], axis=2)
        window = bptt_window or T
        n_rows = B * T
        for _ in range(epochs):
            h = Tensor(np.zeros((B, hidden)))
            epoch_sum = 0.0
            for w0 in range(0, T, window):
                w_end = min(w0 + window, T)
                branches = []
                hcur = h
                for t in range(w0, w_end):
                    if t < T - 1:
                        x2 = Tensor(np.concatenate([masked[:, t, :], labelled[:, t, :]],
                                                   axis=0))
                        out = encoder.step(x2, concat([hcur, hcur], axis=0))
                        branches.append(out[:B])
                        hcur = out[B:]
                    else:
                        branches.append(encoder.step(Tensor(masked[:, t, :]), hcur))
                prefixes = concat(branches, axis=0) if len(branches) > 1 else branches[0]
                preds = head.logits(prefixes).sigmoid()
                labels_w = actions_arr[:, w0:w_end].T.reshape(-1)
                loss = imitation_terms(preds, labels_w, kind=loss_kind).sum() * (1.0 / n_rows)
                for p in params:
                    p.zero_grad()
                loss.backward()
                optimizer_step(opt, params, [p.grad if p.grad is not None
                                             else np.zeros_like(p.data) for p in params])
                epoch_sum += float(loss.data) * n_rows
                h = Tensor(hcur.data.copy())
            losses.append(epoch_sum / n_rows)
        return model, BCTrainLog(losses=losses)

    for _ in range(epochs):
        parts = []
        labels = []
        for g in group_by_length(normed):
            batch = encode_batch(g, encoder)
            parts.append(head.logits(batch.prefixes).sigmoid())
            labels.append(batch.labels)
        actions = parts[0] if len(parts) == 1 else concat(parts, axis=0)
        loss = imitation_terms(actions, np.concatenate(labels), kind=loss_kind).mean()
        for p in params:
            p.zero_grad()
        loss.backward()
        optimizer_step(opt, params, [p.grad for p in params])
        losses.append(float(loss.data))
    return model, BCTrainLog(losses=losses)
