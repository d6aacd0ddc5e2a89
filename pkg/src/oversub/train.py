"""Training loop: gated objective, periodic queries, feedback application.

One iteration is one pass over the training trajectories (cluster
assignments refresh at the top of each iteration).  At every iteration
boundary the trainer drains whatever feedback has queued up — votes fold
into the ledger, merges and splits edit the prototype structure and
schedule shadow iterations — and, on the configured cadence, publishes a
QuerySet.  Feedback sources never touch the model directly; everything
serialises through the queue.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .data import split_entities
from .encoder import FeatureScaler, Trajectory
from .errors import ContractViolation, NumericError
from .hitl import (ActionQuery, FeedbackEvent, FeedbackLedger, OracleRules,
                   QuerySet, ScriptedOracle, StructuralEdit, TrainerQueryStats,
                   apply_merge, apply_split, build_query, prototype_uncertainty)
from .numerics import AdamState, Tensor, concat, optimizer_step
from .policy import (FullLossResult, LossWeights, PolicyHead, PolicyModel,
                     action_bucket, full_loss, imitation_terms, policy_logits)
from .prototypes import (PrototypeSet, assign, loss_div, loss_int, loss_rep,
                         squared_distances, update_members)
from .sim_airline import build_trajectories as airline_trajectories
from .sim_airline import generate_history
from .sim_cloud import build_trajectories as cloud_trajectories
from .sim_cloud import generate_fleet

MAX_SERIES_POINTS = 336
MAX_STAT_ROWS = 200


def generate_dataset(config: ExperimentConfig) -> list[Trajectory]:
    """Deterministic expert dataset for the configured domain and seed."""
    if config.domain == "cloud":
        fleet = generate_fleet(config.seed, services=config.sim.services,
                               nodes=config.sim.nodes, core_capacity=config.sim.core_capacity,
                               mem_capacity=config.sim.mem_capacity, hours=config.sim.hours)
        return cloud_trajectories(fleet)
    history = generate_history(config.seed, airlines=config.sim.airlines,
                               years=config.sim.years)
    return airline_trajectories(history)


@dataclass
class IterationRecord:
    iteration: int
    rep: float
    div: float
    int_: float
    im: float
    total: float
    k: int
    queries: int
    edits: int

    def as_row(self) -> dict:
        return {"iteration": self.iteration, "rep": self.rep, "div": self.div,
                "int": self.int_, "im": self.im, "total": self.total,
                "k": self.k, "queries": self.queries, "edits": self.edits}


@dataclass
class TrainResult:
    model: PolicyModel
    ledger: FeedbackLedger
    log: list[IterationRecord]
    queries_published: int
    edits: list[StructuralEdit]
    effective_iterations: int
    train_ids: list[str]
    test_ids: list[str]
    rng_state: dict
    final_snapshot: dict


class Trainer:
    """Single-writer training process; see module docstring for the loop."""

    def __init__(self, config: ExperimentConfig, trajectories: list[Trajectory],
                 gateway=None):
        if not trajectories:
            raise ContractViolation("no trajectories to train on")
        for t in trajectories:
            if not t.fully_labelled:
                raise ContractViolation(f"trajectory {t.entity_id} lacks expert labels")
        self.config = config
        self.gateway = gateway
        ids = [t.entity_id for t in trajectories]
        self.train_ids, self.test_ids = split_entities(ids, config.train_fraction, config.seed)
        keep = set(self.train_ids)
        self.train_raw = [t for t in trajectories if t.entity_id in keep]
        self.scaler = FeatureScaler.fit(self.train_raw)
        self.train = self.scaler.transform_all(self.train_raw)
        self.weights = LossWeights(config.w1, config.w2, config.w3, config.w4)

        from .encoder import EncoderParams, encode_data
        self.model = PolicyModel(
            encoder=EncoderParams(d=self.train[0].width, m=config.hidden, seed=config.seed),
            protos=None, head=None, scaler=self.scaler, domain_tag=config.domain)  # type: ignore[arg-type]
        finals0 = np.vstack([encode_data(t, self.model.encoder) for t in self.train])
        self._finals0 = finals0
        self.model.protos = PrototypeSet.init_from_experts(
            finals0, config.resolved_k, np.random.default_rng(config.seed + 1))
        self.model.head = PolicyHead(self.model.protos.k, seed=config.seed + 2)
        self.opt = AdamState.for_params(self._params(), lr=config.learning_rate)

        self.ledger = FeedbackLedger()
        rules = dict(config.hitl.oracle_rules)
        if config.domain == "airline":
            rules.setdefault("risk_direction", "above")
        self.oracle = (ScriptedOracle(OracleRules.from_dict(rules))
                       if config.hitl.enabled and config.hitl.feedback_source == "oracle"
                       else None)
        self.queue: list[dict] = []
        self._seq = 0
        self.rng = np.random.default_rng(config.seed + 3)

        self.era = 0
        self.asked_protos: set[tuple[int, int]] = set()
        self.asked_pairs: set[tuple[int, tuple[int, int]]] = set()
        self.asked_buckets: set[tuple[int, tuple[int, int]]] = set()
        self.pending_queries: dict = QuerySet(iteration=0).to_wire()
        self._last_result: FullLossResult | None = None
        self._last_stats: TrainerQueryStats | None = None

        # prototype-loss gradients captured at the previous epoch's final
        # window, blended into each window update (see _epoch_pass)
        self._proto_grad_store: list[np.ndarray] | None = None
        # observed per-dimension embedding range; refreshed each epoch
        self._emb_lo = finals0.min(axis=0)
        self._emb_hi = finals0.max(axis=0)

        # windowed (truncated-backprop) training path needs equal lengths and
        # a batch that fits; otherwise the epoch falls back to one full pass
        lengths = {len(t) for t in self.train}
        self._uniform = len(lengths) == 1 and len(self.train) <= config.batch_size
        if self._uniform:
            self._T = lengths.pop()
            self._B = len(self.train)
            states = np.stack([t.states for t in self.train])
            actions = np.stack([t.labelled_actions for t in self.train])
            self._labels = actions
            self._masked = np.concatenate([states, np.zeros((self._B, self._T, 1))], axis=2)
            self._labelled = np.concatenate([states, actions[:, :, None]], axis=2)

    # -- plumbing ----------------------------------------------------------

    def _params(self):
        return self.model.parameters()

    def _next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def _enqueue(self, events: list[dict]) -> None:
        for ev in events:
            ev = dict(ev)
            ev.setdefault("seq", self._next_seq())
            self._seq = max(self._seq, ev["seq"])
            self.queue.append(ev)

    # -- main loop -----------------------------------------------------------

    def run(self, snapshot_every: int = 1) -> TrainResult:
        cfg = self.config
        target = cfg.epochs
        it = 0
        shadow_left = 0
        queries_published = 0
        edits: list[StructuralEdit] = []
        log: list[IterationRecord] = []
        snapshot = self._initial_snapshot()
        if self.gateway is not None:
            self.gateway.publish_snapshot(snapshot)
        while it < target:
            it += 1
            gates_enabled = cfg.hitl.enabled and not self.ledger.is_empty()
            proto_gates = self.ledger.proto_gates(self.model.protos.ids) if gates_enabled else None
            pair_gates = self.ledger.pair_gates(self.model.protos.ids) if gates_enabled else None
            gate_fn = self.ledger.action_gate if gates_enabled else None

            try:
                result = self._epoch_pass(proto_gates, pair_gates, gate_fn)
            except NumericError:
                self._write_diagnostic(it, self._last_result)
                raise
            self.model.protos.nearest_expert = result.nearest_expert
            self._last_result = result

            # iteration boundary: apply queued feedback, then maybe query
            new_edits = self._drain(result)
            if new_edits:
                edits.extend(new_edits)
                extra = sum(e.shadow_iterations for e in new_edits)
                shadow_left += extra
                target += extra
                self.era += 1

            query_eligible = (cfg.hitl.enabled and cfg.hitl.feedback_source != "none"
                              and shadow_left == 0 and not new_edits
                              and it >= cfg.hitl.warmup
                              and it % cfg.hitl.frequency == 0)
            stats = self._query_stats(it, result, with_actions=query_eligible,
                                      structure_changed=bool(new_edits))
            self._last_stats = stats
            if query_eligible:
                qs = self._deduped_query(stats)
                if qs is not None and not qs.is_empty():
                    queries_published += 1
                    self.pending_queries = qs.to_wire()
                    self._mark_asked(qs, stats)
                    if self.oracle is not None:
                        self._enqueue(self.oracle.decide(qs))
            if shadow_left > 0:
                shadow_left -= 1

            log.append(IterationRecord(iteration=it, rep=result.components["rep"],
                                       div=result.components["div"], int_=result.components["int"],
                                       im=result.components["im"], total=result.components["total"],
                                       k=self.model.protos.k, queries=queries_published,
                                       edits=len(edits)))
            if it % snapshot_every == 0 or it == target:
                snapshot = self._snapshot(it, result, stats)
                if self.gateway is not None:
                    self.gateway.publish_snapshot(snapshot)
        return TrainResult(model=self.model, ledger=self.ledger, log=log,
                           queries_published=queries_published, edits=edits,
                           effective_iterations=it, train_ids=self.train_ids,
                           test_ids=self.test_ids,
                           rng_state=self.rng.bit_generator.state,
                           final_snapshot=snapshot)

    # -- the epoch itself ---------------------------------------------------------

    def _step_params(self, loss, extra_grads: list[np.ndarray] | None = None,
                     extra_scale: float = 1.0) -> None:
        params = self._params()
        for p in params:
            p.zero_grad()
        loss.backward()
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        if extra_grads is not None:
            grads = [g + extra_scale * e for g, e in zip(grads, extra_grads)]
        optimizer_step(self.opt, params, grads)
        # prototypes represent trajectory embeddings and are anchored to real
        # ones, so they are projected into the observed embedding range after
        # every update.  Without this the unbounded diversity pressure walks
        # them out of the data cloud and the representation term drags the
        # encoder (and the whole embedding geometry) along with them.
        emb = self.model.protos.embeddings
        np.clip(emb.data, self._emb_lo, self._emb_hi, out=emb.data)

    def _capture_gradients(self, loss) -> list[np.ndarray]:
        params = self._params()
        for p in params:
            p.zero_grad()
        loss.backward()
        return [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]

    def _epoch_pass(self, proto_gates, pair_gates, gate_fn) -> FullLossResult:
        """One pass over the training set with one update per time window.

        Hidden state is carried exactly across windows; gradients truncate at
        window boundaries (plain truncated backprop).  Full-trajectory
        embeddings exist only at the final window, where the prototype losses
        are evaluated (and clusters reassigned, once per epoch); their
        gradients are captured there and blended, 1/n-scaled, into every
        window update of the next epoch so each step descends the full
        weighted objective rather than alternating between its parts.

        Gradient routing: the clustering terms optimise the prototype block
        only — their embedding inputs are detached, so the encoder is shaped
        by imitation alone while prototypes chase the resulting geometry.
        Propagating the clustering pull into the encoder at the reference
        weights empirically drags trajectory embeddings after the
        diversity-driven prototypes and collapses the policy fit.
        """
        if not self._uniform:
            return self._full_pass(proto_gates, pair_gates, gate_fn)
        cfg = self.config
        model = self.model
        B, T = self._B, self._T
        window = cfg.bptt_window or T
        n_windows = -(-T // window)
        n_rows = B * T
        w1, w2, w3, w4 = self.weights.as_tuple()
        single = n_windows == 1

        h = Tensor(np.zeros((B, model.encoder.m)))
        predicted_parts: list[np.ndarray] = []
        buckets: list[tuple[int, int]] = []
        im_total = 0.0
        components: dict[str, float] = {}
        nearest = model.protos.nearest_expert
        assignment = np.zeros(B, dtype=np.intp)
        finals_data = np.zeros((B, model.encoder.m))
        next_store: list[np.ndarray] | None = None

        for w0 in range(0, T, window):
            w_end = min(w0 + window, T)
            branches: list[Tensor] = []
            hcur = h
            for t in range(w0, w_end):
                if t < T - 1:
                    x2 = Tensor(np.concatenate([self._masked[:, t, :],
                                                self._labelled[:, t, :]], axis=0))
                    out = model.encoder.step(x2, concat([hcur, hcur], axis=0))
                    branches.append(out[:B])
                    hcur = out[B:]
                else:
                    branches.append(model.encoder.step(Tensor(self._masked[:, t, :]), hcur))
            prefixes = concat(branches, axis=0) if len(branches) > 1 else branches[0]
            actions = policy_logits(prefixes, model.protos, model.head).sigmoid()
            labels_w = self._labels[:, w0:w_end].T.reshape(-1)

            d2 = squared_distances(prefixes.data, model.protos.embeddings.data)
            w_buckets = [action_bucket(model.protos.ids[j], a)
                         for j, a in zip(d2.argmin(axis=1), actions.data)]
            row_gates = (np.asarray([gate_fn(bk) for bk in w_buckets])
                         if gate_fn is not None else None)
            ce_sum = imitation_terms(actions, labels_w, row_gates,
                                     cfg.bc_loss_kind).sum()
            loss = (w4 / n_rows) * ce_sum
            im_total += float(ce_sum.data)

            if w_end == T:
                finals = branches[-1]
                assignment = assign(finals.data, model.protos)
                update_members(model.protos, [t.entity_id for t in self.train], assignment)
                # clustering terms steer the prototypes, not the encoder: the
                # embedding input is detached (see the routing note below)
                anchors = Tensor(finals.data)
                l_rep = loss_rep(model.protos, anchors, assignment, gates=proto_gates)
                l_div = loss_div(model.protos, pair_gates=pair_gates)
                l_int, nearest = loss_int(model.protos, anchors, gates=proto_gates)
                proto_loss = w1 * l_rep + w2 * l_div + w3 * l_int
                components = {"rep": float(l_rep.data), "div": float(l_div.data),
                              "int": float(l_int.data)}
                finals_data = finals.data.copy()
                self._emb_lo = finals_data.min(axis=0)
                self._emb_hi = finals_data.max(axis=0)
                if single:
                    loss = loss + proto_loss
                else:
                    next_store = self._capture_gradients(proto_loss)

            self._step_params(loss, extra_grads=self._proto_grad_store,
                              extra_scale=1.0 / n_windows)
            h = Tensor(hcur.data.copy())
            predicted_parts.append(actions.data.copy())
            buckets.extend(w_buckets)
        if not single:
            self._proto_grad_store = next_store

        im = im_total / n_rows
        components["im"] = im
        components["total"] = (w1 * components["rep"] + w2 * components["div"]
                               + w3 * components["int"] + w4 * im)
        entity_ids = [t.entity_id for t in self.train]
        return FullLossResult(
            total=Tensor(components["total"]), components=components,
            nearest_expert=nearest, assignment=assignment, finals=finals_data,
            predicted=np.concatenate(predicted_parts),
            labels=self._labels.T.reshape(-1),
            row_entity=[entity_ids[b] for _ in range(T) for b in range(B)],
            row_step=np.repeat(np.arange(T, dtype=np.intp), B),
            row_bucket=buckets)

    def _full_pass(self, proto_gates, pair_gates, gate_fn) -> FullLossResult:
        """Single-update epoch for mixed-length datasets."""
        result = full_loss(self.model, self.train, self.weights,
                           proto_gates=proto_gates, pair_gates=pair_gates,
                           action_gate_fn=gate_fn, im_loss_kind=self.config.bc_loss_kind,
                           detach_cluster_inputs=True)
        self._emb_lo = result.finals.min(axis=0)
        self._emb_hi = result.finals.max(axis=0)
        self._step_params(result.total)
        return result

    # -- feedback application ---------------------------------------------------

    def _drain(self, result: FullLossResult) -> list[StructuralEdit]:
        if self.gateway is not None:
            self._enqueue(self.gateway.drain_events())
        events = sorted(self.queue, key=lambda e: e["seq"])
        self.queue = []
        applied: list[StructuralEdit] = []
        row_lookup = {(e, int(s)): b for e, s, b in
                      zip(result.row_entity, result.row_step, result.row_bucket)}
        for ev in events:
            try:
                applied.extend(self._apply_event(ev, result, row_lookup))
            except ContractViolation as exc:
                self._log_skip(ev, exc)
        return applied

    def _apply_event(self, ev: dict, result: FullLossResult,
                     row_lookup: dict) -> list[StructuralEdit]:
        kind = ev["kind"]
        target = ev["target"]
        seq = int(ev["seq"])
        if kind in ("up", "down"):
            if isinstance(target, dict):
                bucket = row_lookup.get((target["traj"], int(target["step"])))
                if bucket is None:
                    raise ContractViolation(f"action target {target} not in current batch")
                resolved = ("action", bucket[0], bucket[1])
            elif len(target) == 1:
                self.model.protos.index_of(int(target[0]))
                resolved = ("proto", int(target[0]))
            elif len(target) == 2:
                i, j = sorted(int(x) for x in target)
                self.model.protos.index_of(i)
                self.model.protos.index_of(j)
                resolved = ("pair", i, j)
            else:
                raise ContractViolation(f"bad vote target {target!r}")
            self.ledger.record(FeedbackEvent(seq=seq, kind=kind, target=resolved))
            return []
        if kind == "merge":
            i, j = int(target[0]), int(target[1])
            self.ledger.record(FeedbackEvent(seq=seq, kind="merge", target=("pair", *sorted((i, j)))))
            edit = apply_merge(self.model, i, j, self.config.hitl.shadow_iterations)
            self._reset_structural_moments()
            return [edit]
        if kind == "split":
            k = int(target[0])
            self.ledger.record(FeedbackEvent(seq=seq, kind="split", target=("proto", k)))
            edit = apply_split(self.model, k, result.finals,
                               [t.entity_id for t in self.train],
                               self.config.hitl.shadow_iterations)
            self._reset_structural_moments()
            return [edit]
        raise ContractViolation(f"unknown feedback kind {kind!r}")

    def _reset_structural_moments(self) -> None:
        # prototype matrix and head weights changed shape; their moments and
        # any captured prototype-loss gradients restart
        params = self._params()
        proto_idx = len(self.model.encoder.parameters())
        self.opt.reset_slot(proto_idx, params[proto_idx].data.shape)
        self.opt.reset_slot(proto_idx + 1, params[proto_idx + 1].data.shape)
        self._proto_grad_store = None

    def _log_skip(self, ev: dict, exc: Exception) -> None:
        if self.gateway is not None:
            self.gateway.note_skip(ev, str(exc))

    # -- queries ----------------------------------------------------------------

    def _query_stats(self, it: int, result: FullLossResult, *,
                     with_actions: bool = False,
                     structure_changed: bool = False) -> TrainerQueryStats:
        protos = self.model.protos
        k = protos.k
        d2 = squared_distances(result.finals, protos.embeddings.data)
        # after a merge/split the iteration's assignment indexes a dead layout;
        # recompute against the edited prototypes (queries pause during shadow
        # anyway, but snapshots must stay coherent)
        assignment = (d2.argmin(axis=1) if structure_changed else result.assignment)
        mu = np.zeros(k)
        mean_dist = np.zeros(k)
        members = np.zeros(k, dtype=int)
        for j in range(k):
            rows = np.nonzero(assignment == j)[0]
            members[j] = rows.size
            if rows.size:
                mean_dist[j] = float(d2[rows, j].mean())
                mu[j] = prototype_uncertainty(d2[rows, j])

        risky = result.predicted < result.labels
        index_of = {pid: j for j, pid in enumerate(protos.ids)}
        proto_of_row = np.fromiter((index_of.get(b[0], -1) for b in result.row_bucket),
                                   dtype=np.intp, count=len(result.row_bucket))
        live = proto_of_row >= 0
        risk_fraction = np.zeros(k)
        counts = np.bincount(proto_of_row[live], minlength=k)
        risky_counts = np.bincount(proto_of_row[live],
                                   weights=risky[live].astype(np.float64), minlength=k)
        nonzero = counts > 0
        risk_fraction[nonzero] = risky_counts[nonzero] / counts[nonzero]

        action_rows: list[ActionQuery] = []
        self._stat_buckets = {}
        if with_actions:
            p = np.clip(result.predicted, 1e-15, 1.0 - 1e-15)
            mus = -(p * np.log(p) + (1.0 - p) * np.log(1.0 - p)) / np.log(2.0)
            candidate = np.nonzero(risky | (mus >= self.config.hitl.u_a))[0]
            # risky rows first, then by descending uncertainty; row index breaks ties
            order = candidate[np.lexsort((candidate, -mus[candidate],
                                          ~risky[candidate]))][:MAX_STAT_ROWS]
            for i in order:
                key = (result.row_entity[i], int(result.row_step[i]))
                self._stat_buckets[key] = result.row_bucket[i]
                if (self.era, result.row_bucket[i]) in self.asked_buckets:
                    continue
                action_rows.append(ActionQuery(
                    traj=result.row_entity[i], step=int(result.row_step[i]),
                    a=float(result.predicted[i]), a_expert=float(result.labels[i]),
                    mu=float(mus[i]), risk=bool(risky[i])))
        return TrainerQueryStats(iteration=it, proto_ids=list(protos.ids), mu=mu,
                                 mean_dist=mean_dist, members=members,
                                 risk_fraction=risk_fraction,
                                 pair_distance=protos.pairwise_distances(),
                                 action_rows=action_rows)

    def _deduped_query(self, stats: TrainerQueryStats) -> QuerySet | None:
        cfg = self.config.hitl
        qs = build_query(stats, cfg.u_p, cfg.u_a, cfg.n_top,
                         suggestion_percentile=cfg.suggestion_percentile,
                         max_actions=cfg.max_action_queries)
        qs.prototype_queries = [q for q in qs.prototype_queries
                                if (self.era, q.id) not in self.asked_protos]
        kept = [(pair, dist) for pair, dist in zip(qs.suggested_merges, qs.merge_distances)
                if (self.era, tuple(sorted(pair))) not in self.asked_pairs]
        qs.suggested_merges = [p for p, _ in kept]
        qs.merge_distances = [d for _, d in kept]
        return qs

    def _mark_asked(self, qs: QuerySet, stats: TrainerQueryStats) -> None:
        for q in qs.prototype_queries:
            self.asked_protos.add((self.era, q.id))
        for pair in qs.suggested_merges:
            self.asked_pairs.add((self.era, tuple(sorted(pair))))
        for aq in qs.action_queries:
            bucket = self._stat_buckets.get((aq.traj, aq.step))
            if bucket is not None:
                self.asked_buckets.add((self.era, bucket))

    # -- snapshots ---------------------------------------------------------------

    def _initial_snapshot(self) -> dict:
        """Pre-training state so clients can see prototypes before epoch one."""
        from .prototypes import assign, update_members
        protos = self.model.protos
        assignment = assign(self._finals0, protos)
        update_members(protos, [t.entity_id for t in self.train], assignment)
        d2 = squared_distances(self._finals0, protos.embeddings.data)
        entries = []
        for j, pid in enumerate(protos.ids):
            rows = np.nonzero(assignment == j)[0]
            raw = self.train_raw[protos.nearest_expert[j]]
            entries.append({"id": int(pid),
                            "mu": prototype_uncertainty(d2[rows, j]) if rows.size else 0.0,
                            "members": int(rows.size),
                            "mean_dist": float(d2[rows, j].mean()) if rows.size else 0.0,
                            "votes": 0,
                            "explanation_id": raw.entity_id,
                            "series": [float(x) for x in raw.labelled_actions[:MAX_SERIES_POINTS]]})
        return {"iteration": 0,
                "losses": {"rep": 0.0, "div": 0.0, "int": 0.0, "im": 0.0, "total": 0.0},
                "prototypes": entries,
                "queries": self.pending_queries}

    def _snapshot(self, it: int, result: FullLossResult, stats: TrainerQueryStats) -> dict:
        protos = self.model.protos
        entries = []
        for j, pid in enumerate(protos.ids):
            expert_idx = protos.nearest_expert[j] if j < len(protos.nearest_expert) else 0
            raw = self.train_raw[expert_idx]
            series = raw.labelled_actions
            if len(series) > MAX_SERIES_POINTS:
                stride = int(np.ceil(len(series) / MAX_SERIES_POINTS))
                series = series[::stride]
            entries.append({
                "id": int(pid),
                "mu": float(stats.mu[j]),
                "members": int(stats.members[j]),
                "mean_dist": float(stats.mean_dist[j]),
                "votes": int(self.ledger.proto_votes.get(pid, 0)),
                "explanation_id": raw.entity_id,
                "series": [float(x) for x in series],
            })
        return {
            "iteration": it,
            "losses": {k: float(v) for k, v in result.components.items()},
            "prototypes": entries,
            "queries": self.pending_queries,
        }

    def _write_diagnostic(self, it: int, result: FullLossResult) -> None:
        out = self.config.output_dir
        if not out:
            return
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "diagnostic.json"), "w") as f:
            json.dump({"iteration": it, "components": result.components,
                       "k": self.model.protos.k}, f, indent=2)


def train(config: ExperimentConfig, trajectories: list[Trajectory] | None = None,
          gateway=None) -> TrainResult:
    """Generate (or accept) the dataset and run the trainer to completion."""
    if trajectories is None:
        trajectories = generate_dataset(config)
    trainer = Trainer(config, trajectories, gateway=gateway)
    return trainer.run()
