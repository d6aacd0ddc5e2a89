import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oversub.errors import ContractViolation, ReplayError
from oversub.hitl import (ActionQuery, FeedbackEvent, FeedbackLedger,
                          OracleRules, PrototypeQuery, QuerySet, ScriptedOracle,
                          TrainerQueryStats, action_uncertainty, advice_gate,
                          apply_merge, apply_split, build_query,
                          prototype_uncertainty, record_feedback)
from oversub.numerics import Tensor, shannon_entropy, softmax
from oversub.policy import PolicyHead, PolicyModel
from oversub.prototypes import PrototypeSet


def make_model(embeddings, b=None, members=None):
    emb = np.asarray(embeddings, dtype=np.float64)
    k = len(emb)
    protos = PrototypeSet(embeddings=Tensor(emb, requires_grad=True),
                          ids=list(range(k)), nearest_expert=[0] * k,
                          member_sets=members or [[] for _ in range(k)], next_id=k)
    head = PolicyHead(k, seed=0)
    if b is not None:
        head.b = Tensor(np.asarray(b, dtype=np.float64), requires_grad=True)
    from oversub.encoder import EncoderParams
    return PolicyModel(encoder=EncoderParams(d=3, m=emb.shape[1], seed=0),
                       protos=protos, head=head)


# -- uncertainty ---------------------------------------------------------------


def test_uncertainty_equidistant_members_is_one():
    assert prototype_uncertainty(np.array([2.0, 2.0, 2.0, 2.0])) == pytest.approx(1.0)


def test_uncertainty_singleton_is_zero():
    assert prototype_uncertainty(np.array([3.0])) == 0.0
    assert prototype_uncertainty(np.array([])) == 0.0


def test_uncertainty_matches_hand_computation():
    d = np.array([0.0, 0.0, 0.0, 10.0, 10.0])
    p = softmax(-d)
    expected = shannon_entropy(p) / math.log(5)
    assert prototype_uncertainty(d) == pytest.approx(expected, abs=1e-12)


def test_action_uncertainty_peak_and_edges():
    assert action_uncertainty(0.5) == pytest.approx(1.0)
    assert action_uncertainty(0.0) == 0.0
    assert action_uncertainty(1.0) == 0.0
    assert 0.0 < action_uncertainty(0.9) < 1.0


# -- advice gate ------------------------------------------------------------------


def test_gate_neutral_at_zero():
    assert advice_gate(0) == pytest.approx(1.0)


def test_gate_saturates_with_approval():
    assert advice_gate(10) == pytest.approx(math.exp(-1.0), abs=1e-4)


def test_gate_amplifies_with_rejection():
    assert advice_gate(-10) == pytest.approx(math.exp(1.0), abs=1e-3)


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=-40, max_value=40))
def test_gate_bounds_and_monotonicity(f):
    g = advice_gate(f)
    assert math.exp(-1.0) - 1e-12 <= g <= math.exp(1.0) + 1e-12
    assert advice_gate(f + 1) <= g
    if abs(f) <= 8:  # strictly decreasing until tanh saturates in float64
        assert advice_gate(f + 1) < g


# -- ledger --------------------------------------------------------------------


def test_upvote_then_downvote_cancels():
    ledger = FeedbackLedger()
    record_feedback(ledger, FeedbackEvent(seq=1, kind="up", target=("proto", 3)))
    record_feedback(ledger, FeedbackEvent(seq=2, kind="down", target=("proto", 3)))
    assert ledger.proto_votes[3] == 0


def test_three_upvotes_accumulate():
    ledger = FeedbackLedger()
    for i in range(3):
        ledger.record(FeedbackEvent(seq=i + 1, kind="up", target=("proto", 0)))
    assert ledger.proto_votes[0] == 3


def test_interleaved_votes_match_recount():
    rng = np.random.default_rng(0)
    ledger = FeedbackLedger()
    tally: dict = {}
    for i in range(50):
        target = ("proto", int(rng.integers(0, 4)))
        kind = "up" if rng.random() < 0.5 else "down"
        ledger.record(FeedbackEvent(seq=i + 1, kind=kind, target=target))
        tally[target[1]] = tally.get(target[1], 0) + (1 if kind == "up" else -1)
    assert ledger.proto_votes == tally


def test_replayed_sequence_rejected():
    ledger = FeedbackLedger()
    ledger.record(FeedbackEvent(seq=5, kind="up", target=("proto", 0)))
    with pytest.raises(ReplayError):
        ledger.record(FeedbackEvent(seq=5, kind="down", target=("proto", 0)))
    with pytest.raises(ReplayError):
        ledger.record(FeedbackEvent(seq=4, kind="down", target=("proto", 0)))


def test_pair_and_action_votes():
    ledger = FeedbackLedger()
    ledger.record(FeedbackEvent(seq=1, kind="down", target=("pair", 2, 1)))
    ledger.record(FeedbackEvent(seq=2, kind="down", target=("action", 0, 4)))
    assert ledger.pair_votes[(1, 2)] == -1
    assert ledger.action_votes[(0, 4)] == -1
    assert ledger.pair_gates([0, 1, 2])[1, 2] > 1.0
    assert ledger.action_gate((0, 4)) > 1.0
    assert ledger.action_gate((5, 5)) == 1.0


def test_event_validation():
    with pytest.raises(ContractViolation):
        FeedbackEvent(seq=1, kind="merge", target=("pair", 2, 2))
    with pytest.raises(ContractViolation):
        FeedbackEvent(seq=1, kind="split", target=("pair", 1, 2))
    with pytest.raises(ContractViolation):
        FeedbackEvent(seq=1, kind="sideways", target=("proto", 1))


# -- query construction ------------------------------------------------------------


def stats_with(mu, mean_dist, members, pair_distance=None, action_rows=None,
               risk_fraction=None, iteration=110):
    k = len(mu)
    return TrainerQueryStats(
        iteration=iteration, proto_ids=list(range(k)), mu=np.asarray(mu, dtype=np.float64),
        mean_dist=np.asarray(mean_dist, dtype=np.float64),
        members=np.asarray(members, dtype=int),
        risk_fraction=np.asarray(risk_fraction if risk_fraction is not None else np.zeros(k)),
        pair_distance=pair_distance if pair_distance is not None else np.ones((k, k)),
        action_rows=action_rows or [])


def test_unreachable_threshold_gives_empty_prototype_queries():
    stats = stats_with([0.9, 0.8], [1.0, 2.0], [4, 4])
    qs = build_query(stats, u_p=1.0 + 1e-9, u_a=0.55, n_top=5)
    assert qs.prototype_queries == []


def test_zero_threshold_with_wide_topn_queries_all_nonsingleton():
    stats = stats_with([0.7, 0.0, 0.6], [1.0, 0.5, 2.0], [4, 1, 6])
    qs = build_query(stats, u_p=0.0, u_a=0.55, n_top=5)
    assert {q.id for q in qs.prototype_queries} == {0, 2}  # singleton never queried


def test_topn_intersection_filters():
    stats = stats_with([0.9, 0.9, 0.9], [3.0, 2.0, 1.0], [4, 4, 4])
    qs = build_query(stats, u_p=0.55, u_a=0.55, n_top=2)
    assert {q.id for q in qs.prototype_queries} == {0, 1}


def test_transcript_scenario_unstable_pair_queried():
    # six prototypes at iteration 110: id 5 has the highest cluster entropy,
    # id 1 is both uncertain and risk-dominated; both clear the distance top-N
    mu = [0.20, 0.92, 0.10, 0.15, 0.22, 0.97]
    mean_dist = [0.5, 4.0, 0.4, 0.3, 0.6, 5.0]
    members = [5, 6, 4, 5, 5, 7]
    risk = [0.0, 0.7, 0.0, 0.0, 0.1, 0.2]
    stats = stats_with(mu, mean_dist, members, risk_fraction=risk)
    qs = build_query(stats, u_p=0.55, u_a=0.55, n_top=5)
    assert [q.id for q in qs.prototype_queries] == [5, 1]  # ordered by uncertainty


def test_merge_suggestions_use_distance_percentile():
    pair = np.ones((4, 4)) * 10.0
    pair[0, 3] = pair[3, 0] = 0.01
    stats = stats_with([0.0] * 4, [1.0] * 4, [2] * 4, pair_distance=pair)
    qs = build_query(stats, u_p=0.9, u_a=0.9, n_top=5, suggestion_percentile=10.0)
    assert qs.suggested_merges == [(0, 3)]
    assert qs.merge_distances[0] == pytest.approx(0.01)


def test_action_queries_respect_invariant_and_cap():
    rows = [ActionQuery("t0", i, a=0.5, a_expert=0.9, mu=0.99, risk=True) for i in range(8)]
    rows += [ActionQuery("t1", i, a=0.45, a_expert=0.2, mu=0.98, risk=False) for i in range(8)]
    rows += [ActionQuery("t2", 0, a=0.01, a_expert=0.05, mu=0.08, risk=True)]
    stats = stats_with([0.0], [0.0], [1], action_rows=rows)
    qs = build_query(stats, u_p=0.9, u_a=0.55, n_top=5, max_actions=10)
    assert len(qs.action_queries) == 10
    for q in qs.action_queries:
        assert q.mu >= 0.55 or q.risk
    assert all(q.risk for q in qs.action_queries[:9])  # risky rows first


def test_empty_queryset_flag():
    stats = stats_with([0.0, 0.0], [0.0, 0.0], [1, 1])
    qs = build_query(stats, u_p=0.9, u_a=0.9, n_top=5)
    assert qs.is_empty()
    assert qs.to_wire() == {"prototypes": [], "actions": [], "merge_suggestions": []}


# -- structural edits ----------------------------------------------------------------


def test_merge_takes_mean_embedding():
    model = make_model([[0.0, 0.0], [2.0, 2.0], [9.0, 9.0]], b=[0.2, 0.6, 1.0],
                       members=[["a"], ["b", "c"], ["d"]])
    edit = apply_merge(model, 0, 1)
    assert model.protos.k == 2
    assert np.allclose(model.protos.embeddings.data[0], [1.0, 1.0])
    assert model.head.b.data[0] == pytest.approx(0.4)
    assert sorted(model.protos.member_sets[0]) == ["a", "b", "c"]
    assert model.protos.ids == [3, 2]
    assert edit.kind == "merge" and edit.shadow_iterations == 30


def test_merge_rejects_self_and_unknown():
    model = make_model([[0.0, 0.0], [1.0, 1.0]])
    with pytest.raises(ContractViolation):
        apply_merge(model, 1, 1)
    with pytest.raises(ContractViolation):
        apply_merge(model, 0, 7)


def test_merge_of_duplicates_preserves_similarity():
    from oversub.policy import similarity
    model = make_model([[1.0, -1.0], [1.0, -1.0], [4.0, 0.0]], b=[0.3, 0.3, 0.5])
    h = np.array([0.5, 0.5])
    before = similarity(h, model.protos).data
    apply_merge(model, 0, 1)
    after = similarity(h, model.protos).data
    assert after[0] == pytest.approx(before[0], abs=1e-12)
    assert after[1] == pytest.approx(before[2], abs=1e-12)


def test_merge_then_act_stays_finite():
    from oversub.policy import act
    from oversub.encoder import Trajectory
    rng = np.random.default_rng(0)
    model = make_model(rng.normal(size=(3, 4)), b=[0.1, 0.2, 0.3])
    model.encoder = __import__("oversub.encoder", fromlist=["EncoderParams"]).EncoderParams(
        d=3, m=4, seed=1)
    apply_merge(model, 0, 2)
    traj = Trajectory("x", rng.normal(size=(4, 3)), rng.uniform(0, 1, 4))
    a = act(traj, model)
    assert 0.0 < a < 1.0 and model.head.k == 2


def two_blob_setup():
    rng = np.random.default_rng(7)
    blob_a = rng.normal(loc=0.0, scale=0.05, size=(6, 2))
    blob_b = rng.normal(loc=5.0, scale=0.05, size=(6, 2))
    finals = np.vstack([blob_a, blob_b])
    ids = [f"t{i}" for i in range(12)]
    model = make_model([[0.1, 0.1]], b=[0.5], members=[ids])
    return model, finals, ids


def test_split_seeds_new_prototype_at_farthest_member():
    model, finals, ids = two_blob_setup()
    edit = apply_split(model, 0, finals, ids)
    assert model.protos.k == 2
    assert edit.new_id == 1
    # the new prototype sits inside the far blob and captures it on reassignment
    assert np.all(model.protos.embeddings.data[1] > 4.0)
    far_members = model.protos.member_sets[1]
    assert set(far_members) == {f"t{i}" for i in range(6, 12)}
    # the original keeps its closest member
    assert len(model.protos.member_sets[0]) == 6
    assert model.head.b.data[1] == model.head.b.data[0]


def test_split_requires_two_members():
    model = make_model([[0.0, 0.0]], members=[["only"]])
    with pytest.raises(ContractViolation):
        apply_split(model, 0, np.zeros((1, 2)), ["only"])


# -- scripted oracle -------------------------------------------------------------------


def test_oracle_empty_queryset_no_events():
    oracle = ScriptedOracle(OracleRules())
    assert oracle.decide(QuerySet(iteration=10)) == []


def test_oracle_reproduces_transcript_narrative():
    # unstable prototypes 5 and 1 get downvoted; the close pair (4, 1) merges
    qs = QuerySet(
        iteration=110,
        prototype_queries=[PrototypeQuery(id=5, mu=0.97, mean_dist=5.0, members=7),
                           PrototypeQuery(id=1, mu=0.92, mean_dist=4.0, members=6)],
        suggested_merges=[(4, 1)], merge_distances=[0.05])
    oracle = ScriptedOracle(OracleRules(downvote_mu=0.9, merge_max_distance=0.5))
    events = oracle.decide(qs)
    assert {"kind": "down", "target": [5]} in events
    assert {"kind": "down", "target": [1]} in events
    assert {"kind": "merge", "target": [4, 1]} in events


def test_oracle_merge_budget_caps_across_rounds():
    oracle = ScriptedOracle(OracleRules(merge_budget=1, merge_max_distance=1.0))
    qs = QuerySet(iteration=10, suggested_merges=[(0, 1)], merge_distances=[0.1])
    first = oracle.decide(qs)
    second = oracle.decide(QuerySet(iteration=20, suggested_merges=[(2, 3)],
                                    merge_distances=[0.1]))
    assert any(e["kind"] == "merge" for e in first)
    assert not any(e["kind"] == "merge" for e in second)


def test_oracle_risk_direction_controls_action_votes():
    rows = [ActionQuery("t", 3, a=0.2, a_expert=0.6, mu=0.9, risk=True),
            ActionQuery("t", 4, a=0.8, a_expert=0.4, mu=0.9, risk=False)]
    qs = QuerySet(iteration=10, action_queries=rows)
    below = ScriptedOracle(OracleRules(risk_direction="below",
                                       downvote_waste=False)).decide(qs)
    above = ScriptedOracle(OracleRules(risk_direction="above",
                                       downvote_waste=False)).decide(qs)
    assert [e["target"]["step"] for e in below if e["kind"] == "down"] == [3]
    assert [e["target"]["step"] for e in above if e["kind"] == "down"] == [4]


def test_oracle_waste_votes_cover_the_other_side():
    rows = [ActionQuery("t", 3, a=0.2, a_expert=0.6, mu=0.9, risk=True),
            ActionQuery("t", 4, a=0.8, a_expert=0.4, mu=0.9, risk=False),
            ActionQuery("t", 5, a=0.58, a_expert=0.6, mu=0.9, risk=True)]
    qs = QuerySet(iteration=10, action_queries=rows)
    events = ScriptedOracle(OracleRules(risk_direction="below", risk_margin=0.05,
                                        downvote_waste=True, waste_margin=0.05)).decide(qs)
    steps = sorted(e["target"]["step"] for e in events if e["kind"] == "down")
    # step 3 is a real shortfall, step 4 a real overshoot; step 5 within margin
    assert steps == [3, 4]


def test_oracle_deterministic_replay():
    qs = QuerySet(
        iteration=50,
        prototype_queries=[PrototypeQuery(id=2, mu=0.95, mean_dist=3.0, members=5)],
        action_queries=[ActionQuery("t", 1, a=0.3, a_expert=0.7, mu=0.9, risk=True)],
        suggested_merges=[(0, 2)], merge_distances=[0.2])
    a = ScriptedOracle(OracleRules()).decide(qs)
    b = ScriptedOracle(OracleRules()).decide(qs)
    assert a == b


def test_oracle_rules_reject_unknown_keys():
    with pytest.raises(ContractViolation):
        OracleRules.from_dict({"downvote_mu": 0.9, "sharpness": 3})
