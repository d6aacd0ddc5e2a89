import subprocess
import sys

import numpy as np
import pytest

from oversub.encoder import (EncoderParams, FeatureScaler, IncrementalEncoder,
                             Trajectory, encode, encode_all_prefixes,
                             encode_batch, encode_data)
from oversub.errors import ContractViolation
from oversub.numerics import check_gradients


def random_traj(seed, length=6, width=4, entity="e"):
    rng = np.random.default_rng(seed)
    return Trajectory(entity_id=f"{entity}{seed}", states=rng.normal(size=(length, width)),
                      actions=rng.uniform(0, 1, size=length))


def test_length_one_is_single_step_from_zero_hidden():
    traj = random_traj(0, length=1)
    params = EncoderParams(d=4, m=8, seed=1)
    h = encode(traj, params)
    x = np.concatenate([traj.states[0], [0.0]])[None, :]
    expected = params.step_data(x, np.zeros((1, 8)))[0]
    assert np.array_equal(h.data, expected)


def test_identical_trajectories_identical_embeddings():
    params = EncoderParams(d=4, m=8, seed=1)
    a = random_traj(3)
    b = Trajectory(a.entity_id, a.states.copy(), a.actions.copy())
    assert np.array_equal(encode(a, params).data, encode(b, params).data)


def test_prefix_list_shape_and_tail():
    traj = random_traj(5, length=7)
    params = EncoderParams(d=4, m=8, seed=2)
    prefixes = encode_all_prefixes(traj, params)
    assert len(prefixes) == 7
    assert np.array_equal(prefixes[-1].data, encode(traj, params).data)


@pytest.mark.parametrize("k", [1, 3, 6])
def test_prefix_consistency_against_truncation(k):
    traj = random_traj(7, length=6)
    params = EncoderParams(d=4, m=8, seed=2)
    prefixes = encode_all_prefixes(traj, params)
    direct = encode(traj.prefix(k), params)
    assert np.allclose(prefixes[k - 1].data, direct.data, atol=1e-12)


def test_batch_matches_per_trajectory_paths():
    params = EncoderParams(d=4, m=8, seed=2)
    trajs = [random_traj(s, length=5) for s in range(4)]
    batch = encode_batch(trajs, params)
    B = len(trajs)
    for b, traj in enumerate(trajs):
        singles = encode_all_prefixes(traj, params)
        for t in range(5):
            assert np.allclose(batch.prefixes.data[t * B + b], singles[t].data, atol=1e-12)
        assert np.allclose(batch.finals.data[b], encode(traj, params).data, atol=1e-12)


def test_width_mismatch_rejected():
    traj = random_traj(0, width=3)
    params = EncoderParams(d=4, m=8, seed=0)
    with pytest.raises(ContractViolation):
        encode(traj, params)


def test_embedding_reproducible_across_processes():
    code = (
        "import numpy as np\n"
        "from oversub.encoder import EncoderParams, Trajectory, encode_data\n"
        "rng = np.random.default_rng(11)\n"
        "traj = Trajectory('x', rng.normal(size=(6, 4)), rng.uniform(0, 1, size=6))\n"
        "params = EncoderParams(d=4, m=16, seed=5)\n"
        "print(repr(encode_data(traj, params).tobytes().hex()))\n"
    )
    outs = {subprocess.run([sys.executable, "-c", code], capture_output=True,
                           text=True, check=True).stdout for _ in range(2)}
    assert len(outs) == 1


def test_gradient_through_encoder_matches_finite_diff():
    traj = random_traj(9, length=5)
    params = EncoderParams(d=4, m=6, seed=3)

    def loss():
        return encode(traj, params).square().sum()

    worst = check_gradients(loss, params.parameters(), eps=1e-6, rtol=1e-4)
    assert worst < 1e-4


def test_bounded_embeddings_for_large_inputs():
    rng = np.random.default_rng(0)
    traj = Trajectory("big", rng.uniform(-1e3, 1e3, size=(10, 4)),
                      rng.uniform(0, 1, size=10))
    params = EncoderParams(d=4, m=8, seed=1)
    h = encode(traj, params).data
    assert np.all(np.isfinite(h))
    assert np.max(np.abs(h)) <= 1.0  # tanh-gated recurrence keeps hidden in (-1, 1)


def test_incremental_encoder_matches_prefix_path():
    traj = random_traj(13, length=6)
    params = EncoderParams(d=4, m=8, seed=4)
    inc = IncrementalEncoder(params)
    prefixes = encode_all_prefixes(traj, params)
    for t in range(len(traj)):
        got = inc.embed(traj.states[t])
        assert np.allclose(got, prefixes[t].data, atol=1e-12)
        inc.advance(traj.states[t], traj.actions[t])


def test_scaler_normalises_and_round_trips():
    trajs = [random_traj(s) for s in range(5)]
    scaler = FeatureScaler.fit(trajs)
    normed = scaler.transform_all(trajs)
    stacked = np.concatenate([t.states for t in normed])
    assert np.allclose(stacked.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(stacked.std(axis=0), 1.0, atol=1e-12)


def test_trajectory_validation():
    with pytest.raises(ContractViolation):
        Trajectory("bad", np.zeros((0, 3)), np.zeros(0))
    with pytest.raises(ContractViolation):
        Trajectory("bad", np.zeros((2, 3)), np.array([1.5, 0.5]))
    with pytest.raises(ContractViolation):
        Trajectory("bad", np.zeros((3, 2)), np.array([np.nan, 0.5, 0.5]))
    t = Trajectory("ok", np.zeros((2, 2)), np.array([0.5, np.nan]))
    assert not t.fully_labelled
