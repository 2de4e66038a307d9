import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causal_keyframe.errors import InputError, NumericalError
from causal_keyframe.policy import (
    grad_log_prob,
    init_policy,
    load_checkpoint,
    param_shapes,
    policy_forward,
    save_checkpoint,
    selection_log_prob,
)


def fd_worst_error(params, features, q, order, eps=1e-5, probes=3, seed=0):
    """Largest relative error between analytic and central-difference gradients."""
    rng = np.random.default_rng(seed)
    grad = grad_log_prob(params, features, q, order)
    worst = 0.0
    for name in params:
        arr = params[name]
        for _ in range(probes):
            idx = tuple(int(rng.integers(s)) for s in arr.shape)
            old = arr[idx]
            arr[idx] = old + eps
            up = selection_log_prob(policy_forward(params, features, q), order)
            arr[idx] = old - eps
            down = selection_log_prob(policy_forward(params, features, q), order)
            arr[idx] = old
            fd, an = (up - down) / (2 * eps), grad[name][idx]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    return worst


def test_init_is_deterministic_and_follows_rule():
    a, b = init_policy(32, 128, seed=1), init_policy(32, 128, seed=1)
    assert a.equals(b)
    assert not a.equals(init_policy(32, 128, seed=2))
    for name, arr in a.items():
        assert arr.dtype == np.float32
        if arr.ndim == 1:
            assert np.all(arr == 0)
        else:
            assert np.all(np.abs(arr) <= 1 / np.sqrt(arr.shape[1]))


def test_param_shapes_layout():
    shapes = param_shapes(8, 16, layers=3, head_hidden=16)
    assert shapes["lstm0.W"] == (64, 16 + 16)
    assert shapes["lstm1.W"] == (64, 32)
    assert shapes["head.W2"] == (1, 16)
    assert list(shapes)[-1] == "head.b2"


def test_forward_shapes_and_range(rng):
    p = init_policy(8, 16, seed=0)
    out = policy_forward(p, rng.normal(size=(6, 8)), rng.normal(size=8))
    assert out.scores.shape == (6,)
    assert np.all((out.scores > 0) & (out.scores < 1))
    np.testing.assert_allclose(out.scores, 1 / (1 + np.exp(-out.logits)))


def test_forward_rejects_dimension_mismatch(rng):
    p = init_policy(8, 16)
    with pytest.raises(InputError):
        policy_forward(p, rng.normal(size=(6, 7)), rng.normal(size=8))
    with pytest.raises(InputError):
        policy_forward(p, rng.normal(size=(6, 8)), rng.normal(size=9))


def test_nonfinite_raises_numerical_error(rng):
    p = init_policy(4, 4).astype(np.float64)
    p["head.W2"][:] = np.inf
    with pytest.raises(NumericalError, match="ep-9"):
        policy_forward(p, rng.normal(size=(3, 4)), rng.normal(size=4), episode_id="ep-9")


def test_log_prob_rejects_duplicates(rng):
    p = init_policy(4, 4)
    out = policy_forward(p, rng.normal(size=(3, 4)), rng.normal(size=4))
    with pytest.raises(InputError):
        selection_log_prob(out, [1, 1])
    with pytest.raises(InputError):
        selection_log_prob(out, [3])


def test_full_pool_gradient_finite(rng):
    p = init_policy(4, 8, seed=3)
    feats, q = rng.normal(size=(4, 4)), rng.normal(size=4)
    order = list(np.argsort(-policy_forward(p, feats, q).scores))
    g = grad_log_prob(p, feats, q, order)
    assert g.all_finite()


def test_gradient_matches_finite_differences(rng):
    for case in range(3):
        p = init_policy(8, 16, seed=case).astype(np.float64)
        for _, arr in p.items():
            arr += rng.normal(0, 0.3, arr.shape)
        feats, q = rng.normal(size=(6, 8)), rng.normal(size=8)
        order = [int(i) for i in rng.choice(6, 2, replace=False)]
        assert fd_worst_error(p, feats, q, order, seed=case) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 5))
def test_log_prob_nonpositive(seed, k):
    r = np.random.default_rng(seed)
    p = init_policy(4, 4, seed=seed % 7)
    out = policy_forward(p, r.normal(size=(5, 4)), r.normal(size=4))
    order = [int(i) for i in r.permutation(5)[:k]]
    lp = selection_log_prob(out, order)
    assert np.isfinite(lp) and lp <= 1e-12


def test_checkpoint_round_trip(tmp_path):
    p = init_policy(8, 16, seed=5)
    path = tmp_path / "p.ckpt"
    save_checkpoint(p, path)
    q = load_checkpoint(path)
    assert q.equals(p)
    for name in p:
        assert p[name].tobytes() == q[name].tobytes()
    magic, version, d, h, layers, hm = struct.unpack_from("<4sIIIII", path.read_bytes())
    assert (magic, version, d, h, layers, hm) == (b"CKFP", 1, 8, 16, 3, 16)


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nope")
    with pytest.raises(InputError):
        load_checkpoint(bad)
    bad.write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(InputError):
        load_checkpoint(bad)
