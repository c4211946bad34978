import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aulacaps import autodiff as ad
from aulacaps import capsules as caps
from aulacaps.autodiff import ShapeError, Tensor


def norms(t):
    return np.linalg.norm(np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64), axis=-1)


@pytest.mark.parametrize("length,expected", [(0.0, 0.0), (1.0, 0.5), (3.0, 0.9)])
def test_squash_norm_values(length, expected):
    s = np.zeros((1, 4))
    s[0, 1] = length
    v = caps.squash(Tensor(s, dtype=np.float64))
    assert abs(norms(v)[0] - expected) < 1e-6
    assert abs(norms(v)[0] - length**2 / (1 + length**2)) < 1e-6


def test_squash_zero_has_zero_gradient():
    s = Tensor(np.zeros((2, 3)), requires_grad=True, dtype=np.float64)
    with ad.use_tape(ad.Tape()):
        ad.backward(ad.tsum(caps.squash(s)))
    assert np.all(s.grad == 0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (5, 8), elements=st.floats(-50, 50)))
def test_squash_norm_bounded_and_monotone(s):
    v = norms(caps.squash(Tensor(s, dtype=np.float64)))
    assert np.all(v < 1)
    n = norms(s)
    order = np.argsort(n)
    # strictly increasing where the inputs differ meaningfully
    dn, dv = np.diff(n[order]), np.diff(v[order])
    assert np.all(dv[dn > 1e-6] > 0)


def test_primary_capsule_examples():
    u = caps.primary_capsules_2d(Tensor(np.zeros((1, 64, 12, 12))))
    assert u.shape == (1, 576, 16) and np.all(u.data == 0)
    u = caps.primary_capsules_3d(Tensor(np.zeros((1, 96, 1, 12, 12))))
    assert u.shape == (1, 864, 16) and np.all(u.data == 0)
    assert 12 * 12 * 64 == 576 * 16 and 12 * 12 * 96 == 864 * 16
    f = np.random.default_rng(0).standard_normal((2, 64, 12, 12)) * 10
    assert np.all(norms(caps.primary_capsules_2d(Tensor(f))) < 1)


def test_primary_capsules_wrong_count():
    with pytest.raises(ShapeError):
        caps.primary_capsules_2d(Tensor(np.zeros((1, 64, 10, 12))))
    with pytest.raises(ShapeError):
        caps.primary_capsules_3d(Tensor(np.zeros((1, 80, 1, 12, 12))))


def test_primary_capsule_layout_is_position_major():
    f = np.zeros((1, 32, 2, 2))
    f[0, 16:32, 1, 0] = 1.0  # second capsule type at position (1, 0)
    u = caps.primary_capsules(Tensor(f), 16).data[0]
    # positions in row-major order, 2 types each: (1,0) is position 2 -> capsule index 5
    assert np.flatnonzero(norms(u)).tolist() == [5]


def test_concat_capsules():
    a = Tensor(np.random.default_rng(1).standard_normal((2, 576, 16)))
    b = Tensor(np.random.default_rng(2).standard_normal((2, 864, 16)))
    c = caps.concat_capsules(a, b)
    assert c.shape == (2, 1440, 16)
    assert np.array_equal(c.data[:, :576], a.data)
    empty = Tensor(np.zeros((2, 0, 16)))
    assert caps.concat_capsules(empty, b) is b
    with pytest.raises(ShapeError):
        caps.concat_capsules(a, Tensor(np.zeros((2, 3, 8))))


def test_route_single_input_closed_form():
    rng = np.random.default_rng(3)
    u = rng.standard_normal((1, 4))
    W = rng.standard_normal((1, 12, 16, 4))
    v, _ = caps.route(Tensor(u, dtype=np.float64), Tensor(W, dtype=np.float64), iterations=1)
    u_hat = np.einsum("jdk,k->jd", W[0], u[0])
    np.testing.assert_allclose(v.data, caps._squash_np(u_hat / 12), rtol=1e-12)


def test_route_identical_votes_keep_direction():
    rng = np.random.default_rng(4)
    W1 = rng.standard_normal((1, 3, 5, 4))
    W = np.repeat(W1, 6, axis=0)
    u = np.repeat(rng.standard_normal((1, 4)), 6, axis=0)
    v, _ = caps.route(Tensor(u, dtype=np.float64), Tensor(W, dtype=np.float64), iterations=1)
    u_hat = np.einsum("jdk,k->jd", W1[0], u[0])
    np.testing.assert_allclose(v.data, caps._squash_np(6 / 3 * u_hat), rtol=1e-12)


def test_route_uniform_iteration_matches_direct_computation():
    rng = np.random.default_rng(5)
    u, W = rng.standard_normal((2, 7, 4)), rng.standard_normal((7, 3, 5, 4))
    v, state = caps.route(Tensor(u, dtype=np.float64), Tensor(W, dtype=np.float64), iterations=1)
    u_hat = np.einsum("ijdk,bik->bijd", W, u)
    np.testing.assert_allclose(v.data, caps._squash_np(u_hat.sum(axis=1) / 3), rtol=1e-12)
    assert np.all(state.couplings == 1 / 3)


@pytest.mark.parametrize("iterations", [1, 2, 3, 5])
def test_coupling_rows_sum_to_one(iterations):
    rng = np.random.default_rng(iterations)
    u, W = rng.standard_normal((3, 10, 8)), rng.standard_normal((10, 12, 16, 8))
    _, state = caps.route(Tensor(u), Tensor(W), iterations)
    assert len(state.coupling_history) == iterations
    for c in state.coupling_history:
        assert np.all(c >= 0)
        assert np.max(np.abs(c.sum(axis=2) - 1)) < 1e-6


def test_route_rejects_zero_iterations():
    with pytest.raises(ValueError):
        caps.route(Tensor(np.zeros((1, 2, 4))), Tensor(np.zeros((2, 3, 4, 4))), 0)


def _oracle_route(u, W, iterations):
    """Step-by-step routing in plain Python floats; returns a transcript."""
    I, J, D = len(W), len(W[0]), len(W[0][0])
    uh = [[[sum(W[i][j][d][k] * u[i][k] for k in range(len(u[i]))) for d in range(D)] for j in range(J)]
          for i in range(I)]
    b = [[0.0] * J for _ in range(I)]
    transcript = []
    for _ in range(iterations):
        c = []
        for i in range(I):
            m = max(b[i])
            e = [math.exp(x - m) for x in b[i]]
            c.append([x / sum(e) for x in e])
        s = [[sum(c[i][j] * uh[i][j][d] for i in range(I)) for d in range(D)] for j in range(J)]
        v = []
        for j in range(J):
            sq = sum(x * x for x in s[j])
            n = math.sqrt(sq + caps.SQUASH_EPS)
            v.append([x * n / (1 + n * n) if sq > 0 else 0.0 for x in s[j]])
        transcript.append({"c": c, "s": s, "v": v})
        b = [[b[i][j] + sum(uh[i][j][d] * v[j][d] for d in range(D)) for j in range(J)] for i in range(I)]
    return transcript


def test_two_by_two_by_two_hand_case_matches_oracle():
    u = [[0.3, -0.5], [0.8, 0.1]]
    W = [
        [[[1.0, 0.5], [-0.2, 0.7]], [[0.4, -1.0], [0.9, 0.3]]],
        [[[-0.6, 0.2], [0.5, 0.5]], [[1.2, 0.1], [-0.3, 0.8]]],
    ]
    transcript = _oracle_route(u, W, iterations=2)
    v, state = caps.route(Tensor(np.array([u])), Tensor(np.array(W)), iterations=2)
    v64, state64 = caps.route(Tensor(np.array([u]), dtype=np.float64), Tensor(np.array(W), dtype=np.float64), 2)
    for r, step in enumerate(transcript):
        np.testing.assert_allclose(state64.coupling_history[r][0], step["c"], rtol=1e-15, atol=0)
    np.testing.assert_allclose(v64.data[0], transcript[-1]["v"], rtol=1e-15, atol=1e-17)
    # float32 graph against the 64-bit transcript
    np.testing.assert_allclose(v.data[0], transcript[-1]["v"], rtol=1e-6)


def test_pinned_couplings_override_final_iteration():
    rng = np.random.default_rng(6)
    u, W = rng.standard_normal((1, 4, 3)), rng.standard_normal((4, 2, 3, 3))
    c = np.full((1, 4, 2), 0.5)
    with caps.pinned_couplings(c):
        v, _ = caps.route(Tensor(u, dtype=np.float64), Tensor(W, dtype=np.float64), 3)
    ref, _ = caps.route(Tensor(u, dtype=np.float64), Tensor(W, dtype=np.float64), 1)
    np.testing.assert_allclose(v.data, ref.data, rtol=1e-12)


def test_gradient_flows_only_through_final_votes():
    rng = np.random.default_rng(7)
    u, W = rng.standard_normal((1, 5, 4)), rng.standard_normal((5, 3, 4, 4)) * 0.5
    with ad.no_grad():
        _, state = caps.route(Tensor(u, dtype=np.float64), Tensor(W, dtype=np.float64), 3)
    Wt = Tensor(W, requires_grad=True, dtype=np.float64)
    with ad.use_tape(ad.Tape()):
        v, _ = caps.route(Tensor(u, dtype=np.float64), Wt, 3)
        ad.backward(ad.tsum(caps.capsule_lengths(v)))
    Wp = Tensor(W, requires_grad=True, dtype=np.float64)
    with ad.use_tape(ad.Tape()), caps.pinned_couplings(state.couplings):
        v, _ = caps.route(Tensor(u, dtype=np.float64), Wp, 3)
        ad.backward(ad.tsum(caps.capsule_lengths(v)))
    np.testing.assert_allclose(Wt.grad, Wp.grad, rtol=1e-12)


def test_capsule_lengths_examples():
    assert caps.capsule_lengths(Tensor(np.zeros((1, 16)))).data.item() == 0.0
    s = np.zeros((1, 16))
    s[0, 0], s[0, 1] = 0.6, 0.8
    # pre-squash norm 2 gives length 0.8
    v = caps.squash(Tensor(s * 2, dtype=np.float64))
    assert caps.capsule_lengths(v).data.item() == pytest.approx(0.8)
    p = caps.capsule_lengths(caps.squash(Tensor(np.random.default_rng(0).standard_normal((4, 12, 16)) * 5)))
    assert np.all((p.data >= 0) & (p.data < 1))


def test_mask_by_label_examples():
    v = Tensor(np.random.default_rng(1).standard_normal((12, 16)))
    assert np.all(caps.mask_by_label(v, np.zeros(12)).data == 0)
    np.testing.assert_array_equal(caps.mask_by_label(v, np.ones(12)).data, v.data.reshape(-1))
    e3 = np.zeros(12)
    e3[3] = 1
    out = caps.mask_by_label(v, e3).data
    assert np.flatnonzero(out).min() >= 48 and np.flatnonzero(out).max() <= 63
    np.testing.assert_array_equal(out[48:64], v.data[3])
    with pytest.raises(ShapeError):
        caps.mask_by_label(v, np.ones(11))


def test_vote_transform_shape():
    vt = caps.VoteTransform(10, 12, 16, 16, np.random.default_rng(0))
    assert vt.W.shape == (10, 12, 16, 16)
    assert vt(Tensor(np.zeros((2, 10, 16)))).shape == (2, 10, 12, 16)
