import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from vcvrl.autodiff import (
    Adam,
    AdamState,
    ShapeError,
    Tensor,
    adam_step,
    bce_loss,
    concat_channels,
    conv3d,
    cosine_similarity,
    count_ops,
    detach,
    gradcheck,
    linear,
    maxpool3d,
    no_grad,
    relu,
    sigmoid,
    take_rows,
    upsample_trilinear,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _t(a, grad=True, dtype=np.float32):
    return Tensor(np.asarray(a), requires_grad=grad, dtype=dtype)


# -- conv3d ----------------------------------------------------------------------


def test_conv3d_pointwise_scaling():
    out = conv3d(_t(np.ones((1, 1, 3, 3, 3))), _t(np.full((1, 1, 1, 1, 1), 2.0)), _t([0.0]))
    assert out.shape == (1, 1, 3, 3, 3)
    assert np.all(out.data == 2.0)


def test_conv3d_full_window_sum():
    out = conv3d(_t(np.ones((1, 1, 3, 3, 3))), _t(np.ones((1, 1, 3, 3, 3))), _t([0.0]))
    assert out.shape == (1, 1, 1, 1, 1)
    assert out.data.item() == 27.0


@pytest.mark.parametrize("stride,padding", [(1, 1), (1, 0), (2, 1), (2, 0)])
def test_conv3d_matches_loop_oracle(rng, stride, padding):
    x = rng.standard_normal((1, 2, 4, 4, 4)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    out = conv3d(_t(x), _t(w), _t(b), stride=stride, padding=padding)
    np.testing.assert_allclose(out.data, oracles.conv3d(x, w, b, stride, padding), atol=1e-5)


def test_conv3d_output_extent():
    out = conv3d(_t(np.zeros((2, 1, 6, 5, 4))), _t(np.zeros((1, 1, 3, 3, 3))), None, stride=2, padding=1)
    assert out.shape[2:] == tuple((n + 2 - 3) // 2 + 1 for n in (6, 5, 4))


def test_conv3d_rejects_channel_mismatch():
    with pytest.raises(ShapeError):
        conv3d(_t(np.zeros((1, 2, 3, 3, 3))), _t(np.zeros((1, 3, 3, 3, 3))), _t([0.0]))


def test_conv3d_rejects_even_kernel():
    with pytest.raises(ValueError):
        conv3d(_t(np.zeros((1, 1, 4, 4, 4))), _t(np.zeros((1, 1, 2, 2, 2))))


# -- upsample --------------------------------------------------------------------


def test_upsample_preserves_constants():
    out = upsample_trilinear(_t(np.full((1, 2, 2, 3, 2), 4.5)), (4, 6, 4))
    np.testing.assert_allclose(out.data, 4.5, rtol=0, atol=1e-6)


def test_upsample_hand_values():
    out = upsample_trilinear(_t([[[[[0.0, 1.0]]]]]), (1, 1, 4))
    np.testing.assert_allclose(out.data.ravel(), [0.0, 0.25, 0.75, 1.0], atol=1e-7)


def test_upsample_identity_is_exact(rng):
    x = rng.standard_normal((2, 3, 2, 3, 4)).astype(np.float32)
    assert np.array_equal(upsample_trilinear(_t(x), (2, 3, 4)).data, x)


def test_upsample_matches_loop_oracle(rng):
    x = rng.standard_normal((1, 2, 3, 2, 3)).astype(np.float32)
    np.testing.assert_allclose(upsample_trilinear(_t(x), (6, 5, 6)).data, oracles.trilinear(x, (6, 5, 6)), atol=1e-5)


@pytest.mark.parametrize("target", [(0, 2, 2), (1, 1, 1)])
def test_upsample_rejects_bad_targets(target):
    with pytest.raises(ValueError):
        upsample_trilinear(_t(np.zeros((1, 1, 2, 2, 2))), target)


# -- maxpool ---------------------------------------------------------------------


def test_maxpool_block_max():
    x = np.arange(1, 9, dtype=np.float32).reshape(1, 1, 2, 2, 2)
    assert maxpool3d(_t(x), 2).data.ravel().tolist() == [8.0]


def test_maxpool_tie_goes_to_first():
    x = _t(np.ones((1, 1, 4, 2, 2)))
    maxpool3d(x, 2).sum().backward()
    expected = np.zeros((1, 1, 4, 2, 2))
    expected[0, 0, 0, 0, 0] = 1
    expected[0, 0, 2, 0, 0] = 1
    assert np.array_equal(x.grad, expected)


def test_maxpool_matches_loop_oracle(rng):
    x = rng.standard_normal((1, 1, 4, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(maxpool3d(_t(x), 2).data, oracles.maxpool3d(x, 2))


def test_maxpool_rejects_indivisible():
    with pytest.raises(ShapeError):
        maxpool3d(_t(np.zeros((1, 1, 3, 4, 4))), 2)


# -- dense and elementwise ---------------------------------------------------------


def test_linear_identity():
    x = np.array([[1.0, -2.0, 3.0]], np.float32)
    out = linear(_t(x), _t(np.eye(3)), _t(np.zeros(3)))
    assert np.array_equal(out.data, x)


def test_linear_dot_plus_bias():
    assert linear(_t([2.0, 5.0]), _t([[1.0, 1.0]]), _t([3.0])).data.tolist() == [10.0]


def test_linear_rejects_mismatch():
    with pytest.raises(ShapeError):
        linear(_t(np.zeros((2, 3))), _t(np.zeros((4, 2))), _t(np.zeros(4)))


def test_relu_sigmoid_values():
    assert relu(_t([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
    assert sigmoid(_t([0.0])).data.item() == 0.5
    big = sigmoid(_t([-1000.0, 1000.0])).data
    assert np.all(np.isfinite(big)) and big[0] == 0.0 and big[1] == 1.0


def test_concat_rejects_spatial_mismatch():
    with pytest.raises(ShapeError):
        concat_channels([_t(np.zeros((1, 1, 2, 2, 2))), _t(np.zeros((1, 1, 2, 2, 4)))])


def test_detach_blocks_gradient():
    x = _t([1.0, 2.0, 3.0])
    (detach(x) * x).mean().backward()
    # only the non-detached factor contributes: d/dx mean(c * x) = c / n
    np.testing.assert_allclose(x.grad, np.array([1.0, 2.0, 3.0]) / 3, rtol=1e-6)


def test_gradient_through_detached_branch_is_exactly_zero(rng):
    x = _t(rng.standard_normal(5))
    w = _t(rng.standard_normal((3, 5)))
    z = detach(relu(linear(x, w)))
    loss = (z * z).sum() + (w * 0.0).sum()
    loss.backward()
    assert x.grad is None
    assert np.all(w.grad == 0.0)


# -- cosine ----------------------------------------------------------------------


@pytest.mark.parametrize(
    "u,v,expected",
    [([1, 2, 3], [1, 2, 3], 1.0), ([1, 0], [0, 1], 0.0), ([1, 0], [-1, 0], -1.0)],
)
def test_cosine_examples(u, v, expected):
    assert cosine_similarity(_t(u), _t(v)).data.item() == pytest.approx(expected, abs=1e-7)


def test_cosine_parallel_rows_stay_within_one():
    rng = np.random.default_rng(0)
    u = rng.standard_normal((1000, 7)).astype(np.float32)
    c = cosine_similarity(_t(u), _t(u * 3.7)).data
    assert c.max() <= 1.0 and c.min() >= 1.0 - 1e-6
    x = _t(u[:3])
    cosine_similarity(x, _t(u[:3] * 2)).sum().backward()
    assert np.all(np.abs(x.grad) < 1e-5)


def test_cosine_zero_vector_is_finite():
    out = cosine_similarity(_t([0.0, 0.0]), _t([1.0, 0.0]))
    assert out.data.item() == 0.0


@settings(max_examples=200, deadline=None)
@given(
    arrays(np.float32, 6, elements=st.floats(-1e3, 1e3, width=32)),
    arrays(np.float32, 6, elements=st.floats(-1e3, 1e3, width=32)),
)
def test_cosine_in_range(u, v):
    c = cosine_similarity(Tensor(u), Tensor(v)).data.item()
    assert -1 <= c <= 1


# -- bce -------------------------------------------------------------------------


def test_bce_perfect_prediction():
    y = np.array([0.0, 1.0, 1.0, 0.0], np.float32)
    assert bce_loss(_t(y), y).data.item() <= 1e-6


def test_bce_half():
    assert bce_loss(_t(np.full(8, 0.5)), np.array([0, 1] * 4)).data.item() == pytest.approx(math.log(2), abs=1e-6)


def test_bce_matches_formula(rng):
    p = rng.uniform(0, 1, (2, 1, 3, 3, 2))
    y = (rng.random(p.shape) > 0.6).astype(np.float32)
    assert bce_loss(_t(p), y).data.item() == pytest.approx(oracles.bce(p.astype(np.float32), y), abs=1e-6)


def test_bce_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        bce_loss(_t(np.zeros(3)), np.zeros(4))


# -- adam ------------------------------------------------------------------------


def test_adam_zero_grad_no_decay_keeps_params():
    p = np.array([1.0, -2.0], np.float32)
    state = AdamState.for_params([p], weight_decay=0.0)
    adam_step([p], [np.zeros(2, np.float32)], state)
    assert p.tolist() == [1.0, -2.0]
    assert state.step == 1


def test_adam_matches_scalar_oracle(rng):
    theta = rng.standard_normal(5)
    grads = [rng.standard_normal(5) for _ in range(3)]
    p = theta.copy()
    state = AdamState.for_params([p])
    adam_step([p], [grads[0]], state)
    ref = [oracles.adam(t, g, 0.0, 0.0, 1) for t, g in zip(theta, grads[0])]
    np.testing.assert_allclose(p, [r[0] for r in ref], atol=1e-7, rtol=0)
    for step, g in enumerate(grads[1:], start=2):
        adam_step([p], [g], state)
        ref = [oracles.adam(r[0], gi, r[1], r[2], step) for r, gi in zip(ref, g)]
    np.testing.assert_allclose(p, [r[0] for r in ref], atol=1e-7, rtol=0)
    assert state.step == 3


def test_adam_wrapper_updates_tensors():
    w = _t([1.0, 1.0])
    opt = Adam([w], lr=0.1, weight_decay=0.0)
    (w * w).sum().backward()
    opt.step()
    np.testing.assert_allclose(w.data, [0.9, 0.9], rtol=1e-6)


# -- gradients --------------------------------------------------------------------


def _weighted(out, r):
    return (out * r).sum()


GRAD_CASES = {
    "conv3d": lambda rng, dt: (
        [_t(rng.standard_normal((1, 2, 4, 3, 4)), dtype=dt), _t(rng.standard_normal((2, 2, 3, 3, 3)) * 0.5, dtype=dt), _t(rng.standard_normal(2), dtype=dt)],
        lambda x, w, b: conv3d(x, w, b, padding=1),
    ),
    "conv3d_strided": lambda rng, dt: (
        [_t(rng.standard_normal((1, 1, 5, 5, 5)), dtype=dt), _t(rng.standard_normal((2, 1, 3, 3, 3)), dtype=dt)],
        lambda x, w: conv3d(x, w, None, stride=2),
    ),
    "upsample": lambda rng, dt: (
        [_t(rng.standard_normal((1, 2, 2, 3, 2)), dtype=dt)],
        lambda x: upsample_trilinear(x, (4, 5, 4)),
    ),
    "maxpool": lambda rng, dt: (
        [_t(rng.permutation(64).reshape(1, 1, 4, 4, 4) * 0.1 + rng.uniform(0, 0.01, (1, 1, 4, 4, 4)), dtype=dt)],
        lambda x: maxpool3d(x, 2),
    ),
    "linear": lambda rng, dt: (
        [_t(rng.standard_normal((4, 3)), dtype=dt), _t(rng.standard_normal((5, 3)), dtype=dt), _t(rng.standard_normal(5), dtype=dt)],
        linear,
    ),
    "relu": lambda rng, dt: (
        [_t(np.sign(rng.standard_normal(12)) * rng.uniform(0.1, 1, 12), dtype=dt)],
        relu,
    ),
    "sigmoid": lambda rng, dt: ([_t(rng.standard_normal(10), dtype=dt)], sigmoid),
    "mean": lambda rng, dt: ([_t(rng.standard_normal((3, 4)), dtype=dt)], lambda x: x.mean(axis=0)),
    "sum": lambda rng, dt: ([_t(rng.standard_normal((3, 4)), dtype=dt)], lambda x: x.sum(axis=1)),
    "concat": lambda rng, dt: (
        [_t(rng.standard_normal((1, 2, 2, 2, 2)), dtype=dt), _t(rng.standard_normal((1, 3, 2, 2, 2)), dtype=dt)],
        lambda a, b: concat_channels([a, b]),
    ),
    "take_rows": lambda rng, dt: (
        [_t(rng.standard_normal((5, 3)), dtype=dt)],
        lambda x: take_rows(x, [0, 2, 2, 4]),
    ),
    "cosine": lambda rng, dt: (
        [_t(rng.standard_normal((4, 6)), dtype=dt), _t(rng.standard_normal((4, 6)), dtype=dt)],
        cosine_similarity,
    ),
    "bce": lambda rng, dt: (
        [_t(rng.uniform(0.1, 0.9, (2, 5)), dtype=dt)],
        lambda p: bce_loss(p, (np.arange(10).reshape(2, 5) % 3 == 0)),
    ),
    "arith": lambda rng, dt: (
        [_t(rng.standard_normal((3, 4)), dtype=dt), _t(rng.standard_normal((1, 4)), dtype=dt)],
        lambda a, b: (a * b - b) + 2.0 * a,
    ),
    "reshape_permute": lambda rng, dt: (
        [_t(rng.standard_normal((2, 3, 4)), dtype=dt)],
        lambda x: x.permute(2, 0, 1).reshape(4, 6),
    ),
}


def _check(name, seed, dtype):
    rng = np.random.default_rng(seed)
    inputs, fn = GRAD_CASES[name](rng, dtype)
    r = rng.standard_normal(fn(*inputs).shape)
    eps = 1e-3 if dtype == np.float32 else 1e-6
    return gradcheck(lambda: _weighted(fn(*inputs), Tensor(r, dtype=dtype)), inputs, eps=eps)


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradcheck_float64(name):
    assert _check(name, 0, np.float64) < 1e-5


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
@pytest.mark.parametrize("seed", [1, 2, 3])
def test_gradcheck_float32(name, seed):
    assert _check(name, seed, np.float32) < 1e-3


def test_seeded_backward_is_deterministic():
    def run():
        rng = np.random.default_rng(5)
        x = _t(rng.standard_normal((2, 1, 4, 4, 4)))
        w = _t(rng.standard_normal((3, 1, 3, 3, 3)))
        out = upsample_trilinear(maxpool3d(relu(conv3d(x, w, None, padding=1)), 2), (4, 4, 4))
        out.mean().backward()
        return x.grad.copy(), w.grad.copy()

    a, b = run(), run()
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_no_grad_records_nothing():
    x = _t([1.0, 2.0])
    with no_grad():
        y = relu(x) * 2.0
    assert not y.requires_grad


def test_count_ops():
    x = _t(np.ones((1, 3)))
    with count_ops() as counts:
        linear(x, _t(np.ones((2, 3))), _t(np.zeros(2)))
        relu(x)
    assert counts["linear"] == 1 and counts["relu"] == 1
