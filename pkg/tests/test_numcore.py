import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from restlab import numcore as nc
from oracles import gradient_errors


def away_from_zero(rng, shape, gap=0.05):
    x = rng.uniform(gap, 2.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def distinct_values(rng, shape):
    # spacing far above the finite-difference step keeps pooling argmaxes fixed
    return rng.permutation(np.prod(shape)).reshape(shape) * 0.01 - 0.3


def _with_target(rng, loss, x):
    # targets and weights are drawn once, outside the function being differentiated
    y = nc.Tensor((rng.random(x.shape) < 0.4).astype(float))
    w = rng.uniform(0.5, 3.0, x.shape)
    return (lambda t: loss(t, y, w)), [x]


# one case builder per primitive: rng -> (fn, arrays)
GRAD_CASES = {
    "conv2d": lambda r: (nc.conv2d, [r.normal(size=(2, 2, 4, 5)), r.normal(size=(3, 2, 3, 3)),
                                     r.normal(size=3)]),
    "max_pool2d": lambda r: (nc.max_pool2d, [distinct_values(r, (2, 3, 4, 6))]),
    "upsample2x": lambda r: (nc.upsample2x, [r.normal(size=(2, 3, 3, 4))]),
    "concat": lambda r: (lambda a, b: nc.concat([a, b]), [r.normal(size=(2, 2, 3, 3)),
                                                           r.normal(size=(2, 3, 3, 3))]),
    "relu": lambda r: (nc.relu, [away_from_zero(r, (4, 30))]),
    "sigmoid": lambda r: (nc.sigmoid, [r.normal(0, 2, (4, 30))]),
    "bce": lambda r: _with_target(r, lambda p, y, _: nc.bce(p, y), r.uniform(0.05, 0.95, (4, 30))),
    "bce_with_logits": lambda r: _with_target(
        r, lambda z, y, w: nc.bce_with_logits(z, y, weight=w), r.normal(0, 3, (4, 30))),
    "hinge": lambda r: (
        lambda s: nc.hinge(s, nc.Tensor(np.tile([1.0, -1.0], 60))),
        [1.0 + away_from_zero(r, 120)]),
    "mean": lambda r: (lambda x: nc.mean(x, axis=(1, 2)), [r.normal(size=(4, 5, 6))]),
    "sum": lambda r: (nc.total, [r.normal(size=(4, 30))]),
    "add": lambda r: (nc.add, [r.normal(size=(4, 15)), r.normal(size=(4, 15))]),
    "mul": lambda r: (nc.mul, [r.normal(size=(4, 15)), r.normal(size=(4, 15))]),
    "scale": lambda r: (lambda x: nc.scale(x, -1.7), [r.normal(size=(4, 30))]),
}


def test_every_primitive_has_a_gradient_case():
    assert set(GRAD_CASES) == set(nc.PRIMITIVES)


@pytest.mark.parametrize("op", sorted(GRAD_CASES))
def test_gradient_matches_finite_differences(op):
    rng = np.random.default_rng(zlib.crc32(op.encode()))
    errors = []
    while len(errors) < 100:
        fn, arrays = GRAD_CASES[op](rng)
        errors.extend(gradient_errors(fn, arrays, rng=rng))
    assert len(errors) >= 100
    assert max(errors) < 1e-4


def test_conv_ones_window_sums():
    out = nc.conv2d(nc.Tensor(np.ones((1, 1, 3, 3))), nc.Tensor(np.ones((1, 1, 3, 3))),
                    nc.Tensor(np.zeros(1)))
    assert out.data[0, 0, 1, 1] == 9
    assert out.data[0, 0, 0, 0] == out.data[0, 0, 2, 2] == 4
    assert out.data[0, 0, 0, 1] == 6


def test_conv_of_zero_input_is_zero():
    rng = np.random.default_rng(0)
    out = nc.conv2d(nc.Tensor(np.zeros((2, 3, 5, 5))), nc.Tensor(rng.normal(size=(4, 3, 3, 3))),
                    nc.Tensor(np.zeros(4)))
    assert not out.data.any()


def test_sigmoid_zero():
    assert nc.sigmoid(nc.Tensor(np.zeros(3))).data.tolist() == [0.5] * 3


def test_mean_gradient_is_uniform():
    x = nc.Tensor(np.arange(4.0), requires_grad=True)
    with nc.Tape() as tape:
        loss = nc.mean(x)
    tape.backward(loss)
    assert x.grad.tolist() == [0.25] * 4


def test_logistic_gradient_at_zero_weight():
    x = np.array([[0.3, -1.2, 2.0]])
    for y in (0.0, 1.0):
        w = nc.Tensor(np.zeros((1, 3)), requires_grad=True)
        with nc.Tape() as tape:
            loss = nc.bce(nc.sigmoid(nc.total(nc.mul(w, nc.Tensor(x)))), nc.Tensor(y))
        tape.backward(loss)
        np.testing.assert_allclose(w.grad, (0.5 - y) * x, rtol=1e-6)


def test_unreachable_parameter_gets_zero_grad():
    a = nc.Tensor(np.ones(3), requires_grad=True)
    b = nc.Tensor(np.ones(3), requires_grad=True)
    with nc.Tape() as tape:
        loss = nc.total(a)
        nc.relu(b)
    tape.backward(loss)
    assert b.grad is not None and not b.grad.any()


def test_backward_errors():
    x = nc.Tensor(np.ones(3), requires_grad=True)
    with nc.Tape() as tape:
        y = nc.scale(x, 2.0)
    with pytest.raises(nc.ShapeError):
        tape.backward(y)
    with nc.Tape() as tape:
        loss = nc.total(x)
    tape.backward(loss)
    with pytest.raises(nc.TapeError):
        tape.backward(loss)


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(nc.ShapeError, match=r"add.*\(2,\).*\(3,\)"):
        nc.add(nc.Tensor(np.ones(2)), nc.Tensor(np.ones(3)))


def test_sgd_definitional_step():
    p = nc.Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([2.0])
    nc.optimizer_step(nc.sgd(0.1), [p])
    assert p.data[0] == pytest.approx(0.8)
    assert p.grad is None


def test_sgd_zero_grad_is_fixed_point():
    p = nc.Tensor(np.array([1.5, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    nc.optimizer_step(nc.sgd(0.3), [p])
    assert p.data.tolist() == [1.5, -2.0]


def test_adam_first_step_has_magnitude_lr():
    # m_hat = g and v_hat = g^2 after one bias-corrected step, so |update| = lr * |g| / (|g| + eps)
    p = nc.Tensor(np.array([0.0, 0.0]), requires_grad=True, dtype=np.float64)
    p.grad = np.array([3.0, -0.5])
    nc.optimizer_step(nc.adam(0.01), [p])
    np.testing.assert_allclose(p.data, [-0.01, 0.01], rtol=1e-6)


def test_missing_grad_names_the_parameter():
    p = nc.Tensor(np.ones(2), requires_grad=True, name="head.w")
    with pytest.raises(nc.MissingGradError, match="head.w"):
        nc.optimizer_step(nc.sgd(0.1), [p])


def test_step_counter_increases():
    opt = nc.adam(0.1)
    p = nc.Tensor(np.ones(2), requires_grad=True)
    for k in range(1, 4):
        p.grad = np.ones(2)
        nc.optimizer_step(opt, [p])
        assert opt.step_count == k
        assert opt.first[0].shape == p.shape


def _train(seed):
    rng = np.random.default_rng(seed)
    w = nc.Tensor(rng.normal(size=(2, 1, 3, 3)).astype(np.float32), requires_grad=True)
    b = nc.Tensor(np.zeros(2, np.float32), requires_grad=True)
    x = nc.Tensor(rng.normal(size=(3, 1, 6, 6)).astype(np.float32))
    opt = nc.adam(1e-2)
    for _ in range(5):
        with nc.Tape() as tape:
            loss = nc.mean(nc.relu(nc.conv2d(x, w, b)))
        tape.backward(loss)
        nc.optimizer_step(opt, [w, b])
    return w.data.copy(), b.data.copy()


def test_identical_seed_gives_bit_identical_parameters():
    a, b = _train(3), _train(3)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_max_pool_routes_each_gradient_once(seed):
    rng = np.random.default_rng(seed)
    x = nc.Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
    g = rng.uniform(1, 2, (1, 2, 2, 2))
    with nc.Tape() as tape:
        loss = nc.total(nc.mul(nc.max_pool2d(x), nc.Tensor(g)))
    tape.backward(loss)
    assert np.count_nonzero(x.grad) == g.size
    assert np.isclose(x.grad.sum(), g.sum())


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_conv_stays_finite_on_bounded_inputs(seed):
    rng = np.random.default_rng(seed)
    x = nc.Tensor(rng.uniform(-10, 10, (2, 3, 6, 6)).astype(np.float32), requires_grad=True)
    w = nc.Tensor(rng.uniform(-10, 10, (2, 3, 3, 3)).astype(np.float32), requires_grad=True)
    b = nc.Tensor(np.zeros(2, np.float32), requires_grad=True)
    with nc.Tape() as tape:
        loss = nc.total(nc.conv2d(x, w, b))
    tape.backward(loss)
    for t in (x, w, b):
        assert np.all(np.isfinite(t.grad))


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    from collections import OrderedDict
    rng = np.random.default_rng(1)
    params = OrderedDict(a=rng.normal(size=(3, 2)).astype(np.float32),
                         b=rng.normal(size=5).astype(np.float32))
    nc.save(tmp_path / "x.ckpt", "seg-v1", params)
    arch, back = nc.load(tmp_path / "x.ckpt", expect_arch="seg-v1")
    assert arch == "seg-v1" and list(back) == ["a", "b"]
    assert all(back[k].tobytes() == params[k].tobytes() for k in params)
    with pytest.raises(nc.CheckpointError, match="architecture"):
        nc.load(tmp_path / "x.ckpt", expect_arch="irl-v1")
    raw = (tmp_path / "x.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(raw[:-3])
    with pytest.raises(nc.CheckpointError):
        nc.load(tmp_path / "bad.ckpt")


def test_forward_primitive_dispatch():
    out = nc.forward_primitive("relu", [nc.Tensor(np.array([-1.0, 2.0]))])
    assert out.data.tolist() == [0.0, 2.0]
    with pytest.raises(ValueError, match="unknown primitive"):
        nc.forward_primitive("softmax", [])
