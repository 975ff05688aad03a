import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedaf import autograd as ag
from fedaf.autograd import NumericOverflowError, ShapeError, Tape, TapeError, Tensor
from helpers import RTOL, check_gradients


def test_softmax_of_equal_logits_is_uniform():
    np.testing.assert_allclose(ag.softmax(Tensor([0.0, 0.0]), 1.0).data, [0.5, 0.5])


def test_relu_definition():
    np.testing.assert_array_equal(ag.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])


def test_avgpool_of_constant_plane():
    x = Tensor(np.full((1, 1, 4, 4), 3.25))
    out = ag.avgpool2x2(x)
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 3.25, dtype=np.float32))


def test_avgpool_drops_odd_edge():
    x = Tensor(np.arange(9.0).reshape(1, 1, 3, 3))
    np.testing.assert_allclose(ag.avgpool2x2(x).data.ravel(), [(0 + 1 + 3 + 4) / 4])


def test_square_derivative_at_three():
    x = Tensor(3.0)
    with Tape() as tape:
        tape.watch(x)
        y = ag.mul(x, x)
    assert tape.gradient(y, [x])[x].item() == pytest.approx(6.0)


def test_plain_sgd_step():
    p, _ = ag.sgd_momentum_step([Tensor(1.0)], [Tensor(2.0)], lr=0.1, momentum=0.0)
    assert p[0].item() == pytest.approx(0.8)


def test_momentum_recurrence_two_steps():
    p, v = [Tensor(0.0)], None
    for _ in range(2):
        p, v = ag.sgd_momentum_step(p, [Tensor(1.0)], lr=1.0, momentum=0.9, velocity=v)
    assert p[0].item() == pytest.approx(-2.9)


def test_zero_gradient_leaves_params():
    w = Tensor(np.arange(4.0))
    (out,), _ = ag.sgd_momentum_step([w], [Tensor(np.zeros(4))], lr=0.5, momentum=0.9)
    np.testing.assert_array_equal(out.data, w.data)


def test_sgd_rejects_bad_hyperparameters():
    with pytest.raises(ValueError):
        ag.sgd_momentum_step([Tensor(1.0)], [Tensor(1.0)], lr=0.0)
    with pytest.raises(ValueError):
        ag.sgd_momentum_step([Tensor(1.0)], [Tensor(1.0)], lr=0.1, momentum=1.0)
    with pytest.raises(ShapeError):
        ag.sgd_momentum_step([Tensor(np.ones(2))], [Tensor(np.ones(3))], lr=0.1)


def test_shape_error_names_primitive_and_shapes():
    with pytest.raises(ShapeError) as info:
        ag.affine(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))), Tensor(np.ones(4)))
    assert info.value.op == "affine"
    assert "(2, 3)" in str(info.value) and "(4, 5)" in str(info.value)


@pytest.mark.filterwarnings("ignore:overflow")
def test_overflow_is_an_error():
    big = Tensor(np.full(2, 3e38))
    with pytest.raises(NumericOverflowError) as info:
        ag.add(big, big)
    assert info.value.op == "add"


def test_log_of_zero_is_an_error():
    with pytest.raises(NumericOverflowError):
        ag.log(Tensor([0.0, 1.0]))


def test_tensors_are_read_only():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_default_dtype_is_float32():
    assert Tensor([1, 2]).data.dtype == np.float32
    with ag.precision(np.float64):
        assert Tensor([1, 2]).data.dtype == np.float64


def test_backward_requires_scalar_loss():
    x = Tensor(np.ones(3))
    with Tape() as tape:
        tape.watch(x)
        y = ag.scale(x, 2.0)
    with pytest.raises(TapeError):
        tape.gradient(y, [x])


def test_backward_rejects_unwatched_leaf():
    x, z = Tensor(np.ones(3)), Tensor(np.ones(3))
    with Tape() as tape:
        tape.watch(x)
        y = ag.sum_all(x)
    with pytest.raises(TapeError):
        tape.gradient(y, [z])


def test_non_participating_leaf_gets_zeros():
    x, unused = Tensor(np.ones(3)), Tensor(np.ones((2, 2)))
    with Tape() as tape:
        tape.watch(x, unused)
        y = ag.sum_all(ag.mul(x, x))
    grads = tape.gradient(y)
    np.testing.assert_array_equal(grads[unused].data, np.zeros((2, 2)))
    np.testing.assert_allclose(grads[x].data, 2 * np.ones(3))


def test_gradient_shapes_match_leaves():
    rng = np.random.default_rng(0)
    w, b = Tensor(rng.normal(size=(4, 3))), Tensor(np.zeros(4))
    x = Tensor(rng.normal(size=(5, 3)))
    with Tape() as tape:
        tape.watch(w, b)
        loss = ag.cross_entropy(ag.affine(x, w, b), np.array([0, 1, 2, 3, 0]))
    grads = tape.gradient(loss)
    assert grads[w].shape == w.shape and grads[b].shape == b.shape


def test_shared_subexpression_accumulates():
    x = Tensor(2.0)
    with Tape() as tape:
        tape.watch(x)
        y = ag.add(ag.mul(x, x), ag.mul(x, x))  # 2x^2
    assert tape.gradient(y, [x])[x].item() == pytest.approx(8.0)


# -------------------------------------------------------------- gradient checks

_rng0 = np.random.default_rng(12345)
W_SOFT = _rng0.normal(size=(3, 4))
G_CONV = _rng0.normal(size=(2, 3, 5, 5))

PRIMITIVES = {
    "affine": (lambda x, w, b: ag.sum_all(ag.mul(ag.affine(x, w, b), ag.affine(x, w, b))), [(3, 4), (2, 4), (2,)]),
    "conv2d": (lambda x, w, b: ag.sum_all(ag.mul(ag.conv2d(x, w, b), Tensor(G_CONV))), [(2, 2, 5, 5), (3, 2, 3, 3), (3,)]),
    "relu": (lambda x: ag.squared_l2(ag.relu(x)), [(4, 5)]),
    "avgpool2x2": (lambda x: ag.squared_l2(ag.avgpool2x2(x)), [(2, 2, 5, 4)]),
    "flatten": (lambda x: ag.squared_l2(ag.flatten(x), Tensor(np.arange(12.0).reshape(2, 6))), [(2, 3, 2)]),
    "mean_over_axis": (lambda x: ag.squared_l2(ag.mean_over_axis(x, 0)), [(5, 3)]),
    "softmax_with_temperature": (lambda x: ag.sum_all(ag.mul(ag.softmax(x, 0.7), Tensor(W_SOFT))), [(3, 4)]),
    "cross_entropy": (lambda x: ag.cross_entropy(x, np.array([0, 3, 1])), [(3, 4)]),
    "squared_l2": (lambda x, y: ag.squared_l2(x, y), [(3, 2), (3, 2)]),
    "scalar_combine": (lambda a, b: ag.scalar_combine([ag.sum_all(ag.mul(a, a)), ag.sum_all(b)], [0.3, -2.0]), [(3,), (2,)]),
    "sort": (lambda x: ag.sum_all(ag.mul(ag.sort(x, 0), Tensor(np.arange(12.0).reshape(4, 3)))), [(4, 3)]),
    "log_softmax": (lambda x: ag.sum_all(ag.mul(ag.log_softmax(x, 2.0), Tensor(W_SOFT))), [(3, 4)]),
    "normalize_rows": (lambda x: ag.sum_all(ag.mul(ag.normalize_rows(ag.absolute(x)), Tensor(W_SOFT))), [(3, 4)]),
    "power": (lambda x: ag.sum_all(ag.power(ag.absolute(x), 1.5)), [(3, 3)]),
    "div_log": (lambda a, b: ag.sum_all(ag.log(ag.div(ag.absolute(a), ag.absolute(b)))), [(4,), (4,)]),
    "stack_concat_rows": (
        lambda a, b: ag.add(
            ag.squared_l2(ag.rows(ag.concat([a, b]), 1, 3), Tensor(np.ones((2, 2)))),
            ag.squared_l2(ag.stack([ag.rows(a, 0, 1), b])),
        ),
        [(2, 2), (1, 2)],
    ),
    "matmul": (lambda a, b: ag.squared_l2(ag.matmul(a, b)), [(3, 4), (4, 2)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    fn, shapes = PRIMITIVES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    arrays = [rng.normal(size=s) + (0.5 if name in ("div_log", "power") else 0.0) for s in shapes]
    report = check_gradients(fn, arrays, probes=12, rng=rng)
    assert report.worst <= RTOL, report


def test_two_layer_network_gradient_probes():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(6, 5))
    labels = rng.integers(0, 3, size=6)

    def net(w1, b1, w2, b2):
        return ag.cross_entropy(ag.affine(ag.relu(ag.affine(Tensor(x), w1, b1)), w2, b2), labels)

    arrays = [rng.normal(size=(8, 5)), rng.normal(size=8) * 0.1, rng.normal(size=(3, 8)), np.zeros(3)]
    report = check_gradients(net, arrays, probes=10, rng=rng)
    assert report.worst <= RTOL


def test_tape_replay_is_bit_identical():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 1, 8, 8)).astype(np.float32)
    w = Tensor(rng.normal(size=(4, 1, 3, 3)))
    b = Tensor(rng.normal(size=4))

    def grads():
        with Tape() as tape:
            tape.watch(w, b)
            y = ag.squared_l2(ag.avgpool2x2(ag.relu(ag.conv2d(Tensor(x), w, b))))
        g = tape.gradient(y)
        return g[w].data.tobytes() + g[b].data.tobytes()

    assert grads() == grads()


# logit spread / tau stays below ~87 so exp() cannot underflow float32 to zero
finite = st.floats(-40, 40, allow_nan=False, width=32)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 7)), elements=finite), st.floats(1.0, 20))
def test_softmax_rows_are_distributions(z, tau):
    s = ag.softmax(Tensor(z), tau).data
    assert np.all(s > 0)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)
