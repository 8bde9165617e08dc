import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aston import nncore as nn
from aston.nncore import GruLayer, Parameter, Tensor


def numeric_grad(f, arr, h=1e-5, order=2):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``arr`` (in place).

    ``order=4`` uses the five-point stencil, accurate enough for entries far
    below the largest gradient of the group.
    """
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]

        def at(delta):
            arr[idx] = orig + delta
            return f()

        if order == 2:
            grad[idx] = (at(h) - at(-h)) / (2 * h)
        else:
            grad[idx] = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h)
        arr[idx] = orig
    return grad


def rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def check(build, leaves, tol=1e-6):
    """``build()`` returns a scalar Tensor from ``leaves``; compare reverse mode to FD."""
    out = build()
    for leaf in leaves:
        leaf.grad = np.zeros_like(leaf.data) if isinstance(leaf, Parameter) else None
    out = build()
    out.backward()
    for leaf in leaves:
        fd = numeric_grad(lambda: float(build().data), leaf.data)
        got = leaf.grad if leaf.grad is not None else np.zeros_like(fd)
        assert rel_err(got, fd) < tol, leaf


def f64(shape, rng, scale=1.0):
    return Tensor(rng.normal(0, scale, size=shape), requires_grad=True, dtype=np.float64)


@pytest.fixture(autouse=True)
def double_precision():
    with nn.precision(np.float64):
        yield


# -- gru_step -----------------------------------------------------------------


def test_gru_zero_weights_zero_state():
    layer = GruLayer(4, 3)  # no rng -> zero weights
    h = nn.gru_step(layer, Tensor(np.ones((2, 4))), Tensor(np.zeros((2, 3))))
    assert np.all(h.data == 0.0)


def test_gru_scalar_oracle():
    layer = GruLayer(1, 1)
    # [z, r, candidate] layout
    layer.w_input.data[:] = [[0.5, -0.3, 0.8]]
    layer.w_hidden.data[:] = [[0.2, 0.4, -0.6]]
    layer.bias.data[:] = [0.1, -0.2, 0.05]
    x, hp = 0.7, -0.4
    z = 1 / (1 + math.exp(-(0.5 * x + 0.2 * hp + 0.1)))
    r = 1 / (1 + math.exp(-(-0.3 * x + 0.4 * hp - 0.2)))
    cand = math.tanh(0.8 * x + (-0.6) * (r * hp) + 0.05)
    expected = z * hp + (1 - z) * cand
    out = nn.gru_step(layer, Tensor([[x]]), Tensor([[hp]]))
    assert out.data[0, 0] == pytest.approx(expected, abs=1e-12)


def test_gru_gradients_match_fd():
    rng = np.random.default_rng(0)
    layer = GruLayer(4, 5, rng)
    x = f64((3, 4), rng)
    h = f64((3, 5), rng)
    proj = Tensor(rng.normal(size=(3, 5)))
    leaves = [x, h] + layer.parameters()
    check(lambda: nn.sum_all(nn.mul(nn.gru_step(layer, x, h), proj)), leaves)


def test_gru_masked_rows_keep_state():
    rng = np.random.default_rng(1)
    layer = GruLayer(2, 3, rng)
    x = f64((3, 2), rng)
    h = f64((3, 3), rng)
    mask = np.array([1.0, 0.0, 1.0])
    out = nn.gru_step(layer, x, h, mask)
    assert np.array_equal(out.data[1], h.data[1])
    proj = Tensor(rng.normal(size=(3, 3)))
    check(lambda: nn.sum_all(nn.mul(nn.gru_step(layer, x, h, mask), proj)), [x, h] + layer.parameters())


def test_gru_shape_mismatch():
    layer = GruLayer(2, 3)
    with pytest.raises(ValueError):
        nn.gru_step(layer, Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 3))))


# -- softmax / cross entropy -------------------------------------------------


def test_softmax_values():
    assert np.allclose(nn.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)
    assert np.allclose(nn.softmax(Tensor([1.0, 2.0, 3.0])).data, [0.0900, 0.2447, 0.6652], atol=1e-4)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
def test_softmax_shift_invariant(xs, c):
    a = nn.softmax(Tensor(xs)).data
    b = nn.softmax(Tensor(np.asarray(xs) + c)).data
    assert np.allclose(a, b, atol=1e-9)
    assert a.sum() == pytest.approx(1.0)


def test_softmax_mask_and_extremes():
    y = nn.softmax(Tensor([[1.0, 1000.0, -1000.0]]), mask=np.array([[True, False, True]])).data
    assert y[0, 1] == 0.0 and y.sum() == pytest.approx(1.0)
    assert np.all(np.isfinite(nn.softmax(Tensor([1e4, -1e4])).data))


def test_softmax_gradient():
    rng = np.random.default_rng(2)
    x = f64((2, 4), rng)
    w = Tensor(rng.normal(size=(2, 4)))
    mask = np.array([[True, True, False, True], [True, True, True, True]])
    check(lambda: nn.sum_all(nn.mul(nn.softmax(x, mask), w)), [x])


def test_cross_entropy_values():
    for c in (2, 5, 9):
        assert float(nn.cross_entropy(Tensor(np.zeros(c)), c - 1).data) == pytest.approx(math.log(c))
    assert float(nn.cross_entropy(Tensor([10.0, 0.0]), 0).data) == pytest.approx(4.54e-5, rel=1e-3)
    with pytest.raises(IndexError):
        nn.cross_entropy(Tensor([1.0, 2.0]), 2)


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6), st.data())
def test_cross_entropy_non_negative(xs, data):
    t = data.draw(st.integers(0, len(xs) - 1))
    assert float(nn.cross_entropy(Tensor(xs), t).data) >= 0.0


def test_cross_entropy_gradient():
    rng = np.random.default_rng(3)
    x = f64((2, 3, 5), rng)
    targets = rng.integers(0, 5, size=(2, 3))
    check(lambda: nn.cross_entropy(x, targets), [x])


# -- other differentiable ops ------------------------------------------------


OPS = {
    "add_broadcast": lambda a, b: nn.add(a, nn.reshape(b, (1, 3))),
    "sub": lambda a, b: nn.sub(a, nn.reshape(b, (1, 3))),
    "mul": lambda a, b: nn.mul(a, nn.reshape(b, (1, 3))),
    "tanh": lambda a, b: nn.tanh(a),
    "sigmoid": lambda a, b: nn.sigmoid(a),
    "matmul": lambda a, b: nn.matmul(a, nn.reshape(b, (3, 1))),
    "concat": lambda a, b: nn.concat([a, nn.reshape(b, (1, 3))], axis=0),
    "stack": lambda a, b: nn.stack([a, a], axis=1),
    "scale": lambda a, b: nn.scale(a, 0.3),
    "weighted_sum": lambda a, b: nn.weighted_sum(nn.softmax(a), nn.stack([a, a, a], axis=2)),
}


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(sorted(OPS)), st.integers(0, 10_000))
def test_op_gradients_match_fd(name, seed):
    rng = np.random.default_rng(seed)
    a = f64((2, 3), rng)
    b = f64((3,), rng)
    op = OPS[name]
    out_shape = op(a, b).shape
    proj = Tensor(rng.normal(size=out_shape))
    check(lambda: nn.sum_all(nn.mul(op(a, b), proj)), [a, b], tol=1e-5)


def test_embedding_lookup():
    table = Parameter(np.arange(12.0).reshape(4, 3))
    rows = nn.embedding_lookup(table, [0, 0])
    assert np.array_equal(rows.data[0], rows.data[1])
    assert np.array_equal(nn.embedding_lookup(table, [0]).data[0], table.data[0])  # PAD row
    with pytest.raises(IndexError):
        nn.embedding_lookup(table, [4])


def test_embedding_gradient():
    rng = np.random.default_rng(4)
    table = Parameter(rng.normal(size=(5, 3)))
    ids = np.array([[1, 3], [3, 0]])
    proj = Tensor(rng.normal(size=(2, 2, 3)))
    check(lambda: nn.sum_all(nn.mul(nn.embedding_lookup(table, ids), proj)), [table])


# -- dropout -------------------------------------------------------------------


def test_dropout_identity_cases():
    x = Tensor(np.ones((4, 4)))
    rng = np.random.default_rng(0)
    assert nn.dropout(x, 0.0, True, rng) is x
    assert nn.dropout(x, 0.5, False, rng) is x
    with pytest.raises(ValueError):
        nn.dropout(x, 1.0, True, rng)


def test_dropout_preserves_expectation():
    x = Tensor(np.ones(100_000))
    y = nn.dropout(x, 0.1, True, np.random.default_rng(5)).data
    assert abs(y.mean() - 1.0) < 0.01
    assert np.allclose(np.unique(y), [0.0, 1 / 0.9])


# -- adam ----------------------------------------------------------------------


def test_adam_first_step_is_lr_sign():
    p = Parameter(np.zeros(4))
    p.grad = np.array([3.0, -0.01, 7.0, -2.0])
    nn.adam_step([p], lr=0.005)
    assert np.allclose(p.data, -0.005 * np.sign([3.0, -0.01, 7.0, -2.0]), rtol=1e-5)
    assert p.step_count == 1
    assert np.all(p.grad == 0)


def test_adam_zero_gradient_no_change():
    p = Parameter(np.array([1.0, -2.0]))
    nn.adam_step([p], lr=0.1)
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adam_deterministic_and_converges():
    def run():
        rng = np.random.default_rng(11)
        target = rng.normal(size=5)
        p = Parameter(np.zeros(5))
        for _ in range(300):
            diff = nn.sub(p, Tensor(target))
            nn.sum_all(nn.mul(diff, diff)).backward()
            nn.adam_step([p], lr=0.05)
        return p.data.copy(), target

    a, target = run()
    b, _ = run()
    assert a.tobytes() == b.tobytes()
    assert np.allclose(a, target, atol=1e-2)


def test_adam_clipping_knob():
    p = Parameter(np.zeros(2))
    p.grad = np.array([30.0, 40.0])
    nn.adam_step([p], lr=1.0, clip_norm=5.0)
    assert np.all(np.isfinite(p.data))


# -- plumbing -------------------------------------------------------------------


def test_non_finite_is_checked():
    with pytest.raises(nn.NonFiniteError):
        nn.mul(Tensor([np.inf]), Tensor([1.0]))


def test_no_grad_records_nothing():
    p = Parameter(np.ones(3))
    with nn.no_grad():
        out = nn.sum_all(nn.mul(p, p))
    assert not out.requires_grad and out._backward is None


def test_precision_switch():
    with nn.precision(np.float32):
        assert Parameter(np.ones(2)).data.dtype == np.float32
    assert Parameter(np.ones(2)).data.dtype == np.float64
