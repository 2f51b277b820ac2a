import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import erf

from coot import numcore as nc
from coot.numcore import Tensor


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------

def test_softmax_examples():
    np.testing.assert_allclose(nc.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    out = nc.softmax(Tensor([1000.0, 0.0])).data
    assert abs(out[0] - 1.0) <= 1e-7 and abs(out[1]) <= 1e-7


def test_softmax_matches_direct_oracle():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 4))
    want = np.exp(x) / np.exp(x).sum(axis=1, keepdims=True)
    got = nc.softmax(Tensor(x.astype(np.float32)), axis=1).data
    assert np.abs(got - want).max() <= 1e-6


def test_softmax_mask_zeroes_and_rejects_empty():
    x = Tensor(np.array([[1.0, 2.0, 3.0]], dtype=np.float32))
    out = nc.softmax(x, axis=1, mask=np.array([[True, False, True]])).data
    assert out[0, 1] == 0.0
    assert math.isclose(out.sum(), 1.0, rel_tol=1e-6)
    with pytest.raises(ValueError, match="empty sequence"):
        nc.softmax(x, axis=1, mask=np.zeros((1, 3), bool))


def test_gelu_examples():
    assert nc.gelu(Tensor([0.0])).data[0] == 0.0
    oracle = 1.0 * 0.5 * (1 + erf(1 / np.sqrt(2)))
    assert abs(nc.gelu(t64([1.0])).data[0] - oracle) <= 1e-5
    assert abs(nc.gelu(Tensor([1.0])).data[0] - 0.841345) <= 1e-5
    assert abs(nc.gelu(Tensor([-10.0])).data[0]) < 1e-6


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(3, np.float32)), Tensor(np.zeros(3, np.float32))
    np.testing.assert_array_equal(nc.layer_norm(Tensor([5.0, 5.0, 5.0]), one, zero).data, 0.0)
    got = nc.layer_norm(Tensor([1.0, 2.0, 3.0]), one, zero, eps=1e-5).data
    np.testing.assert_allclose(got, [-1.2247, 0.0, 1.2247], atol=1e-3)
    x = Tensor(np.random.default_rng(1).standard_normal((4, 3)).astype(np.float32))
    np.testing.assert_array_equal(nc.layer_norm(x, zero, zero).data, 0.0)


def test_layer_norm_rows_are_standardized():
    x = np.random.default_rng(2).standard_normal((5, 16)) * 3 + 1
    one, zero = t64(np.ones(16)), t64(np.zeros(16))
    y = nc.layer_norm(t64(x), one, zero, eps=1e-12).data
    np.testing.assert_allclose(y.mean(axis=1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=1), 1, atol=1e-9)


def test_cosine_distance_examples():
    assert nc.cosine_distance([1.0, 2.0], [1.0, 2.0]).data == pytest.approx(0.0, abs=1e-7)
    assert nc.cosine_distance([1.0, 2.0], [-1.0, -2.0]).data == pytest.approx(2.0, abs=1e-6)
    got = nc.cosine_distance(np.array([1.0, 0.0]), np.array([1.0, 1.0])).data
    assert got == pytest.approx(1 - 1 / math.sqrt(2), abs=1e-12)
    with pytest.raises(ValueError, match="degenerate vector"):
        nc.cosine_distance([0.0, 0.0], [1.0, 1.0])


def test_pairwise_cosine_matches_loop():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((4, 6)), rng.standard_normal((3, 6))
    got = nc.pairwise_cosine_distance(t64(a), t64(b)).data
    for i in range(4):
        for j in range(3):
            want = 1 - a[i] @ b[j] / np.linalg.norm(a[i]) / np.linalg.norm(b[j])
            assert got[i, j] == pytest.approx(want, abs=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_forward_raises():
    with pytest.raises(FloatingPointError):
        nc.log(Tensor([0.0]))
    with pytest.raises(FloatingPointError):
        nc.exp(Tensor([1000.0]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_unchecked_block_defers_the_finite_check():
    with nc.unchecked():
        assert np.isinf(nc.log(Tensor([0.0])).data).all()
    with pytest.raises(FloatingPointError):
        nc.log(Tensor([0.0]))
    # moving a non-finite leaf around is allowed; arithmetic on it is not
    bad = Tensor([np.inf, 1.0]).reshape(2, 1)
    with pytest.raises(FloatingPointError):
        bad * 2.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_rejects_non_finite_perturbations():
    w = Tensor(np.array([1e-3]), requires_grad=True)
    with pytest.raises(FloatingPointError):
        nc.grad_check(lambda: nc.log(w).sum(), [w], h=1e-2)


def test_zero_extent_rejected():
    with pytest.raises(ValueError):
        Tensor(np.zeros((0, 3)))


def test_dtype_is_preserved():
    assert nc.gelu(t64([1.0])).dtype == np.float64
    assert Tensor([1, 2]).dtype == np.float32
    assert nc.as_tensor(np.zeros(2)).dtype == np.float64


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def test_grad_check_quadratic():
    x = t64([1.0, 2.0])
    rep = nc.grad_check(lambda: (x * x).sum(), [x])
    analytic = [e.analytic for e in rep.entries]
    np.testing.assert_allclose(analytic, [2.0, 4.0])
    assert rep.max_rel_err < 1e-6


def test_grad_check_constant_function_gives_zero():
    x = t64([1.0, -3.0])
    rep = nc.grad_check(lambda: Tensor(np.array(5.0)) + (x * 0.0).sum(), [x])
    assert all(e.analytic == 0.0 and e.numeric == 0.0 for e in rep.entries)


def test_grad_check_restores_parameters():
    x = Tensor(np.array([0.5, 1.5], dtype=np.float32), requires_grad=True)
    before = x.data.copy()
    nc.grad_check(lambda: (x * x).sum(), [x])
    assert x.dtype == np.float32
    np.testing.assert_array_equal(x.data, before)


def test_grad_check_rejects_non_scalar():
    x = t64([1.0, 2.0])
    with pytest.raises(ValueError):
        nc.grad_check(lambda: x * 2.0, [x])


def _op_cases(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    w = rng.standard_normal((4, 5))
    mask = np.array([[1, 1, 0, 1], [1, 0, 1, 1], [0, 1, 1, 1]], bool)
    g, bb = rng.standard_normal(4), rng.standard_normal(4)
    # keep relu/max away from kinks and ties
    away = np.where(np.abs(a) < 0.1, 0.5, a)
    return {
        "add": ([a, b], lambda x, y: x + y),
        "sub": ([a, b], lambda x, y: x - y),
        "mul": ([a, b], lambda x, y: x * y),
        "div": ([a, pos], lambda x, y: x / y),
        "broadcast_add": ([a, b[:1]], lambda x, y: x + y),
        "power": ([pos], lambda x: x ** 3),
        "exp": ([a], nc.exp),
        "log": ([pos], nc.log),
        "sqrt": ([pos], nc.sqrt),
        "relu": ([away], nc.relu),
        "gelu": ([a], nc.gelu),
        "matmul": ([a, w], lambda x, y: x @ y),
        "batched_matmul": ([a.reshape(1, 3, 4), w], lambda x, y: x @ y),
        "transpose": ([a], lambda x: nc.transpose(x)),
        "swapaxes": ([a.reshape(3, 2, 2)], lambda x: nc.swapaxes(x, 0, 2)),
        "reshape": ([a], lambda x: x.reshape(4, 3)),
        "getitem": ([a], lambda x: x[1:, ::2]),
        "take_rows": ([a], lambda x: nc.take_rows(x, np.array([2, 0, 2]))),
        "concat": ([a, b], lambda x, y: nc.concat([x, y], axis=0)),
        "stack": ([a, b], lambda x, y: nc.stack([x, y], axis=1)),
        "sum_axis": ([a], lambda x: x.sum(axis=1)),
        "mean": ([a], lambda x: x.mean(axis=0)),
        "max_masked": ([a], lambda x: nc.max_(x, axis=1, mask=mask)),
        "softmax": ([a], lambda x: nc.softmax(x, axis=1)),
        "softmax_masked": ([a], lambda x: nc.softmax(x, axis=1, mask=mask)),
        "layer_norm": ([a, g, bb], lambda x, gg, bias: nc.layer_norm(x, gg, bias)),
        "l2_normalize": ([a], nc.l2_normalize),
        "pairwise_cosine": ([a, b], nc.pairwise_cosine_distance),
        "cosine_distance": ([a[0], b[0]], nc.cosine_distance),
        "mask_rows": ([a], lambda x: nc.mask_rows(x, mask[:, 0])),
    }


@pytest.mark.parametrize("name", sorted(_op_cases(np.random.default_rng(0))))
def test_every_op_passes_grad_check_in_float64(name):
    rng = np.random.default_rng(10)
    inputs, fn = _op_cases(rng)[name]
    params = [t64(x) for x in inputs]
    weights = Tensor(rng.standard_normal(np.shape(fn(*params).data)))

    def f():
        return (fn(*params) * weights).sum()

    rep = nc.grad_check(f, params, h=1e-4)
    assert rep.max_rel_err <= 1e-5, rep.worst(3)


@pytest.mark.parametrize("name", ["add", "mul", "matmul", "gelu", "softmax", "layer_norm", "l2_normalize"])
def test_ops_pass_grad_check_in_float32(name):
    rng = np.random.default_rng(11)
    inputs, fn = _op_cases(rng)[name]
    params = [Tensor(np.asarray(x, np.float32), requires_grad=True) for x in inputs]
    weights = Tensor(rng.standard_normal(np.shape(fn(*params).data)).astype(np.float32))
    # float32 differences resolve about eps32 * |f| / h ~ 1e-4 in absolute terms,
    # so gradients below 0.1 are compared against that floor
    rep = nc.grad_check(lambda: (fn(*params) * weights).sum(), params, h=1e-2,
                        dtype=np.float32, floor=0.1)
    assert rep.max_rel_err <= 1e-3, rep.worst(3)


def test_backward_accumulates_shared_inputs():
    x = t64([3.0])
    y = x * x + x
    y.sum().backward()
    assert x.grad[0] == pytest.approx(7.0)


def test_backward_is_bit_deterministic():
    rng = np.random.default_rng(4)
    a = rng.standard_normal((5, 8)).astype(np.float32)
    w = rng.standard_normal((8, 8)).astype(np.float32)

    def run():
        x = Tensor(a, requires_grad=True)
        W = Tensor(w, requires_grad=True)
        h = nc.gelu(x @ W)
        loss = (nc.softmax(h, axis=1) * h).sum() + nc.layer_norm(h, Tensor(np.ones(8, np.float32)),
                                                                 Tensor(np.zeros(8, np.float32))).sum()
        loss.backward()
        return x.grad.copy(), W.grad.copy()

    g1, g2 = run(), run()
    for p, q in zip(g1, g2):
        assert p.tobytes() == q.tobytes()


def test_no_grad_records_nothing():
    x = t64([1.0, 2.0])
    with nc.no_grad():
        y = x * 2.0
    assert y._backward is None and not y._parents


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------

finite_rows = st.lists(st.floats(-1e3, 1e3, allow_nan=False, width=32), min_size=2, max_size=8)


@settings(max_examples=60, deadline=None)
@given(finite_rows, st.data())
def test_softmax_is_a_distribution_over_valid_positions(row, data):
    mask = np.array(data.draw(st.lists(st.booleans(), min_size=len(row), max_size=len(row))))
    if not mask.any():
        mask[0] = True
    out = nc.softmax(Tensor(np.array([row], np.float32)), axis=1, mask=mask[None]).data[0]
    assert (out >= 0).all()
    assert (out[~mask] == 0).all()
    assert out.sum() == pytest.approx(1.0, abs=1e-5)


@settings(max_examples=40, deadline=None)
@given(finite_rows, st.integers(0, 2**32 - 1))
def test_masked_entries_never_influence_softmax(row, seed):
    x = np.array([row], np.float32)
    mask = np.ones_like(x, bool)
    mask[0, -1] = False
    y = x.copy()
    y[0, -1] = np.random.default_rng(seed).uniform(-1e3, 1e3)
    a = nc.softmax(Tensor(x), axis=1, mask=mask).data
    b = nc.softmax(Tensor(y), axis=1, mask=mask).data
    assert a.tobytes() == b.tobytes()


@settings(max_examples=40, deadline=None)
@given(finite_rows)
def test_model_ops_stay_finite_for_bounded_inputs(row):
    x = Tensor(np.array([row, row[::-1]], np.float32))
    d = x.shape[1]
    nc.softmax(x, axis=1)
    nc.gelu(x)
    nc.layer_norm(x, Tensor(np.ones(d, np.float32)), Tensor(np.zeros(d, np.float32)))
    x @ nc.transpose(x)
    # squares of tiny float32 values underflow to an exactly zero norm
    if (x.data * x.data).sum(axis=1).min() > 0:
        nc.l2_normalize(x)
