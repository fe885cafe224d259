from __future__ import annotations

import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from fedinject import tensor as T
from fedinject.params import ParamTree
from fedinject.tensor import ContractError, ShapeError, Tensor

floats = st.floats(-3, 3, allow_nan=False, width=64)


def grad_of(fn, *arrays):
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with T.Tape() as tape:
        out = fn(*leaves)
    g = T.backward(tape, out)
    return out, [g.get(x) for x in leaves]


def fd_tree(**arrays) -> ParamTree:
    tree = ParamTree()
    for k, v in arrays.items():
        tree.add(k, np.asarray(v, dtype=np.float64))
    return tree


# ---------------------------------------------------------------- forward values


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    ref = np.array(oracles.matmul(a.tolist(), b.tolist()))
    np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, ref, rtol=0, atol=1e-13)


def test_batched_matmul_matches_per_batch_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2))
    out = T.matmul(Tensor(a), Tensor(b)).data
    for i in range(2):
        ref = np.array(oracles.matmul(a[i].tolist(), b[i].tolist()))
        np.testing.assert_allclose(out[i], ref, atol=1e-13)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)))
def test_softmax_matches_extended_precision(x):
    np.testing.assert_allclose(T.softmax(Tensor(x)).data, oracles.softmax(list(x)),
                               rtol=1e-12, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5),
                  elements=st.floats(-30, 30)))
def test_softmax_rows_are_distributions(x):
    y = T.softmax(Tensor(x), axis=-1).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_is_shift_invariant_and_stable():
    x = np.array([1000.0, 1001.0, 999.0])
    np.testing.assert_allclose(T.softmax(Tensor(x)).data, T.softmax(Tensor(x - 1000)).data,
                               atol=1e-15)
    assert np.all(np.isfinite(T.softmax(Tensor(x)).data))


def test_softmax_of_empty_is_contract_error():
    with pytest.raises(ContractError):
        T.softmax(Tensor(np.zeros((3, 0))))


def test_cross_entropy_matches_extended_precision():
    rng = np.random.default_rng(2)
    logits = rng.normal(scale=4, size=(6, 5))
    target = rng.integers(0, 5, size=6)
    w = rng.uniform(0.1, 1.0, size=6)
    got = T.cross_entropy(Tensor(logits), target, w).data
    ref = oracles.cross_entropy(logits.tolist(), target.tolist(), w.tolist())
    assert abs(float(got) - ref) <= 1e-12 * max(1.0, abs(ref))


def test_cross_entropy_rejects_bad_targets():
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(ShapeError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), [0])
    with pytest.raises(ContractError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), [0, 1], [0.0, 0.0])


def test_layer_norm_and_gelu_match_scalar_formulas():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 7))
    np.testing.assert_allclose(T.layer_norm(Tensor(x)).data,
                               [oracles.layer_norm(r) for r in x.tolist()], atol=1e-12)
    np.testing.assert_allclose(T.gelu(Tensor(x)).data,
                               [[oracles.gelu(v) for v in r] for r in x.tolist()], atol=1e-14)


def test_non_scalar_loss_is_contract_error():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        y = T.mul(x, 2.0)
    with pytest.raises(ContractError):
        T.backward(tape, y)


def test_nothing_is_recorded_without_a_tape_or_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    T.tanh(x)
    assert T.active_tape() is None
    with T.Tape() as tape:
        T.tanh(Tensor(np.ones(3)))
    assert len(tape) == 0


# ---------------------------------------------------------------- gradients


def test_gradient_accumulates_over_reuse():
    _, (g,) = grad_of(lambda x: T.tsum(T.mul(x, x)), np.array([1.0, -2.0, 3.0]))
    np.testing.assert_allclose(g, [2.0, -4.0, 6.0])


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)), elements=floats),
       hnp.arrays(np.float64, st.integers(1, 4), elements=floats))
def test_broadcast_add_gradient_sums_over_broadcast_axes(a, b):
    if a.shape[-1] != b.shape[-1]:
        b = np.resize(b, a.shape[-1])
    _, (ga, gb) = grad_of(lambda x, y: T.tsum(T.add(x, y)), a, b)
    np.testing.assert_allclose(ga, np.ones_like(a))
    np.testing.assert_allclose(gb, np.full(b.shape, a.shape[0]))


OPS = {
    "matmul": (lambda p: T.tsum(T.tanh(p["a"] @ p["b"])), dict(a=(3, 4), b=(4, 2))),
    "batched_matmul": (lambda p: T.tsum(T.square(T.matmul(p["a"], p["b"]))),
                       dict(a=(2, 3, 4), b=(4, 2))),
    "softmax": (lambda p: T.tsum(T.mul(T.softmax(p["a"], axis=0), p["b"])), dict(a=(4, 3), b=(4, 3))),
    "log_softmax": (lambda p: T.tsum(T.mul(T.log_softmax(p["a"]), p["b"])), dict(a=(2, 5), b=(2, 5))),
    "cross_entropy": (lambda p: T.cross_entropy(p["a"], [[0, 2], [1, 1]], [[1, 0.5], [1, 0]]),
                      dict(a=(2, 2, 3))),
    "layer_norm": (lambda p: T.tsum(T.mul(T.layer_norm(p["a"]), p["b"])), dict(a=(3, 6), b=(3, 6))),
    "gelu_exp": (lambda p: T.tsum(T.exp(T.mul(T.gelu(p["a"]), 0.3))), dict(a=(5,))),
    "log": (lambda p: T.tsum(T.log(T.add(T.square(p["a"]), 1.0))), dict(a=(4,))),
    "mean_reshape_transpose": (lambda p: T.tsum(T.square(T.transpose(
        T.reshape(T.mean(p["a"], axis=1), (2, 3))))), dict(a=(6, 4))),
    "index_take": (lambda p: T.tsum(T.mul(T.take(p["a"], np.array([0, 2, 0])),
                                          T.index(p["b"], slice(1, 4)))), dict(a=(3, 2), b=(5, 2))),
    "concat_stack": (lambda p: T.tsum(T.tanh(T.concat([p["a"], T.stack([p["b"], p["b"]])],
                                                      axis=0))), dict(a=(1, 3), b=(3,))),
    "linear_sub": (lambda p: T.tsum(T.square(T.sub(T.linear(p["x"], p["w"], p["b"]), 1.0))),
                   dict(x=(3, 4), w=(4, 2), b=(2,))),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_agree_with_finite_differences(name):
    fn, shapes = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    tree = fd_tree(**{k: rng.normal(size=s) for k, s in shapes.items()})
    report = T.finite_diff_check(fn, tree, step=1e-5, tol=1e-6)
    assert report.passed, str(report)


def test_finite_diff_check_reports_wrong_gradients():
    bogus = lambda x: T._emit(np.asarray((x.data ** 2).sum()), (x,), lambda g: (3 * x.data * g,))
    tree = fd_tree(x=np.array([1.0, 2.0]))
    report = T.finite_diff_check(lambda p: bogus(p["x"]), tree)
    assert not report.passed
    assert report.failures()[0].path == "x"


def test_finite_diff_check_skips_frozen_and_restores_values():
    tree = fd_tree(x=np.array([1.0, 2.0]))
    tree.add("y", np.array([3.0]), frozen=True)
    before = tree.digest()
    report = T.finite_diff_check(lambda p: T.tsum(T.mul(p["x"], p["y"])), tree)
    assert report.entries["y"].status == "frozen"
    assert report.passed and tree.digest() == before


def test_relative_error_floor():
    assert T.relative_error(0.0, 1e-9) == pytest.approx(1e-3)
    assert T.relative_error(2.0, 1.0) == pytest.approx(0.5)
