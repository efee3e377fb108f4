import numpy as np
import pytest
from hypothesis import given, strategies as st

from tavit import tensor as T
from tavit.attention import attention, attention_naive, attention_tiled
from tavit.tensor import ShapeError, Tensor


def qkv(rng, b, t, d, dtype, tk=None):
    tk = t if tk is None else tk
    return (Tensor(rng.standard_normal((b, t, d)).astype(dtype)),
            Tensor(rng.standard_normal((b, tk, d)).astype(dtype)),
            Tensor(rng.standard_normal((b, tk, d)).astype(dtype)))


def test_naive_matches_closed_form(f64, rng):
    q, k, v = qkv(rng, 1, 3, 2, np.float64)
    logits = q.data[0] @ k.data[0].T / np.sqrt(2)
    p = np.exp(logits - logits.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    np.testing.assert_allclose(attention_naive(q, k, v).data[0], p @ v.data[0], rtol=1e-13)


@pytest.mark.parametrize("tile", [1, 3, 16, 64, 300])
def test_tiled_equals_naive_for_any_tile(f64, rng, tile):
    q, k, v = qkv(rng, 2, 37, 8, np.float64, tk=29)
    np.testing.assert_allclose(attention_tiled(q, k, v, tile).data, attention_naive(q, k, v).data,
                               atol=1e-12)


def test_tiled_invariant_to_kv_tile_order(f64, rng):
    q, k, v = qkv(rng, 1, 20, 4, np.float64)
    a = attention_tiled(q, k, v, tile=4).data
    b = attention_tiled(q, k, v, tile=4, kv_order=[4, 2, 0, 3, 1]).data
    np.testing.assert_allclose(a, b, atol=1e-13)
    with pytest.raises(ValueError):
        attention_tiled(q, k, v, tile=4, kv_order=[0, 1])


def test_tiled_survives_huge_logits(f64):
    q = Tensor(np.full((1, 4, 2), 300.0))
    k = Tensor(np.array([[[300.0, 300.0], [-300.0, 0.0], [1.0, 1.0], [300.0, 299.0]]]))
    v = Tensor(np.eye(4)[None, :, :2])
    out = attention_tiled(q, k, v, tile=1).data
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out, attention_naive(q, k, v).data, atol=1e-12)


def test_tiled_backward_matches_naive(f64, rng):
    grads = []
    for fn in (attention_naive, lambda q, k, v: attention_tiled(q, k, v, tile=5)):
        q, k, v = (Tensor(t.data, requires_grad=True) for t in qkv(np.random.default_rng(3), 2, 13, 4, np.float64))
        w = np.random.default_rng(4).standard_normal((2, 13, 4))
        T.tsum(T.mul(fn(q, k, v), Tensor(w))).backward()
        grads.append((q.grad, k.grad, v.grad))
    for a, b in zip(*grads):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_shape_errors(rng):
    with pytest.raises(ShapeError):
        attention_tiled(Tensor(np.zeros((1, 3, 4))), Tensor(np.zeros((1, 3, 5))), Tensor(np.zeros((1, 3, 5))))
    with pytest.raises(ShapeError):
        attention_naive(Tensor(np.zeros((1, 3, 4))), Tensor(np.zeros((1, 3, 4))), Tensor(np.zeros((1, 2, 4))))
    with pytest.raises(ValueError):
        attention(*qkv(rng, 1, 2, 2, np.float32), kind="sparse")


@given(t=st.integers(1, 40), tk=st.integers(1, 40), d=st.integers(1, 6), tile=st.integers(1, 17),
       seed=st.integers(0, 10_000))
def test_property_tiled_exact(t, tk, d, tile, seed):
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        q, k, v = qkv(rng, 1, t, d, np.float64, tk)
        assert np.max(np.abs(attention_tiled(q, k, v, tile).data - attention_naive(q, k, v).data)) <= 1e-10


@given(seed=st.integers(0, 10_000), t=st.integers(2, 30))
def test_property_rows_are_convex_combinations(seed, t):
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        q, k, _ = qkv(rng, 1, t, 3, np.float64)
        v = Tensor(np.ones((1, t, 2)))
        np.testing.assert_allclose(attention_tiled(q, k, v, tile=4).data, 1.0, atol=1e-12)
