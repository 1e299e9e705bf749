import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group

from rdistill.cka import center_gram, centering_matrix, cka, cka_loss, gram, hsic
from rdistill.errors import DegenerateBatch, DegenerateFeatures, InvalidInput, ShapeMismatch


# independent oracles, plain numpy

def gram_loops(x):
    n = x.shape[0]
    K = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            K[i, j] = sum(x[i, k] * x[j, k] for k in range(x.shape[1]))
    return K


def hsic_explicit_h(K, L):
    n = K.shape[0]
    H = np.eye(n) - np.ones((n, n)) / n
    return np.trace(K @ H @ L @ H) / (n - 1) ** 2


def cka_cross_cov(x, y):
    xc = x - x.mean(0)
    yc = y - y.mean(0)
    num = np.linalg.norm(yc.T @ xc, "fro") ** 2
    return num / (np.linalg.norm(xc.T @ xc, "fro") * np.linalg.norm(yc.T @ yc, "fro"))


def rand(seed, n, d):
    return np.random.default_rng(seed).standard_normal((n, d))


shapes = st.tuples(st.integers(0, 2**31), st.integers(2, 32), st.integers(1, 64))


def test_gram_matches_loops():
    x = rand(0, 5, 3)
    np.testing.assert_allclose(gram(x).numpy(), gram_loops(x), atol=1e-12)


def test_center_gram_examples():
    assert torch.equal(center_gram(np.ones((3, 3))), torch.zeros(3, 3, dtype=torch.float64))
    out = center_gram(np.array([[1.0, 2.0], [2.0, 4.0]])).numpy()
    np.testing.assert_allclose(out, [[0.25, -0.25], [-0.25, 0.25]], atol=1e-15)


def test_center_gram_matches_explicit_h_and_is_idempotent():
    K = gram(rand(1, 7, 4))
    H = centering_matrix(7)
    Kc = center_gram(K)
    torch.testing.assert_close(Kc, H @ K @ H, atol=1e-10, rtol=0)
    torch.testing.assert_close(center_gram(Kc), Kc, atol=1e-10, rtol=0)
    assert Kc.sum(1).abs().max() < 1e-10


def test_center_gram_errors():
    with pytest.raises(DegenerateBatch):
        center_gram(np.ones((1, 1)))
    with pytest.raises(ShapeMismatch):
        center_gram(np.ones((2, 3)))


def test_hsic_constant_features_is_zero():
    K = gram(np.ones((5, 3)) * 2.5)
    L = gram(rand(2, 5, 4))
    assert abs(hsic(K, L).item()) < 1e-12


def test_hsic_symmetric_exact():
    K, L = gram(rand(3, 5, 5)), gram(rand(4, 5, 2))
    assert hsic(K, L).item() == hsic(L, K).item()


@pytest.mark.parametrize("seed", range(10))
def test_hsic_matches_explicit_h_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    x, y = rng.standard_normal((n, 3)), rng.standard_normal((n, 6))
    expected = hsic_explicit_h(gram_loops(x), gram_loops(y))
    assert abs(hsic(gram(x), gram(y)).item() - expected) < 1e-10


def test_hsic_errors():
    with pytest.raises(ShapeMismatch):
        hsic(np.eye(3), np.eye(4))
    with pytest.raises(DegenerateBatch):
        hsic(np.eye(1), np.eye(1))


def test_cka_self_is_one():
    x = rand(5, 20, 6)
    assert abs(cka(x, x).item() - 1.0) < 1e-10
    assert cka_loss(x, x).item() == pytest.approx(-1.0, abs=1e-10)


def test_cka_independent_matrices_vs_oracle():
    x, y = rand(6, 64, 16), rand(7, 64, 16)
    v = cka(x, y).item()
    assert 0.0 < v < 0.3
    assert abs(v - cka_cross_cov(x, y)) < 1e-8


def test_cka_zero_column_invariance():
    x, y = rand(8, 10, 4), rand(9, 10, 3)
    y0 = np.concatenate([y, np.zeros((10, 1))], axis=1)
    assert abs(cka_loss(x, y).item() - cka_loss(x, y0).item()) < 1e-12


def test_cka_degenerate_and_invalid():
    x = rand(10, 6, 3)
    with pytest.raises(DegenerateFeatures):
        cka(x, np.ones((6, 3)))
    with pytest.raises(DegenerateBatch):
        cka(x[:1], x[:1])
    with pytest.raises(ShapeMismatch):
        cka(x, x[:5])
    bad = x.copy()
    bad[0, 0] = np.nan
    with pytest.raises(InvalidInput):
        cka(bad, x)


def test_cka_preserves_dtype_and_gradient():
    x = torch.randn(8, 4, generator=torch.Generator().manual_seed(0))
    y = torch.randn(8, 5, generator=torch.Generator().manual_seed(1), requires_grad=True)
    out = cka_loss(x, y)
    assert out.dtype == torch.float32
    out.backward()
    assert y.grad is not None and torch.isfinite(y.grad).all()


# properties

@settings(max_examples=200, deadline=None)
@given(shapes)
def test_prop_orthogonal_invariance(args):
    seed, n, d = args
    x = rand(seed, n, d)
    q = ortho_group.rvs(d, random_state=seed % 2**32) if d > 1 else np.array([[-1.0]])
    assert abs(cka(x, x @ q).item() - 1.0) < 1e-8


@settings(max_examples=200, deadline=None)
@given(shapes, st.sampled_from([1e-3, 1.0, 1e3, -2.0]))
def test_prop_scaling_invariance(args, c):
    seed, n, d = args
    x = rand(seed, n, d)
    assert abs(cka(x, c * x).item() - 1.0) < 1e-8


@settings(max_examples=200, deadline=None)
@given(shapes, st.integers(1, 64))
def test_prop_range_and_oracle(args, d2):
    seed, n, d = args
    x, y = rand(seed, n, d), rand(seed + 1, n, d2)
    v = cka(x, y).item()
    assert -1e-10 <= v <= 1 + 1e-10
    assert abs(v - cka_cross_cov(x, y)) < 1e-8


@settings(max_examples=200, deadline=None)
@given(shapes, st.integers(1, 64))
def test_prop_permutation_equivariance(args, d2):
    seed, n, d = args
    x, y = rand(seed, n, d), rand(seed + 1, n, d2)
    p = np.random.default_rng(seed).permutation(n)
    assert abs(cka(x, y).item() - cka(x[p], y[p]).item()) < 1e-12


@settings(max_examples=200, deadline=None)
@given(shapes)
def test_prop_self_similarity(args):
    seed, n, d = args
    x = rand(seed, n, d)
    assert abs(cka(x, x).item() - 1.0) < 1e-10
