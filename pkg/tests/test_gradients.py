"""Autograd gradients against central finite differences of independent numpy objectives."""

import numpy as np
import pytest
import torch

from rdistill.cka import cka_loss, gram, hsic
from rdistill.losses import kl_distill

STEP = 1e-4


def central_diff(fn, x):
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        hi, lo = x.copy(), x.copy()
        hi[idx] += STEP
        lo[idx] -= STEP
        g[idx] = (fn(hi) - fn(lo)) / (2 * STEP)
    return g


def rel_err(analytic, numeric):
    return np.abs(analytic - numeric).max() / max(np.abs(numeric).max(), 1e-12)


def np_cka_loss(x, y):
    xc, yc = x - x.mean(0), y - y.mean(0)
    num = np.linalg.norm(yc.T @ xc) ** 2
    return -num / (np.linalg.norm(xc.T @ xc) * np.linalg.norm(yc.T @ yc))


def np_hsic(x, y):
    n = x.shape[0]
    H = np.eye(n) - 1.0 / n
    return np.trace(x @ x.T @ H @ y @ y.T @ H) / (n - 1) ** 2


def np_kl(zt, zs, T):
    def log_softmax(z):
        z = z / T
        m = z.max(1, keepdims=True)
        return z - m - np.log(np.exp(z - m).sum(1, keepdims=True))

    lt, ls = log_softmax(zt), log_softmax(zs)
    return (np.exp(lt) * (lt - ls)).sum(1).mean() * T**2


def autograd(fn, *arrays):
    ts = [torch.tensor(a, dtype=torch.float64, requires_grad=True) for a in arrays]
    fn(*ts).backward()
    return [t.grad.numpy() for t in ts]


@pytest.mark.parametrize("seed", range(10))
def test_cka_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((8, 4)), rng.standard_normal((8, 4))
    gx, gy = autograd(cka_loss, x, y)
    assert rel_err(gx, central_diff(lambda a: np_cka_loss(a, y), x)) < 1e-4
    assert rel_err(gy, central_diff(lambda b: np_cka_loss(x, b), y)) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_hsic_gradient(seed):
    rng = np.random.default_rng(100 + seed)
    x, y = rng.standard_normal((6, 3)), rng.standard_normal((6, 2))
    gx, _ = autograd(lambda a, b: hsic(gram(a), gram(b)), x, y)
    assert rel_err(gx, central_diff(lambda a: np_hsic(a, y), x)) < 1e-4


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("T", [1.0, 4.0])
def test_kl_gradient(seed, T):
    rng = np.random.default_rng(200 + seed)
    zt, zs = rng.standard_normal((6, 5)) * 2, rng.standard_normal((6, 5)) * 2
    gt, gs = autograd(lambda a, b: kl_distill(a, b, T), zt, zs)
    assert rel_err(gt, central_diff(lambda a: np_kl(a, zs, T), zt)) < 1e-4
    assert rel_err(gs, central_diff(lambda b: np_kl(zt, b, T), zs)) < 1e-4
