"""Shared oracles for the test suite.

Everything here recomputes expected values by a route independent of the
library code under test: explicit scalar loops, math.exp/tanh on python
floats, and central finite differences.
"""
from __future__ import annotations

import math

import numpy as np

from avfuse.autodiff import Tensor, backward


def loop_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop matrix product on python floats."""
    p, q = a.shape
    q2, r = b.shape
    assert q == q2
    out = np.zeros((p, r))
    for i in range(p):
        for j in range(r):
            acc = 0.0
            for t in range(q):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def scalar_softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row softmax computed element by element with math.exp."""
    out = np.zeros_like(x)
    for i in range(x.shape[0]):
        row = [float(v) for v in x[i]]
        mx = max(row)
        exps = [math.exp(v - mx) for v in row]
        total = sum(exps)
        out[i] = [e / total for e in exps]
    return out


def scalar_layer_norm(x: np.ndarray, gain: np.ndarray, shift: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    out = np.zeros_like(x)
    d = x.shape[1]
    for i in range(x.shape[0]):
        row = [float(v) for v in x[i]]
        mu = sum(row) / d
        var = sum((v - mu) ** 2 for v in row) / d
        inv = 1.0 / math.sqrt(var + eps)
        for j in range(d):
            out[i, j] = (row[j] - mu) * inv * float(gain[j]) + float(shift[j])
    return out


def scalar_gelu(x: float) -> float:
    c0 = 0.7978845608028654
    c1 = 0.044715
    return 0.5 * x * (1.0 + math.tanh(c0 * (x + c1 * x**3)))


def scalar_cma(q: np.ndarray, k: np.ndarray, v: np.ndarray, gate: float, scaled: bool = True) -> np.ndarray:
    """Gated cross-attention with query residual, all in scalar loops."""
    scores = loop_matmul(q, k.T)
    if scaled:
        scores = scores / math.sqrt(q.shape[1])
    attn = scalar_softmax_rows(scores)
    return q + gate * loop_matmul(attn, v)


def block_diag_from_grouped(w: np.ndarray) -> np.ndarray:
    """Expand a (G, din/G, dout/G) grouped weight into its dense
    block-diagonal equivalent."""
    groups, gin, gout = w.shape
    dense = np.zeros((groups * gin, groups * gout))
    for g in range(groups):
        dense[g * gin : (g + 1) * gin, g * gout : (g + 1) * gout] = w[g]
    return dense


def numeric_grad(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences on a plain array-valued function of one array."""
    out = np.zeros_like(arr)
    flat = arr.reshape(-1)
    oflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(arr)
        flat[i] = orig - h
        fm = f(arr)
        flat[i] = orig
        oflat[i] = (fp - fm) / (2.0 * h)
    return out


def check_gradients(make_loss, params: list[Tensor], h: float = 1e-5, rtol: float = 1e-6, atol: float = 1e-9):
    """Compare analytic gradients of make_loss() against finite differences
    for every coordinate of every tensor in ``params``.

    ``make_loss`` rebuilds the graph from the live params each call. The
    relative tolerance applies where either gradient is meaningfully sized;
    near-zero pairs fall back to the absolute tolerance.
    """
    loss = make_loss()
    for p in params:
        p.grad = None
    backward(loss)
    analytic = [None if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, got in zip(params, analytic):
        assert got is not None, "parameter received no gradient"
        flat = p.data.reshape(-1)
        gflat = got.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = make_loss().item()
            flat[i] = orig - h
            fm = make_loss().item()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            a = gflat[i]
            denom = max(abs(a), abs(fd))
            if denom > 1e-4:
                rel = abs(a - fd) / denom
                assert rel < rtol, f"rel err {rel} at coord {i}: analytic {a} vs fd {fd}"
                worst = max(worst, rel)
            else:
                assert abs(a - fd) < atol, f"abs err {abs(a - fd)} at coord {i}"
    return worst
