"""Dense layer primitives with hand-derived backward passes.

Everything operates on 2-D float64 numpy arrays (batch rows, feature
columns). Each forward returns ``(out, cache)`` and the matching backward
consumes the upstream gradient plus that cache:

    d_input = d_out @ d(out)/d(input)     (chain rule, propagated back)
    d_param = d(loss)/d(param)            (accumulated for the optimizer)

No autograd graph: the network modules wire these calls up explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1  # weight of the current batch in the running-stat EMA
LOG_CLAMP = 1e-12


def _as2d(name: str, a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def linear_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray):
    """Affine map ``y = x @ W + b`` with the bias broadcast over rows.

    x: (B, din), W: (din, dout), b: (dout,). Returns (y, cache).
    """
    x = _as2d("x", x)
    W = _as2d("W", W)
    b = np.asarray(b, dtype=np.float64)
    if x.shape[1] != W.shape[0]:
        raise ValueError(f"linear: x has {x.shape[1]} columns but W expects {W.shape[0]}")
    if b.shape != (W.shape[1],):
        raise ValueError(f"linear: bias shape {b.shape} does not match dout={W.shape[1]}")
    out = x @ W + b
    return out, (x, W)


def linear_backward(d_out: np.ndarray, cache):
    """Gradients of the affine map.

        dx = d_out @ W^T,  dW = x^T @ d_out,  db = sum_rows(d_out)
    """
    x, W = cache
    d_out = np.asarray(d_out, dtype=np.float64)
    dx = d_out @ W.T
    dW = x.T @ d_out
    db = d_out.sum(axis=0)
    return dx, dW, db


def relu_forward(x: np.ndarray):
    out = np.maximum(x, 0.0)
    return out, x


def relu_backward(d_out: np.ndarray, cache) -> np.ndarray:
    # subgradient 0 at x == 0
    x = cache
    return d_out * (x > 0.0)


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
):
    """Batch normalization over the batch axis, per feature.

    Train mode normalizes by batch statistics (biased variance) and updates
    the running statistics in place:

        running <- (1 - momentum) * running + momentum * batch

    Eval mode normalizes by the running statistics and leaves them untouched.
    Requires B >= 2 in train mode (a single row has no batch variance).
    """
    x = _as2d("x", x)
    if train and x.shape[0] < 2:
        raise ValueError(f"batchnorm train mode needs batch size >= 2, got {x.shape[0]}")
    if train:
        mean = x.mean(axis=0)
        var = x.var(axis=0)  # biased (1/B), matches the backward below
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean) * inv_std
    out = gamma * x_hat + beta
    cache = (x_hat, inv_std, gamma, train)
    return out, cache


def batchnorm_backward(d_out: np.ndarray, cache):
    """Gradients of batch normalization.

    Train mode uses the full batch-statistics derivative:

        dx = (gamma * inv_std / B) * (B*dxh - sum(dxh) - xh * sum(dxh*xh))

    Eval mode (or frozen statistics) treats the normalization as a fixed
    affine map: dx = d_out * gamma * inv_std.
    """
    x_hat, inv_std, gamma, train = cache
    d_out = np.asarray(d_out, dtype=np.float64)
    dgamma = (d_out * x_hat).sum(axis=0)
    dbeta = d_out.sum(axis=0)
    dxh = d_out * gamma
    if train:
        B = x_hat.shape[0]
        dx = (inv_std / B) * (B * dxh - dxh.sum(axis=0) - x_hat * (dxh * x_hat).sum(axis=0))
    else:
        dx = dxh * inv_std
    return dx, dgamma, dbeta


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, computed with max subtraction for stability."""
    logits = _as2d("logits", logits)
    if logits.shape[1] < 2:
        raise ValueError("softmax needs at least 2 classes per row")
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_soft(q: np.ndarray, p: np.ndarray) -> float:
    """Soft-target cross entropy ``-(1/B) sum_b sum_k q_bk log p_bk``.

    q rows must be valid distributions (checked); q is a constant target,
    so no gradient ever flows into it. p is clamped at 1e-12 inside the log
    so saturated probabilities cannot produce -inf.
    """
    q = _as2d("q", q)
    p = _as2d("p", p)
    if q.shape != p.shape:
        raise ValueError(f"cross_entropy: target shape {q.shape} != probs shape {p.shape}")
    row_sums = q.sum(axis=1)
    if not np.all(np.abs(row_sums - 1.0) <= 1e-6):
        bad = int(np.argmax(np.abs(row_sums - 1.0)))
        raise ValueError(f"cross_entropy: target row {bad} sums to {row_sums[bad]!r}, not 1")
    return float(-(q * np.log(np.maximum(p, LOG_CLAMP))).sum() / q.shape[0])


def softmax_cross_entropy_grad(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Gradient of cross_entropy_soft(q, softmax(logits)) w.r.t. the logits.

    The softmax and log derivatives collapse to ``(p - q) / B`` with
    p = softmax(logits); q is treated as a constant.
    """
    return (p - q) / p.shape[0]


def grad_reverse_forward(x: np.ndarray) -> np.ndarray:
    """Identity in the forward pass; pairs with grad_reverse_backward."""
    return x


def grad_reverse_backward(d_out: np.ndarray, lam: float) -> np.ndarray:
    """Reversal in the backward pass: returns ``-lam * d_out``."""
    if lam < 0:
        raise ValueError(f"gradient reversal coefficient must be >= 0, got {lam}")
    return -lam * np.asarray(d_out, dtype=np.float64)


@dataclass
class AdamState:
    """Bias-corrected Adam moments for a named group of parameter tensors."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One Adam step over every tensor named in ``grads``, in place.

    Moments are lazily allocated to match each tensor's shape; the step
    counter advances once per call.
    """
    if lr <= 0:
        raise ValueError(f"adam lr must be > 0, got {lr}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ValueError(f"adam: gradient shape {g.shape} != param shape {p.shape} for {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def sgd_update(params: dict, grads: dict, lr: float) -> None:
    """Plain gradient step ``p <- p - lr * g`` over every tensor in grads."""
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ValueError(f"sgd: gradient shape {g.shape} != param shape {p.shape} for {name!r}")
        p -= lr * g
