"""Finite-difference and closed-form checks over every op and loss graph.

:func:`run_suite` returns one :class:`CheckResult` per named check.  Gradient
checks use central differences at h=1e-5 and pass below 1e-4 relative error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .losses import LossWeights, combine, info_nce, masked_mse, mixed_key, relational_kl, total_loss

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    value: float
    passed: bool
    kind: str = "grad"  # "grad" (value = max rel. error) or "oracle" (value = abs. error)


def _unit(g, shape):
    x = g.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _leaf(x):
    return T.Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def op_graphs(seed=0):
    """One small randomized graph per op kind: name -> (builder, params)."""
    g = np.random.default_rng(seed)
    a = _leaf(g.normal(size=(3, 4)))
    b = _leaf(g.normal(size=(3, 4)))
    m = _leaf(g.normal(size=(4, 5)))
    pos = _leaf(g.uniform(0.5, 2.0, size=(3, 4)))
    w = g.normal(size=(3, 4))
    w5 = g.normal(size=(3, 5))

    def weighted(t, wt=w):
        return T.sum(T.mul(t, wt))

    x = _leaf(g.normal(size=(2, 5, 3)))
    wx = _leaf(g.uniform(-0.6, 0.6, size=(3, 6)))
    wh = _leaf(g.uniform(-0.6, 0.6, size=(2, 6)))
    bx = _leaf(g.uniform(-0.6, 0.6, size=6))
    bh = _leaf(g.uniform(-0.6, 0.6, size=6))
    wg = g.normal(size=(2, 5, 2))

    return {
        "add": (lambda: weighted(T.add(a, b)), [a, b]),
        "sub": (lambda: weighted(T.sub(a, b)), [a, b]),
        "mul": (lambda: weighted(T.mul(a, b)), [a, b]),
        "scalar-mul": (lambda: weighted(T.scale(a, -1.7)), [a]),
        "matmul": (lambda: weighted(T.matmul(a, m), w5), [a, m]),
        "concat": (lambda: T.sum(T.mul(T.concat([a, b], axis=1), g.normal(size=(3, 8)) * 0 + 1.3)), [a, b]),
        "slice": (lambda: weighted(T.slice_(T.concat([a, b], axis=0), (slice(1, 4),))), [a, b]),
        "reshape": (lambda: T.sum(T.mul(T.reshape(a, (4, 3)), w.reshape(4, 3))), [a]),
        "mean": (lambda: T.sum(T.mul(T.mean(a, axis=1), w[:, 0])), [a]),
        "sum": (lambda: T.sum(T.mul(T.sum(a, axis=0), w[0])), [a]),
        "exp": (lambda: weighted(T.exp(a)), [a]),
        "log": (lambda: weighted(T.log(pos)), [pos]),
        "tanh": (lambda: weighted(T.tanh(a)), [a]),
        "sigmoid": (lambda: weighted(T.sigmoid(a)), [a]),
        "relu": (lambda: weighted(T.relu(a)), [a]),
        "l2_normalize": (lambda: weighted(T.l2_normalize(a)), [a]),
        "log_softmax": (lambda: weighted(T.log_softmax(a)), [a]),
        "rowdot": (lambda: T.sum(T.mul(T.rowdot(a, b), w[:, 0])), [a, b]),
        "norm": (lambda: T.sum(T.mul(T.norm(a), w[:, 0])), [a]),
        "gru": (lambda: T.sum(T.mul(T.gru(x, wx, wh, bx, bh), wg)), [x, wx, wh, bx, bh]),
    }


def loss_graphs(seed=0, K=16, e=8, B=3):
    """Loss graphs from the training objective: name -> (builder, params)."""
    g = np.random.default_rng(seed)
    queue = _unit(g, (K, e))
    zq = _leaf(g.normal(size=(B, e)))
    zk = _unit(g, (B, e))
    zk2 = _unit(g, (B, e))
    lam = g.uniform(0.1, 0.9, size=B)
    zt = _unit(g, (B, e))
    x = g.normal(size=(B, 4, 5, 3))
    pred = _leaf(x + g.normal(size=x.shape))
    visible = (g.random((B, 4, 5)) < 0.5).astype(float)
    visible[0, 0, 0] = 0.0
    w = LossWeights()

    def unit_q():
        return T.l2_normalize(zq)

    def composite():
        pairs = {
            "intra": (unit_q(), zk),
            "inter": (T.l2_normalize(T.scale(zq, 0.5)), mixed_key(zk, zk2, lam)),
            "mask": (T.l2_normalize(T.add(zq, 0.1)), zk2),
        }
        return total_loss(pairs, w, queue, masked_mse(x, pred, visible)).loss

    return {
        "info_nce": (lambda: info_nce(unit_q(), zk, queue, w.tau), [zq]),
        "info_nce_mixed_key": (lambda: info_nce(unit_q(), mixed_key(zk, zk2, lam), queue, w.tau), [zq]),
        "relational_kl": (lambda: relational_kl(unit_q(), zt, queue, w.tau_q, w.tau_k), [zq]),
        "masked_mse": (lambda: masked_mse(x, pred, visible), [pred]),
        "total_loss": (composite, [zq, pred]),
    }


def oracle_checks():
    """Closed-form loss values (name, absolute error, tolerance)."""
    out = []
    # InfoNCE with every similarity equal -> ln(1 + K).
    z = np.eye(4)[:1]
    q = np.tile(np.eye(4)[1:2], (3, 1))
    k = np.eye(4)[2:3]
    out.append(("info_nce_symmetric", abs(info_nce(z, k, q).item() - math.log(4)), 1e-9))
    # Relational KL with uniform similarities over 512 anchors -> ln 512.
    anchors = np.tile(np.eye(8)[1], (512, 1))
    zz = np.eye(8)[:1]
    out.append(("relational_kl_uniform", abs(relational_kl(zz, zz, anchors, 0.1, 0.1).item() - math.log(512)), 1e-9))
    # Masked MSE with one masked cell and residual (3, 4, 0) -> 5.
    x = np.zeros((2, 2, 3))
    p = x.copy()
    p[1, 0] = (3.0, 4.0, 0.0)
    vis = np.ones((2, 2))
    vis[1, 0] = 0.0
    out.append(("masked_mse_345", abs(masked_mse(x, p, vis).item() - 5.0), 0.0))
    # Weighted total with lambda_m = 40, lambda_kl = 1.
    out.append(("total_weighting", abs(combine(1.0, 0.5, 0.05, LossWeights()) - 3.5), 0.0))
    return out


def run_suite(seeds=(0, 1, 2, 3, 4), include_ops=True) -> list[CheckResult]:
    results = []
    if include_ops:
        for name in op_graphs(0):
            worst = max(T.grad_check(*op_graphs(s)[name], seed=s) for s in seeds)
            results.append(CheckResult(f"op:{name}", worst, worst <= GRAD_TOL))
    for name in loss_graphs(0):
        worst = max(T.grad_check(*loss_graphs(s)[name], seed=s) for s in seeds)
        results.append(CheckResult(f"loss:{name}", worst, worst <= GRAD_TOL))
    for name, err, tol in oracle_checks():
        results.append(CheckResult(f"oracle:{name}", err, err <= tol, kind="oracle"))
    return results
