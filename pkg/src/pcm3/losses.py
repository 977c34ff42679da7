"""Contrastive, distillation and masked-reconstruction objectives.

Embeddings are batched as (B, e) tensors; the memory queue is a constant
(K, e) array.  Every loss is averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericDomainError, ShapeError


@dataclass
class LossWeights:
    tau: float = 0.07
    tau_q: float = 0.1
    tau_k: float = 0.05
    lambda_m: float = 40.0
    lambda_kl: float = 1.0
    squared_mse: bool = False


PAIR_NAMES = ("intra", "inter", "mask", "predict")


@dataclass
class LossBreakdown:
    info: dict = field(default_factory=dict)  # pair name -> float
    kl: dict = field(default_factory=dict)
    mask_mse: float = 0.0
    total: float = 0.0
    loss: T.Tensor | None = None  # the differentiable total

    def info_total(self):
        return float(np.sum(list(self.info.values()))) if self.info else 0.0

    def kl_total(self):
        return float(np.sum(list(self.kl.values()))) if self.kl else 0.0

    def row(self):
        return {
            **{f"info_{n}": self.info.get(n, 0.0) for n in PAIR_NAMES},
            **{f"kl_{n}": self.kl.get(n, 0.0) for n in PAIR_NAMES},
            "kl_total": self.kl_total(),
            "mask_mse": self.mask_mse,
            "total": self.total,
        }


def _queue(queue):
    q = queue.contents() if hasattr(queue, "contents") else np.asarray(queue, dtype=np.float64)
    if q.ndim != 2 or len(q) == 0:
        raise ContractError("the negative queue is empty")
    return q


def _as_batch(z):
    z = T.as_tensor(z)
    return T.reshape(z, (1, -1)) if z.ndim == 1 else z


def info_nce(z_q, z_k, queue, tau=0.07) -> T.Tensor:
    """Mean over the batch of -log softmax at the positive logit.

    ``z_k`` and the queue are treated as constants.
    """
    q = _queue(queue)
    z_q = _as_batch(z_q)
    z_k = T.stop_gradient(_as_batch(z_k))
    if z_q.shape != z_k.shape or z_q.shape[1] != q.shape[1]:
        raise ShapeError(f"info_nce: query {z_q.shape}, key {z_k.shape}, queue {q.shape}")
    pos = T.reshape(T.rowdot(z_q, z_k), (-1, 1))
    logits = T.scale(T.concat([pos, T.matmul(z_q, q.T)], axis=1), 1.0 / tau)
    return -T.mean(T.log_softmax(logits)[:, 0])


def mixed_key(zk1, zk2, lam) -> np.ndarray:
    """Convex combination of two key embeddings, re-normalised to unit length.

    ``lam`` may be a scalar or one value per row.
    """
    zk1 = np.asarray(zk1.data if isinstance(zk1, T.Tensor) else zk1, dtype=np.float64)
    zk2 = np.asarray(zk2.data if isinstance(zk2, T.Tensor) else zk2, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim == 1:
        lam = lam[:, None]
    if np.all(lam == 0):
        return zk1.copy()
    if np.all(lam == 1):
        return zk2.copy()
    z = (1.0 - lam) * zk1 + lam * zk2
    n = np.linalg.norm(z, axis=-1, keepdims=True)
    if np.any(n <= T.NORMALIZE_EPS):
        raise NumericDomainError("mixed key embedding has zero norm")
    return z / n


def relational_kl(z_student, z_teacher, queue, tau_q=0.1, tau_k=0.05) -> T.Tensor:
    """Cross-entropy of the student's anchor-similarity distribution under the teacher's."""
    q = _queue(queue)
    zs = _as_batch(z_student)
    zt = _as_batch(z_teacher)
    with T.no_grad():
        p_teacher = np.exp(T.log_softmax(T.scale(T.matmul(zt, q.T), 1.0 / tau_k)).data)
    log_student = T.log_softmax(T.scale(T.matmul(zs, q.T), 1.0 / tau_q))
    return -T.mean(T.sum(T.mul(log_student, p_teacher), axis=1))


def masked_mse(x, s_predict, visible, squared=False) -> T.Tensor:
    """Mean over masked (frame, joint) cells of the residual's Euclidean norm.

    ``visible`` is the (T, J) or (B, T, J) mask with 1 = visible.
    """
    x = np.asarray(x.data if isinstance(x, T.Tensor) else x, dtype=np.float64)
    s_predict = T.as_tensor(s_predict)
    if x.shape != s_predict.shape:
        raise ShapeError(f"masked_mse: target {x.shape} vs prediction {s_predict.shape}")
    hidden = 1.0 - np.broadcast_to(np.asarray(visible, dtype=np.float64), x.shape[:-1])
    n = hidden.sum()
    if n == 0:
        raise ContractError("masked_mse needs at least one masked cell")
    resid = T.mul(T.sub(x, s_predict), hidden[..., None])
    per_cell = T.sum(T.mul(resid, resid), axis=-1) if squared else T.norm(resid)
    return T.scale(T.sum(per_cell), 1.0 / n)


def total_loss(pairs: dict, weights: LossWeights, queue, mse=None) -> LossBreakdown:
    """Sum InfoNCE and relational KL over the positive pairs, plus the weighted mask term.

    ``pairs`` maps a pair name to ``(z_query, z_key)``; ``mse`` is the masked
    reconstruction loss tensor (or None when the mode has no decoder).
    """
    out = LossBreakdown()
    terms = []
    kl_terms = []
    for name, (zq, zk) in pairs.items():
        info = info_nce(zq, zk, queue, weights.tau)
        out.info[name] = info.item()
        terms.append(info)
        if weights.lambda_kl:
            kl = relational_kl(zq, zk, queue, weights.tau_q, weights.tau_k)
            out.kl[name] = kl.item()
            kl_terms.append(kl)
    if kl_terms:
        terms.append(T.scale(_sum(kl_terms), weights.lambda_kl))
    if mse is not None:
        out.mask_mse = mse.item()
        if weights.lambda_m:
            terms.append(T.scale(mse, weights.lambda_m))
    if not terms:
        raise ContractError("no loss terms for this configuration")
    loss = _sum(terms)
    out.loss = loss
    out.total = combine(out.info_total(), out.kl_total(), out.mask_mse, weights)
    return out


def combine(info_total, kl_total, mse, weights: LossWeights) -> float:
    return info_total + weights.lambda_kl * kl_total + weights.lambda_m * mse


def _sum(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = T.add(acc, t)
    return acc
