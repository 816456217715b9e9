"""Task risk, invariance penalty and style contrastive loss."""

from __future__ import annotations

import warnings
from typing import Sequence

import numpy as np

from . import diffcore as dc


class LossError(Exception):
    pass


def _n_points(y: np.ndarray) -> int:
    # the last axis holds coordinates; every other axis indexes points
    return int(np.prod(y.shape[:-1]))


def task_loss(y_hat, y) -> dc.Value:
    """Mean over points of the squared Euclidean error."""
    y_hat = dc.constant(y_hat)
    y = np.asarray(y.data if isinstance(y, dc.Value) else y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise LossError(f"shape mismatch {y_hat.shape} vs {y.shape}")
    if y.size == 0:
        raise LossError("empty batch")
    return dc.scale(dc.squared_error(y_hat, y), 1.0 / _n_points(y))


def invariant_penalty(y_hat, y) -> dc.Value:
    """Squared derivative of the risk w.r.t. a scalar output multiplier, at 1.

    With ``R(w) = mean |w * y_hat - y|^2`` this is
    ``((2 / N) * sum <y_hat, y_hat - y>)^2`` and stays differentiable in y_hat.
    """
    y_hat = dc.constant(y_hat)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise LossError(f"shape mismatch {y_hat.shape} vs {y.shape}")
    if y.size == 0:
        raise LossError("empty batch")
    dr_dw = dc.scale(dc.sum_(dc.mul(y_hat, dc.sub(y_hat, y))), 2.0 / _n_points(y))
    return dc.mul(dr_dw, dr_dw)


def combined_invariant_objective(env_batches: Sequence[tuple], lam: float) -> dc.Value:
    """Mean over environments of ``risk + lam * penalty``; batches are ``(y_hat, y)``."""
    if lam < 0:
        raise LossError("penalty weight must be non-negative")
    if not env_batches:
        raise LossError("no environments")
    if len(env_batches) < 2:
        warnings.warn("invariance penalty with a single environment cannot separate spurious features")
    total = None
    for y_hat, y in env_batches:
        term = task_loss(y_hat, y)
        if lam > 0:
            term = dc.add(term, dc.scale(invariant_penalty(y_hat, y), lam))
        total = term if total is None else dc.add(total, term)
    return dc.scale(total, 1.0 / len(env_batches))


def contrastive_pairs(labels: Sequence) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Anchor index, positive index and denominator mask for every ordered positive pair."""
    labels = np.asarray(labels)
    n = len(labels)
    same = labels[:, None] == labels[None, :]
    for i in range(n):
        if same[i].sum() < 2:
            raise LossError(f"anchor {i} (environment {labels[i]}) has no positive in the batch")
        if same[i].all():
            raise LossError(f"anchor {i} (environment {labels[i]}) has no negative in the batch")
    anchors, positives = np.nonzero(same & ~np.eye(n, dtype=bool))
    mask = ~same[anchors]
    mask[np.arange(len(anchors)), positives] = True
    return anchors, positives, mask


def contrastive_from_pairs(p, anchors, positives, mask, tau: float) -> dc.Value:
    """Mean over the given ordered pairs of ``-log softmax`` restricted to ``mask``."""
    if tau <= 0:
        raise LossError("temperature must be positive")
    u = dc.l2_normalize(dc.constant(p), axis=1)
    logits = dc.scale(dc.matmul(u, dc.transpose(u)), 1.0 / tau)
    rows = dc.take(logits, np.asarray(anchors))
    pos = dc.take(logits, (np.asarray(anchors), np.asarray(positives)))
    return dc.mean(dc.sub(dc.logsumexp(rows, axis=1, mask=np.asarray(mask, dtype=bool)), pos))


def style_contrastive(p, labels: Sequence, tau: float = 0.1) -> dc.Value:
    """Supervised contrastive loss over embeddings ``p`` (N, D) with environment labels.

    For a positive pair ``(i, j)`` the denominator runs over ``j`` and every
    sample from a different environment than ``i``. Averaged over ordered pairs.
    """
    anchors, positives, mask = contrastive_pairs(labels)
    return contrastive_from_pairs(p, anchors, positives, mask, tau)
