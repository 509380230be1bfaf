"""Supervised, confidence-weighted unsupervised and KL fusion objectives.

All losses are averaged over pixels so their scale does not depend on the
image resolution.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .agreement import ProbMap, PseudoLabelSet
from .errors import EmptyBatch, LabelOutOfRange, ShapeMismatch
from .tensor import LOG_FLOOR, Tensor

_LOG_FLOOR = float(np.log(LOG_FLOOR))


def _clipped_log_softmax(logits: Tensor) -> Tensor:
    ls = T.log_softmax_channels(logits)
    lo = ls.data < _LOG_FLOOR
    if not lo.any():
        return ls
    # floor log-probabilities at log(1e-12); no gradient through floored entries
    return T.add(T.mul(ls, Tensor(~lo)), Tensor(np.where(lo, _LOG_FLOOR, 0.0)))


def weighted_ce(logits: Tensor, pl: PseudoLabelSet) -> Tensor:
    """``mean_{pixels} λ · (−log softmax(logits)[ý])``.

    ``logits`` is ``[H,W,N]`` (or batched ``[B,H,W,N]``, in which case the
    mean runs over every pixel of the batch).
    """
    if logits.shape[:-1] != pl.labels.shape or pl.weights.shape != pl.labels.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs pseudo labels {pl.labels.shape}")
    nll = T.mul_scalar(T.pick_channels(_clipped_log_softmax(logits), pl.labels), -1.0)
    return T.mean(T.mul(nll, Tensor(pl.weights)))


def batch_unsup_loss(batch: Sequence[tuple[Tensor, PseudoLabelSet]]) -> Tensor:
    """Mean of per-item :func:`weighted_ce` over an unlabeled batch."""
    if not batch:
        raise EmptyBatch("unlabeled batch is empty")
    total = None
    for logits, pl in batch:
        item = weighted_ce(logits, pl)
        total = item if total is None else T.add(total, item)
    return T.mul_scalar(total, 1.0 / len(batch))


def supervised_ce(logits: Tensor, mask) -> Tensor:
    mask = np.asarray(mask)
    n = logits.shape[-1]
    if mask.min(initial=0) < 0 or mask.max(initial=0) >= n:
        raise LabelOutOfRange(f"mask labels must lie in [0, {n})")
    pl = PseudoLabelSet(mask, np.ones(mask.shape), np.ones(mask.shape, dtype=bool))
    return weighted_ce(logits, pl)


def kl_fusion_loss(client_probs: Tensor, server_probs) -> Tensor:
    """Mean per-pixel KL(server ‖ client); the server side carries no gradient.

    ``client_probs`` is a softmax output still attached to the tape.
    """
    srv = server_probs.probs if isinstance(server_probs, ProbMap) else np.asarray(server_probs)
    if client_probs.shape != srv.shape:
        raise ShapeMismatch(f"client {client_probs.shape} vs server {srv.shape}")
    srv = srv.astype(np.float64)
    # 0·log 0 ≡ 0
    ent = np.where(srv > 0, srv * np.log(np.maximum(srv, LOG_FLOOR)), 0.0).sum(axis=-1)
    cross = T.mul(T.log(client_probs), Tensor(srv))  # Σ p_srv log p_cli, per channel
    n_pix = int(np.prod(srv.shape[:-1]))
    # KL = Σ_pix [Σ p log p − Σ p log q] / n_pix
    neg_cross = T.mul_scalar(T.sum_all(cross), -1.0 / n_pix)
    const = Tensor(np.asarray(ent.sum() / n_pix).reshape(()))
    return T.add(neg_cross, const)
