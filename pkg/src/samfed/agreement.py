"""Pixel-level agreement between teacher and client predictions.

Where the two argmax maps coincide the consensus label is kept with full
weight; elsewhere the more confident model wins and its top probability
becomes the pixel weight. A confidence tie goes to the client.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ClassCountMismatch, ShapeMismatch


class Source(Enum):
    TEACHER = "teacher"
    CLIENT = "client"


@dataclass(frozen=True)
class ProbMap:
    """Per-pixel class probabilities, shape ``[..., H, W, N]``."""

    probs: np.ndarray
    source: Source = Source.CLIENT

    def __post_init__(self):
        p = self.probs
        if p.ndim < 3 or p.shape[-1] < 2:
            raise ShapeMismatch(f"ProbMap needs [...,H,W,N>=2], got {p.shape}")
        if (p < 0).any() or not np.allclose(p.sum(axis=-1), 1.0, atol=1e-5, rtol=0):
            raise ValueError("ProbMap rows must be non-negative and sum to 1")

    @property
    def num_classes(self) -> int:
        return self.probs.shape[-1]


@dataclass(frozen=True)
class PseudoLabelSet:
    labels: np.ndarray
    weights: np.ndarray
    agreement_mask: np.ndarray

    @property
    def shape(self) -> tuple:
        return self.labels.shape


def _as_probs(p) -> np.ndarray:
    return p.probs if isinstance(p, ProbMap) else np.asarray(p)


def hard_labels(p) -> np.ndarray:
    """Argmax over channels; ties resolve to the lowest class index."""
    return np.argmax(_as_probs(p), axis=-1)


def pixel_scores(p) -> np.ndarray:
    return _as_probs(p).max(axis=-1)


def _check_pair(tp: np.ndarray, cp: np.ndarray) -> None:
    if tp.shape[-1] != cp.shape[-1]:
        raise ClassCountMismatch(f"teacher N={tp.shape[-1]} vs client N={cp.shape[-1]}")
    if tp.shape != cp.shape:
        raise ShapeMismatch(f"teacher {tp.shape} vs client {cp.shape}")


def fuse(teacher, client) -> PseudoLabelSet:
    """Agreement-aware pseudo-labels and adaptive confidence weights."""
    tp, cp = _as_probs(teacher), _as_probs(client)
    _check_pair(tp, cp)
    yt, yc = hard_labels(tp), hard_labels(cp)
    st, sc = pixel_scores(tp), pixel_scores(cp)
    agree = yt == yc
    teacher_wins = ~agree & (st > sc)
    labels = np.where(teacher_wins, yt, yc)
    weights = np.where(agree, 1.0, np.where(teacher_wins, st, sc)).astype(np.float64)
    n = tp.shape[-1]
    # max-softmax >= 1/N; a violation means the inputs were not distributions
    assert weights.min(initial=1.0) >= 1.0 / n - 1e-6, "confidence weight below 1/N"
    return PseudoLabelSet(labels, weights, agree)


def client_only(teacher, client) -> PseudoLabelSet:
    """Ablation: self-training from the client alone (label = client argmax, weight = s^c)."""
    tp, cp = _as_probs(teacher), _as_probs(client)
    _check_pair(tp, cp)
    yc = hard_labels(cp)
    return PseudoLabelSet(yc, pixel_scores(cp).astype(np.float64), hard_labels(tp) == yc)


def teacher_only(teacher, client) -> PseudoLabelSet:
    """Ablation: teacher pseudo-labels weighted by teacher confidence."""
    tp, cp = _as_probs(teacher), _as_probs(client)
    _check_pair(tp, cp)
    yt = hard_labels(tp)
    return PseudoLabelSet(yt, pixel_scores(tp).astype(np.float64), yt == hard_labels(cp))


STRATEGIES = {"agreement": fuse, "client_only": client_only, "teacher_only": teacher_only}


def agreement_rate(pl: PseudoLabelSet) -> float:
    return float(np.count_nonzero(pl.agreement_mask)) / pl.agreement_mask.size


def export_agreement_image(pl: PseudoLabelSet, path) -> Path:
    """Write the agreement mask as binary PGM: 255 = agree, 0 = disagree."""
    from .data import write_pgm

    mask = np.asarray(pl.agreement_mask)
    if mask.ndim != 2:
        raise ShapeMismatch(f"agreement export needs an H×W mask, got {mask.shape}")
    path = Path(path)
    write_pgm(path, np.where(mask, 255, 0).astype(np.uint8))
    return path
