"""Batch contrastive distributions, the symmetric contrastive loss, and
retrieval-style classification against a class text bank.

Two modes share one code path: in-batch mode pairs each image row with the
text row of the same index (``labels = 0..B-1``); class-bank mode scores a
batch of image features against N cached per-class text vectors, with
labels naming class indices. The loss averages the image-to-text and
text-to-image cross-entropies and returns exact analytic gradients with
respect to both feature matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyBank, LabelOutOfRange, NotADistribution
from .numerics import (
    as_matrix,
    log_softmax_rows,
    pairwise_logits,
    softmax_rows,
)

_UNIT_ROW_TOL = 1e-9


@dataclass(frozen=True)
class ContrastiveBatch:
    """Unit-row image features U (B x d), text features W (B x d or N x d), tau."""

    image_features: np.ndarray
    text_features: np.ndarray
    tau: float

    def __post_init__(self):
        u = as_matrix(self.image_features, "image_features")
        w = as_matrix(self.text_features, "text_features")
        if u.shape[1] != w.shape[1]:
            raise DimensionMismatch(
                f"feature dims differ: {u.shape[1]} vs {w.shape[1]}"
            )
        for name, m in (("image_features", u), ("text_features", w)):
            if m.shape[0] == 0:
                continue
            norms = np.linalg.norm(m, axis=1)
            if np.max(np.abs(norms - 1.0)) > _UNIT_ROW_TOL:
                raise NotADistribution(f"{name} rows are not unit-norm")
        object.__setattr__(self, "image_features", u)
        object.__setattr__(self, "text_features", w)


@dataclass
class LossValueWithGrad:
    """Scalar loss plus gradients w.r.t. the two feature matrices.

    ``value_i2t`` / ``value_t2i`` expose the per-direction cross-entropy
    pieces separately; ``value`` is their average.
    """

    value: float
    grad_image: np.ndarray
    grad_text: np.ndarray
    value_i2t: float
    value_t2i: float


@dataclass(frozen=True)
class MixedLabels:
    """Soft pairing for mixup batches: secondary labels plus per-sample weight
    of the primary label (1.0 reduces to hard labels)."""

    labels_b: np.ndarray
    lam: np.ndarray


def image_to_text_probs(batch: ContrastiveBatch) -> np.ndarray:
    """Row i = softmax over text candidates j of (U_i . W_j) / tau."""
    return softmax_rows(
        pairwise_logits(batch.image_features, batch.text_features), batch.tau
    )


def text_to_image_probs(batch: ContrastiveBatch) -> np.ndarray:
    """Row j = softmax over image candidates i of (W_j . U_i) / tau."""
    return softmax_rows(
        pairwise_logits(batch.text_features, batch.image_features), batch.tau
    )


def _check_labels(labels, n_rows: int, n_candidates: int, name: str) -> np.ndarray:
    lab = np.asarray(labels, dtype=np.int64)
    if lab.ndim != 1 or lab.shape[0] != n_rows:
        raise DimensionMismatch(f"{name} must be 1-D with one entry per sample")
    if lab.size and (lab.min() < 0 or lab.max() >= n_candidates):
        raise LabelOutOfRange(
            f"{name} must index candidate rows [0, {n_candidates})"
        )
    return lab


def clip_loss(
    batch: ContrastiveBatch,
    labels,
    mix: MixedLabels | None = None,
) -> LossValueWithGrad:
    """Symmetric temperature cross-entropy over both retrieval directions.

    Image-to-text: each image row is scored against every text row and
    cross-entropy is taken against its label. Text-to-image: the text row
    of each sample's label is scored against every image row, with the
    sample's own position as target. The value is the mean of both
    directions; gradients are exact.
    """
    u = batch.image_features
    w = batch.text_features
    tau = batch.tau
    b_sz, _ = u.shape
    n_cand = w.shape[0]
    if b_sz == 0:
        raise DimensionMismatch("clip_loss needs at least one sample")

    labels_a = _check_labels(labels, b_sz, n_cand, "labels")
    if mix is None:
        labels_b = labels_a
        lam = np.ones(b_sz)
    else:
        labels_b = _check_labels(mix.labels_b, b_sz, n_cand, "mix labels")
        lam = np.asarray(mix.lam, dtype=np.float64)
        if lam.shape != (b_sz,):
            raise DimensionMismatch("mix.lam must have one coefficient per sample")
    wa, wb = lam, 1.0 - lam

    # Soft target matrix over text candidates, one row per image.
    target = np.zeros((b_sz, n_cand))
    np.add.at(target, (np.arange(b_sz), labels_a), wa)
    np.add.at(target, (np.arange(b_sz), labels_b), wb)

    sims = pairwise_logits(u, w)
    log_p = log_softmax_rows(sims, tau)
    p = np.exp(log_p)
    l_i2t = float(-np.sum(target * log_p) / b_sz)
    grad_logits_i2t = (p - target) / b_sz

    # Text-to-image: anchor rows are the labelled text candidates; each
    # anchor's target is the sample position that selected it.
    log_q = log_softmax_rows(pairwise_logits(w, u), tau)
    q = np.exp(log_q)
    idx = np.arange(b_sz)
    l_t2i = float(
        -(np.sum(wa * log_q[labels_a, idx]) + np.sum(wb * log_q[labels_b, idx])) / b_sz
    )
    counts = np.zeros(n_cand)
    np.add.at(counts, labels_a, wa)
    np.add.at(counts, labels_b, wb)
    sel = np.zeros((n_cand, b_sz))
    np.add.at(sel, (labels_a, idx), wa)
    np.add.at(sel, (labels_b, idx), wb)
    grad_logits_t2i = (counts[:, None] * q - sel) / b_sz

    scale = 0.5 / tau
    grad_u = scale * (grad_logits_i2t @ w + grad_logits_t2i.T @ w)
    grad_w = scale * (grad_logits_i2t.T @ u + grad_logits_t2i @ u)

    return LossValueWithGrad(
        value=0.5 * (l_i2t + l_t2i),
        grad_image=grad_u,
        grad_text=grad_w,
        value_i2t=l_i2t,
        value_t2i=l_t2i,
    )


def classify(u, bank, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Predicted class per image row plus its probability.

    Predictions take the argmax of the image-to-text probability row; ties
    break toward the lowest class index.
    """
    um = as_matrix(u, "u")
    bm = as_matrix(bank, "bank")
    if bm.shape[0] == 0:
        raise EmptyBank("class bank has no rows")
    probs = softmax_rows(pairwise_logits(um, bm), tau)
    pred = np.argmax(probs, axis=1).astype(np.int64)
    return pred, probs[np.arange(um.shape[0]), pred]


def rank_of_label(u, bank, labels, tau: float) -> np.ndarray:
    """Zero-based rank of each sample's true class in the score ordering."""
    um = as_matrix(u, "u")
    bm = as_matrix(bank, "bank")
    if bm.shape[0] == 0:
        raise EmptyBank("class bank has no rows")
    probs = softmax_rows(pairwise_logits(um, bm), tau)
    order = np.argsort(-probs, axis=1, kind="stable")
    return np.argmax(order == np.asarray(labels, dtype=np.int64)[:, None], axis=1)
