"""Training losses: two-head photometric squared error, two-head focal
semantic loss, and their combination.  Each loss has a fused variant that
also returns the exact gradient the trainer backpropagates."""

import numpy as np

from .scene import UNLABELED

PROB_FLOOR = 1e-7


def photometric_loss(coarse_pred, fine_pred, gt):
    """Sum over the batch of both heads' squared color residuals."""
    coarse_pred = np.atleast_2d(coarse_pred)
    fine_pred = np.atleast_2d(fine_pred)
    gt = np.atleast_2d(gt)
    rc = coarse_pred - gt
    rf = fine_pred - gt
    return float(np.sum(rc * rc) + np.sum(rf * rf))


def photometric_loss_grad(coarse_pred, fine_pred, gt):
    """(loss, d/d coarse, d/d fine)."""
    rc = coarse_pred - gt
    rf = fine_pred - gt
    loss = float(np.sum(rc * rc) + np.sum(rf * rf))
    return loss, 2.0 * rc, 2.0 * rf


def _focal_term(p_true, gamma):
    p = np.clip(p_true, PROB_FLOOR, 1.0 - PROB_FLOOR)
    if gamma == 0:
        return -np.log(p)
    return -((1.0 - p) ** gamma) * np.log(p)


def focal_semantic_loss(coarse_probs, fine_probs, gt_labels, gamma):
    """Two-head focal loss summed over the batch; unlabeled rays contribute 0."""
    coarse_probs = np.atleast_2d(coarse_probs)
    fine_probs = np.atleast_2d(fine_probs)
    gt_labels = np.atleast_1d(np.asarray(gt_labels))
    labeled = gt_labels != UNLABELED
    if not labeled.any():
        return 0.0
    y = gt_labels[labeled].astype(np.int64)
    rows = np.nonzero(labeled)[0]
    total = 0.0
    for probs in (coarse_probs, fine_probs):
        total += float(np.sum(_focal_term(probs[rows, y], gamma)))
    return total


def focal_loss_from_logits(logits, labels, gamma):
    """One head's focal loss straight from composited logits.

    Returns (loss, d loss / d logits) with the softmax folded into the
    gradient; entries for unlabeled rays are zero.
    """
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(labels))
    dz = np.zeros_like(logits)
    labeled = labels != UNLABELED
    if not labeled.any():
        return 0.0, dz
    rows = np.nonzero(labeled)[0]
    z = logits[rows]
    y = labels[rows].astype(np.int64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    p_true = p[np.arange(len(rows)), y]
    pc = np.clip(p_true, PROB_FLOOR, 1.0 - PROB_FLOOR)
    loss = float(np.sum(_focal_term(p_true, gamma)))
    if gamma == 0:
        dldp = -1.0 / pc
    else:
        dldp = gamma * (1.0 - pc) ** (gamma - 1.0) * np.log(pc) - ((1.0 - pc) ** gamma) / pc
    # gradient is zero where the clip is active
    dldp = np.where((p_true > PROB_FLOOR) & (p_true < 1.0 - PROB_FLOOR), dldp, 0.0)
    onehot = np.zeros_like(p)
    onehot[np.arange(len(rows)), y] = 1.0
    dz_rows = (dldp * p_true)[:, None] * (onehot - p)
    dz[rows] = dz_rows.astype(logits.dtype)
    return loss, dz


def total_loss(photometric, semantic, weight, semantic_only=False):
    """Combined objective; the photometric term is dropped in the
    semantic-only phase."""
    if photometric < 0 or semantic < 0:
        raise ValueError("loss terms must be nonnegative")
    if semantic_only:
        return weight * semantic
    return photometric + weight * semantic
