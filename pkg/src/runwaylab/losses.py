"""Detection training losses with analytic gradients.

The total objective is the simplified detection loss plus a weighted
feature-alignment term: total = frcnn + lambda * align. The frcnn part is
binary objectness cross-entropy plus smooth-L1 box regression over assigned
anchors; the alignment part is a symmetric nearest-neighbor squared
Euclidean distance between synthetic-object and real-object features.

All functions are pure; gradients are returned, never accumulated into
shared state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

POSITIVE = 1
NEGATIVE = 0
IGNORE = -1


class LossError(Exception):
    pass


class AllIgnored(LossError):
    """Objectness loss over a batch where every anchor is ignored."""


@dataclass(frozen=True)
class LossBreakdown:
    """Components of one total-loss evaluation; total = frcnn + lambda * align."""

    frcnn: float
    align: float
    lambda_: float
    total: float


@dataclass(frozen=True)
class AlignResult:
    value: float
    grad_synth: np.ndarray
    grad_real: np.ndarray
    missing_domain: bool = False


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def objectness_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy over non-ignore anchors.

    labels holds POSITIVE / NEGATIVE / IGNORE per anchor; ignored entries
    contribute zero loss and zero gradient.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.shape != labels.shape:
        raise ValueError("logits and labels must have equal length")
    mask = labels != IGNORE
    n = int(mask.sum())
    if n == 0:
        raise AllIgnored("every anchor is ignored")
    z = logits[mask]
    y = (labels[mask] == POSITIVE).astype(np.float64)
    # Stable BCE-with-logits: max(z, 0) - z*y + log(1 + exp(-|z|))
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    value = float(per.mean())
    grad = np.zeros_like(logits)
    grad[mask] = (sigmoid(z) - y) / n
    return value, grad


def box_regression_loss(
    pred: np.ndarray, target: np.ndarray, positive_mask: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Smooth-L1 over positive anchors in (dx, dy, dw, dh) parameterization.

    Each positive anchor contributes the sum of element-wise smooth-L1 over
    its four coordinates; the value is the mean over positive anchors. No
    positives is reported as zero loss and zero gradient, not a fault.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(positive_mask, dtype=bool)
    if pred.shape != target.shape or pred.shape[-1] != 4:
        raise ValueError("pred and target must both be (N, 4)")
    npos = int(mask.sum())
    grad = np.zeros_like(pred)
    if npos == 0:
        return 0.0, grad
    e = pred[mask] - target[mask]
    small = np.abs(e) < 1.0
    per = np.where(small, 0.5 * e * e, np.abs(e) - 0.5)
    value = float(per.sum() / npos)
    grad[mask] = np.where(small, e, np.sign(e)) / npos
    return value, grad


def align_loss(synth_feats: np.ndarray, real_feats: np.ndarray) -> AlignResult:
    """Symmetric nearest-neighbor cycle alignment between two feature sets.

    value = 0.5 * (mean_s ||s - nn_R(s)||^2 + mean_r ||r - nn_S(r)||^2);
    argmin ties break to the lowest index, and gradients flow to both ends
    of every match. An empty side yields zero loss with the missing_domain
    flag raised for the caller.
    """
    s = np.asarray(synth_feats, dtype=np.float64)
    r = np.asarray(real_feats, dtype=np.float64)
    if s.ndim != 2:
        s = s.reshape(0, r.shape[1] if r.ndim == 2 else 0)
    if r.ndim != 2:
        r = r.reshape(0, s.shape[1])
    if len(s) == 0 or len(r) == 0:
        return AlignResult(0.0, np.zeros_like(s), np.zeros_like(r), missing_domain=True)
    if s.shape[1] != r.shape[1]:
        raise ValueError("feature dimensions differ")

    diff = s[:, None, :] - r[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    nn_r = np.argmin(d2, axis=1)    # for each s, closest r (ties -> lowest index)
    nn_s = np.argmin(d2, axis=0)    # for each r, closest s

    ns, nr = len(s), len(r)
    value = 0.5 * (d2[np.arange(ns), nn_r].sum() / ns + d2[nn_s, np.arange(nr)].sum() / nr)

    grad_s = np.zeros_like(s)
    grad_r = np.zeros_like(r)
    # First term: d/ds_i (1/2ns)||s_i - r_nn||^2 pairs, both endpoints.
    delta = (s - r[nn_r]) / ns
    grad_s += delta
    np.add.at(grad_r, nn_r, -delta)
    # Second term, symmetric.
    delta = (r - s[nn_s]) / nr
    grad_r += delta
    np.add.at(grad_s, nn_s, -delta)
    return AlignResult(float(value), grad_s, grad_r, missing_domain=False)


def total_loss(frcnn_value: float, align_value: float, lambda_: float) -> LossBreakdown:
    """Combine the detection and alignment terms; total = frcnn + lambda * align."""
    if lambda_ < 0:
        raise ValueError("lambda must be non-negative")
    return LossBreakdown(
        frcnn=frcnn_value,
        align=align_value,
        lambda_=lambda_,
        total=frcnn_value + lambda_ * align_value,
    )
