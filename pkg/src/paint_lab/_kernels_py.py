"""Pure-numpy row kernels.

Reference implementation of the per-position math used by the trainer.  The
compiled module ``paint_lab._kernels`` exposes the same functions with the
same signatures; :mod:`paint_lab.kernels` picks one at import time.

All arrays are float64 and 2-D with shape ``(positions, vocab)`` unless noted.
"""

from __future__ import annotations

import numpy as np


def softmax_rows(logits, temperature=1.0):
    """Row-wise ``softmax(logits / temperature)``; returns ``(probs, logprobs)``."""
    x = np.asarray(logits, dtype=np.float64) / temperature
    x = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=1, keepdims=True))
    logp = x - lse
    return np.exp(logp), logp


def entropy_rows(probs):
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(p), 0.0)
    return -terms.sum(axis=1)


def logsumexp_rows(a):
    a = np.asarray(a, dtype=np.float64)
    m = a.max(axis=1)
    return m + np.log(np.exp(a - m[:, None]).sum(axis=1))


def interpolate_rows(p_t, logp_t, logp_s, selected, k):
    """Geometric teacher/student interpolation on selected rows.

    Selected rows get ``softmax((1 - k) * logp_t + k * logp_s)``; every other
    row (and every row when ``k == 0``) is returned as an exact copy of the
    teacher row.
    """
    probs = np.array(p_t, dtype=np.float64, copy=True)
    logp = np.array(logp_t, dtype=np.float64, copy=True)
    sel = np.asarray(selected, dtype=bool)
    if k == 0.0 or not sel.any():
        return probs, logp
    a = (1.0 - k) * logp[sel] + k * np.asarray(logp_s, dtype=np.float64)[sel]
    a = a - a.max(axis=1, keepdims=True)
    a = a - np.log(np.exp(a).sum(axis=1, keepdims=True))
    logp[sel] = a
    probs[sel] = np.exp(a)
    return probs, logp


def _pointwise_terms(p_t, logp_t, logp_s):
    p_t = np.asarray(p_t, dtype=np.float64)
    with np.errstate(invalid="ignore"):  # 0 * (-inf) on zero-mass entries, masked below
        return np.where(p_t > 0.0, p_t * (np.asarray(logp_t) - np.asarray(logp_s)), 0.0)


def clipped_fkl_rows(p_t, logp_t, logp_s, tau, floor_zero=False):
    """Per-row ``sum_v min(p_t (log p_t - log p_s), tau)``.

    Returns ``(values, clipped_counts)``.  A term counts as clipped when it is
    strictly above ``tau``.  With ``floor_zero`` negative terms are raised to 0.
    """
    terms = _pointwise_terms(p_t, logp_t, logp_s)
    clipped = terms > tau
    vals = np.where(clipped, tau, terms)
    if floor_zero:
        vals = np.maximum(vals, 0.0)
    return vals.sum(axis=1), clipped.sum(axis=1).astype(np.int64)


def clipped_fkl_grad_rows(p_t, logp_t, p_s, logp_s, tau, floor_zero=False, temperature=1.0):
    """Gradient of each row's clipped sum w.r.t. the student logit row.

    Targets are constants.  Only terms that are neither clipped nor floored
    contribute: ``g = (W * p_s - p_t * active) / temperature`` with ``W`` the
    teacher mass on active coordinates.
    """
    p_t = np.asarray(p_t, dtype=np.float64)
    terms = _pointwise_terms(p_t, logp_t, logp_s)
    active = terms <= tau
    if floor_zero:
        active &= terms >= 0.0
    w = np.where(active, p_t, 0.0)
    mass = w.sum(axis=1, keepdims=True)
    return (mass * np.asarray(p_s, dtype=np.float64) - w) / temperature
