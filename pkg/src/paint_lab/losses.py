"""Rollout distillation losses and their gradients with respect to student logits."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from paint_lab import kernels
from paint_lab.policy import Rollout, TabularPolicy

DIVERGENCES = ("clipped_forward_kl", "forward_kl", "reverse_kl", "js")


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.06
    divergence: str = "clipped_forward_kl"
    floor_zero: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive (or inf), got {self.tau}")
        if self.divergence not in DIVERGENCES:
            raise ValueError(f"divergence must be one of {DIVERGENCES}, got {self.divergence!r}")

    @property
    def effective_tau(self) -> float:
        return self.tau if self.divergence == "clipped_forward_kl" else math.inf


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    per_position: np.ndarray
    clipped: int
    n_valid: int

    def to_dict(self) -> dict:
        return {"loss": self.total, "clipped_terms": self.clipped, "valid_positions": self.n_valid}


def _log(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(p)


def _stack(vectors: Sequence) -> np.ndarray:
    return np.atleast_2d(np.asarray([np.asarray(v, dtype=np.float64) for v in vectors]))


def _check_aligned(targets, students) -> None:
    if len(targets) != len(students):
        raise ValueError(f"targets and students differ in length ({len(targets)} vs {len(students)})")
    if len(targets) == 0:
        raise ValueError("no valid positions")


def clipped_forward_kl(targets: Sequence, students: Sequence, tau: float = 0.06,
                       floor_zero: bool = False) -> LossBreakdown:
    """``(1/N) sum_n sum_v min(p_T (log p_T - log p_S), tau)``.

    The upper clip is applied literally, so totals can be negative.
    """
    _check_aligned(targets, students)
    pt, ps = _stack(targets), _stack(students)
    vals, counts = kernels.clipped_fkl_rows(pt, _log(pt), _log(ps), tau, floor_zero)
    return LossBreakdown(float(vals.mean()), vals, int(counts.sum()), len(vals))


def divergence_variant(p_t, p_s, kind: str) -> float:
    """Unclipped divergence between two distributions at one position."""
    p_t = np.asarray(p_t, dtype=np.float64)
    p_s = np.asarray(p_s, dtype=np.float64)
    if kind in ("forward_kl", "clipped_forward_kl"):
        return _kl(p_t, p_s)
    if kind == "reverse_kl":
        return _kl(p_s, p_t)
    if kind == "js":
        m = 0.5 * (p_t + p_s)
        return 0.5 * _kl(p_t, m) + 0.5 * _kl(p_s, m)
    raise ValueError(f"unknown divergence {kind!r}")


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def rollout_loss(targets: Sequence, students: Sequence, config: LossConfig = LossConfig()) -> LossBreakdown:
    """Mean per-position divergence between calibrated targets and the student."""
    if config.divergence == "clipped_forward_kl":
        return clipped_forward_kl(targets, students, config.tau, config.floor_zero)
    _check_aligned(targets, students)
    vals = np.array([divergence_variant(t, s, config.divergence) for t, s in zip(targets, students)])
    return LossBreakdown(float(vals.mean()), vals, 0, len(vals))


def rollout_contexts(rollout: Rollout) -> list[tuple[int, ...]]:
    """Student context for every generated position (the eos position included)."""
    base = tuple(rollout.prompt)
    comp = tuple(rollout.completion)
    return [base + comp[:n] for n in range(len(comp))]


def student_rows(student: TabularPolicy, contexts: Sequence[Sequence[int]], temperature: float = 1.0):
    """Stacked student ``(keys, probs, logprobs)`` for a list of contexts."""
    keys = [student.key(c) for c in contexts]
    logits = np.stack([student.row(k) for k in keys]) if keys else np.zeros((0, student.vocab.size))
    probs, logp = kernels.softmax_rows(logits, temperature)
    return keys, probs, logp


def row_gradients(p_t: np.ndarray, logp_t: np.ndarray, p_s: np.ndarray, logp_s: np.ndarray,
                  config: LossConfig, temperature: float = 1.0) -> np.ndarray:
    """Per-position gradient of the divergence w.r.t. the student logit row (unscaled by 1/N)."""
    if config.divergence in ("clipped_forward_kl", "forward_kl"):
        return kernels.clipped_fkl_grad_rows(p_t, logp_t, p_s, logp_s, config.effective_tau,
                                             config.floor_zero, temperature)
    if config.divergence == "reverse_kl":
        u = logp_s - logp_t + 1.0
    else:  # js: d/dp_S = 0.5 log(p_S / m)
        m = 0.5 * (p_t + p_s)
        u = 0.5 * (logp_s - np.log(m))
    # chain rule through softmax: J^T u = p * (u - <p, u>)
    return p_s * (u - np.sum(p_s * u, axis=1, keepdims=True)) / temperature


def accumulate(keys: Sequence[tuple[int, ...]], rows: np.ndarray, scale: float,
               into: dict | None = None) -> dict:
    """Add ``scale * rows[i]`` into ``into[keys[i]]`` in position order."""
    out = {} if into is None else into
    for key, g in zip(keys, rows):
        if key in out:
            out[key] = out[key] + scale * g
        else:
            out[key] = scale * g
    return out


def loss_gradient(student: TabularPolicy, rollout: Rollout, targets: Sequence,
                  config: LossConfig = LossConfig(), temperature: float = 1.0) -> dict:
    """Gradient of :func:`rollout_loss` w.r.t. every logit row the rollout touches.

    Targets are constants.  Rows shared by several positions accumulate.
    """
    contexts = rollout_contexts(rollout)
    _check_aligned(targets, contexts)
    keys, p_s, logp_s = student_rows(student, contexts, temperature)
    p_t = _stack(targets)
    rows = row_gradients(p_t, _log(p_t), p_s, logp_s, config, temperature)
    return accumulate(keys, rows, 1.0 / len(contexts))


def rollout_objective(student: TabularPolicy, rollout: Rollout, targets: Sequence,
                      config: LossConfig = LossConfig(), temperature: float = 1.0) -> LossBreakdown:
    """:func:`rollout_loss` evaluated on the student's current distributions."""
    _, p_s, _ = student_rows(student, rollout_contexts(rollout), temperature)
    return rollout_loss(list(targets), list(p_s), config)


# -- supervised baseline --------------------------------------------------------

def sft_loss(student: TabularPolicy, prompt: Sequence[int], reference: Sequence[int],
             temperature: float = 1.0) -> float:
    """Mean negative log-likelihood of ``reference`` under teacher forcing."""
    reference = tuple(reference)
    if not reference:
        raise ValueError("empty reference")
    ctxs = [tuple(prompt) + reference[:n] for n in range(len(reference))]
    _, _, logp = student_rows(student, ctxs, temperature)
    return float(-logp[np.arange(len(reference)), list(reference)].mean())


def sft_gradient(student: TabularPolicy, prompt: Sequence[int], reference: Sequence[int],
                 temperature: float = 1.0) -> dict:
    reference = tuple(reference)
    ctxs = [tuple(prompt) + reference[:n] for n in range(len(reference))]
    keys, p, _ = student_rows(student, ctxs, temperature)
    g = p.copy()
    g[np.arange(len(reference)), list(reference)] -= 1.0
    return accumulate(keys, g / temperature, 1.0 / len(reference))
