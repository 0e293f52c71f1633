"""Entropy ratios, the sparse selection budget, and teacher energy interpolation.

At each generated position the teacher and student next-token distributions
are compared by their entropy ratio ``R = H_T / H_S``.  The top ``f_top``
fraction of positions by ``R`` get a teacher target moved geometrically toward
the student, ``p_T^(1-k) p_S^k``; every other position keeps the raw teacher.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np

from paint_lab import kernels

ENTROPY_TOL = 1e-9
NORMALIZATION_TOL = 1e-9
RATIO_MAX = math.inf  # H_S ~ 0 while H_T > 0
RATIO_NEUTRAL = 1.0  # both entropies ~ 0


@dataclass(frozen=True)
class CalibrationConfig:
    k_base: float = 0.03
    f_top: float = 0.03
    gamma: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.k_base < 1.0:
            raise ValueError(f"k_base must lie in [0, 1), got {self.k_base}")
        if not 0.0 <= self.f_top <= 1.0:
            raise ValueError(f"f_top must lie in [0, 1], got {self.f_top}")
        if not self.gamma > 0.0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")


@dataclass(frozen=True)
class TokenDistPair:
    """Aligned student/teacher distributions at one generated position."""

    position: int
    p_s: np.ndarray
    p_t: np.ndarray
    h_s: float
    h_t: float
    ratio: float

    @property
    def e_s(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return -np.log(self.p_s)

    @property
    def e_t(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return -np.log(self.p_t)

    @classmethod
    def from_dists(cls, position: int, p_s, p_t) -> "TokenDistPair":
        p_s = np.asarray(p_s, dtype=np.float64)
        p_t = np.asarray(p_t, dtype=np.float64)
        h_s, h_t = entropy(p_s), entropy(p_t)
        return cls(position, p_s, p_t, h_s, h_t, entropy_ratio(h_t, h_s))


@dataclass(frozen=True)
class CalibrationPlan:
    valid: tuple[int, ...]
    budget: int
    selected: tuple[int, ...]
    gains: tuple[float, ...]

    @property
    def mask(self) -> np.ndarray:
        """Boolean selection flags aligned with ``valid``."""
        chosen = set(self.selected)
        return np.array([p in chosen for p in self.valid], dtype=bool)


def entropy(p) -> float:
    """Shannon entropy in nats with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("entropy expects a nonempty probability vector")
    if (p < 0).any() or abs(p.sum() - 1.0) > NORMALIZATION_TOL:
        raise ValueError(f"input is not a probability vector (sum {p.sum():.12g})")
    return float(kernels.entropy_rows(p[None, :])[0])


def entropy_ratio(h_t: float, h_s: float, tol: float = ENTROPY_TOL) -> float:
    """``H_T / H_S`` with :data:`RATIO_MAX` / :data:`RATIO_NEUTRAL` for a vanishing ``H_S``."""
    if h_t < 0 or h_s < 0:
        # tiny negative values from rounding are treated as zero
        if h_t < -tol or h_s < -tol:
            raise ValueError("entropies must be nonnegative")
        h_t, h_s = max(h_t, 0.0), max(h_s, 0.0)
    if h_s > tol:
        return h_t / h_s
    return RATIO_MAX if h_t > tol else RATIO_NEUTRAL


def entropy_ratios(h_t: np.ndarray, h_s: np.ndarray, tol: float = ENTROPY_TOL) -> np.ndarray:
    h_t = np.maximum(np.asarray(h_t, dtype=np.float64), 0.0)
    h_s = np.maximum(np.asarray(h_s, dtype=np.float64), 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(h_s > tol, h_t / np.where(h_s > tol, h_s, 1.0),
                     np.where(h_t > tol, RATIO_MAX, RATIO_NEUTRAL))
    return r


def information_gain(ratio: float, k: float, gamma: float = 1.0) -> float:
    """``0.5 * log(1 - k + k * R**gamma)``; positive iff ``R > 1``."""
    if not ratio > 0:
        raise ValueError("entropy ratio must be positive")
    if math.isinf(ratio):
        return math.inf if k > 0 else 0.0
    return 0.5 * math.log1p(k * (ratio ** gamma - 1.0))


def selection_budget(n_valid: int, f_top: float) -> int:
    # the 1e-9 guard stops 0.03 * 100 from rounding up to 4
    if n_valid == 0:
        return 0
    return min(n_valid, max(0, math.ceil(f_top * n_valid - 1e-9)))


def top_s_by_ratio(ratios: Sequence[float], budget: int) -> np.ndarray:
    """Indices of the ``budget`` largest ratios, ties broken by lowest index."""
    r = np.asarray(ratios, dtype=np.float64)
    order = np.lexsort((np.arange(r.size), -r))
    return np.sort(order[:budget])


def select_positions(pairs: Sequence[TokenDistPair], f_top: float, k: float = 0.03,
                     gamma: float = 1.0) -> CalibrationPlan:
    """Pick the ``ceil(f_top |J|)`` positions with the largest entropy ratio."""
    if f_top > 0 and not pairs:
        raise ValueError("no valid positions to select from")
    valid = tuple(p.position for p in pairs)
    ratios = [p.ratio for p in pairs]
    budget = selection_budget(len(pairs), f_top)
    idx = top_s_by_ratio(ratios, budget)
    gains = tuple(information_gain(r, k, gamma) if k > 0 else 0.0 for r in ratios)
    return CalibrationPlan(valid, budget, tuple(valid[i] for i in idx), gains)


def interpolate(pair: TokenDistPair, selected: bool, k_base: float) -> np.ndarray:
    """Calibrated target for one position (the raw teacher when unselected)."""
    if not 0.0 <= k_base < 1.0:
        raise ValueError("k_base must lie in [0, 1)")
    with np.errstate(divide="ignore"):
        lt = np.log(pair.p_t)[None, :]
        ls = np.log(pair.p_s)[None, :]
    probs, _ = kernels.interpolate_rows(pair.p_t[None, :], lt, ls, np.array([selected]), k_base)
    return probs[0]


@dataclass(frozen=True)
class CalibratedRollout:
    """Batched calibration result for all valid positions of one rollout."""

    targets: np.ndarray
    target_logp: np.ndarray
    h_s: np.ndarray
    h_t: np.ndarray
    ratios: np.ndarray
    selected: np.ndarray
    budget: int

    def trace_records(self, k: float, gamma: float = 1.0) -> list[dict]:
        out = []
        for n in range(self.ratios.size):
            r = float(self.ratios[n])
            out.append({
                "position": n,
                "H_S": float(self.h_s[n]),
                "H_T": float(self.h_t[n]),
                "R": r if math.isfinite(r) else "inf",
                "selected": bool(self.selected[n]),
                "delta_I": information_gain(r, k, gamma) if k > 0 and math.isfinite(r) else
                ("inf" if k > 0 else 0.0),
            })
        return out


def calibrate_rows(p_s: np.ndarray, logp_s: np.ndarray, p_t: np.ndarray, logp_t: np.ndarray,
                   config: CalibrationConfig) -> CalibratedRollout:
    """Row-stacked version of entropy ratio -> top-S selection -> interpolation."""
    h_s = kernels.entropy_rows(p_s)
    h_t = kernels.entropy_rows(p_t)
    ratios = entropy_ratios(h_t, h_s)
    budget = selection_budget(ratios.size, config.f_top)
    selected = np.zeros(ratios.size, dtype=bool)
    selected[top_s_by_ratio(ratios, budget)] = True
    targets, target_logp = kernels.interpolate_rows(p_t, logp_t, logp_s, selected, config.k_base)
    return CalibratedRollout(targets, target_logp, h_s, h_t, ratios, selected, budget)


def write_trace(fh: IO[str], example_id: str, step: int, calibrated: CalibratedRollout,
                config: CalibrationConfig) -> None:
    for rec in calibrated.trace_records(config.k_base, config.gamma):
        fh.write(json.dumps({"step": step, "id": example_id, **rec}, sort_keys=True) + "\n")
