"""Student and teacher prompt views, hint bonuses, and per-position distributions.

The student sees only the prompt.  The teacher sees the prompt followed by the
masked reference between delimiter tokens and an instruction token.  With a
small-order tabular policy the teacher cannot literally attend to a long
reference, so the default teacher re-scores the frozen base model with an
energy tilt built from the visible reference (the ``energy_tilt`` mode).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from paint_lab import kernels
from paint_lab.masking import MaskedReference, extract_anchors, normalize_text
from paint_lab.policy import TabularPolicy, Vocab, next_token_dist

REF_BEGIN = "<ref>"
REF_END = "</ref>"
INSTRUCTION = "<instr>"
OMITTED = "<omit>"
RESERVED = (REF_BEGIN, REF_END, INSTRUCTION, OMITTED)
TEACHER_MODES = ("energy_tilt", "long_context")


class ConfigWarning(UserWarning):
    """A configuration that runs but silently loses information."""


@dataclass(frozen=True)
class PromptViews:
    student_context: tuple[int, ...]
    teacher_context: tuple[int, ...]


def _encode_lenient(text: str, vocab: Vocab) -> list[int]:
    return [vocab.id(ch) for ch in text]


def build_views(x: Sequence[int], masked: MaskedReference, vocab: Vocab) -> PromptViews:
    """Student view is ``x``; teacher view is ``x <ref> visible </ref> <instr>``.

    The hidden block is represented by a single omission token when anything
    was hidden.  Every reserved symbol must be present in ``vocab``.
    """
    x = tuple(int(t) for t in x)
    ref: list[int] = []
    if masked.has_marker:
        ref += _encode_lenient(masked.before, vocab)
        ref.append(vocab.id(OMITTED))
        ref += _encode_lenient(masked.after, vocab)
    else:
        ref += _encode_lenient(masked.original, vocab)
    teacher = x + (vocab.id(REF_BEGIN),) + tuple(ref) + (vocab.id(REF_END), vocab.id(INSTRUCTION))
    return PromptViews(x, teacher)


# -- hints --------------------------------------------------------------------

@dataclass(frozen=True)
class HintProfile:
    """Per-position 0/1 bonus rows and which tier produced each row (0 = none)."""

    rows: np.ndarray
    tiers: tuple[int, ...]


def _aligned_next(masked: MaskedReference, prefix_text: str) -> tuple[bool, str | None]:
    """Tier-1 alignment.  Returns ``(matched, next_symbol)``; ``None`` stands for eos.

    A candidate is a suffix of the prefix, of length ``l``, occurring in a visible
    segment so that it ends at reference offset ``e`` with ``|e - n| < l``
    (``n`` = prefix length): a match may drift from its nominal position by
    less than its own length.  The longest candidate wins, then the smallest
    drift, then the earliest offset.
    """
    segments = masked.segments()
    if not segments:
        return False, None
    # offset of each visible segment inside the original reference
    offsets = [0 if not masked.has_marker or (i == 0 and masked.start > 0) else masked.start + masked.hidden
               for i in range(len(segments))]
    n = len(prefix_text)
    if n == 0:
        return (True, segments[0][0][0]) if offsets[0] == 0 else (False, None)
    for length in range(n, 0, -1):
        suffix = prefix_text[-length:]
        best = None
        for (seg, ends_reference), base in zip(segments, offsets):
            i = seg.find(suffix)
            while i >= 0:
                end = i + length
                drift = abs(base + end - n)
                if drift < length and (best is None or (drift, base + end) < best[0]):
                    best = ((drift, base + end), seg, end, ends_reference)
                i = seg.find(suffix, i + 1)
        if best is not None:
            _, seg, end, ends_reference = best
            if end < len(seg):
                return True, seg[end]
            if ends_reference:
                return True, None
            # aligned right up to the omission: nothing visible to copy
            return False, None
    return False, None


def visible_anchors(masked: MaskedReference) -> tuple[str, ...]:
    return extract_anchors(masked.visible_text).anchors


def anchor_tokens(anchors: Sequence[str], vocab: Vocab, prefix_text: str = "") -> np.ndarray:
    """0/1 row over output tokens occurring in anchors the prefix has not yet produced."""
    row = np.zeros(vocab.size)
    done = normalize_text(prefix_text)
    for a in anchors:
        if a in done:
            continue
        for ch in a:
            idx = vocab._index.get(ch)
            if idx is not None and idx < vocab.size:
                row[idx] = 1.0
    return row


def hint_profile(masked: MaskedReference, prefix: Sequence[int], vocab: Vocab,
                 _anchors: tuple[str, ...] | None = None) -> tuple[np.ndarray, int]:
    """Bonus row ``b_n`` for the next token after ``prefix``, and its tier.

    Tier 1: align the longest suffix of the decoded prefix with a visible
    reference segment near its nominal offset (see :func:`_aligned_next`) and
    hint the character that follows it, or eos when the match ends the
    reference.  A match that runs into the omission gives no tier-1 hint; an
    empty prefix aligns with the start of the reference when the start is
    visible.  Tier 2: every output token of the anchors extracted from the
    visible text, skipping anchors the normalized prefix already contains.
    Otherwise the row is zero.
    """
    row = np.zeros(vocab.size)
    text = vocab.decode(prefix)
    matched, nxt = _aligned_next(masked, text)
    if matched:
        idx = vocab.eos_id if nxt is None else vocab._index.get(nxt)
        if idx is not None and idx < vocab.size:
            row[idx] = 1.0
            return row, 1
    anchors = visible_anchors(masked) if _anchors is None else _anchors
    row = anchor_tokens(anchors, vocab, text)
    return row, (2 if row.any() else 0)


def hint_rows(masked: MaskedReference, completion: Sequence[int], vocab: Vocab) -> HintProfile:
    """Hint rows for every position of a completion (position n sees ``completion[:n]``)."""
    completion = tuple(completion)
    anchors = visible_anchors(masked)
    rows = np.zeros((len(completion), vocab.size))
    tiers = []
    for n in range(len(completion)):
        rows[n], tier = hint_profile(masked, completion[:n], vocab, anchors)
        tiers.append(tier)
    return HintProfile(rows, tuple(tiers))


# -- teacher ------------------------------------------------------------------

@dataclass
class TeacherConfig:
    """Frozen privileged teacher.  ``base`` is snapshotted and frozen on construction."""

    base: TabularPolicy
    mode: str = "energy_tilt"
    beta_tilt: float = 2.0

    def __post_init__(self):
        if self.mode not in TEACHER_MODES:
            raise ValueError(f"teacher mode must be one of {TEACHER_MODES}, got {self.mode!r}")
        if not (np.isfinite(self.beta_tilt) and self.beta_tilt >= 0):
            raise ValueError("beta_tilt must be finite and nonnegative")
        self.base = self.base.frozen_teacher()


def student_dist(student: TabularPolicy, x: Sequence[int], prefix: Sequence[int],
                 temperature: float = 1.0) -> np.ndarray:
    return next_token_dist(student, tuple(x) + tuple(prefix), temperature)


def teacher_dist(config: TeacherConfig, views: PromptViews, masked: MaskedReference,
                 prefix: Sequence[int], temperature: float = 1.0) -> np.ndarray:
    """Teacher next-token distribution on the shared rollout prefix."""
    return teacher_rows(config, views, masked, [tuple(prefix)], temperature)[0][0]


def teacher_rows(config: TeacherConfig, views: PromptViews, masked: MaskedReference,
                 prefixes: Sequence[Sequence[int]], temperature: float = 1.0,
                 hints: HintProfile | None = None):
    """Teacher ``(probs, logprobs)`` for a list of prefixes, stacked as rows."""
    base = config.base
    vocab = base.vocab
    n = len(prefixes)
    if config.mode == "long_context":
        need = max((len(p) for p in prefixes), default=0) + 3
        if masked.visible_count > 0 and base.order < need:
            warnings.warn(
                f"long_context teacher has order {base.order} but needs {need} to see the reference; "
                "it degenerates to the base distribution", ConfigWarning, stacklevel=2)
        logits = np.stack([base.row(base.key(views.teacher_context + tuple(p))) for p in prefixes])
        if masked.visible_count == 0:
            logits = np.stack([base.row(base.key(views.student_context + tuple(p))) for p in prefixes])
        return kernels.softmax_rows(logits, temperature)
    logits = np.stack([base.row(base.key(views.student_context + tuple(p))) for p in prefixes]) \
        if n else np.zeros((0, vocab.size))
    probs, logp = kernels.softmax_rows(logits, temperature)
    if config.beta_tilt == 0.0 or masked.visible_count == 0:
        return probs, logp
    if hints is None:
        anchors = visible_anchors(masked)
        bonus = np.stack([hint_profile(masked, p, vocab, anchors)[0] for p in prefixes])
    else:
        bonus = hints.rows[:n]
    tilted = bonus.any(axis=1)
    if not tilted.any():
        return probs, logp
    tp, tl = kernels.softmax_rows(logp[tilted] + config.beta_tilt * bonus[tilted], 1.0)
    probs[tilted] = tp
    logp[tilted] = tl
    return probs, logp
