"""Reference anchors, overlap scoring, and the masked privileged trace.

The teacher is shown a reference solution with a contiguous character block
replaced by an omission marker.  How much is hidden follows an affine
schedule in the rollout/reference overlap score: rollouts that already
reproduce many reference anchors get a larger hidden ratio.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Sequence

import numpy as np

DEFAULT_MARKER = "[...omitted...]"
PLACEMENTS = ("suffix", "prefix", "middle", "random_contiguous")
FORMULA_CHARS = frozenset("=<>+-*/^≤≥−")
_EDGE_PUNCT = ".,;:!?"
_NUMBER = re.compile(r"(?<![\d.])\d+(?:\.\d+)?")
_TOY_ANSWER = re.compile(r"#\s*(-?\d+(?:\.\d+)?)")


# -- normalization ------------------------------------------------------------

@dataclass(frozen=True)
class RewriteTable:
    version: int
    unwrap: tuple[str, ...]
    fraction: tuple[str, ...]
    replacements: tuple[tuple[str, str, str], ...]  # (kind, pattern, replacement)


@lru_cache(maxsize=None)
def load_rewrite_table(name: str = "normalization_v1.tsv") -> RewriteTable:
    text = resources.files("paint_lab").joinpath("data", name).read_text(encoding="utf-8")
    version = None
    unwrap, fraction, repl = [], [], []
    for line in text.splitlines():
        if line.startswith("# version"):
            version = int(line.split("\t")[1])
            continue
        if not line or line.startswith("#"):
            continue
        kind, pattern, replacement = (line.split("\t") + ["", ""])[:3]
        if kind == "unwrap":
            unwrap.append(pattern)
        elif kind == "fraction":
            fraction.append(pattern)
        elif kind in ("command", "literal"):
            repl.append((kind, pattern, replacement))
        else:
            raise ValueError(f"unknown rewrite kind {kind!r} in {name}")
    if version is None:
        raise ValueError(f"{name} has no version header")
    return RewriteTable(version, tuple(unwrap), tuple(fraction), tuple(repl))


def _brace_group(s: str, start: int) -> int | None:
    """Index one past the ``}`` matching the ``{`` at ``start``."""
    if start >= len(s) or s[start] != "{":
        return None
    depth = 0
    for i in range(start, len(s)):
        if s[i] == "{":
            depth += 1
        elif s[i] == "}":
            depth -= 1
            if depth == 0:
                return i + 1
    return None


def _command_regex(cmd: str) -> re.Pattern:
    if cmd.startswith("\\"):
        return re.compile(re.escape(cmd) + r"(?![a-z])\s*")
    return re.compile(r"(?<![a-z\\])" + re.escape(cmd) + r"\s*")


@lru_cache(maxsize=None)
def _compiled(table: RewriteTable):
    unwrap = [_command_regex(c) for c in table.unwrap]
    frac = [_command_regex(c) for c in table.fraction]
    # longest pattern first so \leq wins over \le
    parts = []
    for kind, pat, rep in sorted(table.replacements, key=lambda r: -len(r[1])):
        rx = re.escape(pat) + ("(?![a-z])" if kind == "command" else "")
        parts.append((rx, rep))
    combined = re.compile("|".join(f"({rx})" for rx, _ in parts))
    reps = [rep for _, rep in parts]
    return unwrap, frac, combined, reps


def _rewrite_groups(s: str, unwrap, frac) -> str:
    out = s
    for rx in unwrap:
        pos = 0
        while True:
            m = rx.search(out, pos)
            if not m:
                break
            end = _brace_group(out, m.end())
            if end is None:
                pos = m.end()
                continue
            out = out[:m.start()] + out[m.end() + 1:end - 1] + out[end:]
            pos = m.start()
    for rx in frac:
        pos = 0
        while True:
            m = rx.search(out, pos)
            if not m:
                break
            end1 = _brace_group(out, m.end())
            end2 = _brace_group(out, end1) if end1 is not None else None
            if end2 is None:
                pos = m.end()
                continue
            num = out[m.end() + 1:end1 - 1]
            den = out[end1 + 1:end2 - 1]
            out = out[:m.start()] + f"({num})/({den})" + out[end2:]
            pos = m.start()
    return out


def _normalize_once(text: str, table: RewriteTable) -> str:
    unwrap, frac, combined, reps = _compiled(table)
    s = text.lower()
    s = _rewrite_groups(s, unwrap, frac)
    s = combined.sub(lambda m: reps[m.lastindex - 1], s)
    return " ".join(s.split())


def normalize_text(text: str, table: RewriteTable | None = None) -> str:
    """Lowercase, rewrite common LaTeX math notation, collapse whitespace.

    Rewrites are applied until the string stops changing, which makes the
    function idempotent.  Commands missing from the table pass through.
    """
    table = table or load_rewrite_table()
    s = text
    for _ in range(64):
        nxt = _normalize_once(s, table)
        if nxt == s:
            return s
        s = nxt
    return s


# -- anchors ------------------------------------------------------------------

@dataclass(frozen=True)
class ReferenceSolution:
    text: str
    tokens: tuple[int, ...] | None = None
    answer: str | None = None


@dataclass(frozen=True)
class AnchorSet:
    anchors: tuple[str, ...] = ()
    kinds: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.anchors)

    def __iter__(self):
        return iter(self.anchors)

    def token_chars(self) -> frozenset[str]:
        return frozenset("".join(self.anchors))


_BOXED = re.compile(r"(?:\\boxed|(?<![A-Za-z\\])boxed)\s*(?=\{)")


def boxed_content(text: str) -> str | None:
    """Content of the last ``\\boxed{...}`` (or bare ``boxed{...}``) group."""
    found = None
    for m in _BOXED.finditer(text):
        end = _brace_group(text, m.end())
        if end is not None:
            found = text[m.end() + 1:end - 1]
    return found


def extract_answer(text: str) -> str | None:
    """Final answer of a completion: last boxed group, else the digits after the last ``#``."""
    boxed = boxed_content(text)
    if boxed is not None:
        return normalize_text(boxed)
    hits = _TOY_ANSWER.findall(text)
    if hits:
        return normalize_text(hits[-1])
    return None


def _formula_spans(norm: str) -> list[str]:
    spans = []
    for tok in norm.split(" "):
        tok = tok.strip(_EDGE_PUNCT)
        if len(tok) >= 3 and any(c in FORMULA_CHARS for c in tok):
            spans.append(tok)
    return spans


def extract_anchors(reference: ReferenceSolution | str) -> AnchorSet:
    """Boxed answer, formula-like spans, and informative numbers of a reference.

    Formula spans are whitespace-delimited runs (edge punctuation stripped) of
    at least 3 characters containing a relation or operator symbol.  Numbers
    are unsigned literals of 2+ characters; single digits only enter as the
    boxed answer.  Everything is normalized and deduplicated in order.
    """
    if isinstance(reference, str):
        reference = ReferenceSolution(reference)
    text = reference.text
    anchors: list[str] = []
    kinds: list[str] = []

    def add(a: str, kind: str) -> None:
        if a and a not in anchors:
            anchors.append(a)
            kinds.append(kind)

    boxed = boxed_content(text)
    if boxed is not None:
        add(normalize_text(boxed), "boxed_answer")
    elif reference.answer is not None:
        add(normalize_text(reference.answer), "boxed_answer")
    norm = normalize_text(text)
    for span in _formula_spans(norm):
        add(span, "formula_span")
    for num in _NUMBER.findall(norm):
        if len(num) >= 2:
            add(num, "number")
    return AnchorSet(tuple(anchors), tuple(kinds))


def overlap_score(rollout_text: str, anchors: AnchorSet | Sequence[str]) -> float:
    """Fraction of anchors that occur as substrings of the normalized rollout (0 if none)."""
    anchors = tuple(anchors)
    if not anchors:
        return 0.0
    norm = normalize_text(rollout_text)
    return sum(1 for a in anchors if a in norm) / len(anchors)


# -- mask schedule ------------------------------------------------------------

@dataclass(frozen=True)
class MaskSchedule:
    """Affine hidden-ratio schedule ``rho(alpha) = rho_wrong + (rho_correct - rho_wrong) alpha``."""

    rho_wrong: float = 0.30
    rho_correct: float = 0.40

    def __post_init__(self):
        for name in ("rho_wrong", "rho_correct"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {v}")
        if not self.rho_correct > self.rho_wrong:
            raise ValueError("rho_correct must be strictly greater than rho_wrong")

    def ratio(self, alpha: float) -> float:
        return self.rho_wrong + (self.rho_correct - self.rho_wrong) * alpha


@dataclass(frozen=True)
class FixedMaskRatio:
    """Constant hidden ratio; used for baselines and equal-endpoint ablation rows."""

    rho: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.rho < 1.0:
            raise ValueError(f"rho must lie in [0, 1), got {self.rho}")

    @property
    def rho_wrong(self) -> float:
        return self.rho

    @property
    def rho_correct(self) -> float:
        return self.rho

    def ratio(self, alpha: float) -> float:
        return self.rho


def make_schedule(rho_wrong: float, rho_correct: float) -> MaskSchedule | FixedMaskRatio:
    """Equal endpoints give a :class:`FixedMaskRatio`; otherwise the strict affine schedule."""
    if rho_wrong == rho_correct:
        return FixedMaskRatio(rho_wrong)
    return MaskSchedule(rho_wrong, rho_correct)


def mask_ratio(alpha: float, schedule: MaskSchedule | FixedMaskRatio) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return schedule.ratio(alpha)


# -- masked trace -------------------------------------------------------------

@dataclass(frozen=True)
class MaskedReference:
    original: str
    start: int
    hidden: int
    rho: float
    placement: str
    marker: str = DEFAULT_MARKER

    @property
    def before(self) -> str:
        return self.original[:self.start]

    @property
    def after(self) -> str:
        return self.original[self.start + self.hidden:]

    @property
    def hidden_text(self) -> str:
        return self.original[self.start:self.start + self.hidden]

    @property
    def visible_count(self) -> int:
        return len(self.original) - self.hidden

    @property
    def has_marker(self) -> bool:
        return self.rho > 0.0

    @property
    def text(self) -> str:
        if not self.has_marker:
            return self.original
        return self.before + self.marker + self.after

    def segments(self) -> list[tuple[str, bool]]:
        """Visible pieces as ``(text, ends_reference)``; empty pieces are dropped."""
        if not self.has_marker:
            return [(self.original, True)] if self.original else []
        out = []
        if self.before:
            out.append((self.before, False))
        if self.after:
            out.append((self.after, True))
        return out

    @property
    def visible_text(self) -> str:
        return self.before + self.after if self.has_marker else self.original


def hidden_length(rho: float, length: int) -> int:
    # the 1e-9 guard keeps e.g. 0.29 * 100 from flooring to 28
    return min(length, max(0, math.floor(rho * length + 1e-9)))


def apply_mask(reference: ReferenceSolution | str, rho: float, placement: str = "suffix",
               rng: np.random.Generator | None = None, marker: str = DEFAULT_MARKER) -> MaskedReference:
    """Hide ``floor(rho * L)`` contiguous characters at the requested placement."""
    text = reference.text if isinstance(reference, ReferenceSolution) else reference
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"rho must lie in [0, 1), got {rho}")
    if placement not in PLACEMENTS:
        raise ValueError(f"unknown placement {placement!r}; expected one of {PLACEMENTS}")
    L = len(text)
    k = hidden_length(rho, L)
    if placement == "suffix":
        start = L - k
    elif placement == "prefix":
        start = 0
    elif placement == "middle":
        start = (L - k) // 2
    else:
        if rng is None:
            raise ValueError("random_contiguous placement needs an explicit rng")
        start = int(rng.integers(0, L - k + 1))
    return MaskedReference(text, start, k, float(rho), placement, marker)
