"""Synthetic modular-arithmetic chain tasks and the n-gram base policy.

A prompt such as ``3+4*2`` is evaluated left to right modulo ``modulus``.  The
reference lists the running result after every operation, then ``#`` and the
final answer, e.g. ``74#4``.  Intermediate results of two or more digits become
number anchors; the answer is always an anchor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from paint_lab.masking import ReferenceSolution, extract_answer
from paint_lab.policy import TabularPolicy, Vocab, named_rng
from paint_lab.views import RESERVED

DIGITS = "0123456789"
OPERATORS = "+*"
ANSWER_MARK = "#"
EOS = "<eos>"


def toy_vocab() -> Vocab:
    """15 output tokens (digits, ``+ * # =``, eos) and 4 reserved view tokens."""
    return Vocab(tuple(DIGITS + OPERATORS + ANSWER_MARK + "=") + (EOS,), EOS, RESERVED)


@dataclass(frozen=True)
class DatasetSpec:
    n_tasks: int = 200
    modulus: int = 10
    max_chain: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.n_tasks < 1:
            raise ValueError("n_tasks must be >= 1")
        if not 2 <= self.modulus <= 10:
            raise ValueError("modulus must lie in [2, 10] so operands are single digits")
        if self.max_chain < 1:
            raise ValueError("max_chain must be >= 1")


@dataclass(frozen=True)
class SyntheticTask:
    id: str
    prompt: str
    reference_text: str
    reference_tokens: tuple[int, ...]
    answer: str

    @property
    def reference(self) -> ReferenceSolution:
        return ReferenceSolution(self.reference_text, self.reference_tokens, self.answer)

    def prompt_tokens(self, vocab: Vocab) -> tuple[int, ...]:
        return vocab.encode(self.prompt)

    def to_json(self) -> str:
        d = asdict(self)
        d["reference_tokens"] = list(self.reference_tokens)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTask":
        missing = {"id", "prompt", "reference_text", "reference_tokens", "answer"} - set(d)
        if missing:
            raise ValueError(f"task record missing fields {sorted(missing)}")
        return cls(str(d["id"]), d["prompt"], d["reference_text"],
                   tuple(int(t) for t in d["reference_tokens"]), str(d["answer"]))


def evaluate_chain(prompt: str, modulus: int) -> list[int]:
    """Running results of a left-to-right chain like ``3+4*2``."""
    acc = int(prompt[0])
    results = []
    for i in range(1, len(prompt), 2):
        op, b = prompt[i], int(prompt[i + 1])
        acc = (acc + b) % modulus if op == "+" else (acc * b) % modulus
        results.append(acc)
    return results


def reference_text(results: Sequence[int]) -> str:
    return "".join(str(r) for r in results) + ANSWER_MARK + str(results[-1])


def make_task(idx: int, prompt: str, modulus: int, vocab: Vocab) -> SyntheticTask:
    results = evaluate_chain(prompt, modulus)
    ref = reference_text(results)
    tokens = vocab.encode(ref) + (vocab.eos_id,)
    return SyntheticTask(f"task-{idx:05d}", prompt, ref, tokens, str(results[-1]))


def random_prompt(rng: np.random.Generator, modulus: int, max_chain: int) -> str:
    chain = int(rng.integers(1, max_chain + 1))
    parts = [str(int(rng.integers(0, modulus)))]
    for _ in range(chain):
        parts.append(OPERATORS[int(rng.integers(0, 2))])
        parts.append(str(int(rng.integers(0, modulus))))
    return "".join(parts)


def generate_dataset(spec: DatasetSpec, vocab: Vocab | None = None) -> list[SyntheticTask]:
    vocab = vocab or toy_vocab()
    rng = named_rng(spec.seed, "dataset")
    tasks = [make_task(i, random_prompt(rng, spec.modulus, spec.max_chain), spec.modulus, vocab)
             for i in range(spec.n_tasks)]
    for t in tasks:
        verify_task(t, spec.modulus, vocab)
    return tasks


def verify_task(task: SyntheticTask, modulus: int = 10, vocab: Vocab | None = None) -> None:
    """Raise ``ValueError`` unless the reference is consistent with the prompt."""
    results = evaluate_chain(task.prompt, modulus)
    if task.reference_text.count(ANSWER_MARK) != 1:
        raise ValueError(f"{task.id}: reference must contain exactly one answer marker")
    if task.reference_text != reference_text(results):
        raise ValueError(f"{task.id}: reference derivation does not match the prompt")
    if task.answer != str(results[-1]) or extract_answer(task.reference_text) != task.answer:
        raise ValueError(f"{task.id}: answer disagrees with the derivation")
    if vocab is not None and task.reference_tokens != vocab.encode(task.reference_text) + (vocab.eos_id,):
        raise ValueError(f"{task.id}: reference tokens do not encode the reference text")


def save_dataset(tasks: Iterable[SyntheticTask], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in tasks:
            fh.write(t.to_json() + "\n")


def load_dataset(path: str | Path) -> list[SyntheticTask]:
    tasks = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                tasks.append(SyntheticTask.from_dict(json.loads(line)))
            except (ValueError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return tasks


# -- base policy ----------------------------------------------------------------

@dataclass(frozen=True)
class BaseSpec:
    """Recipe for the starting policy shared by student and teacher."""

    kind: str = "ngram_pretrain"
    noise: float = 0.8
    smoothing: float = 0.5
    corpus_size: int = 50000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("ngram_pretrain", "uniform"):
            raise ValueError(f"base kind must be 'ngram_pretrain' or 'uniform', got {self.kind!r}")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError("noise must lie in [0, 1]")
        if not self.smoothing > 0:
            raise ValueError("smoothing must be positive")
        if self.corpus_size < 0:
            raise ValueError("corpus_size must be nonnegative")


def pretraining_corpus(spec: BaseSpec, modulus: int, max_chain: int,
                       vocab: Vocab) -> list[tuple[tuple[int, ...], int]]:
    """``(sequence, prompt_length)`` pairs whose results are resampled with probability ``noise``.

    The format is always right (the answer repeats the last result), the
    arithmetic only sometimes.
    """
    rng = named_rng(spec.seed, "pretrain")
    out = []
    for _ in range(spec.corpus_size):
        prompt = random_prompt(rng, modulus, max_chain)
        results = evaluate_chain(prompt, modulus)
        noisy = [int(rng.integers(0, modulus)) if rng.random() < spec.noise else r for r in results]
        seq = vocab.encode(prompt) + vocab.encode(reference_text(noisy)) + (vocab.eos_id,)
        out.append((seq, len(prompt)))
    return out


def fit_ngram(corpus: Iterable[tuple[Sequence[int], int]], vocab: Vocab, order: int,
              smoothing: float) -> TabularPolicy:
    """Add-``smoothing`` next-token counts over completion positions, stored as log-probabilities."""
    counts: dict[tuple[int, ...], np.ndarray] = {}
    probe = TabularPolicy(vocab, order)
    for seq, plen in corpus:
        for i in range(plen, len(seq)):
            row = counts.setdefault(probe.key(seq[:i]), np.zeros(vocab.size))
            row[seq[i]] += 1.0
    logits = {key: np.log((row + smoothing) / (row.sum() + smoothing * vocab.size))
              for key, row in counts.items()}
    return TabularPolicy(vocab, order, logits)


def build_base_policy(spec: BaseSpec, vocab: Vocab, order: int, modulus: int = 10,
                      max_chain: int = 3) -> TabularPolicy:
    if spec.kind == "uniform":
        return TabularPolicy(vocab, order)
    return fit_ngram(pretraining_corpus(spec, modulus, max_chain, vocab), vocab, order, spec.smoothing)
