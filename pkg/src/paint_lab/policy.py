"""Enumerable autoregressive policies.

A :class:`TabularPolicy` is a softmax next-token model whose logit row is
looked up from the last ``order`` tokens of the context.  Because vocabularies
and horizons are tiny, every trajectory distribution can be enumerated, which
is what the Gibbs / soft-value routines below rely on.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from paint_lab import kernels

PAD = -1
ENUMERATION_LIMIT = 10**6
CHECKPOINT_VERSION = 1


class EnumerationTooLarge(ValueError):
    """Raised when ``V**T`` exceeds :data:`ENUMERATION_LIMIT`."""


class FrozenPolicyError(RuntimeError):
    pass


def named_rng(seed: int, name: str) -> np.random.Generator:
    """PCG64 generator for stream ``name`` derived from ``seed``.

    Streams are independent children of ``SeedSequence(seed)`` keyed by the
    CRC32 of the name, so results reproduce across machines and numpy builds
    that share the PCG64 algorithm.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(name.encode()),))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class Vocab:
    """Output symbols plus context-only reserved symbols.

    Output tokens have ids ``0..V-1``.  Reserved symbols (delimiters, the
    omission marker) get ids ``V..`` and may appear in contexts but are never
    sampled.
    """

    tokens: tuple[str, ...]
    eos: str
    reserved: tuple[str, ...] = ()
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        toks = tuple(self.tokens)
        res = tuple(self.reserved)
        object.__setattr__(self, "tokens", toks)
        object.__setattr__(self, "reserved", res)
        if len(toks) < 2:
            raise ValueError("vocabulary needs at least two tokens")
        allsym = toks + res
        if len(set(allsym)) != len(allsym):
            raise ValueError("vocabulary symbols must be unique")
        if self.eos not in toks:
            raise ValueError("eos must be an output token")
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(allsym)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def eos_id(self) -> int:
        return self._index[self.eos]

    def id(self, symbol: str) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            raise KeyError(f"symbol {symbol!r} not in vocabulary") from None

    def symbol(self, idx: int) -> str:
        return (self.tokens + self.reserved)[idx]

    def encode(self, text: str) -> tuple[int, ...]:
        """Character-level encoding; every character must be an output token."""
        return tuple(self.id(ch) for ch in text)

    def decode(self, ids: Iterable[int], *, drop_eos: bool = True) -> str:
        out = []
        for i in ids:
            if drop_eos and i == self.eos_id:
                continue
            out.append(self.symbol(i))
        return "".join(out)

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "eos": self.eos, "reserved": list(self.reserved)}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(tuple(d["tokens"]), d["eos"], tuple(d.get("reserved", ())))


class TabularPolicy:
    """Softmax policy with one logit row per context key.

    Unseen keys read as a zero row (uniform distribution).  A frozen policy
    rejects updates and stores read-only rows.
    """

    def __init__(self, vocab: Vocab, order: int, logits: dict | None = None,
                 label: str = "student", frozen: bool = False):
        if order < 0:
            raise ValueError("order must be nonnegative")
        if label not in ("student", "teacher"):
            raise ValueError("label must be 'student' or 'teacher'")
        self.vocab = vocab
        self.order = int(order)
        self.label = label
        self.logits: dict[tuple[int, ...], np.ndarray] = {}
        for key, row in (logits or {}).items():
            row = np.array(row, dtype=np.float64)
            if row.shape != (vocab.size,):
                raise ValueError(f"logit row for {key} has shape {row.shape}, expected ({vocab.size},)")
            self.logits[tuple(int(k) for k in key)] = row
        self.frozen = False
        if frozen:
            self.freeze()

    def freeze(self) -> "TabularPolicy":
        for row in self.logits.values():
            row.flags.writeable = False
        self.frozen = True
        return self

    def key(self, context: Sequence[int]) -> tuple[int, ...]:
        if self.order == 0:
            return ()
        tail = tuple(context[-self.order:])
        return (PAD,) * (self.order - len(tail)) + tail

    def row(self, key: tuple[int, ...]) -> np.ndarray:
        r = self.logits.get(key)
        if r is None:
            return np.zeros(self.vocab.size)
        return r

    def copy(self, *, label: str | None = None, frozen: bool = False) -> "TabularPolicy":
        return TabularPolicy(self.vocab, self.order,
                             {k: v.copy() for k, v in self.logits.items()},
                             label=label or self.label, frozen=frozen)

    def frozen_teacher(self) -> "TabularPolicy":
        """Independent, immutable snapshot labelled as the teacher."""
        return self.copy(label="teacher", frozen=True)

    def apply_gradient(self, grads: dict, lr: float) -> None:
        """In-place SGD step ``row -= lr * grad`` on the given rows (sorted order)."""
        if self.frozen:
            raise FrozenPolicyError("cannot update a frozen policy")
        for key in sorted(grads):
            row = self.logits.get(key)
            if row is None:
                row = np.zeros(self.vocab.size)
                self.logits[key] = row
            row -= lr * grads[key]

    # -- serialization -----------------------------------------------------
    def to_text(self) -> str:
        header = {
            "format": "paint-lab-tabular-policy",
            "version": CHECKPOINT_VERSION,
            "V": self.vocab.size,
            "order": self.order,
            "label": self.label,
            "vocab": self.vocab.to_dict(),
        }
        lines = [json.dumps(header, sort_keys=True)]
        for key in sorted(self.logits):
            k = ",".join(str(i) for i in key)
            vals = " ".join(float(x).hex() for x in self.logits[key])
            lines.append(f"{k}\t{vals}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, *, frozen: bool = False) -> "TabularPolicy":
        lines = text.splitlines()
        header = json.loads(lines[0])
        if header.get("format") != "paint-lab-tabular-policy":
            raise ValueError("not a tabular policy checkpoint")
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['version']}")
        vocab = Vocab.from_dict(header["vocab"])
        if vocab.size != header["V"]:
            raise ValueError("checkpoint header V does not match the token list")
        logits = {}
        for line in lines[1:]:
            if not line.strip():
                continue
            k, vals = line.split("\t")
            key = tuple(int(i) for i in k.split(",")) if k else ()
            logits[key] = np.array([float.fromhex(x) for x in vals.split()])
        return cls(vocab, header["order"], logits, label=header["label"], frozen=frozen)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path, *, frozen: bool = False) -> "TabularPolicy":
        return cls.from_text(Path(path).read_text(), frozen=frozen)

    def checksum(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


@dataclass(frozen=True)
class Rollout:
    prompt: tuple[int, ...]
    completion: tuple[int, ...]
    logprobs: tuple[float, ...]
    terminated_by: str  # "eos" | "max_length"


def next_token_dist(policy: TabularPolicy, context: Sequence[int], temperature: float = 1.0) -> np.ndarray:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    row = policy.row(policy.key(context))
    return kernels.softmax_rows(row[None, :], temperature)[0][0]


def next_token_logprobs(policy: TabularPolicy, context: Sequence[int], temperature: float = 1.0) -> np.ndarray:
    row = policy.row(policy.key(context))
    return kernels.softmax_rows(row[None, :], temperature)[1][0]


def sample_rollout(policy: TabularPolicy, prompt: Sequence[int], max_len: int,
                   temperature: float, rng: np.random.Generator) -> Rollout:
    """Sample one completion by inverse-CDF draws from ``rng``."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    prompt = tuple(prompt)
    ctx = list(prompt)
    out: list[int] = []
    lps: list[float] = []
    eos = policy.vocab.eos_id
    V = policy.vocab.size
    for _ in range(max_len):
        row = policy.row(policy.key(ctx))
        probs, logp = kernels.softmax_rows(row[None, :], temperature)
        cdf = np.cumsum(probs[0])
        a = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        a = min(a, V - 1)
        out.append(a)
        lps.append(float(logp[0, a]))
        ctx.append(a)
        if a == eos:
            return Rollout(prompt, tuple(out), tuple(lps), "eos")
    return Rollout(prompt, tuple(out), tuple(lps), "max_length")


def trajectory_energy(policy: TabularPolicy, context: Sequence[int], traj: Sequence[int],
                      temperature: float = 1.0) -> float:
    """``-sum_i log p(traj_i | context, traj_<i)``."""
    ctx = list(context)
    energy = 0.0
    for a in traj:
        energy -= next_token_logprobs(policy, ctx, temperature)[a]
        ctx.append(a)
    return float(energy)


def logprob_gradient(policy: TabularPolicy, context: Sequence[int], token: int,
                     temperature: float = 1.0) -> tuple[tuple[int, ...], np.ndarray]:
    """Gradient of ``log p(token | context)`` w.r.t. the active logit row.

    Returns ``(key, grad)`` with ``grad = (e_token - p) / temperature``.
    """
    key = policy.key(context)
    p = next_token_dist(policy, context, temperature)
    g = -p
    g[token] += 1.0
    return key, g / temperature


# -- energies on the finite generation tree --------------------------------

class EnergyModel:
    """Additive energy ``E(tau) = sum_i c(s_i, a_i)`` over length-``horizon`` trajectories.

    ``row_fn(prefix)`` returns the cost vector over actions at state
    ``(context, prefix)``.
    """

    def __init__(self, row_fn: Callable[[tuple[int, ...]], np.ndarray], vocab_size: int,
                 horizon: int, context: Sequence[int] = ()):
        if horizon < 1:
            raise ValueError("horizon must be positive")
        self.row_fn = row_fn
        self.vocab_size = int(vocab_size)
        self.horizon = int(horizon)
        self.context = tuple(context)
        self._tables: list[np.ndarray] | None = None

    def cost(self, prefix: Sequence[int], action: int) -> float:
        return float(self.row_fn(tuple(prefix))[action])

    @classmethod
    def from_policy(cls, policy: TabularPolicy, context: Sequence[int], horizon: int,
                    temperature: float = 1.0) -> "EnergyModel":
        ctx = tuple(context)
        return cls(lambda prefix: -next_token_logprobs(policy, ctx + prefix, temperature),
                   policy.vocab.size, horizon, ctx)

    @classmethod
    def from_table(cls, table: dict, vocab_size: int, horizon: int,
                   context: Sequence[int] = ()) -> "EnergyModel":
        zero = np.zeros(vocab_size)
        return cls(lambda prefix: np.asarray(table.get(prefix, zero), dtype=np.float64),
                   vocab_size, horizon, context)

    def shifted(self, constant: float) -> "EnergyModel":
        return EnergyModel(lambda prefix: self.row_fn(prefix) + constant,
                           self.vocab_size, self.horizon, self.context)

    def check_size(self) -> None:
        if self.vocab_size ** self.horizon > ENUMERATION_LIMIT:
            raise EnumerationTooLarge(
                f"V^T = {self.vocab_size}^{self.horizon} exceeds the enumeration limit {ENUMERATION_LIMIT}")

    def cost_tables(self) -> list[np.ndarray]:
        """Dense costs per depth: ``tables[d][j]`` is the cost row of the j-th length-d prefix.

        Prefixes at each depth are ordered lexicographically, so the child of
        prefix ``j`` via action ``a`` has index ``j * V + a``.
        """
        if self._tables is None:
            self.check_size()
            V = self.vocab_size
            tables = []
            for d in range(self.horizon):
                rows = [self.row_fn(p) for p in itertools.product(range(V), repeat=d)]
                tables.append(np.asarray(rows, dtype=np.float64).reshape(V ** d, V))
            self._tables = tables
        return self._tables


def enumerate_trajectories(vocab_size: int, horizon: int) -> list[tuple[int, ...]]:
    if vocab_size ** horizon > ENUMERATION_LIMIT:
        raise EnumerationTooLarge(f"V^T = {vocab_size}^{horizon} exceeds {ENUMERATION_LIMIT}")
    return list(itertools.product(range(vocab_size), repeat=horizon))


def trajectory_energies(energy: EnergyModel) -> np.ndarray:
    """Total energy of every trajectory, in lexicographic order."""
    tables = energy.cost_tables()
    total = tables[0][0].copy()
    for d in range(1, energy.horizon):
        total = (total[:, None] + tables[d]).ravel()
    return total


def gibbs_probabilities(energy: EnergyModel) -> np.ndarray:
    e = -trajectory_energies(energy)
    log_z = kernels.logsumexp_rows(e[None, :])[0]
    return np.exp(e - log_z)


def gibbs_distribution(energy: EnergyModel) -> dict[tuple[int, ...], float]:
    """``exp(-E(tau)) / Z`` for every length-T trajectory."""
    probs = gibbs_probabilities(energy)
    trajs = enumerate_trajectories(energy.vocab_size, energy.horizon)
    return {t: float(p) for t, p in zip(trajs, probs)}


def soft_value_tables(energy: EnergyModel) -> list[np.ndarray]:
    """``values[d][j]``: log-partition over suffixes from the j-th length-d prefix.

    Backward recursion ``V(s) = logsumexp_a(-c(s, a) + V(s a))`` with
    ``V = 0`` at depth T.
    """
    tables = energy.cost_tables()
    V = energy.vocab_size
    values: list[np.ndarray] = [np.zeros(0)] * (energy.horizon + 1)
    values[energy.horizon] = np.zeros(V ** energy.horizon)
    for d in range(energy.horizon - 1, -1, -1):
        values[d] = kernels.logsumexp_rows(-tables[d] + values[d + 1].reshape(V ** d, V))
    return values


def _prefix_index(prefix: Sequence[int], V: int) -> int:
    idx = 0
    for a in prefix:
        idx = idx * V + a
    return idx


def soft_value(energy: EnergyModel, prefix: Sequence[int]) -> float:
    """Soft value of the state reached after ``prefix`` (depth ``len(prefix) + 1``)."""
    if len(prefix) > energy.horizon:
        raise ValueError("prefix longer than the horizon")
    values = soft_value_tables(energy)
    return float(values[len(prefix)][_prefix_index(prefix, energy.vocab_size)])


def energy_to_policy(energy: EnergyModel) -> dict[tuple[int, ...], np.ndarray]:
    """Next-token conditionals ``exp(-c(s,a) + V(s a) - V(s))`` at every nonterminal state."""
    tables = energy.cost_tables()
    values = soft_value_tables(energy)
    V = energy.vocab_size
    out = {}
    for d in range(energy.horizon):
        cond = np.exp(-tables[d] + values[d + 1].reshape(V ** d, V) - values[d][:, None])
        for j, prefix in enumerate(itertools.product(range(V), repeat=d)):
            out[prefix] = cond[j]
    return out


def autoregressive_probability(policy: TabularPolicy, context: Sequence[int], traj: Sequence[int],
                               temperature: float = 1.0) -> float:
    """Product of conditionals; the direct path used to check Gibbs identities."""
    ctx = list(context)
    prob = 1.0
    for a in traj:
        prob *= float(next_token_dist(policy, ctx, temperature)[a])
        ctx.append(a)
    return prob


def random_policy(vocab: Vocab, order: int, contexts: Iterable[Sequence[int]],
                  rng: np.random.Generator, scale: float = 1.0) -> TabularPolicy:
    """Policy with N(0, scale^2) logits on the keys of ``contexts``."""
    pol = TabularPolicy(vocab, order)
    for ctx in contexts:
        key = pol.key(ctx)
        if key not in pol.logits:
            pol.logits[key] = rng.normal(0.0, scale, size=vocab.size)
    return pol


def full_tree_policy(vocab: Vocab, context: Sequence[int], horizon: int,
                     rng: np.random.Generator, scale: float = 1.0) -> TabularPolicy:
    """Random policy whose order covers ``context`` plus every prefix, so each tree node has its own row."""
    ctx = tuple(context)
    order = len(ctx) + horizon
    contexts = (ctx + p for d in range(horizon)
                for p in itertools.product(range(vocab.size), repeat=d))
    return random_policy(vocab, order, contexts, rng, scale)


__all__ = [
    "PAD", "ENUMERATION_LIMIT", "EnumerationTooLarge", "FrozenPolicyError", "named_rng", "Vocab",
    "TabularPolicy", "Rollout", "next_token_dist", "next_token_logprobs", "sample_rollout",
    "trajectory_energy", "logprob_gradient", "EnergyModel", "enumerate_trajectories",
    "trajectory_energies", "gibbs_probabilities", "gibbs_distribution", "soft_value_tables",
    "soft_value", "energy_to_policy", "autoregressive_probability", "random_policy",
    "full_tree_policy",
]
