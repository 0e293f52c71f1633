"""Numerical oracles for the theory behind adaptive masking and sparse calibration.

Each ``verify_*`` function draws seeded random instances, evaluates an identity
or inequality by exact enumeration, and returns an :class:`OracleReport`.
Every report tracks the worst deviation per named check against that check's
tolerance; an oracle passes only when every check on every instance is within
tolerance.
"""

from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq

from paint_lab import kernels
from paint_lab import losses
from paint_lab.calibration import information_gain, selection_budget, top_s_by_ratio
from paint_lab.policy import (
    EnergyModel, TabularPolicy, Vocab, autoregressive_probability, energy_to_policy,
    enumerate_trajectories, full_tree_policy, gibbs_probabilities, logprob_gradient, named_rng,
    next_token_dist,
)


# -- reports --------------------------------------------------------------------

@dataclass
class Check:
    tolerance: float
    max_dev: float = 0.0
    count: int = 0
    failed: int = 0

    def record(self, dev: float) -> bool:
        dev = float(dev)
        self.count += 1
        if not (dev <= self.tolerance):  # NaN fails too
            self.failed += 1
            self.max_dev = max(self.max_dev, dev) if not math.isnan(dev) else math.inf
            return False
        self.max_dev = max(self.max_dev, dev)
        return True


@dataclass
class OracleReport:
    name: str
    result: str
    n: int = 0
    passed: int = 0
    checks: dict[str, Check] = field(default_factory=dict)
    failures: list[dict] = field(default_factory=list)
    seconds: float = 0.0
    notes: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.n > 0 and self.passed == self.n and all(c.failed == 0 for c in self.checks.values())

    @property
    def max_dev(self) -> float:
        """Worst deviation of the first (primary) check."""
        return next(iter(self.checks.values())).max_dev if self.checks else 0.0

    @property
    def tolerance(self) -> float:
        return next(iter(self.checks.values())).tolerance if self.checks else 0.0

    def check(self, name: str, tolerance: float) -> Check:
        if name not in self.checks:
            self.checks[name] = Check(tolerance)
        return self.checks[name]

    def instance(self, ok: bool, dump: Callable[[], dict] | None = None) -> None:
        self.n += 1
        if ok:
            self.passed += 1
        elif dump is not None and len(self.failures) < 5:
            self.failures.append(_jsonable(dump()))

    def to_dict(self) -> dict:
        return {
            "name": self.name, "result": self.result, "n": self.n, "pass": self.ok,
            "max_dev": _num(self.max_dev), "tolerance": self.tolerance,
            "checks": {k: {"max_dev": _num(c.max_dev), "tolerance": c.tolerance, "count": c.count,
                           "failed": c.failed} for k, c in self.checks.items()},
            "failures": self.failures, "notes": _jsonable(self.notes),
        }


def _num(x: float):
    return x if math.isfinite(x) else str(x)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return _num(float(obj))
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        rep = fn(*args, **kwargs)
        rep.seconds = time.perf_counter() - t0
        return rep
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _dirichlet(rng: np.random.Generator, size: int, alpha: float = 1.0, floor: float = 1e-3) -> np.ndarray:
    p = rng.dirichlet(np.full(size, alpha)) + floor
    return p / p.sum()


def _entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    m = p > 0
    return float(np.sum(p[m] * (np.log(p[m]) - np.log(q[m]))))


# -- autoregressive / Gibbs -------------------------------------------------------

@_timed
def verify_gibbs(n: int = 100, seed: int = 0, tol: float = 1e-10) -> OracleReport:
    """Policy energies give the autoregressive law; additive energies give a normalized policy."""
    rep = OracleReport("gibbs", "autoregressive-Gibbs correspondence")
    rng = named_rng(seed, "oracle/gibbs")
    fwd = rep.check("gibbs_vs_product", tol)
    conv = rep.check("policy_product_vs_gibbs", tol)
    norm = rep.check("conditional_normalization", tol)
    trip = rep.check("round_trip_conditionals", tol)
    shift = rep.check("shift_invariance", tol)
    for i in range(n):
        V = int(rng.integers(2, 5))
        T = int(rng.integers(1, 5))
        vocab = Vocab(tuple(f"t{j}" for j in range(V - 1)) + ("eos",), "eos")
        context = tuple(int(c) for c in rng.integers(0, V, size=int(rng.integers(0, 3))))
        if i == 0:
            policy = TabularPolicy(vocab, 0)  # uniform
        else:
            policy = full_tree_policy(vocab, context, T, rng, scale=float(rng.uniform(0.5, 3.0)))
        energy = EnergyModel.from_policy(policy, context, T)
        gibbs = gibbs_probabilities(energy)
        trajs = enumerate_trajectories(V, T)
        direct = np.array([autoregressive_probability(policy, context, t) for t in trajs])
        ok = fwd.record(np.max(np.abs(gibbs - direct)))
        # round trip back to the source conditionals
        conds = energy_to_policy(energy)
        dev = max(np.max(np.abs(conds[p] - next_token_dist(policy, context + p))) for p in conds)
        ok &= trip.record(dev)
        # converse: arbitrary additive costs
        table = {p: rng.normal(0.0, 2.0, size=V) for d in range(T)
                 for p in itertools.product(range(V), repeat=d)}
        e2 = EnergyModel.from_table(table, V, T)
        conds2 = energy_to_policy(e2)
        ok &= norm.record(max(abs(c.sum() - 1.0) for c in conds2.values()))
        g2 = gibbs_probabilities(e2)
        prod = np.array([math.prod(conds2[t[:d]][t[d]] for d in range(T)) for t in trajs])
        ok &= conv.record(np.max(np.abs(g2 - prod)))
        ok &= shift.record(np.max(np.abs(gibbs_probabilities(e2.shifted(float(rng.normal(0, 5)))) - g2)))
        rep.instance(ok, lambda: {"V": V, "T": T, "context": context})
    return rep


# -- mask-ratio monotonicity ----------------------------------------------------------

@dataclass(frozen=True)
class MixtureInstance:
    q0: np.ndarray
    q1: np.ndarray
    beta: float
    lam: float
    eps_grid: np.ndarray
    resolution: float = 1e-4

    def __post_init__(self):
        q0, q1 = np.asarray(self.q0, float), np.asarray(self.q1, float)
        if q0.shape != q1.shape:
            raise ValueError("q0 and q1 must share a support")
        if np.allclose(q0, q1, rtol=0, atol=1e-15):
            raise ValueError("q0 and q1 must differ")
        if (q0 <= 0).any() or (q1 <= 0).any():
            raise ValueError("q0 and q1 must be strictly positive")
        if not (self.beta > 0 and self.lam > 0):
            raise ValueError("beta and lambda must be positive")
        if not 0 < self.resolution <= 1e-4:
            raise ValueError("grid resolution must be at most 1e-4")

    @property
    def rho_grid(self) -> np.ndarray:
        m = int(round(1.0 / self.resolution))
        return np.arange(m) * self.resolution  # [0, 1)

    def mixture(self, rho):
        rho = np.asarray(rho, dtype=np.float64)[..., None]
        return (1.0 - rho) * self.q0 + rho * self.q1

    def entropy(self, rho) -> np.ndarray:
        q = self.mixture(rho)
        return -np.sum(q * np.log(q), axis=-1)

    def entropy_slope(self, rho: float) -> float:
        q = self.mixture(rho)
        d = self.q1 - self.q0
        return float(-np.sum(d * np.log(q)))  # sum(d) = 0 drops the +1 term

    def objective(self, rho, eps: float, v0: float = 0.0):
        return self.beta * self.entropy(rho) - self.lam * (v0 + np.asarray(rho) * eps)


def random_mixture_instance(rng: np.random.Generator, support: int = 4, n_eps: int = 20) -> MixtureInstance:
    q0 = _dirichlet(rng, support)
    q1 = _dirichlet(rng, support)
    beta = float(rng.uniform(0.5, 2.0))
    lam = float(rng.uniform(0.5, 2.0))
    probe = MixtureInstance(q0, q1, beta, lam, np.zeros(1))
    lo = beta * probe.entropy_slope(0.97) / lam
    hi = beta * probe.entropy_slope(0.03) / lam
    eps = np.linspace(lo, hi, n_eps)
    return MixtureInstance(q0, q1, beta, lam, eps)


def second_moment(q: np.ndarray, policy: TabularPolicy, context: Sequence[int], horizon: int,
                  temperature: float = 1.0) -> float:
    """``sum_tau q(tau) ||grad log p(tau)||^2`` over all length-``horizon`` trajectories."""
    trajs = enumerate_trajectories(policy.vocab.size, horizon)
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (len(trajs),):
        raise ValueError("q must have one entry per trajectory")
    total = 0.0
    for w, traj in zip(q, trajs):
        grads: dict = {}
        ctx = list(context)
        for a in traj:
            key, g = logprob_gradient(policy, ctx, a, temperature)
            grads[key] = grads[key] + g if key in grads else g
            ctx.append(a)
        total += w * sum(float(np.dot(g, g)) for g in grads.values())
    return float(total)


def optimal_mask_ratio(instance: MixtureInstance, epsilon: float, v0: float = 0.0) -> float | None:
    """Grid maximizer of ``beta H(rho) - lam (v0 + rho eps)``; ``None`` at a grid boundary."""
    grid = instance.rho_grid
    vals = instance.objective(grid, epsilon, v0)
    i = int(np.argmax(vals))
    if i == 0 or i == grid.size - 1:
        return None
    return float(grid[i])


def _foc_root(instance: MixtureInstance, epsilon: float) -> float | None:
    f = lambda r: instance.beta * instance.entropy_slope(r) - instance.lam * epsilon
    a, b = 1e-9, 1.0 - 1e-9
    if f(a) * f(b) > 0:
        return None
    return brentq(f, a, b, xtol=1e-14)


@_timed
def verify_mask_monotonicity(n: int = 100, seed: int = 0, support: int = 4, n_eps: int = 20) -> OracleReport:
    """The optimal hidden ratio is non-increasing in the alignment-error proxy."""
    rep = OracleReport("mask_monotonicity", "monotonicity of the optimal adaptive mask ratio")
    rng = named_rng(seed, "oracle/mask")
    step = 1e-4
    mono = rep.check("nonincreasing_rho_star", 0.0)
    strict = rep.check("strict_decrease_within_grid_step", step)
    foc = rep.check("grid_vs_first_order_root", step)
    lin = rep.check("second_moment_linearity", 1e-12)
    vocab = Vocab(("a", "eos"), "eos")
    interior_total = 0
    for _ in range(n):
        inst = random_mixture_instance(rng, support, n_eps)
        ok = True
        rhos = []
        for eps in inst.eps_grid:
            r = optimal_mask_ratio(inst, float(eps))
            if r is None:
                continue
            rhos.append(r)
            root = _foc_root(inst, float(eps))
            ok &= foc.record(abs(r - root) if root is not None else math.inf)
        interior_total += len(rhos)
        if len(rhos) >= 2:
            diffs = np.diff(rhos)
            ok &= mono.record(max(0.0, float(diffs.max())))
            # a strictly decreasing branch may stall for one grid cell at most
            ok &= strict.record(float(diffs.max()) + step if diffs.max() >= 0 else 0.0)
        # linearity of M2 along the mixture path, on a 2-token, horizon-2 policy
        pol = full_tree_policy(vocab, (), 2, rng)
        v0 = second_moment(inst.q0, pol, (), 2)
        v1 = second_moment(inst.q1, pol, (), 2)
        rho = float(rng.uniform(0, 1))
        mix = second_moment(inst.mixture(rho), pol, (), 2)
        ok &= lin.record(abs(mix - ((1 - rho) * v0 + rho * v1)) / max(1.0, abs(mix)))
        rep.instance(ok, lambda: {"q0": inst.q0, "q1": inst.q1, "beta": inst.beta, "lam": inst.lam,
                                  "rho_star": rhos})
    rep.notes["interior_maximizers"] = interior_total
    return rep


# -- energy fusion ----------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianPairInstance:
    mu_t: float
    mu_s: float
    sigma_t: float
    sigma_s: float
    c: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if not (self.sigma_t > 0 and self.sigma_s > 0):
            raise ValueError("standard deviations must be positive")
        if not (self.c > 0 and self.gamma > 0):
            raise ValueError("c and gamma must be positive")

    @property
    def tau_t(self) -> float:
        return 1.0 / self.sigma_t ** 2

    @property
    def tau_s(self) -> float:
        return 1.0 / self.sigma_s ** 2


def map_energy_fusion(instance: GaussianPairInstance, e_s, e_t) -> tuple[np.ndarray, float]:
    """Precision-weighted MAP energy ``k* E_S + (1 - k*) E_T`` with ``k* = s_T^2 / (s_T^2 + s_S^2)``."""
    vt, vs = instance.sigma_t ** 2, instance.sigma_s ** 2
    k = vt / (vt + vs)
    e_s = np.asarray(e_s, dtype=np.float64)
    e_t = np.asarray(e_t, dtype=np.float64)
    return k * e_s + (1.0 - k) * e_t, k


def golden_section_min(diff: Callable[[float, float], float], lo: float, hi: float,
                       tol: float = 1e-15, max_iter: int = 400) -> float:
    """Golden-section search driven by ``diff(a, b) = f(a) - f(b)``.

    Comparing exact differences instead of rounded function values keeps the
    bracket shrinking all the way down to floating-point resolution.
    """
    g = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - g * (b - a)
    d = a + g * (b - a)
    for _ in range(max_iter):
        if abs(b - a) <= tol * max(1.0, abs(a) + abs(b)):
            break
        if diff(c, d) < 0:
            b, d = d, c
            c = b - g * (b - a)
        else:
            a, c = c, d
            d = a + g * (b - a)
    return 0.5 * (a + b)


@_timed
def verify_energy_fusion(n: int = 200, seed: int = 0, vocab_size: int = 6, tol: float = 1e-8) -> OracleReport:
    """Closed-form MAP fusion against a per-token numerical minimizer of the Gaussian log-likelihood."""
    rep = OracleReport("energy_fusion", "precision-weighted geometric calibration")
    rng = named_rng(seed, "oracle/fusion")
    num = rep.check("closed_form_vs_minimizer", tol)
    geo = rep.check("geometric_form", 1e-12)
    half = rep.check("equal_sigma_k_half", 0.0)
    for i in range(n):
        sigma_t = float(rng.uniform(0.1, 3.0))
        sigma_s = sigma_t if i % 10 == 0 else float(rng.uniform(0.1, 3.0))
        inst = GaussianPairInstance(0.0, 0.0, sigma_t, sigma_s)
        logits_s = rng.normal(0, 2, vocab_size)
        logits_t = rng.normal(0, 2, vocab_size)
        _, ls = kernels.softmax_rows(logits_s[None, :])
        _, lt = kernels.softmax_rows(logits_t[None, :])
        e_s, e_t = -ls[0], -lt[0]
        fused, k = map_energy_fusion(inst, e_s, e_t)
        ws, wt = 1.0 / sigma_s ** 2, 1.0 / sigma_t ** 2
        dev = 0.0
        for v in range(vocab_size):
            es, et = e_s[v], e_t[v]

            def diff(a, b, es=es, et=et):
                # f(x) = ws (x - es)^2 + wt (x - et)^2, differenced without cancellation
                return (a - b) * (ws * (a + b - 2 * es) + wt * (a + b - 2 * et))

            lo, hi = min(es, et) - 1.0, max(es, et) + 1.0
            dev = max(dev, abs(golden_section_min(diff, lo, hi) - fused[v]))
        ok = num.record(dev)
        p_map = np.exp(-fused - kernels.logsumexp_rows(-fused[None, :])[0])
        geo_p = np.exp(k * ls[0] + (1 - k) * lt[0])
        ok &= geo.record(np.max(np.abs(p_map - geo_p / geo_p.sum())))
        if sigma_s == sigma_t:
            ok &= half.record(abs(k - 0.5))
        rep.instance(ok, lambda: {"sigma_t": sigma_t, "sigma_s": sigma_s, "k": k})
    return rep


# -- entropy-ratio selection -------------------------------------------------------------

def gaussian_entropy(precision: float) -> float:
    return 0.5 * math.log(2 * math.pi * math.e) - 0.5 * math.log(precision)


def _subset_masks(size: int) -> np.ndarray:
    idx = np.arange(1 << size)
    return ((idx[:, None] >> np.arange(size)) & 1).astype(np.float64)


def _interpolation_energy_dev(interp: Callable, rng: np.random.Generator, k: float) -> float:
    """Max deviation of ``-log p_k - ((1-k) E_T + k E_S)`` from a per-row constant."""
    V = int(rng.integers(2, 9))
    rows = int(rng.integers(1, 6))
    pt, lt = kernels.softmax_rows(rng.normal(0, 2, (rows, V)))
    ps, ls = kernels.softmax_rows(rng.normal(0, 2, (rows, V)))
    sel = np.ones(rows, dtype=bool)
    _, lk = interp(pt, lt, ls, sel, k)
    resid = -lk - ((1 - k) * -lt + k * -ls)
    return float(np.max(resid.max(axis=1) - resid.min(axis=1)))


@_timed
def verify_entropy_ratio_selection(n: int = 1000, seed: int = 0, max_positions: int = 12,
                                   interpolate_fn: Callable | None = None) -> OracleReport:
    """Gain formula, order equivalence with R, budget optimality of top-S, and the
    geometric-interpolation energy identity used by the calibrated targets."""
    rep = OracleReport("entropy_ratio_selection", "entropy-ratio sparse selection")
    rng = named_rng(seed, "oracle/selection")
    interp = interpolate_fn or kernels.interpolate_rows
    formula = rep.check("gain_vs_gaussian_entropy", 1e-10)
    curv = rep.check("interpolated_precision", 1e-9)
    mono = rep.check("gain_monotone_in_ratio", 0.0)
    best = rep.check("top_s_vs_exhaustive", 1e-12)
    ident = rep.check("interpolation_energy_identity", 1e-10)
    masks = {m: _subset_masks(m) for m in range(1, max_positions + 1)}
    for i in range(n):
        k = float(rng.uniform(0.005, 0.995))
        gamma = float(rng.uniform(0.2, 3.0))
        c = float(rng.uniform(0.5, 2.0))
        h_s, h_t = rng.uniform(0.05, 3.0, size=2)
        if i % 50 == 0:
            h_t = h_s
        var_s, var_t = c * h_s ** gamma, c * h_t ** gamma
        tau_s, tau_t = 1 / var_s, 1 / var_t
        tau_k = (1 - k) * tau_t + k * tau_s
        r = h_t / h_s
        direct = gaussian_entropy(tau_t) - gaussian_entropy(tau_k)
        ok = formula.record(abs(direct - information_gain(r, k, gamma)))
        # curvature of the interpolated log-density recovers tau_k
        mu_t, mu_s = rng.normal(0, 1, size=2)
        logk = lambda e: (1 - k) * (-(e - mu_t) ** 2 * tau_t / 2) + k * (-(e - mu_s) ** 2 * tau_s / 2)
        second = logk(1.0) - 2 * logk(0.0) + logk(-1.0)
        ok &= curv.record(abs(-second - tau_k) / tau_k)
        # monotone in R
        rs = np.sort(rng.uniform(0.05, 20.0, size=16))
        gains = np.array([information_gain(x, k, gamma) for x in rs])
        ok &= mono.record(0.0 if np.all(np.diff(gains) > 0) else 1.0)
        # budget optimality
        m = int(rng.integers(1, max_positions + 1))
        ratios = rng.uniform(0.2, 5.0, size=m)
        if i % 7 == 0:
            ratios = np.round(ratios, 0) + 0.5  # ties
        if i % 97 == 0:
            ratios[:] = 1.5
        s = int(rng.integers(0, m + 1))
        g = np.array([information_gain(x, k, gamma) for x in ratios])
        M = masks[m]
        feasible = M[M.sum(axis=1) == s]
        opt = float((feasible @ g).max())
        chosen = top_s_by_ratio(ratios, s)
        ok &= best.record(abs(opt - float(g[chosen].sum())))
        ok &= ident.record(_interpolation_energy_dev(interp, rng, k))
        rep.instance(ok, lambda: {"k": k, "gamma": gamma, "ratios": ratios, "S": s})
    return rep


# -- masked posteriors: smoothing, KL decomposition, Rao-Blackwell --------------------------

@dataclass(frozen=True)
class MaskedPosteriorInstance:
    posterior: np.ndarray  # rho_t(m | Xi)
    targets: np.ndarray  # q_m, one row per hidden block
    p_s: np.ndarray

    def __post_init__(self):
        for name in ("posterior", "p_s"):
            v = getattr(self, name)
            if abs(v.sum() - 1) > 1e-12 or (v <= 0).any():
                raise ValueError(f"{name} must be a strictly positive distribution")
        if np.any(np.abs(self.targets.sum(axis=1) - 1) > 1e-12) or (self.targets <= 0).any():
            raise ValueError("targets must be strictly positive distributions")

    @property
    def mixture(self) -> np.ndarray:
        return self.posterior @ self.targets


def random_posterior_instance(rng: np.random.Generator, kind: str = "random") -> MaskedPosteriorInstance:
    V = int(rng.integers(2, 9))
    blocks = 1 if kind == "single" else int(rng.integers(2, 7))
    post = _dirichlet(rng, blocks)
    if kind == "identical":
        targets = np.tile(_dirichlet(rng, V), (blocks, 1))
    else:
        targets = np.stack([_dirichlet(rng, V, alpha=0.5) for _ in range(blocks)])
    return MaskedPosteriorInstance(post, targets, _dirichlet(rng, V))


def _instance_kind(i: int) -> str:
    return "identical" if i % 10 == 3 else ("single" if i % 10 == 7 else "random")


@_timed
def verify_entropy_smoothing(n: int = 200, seed: int = 0) -> OracleReport:
    """Entropy of the posterior mixture target dominates the mean per-block entropy."""
    rep = OracleReport("entropy_smoothing", "entropy smoothing")
    rng = named_rng(seed, "oracle/smoothing")
    ineq = rep.check("jensen_gap_nonnegative", 1e-12)
    eq = rep.check("equality_when_identical", 1e-12)
    gaps = []
    for i in range(n):
        kind = _instance_kind(i)
        inst = random_posterior_instance(rng, kind)
        gap = _entropy(inst.mixture) - float(inst.posterior @ [_entropy(q) for q in inst.targets])
        gaps.append(gap)
        ok = ineq.record(max(0.0, -gap))
        if kind != "random":
            ok &= eq.record(abs(gap))
        rep.instance(ok, lambda: {"kind": kind, "gap": gap})
    # antipodal two-block case: strict gap
    anti = MaskedPosteriorInstance(np.array([0.5, 0.5]), np.array([[0.99, 0.01], [0.01, 0.99]]),
                                   np.array([0.5, 0.5]))
    g = _entropy(anti.mixture) - 0.5 * sum(_entropy(q) for q in anti.targets)
    rep.instance(ineq.record(0.0 if g > 0 else 1.0), lambda: {"antipodal_gap": g})
    rep.notes["min_gap"] = float(min(gaps))
    return rep


def mutual_information(posterior: np.ndarray, targets: np.ndarray) -> float:
    """``I(A; M) = H(mixture) - sum_m rho(m) H(q_m)``."""
    return _entropy(posterior @ targets) - float(posterior @ [_entropy(q) for q in targets])


@_timed
def verify_kl_decomposition(n: int = 200, seed: int = 0, tol: float = 1e-10) -> OracleReport:
    """Mean per-block forward KL = KL of the mixture + mutual information."""
    rep = OracleReport("kl_decomposition", "forward-KL decomposition")
    rng = named_rng(seed, "oracle/kl")
    ident = rep.check("decomposition_identity", tol)
    special = rep.check("student_equals_mixture", tol)
    for i in range(n):
        inst = random_posterior_instance(rng, _instance_kind(i))
        lhs = float(inst.posterior @ [_kl(q, inst.p_s) for q in inst.targets])
        mi = mutual_information(inst.posterior, inst.targets)
        rhs = _kl(inst.mixture, inst.p_s) + mi
        ok = ident.record(abs(lhs - rhs))
        lhs2 = float(inst.posterior @ [_kl(q, inst.mixture) for q in inst.targets])
        ok &= special.record(abs(lhs2 - mi))
        rep.instance(ok, lambda: {"lhs": lhs, "rhs": rhs})
    return rep


def _block_gradients(p_s: np.ndarray, logp_s: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Forward-KL gradient rows w.r.t. the student logits, one row per target (via the loss module)."""
    n = targets.shape[0]
    ps = np.tile(p_s, (n, 1))
    ls = np.tile(logp_s, (n, 1))
    with np.errstate(divide="ignore"):
        lt = np.log(targets)
    return losses.row_gradients(targets, lt, ps, ls, losses.LossConfig(tau=math.inf))


def _weighted_cov(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    mu = w @ x
    d = x - mu
    return (d * w[:, None]).T @ d


@_timed
def verify_rao_blackwell(n: int = 200, seed: int = 0) -> OracleReport:
    """Posterior-averaged block gradients equal the mixture gradient; covariance drops (PSD gap)."""
    rep = OracleReport("rao_blackwell", "Rao-Blackwellized gradient variance")
    rng = named_rng(seed, "oracle/rao_blackwell")
    mean = rep.check("mean_identity", 1e-10)
    psd = rep.check("covariance_gap_min_eigenvalue", 1e-8)
    total = rep.check("law_of_total_covariance", 1e-10)
    for i in range(n):
        V = int(rng.integers(2, 6))
        n_ctx = int(rng.integers(1, 4))
        blocks = 1 if i % 10 == 7 else int(rng.integers(2, 5))
        identical = i % 10 == 3
        w_ctx = _dirichlet(rng, n_ctx)
        dim = n_ctx * V
        atoms, weights, bars, bar_w = [], [], [], []
        mean_dev = 0.0
        for c in range(n_ctx):
            p_s, logp_s = kernels.softmax_rows(rng.normal(0, 1.5, (1, V)))
            post = _dirichlet(rng, blocks)
            base = _dirichlet(rng, V)
            targets = np.stack([base if identical else _dirichlet(rng, V, 0.5) for _ in range(blocks)])
            g_blocks = _block_gradients(p_s[0], logp_s[0], targets)
            g_bar = _block_gradients(p_s[0], logp_s[0], (post @ targets)[None, :])[0]
            analytic = p_s[0] - post @ targets
            mean_dev = max(mean_dev, float(np.max(np.abs(post @ g_blocks - g_bar))),
                           float(np.max(np.abs(g_bar - analytic))))
            for b in range(blocks):
                vec = np.zeros(dim)
                vec[c * V:(c + 1) * V] = g_blocks[b]
                atoms.append(vec)
                weights.append(w_ctx[c] * post[b])
            vec = np.zeros(dim)
            vec[c * V:(c + 1) * V] = g_bar
            bars.append(vec)
            bar_w.append(w_ctx[c])
        ok = mean.record(mean_dev)
        atoms, weights = np.array(atoms), np.array(weights)
        bars, bar_w = np.array(bars), np.array(bar_w)
        cov_g = _weighted_cov(atoms, weights)
        cov_bar = _weighted_cov(bars, bar_w)
        gap = cov_g - cov_bar
        min_eig = float(np.linalg.eigvalsh(0.5 * (gap + gap.T)).min())
        ok &= psd.record(max(0.0, -min_eig))
        # E[Cov(G | context)] assembled context by context
        within = np.zeros((dim, dim))
        per = blocks
        for c in range(n_ctx):
            sl = slice(c * per, (c + 1) * per)
            wc = weights[sl] / weights[sl].sum()
            within += w_ctx[c] * _weighted_cov(atoms[sl], wc)
        ok &= total.record(float(np.max(np.abs(cov_g - cov_bar - within))))
        if blocks == 1 or identical:
            ok &= total.record(float(np.max(np.abs(gap))))
        rep.instance(ok, lambda: {"V": V, "contexts": n_ctx, "blocks": blocks, "min_eig": min_eig})
    return rep


# -- visible-context duality and suffix optimality ----------------------------------------------

@dataclass(frozen=True)
class DualityInstance:
    """Exact joint over (prefix class z, binary reference y of length T, next action a).

    ``joint[z, y_index, a]``; ``y_index`` encodes y_1..y_T with y_1 as the most
    significant bit.
    """

    joint: np.ndarray
    T: int
    k: int

    def __post_init__(self):
        if abs(self.joint.sum() - 1) > 1e-12 or (self.joint < 0).any():
            raise ValueError("joint must be a distribution")
        if self.joint.size > 10 ** 5:
            raise ValueError("joint too large for exact marginalization")
        if not 1 <= self.k <= self.T:
            raise ValueError("mask budget must lie in [1, T]")
        if self.joint.shape[1] != 2 ** self.T:
            raise ValueError("joint does not match the reference length")


def markov_duality_instance(rng: np.random.Generator | None = None, T: int = 6, k: int = 2,
                            decay: float = 0.45, n_classes: int = 2,
                            independent: bool = False) -> DualityInstance:
    """First-order Markov binary reference; the action's dependence on ``y_j`` decays with ``j``."""
    rng = rng if rng is not None else named_rng(0, "oracle/duality")
    p1 = float(rng.uniform(0.3, 0.7))
    stay = rng.uniform(0.55, 0.85, size=2)
    w0 = float(rng.uniform(2.0, 3.0))
    weights = np.array([w0 * decay ** j for j in range(T)])
    class_bias = rng.normal(0, 0.5, size=n_classes)
    ys = np.array(list(itertools.product((0, 1), repeat=T)))
    py = np.where(ys[:, 0] == 1, p1, 1 - p1).astype(float)
    for j in range(1, T):
        same = ys[:, j] == ys[:, j - 1]
        prev = ys[:, j - 1]
        py *= np.where(same, stay[prev], 1 - stay[prev])
    joint = np.zeros((n_classes, 2 ** T, 2))
    for z in range(n_classes):
        logit = class_bias[z] + (0.0 if independent else (2 * ys - 1) @ weights)
        pa = 1 / (1 + np.exp(-logit))
        joint[z, :, 1] = py * pa / n_classes
        joint[z, :, 0] = py * (1 - pa) / n_classes
    return DualityInstance(joint, T, k)


def _cond_entropy(joint: np.ndarray, given_axes_shape: tuple[int, ...]) -> float:
    """``H(A | G)`` for ``joint`` reshaped as ``(*given, A)``."""
    j = joint.reshape(given_axes_shape + (joint.shape[-1],))
    pg = j.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(pg > 0, j / np.where(pg > 0, pg, 1), 0)
        terms = np.where(j > 0, j * np.log(np.where(cond > 0, cond, 1)), 0)
    return float(-terms.sum())


def _split_reference(inst: DualityInstance, t: int) -> np.ndarray:
    """Joint reshaped to ``(z, visible context, hidden block, a)`` for a block starting at ``t`` (1-based)."""
    T, k = inst.T, inst.k
    bits = inst.joint.reshape((inst.joint.shape[0],) + (2,) * T + (2,))
    hidden = list(range(t - 1, t - 1 + k))
    visible = [j for j in range(T) if j not in hidden]
    order = [0] + [1 + j for j in visible] + [1 + j for j in hidden] + [T + 1]
    arr = np.transpose(bits, order)
    return arr.reshape(inst.joint.shape[0], 2 ** len(visible), 2 ** k, 2)


def gamma_profile(inst: DualityInstance) -> list[tuple[int, float, float]]:
    """``(t, Gamma(t), E[I(A; C_t | z)])`` for every feasible block start ``t``.

    ``Gamma`` is summed directly as a posterior-weighted KL of the per-block
    action law from the visible-context action law; the visible-context
    information comes from entropies.
    """
    out = []
    n_z = inst.joint.shape[0]
    h_a_given_z = _cond_entropy(inst.joint.sum(axis=1), (n_z,))
    for t in range(1, inst.T - inst.k + 2):
        arr = _split_reference(inst, t)
        p_zcm = arr.sum(axis=-1)
        p_zc = p_zcm.sum(axis=-1)
        gamma = 0.0
        for z in range(n_z):
            for c in range(arr.shape[1]):
                if p_zc[z, c] <= 0:
                    continue
                a_given_zc = arr[z, c].sum(axis=0) / p_zc[z, c]
                for m in range(arr.shape[2]):
                    if p_zcm[z, c, m] <= 0:
                        continue
                    a_given_zcm = arr[z, c, m] / p_zcm[z, c, m]
                    gamma += p_zcm[z, c, m] * _kl(a_given_zcm, a_given_zc)
        h_a_given_zc = _cond_entropy(arr.sum(axis=2), (n_z, arr.shape[1]))
        out.append((t, gamma, h_a_given_z - h_a_given_zc))
    return out


def duality_constant(inst: DualityInstance) -> float:
    """``K = I(A; y | z)``."""
    n_z = inst.joint.shape[0]
    return _cond_entropy(inst.joint.sum(axis=1), (n_z,)) - _cond_entropy(inst.joint, (n_z, inst.joint.shape[1]))


@_timed
def verify_duality(n: int = 25, seed: int = 0, T: int = 6, k: int = 2, tol: float = 1e-10) -> OracleReport:
    """``Gamma(t) + E[I(A; C_t)] = K`` for every t; with the visible-context information
    verified nondecreasing, Gamma is non-increasing and minimized by the suffix block."""
    rep = OracleReport("visible_context_duality", "visible-context duality and suffix optimality")
    rng = named_rng(seed, "oracle/duality")
    dual = rep.check("gamma_plus_visible_info_equals_K", tol)
    assumption = rep.check("assumption_visible_info_nondecreasing", 1e-12)
    mono = rep.check("gamma_nonincreasing", 1e-12)
    argmin = rep.check("argmin_at_suffix", 1e-12)
    edge = rep.check("boundary_cases", tol)
    for i in range(n):
        inst = markov_duality_instance(rng, T, k)
        K = duality_constant(inst)
        prof = gamma_profile(inst)
        ts = [p[0] for p in prof]
        gam = np.array([p[1] for p in prof])
        vis = np.array([p[2] for p in prof])
        ok = dual.record(float(np.max(np.abs(gam + vis - K))))
        ok &= assumption.record(max(0.0, float(-np.diff(vis).min())) if len(vis) > 1 else 0.0)
        ok &= mono.record(max(0.0, float(np.diff(gam).max())) if len(gam) > 1 else 0.0)
        ok &= argmin.record(float(gam[ts.index(T - k + 1)] - gam.min()))
        if i == 0:
            rep.notes["profile"] = [{"t": t, "gamma": g, "visible_info": v} for t, g, v in prof]
            rep.notes["K"] = K
            rep.notes["argmin_t"] = int(ts[int(np.argmin(gam))])
        rep.instance(ok, lambda: {"gamma": gam, "visible": vis, "K": K})
    # independence: Gamma = 0 everywhere
    ind = markov_duality_instance(rng, T, k, independent=True)
    e1 = max(abs(g) for _, g, _ in gamma_profile(ind))
    # whole reference hidden: one block, Gamma = K
    full = markov_duality_instance(rng, T, T)
    prof = gamma_profile(full)
    e2 = abs(prof[0][1] - duality_constant(full)) + (0.0 if len(prof) == 1 else 1.0)
    rep.instance(edge.record(max(e1, e2)), lambda: {"independent": e1, "full_mask": e2})
    return rep


# -- suite ------------------------------------------------------------------------------------

ORACLES: dict[str, Callable[..., OracleReport]] = {
    "gibbs": verify_gibbs,
    "mask_monotonicity": verify_mask_monotonicity,
    "energy_fusion": verify_energy_fusion,
    "entropy_ratio_selection": verify_entropy_ratio_selection,
    "entropy_smoothing": verify_entropy_smoothing,
    "kl_decomposition": verify_kl_decomposition,
    "rao_blackwell": verify_rao_blackwell,
    "visible_context_duality": verify_duality,
}


def run_suite(seed: int = 0, only: Sequence[str] | None = None, **overrides) -> list[OracleReport]:
    names = list(only) if only else list(ORACLES)
    unknown = [n for n in names if n not in ORACLES]
    if unknown:
        raise ValueError(f"unknown oracle(s) {unknown}; choose from {list(ORACLES)}")
    return [ORACLES[name](seed=seed, **overrides.get(name, {})) for name in names]


def summary_table(reports: Sequence[OracleReport]) -> str:
    lines = [f"{'oracle':<26} {'n':>6} {'max_dev':>12} {'tol':>10} {'sec':>7}  status"]
    for r in reports:
        lines.append(f"{r.name:<26} {r.n:>6} {r.max_dev:>12.3e} {r.tolerance:>10.1e} {r.seconds:>7.2f}  "
                     f"{'PASS' if r.ok else 'FAIL'}")
    return "\n".join(lines)


def suite_json(reports: Sequence[OracleReport], seed: int) -> str:
    # timings stay out of the report so reruns are byte-identical
    return json.dumps({"seed": seed, "all_pass": all(r.ok for r in reports),
                       "oracles": [r.to_dict() for r in reports]}, indent=2, sort_keys=True) + "\n"
