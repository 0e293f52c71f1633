"""Training loop, baselines, evaluation, and ablation sweeps."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, IO, Sequence

import numpy as np

from paint_lab import calibration as cal
from paint_lab import kernels
from paint_lab import losses
from paint_lab.config import TrainConfig
from paint_lab.masking import apply_mask, extract_anchors, extract_answer, mask_ratio, normalize_text, overlap_score
from paint_lab.policy import Rollout, TabularPolicy, Vocab, named_rng, sample_rollout
from paint_lab.tasks import SyntheticTask, build_base_policy, toy_vocab
from paint_lab.views import TeacherConfig, build_views, hint_rows, teacher_rows


class ExampleError(RuntimeError):
    """Failure while processing one training example; carries its id."""


@dataclass
class StepContext:
    """Everything a single update needs besides the student."""

    vocab: Vocab
    teacher: TeacherConfig
    config: TrainConfig
    rollout_rng: np.random.Generator
    mask_rng: np.random.Generator
    trace: IO[str] | None = None
    step: int = 0


@dataclass
class ExampleResult:
    grads: dict
    loss: losses.LossBreakdown
    alpha: float = 0.0
    rho: float = 0.0
    selected: int = 0
    view: dict = field(default_factory=dict)


def _distill(student: TabularPolicy, ctx: StepContext, task: SyntheticTask, rollout: Rollout,
             masked, calibrate: bool) -> tuple[dict, losses.LossBreakdown, int, dict]:
    cfg = ctx.config
    vocab = ctx.vocab
    x = task.prompt_tokens(vocab)
    views = build_views(x, masked, vocab)
    prefixes = [rollout.completion[:n] for n in range(len(rollout.completion))]
    keys, p_s, logp_s = losses.student_rows(student, losses.rollout_contexts(rollout), cfg.distill_temperature)
    hints = hint_rows(masked, rollout.completion, vocab) if ctx.teacher.mode == "energy_tilt" else None
    p_t, logp_t = teacher_rows(ctx.teacher, views, masked, prefixes, cfg.distill_temperature, hints)
    selected = 0
    if calibrate:
        # targets use a detached snapshot of the student rows
        calibrated = cal.calibrate_rows(p_s, logp_s, p_t, logp_t, cfg.calibration)
        p_t, logp_t = calibrated.targets, calibrated.target_logp
        selected = int(calibrated.selected.sum())
        if ctx.trace is not None:
            cal.write_trace(ctx.trace, task.id, ctx.step, calibrated, cfg.calibration)
    vals, counts = _loss_rows(p_t, logp_t, p_s, logp_s, cfg.loss)
    breakdown = losses.LossBreakdown(float(vals.mean()), vals, int(counts.sum()), len(vals))
    rows = losses.row_gradients(p_t, logp_t, p_s, logp_s, cfg.loss, cfg.distill_temperature)
    grads = losses.accumulate(keys, rows, 1.0 / len(keys))
    view = {"id": task.id, "teacher_context_len": len(views.teacher_context),
            "hidden_chars": masked.hidden, "completion": vocab.decode(rollout.completion)}
    return grads, breakdown, selected, view


def _loss_rows(p_t, logp_t, p_s, logp_s, config: losses.LossConfig):
    if config.divergence == "clipped_forward_kl":
        return kernels.clipped_fkl_rows(p_t, logp_t, logp_s, config.tau, config.floor_zero)
    vals = np.array([losses.divergence_variant(t, s, config.divergence) for t, s in zip(p_t, p_s)])
    return vals, np.zeros(len(vals), dtype=np.int64)


def paint_example(student: TabularPolicy, ctx: StepContext, task: SyntheticTask) -> ExampleResult:
    """Rollout, overlap, mask ratio, masked views, calibrated targets, loss and gradient."""
    cfg = ctx.config
    vocab = ctx.vocab
    try:
        rollout = sample_rollout(student, task.prompt_tokens(vocab), cfg.max_len, cfg.temperature, ctx.rollout_rng)
        anchors = extract_anchors(task.reference)
        alpha = overlap_score(vocab.decode(rollout.completion), anchors)
        rho = mask_ratio(alpha, cfg.mask.schedule)
        rng = ctx.mask_rng if cfg.mask.placement == "random_contiguous" else None
        masked = apply_mask(task.reference, rho, cfg.mask.placement, rng, cfg.mask.marker)
        grads, loss, selected, view = _distill(student, ctx, task, rollout, masked, calibrate=True)
    except Exception as exc:
        raise ExampleError(f"example {task.id}: {exc}") from exc
    view.update(alpha=alpha, rho=rho)
    return ExampleResult(grads, loss, alpha, rho, selected, view)


def opsd_example(student: TabularPolicy, ctx: StepContext, task: SyntheticTask) -> ExampleResult:
    """Vanilla privileged self-distillation: full reference, raw teacher targets."""
    cfg = ctx.config
    vocab = ctx.vocab
    try:
        rollout = sample_rollout(student, task.prompt_tokens(vocab), cfg.max_len, cfg.temperature, ctx.rollout_rng)
        masked = apply_mask(task.reference, 0.0, "suffix", None, cfg.mask.marker)
        grads, loss, _, view = _distill(student, ctx, task, rollout, masked, calibrate=False)
    except Exception as exc:
        raise ExampleError(f"example {task.id}: {exc}") from exc
    return ExampleResult(grads, loss, 0.0, 0.0, 0, view)


def sft_example(student: TabularPolicy, ctx: StepContext, task: SyntheticTask) -> ExampleResult:
    x = task.prompt_tokens(ctx.vocab)
    t = ctx.config.distill_temperature
    nll = losses.sft_loss(student, x, task.reference_tokens, t)
    grads = losses.sft_gradient(student, x, task.reference_tokens, t)
    n = len(task.reference_tokens)
    return ExampleResult(grads, losses.LossBreakdown(nll, np.full(n, nll), 0, n), view={"id": task.id})


EXAMPLE_FNS: dict[str, Callable] = {"paint": paint_example, "opsd": opsd_example, "sft": sft_example}


def _batch_step(student: TabularPolicy, ctx: StepContext, batch: Sequence[SyntheticTask],
                fn: Callable) -> dict:
    total: dict = {}
    results = [fn(student, ctx, task) for task in batch]
    # reduce in example order so the sum is reproducible
    for res in results:
        for key in sorted(res.grads):
            total[key] = total[key] + res.grads[key] if key in total else res.grads[key].copy()
    scale = 1.0 / len(batch)
    student.apply_gradient({k: v * scale for k, v in total.items()}, ctx.config.lr)
    valid = sum(r.loss.n_valid for r in results)
    return {
        "loss": float(np.mean([r.loss.total for r in results])),
        "clipped_terms": int(sum(r.loss.clipped for r in results)),
        "valid_positions": int(valid),
        "mean_alpha": float(np.mean([r.alpha for r in results])),
        "mean_rho": float(np.mean([r.rho for r in results])),
        "selected_fraction": float(sum(r.selected for r in results) / valid) if valid else 0.0,
        "views": [r.view for r in results],
    }


def paint_step(student: TabularPolicy, ctx: StepContext, batch: Sequence[SyntheticTask]) -> dict:
    """One PAINT update on ``batch`` (SGD on the batch-mean gradient); returns the metrics fragment."""
    return _batch_step(student, ctx, batch, paint_example)


def opsd_step(student: TabularPolicy, ctx: StepContext, batch: Sequence[SyntheticTask]) -> dict:
    return _batch_step(student, ctx, batch, opsd_example)


def sft_step(student: TabularPolicy, ctx: StepContext, batch: Sequence[SyntheticTask]) -> dict:
    return _batch_step(student, ctx, batch, sft_example)


# -- evaluation -----------------------------------------------------------------

def answer_correct(completion_text: str, answer: str) -> bool:
    got = extract_answer(completion_text)
    return got is not None and got == normalize_text(answer)


def evaluate_avg_k(policy: TabularPolicy, tasks: Sequence[SyntheticTask], k: int = 8,
                   temperature: float = 1.1, rng: np.random.Generator | None = None,
                   max_len: int = 64) -> float:
    """Mean over tasks of the fraction of ``k`` samples whose extracted answer is right."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not tasks:
        return 0.0
    rng = rng if rng is not None else named_rng(0, "eval")
    vocab = policy.vocab
    total = 0.0
    for task in tasks:
        x = task.prompt_tokens(vocab)
        hits = 0
        for _ in range(k):
            ro = sample_rollout(policy, x, max_len, temperature, rng)
            hits += answer_correct(vocab.decode(ro.completion), task.answer)
        total += hits / k
    return total / len(tasks)


# -- training loop ----------------------------------------------------------------

@dataclass
class TrainResult:
    policy: TabularPolicy
    history: list[dict]
    checkpoints: dict[int, str]
    summary: dict


def initial_policy(config: TrainConfig, vocab: Vocab) -> TabularPolicy:
    return build_base_policy(config.base, vocab, config.order, config.data.modulus, config.data.max_chain)


def _sidecar(config: TrainConfig, step: int, policy: TabularPolicy) -> dict:
    return {"config": config.to_dict(), "config_hash": config.config_hash(), "seed": config.seed,
            "step": step, "policy_sha256": policy.checksum()}


def train(dataset: Sequence[SyntheticTask], config: TrainConfig, out_dir: str | Path | None = None,
          base_policy: TabularPolicy | None = None, vocab: Vocab | None = None,
          log: Callable[[str], None] | None = None) -> TrainResult:
    """Run ``config.steps`` updates; evaluate and checkpoint every ``eval_interval`` steps.

    With ``out_dir`` the metrics stream (``metrics.jsonl``), checkpoints and a
    ``summary.json`` are written there; otherwise checkpoints stay in memory.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    vocab = vocab or toy_vocab()
    base = base_policy if base_policy is not None else initial_policy(config, vocab)
    teacher = TeacherConfig(base, config.teacher.mode, config.teacher.beta_tilt)
    student = base.copy(label="student")
    seed = config.seed
    batch_rng = named_rng(seed, "batch")
    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = trace_fh = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "w", encoding="utf-8")
        if config.trace_calibration:
            trace_fh = open(out / "calibration_trace.jsonl", "w", encoding="utf-8")
    ctx = StepContext(vocab, teacher, config, named_rng(seed, "rollout"), named_rng(seed, "mask"), trace_fh)
    chash = config.config_hash()
    history: list[dict] = []
    checkpoints: dict[int, str] = {}
    evals: dict[int, float] = {}

    def checkpoint(step: int) -> None:
        text = student.to_text()
        checkpoints[step] = text
        evals[step] = evaluate_avg_k(student, dataset, config.eval_k, config.temperature,
                                     named_rng(seed, f"eval/{step}"), config.max_len)
        if out is not None:
            path = out / "checkpoints" / f"step_{step:05d}.policy"
            path.write_text(text)
            side = _sidecar(config, step, student)
            side["eval_avg_k"] = evals[step]
            path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")

    def emit(record: dict) -> None:
        history.append(record)
        if metrics_fh is not None:
            metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
            metrics_fh.flush()

    teacher_sum = teacher.base.checksum()
    try:
        checkpoint(0)
        emit({"step": 0, "seed": seed, "config_hash": chash, "method": config.method,
              f"eval_avg_{config.eval_k}": evals[0]})
        step_fn = EXAMPLE_FNS.get(config.method)
        n = len(dataset)
        for step in range(1, config.steps + 1):
            ctx.step = step
            idx = batch_rng.choice(n, size=config.batch_size, replace=config.batch_size > n)
            batch = [dataset[int(i)] for i in idx]
            if step_fn is None:
                frag = {"loss": 0.0, "views": []}
            else:
                frag = _batch_step(student, ctx, batch, step_fn)
            record = {"step": step, "seed": seed, "config_hash": chash, "method": config.method, **frag}
            if step % config.eval_interval == 0 or step == config.steps:
                checkpoint(step)
                record[f"eval_avg_{config.eval_k}"] = evals[step]
            emit(record)
            if log is not None and step in evals:
                log(f"step {step:4d}  loss {frag['loss']:+.5f}  avg@{config.eval_k} {evals[step]:.4f}")
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
        if trace_fh is not None:
            trace_fh.close()
    if teacher.base.checksum() != teacher_sum:
        raise RuntimeError("teacher parameters changed during training")
    best_step = max(evals, key=lambda s: (evals[s], -s))
    summary = {
        "config_hash": chash, "seed": seed, "method": config.method, "steps": config.steps,
        "initial_eval": evals[0], "final_eval": evals[max(evals)], "final_step": max(evals),
        "best_eval": evals[best_step], "best_step": best_step, "eval_k": config.eval_k,
        "teacher_sha256": teacher_sum, "final_policy_sha256": student.checksum(),
    }
    if out is not None:
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return TrainResult(student, history, checkpoints, summary)


# -- ablations ----------------------------------------------------------------------

def _rows(pairs, keys):
    return [dict(zip(keys, p)) for p in pairs]


GRIDS: dict[str, list[dict]] = {
    "table3": [dict(d, **{"calibration.k_base": 0.0, "calibration.f_top": 0.0, "mask.placement": "suffix"})
               for d in _rows([(0.0, 0.0), (0.25, 0.25), (0.5, 0.5), (0.75, 0.75), (0.5, 0.25), (0.5, 0.3),
                               (0.4, 0.3)], ("mask.rho_correct", "mask.rho_wrong"))],
    "table4": [{"mask.placement": p, "calibration.k_base": 0.0, "calibration.f_top": 0.0}
               for p in ("prefix", "middle", "random_contiguous", "suffix")],
    "table5": [dict(d, **{"mask.placement": "suffix"})
               for d in _rows([(0.0, 0.0), (0.01, 1.0), (0.03, 1.0), (0.05, 1.0), (0.03, 0.01), (0.03, 0.03),
                               (0.03, 0.05)], ("calibration.k_base", "calibration.f_top"))],
}

CSV_COLUMNS = ("cell", "method", "rho_correct", "rho_wrong", "placement", "k_base", "f_top", "tau",
               "replications", "seeds", "avg_k_initial_mean", "avg_k_final_mean", "avg_k_final_se",
               "avg_k_best_mean", "config_hash", "error")


def _fmt(v) -> str:
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(round(v, 10))
    return str(v)


def run_ablation(grid: Sequence[dict], base: TrainConfig, dataset: Sequence[SyntheticTask],
                 replications: int = 1, log: Callable[[str], None] | None = None) -> list[dict]:
    """One training run per cell and replication; per-cell failures are recorded, not raised.

    Cell ``c`` replication ``r`` uses seed ``base.seed + 1000 * c + r``.
    """
    if not grid:
        raise ValueError("ablation grid is empty")
    rows = []
    vocab = toy_vocab()
    for c, delta in enumerate(grid):
        row = {"cell": c, "error": ""}
        finals, bests, inits, seeds = [], [], [], []
        try:
            cfg = base.replace(**delta)
            row.update(method=cfg.method, rho_correct=cfg.mask.rho_correct, rho_wrong=cfg.mask.rho_wrong,
                       placement=cfg.mask.placement, k_base=cfg.calibration.k_base,
                       f_top=cfg.calibration.f_top, tau=cfg.loss.tau, config_hash=cfg.config_hash())
            base_policy = initial_policy(cfg, vocab)
            for r in range(replications):
                seed = base.seed + 1000 * c + r
                res = train(dataset, cfg.replace(seed=seed), base_policy=base_policy, vocab=vocab)
                seeds.append(seed)
                finals.append(res.summary["final_eval"])
                bests.append(res.summary["best_eval"])
                inits.append(res.summary["initial_eval"])
        except Exception as exc:  # record and keep sweeping
            row["error"] = f"{type(exc).__name__}: {exc}".replace(",", ";").replace("\n", " ")
        n = len(finals)
        row.update(
            replications=n, seeds=" ".join(str(s) for s in seeds),
            avg_k_initial_mean=float(np.mean(inits)) if n else float("nan"),
            avg_k_final_mean=float(np.mean(finals)) if n else float("nan"),
            avg_k_final_se=float(np.std(finals, ddof=1) / math.sqrt(n)) if n > 1 else 0.0,
            avg_k_best_mean=float(np.mean(bests)) if n else float("nan"),
        )
        for col in CSV_COLUMNS:
            row.setdefault(col, "")
        rows.append(row)
        if log is not None:
            log(f"cell {c}: final {row['avg_k_final_mean']:.4f} {row['error']}")
    return rows


def ablation_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()
