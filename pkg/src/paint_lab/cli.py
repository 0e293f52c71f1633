"""``paint-lab`` command line: train, eval, ablate, verify-theory, gen-data.

Every command reads one JSON config, stages its outputs in a scratch directory
next to ``--out`` and moves them into place only after the command succeeds.
Exit codes: 0 success, 1 oracle failure or runtime error, 2 invalid config.
Environment variables are never consulted.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Callable, Sequence

from paint_lab import oracles, trainer
from paint_lab.config import ConfigError, TrainConfig
from paint_lab.policy import TabularPolicy, named_rng
from paint_lab.tasks import generate_dataset, load_dataset, save_dataset, toy_vocab

log = logging.getLogger("paint_lab")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class CommandFailed(RuntimeError):
    """The command ran but did not meet its contract (e.g. an oracle failed)."""


# -- config loading -------------------------------------------------------------

def _read_json(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"<config>: cannot read {path} ({exc.strerror})") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"<root>: invalid JSON in {path} ({exc})") from None
    if not isinstance(d, dict):
        raise ConfigError("<root>: config must be a JSON object")
    return d


def _train_config(d: dict, seed: int | None) -> TrainConfig:
    cfg = TrainConfig.from_dict(d)
    return cfg.replace(seed=seed) if seed is not None else cfg


def _dataset(cfg: TrainConfig, data_path: str | None):
    if data_path is None:
        return generate_dataset(cfg.data, toy_vocab())
    return load_dataset(data_path)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- commands -------------------------------------------------------------------
# Each command validates its config, then writes into ``stage``.

def cmd_train(args, stage: Path) -> None:
    cfg = _train_config(_read_json(args.config), args.seed)
    dataset = _dataset(cfg, args.data)
    cfg.save(stage / "config.json")
    res = trainer.train(dataset, cfg, stage, log=log.info)
    log.info("avg@%d %.4f -> %.4f", cfg.eval_k, res.summary["initial_eval"], res.summary["final_eval"])


def cmd_eval(args, stage: Path) -> None:
    cfg = _train_config(_read_json(args.config), args.seed)
    dataset = _dataset(cfg, args.data)
    vocab = toy_vocab()
    if args.checkpoint:
        policy = TabularPolicy.load(args.checkpoint)
        source = str(args.checkpoint)
    else:
        policy = trainer.initial_policy(cfg, vocab)
        source = "base"
    score = trainer.evaluate_avg_k(policy, dataset, cfg.eval_k, cfg.temperature,
                                   named_rng(cfg.seed, "eval/standalone"), cfg.max_len)
    _write_json(stage / "eval.json", {
        "config_hash": cfg.config_hash(), "seed": cfg.seed, "policy": source,
        "policy_sha256": policy.checksum(), "n_tasks": len(dataset), "k": cfg.eval_k,
        "temperature": cfg.temperature, f"avg_{cfg.eval_k}": score,
    })
    log.info("avg@%d = %.4f over %d tasks", cfg.eval_k, score, len(dataset))


def _grid(spec) -> tuple[str, list[dict]]:
    if isinstance(spec, str):
        if spec not in trainer.GRIDS:
            raise ConfigError(f"grid: unknown grid {spec!r}; choose from {sorted(trainer.GRIDS)}")
        return spec, trainer.GRIDS[spec]
    if isinstance(spec, list) and spec and all(isinstance(c, dict) for c in spec):
        return "custom", spec
    raise ConfigError("grid: expected a grid name or a non-empty list of override objects")


def cmd_ablate(args, stage: Path) -> None:
    d = _read_json(args.config)
    unknown = set(d) - {"base", "grid", "replications"}
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown field")
    if "grid" not in d:
        raise ConfigError("grid: missing")
    base = _train_config(d.get("base", {}), args.seed)
    name, grid = _grid(d["grid"])
    reps = d.get("replications", 1)
    if isinstance(reps, bool) or not isinstance(reps, int) or reps < 1:
        raise ConfigError(f"replications: expected a positive integer, got {reps!r}")
    for i, cell in enumerate(grid):  # validate every cell before any training
        try:
            base.replace(**cell)
        except ConfigError as exc:
            raise ConfigError(f"grid[{i}].{exc}") from None
    dataset = _dataset(base, args.data)
    rows = trainer.run_ablation(grid, base, dataset, reps, log=log.info)
    (stage / "ablation.csv").write_text(trainer.ablation_csv(rows))
    _write_json(stage / "ablation.json", {
        "grid": name, "cells": grid, "replications": reps, "seed": base.seed,
        "config_hash": base.config_hash(), "base": base.to_dict(),
    })
    failed = [r["cell"] for r in rows if r["error"]]
    if failed:
        raise CommandFailed(f"ablation cells {failed} failed; see the error column")


def cmd_verify_theory(args, stage: Path) -> None:
    d = _read_json(args.config)
    unknown = set(d) - {"seed", "only", "overrides"}
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown field")
    seed = args.seed if args.seed is not None else d.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError(f"seed: expected an integer, got {seed!r}")
    only = d.get("only")
    if only is not None and (not isinstance(only, list) or any(n not in oracles.ORACLES for n in only)):
        raise ConfigError(f"only: expected a list drawn from {list(oracles.ORACLES)}")
    overrides = d.get("overrides", {})
    if not isinstance(overrides, dict) or any(k not in oracles.ORACLES for k in overrides):
        raise ConfigError("overrides: expected an object keyed by oracle name")
    reports = oracles.run_suite(seed, only, **overrides)
    (stage / "oracles.json").write_text(oracles.suite_json(reports, seed))
    table = oracles.summary_table(reports)
    if not args.quiet:
        print(table)
    bad = [r.name for r in reports if not r.ok]
    if bad:
        raise CommandFailed(f"oracle(s) failed: {', '.join(bad)}")


def cmd_gen_data(args, stage: Path) -> None:
    cfg = _train_config(_read_json(args.config), args.seed)
    spec = cfg.data if args.seed is None else dataclasses.replace(cfg.data, seed=args.seed)
    tasks = generate_dataset(spec, toy_vocab())
    save_dataset(tasks, stage / "dataset.jsonl")
    _write_json(stage / "dataset.json", {"config_hash": cfg.config_hash(), "seed": spec.seed,
                                         "data": dataclasses.asdict(spec), "n_tasks": len(tasks)})
    log.info("wrote %d tasks", len(tasks))


COMMANDS: dict[str, Callable] = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "verify-theory": cmd_verify_theory,
    "gen-data": cmd_gen_data,
}


# -- plumbing --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="paint-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")
        if name in ("train", "eval", "ablate"):
            p.add_argument("--data", help="dataset JSONL (default: generate from the config)")
        if name == "eval":
            p.add_argument("--checkpoint", help="policy checkpoint (default: the base policy)")
    return parser


def _publish(stage: Path, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for item in sorted(stage.iterdir()):
        dest = out / item.name
        if dest.is_dir() and not dest.is_symlink():
            shutil.rmtree(dest)
        elif dest.exists():
            dest.unlink()
        item.replace(dest)


def run(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(logging.WARNING if args.quiet else logging.INFO)
    log.propagate = False

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out.name}.partial-", dir=out.parent))
    status = EXIT_OK
    try:
        COMMANDS[args.command](args, stage)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        status = EXIT_CONFIG
    except CommandFailed as exc:
        log.error("%s", exc)
        # oracle reports and ablation tables are still useful on failure
        _publish(stage, out)
        status = EXIT_FAIL
    except (ValueError, OSError, RuntimeError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        status = EXIT_FAIL
    else:
        _publish(stage, out)
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    return status


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
