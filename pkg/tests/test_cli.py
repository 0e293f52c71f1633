import csv
import json
import subprocess
import sys

import pytest

from paint_lab import cli
from paint_lab.policy import TabularPolicy

TINY = {"steps": 2, "batch_size": 2, "eval_interval": 1, "eval_k": 1, "max_len": 12,
        "base": {"corpus_size": 300}, "data": {"n_tasks": 6}}


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def _no_partials(root):
    return not any(p.name.startswith(".") and "partial" in p.name for p in root.iterdir())


class TestTrain:
    def test_outputs(self, tiny, tmp_path):
        out = tmp_path / "run"
        assert cli.run(["train", "--config", tiny, "--out", str(out), "--quiet"]) == 0
        assert {p.name for p in out.iterdir()} == {"config.json", "metrics.jsonl", "checkpoints", "summary.json"}
        records = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
        assert [r["step"] for r in records] == [0, 1, 2]
        assert all("config_hash" in r and r["seed"] == 0 for r in records)
        assert _no_partials(tmp_path)

    def test_zero_steps(self, tiny, tmp_path):
        out = tmp_path / "run"
        assert cli.run(["train", "--config", tiny, "--out", str(out), "--quiet", "--seed", "0"]) == 0
        cfg = json.loads((out / "config.json").read_text())
        cfg["steps"] = 0
        (tmp_path / "zero.json").write_text(json.dumps(cfg))
        out0 = tmp_path / "zero"
        assert cli.run(["train", "--config", str(tmp_path / "zero.json"), "--out", str(out0), "--quiet"]) == 0
        assert sorted(p.name for p in (out0 / "checkpoints").iterdir()) == ["step_00000.json", "step_00000.policy"]

    def test_byte_identical_rerun(self, tiny, tmp_path):
        for name in ("a", "b"):
            assert cli.run(["train", "--config", tiny, "--out", str(tmp_path / name), "--quiet"]) == 0
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert len(files) == 9
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_seed_override(self, tiny, tmp_path):
        assert cli.run(["train", "--config", tiny, "--out", str(tmp_path / "s"), "--seed", "7", "--quiet"]) == 0
        assert json.loads((tmp_path / "s" / "summary.json").read_text())["seed"] == 7


class TestErrors:
    def test_invalid_field(self, tmp_path, caplog):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"mask": {"rho_wrong": 0.9}}))
        out = tmp_path / "run"
        assert cli.run(["train", "--config", str(bad), "--out", str(out), "--quiet"]) == 2
        assert not out.exists() and _no_partials(tmp_path)

    def test_message_names_field(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"lr": 0}))
        assert cli.run(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
        assert "config error: lr:" in capsys.readouterr().err

    def test_unparseable(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{")
        assert cli.run(["eval", "--config", str(bad), "--out", str(tmp_path / "o"), "--quiet"]) == 2

    def test_runtime_failure_leaves_nothing(self, tiny, tmp_path):
        out = tmp_path / "ev"
        code = cli.run(["eval", "--config", tiny, "--checkpoint", str(tmp_path / "missing.policy"),
                        "--out", str(out), "--quiet"])
        assert code == 1 and not out.exists() and _no_partials(tmp_path)

    def test_ablate_bad_cell(self, tiny, tmp_path):
        cfg = tmp_path / "abl.json"
        cfg.write_text(json.dumps({"base": TINY, "grid": [{}, {"mask.placement": "sideways"}]}))
        assert cli.run(["ablate", "--config", str(cfg), "--out", str(tmp_path / "o"), "--quiet"]) == 2

    def test_verify_unknown_oracle(self, tmp_path):
        cfg = tmp_path / "v.json"
        cfg.write_text(json.dumps({"only": ["nope"]}))
        assert cli.run(["verify-theory", "--config", str(cfg), "--out", str(tmp_path / "o"), "--quiet"]) == 2


class TestOtherCommands:
    def test_gen_data_and_eval(self, tiny, tmp_path):
        assert cli.run(["gen-data", "--config", tiny, "--out", str(tmp_path / "d"), "--quiet"]) == 0
        data = tmp_path / "d" / "dataset.jsonl"
        assert len(data.read_text().splitlines()) == 6
        assert cli.run(["train", "--config", tiny, "--data", str(data), "--out", str(tmp_path / "t"),
                        "--quiet"]) == 0
        ckpt = tmp_path / "t" / "checkpoints" / "step_00002.policy"
        assert cli.run(["eval", "--config", tiny, "--data", str(data), "--checkpoint", str(ckpt),
                        "--out", str(tmp_path / "e"), "--quiet"]) == 0
        rep = json.loads((tmp_path / "e" / "eval.json").read_text())
        assert rep["policy_sha256"] == TabularPolicy.load(ckpt).checksum()
        assert 0.0 <= rep["avg_1"] <= 1.0 and rep["n_tasks"] == 6

    def test_ablate_table3(self, tmp_path):
        cfg = tmp_path / "abl.json"
        base = dict(TINY, steps=1, base={"kind": "uniform"})
        cfg.write_text(json.dumps({"base": base, "grid": "table3"}))
        assert cli.run(["ablate", "--config", str(cfg), "--out", str(tmp_path / "o"), "--quiet"]) == 0
        rows = list(csv.DictReader((tmp_path / "o" / "ablation.csv").open()))
        assert len(rows) == 7 and all(r["config_hash"] for r in rows)

    def test_verify_theory(self, tmp_path, capsys):
        cfg = tmp_path / "v.json"
        cfg.write_text(json.dumps({"seed": 0, "overrides": {"entropy_ratio_selection": {"n": 100}}}))
        assert cli.run(["verify-theory", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
        rep = json.loads((tmp_path / "o" / "oracles.json").read_text())
        assert rep["all_pass"] and len(rep["oracles"]) == 8
        assert "PASS" in capsys.readouterr().out

    def test_console_entry(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "paint_lab.cli", "verify-theory", "--out", str(tmp_path / "o"),
                               "--quiet", "--config", "/dev/null"], capture_output=True, text=True)
        assert proc.returncode == 2  # an empty file is not a JSON object
        proc = subprocess.run([sys.executable, "-m", "paint_lab.cli", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0 and "verify-theory" in proc.stdout
