import json
import math

import pytest

from paint_lab.config import ConfigError, MaskConfig, TrainConfig


class TestDefaults:
    def test_recipe_values(self):
        c = TrainConfig()
        assert (c.mask.rho_wrong, c.mask.rho_correct) == (0.30, 0.40)
        assert (c.calibration.k_base, c.calibration.f_top) == (0.03, 0.03)
        assert c.loss.tau == 0.06
        assert c.temperature == 1.1 and c.mask.placement == "suffix"

    def test_equal_endpoints_allowed(self):
        assert MaskConfig(0.35, 0.35).schedule.ratio(0.7) == pytest.approx(0.35)


class TestRoundTrip:
    def test_json(self, tmp_path):
        c = TrainConfig().replace(**{"loss.tau": math.inf, "mask.rho_wrong": 0.2, "steps": 7})
        path = tmp_path / "c.json"
        c.save(path)
        assert json.loads(path.read_text())["loss"]["tau"] == "inf"
        back = TrainConfig.load(path)
        assert back == c and back.config_hash() == c.config_hash()

    def test_hash_tracks_content(self):
        assert TrainConfig().config_hash() != TrainConfig(seed=1).config_hash()

    def test_partial_dict_fills_defaults(self):
        c = TrainConfig.from_dict({"mask": {"placement": "prefix"}})
        assert c.mask.placement == "prefix" and c.mask.rho_wrong == 0.30

    def test_shipped_configs_load(self):
        from pathlib import Path
        root = Path(__file__).resolve().parents[1] / "configs"
        assert TrainConfig.load(root / "default.json") == TrainConfig()
        desk = TrainConfig.load(root / "desk_scale.json")
        assert desk.loss.tau == math.inf


class TestErrors:
    @pytest.mark.parametrize("d,field", [
        ({"lr": -1.0}, "lr"),
        ({"lr": "fast"}, "lr"),
        ({"steps": 1.5}, "steps"),
        ({"method": "ppo"}, "method"),
        ({"mask": {"rho_wrong": 0.5, "rho_correct": 0.4}}, "mask.rho_correct"),
        ({"mask": {"placement": "sideways"}}, "mask.placement"),
        ({"loss": {"tau": 0.0}}, "loss.tau"),
        ({"teacher": {"beta_tilt": -1.0}}, "teacher.beta_tilt"),
        ({"calibration": {"k_base": 2.0}}, "calibration.k_base"),
        ({"bogus": 1}, "bogus"),
        ({"mask": 3}, "mask"),
        ({"trace_calibration": 1}, "trace_calibration"),
    ])
    def test_field_named(self, d, field):
        with pytest.raises(ConfigError) as info:
            TrainConfig.from_dict(d)
        assert str(info.value).startswith(field + ":")

    def test_bad_json(self):
        with pytest.raises(ConfigError, match="<root>"):
            TrainConfig.from_json("{")

    def test_replace_unknown_path(self):
        with pytest.raises(ConfigError, match="mask.nope"):
            TrainConfig().replace(**{"mask.nope": 1})
