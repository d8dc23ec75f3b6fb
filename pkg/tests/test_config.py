import json

import numpy as np
import pytest
import toml

from needlegrasp import config, utils
from needlegrasp.exceptions import ConfigError

from .conftest import CONFIGS


class TestDefaults:
    def test_typed_objects(self, scenario):
        assert scenario.servo.home.d3 == 80.0
        assert scenario.servo.grip_open == pytest.approx(np.deg2rad(45.0))
        assert scenario.chain.limits.upper[2] == 240.0
        assert scenario.chain.limits.upper[0] == pytest.approx(np.deg2rad(80.0))
        assert scenario.joint_servo.max_rates[2] == 100.0
        assert scenario.rig.baseline == pytest.approx(4.3)
        assert scenario.board.n_corners == 20
        assert scenario.rates.tracker_period == pytest.approx(0.125)
        assert scenario.needle.marker_angles[1] == pytest.approx(np.pi / 2)

    def test_frames(self, scenario):
        assert np.allclose(scenario.rig.ws_from_ee.translation, [20.0, 15.0, 100.0])
        assert np.allclose(scenario.chain.ws_from_rc.translation, [-60.0, 15.0, 130.0])


class TestValidation:
    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            config.ScenarioConfig.from_dict({"trails": 3})

    def test_unknown_nested_key(self):
        with pytest.raises(ConfigError, match="rig.fxx"):
            config.ScenarioConfig.from_dict({"rig": {"fxx": 900.0}})

    def test_type_mismatch(self):
        with pytest.raises(ConfigError):
            config.ScenarioConfig.from_dict({"trials": "many"})
        with pytest.raises(ConfigError):
            config.ScenarioConfig.from_dict({"rig": {"width": 720.5}})
        with pytest.raises(ConfigError):
            config.ScenarioConfig.from_dict({"calibration": {"use_estimates": 1}})

    def test_section_given_as_scalar(self):
        with pytest.raises(ConfigError):
            config.ScenarioConfig.from_dict({"servo": 3})

    def test_int_for_float_is_accepted(self):
        assert config.ScenarioConfig.from_dict({"max_time": 10}).max_time == 10.0

    @pytest.mark.parametrize(
        "overrides",
        [
            {"rates": {"tracker_hz": 30.0}},
            {"servo": {"plan_average": 10}},
            {"trials": 0},
            {"max_time": 0.0},
            {"needle": {"motion": {"kind": "spiral"}}},
            {"needle": {"marker_angles": [20.0, 90.0]}},
            {"chain": {"limits": {"lower": [0.0] * 6}}},
            {"noise": {"dropout_prob": 1.0}},
        ],
    )
    def test_invalid_values(self, overrides):
        with pytest.raises(ConfigError):
            config.ScenarioConfig.from_dict(overrides)

    def test_with_overrides_leaves_the_original(self, scenario):
        other = scenario.with_overrides({"servo": {"standoff": 30.0}})
        assert other.servo.standoff == 30.0
        assert scenario.servo.standoff == 25.0


class TestFiles:
    @pytest.mark.parametrize("name", ["zero_noise.toml", "calibrated.toml", "outside_frustum.toml"])
    def test_shipped_scenarios(self, name):
        scenario = config.load_config(CONFIGS / name)
        assert scenario.trials >= 1

    def test_json_scenario(self, tmp_path):
        pth = tmp_path / "scenario.json"
        pth.write_text(json.dumps({"seed": 5, "noise": {"pixel_sigma": 0.25}}))
        scenario = config.load_config(pth)
        assert scenario.seed == 5
        assert scenario.noise(0).pixel_sigma == 0.25

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            config.load_config(tmp_path / "nope.toml")

    def test_malformed_file(self, tmp_path):
        pth = tmp_path / "broken.toml"
        pth.write_text("seed = = 3\n")
        with pytest.raises(ConfigError):
            config.load_config(pth)

    def test_toml_round_trip(self):
        scenario = config.load_config(CONFIGS / "calibrated.toml")
        text = scenario.to_toml()
        assert text.startswith(utils.TOML_CONF_HEADER)
        assert config.ScenarioConfig.from_dict(toml.loads(text)).data == scenario.data

    def test_calibrated_settle_speed_bound(self):
        scenario = config.load_config(CONFIGS / "calibrated.toml")
        s = scenario.servo
        assert s.settle_epsilon / (s.settle_window * scenario.rates.tracker_period) == pytest.approx(8.0)

    def test_no_file_gives_defaults(self, scenario):
        assert config.load_config().data == scenario.data


class TestMotion:
    def test_jitter_is_seeded(self):
        scenario = config.load_config(CONFIGS / "zero_noise.toml")
        a = scenario.motion(1).pose_at(0.0)
        b = scenario.motion(1).pose_at(0.0)
        c = scenario.motion(2).pose_at(0.0)
        assert np.array_equal(a.translation, b.translation)
        assert not np.array_equal(a.translation, c.translation)
        assert np.all(np.abs(a.translation - [15.0, 10.0, 10.0]) <= 3.0)

    def test_kinds(self, scenario):
        assert scenario.motion(0).end_time == pytest.approx(3.9)
        walk = scenario.with_overrides({"needle": {"motion": {"kind": "random_walk"}}})
        assert walk.motion(0).end_time == pytest.approx(3.0)
        static = scenario.with_overrides({"needle": {"motion": {"kind": "static"}}})
        assert static.motion(0).end_time == 0.0


def test_merge_defaults_fills_sections():
    merged = utils.merge_defaults({"a": {"b": 2}}, {"a": {"b": 1, "c": 3.0}, "d": [1, 2]})
    assert merged == {"a": {"b": 2, "c": 3.0}, "d": [1, 2]}


def test_merge_defaults_required_key():
    with pytest.raises(ConfigError, match="field required"):
        utils.merge_defaults({}, {"a": None})
