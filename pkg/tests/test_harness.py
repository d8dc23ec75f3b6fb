import dataclasses
import json

import numpy as np
import pytest

from needlegrasp import config, harness, servo
from needlegrasp.exceptions import MismatchReport
from needlegrasp.servo import OutcomeKind

from .conftest import CONFIGS

PHASE_ORDER = [
    ("home", "follow"),
    ("follow", "approach"),
    ("approach", "grasp"),
    ("grasp", "return"),
    ("return", "done"),
]
COLUMN = {name: i for i, name in enumerate(harness.TRACE_COLUMNS)}


@pytest.fixture
def zero_noise():
    return config.load_config(CONFIGS / "zero_noise.toml")


@pytest.fixture
def exact_calibration():
    return config.ScenarioConfig.from_dict(
        {"calibration": {"tip_sigma": 0.0, "registration_sigma": 0.0, "corner_sigma": 0.0}}
    )


def transition_time(record, dst):
    return next(t for t, _, to in record.transitions if to == dst)


class TestAccuracyTable:
    def test_shipped_table_matches(self):
        report = harness.verify_accuracy_table()
        assert len(report.rows) == 15
        assert report.mean == pytest.approx(3.2114, abs=1e-3)
        assert abs(report.mean - report.reported_mean) <= harness.ACCURACY_TOL

    def test_individual_rows(self):
        rows, _ = harness.load_accuracy_table()
        by_id = {row.acquisition: row for row in rows}
        assert by_id[3].recomputed == pytest.approx(0.7, abs=0.05)
        assert by_id[8].recomputed == pytest.approx(8.1, abs=0.05)

    def test_identical_positions_have_zero_error(self):
        row = harness.AccuracyRow(1, (1.0, 2.0, 3.0), (1.0, 2.0, 3.0), 0.0)
        assert row.recomputed == 0.0

    def test_altered_row_is_reported(self):
        rows, mean = harness.load_accuracy_table()
        rows[4] = dataclasses.replace(rows[4], error=rows[4].error + 1.0)
        with pytest.raises(MismatchReport) as info:
            harness.verify_accuracy_table(rows, mean)
        assert [row.acquisition for row in info.value.rows] == [rows[4].acquisition]

    def test_altered_mean_is_reported(self):
        rows, _ = harness.load_accuracy_table()
        with pytest.raises(MismatchReport) as info:
            harness.verify_accuracy_table(rows, 3.5)
        assert info.value.rows == []

    def test_rendered_table(self):
        text = harness.verify_accuracy_table().table()
        assert len(text.splitlines()) == 17
        assert "3.211" in text


class TestCalibration:
    def test_noise_free_procedures_are_exact(self, exact_calibration):
        report = harness.simulate_calibration(exact_calibration)
        assert max(report.scan_d_mean) < 1e-9
        assert report.registration_rms < 1e-9
        assert report.registration_translation_error < 1e-9
        assert report.extrinsic_mean_error < 1e-9
        assert report.exact_ok

    def test_noisy_residuals(self, scenario):
        reports = [harness.simulate_calibration(scenario, seed, check_exact=False) for seed in range(20)]

        for r in reports[:10]:
            assert 0.85 <= np.mean(r.scan_d_mean) <= 1.03
        assert np.mean([r.registration_rms for r in reports]) == pytest.approx(1.08, rel=0.15)
        assert 0.05 < np.mean([r.registration_translation_error for r in reports]) < 2.0
        assert np.mean([r.extrinsic_mean_error for r in reports]) == pytest.approx(0.88, rel=0.2)

    def test_seeded(self, scenario):
        a = harness.simulate_calibration(scenario, 5, check_exact=False)
        b = harness.simulate_calibration(scenario, 5, check_exact=False)
        assert a.to_dict() == b.to_dict()

    def test_exact_check_is_recorded(self, scenario):
        report = harness.simulate_calibration(scenario, 1)
        assert set(report.exact) == {"scan_d_mean", "registration_rms", "extrinsic_mean_error"}
        assert report.exact_ok

    def test_scan_planes_pass_through_the_centre(self):
        center = np.array([20.0, 15.0, 0.0])
        planes = harness.scan_planes(center)
        assert len(planes) == 3
        for plane in planes:
            assert abs(plane.signed_distance(center)) < 1e-12


class TestTrial:
    def test_zero_noise_grasp(self, zero_noise):
        record = harness.run_trial(zero_noise, 0)

        assert record.outcome.kind is OutcomeKind.SUCCESS
        assert record.outcome.final_tip_error < 0.01
        assert [(a, b) for _, a, b in record.transitions] == PHASE_ORDER
        assert record.completed
        assert record.rows[-1][COLUMN["outcome"]] == "success"
        assert all(row[COLUMN["outcome"]] == "" for row in record.rows[:-1])

    def test_transitions_are_legal(self, zero_noise):
        record = harness.run_trial(zero_noise, 3)
        for _, a, b in record.transitions:
            assert servo.is_legal(servo.Phase(a), servo.Phase(b))
        times = [t for t, _, _ in record.transitions]
        assert times == sorted(times)

    def test_deterministic(self, zero_noise):
        a = harness.run_trial(zero_noise, 2)
        b = harness.run_trial(zero_noise, 2)
        assert harness.trace_csv(a) == harness.trace_csv(b)

    def test_trace_layout(self, zero_noise):
        record = harness.run_trial(zero_noise, 0, trial_id=7)
        lines = harness.trace_csv(record).splitlines()
        assert lines[1] == ",".join(harness.TRACE_COLUMNS)
        assert len(lines) == len(record.rows) + 2
        # the tool starts at home, so the first step already hands over to follow
        assert lines[2].startswith("7,0.000000,follow,")

    def test_teleported_needle(self):
        keyframes = [
            [0.0, 15.0, 10.0, 10.0, 0.0, 0.0, 0.0],
            [0.5, 15.0, 10.0, 10.0, 0.0, 0.0, 0.0],
            [0.51, 25.0, 10.0, 10.0, 0.0, 0.0, 0.0],
        ]
        scenario = config.ScenarioConfig.from_dict(
            {"needle": {"motion": {"kind": "script", "keyframes": keyframes}}}
        )
        record = harness.run_trial(scenario, 0)

        row = record.rows[140]
        assert row[COLUMN["t"]] == pytest.approx(1.4)
        assert row[COLUMN["phase"]] == "follow"
        tip = np.array([row[COLUMN[c]] for c in ("tip_x", "tip_y", "tip_z")])
        middle = np.array([row[COLUMN[c]] for c in ("needle_x", "needle_y", "needle_z")])
        assert np.linalg.norm(tip - (middle + [0.0, 0.0, 25.0])) < 1.0

        assert transition_time(record, "approach") > 1.4
        assert record.outcome.kind is OutcomeKind.SUCCESS

    def test_settles_after_the_needle_stops(self, scenario):
        record = harness.run_trial(scenario, 0)
        assert transition_time(record, "approach") >= 3.9
        assert record.outcome.kind is OutcomeKind.SUCCESS

    @pytest.mark.parametrize("speed, settles", [(1.1, False), (0.9, True)])
    def test_drifting_needle_settle_bound(self, zero_noise, speed, settles):
        # settle_epsilon 1 mm over 8 tracker periods of 0.125 s bounds the speed at 1 mm/s
        keyframes = [
            [0.0, 12.0, 10.0, 10.0, 0.0, 0.0, 0.0],
            [8.0, 12.0 + 8.0 * speed, 10.0, 10.0, 0.0, 0.0, 0.0],
        ]
        scenario = zero_noise.with_overrides(
            {"max_time": 8.0, "needle": {"motion": {"kind": "script", "keyframes": keyframes}}}
        )
        record = harness.run_trial(scenario, 0)

        targets = [to for _, _, to in record.transitions]
        assert ("approach" in targets) is settles
        if not settles:
            assert record.outcome.kind is OutcomeKind.FAIL
            assert "timeout" in record.outcome.reason

    def test_lost_needle_aborts(self):
        scenario = config.load_config(CONFIGS / "outside_frustum.toml")
        record = harness.run_trial(scenario, 0)

        assert record.outcome.kind is OutcomeKind.FAIL
        assert "StaleEstimate" in record.outcome.reason
        assert record.transitions[-1][2] == "aborted"
        assert 1.0 < record.task_time < 1.1
        assert not record.completed

    def test_timeout(self, zero_noise):
        record = harness.run_trial(zero_noise.with_overrides({"max_time": 0.5}), 0)
        assert record.outcome.kind is OutcomeKind.FAIL
        assert "timeout" in record.outcome.reason


class TestBatch:
    def test_single_trial_quartiles(self, zero_noise, tmp_path):
        out = tmp_path / "report.json"
        report = harness.run_batch(zero_noise, 1, out=out, trace_dir=tmp_path / "traces")

        for stats in report.quartiles.values():
            assert len(set(stats)) == 1
        assert report.counts == {"success": 1, "miss": 0, "fail": 0}
        assert json.loads(out.read_text())["n_trials"] == 1
        assert (tmp_path / "traces" / "trial_000.csv").exists()

    def test_reports_are_reproducible(self, zero_noise, tmp_path):
        harness.run_batch(zero_noise, 2, out=tmp_path / "a.json")
        harness.run_batch(zero_noise, 2, out=tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_rejects_empty_batch(self, zero_noise):
        with pytest.raises(ValueError):
            harness.run_batch(zero_noise, 0)

    @pytest.mark.slow
    def test_zero_noise_batch(self, zero_noise):
        report = harness.run_batch(zero_noise)
        assert report.counts["success"] == 40

    @pytest.mark.slow
    def test_calibrated_batch(self):
        scenario = config.load_config(CONFIGS / "calibrated.toml")
        report = harness.run_batch(scenario, jobs=2)

        assert report.n_trials == 40
        assert report.counts["success"] >= 30
        q = report.quartiles
        for i in (1, 2, 3):
            assert q["z"][i] >= q["x"][i] and q["z"][i] >= q["y"][i]
        assert 5.0 <= report.mean_task_time <= 15.0
