"""End-to-end tests of the command-line interface on a small single-vertebra
phantom study."""

import json
import os

import numpy as np
import pytest

from vertseg.cli import main
from vertseg.phantom import PhantomSpec, VertebraSpec


def small_spec(**kw):
    return PhantomSpec(
        vertebrae=(VertebraSpec(center=(28.0, 22.0, 16.0),
                                trabecular_density=100.0),),
        noise_sigma=kw.pop("noise_sigma", 0.0), **kw)


@pytest.fixture(scope="module")
def study_dir(tmp_path_factory):
    """Phantom + config files shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli_study")
    spec_path = root / "spec.json"
    spec_path.write_text(small_spec().to_json())
    phantom_dir = root / "phantom"
    rc = main(["phantom", "--spec", str(spec_path), "--out",
               str(phantom_dir)])
    assert rc == 0

    spec = small_spec()
    ccx, ccy = spec.canal_center_xy
    config = {
        "volume": "phantom/phantom.mhd",
        "truth": "phantom/truth.json",
        "outdir": "out",
        "seeds": {
            "body_centers": [[28.0, 22.0, 16.0]],
            "canal_seed": [ccx, ccy, 16.0],
        },
        "mode": "accuracy",
        "repeats": 2,
        "jitter_voxels": 0.0,
    }
    (root / "config.json").write_text(json.dumps(config))
    return root


class TestPhantomCommand:
    def test_outputs_written(self, study_dir):
        d = study_dir / "phantom"
        for name in ("phantom.mhd", "phantom.raw", "truth_body.mhd",
                     "truth_core.mhd", "truth_arch.mhd", "truth.json",
                     "spec.json"):
            assert (d / name).exists(), name

    def test_truth_json_contents(self, study_dir):
        truth = json.loads((study_dir / "phantom" / "truth.json").read_text())
        v = truth["vertebrae"][0]
        assert v["trabecular_density"] == 100.0
        assert v["trabecular_volume_cm3"] == pytest.approx(
            np.pi * 16 * 12 * 21 / 1000.0, rel=1e-6)
        assert len(v["pedicle_cylinders"]) == 2

    def test_rerun_byte_identical(self, study_dir, tmp_path):
        spec_path = study_dir / "spec.json"
        rc = main(["phantom", "--spec", str(spec_path), "--out",
                   str(tmp_path / "again")])
        assert rc == 0
        a = (study_dir / "phantom" / "phantom.raw").read_bytes()
        b = (tmp_path / "again" / "phantom.raw").read_bytes()
        assert a == b

    def test_invalid_spec_exit_2(self, tmp_path):
        bad = small_spec().to_json().replace('"shell_thickness": 2.0',
                                             '"shell_thickness": 20.0')
        p = tmp_path / "bad.json"
        p.write_text(bad)
        assert main(["phantom", "--spec", str(p),
                     "--out", str(tmp_path / "o")]) == 2

    def test_unreadable_spec_exit_2(self, tmp_path):
        assert main(["phantom", "--spec", str(tmp_path / "missing.json"),
                     "--out", str(tmp_path / "o")]) == 2


class TestSegmentCommand:
    def test_segment_success(self, study_dir):
        rc = main(["segment", "--config", str(study_dir / "config.json")])
        assert rc == 0
        out = study_dir / "out"
        for name in ("labels_v0.mhd", "labels_v0.raw", "mesh_v0.obj",
                     "stages.json"):
            assert (out / name).exists(), name
        stages = json.loads((out / "stages.json").read_text())
        assert stages[0]["flags"] == []
        low, high = stages[0]["thresholds_hu"]
        assert low < high

    def test_rerun_byte_identical(self, study_dir):
        labels = study_dir / "out" / "labels_v0.raw"
        first = labels.read_bytes()
        assert main(["segment", "--config",
                     str(study_dir / "config.json")]) == 0
        assert labels.read_bytes() == first

    def test_missing_config_exit_2(self, tmp_path):
        assert main(["segment", "--config",
                     str(tmp_path / "nope.json")]) == 2

    def test_missing_volume_exit_2(self, study_dir, tmp_path):
        cfg = json.loads((study_dir / "config.json").read_text())
        cfg["volume"] = "does-not-exist.mhd"
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(cfg))
        assert main(["segment", "--config", str(p)]) == 2

    def test_unknown_param_override_exit_2(self, study_dir, tmp_path):
        cfg = json.loads((study_dir / "config.json").read_text())
        cfg["volume"] = str(study_dir / "phantom" / "phantom.mhd")
        cfg["params"] = {"definitely_not_a_parameter": 1}
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(cfg))
        assert main(["segment", "--config", str(p)]) == 2


class TestReportCommand:
    def test_accuracy_report(self, study_dir):
        rc = main(["report", "--config", str(study_dir / "config.json")])
        assert rc == 0
        out = study_dir / "out"
        for name in ("report.json", "report.csv", "report.png"):
            assert (out / name).exists(), name
        rep = json.loads((out / "report.json").read_text())
        assert rep["mode"] == "accuracy"
        # noiseless phantom: measured BMD lands on the nominal density
        assert rep["errors"]["bmd_pct"][0] < 1.0
        assert rep["errors"]["volume_pct"][0] < 4.0
        csv_text = (out / "report.csv").read_text()
        assert csv_text.splitlines()[0] == \
            "vertebra,bmd_mg_cm3,volume_cm3,bmd_err_pct,volume_err_pct"
        assert (out / "report.png").read_bytes()[:8] == \
            b"\x89PNG\r\n\x1a\n"

    def test_precision_report_zero_jitter(self, study_dir):
        rc = main(["report", "--config", str(study_dir / "config.json"),
                   "--mode", "precision"])
        assert rc == 0
        rep = json.loads((study_dir / "out" / "report.json").read_text())
        assert rep["mode"] == "precision"
        assert rep["cvs"]["bmd_cv_rms_pct"] == 0.0
        assert rep["cvs"]["volume_cv_rms_pct"] == 0.0
        assert len(rep["repeats"]) == 2
        assert len(rep["repeats"][0]) == 1

    def test_accuracy_without_truth_exit_2(self, study_dir, tmp_path):
        cfg = json.loads((study_dir / "config.json").read_text())
        cfg["volume"] = str(study_dir / "phantom" / "phantom.mhd")
        del cfg["truth"]
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(cfg))
        assert main(["report", "--config", str(p)]) == 2
