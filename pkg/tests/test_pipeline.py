import json
from io import StringIO
from pathlib import Path

import numpy as np
import pytest

from dpetki.__main__ import build_parser, main
from dpetki.pipeline import (
    PipelineConfig,
    cmd_frame_select,
    cmd_metrics,
    cmd_phantom,
    cmd_run,
    exit_code_for,
)
from dpetki.errors import ConfigError, EmptySegmentation, GridMismatch
from dpetki.volume import Mask, save_mask


def write_config(path, **values):
    path.write_text(json.dumps(values), encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantom")
    assert cmd_phantom(out=out, seed=7, file=None, err=None) == 0
    return out


@pytest.fixture(scope="module")
def run_dir(phantom_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    config = write_config(out / "config.json", volume=str(phantom_dir / "volume"),
                          atlas=str(phantom_dir / "atlas"), out_dir=str(out / "results"))
    code = cmd_run(config, file=None, err=None)
    return out / "results", code


class TestPhantomCommand:
    """Test the phantom subcommand"""

    def test_writes_artifacts(self, phantom_dir):
        """Test that every phantom artifact is on disk"""
        for name in ("volume.raw", "volume.json", "carotid_truth.raw", "atlas.raw",
                     "truth_cp.csv", "truth.json"):
            assert (phantom_dir / name).is_file()

    def test_same_seed_same_bytes(self, phantom_dir, tmp_path):
        """Test that a second run with the same seed is byte-identical"""
        assert cmd_phantom(out=tmp_path, seed=7, file=None, err=None) == 0
        for name in ("volume.raw", "atlas.raw", "truth_cp.csv"):
            assert (tmp_path / name).read_bytes() == (phantom_dir / name).read_bytes()

    def test_invalid_radius(self, tmp_path):
        """Test that a zero carotid radius exits 2 and names the field"""
        config = write_config(tmp_path / "bad.json", carotid_radius_mm=0)
        err = StringIO()
        assert cmd_phantom(config, out=tmp_path, file=None, err=err) == 2
        assert "carotid_radius_mm" in err.getvalue()

    def test_missing_config(self, tmp_path):
        """Test that an unreadable config exits 2"""
        err = StringIO()
        assert cmd_phantom(tmp_path / "nope.json", out=tmp_path, file=None, err=err) == 2
        assert "nope.json" in err.getvalue()


class TestRunCommand:
    """Test the full pipeline on a phantom"""

    def test_exit_code(self, run_dir):
        """Test that the default phantom runs cleanly"""
        _, code = run_dir
        assert code == 0

    def test_flags_hypometabolic_region(self, run_dir):
        """Test that exactly the seeded region is flagged"""
        out, _ = run_dir
        report = json.loads((out / "run_report.json").read_text())
        assert report["summary"]["flagged_regions"] == ["left_14"]

    def test_report_lists_artifacts(self, run_dir):
        """Test that the run report lists files that exist"""
        out, _ = run_dir
        report = json.loads((out / "run_report.json").read_text())
        assert report["exit_code"] == 0
        assert [s["name"] for s in report["stages"]] == [
            "load", "frame-select", "segment", "idif", "fit-mcif", "patlak", "zscore"]
        assert all(s["status"] == "ok" for s in report["stages"])
        for path in report["artifacts"]:
            assert Path(path).is_file()
        assert str(out / "regions.csv") in report["artifacts"]

    def test_regions_csv(self, run_dir):
        """Test that all 36 atlas regions are reported"""
        out, _ = run_dir
        lines = (out / "regions.csv").read_text().splitlines()
        assert len(lines) == 37

    @pytest.mark.parametrize("threads", [None, 2])
    def test_rerun_same_bytes(self, run_dir, tmp_path, threads):
        """Test that a rerun, with the same or more threads, writes identical numbers"""
        out, _ = run_dir
        config = out.parent / "config.json"
        assert cmd_run(config, tmp_path, threads=threads, file=None, err=None) == 0
        for name in ("carotid_mask.raw", "idif.csv", "tissue.csv", "mcif.csv",
                     "kimap.raw", "regions.csv"):
            assert (tmp_path / name).read_bytes() == (out / name).read_bytes(), name

    def test_threshold_above_max(self, phantom_dir, tmp_path):
        """Test that an empty segmentation exits 3 and keeps no segment artifacts"""
        config = write_config(tmp_path / "config.json", volume=str(phantom_dir / "volume"),
                              atlas=str(phantom_dir / "atlas"), out_dir=str(tmp_path / "out"),
                              seg={"threshold_mode": "absolute", "absolute": 1e9})
        assert cmd_run(config, file=None, err=None) == 3
        report = json.loads((tmp_path / "out" / "run_report.json").read_text())
        failed = [s for s in report["stages"] if s["status"] == "failed"]
        assert [s["name"] for s in failed] == ["segment"]
        assert not (tmp_path / "out" / "carotid_mask.raw").exists()

    def test_truncated_volume(self, phantom_dir, tmp_path):
        """Test that a truncated volume exits 2"""
        for name in ("volume.json", "atlas.raw", "atlas.json"):
            (tmp_path / name).write_bytes((phantom_dir / name).read_bytes())
        (tmp_path / "volume.raw").write_bytes((phantom_dir / "volume.raw").read_bytes()[:1000])
        config = write_config(tmp_path / "config.json", volume=str(tmp_path / "volume"),
                              atlas=str(tmp_path / "atlas"), out_dir=str(tmp_path / "out"))
        err = StringIO()
        assert cmd_run(config, file=None, err=err) == 2
        assert "volume" in err.getvalue()

    def test_missing_input(self, tmp_path):
        """Test that a missing volume exits 2 before any stage runs"""
        config = write_config(tmp_path / "config.json", volume=str(tmp_path / "none"),
                              atlas=str(tmp_path / "none"), out_dir=str(tmp_path / "out"))
        err = StringIO()
        assert cmd_run(config, file=None, err=err) == 2
        assert "volume" in err.getvalue()

    def test_pipeline_hash(self, tmp_path):
        """Test that the hash ignores paths and threads but not the seed"""
        a = PipelineConfig(volume="a", atlas="b")
        b = PipelineConfig(volume="c", atlas="d", out_dir=tmp_path, threads=4)
        c = PipelineConfig(volume="a", atlas="b", seed=8)
        assert a.pipeline_hash() == b.pipeline_hash()
        assert a.pipeline_hash() != c.pipeline_hash()


class TestMetricsCommand:
    """Test scoring of saved masks"""

    def test_truth_against_itself(self, phantom_dir, tmp_path):
        """Test that the truth mask scores Dice 1 against itself"""
        truth = phantom_dir / "carotid_truth"
        assert cmd_metrics(truth, truth, out=tmp_path, file=None, err=None) == 0
        result = json.loads((tmp_path / "metrics.json").read_text())
        assert result["rows"][0]["dice"] == pytest.approx(1.0)

    def test_truth_against_empty(self, phantom_dir, tmp_path):
        """Test that an empty prediction scores Dice about 0"""
        empty = Mask(np.zeros((64, 64, 48), dtype=bool))
        save_mask(empty, tmp_path / "empty")
        assert cmd_metrics(tmp_path / "empty", phantom_dir / "carotid_truth", out=tmp_path,
                           file=None, err=None) == 0
        result = json.loads((tmp_path / "metrics.json").read_text())
        assert result["rows"][0]["dice"] <= 1e-6

    def test_several_pairs_add_summary(self, phantom_dir, tmp_path):
        """Test that two pairs produce mean and std rows"""
        truth = phantom_dir / "carotid_truth"
        assert cmd_metrics([truth, truth], [truth, truth], out=tmp_path, file=None, err=None) == 0
        result = json.loads((tmp_path / "metrics.json").read_text())
        assert result["mean"]["dice"] == pytest.approx(1.0)
        assert result["std"]["dice"] == pytest.approx(0.0, abs=1e-12)

    def test_dims_mismatch(self, phantom_dir, tmp_path):
        """Test that masks on different grids exit 2"""
        save_mask(Mask(np.zeros((4, 4, 4), dtype=bool)), tmp_path / "small")
        err = StringIO()
        assert cmd_metrics(tmp_path / "small", phantom_dir / "carotid_truth",
                           file=None, err=err) == 2
        assert err.getvalue()


class TestMain:
    """Test argument parsing and dispatch"""

    def test_frame_select(self, phantom_dir, capsys):
        """Test the frame-select subcommand prints the selection"""
        assert main(["frame-select", str(phantom_dir / "volume")]) == 0
        result = json.loads(capsys.readouterr().out)
        assert 0 <= result["index"] < 10

    def test_global_options(self):
        """Test that global options come before the subcommand"""
        args = build_parser().parse_args(["--seed", "3", "--threads", "2", "--out", "x",
                                          "run", "config.json"])
        assert (args.seed, args.threads, args.out, args.config) == (3, 2, "x", "config.json")

    def test_metrics_repeatable(self):
        """Test that --pred and --truth may repeat"""
        args = build_parser().parse_args(["metrics", "--pred", "a", "--pred", "b",
                                          "--truth", "c", "--truth", "d"])
        assert args.pred == ["a", "b"] and args.truth == ["c", "d"]

    def test_missing_command(self):
        """Test that no subcommand is a usage error"""
        with pytest.raises(SystemExit) as e:
            main([])
        assert e.value.code == 2

    def test_exit_codes(self):
        """Test the exception to exit code mapping"""
        assert exit_code_for(EmptySegmentation("x")) == 3
        assert exit_code_for(GridMismatch("x")) == 2
        assert exit_code_for(ConfigError("x")) == 2
        assert exit_code_for(ValueError("x")) == 2

    def test_frame_select_missing_volume(self, tmp_path):
        """Test that a missing volume exits 2"""
        assert cmd_frame_select(tmp_path / "none", file=None, err=None) == 2
