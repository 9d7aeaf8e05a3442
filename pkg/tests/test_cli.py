from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from conftest import grid
from mangrovewatch.cli import EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_FAILED, EXIT_OK, run
from mangrovewatch.config import PipelineConfig, dump_config, env_overrides, load_config
from mangrovewatch.errors import ConfigurationError
from mangrovewatch.raster import GeoTransform, RasterGrid, write_raster
from mangrovewatch.schemas import CHANGE_REPORT, EVALUATION_REPORT, PREPROCESS_REPORT, validate_json

TABLE_AREAS = [7080.88, 7271.29, 7465.93, 7707.80, 8354.46, 8247.55, 8606.17, 9142.21]
SMALL = ["--set", "dataset.tile_size=32", "--set", "dataset.stride=32", "--set", "predict.overlap=0",
         "--set", "dataset.val_fraction=0.5"]


@pytest.fixture(scope="module")
def demo(tmp_path_factory):
    root = tmp_path_factory.mktemp("demo")
    months = [str(m) for m in range(1, 13)]
    assert run(["synthesize", str(root), "--size", "64", "--years", "2019", "2020", "--months", *months]) == EXIT_OK
    return root


def cli(demo, *args):
    return run([args[0], "--config", str(demo / "config.yaml"), *SMALL, *args[1:]])


# ------------------------------------------------------------------ config


def test_override_precedence(tmp_path):
    path = dump_config(PipelineConfig(), tmp_path / "c.yaml")
    env = {"MANGROVEWATCH_TRAIN__MAX_EPOCHS": "7", "MANGROVEWATCH_DATASET__SEED": "4"}
    cfg = load_config(path, ["train.max_epochs=9"], environ=env)
    assert cfg.train.max_epochs == 9
    assert cfg.dataset.seed == 4
    assert cfg.base_dir == tmp_path


def test_unknown_key_is_rejected(tmp_path):
    with pytest.raises(ConfigurationError, match="epochs"):
        load_config(None, ["train.epochs=3"], environ={})
    with pytest.raises(ConfigurationError, match="val_fraction"):
        load_config(None, ["dataset.val_fraction=1.5"], environ={})


def test_lists_become_tuples_and_digest_is_stable(tmp_path):
    cfg = load_config(None, ["preprocess.cloud_codes=[8, 9]"], environ={})
    assert cfg.preprocess.cloud_codes == (8, 9)
    again = load_config(dump_config(cfg, tmp_path / "c.yaml"), environ={})
    assert again.digest() == cfg.digest()


def test_env_parsing():
    assert env_overrides({"MANGROVEWATCH_ANALYSIS__CO2_FACTOR": "3.67", "OTHER": "x"}) == [("analysis.co2_factor", 3.67)]


def test_bad_config_exit_code(capsys):
    assert run(["tile", "--set", "train.nope=1"]) == EXIT_CONFIG
    assert "nope" in capsys.readouterr().err


# -------------------------------------------------------------- preprocess


def test_preprocess_lists_every_month(demo):
    # the synthetic June scene is 40% cloudy; lift the limit so all 12 months qualify
    assert cli(demo, "preprocess", "--year", "2020", "--set", "preprocess.max_cloud_pct=50") == EXIT_OK
    doc = validate_json(demo / "workspace/reports/preprocess_2020.json", PREPROCESS_REPORT)
    assert len(doc["water_areas_ha"]) == 12
    assert doc["window_months"] == ["2020-03", "2020-04"]
    assert doc["provenance"]["stage"] == "preprocess"


def test_preprocess_skips_cloudy_scenes(demo):
    assert cli(demo, "preprocess", "--year", "2020") == EXIT_OK
    doc = json.loads((demo / "workspace/reports/preprocess_2020.json").read_text())
    assert len(doc["water_areas_ha"]) == 11
    assert "2020-06" not in [w["month"] for w in doc["water_areas_ha"]]
    assert doc["window_months"] == ["2020-03", "2020-04"]


def test_year_without_scenes_fails(demo, capsys):
    assert cli(demo, "preprocess", "--year", "2016") == EXIT_FAILED
    assert "2016" in capsys.readouterr().err


# ------------------------------------------------------------ later stages


def test_tile_rerun_is_byte_identical(demo):
    assert cli(demo, "tile") == EXIT_OK
    index = demo / "workspace/tiles/train/index.json"
    first = index.read_bytes()
    assert cli(demo, "tile") == EXIT_OK
    assert index.read_bytes() == first
    assert json.loads(first)["provenance"]["stage"] == "tile"


def test_missing_upstream_names_the_file(tmp_path, capsys):
    cfg = dump_config(PipelineConfig(), tmp_path / "c.yaml")
    assert run(["train", "--config", str(cfg)]) == EXIT_DEPENDENCY
    assert "index.json" in capsys.readouterr().err


def test_short_pipeline_runs_every_stage(demo):
    quick = ["--set", "train.max_epochs=2", "--seed", "1"]
    for year in ("2019", "2020"):
        assert cli(demo, "preprocess", "--year", year) == EXIT_OK
    assert cli(demo, "tile", *quick) == EXIT_OK
    assert cli(demo, "train", *quick) == EXIT_OK
    assert cli(demo, "predict") == EXIT_OK
    assert cli(demo, "evaluate", "--year", "2020") == EXIT_OK
    assert cli(demo, "analyze") == EXIT_OK
    assert cli(demo, "report") == EXIT_OK
    rep = demo / "workspace/reports"
    validate_json(rep / "evaluation_2020.json", EVALUATION_REPORT)
    validate_json(rep / "change_report.json", CHANGE_REPORT)
    for name in ("training_curve.png", "area_trend.png", "region_trend.png", "summary.md", "change_2019_2020.tif"):
        assert (rep / name).exists(), name
    summary = json.loads((rep / "summary.json").read_text())
    assert summary["training"]["epochs"] == 2


def test_evaluate_mismatched_shapes_fails(demo, tmp_path, capsys):
    truth = write_raster(tmp_path / "truth.tif", grid(np.zeros((32, 32), np.uint8)))
    (demo / "workspace/masks").mkdir(parents=True, exist_ok=True)
    if not (demo / "workspace/masks/2020.tif").exists():
        write_raster(demo / "workspace/masks/2020.tif", grid(np.zeros((64, 64), np.uint8)))
    assert cli(demo, "evaluate", "--year", "2020", "--truth", str(truth)) == EXIT_FAILED
    assert "mismatch" in capsys.readouterr().err


def test_analyze_table_from_sized_masks(tmp_path):
    side = 1000
    transform = GeoTransform(500_000.0, 2_700_000.0, 10.0, -10.0)
    masks = tmp_path / "workspace" / "masks"
    for year, area in zip(range(2017, 2025), TABLE_AREAS):
        flat = np.zeros(side * side, np.uint8)
        flat[: round(area / 0.01)] = 1
        write_raster(masks / f"{year}.tif", RasterGrid(flat.reshape(side, side), transform, None))
    write_raster(tmp_path / "regions.tif", RasterGrid(np.ones((side, side), np.uint8), transform, None))
    cfg = PipelineConfig()
    cfg.paths.regions = "regions.tif"
    path = dump_config(cfg, tmp_path / "c.yaml")
    assert run(["analyze", "--config", str(path), "--set", "analysis.reference_co2_t=713367.36"]) == EXIT_OK
    with open(tmp_path / "workspace/reports/area_change_table.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["Years", "Area (ha)", "Annual change (ha)", "Annual change rate (%)"]
    assert len(rows) == 9
    assert [float(r[1]) for r in rows[1:]] == TABLE_AREAS
    assert rows[2][2:] == ["190.41", "2.69"]
    doc = json.loads((tmp_path / "workspace/reports/change_report.json").read_text())
    assert doc["carbon"]["co2_deviation_pct"] == pytest.approx(-0.088, abs=0.001)
