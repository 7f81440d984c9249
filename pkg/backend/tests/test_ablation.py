# backend/tests/test_ablation.py
import json
import time

import pytest

from app.schemas.config import ExperimentConfig
from app.schemas.metrics import AblationRow
from app.services.ablation_service import (
    AblationGrid,
    AblationTable,
    GridRow,
    ablate,
    benchmark_scenes,
    load_grid,
    preset_grid,
)
from app.utils.errors import ConfigError


def test_preset_sizes():
    assert len(preset_grid("model-design").rows) == 5
    assert len(preset_grid("augmentation").rows) == 22
    assert len(preset_grid("prototypes").rows) == 4
    assert len(preset_grid("masks").rows) == 2
    assert len(preset_grid("granularity").rows) == 4


def test_augmentation_rows_put_each_augmentation_on_its_own_branch():
    rows = {row.name: row for row in preset_grid("augmentation").rows}
    none = rows["none/no-cr"].overrides
    assert none["augmentation.branches"] == [[]]
    assert none["model.mod"] is False
    combo = rows["RD+T/cr"].overrides
    assert [b[0]["kind"] for b in combo["augmentation.branches"][1:]] == [
        "random_dropout",
        "transpose",
    ]
    assert combo["loss.weights.lambda4"] == 1.0
    assert rows["RD+T/no-cr"].overrides["loss.weights.lambda4"] == 0.0


def test_every_preset_row_applies_to_the_default_config():
    """Overrides must name real config fields"""
    base = ExperimentConfig()
    for name in ("model-design", "augmentation", "prototypes", "masks", "granularity"):
        for row in preset_grid(name).rows:
            base.with_overrides(row.overrides)


def test_unknown_preset_suggests_a_name():
    with pytest.raises(ConfigError) as exc:
        preset_grid("augmentaton")
    assert "augmentation" in exc.value.detail
    assert exc.value.field == "grid"


def test_load_grid_from_preset_with_seeds():
    grid = load_grid("prototypes", seeds=[4, 5])
    assert grid.seeds == [4, 5]
    assert [r.name for r in grid.rows] == ["r=2", "r=4", "r=6", "r=8"]


def test_load_grid_from_file(tmp_path):
    path = tmp_path / "grid.json"
    path.write_text(
        json.dumps({"seeds": [7], "rows": [{"name": "no-mod", "overrides": {"model.mod": False}}]})
    )
    grid = load_grid(path)
    assert grid.seeds == [7]
    assert grid.rows[0].overrides == {"model.mod": False}
    assert load_grid(path, seeds=[1, 2]).seeds == [1, 2]


def test_benchmark_scenes_are_seeded(tiny_config):
    train_a, val_a = benchmark_scenes(tiny_config, 0)
    train_b, _ = benchmark_scenes(tiny_config, 0)
    assert len(train_a) == 2 and len(val_a) == 1
    assert (train_a[0][0].occupancy == train_b[0][0].occupancy).all()


def test_summary_aggregates_over_seeds():
    table = AblationTable(
        [
            AblationRow(name="a", seed=0, miou=0.5, iou=0.6, final_loss=1.0, disagreement=0.0),
            AblationRow(name="a", seed=1, miou=0.7, iou=0.8, final_loss=3.0, disagreement=0.0),
            AblationRow(name="b", seed=0),
        ]
    )
    summary = table.summary()
    assert [s.name for s in summary] == ["a", "b"]
    assert summary[0].runs == 2
    assert summary[0].miou == "0.6000 ± 0.1000"
    assert summary[0].final_loss == "2.0000 ± 1.0000"
    assert summary[1].miou == "n/a"


def test_prototype_sweep_reports_prototype_counts():
    base = ExperimentConfig()
    counts = [
        base.with_overrides(row.overrides).num_prototypes
        for row in preset_grid("prototypes").rows
    ]
    assert counts == [96, 24, 12, 6]


def test_tiny_ablation_runs_in_grid_order(tiny_config):
    config = tiny_config.with_overrides({"epochs": 1})
    grid = load_grid("masks", seeds=[0])
    table = ablate(config, grid, workers=1)
    assert [r.name for r in table.rows] == ["ground-truth", "grid-kmeans"]
    for row in table.rows:
        assert row.final_loss is not None
        assert row.M == 12
        assert row.miou is None or 0.0 <= row.miou <= 1.0
    assert len(table.records()) == 2
    assert [s.M for s in table.summary()] == [12, 12]


def test_bad_row_override_is_a_config_error(tiny_config, tmp_path):
    path = tmp_path / "grid.json"
    row = {"name": "x", "overrides": {"model.nope": 1}}
    path.write_text(json.dumps({"seeds": [0], "rows": [row]}))
    with pytest.raises(ConfigError):
        ablate(tiny_config, load_grid(path), workers=1)


@pytest.mark.slow
def test_model_design_ordering_on_default_benchmark():
    started = time.perf_counter()
    table = ablate(ExperimentConfig(), preset_grid("model-design"), workers=4)
    assert time.perf_counter() - started <= 30 * 60
    mean = {
        s.name: float(s.miou.split(" ± ")[0]) for s in table.summary() if s.miou != "n/a"
    }
    assert mean["full"] >= mean["mod"] >= mean["baseline"]
    assert mean["full"] >= mean["mapping+optimization"] >= mean["baseline"]
    assert mean["full"] - mean["baseline"] >= 0.01


@pytest.mark.slow
def test_consistency_regularization_lowers_disagreement():
    rows = [
        GridRow(name="cr"),
        GridRow(name="no-cr", overrides={"loss.weights.lambda4": 0.0}),
    ]
    grid = AblationGrid(seeds=[0, 1, 2], rows=rows)
    table = ablate(ExperimentConfig(), grid, workers=4)
    by_name = {s.name: float(s.disagreement.split(" ± ")[0]) for s in table.summary()}
    assert by_name["cr"] < by_name["no-cr"]
