"""
Module: services.ablation_service
---------------------------------

Ablation runner: trains and evaluates one model per (grid row, seed) and
tabulates the results.

A grid is a list of named rows, each a set of dotted-path overrides on the
base ExperimentConfig, plus the list of seeds every row runs with. Grids come
from a JSON file or from one of the presets:

- model-design: the model-design rows (prototype mapping, prototype optimization,
  multi-perspective decoding) from the baseline up to the full model.
- augmentation: eleven augmentation combinations, each with and without
  consistency regularization. Every checked augmentation is one branch.
- prototypes: prototype counts swept through the downsampling ratio r.
- masks: ground-truth versus grid k-means pseudo masks.
- granularity: grid k-means mask count S_target crossed with r.

Rows × seeds can run in a process pool; results always come back in grid
order.
"""

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field

from app.core.config import get_settings
from app.schemas.config import ExperimentConfig
from app.schemas.metrics import AblationRow, AblationSummaryRow
from app.services.scene_service import build_rig, generate_scene_set
from app.services.training_service import LabeledScene, evaluate, train
from app.utils.errors import ConfigError
from app.utils.helpers import derive_seed, format_mean_std, suggest_name

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = [0, 1, 2]


class GridRow(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    overrides: Dict[str, Any] = Field(default_factory=dict)


class AblationGrid(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seeds: List[int] = Field(default_factory=lambda: list(DEFAULT_SEEDS))
    rows: List[GridRow]


# --------------------------
# Presets
# --------------------------


def _model_design_rows() -> List[GridRow]:
    toggles = [
        ("baseline", False, False, False),
        ("mapping", True, False, False),
        ("mapping+optimization", True, True, False),
        ("mod", False, False, True),
        ("full", True, True, True),
    ]
    return [
        GridRow(
            name=name,
            overrides={
                "model.proto_mapping": mapping,
                "model.proto_optimization": optimization,
                "model.mod": mod,
            },
        )
        for name, mapping, optimization, mod in toggles
    ]


AUGMENTATION_COMBOS: List[Tuple[str, ...]] = [
    (),
    ("random_dropout",),
    ("gaussian_noise",),
    ("transpose",),
    ("flip",),
    ("random_dropout", "transpose"),
    ("random_dropout", "flip"),
    ("gaussian_noise", "transpose"),
    ("gaussian_noise", "flip"),
    ("random_dropout", "gaussian_noise"),
    ("transpose", "flip"),
]

SHORT_NAMES = {
    "random_dropout": "RD",
    "gaussian_noise": "GN",
    "transpose": "T",
    "flip": "F",
}


def _augmentation_rows() -> List[GridRow]:
    rows = []
    for combo in AUGMENTATION_COMBOS:
        branches = [[]] + [[{"kind": kind, "axes": ["x", "y"]}] for kind in combo]
        label = "+".join(SHORT_NAMES[k] for k in combo) or "none"
        for regularized in (False, True):
            rows.append(
                GridRow(
                    name=f"{label}/{'cr' if regularized else 'no-cr'}",
                    overrides={
                        "augmentation.branches": branches,
                        "model.mod": bool(combo),
                        "loss.weights.lambda4": 1.0 if regularized else 0.0,
                    },
                )
            )
    return rows


def _prototype_rows() -> List[GridRow]:
    return [GridRow(name=f"r={r}", overrides={"clustering.r": r}) for r in (2, 4, 6, 8)]


def _mask_rows() -> List[GridRow]:
    return [
        GridRow(name=generator, overrides={"clustering.mask_generator": generator})
        for generator in ("ground-truth", "grid-kmeans")
    ]


def _granularity_rows() -> List[GridRow]:
    return [
        GridRow(
            name=f"r={r}/S={s}",
            overrides={
                "clustering.mask_generator": "grid-kmeans",
                "clustering.r": r,
                "clustering.s_target": s,
            },
        )
        for r in (4, 8)
        for s in (8, 32)
    ]


PRESETS = {
    "model-design": _model_design_rows,
    "augmentation": _augmentation_rows,
    "prototypes": _prototype_rows,
    "masks": _mask_rows,
    "granularity": _granularity_rows,
}


def preset_grid(name: str, seeds: Optional[Sequence[int]] = None) -> AblationGrid:
    if name not in PRESETS:
        hint = suggest_name(name, PRESETS)
        raise ConfigError(
            f"unknown preset {name!r}" + (f", did you mean {hint!r}?" if hint else ""),
            field="grid",
        )
    return AblationGrid(
        seeds=list(seeds) if seeds is not None else list(DEFAULT_SEEDS), rows=PRESETS[name]()
    )


def load_grid(source: Union[str, Path], seeds: Optional[Sequence[int]] = None) -> AblationGrid:
    """A preset name or the path of a grid JSON file."""
    path = Path(source)
    if str(source) in PRESETS or not path.exists():
        return preset_grid(str(source), seeds)
    grid = AblationGrid.model_validate_json(path.read_text(encoding="utf-8"))
    if seeds is not None:
        grid.seeds = list(seeds)
    return grid


# --------------------------
# Running
# --------------------------


def benchmark_scenes(
    config: ExperimentConfig, seed: int
) -> Tuple[List[LabeledScene], List[LabeledScene]]:
    """The synthetic train/validation split for ``seed``."""
    rig = build_rig(config.rig)
    train_set = generate_scene_set(config, config.train_scenes, derive_seed(seed, "train-scenes"))
    val_set = generate_scene_set(config, config.val_scenes, derive_seed(seed, "val-scenes"))
    return [(s, rig) for s in train_set], [(s, rig) for s in val_set]


def run_row(config_json: str, name: str, overrides: Dict[str, Any], seed: int) -> AblationRow:
    """Train and evaluate one grid row for one seed."""
    base = ExperimentConfig.from_json(config_json)
    try:
        config = base.with_overrides(overrides)
    except ValueError as e:
        raise ConfigError(f"row {name!r}: {e}", field="grid")
    train_set, val_set = benchmark_scenes(config, seed)
    checkpoint, log = train(config, train_set, seed)
    metrics = evaluate(checkpoint, val_set or train_set)
    last = log.records[-1] if log.records else None
    row = AblationRow(
        name=name,
        seed=seed,
        M=config.num_prototypes,
        miou=metrics.miou,
        iou=metrics.iou,
        final_loss=last.total if last else None,
        disagreement=last.disagreement if last else None,
        overrides=json.dumps(overrides, sort_keys=True),
    )
    logger.info(f"ablation row {name} seed={seed}: mIoU={row.miou}")
    return row


@dataclass
class AblationTable:
    rows: List[AblationRow]

    def records(self) -> List[Dict]:
        return [r.model_dump() for r in self.rows]

    def summary(self) -> List[AblationSummaryRow]:
        names: List[str] = []
        for row in self.rows:
            if row.name not in names:
                names.append(row.name)
        out = []
        for name in names:
            runs = [r for r in self.rows if r.name == name]
            out.append(
                AblationSummaryRow(
                    name=name,
                    runs=len(runs),
                    M=runs[0].M,
                    miou=format_mean_std([r.miou for r in runs]),
                    iou=format_mean_std([r.iou for r in runs]),
                    final_loss=format_mean_std([r.final_loss for r in runs]),
                    disagreement=format_mean_std([r.disagreement for r in runs]),
                )
            )
        return out


def ablate(
    base_config: ExperimentConfig, grid: AblationGrid, workers: Optional[int] = None
) -> AblationTable:
    """One row per grid row × seed, in grid order."""
    workers = get_settings().workers if workers is None else workers
    config_json = base_config.to_json(indent=None)
    jobs = [
        (config_json, row.name, row.overrides, seed) for row in grid.rows for seed in grid.seeds
    ]
    logger.info(f"Running {len(jobs)} ablation jobs with {workers} worker(s)")
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_row, *zip(*jobs)))
    else:
        rows = [run_row(*job) for job in jobs]
    return AblationTable(rows)
