"""
Module: services.model_service
------------------------------

The full occupancy network: parameter store, per-scene input preparation,
the forward pass through encoder and multi-branch decoder, and the loss
breakdown used by training.

Key Components:
- ModelParams / init_model: the learnable voxel query grid, one parameter
  set per encoder layer and the shared decoder. Parameters are addressed by
  stable dotted names, which is what checkpoints store.
- SceneInputs / prepare_scene_inputs: everything about a scene that does not
  depend on the parameters (rendered features, hit queries, prototypes,
  pseudo masks, labels); computed once and reused every epoch.
- forward / compute_losses / predict_labels.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.schemas.config import AugmentationPlan, ExperimentConfig
from app.services.clustering_service import PrototypeSet2D, PseudoMaskSet, generate_pseudo_masks
from app.services.decoder_service import (
    DecoderParams,
    branch_disagreement,
    consistency_loss,
    decode_branches,
    init_decoder,
)
from app.services.losses_service import lovasz_softmax_loss, occupancy_ce_loss, total_loss
from app.services.numeric import Tensor, no_grad
from app.services.proto_opt_service import (
    contrastive_loss,
    map_affinity_to_grid,
    mask_centroids,
    prototype_pixel_features,
)
from app.services.scene_service import (
    CameraRig,
    FeatureMaps,
    HitSet,
    SceneSample,
    project_voxels,
    render_views,
)
from app.services.view_transform_service import (
    EncoderLayerParams,
    EncoderOutput,
    VoxelQueryGrid,
    build_prototypes,
    encode,
    init_encoder_layer,
)
from app.utils.errors import ConfigError
from app.utils.helpers import derive_seed, make_rng

logger = logging.getLogger(__name__)

QUERY_INIT_STD = 0.1


@dataclass
class ModelParams:
    query: Tensor
    encoder: List[EncoderLayerParams]
    decoder: DecoderParams

    def named_parameters(self) -> Dict[str, Tensor]:
        named = {"query": self.query}
        for i, layer in enumerate(self.encoder):
            for group, mlp in (
                ("projection", layer.projection),
                ("dispatch", layer.dispatch),
                ("attn_offsets", layer.attention.offsets),
                ("attn_weights", layer.attention.weights),
                ("attn_value", layer.attention.value),
                ("attn_output", layer.attention.output),
            ):
                for j, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
                    named[f"encoder.{i}.{group}.{j}.weight"] = w
                    named[f"encoder.{i}.{group}.{j}.bias"] = b
        for i, stage in enumerate(self.decoder.stages):
            named[f"decoder.stage.{i}.kernel"] = stage.kernel
            named[f"decoder.stage.{i}.bias"] = stage.bias
        classifier = self.decoder.classifier
        for j, (w, b) in enumerate(zip(classifier.weights, classifier.biases)):
            named[f"decoder.classifier.{j}.weight"] = w
            named[f"decoder.classifier.{j}.bias"] = b
        return named

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def load_named(self, tensors: Dict[str, np.ndarray]) -> None:
        """Overwrite parameter values in place; names and shapes must match."""
        named = self.named_parameters()
        missing = sorted(set(named) - set(tensors))
        unexpected = sorted(set(tensors) - set(named))
        if missing or unexpected:
            raise ConfigError(
                f"parameter names differ (missing {missing[:3]}, unexpected {unexpected[:3]})",
                field="model",
            )
        for name, tensor in named.items():
            value = np.asarray(tensors[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise ConfigError(
                    f"{name} has shape {value.shape}, model expects {tensor.shape}", field="model"
                )
            tensor.data = value.copy()


def init_model(cfg: ExperimentConfig, seed: int) -> ModelParams:
    rng = make_rng(seed, "init")
    model = cfg.model
    query = rng.normal(0.0, QUERY_INIT_STD, (model.d,) + tuple(model.query_grid))
    layers = [
        init_encoder_layer(model.d, model.d, model.n_points, rng, model.offset_scale)
        for _ in range(model.encoder_layers)
    ]
    decoder = init_decoder(model, cfg.scene.num_classes, rng)
    return ModelParams(Tensor(query, requires_grad=True), layers, decoder)


# --------------------------
# Scene inputs
# --------------------------


@dataclass
class SceneInputs:
    features: FeatureMaps
    hits: HitSet
    prototypes: PrototypeSet2D
    masks: PseudoMaskSet
    labels: np.ndarray
    seed: int


def check_scene_compatible(scene: SceneSample, rig: CameraRig, cfg: ExperimentConfig) -> None:
    if tuple(scene.grid) != tuple(cfg.scene.grid):
        raise ConfigError(
            f"scene grid {scene.grid} does not match {tuple(cfg.scene.grid)}", field="scene.grid"
        )
    if scene.num_classes != cfg.scene.num_classes:
        raise ConfigError(
            f"scene has L={scene.num_classes}, config expects {cfg.scene.num_classes}",
            field="scene.num_classes",
        )
    if tuple(rig.image_size) != tuple(cfg.rig.image_size):
        raise ConfigError(
            f"rig image size {rig.image_size} does not match {tuple(cfg.rig.image_size)}",
            field="rig.image_size",
        )


def prepare_scene_inputs(
    scene: SceneSample,
    rig: CameraRig,
    cfg: ExperimentConfig,
    hit_cache: Optional[Dict[str, HitSet]] = None,
) -> SceneInputs:
    check_scene_compatible(scene, rig, cfg)
    key = rig.fingerprint()
    if hit_cache is not None and key in hit_cache:
        hits = hit_cache[key]
    else:
        hits = project_voxels(rig, cfg.model.query_grid, scene.world_min, scene.world_max)
        if hit_cache is not None:
            hit_cache[key] = hits

    fmaps, gt_masks = render_views(
        scene,
        rig,
        cfg.model.d,
        cfg.render.noise_sigma,
        derive_seed(scene.seed, "render"),
        embed_scale=cfg.render.embed_scale,
        far=cfg.rig.far,
    )
    prototypes = build_prototypes(fmaps.features, cfg)
    source = gt_masks if cfg.clustering.mask_generator == "ground-truth" else fmaps
    masks = generate_pseudo_masks(
        source,
        cfg.grid_cell,
        cfg.clustering.s_target,
        cfg.clustering.mask_generator,
        derive_seed(scene.seed, "masks"),
    )
    labels = scene.occupancy.astype(np.int64)
    return SceneInputs(fmaps, hits, prototypes, masks, labels, scene.seed)


# --------------------------
# Forward pass and losses
# --------------------------


@dataclass
class ForwardResult:
    encoder: EncoderOutput
    branches: List[Tensor]


@dataclass
class LossBreakdown:
    total: Tensor
    occ: float
    lov: float
    cls: float
    cons: float
    disagreement: float

    def components(self) -> Dict[str, float]:
        return {"occ": self.occ, "lov": self.lov, "cls": self.cls, "cons": self.cons}


def forward(
    params: ModelParams,
    inputs: SceneInputs,
    cfg: ExperimentConfig,
    seed: int,
    plan: Optional[AugmentationPlan] = None,
) -> ForwardResult:
    grid = VoxelQueryGrid(params.query, inputs.hits)
    encoded = encode(inputs.features.features, grid, params.encoder, cfg, inputs.prototypes)
    plan = cfg.active_plan if plan is None else plan
    branches = decode_branches(encoded.q_enc, plan, params.decoder, seed, tuple(cfg.scene.grid))
    return ForwardResult(encoded, branches)


def prototype_loss(encoded: EncoderOutput, inputs: SceneInputs, cfg: ExperimentConfig) -> Tensor:
    if encoded.affinity is None or encoded.G is None:
        return Tensor(0.0)
    h2, w2 = encoded.G.shape
    hits = inputs.hits
    HA = map_affinity_to_grid(encoded.affinity.sigma(), hits.q_c, h2, w2, hits.valid)
    X = prototype_pixel_features(encoded.G.values, HA, encoded.p_vox, (h2, w2))
    centroids = mask_centroids(X, inputs.masks)
    return contrastive_loss(X, centroids, inputs.masks, cfg.loss.tau_cls)


def compute_losses(
    result: ForwardResult, inputs: SceneInputs, cfg: ExperimentConfig
) -> LossBreakdown:
    class_weights = cfg.loss.class_weights
    branch_losses: List[Tuple[Tensor, Tensor]] = [
        (occupancy_ce_loss(b, inputs.labels, class_weights), lovasz_softmax_loss(b, inputs.labels))
        for b in result.branches
    ]
    if cfg.model.proto_optimization:
        cls = prototype_loss(result.encoder, inputs, cfg)
    else:
        cls = Tensor(0.0)
    if cfg.model.mod and len(result.branches) > 1:
        cons = consistency_loss(result.branches, cfg.loss.tau_cons)
    else:
        cons = Tensor(0.0)
    total = total_loss(branch_losses, cls, cons, cfg.loss.weights)
    return LossBreakdown(
        total=total,
        occ=float(sum(occ.item() for occ, _ in branch_losses)),
        lov=float(sum(lov.item() for _, lov in branch_losses)),
        cls=cls.item(),
        cons=cons.item(),
        disagreement=branch_disagreement(result.branches),
    )


def predict_distribution(
    params: ModelParams, inputs: SceneInputs, cfg: ExperimentConfig
) -> np.ndarray:
    """Branch-0 class distribution (L, H, W, Z), no augmentation."""
    with no_grad():
        result = forward(params, inputs, cfg, inputs.seed, AugmentationPlan(branches=[[]]))
    return result.branches[0].data


def predict_labels(params: ModelParams, inputs: SceneInputs, cfg: ExperimentConfig) -> np.ndarray:
    return predict_distribution(params, inputs, cfg).argmax(axis=0)
