"""
Module: services.view_transform_service
---------------------------------------

The prototype-aware view transformation, lifting per-view image features
into the voxel query grid.

Key Components:
- compute_affinity: cosine affinity between projected 2D prototypes and the
  hit queries of each view. Padding slots hold a large negative sentinel and
  are hard-masked, so their sigmoid weight is exactly 0.
- aggregate: pools hit-query features into 3D voxel prototypes, a guarded
  weighted mean normalized per (view, prototype) by the summed sigmoid
  affinity.
- dispatch: sends the prototype message back to each hit query through an
  MLP, as a residual on the query.
- deformable_cross_attention: single-scale deformable attention. Each valid
  hit slot predicts pixel offsets around its reference point q_c and softmax
  weights over its sampling points, samples a projected value map bilinearly
  and writes the weighted sum back into the grid. The attention map G
  accumulates every in-bounds point's weight into its floor-quantized grid
  cell.
- encode: prototypes are grouped once per view, then each encoder layer runs
  projection, affinity, aggregate, dispatch and attention.

Shapes: N views, M prototypes, K hit slots per view, d feature width,
(h, w, z) query grid, (h_f, w_f) feature maps, (h′, w′) attention grid.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from app.schemas.config import ExperimentConfig
from app.services.clustering_service import PrototypeSet2D, init_prototypes, iterate_prototypes
from app.services.numeric import (
    MlpParams,
    Tensor,
    as_tensor,
    cosine_similarity,
    custom_op,
    matmul,
    mlp_forward,
    scatter_add,
    softmax_with_temperature,
)
from app.services.scene_service import HitSet
from app.utils.errors import ConfigError, DimensionError
from app.utils.validators import validate_positive

logger = logging.getLogger(__name__)

AFFINITY_SENTINEL = -30.0


# --------------------------
# Types
# --------------------------


@dataclass
class VoxelQueryGrid:
    features: Tensor  # d × h × w × z
    hits: HitSet

    @property
    def d(self) -> int:
        return self.features.shape[0]

    def hit_features(self) -> Tensor:
        return gather_hit_queries(self.features, self.hits)


@dataclass
class AffinityMatrix:
    raw: Tensor  # N × M × K
    valid: np.ndarray  # N × K

    def sigma(self) -> Tensor:
        """σ(A) with padding slots forced to exactly 0."""
        return self.raw.sigmoid() * self.valid[:, None, :].astype(np.float64)


@dataclass
class AttentionMapG:
    values: Tensor  # N × D
    shape: Tuple[int, int]  # h′, w′


@dataclass
class AttentionParams:
    offsets: MlpParams  # d → 2·n_points
    weights: MlpParams  # d → n_points
    value: MlpParams  # C → d
    output: MlpParams  # d → d

    @property
    def n_points(self) -> int:
        return self.weights.out_dim

    def parameters(self) -> List[Tensor]:
        return [
            t
            for mlp in (self.offsets, self.weights, self.value, self.output)
            for t in mlp.parameters()
        ]


@dataclass
class EncoderLayerParams:
    projection: MlpParams  # d → d → d
    dispatch: MlpParams  # d → d
    attention: AttentionParams

    def parameters(self) -> List[Tensor]:
        return (
            self.projection.parameters()
            + self.dispatch.parameters()
            + self.attention.parameters()
        )


@dataclass
class EncoderOutput:
    q_enc: Tensor
    p_vox: Optional[Tensor]
    affinity: Optional[AffinityMatrix]
    G: Optional[AttentionMapG]
    prototypes: PrototypeSet2D


def ring_offsets(n_points: int, radius: float) -> np.ndarray:
    """Initial sampling offsets (pixels) evenly spread on a circle."""
    if n_points == 1:
        return np.zeros(2)
    angles = 2.0 * math.pi * np.arange(n_points) / n_points
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=-1).reshape(-1)


def init_attention_params(
    d: int, channels: int, n_points: int, rng: np.random.Generator, offset_scale: float = 1.0
) -> AttentionParams:
    offsets = MlpParams.initialize([d, 2 * n_points], ["identity"], rng, scale=0.01)
    offsets.biases[0].data[:] = ring_offsets(n_points, offset_scale)
    return AttentionParams(
        offsets=offsets,
        weights=MlpParams.initialize([d, n_points], ["identity"], rng, scale=0.1),
        value=MlpParams.initialize([channels, d], ["identity"], rng),
        output=MlpParams.initialize([d, d], ["identity"], rng, scale=0.5),
    )


def init_encoder_layer(
    d: int, channels: int, n_points: int, rng: np.random.Generator, offset_scale: float = 1.0
) -> EncoderLayerParams:
    return EncoderLayerParams(
        projection=MlpParams.initialize([channels, d, d], ["relu", "identity"], rng),
        dispatch=MlpParams.initialize([d, d], ["identity"], rng, scale=0.5),
        attention=init_attention_params(d, channels, n_points, rng, offset_scale),
    )


# --------------------------
# Prototype mapping
# --------------------------


def gather_hit_queries(query_grid: Tensor, hits: HitSet) -> Tensor:
    """Q′: the hit-slot features of each view, N × K × d (padding reads cell 0)."""
    d = query_grid.shape[0]
    flat = query_grid.reshape(d, -1).transpose(1, 0)
    return flat[hits.safe_index()]


def compute_affinity(p_img_projected, q_hit, valid: np.ndarray) -> AffinityMatrix:
    p_img_projected, q_hit = as_tensor(p_img_projected), as_tensor(q_hit)
    if p_img_projected.shape[-1] != q_hit.shape[-1] or p_img_projected.shape[0] != q_hit.shape[0]:
        raise DimensionError(
            f"compute_affinity: prototypes {p_img_projected.shape} vs hit queries {q_hit.shape}"
        )
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != q_hit.shape[:2]:
        raise DimensionError(f"compute_affinity: mask {valid.shape} vs hit queries {q_hit.shape}")
    cos = cosine_similarity(
        p_img_projected.reshape(p_img_projected.shape[:2] + (1, -1)),
        q_hit.reshape((q_hit.shape[0], 1) + q_hit.shape[1:]),
    )
    keep = valid[:, None, :].astype(np.float64)
    return AffinityMatrix(cos * keep + AFFINITY_SENTINEL * (1.0 - keep), valid)


def aggregate(p_img_projected, q_hit, A: AffinityMatrix, eps: float = 1e-6) -> Tensor:
    """P_vox = (P̂ + σ(A)·Q′) / (eps + Σ_k σ(A))."""
    validate_positive("eps", eps)
    s = A.sigma()
    numerator = as_tensor(p_img_projected) + matmul(s, as_tensor(q_hit))
    return numerator / (s.sum(axis=-1, keepdims=True) + eps)


def dispatch(q_hit, A: AffinityMatrix, p_vox, mlp: MlpParams) -> Tensor:
    """Q̃ = Q′ + MLP(σ(A)ᵀ·P_vox), applied on valid slots only."""
    q_hit = as_tensor(q_hit)
    if mlp.in_dim != q_hit.shape[-1] or mlp.out_dim != q_hit.shape[-1]:
        raise DimensionError(
            f"dispatch: MLP maps {mlp.in_dim}→{mlp.out_dim}, queries have d={q_hit.shape[-1]}"
        )
    message = matmul(A.sigma().swapaxes(-1, -2), as_tensor(p_vox))
    keep = A.valid[..., None].astype(np.float64)
    return q_hit + mlp_forward(mlp, message) * keep


# --------------------------
# Deformable attention
# --------------------------


def bilinear_sample(value, loc) -> Tensor:
    """Sample ``value`` (N × h × w × C) at normalized ``loc`` (N × ... × 2).

    Pixel centers sit at ((j + 0.5) / w, (i + 0.5) / h); neighbors outside the
    image read as zero, and locations outside [0, 1]² give exactly zero.
    """
    value, loc = as_tensor(value), as_tensor(loc)
    N, h, w, C = value.shape
    if loc.shape[0] != N or loc.shape[-1] != 2:
        raise DimensionError(f"bilinear_sample: value {value.shape} vs locations {loc.shape}")
    lead = loc.shape[1:-1]
    points = loc.data.reshape(N, -1, 2)
    inside = np.all((points >= 0.0) & (points <= 1.0), axis=-1)
    x = points[..., 0] * w - 0.5
    y = points[..., 1] * h - 0.5
    x0, y0 = np.floor(x).astype(np.int64), np.floor(y).astype(np.int64)
    wx, wy = x - x0, y - y0
    views = np.broadcast_to(np.arange(N)[:, None], x0.shape)

    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yi, xi = y0 + dy, x0 + dx
        ok = inside & (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        yi_safe, xi_safe = np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)
        sample = value.data[views, yi_safe, xi_safe] * ok[..., None]
        corners.append((yi_safe, xi_safe, ok, sample))
    (_, _, _, v00), (_, _, _, v01), (_, _, _, v10), (_, _, _, v11) = corners
    weights = [(1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx]
    out = sum(wt[..., None] * c[3] for wt, c in zip(weights, corners))

    def backward(g):
        g = g.reshape(N, -1, C)
        g_value = np.zeros(value.shape)
        for wt, (yi, xi, ok, _) in zip(weights, corners):
            np.add.at(g_value, (views[ok], yi[ok], xi[ok]), (g * wt[..., None])[ok])
        d_wx = (1 - wy)[..., None] * (v01 - v00) + wy[..., None] * (v11 - v10)
        d_wy = (1 - wx)[..., None] * (v10 - v00) + wx[..., None] * (v11 - v01)
        g_loc = np.stack([(g * d_wx).sum(-1) * w, (g * d_wy).sum(-1) * h], axis=-1)
        g_loc *= inside[..., None]
        return g_value, g_loc.reshape(loc.shape)

    return custom_op(out.reshape((N,) + lead + (C,)), (value, loc), backward, "bilinear")


def attention_cells(loc: np.ndarray, valid: np.ndarray, grid_cell: Tuple[int, int]) -> np.ndarray:
    """Flat (h′, w′) cell of each sampling point, -1 when out of range or padded."""
    h2, w2 = grid_cell
    cx = np.floor(loc[..., 0] * w2).astype(np.int64)
    cy = np.floor(loc[..., 1] * h2).astype(np.int64)
    ok = (cx >= 0) & (cx < w2) & (cy >= 0) & (cy < h2) & valid[..., None]
    return np.where(ok, cy * w2 + cx, -1)


def deformable_cross_attention(
    query_grid,
    q_tilde,
    fmaps,
    hits: HitSet,
    params: AttentionParams,
    grid_cell: Optional[Tuple[int, int]] = None,
) -> Tuple[Tensor, AttentionMapG]:
    """Attend from the hit queries into the feature maps.

    Each hit cell becomes the mean over the views that see it of
    Q̃ + attention output; cells no view sees keep their features.
    """
    query_grid, q_tilde, fmaps = as_tensor(query_grid), as_tensor(q_tilde), as_tensor(fmaps)
    d = query_grid.shape[0]
    N, C, h_f, w_f = fmaps.shape
    if q_tilde.shape != (hits.n_views, hits.K, d):
        raise DimensionError(
            f"deformable_cross_attention: queries {q_tilde.shape} vs hit slots "
            f"{(hits.n_views, hits.K)} and d={d}"
        )
    if N != hits.n_views:
        raise DimensionError(f"{N} feature maps for {hits.n_views} views")
    grid_cell = grid_cell or (h_f, w_f)
    P = params.n_points

    offsets = mlp_forward(params.offsets, q_tilde).reshape(N, hits.K, P, 2)
    loc = Tensor(hits.q_c[:, :, None, :]) + offsets * np.array([1.0 / w_f, 1.0 / h_f])
    attn = softmax_with_temperature(mlp_forward(params.weights, q_tilde), 1.0)  # N × K × P

    value = mlp_forward(params.value, fmaps.transpose(0, 2, 3, 1))  # N × h_f × w_f × d
    sampled = bilinear_sample(value, loc)  # N × K × P × d
    attended = (sampled * attn.reshape(N, hits.K, P, 1)).sum(axis=2)
    out = q_tilde + mlp_forward(params.output, attended)

    cells = query_grid.size // d
    slot_index = np.where(hits.valid, hits.index, -1).reshape(-1)
    totals = scatter_add(out.reshape(N * hits.K, d).transpose(1, 0), slot_index, cells)
    counts = np.bincount(slot_index[slot_index >= 0], minlength=cells).astype(np.float64)
    seen = (counts > 0).astype(np.float64)
    base = query_grid.reshape(d, cells)
    updated = base * (1.0 - seen) + totals * (1.0 / np.maximum(counts, 1.0))
    q_enc = updated.reshape(query_grid.shape)

    point_cells = attention_cells(loc.data, hits.valid, grid_cell)
    G = scatter_add(
        attn.reshape(N, hits.K * P), point_cells.reshape(N, -1), grid_cell[0] * grid_cell[1]
    )
    return q_enc, AttentionMapG(G, tuple(grid_cell))


# --------------------------
# Encoder
# --------------------------


def build_prototypes(fmaps, cfg: ExperimentConfig) -> PrototypeSet2D:
    protos = init_prototypes(fmaps, cfg.clustering.r)
    return iterate_prototypes(
        fmaps, protos, cfg.clustering.proto_iters, cfg.clustering.assign_tau
    )


def encode(
    fmaps,
    query_grid: VoxelQueryGrid,
    layers: List[EncoderLayerParams],
    cfg: ExperimentConfig,
    prototypes: Optional[PrototypeSet2D] = None,
) -> EncoderOutput:
    """Run the encoder layers; returns Q_enc and the last layer's P_vox, A and G."""
    model = cfg.model
    if model.proto_optimization and not model.proto_mapping:
        raise ConfigError("proto_optimization requires proto_mapping", field="model")
    if len(layers) != model.encoder_layers:
        raise ConfigError(
            f"{len(layers)} layer parameter sets for {model.encoder_layers} layers",
            field="model.encoder_layers",
        )
    fmaps = as_tensor(fmaps)
    if prototypes is None:
        prototypes = build_prototypes(fmaps.data, cfg)

    q = query_grid.features
    hits = query_grid.hits
    p_vox, affinity, G = None, None, None
    for layer in layers:
        q_hit = gather_hit_queries(q, hits)
        if model.proto_mapping:
            p_hat = mlp_forward(layer.projection, prototypes.features)
            affinity = compute_affinity(p_hat, q_hit, hits.valid)
            p_vox = aggregate(p_hat, q_hit, affinity, model.eps)
            q_tilde = dispatch(q_hit, affinity, p_vox, layer.dispatch)
        else:
            q_tilde = q_hit
        q, G = deformable_cross_attention(
            q, q_tilde, fmaps, hits, layer.attention, cfg.grid_cell
        )
    return EncoderOutput(q, p_vox, affinity, G, prototypes)

