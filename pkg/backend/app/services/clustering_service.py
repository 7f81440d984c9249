"""
Module: services.clustering_service
-----------------------------------

2D prototype grouping over per-view feature maps and pseudo-mask generation.

Key Components:
- init_prototypes: the mean feature of each r × r cell of a regular grid laid
  over the feature map (edge cells are smaller when r does not divide it).
- iterate_prototypes: soft pixel-to-prototype assignment restricted to the
  3 × 3 prototype neighborhood of each pixel's home cell, followed by an
  assignment-weighted mean of the pixel features.
- generate_pseudo_masks: the segment partition anchoring the contrastive
  loss, either nearest-neighbor resampled ground-truth instance masks or grid
  seeded k-means on normalized pixel features split into connected pieces.

Feature maps are constants (rendered inputs), so all work here is plain
numpy; prototypes are handed to the model as non-differentiable tensors.
"""

import logging
import math
import warnings
from dataclasses import dataclass
from typing import List, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.cluster.vq import kmeans2

from app.services.numeric import Tensor, as_tensor
from app.services.scene_service import FeatureMaps, GroundTruthMasks
from app.utils.errors import DimensionError, ParameterError
from app.utils.helpers import make_rng
from app.utils.validators import validate_positive

logger = logging.getLogger(__name__)

GENERATORS = ("ground-truth", "grid-kmeans")
KMEANS_ITERS = 10

ArrayLike = Union[np.ndarray, Tensor]


@dataclass
class PrototypeSet2D:
    features: Tensor  # (..., M, d)
    grid_shape: Tuple[int, int]
    r: int

    @property
    def M(self) -> int:
        return self.grid_shape[0] * self.grid_shape[1]


@dataclass
class PseudoMaskSet:
    ids: np.ndarray  # N × h′ × w′
    S: int
    generator: str

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.ids.shape[-2:])


def _as_array(x: ArrayLike) -> np.ndarray:
    return as_tensor(x).data


def prototype_grid(h: int, w: int, r: int) -> Tuple[int, int]:
    return math.ceil(h / r), math.ceil(w / r)


def home_cells(h: int, w: int, r: int) -> np.ndarray:
    """Flat prototype index of every pixel's containing grid cell, shape h·w."""
    _, m_w = prototype_grid(h, w, r)
    rows, cols = np.meshgrid(np.arange(h) // r, np.arange(w) // r, indexing="ij")
    return (rows * m_w + cols).reshape(-1)


def _neighborhoods(h: int, w: int, r: int) -> np.ndarray:
    """The 3 × 3 prototype neighborhood of each pixel, -1 outside the grid."""
    m_h, m_w = prototype_grid(h, w, r)
    rows, cols = np.meshgrid(np.arange(h) // r, np.arange(w) // r, indexing="ij")
    rows, cols = rows.reshape(-1, 1), cols.reshape(-1, 1)
    dr, dc = np.meshgrid([-1, 0, 1], [-1, 0, 1], indexing="ij")
    nr = rows + dr.reshape(1, -1)
    nc = cols + dc.reshape(1, -1)
    inside = (nr >= 0) & (nr < m_h) & (nc >= 0) & (nc < m_w)
    return np.where(inside, nr * m_w + nc, -1)


def init_prototypes(fmap: ArrayLike, r: int) -> PrototypeSet2D:
    """Cell means of ``fmap`` (shape (..., d, h_f, w_f)) on an r-grid."""
    if r < 1:
        raise ParameterError(f"downsampling ratio r must be >= 1, got {r}")
    x = _as_array(fmap)
    if x.ndim < 3:
        raise DimensionError(f"init_prototypes expects (..., d, h, w), got {x.shape}")
    d, h, w = x.shape[-3:]
    grid = prototype_grid(h, w, r)
    home = home_cells(h, w, r)
    assign = np.zeros((h * w, grid[0] * grid[1]))
    assign[np.arange(h * w), home] = 1.0
    pixels = np.swapaxes(x.reshape(x.shape[:-2] + (h * w,)), -1, -2)  # (..., hw, d)
    sums = np.swapaxes(assign, 0, 1) @ pixels
    protos = sums / assign.sum(axis=0)[:, None]
    return PrototypeSet2D(Tensor(protos), grid, r)


def _iterate_view(
    pixels: np.ndarray, protos: np.ndarray, neighbors: np.ndarray, iters: int, tau: float
) -> np.ndarray:
    hw = pixels.shape[0]
    valid = neighbors >= 0
    safe = np.where(valid, neighbors, 0)
    pixel_norm = np.linalg.norm(pixels, axis=-1, keepdims=True)
    rows = np.broadcast_to(np.arange(hw)[:, None], neighbors.shape)
    for _ in range(iters):
        proto_norm = np.linalg.norm(protos, axis=-1)
        cand = protos[safe]  # hw × 9 × d
        denom = pixel_norm * proto_norm[safe]
        dots = np.einsum("pd,pkd->pk", pixels, cand)
        cos = np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)
        logits = np.where(valid, cos / tau, -np.inf)
        logits -= logits.max(axis=1, keepdims=True)
        weights = np.where(valid, np.exp(logits), 0.0)
        weights /= weights.sum(axis=1, keepdims=True)

        assign = np.zeros((hw, protos.shape[0]))
        np.add.at(assign, (rows[valid], safe[valid]), weights[valid])
        mass = assign.sum(axis=0)
        updated = assign.T @ pixels
        keep = mass > 1e-12
        protos = np.where(keep[:, None], updated / np.where(keep, mass, 1.0)[:, None], protos)
    return protos


def iterate_prototypes(
    fmap: ArrayLike, protos: PrototypeSet2D, iters: int, assign_tau: float
) -> PrototypeSet2D:
    """Refine prototypes by neighborhood-restricted soft assignment."""
    if iters < 0:
        raise ParameterError(f"iters must be >= 0, got {iters}")
    validate_positive("assign_tau", assign_tau)
    if iters == 0:
        return protos
    x = _as_array(fmap)
    d, h, w = x.shape[-3:]
    neighbors = _neighborhoods(h, w, protos.r)
    lead = x.shape[:-3]
    pixels = np.swapaxes(x.reshape(lead + (d, h * w)), -1, -2).reshape(-1, h * w, d)
    current = protos.features.data.reshape(-1, protos.M, d)
    if current.shape[0] != pixels.shape[0]:
        raise DimensionError(
            f"iterate_prototypes: {pixels.shape[0]} views vs prototypes {protos.features.shape}"
        )
    out = np.stack(
        [
            _iterate_view(pixels[i], current[i], neighbors, iters, assign_tau)
            for i in range(pixels.shape[0])
        ]
    )
    return PrototypeSet2D(Tensor(out.reshape(protos.features.shape)), protos.grid_shape, protos.r)


# --------------------------
# Pseudo masks
# --------------------------


def _nearest_rows(source: int, target: int) -> np.ndarray:
    return np.minimum(((np.arange(target) + 0.5) * source / target).astype(np.int64), source - 1)


def resize_nearest(maps: np.ndarray, target_shape: Tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize of the two trailing axes."""
    h, w = maps.shape[-2:]
    th, tw = target_shape
    if (h, w) == (th, tw):
        return maps.copy()
    return maps[..., _nearest_rows(h, th)[:, None], _nearest_rows(w, tw)[None, :]]


def _seed_grid(s_target: int, h: int, w: int) -> Tuple[int, int]:
    gs_h = max(1, min(h, round(math.sqrt(s_target * h / w))))
    gs_w = max(1, min(w, math.ceil(s_target / gs_h)))
    while gs_h * gs_w < s_target:
        if gs_h < h:
            gs_h += 1
        else:
            gs_w += 1
    return gs_h, gs_w


def _kmeans_view(
    features: np.ndarray, s_target: int, rng: np.random.Generator, view: int
) -> np.ndarray:
    d, h, w = features.shape
    data = features.reshape(d, -1).T
    norms = np.linalg.norm(data, axis=1, keepdims=True)
    data = np.divide(data, norms, out=np.zeros_like(data), where=norms > 0)

    gs_h, gs_w = _seed_grid(s_target, h, w)
    rows = ((np.arange(gs_h) + 0.5) * h / gs_h).astype(np.int64)
    cols = ((np.arange(gs_w) + 0.5) * w / gs_w).astype(np.int64)
    seeds = (rows[:, None] * w + cols[None, :]).reshape(-1)
    if seeds.size > s_target:
        seeds = np.sort(rng.choice(seeds, size=s_target, replace=False))

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        _, labels = kmeans2(data, data[seeds].copy(), iter=KMEANS_ITERS, minit="matrix")
    if caught:
        logger.warning(f"view {view}: k-means left {len(caught)} cluster(s) empty")

    ids = np.zeros((h, w), dtype=np.int64)
    labels = labels.reshape(h, w)
    next_id = 0
    for cluster in np.unique(labels):
        components, count = ndimage.label(labels == cluster)
        ids[components > 0] = components[components > 0] - 1 + next_id
        next_id += count
    return ids


def generate_pseudo_masks(
    source: Union[GroundTruthMasks, FeatureMaps, np.ndarray],
    target_shape: Tuple[int, int],
    s_target: int,
    generator: str,
    seed: int,
) -> PseudoMaskSet:
    """Pseudo masks at (h′, w′) from ground-truth masks or feature maps."""
    if generator not in GENERATORS:
        raise ParameterError(f"unknown mask generator {generator!r}, expected one of {GENERATORS}")
    th, tw = target_shape
    if th < 1 or tw < 1:
        raise ParameterError(f"target shape must be positive, got {target_shape}")
    if s_target > th * tw:
        raise ParameterError(f"S_target={s_target} exceeds the {th}×{tw} grid")

    if generator == "ground-truth":
        if not isinstance(source, GroundTruthMasks):
            raise ParameterError("the ground-truth generator needs GroundTruthMasks")
        ids = resize_nearest(source.ids, target_shape)
        return PseudoMaskSet(ids.astype(np.int64), source.num_ids, generator)

    features = source.features if isinstance(source, FeatureMaps) else _as_array(source)
    if features.ndim == 3:
        features = features[None]
    features = resize_nearest(features, target_shape)
    rng = make_rng(seed, "pseudo-masks")
    ids = np.stack(
        [_kmeans_view(features[v], s_target, rng, v) for v in range(features.shape[0])]
    )
    S = int(ids.max()) + 1
    logger.debug(f"grid-kmeans produced {S} masks for S_target={s_target}")
    return PseudoMaskSet(ids, S, generator)
