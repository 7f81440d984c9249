"""
Module: services.proto_opt_service
----------------------------------

Prototype optimization: mapping affinities onto the implicit 2D grid,
prototype-aware pixel features, pseudo-mask centroids and the
prototype contrastive loss.

Key Components:
- map_affinity_to_grid: each valid hit slot lands in cell
  (floor(q_x·w′), floor(q_y·h′)); slots outside the grid are dropped and the
  rest scatter-add their affinity into their cell.
- prototype_pixel_features: X = (G ⊙ H(A))ᵀ-weighted sum of voxel
  prototypes, one d-vector per grid cell and view.
- mask_centroids: mean of X over each pseudo mask; empty masks are flagged
  invalid.
- contrastive_loss: per cell, the negative log of the softmax mass that the
  cell's own mask centroid receives among all valid centroids. Summed over
  cells and views.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from app.services.clustering_service import PseudoMaskSet
from app.services.numeric import (
    Tensor,
    as_tensor,
    cosine_similarity,
    logsumexp,
    matmul,
    scatter_add,
)
from app.utils.errors import DimensionError
from app.utils.validators import validate_positive

logger = logging.getLogger(__name__)


@dataclass
class MaskCentroids:
    centroids: Tensor  # N × S × d
    counts: np.ndarray  # N × S
    valid: np.ndarray  # N × S


def grid_cells(q_c: np.ndarray, valid: np.ndarray, h2: int, w2: int) -> np.ndarray:
    """Flat cell index y·w′ + x per slot, -1 when out of range or padded."""
    q_c = np.asarray(q_c, dtype=np.float64)
    x = np.floor(q_c[..., 0] * w2).astype(np.int64)
    y = np.floor(q_c[..., 1] * h2).astype(np.int64)
    ok = np.asarray(valid, dtype=bool) & (x >= 0) & (x < w2) & (y >= 0) & (y < h2)
    return np.where(ok, y * w2 + x, -1)


def map_affinity_to_grid(A, q_c: np.ndarray, h2: int, w2: int, valid=None) -> Tensor:
    """H(A): N × M × K affinities scattered onto N × M × (h′·w′)."""
    A = as_tensor(A)
    if A.ndim != 3 or np.shape(q_c)[:2] != (A.shape[0], A.shape[2]):
        raise DimensionError(
            f"map_affinity_to_grid: affinity {A.shape} vs coordinates {np.shape(q_c)}"
        )
    if valid is None:
        valid = np.ones(A.shape[::2], dtype=bool)
    cells = grid_cells(q_c, valid, h2, w2)
    return scatter_add(A, cells[:, None, :], h2 * w2)


def prototype_pixel_features(G, HA, p_vox, grid_shape: Tuple[int, int]) -> Tensor:
    """X[:, p] = Σ_m G[p]·HA[m, p]·P_vox[m], shaped N × d × h′ × w′."""
    G, HA, p_vox = as_tensor(G), as_tensor(HA), as_tensor(p_vox)
    N, M, D = HA.shape
    h2, w2 = grid_shape
    if G.shape != (N, D) or p_vox.shape[:2] != (N, M) or D != h2 * w2:
        raise DimensionError(
            f"prototype_pixel_features: G {G.shape}, H(A) {HA.shape}, "
            f"P_vox {p_vox.shape}, grid {grid_shape}"
        )
    weights = HA * G.reshape(N, 1, D)
    X = matmul(p_vox.swapaxes(-1, -2), weights)  # N × d × D
    return X.reshape(N, p_vox.shape[-1], h2, w2)


def _mask_matrix(masks: PseudoMaskSet, S: int) -> np.ndarray:
    """One-hot N × D × S membership of each grid cell."""
    ids = masks.ids.reshape(masks.ids.shape[0], -1)
    if ids.size and (ids.min() < 0 or ids.max() >= S):
        raise DimensionError(f"mask ids outside [0, {S})")
    return np.eye(S)[ids]


def mask_centroids(X, masks: PseudoMaskSet) -> MaskCentroids:
    X = as_tensor(X)
    N, d, h2, w2 = X.shape
    if masks.ids.shape != (N, h2, w2):
        raise DimensionError(f"mask_centroids: masks {masks.ids.shape} vs features {X.shape}")
    onehot = _mask_matrix(masks, masks.S)
    counts = onehot.sum(axis=1)  # N × S
    valid = counts > 0
    sums = matmul(X.reshape(N, d, h2 * w2), onehot)  # N × d × S
    centroids = (sums * (1.0 / np.maximum(counts, 1.0))[:, None, :]).swapaxes(-1, -2)
    return MaskCentroids(centroids, counts, valid)


def contrastive_loss(X, centroids: MaskCentroids, masks: PseudoMaskSet, tau_cls: float) -> Tensor:
    """Prototype contrastive loss summed over grid cells and views."""
    validate_positive("tau_cls", tau_cls)
    X = as_tensor(X)
    N, d, h2, w2 = X.shape
    if not centroids.valid.any():
        logger.warning("contrastive loss: every mask centroid is empty, contributing 0")
        return Tensor(0.0)

    pixels = X.reshape(N, d, h2 * w2).swapaxes(-1, -2)  # N × D × d
    cos = cosine_similarity(
        pixels.reshape(N, h2 * w2, 1, d),
        centroids.centroids.reshape(N, 1, -1, d),
    )  # N × D × S
    logits = cos * (1.0 / tau_cls)

    onehot = _mask_matrix(masks, centroids.valid.shape[1])
    own = onehot * centroids.valid[:, None, :]
    counted = own.sum(axis=-1) > 0  # skip cells whose mask has no valid centroid
    own_logit = (logits * own).sum(axis=-1)
    normalizer = logsumexp(logits, axis=-1, mask=centroids.valid[:, None, :])
    per_cell = (normalizer - own_logit) * counted.astype(np.float64)
    return per_cell.sum()
