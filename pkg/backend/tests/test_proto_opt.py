# backend/tests/test_proto_opt.py
import math

import numpy as np
import pytest

from app.services.clustering_service import PseudoMaskSet
from app.services.numeric import Tensor
from app.services.proto_opt_service import (
    MaskCentroids,
    contrastive_loss,
    map_affinity_to_grid,
    mask_centroids,
    prototype_pixel_features,
)
from app.utils.errors import DimensionError, ParameterError


def _masks(ids, S) -> PseudoMaskSet:
    return PseudoMaskSet(np.asarray(ids, dtype=np.int64), S, "ground-truth")


# --------------------------
# map_affinity_to_grid
# --------------------------


def test_affinity_lands_in_floor_cells():
    A = np.array([[[0.3, 0.7]]])
    q_c = np.array([[[0.1, 0.1], [0.6, 0.1]]])
    grid = map_affinity_to_grid(A, q_c, 2, 2).numpy()
    assert grid.reshape(2, 2).tolist() == [[0.3, 0.7], [0.0, 0.0]]


def test_affinity_outside_grid_is_dropped():
    A = np.array([[[0.3, 0.9]]])
    q_c = np.array([[[0.1, 0.1], [1.5, 0.2]]])
    grid = map_affinity_to_grid(A, q_c, 2, 2).numpy()
    assert grid.reshape(-1).tolist() == [0.3, 0.0, 0.0, 0.0]


def test_affinity_in_same_cell_adds_up():
    A = np.array([[[0.25, 0.5]]])
    q_c = np.array([[[0.1, 0.6], [0.2, 0.9]]])
    grid = map_affinity_to_grid(A, q_c, 2, 2).numpy()
    assert grid.reshape(-1).tolist() == [0.0, 0.0, 0.75, 0.0]


def test_padded_slots_are_dropped():
    A = np.array([[[0.3, 0.7]]])
    q_c = np.array([[[0.1, 0.1], [0.6, 0.1]]])
    grid = map_affinity_to_grid(A, q_c, 2, 2, valid=np.array([[True, False]])).numpy()
    assert grid.reshape(-1).tolist() == [0.3, 0.0, 0.0, 0.0]


def test_affinity_coordinate_mismatch():
    with pytest.raises(DimensionError):
        map_affinity_to_grid(np.ones((1, 2, 3)), np.zeros((1, 2, 2)), 2, 2)


# --------------------------
# prototype_pixel_features
# --------------------------


def test_null_salience_gives_zero_features(rng):
    X = prototype_pixel_features(
        np.zeros((1, 4)), rng.random((1, 3, 4)), rng.normal(size=(1, 3, 2)), (2, 2)
    )
    assert X.shape == (1, 2, 2, 2)
    assert not X.numpy().any()


def test_pixel_features_scalar_case():
    """G=[0.5, 1.0], H(A)=[[0.2, 0.4]], P_vox=[3] gives [0.3, 1.2]"""
    X = prototype_pixel_features([[0.5, 1.0]], [[[0.2, 0.4]]], [[[3.0]]], (1, 2))
    assert X.numpy().reshape(-1) == pytest.approx([0.3, 1.2])


def test_pixel_features_are_linear_in_prototypes(rng):
    G = rng.random((1, 4))
    HA = rng.random((1, 2, 4))
    p_vox = rng.normal(size=(1, 2, 3))
    both = prototype_pixel_features(G, HA, p_vox, (2, 2)).numpy()
    first = prototype_pixel_features(G, HA[:, :1], p_vox[:, :1], (2, 2)).numpy()
    second = prototype_pixel_features(G, HA[:, 1:], p_vox[:, 1:], (2, 2)).numpy()
    assert np.allclose(both, first + second, atol=1e-12)


def test_pixel_features_shape_checks(rng):
    with pytest.raises(DimensionError):
        prototype_pixel_features(
            rng.random((1, 4)), rng.random((1, 2, 4)), rng.random((1, 2, 3)), (3, 3)
        )


# --------------------------
# Centroids and contrastive loss
# --------------------------


def test_single_mask_centroid_is_global_mean(rng):
    X = rng.normal(size=(2, 3, 2, 2))
    c = mask_centroids(X, _masks(np.zeros((2, 2, 2)), 1))
    assert np.allclose(c.centroids.numpy()[:, 0], X.reshape(2, 3, -1).mean(axis=-1))
    assert c.valid.all()


def test_two_point_centroid():
    X = np.array([1.0, 3.0, 10.0]).reshape(1, 1, 1, 3)
    c = mask_centroids(X, _masks([[[0, 0, 1]]], 2))
    assert c.centroids.numpy()[0, :, 0].tolist() == [2.0, 10.0]
    assert c.counts[0].tolist() == [2.0, 1.0]


def test_singleton_masks_return_pixels(rng):
    X = rng.normal(size=(1, 2, 2, 3))
    c = mask_centroids(X, _masks(np.arange(6).reshape(1, 2, 3), 6))
    assert np.allclose(c.centroids.numpy()[0], X[0].reshape(2, -1).T)


def test_empty_mask_is_invalid():
    X = np.ones((1, 1, 1, 2))
    c = mask_centroids(X, _masks([[[0, 0]]], 3))
    assert c.valid[0].tolist() == [True, False, False]


def test_contrastive_single_mask_is_zero(rng):
    X = rng.normal(size=(1, 3, 2, 2))
    masks = _masks(np.zeros((1, 2, 2)), 1)
    loss = contrastive_loss(X, mask_centroids(X, masks), masks, 0.3)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_contrastive_own_centroid_collinear():
    """Each cell matches its own centroid and is orthogonal to the other"""
    X = np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(1, 2, 1, 2)
    masks = _masks([[[0, 1]]], 2)
    loss = contrastive_loss(X, mask_centroids(X, masks), masks, 0.3)
    per_cell = math.log(1.0 + math.exp(-1.0 / 0.3))
    assert per_cell == pytest.approx(0.0351, abs=1e-4)
    assert loss.item() == pytest.approx(2 * per_cell, abs=1e-12)


def test_contrastive_orthogonal_to_both():
    X = np.array([0.0, 0.0, 1.0]).reshape(1, 3, 1, 1)
    centroids = MaskCentroids(
        Tensor(np.array([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]])),
        np.array([[1.0, 1.0]]),
        np.array([[True, True]]),
    )
    loss = contrastive_loss(X, centroids, _masks([[[0]]], 2), 0.7)
    assert loss.item() == pytest.approx(math.log(2.0), abs=1e-12)


def test_contrastive_rejects_bad_temperature(rng):
    X = rng.normal(size=(1, 2, 1, 2))
    masks = _masks([[[0, 1]]], 2)
    with pytest.raises(ParameterError):
        contrastive_loss(X, mask_centroids(X, masks), masks, 0.0)
