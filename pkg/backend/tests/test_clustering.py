# backend/tests/test_clustering.py
import numpy as np
import pytest

from app.services.clustering_service import (
    generate_pseudo_masks,
    init_prototypes,
    iterate_prototypes,
    resize_nearest,
)
from app.services.scene_service import FeatureMaps, GroundTruthMasks
from app.utils.errors import ParameterError


def _quadrant_map() -> np.ndarray:
    """1 × 3 × 4 × 4 map with a different direction in each quadrant"""
    fmap = np.zeros((1, 3, 4, 4))
    fmap[0, :, :2, :2] = np.array([1.0, 0.0, 0.0])[:, None, None]
    fmap[0, :, :2, 2:] = np.array([0.0, 1.0, 0.0])[:, None, None]
    fmap[0, :, 2:, :2] = np.array([0.0, 0.0, 1.0])[:, None, None]
    fmap[0, :, 2:, 2:] = np.array([1.0, 1.0, 0.0])[:, None, None]
    return fmap


# --------------------------
# Prototype initialization
# --------------------------


def test_constant_map_gives_constant_prototypes():
    fmap = np.full((2, 3, 5, 6), 0.25)
    protos = init_prototypes(fmap, 2)
    assert protos.grid_shape == (3, 3)
    assert protos.features.shape == (2, 9, 3)
    assert np.allclose(protos.features.numpy(), 0.25)


def test_unit_ratio_copies_the_map(rng):
    fmap = rng.normal(size=(3, 4, 5))
    protos = init_prototypes(fmap, 1)
    assert protos.M == 20
    assert np.allclose(protos.features.numpy(), fmap.reshape(3, -1).T)


def test_block_means():
    """1..16 on a 4×4 map averaged over 2×2 blocks"""
    fmap = np.arange(1.0, 17.0).reshape(1, 4, 4)
    protos = init_prototypes(fmap, 2)
    assert protos.features.numpy()[:, 0].tolist() == [3.5, 5.5, 11.5, 13.5]


def test_init_rejects_bad_ratio():
    with pytest.raises(ParameterError):
        init_prototypes(np.ones((1, 4, 4)), 0)


# --------------------------
# Prototype iteration
# --------------------------


def test_zero_iterations_is_identity(rng):
    fmap = rng.normal(size=(2, 3, 4, 4))
    protos = init_prototypes(fmap, 2)
    assert iterate_prototypes(fmap, protos, 0, 0.07) is protos


def test_two_regions_hold_their_values():
    """Prototypes of two grid-aligned constant regions settle on the region values"""
    fmap = np.zeros((1, 2, 4, 8))
    fmap[0, 0, :, :4] = 1.0
    fmap[0, 1, :, 4:] = 1.0
    protos = iterate_prototypes(fmap, init_prototypes(fmap, 2), 6, 0.05)
    values = protos.features.numpy()[0].reshape(2, 4, 2)
    assert np.allclose(values[:, :2], [1.0, 0.0], atol=1e-6)
    assert np.allclose(values[:, 2:], [0.0, 1.0], atol=1e-6)


def test_iteration_is_per_view(rng):
    """Swapping the views swaps the refined prototypes"""
    fmap = rng.normal(size=(2, 3, 4, 6))
    protos = iterate_prototypes(fmap, init_prototypes(fmap, 2), 3, 0.1).features.numpy()
    swapped = fmap[::-1].copy()
    protos_swapped = iterate_prototypes(swapped, init_prototypes(swapped, 2), 3, 0.1)
    assert np.allclose(protos_swapped.features.numpy(), protos[::-1], atol=1e-12)


def test_iteration_rejects_bad_parameters(rng):
    fmap = rng.normal(size=(1, 3, 4, 4))
    protos = init_prototypes(fmap, 2)
    with pytest.raises(ParameterError):
        iterate_prototypes(fmap, protos, -1, 0.07)
    with pytest.raises(ParameterError):
        iterate_prototypes(fmap, protos, 2, 0.0)


# --------------------------
# Pseudo masks
# --------------------------


def test_ground_truth_masks_on_empty_scene():
    masks = GroundTruthMasks(np.zeros((2, 6, 8), dtype=np.int64), 1)
    pseudo = generate_pseudo_masks(masks, (3, 4), 4, "ground-truth", 0)
    assert pseudo.S == 1
    assert pseudo.shape == (3, 4)
    assert not pseudo.ids.any()


def test_ground_truth_masks_pass_through_at_target_size(rng):
    ids = rng.integers(0, 3, size=(2, 4, 5))
    pseudo = generate_pseudo_masks(GroundTruthMasks(ids, 3), (4, 5), 2, "ground-truth", 0)
    assert np.array_equal(pseudo.ids, ids)
    assert np.array_equal(resize_nearest(ids, (4, 5)), ids)


def test_nearest_resize_halves():
    ids = np.arange(16).reshape(4, 4)
    assert resize_nearest(ids, (2, 2)).tolist() == [[5, 7], [13, 15]]


def test_grid_kmeans_recovers_quadrants():
    pseudo = generate_pseudo_masks(_quadrant_map(), (4, 4), 4, "grid-kmeans", 0)
    ids = pseudo.ids[0]
    assert pseudo.S == 4
    quadrants = [ids[:2, :2], ids[:2, 2:], ids[2:, :2], ids[2:, 2:]]
    assert all(len(np.unique(q)) == 1 for q in quadrants)
    assert len({int(q[0, 0]) for q in quadrants}) == 4


def test_grid_kmeans_accepts_feature_maps():
    fmaps = FeatureMaps(_quadrant_map(), 0.0)
    pseudo = generate_pseudo_masks(fmaps, (4, 4), 4, "grid-kmeans", 0)
    assert pseudo.ids.shape == (1, 4, 4)
    assert pseudo.generator == "grid-kmeans"


def test_pseudo_mask_parameter_errors():
    fmaps = FeatureMaps(_quadrant_map(), 0.0)
    with pytest.raises(ParameterError):
        generate_pseudo_masks(fmaps, (4, 4), 4, "sam", 0)
    with pytest.raises(ParameterError):
        generate_pseudo_masks(fmaps, (2, 2), 5, "grid-kmeans", 0)
    with pytest.raises(ParameterError):
        generate_pseudo_masks(fmaps, (4, 4), 4, "ground-truth", 0)
