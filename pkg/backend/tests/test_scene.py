# backend/tests/test_scene.py
import numpy as np
import pytest

from app.schemas.config import SceneConfig
from app.services.scene_service import (
    Camera,
    CameraRig,
    PlacedPrimitive,
    SceneSample,
    decode_scene,
    encode_scene,
    generate_scene,
    load_scene_set,
    look_at,
    march_rays,
    max_hits,
    project_voxels,
    render_views,
    save_scene_set,
    voxel_centers,
)
from app.utils.errors import DataError, FormatError, GenerationError, ParameterError


def _center_box_scene() -> SceneSample:
    """16×16×8 grid over [-8, 8]² × [0, 4] with one class-2 box around the origin"""
    occupancy = np.zeros((16, 16, 8), dtype=np.uint8)
    instances = np.zeros((16, 16, 8), dtype=np.int32)
    occupancy[6:10, 6:10, 0:4] = 2
    instances[6:10, 6:10, 0:4] = 1
    box = PlacedPrimitive("box", 2, (0.0, 0.0, 1.0), (2.0, 2.0, 1.0))
    return SceneSample(occupancy, instances, [box], 0, 3, (-8.0, -8.0, 0.0), (8.0, 8.0, 4.0))


# --------------------------
# generate_scene
# --------------------------


def test_generate_scene_is_deterministic(tiny_config):
    a = generate_scene(tiny_config.scene, 7)
    b = generate_scene(tiny_config.scene, 7)
    assert a.occupancy.tobytes() == b.occupancy.tobytes()
    assert a.objects == b.objects


def test_generate_scene_labels_and_partition(tiny_config):
    """Labels stay below L and every occupied voxel belongs to exactly one object"""
    scene = generate_scene(tiny_config.scene, 3)
    assert scene.occupancy.max() < tiny_config.scene.num_classes
    assert (scene.occupancy > 0).any()
    occupied = scene.occupancy > 0
    assert np.array_equal(occupied, scene.instances > 0)
    for i, prim in enumerate(scene.objects):
        assert np.all(scene.occupancy[scene.instances == i + 1] == prim.class_id)


def test_three_distinct_boxes():
    cfg = SceneConfig(
        grid=(16, 16, 16),
        num_classes=4,
        num_objects=3,
        max_objects=3,
        object_types=["box"],
        distinct_classes=True,
    )
    scene = generate_scene(cfg, 5)
    labels = set(np.unique(scene.occupancy).tolist()) - {0}
    assert labels == {1, 2, 3}


def test_empty_scene_allowed():
    cfg = SceneConfig(grid=(8, 8, 8), min_objects=0, num_objects=0, allow_empty=True)
    scene = generate_scene(cfg, 1)
    assert not scene.occupancy.any()
    assert scene.objects == []


def test_grid_below_eight_rejected():
    with pytest.raises(ValueError):
        SceneConfig(grid=(4, 8, 8))


def test_distinct_classes_unsatisfiable():
    cfg = SceneConfig(
        grid=(8, 8, 8), num_classes=2, num_objects=2, max_objects=2, distinct_classes=True
    )
    with pytest.raises(GenerationError):
        generate_scene(cfg, 0)


def test_placement_gives_up_after_retries():
    """Spheres too big to fit twice without overlap exhaust the retry budget"""
    cfg = SceneConfig(
        grid=(8, 8, 8),
        world_min=(-1.0, -1.0, 0.0),
        world_max=(1.0, 1.0, 2.0),
        num_objects=2,
        max_objects=2,
        object_types=["sphere"],
        sphere_radius=(1.0, 1.0),
        max_retries=3,
    )
    with pytest.raises(GenerationError):
        generate_scene(cfg, 0)


# --------------------------
# Cameras and rays
# --------------------------


def test_camera_rejects_non_orthonormal_rotation():
    with pytest.raises(ParameterError):
        Camera(10.0, 10.0, 4.0, 3.0, np.diag([1.0, 1.0, 1.1]), np.zeros(3), (6, 8))


def test_camera_rejects_degenerate_intrinsics():
    with pytest.raises(ParameterError):
        Camera(0.0, 10.0, 4.0, 3.0, np.eye(3), np.zeros(3), (6, 8))


def test_look_at_projects_target_to_image_center():
    camera = look_at((10.0, 0.0, 3.0), (0.0, 0.0, 1.0), 60.0, (6, 8))
    u, v, depth = camera.project(np.array([0.0, 0.0, 1.0]))
    assert u == pytest.approx(4.0)
    assert v == pytest.approx(3.0)
    assert depth > 0


def test_march_rays_hits_first_occupied_voxel():
    occupancy = np.zeros((8, 8, 8), dtype=np.uint8)
    occupancy[5, 0, 0] = 1
    occupancy[7, 0, 0] = 1
    hit, t = march_rays(
        np.array([-1.0, 0.5, 0.5]), np.array([[1.0, 0.0, 0.0]]), occupancy, (0, 0, 0), (8, 8, 8)
    )
    assert hit[0].tolist() == [5, 0, 0]
    assert t[0] == pytest.approx(6.0)


def test_march_rays_miss():
    occupancy = np.zeros((8, 8, 8), dtype=np.uint8)
    hit, t = march_rays(
        np.array([-1.0, 0.5, 0.5]), np.array([[0.0, 1.0, 0.0]]), occupancy, (0, 0, 0), (8, 8, 8)
    )
    assert hit[0].tolist() == [-1, -1, -1]
    assert np.isinf(t[0])


# --------------------------
# render_views
# --------------------------


def test_render_center_pixel_carries_class_embedding():
    scene = _center_box_scene()
    camera = look_at((14.0, 0.0, 6.0), (0.0, 0.0, 1.0), 40.0, (7, 9))
    fmaps, masks = render_views(scene, CameraRig([camera]), d=5, noise_sigma=0.0, seed=0)
    center = fmaps.features[0, :3, 3, 4]
    assert center.tolist() == [0.0, 0.0, 1.0]
    assert masks.ids[0, 3, 4] == 1
    assert 0.0 < fmaps.features[0, 3, 3, 4] < 1.0


def test_render_empty_scene_is_background(tiny_rig):
    scene = _center_box_scene()
    scene.occupancy[:] = 0
    scene.instances[:] = 0
    scene.objects = []
    fmaps, masks = render_views(scene, tiny_rig, d=5, noise_sigma=0.0, seed=0)
    assert not masks.ids.any()
    assert np.all(fmaps.features[:, 0] == 1.0)
    assert np.all(fmaps.features[:, 3] == 1.0)


def test_render_is_deterministic(tiny_scenes):
    scene, rig = tiny_scenes[0]
    a, _ = render_views(scene, rig, d=6, noise_sigma=0.1, seed=9)
    b, _ = render_views(scene, rig, d=6, noise_sigma=0.1, seed=9)
    c, _ = render_views(scene, rig, d=6, noise_sigma=0.1, seed=10)
    assert np.array_equal(a.features, b.features)
    assert not np.array_equal(a.features, c.features)


def test_render_noise_fills_only_the_spare_channels(tiny_scenes):
    scene, rig = tiny_scenes[0]
    clean, _ = render_views(scene, rig, d=7, noise_sigma=0.0, seed=3)
    noisy, _ = render_views(scene, rig, d=7, noise_sigma=0.5, seed=3)
    L = scene.num_classes
    assert np.array_equal(clean.features[:, : L + 1], noisy.features[:, : L + 1])
    assert not clean.features[:, L + 1 :].any()
    assert noisy.features[:, L + 1 :].std() > 0.1


def test_render_masks_partition_pixels(tiny_scenes):
    scene, rig = tiny_scenes[0]
    fmaps, masks = render_views(scene, rig, d=6, noise_sigma=0.0, seed=0)
    assert masks.ids.shape == (rig.n,) + rig.image_size
    assert masks.ids.min() >= 0
    assert masks.ids.max() < masks.num_ids
    assert sum(masks.counts(0)) == rig.image_size[0] * rig.image_size[1]
    assert fmaps.shape == (rig.n, 6) + rig.image_size


def test_render_needs_room_for_classes_and_depth(tiny_scenes):
    scene, rig = tiny_scenes[0]
    with pytest.raises(ParameterError):
        render_views(scene, rig, d=scene.num_classes, noise_sigma=0.0, seed=0)


# --------------------------
# project_voxels
# --------------------------


def test_project_voxels_hits_lie_in_image(tiny_rig):
    hits = project_voxels(tiny_rig, (4, 4, 2), (-8.0, -8.0, 0.0), (8.0, 8.0, 4.0))
    assert hits.K == max_hits((4, 4, 2)) == 29
    assert hits.n_views == tiny_rig.n
    q = hits.q_c[hits.valid]
    assert np.all((q >= 0.0) & (q < 1.0))
    assert np.all(hits.depth[hits.valid] > 0)
    assert np.all(hits.index[~hits.valid] == -1)
    for view in range(hits.n_views):
        chosen = hits.index[view][hits.valid[view]]
        assert len(set(chosen.tolist())) == chosen.size


def test_project_voxels_truncates_to_k(tiny_rig):
    args = (tiny_rig, (4, 4, 2), (-8.0, -8.0, 0.0), (8.0, 8.0, 4.0))
    full = project_voxels(*args)
    hits = project_voxels(*args, K=3)
    assert hits.index.shape == (tiny_rig.n, 3)
    for view in range(tiny_rig.n):
        kept = hits.index[view][hits.valid[view]].tolist()
        assert kept == sorted(kept)
        depths = dict(zip(full.index[view].tolist(), full.depth[view].tolist()))
        seen = full.index[view][full.valid[view]].tolist()
        dropped = [depths[i] for i in seen if i not in kept]
        if dropped:
            assert len(kept) == 3
            assert max(depths[i] for i in kept) <= min(dropped)


def test_unproject_inverts_projection(tiny_rig):
    extents, lo, hi = (4, 4, 2), (-8.0, -8.0, 0.0), (8.0, 8.0, 4.0)
    hits = project_voxels(tiny_rig, extents, lo, hi)
    centers = voxel_centers(extents, lo, hi).reshape(-1, 3)
    assert hits.valid.any()
    for view, camera in enumerate(tiny_rig.cameras):
        ok = hits.valid[view]
        points = camera.unproject(hits.q_c[view][ok], hits.depth[view][ok])
        assert np.abs(points - centers[hits.index[view][ok]]).max() <= 1e-9


def test_project_voxels_nothing_in_view():
    """A camera facing away from the grid yields no valid hit queries"""
    camera = look_at((30.0, 0.0, 2.0), (40.0, 0.0, 2.0), 60.0, (6, 8))
    hits = project_voxels(CameraRig([camera]), (4, 4, 2), (-8.0, -8.0, 0.0), (8.0, 8.0, 4.0))
    assert not hits.valid.any()


# --------------------------
# POSC files
# --------------------------


def test_scene_file_round_trip(tmp_path, tiny_scenes):
    scene, rig = tiny_scenes[0]
    save_scene_set(tmp_path, [scene], rig)
    [(loaded, loaded_rig)] = load_scene_set(tmp_path)
    assert np.array_equal(loaded.occupancy, scene.occupancy)
    assert np.array_equal(loaded.instances, scene.instances)
    assert loaded.objects == scene.objects
    assert loaded_rig.fingerprint() == rig.fingerprint()


def test_scene_file_bad_magic():
    with pytest.raises(FormatError):
        decode_scene(b"XXXX" + bytes(40))


def test_scene_file_truncated(tiny_scenes):
    scene, rig = tiny_scenes[0]
    blob = encode_scene(scene, rig)
    with pytest.raises(FormatError):
        decode_scene(blob[:-10])
    with pytest.raises(FormatError):
        decode_scene(blob[:100])


def test_scene_file_label_out_of_range(tiny_scenes):
    scene, rig = tiny_scenes[0]
    scene.occupancy[0, 0, 0] = scene.num_classes
    with pytest.raises(DataError):
        decode_scene(encode_scene(scene, rig))


def test_missing_scene_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_scene_set(tmp_path / "absent")


def test_project_voxels_principal_point_and_culling():
    """The on-axis center at depth 1 lands on the principal point; cells behind are culled"""
    camera = look_at((0.0, 0.0, 0.0), (1.0, 0.0, 0.0), 90.0, (4, 4))
    hits = project_voxels(CameraRig([camera]), (8, 8, 8), (-1.5, -0.5, -0.5), (6.5, 7.5, 7.5))
    chosen = hits.index[0][hits.valid[0]].tolist()
    on_axis = 2 * 64
    assert on_axis in chosen
    slot = chosen.index(on_axis)
    assert hits.q_c[0, slot].tolist() == pytest.approx([0.5, 0.5])
    assert hits.depth[0, slot] == pytest.approx(1.0)
    assert 0 not in chosen
    assert 64 not in chosen
