# backend/tests/test_decoder.py
import numpy as np
import pytest

from app.schemas.config import AugmentationPlan, AugmentationSpec
from app.services.decoder_service import (
    DecoderParams,
    SpatialTransform,
    UpsampleStage,
    apply_augmentation,
    apply_branch,
    branch_disagreement,
    consistency_loss,
    conv_transpose3d,
    decode_branch,
    decode_branches,
    init_decoder,
    sharpen,
)
from app.services.numeric import MlpParams, Tensor
from app.utils.errors import DimensionError, ParameterError


def _pointwise_decoder(rng, d: int = 3, L: int = 4) -> DecoderParams:
    """1×1×1 kernels only, so every stage commutes with flips"""
    stages = [
        UpsampleStage(
            Tensor(rng.normal(size=(d, d, 1, 1, 1))), Tensor(rng.normal(size=d)), (1, 1, 1)
        )
        for _ in range(2)
    ]
    return DecoderParams(stages, MlpParams.initialize([d, L], ["identity"], rng))


def _with_kernels(params: DecoderParams, transform: SpatialTransform) -> DecoderParams:
    stages = [
        UpsampleStage(transform.apply_to_kernel(s.kernel), s.bias, s.stride) for s in params.stages
    ]
    return DecoderParams(stages, params.classifier)


# --------------------------
# Augmentations
# --------------------------


def test_zero_dropout_is_identity(rng):
    Q = Tensor(rng.normal(size=(2, 3, 3, 2)))
    out, inverse = apply_augmentation(Q, AugmentationSpec(kind="random_dropout", p=0.0), 0)
    assert np.array_equal(out.numpy(), Q.numpy())
    assert inverse.is_identity


def test_zero_noise_is_identity(rng):
    Q = Tensor(rng.normal(size=(2, 3, 3, 2)))
    out, _ = apply_augmentation(Q, AugmentationSpec(kind="gaussian_noise", sigma=0.0), 0)
    assert np.array_equal(out.numpy(), Q.numpy())


def test_dropout_zeroes_whole_entries(rng):
    Q = Tensor(rng.normal(size=(2, 4, 4, 2)) + 10.0)
    out, _ = apply_augmentation(Q, AugmentationSpec(kind="random_dropout", p=0.5), 3)
    data = out.numpy()
    dropped = data == 0.0
    assert dropped.any() and not dropped.all()
    assert np.array_equal(data[~dropped], Q.numpy()[~dropped])


def test_flip_twice_is_identity(rng):
    Q = rng.normal(size=(2, 3, 4, 2))
    spec = AugmentationSpec(kind="flip", axes=["x", "z"])
    once, inverse = apply_augmentation(Q, spec, 0)
    twice, _ = apply_augmentation(once, spec, 0)
    assert np.array_equal(twice.numpy(), Q)
    assert np.array_equal(inverse.apply(once).numpy(), Q)


def test_transpose_needs_equal_extents(rng):
    spec = AugmentationSpec(kind="transpose", axes=["x", "z"])
    with pytest.raises(DimensionError):
        apply_augmentation(rng.normal(size=(2, 3, 3, 2)), spec, 0)


def test_branch_inverse_undoes_both_steps(rng):
    Q = rng.normal(size=(2, 3, 3, 2))
    specs = [
        AugmentationSpec(kind="transpose", axes=["x", "y"]),
        AugmentationSpec(kind="flip", axes=["x"]),
    ]
    out, inverse = apply_branch(Q, specs, 0)
    assert not np.array_equal(out.numpy(), Q)
    assert np.array_equal(inverse.apply(out).numpy(), Q)


# --------------------------
# Transposed convolution
# --------------------------


def test_single_cell_spreads_over_kernel():
    out = conv_transpose3d(np.full((1, 1, 1, 1), 2.5), np.ones((1, 1, 2, 2, 2)))
    assert out.shape == (1, 2, 2, 2)
    assert np.all(out.numpy() == 2.5)


def test_two_by_two_expansion():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    kernel = np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(1, 1, 2, 2, 1)
    out = conv_transpose3d(x, kernel).numpy()[0, :, :, 0]
    assert out.tolist() == [[1.0, 2.0, 0.0], [3.0, 5.0, 2.0], [0.0, 3.0, 4.0]]


def test_delta_kernel_is_identity_on_overlap(rng):
    x = rng.normal(size=(2, 3, 3, 2))
    kernel = np.zeros((2, 2, 2, 2, 2))
    kernel[0, 0, 0, 0, 0] = kernel[1, 1, 0, 0, 0] = 1.0
    out = conv_transpose3d(x, kernel).numpy()
    assert out.shape == (2, 4, 4, 3)
    assert np.array_equal(out[:, :3, :3, :2], x)
    assert not out[:, 3].any()


def test_stride_two_tiles_blocks():
    x = np.arange(1.0, 3.0).reshape(1, 2, 1, 1)
    out = conv_transpose3d(x, np.ones((1, 1, 2, 2, 2)), (2, 2, 2)).numpy()
    assert out.shape == (1, 4, 2, 2)
    assert np.all(out[0, :2] == 1.0)
    assert np.all(out[0, 2:] == 2.0)


def test_conv_transpose_shape_errors(rng):
    with pytest.raises(DimensionError):
        conv_transpose3d(rng.normal(size=(2, 2, 2, 2)), np.ones((3, 1, 1, 1, 1)))
    with pytest.raises(ParameterError):
        conv_transpose3d(rng.normal(size=(1, 2, 2, 2)), np.ones((1, 1, 1, 1, 1)), (0, 1, 1))


# --------------------------
# Branch decoding
# --------------------------


def test_identity_branch_matches_plain_decode(tiny_config, rng):
    params = init_decoder(tiny_config.model, 3, rng)
    Q = rng.normal(size=(6, 2, 2, 2))
    [branch] = decode_branches(Q, AugmentationPlan(branches=[[]]), params, 0, (8, 8, 8))
    plain = decode_branch(Q, SpatialTransform(), params, (8, 8, 8))
    assert np.array_equal(branch.numpy(), plain.numpy())
    assert np.allclose(branch.numpy().sum(axis=0), 1.0, atol=1e-12)


def test_flipped_branch_with_pointwise_kernels_matches_identity(rng):
    params = _pointwise_decoder(rng)
    Q = rng.normal(size=(3, 3, 4, 2))
    flip = SpatialTransform([("flip", (0, 1))])
    realigned = decode_branch(flip.apply(Tensor(Q)), flip.inverse(), params)
    plain = decode_branch(Q, SpatialTransform(), params)
    assert np.allclose(realigned.numpy(), plain.numpy(), atol=1e-12)


@pytest.mark.parametrize(
    "transform",
    [SpatialTransform([("flip", (0,))]), SpatialTransform([("transpose", (0, 1))])],
)
def test_realigned_branch_matches_transformed_kernels(tiny_config, rng, transform):
    """Re-aligned branches decode like transformed kernels, not like branch 0"""
    params = init_decoder(tiny_config.model, 3, rng)
    Q = rng.normal(size=(6, 2, 2, 2))
    realigned = decode_branch(transform.apply(Tensor(Q)), transform.inverse(), params).numpy()
    expected = decode_branch(Q, SpatialTransform(), _with_kernels(params, transform)).numpy()
    branch0 = decode_branch(Q, SpatialTransform(), params).numpy()
    assert np.allclose(realigned, expected, atol=1e-10)
    assert np.abs(realigned - branch0).max() > 1e-6


def test_decode_checks_output_extent(tiny_config, rng):
    params = init_decoder(tiny_config.model, 3, rng)
    with pytest.raises(DimensionError):
        decode_branch(rng.normal(size=(6, 2, 2, 2)), SpatialTransform(), params, (4, 4, 4))


# --------------------------
# Sharpening and consistency
# --------------------------


def test_sharpen_unit_temperature_is_identity():
    v = np.array([0.1, 0.6, 0.3])
    assert np.allclose(sharpen(v, 1.0), v, atol=1e-12)


def test_sharpen_squares_and_renormalizes():
    assert sharpen(np.array([0.8, 0.2]), 0.5) == pytest.approx([0.9412, 0.0588], abs=1e-4)


def test_sharpen_keeps_one_hot():
    assert sharpen(np.array([0.0, 1.0, 0.0]), 0.3).tolist() == [0.0, 1.0, 0.0]


def test_sharpen_rejects_non_distributions():
    with pytest.raises(ParameterError):
        sharpen(np.array([-0.1, 1.1]), 0.5)
    with pytest.raises(ParameterError):
        sharpen(np.array([0.5, 0.5]), 0.0)


def test_consistency_at_consensus_is_zero(rng):
    v = rng.dirichlet(np.ones(3), size=(2, 2, 2)).transpose(3, 0, 1, 2)
    assert consistency_loss([v, v, v], 1.0).item() == pytest.approx(0.0, abs=1e-12)


def test_consistency_two_opposite_branches():
    """(1, 0) and (0, 1) average to (0.5, 0.5): loss (0.5 + 0.5) / 2"""
    a = np.array([1.0, 0.0]).reshape(2, 1, 1, 1)
    b = np.array([0.0, 1.0]).reshape(2, 1, 1, 1)
    assert consistency_loss([a, b], 1.0).item() == pytest.approx(0.5)


def test_consistency_ignores_branch_order(rng):
    branches = [rng.dirichlet(np.ones(3), size=(2, 2, 1)).transpose(3, 0, 1, 2) for _ in range(3)]
    forward = consistency_loss(branches, 0.3).item()
    backward = consistency_loss(branches[::-1], 0.3).item()
    assert forward == pytest.approx(backward, abs=1e-12)


def test_consistency_target_shape(rng):
    v = np.full((2, 1, 1, 1), 0.5)
    with pytest.raises(DimensionError):
        consistency_loss([v, v], 0.3, target=np.full((2, 2, 1, 1), 0.5))


def test_consistency_branch_shapes_must_agree():
    with pytest.raises(DimensionError):
        consistency_loss([np.ones((2, 1, 1, 1)), np.ones((2, 2, 1, 1))], 0.3)


def test_disagreement():
    a = np.array([1.0, 0.0]).reshape(2, 1, 1, 1)
    b = np.array([0.0, 1.0]).reshape(2, 1, 1, 1)
    assert branch_disagreement([a]) == 0.0
    assert branch_disagreement([a, b]) == pytest.approx(2.0)
