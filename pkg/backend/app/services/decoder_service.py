"""
Module: services.decoder_service
--------------------------------

Multi-perspective occupancy decoding.

The encoded query grid is copied into several branches: branch 0 untouched,
the others perturbed by feature-level augmentations (random dropout,
Gaussian noise) or spatial ones (axis transpose, flips). Every branch is
upsampled by the same transposed 3D convolution stages, spatially re-aligned
to the canonical frame, classified per cell and turned into a class
distribution. A consistency loss pulls each branch toward the sharpened
branch average.

Key Components:
- apply_augmentation / SpatialTransform: augmentations with the exact
  inverse of their spatial part.
- conv_transpose3d: transposed convolution primitive, kernel laid out as
  (C_in, C_out, kx, ky, kz), output extent (in − 1)·stride + kernel.
- decode_branch / decode_branches: upsample, re-align, classify, softmax.
- sharpen, consistency_loss, branch_disagreement.

Tensors are channel-first: (C, x, y, z) for features, (L, H, W, Z) for
class distributions.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.schemas.config import AugmentationPlan, AugmentationSpec, ModelConfig
from app.services.numeric import (
    MlpParams,
    Tensor,
    as_tensor,
    custom_op,
    mlp_forward,
    softmax_with_temperature,
)
from app.utils.errors import DimensionError, ParameterError
from app.utils.helpers import derive_seed, make_rng
from app.utils.validators import validate_axes, validate_positive, validate_range

logger = logging.getLogger(__name__)


# --------------------------
# Spatial transforms
# --------------------------


@dataclass
class SpatialTransform:
    """A sequence of flips and axis swaps over the spatial axes (x=0, y=1, z=2)."""

    ops: List[Tuple[str, Tuple[int, ...]]] = field(default_factory=list)

    @property
    def is_identity(self) -> bool:
        return not self.ops

    def apply(self, x: Tensor) -> Tensor:
        """Apply to a channel-first tensor (C, x, y, z)."""
        for kind, axes in self.ops:
            x = _spatial_op(x, kind, axes)
        return x

    def inverse(self) -> "SpatialTransform":
        return SpatialTransform(list(reversed(self.ops)))

    def then(self, other: "SpatialTransform") -> "SpatialTransform":
        return SpatialTransform(self.ops + other.ops)

    def apply_to_kernel(self, kernel) -> Tensor:
        """The kernel whose convolution matches transform-convolve-untransform."""
        kernel = as_tensor(kernel)
        for kind, axes in reversed(self.ops):
            shifted = tuple(a + 2 for a in axes)
            if kind == "flip":
                kernel = kernel.flip(shifted)
            else:
                kernel = kernel.swapaxes(*shifted)
        return kernel


def _spatial_op(x: Tensor, kind: str, axes: Tuple[int, ...]) -> Tensor:
    shifted = tuple(a + 1 for a in axes)
    if kind == "flip":
        return x.flip(shifted)
    return x.swapaxes(*shifted)


# --------------------------
# Augmentations
# --------------------------


def apply_augmentation(
    Q, spec: AugmentationSpec, seed: int
) -> Tuple[Tensor, SpatialTransform]:
    """Augment a (d, h, w, z) query grid; returns it with the inverse spatial transform."""
    Q = as_tensor(Q)
    if Q.ndim != 4:
        raise DimensionError(f"apply_augmentation expects (d, h, w, z), got {Q.shape}")
    if spec.kind == "random_dropout":
        validate_range("dropout p", spec.p, 0.0, 1.0, high_inclusive=False)
        if spec.p == 0:
            return Q, SpatialTransform()
        keep = make_rng(seed, "augment", spec.kind).random(Q.shape) >= spec.p
        return Q * keep.astype(np.float64), SpatialTransform()
    if spec.kind == "gaussian_noise":
        if spec.sigma < 0:
            raise ParameterError(f"sigma must be >= 0, got {spec.sigma}")
        scale = spec.sigma * float(Q.data.std())
        if scale == 0:
            return Q, SpatialTransform()
        noise = make_rng(seed, "augment", spec.kind).normal(0.0, scale, Q.shape)
        return Q + noise, SpatialTransform()

    axes = validate_axes(spec.axes)
    if spec.kind == "transpose":
        if len(axes) != 2:
            raise ParameterError(f"transpose needs two axes, got {spec.axes}")
        if Q.shape[axes[0] + 1] != Q.shape[axes[1] + 1]:
            raise DimensionError(
                f"transpose{tuple(spec.axes)} needs equal extents, grid is {Q.shape[1:]}"
            )
        transform = SpatialTransform([("transpose", axes)])
    elif spec.kind == "flip":
        transform = SpatialTransform([("flip", axes)])
    else:
        raise ParameterError(f"unknown augmentation kind {spec.kind!r}")
    return transform.apply(Q), transform.inverse()


def apply_branch(
    Q, specs: Sequence[AugmentationSpec], seed: int
) -> Tuple[Tensor, SpatialTransform]:
    """Chain up to two augmentations; the returned inverse undoes them in reverse."""
    inverse = SpatialTransform()
    for j, spec in enumerate(specs):
        Q, step_inverse = apply_augmentation(Q, spec, derive_seed(seed, "spec", j))
        inverse = step_inverse.then(inverse)
    return as_tensor(Q), inverse


# --------------------------
# Transposed convolution
# --------------------------


def conv_transpose3d(x, kernel, stride: Sequence[int] = (1, 1, 1), bias=None) -> Tensor:
    """Transposed 3D convolution of x (C_in, h, w, z) with kernel (C_in, C_out, kx, ky, kz)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    stride = tuple(int(s) for s in stride)
    if len(stride) != 3 or min(stride) < 1:
        raise ParameterError(f"stride must be three integers >= 1, got {stride}")
    if x.ndim != 4 or kernel.ndim != 5 or kernel.shape[0] != x.shape[0]:
        raise DimensionError(
            f"conv_transpose3d: input {x.shape} does not match kernel {kernel.shape}"
        )
    c_out = kernel.shape[1]
    k = kernel.shape[2:]
    extent = tuple((n - 1) * s + kk for n, s, kk in zip(x.shape[1:], stride, k))

    def window(offset):
        return (slice(None),) + tuple(
            slice(o, o + (n - 1) * s + 1, s) for o, n, s in zip(offset, x.shape[1:], stride)
        )

    offsets = list(itertools.product(*(range(kk) for kk in k)))
    # (C_out, kx, ky, kz, h, w, z): every kernel tap applied to every input cell
    taps = np.tensordot(kernel.data, x.data, axes=([0], [0]))
    out = np.zeros((c_out,) + extent)
    for offset in offsets:
        out[window(offset)] += taps[(slice(None),) + offset]

    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise DimensionError(f"conv_transpose3d: bias {bias.shape} for {c_out} channels")
        out += bias.data[:, None, None, None]
        parents.append(bias)

    def backward(g):
        parts = np.empty(taps.shape)
        for offset in offsets:
            parts[(slice(None),) + offset] = g[window(offset)]
        g_x = np.tensordot(kernel.data, parts, axes=([1, 2, 3, 4], [0, 1, 2, 3]))
        g_k = np.tensordot(x.data, parts, axes=([1, 2, 3], [4, 5, 6]))
        grads = [g_x, g_k]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2, 3)))
        return grads

    return custom_op(out, parents, backward, "conv_transpose3d")


# --------------------------
# Decoding
# --------------------------


@dataclass
class UpsampleStage:
    kernel: Tensor
    bias: Tensor
    stride: Tuple[int, int, int]


@dataclass
class DecoderParams:
    stages: List[UpsampleStage]
    classifier: MlpParams  # d → L

    def parameters(self) -> List[Tensor]:
        tensors = [t for s in self.stages for t in (s.kernel, s.bias)]
        return tensors + self.classifier.parameters()


def init_decoder(model: ModelConfig, num_classes: int, rng: np.random.Generator) -> DecoderParams:
    stages = []
    channels = model.d
    for stage in model.decoder_stages:
        out_channels = stage.out_channels or channels
        fan_in = channels * max(1.0, np.prod(stage.kernel) / np.prod(stage.stride))
        kernel = rng.normal(0.0, np.sqrt(2.0 / fan_in), (channels, out_channels) + stage.kernel)
        stages.append(
            UpsampleStage(
                Tensor(kernel, requires_grad=True),
                Tensor(np.zeros(out_channels), requires_grad=True),
                stage.stride,
            )
        )
        channels = out_channels
    classifier = MlpParams.initialize([channels, num_classes], ["identity"], rng)
    return DecoderParams(stages, classifier)


def upsample(Q, params: DecoderParams) -> Tensor:
    x = as_tensor(Q)
    for i, stage in enumerate(params.stages):
        x = conv_transpose3d(x, stage.kernel, stage.stride, stage.bias)
        if i < len(params.stages) - 1:
            x = x.relu()
    return x


def decode_branch(
    Q,
    inverse: SpatialTransform,
    params: DecoderParams,
    out_shape: Optional[Tuple[int, int, int]] = None,
) -> Tensor:
    """Class distribution (L, H, W, Z) of one branch in the canonical frame."""
    features = inverse.apply(upsample(Q, params))
    if out_shape is not None and tuple(features.shape[1:]) != tuple(out_shape):
        raise DimensionError(
            f"decoder produced a {features.shape[1:]} grid, expected {tuple(out_shape)}"
        )
    logits = mlp_forward(params.classifier, features.transpose(1, 2, 3, 0))
    return softmax_with_temperature(logits, 1.0).transpose(3, 0, 1, 2)


def decode_branches(
    Q,
    plan: AugmentationPlan,
    params: DecoderParams,
    seed: int,
    out_shape: Optional[Tuple[int, int, int]] = None,
) -> List[Tensor]:
    outputs = []
    for i, specs in enumerate(plan.branches):
        augmented, inverse = apply_branch(Q, specs, derive_seed(seed, "branch", i))
        outputs.append(decode_branch(augmented, inverse, params, out_shape))
    return outputs


# --------------------------
# Consistency regularization
# --------------------------


def sharpen(v_hat, tau_cons: float, axis: int = 0) -> np.ndarray:
    """Temperature sharpening v^(1/τ) / Σ v^(1/τ); returns a constant array."""
    validate_positive("tau_cons", tau_cons)
    v = np.asarray(as_tensor(v_hat).data, dtype=np.float64)
    if np.any(v < 0):
        raise ParameterError("sharpen expects a probability vector")
    if np.any(v.sum(axis=axis) <= 0):
        raise ParameterError("sharpen: all-zero distribution")
    with np.errstate(divide="ignore"):
        z = np.log(v) / tau_cons
    z -= z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _check_branches(branches: Sequence) -> List[Tensor]:
    branches = [as_tensor(b) for b in branches]
    if not branches:
        raise DimensionError("consistency needs at least one branch")
    shapes = {b.shape for b in branches}
    if len(shapes) != 1:
        raise DimensionError(f"branch shapes differ: {sorted(shapes)}")
    return branches


def consistency_loss(
    branches: Sequence, tau_cons: float, target: Optional[np.ndarray] = None
) -> Tensor:
    """Σ_p ‖Ṽ − V^(p)‖² over cells, divided by H·W·Z·(P+1); Ṽ is constant.

    ``target`` overrides the sharpened average, e.g. to hold it fixed while
    probing the branch gradients.
    """
    branches = _check_branches(branches)
    if target is None:
        mean = np.mean([b.data for b in branches], axis=0)
        target = sharpen(mean, tau_cons, axis=0)
    elif np.shape(target) != branches[0].shape:
        raise DimensionError(f"target {np.shape(target)} vs branches {branches[0].shape}")
    cells = int(np.prod(branches[0].shape[1:]))
    total = sum(((b - target) ** 2).sum() for b in branches)
    return total * (1.0 / (cells * len(branches)))


def branch_disagreement(branches: Sequence) -> float:
    """Mean per-cell squared L2 distance over all pairs of branches."""
    arrays = [b.data for b in _check_branches(branches)]
    if len(arrays) < 2:
        return 0.0
    pairs = [
        float(((a - b) ** 2).sum(axis=0).mean()) for a, b in itertools.combinations(arrays, 2)
    ]
    return float(np.mean(pairs))
