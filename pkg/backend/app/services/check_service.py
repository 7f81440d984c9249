"""
Module: services.check_service
------------------------------

Named verification suites shared by the CLI, the API and the tests.

- Gradient suite: every differentiable operation is compared against central
  finite differences on small random instances (max relative error 1e-4,
  floor 1e-8).
- Oracle suite: the vectorized operations are compared against naive loop
  references (1e-10), the 2×2 transposed-convolution expansions and the
  kernel-transform identity are evaluated exactly (1e-12), and the
  normalization properties of sharpening and the two auxiliary losses are
  checked on random inputs.

Each check draws instance ``i`` from the named stream ``(seed, suite, name, i)``
so a failing instance can be replayed on its own.
"""

import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from app.core.config import get_settings
from app.schemas.config import AugmentationSpec
from app.schemas.metrics import CheckResult, CheckSuiteReport
from app.services.clustering_service import PseudoMaskSet
from app.services.decoder_service import (
    DecoderParams,
    SpatialTransform,
    UpsampleStage,
    apply_augmentation,
    consistency_loss,
    conv_transpose3d,
    decode_branch,
    sharpen,
)
from app.services.losses_service import lovasz_softmax_loss, occupancy_ce_loss
from app.services.numeric import (
    MlpParams,
    Tensor,
    cosine_similarity,
    grad_check,
    mlp_forward,
    softmax_with_temperature,
)
from app.services.proto_opt_service import (
    contrastive_loss,
    map_affinity_to_grid,
    mask_centroids,
    prototype_pixel_features,
)
from app.services.scene_service import HitSet
from app.services.view_transform_service import (
    AFFINITY_SENTINEL,
    aggregate,
    bilinear_sample,
    compute_affinity,
    deformable_cross_attention,
    dispatch,
    init_attention_params,
)
from app.utils.errors import ParameterError, ProtoOccError
from app.utils.helpers import make_rng, suggest_name

logger = logging.getLogger(__name__)

GRADIENT_TOLERANCE = 1e-4
ORACLE_TOLERANCE = 1e-10
EXACT_TOLERANCE = 1e-12
DISTINCT_MARGIN = 1e-6
EPS = 1e-6

Instance = Callable[[np.random.Generator], float]


@dataclass(frozen=True)
class Check:
    name: str
    instance: Instance
    tolerance: float
    at_least: bool = False  # pass when every value exceeds the tolerance

    @property
    def criterion(self) -> str:
        return ">" if self.at_least else "<="

    def accepts(self, value: float) -> bool:
        if not math.isfinite(value):
            return False
        return value > self.tolerance if self.at_least else value <= self.tolerance


# --------------------------
# Random instances
# --------------------------


def _valid_mask(rng: np.random.Generator, N: int, K: int) -> np.ndarray:
    """Random slot mask with at least one valid slot per view."""
    valid = rng.random((N, K)) < 0.75
    valid[np.arange(N), rng.integers(0, K, N)] = True
    return valid


def _distributions(rng: np.random.Generator, shape) -> np.ndarray:
    """Random class distributions along axis 0."""
    d = rng.dirichlet(np.ones(shape[0]), size=int(np.prod(shape[1:])))
    return np.moveaxis(d, -1, 0).reshape(shape)


def _covering_ids(rng: np.random.Generator, N: int, h2: int, w2: int, S: int) -> np.ndarray:
    """Mask ids in which every mask owns at least one cell."""
    return np.stack([rng.permutation(np.arange(h2 * w2) % S) for _ in range(N)]).reshape(
        N, h2, w2
    )


def _hit_set(rng: np.random.Generator, N: int, K: int, grid) -> HitSet:
    cells = int(np.prod(grid))
    index = np.stack([rng.choice(cells, size=K, replace=False) for _ in range(N)])
    return HitSet(
        index=index,
        q_c=rng.uniform(0.2, 0.8, (N, K, 2)),
        depth=np.ones((N, K)),
        valid=np.ones((N, K), dtype=bool),
        grid=tuple(grid),
    )


# --------------------------
# Gradient checks
# --------------------------


def _max_rel_err(*reports) -> float:
    return max(r.max_rel_err for r in reports)


def _grad_compute_affinity(rng):
    N, M, K, d = 2, 3, 4, 3
    p_hat, q = rng.normal(size=(N, M, d)), rng.normal(size=(N, K, d))
    valid = _valid_mask(rng, N, K)
    R = rng.normal(size=(N, M, K))
    return _max_rel_err(
        grad_check(lambda x: (compute_affinity(x, q, valid).sigma() * R).sum(), p_hat, EPS),
        grad_check(lambda x: (compute_affinity(p_hat, x, valid).sigma() * R).sum(), q, EPS),
    )


def _grad_aggregate(rng):
    N, M, K, d = 2, 3, 4, 3
    p_hat, q = rng.normal(size=(N, M, d)), rng.normal(size=(N, K, d))
    valid = _valid_mask(rng, N, K)
    R = rng.normal(size=(N, M, d))

    def f_p(x):
        return (aggregate(x, q, compute_affinity(x, q, valid)) * R).sum()

    def f_q(x):
        return (aggregate(p_hat, x, compute_affinity(p_hat, x, valid)) * R).sum()

    return _max_rel_err(grad_check(f_p, p_hat, EPS), grad_check(f_q, q, EPS))


def _grad_dispatch(rng):
    N, M, K, d = 2, 3, 4, 3
    p_hat, q = rng.normal(size=(N, M, d)), rng.normal(size=(N, K, d))
    p_vox = rng.normal(size=(N, M, d))
    valid = _valid_mask(rng, N, K)
    mlp = MlpParams.initialize([d, d], ["identity"], rng)
    R = rng.normal(size=(N, K, d))

    def f_q(x):
        return (dispatch(x, compute_affinity(p_hat, x, valid), p_vox, mlp) * R).sum()

    def f_vox(x):
        return (dispatch(q, compute_affinity(p_hat, q, valid), x, mlp) * R).sum()

    return _max_rel_err(grad_check(f_q, q, EPS), grad_check(f_vox, p_vox, EPS))


def _grad_map_affinity(rng):
    N, M, K, h2, w2 = 2, 3, 5, 2, 3
    A = rng.normal(size=(N, M, K))
    q_c = rng.uniform(-0.2, 1.2, (N, K, 2))
    R = rng.normal(size=(N, M, h2 * w2))
    report = grad_check(lambda x: (map_affinity_to_grid(x, q_c, h2, w2) * R).sum(), A, EPS)
    return report.max_rel_err


def _grad_pixel_features(rng):
    N, M, d, h2, w2 = 2, 3, 3, 2, 2
    G = rng.uniform(0.1, 1.0, (N, h2 * w2))
    HA = rng.uniform(0.0, 2.0, (N, M, h2 * w2))
    p_vox = rng.normal(size=(N, M, d))
    R = rng.normal(size=(N, d, h2, w2))
    shape = (h2, w2)
    return _max_rel_err(
        grad_check(lambda x: (prototype_pixel_features(G, HA, x, shape) * R).sum(), p_vox, EPS),
        grad_check(lambda x: (prototype_pixel_features(x, HA, p_vox, shape) * R).sum(), G, EPS),
        grad_check(lambda x: (prototype_pixel_features(G, x, p_vox, shape) * R).sum(), HA, EPS),
    )


def _grad_contrastive(rng):
    N, d, h2, w2 = 1, 3, 3, 2
    S = int(rng.integers(2, 4))
    masks = PseudoMaskSet(_covering_ids(rng, N, h2, w2, S), S, "ground-truth")
    X = rng.normal(size=(N, d, h2, w2))
    tau = float(rng.uniform(0.2, 1.0))

    def f(x):
        return contrastive_loss(x, mask_centroids(x, masks), masks, tau)

    return grad_check(f, X, EPS).max_rel_err


def _grad_consistency(rng):
    L, shape = 3, (2, 2, 1)
    other = _distributions(rng, (L,) + shape)
    logits = rng.normal(size=(L,) + shape)
    tau = float(rng.uniform(0.3, 1.0))
    start = softmax_with_temperature(Tensor(logits), 1.0, axis=0).data
    target = sharpen((start + other) / 2.0, tau, axis=0)

    def f(x):
        return consistency_loss([softmax_with_temperature(x, 1.0, axis=0), other], tau, target)

    return grad_check(f, logits, EPS).max_rel_err


def _grad_ce(rng):
    L, shape = 3, (2, 2, 2)
    pred = rng.uniform(0.05, 0.95, (L,) + shape)
    gt = rng.integers(0, L, shape)
    weights = rng.uniform(0.5, 2.0, L)
    return _max_rel_err(
        grad_check(lambda x: occupancy_ce_loss(x, gt), pred, EPS),
        grad_check(lambda x: occupancy_ce_loss(x, gt, weights), pred, EPS),
    )


def _grad_lovasz(rng):
    L, shape = 3, (2, 2, 2)
    pred = rng.uniform(0.05, 0.95, (L,) + shape)
    gt = rng.integers(0, L, shape)
    return grad_check(lambda x: lovasz_softmax_loss(x, gt), pred, EPS).max_rel_err


def _grad_conv_transpose(rng):
    c_in, c_out = 2, 2
    x = rng.normal(size=(c_in, 2, 2, 2))
    kernel = rng.normal(size=(c_in, c_out) + tuple(rng.integers(1, 3, 3)))
    stride = tuple(int(s) for s in rng.integers(1, 3, 3))
    bias = rng.normal(size=c_out)
    R = rng.normal(size=conv_transpose3d(x, kernel, stride).shape)
    return _max_rel_err(
        grad_check(lambda t: (conv_transpose3d(t, kernel, stride, bias) * R).sum(), x, EPS),
        grad_check(lambda t: (conv_transpose3d(x, t, stride, bias) * R).sum(), kernel, EPS),
        grad_check(lambda t: (conv_transpose3d(x, kernel, stride, t) * R).sum(), bias, EPS),
    )


def _grad_bilinear(rng):
    N, h, w, C, P = 2, 3, 4, 2, 3
    value = rng.normal(size=(N, h, w, C))
    loc = rng.uniform(0.05, 0.95, (N, P, 2))
    R = rng.normal(size=(N, P, C))
    return _max_rel_err(
        grad_check(lambda x: (bilinear_sample(x, loc) * R).sum(), value, EPS),
        grad_check(lambda x: (bilinear_sample(value, x) * R).sum(), loc, EPS),
    )


def _grad_attention(rng):
    N, K, d, C, h_f, w_f = 2, 3, 3, 3, 4, 4
    grid = (2, 2, 2)
    hits = _hit_set(rng, N, K, grid)
    query_grid = rng.normal(size=(d,) + grid)
    q_tilde = rng.normal(size=(N, K, d))
    fmaps = rng.normal(size=(N, C, h_f, w_f))
    params = init_attention_params(d, C, 2, rng)
    R = rng.normal(size=(d,) + grid)
    RG = rng.normal(size=(N, 4))

    def objective(q, maps):
        q_enc, G = deformable_cross_attention(query_grid, q, maps, hits, params, (2, 2))
        return (q_enc * R).sum() + (G.values * RG).sum()

    return _max_rel_err(
        grad_check(lambda x: objective(x, fmaps), q_tilde, EPS),
        grad_check(lambda x: objective(q_tilde, x), fmaps, EPS),
    )


def _grad_mlp(rng):
    mlp = MlpParams.initialize([3, 4, 2], ["relu", "identity"], rng)
    x = rng.normal(size=(5, 3))
    R = rng.normal(size=(5, 2))

    def f_weight(w):
        probe = MlpParams([w, mlp.weights[1]], mlp.biases, mlp.activations)
        return (mlp_forward(probe, x) * R).sum()

    return _max_rel_err(
        grad_check(lambda t: (mlp_forward(mlp, t) * R).sum(), x, EPS),
        grad_check(f_weight, mlp.weights[0].data, EPS),
    )


def _grad_softmax(rng):
    # keeps every gradient entry above 1e-6
    x = 0.5 * rng.normal(size=(3, 4))
    tau = float(rng.uniform(0.5, 2.0))
    R = rng.normal(size=(3, 4))
    return grad_check(lambda t: (softmax_with_temperature(t, tau) * R).sum(), x, EPS).max_rel_err


def _grad_cosine(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    R = rng.normal(size=3)
    return _max_rel_err(
        grad_check(lambda t: (cosine_similarity(t, b) * R).sum(), a, EPS),
        grad_check(lambda t: (cosine_similarity(a, t) * R).sum(), b, EPS),
    )


GRADIENT_CHECKS: Dict[str, Check] = {
    c.name: c
    for c in [
        Check("compute_affinity", _grad_compute_affinity, GRADIENT_TOLERANCE),
        Check("aggregate", _grad_aggregate, GRADIENT_TOLERANCE),
        Check("dispatch", _grad_dispatch, GRADIENT_TOLERANCE),
        Check("map_affinity_to_grid", _grad_map_affinity, GRADIENT_TOLERANCE),
        Check("prototype_pixel_features", _grad_pixel_features, GRADIENT_TOLERANCE),
        Check("contrastive_loss", _grad_contrastive, GRADIENT_TOLERANCE),
        Check("consistency_loss", _grad_consistency, GRADIENT_TOLERANCE),
        Check("occupancy_ce_loss", _grad_ce, GRADIENT_TOLERANCE),
        Check("lovasz_softmax_loss", _grad_lovasz, GRADIENT_TOLERANCE),
        Check("conv_transpose3d", _grad_conv_transpose, GRADIENT_TOLERANCE),
        Check("bilinear_sample", _grad_bilinear, GRADIENT_TOLERANCE),
        Check("deformable_cross_attention", _grad_attention, GRADIENT_TOLERANCE),
        Check("mlp_forward", _grad_mlp, GRADIENT_TOLERANCE),
        Check("softmax_with_temperature", _grad_softmax, GRADIENT_TOLERANCE),
        Check("cosine_similarity", _grad_cosine, GRADIENT_TOLERANCE),
    ]
}


# --------------------------
# Naive references
# --------------------------


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na = math.sqrt(sum(float(v) * float(v) for v in a))
    nb = math.sqrt(sum(float(v) * float(v) for v in b))
    if na == 0 or nb == 0:
        return 0.0
    dot = sum(float(u) * float(v) for u, v in zip(a, b))
    return min(1.0, max(-1.0, dot / (na * nb)))


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def reference_affinity(p_hat, q, valid) -> np.ndarray:
    N, M, _ = p_hat.shape
    K = q.shape[1]
    raw = np.zeros((N, M, K))
    for n in range(N):
        for m in range(M):
            for k in range(K):
                raw[n, m, k] = _cos(p_hat[n, m], q[n, k]) if valid[n, k] else AFFINITY_SENTINEL
    return raw


def _reference_sigma(raw, valid) -> np.ndarray:
    N, M, K = raw.shape
    s = np.zeros((N, M, K))
    for n in range(N):
        for m in range(M):
            for k in range(K):
                s[n, m, k] = _sigmoid(raw[n, m, k]) if valid[n, k] else 0.0
    return s


def reference_aggregate(p_hat, q, valid, eps: float) -> np.ndarray:
    s = _reference_sigma(reference_affinity(p_hat, q, valid), valid)
    N, M, d = p_hat.shape
    out = np.zeros((N, M, d))
    for n in range(N):
        for m in range(M):
            numerator = p_hat[n, m].copy()
            mass = eps
            for k in range(q.shape[1]):
                numerator += s[n, m, k] * q[n, k]
                mass += s[n, m, k]
            out[n, m] = numerator / mass
    return out


def reference_dispatch(p_hat, q, valid, p_vox, W, b) -> np.ndarray:
    s = _reference_sigma(reference_affinity(p_hat, q, valid), valid)
    N, K, d = q.shape
    out = q.copy()
    for n in range(N):
        for k in range(K):
            if not valid[n, k]:
                continue
            message = np.zeros(d)
            for m in range(p_vox.shape[1]):
                message += s[n, m, k] * p_vox[n, m]
            for j in range(d):
                out[n, k, j] += sum(message[i] * W[i, j] for i in range(d)) + b[j]
    return out


def reference_map_affinity(A, q_c, valid, h2: int, w2: int) -> np.ndarray:
    N, M, K = A.shape
    out = np.zeros((N, M, h2 * w2))
    for n in range(N):
        for k in range(K):
            x = int(math.floor(q_c[n, k, 0] * w2))
            y = int(math.floor(q_c[n, k, 1] * h2))
            if not valid[n, k] or not (0 <= x < w2 and 0 <= y < h2):
                continue
            for m in range(M):
                out[n, m, y * w2 + x] += A[n, m, k]
    return out


def reference_pixel_features(G, HA, p_vox, h2: int, w2: int) -> np.ndarray:
    N, M, d = p_vox.shape
    X = np.zeros((N, d, h2, w2))
    for n in range(N):
        for y in range(h2):
            for x in range(w2):
                cell = y * w2 + x
                for m in range(M):
                    X[n, :, y, x] += G[n, cell] * HA[n, m, cell] * p_vox[n, m]
    return X


def reference_contrastive(X, ids, S: int, tau: float) -> float:
    N, d, h2, w2 = X.shape
    total = 0.0
    for n in range(N):
        centroids, valid = [], []
        for s in range(S):
            members = [X[n, :, y, x] for y in range(h2) for x in range(w2) if ids[n, y, x] == s]
            valid.append(bool(members))
            centroids.append(np.mean(members, axis=0) if members else np.zeros(d))
        for y in range(h2):
            for x in range(w2):
                own = ids[n, y, x]
                if not valid[own]:
                    continue
                logits = {
                    s: _cos(X[n, :, y, x], centroids[s]) / tau for s in range(S) if valid[s]
                }
                peak = max(logits.values())
                log_mass = peak + math.log(sum(math.exp(v - peak) for v in logits.values()))
                total += log_mass - logits[own]
    return total


def reference_consistency(branches: Sequence[np.ndarray], tau: float) -> float:
    L = branches[0].shape[0]
    cells = list(np.ndindex(*branches[0].shape[1:]))
    total = 0.0
    for cell in cells:
        mean = [sum(b[(c,) + cell] for b in branches) / len(branches) for c in range(L)]
        powered = [math.pow(v, 1.0 / tau) for v in mean]
        target = [v / sum(powered) for v in powered]
        for b in branches:
            total += sum((target[c] - b[(c,) + cell]) ** 2 for c in range(L))
    return total / (len(cells) * len(branches))


def reference_conv_transpose3d(x, kernel, stride, bias) -> np.ndarray:
    c_in, c_out = kernel.shape[:2]
    k = kernel.shape[2:]
    extent = [(n - 1) * s + kk for n, s, kk in zip(x.shape[1:], stride, k)]
    out = np.zeros([c_out] + extent)
    for c in range(c_in):
        for i, j, l in np.ndindex(*x.shape[1:]):
            for p, q, r in np.ndindex(*k):
                for o in range(c_out):
                    out[o, i * stride[0] + p, j * stride[1] + q, l * stride[2] + r] += (
                        x[c, i, j, l] * kernel[c, o, p, q, r]
                    )
    for o in range(c_out):
        out[o] += bias[o]
    return out


def expansion_2x2(a, b, c, d, w, x, y, z) -> np.ndarray:
    """Stride-1 transposed convolution of [[a, b], [c, d]] with kernel [[w, x], [y, z]]."""
    return np.array(
        [
            [a * w, a * x + b * w, b * x],
            [a * y + c * w, a * z + b * y + c * x + d * w, b * z + d * x],
            [c * y, c * z + d * y, d * z],
        ]
    )


# --------------------------
# Oracle checks
# --------------------------


def _sizes(rng):
    return (
        int(rng.integers(1, 3)),
        int(rng.integers(1, 5)),
        int(rng.integers(1, 9)),
        int(rng.integers(1, 5)),
    )


def _oracle_affinity(rng):
    N, M, K, d = _sizes(rng)
    p_hat, q = rng.normal(size=(N, M, d)), rng.normal(size=(N, K, d))
    valid = _valid_mask(rng, N, K)
    got = compute_affinity(p_hat, q, valid).raw.data
    return float(np.abs(got - reference_affinity(p_hat, q, valid)).max())


def _oracle_aggregate(rng):
    N, M, K, d = _sizes(rng)
    p_hat, q = rng.normal(size=(N, M, d)), rng.normal(size=(N, K, d))
    valid = _valid_mask(rng, N, K)
    got = aggregate(p_hat, q, compute_affinity(p_hat, q, valid), EPS).data
    return float(np.abs(got - reference_aggregate(p_hat, q, valid, EPS)).max())


def _oracle_dispatch(rng):
    N, M, K, d = _sizes(rng)
    p_hat, q = rng.normal(size=(N, M, d)), rng.normal(size=(N, K, d))
    p_vox = rng.normal(size=(N, M, d))
    valid = _valid_mask(rng, N, K)
    mlp = MlpParams.initialize([d, d], ["identity"], rng)
    mlp.biases[0].data[:] = rng.normal(size=d)
    got = dispatch(q, compute_affinity(p_hat, q, valid), p_vox, mlp).data
    expected = reference_dispatch(
        p_hat, q, valid, p_vox, mlp.weights[0].data, mlp.biases[0].data
    )
    return float(np.abs(got - expected).max())


def _oracle_map_affinity(rng):
    N, M, K, _ = _sizes(rng)
    h2, w2 = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    A = rng.normal(size=(N, M, K))
    q_c = rng.uniform(-0.25, 1.25, (N, K, 2))
    valid = rng.random((N, K)) < 0.8
    got = map_affinity_to_grid(A, q_c, h2, w2, valid).data
    return float(np.abs(got - reference_map_affinity(A, q_c, valid, h2, w2)).max())


def _oracle_pixel_features(rng):
    N, M, _, d = _sizes(rng)
    h2, w2 = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    G = rng.random((N, h2 * w2))
    HA = rng.normal(size=(N, M, h2 * w2))
    p_vox = rng.normal(size=(N, M, d))
    got = prototype_pixel_features(G, HA, p_vox, (h2, w2)).data
    return float(np.abs(got - reference_pixel_features(G, HA, p_vox, h2, w2)).max())


def _oracle_contrastive(rng):
    N, _, _, d = _sizes(rng)
    S = int(rng.integers(1, 5))
    h2, w2 = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    X = rng.normal(size=(N, d, h2, w2))
    ids = rng.integers(0, S, (N, h2, w2))
    tau = float(rng.uniform(0.1, 1.0))
    masks = PseudoMaskSet(ids, S, "ground-truth")
    got = contrastive_loss(X, mask_centroids(X, masks), masks, tau).item()
    return abs(got - reference_contrastive(X, ids, S, tau))


def _oracle_consistency(rng):
    L = int(rng.integers(2, 5))
    shape = (L,) + tuple(int(s) for s in rng.integers(1, 3, 3))
    branches = [_distributions(rng, shape) for _ in range(int(rng.integers(1, 4)))]
    tau = float(rng.uniform(0.2, 1.5))
    got = consistency_loss(branches, tau).item()
    return abs(got - reference_consistency(branches, tau))


def _oracle_conv_transpose(rng):
    c_in, c_out = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    x = rng.normal(size=(c_in,) + tuple(int(s) for s in rng.integers(1, 4, 3)))
    kernel = rng.normal(size=(c_in, c_out) + tuple(int(s) for s in rng.integers(1, 4, 3)))
    stride = tuple(int(s) for s in rng.integers(1, 3, 3))
    bias = rng.normal(size=c_out)
    got = conv_transpose3d(x, kernel, stride, bias).data
    return float(np.abs(got - reference_conv_transpose3d(x, kernel, stride, bias)).max())


def _oracle_expansion(rng):
    a, b, c, d = 1.0, 2.0, 3.0, 4.0
    w, x, y, z = rng.normal(size=4)
    kernel = np.array([[w, x], [y, z]]).reshape(1, 1, 2, 2, 1)
    variants = [
        ((a, b, c, d), []),
        ((a, c, b, d), [("transpose", (0, 1))]),
        ((c, d, a, b), [("flip", (0,))]),
        ((b, a, d, c), [("flip", (1,))]),
        ((d, c, b, a), [("flip", (0, 1))]),
    ]
    base = Tensor(np.array([[a, b], [c, d]]).reshape(1, 2, 2, 1))
    worst = 0.0
    for letters, ops in variants:
        augmented = SpatialTransform(ops).apply(base)
        got = conv_transpose3d(augmented, kernel).data[0, :, :, 0]
        worst = max(worst, float(np.abs(got - expansion_2x2(*letters, w, x, y, z)).max()))
    return worst


def _random_transform(rng) -> SpatialTransform:
    choices = [
        [("flip", (0,))],
        [("flip", (1,))],
        [("flip", (2,))],
        [("flip", (0, 1))],
        [("transpose", (0, 1))],
        [("transpose", (0, 1)), ("flip", (0,))],
        [("flip", (1,)), ("transpose", (0, 1))],
    ]
    return SpatialTransform(choices[int(rng.integers(len(choices)))])


def _oracle_kernel_identity(rng):
    c_in, c_out = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    x = rng.normal(size=(c_in,) + tuple(int(s) for s in rng.integers(1, 4, 3)))
    kernel = rng.normal(size=(c_in, c_out) + tuple(int(s) for s in rng.integers(1, 4, 3)))
    transform = _random_transform(rng)
    realigned = transform.inverse().apply(conv_transpose3d(transform.apply(Tensor(x)), kernel))
    direct = conv_transpose3d(x, transform.apply_to_kernel(kernel))
    return float(np.abs(realigned.data - direct.data).max())


def _oracle_distinctness(rng):
    d, L = 3, 3
    Q = rng.normal(size=(d, 2, 2, 2))
    params = DecoderParams(
        [UpsampleStage(Tensor(rng.normal(size=(d, d, 2, 2, 2))), Tensor(np.zeros(d)), (1, 1, 1))],
        MlpParams.initialize([d, L], ["identity"], rng),
    )
    spec = AugmentationSpec(kind="flip", axes=["x"])
    augmented, inverse = apply_augmentation(Q, spec, 0)
    flipped = decode_branch(augmented, inverse, params).data
    original = decode_branch(Q, SpatialTransform(), params).data
    return float(np.abs(flipped - original).max())


def _oracle_sharpen(rng):
    L = int(rng.integers(2, 6))
    v = _distributions(rng, (L, 10))
    tau = float(rng.uniform(0.1, 2.0))
    out = sharpen(v, tau, axis=0)
    if np.any(out.argmax(axis=0) != v.argmax(axis=0)):
        return math.inf
    return float(np.abs(out.sum(axis=0) - 1.0).max())


def _oracle_consensus(rng):
    shape = (3, 2, 2, 1)
    v = _distributions(rng, shape)
    return abs(consistency_loss([v, v.copy(), v.copy()], 1.0).item())


def _oracle_single_mask(rng):
    X = rng.normal(size=(2, 3, 2, 3))
    masks = PseudoMaskSet(np.zeros((2, 2, 3), dtype=np.int64), 1, "ground-truth")
    return abs(contrastive_loss(X, mask_centroids(X, masks), masks, 0.3).item())


ORACLE_CHECKS: Dict[str, Check] = {
    c.name: c
    for c in [
        Check("compute_affinity", _oracle_affinity, ORACLE_TOLERANCE),
        Check("aggregate", _oracle_aggregate, ORACLE_TOLERANCE),
        Check("dispatch", _oracle_dispatch, ORACLE_TOLERANCE),
        Check("map_affinity_to_grid", _oracle_map_affinity, ORACLE_TOLERANCE),
        Check("prototype_pixel_features", _oracle_pixel_features, ORACLE_TOLERANCE),
        Check("contrastive_loss", _oracle_contrastive, ORACLE_TOLERANCE),
        Check("consistency_loss", _oracle_consistency, ORACLE_TOLERANCE),
        Check("conv_transpose3d", _oracle_conv_transpose, ORACLE_TOLERANCE),
        Check("expansion_2x2", _oracle_expansion, EXACT_TOLERANCE),
        Check("kernel_transform_identity", _oracle_kernel_identity, EXACT_TOLERANCE),
        Check("branch_distinctness", _oracle_distinctness, DISTINCT_MARGIN, at_least=True),
        Check("sharpen_normalization", _oracle_sharpen, EXACT_TOLERANCE),
        Check("consistency_zero_at_consensus", _oracle_consensus, EXACT_TOLERANCE),
        Check("contrastive_single_mask", _oracle_single_mask, EXACT_TOLERANCE),
    ]
}

SUITES = {"gradient": GRADIENT_CHECKS, "oracle": ORACLE_CHECKS}


# --------------------------
# Running
# --------------------------


def run_check(check: Check, suite: str, instances: int, seed: int = 0) -> CheckResult:
    started = time.perf_counter()
    values: List[float] = []
    detail = ""
    try:
        for i in range(instances):
            values.append(float(check.instance(make_rng(seed, suite, check.name, i))))
    except ProtoOccError as e:
        detail = f"instance {len(values)}: {e.detail}"
        logger.warning(f"{suite} check {check.name} raised: {detail}")

    worst = (min(values) if check.at_least else max(values)) if values else None
    passed = bool(values) and not detail and all(check.accepts(v) for v in values)
    if not passed and not detail:
        bad = [i for i, v in enumerate(values) if not check.accepts(v)]
        detail = f"failing instances: {bad[:10]}"
    result = CheckResult(
        name=check.name,
        suite=suite,
        instances=len(values),
        worst=worst if worst is None or math.isfinite(worst) else None,
        criterion=check.criterion,
        tolerance=check.tolerance,
        passed=passed,
        seconds=time.perf_counter() - started,
        detail=detail,
    )
    logger.info(
        f"{suite} {check.name}: worst={worst} {check.criterion} {check.tolerance} "
        f"-> {'ok' if passed else 'FAILED'}"
    )
    return result


def select_checks(suite: str, op: Optional[str] = None) -> List[Check]:
    if suite not in SUITES:
        raise ParameterError(f"unknown suite {suite!r}, expected one of {sorted(SUITES)}")
    registry = SUITES[suite]
    if op is None:
        return list(registry.values())
    if op not in registry:
        hint = suggest_name(op, registry)
        raise ParameterError(
            f"no {suite} check named {op!r}" + (f", did you mean {hint!r}?" if hint else "")
        )
    return [registry[op]]


def run_suite(
    suite: str, op: Optional[str] = None, instances: Optional[int] = None, seed: int = 0
) -> CheckSuiteReport:
    settings = get_settings()
    if instances is None:
        instances = settings.check_instances if suite == "gradient" else settings.oracle_instances
    if instances < 1:
        raise ParameterError(f"instances must be >= 1, got {instances}")
    results = [run_check(c, suite, instances, seed) for c in select_checks(suite, op)]
    report = CheckSuiteReport(suite=suite, results=results)
    logger.info(
        f"{suite} suite: {sum(r.passed for r in results)}/{len(results)} checks passed"
    )
    return report
