"""Semantic pseudo labeling: feature clustering, window assembly, depth fusion, CRF.

Soft semantics are (K, H, W) probability volumes. The low-resolution
prediction is trusted near the camera and the sliding-window high-resolution
prediction far away, blended per pixel by the depth weight 1/(D+1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CoverageError, DegenerateDataError, DomainError, ParameterError, ShapeError
from .interp import bilinear_resize
from .stereo_geometry import DepthMap

_EPS = 1e-8


@dataclass
class SoftSemantics:
    """Per-pixel distribution over K pseudo classes, (K, H, W)."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 3:
            raise ShapeError(f"probs must be (K,H,W), got {p.shape}")
        if np.any(p < 0):
            raise ShapeError("probabilities must be nonnegative")
        sums = p.sum(axis=0)
        if np.abs(sums - 1.0).max() > 1e-4:
            raise ShapeError("per-pixel probabilities must sum to 1")
        self.probs = p

    @property
    def k(self) -> int:
        return self.probs.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape[1:]

    def argmax(self) -> np.ndarray:
        return self.probs.argmax(axis=0)

    @classmethod
    def from_unnormalized(cls, probs: np.ndarray) -> "SoftSemantics":
        p = np.clip(np.asarray(probs, dtype=np.float64), 0.0, None)
        return cls(p / np.maximum(p.sum(axis=0, keepdims=True), _EPS))


@dataclass
class Centroids:
    """Unit-norm cluster directions, (K, C)."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2:
            raise ShapeError(f"centroids must be (K,C), got {v.shape}")
        norms = np.linalg.norm(v, axis=1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ShapeError("centroids must be unit length")
        self.vectors = v


def _as_feature_rows(features: np.ndarray) -> np.ndarray:
    if features.ndim == 3:  # (C, H, W) -> (N, C)
        return features.reshape(features.shape[0], -1).T
    if features.ndim == 2:
        return features
    raise ShapeError(f"features must be (C,H,W) or (N,C), got {features.shape}")


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, _EPS)


def cosine_kmeans_fit(features: np.ndarray, k: int, iters: int = 20, seed: int = 0) -> Centroids:
    """Spherical K-means: cosine-similarity assignment, normalized-mean update.

    Seeding follows the k-means++ recipe on cosine distance. Empty clusters
    are re-seeded from the point farthest from its centroid. Deterministic
    per seed.
    """
    if k < 2:
        raise ParameterError(f"need at least 2 clusters, got {k}")
    x = _normalize_rows(_as_feature_rows(np.asarray(features, dtype=np.float64)))
    if len(np.unique(x.round(12), axis=0)) < k:
        raise DegenerateDataError(f"fewer than {k} distinct feature vectors")

    rng = np.random.default_rng(seed)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(len(x))]
    dist = 1.0 - x @ centers[0]
    for i in range(1, k):
        p = np.clip(dist, 0, None) ** 2
        total = p.sum()
        idx = rng.choice(len(x), p=p / total) if total > 0 else rng.integers(len(x))
        centers[i] = x[idx]
        dist = np.minimum(dist, 1.0 - x @ centers[i])

    for _ in range(iters):
        sim = x @ centers.T
        assign = sim.argmax(axis=1)
        for j in range(k):
            members = x[assign == j]
            if len(members) == 0:
                worst = int(np.argmax(1.0 - sim[np.arange(len(x)), assign]))
                centers[j] = x[worst]
                assign[worst] = j
            else:
                centers[j] = _normalize_rows(members.mean(axis=0, keepdims=True))[0]
    return Centroids(centers)


def cosine_kmeans_objective(features: np.ndarray, centroids: Centroids) -> float:
    """Mean cosine distance of each feature to its best centroid."""
    x = _normalize_rows(_as_feature_rows(np.asarray(features, dtype=np.float64)))
    return float((1.0 - (x @ centroids.vectors.T).max(axis=1)).mean())


def cosine_kmeans_assign(
    features: np.ndarray, centroids: Centroids, temperature: float = 0.1
) -> SoftSemantics:
    """Soft assignment: softmax over cosine similarities at the given temperature."""
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 3:
        raise ShapeError(f"expected (C,H,W) features, got {feats.shape}")
    if feats.shape[0] != centroids.vectors.shape[1]:
        raise ShapeError(
            f"feature dim {feats.shape[0]} vs centroid dim {centroids.vectors.shape[1]}"
        )
    c, h, w = feats.shape
    x = _normalize_rows(feats.reshape(c, -1).T)
    logits = (x @ centroids.vectors.T) / temperature
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    probs = (e / e.sum(axis=1, keepdims=True)).T.reshape(-1, h, w)
    return SoftSemantics(probs)


def assemble_sliding_window(
    window_preds: list[tuple[SoftSemantics, tuple[int, int]]], full_size: tuple[int, int]
) -> SoftSemantics:
    """Average overlapping window predictions into a full-resolution volume."""
    if not window_preds:
        raise ParameterError("no windows given")
    h, w = full_size
    k = window_preds[0][0].k
    acc = np.zeros((k, h, w))
    cover = np.zeros((h, w), dtype=np.int32)
    for sem, (r, c) in window_preds:
        if sem.k != k:
            raise ShapeError(f"window has {sem.k} classes, expected {k}")
        wh, ww = sem.shape
        if r < 0 or c < 0 or r + wh > h or c + ww > w:
            raise CoverageError(f"window at ({r},{c}) size ({wh},{ww}) exceeds {full_size}")
        acc[:, r : r + wh, c : c + ww] += sem.probs
        cover[r : r + wh, c : c + ww] += 1
    if (cover == 0).any():
        ys, xs = np.nonzero(cover == 0)
        raise CoverageError(f"pixel ({ys[0]},{xs[0]}) not covered by any window")
    return SoftSemantics.from_unnormalized(acc / cover)


def depth_weight(depth: DepthMap, alpha_default: float = 0.5) -> np.ndarray:
    """Per-pixel blending weight 1/(D+1); invalid-depth pixels get alpha_default."""
    d = depth.values
    if np.any(d[depth.valid] < 0):
        raise DomainError("depth must be nonnegative")
    alpha = np.full(d.shape, alpha_default)
    alpha[depth.valid] = 1.0 / (d[depth.valid] + 1.0)
    return alpha


def depth_guided_fuse(
    p_low: SoftSemantics, p_high: SoftSemantics, depth: DepthMap, alpha_default: float = 0.5
) -> SoftSemantics:
    """Blend low-res and high-res predictions: alpha*low + (1-alpha)*high.

    p_low must already be upsampled to the full resolution.
    """
    if p_low.k != p_high.k:
        raise ShapeError(f"class counts differ: {p_low.k} vs {p_high.k}")
    if p_low.shape != p_high.shape or p_low.shape != depth.values.shape:
        raise ShapeError(
            f"shapes differ: low {p_low.shape}, high {p_high.shape}, depth {depth.values.shape}"
        )
    alpha = depth_weight(depth, alpha_default)
    fused = alpha[None] * p_low.probs + (1.0 - alpha[None]) * p_high.probs
    return SoftSemantics.from_unnormalized(fused)


def upsample_soft(p: SoftSemantics, out_hw: tuple[int, int]) -> SoftSemantics:
    """Bilinearly rescale a probability volume and renormalize."""
    vol = np.stack([bilinear_resize(c, out_hw) for c in p.probs])
    return SoftSemantics.from_unnormalized(vol)


@dataclass
class CrfParams:
    """Dense-CRF mean-field settings: two Gaussian kernels, Potts labels."""

    w_bilateral: float = 10.0
    w_spatial: float = 3.0
    sigma_xy_bi: float = 49.0
    sigma_rgb: float = 5.0
    sigma_xy_sp: float = 3.0
    iterations: int = 5
    max_side: int = 160  # inference resolution cap, exact O(N^2) passing

    def __post_init__(self):
        if self.w_bilateral < 0 or self.w_spatial < 0:
            raise ParameterError("kernel weights must be nonnegative")
        if min(self.sigma_xy_bi, self.sigma_rgb, self.sigma_xy_sp) <= 0:
            raise ParameterError("kernel widths must be positive")
        if self.iterations < 0 or self.max_side < 1:
            raise ParameterError("iterations must be >= 0 and max_side >= 1")


# cache the pairwise kernel matrix only below this pixel count (memory bound)
_CRF_CACHE_PIXELS = 8192
_CRF_BLOCK = 2048


def _crf_features(image: np.ndarray, params: CrfParams) -> tuple[np.ndarray, np.ndarray]:
    h, w, _ = image.shape
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    pos = np.stack([gx.ravel(), gy.ravel()], axis=1)
    rgb = image.reshape(-1, 3).astype(np.float64)
    f_bi = np.concatenate([pos / params.sigma_xy_bi, rgb / params.sigma_rgb], axis=1)
    f_sp = pos / params.sigma_xy_sp
    return f_bi.astype(np.float32), f_sp.astype(np.float32)


def _kernel_block(fa: np.ndarray, fb: np.ndarray) -> np.ndarray:
    sq = (
        (fa**2).sum(axis=1)[:, None]
        + (fb**2).sum(axis=1)[None, :]
        - 2.0 * (fa @ fb.T)
    )
    return np.exp(-0.5 * np.maximum(sq, 0.0))


def crf_refine(image: np.ndarray, probs: SoftSemantics, params: CrfParams) -> SoftSemantics:
    """Mean-field inference over a fully connected CRF with Potts labels.

    Unary is -log of the input probabilities. Inputs larger than
    params.max_side per dimension are processed at reduced resolution and
    the refined probabilities are upsampled back.
    """
    if image.shape[:2] != probs.shape:
        raise ShapeError(f"image {image.shape[:2]} vs probs {probs.shape}")
    if params.iterations == 0:
        return SoftSemantics(probs.probs.copy())

    h, w = probs.shape
    scale = min(1.0, params.max_side / max(h, w))
    wh, ww = max(1, round(h * scale)), max(1, round(w * scale))
    if (wh, ww) != (h, w):
        img = bilinear_resize(image.astype(np.float64), (wh, ww))
        p_in = upsample_soft(probs, (wh, ww))
    else:
        img = image.astype(np.float64)
        p_in = probs

    n = wh * ww
    k = p_in.k
    f_bi, f_sp = _crf_features(img, params)
    unary = -np.log(p_in.probs.reshape(k, n).T + _EPS)  # (N, K)
    self_weight = params.w_bilateral + params.w_spatial

    kernel = None
    if n <= _CRF_CACHE_PIXELS:
        kernel = params.w_bilateral * _kernel_block(f_bi, f_bi) + params.w_spatial * _kernel_block(
            f_sp, f_sp
        )

    q = p_in.probs.reshape(k, n).T.copy()  # (N, K)
    for _ in range(params.iterations):
        if kernel is not None:
            msg = kernel @ q
        else:
            msg = np.empty_like(q)
            for lo in range(0, n, _CRF_BLOCK):
                hi = min(lo + _CRF_BLOCK, n)
                block = params.w_bilateral * _kernel_block(
                    f_bi[lo:hi], f_bi
                ) + params.w_spatial * _kernel_block(f_sp[lo:hi], f_sp)
                msg[lo:hi] = block @ q
        msg -= self_weight * q  # exclude self-interaction (kernel diagonal is 1)
        # Potts compatibility: penalty from disagreeing labels; the common
        # per-pixel message sum cancels inside the softmax
        logits = -unary + msg
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        q = e / e.sum(axis=1, keepdims=True)

    out = SoftSemantics(q.T.reshape(k, wh, ww))
    if (wh, ww) != (h, w):
        out = upsample_soft(out, (h, w))
    return out
