"""Rigid-motion clustering of scene flow into moving-object masks.

A stochastic SE(3) clustering pass is run several times; masks pooled over
the runs are scored by cross-run agreement, filtered at the agreement
threshold, deduplicated with matrix NMS, and split into connected
components. The result is a set of disjoint high-precision object masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DegenerateDataError, ParameterError, ShapeError
from .stereo_geometry import CameraRig, SceneFlowField, backproject


@dataclass
class RigidMotion:
    """Rotation (3x3, det +1) and translation (meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        if r.shape != (3, 3):
            raise ShapeError(f"rotation must be 3x3, got {r.shape}")
        if np.linalg.norm(r.T @ r - np.eye(3)) >= 1e-9 or np.linalg.det(r) <= 0:
            raise ParameterError("rotation is not a proper orthonormal matrix")
        self.rotation = r
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "RigidMotion":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation


@dataclass
class MotionSegment:
    motion: RigidMotion
    mask: np.ndarray  # (H, W) bool
    inlier_count: int
    mean_residual: float


@dataclass
class InstanceMaskSet:
    """Confidence-scored binary masks; disjoint after pipeline finalization."""

    masks: list[np.ndarray] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)

    def __post_init__(self):
        if len(self.masks) != len(self.scores):
            raise ShapeError(f"{len(self.masks)} masks vs {len(self.scores)} scores")

    def __len__(self) -> int:
        return len(self.masks)


@dataclass
class SF2SE3Params:
    """Knobs of the stochastic rigid-motion clustering and its ensembling."""

    n_runs: int = 5
    max_motions: int = 8
    inlier_thresh: float = 0.15  # meters, 3D endpoint residual
    n_prop: int = 32  # proposals per round
    k_seed: int = 16  # correspondences per proposal fit
    window_radius: int = 40  # px, proposal sampling window
    min_area: int = 64  # px, minimum component/support size
    min_valid: int = 50  # minimum valid pixels to attempt clustering
    unexplained_stop: float = 0.05  # stop when this fraction is left unexplained
    keep_thresh: float = 0.8  # cross-run agreement cutoff
    nms_sigma: float = 0.5
    nms_final_thresh: float = 0.3

    def __post_init__(self):
        if self.n_runs < 1 or self.max_motions < 1 or self.n_prop < 1:
            raise ParameterError("n_runs, max_motions, n_prop must be >= 1")
        if self.k_seed < 3:
            raise ParameterError("k_seed must be >= 3 for an SE(3) fit")
        if self.inlier_thresh <= 0 or self.nms_sigma <= 0:
            raise ParameterError("inlier_thresh and nms_sigma must be positive")
        if not (0.0 <= self.keep_thresh <= 1.0):
            raise ParameterError(f"keep_thresh must be in [0,1], got {self.keep_thresh}")


def fit_se3(
    points_t: np.ndarray, points_t1: np.ndarray, weights: np.ndarray | None = None
) -> RigidMotion:
    """Least-squares rigid motion between paired 3D point sets (Kabsch).

    Minimizes sum_i w_i |R p_i + t - p'_i|^2. A reflection in the SVD
    solution is corrected by flipping the smallest singular direction.
    """
    a = np.asarray(points_t, dtype=np.float64)
    b = np.asarray(points_t1, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise ShapeError(f"point sets must share shape (N,3), got {a.shape} and {b.shape}")
    n = a.shape[0]
    if n < 3:
        raise DegenerateDataError(f"need at least 3 correspondences, got {n}")
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (n,):
            raise ShapeError(f"weights shape {w.shape} does not match {n} points")
        if np.any(w < 0) or w.sum() <= 0:
            raise ParameterError("weights must be nonnegative with positive sum")
        w = w / w.sum()

    ca = w @ a
    cb = w @ b
    h = (a - ca).T @ ((b - cb) * w[:, None])
    u, s, vt = np.linalg.svd(h)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        raise DegenerateDataError("point configuration is (near-)collinear")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidMotion(rotation=rot, translation=cb - rot @ ca)


def se3_residuals(motion: RigidMotion, points_t: np.ndarray, points_t1: np.ndarray) -> np.ndarray:
    """Per-point 3D endpoint error |R p + t - p'| in meters."""
    a = np.asarray(points_t, dtype=np.float64)
    b = np.asarray(points_t1, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"point sets must share shape, got {a.shape} and {b.shape}")
    return np.linalg.norm(motion.apply(a) - b, axis=-1)


def sf2se3_run(
    sf: SceneFlowField, rig: CameraRig, params: SF2SE3Params, seed: int
) -> list[MotionSegment]:
    """One stochastic clustering pass over the scene flow.

    Rounds propose rigid motions from locally sampled correspondences, keep
    the proposal explaining the most still-unexplained pixels, and refit on
    its inliers. Valid pixels are finally assigned to the motion with the
    smallest residual (if below the inlier threshold); the motion with the
    largest support is treated as background/ego motion and not returned.
    """
    valid = sf.valid
    n_valid = int(valid.sum())
    if n_valid < params.min_valid:
        return []

    h, w = valid.shape
    pts = backproject(sf.depth_t, rig).reshape(-1, 3)
    flat = np.flatnonzero(valid.ravel())
    pts_t = pts[flat]
    pts_t1 = pts_t + sf.flow3d.reshape(-1, 3)[flat]
    ys, xs = np.divmod(flat, w)

    rng = np.random.default_rng(seed)
    motions: list[RigidMotion] = []
    unexplained = np.ones(n_valid, dtype=bool)

    for _ in range(params.max_motions):
        open_idx = np.flatnonzero(unexplained)
        if len(open_idx) < max(params.min_area, int(params.unexplained_stop * n_valid)):
            break

        best_motion = None
        best_count = 0
        for _ in range(params.n_prop):
            anchor = open_idx[rng.integers(len(open_idx))]
            ay, ax = ys[anchor], xs[anchor]
            near = open_idx[
                (np.abs(ys[open_idx] - ay) <= params.window_radius)
                & (np.abs(xs[open_idx] - ax) <= params.window_radius)
            ]
            if len(near) < 3:
                continue
            pick = rng.choice(near, size=min(params.k_seed, len(near)), replace=False)
            try:
                motion = fit_se3(pts_t[pick], pts_t1[pick])
            except DegenerateDataError:
                continue
            res = se3_residuals(motion, pts_t[open_idx], pts_t1[open_idx])
            count = int((res < params.inlier_thresh).sum())
            if count > best_count:
                best_count = count
                best_motion = motion

        if best_motion is None or best_count < params.min_area:
            break

        # refit on all inliers image-wide, then mark them explained
        res_all = se3_residuals(best_motion, pts_t, pts_t1)
        inliers = res_all < params.inlier_thresh
        if inliers.sum() >= 3:
            try:
                best_motion = fit_se3(pts_t[inliers], pts_t1[inliers])
                res_all = se3_residuals(best_motion, pts_t, pts_t1)
            except DegenerateDataError:
                pass
        motions.append(best_motion)
        unexplained &= res_all >= params.inlier_thresh

    if not motions:
        return []

    # polish: alternate residual-based assignment with per-motion refits so a
    # proposal that mixed two objects collapses onto the one it actually owns
    for _ in range(3):
        residuals = np.stack([se3_residuals(m, pts_t, pts_t1) for m in motions])
        owner = residuals.argmin(axis=0)
        assigned = residuals[owner, np.arange(n_valid)] < params.inlier_thresh
        for k in range(len(motions)):
            member = assigned & (owner == k)
            if member.sum() >= 3:
                try:
                    motions[k] = fit_se3(pts_t[member], pts_t1[member])
                except DegenerateDataError:
                    pass

    residuals = np.stack([se3_residuals(m, pts_t, pts_t1) for m in motions])
    owner = residuals.argmin(axis=0)
    assigned = residuals[owner, np.arange(n_valid)] < params.inlier_thresh
    support = np.bincount(owner[assigned], minlength=len(motions))
    background = int(support.argmax())

    segments = []
    for k, motion in enumerate(motions):
        if k == background or support[k] == 0:
            continue
        member = assigned & (owner == k)
        mask = np.zeros(h * w, dtype=bool)
        mask[flat[member]] = True
        segments.append(
            MotionSegment(
                motion=motion,
                mask=mask.reshape(h, w),
                inlier_count=int(member.sum()),
                mean_residual=float(residuals[k, member].mean()),
            )
        )
    return segments


def ensemble_consistency(all_masks: list[np.ndarray], n: int) -> np.ndarray:
    """Cross-run agreement score per mask, in [0, 1].

    For each mask, the average (over its pixels) fraction of runs whose
    masks cover the pixel; the mask's own run counts once. Overlap counts
    are pooled over all masks, so per-run disjointness is assumed.
    """
    if n < 1:
        raise ParameterError(f"run count must be >= 1, got {n}")
    if not all_masks:
        return np.zeros(0)
    coverage = np.zeros(all_masks[0].shape, dtype=np.int64)
    for m in all_masks:
        if not m.any():
            raise ParameterError("consistency score undefined for an empty mask")
        coverage += m
    scores = np.array([coverage[m].mean() / n for m in all_masks])
    return np.clip(scores, 0.0, 1.0)


def filter_by_consistency(
    masks: list[np.ndarray], scores: np.ndarray, keep_thresh: float = 0.8
) -> tuple[list[np.ndarray], np.ndarray]:
    """Keep masks whose score reaches keep_thresh (inclusive), preserving order."""
    if len(masks) != len(scores):
        raise ShapeError(f"{len(masks)} masks vs {len(scores)} scores")
    keep = [i for i, s in enumerate(scores) if s >= keep_thresh]
    return [masks[i] for i in keep], np.asarray([scores[i] for i in keep])


def _pairwise_iou(masks: list[np.ndarray]) -> np.ndarray:
    flat = np.stack([m.ravel() for m in masks]).astype(np.float64)
    inter = flat @ flat.T
    areas = flat.sum(axis=1)
    union = areas[:, None] + areas[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou


def matrix_nms(
    masks: list[np.ndarray],
    scores: np.ndarray,
    sigma: float = 0.5,
    final_thresh: float = 0.3,
) -> InstanceMaskSet:
    """Gaussian-decay NMS followed by hard overlap resolution.

    Each mask's score is decayed by min over strictly higher-scored
    overlapping masks of exp(-IoU^2 / sigma); masks falling below
    final_thresh are dropped; surviving overlaps give each contested pixel
    to the highest decayed-score mask (ties to the earlier mask).
    """
    if len(masks) != len(scores):
        raise ShapeError(f"{len(masks)} masks vs {len(scores)} scores")
    if len(masks) == 0:
        return InstanceMaskSet()
    scores = np.asarray(scores, dtype=np.float64)
    if np.any(scores < 0) or np.any(scores > 1):
        raise ParameterError("scores must lie in [0, 1]")

    iou = _pairwise_iou(masks)
    decayed = scores.copy()
    for i in range(len(masks)):
        higher = (scores > scores[i]) & (iou[i] > 0)
        if higher.any():
            decayed[i] = scores[i] * np.exp(-(iou[i, higher] ** 2) / sigma).min()

    keep = np.flatnonzero(decayed >= final_thresh)
    order = keep[np.argsort(-decayed[keep], kind="stable")]
    taken = np.zeros(masks[0].shape, dtype=bool)
    resolved: dict[int, np.ndarray] = {}
    for i in order:
        m = masks[i] & ~taken
        taken |= m
        resolved[int(i)] = m

    out = InstanceMaskSet()
    for i in sorted(resolved):
        if resolved[i].any():
            out.masks.append(resolved[i])
            out.scores.append(float(decayed[i]))
    return out


_STRUCTURE = {
    4: np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool),
    8: np.ones((3, 3), dtype=bool),
}


def split_connected_components(
    mask: np.ndarray, connectivity: int = 8, min_area: int = 0
) -> list[np.ndarray]:
    """Partition a mask into maximal connected components, dropping small ones."""
    if connectivity not in _STRUCTURE:
        raise ParameterError(f"connectivity must be 4 or 8, got {connectivity}")
    labels, count = ndimage.label(mask, structure=_STRUCTURE[connectivity])
    out = []
    for i in range(1, count + 1):
        comp = labels == i
        if comp.sum() >= min_area:
            out.append(comp)
    return out


def instance_pseudo_masks(
    sf: SceneFlowField, rig: CameraRig, params: SF2SE3Params, base_seed: int
) -> InstanceMaskSet:
    """Full step: run ensemble, agreement filter, NMS, component split.

    Deterministic given base_seed; runs use seeds base_seed..base_seed+n-1.
    """
    pooled: list[np.ndarray] = []
    for i in range(params.n_runs):
        for seg in sf2se3_run(sf, rig, params, seed=base_seed + i):
            pooled.append(seg.mask)
    if not pooled:
        return InstanceMaskSet()

    scores = ensemble_consistency(pooled, params.n_runs)
    kept, kept_scores = filter_by_consistency(pooled, scores, params.keep_thresh)
    if not kept:
        return InstanceMaskSet()
    suppressed = matrix_nms(kept, kept_scores, params.nms_sigma, params.nms_final_thresh)

    out = InstanceMaskSet()
    for mask, score in zip(suppressed.masks, suppressed.scores):
        for comp in split_connected_components(mask, connectivity=8, min_area=params.min_area):
            out.masks.append(comp)
            out.scores.append(score)
    return out
