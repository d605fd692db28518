"""Depth, 3D scene flow, and validity masks from raw flow/disparity inputs.

Conventions: flow fields are (H, W, 2) arrays ordered (dx, dy) in pixels;
disparity is (H, W) in pixels, positive for the left->right direction; depth
and 3D points are in meters in the camera frame of the left image at time t.
Invalid pixels carry zeros plus a False validity bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .interp import bilinear_sample, bilinear_sample_masked, pixel_grid


@dataclass
class CameraRig:
    """Pinhole intrinsics plus stereo baseline (meters)."""

    fx: float
    fy: float
    cx: float
    cy: float
    baseline: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ParameterError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.baseline <= 0:
            raise ParameterError(f"baseline must be positive, got {self.baseline}")


@dataclass
class DepthMap:
    """Per-pixel depth (meters) with validity; invalid pixels store 0."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.valid.shape:
            raise ShapeError(f"depth {self.values.shape} vs valid {self.valid.shape}")


@dataclass
class SceneFlowField:
    """3D motion (meters, camera frame at t) per pixel, with source depth."""

    flow3d: np.ndarray  # (H, W, 3)
    depth_t: np.ndarray  # (H, W)
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        if self.flow3d.shape[:2] != self.valid.shape or self.flow3d.shape[2:] != (3,):
            raise ShapeError(f"flow3d {self.flow3d.shape} vs valid {self.valid.shape}")


def depth_from_disparity(disp: np.ndarray, rig: CameraRig, min_disp: float = 0.5) -> DepthMap:
    """Depth = fx * baseline / disparity; pixels with disparity < min_disp are invalid."""
    if min_disp <= 0:
        raise ParameterError(f"min_disp must be positive, got {min_disp}")
    valid = np.isfinite(disp) & (disp >= min_disp)
    values = np.zeros(disp.shape, dtype=np.float64)
    values[valid] = rig.fx * rig.baseline / disp[valid]
    return DepthMap(values=values, valid=valid)


def backproject(depth: DepthMap | np.ndarray, rig: CameraRig) -> np.ndarray:
    """Lift pixels to 3D camera-frame points (H, W, 3)."""
    values = depth.values if isinstance(depth, DepthMap) else np.asarray(depth, dtype=np.float64)
    h, w = values.shape
    gx, gy = pixel_grid(h, w)
    return np.stack(
        [(gx - rig.cx) * values / rig.fx, (gy - rig.cy) * values / rig.fy, values],
        axis=-1,
    )


def project(points: np.ndarray, rig: CameraRig) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole projection of (..., 3) points to pixel coords (x, y)."""
    z = points[..., 2]
    return rig.fx * points[..., 0] / z + rig.cx, rig.fy * points[..., 1] / z + rig.cy


def scene_flow(
    flow_fw: np.ndarray, depth_t: DepthMap, depth_t1: DepthMap, rig: CameraRig
) -> SceneFlowField:
    """3D displacement per pixel from forward flow and the two depth maps.

    Each valid pixel p is lifted via depth_t, its flow target q = p + flow is
    lifted via bilinearly sampled depth_t1, and the difference is the scene
    flow. Pixels whose target leaves the image or samples invalid depth are
    invalid.
    """
    if flow_fw.shape[:2] != depth_t.values.shape or depth_t.values.shape != depth_t1.values.shape:
        raise ShapeError(
            f"flow {flow_fw.shape}, depth_t {depth_t.values.shape}, depth_t1 {depth_t1.values.shape}"
        )
    h, w = depth_t.values.shape
    gx, gy = pixel_grid(h, w)
    qx = gx + flow_fw[..., 0]
    qy = gy + flow_fw[..., 1]

    d1, sample_ok = bilinear_sample_masked(depth_t1.values, depth_t1.valid, qx, qy)
    valid = depth_t.valid & sample_ok

    points_t = backproject(depth_t, rig)
    points_t1 = np.stack(
        [(qx - rig.cx) * d1 / rig.fx, (qy - rig.cy) * d1 / rig.fy, d1], axis=-1
    )
    flow3d = np.where(valid[..., None], points_t1 - points_t, 0.0)
    return SceneFlowField(flow3d=flow3d, depth_t=depth_t.values, valid=valid)


def fb_consistency(
    flow_fw: np.ndarray, flow_bw: np.ndarray, alpha1: float = 0.01, alpha2: float = 0.5
) -> np.ndarray:
    """Forward-backward flow agreement mask.

    A pixel passes iff |f_fw(p) + f_bw(p + f_fw(p))|^2 is below
    alpha1 * (|f_fw(p)|^2 + |f_bw(p + f_fw(p))|^2) + alpha2; targets outside
    the image fail.
    """
    if flow_fw.shape != flow_bw.shape:
        raise ShapeError(f"flow_fw {flow_fw.shape} vs flow_bw {flow_bw.shape}")
    h, w = flow_fw.shape[:2]
    gx, gy = pixel_grid(h, w)
    bw, inside = bilinear_sample(flow_bw, gx + flow_fw[..., 0], gy + flow_fw[..., 1])
    err = np.sum((flow_fw + bw) ** 2, axis=-1)
    bound = alpha1 * (np.sum(flow_fw**2, axis=-1) + np.sum(bw**2, axis=-1)) + alpha2
    return inside & (err < bound)


def lr_consistency(d_lr: np.ndarray, d_rl: np.ndarray, tol: float) -> np.ndarray:
    """Left-right disparity agreement: |d_lr(p) - d_rl(p - (d_lr(p), 0))| < tol."""
    if d_lr.shape != d_rl.shape:
        raise ShapeError(f"d_lr {d_lr.shape} vs d_rl {d_rl.shape}")
    h, w = d_lr.shape
    gx, gy = pixel_grid(h, w)
    warped, inside = bilinear_sample(d_rl, gx - d_lr, gy)
    return inside & (np.abs(d_lr - warped) < tol)


def combine_validity(*masks: np.ndarray) -> np.ndarray:
    """Logical AND of validity masks."""
    if not masks:
        raise ParameterError("combine_validity needs at least one mask")
    out = masks[0].astype(bool).copy()
    for m in masks[1:]:
        if m.shape != out.shape:
            raise ShapeError(f"mask shapes differ: {m.shape} vs {out.shape}")
        out &= m.astype(bool)
    return out
