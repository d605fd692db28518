"""Analytically exact synthetic stereo-video fixtures.

Fronto-parallel textured rectangles translate in front of a static
background plane, so flow, disparity, and depth all have closed forms and
the pipeline's output can be checked against construction. Mover pixel
motion must be integral so rendered footprints quantize exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SceneSpecError
from .stereo_geometry import CameraRig
from .tensor_io import PanopticLabel

MAX_MOVERS = 16


@dataclass
class Mover:
    """Axis-aligned rectangle at constant depth, translating in-plane."""

    bounds: tuple[int, int, int, int]  # y0, x0, y1, x1 at t=0 (exclusive end)
    depth: float  # meters
    velocity: tuple[float, float]  # (vx, vy) meters per frame, in-plane


@dataclass
class SceneSpec:
    height: int = 80
    width: int = 120
    background_depth: float = 20.0
    texture_seed: int = 0
    movers: list[Mover] = field(default_factory=list)
    rig: CameraRig = None
    feature_dim: int = 8
    flow_noise: float = 0.0  # px, additive
    disp_noise: float = 0.0  # px, additive
    feature_noise: float = 0.05  # bounded, uniform
    n_steps: int = 2  # rendered flow pairs (frames t..t+n_steps)

    def __post_init__(self):
        if self.rig is None:
            self.rig = CameraRig(
                fx=100.0,
                fy=100.0,
                cx=self.width / 2 - 0.5,
                cy=self.height / 2 - 0.5,
                baseline=0.8,
            )
        if len(self.movers) > MAX_MOVERS:
            raise SceneSpecError(f"at most {MAX_MOVERS} movers supported")
        for i, m in enumerate(self.movers):
            if m.depth <= 0:
                raise SceneSpecError(f"mover {i}: depth must be positive")
            if m.depth >= self.background_depth:
                raise SceneSpecError(f"mover {i}: behind the background plane")
            for step in range(self.n_steps + 1):
                y0, x0, y1, x1 = self._rect_at(m, step)
                if y0 < 0 or x0 < 0 or y1 > self.height or x1 > self.width or y0 >= y1 or x0 >= x1:
                    raise SceneSpecError(f"mover {i} leaves the frame at step {step}")

    def pixel_shift(self, m: Mover) -> tuple[int, int]:
        """Per-frame image translation of a mover; must be integral."""
        dx = self.rig.fx * m.velocity[0] / m.depth
        dy = self.rig.fy * m.velocity[1] / m.depth
        if abs(dx - round(dx)) > 1e-9 or abs(dy - round(dy)) > 1e-9:
            raise SceneSpecError(
                f"mover pixel motion ({dx},{dy}) must be integral for exact rendering"
            )
        return int(round(dx)), int(round(dy))

    def _rect_at(self, m: Mover, step: int) -> tuple[int, int, int, int]:
        dx, dy = self.pixel_shift(m)
        y0, x0, y1, x1 = m.bounds
        return y0 + step * dy, x0 + step * dx, y1 + step * dy, x1 + step * dx


@dataclass
class FrameRender:
    """All pipeline inputs for one frame pair plus its ground truth."""

    left_t: np.ndarray
    right_t: np.ndarray
    left_t1: np.ndarray
    right_t1: np.ndarray
    flow_fw: np.ndarray
    flow_bw: np.ndarray
    disp_t_lr: np.ndarray
    disp_t_rl: np.ndarray
    disp_t1_lr: np.ndarray
    disp_t1_rl: np.ndarray
    features: np.ndarray
    low_res_pred: np.ndarray
    window_preds: list[tuple[np.ndarray, tuple[int, int]]]
    gt: PanopticLabel


def _paint_depth_and_class(spec: SceneSpec, step: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Depth, class, and instance maps at a time step (painter's order, far first)."""
    depth = np.full((spec.height, spec.width), spec.background_depth)
    classes = np.zeros((spec.height, spec.width), dtype=np.uint8)
    instances = np.zeros((spec.height, spec.width), dtype=np.uint16)
    order = sorted(range(len(spec.movers)), key=lambda i: -spec.movers[i].depth)
    for i in order:
        y0, x0, y1, x1 = spec._rect_at(spec.movers[i], step)
        depth[y0:y1, x0:x1] = spec.movers[i].depth
        classes[y0:y1, x0:x1] = i + 1
        instances[y0:y1, x0:x1] = i + 1
    return depth, classes, instances


def _right_disparity(spec: SceneSpec, step: int) -> np.ndarray:
    """Disparity seen from the right camera (left footprints shift by -d)."""
    fxb = spec.rig.fx * spec.rig.baseline
    disp = np.full((spec.height, spec.width), fxb / spec.background_depth)
    order = sorted(range(len(spec.movers)), key=lambda i: -spec.movers[i].depth)
    for i in order:
        m = spec.movers[i]
        d = fxb / m.depth
        y0, x0, y1, x1 = spec._rect_at(m, step)
        x0r = max(0, int(round(x0 - d)))
        x1r = max(0, int(round(x1 - d)))
        disp[y0:y1, x0r:x1r] = d
    return disp


def _render_image(
    spec: SceneSpec, classes: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    palette = np.array(
        [[90, 110, 90]] + [[200, 60, 60], [60, 90, 200], [220, 180, 50], [150, 60, 180]] * 4,
        dtype=np.float64,
    )
    img = palette[classes.astype(int) % len(palette)]
    img += rng.uniform(-8, 8, img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def _soft_onehot(classes: np.ndarray, k: int, confidence: float = 0.92) -> np.ndarray:
    probs = np.full((k,) + classes.shape, (1.0 - confidence) / (k - 1), dtype=np.float64)
    for c in range(k):
        probs[c][classes == c] = confidence
    return probs


def sliding_window_origins(
    full_hw: tuple[int, int], win_hw: tuple[int, int], stride_hw: tuple[int, int]
) -> list[tuple[int, int]]:
    """Window origins covering the full extent; final windows clamp to the border."""
    origins = []
    h, w = full_hw
    wh, ww = win_hw
    rows = list(range(0, max(h - wh, 0) + 1, max(stride_hw[0], 1)))
    cols = list(range(0, max(w - ww, 0) + 1, max(stride_hw[1], 1)))
    if rows[-1] != h - wh:
        rows.append(h - wh)
    if cols[-1] != w - ww:
        cols.append(w - ww)
    for r in rows:
        for c in cols:
            origins.append((r, c))
    return origins


def render_frame(spec: SceneSpec, step: int = 0) -> FrameRender:
    """Render the frame pair (step, step+1) with exact flow and disparity."""
    rng = np.random.default_rng((spec.texture_seed, step))
    fxb = spec.rig.fx * spec.rig.baseline

    depth_t, classes_t, instances_t = _paint_depth_and_class(spec, step)
    depth_t1, classes_t1, _ = _paint_depth_and_class(spec, step + 1)

    flow_fw = np.zeros((spec.height, spec.width, 2), dtype=np.float64)
    flow_bw = np.zeros_like(flow_fw)
    for i, m in enumerate(spec.movers):
        dx, dy = spec.pixel_shift(m)
        flow_fw[classes_t == i + 1] = (dx, dy)
        flow_bw[classes_t1 == i + 1] = (-dx, -dy)

    disp_t = fxb / depth_t
    disp_t1 = fxb / depth_t1
    disp_t_rl = _right_disparity(spec, step)
    disp_t1_rl = _right_disparity(spec, step + 1)

    if spec.flow_noise > 0:
        flow_fw = flow_fw + rng.normal(0, spec.flow_noise, flow_fw.shape)
        flow_bw = flow_bw + rng.normal(0, spec.flow_noise, flow_bw.shape)
    if spec.disp_noise > 0:
        disp_t = disp_t + rng.normal(0, spec.disp_noise, disp_t.shape)
        disp_t1 = disp_t1 + rng.normal(0, spec.disp_noise, disp_t1.shape)

    k = max(len(spec.movers) + 1, 2)  # degenerate 1-channel volumes help nothing
    directions = rng.normal(size=(k, spec.feature_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    feats = directions[classes_t.astype(int)]
    feats = feats + rng.uniform(-spec.feature_noise, spec.feature_noise, feats.shape)
    feats /= np.linalg.norm(feats, axis=-1, keepdims=True)
    features = np.moveaxis(feats, -1, 0)

    probs_full = _soft_onehot(classes_t, k)
    low_res = probs_full[:, ::2, ::2].copy()
    win_hw = (spec.height // 2, spec.width // 2)
    stride = (win_hw[0] // 2, win_hw[1] // 2)
    windows = [
        (probs_full[:, r : r + win_hw[0], c : c + win_hw[1]].copy(), (r, c))
        for r, c in sliding_window_origins((spec.height, spec.width), win_hw, stride)
    ]

    gt = PanopticLabel(classes_t.astype(np.uint8), instances_t.astype(np.uint16))
    gt.validate()

    return FrameRender(
        left_t=_render_image(spec, classes_t, rng),
        right_t=_render_image(spec, classes_t, rng),
        left_t1=_render_image(spec, classes_t1, rng),
        right_t1=_render_image(spec, classes_t1, rng),
        flow_fw=flow_fw.astype(np.float32),
        flow_bw=flow_bw.astype(np.float32),
        disp_t_lr=disp_t.astype(np.float32),
        disp_t_rl=disp_t_rl.astype(np.float32),
        disp_t1_lr=disp_t1.astype(np.float32),
        disp_t1_rl=disp_t1_rl.astype(np.float32),
        features=features.astype(np.float32),
        low_res_pred=low_res.astype(np.float32),
        window_preds=[(p.astype(np.float32), o) for p, o in windows],
        gt=gt,
    )


SCENARIOS = ("static", "one_mover", "two_movers", "noisy")


def make_scenario(name: str, seed: int = 0) -> SceneSpec:
    """Stock scene specifications used by the CLI and the acceptance tests."""
    if name == "static":
        return SceneSpec(texture_seed=seed)
    if name == "one_mover":
        return SceneSpec(
            texture_seed=seed,
            movers=[Mover(bounds=(28, 24, 52, 64), depth=8.0, velocity=(0.56, 0.0))],
        )
    if name == "two_movers":
        return SceneSpec(
            texture_seed=seed,
            movers=[
                Mover(bounds=(12, 16, 34, 52), depth=8.0, velocity=(0.56, 0.0)),
                Mover(bounds=(48, 66, 70, 104), depth=10.0, velocity=(0.0, 0.5)),
            ],
        )
    if name == "noisy":
        spec = make_scenario("two_movers", seed)
        spec.flow_noise = 0.04
        spec.disp_noise = 0.04
        spec.feature_noise = 0.15
        return spec
    raise SceneSpecError(f"unknown scenario {name!r}; choose from {SCENARIOS}")
