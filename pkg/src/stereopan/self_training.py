"""Label-side machinery for bootstrapping and self-training.

Covers augmentation inversion, cross-view ensembling, the confidence
thresholds for semantic and instance self-labels, the loss-dropping overlap
indicator, and copy-paste compositing. No gradients or network state here;
everything maps label tensors to label tensors, deterministically per seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, ParameterError, ShapeError
from .interp import bilinear_resize
from .semantic_labeling import SoftSemantics
from .tensor_io import IGNORE_CLASS, PanopticLabel, new_instance_map

BINARIZE_AT = 0.5


@dataclass
class ViewTransform:
    """Augmentation of one prediction view: uniform scale then optional h-flip."""

    scale: float = 1.0
    hflip: bool = False

    def __post_init__(self):
        if self.scale <= 0:
            raise ParameterError(f"scale must be positive, got {self.scale}")

    def output_size(self, canonical_size: tuple[int, int]) -> tuple[int, int]:
        h, w = canonical_size
        return max(1, round(h * self.scale)), max(1, round(w * self.scale))


@dataclass
class ScoredInstances:
    """Soft instance masks (J, H, W) in [0,1] with per-instance confidence."""

    masks: np.ndarray
    kappa: np.ndarray

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=np.float64)
        self.kappa = np.asarray(self.kappa, dtype=np.float64)
        if self.masks.ndim != 3:
            raise ShapeError(f"masks must be (J,H,W), got {self.masks.shape}")
        if self.kappa.shape != (self.masks.shape[0],):
            raise ShapeError(f"{self.masks.shape[0]} masks vs kappa {self.kappa.shape}")

    def __len__(self) -> int:
        return self.masks.shape[0]

    @classmethod
    def empty(cls, shape: tuple[int, int]) -> "ScoredInstances":
        return cls(np.zeros((0,) + shape), np.zeros(0))


def apply_view(pred: SoftSemantics | ScoredInstances, t: ViewTransform) -> SoftSemantics | ScoredInstances:
    """Produce the augmented view of a canonical prediction (for fixtures/tests)."""
    if isinstance(pred, SoftSemantics):
        size = t.output_size(pred.shape)
        vol = np.stack([bilinear_resize(c, size) for c in pred.probs])
        if t.hflip:
            vol = vol[:, :, ::-1]
        return SoftSemantics.from_unnormalized(vol)
    size = t.output_size(pred.masks.shape[1:])
    masks = np.stack([bilinear_resize(m, size) for m in pred.masks]) if len(pred) else np.zeros((0,) + size)
    if t.hflip:
        masks = masks[:, :, ::-1]
    return ScoredInstances(np.clip(masks, 0, 1), pred.kappa.copy())


def invert_view(
    pred: SoftSemantics | ScoredInstances, t: ViewTransform, canonical_size: tuple[int, int]
) -> SoftSemantics | ScoredInstances:
    """Map a prediction made under ``t`` back to the canonical frame.

    A pure flip is exact; rescaling resamples bilinearly and renormalizes.
    """
    canonical_size = tuple(canonical_size)
    if isinstance(pred, SoftSemantics):
        vol = pred.probs[:, :, ::-1] if t.hflip else pred.probs
        if vol.shape[1:] != canonical_size:
            vol = np.stack([bilinear_resize(c, canonical_size) for c in vol])
            return SoftSemantics.from_unnormalized(vol)
        return SoftSemantics(np.ascontiguousarray(vol).copy())
    masks = pred.masks[:, :, ::-1] if t.hflip else pred.masks
    if len(pred) and masks.shape[1:] != canonical_size:
        masks = np.clip(np.stack([bilinear_resize(m, canonical_size) for m in masks]), 0, 1)
    elif not len(pred):
        masks = np.zeros((0,) + canonical_size)
    return ScoredInstances(np.ascontiguousarray(masks).copy(), pred.kappa.copy())


def ensemble_semantics(aligned_preds: list[SoftSemantics]) -> SoftSemantics:
    """Average of per-view distributions."""
    if not aligned_preds:
        raise ParameterError("need at least one view")
    first = aligned_preds[0]
    for p in aligned_preds[1:]:
        if p.probs.shape != first.probs.shape:
            raise ShapeError(f"view shapes differ: {p.probs.shape} vs {first.probs.shape}")
    mean = np.mean([p.probs for p in aligned_preds], axis=0)
    return SoftSemantics.from_unnormalized(mean)


def _binary_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return inter / union if union else 0.0


def ensemble_instances(
    aligned: list[ScoredInstances], group_iou: float = 0.5
) -> ScoredInstances:
    """Greedy cross-view grouping by mask overlap, then per-group averaging.

    Masks are visited in descending confidence; each joins the best-matching
    existing group (IoU of binarized masks against the group representative
    >= group_iou) or starts a new one. Group mask and confidence are means
    over members.
    """
    pool_masks: list[np.ndarray] = []
    pool_kappa: list[float] = []
    for s in aligned:
        for j in range(len(s)):
            pool_masks.append(s.masks[j])
            pool_kappa.append(float(s.kappa[j]))
    if not pool_masks:
        shape = aligned[0].masks.shape[1:] if aligned else (0, 0)
        return ScoredInstances.empty(shape)

    order = np.argsort(-np.asarray(pool_kappa), kind="stable")
    reps: list[np.ndarray] = []
    groups: list[list[int]] = []
    for idx in order:
        binary = pool_masks[idx] >= BINARIZE_AT
        best, best_iou = -1, 0.0
        for g, rep in enumerate(reps):
            iou = _binary_iou(binary, rep)
            if iou >= group_iou and iou > best_iou:
                best, best_iou = g, iou
        if best < 0:
            reps.append(binary)
            groups.append([idx])
        else:
            groups[best].append(idx)

    masks = np.stack([np.mean([pool_masks[i] for i in g], axis=0) for g in groups])
    kappa = np.array([np.mean([pool_kappa[i] for i in g]) for g in groups])
    return ScoredInstances(masks, kappa)


def threshold_instances(s: ScoredInstances, gamma: float) -> ScoredInstances:
    """Keep instances with confidence strictly above gamma."""
    if not (0.0 <= gamma <= 1.0):
        raise ParameterError(f"gamma must be in [0,1], got {gamma}")
    keep = s.kappa > gamma
    return ScoredInstances(s.masks[keep], s.kappa[keep])


def semantic_self_label(p: SoftSemantics, zeta_hat: float) -> np.ndarray:
    """Argmax label map with per-class confidence gating.

    Each class's cutoff is zeta_hat times its spatial peak probability;
    pixels whose winning probability falls below the winner's cutoff become
    ignore (255).
    """
    if not (0.0 <= zeta_hat <= 1.0):
        raise ParameterError(f"zeta_hat must be in [0,1], got {zeta_hat}")
    if p.k > IGNORE_CLASS:
        raise CapacityError(f"{p.k} classes exceed the uint8 label space")
    zeta = zeta_hat * p.probs.reshape(p.k, -1).max(axis=1)
    kstar = p.probs.argmax(axis=0)
    pmax = p.probs.max(axis=0)
    label = kstar.astype(np.uint8)
    label[pmax < zeta[kstar]] = IGNORE_CLASS
    return label


def drop_loss_indicator(
    pred_masks: list[np.ndarray], pseudo_thing_masks: list[np.ndarray], tau_iou: float = 0.4
) -> np.ndarray:
    """Which predictions overlap a pseudo mask strongly enough to supervise.

    flag_j is True iff max_i IoU(pred_j, pseudo_i) > tau_iou; with no pseudo
    masks nothing is flagged, so unmatched predictions stay unpenalized.
    """
    flags = np.zeros(len(pred_masks), dtype=bool)
    if not pseudo_thing_masks:
        return flags
    for j, pred in enumerate(pred_masks):
        best = max(_binary_iou(pred.astype(bool), q.astype(bool)) for q in pseudo_thing_masks)
        flags[j] = best > tau_iou
    return flags


def copy_paste(
    target_image: np.ndarray,
    target_label: PanopticLabel,
    bank: list[tuple[np.ndarray, np.ndarray, int]],
    rng_seed: int,
    n_range: tuple[int, int] = (1, 8),
) -> tuple[np.ndarray, PanopticLabel]:
    """Composite confident object crops into an image and its label.

    Bank entries are (RGB patch, soft mask, class id). Draws n uniform in
    n_range, picks entries and placements from the seed; later pastes
    occlude earlier ones. Pasted pixels get fresh instance ids and the
    entry's class id. Deterministic per seed.
    """
    if not bank:
        raise ParameterError("paste bank is empty")
    h, w = target_label.shape
    rng = np.random.default_rng(rng_seed)
    n = int(rng.integers(n_range[0], n_range[1] + 1))

    image = target_image.copy()
    sem = target_label.semantic.copy()
    inst = target_label.instance.copy()
    base_id = int(inst.max())
    if base_id + n > np.iinfo(np.uint16).max:
        raise CapacityError(f"{n} pastes would exhaust the uint16 id space")

    paste_layer = np.full((h, w), -1, dtype=np.int32)
    paste_class = []
    for i in range(n):
        patch, soft_mask, class_id = bank[int(rng.integers(len(bank)))]
        ph, pw = soft_mask.shape
        if ph > h or pw > w:
            raise ParameterError(f"patch ({ph},{pw}) does not fit the ({h},{w}) target")
        y0 = int(rng.integers(0, h - ph + 1))
        x0 = int(rng.integers(0, w - pw + 1))
        on = soft_mask >= BINARIZE_AT
        region = (slice(y0, y0 + ph), slice(x0, x0 + pw))
        image[region][on] = patch[on]
        paste_layer[region][on] = i
        paste_class.append(class_id)

    # number surviving pastes in paste order; fully occluded pastes vanish,
    # pre-existing instance ids are left untouched
    next_id = base_id
    for i in range(n):
        owned = paste_layer == i
        if not owned.any():
            continue
        next_id += 1
        sem[owned] = paste_class[i]
        inst[owned] = next_id
    return image, PanopticLabel(sem, inst)


def build_self_label(
    sem: SoftSemantics, instances: ScoredInstances, gamma: float, zeta_hat: float
) -> PanopticLabel:
    """Panoptic self-label: thresholded semantics plus confident instances.

    Instance classes come from a majority vote over the pre-threshold argmax
    inside each binarized mask; overlaps are resolved in confidence order.
    """
    label = semantic_self_label(sem, zeta_hat)
    kept = threshold_instances(instances, gamma)
    argmax = sem.argmax()

    order = np.argsort(-kept.kappa, kind="stable")
    taken = np.zeros(sem.shape, dtype=bool)
    final_masks = []
    for j in order:
        m = (kept.masks[j] >= BINARIZE_AT) & ~taken
        if not m.any():
            continue
        taken |= m
        cls = int(np.bincount(argmax[m].ravel()).argmax())
        label[m] = cls
        final_masks.append(m)
    inst = new_instance_map(sem.shape, final_masks)
    out = PanopticLabel(label, inst)
    out.validate()
    return out
