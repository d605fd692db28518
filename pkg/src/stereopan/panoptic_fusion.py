"""Fusing instance masks with semantics into panoptic pseudo labels.

Thing/stuff designation is a dataset-level statistic: a pseudo class whose
pixels fall under instance masks often enough (ratio >= psi_ts) is a thing.
Thing pixels not covered by any instance mask become ignore.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, DomainError, ParameterError
from .motion_segmentation import InstanceMaskSet
from .tensor_io import IGNORE_CLASS, PanopticLabel, new_instance_map


@dataclass
class ThingStuffStats:
    """Per-class pixel counts: total, and inside any instance mask."""

    num_classes: int
    inside: np.ndarray = field(default=None)
    total: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.inside is None:
            self.inside = np.zeros(self.num_classes, dtype=np.int64)
        if self.total is None:
            self.total = np.zeros(self.num_classes, dtype=np.int64)

    def update(self, semantic_map: np.ndarray, masks: InstanceMaskSet) -> None:
        sem = np.asarray(semantic_map)
        if sem.max(initial=0) >= self.num_classes:
            raise DomainError(
                f"class id {int(sem.max())} outside the {self.num_classes}-class space"
            )
        self.total += np.bincount(sem.ravel(), minlength=self.num_classes)
        if len(masks):
            union = np.zeros(sem.shape, dtype=bool)
            for m in masks.masks:
                union |= m
            self.inside += np.bincount(sem[union].ravel(), minlength=self.num_classes)

    def merge(self, other: "ThingStuffStats") -> None:
        self.inside += other.inside
        self.total += other.total

    def ratios(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            r = np.where(self.total > 0, self.inside / np.maximum(self.total, 1), 0.0)
        return r


@dataclass
class ThingStuffSplit:
    ratio: np.ndarray
    is_thing: np.ndarray
    threshold_used: float


def split_thing_stuff(stats: ThingStuffStats, psi_ts: float = 0.08) -> ThingStuffSplit:
    """Designate classes with instance-coverage ratio >= psi_ts as things."""
    if not (0.0 < psi_ts < 1.0):
        raise ParameterError(f"psi_ts must be in (0,1), got {psi_ts}")
    ratio = stats.ratios()
    is_thing = (ratio >= psi_ts) & (stats.total > 0)
    return ThingStuffSplit(ratio=ratio, is_thing=is_thing, threshold_used=psi_ts)


def align_instance_semantics(semantic_map: np.ndarray, masks: InstanceMaskSet) -> list[int]:
    """Most frequent semantic id under each mask; ties go to the smaller id."""
    sem = np.asarray(semantic_map)
    out = []
    for m in masks.masks:
        if not m.any():
            raise ParameterError("cannot align an empty instance mask")
        out.append(int(np.bincount(sem[m].ravel()).argmax()))
    return out


def assemble_panoptic(
    semantic_map: np.ndarray,
    masks: InstanceMaskSet,
    mask_classes: list[int],
    split: ThingStuffSplit,
) -> PanopticLabel:
    """Final pseudo label: stuff keeps semantics, masks become instances,
    thing pixels without a mask become ignore.

    Masks whose aligned class lands in the stuff partition are dropped;
    their pixels keep the plain stuff semantics.
    """
    if len(masks) != len(mask_classes):
        raise ParameterError(f"{len(masks)} masks vs {len(mask_classes)} classes")
    if len(masks) > np.iinfo(np.uint16).max:
        raise CapacityError(f"{len(masks)} instances exceed the uint16 id space")
    sem = np.asarray(semantic_map).astype(np.uint8)

    kept = [
        (m, c) for m, c in zip(masks.masks, mask_classes) if split.is_thing[c]
    ]

    out_sem = sem.copy()
    thing_pixel = split.is_thing[sem]
    out_sem[thing_pixel] = IGNORE_CLASS
    final_masks = []
    for m, c in kept:
        out_sem[m] = c
        final_masks.append(m)
    out_inst = new_instance_map(sem.shape, final_masks)

    label = PanopticLabel(out_sem, out_inst)
    label.validate()
    return label
