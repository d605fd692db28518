"""Evaluation of unsupervised panoptic predictions.

Pseudo-class ids are aligned to ground-truth ids by pixel overlap: Hungarian
matching runs separately inside the thing block and the stuff block of the
contingency matrix, and pseudo ids left over (more pseudo than ground-truth
classes) fall back to their maximum-overlap ground-truth id within the same
block. PQ/SQ/RQ, mIoU/Acc, and class-agnostic mask AP follow their standard
definitions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigurationError, DomainError, MappingError, ShapeError
from .self_training import ScoredInstances
from .tensor_io import IGNORE_CLASS, PanopticLabel

VOID_FRACTION = 0.5  # predictions mostly over gt-ignore are not false positives
MATCH_IOU = 0.5  # segment match requires IoU strictly above this


@dataclass
class ContingencyMatrix:
    """Pixel-overlap counts, pseudo classes (rows) x ground-truth classes (cols)."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2:
            raise ShapeError(f"counts must be 2-d, got {self.counts.shape}")

    def add(self, other: "ContingencyMatrix") -> "ContingencyMatrix":
        p = max(self.counts.shape[0], other.counts.shape[0])
        g = max(self.counts.shape[1], other.counts.shape[1])
        out = np.zeros((p, g), dtype=np.int64)
        out[: self.counts.shape[0], : self.counts.shape[1]] += self.counts
        out[: other.counts.shape[0], : other.counts.shape[1]] += other.counts
        return ContingencyMatrix(out)


def contingency(
    pred_sem: np.ndarray,
    gt_sem: np.ndarray,
    gt_ignore_value: int = IGNORE_CLASS,
    n_pred: int | None = None,
    n_gt: int | None = None,
    pred_ignore_value: int | None = None,
) -> ContingencyMatrix:
    """Count overlapping pixels of each pseudo class with each gt class.

    Ground-truth ignore pixels never count; optionally prediction-side
    ignore pixels are excluded too (pseudo labels carry them). Results are
    additive across images.
    """
    pred = np.asarray(pred_sem)
    gt = np.asarray(gt_sem)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} vs gt {gt.shape}")
    keep = gt != gt_ignore_value
    if pred_ignore_value is not None:
        keep &= pred != pred_ignore_value
    p = pred[keep].astype(np.int64)
    g = gt[keep].astype(np.int64)
    np_ = n_pred if n_pred is not None else (int(p.max()) + 1 if p.size else 1)
    ng = n_gt if n_gt is not None else (int(g.max()) + 1 if g.size else 1)
    if p.size and (p.max() >= np_ or g.max() >= ng):
        raise DomainError("class id outside the declared class space")
    counts = np.bincount(p * ng + g, minlength=np_ * ng).reshape(np_, ng)
    return ContingencyMatrix(counts)


def hungarian(cost: np.ndarray, maximize: bool = False) -> list[tuple[int, int]]:
    """Optimal one-to-one assignment of min(R, C) pairs."""
    cost = np.asarray(cost, dtype=np.float64)
    if np.isnan(cost).any():
        raise DomainError("cost matrix contains NaN")
    rows, cols = linear_sum_assignment(cost, maximize=maximize)
    return list(zip(rows.tolist(), cols.tolist()))


@dataclass
class ClassMatching:
    """Pseudo-id -> gt-id map with the mechanism that produced each entry."""

    assignment: dict[int, int]
    via: dict[int, str]  # 'hungarian' | 'max_overlap'


def match_classes(
    a: ContingencyMatrix, pred_is_thing: np.ndarray, gt_is_thing: np.ndarray
) -> ClassMatching:
    """Overlap-maximizing class matching, separate for things and stuff.

    Hungarian matching runs within each block over the pseudo ids with any
    overlap; pseudo ids it leaves over map to their maximum-overlap gt id,
    and all-zero rows map to the block's first gt id. Rows are canonicalized
    by content before solving, so the composed map does not depend on the
    numbering of pseudo ids (as long as overlap profiles are distinct).
    """
    pred_is_thing = np.asarray(pred_is_thing, dtype=bool)
    gt_is_thing = np.asarray(gt_is_thing, dtype=bool)
    if pred_is_thing.shape[0] != a.counts.shape[0] or gt_is_thing.shape[0] != a.counts.shape[1]:
        raise ShapeError(
            f"splits ({pred_is_thing.shape[0]},{gt_is_thing.shape[0]}) vs matrix {a.counts.shape}"
        )
    assignment: dict[int, int] = {}
    via: dict[int, str] = {}
    for thing in (True, False):
        p_ids = np.flatnonzero(pred_is_thing == thing)
        g_ids = np.flatnonzero(gt_is_thing == thing)
        if len(p_ids) == 0:
            continue
        if len(g_ids) == 0:
            kind = "thing" if thing else "stuff"
            raise ConfigurationError(
                f"pseudo {kind} classes exist but the ground truth has none"
            )
        block = a.counts[np.ix_(p_ids, g_ids)]
        nonzero = np.flatnonzero(block.sum(axis=1) > 0)
        canon = nonzero[np.lexsort(block[nonzero].T[::-1])] if len(nonzero) else nonzero
        for r, c in hungarian(block[canon], maximize=True):
            assignment[int(p_ids[canon[r]])] = int(g_ids[c])
            via[int(p_ids[canon[r]])] = "hungarian"
        for r in range(len(p_ids)):
            pid = int(p_ids[r])
            if pid in assignment:
                continue
            row = block[r]
            gid = int(g_ids[row.argmax()]) if row.max() > 0 else int(g_ids[0])
            assignment[pid] = gid
            via[pid] = "max_overlap"
    return ClassMatching(assignment=assignment, via=via)


def apply_matching(label: PanopticLabel, m: ClassMatching) -> PanopticLabel:
    """Remap semantic ids through the matching; instances and ignore persist."""
    sem = label.semantic
    present = np.unique(sem)
    present = present[present != IGNORE_CLASS]
    missing = [int(c) for c in present if int(c) not in m.assignment]
    if missing:
        raise MappingError(f"no matching entry for pseudo ids {missing}")
    lut = np.arange(256, dtype=np.uint8)
    for src, dst in m.assignment.items():
        lut[src] = dst
    return PanopticLabel(lut[sem], label.instance.copy())


def _segments(label: PanopticLabel) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Encode segments as dense indices; returns (index map, [(class, instance)]).

    Things are (class, instance-id) groups, stuff is one segment per class;
    ignore pixels get index -1.
    """
    sem = label.semantic.astype(np.int64)
    inst = label.instance.astype(np.int64)
    key = sem * 65536 + inst
    key[sem == IGNORE_CLASS] = -1
    uniq, index = np.unique(key, return_inverse=True)
    index = index.reshape(sem.shape)
    segs = []
    offset = 0
    if uniq.size and uniq[0] == -1:
        offset = 1
        index = index - 1  # ignore becomes -1
    for u in uniq[offset:]:
        segs.append((int(u // 65536), int(u % 65536)))
    return index, segs


@dataclass
class PQReport:
    per_class: dict[int, dict]
    pq: float
    sq: float
    rq: float
    pq_thing: float
    pq_stuff: float
    tp: int
    fp: int
    fn: int

    def to_dict(self) -> dict:
        return {
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
            "PQ": self.pq,
            "SQ": self.sq,
            "RQ": self.rq,
            "PQ_thing": self.pq_thing,
            "PQ_stuff": self.pq_stuff,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
        }


@dataclass
class PQStat:
    """Accumulates matched-segment statistics over many images."""

    iou_sum: dict[int, float] = field(default_factory=dict)
    tp: dict[int, int] = field(default_factory=dict)
    fp: dict[int, int] = field(default_factory=dict)
    fn: dict[int, int] = field(default_factory=dict)
    gt_things: set[int] = field(default_factory=set)

    def _bump(self, table: dict, cls: int, value) -> None:
        table[cls] = table.get(cls, 0) + value

    def update(self, pred: PanopticLabel, gt: PanopticLabel) -> None:
        if pred.shape != gt.shape:
            raise ShapeError(f"pred {pred.shape} vs gt {gt.shape}")
        p_index, p_segs = _segments(pred)
        g_index, g_segs = _segments(gt)
        self.gt_things.update(c for c, i in g_segs if i != 0)

        void = g_index < 0
        p_areas = np.bincount(p_index[p_index >= 0], minlength=len(p_segs))
        g_areas = np.bincount(g_index[g_index >= 0], minlength=len(g_segs))
        p_void = np.bincount(p_index[void & (p_index >= 0)], minlength=len(p_segs))

        both = (p_index >= 0) & (g_index >= 0)
        pairs = p_index[both] * len(g_segs) + g_index[both]
        inter_flat = np.bincount(pairs, minlength=len(p_segs) * len(g_segs))

        matched_p = np.zeros(len(p_segs), dtype=bool)
        matched_g = np.zeros(len(g_segs), dtype=bool)
        for flat in np.flatnonzero(inter_flat):
            pi, gi = divmod(int(flat), len(g_segs))
            if p_segs[pi][0] != g_segs[gi][0]:
                continue
            inter = inter_flat[flat]
            union = (p_areas[pi] - p_void[pi]) + g_areas[gi] - inter
            iou = inter / union if union else 0.0
            if iou > MATCH_IOU:
                cls = p_segs[pi][0]
                self._bump(self.tp, cls, 1)
                self._bump(self.iou_sum, cls, float(iou))
                matched_p[pi] = True
                matched_g[gi] = True

        for pi, (cls, _) in enumerate(p_segs):
            if not matched_p[pi] and p_void[pi] <= VOID_FRACTION * p_areas[pi]:
                self._bump(self.fp, cls, 1)
        for gi, (cls, _) in enumerate(g_segs):
            if not matched_g[gi]:
                self._bump(self.fn, cls, 1)

    def report(self, thing_classes: set[int] | None = None) -> PQReport:
        things = self.gt_things if thing_classes is None else set(thing_classes)
        classes = sorted(
            set(self.tp) | set(self.fp) | set(self.fn) | set(self.iou_sum)
        )
        per_class = {}
        for cls in classes:
            tp = self.tp.get(cls, 0)
            fp = self.fp.get(cls, 0)
            fn = self.fn.get(cls, 0)
            denom = tp + 0.5 * fp + 0.5 * fn
            if denom == 0:
                continue
            iou = self.iou_sum.get(cls, 0.0)
            sq = iou / tp if tp > 0 else 0.0
            rq = tp / denom
            per_class[cls] = {
                "pq": iou / denom,
                "sq": sq,
                "rq": rq,
                "tp": tp,
                "fp": fp,
                "fn": fn,
                "is_thing": cls in things,
            }

        def mean(vals):
            return float(np.mean(vals)) if vals else float("nan")

        pqs = [v["pq"] for v in per_class.values()]
        sqs = [v["sq"] for v in per_class.values()]
        rqs = [v["rq"] for v in per_class.values()]
        pq_thing = mean([v["pq"] for c, v in per_class.items() if c in things])
        pq_stuff = mean([v["pq"] for c, v in per_class.items() if c not in things])
        return PQReport(
            per_class=per_class,
            pq=mean(pqs),
            sq=mean(sqs),
            rq=mean(rqs),
            pq_thing=pq_thing,
            pq_stuff=pq_stuff,
            tp=sum(self.tp.values()),
            fp=sum(self.fp.values()),
            fn=sum(self.fn.values()),
        )


def panoptic_quality(
    pred: PanopticLabel, gt: PanopticLabel, thing_classes: set[int] | None = None
) -> PQReport:
    """Single-pair PQ; segments match when classes agree and IoU > 0.5."""
    stat = PQStat()
    stat.update(pred, gt)
    return stat.report(thing_classes)


def semantic_metrics(a_matched: ContingencyMatrix) -> tuple[float, float, np.ndarray]:
    """(mIoU, Acc, per-class IoU) from a square, matched contingency matrix."""
    c = a_matched.counts
    if c.shape[0] != c.shape[1]:
        raise ShapeError(f"matched matrix must be square, got {c.shape}")
    diag = np.diag(c).astype(np.float64)
    rows = c.sum(axis=1)
    cols = c.sum(axis=0)
    denom = rows + cols - diag
    iou = np.full(c.shape[0], np.nan)
    present = denom > 0
    iou[present] = diag[present] / denom[present]
    miou = float(np.nanmean(iou)) if present.any() else float("nan")
    total = c.sum()
    acc = float(diag.sum() / total) if total else float("nan")
    return miou, acc, iou


@dataclass
class MaskAPReport:
    ap: float
    ap50: float
    ap_small: float
    ap_medium: float
    ap_large: float

    def to_dict(self) -> dict:
        return {
            "AP": self.ap,
            "AP50": self.ap50,
            "AP_S": self.ap_small,
            "AP_M": self.ap_medium,
            "AP_L": self.ap_large,
        }


_RECALL_GRID = np.linspace(0.0, 1.0, 101)
AREA_BUCKETS = {
    "all": (0, np.inf),
    "small": (0, 32**2),
    "medium": (32**2, 96**2),
    "large": (96**2, np.inf),
}


def _mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return inter / union if union else 0.0


def _match_image(
    pred_binary: list[np.ndarray],
    scores: np.ndarray,
    gts: list[np.ndarray],
    gt_ignored: np.ndarray,
    iou_threshold: float,
) -> list[tuple[float, bool]]:
    """Greedy score-ordered matching; returns (score, is_tp) for counted preds.

    Predictions whose only admissible match is an out-of-bucket ground-truth
    mask are dropped from the ranking (neither TP nor FP).
    """
    order = np.argsort(-scores, kind="stable")
    gt_taken = np.zeros(len(gts), dtype=bool)
    out = []
    for idx in order:
        p = pred_binary[idx]
        best, best_iou = -1, 0.0
        best_ign = -1
        best_ign_iou = 0.0
        for gi, g in enumerate(gts):
            if gt_taken[gi]:
                continue
            iou = _mask_iou(p, g)
            if iou < iou_threshold:
                continue
            if gt_ignored[gi]:
                if iou > best_ign_iou:
                    best_ign, best_ign_iou = gi, iou
            elif iou > best_iou:
                best, best_iou = gi, iou
        if best >= 0:
            gt_taken[best] = True
            out.append((float(scores[idx]), True))
        elif best_ign >= 0:
            gt_taken[best_ign] = True
        else:
            out.append((float(scores[idx]), False))
    return out


def _ap_from_matches(matches: list[tuple[float, bool]], n_gt: int) -> float:
    if n_gt == 0:
        return float("nan")
    if not matches:
        return 0.0
    matches = sorted(matches, key=lambda sf: -sf[0])
    flags = np.array([f for _, f in matches])
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    # precision envelope, then 101-point interpolation
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    idx = np.searchsorted(recall, _RECALL_GRID, side="left")
    interp = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(interp.mean())


def mask_ap_dataset(
    pairs: list[tuple[ScoredInstances, list[np.ndarray]]],
    iou_thresholds: np.ndarray | None = None,
) -> MaskAPReport:
    """COCO-style class-agnostic mask AP pooled over many images.

    Mean over IoU thresholds 0.50:0.05:0.95 of the 101-point interpolated
    PR area; size buckets restrict ground truth by pixel area, and
    predictions matching only out-of-bucket ground truth are ignored.
    """
    if iou_thresholds is None:
        iou_thresholds = np.arange(0.5, 0.96, 0.05)
    prepared = []
    for preds, gts in pairs:
        binary = [m >= 0.5 for m in preds.masks]
        gts = [g.astype(bool) for g in gts]
        areas = np.array([g.sum() for g in gts])
        prepared.append((binary, preds.kappa, gts, areas))

    results = {}
    ap50 = float("nan")
    for name, (lo, hi) in AREA_BUCKETS.items():
        aps = []
        for t in iou_thresholds:
            matches: list[tuple[float, bool]] = []
            n_gt = 0
            for binary, scores, gts, areas in prepared:
                ignored = (
                    ~((areas >= lo) & (areas < hi)) if len(gts) else np.zeros(0, dtype=bool)
                )
                n_gt += int((~ignored).sum())
                matches.extend(_match_image(binary, scores, gts, ignored, t))
            aps.append(_ap_from_matches(matches, n_gt))
        results[name] = (
            float(np.nanmean(aps)) if not all(np.isnan(a) for a in aps) else float("nan")
        )
        if name == "all":
            ap50 = aps[0] if len(aps) else float("nan")
    return MaskAPReport(
        ap=results["all"],
        ap50=ap50,
        ap_small=results["small"],
        ap_medium=results["medium"],
        ap_large=results["large"],
    )


def mask_ap(
    preds: ScoredInstances,
    gts: list[np.ndarray],
    iou_thresholds: np.ndarray | None = None,
) -> MaskAPReport:
    """Single-image class-agnostic mask AP (see mask_ap_dataset)."""
    return mask_ap_dataset([(preds, gts)], iou_thresholds)
