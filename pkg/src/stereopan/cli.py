"""Command-line entry points for the pseudo-label pipeline.

Subcommands: pseudo-label, self-label, eval, visualize, synth. A JSON config
(--config) seeds every knob; any field can be overridden with
--section.key=value. CUPS_WORKERS controls frame parallelism. Exit codes:
0 ok, 1 input error, 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .errors import InputError, StereopanError
from .evaluation import (
    ClassMatching,
    ContingencyMatrix,
    PQStat,
    contingency,
    match_classes,
    apply_matching,
    mask_ap_dataset,
    semantic_metrics,
)
from .motion_segmentation import InstanceMaskSet, instance_pseudo_masks
from .panoptic_fusion import (
    ThingStuffStats,
    align_instance_semantics,
    assemble_panoptic,
    split_thing_stuff,
)
from .self_training import (
    ScoredInstances,
    ViewTransform,
    build_self_label,
    ensemble_instances,
    ensemble_semantics,
    invert_view,
)
from .semantic_labeling import (
    SoftSemantics,
    assemble_sliding_window,
    cosine_kmeans_assign,
    cosine_kmeans_fit,
    crf_refine,
    depth_guided_fuse,
    upsample_soft,
)
from .stereo_geometry import (
    DepthMap,
    combine_validity,
    depth_from_disparity,
    fb_consistency,
    lr_consistency,
    scene_flow,
)
from .synthetic import SCENARIOS, make_scenario, render_frame
from .tensor_io import (
    IGNORE_CLASS,
    DatasetManifest,
    FrameRecord,
    PanopticLabel,
    colorize_panoptic,
    read_image,
    read_npy,
    read_panoptic_png,
    write_image,
    write_npy,
    write_panoptic_png,
)

EXIT_OK, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2
_FRAME_SEED_STRIDE = 9973  # keeps per-frame motion seeds disjoint across runs


def _workers() -> int:
    raw = os.environ.get("CUPS_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise InputError(f"CUPS_WORKERS must be an integer, got {raw!r}")


# ---------------------------------------------------------------- pseudo-label


def _frame_semantics(
    frame: FrameRecord, cfg: PipelineConfig, full_hw
) -> tuple[SoftSemantics, SoftSemantics]:
    """Low-res + windowed high-res predictions for one frame.

    Prefers precomputed soft predictions from the manifest; falls back to
    clustering the frame's feature map when only features are given.
    """
    p_low = p_high = None
    if frame.low_res_pred:
        vol = read_npy(frame.low_res_pred).astype(np.float64)
        p_low = upsample_soft(SoftSemantics.from_unnormalized(vol), full_hw)
    if frame.window_preds:
        windows = [
            (SoftSemantics.from_unnormalized(read_npy(wp.path).astype(np.float64)), wp.origin)
            for wp in frame.window_preds
        ]
        p_high = assemble_sliding_window(windows, full_hw)
    if p_low is None and frame.features:
        feats = read_npy(frame.features).astype(np.float64)
        centroids = cosine_kmeans_fit(
            feats, cfg.semantic.k, cfg.semantic.kmeans_iters, cfg.seeds.base_seed
        )
        p_low = cosine_kmeans_assign(feats, centroids, cfg.semantic.temperature)
        if p_low.shape != tuple(full_hw):
            p_low = upsample_soft(p_low, full_hw)
    if p_low is None and p_high is None:
        raise InputError(f"frame {frame.name}: no semantic input (low_res_pred/window_preds/features)")
    return p_low if p_low is not None else p_high, p_high if p_high is not None else p_low


def _stage1_frame(frame: FrameRecord, cfg: PipelineConfig, rig, frame_index: int):
    geo = cfg.geometry
    flow_fw = read_npy(frame.flow_fw).astype(np.float64)
    flow_bw = read_npy(frame.flow_bw).astype(np.float64)
    disp_t_lr = read_npy(frame.disp_t_lr).astype(np.float64)
    disp_t_rl = read_npy(frame.disp_t_rl).astype(np.float64)
    disp_t1_lr = read_npy(frame.disp_t1_lr).astype(np.float64)
    disp_t1_rl = read_npy(frame.disp_t1_rl).astype(np.float64)
    full_hw = disp_t_lr.shape

    depth_t = depth_from_disparity(disp_t_lr, rig, geo.min_disp)
    depth_t1 = depth_from_disparity(disp_t1_lr, rig, geo.min_disp)
    # the t+1 left-right check lives in t+1 coordinates; fold it into the
    # t+1 depth validity so scene_flow applies it through the flow warp
    depth_t1 = DepthMap(
        depth_t1.values,
        combine_validity(depth_t1.valid, lr_consistency(disp_t1_lr, disp_t1_rl, geo.lr_tol)),
    )
    consistency = combine_validity(
        fb_consistency(flow_fw, flow_bw, geo.alpha1, geo.alpha2),
        lr_consistency(disp_t_lr, disp_t_rl, geo.lr_tol),
        depth_t.valid,
    )
    sf = scene_flow(flow_fw, DepthMap(depth_t.values, consistency), depth_t1, rig)
    masks = instance_pseudo_masks(
        sf, rig, cfg.motion, cfg.seeds.base_seed + _FRAME_SEED_STRIDE * frame_index
    )

    p_low, p_high = _frame_semantics(frame, cfg, full_hw)
    fused = depth_guided_fuse(p_low, p_high, depth_t)
    refined = crf_refine(read_image(frame.left_t), fused, cfg.semantic.crf)
    if refined.k > IGNORE_CLASS:
        raise InputError(f"frame {frame.name}: {refined.k} pseudo classes exceed the uint8 space")
    sem_argmax = refined.argmax().astype(np.uint8)
    return frame.name, sem_argmax, masks


def cmd_pseudo_label(args) -> int:
    cfg = _load_config(args)
    manifest = DatasetManifest.load(args.manifest)
    if not manifest.frames:
        raise InputError("no frames in manifest")
    out_dir = Path(args.out or manifest.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rig = manifest.camera

    started = time.perf_counter()
    results: dict[str, tuple] = {}
    errors: list[str] = []

    def run(idx_frame):
        idx, frame = idx_frame
        return _stage1_frame(frame, cfg, rig, idx)

    jobs = list(enumerate(manifest.frames))
    if _workers() > 1:
        with ThreadPoolExecutor(max_workers=_workers()) as pool:
            futures = [pool.submit(run, job) for job in jobs]
            outcomes = []
            for job, fut in zip(jobs, futures):
                try:
                    outcomes.append(fut.result())
                except (StereopanError, OSError) as exc:
                    errors.append(f"{job[1].name}: {exc}")
    else:
        outcomes = []
        for job in jobs:
            try:
                outcomes.append(run(job))
            except (StereopanError, OSError) as exc:
                errors.append(f"{job[1].name}: {exc}")

    n_classes = 0
    for name, sem, masks in outcomes:
        results[name] = (sem, masks)
        n_classes = max(n_classes, int(sem.max()) + 1)

    stats = ThingStuffStats(num_classes=max(n_classes, 1))
    for name in results:
        sem, masks = results[name]
        stats.update(sem, masks)
    split = split_thing_stuff(stats, cfg.fusion.psi_ts)

    summary_frames = []
    for name in results:
        sem, masks = results[name]
        classes = align_instance_semantics(sem, masks) if len(masks) else []
        label = assemble_panoptic(sem, masks, classes, split)
        write_panoptic_png(label, out_dir / f"{name}.sem.png", out_dir / f"{name}.inst.png")
        if len(masks):
            write_npy(out_dir / f"{name}.masks.npy", np.stack(masks.masks))
            write_npy(out_dir / f"{name}.kappa.npy", np.asarray(masks.scores, dtype=np.float32))
        summary_frames.append(
            {"name": name, "instances": int(len(label.instance_ids()))}
        )

    sidecar = {
        str(c): {"is_thing": bool(split.is_thing[c]), "ratio": float(split.ratio[c])}
        for c in range(stats.num_classes)
    }
    (out_dir / "thing_stuff.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    summary = {
        "frames": summary_frames,
        "errors": errors,
        "psi_ts": cfg.fusion.psi_ts,
        "elapsed_s": round(time.perf_counter() - started, 3),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")

    if errors:
        (out_dir / ".partial").write_text("\n".join(errors) + "\n")
        for line in errors:
            print(f"error: {line}", file=sys.stderr)
        return EXIT_INPUT
    marker = out_dir / ".partial"
    if marker.exists():
        marker.unlink()
    print(f"wrote {len(summary_frames)} label pairs to {out_dir}")
    return EXIT_OK


# ------------------------------------------------------------------------ eval


def _discover_pairs(pred_dir: Path, gt_dir: Path) -> list[str]:
    stems = sorted(p.name[: -len(".sem.png")] for p in pred_dir.glob("*.sem.png"))
    if not stems:
        raise InputError(f"no *.sem.png files in {pred_dir}")
    problems = []
    for stem in stems:
        for where, suffix in ((pred_dir, ".inst.png"), (gt_dir, ".sem.png"), (gt_dir, ".inst.png")):
            if not (where / f"{stem}{suffix}").exists():
                problems.append(f"{stem}: missing {where / (stem + suffix)}")
    gt_stems = sorted(p.name[: -len(".sem.png")] for p in gt_dir.glob("*.sem.png"))
    for stem in gt_stems:
        if stem not in stems:
            problems.append(f"{stem}: ground truth without prediction")
    if problems:
        raise InputError("unpaired files:\n  " + "\n  ".join(problems))
    return stems


def _load_pair(pred_dir: Path, gt_dir: Path, stem: str) -> tuple[PanopticLabel, PanopticLabel]:
    pred, _ = read_panoptic_png(pred_dir / f"{stem}.sem.png", pred_dir / f"{stem}.inst.png")
    gt, _ = read_panoptic_png(gt_dir / f"{stem}.sem.png", gt_dir / f"{stem}.inst.png")
    return pred, gt


def _restricted_matching(
    a: ContingencyMatrix,
    present_p: np.ndarray,
    present_g: np.ndarray,
    pred_is_thing: np.ndarray,
    gt_is_thing: np.ndarray,
) -> ClassMatching:
    """Match only ids that actually occur, then report in original id space."""
    p_ids = np.flatnonzero(present_p)
    g_ids = np.flatnonzero(present_g)
    sub = ContingencyMatrix(a.counts[np.ix_(p_ids, g_ids)])
    m = match_classes(sub, pred_is_thing[p_ids], gt_is_thing[g_ids])
    assignment = {int(p_ids[k]): int(g_ids[v]) for k, v in m.assignment.items()}
    via = {int(p_ids[k]): v for k, v in m.via.items()}
    return ClassMatching(assignment=assignment, via=via)


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    pred_dir = Path(args.pred_dir)
    gt_dir = Path(args.gt_dir)
    stems = _discover_pairs(pred_dir, gt_dir)

    n = IGNORE_CLASS  # ids are uint8 with 255 reserved for ignore
    a = ContingencyMatrix(np.zeros((n, n), dtype=np.int64))
    present_p = np.zeros(n, dtype=bool)
    present_g = np.zeros(n, dtype=bool)
    pred_thing_seen = np.zeros(n, dtype=bool)
    gt_thing_seen = np.zeros(n, dtype=bool)
    for stem in stems:
        pred, gt = _load_pair(pred_dir, gt_dir, stem)
        a = a.add(
            contingency(
                pred.semantic, gt.semantic, IGNORE_CLASS, n, n, pred_ignore_value=IGNORE_CLASS
            )
        )
        for label, present, thing_seen in (
            (pred, present_p, pred_thing_seen),
            (gt, present_g, gt_thing_seen),
        ):
            ids = np.unique(label.semantic)
            present[ids[ids != IGNORE_CLASS]] = True
            inst = label.instance != 0
            if inst.any():
                thing_seen[np.unique(label.semantic[inst])] = True

    sidecar_path = pred_dir / "thing_stuff.json"
    if sidecar_path.exists():
        sidecar = json.loads(sidecar_path.read_text())
        pred_is_thing = np.zeros(n, dtype=bool)
        for key, entry in sidecar.items():
            if int(key) < n:
                pred_is_thing[int(key)] = bool(entry["is_thing"])
    else:
        pred_is_thing = pred_thing_seen
    gt_is_thing = gt_thing_seen

    matching = _restricted_matching(a, present_p, present_g, pred_is_thing, gt_is_thing)

    stat = PQStat()
    matched_counts = ContingencyMatrix(np.zeros((n, n), dtype=np.int64))
    ap_pairs = []
    have_instances = all(
        (pred_dir / f"{stem}.masks.npy").exists() and (pred_dir / f"{stem}.kappa.npy").exists()
        for stem in stems
    )
    for stem in stems:
        pred, gt = _load_pair(pred_dir, gt_dir, stem)
        mapped = apply_matching(pred, matching)
        stat.update(mapped, gt)
        matched_counts = matched_counts.add(
            contingency(
                mapped.semantic, gt.semantic, IGNORE_CLASS, n, n, pred_ignore_value=IGNORE_CLASS
            )
        )
        if have_instances:
            masks = read_npy(pred_dir / f"{stem}.masks.npy")
            kappa = read_npy(pred_dir / f"{stem}.kappa.npy").astype(np.float64)
            gt_masks = [gt.instance == i for i in gt.instance_ids()]
            ap_pairs.append((ScoredInstances(masks.astype(np.float64), kappa), gt_masks))

    gt_things = set(np.flatnonzero(gt_is_thing).tolist())
    pq = stat.report(thing_classes=gt_things)
    miou, acc, _ = semantic_metrics(matched_counts)

    report = pq.to_dict()
    report["mIoU"] = miou
    report["Acc"] = acc
    if ap_pairs:
        report.update(mask_ap_dataset(ap_pairs, np.asarray(cfg.eval.thresholds())).to_dict())
    report["matching"] = {
        "assignment": {str(k): v for k, v in sorted(matching.assignment.items())},
        "via": {str(k): v for k, v in sorted(matching.via.items())},
    }
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


# ------------------------------------------------------------------ self-label


def cmd_self_label(args) -> int:
    cfg = _load_config(args)
    bundle = Path(args.bundle_dir)
    meta_path = bundle / "views.json"
    if not meta_path.exists():
        raise InputError(f"missing view metadata {meta_path}")
    meta = json.loads(meta_path.read_text())
    try:
        canonical = (int(meta["canonical_size"][0]), int(meta["canonical_size"][1]))
        views = meta["views"]
    except (KeyError, IndexError, TypeError) as exc:
        raise InputError(f"{meta_path}: malformed view metadata: {exc}")
    if not views:
        raise InputError(f"{meta_path}: no views listed")

    sems, insts = [], []
    for v in views:
        try:
            t = ViewTransform(scale=float(v.get("scale", 1.0)), hflip=bool(v.get("hflip", False)))
            sem_vol = read_npy(bundle / v["semantic"]).astype(np.float64)
        except KeyError as exc:
            raise InputError(f"{meta_path}: view missing key {exc}")
        sems.append(invert_view(SoftSemantics.from_unnormalized(sem_vol), t, canonical))
        if "masks" in v and "kappa" in v:
            masks = read_npy(bundle / v["masks"]).astype(np.float64)
            kappa = read_npy(bundle / v["kappa"]).astype(np.float64)
            insts.append(invert_view(ScoredInstances(masks, kappa), t, canonical))
        else:
            insts.append(ScoredInstances.empty(canonical))

    sem = ensemble_semantics(sems)
    instances = ensemble_instances(insts, cfg.selflabel.group_iou)
    label = build_self_label(sem, instances, cfg.selflabel.gamma, cfg.selflabel.zeta_hat)

    out_dir = Path(args.out or bundle)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = args.name or "self_label"
    write_panoptic_png(label, out_dir / f"{stem}.sem.png", out_dir / f"{stem}.inst.png")
    print(f"wrote {out_dir / (stem + '.sem.png')}")
    return EXIT_OK


# ------------------------------------------------------------------- visualize


def cmd_visualize(args) -> int:
    paths: list[Path] = []
    for target in args.labels:
        p = Path(target)
        if p.is_dir():
            paths.extend(sorted(p.glob("*.sem.png")))
        else:
            paths.append(p)
    if not paths:
        raise InputError("no label files found")
    out_dir = Path(args.out) if args.out else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    for sem_path in paths:
        if not sem_path.name.endswith(".sem.png"):
            raise InputError(f"{sem_path}: expected a *.sem.png path")
        stem = sem_path.name[: -len(".sem.png")]
        inst_path = sem_path.with_name(f"{stem}.inst.png")
        label, _ = read_panoptic_png(sem_path, inst_path)
        rgb = colorize_panoptic(label, args.seed)
        target = (out_dir or sem_path.parent) / f"{stem}.vis.png"
        write_image(target, rgb)
        print(f"wrote {target}")
    return EXIT_OK


# ----------------------------------------------------------------------- synth


def _synth_config(seed: int) -> PipelineConfig:
    cfg = PipelineConfig()
    cfg.seeds.base_seed = seed
    cfg.motion.window_radius = 24
    cfg.semantic.crf.max_side = 48
    cfg.semantic.crf.iterations = 2
    return cfg


def cmd_synth(args) -> int:
    out = Path(args.out_dir)
    inputs = out / "inputs"
    gt_dir = out / "gt"
    inputs.mkdir(parents=True, exist_ok=True)
    gt_dir.mkdir(parents=True, exist_ok=True)

    spec = make_scenario(args.scenario, args.seed)
    spec.n_steps = args.frames
    frames = []
    for step in range(args.frames):
        name = f"frame_{step:03d}"
        r = render_frame(spec, step)
        record = {"name": name}
        for key in ("left_t", "right_t", "left_t1", "right_t1"):
            path = inputs / f"{name}.{key}.png"
            write_image(path, getattr(r, key))
            record[key] = str(path.relative_to(out))
        for key in (
            "flow_fw",
            "flow_bw",
            "disp_t_lr",
            "disp_t_rl",
            "disp_t1_lr",
            "disp_t1_rl",
            "features",
            "low_res_pred",
        ):
            path = inputs / f"{name}.{key}.npy"
            write_npy(path, getattr(r, key))
            record[key] = str(path.relative_to(out))
        wins = []
        for i, (probs, origin) in enumerate(r.window_preds):
            path = inputs / f"{name}.win_{i:02d}.npy"
            write_npy(path, probs)
            wins.append({"path": str(path.relative_to(out)), "origin": list(origin)})
        record["window_preds"] = wins
        write_panoptic_png(r.gt, gt_dir / f"{name}.sem.png", gt_dir / f"{name}.inst.png")
        frames.append(record)

    manifest = {
        "camera": {
            "fx": spec.rig.fx,
            "fy": spec.rig.fy,
            "cx": spec.rig.cx,
            "cy": spec.rig.cy,
            "baseline": spec.rig.baseline,
        },
        "output_dir": "labels",
        "frames": frames,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    _synth_config(args.seed).save(out / "config.json")
    print(f"wrote {args.frames}-frame {args.scenario} fixture to {out}")
    return EXIT_OK


# ------------------------------------------------------------------------ main


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are input errors
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if getattr(args, "config", None) else PipelineConfig()
    overrides = [o for o in getattr(args, "overrides", []) or []]
    if overrides:
        cfg.apply_overrides(overrides)
    return cfg


def build_parser() -> _Parser:
    parser = _Parser(prog="stereopan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pseudo-label", help="generate panoptic pseudo labels from a manifest")
    p.add_argument("manifest")
    p.add_argument("--config")
    p.add_argument("--out", help="output directory (default: manifest output_dir)")
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("eval", help="evaluate predictions against ground truth")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")
    p.add_argument("--config")
    p.add_argument("--out", help="write the report JSON here as well")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("self-label", help="fuse augmented predictions into a self-label")
    p.add_argument("bundle_dir")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--name", help="output file stem (default: self_label)")
    p.set_defaults(func=cmd_self_label)

    p = sub.add_parser("visualize", help="render label files as RGB images")
    p.add_argument("labels", nargs="+", help="*.sem.png files or directories")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("synth", help="write a synthetic fixture (inputs, gt, manifest)")
    p.add_argument("out_dir")
    p.add_argument("--scenario", choices=SCENARIOS, default="two_movers")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=2)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    known, extra = build_parser().parse_known_args(argv)
    overrides = []
    for item in extra:
        if item.startswith("--") and "." in item.split("=", 1)[0] and "=" in item:
            overrides.append(item[2:])
        else:
            print(f"stereopan: error: unrecognized argument {item!r}", file=sys.stderr)
            return EXIT_INPUT
    known.overrides = overrides
    try:
        return known.func(known)
    except (InputError, FileNotFoundError) as exc:
        print(f"stereopan: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except StereopanError as exc:
        print(f"stereopan: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
