"""File formats used across the pipeline.

Dense tensors travel as NPY v1.0 (C-order, little-endian, restricted dtype
set), panoptic labels as paired 8-bit/16-bit grayscale PNGs, and dataset
manifests as JSON. All loaders validate their inputs; label loaders repair
invariant violations instead of failing.
"""

from __future__ import annotations

import ast
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import CapacityError, DomainError, FormatError, ShapeError, UnsupportedError
from .stereo_geometry import CameraRig

NPY_MAGIC = b"\x93NUMPY"

# dtype <-> descr for the supported interchange subset
_DESCR_OF_DTYPE = {
    np.dtype(np.float32): "<f4",
    np.dtype(np.uint8): "|u1",
    np.dtype(np.uint16): "<u2",
    np.dtype(np.bool_): "|b1",
}
_DTYPE_OF_DESCR = {v: k for k, v in _DESCR_OF_DTYPE.items()}

IGNORE_CLASS = 255
NO_INSTANCE = 0


def read_npy(path, allow_non_finite: bool = False) -> np.ndarray:
    """Read an NPY v1.0 file from the supported subset.

    Rejects Fortran-order files and dtypes outside
    {float32, uint8, uint16, bool}. Float tensors containing NaN/Inf are
    rejected unless ``allow_non_finite`` is set.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 10 or raw[:6] != NPY_MAGIC:
        raise FormatError(f"{path}: not an NPY file (bad magic)")
    major, minor = raw[6], raw[7]
    if (major, minor) != (1, 0):
        raise UnsupportedError(f"{path}: NPY version {major}.{minor} not supported (need 1.0)")
    (header_len,) = struct.unpack("<H", raw[8:10])
    header_end = 10 + header_len
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated NPY header")
    try:
        header = ast.literal_eval(raw[10:header_end].decode("latin1"))
    except (ValueError, SyntaxError) as exc:
        raise FormatError(f"{path}: malformed NPY header: {exc}") from exc
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise FormatError(f"{path}: unexpected NPY header keys")
    if header["fortran_order"]:
        raise UnsupportedError(f"{path}: Fortran-order NPY not supported")
    descr = header["descr"]
    if descr not in _DTYPE_OF_DESCR:
        raise UnsupportedError(f"{path}: dtype {descr!r} not supported")
    shape = header["shape"]
    if not isinstance(shape, tuple) or not all(isinstance(s, int) and s >= 0 for s in shape):
        raise FormatError(f"{path}: invalid shape {shape!r}")
    dtype = _DTYPE_OF_DESCR[descr]
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    data = raw[header_end:]
    if len(data) != count * dtype.itemsize:
        raise FormatError(f"{path}: payload has {len(data)} bytes, expected {count * dtype.itemsize}")
    arr = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
    if dtype == np.float32 and not allow_non_finite and not np.isfinite(arr).all():
        raise DomainError(f"{path}: float tensor contains NaN/Inf")
    return arr


def write_npy(path, tensor: np.ndarray) -> None:
    """Write a tensor as NPY v1.0; round-trips bit-exactly through read_npy."""
    tensor = np.asarray(tensor)
    dtype = np.dtype(tensor.dtype)
    if dtype not in _DESCR_OF_DTYPE:
        raise UnsupportedError(f"dtype {dtype} not supported for NPY output")
    shape = tensor.shape  # ascontiguousarray would promote 0-d to 1-d
    tensor = np.ascontiguousarray(tensor)
    descr = _DESCR_OF_DTYPE[dtype]
    header = f"{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape!r}, }}"
    # pad so that data starts on a 64-byte boundary
    unpadded = len(NPY_MAGIC) + 4 + len(header) + 1
    header = header + " " * (-unpadded % 64) + "\n"
    try:
        with open(path, "wb") as fh:
            fh.write(NPY_MAGIC)
            fh.write(bytes([1, 0]))
            fh.write(struct.pack("<H", len(header)))
            fh.write(header.encode("latin1"))
            fh.write(tensor.tobytes())
    except OSError as exc:
        raise OSError(f"writing {path}: {exc}") from exc


@dataclass
class PanopticLabel:
    """Semantic class map plus instance id map.

    semantic: (H, W) uint8, 255 = ignore.
    instance: (H, W) uint16, 0 = no instance.
    """

    semantic: np.ndarray
    instance: np.ndarray

    def __post_init__(self):
        if self.semantic.dtype != np.uint8 or self.instance.dtype != np.uint16:
            raise ShapeError("PanopticLabel needs uint8 semantic and uint16 instance maps")
        if self.semantic.shape != self.instance.shape or self.semantic.ndim != 2:
            raise ShapeError(
                f"semantic {self.semantic.shape} and instance {self.instance.shape} must be equal 2-d shapes"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.semantic.shape

    def instance_ids(self) -> np.ndarray:
        ids = np.unique(self.instance)
        return ids[ids != NO_INSTANCE]

    def validate(self) -> None:
        """Raise if any label invariant is violated."""
        inst = self.instance
        sem = self.semantic
        if np.any((inst != NO_INSTANCE) & (sem == IGNORE_CLASS)):
            raise ShapeError("instance pixel over ignore semantics")
        ids = self.instance_ids()
        for i in ids:
            if len(np.unique(sem[inst == i])) != 1:
                raise ShapeError(f"instance {i} spans multiple semantic classes")
        if len(ids) and not np.array_equal(ids, np.arange(1, len(ids) + 1)):
            raise ShapeError("instance ids not contiguous from 1")

    @classmethod
    def from_maps(cls, semantic: np.ndarray, instance: np.ndarray) -> tuple["PanopticLabel", int]:
        """Build a valid label, repairing violations.

        Offending instance pixels are reset to 0 (no instance) and counted;
        surviving ids are relabeled to be contiguous from 1. Returns the
        repaired label and the number of repaired pixels.
        """
        sem = np.ascontiguousarray(semantic, dtype=np.uint8)
        inst = np.ascontiguousarray(instance, dtype=np.uint16).copy()
        if sem.shape != inst.shape:
            raise ShapeError(f"semantic {sem.shape} vs instance {inst.shape}")
        repaired = 0

        over_ignore = (inst != NO_INSTANCE) & (sem == IGNORE_CLASS)
        repaired += int(over_ignore.sum())
        inst[over_ignore] = NO_INSTANCE

        for i in np.unique(inst):
            if i == NO_INSTANCE:
                continue
            where = inst == i
            classes = sem[where]
            mode = np.bincount(classes).argmax()
            minority = where & (sem != mode)
            repaired += int(minority.sum())
            inst[minority] = NO_INSTANCE

        ids = np.unique(inst)
        ids = ids[ids != NO_INSTANCE]
        if len(ids):
            lut = np.zeros(int(ids.max()) + 1, dtype=np.uint16)
            lut[ids] = np.arange(1, len(ids) + 1, dtype=np.uint16)
            inst = lut[inst]
        label = cls(sem, inst)
        label.validate()
        return label, repaired


def read_panoptic_png(sem_path, inst_path) -> tuple[PanopticLabel, int]:
    """Read a semantic/instance PNG pair; returns (label, repaired pixel count)."""
    sem_img = Image.open(sem_path)
    inst_img = Image.open(inst_path)
    sem = np.asarray(sem_img)
    inst = np.asarray(inst_img)
    if sem.dtype != np.uint8 or sem.ndim != 2:
        raise FormatError(f"{sem_path}: expected 8-bit grayscale PNG")
    if inst.ndim != 2:
        raise FormatError(f"{inst_path}: expected 16-bit grayscale PNG")
    inst = inst.astype(np.uint16, casting="safe") if inst.dtype != np.uint16 else inst
    if sem.shape != inst.shape:
        raise ShapeError(f"{sem_path} {sem.shape} vs {inst_path} {inst.shape}")
    return PanopticLabel.from_maps(sem, inst)


def write_panoptic_png(label: PanopticLabel, sem_path, inst_path) -> None:
    Image.fromarray(label.semantic).save(sem_path)
    Image.fromarray(label.instance).save(inst_path)


def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    h = (h % 1.0) * 6.0
    i = np.floor(h).astype(int) % 6
    f = h - np.floor(h)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    out = np.choose(
        i[..., None],
        [
            np.stack([v, t, p], -1),
            np.stack([q, v, p], -1),
            np.stack([p, v, t], -1),
            np.stack([p, q, v], -1),
            np.stack([t, p, v], -1),
            np.stack([v, p, q], -1),
        ],
    )
    return (out * 255).round().astype(np.uint8)


def colorize_panoptic(label: PanopticLabel, palette_seed: int) -> np.ndarray:
    """Render a label as RGB. Deterministic per seed; ignore pixels are black.

    Stuff regions get one color per class; instances get per-id colors from
    the class's hue family so ids of one class stay distinguishable.
    """
    rng = np.random.default_rng(palette_seed)
    class_hue = rng.permutation(256) / 256.0 + rng.uniform(0, 1 / 256.0, 256)

    out = np.zeros(label.shape + (3,), dtype=np.uint8)
    sem, inst = label.semantic, label.instance

    stuff = (inst == NO_INSTANCE) & (sem != IGNORE_CLASS)
    if stuff.any():
        c = sem[stuff].astype(int)
        out[stuff] = _hsv_to_rgb(class_hue[c], np.full(c.shape, 0.45), np.full(c.shape, 0.75))

    golden = 0.618033988749895
    for i in label.instance_ids():
        where = inst == i
        c = int(sem[where][0])
        hue = class_hue[c] + golden * int(i)
        col = _hsv_to_rgb(np.array([hue]), np.array([0.9]), np.array([0.95]))[0]
        out[where] = col
    return out


def read_image(path) -> np.ndarray:
    """Read an image file as (H, W, 3) uint8 RGB."""
    img = Image.open(path).convert("RGB")
    return np.asarray(img)


def write_image(path, rgb: np.ndarray) -> None:
    Image.fromarray(rgb).save(path)


@dataclass
class WindowPred:
    """High-resolution sliding-window prediction: NPY path plus window origin."""

    path: str
    origin: tuple[int, int]


@dataclass
class FrameRecord:
    name: str
    left_t: str
    right_t: str
    left_t1: str
    right_t1: str
    flow_fw: str
    flow_bw: str
    disp_t_lr: str
    disp_t_rl: str
    disp_t1_lr: str
    disp_t1_rl: str
    features: str | None = None
    low_res_pred: str | None = None
    window_preds: list[WindowPred] = field(default_factory=list)

    REQUIRED = (
        "left_t",
        "right_t",
        "left_t1",
        "right_t1",
        "flow_fw",
        "flow_bw",
        "disp_t_lr",
        "disp_t_rl",
        "disp_t1_lr",
        "disp_t1_rl",
    )

    def __post_init__(self):
        for key in self.REQUIRED:
            if not getattr(self, key):
                raise FormatError(f"frame {self.name!r}: empty path for {key}")


@dataclass
class DatasetManifest:
    frames: list[FrameRecord]
    camera: CameraRig
    output_dir: str

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        base = path.parent

        def resolve(p: str | None) -> str | None:
            if not p:
                return p
            q = Path(p)
            return str(q if q.is_absolute() else base / q)

        cam = doc["camera"]
        camera = CameraRig(
            fx=float(cam["fx"]),
            fy=float(cam["fy"]),
            cx=float(cam["cx"]),
            cy=float(cam["cy"]),
            baseline=float(cam["baseline"]),
        )
        frames = []
        for idx, rec in enumerate(doc.get("frames", [])):
            windows = [
                WindowPred(path=resolve(w["path"]), origin=(int(w["origin"][0]), int(w["origin"][1])))
                for w in rec.get("window_preds", [])
            ]
            frames.append(
                FrameRecord(
                    name=rec.get("name", f"frame_{idx:06d}"),
                    left_t=resolve(rec["left_t"]),
                    right_t=resolve(rec["right_t"]),
                    left_t1=resolve(rec["left_t1"]),
                    right_t1=resolve(rec["right_t1"]),
                    flow_fw=resolve(rec["flow_fw"]),
                    flow_bw=resolve(rec["flow_bw"]),
                    disp_t_lr=resolve(rec["disp_t_lr"]),
                    disp_t_rl=resolve(rec["disp_t_rl"]),
                    disp_t1_lr=resolve(rec["disp_t1_lr"]),
                    disp_t1_rl=resolve(rec["disp_t1_rl"]),
                    features=resolve(rec.get("features")),
                    low_res_pred=resolve(rec.get("low_res_pred")),
                    window_preds=windows,
                )
            )
        return cls(frames=frames, camera=camera, output_dir=resolve(doc["output_dir"]))


def new_instance_map(shape: tuple[int, int], masks: list[np.ndarray]) -> np.ndarray:
    """Paint disjoint masks as instance ids 1..len(masks) into a fresh uint16 map."""
    if len(masks) > np.iinfo(np.uint16).max:
        raise CapacityError(f"{len(masks)} instances exceed uint16 id space")
    out = np.zeros(shape, dtype=np.uint16)
    for i, m in enumerate(masks, start=1):
        out[m] = i
    return out
