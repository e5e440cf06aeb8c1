"""Pose-annotated bounding-box datasets: on-disk layout, cleanup, splits, synthesis.

Directory layout::

    root/
      manifest.txt      one object per line: ``<object_id> <name>``
      annotations.txt   one object instance per line (format below)
      images/*.png      8-bit RGB frames

``annotations.txt`` records are whitespace separated::

    <image> <object_id> <x_min> <y_min> <x_max> <y_max> <r00> <r01> ... <r22>

``image`` is a path relative to ``root/images``; bbox bounds are integer
pixels, half-open (``x_min <= x < x_max``); the nine rotation entries are
row-major decimals. Blank lines and lines starting with ``#`` are ignored.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import rotgeo
from .errors import InsufficientSamplesError, InvalidArgumentError
from .render import RenderConfig, render_cuboid, to_float
from .rotgeo import UnitQuaternion
from .sampler import NoiseConfig, NoisePair, make_rng, perturb

log = logging.getLogger(__name__)

INPUT_SIZE = 64
# synthetic poses stay within this many degrees of the reference view
DEFAULT_POSE_RANGE = 45.0
MAX_SO3_DISTANCE = 0.1
ANNOTATIONS = "annotations.txt"
MANIFEST = "manifest.txt"
IMAGES = "images"


@dataclass(frozen=True)
class BoundingBox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvalidArgumentError(f"degenerate bounding box {self}")

    def fits(self, width: int, height: int) -> bool:
        return 0 <= self.x_min and 0 <= self.y_min and self.x_max <= width and self.y_max <= height


@dataclass(frozen=True)
class FrameAnnotation:
    image: str
    object_id: int
    bbox: BoundingBox
    rotation: tuple[float, ...]

    @property
    def matrix(self) -> np.ndarray:
        return np.array(self.rotation, dtype=np.float64).reshape(3, 3)


@dataclass
class RecordError:
    path: str
    line: int
    message: str

    def __str__(self):
        return f"{self.path}:{self.line}: {self.message}"


@dataclass(frozen=True)
class PoseSample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    q_gt: UnitQuaternion
    q_in: UnitQuaternion
    q_label: UnitQuaternion
    object_id: int


@dataclass(frozen=True)
class DatasetSplit:
    train: list[int]
    validation: list[int]
    test: list[int]
    seed: int


# ---------------------------------------------------------------------------
# annotations


def format_record(ann: FrameAnnotation) -> str:
    b = ann.bbox
    nums = " ".join(repr(float(v)) for v in ann.rotation)
    return f"{ann.image} {ann.object_id} {b.x_min} {b.y_min} {b.x_max} {b.y_max} {nums}"


def write_annotations(root, annotations, manifest: dict[int, str] | None = None):
    root = Path(root)
    (root / IMAGES).mkdir(parents=True, exist_ok=True)
    with open(root / ANNOTATIONS, "w", newline="\n") as fh:
        for ann in annotations:
            fh.write(format_record(ann) + "\n")
    if manifest is None:
        manifest = {a.object_id: f"object{a.object_id}" for a in annotations}
    with open(root / MANIFEST, "w", newline="\n") as fh:
        for oid in sorted(manifest):
            fh.write(f"{oid} {manifest[oid]}\n")


def read_manifest(root) -> dict[int, str]:
    path = Path(root) / MANIFEST
    if not path.exists():
        return {}
    out = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            oid, _, name = line.partition(" ")
            out[int(oid)] = name.strip()
    return out


def _parse_record(line: str, root: Path, check_images: bool) -> FrameAnnotation:
    parts = line.split()
    if len(parts) != 15:
        raise ValueError(f"expected 15 fields, found {len(parts)}")
    image, oid = parts[0], int(parts[1])
    bbox = BoundingBox(*(int(v) for v in parts[2:6]))
    rot = tuple(float(v) for v in parts[6:15])
    if not all(np.isfinite(rot)):
        raise ValueError("non-finite rotation entry")
    dist = rotgeo.distance_to_so3(np.array(rot).reshape(3, 3))
    if dist > MAX_SO3_DISTANCE:
        raise ValueError(f"rotation matrix is {dist:.3g} (Frobenius) from SO(3)")
    if check_images:
        path = root / IMAGES / image
        if not path.exists():
            raise ValueError(f"missing image file {path}")
        with Image.open(path) as im:
            w, h = im.size
        if not bbox.fits(w, h):
            raise ValueError(f"bounding box {bbox} outside {w}x{h} image")
    return FrameAnnotation(image, oid, bbox, rot)


def load_annotations(root_dir, errors: list[RecordError] | None = None,
                     check_images: bool = True) -> list[FrameAnnotation]:
    """Parse ``annotations.txt``; bad records are logged, collected and skipped.

    Matrices are returned as written, not yet re-orthogonalized.
    """
    root = Path(root_dir)
    path = root / ANNOTATIONS
    if not path.exists():
        if root.is_dir() and not any(root.iterdir()):
            return []
        raise FileNotFoundError(f"no {ANNOTATIONS} in {root}")
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            try:
                out.append(_parse_record(text, root, check_images))
            except (ValueError, OSError) as exc:
                err = RecordError(str(path), lineno, str(exc))
                log.warning("skipping record: %s", err)
                if errors is not None:
                    errors.append(err)
    return out


def clean_pose(raw) -> UnitQuaternion:
    return rotgeo.rotmat_to_quat(rotgeo.reorthogonalize(raw))


# ---------------------------------------------------------------------------
# images


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_image(path, image: np.ndarray):
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def _bilinear_axis(n_in: int, n_out: int, lo: int):
    """Source indices and weights for half-pixel-centered resampling."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0 + lo, i1 + lo, frac


def crop_resize(image: np.ndarray, bbox: BoundingBox, out_size: int = INPUT_SIZE) -> np.ndarray:
    """Crop to ``bbox`` (clamped to the image) and bilinearly resize to a square.

    Returns ``(out_size, out_size, 3)`` float32 in ``[0, 1]``.
    """
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    else:
        img = img.astype(np.float64)
    h, w = img.shape[:2]
    x0, y0 = max(bbox.x_min, 0), max(bbox.y_min, 0)
    x1, y1 = min(bbox.x_max, w), min(bbox.y_max, h)
    if x0 >= x1 or y0 >= y1 or out_size < 1:
        raise InvalidArgumentError(f"bounding box {bbox} has no overlap with {w}x{h} image")
    r0, r1, fy = _bilinear_axis(y1 - y0, out_size, y0)
    c0, c1, fx = _bilinear_axis(x1 - x0, out_size, x0)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[r0][:, c0] * (1 - fx) + img[r0][:, c1] * fx
    bot = img[r1][:, c0] * (1 - fx) + img[r1][:, c1] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


# ---------------------------------------------------------------------------
# splits


def make_split(annotations, counts: tuple[int, int, int], seed: int) -> DatasetSplit:
    n = len(annotations)
    need = sum(counts)
    if any(c < 0 for c in counts):
        raise InvalidArgumentError(f"split counts must be non-negative, got {counts}")
    if need > n:
        raise InsufficientSamplesError(f"split needs {need} samples but only {n} available (short by {need - n})")
    order = make_rng(seed).permutation(n).tolist()
    a, b, _ = counts
    return DatasetSplit(order[:a], order[a:a + b], order[a + b:need], seed)


# ---------------------------------------------------------------------------
# in-memory dataset


@dataclass
class PoseDataset:
    """Cropped network inputs and cleaned ground-truth poses, indexable by record."""

    images: np.ndarray  # (N, 3, S, S) float32
    q_gt: list[UnitQuaternion]
    object_ids: list[int]
    names: dict[int, str] = field(default_factory=dict)

    def __len__(self):
        return len(self.q_gt)

    @classmethod
    def from_directory(cls, root, out_size: int = INPUT_SIZE, errors: list[RecordError] | None = None) -> PoseDataset:
        root = Path(root)
        anns = load_annotations(root, errors)
        images = np.empty((len(anns), 3, out_size, out_size), dtype=np.float32)
        cache: dict[str, np.ndarray] = {}
        qs, ids = [], []
        for i, ann in enumerate(anns):
            if ann.image not in cache:
                cache = {ann.image: read_image(root / IMAGES / ann.image)}
            crop = crop_resize(cache[ann.image], ann.bbox, out_size)
            images[i] = crop.transpose(2, 0, 1)
            qs.append(clean_pose(ann.matrix))
            ids.append(ann.object_id)
        return cls(images, qs, ids, read_manifest(root))

    def sample(self, index: int, noise: NoiseConfig, rng: np.random.Generator) -> PoseSample:
        pair = perturb(self.q_gt[index], noise, rng)
        return self.make_sample(index, pair)

    def make_sample(self, index: int, pair: NoisePair) -> PoseSample:
        return PoseSample(self.images[index].transpose(1, 2, 0), self.q_gt[index],
                          pair.q_in, pair.q_label, self.object_ids[index])

    def subset(self, indices) -> PoseDataset:
        idx = list(indices)
        return PoseDataset(self.images[idx], [self.q_gt[i] for i in idx],
                           [self.object_ids[i] for i in idx], dict(self.names))


# ---------------------------------------------------------------------------
# synthetic cuboid data


@dataclass(frozen=True)
class SyntheticConfig:
    count: int = 3000
    seed: int = 0
    frame_size: int = 80
    margin: int = 8
    # None draws poses uniformly over SO(3)
    max_pose_deg: float | None = DEFAULT_POSE_RANGE
    object_id: int = 1
    render: RenderConfig = RenderConfig()


def synthetic_pose(rng: np.random.Generator, max_pose_deg: float | None) -> UnitQuaternion:
    if max_pose_deg is None:
        return rotgeo.random_quaternion(rng).canonical()
    cfg = NoiseConfig.uniform(0.0, max_pose_deg)
    return perturb(UnitQuaternion.identity(), cfg, rng).q_in.canonical()


def generate_synthetic(out_dir, cfg: SyntheticConfig = SyntheticConfig()) -> list[FrameAnnotation]:
    """Write a rendered-cuboid dataset in the standard layout; returns its records."""
    root = Path(out_dir)
    (root / IMAGES).mkdir(parents=True, exist_ok=True)
    rng = make_rng(cfg.seed)
    side = cfg.frame_size - 2 * cfg.margin
    if side < 1:
        raise InvalidArgumentError("margin leaves no room for the object")
    bbox = BoundingBox(cfg.margin, cfg.margin, cfg.margin + side, cfg.margin + side)
    anns = []
    for i in range(cfg.count):
        q = synthetic_pose(rng, cfg.max_pose_deg)
        frame = np.empty((cfg.frame_size, cfg.frame_size, 3), dtype=np.uint8)
        frame[:] = cfg.render.background
        frame[cfg.margin:cfg.margin + side, cfg.margin:cfg.margin + side] = render_cuboid(q, side, cfg.render)
        name = f"{i:06d}.png"
        write_image(root / IMAGES / name, frame)
        rot = tuple(rotgeo.quat_to_matrix(q).reshape(-1).tolist())
        anns.append(FrameAnnotation(name, cfg.object_id, bbox, rot))
    write_annotations(root, anns, {cfg.object_id: "cuboid"})
    return anns


def render_dataset(q_gts, cfg: SyntheticConfig = SyntheticConfig(), out_size: int = INPUT_SIZE) -> PoseDataset:
    """In-memory equivalent of :func:`generate_synthetic` followed by loading."""
    side = cfg.frame_size - 2 * cfg.margin
    images = np.empty((len(q_gts), 3, out_size, out_size), dtype=np.float32)
    bbox = BoundingBox(0, 0, side, side)
    for i, q in enumerate(q_gts):
        images[i] = crop_resize(render_cuboid(q, side, cfg.render), bbox, out_size).transpose(2, 0, 1)
    return PoseDataset(images, list(q_gts), [cfg.object_id] * len(q_gts), {cfg.object_id: "cuboid"})


def list_images(root) -> list[str]:
    return sorted(os.listdir(Path(root) / IMAGES))


__all__ = [
    "BoundingBox", "FrameAnnotation", "PoseSample", "DatasetSplit", "PoseDataset", "RecordError",
    "SyntheticConfig", "load_annotations", "write_annotations", "clean_pose", "crop_resize",
    "make_split", "generate_synthetic", "render_dataset", "render_cuboid", "to_float",
]
