"""Cell records, the on-disk container, normalisation and augmentation.

Container layout (one directory)::

    manifest.json   version, dtype "f32le", image_shape, record_count, splits,
                    marker_names, class_names, sha256 of images.bin
    images.bin      records concatenated, row-major little-endian float32
    labels.csv      id,cls,m1,m2,m3,m4

Record order in ``images.bin`` and ``labels.csv`` is identical. ``splits``
maps split name to a list of record ids.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

CLASS_NAMES = ("Lymphocyte", "Granulocyte", "Monocyte")
MARKER_NAMES = ("CD45", "CD16", "CD3/CD19/CD56", "CD123/HLA-DR/CD14")
CHANNELS = ("left", "right", "top", "bottom")
IMAGE_SHAPE = (4, 28, 28)
CONTAINER_VERSION = 1
STD_FLOOR = 1e-6


class DatasetLoadError(Exception):
    pass


class MissingBlobError(DatasetLoadError):
    pass


class ChecksumError(DatasetLoadError):
    pass


class ManifestError(DatasetLoadError):
    pass


class BlobSizeError(DatasetLoadError):
    pass


@dataclass
class CellRecord:
    image: np.ndarray
    cls: int
    markers: np.ndarray
    id: str

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.markers = np.asarray(self.markers, dtype=np.float32)
        if not np.isfinite(self.image).all():
            raise ValueError(f"record {self.id}: non-finite image values")
        if not np.isfinite(self.markers).all():
            raise ValueError(f"record {self.id}: non-finite markers")
        if not 0 <= int(self.cls) < len(CLASS_NAMES):
            raise ValueError(f"record {self.id}: class {self.cls} out of range")
        self.cls = int(self.cls)


@dataclass
class Dataset:
    records: list[CellRecord]
    splits: dict[str, list[str]] = field(default_factory=dict)
    marker_names: tuple[str, ...] = MARKER_NAMES
    class_names: tuple[str, ...] = CLASS_NAMES

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> list[CellRecord]:
        if name not in self.splits:
            raise KeyError(f"no split named {name!r}; have {sorted(self.splits)}")
        index = {r.id: r for r in self.records}
        return [index[i] for i in self.splits[name]]

    def subset(self, name: str) -> "Dataset":
        recs = self.split(name)
        return Dataset(recs, {name: [r.id for r in recs]}, self.marker_names, self.class_names)


def stack(records: list[CellRecord]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Records -> (images [N,4,28,28], labels [N], markers [N,4])."""
    if not records:
        return (np.zeros((0,) + IMAGE_SHAPE, np.float32), np.zeros(0, np.int64),
                np.zeros((0, len(MARKER_NAMES)), np.float32))
    images = np.stack([r.image for r in records]).astype(np.float32, copy=False)
    labels = np.array([r.cls for r in records], dtype=np.int64)
    markers = np.stack([r.markers for r in records]).astype(np.float32, copy=False)
    return images, labels, markers


# -- container -----------------------------------------------------------

def save_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    images, labels, markers = stack(ds.records)
    shape = list(images.shape[1:]) if len(ds) else list(IMAGE_SHAPE)
    blob = images.astype("<f4").tobytes(order="C")
    (path / "images.bin").write_bytes(blob)

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    n_m = markers.shape[1] if len(ds) else len(ds.marker_names)
    writer.writerow(["id", "cls"] + [f"m{i + 1}" for i in range(n_m)])
    for r in ds.records:
        writer.writerow([r.id, r.cls] + [repr(float(v)) for v in r.markers])
    (path / "labels.csv").write_text(buf.getvalue(), encoding="utf-8", newline="")

    manifest = {
        "version": CONTAINER_VERSION,
        "dtype": "f32le",
        "image_shape": shape,
        "record_count": len(ds),
        "splits": {k: list(v) for k, v in ds.splits.items()},
        "marker_names": list(ds.marker_names),
        "class_names": list(ds.class_names),
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_dataset(manifest_path) -> Dataset:
    """Load a container given its directory or its ``manifest.json``.

    A manifest with ``record_count`` 0 yields an empty dataset and needs no blob.
    """
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    root = manifest_path.parent
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ManifestError(f"manifest not found: {manifest_path}") from e
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest is not valid JSON: {e}") from e
    if not isinstance(manifest, dict):
        raise ManifestError("manifest must be a JSON object")
    for key in ("version", "dtype", "image_shape", "record_count"):
        if key not in manifest:
            raise ManifestError(f"manifest missing required key {key!r}")
    if manifest["dtype"] != "f32le":
        raise ManifestError(f"unsupported dtype {manifest['dtype']!r}")
    if manifest["version"] != CONTAINER_VERSION:
        raise ManifestError(f"unsupported container version {manifest['version']!r}")
    n = int(manifest["record_count"])
    shape = tuple(int(s) for s in manifest["image_shape"])
    marker_names = tuple(manifest.get("marker_names", MARKER_NAMES))
    class_names = tuple(manifest.get("class_names", CLASS_NAMES))
    splits = {k: [str(i) for i in v] for k, v in manifest.get("splits", {}).items()}
    if n == 0:
        return Dataset([], splits, marker_names, class_names)

    blob_path = root / "images.bin"
    if not blob_path.exists():
        raise MissingBlobError(f"image blob missing: {blob_path}")
    blob = blob_path.read_bytes()
    expected = n * int(np.prod(shape)) * 4
    if len(blob) != expected:
        raise BlobSizeError(f"images.bin has {len(blob)} bytes, expected {expected} "
                            f"({n} records of shape {list(shape)} float32)")
    digest = hashlib.sha256(blob).hexdigest()
    if "sha256" in manifest and digest != manifest["sha256"]:
        raise ChecksumError(f"images.bin sha256 {digest} != manifest {manifest['sha256']}")
    images = np.frombuffer(blob, dtype="<f4").reshape((n,) + shape).astype(np.float32)

    labels_path = root / "labels.csv"
    if not labels_path.exists():
        raise ManifestError(f"labels.csv missing: {labels_path}")
    with labels_path.open(encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) - 1 != n:
        raise ManifestError(f"labels.csv has {len(rows) - 1} rows, manifest declares {n}")
    records = []
    for i, row in enumerate(rows[1:]):
        try:
            rid, cls, marks = row[0], int(row[1]), np.array([float(v) for v in row[2:]], dtype=np.float32)
        except (IndexError, ValueError) as e:
            raise ManifestError(f"labels.csv row {i + 2} malformed: {row}") from e
        records.append(CellRecord(images[i], cls, marks, rid))
    ids = {r.id for r in records}
    for name, members in splits.items():
        missing = [m for m in members if m not in ids]
        if missing:
            raise ManifestError(f"split {name!r} references unknown ids, e.g. {missing[:3]}")
    return Dataset(records, splits, marker_names, class_names)


# -- normalisation ---------------------------------------------------------

@dataclass
class ZScoreStats:
    marker_mean: np.ndarray
    marker_std: np.ndarray
    channel_mean: np.ndarray
    channel_std: np.ndarray

    def to_dict(self) -> dict:
        return {k: np.asarray(v, dtype=np.float64).tolist() for k, v in vars(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ZScoreStats":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


def _floored(std: np.ndarray, what: str) -> np.ndarray:
    low = std < STD_FLOOR
    if low.any():
        log.warning("zscore_fit: %s %s constant; std floored to %g", what, np.flatnonzero(low).tolist(), STD_FLOOR)
    return np.maximum(std, STD_FLOOR)


def zscore_fit(train: list[CellRecord]) -> ZScoreStats:
    """Population mean/std per marker and per image channel on the training split."""
    if not train:
        raise ValueError("zscore_fit needs a non-empty training split")
    images, _, markers = stack(train)
    m = markers.astype(np.float64)
    img = images.astype(np.float64)
    return ZScoreStats(
        marker_mean=m.mean(axis=0),
        marker_std=_floored(m.std(axis=0), "marker"),
        channel_mean=img.mean(axis=(0, 2, 3)),
        channel_std=_floored(img.std(axis=(0, 2, 3)), "channel"),
    )


def zscore_apply(records: list[CellRecord], stats: ZScoreStats, images: bool = True) -> list[CellRecord]:
    out = []
    cm = stats.channel_mean.reshape(-1, 1, 1)
    cs = stats.channel_std.reshape(-1, 1, 1)
    for r in records:
        img = ((r.image - cm) / cs) if images else r.image
        mk = (r.markers - stats.marker_mean) / stats.marker_std
        out.append(CellRecord(img.astype(np.float32), r.cls, mk.astype(np.float32), r.id))
    return out


# -- augmentation ----------------------------------------------------------

def flip_horizontal(image: np.ndarray) -> np.ndarray:
    """Mirror along x and swap left/right illumination so the DPC sign convention holds."""
    out = image[:, :, ::-1].copy()
    out[[0, 1]] = out[[1, 0]]
    return out


def affine(image: np.ndarray, angle_deg: float, shift: tuple[float, float]) -> np.ndarray:
    """Rotate about the centre and translate; bilinear, edge-replicated.

    Zero angle and zero shift return the image unchanged.
    """
    if angle_deg == 0 and shift[0] == 0 and shift[1] == 0:
        return image.copy()
    h, w = image.shape[-2:]
    th = math.radians(angle_deg)
    c, s = math.cos(th), math.sin(th)
    # output->input map: in = R^-1 (out - centre - shift) + centre
    rot = np.array([[c, s], [-s, c]])
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - rot @ (centre + np.asarray(shift, dtype=np.float64))
    out = np.empty_like(image)
    for ch in range(image.shape[0]):
        out[ch] = ndimage.affine_transform(image[ch], rot, offset=offset, order=1, mode="nearest")
    return out


def augment_with(record: CellRecord, flip: bool, angle_deg: float, shift: tuple[float, float]) -> CellRecord:
    img = flip_horizontal(record.image) if flip else record.image
    img = affine(img, angle_deg, shift)
    return replace(record, image=img.astype(np.float32))


def augment(record: CellRecord, rng, max_angle: float = 10.0, max_shift: float = 2.0) -> CellRecord:
    """Random horizontal flip (p=0.5), rotation in +-max_angle deg, shift in +-max_shift px."""
    flip = bool(rng.random() < 0.5)
    angle = float(rng.uniform(-max_angle, max_angle))
    shift = (float(rng.uniform(-max_shift, max_shift)), float(rng.uniform(-max_shift, max_shift)))
    return augment_with(record, flip, angle, shift)


# -- BCCD approximation ----------------------------------------------------

BCCD_LABELS = {
    "EOSINOPHIL": 1,
    "NEUTROPHIL": 1,
    "LYMPHOCYTE": 0,
    "MONOCYTE": 2,
}


def bccd_to_dpc(image: np.ndarray, out_hw: int = 28) -> np.ndarray:
    """Approximate a brightfield RGB image as a 4-channel 28x28 input.

    Centre-crops to a square, converts to luminance, resizes by block-area
    interpolation and replicates the result into all four channels. This is
    NOT a DPC image; it only lets the network consume BCCD-style data.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"expected a 3-D RGB image, got shape {img.shape}")
    if img.shape[0] == 3 and img.shape[-1] != 3:
        img = img.transpose(1, 2, 0)
    h, w = img.shape[:2]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    img = img[top:top + side, left:left + side]
    gray = img @ np.array([0.299, 0.587, 0.114])
    small = ndimage.zoom(gray, out_hw / side, order=1, grid_mode=True, mode="nearest")[:out_hw, :out_hw]
    return np.repeat(small[None].astype(np.float32), 4, axis=0)


def bccd_records(images, label_names, id_prefix: str = "bccd") -> list[CellRecord]:
    """Records for classification-only BCCD data; markers are NaN-free zeros."""
    out = []
    for i, (img, name) in enumerate(zip(images, label_names)):
        key = str(name).upper()
        if key not in BCCD_LABELS:
            raise ValueError(f"unknown BCCD label {name!r}")
        out.append(CellRecord(bccd_to_dpc(img), BCCD_LABELS[key], np.zeros(len(MARKER_NAMES)), f"{id_prefix}-{i}"))
    return out
