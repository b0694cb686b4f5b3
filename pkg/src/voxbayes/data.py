"""Voxel images, datasets and their on-disk format.

An image is a set of voxels on a 2-D lattice.  Each voxel carries raw
coordinates, a region flag (1 = PZ, 0 = CG), a feature vector (NaN marks a
missing entry) and, for training data, a binary cancer label.  Normalized
coordinates are always derived from the raw ones so that a dataset written
to disk and read back is bit-identical.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "DataError",
    "VoxelImage",
    "Dataset",
    "normalize_coords",
    "lattice_indices",
    "downsample_third",
    "load_dataset",
    "write_dataset",
]

MANIFEST_NAME = "manifest.json"


class DataError(ValueError):
    """Invalid image/dataset content or file."""


def normalize_coords(raw, strict: bool = True) -> np.ndarray:
    """Map raw 2-D coordinates onto [-1, 1]^2 axis by axis.

    The bounding-box center goes to 0 and the half-width to 1.  With
    ``strict=False`` an axis with zero spread maps to 0 instead of raising
    (used for single-row or single-voxel images).
    """
    pts = np.asarray(raw, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DataError(f"coordinates must have shape (n, 2), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise DataError("coordinates must be finite")
    if strict and len(np.unique(pts, axis=0)) < 2:
        raise DataError("need at least 2 distinct points to normalize")
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    center = (lo + hi) / 2.0
    half = (hi - lo) / 2.0
    out = np.zeros_like(pts)
    for ax in range(2):
        if half[ax] > 0:
            out[:, ax] = (pts[:, ax] - center[ax]) / half[ax]
            # pin the extremes exactly; rounding can leave 1 - eps
            out[pts[:, ax] == lo[ax], ax] = -1.0
            out[pts[:, ax] == hi[ax], ax] = 1.0
        elif strict:
            raise DataError(f"degenerate axis {'xy'[ax]}: all coordinates equal {lo[ax]!r}")
    return out


def lattice_indices(raw, rel_tol: float = 1e-6) -> np.ndarray:
    """Integer (column, row) lattice indices of raw coordinates.

    Raises DataError when the points are not on a regular lattice or when
    either axis has fewer than two distinct values.
    """
    pts = np.asarray(raw, dtype=float)
    idx = np.empty(pts.shape, dtype=np.int64)
    for ax, name in ((0, "column"), (1, "row")):
        vals = np.unique(pts[:, ax])
        if len(vals) < 2:
            raise DataError(f"not a lattice: fewer than 2 distinct {name} values")
        step = np.min(np.diff(vals))
        k = (pts[:, ax] - vals[0]) / step
        kr = np.rint(k)
        if np.max(np.abs(k - kr)) > rel_tol * max(1.0, np.max(np.abs(kr))):
            raise DataError(f"not a lattice: {name} coordinates are not multiples of step {step!r}")
        idx[:, ax] = kr.astype(np.int64)
    return idx


@dataclass(frozen=True, eq=False)
class VoxelImage:
    """One subject's image.

    ``features`` is (n, d) with NaN for missing entries; ``labels`` is None
    for unlabeled (test) images.
    """

    image_id: str
    raw_coords: np.ndarray
    region: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None
    coords: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        raw = np.array(self.raw_coords, dtype=float, copy=True)
        if raw.ndim != 2 or raw.shape[1] != 2:
            raise DataError(f"{self.image_id}: raw_coords must have shape (n, 2)")
        n = raw.shape[0]
        if n < 1:
            raise DataError(f"{self.image_id}: image has no voxels")
        region = np.array(self.region, dtype=np.int8, copy=True).reshape(-1)
        feats = np.array(self.features, dtype=float, copy=True)
        if feats.ndim == 1:
            feats = feats[:, None]
        if len(region) != n or feats.shape[0] != n:
            raise DataError(f"{self.image_id}: per-voxel arrays have inconsistent lengths")
        if feats.shape[1] < 1:
            raise DataError(f"{self.image_id}: need at least one feature")
        if not np.all(np.isin(region, (0, 1))):
            raise DataError(f"{self.image_id}: region flags must be 0/1")
        if np.any(np.isinf(feats)):
            raise DataError(f"{self.image_id}: features must be finite or missing")
        labels = None
        if self.labels is not None:
            labels = np.array(self.labels, dtype=np.int8, copy=True).reshape(-1)
            if len(labels) != n:
                raise DataError(f"{self.image_id}: labels length {len(labels)} != {n}")
            if not np.all(np.isin(labels, (0, 1))):
                raise DataError(f"{self.image_id}: labels must be 0/1")
        if len(np.unique(raw, axis=0)) != n:
            raise DataError(f"{self.image_id}: duplicate voxel coordinates")
        coords = normalize_coords(raw, strict=False)
        for arr in (raw, region, feats, coords, labels):
            if arr is not None:
                arr.setflags(write=False)
        object.__setattr__(self, "raw_coords", raw)
        object.__setattr__(self, "region", region)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "coords", coords)

    @property
    def n(self) -> int:
        return self.raw_coords.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def observed(self) -> np.ndarray:
        """Boolean (n, d) mask of observed feature entries."""
        return ~np.isnan(self.features)

    @property
    def complete(self) -> np.ndarray:
        """Voxels with every feature observed."""
        return self.observed.all(axis=1)

    @property
    def is_labeled(self) -> bool:
        return self.labels is not None

    def subset(self, keep) -> "VoxelImage":
        keep = np.asarray(keep)
        return VoxelImage(
            self.image_id,
            self.raw_coords[keep],
            self.region[keep],
            self.features[keep],
            None if self.labels is None else self.labels[keep],
        )

    def without_labels(self) -> "VoxelImage":
        return VoxelImage(self.image_id, self.raw_coords, self.region, self.features, None)

    def equals(self, other: "VoxelImage") -> bool:
        """Bit-exact comparison of all fields (NaNs compare equal)."""
        if self.image_id != other.image_id or self.is_labeled != other.is_labeled:
            return False
        pairs = [
            (self.raw_coords, other.raw_coords),
            (self.region, other.region),
            (self.features, other.features),
        ]
        if self.is_labeled:
            pairs.append((self.labels, other.labels))
        return all(a.shape == b.shape and np.array_equal(a, b, equal_nan=a.dtype.kind == "f") for a, b in pairs)


@dataclass(frozen=True, eq=False)
class Dataset:
    images: tuple
    feature_names: tuple

    def __post_init__(self):
        images = tuple(self.images)
        names = tuple(str(s) for s in self.feature_names)
        ids = [im.image_id for im in images]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise DataError(f"duplicate image_ids: {dupes}")
        for im in images:
            if im.d != len(names):
                raise DataError(f"{im.image_id}: d={im.d} but dataset has {len(names)} feature names")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "feature_names", names)

    @property
    def d(self) -> int:
        return len(self.feature_names)

    @property
    def image_ids(self) -> list[str]:
        return [im.image_id for im in self.images]

    def __len__(self) -> int:
        return len(self.images)

    def __iter__(self):
        return iter(self.images)

    def __getitem__(self, k):
        return self.images[k]

    def select(self, ids: Iterable[str]) -> "Dataset":
        lookup = {im.image_id: im for im in self.images}
        return Dataset(tuple(lookup[i] for i in ids), self.feature_names)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.feature_names == other.feature_names
            and len(self) == len(other)
            and all(a.equals(b) for a, b in zip(self.images, other.images))
        )


def downsample_third(image: VoxelImage, factor: int = 3) -> VoxelImage:
    """Keep voxels whose lattice row and column indices are multiples of 3."""
    idx = lattice_indices(image.raw_coords)
    keep = (idx[:, 0] % factor == 0) & (idx[:, 1] % factor == 0)
    if not keep.any():
        raise DataError(f"{image.image_id}: downsampling removed every voxel")
    return image.subset(np.flatnonzero(keep))


# ---------------------------------------------------------------- file IO


def _fmt(x: float) -> str:
    if math.isnan(x):
        return ""
    return repr(float(x))


def _write_image_csv(image: VoxelImage, path: Path, feature_names: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["x_raw", "y_raw", "region", "label", *feature_names])
        for j in range(image.n):
            label = "" if image.labels is None else str(int(image.labels[j]))
            wr.writerow(
                [
                    _fmt(image.raw_coords[j, 0]),
                    _fmt(image.raw_coords[j, 1]),
                    str(int(image.region[j])),
                    label,
                    *(_fmt(v) for v in image.features[j]),
                ]
            )


def write_dataset(dataset: Dataset, path) -> Path:
    """Write one CSV per image plus ``manifest.json`` into directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, im in enumerate(dataset.images):
        fname = f"image_{k:04d}.csv"
        _write_image_csv(im, out / fname, dataset.feature_names)
        entries.append({"image_id": im.image_id, "file": fname})
    manifest = {"feature_names": list(dataset.feature_names), "images": entries}
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    return out


def _parse_float(cell: str, where: str) -> float:
    cell = cell.strip()
    if cell == "":
        return math.nan
    try:
        val = float(cell)
    except ValueError:
        raise DataError(f"{where}: cannot parse {cell!r} as a number") from None
    if math.isinf(val) or math.isnan(val):
        raise DataError(f"{where}: non-finite value {cell!r}")
    return val


def _read_image_csv(path: Path, image_id: str, feature_names: Sequence[str]) -> VoxelImage:
    d = len(feature_names)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    expected = ["x_raw", "y_raw", "region", "label", *feature_names]
    if header != expected:
        raise DataError(f"{path}: header {header} does not match expected {expected}")
    coords, region, labels, feats = [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        where = f"{path}:{lineno}"
        if not row:
            continue
        if len(row) != 4 + d:
            raise DataError(f"{where}: expected {4 + d} columns (d={d}), got {len(row)}")
        x = _parse_float(row[0], where)
        y = _parse_float(row[1], where)
        if math.isnan(x) or math.isnan(y):
            raise DataError(f"{where}: coordinates may not be missing")
        reg = row[2].strip()
        if reg not in ("0", "1"):
            raise DataError(f"{where}: region must be 0 or 1, got {reg!r}")
        lab = row[3].strip()
        if lab not in ("", "0", "1"):
            raise DataError(f"{where}: label must be 0, 1 or empty, got {lab!r}")
        coords.append((x, y))
        region.append(int(reg))
        labels.append(lab)
        feats.append([_parse_float(c, where) for c in row[4:]])
    if not coords:
        raise DataError(f"{path}: no voxel rows")
    present = [lab != "" for lab in labels]
    if any(present) and not all(present):
        first = present.index(False) + 2
        raise DataError(f"{path}:{first}: labels must be given for all voxels or none")
    lab_arr = np.array([int(v) for v in labels]) if all(present) else None
    try:
        return VoxelImage(image_id, np.array(coords), np.array(region), np.array(feats, dtype=float), lab_arr)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def load_dataset(path) -> Dataset:
    """Read a dataset written by :func:`write_dataset`.

    ``path`` is the dataset directory or its manifest file.
    """
    p = Path(path)
    manifest_path = p / MANIFEST_NAME if p.is_dir() else p
    if not manifest_path.exists():
        raise DataError(f"{manifest_path}: manifest not found")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: invalid manifest ({exc})") from None
    names = manifest.get("feature_names")
    entries = manifest.get("images")
    if not isinstance(names, list) or not names or not isinstance(entries, list):
        raise DataError(f"{manifest_path}: manifest needs non-empty 'feature_names' and 'images'")
    ids = [e.get("image_id") for e in entries]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise DataError(f"{manifest_path}: duplicate image_ids {dupes}")
    base = manifest_path.parent
    images = [_read_image_csv(base / e["file"], str(e["image_id"]), names) for e in entries]
    return Dataset(tuple(images), tuple(names))
