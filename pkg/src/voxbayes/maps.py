"""Heatmap and classification-map export (PPM rasters plus per-voxel CSV)."""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

from .data import DataError, VoxelImage, lattice_indices

__all__ = ["CLASS_CODES", "classify", "export_maps", "read_map_csv"]

log = logging.getLogger(__name__)

CLASS_CODES = ("TN", "FP", "FN", "TP")
CLASS_COLORS = {"TN": (40, 40, 160), "FP": (240, 200, 40), "FN": (40, 200, 220), "TP": (200, 30, 30)}
BACKGROUND = (0, 0, 0)


def classify(probs, labels, cutoff: float) -> np.ndarray:
    """TP/FP/TN/FN code per voxel for calls probs >= cutoff."""
    call = np.asarray(probs) >= cutoff
    lab = np.asarray(labels).astype(bool)
    return np.array(CLASS_CODES)[2 * lab.astype(int) + call.astype(int)]


def _heat(t) -> np.ndarray:
    """Blue-white-red ramp for t in [0, 1]."""
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    r = np.where(t < 0.5, 2 * t, 1.0)
    g = np.where(t < 0.5, 2 * t, 2 - 2 * t)
    b = np.where(t < 0.5, 1.0, 2 - 2 * t)
    return np.round(255 * np.stack([r, g, b], axis=-1)).astype(np.uint8)


def _write_ppm(path: Path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def _raster(image: VoxelImage, colors) -> np.ndarray:
    idx = lattice_indices(image.raw_coords)
    idx -= idx.min(axis=0)
    w, h = idx.max(axis=0) + 1
    img = np.zeros((h, w, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    # row 0 at the top: flip y
    img[h - 1 - idx[:, 1], idx[:, 0]] = colors
    return img


def export_maps(result, image: VoxelImage, cutoff: float, out_dir) -> dict:
    """Write <id>_heat.ppm, <id>_class.ppm (if labeled) and <id>_voxels.csv.

    The heatmap is scaled by the range of probabilities within the image;
    a constant image is written unscaled with a warning.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = np.asarray(result.probs, dtype=float)
    lo, hi = p.min(), p.max()
    if hi > lo:
        scaled = (p - lo) / (hi - lo)
        scaled_ok = True
    else:
        log.warning("%s: constant probabilities; heatmap left unscaled", image.image_id)
        scaled = p.copy()
        scaled_ok = False
    classes = classify(p, image.labels, cutoff) if image.labels is not None else None
    paths = {}
    try:
        heat = _raster(image, _heat(scaled))
        paths["heatmap"] = out / f"{image.image_id}_heat.ppm"
        _write_ppm(paths["heatmap"], heat)
        if classes is not None:
            cols = np.array([CLASS_COLORS[c] for c in classes], dtype=np.uint8)
            paths["classmap"] = out / f"{image.image_id}_class.ppm"
            _write_ppm(paths["classmap"], _raster(image, cols))
    except DataError as e:
        log.warning("%s: no raster written (%s)", image.image_id, e)
    paths["csv"] = out / f"{image.image_id}_voxels.csv"
    with open(paths["csv"], "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["x_raw", "y_raw", "region", "prob", "prob_scaled", "label", "class"])
        for j in range(image.n):
            wr.writerow(
                [
                    repr(float(image.raw_coords[j, 0])),
                    repr(float(image.raw_coords[j, 1])),
                    int(image.region[j]),
                    repr(float(p[j])),
                    repr(float(scaled[j])),
                    "" if image.labels is None else int(image.labels[j]),
                    "" if classes is None else classes[j],
                ]
            )
    return {"paths": {k: str(v) for k, v in paths.items()}, "cutoff": cutoff, "scaled": scaled_ok}


def read_map_csv(path) -> dict:
    """Per-voxel columns of an exported CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {
        "prob": np.array([float(r["prob"]) for r in rows]),
        "class": np.array([r["class"] for r in rows]),
        "label": np.array([r["label"] for r in rows]),
    }
