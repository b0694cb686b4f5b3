"""Shared helpers for the test suite."""

import numpy as np

from voxbayes.data import Dataset, VoxelImage


def lattice_points(rng, n, size=41):
    """``n`` distinct points of a size x size lattice on [-1, 1]^2."""
    g = np.linspace(-1.0, 1.0, size)
    flat = rng.choice(size * size, size=n, replace=False)
    return np.column_stack([g[flat % size], g[flat // size]])


def grid(nx, ny):
    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    return np.column_stack([ii.ravel(), jj.ravel()]).astype(float)


def toy_image(rng, image_id="a", nx=6, ny=5, d=2, labeled=True):
    raw = grid(nx, ny)
    n = len(raw)
    region = (raw[:, 1] >= ny / 2).astype(int)
    labels = rng.integers(0, 2, n) if labeled else None
    if labeled:
        labels[:2] = [0, 1]
        labels[-2:] = [0, 1]
    y = rng.standard_normal((n, d)) + (labels[:, None] if labeled else 0)
    return VoxelImage(image_id, raw, region, y, labels)


def toy_dataset(rng, n_images=3, **kw):
    ims = tuple(toy_image(rng, f"im{k}", **kw) for k in range(n_images))
    return Dataset(ims, tuple(f"f{k}" for k in range(ims[0].d)))


def spd(rng, d, scale=1.0):
    A = rng.standard_normal((d, d))
    return scale * (A @ A.T / d + np.eye(d))
