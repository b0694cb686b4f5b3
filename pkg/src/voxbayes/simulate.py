"""Synthetic data: masks, forward simulation and scenario runs.

Labels come from thresholding kappa ~ N(q0[r] + w, 1) at zero, where w is a
Gaussian field over the normalized voxel coordinates.  Features follow
MVN(mu[c, r] + delta_i, Gamma[c, r]) with a per-image shift
delta_i ~ MVN(0, Sigma).
"""

from __future__ import annotations

import csv
import logging
import time
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtri

from .config import MCMCConfig, MaskConfig, ModelSpec, SimScenario
from .covariance import MaternParams, cholesky_jitter, cov_matrix
from .data import Dataset, VoxelImage, lattice_indices, normalize_coords

__all__ = [
    "Mask",
    "synthetic_mask",
    "make_masks",
    "simulate_image",
    "simulate_mixture_image",
    "simulate_dataset",
    "mixture_cov",
    "run_scenario",
    "MIXTURE_COMPONENTS",
    "RESULT_COLUMNS",
]

log = logging.getLogger(__name__)

MIXTURE_COMPONENTS = (
    MaternParams(20.0, 0.25, 0.5),
    MaternParams(20.0, 1.0, 1.0),
    MaternParams(20.0, 4.0, 1.5),
)
RESULT_COLUMNS = ("scenario", "spec", "rep", "AUC", "S80", "runtime_s")
DEFAULT_FEATURES = ("ADC", "AUGC90", "Ktrans", "kep")


@dataclass(frozen=True, eq=False)
class Mask:
    """Voxel coordinates and region flags of one image, without features."""

    raw_coords: np.ndarray
    region: np.ndarray
    source: str = "synthetic"

    @property
    def n(self) -> int:
        return len(self.region)

    @property
    def coords(self) -> np.ndarray:
        return normalize_coords(self.raw_coords, strict=False)

    def downsample(self, factor: int = 3) -> "Mask":
        idx = lattice_indices(self.raw_coords)
        keep = (idx[:, 0] % factor == 0) & (idx[:, 1] % factor == 0)
        return Mask(self.raw_coords[keep], self.region[keep], self.source)


def synthetic_mask(rng, cfg: MaskConfig = MaskConfig()) -> Mask:
    """Elliptical lattice mask: an inner CG ellipse inside an outer PZ ring.

    Semi-axes are drawn uniformly from the configured ranges; the CG ellipse
    covers ``cg_fraction`` of the area and is shifted toward the top by
    ``cg_shift`` of the vertical semi-axis.
    """
    ax = rng.uniform(*cfg.semi_x)
    ay = rng.uniform(*cfg.semi_y)
    step = cfg.step
    nx, ny = int(np.ceil(ax / step)), int(np.ceil(ay / step))
    ii, jj = np.meshgrid(np.arange(-nx, nx + 1), np.arange(-ny, ny + 1), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    x, y = ii * step, jj * step
    inside = (x / ax) ** 2 + (y / ay) ** 2 <= 1.0
    k = np.sqrt(cfg.cg_fraction)
    yc = cfg.cg_shift * ay
    cg = (x / (k * ax)) ** 2 + ((y - yc) / (k * ay)) ** 2 <= 1.0
    # integer lattice offsets keep the coordinates exact multiples of step
    raw = np.column_stack([(ii[inside] + nx) * step, (jj[inside] + ny) * step])
    region = np.where(cg[inside], 0, 1).astype(np.int8)
    return Mask(raw, region)


def make_masks(count: int, rng_seed=None, source: Optional[Dataset] = None, cfg: MaskConfig = MaskConfig()) -> list:
    """``count`` masks, resampled with replacement from ``source`` or synthetic."""
    rng = np.random.default_rng(rng_seed)
    if source is not None:
        if len(source) == 0:
            raise ValueError("source dataset is empty")
        picks = rng.integers(0, len(source), size=count)
        return [Mask(source[k].raw_coords, source[k].region, source[k].image_id) for k in picks]
    return [synthetic_mask(rng, cfg) for _ in range(count)]


def _mvn_rows(rng, mean, cov, size) -> np.ndarray:
    # eigh tolerates singular (PSD) covariances such as Sigma = 0
    lam, U = np.linalg.eigh(np.asarray(cov, dtype=float))
    root = U * np.sqrt(np.maximum(lam, 0.0))
    return np.asarray(mean) + rng.standard_normal((size, len(lam))) @ root.T


def _features_and_labels(mask: Mask, w, params, rng, image_id, q0=None):
    mu = np.asarray(params.mu, dtype=float)
    gamma = np.asarray(params.gamma, dtype=float)
    Sig = np.asarray(params.Sigma, dtype=float)
    if q0 is None:
        q0 = ndtri(np.asarray(params.prevalence, dtype=float))
    region = np.asarray(mask.region)
    kappa = np.asarray(q0)[region] + w + rng.standard_normal(mask.n)
    labels = (kappa > 0).astype(np.int8)
    delta = _mvn_rows(rng, np.zeros(len(Sig)), Sig, 1)[0]
    y = np.empty((mask.n, mu.shape[-1]))
    for c in (0, 1):
        for r in (0, 1):
            sel = np.flatnonzero((labels == c) & (region == r))
            if len(sel):
                y[sel] = _mvn_rows(rng, mu[c, r] + delta, gamma[c, r], len(sel))
    image = VoxelImage(image_id, mask.raw_coords, region, y, labels)
    return image, {"w": w, "kappa": kappa, "delta": delta}


def _draw_field(S, C, sigma2, rng):
    L, _ = cholesky_jitter(C, sigma2)
    return L @ rng.standard_normal(len(S))


def simulate_image(mask: Mask, scenario: SimScenario, rng_seed=None, image_id: str = "sim", return_latent: bool = False, q0=None):
    """Labeled image drawn from the full hierarchical model."""
    rng = np.random.default_rng(rng_seed)
    if scenario.spatial_kind == "matern_mixture":
        return simulate_mixture_image(mask, rng, scenario, image_id, return_latent, q0)
    S = mask.coords
    theta = scenario.theta()
    w = _draw_field(S, cov_matrix(S, theta), theta.sigma2, rng)
    image, latent = _features_and_labels(mask, w, scenario.params(), rng, image_id, q0)
    return (image, latent) if return_latent else image


def mixture_cov(S, components=MIXTURE_COMPONENTS) -> np.ndarray:
    """Arithmetic mean of Matérn covariance matrices."""
    return sum(cov_matrix(S, th) for th in components) / len(components)


def simulate_mixture_image(mask: Mask, rng_seed=None, scenario: Optional[SimScenario] = None, image_id: str = "sim", return_latent: bool = False, q0=None):
    """As simulate_image, with w drawn under the averaged three-component Matérn covariance."""
    rng = np.random.default_rng(rng_seed)
    scenario = scenario or SimScenario(spatial_kind="matern_mixture")
    S = mask.coords
    C = mixture_cov(S)
    w = _draw_field(S, C, float(np.mean([th.sigma2 for th in MIXTURE_COMPONENTS])), rng)
    image, latent = _features_and_labels(mask, w, scenario.params(), rng, image_id, q0)
    return (image, latent) if return_latent else image


def simulate_dataset(scenario: SimScenario, n_images: int, rng_seed=None, prefix: str = "img", masks=None, source=None) -> Dataset:
    """``n_images`` independent images; per-image seeds come from one SeedSequence."""
    ss = rng_seed if isinstance(rng_seed, np.random.SeedSequence) else np.random.SeedSequence(rng_seed)
    mask_seed, *img_seeds = ss.spawn(n_images + 1)
    if masks is None:
        masks = make_masks(n_images, mask_seed, source, scenario.masks)
        if scenario.downsample:
            masks = [m.downsample() for m in masks]
    images = [simulate_image(m, scenario, s, f"{prefix}{k:03d}") for k, (m, s) in enumerate(zip(masks, img_seeds))]
    d = images[0].d
    names = DEFAULT_FEATURES if d == len(DEFAULT_FEATURES) else tuple(f"f{k + 1}" for k in range(d))
    return Dataset(tuple(images), names)


def run_scenario(
    scenario: SimScenario,
    reps: int,
    specs: Sequence[ModelSpec],
    out_dir=None,
    mcmc: MCMCConfig = MCMCConfig(),
    seed: int = 0,
    max_draws: Optional[int] = None,
    source: Optional[Dataset] = None,
) -> dict:
    """Simulate, fit and score each spec for ``reps`` replicates.

    Returns {"rows": [...], "summary": {spec: {"mean", "sd", "n"}}}; with
    ``out_dir`` the rows are also written to results.csv.  A failing
    replicate is logged and skipped.
    """
    from .metrics import pooled_metrics
    from .predict import predict_image
    from .sampler import fit

    rows = []
    for rep in range(reps):
        rep_seed = np.random.SeedSequence(seed, spawn_key=(rep,))
        s_train, s_test = rep_seed.spawn(2)
        try:
            train = simulate_dataset(scenario, scenario.n_train, s_train, "train", source=source)
            test = simulate_dataset(scenario, scenario.n_test, s_test, "test", source=source)
        except Exception:
            log.error("rep %d: simulation failed\n%s", rep, traceback.format_exc())
            continue
        for spec in specs:
            t0 = time.perf_counter()
            try:
                chains = fit(train, spec, mcmc.model_copy(update={"seed": int(rep_seed.generate_state(1)[0])}))
                preds = [predict_image(im, chains, spec, seed=rep, max_draws=max_draws) for im in test]
                m = pooled_metrics(preds, test)
            except Exception:
                log.error("rep %d spec %s failed\n%s", rep, spec.name, traceback.format_exc())
                continue
            rows.append(
                {
                    "scenario": scenario.label,
                    "spec": spec.name,
                    "rep": rep,
                    "AUC": m["auc"],
                    "S80": m["s80"],
                    "runtime_s": time.perf_counter() - t0,
                }
            )
            log.info("%s rep %d %s AUC %.3f", scenario.label, rep, spec.name, m["auc"])
    summary = {}
    for spec in specs:
        a = np.array([r["AUC"] for r in rows if r["spec"] == spec.name])
        s = np.array([r["S80"] for r in rows if r["spec"] == spec.name])
        summary[spec.name] = {
            "mean": float(a.mean()) if len(a) else float("nan"),
            "sd": float(a.std(ddof=1)) if len(a) > 1 else float("nan"),
            "s80_mean": float(s.mean()) if len(s) else float("nan"),
            "n": int(len(a)),
        }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "results.csv", "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
            wr.writeheader()
            for r in rows:
                wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return {"rows": rows, "summary": summary}
