"""Image-level k-fold cross-validation."""

from __future__ import annotations

import logging
from typing import Optional

import numpy as np

from .config import MCMCConfig, ModelSpec
from .data import Dataset
from .metrics import MetricError, pooled_metrics

__all__ = ["cv_folds", "kfold_cv"]

log = logging.getLogger(__name__)


def cv_folds(image_ids, k: int, seed: int = 0) -> list:
    """Seeded partition of image ids into ``k`` folds.

    Ids are sorted before shuffling, so the folds do not depend on the
    order images appear in the dataset.
    """
    ids = sorted(image_ids)
    if not 2 <= k <= len(ids):
        raise ValueError(f"need 2 <= k <= number of images ({len(ids)}), got k={k}")
    perm = np.random.default_rng(seed).permutation(len(ids))
    return [sorted(ids[j] for j in part) for part in np.array_split(perm, k)]


def kfold_cv(
    data: Dataset,
    k: int,
    spec: ModelSpec,
    mcmc: MCMCConfig = MCMCConfig(),
    seed: int = 0,
    max_draws: Optional[int] = None,
) -> dict:
    """Fit on k-1 folds, predict the held-out fold, and summarize.

    Folds whose test images carry a single class are flagged and left out
    of the averages.
    """
    from .predict import predict_image
    from .sampler import fit

    folds = cv_folds(data.image_ids, k, seed)
    out = []
    for f, test_ids in enumerate(folds):
        train = data.select([i for i in sorted(data.image_ids) if i not in set(test_ids)])
        test = data.select(test_ids)
        chains = fit(train, spec, mcmc.model_copy(update={"seed": mcmc.seed + f}))
        preds = [predict_image(im, chains, spec, seed=seed, max_draws=max_draws) for im in test]
        rec = {"fold": f, "test_ids": test_ids, "flagged": False}
        try:
            rec.update(pooled_metrics(preds, test))
        except MetricError as e:
            log.warning("fold %d excluded from averages: %s", f, e)
            rec.update({"auc": float("nan"), "s80": float("nan"), "flagged": True})
        out.append(rec)
    ok = [r for r in out if not r["flagged"]]
    return {
        "folds": out,
        "auc": float(np.mean([r["auc"] for r in ok])) if ok else float("nan"),
        "s80": float(np.mean([r["s80"] for r in ok])) if ok else float("nan"),
        "n_used": len(ok),
    }
