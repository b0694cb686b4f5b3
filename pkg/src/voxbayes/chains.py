"""Stored MCMC draws and their text serialization.

File layout: ``#``-prefixed JSON metadata lines, then a CSV table with one
row per retained draw.  Floats are written with 17 significant digits, so
a load/save round trip is exact.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .config import MCMCConfig, ModelSpec
from .covariance import MaternParams

__all__ = ["GlobalDraw", "ChainSet", "split_rhat"]

FORMAT_VERSION = 1


@dataclass(frozen=True)
class GlobalDraw:
    """One posterior draw of the parameters shared across images."""

    mu: np.ndarray  # (2, 2, d), indexed [c, r]
    gamma: np.ndarray  # (2, 2, d, d)
    Sigma: Optional[np.ndarray]  # (d, d) for SSE variants
    theta: object  # MaternParams, CAR sigma2 or None
    q0: np.ndarray  # (2,), indexed by region


def split_rhat(x) -> float:
    """Split-chain potential scale reduction for draws shaped (chains, draws)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None]
    n = x.shape[1] // 2
    if n < 2:
        return float("nan")
    halves = np.concatenate([x[:, :n], x[:, -n:]], axis=0)
    means = halves.mean(axis=1)
    W = halves.var(axis=1, ddof=1).mean()
    B = n * means.var(ddof=1)
    if W == 0:
        return 1.0 if B == 0 else float("inf")
    var = (n - 1) / n * W + B / n
    return float(np.sqrt(var / W))


@dataclass
class ChainSet:
    spec: ModelSpec
    q0: np.ndarray
    image_ids: list
    feature_names: list
    mu: np.ndarray  # (C, S, 2, 2, d)
    gamma: np.ndarray  # (C, S, 2, 2, d, d)
    Sigma: Optional[np.ndarray] = None  # (C, S, d, d)
    theta: Optional[np.ndarray] = None  # (C, S, k) natural scale
    delta: Optional[np.ndarray] = None  # (C, S, N, d)
    mcmc: Optional[MCMCConfig] = None
    acceptance: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def n_chains(self) -> int:
        return self.mu.shape[0]

    @property
    def n_draws(self) -> int:
        return self.mu.shape[1]

    @property
    def d(self) -> int:
        return self.mu.shape[-1]

    def theta_at(self, c: int, s: int):
        if self.theta is None:
            return None
        v = self.theta[c, s]
        if len(v) == 1:
            return float(v[0])
        return MaternParams(*map(float, v))

    def draw(self, c: int, s: int) -> GlobalDraw:
        return GlobalDraw(
            self.mu[c, s],
            self.gamma[c, s],
            None if self.Sigma is None else self.Sigma[c, s],
            self.theta_at(c, s),
            self.q0,
        )

    def draws(self, max_draws: int | None = None) -> Iterator[GlobalDraw]:
        """Draws in (chain, iteration) order, optionally thinned evenly to ``max_draws``."""
        pairs = [(c, s) for c in range(self.n_chains) for s in range(self.n_draws)]
        if max_draws is not None and max_draws < len(pairs):
            keep = np.unique(np.linspace(0, len(pairs) - 1, max_draws).round().astype(int))
            pairs = [pairs[k] for k in keep]
        for c, s in pairs:
            yield self.draw(c, s)

    @classmethod
    def from_fixed(cls, spec: ModelSpec, draw: GlobalDraw, n_draws: int = 1) -> "ChainSet":
        """A chain that repeats one set of global parameters (for plug-in prediction)."""
        rep = lambda a: None if a is None else np.broadcast_to(np.asarray(a, float), (1, n_draws) + np.shape(a)).copy()  # noqa: E731
        theta = None
        if draw.theta is not None:
            tv = [draw.theta] if np.isscalar(draw.theta) else [draw.theta.sigma2, draw.theta.phi, draw.theta.nu]
            theta = rep(np.array(tv, dtype=float))
        d = np.shape(draw.mu)[-1]
        return cls(
            spec=spec,
            q0=np.asarray(draw.q0, dtype=float),
            image_ids=[],
            feature_names=[f"f{k + 1}" for k in range(d)],
            mu=rep(draw.mu),
            gamma=rep(draw.gamma),
            Sigma=rep(draw.Sigma),
            theta=theta,
        )

    # ------------------------------------------------------------ summaries

    def scalar_traces(self) -> dict:
        """Named scalar traces shaped (chains, draws)."""
        out = {}
        d = self.d
        for c in range(2):
            for r in range(2):
                for k in range(d):
                    out[f"mu_c{c}_r{r}_{k}"] = self.mu[:, :, c, r, k]
                    out[f"gamma_c{c}_r{r}_{k}{k}"] = self.gamma[:, :, c, r, k, k]
        if self.Sigma is not None:
            for k in range(d):
                out[f"Sigma_{k}{k}"] = self.Sigma[:, :, k, k]
        if self.theta is not None:
            names = ["sigma2", "phi", "nu"][: self.theta.shape[-1]]
            for k, nm in enumerate(names):
                out[f"log_{nm}"] = np.log(self.theta[:, :, k])
        return out

    def rhat(self) -> dict:
        return {k: split_rhat(v) for k, v in self.scalar_traces().items()}

    def summary(self) -> dict:
        out = {}
        for k, v in self.scalar_traces().items():
            flat = v.ravel()
            out[k] = {
                "mean": float(flat.mean()),
                "q05": float(np.quantile(flat, 0.05)),
                "q95": float(np.quantile(flat, 0.95)),
                "rhat": split_rhat(v),
            }
        return out

    # ---------------------------------------------------------------- IO

    def _columns(self):
        d = self.d
        cols, blocks = [], []
        C, S = self.n_chains, self.n_draws

        def add(prefix, arr, shape):
            flat = arr.reshape(C * S, -1)
            for idx in np.ndindex(*shape):
                cols.append(prefix + "_".join(str(i) for i in idx))
            blocks.append(flat)

        add("mu_", self.mu, (2, 2, d))
        add("gamma_", self.gamma, (2, 2, d, d))
        if self.Sigma is not None:
            add("Sigma_", self.Sigma, (d, d))
        if self.theta is not None:
            k = self.theta.shape[-1]
            blocks.append(self.theta.reshape(C * S, k))
            cols.extend(["sigma2", "phi", "nu"][:k])
        if self.delta is not None:
            N = self.delta.shape[2]
            add("delta_", self.delta, (N, d))
        return cols, np.concatenate(blocks, axis=1)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        cols, table = self._columns()
        C, S = self.n_chains, self.n_draws
        idx = np.array([(c, s) for c in range(C) for s in range(S)], dtype=np.int64).reshape(-1, 2)
        meta = {
            "format": "voxbayes-chains",
            "version": FORMAT_VERSION,
            "spec": self.spec.model_dump(mode="json"),
            "mcmc": None if self.mcmc is None else self.mcmc.model_dump(mode="json"),
            "q0": [float(v) for v in self.q0],
            "image_ids": list(self.image_ids),
            "feature_names": list(self.feature_names),
            "shape": {"chains": C, "draws": S, "d": self.d},
            "has": {
                "Sigma": self.Sigma is not None,
                "theta": None if self.theta is None else int(self.theta.shape[-1]),
                "delta": None if self.delta is None else int(self.delta.shape[2]),
            },
            "acceptance": self.acceptance,
            "meta": self.meta,
        }
        buf = io.StringIO()
        for line in json.dumps(meta, indent=1, default=_json_default).splitlines():
            buf.write("# " + line + "\n")
        buf.write(",".join(["chain", "draw", *cols]) + "\n")
        for (c, s), row in zip(idx, table):
            buf.write(f"{c},{s}," + ",".join(repr(float(v)) for v in row) + "\n")
        path.write_text(buf.getvalue())
        return path

    @classmethod
    def load(cls, path) -> "ChainSet":
        lines = Path(path).read_text().splitlines()
        head = [ln[2:] for ln in lines if ln.startswith("# ")]
        body = [ln for ln in lines if not ln.startswith("#")]
        meta = json.loads("\n".join(head))
        if meta.get("format") != "voxbayes-chains":
            raise ValueError(f"{path}: not a chain file")
        C, S, d = meta["shape"]["chains"], meta["shape"]["draws"], meta["shape"]["d"]
        header = body[0].split(",")
        table = np.array([[float(v) for v in ln.split(",")] for ln in body[1:]], dtype=float).reshape(C * S, len(header))
        col = {name: k for k, name in enumerate(header)}

        def take(prefix, shape):
            keys = [prefix + "_".join(str(i) for i in idx) for idx in np.ndindex(*shape)]
            return table[:, [col[k] for k in keys]].reshape((C, S) + shape)

        has = meta["has"]
        theta = None
        if has["theta"]:
            names = ["sigma2", "phi", "nu"][: has["theta"]]
            theta = table[:, [col[k] for k in names]].reshape(C, S, has["theta"])
        mcmc = MCMCConfig(**meta["mcmc"]) if meta.get("mcmc") else None
        return cls(
            spec=ModelSpec(**meta["spec"]),
            q0=np.array(meta["q0"], dtype=float),
            image_ids=meta["image_ids"],
            feature_names=meta["feature_names"],
            mu=take("mu_", (2, 2, d)),
            gamma=take("gamma_", (2, 2, d, d)),
            Sigma=take("Sigma_", (d, d)) if has["Sigma"] else None,
            theta=theta,
            delta=take("delta_", (has["delta"], d)) if has["delta"] else None,
            mcmc=mcmc,
            acceptance=meta.get("acceptance", {}),
            meta=meta.get("meta", {}),
        )


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")
