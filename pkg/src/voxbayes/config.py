"""Configuration schema.

Every numeric default used by the library lives in this file.  Config files
(YAML or JSON) are validated against these models; validation reports every
problem at once.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, model_validator

from .covariance import MaternParams

__all__ = [
    "VARIANTS",
    "MODEL_NAMES",
    "ThetaConfig",
    "HyperPriors",
    "ModelSpec",
    "MCMCConfig",
    "BaseParams",
    "SimScenario",
    "MaskConfig",
    "load_config_file",
    "config_hash",
]

Variant = Literal["Base", "SSE", "NNGP", "NNGP+SSE", "RR", "RR+SSE", "CAR", "CAR+SSE", "FullGP", "FullGP+SSE"]
VARIANTS = ("Base", "SSE", "NNGP", "NNGP+SSE", "RR", "RR+SSE", "CAR", "CAR+SSE", "FullGP", "FullGP+SSE")

# model labels used in result tables -> (variant, post hoc smoothing)
MODEL_NAMES = {
    "M-base": ("Base", False),
    "M-sse": ("SSE", False),
    "M-nngp": ("NNGP", False),
    "M-sse-nngp": ("NNGP+SSE", False),
    "M-rr": ("RR", False),
    "M-sse-rr": ("RR+SSE", False),
    "M-car": ("CAR", False),
    "M-sse-car": ("CAR+SSE", False),
    "M-full": ("FullGP", False),
    "M-sse-full": ("FullGP+SSE", False),
    "M-smooth": ("Base", True),
}

_SPATIAL_KIND = {"NNGP": "nngp", "RR": "rr", "CAR": "car", "FullGP": "full"}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ThetaConfig(_Strict):
    sigma2: PositiveFloat
    phi: PositiveFloat = 0.5
    nu: PositiveFloat = 1.0

    def matern(self) -> MaternParams:
        return MaternParams(self.sigma2, self.phi, self.nu)


class HyperPriors(_Strict):
    mu_var: PositiveFloat = 1e4
    gamma_df: Optional[PositiveFloat] = None  # None -> d + 2
    gamma_scale: PositiveFloat = 1.0
    sigma_df: Optional[PositiveFloat] = None  # None -> d + 2
    sigma_scale: PositiveFloat = 1.0
    # uniform priors on the log scale within these bounds
    sigma2_bounds: tuple[PositiveFloat, PositiveFloat] = (1e-3, 1e4)
    phi_bounds: tuple[PositiveFloat, PositiveFloat] = (0.01, 10.0)
    nu_bounds: tuple[PositiveFloat, PositiveFloat] = (0.1, 30.0)

    @model_validator(mode="after")
    def _ordered(self):
        bad = [n for n in ("sigma2_bounds", "phi_bounds", "nu_bounds") if getattr(self, n)[0] >= getattr(self, n)[1]]
        if bad:
            raise ValueError(f"lower bound must be below upper bound for {bad}")
        return self

    def df_gamma(self, d: int) -> float:
        return self.gamma_df if self.gamma_df is not None else d + 2.0

    def df_sigma(self, d: int) -> float:
        return self.sigma_df if self.sigma_df is not None else d + 2.0


class ModelSpec(_Strict):
    variant: Variant
    label: Optional[str] = None
    m: PositiveInt = 10
    a: PositiveInt = 10
    alpha_car: float = Field(0.99, gt=0.0, lt=1.0)
    car_cutoff: Optional[PositiveFloat] = None
    hyperpriors: HyperPriors = HyperPriors()
    theta_fixed: Optional[ThetaConfig] = None
    theta_init: ThetaConfig = ThetaConfig(sigma2=1.0, phi=0.5, nu=1.0)
    # probit prevalence offsets (CG, PZ); None -> sample prevalence of the training data
    q0: Optional[tuple[float, float]] = None
    smooth: bool = False
    smoothing_bandwidth: PositiveFloat = 0.08
    inner_sweeps: PositiveInt = 20
    inner_burn: int = Field(10, ge=0)
    dense_limit: PositiveInt = 2000
    target_accept: float = Field(0.25, gt=0.0, lt=1.0)
    # extra MH move rescaling (sigma2, w) jointly at fixed whitened field
    scale_move: bool = True
    # extra block MH move on theta at fixed whitened field, kappa integrated out
    whitened_move: bool = True
    # theta MH against p(theta | kappa) with w integrated out, then a joint
    # draw of w; replaces the centred theta update where the field supports it
    collapsed_move: bool = True

    @classmethod
    def cross_field_problems(cls, data: dict) -> list:
        """Checks spanning several fields, runnable on raw input.

        Field-level errors stop pydantic before model validators run, so
        callers that want every problem at once call this directly.
        """
        get = lambda k: data.get(k, cls.model_fields[k].default)  # noqa: E731
        problems = []
        try:
            if int(get("inner_burn")) >= int(get("inner_sweeps")):
                problems.append("inner_burn must be smaller than inner_sweeps")
        except (TypeError, ValueError):
            pass
        if str(data.get("variant", "")).startswith("FullGP") and get("theta_fixed") is None:
            problems.append("FullGP variants need theta_fixed (theta is not sampled under the dense model)")
        return problems

    @model_validator(mode="after")
    def _consistent(self):
        problems = self.cross_field_problems(dict(self))
        if problems:
            raise ValueError("; ".join(problems))
        return self

    @property
    def sse(self) -> bool:
        return self.variant.endswith("+SSE") or self.variant == "SSE"

    @property
    def spatial(self) -> Optional[str]:
        return _SPATIAL_KIND.get(self.variant.split("+")[0])

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        for name, (v, sm) in MODEL_NAMES.items():
            if v == self.variant and sm == self.smooth:
                return name
        return self.variant

    @classmethod
    def from_name(cls, name: str, **kw) -> "ModelSpec":
        """Spec from a model label such as ``M-sse-nngp`` or a variant name."""
        if name in MODEL_NAMES:
            variant, smooth = MODEL_NAMES[name]
            kw.setdefault("smooth", smooth)
            kw.setdefault("label", name)
            return cls(variant=variant, **kw)
        return cls(variant=name, **kw)


class MCMCConfig(_Strict):
    chains: PositiveInt = 2
    iters: PositiveInt = 25000  # post burn-in
    burnin: int = Field(5000, ge=0)
    thin: PositiveInt = 25
    seed: int = 0
    threads: PositiveInt = 1
    adapt_every: PositiveInt = 50

    @model_validator(mode="after")
    def _keeps_draws(self):
        if self.iters < self.thin:
            raise ValueError(f"iters={self.iters} is smaller than thin={self.thin}; no draws would be kept")
        return self


class BaseParams(_Strict):
    """Non-spatial generating parameters; indices are [c][r] with r = 1 for PZ."""

    mu: list[list[list[float]]]
    gamma: list[list[list[list[float]]]]
    Sigma: list[list[float]]
    prevalence: tuple[float, float]  # (CG, PZ)

    @model_validator(mode="after")
    def _shapes(self):
        import numpy as np

        problems = []
        mu = np.asarray(self.mu, dtype=float)
        gamma = np.asarray(self.gamma, dtype=float)
        Sig = np.asarray(self.Sigma, dtype=float)
        if mu.ndim != 3 or mu.shape[:2] != (2, 2):
            problems.append(f"mu must be 2 x 2 x d, got {mu.shape}")
        else:
            d = mu.shape[2]
            if gamma.shape != (2, 2, d, d):
                problems.append(f"gamma must be 2 x 2 x {d} x {d}, got {gamma.shape}")
            else:
                for c in range(2):
                    for r in range(2):
                        if not _is_spd(gamma[c, r]):
                            problems.append(f"gamma[{c}][{r}] is not symmetric positive definite")
            if Sig.shape != (d, d):
                problems.append(f"Sigma must be {d} x {d}, got {Sig.shape}")
            elif not (np.allclose(Sig, Sig.T) and np.all(np.linalg.eigvalsh(Sig) >= 0)):
                problems.append("Sigma must be symmetric positive semidefinite")
        if not all(0.0 < p < 1.0 for p in self.prevalence):
            problems.append("prevalences must lie strictly between 0 and 1")
        if problems:
            raise ValueError("; ".join(problems))
        return self

    @property
    def d(self) -> int:
        return len(self.mu[0][0])


def _is_spd(A) -> bool:
    import numpy as np

    A = np.asarray(A)
    if not np.allclose(A, A.T):
        return False
    try:
        np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return False
    return True


MEAN_SHIFT = 1.0


def default_base_params(d: int = 4) -> BaseParams:
    """Placeholder generating parameters.

    The first feature moves opposite to the others (ADC falls where the
    perfusion parameters rise).  Within-stratum covariance is equicorrelated
    (0.7) after that sign flip, so the class shift lies along the dominant
    noise direction.  Between-patient covariance is 0.5 * equicorrelation
    (0.5) with the same flip.  Prevalences 0.15 (CG) / 0.35 (PZ).
    """
    import numpy as np

    signs = np.ones(d)
    signs[0] = -1.0
    flip = np.outer(signs, signs)
    eq = lambda rho, s: s * flip * ((1 - rho) * np.eye(d) + rho * np.ones((d, d)))  # noqa: E731
    mu = np.zeros((2, 2, d))
    for c in range(2):
        for r in range(2):
            mu[c, r] = signs * (MEAN_SHIFT * c + 0.5 * r)
    G = np.zeros((2, 2, d, d))
    for c in range(2):
        for r in range(2):
            G[c, r] = eq(0.7, 1.0 + 0.2 * c)
    S = eq(0.5, 0.5)
    return BaseParams(mu=mu.tolist(), gamma=G.tolist(), Sigma=S.tolist(), prevalence=(0.15, 0.35))


class MaskConfig(_Strict):
    """Synthetic elliptical masks (raw units)."""

    step: PositiveFloat = 0.04
    semi_x: tuple[PositiveFloat, PositiveFloat] = (1.4, 1.8)
    semi_y: tuple[PositiveFloat, PositiveFloat] = (1.1, 1.4)
    cg_fraction: float = Field(0.6, gt=0.0, lt=1.0)
    cg_shift: float = 0.15


class SimScenario(_Strict):
    name: Optional[str] = None
    sigma2: PositiveFloat = 5.0
    phi: PositiveFloat = 0.5
    nu: PositiveFloat = 1.5
    n_train: PositiveInt = 34
    n_test: PositiveInt = 10
    spatial_kind: Literal["matern", "matern_mixture"] = "matern"
    base_params: Optional[BaseParams] = None
    masks: MaskConfig = MaskConfig()
    downsample: bool = True

    def params(self) -> BaseParams:
        return self.base_params if self.base_params is not None else default_base_params()

    def theta(self) -> MaternParams:
        return MaternParams(self.sigma2, self.phi, self.nu)

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.spatial_kind == "matern_mixture":
            return "mixture"
        return f"s2={self.sigma2:g},phi={self.phi:g},nu={self.nu:g}"


def load_config_file(path) -> dict:
    """Read a YAML or JSON config file into a dict."""
    text = Path(path).read_text()
    data = yaml.safe_load(text) if str(path).endswith((".yaml", ".yml")) else json.loads(text)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: top level of a config file must be a mapping")
    return data


def config_hash(obj) -> str:
    """Stable short hash of a JSON-serializable config."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
