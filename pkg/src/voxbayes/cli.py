"""Command-line interface: simulate, fit, predict, cv, scenario, validate.

Every command takes --config (YAML or JSON), --seed, --threads and --out.
Command-line flags override config values.  Each run writes run.json next
to its outputs with the resolved config, its hash, the seed and the package
version.  Failures print a JSON object {"error": category, ...} to stderr
and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, PositiveInt, ValidationError, field_validator

from . import __version__
from .config import MODEL_NAMES, VARIANTS, MCMCConfig, ModelSpec, SimScenario, config_hash, load_config_file
from .data import DataError

log = logging.getLogger("voxbayes")

EXIT_CODES = {"internal": 1, "config": 2, "data": 3, "sampler": 4, "io": 5, "validation_failed": 6}


class CLIError(Exception):
    def __init__(self, category: str, message: str, problems=None):
        super().__init__(message)
        self.category = category
        self.problems = problems or []


class RunConfig(BaseModel):
    """Everything a command needs; validated before any compute."""

    model_config = ConfigDict(extra="forbid")

    command: str
    seed: int = 0
    threads: PositiveInt = Field(default_factory=lambda: os.cpu_count() or 1)
    out: str = "out"
    data: Optional[str] = None
    train: Optional[str] = None
    chains: Optional[str] = None
    model: str = "M-sse-nngp"
    spec: dict = Field(default_factory=dict)
    mcmc: MCMCConfig = MCMCConfig()
    scenario: SimScenario = SimScenario()
    specs: list[str] = Field(default_factory=lambda: ["M-base", "M-sse", "M-sse-nngp"])
    reps: PositiveInt = 1
    k: PositiveInt = 5
    max_draws: Optional[PositiveInt] = None
    maps: bool = False
    specificity: float = Field(0.8, gt=0.0, lt=1.0)

    @field_validator("model")
    @classmethod
    def _known_model(cls, v):
        if v not in MODEL_NAMES and v not in VARIANTS:
            raise ValueError(f"unknown model {v!r}; allowed model names: {sorted(MODEL_NAMES)}; allowed variants: {list(VARIANTS)}")
        return v

    @field_validator("specs")
    @classmethod
    def _known_specs(cls, v):
        bad = [s for s in v if s not in MODEL_NAMES and s not in VARIANTS]
        if bad:
            raise ValueError(f"unknown models {bad}; allowed model names: {sorted(MODEL_NAMES)}; allowed variants: {list(VARIANTS)}")
        return v

    def model_spec(self, name: Optional[str] = None) -> ModelSpec:
        name = name or self.model
        try:
            return ModelSpec.from_name(name, **self.spec)
        except ValidationError as e:
            variant = MODEL_NAMES[name][0] if name in MODEL_NAMES else name
            extra = ModelSpec.cross_field_problems({**self.spec, "variant": variant})
            raise CLIError("config", f"invalid model spec for {name}", _problems(e) + [f"spec: {p}" for p in extra]) from None

    def model_specs(self) -> list:
        return [self.model_spec(s) for s in self.specs]

    def effective_threads(self, n_images: int) -> int:
        return max(1, min(self.threads, n_images))


def _problems(e: ValidationError) -> list:
    return [f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()]


def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    raw: dict = {}
    if args.config:
        try:
            raw = load_config_file(args.config)
        except FileNotFoundError:
            raise CLIError("io", f"config file not found: {args.config}") from None
        except Exception as e:
            raise CLIError("config", f"could not parse {args.config}: {e}") from None
    over: dict = {"command": args.command}
    for key in ("seed", "threads", "out", "data", "train", "chains", "model", "reps", "k", "max_draws"):
        val = getattr(args, key, None)
        if val is not None:
            over[key] = val
    if getattr(args, "specs", None):
        over["specs"] = args.specs.split(",")
    if getattr(args, "maps", False):
        over["maps"] = True
    mc = {k: getattr(args, k, None) for k in ("chains_n", "iters", "burnin", "thin")}
    mc = {("chains" if k == "chains_n" else k): v for k, v in mc.items() if v is not None}
    if args.seed is not None:
        mc["seed"] = args.seed
    if args.threads is not None:
        mc["threads"] = args.threads
    if mc:
        over["mcmc"] = mc
    scen = {k: getattr(args, k, None) for k in ("n_train", "n_test")}
    scen = {k: v for k, v in scen.items() if v is not None}
    if scen:
        over["scenario"] = scen
    merged = _deep_merge(raw, over)
    try:
        cfg = RunConfig(**merged)
    except ValidationError as e:
        raise CLIError("config", "configuration is invalid", _problems(e)) from None
    # spec fields are validated eagerly too, so every problem is reported up front
    probs = []
    for name in {cfg.model, *cfg.specs}:
        try:
            cfg.model_spec(name)
        except CLIError as e:
            probs.extend(e.problems)
    if probs:
        raise CLIError("config", "configuration is invalid", sorted(set(probs)))
    return cfg


def _provenance(cfg: RunConfig) -> dict:
    blob = cfg.model_dump(mode="json")
    return {"config": blob, "config_hash": config_hash(blob), "seed": cfg.seed, "version": __version__}


def _write_run(cfg: RunConfig, out: Path, extra: Optional[dict] = None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    rec = {"command": cfg.command, **_provenance(cfg), **(extra or {})}
    path = out / "run.json"
    path.write_text(json.dumps(rec, indent=1, default=str))
    return path


def _load(path: Optional[str], what: str):
    from .data import load_dataset

    if not path:
        raise CLIError("config", f"--{what} is required for this command")
    if not Path(path).exists():
        raise CLIError("io", f"{what} path does not exist: {path}")
    return load_dataset(path)


# ---------------------------------------------------------------- commands


def cmd_simulate(cfg: RunConfig) -> dict:
    from .data import write_dataset
    from .simulate import simulate_dataset

    import numpy as np

    out = Path(cfg.out)
    sc = cfg.scenario
    tr_seed, te_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    train = simulate_dataset(sc, sc.n_train, tr_seed, "train")
    test = simulate_dataset(sc, sc.n_test, te_seed, "test")
    write_dataset(train, out / "train")
    write_dataset(test, out / "test")
    _write_run(cfg, out, {"n_train": len(train), "n_test": len(test)})
    return {"train": str(out / "train"), "test": str(out / "test")}


def cmd_fit(cfg: RunConfig) -> dict:
    from .sampler import fit

    train = _load(cfg.data, "data")
    spec = cfg.model_spec()
    mcmc = cfg.mcmc.model_copy(update={"threads": cfg.effective_threads(len(train))})
    chains = fit(train, spec, mcmc)
    chains.meta.update(_provenance(cfg))
    out = Path(cfg.out)
    path = chains.save(out / "chains.csv")
    _write_run(cfg, out, {"chains_file": str(path), "acceptance": chains.acceptance})
    return {"chains": str(path), "acceptance": chains.acceptance, "runtime_s": chains.meta["runtime_s"]}


def cmd_predict(cfg: RunConfig) -> dict:
    from .chains import ChainSet
    from .maps import export_maps
    from .metrics import MetricError, cutoff_at_specificity, pooled_metrics
    from .predict import predict_dataset

    import numpy as np

    test = _load(cfg.data, "data")
    if not cfg.chains or not Path(cfg.chains).exists():
        raise CLIError("io", f"chains file not found: {cfg.chains}")
    chains = ChainSet.load(cfg.chains)
    spec = chains.spec
    threads = cfg.effective_threads(len(test))
    preds = predict_dataset(test, chains, spec, seed=cfg.seed, max_draws=cfg.max_draws, threads=threads)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "predictions.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["image_id", "voxel", "x_raw", "y_raw", "region", "prob"])
        for im, p in zip(test, preds):
            for j in range(im.n):
                wr.writerow([im.image_id, j, repr(float(im.raw_coords[j, 0])), repr(float(im.raw_coords[j, 1])), int(im.region[j]), repr(float(p.probs[j]))])
    result: dict = {"predictions": str(out / "predictions.csv"), "n_images": len(test)}
    labeled = all(im.is_labeled for im in test)
    if labeled:
        try:
            result["metrics"] = {k: v for k, v in pooled_metrics(preds, test).items()}
        except MetricError as e:
            result["metrics_error"] = str(e)
    if cfg.maps:
        # cutoff from the pooled training ROC when training data is given, else from the test labels
        ref = _load(cfg.train, "train") if cfg.train else (test if labeled else None)
        if ref is None:
            raise CLIError("config", "--maps needs --train or labeled test data to place the cutoff")
        ref_preds = preds if ref is test else predict_dataset(ref, chains, spec, seed=cfg.seed, max_draws=cfg.max_draws, threads=threads)
        cutoff = cutoff_at_specificity(
            np.concatenate([p.probs for p in ref_preds]), np.concatenate([im.labels for im in ref]), cfg.specificity
        )
        result["cutoff"] = cutoff
        result["maps"] = [export_maps(p, im, cutoff, out / "maps")["paths"] for p, im in zip(preds, test)]
    (out / "metrics.json").write_text(json.dumps({**result, **_provenance(cfg)}, indent=1, default=str))
    _write_run(cfg, out)
    return result


def cmd_cv(cfg: RunConfig) -> dict:
    from .cv import kfold_cv

    data = _load(cfg.data, "data")
    spec = cfg.model_spec()
    mcmc = cfg.mcmc.model_copy(update={"threads": cfg.effective_threads(len(data))})
    res = kfold_cv(data, cfg.k, spec, mcmc, seed=cfg.seed, max_draws=cfg.max_draws)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "cv.json").write_text(json.dumps({**res, **_provenance(cfg)}, indent=1, default=str))
    _write_run(cfg, out)
    return {"auc": res["auc"], "s80": res["s80"], "folds": len(res["folds"]), "used": res["n_used"]}


def cmd_scenario(cfg: RunConfig) -> dict:
    from .simulate import run_scenario

    out = Path(cfg.out)
    res = run_scenario(cfg.scenario, cfg.reps, cfg.model_specs(), out, cfg.mcmc, seed=cfg.seed, max_draws=cfg.max_draws)
    if not res["rows"]:
        raise CLIError("sampler", "every replicate failed; see the log for tracebacks")
    (out / "summary.json").write_text(json.dumps({"summary": res["summary"], **_provenance(cfg)}, indent=1, default=str))
    _write_run(cfg, out)
    return {"results": str(out / "results.csv"), "rows": len(res["rows"]), "summary": res["summary"]}


def cmd_validate(cfg: RunConfig) -> dict:
    from .validate import run_checks

    res = run_checks(cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "validate.json").write_text(json.dumps({"checks": res, **_provenance(cfg)}, indent=1))
    _write_run(cfg, out)
    failed = [r["check"] for r in res if not r["passed"]]
    if failed:
        raise CLIError("validation_failed", f"{len(failed)} check(s) failed", failed)
    return {"passed": len(res)}


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "cv": cmd_cv,
    "scenario": cmd_scenario,
    "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="voxbayes", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML or JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")

    def mcmc_flags(p):
        p.add_argument("--model", help="model name (e.g. M-sse-nngp) or variant (e.g. NNGP+SSE)")
        p.add_argument("--n-chains", dest="chains_n", type=int)
        p.add_argument("--iters", type=int, help="post burn-in iterations per chain")
        p.add_argument("--burnin", type=int)
        p.add_argument("--thin", type=int)

    p = sub.add_parser("simulate", help="simulate train/test datasets")
    common(p)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)

    p = sub.add_parser("fit", help="fit a model to labeled data")
    common(p)
    mcmc_flags(p)
    p.add_argument("--data", help="dataset directory")

    p = sub.add_parser("predict", help="predict cancer probabilities for a dataset")
    common(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--chains", help="chains file written by fit")
    p.add_argument("--train", help="training dataset (places the map cutoff)")
    p.add_argument("--max-draws", type=int)
    p.add_argument("--maps", action="store_true", help="write heat/classification maps")

    p = sub.add_parser("cv", help="image-level k-fold cross-validation")
    common(p)
    mcmc_flags(p)
    p.add_argument("--data")
    p.add_argument("--k", type=int)
    p.add_argument("--max-draws", type=int)

    p = sub.add_parser("scenario", help="simulation study over replicates and models")
    common(p)
    mcmc_flags(p)
    p.add_argument("--reps", type=int)
    p.add_argument("--specs", help="comma-separated model names")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--max-draws", type=int)

    p = sub.add_parser("validate", help="run the quick oracle/property checks")
    common(p)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        result = COMMANDS[args.command](cfg)
    except CLIError as e:
        return _fail(e.category, str(e), e.problems)
    except DataError as e:
        return _fail("data", str(e))
    except ValidationError as e:
        return _fail("config", "configuration is invalid", _problems(e))
    except OSError as e:
        return _fail("io", str(e))
    except Exception as e:
        from .sampler import SamplerError

        if isinstance(e, SamplerError):
            return _fail("sampler", str(e))
        log.exception("unexpected failure")
        return _fail("internal", f"{type(e).__name__}: {e}")
    print(json.dumps({"status": "ok", "command": args.command, **result}, default=str))
    return 0


def _fail(category: str, message: str, problems=None) -> int:
    print(json.dumps({"error": category, "message": message, "problems": problems or []}), file=sys.stderr)
    return EXIT_CODES.get(category, 1)


if __name__ == "__main__":
    sys.exit(main())
