"""Experiment configuration: JSON with one section per pipeline stage.

Example::

    {
      "experiment": "Gp1dRegular",
      "structure": {"n": 400},
      "prior": {"sigma2_scale": 0.1, "lengthscale_shape": 4.0},
      "vae": {"hidden": [35, 30], "latent_dim": 10, "activation": "relu"},
      "train": {"steps": 50000, "batch_size": 500},
      "hmc": {"chains": 4, "warmup": 1000, "samples": 1000},
      "inference": {"obs_fractions": [0.005, 0.01, 0.015]},
      "seeds": {"train": 0, "truth": 1, "obs": 2, "mcmc": 3}
    }

Unknown keys are rejected and every error names the offending field.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

from .errors import InvalidArgumentError
from .mcmc import HmcConfig
from .priors import ArealPriorSpec, GammaPrior, GpPriorSpec, PoissonCountPrior
from .spatial import (
    ArealDataset,
    SpatialStructure,
    build_irregular_grid_1d,
    build_regular_grid_1d,
    build_regular_grid_2d,
    lip_cancer_paths,
    load_areal_dataset,
)
from .vae import TrainConfig

EXPERIMENTS = ("Gp1dRegular", "Gp1dIrregular", "Gp2d", "Poisson1d", "LipCancer", "LipCancerCv")
SECTIONS = ("experiment", "structure", "prior", "vae", "train", "hmc", "inference", "seeds")
SEED_KEYS = ("structure", "train", "truth", "obs", "mcmc", "baseline", "split", "psd")

_STRUCTURE_KEYS = {
    "Gp1dRegular": {"n", "lo", "hi"},
    "Gp1dIrregular": {"n", "lo", "hi"},
    "Gp2d": {"segments"},
    "Poisson1d": {"n", "lo", "hi"},
    "LipCancer": {"data", "adjacency"},
    "LipCancerCv": {"data", "adjacency"},
}
_GP_PRIOR_KEYS = {f.name for f in fields(GpPriorSpec)}
_AREAL_PRIOR_KEYS = {"family", "tau1", "tau2"}
_VAE_KEYS = {"hidden", "latent_dim", "activation", "recon_sd"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}
_HMC_KEYS = {f.name for f in fields(HmcConfig)} - {"seed"}
_INFERENCE_KEYS = {
    "obs_fractions",
    "noise_sd",
    "noise_prior_scale",
    "truth_seeds",
    "folds",
    "psd_draws",
    "baseline_centered",
}


class ConfigError(InvalidArgumentError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class ExperimentConfig:
    raw: dict
    experiment: str
    structure: SpatialStructure
    dataset: ArealDataset | None
    prior: GpPriorSpec | ArealPriorSpec | PoissonCountPrior
    vae: dict
    train: TrainConfig
    hmc: HmcConfig
    inference: dict
    seeds: dict

    @property
    def is_areal(self) -> bool:
        return self.experiment.startswith("LipCancer")

    @property
    def likelihood(self) -> str:
        return "poisson" if self.experiment == "Poisson1d" else "gaussian"

    def digest(self, extra: str = "") -> str:
        """Short hash of the canonical config (plus ``extra``) used to name output directories."""
        text = json.dumps(self.raw, sort_keys=True, separators=(",", ":")) + extra
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def gp_spec(self) -> GpPriorSpec:
        return self.prior.gp if isinstance(self.prior, PoissonCountPrior) else self.prior


def _section(raw: dict, name: str) -> dict:
    value = raw.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(name, "must be an object")
    return value


def _check_keys(section: dict, allowed: set, prefix: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"{prefix}.{key}", "unknown field")


def _build(cls, section: dict, prefix: str, **extra):
    try:
        return cls(**section, **extra)
    except InvalidArgumentError as exc:
        # name the field when the message starts with it
        msg = str(exc)
        field = next((k for k in section if msg.startswith(k)), None)
        raise ConfigError(f"{prefix}.{field}" if field else prefix, msg) from None
    except TypeError as exc:
        raise ConfigError(prefix, str(exc)) from None


def _int(value, field: str, minimum: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(field, "must be an integer")
    if minimum is not None and value < minimum:
        raise ConfigError(field, f"must be >= {minimum}")
    return value


def _gamma(value, field: str):
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        if value <= 0:
            raise ConfigError(field, "must be positive")
        return float(value)
    if isinstance(value, list) and len(value) == 2:
        try:
            return GammaPrior(float(value[0]), float(value[1]))
        except (InvalidArgumentError, TypeError, ValueError) as exc:
            raise ConfigError(field, str(exc)) from None
    raise ConfigError(field, "must be a positive number or a [shape, rate] pair")


def _structure(experiment: str, section: dict, seeds: dict, base: Path):
    _check_keys(section, _STRUCTURE_KEYS[experiment], "structure")
    if experiment in ("LipCancer", "LipCancerCv"):
        data_default, adj_default = lip_cancer_paths()
        paths = []
        for key, default in (("data", data_default), ("adjacency", adj_default)):
            p = Path(section[key]) if key in section else default
            if key in section and not p.is_absolute():
                p = base / p
            if not p.is_file():
                raise ConfigError(f"structure.{key}", f"file not found: {p}")
            paths.append(p)
        dataset = load_areal_dataset(*paths)
        return dataset.structure, dataset
    if experiment == "Gp2d":
        return build_regular_grid_2d(_int(section.get("segments", 25), "structure.segments", 2)), None
    n = _int(section.get("n", 100 if experiment == "Poisson1d" else 400), "structure.n", 2)
    lo, hi = float(section.get("lo", 0.0)), float(section.get("hi", 1.0))
    if not hi > lo:
        raise ConfigError("structure.hi", "must exceed structure.lo")
    if experiment == "Gp1dIrregular":
        return build_irregular_grid_1d(n, lo, hi, seed=seeds["structure"]), None
    return build_regular_grid_1d(n, lo, hi), None


def _prior(experiment: str, section: dict):
    if experiment in ("LipCancer", "LipCancerCv"):
        _check_keys(section, _AREAL_PRIOR_KEYS, "prior")
        family = section.get("family", "BYM")
        if family != "BYM":
            raise ConfigError("prior.family", "lip-cancer experiments use the BYM prior")
        return ArealPriorSpec(
            family="BYM",
            tau1=_gamma(section.get("tau1", [2.0, 2.0]), "prior.tau1"),
            tau2=_gamma(section.get("tau2", [2.0, 2.0]), "prior.tau2"),
        )
    _check_keys(section, _GP_PRIOR_KEYS, "prior")
    gp = _build(GpPriorSpec, section, "prior")
    return PoissonCountPrior(gp) if experiment == "Poisson1d" else gp


def _vae(section: dict) -> dict:
    _check_keys(section, _VAE_KEYS, "vae")
    hidden = section.get("hidden", [35, 30])
    if not isinstance(hidden, list) or not hidden:
        raise ConfigError("vae.hidden", "must be a nonempty list of layer widths")
    for i, h in enumerate(hidden):
        _int(h, f"vae.hidden[{i}]", 1)
    activation = section.get("activation", "relu")
    if activation not in ("relu", "elu"):
        raise ConfigError("vae.activation", "must be 'relu' or 'elu'")
    recon_sd = section.get("recon_sd", 1.0)
    if not isinstance(recon_sd, (int, float)) or not recon_sd > 0:
        raise ConfigError("vae.recon_sd", "must be positive")
    return {
        "hidden": hidden,
        "latent_dim": _int(section.get("latent_dim", 10), "vae.latent_dim", 1),
        "activation": activation,
        "recon_sd": float(recon_sd),
    }


def _inference(experiment: str, section: dict, n: int) -> dict:
    _check_keys(section, _INFERENCE_KEYS, "inference")
    out = {
        "obs_fractions": section.get("obs_fractions", [0.005, 0.01, 0.015]),
        "noise_sd": float(section.get("noise_sd", 0.1)),
        "noise_prior_scale": float(section.get("noise_prior_scale", 0.1)),
        "folds": _int(section.get("folds", 5), "inference.folds", 2),
        "psd_draws": _int(section.get("psd_draws", 1000), "inference.psd_draws", 2),
        "baseline_centered": bool(section.get("baseline_centered", False)),
    }
    fracs = out["obs_fractions"]
    if not isinstance(fracs, list) or not fracs or not all(isinstance(f, (int, float)) and 0 <= f <= 1 for f in fracs):
        raise ConfigError("inference.obs_fractions", "must be a nonempty list of fractions in [0, 1]")
    if not out["noise_sd"] > 0:
        raise ConfigError("inference.noise_sd", "must be positive")
    if not out["noise_prior_scale"] > 0:
        raise ConfigError("inference.noise_prior_scale", "must be positive")
    if experiment == "LipCancerCv" and out["folds"] > n:
        raise ConfigError("inference.folds", f"must not exceed the {n} areas")
    return out


def parse_config(raw: dict, base: Path | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Validate a raw config dict; ``overrides`` replace entries of the seeds section."""
    if not isinstance(raw, dict):
        raise ConfigError("config", "must be a JSON object")
    raw = copy.deepcopy(raw)
    for key in raw:
        if key not in SECTIONS:
            raise ConfigError(key, "unknown section")
    experiment = raw.get("experiment")
    if experiment not in EXPERIMENTS:
        raise ConfigError("experiment", f"must be one of {', '.join(EXPERIMENTS)}")
    seeds_in = _section(raw, "seeds")
    if overrides:
        seeds_in.update(overrides)
        raw["seeds"] = seeds_in
    _check_keys(seeds_in, set(SEED_KEYS), "seeds")
    seeds = {k: _int(seeds_in.get(k, i), f"seeds.{k}", 0) for i, k in enumerate(SEED_KEYS)}
    structure, dataset = _structure(experiment, _section(raw, "structure"), seeds, base or Path.cwd())
    prior = _prior(experiment, _section(raw, "prior"))
    vae = _vae(_section(raw, "vae"))
    train_sec = _section(raw, "train")
    _check_keys(train_sec, _TRAIN_KEYS, "train")
    train = _build(TrainConfig, train_sec, "train", seed=seeds["train"])
    hmc_sec = _section(raw, "hmc")
    _check_keys(hmc_sec, _HMC_KEYS, "hmc")
    hmc = _build(HmcConfig, hmc_sec, "hmc", seed=seeds["mcmc"])
    inference = _inference(experiment, _section(raw, "inference"), structure.n)
    truth_seeds = _section(raw, "inference").get("truth_seeds")
    if truth_seeds is not None:
        if not isinstance(truth_seeds, list) or not truth_seeds:
            raise ConfigError("inference.truth_seeds", "must be a nonempty list of integers")
        inference["truth_seeds"] = [_int(s, "inference.truth_seeds", 0) for s in truth_seeds]
    else:
        inference["truth_seeds"] = [seeds["truth"]]
    return ExperimentConfig(raw, experiment, structure, dataset, prior, vae, train, hmc, inference, seeds)


def builtin_config_names() -> list[str]:
    root = resources.files("vaeprior") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_config(path_or_name: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    """Load a config file, or a built-in config by experiment name (e.g. ``Gp1dRegular``)."""
    path = Path(path_or_name)
    if not path.is_file():
        builtin = resources.files("vaeprior") / "configs" / f"{path_or_name}.json"
        if not builtin.is_file():
            raise ConfigError("config", f"no such file or built-in config: {path_or_name}")
        path = Path(str(builtin))
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return parse_config(raw, base=path.parent, overrides=overrides)
