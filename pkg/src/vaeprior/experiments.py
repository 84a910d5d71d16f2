"""End-to-end experiment drivers: synthetic GP regression, synthetic counts and lip cancer.

Each driver returns a :class:`ResultsBundle` that can be written as
``summary.csv``, ``diagnostics.csv``, ``meta.json`` and (for synthetic
runs) ``truth.csv``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .diagnostics import EssReport, ess_report, kfold_split, mse
from .errors import InvalidArgumentError
from .mcmc import (
    SUMMARY_COLUMNS,
    ChainSet,
    DecoderEffect,
    DirectBymEffect,
    DirectGpEffect,
    EffectSource,
    HmcConfig,
    ModelSpec,
    PredictiveSummary,
    hmc_sample,
    posterior_predictive,
)
from .priors import ArealPriorSpec, GpPriorSpec, jittered_cholesky, sample_gp, sample_gp_hyper, se_kernel_matrix
from .spatial import ArealDataset, SpatialStructure
from .vae import DecoderArtifact


@dataclass
class ResultsBundle:
    name: str
    chains: ChainSet
    summary: PredictiveSummary
    diagnostics: EssReport
    meta: dict
    truth: dict[str, np.ndarray] | None = None
    extra: dict = field(default_factory=dict)

    @property
    def effect_ess(self) -> float:
        """Mean ESS over the random effect at every location."""
        return self.diagnostics.subset("f[").mean_ess

    @property
    def elapsed(self) -> float:
        return self.chains.total_elapsed

    def write(self, directory: str | Path) -> Path:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "summary.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["location", *SUMMARY_COLUMNS])
            for i, row in enumerate(self.summary.linked):
                writer.writerow([i, *(repr(float(v)) for v in row)])
        with open(out / "diagnostics.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["parameter", "ess", "rhat"])
            d = self.diagnostics
            for name, e, r in zip(d.names, d.ess, d.rhat):
                writer.writerow([name, repr(float(e)), repr(float(r))])
        meta = dict(self.meta)
        meta.update(
            elapsed_seconds=self.elapsed,
            divergences=int(self.chains.divergences.sum()),
            accept_rate=[float(a) for a in self.chains.accept_rate],
            step_size=[float(s) for s in self.chains.step_size],
            mean_effect_ess=self.effect_ess,
        )
        (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        if self.truth is not None:
            with open(out / "truth.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                cols = list(self.truth)
                writer.writerow(["location", *cols])
                for i in range(len(self.truth[cols[0]])):
                    writer.writerow([i, *(repr(float(self.truth[c][i])) for c in cols)])
        return out


def _bundle(name: str, model: ModelSpec, chains: ChainSet, meta: dict, seed: int, truth=None) -> ResultsBundle:
    n = model.n
    f_names = [f"f[{i}]" for i in range(n)]
    draws = np.concatenate([chains.draws, chains.effect], axis=2)
    report = ess_report(draws, chains.names + f_names)
    summary = posterior_predictive(chains, model, np.random.default_rng(seed))
    return ResultsBundle(name, chains, summary, report, meta, truth)


# --------------------------------------------------------------------------
# Effect sources
# --------------------------------------------------------------------------


def decoder_source(artifact: DecoderArtifact, structure: SpatialStructure) -> DecoderEffect:
    """Decoder effect after checking the artifact was trained on ``structure``."""
    return DecoderEffect(artifact.bind(structure))


def direct_gp_source(structure: SpatialStructure, spec: GpPriorSpec, seed: int, centered: bool = False):
    """Whitened GP effect with hyperparameters drawn once from the hyperprior."""
    sigma2, lengthscale = sample_gp_hyper(spec, np.random.default_rng(seed))
    K = se_kernel_matrix(structure, float(sigma2), float(lengthscale))
    L = jittered_cholesky(K, float(sigma2), spec.jitter)
    return DirectGpEffect(L, centered=centered), {"sigma2": float(sigma2), "lengthscale": float(lengthscale)}


# --------------------------------------------------------------------------
# Synthetic GP regression
# --------------------------------------------------------------------------


@dataclass
class SyntheticGpData:
    truth: np.ndarray
    y: np.ndarray
    hyper: dict
    noise_sd: float


def synthetic_gp_data(structure: SpatialStructure, spec: GpPriorSpec, seed: int, noise_sd: float = 0.1):
    """One GP draw (the noise-free truth) plus i.i.d. Gaussian noise at every location."""
    truth_ss, noise_ss = np.random.SeedSequence(seed).spawn(2)
    truth, hyper = sample_gp(structure, spec, np.random.default_rng(truth_ss))
    y = truth + noise_sd * np.random.default_rng(noise_ss).standard_normal(structure.n)
    return SyntheticGpData(truth, y, {k: float(v) for k, v in hyper.items()}, noise_sd)


def nested_observations(n: int, counts: Sequence[int], seed: int) -> list[np.ndarray]:
    """Observation index sets as prefixes of one seeded permutation (so they are nested)."""
    if any(c < 0 or c > n for c in counts):
        raise InvalidArgumentError(f"observation counts must lie in [0, {n}]")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(perm[:c]) for c in counts]


def run_experiment_1d(
    source: EffectSource,
    data: SyntheticGpData,
    observed: np.ndarray,
    cfg: HmcConfig,
    noise_prior_scale: float = 0.1,
    name: str = "gp",
    meta: dict | None = None,
) -> ResultsBundle:
    """Gaussian-likelihood fit of f at every location from the observed subset of ``data``."""
    observed = np.asarray(observed, dtype=np.int64)
    model = ModelSpec(
        source=source,
        y=data.y[observed],
        observed=observed,
        likelihood="gaussian",
        noise_prior_scale=noise_prior_scale,
    )
    chains = hmc_sample(model, cfg)
    info = {"observed": observed.tolist(), "truth_hyper": data.hyper, "noise_sd": data.noise_sd, **(meta or {})}
    is_obs = np.zeros(source.n)
    is_obs[observed] = 1.0
    truth = {"f": data.truth, "y": data.y, "observed": is_obs}
    return _bundle(name, model, chains, info, cfg.seed, truth)


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    return math.sqrt(mse(a, b))


# --------------------------------------------------------------------------
# Synthetic counts
# --------------------------------------------------------------------------


def synthetic_count_data(structure: SpatialStructure, spec: GpPriorSpec, seed: int):
    """Ground-truth log rate f from the GP prior and counts y ~ Poisson(exp(f))."""
    truth_ss, count_ss = np.random.SeedSequence(seed).spawn(2)
    f, hyper = sample_gp(structure, spec, np.random.default_rng(truth_ss))
    y = np.random.default_rng(count_ss).poisson(np.exp(f)).astype(np.float64)
    return f, y, {k: float(v) for k, v in hyper.items()}


def run_poisson_1d(source: EffectSource, structure: SpatialStructure, spec: GpPriorSpec, truth_seed: int, cfg: HmcConfig):
    """Poisson fit of counts at every location; the bundle's linked mean is the rate."""
    f, y, hyper = synthetic_count_data(structure, spec, truth_seed)
    model = ModelSpec(source=source, y=y, observed=np.arange(structure.n), likelihood="poisson")
    chains = hmc_sample(model, cfg)
    truth = {"log_rate": f, "rate": np.exp(f), "y": y}
    return _bundle("poisson", model, chains, {"truth_hyper": hyper, "truth_seed": truth_seed}, cfg.seed, truth)


# --------------------------------------------------------------------------
# Lip cancer
# --------------------------------------------------------------------------


def lip_design(dataset: ArealDataset, covariate: str = "aff", scale: float = 10.0) -> np.ndarray:
    """Intercept plus the covariate divided by ``scale``."""
    return np.column_stack([np.ones(dataset.n), dataset.covariate(covariate) / scale])


def bym_source(dataset: ArealDataset, prior: ArealPriorSpec | None = None) -> DirectBymEffect:
    prior = prior or ArealPriorSpec(family="BYM")
    return DirectBymEffect(dataset.structure, tau1_prior=prior.tau1, tau2_prior=prior.tau2)


def lip_model(dataset: ArealDataset, source: EffectSource, holdout: np.ndarray | None = None) -> ModelSpec:
    keep = np.ones(dataset.n, dtype=bool)
    if holdout is not None:
        keep[np.asarray(holdout, dtype=np.int64)] = False
    observed = np.flatnonzero(keep)
    return ModelSpec(
        source=source,
        y=dataset.y[observed],
        observed=observed,
        likelihood="poisson",
        X=lip_design(dataset),
        offset=np.log(dataset.E),
    )


def run_lip_cancer(dataset: ArealDataset, source: EffectSource, cfg: HmcConfig, name: str = "lip") -> ResultsBundle:
    """Full-data Poisson fit; the linked mean is the county rate lambda."""
    model = lip_model(dataset, source)
    chains = hmc_sample(model, cfg)
    return _bundle(name, model, chains, {"source": name}, cfg.seed)


@dataclass
class CvResult:
    folds: list[np.ndarray]
    fold_mse: np.ndarray
    bundles: list[ResultsBundle]

    @property
    def mean_mse(self) -> float:
        return float(np.mean(self.fold_mse))

    @property
    def sd_mse(self) -> float:
        return float(np.std(self.fold_mse, ddof=1)) if len(self.fold_mse) > 1 else 0.0


def run_lip_cancer_cv(
    dataset: ArealDataset, source: EffectSource, cfg: HmcConfig, k: int = 5, split_seed: int = 0, name: str = "lip"
) -> CvResult:
    """k-fold CV: fit without each fold, score MSE of posterior-mean lambda on the held-out counts."""
    folds = kfold_split(dataset.n, k, split_seed)
    scores, bundles = [], []
    for i, test in enumerate(folds):
        model = lip_model(dataset, source, holdout=test)
        chains = hmc_sample(model, cfg)
        bundle = _bundle(f"{name}-fold{i}", model, chains, {"source": name, "fold": i, "test": test.tolist()}, cfg.seed)
        score = mse(bundle.summary.mean[test], dataset.y[test])
        bundle.extra["mse"] = score
        scores.append(score)
        bundles.append(bundle)
    return CvResult(folds, np.array(scores), bundles)
