"""HMC for generalised linear small-area models.

The random effect ``f`` in ``u(E[y]) = offset + X beta + f`` comes from one
of three sources:

* :class:`DecoderEffect` - a frozen decoder applied to ``z ~ N(0, I)``;
* :class:`DirectGpEffect` - a GP with fixed hyperparameters (whitened by
  default, ``f = L zeta``);
* :class:`DirectBymEffect` - BYM with iid + ICAR components and
  Gamma-distributed precisions sampled on the log scale.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import gammaln

from .errors import DimensionMismatchError, InvalidArgumentError, SamplerError
from .nn import Mlp, backward, forward
from .priors import GammaPrior, graph_laplacian
from .spatial import SpatialStructure

LOG_2PI = math.log(2.0 * math.pi)


class EffectSource(Protocol):
    n: int
    dim: int

    def names(self) -> list[str]: ...

    def evaluate(self, theta: np.ndarray) -> tuple[np.ndarray, float, np.ndarray, Callable]: ...

    def effect(self, theta: np.ndarray) -> np.ndarray: ...


class DecoderEffect:
    """f = D(z) with z ~ N(0, I); for exp-output decoders f is the log rate."""

    def __init__(self, decoder: Mlp):
        self.decoder = decoder
        self.log_scale_output = decoder.layers[-1].activation == "exp"
        self.net = decoder.with_output_activation("identity") if self.log_scale_output else decoder
        self.n = decoder.output_dim
        self.dim = decoder.input_dim

    def names(self) -> list[str]:
        return [f"z[{i}]" for i in range(self.dim)]

    def evaluate(self, theta):
        f, cache = forward(self.net, theta)
        log_prior = -0.5 * float(theta @ theta) - 0.5 * self.dim * LOG_2PI

        def vjp(g):
            return backward(self.net, cache, g, need_params=False)[1]

        return f, log_prior, -theta, vjp

    def effect(self, theta):
        return self.net(theta)


class DirectGpEffect:
    """GP random effect with fixed covariance K = L L^T."""

    def __init__(self, cholesky_factor: np.ndarray, centered: bool = False):
        self.L = np.asarray(cholesky_factor, dtype=np.float64)
        self.n = self.dim = self.L.shape[0]
        self.centered = centered
        self._half_logdet = float(np.sum(np.log(np.diag(self.L))))

    def names(self) -> list[str]:
        return [f"{'f' if self.centered else 'zeta'}[{i}]" for i in range(self.n)]

    def evaluate(self, theta):
        const = -0.5 * self.n * LOG_2PI
        if self.centered:
            alpha = cho_solve((self.L, True), theta, check_finite=False)
            log_prior = -0.5 * float(theta @ alpha) - self._half_logdet + const
            return theta, log_prior, -alpha, lambda g: g
        L = self.L
        return L @ theta, -0.5 * float(theta @ theta) + const, -theta, lambda g: g @ L

    def effect(self, theta):
        return theta if self.centered else self.L @ theta


class DirectBymEffect:
    """BYM random effect f = phi1 + phi2 on an areal graph.

    Parameters are (phi1, phi2, log tau1, log tau2). phi2 has the ICAR
    pairwise-difference density plus a soft sum-to-zero constraint
    sum(phi2) ~ N(0, soft_scale * n).
    """

    def __init__(
        self,
        structure: SpatialStructure,
        tau1_prior: GammaPrior = GammaPrior(2.0, 2.0),
        tau2_prior: GammaPrior = GammaPrior(2.0, 2.0),
        soft_scale: float = 0.001,
    ):
        self.laplacian = graph_laplacian(structure)
        self.n = structure.n
        self.dim = 2 * self.n + 2
        self.tau1_prior, self.tau2_prior = tau1_prior, tau2_prior
        self.soft_var = soft_scale * self.n
        self._const = (
            -0.5 * (2 * self.n) * LOG_2PI
            - 0.5 * math.log(self.soft_var)
            + self._gamma_const(tau1_prior)
            + self._gamma_const(tau2_prior)
        )

    @staticmethod
    def _gamma_const(prior: GammaPrior) -> float:
        return prior.shape * math.log(prior.rate) - float(gammaln(prior.shape))

    def names(self) -> list[str]:
        n = self.n
        return [f"phi1[{i}]" for i in range(n)] + [f"phi2[{i}]" for i in range(n)] + ["log_tau1", "log_tau2"]

    def split(self, theta):
        n = self.n
        return theta[:n], theta[n : 2 * n], theta[2 * n], theta[2 * n + 1]

    def evaluate(self, theta):
        n = self.n
        phi1, phi2, log_tau1, log_tau2 = self.split(theta)
        if abs(log_tau1) > 50 or abs(log_tau2) > 50:
            return phi1 + phi2, -np.inf, np.zeros_like(theta), lambda g: np.zeros_like(theta)
        tau1, tau2 = math.exp(log_tau1), math.exp(log_tau2)
        a1, b1 = self.tau1_prior.shape, self.tau1_prior.rate
        a2, b2 = self.tau2_prior.shape, self.tau2_prior.rate
        # numpy scalars so that a runaway trajectory overflows to inf instead of raising
        ss1 = phi1 @ phi1
        Lphi2 = self.laplacian @ phi2
        quad2 = phi2 @ Lphi2
        total = phi2.sum()
        log_prior = (
            self._const
            + a1 * log_tau1 - b1 * tau1
            + a2 * log_tau2 - b2 * tau2
            + 0.5 * n * log_tau1 - 0.5 * tau1 * ss1
            + 0.5 * (n - 1) * log_tau2 - 0.5 * tau2 * quad2
            - 0.5 * total**2 / self.soft_var
        )
        grad = np.empty(self.dim)
        grad[:n] = -tau1 * phi1
        grad[n : 2 * n] = -tau2 * Lphi2 - total / self.soft_var
        grad[2 * n] = a1 - b1 * tau1 + 0.5 * n - 0.5 * tau1 * ss1
        grad[2 * n + 1] = a2 - b2 * tau2 + 0.5 * (n - 1) - 0.5 * tau2 * quad2

        def vjp(g):
            out = np.zeros(self.dim)
            out[:n] = g
            out[n : 2 * n] = g
            return out

        return phi1 + phi2, log_prior, grad, vjp

    def effect(self, theta):
        n = self.n
        return theta[:n] + theta[n : 2 * n]


@dataclass
class ModelSpec:
    """Log-posterior of a GLM with a pluggable random-effect source.

    ``observed`` indexes the locations with data and ``y`` holds the data in
    the same order. Gaussian models use an identity link and either a fixed
    ``noise_sd`` or a half-normal prior with scale ``noise_prior_scale`` on
    the noise sd (sampled as log s). Poisson models use a log link and an
    ``offset`` (log E).
    """

    source: EffectSource
    y: np.ndarray
    observed: np.ndarray
    likelihood: str = "gaussian"
    link: str | None = None
    X: np.ndarray | None = None
    beta_prior_sd: float = 5.0
    offset: np.ndarray | None = None
    noise_sd: float | None = None
    noise_prior_scale: float = 0.1

    def __post_init__(self):
        n = self.source.n
        self.y = np.asarray(self.y, dtype=np.float64)
        self.observed = np.asarray(self.observed, dtype=np.int64)
        if self.likelihood not in ("gaussian", "poisson"):
            raise InvalidArgumentError(f"unknown likelihood {self.likelihood!r}")
        if self.link is None:
            self.link = "identity" if self.likelihood == "gaussian" else "log"
        if (self.likelihood, self.link) not in (("gaussian", "identity"), ("poisson", "log")):
            raise InvalidArgumentError(f"unsupported likelihood/link pair {self.likelihood}/{self.link}")
        if self.y.shape != self.observed.shape:
            raise DimensionMismatchError("y and observed indices must have equal length")
        if self.observed.size and (self.observed.min() < 0 or self.observed.max() >= n):
            raise DimensionMismatchError(f"observed indices must lie in [0, {n})")
        self.X = np.zeros((n, 0)) if self.X is None else np.asarray(self.X, dtype=np.float64)
        if self.X.shape[0] != n:
            raise DimensionMismatchError(f"X has {self.X.shape[0]} rows, expected {n}")
        if self.likelihood == "poisson":
            if self.offset is None:
                self.offset = np.zeros(n)
            if np.any(self.y < 0) or np.any(self.y != np.floor(self.y)):
                raise InvalidArgumentError("Poisson data must be nonnegative integers")
        elif self.offset is not None:
            raise InvalidArgumentError("an offset is only used with the Poisson likelihood")
        else:
            self.offset = np.zeros(n)
        self.offset = np.asarray(self.offset, dtype=np.float64)
        if self.offset.shape != (n,):
            raise DimensionMismatchError("offset must have one entry per location")
        self._lgamma_y = gammaln(self.y + 1.0) if self.likelihood == "poisson" else None

    @property
    def n(self) -> int:
        return self.source.n

    @property
    def q(self) -> int:
        return self.X.shape[1]

    @property
    def samples_noise(self) -> bool:
        return self.likelihood == "gaussian" and self.noise_sd is None

    @property
    def dim(self) -> int:
        return self.source.dim + self.q + int(self.samples_noise)

    def names(self) -> list[str]:
        out = self.source.names() + [f"beta[{j}]" for j in range(self.q)]
        if self.samples_noise:
            out.append("log_s")
        return out

    def unpack(self, theta):
        d = self.source.dim
        beta = theta[d : d + self.q]
        log_s = theta[d + self.q] if self.samples_noise else None
        return theta[:d], beta, log_s

    def noise(self, theta) -> float | None:
        if self.likelihood != "gaussian":
            return None
        if self.noise_sd is not None:
            return self.noise_sd
        return math.exp(self.unpack(theta)[2])

    def linear_predictor(self, theta) -> np.ndarray:
        src, beta, _ = self.unpack(theta)
        return self.offset + self.X @ beta + self.source.effect(src)

    def mean(self, eta: np.ndarray) -> np.ndarray:
        return np.exp(eta) if self.link == "log" else eta

    def log_posterior(self, theta) -> tuple[float, np.ndarray]:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.dim,):
            raise DimensionMismatchError(f"expected {self.dim} parameters, got {theta.shape}")
        # Far-out leapfrog states overflow; they are rejected, not errors.
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                value, grad = self._log_posterior(theta)
        except (OverflowError, ZeroDivisionError, ValueError):
            return -np.inf, np.zeros(self.dim)
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            return -np.inf, np.zeros(self.dim)
        return value, grad

    def _log_posterior(self, theta):
        src, beta, log_s = self.unpack(theta)
        f, lp, g_src, vjp = self.source.evaluate(src)
        if not np.isfinite(lp):
            return -np.inf, np.zeros(self.dim)
        eta = self.offset + self.X @ beta + f
        eta_obs = eta[self.observed]
        grad = np.zeros(self.dim)
        d = self.source.dim

        if self.likelihood == "gaussian":
            s = self.noise_sd if log_s is None else math.exp(log_s)
            resid = self.y - eta_obs
            ll = -0.5 * float(resid @ resid) / s**2 - self.y.size * (math.log(s) + 0.5 * LOG_2PI)
            g_obs = resid / s**2
            if log_s is not None:
                c = self.noise_prior_scale
                ll += math.log(2.0) - 0.5 * LOG_2PI - math.log(c) - 0.5 * s**2 / c**2 + log_s
                grad[d + self.q] = float(resid @ resid) / s**2 - self.y.size - s**2 / c**2 + 1.0
        else:
            with np.errstate(over="ignore"):
                rate = np.exp(eta_obs)
            ll = float(self.y @ eta_obs - rate.sum() - self._lgamma_y.sum())
            g_obs = self.y - rate

        g_eta = np.bincount(self.observed, weights=g_obs, minlength=self.n)
        sd2 = self.beta_prior_sd**2
        lp_beta = -0.5 * float(beta @ beta) / sd2 - self.q * (math.log(self.beta_prior_sd) + 0.5 * LOG_2PI)
        grad[:d] = vjp(g_eta) + g_src
        grad[d : d + self.q] = self.X.T @ g_eta - beta / sd2
        value = lp + lp_beta + ll
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            return -np.inf, np.zeros(self.dim)
        return value, grad


# --------------------------------------------------------------------------
# Hamiltonian Monte Carlo
# --------------------------------------------------------------------------


@dataclass
class HmcConfig:
    chains: int = 4
    warmup: int = 1000
    samples: int = 1000
    target_accept: float = 0.8
    leapfrog_steps: int = 32
    seed: int = 0
    initial_step_size: float | None = None
    init_radius: float = 2.0
    max_energy_error: float = 1000.0

    def __post_init__(self):
        if self.warmup < 1 or self.samples < 1:
            raise InvalidArgumentError("warmup and samples must be >= 1")
        if self.chains < 1:
            raise InvalidArgumentError("chains must be >= 1")
        if not 0 < self.target_accept < 1:
            raise InvalidArgumentError("target_accept must be in (0, 1)")
        if self.leapfrog_steps < 1:
            raise InvalidArgumentError("leapfrog_steps must be >= 1")

    def leapfrog_range(self) -> tuple[int, int]:
        return math.ceil(0.8 * self.leapfrog_steps), math.ceil(1.2 * self.leapfrog_steps)


@dataclass
class ChainSet:
    names: list[str]
    draws: np.ndarray  # (chains, samples, dim)
    effect: np.ndarray  # (chains, samples, n)
    eta: np.ndarray  # (chains, samples, n)
    noise: np.ndarray | None  # (chains, samples) for Gaussian models
    accept_rate: np.ndarray
    step_size: np.ndarray
    step_size_trace: np.ndarray  # (chains, warmup)
    divergences: np.ndarray
    elapsed: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def chains(self) -> int:
        return self.draws.shape[0]

    @property
    def samples(self) -> int:
        return self.draws.shape[1]

    @property
    def total_elapsed(self) -> float:
        return float(self.elapsed.sum())

    def param(self, name: str) -> np.ndarray:
        return self.draws[:, :, self.names.index(name)]

    def flat_effect(self) -> np.ndarray:
        return self.effect.reshape(-1, self.effect.shape[-1])


LogDensity = Callable[[np.ndarray], tuple[float, np.ndarray]]


def leapfrog(theta, momentum, grad, step_size: float, n_steps: int, log_density: LogDensity):
    """``n_steps`` leapfrog steps under unit mass; returns (theta, momentum, logp, grad)."""
    theta = theta.copy()
    p = momentum + 0.5 * step_size * grad
    logp = -np.inf
    for i in range(n_steps):
        theta += step_size * p
        logp, grad = log_density(theta)
        if not np.isfinite(logp):
            return theta, p, -np.inf, grad
        if i < n_steps - 1:
            p += step_size * grad
    p += 0.5 * step_size * grad
    return theta, p, logp, grad


def _initial_step_size(theta, logp, grad, log_density, rng) -> float:
    """Double or halve the step until one-step acceptance crosses 1/2."""
    eps = 1.0
    p = rng.standard_normal(theta.size)
    h0 = logp - 0.5 * p @ p

    def log_ratio(e):
        _, p1, lp1, _ = leapfrog(theta, p, grad, e, 1, log_density)
        if not np.isfinite(lp1):
            return -np.inf
        return lp1 - 0.5 * p1 @ p1 - h0

    ratio = log_ratio(eps)
    direction = 1.0 if ratio > math.log(0.5) else -1.0
    for _ in range(60):
        if direction > 0 and not ratio > math.log(0.5):
            break
        if direction < 0 and ratio > math.log(0.5):
            break
        eps *= 2.0**direction
        ratio = log_ratio(eps)
    return eps if direction < 0 else eps / 2.0


def _run_chain(model: ModelSpec, cfg: HmcConfig, rng: np.random.Generator):
    log_density = model.log_posterior
    dim = model.dim
    for _ in range(100):
        theta = rng.uniform(-cfg.init_radius, cfg.init_radius, size=dim)
        logp, grad = log_density(theta)
        if np.isfinite(logp):
            break
    else:
        raise SamplerError("could not find a finite initial point")

    eps = cfg.initial_step_size or _initial_step_size(theta, logp, grad, log_density, rng)
    mu = math.log(10.0 * eps)
    h_bar, log_eps_bar = 0.0, 0.0
    gamma, t0, kappa = 0.05, 10.0, 0.75
    lo, hi = cfg.leapfrog_range()

    draws = np.empty((cfg.samples, dim))
    trace = np.empty(cfg.warmup)
    accepted_warmup = 0
    accept_sum = 0.0
    divergences = 0
    for it in range(cfg.warmup + cfg.samples):
        n_steps = int(rng.integers(lo, hi + 1))
        p0 = rng.standard_normal(dim)
        h0 = logp - 0.5 * float(p0 @ p0)
        theta1, p1, logp1, grad1 = leapfrog(theta, p0, grad, eps, n_steps, log_density)
        h1 = logp1 - 0.5 * float(p1 @ p1) if np.isfinite(logp1) else -np.inf
        delta = h1 - h0
        divergent = not np.isfinite(delta) or -delta > cfg.max_energy_error
        accept_prob = 0.0 if divergent else min(1.0, math.exp(min(delta, 0.0)))
        if rng.uniform() < accept_prob:
            theta, logp, grad = theta1, logp1, grad1
            if it < cfg.warmup:
                accepted_warmup += 1
        if it < cfg.warmup:
            m = it + 1
            h_bar = (1.0 - 1.0 / (m + t0)) * h_bar + (cfg.target_accept - accept_prob) / (m + t0)
            log_eps = mu - math.sqrt(m) / gamma * h_bar
            weight = m ** (-kappa)
            log_eps_bar = weight * log_eps + (1.0 - weight) * log_eps_bar
            eps = math.exp(log_eps)
            trace[it] = eps
            if m == cfg.warmup:
                if accepted_warmup == 0:
                    raise SamplerError("every warmup proposal was rejected")
                eps = math.exp(log_eps_bar)
        else:
            draws[it - cfg.warmup] = theta
            accept_sum += accept_prob
            divergences += int(divergent)
    return draws, accept_sum / cfg.samples, eps, trace, divergences


def hmc_sample(model: ModelSpec, cfg: HmcConfig) -> ChainSet:
    """Run ``cfg.chains`` independent chains (seeded substreams) and derive f and eta per draw."""
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.chains)
    all_draws, effects, etas, noises = [], [], [], []
    accept, steps, traces, divs, elapsed = [], [], [], [], []
    d = model.source.dim
    for ss in streams:
        start = time.perf_counter()
        # momentum can overflow on a diverging trajectory; that proposal is then rejected
        with np.errstate(over="ignore", invalid="ignore"):
            draws, acc, eps, trace, ndiv = _run_chain(model, cfg, np.random.default_rng(ss))
        elapsed.append(time.perf_counter() - start)
        eff = np.array([model.source.effect(th[:d]) for th in draws])
        beta = draws[:, d : d + model.q]
        etas.append(model.offset + beta @ model.X.T + eff)
        effects.append(eff)
        if model.likelihood == "gaussian":
            noises.append(np.full(cfg.samples, model.noise_sd) if model.noise_sd is not None else np.exp(draws[:, -1]))
        all_draws.append(draws)
        accept.append(acc)
        steps.append(eps)
        traces.append(trace)
        divs.append(ndiv)
    return ChainSet(
        names=model.names(),
        draws=np.stack(all_draws),
        effect=np.stack(effects),
        eta=np.stack(etas),
        noise=np.stack(noises) if noises else None,
        accept_rate=np.array(accept),
        step_size=np.array(steps),
        step_size_trace=np.stack(traces),
        divergences=np.array(divs),
        elapsed=np.array(elapsed),
    )


# --------------------------------------------------------------------------
# Posterior predictive summaries
# --------------------------------------------------------------------------

QUANTILES = (0.025, 0.25, 0.5, 0.75, 0.975)
SUMMARY_COLUMNS = ("mean", "q2.5", "q25", "q50", "q75", "q97.5")


@dataclass
class PredictiveSummary:
    linked: np.ndarray  # (n, 6): mean then quantiles of u^-1(eta)
    replicate: np.ndarray  # (n, 6) for y_rep

    @property
    def mean(self) -> np.ndarray:
        return self.linked[:, 0]

    def interval(self, level: str = "95") -> tuple[np.ndarray, np.ndarray]:
        if level == "95":
            return self.linked[:, 1], self.linked[:, 5]
        return self.linked[:, 2], self.linked[:, 4]


def _summarise(x: np.ndarray) -> np.ndarray:
    q = np.quantile(x, QUANTILES, axis=0)
    return np.column_stack([x.mean(axis=0), q.T])


def posterior_predictive(chains: ChainSet, model: ModelSpec, rng: np.random.Generator | None = None) -> PredictiveSummary:
    if chains.samples < 1:
        raise InvalidArgumentError("empty chains")
    rng = rng if rng is not None else np.random.default_rng(0)
    eta = chains.eta.reshape(-1, chains.eta.shape[-1])
    linked = model.mean(eta)
    if model.likelihood == "poisson":
        y_rep = rng.poisson(linked).astype(np.float64)
    else:
        s = chains.noise.reshape(-1, 1)
        y_rep = linked + s * rng.standard_normal(linked.shape)
    return PredictiveSummary(_summarise(linked), _summarise(y_rep))
