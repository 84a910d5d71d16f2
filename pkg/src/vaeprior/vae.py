"""Variational autoencoder trained on prior draws, and the frozen decoder artifact.

Encoder: ``x -> trunk -> (mu, logvar)``; decoder: ``z -> x_hat`` (Gaussian
reconstruction) or ``z -> rate`` (Poisson reconstruction, final ``exp``).
Objectives are the single-sample ELBO with analytic KL and the
importance-weighted bound (Renyi alpha = 0).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import (
    DimensionMismatchError,
    DomainError,
    FingerprintMismatchError,
    InvalidArgumentError,
    NumericError,
    ParseError,
    VersionMismatchError,
)
from .nn import AdamState, Layer, Mlp, adam_step, backward, forward, init_mlp
from .priors import PriorSpec, batch_prior_draws
from .spatial import SpatialStructure

ARTIFACT_VERSION = 1
LIKELIHOODS = ("gaussian", "poisson")
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class VaeModel:
    encoder_trunk: Mlp
    mu_head: Mlp
    logvar_head: Mlp
    decoder: Mlp
    likelihood: str = "gaussian"
    recon_sd: float = 1.0  # Gaussian reconstruction sd

    def __post_init__(self):
        if not self.recon_sd > 0:
            raise InvalidArgumentError("recon_sd must be positive")
        if self.likelihood not in LIKELIHOODS:
            raise InvalidArgumentError(f"unknown likelihood {self.likelihood!r}")
        d = self.decoder.input_dim
        if self.mu_head.output_dim != d or self.logvar_head.output_dim != d:
            raise DimensionMismatchError("encoder heads must output the latent dimension")
        if self.encoder_trunk.input_dim != self.decoder.output_dim:
            raise DimensionMismatchError("decoder must reconstruct the encoder input dimension")
        if self.likelihood == "poisson" and self.decoder.layers[-1].activation != "exp":
            raise InvalidArgumentError("a Poisson decoder needs an exp output activation")

    @property
    def latent_dim(self) -> int:
        return self.decoder.input_dim

    @property
    def data_dim(self) -> int:
        return self.decoder.output_dim

    def parts(self) -> tuple[Mlp, Mlp, Mlp, Mlp]:
        return self.encoder_trunk, self.mu_head, self.logvar_head, self.decoder

    def params(self) -> list[np.ndarray]:
        return [p for net in self.parts() for p in net.params()]

    def copy(self) -> "VaeModel":
        return VaeModel(*(net.copy() for net in self.parts()), likelihood=self.likelihood, recon_sd=self.recon_sd)


def build_vae(
    data_dim: int,
    hidden: Sequence[int],
    latent_dim: int,
    activation: str = "relu",
    likelihood: str = "gaussian",
    rng: np.random.Generator | None = None,
    recon_sd: float = 1.0,
) -> VaeModel:
    """Encoder ``data_dim -> hidden... -> 2 x latent``, decoder mirrors ``hidden``."""
    if not hidden:
        raise InvalidArgumentError("at least one hidden layer is required")
    rng = rng if rng is not None else np.random.default_rng(0)
    hidden = list(hidden)
    trunk = init_mlp([data_dim, *hidden], [activation] * len(hidden), rng)
    mu_head = init_mlp([hidden[-1], latent_dim], ["identity"], rng)
    logvar_head = init_mlp([hidden[-1], latent_dim], ["identity"], rng)
    dec_sizes = [latent_dim, *reversed(hidden), data_dim]
    out_act = "exp" if likelihood == "poisson" else "identity"
    decoder = init_mlp(dec_sizes, [activation] * len(hidden) + [out_act], rng)
    return VaeModel(trunk, mu_head, logvar_head, decoder, likelihood, recon_sd)


def encoder_input(model: VaeModel, x: np.ndarray) -> np.ndarray:
    """What the encoder sees: counts go in as log1p(y) so large counts cannot blow up q(z|x)."""
    x = np.asarray(x, dtype=np.float64)
    return np.log1p(x) if model.likelihood == "poisson" else x


def encode(model: VaeModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h = model.encoder_trunk(encoder_input(model, x))
    return model.mu_head(h), model.logvar_head(h)


def reparameterize(mu: np.ndarray, logvar: np.ndarray, eps: np.ndarray) -> np.ndarray:
    mu, logvar, eps = (np.asarray(a, dtype=np.float64) for a in (mu, logvar, eps))
    if mu.shape != logvar.shape or mu.shape[-1] != eps.shape[-1]:
        raise DimensionMismatchError("mu, logvar and eps must have matching latent dimension")
    return mu + np.exp(0.5 * logvar) * eps


def kl_diag_gaussian(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """KL(N(mu, diag(exp(logvar))) || N(0, I)), summed over the last axis."""
    mu, logvar = np.asarray(mu, dtype=np.float64), np.asarray(logvar, dtype=np.float64)
    # expm1 avoids cancellation when logvar is tiny, keeping the result >= 0
    return 0.5 * np.sum(mu**2 + (np.expm1(logvar) - logvar), axis=-1)


def decode(model: VaeModel, z: np.ndarray) -> np.ndarray:
    return model.decoder(z)


def log_rate_decoder(decoder: Mlp) -> Mlp:
    """For an exp-output decoder, the network producing the log rate."""
    return decoder.with_output_activation("identity")


def _check_counts(y: np.ndarray) -> None:
    if np.any(y < 0) or np.any(y != np.floor(y)):
        raise DomainError("Poisson targets must be nonnegative integers")


def reconstruction_loglik(
    likelihood: str, target: np.ndarray, prediction: np.ndarray, recon_sd: float = 1.0
) -> np.ndarray:
    """Gaussian (sd ``recon_sd``, unit by default) or Poisson log-likelihood, summed over the last axis.

    For Poisson, ``prediction`` is the rate.
    """
    target = np.asarray(target, dtype=np.float64)
    prediction = np.asarray(prediction, dtype=np.float64)
    if target.shape[-1] != prediction.shape[-1]:
        raise DimensionMismatchError("target and prediction lengths differ")
    if likelihood == "gaussian":
        resid = (target - prediction) / recon_sd
        return np.sum(-0.5 * resid**2 - math.log(recon_sd) - HALF_LOG_2PI, axis=-1)
    if likelihood == "poisson":
        _check_counts(target)
        if np.any(prediction <= 0):
            raise DomainError("Poisson rates must be positive")
        return np.sum(target * np.log(prediction) - prediction - gammaln(target + 1.0), axis=-1)
    raise InvalidArgumentError(f"unknown likelihood {likelihood!r}")


def _poisson_loglik_from_log_rate(y: np.ndarray, log_rate: np.ndarray) -> np.ndarray:
    return np.sum(y * log_rate - np.exp(log_rate) - gammaln(y + 1.0), axis=-1)


def _decoder_head(model: VaeModel) -> Mlp:
    return log_rate_decoder(model.decoder) if model.likelihood == "poisson" else model.decoder


def _loglik_and_grad(model: VaeModel, x: np.ndarray, out: np.ndarray):
    """Reconstruction log-likelihood and its gradient w.r.t. the decoder head output."""
    if model.likelihood == "poisson":
        rate = np.exp(out)
        ll = np.sum(x * out - rate - gammaln(x + 1.0), axis=-1)
        return ll, x - rate
    s = model.recon_sd
    resid = x - out
    ll = np.sum(-0.5 * (resid / s) ** 2 - math.log(s) - HALF_LOG_2PI, axis=-1)
    return ll, resid / s**2


def _log_weights(model: VaeModel, x: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Importance log-weights log p(x|z_k) + log p(z_k) - log q(z_k|x), shape (..., K)."""
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    mu, logvar = encode(model, x)
    z = reparameterize(mu[..., None, :], logvar[..., None, :], eps)
    out = _decoder_head(model)(z)
    ll, _ = _loglik_and_grad(model, x[..., None, :], out)
    log_p = np.sum(-0.5 * z**2 - HALF_LOG_2PI, axis=-1)
    log_q = np.sum(-0.5 * eps**2 - 0.5 * logvar[..., None, :] - HALF_LOG_2PI, axis=-1)
    return ll + log_p - log_q


def elbo_estimate(model: VaeModel, x: np.ndarray, eps: np.ndarray, analytic_kl: bool = True):
    """Single-sample ELBO.

    With ``analytic_kl`` the KL term is computed in closed form; otherwise
    it is the one-sample estimate log q(z|x) - log p(z), which makes the
    result identical to :func:`iwae_estimate` with K = 1.
    """
    eps = np.asarray(eps, dtype=np.float64)
    if not analytic_kl:
        return _log_weights(model, x, eps[..., None, :])[..., 0]
    mu, logvar = encode(model, x)
    z = reparameterize(mu, logvar, eps)
    out = _decoder_head(model)(z)
    ll, _ = _loglik_and_grad(model, np.asarray(x, dtype=np.float64), out)
    return ll - kl_diag_gaussian(mu, logvar)


def iwae_estimate(model: VaeModel, x: np.ndarray, eps: np.ndarray):
    """log (1/K sum_k w_k) over the K rows of ``eps`` (shape (..., K, d))."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.ndim < 2 or eps.shape[-2] < 1:
        raise InvalidArgumentError("eps must have shape (..., K, d) with K >= 1")
    log_w = _log_weights(model, x, eps)
    return logsumexp(log_w, axis=-1) - math.log(log_w.shape[-1])


def objective_and_grads(model: VaeModel, x: np.ndarray, eps: np.ndarray, objective: str = "elbo"):
    """Batch-mean loss (negative objective) and its gradient for every parameter.

    ``x`` is (B, p); ``eps`` is (B, d) for the ELBO and (B, K, d) for IWAE.
    Gradients follow the order of :meth:`VaeModel.params`.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    B = x.shape[0]
    trunk, mu_head, lv_head, _ = model.parts()
    dec = _decoder_head(model)

    h, c_trunk = forward(trunk, encoder_input(model, x))
    mu, c_mu = forward(mu_head, h)
    lv, c_lv = forward(lv_head, h)
    sigma = np.exp(0.5 * lv)

    if objective == "elbo":
        eps = np.asarray(eps, dtype=np.float64).reshape(B, -1)
        z = mu + sigma * eps
        out, c_dec = forward(dec, z)
        ll, g_out = _loglik_and_grad(model, x, out)
        kl = kl_diag_gaussian(mu, lv)
        value = ll - kl
        dec_grads, g_z = backward(dec, c_dec, g_out / B)
        d_mu = g_z - mu / B
        d_lv = g_z * 0.5 * sigma * eps - 0.5 * (sigma**2 - 1.0) / B
    elif objective == "iwae":
        eps = np.asarray(eps, dtype=np.float64)
        if eps.ndim != 3:
            raise DimensionMismatchError("IWAE eps must be (B, K, d)")
        K = eps.shape[1]
        z = mu[:, None, :] + sigma[:, None, :] * eps
        out, c_dec = forward(dec, z.reshape(B * K, -1))
        ll, g_out = _loglik_and_grad(model, np.repeat(x, K, axis=0), out)
        ll = ll.reshape(B, K)
        log_p = np.sum(-0.5 * z**2, axis=-1)
        log_q = np.sum(-0.5 * eps**2 - 0.5 * lv[:, None, :], axis=-1)
        log_w = ll + log_p - log_q
        value = logsumexp(log_w, axis=1) - math.log(K)
        w = np.exp(log_w - logsumexp(log_w, axis=1, keepdims=True))  # (B, K)
        scale = (w / B).reshape(B * K, 1)
        dec_grads, g_z_ll = backward(dec, c_dec, g_out * scale)
        g_z = g_z_ll.reshape(B, K, -1) - (w / B)[..., None] * z
        d_mu = g_z.sum(axis=1)
        d_lv = (g_z * 0.5 * sigma[:, None, :] * eps).sum(axis=1) + 0.5 / B
    else:
        raise InvalidArgumentError(f"unknown objective {objective!r}")

    mu_grads, g_h1 = backward(mu_head, c_mu, d_mu)
    lv_grads, g_h2 = backward(lv_head, c_lv, d_lv)
    trunk_grads, _ = backward(trunk, c_trunk, g_h1 + g_h2)
    grads = [-g for g in (*trunk_grads, *mu_grads, *lv_grads, *dec_grads)]
    return -float(np.mean(value)), grads


@dataclass
class TrainConfig:
    batch_size: int = 500
    steps: int = 50_000
    objective: str = "elbo"
    iwae_k: int = 10
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    trace_stride: int = 100
    pool_size: int = 0
    grad_clip: float = 0.0

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidArgumentError("steps must be >= 1")
        if self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be >= 1")
        if self.objective not in ("elbo", "iwae"):
            raise InvalidArgumentError(f"unknown objective {self.objective!r}")
        if self.objective == "iwae" and self.iwae_k < 1:
            raise InvalidArgumentError("iwae_k must be >= 1")
        if self.trace_stride < 1:
            raise InvalidArgumentError("trace_stride must be >= 1")
        if self.pool_size < 0:
            raise InvalidArgumentError("pool_size must be >= 0")
        if not (self.grad_clip >= 0 and math.isfinite(self.grad_clip)):
            raise InvalidArgumentError("grad_clip must be a finite value >= 0")


@dataclass
class TrainResult:
    model: VaeModel
    trace_steps: np.ndarray
    trace_loss: np.ndarray
    elapsed: float
    final_loss: float


class _DrawSource:
    """Fresh prior batches per step, or minibatches from a fixed pool."""

    def __init__(self, prior: PriorSpec, structure: SpatialStructure, cfg: TrainConfig, rng: np.random.Generator):
        self.prior, self.structure, self.cfg, self.rng = prior, structure, cfg, rng
        self.pool = None
        if cfg.pool_size:
            chunks, remaining = [], cfg.pool_size
            while remaining:
                size = min(remaining, 1000)
                chunks.append(batch_prior_draws(prior, structure, size, rng).draws)
                remaining -= size
            self.pool = np.concatenate(chunks)

    def next(self) -> np.ndarray:
        if self.pool is None:
            return batch_prior_draws(self.prior, self.structure, self.cfg.batch_size, self.rng).draws
        idx = self.rng.integers(0, self.pool.shape[0], size=self.cfg.batch_size)
        return self.pool[idx]


def train(model: VaeModel, prior: PriorSpec, structure: SpatialStructure, cfg: TrainConfig) -> TrainResult:
    """Adam on freshly generated prior batches; deterministic given ``cfg.seed``.

    The loss trace holds the mean loss over each window of ``trace_stride``
    steps (and the step-0 loss as its first entry).
    """
    if structure.n != model.data_dim:
        raise DimensionMismatchError(f"structure has {structure.n} locations, model expects {model.data_dim}")
    model = model.copy()
    data_ss, eps_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    data_rng, eps_rng = np.random.default_rng(data_ss), np.random.default_rng(eps_ss)
    source = _DrawSource(prior, structure, cfg, data_rng)
    params = model.params()
    state = AdamState.zeros_like(
        params, learning_rate=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps
    )
    d = model.latent_dim
    trace_steps, trace_loss, window = [], [], []
    start = time.perf_counter()
    loss = float("nan")
    for step in range(cfg.steps):
        x = source.next()
        if cfg.objective == "elbo":
            eps = eps_rng.standard_normal((cfg.batch_size, d))
        else:
            eps = eps_rng.standard_normal((cfg.batch_size, cfg.iwae_k, d))
        loss, grads = objective_and_grads(model, x, eps, cfg.objective)
        if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads):
            raise NumericError(f"non-finite loss at step {step}", step=step)
        if cfg.grad_clip > 0:
            # heavy-tailed prior batches (small BYM precisions) otherwise kick the encoder into divergence
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > cfg.grad_clip:
                grads = [g * (cfg.grad_clip / norm) for g in grads]
        adam_step(params, grads, state)
        if step == 0:
            trace_steps.append(0)
            trace_loss.append(loss)
        window.append(loss)
        if (step + 1) % cfg.trace_stride == 0:
            trace_steps.append(step + 1)
            trace_loss.append(float(np.mean(window)))
            window = []
    if not model.decoder.all_finite():
        raise NumericError("decoder parameters became non-finite", step=cfg.steps)
    return TrainResult(model, np.array(trace_steps), np.array(trace_loss), time.perf_counter() - start, loss)


def sample_decoder_prior(decoder: Mlp, n_draws: int, rng: np.random.Generator) -> np.ndarray:
    """Draws D(z), z ~ N(0, I)."""
    return decoder(rng.standard_normal((n_draws, decoder.input_dim)))


# --------------------------------------------------------------------------
# Decoder artifact
# --------------------------------------------------------------------------


@dataclass
class DecoderArtifact:
    decoder: Mlp
    structure_fingerprint: str
    prior: dict
    likelihood: str = "gaussian"
    training: dict = field(default_factory=dict)
    version: int = ARTIFACT_VERSION

    @property
    def latent_dim(self) -> int:
        return self.decoder.input_dim

    @property
    def data_dim(self) -> int:
        return self.decoder.output_dim

    def bind(self, structure: SpatialStructure) -> Mlp:
        """The decoder, after checking it was trained on ``structure``."""
        if structure.fingerprint != self.structure_fingerprint:
            raise FingerprintMismatchError(
                f"decoder trained on structure {self.structure_fingerprint}, "
                f"got {structure.fingerprint} (n={structure.n})"
            )
        return self.decoder


def _fmt_array(a: np.ndarray) -> str:
    if a.ndim == 1:
        return "[" + ",".join(format(float(v), ".17g") for v in a) + "]"
    return "[" + ",".join(_fmt_array(row) for row in a) + "]"


def artifact_to_json(artifact: DecoderArtifact) -> str:
    if not artifact.decoder.all_finite():
        raise NumericError("refusing to serialise non-finite decoder weights")
    head = {
        "version": artifact.version,
        "structure_fingerprint": artifact.structure_fingerprint,
        "prior": artifact.prior,
        "likelihood": artifact.likelihood,
        "latent_dim": artifact.latent_dim,
        "data_dim": artifact.data_dim,
        "training": artifact.training,
    }
    lines = ["{"]
    for key, value in head.items():
        lines.append(f"  {json.dumps(key)}: {json.dumps(value, sort_keys=True)},")
    layer_texts = []
    for layer in artifact.decoder.layers:
        layer_texts.append(
            "    {"
            f"\"rows\": {layer.out_dim}, \"cols\": {layer.in_dim}, "
            f"\"activation\": {json.dumps(layer.activation)}, "
            f"\"weights\": {_fmt_array(layer.weight)}, \"bias\": {_fmt_array(layer.bias)}"
            "}"
        )
    lines.append('  "layers": [\n' + ",\n".join(layer_texts) + "\n  ]")
    lines.append("}")
    return "\n".join(lines) + "\n"


def save_decoder(artifact: DecoderArtifact, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(artifact_to_json(artifact), encoding="utf-8")
    return path


def artifact_from_json(text: str) -> DecoderArtifact:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"decoder artifact is not valid JSON: {exc.msg}", line=exc.lineno) from None
    if not isinstance(data, dict):
        raise ParseError("decoder artifact must be a JSON object")
    if data.get("version") != ARTIFACT_VERSION:
        raise VersionMismatchError(f"artifact version {data.get('version')!r}, expected {ARTIFACT_VERSION}")
    try:
        layers = []
        for spec in data["layers"]:
            W = np.array(spec["weights"], dtype=np.float64).reshape(int(spec["rows"]), int(spec["cols"]))
            b = np.array(spec["bias"], dtype=np.float64)
            layers.append(Layer(W, b, spec["activation"]))
        decoder = Mlp(layers)
        artifact = DecoderArtifact(
            decoder=decoder,
            structure_fingerprint=str(data["structure_fingerprint"]),
            prior=data["prior"],
            likelihood=data["likelihood"],
            training=data.get("training", {}),
            version=data["version"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed decoder artifact: {exc}") from None
    if artifact.latent_dim != data.get("latent_dim") or artifact.data_dim != data.get("data_dim"):
        raise ParseError("layer shapes disagree with latent_dim/data_dim")
    return artifact


def load_decoder(path: str | Path) -> DecoderArtifact:
    return artifact_from_json(Path(path).read_text(encoding="utf-8"))


def make_artifact(result: TrainResult, structure: SpatialStructure, prior: PriorSpec, cfg: TrainConfig) -> DecoderArtifact:
    return DecoderArtifact(
        decoder=result.model.decoder.copy(),
        structure_fingerprint=structure.fingerprint,
        prior=prior.descriptor(),
        likelihood=result.model.likelihood,
        training={
            "seed": cfg.seed,
            "steps": cfg.steps,
            "batch_size": cfg.batch_size,
            "objective": cfg.objective,
            "iwae_k": cfg.iwae_k if cfg.objective == "iwae" else None,
            "final_loss": float(result.final_loss),
            "recon_sd": result.model.recon_sd,
            "grad_clip": cfg.grad_clip,
        },
    )
