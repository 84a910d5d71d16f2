"""Exact draws from GP, CAR, ICAR and BYM priors over a spatial structure.

These samplers produce the (unlimited, noise-free) training data for the
VAE and the ground truth for synthetic experiments.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.linalg import LinAlgError

from .errors import DimensionMismatchError, InvalidArgumentError, NumericError
from .spatial import SpatialStructure, StructureKind

JITTER_ESCALATED = 1e-4


@dataclass(frozen=True)
class GammaPrior:
    """Gamma(shape, rate) hyperprior for a precision."""

    shape: float
    rate: float

    def __post_init__(self):
        if self.shape <= 0 or self.rate <= 0:
            raise InvalidArgumentError("Gamma shape and rate must be positive")

    def sample(self, rng: np.random.Generator, size=None):
        return rng.gamma(self.shape, 1.0 / self.rate, size=size)

    def logpdf(self, x):
        from scipy.special import gammaln

        return self.shape * np.log(self.rate) - gammaln(self.shape) + (self.shape - 1) * np.log(x) - self.rate * x


Precision = Union[float, GammaPrior]


@dataclass(frozen=True)
class GpPriorSpec:
    """Squared-exponential GP prior with LogNormal variance / InverseGamma lengthscale.

    ``sigma2`` or ``lengthscale`` may be fixed, which bypasses the
    corresponding hyperprior. ``jitter`` is relative to the variance.
    """

    sigma2_loc: float = 0.0
    sigma2_scale: float = 0.1
    lengthscale_shape: float = 4.0
    lengthscale_rate: float = 1.0
    jitter: float = 1e-6
    sigma2: float | None = None
    lengthscale: float | None = None
    kernel: str = "SquaredExponential"

    def __post_init__(self):
        if self.jitter <= 0:
            raise InvalidArgumentError("jitter must be positive")
        if self.sigma2_scale <= 0:
            raise InvalidArgumentError("sigma2_scale must be positive")
        if self.lengthscale_shape <= 0 or self.lengthscale_rate <= 0:
            raise InvalidArgumentError("InverseGamma shape and rate must be positive")
        if self.kernel != "SquaredExponential":
            raise InvalidArgumentError(f"unsupported kernel {self.kernel!r}")
        if self.sigma2 is not None and self.sigma2 <= 0:
            raise InvalidArgumentError("sigma2 must be positive")
        if self.lengthscale is not None and self.lengthscale <= 0:
            raise InvalidArgumentError("lengthscale must be positive")

    @property
    def mean_lengthscale(self) -> float:
        if self.lengthscale is not None:
            return self.lengthscale
        return self.lengthscale_rate / (self.lengthscale_shape - 1.0)

    def descriptor(self) -> dict:
        return {"family": "gp", **asdict(self)}


@dataclass(frozen=True)
class ArealPriorSpec:
    family: str
    tau: Precision = 1.0
    alpha: float = 0.0
    tau1: Precision = GammaPrior(2.0, 2.0)
    tau2: Precision = GammaPrior(2.0, 2.0)

    def __post_init__(self):
        if self.family not in ("CAR", "ICAR", "BYM"):
            raise InvalidArgumentError(f"unknown areal prior family {self.family!r}")
        if self.family == "CAR" and not abs(self.alpha) < 1:
            raise InvalidArgumentError("CAR requires |alpha| < 1")
        for name in ("tau", "tau1", "tau2"):
            value = getattr(self, name)
            if not isinstance(value, GammaPrior) and not value > 0:
                raise InvalidArgumentError(f"{name} must be positive")

    def descriptor(self) -> dict:
        def enc(v):
            return {"gamma": [v.shape, v.rate]} if isinstance(v, GammaPrior) else v

        out = {"family": self.family}
        if self.family in ("CAR", "ICAR"):
            out["tau"] = enc(self.tau)
        if self.family == "CAR":
            out["alpha"] = self.alpha
        if self.family == "BYM":
            out["tau1"] = enc(self.tau1)
            out["tau2"] = enc(self.tau2)
        return out


@dataclass(frozen=True)
class PoissonCountPrior:
    """Counts y ~ Poisson(exp(f)) with f drawn from a GP prior."""

    gp: GpPriorSpec = GpPriorSpec()

    def descriptor(self) -> dict:
        return {"family": "poisson-gp", "gp": self.gp.descriptor()}


PriorSpec = Union[GpPriorSpec, ArealPriorSpec, PoissonCountPrior]


@dataclass
class PriorDrawBatch:
    draws: np.ndarray
    hyper_used: dict[str, np.ndarray]
    structure_fingerprint: str
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    def record(self, i: int) -> dict[str, float]:
        return {k: float(v[i]) for k, v in self.hyper_used.items()}


def _draw_precision(value: Precision, rng: np.random.Generator, size: int) -> np.ndarray:
    if isinstance(value, GammaPrior):
        return value.sample(rng, size)
    return np.full(size, float(value))


# --------------------------------------------------------------------------
# Gaussian processes
# --------------------------------------------------------------------------


def _require_coords(structure: SpatialStructure) -> None:
    if not structure.has_coords:
        raise InvalidArgumentError("squared-exponential kernels need a grid structure, not an areal graph")


def se_kernel_matrix(structure: SpatialStructure, sigma2: float, lengthscale: float) -> np.ndarray:
    """K[i, j] = sigma2 * exp(-|x_i - x_j|^2 / lengthscale^2)."""
    _require_coords(structure)
    if sigma2 <= 0 or lengthscale <= 0:
        raise InvalidArgumentError("sigma2 and lengthscale must be positive")
    return sigma2 * np.exp(-structure.pairwise_sq_distances() / lengthscale**2)


def sample_gp_hyper(spec: GpPriorSpec, rng: np.random.Generator, size: int | None = None):
    """Draw (sigma2, lengthscale); sigma2 ~ LogNormal, lengthscale ~ InverseGamma(shape, rate)."""
    eps = rng.standard_normal(size)
    gam = rng.gamma(spec.lengthscale_shape, 1.0 / spec.lengthscale_rate, size=size)
    sigma2 = np.exp(spec.sigma2_loc + spec.sigma2_scale * eps)
    lengthscale = 1.0 / gam
    if spec.sigma2 is not None:
        sigma2 = np.full_like(sigma2, spec.sigma2) if size is not None else spec.sigma2
    if spec.lengthscale is not None:
        lengthscale = np.full_like(lengthscale, spec.lengthscale) if size is not None else spec.lengthscale
    if size is None:
        return float(sigma2), float(lengthscale)
    return sigma2, lengthscale


def jittered_cholesky(K: np.ndarray, sigma2: float, jitter: float) -> np.ndarray:
    """Lower Cholesky factor of K + jitter*sigma2*I, escalating once on failure."""
    n = K.shape[0]
    for rel in (jitter, max(jitter, JITTER_ESCALATED)):
        try:
            return cholesky(K + rel * sigma2 * np.eye(n), lower=True, check_finite=False)
        except LinAlgError:
            continue
    raise NumericError("Cholesky factorisation failed after jitter escalation")


def sample_gp(structure: SpatialStructure, spec: GpPriorSpec, rng: np.random.Generator):
    """One zero-mean GP draw L @ zeta with hyperparameters from the hyperpriors."""
    _require_coords(structure)
    sigma2, lengthscale = sample_gp_hyper(spec, rng)
    L = jittered_cholesky(se_kernel_matrix(structure, sigma2, lengthscale), sigma2, spec.jitter)
    draw = L @ rng.standard_normal(structure.n)
    return draw, {"sigma2": sigma2, "lengthscale": lengthscale}


class _DistanceTable:
    """Unique squared distances of a structure, for fast batched kernel assembly."""

    _cache: dict[str, "_DistanceTable"] = {}

    def __init__(self, structure: SpatialStructure):
        d2 = structure.pairwise_sq_distances()
        self.values, inverse = np.unique(d2, return_inverse=True)
        self.index = inverse.reshape(d2.shape)

    @classmethod
    def of(cls, structure: SpatialStructure) -> "_DistanceTable":
        table = cls._cache.get(structure.fingerprint)
        if table is None:
            table = cls._cache[structure.fingerprint] = cls(structure)
        return table


def _gp_batch(structure: SpatialStructure, spec: GpPriorSpec, batch_size: int, rng: np.random.Generator):
    _require_coords(structure)
    table = _DistanceTable.of(structure)
    sigma2, lengthscale = sample_gp_hyper(spec, rng, size=batch_size)
    zeta = rng.standard_normal((batch_size, structure.n))
    draws = np.empty((batch_size, structure.n))
    for b in range(batch_size):
        corr = np.exp(-table.values / lengthscale[b] ** 2)[table.index]
        L = jittered_cholesky(corr, 1.0, spec.jitter)
        draws[b] = np.sqrt(sigma2[b]) * (L @ zeta[b])
    return draws, {"sigma2": sigma2, "lengthscale": lengthscale}


# --------------------------------------------------------------------------
# Areal models
# --------------------------------------------------------------------------


def _require_graph(structure: SpatialStructure) -> None:
    if structure.kind is not StructureKind.AREAL_GRAPH:
        raise InvalidArgumentError("areal priors need an adjacency graph")


def car_precision(structure: SpatialStructure, tau: float, alpha: float) -> np.ndarray:
    """Symmetric proper-CAR precision tau * (D - alpha * A)."""
    _require_graph(structure)
    if not abs(alpha) < 1:
        raise InvalidArgumentError(f"CAR requires |alpha| < 1, got {alpha}")
    if tau <= 0:
        raise InvalidArgumentError("tau must be positive")
    A = structure.adjacency.astype(np.float64)
    return tau * (np.diag(A.sum(axis=1)) - alpha * A)


def sample_car(structure: SpatialStructure, tau: float, alpha: float, rng: np.random.Generator, size=None):
    Q = car_precision(structure, tau, alpha)
    try:
        L = cholesky(Q, lower=True, check_finite=False)
    except LinAlgError:
        raise NumericError("CAR precision is not positive definite (isolated areas?)") from None
    zeta = rng.standard_normal((structure.n,) if size is None else (structure.n, size))
    out = solve_triangular(L.T, zeta, lower=False, check_finite=False)
    return out if size is None else out.T


def graph_laplacian(structure: SpatialStructure) -> np.ndarray:
    _require_graph(structure)
    A = structure.adjacency.astype(np.float64)
    return np.diag(A.sum(axis=1)) - A


class LaplacianEigen:
    """Eigendecomposition of the graph Laplacian with the null space removed."""

    _cache: dict[str, "LaplacianEigen"] = {}

    def __init__(self, structure: SpatialStructure, rel_tol: float = 1e-8):
        w, v = np.linalg.eigh(graph_laplacian(structure))
        tol = rel_tol * w.max() if w.max() > 0 else rel_tol
        null = w < tol
        if null.sum() != 1:
            raise InvalidArgumentError(
                f"ICAR needs a connected graph; Laplacian has {int(null.sum())} null eigenvalues"
            )
        self.eigenvalues = w[~null]
        self.eigenvectors = v[:, ~null]

    @classmethod
    def of(cls, structure: SpatialStructure) -> "LaplacianEigen":
        eig = cls._cache.get(structure.fingerprint)
        if eig is None:
            eig = cls._cache[structure.fingerprint] = cls(structure)
        return eig

    def pseudo_inverse(self) -> np.ndarray:
        V = self.eigenvectors
        return (V / self.eigenvalues) @ V.T


def _icar_from_normals(eig: LaplacianEigen, tau: np.ndarray, zeta: np.ndarray) -> np.ndarray:
    coef = zeta / np.sqrt(np.asarray(tau)[..., None] * eig.eigenvalues)
    phi = coef @ eig.eigenvectors.T
    return phi - phi.mean(axis=-1, keepdims=True)


def sample_icar(structure: SpatialStructure, tau: float, rng: np.random.Generator) -> np.ndarray:
    """ICAR draw with covariance pinv(tau * L), exactly orthogonal to the constant vector."""
    _require_graph(structure)
    if tau <= 0:
        raise InvalidArgumentError("tau must be positive")
    eig = LaplacianEigen.of(structure)
    return _icar_from_normals(eig, np.float64(tau), rng.standard_normal(eig.eigenvalues.size))


def sample_bym(structure: SpatialStructure, tau1: float, tau2: float, rng: np.random.Generator):
    """Returns (f, phi1, phi2) with phi1 iid N(0, 1/tau1), phi2 ICAR(tau2), f = phi1 + phi2."""
    _require_graph(structure)
    if tau1 <= 0:
        raise InvalidArgumentError("tau1 must be positive")
    phi1 = rng.standard_normal(structure.n) / np.sqrt(tau1)
    phi2 = sample_icar(structure, tau2, rng)
    return phi1 + phi2, phi1, phi2


def _areal_batch(structure: SpatialStructure, spec: ArealPriorSpec, batch_size: int, rng):
    n = structure.n
    if spec.family == "CAR":
        tau = _draw_precision(spec.tau, rng, batch_size)
        draws = sample_car(structure, 1.0, spec.alpha, rng, size=batch_size) / np.sqrt(tau)[:, None]
        return draws, {"tau": tau}, {}
    eig = LaplacianEigen.of(structure)
    if spec.family == "ICAR":
        tau = _draw_precision(spec.tau, rng, batch_size)
        zeta = rng.standard_normal((batch_size, eig.eigenvalues.size))
        return _icar_from_normals(eig, tau, zeta), {"tau": tau}, {}
    tau1 = _draw_precision(spec.tau1, rng, batch_size)
    tau2 = _draw_precision(spec.tau2, rng, batch_size)
    phi1 = rng.standard_normal((batch_size, n)) / np.sqrt(tau1)[:, None]
    phi2 = _icar_from_normals(eig, tau2, rng.standard_normal((batch_size, eig.eigenvalues.size)))
    return phi1 + phi2, {"tau1": tau1, "tau2": tau2}, {"phi1": phi1, "phi2": phi2}


def batch_prior_draws(prior: PriorSpec, structure: SpatialStructure, batch_size: int, rng: np.random.Generator):
    """``batch_size`` independent prior draws, hyperparameters refreshed per draw."""
    if batch_size < 1:
        raise InvalidArgumentError("batch_size must be >= 1")
    if isinstance(prior, GpPriorSpec):
        draws, hyper = _gp_batch(structure, prior, batch_size, rng)
        return PriorDrawBatch(draws, hyper, structure.fingerprint)
    if isinstance(prior, PoissonCountPrior):
        f, hyper = _gp_batch(structure, prior.gp, batch_size, rng)
        rate = np.exp(f)
        counts = rng.poisson(rate).astype(np.float64)
        return PriorDrawBatch(counts, hyper, structure.fingerprint, extras={"f": f, "rate": rate})
    if isinstance(prior, ArealPriorSpec):
        _require_graph(structure)
        draws, hyper, extras = _areal_batch(structure, prior, batch_size, rng)
        return PriorDrawBatch(draws, hyper, structure.fingerprint, extras=extras)
    raise InvalidArgumentError(f"unsupported prior {type(prior).__name__}")


def prior_from_descriptor(data: dict) -> PriorSpec:
    """Inverse of the ``descriptor()`` methods (used by configs and artifacts)."""
    data = dict(data)
    family = data.pop("family")
    if family == "gp":
        return GpPriorSpec(**data)
    if family == "poisson-gp":
        return PoissonCountPrior(prior_from_descriptor(data["gp"]))

    def dec(v):
        if isinstance(v, dict):
            shape, rate = v["gamma"]
            return GammaPrior(float(shape), float(rate))
        return float(v)

    kwargs = {k: dec(v) if k.startswith("tau") else v for k, v in data.items()}
    return ArealPriorSpec(family=family, **kwargs)


def dump_batch(batch: PriorDrawBatch, path: str | Path, prior: PriorSpec) -> None:
    """Write draws as little-endian float64 (row-major) plus a JSON sidecar."""
    path = Path(path)
    draws = np.ascontiguousarray(batch.draws, dtype="<f8")
    path.write_bytes(draws.tobytes(order="C"))
    sidecar = {
        "n": int(draws.shape[1]),
        "batch": int(draws.shape[0]),
        "fingerprint": batch.structure_fingerprint,
        "prior": prior.descriptor(),
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_batch(path: str | Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    draws = np.frombuffer(path.read_bytes(), dtype="<f8")
    if draws.size != meta["n"] * meta["batch"]:
        raise DimensionMismatchError("batch file size does not match its sidecar")
    return draws.reshape(meta["batch"], meta["n"]).astype(np.float64), meta
