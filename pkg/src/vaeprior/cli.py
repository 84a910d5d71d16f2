"""Command-line front end: ``vaeprior {train,infer,benchmark,psd}``.

Outputs go to ``<out>/<command>-<config hash>/``. An existing output
directory is never overwritten: rerunning with ``--verify`` recomputes into a
scratch directory and fails if any file differs (timing fields excepted).
Every failure prints one line of JSON on stderr and exits nonzero
(2 for a decoder/structure fingerprint mismatch, 3 for sampler failure).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .diagnostics import low_frequency_gap, mse, periodogram, write_psd_csv
from .errors import FingerprintMismatchError, InvalidArgumentError, SamplerError, VaePriorError
from .experiments import (
    ResultsBundle,
    bym_source,
    decoder_source,
    direct_gp_source,
    nested_observations,
    run_experiment_1d,
    run_lip_cancer,
    run_lip_cancer_cv,
    run_poisson_1d,
    synthetic_gp_data,
)
from .priors import batch_prior_draws
from .spatial import observation_count
from .vae import build_vae, load_decoder, make_artifact, save_decoder, train

EXIT_ERROR, EXIT_FINGERPRINT, EXIT_SAMPLER = 1, 2, 3


# --------------------------------------------------------------------------
# Commands. Each writes its files into ``out`` and returns printable lines.
# --------------------------------------------------------------------------


def train_decoder(cfg: ExperimentConfig):
    """Build and train the VAE described by ``cfg``; returns the TrainResult."""
    v = cfg.vae
    model = build_vae(
        cfg.structure.n,
        v["hidden"],
        v["latent_dim"],
        activation=v["activation"],
        likelihood=cfg.likelihood,
        rng=np.random.default_rng(cfg.seeds["train"]),
        recon_sd=v["recon_sd"],
    )
    return train(model, cfg.prior, cfg.structure, cfg.train)


def cmd_train(cfg: ExperimentConfig, out: Path, artifact=None) -> list[str]:
    result = train_decoder(cfg)
    art = make_artifact(result, cfg.structure, cfg.prior, cfg.train)
    path = save_decoder(art, out / "decoder.json")
    training = {
        "trace_steps": result.trace_steps.tolist(),
        "trace_loss": [float(x) for x in result.trace_loss],
        "final_loss": float(result.final_loss),
        "elapsed": result.elapsed,
    }
    (out / "training.json").write_text(json.dumps(training, indent=1) + "\n")
    return [str(path)]


def _decoder(cfg: ExperimentConfig, artifact):
    if artifact is None:
        raise InvalidArgumentError("this command needs --artifact")
    if artifact.likelihood != cfg.likelihood:
        raise InvalidArgumentError(
            f"artifact was trained with a {artifact.likelihood} likelihood, experiment needs {cfg.likelihood}"
        )
    return decoder_source(artifact, cfg.structure)


def _observed_ess(bundle: ResultsBundle, observed: np.ndarray) -> float:
    """Mean ESS of f over the observed locations (all locations when none are observed)."""
    names = [f"f[{i}]" for i in observed] if len(observed) else None
    d = bundle.diagnostics
    if names is None:
        return d.subset("f[").mean_ess
    idx = [d.names.index(n) for n in names]
    return float(np.mean(d.ess[idx]))


def _synthetic_runs(cfg: ExperimentConfig, source, name: str):
    """Yield (subdir, bundle, observed, data) over truth seeds and observation fractions."""
    n = cfg.structure.n
    inf = cfg.inference
    counts = [observation_count(f, n) for f in inf["obs_fractions"]]
    multi = len(inf["truth_seeds"]) > 1
    for seed in inf["truth_seeds"]:
        data = synthetic_gp_data(cfg.structure, cfg.gp_spec(), seed, inf["noise_sd"])
        obs_sets = nested_observations(n, counts, cfg.seeds["obs"] + seed)
        for count, observed in zip(counts, obs_sets):
            bundle = run_experiment_1d(
                source, data, observed, cfg.hmc, inf["noise_prior_scale"], name=name,
                meta={"truth_seed": seed, "obs_count": count, "source": name},
            )
            sub = f"truth{seed}/obs{count}" if multi else f"obs{count}"
            yield sub, bundle, observed, data


def cmd_infer(cfg: ExperimentConfig, out: Path, artifact=None) -> list[str]:
    source = _decoder(cfg, artifact)
    lines = []
    if cfg.experiment == "Poisson1d":
        bundle = run_poisson_1d(source, cfg.structure, cfg.gp_spec(), cfg.seeds["truth"], cfg.hmc)
        bundle.write(out)
        lines.append(f"mean ESS {bundle.effect_ess:.1f}, elapsed {bundle.elapsed:.1f}s")
    elif cfg.experiment == "LipCancer":
        bundle = run_lip_cancer(cfg.dataset, source, cfg.hmc, name="vae")
        bundle.write(out)
        lines.append(f"mean ESS {bundle.effect_ess:.1f}, elapsed {bundle.elapsed:.1f}s")
    elif cfg.experiment == "LipCancerCv":
        cv = run_lip_cancer_cv(cfg.dataset, source, cfg.hmc, cfg.inference["folds"], cfg.seeds["split"], name="vae")
        for i, b in enumerate(cv.bundles):
            b.write(out / f"fold{i}")
        _write_rows(out / "cv.csv", ["fold", "mse"], [[i, repr(float(m))] for i, m in enumerate(cv.fold_mse)])
        lines.append(f"CV MSE {cv.mean_mse:.2f} +/- {cv.sd_mse:.2f}")
    else:
        for sub, bundle, observed, _ in _synthetic_runs(cfg, source, "vae"):
            bundle.write(out / sub)
            lines.append(f"{sub}: {len(observed)} observed, mean ESS {_observed_ess(bundle, observed):.1f}")
    return lines


def _write_rows(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def cmd_benchmark(cfg: ExperimentConfig, out: Path, artifact=None) -> list[str]:
    vae_src = _decoder(cfg, artifact)
    lines = []
    if cfg.is_areal:
        direct = bym_source(cfg.dataset, cfg.prior)
        sources = [("vae", vae_src), ("bym", direct)]
    else:
        direct, hyper = direct_gp_source(
            cfg.structure, cfg.gp_spec(), cfg.seeds["baseline"], centered=cfg.inference["baseline_centered"]
        )
        sources = [("vae", vae_src), ("gp", direct)]
        lines.append(f"baseline GP hyperparameters: {hyper}")

    if cfg.experiment == "LipCancerCv":
        rows = []
        for name, src in sources:
            cv = run_lip_cancer_cv(cfg.dataset, src, cfg.hmc, cfg.inference["folds"], cfg.seeds["split"], name=name)
            for i, b in enumerate(cv.bundles):
                observed = np.setdiff1d(np.arange(cfg.structure.n), cv.folds[i])
                rows.append([name, i, repr(_observed_ess(b, observed)), repr(b.elapsed), repr(cv.fold_mse[i])])
            lines.append(f"{name}: CV MSE {cv.mean_mse:.2f} +/- {cv.sd_mse:.2f}")
        _write_rows(out / "comparison.csv", ["source", "fold", "mean_ess", "elapsed_s", "mse"], rows)
        return lines

    if cfg.experiment in ("LipCancer", "Poisson1d"):
        rows, ess = [], {}
        for name, src in sources:
            if cfg.experiment == "LipCancer":
                b = run_lip_cancer(cfg.dataset, src, cfg.hmc, name=name)
                err = mse(b.summary.mean, cfg.dataset.y)
            else:
                b = run_poisson_1d(src, cfg.structure, cfg.gp_spec(), cfg.seeds["truth"], cfg.hmc)
                err = mse(b.summary.mean, b.truth["rate"])
            b.write(out / name)
            ess[name] = b.effect_ess
            rows.append([name, repr(ess[name]), repr(b.elapsed), repr(err)])
        _write_rows(out / "comparison.csv", ["source", "mean_ess", "elapsed_s", "mse"], rows)
        lines.append(f"ESS ratio vae/{sources[1][0]}: {ess['vae'] / ess[sources[1][0]]:.2f}")
        return lines

    rows, vae_ess = [], []
    for name, src in sources:
        for sub, b, observed, data in _synthetic_runs(cfg, src, name):
            b.write(out / name / sub)
            e = _observed_ess(b, observed)
            if name == "vae":
                vae_ess.append(e)
            rows.append([name, repr(e), repr(b.elapsed), repr(mse(b.summary.mean, data.truth)), len(observed)])
    _write_rows(out / "comparison.csv", ["source", "mean_ess", "elapsed_s", "mse", "n_obs"], rows)
    trend = "nondecreasing" if all(b >= a for a, b in zip(vae_ess, vae_ess[1:])) else "not monotone"
    lines.append(f"vae mean ESS by observation count: {[round(e, 1) for e in vae_ess]} ({trend})")
    return lines


def cmd_psd(cfg: ExperimentConfig, out: Path, artifact=None) -> list[str]:
    st = cfg.structure
    if not st.regular or st.spacing is None or st.points.shape[1] != 1:
        raise InvalidArgumentError("psd needs a regular 1-D structure")
    source = _decoder(cfg, artifact)
    n_draws = cfg.inference["psd_draws"]
    gp_ss, z_ss = np.random.SeedSequence(cfg.seeds["psd"]).spawn(2)
    gp = batch_prior_draws(cfg.gp_spec(), st, n_draws, np.random.default_rng(gp_ss)).draws
    z = np.random.default_rng(z_ss).standard_normal((n_draws, source.dim))
    vae = source.effect(z)
    est = {"gp": periodogram(gp, st), "vae": periodogram(vae, st)}
    write_psd_csv(out / "psd.csv", est)
    gap = low_frequency_gap(est["gp"], est["vae"])
    (out / "psd.json").write_text(json.dumps({"low_frequency_gap": gap, "draws": n_draws}, indent=1) + "\n")
    return [f"max low-frequency mean log-power gap: {gap:.4f}"]


COMMANDS = {"train": cmd_train, "infer": cmd_infer, "benchmark": cmd_benchmark, "psd": cmd_psd}


# --------------------------------------------------------------------------
# Output directories and verification
# --------------------------------------------------------------------------


def _strip_timing(obj):
    if isinstance(obj, dict):
        return {k: _strip_timing(v) for k, v in obj.items() if "elapsed" not in k}
    if isinstance(obj, list):
        return [_strip_timing(v) for v in obj]
    return obj


def _comparable(path: Path) -> bytes:
    """File content with timing fields removed."""
    data = path.read_bytes()
    if path.suffix == ".json" and path.name != "decoder.json":
        return json.dumps(_strip_timing(json.loads(data)), sort_keys=True).encode()
    if path.suffix == ".csv":
        rows = list(csv.reader(io.StringIO(data.decode())))
        if rows:
            keep = [i for i, h in enumerate(rows[0]) if "elapsed" not in h]
            buf = io.StringIO()
            csv.writer(buf).writerows([[r[i] for i in keep] for r in rows])
            return buf.getvalue().encode()
    return data


def compare_dirs(expected: Path, actual: Path) -> list[str]:
    """Relative paths whose comparable content differs, or which exist on one side only."""
    a = {p.relative_to(expected) for p in expected.rglob("*") if p.is_file()}
    b = {p.relative_to(actual) for p in actual.rglob("*") if p.is_file()}
    diffs = sorted(str(p) for p in a ^ b)
    for rel in sorted(a & b):
        if _comparable(expected / rel) != _comparable(actual / rel):
            diffs.append(str(rel))
    return diffs


def _artifact_digest(path: str | None) -> str:
    if path is None:
        return ""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run_command(command: str, cfg: ExperimentConfig, out_root: Path, artifact_path: str | None, verify: bool):
    artifact = load_decoder(artifact_path) if artifact_path else None
    target = Path(out_root) / f"{command}-{cfg.digest(_artifact_digest(artifact_path))}"
    fn = COMMANDS[command]
    if target.exists():
        if not verify:
            raise InvalidArgumentError(f"output directory {target} exists; pass --verify to check reproducibility")
        with tempfile.TemporaryDirectory() as tmp:
            lines = fn(cfg, Path(tmp), artifact)
            diffs = compare_dirs(target, Path(tmp))
        if diffs:
            raise VerificationError(f"rerun differs from {target} in: {', '.join(diffs)}")
        return target, lines + [f"verified {target}"]
    scratch = Path(tempfile.mkdtemp(prefix=".partial-", dir=out_root))
    try:
        lines = fn(cfg, scratch, artifact)
        scratch.rename(target)
    finally:
        if scratch.exists():
            shutil.rmtree(scratch)
    return target, lines


class VerificationError(VaePriorError):
    kind = "verification-failed"


def _parse_override(text: str) -> tuple[str, int]:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise ConfigError("--seed-override", f"expected k=v, got {text!r}")
    try:
        return key, int(value)
    except ValueError:
        raise ConfigError(f"seeds.{key}", f"seed must be an integer, got {value!r}") from None


def _error(exc: BaseException, code: int, kind: str | None = None) -> int:
    payload = {"error": kind or getattr(exc, "kind", "internal-error"), "message": str(exc)}
    if isinstance(exc, ConfigError):
        payload["field"] = exc.field
    print(json.dumps(payload), file=sys.stderr)
    return code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError("arguments", message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vaeprior", description="Train decoder priors and run spatial inference.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="config JSON path or built-in experiment name")
    parser.add_argument("--out", default="runs", help="output root directory")
    parser.add_argument("--artifact", help="trained decoder JSON (infer, benchmark, psd)")
    parser.add_argument("--verify", action="store_true", help="recompute and compare against existing outputs")
    parser.add_argument("--seed-override", action="append", default=[], metavar="K=V")
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        overrides = dict(_parse_override(o) for o in args.seed_override)
        cfg = load_config(args.config, overrides=overrides)
        out_root = Path(args.out)
        out_root.mkdir(parents=True, exist_ok=True)
        target, lines = run_command(args.command, cfg, out_root, args.artifact, args.verify)
    except FingerprintMismatchError as exc:
        return _error(exc, EXIT_FINGERPRINT)
    except SamplerError as exc:
        return _error(exc, EXIT_SAMPLER)
    except VaePriorError as exc:
        return _error(exc, EXIT_ERROR)
    except OSError as exc:
        return _error(exc, EXIT_ERROR, "io-error")
    except Exception as exc:  # noqa: BLE001 - last-resort single-line diagnostic
        return _error(exc, EXIT_ERROR)
    for line in lines:
        print(line)
    print(target)
    return 0


if __name__ == "__main__":
    sys.exit(main())
