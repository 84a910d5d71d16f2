import json

import numpy as np
import pytest

from vaeprior.errors import InvalidArgumentError
from vaeprior.experiments import (
    bym_source,
    direct_gp_source,
    lip_design,
    lip_model,
    nested_observations,
    run_experiment_1d,
    run_lip_cancer_cv,
    run_poisson_1d,
    synthetic_count_data,
    synthetic_gp_data,
)
from vaeprior.mcmc import DecoderEffect, HmcConfig
from vaeprior.nn import Layer, Mlp, init_mlp
from vaeprior.priors import GpPriorSpec
from vaeprior.spatial import build_regular_grid_1d, load_lip_cancer

TINY = HmcConfig(chains=2, warmup=20, samples=20, leapfrog_steps=4, seed=1)


def test_nested_observations():
    sets = nested_observations(400, [2, 4, 6], seed=3)
    assert [len(s) for s in sets] == [2, 4, 6]
    assert set(sets[0]) <= set(sets[1]) <= set(sets[2])
    with pytest.raises(InvalidArgumentError):
        nested_observations(10, [11], 0)


def test_synthetic_data_deterministic():
    g = build_regular_grid_1d(50)
    a, b = synthetic_gp_data(g, GpPriorSpec(), 4), synthetic_gp_data(g, GpPriorSpec(), 4)
    assert np.array_equal(a.y, b.y) and a.hyper == b.hyper
    assert np.std(a.y - a.truth) == pytest.approx(0.1, rel=0.3)
    f, y, _ = synthetic_count_data(g, GpPriorSpec(), 4)
    assert np.all(y >= 0) and np.all(y == np.round(y)) and f.shape == (50,)


def test_run_1d_bundle_files(tmp_path):
    g = build_regular_grid_1d(30)
    src, hyper = direct_gp_source(g, GpPriorSpec(), seed=0)
    data = synthetic_gp_data(g, GpPriorSpec(), 1)
    bundle = run_experiment_1d(src, data, np.array([3, 17]), TINY)
    bundle.write(tmp_path)
    assert {p.name for p in tmp_path.iterdir()} == {"summary.csv", "diagnostics.csv", "meta.json", "truth.csv"}
    meta = json.loads((tmp_path / "meta.json").read_text())
    assert meta["observed"] == [3, 17] and "elapsed_seconds" in meta and "divergences" in meta
    assert bundle.summary.linked.shape == (30, 6)
    assert bundle.diagnostics.subset("f[").ess.shape == (30,)
    assert hyper["sigma2"] > 0


def test_poisson_run_is_rate_scale():
    g = build_regular_grid_1d(20)
    dec = init_mlp([3, 20], ["exp"], np.random.default_rng(0))
    bundle = run_poisson_1d(DecoderEffect(dec), g, GpPriorSpec(), 2, TINY)
    assert np.all(bundle.summary.mean > 0)
    np.testing.assert_allclose(bundle.truth["rate"], np.exp(bundle.truth["log_rate"]))


def test_lip_offset_only_rate():
    ds = load_lip_cancer()
    model = lip_model(ds, DecoderEffect(Mlp([Layer(np.zeros((56, 56)), np.zeros(56))])))
    eta = model.linear_predictor(np.zeros(model.dim))
    np.testing.assert_allclose(np.exp(eta), ds.E, rtol=1e-12)
    X = lip_design(ds)
    assert X.shape == (56, 2) and np.all(X[:, 0] == 1)


def test_lip_holdout_excluded():
    ds = load_lip_cancer()
    model = lip_model(ds, bym_source(ds), holdout=np.array([0, 5, 9]))
    assert model.observed.size == 53 and not {0, 5, 9} & set(model.observed.tolist())


def test_cv_covers_every_county_once():
    ds = load_lip_cancer()
    dec = init_mlp([4, 56], ["identity"], np.random.default_rng(0))
    cv = run_lip_cancer_cv(ds, DecoderEffect(dec), HmcConfig(chains=1, warmup=10, samples=10, leapfrog_steps=3), 5, 0)
    held = np.concatenate(cv.folds)
    assert np.array_equal(np.sort(held), np.arange(56))
    assert len(cv.fold_mse) == 5 and np.all(cv.fold_mse >= 0)
    assert cv.sd_mse >= 0
