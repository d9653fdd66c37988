from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentps.ps_model import IndexMap
from latentps.sampler import (FunctionModel, GradientCheckError, NonFiniteGradientError,
                              PosteriorDraws, SamplerConfig, diagnostics, ess_bulk,
                              gradient_check, load_posterior, sample, save_posterior,
                              split_rhat, summarize, warmup_windows)
from latentps.two_stage import draw_eta_vectors
from targets import MU, SD, gaussian, nan_gradient, wrong_sign

IM = IndexMap([("theta", 3, "identity", ["x", "y", "w"])])


@pytest.fixture(scope="module")
def gauss_post():
    cfg = SamplerConfig(n_chains=4, n_warmup=1000, n_draws=2000, max_leapfrog=16, seed=3)
    return sample(FunctionModel(gaussian, 3, IM), cfg)


def test_gaussian_calibration(gauss_post):
    flat = gauss_post.flat_draws()
    ess = ess_bulk(gauss_post.draws)
    mcse = SD / np.sqrt(ess)
    assert np.all(np.abs(flat.mean(axis=0) - MU) < 4 * mcse)
    assert np.allclose(flat.std(axis=0), SD, rtol=0.1)
    assert diagnostics(gauss_post).max_rhat < 1.01
    acc = float(np.mean(gauss_post.accept))
    assert 0.6 < acc < 0.95


def test_same_seed_same_draws():
    cfg = SamplerConfig(n_chains=2, n_warmup=200, n_draws=100, seed=9)
    a = sample(FunctionModel(gaussian, 3, IM), cfg)
    b = sample(FunctionModel(gaussian, 3, IM), cfg)
    assert np.array_equal(a.draws, b.draws)
    c = sample(FunctionModel(gaussian, 3, IM), SamplerConfig(n_chains=2, n_warmup=200, n_draws=100, seed=10))
    assert not np.array_equal(a.draws, c.draws)


def test_parallel_chains_match_serial():
    base = dict(n_chains=3, n_warmup=150, n_draws=80, seed=5)
    a = sample(FunctionModel(gaussian, 3, IM), SamplerConfig(**base, n_jobs=1))
    b = sample(FunctionModel(gaussian, 3, IM), SamplerConfig(**base, n_jobs=3))
    assert np.array_equal(a.draws, b.draws)
    assert np.array_equal(a.step_size, b.step_size)


def test_gradient_check_catches_sign_error():
    with pytest.raises(GradientCheckError):
        gradient_check(FunctionModel(wrong_sign, 3, IM), np.array([0.3, 0.1, -0.2]))
    assert gradient_check(FunctionModel(gaussian, 3, IM), np.array([0.3, 0.1, -0.2])) < 1e-6
    with pytest.raises(GradientCheckError):
        sample(FunctionModel(wrong_sign, 3, IM), SamplerConfig(n_chains=1, n_warmup=5, n_draws=5))


def test_nonfinite_gradient_names_segment():
    cfg = SamplerConfig(n_chains=1, n_warmup=200, n_draws=200, gradient_check=False)
    with pytest.raises(NonFiniteGradientError) as e:
        sample(FunctionModel(nan_gradient, 3, IM), cfg)
    assert e.value.segment == "theta"


def test_rhat_of_identical_chains_is_one():
    x = np.random.default_rng(0).normal(size=2000)
    # the two halves of each chain must also agree
    chain = np.concatenate([x, x])
    assert split_rhat(np.stack([chain, chain])) == pytest.approx(1.0, abs=2e-3)


def test_rhat_detects_offset_chains():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 500))
    x[0] += 5.0
    assert split_rhat(x) > 1.5


def test_rhat_constant_chains():
    assert np.isnan(split_rhat(np.ones((2, 10))))
    assert split_rhat(np.stack([np.ones(10), 2 * np.ones(10)])) == np.inf


def test_ess_of_iid_draws():
    x = np.random.default_rng(2).normal(size=(4, 1000))
    assert abs(ess_bulk(x) / 4000 - 1.0) < 0.2


def test_ess_of_correlated_draws_is_small():
    rng = np.random.default_rng(3)
    x = np.zeros((4, 1000))
    for t in range(1, 1000):
        x[:, t] = 0.95 * x[:, t - 1] + rng.normal(size=4)
    # AR(1) with rho 0.95 has ESS about N (1 - rho) / (1 + rho)
    assert 50 < float(ess_bulk(x)) < 250


NAME0 = "theta"


def _post(values, name="theta"):
    v = np.asarray(values, dtype=float)
    im = IndexMap([(name, v.shape[2])])
    return PosteriorDraws(draws=v, index_map=im)


def test_summary_of_constant_draws():
    s = summarize(_post(np.full((2, 10, 1), 3.0)), "theta").row(NAME0)
    assert s["mean"] == 3.0 and s["sd"] == 0.0
    assert s["q2.5"] == s["q97.5"] == 3.0
    assert s["pr_lt_0"] == 0.0


def test_summary_quantiles_hand_values():
    vals = np.array([5.0, 1.0, 7.0, 3.0, 2.0, 8.0, 4.0, 6.0]).reshape(1, 8, 1)
    s = summarize(_post(vals), "theta", diagnostics=False).row(NAME0)
    # sorted 1..8: type-7 quantile at p is x[(n-1) p] interpolated
    assert s["q50"] == pytest.approx(4.5)
    assert s["q25"] == pytest.approx(2.75)
    assert s["q75"] == pytest.approx(6.25)
    assert s["q2.5"] == pytest.approx(1.175)
    assert s["mean"] == pytest.approx(4.5)


def test_pr_lt_zero_symmetric():
    x = np.random.default_rng(4).normal(size=(4, 5000, 1))
    assert abs(summarize(_post(x), "theta").row(NAME0)["pr_lt_0"] - 0.5) < 0.02


def test_warmup_windows_cover_schedule():
    w = warmup_windows(1000)
    assert w[0][0] == 75 and w[-1][1] == 950
    sizes = [e - s for s, e in w]
    assert sizes[:3] == [25, 50, 100]
    assert all(a[1] == b[0] for a, b in zip(w, w[1:]))
    assert warmup_windows(10) == []
    short = warmup_windows(100)
    assert short[0][0] == 15 and short[-1][1] == 90


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    im = IndexMap([("b", 2), ("eta", 60, "identity", [f"s{k}" for k in range(60)])])
    post = PosteriorDraws(draws=rng.normal(size=(2, 7, 62)), index_map=im,
                          lp=rng.normal(size=(2, 7)), accept=rng.random((2, 7)))
    post.add_derived("tau", rng.normal(size=(2, 7)))
    post.add_derived("strat", rng.normal(size=(2, 7, 3)), ["u", "v", "w"])
    files = save_posterior(post, tmp_path)
    assert "eta" in files
    back = load_posterior(tmp_path)
    assert np.array_equal(back.draws, post.draws)
    assert np.array_equal(back.get("tau"), post.get("tau"))
    assert np.array_equal(back.get("strat"), post.get("strat"))
    assert back.derived_labels["strat"] == ["u", "v", "w"]
    assert np.array_equal(back.accept, post.accept)


def test_wide_csv_rows_match_thinned_vectors(tmp_path):
    rng = np.random.default_rng(6)
    im = IndexMap([("eta", 55)])
    post = PosteriorDraws(draws=rng.normal(size=(2, 10, 55)), index_map=im)
    save_posterior(post, tmp_path)
    rows = np.loadtxt(tmp_path / "eta.csv", delimiter=",", skiprows=1)[:, 2:]
    picks = draw_eta_vectors(post, 5)
    for k, v in enumerate(picks):
        assert np.array_equal(v, rows[(k * 20) // 5])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40))
def test_thinning_indices_even_and_distinct(n, total):
    if n > total:
        return
    post = _post(np.arange(total, dtype=float).reshape(1, total, 1), "eta")
    idx = [int(v[0]) for v in draw_eta_vectors(post, n)]
    assert len(set(idx)) == n and idx == sorted(idx)
    assert idx[0] == 0
    if n == total:
        assert idx == list(range(total))


def test_config_validation():
    for bad in (dict(n_chains=0), dict(target_accept=1.0), dict(max_leapfrog=0), dict(init_jitter=-1)):
        with pytest.raises(ValueError):
            SamplerConfig(**bad)
