from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentps.irt_measurement import (LatentRegressionParams, MeasurementParams,
                                      latent_regression_logdensity, mastery_loglik, mastery_prob,
                                      q3_check, q3_matrix, softplus)
from latentps.ps_model import IndexMap
from latentps.sampler import PosteriorDraws
from latentps.synth_trial import GenConfig, generate
from latentps.trial_data import TrialDataset

finite = st.floats(-20, 20, allow_nan=False)


def test_prob_examples():
    assert mastery_prob(0.7, 0.7) == 0.5
    assert mastery_prob(math.log(3), 0.0) == pytest.approx(0.75, abs=1e-15)
    assert mastery_prob(-30.0, 0.0, 1.0, 0.2) == pytest.approx(0.2, abs=1e-6)
    assert mastery_prob(1.0, 0.0, 2.0) == pytest.approx(1 / (1 + math.exp(-2)))


@settings(max_examples=300, deadline=None)
@given(finite, finite, st.floats(0.05, 5), st.floats(0, 0.99), st.floats(1e-3, 5))
def test_prob_monotone(eta, delta, disc, guess, step):
    p = mastery_prob(eta, delta, disc, guess)
    assert 0 <= p <= 1
    assert mastery_prob(eta + step, delta, disc, guess) >= p
    assert mastery_prob(eta, delta + step, disc, guess) <= p


def test_strictly_increasing_vectorized():
    rng = np.random.default_rng(0)
    n = 10_000
    eta, delta = rng.uniform(-4, 4, n), rng.uniform(-4, 4, n)
    disc, guess = rng.uniform(0.2, 3, n), rng.uniform(0, 0.9, n)
    step = rng.uniform(1e-3, 1, n)
    p = mastery_prob(eta, delta, disc, guess)
    assert np.all(mastery_prob(eta + step, delta, disc, guess) > p)
    assert np.all(mastery_prob(eta, delta + step, disc, guess) < p)


def test_softplus_no_overflow():
    u = np.array([-800.0, -30.0, 0.0, 30.0, 800.0])
    v = softplus(u)
    assert np.all(np.isfinite(v))
    assert v[-1] == 800.0 and v[2] == pytest.approx(math.log(2))


def test_loglik_examples():
    p = MeasurementParams(np.zeros(2))
    assert mastery_loglik(([], [], []), np.zeros(1), p) == 0.0
    assert mastery_loglik(([0], [0], [1]), np.zeros(1), p) == pytest.approx(math.log(0.5))
    eta = np.array([0.3, -1.1])
    delta = np.array([0.5, -0.2])
    recs = ([0, 0, 1, 1], [0, 1, 0, 1], [1, 0, 0, 1])
    hand = 0.0
    for s, k, m in zip(*recs):
        q = 1 / (1 + math.exp(delta[k] - eta[s]))
        hand += math.log(q) if m else math.log(1 - q)
    assert mastery_loglik(recs, eta, MeasurementParams(delta)) == pytest.approx(hand, abs=1e-12)


def test_loglik_extreme_values_finite():
    recs = ([0, 0], [0, 1], [1, 0])
    v = mastery_loglik(recs, np.array([40.0]), MeasurementParams(np.array([-5.0, -5.0])))
    assert np.isfinite(v) and v < -40


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_rasch_translation_invariance(seed, c):
    rng = np.random.default_rng(seed)
    eta, delta = rng.normal(size=6), rng.normal(size=4)
    recs = (rng.integers(0, 6, 15), rng.integers(0, 4, 15), rng.integers(0, 2, 15))
    a = mastery_loglik(recs, eta, MeasurementParams(delta))
    b = mastery_loglik(recs, eta + c, MeasurementParams(delta + c))
    assert abs(a - b) < 1e-10


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10_000))
def test_rasch_is_3pl_special_case(seed):
    rng = np.random.default_rng(seed)
    eta, delta = rng.normal(0, 3, size=6), rng.normal(0, 3, size=4)
    recs = (rng.integers(0, 6, 20), rng.integers(0, 4, 20), rng.integers(0, 2, 20))
    r = mastery_loglik(recs, eta, MeasurementParams(delta))
    t = mastery_loglik(recs, eta, MeasurementParams(delta, np.ones(4), np.zeros(4), "3pl"))
    two = mastery_loglik(recs, eta, MeasurementParams(delta, np.ones(4), None, "2pl"))
    assert abs(r - t) < 1e-12 and abs(r - two) < 1e-12


def test_params_validation():
    with pytest.raises(ValueError):
        MeasurementParams(np.zeros(2), np.array([1.0, -1.0]), None, "2pl")
    with pytest.raises(ValueError):
        MeasurementParams(np.zeros(2), None, np.array([0.1, 1.0]), "3pl")
    with pytest.raises(ValueError):
        MeasurementParams(np.zeros(2), family="4pl")
    with pytest.raises(ValueError):
        LatentRegressionParams(np.zeros(1), np.zeros(1), np.zeros(1), 0.0, 1.0, 1.0)


def _lr(sigma=1.0, n=3):
    return LatentRegressionParams(np.zeros(1), np.zeros(1), np.zeros(1), sigma, 1.0, 1.0)


def test_latent_regression_examples():
    LOG2PI = math.log(2 * math.pi)
    X, ti, si = np.zeros((3, 1)), [0, 0, 0], [0, 0, 0]
    base = latent_regression_logdensity(np.zeros(3), X, _lr(), ti, si)
    per_student = base - 2 * (-0.5 * LOG2PI)  # subtract the two intercept terms
    assert per_student / 3 == pytest.approx(-0.5 * LOG2PI)
    doubled = latent_regression_logdensity(np.zeros(3), X, _lr(2.0), ti, si)
    assert base - doubled == pytest.approx(3 * math.log(2))


def test_latent_regression_hand_oracle():
    from scipy.stats import norm
    eta = np.array([0.2, -0.5, 1.3])
    X = np.array([[1.0, 0.0], [0.5, 1.0], [-1.0, 2.0]])
    p = LatentRegressionParams(np.array([0.4, -0.2]), np.array([0.1, -0.3]), np.array([0.05]),
                               0.7, 0.5, 0.2, intercept=0.1)
    ti, si = np.array([0, 1, 1]), np.array([0, 0, 0])
    mu = 0.1 + X @ p.beta_M + p.teacher_fx[ti] + p.school_fx[si]
    hand = (norm.logpdf(eta, mu, 0.7).sum() + norm.logpdf(p.teacher_fx, 0, 0.5).sum()
            + norm.logpdf(p.school_fx, 0, 0.2).sum())
    assert latent_regression_logdensity(eta, X, p, ti, si) == pytest.approx(hand, abs=1e-12)


def test_q3_matrix_matches_corrcoef():
    rng = np.random.default_rng(3)
    R = rng.normal(size=(50, 3))
    W = np.ones((50, 3), dtype=bool)
    W[:10, 2] = False
    q, n = q3_matrix(R, W)
    assert n[0, 2] == 40 and n[0, 1] == 50
    assert q[0, 1] == pytest.approx(np.corrcoef(R[:, 0], R[:, 1])[0, 1])
    sel = W[:, 2]
    assert q[0, 2] == pytest.approx(np.corrcoef(R[sel, 0], R[sel, 2])[0, 1])


def pseudo_posterior(eta, delta, n_chains=2, n_draws=100, jitter=0.0, seed=0):
    """Posterior-like draws concentrated at given values."""
    rng = np.random.default_rng(seed)
    im = IndexMap()
    im.add("delta", len(delta))
    d = np.broadcast_to(delta, (n_chains, n_draws, len(delta))) + jitter * rng.normal(size=(n_chains, n_draws, len(delta)))
    post = PosteriorDraws(np.array(d), im)
    e = np.broadcast_to(eta, (n_chains, n_draws, len(eta))) + jitter * rng.normal(size=(n_chains, n_draws, len(eta)))
    post.add_derived("eta", np.array(e))
    return post


def test_q3_self_consistent_truth():
    ds, truth = generate(GenConfig(seed=31))
    rep = q3_check(ds, pseudo_posterior(truth.eta_T, truth.delta), 200)
    assert 0.2 <= rep.median_p <= 0.8
    assert len(rep.p_value) == 40 * 39 // 2


def test_q3_detects_second_factor():
    ds, truth = generate(GenConfig(two_factor=True, mean_sections=30, seed=31))
    # a one-factor fit settles between the two true factors
    post = pseudo_posterior(0.5 * (truth.eta_T + truth.params["eta2"]), truth.delta)
    rep = q3_check(ds, post, 100)
    half = ds.n_sections // 2
    idx = {s: k for k, s in enumerate(ds.section_ids)}
    cross = rep.median_p_where(lambda a, b: (idx[a] < half) != (idx[b] < half))
    assert cross < 0.05


def test_q3_skips_sparse_pairs(tmp_path):
    n = 30
    z = [1] * n
    rs = list(range(n)) * 2
    rk = [0] * n + [1 if i < 20 else 2 for i in range(n)]
    rng = np.random.default_rng(0)
    ds = TrialDataset([f"s{i}" for i in range(n)], ["B"] * n, ["H"] * n, ["T"] * n, z,
                      np.zeros(n), np.zeros((n, 1)), ("pretest",), ("a", "b", "c"),
                      rs, rk, rng.integers(0, 2, 2 * n))
    rep = q3_check(ds, pseudo_posterior(np.zeros(n), np.zeros(3)), 100)
    assert ("b", "c", 0) in rep.skipped
    assert set(zip(rep.section_a, rep.section_b)) == {("a", "b"), ("a", "c")}
    rep.write(tmp_path / "q3.csv", tmp_path / "q3.txt")
    assert (tmp_path / "q3.csv").read_text().startswith("section_a,section_b,realized_q3,p_value")
    assert "skipped b,c: 0 co-workers" in (tmp_path / "q3.txt").read_text()


def test_q3_preconditions():
    ds, truth = generate(GenConfig(n_blocks=2, seed=1))
    post = pseudo_posterior(truth.eta_T, truth.delta)
    with pytest.raises(ValueError, match="at least 100"):
        q3_check(ds, post, 50)
    with pytest.raises(ValueError, match="exceeds"):
        q3_check(ds, post, 300)
