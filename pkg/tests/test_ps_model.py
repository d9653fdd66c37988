from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_fd, rel_err, toy_dataset
from latentps.ps_model import (IndexMap, ModelSpec, NonFiniteError, PriorSpec, PSModel,
                               principal_effect, standardized_slope)
from latentps.trial_data import TrialDataset, mbar_vector, standardize

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)

COMBOS = [
    ("latent", "rasch", "noncentered", "uniform"),
    ("latent", "rasch", "centered", "uniform"),
    ("latent", "2pl", "noncentered", "half-normal"),
    ("latent", "3pl", "noncentered", "uniform"),
    ("latent", "3pl", "centered", "half-normal"),
    ("mbar", "rasch", "noncentered", "uniform"),
    ("mbar", "rasch", "centered", "half-normal"),
    ("measurement", "rasch", "noncentered", "uniform"),
    ("measurement", "3pl", "noncentered", "uniform"),
]


def make(variant="latent", family="rasch", par="noncentered", prior="uniform", ds=None):
    ds = ds if ds is not None else toy_dataset()
    if variant == "measurement":
        ds = ds.subset_students(ds.z == 1)
    spec = ModelSpec(variant=variant, family=family, parameterization=par,
                     priors=PriorSpec(scale_prior=prior))
    return PSModel(ds, spec)


@pytest.mark.parametrize("combo", COMBOS, ids=["-".join(c) for c in COMBOS])
def test_gradient_matches_finite_differences(combo):
    m = make(*combo)
    rng = np.random.default_rng(1)
    for _ in range(10):
        th = rng.normal(size=m.dim)
        g = m.grad_log_posterior(th)
        assert rel_err(central_fd(m.log_posterior, th), g) < 1e-6


@pytest.mark.parametrize("term", ["mastery", "latent_regression", "outcome", "prior", "jacobian"])
def test_segment_gradients(term):
    m = make(family="2pl")
    th = np.random.default_rng(2).normal(size=m.dim)
    f = lambda t: m.segments(t)[term]
    assert rel_err(central_fd(f, th), m.segment_grad(th, term)) < 1e-6


def test_single_student_hand_value():
    ds = TrialDataset(["a"], ["B"], ["H"], ["T"], [0], [0.0], [[0.0]], ("pretest",), (), [], [], [])
    # 12 unit-normal terms at 0 and three N(0, 2) priors at 0; Jacobian 0 at unit scales
    hand = -12 * HALF_LOG_2PI - 3 * math.log(2)
    for par in ("centered", "noncentered"):
        m = PSModel(ds, ModelSpec(parameterization=par))
        assert m.log_posterior(np.zeros(m.dim)) == pytest.approx(hand, abs=1e-12)


def test_rasch_translation_leaves_mastery_unchanged():
    m = make(par="centered")
    th = np.random.default_rng(3).normal(size=m.dim)
    q = m.unpack(th)
    base = m.segments(th)["mastery"]
    shifted = th.copy()
    shifted[m.index_map.slice("delta")] += 1.7
    shifted[m.index_map.slice("eta")] += 1.7
    assert abs(m.segments(shifted)["mastery"] - base) < 1e-10
    assert q["delta"].shape == (3,)


def test_exchangeable_students_without_logs():
    base = toy_dataset()
    n = base.n_students
    # two control students identical in everything
    ds = base.replace(
        student_ids=list(base.student_ids) + ["s6"], block_ids=list(base.block_ids) + ["b1"],
        school_ids=list(base.school_ids) + ["h2"], teacher_ids=list(base.teacher_ids) + ["t3"],
        z=list(base.z) + [0], y=list(base.y) + [base.y[2]], X=np.vstack([base.X, base.X[2]]))
    m = PSModel(ds, ModelSpec(parameterization="centered"))
    th = np.random.default_rng(4).normal(size=m.dim)
    th[m.index_map.slice("b1")] = 0.0
    sl = m.index_map.slice("eta")
    sw = th.copy()
    e = sw[sl].copy()
    e[[2, n]] = e[[n, 2]]
    sw[sl] = e
    assert m.log_posterior(sw) == pytest.approx(m.log_posterior(th), abs=1e-10)


def test_gradient_zero_at_b1_maximizer():
    m = make()
    th = np.random.default_rng(5).normal(size=m.dim)
    j = m.index_map.resolve("b1")[0]
    g0 = m.grad_log_posterior(th)[j]
    th1 = th.copy()
    th1[j] += 1.0
    curv = m.grad_log_posterior(th1)[j] - g0  # exact: log posterior is quadratic in b1
    th[j] -= g0 / curv
    assert abs(m.grad_log_posterior(th)[j]) < 1e-8


@pytest.mark.parametrize("par", ["centered", "noncentered"])
def test_no_logs_no_mastery_gradient(par):
    m = make(par=par)
    th = np.random.default_rng(6).normal(size=m.dim)
    g = m.segment_grad(th, "mastery")
    seg = "eta" if par == "centered" else "eta_z"
    sl = m.index_map.slice(seg)
    no_logs = ~m.dataset.has_mastery_logs
    assert np.all(g[sl][no_logs] == 0.0)
    assert np.any(g[sl][~no_logs] != 0.0)


def test_noncentered_matches_centered_up_to_jacobian():
    ds, _ = standardize(toy_dataset())
    c = PSModel(ds, ModelSpec(parameterization="centered"))
    nc = PSModel(ds, ModelSpec(parameterization="noncentered"))
    rng = np.random.default_rng(7)
    for _ in range(5):
        th_c = rng.normal(size=c.dim)
        q = c.unpack(th_c)
        th_nc = nc.pack(**q)
        for k, v in nc.unpack(th_nc).items():
            assert np.allclose(v, q[k], atol=1e-12), k
        # density of the standardized coordinates picks up log(sd) per group member
        jac = sum(len(q[g]) * math.log(q[f"sd_{g}"]) for g in ("teacher_Y", "school_Y", "teacher_M", "school_M"))
        jac += len(q["eta"]) * math.log(q["sigma_M"])
        assert nc.log_posterior(th_nc) == pytest.approx(c.log_posterior(th_c) + jac, abs=1e-10)


def test_variant_parity_of_outcome_segment():
    # centered coordinates store the stratifier directly, so pinning is exact
    ds, _ = standardize(toy_dataset())
    spec = dict(parameterization="centered")
    lat, mb = PSModel(ds, ModelSpec(**spec)), PSModel(ds, ModelSpec(variant="mbar", **spec))
    rng = np.random.default_rng(8)
    mbar = mbar_vector(ds)
    shared = set(mb.unpack(np.zeros(mb.dim)))
    for _ in range(10):
        q = lat.unpack(rng.normal(size=lat.dim))
        strat = np.where(np.isnan(mbar), rng.normal(size=ds.n_students), mbar)
        q["eta"] = strat
        th_l = lat.pack(**q)
        q_m = {k: v for k, v in q.items() if k in shared}
        q_m["mbar_latent"] = strat[mb.latent_idx]
        th_m = mb.pack(**q_m)
        assert np.array_equal(mb.stratifier(th_m), lat.stratifier(th_l))
        assert lat.segments(th_l)["outcome"] == mb.segments(th_m)["outcome"]


def test_mbar_drops_treated_without_logs():
    base = toy_dataset()
    # make treated student s4 log-free
    keep = base.rec_student != 3
    ds = base.replace(rec_student=base.rec_student[keep], rec_section=base.rec_section[keep],
                      rec_mastered=base.rec_mastered[keep])
    m = PSModel(ds, ModelSpec(variant="mbar"))
    assert "s4" not in list(m.dataset.student_ids)
    assert m.dataset.n_students == 4


def test_measurement_variant_needs_treated_only():
    with pytest.raises(ValueError):
        PSModel(toy_dataset(), ModelSpec(variant="measurement"))


def test_nonfinite_names_segment():
    m = make()
    th = np.zeros(m.dim)
    th[m.index_map.slice("log_sigma_Y")] = -1e6
    with pytest.raises(NonFiniteError) as e:
        m.log_posterior(th)
    assert e.value.segment in ("outcome", "jacobian")


def test_index_map_bijection_and_round_trip():
    for combo in COMBOS:
        m = make(*combo)
        names = m.index_map.names()
        assert len(names) == len(set(names)) == m.dim
        for i, nm in enumerate(names):
            assert list(m.index_map.resolve(nm)) == [i]
        assert IndexMap.from_dict(m.index_map.to_dict()) == m.index_map


def test_spec_validation_and_round_trip():
    spec = ModelSpec(variant="mbar", family="rasch", priors=PriorSpec(coef_sd=3.0))
    assert ModelSpec.from_dict(spec.to_dict()) == spec
    for bad in (dict(variant="x"), dict(family="4pl"), dict(parameterization="weird")):
        with pytest.raises(ValueError):
            ModelSpec(**bad)
    with pytest.raises(ValueError):
        PriorSpec(coef_sd=0)
    with pytest.raises(ValueError):
        PriorSpec(scale_prior="cauchy")


def test_principal_effect_and_slope():
    assert principal_effect({"b0": 0.1, "b1": -0.05}, 2.0) == pytest.approx(0.0)
    assert np.all(principal_effect({"b0": 0.3, "b1": 0.0}, np.linspace(-3, 3, 7)) == 0.3)
    draws = np.array([[0.0, 1.0, 2.0, 3.0, 4.0], [1.0, 1.0, 1.0, 1.0, 9.0]])
    # type-7 IQR of 0..4 is 3 - 1 = 2; of (1,1,1,1,9) is 0
    assert np.allclose(standardized_slope(np.array([0.5, 0.5]), draws), [1.0, 0.0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_unpack_pack_inverse(seed):
    m = make(family="3pl")
    th = np.random.default_rng(seed).normal(size=m.dim)
    assert np.allclose(m.pack(**m.unpack(th)), th, atol=1e-10)


def test_vectorized_quantities():
    m = make()
    draws = np.random.default_rng(9).normal(size=(2, 3, m.dim))
    q = m.quantities(draws)
    assert q["stratifier"].shape == (2, 3, 5)
    single = m.quantities(draws[1, 2])
    assert np.allclose(single["slope_iqr"], q["slope_iqr"][1, 2])
    assert np.allclose(single["sigma_Y"], q["sigma_Y"][1, 2])


@pytest.mark.parametrize("family", ["rasch", "2pl", "3pl"])
def test_gradient_finite_in_the_tails(family):
    m = make(family=family)
    th = np.random.default_rng(10).normal(size=m.dim)
    th[m.index_map.slice("delta")] = 900.0
    if family == "3pl":
        th[m.index_map.slice("logit_guess")] = -800.0  # guess underflows to exactly 0
    lp, g = m.logp_and_grad(th)
    assert np.isfinite(lp) and np.isfinite(g).all()


@pytest.mark.slow
def test_logs_tighten_eta_posterior():
    from latentps.fitting import default_sampler, fit
    from latentps.synth_trial import GenConfig, generate

    ds, _ = generate(GenConfig(n_blocks=4, seed=12))
    r = fit(ds, ModelSpec(), default_sampler(n_chains=2, n_warmup=300, n_draws=300, seed=3))
    sd = r.posterior.get("eta").std(axis=(0, 1))
    n_rec = np.bincount(r.dataset.rec_student, minlength=r.dataset.n_students)
    assert (n_rec >= 20).sum() > 10 and (n_rec == 0).sum() > 10
    assert sd[n_rec >= 20].mean() < sd[n_rec == 0].mean()
