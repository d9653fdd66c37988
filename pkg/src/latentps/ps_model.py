"""Joint log posterior for latent-variable principal stratification.

Three variants share one code path:

``latent``
    Mastery records follow an IRT model driven by a latent propensity
    ``eta`` for every student; ``eta`` follows a normal latent regression on
    covariates with teacher and school intercepts; the outcome is normal with
    mean ``block + x beta_Y + a eta + z (b0 + b1 eta) + teacher + school`` and
    an arm-specific residual SD.
``mbar``
    The latent ``eta`` is replaced by the observed mastered fraction for
    treated students and by a latent value (same normal regression, with an
    intercept) for control students. Treated students without records are
    excluded.
``measurement``
    Mastery IRT model plus latent regression only, no outcome model. Used to
    estimate ``eta`` from treated students alone when building placebo data.

The integral over ``eta`` is handled by sampling ``eta`` as a parameter.
Positive parameters live on the log scale, guessing parameters on the logit
scale; :class:`IndexMap` names every coordinate of the flat vector.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import betaln, expit

from .irt_measurement import FAMILIES, LOG_2PI, record_loglik_terms, softplus
from .trial_data import TrialDataset, mbar_vector

VARIANTS = ("latent", "mbar", "measurement")
SEGMENT_TERMS = ("mastery", "latent_regression", "outcome", "outcome_effects", "prior", "jacobian")


class NonFiniteError(FloatingPointError):
    def __init__(self, segment: str, value=None):
        self.segment = segment
        super().__init__(f"non-finite log density in segment {segment!r}" +
                         ("" if value is None else f" ({value})"))


# -- index map ---------------------------------------------------------------

@dataclass(frozen=True)
class Segment:
    name: str
    start: int
    size: int
    transform: str = "identity"
    labels: tuple[str, ...] | None = None

    @property
    def slice(self) -> slice:
        return slice(self.start, self.start + self.size)


class IndexMap:
    """Named, contiguous segments of a flat parameter vector."""

    def __init__(self, segments=()):
        self._segs: dict[str, Segment] = {}
        self.dim = 0
        for spec in segments:
            self.add(*spec)

    def add(self, name: str, size: int, transform: str = "identity", labels=None) -> Segment:
        if name in self._segs:
            raise ValueError(f"duplicate segment {name!r}")
        if labels is not None:
            labels = tuple(str(x) for x in labels)
            if len(labels) != size:
                raise ValueError(f"segment {name!r}: {len(labels)} labels for size {size}")
        seg = Segment(name, self.dim, int(size), transform, labels)
        self._segs[name] = seg
        self.dim += int(size)
        return seg

    def __contains__(self, name) -> bool:
        return name in self._segs

    def __iter__(self):
        return iter(self._segs.values())

    def __getitem__(self, name) -> Segment:
        return self._segs[name]

    def __eq__(self, other) -> bool:
        return isinstance(other, IndexMap) and list(self) == list(other)

    def slice(self, name: str) -> slice:
        return self._segs[name].slice

    def get(self, theta, name: str):
        """Segment values from a vector (or trailing axis of an array)."""
        return np.asarray(theta)[..., self._segs[name].slice]

    def names(self) -> list[str]:
        out = []
        for seg in self:
            if seg.size == 1 and seg.labels is None:
                out.append(seg.name)
            else:
                labels = seg.labels or [str(k) for k in range(seg.size)]
                out.extend(f"{seg.name}[{lab}]" for lab in labels)
        return out

    def segment_of(self, index: int) -> str:
        for seg in self:
            if seg.start <= index < seg.start + seg.size:
                return seg.name
        raise IndexError(index)

    def resolve(self, key) -> np.ndarray:
        """Flat indices for a segment name, a flat element name, or a range."""
        if isinstance(key, (range, slice)):
            idx = np.arange(self.dim)[key]
            return idx
        if isinstance(key, (int, np.integer)):
            if not 0 <= key < self.dim:
                raise KeyError(f"index {key} outside 0..{self.dim - 1}")
            return np.array([key])
        if key in self._segs:
            return np.arange(self._segs[key].start, self._segs[key].start + self._segs[key].size)
        names = self._name_lookup()
        if key in names:
            return np.array([names[key]])
        raise KeyError(f"unknown parameter {key!r}")

    def _name_lookup(self) -> dict[str, int]:
        if not hasattr(self, "_lookup") or len(self._lookup) != self.dim:
            self._lookup = {n: k for k, n in enumerate(self.names())}
        return self._lookup

    def to_dict(self) -> list[dict]:
        return [
            {"name": s.name, "size": s.size, "transform": s.transform,
             "labels": None if s.labels is None else list(s.labels)}
            for s in self
        ]

    @classmethod
    def from_dict(cls, items) -> IndexMap:
        return cls((d["name"], d["size"], d["transform"], d["labels"]) for d in items)


# -- specification -------------------------------------------------------------

@dataclass(frozen=True)
class PriorSpec:
    """Prior settings.

    ``scale_prior="uniform"`` is improper-flat on every SD (only the log-scale
    Jacobian enters); ``"half-normal"`` puts a half-normal(``scale_sd``) prior
    on each SD instead.
    """

    coef_sd: float = 2.0
    effect_sd: float = 1.0
    scale_prior: str = "uniform"
    scale_sd: float = 2.5
    disc_log_sd: float = 0.5
    guess_alpha: float = 2.0
    guess_beta: float = 8.0

    def __post_init__(self):
        if self.scale_prior not in ("uniform", "half-normal"):
            raise ValueError(f"scale_prior must be 'uniform' or 'half-normal', got {self.scale_prior!r}")
        for name in ("coef_sd", "effect_sd", "scale_sd", "disc_log_sd", "guess_alpha", "guess_beta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class ModelSpec:
    variant: str = "latent"
    family: str = "rasch"
    priors: PriorSpec = field(default_factory=PriorSpec)
    standardize_covariates: bool = True
    standardize_y: bool = True
    pretest_square: bool = True
    parameterization: str = "noncentered"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown model variant {self.variant!r}")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown measurement family {self.family!r}")
        if self.parameterization not in ("noncentered", "centered"):
            raise ValueError(f"unknown parameterization {self.parameterization!r}")
        if isinstance(self.priors, dict):
            object.__setattr__(self, "priors", PriorSpec(**self.priors))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        d = dict(d)
        pri = d.pop("priors", {}) or {}
        return cls(priors=PriorSpec(**pri), **d)

    def with_(self, **changes) -> ModelSpec:
        return replace(self, **changes)


# -- model -------------------------------------------------------------------

def _normal_lp(x, sd):
    n = np.size(x)
    return -0.5 * LOG_2PI * n - n * np.log(sd) - 0.5 * float(np.dot(x, x)) / sd ** 2


class PSModel:
    """Log posterior and gradient over the unconstrained parameter vector.

    Args:
        dataset: prepared (e.g. standardized) trial data.
        spec: model variant, measurement family and priors.

    The instance is immutable after construction; evaluation is pure, so
    one instance may serve several chains.
    """

    def __init__(self, dataset: TrialDataset, spec: ModelSpec | None = None):
        self.spec = spec or ModelSpec()
        variant = self.spec.variant
        if variant == "mbar":
            keep = (dataset.z == 0) | dataset.has_mastery_logs
            if not keep.all():
                dataset = dataset.subset_students(keep)
        elif variant == "measurement":
            if (dataset.z == 0).any():
                raise ValueError("measurement variant expects treated students only")
        self.dataset = dataset
        d = dataset
        self.N = d.n_students
        self.K = d.n_sections
        self.X = np.ascontiguousarray(d.X)
        self.p = d.n_covariates
        self.bi = d.block_index
        self.ti = d.teacher_index
        self.si = d.school_index
        self.B = len(d.block_labels)
        self.T = len(d.teacher_labels)
        self.S = len(d.school_labels)
        self.z = d.z.astype(np.intp)
        self.zf = d.z.astype(float)
        self.y = d.y
        self.rs = d.rec_student
        self.rk = d.rec_section
        self.rm = d.rec_mastered.astype(float)
        if variant == "mbar":
            mb = mbar_vector(d)
            self.latent_idx = np.flatnonzero(d.z == 0)
            self.s_obs = np.where(np.isnan(mb), 0.0, mb)
        else:
            self.latent_idx = np.arange(self.N)
        self.obs_idx = np.setdiff1d(np.arange(self.N), self.latent_idx)
        self._L = slice(None) if len(self.obs_idx) == 0 else self.latent_idx
        self.nc = self.spec.parameterization == "noncentered"
        self.index_map = self._build_index_map()
        self.dim = self.index_map.dim
        self._sl = {seg.name: seg.slice for seg in self.index_map}
        self.strat_segment = list(self.index_map)[-1].name
        self._strat_sl = self._sl[self.strat_segment]

    # -- layout -----------------------------------------------------------
    def _build_index_map(self) -> IndexMap:
        d, spec = self.dataset, self.spec
        nc = spec.parameterization == "noncentered"
        im = IndexMap()
        cov = d.covariate_names
        if spec.variant != "measurement":
            im.add("beta_Y", self.p, labels=cov)
            im.add("block_Y", self.B, labels=d.block_labels)
            im.add("a", 1)
            im.add("b0", 1)
            im.add("b1", 1)
            im.add("log_sd_teacher_Y", 1, "log")
            im.add("log_sd_school_Y", 1, "log")
            im.add("teacher_Y_z" if nc else "teacher_Y", self.T, labels=d.teacher_labels)
            im.add("school_Y_z" if nc else "school_Y", self.S, labels=d.school_labels)
            im.add("log_sigma_Y", 2, "log", labels=("control", "treated"))
        if spec.variant != "mbar":
            im.add("delta", self.K, labels=d.section_ids)
            if spec.family in ("2pl", "3pl"):
                im.add("log_disc", self.K, "log", labels=d.section_ids)
            if spec.family == "3pl":
                im.add("logit_guess", self.K, "logit", labels=d.section_ids)
        im.add("beta_M", self.p, labels=cov)
        if spec.variant == "mbar":
            im.add("alpha_M", 1)
        im.add("log_sd_teacher_M", 1, "log")
        im.add("log_sd_school_M", 1, "log")
        im.add("teacher_M_z" if nc else "teacher_M", self.T, labels=d.teacher_labels)
        im.add("school_M_z" if nc else "school_M", self.S, labels=d.school_labels)
        im.add("log_sigma_M", 1, "log")
        if spec.variant == "mbar":
            im.add("mbar_latent_z" if nc else "mbar_latent", len(self.latent_idx),
                   labels=d.student_ids[self.latent_idx])
        else:
            im.add("eta_z" if nc else "eta", self.N, labels=d.student_ids)
        return im

    def _re_values(self, theta, base: str) -> np.ndarray:
        if self.nc:
            sd = np.exp(theta[..., self._sl[f"log_sd_{base}"]])
            return sd * theta[..., self._sl[f"{base}_z"]]
        return theta[..., self._sl[base]]

    def lr_mean(self, theta) -> np.ndarray:
        """Latent-regression mean of the stratifier for every student.

        Accepts a vector or an array whose trailing axis is the parameter vector.
        """
        theta = np.asarray(theta, dtype=float)
        mu = (theta[..., self._sl["beta_M"]] @ self.X.T
              + self._re_values(theta, "teacher_M")[..., self.ti]
              + self._re_values(theta, "school_M")[..., self.si])
        if self.spec.variant == "mbar":
            mu = mu + theta[..., self._sl["alpha_M"]]
        return mu

    def _stratifier_from(self, raw, mu, sig_m) -> np.ndarray:
        if self.spec.variant == "mbar":
            s = np.broadcast_to(self.s_obs, np.shape(mu)).copy()
            lat = mu[..., self.latent_idx] + sig_m * raw if self.nc else raw
            s[..., self.latent_idx] = lat
            return s
        return mu + sig_m * raw if self.nc else raw

    def stratifier(self, theta) -> np.ndarray:
        """Per-student stratifying variable (``eta``, or observed/latent mbar).

        Vectorized over leading axes of ``theta``.
        """
        theta = np.asarray(theta, dtype=float)
        sig_m = np.exp(theta[..., self._sl["log_sigma_M"]])
        return self._stratifier_from(theta[..., self._strat_sl], self.lr_mean(theta), sig_m)

    # -- evaluation ----------------------------------------------------------
    def _scale_terms(self, v, g, sl, terms):
        """Prior and Jacobian for SD parameters stored as ``v = log(sd)``."""
        pri = self.spec.priors
        if "jacobian" in terms:
            terms["jacobian"] += float(np.sum(v))
            if g is not None:
                g[sl] += 1.0
        if pri.scale_prior == "half-normal" and "prior" in terms:
            sd = np.exp(v)
            terms["prior"] += float(np.sum(np.log(2.0) - 0.5 * LOG_2PI - np.log(pri.scale_sd)
                                           - 0.5 * (sd / pri.scale_sd) ** 2))
            if g is not None:
                g[sl] -= (sd / pri.scale_sd) ** 2

    def _intercepts(self, theta, g, base, idx, n_groups, terms, term):
        """Random intercepts for one level.

        Returns the intercept values and a closure that, given d(lp)/d(mean)
        per student, finishes the intercept and SD gradients.
        """
        sl_sd = self._sl[f"log_sd_{base}"]
        log_sd = theta[sl_sd][0]
        sd = np.exp(log_sd)
        if self.spec.parameterization == "noncentered":
            sl = self._sl[f"{base}_z"]
            zz = theta[sl]
            fx = sd * zz
            if term in terms:
                terms[term] += _normal_lp(zz, 1.0)
        else:
            sl = self._sl[base]
            fx = theta[sl]
            zz = None
            if term in terms:
                terms[term] += _normal_lp(fx, sd)
        self._scale_terms(theta[sl_sd], g, sl_sd, terms)

        def finish(e):
            if g is None:
                return
            ge = np.bincount(idx, weights=e, minlength=n_groups) if e is not None else 0.0
            if self.spec.parameterization == "noncentered":
                if term in terms:
                    g[sl] -= zz
                if e is not None:
                    g[sl] += sd * ge
                    g[sl_sd] += sd * float(np.dot(ge, zz))
            else:
                if term in terms:
                    g[sl] -= fx / sd ** 2
                    g[sl_sd] += -len(fx) + float(np.sum(fx ** 2)) / sd ** 2
                if e is not None:
                    g[sl] += ge

        return fx, finish

    def evaluate(self, theta, grad: bool = True, terms=SEGMENT_TERMS):
        """Return ``(terms_dict, gradient_or_None)`` for the selected terms."""
        theta = np.asarray(theta, dtype=float)
        spec, pri, sl = self.spec, self.spec.priors, self._sl
        T = {t: 0.0 for t in terms}
        g = np.zeros(self.dim) if grad else None
        LR = "latent_regression"

        # latent-regression mean, then the stratifier it implies
        bM = theta[sl["beta_M"]]
        tM, fin_tM = self._intercepts(theta, g, "teacher_M", self.ti, self.T, T, LR)
        sM, fin_sM = self._intercepts(theta, g, "school_M", self.si, self.S, T, LR)
        mu = self.X @ bM + tM[self.ti] + sM[self.si]
        if spec.variant == "mbar":
            mu = mu + theta[sl["alpha_M"]][0]
        sl_sig = sl["log_sigma_M"]
        log_sig_m = theta[sl_sig][0]
        sig_m = np.exp(log_sig_m)
        self._scale_terms(theta[sl_sig], g, sl_sig, T)
        raw = theta[self._strat_sl]
        s = self._stratifier_from(raw, mu, sig_m)
        gs = np.zeros(self.N) if grad else None

        # (i) mastery measurement model
        if spec.variant != "mbar":
            self._mastery(theta, s, g, gs, T)

        # (iii) outcome model
        if spec.variant != "measurement":
            self._outcome(theta, s, g, gs, T)

        # (ii) latent-regression density; chain rule from s to its parents
        L, O = self._L, self.obs_idx
        dmu = np.zeros(self.N) if grad else None
        if self.nc:
            if LR in T:
                T[LR] += _normal_lp(raw, 1.0)
                if len(O):
                    res = s[O] - mu[O]
                    ss = float(np.dot(res, res))
                    T[LR] += -0.5 * LOG_2PI * len(O) - len(O) * log_sig_m - 0.5 * ss / sig_m ** 2
            if grad:
                gL = gs[L]
                g[self._strat_sl] += sig_m * gL
                dmu[L] += gL
                g[sl_sig] += sig_m * float(np.dot(gL, raw))
                if LR in T:
                    g[self._strat_sl] -= raw
                    if len(O):
                        dmu[O] += res / sig_m ** 2
                        g[sl_sig] += -len(O) + ss / sig_m ** 2
        else:
            if LR in T:
                res = s - mu
                ss = float(np.dot(res, res))
                T[LR] += -0.5 * LOG_2PI * self.N - self.N * log_sig_m - 0.5 * ss / sig_m ** 2
            if grad:
                g[self._strat_sl] += gs[L]
                if LR in T:
                    f = res / sig_m ** 2
                    g[self._strat_sl] -= f[L]
                    dmu += f
                    g[sl_sig] += -self.N + ss / sig_m ** 2
        if grad:
            g[sl["beta_M"]] += self.X.T @ dmu
            if spec.variant == "mbar":
                g[sl["alpha_M"]] += dmu.sum()
            fin_tM(dmu)
            fin_sM(dmu)
        if "prior" in T:
            T["prior"] += _normal_lp(bM, pri.coef_sd)
            if grad:
                g[sl["beta_M"]] -= bM / pri.coef_sd ** 2
            if spec.variant == "mbar":
                am = theta[sl["alpha_M"]]
                T["prior"] += _normal_lp(am, pri.coef_sd)
                if grad:
                    g[sl["alpha_M"]] -= am / pri.coef_sd ** 2
        return T, g

    def _mastery(self, theta, s, g, gs, T):
        spec, pri, sl = self.spec, self.spec.priors, self._sl
        grad = g is not None
        delta = theta[sl["delta"]]
        if "mastery" in T and len(self.rs):
            diff = s[self.rs] - delta[self.rk]
            if spec.family == "rasch":
                u, disc_r = diff, None
            else:
                disc = np.exp(theta[sl["log_disc"]])
                disc_r = disc[self.rk]
                u = disc_r * diff
            m = self.rm
            if spec.family == "3pl":
                lg = theta[sl["logit_guess"]][self.rk]
                gr = expit(lg)
                T["mastery"] += float(np.sum(record_loglik_terms(u, m, gr)))
                if grad:
                    # ratios to p in log space: both sides underflow together in the tails
                    log_g, log_1mg = -softplus(-lg), -softplus(lg)
                    log_sig = -softplus(-u)
                    log_p = np.logaddexp(log_g, log_1mg + log_sig)
                    sig, sig_c = expit(u), expit(-u)
                    gu = np.where(m == 1, sig_c * np.exp(log_1mg + log_sig - log_p), -sig)
                    # derivative wrt the guess logit
                    dlg = np.where(m == 1, (1.0 - gr) * sig_c * np.exp(log_g - log_p), -gr)
                    g[sl["logit_guess"]] += np.bincount(self.rk, weights=dlg, minlength=self.K)
            else:
                ex = np.exp(-np.abs(u))
                T["mastery"] += float(np.dot(m, u) - np.sum(np.maximum(u, 0.0)) - np.sum(np.log1p(ex)))
                if grad:
                    inv = 1.0 / (1.0 + ex)
                    gu = m - np.where(u >= 0, inv, ex * inv)
            if grad:
                gdiff = gu if disc_r is None else gu * disc_r
                gs += np.bincount(self.rs, weights=gdiff, minlength=self.N)
                g[sl["delta"]] -= np.bincount(self.rk, weights=gdiff, minlength=self.K)
                if disc_r is not None:
                    g[sl["log_disc"]] += np.bincount(self.rk, weights=gu * u, minlength=self.K)
        if spec.family in ("2pl", "3pl") and "prior" in T:
            ld = theta[sl["log_disc"]]
            T["prior"] += _normal_lp(ld, pri.disc_log_sd)
            if grad:
                g[sl["log_disc"]] -= ld / pri.disc_log_sd ** 2
        if spec.family == "3pl":
            lg = theta[sl["logit_guess"]]
            gsec = expit(lg)
            log_g, log_1mg = -softplus(-lg), -softplus(lg)
            a_, b_ = pri.guess_alpha, pri.guess_beta
            if "prior" in T:
                T["prior"] += float(np.sum((a_ - 1) * log_g + (b_ - 1) * log_1mg)) - len(lg) * betaln(a_, b_)
            if "jacobian" in T:
                T["jacobian"] += float(np.sum(log_g + log_1mg))
            if grad:
                if "prior" in T:
                    g[sl["logit_guess"]] += (a_ - 1) * (1 - gsec) - (b_ - 1) * gsec
                if "jacobian" in T:
                    g[sl["logit_guess"]] += 1 - 2 * gsec

    def _outcome(self, theta, s, g, gs, T):
        sl, pri = self._sl, self.spec.priors
        grad = g is not None
        bY = theta[sl["beta_Y"]]
        blk = theta[sl["block_Y"]]
        a = theta[sl["a"]][0]
        b0 = theta[sl["b0"]][0]
        b1 = theta[sl["b1"]][0]
        tY, fin_t = self._intercepts(theta, g, "teacher_Y", self.ti, self.T, T, "outcome_effects")
        sY, fin_s = self._intercepts(theta, g, "school_Y", self.si, self.S, T, "outcome_effects")
        log_sig = theta[sl["log_sigma_Y"]]
        self._scale_terms(log_sig, g, sl["log_sigma_Y"], T)
        e = None
        if "outcome" in T:
            r = self.y - self.outcome_mean(s, bY, blk, a, b0, b1, tY, sY)
            T["outcome"] += self._outcome_ll(r, log_sig)
            if grad:
                sig2 = np.exp(2.0 * log_sig)[self.z]
                e = r / sig2
                g[sl["beta_Y"]] += self.X.T @ e
                g[sl["block_Y"]] += np.bincount(self.bi, weights=e, minlength=self.B)
                g[sl["a"]] += float(np.dot(e, s))
                g[sl["b0"]] += float(np.dot(e, self.zf))
                g[sl["b1"]] += float(np.dot(e * self.zf, s))
                g[sl["log_sigma_Y"]] += np.bincount(self.z, weights=r * r / sig2 - 1.0, minlength=2)
                gs += e * (a + self.zf * b1)
        if grad:
            fin_t(e)
            fin_s(e)
        if "prior" in T:
            T["prior"] += _normal_lp(bY, pri.coef_sd) + _normal_lp(blk, pri.coef_sd)
            T["prior"] += _normal_lp(np.array([a, b0, b1]), pri.effect_sd)
            if grad:
                g[sl["beta_Y"]] -= bY / pri.coef_sd ** 2
                g[sl["block_Y"]] -= blk / pri.coef_sd ** 2
                g[sl["a"]] -= a / pri.effect_sd ** 2
                g[sl["b0"]] -= b0 / pri.effect_sd ** 2
                g[sl["b1"]] -= b1 / pri.effect_sd ** 2

    def outcome_mean(self, s, bY, blk, a, b0, b1, tY, sY):
        return (blk[self.bi] + self.X @ bY + a * s + self.zf * (b0 + b1 * s)
                + tY[self.ti] + sY[self.si])

    def outcome_loglik(self, s, bY, blk, a, b0, b1, tY, sY, log_sig) -> float:
        """Normal outcome log-likelihood with arm-specific residual SD."""
        return self._outcome_ll(self.y - self.outcome_mean(s, bY, blk, a, b0, b1, tY, sY), log_sig)

    def _outcome_ll(self, r, log_sig) -> float:
        n1 = float(self.zf.sum())
        w = np.exp(-2.0 * log_sig)[self.z]
        return float(-0.5 * LOG_2PI * self.N - (self.N - n1) * log_sig[0] - n1 * log_sig[1]
                     - 0.5 * np.dot(r * r, w))

    # -- public interface -------------------------------------------------------
    def segments(self, theta) -> dict[str, float]:
        return self.evaluate(theta, grad=False)[0]

    def log_posterior(self, theta) -> float:
        terms = self.segments(theta)
        for name, v in terms.items():
            if not np.isfinite(v):
                raise NonFiniteError(name, v)
        return float(sum(terms.values()))

    def grad_log_posterior(self, theta) -> np.ndarray:
        _, g = self.evaluate(theta)
        bad = np.flatnonzero(~np.isfinite(g))
        if len(bad):
            raise NonFiniteError(self.index_map.segment_of(int(bad[0])))
        return g

    def segment_grad(self, theta, term: str) -> np.ndarray:
        """Gradient of a single log-density term."""
        return self.evaluate(theta, terms=(term,))[1]

    def logp_and_grad(self, theta) -> tuple[float, np.ndarray]:
        """Fast path for samplers: no finiteness checks."""
        terms, g = self.evaluate(theta)
        return float(sum(terms.values())), g

    def __call__(self, theta):
        return self.logp_and_grad(theta)

    # -- initialization and transforms --------------------------------------------
    def initial_point(self, rng: np.random.Generator, jitter: float = 1.0) -> np.ndarray:
        """Uniform(-jitter, jitter) start with the stratifier at its regression mean."""
        theta = rng.uniform(-jitter, jitter, size=self.dim)
        if self.nc:
            theta[self._strat_sl] = 0.0
        else:
            theta[self._strat_sl] = self.lr_mean(theta)[self.latent_idx]
        return theta

    @property
    def stratifier_name(self) -> str:
        return "mbar_latent" if self.spec.variant == "mbar" else "eta"

    def unpack(self, theta) -> dict:
        """Constrained parameter values keyed by natural names.

        Random intercepts and the sampled stratifier are returned on their
        natural (centered) scale whatever the parameterization. Works on a
        single vector or on an array whose trailing axis is the parameter
        vector.
        """
        theta = np.asarray(theta, dtype=float)
        out = {}
        for seg in self.index_map:
            v = theta[..., seg.slice]
            scalar = seg.size == 1 and seg.labels is None
            if seg.transform == "log":
                name = seg.name[4:]
                val = np.exp(v)
            elif seg.transform == "logit":
                name = seg.name[6:]
                val = expit(v)
            else:
                name, val = seg.name, v
            out[name] = val[..., 0] if scalar else val
        if self.nc:
            for base in ("teacher_Y", "school_Y", "teacher_M", "school_M"):
                if f"{base}_z" in out:
                    out[base] = np.asarray(out[f"sd_{base}"])[..., None] * out.pop(f"{base}_z")
            out.pop(self.strat_segment)
            out[self.stratifier_name] = self.stratifier(theta)[..., self.latent_idx]
        return out

    def pack(self, **values) -> np.ndarray:
        """Build an unconstrained vector from (partial) constrained values.

        Unspecified coordinates are zero. Accepts the names produced by
        :meth:`unpack` (``sigma_Y``, ``disc``, ``teacher_Y``, ``eta``, ...).
        """
        theta = np.zeros(self.dim)
        for seg in self.index_map:
            if seg.transform == "log":
                key, fwd = seg.name[4:], np.log
            elif seg.transform == "logit":
                key, fwd = seg.name[6:], (lambda p: np.log(p) - np.log1p(-p))
            else:
                key, fwd = seg.name, (lambda x: x)
            if key in values:
                theta[seg.slice] = fwd(np.broadcast_to(np.asarray(values[key], float), (seg.size,)))
        if self.nc:
            for base in ("teacher_Y", "school_Y", "teacher_M", "school_M"):
                if base in values and f"{base}_z" in self.index_map:
                    sd = np.exp(theta[self._sl[f"log_sd_{base}"]][0])
                    theta[self._sl[f"{base}_z"]] = np.asarray(values[base], float) / sd
            name = self.stratifier_name
            if name in values:
                mu = self.lr_mean(theta)[self.latent_idx]
                sig = np.exp(theta[self._sl["log_sigma_M"]][0])
                theta[self._strat_sl] = (np.asarray(values[name], float) - mu) / sig
        return theta

    def quantities(self, draws: np.ndarray) -> dict[str, np.ndarray]:
        """Constrained quantities for an array ``(..., dim)`` of draws.

        Adds ``stratifier`` (all students) and ``slope_iqr``: ``b1`` times the
        interquartile range of the stratifier across students in the same draw.
        """
        q = self.unpack(draws)
        s = self.stratifier(draws)
        q["stratifier"] = s
        if self.spec.variant != "measurement":
            q["slope_iqr"] = standardized_slope(q["b1"], s)
        return q


def standardized_slope(b1, strat) -> np.ndarray:
    """``b1`` rescaled to per-IQR of the stratifier (type-7 quantiles)."""
    q75, q25 = np.quantile(strat, [0.75, 0.25], axis=-1)
    return np.asarray(b1) * (q75 - q25)


def principal_effect(params, eta):
    """Treatment effect at stratifier value ``eta``: ``b0 + b1 * eta``.

    ``params`` is any mapping with ``b0`` and ``b1`` (scalars or arrays of
    draws, which broadcast against ``eta``).
    """
    return np.asarray(params["b0"]) + np.asarray(params["b1"]) * np.asarray(eta)
