"""Item-response likelihoods over section-mastery records.

Sections play the role of items and mastery the role of a correct response.
Three logistic families are supported:

* ``rasch``: ``P(m=1) = expit(eta - delta)``
* ``2pl``:   ``P(m=1) = expit(disc * (eta - delta))``
* ``3pl``:   ``P(m=1) = guess + (1 - guess) * expit(disc * (eta - delta))``

Log-likelihood terms use the softplus (log1p-exp) form so that large
``|eta - delta|`` neither overflows nor loses precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

FAMILIES = ("rasch", "2pl", "3pl")
LOG_2PI = float(np.log(2.0 * np.pi))


def softplus(u):
    """``log(1 + exp(u))`` without overflow."""
    return np.maximum(u, 0.0) + np.log1p(np.exp(-np.abs(u)))


@dataclass(frozen=True)
class MeasurementParams:
    delta: np.ndarray
    disc: np.ndarray | None = None
    guess: np.ndarray | None = None
    family: str = "rasch"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown measurement family {self.family!r}")
        delta = np.asarray(self.delta, dtype=float)
        k = delta.shape
        disc = np.ones(k) if self.disc is None or self.family == "rasch" else np.asarray(self.disc, float)
        guess = np.zeros(k) if self.guess is None or self.family != "3pl" else np.asarray(self.guess, float)
        if disc.shape != k or guess.shape != k:
            raise ValueError("one disc/guess value per section is required")
        if (disc <= 0).any():
            raise ValueError("discriminations must be positive")
        if ((guess < 0) | (guess >= 1)).any():
            raise ValueError("guessing parameters must lie in [0, 1)")
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "disc", disc)
        object.__setattr__(self, "guess", guess)


@dataclass(frozen=True)
class LatentRegressionParams:
    beta_M: np.ndarray
    teacher_fx: np.ndarray
    school_fx: np.ndarray
    sigma_M: float
    sd_teacher_M: float
    sd_school_M: float
    intercept: float = 0.0

    def __post_init__(self):
        for name in ("sigma_M", "sd_teacher_M", "sd_school_M"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")


def mastery_prob(eta, delta, disc=1.0, guess=0.0):
    """Probability of mastering a worked section.

    Broadcasts over array arguments. Strictly increasing in ``eta`` and
    decreasing in ``delta`` whenever ``disc > 0`` and ``guess < 1``.
    """
    p = expit(np.multiply(disc, np.subtract(eta, delta)))
    if np.any(guess):
        p = guess + (1.0 - np.asarray(guess)) * p
    return p


def record_loglik_terms(u, mastered, guess=None):
    """Per-record log-likelihood given the logit-scale index ``u``.

    With ``guess`` (3PL) the lower asymptote enters on the probability scale.
    """
    if guess is None:
        return mastered * u - softplus(u)
    with np.errstate(divide="ignore"):
        log_g = np.log(guess)
    log_1mg = np.log1p(-guess)
    log_p = np.logaddexp(log_g, log_1mg - softplus(-u))
    log_q = log_1mg - softplus(u)
    return np.where(mastered == 1, log_p, log_q)


def _records(records):
    if hasattr(records, "rec_student"):
        return records.rec_student, records.rec_section, records.rec_mastered
    s, k, m = records
    return np.asarray(s, dtype=np.intp), np.asarray(k, dtype=np.intp), np.asarray(m)


def mastery_loglik(records, eta, params: MeasurementParams) -> float:
    """Log-likelihood of mastery records.

    Args:
        records: a :class:`~latentps.trial_data.TrialDataset` or a tuple of
            ``(student_index, section_index, mastered)`` arrays.
        eta: per-student latent mastery propensity, indexed like the records'
            student indices.
        params: section parameters.

    Students without records contribute nothing.
    """
    s, k, m = _records(records)
    if len(s) == 0:
        return 0.0
    eta = np.asarray(eta, dtype=float)
    u = params.disc[k] * (eta[s] - params.delta[k])
    guess = params.guess[k] if params.family == "3pl" else None
    return float(np.sum(record_loglik_terms(u, m, guess)))


def normal_logpdf(x, mean, sd):
    return -0.5 * LOG_2PI - np.log(sd) - 0.5 * ((x - mean) / sd) ** 2


def latent_regression_logdensity(eta, X, params: LatentRegressionParams,
                                 teacher_index, school_index) -> float:
    """Log-density of latent mastery under the normal latent regression.

    ``eta_i ~ N(intercept + x_i beta_M + teacher_fx[t_i] + school_fx[s_i], sigma_M)``,
    plus the normal log-densities of the random intercepts given their SDs.
    """
    eta = np.asarray(eta, dtype=float)
    X = np.asarray(X, dtype=float).reshape(len(eta), -1)
    tfx = np.asarray(params.teacher_fx, dtype=float)
    sfx = np.asarray(params.school_fx, dtype=float)
    mean = (params.intercept + X @ np.asarray(params.beta_M, dtype=float)
            + tfx[np.asarray(teacher_index)] + sfx[np.asarray(school_index)])
    lp = np.sum(normal_logpdf(eta, mean, params.sigma_M))
    lp += np.sum(normal_logpdf(tfx, 0.0, params.sd_teacher_M))
    lp += np.sum(normal_logpdf(sfx, 0.0, params.sd_school_M))
    return float(lp)


# -- Yen's Q3 posterior predictive check ---------------------------------------

def q3_matrix(resid: np.ndarray, worked: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise residual correlations over students who worked both sections.

    Args:
        resid: students x sections residuals (values at unworked cells ignored).
        worked: students x sections 0/1 mask.

    Returns:
        ``(q3, n_coworkers)``, both sections x sections.
    """
    W = worked.astype(float)
    R0 = np.where(worked, resid, 0.0)
    n = W.T @ W
    S1 = R0.T @ W
    S2 = (R0 * R0).T @ W
    P = R0.T @ R0
    with np.errstate(invalid="ignore", divide="ignore"):
        ma = S1 / n
        mb = ma.T
        cov = P / n - ma * mb
        va = S2 / n - ma * ma
        vb = va.T
        q3 = cov / np.sqrt(va * vb)
    return q3, n


@dataclass
class Q3Report:
    """Per-pair realized Q3 and posterior predictive p-values."""

    section_a: list[str]
    section_b: list[str]
    realized_q3: np.ndarray
    p_value: np.ndarray
    n_coworkers: np.ndarray
    skipped: list[tuple[str, str, int]]
    n_draws: int

    @property
    def median_p(self) -> float:
        return float(np.nanmedian(self.p_value)) if len(self.p_value) else float("nan")

    def median_p_where(self, keep) -> float:
        """Median p-value over the pairs ``(a, b)`` where ``keep(a, b)`` is true."""
        sel = np.array([bool(keep(a, b)) for a, b in zip(self.section_a, self.section_b)], dtype=bool)
        if not sel.any():
            return float("nan")
        return float(np.nanmedian(self.p_value[sel]))

    def summary_line(self) -> str:
        return (f"Q3 check: {len(self.p_value)} pairs over {self.n_draws} draws, "
                f"{len(self.skipped)} skipped; median posterior predictive p-value "
                f"{self.median_p:.3f}")

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("section_a,section_b,realized_q3,p_value\n")
            for a, b, q, p in zip(self.section_a, self.section_b, self.realized_q3, self.p_value):
                fh.write(f"{a},{b},{q!r},{p!r}\n")

    def write(self, csv_path, summary_path=None) -> None:
        self.to_csv(csv_path)
        if summary_path is not None:
            lines = [self.summary_line()]
            lines += [f"skipped {a},{b}: {n} co-workers" for a, b, n in self.skipped]
            Path(summary_path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _measurement_draw(posterior, flat_index: int) -> tuple[np.ndarray, MeasurementParams]:
    theta = posterior.flat_draws()[flat_index]
    names = posterior.index_map
    eta = posterior.flat("eta")[flat_index]
    delta = names.get(theta, "delta")
    family, disc, guess = "rasch", None, None
    if "log_disc" in names:
        disc = np.exp(names.get(theta, "log_disc"))
        family = "2pl"
    if "logit_guess" in names:
        guess = expit(names.get(theta, "logit_guess"))
        family = "3pl"
    return eta, MeasurementParams(delta, disc, guess, family)


def q3_check(dataset, posterior, n_rep: int = 200, *, min_coworkers: int = 10,
             seed: int = 0) -> Q3Report:
    """Posterior predictive check of local independence with Yen's Q3.

    For each of ``n_rep`` draws spread evenly over the posterior, residuals
    ``m - p_hat`` are formed on the observed mastery data and on a replicate
    dataset simulated from that draw. The pair p-value is the fraction of
    draws in which the replicated ``|Q3|`` is at least the realized ``|Q3|``.
    Section pairs with fewer than ``min_coworkers`` common workers are skipped.

    The posterior's ``eta`` draws must be indexed like ``dataset``'s students.
    """
    if n_rep < 100:
        raise ValueError("n_rep must be at least 100")
    total = posterior.n_chains * posterior.n_draws
    if n_rep > total:
        raise ValueError(f"n_rep={n_rep} exceeds the {total} available draws")
    if not posterior.has("eta") or "delta" not in posterior.index_map:
        raise ValueError("posterior lacks eta or delta draws")
    rng = np.random.default_rng(seed)
    workers = np.unique(dataset.rec_student)
    row = np.full(dataset.n_students, -1, dtype=np.intp)
    row[workers] = np.arange(len(workers))
    ri, ci = row[dataset.rec_student], dataset.rec_section
    K = dataset.n_sections
    worked = np.zeros((len(workers), K), dtype=bool)
    worked[ri, ci] = True
    observed = np.zeros((len(workers), K))
    observed[ri, ci] = dataset.rec_mastered

    picks = np.floor(np.arange(n_rep) * total / n_rep).astype(int)
    _, n_co = q3_matrix(np.zeros_like(observed), worked)
    iu, ju = np.triu_indices(K, k=1)
    keep = n_co[iu, ju] >= min_coworkers
    exceed = np.zeros(keep.sum())
    valid = np.zeros(keep.sum())
    realized_sum = np.zeros(keep.sum())
    for d in picks:
        eta, params = _measurement_draw(posterior, d)
        p = np.zeros_like(observed)
        p[ri, ci] = mastery_prob(eta[dataset.rec_student], params.delta[ci], params.disc[ci],
                                 params.guess[ci])
        rep = np.zeros_like(observed)
        rep[ri, ci] = rng.random(len(ri)) < p[ri, ci]
        q_obs, _ = q3_matrix(observed - p, worked)
        q_rep, _ = q3_matrix(rep - p, worked)
        qo, qr = q_obs[iu, ju][keep], q_rep[iu, ju][keep]
        ok = np.isfinite(qo) & np.isfinite(qr)
        exceed += ok & (np.abs(qr) >= np.abs(qo))
        valid += ok
        realized_sum += np.where(np.isfinite(qo), qo, 0.0)
    secs = dataset.section_ids
    with np.errstate(invalid="ignore", divide="ignore"):
        pval = exceed / valid
    skipped = [(secs[i], secs[j], int(n_co[i, j])) for i, j, k in zip(iu, ju, keep) if not k]
    return Q3Report(
        section_a=[secs[i] for i in iu[keep]],
        section_b=[secs[j] for j in ju[keep]],
        realized_q3=realized_sum / len(picks),
        p_value=pval,
        n_coworkers=n_co[iu, ju][keep].astype(int),
        skipped=skipped,
        n_draws=len(picks),
    )
