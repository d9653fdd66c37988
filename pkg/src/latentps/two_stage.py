"""Two-stage multiple-imputation estimator.

Stage 1 is a fitted joint posterior; stage 2 fits, for each of many
posterior draws of the ``eta`` vector, a linear mixed model

    y ~ [block dummies] + X + z + eta + z:eta + (1 | teacher) + (1 | school)

by profiled REML, and the per-draw interaction estimates are pooled.

REML is profiled over the two variance ratios ``lambda = tau^2 / sigma^2``.
With ``L = diag(sqrt(lambda))`` the marginal covariance is
``sigma^2 (I + Z L L Z')`` and every quantity needed reduces, by the
Woodbury identity, to a Cholesky factorization of the small matrix
``I + L Z'Z L`` (one row per teacher and school).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .trial_data import TrialDataset

INTERACTION = "z:eta"
GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


class PoolingError(ValueError):
    pass


def draw_eta_vectors(posterior, n: int, key: str = "eta") -> list[np.ndarray]:
    """``n`` per-student vectors thinned evenly from all retained draws.

    Draws are ordered chain-major; the ``k``-th pick is flat index
    ``floor(k * total / n)``.
    """
    if not posterior.has(key):
        raise KeyError(f"posterior has no {key!r} draws (fit run without persisting them?)")
    flat = posterior.flat(key)
    total = flat.shape[0]
    if not 1 <= n <= total:
        raise ValueError(f"n={n} must lie in 1..{total}")
    idx = eta_draw_indices(total, n)
    return [flat[i].copy() for i in idx]


def eta_draw_indices(total: int, n: int) -> np.ndarray:
    return (np.arange(n) * total) // n


@dataclass
class MixedModelFit:
    names: list[str]
    beta: np.ndarray
    cov: np.ndarray
    sigma2: float
    tau2_teacher: float
    tau2_school: float
    converged: bool
    singular: bool = False
    reml: float = float("nan")

    @property
    def var(self) -> np.ndarray:
        return np.diag(self.cov)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(self.var)

    def coef(self, name: str = INTERACTION) -> float:
        return float(self.beta[self.names.index(name)])

    def coef_var(self, name: str = INTERACTION) -> float:
        return float(self.cov[self.names.index(name), self.names.index(name)])


def stage2_design(dataset: TrialDataset, eta, *, blocks: bool = True) -> tuple[np.ndarray, list[str]]:
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (dataset.n_students,) or not np.isfinite(eta).all():
        raise ValueError("eta must be a finite value per student")
    z = dataset.z.astype(float)
    cols, names = [], []
    if blocks:
        bi = dataset.block_index
        for b, lab in enumerate(dataset.block_labels):
            cols.append((bi == b).astype(float))
            names.append(f"block[{lab}]")
    else:
        cols.append(np.ones(dataset.n_students))
        names.append("(intercept)")
    for j, nm in enumerate(dataset.covariate_names):
        cols.append(dataset.X[:, j])
        names.append(nm)
    cols += [z, eta, z * eta]
    names += ["z", "eta", INTERACTION]
    return np.column_stack(cols), names


class _Profile:
    """Profiled REML criterion with precomputed cross-products."""

    def __init__(self, X, y, ti, si, n_t, n_s):
        n, p = X.shape
        if np.linalg.matrix_rank(X) < p:
            raise ValueError("stage-2 design matrix is rank deficient")
        self.n, self.p = n, p
        self.nt = n_t
        Z = np.zeros((n, n_t + n_s))
        Z[np.arange(n), ti] = 1.0
        Z[np.arange(n), n_t + si] = 1.0
        self.XtX = X.T @ X
        self.Xty = X.T @ y
        self.yty = float(y @ y)
        self.ZtX = Z.T @ X
        self.Zty = Z.T @ y
        self.ZtZ = Z.T @ Z

    def solve(self, lam_t, lam_s):
        q = len(self.Zty)
        d = np.sqrt(np.concatenate([np.full(self.nt, lam_t), np.full(q - self.nt, lam_s)]))
        M = np.eye(q) + d[:, None] * self.ZtZ * d[None, :]
        cf = cho_factor(M, lower=True)
        logdet_v = 2.0 * np.sum(np.log(np.diag(cf[0])))
        LZtX = d[:, None] * self.ZtX
        LZty = d * self.Zty
        A = self.XtX - LZtX.T @ cho_solve(cf, LZtX)
        b = self.Xty - LZtX.T @ cho_solve(cf, LZty)
        c = self.yty - LZty @ cho_solve(cf, LZty)
        ca = cho_factor(A, lower=True)
        beta = cho_solve(ca, b)
        rss = float(c - b @ beta)
        dof = self.n - self.p
        sigma2 = rss / dof
        logdet_a = 2.0 * np.sum(np.log(np.diag(ca[0])))
        crit = dof * np.log(sigma2) + logdet_v + logdet_a
        return crit, beta, sigma2, ca

    def criterion(self, log_t, log_s):
        return self.solve(_lam(log_t), _lam(log_s))[0]


def _lam(log_lam):
    return 0.0 if log_lam == -np.inf else float(np.exp(log_lam))


def _golden(f, lo, hi, tol=1e-4, max_iter=60):
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a < tol:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return (c, fc) if fc < fd else (d, fd)


@dataclass(frozen=True)
class Stage2Options:
    blocks: bool = True
    log_lambda_range: tuple[float, float] = (-10.0, 4.0)
    grid_size: int = 15
    refine_cycles: int = 3


def fit_stage2(dataset: TrialDataset, eta, options: Stage2Options | None = None) -> MixedModelFit:
    """Fit the stage-2 linear mixed model for one ``eta`` vector."""
    opt = options or Stage2Options()
    X, names = stage2_design(dataset, eta, blocks=opt.blocks)
    prof = _Profile(X, dataset.y, dataset.teacher_index, dataset.school_index,
                    len(dataset.teacher_labels), len(dataset.school_labels))
    return _optimize(prof, names, opt)


def _optimize(prof: _Profile, names, opt: Stage2Options) -> MixedModelFit:
    lo, hi = opt.log_lambda_range
    grid = np.concatenate([[-np.inf], np.linspace(lo, hi, opt.grid_size)])
    step = (hi - lo) / (opt.grid_size - 1)
    vals = np.array([[prof.criterion(a, b) for b in grid] for a in grid])
    i, j = np.unravel_index(np.argmin(vals), vals.shape)
    x = [grid[i], grid[j]]
    best = vals[i, j]
    for _ in range(opt.refine_cycles):
        for k in range(2):
            if x[k] == -np.inf:
                # exact zero stays exact
                continue
            a, b = max(lo, x[k] - step), min(hi, x[k] + step)

            def f(v, k=k):
                y = list(x)
                y[k] = v
                return prof.criterion(*y)

            v, fv = _golden(f, a, b)
            if fv < best:
                x[k], best = v, fv
    crit, beta, sigma2, ca = prof.solve(_lam(x[0]), _lam(x[1]))
    converged = all(v < hi - 1e-3 for v in x)
    singular = any(v == -np.inf or v <= lo + 1e-3 for v in x)
    cov = sigma2 * cho_solve(ca, np.eye(len(beta)))
    return MixedModelFit(
        names=list(names), beta=beta, cov=cov, sigma2=sigma2,
        tau2_teacher=_lam(x[0]) * sigma2, tau2_school=_lam(x[1]) * sigma2,
        converged=converged, singular=singular, reml=float(crit),
    )


@dataclass
class PooledEstimate:
    """Pooled interaction estimate across imputations.

    ``scaled_sd`` is ``sqrt(within + between)``: the spread of the
    per-draw estimates once the average sampling variance is added back,
    which is the quantity comparable with the joint posterior SD of ``b1``.
    ``total_var`` is the usual multiple-imputation total
    ``within + (1 + 1/m) between``.
    """

    mean: float
    between_var: float
    within_var: float
    n_fits: int
    n_dropped: int = 0
    estimates: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def total_var(self) -> float:
        return self.within_var + (1.0 + 1.0 / self.n_fits) * self.between_var

    @property
    def scaled_sd(self) -> float:
        return float(np.sqrt(self.within_var + self.between_var))

    def scaled_draws(self) -> np.ndarray:
        """Per-draw estimates rescaled about their mean to have SD ``scaled_sd``."""
        if self.between_var == 0:
            return np.full_like(self.estimates, self.mean)
        k = self.scaled_sd / np.sqrt(self.between_var)
        return self.mean + k * (self.estimates - self.mean)

    def to_text(self) -> str:
        return (
            f"stage-2 fits pooled: {self.n_fits} (dropped {self.n_dropped} non-converged)\n"
            f"interaction mean: {self.mean:.6f}\n"
            f"between-draw variance: {self.between_var:.6g}\n"
            f"mean within-fit variance: {self.within_var:.6g}\n"
            f"total variance: {self.total_var:.6g}\n"
            f"scaled sd: {self.scaled_sd:.6f}\n"
        )


def pool(fits, name: str = INTERACTION) -> PooledEstimate:
    """Pool converged stage-2 fits (order-invariant)."""
    ok = [f for f in fits if f.converged]
    if len(ok) < 2:
        raise PoolingError(f"need at least 2 converged fits, got {len(ok)}")
    est = np.array([f.coef(name) for f in ok])
    w = np.array([f.coef_var(name) for f in ok])
    return PooledEstimate(
        mean=float(np.mean(est)), between_var=float(np.var(est, ddof=1)),
        within_var=float(np.mean(w)), n_fits=len(ok), n_dropped=len(fits) - len(ok),
        estimates=est,
    )


def run_two_stage(dataset: TrialDataset, posterior, n_draws: int = 200,
                  options: Stage2Options | None = None) -> tuple[list[MixedModelFit], PooledEstimate]:
    """Stage 2 over ``n_draws`` thinned ``eta`` vectors, then pool."""
    etas = draw_eta_vectors(posterior, n_draws)
    fits = [fit_stage2(dataset, e, options) for e in etas]
    return fits, pool(fits)


def write_fits_csv(fits, path, name: str = INTERACTION) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("draw,estimate,variance,sigma2,tau2_teacher,tau2_school,converged,singular\n")
        for k, f in enumerate(fits):
            fh.write(f"{k},{f.coef(name)!r},{f.coef_var(name)!r},{f.sigma2!r},{f.tau2_teacher!r},"
                     f"{f.tau2_school!r},{int(f.converged)},{int(f.singular)}\n")
