"""Synthetic trials with known ground truth, and placebo datasets.

The generator follows the joint model exactly: a blocked cluster-randomized
hierarchy, a normal latent regression for potential mastery ``eta_T``,
Poisson-many worked sections per treated student, IRT mastery draws, and
normal potential outcomes whose difference is ``b0 + b1 * eta_T``.

Covariates are drawn on their natural scale; the latent regression and the
outcome model act on the *standardized* design produced by
:func:`~latentps.trial_data.standardize`, so true coefficients are directly
comparable with fitted ones. Outcome-side truths are in raw ``y`` units; use
:meth:`SyntheticTruth.fit_units` to rescale them to the fit's pooled-SD units.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .irt_measurement import mastery_prob
from .trial_data import TrialDataset, standardize

PLACEBO_KINDS = ("zero", "random", "linear", "quadratic")


@dataclass(frozen=True)
class GenConfig:
    """Generator settings.

    ``beta_M`` and ``beta_Y`` are indexed by the standardized design columns
    ``(pretest, x1..., bin1..., pretest_sq)``. ``delta=None`` spreads
    difficulties evenly over ``delta_range``; ``block_effects=None`` spreads
    them over ``block_range``. Scale parameters may be zero (noiseless
    limits); negative values are rejected.
    """

    n_blocks: int = 10
    schools_per_block: int = 2
    teachers_per_school: int = 3
    students_per_teacher: int = 15
    n_sections: int = 40
    mean_sections: float = 20.0
    n_normal: int = 1
    n_binary: int = 1
    binary_p: float = 0.5
    beta_M: tuple[float, ...] = (0.8, 0.4, -0.3, 0.0)
    sigma_M: float = 0.6
    sd_teacher_M: float = 0.3
    sd_school_M: float = 0.3
    delta: tuple[float, ...] | None = None
    delta_range: tuple[float, float] = (-2.5, -0.5)
    family: str = "rasch"
    disc: tuple[float, ...] | None = None
    guess: tuple[float, ...] | None = None
    beta_Y: tuple[float, ...] = (0.6, 0.1, 0.1, 0.0)
    block_effects: tuple[float, ...] | None = None
    block_range: tuple[float, float] = (-0.3, 0.3)
    a: float = 0.3
    b0: float = 0.2
    b1: float = -0.1
    sd_teacher_Y: float = 0.2
    sd_school_Y: float = 0.2
    sigma_Y: tuple[float, float] = (0.5, 0.5)
    mastery_logs: bool = True
    two_factor: bool = False
    factor_sd: float = 2.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_blocks", "teachers_per_school", "students_per_teacher", "n_sections"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.schools_per_block < 2:
            raise ValueError("schools_per_block must be at least 2 (one school per arm)")
        if self.mastery_logs and not 0 < self.mean_sections <= self.n_sections:
            raise ValueError(
                f"mean_sections={self.mean_sections} must lie in (0, n_sections={self.n_sections}]")
        if len(self.beta_M) != self.n_design or len(self.beta_Y) != self.n_design:
            raise ValueError(f"beta_M and beta_Y need {self.n_design} entries "
                             f"({', '.join(self.design_names)})")
        for name in ("sigma_M", "sd_teacher_M", "sd_school_M", "sd_teacher_Y", "sd_school_Y", "factor_sd"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if len(self.sigma_Y) != 2 or min(self.sigma_Y) < 0:
            raise ValueError("sigma_Y needs two non-negative entries (control, treated)")
        if self.delta is not None and len(self.delta) != self.n_sections:
            raise ValueError("delta needs one entry per section")
        if self.block_effects is not None and len(self.block_effects) != self.n_blocks:
            raise ValueError("block_effects needs one entry per block")
        if self.family not in ("rasch", "2pl", "3pl"):
            raise ValueError(f"unknown family {self.family!r}")
        if not 0 < self.binary_p < 1:
            raise ValueError("binary_p must lie in (0, 1)")

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return (("pretest",) + tuple(f"x{k + 1}" for k in range(self.n_normal))
                + tuple(f"bin{k + 1}" for k in range(self.n_binary)))

    @property
    def design_names(self) -> tuple[str, ...]:
        return self.covariate_names + ("pretest_sq",)

    @property
    def n_design(self) -> int:
        return len(self.design_names)

    @property
    def n_students(self) -> int:
        return self.n_blocks * self.schools_per_block * self.teachers_per_school * self.students_per_teacher

    def deltas(self) -> np.ndarray:
        if self.delta is not None:
            return np.asarray(self.delta, float)
        return np.linspace(*self.delta_range, self.n_sections)

    def blocks(self) -> np.ndarray:
        if self.block_effects is not None:
            return np.asarray(self.block_effects, float)
        return np.linspace(*self.block_range, self.n_blocks)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> GenConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown generator keys: {', '.join(sorted(unknown))}")
        conv = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**conv)


@dataclass
class SyntheticTruth:
    """Ground truth behind a generated or placebo dataset.

    ``eta_T``, ``Y_T`` and ``Y_C`` are per student in dataset order. For
    placebo data ``tau`` holds the injected per-student effect and
    ``eta_T`` the supplied estimate it was computed from.
    """

    eta_T: np.ndarray
    Y_T: np.ndarray
    Y_C: np.ndarray
    delta: np.ndarray
    config: GenConfig | None = None
    params: dict = field(default_factory=dict)
    placebo: PlaceboSpec | None = None
    tau: np.ndarray | None = None

    def fit_units(self, y_scale: float) -> dict:
        """True parameters with outcome-side entries divided by ``y_scale``."""
        outcome = {"beta_Y", "block_Y", "a", "b0", "b1", "sd_teacher_Y", "sd_school_Y", "sigma_Y"}
        return {k: (np.asarray(v) / y_scale if k in outcome else np.asarray(v))
                for k, v in self.params.items()}

    def write(self, dataset: TrialDataset, path) -> None:
        """Write ``truth.csv`` (student_id, eta_T, Y_T, Y_C)."""
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("student_id,eta_T,Y_T,Y_C\n")
            for sid, e, yt, yc in zip(dataset.student_ids, self.eta_T, self.Y_T, self.Y_C):
                fh.write(f"{sid},{float(e)!r},{float(yt)!r},{float(yc)!r}\n")

    def write_params(self, path) -> None:
        doc = {k: np.asarray(v).tolist() for k, v in self.params.items()}
        if self.config is not None:
            doc = {"config": self.config.to_dict(), "params": doc}
        if self.placebo is not None:
            doc = {"placebo": asdict(self.placebo), "params": doc}
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _zero_truncated_poisson(rng, lam, size):
    n = rng.poisson(lam, size)
    bad = n < 1
    while bad.any():
        n[bad] = rng.poisson(lam, bad.sum())
        bad = n < 1
    return n


def _hierarchy(cfg: GenConfig, rng):
    B, S, T, P = cfg.n_blocks, cfg.schools_per_block, cfg.teachers_per_school, cfg.students_per_teacher
    school_block = np.repeat(np.arange(B), S)
    arm = np.zeros(B * S, dtype=int)
    n_treat = S // 2
    for b in range(B):
        pick = rng.permutation(S)[:n_treat]
        arm[b * S + pick] = 1
    teacher_school = np.repeat(np.arange(B * S), T)
    student_teacher = np.repeat(np.arange(B * S * T), P)
    student_school = teacher_school[student_teacher]
    return school_block, arm, student_teacher, student_school


def generate(config: GenConfig | None = None) -> tuple[TrialDataset, SyntheticTruth]:
    """Draw one synthetic trial. Deterministic given ``config.seed``."""
    cfg = config or GenConfig()
    rng = np.random.default_rng(cfg.seed)
    school_block, arm, st, ss = _hierarchy(cfg, rng)
    n = cfg.n_students
    sb = school_block[ss]
    z = arm[ss]
    n_teachers, n_schools = len(np.unique(st)), len(school_block)

    raw = np.column_stack(
        [rng.standard_normal(n)]
        + [rng.standard_normal(n) for _ in range(cfg.n_normal)]
        + [(rng.random(n) < cfg.binary_p).astype(float) for _ in range(cfg.n_binary)]
    )
    width = len(str(n))
    ids = np.array([f"S{k:0{width}d}" for k in range(n)], dtype=object)
    block_lab = np.array([f"B{b:02d}" for b in sb], dtype=object)
    school_lab = np.array([f"H{s:03d}" for s in ss], dtype=object)
    teacher_lab = np.array([f"T{t:04d}" for t in st], dtype=object)
    sections = tuple(f"sec{k:03d}" for k in range(cfg.n_sections))
    shell = TrialDataset(ids, block_lab, school_lab, teacher_lab, z, np.zeros(n), raw,
                         cfg.covariate_names, sections, [], [], [])
    X = standardize(shell, scale_y=False)[0].X

    # latent regression
    tM = cfg.sd_teacher_M * rng.standard_normal(n_teachers)
    sM = cfg.sd_school_M * rng.standard_normal(n_schools)
    eta = X @ np.asarray(cfg.beta_M) + tM[st] + sM[ss] + cfg.sigma_M * rng.standard_normal(n)

    # mastery records for treated students
    delta = cfg.deltas()
    K = cfg.n_sections
    disc = np.ones(K) if cfg.disc is None else np.asarray(cfg.disc, float)
    guess = np.zeros(K) if cfg.guess is None else np.asarray(cfg.guess, float)
    treated = np.flatnonzero(z == 1)
    rec_s = rec_k = rec_m = np.zeros(0, dtype=int)
    eta2 = None
    if cfg.mastery_logs and len(treated):
        n_sec = np.minimum(_zero_truncated_poisson(rng, cfg.mean_sections, len(treated)), K)
        order = np.argsort(rng.random((len(treated), K)), axis=1)
        take = np.arange(K)[None, :] < n_sec[:, None]
        rows, cols = np.nonzero(take)
        rec_s = treated[rows]
        rec_k = order[rows, cols]
        srt = np.lexsort((rec_k, rec_s))
        rec_s, rec_k = rec_s[srt], rec_k[srt]
        driver = eta[rec_s]
        if cfg.two_factor:
            eta2 = eta.mean() + cfg.factor_sd * rng.standard_normal(n)
            second = rec_k >= K // 2
            driver = np.where(second, eta2[rec_s], driver)
        p = mastery_prob(driver, delta[rec_k], disc[rec_k], guess[rec_k])
        rec_m = (rng.random(len(rec_s)) < p).astype(int)

    # potential outcomes
    blocks = cfg.blocks()
    tY = cfg.sd_teacher_Y * rng.standard_normal(n_teachers)
    sY = cfg.sd_school_Y * rng.standard_normal(n_schools)
    base = blocks[sb] + X @ np.asarray(cfg.beta_Y) + cfg.a * eta + tY[st] + sY[ss]
    Y_C = base + cfg.sigma_Y[0] * rng.standard_normal(n)
    Y_T = base + cfg.b0 + cfg.b1 * eta + cfg.sigma_Y[1] * rng.standard_normal(n)
    y = np.where(z == 1, Y_T, Y_C)

    ds = shell.replace(y=y, rec_student=rec_s, rec_section=rec_k, rec_mastered=rec_m,
                       provenance=f"synthetic trial, seed {cfg.seed}")
    params = {
        "beta_M": np.asarray(cfg.beta_M), "sigma_M": cfg.sigma_M,
        "sd_teacher_M": cfg.sd_teacher_M, "sd_school_M": cfg.sd_school_M,
        "teacher_M": tM, "school_M": sM, "delta": delta,
        "beta_Y": np.asarray(cfg.beta_Y), "block_Y": blocks, "a": cfg.a, "b0": cfg.b0, "b1": cfg.b1,
        "sd_teacher_Y": cfg.sd_teacher_Y, "sd_school_Y": cfg.sd_school_Y,
        "teacher_Y": tY, "school_Y": sY, "sigma_Y": np.asarray(cfg.sigma_Y), "eta": eta,
    }
    if cfg.family != "rasch":
        params["disc"] = disc
    if cfg.family == "3pl":
        params["guess"] = guess
    if eta2 is not None:
        params["eta2"] = eta2
    truth = SyntheticTruth(eta_T=eta, Y_T=Y_T, Y_C=Y_C, delta=delta, config=cfg, params=params)
    return ds, truth


# -- placebo datasets ------------------------------------------------------------

@dataclass(frozen=True)
class PlaceboSpec:
    """Injected treatment effect ``tau(eta_hat)`` for a placebo dataset.

    * ``zero``: no effect (coefficients forced to 0).
    * ``random``: ``b0 + N(0, noise_sd)`` independent of ``eta_hat``.
    * ``linear``: ``b0 + slope * eta_hat``.
    * ``quadratic``: ``b0 + curvature * (eta_hat - mean(eta_hat))**2``.

    Coefficients are in the outcome units of the dataset being duplicated.
    """

    kind: str = "zero"
    b0: float = 0.0
    slope: float = 0.0
    curvature: float = 0.0
    noise_sd: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PLACEBO_KINDS:
            raise ValueError(f"unknown placebo kind {self.kind!r}")
        if self.kind == "zero":
            object.__setattr__(self, "b0", 0.0)
            object.__setattr__(self, "slope", 0.0)
            object.__setattr__(self, "curvature", 0.0)
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")

    def tau(self, eta_hat) -> np.ndarray:
        eta_hat = np.asarray(eta_hat, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(eta_hat)
        if self.kind == "random":
            rng = np.random.default_rng(self.seed)
            return self.b0 + self.noise_sd * rng.standard_normal(eta_hat.shape)
        if self.kind == "linear":
            return self.b0 + self.slope * eta_hat
        return self.b0 + self.curvature * (eta_hat - eta_hat.mean()) ** 2

    @property
    def linear_slope(self) -> float:
        """Slope the linear principal-effect model should recover."""
        return self.slope if self.kind == "linear" else 0.0


def default_placebo_specs(seed: int = 0) -> list[PlaceboSpec]:
    return [
        PlaceboSpec("zero", seed=seed),
        PlaceboSpec("random", noise_sd=0.2, seed=seed),
        PlaceboSpec("linear", slope=0.2, seed=seed),
        PlaceboSpec("quadratic", curvature=0.1, seed=seed),
    ]


def make_placebo(dataset: TrialDataset, eta_hat, spec: PlaceboSpec) -> tuple[TrialDataset, SyntheticTruth]:
    """Duplicate a treated-only dataset into a two-arm placebo trial.

    The control arm copies every student (id prefixed ``C_``, same block,
    school, teacher, covariates and outcome, no mastery logs). The treated
    arm keeps its logs and gets ``y + tau(eta_hat)``.
    """
    if (dataset.z != 1).any():
        raise ValueError("placebo construction needs a treated-only dataset")
    eta_hat = np.asarray(eta_hat, dtype=float)
    if eta_hat.shape != (dataset.n_students,) or not np.isfinite(eta_hat).all():
        raise ValueError("eta_hat must give a finite value for every student")
    n = dataset.n_students
    tau = spec.tau(eta_hat)
    y_t = dataset.y + tau
    ctrl_ids = np.array([f"C_{s}" for s in dataset.student_ids], dtype=object)
    out = dataset.replace(
        student_ids=np.concatenate([dataset.student_ids, ctrl_ids]),
        block_ids=np.concatenate([dataset.block_ids, dataset.block_ids]),
        school_ids=np.concatenate([dataset.school_ids, dataset.school_ids]),
        teacher_ids=np.concatenate([dataset.teacher_ids, dataset.teacher_ids]),
        z=np.concatenate([np.ones(n, int), np.zeros(n, int)]),
        y=np.concatenate([y_t, dataset.y]),
        X=np.vstack([dataset.X, dataset.X]),
        provenance=f"placebo ({spec.kind}) from: {dataset.provenance}",
    )
    truth = SyntheticTruth(
        eta_T=np.concatenate([eta_hat, eta_hat]),
        Y_T=np.concatenate([y_t, y_t]),
        Y_C=np.concatenate([dataset.y, dataset.y]),
        delta=np.full(dataset.n_sections, np.nan),
        params={"b0": spec.b0, "b1": spec.linear_slope},
        placebo=spec,
        tau=tau,
    )
    return out, truth
