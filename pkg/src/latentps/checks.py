"""Validation suite: placebo grid, simulation recovery and measurement sensitivity.

Every run here is a full fit. Tolerances are in posterior-SD units
because Monte Carlo error at desk scale swamps absolute thresholds.
Results are plain dataclasses whose pass flags can be recomputed from the
numbers they store.
"""

from __future__ import annotations

import csv
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from .fitting import default_sampler, fit
from .ps_model import ModelSpec
from .sampler import SamplerConfig
from .synth_trial import GenConfig, PlaceboSpec, default_placebo_specs, generate, make_placebo
from .trial_data import TrialDataset

log = logging.getLogger(__name__)

LEVEL = 0.95
RECOVERY_PARAMS = ("b0", "b1", "a", "sigma_M")
N_TRACKED_DELTAS = 3


def _interval(x, level=LEVEL):
    lo, hi = np.quantile(x, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


# -- placebo grid ----------------------------------------------------------------

@dataclass
class PlaceboResult:
    """One placebo cell. Coefficients are in fit (standardized outcome) units."""

    kind: str
    true_b0: float
    true_b1: float
    b0_mean: float = float("nan")
    b0_sd: float = float("nan")
    b1_mean: float = float("nan")
    b1_sd: float = float("nan")
    b1_lo: float = float("nan")
    b1_hi: float = float("nan")
    max_rhat: float = float("nan")
    y_scale: float = 1.0
    sd_tol: float = 2.0
    passed: bool = False
    error: str = ""

    def compute_pass(self) -> bool:
        """Linear cells need interval coverage; every other kind needs |b1| < sd_tol SDs."""
        if self.error or not np.isfinite(self.b1_mean):
            return False
        if self.kind == "linear":
            return self.b1_lo <= self.true_b1 <= self.b1_hi
        return abs(self.b1_mean - self.true_b1) < self.sd_tol * self.b1_sd


def placebo_source(dataset: TrialDataset, posterior, student_ids=None):
    """Treated-only subset and its posterior-mean ``eta`` estimates.

    ``student_ids`` labels the students of ``posterior``'s ``eta`` draws
    (defaults to ``dataset``'s own order).
    """
    eta = posterior.get("eta").mean(axis=(0, 1))
    ids = list(student_ids if student_ids is not None else
               posterior.derived_labels.get("eta", dataset.student_ids))
    pos = {s: i for i, s in enumerate(ids)}
    treated = dataset.z == 1
    sub = dataset.subset_students(treated)
    try:
        eta_hat = np.array([eta[pos[s]] for s in sub.student_ids])
    except KeyError as e:
        raise ValueError(f"posterior has no eta for student {e.args[0]}") from None
    return sub, eta_hat


def run_placebo_cell(source: TrialDataset, eta_hat, spec: PlaceboSpec,
                     sampler_cfg: SamplerConfig, model: ModelSpec | None = None,
                     sd_tol: float = 2.0) -> PlaceboResult:
    data, truth = make_placebo(source, eta_hat, spec)
    res = PlaceboResult(spec.kind, truth.params["b0"], truth.params["b1"], sd_tol=sd_tol)
    try:
        r = fit(data, model or ModelSpec(), sampler_cfg)
        ys = res.y_scale = r.info.y_scale
        res.true_b0, res.true_b1 = truth.params["b0"] / ys, truth.params["b1"] / ys
        b0, b1 = r.posterior.get("b0").ravel(), r.posterior.get("b1").ravel()
        res.b0_mean, res.b0_sd = float(b0.mean()), float(b0.std(ddof=1))
        res.b1_mean, res.b1_sd = float(b1.mean()), float(b1.std(ddof=1))
        res.b1_lo, res.b1_hi = _interval(b1)
        res.max_rhat = r.diagnostics(["b0", "b1", "a"]).max_rhat
    except Exception as e:  # recorded, not fatal to the grid
        res.error = f"{type(e).__name__}: {e}"
        log.warning("placebo %s failed: %s", spec.kind, res.error)
        return res
    res.passed = res.compute_pass()
    return res


def run_placebo_grid(dataset: TrialDataset, posterior, specs=None,
                     sampler_cfg: SamplerConfig | None = None, *,
                     model: ModelSpec | None = None, n_jobs: int = 1) -> list[PlaceboResult]:
    """Build and fit one placebo dataset per spec (default: the four standard kinds).

    ``dataset`` is the unstandardized trial (each cell is a fresh fit that
    standardizes its own data); ``posterior`` supplies the ``eta`` estimates.
    """
    specs = list(specs) if specs is not None else default_placebo_specs()
    sampler_cfg = sampler_cfg or default_sampler()
    source, eta_hat = placebo_source(dataset, posterior)
    jobs = [(source, eta_hat, s, sampler_cfg, model) for s in specs]
    return _map(_placebo_job, jobs, n_jobs)


def _placebo_job(args):
    return run_placebo_cell(*args)


# -- recovery --------------------------------------------------------------------

@dataclass
class RecoveryResult:
    rep: int
    seed: int
    names: list[str] = field(default_factory=list)
    truth: list[float] = field(default_factory=list)
    mean: list[float] = field(default_factory=list)
    sd: list[float] = field(default_factory=list)
    lo: list[float] = field(default_factory=list)
    hi: list[float] = field(default_factory=list)
    covered: list[bool] = field(default_factory=list)
    max_rhat: float = float("nan")
    error: str = ""

    def get(self, name: str, what: str = "mean") -> float:
        return getattr(self, what)[self.names.index(name)]

    def recompute_covered(self) -> list[bool]:
        return [lo <= t <= hi for lo, t, hi in zip(self.lo, self.truth, self.hi)]


def recovery_targets(result, truth) -> dict[str, tuple[np.ndarray, float]]:
    """Flattened draws and true value (fit units) for each tracked parameter."""
    tu = truth.fit_units(result.info.y_scale)
    post = result.posterior
    out = {k: (post.get(k).ravel(), float(tu[k])) for k in RECOVERY_PARAMS if post.has(k)}
    if "sigma_Y" in tu:
        for j, arm in enumerate(("control", "treated")):
            key = f"sigma_Y[{arm}]"
            out[key] = (post.get(key).ravel(), float(tu["sigma_Y"][j]))
    if "delta" in post.index_map:
        d = post.get("delta")
        for k in range(min(N_TRACKED_DELTAS, d.shape[-1])):
            out[f"delta[{k}]"] = (d[..., k].ravel(), float(tu["delta"][k]))
    return out


def run_recovery_rep(gen: GenConfig, rep: int, sampler_cfg: SamplerConfig,
                     model: ModelSpec | None = None) -> RecoveryResult:
    seed = gen.seed + rep
    res = RecoveryResult(rep, seed)
    try:
        ds, truth = generate(GenConfig.from_dict({**gen.to_dict(), "seed": seed}))
        cfg = SamplerConfig(**{**sampler_cfg.to_dict(), "seed": sampler_cfg.seed + rep})
        r = fit(ds, model or ModelSpec(), cfg)
        targets = recovery_targets(r, truth)
        max_rhat = r.diagnostics([k for k in RECOVERY_PARAMS if r.posterior.has(k)]).max_rhat
    except Exception as e:
        res.error = f"{type(e).__name__}: {e}"
        log.warning("recovery rep %d failed: %s\n%s", rep, res.error, traceback.format_exc())
        return res
    for name, (x, t) in targets.items():
        lo, hi = _interval(x)
        res.names.append(name)
        res.truth.append(t)
        res.mean.append(float(x.mean()))
        res.sd.append(float(x.std(ddof=1)))
        res.lo.append(lo)
        res.hi.append(hi)
        res.covered.append(lo <= t <= hi)
    res.max_rhat = max_rhat
    return res


def run_recovery(gen: GenConfig | None = None, n_reps: int = 20,
                 sampler_cfg: SamplerConfig | None = None, *,
                 model: ModelSpec | None = None, n_jobs: int = 1) -> list[RecoveryResult]:
    """Generate-and-fit ``n_reps`` times; rep ``r`` uses seeds ``gen.seed + r``."""
    gen = gen or GenConfig()
    sampler_cfg = sampler_cfg or default_sampler()
    jobs = [(gen, r, sampler_cfg, model) for r in range(n_reps)]
    return _map(_recovery_job, jobs, n_jobs)


def _recovery_job(args):
    return run_recovery_rep(*args)


@dataclass
class RecoverySummary:
    name: str
    n_ok: int
    coverage: float
    bias: float
    rmse: float


def summarize_recovery(results: list[RecoveryResult]) -> list[RecoverySummary]:
    ok = [r for r in results if not r.error]
    names = [] if not ok else ok[0].names
    out = []
    for nm in names:
        rows = [r for r in ok if nm in r.names]
        err = np.array([r.get(nm) - r.get(nm, "truth") for r in rows])
        cov = np.mean([r.covered[r.names.index(nm)] for r in rows])
        out.append(RecoverySummary(nm, len(rows), float(cov), float(err.mean()),
                                   float(np.sqrt(np.mean(err ** 2)))))
    return out


# -- measurement sensitivity -----------------------------------------------------

@dataclass
class FamilyRow:
    family: str
    slope_mean: float = float("nan")
    slope_sd: float = float("nan")
    b1_mean: float = float("nan")
    b1_sd: float = float("nan")
    pr_lt_0: float = float("nan")
    guess_max_mean: float = float("nan")
    max_rhat: float = float("nan")
    error: str = ""


def sensitivity_family(dataset: TrialDataset, families=("rasch", "3pl"),
                       sampler_cfg: SamplerConfig | None = None, *,
                       model: ModelSpec | None = None) -> list[FamilyRow]:
    """Refit the latent model under each measurement family and tabulate the slope."""
    sampler_cfg = sampler_cfg or default_sampler()
    base = model or ModelSpec()
    rows = []
    for fam in families:
        row = FamilyRow(fam)
        try:
            r = fit(dataset, base.with_(family=fam), sampler_cfg)
        except Exception as e:
            row.error = f"{type(e).__name__}: {e}"
            rows.append(row)
            continue
        s = r.posterior.get("slope_iqr").ravel()
        b1 = r.posterior.get("b1").ravel()
        row.slope_mean, row.slope_sd = float(s.mean()), float(s.std(ddof=1))
        row.b1_mean, row.b1_sd = float(b1.mean()), float(b1.std(ddof=1))
        row.pr_lt_0 = float(np.mean(s < 0))
        if fam == "3pl":
            g = r.model.unpack(r.posterior.draws)["guess"]
            row.guess_max_mean = float(g.mean(axis=(0, 1)).max())
        row.max_rhat = r.diagnostics(["b0", "b1", "a"]).max_rhat
        rows.append(row)
    return rows


# -- output ----------------------------------------------------------------------

def _map(fn, jobs, n_jobs):
    if n_jobs <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs, mp_context=get_context("spawn")) as ex:
        return list(ex.map(fn, jobs))


def _write_rows(path, rows) -> None:
    rows = [asdict(r) for r in rows]
    if not rows:
        Path(path).write_text("", encoding="utf-8")
        return
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def write_placebo(results: list[PlaceboResult], out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "placebo.csv", out / "report.md"]
    _write_rows(paths[0], results)
    lines = ["# Placebo grid", "",
             "| kind | true b1 | b1 mean | b1 sd | 95% interval | pass |",
             "|---|---|---|---|---|---|"]
    for r in results:
        lines.append(f"| {r.kind} | {r.true_b1:.4f} | {r.b1_mean:.4f} | {r.b1_sd:.4f} | "
                     f"[{r.b1_lo:.4f}, {r.b1_hi:.4f}] | {'yes' if r.passed else 'no'} |")
    lines += [f"- {r.kind}: {r.error}" for r in results if r.error]
    paths[1].write_text("\n".join(lines) + "\n", encoding="utf-8")
    return paths


def write_recovery(results: list[RecoveryResult], out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    per = out / "recovery_reps.csv"
    with open(per, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("rep,seed,param,truth,mean,sd,lo,hi,covered,max_rhat,error\n")
        for r in results:
            if r.error:
                fh.write(f"{r.rep},{r.seed},,,,,,,,,{json.dumps(r.error)}\n")
            for i, nm in enumerate(r.names):
                fh.write(f"{r.rep},{r.seed},{nm},{r.truth[i]!r},{r.mean[i]!r},{r.sd[i]!r},"
                         f"{r.lo[i]!r},{r.hi[i]!r},{int(r.covered[i])},{r.max_rhat!r},\n")
    summ = summarize_recovery(results)
    agg = out / "recovery_summary.csv"
    _write_rows(agg, summ)
    n_fail = sum(bool(r.error) for r in results)
    lines = ["# Recovery", "", f"replications: {len(results)} ({n_fail} failed)", "",
             "| parameter | coverage | bias | rmse |", "|---|---|---|---|"]
    lines += [f"| {s.name} | {s.coverage:.2f} | {s.bias:.4f} | {s.rmse:.4f} |" for s in summ]
    rep = out / "report.md"
    rep.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return [per, agg, rep]


def write_sensitivity(rows: list[FamilyRow], out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sensitivity.csv"
    _write_rows(path, rows)
    return [path]
