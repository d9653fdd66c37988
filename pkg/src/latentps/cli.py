"""Command-line entry point.

Every command writes ``manifest.json`` into its output directory: the
command line, resolved configuration, seed, package version and SHA-256
digests of inputs and outputs. Re-running the recorded ``argv`` reproduces
the outputs.

Exit codes: 0 success, 2 validation error, 3 convergence failure,
4 internal error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .checks import (placebo_source, run_placebo_cell, run_recovery, sensitivity_family,
                     write_placebo, write_recovery, write_sensitivity)
from .config import ConfigError, RunConfig, dumps_toml, load_config
from .fitting import add_derived, headline_keys, prepare
from .irt_measurement import q3_check
from .ps_model import ModelSpec, PSModel, principal_effect
from .sampler import (GradientCheckError, NonFiniteGradientError, diagnostics, load_posterior,
                      sample, save_posterior, summarize)
from .synth_trial import generate
from .trial_data import DataValidationError, StandardizationInfo, data_report, load_dataset, save_dataset
from .two_stage import Stage2Options, draw_eta_vectors, fit_stage2, pool, write_fits_csv

log = logging.getLogger("latentps")

EXIT_OK, EXIT_VALIDATION, EXIT_CONVERGENCE, EXIT_INTERNAL = 0, 2, 3, 4
RHAT_MAX = 1.05
FIT_INFO = "fit_info.json"


class ConvergenceFailure(RuntimeError):
    def __init__(self, message: str, paths=()):
        super().__init__(message)
        self.paths = list(paths)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config_paths: list[str]
    config: dict
    seed: int
    code_version: str = __version__
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    wall_time: float = 0.0
    status: str = "ok"

    def add_input(self, path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    def add_outputs(self, paths) -> None:
        for p in paths:
            self.outputs[str(p)] = sha256_file(p)

    def verify(self) -> list[str]:
        """Paths whose current digest differs from the recorded one."""
        bad = []
        for p, d in {**self.inputs, **self.outputs}.items():
            if not Path(p).exists() or sha256_file(p) != d:
                bad.append(p)
        return bad

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, path) -> RunManifest:
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


# -- argument handling -----------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--seed", type=int, help="seed for every stochastic step")
    p.add_argument("--out-dir", default="out", help="output directory (default: out)")
    p.add_argument("--model", choices=("latent", "mbar"))
    p.add_argument("--family", choices=("rasch", "2pl", "3pl"))
    p.add_argument("--chains", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--draws", type=int)
    p.add_argument("--jobs", type=int, help="worker processes for chains or replications")
    p.add_argument("--allow-nonconverged", action="store_true",
                   help="exit 0 even if some R-hat exceeds 1.05")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentps", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_, fit_dir=False, data=False):
        p = sub.add_parser(name, help=help_)
        _common(p)
        if fit_dir:
            p.add_argument("--fit-dir", required=True, help="output directory of a previous fit")
        if data:
            p.add_argument("--students", help="students.csv (overrides [data].students)")
            p.add_argument("--mastery", help="mastery.csv (overrides [data].mastery)")
        return p

    add("simulate", "generate a synthetic trial")
    add("fit", "fit the joint model", data=True)
    add("diagnose", "convergence diagnostics of a fit", fit_dir=True)
    add("summarize", "posterior summary of a fit", fit_dir=True)
    p = add("two-stage", "multiple-imputation stage-2 estimator", fit_dir=True)
    p.add_argument("--n-eta", type=int, help="number of eta draws (default [two_stage].n_draws)")
    add("placebo", "placebo-grid validation from a fitted trial", fit_dir=True)
    p = add("recovery", "simulation-based parameter recovery")
    p.add_argument("--reps", type=int, help="replications (default [checks].n_reps)")
    add("sensitivity", "refit under each measurement family", data=True)
    p = add("ppc", "Q3 posterior predictive check", fit_dir=True)
    p.add_argument("--n-rep", type=int, help="posterior draws used (default [checks].q3_reps)")
    p = add("figures", "plot-ready CSVs", fit_dir=True)
    p.add_argument("--n-lines", type=int, default=50, help="treatment-effect lines to emit")
    p.add_argument("--draw", type=int, default=0, help="flat draw index for the scatter")
    p.add_argument("--grid", type=int, default=41, help="eta grid points per line")
    p.add_argument("--placebo-dir", help="placebo output directory for panel data")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    model, smp, gen = cfg.model, cfg.sampler, cfg.generator
    if args.model:
        model = model.with_(variant=args.model)
    if args.family:
        model = model.with_(family=args.family)
    changes = {k: v for k, v in (("n_chains", args.chains), ("n_warmup", args.warmup),
                                 ("n_draws", args.draws), ("n_jobs", args.jobs),
                                 ("seed", args.seed)) if v is not None}
    try:
        smp = replace(smp, **changes)
    except ValueError as e:
        raise ConfigError("sampler", str(e)) from None
    if args.seed is not None:
        gen = replace(gen, seed=args.seed)
    checks = cfg.checks if args.jobs is None else replace(cfg.checks, n_jobs=args.jobs)
    return replace(cfg, model=model, sampler=smp, generator=gen, checks=checks)


# -- shared helpers --------------------------------------------------------------

def _data_paths(args, cfg: RunConfig) -> tuple[Path, Path]:
    s = Path(args.students) if getattr(args, "students", None) else cfg.resolve(cfg.data.students)
    m = Path(args.mastery) if getattr(args, "mastery", None) else cfg.resolve(cfg.data.mastery)
    return s, m


def _load_data(students: Path, mastery: Path, cfg: RunConfig, man: RunManifest, *, need_logs=True):
    if not students.exists():
        raise DataValidationError(f"students file not found: {students}")
    if not mastery.exists():
        if need_logs:
            raise DataValidationError(
                f"mastery file not found: {mastery} (the {cfg.model.variant} model needs mastery logs)")
        mastery = None
    man.add_input(students)
    if mastery is not None:
        man.add_input(mastery)
    return load_dataset(students, mastery, cfg.data.ingest())


def _fit_rhat(post) -> float:
    keys = [seg.name for seg in post.index_map] + [k for k in post.derived]
    return diagnostics(post, keys).max_rhat


def _persist_fit(post, model: PSModel, out: Path) -> list[Path]:
    files = save_posterior(post, out)
    paths = [Path(p) for p in files.values()]
    table = summarize(post, headline_keys(post))
    table.to_csv(out / "summary.csv")
    (out / "summary.txt").write_text(table.to_text(), encoding="utf-8")
    rep = diagnostics(post, None)
    rep.to_csv(out / "diagnostics.csv")
    (out / "diagnostics.txt").write_text(rep.to_text(), encoding="utf-8")
    return paths + [out / "summary.csv", out / "summary.txt", out / "diagnostics.csv",
                    out / "diagnostics.txt"]


@dataclass
class LoadedFit:
    dataset: object  # prepared, as fit
    posterior: object
    spec: ModelSpec
    info: StandardizationInfo
    fit_info: dict
    raw: object = None  # as ingested, before standardization


def load_fit(fit_dir, man: RunManifest | None = None, verify: bool = True) -> LoadedFit:
    """Reload a fit directory: posterior plus the prepared dataset it was fit to."""
    d = Path(fit_dir)
    info_path = d / FIT_INFO
    if not info_path.exists():
        raise DataValidationError(f"not a fit directory (missing {FIT_INFO}): {d}")
    fi = json.loads(info_path.read_text(encoding="utf-8"))
    for role in ("students", "mastery"):
        p = fi.get(role)
        if p is None:
            continue
        if not Path(p).exists():
            raise DataValidationError(f"{role} file recorded by the fit is missing: {p}")
        if verify and sha256_file(p) != fi["digests"][role]:
            raise DataValidationError(f"{role} file changed since the fit: {p}")
        if man is not None:
            man.add_input(p)
    from .trial_data import IngestOptions
    raw = load_dataset(fi["students"], fi.get("mastery"), IngestOptions(**fi["ingest"]))
    spec = ModelSpec.from_dict(fi["model"])
    ds, info = prepare(raw, spec)
    ds = PSModel(ds, spec).dataset
    post = load_posterior(d)
    if man is not None:
        man.add_input(info_path)
        man.add_input(d / "posterior.json")
    return LoadedFit(ds, post, spec, info, fi, raw)


# -- commands --------------------------------------------------------------------

def cmd_simulate(args, cfg: RunConfig, man: RunManifest) -> list[Path]:
    out = Path(args.out_dir)
    ds, truth = generate(cfg.generator)
    paths = [out / "students.csv", out / "mastery.csv", out / "truth.csv", out / "truth_params.json",
             out / "data_report.txt", out / "data_report.kv", out / "config.toml"]
    save_dataset(ds, paths[0], paths[1])
    truth.write(ds, paths[2])
    truth.write_params(paths[3])
    data_report(ds).write(paths[4], paths[5])
    paths[6].write_text(dumps_toml(cfg), encoding="utf-8")
    print(data_report(ds).to_text(), end="")
    return paths


def cmd_fit(args, cfg: RunConfig, man: RunManifest) -> list[Path]:
    out = Path(args.out_dir)
    s, m = _data_paths(args, cfg)
    raw = _load_data(s, m, cfg, man)
    ds, info = prepare(raw, cfg.model)
    model = PSModel(ds, cfg.model)
    post = sample(model, cfg.sampler)
    add_derived(post, model)
    post.meta.update(model=cfg.model.to_dict(), standardization=info.to_dict(),
                     sampler=cfg.sampler.to_dict())
    paths = _persist_fit(post, model, out)
    fi = {
        "students": str(s.resolve()), "mastery": str(m.resolve()),
        "digests": {"students": sha256_file(s), "mastery": sha256_file(m)},
        "ingest": asdict(cfg.data.ingest()), "model": cfg.model.to_dict(),
        "sampler": cfg.sampler.to_dict(), "standardization": info.to_dict(),
    }
    (out / FIT_INFO).write_text(json.dumps(fi, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    paths.append(out / FIT_INFO)
    print((out / "summary.txt").read_text(encoding="utf-8"), end="")
    rhat = _fit_rhat(post)
    print(f"max R-hat {rhat:.4f}; divergence rate {post.divergence_rate:.4f}")
    _convergence_gate(args, rhat, man, paths)
    return paths


def _convergence_gate(args, rhat: float, man: RunManifest, paths) -> None:
    if not (rhat <= RHAT_MAX) and not args.allow_nonconverged:
        man.status = "nonconverged"
        raise ConvergenceFailure(f"max R-hat {rhat:.4f} exceeds {RHAT_MAX} "
                                 "(use --allow-nonconverged to accept)", paths)


def cmd_diagnose(args, cfg, man) -> list[Path]:
    out = Path(args.out_dir)
    lf = load_fit(args.fit_dir, man)
    rep = diagnostics(lf.posterior, None)
    paths = [out / "diagnostics.csv", out / "diagnostics.txt"]
    rep.to_csv(paths[0])
    paths[1].write_text(rep.to_text(), encoding="utf-8")
    print(rep.to_text(), end="")
    _convergence_gate(args, rep.max_rhat, man, paths)
    return paths


def cmd_summarize(args, cfg, man) -> list[Path]:
    out = Path(args.out_dir)
    lf = load_fit(args.fit_dir, man)
    post = lf.posterior
    table = summarize(post, headline_keys(post))
    paths = [out / "summary.csv", out / "summary.txt"]
    table.to_csv(paths[0])
    text = table.to_text()
    if "slope_iqr" in post.derived:
        s = post.get("slope_iqr").ravel()
        lo, hi = np.quantile(s, [0.025, 0.975])
        text += (f"\nstandardized slope per IQR: {s.mean():.4f} (sd {s.std(ddof=1):.4f}), "
                 f"95% interval [{lo:.4f}, {hi:.4f}], Pr(slope < 0) = {np.mean(s < 0):.3f}\n")
    paths[1].write_text(text, encoding="utf-8")
    print(text, end="")
    return paths


def cmd_two_stage(args, cfg, man) -> list[Path]:
    out = Path(args.out_dir)
    lf = load_fit(args.fit_dir, man)
    n = args.n_eta or cfg.two_stage.n_draws
    etas = draw_eta_vectors(lf.posterior, n)
    opt = Stage2Options(blocks=cfg.two_stage.blocks)
    fits = [fit_stage2(lf.dataset, e, opt) for e in etas]
    pooled = pool(fits)
    b1 = lf.posterior.get("b1").ravel()
    text = pooled.to_text() + (f"joint-model b1: mean {b1.mean():.6f}, sd {b1.std(ddof=1):.6f}\n"
                               f"difference in means: {pooled.mean - b1.mean():.6f}\n")
    paths = [out / "stage2_fits.csv", out / "stage2_pooled.txt"]
    write_fits_csv(fits, paths[0])
    paths[1].write_text(text, encoding="utf-8")
    print(text, end="")
    return paths


def cmd_placebo(args, cfg, man) -> list[Path]:
    out = Path(args.out_dir)
    lf = load_fit(args.fit_dir, man)
    seed = cfg.sampler.seed
    specs = cfg.checks.placebo_specs(seed)
    # placebo data are refit from scratch, so start from the unstandardized data
    source, eta_hat = placebo_source(lf.raw, lf.posterior)
    model = cfg.model.with_(variant="latent")
    results = [run_placebo_cell(source, eta_hat, s, cfg.sampler, model) for s in specs]
    paths = write_placebo(results, out)
    panel = out / "placebo_points.csv"
    with open(panel, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("kind,eta_hat,true_tau\n")
        for s in specs:
            for e, t in zip(eta_hat, s.tau(eta_hat)):
                fh.write(f"{s.kind},{float(e)!r},{float(t)!r}\n")
    paths.append(panel)
    print(paths[1].read_text(encoding="utf-8"), end="")
    return paths


def cmd_recovery(args, cfg, man) -> list[Path]:
    out = Path(args.out_dir)
    n = args.reps or cfg.checks.n_reps
    res = run_recovery(cfg.generator, n, cfg.sampler, model=cfg.model, n_jobs=cfg.checks.n_jobs)
    paths = write_recovery(res, out)
    print(paths[-1].read_text(encoding="utf-8"), end="")
    return paths


def cmd_sensitivity(args, cfg, man) -> list[Path]:
    out = Path(args.out_dir)
    s, m = _data_paths(args, cfg)
    raw = _load_data(s, m, cfg, man)
    families = (args.family,) if args.family else cfg.checks.families
    rows = sensitivity_family(raw, families, cfg.sampler, model=cfg.model.with_(variant="latent"))
    paths = write_sensitivity(rows, out)
    for r in rows:
        print(f"{r.family}: slope {r.slope_mean:.4f} (sd {r.slope_sd:.4f}) {r.error}")
    return paths


def cmd_ppc(args, cfg, man) -> list[Path]:
    out = Path(args.out_dir)
    lf = load_fit(args.fit_dir, man)
    n = args.n_rep or cfg.checks.q3_reps
    seed = cfg.sampler.seed
    rep = q3_check(lf.dataset, lf.posterior, n, seed=seed)
    paths = [out / "q3.csv", out / "q3_summary.txt"]
    rep.write(paths[0], paths[1])
    print(rep.summary_line())
    return paths


def tau_lines(posterior, n_lines: int, grid: int, key: str) -> list[tuple[int, float, float]]:
    """``(draw, eta, tau)`` rows for ``n_lines`` thinned draws over the observed range."""
    b0, b1 = posterior.flat("b0"), posterior.flat("b1")
    total = len(b0)
    if not 1 <= n_lines <= total:
        raise ValueError(f"--n-lines must lie in 1..{total}")
    est = posterior.get(key).mean(axis=(0, 1))
    xs = np.linspace(est.min(), est.max(), grid)
    idx = (np.arange(n_lines) * total) // n_lines
    return [(int(i), float(x), float(t)) for i in idx
            for x, t in zip(xs, principal_effect({"b0": b0[i], "b1": b1[i]}, xs))]


def arm_regressions(strat, y, z) -> dict[int, tuple[float, float]]:
    """Per-arm least-squares ``(intercept, slope)`` of ``y`` on the stratifier."""
    out = {}
    for arm in (0, 1):
        m = z == arm
        if m.sum() < 2:
            continue
        A = np.column_stack([np.ones(m.sum()), strat[m]])
        coef = np.linalg.lstsq(A, y[m], rcond=None)[0]
        out[arm] = (float(coef[0]), float(coef[1]))
    return out


def cmd_figures(args, cfg, man) -> list[Path]:
    out = Path(args.out_dir)
    lf = load_fit(args.fit_dir, man)
    post, ds = lf.posterior, lf.dataset
    key = "eta" if post.has("eta") else "mbar" if post.has("mbar") else None
    if key is None:
        raise DataValidationError("fit has no persisted stratifier draws")
    paths = [out / "tau_lines.csv", out / "scatter.csv", out / "scatter_lines.csv"]
    with open(paths[0], "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"draw,{key},tau\n")
        for d, x, t in tau_lines(post, args.n_lines, args.grid, key):
            fh.write(f"{d},{x!r},{t!r}\n")
    flat = post.flat(key)
    if not 0 <= args.draw < flat.shape[0]:
        raise ValueError(f"--draw must lie in 0..{flat.shape[0] - 1}")
    s = flat[args.draw]
    with open(paths[1], "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"student_id,{key},y,z\n")
        for sid, v, yy, zz in zip(ds.student_ids, s, ds.y, ds.z):
            fh.write(f"{sid},{float(v)!r},{float(yy)!r},{int(zz)}\n")
    with open(paths[2], "w", encoding="utf-8", newline="\n") as fh:
        fh.write("draw,z,intercept,slope\n")
        for arm, (a, b) in arm_regressions(s, ds.y, ds.z).items():
            fh.write(f"{args.draw},{arm},{a!r},{b!r}\n")
    if args.placebo_dir:
        paths.append(_placebo_panels(Path(args.placebo_dir), out / "placebo_panels.csv", man))
    return paths


def _placebo_panels(pdir: Path, dest: Path, man: RunManifest) -> Path:
    import csv
    cells, pts = pdir / "placebo.csv", pdir / "placebo_points.csv"
    for p in (cells, pts):
        if not p.exists():
            raise DataValidationError(f"placebo output missing: {p}")
        man.add_input(p)
    with open(cells, encoding="utf-8") as fh:
        fits = {r["kind"]: r for r in csv.DictReader(fh)}
    with open(pts, encoding="utf-8") as fh, open(dest, "w", encoding="utf-8", newline="\n") as out:
        out.write("kind,eta_hat,true_tau,estimated_tau\n")
        for r in csv.DictReader(fh):
            f = fits.get(r["kind"])
            est = float("nan")
            if f is not None and f["b1_mean"] not in ("", "nan"):
                # fitted line back in raw outcome units
                scale = float(f["y_scale"])
                est = scale * (float(f["b0_mean"]) + float(f["b1_mean"]) * float(r["eta_hat"]))
            out.write(f"{r['kind']},{r['eta_hat']},{r['true_tau']},{est!r}\n")
    return dest


COMMANDS = {
    "simulate": cmd_simulate, "fit": cmd_fit, "diagnose": cmd_diagnose, "summarize": cmd_summarize,
    "two-stage": cmd_two_stage, "placebo": cmd_placebo, "recovery": cmd_recovery,
    "sensitivity": cmd_sensitivity, "ppc": cmd_ppc, "figures": cmd_figures,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        cfg = resolve_config(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest(command=args.command, argv=argv,
                      config_paths=[args.config] if args.config else [],
                      config=cfg.to_dict(), seed=cfg.sampler.seed if args.seed is None else args.seed)
    if args.config:
        man.add_input(args.config)
    code, paths = EXIT_OK, []
    try:
        paths = COMMANDS[args.command](args, cfg, man)
    except ConvergenceFailure as e:
        print(f"convergence failure: {e}", file=sys.stderr)
        paths = e.paths
        code = EXIT_CONVERGENCE
    except NonFiniteGradientError as e:
        print(f"sampler failure: {e}", file=sys.stderr)
        man.status = "sampler-failure"
        code = EXIT_CONVERGENCE
    except (ConfigError, DataValidationError, ValueError, KeyError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"validation error: {msg}", file=sys.stderr)
        man.status = "invalid"
        code = EXIT_VALIDATION
    except (GradientCheckError, Exception) as e:  # noqa: BLE001
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        man.status = "error"
        code = EXIT_INTERNAL
    man.add_outputs(sorted(str(p) for p in paths if Path(p).exists()))
    man.wall_time = round(time.perf_counter() - t0, 3)
    man.write(out)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
