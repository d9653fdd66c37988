"""Hamiltonian Monte Carlo with adaptive step size and diagonal metric.

Each transition integrates a leapfrog trajectory whose length is drawn
uniformly from ``1..max_leapfrog``. Warmup follows the usual windowed scheme:
a fast initial buffer for step size only, a series of doubling slow windows
whose draws estimate the diagonal inverse metric, and a terminal fast buffer.
Dual averaging tunes the step size toward ``target_accept`` and restarts
after every metric update.

Chains are independent given ``(seed, chain)``; running them in worker
processes changes nothing about their draws.
"""

from __future__ import annotations

import json
import logging
import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata

from .ps_model import IndexMap

log = logging.getLogger(__name__)

MAX_ENERGY_ERROR = 1000.0


class GradientCheckError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, segment: str, chain: int | None = None):
        self.segment = segment
        where = "" if chain is None else f" (chain {chain})"
        super().__init__(f"non-finite gradient in parameter segment {segment!r}{where}")


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 4
    n_warmup: int = 1000
    n_draws: int = 1000
    target_accept: float = 0.8
    max_leapfrog: int = 16
    seed: int = 0
    init_jitter: float = 1.0
    n_jobs: int = 1
    gradient_check: bool = True
    max_divergence_rate: float = 0.10

    def __post_init__(self):
        if self.n_chains < 1:
            raise ValueError("n_chains must be at least 1")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.max_leapfrog < 1 or self.n_draws < 1 or self.n_warmup < 0:
            raise ValueError("max_leapfrog and n_draws must be positive, n_warmup non-negative")
        if self.init_jitter < 0:
            raise ValueError("init_jitter must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


class FunctionModel:
    """Adapter for a plain ``theta -> (logp, grad)`` function.

    Must be a module-level function to be usable with worker processes.
    """

    def __init__(self, logp_and_grad, dim: int, index_map: IndexMap | None = None):
        self._f = logp_and_grad
        self.dim = int(dim)
        self.index_map = index_map or IndexMap([("theta", self.dim)])

    def logp_and_grad(self, theta):
        return self._f(theta)


# -- gradient check ---------------------------------------------------------------

def gradient_check(model, theta, *, h: float = 1e-5, tol: float = 1e-4, max_coords: int = 64,
                   n_directions: int = 3, rng=None) -> float:
    """Compare the analytic gradient with central finite differences.

    Checks up to ``max_coords`` coordinates (all of them in small models)
    plus a few random directional derivatives. The error of a component is
    ``|fd - g| / max(1, |g|)``. Raises :class:`GradientCheckError` on failure
    and returns the worst error otherwise.
    """
    rng = rng or np.random.default_rng(0)
    theta = np.asarray(theta, dtype=float)
    f = model.logp_and_grad
    _, g = f(theta)
    dim = len(theta)
    coords = np.arange(dim) if dim <= max_coords else np.sort(rng.choice(dim, max_coords, replace=False))
    worst, where = 0.0, None
    for j in coords:
        e = np.zeros(dim)
        e[j] = h
        fd = (f(theta + e)[0] - f(theta - e)[0]) / (2 * h)
        err = abs(fd - g[j]) / max(1.0, abs(g[j]))
        if not err <= worst:
            worst, where = err, int(j)
    for _ in range(n_directions):
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        fd = (f(theta + h * v)[0] - f(theta - h * v)[0]) / (2 * h)
        an = float(np.dot(g, v))
        err = abs(fd - an) / max(1.0, abs(an))
        if not err <= worst:
            worst, where = err, "direction"
    if not worst < tol:
        seg = where
        im = getattr(model, "index_map", None)
        if isinstance(where, int) and im is not None:
            seg = f"{im.names()[where]} (segment {im.segment_of(where)})"
        raise GradientCheckError(f"gradient check failed: relative error {worst:.3g} at {seg}")
    return worst


# -- warmup schedule ------------------------------------------------------------

def warmup_windows(n_warmup: int, init_buffer: int = 75, term_buffer: int = 50,
                   base_window: int = 25) -> list[tuple[int, int]]:
    """``(start, end)`` iterations of the slow, metric-adapting windows.

    Short warmups (below the sum of the three defaults) are split 15% / 75% /
    10%; under 20 iterations there is no metric adaptation.
    """
    if n_warmup < 20:
        return []
    if init_buffer + term_buffer + base_window > n_warmup:
        init_buffer = int(0.15 * n_warmup)
        term_buffer = int(0.1 * n_warmup)
        base_window = n_warmup - init_buffer - term_buffer
    windows = []
    start, size = init_buffer, base_window
    last = n_warmup - term_buffer
    while start < last:
        end = start + size
        if end + 2 * size > last:
            end = last
        windows.append((start, end))
        start, size = end, 2 * size
    return windows


class DualAveraging:
    def __init__(self, step_size: float, target: float, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = np.log(10 * step_size)
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.t = 0
        self.h_bar = 0.0
        self.log_eps = np.log(step_size)
        self.log_eps_bar = 0.0

    def update(self, accept: float) -> float:
        self.t += 1
        w = 1.0 / (self.t + self.t0)
        self.h_bar = (1 - w) * self.h_bar + w * (self.target - accept)
        self.log_eps = self.mu - np.sqrt(self.t) / self.gamma * self.h_bar
        k = self.t ** -self.kappa
        self.log_eps_bar = k * self.log_eps + (1 - k) * self.log_eps_bar
        return float(np.exp(self.log_eps))

    @property
    def final(self) -> float:
        return float(np.exp(self.log_eps_bar))


# -- chain ----------------------------------------------------------------------

class _BadGradient(Exception):
    def __init__(self, index: int):
        self.index = index


def _leapfrog(f, q, p, g, eps, n_steps, inv_m, h0=np.inf):
    p = p + 0.5 * eps * g
    lp = None
    for k in range(n_steps):
        q = q + eps * inv_m * p
        lp, g = f(q)
        if not np.isfinite(lp):
            return q, p, -np.inf, g
        if not np.isfinite(g).all():
            # overflow on an already divergent trajectory is a divergence, not a bug
            if -lp + 0.5 * np.dot(p, inv_m * p) - h0 > MAX_ENERGY_ERROR:
                return q, p, -np.inf, g
            raise _BadGradient(int(np.flatnonzero(~np.isfinite(g))[0]))
        if k < n_steps - 1:
            p = p + eps * g
    p = p + 0.5 * eps * g
    return q, p, lp, g


def _initial_step_size(f, q, lp, g, inv_m, rng) -> float:
    eps = 1.0
    p = rng.standard_normal(len(q)) / np.sqrt(inv_m)
    h0 = -lp + 0.5 * np.dot(p, inv_m * p)

    def delta_h(e):
        _, p1, lp1, _ = _leapfrog(f, q, p, g, e, 1, inv_m, h0)
        h1 = -lp1 + 0.5 * np.dot(p1, inv_m * p1)
        return h0 - h1 if np.isfinite(h1) else -np.inf

    dh = delta_h(eps)
    direction = 1 if dh > np.log(0.8) else -1
    for _ in range(100):
        eps = eps * (2.0 ** direction)
        dh = delta_h(eps)
        if direction == 1 and not dh > np.log(0.8):
            eps /= 2.0
            break
        if direction == -1 and dh > np.log(0.8):
            break
    return float(eps)


def _init_point(model, rng, jitter):
    f = model.logp_and_grad
    for _ in range(100):
        if hasattr(model, "initial_point"):
            q = model.initial_point(rng, jitter)
        else:
            q = rng.uniform(-jitter, jitter, model.dim)
        lp, g = f(q)
        if np.isfinite(lp) and np.isfinite(g).all():
            return q, lp, g
    raise RuntimeError("could not find a finite initial point in 100 attempts")


def run_chain(model, config: SamplerConfig, chain: int) -> dict:
    """Run one chain; returns a dict of per-iteration arrays.

    A non-finite gradient at a finite log density aborts with
    :class:`NonFiniteGradientError` naming the parameter segment.
    """
    try:
        return _run_chain(model, config, chain)
    except _BadGradient as e:
        raise NonFiniteGradientError(_segment(model, e.index), chain) from None


def _run_chain(model, config: SamplerConfig, chain: int) -> dict:
    rng = np.random.default_rng([config.seed, chain])
    f = model.logp_and_grad
    with np.errstate(all="ignore"):
        q, lp, g = _init_point(model, rng, config.init_jitter)
        dim = len(q)
        inv_m = np.ones(dim)
        eps = _initial_step_size(f, q, lp, g, inv_m, rng)
        da = DualAveraging(eps, config.target_accept)
        windows = warmup_windows(config.n_warmup)
        ends = {e for _, e in windows}
        buf = []
        n_total = config.n_warmup + config.n_draws
        D = config.n_draws
        out = {
            "draws": np.empty((D, dim)), "lp": np.empty(D), "accept": np.empty(D),
            "divergent": np.zeros(D, dtype=bool), "n_leapfrog": np.empty(D, dtype=np.int32),
        }
        warm_div = 0
        for it in range(n_total):
            warm = it < config.n_warmup
            n_steps = int(rng.integers(1, config.max_leapfrog + 1))
            p = rng.standard_normal(dim) / np.sqrt(inv_m)
            h0 = -lp + 0.5 * np.dot(p, inv_m * p)
            q1, p1, lp1, g1 = _leapfrog(f, q, p, g, eps, n_steps, inv_m, h0)
            h1 = -lp1 + 0.5 * np.dot(p1, inv_m * p1) if np.isfinite(lp1) else np.inf
            dh = h1 - h0
            divergent = not np.isfinite(dh) or dh > MAX_ENERGY_ERROR
            acc = 0.0 if divergent else float(min(1.0, np.exp(-dh)))
            if not divergent and rng.random() < acc:
                q, lp, g = q1, lp1, g1
            if warm:
                warm_div += divergent
                eps = da.update(acc)
                if any(s <= it < e for s, e in windows):
                    buf.append(q.copy())
                if it + 1 in ends:
                    arr = np.asarray(buf)
                    n = len(arr)
                    var = arr.var(axis=0, ddof=1) if n > 1 else np.ones(dim)
                    inv_m = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
                    buf = []
                    eps = _initial_step_size(f, q, lp, g, inv_m, rng)
                    da = DualAveraging(eps, config.target_accept)
                if it + 1 == config.n_warmup:
                    eps = da.final
            else:
                k = it - config.n_warmup
                out["draws"][k] = q
                out["lp"][k] = lp
                out["accept"][k] = acc
                out["divergent"][k] = divergent
                out["n_leapfrog"][k] = n_steps
    out.update(step_size=float(eps), inv_metric=inv_m, warmup_divergences=int(warm_div))
    return out


def _segment(model, index: int) -> str:
    im = getattr(model, "index_map", None)
    return im.segment_of(index) if im is not None else str(index)


def _run_chain_job(args):
    model, config, chain = args
    return run_chain(model, config, chain)


def sample(model, config: SamplerConfig | None = None) -> PosteriorDraws:
    """Draw from ``model`` (anything with ``logp_and_grad`` and ``dim``)."""
    config = config or SamplerConfig()
    if config.gradient_check:
        rng = np.random.default_rng([config.seed, 0])
        q, _, _ = _init_point(model, rng, config.init_jitter)
        with np.errstate(all="ignore"):
            gradient_check(model, q, rng=np.random.default_rng(config.seed))
    jobs = [(model, config, c) for c in range(config.n_chains)]
    if config.n_jobs > 1 and config.n_chains > 1:
        ctx = mp.get_context("spawn")
        with ProcessPoolExecutor(max_workers=min(config.n_jobs, config.n_chains), mp_context=ctx) as ex:
            results = list(ex.map(_run_chain_job, jobs))
    else:
        results = [_run_chain_job(j) for j in jobs]
    post = PosteriorDraws(
        draws=np.stack([r["draws"] for r in results]),
        index_map=model.index_map,
        lp=np.stack([r["lp"] for r in results]),
        accept=np.stack([r["accept"] for r in results]),
        divergent=np.stack([r["divergent"] for r in results]),
        n_leapfrog=np.stack([r["n_leapfrog"] for r in results]),
        step_size=np.array([r["step_size"] for r in results]),
        inv_metric=np.stack([r["inv_metric"] for r in results]),
        meta={"sampler": config.to_dict(),
              "warmup_divergences": [r["warmup_divergences"] for r in results]},
    )
    if not post.reliable(config.max_divergence_rate):
        log.warning("divergence rate %.1f%% exceeds %.0f%%: fit flagged unreliable",
                    100 * post.divergence_rate, 100 * config.max_divergence_rate)
    return post


# -- posterior container -------------------------------------------------------------

@dataclass
class PosteriorDraws:
    """Retained draws, ``n_chains x n_draws x dim``, plus per-draw statistics.

    ``derived`` holds extra quantities computed from the draws, either
    ``n_chains x n_draws`` scalars or ``n_chains x n_draws x k`` vectors; the
    element labels of vector quantities live in ``derived_labels``.
    """

    draws: np.ndarray
    index_map: IndexMap
    lp: np.ndarray | None = None
    accept: np.ndarray | None = None
    divergent: np.ndarray | None = None
    n_leapfrog: np.ndarray | None = None
    step_size: np.ndarray | None = None
    inv_metric: np.ndarray | None = None
    derived: dict = field(default_factory=dict)
    derived_labels: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.draws = np.asarray(self.draws, dtype=float)
        if self.draws.ndim != 3 or self.draws.shape[2] != self.index_map.dim:
            raise ValueError(f"draws must be chains x draws x {self.index_map.dim}")
        C, D = self.draws.shape[:2]
        if self.divergent is None:
            self.divergent = np.zeros((C, D), dtype=bool)

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_draws(self) -> int:
        return self.draws.shape[1]

    @property
    def dim(self) -> int:
        return self.draws.shape[2]

    def flat_draws(self) -> np.ndarray:
        """All draws, chain-major: ``(n_chains * n_draws) x dim``."""
        return self.draws.reshape(-1, self.dim)

    def has(self, key) -> bool:
        return key in self.derived or key in self.index_map

    def add_derived(self, name: str, values, labels=None) -> None:
        values = np.asarray(values, dtype=float)
        if values.shape[:2] != (self.n_chains, self.n_draws):
            raise ValueError(f"derived quantity {name!r} has shape {values.shape}")
        self.derived[name] = values
        if values.ndim == 3:
            self.derived_labels[name] = [str(x) for x in (labels if labels is not None
                                                          else range(values.shape[2]))]

    def get(self, key) -> np.ndarray:
        """``n_chains x n_draws [x k]`` draws of a derived quantity, segment or element."""
        if key in self.derived:
            return np.asarray(self.derived[key])
        if key in self.index_map:
            return self.index_map.get(self.draws, key)
        return self._column(key)[1][..., 0]

    def flat(self, key) -> np.ndarray:
        """Like :meth:`get` with chains and draws merged (chain-major)."""
        v = self.get(key)
        return v.reshape((-1,) + v.shape[2:])

    @property
    def divergence_rate(self) -> float:
        return float(np.mean(self.divergent))

    def reliable(self, max_rate: float = 0.10) -> bool:
        return self.divergence_rate <= max_rate

    def _column(self, key) -> tuple[list[str], np.ndarray]:
        if key in self.derived:
            v = np.asarray(self.derived[key])
            if v.ndim == 2:
                return [key], v[..., None]
            return [f"{key}[{lab}]" for lab in self.derived_labels[key]], v
        if isinstance(key, str) and key.endswith("]") and "[" in key:
            base, lab = key[:-1].split("[", 1)
            if base in self.derived_labels:
                j = self.derived_labels[base].index(lab)
                return [key], np.asarray(self.derived[base])[:, :, j:j + 1]
        idx = self.index_map.resolve(key)
        names_all = self.index_map.names()
        return [names_all[i] for i in idx], self.draws[:, :, idx]

    def columns(self, keys=None) -> tuple[list[str], np.ndarray]:
        """Flat names and ``C x D x k`` values for ``keys`` (default: everything)."""
        if keys is None:
            keys = [seg.name for seg in self.index_map] + list(self.derived)
        names, vals = [], []
        for key in keys:
            n, v = self._column(key)
            names.extend(n)
            vals.append(v)
        if not vals:
            return [], np.zeros((self.n_chains, self.n_draws, 0))
        return names, np.concatenate(vals, axis=2)


# -- diagnostics -----------------------------------------------------------------

def _split(x: np.ndarray) -> np.ndarray:
    """``C x D x P`` -> ``2C x floor(D/2) x P`` (middle draw dropped if odd)."""
    C, D = x.shape[:2]
    h = D // 2
    return np.concatenate([x[:, :h], x[:, D - h:]], axis=0)


def split_rhat(x) -> np.ndarray:
    """Split-chain potential scale reduction for ``C x D [x P]`` draws.

    Zero within-chain variance gives NaN when the chains also agree and inf
    when they do not.
    """
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[..., None]
    s = _split(x)
    n = s.shape[1]
    means = s.mean(axis=1)
    W = s.var(axis=1, ddof=1).mean(axis=0)
    B = n * means.var(axis=0, ddof=1)
    var_hat = (n - 1) / n * W + B / n
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.sqrt(var_hat / W)
    r = np.where(W > 0, r, np.where(B > 0, np.inf, np.nan))
    return r[0] if squeeze else r


def _autocov(x: np.ndarray) -> np.ndarray:
    """Autocovariance along axis 1 via FFT (biased, divides by n)."""
    n = x.shape[1]
    xc = x - x.mean(axis=1, keepdims=True)
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    fx = np.fft.rfft(xc, n=nfft, axis=1)
    ac = np.fft.irfft(fx * np.conj(fx), n=nfft, axis=1)[:, :n]
    return ac / n


def ess_from_chains(s: np.ndarray) -> np.ndarray:
    """ESS of ``M x N x P`` chains (already split) by Geyer's monotone sequence."""
    M, N, P = s.shape
    if N < 4:
        return np.full(P, np.nan)
    acov = _autocov(s)
    chain_var = acov[:, 0] * N / (N - 1)
    mean_var = chain_var.mean(axis=0)
    var_plus = mean_var * (N - 1) / N
    if M > 1:
        var_plus = var_plus + s.mean(axis=1).var(axis=0, ddof=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = 1.0 - (mean_var[None, :] - acov.mean(axis=0)) / var_plus[None, :]
    rho[0] = 1.0
    K = N // 2
    pairs = rho[0:2 * K:2] + rho[1:2 * K:2]
    neg = pairs < 0
    first_neg = np.where(neg.any(axis=0), neg.argmax(axis=0), K)
    pairs = np.minimum.accumulate(np.where(np.isfinite(pairs), pairs, 0.0), axis=0)
    keep = np.arange(K)[:, None] < first_neg[None, :]
    tau = -1.0 + 2.0 * np.sum(np.where(keep, pairs, 0.0), axis=0)
    tau = np.maximum(tau, 1.0 / np.log10(M * N))
    ess = M * N / tau
    return np.where(var_plus > 0, ess, np.nan)


def ess_bulk(x) -> np.ndarray:
    """Rank-normalized split-chain bulk effective sample size."""
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[..., None]
    s = _split(x)
    M, N, P = s.shape
    flat = s.reshape(M * N, P)
    r = rankdata(flat, axis=0, method="average")
    z = ndtri((r - 0.375) / (M * N + 0.25)).reshape(M, N, P)
    const = np.ptp(flat, axis=0) == 0
    e = ess_from_chains(z)
    e = np.where(const, np.nan, e)
    return e[0] if squeeze else e


@dataclass
class DiagReport:
    names: list[str]
    rhat: np.ndarray
    ess_bulk: np.ndarray
    n_divergent: int
    divergence_rate: float
    n_chains: int
    n_draws: int
    accept_rate: np.ndarray
    step_size: np.ndarray

    @property
    def max_rhat(self) -> float:
        finite = self.rhat[~np.isnan(self.rhat)]
        return float(finite.max()) if len(finite) else float("nan")

    @property
    def min_ess(self) -> float:
        finite = self.ess_bulk[np.isfinite(self.ess_bulk)]
        return float(finite.min()) if len(finite) else float("nan")

    def worst(self, k: int = 5) -> list[tuple[str, float]]:
        order = np.argsort(-np.nan_to_num(self.rhat, nan=-np.inf))[:k]
        return [(self.names[i], float(self.rhat[i])) for i in order]

    def converged(self, threshold: float = 1.05) -> bool:
        return not (self.max_rhat > threshold)

    def to_text(self) -> str:
        lines = [
            f"chains: {self.n_chains}, draws per chain: {self.n_draws}",
            f"max split R-hat: {self.max_rhat:.4f}",
            f"min bulk ESS: {self.min_ess:.1f}",
            f"divergent transitions: {self.n_divergent} ({100 * self.divergence_rate:.2f}%)",
            "acceptance by chain: " + ", ".join(f"{a:.3f}" for a in self.accept_rate),
            "step size by chain: " + ", ".join(f"{e:.4g}" for e in self.step_size),
            "largest R-hat: " + ", ".join(f"{n}={r:.4f}" for n, r in self.worst()),
        ]
        return "\n".join(lines) + "\n"

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("parameter,rhat,ess_bulk\n")
            for n, r, e in zip(self.names, self.rhat, self.ess_bulk):
                fh.write(f"{n},{_num(r)},{_num(e)}\n")


def diagnostics(post: PosteriorDraws, keys=None) -> DiagReport:
    if post.n_chains < 2 and post.n_draws < 4:
        raise ValueError("diagnostics need at least two chains or enough draws to split")
    names, vals = post.columns(keys)
    acc = post.accept.mean(axis=1) if post.accept is not None else np.full(post.n_chains, np.nan)
    eps = post.step_size if post.step_size is not None else np.full(post.n_chains, np.nan)
    return DiagReport(
        names=names, rhat=split_rhat(vals), ess_bulk=ess_bulk(vals),
        n_divergent=int(post.divergent.sum()), divergence_rate=post.divergence_rate,
        n_chains=post.n_chains, n_draws=post.n_draws, accept_rate=acc, step_size=np.asarray(eps),
    )


def write_trace_csv(post: PosteriorDraws, path, keys=None) -> None:
    """Long-format trace data: chain, iteration, parameter, value."""
    names, vals = post.columns(keys)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("chain,iteration,parameter,value\n")
        for j, name in enumerate(names):
            for c in range(post.n_chains):
                col = vals[c, :, j]
                fh.writelines(f"{c},{i},{name},{_num(v)}\n" for i, v in enumerate(col))


# -- summaries -------------------------------------------------------------------

SUMMARY_COLUMNS = ("mean", "sd", "q2.5", "q25", "q50", "q75", "q97.5", "pr_lt_0", "rhat", "ess_bulk")


@dataclass
class SummaryTable:
    names: list[str]
    values: np.ndarray  # rows x len(SUMMARY_COLUMNS)

    def row(self, name: str) -> dict:
        try:
            i = self.names.index(name)
        except ValueError:
            raise KeyError(name) from None
        return dict(zip(SUMMARY_COLUMNS, (float(v) for v in self.values[i])))

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("parameter," + ",".join(SUMMARY_COLUMNS) + "\n")
            for n, row in zip(self.names, self.values):
                fh.write(n + "," + ",".join(_num(v) for v in row) + "\n")

    def to_text(self) -> str:
        head = f"{'parameter':<24}" + "".join(f"{c:>10}" for c in SUMMARY_COLUMNS)
        lines = [head]
        for n, row in zip(self.names, self.values):
            lines.append(f"{n:<24}" + "".join(f"{v:>10.4f}" for v in row))
        return "\n".join(lines) + "\n"


def summarize(post: PosteriorDraws, keys, *, diagnostics: bool = True) -> SummaryTable:
    """Posterior summaries for names, segments or index ranges.

    Quantiles use linear interpolation between order statistics (type 7).
    """
    if isinstance(keys, (str, range, slice, int)):
        keys = [keys]
    names, vals = post.columns(keys)
    flat = vals.reshape(-1, vals.shape[2])
    q = np.quantile(flat, [0.025, 0.25, 0.5, 0.75, 0.975], axis=0)
    sd = flat.std(axis=0, ddof=1) if len(flat) > 1 else np.zeros(flat.shape[1])
    if diagnostics and post.n_draws >= 4:
        rh, es = split_rhat(vals), ess_bulk(vals)
    else:
        rh = es = np.full(flat.shape[1], np.nan)
    table = np.column_stack([flat.mean(axis=0), sd, *q, (flat < 0).mean(axis=0), rh, es])
    return SummaryTable(names, table)


# -- persistence -------------------------------------------------------------------

def _num(v) -> str:
    return repr(float(v))


def write_draws_csv(post: PosteriorDraws, path, keys=None) -> list[str]:
    """One row per retained draw: chain, iteration, then the named columns."""
    names, vals = post.columns(keys)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("chain,iteration," + ",".join(names) + "\n")
        for c in range(post.n_chains):
            for i in range(post.n_draws):
                fh.write(f"{c},{i}," + ",".join(map(_num, vals[c, i])) + "\n")
    return names


def write_wide_csv(post: PosteriorDraws, path, key: str = "eta") -> None:
    """One row per draw with one column per element of a vector quantity."""
    if key in post.derived:
        labels = post.derived_labels[key]
    else:
        seg = post.index_map[key]
        labels = seg.labels or [str(k) for k in range(seg.size)]
    vals = post.get(key)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("chain,iteration," + ",".join(labels) + "\n")
        for c in range(post.n_chains):
            for i in range(post.n_draws):
                fh.write(f"{c},{i}," + ",".join(map(_num, vals[c, i])) + "\n")


def read_table_csv(path) -> tuple[list[str], np.ndarray, np.ndarray, np.ndarray]:
    """Read a draws-style CSV: (column names, chain, iteration, values)."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header[2:], data[:, 0].astype(int), data[:, 1].astype(int), data[:, 2:]


def save_posterior(post: PosteriorDraws, out_dir, *, keys=None, wide=None) -> dict:
    """Persist draws (CSV), wide vector CSVs and a JSON manifest.

    Vector quantities named in ``wide`` (default: every parameter segment or
    derived vector with more than 50 elements) go to ``<name>.csv`` rather
    than ``draws.csv``. Returns the mapping of file roles to paths.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if wide is None:
        wide = [seg.name for seg in post.index_map if seg.size > 50]
        wide += [k for k, v in post.derived.items() if np.ndim(v) == 3 and np.shape(v)[2] > 50]
    wide = [w for w in wide if post.has(w)]
    if keys is None:
        keys = [seg.name for seg in post.index_map if seg.name not in wide]
        keys += [k for k in post.derived if k not in wide]
    files = {"draws": str(out / "draws.csv")}
    write_draws_csv(post, files["draws"], keys)
    for w in wide:
        files[w] = str(out / f"{w}.csv")
        write_wide_csv(post, files[w], w)
    stats = {
        "accept": None if post.accept is None else [[_num(v) for v in r] for r in post.accept],
        "divergent": post.divergent.astype(int).tolist(),
        "n_leapfrog": None if post.n_leapfrog is None else post.n_leapfrog.tolist(),
        "lp": None if post.lp is None else [[_num(v) for v in r] for r in post.lp],
        "step_size": None if post.step_size is None else [_num(v) for v in post.step_size],
    }
    manifest = {
        "n_chains": post.n_chains, "n_draws": post.n_draws,
        "index_map": post.index_map.to_dict(),
        "wide": wide, "derived": list(post.derived),
        "derived_labels": post.derived_labels,
        "meta": post.meta, "chain_stats": stats,
    }
    files["posterior"] = str(out / "posterior.json")
    Path(files["posterior"]).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n",
                                        encoding="utf-8")
    return files


def load_posterior(out_dir) -> PosteriorDraws:
    """Inverse of :func:`save_posterior` (parameters not persisted are NaN)."""
    out = Path(out_dir)
    man = json.loads((out / "posterior.json").read_text(encoding="utf-8"))
    im = IndexMap.from_dict(man["index_map"])
    C, D = man["n_chains"], man["n_draws"]
    draws = np.full((C, D, im.dim), np.nan)
    labels = man.get("derived_labels", {})
    derived = {}
    names, ch, it, vals = read_table_csv(out / "draws.csv")
    lookup = {n: k for k, n in enumerate(im.names())}
    for j, n in enumerate(names):
        if n in lookup:
            draws[ch, it, lookup[n]] = vals[:, j]
            continue
        base = n.split("[", 1)[0] if n.endswith("]") else n
        if base in labels:
            arr = derived.setdefault(base, np.full((C, D, len(labels[base])), np.nan))
            arr[ch, it, labels[base].index(n[len(base) + 1:-1])] = vals[:, j]
        else:
            arr = np.full((C, D), np.nan)
            arr[ch, it] = vals[:, j]
            derived[n] = arr
    for w in man.get("wide", []):
        _, ch, it, vals = read_table_csv(out / f"{w}.csv")
        if w in im:
            draws[ch, it, im.slice(w)] = vals
        else:
            arr = np.full((C, D, vals.shape[1]), np.nan)
            arr[ch, it] = vals
            derived[w] = arr
    cs = man.get("chain_stats", {})

    def arr_of(key, dtype=float):
        v = cs.get(key)
        return None if v is None else np.asarray(v, dtype=float).astype(dtype)

    post = PosteriorDraws(
        draws=draws, index_map=im, lp=arr_of("lp"), accept=arr_of("accept"),
        divergent=arr_of("divergent", bool), n_leapfrog=arr_of("n_leapfrog", np.int32),
        step_size=arr_of("step_size"), meta=man.get("meta", {}),
    )
    order = man.get("derived", list(derived))
    for k in order:
        if k in derived:
            post.add_derived(k, derived[k], labels.get(k))
    return post
