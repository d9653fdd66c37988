"""Standardize, build the model, sample, attach derived quantities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ps_model import ModelSpec, PSModel
from .sampler import DiagReport, PosteriorDraws, SamplerConfig, diagnostics, sample, summarize
from .trial_data import StandardizationInfo, TrialDataset, standardize

SCALE_NAMES = ("sd_teacher_Y", "sd_school_Y", "sd_teacher_M", "sd_school_M", "sigma_M")
DEFAULT_MAX_LEAPFROG = 48
HEADLINE = ("b0", "b1", "a", "slope_iqr", "sigma_Y[control]", "sigma_Y[treated]", "sigma_M")


@dataclass
class FitResult:
    posterior: PosteriorDraws
    model: PSModel
    info: StandardizationInfo
    sampler: SamplerConfig

    @property
    def spec(self) -> ModelSpec:
        return self.model.spec

    @property
    def dataset(self) -> TrialDataset:
        """The prepared dataset the model was fit to."""
        return self.model.dataset

    def diagnostics(self, keys=None) -> DiagReport:
        return diagnostics(self.posterior, keys)

    def summary(self, keys=None):
        if keys is None:
            keys = headline_keys(self.posterior)
        return summarize(self.posterior, keys)

    def mean(self, key) -> np.ndarray:
        return np.mean(self.posterior.get(key), axis=(0, 1))


def headline_keys(post: PosteriorDraws, extra=("alpha_M",)) -> list[str]:
    """Headline quantities present in ``post`` (parameters, derived or elements)."""
    keys = []
    for k in HEADLINE + tuple(extra):
        try:
            post.get(k)
        except (KeyError, ValueError):
            continue
        keys.append(k)
    return keys


def prepare(dataset: TrialDataset, spec: ModelSpec) -> tuple[TrialDataset, StandardizationInfo]:
    return standardize(dataset, covariates=spec.standardize_covariates,
                       scale_y=spec.standardize_y, pretest_square=spec.pretest_square)


def add_derived(post: PosteriorDraws, model: PSModel) -> None:
    """Attach constrained scalars, ``eta`` and the standardized slope to ``post``."""
    q = model.quantities(post.draws)
    for name in ("b0", "b1", "a", "slope_iqr", "alpha_M") + SCALE_NAMES:
        if name in q and np.ndim(q[name]) == 2:
            post.add_derived(name, q[name])
    if "sigma_Y" in q:
        post.add_derived("sigma_Y[control]", q["sigma_Y"][..., 0])
        post.add_derived("sigma_Y[treated]", q["sigma_Y"][..., 1])
    ids = model.dataset.student_ids
    if model.spec.variant == "mbar":
        post.add_derived("mbar", q["stratifier"], ids)
    else:
        post.add_derived("eta", q["stratifier"], ids)


def default_sampler(**kw) -> SamplerConfig:
    """Sampler defaults for this model (longer trajectories than the generic default)."""
    kw.setdefault("max_leapfrog", DEFAULT_MAX_LEAPFROG)
    return SamplerConfig(**kw)


def fit(dataset: TrialDataset, spec: ModelSpec | None = None,
        sampler: SamplerConfig | None = None, *, prepared: bool = False) -> FitResult:
    """Fit the model to raw trial data (standardized here unless ``prepared``)."""
    spec = spec or ModelSpec()
    sampler = sampler or default_sampler()
    if prepared:
        ds, info = dataset, StandardizationInfo((), (), (), 1.0, False)
    else:
        ds, info = prepare(dataset, spec)
    model = PSModel(ds, spec)
    post = sample(model, sampler)
    add_derived(post, model)
    post.meta["model"] = spec.to_dict()
    post.meta["standardization"] = info.to_dict()
    return FitResult(post, model, info, sampler)
