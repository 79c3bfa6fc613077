"""Synthetic censored/truncated panel generation for each latent-variable model.

Every variant shares the skeleton y*_it = x_it' beta + (fixed-effect term) + e_it
with jointly normal errors; they differ in how the individual effect enters and
in the error covariance structure. Latent outcomes and the individual effects
are retained on the dataset for white-box testing but are excluded from the
on-disk estimation format.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

import numpy as np

from .errors import ConfigurationError, InsufficientAcceptanceError, UnsupportedModeError


class ModelVariant(str, Enum):
    CROSS_SECTION = "CrossSection"
    INDEPENDENT_ERRORS = "IndependentErrors"
    NON_STATIONARY = "NonStationary"
    FACTOR_LOADING = "FactorLoading"
    VARIANCE_FE = "VarianceFE"
    ADDITIVE_VARIANCE = "AdditiveVariance"
    SLOPE_FE = "SlopeFE"


class Sampling(str, Enum):
    CENSORED = "Censored"
    TRUNCATED = "Truncated"


@dataclass(frozen=True)
class NormalDist:
    mu: float = 0.0
    sigma: float = 1.0

    def sample(self, rng, shape):
        return self.mu + self.sigma * rng.standard_normal(shape)

    def to_dict(self):
        return {"type": "normal", "mu": self.mu, "sigma": self.sigma}


@dataclass(frozen=True)
class LogNormalDist:
    """exp(N(mu, sigma^2)); strictly positive, used for z."""

    mu: float = 0.0
    sigma: float = 0.5

    def sample(self, rng, shape):
        return np.exp(self.mu + self.sigma * rng.standard_normal(shape))

    def to_dict(self):
        return {"type": "lognormal", "mu": self.mu, "sigma": self.sigma}


@dataclass(frozen=True)
class ShiftedHalfNormalDist:
    """shift + scale * |N(0,1)|; strictly positive support for variances."""

    shift: float = 0.5
    scale: float = 1.0

    def sample(self, rng, shape):
        return self.shift + self.scale * np.abs(rng.standard_normal(shape))

    def to_dict(self):
        return {"type": "shifted_halfnormal", "shift": self.shift, "scale": self.scale}


@dataclass(frozen=True)
class LinearIndexDist:
    """alpha_i = index_coef * mean_t(x_it' beta) + noise_sigma * N(0,1).

    The dependence on the regressor index is deliberate: it is what makes
    pooled estimators that ignore the individual effect visibly biased.
    """

    index_coef: float = 1.0
    noise_sigma: float = 1.0

    def sample(self, rng, mean_index):
        return self.index_coef * mean_index + self.noise_sigma * rng.standard_normal(
            mean_index.shape
        )

    def to_dict(self):
        return {
            "type": "linear_index",
            "index_coef": self.index_coef,
            "noise_sigma": self.noise_sigma,
        }


_DIST_TYPES = {
    "normal": NormalDist,
    "lognormal": LogNormalDist,
    "shifted_halfnormal": ShiftedHalfNormalDist,
    "linear_index": LinearIndexDist,
}


def dist_from_dict(d: dict):
    kind = d.get("type")
    if kind not in _DIST_TYPES:
        raise ConfigurationError(f"unknown distribution type {kind!r}", field="type")
    cls = _DIST_TYPES[kind]
    kwargs = {k: v for k, v in d.items() if k != "type"}
    return cls(**kwargs)


ScalarDist = Union[NormalDist, LogNormalDist, ShiftedHalfNormalDist]


@dataclass(frozen=True)
class PanelConfig:
    variant: ModelVariant
    n_individuals: int
    n_periods: int
    n_regressors: int
    beta: tuple
    error_cov: tuple  # T x T, nested tuples
    seed: int
    sampling: Sampling = Sampling.CENSORED
    factor_loadings: Optional[tuple] = None
    variance_fe_dist: Optional[ShiftedHalfNormalDist] = None
    fe_dist: LinearIndexDist = field(default_factory=LinearIndexDist)
    x_dist: NormalDist = field(default_factory=NormalDist)
    z_dist: Optional[LogNormalDist] = None

    def __post_init__(self):
        object.__setattr__(self, "variant", ModelVariant(self.variant))
        object.__setattr__(self, "sampling", Sampling(self.sampling))
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        object.__setattr__(
            self, "error_cov", tuple(tuple(float(v) for v in row) for row in self.error_cov)
        )
        if self.factor_loadings is not None:
            object.__setattr__(
                self, "factor_loadings", tuple(float(r) for r in self.factor_loadings)
            )

    def validate(self):
        N, T, K = self.n_individuals, self.n_periods, self.n_regressors
        if N < 1:
            raise ConfigurationError("n_individuals must be positive", field="n_individuals")
        min_T = 1 if self.variant is ModelVariant.CROSS_SECTION else 2
        if self.variant in (ModelVariant.VARIANCE_FE, ModelVariant.ADDITIVE_VARIANCE):
            min_T = 3
        if T < min_T:
            raise ConfigurationError(
                f"variant {self.variant.value} requires n_periods >= {min_T}, got {T}",
                field="n_periods",
            )
        if K < 1:
            raise ConfigurationError("n_regressors must be positive", field="n_regressors")
        if len(self.beta) != K:
            raise ConfigurationError(
                f"beta has length {len(self.beta)}, expected {K}", field="beta"
            )
        cov = np.asarray(self.error_cov, dtype=float)
        if cov.shape != (T, T):
            raise ConfigurationError(
                f"error_cov has shape {cov.shape}, expected ({T}, {T})", field="error_cov"
            )
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ConfigurationError("error_cov must be symmetric", field="error_cov")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ConfigurationError(
                "error_cov must be positive definite", field="error_cov"
            ) from None
        if (self.factor_loadings is not None) != (
            self.variant is ModelVariant.FACTOR_LOADING
        ):
            raise ConfigurationError(
                "factor_loadings must be present exactly for the FactorLoading variant",
                field="factor_loadings",
            )
        if self.factor_loadings is not None:
            if len(self.factor_loadings) != T:
                raise ConfigurationError(
                    "factor_loadings must have one entry per period", field="factor_loadings"
                )
            if not math.isclose(self.factor_loadings[0], 1.0):
                raise ConfigurationError(
                    "the first factor loading is the scale normalization and must be 1",
                    field="factor_loadings",
                )
        if (self.z_dist is not None) != (self.variant is ModelVariant.SLOPE_FE):
            raise ConfigurationError(
                "z_dist must be present exactly for the SlopeFE variant", field="z_dist"
            )
        needs_var_fe = self.variant in (
            ModelVariant.VARIANCE_FE,
            ModelVariant.ADDITIVE_VARIANCE,
        )
        if (self.variance_fe_dist is not None) != needs_var_fe:
            raise ConfigurationError(
                "variance_fe_dist must be present exactly for the VarianceFE and "
                "AdditiveVariance variants",
                field="variance_fe_dist",
            )

    def to_dict(self):
        d = {
            "variant": self.variant.value,
            "n_individuals": self.n_individuals,
            "n_periods": self.n_periods,
            "n_regressors": self.n_regressors,
            "beta": list(self.beta),
            "error_cov": [list(r) for r in self.error_cov],
            "seed": self.seed,
            "sampling": self.sampling.value,
            "fe_dist": self.fe_dist.to_dict(),
            "x_dist": self.x_dist.to_dict(),
        }
        if self.factor_loadings is not None:
            d["factor_loadings"] = list(self.factor_loadings)
        if self.variance_fe_dist is not None:
            d["variance_fe_dist"] = self.variance_fe_dist.to_dict()
        if self.z_dist is not None:
            d["z_dist"] = self.z_dist.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PanelConfig":
        kwargs = dict(d)
        for key in ("fe_dist", "x_dist", "z_dist", "variance_fe_dist"):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = dist_from_dict(kwargs[key])
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigurationError(f"bad panel config: {exc}") from None


@dataclass
class PanelDataset:
    y: np.ndarray  # (N, T) observed
    x: np.ndarray  # (N, T, K)
    config: PanelConfig
    z: Optional[np.ndarray] = None  # (N, T)
    latent_y: Optional[np.ndarray] = None  # test-only
    alpha: Optional[np.ndarray] = None  # test-only
    sigma_i_sq: Optional[np.ndarray] = None  # test-only
    n_drawn: int = 0  # individuals generated, >= N under truncation

    @property
    def n_individuals(self) -> int:
        return self.y.shape[0]

    @property
    def n_periods(self) -> int:
        return self.y.shape[1]

    @property
    def n_regressors(self) -> int:
        return self.x.shape[2]


def _draw_batch(config: PanelConfig, rng, n: int):
    """One batch of n individuals; fixed draw order keeps output reproducible."""
    T, K = config.n_periods, config.n_regressors
    beta = np.asarray(config.beta)
    x = config.x_dist.sample(rng, (n, T, K))
    index = x @ beta  # (n, T)

    z = None
    if config.variant is ModelVariant.SLOPE_FE:
        z = config.z_dist.sample(rng, (n, T))

    if config.variant is ModelVariant.CROSS_SECTION:
        alpha = np.zeros(n)
    else:
        alpha = config.fe_dist.sample(rng, index.mean(axis=1))

    sigma_i_sq = None
    if config.variant is ModelVariant.VARIANCE_FE:
        sigma_i_sq = config.variance_fe_dist.sample(rng, n)
        eps = np.sqrt(sigma_i_sq)[:, None] * rng.standard_normal((n, T))
    elif config.variant is ModelVariant.ADDITIVE_VARIANCE:
        sigma_i_sq = config.variance_fe_dist.sample(rng, n)
        sigma_t_sq = np.diag(np.asarray(config.error_cov))
        var = sigma_i_sq[:, None] + sigma_t_sq[None, :]
        eps = np.sqrt(var) * rng.standard_normal((n, T))
    else:
        L = np.linalg.cholesky(np.asarray(config.error_cov))
        eps = rng.standard_normal((n, T)) @ L.T

    if config.variant is ModelVariant.CROSS_SECTION:
        fe_term = 0.0
    elif config.variant is ModelVariant.FACTOR_LOADING:
        fe_term = np.asarray(config.factor_loadings)[None, :] * alpha[:, None]
    elif config.variant is ModelVariant.SLOPE_FE:
        fe_term = z * alpha[:, None]
    else:
        fe_term = alpha[:, None]

    latent = index + fe_term + eps
    return x, z, alpha, sigma_i_sq, latent


_TRUNCATION_OVERSAMPLE_CAP = 100


def simulate(config: PanelConfig) -> PanelDataset:
    """Generate a panel dataset; deterministic given the config (incl. seed)."""
    config.validate()
    rng = np.random.Generator(np.random.Philox(key=config.seed))
    N = config.n_individuals

    if config.sampling is Sampling.CENSORED:
        x, z, alpha, sig_i, latent = _draw_batch(config, rng, N)
        return PanelDataset(
            y=np.maximum(0.0, latent),
            x=x,
            z=z,
            latent_y=latent,
            alpha=alpha,
            sigma_i_sq=sig_i,
            config=config,
            n_drawn=N,
        )

    # Truncated sampling: only individuals with all periods positive are
    # observed at all; resample until N such individuals are collected.
    parts = []
    kept = 0
    drawn = 0
    while kept < N:
        if drawn >= _TRUNCATION_OVERSAMPLE_CAP * N:
            raise InsufficientAcceptanceError(
                f"truncated sampling kept only {kept} of the requested {N} "
                f"individuals after {drawn} draws",
                acceptance_rate=kept / drawn,
            )
        n_batch = min(N, _TRUNCATION_OVERSAMPLE_CAP * N - drawn)
        x, z, alpha, sig_i, latent = _draw_batch(config, rng, n_batch)
        drawn += n_batch
        keep = np.all(latent > 0.0, axis=1)
        parts.append((x[keep], None if z is None else z[keep], alpha[keep],
                      None if sig_i is None else sig_i[keep], latent[keep]))
        kept += int(keep.sum())

    def _cat(idx):
        arrays = [p[idx] for p in parts]
        return None if arrays[0] is None else np.concatenate(arrays)[:N]

    latent = _cat(4)
    return PanelDataset(
        y=latent.copy(),
        x=_cat(0),
        z=_cat(1),
        latent_y=latent,
        alpha=_cat(2),
        sigma_i_sq=_cat(3),
        config=config,
        n_drawn=drawn,
    )


def censoring_rate(dataset: PanelDataset) -> float:
    """Fraction of observed cells censored at zero."""
    if dataset.config.sampling is not Sampling.CENSORED:
        raise UnsupportedModeError("censoring rate is undefined for truncated sampling")
    return float(np.mean(dataset.y == 0.0))


_FMT = "%.17g"


def save_dataset(dataset: PanelDataset, out_dir: str) -> None:
    """Write the estimation input format: meta.json + flat CSVs.

    Latent outcomes and individual effects are test-only and deliberately
    not serialized.
    """
    os.makedirs(out_dir, exist_ok=True)
    N, T, K = dataset.n_individuals, dataset.n_periods, dataset.n_regressors
    meta = {
        "format_version": 1,
        "variant": dataset.config.variant.value,
        "sampling": dataset.config.sampling.value,
        "n_individuals": N,
        "n_periods": T,
        "n_regressors": K,
        "has_z": dataset.z is not None,
        "n_drawn": dataset.n_drawn,
        "config": dataset.config.to_dict(),
        "created_unix": time.time(),
    }
    if dataset.config.sampling is Sampling.CENSORED:
        meta["censoring_rate"] = censoring_rate(dataset)
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")

    y_header = ",".join(f"t{t}" for t in range(T))
    np.savetxt(os.path.join(out_dir, "y.csv"), dataset.y, fmt=_FMT, delimiter=",",
               header=y_header, comments="", newline="\n")
    x_header = ",".join(f"x{k}" for k in range(K))
    np.savetxt(os.path.join(out_dir, "x.csv"), dataset.x.reshape(N * T, K), fmt=_FMT,
               delimiter=",", header=x_header, comments="", newline="\n")
    if dataset.z is not None:
        np.savetxt(os.path.join(out_dir, "z.csv"), dataset.z, fmt=_FMT, delimiter=",",
                   header=y_header, comments="", newline="\n")


def load_dataset(data_dir: str) -> PanelDataset:
    """Read a dataset directory written by :func:`save_dataset`.

    The returned dataset carries no latent truth (blind to estimators).
    """
    meta_path = os.path.join(data_dir, "meta.json")
    if not os.path.exists(meta_path):
        raise ConfigurationError(f"no meta.json in {data_dir}", field="data_dir")
    with open(meta_path) as fh:
        meta = json.load(fh)
    config = PanelConfig.from_dict(meta["config"])
    N, T, K = meta["n_individuals"], meta["n_periods"], meta["n_regressors"]
    y = np.loadtxt(os.path.join(data_dir, "y.csv"), delimiter=",", skiprows=1, ndmin=2)
    x = np.loadtxt(os.path.join(data_dir, "x.csv"), delimiter=",", skiprows=1, ndmin=2)
    z = None
    if meta.get("has_z"):
        z = np.loadtxt(os.path.join(data_dir, "z.csv"), delimiter=",", skiprows=1, ndmin=2)
        z = z.reshape(N, T)
    return PanelDataset(
        y=y.reshape(N, T),
        x=x.reshape(N, T, K),
        z=z,
        config=config,
        n_drawn=meta.get("n_drawn", N),
    )
