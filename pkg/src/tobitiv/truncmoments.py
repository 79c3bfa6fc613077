"""Product moments of normal variables truncated to the positive quadrant.

Three independent routes are provided:

* a one-line upward recursion for univariate truncated moments,
* a deterministic tensor-product Gauss-Legendre quadrature for bivariate
  moments, with interval-halving error control,
* a rejection-sampling Monte Carlo estimator.

``moment_identity_residual`` combines five quadrature moments to check the
identity that the panel moment conditions in :mod:`tobitiv.moments` rest on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate, special

from .errors import (
    ConvergenceError,
    DomainError,
    InsufficientAcceptanceError,
    UnsupportedOrderError,
)

MAX_TOTAL_ORDER = 8

_SQRT_2PI = math.sqrt(2.0 * math.pi)


def _check_finite(name, value):
    if not math.isfinite(value):
        raise DomainError(f"{name} must be finite, got {value!r}")


@dataclass(frozen=True)
class UnivariateNormalSpec:
    """Mean and variance of a latent normal variable."""

    mu: float
    sigma2: float

    def __post_init__(self):
        _check_finite("mu", self.mu)
        _check_finite("sigma2", self.sigma2)
        if self.sigma2 <= 0.0:
            raise DomainError(f"sigma2 must be positive, got {self.sigma2}")

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)


@dataclass(frozen=True)
class BivariateNormalSpec:
    """Means and covariance of a latent normal pair."""

    mu1: float
    mu2: float
    sigma1_sq: float
    sigma2_sq: float
    sigma12: float

    def __post_init__(self):
        for name in ("mu1", "mu2", "sigma1_sq", "sigma2_sq", "sigma12"):
            _check_finite(name, getattr(self, name))
        if self.sigma1_sq <= 0.0 or self.sigma2_sq <= 0.0:
            raise DomainError("variances must be strictly positive")
        if self.sigma12**2 >= self.sigma1_sq * self.sigma2_sq:
            raise DomainError(
                "covariance matrix is not strictly positive definite: "
                f"sigma12^2 = {self.sigma12**2} >= {self.sigma1_sq * self.sigma2_sq}"
            )

    @property
    def sigma1(self) -> float:
        return math.sqrt(self.sigma1_sq)

    @property
    def sigma2(self) -> float:
        return math.sqrt(self.sigma2_sq)

    @property
    def rho(self) -> float:
        return self.sigma12 / (self.sigma1 * self.sigma2)

    def swapped(self) -> "BivariateNormalSpec":
        """Same distribution with the coordinate labels exchanged."""
        return BivariateNormalSpec(
            self.mu2, self.mu1, self.sigma2_sq, self.sigma1_sq, self.sigma12
        )


@dataclass(frozen=True)
class MomentQuery:
    """Exponent pair (k on the first coordinate, m on the second)."""

    k: int
    m: int
    max_total_order: int = MAX_TOTAL_ORDER

    def __post_init__(self):
        if self.k < 0 or self.m < 0:
            raise DomainError(f"exponents must be non-negative, got k={self.k}, m={self.m}")
        if self.k + self.m > self.max_total_order:
            raise UnsupportedOrderError(
                f"k + m = {self.k + self.m} exceeds the maximum order {self.max_total_order}"
            )


def _mills_ratio(a: float) -> float:
    """phi(a) / Phi(a), accurate for a down to at least -8."""
    phi = math.exp(-0.5 * a * a) / _SQRT_2PI
    Phi = special.ndtr(a)
    return phi / Phi


def univariate_truncated_moment(
    spec: UnivariateNormalSpec, k: int, max_order: int = MAX_TOTAL_ORDER
) -> float:
    """E[U^k | U > 0] for U ~ N(mu, sigma2), by upward recursion.

    The recursion E[U^{k+1}|U>0] = mu E[U^k|U>0] + sigma2 k E[U^{k-1}|U>0]
    starts from k = 0 (unity) and k = 1 (mean of the one-sided truncated
    normal, evaluated through the complementary error function).
    """
    if k < 0 or k != int(k):
        raise DomainError(f"k must be a non-negative integer, got {k!r}")
    if k > max_order:
        raise UnsupportedOrderError(f"k = {k} exceeds the maximum order {max_order}")
    if k == 0:
        return 1.0
    sigma = spec.sigma
    m_prev = 1.0
    m_cur = spec.mu + sigma * _mills_ratio(spec.mu / sigma)
    for j in range(1, k):
        m_prev, m_cur = m_cur, spec.mu * m_cur + spec.sigma2 * j * m_prev
    return m_cur


def univariate_truncated_moment_quad(spec: UnivariateNormalSpec, k: int) -> float:
    """Independent 1D adaptive-quadrature oracle for E[U^k | U > 0]."""
    sigma = spec.sigma
    hi = spec.mu + 12.0 * sigma

    def integrand(u):
        z = (u - spec.mu) / sigma
        return u**k * math.exp(-0.5 * z * z) / (_SQRT_2PI * sigma)

    num, _ = integrate.quad(integrand, 0.0, hi, epsabs=1e-13, epsrel=1e-13, limit=400)
    return num / special.ndtr(spec.mu / sigma)


@lru_cache(maxsize=8)
def _gauss_legendre(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return x, w


def _panel_nodes(hi: float, n_panels: int, n_nodes: int):
    """Composite Gauss-Legendre nodes and weights on [0, hi]."""
    x, w = _gauss_legendre(n_nodes)
    edges = np.linspace(0.0, hi, n_panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def _raw_quadrant_integrals(spec: BivariateNormalSpec, amax: int, bmax: int, pps: int):
    """Integrals of u1^a u2^b f(u1, u2) over the positive quadrant.

    Returns an (amax+1, bmax+1) matrix; entry (0, 0) is the quadrant
    probability. ``pps`` is the number of quadrature panels per standard
    deviation along each axis.
    """
    s1, s2, rho = spec.sigma1, spec.sigma2, spec.rho
    hi1 = spec.mu1 + 10.0 * s1
    hi2 = spec.mu2 + 10.0 * s2
    n1 = max(2, int(math.ceil(hi1 / s1 * pps)))
    n2 = max(2, int(math.ceil(hi2 / s2 * pps)))
    u1, w1 = _panel_nodes(hi1, n1, 20)
    u2, w2 = _panel_nodes(hi2, n2, 20)

    z1 = (u1 - spec.mu1) / s1
    z2 = (u2 - spec.mu2) / s2
    one_minus_r2 = 1.0 - rho * rho
    quad_form = (
        z1[:, None] ** 2 - 2.0 * rho * z1[:, None] * z2[None, :] + z2[None, :] ** 2
    ) / one_minus_r2
    dens = np.exp(-0.5 * quad_form) / (2.0 * math.pi * s1 * s2 * math.sqrt(one_minus_r2))

    weighted = (w1[:, None] * dens) * w2[None, :]
    pow1 = np.vander(u1, amax + 1, increasing=True)  # (len(u1), amax+1)
    pow2 = np.vander(u2, bmax + 1, increasing=True)
    return pow1.T @ weighted @ pow2


def quadrant_moments(
    spec: BivariateNormalSpec,
    exponent_pairs: list[tuple[int, int]],
    tol: float = 1e-8,
) -> dict[tuple[int, int], float]:
    """Conditional moments E[U1^a U2^b | U1>0, U2>0] for several (a, b) at once.

    All requested moments are evaluated on a shared quadrature grid, which is
    refined (panels halved) until every moment is stable to within ``tol``
    absolute.
    """
    if tol <= 0.0:
        raise DomainError(f"tol must be positive, got {tol}")
    for a, b in exponent_pairs:
        MomentQuery(a, b)  # validates range
    amax = max((a for a, _ in exponent_pairs), default=0)
    bmax = max((b for _, b in exponent_pairs), default=0)

    prev = None
    err = math.inf
    for pps in (1, 2, 4, 8):
        raw = _raw_quadrant_integrals(spec, amax, bmax, pps)
        cond = raw / raw[0, 0]
        if prev is not None:
            err = max(abs(cond[a, b] - prev[a, b]) for a, b in exponent_pairs)
            if err <= tol:
                return {(a, b): float(cond[a, b]) for a, b in exponent_pairs}
        prev = cond
    raise ConvergenceError(
        f"quadrature did not converge to tol={tol}; achieved {err:.3e}", achieved=err
    )


def bivariate_truncated_moment_quad(
    spec: BivariateNormalSpec, q: MomentQuery, tol: float = 1e-8
) -> float:
    """E[U1^k U2^m | U1>0, U2>0] by deterministic quadrature."""
    return quadrant_moments(spec, [(q.k, q.m)], tol)[(q.k, q.m)]


def bivariate_truncated_moment_mc(
    spec: BivariateNormalSpec,
    q: MomentQuery,
    n_draws: int,
    seed: int,
) -> tuple[float, float]:
    """Rejection-sampling oracle for E[U1^k U2^m | U1>0, U2>0].

    Draws (U1, U2) by the two-step conditional construction, keeps pairs in
    the positive quadrant, and returns the sample mean of U1^k U2^m together
    with its standard error. Deterministic given ``seed``.
    """
    if n_draws < 1000:
        raise DomainError(f"n_draws must be at least 1000, got {n_draws}")
    rng = np.random.Generator(np.random.PCG64(seed))
    s1 = spec.sigma1
    cond_slope = spec.sigma12 / spec.sigma1_sq
    cond_sd = math.sqrt(spec.sigma2_sq - spec.sigma12**2 / spec.sigma1_sq)

    # chunked Welford accumulation keeps memory flat at large n_draws
    count = 0
    mean = 0.0
    m2 = 0.0
    remaining = n_draws
    while remaining > 0:
        chunk = min(remaining, 2_000_000)
        remaining -= chunk
        u1 = spec.mu1 + s1 * rng.standard_normal(chunk)
        u2 = spec.mu2 + cond_slope * (u1 - spec.mu1) + cond_sd * rng.standard_normal(chunk)
        keep = (u1 > 0.0) & (u2 > 0.0)
        vals = u1[keep] ** q.k * u2[keep] ** q.m
        nc = vals.size
        if nc == 0:
            continue
        c_mean = float(vals.mean())
        c_m2 = float(((vals - c_mean) ** 2).sum())
        delta = c_mean - mean
        total = count + nc
        m2 += c_m2 + delta * delta * count * nc / total
        mean += delta * nc / total
        count = total

    if count < 100:
        raise InsufficientAcceptanceError(
            f"only {count} of {n_draws} draws fell in the positive quadrant",
            acceptance_rate=count / n_draws,
        )
    var = m2 / (count - 1)
    return mean, math.sqrt(var / count)


def moment_identity_residual(
    spec: BivariateNormalSpec, q: MomentQuery, tol: float = 1e-7
) -> float:
    """Residual of the truncated-bivariate-normal moment identity.

    For k, m >= 1 the identity states

        E[U1^{k+1} U2^m - U1^k U2^{m+1} | U1>0, U2>0]
          = (mu1 - mu2) E[U1^k U2^m | .]
          + (sigma1_sq - sigma12) k E[U1^{k-1} U2^m | .]
          - (sigma2_sq - sigma12) m E[U1^k U2^{m-1} | .]

    The five constituent moments are evaluated by quadrature at tolerance
    tol/10; |residual| <= 5 tol certifies the identity at this point.
    """
    if q.k < 1 or q.m < 1:
        raise DomainError(f"identity requires k >= 1 and m >= 1, got k={q.k}, m={q.m}")
    k, m = q.k, q.m
    pairs = [(k + 1, m), (k, m + 1), (k, m), (k - 1, m), (k, m - 1)]
    mom = quadrant_moments(spec, pairs, tol / 10.0)
    lhs = mom[(k + 1, m)] - mom[(k, m + 1)]
    rhs = (
        (spec.mu1 - spec.mu2) * mom[(k, m)]
        + (spec.sigma1_sq - spec.sigma12) * k * mom[(k - 1, m)]
        - (spec.sigma2_sq - spec.sigma12) * m * mom[(k, m - 1)]
    )
    return lhs - rhs
