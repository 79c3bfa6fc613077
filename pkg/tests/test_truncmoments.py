"""Moment engine tests: frozen oracle values, invariants, and error paths."""

import math

import numpy as np
import pytest
from scipy.special import ndtr

from tobitiv import (
    BivariateNormalSpec,
    MomentQuery,
    UnivariateNormalSpec,
    bivariate_truncated_moment_mc,
    bivariate_truncated_moment_quad,
    moment_identity_residual,
    quadrant_moments,
    univariate_truncated_moment,
    univariate_truncated_moment_quad,
)
from tobitiv.errors import (
    DomainError,
    InsufficientAcceptanceError,
    UnsupportedOrderError,
)


def mills(a):
    """phi(a) / Phi(a), the closed-form oracle for the truncated mean."""
    return math.exp(-0.5 * a * a) / math.sqrt(2.0 * math.pi) / ndtr(a)


def truncated_mean(mu, sigma2):
    s = math.sqrt(sigma2)
    return mu + s * mills(mu / s)


class TestUnivariate:
    def test_standard_normal_mean_frozen(self):
        # E[U | U > 0] for U ~ N(0, 1) is sqrt(2 / pi).
        got = univariate_truncated_moment(UnivariateNormalSpec(0.0, 1.0), 1)
        assert got == pytest.approx(0.7978845608028654, abs=1e-12)
        assert got == pytest.approx(math.sqrt(2.0 / math.pi), abs=1e-13)

    def test_third_moment_frozen(self):
        # Value derived once from two independent oracles (adaptive 1D
        # quadrature and the closed-form recursion seeded by the Mills ratio).
        got = univariate_truncated_moment(UnivariateNormalSpec(2.0, 0.25), 3)
        assert got == pytest.approx(9.500301127545056, rel=1e-13)

    @pytest.mark.parametrize("mu", [-1.5, -0.5, 0.0, 0.7, 2.0])
    @pytest.mark.parametrize("sigma2", [0.25, 1.0, 4.0])
    def test_first_moment_closed_form(self, mu, sigma2):
        got = univariate_truncated_moment(UnivariateNormalSpec(mu, sigma2), 1)
        assert got == pytest.approx(truncated_mean(mu, sigma2), rel=1e-12)

    @pytest.mark.parametrize("mu", [-1.0, 0.0, 1.3])
    @pytest.mark.parametrize("sigma2", [0.5, 2.0])
    @pytest.mark.parametrize("k", [0, 1, 2, 3, 4, 5])
    def test_recursion_matches_quadrature(self, mu, sigma2, k):
        spec = UnivariateNormalSpec(mu, sigma2)
        rec = univariate_truncated_moment(spec, k)
        quad = univariate_truncated_moment_quad(spec, k)
        assert rec == pytest.approx(quad, rel=1e-8, abs=1e-8)

    def test_moments_increase_with_k_for_large_mean(self):
        # With nearly all mass above 1, higher powers dominate.
        spec = UnivariateNormalSpec(3.0, 1.0)
        vals = [univariate_truncated_moment(spec, k) for k in range(6)]
        assert all(b > a for a, b in zip(vals, vals[1:]))

    def test_domain_errors(self):
        with pytest.raises(DomainError):
            UnivariateNormalSpec(0.0, -1.0)
        with pytest.raises(DomainError):
            UnivariateNormalSpec(math.nan, 1.0)


class TestBivariate:
    def test_independence_factorization(self):
        # sigma12 = 0: the quadrant moment factorizes into the two
        # univariate truncated moments.
        spec = BivariateNormalSpec(0.4, -0.3, 1.5, 0.7, 0.0)
        for k, m in [(1, 1), (2, 1), (2, 3)]:
            got = bivariate_truncated_moment_quad(spec, MomentQuery(k, m), tol=1e-10)
            want = univariate_truncated_moment(
                UnivariateNormalSpec(spec.mu1, spec.sigma1_sq), k
            ) * univariate_truncated_moment(
                UnivariateNormalSpec(spec.mu2, spec.sigma2_sq), m
            )
            assert got == pytest.approx(want, rel=1e-9)

    def test_exchangeability(self):
        spec = BivariateNormalSpec(0.8, -0.2, 2.0, 0.5, 0.4)
        swapped = BivariateNormalSpec(-0.2, 0.8, 0.5, 2.0, 0.4)
        for k, m in [(1, 2), (3, 1)]:
            a = bivariate_truncated_moment_quad(spec, MomentQuery(k, m), tol=1e-10)
            b = bivariate_truncated_moment_quad(swapped, MomentQuery(m, k), tol=1e-10)
            assert a == pytest.approx(b, rel=1e-9)

    def test_batch_matches_single(self):
        spec = BivariateNormalSpec(0.1, 0.6, 1.0, 2.0, -0.7)
        pairs = [(1, 1), (2, 1), (1, 2)]
        batch = quadrant_moments(spec, pairs, tol=1e-9)
        for pair in pairs:
            single = bivariate_truncated_moment_quad(spec, MomentQuery(*pair), tol=1e-9)
            assert batch[pair] == pytest.approx(single, rel=1e-10)

    def test_zeroth_moment_is_one(self):
        spec = BivariateNormalSpec(-0.5, 0.3, 0.6, 1.1, 0.2)
        got = bivariate_truncated_moment_quad(spec, MomentQuery(0, 0), tol=1e-10)
        assert got == pytest.approx(1.0, abs=1e-9)

    def test_mc_oracle_agrees_with_quadrature(self):
        rng = np.random.default_rng(11)
        for trial in range(4):
            spec = BivariateNormalSpec(
                rng.uniform(-1, 1), rng.uniform(-1, 1),
                rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0),
                0.0,
            )
            spec = BivariateNormalSpec(
                spec.mu1, spec.mu2, spec.sigma1_sq, spec.sigma2_sq,
                rng.uniform(-0.6, 0.6) * math.sqrt(spec.sigma1_sq * spec.sigma2_sq),
            )
            q = MomentQuery(2, 1)
            quad = bivariate_truncated_moment_quad(spec, q, tol=1e-9)
            mc, se = bivariate_truncated_moment_mc(spec, q, n_draws=200_000, seed=trial)
            assert abs(mc - quad) < 5.0 * se

    def test_mc_deterministic_given_seed(self):
        spec = BivariateNormalSpec(0.2, 0.2, 1.0, 1.0, 0.3)
        a = bivariate_truncated_moment_mc(spec, MomentQuery(1, 1), 50_000, seed=3)
        b = bivariate_truncated_moment_mc(spec, MomentQuery(1, 1), 50_000, seed=3)
        assert a == b

    def test_mc_insufficient_acceptance(self):
        # Both means far below zero: essentially nothing lands in the
        # positive quadrant.
        spec = BivariateNormalSpec(-6.0, -6.0, 0.25, 0.25, 0.0)
        with pytest.raises(InsufficientAcceptanceError) as err:
            bivariate_truncated_moment_mc(spec, MomentQuery(1, 1), 2_000, seed=0)
        assert err.value.acceptance_rate < 0.05

    def test_order_cap(self):
        with pytest.raises(UnsupportedOrderError):
            MomentQuery(5, 4)

    def test_covariance_domain(self):
        with pytest.raises(DomainError):
            BivariateNormalSpec(0.0, 0.0, 1.0, 1.0, 1.0)
        with pytest.raises(DomainError):
            BivariateNormalSpec(0.0, 0.0, -1.0, 1.0, 0.0)


class TestMomentIdentityResidual:
    @pytest.mark.parametrize(
        "spec",
        [
            BivariateNormalSpec(0.5, -0.5, 1.0, 2.0, 0.8),
            BivariateNormalSpec(-1.0, 1.5, 0.25, 4.0, -0.6),
            BivariateNormalSpec(0.0, 0.0, 1.0, 1.0, 0.0),
        ],
    )
    @pytest.mark.parametrize("km", [(1, 1), (2, 1), (3, 3)])
    def test_residual_at_quadrature_noise_level(self, spec, km):
        res = moment_identity_residual(spec, MomentQuery(*km), tol=1e-9)
        assert abs(res) < 1e-9

    def test_symmetric_point_exchangeable(self):
        # k = m at an exchangeable parameter point: both sides coincide term
        # by term, so the residual sits at quadrature-noise level.
        spec = BivariateNormalSpec(0.7, 0.7, 1.3, 1.3, 0.5)
        res = moment_identity_residual(spec, MomentQuery(1, 1), tol=1e-9)
        assert abs(res) < 1e-10

    def test_requires_first_order(self):
        spec = BivariateNormalSpec(0.0, 0.0, 1.0, 1.0, 0.0)
        with pytest.raises(DomainError):
            moment_identity_residual(spec, MomentQuery(0, 1))
