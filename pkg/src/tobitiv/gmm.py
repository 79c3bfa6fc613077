"""Linear IV (2SLS) and nonlinear GMM solvers with cluster-robust inference.

The dependent variables here are cubic in the outcomes, so columns can be
badly scaled; everything runs through column rescaling and orthogonal
decompositions rather than raw normal equations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg as sla
from scipy import stats

from .errors import (
    BracketError,
    IdentificationError,
    InsufficientObservationsError,
    NotApplicableError,
)
from .moments import MomentSystem, NonlinearMomentSystem

RANK_RTOL = 1e-10


@dataclass
class LinearIVResult:
    param_names: list
    estimates: np.ndarray
    covariance: np.ndarray
    n_rows: int
    n_clusters: int
    condition_number: float
    j_statistic: Optional[float] = None
    j_dof: int = 0

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    def to_dict(self):
        d = {
            "param_names": list(self.param_names),
            "estimates": [float(v) for v in self.estimates],
            "se": [float(v) for v in self.se],
            "covariance": [float(v) for v in self.covariance.ravel()],
            "n_rows": self.n_rows,
            "n_clusters": self.n_clusters,
            "condition_number": self.condition_number,
            "j_statistic": self.j_statistic,
            "j_dof": self.j_dof,
        }
        return d


@dataclass
class NonlinearGMMResult(LinearIVResult):
    converged: bool = False
    iterations: int = 0
    objective_value: float = 0.0

    def to_dict(self):
        d = super().to_dict()
        d.update(
            converged=self.converged,
            iterations=self.iterations,
            objective_value=self.objective_value,
        )
        return d


def _cluster_sums(rows: np.ndarray, cluster: np.ndarray) -> np.ndarray:
    order = np.argsort(cluster, kind="stable")
    sorted_rows = rows[order]
    c = cluster[order]
    starts = np.flatnonzero(np.r_[True, c[1:] != c[:-1]])
    return np.add.reduceat(sorted_rows, starts, axis=0)


def _column_scale(mat: np.ndarray) -> np.ndarray:
    scale = np.sqrt(np.mean(mat**2, axis=0))
    scale[scale == 0.0] = 1.0
    return scale


def _check_rank(M: np.ndarray, param_names) -> float:
    """SVD rank check of the instrument-regressor cross-moment matrix."""
    svals = np.linalg.svd(M, compute_uv=False)
    if svals[-1] <= RANK_RTOL * svals[0]:
        _, _, vt = np.linalg.svd(M)
        bad = vt[svals <= RANK_RTOL * svals[0]]
        combos = []
        for direction in bad:
            loading = ", ".join(
                f"{c:+.3f}*{nm}" for c, nm in zip(direction, param_names) if abs(c) > 1e-3
            )
            combos.append(loading)
        raise IdentificationError(
            "instrument-regressor cross-moment matrix is rank deficient; "
            "unidentified directions: " + "; ".join(combos),
            deficient_directions=bad,
        )
    return float(svals[0] / svals[-1])


def _independent_instrument_columns(Z: np.ndarray) -> np.ndarray:
    """Indices of a maximal linearly independent instrument subset.

    The default instrument list is deliberately redundant (x_t - x_s lies in
    the span of x_t and x_s); the projection space is unchanged by pruning,
    but the J degrees of freedom and the moment covariance require a
    full-rank instrument matrix.
    """
    Zs = Z / _column_scale(Z)
    _, R, piv = sla.qr(Zs, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > RANK_RTOL * diag[0])) if diag.size else 0
    return np.sort(piv[:rank])


def _spd_solve(S: np.ndarray, B: np.ndarray) -> np.ndarray:
    try:
        c, low = sla.cho_factor(S)
        return sla.cho_solve((c, low), B)
    except np.linalg.LinAlgError:
        return np.linalg.pinv(S) @ B


def two_stage_least_squares(system: MomentSystem) -> LinearIVResult:
    """Classic 2SLS with individual-clustered sandwich covariance.

    When overidentified, the Hansen J statistic is computed at the efficient
    two-step linear GMM point (weight = inverse clustered moment covariance
    evaluated at the 2SLS residuals), so its null distribution is the usual
    chi-squared with (instruments - parameters) degrees of freedom.
    """
    y = system.dependent
    W = system.regressors
    Z = system.instruments[:, _independent_instrument_columns(system.instruments)]
    n, p = W.shape
    q = Z.shape[1]
    if n < p:
        raise InsufficientObservationsError(f"{n} rows for {p} parameters")
    if q < p:
        raise IdentificationError(f"{q} instruments for {p} parameters")

    dW = _column_scale(W)
    dZ = _column_scale(Z)
    Ws = W / dW
    Zs = Z / dZ

    cross = Zs.T @ Ws / n
    cond = _check_rank(cross, system.param_names)

    Q, _ = np.linalg.qr(Zs)
    What = Q @ (Q.T @ Ws)
    theta_s, *_ = np.linalg.lstsq(What, y, rcond=None)
    estimates = theta_s / dW
    u = y - W @ estimates

    A = What.T @ Ws
    H = _cluster_sums(What * u[:, None], system.cluster)
    B = H.T @ H
    Ainv_B = np.linalg.solve(A, B)
    Vs = np.linalg.solve(A, Ainv_B.T).T
    covariance = Vs / np.outer(dW, dW)
    covariance = 0.5 * (covariance + covariance.T)

    j_stat = None
    dof = max(q - p, 0)
    if q > p:
        Gc = _cluster_sums(Zs * u[:, None], system.cluster)
        S = Gc.T @ Gc / n
        Gz = cross
        gy = Zs.T @ y / n
        SinvG = _spd_solve(S, Gz)
        Sinvgy = _spd_solve(S, gy)
        theta2 = np.linalg.solve(Gz.T @ SinvG, Gz.T @ Sinvgy)
        gbar = gy - Gz @ theta2
        j_stat = float(n * gbar @ _spd_solve(S, gbar))

    return LinearIVResult(
        param_names=list(system.param_names),
        estimates=estimates,
        covariance=covariance,
        n_rows=n,
        n_clusters=int(np.unique(system.cluster).size),
        condition_number=cond,
        j_statistic=j_stat,
        j_dof=dof,
    )


def j_test(result: LinearIVResult):
    """Hansen overidentification test: (statistic, dof, upper-tail p-value)."""
    if result.j_statistic is None or result.j_dof == 0:
        raise NotApplicableError("system is just-identified; J test undefined")
    p_value = float(stats.chi2.sf(result.j_statistic, result.j_dof))
    return result.j_statistic, result.j_dof, p_value


_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section(fun, lo: float, hi: float, tol: float = 1e-10, max_iter: int = 200):
    """Golden-section minimization on [lo, hi]; returns (x, f(x), n_evals)."""
    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = fun(c), fun(d)
    evals = 2
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = fun(d)
        evals += 1
    x = c if fc < fd else d
    return x, min(fc, fd), evals


def _parabolic_refine(fun, x, h):
    """One quadratic-interpolation step around x with half-width h."""
    f0, fm, fp = fun(x), fun(x - h), fun(x + h)
    denom = fp - 2.0 * f0 + fm
    if denom <= 0.0:
        return x, f0, 3
    step = 0.5 * h * (fm - fp) / denom
    cand = x + np.clip(step, -h, h)
    fc = fun(cand)
    if fc < f0:
        return cand, fc, 4
    return x, f0, 4


@dataclass
class NonlinearOptions:
    r_bracket: tuple = (0.05, 20.0)
    n_grid: int = 33
    search_tol: float = 1e-12  # in log r
    fd_rel_step: float = 1e-6
    grad_tol: float = 1e-5


def _whiten_instruments(Z: np.ndarray):
    scale = _column_scale(Z)
    Zs = Z / scale
    C = np.linalg.cholesky(Zs.T @ Zs / Z.shape[0])
    return sla.solve_triangular(C, Zs.T, lower=True).T  # Zw with Zw'Zw/n = I


def concentrated_linear_solve(system: NonlinearMomentSystem, r: float, Zw, Wmat):
    """Inner GMM solve of the linear block (beta, a, b) at fixed r.

    With Wmat = I on the whitened instruments this is exactly 2SLS on the
    r-transformed linear system.
    """
    n = system.n_rows
    dep, X = system.linear_parts(r)
    G = Zw.T @ X / n
    gd = Zw.T @ dep / n
    WG = Wmat @ G
    theta = np.linalg.solve(G.T @ WG, G.T @ (Wmat @ gd))
    gbar = gd - G @ theta
    value = float(gbar @ (Wmat @ gbar))
    return theta, value, gbar


def nonlinear_gmm(
    system: NonlinearMomentSystem,
    theta0: Optional[np.ndarray] = None,
    options: Optional[NonlinearOptions] = None,
) -> NonlinearGMMResult:
    """Two-step GMM for the factor-loading system.

    The criterion is linear in (beta, a, b) at fixed loadings ratio r, so the
    outer problem is a one-dimensional search in log r (coarse grid, then
    golden section, then one quadratic-interpolation refinement) with a
    closed-form inner solve. Step one weights with the identity on whitened
    instruments (equivalent to 2SLS); step two reweights with the inverse
    clustered moment covariance from step one.
    """
    options = options or NonlinearOptions()
    n = system.n_rows
    Z = system.instruments[:, _independent_instrument_columns(system.instruments)]
    q = Z.shape[1]
    p = len(system.param_names)
    K = system.x_t.shape[1]
    if n < p:
        raise InsufficientObservationsError(f"{n} rows for {p} parameters")
    Zw = _whiten_instruments(Z)
    evals = 0

    def _search(Wmat, r_hint=None):
        nonlocal evals

        def obj(log_r):
            nonlocal evals
            evals += 1
            return concentrated_linear_solve(system, math.exp(log_r), Zw, Wmat)[1]

        lo, hi = (math.log(b) for b in options.r_bracket)
        grid = list(np.linspace(lo, hi, options.n_grid))
        if r_hint is not None and lo < math.log(r_hint) < hi:
            grid = sorted(grid + [math.log(r_hint)])
        vals = [obj(g) for g in grid]
        i_min = int(np.argmin(vals))
        if i_min == 0 or i_min == len(grid) - 1:
            raise BracketError(
                f"objective is minimized at the bracket edge r = "
                f"{math.exp(grid[i_min]):.4g}; widen r_bracket"
            )
        x, _, ne = golden_section(obj, grid[i_min - 1], grid[i_min + 1],
                                  tol=options.search_tol)
        x, fx, _ = _parabolic_refine(obj, x, max(10.0 * options.search_tol, 1e-9))
        return math.exp(x), fx

    r_hint = None
    if theta0 is not None:
        r_hint = float(np.asarray(theta0)[K])

    # step 1: 2SLS-equivalent weighting
    W1 = np.eye(q)
    r1, _ = _search(W1, r_hint)
    theta_lin1, _, _ = concentrated_linear_solve(system, r1, Zw, W1)

    def _full_theta(r, theta_lin):
        return np.concatenate([theta_lin[:K], [r], theta_lin[K:]])

    def _clustered_S(theta_full):
        xi = system.residuals(theta_full)
        Hc = _cluster_sums(Zw * xi[:, None], system.cluster)
        return Hc.T @ Hc / n

    # step 2: efficient weighting
    S1 = _clustered_S(_full_theta(r1, theta_lin1))
    W2 = _spd_solve(S1, np.eye(q))
    W2 = 0.5 * (W2 + W2.T)
    r2, obj2 = _search(W2, r1)
    theta_lin2, _, gbar = concentrated_linear_solve(system, r2, Zw, W2)
    theta = _full_theta(r2, theta_lin2)

    def gbar_at(th):
        return Zw.T @ system.residuals(th) / n

    # numerically differentiated moment Jacobian (central differences)
    G = np.empty((q, p))
    for j in range(p):
        step = options.fd_rel_step * max(1.0, abs(theta[j]))
        tp, tm = theta.copy(), theta.copy()
        tp[j] += step
        tm[j] -= step
        G[:, j] = (gbar_at(tp) - gbar_at(tm)) / (2.0 * step)

    S = _clustered_S(theta)
    GW = G.T @ W2
    bread = np.linalg.inv(GW @ G)
    meat = GW @ S @ GW.T
    covariance = bread @ meat @ bread / n
    covariance = 0.5 * (covariance + covariance.T)

    grad = 2.0 * GW @ gbar
    j_stat = float(n * gbar @ _spd_solve(S, gbar)) if q > p else None

    return NonlinearGMMResult(
        param_names=list(system.param_names),
        estimates=theta,
        covariance=covariance,
        n_rows=n,
        n_clusters=int(np.unique(system.cluster).size),
        condition_number=float(np.linalg.cond(Zw.T @ system.linear_parts(r2)[1] / n)),
        j_statistic=j_stat,
        j_dof=max(q - p, 0),
        converged=bool(np.linalg.norm(grad) < options.grad_tol),
        iterations=evals,
        objective_value=float(n * obj2),
    )
