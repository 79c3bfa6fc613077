"""Estimating-equation construction for censored panels.

Each builder turns an observed dataset into stacked rows

    dependent = regressors' theta + xi,   E[instrument * xi | selection] = 0,

keeping only cells/pairs/triples whose observed outcomes are strictly
positive. On that selection event the observed outcome equals the latent one,
which is what makes the latent-variable identities estimable; builders only
ever touch observed fields.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DomainError, EmptySystemError
from .simulate import PanelDataset


@dataclass
class MomentSystem:
    """Linear-in-parameters stacked estimating equations."""

    dependent: np.ndarray  # (n,)
    regressors: np.ndarray  # (n, p)
    instruments: np.ndarray  # (n, q)
    cluster: np.ndarray  # (n,) individual index
    param_names: list
    periods: np.ndarray  # (n, #referenced periods)

    def __post_init__(self):
        n = self.dependent.shape[0]
        assert self.regressors.shape[0] == n and self.instruments.shape[0] == n
        assert self.regressors.shape[1] == len(self.param_names)

    @property
    def n_rows(self) -> int:
        return self.dependent.shape[0]

    def residuals(self, theta: np.ndarray) -> np.ndarray:
        return self.dependent - self.regressors @ np.asarray(theta)


@dataclass
class NonlinearMomentSystem:
    """Factor-loading estimating equation, nonlinear in the loadings ratio r.

    Residual for parameter vector theta = (beta, r, a, b):

        y_t^2 y_s - r y_s^2 y_t - y_t y_s (x_t - r x_s)' beta + y_t a - y_s b

    where a = sigma_s^2 r - sigma_ts and b = sigma_t^2 - sigma_ts r. Given r
    the residual is linear in (beta, a, b), which the solver exploits.
    """

    y_t: np.ndarray
    y_s: np.ndarray
    x_t: np.ndarray  # (n, K)
    x_s: np.ndarray
    instruments: np.ndarray
    cluster: np.ndarray
    periods: np.ndarray
    param_names: list  # beta..., "r", "a", "b"

    @property
    def n_rows(self) -> int:
        return self.y_t.shape[0]

    @property
    def n_linear(self) -> int:
        return len(self.param_names) - 1

    def linear_parts(self, r: float):
        """Dependent and regressors of the model at fixed r, params (beta, a, b)."""
        dep = self.y_t**2 * self.y_s - r * self.y_s**2 * self.y_t
        beta_block = (self.y_t * self.y_s)[:, None] * (self.x_t - r * self.x_s)
        X = np.column_stack([beta_block, -self.y_t, self.y_s])
        return dep, X

    def residuals(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        K = self.x_t.shape[1]
        beta, r, a, b = theta[:K], theta[K], theta[K + 1], theta[K + 2]
        dep, X = self.linear_parts(r)
        return dep - X @ np.concatenate([beta, [a, b]])


def _dedup_columns(mat: np.ndarray) -> np.ndarray:
    """Drop exactly duplicated columns, keeping first occurrences in order."""
    keep = []
    for j in range(mat.shape[1]):
        if not any(np.array_equal(mat[:, j], mat[:, i]) for i in keep):
            keep.append(j)
    return mat[:, keep]


def default_instruments(
    x_t: np.ndarray,
    x_s: np.ndarray,
    z_t: Optional[np.ndarray] = None,
    z_s: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Default pairwise instrument set: functions of exogenous variables only.

    Columns: constant, x_t, x_s, x_t - x_s, (x_t - x_s)^2 elementwise, and
    when z is present z_t, z_s, z_t z_s, z_t^2, z_s^2. Exact duplicate
    columns are removed.
    """
    x_t = np.atleast_2d(x_t)
    x_s = np.atleast_2d(x_s)
    diff = x_t - x_s
    cols = [np.ones((x_t.shape[0], 1)), x_t, x_s, diff, diff**2]
    if z_t is not None:
        cols += [
            z_t[:, None],
            z_s[:, None],
            (z_t * z_s)[:, None],
            (z_t**2)[:, None],
            (z_s**2)[:, None],
        ]
    return _dedup_columns(np.hstack(cols))


def cross_section_instruments(x: np.ndarray) -> np.ndarray:
    """Cell-wise instrument set: constant, x, x^2 elementwise."""
    x = np.atleast_2d(x)
    return _dedup_columns(np.hstack([np.ones((x.shape[0], 1)), x, x**2]))


def _as_cols(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return a[:, None] if a.ndim == 1 else a


def levels_squares_instruments(*groups: np.ndarray) -> np.ndarray:
    """Constant plus levels and elementwise squares of each column group.

    A difference-free alternative to `default_instruments` for designs in
    which the (x_t - x_s) columns are weakly correlated with the endogenous
    regressors. When exactly two single-column groups follow the x blocks
    (e.g. z_t, z_s) their cross product is appended as well.
    """
    gs = [_as_cols(g) for g in groups]
    cols = [np.ones((gs[0].shape[0], 1))] + gs + [g**2 for g in gs]
    if len(gs) >= 4 and gs[-1].shape[1] == 1 and gs[-2].shape[1] == 1:
        cols.append(gs[-2] * gs[-1])
    return _dedup_columns(np.hstack(cols))


def pair_product_instruments(x_t: np.ndarray, x_s: np.ndarray) -> np.ndarray:
    """Levels, squares, and cross products of two regressor blocks.

    The cross products x_t[:, j] * x_s[:, k] give the nonlinear system
    enough overidentification to pin down the loadings ratio even with a
    single regressor, where the default set is just-identified.
    """
    x_t, x_s = _as_cols(x_t), _as_cols(x_s)
    prods = [
        (x_t[:, j] * x_s[:, k])[:, None]
        for j in range(x_t.shape[1])
        for k in range(x_s.shape[1])
    ]
    cols = [np.ones((x_t.shape[0], 1)), x_t, x_s, x_t**2, x_s**2] + prods
    return _dedup_columns(np.hstack(cols))


def censored_index_instruments(
    x: np.ndarray, coef: Optional[np.ndarray] = None, products: bool = True
) -> np.ndarray:
    """Triple-system instruments built from a censored-index proxy.

    For each of the three periods form h_t = max(0, x_t'c + xbar'c), where
    xbar is the within-individual period mean of x and c defaults to ones.
    The proxy column sum_cyc h_t h_s (x_t - x_s) mimics the endogenous
    cyclic regressor of the triple systems while remaining a pure function
    of x; it is what makes those systems strongly identified in practice.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 3 or x.shape[1] != 3:
        raise DomainError(f"expected x of shape (n, 3, K), got {x.shape}")
    n, _, K = x.shape
    c = np.ones(K) if coef is None else np.asarray(coef, dtype=float)
    index = x @ c  # (n, 3)
    h = np.maximum(0.0, index + index.mean(axis=1, keepdims=True))
    cyc = [(0, 1), (1, 2), (2, 0)]
    proxy = np.zeros((n, K))
    for t, s in cyc:
        proxy += (h[:, t] * h[:, s])[:, None] * (x[:, t, :] - x[:, s, :])
    cols = [np.ones((n, 1)), proxy, x[:, 0, :], x[:, 1, :], x[:, 2, :]]
    if products:
        cols += [(h[:, t] * h[:, s])[:, None] for t, s in cyc]
    return _dedup_columns(np.hstack(cols))


def _beta_names(K: int) -> list:
    return [f"beta{k}" for k in range(K)]


def _require_rows(mask: np.ndarray, what: str) -> np.ndarray:
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise EmptySystemError(f"no qualifying {what}")
    return idx


def build_cross_section(dataset: PanelDataset, k: int = 1) -> MomentSystem:
    """Cell-wise moment rows y^{k+1} = (y^k x') beta + (k y^{k-1}) sigma2 + xi.

    Treats every (i, t) cell with y > 0 as an observation; ignores any
    individual effect (this is exactly what makes it a biased benchmark on
    fixed-effects data).
    """
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    N, T = dataset.y.shape
    K = dataset.n_regressors
    y = dataset.y.ravel()
    x = dataset.x.reshape(N * T, K)
    idx = _require_rows(y > 0.0, "cells with positive outcome")
    y, x = y[idx], x[idx]
    dep = y ** (k + 1)
    reg = np.column_stack([(y**k)[:, None] * x, k * y ** (k - 1)])
    return MomentSystem(
        dependent=dep,
        regressors=reg,
        instruments=cross_section_instruments(x),
        cluster=idx // T,
        param_names=_beta_names(K) + ["sigma2"],
        periods=(idx % T)[:, None],
    )


def _pair_arrays(dataset: PanelDataset, t: int, s: int):
    if t == s:
        raise DomainError(f"periods must differ, got t = s = {t}")
    y_t, y_s = dataset.y[:, t], dataset.y[:, s]
    idx = _require_rows((y_t > 0.0) & (y_s > 0.0), f"pairs for periods ({t}, {s})")
    return idx, y_t[idx], y_s[idx], dataset.x[idx, t, :], dataset.x[idx, s, :]


def build_pairwise_independent(dataset: PanelDataset, t: int, s: int) -> MomentSystem:
    """Pairwise rows under errors independent over time.

    y_t^2 y_s - y_s^2 y_t = y_t y_s (x_t - x_s)' beta + y_s sigma_t^2
                            - y_t sigma_s^2 + xi.
    """
    idx, y_t, y_s, x_t, x_s = _pair_arrays(dataset, t, s)
    dep = y_t**2 * y_s - y_s**2 * y_t
    reg = np.column_stack([(y_t * y_s)[:, None] * (x_t - x_s), y_s, -y_t])
    return MomentSystem(
        dependent=dep,
        regressors=reg,
        instruments=default_instruments(x_t, x_s),
        cluster=idx,
        param_names=_beta_names(x_t.shape[1]) + [f"sigma2_t{t}", f"sigma2_t{s}"],
        periods=np.broadcast_to([t, s], (idx.size, 2)).copy(),
    )


def build_pairwise_nonstationary(
    dataset: PanelDataset, t: int, s: int, k: int = 1, m: int = 1
) -> MomentSystem:
    """Pairwise rows valid under arbitrary within-pair error dependence.

    y_t^{k+1} y_s^m - y_s^{m+1} y_t^k
        = y_t^k y_s^m (x_t - x_s)' beta
          + k y_t^{k-1} y_s^m (sigma_t^2 - sigma_ts)
          - m y_s^{m-1} y_t^k (sigma_s^2 - sigma_ts) + xi

    Only the variance differences d_t = sigma_t^2 - sigma_ts and
    d_s = sigma_s^2 - sigma_ts are identified.
    """
    if k < 1 or m < 1:
        raise DomainError(f"k and m must be >= 1, got k={k}, m={m}")
    idx, y_t, y_s, x_t, x_s = _pair_arrays(dataset, t, s)
    dep = y_t ** (k + 1) * y_s**m - y_s ** (m + 1) * y_t**k
    reg = np.column_stack(
        [
            (y_t**k * y_s**m)[:, None] * (x_t - x_s),
            k * y_t ** (k - 1) * y_s**m,
            -m * y_s ** (m - 1) * y_t**k,
        ]
    )
    lo, hi = min(t, s), max(t, s)
    return MomentSystem(
        dependent=dep,
        regressors=reg,
        instruments=default_instruments(x_t, x_s),
        cluster=idx,
        param_names=_beta_names(x_t.shape[1])
        + [f"dvar{t}_{lo}{hi}", f"dvar{s}_{lo}{hi}"],
        periods=np.broadcast_to([t, s], (idx.size, 2)).copy(),
    )


def build_factor_loading(dataset: PanelDataset, t: int, s: int) -> NonlinearMomentSystem:
    """Nonlinear system identifying the loadings ratio r = rho_t / rho_s."""
    idx, y_t, y_s, x_t, x_s = _pair_arrays(dataset, t, s)
    return NonlinearMomentSystem(
        y_t=y_t,
        y_s=y_s,
        x_t=x_t,
        x_s=x_s,
        instruments=default_instruments(x_t, x_s),
        cluster=idx,
        periods=np.broadcast_to([t, s], (idx.size, 2)).copy(),
        param_names=_beta_names(x_t.shape[1])
        + [f"r_{t}{s}", f"a_{t}{s}", f"b_{t}{s}"],
    )


def _triple_arrays(dataset: PanelDataset, t: int, s: int, tau: int):
    if len({t, s, tau}) != 3:
        raise DomainError(f"periods must be distinct, got ({t}, {s}, {tau})")
    y = dataset.y
    idx = _require_rows(
        (y[:, t] > 0.0) & (y[:, s] > 0.0) & (y[:, tau] > 0.0),
        f"triples for periods ({t}, {s}, {tau})",
    )
    return idx, y[idx, t], y[idx, s], y[idx, tau], dataset.x[idx]


def _cyclic_parts(y_t, y_s, y_tau, x, t, s, tau):
    dep = (
        (y_t**2 * y_s - y_s**2 * y_t)
        + (y_s**2 * y_tau - y_tau**2 * y_s)
        + (y_tau**2 * y_t - y_t**2 * y_tau)
    )
    beta_block = (
        (y_t * y_s)[:, None] * (x[:, t, :] - x[:, s, :])
        + (y_s * y_tau)[:, None] * (x[:, s, :] - x[:, tau, :])
        + (y_tau * y_t)[:, None] * (x[:, tau, :] - x[:, t, :])
    )
    return dep, beta_block


def _triple_instruments(x, t, s, tau):
    inst = np.hstack(
        [
            default_instruments(x[:, t, :], x[:, s, :]),
            default_instruments(x[:, s, :], x[:, tau, :])[:, 1:],
            default_instruments(x[:, tau, :], x[:, t, :])[:, 1:],
        ]
    )
    return _dedup_columns(inst)


def build_triple_variance_fe(
    dataset: PanelDataset, t: int, s: int, tau: int
) -> MomentSystem:
    """Triple-difference rows in which individual-specific variances cancel."""
    idx, y_t, y_s, y_tau, x = _triple_arrays(dataset, t, s, tau)
    dep, beta_block = _cyclic_parts(y_t, y_s, y_tau, x, t, s, tau)
    return MomentSystem(
        dependent=dep,
        regressors=beta_block,
        instruments=_triple_instruments(x, t, s, tau),
        cluster=idx,
        param_names=_beta_names(x.shape[2]),
        periods=np.broadcast_to([t, s, tau], (idx.size, 3)).copy(),
    )


def additive_variance_regressors(y_t, y_s, y_tau) -> np.ndarray:
    """The three raw time-variance regressors of the additive-variance rows.

    They sum to zero identically, so only two contrasts are estimable; kept
    as a separate helper for the cancellation tests.
    """
    return np.column_stack([y_tau - y_t, y_s - y_tau, y_t - y_s])


def build_triple_additive_variance(
    dataset: PanelDataset, t: int, s: int, tau: int
) -> MomentSystem:
    """Triple rows for variances sigma_i^2 + sigma_t^2; sigma_i^2 cancels.

    The three raw regressors (y_tau - y_t, y_s - y_tau, y_t - y_s) for
    (sigma_s^2, sigma_t^2, sigma_tau^2) are exactly collinear, so the level
    of the time components is absorbed into sigma_i^2 and sigma_tau^2 = 0 is
    imposed as the normalization. The reported parameters are the contrasts
    sigma_s^2 - sigma_tau^2 and sigma_t^2 - sigma_tau^2.
    """
    idx, y_t, y_s, y_tau, x = _triple_arrays(dataset, t, s, tau)
    dep, beta_block = _cyclic_parts(y_t, y_s, y_tau, x, t, s, tau)
    raw = additive_variance_regressors(y_t, y_s, y_tau)
    reg = np.column_stack([beta_block, raw[:, 0], raw[:, 1]])
    return MomentSystem(
        dependent=dep,
        regressors=reg,
        instruments=_triple_instruments(x, t, s, tau),
        cluster=idx,
        param_names=_beta_names(x.shape[2])
        + [f"dvar{s}_ref{tau}", f"dvar{t}_ref{tau}"],
        periods=np.broadcast_to([t, s, tau], (idx.size, 3)).copy(),
    )


def build_pairwise_slope_fe(dataset: PanelDataset, t: int, s: int) -> MomentSystem:
    """Pairwise rows for individual effects entering through slopes on z."""
    if dataset.z is None:
        raise DomainError("dataset has no z variable")
    idx, y_t, y_s, x_t, x_s = _pair_arrays(dataset, t, s)
    z_t, z_s = dataset.z[idx, t], dataset.z[idx, s]
    if np.any(z_t <= 0.0) or np.any(z_s <= 0.0):
        raise DomainError("slope-effect rows require z > 0 in both periods")
    dep = y_t**2 * z_s**2 * y_s * z_t - y_s**2 * z_t**2 * y_t * z_s
    beta_block = (y_t * z_s * y_s * z_t)[:, None] * (
        x_t * z_s[:, None] - x_s * z_t[:, None]
    )
    reg = np.column_stack(
        [
            beta_block,
            y_s * z_t * z_s**2,  # sigma_t^2
            -y_t * z_s * z_t**2,  # sigma_s^2
            z_t * z_s * (y_t * z_s - y_s * z_t),  # sigma_ts
        ]
    )
    lo, hi = min(t, s), max(t, s)
    return MomentSystem(
        dependent=dep,
        regressors=reg,
        instruments=default_instruments(x_t, x_s, z_t, z_s),
        cluster=idx,
        param_names=_beta_names(x_t.shape[1])
        + [f"sigma2_t{t}", f"sigma2_t{s}", f"cov_{lo}{hi}"],
        periods=np.broadcast_to([t, s], (idx.size, 2)).copy(),
    )


def stack_systems(systems: Sequence[MomentSystem]) -> MomentSystem:
    """Stack several linear systems, sharing parameters with equal names.

    Rows keep their original cluster ids, so pairs from one individual stay
    in one cluster. Instruments are stacked block-diagonally (each source
    system's orthogonality conditions are kept separate).
    """
    if not systems:
        raise EmptySystemError("no systems to stack")
    if len(systems) == 1:
        return systems[0]
    names: list = []
    for sys_ in systems:
        for name in sys_.param_names:
            if name not in names:
                names.append(name)
    n_total = sum(s.n_rows for s in systems)
    q_total = sum(s.instruments.shape[1] for s in systems)
    max_periods = max(s.periods.shape[1] for s in systems)
    reg = np.zeros((n_total, len(names)))
    inst = np.zeros((n_total, q_total))
    periods = np.full((n_total, max_periods), -1, dtype=int)
    dep = np.concatenate([s.dependent for s in systems])
    cluster = np.concatenate([s.cluster for s in systems])
    r0 = c0 = 0
    for sys_ in systems:
        cols = [names.index(nm) for nm in sys_.param_names]
        reg[r0 : r0 + sys_.n_rows, cols] = sys_.regressors
        qs = sys_.instruments.shape[1]
        inst[r0 : r0 + sys_.n_rows, c0 : c0 + qs] = sys_.instruments
        periods[r0 : r0 + sys_.n_rows, : sys_.periods.shape[1]] = sys_.periods
        r0 += sys_.n_rows
        c0 += qs
    return MomentSystem(
        dependent=dep,
        regressors=reg,
        instruments=inst,
        cluster=cluster,
        param_names=names,
        periods=periods,
    )


def all_pairs(n_periods: int) -> list:
    return [(t, s) for t in range(n_periods) for s in range(t + 1, n_periods)]


def system_to_csv(system: MomentSystem, path: str) -> None:
    """Export rows for external solver cross-checks."""
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = (
            ["individual"]
            + [f"period{j}" for j in range(system.periods.shape[1])]
            + ["dependent"]
            + [f"reg_{nm}" for nm in system.param_names]
            + [f"inst{j}" for j in range(system.instruments.shape[1])]
        )
        writer.writerow(header)
        for i in range(system.n_rows):
            row = (
                [int(system.cluster[i])]
                + [int(p) for p in system.periods[i]]
                + [f"{system.dependent[i]:.17g}"]
                + [f"{v:.17g}" for v in system.regressors[i]]
                + [f"{v:.17g}" for v in system.instruments[i]]
            )
            writer.writerow(row)
