"""Beta Markov random field over maturities: types, local densities and the posterior.

Sites are maturities ``j = 0..M-1`` and rows are trading dates ``t = 0..T-1``
(zero-based throughout). The local factor of site ``j`` at date ``t`` is a beta
density in the PIT ``y[t, j]`` whose mean is a logistic function of the
site's own ``p`` lagged PITs and of the contemporaneous PITs of its
neighbours. The product of local factors is the unnormalised field density;
for directed topologies it is already normalised, for the proximity topology
the normaliser depends on the parameters and is never evaluated.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import optimize
from scipy.special import gammaln

PIT_EPS = 1e-9
MU_EPS = 1e-8
ETA_CLIP = 35.0


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MaturityGrid:
    tenors: tuple[float, ...]
    trading_days_per_year: int = 252

    def __post_init__(self):
        tenors = tuple(float(t) for t in self.tenors)
        object.__setattr__(self, "tenors", tenors)
        if len(tenors) < 1:
            raise ValueError("tenors: need at least one maturity")
        if any(t <= 0 for t in tenors):
            raise ValueError("tenors: all maturities must be positive")
        if any(b <= a for a, b in zip(tenors, tenors[1:])):
            raise ValueError("tenors: must be strictly increasing")
        if int(self.trading_days_per_year) < 1:
            raise ValueError("trading_days_per_year: must be a positive integer")

    @property
    def M(self) -> int:
        return len(self.tenors)

    @property
    def lookahead_days(self) -> tuple[int, ...]:
        """Trading-day offset of each tenor, ``round(tau * days_per_year)``."""
        return tuple(int(math.floor(t * self.trading_days_per_year + 0.5)) for t in self.tenors)


def clamp_pits(values) -> np.ndarray:
    """Clamp PITs into ``[PIT_EPS, 1 - PIT_EPS]``."""
    return np.clip(np.asarray(values, dtype=float), PIT_EPS, 1.0 - PIT_EPS)


@dataclass(frozen=True, eq=False)
class PitPanel:
    """``T x M`` panel of PITs; column ``j`` belongs to maturity ``j``.

    Entries are clamped into the open unit interval on construction.
    """

    values: np.ndarray
    dates: tuple[str, ...] | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2:
            raise ValueError("values: expected a T x M array")
        if not np.all(np.isfinite(v)):
            raise ValueError("values: PITs must be finite")
        v = clamp_pits(v)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.dates is not None:
            dates = tuple(str(d) for d in self.dates)
            if len(dates) != v.shape[0]:
                raise ValueError("dates: length must equal the number of panel rows")
            object.__setattr__(self, "dates", dates)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def M(self) -> int:
        return self.values.shape[1]


class Topology(str, enum.Enum):
    INDEPENDENT = "independent"
    MARKOV = "markov"
    PROXIMITY = "proximity"


@dataclass(frozen=True)
class NeighborhoodSystem:
    """Site topology over ``M`` maturities.

    ``neighbors(j)`` are the sites entering the mean of site ``j``.
    ``dependents(j)`` are the sites whose mean involves ``j``; for the
    proximity system the two sets coincide, for the Markov chain the
    dependent of ``j`` is its successor.
    """

    kind: Topology
    M: int

    def __post_init__(self):
        object.__setattr__(self, "kind", Topology(self.kind))
        if int(self.M) < 1:
            raise ValueError("M: need at least one site")

    @cached_property
    def _neighbors(self) -> tuple[tuple[int, ...], ...]:
        M = self.M
        if self.kind is Topology.INDEPENDENT:
            return tuple(() for _ in range(M))
        if self.kind is Topology.MARKOV:
            return tuple(() if j == 0 else (j - 1,) for j in range(M))
        return tuple(tuple(k for k in (j - 1, j + 1) if 0 <= k < M) for j in range(M))

    def neighbors(self, j: int) -> tuple[int, ...]:
        return self._neighbors[j]

    def dependents(self, j: int) -> tuple[int, ...]:
        return tuple(i for i in range(self.M) if j in self._neighbors[i])

    def closure(self, j: int) -> tuple[int, ...]:
        """Symmetric closure: every site sharing a local factor with ``j``."""
        return tuple(sorted(set(self.neighbors(j)) | set(self.dependents(j))))

    def degree(self, j: int) -> int:
        return len(self._neighbors[j])

    @property
    def n_links(self) -> int:
        return sum(len(n) for n in self._neighbors)

    @property
    def is_directed(self) -> bool:
        """True when the field factorises sequentially, so every ``Z_t = 1``."""
        return self.kind is not Topology.PROXIMITY


@dataclass(frozen=True)
class HyperParams:
    a: float = 0.0
    b: float = 0.0
    s0_sq: float = 100.0
    g0_sq: float = 100.0
    s_sq: float = 100.0
    g_sq: float = 100.0
    s_j_sq: float = 10.0
    g_j_sq: float = 10.0
    xi1: float = 2.0
    xi2: float = 0.1

    def __post_init__(self):
        for name in ("s0_sq", "g0_sq", "s_sq", "g_sq", "s_j_sq", "g_j_sq", "xi1", "xi2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name}: must be positive")


@dataclass(frozen=True)
class BetaLocalParams:
    mu: float
    gamma: float

    def __post_init__(self):
        if not (0.0 < self.mu < 1.0):
            raise ValueError("mu: must lie in (0, 1)")
        if not self.gamma > 0:
            raise ValueError("gamma: must be positive")

    @property
    def shape1(self) -> float:
        return self.mu * self.gamma

    @property
    def shape2(self) -> float:
        return (1.0 - self.mu) * self.gamma


@dataclass(frozen=True)
class ThetaLayout:
    """Index map of the flat parameter vector.

    Hierarchical layout, per site ``j``: ``alpha_0_j..alpha_p_j``, one
    ``beta_k_j`` per neighbour ``k``, ``sigma_j`` (log precision),
    ``alpha_mean_j``, ``beta_mean_j``; then ``alpha_bar`` and ``beta_bar``.
    Site labels in names are one-based. In pooled mode all sites share one
    coefficient block (``beta_prev``/``beta_next`` for the lower and upper
    neighbour) and one ``sigma``.
    """

    p: int
    nbhd: NeighborhoodSystem
    pooled: bool = False

    def __post_init__(self):
        if int(self.p) < 0:
            raise ValueError("p: lag order must be non-negative")

    @cached_property
    def _index(self):
        names: list[str] = []

        def add(name):
            names.append(name)
            return len(names) - 1

        M, p = self.nbhd.M, self.p
        alpha, beta, sigma, amean, bmean = [], [], [], [], []
        if not self.pooled:
            for j in range(M):
                alpha.append(np.array([add(f"alpha_{k}_{j + 1}") for k in range(p + 1)]))
                beta.append({k: add(f"beta_{k + 1}_{j + 1}") for k in self.nbhd.neighbors(j)})
                sigma.append(add(f"sigma_{j + 1}"))
                amean.append(add(f"alpha_mean_{j + 1}"))
                bmean.append(add(f"beta_mean_{j + 1}"))
        else:
            a_idx = np.array([add(f"alpha_{k}") for k in range(p + 1)])
            directions = set()
            for j in range(M):
                directions.update("prev" if k < j else "next" for k in self.nbhd.neighbors(j))
            b_pos = {d: add(f"beta_{d}") for d in ("prev", "next") if d in directions}
            s_idx = add("sigma")
            am, bm = add("alpha_mean"), add("beta_mean")
            for j in range(M):
                alpha.append(a_idx)
                beta.append({k: b_pos["prev" if k < j else "next"] for k in self.nbhd.neighbors(j)})
                sigma.append(s_idx)
                amean.append(am)
                bmean.append(bm)
        abar, bbar = add("alpha_bar"), add("beta_bar")
        return tuple(names), alpha, beta, sigma, amean, bmean, abar, bbar

    @property
    def names(self) -> tuple[str, ...]:
        return self._index[0]

    @property
    def dim(self) -> int:
        return len(self.names)

    def alpha(self, j: int) -> np.ndarray:
        """Indices of ``(alpha_0j, ..., alpha_pj)``."""
        return self._index[1][j]

    def beta(self, j: int) -> dict[int, int]:
        """Neighbour site -> index of its coefficient in site ``j``'s mean."""
        return self._index[2][j]

    def sigma(self, j: int) -> int:
        return self._index[3][j]

    def alpha_mean(self, j: int) -> int:
        return self._index[4][j]

    def beta_mean(self, j: int) -> int:
        return self._index[5][j]

    @property
    def alpha_bar(self) -> int:
        return self._index[6]

    @property
    def beta_bar(self) -> int:
        return self._index[7]

    @property
    def groups(self) -> list[int]:
        """Distinct coefficient groups (one per site, or a single pooled one)."""
        return [0] if self.pooled else list(range(self.nbhd.M))

    def sigma_indices(self) -> np.ndarray:
        return np.unique([self.sigma(j) for j in range(self.nbhd.M)])

    def coefficient_indices(self) -> np.ndarray:
        idx = set()
        for j in range(self.nbhd.M):
            idx.update(int(i) for i in self.alpha(j))
            idx.update(self.beta(j).values())
        return np.array(sorted(idx), dtype=int)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True, eq=False)
class ThetaState:
    """Parameter vector ``theta`` with its layout; ``sigma`` is ``log(gamma)``."""

    layout: ThetaLayout
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        if v.shape[0] != self.layout.dim:
            raise ValueError(f"values: expected dimension {self.layout.dim}, got {v.shape[0]}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, layout: ThetaLayout) -> "ThetaState":
        return cls(layout, np.zeros(layout.dim))

    @classmethod
    def from_sites(
        cls,
        layout: ThetaLayout,
        alpha: Sequence[Sequence[float]],
        gamma: Sequence[float],
        beta: Sequence[dict[int, float]] | None = None,
        alpha_mean: Sequence[float] | None = None,
        beta_mean: Sequence[float] | None = None,
        alpha_bar: float = 0.0,
        beta_bar: float = 0.0,
    ) -> "ThetaState":
        """Build a state from per-site blocks (zero-based neighbour keys)."""
        v = np.zeros(layout.dim)
        for j in range(layout.nbhd.M):
            v[layout.alpha(j)] = alpha[j]
            v[layout.sigma(j)] = math.log(gamma[j])
            if beta is not None:
                for k, idx in layout.beta(j).items():
                    v[idx] = beta[j].get(k, 0.0)
            if alpha_mean is not None:
                v[layout.alpha_mean(j)] = alpha_mean[j]
            if beta_mean is not None:
                v[layout.beta_mean(j)] = beta_mean[j]
        v[layout.alpha_bar] = alpha_bar
        v[layout.beta_bar] = beta_bar
        return cls(layout, v)

    def with_values(self, values) -> "ThetaState":
        return ThetaState(self.layout, values)

    @property
    def p(self) -> int:
        return self.layout.p

    @property
    def pooled(self) -> bool:
        return self.layout.pooled

    def alpha_coeffs(self, j: int) -> np.ndarray:
        return self.values[self.layout.alpha(j)]

    def beta_coeffs(self, j: int) -> dict[int, float]:
        return {k: float(self.values[i]) for k, i in self.layout.beta(j).items()}

    def log_precision(self, j: int) -> float:
        return float(self.values[self.layout.sigma(j)])

    def gamma(self, j: int) -> float:
        return math.exp(self.log_precision(j))

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.layout.names, self.values.tolist()))


# ---------------------------------------------------------------------------
# local pieces
# ---------------------------------------------------------------------------


def logistic_link(x):
    """Logistic function ``1 / (1 + exp(-x))``; input clipped to +-35."""
    x = np.clip(x, -ETA_CLIP, ETA_CLIP)
    out = 1.0 / (1.0 + np.exp(-x))
    return float(out) if np.ndim(out) == 0 else out


def mean_from_predictor(eta):
    """Beta mean from the linear predictor, kept inside ``[1e-8, 1 - 1e-8]``."""
    return np.clip(logistic_link(eta), MU_EPS, 1.0 - MU_EPS)


def linear_predictor(values: np.ndarray, layout: ThetaLayout, y: np.ndarray, j: int, rows) -> np.ndarray:
    """Linear predictor of site ``j`` at the given rows of the ``T x M`` array ``y``."""
    rows = np.asarray(rows)
    a = values[layout.alpha(j)]
    eta = np.full(rows.shape, a[0])
    for k in range(1, layout.p + 1):
        eta = eta + a[k] * y[rows - k, j]
    for k, idx in layout.beta(j).items():
        eta = eta + values[idx] * y[rows, k]
    return eta


def _check_compatible(theta: ThetaState, nbhd: NeighborhoodSystem, y: np.ndarray):
    if theta.layout.nbhd != nbhd:
        raise ValueError("theta layout was built for a different neighbourhood system")
    if y.shape[1] != nbhd.M:
        raise ValueError(f"panel has {y.shape[1]} columns, neighbourhood has {nbhd.M} sites")
    if y.shape[0] <= theta.p:
        raise ValueError(f"panel needs more than p={theta.p} rows")


def _panel_values(panel) -> np.ndarray:
    return panel.values if isinstance(panel, PitPanel) else np.asarray(panel, dtype=float)


def compute_mu(theta: ThetaState, panel, nbhd: NeighborhoodSystem, j: int, t: int) -> float:
    """Mean of the local beta factor of site ``j`` at row ``t`` (zero-based, ``t >= p``)."""
    y = _panel_values(panel)
    if y.ndim == 1:
        y = y[:, None]
    _check_compatible(theta, nbhd, y)
    if not (theta.p <= t < y.shape[0]):
        raise IndexError(f"row {t} outside [{theta.p}, {y.shape[0]}): lags unavailable")
    eta = linear_predictor(theta.values, theta.layout, y, j, np.array([t]))
    return float(mean_from_predictor(eta)[0])


def log_beta_normalizer(mu, gamma):
    """``log Gamma(gamma) - log Gamma(mu gamma) - log Gamma((1 - mu) gamma)``."""
    return gammaln(gamma) - gammaln(mu * gamma) - gammaln((1.0 - mu) * gamma)


def log_beta_kernel(y, mu, gamma):
    """Vectorised log beta density in the mean/precision parameterisation."""
    return (
        log_beta_normalizer(mu, gamma)
        + (mu * gamma - 1.0) * np.log(y)
        + ((1.0 - mu) * gamma - 1.0) * np.log1p(-y)
    )


def log_beta_local(y: float, params: BetaLocalParams) -> float:
    """Log of the local calibration factor at PIT ``y``.

    Raises:
        ValueError: if ``y`` is outside the open unit interval.
    """
    if not (0.0 < y < 1.0):
        raise ValueError(f"y={y!r} outside (0, 1)")
    return float(log_beta_kernel(float(y), params.mu, params.gamma))


# ---------------------------------------------------------------------------
# likelihood, prior, posterior
# ---------------------------------------------------------------------------


def site_log_factors(values: np.ndarray, layout: ThetaLayout, y: np.ndarray) -> np.ndarray:
    """``(T - p) x M`` array of local log factors for rows ``p..T-1``."""
    p = layout.p
    rows = np.arange(p, y.shape[0])
    out = np.empty((rows.size, y.shape[1]))
    for j in range(y.shape[1]):
        mu = mean_from_predictor(linear_predictor(values, layout, y, j, rows))
        gamma = math.exp(values[layout.sigma(j)])
        out[:, j] = log_beta_kernel(y[rows, j], mu, gamma)
    return out


def pseudo_log_likelihood(theta: ThetaState, panel, nbhd: NeighborhoodSystem) -> float:
    """Sum of local log factors over rows ``p..T-1``, conditioning on the first ``p`` rows.

    The ``log Z_t`` terms are not included. They are zero for the directed
    (independent, Markov) systems; for the proximity system they are unknown
    and cancel in the exchange ratio. The Jacobian terms of the risk-neutral
    densities do not depend on ``theta`` and are also left out.
    """
    y = _panel_values(panel)
    _check_compatible(theta, nbhd, y)
    return float(site_log_factors(theta.values, theta.layout, y).sum())


def _log_normal_kernel(x, mean, var):
    x = np.asarray(x, dtype=float)
    return float(-0.5 * np.sum((x - mean) ** 2) / var)


def log_prior(theta: ThetaState, hyper: HyperParams) -> float:
    """Hierarchical log prior, additive constants dropped.

    Normal kernels for the global means, the site means and the per-site
    coefficient blocks; a ``Ga(xi1, xi2)`` prior on ``gamma = exp(sigma)``
    expressed in ``sigma`` (``xi1 * sigma - xi2 * exp(sigma)``).
    """
    v, lay = theta.values, theta.layout
    abar, bbar = v[lay.alpha_bar], v[lay.beta_bar]
    lp = _log_normal_kernel(abar, hyper.a, hyper.s0_sq) + _log_normal_kernel(bbar, hyper.b, hyper.g0_sq)
    for j in lay.groups:
        amean, bmean = v[lay.alpha_mean(j)], v[lay.beta_mean(j)]
        lp += _log_normal_kernel(amean, abar, hyper.s_sq)
        lp += _log_normal_kernel(bmean, bbar, hyper.g_sq)
        lp += _log_normal_kernel(v[lay.alpha(j)], amean, hyper.s_j_sq)
        b_idx = sorted(set(lay.beta(j).values())) if not lay.pooled else _pooled_beta_indices(lay)
        if b_idx:
            lp += _log_normal_kernel(v[b_idx], bmean, hyper.g_j_sq)
        s = v[lay.sigma(j)]
        lp += hyper.xi1 * s - hyper.xi2 * math.exp(s)
    return float(lp)


def _pooled_beta_indices(layout: ThetaLayout) -> list[int]:
    idx = set()
    for j in range(layout.nbhd.M):
        idx.update(layout.beta(j).values())
    return sorted(idx)


def unnormalized_log_posterior(theta: ThetaState, panel, nbhd: NeighborhoodSystem, hyper: HyperParams) -> float:
    """Pseudo-log-likelihood plus log prior; ``sum_t log Z_t`` is excluded."""
    return pseudo_log_likelihood(theta, panel, nbhd) + log_prior(theta, hyper)


def moment_start(layout: ThetaLayout, y: np.ndarray) -> ThetaState:
    """Starting point from per-column moments: intercept at the logit mean, precision by moments."""
    v = np.zeros(layout.dim)
    ybar = y.mean(axis=0)
    var = y.var(axis=0)
    for j in range(layout.nbhd.M):
        m = float(np.clip(ybar[j], 0.05, 0.95))
        g = m * (1 - m) / max(float(var[j]), 1e-6) - 1.0
        v[layout.alpha(j)[0]] += math.log(m / (1 - m))
        v[layout.sigma(j)] += math.log(min(max(g, 0.5), 200.0))
    if layout.pooled:
        M = layout.nbhd.M
        v[layout.alpha(0)[0]] /= M
        v[layout.sigma(0)] /= M
    for j in layout.groups:
        v[layout.alpha_mean(j)] = v[layout.alpha(j)].mean()
    return ThetaState(layout, v)


def posterior_mode(layout: ThetaLayout, y, hyper: HyperParams, start: ThetaState | None = None) -> ThetaState:
    """Maximiser of :func:`unnormalized_log_posterior`, from the moment start by default.

    For the directed systems this is the exact posterior mode; for the
    proximity system it is the pseudo-posterior mode. Falls back to the
    start point if the optimiser does not improve on it.
    """
    y = _panel_values(y)
    x0 = (moment_start(layout, y) if start is None else start).values
    nbhd = layout.nbhd

    def neg(v):
        with np.errstate(over="ignore", invalid="ignore"):
            val = unnormalized_log_posterior(ThetaState(layout, v), y, nbhd, hyper)
        return -val if np.isfinite(val) else 1e300

    res = optimize.minimize(neg, x0, method="L-BFGS-B", bounds=[(-50, 50)] * layout.dim)
    if not np.all(np.isfinite(res.x)) or res.fun >= neg(x0):
        return ThetaState(layout, x0)
    return ThetaState(layout, res.x)
