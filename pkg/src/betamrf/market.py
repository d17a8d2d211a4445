"""Synthetic market: GBM paths, lognormal risk-neutral curves and rolling PIT panels."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .model import PIT_EPS, MaturityGrid, PitPanel


@dataclass(frozen=True)
class GbmSpec:
    s0: float = 100.0
    mu: float = 0.20
    r: float = 0.05
    sigma_true: float = 0.15
    sigma_rn: float = 0.10
    horizon_years: float = 2.0
    steps_per_year: int = 252

    def __post_init__(self):
        if not self.s0 > 0:
            raise ValueError("s0: must be positive")
        if self.sigma_true < 0:
            raise ValueError("sigma_true: must be non-negative")
        if not self.sigma_rn > 0:
            raise ValueError("sigma_rn: must be positive")
        if not self.horizon_years > 0:
            raise ValueError("horizon_years: must be positive")
        if int(self.steps_per_year) < 1:
            raise ValueError("steps_per_year: must be at least 1")

    @property
    def n_prices(self) -> int:
        return int(math.floor(self.horizon_years * self.steps_per_year + 0.5))


def simulate_gbm(spec: GbmSpec, rng: np.random.Generator, extra_steps: int = 0) -> np.ndarray:
    """Daily GBM prices ``S_0, S_1, ...`` under the physical measure.

    Exact log-normal stepping, ``S_{k+1} = S_k exp((mu - sigma^2/2) dt + sigma sqrt(dt) eps)``.
    The path holds ``round(horizon * steps_per_year) + extra_steps`` prices.
    """
    n = spec.n_prices + int(extra_steps)
    dt = 1.0 / spec.steps_per_year
    sig = spec.sigma_true
    eps = rng.standard_normal(n - 1)
    steps = (spec.mu - 0.5 * sig**2) * dt + sig * math.sqrt(dt) * eps
    log_path = math.log(spec.s0) + np.concatenate([[0.0], np.cumsum(steps)])
    return np.exp(log_path)


def _check_positive(*xs):
    for x in xs:
        if np.any(np.asarray(x) <= 0):
            raise ValueError("prices, volatility and tenor must be positive")


def lognormal_cdf(s_future, s_t, r: float, sigma: float, tau: float):
    """Risk-neutral lognormal CDF of ``S_{t+tau}`` given ``S_t``."""
    _check_positive(s_future, s_t, sigma, tau)
    sd = sigma * math.sqrt(tau)
    z = (np.log(np.asarray(s_future, dtype=float) / s_t) - (r - 0.5 * sigma**2) * tau) / sd
    out = ndtr(z)
    return float(out) if np.ndim(out) == 0 else out


def lognormal_pdf(s_future, s_t, r: float, sigma: float, tau: float):
    """Density matching :func:`lognormal_cdf` (squared exponent bracket)."""
    _check_positive(s_future, s_t, sigma, tau)
    s = np.asarray(s_future, dtype=float)
    var = sigma**2 * tau
    dev = np.log(s / s_t) - (r - 0.5 * sigma**2) * tau
    out = np.exp(-(dev**2) / (2.0 * var)) / (s * math.sqrt(2.0 * math.pi * var))
    return float(out) if np.ndim(out) == 0 else out


class RndCurve:
    """Risk-neutral density/CDF pair over terminal prices."""

    def cdf(self, x):
        raise NotImplementedError

    def pdf(self, x):
        raise NotImplementedError

    def inverse_cdf(self, u):
        raise NotImplementedError

    def grid(self, n: int = 500) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class LognormalRnd(RndCurve):
    s_t: float
    r: float
    sigma: float
    tau: float

    def cdf(self, x):
        return lognormal_cdf(x, self.s_t, self.r, self.sigma, self.tau)

    def pdf(self, x):
        return lognormal_pdf(x, self.s_t, self.r, self.sigma, self.tau)

    def inverse_cdf(self, u):
        u = np.asarray(u, dtype=float)
        drift = (self.r - 0.5 * self.sigma**2) * self.tau
        out = self.s_t * np.exp(drift + self.sigma * math.sqrt(self.tau) * ndtri(u))
        return float(out) if np.ndim(out) == 0 else out

    @property
    def forward(self) -> float:
        return self.s_t * math.exp(self.r * self.tau)

    def grid(self, n: int = 500, q: float = 1e-4) -> np.ndarray:
        return np.linspace(self.inverse_cdf(q), self.inverse_cdf(1 - q), n)


@dataclass(frozen=True, eq=False)
class NumericRnd(RndCurve):
    """Tabulated curve; linear interpolation, zero density outside the grid."""

    strikes: np.ndarray
    pdf_values: np.ndarray
    cdf_values: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.strikes, dtype=float)
        f = np.asarray(self.pdf_values, dtype=float)
        c = np.asarray(self.cdf_values, dtype=float)
        if not (k.shape == f.shape == c.shape) or k.ndim != 1 or k.size < 2:
            raise ValueError("strikes, pdf and cdf must be equal-length 1-d arrays")
        if np.any(np.diff(k) <= 0):
            raise ValueError("strikes: must be strictly increasing")
        if np.any(f < 0):
            raise ValueError("pdf: must be non-negative")
        if np.any(np.diff(c) < -1e-12) or c[0] < -1e-12 or c[-1] > 1 + 1e-9:
            raise ValueError("cdf: must be monotone within [0, 1]")
        for name, arr in (("strikes", k), ("pdf_values", f), ("cdf_values", c)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_pdf(cls, strikes, pdf) -> "NumericRnd":
        """Renormalise ``pdf`` to unit trapezoid mass and integrate it into a CDF."""
        k = np.asarray(strikes, dtype=float)
        f = np.asarray(pdf, dtype=float)
        f = f / np.trapezoid(f, k)
        c = np.concatenate([[0.0], np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(k))])
        return cls(k, f, c)

    def cdf(self, x):
        out = np.interp(x, self.strikes, self.cdf_values, left=0.0, right=1.0)
        return float(out) if np.ndim(out) == 0 else out

    def pdf(self, x):
        out = np.interp(x, self.strikes, self.pdf_values, left=0.0, right=0.0)
        return float(out) if np.ndim(out) == 0 else out

    def inverse_cdf(self, u):
        c, keep = np.unique(self.cdf_values, return_index=True)
        out = np.interp(u, c, self.strikes[keep])
        return float(out) if np.ndim(out) == 0 else out

    def grid(self, n: int | None = None) -> np.ndarray:
        return np.array(self.strikes)

    def mass(self) -> float:
        return float(np.trapezoid(self.pdf_values, self.strikes))

    def mean(self) -> float:
        return float(np.trapezoid(self.strikes * self.pdf_values, self.strikes))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["strike", "pdf", "cdf"])
            for row in zip(self.strikes, self.pdf_values, self.cdf_values):
                w.writerow([repr(float(x)) for x in row])

    @classmethod
    def read_csv(cls, path) -> "NumericRnd":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            np.array([float(r["strike"]) for r in rows]),
            np.array([float(r["pdf"]) for r in rows]),
            np.array([float(r["cdf"]) for r in rows]),
        )


def trading_dates(n: int, start: str = "2010-01-04") -> tuple[str, ...]:
    """``n`` consecutive weekdays from ``start`` as ISO strings."""
    first = np.busday_offset(np.datetime64(start, "D"), 0, roll="forward")
    days = np.busday_offset(first, np.arange(n), roll="forward")
    return tuple(str(d) for d in days)


def build_pit_panel(path, spec: GbmSpec, grid: MaturityGrid, start_date: str = "2010-01-04") -> PitPanel:
    """Rolling PITs: row ``t``, column ``j`` is ``F^Q_{t,tau_j}(S_{t+d_j})``.

    ``d_j = round(tau_j * steps_per_year)``; rows cover every date whose
    longest tenor has a realised price on the path.
    """
    s = np.asarray(path, dtype=float)
    days = [int(math.floor(t * spec.steps_per_year + 0.5)) for t in grid.tenors]
    n_rows = s.size - max(days)
    if n_rows < 1:
        raise ValueError(
            f"path of {s.size} prices too short for a {max(days)}-day lookahead"
        )
    cols = []
    for tau, d in zip(grid.tenors, days):
        cols.append(lognormal_cdf(s[d: d + n_rows], s[:n_rows], spec.r, spec.sigma_rn, tau))
    return PitPanel(np.column_stack(cols), trading_dates(n_rows, start_date))


def thin_panel(panel: PitPanel, keep_every: float) -> PitPanel:
    """Keep rows ``round(k * keep_every)``, ``k = 0, 1, ...``; fractional factors allowed."""
    if not keep_every >= 1:
        raise ValueError("keep_every: must be at least 1")
    if keep_every > panel.T:
        raise ValueError("keep_every exceeds the panel length; result would be empty")
    idx = []
    k = 0
    while True:
        i = int(math.floor(k * keep_every + 0.5))
        if i >= panel.T:
            break
        idx.append(i)
        k += 1
    dates = None if panel.dates is None else tuple(panel.dates[i] for i in idx)
    return PitPanel(panel.values[idx], dates)


def write_panel_csv(path, panel: PitPanel) -> None:
    """Header ``date,tenor_1,...,tenor_M``; PITs with 12 significant digits."""
    dates = panel.dates if panel.dates is not None else tuple(str(i) for i in range(panel.T))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date"] + [f"tenor_{j + 1}" for j in range(panel.M)])
        for d, row in zip(dates, panel.values):
            w.writerow([d] + [f"{x:.12g}" for x in row])


def read_panel_csv(path) -> PitPanel:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "date":
        raise ValueError(f"{path}: expected a header starting with 'date'")
    body = rows[1:]
    for n, r in enumerate(body, start=2):
        if len(r) != len(rows[0]):
            raise ValueError(f"{path}:{n}: expected {len(rows[0])} fields")
    values = np.array([[float(x) for x in r[1:]] for r in body], dtype=float).reshape(len(body), -1)
    return PitPanel(values, tuple(r[0] for r in body))


__all__ = [
    "GbmSpec",
    "LognormalRnd",
    "NumericRnd",
    "PIT_EPS",
    "RndCurve",
    "build_pit_panel",
    "lognormal_cdf",
    "lognormal_pdf",
    "read_panel_csv",
    "simulate_gbm",
    "thin_panel",
    "trading_dates",
    "write_panel_csv",
]
