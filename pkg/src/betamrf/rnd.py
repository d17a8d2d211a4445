"""Smile smoothing in sigma-delta space and numeric risk-neutral density extraction.

A vega-weighted natural cubic smoothing spline is fitted to the implied
volatility smile with call delta on the x-axis. Calls are then repriced on a
strike grid and the density is the discounted second strike derivative of
the call price.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded
from scipy.optimize import brentq
from scipy.special import ndtr, ndtri

from .market import NumericRnd
from .model import PIT_EPS, PitPanel

log = logging.getLogger(__name__)

SQRT_2PI = math.sqrt(2.0 * math.pi)


class SmileFitError(ValueError):
    pass


class RndExtractionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Black-Scholes conversions
# ---------------------------------------------------------------------------


def _validate(*xs):
    for x in xs:
        if np.any(~(np.asarray(x, dtype=float) > 0)):
            raise ValueError("Black-Scholes inputs must be positive")


def _d1(forward, strike, sigma, tau):
    sd = sigma * np.sqrt(tau)
    return (np.log(forward / strike) + 0.5 * sd**2) / sd


def _scalar(x):
    return float(x) if np.ndim(x) == 0 else x


def bs_call_price(forward, strike, sigma, tau, rate=0.0):
    """Discounted Black price of a call on the forward."""
    _validate(forward, strike, sigma, tau)
    forward, strike, sigma, tau = (np.asarray(v, dtype=float) for v in (forward, strike, sigma, tau))
    d1 = _d1(forward, strike, sigma, tau)
    d2 = d1 - sigma * np.sqrt(tau)
    return _scalar(np.exp(-rate * tau) * (forward * ndtr(d1) - strike * ndtr(d2)))


def bs_delta(forward, strike, sigma, tau):
    """Forward call delta ``N(d1)`` (no premium adjustment)."""
    _validate(forward, strike, sigma, tau)
    forward, strike, sigma, tau = (np.asarray(v, dtype=float) for v in (forward, strike, sigma, tau))
    return _scalar(ndtr(_d1(forward, strike, sigma, tau)))


def bs_vega(forward, strike, sigma, tau, rate=0.0):
    """``dC/dsigma`` of :func:`bs_call_price`."""
    _validate(forward, strike, sigma, tau)
    forward, strike, sigma, tau = (np.asarray(v, dtype=float) for v in (forward, strike, sigma, tau))
    d1 = _d1(forward, strike, sigma, tau)
    return _scalar(np.exp(-rate * tau) * forward * np.exp(-0.5 * d1**2) / SQRT_2PI * np.sqrt(tau))


def strike_from_delta(forward, delta, sigma, tau):
    """Invert the forward delta for the strike at a given volatility."""
    sd = sigma * np.sqrt(tau)
    return _scalar(forward * np.exp(0.5 * sd**2 - sd * ndtri(delta)))


def implied_vol(price, forward, strike, tau, rate=0.0, lo=1e-6, hi=5.0) -> float:
    """Black implied volatility by bracketing root search."""
    return brentq(lambda s: bs_call_price(forward, strike, s, tau, rate) - price, lo, hi, xtol=1e-14, rtol=1e-14)


# ---------------------------------------------------------------------------
# smile data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SmileQuote:
    date: str
    tenor: float
    spot: float
    forward: float
    rate: float
    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        pts = tuple((float(d), float(s)) for d, s in self.points)
        object.__setattr__(self, "points", pts)
        if len(pts) < 4:
            raise ValueError(f"smile {self.date}/{self.tenor}: need at least 4 points")
        if not (self.tenor > 0 and self.spot > 0 and self.forward > 0):
            raise ValueError(f"smile {self.date}/{self.tenor}: tenor, spot and forward must be positive")
        for d, s in pts:
            if not 0 < d < 1:
                raise ValueError(f"smile {self.date}/{self.tenor}: delta {d} outside (0, 1)")
            if not s > 0:
                raise ValueError(f"smile {self.date}/{self.tenor}: non-positive vol {s}")
        by_delta = sorted(pts, reverse=True)
        strikes = [strike_from_delta(self.forward, d, s, self.tenor) for d, s in by_delta]
        if any(b <= a for a, b in zip(strikes, strikes[1:])):
            raise ValueError(f"smile {self.date}/{self.tenor}: deltas are not decreasing in strike")

    @property
    def deltas(self) -> np.ndarray:
        return np.array([d for d, _ in self.points])

    @property
    def vols(self) -> np.ndarray:
        return np.array([s for _, s in self.points])

    @property
    def strikes(self) -> np.ndarray:
        return strike_from_delta(self.forward, self.deltas, self.vols, self.tenor)


SMILE_COLUMNS = ("date", "tenor_years", "spot", "forward", "rate", "delta", "sigma")


def read_smile_csv(path) -> list[SmileQuote]:
    """Read ``date,tenor_years,spot,forward,rate,delta,sigma`` rows into quotes.

    Raises:
        ValueError: naming the line of the first malformed row.
    """
    groups: dict[tuple[str, float], list] = defaultdict(list)
    meta: dict[tuple[str, float], tuple[float, float, float]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != SMILE_COLUMNS:
            raise ValueError(f"{path}:1: expected header {','.join(SMILE_COLUMNS)}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(SMILE_COLUMNS):
                raise ValueError(f"{path}:{line}: expected {len(SMILE_COLUMNS)} fields, got {len(row)}")
            try:
                date = row[0].strip()
                tenor, spot, fwd, rate, delta, sigma = (float(x) for x in row[1:])
            except ValueError as exc:
                raise ValueError(f"{path}:{line}: {exc}") from None
            if not sigma > 0:
                raise ValueError(f"{path}:{line}: non-positive volatility {sigma}")
            if not 0 < delta < 1:
                raise ValueError(f"{path}:{line}: delta {delta} outside (0, 1)")
            if not (tenor > 0 and spot > 0 and fwd > 0):
                raise ValueError(f"{path}:{line}: tenor, spot and forward must be positive")
            key = (date, tenor)
            if key in meta and meta[key] != (spot, fwd, rate):
                raise ValueError(f"{path}:{line}: spot/forward/rate differ within smile {date}/{tenor}")
            meta[key] = (spot, fwd, rate)
            groups[key].append((delta, sigma))
    return [SmileQuote(d, t, *meta[(d, t)], tuple(groups[(d, t)])) for d, t in sorted(groups)]


# ---------------------------------------------------------------------------
# smoothing spline
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SplineFit:
    """Natural cubic spline in delta; ``coefficients[i]`` is ``c0..c3`` in powers of ``delta - knots[i]``."""

    knots: np.ndarray
    coefficients: np.ndarray
    lam: float
    weights: np.ndarray

    def __call__(self, delta, nu: int = 0):
        """Value (``nu=0``) or derivative of order ``nu <= 2``; flat outside the knot range."""
        x = np.asarray(delta, dtype=float)
        k = self.knots
        inside = (x >= k[0]) & (x <= k[-1])
        xc = np.clip(x, k[0], k[-1])
        i = np.clip(np.searchsorted(k, xc, side="right") - 1, 0, k.size - 2)
        d = xc - k[i]
        c = self.coefficients[i]
        if nu == 0:
            out = c[..., 0] + d * (c[..., 1] + d * (c[..., 2] + d * c[..., 3]))
        elif nu == 1:
            out = np.where(inside, c[..., 1] + d * (2 * c[..., 2] + 3 * d * c[..., 3]), 0.0)
        elif nu == 2:
            out = np.where(inside, 2 * c[..., 2] + 6 * d * c[..., 3], 0.0)
        else:
            raise ValueError("nu: only derivatives up to order 2")
        return _scalar(out)

    @property
    def values_at_knots(self) -> np.ndarray:
        return self(self.knots)

    def roughness(self) -> float:
        """``int (g'')^2`` over the knot range (exact for a piecewise-linear ``g''``)."""
        h = np.diff(self.knots)
        a = 2 * self.coefficients[:, 2]
        b = a + 6 * self.coefficients[:, 3] * h
        return float(np.sum(h * (a * a + a * b + b * b) / 3.0))


def smoothing_objective(fit: SplineFit, deltas, vols, weights, lam: float) -> float:
    """``lam * sum w (sigma - g)^2 + (1 - lam) * int (g'')^2``."""
    resid = np.asarray(vols) - fit(np.asarray(deltas))
    return float(lam * np.sum(np.asarray(weights) * resid**2) + (1 - lam) * fit.roughness())


def _curve_from_values(x, g, gam) -> np.ndarray:
    h = np.diff(x)
    coef = np.empty((x.size - 1, 4))
    coef[:, 0] = g[:-1]
    coef[:, 1] = np.diff(g) / h - h * (2 * gam[:-1] + gam[1:]) / 6.0
    coef[:, 2] = gam[:-1] / 2.0
    coef[:, 3] = np.diff(gam) / (6.0 * h)
    return coef


def smoothing_spline(x, y, w, lam: float) -> SplineFit:
    """Reinsch solution of ``min lam sum w (y - g)^2 + (1 - lam) int (g'')^2``.

    Repeated abscissae are merged (weights summed, values weight-averaged).
    """
    if not 0 < lam <= 1:
        raise ValueError("lam: must be in (0, 1]")
    x, y, w = (np.asarray(a, dtype=float) for a in (x, y, w))
    order = np.argsort(x, kind="stable")
    x, y, w = x[order], y[order], w[order]
    ux, inv = np.unique(x, return_inverse=True)
    if ux.size < 2:
        raise SmileFitError("singular system: all abscissae coincide")
    uw = np.bincount(inv, weights=w)
    uy = np.bincount(inv, weights=w * y) / uw
    x, y, w = ux, uy, uw
    n = x.size
    alpha = (1.0 - lam) / lam
    if n == 2 or alpha == 0.0:
        g = y.copy()
    if n == 2:
        gam = np.zeros(n)
        return SplineFit(x, _curve_from_values(x, g, gam), lam, w)
    h = np.diff(x)
    # Q (n x n-2) and R (n-2 x n-2), Green & Silverman notation
    Q = np.zeros((n, n - 2))
    idx = np.arange(n - 2)
    Q[idx, idx] = 1.0 / h[:-1]
    Q[idx + 1, idx] = -1.0 / h[:-1] - 1.0 / h[1:]
    Q[idx + 2, idx] = 1.0 / h[1:]
    R = np.diag((h[:-1] + h[1:]) / 3.0)
    R[idx[:-1], idx[:-1] + 1] = h[1:-1] / 6.0
    R[idx[:-1] + 1, idx[:-1]] = h[1:-1] / 6.0
    A = R + alpha * Q.T @ (Q / w[:, None])
    ab = np.zeros((5, n - 2))
    for off in range(-2, 3):
        diag = np.diagonal(A, off)
        if off >= 0:
            ab[2 - off, off:] = diag
        else:
            ab[2 - off, :off] = diag
    gam_inner = solve_banded((2, 2), ab, Q.T @ y)
    g = y - alpha * (Q @ gam_inner) / w
    gam = np.concatenate([[0.0], gam_inner, [0.0]])
    return SplineFit(x, _curve_from_values(x, g, gam), lam, w)


def vega_weights(quote: SmileQuote) -> np.ndarray:
    nu = bs_vega(quote.forward, quote.strikes, quote.vols, quote.tenor, quote.rate)
    return nu / nu.sum()


def fit_smile_spline(quote: SmileQuote, lam: float = 0.99) -> SplineFit:
    """Vega-weighted cubic smoothing spline of implied vol against call delta."""
    return smoothing_spline(quote.deltas, quote.vols, vega_weights(quote), lam)


# ---------------------------------------------------------------------------
# density extraction
# ---------------------------------------------------------------------------


def vol_at_strike(fit: SplineFit, forward, strike, tau, tol: float = 1e-13, max_iter: int = 200) -> np.ndarray:
    """Solve ``sigma = g(delta(K, sigma))`` by fixed-point iteration."""
    k = np.asarray(strike, dtype=float)
    sigma = np.full(k.shape, float(fit(0.5)))
    for _ in range(max_iter):
        new = np.maximum(fit(bs_delta(forward, k, sigma, tau)), 1e-6)
        if np.max(np.abs(new - sigma)) < tol:
            return new
        sigma = new
    log.warning("vol_at_strike: fixed point not converged to %g", tol)
    return sigma


def extract_rnd(
    fit: SplineFit,
    quote: SmileQuote,
    strike_grid_size: int = 500,
    tail_prob: float = 1e-4,
    max_clip_mass: float = 0.05,
) -> NumericRnd:
    """Numeric risk-neutral density ``exp(r tau) d2C/dK2`` on a uniform strike grid.

    The grid spans the ``tail_prob`` and ``1 - tail_prob`` quantiles of a
    flat-vol lognormal anchored at the at-the-money fitted vol. Negative
    density is clipped and the curve renormalised to unit mass.

    Raises:
        RndExtractionError: if clipping removed more than ``max_clip_mass``.
    """
    F, tau, r = quote.forward, quote.tenor, quote.rate
    anchor = float(fit(0.5))
    sd = anchor * math.sqrt(tau)
    lo = F * math.exp(-0.5 * sd**2 + sd * ndtri(tail_prob))
    hi = F * math.exp(-0.5 * sd**2 + sd * ndtri(1 - tail_prob))
    strikes = np.linspace(lo, hi, strike_grid_size)
    h = strikes[1] - strikes[0]
    ext = np.concatenate([[lo - h], strikes, [hi + h]])
    if ext[0] <= 0:
        ext[0] = 0.5 * strikes[0]
    sig = vol_at_strike(fit, F, ext, tau)
    calls = bs_call_price(F, ext, sig, tau, r)
    dens = math.exp(r * tau) * (calls[2:] - 2 * calls[1:-1] + calls[:-2]) / h**2
    if ext[0] != lo - h:
        # uneven first step: three-point second difference
        h0 = strikes[0] - ext[0]
        dens[0] = math.exp(r * tau) * 2 * (
            calls[0] / (h0 * (h0 + h)) - calls[1] / (h0 * h) + calls[2] / (h * (h0 + h))
        )
    pos = np.trapezoid(np.maximum(dens, 0.0), strikes)
    neg = np.trapezoid(np.maximum(-dens, 0.0), strikes)
    if not pos > 0:
        raise RndExtractionError("extracted density has no positive mass")
    if neg / pos > max_clip_mass:
        raise RndExtractionError(f"clipping removed {neg / pos:.1%} of the probability mass")
    return NumericRnd.from_pdf(strikes, np.maximum(dens, 0.0))


def fit_surface(quotes, lam: float = 0.99, strike_grid_size: int = 500) -> dict[tuple[str, float], NumericRnd]:
    """Fit every smile; failures are logged and skipped."""
    curves = {}
    for q in quotes:
        try:
            curves[(q.date, q.tenor)] = extract_rnd(fit_smile_spline(q, lam), q, strike_grid_size)
        except (SmileFitError, RndExtractionError, ValueError) as exc:
            log.warning("smile %s tenor %g skipped: %s", q.date, q.tenor, exc)
    return curves


def pits_from_surface(quotes, realized, curves=None, lam: float = 0.99) -> PitPanel:
    """PIT panel from fitted smiles and realised levels.

    Args:
        quotes: smile quotes over dates and tenors.
        realized: mapping ``(date, tenor) -> realised level at date + tenor``.
        curves: optional pre-fitted ``(date, tenor) -> NumericRnd``.

    Dates lacking a curve or a realised level for some tenor are dropped
    with a warning. Levels outside the strike grid clamp to ``1e-9`` or
    ``1 - 1e-9``, also with a warning.
    """
    quotes = list(quotes)
    curves = fit_surface(quotes, lam) if curves is None else curves
    tenors = sorted({q.tenor for q in quotes})
    dates = sorted({q.date for q in quotes})
    rows, kept = [], []
    for d in dates:
        row = []
        for tau in tenors:
            curve = curves.get((d, tau))
            level = realized.get((d, tau))
            if curve is None or level is None:
                break
            u = curve.cdf(level)
            if level < curve.strikes[0] or level > curve.strikes[-1]:
                warnings.warn(f"realised level {level} for {d}/{tau} outside the strike grid; PIT clamped")
            row.append(min(max(u, PIT_EPS), 1 - PIT_EPS))
        else:
            rows.append(row)
            kept.append(d)
            continue
        warnings.warn(f"date {d} dropped: missing curve or realised level")
    values = np.array(rows, dtype=float).reshape(len(rows), len(tenors))
    if values.shape[0] == 0:
        raise ValueError("no usable dates: every date lacks a curve or a realised level")
    return PitPanel(values, tuple(kept))
