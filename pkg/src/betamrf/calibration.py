"""Deforming risk-neutral curves into calibrated physical curves with posterior draws."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc, betaln, xlog1py, xlogy

from .market import RndCurve
from .mcmc import ChainOutput
from .model import (
    PIT_EPS,
    NeighborhoodSystem,
    PitPanel,
    ThetaLayout,
    linear_predictor,
    mean_from_predictor,
)


def layout_from_chain(chain: ChainOutput) -> ThetaLayout:
    """Rebuild the parameter layout recorded in a chain's metadata."""
    meta = chain.meta
    try:
        layout = ThetaLayout(int(meta["p"]), NeighborhoodSystem(meta["topology"], int(meta["M"])), bool(meta["pooled"]))
    except KeyError as exc:
        raise ValueError(f"chain metadata lacks {exc.args[0]!r}; cannot rebuild the layout") from None
    if layout.names != tuple(chain.names):
        raise ValueError("chain columns do not match the layout in its metadata")
    return layout


def beta_pdf(u, a, b):
    """Beta density in the ``(a, b)`` shape parametrisation; broadcasts."""
    return np.exp(xlogy(a - 1.0, u) + xlog1py(b - 1.0, -u) - betaln(a, b))


@dataclass(frozen=True, eq=False)
class CalibratedCurve:
    """Pointwise posterior summaries of a calibrated density on a strike grid.

    ``pdf_lo``/``pdf_hi`` are pointwise equal-tailed bands across draws.
    """

    strikes: np.ndarray
    pdf_mean: np.ndarray
    pdf_lo: np.ndarray
    pdf_hi: np.ndarray
    cdf_mean: np.ndarray
    level: float = 0.95

    def __post_init__(self):
        arrs = [np.asarray(getattr(self, n), dtype=float) for n in ("strikes", "pdf_mean", "pdf_lo", "pdf_hi", "cdf_mean")]
        if len({a.shape for a in arrs}) != 1:
            raise ValueError("all curve columns must have the same length")
        for name, a in zip(("strikes", "pdf_mean", "pdf_lo", "pdf_hi", "cdf_mean"), arrs):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["strike", "pdf_mean", "pdf_lo", "pdf_hi", "cdf_mean"])
            for row in zip(self.strikes, self.pdf_mean, self.pdf_lo, self.pdf_hi, self.cdf_mean):
                w.writerow([repr(float(x)) for x in row])

    @classmethod
    def read_csv(cls, path) -> "CalibratedCurve":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        cols = {k: np.array([float(r[k]) for r in rows]) for k in ("strike", "pdf_mean", "pdf_lo", "pdf_hi", "cdf_mean")}
        return cls(cols["strike"], cols["pdf_mean"], cols["pdf_lo"], cols["pdf_hi"], cols["cdf_mean"])


def site_shapes(draws: np.ndarray, layout: ThetaLayout, j: int, lags, neighbor_pits=None):
    """Per-draw beta shapes ``(mu * gamma, (1 - mu) * gamma)`` of site ``j``.

    Args:
        draws: ``n_draws x dim`` parameter matrix.
        lags: ``(y_{t-1,j}, ..., y_{t-p,j})``.
        neighbor_pits: zero-based neighbour site -> its PIT at ``t``.
    """
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    lags = np.asarray(lags, dtype=float).reshape(-1)
    if lags.size != layout.p:
        raise ValueError(f"lags: expected {layout.p} values, got {lags.size}")
    neighbor_pits = neighbor_pits or {}
    missing = set(layout.beta(j)) - set(neighbor_pits)
    if missing:
        raise ValueError(f"neighbor_pits: missing site(s) {sorted(missing)}")
    a = draws[:, layout.alpha(j)]
    eta = a[:, 0] + a[:, 1:] @ lags
    for k, idx in layout.beta(j).items():
        eta = eta + draws[:, idx] * float(neighbor_pits[k])
    mu = mean_from_predictor(eta)
    gamma = np.exp(draws[:, layout.sigma(j)])
    return mu * gamma, (1.0 - mu) * gamma


def calibrate_density(
    rnd: RndCurve,
    draws: ChainOutput,
    j: int,
    lags,
    neighbor_pits=None,
    strikes=None,
    level: float = 0.95,
    layout: ThetaLayout | None = None,
) -> CalibratedCurve:
    """Physical density ``f^P(x) = beta_pdf(F^Q(x)) f^Q(x)`` summarised over draws.

    The calibrated CDF is ``betainc(a, b, F^Q(x))``, evaluated exactly; the
    density clamps ``F^Q`` into ``[1e-9, 1 - 1e-9]`` so singular beta shapes
    stay finite at the grid ends.
    """
    if draws.n_iter == 0:
        raise ValueError("draws: chain has no draws")
    layout = layout_from_chain(draws) if layout is None else layout
    x = rnd.grid() if strikes is None else np.asarray(strikes, dtype=float)
    u = np.clip(np.asarray(rnd.cdf(x), dtype=float), 0.0, 1.0)
    fq = np.asarray(rnd.pdf(x), dtype=float)
    a, b = site_shapes(draws.draws, layout, j, lags, neighbor_pits)
    a, b = a[:, None], b[:, None]
    pdfs = beta_pdf(np.clip(u, PIT_EPS, 1 - PIT_EPS), a, b) * fq
    cdfs = betainc(a, b, u)
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(pdfs, [tail, 1.0 - tail], axis=0)
    mean = pdfs.mean(axis=0)
    return CalibratedCurve(x, mean, np.minimum(lo, mean), np.maximum(hi, mean), cdfs.mean(axis=0), level)


def ks_distance(sample) -> float:
    """``sup |ECDF - U(0,1)|`` of a sample in ``[0, 1]``."""
    x = np.sort(np.asarray(sample, dtype=float).reshape(-1))
    if x.size == 0:
        raise ValueError("sample: empty")
    if np.any((x < 0) | (x > 1)):
        raise ValueError("sample: values must lie in [0, 1]")
    n = x.size
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - x), np.max(x - (i - 1) / n)))


def ecdf(sample, grid) -> np.ndarray:
    x = np.sort(np.asarray(sample, dtype=float))
    return np.searchsorted(x, grid, side="right") / x.size


@dataclass(frozen=True, eq=False)
class PitDiagnostics:
    """ECDF of raw and calibrated PITs of one site on a 101-point grid in ``[0, 1]``."""

    site: int
    u: np.ndarray
    ecdf_uncal: np.ndarray
    ecdf_cal: np.ndarray
    ks_uncal: float
    ks_cal: float
    calibrated_pits: np.ndarray

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["u", "ecdf_uncal", "ecdf_cal"])
            for row in zip(self.u, self.ecdf_uncal, self.ecdf_cal):
                w.writerow([repr(float(x)) for x in row])


def calibrated_pits(panel, chain: ChainOutput, layout: ThetaLayout | None = None) -> np.ndarray:
    """``(T - p) x M`` PITs pushed through the posterior-mean beta CDF at each ``(t, j)``."""
    if chain.n_iter == 0:
        raise ValueError("draws: chain has no draws")
    layout = layout_from_chain(chain) if layout is None else layout
    y = panel.values if isinstance(panel, PitPanel) else np.asarray(panel, dtype=float)
    theta = chain.draws.mean(axis=0)
    rows = np.arange(layout.p, y.shape[0])
    out = np.empty((rows.size, y.shape[1]))
    for j in range(y.shape[1]):
        mu = mean_from_predictor(linear_predictor(theta, layout, y, j, rows))
        gamma = np.exp(theta[layout.sigma(j)])
        out[:, j] = betainc(mu * gamma, (1.0 - mu) * gamma, y[rows, j])
    return out


def calibrated_pit_cdf(panel, draws: ChainOutput, nbhd: NeighborhoodSystem | None = None, n_grid: int = 101):
    """Per-site ECDFs of raw and calibrated PITs, with KS distances to uniform.

    Both ECDFs use rows ``p..T-1``, the rows that carry a fitted deformation.
    The identity line ``u`` is the perfect-calibration reference.
    """
    layout = layout_from_chain(draws)
    if nbhd is not None and nbhd != layout.nbhd:
        raise ValueError("nbhd does not match the chain's neighbourhood system")
    y = panel.values if isinstance(panel, PitPanel) else np.asarray(panel, dtype=float)
    cal = calibrated_pits(y, draws, layout)
    raw = y[layout.p:]
    grid = np.linspace(0.0, 1.0, n_grid)
    return [
        PitDiagnostics(
            j, grid, ecdf(raw[:, j], grid), ecdf(cal[:, j], grid),
            ks_distance(raw[:, j]), ks_distance(cal[:, j]), cal[:, j],
        )
        for j in range(y.shape[1])
    ]
