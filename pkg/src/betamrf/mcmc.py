"""Double Metropolis-Hastings sampler for the beta MRF posterior.

Each outer iteration makes a random-walk proposal ``theta*``, screens it with
a Metropolis step against the tractable part of the target, simulates an
auxiliary PIT field under ``theta*`` by a few Gibbs sweeps started at the
observed panel, and accepts the exchange move. The screening step is
reversible with respect to its own target, so the exchange ratio only has to
carry whatever that target leaves out:

``step1_target="posterior"``
    screening uses the unnormalised posterior (no ``Z`` terms); the exchange
    ratio reduces to ``l(z|theta) - l(z|theta*)``, an estimate of
    ``log Z(theta*) - log Z(theta)``.
``step1_target="prior"``
    screening uses the prior only; the exchange ratio is the full four-term
    ``l(z|theta) - l(x|theta) + l(x|theta*) - l(z|theta*)``.

Both are exact exchange samplers when the auxiliary draw is exact, which is
the case for the directed topologies (see ``gibbs_sweep_auxiliary``).
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gammaln, ndtri

from .model import (
    ETA_CLIP,
    MU_EPS,
    PIT_EPS,
    HyperParams,
    NeighborhoodSystem,
    PitPanel,
    ThetaLayout,
    ThetaState,
    linear_predictor,
    log_prior,
    mean_from_predictor,
    moment_start,
    posterior_mode,
    pseudo_log_likelihood,
    unnormalized_log_posterior,
)

log = logging.getLogger(__name__)

ADAPT_TARGET = 0.6
# ell**2 with 2 Phi(-ell / 2) = ADAPT_TARGET: the large-dimension acceptance rate
# of a random walk with covariance ell**2 / dim times a Gaussian target's covariance
TARGET_RW_SCALE = float(-2.0 * ndtri(ADAPT_TARGET / 2.0)) ** 2
STEP1_TARGETS = ("posterior", "prior")
GIBBS_SCHEMES = ("auto", "ancestral", "gibbs")
INIT_METHODS = ("mode", "moments")
PROPOSALS = ("laplace", "diagonal")
# panels with fewer free rows use the plain-Python site-by-site sweep
SCALAR_SWEEP_ROWS = 16
ADAPT_ON = ("both", "outer")


class DegenerateChainError(ValueError):
    """A chain segment has zero spectral variance."""


@dataclass
class SamplerConfig:
    n_iter: int = 5000
    n_burnin: int = 2000
    inner_sweeps: int = 1
    proposal_scale: np.ndarray | None = None
    adapt: bool = True
    target_band: tuple[float, float] = (0.5, 0.7)
    adapt_window: int = 50
    adapt_shape: bool = True
    step1_target: str = "posterior"
    gibbs_scheme: str = "auto"
    init: str = "mode"
    proposal: str = "laplace"
    adapt_on: str = "both"
    exchange: bool = True
    seed: int = 0

    def __post_init__(self):
        if int(self.n_iter) < 0:
            raise ValueError("n_iter: must be non-negative")
        if int(self.n_burnin) < 0:
            raise ValueError("n_burnin: must be non-negative")
        if not 1 <= int(self.inner_sweeps) <= 50:
            raise ValueError("inner_sweeps: must be between 1 and 50")
        if int(self.adapt_window) < 1:
            raise ValueError("adapt_window: must be positive")
        if self.step1_target not in STEP1_TARGETS:
            raise ValueError(f"step1_target: expected one of {STEP1_TARGETS}")
        if not self.exchange and self.step1_target != "posterior":
            raise ValueError("exchange: plain MH needs step1_target='posterior'")
        if self.adapt_on not in ADAPT_ON:
            raise ValueError(f"adapt_on: expected one of {ADAPT_ON}")
        if self.init not in INIT_METHODS:
            raise ValueError(f"init: expected one of {INIT_METHODS}")
        if self.proposal not in PROPOSALS:
            raise ValueError(f"proposal: expected one of {PROPOSALS}")
        if self.gibbs_scheme not in GIBBS_SCHEMES:
            raise ValueError(f"gibbs_scheme: expected one of {GIBBS_SCHEMES}")
        lo, hi = self.target_band
        if not 0 < lo < hi < 1:
            raise ValueError("target_band: need 0 < low < high < 1")
        if self.proposal_scale is not None:
            scale = np.asarray(self.proposal_scale, dtype=float)
            if scale.ndim == 2:
                try:
                    np.linalg.cholesky(scale)
                except np.linalg.LinAlgError:
                    raise ValueError("proposal_scale: matrix must be positive definite") from None
            elif np.any(~(scale > 0)):
                raise ValueError("proposal_scale: all entries must be positive")
            self.proposal_scale = scale


def initial_scale(layout: ThetaLayout, hyper: HyperParams | None = None) -> np.ndarray:
    """Diagonal of the starting proposal covariance.

    0.01 on regression coefficients and 0.04 on log precisions. The
    hierarchy means never enter the likelihood, so their entries start at
    their conditional prior variance times ``2.38**2 / dim``.
    """
    hyper = HyperParams() if hyper is None else hyper
    scale = np.full(layout.dim, 0.01)
    scale[layout.sigma_indices()] = 0.04
    rw = 2.38**2 / layout.dim
    n_groups = len(layout.groups)
    for j in layout.groups:
        n_alpha = layout.p + 1
        n_beta = len(set(layout.beta(j).values())) if not layout.pooled else _n_pooled_beta(layout)
        scale[layout.alpha_mean(j)] = rw / (n_alpha / hyper.s_j_sq + 1.0 / hyper.s_sq)
        scale[layout.beta_mean(j)] = rw / (n_beta / hyper.g_j_sq + 1.0 / hyper.g_sq)
    scale[layout.alpha_bar] = rw / (n_groups / hyper.s_sq + 1.0 / hyper.s0_sq)
    scale[layout.beta_bar] = rw / (n_groups / hyper.g_sq + 1.0 / hyper.g0_sq)
    return scale


def curvature_scale(theta: ThetaState, y, hyper: HyperParams, floor: float = 1e-8) -> np.ndarray:
    """``2.38**2 / dim`` times the conditional posterior variances at ``theta``.

    Conditional variances ``1 / -d2 log pi / d theta_i^2`` come from central
    second differences. Coordinates with non-negative curvature fall back to
    :func:`initial_scale`.
    """
    layout = theta.layout
    nbhd = layout.nbhd
    x = theta.values

    def f(v):
        return unnormalized_log_posterior(ThetaState(layout, v), y, nbhd, hyper)

    f0 = f(x)
    fallback = initial_scale(layout, hyper)
    out = fallback.copy()
    rw = 2.38**2 / layout.dim
    for i in range(layout.dim):
        h = 1e-4 * max(1.0, abs(x[i]))
        e = np.zeros(layout.dim)
        e[i] = h
        curv = -(f(x + e) - 2.0 * f0 + f(x - e)) / h**2
        if np.isfinite(curv) and curv > 0:
            out[i] = max(rw / curv, floor)
    return out


def laplace_covariance(theta: ThetaState, y, hyper: HyperParams) -> np.ndarray:
    """``TARGET_RW_SCALE / dim`` times the inverse negative Hessian of the log posterior at ``theta``.

    The multiplier aims the starting acceptance rate at ``ADAPT_TARGET``
    rather than the 0.234 optimum implied by ``2.38**2``. The Hessian comes
    from central differences. If it is not negative definite, the diagonal
    of :func:`curvature_scale` is returned as a matrix.
    """
    layout = theta.layout
    x = theta.values
    d = layout.dim

    def f(v):
        return unnormalized_log_posterior(ThetaState(layout, v), y, layout.nbhd, hyper)

    h = 1e-4 * np.maximum(1.0, np.abs(x))
    H = np.empty((d, d))
    f0 = f(x)
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = h[i]
        H[i, i] = (f(x + ei) - 2.0 * f0 + f(x - ei)) / h[i] ** 2
        for j in range(i + 1, d):
            ej = np.zeros(d)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4 * h[i] * h[j])
    try:
        prec = -H
        np.linalg.cholesky(prec)
        cov = np.linalg.inv(prec) * (TARGET_RW_SCALE / d)
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        log.warning("laplace_covariance: Hessian not negative definite; using the diagonal")
        return np.diag(curvature_scale(theta, y, hyper) * (TARGET_RW_SCALE / 2.38**2))
    return 0.5 * (cov + cov.T)


def _n_pooled_beta(layout: ThetaLayout) -> int:
    idx = set()
    for j in range(layout.nbhd.M):
        idx.update(layout.beta(j).values())
    return len(idx)


@dataclass(frozen=True, eq=False)
class AuxiliaryField:
    """Auxiliary PIT field; rows ``0..p-1`` are copies of the observed panel."""

    values: np.ndarray
    p: int

    @classmethod
    def from_panel(cls, panel, p: int) -> "AuxiliaryField":
        y = panel.values if isinstance(panel, PitPanel) else np.asarray(panel, dtype=float)
        return cls(np.array(y, dtype=float), p)


@dataclass
class ChainOutput:
    names: tuple[str, ...]
    draws: np.ndarray
    accept_rate_outer: float
    accept_rate_exchange: float
    accept_rate_inner: np.ndarray
    geweke_z: np.ndarray
    runtime: float = 0.0
    proposal_scale: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_iter(self) -> int:
        return self.draws.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, self.names.index(name)]

    def to_csv(self, path) -> None:
        write_draws_csv(path, self.names, self.draws)

    def diagnostics(self, include_runtime: bool = False) -> dict:
        out = {
            "n_iter": int(self.n_iter),
            "accept_rate_outer": float(self.accept_rate_outer),
            "accept_rate_exchange": float(self.accept_rate_exchange),
            "accept_rate_inner": [float(x) for x in self.accept_rate_inner],
            "geweke_z": {n: _json_float(z) for n, z in zip(self.names, self.geweke_z)},
            "proposal_scale": None if self.proposal_scale is None else np.asarray(self.proposal_scale, dtype=float).tolist(),
            "meta": self.meta,
        }
        if include_runtime:
            out["runtime"] = float(self.runtime)
        return out

    def write_sidecar(self, path, include_runtime: bool = False) -> None:
        Path(path).write_text(json.dumps(self.diagnostics(include_runtime), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, draws_path, sidecar_path=None) -> "ChainOutput":
        names, draws = read_draws_csv(draws_path)
        diag = json.loads(Path(sidecar_path).read_text()) if sidecar_path else {}
        gz = diag.get("geweke_z", {})
        return cls(
            names=names,
            draws=draws,
            accept_rate_outer=float(diag.get("accept_rate_outer", float("nan"))),
            accept_rate_exchange=float(diag.get("accept_rate_exchange", float("nan"))),
            accept_rate_inner=np.asarray(diag.get("accept_rate_inner", []), dtype=float),
            geweke_z=np.array([_from_json_float(gz.get(n)) for n in names]),
            runtime=float(diag.get("runtime", 0.0)),
            proposal_scale=None if diag.get("proposal_scale") is None else np.asarray(diag["proposal_scale"]),
            meta=diag.get("meta", {}),
        )


def _json_float(x):
    return None if not np.isfinite(x) else float(x)


def _from_json_float(x):
    return float("nan") if x is None else float(x)


def write_draws_csv(path, names, draws) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in np.asarray(draws):
            w.writerow([repr(float(x)) for x in row])


def read_draws_csv(path) -> tuple[tuple[str, ...], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty draws file")
    names = tuple(rows[0])
    draws = np.array([[float(x) for x in r] for r in rows[1:]], dtype=float).reshape(-1, len(names))
    return names, draws


# ---------------------------------------------------------------------------
# outer proposal
# ---------------------------------------------------------------------------


def outer_propose(theta: ThetaState, scale, rng: np.random.Generator) -> ThetaState:
    """Gaussian random walk ``theta + Lambda^{1/2} eps``.

    ``scale`` is either the diagonal of ``Lambda`` (1-d) or the full
    covariance matrix (2-d, factored by Cholesky).
    """
    scale = np.asarray(scale, dtype=float)
    d = theta.values.shape[0]
    eps = rng.standard_normal(d)
    if scale.shape == (d,):
        return theta.with_values(theta.values + np.sqrt(scale) * eps)
    if scale.shape == (d, d):
        return theta.with_values(theta.values + np.linalg.cholesky(scale) @ eps)
    raise ValueError("scale: dimension does not match theta")


# ---------------------------------------------------------------------------
# auxiliary field
# ---------------------------------------------------------------------------


def _clamp_scalar(y: float) -> float:
    return min(max(y, PIT_EPS), 1.0 - PIT_EPS)


def _ancestral_sweep(z: np.ndarray, values: np.ndarray, layout: ThetaLayout, rng, counts) -> None:
    # Directed topology: visiting dates forward and sites in topological order,
    # each own-factor proposal is an exact conditional draw (always accepted).
    T, M = z.shape
    p = layout.p
    alpha = [values[layout.alpha(j)].tolist() for j in range(M)]
    beta = [[(k, float(values[i])) for k, i in layout.beta(j).items()] for j in range(M)]
    gam = [math.exp(values[layout.sigma(j)]) for j in range(M)]
    rows = z.tolist()
    beta_draw = rng.beta
    for t in range(p, T):
        row = rows[t]
        for j in range(M):
            a = alpha[j]
            eta = a[0]
            for k in range(1, p + 1):
                eta += a[k] * rows[t - k][j]
            for k, c in beta[j]:
                eta += c * row[k]
            eta = min(max(eta, -ETA_CLIP), ETA_CLIP)
            mu = min(max(1.0 / (1.0 + math.exp(-eta)), MU_EPS), 1.0 - MU_EPS)
            g = gam[j]
            row[j] = _clamp_scalar(float(beta_draw(mu * g, (1.0 - mu) * g)))
    z[:] = rows
    if counts is not None:
        counts[0] += T - p
        counts[1] += T - p


def _scalar_log_factor_change(y: float, eta0: float, eta1: float, g: float) -> float:
    mu0 = min(max(1.0 / (1.0 + math.exp(-min(max(eta0, -ETA_CLIP), ETA_CLIP))), MU_EPS), 1.0 - MU_EPS)
    mu1 = min(max(1.0 / (1.0 + math.exp(-min(max(eta1, -ETA_CLIP), ETA_CLIP))), MU_EPS), 1.0 - MU_EPS)
    return (
        math.lgamma(mu0 * g) + math.lgamma((1.0 - mu0) * g)
        - math.lgamma(mu1 * g) - math.lgamma((1.0 - mu1) * g)
        + g * (mu1 - mu0) * (math.log(y) - math.log1p(-y))
    )


def _gibbs_sweep_scalar(z: np.ndarray, values: np.ndarray, layout: ThetaLayout, rng, counts) -> None:
    # Site-by-site Metropolis-within-Gibbs in plain Python; cheaper than the
    # vectorised blocks when the panel is only a few rows long.
    T, M = z.shape
    p = layout.p
    nbhd = layout.nbhd
    alpha = [values[layout.alpha(j)].tolist() for j in range(M)]
    beta = [[(k, float(values[i])) for k, i in layout.beta(j).items()] for j in range(M)]
    deps = [[(i, float(values[layout.beta(i)[j]])) for i in nbhd.dependents(j)] for j in range(M)]
    gam = [math.exp(values[layout.sigma(j)]) for j in range(M)]
    rows = z.tolist()

    def eta(t, j):
        a = alpha[j]
        e = a[0]
        for k in range(1, p + 1):
            e += a[k] * rows[t - k][j]
        for k, c in beta[j]:
            e += c * rows[t][k]
        return e

    for t in range(p, T):
        row = rows[t]
        for j in range(M):
            e = min(max(eta(t, j), -ETA_CLIP), ETA_CLIP)
            mu = min(max(1.0 / (1.0 + math.exp(-e)), MU_EPS), 1.0 - MU_EPS)
            g = gam[j]
            ystar = _clamp_scalar(float(rng.beta(mu * g, (1.0 - mu) * g)))
            dy = ystar - row[j]
            log_r = 0.0
            for i, c in deps[j]:
                e_i = eta(t, i)
                log_r += _scalar_log_factor_change(row[i], e_i, e_i + c * dy, gam[i])
            for k in range(1, p + 1):
                if t + k < T:
                    e_k = eta(t + k, j)
                    log_r += _scalar_log_factor_change(rows[t + k][j], e_k, e_k + alpha[j][k] * dy, g)
            accepted = math.log(rng.random()) < log_r
            if accepted:
                row[j] = ystar
            if counts is not None:
                counts[0, j] += 1
                counts[1, j] += accepted
    z[:] = rows


def delta_log_factor(y, eta_old, eta_new, gamma):
    """Change in a local log factor at fixed PIT ``y`` when its predictor moves."""
    mu0 = mean_from_predictor(eta_old)
    mu1 = mean_from_predictor(eta_new)
    return (
        gammaln(mu0 * gamma)
        + gammaln((1.0 - mu0) * gamma)
        - gammaln(mu1 * gamma)
        - gammaln((1.0 - mu1) * gamma)
        + gamma * (mu1 - mu0) * (np.log(y) - np.log1p(-y))
    )


def _gibbs_sweep(z: np.ndarray, values: np.ndarray, layout: ThetaLayout, rng, counts) -> None:
    # Metropolis-within-Gibbs against the full conditional of each site.
    # Dates congruent modulo p+1 share no local factor, so each (site, residue)
    # class is updated as one vectorised block.
    T, M = z.shape
    p = layout.p
    nbhd = layout.nbhd
    gam = np.exp([values[layout.sigma(j)] for j in range(M)])
    for j in range(M):
        deps = [(i, values[layout.beta(i)[j]]) for i in nbhd.dependents(j)]
        alpha = values[layout.alpha(j)]
        g = gam[j]
        for r in range(p + 1):
            ts = np.arange(p + r, T, p + 1)
            if ts.size == 0:
                continue
            mu = mean_from_predictor(linear_predictor(values, layout, z, j, ts))
            ystar = np.clip(rng.beta(mu * g, (1.0 - mu) * g), PIT_EPS, 1.0 - PIT_EPS)
            dy = ystar - z[ts, j]
            log_r = np.zeros(ts.size)
            for i, c in deps:
                eta = linear_predictor(values, layout, z, i, ts)
                log_r += delta_log_factor(z[ts, i], eta, eta + c * dy, gam[i])
            for k in range(1, p + 1):
                ok = ts + k < T
                if not ok.any():
                    continue
                tk = ts[ok] + k
                eta = linear_predictor(values, layout, z, j, tk)
                log_r[ok] += delta_log_factor(z[tk, j], eta, eta + alpha[k] * dy[ok], g)
            accept = np.log(rng.random(ts.size)) < log_r
            z[ts[accept], j] = ystar[accept]
            if counts is not None:
                counts[0, j] += ts.size
                counts[1, j] += int(accept.sum())


def _resolve_scheme(scheme: str, nbhd: NeighborhoodSystem) -> str:
    if scheme == "auto":
        return "ancestral" if nbhd.is_directed else "gibbs"
    if scheme == "ancestral" and not nbhd.is_directed:
        raise ValueError("ancestral sweeps need a directed topology")
    return scheme


def _sweep_inplace(z, values, layout, rng, scheme, counts=None) -> None:
    if scheme == "ancestral":
        if counts is not None:
            site_counts = [0, 0]
            _ancestral_sweep(z, values, layout, rng, site_counts)
            counts[:, :] += np.array(site_counts)[:, None]
        else:
            _ancestral_sweep(z, values, layout, rng, None)
    elif (z.shape[0] - layout.p) < SCALAR_SWEEP_ROWS:
        _gibbs_sweep_scalar(z, values, layout, rng, counts)
    else:
        _gibbs_sweep(z, values, layout, rng, counts)


def gibbs_sweep_auxiliary(
    field: AuxiliaryField,
    theta: ThetaState,
    nbhd: NeighborhoodSystem,
    rnd_curves=None,
    rng: np.random.Generator | None = None,
    scheme: str = "auto",
    counts: np.ndarray | None = None,
) -> AuxiliaryField:
    """One sweep over rows ``p..T-1`` and all sites of the auxiliary field.

    Each site proposes ``y* ~ Be(mu exp(sigma), (1 - mu) exp(sigma))`` from its
    own local factor and accepts with the log ratio of every other factor that
    contains it: the factors of its dependent sites at the same date and its
    own factors at the next ``p`` dates. For directed topologies the default
    ancestral scheme visits sites in topological order and ignores
    downstream factors, which makes the sweep an exact draw from the field.

    The sweep runs in PIT space, where mapping a proposal back to a price
    through ``F^{-1}`` is a pure relabelling; ``rnd_curves`` is accepted for
    that bookkeeping and is not needed for sampling.

    ``counts``, if given, is a ``2 x M`` array accumulating proposals and
    acceptances per site.
    """
    if theta.layout.nbhd != nbhd:
        raise ValueError("theta layout was built for a different neighbourhood system")
    rng = np.random.default_rng() if rng is None else rng
    z = np.array(field.values, dtype=float)
    _sweep_inplace(z, theta.values, theta.layout, rng, _resolve_scheme(scheme, nbhd), counts)
    return AuxiliaryField(z, field.p)


def simulate_field(
    theta: ThetaState,
    T: int,
    rng: np.random.Generator,
    burn: int = 200,
    n_sweeps: int = 500,
) -> PitPanel:
    """Draw a ``T x M`` PIT panel from the field at ``theta``.

    Directed topologies are simulated exactly, date by date after ``burn``
    warm-up rows. The proximity field is approximated by ``n_sweeps`` Gibbs
    sweeps from an iid uniform start.
    """
    layout = theta.layout
    M, p = layout.nbhd.M, layout.p
    z = np.clip(rng.random((T + burn + p, M)), PIT_EPS, 1.0 - PIT_EPS)
    if layout.nbhd.is_directed:
        _ancestral_sweep(z, theta.values, layout, rng, None)
    else:
        for _ in range(int(n_sweeps)):
            _gibbs_sweep(z, theta.values, layout, rng, None)
    return PitPanel(z[-T:])


# ---------------------------------------------------------------------------
# exchange step
# ---------------------------------------------------------------------------


def exchange_accept(
    theta: ThetaState,
    theta_star: ThetaState,
    panel,
    aux_field: AuxiliaryField,
    nbhd: NeighborhoodSystem,
    include_data_terms: bool = True,
) -> float:
    """Log acceptance probability of the exchange move.

    ``min(0, l(z|theta) - l(x|theta) + l(x|theta*) - l(z|theta*))`` with ``l``
    the pseudo-log-likelihood; normalising constants cancel identically.
    With ``include_data_terms=False`` the two data terms are omitted, as
    required when the screening step already targeted ``l(x|.)``.
    """
    z = aux_field.values
    log_r = pseudo_log_likelihood(theta, z, nbhd) - pseudo_log_likelihood(theta_star, z, nbhd)
    if include_data_terms:
        log_r += pseudo_log_likelihood(theta_star, panel, nbhd) - pseudo_log_likelihood(theta, panel, nbhd)
    return min(0.0, log_r)


@dataclass
class StepResult:
    theta: ThetaState
    accepted_outer: bool
    accepted_exchange: bool | None
    log_target: float


def double_mh_step(
    theta: ThetaState,
    panel,
    nbhd: NeighborhoodSystem,
    hyper: HyperParams,
    rnd_curves=None,
    config: SamplerConfig | None = None,
    rng: np.random.Generator | None = None,
    scale=None,
    log_target: float | None = None,
    counts: np.ndarray | None = None,
) -> StepResult:
    """One outer iteration: screen ``theta*``, simulate ``z`` under it, exchange.

    ``log_target`` caches the screening target at ``theta`` (posterior or
    prior per ``config.step1_target``). ``accepted_exchange`` is ``None`` when
    the screening step rejected, in which case ``theta' = theta`` and the
    exchange is trivially accepted.
    """
    config = SamplerConfig() if config is None else config
    rng = np.random.default_rng(config.seed) if rng is None else rng
    scale = initial_scale(theta.layout, hyper) if scale is None else scale
    y = panel.values if isinstance(panel, PitPanel) else np.asarray(panel, dtype=float)
    use_posterior = config.step1_target == "posterior"

    def target(th):
        return unnormalized_log_posterior(th, y, nbhd, hyper) if use_posterior else log_prior(th, hyper)

    if log_target is None:
        log_target = target(theta)
    theta_star = outer_propose(theta, scale, rng)
    star_target = target(theta_star)
    if not math.log(rng.random()) < star_target - log_target:
        return StepResult(theta, False, None, log_target)
    if not config.exchange:
        return StepResult(theta_star, True, None, star_target)

    z = np.array(y, dtype=float)
    scheme = _resolve_scheme(config.gibbs_scheme, nbhd)
    for _ in range(int(config.inner_sweeps)):
        _sweep_inplace(z, theta_star.values, theta_star.layout, rng, scheme, counts)
    log_rho = exchange_accept(theta, theta_star, y, AuxiliaryField(z, theta.p), nbhd, include_data_terms=not use_posterior)
    if math.log(rng.random()) < log_rho:
        return StepResult(theta_star, True, True, star_target)
    return StepResult(theta, True, False, log_target)


# ---------------------------------------------------------------------------
# adaptation
# ---------------------------------------------------------------------------


def adapt_scale(accepted, scale, window_index: int = 1, target: float = ADAPT_TARGET) -> np.ndarray:
    """Robbins-Monro update of the proposal diagonal from one window of accept flags.

    ``scale * exp(c (rate - target))`` with ``c = 0.5 / sqrt(window_index)``.
    """
    flags = np.asarray(accepted, dtype=float)
    if flags.size == 0:
        return np.asarray(scale, dtype=float)
    c = 0.5 / math.sqrt(max(int(window_index), 1))
    return np.asarray(scale, dtype=float) * math.exp(c * (flags.mean() - target))


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def spectral_density_zero(x, window_frac: float = 0.04) -> float:
    """Bartlett lag-window estimate of the spectral density at frequency zero.

    Returned on the scale of the long-run variance, so ``S / n`` is the
    variance of the sample mean.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    xc = x - x.mean()
    lags = max(1, int(window_frac * n))
    s = float(xc @ xc) / n
    for k in range(1, min(lags, n - 1) + 1):
        s += 2.0 * (1.0 - k / (lags + 1.0)) * float(xc[:-k] @ xc[k:]) / n
    return s


def geweke_z(column, first: float = 0.1, last: float = 0.5) -> float:
    """Geweke z-score comparing the mean of the first and last chain segments.

    Raises:
        ValueError: for columns shorter than 100 draws or overlapping segments.
        DegenerateChainError: if a segment has zero spectral variance.
    """
    x = np.asarray(column, dtype=float)
    n = x.size
    if n < 100:
        raise ValueError("geweke_z: need at least 100 draws")
    if first + last > 1:
        raise ValueError("geweke_z: segments overlap")
    a = x[: int(first * n)]
    b = x[n - int(last * n):]
    sa, sb = spectral_density_zero(a), spectral_density_zero(b)
    if not (sa > 0 and sb > 0):
        raise DegenerateChainError("geweke_z: zero-variance segment (degenerate chain)")
    return float((a.mean() - b.mean()) / math.sqrt(sa / a.size + sb / b.size))


def monte_carlo_se(x, n_batches: int = 20) -> float:
    """Batch-means standard error of a chain mean.

    A small, fixed number of long batches keeps the estimate honest for
    slowly mixing chains, where ``sqrt(n)`` short batches understate it.
    """
    x = np.asarray(x, dtype=float)
    n_batches = max(2, min(int(n_batches), x.size // 2))
    size = x.size // n_batches
    means = x[: n_batches * size].reshape(n_batches, size).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(n_batches))


def summarize(chain: ChainOutput, prob: float = 0.95) -> dict[str, tuple[float, float, float]]:
    """Posterior mean and equal-tailed interval per parameter.

    Log-precision columns ``sigma*`` are reported as ``gamma*`` on the
    original scale.
    """
    if chain.n_iter == 0:
        raise ValueError("summarize: chain has no draws")
    tail = (1.0 - prob) / 2.0
    out = {}
    for name, col in zip(chain.names, chain.draws.T):
        if name.startswith("sigma"):
            name, col = "gamma" + name[len("sigma"):], np.exp(col)
        lo, hi = np.quantile(col, [tail, 1.0 - tail])
        out[name] = (float(col.mean()), float(lo), float(hi))
    return out


# ---------------------------------------------------------------------------
# chain driver
# ---------------------------------------------------------------------------


def run_chain(
    panel,
    layout: ThetaLayout,
    hyper: HyperParams,
    config: SamplerConfig,
    init: ThetaState | None = None,
    rnd_curves=None,
) -> ChainOutput:
    """Burn-in with adaptation, then ``n_iter`` stored iterations at a frozen scale.

    During burn-in the proposal diagonal is rescaled after every window of
    ``adapt_window`` iterations. With ``adapt_shape`` its shape is reset to the
    empirical variance of the recent burn-in draws after windows 4, 8, 16, ...
    (up to half the burn-in); the Robbins-Monro gain restarts at each reset.

    With ``adapt_on="both"`` each window is scored by the pooled rate of
    its outer and exchange decisions, so the two rates straddle the target. ``exchange=False`` runs plain random-walk MH on the
    pseudo-posterior, which is exact only when every ``Z_t`` is constant.

    With ``config.init == "mode"`` the chain starts at :func:`posterior_mode`
    and the initial proposal is the dense :func:`laplace_covariance`
    (``proposal="laplace"``) or the diagonal :func:`curvature_scale`;
    ``"moments"`` starts at :func:`moment_start` with :func:`initial_scale`.
    A dense proposal is adapted by a single Robbins-Monro multiplier and
    skips the shape resets.
    """
    started = time.perf_counter()
    y = panel.values if isinstance(panel, PitPanel) else np.asarray(panel, dtype=float)
    nbhd = layout.nbhd
    rng = np.random.default_rng(config.seed)
    if init is not None:
        theta = init
    elif config.init == "mode":
        theta = posterior_mode(layout, y, hyper)
    else:
        theta = moment_start(layout, y)
    if config.proposal_scale is not None:
        scale = np.array(config.proposal_scale, dtype=float)
    elif config.init != "mode":
        scale = initial_scale(layout, hyper)
    elif config.proposal == "laplace":
        scale = laplace_covariance(theta, y, hyper)
    else:
        scale = curvature_scale(theta, y, hyper)
    if scale.shape not in ((layout.dim,), (layout.dim, layout.dim)):
        raise ValueError(f"proposal_scale: expected {layout.dim} entries or a square matrix")
    dense = scale.ndim == 2
    shape = scale.copy()
    d = layout.dim
    total_windows = config.n_burnin // config.adapt_window
    reshape_at = {w for w in (4, 8, 16, 32, 64) if w <= total_windows // 2}

    log_target = None
    window, window_exchange, n_windows, gain_count = [], [], 0, 0
    burn = np.empty((config.n_burnin, d))
    for it in range(config.n_burnin):
        res = double_mh_step(theta, y, nbhd, hyper, rnd_curves, config, rng, scale, log_target)
        theta, log_target = res.theta, res.log_target
        burn[it] = theta.values
        window.append(res.accepted_outer)
        if res.accepted_exchange is not None:
            window_exchange.append(res.accepted_exchange)
        if config.adapt and len(window) == config.adapt_window:
            n_windows += 1
            gain_count += 1
            flags = window + window_exchange if config.adapt_on == "both" else window
            scale = adapt_scale(flags, scale, gain_count)
            log.debug(
                "window %d: outer %.3f exchange %.3f",
                n_windows, np.mean(window), np.mean(window_exchange) if window_exchange else float("nan"),
            )
            window, window_exchange = [], []
            if config.adapt_shape and not dense and n_windows in reshape_at:
                emp = burn[(it + 1) // 2: it + 1].var(axis=0) * (2.38**2 / d)
                new_shape = np.maximum(emp, 1e-8)
                scale = scale / shape * new_shape
                shape = new_shape
                gain_count = 0

    draws = np.empty((config.n_iter, d))
    counts = np.zeros((2, nbhd.M))
    n_outer = n_exchange_tried = n_exchange = 0
    for it in range(config.n_iter):
        res = double_mh_step(theta, y, nbhd, hyper, rnd_curves, config, rng, scale, log_target, counts)
        theta, log_target = res.theta, res.log_target
        draws[it] = theta.values
        n_outer += res.accepted_outer
        if res.accepted_exchange is not None:
            n_exchange_tried += 1
            n_exchange += res.accepted_exchange

    z = np.full(d, np.nan)
    if config.n_iter >= 100:
        for i in range(d):
            try:
                z[i] = geweke_z(draws[:, i])
            except DegenerateChainError:
                pass
    with np.errstate(invalid="ignore", divide="ignore"):
        inner = np.where(counts[0] > 0, counts[1] / np.maximum(counts[0], 1), np.nan)
    n = max(config.n_iter, 1)
    return ChainOutput(
        names=layout.names,
        draws=draws,
        accept_rate_outer=n_outer / n,
        accept_rate_exchange=n_exchange / n_exchange_tried if n_exchange_tried else float("nan"),
        accept_rate_inner=inner,
        geweke_z=z,
        runtime=time.perf_counter() - started,
        proposal_scale=scale,
        meta={
            "p": layout.p,
            "topology": nbhd.kind.value,
            "M": nbhd.M,
            "pooled": layout.pooled,
            "step1_target": config.step1_target,
            "inner_sweeps": int(config.inner_sweeps),
            "n_burnin": int(config.n_burnin),
            "seed": int(config.seed),
        },
    )
