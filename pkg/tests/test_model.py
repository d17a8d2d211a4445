import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats
from scipy.special import expit

from betamrf.model import (
    BetaLocalParams,
    HyperParams,
    MaturityGrid,
    NeighborhoodSystem,
    PitPanel,
    ThetaLayout,
    ThetaState,
    Topology,
    compute_mu,
    log_beta_local,
    log_prior,
    logistic_link,
    moment_start,
    posterior_mode,
    pseudo_log_likelihood,
    unnormalized_log_posterior,
)


def random_theta(layout, rng, scale=0.5):
    v = rng.normal(0, scale, layout.dim)
    return ThetaState(layout, v)


def random_panel(T, M, rng):
    return PitPanel(rng.uniform(0.02, 0.98, (T, M)))


# -- types -----------------------------------------------------------------


def test_maturity_grid_validation():
    g = MaturityGrid((0.25, 0.5, 1.0))
    assert g.M == 3
    assert g.lookahead_days == (63, 126, 252)
    with pytest.raises(ValueError):
        MaturityGrid((0.5, 0.25))
    with pytest.raises(ValueError):
        MaturityGrid((0.0, 1.0))
    with pytest.raises(ValueError):
        MaturityGrid(())


def test_pit_panel_clamps_and_is_read_only():
    p = PitPanel(np.array([[0.0, 1.0], [0.3, 0.7]]))
    assert p.values.min() == pytest.approx(1e-9)
    assert p.values.max() == pytest.approx(1 - 1e-9)
    assert (p.T, p.M) == (2, 2)
    with pytest.raises(ValueError):
        p.values[0, 0] = 0.5


@pytest.mark.parametrize("kind", list(Topology))
def test_neighborhoods_exclude_self_and_proximity_is_symmetric(kind):
    nb = NeighborhoodSystem(kind, 4)
    for j in range(4):
        assert j not in nb.neighbors(j)
        assert set(nb.neighbors(j)) <= set(range(4))
    if kind is Topology.PROXIMITY:
        for i in range(4):
            for j in range(4):
                assert (i in nb.neighbors(j)) == (j in nb.neighbors(i))


def test_markov_closure_is_moral_neighbourhood():
    nb = NeighborhoodSystem("markov", 3)
    assert nb.neighbors(1) == (0,)
    assert nb.dependents(1) == (2,)
    assert nb.closure(1) == (0, 2)
    assert nb.is_directed
    assert not NeighborhoodSystem("proximity", 3).is_directed


@pytest.mark.parametrize("kind,m", [("independent", 0), ("markov", 2), ("proximity", 4)])
@pytest.mark.parametrize("p", [0, 1, 3])
def test_hierarchical_dimension(kind, m, p):
    M = 3
    layout = ThetaLayout(p, NeighborhoodSystem(kind, M))
    assert layout.dim == (p + 4) * M + m + 2


def test_layout_names_are_one_based():
    layout = ThetaLayout(1, NeighborhoodSystem("markov", 3))
    assert "alpha_1_2" in layout.names
    assert "beta_1_2" in layout.names  # site 1 in the mean of site 2
    assert "beta_2_3" in layout.names
    assert "sigma_3" in layout.names
    assert len(set(layout.names)) == layout.dim


def test_pooled_layout_shares_blocks():
    layout = ThetaLayout(2, NeighborhoodSystem("proximity", 3), pooled=True)
    assert layout.names == (
        "alpha_0", "alpha_1", "alpha_2", "beta_prev", "beta_next", "sigma",
        "alpha_mean", "beta_mean", "alpha_bar", "beta_bar",
    )
    assert np.array_equal(layout.alpha(0), layout.alpha(2))
    assert layout.beta(1) == {0: layout.index("beta_prev"), 2: layout.index("beta_next")}


def test_hyperparams_and_local_params_validate():
    with pytest.raises(ValueError, match="g_sq"):
        HyperParams(g_sq=0.0)
    with pytest.raises(ValueError):
        BetaLocalParams(1.0, 2.0)
    with pytest.raises(ValueError):
        BetaLocalParams(0.5, -1.0)
    b = BetaLocalParams(0.25, 4.0)
    assert (b.shape1, b.shape2) == (1.0, 3.0)


# -- link and mean -----------------------------------------------------------


@pytest.mark.parametrize("x,expected", [(0.0, 0.5), (math.log(3), 0.75), (-math.log(3), 0.25)])
def test_logistic_closed_forms(x, expected):
    assert logistic_link(x) == pytest.approx(expected, abs=1e-15)


def test_logistic_saturates_without_overflow():
    assert 0 < logistic_link(-1e6) < 1e-15
    assert logistic_link(1e6) == pytest.approx(1.0)


def _layout1(p=1, kind="independent", M=1):
    return ThetaLayout(p, NeighborhoodSystem(kind, M))


def test_compute_mu_examples():
    layout = _layout1()
    nb = layout.nbhd
    panel = PitPanel(np.array([[0.3], [0.9], [0.4]]))
    assert compute_mu(ThetaState.zeros(layout), panel, nb, 0, 1) == 0.5
    th = ThetaState.from_sites(layout, alpha=[[math.log(3), 0.0]], gamma=[2.0])
    assert compute_mu(th, panel, nb, 0, 2) == pytest.approx(0.75, abs=1e-15)
    th = ThetaState.from_sites(layout, alpha=[[0.0, 1.0]], gamma=[2.0])
    # frozen: 1 / (1 + exp(-0.3)) to 15 digits
    assert compute_mu(th, panel, nb, 0, 1) == pytest.approx(0.574442516811659, abs=1e-14)
    with pytest.raises(IndexError):
        compute_mu(th, panel, nb, 0, 0)


def test_compute_mu_uses_contemporaneous_neighbours():
    layout = ThetaLayout(1, NeighborhoodSystem("proximity", 3))
    rng = np.random.default_rng(0)
    th = random_theta(layout, rng)
    panel = random_panel(5, 3, rng)
    y = panel.values
    a = th.alpha_coeffs(1)
    b = th.beta_coeffs(1)
    eta = a[0] + a[1] * y[2, 1] + b[0] * y[3, 0] + b[2] * y[3, 2]
    assert compute_mu(th, panel, layout.nbhd, 1, 3) == pytest.approx(expit(eta), rel=1e-13)


def test_compute_mu_pooling_is_a_no_op_with_one_site():
    rng = np.random.default_rng(1)
    panel = random_panel(6, 1, rng)
    h = _layout1(p=2)
    pooled = ThetaLayout(2, h.nbhd, pooled=True)
    coeffs = [0.2, -0.7, 1.3]
    th_h = ThetaState.from_sites(h, alpha=[coeffs], gamma=[3.0])
    th_p = ThetaState.from_sites(pooled, alpha=[coeffs], gamma=[3.0])
    for t in range(2, 6):
        assert compute_mu(th_h, panel, h.nbhd, 0, t) == compute_mu(th_p, panel, pooled.nbhd, 0, t)


# -- beta local ----------------------------------------------------------------


def test_log_beta_local_examples():
    assert log_beta_local(0.7, BetaLocalParams(0.5, 2.0)) == pytest.approx(0.0, abs=1e-14)
    assert log_beta_local(0.5, BetaLocalParams(0.5, 4.0)) == pytest.approx(math.log(1.5), abs=1e-14)
    val, _ = integrate.quad(lambda y: math.exp(log_beta_local(y, BetaLocalParams(0.5, 2.0))), 0, 1)
    assert val == pytest.approx(1.0, abs=1e-8)
    val, _ = integrate.quad(lambda y: math.exp(log_beta_local(y, BetaLocalParams(0.5, 4.0))), 0, 1)
    assert val == pytest.approx(1.0, abs=1e-8)


@pytest.mark.parametrize("y", [0.0, 1.0, -0.1, 1.5])
def test_log_beta_local_domain(y):
    with pytest.raises(ValueError):
        log_beta_local(y, BetaLocalParams(0.5, 2.0))


@settings(max_examples=60, deadline=None)
@given(
    mu=st.floats(0.01, 0.99),
    gamma=st.floats(0.5, 150.0),
    y=st.floats(1e-6, 1 - 1e-6),
)
def test_log_beta_local_matches_scipy(mu, gamma, y):
    expected = stats.beta.logpdf(y, mu * gamma, (1 - mu) * gamma)
    assert log_beta_local(y, BetaLocalParams(mu, gamma)) == pytest.approx(expected, rel=1e-9, abs=1e-9)


# quad may flag roundoff near endpoint spikes; the assertion checks the value itself
@pytest.mark.filterwarnings("ignore::scipy.integrate.IntegrationWarning")
@settings(max_examples=40, deadline=None)
@given(a=st.floats(0.05, 200.0), b=st.floats(0.05, 200.0))
def test_beta_local_integrates_to_one(a, b):
    gamma = a + b
    if gamma > 200.0:
        return
    params = BetaLocalParams(a / gamma, gamma)
    f = lambda y: math.exp(log_beta_local(y, params))  # noqa: E731
    # split at the mode so quad resolves sharp peaks and endpoint spikes
    mode = min(max((a - 1) / (gamma - 2), 1e-3), 1 - 1e-3) if gamma > 2 else 0.5
    total = sum(integrate.quad(f, lo, hi, limit=200, epsabs=1e-10, epsrel=1e-10)[0]
                for lo, hi in ((0, mode), (mode, 1)))
    assert total == pytest.approx(1.0, abs=1e-6)


# -- likelihood ----------------------------------------------------------------


def test_pseudo_likelihood_uniform_locals_is_zero():
    layout = ThetaLayout(2, NeighborhoodSystem("proximity", 3))
    th = ThetaState.from_sites(layout, alpha=[[0, 0, 0]] * 3, gamma=[2.0] * 3)
    panel = random_panel(10, 3, np.random.default_rng(2))
    assert pseudo_log_likelihood(th, panel, layout.nbhd) == pytest.approx(0.0, abs=1e-12)


def test_pseudo_likelihood_three_halves():
    layout = _layout1(p=0)
    th = ThetaState.from_sites(layout, alpha=[[0.0]], gamma=[4.0])
    panel = PitPanel(np.full((3, 1), 0.5))
    assert pseudo_log_likelihood(th, panel, layout.nbhd) == pytest.approx(1.216395324324493, abs=1e-12)


@pytest.mark.parametrize("kind", ["independent", "markov", "proximity"])
@pytest.mark.parametrize("pooled", [False, True])
def test_pseudo_likelihood_matches_brute_force_sum(kind, pooled):
    rng = np.random.default_rng(3)
    layout = ThetaLayout(2, NeighborhoodSystem(kind, 3), pooled)
    th = random_theta(layout, rng)
    panel = random_panel(7, 3, rng)
    total = 0.0
    for t in range(2, 7):
        for j in range(3):
            mu = compute_mu(th, panel, layout.nbhd, j, t)
            total += stats.beta.logpdf(panel.values[t, j], mu * th.gamma(j), (1 - mu) * th.gamma(j))
    assert pseudo_log_likelihood(th, panel, layout.nbhd) == pytest.approx(total, rel=1e-10)


def test_pseudo_likelihood_dimension_mismatch():
    layout = ThetaLayout(1, NeighborhoodSystem("markov", 3))
    th = ThetaState.zeros(layout)
    with pytest.raises(ValueError):
        pseudo_log_likelihood(th, random_panel(5, 2, np.random.default_rng(0)), NeighborhoodSystem("markov", 2))
    with pytest.raises(ValueError):
        pseudo_log_likelihood(th, random_panel(5, 3, np.random.default_rng(0)), NeighborhoodSystem("proximity", 3))
    with pytest.raises(ValueError):
        ThetaState(layout, np.zeros(layout.dim + 1))


def test_markov_likelihood_is_a_normalised_joint_density():
    # T=2, M=2, p=1: integrate the product of conditionals over the free row
    layout = ThetaLayout(1, NeighborhoodSystem("markov", 2))
    th = ThetaState.from_sites(layout, alpha=[[0.3, -0.8], [-0.2, 0.5]], gamma=[3.0, 4.0], beta=[{}, {0: 1.1}])
    y0 = np.array([0.4, 0.6])

    def dens(b, a):
        panel = np.array([y0, [a, b]])
        return math.exp(pseudo_log_likelihood(th, panel, layout.nbhd))

    total, _ = integrate.dblquad(dens, 0, 1, 0, 1, epsabs=1e-9)
    assert total == pytest.approx(1.0, abs=1e-6)


def test_markov_likelihood_equals_sequential_factorisation():
    rng = np.random.default_rng(4)
    layout = ThetaLayout(1, NeighborhoodSystem("markov", 3))
    th = random_theta(layout, rng)
    panel = random_panel(5, 3, rng)
    y = panel.values
    logp = 0.0
    for t in range(1, 5):
        for j in range(3):
            a = th.alpha_coeffs(j)
            eta = a[0] + a[1] * y[t - 1, j] + (th.beta_coeffs(j).get(j - 1, 0.0) * y[t, j - 1] if j else 0.0)
            mu = expit(eta)
            logp += stats.beta.logpdf(y[t, j], mu * th.gamma(j), (1 - mu) * th.gamma(j))
    assert pseudo_log_likelihood(th, panel, layout.nbhd) == pytest.approx(logp, rel=1e-11)


def test_proximity_two_site_relabelling_symmetry():
    rng = np.random.default_rng(5)
    layout = ThetaLayout(1, NeighborhoodSystem("proximity", 2))
    th = random_theta(layout, rng)
    panel = random_panel(8, 2, rng)
    swapped = ThetaState.from_sites(
        layout,
        alpha=[th.alpha_coeffs(1), th.alpha_coeffs(0)],
        gamma=[th.gamma(1), th.gamma(0)],
        beta=[{1: th.beta_coeffs(1)[0]}, {0: th.beta_coeffs(0)[1]}],
    )
    a = pseudo_log_likelihood(th, panel, layout.nbhd)
    b = pseudo_log_likelihood(swapped, panel.values[:, ::-1], layout.nbhd)
    assert a == pytest.approx(b, rel=1e-12)


# -- prior ----------------------------------------------------------------------


def _prior_by_terms(th, h):
    d = th.as_dict()
    lay = th.layout

    def kern(x, m, v):
        return -0.5 * (x - m) ** 2 / v

    total = kern(d["alpha_bar"], h.a, h.s0_sq) + kern(d["beta_bar"], h.b, h.g0_sq)
    M = lay.nbhd.M
    for j in range(1, M + 1):
        am, bm = d[f"alpha_mean_{j}"], d[f"beta_mean_{j}"]
        total += kern(am, d["alpha_bar"], h.s_sq) + kern(bm, d["beta_bar"], h.g_sq)
        total += sum(kern(d[f"alpha_{k}_{j}"], am, h.s_j_sq) for k in range(lay.p + 1))
        total += sum(kern(v, bm, h.g_j_sq) for n, v in d.items() if n.startswith("beta_") and n.endswith(f"_{j}")
                     and not n.startswith(("beta_mean", "beta_bar")))
        s = d[f"sigma_{j}"]
        total += h.xi1 * s - h.xi2 * math.exp(s)
    return total


def test_log_prior_term_by_term():
    rng = np.random.default_rng(6)
    h = HyperParams(a=0.3, b=-0.2, s0_sq=4.0, g0_sq=9.0, s_sq=2.0, g_sq=5.0, s_j_sq=3.0, g_j_sq=7.0, xi1=1.5, xi2=0.3)
    layout = ThetaLayout(2, NeighborhoodSystem("proximity", 3))
    th = random_theta(layout, rng, 1.0)
    assert log_prior(th, h) == pytest.approx(_prior_by_terms(th, h), rel=1e-12)


def test_log_prior_gamma_term_is_gamma_density_in_log_scale():
    # with the Gaussian blocks at their means, the remaining sigma term equals
    # log Ga(exp(s); xi1, xi2) + s up to a constant
    h = HyperParams()
    layout = _layout1(p=0)
    vals = []
    for s in (0.1, 1.0, 2.5):
        th = ThetaState.from_sites(layout, alpha=[[0.0]], gamma=[math.exp(s)])
        vals.append(log_prior(th, h) - (stats.gamma.logpdf(math.exp(s), h.xi1, scale=1 / h.xi2) + s))
    assert np.ptp(vals) < 1e-12


def test_log_prior_maximised_at_prior_means():
    h = HyperParams()
    layout = ThetaLayout(1, NeighborhoodSystem("markov", 3))
    best = ThetaState.from_sites(layout, alpha=[[0, 0]] * 3, gamma=[h.xi1 / h.xi2] * 3)
    lp = log_prior(best, h)
    rng = np.random.default_rng(7)
    for _ in range(20):
        assert log_prior(best.with_values(best.values + rng.normal(0, 0.1, layout.dim)), h) < lp


def test_log_prior_global_mean_perturbation():
    h = HyperParams()
    layout = _layout1()
    th = ThetaState.zeros(layout)
    v = th.values.copy()
    v[layout.alpha_bar] += 0.7
    # the shift enters the hyperprior and the site-mean prior centred on it
    expected = -0.7**2 / (2 * h.s0_sq) - 0.7**2 / (2 * h.s_sq)
    assert log_prior(th.with_values(v), h) - log_prior(th, h) == pytest.approx(expected, rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 18))
def test_log_prior_concave_in_gaussian_coordinates(seed, i):
    layout = ThetaLayout(1, NeighborhoodSystem("markov", 3))
    if layout.names[i].startswith("sigma"):
        return
    th = random_theta(layout, np.random.default_rng(seed), 2.0)
    h = HyperParams()
    e = np.zeros(layout.dim)
    e[i] = 1e-3
    second = log_prior(th.with_values(th.values + e), h) - 2 * log_prior(th, h) + log_prior(th.with_values(th.values - e), h)
    assert second <= 1e-12


# -- posterior -------------------------------------------------------------------


def test_unnormalized_posterior_is_sum():
    rng = np.random.default_rng(8)
    layout = ThetaLayout(1, NeighborhoodSystem("proximity", 2))
    th = random_theta(layout, rng)
    panel = random_panel(9, 2, rng)
    h = HyperParams()
    lp = unnormalized_log_posterior(th, panel, layout.nbhd, h)
    assert lp == pseudo_log_likelihood(th, panel, layout.nbhd) + log_prior(th, h)


def test_flat_prior_limit_reduces_to_likelihood():
    rng = np.random.default_rng(9)
    layout = ThetaLayout(1, NeighborhoodSystem("markov", 2))
    panel = random_panel(9, 2, rng)
    h = HyperParams(s0_sq=1e12, g0_sq=1e12, s_sq=1e12, g_sq=1e12, s_j_sq=1e12, g_j_sq=1e12, xi1=1e-12, xi2=1e-12)
    diffs = []
    for _ in range(5):
        th = random_theta(layout, rng)
        diffs.append(unnormalized_log_posterior(th, panel, layout.nbhd, h) - pseudo_log_likelihood(th, panel, layout.nbhd))
    assert np.ptp(diffs) < 1e-8


def test_single_site_posterior_against_standalone_beta_autoregression():
    # separate implementation written directly from the density formulas
    rng = np.random.default_rng(10)
    y = rng.uniform(0.05, 0.95, 30)
    a0, a1, s, am, bm, ab, bb = 0.2, -0.4, 1.1, 0.05, -0.3, 0.4, 0.1
    h = HyperParams()

    def standalone():
        mu = 1 / (1 + np.exp(-(a0 + a1 * y[:-1])))
        g = math.exp(s)
        ll = np.sum(stats.beta.logpdf(y[1:], mu * g, (1 - mu) * g))
        lp = stats.norm.logpdf(ab, h.a, math.sqrt(h.s0_sq)) + stats.norm.logpdf(bb, h.b, math.sqrt(h.g0_sq))
        lp += stats.norm.logpdf(am, ab, math.sqrt(h.s_sq)) + stats.norm.logpdf(bm, bb, math.sqrt(h.g_sq))
        lp += stats.norm.logpdf([a0, a1], am, math.sqrt(h.s_j_sq)).sum()
        lp += stats.gamma.logpdf(g, h.xi1, scale=1 / h.xi2) + s
        return ll + lp

    layout = _layout1()
    th = ThetaState.from_sites(layout, alpha=[[a0, a1]], gamma=[math.exp(s)], alpha_mean=[am], beta_mean=[bm],
                               alpha_bar=ab, beta_bar=bb)
    got = unnormalized_log_posterior(th, y[:, None], layout.nbhd, h)
    # the two differ by the dropped normalising constants only
    th2 = th.with_values(th.values + 0.3)
    a0, a1, s, am, bm, ab, bb = th2.values[[0, 1, 2, 3, 4, 5, 6]]
    got2 = unnormalized_log_posterior(th2, y[:, None], layout.nbhd, h)
    ref2 = standalone()
    a0, a1, s, am, bm, ab, bb = th.values[[0, 1, 2, 3, 4, 5, 6]]
    ref = standalone()
    assert got2 - got == pytest.approx(ref2 - ref, rel=1e-10)


def test_moment_start_and_mode():
    rng = np.random.default_rng(11)
    y = rng.beta(2.0, 6.0, (400, 1))
    layout = _layout1(p=0)
    start = moment_start(layout, y)
    assert expit(start.alpha_coeffs(0)[0]) == pytest.approx(y.mean(), rel=1e-6)
    assert start.gamma(0) == pytest.approx(8.0, rel=0.25)
    mode = posterior_mode(layout, y, HyperParams())
    h = HyperParams()
    assert unnormalized_log_posterior(mode, y, layout.nbhd, h) >= unnormalized_log_posterior(start, y, layout.nbhd, h)
    assert expit(mode.alpha_coeffs(0)[0]) == pytest.approx(0.25, abs=0.02)
