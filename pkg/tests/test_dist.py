import itertools
import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from partval import dist
from partval.dist import LinkFamily

FAMILIES = (LinkFamily.NORMAL, LinkFamily.AMH)
GRID = (-4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0)
RHOS = (-0.95, -0.8, -0.5, 0.0, 0.5, 0.8, 0.95)
ORACLE = Path(__file__).parent / "data" / "bvn_oracle.json"

coord = st.floats(-8.0, 8.0, allow_nan=False)
rho_st = st.floats(-0.99, 0.99, allow_nan=False)
family_st = st.sampled_from(FAMILIES)


def _bvn_dblquad(a, b, rho):
    s2 = 1.0 - rho * rho
    c = 1.0 / (2.0 * np.pi * np.sqrt(s2))
    val, _ = integrate.dblquad(
        lambda y, x: c * np.exp(-(x * x - 2.0 * rho * x * y + y * y) / (2.0 * s2)),
        -12.0, a, -12.0, b, epsabs=1e-14, epsrel=1e-13)
    return val


# ---------------------------------------------------------------------------
# marginals


def test_marginal_cdf_examples():
    assert dist.marginal_cdf("normal", 0.0) == 0.5
    assert abs(dist.marginal_cdf("normal", 1.959963985) - 0.975) < 1e-9
    assert dist.marginal_cdf("amh", 0.0) == 0.5


def test_marginal_cdf_infinities():
    for fam in FAMILIES:
        assert dist.marginal_cdf(fam, -np.inf) == 0.0
        assert dist.marginal_cdf(fam, np.inf) == 1.0


def test_marginal_cdf_rejects_nan():
    with pytest.raises(ValueError):
        dist.marginal_cdf("normal", np.nan)


@given(family_st, coord, coord)
def test_marginal_cdf_monotone(fam, s, t):
    lo, hi = min(s, t), max(s, t)
    assert dist.marginal_cdf(fam, lo) <= dist.marginal_cdf(fam, hi)


@given(family_st, coord)
def test_marginal_sf_complements_cdf(fam, t):
    assert abs(dist.marginal_cdf(fam, t) + dist.marginal_sf(fam, t) - 1.0) < 1e-15


def test_marginal_pdf_deriv_matches_fd():
    t = np.linspace(-5, 5, 41)
    for fam in FAMILIES:
        fd = (dist.marginal_pdf(fam, t + 1e-6) - dist.marginal_pdf(fam, t - 1e-6)) / 2e-6
        np.testing.assert_allclose(dist.marginal_pdf_deriv(fam, t), fd, atol=1e-9)


# ---------------------------------------------------------------------------
# joint CDF examples


def test_joint_cdf_examples():
    assert abs(dist.joint_cdf("normal", 0.0, 0.0, 0.0) - 0.25) < 1e-15
    expect = 0.25 + math.asin(-0.8) / (2.0 * math.pi)
    assert abs(dist.joint_cdf("normal", 0.0, 0.0, -0.8) - expect) < 1e-14
    assert abs(expect - 0.10241) < 1e-5
    assert abs(dist.joint_cdf("normal", 0.0, 0.0, -0.8) - _bvn_dblquad(0.0, 0.0, -0.8)) < 1e-12
    assert abs(dist.joint_cdf("amh", 0.0, 0.0, 0.5) - 1.0 / 3.5) < 1e-15


def test_upper_tail_examples():
    assert dist.upper_tail("normal", np.inf, 0.0, 0.3) == 0.0
    assert abs(dist.upper_tail("normal", 0.0, 0.0, 0.0) - 0.25) < 1e-15
    assert abs(dist.upper_tail("amh", 0.0, 0.0, 0.0) - 0.25) < 1e-15


def test_joint_cdf_grad_examples():
    ga, gb, gr = dist.joint_cdf_grad("normal", 0.0, 0.0, 0.0)
    assert abs(ga - stats.norm.pdf(0) * 0.5) < 1e-15
    assert abs(ga - 0.19947) < 1e-5
    assert abs(gr - 1.0 / (2.0 * math.pi)) < 1e-15
    _, _, gr_amh = dist.joint_cdf_grad("amh", 0.0, 0.0, 0.0)
    assert abs(gr_amh - 1.0 / 16.0) < 1e-15


def test_rho_domain_rejected():
    for fam in FAMILIES:
        for bad in (1.0, -1.0, 1.5, np.nan):
            with pytest.raises(ValueError):
                dist.joint_cdf(fam, 0.0, 0.0, bad)
            with pytest.raises(ValueError):
                dist.upper_tail(fam, 0.0, 0.0, bad)
            with pytest.raises(ValueError):
                dist.joint_cdf_grad(fam, 0.0, 0.0, bad)


def test_joint_cdf_infinite_sentinels():
    for fam in FAMILIES:
        assert dist.joint_cdf(fam, np.inf, np.inf, 0.3) == 1.0
        assert dist.joint_cdf(fam, -np.inf, 1.0, 0.3) == 0.0
        assert abs(dist.joint_cdf(fam, np.inf, 0.7, 0.3) - dist.marginal_cdf(fam, 0.7)) < 1e-15
        assert abs(dist.joint_cdf(fam, 0.7, np.inf, 0.3) - dist.marginal_cdf(fam, 0.7)) < 1e-15


# ---------------------------------------------------------------------------
# quadrature oracle


def test_bvn_matches_frozen_quadrature_grid():
    rows = json.loads(ORACLE.read_text())["rows"]
    assert len(rows) == 343
    arr = np.asarray(rows)
    got = dist.joint_cdf("normal", arr[:, 0], arr[:, 1], arr[:, 2])
    assert np.max(np.abs(got - arr[:, 3])) <= 1e-10


@pytest.mark.parametrize("a,b,rho", [(-1.0, 2.0, 0.95), (0.0, -2.0, -0.95), (1.0, 1.0, 0.8),
                                     (4.0, -1.0, -0.5), (2.0, 2.0, -0.8)])
def test_bvn_matches_live_quadrature(a, b, rho):
    assert abs(dist.joint_cdf("normal", a, b, rho) - _bvn_dblquad(a, b, rho)) <= 1e-10


def test_bvn_all_regimes_against_scipy():
    rng = np.random.default_rng(11)
    a = rng.uniform(-3, 3, 300)
    b = rng.uniform(-3, 3, 300)
    for rho in (0.1, -0.2, 0.5, -0.7, 0.9, -0.93, 0.99, -0.999):
        ref = np.array([stats.multivariate_normal(cov=[[1, rho], [rho, 1]]).cdf([x, y])
                        for x, y in zip(a[:20], b[:20])])
        got = dist.joint_cdf("normal", a[:20], b[:20], rho)
        np.testing.assert_allclose(got, ref, atol=1e-7)


# ---------------------------------------------------------------------------
# properties


@given(family_st, coord, coord)
def test_factorization_at_zero_rho(fam, a, b):
    g = dist.joint_cdf(fam, a, b, 0.0)
    assert abs(g - dist.marginal_cdf(fam, a) * dist.marginal_cdf(fam, b)) <= 1e-12


def test_factorization_grid_both_families():
    a, b = np.meshgrid(np.linspace(-6, 6, 61), np.linspace(-6, 6, 61))
    for fam in FAMILIES:
        g = dist.joint_cdf(fam, a, b, 0.0)
        assert np.max(np.abs(g - dist.marginal_cdf(fam, a) * dist.marginal_cdf(fam, b))) <= 1e-12


@given(family_st, coord, coord, rho_st)
def test_frechet_bounds(fam, a, b, rho):
    g = dist.joint_cdf(fam, a, b, rho)
    fa, fb = dist.marginal_cdf(fam, a), dist.marginal_cdf(fam, b)
    assert max(0.0, fa + fb - 1.0) - 1e-15 <= g <= min(fa, fb) + 1e-15


@given(family_st, coord, coord, coord, rho_st)
def test_joint_cdf_monotone(fam, a, a2, b, rho):
    lo, hi = min(a, a2), max(a, a2)
    assert dist.joint_cdf(fam, lo, b, rho) <= dist.joint_cdf(fam, hi, b, rho) + 1e-15
    assert dist.joint_cdf(fam, b, lo, rho) <= dist.joint_cdf(fam, b, hi, rho) + 1e-15


@given(family_st, coord, coord, rho_st)
def test_upper_tail_identity(fam, a, b, rho):
    h = dist.upper_tail(fam, a, b, rho)
    expect = 1.0 - dist.marginal_cdf(fam, a) - dist.marginal_cdf(fam, b) + dist.joint_cdf(fam, a, b, rho)
    assert 0.0 <= h <= 1.0
    assert abs(h - expect) < 1e-14


@settings(max_examples=200)
@given(family_st, coord, coord, rho_st)
def test_cell_probs_coherent(fam, a, b, rho):
    p, q, r = dist.cell_probs(fam, a, b, rho)
    assert p >= 0 and q >= 0 and r >= 0
    assert p + q <= 1.0 + 1e-15
    assert abs(p + q + r - 1.0) < 1e-14


def test_cell_probs_direct_branch_small_r():
    # strongly positive dependence puts almost no mass in the discordant quadrants
    a = np.array([0.0, 1.0, -1.0])
    p, q, r = dist.cell_probs("normal", a, a, 0.9999)
    direct = dist.bvn_cdf(-a, a, -0.9999) + dist.bvn_cdf(a, -a, -0.9999)
    np.testing.assert_allclose(r, direct, rtol=1e-12)
    assert np.all(r < 1e-2)


def _central(fun, x, h=1e-5):
    return (fun(x + h) - fun(x - h)) / (2.0 * h)


@pytest.mark.parametrize("fam", FAMILIES)
def test_joint_cdf_grad_matches_fd_on_grid(fam):
    a, b, r = (np.array(v) for v in zip(*itertools.product(GRID, GRID, RHOS)))
    # keep the rho step inside (-1, 1)
    ga, gb, gr = dist.joint_cdf_grad(fam, a, b, r)
    fda = _central(lambda t: dist.joint_cdf(fam, t, b, r), a)
    fdb = _central(lambda t: dist.joint_cdf(fam, a, t, r), b)
    fdr = _central(lambda t: dist.joint_cdf(fam, a, b, t), r)
    # relative tolerance with an absolute floor at the finite-difference rounding level
    for g, fd in ((ga, fda), (gb, fdb), (gr, fdr)):
        assert np.all(np.abs(g - fd) <= 1e-6 * np.abs(g) + 1e-10)


@pytest.mark.parametrize("fam", FAMILIES)
def test_cell_probs_grad_matches_fd(fam):
    rng = np.random.default_rng(5)
    a, b = rng.uniform(-3, 3, 50), rng.uniform(-3, 3, 50)
    r = rng.uniform(-0.9, 0.9, 50)
    (pa, pb, pr), (qa, qb, qr) = dist.cell_probs_grad(fam, a, b, r)
    for k, (gp, gq) in enumerate(((pa, qa), (pb, qb), (pr, qr))):
        def shift(t, k=k):
            args = [a, b, r]
            args[k] = t
            return dist.cell_probs(fam, *args)
        base = (a, b, r)[k]
        fd_p = (shift(base + 1e-6)[0] - shift(base - 1e-6)[0]) / 2e-6
        fd_q = (shift(base + 1e-6)[1] - shift(base - 1e-6)[1]) / 2e-6
        np.testing.assert_allclose(gp, fd_p, atol=1e-8)
        np.testing.assert_allclose(gq, fd_q, atol=1e-8)


def test_joint_pdf_is_mixed_partial():
    rng = np.random.default_rng(3)
    a, b = rng.uniform(-3, 3, 30), rng.uniform(-3, 3, 30)
    for fam in FAMILIES:
        for rho in (-0.7, 0.0, 0.6):
            ga = lambda t: dist.joint_cdf_grad(fam, a, t, rho)[0]
            fd = (ga(b + 1e-6) - ga(b - 1e-6)) / 2e-6
            np.testing.assert_allclose(dist.joint_pdf(fam, a, b, rho), fd, atol=1e-8)


def test_amh_joint_cdf_closed_form():
    a, b, rho = 0.3, -1.2, -0.6
    ea, eb = math.exp(-a), math.exp(-b)
    expect = 1.0 / (1.0 + ea + eb + (1.0 - rho) * ea * eb)
    assert abs(dist.joint_cdf("amh", a, b, rho) - expect) < 1e-15


def test_vectorised_shapes():
    a = np.zeros((3, 4))
    for fam in FAMILIES:
        assert dist.joint_cdf(fam, a, a, 0.3).shape == (3, 4)
        assert dist.upper_tail(fam, a, a, 0.3).shape == (3, 4)
