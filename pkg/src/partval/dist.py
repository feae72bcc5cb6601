"""Univariate and bivariate link distributions.

Two families are supported:

* ``NORMAL``: standard normal marginals joined by the bivariate normal with
  correlation ``rho``.
* ``AMH``: logistic marginals joined by the Ali-Mikhail-Haq copula,
  ``G(a, b; rho) = L(a) L(b) / (1 - rho (1 - L(a)) (1 - L(b)))``.

All functions are vectorised over ``a``, ``b`` (and ``rho``) and accept
``+/-inf`` as sentinels.  The bivariate normal CDF follows the Drezner and
Wesolowsky quadrature as reworked by Genz (Gauss-Legendre over the
correlation, with an asymptotic series when ``|rho| >= 0.925``).
"""
from __future__ import annotations

from enum import Enum

import numpy as np
from scipy import special

__all__ = [
    "LinkFamily",
    "marginal_cdf",
    "marginal_sf",
    "marginal_pdf",
    "marginal_pdf_deriv",
    "joint_cdf",
    "upper_tail",
    "joint_cdf_grad",
    "joint_pdf",
    "bvn_cdf",
    "cell_probs",
    "cell_probs_grad",
]

_TWO_PI = 2.0 * np.pi
_INV_SQRT_2PI = 1.0 / np.sqrt(_TWO_PI)


class LinkFamily(str, Enum):
    NORMAL = "normal"
    AMH = "amh"

    @classmethod
    def parse(cls, value: "LinkFamily | str") -> "LinkFamily":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {"normal": cls.NORMAL, "probit": cls.NORMAL,
                   "amh": cls.AMH, "amhlogistic": cls.AMH, "logistic": cls.AMH,
                   "amh_logistic": cls.AMH}
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown link family {value!r}") from None


def _check_nan(*arrays):
    for arr in arrays:
        if np.any(np.isnan(arr)):
            raise ValueError("NaN passed to a distribution function")


def _check_rho(rho):
    rho = np.asarray(rho, dtype=float)
    if np.any(np.isnan(rho)) or np.any(np.abs(rho) >= 1.0):
        raise ValueError("dependence parameter rho must lie strictly inside (-1, 1)")
    return rho


# ---------------------------------------------------------------------------
# marginals


def marginal_cdf(family, t):
    """F(t) for the family's marginal law."""
    family = LinkFamily.parse(family)
    t = np.asarray(t, dtype=float)
    _check_nan(t)
    if family is LinkFamily.NORMAL:
        return special.ndtr(t)
    return special.expit(t)


def marginal_sf(family, t):
    """1 - F(t), computed without cancellation."""
    family = LinkFamily.parse(family)
    t = np.asarray(t, dtype=float)
    _check_nan(t)
    if family is LinkFamily.NORMAL:
        return special.ndtr(-t)
    return special.expit(-t)


def marginal_pdf(family, t):
    family = LinkFamily.parse(family)
    t = np.asarray(t, dtype=float)
    _check_nan(t)
    if family is LinkFamily.NORMAL:
        with np.errstate(over="ignore"):
            return _INV_SQRT_2PI * np.exp(-0.5 * t * t)
    p = special.expit(t)
    return p * special.expit(-t)


def marginal_pdf_deriv(family, t):
    """Derivative of the marginal density, f'(t)."""
    family = LinkFamily.parse(family)
    t = np.asarray(t, dtype=float)
    f = marginal_pdf(family, t)
    if family is LinkFamily.NORMAL:
        return -t * f
    return f * (1.0 - 2.0 * special.expit(t))


def log_marginal_cdf(family, t):
    family = LinkFamily.parse(family)
    t = np.asarray(t, dtype=float)
    if family is LinkFamily.NORMAL:
        return special.log_ndtr(t)
    return -np.logaddexp(0.0, -t)


# ---------------------------------------------------------------------------
# bivariate normal (Genz's BVNU)

_GL6 = (np.array([0.1713244923791705, 0.3607615730481384, 0.4679139345726904]),
        np.array([0.9324695142031522, 0.6612093864662647, 0.2386191860831970]))
_GL12 = (np.array([0.04717533638651177, 0.1069393259953183, 0.1600783285433464,
                   0.2031674267230659, 0.2334925365383547, 0.2491470458134029]),
         np.array([0.9815606342467191, 0.9041172563704750, 0.7699026741943050,
                   0.5873179542866171, 0.3678314989981802, 0.1252334085114692]))
_GL20 = (np.array([0.01761400713915212, 0.04060142980038694, 0.06267204833410906,
                   0.08327674157670475, 0.1019301198172404, 0.1181945319615184,
                   0.1316886384491766, 0.1420961093183821, 0.1491729864726037,
                   0.1527533871307259]),
         np.array([0.9931285991850949, 0.9639719272779138, 0.9122344282513259,
                   0.8391169718222188, 0.7463319064601508, 0.6360536807265150,
                   0.5108670019508271, 0.3737060887154196, 0.2277858511416451,
                   0.07652652113349733]))


def _doubled(rule):
    w, x = rule
    return np.concatenate([w, w]), np.concatenate([1.0 - x, 1.0 + x])


_RULES = {6: _doubled(_GL6), 12: _doubled(_GL12), 20: _doubled(_GL20)}


def _bvnu_moderate(h, k, r, rule):
    # |r| < 0.925: integrate the density over the correlation from 0 to r
    w, x = rule
    hk = h * k
    hs = 0.5 * (h * h + k * k)
    asr = 0.5 * np.arcsin(r)
    sn = np.sin(asr[:, None] * x[None, :])
    terms = np.exp((sn * hk[:, None] - hs[:, None]) / (1.0 - sn * sn))
    bvn = terms @ w
    return bvn * asr / _TWO_PI + special.ndtr(-h) * special.ndtr(-k)


def _bvnu_high(h, k, r):
    # |r| >= 0.925: asymptotic series plus correction quadrature
    w, x = _RULES[20]
    k = np.where(r < 0, -k, k)
    hk = h * k
    as_ = (1.0 - r) * (1.0 + r)
    a = np.sqrt(as_)
    bs = (h - k) ** 2
    c = (4.0 - hk) / 8.0
    d = (12.0 - hk) / 16.0
    asr = -(bs / as_ + hk) / 2.0
    with np.errstate(under="ignore", over="ignore"):
        bvn = np.where(
            asr > -100.0,
            a * np.exp(asr) * (1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0
                               + c * d * as_ * as_ / 5.0),
            0.0,
        )
        b = np.sqrt(bs)
        sp = np.sqrt(_TWO_PI) * special.ndtr(-b / a)
        corr = np.exp(-hk / 2.0) * sp * b * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0)
        bvn = bvn - np.where(hk > -100.0, corr, 0.0)

        a2 = a / 2.0
        xs = (a2[:, None] * x[None, :]) ** 2
        rs = np.sqrt(1.0 - xs)
        asr2 = -(bs[:, None] / xs + hk[:, None]) / 2.0
        sp2 = 1.0 + c[:, None] * xs * (1.0 + d[:, None] * xs)
        ep = np.exp(-hk[:, None] * xs / (2.0 * (1.0 + rs) ** 2)) / rs
        contrib = np.where(asr2 > -100.0, np.exp(asr2) * (ep - sp2), 0.0)
        bvn = bvn + a2 * (contrib @ w)
    bvn = -bvn / _TWO_PI

    out = np.empty_like(bvn)
    pos = r > 0
    out[pos] = bvn[pos] + special.ndtr(-np.maximum(h[pos], k[pos]))
    neg = ~pos
    hn, kn, bn = h[neg], k[neg], bvn[neg]
    ge = hn >= kn
    big = np.where(hn < 0, special.ndtr(kn) - special.ndtr(hn),
                   special.ndtr(-hn) - special.ndtr(-kn))
    out[neg] = np.where(ge, -bn, big - bn)
    return out


def _bvnu(h, k, r):
    """P(X > h, Y > k) for finite h, k and |r| < 1 (1-d arrays)."""
    out = np.empty_like(h)
    ar = np.abs(r)
    zero = r == 0.0
    out[zero] = special.ndtr(-h[zero]) * special.ndtr(-k[zero])
    for lo, hi, n in ((0.0, 0.3, 6), (0.3, 0.75, 12), (0.75, 0.925, 20)):
        sel = (~zero) & (ar >= lo) & (ar < hi)
        if sel.any():
            out[sel] = _bvnu_moderate(h[sel], k[sel], r[sel], _RULES[n])
    sel = ar >= 0.925
    if sel.any():
        out[sel] = _bvnu_high(h[sel], k[sel], r[sel])
    return np.clip(out, 0.0, 1.0)


def bvn_cdf(a, b, rho):
    """Bivariate standard normal CDF Phi2(a, b; rho)."""
    a, b, rho = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float),
                                    np.asarray(rho, float))
    shape = a.shape
    a, b, rho = a.ravel(), b.ravel(), rho.ravel()
    out = np.empty(a.shape, dtype=float)
    ninf = (a == -np.inf) | (b == -np.inf)
    out[ninf] = 0.0
    a_inf = (a == np.inf) & ~ninf
    b_inf = (b == np.inf) & ~ninf
    out[a_inf & b_inf] = 1.0
    only_a = a_inf & ~b_inf
    out[only_a] = special.ndtr(b[only_a])
    only_b = b_inf & ~a_inf
    out[only_b] = special.ndtr(a[only_b])
    fin = ~(ninf | a_inf | b_inf)
    if fin.any():
        out[fin] = _bvnu(-a[fin], -b[fin], rho[fin])
    return out.reshape(shape)


def _bvn_pdf(a, b, rho):
    s2 = (1.0 - rho) * (1.0 + rho)
    with np.errstate(over="ignore", invalid="ignore"):
        q = (a * a - 2.0 * rho * a * b + b * b) / s2
        out = np.exp(-0.5 * q) / (_TWO_PI * np.sqrt(s2))
    return np.where(np.isfinite(a) & np.isfinite(b), out, 0.0)


def _cond_cdf(a, b, rho):
    # Phi((b - rho a) / sqrt(1 - rho^2)), guarded for infinite a
    s = np.sqrt((1.0 - rho) * (1.0 + rho))
    with np.errstate(invalid="ignore"):
        arg = (b - rho * a) / s
    return special.ndtr(np.nan_to_num(arg, nan=0.0))


# ---------------------------------------------------------------------------
# AMH helpers (u = 1 - L(a), v = 1 - L(b))


def _amh_parts(a, b, rho):
    la, lb = special.expit(a), special.expit(b)
    u, v = special.expit(-a), special.expit(-b)
    den = 1.0 - rho * u * v
    return la, lb, u, v, den


# ---------------------------------------------------------------------------
# public bivariate API


def joint_cdf(family, a, b, rho):
    """G(a, b; rho) = P(eps < a, eps* < b)."""
    family = LinkFamily.parse(family)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_nan(a, b)
    rho = _check_rho(rho)
    if family is LinkFamily.NORMAL:
        return bvn_cdf(a, b, rho)
    la, lb, u, v, den = _amh_parts(a, b, rho)
    return la * lb / den


def upper_tail(family, a, b, rho):
    """H(a, b; rho) = P(eps > a, eps* > b) = 1 - F(a) - F(b) + G(a, b; rho)."""
    family = LinkFamily.parse(family)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_nan(a, b)
    rho = _check_rho(rho)
    if family is LinkFamily.NORMAL:
        return bvn_cdf(-a, -b, rho)
    _, _, u, v, den = _amh_parts(a, b, rho)
    return u * v * (1.0 - rho * (u + v - 1.0)) / den


def joint_pdf(family, a, b, rho):
    """Joint density, the mixed partial of G."""
    family = LinkFamily.parse(family)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    rho = _check_rho(rho)
    if family is LinkFamily.NORMAL:
        return _bvn_pdf(a, b, rho)
    la, lb, u, v, den = _amh_parts(a, b, rho)
    fa, fb = la * u, lb * v
    num = (1.0 + rho - 2.0 * rho * v) * den - 2.0 * rho * u * lb * (1.0 - rho * v)
    return fa * fb * num / den ** 3


def joint_cdf_grad(family, a, b, rho):
    """Analytic partials (dG/da, dG/db, dG/drho)."""
    family = LinkFamily.parse(family)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_nan(a, b)
    rho = _check_rho(rho)
    if family is LinkFamily.NORMAL:
        ga = marginal_pdf(family, a) * _cond_cdf(a, b, rho)
        gb = marginal_pdf(family, b) * _cond_cdf(b, a, rho)
        gr = _bvn_pdf(a, b, rho)
        return ga, gb, gr
    la, lb, u, v, den = _amh_parts(a, b, rho)
    den2 = den * den
    ga = la * u * lb * (1.0 - rho * v) / den2
    gb = lb * v * la * (1.0 - rho * u) / den2
    gr = la * lb * u * v / den2
    return ga, gb, gr


def cell_probs(family, a, b, rho):
    """Probabilities of the three observable cells.

    Returns ``(P, Q, R)`` with ``P = G(a, b)`` (eps < a, eps* < b),
    ``Q = H(a, b)`` (eps > a, eps* > b) and ``R = 1 - P - Q`` (the two
    discordant quadrants), each computed without subtractive cancellation.
    """
    family = LinkFamily.parse(family)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    rho = _check_rho(rho)
    if family is LinkFamily.NORMAL:
        p = bvn_cdf(a, b, rho)
        q = bvn_cdf(-a, -b, rho)
        r = 1.0 - p - q
        # direct evaluation only where the subtraction would lose digits
        small = r < 1e-4
        if np.any(small):
            a_s, b_s = np.broadcast_to(a, r.shape)[small], np.broadcast_to(b, r.shape)[small]
            r = np.array(r, dtype=float, copy=True)
            r[small] = bvn_cdf(-a_s, b_s, -rho) + bvn_cdf(a_s, -b_s, -rho)
        return p, q, r
    la, lb, u, v, den = _amh_parts(a, b, rho)
    p = la * lb / den
    q = u * v * (1.0 - rho * (u + v - 1.0)) / den
    r = (lb * u * (1.0 - rho * v) + la * v * (1.0 - rho * u)) / den
    return p, q, r


def cell_probs_grad(family, a, b, rho):
    """Partials of (P, Q) with respect to (a, b, rho).

    Returns ``((Pa, Pb, Pr), (Qa, Qb, Qr))``; R's partials are the negated
    sums.
    """
    family = LinkFamily.parse(family)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    rho = _check_rho(rho)
    pa, pb, pr = joint_cdf_grad(family, a, b, rho)
    if family is LinkFamily.NORMAL:
        qa = -marginal_pdf(family, a) * _cond_cdf(-a, -b, rho)
        qb = -marginal_pdf(family, b) * _cond_cdf(-b, -a, rho)
        return (pa, pb, pr), (qa, qb, pr)
    la, lb, u, v, den = _amh_parts(a, b, rho)
    den2 = den * den
    dq_du = v * ((1.0 - rho * (2.0 * u + v - 1.0)) * den + rho * u * v
                 * (1.0 - rho * (u + v - 1.0))) / den2
    dq_dv = u * ((1.0 - rho * (u + 2.0 * v - 1.0)) * den + rho * u * v
                 * (1.0 - rho * (u + v - 1.0))) / den2
    qa = -dq_du * u * la
    qb = -dq_dv * v * lb
    return (pa, pb, pr), (qa, qb, pr)
