"""Semiparametric (kernel) maximum likelihood for the PO and PPO models.

The cell probabilities are left unspecified functions of the two indices
``v_i = (z_i'bR, x_i'b)`` and are replaced by leave-one-out
Nadaraya-Watson averages with a bivariate Gaussian kernel:

    P_i = sum_{j != i} y_j H_ij,   Q_i = sum (y^R_j - y_j) H_ij,
    R_i = sum (1 - y^R_j) H_ij,    H_ij = K_ij / sum_{j != i} K_ij.

Only directions of the indices are identified.  The reporting index drops
constant columns and fixes the coefficient on its last non-constant
column at 1; the participation index fixes its last coefficient at 1.
Records outside a quantile box on the continuous covariates are trimmed
from the objective, and each log term is dropped when its kernel
probability leaves ``(delta_n, 1 - delta_n)``.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from scipy import optimize

from . import _kernel
from .estimators import FitResult, ThetaFull, fit_po_mle, fit_ppo_mle
from .io import DataError, Dataset

__all__ = [
    "KernelConfig",
    "SmlVariant",
    "SmlFit",
    "IndexMap",
    "bandwidth",
    "kernel_probs",
    "trimming_indicator",
    "sml_loglik",
    "sml_loglik_grad",
    "fit_sml",
    "sml_variance",
]


class SmlVariant(str, Enum):
    PPO = "ppo"
    PO = "po"

    @classmethod
    def parse(cls, value) -> "SmlVariant":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        return {"ppo_sml": cls.PPO, "po_sml": cls.PO}.get(key) or cls(key)


@dataclass(frozen=True)
class KernelConfig:
    """Kernel, bandwidth ``h = c * n**(-1/p)`` and trimming settings."""

    bandwidth_c: float = 1.0
    bandwidth_p: float = 6.5
    trim_quantile: float = 0.02
    delta_n: float = 0.01
    kernel: str = "gaussian_bivariate"

    def __post_init__(self):
        if not self.bandwidth_c > 0 or not self.bandwidth_p > 0:
            raise ValueError("bandwidth constants must be positive")
        if not 0.0 < self.trim_quantile < 0.5:
            raise ValueError("trim_quantile must lie in (0, 0.5)")
        if not 0.0 < self.delta_n < 0.25:
            raise ValueError("delta_n must lie in (0, 0.25)")
        if self.kernel != "gaussian_bivariate":
            raise ValueError(f"unsupported kernel {self.kernel!r}")

    def to_dict(self) -> dict:
        return {"bandwidth_c": self.bandwidth_c, "bandwidth_p": self.bandwidth_p,
                "trim_quantile": self.trim_quantile, "delta_n": self.delta_n,
                "kernel": self.kernel}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelConfig":
        return cls(**d)


def bandwidth(n: int, cfg: KernelConfig) -> float:
    return cfg.bandwidth_c * n ** (-1.0 / cfg.bandwidth_p)


class IndexMap:
    """Maps the free parameter vector to the two index coefficient vectors."""

    def __init__(self, data: Dataset):
        z = data.z
        const = np.ptp(z, axis=0) == 0
        nonconst = np.flatnonzero(~const)
        if nonconst.size == 0:
            raise DataError("reporting covariates have no non-constant column")
        if data.x.shape[1] < 1 or np.any(np.ptp(data.x, axis=0) == 0):
            raise DataError("participation covariates must be non-constant (no intercept)")
        self.l = z.shape[1]
        self.k = data.x.shape[1]
        self.z_fix = int(nonconst[-1])
        self.z_free = nonconst[:-1]
        self.x_fix = self.k - 1
        self.x_free = np.arange(self.k - 1)
        self.n_free = self.z_free.size + self.x_free.size
        self.names = ([f"betaR:{data.z_names[j]}" for j in self.z_free]
                      + [f"beta:{data.x_names[j]}" for j in self.x_free])

    def expand(self, phi):
        phi = np.asarray(phi, dtype=float)
        betaR = np.zeros(self.l)
        betaR[self.z_free] = phi[:self.z_free.size]
        betaR[self.z_fix] = 1.0
        beta = np.empty(self.k)
        beta[self.x_free] = phi[self.z_free.size:]
        beta[self.x_fix] = 1.0
        return betaR, beta

    def compress(self, betaR, beta):
        """Rescale arbitrary index coefficients onto the normalisation."""
        betaR = np.asarray(betaR, dtype=float)
        beta = np.asarray(beta, dtype=float)
        if betaR[self.z_fix] == 0 or beta[self.x_fix] == 0:
            raise ValueError("normalising coefficient is zero")
        return np.concatenate([betaR[self.z_free] / betaR[self.z_fix],
                               beta[self.x_free] / beta[self.x_fix]])


def _outcomes(data: Dataset):
    y = data.require_validated().astype(float)
    yr = data.y_reported.astype(float)
    return np.column_stack([y, yr - y, 1.0 - yr])


def _coerce_index(theta, data):
    if isinstance(theta, ThetaFull):
        return theta.betaR, theta.beta
    betaR, beta = theta
    return np.asarray(betaR, dtype=float), np.asarray(beta, dtype=float)


def kernel_probs(theta, data: Dataset, cfg: KernelConfig = KernelConfig()):
    """Leave-one-out kernel estimates ``(Pbar, Qbar, Rbar)`` at the given indices.

    ``theta`` is a :class:`ThetaFull` or a ``(betaR, beta)`` pair.  Records
    with a vanishing kernel denominator get NaN probabilities.
    """
    betaR, beta = _coerce_index(theta, data)
    a = data.z @ betaR
    b = data.x @ beta
    h = bandwidth(data.n, cfg)
    den, num = _kernel.loo_sums(a, b, _outcomes(data), h)
    with np.errstate(invalid="ignore", divide="ignore"):
        probs = np.where(den[:, None] > 0, num / den[:, None], np.nan)
    return probs[:, 0], probs[:, 1], probs[:, 2]


def _continuous_matrix(data: Dataset):
    cols = []
    seen = set()
    for names, mat in ((data.x_names, data.x), (data.z_names, data.z)):
        for j, nm in enumerate(names):
            if nm in data.continuous_columns and nm not in seen:
                seen.add(nm)
                cols.append(mat[:, j])
    if not cols:
        return np.empty((data.n, 0))
    return np.column_stack(cols)


def trimming_indicator(data: Dataset, cfg: KernelConfig = KernelConfig()) -> np.ndarray:
    """1 for records inside the quantile box of every continuous covariate.

    The box bounds are the ``p`` and ``1 - p`` empirical quantiles
    (inverse-CDF definition, so tiny ``p`` keeps every record).  Columns not
    listed as continuous are ignored.
    """
    s = _continuous_matrix(data)
    keep = np.ones(data.n, dtype=bool)
    p = cfg.trim_quantile
    for col in s.T:
        lo = np.quantile(col, p, method="inverted_cdf")
        hi = np.quantile(col, 1.0 - p, method="inverted_cdf")
        keep &= (col >= lo) & (col <= hi)
    return keep.astype(np.int8)


def _guards(probs, variant, delta):
    P, Q, R = probs[:, 0], probs[:, 1], probs[:, 2]
    if variant is SmlVariant.PPO:
        gp = (P > delta) & (P < 1.0 - delta)
        gq = (Q > delta) & (Q < 1.0 - delta)
        gr = (R > 0.0) & (R < 1.0 - delta)
        return gp, gq, gr
    g = (P > delta) & (P < 1.0 - delta)
    return g, g, g


def _terms(probs, outs, variant, delta, trim):
    """Per-record guarded log-likelihood terms and the d/dprob multipliers."""
    gp, gq, gr = _guards(probs, variant, delta)
    P, Q, R = probs[:, 0], probs[:, 1], probs[:, 2]
    y, q, r = outs[:, 0], outs[:, 1], outs[:, 2]
    t = trim.astype(bool)

    def lg(p, g):
        return np.log(np.where(g, p, 1.0))

    with np.errstate(invalid="ignore", divide="ignore"):
        if variant is SmlVariant.PPO:
            ll = y * lg(P, gp) + q * lg(Q, gq) + r * lg(R, gr)
            cP = np.where(gp, y / np.where(gp, P, 1.0), 0.0)
            cQ = np.where(gq, q / np.where(gq, Q, 1.0), 0.0)
            cR = np.where(gr, r / np.where(gr, R, 1.0), 0.0)
            # dR = -dP - dQ
            mP, mQ = cP - cR, cQ - cR
        else:
            notP = 1.0 - P
            ll = y * lg(P, gp) + (1.0 - y) * lg(notP, gp)
            mP = np.where(gp, y / np.where(gp, P, 1.0) - (1.0 - y) / np.where(gp, notP, 1.0), 0.0)
            mQ = np.zeros_like(mP)
    ll = np.where(t & np.isfinite(ll), ll, 0.0)
    return ll, np.where(t, mP, 0.0), np.where(t, mQ, 0.0)


def _auto_trim(den, trim):
    bad = (den <= 0) & trim.astype(bool)
    if bad.any():
        warnings.warn(f"{int(bad.sum())} untrimmed records have a zero kernel denominator; "
                      "trimming them", RuntimeWarning, stacklevel=3)
        trim = trim.copy()
        trim[bad] = 0
    return trim


def sml_loglik(theta, data: Dataset, cfg: KernelConfig = KernelConfig(),
               variant=SmlVariant.PPO, trim: Optional[np.ndarray] = None) -> float:
    """Trimmed, guarded kernel log-likelihood (sum over records)."""
    variant = SmlVariant.parse(variant)
    betaR, beta = _coerce_index(theta, data)
    if trim is None:
        trim = trimming_indicator(data, cfg)
    h = bandwidth(data.n, cfg)
    outs = _outcomes(data)
    den, num = _kernel.loo_sums(data.z @ betaR, data.x @ beta, outs, h)
    trim = _auto_trim(den, trim)
    with np.errstate(invalid="ignore", divide="ignore"):
        probs = num / den[:, None]
    ll, _, _ = _terms(probs, outs, variant, cfg.delta_n, trim)
    return float(ll.sum())


def _prob_grads(phi, imap: IndexMap, data, outs, h):
    """Kernel probabilities and their derivatives in the free parameters."""
    betaR, beta = imap.expand(phi)
    a = data.z @ betaR
    b = data.x @ beta
    zf = data.z[:, imap.z_free]
    xf = data.x[:, imap.x_free]
    # R's derivatives follow from dR = -dP - dQ, so only two outcome columns
    den, num2, sa, sb, va, vb = _kernel.loo_grad_sums(a, b, zf, xf, outs[:, :2], h)
    m = 2
    num = np.column_stack([num2, den - num2.sum(axis=1)])
    with np.errstate(invalid="ignore", divide="ignore"):
        probs = num / den[:, None]
        inv = 1.0 / (h * h * den)
    grads = np.empty((data.n, 3, imap.n_free))
    nz = imap.z_free.size
    for c in range(m):
        p = probs[:, c:c + 1]
        # d num_c - p d den, each = -(1/h^2)[S z_i - V]
        ca = (sa[:, c] - probs[:, c] * sa[:, m])[:, None] * zf - (va[:, c, :] - p * va[:, m, :])
        cb = (sb[:, c] - probs[:, c] * sb[:, m])[:, None] * xf - (vb[:, c, :] - p * vb[:, m, :])
        grads[:, c, :nz] = -inv[:, None] * ca
        grads[:, c, nz:] = -inv[:, None] * cb
    grads[:, 2, :] = -grads[:, 0, :] - grads[:, 1, :]
    return den, probs, grads


def sml_loglik_grad(phi, data: Dataset, cfg: KernelConfig = KernelConfig(),
                    variant=SmlVariant.PPO, trim=None, imap: Optional[IndexMap] = None):
    """Value and gradient of :func:`sml_loglik` in the free parameters.

    The guard indicators are treated as locally constant.
    """
    variant = SmlVariant.parse(variant)
    imap = imap or IndexMap(data)
    if trim is None:
        trim = trimming_indicator(data, cfg)
    outs = _outcomes(data)
    h = bandwidth(data.n, cfg)
    betaR, beta = imap.expand(phi)
    a = data.z @ betaR
    b = data.x @ beta
    den, num, redo = _kernel.loo_sums(a, b, outs, h, return_redo=True)
    trim = _auto_trim(den, trim)
    with np.errstate(invalid="ignore", divide="ignore"):
        probs = num / den[:, None]
    ll, mP, mQ = _terms(probs, outs, variant, cfg.delta_n, trim)
    # sum_i m_i dP_i collapses to one weighted pass over the kernel pairs
    ok = den > 0
    inv_den = np.where(ok, 1.0 / np.where(ok, den, 1.0), 0.0)
    alpha = np.column_stack([mP * inv_den, mQ * inv_den])
    beta_w = np.where(ok, alpha[:, 0] * np.nan_to_num(probs[:, 0])
                      + alpha[:, 1] * np.nan_to_num(probs[:, 1]), 0.0)
    g = _kernel.contracted_grad(a, b, data.z[:, imap.z_free], data.x[:, imap.x_free],
                                outs[:, :2], alpha, beta_w, redo, h)
    return float(ll.sum()), -g / (h * h)


@dataclass
class SmlFit:
    variant: SmlVariant
    param_names: list
    free_params: np.ndarray
    theta_scale_normalized: np.ndarray   # participation index, last element 1
    theta_unit_normalized: np.ndarray    # same direction, unit length
    betaR_scale_normalized: np.ndarray
    loglik: float
    effective_n: int
    n: int
    bandwidth: float
    converged: bool
    gradient_norm: float
    iterations: int
    vcov_components: Optional[tuple] = None
    vcov: Optional[np.ndarray] = None
    flags: list = field(default_factory=list)
    start_logliks: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {
            "variant": self.variant.value,
            "param_names": list(self.param_names),
            "free_params": self.free_params.tolist(),
            "theta_scale_normalized": self.theta_scale_normalized.tolist(),
            "theta_unit_normalized": self.theta_unit_normalized.tolist(),
            "betaR_scale_normalized": self.betaR_scale_normalized.tolist(),
            "loglik": float(self.loglik),
            "effective_n": int(self.effective_n),
            "n": int(self.n),
            "bandwidth": float(self.bandwidth),
            "converged": bool(self.converged),
            "gradient_norm": float(self.gradient_norm),
            "iterations": int(self.iterations),
            "flags": list(self.flags),
            "start_logliks": [float(v) for v in self.start_logliks],
        }
        if self.vcov is not None:
            out["vcov"] = self.vcov.tolist()
        if self.vcov_components is not None:
            out["Sigma"] = self.vcov_components[0].tolist()
            out["Omega"] = self.vcov_components[1].tolist()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_row(self) -> dict:
        row = {"estimator": f"{self.variant.value}_sml", "n": self.n,
               "loglik": float(self.loglik), "converged": int(self.converged),
               "effective_n": self.effective_n}
        for j, v in enumerate(self.theta_unit_normalized):
            row[f"beta_unit:{j + 1}"] = float(v)
        return row


def _parametric_start(data, variant, family):
    fit = fit_ppo_mle(data, family) if variant is SmlVariant.PPO else fit_po_mle(data, family)
    return fit


def fit_sml(data: Dataset, cfg: KernelConfig = KernelConfig(), variant=SmlVariant.PPO,
            start=None, n_perturb: int = 2, seed: int = 0, family="normal",
            nm_maxfev: Optional[int] = None, gtol: float = 1e-5,
            stall_gtol: float = 1e-2, bfgs_maxiter: int = 40,
            with_variance: bool = True) -> SmlFit:
    """Maximise the kernel log-likelihood.

    Starts are the parametric estimate of the same model (or ``start``, a
    :class:`ThetaFull`, :class:`FitResult` or free vector) and ``n_perturb``
    random perturbations of it.  Every start gets a short Nelder-Mead run on
    the guarded objective; the best of these is polished by BFGS with the
    analytic kernel gradient.  The fit counts as converged when the
    gradient max-norm (mean log-likelihood scale) is below ``gtol``, or
    below ``stall_gtol`` when BFGS stopped at a kink of the guards.
    """
    variant = SmlVariant.parse(variant)
    imap = IndexMap(data)
    trim = trimming_indicator(data, cfg)
    n = data.n
    h = bandwidth(n, cfg)

    if start is None:
        start = _parametric_start(data, variant, family)
    if isinstance(start, FitResult):
        start = start.theta
    if isinstance(start, ThetaFull):
        phi0 = imap.compress(start.betaR, start.beta)
    else:
        phi0 = np.asarray(start, dtype=float)

    def neg_f(phi):
        betaR, beta = imap.expand(phi)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return -sml_loglik((betaR, beta), data, cfg, variant, trim) / n

    cache = {}

    def neg_fg(phi):
        key = phi.tobytes()
        if key not in cache:
            cache.clear()
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                v, g = sml_loglik_grad(phi, data, cfg, variant, trim, imap)
            cache[key] = (-v / n, -g / n)
        return cache[key]

    rng = np.random.default_rng([seed, 0x5A1])
    starts = [phi0] + [phi0 + 0.1 * rng.standard_normal(phi0.size) * np.maximum(1.0, np.abs(phi0))
                       for _ in range(n_perturb)]
    maxfev = nm_maxfev if nm_maxfev is not None else 10 * phi0.size
    screened = []
    for s in starts:
        nm = optimize.minimize(neg_f, s, method="Nelder-Mead",
                               options={"maxfev": maxfev, "xatol": 1e-4, "fatol": 1e-9})
        screened.append((float(nm.fun), nm.x, int(nm.nit)))
    f1, x1, nit1 = min(screened, key=lambda r: r[0])
    bf = optimize.minimize(lambda p: neg_fg(p)[0], x1, jac=lambda p: neg_fg(p)[1],
                           method="BFGS", options={"gtol": gtol, "maxiter": bfgs_maxiter})
    if bf.fun <= f1:
        phi, f_best = bf.x, float(bf.fun)
    else:
        phi, f_best = x1, f1
    gnorm = float(np.max(np.abs(neg_fg(phi)[1])))
    iters = nit1 + int(bf.nit)
    betaR, beta = imap.expand(phi)
    flags = []
    # the guards make the objective piecewise smooth, so BFGS usually stops
    # on lost precision at a kink rather than on a vanishing gradient
    stalled = bf.status in (0, 2)
    converged = gnorm <= gtol or (stalled and gnorm <= stall_gtol)
    if not converged:
        flags.append("not_converged")
    fit = SmlFit(
        variant=variant, param_names=imap.names, free_params=phi,
        theta_scale_normalized=beta, theta_unit_normalized=beta / np.linalg.norm(beta),
        betaR_scale_normalized=betaR, loglik=-f_best * n, effective_n=int(trim.sum()), n=n,
        bandwidth=h, converged=converged, gradient_norm=gnorm, iterations=iters,
        flags=flags, start_logliks=[-r[0] * n for r in screened],
    )
    if with_variance:
        try:
            sig, om, vc = sml_variance(fit, data, cfg, variant)
            fit.vcov_components = (sig, om)
            fit.vcov = vc
        except np.linalg.LinAlgError:
            fit.flags.append("singular_sigma")
    return fit


def sml_variance(fit: SmlFit, data: Dataset, cfg: KernelConfig = KernelConfig(),
                 variant=None):
    """Plug-in ``(Sigma, Omega, vcov)`` in the free parameters.

    ``Sigma = E_n[I sum_c dP_c dP_c' / P_c]`` over the cells (``P(1 - P)``
    in the denominator for PO) and ``Omega`` subtracts, inside each cell,
    the outer product of the kernel regressions of ``I dP_c`` on the
    indices.  Cell terms outside the likelihood guards are dropped, and the
    correction is only applied on untrimmed records with ``P_c > delta_n``
    (elsewhere ``1/P_c`` amplifies kernel noise without bound).
    ``vcov = Sigma^{-1} Omega Sigma^{-1} / n``.
    """
    variant = SmlVariant.parse(variant if variant is not None else fit.variant)
    imap = IndexMap(data)
    trim = trimming_indicator(data, cfg).astype(bool)
    outs = _outcomes(data)
    n = data.n
    h = bandwidth(n, cfg)
    den, probs, grads = _prob_grads(fit.free_params, imap, data, outs, h)
    trim &= den > 0
    p = imap.n_free
    betaR, beta = imap.expand(fit.free_params)
    a = data.z @ betaR
    b = data.x @ beta
    gp, gq, gr = _guards(probs, variant, cfg.delta_n)
    if variant is SmlVariant.PPO:
        cells = [(probs[:, 0], grads[:, 0, :], gp), (probs[:, 1], grads[:, 1, :], gq),
                 (probs[:, 2], grads[:, 2, :], gr)]
    else:
        P = probs[:, 0]
        cells = [(P * (1.0 - P), grads[:, 0, :], gp)]
    sigma = np.zeros((p, p))
    omega = np.zeros((p, p))
    for w, g, guard in cells:
        use = trim & guard & np.isfinite(w) & (w > 0)
        gi = np.where(use[:, None], g, 0.0)
        dden, dnum = _kernel.loo_sums(a, b, gi, h)
        with np.errstate(invalid="ignore", divide="ignore"):
            cond = np.where(dden[:, None] > 0, dnum / dden[:, None], 0.0)
        ok = guard & np.isfinite(w) & (w > 0)
        inv_w = np.where(ok, 1.0 / np.where(ok, w, 1.0), 0.0)
        sig_c = (gi * inv_w[:, None]).T @ gi / n
        # the correction is taken over the same untrimmed, guarded records
        sub = use & (w > cfg.delta_n)
        condw = np.where(sub[:, None], cond * np.sqrt(inv_w)[:, None], 0.0)
        sigma += sig_c
        omega += sig_c - condw.T @ condw / n
    sigma = 0.5 * (sigma + sigma.T)
    omega = 0.5 * (omega + omega.T)
    sinv = np.linalg.inv(sigma)
    vcov = sinv @ omega @ sinv / n
    return sigma, omega, 0.5 * (vcov + vcov.T)
