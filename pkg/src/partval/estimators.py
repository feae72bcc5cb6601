"""Parametric likelihood estimators for misclassified binary outcomes.

Naive binary-choice fits (on the reported outcome, the validated outcome,
or the validated subsample), the constant-misclassification estimator
(HAS), and the two partial-observability estimators:

* PO MLE uses only the validated outcome ``y``:
  ``sum y ln P + (1 - y) ln(1 - P)`` with ``P = G(z'bR, x'b; rho)``.
* PPO MLE also uses the reported outcome ``y^R``:
  ``sum y ln P + (y^R - y) ln Q + (1 - y^R) ln(1 - P - Q)`` with
  ``Q = H(z'bR, x'b; rho)``.

Covariances use the outer product of the individual scores.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from . import dist
from ._optim import GTOL, maximize
from .dist import LinkFamily
from .io import DataError, Dataset

__all__ = [
    "Estimator",
    "ThetaFull",
    "FitResult",
    "MisclassProbs",
    "MarginalEffects",
    "fit_binary",
    "fit_probit_naive",
    "fit_has",
    "ppo_loglik",
    "ppo_loglik_grad",
    "po_loglik",
    "po_loglik_grad",
    "fit_ppo_mle",
    "fit_po_mle",
    "fit",
    "misclass_probs",
    "marginal_effects",
    "PROB_FLOOR",
]

PROB_FLOOR = 1e-12
N_RESTARTS = 3
# tanh saturates to +-1 in double precision beyond about 19
RHO_RAW_MAX = 12.0


class Estimator(str, Enum):
    PROBIT_REPORTED = "probit_reported"
    PROBIT_VALIDATED = "probit_validated"
    PROBIT_RESTRICTED = "probit_restricted"
    HAS = "has"
    PO_MLE = "po_mle"
    PPO_MLE = "ppo_mle"
    PPO_SML = "ppo_sml"
    PO_SML = "po_sml"

    @classmethod
    def parse(cls, value) -> "Estimator":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"naive_reported": cls.PROBIT_REPORTED, "reported": cls.PROBIT_REPORTED,
                   "naive_validated": cls.PROBIT_VALIDATED, "validated": cls.PROBIT_VALIDATED,
                   "naive_restricted": cls.PROBIT_RESTRICTED, "restricted": cls.PROBIT_RESTRICTED,
                   "ppo": cls.PPO_MLE, "po": cls.PO_MLE}
        if key in aliases:
            return aliases[key]
        return cls(key)


@dataclass
class ThetaFull:
    """Stacked parameters ``(betaR, beta, rho)`` with ``rho = tanh(rho_raw)``."""

    betaR: np.ndarray
    beta: np.ndarray
    rho_raw: float = 0.0

    def __post_init__(self):
        self.betaR = np.asarray(self.betaR, dtype=float)
        self.beta = np.asarray(self.beta, dtype=float)
        self.rho_raw = float(self.rho_raw)

    @property
    def rho(self) -> float:
        return math.tanh(min(max(self.rho_raw, -RHO_RAW_MAX), RHO_RAW_MAX))

    @classmethod
    def from_rho(cls, betaR, beta, rho) -> "ThetaFull":
        return cls(betaR, beta, math.atanh(rho))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.betaR, self.beta, [self.rho_raw]])

    @classmethod
    def from_vector(cls, vec, l: int) -> "ThetaFull":
        vec = np.asarray(vec, dtype=float)
        return cls(vec[:l], vec[l:-1], vec[-1])


@dataclass
class FitResult:
    estimator: Estimator
    params: np.ndarray
    param_names: list
    loglik: float
    vcov: Optional[np.ndarray]
    converged: bool
    iterations: int
    gradient_norm: float
    n: int
    family: LinkFamily = LinkFamily.NORMAL
    theta: Optional[ThetaFull] = None
    flags: list = field(default_factory=list)
    trace: list = field(default_factory=list, repr=False)
    # natural-scale individual scores at the estimate (n x p)
    scores: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def std_errors(self) -> np.ndarray:
        if self.vcov is None:
            return np.full(self.params.shape, np.nan)
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    @property
    def beta(self) -> np.ndarray:
        """Participation-equation coefficients."""
        idx = [i for i, nm in enumerate(self.param_names) if nm.startswith("beta:")]
        return self.params[idx]

    @property
    def beta_std_errors(self) -> np.ndarray:
        idx = [i for i, nm in enumerate(self.param_names) if nm.startswith("beta:")]
        return self.std_errors[idx]

    def get(self, name: str) -> float:
        return float(self.params[self.param_names.index(name)])

    def to_dict(self) -> dict:
        vcov = None if self.vcov is None else self.vcov.tolist()
        return {
            "estimator": self.estimator.value,
            "family": self.family.value,
            "n": self.n,
            "param_names": list(self.param_names),
            "params": [float(v) for v in self.params],
            "std_errors": [None if not np.isfinite(v) else float(v) for v in self.std_errors],
            "loglik": float(self.loglik),
            "vcov": vcov,
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "gradient_norm": float(self.gradient_norm),
            "flags": list(self.flags),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_row(self) -> dict:
        row = {"estimator": self.estimator.value, "n": self.n, "loglik": float(self.loglik),
               "converged": int(self.converged), "iterations": self.iterations,
               "gradient_norm": float(self.gradient_norm)}
        for nm, v, se in zip(self.param_names, self.params, self.std_errors):
            row[nm] = float(v)
            row[f"se:{nm}"] = float(se)
        return row


@dataclass
class MisclassProbs:
    a0R: np.ndarray   # P(y^R = 1 | y* = 0, z, x), false positives
    a1R: np.ndarray   # P(y^R = 0 | y* = 1, z, x), false negatives
    flagged: np.ndarray


@dataclass
class MarginalEffects:
    per_record: np.ndarray
    average: np.ndarray
    predicted: np.ndarray


# ---------------------------------------------------------------------------
# helpers


def _safe_log(p):
    """log of floored probabilities and the indicator of the unfloored region."""
    live = p > PROB_FLOOR
    return np.log(np.where(live, p, PROB_FLOOR)), live


def _ratio_pdf_cdf(family, t):
    """(f/F, f/(1-F)) computed in log space."""
    if family is LinkFamily.NORMAL:
        from scipy import special
        logf = -0.5 * t * t - 0.5 * math.log(2.0 * math.pi)
        return np.exp(logf - special.log_ndtr(t)), np.exp(logf - special.log_ndtr(-t))
    from scipy import special
    return special.expit(-t), special.expit(t)


def _opg_vcov(scores, flags):
    info = scores.T @ scores
    try:
        w = np.linalg.eigvalsh(info)
    except np.linalg.LinAlgError:
        flags.append("singular_information")
        return None
    if w[0] <= 1e-14 * max(w[-1], 1e-300):
        flags.append("singular_information")
        return None
    if w[0] <= 1e-8 * w[-1]:
        flags.append("flat_likelihood_direction")
    vcov = np.linalg.inv(info)
    return 0.5 * (vcov + vcov.T)


def _hessian_vcov(mean_grad, x, n, jac):
    from ._optim import _fd_hessian
    hess = _fd_hessian(mean_grad, x)
    vcov_raw = -np.linalg.inv(hess) / n
    out = jac[:, None] * vcov_raw * jac[None, :]
    return 0.5 * (out + out.T)


# ---------------------------------------------------------------------------
# naive binary choice


def _binary_terms(beta, x, y, family):
    t = x @ beta
    logF = dist.log_marginal_cdf(family, t)
    log1mF = dist.log_marginal_cdf(family, -t)
    ll = y * logF + (1.0 - y) * log1mF
    r1, r0 = _ratio_pdf_cdf(family, t)
    dt = y * r1 - (1.0 - y) * r0
    return ll, dt[:, None] * x


def fit_binary(x, y, family=LinkFamily.NORMAL, start=None, gtol=GTOL, weights=None):
    """Binary-choice MLE of ``P(y=1|x) = F(x'b)``.

    ``y`` may be fractional (an expected outcome), which turns the fit into
    the pseudo-true solve used by the bias module.  Returns the optimiser
    result with the mean score at the optimum.
    """
    family = LinkFamily.parse(family)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    wsum = w.sum()

    def fg(beta):
        ll, s = _binary_terms(beta, x, y, family)
        return float(w @ ll) / wsum, (w @ s) / wsum

    x0 = np.zeros(x.shape[1]) if start is None else np.asarray(start, dtype=float)
    return maximize(fg, x0, gtol=gtol)


def fit_probit_naive(data: Dataset, outcome: str = "reported",
                     family=LinkFamily.NORMAL) -> FitResult:
    """Standard binary MLE ignoring misclassification.

    ``outcome`` is ``"reported"`` (y^R), ``"validated"`` (y) or
    ``"restricted"`` (the truthfulness indicator on the y^R = 1 subsample).
    """
    family = LinkFamily.parse(family)
    outcome = outcome.lower()
    if outcome in ("reported", Estimator.PROBIT_REPORTED.value):
        est, x, y = Estimator.PROBIT_REPORTED, data.x, data.y_reported
    elif outcome in ("validated", Estimator.PROBIT_VALIDATED.value):
        est, x, y = Estimator.PROBIT_VALIDATED, data.x, data.require_validated()
    elif outcome in ("restricted", "restrictedsample", Estimator.PROBIT_RESTRICTED.value):
        yv = data.require_validated()
        keep = data.y_reported == 1
        if not keep.any():
            raise DataError("restricted sample is empty: no record reports participation")
        est, x, y = Estimator.PROBIT_RESTRICTED, data.x[keep], yv[keep]
    else:
        raise ValueError(f"unknown naive outcome {outcome!r}")
    y = y.astype(float)
    res = fit_binary(x, y, family)
    n = x.shape[0]
    flags = []
    _, scores = _binary_terms(res.x, x, y, family)
    vcov = _opg_vcov(scores, flags)
    if not res.converged:
        flags.append("not_converged")
        if np.max(np.abs(res.x)) > 20:
            flags.append("possible_separation")
    names = [f"beta:{nm}" for nm in data.x_names]
    return FitResult(est, res.x, names, res.fun * n, vcov, res.converged, res.iterations,
                     res.gradient_norm, n, family, flags=flags, trace=res.trace, scores=scores)


# ---------------------------------------------------------------------------
# HAS: constant misclassification probabilities

_ALPHA_CAP = 0.5


def _has_unpack(vec):
    from scipy import special
    s0, s1 = special.expit(vec[0]), special.expit(vec[1])
    return _ALPHA_CAP * s0, _ALPHA_CAP * s1, vec[2:], (s0, s1)


def _has_terms(vec, x, y, family):
    a0, a1, beta, (s0, s1) = _has_unpack(vec)
    t = x @ beta
    F = dist.marginal_cdf(family, t)
    f = dist.marginal_pdf(family, t)
    p = a0 + (1.0 - a0 - a1) * F
    q = (1.0 - a0) - (1.0 - a0 - a1) * F  # 1 - p
    lp, livep = _safe_log(p)
    lq, liveq = _safe_log(q)
    ll = y * lp + (1.0 - y) * lq
    dldp = np.where(livep, y / np.where(livep, p, 1.0), 0.0) - \
        np.where(liveq, (1.0 - y) / np.where(liveq, q, 1.0), 0.0)
    nat = np.column_stack([dldp * (1.0 - F), -dldp * F, (dldp * (1.0 - a0 - a1) * f)[:, None] * x])
    jac = np.concatenate([[_ALPHA_CAP * s0 * (1 - s0), _ALPHA_CAP * s1 * (1 - s1)], np.ones(beta.size)])
    return ll, nat, nat * jac


def fit_has(data: Dataset, family=LinkFamily.NORMAL, start=None) -> FitResult:
    """MLE with constant false-positive (alpha0) and false-negative (alpha1) rates.

    ``E[y^R|x] = alpha0 + (1 - alpha0 - alpha1) F(x'b)``; both alphas are
    kept in ``[0, 0.5)`` through a scaled logistic map, which also enforces
    ``alpha0 + alpha1 < 1``.
    """
    from scipy import special
    family = LinkFamily.parse(family)
    x, y = data.x, data.y_reported.astype(float)
    n = data.n

    def fg(vec):
        ll, _, raw = _has_terms(vec, x, y, family)
        return float(ll.sum()) / n, raw.sum(axis=0) / n

    if start is None:
        beta0 = fit_binary(x, y, family).x
        start = np.concatenate([[special.logit(0.1), special.logit(0.1)], beta0])
    res = _multistart(fg, np.asarray(start, dtype=float))
    a0, a1, beta, _ = _has_unpack(res.x)
    _, nat, _ = _has_terms(res.x, x, y, family)
    flags = []
    vcov = _opg_vcov(nat, flags)
    for name, a in (("alpha0", a0), ("alpha1", a1)):
        if a < 1e-3:
            flags.append(f"{name}_at_boundary")
        elif a > _ALPHA_CAP - 1e-3:
            flags.append(f"{name}_at_upper_bound")
    if not res.converged:
        flags.append("not_converged")
    names = ["alpha0", "alpha1"] + [f"beta:{nm}" for nm in data.x_names]
    params = np.concatenate([[a0, a1], beta])
    return FitResult(Estimator.HAS, params, names, res.fun * n, vcov, res.converged,
                     res.iterations, res.gradient_norm, n, family, flags=flags,
                     trace=res.trace, scores=nat)


# ---------------------------------------------------------------------------
# PO / PPO


def _indices(vec, data):
    l = data.z.shape[1]
    theta = ThetaFull.from_vector(vec, l)
    return data.z @ theta.betaR, data.x @ theta.beta, theta.rho


def _po_ppo_terms(vec, data: Dataset, family, ppo: bool, want_scores=True):
    a, b, rho = _indices(vec, data)
    y = data.require_validated().astype(float)
    yr = data.y_reported.astype(float)
    P, Q, R = dist.cell_probs(family, a, b, rho)
    if ppo:
        lp, livep = _safe_log(P)
        lq, liveq = _safe_log(Q)
        lr, liver = _safe_log(R)
        wq = yr - y
        wr = 1.0 - yr
        ll = y * lp + wq * lq + wr * lr
    else:
        notP = Q + R
        lp, livep = _safe_log(P)
        ln, liven = _safe_log(notP)
        ll = y * lp + (1.0 - y) * ln
    if not want_scores:
        return ll, None, None
    (Pa, Pb, Pr), (Qa, Qb, Qr) = dist.cell_probs_grad(family, a, b, rho)

    def inv(p, live, wt):
        return np.where(live & (wt != 0), wt / np.where(live, p, 1.0), 0.0)

    if ppo:
        cp, cq, cr = inv(P, livep, y), inv(Q, liveq, wq), inv(R, liver, wr)
        da = cp * Pa + cq * Qa - cr * (Pa + Qa)
        db = cp * Pb + cq * Qb - cr * (Pb + Qb)
        dr = cp * Pr + cq * Qr - cr * (Pr + Qr)
    else:
        cp, cn = inv(P, livep, y), inv(Q + R, liven, 1.0 - y)
        da = (cp - cn) * Pa
        db = (cp - cn) * Pb
        dr = (cp - cn) * Pr
    nat = np.column_stack([da[:, None] * data.z, db[:, None] * data.x, dr])
    raw = nat.copy()
    clipped = abs(vec[-1]) >= RHO_RAW_MAX
    raw[:, -1] *= 0.0 if clipped else (1.0 - rho * rho)
    return ll, nat, raw


def ppo_loglik(theta: ThetaFull, data: Dataset, family=LinkFamily.NORMAL) -> float:
    """Partial-partial-observability log-likelihood (sum over records)."""
    family = LinkFamily.parse(family)
    data.require_validated()
    ll, _, _ = _po_ppo_terms(theta.to_vector(), data, family, True, want_scores=False)
    return float(ll.sum())


def ppo_loglik_grad(theta: ThetaFull, data: Dataset, family=LinkFamily.NORMAL) -> np.ndarray:
    """Gradient of :func:`ppo_loglik` with respect to ``(betaR, beta, rho_raw)``."""
    _, _, raw = _po_ppo_terms(theta.to_vector(), data, LinkFamily.parse(family), True)
    return raw.sum(axis=0)


def po_loglik(theta: ThetaFull, data: Dataset, family=LinkFamily.NORMAL) -> float:
    """Partial-observability log-likelihood (uses only the validated outcome)."""
    ll, _, _ = _po_ppo_terms(theta.to_vector(), data, LinkFamily.parse(family), False,
                             want_scores=False)
    return float(ll.sum())


def po_loglik_grad(theta: ThetaFull, data: Dataset, family=LinkFamily.NORMAL) -> np.ndarray:
    _, _, raw = _po_ppo_terms(theta.to_vector(), data, LinkFamily.parse(family), False)
    return raw.sum(axis=0)


def _multistart(fg, x0, n_restarts=N_RESTARTS, scale=0.25, seed=20240101):
    best = maximize(fg, x0)
    if best.converged:
        return best
    rng = np.random.default_rng(seed)
    for _ in range(n_restarts):
        cand = maximize(fg, x0 + scale * rng.standard_normal(x0.size) * np.maximum(1.0, np.abs(x0)))
        better = (cand.converged and not best.converged) or \
            (cand.converged == best.converged and cand.fun > best.fun)
        if better:
            best = cand
        if best.converged:
            break
    return best


def default_start(data: Dataset, family=LinkFamily.NORMAL) -> ThetaFull:
    """Naive fits: ``beta`` from y on x, ``betaR`` from y^R on z, rho = 0."""
    family = LinkFamily.parse(family)
    beta = fit_binary(data.x, data.require_validated().astype(float), family).x
    betaR = fit_binary(data.z, data.y_reported.astype(float), family).x
    return ThetaFull(betaR, beta, 0.0)


def _fit_partial(data: Dataset, family, start, ppo: bool, vcov_type: str) -> FitResult:
    family = LinkFamily.parse(family)
    data.require_validated()
    n = data.n
    l = data.z.shape[1]

    def fg(vec):
        ll, _, raw = _po_ppo_terms(vec, data, family, ppo)
        return float(ll.sum()) / n, raw.sum(axis=0) / n

    if start is None:
        start = default_start(data, family)
    res = _multistart(fg, start.to_vector())
    theta = ThetaFull.from_vector(res.x, l)
    _, nat, _ = _po_ppo_terms(res.x, data, family, ppo)
    flags = []
    if vcov_type == "opg":
        vcov = _opg_vcov(nat, flags)
    elif vcov_type == "hessian":
        jac = np.ones(res.x.size)
        jac[-1] = 1.0 - theta.rho ** 2
        try:
            vcov = _hessian_vcov(lambda v: fg(v)[1], res.x, n, jac)
        except np.linalg.LinAlgError:
            flags.append("singular_information")
            vcov = None
    else:
        raise ValueError(f"unknown vcov_type {vcov_type!r}")
    if not res.converged:
        flags.append("not_converged")
    if abs(theta.rho) > 0.999:
        flags.append("rho_near_boundary")
    names = ([f"betaR:{nm}" for nm in data.z_names] + [f"beta:{nm}" for nm in data.x_names]
             + ["rho"])
    params = np.concatenate([theta.betaR, theta.beta, [theta.rho]])
    return FitResult(Estimator.PPO_MLE if ppo else Estimator.PO_MLE, params, names,
                     res.fun * n, vcov, res.converged, res.iterations, res.gradient_norm,
                     n, family, theta=theta, flags=flags, trace=res.trace, scores=nat)


def fit_ppo_mle(data: Dataset, family=LinkFamily.NORMAL, start: Optional[ThetaFull] = None,
                vcov_type: str = "opg") -> FitResult:
    """Maximise the PPO log-likelihood; see :func:`ppo_loglik`."""
    return _fit_partial(data, family, start, True, vcov_type)


def fit_po_mle(data: Dataset, family=LinkFamily.NORMAL, start: Optional[ThetaFull] = None,
               vcov_type: str = "opg") -> FitResult:
    """Maximise the PO log-likelihood; see :func:`po_loglik`."""
    return _fit_partial(data, family, start, False, vcov_type)


def fit(data: Dataset, estimator, family=LinkFamily.NORMAL, **kwargs) -> FitResult:
    """Dispatch on an :class:`Estimator` value."""
    est = Estimator.parse(estimator)
    if est is Estimator.PROBIT_REPORTED:
        return fit_probit_naive(data, "reported", family)
    if est is Estimator.PROBIT_VALIDATED:
        return fit_probit_naive(data, "validated", family)
    if est is Estimator.PROBIT_RESTRICTED:
        return fit_probit_naive(data, "restricted", family)
    if est is Estimator.HAS:
        return fit_has(data, family, **kwargs)
    if est is Estimator.PO_MLE:
        return fit_po_mle(data, family, **kwargs)
    if est is Estimator.PPO_MLE:
        return fit_ppo_mle(data, family, **kwargs)
    raise ValueError(f"{est.value} is a semiparametric estimator; use partval.semiparam.fit_sml")


# ---------------------------------------------------------------------------
# derived quantities


def misclass_probs(theta: ThetaFull, data: Dataset, family=LinkFamily.NORMAL) -> MisclassProbs:
    """Record-level false-positive and false-negative probabilities.

    ``a0R = P(y^R=1 | y*=0) = H / (1 - F(x'b))`` and
    ``a1R = P(y^R=0 | y*=1) = (F(x'b) - G) / F(x'b)``.  Where ``F(x'b)``
    is numerically 0 or 1 the ratio is replaced by its limit, the
    conditional probability given ``eps* = x'b``, and the record is flagged.
    """
    family = LinkFamily.parse(family)
    a = data.z @ theta.betaR
    b = data.x @ theta.beta
    rho = theta.rho
    F = dist.marginal_cdf(family, b)
    S = dist.marginal_sf(family, b)
    P, Q, R = dist.cell_probs(family, a, b, rho)
    # P(eps > a, eps* < b) = F - G, computed directly
    if family is LinkFamily.NORMAL:
        fn_joint = dist.bvn_cdf(-a, b, -rho)
    else:
        la, lb, u, v, den = dist._amh_parts(a, b, rho)
        fn_joint = lb * u * (1.0 - rho * v) / den
    small = 1e-300
    with np.errstate(invalid="ignore", divide="ignore"):
        a0 = np.where(S > small, Q / np.maximum(S, small), np.nan)
        a1 = np.where(F > small, fn_joint / np.maximum(F, small), np.nan)
    flagged = ~(S > small) | ~(F > small)
    if flagged.any():
        # limits: P(eps > a | eps* = b) = -dH/db / f(b), (f(b) - dG/db) / f(b)
        if family is LinkFamily.NORMAL:
            # closed form, since the density itself underflows far in the tails
            lim0 = lim1 = dist.marginal_cdf(family, (rho * b - a) / np.sqrt(1.0 - rho * rho))
        else:
            (Pa, Pb, Pr), (Qa, Qb, Qr) = dist.cell_probs_grad(family, a, b, rho)
            f = dist.marginal_pdf(family, b)
            with np.errstate(invalid="ignore", divide="ignore"):
                lim0 = np.where(f > 0, -Qb / f, 0.0)
                lim1 = np.where(f > 0, 1.0 - Pb / f, 0.0)
        a0 = np.where(np.isnan(a0), lim0, a0)
        a1 = np.where(np.isnan(a1), lim1, a1)
    return MisclassProbs(np.clip(a0, 0.0, 1.0), np.clip(a1, 0.0, 1.0), flagged)


def marginal_effects(fit_result: FitResult, data: Dataset, family=None) -> MarginalEffects:
    """Effects ``f(x'b) b_j`` on true participation and predictions ``F(x'b)``."""
    family = LinkFamily.parse(family if family is not None else fit_result.family)
    beta = fit_result.beta
    t = data.x @ beta
    dens = dist.marginal_pdf(family, t)
    per = dens[:, None] * beta[None, :]
    return MarginalEffects(per, per.mean(axis=0), dist.marginal_cdf(family, t))
