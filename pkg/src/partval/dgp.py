"""Simulation of true participation, misreporting and partial validation.

True participation is ``y* = 1(x'beta0 - eps* > 0)``.  Misreporting is
``d = 1(z'betaR - eps < tau)`` where the threshold depends on the true
status (``tau_fn`` for participants, ``tau_fp`` for non-participants), so
the false-negative and false-positive rates can be set separately.  The
reported outcome flips ``y*`` when ``d = 1`` and the validated outcome is
``y = y* (1 - d)``.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize, special

from . import dist
from .dist import LinkFamily
from .io import Dataset

__all__ = [
    "CalibrationError",
    "DesignConfig",
    "SimulatedDataset",
    "draw_covariates",
    "simulate",
    "calibrate_thresholds",
    "calibrated",
    "misreport_rates",
    "COVARIATE_LAWS",
]

COVARIATE_LAWS = ("std_normal_iid", "std_normal_iid_dummy")


class CalibrationError(RuntimeError):
    pass


def _json_float(v):
    v = float(v)
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


@dataclass(frozen=True)
class DesignConfig:
    """Full description of one simulation design.

    The default reproduces the baseline design: four iid standard normal
    participation covariates with no intercept, and a reporting index on
    ``(1, x1, x2, x3, z4)`` with ``z4`` an excluded standard normal.
    ``covariate_law="std_normal_iid_dummy"`` appends a Bernoulli(1/2)
    dummy to ``x``.
    """

    beta0: tuple = (2.0, -0.5, 0.5, 1.0)
    betaR: tuple = (1.0, 0.5, -1.5, 2.5, 1.0)
    rho: float = -0.8
    family: LinkFamily = LinkFamily.NORMAL
    n: int = 5000
    covariate_law: str = "std_normal_iid"
    target_fn_rate: float = 0.05
    target_fp_rate: float = 0.05
    tau_fn: float = float("nan")
    tau_fp: float = float("nan")
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "beta0", tuple(float(b) for b in self.beta0))
        object.__setattr__(self, "betaR", tuple(float(b) for b in self.betaR))
        object.__setattr__(self, "family", LinkFamily.parse(self.family))
        object.__setattr__(self, "tau_fn", float(self.tau_fn))
        object.__setattr__(self, "tau_fp", float(self.tau_fp))
        if not -1.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (-1, 1)")
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.covariate_law not in COVARIATE_LAWS:
            raise ValueError(f"unknown covariate law {self.covariate_law!r}")
        k = 5 if self.covariate_law == "std_normal_iid_dummy" else 4
        if len(self.beta0) != k:
            raise ValueError(f"beta0 must have {k} entries for covariate law {self.covariate_law!r}")
        if len(self.betaR) != 5:
            raise ValueError("betaR must have 5 entries (intercept, x1, x2, x3, z4)")
        if not (0 <= self.seed < 2 ** 64):
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def calibrated(self) -> bool:
        return not (math.isnan(self.tau_fn) or math.isnan(self.tau_fp))

    def replace(self, **changes) -> "DesignConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["family"] = self.family.value
        d["beta0"] = list(self.beta0)
        d["betaR"] = list(self.betaR)
        for key in ("tau_fn", "tau_fp"):
            v = getattr(self, key)
            d[key] = None if math.isnan(v) else _json_float(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DesignConfig":
        d = dict(d)
        for key in ("tau_fn", "tau_fp"):
            if d.get(key) is None:
                d[key] = float("nan")
            else:
                d[key] = float(d[key])
        return cls(**d)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_json(cls, path) -> "DesignConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class SimulatedDataset:
    x: np.ndarray
    z: np.ndarray
    y_star: np.ndarray
    d: np.ndarray
    y_reported: np.ndarray
    y_validated: np.ndarray
    x_names: tuple = ()
    z_names: tuple = ()
    continuous_columns: tuple = field(default=())

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def t(self) -> np.ndarray:
        """Truthfulness of affirmative reports; -1 where y_reported = 0."""
        return np.where(self.y_reported == 1, self.y_validated, -1).astype(np.int8)

    def to_dataset(self) -> Dataset:
        return Dataset(x=self.x, z=self.z, y_reported=self.y_reported,
                       y_validated=self.y_validated, x_names=self.x_names,
                       z_names=self.z_names, continuous_columns=self.continuous_columns)

    def rates(self) -> tuple[float, float]:
        """Empirical (false-negative, false-positive) misreport rates."""
        pos = self.y_star == 1
        fn = float(self.d[pos].mean()) if pos.any() else float("nan")
        fp = float(self.d[~pos].mean()) if (~pos).any() else float("nan")
        return fn, fp


def _names(law):
    x_names = ("x1", "x2", "x3", "x4")
    if law == "std_normal_iid_dummy":
        x_names = x_names + ("dummy",)
    return x_names, ("const", "x1", "x2", "x3", "z4")


def draw_covariates(design: DesignConfig, n: int, rng: np.random.Generator):
    """Return ``(x, z)`` for ``n`` records under the design's covariate law."""
    x = rng.standard_normal((n, 4))
    z4 = rng.standard_normal(n)
    z = np.column_stack([np.ones(n), x[:, :3], z4])
    if design.covariate_law == "std_normal_iid_dummy":
        dummy = (rng.random(n) < 0.5).astype(float)
        x = np.column_stack([x, dummy])
    return x, z


def draw_errors(family: LinkFamily, rho: float, n: int, rng: np.random.Generator):
    """Draw ``(eps_star, eps)`` from the family's joint law."""
    family = LinkFamily.parse(family)
    if family is LinkFamily.NORMAL:
        e1 = rng.standard_normal(n)
        e2 = rng.standard_normal(n)
        return e1, rho * e1 + math.sqrt(1.0 - rho * rho) * e2
    # AMH copula: conditional inverse of dC/du in closed form (quadratic in v)
    u = rng.random(n)
    w = rng.random(n)
    a_ = 1.0 - rho * (1.0 - u)
    b_ = rho * (1.0 - u)
    qa = w * b_ * b_ - rho
    qb = 2.0 * w * a_ * b_ - (1.0 - rho)
    qc = w * a_ * a_
    v = 2.0 * qc / (-qb + np.sqrt(qb * qb - 4.0 * qa * qc))
    v = np.clip(v, np.finfo(float).tiny, 1.0 - np.finfo(float).eps)
    return special.logit(u), special.logit(v)


def simulate(config: DesignConfig) -> SimulatedDataset:
    """Draw one sample of size ``config.n``; deterministic in ``config.seed``."""
    if not config.calibrated:
        raise CalibrationError("design thresholds are not set; run calibrate_thresholds first")
    rng = np.random.default_rng(config.seed)
    n = config.n
    x, z = draw_covariates(config, n, rng)
    e_star, e = draw_errors(config.family, config.rho, n, rng)
    y_star = (x @ np.asarray(config.beta0) - e_star > 0).astype(np.int8)
    tau = np.where(y_star == 1, config.tau_fn, config.tau_fp)
    d = (z @ np.asarray(config.betaR) - e < tau).astype(np.int8)
    y_rep = (y_star * (1 - d) + (1 - y_star) * d).astype(np.int8)
    y_val = (y_star * y_rep).astype(np.int8)
    x_names, z_names = _names(config.covariate_law)
    continuous = ("x1", "x2", "x3", "x4", "z4")
    for arr in (x, z, y_star, d, y_rep, y_val):
        arr.setflags(write=False)
    return SimulatedDataset(x=x, z=z, y_star=y_star, d=d, y_reported=y_rep,
                            y_validated=y_val, x_names=x_names, z_names=z_names,
                            continuous_columns=continuous)


def misreport_rates(design: DesignConfig, x, z, tau_fn, tau_fp):
    """Population (FN, FP) rates on a covariate sample, integrating the errors.

    Each record contributes its exact conditional probabilities, so only the
    covariate draw carries sampling noise.
    """
    b = x @ np.asarray(design.beta0)
    a = z @ np.asarray(design.betaR)
    F = dist.marginal_cdf(design.family, b)
    fn = np.nan
    fp = np.nan
    if tau_fn is not None:
        # P(d=1, y*=1) = F(b) - G(a - tau, b)
        g = dist.joint_cdf(design.family, a - tau_fn, b, design.rho)
        fn = float(np.mean(F - g) / np.mean(F))
    if tau_fp is not None:
        h = dist.upper_tail(design.family, a - tau_fp, b, design.rho)
        fp = float(np.mean(h) / np.mean(1.0 - F))
    return fn, fp


def calibrate_thresholds(config: DesignConfig, calib_n: int = 200_000,
                         tol: float = 1e-10) -> tuple[float, float]:
    """Thresholds ``(tau_fn, tau_fp)`` hitting the design's target rates.

    The rates are monotone in each threshold; each is solved with Brent's
    method on a calibration covariate sample drawn from a stream separate
    from the simulation seeds.
    """
    targets = (config.target_fn_rate, config.target_fp_rate)
    for t in targets:
        if not 0.0 < t < 0.5:
            raise CalibrationError(f"target rate {t} outside (0, 0.5)")
    rng = np.random.default_rng([config.seed, 0xCA1B])
    x, z = draw_covariates(config, calib_n, rng)

    def solve(which, target):
        def gap(tau):
            fn, fp = misreport_rates(config, x, z,
                                     tau if which == 0 else None,
                                     tau if which == 1 else None)
            return (fn if which == 0 else fp) - target

        lo, hi = -5.0, 5.0
        for _ in range(60):
            if gap(lo) < 0:
                break
            lo *= 2.0
        for _ in range(60):
            if gap(hi) > 0:
                break
            hi *= 2.0
        glo, ghi = gap(lo), gap(hi)
        if not (glo < 0 < ghi):
            raise CalibrationError(f"target rate {target} cannot be bracketed")
        return optimize.brentq(gap, lo, hi, xtol=tol)

    return solve(0, targets[0]), solve(1, targets[1])


def calibrated(config: DesignConfig, calib_n: int = 200_000) -> DesignConfig:
    """Return ``config`` with thresholds filled in (no-op if already set)."""
    if config.calibrated:
        return config
    tau_fn, tau_fp = calibrate_thresholds(config, calib_n)
    return config.replace(tau_fn=tau_fn, tau_fp=tau_fp)
