"""Monte Carlo harness: repeated simulation and estimation over a design grid.

Replication ``r`` of a cell simulates with seed ``master_seed + r`` and
fits every requested estimator on that same sample.  Results are reduced
in replication order, so a summary depends only on its configuration and
not on the number of worker processes.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dgp import DesignConfig, calibrated, misreport_rates, draw_covariates, simulate
from .estimators import Estimator, fit
from .semiparam import KernelConfig, SmlVariant, fit_sml

__all__ = [
    "MCConfig",
    "MCSummary",
    "run_replication",
    "run_mc",
    "table1_grid",
    "summarize_table1",
    "run_grid",
    "write_table2",
    "TABLE1_ESTIMATORS",
    "GRID_FN",
    "GRID_FP",
]

TABLE1_ESTIMATORS = (
    Estimator.PROBIT_REPORTED,
    Estimator.PROBIT_VALIDATED,
    Estimator.PROBIT_RESTRICTED,
    Estimator.HAS,
    Estimator.PO_MLE,
    Estimator.PPO_MLE,
)
GRID_FN = (0.05, 0.10, 0.20)
GRID_FP = (0.05, 0.20)
_SML = {Estimator.PPO_SML: SmlVariant.PPO, Estimator.PO_SML: SmlVariant.PO}


@dataclass(frozen=True)
class MCConfig:
    design: DesignConfig = field(default_factory=DesignConfig)
    replications: int = 250
    n: int = 5000
    estimators: tuple = TABLE1_ESTIMATORS
    master_seed: int = 0
    parallel_workers: int = 1
    kernel: KernelConfig = field(default_factory=KernelConfig)

    def __post_init__(self):
        object.__setattr__(self, "estimators", tuple(Estimator.parse(e) for e in self.estimators))
        if self.replications < 1 or self.n < 1 or self.parallel_workers < 1:
            raise ValueError("replications, n and parallel_workers must be positive")
        if not 0 <= self.master_seed < 2 ** 64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")

    def replace(self, **changes) -> "MCConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "design": self.design.to_dict(),
            "replications": self.replications,
            "n": self.n,
            "estimators": [e.value for e in self.estimators],
            "master_seed": self.master_seed,
            "parallel_workers": self.parallel_workers,
            "kernel": self.kernel.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MCConfig":
        d = dict(d)
        if "design" in d:
            d["design"] = DesignConfig.from_dict(d["design"])
        if "kernel" in d:
            d["kernel"] = KernelConfig.from_dict(d["kernel"])
        if "estimators" in d:
            d["estimators"] = tuple(d["estimators"])
        return cls(**d)


@dataclass
class MCSummary:
    design: dict
    replications: int
    estimator_names: list
    per_estimator_means: dict
    per_estimator_variances: dict
    per_estimator_cov: dict
    failures: dict
    po_ppo_variance_ratios: Optional[list]
    po_ppo_det_ratio: Optional[float]
    n_pairwise: int
    calibration_audit: dict

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    def write_csv(self, path) -> None:
        """One row per estimator and coefficient."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["estimator", "coef", "true", "mean", "variance", "failures"])
            true = self.design["beta0"]
            for name in self.estimator_names:
                means = self.per_estimator_means.get(name)
                var = self.per_estimator_variances.get(name)
                for j in range(len(true)):
                    w.writerow([name, j + 1, repr(float(true[j])),
                                "" if means is None else repr(means[j]),
                                "" if var is None else repr(var[j]),
                                self.failures.get(name, 0)])


def _fit_one(est, data, design, kernel, seed, parametric):
    if est in _SML:
        variant = _SML[est]
        start = parametric.get(Estimator.PPO_MLE if variant is SmlVariant.PPO else Estimator.PO_MLE)
        res = fit_sml(data, kernel, variant, start=start, seed=seed, family=design.family)
        return {"beta": res.theta_unit_normalized.tolist(), "converged": bool(res.converged),
                "loglik": float(res.loglik), "flags": list(res.flags)}
    res = fit(data, est, design.family)
    parametric[est] = res
    beta = res.beta
    return {"beta": beta.tolist(), "converged": bool(res.converged), "loglik": float(res.loglik),
            "se": res.beta_std_errors.tolist(), "iterations": int(res.iterations),
            "flags": list(res.flags)}


def run_replication(args) -> dict:
    """Simulate replication ``r`` and fit every estimator (process-pool entry)."""
    design_dict, r, master_seed, estimators, kernel_dict = args
    design = DesignConfig.from_dict(design_dict).replace(seed=(master_seed + r) % 2 ** 64)
    kernel = KernelConfig.from_dict(kernel_dict)
    sim = simulate(design)
    data = sim.to_dataset()
    fn, fp = sim.rates()
    out = {"replication": r, "seed": design.seed, "fn_rate": fn, "fp_rate": fp, "fits": {}}
    parametric = {}
    # parametric fits first so the kernel fits can start from them
    ordered = sorted(estimators, key=lambda e: e in _SML)
    for name in ordered:
        key = str(getattr(name, "value", name))
        try:
            est = Estimator.parse(name)
            key = est.value
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                out["fits"][key] = _fit_one(est, data, design, kernel, design.seed, parametric)
        except Exception as exc:  # recorded, not fatal
            out["fits"][key] = {"beta": None, "converged": False, "error": repr(exc)}
    return out


def _det_ratio(cov_po, cov_ppo):
    sign_po, logdet_po = np.linalg.slogdet(cov_po)
    sign_ppo, logdet_ppo = np.linalg.slogdet(cov_ppo)
    if sign_po <= 0 or sign_ppo <= 0:
        return None
    return float(math.exp(logdet_po - logdet_ppo))


def _summarize(design: DesignConfig, cfg: MCConfig, reps: list, audit: dict) -> MCSummary:
    names = [e.value for e in cfg.estimators]
    means, variances, covs, failures = {}, {}, {}, {}
    for name in names:
        good = [r["fits"][name]["beta"] for r in reps
                if r["fits"].get(name, {}).get("converged") and r["fits"][name]["beta"] is not None]
        failures[name] = len(reps) - len(good)
        if not good:
            means[name] = variances[name] = covs[name] = None
            continue
        arr = np.asarray(good, dtype=float)
        means[name] = arr.mean(axis=0).tolist()
        if arr.shape[0] >= 2:
            cov = np.cov(arr, rowvar=False, ddof=1)
            cov = 0.5 * (cov + cov.T)
            covs[name] = cov.tolist()
            variances[name] = np.diag(cov).tolist()
        else:
            covs[name] = variances[name] = None

    ratios, det_ratio, n_pair = None, None, 0
    po, ppo = Estimator.PO_MLE.value, Estimator.PPO_MLE.value
    if po in names and ppo in names:
        pairs = [(r["fits"][po]["beta"], r["fits"][ppo]["beta"]) for r in reps
                 if r["fits"][po].get("converged") and r["fits"][ppo].get("converged")]
        n_pair = len(pairs)
        if n_pair >= 2:
            a = np.asarray([p[0] for p in pairs])
            b = np.asarray([p[1] for p in pairs])
            ca = np.cov(a, rowvar=False, ddof=1)
            cb = np.cov(b, rowvar=False, ddof=1)
            ratios = (np.diag(ca) / np.diag(cb)).tolist()
            det_ratio = _det_ratio(ca, cb)
    return MCSummary(design=design.to_dict(), replications=len(reps), estimator_names=names,
                     per_estimator_means=means, per_estimator_variances=variances,
                     per_estimator_cov=covs, failures=failures,
                     po_ppo_variance_ratios=ratios, po_ppo_det_ratio=det_ratio,
                     n_pairwise=n_pair, calibration_audit=audit)


def _audit(design: DesignConfig, reps: list) -> dict:
    rng = np.random.default_rng([design.seed, 0xA0D1])
    x, z = draw_covariates(design, 200_000, rng)
    pop_fn, pop_fp = misreport_rates(design, x, z, design.tau_fn, design.tau_fp)
    emp_fn = float(np.mean([r["fn_rate"] for r in reps]))
    emp_fp = float(np.mean([r["fp_rate"] for r in reps]))
    return {
        "target_fn_rate": design.target_fn_rate, "target_fp_rate": design.target_fp_rate,
        "tau_fn": design.tau_fn, "tau_fp": design.tau_fp,
        "population_fn_rate": pop_fn, "population_fp_rate": pop_fp,
        "mean_replication_fn_rate": emp_fn, "mean_replication_fp_rate": emp_fp,
        "within_0.01": bool(abs(emp_fn - design.target_fn_rate) <= 0.01
                            and abs(emp_fp - design.target_fp_rate) <= 0.01),
    }


def run_mc(cfg: MCConfig, out_dir=None, progress=None) -> MCSummary:
    """Run every replication of one design cell and summarise.

    With ``out_dir`` the per-replication JSON files, ``summary.json`` and
    ``summary.csv`` are written there.  ``progress`` is called with the
    number of finished replications.
    """
    design = calibrated(cfg.design.replace(n=cfg.n))
    jobs = [(design.to_dict(), r, cfg.master_seed, [e.value for e in cfg.estimators],
             cfg.kernel.to_dict()) for r in range(cfg.replications)]
    reps = []
    if cfg.parallel_workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.parallel_workers) as pool:
            for i, rep in enumerate(pool.map(run_replication, jobs)):
                reps.append(rep)
                if progress:
                    progress(i + 1)
    else:
        for i, job in enumerate(jobs):
            reps.append(run_replication(job))
            if progress:
                progress(i + 1)
    summary = _summarize(design, cfg, reps, _audit(design, reps))
    if out_dir is not None:
        out = Path(out_dir)
        (out / "replications").mkdir(parents=True, exist_ok=True)
        for rep in reps:
            path = out / "replications" / f"rep_{rep['replication']:04d}.json"
            path.write_text(json.dumps(rep, indent=1, sort_keys=True) + "\n")
        summary.to_json(out / "summary.json")
        summary.write_csv(out / "summary.csv")
    return summary


def table1_grid(base: DesignConfig = DesignConfig()) -> list:
    """The six (FN, FP) design cells, uncalibrated."""
    return [base.replace(target_fn_rate=fn, target_fp_rate=fp, tau_fn=float("nan"),
                         tau_fp=float("nan"))
            for fn in GRID_FN for fp in GRID_FP]


def _fmt(v, width=9):
    return f"{v:>{width}.3f}" if v is not None else " " * (width - 1) + "-"


def summarize_table1(cells: dict, csv_path=None, estimators=TABLE1_ESTIMATORS, grid=None):
    """Assemble grid summaries into the Table-1 layout.

    ``cells`` maps ``(fn_target, fp_target)`` to :class:`MCSummary`;
    ``grid`` lists the cells to report (default: the full six-cell grid).
    Returns ``(rows, text)``; rows are dicts with keys ``fn``, ``fp``,
    ``coef``, ``true`` and one per estimator.  Missing cells give blank
    estimator entries and a warning.
    """
    names = [Estimator.parse(e).value for e in estimators]
    rows = []
    base_beta = DesignConfig().beta0
    if grid is None:
        grid = [(fn, fp) for fn in GRID_FN for fp in GRID_FP]
    for fn, fp in grid:
        summ = cells.get((fn, fp))
        if summ is None:
            warnings.warn(f"grid cell FN={fn} FP={fp} is missing", RuntimeWarning, stacklevel=2)
            true = base_beta
        else:
            true = summ.design["beta0"]
        for j in range(len(true)):
            row = {"fn": fn, "fp": fp, "coef": j + 1, "true": float(true[j])}
            for nm in names:
                m = None if summ is None else summ.per_estimator_means.get(nm)
                row[nm] = None if m is None else float(m[j])
            rows.append(row)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fn", "fp", "coef", "true"] + names)
            for row in rows:
                w.writerow([row["fn"], row["fp"], row["coef"], repr(row["true"])]
                           + ["" if row[nm] is None else repr(row[nm]) for nm in names])
    head = f"{'FN':>5} {'FP':>5} {'true':>6} " + " ".join(f"{nm[:9]:>9}" for nm in names)
    lines = [head, "-" * len(head)]
    for row in rows:
        lines.append(f"{row['fn']:>5.2f} {row['fp']:>5.2f} {row['true']:>6.2f} "
                     + " ".join(_fmt(row[nm]) for nm in names))
    return rows, "\n".join(lines)


def write_table2(cells: dict, path) -> None:
    """PO/PPO per-coefficient variance ratios and determinant ratio per cell."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        k = max((len(s.po_ppo_variance_ratios) for s in cells.values()
                 if s.po_ppo_variance_ratios), default=4)
        w.writerow(["fn", "fp"] + [f"var_ratio_{j + 1}" for j in range(k)]
                   + ["det_ratio", "n_pairwise"])
        for (fn, fp), s in sorted(cells.items()):
            ratios = s.po_ppo_variance_ratios or [None] * k
            det = s.po_ppo_det_ratio
            w.writerow([fn, fp] + ["" if r is None else repr(r) for r in ratios]
                       + ["" if det is None else repr(det), s.n_pairwise])


def _cell_dir(out: Path, fn: float, fp: float) -> Path:
    return out / f"fn{round(fn * 100):02d}_fp{round(fp * 100):02d}"


def run_grid(cfg: MCConfig, out_dir, cells=None, progress=None) -> dict:
    """Run :func:`run_mc` on each (FN, FP) cell and write the grid tables.

    ``cfg.design`` supplies everything except the target rates.  A cell
    whose ``summary.json`` was written by the same configuration is loaded
    instead of rerun.  Writes ``table1.csv``, ``table1.txt`` and
    ``table2.csv`` under ``out_dir`` and returns ``{(fn, fp): MCSummary}``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = [(fn, fp) for fn in GRID_FN for fp in GRID_FP] if cells is None else cells
    done = {}
    for fn, fp in cells:
        design = cfg.design.replace(target_fn_rate=fn, target_fp_rate=fp,
                                    tau_fn=float("nan"), tau_fp=float("nan"))
        cell_cfg = cfg.replace(design=design)
        cdir = _cell_dir(out, fn, fp)
        path = cdir / "summary.json"
        cached = None
        if path.exists():
            cached = MCSummary(**json.loads(path.read_text()))
            expect = calibrated(design.replace(n=cfg.n)).to_dict()
            first = cdir / "replications" / "rep_0000.json"
            seed_ok = first.exists() and json.loads(first.read_text())["seed"] == cfg.master_seed
            if (not seed_ok or cached.replications != cfg.replications or cached.design != expect
                    or cached.estimator_names != [e.value for e in cfg.estimators]):
                cached = None
        done[(fn, fp)] = cached if cached is not None else run_mc(cell_cfg, out_dir=cdir)
        if progress:
            progress(fn, fp, cached is not None)
    _, text = summarize_table1(done, csv_path=out / "table1.csv", estimators=cfg.estimators,
                               grid=cells)
    (out / "table1.txt").write_text(text + "\n")
    write_table2(done, out / "table2.csv")
    return done


def default_workers() -> int:
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1)
