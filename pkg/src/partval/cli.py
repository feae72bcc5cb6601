"""Command-line entry point.

Subcommands::

    partval calibrate --design design.json --out out/
    partval simulate  --design design.json --out out/ [--seed S]
    partval fit       --estimator ppo_mle --data d.csv --spec cols.json --out out/
    partval bias      --design design.json --estimator naive_validated --out out/
    partval sml       --data d.csv --spec cols.json [--variant po] --out out/
    partval mc        --config mc.json --out out/ [--workers W]

Every run writes its results and a ``manifest.json`` (effective
configuration, its SHA-256, seed, package versions and output checksums)
to ``--out``.  No timestamps are recorded, so identical inputs give
byte-identical outputs.  Exit codes: 0 success, 1 usage or configuration
error, 2 data or validation error, 3 numerical non-convergence.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dgp import CalibrationError, DesignConfig, calibrated, simulate
from .dist import LinkFamily
from .io import ColumnSpec, DataError, cluster_robust_vcov, export_csv, load_csv

log = logging.getLogger("partval")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NONCONV = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _dumps(obj) -> str:
    # json uses repr for floats: shortest string that round-trips exactly
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _versions() -> dict:
    import numba
    import scipy
    return {"partval": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "numba": numba.__version__}


class _Run:
    """Collects outputs of one command and writes the manifest last."""

    def __init__(self, out_dir, command: str):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.files = {}

    def write(self, name: str, text: str) -> Path:
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        self.files[name] = _sha256(text.encode())
        return path

    def register(self, path: Path) -> None:
        self.files[str(path.relative_to(self.out))] = _sha256(path.read_bytes())

    def manifest(self, config: dict, seed, status: str) -> None:
        canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
        self.write("manifest.json", _dumps({
            "command": self.command,
            "config": config,
            "config_sha256": _sha256(canon.encode()),
            "seed": seed,
            "status": status,
            "versions": _versions(),
            "outputs": dict(sorted(self.files.items())),
        }))


def _read_json(path, what: str) -> dict:
    if path is None:
        raise UsageError(f"--{what} is required")
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"{what} file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} file {path} is not valid JSON: {exc}") from None


def _design(args) -> DesignConfig:
    src = args.design or args.config
    d = _read_json(src, "design")
    d = d.get("design", d)
    try:
        design = DesignConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid design configuration: {exc}") from None
    if args.seed is not None:
        design = design.replace(seed=args.seed)
    if args.family is not None:
        design = design.replace(family=args.family)
    return design


def _dataset(args):
    if args.data is None or args.spec is None:
        raise UsageError("--data and --spec are required")
    spec = ColumnSpec.from_dict(_read_json(args.spec, "spec"))
    if not Path(args.data).exists():
        raise DataError(f"data file not found: {args.data}")
    return spec, load_csv(args.data, spec)


# ---------------------------------------------------------------------------
# commands


def cmd_calibrate(args) -> int:
    design = calibrated(_design(args))
    run = _Run(args.out, "calibrate")
    run.write("design.json", design.to_json() + "\n")
    run.manifest(design.to_dict(), design.seed, "ok")
    return EXIT_OK


def cmd_simulate(args) -> int:
    design = calibrated(_design(args))
    sim = simulate(design)
    run = _Run(args.out, "simulate")
    data = sim.to_dataset()
    spec = export_csv(data, run.out / "data.csv",
                      extra={"y_star": sim.y_star, "misreport": sim.d})
    run.register(run.out / "data.csv")
    run.write("spec.json", _dumps(spec.to_dict()))
    run.write("design.json", design.to_json() + "\n")
    fn, fp = sim.rates()
    run.write("rates.json", _dumps({"fn_rate": fn, "fp_rate": fp, "n": sim.n}))
    run.manifest(design.to_dict(), design.seed, "ok")
    return EXIT_OK


def cmd_fit(args) -> int:
    from .estimators import Estimator, fit, marginal_effects, misclass_probs
    if args.estimator is None:
        raise UsageError("--estimator is required")
    try:
        est = Estimator.parse(args.estimator)
    except ValueError:
        raise UsageError(f"unknown estimator {args.estimator!r}") from None
    if est in (Estimator.PPO_SML, Estimator.PO_SML):
        raise UsageError("kernel estimators are run with the 'sml' subcommand")
    family = LinkFamily.parse(args.family or "normal")
    spec, data = _dataset(args)
    res = fit(data, est, family)
    out = res.to_dict()
    me = marginal_effects(res, data, family)
    out["marginal_effects"] = {"average": me.average.tolist(),
                               "mean_predicted": float(me.predicted.mean())}
    if res.theta is not None:
        mp = misclass_probs(res.theta, data, family)
        out["misclassification"] = {"mean_a0R": float(mp.a0R.mean()),
                                    "mean_a1R": float(mp.a1R.mean()),
                                    "flagged": int(mp.flagged.sum())}
    if data.cluster_ids is not None and res.scores is not None:
        vc = cluster_robust_vcov(res, data)
        out["cluster_robust_vcov"] = vc.tolist()
        out["cluster_robust_std_errors"] = np.sqrt(np.clip(np.diag(vc), 0, None)).tolist()
    run = _Run(args.out, "fit")
    run.write("fit.json", _dumps(out))
    run.write("fit_row.json", _dumps(res.to_row()))
    config = {"estimator": est.value, "family": family.value, "spec": spec.to_dict(),
              "data_sha256": _sha256(Path(args.data).read_bytes())}
    status = "ok" if res.converged else "not_converged"
    run.manifest(config, None, status)
    return EXIT_OK if res.converged else EXIT_NONCONV


def cmd_bias(args) -> int:
    from .bias import BiasEstimator, pseudo_true_params, verify_bias_identity
    try:
        est = BiasEstimator.parse(args.estimator or "naive_validated")
    except ValueError:
        raise UsageError(f"unknown bias estimator {args.estimator!r}") from None
    design = calibrated(_design(args))
    rep = pseudo_true_params(design, est, args.oracle_n)
    out = rep.to_dict()
    if args.verify:
        resid, frac = verify_bias_identity(design, est, args.oracle_n, report=rep,
                                           return_point=True)
        out["identity_residual"] = resid
        out["identity_residual_relative"] = resid / float(np.linalg.norm(rep.bias))
        out["identity_segment_fraction"] = frac
    run = _Run(args.out, "bias")
    run.write("bias.json", _dumps(out))
    config = {"design": design.to_dict(), "estimator": est.value,
              "oracle_n": args.oracle_n, "verify": bool(args.verify)}
    run.manifest(config, design.seed, "ok" if rep.converged else "not_converged")
    return EXIT_OK if rep.converged else EXIT_NONCONV


def cmd_sml(args) -> int:
    from .semiparam import KernelConfig, SmlVariant, fit_sml
    try:
        variant = SmlVariant.parse(args.variant or args.estimator or "ppo")
    except ValueError:
        raise UsageError(f"unknown kernel estimator variant {args.variant!r}") from None
    kcfg = KernelConfig()
    if args.config:
        raw = _read_json(args.config, "config")
        try:
            kcfg = KernelConfig.from_dict(raw.get("kernel", raw))
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid kernel configuration: {exc}") from None
    family = LinkFamily.parse(args.family or "normal")
    seed = 0 if args.seed is None else args.seed
    spec, data = _dataset(args)
    res = fit_sml(data, kcfg, variant, seed=seed, family=family)
    run = _Run(args.out, "sml")
    run.write("sml.json", _dumps(res.to_dict()))
    config = {"variant": variant.value, "kernel": kcfg.to_dict(), "family": family.value,
              "spec": spec.to_dict(), "data_sha256": _sha256(Path(args.data).read_bytes())}
    run.manifest(config, seed, "ok" if res.converged else "not_converged")
    return EXIT_OK if res.converged else EXIT_NONCONV


def cmd_mc(args) -> int:
    from .montecarlo import GRID_FN, GRID_FP, MCConfig, default_workers, run_grid, run_mc
    raw = dict(_read_json(args.config, "config"))
    grid = raw.pop("grid", None)
    try:
        cfg = MCConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid Monte Carlo configuration: {exc}") from None
    if args.seed is not None:
        cfg = cfg.replace(master_seed=args.seed)
    if args.family is not None:
        cfg = cfg.replace(design=cfg.design.replace(family=args.family))
    workers = args.workers if args.workers is not None else default_workers()
    cfg = cfg.replace(parallel_workers=workers)
    run = _Run(args.out, "mc")
    if grid is None:
        summ = run_mc(cfg, out_dir=run.out)
        names = ["summary.json", "summary.csv"]
        n_fail = sum(summ.failures.values())
    else:
        if grid == "table1":
            cells = [(fn, fp) for fn in GRID_FN for fp in GRID_FP]
        else:
            try:
                cells = [(float(fn), float(fp)) for fn, fp in grid]
            except (TypeError, ValueError):
                raise UsageError("'grid' must be \"table1\" or a list of [fn, fp] pairs") from None
        done = run_grid(cfg, run.out, cells,
                        progress=lambda fn, fp, reused: log.info(
                            "cell FN=%.2f FP=%.2f %s", fn, fp, "reused" if reused else "done"))
        names = ["table1.csv", "table1.txt", "table2.csv"]
        for fn, fp in cells:
            cell = f"fn{round(fn * 100):02d}_fp{round(fp * 100):02d}"
            names += [f"{cell}/summary.json", f"{cell}/summary.csv"]
        n_fail = sum(sum(s.failures.values()) for s in done.values())
    for nm in names:
        run.register(run.out / nm)
    config = cfg.to_dict()
    # worker count does not affect results; keep it out of the hash
    config.pop("parallel_workers")
    if grid is not None:
        config["grid"] = grid
    run.manifest(config, cfg.master_seed, "ok")
    log.info("%d failed fits recorded", n_fail)
    return EXIT_OK


COMMANDS = {"calibrate": cmd_calibrate, "simulate": cmd_simulate, "fit": cmd_fit,
            "bias": cmd_bias, "sml": cmd_sml, "mc": cmd_mc}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="partval", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="JSON configuration (design, Monte Carlo or kernel)")
    ap.add_argument("--design", help="design JSON (DesignConfig fields)")
    ap.add_argument("--data", help="input CSV")
    ap.add_argument("--spec", help="ColumnSpec JSON mapping CSV columns")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--estimator", help="estimator name")
    ap.add_argument("--variant", choices=["ppo", "po"], help="kernel estimator variant")
    ap.add_argument("--family", choices=[f.value for f in LinkFamily])
    ap.add_argument("--seed", type=int, help="overrides the configured seed")
    ap.add_argument("--workers", type=int, help="worker processes (default: available cores)")
    ap.add_argument("--oracle-n", type=int, default=200_000, help="oracle sample size for 'bias'")
    ap.add_argument("--verify", action="store_true", help="'bias': also check the bias identity")
    ap.add_argument("--verbosity", choices=["quiet", "normal", "debug"], default="normal")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    level = {"quiet": logging.WARNING, "normal": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=level[args.verbosity], format="%(levelname)s: %(message)s",
                        stream=sys.stderr)
    if args.workers is not None and args.workers < 1:
        print("error: --workers must be positive", file=sys.stderr)
        return EXIT_USAGE
    try:
        code = COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CalibrationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if code == EXIT_NONCONV:
        print("warning: estimation did not converge; results written with flags",
              file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
