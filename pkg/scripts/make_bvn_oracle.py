"""Freeze 2-D adaptive-quadrature values of the bivariate normal CDF.

Integrates the density with ``scipy.integrate.dblquad`` (absolute
tolerance 1e-14) on the grid a, b in {-4, -2, -1, 0, 1, 2, 4} and
rho in {-0.95, -0.8, -0.5, 0, 0.5, 0.8, 0.95}, and writes
``tests/data/bvn_oracle.json``.  The lower limit -12 truncates less than
1e-32 of mass.
"""
from __future__ import annotations

import itertools
import json
import sys
from pathlib import Path

import numpy as np
from scipy import integrate

GRID = (-4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0)
RHOS = (-0.95, -0.8, -0.5, 0.0, 0.5, 0.8, 0.95)
LOWER = -12.0


def bvn_quadrature(a: float, b: float, rho: float) -> float:
    s2 = 1.0 - rho * rho
    c = 1.0 / (2.0 * np.pi * np.sqrt(s2))

    def dens(y, x):
        return c * np.exp(-(x * x - 2.0 * rho * x * y + y * y) / (2.0 * s2))

    val, _ = integrate.dblquad(dens, LOWER, a, LOWER, b, epsabs=1e-14, epsrel=1e-13)
    return float(val)


def main(argv=None) -> int:
    out = Path(argv[0] if argv else Path(__file__).resolve().parents[1] / "tests/data/bvn_oracle.json")
    rows = [[a, b, r, bvn_quadrature(a, b, r)] for a, b, r in itertools.product(GRID, GRID, RHOS)]
    out.write_text(json.dumps({"columns": ["a", "b", "rho", "cdf"], "rows": rows}, indent=1) + "\n")
    print(f"wrote {len(rows)} values to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
