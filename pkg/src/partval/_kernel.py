"""Leave-one-out bivariate Gaussian Nadaraya-Watson sums (numba).

All routines take the two index vectors ``a = z'bR`` and ``b = x'b`` and
return, for every record ``i``, sums over ``j != i`` of
``K_ij = exp(-((a_i - a_j)^2 + (b_i - b_j)^2) / (2 h^2))`` times the
outcomes.  Records are visited in ``a`` order and pairs further apart
than ``cut`` in ``a`` or ``b`` are skipped; records whose denominator is
small enough for the skipped mass to matter are recomputed exactly.
"""
from __future__ import annotations

import numpy as np
from numba import njit

# relative contribution of a skipped pair is below exp(-CUT_SD**2 / 2)
CUT_SD = 10.0
# denominators below this are recomputed without the cutoff
EXACT_BELOW = 1e-6


@njit(cache=True)
def _sums_sorted(a, b, ys, h, cut):
    n = a.shape[0]
    m = ys.shape[1]
    den = np.zeros(n)
    num = np.zeros((n, m))
    inv2h2 = 0.5 / (h * h)
    for i in range(n):
        for j in range(i + 1, n):
            da = a[j] - a[i]
            if da > cut:
                break
            db = b[j] - b[i]
            if db > cut or db < -cut:
                continue
            k = np.exp(-(da * da + db * db) * inv2h2)
            den[i] += k
            den[j] += k
            for c in range(m):
                num[i, c] += k * ys[j, c]
                num[j, c] += k * ys[i, c]
    return den, num


@njit(cache=True)
def _sums_exact_rows(rows, a, b, ys, h):
    n = a.shape[0]
    m = ys.shape[1]
    inv2h2 = 0.5 / (h * h)
    den = np.zeros(rows.shape[0])
    num = np.zeros((rows.shape[0], m))
    for r in range(rows.shape[0]):
        i = rows[r]
        for j in range(n):
            if j == i:
                continue
            da = a[j] - a[i]
            db = b[j] - b[i]
            k = np.exp(-(da * da + db * db) * inv2h2)
            den[r] += k
            for c in range(m):
                num[r, c] += k * ys[j, c]
    return den, num


@njit(cache=True)
def _grad_sums_sorted(a, b, zf, xf, ys, h, cut):
    """Sums needed for the index derivatives of the kernel averages.

    For each record and outcome column c (plus a column of ones):
    ``SA[i, c] = sum_j K_ij (a_i - a_j) y_jc`` and
    ``VA[i, c, :] = sum_j K_ij (a_i - a_j) y_jc z_j``, likewise for b with x.
    """
    n = a.shape[0]
    m = ys.shape[1]
    lz = zf.shape[1]
    lx = xf.shape[1]
    den = np.zeros(n)
    num = np.zeros((n, m))
    sa = np.zeros((n, m + 1))
    sb = np.zeros((n, m + 1))
    va = np.zeros((n, m + 1, lz))
    vb = np.zeros((n, m + 1, lx))
    inv2h2 = 0.5 / (h * h)
    wi = np.empty(m + 1)
    wj = np.empty(m + 1)
    for i in range(n):
        for j in range(i + 1, n):
            da = a[i] - a[j]
            if da < -cut:
                break
            db = b[i] - b[j]
            if db > cut or db < -cut:
                continue
            k = np.exp(-(da * da + db * db) * inv2h2)
            den[i] += k
            den[j] += k
            wi[m] = 1.0
            wj[m] = 1.0
            for c in range(m):
                num[i, c] += k * ys[j, c]
                num[j, c] += k * ys[i, c]
                wi[c] = ys[j, c]
                wj[c] = ys[i, c]
            ka = k * da
            kb = k * db
            for c in range(m + 1):
                # record i sees +da with z_j; record j sees -da with z_i
                sa[i, c] += ka * wi[c]
                sa[j, c] -= ka * wj[c]
                sb[i, c] += kb * wi[c]
                sb[j, c] -= kb * wj[c]
                for d in range(lz):
                    va[i, c, d] += ka * wi[c] * zf[j, d]
                    va[j, c, d] -= ka * wj[c] * zf[i, d]
                for d in range(lx):
                    vb[i, c, d] += kb * wi[c] * xf[j, d]
                    vb[j, c, d] -= kb * wj[c] * xf[i, d]
    return den, num, sa, sb, va, vb


@njit(cache=True)
def _grad_sums_exact_rows(rows, a, b, zf, xf, ys, h):
    n = a.shape[0]
    m = ys.shape[1]
    lz = zf.shape[1]
    lx = xf.shape[1]
    nr = rows.shape[0]
    den = np.zeros(nr)
    num = np.zeros((nr, m))
    sa = np.zeros((nr, m + 1))
    sb = np.zeros((nr, m + 1))
    va = np.zeros((nr, m + 1, lz))
    vb = np.zeros((nr, m + 1, lx))
    inv2h2 = 0.5 / (h * h)
    for r in range(nr):
        i = rows[r]
        for j in range(n):
            if j == i:
                continue
            da = a[i] - a[j]
            db = b[i] - b[j]
            k = np.exp(-(da * da + db * db) * inv2h2)
            den[r] += k
            for c in range(m + 1):
                w = 1.0 if c == m else ys[j, c]
                if c < m:
                    num[r, c] += k * w
                sa[r, c] += k * da * w
                sb[r, c] += k * db * w
                for d in range(lz):
                    va[r, c, d] += k * da * w * zf[j, d]
                for d in range(lx):
                    vb[r, c, d] += k * db * w * xf[j, d]
    return den, num, sa, sb, va, vb


def loo_sums(a, b, ys, h, cut_sd=CUT_SD, return_redo=False):
    """Leave-one-out kernel denominators and numerators (original order).

    With ``return_redo`` also returns the rows recomputed without cutoff.
    """
    a = np.ascontiguousarray(a, dtype=float)
    b = np.ascontiguousarray(b, dtype=float)
    ys = np.ascontiguousarray(ys, dtype=float).reshape(a.shape[0], -1)
    order = np.argsort(a, kind="stable")
    den_s, num_s = _sums_sorted(a[order], b[order], ys[order], h, cut_sd * h)
    den = np.empty_like(den_s)
    num = np.empty_like(num_s)
    den[order] = den_s
    num[order] = num_s
    redo = np.flatnonzero(den < EXACT_BELOW)
    if redo.size:
        d2, n2 = _sums_exact_rows(redo, a, b, ys, h)
        den[redo] = d2
        num[redo] = n2
    if return_redo:
        return den, num, redo
    return den, num


def loo_grad_sums(a, b, zf, xf, ys, h, cut_sd=CUT_SD):
    """As :func:`loo_sums` plus the index-derivative accumulators."""
    a = np.ascontiguousarray(a, dtype=float)
    b = np.ascontiguousarray(b, dtype=float)
    zf = np.ascontiguousarray(zf, dtype=float)
    xf = np.ascontiguousarray(xf, dtype=float)
    ys = np.ascontiguousarray(ys, dtype=float).reshape(a.shape[0], -1)
    order = np.argsort(a, kind="stable")
    out_s = _grad_sums_sorted(a[order], b[order], zf[order], xf[order], ys[order], h, cut_sd * h)
    out = []
    for arr in out_s:
        full = np.empty_like(arr)
        full[order] = arr
        out.append(full)
    redo = np.flatnonzero(out[0] < EXACT_BELOW)
    if redo.size:
        exact = _grad_sums_exact_rows(redo, a, b, zf, xf, ys, h)
        for full, part in zip(out, exact):
            full[redo] = part
    return tuple(out)


@njit(cache=True)
def _contract_sorted(a, b, zf, xf, ys, alpha, beta, exact, h, cut):
    """Gradient of ``sum_i sum_c alpha_ic num_ic - beta_i den_i`` contracted
    over records, i.e. ``sum_i sum_c m_ic dP_ic`` with per-record weights
    folded into ``alpha`` and ``beta``.  Rows flagged ``exact`` are skipped
    here and handled by :func:`_contract_exact_rows`.
    """
    n = a.shape[0]
    m = ys.shape[1]
    lz = zf.shape[1]
    lx = xf.shape[1]
    g = np.zeros(lz + lx)
    inv2h2 = 0.5 / (h * h)
    for i in range(n):
        for j in range(i + 1, n):
            da = a[i] - a[j]
            if da < -cut:
                break
            db = b[i] - b[j]
            if db > cut or db < -cut:
                continue
            k = np.exp(-(da * da + db * db) * inv2h2)
            w = 0.0
            if not exact[i]:
                w -= beta[i]
                for c in range(m):
                    w += alpha[i, c] * ys[j, c]
            if not exact[j]:
                w -= beta[j]
                for c in range(m):
                    w += alpha[j, c] * ys[i, c]
            if w == 0.0:
                continue
            wa = w * k * da
            wb = w * k * db
            for d in range(lz):
                g[d] += wa * (zf[i, d] - zf[j, d])
            for d in range(lx):
                g[lz + d] += wb * (xf[i, d] - xf[j, d])
    return g


@njit(cache=True)
def _contract_exact_rows(rows, a, b, zf, xf, ys, alpha, beta, h):
    n = a.shape[0]
    m = ys.shape[1]
    lz = zf.shape[1]
    lx = xf.shape[1]
    g = np.zeros(lz + lx)
    inv2h2 = 0.5 / (h * h)
    for r in range(rows.shape[0]):
        i = rows[r]
        for j in range(n):
            if j == i:
                continue
            da = a[i] - a[j]
            db = b[i] - b[j]
            k = np.exp(-(da * da + db * db) * inv2h2)
            w = -beta[i]
            for c in range(m):
                w += alpha[i, c] * ys[j, c]
            for d in range(lz):
                g[d] += w * k * da * (zf[i, d] - zf[j, d])
            for d in range(lx):
                g[lz + d] += w * k * db * (xf[i, d] - xf[j, d])
    return g


def contracted_grad(a, b, zf, xf, ys, alpha, beta, redo, h, cut_sd=CUT_SD):
    """``sum_{i, j != i} (sum_c alpha_ic y_jc - beta_i) K_ij (da_ij (z_i - z_j), db_ij (x_i - x_j))``.

    ``redo`` lists the rows whose sums must include every pair (those
    recomputed exactly in :func:`loo_sums`).
    """
    a = np.ascontiguousarray(a, dtype=float)
    b = np.ascontiguousarray(b, dtype=float)
    zf = np.ascontiguousarray(zf, dtype=float)
    xf = np.ascontiguousarray(xf, dtype=float)
    ys = np.ascontiguousarray(ys, dtype=float).reshape(a.shape[0], -1)
    alpha = np.ascontiguousarray(alpha, dtype=float).reshape(a.shape[0], -1)
    beta = np.ascontiguousarray(beta, dtype=float)
    exact = np.zeros(a.shape[0], dtype=np.bool_)
    exact[redo] = True
    order = np.argsort(a, kind="stable")
    g = _contract_sorted(a[order], b[order], zf[order], xf[order], ys[order],
                         alpha[order], beta[order], exact[order], h, cut_sd * h)
    if len(redo):
        g = g + _contract_exact_rows(np.asarray(redo, dtype=np.int64), a, b, zf, xf, ys,
                                     alpha, beta, h)
    return g
