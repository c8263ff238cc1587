"""MINRES-QLP for Hermitian (possibly singular) linear systems.

Solves A x = b, or returns the minimum-length least-squares solution when A
is singular, using only products with A.  For a Hermitian operator the
Lanczos coefficients alpha_k = Re <v_k, A v_k> and beta_k = ||r|| are real,
so every plane rotation below is a real Givens rotation and only the Krylov
vectors are complex.

The iteration runs as plain MINRES until the condition estimate exceeds
``trancond`` and then switches to the QLP update, which stays stable on
ill-conditioned and singular operators.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS = np.finfo(float).eps
TINY = np.finfo(float).tiny


class SolverAbort(ArithmeticError):
    """Non-finite quantities appeared inside the Krylov iteration."""


@dataclass
class KrylovResult:
    x: np.ndarray
    residual_norm: float
    iters: int
    converged: bool
    flag: int
    qlp_iters: int = 0
    anorm: float = 0.0
    acond: float = 1.0

    @property
    def message(self) -> str:
        return _MESSAGES.get(self.flag, "unknown")


_MESSAGES = {
    -1: "beta2 = 0: b and x are eigenvectors",
    0: "beta1 = 0: the exact solution is x = 0",
    1: "solution to Ax = b found within rtol",
    2: "min-length least-squares solution found within rtol",
    3: "solution to Ax = b found within eps",
    4: "min-length least-squares solution found within eps",
    5: "x has converged to an eigenvector",
    6: "xnorm exceeded maxxnorm",
    7: "Acond exceeded acondlim",
    8: "iteration limit reached",
    9: "least-squares problem without converged solution",
}


def sym_givens(a: float, b: float):
    """(c, s, r) with [c s; s -c] [a; b] = [r; 0], stable for any signs."""
    if b == 0:
        c = 1.0 if a == 0 else float(np.sign(a))
        return c, 0.0, abs(a)
    if a == 0:
        return 0.0, float(np.sign(b)), abs(b)
    if abs(b) > abs(a):
        t = a / b
        s = np.sign(b) / np.sqrt(1 + t * t)
        c = s * t
        return c, s, b / s
    t = b / a
    c = np.sign(a) / np.sqrt(1 + t * t)
    s = c * t
    return c, s, a / c


def minres_qlp(matvec, b, rtol: float = 1e-6, maxit: int = 200, shift: float = 0.0,
               maxxnorm: float = 1e7, acondlim: float = 1e15, trancond: float = 1e7) -> KrylovResult:
    """Minimum-length solution of (A - shift I) x = b for Hermitian A."""
    b = np.asarray(b)
    dtype = np.result_type(b.dtype, np.float64)
    n = b.shape[0]
    r2 = b.astype(dtype, copy=True)
    r3 = r2
    r1 = r2
    beta1 = float(np.linalg.norm(r2))
    if not np.isfinite(beta1):
        raise SolverAbort("right-hand side is not finite")

    flag0 = -2
    flag = flag0
    iters = qlp_iters = 0
    beta = tau = taul = 0.0
    phi = betan = beta1
    cs, sn = -1.0, 0.0
    cr1, sr1 = -1.0, 0.0
    cr2, sr2 = -1.0, 0.0
    dltan = eplnn = gama = gamal = gamal2 = 0.0
    eta = etal = etal2 = 0.0
    vepln = veplnl = veplnl2 = 0.0
    ul3 = ul2 = ul = u = 0.0
    rnorm = betan
    xnorm = xl2norm = anorm = 0.0
    acond = 1.0
    gmin = gminl = 0.0
    relres = rnorm / (beta1 + 1e-50)
    x = np.zeros(n, dtype=dtype)
    w = np.zeros(n, dtype=dtype)
    wl = np.zeros(n, dtype=dtype)
    wl2 = np.zeros(n, dtype=dtype)
    xl2 = np.zeros(n, dtype=dtype)
    gamal_qlp = vepln_qlp = gama_qlp = ul_qlp = u_qlp = 0.0

    if beta1 == 0:
        flag = 0

    while flag == flag0 and iters < maxit:
        # Lanczos step
        iters += 1
        betal = beta
        beta = betan
        v = r3 / beta
        r3 = np.asarray(matvec(v), dtype=dtype)
        if shift:
            r3 = r3 - shift * v
        if iters > 1:
            r3 = r3 - r1 * (beta / betal)
        alfa = float(np.vdot(v, r3).real)
        r3 = r3 - r2 * (alfa / beta)
        r1 = r2
        r2 = r3
        betan = float(np.linalg.norm(r3))
        if not (np.isfinite(alfa) and np.isfinite(betan)):
            raise SolverAbort(f"non-finite Lanczos coefficients at iteration {iters}")
        if iters == 1 and betan == 0:
            if alfa == 0:
                flag = 0
            else:
                flag = -1
                x = b.astype(dtype) / alfa
            break
        pnorm = np.sqrt(betal ** 2 + alfa ** 2 + betan ** 2)

        # previous left rotation Q_{k-1}
        dbar = dltan
        dlta = cs * dbar + sn * alfa
        epln = eplnn
        gbar = sn * dbar - cs * alfa
        eplnn = sn * betan
        dltan = -cs * betan
        dlta_qlp = dlta
        # current left rotation Q_k
        gamal3 = gamal2
        gamal2 = gamal
        gamal = gama
        cs, sn, gama = sym_givens(gbar, betan)
        gama_tmp = gama
        taul2 = taul
        taul = tau
        tau = cs * phi
        phi = sn * phi
        # previous right rotation P_{k-2,k}
        if iters > 2:
            veplnl2 = veplnl
            etal2 = etal
            etal = eta
            dlta_tmp = sr2 * vepln - cr2 * dlta
            veplnl = cr2 * vepln + sr2 * dlta
            dlta = dlta_tmp
            eta = sr2 * gama
            gama = -cr2 * gama
        # current right rotation P_{k-1,k}
        if iters > 1:
            cr1, sr1, gamal = sym_givens(gamal, dlta)
            vepln = sr1 * gama
            gama = -cr1 * gama

        # solution-norm recurrences
        ul4 = ul3
        ul3 = ul2
        if iters > 2:
            ul2 = (taul2 - etal2 * ul4 - veplnl2 * ul3) / gamal2
        if iters > 1:
            ul = (taul - etal * ul3 - veplnl * ul2) / gamal
        xnorm_tmp = np.sqrt(xl2norm ** 2 + ul2 ** 2 + ul ** 2)
        if abs(gama) > TINY and xnorm_tmp < maxxnorm:
            u = (tau - eta * ul2 - vepln * ul) / gama
            if np.sqrt(xnorm_tmp ** 2 + u ** 2) > maxxnorm:
                u = 0.0
                flag = 6
        else:
            u = 0.0
            flag = 9
        xl2norm = np.sqrt(xl2norm ** 2 + ul2 ** 2)
        xnorm = np.sqrt(xl2norm ** 2 + ul ** 2 + u ** 2)

        if acond < trancond and flag == flag0 and qlp_iters == 0:
            # MINRES update
            wl2 = wl
            wl = w
            w = (v - epln * wl2 - dlta_qlp * wl) / gama_tmp
            if xnorm < maxxnorm:
                x = x + tau * w
            else:
                flag = 6
        else:
            # MINRES-QLP update
            qlp_iters += 1
            if qlp_iters == 1:
                xl2 = np.zeros(n, dtype=dtype)
                if iters > 1:
                    # rebuild w_{k-3}, w_{k-2}, w_{k-1} in the QLP basis
                    if iters > 3:
                        wl2 = gamal3 * wl2 + veplnl2 * wl + etal * w
                    if iters > 2:
                        wl = gamal_qlp * wl + vepln_qlp * w
                    w = gama_qlp * w
                    xl2 = x - wl * ul_qlp - w * u_qlp
            if iters == 1:
                wl2 = wl
                wl = v * sr1
                w = -v * cr1
            elif iters == 2:
                wl2 = wl
                wl = w * cr1 + v * sr1
                w = w * sr1 - v * cr1
            else:
                wl2 = wl
                wl = w
                w = wl2 * sr2 - v * cr2
                wl2 = wl2 * cr2 + v * sr2
                vv = wl * cr1 + w * sr1
                w = wl * sr1 - w * cr1
                wl = vv
            xl2 = xl2 + wl2 * ul2
            x = xl2 + wl * ul + w * u

        # next right rotation P_{k-1,k+1}
        gamal_tmp = gamal
        cr2, sr2, gamal = sym_givens(gamal, eplnn)
        gamal_qlp = gamal_tmp
        vepln_qlp = vepln
        gama_qlp = gama
        ul_qlp = ul
        u_qlp = u

        # norm and condition estimates
        abs_gama = abs(gama)
        anorml = anorm
        anorm = max(anorm, pnorm, gamal, abs_gama)
        if iters == 1:
            gmin = gama
            gminl = gmin
        else:
            gminl2 = gminl
            gminl = gmin
            gmin = min(gminl2, gamal, abs_gama)
        acondl = acond
        acond = anorm / gmin if gmin else np.inf
        rnorml = rnorm
        relresl = relres
        if flag != 9:
            rnorm = phi
        relres = rnorm / (anorm * xnorm + beta1)
        rootl = np.sqrt(gbar ** 2 + dltan ** 2)
        relaresl = rootl / anorm if anorm else 0.0

        # stopping rules, weakest first so the strongest wins
        epsx = anorm * xnorm * EPS
        if flag in (flag0, 9):
            if iters >= maxit:
                flag = 8
            if acond >= acondlim:
                flag = 7
            if xnorm >= maxxnorm:
                flag = 6
            if epsx >= beta1:
                flag = 5
            if 1 + relaresl <= 1:
                flag = 4
            if 1 + relres <= 1:
                flag = 3
            if relaresl <= rtol:
                flag = 2
            if relres <= rtol:
                flag = 1
        if flag in (2, 4, 6, 7):
            # the last step did not improve the iterate's diagnostics
            iters -= 1
            acond = acondl
            rnorm = rnorml
            relres = relresl
        if not np.all(np.isfinite(x)):
            raise SolverAbort(f"non-finite iterate at iteration {iters}")

    r = b - np.asarray(matvec(x))
    if shift:
        r = r + shift * x
    rnorm = float(np.linalg.norm(r))
    if not np.isfinite(rnorm):
        raise SolverAbort("non-finite final residual")
    converged = flag in (-1, 0, 1, 2, 3, 4, 5)
    return KrylovResult(x, rnorm, iters, converged, flag, qlp_iters, float(anorm), float(acond))
