"""Compiled expression evaluation and Nelder-Mead constant fitting.

Programs are prefix token codes (see ``expr._CODES``).  Evaluation runs
the program backwards on a small stack, row by row.  The simplex
routine follows ``scipy.optimize.minimize(method="Nelder-Mead")`` with
``adaptive=False`` step for step; tests compare the two.
"""
import math

import numpy as np
from numba import njit

ADD, SUB, MUL, DIV, POW, SQRT, EXP, LOG, ONE, CONST, VAR0 = range(11)
DIV_EPS = 1e-12
BAD_LOSS = 1e300


@njit(cache=True)
def _eval_row(codes, consts, x, stack):
    sp = 0
    k = consts.shape[0]
    for pos in range(codes.shape[0] - 1, -1, -1):
        op = codes[pos]
        if op >= VAR0:
            stack[sp] = x[op - VAR0]
            sp += 1
        elif op == CONST:
            k -= 1
            stack[sp] = consts[k]
            sp += 1
        elif op == ONE:
            stack[sp] = 1.0
            sp += 1
        elif op >= SQRT:
            a = stack[sp - 1]
            if op == SQRT:
                if a < 0.0:
                    return math.nan
                r = math.sqrt(a)
            elif op == EXP:
                r = math.exp(a)
            else:
                if not a > 0.0:
                    return math.nan
                r = math.log(a)
            stack[sp - 1] = r
        else:
            a = stack[sp - 1]
            b = stack[sp - 2]
            sp -= 1
            if op == ADD:
                r = a + b
            elif op == SUB:
                r = a - b
            elif op == MUL:
                r = a * b
            elif op == DIV:
                if not abs(b) >= DIV_EPS:
                    return math.nan
                r = a / b
            else:
                if not a > 0.0:
                    return math.nan
                r = math.exp(b * math.log(a))
            stack[sp - 1] = r
        if not math.isfinite(stack[sp - 1]):
            return math.nan
    return stack[0]


@njit(cache=True)
def eval_program(codes, consts, X):
    out = np.empty(X.shape[0])
    stack = np.empty(codes.shape[0] + 1)
    for i in range(X.shape[0]):
        out[i] = _eval_row(codes, consts, X[i], stack)
    return out


@njit(cache=True)
def nrmse_program(codes, consts, X, y, sigma):
    """NRMSE of the program, or BAD_LOSS if any row is Invalid."""
    stack = np.empty(codes.shape[0] + 1)
    acc = 0.0
    for i in range(X.shape[0]):
        v = _eval_row(codes, consts, X[i], stack)
        if math.isnan(v):
            return BAD_LOSS
        d = y[i] - v
        acc += d * d
    r = math.sqrt(acc / X.shape[0]) / sigma
    return r if math.isfinite(r) else BAD_LOSS


@njit(cache=True)
def _sort(sim, fsim):
    order = np.argsort(fsim, kind="mergesort")
    return sim[order].copy(), fsim[order].copy()


@njit(cache=True)
def nelder_mead(codes, X, y, sigma, x0, maxiter, xatol, fatol):
    """Minimize the program's NRMSE over its constants.

    Returns ``(x_best, f_best, n_iterations)``.
    """
    rho, chi, psi, sig = 1.0, 2.0, 0.5, 0.5
    N = x0.shape[0]
    sim = np.empty((N + 1, N))
    sim[0] = x0
    for k in range(N):
        v = x0.copy()
        v[k] = (1.05 * v[k]) if v[k] != 0.0 else 0.00025
        sim[k + 1] = v
    fsim = np.empty(N + 1)
    for k in range(N + 1):
        fsim[k] = nrmse_program(codes, sim[k], X, y, sigma)
    sim, fsim = _sort(sim, fsim)
    iterations = 1
    while iterations < maxiter:
        dx = 0.0
        df = 0.0
        for k in range(1, N + 1):
            df = max(df, abs(fsim[0] - fsim[k]))
            for j in range(N):
                dx = max(dx, abs(sim[k, j] - sim[0, j]))
        if dx <= xatol and df <= fatol:
            break
        xbar = np.zeros(N)
        for k in range(N):
            xbar += sim[k]
        xbar /= N
        xr = (1 + rho) * xbar - rho * sim[N]
        fxr = nrmse_program(codes, xr, X, y, sigma)
        shrink = False
        if fxr < fsim[0]:
            xe = (1 + rho * chi) * xbar - rho * chi * sim[N]
            fxe = nrmse_program(codes, xe, X, y, sigma)
            if fxe < fxr:
                sim[N] = xe
                fsim[N] = fxe
            else:
                sim[N] = xr
                fsim[N] = fxr
        elif fxr < fsim[N - 1]:
            sim[N] = xr
            fsim[N] = fxr
        elif fxr < fsim[N]:
            xc = (1 + psi * rho) * xbar - psi * rho * sim[N]
            fxc = nrmse_program(codes, xc, X, y, sigma)
            if fxc <= fxr:
                sim[N] = xc
                fsim[N] = fxc
            else:
                shrink = True
        else:
            xcc = (1 - psi) * xbar + psi * sim[N]
            fxcc = nrmse_program(codes, xcc, X, y, sigma)
            if fxcc < fsim[N]:
                sim[N] = xcc
                fsim[N] = fxcc
            else:
                shrink = True
        if shrink:
            for k in range(1, N + 1):
                sim[k] = sim[0] + sig * (sim[k] - sim[0])
                fsim[k] = nrmse_program(codes, sim[k], X, y, sigma)
        iterations += 1
        sim, fsim = _sort(sim, fsim)
    return sim[0].copy(), fsim[0], iterations
