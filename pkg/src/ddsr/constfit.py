"""Levenberg-Marquardt fitting of the constant placeholders of a tree."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .expr import Node, bind_constants, compile_tree, n_constants

MAX_ITER = 100
RTOL = 1e-10
LAMBDA0 = 1e-3
LAMBDA_MAX = 1e16


@dataclass(frozen=True)
class FitResult:
    constants: tuple[float, ...]
    nrmse: float
    iterations: int
    converged: bool
    failed: bool = False
    # RSS after each accepted step, starting with the initial point
    rss_trace: tuple[float, ...] = field(default=(), repr=False)


def nrmse(pred: np.ndarray, y: np.ndarray, sigma: float | None = None) -> float:
    """Root-mean-square error over ``std(y)`` (1 when the targets are constant)."""
    if sigma is None:
        sigma = float(np.std(y))
    if not sigma > 0:
        sigma = 1.0
    r = pred - y
    if not np.all(np.isfinite(r)):
        return float("inf")
    return float(np.sqrt(np.mean(r * r)) / sigma)


def fit_constants(
    tree: Node,
    X: np.ndarray,
    y: np.ndarray,
    init: np.ndarray | None = None,
    sigma: float | None = None,
    max_iter: int = MAX_ITER,
) -> FitResult:
    """Minimise the residual sum of squares over the constant vector.

    Central-difference Jacobian with step ``1e-6 * max(1, |c|)``, Marquardt
    damping starting at 1e-3 (x10 on rejection, /10 on acceptance). Rows
    that are non-finite at the start are left out of the objective; if any
    row is still non-finite at the optimum the fit is marked failed.
    """
    # wild candidate expressions overflow routinely; that is handled, not news
    with np.errstate(all="ignore"):
        return _fit(tree, X, y, init, sigma, max_iter)


def _fit(tree, X, y, init, sigma, max_iter) -> FitResult:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    f = compile_tree(tree)
    p = n_constants(tree)
    if p == 0:
        pred = f(X)
        err = nrmse(pred, y, sigma)
        ok = np.isfinite(err)
        return FitResult((), err, 0, True, failed=not ok)

    c = np.ones(p) if init is None else np.asarray(init, dtype=float).copy()
    r = f(X, c) - y
    rows = np.isfinite(r)
    if not rows.any():
        return FitResult(tuple(c), float("inf"), 0, False, failed=True)
    Xa, ya = X[rows], y[rows]

    def resid(cm: np.ndarray) -> np.ndarray:
        # cm: (q, p) -> residuals (q, n_active)
        return f(Xa, cm.T[:, :, None]) - ya[None, :]

    def rss_of(res: np.ndarray) -> float:
        return float(res @ res) if np.all(np.isfinite(res)) else np.inf

    ra = r[rows]
    rss = rss_of(ra)
    lam = LAMBDA0
    trace = [rss]
    it = 0
    converged = False
    eye = np.eye(p)
    while it < max_iter:
        it += 1
        h = 1e-6 * np.maximum(1.0, np.abs(c))
        probe = np.concatenate([c + eye * h[:, None], c - eye * h[:, None]])
        rr = resid(probe)
        J = ((rr[:p] - rr[p:]) / (2 * h[:, None])).T
        if not np.all(np.isfinite(J)):
            J = np.where(np.isfinite(J), J, 0.0)
        A = J.T @ J
        grad = J.T @ ra
        diag = np.diag(A).copy()
        diag[diag <= 0] = 1.0
        accepted = False
        while lam <= LAMBDA_MAX:
            try:
                step = np.linalg.solve(A + lam * np.diag(diag), -grad)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            c_try = c + step
            r_try = resid(c_try[None])[0]
            rss_try = rss_of(r_try)
            if rss_try <= rss:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            converged = True
            break
        improvement = (rss - rss_try) / rss if rss > 0 else 0.0
        c, ra, rss = c_try, r_try, rss_try
        trace.append(rss)
        lam = max(lam / 10.0, 1e-12)
        if rss == 0.0 or improvement < RTOL:
            converged = True
            break

    pred = f(X, c)
    err = nrmse(pred, y, sigma)
    failed = not np.isfinite(err)
    return FitResult(tuple(float(v) for v in c), err, it, converged, failed=failed, rss_trace=tuple(trace))


def fitted_tree(tree: Node, result: FitResult) -> Node:
    return bind_constants(tree, result.constants) if result.constants else tree
