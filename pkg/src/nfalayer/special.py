"""Log-space gamma and upper incomplete gamma functions.

``ln Γ(a, x)`` is needed far into the tail (x of several hundred), where
``Γ(a, x)`` itself underflows double precision. Everything here stays in log
space. Inputs ``x`` may be scalars or arrays; ``a`` is a scalar.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DomainError, NumericalError

BRANCH_X = 40.0
CF_EPS = 1e-14
MAX_ITER = 500
_FPMIN = 1e-300
_ASYMPTOTIC_TERMS = 60


def log_gamma(a: float) -> float:
    """ln Γ(a) for a > 0."""
    if not (a > 0) or not math.isfinite(a):
        raise DomainError(f"log_gamma: need a > 0, got {a}")
    return math.lgamma(a)


def _check(a, x) -> np.ndarray:
    if not (a > 0) or not math.isfinite(a):
        raise DomainError(f"incomplete gamma: need a > 0, got {a}")
    xa = np.asarray(x, dtype=np.float64)
    if np.any(~np.isfinite(xa)) or np.any(xa < 0):
        raise DomainError("incomplete gamma: need finite x >= 0")
    return xa


def log_upper_gamma_three_term(a: float, x):
    """Three-term large-x expansion ``(a-1) ln x - x + ln(1 + (a-1)/x + (a-1)(a-2)/x^2)``.

    Exact when ``a`` is 1, 2 or 3. Kept for reference; the production path
    (:func:`log_upper_incomplete_gamma`) sums the expansion to convergence.
    """
    xa = _check(a, x)
    if np.any(xa <= 0):
        raise DomainError("three-term expansion needs x > 0")
    corr = 1.0 + (a - 1.0) / xa + (a - 1.0) * (a - 2.0) / xa**2
    out = (a - 1.0) * np.log(xa) - xa + np.log(corr)
    return float(out) if np.ndim(x) == 0 else out


def _log_asymptotic(a: float, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sum x^{a-1} e^{-x} Σ_k (a-1)...(a-k)/x^k until terms drop below 1e-16.

    Returns (log value, converged mask). Terms stop shrinking when ``a`` is
    large relative to ``x``; those entries are reported as not converged.
    """
    total = np.ones_like(x)
    term = np.ones_like(x)
    done = np.zeros(x.shape, dtype=bool)
    ok = np.zeros(x.shape, dtype=bool)
    for k in range(1, _ASYMPTOTIC_TERMS + 1):
        nxt = term * (a - k) / x
        grows = np.abs(nxt) > np.abs(term)
        small = np.abs(nxt) <= 1e-16 * np.abs(total)
        active = ~done
        total = np.where(active & ~grows, total + nxt, total)
        newly_ok = active & (small | (nxt == 0))
        ok |= newly_ok
        done |= newly_ok | (active & grows)
        term = nxt
        if done.all():
            break
    ok &= total > 0
    safe = np.where(ok, total, 1.0)
    return (a - 1.0) * np.log(x) - x + np.log(safe), ok


def _log_series(a: float, x: np.ndarray) -> np.ndarray:
    """ln Γ(a, x) via the lower-gamma power series (good for x < a + 1)."""
    lg = math.lgamma(a)
    out = np.full(x.shape, lg)
    pos = x > 0
    if not pos.any():
        return out
    xp = x[pos]
    total = np.ones_like(xp)
    term = np.ones_like(xp)
    denom = a
    converged = np.zeros(xp.shape, dtype=bool)
    for _ in range(MAX_ITER):
        denom += 1.0
        term = term * xp / denom
        total = total + term
        converged |= np.abs(term) < np.abs(total) * CF_EPS
        if converged.all():
            break
    else:
        raise NumericalError(f"incomplete gamma series did not converge in {MAX_ITER} iterations (a={a})")
    log_p = a * np.log(xp) - xp - math.lgamma(a + 1.0) + np.log(total)
    out[pos] = lg + np.log1p(-np.exp(log_p))
    return out


def _log_continued_fraction(a: float, x: np.ndarray) -> np.ndarray:
    """ln Γ(a, x) by modified Lentz evaluation of the continued fraction (x >= a + 1)."""
    b = x + 1.0 - a
    c = np.full_like(x, 1.0 / _FPMIN)
    d = 1.0 / np.where(np.abs(b) < _FPMIN, _FPMIN, b)
    h = d.copy()
    converged = np.zeros(x.shape, dtype=bool)
    for i in range(1, MAX_ITER + 1):
        an = -i * (i - a)
        b = b + 2.0
        d = an * d + b
        d = np.where(np.abs(d) < _FPMIN, _FPMIN, d)
        c = b + an / c
        c = np.where(np.abs(c) < _FPMIN, _FPMIN, c)
        d = 1.0 / d
        delta = d * c
        h = np.where(converged, h, h * delta)
        converged |= np.abs(delta - 1.0) < CF_EPS
        if converged.all():
            break
    else:
        raise NumericalError(f"incomplete gamma continued fraction hit the {MAX_ITER}-iteration cap (a={a})")
    return -x + a * np.log(x) + np.log(h)


def _log_convergent(a: float, x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    use_series = x < a + 1.0
    if use_series.any():
        out[use_series] = _log_series(a, x[use_series])
    if (~use_series).any():
        out[~use_series] = _log_continued_fraction(a, x[~use_series])
    return out


def log_upper_incomplete_gamma(a: float, x):
    """ln Γ(a, x) = ln ∫_x^∞ t^{a-1} e^{-t} dt for a > 0, x >= 0.

    x <= 40 uses the power series or continued fraction; x > 40 sums the
    large-x expansion, falling back to the continued fraction where that
    expansion has not converged (a comparable to x).
    """
    xa = _check(a, x)
    flat = np.atleast_1d(xa).astype(np.float64).ravel()
    out = np.empty_like(flat)
    tail = flat > BRANCH_X
    if (~tail).any():
        out[~tail] = _log_convergent(a, flat[~tail])
    if tail.any():
        vals, ok = _log_asymptotic(a, flat[tail])
        if not ok.all():
            vals[~ok] = _log_convergent(a, flat[tail][~ok])
        out[tail] = vals
    out = out.reshape(xa.shape)
    return float(out) if np.ndim(x) == 0 else out


def dlog_upper_incomplete_gamma_dx(a: float, x, log_value=None):
    """∂/∂x ln Γ(a, x) = -x^{a-1} e^{-x} / Γ(a, x), always negative.

    ``log_value`` may pass a precomputed ``ln Γ(a, x)`` to skip re-evaluation.
    """
    xa = _check(a, x)
    if np.any(xa == 0) and a < 1:
        raise DomainError(f"derivative undefined at x = 0 for a = {a} < 1")
    lv = log_upper_incomplete_gamma(a, xa) if log_value is None else np.asarray(log_value)
    with np.errstate(divide="ignore"):
        logx = np.log(xa)
    expo = np.where(xa > 0, (a - 1.0) * logx, 0.0 if a == 1 else -np.inf) - xa - lv
    out = -np.exp(expo)
    return float(out) if np.ndim(x) == 0 else out
