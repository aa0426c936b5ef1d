"""Exact and implicit solutions of the reduced dynamics, and critical-time formulas.

All functions take the per-feature inputs ``(eps, lam, rho, L)`` where ``eps``
is the initial projection, ``lam`` the cross-covariance and ``rho`` the
regression coefficient. The input variance never appears: it is ``lam / rho``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import bernoulli, comb, digamma

from .core import Objective, ValidationError

LERCH_RTOL = 1e-12
LERCH_MAX_TERMS = 10_000_000
# beyond this |z| the direct series is replaced by the expansion around z = 1
_LERCH_SWITCH = 0.5
_BERNOULLI_ORDER = 60


class DomainError(ValueError):
    pass


class PoleError(DomainError):
    pass


class PrecisionLossError(ArithmeticError):
    pass


@dataclass(frozen=True)
class CriticalTimeEstimate:
    leading: float
    objective: Objective
    eps: float
    lam: float
    rho: float | None
    L: int

    def __float__(self):
        return self.leading


# --------------------------------------------------------------------------
# Lerch transcendent, s = 1


def lerch_phi(z: float, a: float) -> float:
    """Phi(z, 1, a) = sum_{n>=0} z**n / (a + n) for real ``|z| < 1``.

    The direct series is used for ``z <= 0.5``. Closer to ``z = 1`` the series
    converges like ``z**n / n``, so the expansion in ``t = -log z``

        Phi(e^-t, 1, a) = e^(a t) * (-euler_gamma - digamma(a) - log(t)
                                     - sum_k B_k(a) (-t)^k / (k k!))

    (valid for ``|t| < 2 pi``) is used instead.
    """
    z = float(z)
    a = float(a)
    if not abs(z) < 1:
        raise DomainError(f"|z| must be < 1, got z={z}")
    if a <= 0 and a == math.floor(a):
        raise PoleError(f"a={a} is a non-positive integer")
    if z == 0:
        return 1.0 / a
    if z > _LERCH_SWITCH:
        return _lerch_near_one(z, a)
    return _lerch_series(z, a)


def _lerch_series(z: float, a: float) -> float:
    # the few terms with a + n < 0 are summed exactly first so the tail bound applies
    total = 0.0
    n = 0
    zn = 1.0
    while a + n <= 0:
        total += zn / (a + n)
        zn *= z
        n += 1
    chunk = 256
    az = abs(z)
    while n < LERCH_MAX_TERMS:
        idx = np.arange(n, n + chunk, dtype=float)
        terms = zn * np.power(z, idx - n) / (a + idx)
        total += float(np.sum(terms[::-1]))
        n += chunk
        zn = zn * z ** chunk
        bound = abs(zn) / ((a + n) * (1.0 - az))
        if bound < LERCH_RTOL * abs(total) or zn == 0.0:
            return total
        chunk = min(chunk * 2, 1 << 20)
    raise PrecisionLossError(f"lerch_phi({z}, 1, {a}) did not reach rtol within {LERCH_MAX_TERMS} terms")


def _bernoulli_tables(order: int):
    # B_k(a) = sum_m C(k, m) B_{k-m} a^m, so row k of coef holds C(k, m) B_{k-m}
    k = np.arange(order + 1)[:, None]
    m = np.arange(order + 1)[None, :]
    bn = bernoulli(order)
    coef = np.where(m <= k, comb(k, m, exact=False) * bn[np.clip(k - m, 0, order)], 0.0)
    kk = np.arange(1, order + 1, dtype=float)
    # 1 / (k k!) for the series in t, k = 1..order
    weight = 1.0 / (kk * np.cumprod(kk))
    return coef, weight


_BCOEF, _BWEIGHT = _bernoulli_tables(_BERNOULLI_ORDER)


def _lerch_near_one(z: float, a: float) -> float:
    t = -math.log(z)
    # digamma only accepts the shifted argument cleanly for a > 0
    shift = 0.0
    zk = 1.0
    aa = a
    while aa <= 0:
        shift += zk / aa
        zk *= z
        aa += 1.0
    powers = aa ** np.arange(_BERNOULLI_ORDER + 1, dtype=float)
    bpoly = _BCOEF @ powers
    terms = bpoly[1:] * (-t) ** np.arange(1, _BERNOULLI_ORDER + 1) * _BWEIGHT
    # smallest terms first
    series = float(np.sum(terms[::-1]))
    total = -np.euler_gamma - float(digamma(aa)) - math.log(t) - series
    return shift + zk * math.exp(aa * t) * total


# --------------------------------------------------------------------------
# JEPA implicit solution


def _check_positive(**kw):
    for name, v in kw.items():
        if not v > 0:
            raise DomainError(f"{name} must be positive, got {v}")


def jepa_antiderivative(psi: float, L: int) -> float:
    """log(psi) - log(1 - psi) - sum_{n=1}^{2L-1} psi**-n / n, for 0 < psi < 1.

    The negative powers are accumulated through ``exp(-n log psi)`` so that
    tiny ``psi`` stays finite as long as the result itself is.
    """
    if not 0 < psi < 1:
        raise DomainError(f"psi must lie in (0, 1), got {psi}")
    lp = math.log(psi)
    s = math.fsum(math.exp(-n * lp) / n for n in range(1, 2 * L))
    return lp - math.log1p(-psi) - s


def jepa_time_scale(lam: float, rho: float, L: int) -> float:
    """Coefficient c with d/dt I(psi) = c, i.e. lam * rho**(2L-1) / L."""
    return lam * rho ** (2 * L - 1) / L


def jepa_implicit_residual(w, t, lam, rho, L, eps) -> float:
    """LHS - RHS of the additive implicit relation for the JEPA dynamics.

    With ``psi = w**(1/L) / rho`` the trajectory satisfies
    ``I(psi(t)) = c t + I(psi(0))``; the return value is
    ``I(psi) - c t - I(psi0)`` and vanishes on the exact solution.
    """
    _check_positive(lam=lam, rho=rho, eps=eps)
    fp = rho ** L
    if not 0 < w < fp:
        raise DomainError(f"w={w} must lie in (0, rho**L={fp})")
    if not 0 < eps < fp:
        raise DomainError(f"eps={eps} must lie in (0, rho**L={fp})")
    lhs = jepa_antiderivative(w ** (1.0 / L) / rho, L)
    rhs = jepa_implicit_rhs(t, lam, rho, L, eps)
    return lhs - rhs


def jepa_implicit_rhs(t, lam, rho, L, eps) -> float:
    """c t + C with the integration constant fixed by the initial value."""
    return jepa_time_scale(lam, rho, L) * t + jepa_antiderivative(eps ** (1.0 / L) / rho, L)


def jepa_implicit_time(w, lam, rho, L, eps) -> float:
    """Exact time at which the JEPA trajectory reaches ``w``."""
    _check_positive(lam=lam, rho=rho, eps=eps)
    fp = rho ** L
    if not eps <= w < fp:
        raise DomainError(f"w={w} must lie in [eps, rho**L={fp})")
    psi0 = eps ** (1.0 / L) / rho
    psi = w ** (1.0 / L) / rho
    return (jepa_antiderivative(psi, L) - jepa_antiderivative(psi0, L)) / jepa_time_scale(lam, rho, L)


# --------------------------------------------------------------------------
# MAE implicit solution


def mae_antiderivative(u: float, L: int) -> float:
    """Antiderivative of 1 / (u**2 - u**alpha) with alpha = (3L-1)/(L-1).

    Equals ``(L-1) / ((L+1) u) * Phi(u**((L+1)/(L-1)), 1, (1-L)/(1+L))``,
    which diverges like -1/u at 0 and logarithmically at u = 1.
    """
    if L < 2:
        raise DomainError("the Lerch form requires L > 1")
    if not 0 < u < 1:
        raise DomainError(f"u must lie in (0, 1), got {u}")
    k = (L + 1) / (L - 1)
    a = (1 - L) / (1 + L)
    return lerch_phi(u ** k, a) / (k * u)


def _mae_u(w, rho, L):
    return rho ** ((1 - L) / (L + 1)) * w ** ((L - 1) / L)


def mae_implicit_time(w, lam, rho, L, eps) -> float:
    """Time at which the MAE trajectory (depth ``L > 1``) reaches ``w``.

    ``t = rho**((1-L)/(L+1)) L / (lam (L-1)) * (I(u(w)) - I(u(eps)))``
    with ``u(w) = rho**((1-L)/(L+1)) w**((L-1)/L)``; the constant is taken
    from the initial condition.
    """
    if L == 1:
        raise DomainError("L = 1 has an explicit solution; use mae_l1_solution")
    if L < 1:
        raise DomainError(f"L must be >= 1, got {L}")
    _check_positive(lam=lam, rho=rho, eps=eps)
    fp = rho ** (L / (L + 1))
    if not eps <= w < fp:
        raise DomainError(f"w={w} must lie in [eps, rho**(L/(L+1))={fp})")
    if w == eps:
        return 0.0
    pref = rho ** ((1 - L) / (L + 1)) * L / (lam * (L - 1))
    u0 = _mae_u(eps, rho, L)
    u = _mae_u(w, rho, L)
    return pref * (mae_antiderivative(u, L) - mae_antiderivative(u0, L))


def mae_l1_solution(t, lam, rho, eps):
    """Closed-form MAE projection at depth 1 (vectorised over ``t``).

    w(t) = sqrt(rho) * sigmoid(2 lam t + C) ** 0.5 with C = log(eps^2 / (rho - eps^2)).
    """
    _check_positive(lam=lam, rho=rho, eps=eps)
    if not eps ** 2 < rho:
        raise DomainError(f"eps^2={eps ** 2} must be below rho={rho}")
    t = np.asarray(t, dtype=float)
    c = math.log(eps ** 2) - math.log(rho - eps ** 2)
    x = 2.0 * lam * t + c
    # log sigmoid(x) = -log1p(exp(-x)), written stably for both signs
    log_sig = -np.logaddexp(0.0, -x)
    out = math.sqrt(rho) * np.exp(0.5 * log_sig)
    return float(out) if out.ndim == 0 else out


def mae_l1_time(w, lam, rho, eps) -> float:
    """Inverse of :func:`mae_l1_solution`."""
    _check_positive(lam=lam, rho=rho, eps=eps)
    if not 0 < w < math.sqrt(rho):
        raise DomainError(f"w={w} must lie in (0, sqrt(rho))")
    c = math.log(eps ** 2) - math.log(rho - eps ** 2)
    return (math.log(w ** 2) - math.log(rho - w ** 2) - c) / (2.0 * lam)


def exact_critical_time(objective, eps, lam, rho, L, p=0.5) -> float:
    """Critical time from the implicit solutions (no expansion in eps)."""
    objective = Objective.parse(objective)
    if objective is Objective.JEPA:
        return jepa_implicit_time(p * rho ** L, lam, rho, L, eps)
    if L == 1:
        return mae_l1_time(p * math.sqrt(rho), lam, rho, eps)
    return mae_implicit_time(p * rho ** (L / (L + 1)), lam, rho, L, eps)


# --------------------------------------------------------------------------
# critical-time formulas


def jepa_critical_time_formula(eps, lam, rho, L) -> CriticalTimeEstimate:
    """(1/lam) * sum_{n=1}^{2L-1} L / (n rho**(2L-n-1) eps**(n/L))."""
    if not 0 < eps < 1:
        raise DomainError(f"eps must lie in (0, 1), got {eps}")
    _check_positive(lam=lam, rho=rho)
    if L < 1:
        raise DomainError(f"L must be >= 1, got {L}")
    terms = [L / (n * rho ** (2 * L - n - 1) * eps ** (n / L)) for n in range(1, 2 * L)]
    return CriticalTimeEstimate(math.fsum(terms) / lam, Objective.JEPA, eps, lam, rho, L)


def mae_critical_time_formula(eps, lam, L) -> CriticalTimeEstimate:
    """L / (lam (L-1) eps**((L-1)/L)) for L > 1 and |log eps| / lam for L = 1."""
    if not 0 < eps < 1:
        raise DomainError(f"eps must lie in (0, 1), got {eps}")
    _check_positive(lam=lam)
    if L < 1:
        raise DomainError(f"L must be >= 1, got {L}")
    if L == 1:
        val = abs(math.log(eps)) / lam
    else:
        val = L / (lam * (L - 1) * eps ** ((L - 1) / L))
    return CriticalTimeEstimate(val, Objective.MAE, eps, lam, None, L)


def critical_time_formula(objective, eps, lam, rho, L) -> CriticalTimeEstimate:
    if Objective.parse(objective) is Objective.JEPA:
        return jepa_critical_time_formula(eps, lam, rho, L)
    return mae_critical_time_formula(eps, lam, L)


def critical_time_ratio_formula(eps, lam, rho, rho_prime, L, objective) -> float:
    """Leading-order t*(rho) / t*(rho') for ``rho' >= rho``."""
    objective = Objective.parse(objective)
    _check_positive(eps=eps, lam=lam, rho=rho)
    if rho_prime < rho:
        raise ValidationError(f"expected rho' >= rho, got rho={rho}, rho'={rho_prime}")
    if objective is Objective.MAE:
        return 1.0
    if rho_prime == rho:
        return 1.0
    if L < 2:
        raise ValidationError("the JEPA ratio expansion is singular at L = 1")
    delta = 1.0 / rho - 1.0 / rho_prime
    return 1.0 + (2 * L - 1) / (2 * L - 2) * delta * eps ** (1.0 / L)
