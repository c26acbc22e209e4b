"""von Mises-Fisher distributions on the unit hypersphere S^{d-1}.

Provides the log normalization constant, density, entropy (nats), the mean
resultant ratio A_d(kappa) = I_{d/2}(kappa) / I_{d/2-1}(kappa), and Wood's
rejection sampler.  The modified Bessel function I_nu is evaluated from
scratch: a scaled power series below x = max(20, 2*nu) and the uniform
large-order asymptotic expansion above it, with ratios computed by a
continued fraction so no log subtraction is needed at large argument.

All kappa-dependent functions accept scalars or numpy arrays and are pure;
``sample`` mutates only its caller-supplied generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ContractViolation, NumericalError

_LOG_2PI = math.log(2.0 * math.pi)

# --------------------------------------------------------------------------
# Debye polynomials u_k(t) for the uniform asymptotic expansion, generated
# exactly in rational arithmetic from the standard recurrence
#   u_{k+1}(t) = t^2 (1 - t^2) u_k'(t) / 2 + (1/8) \int_0^t (1 - 5 s^2) u_k(s) ds
# and flattened to (coeff, power, power - k) triples so the correction sum
# can be written in terms of s = 1 / sqrt(nu^2 + x^2), which stays finite
# as nu -> 0.
# --------------------------------------------------------------------------

_DEBYE_ORDER = 12


def _debye_terms(order: int):
    poly = {0: Fraction(1)}
    terms = []
    for k in range(1, order + 1):
        nxt: dict[int, Fraction] = {}
        for p, c in poly.items():
            if p:
                half = Fraction(1, 2) * c * p
                nxt[p + 1] = nxt.get(p + 1, Fraction(0)) + half
                nxt[p + 3] = nxt.get(p + 3, Fraction(0)) - half
            nxt[p + 1] = nxt.get(p + 1, Fraction(0)) + Fraction(1, 8) * c / (p + 1)
            nxt[p + 3] = nxt.get(p + 3, Fraction(0)) - Fraction(5, 8) * c / (p + 3)
        poly = nxt
        for p, c in sorted(poly.items()):
            terms.append((float(c), p, p - k))
    return terms


_DEBYE = _debye_terms(_DEBYE_ORDER)

_SERIES_MAX_TERMS = 1000
_RATIO_MAX_ITER = 1_000_000


def _check_order_arg(nu: float, x) -> np.ndarray:
    if not (np.isfinite(nu) and nu >= 0):
        raise ContractViolation(f"Bessel order must be finite and >= 0, got {nu}")
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)) or np.any(x < 0):
        raise ContractViolation("Bessel argument must be finite and >= 0")
    return x


def log_bessel_i(nu: float, x):
    """log I_nu(x) for nu >= 0, x >= 0; scalar or elementwise on arrays."""
    x = _check_order_arg(nu, x)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.empty_like(x)

    zero = x == 0.0
    out[zero] = 0.0 if nu == 0 else -np.inf

    series = (~zero) & (x < max(20.0, 2.0 * nu))
    if np.any(series):
        out[series] = _log_bessel_series(nu, x[series])
    asym = (~zero) & (~series)
    if np.any(asym):
        out[asym] = _log_bessel_uniform(nu, x[asym])
    return float(out[0]) if scalar else out


def _log_bessel_series(nu: float, x: np.ndarray) -> np.ndarray:
    q = (0.5 * x) ** 2
    term = np.ones_like(x)
    total = np.ones_like(x)
    offset = np.zeros_like(x)
    for k in range(_SERIES_MAX_TERMS):
        term = term * q / ((k + 1.0) * (nu + k + 1.0))
        total += term
        big = total > 1e250
        if np.any(big):
            total[big] *= 1e-250
            term[big] *= 1e-250
            offset[big] += 250.0 * math.log(10.0)
        if np.all(term <= total * 1e-18):
            break
    else:
        raise NumericalError("Bessel power series failed to converge")
    return nu * np.log(0.5 * x) - math.lgamma(nu + 1.0) + np.log(total) + offset


def _log_bessel_uniform(nu: float, x: np.ndarray) -> np.ndarray:
    r = np.hypot(nu, x)
    s = 1.0 / r
    exponent = r + (nu * np.log(x / (nu + r)) if nu > 0 else 0.0)
    prefix = -0.5 * _LOG_2PI - 0.5 * np.log(r)
    corr = np.ones_like(x)
    for c, p, dk in _DEBYE:
        corr += c * nu**dk * s**p
    return exponent + prefix + np.log(corr)


_RATIO_ASYMPTOTIC_MIN = 1e5


def bessel_ratio(nu: float, x):
    """I_{nu+1}(x) / I_nu(x) by the Gautschi continued fraction.

    Elementwise Lentz iteration; avoids the catastrophic log subtraction
    at large argument where the ratio approaches 1.  Above x = 1e5 the
    continued fraction would need O(x) terms, so the large-argument
    expansion (already at machine precision there) takes over.
    """
    x = _check_order_arg(nu, x)
    scalar = x.ndim == 0
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    out = np.zeros_like(x)
    huge = x >= _RATIO_ASYMPTOTIC_MIN
    if np.any(huge):
        xv = x[huge]

        # Ratio of the four-term large-argument series of I_{nu+1} and I_nu.
        def expansion(order):
            mu = 4.0 * order**2
            total = np.ones_like(xv)
            term = np.ones_like(xv)
            for k in range(1, 5):
                term = term * -(mu - (2 * k - 1) ** 2) / (8.0 * k * xv)
                total = total + term
            return total

        out[huge] = expansion(nu + 1.0) / expansion(nu)
    pos = (x > 0.0) & ~huge
    if np.any(pos):
        xv = x[pos]
        tiny = 1e-300
        f = np.full_like(xv, tiny)
        c = np.full_like(xv, tiny)
        d = np.zeros_like(xv)
        active = np.ones(xv.shape, dtype=bool)
        for j in range(1, _RATIO_MAX_ITER + 1):
            b = 2.0 * (nu + j) / xv
            d = b + d
            d[d == 0.0] = tiny
            c = b + 1.0 / c
            c[c == 0.0] = tiny
            d = 1.0 / d
            delta = c * d
            f = f * delta
            active &= np.abs(delta - 1.0) >= 1e-16
            if not np.any(active):
                break
        else:
            raise NumericalError("Bessel ratio continued fraction did not converge")
        out[pos] = f
    return float(out[0]) if scalar else out


# --------------------------------------------------------------------------
# vMF quantities
# --------------------------------------------------------------------------


def _check_dim(d: int) -> None:
    if d < 2:
        raise ContractViolation(f"ambient dimension must be >= 2, got {d}")


def log_uniform_density(d: int) -> float:
    """-log(surface area of S^{d-1}), the kappa -> 0 limit of log C_d."""
    _check_dim(d)
    return math.lgamma(0.5 * d) - math.log(2.0) - 0.5 * d * math.log(math.pi)


def log_norm_const(d: int, kappa):
    """log C_d(kappa) with the uniform limit taken analytically near 0."""
    _check_dim(d)
    kappa = np.asarray(kappa, dtype=np.float64)
    scalar = kappa.ndim == 0
    kappa = np.atleast_1d(kappa)
    if np.any(kappa < 0) or not np.all(np.isfinite(kappa)):
        raise ContractViolation("kappa must be finite and >= 0")
    nu = 0.5 * d - 1.0
    out = np.full_like(kappa, log_uniform_density(d))
    big = kappa >= 1e-8
    if np.any(big):
        kv = kappa[big]
        out[big] = nu * np.log(kv) - 0.5 * d * _LOG_2PI - log_bessel_i(nu, kv)
    return float(out[0]) if scalar else out


def mean_resultant(d: int, kappa):
    """A_d(kappa) = I_{d/2}(kappa) / I_{d/2-1}(kappa), in [0, 1)."""
    _check_dim(d)
    return bessel_ratio(0.5 * d - 1.0, kappa)


def mean_resultant_deriv(d: int, kappa):
    """dA_d/dkappa = 1 - A^2 - (d-1)/kappa * A, with the limit 1/d at 0."""
    _check_dim(d)
    kappa = np.asarray(kappa, dtype=np.float64)
    scalar = kappa.ndim == 0
    kappa = np.atleast_1d(kappa)
    out = np.full_like(kappa, 1.0 / d)
    big = kappa > 1e-6
    if np.any(big):
        kv = kappa[big]
        a = mean_resultant(d, kv)
        out[big] = 1.0 - a * a - (d - 1.0) / kv * a
    return float(out[0]) if scalar else out


def entropy_from_kappa(d: int, kappa):
    """Differential entropy in nats of a vMF with the given concentration."""
    _check_dim(d)
    kappa = np.asarray(kappa, dtype=np.float64)
    scalar = kappa.ndim == 0
    kappa = np.atleast_1d(kappa)
    h = -log_norm_const(d, kappa) - kappa * mean_resultant(d, kappa)
    return float(h[0]) if scalar else h


@dataclass(frozen=True)
class VmfParams:
    """Mean direction, concentration, and ambient dimension of a vMF."""

    mu: np.ndarray
    kappa: float
    dim: int

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        object.__setattr__(self, "mu", mu)
        if mu.ndim != 1 or mu.shape[0] != self.dim:
            raise ContractViolation("mu must be 1-D with length dim")
        _check_dim(self.dim)
        if abs(np.linalg.norm(mu) - 1.0) > 1e-9:
            raise ContractViolation("mu must be unit length within 1e-9")
        if not (np.isfinite(self.kappa) and self.kappa >= 0):
            raise ContractViolation("kappa must be finite and >= 0")


def entropy(p: VmfParams) -> float:
    """Entropy in nats; independent of the mean direction."""
    return entropy_from_kappa(p.dim, p.kappa)


def log_density(p: VmfParams, h) -> float:
    """log p(h) = log C_d(kappa) + kappa * mu.h for unit h."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (p.dim,):
        raise ContractViolation(f"h must have shape ({p.dim},)")
    if abs(np.linalg.norm(h) - 1.0) > 1e-6:
        raise ContractViolation("h must be unit length within 1e-6")
    return float(log_norm_const(p.dim, p.kappa) + p.kappa * (p.mu @ h))


def _householder_from_e1(mu: np.ndarray):
    """Reflection mapping e1 to mu (identity when they coincide)."""
    v = -mu.copy()
    v[0] += 1.0
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        return None
    return v / norm


def sample(p: VmfParams, rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw n unit vectors by Wood's rejection algorithm.

    Proposals for the cosine w against the mean direction use a scaled
    beta envelope; directions in the tangent space are uniform.
    """
    if n < 1:
        raise ContractViolation("n must be >= 1")
    d, kappa = p.dim, p.kappa

    if kappa == 0.0:
        g = rng.standard_normal((n, d))
        return g / np.linalg.norm(g, axis=1, keepdims=True)

    b = (d - 1.0) / (2.0 * kappa + math.sqrt(4.0 * kappa**2 + (d - 1.0) ** 2))
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + (d - 1.0) * math.log(1.0 - x0 * x0)

    w = np.empty(n)
    filled = 0
    while filled < n:
        m = max(n - filled, 32)
        z = rng.beta(0.5 * (d - 1.0), 0.5 * (d - 1.0), size=m)
        cand = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.random(m)
        ok = kappa * cand + (d - 1.0) * np.log1p(-x0 * cand) - c >= np.log(u)
        take = min(int(ok.sum()), n - filled)
        w[filled : filled + take] = cand[ok][:take]
        filled += take

    v = rng.standard_normal((n, d - 1))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    out = np.empty((n, d))
    out[:, 0] = w
    out[:, 1:] = np.sqrt(np.clip(1.0 - w * w, 0.0, None))[:, None] * v

    refl = _householder_from_e1(p.mu)
    if refl is not None:
        out -= 2.0 * np.outer(out @ refl, refl)
    return out
