"""Clipped normal distribution on a bounded interval [lo, hi].

A clipped normal draws ``z ~ N(mu, sigma)`` and returns ``clamp(z, lo, hi)``.
The resulting measure has a probability atom at each bound plus the normal
density on the open interior:

    F_N(lo) * delta(x - lo) + 1{lo < x < hi} f_N(x) + (1 - F_N(hi)) * delta(x - hi)

Every function here broadcasts over numpy arrays, so the training code can
evaluate a whole minibatch of per-dimension parameters in one call.  Scalar
inputs give Python floats back.
"""

from __future__ import annotations

import logging
import math
from typing import NamedTuple, Union

import numpy as np

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

SQRT2 = math.sqrt(2.0)
SQRT_PI = math.sqrt(math.pi)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# mass below this is treated as exactly zero in m*log(m/m') terms
TINY_MASS = 1e-300
# atom masses of the current policy below this trigger gradient clamping
GRAD_GUARD_MASS = 1e-12
GRAD_GUARD_RATIO = 1e12

_SERIES_TERMS = 64
_CF_DEPTH = 90
_SERIES_CUTOFF = 2.5


class ParameterError(ValueError):
    """Invalid distribution parameters (non-positive sigma, bad bounds)."""


class DomainError(ValueError):
    """Evaluation point outside the support [lo, hi]."""


class GaussParams(NamedTuple):
    mu: ArrayLike
    sigma: ArrayLike


class Bounds(NamedTuple):
    lo: float
    hi: float


class MassPoint(NamedTuple):
    kind: str  # "atom_lo", "interior" or "atom_hi"
    value: float


class GradPair(NamedTuple):
    """Partial derivatives with respect to the location and scale.

    ``clamped`` is true wherever an atom-mass guard was applied.
    """

    d_mu: ArrayLike
    d_sigma: ArrayLike
    clamped: ArrayLike = False


def _out(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x


def _out_bool(x):
    x = np.asarray(x)
    return bool(x) if x.ndim == 0 else x


# ---------------------------------------------------------------------------
# error function
# ---------------------------------------------------------------------------

def _erf_series(z: np.ndarray) -> np.ndarray:
    # erf(z) = 2/sqrt(pi) exp(-z^2) sum_n 2^n z^(2n+1) / (2n+1)!!
    # all terms share the sign of z, so there is no cancellation
    z2 = z * z
    term = z.copy()
    total = z.copy()
    for n in range(1, _SERIES_TERMS):
        term = term * (2.0 * z2 / (2 * n + 1))
        total = total + term
    return (2.0 / SQRT_PI) * np.exp(-z2) * total


def _erfc_cf(z: np.ndarray) -> np.ndarray:
    # Laplace continued fraction, valid for z > 0:
    # erfc(z) = exp(-z^2)/sqrt(pi) * 1/(z + (1/2)/(z + 1/(z + (3/2)/(z + ...))))
    tail = z.copy()
    for k in range(_CF_DEPTH, 0, -1):
        tail = z + (0.5 * k) / tail
    return np.exp(-z * z) / (SQRT_PI * tail)


def erfc_impl(z: ArrayLike) -> ArrayLike:
    """Complementary error function, accurate in relative terms in both tails."""
    z = np.asarray(z, dtype=float)
    a = np.abs(z)
    small = a < _SERIES_CUTOFF
    res = np.empty_like(a)
    if np.any(small):
        res[small] = 1.0 - _erf_series(a[small])
    big = ~small
    if np.any(big):
        with np.errstate(under="ignore"):
            res[big] = _erfc_cf(a[big])
    res = np.where(z < 0, 2.0 - res, res)
    return _out(res)


def erf_impl(z: ArrayLike) -> ArrayLike:
    """Error function.

    Power series (positive terms only) for |z| < 2.5 and the Laplace
    continued fraction for erfc beyond.  Absolute error is below 1e-15 on
    |z| <= 6 and the function is exactly odd.
    """
    z = np.asarray(z, dtype=float)
    a = np.abs(z)
    small = a < _SERIES_CUTOFF
    res = np.empty_like(a)
    if np.any(small):
        res[small] = _erf_series(a[small])
    big = ~small
    if np.any(big):
        with np.errstate(under="ignore"):
            res[big] = 1.0 - _erfc_cf(a[big])
    return _out(np.copysign(res, z))


# ---------------------------------------------------------------------------
# normal building blocks
# ---------------------------------------------------------------------------

def norm_pdf(x, mu, sigma):
    z = (np.asarray(x, dtype=float) - mu) / sigma
    return np.exp(-0.5 * z * z) * INV_SQRT_2PI / sigma


def norm_cdf(x, mu, sigma):
    """Lower tail F_N(x; mu, sigma)."""
    return np.asarray(erfc_impl(-(np.asarray(x, dtype=float) - mu) / (sigma * SQRT2))) * 0.5


def norm_sf(x, mu, sigma):
    """Upper tail 1 - F_N(x; mu, sigma) without cancellation."""
    return np.asarray(erfc_impl((np.asarray(x, dtype=float) - mu) / (sigma * SQRT2))) * 0.5


def _interior_erf_diff(za, zb):
    """erf(zb/sqrt2) - erf(za/sqrt2), evaluated through whichever tail is safer."""
    za = np.asarray(za, dtype=float)
    zb = np.asarray(zb, dtype=float)
    upper = za > 0
    lower = zb < 0
    with np.errstate(under="ignore"):
        mid = np.asarray(erf_impl(zb / SQRT2)) - np.asarray(erf_impl(za / SQRT2))
        up = np.asarray(erfc_impl(za / SQRT2)) - np.asarray(erfc_impl(zb / SQRT2))
        lowv = np.asarray(erfc_impl(-zb / SQRT2)) - np.asarray(erfc_impl(-za / SQRT2))
    return np.where(upper, up, np.where(lower, lowv, mid))


def _check(p: GaussParams, bnd: Bounds) -> None:
    mu = np.asarray(p.mu, dtype=float)
    sigma = np.asarray(p.sigma, dtype=float)
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma)) and np.all(sigma > 0)):
        raise ParameterError(f"need finite mu and finite sigma > 0, got mu={p.mu}, sigma={p.sigma}")
    if not (math.isfinite(bnd.lo) and math.isfinite(bnd.hi) and bnd.lo < bnd.hi):
        raise ParameterError(f"need finite lo < hi, got [{bnd.lo}, {bnd.hi}]")


def _xlogy_ratio(m, m_ref):
    """m * log(m / m_ref) with 0 log 0 = 0 and +inf when only m_ref vanishes."""
    m = np.asarray(m, dtype=float)
    m_ref = np.asarray(m_ref, dtype=float)
    zero = m <= TINY_MASS
    blow = (~zero) & (m_ref <= TINY_MASS)
    safe_m = np.where(zero, 1.0, m)
    safe_ref = np.where(m_ref <= TINY_MASS, 1.0, m_ref)
    val = m * (np.log(safe_m) - np.log(safe_ref))
    return np.where(zero, 0.0, np.where(blow, np.inf, val))


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def mass(x: float, p: GaussParams, bnd: Bounds) -> MassPoint:
    """Probability mass (at a bound) or density (interior) of ``x``."""
    _check(p, bnd)
    if not bnd.lo <= x <= bnd.hi:
        raise DomainError(f"x={x} outside [{bnd.lo}, {bnd.hi}]")
    if x == bnd.lo:
        return MassPoint("atom_lo", float(norm_cdf(bnd.lo, p.mu, p.sigma)))
    if x == bnd.hi:
        return MassPoint("atom_hi", float(norm_sf(bnd.hi, p.mu, p.sigma)))
    return MassPoint("interior", float(norm_pdf(x, p.mu, p.sigma)))


def atom_masses(p: GaussParams, bnd: Bounds):
    """(mass at lo, mass at hi)."""
    return norm_cdf(bnd.lo, p.mu, p.sigma), norm_sf(bnd.hi, p.mu, p.sigma)


def sample(p: GaussParams, bnd: Bounds, rng: np.random.Generator) -> ArrayLike:
    """Draw from N(mu, sigma) and clamp to the bounds."""
    _check(p, bnd)
    shape = np.broadcast(np.asarray(p.mu), np.asarray(p.sigma)).shape
    z = np.asarray(p.mu) + np.asarray(p.sigma) * rng.standard_normal(shape)
    return _out(np.clip(z, bnd.lo, bnd.hi))


def kl(p: GaussParams, q: GaussParams, bnd: Bounds) -> ArrayLike:
    """Closed-form D_KL(p || q) between two clipped normals on the same bounds.

    Returns +inf where p puts mass on an atom that q gives (numerically) zero
    mass.
    """
    _check(p, bnd)
    _check(q, bnd)
    a, b = bnd
    mp, sp = np.asarray(p.mu, float), np.asarray(p.sigma, float)
    mq, sq = np.asarray(q.mu, float), np.asarray(q.sigma, float)

    with np.errstate(under="ignore"):
        fp_a, sp_b = atom_masses(p, bnd)
        fq_a, sq_b = atom_masses(q, bnd)
        za = (a - mp) / sp
        zb = (b - mp) / sp
        ea = np.exp(-0.5 * za * za)
        eb = np.exp(-0.5 * zb * zb)
    erf_diff = _interior_erf_diff(za, zb)

    dm = mp - mq
    ratio = sp * sp / (sq * sq)
    half_c3 = 0.5 * (1.0 - ratio)
    lin = sp * dm / (sq * sq)

    interior = (
        0.5 * (np.log(sq / sp) + dm * dm / (2.0 * sq * sq) - half_c3) * erf_diff
        + INV_SQRT_2PI * (half_c3 * zb - lin) * eb
        - INV_SQRT_2PI * (half_c3 * za - lin) * ea
    )
    return _out(_xlogy_ratio(fp_a, fq_a) + interior + _xlogy_ratio(sp_b, sq_b))


def _guarded_ratio(num, den):
    num = np.asarray(num, float)
    den = np.asarray(den, float)
    guard = den < GRAD_GUARD_MASS
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        raw = num / np.where(den > 0, den, 1.0)
    raw = np.where(den > 0, raw, np.where(num > TINY_MASS, np.inf, 0.0))
    clamped = guard & (raw > GRAD_GUARD_RATIO)
    return np.where(guard, np.minimum(raw, GRAD_GUARD_RATIO), raw), clamped


def kl_grad(p: GaussParams, q: GaussParams, bnd: Bounds) -> GradPair:
    """Gradient of D_KL(p || q) with respect to q's location and scale."""
    _check(p, bnd)
    _check(q, bnd)
    a, b = bnd
    mp, sp = np.asarray(p.mu, float), np.asarray(p.sigma, float)
    mq, sq = np.asarray(q.mu, float), np.asarray(q.sigma, float)

    with np.errstate(under="ignore"):
        fp_a, sp_b = atom_masses(p, bnd)
        fq_a, sq_b = atom_masses(q, bnd)
        za = (a - mp) / sp
        zb = (b - mp) / sp
        ea = np.exp(-0.5 * za * za)
        eb = np.exp(-0.5 * zb * zb)
        dens_a = norm_pdf(a, mq, sq)
        dens_b = norm_pdf(b, mq, sq)
    erf_diff = _interior_erf_diff(za, zb)

    r_lo, c_lo = _guarded_ratio(fp_a, fq_a)
    r_hi, c_hi = _guarded_ratio(sp_b, sq_b)
    if np.any(c_lo) or np.any(c_hi):
        logger.debug("kl_grad: atom-mass guard engaged")

    dm = mp - mq
    sq2 = sq * sq
    sq3 = sq2 * sq

    d_mu = (
        r_lo * dens_a
        - 0.5 * dm / sq2 * erf_diff
        + INV_SQRT_2PI * sp / sq2 * (eb - ea)
        - r_hi * dens_b
    )
    d_sigma = (
        (a - mq) / sq * r_lo * dens_a
        + 0.5 * (1.0 / sq - dm * dm / sq3 - sp * sp / sq3) * erf_diff
        + INV_SQRT_2PI * (sp * sp * zb / sq3 + 2.0 * sp * dm / sq3) * eb
        - INV_SQRT_2PI * (sp * sp * za / sq3 + 2.0 * sp * dm / sq3) * ea
        - (b - mq) / sq * r_hi * dens_b
    )
    return GradPair(_out(d_mu), _out(d_sigma), _out_bool(c_lo | c_hi))


def _branches(x, bnd: Bounds):
    x = np.asarray(x, dtype=float)
    if np.any(x < bnd.lo) or np.any(x > bnd.hi):
        raise DomainError(f"x outside [{bnd.lo}, {bnd.hi}]")
    return x, x == bnd.lo, x == bnd.hi


def iw(x: ArrayLike, q: GaussParams, p: GaussParams, bnd: Bounds) -> ArrayLike:
    """Importance weight q(x) / p(x), with q the current and p the behavior policy.

    Uses the atom ratio at either bound and the density ratio inside.
    A vanishing denominator yields +inf and a logged warning.
    """
    _check(q, bnd)
    _check(p, bnd)
    x, at_lo, at_hi = _branches(x, bnd)
    with np.errstate(under="ignore", over="ignore"):
        q_lo, q_hi = atom_masses(q, bnd)
        p_lo, p_hi = atom_masses(p, bnd)
        zq = (x - q.mu) / q.sigma
        zp = (x - p.mu) / p.sigma
        dens_ratio = np.exp(-0.5 * (zq * zq - zp * zp)) * (np.asarray(p.sigma) / q.sigma)
    num = np.where(at_lo, q_lo, np.where(at_hi, q_hi, 1.0))
    den = np.where(at_lo, p_lo, np.where(at_hi, p_hi, 1.0))
    if np.any(den <= 0.0):
        logger.warning("iw: behavior atom mass is zero; returning +inf")
    with np.errstate(divide="ignore", invalid="ignore"):
        atom_ratio = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.inf)
    return _out(np.where(at_lo | at_hi, atom_ratio, dens_ratio))


def iw_grad(x: ArrayLike, q: GaussParams, p: GaussParams, bnd: Bounds) -> GradPair:
    """Gradient of :func:`iw` with respect to q's location and scale."""
    _check(q, bnd)
    _check(p, bnd)
    x, at_lo, at_hi = _branches(x, bnd)
    a, b = bnd
    mq, sq = np.asarray(q.mu, float), np.asarray(q.sigma, float)
    with np.errstate(under="ignore"):
        p_lo, p_hi = atom_masses(p, bnd)
        dens_q_a = norm_pdf(a, mq, sq)
        dens_q_b = norm_pdf(b, mq, sq)
    ratio = np.asarray(iw(np.where(at_lo | at_hi, (a + b) / 2, x), q, p, bnd))
    u = (x - mq) / sq

    with np.errstate(divide="ignore", invalid="ignore"):
        inv_p_lo = np.where(p_lo > 0, 1.0 / np.where(p_lo > 0, p_lo, 1.0), np.inf)
        inv_p_hi = np.where(p_hi > 0, 1.0 / np.where(p_hi > 0, p_hi, 1.0), np.inf)

    d_mu = np.where(
        at_lo,
        -dens_q_a * inv_p_lo,
        np.where(at_hi, dens_q_b * inv_p_hi, u / sq * ratio),
    )
    d_sigma = np.where(
        at_lo,
        -(a - mq) / sq * dens_q_a * inv_p_lo,
        np.where(at_hi, (b - mq) / sq * dens_q_b * inv_p_hi, (u * u - 1.0) / sq * ratio),
    )
    return GradPair(_out(d_mu), _out(d_sigma), False)
