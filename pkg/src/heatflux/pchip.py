"""Shape-preserving piecewise cubic Hermite interpolation on equidistant knots.

Interior derivatives are the harmonic mean of the two adjacent secant slopes
and are zeroed wherever the secants change sign, so the interpolant stays
inside the per-interval value envelope (no overshoot, no spurious wiggles).
Endpoint derivatives come from the one-sided three-point formula, limited so
they never point against the adjacent secant and never exceed three times it
when the first two secants disagree in sign; without the limiter the end
intervals can leave the value envelope.

Besides construction and evaluation this module provides the sensitivity of
the interpolated value with respect to the data values (`grad_wrt_values`),
which the adjoint gradient assembly relies on, and a nested-partition
refinement loop (`refine_to_tolerance`).

`FluxParameter` bundles the two boundary heat-flux value vectors that the
inverse solver optimizes, together with their shared enthalpy partition and
box bound.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from bisect import bisect_right

from .errors import RefinementError, ValidationError

# Relative tolerance for accepting a knot vector as equidistant.
EQUIDISTANT_RTOL = 1e-12

PCHIP_CSV_HEADER = ["knot", "value", "slope"]


def _uniform_spacing(knots: np.ndarray) -> float:
    """Return the common spacing h, or raise if knots are not equidistant."""
    if knots.ndim != 1 or knots.size < 3:
        raise ValidationError(f"need at least 3 knots, got shape {knots.shape}")
    if not np.isfinite(knots).all():
        raise ValidationError("knots must be finite")
    if (np.diff(knots) <= 0).any():
        raise ValidationError("knots must be strictly increasing")
    span = knots[-1] - knots[0]
    h = span / (knots.size - 1)
    ideal = knots[0] + h * np.arange(knots.size)
    if np.abs(knots - ideal).max() > EQUIDISTANT_RTOL * span:
        raise ValidationError("knots must be equidistant")
    return float(h)


@dataclass(frozen=True, eq=False)
class Pchip:
    """Monotonicity-preserving cubic Hermite interpolant on equidistant knots."""

    knots: np.ndarray
    values: np.ndarray
    slopes: np.ndarray
    interval_width: float

    def __post_init__(self):
        for name in ("knots", "values", "slopes"):
            arr = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, arr)
        if not (self.knots.shape == self.values.shape == self.slopes.shape):
            raise ValidationError("knots, values and slopes must have equal shapes")
        if not np.isfinite(self.values).all() or not np.isfinite(self.slopes).all():
            raise ValidationError("values and slopes must be finite")
        h = _uniform_spacing(self.knots)
        if abs(h - self.interval_width) > EQUIDISTANT_RTOL * abs(h) * self.knots.size:
            raise ValidationError("interval_width inconsistent with knots")
        # Cache the per-interval cubic in the local coordinate t = (x - x_i)/h,
        # p(t) = c0 + t (c1 + t (c2 + t c3)), plus plain-float copies of all
        # arrays; evaluation sits in the innermost solver loops.
        fi, fj = self.values[:-1], self.values[1:]
        di, dj = h * self.slopes[:-1], h * self.slopes[1:]
        coef = np.empty((4, self.knots.size - 1))
        coef[0] = fi
        coef[1] = di
        coef[2] = 3.0 * (fj - fi) - 2.0 * di - dj
        coef[3] = 2.0 * (fi - fj) + di + dj
        object.__setattr__(self, "_coef", coef)
        object.__setattr__(self, "_clist", coef.tolist())
        object.__setattr__(self, "_klist", self.knots.tolist())
        object.__setattr__(self, "_vlist", self.values.tolist())
        object.__setattr__(self, "_slist", self.slopes.tolist())
        object.__setattr__(self, "_inv_h", 1.0 / h)

    @property
    def n(self) -> int:
        return self.knots.size


def _limit_endpoint(d: float, near: float, far: float) -> float:
    """Clip a one-sided endpoint slope into the shape-preserving range.

    `near` is the secant of the end interval, `far` the next one. A slope
    pointing against `near` would immediately leave the interval envelope, so
    it is zeroed; when the two secants disagree the magnitude is capped at
    3 |near| (the classical monotonicity bound).
    """
    if np.sign(d) != np.sign(near):
        return 0.0
    if np.sign(near) != np.sign(far) and abs(d) > 3.0 * abs(near):
        return 3.0 * near
    return d


def _harmonic_slopes(values: np.ndarray, h: float) -> np.ndarray:
    """Derivative vector of the shape-preserving construction."""
    delta = np.diff(values) / h
    n = values.size
    d = np.empty(n)
    d[0] = _limit_endpoint(1.5 * delta[0] - 0.5 * delta[1], delta[0], delta[1])
    d[-1] = _limit_endpoint(1.5 * delta[-1] - 0.5 * delta[-2], delta[-1], delta[-2])
    prod = delta[:-1] * delta[1:]
    ssum = delta[:-1] + delta[1:]
    # Harmonic mean where the secants agree in sign; zero on a sign change and
    # in the degenerate flat case (both secants zero), which keeps the
    # interpolant monotone on each interval.
    interior = np.zeros(n - 2)
    ok = prod > 0.0
    interior[ok] = 2.0 * np.abs(prod[ok]) / ssum[ok]
    d[1:-1] = interior
    return d


def build_pchip(knots, values) -> Pchip:
    """Construct the interpolant for the given equidistant data.

    Parameters
    ----------
    knots : array_like
        Strictly increasing, equidistant abscissae (at least 3).
    values : array_like
        Data values, same length as `knots`.

    Raises
    ------
    ValidationError
        If the partition is not equidistant/increasing or sizes mismatch.
    """
    knots = np.asarray(knots, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.shape != knots.shape:
        raise ValidationError("values must match knots in shape")
    if not np.isfinite(values).all():
        raise ValidationError("values must be finite")
    h = _uniform_spacing(knots)
    slopes = _harmonic_slopes(values, h)
    return Pchip(knots.copy(), values.copy(), slopes, h)


def _locate(p: Pchip, x, clamp: bool):
    """Map query points to (interval index, local coordinate, outside mask)."""
    xq = np.asarray(x, dtype=float)
    lo, hi = p.knots[0], p.knots[-1]
    span = hi - lo
    below = xq < lo - EQUIDISTANT_RTOL * span
    above = xq > hi + EQUIDISTANT_RTOL * span
    outside = below | above
    if outside.any() and not clamp:
        raise ValidationError(
            f"evaluation point outside [{lo}, {hi}] and clamping is off"
        )
    xc = np.minimum(np.maximum(xq, lo), hi)
    idx = np.minimum(np.searchsorted(p.knots, xc, side="right") - 1, p.n - 2)
    t = (xc - p.knots[idx]) / p.interval_width
    return xq, idx, t, outside


def _eval_scalar(p: Pchip, x: float, clamp: bool):
    kl = p._klist
    lo, hi = kl[0], kl[-1]
    tol = EQUIDISTANT_RTOL * (hi - lo)
    if x < lo - tol or x > hi + tol:
        if not clamp:
            raise ValidationError(
                f"evaluation point outside [{lo}, {hi}] and clamping is off"
            )
        return (p._vlist[0], 0.0) if x < lo else (p._vlist[-1], 0.0)
    xc = lo if x < lo else (hi if x > hi else x)
    i = int((xc - lo) * p._inv_h)
    if i > p.n - 2:
        i = p.n - 2
    elif i < 0:
        i = 0
    if xc == kl[i]:
        return p._vlist[i], p._slist[i]
    if xc == kl[i + 1]:
        return p._vlist[i + 1], p._slist[i + 1]
    t = (xc - kl[i]) * p._inv_h
    c0, c1, c2, c3 = p._clist[0][i], p._clist[1][i], p._clist[2][i], p._clist[3][i]
    value = c0 + t * (c1 + t * (c2 + t * c3))
    deriv = (c1 + t * (2.0 * c2 + 3.0 * t * c3)) * p._inv_h
    return value, deriv


def eval(p: Pchip, x, clamp: bool = False):
    """Evaluate value and first derivative of the interpolant.

    Accepts a scalar or an array of points. With ``clamp`` set, points outside
    the knot range evaluate to the nearest endpoint value with derivative 0;
    without it they raise a :class:`ValidationError`.
    """
    if np.ndim(x) == 0:
        return _eval_scalar(p, float(x), clamp)
    xq = np.asarray(x, dtype=float)
    lo, hi = p.knots[0], p.knots[-1]
    span = hi - lo
    outside = (xq < lo - EQUIDISTANT_RTOL * span) | (xq > hi + EQUIDISTANT_RTOL * span)
    if outside.any() and not clamp:
        raise ValidationError(
            f"evaluation point outside [{lo}, {hi}] and clamping is off"
        )
    xc = np.minimum(np.maximum(xq, lo), hi)
    # Equidistant knots make the interval index arithmetic; rounding at a
    # knot can pick either adjacent interval, and the knot-hit branches below
    # restore exact nodal values in both cases.
    idx = np.clip(((xc - lo) * p._inv_h).astype(np.intp), 0, p.n - 2)
    t = (xc - p.knots[idx]) * p._inv_h
    c0 = p._coef[0][idx]
    c1 = p._coef[1][idx]
    c2 = p._coef[2][idx]
    c3 = p._coef[3][idx]
    value = c0 + t * (c1 + t * (c2 + t * c3))
    deriv = (c1 + t * (2.0 * c2 + 3.0 * t * c3)) * p._inv_h
    # Exact interpolation whenever a query hits a knot (either interval end).
    at_lo = xc == p.knots[idx]
    if at_lo.any():
        j = idx[at_lo]
        value[at_lo] = p.values[j]
        deriv[at_lo] = p.slopes[j]
    at_hi = xc == p.knots[idx + 1]
    if at_hi.any():
        j = idx[at_hi] + 1
        value[at_hi] = p.values[j]
        deriv[at_hi] = p.slopes[j]
    if outside.any():
        deriv[outside] = 0.0
    return value, deriv


def _slope_jacobian(p: Pchip) -> np.ndarray:
    """Dense matrix J with J[k, i] = d slope_k / d value_i.

    Rows of interior knots whose slope was zeroed by the sign rule are zero
    (the construction is not differentiable there; 0 is the subgradient
    choice that keeps the gradient defined everywhere).
    """
    n = p.n
    inv_h = 1.0 / p.interval_width
    delta = np.diff(p.values) * inv_h
    J = np.zeros((n, n))
    d0_raw = 1.5 * delta[0] - 0.5 * delta[1]
    if np.sign(d0_raw) != np.sign(delta[0]):
        pass  # limiter pinned the slope at 0; subgradient row stays zero
    elif np.sign(delta[0]) != np.sign(delta[1]) and abs(d0_raw) > 3.0 * abs(delta[0]):
        J[0, 0] = -3.0 * inv_h
        J[0, 1] = 3.0 * inv_h
    else:
        J[0, 0] = -1.5 * inv_h
        J[0, 1] = 2.0 * inv_h
        J[0, 2] = -0.5 * inv_h
    dn_raw = 1.5 * delta[-1] - 0.5 * delta[-2]
    if np.sign(dn_raw) != np.sign(delta[-1]):
        pass
    elif np.sign(delta[-1]) != np.sign(delta[-2]) and abs(dn_raw) > 3.0 * abs(delta[-1]):
        J[n - 1, n - 2] = -3.0 * inv_h
        J[n - 1, n - 1] = 3.0 * inv_h
    else:
        J[n - 1, n - 1] = 1.5 * inv_h
        J[n - 1, n - 2] = -2.0 * inv_h
        J[n - 1, n - 3] = 0.5 * inv_h
    a, b = delta[:-1], delta[1:]
    ok = a * b > 0.0
    ssq = np.where(ok, (a + b) ** 2, 1.0)
    dga = np.where(ok, 2.0 * b * b / ssq, 0.0)
    dgb = np.where(ok, 2.0 * a * a / ssq, 0.0)
    rows = np.arange(1, n - 1)
    J[rows, rows - 1] = -dga * inv_h
    J[rows, rows] = (dga - dgb) * inv_h
    J[rows, rows + 1] = dgb * inv_h
    return J


def grad_wrt_values_many(p: Pchip, x, clamp: bool = False) -> np.ndarray:
    """Rows of sensitivities d p(x_q) / d values for many query points.

    Returns an array of shape (len(x), n). Each row has at most 4 consecutive
    nonzero entries because a point in interval i only sees values i-1..i+2
    through the two interval slopes.
    """
    xq, idx, t, outside = _locate(p, np.atleast_1d(x), clamp)
    h = p.interval_width
    s = 1.0 - t
    phi_s = s * s * (3.0 - 2.0 * s)
    phi_t = t * t * (3.0 - 2.0 * t)
    H3 = -h * s * s * (s - 1.0)
    H4 = h * t * t * (t - 1.0)
    J = _slope_jacobian(p)
    G = H3[:, None] * J[idx] + H4[:, None] * J[idx + 1]
    rows = np.arange(idx.size)
    G[rows, idx] += phi_s
    G[rows, idx + 1] += phi_t
    return G


def grad_wrt_values(p: Pchip, x: float, clamp: bool = False) -> np.ndarray:
    """Sensitivity vector d p(x) / d values at a single point."""
    return grad_wrt_values_many(p, [x], clamp=clamp)[0]


def _sample(fn, xs: np.ndarray) -> np.ndarray:
    try:
        out = np.asarray(fn(xs), dtype=float)
        if out.shape == xs.shape:
            return out
    except Exception:
        pass
    return np.array([float(fn(x)) for x in xs])


def refine_to_tolerance(sampler, a: float, b: float, epsilon: float, max_level: int = 12):
    """Double the partition density until the dense sup-error drops below epsilon.

    Level i uses 2**i + 1 equidistant knots on [a, b]; the error is estimated
    on a uniform grid of 10001 points. Returns ``(level, interpolant,
    max_error)`` for the first satisfying level.

    Raises
    ------
    RefinementError
        If `max_level` is reached without meeting the tolerance.
    ValidationError
        If epsilon is negative or the interval is empty.
    """
    if not b > a:
        raise ValidationError("refinement interval must satisfy b > a")
    if epsilon < 0:
        raise ValidationError("epsilon must be nonnegative")
    dense = np.linspace(a, b, 10001)
    target = _sample(sampler, dense)
    err = np.inf
    for level in range(1, max_level + 1):
        knots = np.linspace(a, b, 2**level + 1)
        p = build_pchip(knots, _sample(sampler, knots))
        err = float(np.abs(eval(p, dense)[0] - target).max())
        if err < epsilon:
            return level, p, err
    raise RefinementError(
        f"sup-error {err:.3e} still above {epsilon:.3e} at level {max_level}",
        level=max_level,
        max_error=err,
    )


@dataclass(frozen=True, eq=False)
class FluxParameter:
    """Stacked boundary-flux values on a shared equidistant enthalpy partition.

    The first half of `beta` holds the values of the flux at x = 0, the second
    half the values of the flux at x = L, both tabulated on `partition` (which
    runs from 0 to u_max). All entries live in the box [0, beta_max].
    """

    beta: np.ndarray
    partition: np.ndarray
    beta_max: float

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        part = np.asarray(self.partition, dtype=float)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "partition", part)
        h = _uniform_spacing(part)
        if abs(part[0]) > EQUIDISTANT_RTOL * part[-1]:
            raise ValidationError("flux partition must start at 0")
        if beta.ndim != 1 or beta.size != 2 * part.size:
            raise ValidationError(
                f"beta must have length {2 * part.size}, got {beta.size}"
            )
        if not np.isfinite(beta).all():
            raise ValidationError("beta must be finite")
        if self.beta_max <= 0:
            raise ValidationError("beta_max must be positive")
        if (beta < 0).any() or (beta > self.beta_max).any():
            raise ValidationError("beta outside the box [0, beta_max]")
        _ = h

    @property
    def n(self) -> int:
        """Number of knots per flux."""
        return self.partition.size

    @property
    def u_max(self) -> float:
        return float(self.partition[-1])


def flux_interpolants(fp: FluxParameter) -> tuple[Pchip, Pchip]:
    """Interpolants (flux at x=0, flux at x=L) for the current parameters."""
    n = fp.n
    return (
        build_pchip(fp.partition, fp.beta[:n]),
        build_pchip(fp.partition, fp.beta[n:]),
    )


def render_pchip_csv(p: Pchip) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(PCHIP_CSV_HEADER)
    for k, v, d in zip(p.knots, p.values, p.slopes):
        writer.writerow([repr(float(k)), repr(float(v)), repr(float(d))])
    return buf.getvalue()


def save_pchip(p: Pchip, path) -> None:
    """Write the interpolant as `knot,value,slope` CSV rows."""
    with open(path, "w", newline="") as fh:
        fh.write(render_pchip_csv(p))


def load_pchip(path) -> Pchip:
    """Read an interpolant previously written by :func:`save_pchip`.

    Stored slopes are taken as-is, so a file can carry interpolants whose
    derivatives were produced elsewhere, as long as the knots are equidistant.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != PCHIP_CSV_HEADER:
        raise ValidationError(f"{path}: expected header {','.join(PCHIP_CSV_HEADER)}")
    try:
        data = np.array([[float(c) for c in row] for row in rows[1:] if row])
    except ValueError as exc:
        raise ValidationError(f"{path}: non-numeric cell ({exc})") from exc
    if data.ndim != 2 or data.shape[1] != 3:
        raise ValidationError(f"{path}: expected 3 columns")
    knots, values, slopes = data.T
    h = _uniform_spacing(knots)
    return Pchip(knots, values, slopes, h)
