"""Shared numerical kernels: PCHIP, RK4 with step halving, sampling, fitting, quantiles."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from ._jit import njit
from .errors import (
    DegenerateBounds,
    EmptySamples,
    FitDiverged,
    InsufficientSamples,
    NonMonotoneAbscissa,
    StepUnderflow,
    TooFewKnots,
)

MAX_STEP_S = 1.0
MIN_STEP_S = 1e-6


# --------------------------------------------------------------------------
# Monotone cubic Hermite interpolation
# --------------------------------------------------------------------------


@dataclass(eq=False)
class MonotoneInterpolant:
    """Piecewise cubic Hermite interpolant with Fritsch-Carlson slopes."""

    knots_x: np.ndarray
    knots_y: np.ndarray
    slopes: np.ndarray

    def __call__(self, x):
        return eval_interpolant(self, x)

    def __eq__(self, other):
        if not isinstance(other, MonotoneInterpolant):
            return NotImplemented
        return (
            np.array_equal(self.knots_x, other.knots_x)
            and np.array_equal(self.knots_y, other.knots_y)
            and np.array_equal(self.slopes, other.slopes)
        )

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.knots_x[0]), float(self.knots_x[-1])

    def is_increasing(self) -> bool:
        return bool(np.all(np.diff(self.knots_y) > 0))


def _pchip_slopes(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    h = np.diff(x)
    delta = np.diff(y) / h
    n = x.size
    d = np.zeros(n)
    for k in range(1, n - 1):
        if delta[k - 1] * delta[k] <= 0.0:
            d[k] = 0.0
        else:
            w1 = 2.0 * h[k] + h[k - 1]
            w2 = h[k] + 2.0 * h[k - 1]
            d[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k])
    d[0] = _pchip_edge(h[0], h[1], delta[0], delta[1])
    d[-1] = _pchip_edge(h[-1], h[-2], delta[-1], delta[-2])
    return d


def _pchip_edge(h0, h1, m0, m1):
    # three-point end slope, then pulled back to keep the end interval shape-preserving
    d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1)
    if np.sign(d) != np.sign(m0):
        d = 0.0
    elif np.sign(m0) != np.sign(m1) and abs(d) > abs(3.0 * m0):
        d = 3.0 * m0
    return d


def build_monotone_interpolant(xs, ys) -> MonotoneInterpolant:
    x = np.asarray(xs, dtype=np.float64).ravel()
    y = np.asarray(ys, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError(f"xs and ys differ in length ({x.size} vs {y.size})")
    if x.size < 3:
        raise TooFewKnots(f"need at least 3 knots, got {x.size}")
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
        raise ValueError("knots must be finite")
    if np.any(np.diff(x) <= 0.0):
        bad = int(np.argmax(np.diff(x) <= 0.0))
        raise NonMonotoneAbscissa(f"xs not strictly increasing at index {bad + 1}")
    return MonotoneInterpolant(x.copy(), y.copy(), _pchip_slopes(x, y))


@njit
def pchip_eval(xs, ys, ds, x):
    """Evaluate the Hermite cubic at scalar ``x``; clamps outside the knot range."""
    n = xs.shape[0]
    if x <= xs[0]:
        return ys[0]
    if x >= xs[n - 1]:
        return ys[n - 1]
    lo = 0
    hi = n - 1
    while hi - lo > 1:
        mid = (lo + hi) >> 1
        if xs[mid] <= x:
            lo = mid
        else:
            hi = mid
    h = xs[lo + 1] - xs[lo]
    t = (x - xs[lo]) / h
    t1 = 1.0 - t
    h00 = (1.0 + 2.0 * t) * t1 * t1
    h10 = t * t1 * t1
    h01 = t * t * (3.0 - 2.0 * t)
    h11 = t * t * (t - 1.0)
    return h00 * ys[lo] + h10 * h * ds[lo] + h01 * ys[lo + 1] + h11 * h * ds[lo + 1]


def pchip_coefficients(xs, ys, ds) -> np.ndarray:
    """Per-interval power-basis coefficients ``(y0, c1, c2, c3)`` in ``dx = x - x_k``.

    Same cubic as ``pchip_eval`` with no division at evaluation time.  The
    extra last row holds the right boundary value for clamping.
    """
    xs, ys, ds = (np.asarray(a, dtype=np.float64) for a in (xs, ys, ds))
    h = np.diff(xs)
    s = np.diff(ys) / h
    c = np.zeros((xs.size, 4))
    c[:, 0] = ys
    c[:-1, 1] = ds[:-1]
    c[:-1, 2] = (3.0 * s - 2.0 * ds[:-1] - ds[1:]) / h
    c[:-1, 3] = (ds[:-1] + ds[1:] - 2.0 * s) / (h * h)
    return c


@njit(inline="always")
def pchip_eval_poly(xs, coef, x):
    """Evaluate coefficients from ``pchip_coefficients``; clamps like ``pchip_eval``."""
    n = xs.shape[0]
    if x <= xs[0]:
        return coef[0, 0]
    if x >= xs[n - 1]:
        return coef[n - 1, 0]
    k = 0
    hi = n - 1
    while hi - k > 1:
        mid = (k + hi) >> 1
        if xs[mid] <= x:
            k = mid
        else:
            hi = mid
    dx = x - xs[k]
    return coef[k, 0] + dx * (coef[k, 1] + dx * (coef[k, 2] + dx * coef[k, 3]))


@njit
def pchip_eval_array(xs, ys, ds, x):
    out = np.empty(x.shape[0])
    for i in range(x.shape[0]):
        out[i] = pchip_eval(xs, ys, ds, x[i])
    return out


def eval_interpolant(f: MonotoneInterpolant, x):
    if np.ndim(x) == 0:
        return float(pchip_eval(f.knots_x, f.knots_y, f.slopes, float(x)))
    arr = np.asarray(x, dtype=np.float64)
    return pchip_eval_array(f.knots_x, f.knots_y, f.slopes, arr.ravel()).reshape(arr.shape)


# --------------------------------------------------------------------------
# RK4 with step halving
# --------------------------------------------------------------------------


def rk4_step(deriv, t: float, y: np.ndarray, dt: float) -> np.ndarray:
    k1 = np.asarray(deriv(t, y), dtype=np.float64)
    k2 = np.asarray(deriv(t + 0.5 * dt, y + 0.5 * dt * k1), dtype=np.float64)
    k3 = np.asarray(deriv(t + 0.5 * dt, y + 0.5 * dt * k2), dtype=np.float64)
    k4 = np.asarray(deriv(t + dt, y + dt * k3), dtype=np.float64)
    return y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_adaptive_step(state, deriv, t: float, dt_max: float, tol):
    """Advance ``state`` by one accepted RK4 step.

    The step starts at ``min(dt_max, 1 s)`` and is halved until one full step
    and two half steps agree to within ``tol`` (absolute, per component).
    Returns ``(new_state, dt_used)``; the two-half-step result is returned.
    """
    if not dt_max > 0:
        raise ValueError("dt_max must be positive")
    y = np.asarray(state, dtype=np.float64)
    tol = np.broadcast_to(np.asarray(tol, dtype=np.float64), y.shape)
    dt = min(float(dt_max), MAX_STEP_S)
    while dt >= MIN_STEP_S:
        full = rk4_step(deriv, t, y, dt)
        half = rk4_step(deriv, t, y, 0.5 * dt)
        two = rk4_step(deriv, t + 0.5 * dt, half, 0.5 * dt)
        err = np.abs(two - full)
        if np.all(err <= tol):
            return two, dt
        dt *= 0.5
    raise StepUnderflow(f"step fell below {MIN_STEP_S:g} s at t={t:g} without meeting tolerance")


# --------------------------------------------------------------------------
# Random streams
# --------------------------------------------------------------------------

_U64 = 1 << 64


class RngStream:
    """Deterministic random stream keyed by ``(seed, stream_id)``.

    Backed by PCG64 seeded through ``SeedSequence(seed, spawn_key=(stream_id,))``
    so distinct keys give independent streams and equal keys give identical
    sequences regardless of which thread consumes them.
    """

    def __init__(self, seed: int, stream_id: int = 0, _path: tuple = ()):
        seed = int(seed)
        stream_id = int(stream_id)
        if not (0 <= seed < _U64 and 0 <= stream_id < _U64):
            raise ValueError("seed and stream_id must be unsigned 64-bit integers")
        self.seed = seed
        self.stream_id = stream_id
        self._path = tuple(_path)
        ss = np.random.SeedSequence(seed, spawn_key=(stream_id,) + self._path)
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, k: int) -> "RngStream":
        """Independent sub-stream, e.g. one for CTMC draws and one for loads."""
        return RngStream(self.seed, self.stream_id, self._path + (int(k),))

    def uniform(self, size=None):
        return self.gen.random(size)

    def uniform_open(self):
        """One draw from the open interval (0, 1)."""
        u = self.gen.random()
        while u == 0.0:
            u = self.gen.random()
        return u

    def normal(self, size=None):
        return self.gen.standard_normal(size)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, path={self._path})"


# --------------------------------------------------------------------------
# Truncated normal
# --------------------------------------------------------------------------

MIN_ACCEPTANCE = 0.01


def _tn_inverse_cdf(a, b, u):
    # standardised bounds a < b; mirror into the lower tail for accuracy when a > 0
    out = np.empty_like(u)
    upper = a > 0.0
    lo_a, lo_b = a[~upper], b[~upper]
    pa, pb = ndtr(lo_a), ndtr(lo_b)
    out[~upper] = ndtri(pa + u[~upper] * (pb - pa))
    qa, qb = ndtr(-a[upper]), ndtr(-b[upper])
    out[upper] = -ndtri(qa - u[upper] * (qa - qb))
    return np.clip(out, a, b)


def truncated_normal_batch(mu, sigma, lo, hi, rng: RngStream) -> np.ndarray:
    """Vectorised draws from N(mu, sigma^2) restricted to [lo, hi].

    Rejection sampling, except where the acceptance probability is below 1%,
    which switch to the inverse CDF.
    """
    mu, sigma, lo, hi = np.broadcast_arrays(
        *(np.asarray(v, dtype=np.float64) for v in (mu, sigma, lo, hi))
    )
    if np.any(lo >= hi):
        raise DegenerateBounds("lower bound must be below upper bound")
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    a = (lo - mu) / sigma
    b = (hi - mu) / sigma
    accept = ndtr(b) - ndtr(a)
    shape = mu.shape
    z = np.empty(shape)
    narrow = accept < MIN_ACCEPTANCE
    if np.any(narrow):
        z[narrow] = _tn_inverse_cdf(a[narrow], b[narrow], rng.uniform(int(narrow.sum())))
    pending = np.flatnonzero(~narrow.ravel())
    zf, af, bf = z.ravel(), a.ravel(), b.ravel()
    while pending.size:
        draw = rng.normal(pending.size)
        ok = (draw >= af[pending]) & (draw <= bf[pending])
        zf[pending[ok]] = draw[ok]
        pending = pending[~ok]
    x = mu + sigma * z
    return np.clip(x, lo, hi)


def sample_truncated_normal(mu: float, sigma: float, lo: float, hi: float, rng: RngStream) -> float:
    if not lo < hi:
        raise DegenerateBounds(f"lo={lo} must be below hi={hi}")
    return float(truncated_normal_batch(mu, sigma, lo, hi, rng).reshape(()))


# --------------------------------------------------------------------------
# Exponential relaxation fit
# --------------------------------------------------------------------------


@dataclass
class RelaxationFit:
    v_inf: float
    v_p: float
    tau: float
    rmse: float
    vp_negligible: bool = False
    seeds_converged: int = field(default=0, repr=False)


TAU_SEEDS = np.logspace(0.0, 4.0, 17)


def _relax_model(t, v_inf, v_p, tau):
    return v_inf - v_p * np.exp(-t / tau)


def _gauss_newton(t, v, theta, max_iter=200):
    """Damped Gauss-Newton on (v_inf, v_p, log tau).  Returns (theta, sse) or None."""
    lam = 1e-3

    def resid(th):
        return _relax_model(t, th[0], th[1], math.exp(th[2])) - v

    r = resid(theta)
    sse = float(r @ r)
    for _ in range(max_iter):
        tau = math.exp(theta[2])
        e = np.exp(-t / tau)
        jac = np.column_stack([np.ones_like(t), -e, -theta[1] * e * t / tau])
        g = jac.T @ r
        jtj = jac.T @ jac
        improved = False
        while lam < 1e12:
            a = jtj + lam * np.diag(np.diag(jtj) + 1e-30)
            try:
                step = np.linalg.solve(a, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand = theta + step
            if not np.all(np.isfinite(cand)) or abs(cand[2]) > 50:
                lam *= 10.0
                continue
            rc = resid(cand)
            sc = float(rc @ rc)
            if sc <= sse:
                done = sse - sc <= 1e-15 * max(sse, 1e-300) or np.max(np.abs(step)) < 1e-13
                theta, r, sse = cand, rc, sc
                lam = max(lam / 10.0, 1e-12)
                improved = True
                break
            lam *= 10.0
        if not improved or done:
            break
    if not np.all(np.isfinite(theta)):
        return None
    return theta, sse


def fit_exponential_relaxation(ts, vs) -> RelaxationFit:
    """Least-squares fit of ``V(t) = V_inf - V_p exp(-t/tau)`` to a rest recovery.

    Time is measured from the first sample.  Each seed on a log grid of tau in
    [1, 1e4] s starts a damped Gauss-Newton run; the lowest-residual result wins.
    """
    t = np.asarray(ts, dtype=np.float64).ravel()
    v = np.asarray(vs, dtype=np.float64).ravel()
    if t.size != v.size:
        raise ValueError("ts and vs differ in length")
    if t.size < 5:
        raise InsufficientSamples(f"need at least 5 samples, got {t.size}")
    if np.any(np.diff(t) <= 0):
        raise ValueError("ts must be strictly increasing")
    t = t - t[0]

    span = float(v.max() - v.min())
    if span <= 1e-12 * max(1.0, float(np.abs(v).max())):
        return RelaxationFit(float(v[-1]), 0.0, float(TAU_SEEDS[0]), 0.0, vp_negligible=True)

    best = None
    converged = 0
    for tau0 in TAU_SEEDS:
        theta0 = np.array([v[-1], v[-1] - v[0], math.log(tau0)])
        res = _gauss_newton(t, v, theta0)
        if res is None:
            continue
        converged += 1
        if best is None or res[1] < best[1]:
            best = res
    if best is None:
        raise FitDiverged("no seed converged")
    theta, sse = best
    rmse = math.sqrt(sse / t.size)
    v_p = float(theta[1])
    return RelaxationFit(
        v_inf=float(theta[0]),
        v_p=v_p,
        tau=math.exp(theta[2]),
        rmse=rmse,
        vp_negligible=abs(v_p) <= 1e-9,
        seeds_converged=converged,
    )


# --------------------------------------------------------------------------
# Quantiles
# --------------------------------------------------------------------------


def _nearest_rank(q: float, n: int) -> int:
    # 1-based rank ceil(q*n); the small slack absorbs products like 0.07*100
    return min(n, max(1, math.ceil(q * n - 1e-9)))


def empirical_quantile(samples, q: float) -> float:
    """Nearest-rank quantile: the ``ceil(q*n)``-th smallest sample."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size == 0:
        raise EmptySamples("cannot take a quantile of no samples")
    if not 0.0 < q < 1.0:
        raise ValueError(f"q must lie in (0, 1), got {q}")
    k = _nearest_rank(q, x.size)
    return float(np.partition(x, k - 1)[k - 1])


def empirical_quantiles(samples, qs) -> dict:
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    if x.size == 0:
        raise EmptySamples("cannot take a quantile of no samples")
    return {float(q): float(x[_nearest_rank(q, x.size) - 1]) for q in qs}
