"""Hill-type muscle-tendon unit with an elastic tendon.

The fiber length is found each sample by a Brent-Dekker root solve of the
force balance between tendon and pennated fiber. Hot paths are compiled with
numba; the Python layer only packs parameters and builds result records.
"""

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numba import njit
from scipy.signal import butter

from .errors import ConvergenceError

# Normalized force relationships (knot tables).
ACTIVE_FL_X = (-5, 0, 0.401, 0.402, 0.4035, 0.52725, 0.62875, 0.71875, 0.86125, 1.045,
               1.2175, 1.43875, 1.61875, 1.62, 1.621, 2.2, 5)
ACTIVE_FL_Y = (0, 0, 0, 0, 0, 0.226667, 0.636667, 0.856667, 0.95, 0.993333,
               0.77, 0.246667, 0, 0, 0, 0, 0)
PASSIVE_FL_X = (-5, 0.998, 0.999, 1, 1.1, 1.2, 1.3, 1.4, 1.5, 1.6, 1.601, 1.602, 5)
PASSIVE_FL_Y = (0, 0, 0, 0, 0.035, 0.12, 0.26, 0.55, 1.17, 2, 2, 2, 2)
FV_X = (-10, -1, -0.6, -0.3, -0.1, 0, 0.1, 0.3, 0.6, 0.8, 10)
FV_Y = (0, 0, 0.08, 0.2, 0.55, 1, 1.4, 1.6, 1.7, 1.75, 1.75)

# Tendon force-strain: toe region A*(exp(B*eps) - 1) up to the cut-off strain,
# linear K*eps - D beyond it.
TENDON_CUTOFF = 0.0127
TENDON_TOE_A = 0.06142
TENDON_TOE_B = 124.929
TENDON_LIN_K = 37.5
TENDON_LIN_D = 0.2375

VELOCITY_SCALE = 10.0  # fiber velocity is normalized by 10 * l_opt per second
VELOCITY_FILTER_HZ = 20.0

BRACKET_LO = 0.3
BRACKET_HI = 1.8
EXPAND_STRAIN = 0.12  # tendon force 4.26 f_max
WARM_BRACKET = 0.01  # half-width of the warm-start bracket, in l_opt
DEFAULT_REL_TOL = 1e-6
DEFAULT_MAX_ITER = 100

# solver status codes
OK = 0
JUMP = 1  # bracket collapsed onto a discontinuity of the residual
BOUNDARY = 2  # no sign change: stiff-tendon boundary solution
FAILED = 3


def pchip_table(x, y):
    """Piecewise-cubic monotone (Fritsch-Carlson/Butland) interpolant.

    Returns the knot array and a (4, n) coefficient table; row 0 holds the
    knot values and rows 1-3 the power-form coefficients per interval.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    h = np.diff(x)
    delta = np.diff(y) / h
    n = x.size
    m = np.zeros(n)
    for k in range(1, n - 1):
        d0, d1 = delta[k - 1], delta[k]
        if d0 * d1 > 0:
            w1 = 2 * h[k] + h[k - 1]
            w2 = h[k] + 2 * h[k - 1]
            m[k] = (w1 + w2) / (w1 / d0 + w2 / d1)
    m[0] = _pchip_end(h[0], h[1], delta[0], delta[1])
    m[-1] = _pchip_end(h[-1], h[-2], delta[-1], delta[-2])
    table = np.zeros((4, n))
    table[0] = y
    table[1, :-1] = m[:-1]
    table[2, :-1] = (3 * delta - 2 * m[:-1] - m[1:]) / h
    table[3, :-1] = (m[:-1] + m[1:] - 2 * delta) / h**2
    return x, table


def _pchip_end(h0, h1, d0, d1):
    d = ((2 * h0 + h1) * d0 - h0 * d1) / (h0 + h1)
    if np.sign(d) != np.sign(d0):
        return 0.0
    if np.sign(d0) != np.sign(d1) and abs(d) > abs(3 * d0):
        return 3 * d0
    return d


@njit(cache=True)
def curve_eval(xs, tab, x):
    n = xs.shape[0]
    if x <= xs[0]:
        return tab[0, 0]
    if x >= xs[n - 1]:
        return tab[0, n - 1]
    lo = 0
    hi = n - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if x < xs[mid]:
            hi = mid
        else:
            lo = mid
    dx = x - xs[lo]
    return tab[0, lo] + dx * (tab[1, lo] + dx * (tab[2, lo] + dx * tab[3, lo]))


@njit(cache=True)
def tendon_eval(tp, strain):
    if strain <= 0.0:
        return 0.0
    if strain <= tp[0]:
        return tp[1] * (math.exp(tp[2] * strain) - 1.0)
    return tp[3] * strain - tp[4]


@dataclass(frozen=True, eq=False)
class CurveSet:
    """Active/passive force-length, force-velocity and tendon curves."""

    active_x: np.ndarray
    active_tab: np.ndarray
    passive_x: np.ndarray
    passive_tab: np.ndarray
    fv_x: np.ndarray
    fv_tab: np.ndarray
    tendon: np.ndarray = field(default_factory=lambda: np.array(
        [TENDON_CUTOFF, TENDON_TOE_A, TENDON_TOE_B, TENDON_LIN_K, TENDON_LIN_D]))

    def active_fl(self, x):
        return curve_eval(self.active_x, self.active_tab, float(x))

    def passive_fl(self, x):
        return curve_eval(self.passive_x, self.passive_tab, float(x))

    def fv(self, v):
        return curve_eval(self.fv_x, self.fv_tab, float(v))

    def tendon_force(self, strain):
        return tendon_eval(self.tendon, float(strain))

    def packed(self):
        return (self.active_x, self.active_tab, self.passive_x, self.passive_tab,
                self.fv_x, self.fv_tab, self.tendon)

    def with_tendon(self, cutoff, toe_a, toe_b, lin_k, lin_d):
        return CurveSet(self.active_x, self.active_tab, self.passive_x, self.passive_tab,
                        self.fv_x, self.fv_tab, np.array([cutoff, toe_a, toe_b, lin_k, lin_d], dtype=float))


@lru_cache(maxsize=1)
def default_curves():
    return CurveSet(*pchip_table(ACTIVE_FL_X, ACTIVE_FL_Y),
                    *pchip_table(PASSIVE_FL_X, PASSIVE_FL_Y),
                    *pchip_table(FV_X, FV_Y))


def tendon_force_norm(strain):
    """Normalized tendon force for a given strain."""
    if strain <= 0:
        return 0.0
    if strain <= TENDON_CUTOFF:
        return TENDON_TOE_A * (math.exp(TENDON_TOE_B * strain) - 1.0)
    return TENDON_LIN_K * strain - TENDON_LIN_D


def tendon_strain_from_force(fnorm):
    """Inverse of :func:`tendon_force_norm` on the loaded branch."""
    if fnorm <= 0:
        return 0.0
    eps = (fnorm + TENDON_LIN_D) / TENDON_LIN_K
    if eps > TENDON_CUTOFF:
        return eps
    return math.log(fnorm / TENDON_TOE_A + 1.0) / TENDON_TOE_B


def tendon_strain(l_t, l_slack):
    return (l_t - l_slack) / l_slack


def pennation(fiber_length, p):
    """Pennation angle at constant muscle thickness; clamped at pi/2."""
    arg = p.l_opt * math.sin(p.alpha_opt) / fiber_length
    return math.asin(min(arg, 1.0))


def fiber_force(l_norm, v_norm, a, p, curves=None):
    """Fiber force (N), floored at zero."""
    c = curves or default_curves()
    f = p.f_max_iso * (c.active_fl(l_norm) * c.fv(v_norm) * a + c.passive_fl(l_norm) + p.damping * v_norm)
    return max(f, 0.0)


# --- compiled solver ---------------------------------------------------------
# params array layout: [E, f_max_iso, l_opt, l_slack, alpha_opt, damping]


@njit(cache=True)
def _cos_pennation(width, lm):
    arg = width / lm
    if arg >= 1.0:
        return 0.0
    return math.sqrt(1.0 - arg * arg)


@njit(cache=True)
def _fiber_force(lm, v, a, p, ax, at, px, pt, vx, vt):
    ln = lm / p[2]
    f = p[1] * (curve_eval(ax, at, ln) * curve_eval(vx, vt, v) * a + curve_eval(px, pt, ln) + p[5] * v)
    if f < 0.0:
        return 0.0
    return f


@njit(cache=True)
def _residual(lm, lmt, vc, vs, lref, a, p, ax, at, px, pt, vx, vt, tp):
    # velocity is affine in the candidate fiber length: v = vc + vs*(lm - lref)
    width = p[2] * math.sin(p[4])
    ca = _cos_pennation(width, lm)
    strain = (lmt - lm * ca - p[3]) / p[3]
    ft = p[1] * tendon_eval(tp, strain)
    v = vc + vs * (lm - lref)
    return ft - _fiber_force(lm, v, a, p, ax, at, px, pt, vx, vt) * ca


@njit(cache=True)
def _brent(lo, hi, flo, fhi, lmt, vc, vs, lref, a, p, ax, at, px, pt, vx, vt, tp, ftol, max_iter):
    """Brent-Dekker zero-in on a sign-changing bracket.

    Stops when |f| <= ftol. Returns (x, fx, status).
    """
    xa, xb = lo, hi
    fa, fb = flo, fhi
    xc, fc = xa, fa
    d = xb - xa
    e = d
    eps = 2.220446049250313e-16
    for _ in range(max_iter):
        if (fb > 0.0 and fc > 0.0) or (fb < 0.0 and fc < 0.0):
            xc, fc = xa, fa
            d = xb - xa
            e = d
        if abs(fc) < abs(fb):
            xa, xb, xc = xb, xc, xb
            fa, fb, fc = fb, fc, fb
        if abs(fb) <= ftol:
            return xb, fb, OK
        tol1 = 2.0 * eps * abs(xb)
        xm = 0.5 * (xc - xb)
        if abs(xm) <= tol1:
            return xb, fb, JUMP
        if abs(e) >= tol1 and abs(fa) > abs(fb):
            s = fb / fa
            if xa == xc:
                pp = 2.0 * xm * s
                q = 1.0 - s
            else:
                q = fa / fc
                r = fb / fc
                pp = s * (2.0 * xm * q * (q - r) - (xb - xa) * (r - 1.0))
                q = (q - 1.0) * (r - 1.0) * (s - 1.0)
            if pp > 0.0:
                q = -q
            pp = abs(pp)
            if 2.0 * pp < min(3.0 * xm * q - abs(tol1 * q), abs(e * q)):
                e = d
                d = pp / q
            else:
                d = xm
                e = d
        else:
            d = xm
            e = d
        xa, fa = xb, fb
        if abs(d) > tol1:
            xb += d
        elif xm > 0.0:
            xb += tol1
        else:
            xb -= tol1
        fb = _residual(xb, lmt, vc, vs, lref, a, p, ax, at, px, pt, vx, vt, tp)
    return xb, fb, FAILED


@njit(cache=True)
def _stiff_tendon_length(lmt, p):
    width = p[2] * math.sin(p[4])
    along = lmt - p[3]
    if along <= 0.0:
        along = 0.0
    return math.sqrt(along * along + width * width)


@njit(cache=True)
def solve_kernel(lmt, vc, vs, lref, a, p, ax, at, px, pt, vx, vt, tp, ftol, max_iter, guess=0.0):
    if guess > 0.0:
        # warm start: a narrow bracket around the previous solution
        h = WARM_BRACKET * p[2]
        lo = max(guess - h, BRACKET_LO * p[2])
        hi = min(guess + h, BRACKET_HI * p[2])
        if lo < hi:
            flo = _residual(lo, lmt, vc, vs, lref, a, p, ax, at, px, pt, vx, vt, tp)
            fhi = _residual(hi, lmt, vc, vs, lref, a, p, ax, at, px, pt, vx, vt, tp)
            if flo * fhi < 0.0:
                return _brent(lo, hi, flo, fhi, lmt, vc, vs, lref, a, p, ax, at, px, pt, vx, vt, tp,
                              ftol, max_iter)
    lo = BRACKET_LO * p[2]
    hi = BRACKET_HI * p[2]
    flo = _residual(lo, lmt, vc, vs, lref, a, p, ax, at, px, pt, vx, vt, tp)
    fhi = _residual(hi, lmt, vc, vs, lref, a, p, ax, at, px, pt, vx, vt, tp)
    if flo * fhi > 0.0:
        # expand once toward the stiff-tendon solution
        lst = _stiff_tendon_length(lmt, p)
        width = p[2] * math.sin(p[4])
        if lst > hi:
            hi = lst
            fhi = _residual(hi, lmt, vc, vs, lref, a, p, ax, at, px, pt, vx, vt, tp)
        elif lst < lo:
            # go past the slack point to a tendon strain whose force exceeds
            # anything the fiber can produce
            d = lmt - p[3] * (1.0 + EXPAND_STRAIN)
            lfar = math.sqrt(d * d + width * width) if d > 0.0 else 0.0
            lo = max(lfar, width * (1.0 + 1e-9), 1e-9 * p[2])
            flo = _residual(lo, lmt, vc, vs, lref, a, p, ax, at, px, pt, vx, vt, tp)
        if flo * fhi > 0.0:
            lb = lst if lst > width else width * (1.0 + 1e-9)
            if lb <= 0.0:
                lb = lo
            return lb, _residual(lb, lmt, vc, vs, lref, a, p, ax, at, px, pt, vx, vt, tp), BOUNDARY
    if flo == 0.0:
        return lo, flo, OK
    if fhi == 0.0:
        return hi, fhi, OK
    return _brent(lo, hi, flo, fhi, lmt, vc, vs, lref, a, p, ax, at, px, pt, vx, vt, tp, ftol, max_iter)


@njit(cache=True)
def state_kernel(lm, lmt, v, a, p, ax, at, px, pt, vx, vt, tp):
    width = p[2] * math.sin(p[4])
    arg = width / lm
    if arg > 1.0:
        arg = 1.0
    alpha = math.asin(arg)
    ca = _cos_pennation(width, lm)
    strain = (lmt - lm * ca - p[3]) / p[3]
    f_mtu = p[1] * tendon_eval(tp, strain)
    ln = lm / p[2]
    f_act = p[1] * curve_eval(ax, at, ln) * curve_eval(vx, vt, v) * a
    f_pas = p[1] * curve_eval(px, pt, ln)
    f_fib = _fiber_force(lm, v, a, p, ax, at, px, pt, vx, vt)
    return alpha, strain, f_mtu, f_act, f_pas, f_fib


# stream state layout: [has_prev, l_prev, z1, z2, v_norm]
@njit(cache=True)
def step_kernel(state, lmt, a, dt, p, ax, at, px, pt, vx, vt, tp, fb, ftol, max_iter):
    """One streaming update. The filtered backward-difference velocity enters
    the solve through the current candidate fiber length (semi-implicit)."""
    scale = 1.0 / (VELOCITY_SCALE * p[2])
    if state[0] == 0.0:
        vc = 0.0
        vs = 0.0
        lref = 0.0
    else:
        vc = state[2] * scale
        vs = fb[0] / dt * scale
        lref = state[1]
    lm, res, status = solve_kernel(lmt, vc, vs, lref, a, p, ax, at, px, pt, vx, vt, tp, ftol, max_iter,
                                   state[1] if state[0] != 0.0 else 0.0)
    if state[0] == 0.0:
        raw = 0.0
    else:
        raw = (lm - state[1]) / dt
    y = fb[0] * raw + state[2]
    state[2] = fb[1] * raw - fb[3] * y + state[3]
    state[3] = fb[2] * raw - fb[4] * y
    state[0] = 1.0
    state[1] = lm
    v_used = vc + vs * (lm - lref)
    state[4] = v_used
    return lm, v_used, res, status


@njit(cache=True)
def force_trace_kernel(lmt, act, dt, p, ax, at, px, pt, vx, vt, tp, fb, ftol, max_iter, out_force, out_lm):
    """Run the streaming update over whole arrays. Returns the index of the
    first failed solve, or -1."""
    state = np.zeros(5)
    for k in range(lmt.shape[0]):
        lm, v, res, status = step_kernel(state, lmt[k], act[k], dt, p, ax, at, px, pt, vx, vt, tp,
                                         fb, ftol, max_iter)
        if status == FAILED:
            return k
        width = p[2] * math.sin(p[4])
        ca = _cos_pennation(width, lm)
        out_force[k] = p[1] * tendon_eval(tp, (lmt[k] - lm * ca - p[3]) / p[3])
        out_lm[k] = lm
    return -1


@lru_cache(maxsize=16)
def velocity_filter(dt, cutoff_hz=VELOCITY_FILTER_HZ):
    """Second-order Butterworth low-pass as [b0, b1, b2, a1, a2]."""
    b, a = butter(2, cutoff_hz, fs=1.0 / dt)
    return np.array([b[0], b[1], b[2], a[1], a[2]])


# --- Python-level API --------------------------------------------------------


@dataclass(frozen=True)
class MtuState:
    lmt: float
    fiber_length: float
    fiber_velocity_norm: float
    pennation: float
    tendon_strain: float
    f_mtu: float
    f_active: float
    f_passive: float
    f_fiber: float
    residual: float
    status: int = OK

    @property
    def at_boundary(self):
        return self.status == BOUNDARY


def _pack(p):
    return np.array([p.shape_factor, p.f_max_iso, p.l_opt, p.l_slack, p.alpha_opt, p.damping], dtype=float)


def _state(lm, lmt, v, a, pa, curves, res, status):
    alpha, strain, f_mtu, f_act, f_pas, f_fib = state_kernel(lm, lmt, v, a, pa, *curves.packed())
    return MtuState(lmt, lm, v, alpha, strain, f_mtu, f_act, f_pas, f_fib, res, status)


def solve_equilibrium(lmt, v_norm, a, p, curves=None, tol=None, max_iter=DEFAULT_MAX_ITER):
    """Fiber length balancing tendon force against pennated fiber force.

    ``tol`` is the force residual in N (default 1e-6 * f_max_iso).
    Raises ConvergenceError if Brent does not converge in ``max_iter``.
    """
    curves = curves or default_curves()
    if not lmt > p.l_slack * 0.95:
        raise ValueError(f"muscle-tendon length {lmt} below sanity bound 0.95*l_slack={0.95 * p.l_slack}")
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"activation {a} outside [0, 1]")
    tol = DEFAULT_REL_TOL * p.f_max_iso if tol is None else tol
    pa = _pack(p)
    lm, res, status = solve_kernel(float(lmt), float(v_norm), 0.0, 0.0, float(a), pa, *curves.packed(),
                                   tol, max_iter)
    if status == FAILED:
        raise ConvergenceError(f"equilibrium did not converge in {max_iter} iterations", residual=res)
    return _state(lm, lmt, float(v_norm), a, pa, curves, res, status)


class MuscleTendonUnit:
    """Streaming muscle-tendon unit; one instance per input stream."""

    def __init__(self, params, curves=None, tol=None, max_iter=DEFAULT_MAX_ITER, name=""):
        self.name = name
        self.curves = curves or default_curves()
        self._packed_curves = self.curves.packed()
        self.max_iter = max_iter
        self.set_params(params, tol)

    def set_params(self, params, tol=None):
        self.params = params
        self._p = _pack(params)
        self.tol = DEFAULT_REL_TOL * params.f_max_iso if tol is None else tol

    def reset(self):
        self._s = np.zeros(5)

    _s = None

    def _advance(self, lmt, a, dt):
        if dt <= 0:
            raise ValueError("dt must be positive")
        if self._s is None:
            self.reset()
        lm, v, res, status = step_kernel(self._s, float(lmt), float(a), float(dt), self._p,
                                         *self._packed_curves, velocity_filter(float(dt)), self.tol, self.max_iter)
        if status == FAILED:
            raise ConvergenceError(f"{self.name}: equilibrium did not converge", residual=res)
        return lm, v, res, status

    def step(self, lmt, a, dt):
        lm, v, res, status = self._advance(lmt, a, dt)
        return _state(lm, lmt, v, a, self._p, self.curves, res, status)

    def step_force(self, lmt, a, dt):
        """Like :meth:`step` but returns only the muscle-tendon force (N)."""
        lm, v, res, status = self._advance(lmt, a, dt)
        ca = _cos_pennation(self._p[2] * math.sin(self._p[4]), lm)
        return self._p[1] * tendon_eval(self.curves.tendon, (lmt - lm * ca - self._p[3]) / self._p[3])


def force_trace(params, lmt, act, dt, curves=None, tol=None, max_iter=DEFAULT_MAX_ITER):
    """Batch equivalent of stepping a fresh unit over ``lmt``/``act`` arrays.

    Returns (forces, fiber_lengths).
    """
    curves = curves or default_curves()
    tol = DEFAULT_REL_TOL * params.f_max_iso if tol is None else tol
    lmt = np.ascontiguousarray(lmt, dtype=float)
    act = np.ascontiguousarray(act, dtype=float)
    out_f = np.empty_like(lmt)
    out_l = np.empty_like(lmt)
    bad = force_trace_kernel(lmt, act, float(dt), _pack(params), *curves.packed(), velocity_filter(float(dt)),
                             tol, max_iter, out_f, out_l)
    if bad >= 0:
        raise ConvergenceError(f"equilibrium did not converge at sample {bad}", index=int(bad))
    return out_f, out_l
