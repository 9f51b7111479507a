"""B-spline surrogates mapping joint angles to muscle-tendon length.

Each muscle-tendon unit (MTU) gets a cubic interpolating spline over the
joints it spans (tensor product for two joints). Values and first partial
derivatives are evaluated with compiled de Boor recurrences so the moment
arm is the analytic derivative of the same spline, not a finite difference.
"""

import csv
import logging
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.interpolate import make_interp_spline

from .errors import DataError

log = logging.getLogger(__name__)

DEGREE = 3
MIN_KNOTS = 4


@dataclass(frozen=True, eq=False)
class GeometryGrid:
    """Tabulated muscle-tendon lengths on a rectilinear angle grid.

    ``lmt_values`` has one axis per entry of ``dofs``, in that order.
    """

    mtu: str
    dofs: tuple
    knots: tuple
    lmt_values: np.ndarray

    def __post_init__(self):
        if len(self.dofs) not in (1, 2):
            raise DataError(f"{self.mtu}: geometry grids support 1 or 2 DOFs, got {len(self.dofs)}")
        if len(self.knots) != len(self.dofs):
            raise DataError(f"{self.mtu}: one knot vector per DOF required")
        shape = []
        for dof, k in zip(self.dofs, self.knots):
            k = np.asarray(k, dtype=float)
            if k.ndim != 1 or k.size < MIN_KNOTS:
                raise DataError(f"{self.mtu}: DOF {dof!r} needs at least {MIN_KNOTS} knots, got {k.size}")
            if np.any(np.diff(k) <= 0):
                raise DataError(f"{self.mtu}: knots for DOF {dof!r} are not strictly increasing")
            shape.append(k.size)
        values = np.asarray(self.lmt_values, dtype=float)
        if values.shape != tuple(shape):
            raise DataError(f"{self.mtu}: lmt grid shape {values.shape} does not match knots {tuple(shape)}")
        if not np.all(np.isfinite(values)) or np.any(values <= 0):
            raise DataError(f"{self.mtu}: muscle-tendon lengths must be finite and positive")

    def covers(self, dof, lo, hi):
        k = self.knots[self.dofs.index(dof)]
        return k[0] <= lo and k[-1] >= hi


def load_grid(path, mtu):
    """Read a grid CSV with columns ``<joint1>[,<joint2>],lmt``."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty geometry grid")
    header = [h.strip() for h in rows[0]]
    if header[-1] != "lmt" or len(header) not in (2, 3):
        raise DataError(f"{path}: header must be '<joint1>[,<joint2>],lmt', got {header}")
    dofs = tuple(header[:-1])
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric cell ({exc})") from None
    if data.ndim != 2 or data.shape[1] != len(header):
        raise DataError(f"{path}: ragged rows")
    knots = tuple(np.unique(data[:, i]) for i in range(len(dofs)))
    shape = tuple(k.size for k in knots)
    if data.shape[0] != int(np.prod(shape)):
        raise DataError(f"{path}: {data.shape[0]} rows do not form a complete {shape} grid")
    idx = tuple(np.searchsorted(k, data[:, i]) for i, k in enumerate(knots))
    values = np.full(shape, np.nan)
    values[idx] = data[:, -1]
    if np.isnan(values).any():
        raise DataError(f"{path}: duplicated grid nodes")
    return GeometryGrid(mtu, dofs, knots, values)


def write_grid(grid, path):
    mesh = np.meshgrid(*grid.knots, indexing="ij")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*grid.dofs, "lmt"])
        for node in zip(*(m.ravel() for m in mesh), grid.lmt_values.ravel()):
            w.writerow([format(v, ".17g") for v in node])


def sample_grid(mtu, dofs, knots, func):
    """Tabulate ``func(*angles)`` on the grid spanned by ``knots``."""
    knots = tuple(np.asarray(k, dtype=float) for k in knots)
    mesh = np.meshgrid(*knots, indexing="ij")
    return GeometryGrid(mtu, tuple(dofs), knots, np.asarray(func(*mesh), dtype=float))


# --- compiled evaluation ---------------------------------------------------


@njit(cache=True)
def _find_span(t, n, x):
    # n = number of coefficients; valid spans are DEGREE..n-1
    if x >= t[n]:
        return n - 1
    lo = DEGREE
    hi = n
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if x < t[mid]:
            hi = mid
        else:
            lo = mid
    return lo


@njit(cache=True)
def _basis(t, span, x, out):
    left = np.empty(DEGREE + 1)
    right = np.empty(DEGREE + 1)
    out[0] = 1.0
    for j in range(1, DEGREE + 1):
        left[j] = x - t[span + 1 - j]
        right[j] = t[span + j] - x
        saved = 0.0
        for r in range(j):
            temp = out[r] / (right[r + 1] + left[j - r])
            out[r] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        out[j] = saved


@njit(cache=True)
def _basis_and_deriv(t, n, x, N, dN):
    span = _find_span(t, n, x)
    lower = np.zeros(DEGREE + 1)
    # degree-(k-1) functions for indices span-k+1..span
    lower[0] = 1.0
    left = np.empty(DEGREE + 1)
    right = np.empty(DEGREE + 1)
    for j in range(1, DEGREE):
        left[j] = x - t[span + 1 - j]
        right[j] = t[span + j] - x
        saved = 0.0
        for r in range(j):
            temp = lower[r] / (right[r + 1] + left[j - r])
            lower[r] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        lower[j] = saved
    _basis(t, span, x, N)
    for a in range(DEGREE + 1):
        i = span - DEGREE + a
        d = 0.0
        if a >= 1:
            den = t[i + DEGREE] - t[i]
            if den > 0.0:
                d += lower[a - 1] / den
        if a <= DEGREE - 1:
            den = t[i + DEGREE + 1] - t[i + 1]
            if den > 0.0:
                d -= lower[a] / den
        dN[a] = DEGREE * d
    return span


@njit(cache=True)
def _eval1(t, c, x):
    n = c.shape[0]
    N = np.empty(DEGREE + 1)
    dN = np.empty(DEGREE + 1)
    s = _basis_and_deriv(t, n, x, N, dN)
    v = 0.0
    d = 0.0
    for a in range(DEGREE + 1):
        ci = c[s - DEGREE + a]
        v += N[a] * ci
        d += dN[a] * ci
    return v, d


@njit(cache=True)
def _eval2(tx, ty, c, x, y):
    nx = c.shape[0]
    ny = c.shape[1]
    Nx = np.empty(DEGREE + 1)
    dNx = np.empty(DEGREE + 1)
    Ny = np.empty(DEGREE + 1)
    dNy = np.empty(DEGREE + 1)
    sx = _basis_and_deriv(tx, nx, x, Nx, dNx)
    sy = _basis_and_deriv(ty, ny, y, Ny, dNy)
    v = 0.0
    gx = 0.0
    gy = 0.0
    for a in range(DEGREE + 1):
        rv = 0.0
        rd = 0.0
        for b in range(DEGREE + 1):
            cij = c[sx - DEGREE + a, sy - DEGREE + b]
            rv += Ny[b] * cij
            rd += dNy[b] * cij
        v += Nx[a] * rv
        gx += dNx[a] * rv
        gy += Nx[a] * rd
    return v, gx, gy


@njit(cache=True)
def _eval_many1(t, c, xs, vals, grads):
    for i in range(xs.shape[0]):
        v, d = _eval1(t, c, xs[i])
        vals[i] = v
        grads[i, 0] = d


@njit(cache=True)
def _eval_many2(tx, ty, c, xs, ys, vals, grads):
    for i in range(xs.shape[0]):
        v, gx, gy = _eval2(tx, ty, c, xs[i], ys[i])
        vals[i] = v
        grads[i, 0] = gx
        grads[i, 1] = gy


@dataclass(frozen=True, eq=False)
class GeometrySurrogate:
    mtu: str
    dofs: tuple
    knot_vectors: tuple  # full B-spline knot vectors, one per DOF
    coefs: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def clamp(self, angles):
        a = np.asarray(angles, dtype=float)
        if np.isnan(a).any():
            raise ValueError(f"{self.mtu}: NaN joint angle")
        c = np.minimum(np.maximum(a, self.lower), self.upper)
        return c, bool(np.any(c != a))

    def evaluate(self, angles):
        """Length and gradient at one pose given in ``dofs`` order.

        Returns ``(lmt, grad, clamped)``.
        """
        a, clamped = self.clamp(angles)
        if len(self.dofs) == 1:
            v, d = _eval1(self.knot_vectors[0], self.coefs, a[0])
            return v, np.array([d]), clamped
        v, gx, gy = _eval2(self.knot_vectors[0], self.knot_vectors[1], self.coefs, a[0], a[1])
        return v, np.array([gx, gy]), clamped

    def evaluate_many(self, angles):
        """Vectorized evaluation; ``angles`` has shape (n_samples, n_dofs)."""
        a = np.atleast_2d(np.asarray(angles, dtype=float))
        if np.isnan(a).any():
            raise ValueError(f"{self.mtu}: NaN joint angle")
        a = np.ascontiguousarray(np.clip(a, self.lower, self.upper))
        vals = np.empty(a.shape[0])
        grads = np.empty((a.shape[0], len(self.dofs)))
        if len(self.dofs) == 1:
            _eval_many1(self.knot_vectors[0], self.coefs, a[:, 0].copy(), vals, grads)
        else:
            _eval_many2(self.knot_vectors[0], self.knot_vectors[1], self.coefs,
                        a[:, 0].copy(), a[:, 1].copy(), vals, grads)
        return vals, grads


def fit_surrogate(grid):
    """Cubic not-a-knot interpolating spline through every grid node."""
    x0 = np.asarray(grid.knots[0], dtype=float)
    first = make_interp_spline(x0, grid.lmt_values, k=DEGREE, axis=0)
    knot_vectors = [np.ascontiguousarray(first.t)]
    coefs = first.c
    if len(grid.dofs) == 2:
        x1 = np.asarray(grid.knots[1], dtype=float)
        second = make_interp_spline(x1, coefs, k=DEGREE, axis=1)
        knot_vectors.append(np.ascontiguousarray(second.t))
        # BSpline keeps the interpolation axis first
        coefs = np.moveaxis(second.c, 0, 1)
    lower = np.array([k[0] for k in grid.knots], dtype=float)
    upper = np.array([k[-1] for k in grid.knots], dtype=float)
    return GeometrySurrogate(grid.mtu, tuple(grid.dofs), tuple(knot_vectors),
                             np.ascontiguousarray(coefs, dtype=float), lower, upper)


def _pose(s, angles):
    if isinstance(angles, dict):
        try:
            return [angles[d] for d in s.dofs]
        except KeyError as exc:
            raise ValueError(f"{s.mtu}: missing angle for joint {exc}") from None
    return angles


def lmt(s, angles):
    """Muscle-tendon length (m). ``angles`` is a joint->rad mapping or a
    sequence in ``s.dofs`` order; out-of-domain angles are clamped."""
    v, _, clamped = s.evaluate(_pose(s, angles))
    if clamped:
        log.debug("%s: angles %s clamped to surrogate domain", s.mtu, angles)
    return v


def moment_arm(s, angles, joint):
    """Partial derivative dL/dtheta (m/rad) for ``joint``; sign as-is."""
    if joint not in s.dofs:
        raise ValueError(f"{s.mtu} does not span joint {joint!r}")
    _, grad, _ = s.evaluate(_pose(s, angles))
    return grad[s.dofs.index(joint)]


