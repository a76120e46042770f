"""Reference solutions for planar backward reachable sets.

Two independent references are provided:

* a boundary polygon traced by extremal (PMP) trajectories started from
  uniformly spread points of the terminal ellipse, which is exact up to
  integration error because the reachable sets of linear systems with
  convex input and terminal sets are convex;
* a grid solution of the Hamilton-Jacobi-Bellman equation whose zero
  sublevel set is the reachable set.

Area helpers and a containment report tie the families from
:mod:`ellreach.reach` to either reference.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from numba import njit

from .ellipsoid import EllipsoidFamilySnapshot, quad_value
from .errors import (
    BoxTooSmall,
    CflViolation,
    DegeneratePolygon,
    DimensionUnsupported,
    TimeNotStored,
    ValidationError,
)
from .ltv import ReachProblem

TIME_TOL = 1e-9


# --------------------------------------------------------------------------
# Hamiltonian


def hamiltonian_ltv(t: float, x, lam, prob: ReachProblem) -> float:
    """``max_u <-lam, A x + B u> = <-lam, A x + B p> + ||P^{1/2} B^T lam||``."""
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lam, dtype=float)
    A, B = prob.A(t), prob.B(t)
    l = B.T @ lam
    return float(-lam @ (A @ x + B @ prob.input.q) + math.sqrt(max(l @ prob.input.Q @ l, 0.0)))


# --------------------------------------------------------------------------
# polygons


@dataclass(frozen=True)
class Polygon:
    """Closed planar polygon; vertices are stored counterclockwise."""

    vertices: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise DegeneratePolygon("a polygon needs at least three planar vertices")
        if _shoelace(v) < 0:
            v = v[::-1].copy()
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    def edges(self):
        v = self.vertices
        return v, np.roll(v, -1, axis=0)

    def contains(self, pts) -> np.ndarray:
        """Even-odd point-in-polygon test for a stack of points."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        a, b = self.edges()
        px = pts[:, 0:1]
        py = pts[:, 1:2]
        ay, by = a[None, :, 1], b[None, :, 1]
        crosses = (ay > py) != (by > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = a[None, :, 0] + (py - ay) * (b[None, :, 0] - a[None, :, 0]) / (by - ay)
        hits = crosses & (px < xint)
        return (np.sum(hits, axis=1) % 2) == 1

    def distance(self, pts) -> np.ndarray:
        """Euclidean distance from each point to the polygon boundary."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        a, b = self.edges()
        ab = b - a
        L2 = np.maximum(np.sum(ab * ab, axis=1), 1e-300)
        ap = pts[:, None, :] - a[None, :, :]
        s = np.clip(np.sum(ap * ab[None], axis=2) / L2[None], 0.0, 1.0)
        d = ap - s[:, :, None] * ab[None]
        return np.sqrt(np.min(np.sum(d * d, axis=2), axis=1))

    def signed_distance(self, pts) -> np.ndarray:
        """Distance to the boundary, negative inside."""
        d = self.distance(pts)
        return np.where(self.contains(pts), -d, d)

    def sample_boundary(self, n: int) -> np.ndarray:
        """``n`` points equally spaced in arc length along the boundary."""
        a, b = self.edges()
        seg = np.linalg.norm(b - a, axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        s = np.arange(n) * cum[-1] / n
        k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
        frac = np.where(seg[k] > 0, (s - cum[k]) / np.where(seg[k] > 0, seg[k], 1.0), 0.0)
        return a[k] + frac[:, None] * (b[k] - a[k])


def _shoelace(v: np.ndarray) -> float:
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def polygon_area(poly: Polygon) -> float:
    """Shoelace area (positive for the counterclockwise vertex order kept by Polygon).

    Raises:
        DegeneratePolygon: for fewer than three vertices or zero area.
    """
    v = poly.vertices if isinstance(poly, Polygon) else np.asarray(poly, dtype=float)
    if v.ndim != 2 or v.shape[0] < 3:
        raise DegeneratePolygon("a polygon needs at least three vertices")
    area = _shoelace(v)
    if area == 0.0 or not np.isfinite(area):
        raise DegeneratePolygon("polygon has zero area")
    return area


# --------------------------------------------------------------------------
# PMP boundary polygon


class _PmpIntegrator:
    """Vectorised RK4 for many extremal (x, lambda) pairs at once.

    For scalar inputs the optimal input is bang-bang; steps in which a
    trajectory's switching function changes sign are redone for that
    trajectory alone, split at the switch time.
    """

    def __init__(self, prob: ReachProblem):
        self.prob = prob
        self.p = np.asarray(prob.input.q, dtype=float)
        self.P = np.asarray(prob.input.Q, dtype=float)
        self.scalar = prob.m == 1
        self.amp = math.sqrt(self.P[0, 0]) if self.scalar else None

    def controls(self, L, B, lock):
        """Optimal inputs, one row per trajectory."""
        if self.scalar:
            return self.p[None, :] - (lock * self.amp)[:, None]
        l = L @ B
        Pl = l @ self.P
        nrm = np.sqrt(np.maximum(np.sum(l * Pl, axis=1), 0.0))
        safe = np.where(nrm > 0, nrm, 1.0)
        return np.where(nrm[:, None] > 0, self.p[None, :] - Pl / safe[:, None], self.p[None, :])

    def f(self, s, X, L, lock):
        A, B = self.prob.A(s), self.prob.B(s)
        U = self.controls(L, B, lock)
        return X @ A.T + U @ B.T, -L @ A

    def rk4(self, t, X, L, h, lock):
        k1 = self.f(t, X, L, lock)
        k2 = self.f(t - 0.5 * h, X - 0.5 * h * k1[0], L - 0.5 * h * k1[1], lock)
        k3 = self.f(t - 0.5 * h, X - 0.5 * h * k2[0], L - 0.5 * h * k2[1], lock)
        k4 = self.f(t - h, X - h * k3[0], L - h * k3[1], lock)
        c = h / 6.0
        return (X - c * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
                L - c * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]))

    def sigma(self, s, L):
        return L @ self.prob.B(s)[:, 0]

    def step(self, t, X, L, h):
        if not self.scalar:
            return self.rk4(t, X, L, h, None)
        s0 = self.sigma(t, L)
        scale = np.linalg.norm(L, axis=1) * np.linalg.norm(self.prob.B(t)[:, 0]) + 1e-300
        lock = np.where(np.abs(s0) > 1e-13 * scale, np.sign(s0), 0.0)
        X1, L1 = self.rk4(t, X, L, h, np.where(lock == 0, 1.0, lock))
        s1 = self.sigma(t - h, L1)
        zero = lock == 0
        if np.any(zero):
            # starting on the switching surface: take the sign it moves to
            lock = np.where(zero, np.where(s1 != 0, np.sign(s1), 1.0), lock)
            X1, L1 = self.rk4(t, X, L, h, lock)
            s1 = self.sigma(t - h, L1)
        for j in np.nonzero(lock * s1 < 0)[0]:
            X1[j], L1[j] = self._split(t, X[j:j + 1], L[j:j + 1], h, lock[j], s0[j], s1[j])
        return X1, L1

    def _split(self, t, x, l, h, lock, fa, fb):
        lk = np.array([lock])
        a, b = 0.0, h
        side = 0
        for _ in range(100):
            if b - a <= 4e-16 * max(1.0, abs(t)):
                break
            c = (a * fb - b * fa) / (fb - fa)
            if not (a < c < b):
                c = 0.5 * (a + b)
            _, lc = self.rk4(t, x, l, c, lk)
            fc = float(self.sigma(t - c, lc)[0])
            if np.sign(fc) == lock:
                a, fa = c, fc
                if side == -1:
                    fb *= 0.5
                side = -1
            else:
                b, fb = c, fc
                if side == 1:
                    fa *= 0.5
                side = 1
        xm, lm = self.rk4(t, x, l, b, lk)
        xe, le = self.rk4(t - b, xm, lm, h - b, -lk)
        return xe[0], le[0]


def pmp_boundary_states(prob: ReachProblem, times: Sequence[float], n_dirs: int = 512,
                        dt: float = 0.01, substeps: int = 4) -> dict:
    """Extremal states ``x(t)`` for each requested time, keyed by time.

    Trajectories start at ``x_e + X_e^{1/2} w_k`` with costate
    ``2 X_e^{-1}(x - x_e)`` for ``n_dirs`` equally spaced angles and are
    integrated backwards with step ``dt / substeps``.
    """
    if prob.direction != "backward":
        raise ValidationError("pmp oracle expects a backward problem (time_reverse a forward one)")
    n = prob.n
    E = prob.terminal
    if n == 2:
        ang = 2.0 * np.pi * np.arange(n_dirs) / n_dirs
        W = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    elif n == 1:
        W = np.array([[1.0], [-1.0]])
    else:
        raise DimensionUnsupported(f"pmp oracle supports planar problems, got n={n}")
    X = W @ E.Q_sqrt.T + E.q
    L = 2.0 * (X - E.q) @ E.Q_inv.T
    want = sorted({float(t) for t in times}, reverse=True)
    for t in want:
        if t < prob.t0 - TIME_TOL or t > prob.T + TIME_TOL:
            raise ValidationError(f"time {t} outside the horizon")
    integ = _PmpIntegrator(prob)
    h_max = dt / max(1, int(substeps))
    out = {}
    t = prob.T
    for target in want:
        while t - target > TIME_TOL:
            h = min(h_max, t - target)
            if t - h - target < 1e-12:
                h = t - target
            X, L = integ.step(t, X, L, h)
            t -= h
        t = target
        out[target] = X.copy()
    return out


def pmp_boundary_polygons(prob: ReachProblem, times: Sequence[float], n_dirs: int = 512,
                          dt: float = 0.01, substeps: int = 4) -> dict:
    """Boundary polygons for several times from a single backward sweep."""
    if prob.n != 2:
        raise DimensionUnsupported(f"polygons need a planar problem, got n={prob.n}")
    states = pmp_boundary_states(prob, times, n_dirs, dt, substeps)
    return {t: Polygon(X) for t, X in states.items()}


def pmp_boundary_polygon(prob: ReachProblem, t: float, n_dirs: int = 512, dt: float = 0.01,
                         substeps: int = 4) -> Polygon:
    """Polygon through ``n_dirs`` extremal boundary points of G(t).

    Raises:
        DimensionUnsupported: for problems that are not planar.
    """
    return pmp_boundary_polygons(prob, [t], n_dirs, dt, substeps)[float(t)]


# --------------------------------------------------------------------------
# family area


def _box(box) -> np.ndarray:
    b = np.array(box, dtype=float)
    if b.shape != (2, 2) or np.any(b[:, 1] <= b[:, 0]):
        raise ValidationError(f"box must be [[x_lo, x_hi], [y_lo, y_hi]], got {box}")
    return b


def family_area(family_snapshot: EllipsoidFamilySnapshot, box, resolution: int = 801) -> float:
    """Area of the union (or intersection) by counting cell midpoints inside it.

    Raises:
        DimensionUnsupported: unless the family is planar.
    """
    if family_snapshot.dim != 2:
        raise DimensionUnsupported("family_area needs planar ellipsoids")
    b = _box(box)
    dx = (b[0, 1] - b[0, 0]) / resolution
    dy = (b[1, 1] - b[1, 0]) / resolution
    xs = b[0, 0] + (np.arange(resolution) + 0.5) * dx
    ys = b[1, 0] + (np.arange(resolution) + 0.5) * dy
    count = 0
    rows = max(1, 200_000 // resolution)
    for i in range(0, resolution, rows):
        X, Y = np.meshgrid(xs[i:i + rows], ys, indexing="ij")
        v = family_snapshot.value(np.stack([X, Y], axis=-1))
        count += int(np.count_nonzero(v <= 0.0))
    return count * dx * dy


# --------------------------------------------------------------------------
# grid Hamilton-Jacobi solver


@dataclass
class GridSolution:
    """Value function samples on a uniform planar grid.

    ``values[k]`` holds v(times[k], x) at the nodes ``axes[0] x axes[1]``
    (index order ``[i, j]`` = ``(axes[0][i], axes[1][j])``).
    """

    box: np.ndarray
    resolution: int
    times: list
    values: list
    axes: tuple = field(default=())
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.axes:
            self.axes = tuple(np.linspace(self.box[d, 0], self.box[d, 1], self.resolution) for d in range(2))

    @property
    def spacing(self) -> np.ndarray:
        return np.array([ax[1] - ax[0] for ax in self.axes])

    def index_of(self, t: float) -> int:
        for k, s in enumerate(self.times):
            if abs(s - t) <= TIME_TOL * max(1.0, abs(t)):
                return k
        raise TimeNotStored(f"t={t} is not a stored time (have {self.times})")

    def at(self, t: float) -> np.ndarray:
        return self.values[self.index_of(t)]

    def interpolate(self, t: float, pts) -> np.ndarray:
        """Bilinear interpolation of v(t, .) at a stack of points (clamped to the box)."""
        return _bilinear(self.at(t), self.axes, pts)

    def gradient(self, t: float, pts) -> np.ndarray:
        """Bilinear interpolation of the finite-difference gradient of v(t, .)."""
        v = self.at(t)
        gx, gy = np.gradient(v, self.axes[0], self.axes[1])
        return np.stack([_bilinear(gx, self.axes, pts), _bilinear(gy, self.axes, pts)], axis=-1)

    def zero_crossings(self, t: float) -> np.ndarray:
        """Points where v(t, .) crosses zero along grid edges (linear interpolation)."""
        v = self.at(t)
        x, y = self.axes
        pts = []
        a, b = v[:-1, :], v[1:, :]
        i, j = np.nonzero((a <= 0) != (b <= 0))
        th = a[i, j] / (a[i, j] - b[i, j])
        pts.append(np.stack([x[i] + th * (x[i + 1] - x[i]), y[j]], axis=1))
        a, b = v[:, :-1], v[:, 1:]
        i, j = np.nonzero((a <= 0) != (b <= 0))
        th = a[i, j] / (a[i, j] - b[i, j])
        pts.append(np.stack([x[i], y[j] + th * (y[j + 1] - y[j])], axis=1))
        return np.concatenate(pts, axis=0)


def _bilinear(v, axes, pts) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    x, y = axes
    fx = np.clip((pts[:, 0] - x[0]) / (x[1] - x[0]), 0.0, len(x) - 1 - 1e-12)
    fy = np.clip((pts[:, 1] - y[0]) / (y[1] - y[0]), 0.0, len(y) - 1 - 1e-12)
    i = np.minimum(fx.astype(int), len(x) - 2)
    j = np.minimum(fy.astype(int), len(y) - 2)
    a = fx - i
    b = fy - j
    return ((1 - a) * (1 - b) * v[i, j] + a * (1 - b) * v[i + 1, j]
            + (1 - a) * b * v[i, j + 1] + a * b * v[i + 1, j + 1])


def _one_sided(vp, dx, axis):
    """Backward and forward differences at interior nodes of an edge-padded field."""
    d = np.diff(vp, axis=axis) / dx
    inner = [slice(1, -1), slice(1, -1)]
    back, fwd = list(inner), list(inner)
    back[axis] = slice(0, -1)
    fwd[axis] = slice(1, None)
    return d[tuple(back)], d[tuple(fwd)]


@njit(cache=True)
def _lf_kernel(vp, x, y, A, c, G, dx, dy, local, amax1, amax2, out):
    """Compiled Lax-Friedrichs numerical Hamiltonian on an edge-padded field (same maths as _HjbOperator)."""
    n1, n2 = out.shape
    s1 = math.sqrt(max(G[0, 0], 0.0))
    s2 = math.sqrt(max(G[1, 1], 0.0))
    for i in range(n1):
        for j in range(n2):
            I = i + 1
            J = j + 1
            m1 = (vp[I, J] - vp[I - 1, J]) / dx
            p1 = (vp[I + 1, J] - vp[I, J]) / dx
            m2 = (vp[I, J] - vp[I, J - 1]) / dy
            p2 = (vp[I, J + 1] - vp[I, J]) / dy
            f1 = A[0, 0] * x[i] + A[0, 1] * y[j] + c[0]
            f2 = A[1, 0] * x[i] + A[1, 1] * y[j] + c[1]
            l1 = 0.5 * (m1 + p1)
            l2 = 0.5 * (m2 + p2)
            quad = G[0, 0] * l1 * l1 + 2.0 * G[0, 1] * l1 * l2 + G[1, 1] * l2 * l2
            H = -(l1 * f1 + l2 * f2) + math.sqrt(max(quad, 0.0))
            if local:
                al1 = abs(f1) + s1
                al2 = abs(f2) + s2
            else:
                al1 = amax1
                al2 = amax2
            out[i, j] = H - 0.5 * al1 * (p1 - m1) - 0.5 * al2 * (p2 - m2)


class _HjbOperator:
    def __init__(self, prob, X1, X2, dx, local, compiled=True):
        self.prob = prob
        self.compiled = compiled
        self.x = np.ascontiguousarray(X1[:, 0])
        self.y = np.ascontiguousarray(X2[0, :])
        self.X1, self.X2 = X1, X2
        self.dx = dx
        self.local = local
        self.p = np.asarray(prob.input.q, dtype=float)
        self.P = np.asarray(prob.input.Q, dtype=float)

    def drift(self, t):
        A, B = self.prob.A(t), self.prob.B(t)
        c = B @ self.p
        f1 = A[0, 0] * self.X1 + A[0, 1] * self.X2 + c[0]
        f2 = A[1, 0] * self.X1 + A[1, 1] * self.X2 + c[1]
        return f1, f2, B @ self.P @ B.T

    def speeds(self, t):
        f1, f2, G = self.drift(t)
        a1 = np.abs(f1) + math.sqrt(max(G[0, 0], 0.0))
        a2 = np.abs(f2) + math.sqrt(max(G[1, 1], 0.0))
        return f1, f2, G, a1, a2

    def __call__(self, t, v):
        if self.compiled:
            A, B = self.prob.A(t), self.prob.B(t)
            c = B @ self.p
            G = B @ self.P @ B.T
            amax1 = amax2 = 0.0
            if not self.local:
                _, _, _, a1, a2 = self.speeds(t)
                amax1, amax2 = float(a1.max()), float(a2.max())
            out = np.empty_like(v)
            _lf_kernel(np.pad(v, 1, mode="edge"), self.x, self.y, np.ascontiguousarray(A, dtype=float),
                       np.ascontiguousarray(c, dtype=float), np.ascontiguousarray(G, dtype=float),
                       float(self.dx[0]), float(self.dx[1]), self.local, amax1, amax2, out)
            return out
        f1, f2, G, a1, a2 = self.speeds(t)
        if not self.local:
            a1, a2 = a1.max(), a2.max()
        vp = np.pad(v, 1, mode="edge")
        m1, p1 = _one_sided(vp, self.dx[0], 0)
        m2, p2 = _one_sided(vp, self.dx[1], 1)
        l1 = 0.5 * (m1 + p1)
        l2 = 0.5 * (m2 + p2)
        quad = G[0, 0] * l1 * l1 + 2 * G[0, 1] * l1 * l2 + G[1, 1] * l2 * l2
        H = -(l1 * f1 + l2 * f2) + np.sqrt(np.maximum(quad, 0.0))
        return H - 0.5 * a1 * (p1 - m1) - 0.5 * a2 * (p2 - m2)

    def max_speed(self, t):
        # |f_j| is affine in x, so its maximum over the grid sits at a corner
        A, B = self.prob.A(t), self.prob.B(t)
        c = B @ self.p
        G = B @ self.P @ B.T
        total = 0.0
        for j in range(2):
            fmax = max(abs(A[j, 0] * xi + A[j, 1] * yi + c[j])
                       for xi in (self.x[0], self.x[-1]) for yi in (self.y[0], self.y[-1]))
            total += fmax + math.sqrt(max(G[j, j], 0.0))
        return total


def grid_hjb_solve(prob: ReachProblem, box, resolution: int = 251, cfl: float = 0.5,
                   times: Optional[Sequence[float]] = None, dissipation: str = "local", transform: bool = True,
                   compiled: bool = True) -> GridSolution:
    """Solve ``-v_t + H(t, x, grad v) = 0`` backwards from ``v(T, .) = g``.

    ``g`` is the terminal quadratic value ``<x - x_e, X_e^{-1}(x - x_e)> - 1``.
    The scheme is the first-order monotone Lax-Friedrichs discretisation of
    the Hamiltonian with forward-Euler steps in reverse time. Dissipation
    coefficients bound ``|dH/dlambda_j|``, either per node
    (``dissipation='local'``) or by their grid maxima (``'global'``). Time
    steps satisfy ``dt = cfl * min(dx) / sum_j max alpha_j``. Ghost nodes
    copy the edge values.

    With ``transform`` the PDE is solved for ``sqrt(v + 1) - 1`` instead of
    v. The map is increasing, so zero sublevel sets are unchanged, but the
    transformed terminal data grow linearly rather than quadratically away
    from the terminal set, which keeps the scheme's smearing of the zero
    level far smaller. Stored values are mapped back to the v scale and
    the terminal slice is exactly g.

    Args:
        times: output times in [t0, T]; T and t0 are always stored.
        compiled: use the compiled kernel (False selects the pure numpy
            path, which computes the same quantities).

    Raises:
        CflViolation: if cfl is not in (0, 1].
        DimensionUnsupported: for problems that are not planar.
    """
    if prob.n != 2:
        raise DimensionUnsupported(f"grid solver supports planar problems, got n={prob.n}")
    if prob.direction != "backward":
        raise ValidationError("grid solver expects a backward problem (time_reverse a forward one)")
    if not (0.0 < cfl <= 1.0):
        raise CflViolation(f"cfl must lie in (0, 1], got {cfl}")
    if dissipation not in ("local", "global"):
        raise ValidationError("dissipation must be 'local' or 'global'")
    b = _box(box)
    axes = tuple(np.linspace(b[d, 0], b[d, 1], resolution) for d in range(2))
    dx = np.array([ax[1] - ax[0] for ax in axes])
    X1, X2 = np.meshgrid(axes[0], axes[1], indexing="ij")
    g = quad_value(prob.terminal, np.stack([X1, X2], axis=-1))

    want = {prob.T, prob.t0}
    for t in times or ():
        if t < prob.t0 - TIME_TOL or t > prob.T + TIME_TOL:
            raise ValidationError(f"output time {t} outside the horizon")
        want.add(min(max(float(t), prob.t0), prob.T))
    want = sorted(want, reverse=True)

    op = _HjbOperator(prob, X1, X2, dx, dissipation == "local", compiled)
    if transform:
        w = np.sqrt(g + 1.0) - 1.0
        back = lambda z: (z + 1.0) * np.abs(z + 1.0) - 1.0
    else:
        w = g.copy()
        back = lambda z: z.copy()

    out_times = [want[0]]
    out_vals = [g.copy()]
    t = prob.T
    n_steps = 0
    for target in want[1:]:
        while t - target > TIME_TOL:
            h = cfl * float(dx.min()) / max(op.max_speed(t), 1e-300)
            h = min(h, t - target)
            w = w - h * op(t, w)
            t -= h
            n_steps += 1
        t = target
        out_times.append(target)
        out_vals.append(back(w))

    touching = any(
        bool(np.any(v[0, :] <= 0) or np.any(v[-1, :] <= 0) or np.any(v[:, 0] <= 0) or np.any(v[:, -1] <= 0))
        for v in out_vals
    )
    if touching:
        warnings.warn("zero level set reaches the grid boundary; enlarge the box", BoxTooSmall, stacklevel=2)
    return GridSolution(b, resolution, out_times, out_vals, axes,
                        {"steps": n_steps, "dissipation": dissipation,
                         "transform": transform, "box_too_small": touching})


def _triangle_fraction(a, b, c):
    """Area fraction of {linear interpolant <= 0} on triangles with vertex values a, b, c."""
    neg = (a <= 0).astype(int) + (b <= 0) + (c <= 0)
    out = np.where(neg == 3, 1.0, 0.0)
    # one vertex inside: the corner triangle has fraction s^2/((s-u)(s-v))
    with np.errstate(divide="ignore", invalid="ignore"):
        for s, u, v in ((a, b, c), (b, c, a), (c, a, b)):
            one = (neg == 1) & (s <= 0)
            out = np.where(one, s * s / ((s - u) * (s - v)), out)
            two = (neg == 2) & (s > 0)
            out = np.where(two, 1.0 - s * s / ((s - u) * (s - v)), out)
    return out


def grid_sublevel_area(sol: GridSolution, t: float) -> float:
    """Area of ``{v(t, .) <= 0}`` with boundary cells split by linear interpolation.

    Each cell is cut into four triangles around its center (center value =
    mean of the corners), and the zero set of the linear interpolant on each
    triangle gives the covered fraction exactly.

    Raises:
        TimeNotStored: if ``t`` is not one of the stored times.
    """
    v = sol.at(t)
    c00, c10 = v[:-1, :-1], v[1:, :-1]
    c01, c11 = v[:-1, 1:], v[1:, 1:]
    mid = 0.25 * (c00 + c10 + c01 + c11)
    frac = (_triangle_fraction(c00, c10, mid) + _triangle_fraction(c10, c11, mid)
            + _triangle_fraction(c11, c01, mid) + _triangle_fraction(c01, c00, mid))
    dx, dy = sol.spacing
    return float(np.sum(frac)) * 0.25 * dx * dy


# --------------------------------------------------------------------------
# containment


@dataclass(frozen=True)
class ContainmentReport:
    """Outcome of a containment check.

    ``fraction`` is the share of checked points that satisfy the condition;
    ``worst`` is the largest violation measure seen (<= 0 when all pass).
    """

    kind: str
    t: float
    n_checked: int
    n_inside: int
    fraction: float
    worst: float
    band: float
    reference: str


def union_boundary_points(snapshot: EllipsoidFamilySnapshot, n_samples: int) -> np.ndarray:
    """Points on the boundary of a union of planar ellipses, spread over the members."""
    per = max(16, int(math.ceil(4 * n_samples / len(snapshot.members))))
    while True:
        ang = 2.0 * np.pi * np.arange(per) / per
        W = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        pts = np.concatenate([W @ E.Q_sqrt.T + E.q for E in snapshot.members])
        pts = pts[snapshot.reduce(pts, "min") >= -1e-9]
        if len(pts) >= n_samples or per >= 1 << 20:
            break
        per *= 2
    if len(pts) <= n_samples:
        return pts
    pick = np.floor(np.arange(n_samples) * len(pts) / n_samples).astype(int)
    return pts[pick]


def containment_report(family, reference: Union[Polygon, GridSolution], t: float,
                       n_samples: int = 1024, band: Optional[float] = None,
                       tol: float = 1e-6) -> ContainmentReport:
    """Check a family against a reference set at time ``t``.

    Under families: sampled points of the union boundary must lie in the
    reference, up to ``band`` (a distance; defaults to two grid spacings for
    grid references and the largest squared edge length for polygons).

    Over families: reference boundary points (polygon vertices or arc-length
    samples, grid zero crossings) must satisfy ``intersection_value <= tol``
    (polygon) or lie within ``band`` of the intersection (grid).

    Raises:
        DimensionUnsupported: for non-planar problems.
    """
    snap = family.snapshot(t)
    if snap.dim != 2:
        raise DimensionUnsupported("containment checks need planar families")
    is_grid = isinstance(reference, GridSolution)
    if band is None:
        if is_grid:
            band = 2.0 * float(reference.spacing.max())
        else:
            a, b = reference.edges()
            band = float(np.max(np.sum((b - a) ** 2, axis=1)))
    ref_name = "grid" if is_grid else "polygon"

    if family.kind == "under":
        pts = union_boundary_points(snap, n_samples)
        if is_grid:
            v = reference.interpolate(t, pts)
            gn = np.linalg.norm(reference.gradient(t, pts), axis=1)
            margin = v - band * gn
        else:
            margin = reference.signed_distance(pts) - band
    else:
        if is_grid:
            pts = reference.zero_crossings(t)
            if len(pts) > n_samples:
                pts = pts[np.floor(np.arange(n_samples) * len(pts) / n_samples).astype(int)]
            vals = snap.member_values(pts)
            k = np.argmax(vals, axis=0)
            centers, invs = snap._stack
            d = pts - centers[k]
            grad = 2.0 * np.einsum("kij,kj->ki", invs[k], d)
            margin = vals.max(axis=0) - band * np.linalg.norm(grad, axis=1)
        else:
            v = reference.vertices
            pts = v if len(v) >= n_samples else reference.sample_boundary(n_samples)
            margin = snap.reduce(pts, "max") - tol
    ok = margin <= 0.0
    n = int(len(pts))
    return ContainmentReport(family.kind, float(t), n, int(ok.sum()),
                             float(ok.mean()) if n else float("nan"),
                             float(margin.max()) if n else float("nan"), float(band), ref_name)
