"""Tight ellipsoidal under- and over-approximations of backward reachable sets.

Every family member carries a center q, a shape Q and a boundary
trajectory x* (plus the costate lambda in the under case). All of them are
integrated backwards from T to t0 with classical RK4. The member-specific
choices (the rotation S for the under family and the scalar kappa for the
over family) depend on the current state and are re-evaluated at every RK4
stage, as is the bang-bang input u*. For scalar inputs u* switches sign
whenever its switching function crosses zero; such steps are split at the
located switch time so that no RK4 stage straddles the discontinuity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence, Union

import numpy as np

from . import matcore
from ._parallel import parallel_map
from .ellipsoid import Ellipsoid, EllipsoidFamilySnapshot, quad_value, support_argmax
from .errors import (
    DimensionMismatch,
    NonPositiveKappa,
    NotOrthogonal,
    NotPsd,
    NotUnitNorm,
    ShapeDegenerate,
    StepTooLarge,
    TimeNotStored,
    ValidationError,
)
from .ltv import ReachProblem

ZERO_TOL = 1e-12  # ||Q*^{1/2} w_hat|| below this counts as zero
DEGENERATE_EIG = 1e-12
MESH_FRACTION = 0.25
NEAR_STEPS = 3  # steps within this many step lengths of a switch are refined
GRADED_FLOOR = 1e-10
SIGMA_ZERO = 1e-12  # relative size below which a switching value counts as zero


# --------------------------------------------------------------------------
# data types


@dataclass(frozen=True)
class EllipsoidState:
    """One family member at one instant.

    ``lam`` is the costate (under families only); ``w_hat`` caches
    ``Q^{-1/2}(x_star - q)``.
    """

    q: np.ndarray
    Q: np.ndarray
    x_star: np.ndarray
    lam: Optional[np.ndarray]
    w_hat: np.ndarray

    @classmethod
    def build(cls, q, Q, x_star, lam=None) -> "EllipsoidState":
        q = np.array(q, dtype=float).reshape(-1)
        Q = np.array(Q, dtype=float).reshape(q.shape[0], q.shape[0])
        x_star = np.array(x_star, dtype=float).reshape(-1)
        lam = None if lam is None else np.array(lam, dtype=float).reshape(-1)
        _, Qmh, _ = matcore.spd_roots(Q)
        return cls(q, Q, x_star, lam, Qmh @ (x_star - q))

    def ellipsoid(self) -> Ellipsoid:
        return Ellipsoid(self.q, self.Q)

    def tightness(self) -> float:
        """``quad_value(E(q, Q), x_star)``; zero for a tight member."""
        d = self.x_star - self.q
        return float(d @ np.linalg.solve(self.Q, d) - 1.0)


@dataclass(frozen=True)
class RunConfig:
    """Integration settings.

    Attributes:
        n_q: number of family members.
        dt: fixed step length.
        q_min: smallest-eigenvalue floor below which the under rotation
            falls back to the identity.
        kappa_min: lower bound on the over-family scalar kappa.
        t_eval: output times (empty means every step).
        phase: offset of the terminal directions in units of the angular
            spacing, e.g. 0.25 puts the first direction a quarter spacing
            away from the first axis.
        workers: number of member pipelines run concurrently.
        rotation_override: fixed orthogonal matrix (or callable of
            ``(t, q, Q, x_star)``) used instead of the selected rotation;
            bypasses the guards. Meant for experiments and tests.
    """

    n_q: int = 21
    dt: float = 0.01
    q_min: float = 1e-4
    kappa_min: float = 1e-4
    t_eval: tuple = ()
    phase: float = 0.0
    workers: Optional[int] = None
    rotation_override: Union[None, np.ndarray, Callable] = field(default=None, compare=False)

    def __post_init__(self):
        if int(self.n_q) != self.n_q or self.n_q < 1:
            raise ValidationError(f"n_q must be a positive integer, got {self.n_q}")
        if not self.dt > 0:
            raise ValidationError(f"dt must be positive, got {self.dt}")
        if not self.q_min > 0 or not self.kappa_min > 0:
            raise ValidationError("q_min and kappa_min must be positive")
        object.__setattr__(self, "n_q", int(self.n_q))
        object.__setattr__(self, "t_eval", tuple(float(t) for t in self.t_eval))


class GuardEvent(NamedTuple):
    t: float
    kind: str  # "q_min", "zero_target", "kappa_min", "switch"


@dataclass
class ApproxFamily:
    """Result of a run: snapshots of every member on the step grid."""

    kind: str
    times: np.ndarray
    snapshots: list
    problem: ReachProblem
    diagnostics: list
    config: RunConfig

    def index_of(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise TimeNotStored(f"t={t} is not on the step grid")
        return k

    def states_at(self, t: float) -> list:
        return self.snapshots[self.index_of(t)]

    def snapshot(self, t: float) -> EllipsoidFamilySnapshot:
        kind = "union" if self.kind == "under" else "intersection"
        return EllipsoidFamilySnapshot([s.ellipsoid() for s in self.states_at(t)], kind)

    def output_times(self) -> list:
        """Stored times selected by ``config.t_eval`` (all when empty), descending."""
        if not self.config.t_eval:
            return [float(t) for t in self.times]
        return [float(self.times[self.index_of(t)]) for t in sorted(self.config.t_eval, reverse=True)]

    def max_tightness(self) -> float:
        return max(abs(s.tightness()) for snap in self.snapshots for s in snap)

    def guard_counts(self) -> dict:
        counts: dict = {}
        for log in self.diagnostics:
            for ev in log:
                counts[ev.kind] = counts.get(ev.kind, 0) + 1
        return counts


# --------------------------------------------------------------------------
# elementary right-hand sides


def _unit(v, what="vector"):
    v = np.asarray(v, dtype=float).reshape(-1)
    if abs(np.linalg.norm(v) - 1.0) > 1e-10:
        raise NotUnitNorm(f"{what} has norm {np.linalg.norm(v):.12g}")
    return v


def _qstar_sqrt(M: np.ndarray) -> np.ndarray:
    """``(M M^T)^{1/2}`` for a tall n x m factor M, via the m x m Gram matrix."""
    n, m = M.shape
    if m == 1:
        g = float(M[:, 0] @ M[:, 0])
        if g == 0.0:
            return np.zeros((n, n))
        return np.outer(M[:, 0], M[:, 0]) / math.sqrt(g)
    G = M.T @ M
    dec = matcore.sym_eigen(G)
    lam = dec.eigenvalues
    if lam[0] > 1e-14 * max(lam[-1], 1e-300):
        V = dec.eigenvectors
        R = M @ ((V / np.sqrt(lam)) @ V.T) @ M.T
        return 0.5 * (R + R.T)
    return matcore.spd_sqrt(M @ M.T, semidefinite_ok=True)


def qstar(t: float, Q, prob: ReachProblem) -> np.ndarray:
    """``Q^{-1/2} B(t) P B(t)^T Q^{-1/2}`` (positive semi-definite)."""
    _, Qmh, _ = matcore.spd_roots(Q)
    B = prob.B(t)
    R = Qmh @ B @ prob.input.Q @ B.T @ Qmh
    return 0.5 * (R + R.T)


def center_rhs(t: float, q, prob: ReachProblem) -> np.ndarray:
    """``A(t) q + B(t) p``."""
    return prob.A(t) @ np.asarray(q, dtype=float) + prob.B(t) @ prob.input.q


def _under_forcing(Qh, Qsh, S):
    R = Qh @ (Qsh @ S + S.T @ Qsh) @ Qh
    return 0.5 * (R + R.T)


def under_shape_rhs(t: float, Q, S, prob: ReachProblem) -> np.ndarray:
    """``A Q + Q A^T - Q^{1/2}(Q*^{1/2} S + S^T Q*^{1/2})Q^{1/2}``.

    Raises:
        NotOrthogonal: if S is not orthogonal within 1e-8.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if not matcore.is_orthogonal(S, 1e-8):
        raise NotOrthogonal("rotation matrix is not orthogonal")
    Qh, Qmh, _ = matcore.spd_roots(Q)
    A, B = prob.A(t), prob.B(t)
    Qsh = _qstar_sqrt(Qmh @ B @ matcore.spd_sqrt(prob.input.Q))
    out = A @ Q + Q @ A.T - _under_forcing(Qh, Qsh, S)
    return 0.5 * (out + out.T)


def _perpendicular(r: np.ndarray) -> np.ndarray:
    k = int(np.argmin(np.abs(r)))
    e = np.zeros_like(r)
    e[k] = 1.0
    v = e - (e @ r) * r
    return v / np.linalg.norm(v)


def jacobi_rotation(w, w_star) -> np.ndarray:
    """Rotation in the plane of two unit vectors that maps ``w`` onto ``w_star``.

    Returns the identity when the vectors coincide. Antiparallel inputs get
    a half turn in an arbitrary plane containing ``w`` (a sign flip in 1-D).
    """
    r = _unit(w, "w")
    ws = _unit(w_star, "w_star")
    if r.shape != ws.shape:
        raise DimensionMismatch("w and w_star differ in dimension")
    n = r.shape[0]
    c = float(np.clip(r @ ws, -1.0, 1.0))
    perp = ws - c * r
    pn = float(np.linalg.norm(perp))
    if pn <= 1e-15:
        if c > 0:
            return np.eye(n)
        if n == 1:
            return -np.eye(1)
        rp = _perpendicular(r)
        s = 0.0
    else:
        rp = perp / pn
        s = float(rp @ ws)
    return (np.eye(n) + s * (np.outer(rp, r) - np.outer(r, rp))
            + (c - 1.0) * (np.outer(r, r) + np.outer(rp, rp)))


def select_rotation(state: EllipsoidState, Qs, q_min: float, target=None, log=None, t=float("nan")):
    """Rotation S taking ``w_hat/|w_hat|`` to the direction of ``Q*^{1/2} w_hat``.

    Falls back to the identity when ``Q*^{1/2} w_hat`` vanishes or the
    smallest eigenvalue of Q drops below ``q_min``. ``target`` replaces the
    computed direction (used when the direction is only known as a limit).
    Guard triggers are appended to ``log`` when given.
    """
    if matcore.min_eigenvalue(state.Q) < q_min:
        if log is not None:
            log.append(GuardEvent(t, "q_min"))
        return np.eye(state.q.shape[0])
    wh = state.w_hat
    if target is None:
        v = matcore.spd_sqrt(Qs, semidefinite_ok=True) @ wh
        nv = float(np.linalg.norm(v))
        if nv < ZERO_TOL:
            if log is not None:
                log.append(GuardEvent(t, "zero_target"))
            return np.eye(state.q.shape[0])
        target = v / nv
    return jacobi_rotation(wh / np.linalg.norm(wh), target)


def pmp_rhs(state: EllipsoidState, t: float, prob: ReachProblem):
    """Boundary trajectory and costate derivatives ``(A x + B u*, -A^T lambda)``."""
    A, B = prob.A(t), prob.B(t)
    u = support_argmax(prob.input, B.T @ state.lam)
    return A @ state.x_star + B @ u, -A.T @ state.lam


def over_shape_rhs(t: float, Q, kappa: float, prob: ReachProblem) -> np.ndarray:
    """``A Q + Q A^T - B P B^T / kappa - kappa Q``.

    Raises:
        NonPositiveKappa: if kappa <= 0.
    """
    if not kappa > 0:
        raise NonPositiveKappa(f"kappa must be positive, got {kappa}")
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    A, B = prob.A(t), prob.B(t)
    out = A @ Q + Q @ A.T - (B @ prob.input.Q @ B.T) / kappa - kappa * Q
    return 0.5 * (out + out.T)


def select_kappa(state: EllipsoidState, Qs, kappa_min: float, log=None, t=float("nan")) -> float:
    """``|Q*^{1/2} w_hat| / |w_hat|`` bounded below by ``kappa_min``."""
    wh = state.w_hat
    v = matcore.spd_sqrt(Qs, semidefinite_ok=True) @ wh
    nv = float(np.linalg.norm(v))
    nw = float(np.linalg.norm(wh))
    if nv < ZERO_TOL or nw == 0.0 or nv / nw < kappa_min:
        if log is not None:
            log.append(GuardEvent(t, "kappa_min"))
        return float(kappa_min)
    return nv / nw


def over_boundary_rhs(state: EllipsoidState, t: float, prob: ReachProblem) -> np.ndarray:
    """``A x* + B u*`` with u* maximising ``<-Q^{-1/2} w_hat, B u>`` over the input set."""
    A, B = prob.A(t), prob.B(t)
    _, Qmh, _ = matcore.spd_roots(state.Q)
    u = support_argmax(prob.input, B.T @ (Qmh @ state.w_hat))
    return A @ state.x_star + B @ u


# --------------------------------------------------------------------------
# terminal data


def unit_directions(n: int, count: int, phase: float = 0.0) -> np.ndarray:
    """``count`` unit vectors spread over the sphere in R^n.

    Equal angles in the plane (rotated by ``phase`` spacings), a Fibonacci
    lattice on the 2-sphere, and normalised Halton points pushed through
    the Gaussian quantile function above that.
    """
    if n == 1:
        return np.array([[1.0] if k % 2 == 0 else [-1.0] for k in range(count)])
    if n == 2:
        ang = 2.0 * np.pi * (np.arange(count) + phase) / count
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    if n == 3:
        k = np.arange(count) + 0.5
        z = 1.0 - 2.0 * k / count
        rho = np.sqrt(np.maximum(0.0, 1.0 - z * z))
        golden = np.pi * (3.0 - np.sqrt(5.0))
        ang = golden * k + 2.0 * np.pi * phase
        return np.stack([rho * np.cos(ang), rho * np.sin(ang), z], axis=1)
    from scipy.special import ndtri
    from scipy.stats import qmc

    pts = qmc.Halton(d=n, scramble=False).random(count + 1)[1:]
    g = ndtri(np.clip(pts, 1e-12, 1 - 1e-12))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def terminal_states(prob: ReachProblem, n_q: int, phase: float = 0.0, with_costate: bool = True) -> list:
    """Members at time T: q = x_e, Q = X_e, x* on the terminal boundary, lambda = 2 X_e^{-1}(x* - x_e)."""
    if n_q < 1:
        raise ValidationError("n_q must be at least 1")
    E = prob.terminal
    states = []
    for w in unit_directions(E.dim, n_q, phase):
        x = E.Q_sqrt @ w + E.q
        lam = 2.0 * E.Q_inv @ (x - E.q) if with_costate else None
        states.append(EllipsoidState(E.q.copy(), np.array(E.Q), x, lam, w.copy()))
    return states


# --------------------------------------------------------------------------
# integration core


class _Degenerate(Exception):
    def __init__(self, t, detail):
        self.t = t
        self.detail = detail


class _Runner:
    """Per-run integration machinery shared (read-only) by all members."""

    def __init__(self, prob: ReachProblem, cfg: RunConfig, mode: str):
        if mode not in ("under", "over"):
            raise ValueError(f"mode must be under or over, got {mode!r}")
        self.prob = prob
        self.cfg = cfg
        self.mode = mode
        self.p = prob.input.q
        self.P = np.array(prob.input.Q)
        self.Psqrt = matcore.spd_sqrt(self.P)
        self.scalar_input = prob.m == 1
        self.u_amp = float(self.Psqrt[0, 0]) if self.scalar_input else None
        self.override = cfg.rotation_override
        self.n = prob.n

    # ---- pieces -------------------------------------------------------
    def roots(self, Q, t):
        dec = matcore.sym_eigen(Q)
        lam = dec.eigenvalues
        if not lam[0] > DEGENERATE_EIG:
            raise _Degenerate(t, f"smallest eigenvalue {lam[0]:.3e}")
        V = dec.eigenvectors
        r = np.sqrt(lam)
        return (V * r) @ V.T, (V / r) @ V.T, float(lam[0])

    def control(self, l, lock):
        if self.scalar_input and lock != 0:
            return self.p - lock * self.u_amp
        Pl = self.P @ l
        nrm = math.sqrt(max(float(l @ Pl), 0.0))
        return self.p.copy() if nrm == 0.0 else self.p - Pl / nrm

    def sigma(self, t, y, with_scale=False):
        """Switching function of the scalar bang-bang input."""
        q, Q, x, lam = y
        b = self.prob.B(t)[:, 0]
        v = lam if self.mode == "under" else np.linalg.solve(Q, x - q)
        s = float(b @ v)
        if with_scale:
            return s, float(np.linalg.norm(b) * np.linalg.norm(v))
        return s

    def fixed_rotation(self, t, y, log=None):
        """Rotation held over a whole (sub)step, or None for stagewise selection."""
        if self.mode != "under":
            return None
        q, Q, x, _ = y
        if self.override is not None:
            S = self.override(t, q, Q, x) if callable(self.override) else self.override
            return np.atleast_2d(np.asarray(S, dtype=float))
        if matcore.min_eigenvalue(Q) < self.cfg.q_min:
            if log is not None:
                log.append(GuardEvent(t, "q_min"))
            return np.eye(self.n)
        return None

    def rhs(self, t, y, lock, S_fixed):
        q, Q, x, lam = y
        A = self.prob.A(t)
        B = self.prob.B(t)
        Qh, Qmh, _ = self.roots(Q, t)
        M = Qmh @ B @ self.Psqrt
        Qsh = _qstar_sqrt(M)
        wh = Qmh @ (x - q)
        dq = A @ q + B @ self.p
        AQ = A @ Q
        if self.mode == "under":
            if S_fixed is not None:
                S = S_fixed
            else:
                nw = float(np.linalg.norm(wh))
                nm = float(np.linalg.norm(M[:, 0])) if self.scalar_input else 0.0
                if self.scalar_input and lock != 0 and nm > 0.0:
                    target = lock * M[:, 0] / nm
                else:
                    v = Qsh @ wh
                    nv = float(np.linalg.norm(v))
                    target = v / nv if nv >= ZERO_TOL else None
                if target is None or nw == 0.0:
                    S = np.eye(self.n)
                else:
                    S = jacobi_rotation(wh / nw, target)
            dQ = AQ + AQ.T - _under_forcing(Qh, Qsh, S)
            u = self.control(B.T @ lam, lock)
            return dq, dQ, A @ x + B @ u, -A.T @ lam
        nw = float(np.linalg.norm(wh))
        nv = float(np.linalg.norm(Qsh @ wh))
        kappa = nv / nw if (nv >= ZERO_TOL and nw > 0.0) else 0.0
        kappa = max(kappa, self.cfg.kappa_min)
        BPB = B @ self.P @ B.T
        dQ = AQ + AQ.T - BPB / kappa - kappa * Q
        u = self.control(B.T @ (Qmh @ wh), lock)
        return dq, dQ, A @ x + B @ u, None

    # ---- stepping -----------------------------------------------------
    def rk4(self, t, y, h, lock, S_fixed=None):
        """One backward RK4 step from t to t - h (h > 0)."""
        if S_fixed is None:
            S_fixed = self.fixed_rotation(t, y)
        under = self.mode == "under"

        def shift(y0, k, c):
            return (y0[0] - c * k[0], y0[1] - c * k[1], y0[2] - c * k[2],
                    y0[3] - c * k[3] if under else None)

        k1 = self.rhs(t, y, lock, S_fixed)
        k2 = self.rhs(t - 0.5 * h, shift(y, k1, 0.5 * h), lock, S_fixed)
        k3 = self.rhs(t - 0.5 * h, shift(y, k2, 0.5 * h), lock, S_fixed)
        k4 = self.rhs(t - h, shift(y, k3, h), lock, S_fixed)
        c = h / 6.0
        out = [y[i] - c * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) for i in range(3)]
        out[1] = 0.5 * (out[1] + out[1].T)
        lam = None
        if under:
            lam = y[3] - c * (k1[3] + 2.0 * k2[3] + 2.0 * k3[3] + k4[3])
        return (out[0], out[1], out[2], lam)

    def meshed(self, t, y, h, lock, stars):
        """Integrate over [t - h, t] with pieces shrinking near the times in ``stars``.

        Each piece is at most half the distance from its start to the
        nearest switch time, which keeps RK4 accurate where kappa -> 0.
        """
        end = t - h
        while t - end > 0.0:
            d = min(abs(t - s) for s in stars)
            L = max(GRADED_FLOOR, MESH_FRACTION * d)
            if t - L <= end or (t - end) - L < GRADED_FLOOR:
                L = t - end
            y = self.rk4(t, y, L, lock)
            t -= L
        return y

    def _step(self, t, y, h, lock, stars):
        if stars:
            return self.meshed(t, y, h, lock, stars)
        return self.rk4(t, y, h, lock)

    def advance(self, t, y, h, log):
        """Advance a member from t to t - h, splitting at a switch of u*."""
        self.fixed_rotation(t, y, log)
        if self.mode == "over":
            self._log_kappa(t, y, log)
        if not self.scalar_input:
            return self.rk4(t, y, h, 0)
        singular = self.mode == "over"
        s0, scale = self.sigma(t, y, with_scale=True)
        lock = float(np.sign(s0)) if abs(s0) > SIGMA_ZERO * scale else 0.0
        if lock == 0.0:
            # starting exactly on the switching surface: keep the first sign
            # whose trajectory leaves the surface on its own side
            first = None
            for cand in (1.0, -1.0):
                try:
                    trial = self.meshed(t, y, h, cand, [t])
                except _Degenerate:
                    continue
                if np.sign(self.sigma(t - h, trial)) == cand:
                    log.append(GuardEvent(t, "switch"))
                    return trial
                if first is None:
                    first = trial
            if first is None:
                raise _Degenerate(t, "no admissible input sign on the switching surface")
            return first
        # switch times close enough to spoil a plain step (over family only)
        stars = []
        if singular and log and log[-1].kind == "switch" and log[-1].t - t < NEAR_STEPS * h:
            stars.append(log[-1].t)
        end = self._step(t, y, h, lock, stars)
        s1 = self.sigma(t - h, end)
        if np.sign(s1) != -lock:
            if singular and np.sign(s1) == lock and abs(s1) < abs(s0):
                ahead = h * s0 / (s0 - s1)  # linear prediction of the next zero
                if ahead < (NEAR_STEPS + 1) * h:
                    end = self.meshed(t, y, h, lock, stars + [t - ahead])
            return end
        tau = self._locate_switch(t, y, h, lock, s0, s1)
        log.append(GuardEvent(t - tau, "switch"))
        if singular:
            stars = stars + [t - tau]
        mid = self._step(t, y, tau, lock, stars)
        return self._step(t - tau, mid, h - tau, -lock, stars)

    def _locate_switch(self, t, y, h, lock, fa, fb):
        """Illinois iteration for the first sign change of the switching function."""
        a, b = 0.0, h
        side = 0
        tol = 4e-16 * max(1.0, abs(t))
        for _ in range(100):
            if b - a <= tol:
                break
            c = (a * fb - b * fa) / (fb - fa)
            if not (a < c < b):
                c = 0.5 * (a + b)
            fc = self.sigma(t - c, self.rk4(t, y, c, lock))
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
        return b

    def _log_kappa(self, t, y, log):
        q, Q, x, _ = y
        _, Qmh, _ = self.roots(Q, t)
        B = self.prob.B(t)
        wh = Qmh @ (x - q)
        nv = float(np.linalg.norm(_qstar_sqrt(Qmh @ B @ self.Psqrt) @ wh))
        nw = float(np.linalg.norm(wh))
        if nv < ZERO_TOL or nw == 0.0 or nv / nw < self.cfg.kappa_min:
            log.append(GuardEvent(t, "kappa_min"))


def _as_tuple(s: EllipsoidState):
    return (s.q, s.Q, s.x_star, s.lam)


def _to_state(y, t) -> EllipsoidState:
    q, Q, x, lam = y
    dec = matcore.sym_eigen(Q)
    if not dec.eigenvalues[0] > DEGENERATE_EIG:
        raise _Degenerate(t, f"smallest eigenvalue {dec.eigenvalues[0]:.3e}")
    V = dec.eigenvectors
    Qmh = (V / np.sqrt(dec.eigenvalues)) @ V.T
    return EllipsoidState(q, Q, x, lam, Qmh @ (x - q))


def step_grid(t0: float, T: float, dt: float) -> np.ndarray:
    """Descending grid T, T - dt, ..., t0 (last step shortened if needed)."""
    if dt > T - t0:
        raise StepTooLarge(f"dt={dt} exceeds the horizon length {T - t0}")
    N = int(math.ceil((T - t0) / dt - 1e-9))
    ts = [round(T - k * dt, 12) for k in range(N)] + [t0]
    return np.array(ts)


def rk4_coupled_step(states: Sequence[EllipsoidState], t: float, dt: float, mode: str,
                     prob: ReachProblem, cfg: RunConfig) -> list:
    """Advance every member from t to t - dt.

    Raises:
        ShapeDegenerate: if a shape matrix loses definiteness.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    runner = _Runner(prob, cfg, mode)
    out = []
    for i, s in enumerate(states):
        try:
            y = runner.advance(t, _as_tuple(s), dt, [])
            out.append(_to_state(y, t - dt))
        except _Degenerate as exc:
            raise ShapeDegenerate(exc.t, i, exc.detail) from None
        except NotPsd as exc:
            raise ShapeDegenerate(t, i, str(exc)) from None
    return out


def _run(prob: ReachProblem, cfg: RunConfig, mode: str) -> ApproxFamily:
    if prob.direction != "backward":
        raise ValidationError("run a forward problem through ltv.time_reverse first")
    times = step_grid(prob.t0, prob.T, cfg.dt)
    for te in cfg.t_eval:
        if te < prob.t0 - 1e-12 or te > prob.T + 1e-12:
            raise ValidationError(f"output time {te} outside the horizon")
    runner = _Runner(prob, cfg, mode)
    init = terminal_states(prob, cfg.n_q, cfg.phase, with_costate=(mode == "under"))

    def member(i):
        y = _as_tuple(init[i])
        traj = [init[i]]
        log: list = []
        t = times[0]
        try:
            for k in range(1, len(times)):
                h = times[k - 1] - times[k]
                y = runner.advance(times[k - 1], y, h, log)
                t = times[k]
                traj.append(_to_state(y, t))
        except _Degenerate as exc:
            return ("degenerate", exc.t, exc.detail)
        except (NotPsd, FloatingPointError) as exc:
            return ("degenerate", t, str(exc))
        return ("ok", traj, log)

    results = parallel_map(member, range(cfg.n_q), cfg.workers)
    failures = [(r[1], i, r[2]) for i, r in enumerate(results) if r[0] == "degenerate"]
    if failures:
        t_fail, i, detail = max(failures, key=lambda f: (f[0], -f[1]))
        raise ShapeDegenerate(t_fail, i, detail)
    snapshots = [[results[i][1][k] for i in range(cfg.n_q)] for k in range(len(times))]
    diagnostics = [results[i][2] for i in range(cfg.n_q)]
    return ApproxFamily(mode, times, snapshots, prob, diagnostics, cfg)


def run_under(prob: ReachProblem, cfg: RunConfig) -> ApproxFamily:
    """Integrate the under-approximating family; the union of members lies inside G(t).

    Raises:
        ShapeDegenerate: when a member's shape loses definiteness.
        StepTooLarge: if dt exceeds the horizon.
    """
    return _run(prob, cfg, "under")


def run_over(prob: ReachProblem, cfg: RunConfig) -> ApproxFamily:
    """Integrate the over-approximating family; G(t) lies inside the intersection of members."""
    return _run(prob, cfg, "over")
