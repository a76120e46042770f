"""Linear time-varying system data: signals A(t), B(t) and reachability problems."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .ellipsoid import Ellipsoid
from .errors import DimensionMismatch, NonPositive, OutOfRange, ValidationError

RANGE_TOL = 1e-12


def _oscillator_A(t: float) -> np.ndarray:
    w2 = 4.0 + 2.0 * math.cos(2.0 * t)
    return np.array([[0.0, 1.0], [-w2, 0.0]])


def _oscillator_B(t: float) -> np.ndarray:
    return np.array([[0.0], [1.0]])


def _integrator_A(t: float) -> np.ndarray:
    return np.zeros((1, 1))


def _integrator_B(t: float) -> np.ndarray:
    return np.ones((1, 1))


# name -> (A(t), B(t)); shapes are read off an evaluation at t = 0
BUILTIN_SIGNALS: dict[str, tuple[Callable, Callable]] = {
    "parametric_oscillator": (_oscillator_A, _oscillator_B),
    "single_integrator": (_integrator_A, _integrator_B),
}


class MatrixSignal:
    """A matrix-valued function of time.

    Supported sources are a named closed form (``builtin``), linear
    interpolation through samples (``sampled``), a fixed matrix
    (``constant``) and an arbitrary callable (``function``). Time reversal is represented without resampling as an
    affine reparametrisation ``sign * raw(a * t + b)`` so that reversing
    twice gives back exactly the original evaluations.
    """

    __slots__ = ("kind", "name", "times", "values", "rows", "cols", "_fn", "_map")

    def __init__(self, kind, *, name=None, times=None, values=None, fn=None, shape=None,
                 tmap=(1.0, 1.0, 0.0)):
        self.kind = kind
        self.name = name
        self.times = times
        self.values = values
        self._fn = fn
        self.rows, self.cols = shape
        self._map = tmap

    @classmethod
    def builtin(cls, name: str, which: str) -> "MatrixSignal":
        """Closed-form signal ``which`` ('A' or 'B') of builtin system ``name``."""
        if name not in BUILTIN_SIGNALS:
            raise ValidationError(f"unknown builtin system {name!r}")
        fn = BUILTIN_SIGNALS[name][0 if which == "A" else 1]
        shape = fn(0.0).shape
        return cls("builtin", name=f"{name}.{which}", fn=fn, shape=shape)

    @classmethod
    def sampled(cls, times, values) -> "MatrixSignal":
        times = np.array(times, dtype=float).reshape(-1)
        values = np.array(values, dtype=float)
        if values.ndim == 2 and times.shape[0] != 1:
            values = values[:, :, None]
        if values.ndim != 3 or values.shape[0] != times.shape[0]:
            raise DimensionMismatch("need one matrix per sample time")
        if times.shape[0] < 2 or np.any(np.diff(times) <= 0):
            raise ValidationError("sample times must be strictly ascending (at least two)")
        if not np.all(np.isfinite(values)):
            raise ValidationError("sample values must be finite")
        times.setflags(write=False)
        values.setflags(write=False)
        return cls("sampled", times=times, values=values, shape=values.shape[1:])

    @classmethod
    def from_function(cls, fn: Callable[[float], np.ndarray], name: str = "function") -> "MatrixSignal":
        """Wrap an arbitrary callable ``t -> matrix`` (not serialisable to problem files)."""
        shape = np.atleast_2d(np.asarray(fn(0.0), dtype=float)).shape
        return cls("function", name=name, fn=lambda t: np.atleast_2d(np.asarray(fn(t), dtype=float)),
                   shape=shape)

    @classmethod
    def constant(cls, M) -> "MatrixSignal":
        M = np.atleast_2d(np.array(M, dtype=float))
        M.setflags(write=False)
        return cls("constant", values=M, shape=M.shape)

    @property
    def is_reversed(self) -> bool:
        return self._map != (1.0, 1.0, 0.0)

    def raw(self) -> "MatrixSignal":
        """The same signal without any time reparametrisation."""
        return replace_map(self, (1.0, 1.0, 0.0))

    def reversed(self, pivot: float) -> "MatrixSignal":
        """Signal ``s -> -M(pivot - s)``."""
        sign, a, b = self._map
        new = (-sign, -a, a * pivot + b)
        if new[0] == 1.0 and new[1] == 1.0 and new[2] == 0.0:
            new = (1.0, 1.0, 0.0)
        return replace_map(self, new)

    def __call__(self, t: float) -> np.ndarray:
        return eval_signal(self, t)

    def __eq__(self, other):
        if not isinstance(other, MatrixSignal):
            return NotImplemented
        if (self.kind, self.name, self._map, self.rows, self.cols) != (
                other.kind, other.name, other._map, other.rows, other.cols):
            return False
        if self.kind in ("builtin", "function"):
            return self._fn is other._fn
        same_times = self.times is None and other.times is None or (
            self.times is not None and other.times is not None and np.array_equal(self.times, other.times))
        return same_times and np.array_equal(self.values, other.values)

    __hash__ = None

    def __repr__(self):
        tag = self.name or self.kind
        return f"MatrixSignal({tag}, {self.rows}x{self.cols}{', reversed' if self.is_reversed else ''})"


def replace_map(M: MatrixSignal, tmap) -> MatrixSignal:
    return MatrixSignal(M.kind, name=M.name, times=M.times, values=M.values, fn=M._fn,
                        shape=(M.rows, M.cols), tmap=tuple(tmap))


def _eval_raw(M: MatrixSignal, t: float) -> np.ndarray:
    if M.kind in ("builtin", "function"):
        return M._fn(t)
    if M.kind == "constant":
        return M.values.copy()
    ts = M.times
    tol = RANGE_TOL * max(1.0, abs(ts[0]), abs(ts[-1]))
    if t < ts[0] - tol or t > ts[-1] + tol:
        raise OutOfRange(f"t={t!r} outside sample range [{ts[0]}, {ts[-1]}]")
    t = min(max(t, ts[0]), ts[-1])
    k = int(np.searchsorted(ts, t, side="right")) - 1
    if k >= len(ts) - 1:
        return M.values[-1].copy()
    if t == ts[k]:
        return M.values[k].copy()
    th = (t - ts[k]) / (ts[k + 1] - ts[k])
    return (1.0 - th) * M.values[k] + th * M.values[k + 1]


def eval_signal(M: MatrixSignal, t: float) -> np.ndarray:
    """Evaluate a signal at time ``t``.

    Raises:
        OutOfRange: for sampled signals queried outside their sample times.
    """
    sign, a, b = M._map
    if a == 1.0 and b == 0.0:
        val = _eval_raw(M, t)
    else:
        val = _eval_raw(M, a * t + b)
    return val if sign == 1.0 else -val


@dataclass(frozen=True)
class ReachProblem:
    """Reachability problem for x' = A(t)x + B(t)u, u in E(p, P), x(T) in E(x_e, X_e).

    ``direction`` says which set the data describe. A forward problem is
    solved by handing :func:`time_reverse` of it to the backward machinery.
    """

    A: MatrixSignal
    B: MatrixSignal
    input: Ellipsoid
    terminal: Ellipsoid
    t0: float
    T: float
    direction: str = "backward"

    def __post_init__(self):
        if not self.t0 < self.T:
            raise ValidationError(f"horizon needs t0 < T, got t0={self.t0}, T={self.T}")
        if self.direction not in ("backward", "forward"):
            raise ValidationError(f"direction must be backward or forward, got {self.direction!r}")
        n = self.terminal.dim
        if (self.A.rows, self.A.cols) != (n, n):
            raise DimensionMismatch(f"A is {self.A.rows}x{self.A.cols}, state dimension is {n}")
        if self.B.rows != n:
            raise DimensionMismatch(f"B has {self.B.rows} rows, state dimension is {n}")
        if self.B.cols != self.input.dim:
            raise DimensionMismatch(f"B has {self.B.cols} columns, input dimension is {self.input.dim}")
        for M in (self.A, self.B):
            if M.kind == "sampled":
                lo, hi = sorted((M._map[1] * self.t0 + M._map[2], M._map[1] * self.T + M._map[2]))
                tol = RANGE_TOL * max(1.0, abs(lo), abs(hi))
                if lo < M.times[0] - tol or hi > M.times[-1] + tol:
                    raise ValidationError("sampled signal does not cover the horizon")

    @property
    def n(self) -> int:
        return self.terminal.dim

    @property
    def m(self) -> int:
        return self.input.dim


def builtin_parametric_oscillator() -> ReachProblem:
    """Forced oscillator with stiffness 4 + 2cos(2t), unit input ball and terminal ball of radius 0.1 on [0, 1.5]."""
    return ReachProblem(
        A=MatrixSignal.builtin("parametric_oscillator", "A"),
        B=MatrixSignal.builtin("parametric_oscillator", "B"),
        input=Ellipsoid([0.0], [[1.0]]),
        terminal=Ellipsoid([0.0, 0.0], 0.01 * np.eye(2)),
        t0=0.0,
        T=1.5,
    )


def builtin_single_integrator(r: float = 0.1, T: float = 1.0) -> ReachProblem:
    """Scalar integrator x' = u, |u| <= 1, terminal interval [-r, r] at time T (start time 0)."""
    if not r > 0 or not T > 0:
        raise NonPositive(f"need r > 0 and T > 0, got r={r}, T={T}")
    return ReachProblem(
        A=MatrixSignal.builtin("single_integrator", "A"),
        B=MatrixSignal.builtin("single_integrator", "B"),
        input=Ellipsoid([0.0], [[1.0]]),
        terminal=Ellipsoid([0.0], [[r * r]]),
        t0=0.0,
        T=float(T),
    )


BUILTIN_PROBLEMS: dict[str, Callable[..., ReachProblem]] = {
    "parametric_oscillator": builtin_parametric_oscillator,
    "single_integrator": builtin_single_integrator,
}


def time_reverse(prob: ReachProblem) -> ReachProblem:
    """Time-reversed problem on the same horizon with the direction flag flipped.

    The reversed signals are ``-A(T + t0 - s)`` and ``-B(T + t0 - s)``; the
    forward reachable set of the original problem is the backward reachable
    set of the reversed one (and vice versa).
    """
    c = prob.T + prob.t0
    flipped = "forward" if prob.direction == "backward" else "backward"
    return replace(prob, A=prob.A.reversed(c), B=prob.B.reversed(c), direction=flipped)
