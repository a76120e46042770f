"""Ellipsoids E(q, Q) = {x : <x - q, Q^{-1}(x - q)> <= 1} and families of them."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import matcore
from .errors import DimensionMismatch, EmptyFamily, NotUnitNorm

UNIT_TOL = 1e-10


class Ellipsoid:
    """Non-degenerate ellipsoid with center ``q`` and shape ``Q``.

    The eigendecomposition of ``Q`` is computed once on construction and
    reused for every membership query.
    """

    __slots__ = ("q", "Q", "_inv", "_sqrt")

    def __init__(self, q, Q):
        Q = matcore.as_spd(Q, name="shape")
        q = np.array(q, dtype=float).reshape(-1)
        if q.shape[0] != Q.shape[0]:
            raise DimensionMismatch(f"center has dimension {q.shape[0]}, shape is {Q.shape}")
        q.setflags(write=False)
        dec = matcore.sym_eigen(Q)
        V, lam = dec.eigenvectors, dec.eigenvalues
        inv = (V / lam) @ V.T
        sq = (V * np.sqrt(lam)) @ V.T
        inv = 0.5 * (inv + inv.T)
        sq = 0.5 * (sq + sq.T)
        inv.setflags(write=False)
        sq.setflags(write=False)
        self.q = q
        self.Q = Q
        self._inv = inv
        self._sqrt = sq

    @property
    def dim(self) -> int:
        return self.q.shape[0]

    @property
    def Q_inv(self) -> np.ndarray:
        return self._inv

    @property
    def Q_sqrt(self) -> np.ndarray:
        return self._sqrt

    def __repr__(self):
        return f"Ellipsoid(q={self.q.tolist()}, Q={self.Q.tolist()})"

    def __eq__(self, other):
        if not isinstance(other, Ellipsoid):
            return NotImplemented
        return np.array_equal(self.q, other.q) and np.array_equal(self.Q, other.Q)

    __hash__ = None


def _points(E: Ellipsoid, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != E.dim:
        raise DimensionMismatch(f"point dimension {x.shape[-1]} != {E.dim}")
    return x


def quad_value(E: Ellipsoid, x):
    """Return ``<x - q, Q^{-1}(x - q)> - 1``.

    ``x`` may be a single point of shape (n,) or a stack of shape (..., n),
    in which case an array of values is returned.
    """
    x = _points(E, x)
    d = x - E.q
    val = np.einsum("...i,ij,...j->...", d, E.Q_inv, d) - 1.0
    return float(val) if np.ndim(val) == 0 else val


def contains(E: Ellipsoid, x):
    """Membership test, ``quad_value <= 0``."""
    v = quad_value(E, x)
    return bool(v <= 0.0) if np.ndim(v) == 0 else v <= 0.0


def boundary_point(E: Ellipsoid, w) -> np.ndarray:
    """Image ``Q^{1/2} w + q`` of a unit vector ``w``.

    Raises:
        NotUnitNorm: if ``| ||w|| - 1 | > 1e-10``.
    """
    w = _points(E, w)
    if abs(np.linalg.norm(w) - 1.0) > UNIT_TOL:
        raise NotUnitNorm(f"direction has norm {np.linalg.norm(w):.12g}")
    return E.Q_sqrt @ w + E.q


def boundary_points(E: Ellipsoid, n: int, phase: float = 0.0) -> np.ndarray:
    """``n`` boundary points of a planar ellipse at equally spaced angles."""
    if E.dim != 2:
        raise DimensionMismatch("boundary_points needs a 2-D ellipsoid")
    ang = 2.0 * np.pi * (np.arange(n) + phase) / n
    W = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return W @ E.Q_sqrt.T + E.q


def support_value(E: Ellipsoid, l) -> float:
    """``max_{u in E} <l, u> = <l, p> + sqrt(<l, P l>)``."""
    l = _points(E, l)
    return float(l @ E.q + np.sqrt(max(l @ E.Q @ l, 0.0)))


def support_argmax(E: Ellipsoid, l) -> np.ndarray:
    """Maximiser of ``<-l, u>`` over E(p, P): ``p - P l / ||P^{1/2} l||`` (``p`` if l = 0)."""
    l = _points(E, l)
    Pl = E.Q @ l
    nrm = np.sqrt(max(l @ Pl, 0.0))
    if nrm == 0.0:
        return E.q.copy()
    return E.q - Pl / nrm


@dataclass(frozen=True)
class EllipsoidFamilySnapshot:
    """Ordered collection of same-dimension ellipsoids read as a union or an intersection."""

    members: Sequence[Ellipsoid]
    kind: str = "union"
    _stack: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ("union", "intersection"):
            raise ValueError(f"unknown family kind {self.kind!r}")
        members = tuple(self.members)
        if not members:
            raise EmptyFamily("family has no members")
        n = members[0].dim
        if any(m.dim != n for m in members):
            raise DimensionMismatch("family members differ in dimension")
        object.__setattr__(self, "members", members)
        centers = np.stack([m.q for m in members])
        invs = np.stack([m.Q_inv for m in members])
        object.__setattr__(self, "_stack", (centers, invs))

    @property
    def dim(self) -> int:
        return self.members[0].dim

    def member_values(self, x) -> np.ndarray:
        """Quadratic values of every member; shape (n_members, ...)."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise DimensionMismatch(f"point dimension {x.shape[-1]} != {self.dim}")
        centers, invs = self._stack
        out = []
        for c, Qi in zip(centers, invs):
            d = x - c
            out.append(np.einsum("...i,ij,...j->...", d, Qi, d) - 1.0)
        return np.stack(out)

    def reduce(self, x, how: str):
        """Running min (``how='min'``) or max of member values without stacking them."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise DimensionMismatch(f"point dimension {x.shape[-1]} != {self.dim}")
        centers, invs = self._stack
        op = np.minimum if how == "min" else np.maximum
        out = None
        for c, Qi in zip(centers, invs):
            d = x - c
            val = np.einsum("...i,ij,...j->...", d, Qi, d) - 1.0
            out = val if out is None else op(out, val)
        return float(out) if np.ndim(out) == 0 else out

    def value(self, x):
        """Union or intersection value depending on ``kind``."""
        return self.reduce(x, "min" if self.kind == "union" else "max")


def union_value(F: EllipsoidFamilySnapshot, x):
    """Minimum of member quadratic values; <= 0 iff x lies in the union."""
    if not F.members:
        raise EmptyFamily("family has no members")
    return F.reduce(x, "min")


def intersection_value(F: EllipsoidFamilySnapshot, x):
    """Maximum of member quadratic values; <= 0 iff x lies in every member."""
    if not F.members:
        raise EmptyFamily("family has no members")
    return F.reduce(x, "max")
