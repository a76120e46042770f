"""Command line front end: problem files, run orchestration and CSV/SVG output.

A problem file is a JSON document::

    {
      "schema_version": 1,
      "system": {"builtin": "parametric_oscillator"},
      "input": {"center": [0.0], "shape": [[1.0]]},
      "terminal": {"center": [0.0, 0.0], "shape": [[0.01, 0.0], [0.0, 0.01]]},
      "horizon": {"t0": 0.0, "T": 1.5},
      "direction": "backward",
      "run": {"mode": "compare", "n_q": 21, "n_q_over": 5, "dt": 0.01, "t_eval": [0.0],
              "grid": {"box": [[-2, 2], [-2, 2]], "resolution": 251, "cfl": 0.5},
              "n_dirs": 512}
    }

``system`` is one of ``{"builtin": name}``, ``{"samples": {"times", "A", "B"}}``
or ``{"constant": {"A", "B"}}``. Builtin systems also provide default input
and terminal sets, horizon and grid box; for the other kinds those entries
are required.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import oracle
from .ellipsoid import Ellipsoid, EllipsoidFamilySnapshot, boundary_points
from .errors import (EllReachError, IoError, NotPsd, NotSymmetric, ParseError, ShapeDegenerate,
                     ValidationError)
from .ltv import BUILTIN_PROBLEMS, MatrixSignal, ReachProblem, time_reverse
from .reach import ApproxFamily, RunConfig, run_over, run_under

SCHEMA_VERSION = 1
MODES = ("under", "over", "oracle-pmp", "oracle-grid", "compare")
DEFAULT_BOXES = {"parametric_oscillator": [[-2.0, 2.0], [-2.0, 2.0]]}
AREA_RESOLUTION = 801
SVG_SIZE = 600.0
SVG_SEGMENTS = 128

EXIT_OK, EXIT_VALIDATION, EXIT_DEGENERATE, EXIT_IO = 0, 2, 3, 4


@dataclass(frozen=True)
class CommandConfig:
    """Everything a run needs besides the problem itself.

    Attributes:
        run: integration settings for the ellipsoidal families.
        mode: one of ``MODES``.
        direction: direction requested in the problem file (the parsed
            problem is always backward).
        box: grid box ``[[x_lo, x_hi], [y_lo, y_hi]]`` or None.
        resolution: grid nodes per axis.
        cfl: Courant number of the grid solver.
        n_dirs: number of extremal trajectories of the polygon oracle.
        n_q_over: member count of the over family in ``compare`` runs
            (None uses ``run.n_q``).
        out_dir: directory receiving the artifacts.
    """

    run: RunConfig = field(default_factory=RunConfig)
    mode: str = "under"
    direction: str = "backward"
    box: Optional[tuple] = None
    resolution: int = 251
    cfl: float = 0.5
    n_dirs: int = 512
    n_q_over: Optional[int] = None
    out_dir: str = "out"


@dataclass
class RunReport:
    """Summary of a run.

    ``areas`` and ``percentages`` map a set name (``under``, ``over``,
    ``oracle-pmp``, ``oracle-grid``) to ``{t: value}``; percentages are
    ``100 * area / oracle_area`` against the polygon oracle when present,
    otherwise the grid oracle.
    """

    mode: str
    direction: str
    times: list
    areas: dict = field(default_factory=dict)
    percentages: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    guard_counts: dict = field(default_factory=dict)
    max_tightness: dict = field(default_factory=dict)
    paths: list = field(default_factory=list)

    def to_dict(self) -> dict:
        def keyed(d):
            return {k: {format(t, ".17g"): v for t, v in sorted(inner.items())} for k, inner in d.items()}

        return {
            "mode": self.mode,
            "direction": self.direction,
            "times": self.times,
            "areas": keyed(self.areas),
            "percentages": keyed(self.percentages),
            "timings": self.timings,
            "guard_counts": self.guard_counts,
            "max_tightness": self.max_tightness,
            "paths": self.paths,
        }


# --------------------------------------------------------------------------
# parsing


def _line_of(text: str, key: str) -> Optional[int]:
    needle = f'"{key}"'
    for k, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return k
    return None


class _Reader:
    """Typed access to the decoded document with field-path error messages."""

    def __init__(self, text: str, source: str):
        self.text = text
        self.source = source

    def fail(self, path: str, msg: str, exc=ParseError):
        line = _line_of(self.text, path.rsplit(".", 1)[-1])
        where = f"{self.source}:{line}" if line else self.source
        raise exc(f"{where}: field '{path}': {msg}")

    def get(self, obj: dict, key: str, path: str, required=True, default=None):
        if not isinstance(obj, dict):
            self.fail(path, "expected an object")
        if key not in obj:
            if required:
                self.fail(f"{path}.{key}" if path else key, "missing", ValidationError)
            return default
        return obj[key]

    def number(self, val, path: str, positive=False) -> float:
        if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
            self.fail(path, f"expected a finite number, got {val!r}")
        if positive and not val > 0:
            self.fail(path, f"must be positive, got {val!r}", ValidationError)
        return float(val)

    def integer(self, val, path: str) -> int:
        if isinstance(val, bool) or not isinstance(val, int) or val < 1:
            self.fail(path, f"expected a positive integer, got {val!r}")
        return int(val)

    def array(self, val, path: str, ndim: int) -> np.ndarray:
        try:
            arr = np.array(val, dtype=float)
        except (TypeError, ValueError):
            self.fail(path, "expected a numeric array")
        if arr.ndim != ndim or arr.size == 0:
            self.fail(path, f"expected a non-empty {ndim}-D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            self.fail(path, "entries must be finite")
        return arr

    def ellipsoid(self, obj, path: str) -> Ellipsoid:
        q = self.array(self.get(obj, "center", path), f"{path}.center", 1)
        Q = self.array(self.get(obj, "shape", path), f"{path}.shape", 2)
        try:
            return Ellipsoid(q, Q)
        except (NotPsd, NotSymmetric, EllReachError, ValueError) as exc:
            self.fail(f"{path}.shape", str(exc), ValidationError)


def _signals(rd: _Reader, system: dict):
    if not isinstance(system, dict) or len(system) != 1:
        rd.fail("system", "expected exactly one of 'builtin', 'samples', 'constant'")
    (kind, body), = system.items()
    if kind == "builtin":
        if body not in BUILTIN_PROBLEMS:
            rd.fail("system.builtin", f"unknown builtin {body!r}", ValidationError)
        return body, BUILTIN_PROBLEMS[body]()
    if kind == "samples":
        times = rd.array(rd.get(body, "times", "system.samples"), "system.samples.times", 1)
        sigs = []
        for name in ("A", "B"):
            vals = rd.array(rd.get(body, name, "system.samples"), f"system.samples.{name}", 3)
            try:
                sigs.append(MatrixSignal.sampled(times, vals))
            except EllReachError as exc:
                rd.fail(f"system.samples.{name}", str(exc), ValidationError)
        return None, tuple(sigs)
    if kind == "constant":
        return None, tuple(MatrixSignal.constant(rd.array(rd.get(body, name, "system.constant"),
                                                          f"system.constant.{name}", 2))
                           for name in ("A", "B"))
    rd.fail("system", f"unknown system kind {kind!r}")


def parse_problem_text(text: str, source: str = "<problem>", out_dir: str = "out"):
    """Parse a problem document given as text; see :func:`parse_problem`."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    rd = _Reader(text, source)
    if not isinstance(doc, dict):
        raise ParseError(f"{source}: top level must be an object")
    version = rd.get(doc, "schema_version", "")
    if version != SCHEMA_VERSION:
        rd.fail("schema_version", f"unsupported version {version!r} (expected {SCHEMA_VERSION})")

    builtin, sig = _signals(rd, rd.get(doc, "system", ""))
    base = sig if builtin else None
    A, B = (base.A, base.B) if base else sig

    def ell(key):
        if key in doc:
            return rd.ellipsoid(doc[key], key)
        if base is None:
            rd.fail(key, "missing (required for non-builtin systems)", ValidationError)
        return getattr(base, key)

    inp, term = ell("input"), ell("terminal")
    if "horizon" in doc:
        hz = doc["horizon"]
        t0 = rd.number(rd.get(hz, "t0", "horizon"), "horizon.t0")
        T = rd.number(rd.get(hz, "T", "horizon"), "horizon.T")
    elif base is not None:
        t0, T = base.t0, base.T
    else:
        rd.fail("horizon", "missing (required for non-builtin systems)", ValidationError)
    direction = doc.get("direction", "backward")
    if direction not in ("backward", "forward"):
        rd.fail("direction", f"expected 'backward' or 'forward', got {direction!r}", ValidationError)
    try:
        prob = ReachProblem(A=A, B=B, input=inp, terminal=term, t0=t0, T=T, direction=direction)
    except EllReachError as exc:
        raise ValidationError(f"{source}: {exc}") from None
    if direction == "forward":
        prob = time_reverse(prob)

    run = rd.get(doc, "run", "", required=False, default={})
    if not isinstance(run, dict):
        rd.fail("run", "expected an object")
    mode = run.get("mode", "under")
    if mode not in MODES:
        rd.fail("run.mode", f"expected one of {', '.join(MODES)}, got {mode!r}", ValidationError)
    kw = {}
    for key in ("dt", "q_min", "kappa_min", "phase"):
        if key in run:
            kw[key] = rd.number(run[key], f"run.{key}", positive=key != "phase")
    for key in ("n_q", "workers"):
        if key in run:
            kw[key] = rd.integer(run[key], f"run.{key}")
    if "t_eval" in run:
        te = run["t_eval"]
        if not isinstance(te, list):
            rd.fail("run.t_eval", "expected a list of times")
        kw["t_eval"] = tuple(rd.number(t, "run.t_eval") for t in te)
        for t in kw["t_eval"]:
            if t < t0 - 1e-12 or t > T + 1e-12:
                rd.fail("run.t_eval", f"time {t} outside the horizon", ValidationError)
    try:
        rcfg = RunConfig(**kw)
    except EllReachError as exc:
        raise ValidationError(f"{source}: {exc}") from None

    grid = run.get("grid", {})
    box = grid.get("box", DEFAULT_BOXES.get(builtin)) if isinstance(grid, dict) else None
    if box is not None:
        try:
            box = tuple(tuple(float(v) for v in row) for row in oracle._box(box))
        except (EllReachError, TypeError, ValueError) as exc:
            rd.fail("run.grid.box", str(exc), ValidationError)
    cfg = CommandConfig(
        run=rcfg,
        mode=mode,
        direction=direction,
        box=box,
        resolution=rd.integer(grid.get("resolution", 251), "run.grid.resolution"),
        cfl=rd.number(grid.get("cfl", 0.5), "run.grid.cfl", positive=True),
        n_dirs=rd.integer(run.get("n_dirs", 512), "run.n_dirs"),
        n_q_over=rd.integer(run["n_q_over"], "run.n_q_over") if "n_q_over" in run else None,
        out_dir=out_dir,
    )
    return prob, cfg


def parse_problem(path: str, out_dir: str = "out"):
    """Read and validate a problem file.

    Forward problems are returned already time-reversed, so the result is
    always a backward problem.

    Returns:
        ``(ReachProblem, CommandConfig)``.

    Raises:
        IoError: if the file cannot be read.
        ParseError: malformed JSON or a field of the wrong type (the message
            carries the line and field path).
        ValidationError: inconsistent content such as dimension mismatches,
            ``t0 >= T`` or shape matrices that are not positive definite.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from None
    return parse_problem_text(text, source=str(path), out_dir=out_dir)


def _signal_doc(A: MatrixSignal, B: MatrixSignal) -> dict:
    if A.kind == "builtin" and B.kind == "builtin":
        name_a, name_b = A.name.rsplit(".", 1)[0], B.name.rsplit(".", 1)[0]
        if name_a != name_b:
            raise ValidationError("A and B come from different builtin systems")
        return {"builtin": name_a}
    if A.kind == "sampled" and B.kind == "sampled" and np.array_equal(A.times, B.times):
        return {"samples": {"times": A.times.tolist(), "A": A.values.tolist(), "B": B.values.tolist()}}
    if A.kind == "constant" and B.kind == "constant":
        return {"constant": {"A": A.values.tolist(), "B": B.values.tolist()}}
    raise ValidationError(f"signals of kind {A.kind}/{B.kind} cannot be written to a problem file")


def serialize_problem(prob: ReachProblem, cfg: CommandConfig) -> dict:
    """Problem document that :func:`parse_problem_text` maps back to ``(prob, cfg)``."""
    direction = "backward"
    if prob.A.is_reversed or prob.B.is_reversed:
        prob = time_reverse(prob)
        direction = "forward"
    if prob.A.is_reversed or prob.B.is_reversed:
        raise ValidationError("signals carry a time map that is not a single reversal")
    rc = cfg.run
    run = {"mode": cfg.mode, "n_q": rc.n_q, "dt": rc.dt, "q_min": rc.q_min,
           "kappa_min": rc.kappa_min, "t_eval": list(rc.t_eval), "phase": rc.phase,
           "grid": {"resolution": cfg.resolution, "cfl": cfg.cfl}, "n_dirs": cfg.n_dirs}
    if rc.workers is not None:
        run["workers"] = rc.workers
    if cfg.n_q_over is not None:
        run["n_q_over"] = cfg.n_q_over
    if cfg.box is not None:
        run["grid"]["box"] = [list(r) for r in cfg.box]
    return {
        "schema_version": SCHEMA_VERSION,
        "system": _signal_doc(prob.A, prob.B),
        "input": {"center": prob.input.q.tolist(), "shape": prob.input.Q.tolist()},
        "terminal": {"center": prob.terminal.q.tolist(), "shape": prob.terminal.Q.tolist()},
        "horizon": {"t0": prob.t0, "T": prob.T},
        "direction": direction,
        "run": run,
    }


# --------------------------------------------------------------------------
# areas


def _member_box(members: Sequence[Ellipsoid], kind: str) -> np.ndarray:
    lo = np.array([m.q - np.sqrt(np.diag(m.Q)) for m in members])
    hi = np.array([m.q + np.sqrt(np.diag(m.Q)) for m in members])
    if kind == "union":
        return np.stack([lo.min(axis=0), hi.max(axis=0)], axis=1)
    return np.stack([lo.max(axis=0), hi.min(axis=0)], axis=1)


def snapshot_area(snap: EllipsoidFamilySnapshot, resolution: int = AREA_RESOLUTION) -> Optional[float]:
    """Length (1-D) or area (2-D) of a union or intersection; None otherwise."""
    box = _member_box(snap.members, snap.kind)
    if snap.dim == 1:
        ivs = sorted((float(b[0]), float(b[1])) for b in
                     (_member_box([m], "union")[0] for m in snap.members))
        if snap.kind == "intersection":
            return max(0.0, float(box[0, 1] - box[0, 0]))
        total, (cur_lo, cur_hi) = 0.0, ivs[0]
        for lo, hi in ivs[1:]:
            if lo > cur_hi:
                total += cur_hi - cur_lo
                cur_lo, cur_hi = lo, hi
            else:
                cur_hi = max(cur_hi, hi)
        return total + cur_hi - cur_lo
    if snap.dim != 2:
        return None
    if np.any(box[:, 1] <= box[:, 0]):
        return 0.0
    return oracle.family_area(snap, box, resolution)


# --------------------------------------------------------------------------
# output


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_family_csv(family: ApproxFamily, path: str, times: Optional[Sequence[float]] = None) -> str:
    """One row per (time, member): ``t,i,q1..qn,Q11..Qnn,xstar1..xstarn``."""
    n = family.problem.n
    header = (["t", "i"] + [f"q{j + 1}" for j in range(n)]
              + [f"Q{a + 1}{b + 1}" for a in range(n) for b in range(n)]
              + [f"xstar{j + 1}" for j in range(n)])
    times = sorted(family.output_times() if times is None else times)
    lines = [",".join(header)]
    for t in times:
        for i, s in enumerate(family.states_at(t)):
            vals = [t, i] + list(s.q) + list(np.asarray(s.Q).reshape(-1)) + list(s.x_star)
            lines.append(",".join([_fmt(vals[0]), str(i)] + [_fmt(v) for v in vals[2:]]))
    return _write(path, "\n".join(lines) + "\n")


def write_boundary_csv(polygons: dict, path: str) -> str:
    """Reference boundary vertices: ``t,k,x1,x2``."""
    lines = ["t,k,x1,x2"]
    for t in sorted(polygons):
        for k, v in enumerate(polygons[t].vertices):
            lines.append(",".join([_fmt(t), str(k), _fmt(v[0]), _fmt(v[1])]))
    return _write(path, "\n".join(lines) + "\n")


def _write(path: str, text: str) -> str:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from None
    return path


def ellipse_polyline(E: Ellipsoid, segments: int = SVG_SEGMENTS) -> np.ndarray:
    """Closed polyline (``segments + 1`` points) along the boundary of a planar ellipse."""
    pts = boundary_points(E, segments)
    return np.vstack([pts, pts[:1]])


def _sorted_loop(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    order = np.argsort(np.arctan2(pts[:, 1] - c[1], pts[:, 0] - c[0]), kind="stable")
    pts = pts[order]
    return np.vstack([pts, pts[:1]])


def envelope_points(snap: EllipsoidFamilySnapshot, n_samples: int = 1024) -> np.ndarray:
    """Boundary of a union or intersection of planar ellipses as a closed loop."""
    if snap.kind == "union":
        pts = oracle.union_boundary_points(snap, n_samples)
    else:
        per = max(64, n_samples // len(snap.members))
        pts = np.concatenate([boundary_points(E, per) for E in snap.members])
        pts = pts[snap.reduce(pts, "max") <= 1e-9]
    if len(pts) < 3:
        return pts
    return _sorted_loop(pts)


class _Canvas:
    def __init__(self, box):
        box = np.asarray(box, dtype=float)
        self.lo = box[:, 0]
        span = box[:, 1] - box[:, 0]
        self.scale = SVG_SIZE / float(span.max())
        self.width, self.height = span * self.scale
        self.top = box[1, 1]
        self.items = []

    def xy(self, pts) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.stack([(pts[:, 0] - self.lo[0]) * self.scale,
                         (self.top - pts[:, 1]) * self.scale], axis=1)

    def polyline(self, pts, style: str):
        p = self.xy(pts)
        coords = " ".join(f"{x:.4f},{y:.4f}" for x, y in p)
        self.items.append(f'<polyline points="{coords}" fill="none" {style}/>')

    def marker(self, pt, style: str):
        x, y = self.xy(pt)[0]
        self.items.append(f'<circle cx="{x:.4f}" cy="{y:.4f}" r="3" {style}/>')

    def render(self) -> str:
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {self.width:.4f} {self.height:.4f}" '
                f'width="{self.width:.0f}" height="{self.height:.0f}">')
        return "\n".join([head, '<rect width="100%" height="100%" fill="white"/>'] + self.items + ["</svg>"]) + "\n"


def write_svg(path: str, box, snapshot: Optional[EllipsoidFamilySnapshot] = None,
              x_stars: Sequence = (), reference=None) -> str:
    """Overlay of family members, their envelope, x* markers and a reference boundary.

    Args:
        box: plotted region ``[[x_lo, x_hi], [y_lo, y_hi]]``; fixes the viewBox.
        snapshot: planar family snapshot (members drawn grey dotted, envelope solid).
        x_stars: marker positions.
        reference: Polygon drawn black dotted.
    """
    cv = _Canvas(box)
    if snapshot is not None:
        for E in snapshot.members:
            cv.polyline(ellipse_polyline(E), 'stroke="#999999" stroke-width="1" stroke-dasharray="2,3"')
        env = envelope_points(snapshot)
        if len(env) >= 3:
            cv.polyline(env, 'stroke="#1f4e9c" stroke-width="2"')
    if reference is not None:
        v = reference.vertices
        cv.polyline(np.vstack([v, v[:1]]), 'stroke="black" stroke-width="1.5" stroke-dasharray="1,3"')
    for x in x_stars:
        cv.marker(x, 'fill="#c0392b" stroke="none"')
    return _write(path, cv.render())


def _plot_box(cfg: CommandConfig, snaps, polygons) -> np.ndarray:
    if cfg.box is not None:
        return np.array(cfg.box, dtype=float)
    boxes = [_member_box(s.members, "union") for s in snaps]
    boxes += [np.stack([p.vertices.min(axis=0), p.vertices.max(axis=0)], axis=1) for p in polygons]
    lo = np.min([b[:, 0] for b in boxes], axis=0)
    hi = np.max([b[:, 1] for b in boxes], axis=0)
    pad = 0.05 * (hi - lo).max()
    return np.stack([lo - pad, hi + pad], axis=1)


def emit_outputs(cfg: CommandConfig, families: dict, polygons: Optional[dict] = None,
                 report_times: Sequence[float] = ()) -> list:
    """Write the artifacts of a run into ``cfg.out_dir``.

    ``families`` maps ``under``/``over`` to :class:`ApproxFamily` results and
    ``polygons`` maps times to reference polygons. A single family is written
    to ``family.csv``/``plot.svg``; two families get ``_under``/``_over``
    suffixes. Plots are drawn at the earliest report time for planar
    problems.
    """
    try:
        os.makedirs(cfg.out_dir, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {cfg.out_dir}: {exc}") from None
    paths = []
    polygons = polygons or {}
    if polygons:
        paths.append(write_boundary_csv(polygons, os.path.join(cfg.out_dir, "boundary.csv")))
    t_plot = min(report_times) if report_times else None
    ref = polygons.get(t_plot) if t_plot is not None else None
    for name, fam in families.items():
        suffix = "" if len(families) == 1 else f"_{name}"
        paths.append(write_family_csv(fam, os.path.join(cfg.out_dir, f"family{suffix}.csv")))
        if fam.problem.n == 2 and t_plot is not None:
            snap = fam.snapshot(t_plot)
            box = _plot_box(cfg, [snap], [ref] if ref is not None else [])
            stars = [s.x_star for s in fam.states_at(t_plot)]
            paths.append(write_svg(os.path.join(cfg.out_dir, f"plot{suffix}.svg"), box, snap, stars, ref))
    if not families and ref is not None:
        box = _plot_box(cfg, [], [ref])
        paths.append(write_svg(os.path.join(cfg.out_dir, "plot.svg"), box, reference=ref))
    return paths


# --------------------------------------------------------------------------
# orchestration


def _grid_polygon(sol: oracle.GridSolution, t: float) -> Optional[oracle.Polygon]:
    pts = sol.zero_crossings(t)
    if len(pts) < 3:
        return None
    return oracle.Polygon(_sorted_loop(pts)[:-1])


def run_command(prob: ReachProblem, cfg: CommandConfig) -> RunReport:
    """Run the requested mode, compute areas and write all artifacts.

    ``compare`` runs the under family, the over family and the polygon
    oracle and reports the family areas relative to the oracle area.

    Raises:
        ShapeDegenerate: a family member lost positive definiteness (the
            message names the member and time).
        ValidationError, IoError: as raised by the modules involved.
    """
    mode = cfg.mode
    times = sorted(cfg.run.t_eval) if cfg.run.t_eval else [prob.t0]
    run = cfg.run
    report = RunReport(mode=mode, direction=cfg.direction, times=times)
    families: dict = {}
    polygons: dict = {}

    wanted = {"under": ("under",), "over": ("over",), "oracle-pmp": ("oracle-pmp",),
              "oracle-grid": ("oracle-grid",), "compare": ("under", "over", "oracle-pmp")}[mode]
    for what in wanted:
        tic = time.perf_counter()
        if what in ("under", "over"):
            if what == "under":
                fam = run_under(prob, run)
            else:
                fam = run_over(prob, replace(run, n_q=cfg.n_q_over or run.n_q))
            report.timings[what] = time.perf_counter() - tic
            families[what] = fam
            report.guard_counts[what] = fam.guard_counts()
            report.max_tightness[what] = fam.max_tightness()
            tic = time.perf_counter()
            report.areas[what] = {t: snapshot_area(fam.snapshot(t)) for t in times}
            report.timings[f"{what}-area"] = time.perf_counter() - tic
        elif what == "oracle-pmp":
            if prob.n == 1:
                states = oracle.pmp_boundary_states(prob, times, n_dirs=2, dt=run.dt)
                report.areas[what] = {t: float(X.max() - X.min()) for t, X in states.items()}
            elif prob.n == 2:
                polygons = oracle.pmp_boundary_polygons(prob, times, n_dirs=cfg.n_dirs, dt=run.dt)
                report.areas[what] = {t: oracle.polygon_area(p) for t, p in polygons.items()}
            else:
                raise ValidationError(f"the polygon oracle needs n <= 2, got n={prob.n}")
            report.timings[what] = time.perf_counter() - tic
        else:
            if prob.n != 2:
                raise ValidationError(f"the grid oracle needs a planar problem, got n={prob.n}")
            if cfg.box is None:
                raise ValidationError("oracle-grid needs run.grid.box")
            sol = oracle.grid_hjb_solve(prob, cfg.box, cfg.resolution, cfg.cfl, times=times)
            report.areas[what] = {t: oracle.grid_sublevel_area(sol, t) for t in times}
            for t in times:
                poly = _grid_polygon(sol, t)
                if poly is not None:
                    polygons[t] = poly
            report.timings[what] = time.perf_counter() - tic

    ref_key = next((k for k in ("oracle-pmp", "oracle-grid") if k in report.areas), None)
    if ref_key is not None:
        for name, areas in report.areas.items():
            report.percentages[name] = {
                t: (100.0 * a / report.areas[ref_key][t]
                    if a is not None and report.areas[ref_key][t] else None)
                for t, a in areas.items()}

    tic = time.perf_counter()
    report.paths = emit_outputs(cfg, families, polygons, times)
    report_path = os.path.join(cfg.out_dir, "report.json")
    _write(report_path, json.dumps(report.to_dict(), indent=2) + "\n")
    report.paths.append(report_path)
    report.timings["output"] = time.perf_counter() - tic
    return report


def format_report(report: RunReport) -> str:
    """Plain-text table of areas, percentages and timings."""
    lines = [f"mode {report.mode} ({report.direction})",
             f"{'set':<12}{'t':>8}{'area':>12}{'% oracle':>11}{'time [s]':>11}"]
    for name, areas in report.areas.items():
        for t, a in sorted(areas.items()):
            pct = report.percentages.get(name, {}).get(t)
            lines.append(f"{name:<12}{t:>8.3f}{'-' if a is None else format(a, '.4f'):>12}"
                         f"{'-' if pct is None else format(pct, '.2f'):>11}"
                         f"{report.timings.get(name, float('nan')):>11.3f}")
    for name, counts in report.guard_counts.items():
        if counts:
            lines.append(f"{name} guards: " + ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    for p in report.paths:
        lines.append(f"wrote {p}")
    return "\n".join(lines)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ellreach",
                                     description="Ellipsoidal reachable sets of linear time-varying systems")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run a problem file")
    p_run.add_argument("problem", help="path to the JSON problem file")
    p_run.add_argument("--mode", choices=MODES, help="override run.mode of the problem file")
    p_run.add_argument("--out", default="out", help="output directory (default: out)")
    p_run.add_argument("--quiet", action="store_true", help="print nothing on success")
    args = parser.parse_args(argv)

    try:
        prob, cfg = parse_problem(args.problem, out_dir=args.out)
        if args.mode:
            cfg = replace(cfg, mode=args.mode)
        report = run_command(prob, cfg)
    except ShapeDegenerate as exc:
        print(f"ellreach: degenerate: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except IoError as exc:
        print(f"ellreach: io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except EllReachError as exc:
        print(f"ellreach: invalid problem: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    if not args.quiet:
        print(format_report(report))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
