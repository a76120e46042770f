import warnings

import numpy as np
import pytest

from ellreach import oracle
from ellreach.ellipsoid import Ellipsoid, EllipsoidFamilySnapshot, support_value
from ellreach.errors import (CflViolation, DegeneratePolygon, DimensionUnsupported, TimeNotStored,
                             BoxTooSmall)
from ellreach.ltv import (MatrixSignal, ReachProblem, builtin_parametric_oscillator,
                          builtin_single_integrator)
from ellreach.reach import ApproxFamily, EllipsoidState, RunConfig


def _constant_problem(A, B, P=None, X=None, t0=0.0, T=1.0):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n, m = B.shape
    return ReachProblem(MatrixSignal.constant(A), MatrixSignal.constant(B),
                        Ellipsoid(np.zeros(m), np.eye(m) if P is None else P),
                        Ellipsoid(np.zeros(n), np.eye(n) if X is None else X), t0, T)


def _fake_family(kind, ellipsoids, prob, t=0.0):
    states = [EllipsoidState.build(E.q, E.Q, E.q + E.Q_sqrt @ np.array([1.0, 0.0])) for E in ellipsoids]
    return ApproxFamily(kind, np.array([t]), [states], prob, [[] for _ in states], RunConfig(n_q=len(states)))


# ---- Hamiltonian -------------------------------------------------------------


def test_hamiltonian_examples():
    osc = builtin_parametric_oscillator()
    assert oracle.hamiltonian_ltv(0.3, [1.0, 2.0], [0.0, 0.0], osc) == 0.0
    assert oracle.hamiltonian_ltv(0.0, [1.0, 0.0], [0.0, 1.0], osc) == pytest.approx(7.0)
    assert oracle.hamiltonian_ltv(0.0, [5.0], [2.0], builtin_single_integrator()) == pytest.approx(2.0)


def test_hamiltonian_dominates_feasible_inputs(rng):
    osc = builtin_parametric_oscillator()
    for _ in range(50):
        t = rng.uniform(0, 1.5)
        x, lam = rng.normal(size=2), rng.normal(size=2)
        H = oracle.hamiltonian_ltv(t, x, lam, osc)
        u = rng.uniform(-1, 1, size=(100, 1))
        f = x @ osc.A(t).T + u @ osc.B(t).T
        assert np.all(-(f @ lam) <= H + 1e-10)
        assert H == pytest.approx(-lam @ osc.A(t) @ x + support_value(osc.input, -osc.B(t).T @ lam))


# ---- polygons ------------------------------------------------------------------


def test_polygon_area_examples():
    assert oracle.polygon_area(oracle.Polygon([[0, 0], [1, 0], [1, 1], [0, 1]])) == pytest.approx(1.0)
    assert oracle.polygon_area(oracle.Polygon([[0, 0], [1, 0], [0, 1]])) == pytest.approx(0.5)
    ang = 2 * np.pi * np.arange(512) / 512
    circle = oracle.Polygon(np.stack([np.cos(ang), np.sin(ang)], axis=1))
    assert oracle.polygon_area(circle) == pytest.approx(np.pi, abs=1e-4)
    with pytest.raises(DegeneratePolygon):
        oracle.Polygon([[0, 0], [1, 1]])


def test_polygon_orientation_and_queries():
    square = oracle.Polygon([[0, 0], [0, 1], [1, 1], [1, 0]])  # clockwise input
    assert oracle.polygon_area(square) == pytest.approx(1.0)
    inside = square.contains(np.array([[0.5, 0.5], [1.5, 0.5]]))
    np.testing.assert_array_equal(inside, [True, False])
    np.testing.assert_allclose(square.signed_distance(np.array([[0.5, 0.5], [2.0, 0.5]])), [-0.5, 1.0])
    pts = square.sample_boundary(40)
    np.testing.assert_allclose(square.distance(pts), 0.0, atol=1e-12)


def test_pmp_polygon_at_terminal_time(oscillator):
    poly = oracle.pmp_boundary_polygon(oscillator, oscillator.T, n_dirs=512)
    assert oracle.polygon_area(poly) == pytest.approx(np.pi * 0.01, rel=5e-3)


def test_pmp_polygon_ball_problem():
    prob = _constant_problem(np.zeros((2, 2)), np.eye(2), T=1.0)
    poly = oracle.pmp_boundary_polygon(prob, 0.0, n_dirs=512)
    assert oracle.polygon_area(poly) == pytest.approx(4 * np.pi, rel=1e-2)
    np.testing.assert_allclose(np.linalg.norm(poly.vertices, axis=1), 2.0, atol=1e-9)


def test_pmp_polygon_is_convex(pmp_polygons):
    v = pmp_polygons[0.0].vertices
    e = np.roll(v, -1, axis=0) - v
    cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
    assert np.all(cross >= -1e-9)


def test_pmp_polygon_needs_planar_problem():
    with pytest.raises(DimensionUnsupported):
        oracle.pmp_boundary_polygon(builtin_single_integrator(), 0.0)


def test_pmp_states_single_integrator():
    states = oracle.pmp_boundary_states(builtin_single_integrator(0.1, 1.0), [0.0], n_dirs=2)
    np.testing.assert_allclose(np.sort(states[0.0][:, 0]), [-1.1, 1.1], atol=1e-12)


# ---- family area -----------------------------------------------------------------


def test_family_area_examples():
    box = [[-2.0, 2.0], [-2.0, 2.0]]
    disk = Ellipsoid([0.0, 0.0], np.eye(2))
    single = EllipsoidFamilySnapshot([disk], "union")
    assert oracle.family_area(single, box, 801) == pytest.approx(np.pi, rel=5e-3)
    two = EllipsoidFamilySnapshot([Ellipsoid([-2.5, 0.0], np.eye(2)), Ellipsoid([2.5, 0.0], np.eye(2))], "union")
    assert oracle.family_area(two, [[-4.0, 4.0], [-2.0, 2.0]], 801) == pytest.approx(2 * np.pi, rel=5e-3)
    same = EllipsoidFamilySnapshot([disk, Ellipsoid([0.0, 0.0], np.eye(2))], "intersection")
    assert oracle.family_area(same, box, 801) == pytest.approx(np.pi, rel=5e-3)


# ---- grid solver -------------------------------------------------------------------


def test_grid_zero_dynamics_keeps_terminal_data():
    prob = _constant_problem(np.zeros((2, 2)), np.zeros((2, 1)), X=0.25 * np.eye(2))
    sol = oracle.grid_hjb_solve(prob, [[-1, 1], [-1, 1]], resolution=41, times=[0.5])
    for t in sol.times:
        np.testing.assert_allclose(sol.at(t), sol.at(prob.T), atol=1e-12)


def test_grid_terminal_slice_is_exact(grid_solution, oscillator):
    X1, X2 = np.meshgrid(*grid_solution.axes, indexing="ij")
    g = (X1 ** 2 + X2 ** 2) / 0.01 - 1.0
    np.testing.assert_allclose(grid_solution.at(oscillator.T), g, rtol=1e-13, atol=1e-12)


def test_grid_integrator_product_system():
    r, T = 0.1, 1.0
    prob = _constant_problem(np.zeros((2, 2)), [[1.0], [0.0]], X=np.diag([r * r, 1.0]), T=T)
    sol = oracle.grid_hjb_solve(prob, [[-2, 2], [-2, 2]], resolution=201, times=[0.0, 0.5])
    dx = float(sol.spacing.max())
    for t in (0.0, 0.5):
        x = sol.axes[0]
        row = sol.at(t)[:, len(sol.axes[1]) // 2]
        inside = x[row <= 0]
        half_width = 0.5 * (inside.max() - inside.min())
        assert abs(half_width - (r + T - t)) <= 2 * dx


def test_grid_scheme_is_monotone():
    osc = builtin_parametric_oscillator()
    small = ReachProblem(osc.A, osc.B, osc.input, Ellipsoid([0.0, 0.0], 0.01 * np.eye(2)), 0.0, 1.5)
    large = ReachProblem(osc.A, osc.B, osc.input, Ellipsoid([0.0, 0.0], 0.04 * np.eye(2)), 0.0, 1.5)
    box = [[-2, 2], [-2, 2]]
    for transform in (True, False):
        lo = oracle.grid_hjb_solve(large, box, 61, times=[0.5, 1.0], transform=transform)
        hi = oracle.grid_hjb_solve(small, box, 61, times=[0.5, 1.0], transform=transform)
        # ordered terminal data must stay ordered
        assert np.all(lo.at(1.5) <= hi.at(1.5))
        for t in lo.times:
            assert np.all(lo.at(t) <= hi.at(t) + 1e-9)


def test_grid_compiled_kernel_matches_numpy():
    osc = builtin_parametric_oscillator()
    box = [[-2, 2], [-2, 2]]
    for dissipation in ("local", "global"):
        a = oracle.grid_hjb_solve(osc, box, 51, times=[1.0], dissipation=dissipation, compiled=True)
        b = oracle.grid_hjb_solve(osc, box, 51, times=[1.0], dissipation=dissipation, compiled=False)
        np.testing.assert_allclose(a.at(0.0), b.at(0.0), rtol=1e-11, atol=1e-11)


def test_grid_errors_and_warnings(oscillator):
    with pytest.raises(CflViolation):
        oracle.grid_hjb_solve(oscillator, [[-2, 2], [-2, 2]], 21, cfl=1.5)
    with pytest.raises(CflViolation):
        oracle.grid_hjb_solve(oscillator, [[-2, 2], [-2, 2]], 21, cfl=0.0)
    with pytest.raises(DimensionUnsupported):
        oracle.grid_hjb_solve(builtin_single_integrator(), [[-2, 2], [-2, 2]], 21)
    with pytest.warns(BoxTooSmall):
        sol = oracle.grid_hjb_solve(oscillator, [[-0.5, 0.5], [-0.5, 0.5]], 31)
    assert sol.info["box_too_small"]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        sol = oracle.grid_hjb_solve(oscillator, [[-2, 2], [-2, 2]], 31, times=[1.0])
    with pytest.raises(TimeNotStored):
        sol.at(0.25)


def test_grid_sublevel_area_examples(grid_solution, oscillator):
    assert oracle.grid_sublevel_area(grid_solution, oscillator.T) == pytest.approx(np.pi * 0.01, rel=2e-2)
    axes = grid_solution.axes
    pos = oracle.GridSolution(grid_solution.box, 251, [0.0], [np.ones((251, 251))], axes, {})
    neg = oracle.GridSolution(grid_solution.box, 251, [0.0], [-np.ones((251, 251))], axes, {})
    assert oracle.grid_sublevel_area(pos, 0.0) == 0.0
    assert oracle.grid_sublevel_area(neg, 0.0) == pytest.approx(16.0)


def test_grid_interpolation_and_gradient(grid_solution, oscillator):
    pts = np.array([[0.05, 0.0], [0.0, -0.03]])
    v = grid_solution.interpolate(oscillator.T, pts)
    np.testing.assert_allclose(v, (pts ** 2).sum(axis=1) / 0.01 - 1.0, atol=5e-3)
    g = grid_solution.gradient(oscillator.T, np.array([[0.5, 0.0]]))
    np.testing.assert_allclose(g[0], [100.0, 0.0], rtol=2e-2, atol=1.0)


# ---- containment -----------------------------------------------------------------


def _ellipse_polygon(E, n=2048):
    ang = 2 * np.pi * np.arange(n) / n
    return oracle.Polygon(np.stack([np.cos(ang), np.sin(ang)], axis=1) @ E.Q_sqrt.T + E.q)


def test_containment_family_equal_to_reference():
    prob = builtin_parametric_oscillator()
    E = Ellipsoid([0.2, -0.1], np.array([[0.5, 0.1], [0.1, 0.2]]))
    fam = _fake_family("under", [E], prob)
    rep = oracle.containment_report(fam, _ellipse_polygon(E), 0.0)
    assert rep.fraction == 1.0
    over = _fake_family("over", [E], prob)
    assert oracle.containment_report(over, _ellipse_polygon(E), 0.0).fraction == 1.0


def test_containment_dilated_reference():
    prob = builtin_parametric_oscillator()
    E = Ellipsoid([0.0, 0.0], np.diag([0.4, 0.1]))
    fam = _fake_family("under", [E, Ellipsoid([0.3, 0.0], np.diag([0.1, 0.1]))], prob)
    rep = oracle.containment_report(fam, _ellipse_polygon(Ellipsoid([0.0, 0.0], np.diag([1.0, 0.6]))), 0.0)
    assert rep.n_checked == 1024
    assert rep.fraction == 1.0


def test_containment_flags_inflated_family():
    prob = builtin_parametric_oscillator()
    fam = _fake_family("under", [Ellipsoid([0.0, 0.0], np.eye(2))], prob)
    rep = oracle.containment_report(fam, _ellipse_polygon(Ellipsoid([0.0, 0.0], 0.8 * np.eye(2))), 0.0)
    assert rep.fraction < 1.0
    over = _fake_family("over", [Ellipsoid([0.0, 0.0], 0.5 * np.eye(2))], prob)
    rep = oracle.containment_report(over, _ellipse_polygon(Ellipsoid([0.0, 0.0], np.eye(2))), 0.0)
    assert rep.fraction < 1.0


def test_containment_against_grid(under_family, over_family, grid_solution):
    # the over family contains the grid zero level everywhere; the under
    # family is checked against the grid in the acceptance suite
    rep = oracle.containment_report(over_family, grid_solution, 0.5)
    assert rep.reference == "grid" and rep.fraction == 1.0


def test_containment_needs_planar_family():
    integ = builtin_single_integrator()
    fam = ApproxFamily("under", np.array([0.0]), [[EllipsoidState.build([0.0], [[1.0]], [1.0])]], integ,
                       [[]], RunConfig(n_q=1))
    poly = oracle.Polygon([[0, 0], [1, 0], [0, 1]])
    with pytest.raises(DimensionUnsupported):
        oracle.containment_report(fam, poly, 0.0)


@pytest.mark.parametrize("t", [0.0, 0.5, 1.0])
def test_under_family_inside_boundary_polygon(under_family, pmp_polygons_1024, t):
    rep = oracle.containment_report(under_family, pmp_polygons_1024[t], t)
    assert rep.reference == "polygon" and rep.n_checked == 1024
    assert rep.fraction == 1.0
