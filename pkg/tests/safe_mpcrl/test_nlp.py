import casadi as cs
import numpy as np
import numpy.testing as npt
import pytest

from safe_mpcrl.nlp import (
    GridTooLargeError,
    NlpSolver,
    NlpSpec,
    SolverConfig,
    SolveStatus,
    active_set,
    brute_force_value,
    kkt_residuals,
    solve,
    value_gradient,
)

NO_CONSTRAINTS = cs.SX.zeros(0, 1)


def _spec(f, z, p, g_ineq=NO_CONSTRAINTS, lbz=-np.inf, ubz=np.inf, g_eq=NO_CONSTRAINTS):
    n = z.numel()
    return NlpSpec(
        z=z,
        p=p,
        f=f,
        g_eq=g_eq,
        g_ineq=g_ineq,
        lbz=np.full(n, lbz, dtype=float),
        ubz=np.full(n, ubz, dtype=float),
        decision_blocks={"u": (slice(0, n), (n,))},
        param_blocks={"theta": (slice(0, p.numel()), (p.numel(),))},
        theta_slice=slice(0, p.numel()),
        name="test_nlp",
    )


def test_bound_active_quadratic():
    """Check min (u - 1)^2 over [-1, 1]."""
    u, p = cs.SX.sym("u"), cs.SX.sym("p")
    spec = _spec((u - p) ** 2, u, p, lbz=-1.0, ubz=1.0)
    sol = solve(spec, [1.0], config=SolverConfig(tol=1e-8, method="ipopt", hessian="exact"))
    assert sol.success
    assert sol.z[0] == pytest.approx(1.0, abs=1e-3)
    assert sol.value == pytest.approx(0.0, abs=1e-6)


def test_constraint_active_quadratic():
    """Check min (u - 2)^2 subject to u <= 1 and its multiplier."""
    u, p = cs.SX.sym("u"), cs.SX.sym("p")
    spec = _spec((u - p) ** 2, u, p, g_ineq=u - 1.0)
    for method in ("ipopt", "sqp"):
        sol = solve(spec, [2.0], config=SolverConfig(tol=1e-8, method=method))
        assert sol.success
        assert sol.status == SolveStatus.SUCCESS
        assert sol.z[0] == pytest.approx(1.0, abs=1e-6)
        assert sol.value == pytest.approx(1.0, abs=1e-6)
        assert sol.lam_ineq[0] == pytest.approx(2.0, abs=1e-5)
        assert sol.kkt["stationarity"] < 1e-5
        assert sol.kkt["primal"] < 1e-6

    assert active_set(spec, [2.0], sol) == {"ineq": [0], "lower": [], "upper": []}


def test_value_gradient():
    """Check the envelope gradient of V(p) = min (u - p)^2 s.t. u <= 0."""
    u, p = cs.SX.sym("u"), cs.SX.sym("p")
    spec = _spec((u - p) ** 2, u, p, g_ineq=u)
    solver = NlpSolver(spec, SolverConfig(tol=1e-9, method="ipopt", hessian="exact"))
    sol = solver.solve([1.0])
    assert sol.z[0] == pytest.approx(0.0, abs=1e-6)
    grad = solver.value_gradient([1.0], sol)
    assert not grad.degenerate
    npt.assert_allclose(grad.grad, [2.0], atol=1e-5)

    # The module-level helper agrees.
    npt.assert_allclose(value_gradient(spec, [1.0], sol).grad, grad.grad)

    # Unconstrained side: V(p) = 0 for p < 0.
    sol = solver.solve([-1.0], z0=[-0.5])
    npt.assert_allclose(solver.value_gradient([-1.0], sol).grad, [0.0], atol=1e-6)


def test_value_gradient_inactive_parameter():
    """Check that a parameter in an inactive constraint has zero gradient."""
    u, p = cs.SX.sym("u"), cs.SX.sym("p")
    spec = _spec(u**2, u, p, g_ineq=u - p)
    solver = NlpSolver(spec, SolverConfig(tol=1e-9, method="ipopt", hessian="exact"))
    sol = solver.solve([1.0])
    assert sol.success
    npt.assert_allclose(solver.value_gradient([1.0], sol).grad, [0.0], atol=1e-6)


def test_equality_constraints():
    """Check a program with an equality constraint and a parametric objective."""
    z, p = cs.SX.sym("z", 2), cs.SX.sym("p", 2)
    f = p[0] * z[0] ** 2 + p[1] * z[1] ** 2
    spec = _spec(f, z, p, g_eq=z[0] + z[1] - 1.0)
    solver = NlpSolver(spec, SolverConfig(tol=1e-9, method="ipopt", hessian="exact"))
    sol = solver.solve([1.0, 1.0])
    assert sol.success
    npt.assert_allclose(sol.z, [0.5, 0.5], atol=1e-6)
    # dV/dp_i = z_i^2 at the optimum.
    npt.assert_allclose(solver.value_gradient([1.0, 1.0], sol).grad, [0.25, 0.25], atol=1e-6)
    assert kkt_residuals(spec, [1.0, 1.0], sol)["primal"] < 1e-8


def test_failure_statuses():
    """Check that bad inputs become statuses instead of exceptions."""
    u, p = cs.SX.sym("u"), cs.SX.sym("p")
    spec = _spec((u - p) ** 2, u, p, lbz=1.0, ubz=-1.0)
    sol = solve(spec, [0.0])
    assert sol.status == SolveStatus.INCONSISTENT_BOUNDS
    assert not sol.success

    spec = _spec((u - p) ** 2, u, p)
    sol = solve(spec, [np.nan])
    assert sol.status == SolveStatus.NAN_IN_CALLBACK

    sol = solve(spec, [0.0], config=SolverConfig(max_iter=1), z0=[100.0])
    assert sol.status in (SolveStatus.SUCCESS, SolveStatus.MAX_ITER)


def test_determinism():
    """Check that identical solves give identical iterates."""
    z, p = cs.SX.sym("z", 2), cs.SX.sym("p")
    spec = _spec((z[0] - p) ** 2 + cs.exp(z[1]) - z[1], z, p, g_ineq=z[0] + z[1] - 0.5)
    first = solve(spec, [2.0])
    second = solve(spec, [2.0])
    npt.assert_array_equal(first.z, second.z)
    assert first.value == second.value


def test_solver_config():
    """Check the solver settings validation."""
    with pytest.raises(ValueError):
        SolverConfig(method="snopt")
    with pytest.raises(ValueError):
        SolverConfig(tol=0.0)
    with pytest.raises(ValueError):
        SolverConfig(hessian="sr1")
    plugin, opts = SolverConfig(method="sqp", hessian="bfgs").casadi_options()
    assert plugin == "sqpmethod"
    assert opts["qpsol"] == "qrqp"

    plugin, opts = SolverConfig(method="ipopt").casadi_options()
    assert plugin == "ipopt"
    assert opts["ipopt.tol"] == pytest.approx(1e-8)


def test_default_solver_is_sqp_bfgs():
    """Check that the default solver is SQP with BFGS and the dense active-set QP."""
    config = SolverConfig()
    assert (config.method, config.hessian) == ("sqp", "bfgs")
    plugin, opts = config.casadi_options()
    assert plugin == "sqpmethod"
    assert opts["qpsol"] == "qrqp"
    assert opts["hessian_approximation"] == "limited-memory"

    # The default solves a small constrained program and recovers its multiplier.
    z, p = cs.SX.sym("z", 2), cs.SX.sym("p")
    spec = _spec(cs.sumsqr(z - p), z, p, g_ineq=z[0] + z[1] - 1.0, lbz=-2.0, ubz=2.0)
    sol = solve(spec, [1.0])
    assert sol.success
    npt.assert_allclose(sol.z, [0.5, 0.5], atol=1e-4)
    assert sol.lam_ineq[0] == pytest.approx(1.0, abs=1e-3)


def test_spec_layout():
    """Check the layout checks and the description."""
    z, p = cs.SX.sym("z", 2), cs.SX.sym("p")
    with pytest.raises(ValueError):
        _spec(z, z, p)
    spec = _spec(cs.sumsqr(z), z, p, g_ineq=z[0] - p, lbz=-1.0, ubz=2.0)
    desc = spec.describe()
    assert desc["n_z"] == 2
    assert desc["n_ineq"] == 1
    assert desc["decision_blocks"]["u"]["upper"] == [2.0, 2.0]
    npt.assert_array_equal(spec.block([1.0, 2.0], "u"), [1.0, 2.0])


def test_brute_force_value():
    """Check the grid oracle against the solver and hand values."""
    u, p = cs.SX.sym("u"), cs.SX.sym("p")
    spec = _spec((u - p) ** 2, u, p, g_ineq=u - 1.0, lbz=-3.0, ubz=3.0)
    grid = brute_force_value(spec, [2.0], points_per_dim=301)
    sol = solve(spec, [2.0], config=SolverConfig(tol=1e-8, method="ipopt", hessian="exact"))
    assert grid.status == "optimal"
    assert abs(grid.value - sol.value) <= grid.step[0] ** 2 + 1e-6

    # No feasible grid point.
    spec = _spec((u - p) ** 2, u, p, g_ineq=u + 5.0, lbz=-3.0, ubz=3.0)
    grid = brute_force_value(spec, [2.0], points_per_dim=11)
    assert grid.status == "infeasible"
    assert grid.z is None

    # A linear objective on a box attains its minimum at a vertex.
    z = cs.SX.sym("z", 2)
    spec = _spec(z[0] + 2.0 * z[1], z, p, lbz=-1.0, ubz=1.0)
    grid = brute_force_value(spec, [0.0], points_per_dim=21)
    assert grid.value == pytest.approx(-3.0)
    npt.assert_allclose(grid.z, [-1.0, -1.0])


def test_brute_force_errors():
    """Check the grid oracle limits."""
    z, p = cs.SX.sym("z", 4), cs.SX.sym("p")
    with pytest.raises(GridTooLargeError):
        brute_force_value(_spec(cs.sumsqr(z), z, p, lbz=-1.0, ubz=1.0), [0.0])
    u = cs.SX.sym("u")
    with pytest.raises(ValueError):
        brute_force_value(_spec(u**2, u, p), [0.0])


def test_random_programs_match_grid():
    """Check the solver against the grid oracle on random small convex programs."""
    rng = np.random.default_rng(11)
    for _ in range(50):
        n = int(rng.integers(1, 4))
        z, p = cs.SX.sym("z", n), cs.SX.sym("p", n)
        weights = rng.uniform(0.5, 3.0, n)
        w = rng.normal(size=n)
        f = cs.dot(cs.DM(weights), (z - p) ** 2)
        spec = _spec(f, z, p, g_ineq=cs.dot(cs.DM(w), z) - rng.uniform(0.2, 1.0), lbz=-2.0, ubz=2.0)
        params = rng.uniform(-3.0, 3.0, n)

        sol = solve(spec, params, config=SolverConfig(tol=1e-10, method="ipopt", hessian="exact"))
        grid = brute_force_value(spec, params, points_per_dim=101 if n < 3 else 41)
        assert sol.success
        assert grid.status == "optimal"
        assert sol.value <= grid.value + np.max(grid.step) ** 2
        residuals = kkt_residuals(spec, params, sol)
        assert residuals["stationarity"] <= 1e-6
        assert residuals["primal"] <= 1e-6
