"""Dense parametric nonlinear programs, their solution and the optimal-value gradient.

An :class:`NlpSpec` holds casadi ``SX`` expressions for

    min_z  f(z, p)   s.t.  g_eq(z, p) = 0,  g_ineq(z, p) <= 0,  lbz <= z <= ubz

with named blocks over ``z`` and ``p``. Solving goes through casadi's ``nlpsol``: ``sqpmethod``
with a BFGS Hessian and the dense ``qrqp`` QP solver by default, ``ipopt`` on request. The
parametric sensitivity of the optimal value is the gradient of the Lagrangian with the primal-dual
solution held fixed.
"""

from dataclasses import dataclass, field
from enum import Enum
import logging

import casadi as cs
import numpy as np

from safe_mpcrl.bundle_utils import NdjsonWriter

logger = logging.getLogger(__name__)


class GridTooLargeError(ValueError):
    """Raised when the brute-force oracle is asked for more than three decision variables."""


class SolveStatus(Enum):
    """The outcome of one NLP solve."""

    SUCCESS = "success"
    MAX_ITER = "max_iter"
    NAN_IN_CALLBACK = "nan_in_callback"
    INCONSISTENT_BOUNDS = "inconsistent_bounds"
    INFEASIBLE = "infeasible"
    FAILED = "failed"


def _column(values, size=None):
    """Convert to a float numpy vector (casadi DM allowed)."""
    if isinstance(values, cs.DM):
        values = values.full()
    vec = np.asarray(values, dtype=float).reshape(-1)
    if size is not None and vec.shape[0] != size:
        raise ValueError(f"Expected a vector of size {size}, got {vec.shape[0]}.")
    return vec


@dataclass
class NlpSpec:
    """A parametric NLP in casadi symbols.

    Attributes
    ----------
    z : casadi.SX
        The decision vector (column).
    p : casadi.SX
        The parameter vector (column).
    f : casadi.SX
        The scalar objective.
    g_eq : casadi.SX
        The equality constraints ``g_eq = 0``.
    g_ineq : casadi.SX
        The inequality constraints ``g_ineq <= 0``.
    lbz, ubz : numpy.ndarray
        The box bounds on ``z`` (may be infinite).
    decision_blocks : dict
        Maps block names to ``(slice, shape)`` in ``z``; values are stored row-major.
    param_blocks : dict
        Maps block names to ``(slice, shape)`` in ``p``.
    theta_slice : slice
        The learnable slots of ``p``.
    constraint_groups : dict
        Maps group names to ``(kind, slice)`` with kind ``"eq"`` or ``"ineq"``.
    name : str
        A label used in logs and dumps.
    """

    z: cs.SX
    p: cs.SX
    f: cs.SX
    g_eq: cs.SX
    g_ineq: cs.SX
    lbz: np.ndarray
    ubz: np.ndarray
    decision_blocks: dict = field(default_factory=dict)
    param_blocks: dict = field(default_factory=dict)
    theta_slice: slice = slice(0, 0)
    constraint_groups: dict = field(default_factory=dict)
    name: str = "nlp"

    def __post_init__(self):
        self.lbz = _column(self.lbz, self.n_z)
        self.ubz = _column(self.ubz, self.n_z)
        if self.f.numel() != 1:
            raise ValueError(f"The objective must be scalar, got {self.f.shape}.")
        for name, (sl, shape) in self.decision_blocks.items():
            if sl.stop - sl.start != int(np.prod(shape)) or sl.stop > self.n_z:
                raise ValueError(f"Decision block {name} {shape} does not fit slice {sl}.")
        if self.theta_slice.stop > self.n_p:
            raise ValueError(f"The theta slots {self.theta_slice} exceed the {self.n_p} parameters.")

    @property
    def n_z(self):
        """The number of decision variables."""
        return self.z.numel()

    @property
    def n_p(self):
        """The number of parameters."""
        return self.p.numel()

    @property
    def n_eq(self):
        """The number of equality constraints."""
        return self.g_eq.numel()

    @property
    def n_ineq(self):
        """The number of inequality constraints."""
        return self.g_ineq.numel()

    @property
    def n_theta(self):
        """The number of learnable parameter slots."""
        return self.theta_slice.stop - self.theta_slice.start

    def block(self, z_value, name):
        """Extract a named decision block from a numeric ``z``."""
        sl, shape = self.decision_blocks[name]
        return _column(z_value)[sl].reshape(shape)

    def param_block(self, p_value, name):
        """Extract a named parameter block from a numeric ``p``."""
        sl, shape = self.param_blocks[name]
        return _column(p_value)[sl].reshape(shape)

    def describe(self):
        """A JSON-ready summary of the program layout and bounds."""

        def _bound(value):
            return None if not np.isfinite(value) else float(value)

        blocks = {}
        for name, (sl, shape) in self.decision_blocks.items():
            blocks[name] = {
                "shape": list(shape),
                "lower": [_bound(v) for v in self.lbz[sl]],
                "upper": [_bound(v) for v in self.ubz[sl]],
            }
        return {
            "name": self.name,
            "n_z": self.n_z,
            "n_p": self.n_p,
            "n_eq": self.n_eq,
            "n_ineq": self.n_ineq,
            "decision_blocks": blocks,
            "param_blocks": {name: list(shape) for name, (_, shape) in self.param_blocks.items()},
            "constraints": {
                name: {"kind": kind, "rows": [sl.start, sl.stop]}
                for name, (kind, sl) in self.constraint_groups.items()
            },
        }


@dataclass
class NlpSolution:
    """The primal-dual result of one solve.

    Attributes
    ----------
    z : numpy.ndarray
        The primal solution (or best iterate on failure).
    lam_eq : numpy.ndarray
        The equality multipliers.
    lam_ineq : numpy.ndarray
        The inequality multipliers (non-negative).
    lam_x : numpy.ndarray
        The bound multipliers (positive for active upper bounds, negative for lower).
    value : float
        The objective at ``z``.
    status : SolveStatus
        The solve outcome.
    iterations : int
        The number of solver iterations.
    kkt : dict
        The KKT residuals at ``z`` (see ``kkt_residuals``).
    message : str
        The raw solver return status.
    """

    z: np.ndarray
    lam_eq: np.ndarray
    lam_ineq: np.ndarray
    lam_x: np.ndarray
    value: float
    status: SolveStatus
    iterations: int = 0
    kkt: dict = field(default_factory=dict)
    message: str = ""

    @property
    def success(self):
        """Whether the solve reached a KKT point."""
        return self.status == SolveStatus.SUCCESS

    @property
    def lam_g(self):
        """The stacked constraint multipliers ``[lam_eq; lam_ineq]``."""
        return np.concatenate([self.lam_eq, self.lam_ineq])


@dataclass
class SolverConfig:
    """Settings of the NLP solver.

    Attributes
    ----------
    tol : float
        The KKT tolerance on stationarity, feasibility and complementarity.
    max_iter : int
        The iteration limit.
    method : str
        ``"sqp"`` (SQP with the dense active-set QP ``qrqp``) or ``"ipopt"`` (interior point).
    hessian : str
        ``"bfgs"`` (limited-memory quasi-Newton) or ``"exact"``.
    regularization : float
        The Hessian regularization floor.
    warm_start : bool
        Whether consecutive solves start from the previous solution.
    active_tol : float
        The threshold for treating constraints as active and multipliers as zero.
    iteration_log : str or None
        If given, one JSON record per solver iteration is appended to this file.
    """

    tol: float = 1e-6
    max_iter: int = 200
    method: str = "sqp"
    hessian: str = "bfgs"
    regularization: float = 1e-9
    warm_start: bool = True
    active_tol: float = 1e-6
    iteration_log: str | None = None

    def __post_init__(self):
        if not self.tol > 0.0:
            raise ValueError(f"The solver tolerance must be positive, got {self.tol}.")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be at least 1, got {self.max_iter}.")
        if self.method not in ("ipopt", "sqp"):
            raise ValueError(f"Unknown solver method {self.method}.")
        if self.hessian not in ("exact", "bfgs"):
            raise ValueError(f"Unknown Hessian mode {self.hessian}.")

    def casadi_options(self):
        """The ``nlpsol`` plugin name and options."""
        if self.method == "ipopt":
            opts = {
                "print_time": False,
                "error_on_fail": False,
                "ipopt.print_level": 0,
                "ipopt.sb": "yes",
                "ipopt.max_iter": self.max_iter,
                "ipopt.tol": 1e-2 * self.tol,
                "ipopt.constr_viol_tol": self.tol,
                "ipopt.dual_inf_tol": self.tol,
                "ipopt.compl_inf_tol": self.tol,
                "ipopt.nlp_scaling_method": "none",
                "ipopt.min_hessian_perturbation": self.regularization,
            }
            if self.hessian == "bfgs":
                opts["ipopt.hessian_approximation"] = "limited-memory"
            return "ipopt", opts

        opts = {
            "print_time": False,
            "print_header": False,
            "print_iteration": False,
            "print_status": False,
            "error_on_fail": False,
            "qpsol": "qrqp",
            "qpsol_options": {"print_iter": False, "print_header": False, "error_on_fail": False},
            "max_iter": self.max_iter,
            "tol_pr": self.tol,
            "tol_du": self.tol,
            "hessian_approximation": "limited-memory" if self.hessian == "bfgs" else "exact",
        }
        if self.hessian == "exact":
            opts["convexify_strategy"] = "regularize"
            opts["convexify_margin"] = self.regularization
        return "sqpmethod", opts


def _status_from_stats(stats):
    """Map casadi solver statistics onto a SolveStatus."""
    if stats.get("success", False):
        return SolveStatus.SUCCESS
    message = str(stats.get("return_status", ""))
    unified = str(stats.get("unified_return_status", ""))
    if "Maximum_Iterations" in message or unified == "SOLVER_RET_LIMITED":
        return SolveStatus.MAX_ITER
    if "Invalid_Number" in message or "NaN" in message or unified == "SOLVER_RET_NAN":
        return SolveStatus.NAN_IN_CALLBACK
    if "Infeasible" in message or unified == "SOLVER_RET_INFEASIBLE":
        return SolveStatus.INFEASIBLE
    return SolveStatus.FAILED


def _lagrangian_theta_gradient(spec):
    lam_g = cs.SX.sym("lam_g", spec.n_eq + spec.n_ineq)
    g = cs.vertcat(spec.g_eq, spec.g_ineq)
    lagrangian = spec.f + cs.dot(lam_g, g) if g.numel() > 0 else spec.f
    grad = cs.gradient(lagrangian, spec.p)[spec.theta_slice]
    return cs.Function("lagrangian_theta_gradient", [spec.z, spec.p, lam_g], [grad])


def _evaluator(spec):
    g = cs.vertcat(spec.g_eq, spec.g_ineq)
    return cs.Function(
        "nlp_eval",
        [spec.z, spec.p],
        [spec.f, spec.g_eq, spec.g_ineq, cs.gradient(spec.f, spec.z), cs.jacobian(g, spec.z)],
    )


def kkt_residuals(spec, params, sol, evaluator=None):
    """Unscaled KKT residuals of a primal-dual point.

    Parameters
    ----------
    spec : NlpSpec
        The program.
    params : array_like
        The numeric parameters.
    sol : NlpSolution
        The primal-dual point.
    evaluator : casadi.Function, optional
        A precompiled evaluator (built on demand otherwise).

    Returns
    -------
    dict
        ``stationarity`` (inf-norm of the Lagrangian gradient), ``primal`` (largest
        constraint or bound violation) and ``complementarity`` (largest multiplier-slack product).
    """
    evaluator = _evaluator(spec) if evaluator is None else evaluator
    _, g_eq, g_ineq, grad_f, jac_g = evaluator(sol.z, _column(params, spec.n_p))
    g_eq, g_ineq, grad_f = _column(g_eq), _column(g_ineq), _column(grad_f)
    jac_g = np.asarray(cs.DM(jac_g).full()).reshape(spec.n_eq + spec.n_ineq, spec.n_z)

    lam_g = np.concatenate([sol.lam_eq, sol.lam_ineq])
    stationarity = grad_f + jac_g.T @ lam_g + sol.lam_x

    violations = [0.0]
    if spec.n_eq > 0:
        violations.append(np.max(np.abs(g_eq)))
    if spec.n_ineq > 0:
        violations.append(np.max(np.maximum(g_ineq, 0.0)))
    violations.append(np.max(np.maximum(spec.lbz - sol.z, 0.0), initial=0.0))
    violations.append(np.max(np.maximum(sol.z - spec.ubz, 0.0), initial=0.0))

    products = [0.0]
    if spec.n_ineq > 0:
        products.append(np.max(np.abs(sol.lam_ineq * g_ineq)))
    for i, lam in enumerate(sol.lam_x):
        if lam > 0.0 and np.isfinite(spec.ubz[i]):
            products.append(lam * abs(spec.ubz[i] - sol.z[i]))
        elif lam < 0.0 and np.isfinite(spec.lbz[i]):
            products.append(-lam * abs(sol.z[i] - spec.lbz[i]))

    return {
        "stationarity": float(np.max(np.abs(stationarity), initial=0.0)),
        "primal": float(max(violations)),
        "complementarity": float(max(products)),
    }


def active_set(spec, params, sol, tol=1e-6):
    """The active inequality rows and bounds at a solution.

    Returns
    -------
    dict
        ``ineq``, ``lower`` and ``upper``: sorted lists of active indices.
    """
    g_fn = cs.Function("g_ineq", [spec.z, spec.p], [spec.g_ineq])
    g_ineq = _column(g_fn(sol.z, _column(params, spec.n_p)))
    return {
        "ineq": [int(i) for i in np.flatnonzero(g_ineq >= -tol)],
        "lower": [int(i) for i in np.flatnonzero(np.isfinite(spec.lbz) & (sol.z - spec.lbz <= tol))],
        "upper": [int(i) for i in np.flatnonzero(np.isfinite(spec.ubz) & (spec.ubz - sol.z <= tol))],
    }


@dataclass
class ValueGradient:
    """The gradient of the optimal value with respect to the learnable slots.

    Attributes
    ----------
    grad : numpy.ndarray
        The Lagrangian gradient at the fixed primal-dual solution.
    degenerate : bool
        True when strict complementarity or LICQ fail numerically (low confidence).
    """

    grad: np.ndarray
    degenerate: bool = False


class NlpSolver:
    """A compiled, reusable solver for one NlpSpec.

    Parameters
    ----------
    spec : NlpSpec
        The program.
    config : SolverConfig, optional
        The solver settings.
    """

    def __init__(self, spec, config=None):
        self.spec = spec
        self.config = SolverConfig() if config is None else config

        plugin, opts = self.config.casadi_options()
        nlp = {"x": spec.z, "p": spec.p, "f": spec.f, "g": cs.vertcat(spec.g_eq, spec.g_ineq)}
        self._solver = cs.nlpsol(spec.name, plugin, nlp, opts)
        self._lbg = np.concatenate([np.zeros(spec.n_eq), np.full(spec.n_ineq, -np.inf)])
        self._ubg = np.zeros(spec.n_eq + spec.n_ineq)
        self._lag_grad = _lagrangian_theta_gradient(spec)
        self._evaluator = _evaluator(spec)
        self._log = None if self.config.iteration_log is None else NdjsonWriter(self.config.iteration_log)

        self.num_solves = 0
        self._last = None

    def reset(self):
        """Forget the warm-start memory."""
        self._last = None

    def default_guess(self):
        """Zero clipped into the bounds."""
        return np.clip(np.zeros(self.spec.n_z), self.spec.lbz, self.spec.ubz)

    def solve(self, params, z0=None):
        """Solve the program for numeric parameters.

        Parameters
        ----------
        params : array_like
            The numeric parameter vector.
        z0 : array_like, optional
            The initial guess. Without one, the previous solution is reused when warm
            starting is on, otherwise zero clipped into the bounds.

        Returns
        -------
        NlpSolution
            The solution; failures are reported through ``status``.
        """
        spec = self.spec
        params = _column(params, spec.n_p)
        self.num_solves += 1

        lam_g0 = None
        lam_x0 = None
        if z0 is None:
            if self.config.warm_start and self._last is not None:
                z0 = self._last.z
                lam_g0, lam_x0 = self._last.lam_g, self._last.lam_x
            else:
                z0 = self.default_guess()
        z0 = _column(z0, spec.n_z)

        if np.any(spec.lbz > spec.ubz):
            bad = np.flatnonzero(spec.lbz > spec.ubz).tolist()
            logger.warning(f"{spec.name}: inconsistent bounds on decision entries {bad}.")
            return self._failed(z0, params, SolveStatus.INCONSISTENT_BOUNDS, "inconsistent bounds")
        if not np.all(np.isfinite(params)) or not np.all(np.isfinite(z0)):
            logger.warning(f"{spec.name}: non-finite parameters or initial guess.")
            return self._failed(z0, params, SolveStatus.NAN_IN_CALLBACK, "non-finite input")

        args = {"x0": z0, "p": params, "lbx": spec.lbz, "ubx": spec.ubz, "lbg": self._lbg, "ubg": self._ubg}
        if self.config.method == "sqp" and lam_g0 is not None:
            args["lam_g0"] = lam_g0
            args["lam_x0"] = lam_x0
        try:
            result = self._solver(**args)
        except RuntimeError as err:
            logger.warning(f"{spec.name}: solver raised {err}")
            return self._failed(z0, params, SolveStatus.FAILED, str(err))

        stats = self._solver.stats()
        status = _status_from_stats(stats)
        lam_g = _column(result["lam_g"])
        sol = NlpSolution(
            z=_column(result["x"]),
            lam_eq=lam_g[: spec.n_eq],
            lam_ineq=np.maximum(lam_g[spec.n_eq :], 0.0),
            lam_x=_column(result["lam_x"]),
            value=float(result["f"]),
            status=status,
            iterations=int(stats.get("iter_count", 0)),
            message=str(stats.get("return_status", "")),
        )
        if not np.isfinite(sol.value) or not np.all(np.isfinite(sol.z)):
            sol.status = SolveStatus.NAN_IN_CALLBACK
        sol.kkt = kkt_residuals(spec, params, sol, evaluator=self._evaluator)
        self._write_iterations(stats)

        if sol.success:
            self._last = sol
            logger.debug(f"{spec.name}: solved in {sol.iterations} iterations, value {sol.value:.6g}.")
        else:
            logger.debug(
                f"{spec.name}: {sol.status.value} ({sol.message}) after {sol.iterations} iterations."
            )
        return sol

    def _failed(self, z0, params, status, message):
        spec = self.spec
        f_value = float(self._evaluator(z0, params)[0]) if np.all(np.isfinite(params)) else np.nan
        return NlpSolution(
            z=z0.copy(),
            lam_eq=np.zeros(spec.n_eq),
            lam_ineq=np.zeros(spec.n_ineq),
            lam_x=np.zeros(spec.n_z),
            value=f_value,
            status=status,
            message=message,
        )

    def _write_iterations(self, stats):
        if self._log is None:
            return
        iterations = stats.get("iterations", {})
        objectives = iterations.get("obj", [])
        for i, obj in enumerate(objectives):
            self._log.write(
                {
                    "solver": self.spec.name,
                    "solve": self.num_solves,
                    "iter": i,
                    "obj": float(obj),
                    "inf_pr": float(iterations.get("inf_pr", [np.nan] * len(objectives))[i]),
                    "inf_du": float(iterations.get("inf_du", [np.nan] * len(objectives))[i]),
                }
            )

    def value_gradient(self, params, sol):
        """The gradient of the optimal value with respect to the theta slots.

        Parameters
        ----------
        params : array_like
            The parameters the solution was computed for.
        sol : NlpSolution
            A successful solution.

        Returns
        -------
        ValueGradient
            The gradient and a degeneracy flag.
        """
        params = _column(params, self.spec.n_p)
        grad = _column(self._lag_grad(sol.z, params, sol.lam_g))
        degenerate = self._is_degenerate(params, sol)
        if degenerate:
            logger.warning(f"{self.spec.name}: degenerate active set, gradient is low confidence.")
        return ValueGradient(grad=grad, degenerate=degenerate)

    def _is_degenerate(self, params, sol):
        spec = self.spec
        tol = self.config.active_tol
        active = active_set(spec, params, sol, tol=tol)

        # Weakly active rows: active constraint with a vanishing multiplier.
        if any(sol.lam_ineq[i] <= tol for i in active["ineq"]):
            return True
        bounds = active["lower"] + active["upper"]
        if any(abs(sol.lam_x[i]) <= tol for i in bounds):
            return True

        _, _, _, _, jac_g = self._evaluator(sol.z, params)
        jac_g = np.asarray(cs.DM(jac_g).full()).reshape(spec.n_eq + spec.n_ineq, spec.n_z)
        rows = [jac_g[: spec.n_eq]]
        rows.append(jac_g[spec.n_eq :][active["ineq"]])
        rows.append(np.eye(spec.n_z)[bounds])
        stacked = np.vstack(rows)
        if stacked.shape[0] == 0:
            return False
        return bool(np.linalg.matrix_rank(stacked) < stacked.shape[0])


def solve(spec, params, z0=None, config=None):
    """Solve a program once (see ``NlpSolver.solve``)."""
    return NlpSolver(spec, config).solve(params, z0=z0)


def value_gradient(spec, params, sol, config=None):
    """The optimal-value gradient at a solution (see ``NlpSolver.value_gradient``)."""
    return NlpSolver(spec, config).value_gradient(params, sol)


@dataclass
class BruteForceResult:
    """The result of the grid oracle.

    Attributes
    ----------
    value : float
        The smallest feasible grid objective (inf if none is feasible).
    z : numpy.ndarray or None
        The minimizing grid point.
    status : str
        ``"optimal"`` or ``"infeasible"``.
    step : numpy.ndarray
        The grid spacing per dimension.
    """

    value: float
    z: np.ndarray | None
    status: str
    step: np.ndarray


def brute_force_value(spec, params, points_per_dim=201, feas_tol=1e-9):
    """Minimize the objective over a uniform grid of the decision box.

    Parameters
    ----------
    spec : NlpSpec
        A program with at most three decision variables and finite bounds.
    params : array_like
        The numeric parameters.
    points_per_dim : int
        The grid resolution.
    feas_tol : float
        The tolerance on constraint satisfaction at grid points.

    Returns
    -------
    BruteForceResult
        The grid minimum.
    """
    if spec.n_z > 3:
        raise GridTooLargeError(f"The grid oracle supports at most 3 decision variables, got {spec.n_z}.")
    if not (np.all(np.isfinite(spec.lbz)) and np.all(np.isfinite(spec.ubz))):
        raise ValueError("The grid oracle needs finite bounds on every decision variable.")
    params = _column(params, spec.n_p)

    axes = [np.linspace(lo, hi, points_per_dim) for lo, hi in zip(spec.lbz, spec.ubz)]
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.vstack([m.ravel() for m in mesh])
    step = (spec.ubz - spec.lbz) / max(points_per_dim - 1, 1)

    fg = cs.Function("grid_eval", [spec.z, spec.p], [spec.f, spec.g_eq, spec.g_ineq])
    f_all, eq_all, ineq_all = fg.map(points.shape[1])(points, np.tile(params[:, None], points.shape[1]))
    f_all = np.asarray(cs.DM(f_all).full()).reshape(-1)
    feasible = np.ones(points.shape[1], dtype=bool)
    if spec.n_eq > 0:
        feasible &= np.all(np.abs(np.asarray(cs.DM(eq_all).full())) <= feas_tol, axis=0)
    if spec.n_ineq > 0:
        feasible &= np.all(np.asarray(cs.DM(ineq_all).full()) <= feas_tol, axis=0)

    if not np.any(feasible):
        return BruteForceResult(value=np.inf, z=None, status="infeasible", step=step)
    idx = np.flatnonzero(feasible)[np.argmin(f_all[feasible])]
    return BruteForceResult(value=float(f_all[idx]), z=points[:, idx], status="optimal", step=step)
