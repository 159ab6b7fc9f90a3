"""Finite-difference checks of the optimal-value gradient and of the decay-network Jacobian."""

from dataclasses import dataclass, field, replace
import logging

import numpy as np

from safe_mpcrl.barrier import barrier_values
from safe_mpcrl.env import NUM_INPUTS, NUM_STATES
from safe_mpcrl.mpc import MpcTemplate, default_theta, network_shape
from safe_mpcrl.neural import (
    NetworkShape,
    RnnHiddenState,
    flatten_params,
    init_mlp_params,
    init_rnn_params,
    mlp_forward,
    net_param_jacobian,
    rnn_forward,
    unflatten_params,
)
from safe_mpcrl.nlp import NlpSolver, active_set

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 1e-4


def relative_error(grad, fd):
    """The error ``max|grad - fd| / max(1, max|fd|)``.

    Examples
    --------
    >>> relative_error([1.0, 2.0], [1.0, 2.0])
    0.0
    >>> relative_error([0.5], [0.0])
    0.5
    """
    grad = np.asarray(grad, dtype=float).reshape(-1)
    fd = np.asarray(fd, dtype=float).reshape(-1)
    if grad.shape != fd.shape:
        raise ValueError(f"Shape mismatch: {grad.shape} vs {fd.shape}.")
    if grad.size == 0:
        return 0.0
    return float(np.max(np.abs(grad - fd)) / max(1.0, float(np.max(np.abs(fd)))))


@dataclass
class GradCheckResult:
    """The outcome of one finite-difference suite.

    Attributes
    ----------
    suite : str
        The suite name, e.g. ``"value"`` or ``"network_rnn"``.
    errors : list of float
        The relative error of every checked instance.
    skipped : dict
        Skip reason to count.
    threshold : float
        The largest accepted relative error.
    """

    suite: str
    errors: list = field(default_factory=list)
    skipped: dict = field(default_factory=dict)
    threshold: float = DEFAULT_THRESHOLD

    @property
    def checked(self):
        """The number of instances compared."""
        return len(self.errors)

    @property
    def max_rel_error(self):
        """The worst relative error (0 when nothing was checked)."""
        return max(self.errors) if len(self.errors) > 0 else 0.0

    @property
    def passed(self):
        """Whether at least one instance was checked and none exceeded the threshold."""
        return self.checked > 0 and self.max_rel_error <= self.threshold

    def skip(self, reason):
        """Count a skipped instance."""
        self.skipped[reason] = self.skipped.get(reason, 0) + 1

    def to_record(self):
        """A JSON-ready summary."""
        return {
            "suite": self.suite,
            "checked": self.checked,
            "skipped": dict(sorted(self.skipped.items())),
            "max_rel_error": self.max_rel_error,
            "threshold": self.threshold,
            "passed": self.passed,
        }


def _random_theta(cfg, world, rng):
    theta = default_theta(cfg, world, rng)
    theta = theta.with_block("F", rng.uniform(1.0, 100.0, NUM_STATES))
    if cfg.variant == "lod":
        shape = theta["omega_bar"].shape
        theta = theta.with_block("omega_bar", rng.uniform(0.05, 1.0, shape))
        theta = theta.with_block("p_omega", rng.uniform(0.1, 2.0, shape))
    return theta


def _random_state(world, t, rng, margin=0.1, attempts=100):
    bound = world.state_bound
    for _ in range(attempts):
        s = np.concatenate([rng.uniform(-bound, bound, 2), rng.uniform(-1.0, 1.0, 2)])
        if np.min(barrier_values(world, s, t)) > margin:
            return s
    raise ValueError("Could not sample a state outside every obstacle.")


def _random_hidden(shape, rng):
    return RnnHiddenState.from_flat(shape, rng.uniform(0.0, 1.0, sum(shape.hidden)))


def _pick_coords(theta, rng, max_coords):
    """The F block plus a random sample of the remaining coordinates."""
    n = len(theta)
    always = list(range(theta.slices()["F"].start, theta.slices()["F"].stop))
    rest = [i for i in range(n) if i not in always]
    extra = max(0, min(max_coords - len(always), len(rest)))
    sampled = rng.choice(rest, size=extra, replace=False).tolist() if extra > 0 else []
    return sorted(always + [int(i) for i in sampled])


def check_value_gradient(
    cfg,
    world,
    kind="value",
    n_instances=20,
    seed=0,
    step=1e-5,
    max_coords=12,
    threshold=DEFAULT_THRESHOLD,
):
    """Compare the envelope gradient of the optimal value with central differences.

    Instances with a failed solve, a degenerate active set or an active set that changes
    under the perturbation are skipped.

    Parameters
    ----------
    cfg : MpcConfig
        The MPC settings (solved here with the interior-point method, an exact Hessian
        and a tightened tolerance).
    world : World
        The task.
    kind : str
        ``"value"`` or ``"action_value"``.
    n_instances : int
        The number of random (theta, state, action) instances.
    seed : int
        Seeds the instances.
    step : float
        The relative finite-difference step.
    max_coords : int
        The number of theta coordinates compared per instance.
    threshold : float
        The largest accepted relative error.

    Returns
    -------
    GradCheckResult
        The per-instance errors and skip counts.
    """
    # Central differences need more accuracy than the quasi-Newton default gives.
    solver_cfg = replace(
        cfg.solver,
        tol=min(cfg.solver.tol, 1e-9),
        method="ipopt",
        hessian="exact",
        warm_start=False,
        iteration_log=None,
    )
    tight = replace(cfg, solver=solver_cfg, dump_path=None)
    template = MpcTemplate(tight, world, kind)
    spec = template.spec
    solver = NlpSolver(spec, solver_cfg)
    rng = np.random.default_rng(seed)
    result = GradCheckResult(suite=kind, threshold=threshold)

    for _ in range(n_instances):
        theta = _random_theta(tight, world, rng)
        t = int(rng.integers(0, 20))
        s = _random_state(world, t, rng)
        a = None
        if kind == "action_value":
            a = rng.uniform(-world.action_bound, world.action_bound, NUM_INPUTS)
        hidden = _random_hidden(template.net_shape, rng) if tight.variant == "rnn" else None

        params = template.params(theta, s, t, hidden=hidden, a=a)
        base = solver.solve(params, z0=template.guess(params))
        if not base.success:
            result.skip("solve_failed")
            continue
        grad = solver.value_gradient(params, base)
        if grad.degenerate:
            result.skip("degenerate")
            continue
        active = active_set(spec, params, base, tol=solver_cfg.active_tol)

        flat = theta.flat()
        coords = _pick_coords(theta, rng, max_coords)
        fd = np.zeros(len(coords))
        stable = True
        for j, c in enumerate(coords):
            h = step * max(1.0, abs(flat[c]))
            values = []
            for sign in (1.0, -1.0):
                shifted = flat.copy()
                shifted[c] += sign * h
                p_shift = params.copy()
                p_shift[spec.theta_slice] = shifted
                sol = solver.solve(p_shift, z0=base.z)
                if not sol.success or active_set(spec, p_shift, sol, tol=solver_cfg.active_tol) != active:
                    stable = False
                    break
                values.append(sol.value)
            if not stable:
                break
            fd[j] = (values[0] - values[1]) / (2.0 * h)

        if not stable:
            result.skip("active_set_changed")
            continue
        err = relative_error(grad.grad[coords], fd)
        result.errors.append(err)
        logger.debug(f"{spec.name}: relative error {err:.3g} over {len(coords)} coordinates.")

    return result


def check_network_jacobian(shape, n_instances=5, seed=0, step=1e-6, threshold=DEFAULT_THRESHOLD):
    """Compare the exact network Jacobian with central differences on random networks.

    Parameters
    ----------
    shape : NetworkShape
        The network shape (recurrent or not).
    n_instances : int
        The number of random (parameters, input, hidden state) draws.
    seed : int
        Seeds the draws.
    step : float
        The finite-difference step.
    threshold : float
        The largest accepted relative error.

    Returns
    -------
    GradCheckResult
        The per-instance errors.
    """
    rng = np.random.default_rng(seed)
    suite = "network_rnn" if shape.recurrent else "network_mlp"
    result = GradCheckResult(suite=suite, threshold=threshold)

    for _ in range(n_instances):
        if shape.recurrent:
            params = init_rnn_params(shape, rng, output_decay=rng.uniform(0.1, 0.9))
            q_prev = _random_hidden(shape, rng)
        else:
            params = init_mlp_params(shape, rng, output_decay=rng.uniform(0.1, 0.9))
            q_prev = None
        z = rng.normal(0.0, 1.0, shape.n_in)

        def forward(flat, z=z, q_prev=q_prev):
            p = unflatten_params(shape, flat)
            if shape.recurrent:
                return np.asarray(rnn_forward(p, z, q_prev)[0], dtype=float)
            return np.asarray(mlp_forward(p, z), dtype=float)

        flat = flatten_params(params)
        jac = net_param_jacobian(params, z, q_prev)
        fd = np.zeros_like(jac)
        for c in range(flat.shape[0]):
            shifted = flat.copy()
            shifted[c] += step
            plus = forward(shifted)
            shifted[c] -= 2.0 * step
            fd[:, c] = (plus - forward(shifted)) / (2.0 * step)
        result.errors.append(relative_error(jac, fd))

    return result


def run_gradient_checks(cfg, world, n_instances=20, seed=0, threshold=DEFAULT_THRESHOLD):
    """Run every suite for one MPC setting.

    The network suites use the configured hidden widths (recurrent and not) regardless of
    the variant.

    Returns
    -------
    list of GradCheckResult
        The value, action-value and network suites.
    """
    results = [
        check_value_gradient(cfg, world, "value", n_instances, seed, threshold=threshold),
        check_value_gradient(cfg, world, "action_value", n_instances, seed + 1, threshold=threshold),
    ]
    base = network_shape(cfg, world)
    n_net = max(1, n_instances // 4)
    for recurrent in (False, True):
        shape = NetworkShape(base.n_in, base.hidden, base.n_out, recurrent)
        results.append(check_network_jacobian(shape, n_net, seed + 2, threshold=threshold))

    for res in results:
        logger.info(
            f"{res.suite}: {res.checked} checked, skipped {res.skipped}, "
            f"max relative error {res.max_rel_error:.3g}"
        )
    return results
