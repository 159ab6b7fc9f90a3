"""The CBF-MPC value function approximators.

Three variants share one problem skeleton and differ in how the CBF decay of obstacle ``i``
at prediction step ``k`` is produced:

* ``lod``: decision variables ``omega[k, i]`` penalized towards learnable references,
* ``nn``: a feedforward network evaluated on the predicted state,
* ``rnn``: an Elman network unrolled over the prediction horizon.

Each variant is instantiated for three problem kinds: the state value ``V(s)``, the action
value ``Q(s, a)`` (first input fixed to ``a``) and the exploratory value (a linear
perturbation ``xi^T u_0`` added to the objective).
"""

from dataclasses import dataclass, field
import logging

import casadi as cs
import numpy as np

from safe_mpcrl.barrier import (
    EPS_OMEGA,
    barrier_value,
    barrier_values,
    context_from_centers,
    context_values,
)
from safe_mpcrl.bundle_utils import NdjsonWriter
from safe_mpcrl.env import NUM_INPUTS, NUM_STATES, StageCostWeights, action_vec, forecast_centers, state_vec
from safe_mpcrl.neural import (
    InputScaling,
    NetworkShape,
    RnnHiddenState,
    flatten_params,
    init_mlp_params,
    init_rnn_params,
    mlp_forward,
    rnn_forward,
    unflatten_params,
)
from safe_mpcrl.nlp import NlpSolver, NlpSpec, SolverConfig, SolveStatus
from safe_mpcrl.theta import ThetaBlock, ThetaVector

logger = logging.getLogger(__name__)

VARIANTS = ("lod", "nn", "rnn")
KINDS = ("value", "action_value", "exploratory")


class MissingVariantStateError(ValueError):
    """Raised when a recurrent problem is built without a hidden state."""


@dataclass(frozen=True)
class MpcConfig:
    """Settings of the CBF-MPC problems.

    Attributes
    ----------
    horizon : int
        The prediction horizon N.
    variant : str
        One of ``"lod"``, ``"nn"``, ``"rnn"``.
    w_mpc : float
        The slack penalty weight inside the MPC objective.
    weights : StageCostWeights
        The stage cost weights Q and R of the MPC objective.
    zeta : float
        The discount applied inside the MPC objective.
    state_bounds : str
        ``"soft"`` (one penalized slack per predicted state) or ``"hard"`` (box bounds).
    hard_cbf : bool
        Forces every CBF slack to zero.
    f_init, f_lower : float
        The initial value and lower bound of the terminal weight diagonal.
    omega_bar_init, p_omega_init, omega_bar_upper : float
        The initial LOD references and weights, and the reference upper bound.
    hidden : tuple of int
        The hidden widths of the decay networks.
    output_decay : float
        The decay the networks output at initialization when the last hidden layer is silent.
    spectral_radius : float
        The spectral radius of the initial recurrent matrices.
    context : str
        ``"forecast"`` (signed x-distance to moving obstacles) or ``"none"``.
    normalize : bool
        Whether the network inputs are normalized.
    solver : SolverConfig
        The NLP solver settings.
    dump_path : str or None
        If given, one problem record per solve is appended to this file.
    """

    horizon: int = 1
    variant: str = "lod"
    w_mpc: float = 20.0**6
    weights: StageCostWeights = field(default_factory=StageCostWeights)
    zeta: float = 1.0
    state_bounds: str = "soft"
    hard_cbf: bool = False
    f_init: float = 100.0
    f_lower: float = 1e-3
    omega_bar_init: float = 1000.0
    p_omega_init: float = 0.4
    omega_bar_upper: float = 1000.0
    hidden: tuple = (16, 16, 16)
    output_decay: float = 0.9
    spectral_radius: float = 0.5
    context: str = "forecast"
    normalize: bool = True
    solver: SolverConfig = field(default_factory=SolverConfig)
    dump_path: str | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError(f"The horizon must be at least 1, got {self.horizon}.")
        if self.variant not in VARIANTS:
            raise ValueError(f"Unknown MPC variant {self.variant}; expected one of {VARIANTS}.")
        if not self.w_mpc > 0.0:
            raise ValueError(f"w_mpc must be positive, got {self.w_mpc}.")
        if not 0.0 < self.zeta <= 1.0:
            raise ValueError(f"The MPC discount must lie in (0, 1], got {self.zeta}.")
        if self.state_bounds not in ("soft", "hard"):
            raise ValueError(f"Unknown state bound mode {self.state_bounds}.")
        if self.context not in ("forecast", "none"):
            raise ValueError(f"Unknown context mode {self.context}.")
        if not self.f_lower > 0.0:
            raise ValueError("The terminal weight lower bound must be positive.")
        object.__setattr__(self, "hidden", tuple(self.hidden))


def network_shape(cfg, world):
    """The decay-network shape for a config and world."""
    return NetworkShape.for_obstacles(world.num_obstacles, cfg.hidden, recurrent=cfg.variant == "rnn")


def theta_layout(cfg, world):
    """The learnable blocks of a config and world.

    Returns
    -------
    list of tuple
        ``(name, shape, lower, upper)`` in flat order.
    """
    layout = [("F", (NUM_STATES,), cfg.f_lower, np.inf)]
    if cfg.variant == "lod":
        shape = (cfg.horizon, world.num_obstacles)
        layout.append(("omega_bar", shape, EPS_OMEGA, cfg.omega_bar_upper))
        layout.append(("p_omega", shape, 0.0, np.inf))
    else:
        for name, rows, cols in network_shape(cfg, world).layout():
            layout.append((name, (rows,) if cols == 1 else (rows, cols), -np.inf, np.inf))
    return layout


def default_theta(cfg, world, rng=None):
    """The initial parameters of a variant.

    Parameters
    ----------
    cfg : MpcConfig
        The MPC settings.
    world : World
        The task.
    rng : numpy.random.Generator, optional
        Draws the network weights (seed 0 when omitted).

    Returns
    -------
    ThetaVector
        The initial parameters, within their bounds.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    values = {"F": np.full(NUM_STATES, cfg.f_init)}
    if cfg.variant == "lod":
        shape = (cfg.horizon, world.num_obstacles)
        values["omega_bar"] = np.full(shape, cfg.omega_bar_init)
        values["p_omega"] = np.full(shape, cfg.p_omega_init)
    else:
        net_shape = network_shape(cfg, world)
        if cfg.variant == "rnn":
            params = init_rnn_params(net_shape, rng, cfg.output_decay, cfg.spectral_radius)
        else:
            params = init_mlp_params(net_shape, rng, cfg.output_decay)
        flat = flatten_params(params)
        idx = 0
        for name, rows, cols in net_shape.layout():
            values[name] = flat[idx : idx + rows * cols]
            idx += rows * cols

    blocks = []
    for name, shape, lower, upper in theta_layout(cfg, world):
        blocks.append(ThetaBlock(name, np.reshape(values[name], shape), lower, upper))
    theta = ThetaVector(blocks)
    if not theta.within_bounds():
        raise ValueError(f"Initial parameters are outside their bounds: {theta.values_record()}")
    return theta


@dataclass
class MpcProblem:
    """One instantiated MPC problem.

    Attributes
    ----------
    spec : NlpSpec
        The symbolic program.
    params : numpy.ndarray
        The numeric parameter vector.
    z0 : numpy.ndarray
        The initial guess.
    """

    spec: object
    params: np.ndarray
    z0: np.ndarray


@dataclass
class MpcOutcome:
    """The result of one MPC solve.

    Attributes
    ----------
    u0 : numpy.ndarray
        The first optimal input (clipped into the action box on failure).
    value : float
        The optimal objective.
    slack : numpy.ndarray
        The CBF slacks, shape (N, num_obstacles).
    state_slack : numpy.ndarray
        The state-box slacks, shape (N,) (zeros with hard state bounds).
    omega : numpy.ndarray or None
        The LOD decays, shape (N, num_obstacles).
    decays : numpy.ndarray
        The decay of every obstacle at the first prediction step.
    predicted_states : numpy.ndarray
        The predicted states x_0..x_N, shape (N + 1, 4).
    status : SolveStatus
        The solver status.
    solution : NlpSolution
        The full primal-dual solution.
    params : numpy.ndarray
        The numeric parameters of the solve.
    kind : str
        The problem kind.
    hidden_next : RnnHiddenState or None
        The hidden state after the first prediction step (RNN only).
    fallback : str or None
        Where ``u0`` came from after a failed policy solve: ``"final_iterate"`` (the
        final iterate was primal feasible), ``"previous_plan"`` (the previous successful
        plan shifted by one step) or ``"clipped_iterate"`` (neither was available).
    """

    u0: np.ndarray
    value: float
    slack: np.ndarray
    state_slack: np.ndarray
    omega: np.ndarray | None
    decays: np.ndarray
    predicted_states: np.ndarray
    status: SolveStatus
    solution: object
    params: np.ndarray
    kind: str
    hidden_next: RnnHiddenState | None = None
    fallback: str | None = None

    @property
    def success(self):
        """Whether the solve succeeded."""
        return self.status == SolveStatus.SUCCESS

    @property
    def slack_total(self):
        """The summed CBF slack."""
        return float(np.sum(self.slack))


class MpcTemplate:
    """The symbolic program of one (variant, kind) pair and its numeric plumbing.

    Parameters
    ----------
    cfg : MpcConfig
        The MPC settings.
    world : World
        The task.
    kind : str
        ``"value"``, ``"action_value"`` or ``"exploratory"``.
    """

    def __init__(self, cfg, world, kind="value"):
        if kind not in KINDS:
            raise ValueError(f"Unknown problem kind {kind}; expected one of {KINDS}.")
        self.cfg = cfg
        self.world = world
        self.kind = kind
        self.layout = theta_layout(cfg, world)
        self.net_shape = None if cfg.variant == "lod" else network_shape(cfg, world)
        self.scaling = InputScaling.for_world(world) if cfg.normalize else InputScaling()
        self.spec = self._build_spec()
        self._g_ineq = cs.Function("g_ineq", [self.spec.z, self.spec.p], [self.spec.g_ineq])

    # --- Symbolic construction ---------------------------------------------------

    def _build_spec(self):
        cfg, world = self.cfg, self.world
        N, n_obs = cfg.horizon, world.num_obstacles
        plant = world.plant
        A, B = cs.DM(plant.A), cs.DM(plant.B)
        Qm, Rm = cs.DM(cfg.weights.Q), cs.DM(cfg.weights.R)

        # Parameters: theta first, then the exogenous data.
        n_theta = int(sum(np.prod(shape) for _, shape, _, _ in self.layout))
        p_parts = [
            ("theta", cs.SX.sym("theta", n_theta), (n_theta,)),
            ("s", cs.SX.sym("s", NUM_STATES), (NUM_STATES,)),
            ("centers", cs.SX.sym("centers", (N + 1) * n_obs * 2), (N + 1, n_obs, 2)),
        ]
        if self.kind == "action_value":
            p_parts.append(("a", cs.SX.sym("a", NUM_INPUTS), (NUM_INPUTS,)))
        if self.kind == "exploratory":
            p_parts.append(("xi", cs.SX.sym("xi", NUM_INPUTS), (NUM_INPUTS,)))
        if cfg.variant == "rnn":
            n_hidden = sum(cfg.hidden)
            p_parts.append(("hidden", cs.SX.sym("hidden", n_hidden), (n_hidden,)))
        p, param_blocks, sym_p = self._stack(p_parts)

        # Decision blocks, each stored row-major.
        bound_u = world.action_bound
        bound_x = world.state_bound if cfg.state_bounds == "hard" else np.inf
        slack_upper = 0.0 if cfg.hard_cbf else np.inf
        z_parts = [
            ("U", cs.SX.sym("U", N * NUM_INPUTS), (N, NUM_INPUTS), -bound_u, bound_u),
            ("X", cs.SX.sym("X", N * NUM_STATES), (N, NUM_STATES), -bound_x, bound_x),
            ("S", cs.SX.sym("S", N * n_obs), (N, n_obs), 0.0, slack_upper),
        ]
        if cfg.variant == "lod":
            z_parts.append(("Omega", cs.SX.sym("Omega", N * n_obs), (N, n_obs), EPS_OMEGA, 1.0))
        if cfg.state_bounds == "soft":
            z_parts.append(("XS", cs.SX.sym("XS", N), (N,), 0.0, np.inf))
        z, decision_blocks, sym_z = self._stack([(n, s, shape) for n, s, shape, _, _ in z_parts])
        lbz = np.concatenate([np.full(s.numel(), lo) for _, s, _, lo, _ in z_parts])
        ubz = np.concatenate([np.full(s.numel(), hi) for _, s, _, _, hi in z_parts])
        if self.kind == "action_value":
            # u_0 = a fixes the first input; params() keeps a inside the action box.
            lbz[:NUM_INPUTS] = -np.inf
            ubz[:NUM_INPUTS] = np.inf

        theta = sym_p["theta"]
        theta_slices = {}
        idx = 0
        for name, shape, _, _ in self.layout:
            size = int(np.prod(shape))
            theta_slices[name] = slice(idx, idx + size)
            idx += size

        U, X, S = sym_z["U"], sym_z["X"], sym_z["S"]
        s_param, centers = sym_p["s"], sym_p["centers"]

        def u_at(k):
            return U[k * NUM_INPUTS : (k + 1) * NUM_INPUTS]

        def x_at(k):
            return s_param if k == 0 else X[(k - 1) * NUM_STATES : k * NUM_STATES]

        def center_at(k, i):
            base = (k * n_obs + i) * 2
            return centers[base], centers[base + 1]

        def h_at(k, i):
            x = x_at(k)
            cx, cy = center_at(k, i)
            return barrier_value(x[0], x[1], cx, cy, world.obstacles[i].radius)

        # Objective.
        F = theta[theta_slices["F"]]
        f = 0
        for k in range(N):
            f += cfg.zeta**k * (cs.bilin(Qm, x_at(k), x_at(k)) + cs.bilin(Rm, u_at(k), u_at(k)))
        f += cfg.zeta**N * cs.dot(F, x_at(N) ** 2)
        f += cfg.w_mpc * cs.sum1(S)
        if cfg.state_bounds == "soft":
            f += cfg.w_mpc * cs.sum1(sym_z["XS"])
        if cfg.variant == "lod":
            omega_bar = theta[theta_slices["omega_bar"]]
            p_omega = theta[theta_slices["p_omega"]]
            f += cs.dot(p_omega, (sym_z["Omega"] - omega_bar) ** 2)
        if self.kind == "exploratory":
            f += cs.dot(sym_p["xi"], u_at(0))

        # Decay rates per prediction step.
        decays = self._symbolic_decays(theta, theta_slices, sym_p, sym_z, x_at, center_at, h_at)

        # Constraints.
        g_eq, eq_groups = [], {}
        dynamics = [x_at(k + 1) - (cs.mtimes(A, x_at(k)) + cs.mtimes(B, u_at(k))) for k in range(N)]
        eq_groups["dynamics"] = ("eq", slice(0, N * NUM_STATES))
        g_eq += dynamics
        if self.kind == "action_value":
            g_eq.append(u_at(0) - sym_p["a"])
            eq_groups["action"] = ("eq", slice(N * NUM_STATES, N * NUM_STATES + NUM_INPUTS))

        g_ineq, ineq_groups = [], {}
        row = 0
        if cfg.state_bounds == "soft":
            XS = sym_z["XS"]
            for k in range(1, N + 1):
                x = x_at(k)
                g_ineq.append(x - world.state_bound - XS[k - 1])
                g_ineq.append(-x - world.state_bound - XS[k - 1])
            ineq_groups["state_box"] = ("ineq", slice(row, row + 2 * NUM_STATES * N))
            row += 2 * NUM_STATES * N
        cbf_rows = []
        for k in range(N):
            for i in range(n_obs):
                residual = h_at(k + 1, i) - (1.0 - decays[k][i]) * h_at(k, i) + S[k * n_obs + i]
                cbf_rows.append(-residual)
        g_ineq += cbf_rows
        ineq_groups["cbf"] = ("ineq", slice(row, row + N * n_obs))

        return NlpSpec(
            z=z,
            p=p,
            f=f,
            g_eq=cs.vertcat(*g_eq),
            g_ineq=cs.vertcat(*g_ineq),
            lbz=lbz,
            ubz=ubz,
            decision_blocks=decision_blocks,
            param_blocks=param_blocks,
            theta_slice=param_blocks["theta"][0],
            constraint_groups={**eq_groups, **ineq_groups},
            name=f"{self.kind}_{cfg.variant}_n{N}",
        )

    @staticmethod
    def _stack(parts):
        blocks, symbols, idx = {}, {}, 0
        for name, sym, shape in parts:
            blocks[name] = (slice(idx, idx + sym.numel()), shape)
            symbols[name] = sym
            idx += sym.numel()
        return cs.vertcat(*[sym for _, sym, _ in parts]), blocks, symbols

    def _symbolic_decays(self, theta, theta_slices, sym_p, sym_z, x_at, center_at, h_at):
        cfg, world = self.cfg, self.world
        N, n_obs = cfg.horizon, world.num_obstacles
        if cfg.variant == "lod":
            omega = sym_z["Omega"]
            return [[omega[k * n_obs + i] for i in range(n_obs)] for k in range(N)]

        first = self.layout[1][0]
        last = self.layout[-1][0]
        net_slice = slice(theta_slices[first].start, theta_slices[last].stop)
        params = unflatten_params(self.net_shape, theta[net_slice])
        moving = [not ob.is_static for ob in world.obstacles]
        q = RnnHiddenState.from_flat(self.net_shape, sym_p["hidden"]) if cfg.variant == "rnn" else None

        decays = []
        for k in range(N):
            x = x_at(k)
            h_vec = cs.vertcat(*[h_at(k, i) for i in range(n_obs)])
            if cfg.context == "forecast":
                ctx = cs.vertcat(*context_from_centers(x[0], [center_at(k, i) for i in range(n_obs)], moving))
            else:
                ctx = cs.SX.zeros(n_obs)
            z_in = self.scaling.apply(x, h_vec, ctx)
            if cfg.variant == "rnn":
                gamma, q = rnn_forward(params, z_in, q)
            else:
                gamma = mlp_forward(params, z_in)
            decays.append([gamma[i] for i in range(n_obs)])
        return decays

    # --- Numeric plumbing ----------------------------------------------------------

    def check_theta(self, theta):
        """Raise ValueError unless ``theta`` has this template's block layout."""
        expected = [(name, tuple(shape)) for name, shape, _, _ in self.layout]
        actual = [(b.name, tuple(b.shape)) for b in theta.blocks()]
        if expected != actual:
            raise ValueError(
                f"Theta layout {actual} does not match the {self.cfg.variant} layout {expected}."
            )

    def params(self, theta, s, t=0, hidden=None, a=None, xi=None):
        """Assemble the numeric parameter vector.

        Parameters
        ----------
        theta : ThetaVector
            The learnable parameters.
        s : array_like
            The current state.
        t : int
            The current step (locates moving obstacles).
        hidden : RnnHiddenState, optional
            The hidden state (required by the RNN variant).
        a : array_like, optional
            The fixed first input (action-value problems).
        xi : array_like, optional
            The perturbation (exploratory problems, zero when omitted).

        Returns
        -------
        numpy.ndarray
            The parameter vector.
        """
        self.check_theta(theta)
        cfg, world = self.cfg, self.world
        parts = [theta.flat(), state_vec(s), forecast_centers(world, t, cfg.horizon).ravel()]

        if self.kind == "action_value":
            if a is None:
                raise ValueError("An action-value problem needs the action a.")
            a = action_vec(a)
            if np.max(np.abs(a)) > world.action_bound + 1e-12:
                raise ValueError(f"The action {a} is outside the action box ±{world.action_bound}.")
            parts.append(a)
        if self.kind == "exploratory":
            parts.append(np.zeros(NUM_INPUTS) if xi is None else action_vec(xi))
        if cfg.variant == "rnn":
            if hidden is None:
                raise MissingVariantStateError("The RNN variant needs the previous hidden state.")
            q = np.asarray(hidden.flat(), dtype=float)
            if q.shape[0] != sum(cfg.hidden):
                raise MissingVariantStateError(
                    f"Hidden state has {q.shape[0]} entries, expected {sum(cfg.hidden)}."
                )
            parts.append(q)
        return np.concatenate(parts)

    def guess(self, params, prev_z=None, shift=False):
        """An initial guess for the decision vector.

        Inputs come from ``prev_z`` (shifted by one step when ``shift``) or are zero; states
        are rolled out from the current state under those inputs; decays start at the
        previous values or at the references clipped into (0, 1]; slacks start at the
        constraint violation of that guess.
        """
        spec, cfg, world = self.spec, self.cfg, self.world
        N = cfg.horizon
        s = spec.param_block(params, "s")

        if prev_z is None:
            U = np.zeros((N, NUM_INPUTS))
        else:
            U = spec.block(prev_z, "U").copy()
            if shift:
                U = np.vstack([U[1:], U[-1:]])
        if self.kind == "action_value":
            U[0] = spec.param_block(params, "a")
        U = np.clip(U, -world.action_bound, world.action_bound)

        X = np.zeros((N, NUM_STATES))
        x = s
        for k in range(N):
            x = world.plant.A @ x + world.plant.B @ U[k]
            X[k] = x

        values = {"U": U, "X": X}
        if cfg.variant == "lod":
            if prev_z is None:
                theta = params[spec.theta_slice]
                omega_bar = theta[self._theta_slice("omega_bar")].reshape(N, -1)
                omega = np.clip(omega_bar, EPS_OMEGA, 1.0)
            else:
                omega = spec.block(prev_z, "Omega").copy()
                if shift:
                    omega = np.vstack([omega[1:], omega[-1:]])
            values["Omega"] = omega

        z = np.zeros(spec.n_z)
        for name, value in values.items():
            z[spec.decision_blocks[name][0]] = np.ravel(value)

        # Slacks at the violation of the guess.
        g = np.asarray(self._g_ineq(z, params).full()).reshape(-1)
        _, cbf_rows = spec.constraint_groups["cbf"]
        s_slice = spec.decision_blocks["S"][0]
        z[s_slice] = np.minimum(np.maximum(g[cbf_rows], 0.0), spec.ubz[s_slice])
        if "state_box" in spec.constraint_groups:
            _, box_rows = spec.constraint_groups["state_box"]
            per_step = np.maximum(g[box_rows], 0.0).reshape(N, 2 * NUM_STATES)
            z[spec.decision_blocks["XS"][0]] = per_step.max(axis=1)
        return np.clip(z, spec.lbz, spec.ubz)

    def _theta_slice(self, name):
        idx = 0
        for block, shape, _, _ in self.layout:
            size = int(np.prod(shape))
            if block == name:
                return slice(idx, idx + size)
            idx += size
        raise KeyError(f"Unknown theta block {name}.")

    def problem(self, theta, s, t=0, hidden=None, a=None, xi=None):
        """Instantiate the program at a state with a cold initial guess."""
        params = self.params(theta, s, t, hidden=hidden, a=a, xi=xi)
        return MpcProblem(spec=self.spec, params=params, z0=self.guess(params))

    def decay_rates(self, theta, s, t=0, hidden=None):
        """The first-step decays of the network variants, evaluated numerically.

        Returns
        -------
        gamma : numpy.ndarray
            One decay per obstacle.
        hidden_next : RnnHiddenState or None
            The hidden state after the step (RNN only).
        """
        if self.cfg.variant == "lod":
            raise ValueError("LOD decays are decision variables; read them from the solution.")
        self.check_theta(theta)
        flat = theta.flat()
        net_slice = slice(self._theta_slice(self.layout[1][0]).start, len(flat))
        params = unflatten_params(self.net_shape, flat[net_slice])

        h_vals = barrier_values(self.world, s, t)
        if self.cfg.context == "forecast":
            ctx = context_values(self.world, s, t)
        else:
            ctx = np.zeros(self.world.num_obstacles)
        z_in = self.scaling.apply(state_vec(s), h_vals, ctx)
        if self.cfg.variant == "rnn":
            if hidden is None:
                raise MissingVariantStateError("The RNN variant needs the previous hidden state.")
            gamma, hidden_next = rnn_forward(params, z_in, hidden)
            return np.asarray(gamma, dtype=float), hidden_next
        return np.asarray(mlp_forward(params, z_in), dtype=float), None

    def outcome(self, sol, params, theta, t=0, hidden=None):
        """Package a solution as an MpcOutcome."""
        spec, cfg, world = self.spec, self.cfg, self.world
        s = spec.param_block(params, "s")
        U = spec.block(sol.z, "U")
        X = spec.block(sol.z, "X")

        # Interior-point iterates may sit marginally outside the box.
        u0 = np.clip(np.nan_to_num(U[0]), -world.action_bound, world.action_bound)

        omega = spec.block(sol.z, "Omega") if cfg.variant == "lod" else None
        hidden_next = None
        if cfg.variant == "lod":
            decays = omega[0].copy()
        else:
            decays, hidden_next = self.decay_rates(theta, s, t, hidden)

        state_slack = spec.block(sol.z, "XS") if "XS" in spec.decision_blocks else np.zeros(cfg.horizon)
        return MpcOutcome(
            u0=u0,
            value=sol.value,
            slack=np.maximum(spec.block(sol.z, "S"), 0.0),
            state_slack=np.maximum(state_slack, 0.0),
            omega=omega,
            decays=decays,
            predicted_states=np.vstack([s, X]),
            status=sol.status,
            solution=sol,
            params=params,
            kind=self.kind,
            hidden_next=hidden_next,
        )


def build_value_problem(cfg, world, theta, s, t=0, hidden=None):
    """The state-value program V(s) at a state.

    Returns
    -------
    MpcProblem
        The program, its numeric parameters and a cold initial guess.
    """
    return MpcTemplate(cfg, world, "value").problem(theta, s, t, hidden=hidden)


def build_action_value_problem(cfg, world, theta, s, a, t=0, hidden=None):
    """The action-value program Q(s, a): the value program with ``u_0 = a``."""
    return MpcTemplate(cfg, world, "action_value").problem(theta, s, t, hidden=hidden, a=a)


def build_exploratory_problem(cfg, world, theta, s, xi, t=0, hidden=None):
    """The exploratory program: the value objective plus ``xi^T u_0``."""
    return MpcTemplate(cfg, world, "exploratory").problem(theta, s, t, hidden=hidden, xi=xi)


class CbfMpc:
    """Compiled V, Q and exploratory solvers of one variant with warm-start memory.

    Parameters
    ----------
    cfg : MpcConfig
        The MPC settings.
    world : World
        The task.
    """

    def __init__(self, cfg, world):
        self.cfg = cfg
        self.world = world
        self.templates = {kind: MpcTemplate(cfg, world, kind) for kind in KINDS}
        self.solvers = {kind: NlpSolver(self.templates[kind].spec, cfg.solver) for kind in KINDS}
        self._dump = None if cfg.dump_path is None else NdjsonWriter(cfg.dump_path)
        self._previous = None

    def reset(self):
        """Clear the warm starts (call at episode start)."""
        self._previous = None
        for solver in self.solvers.values():
            solver.reset()

    def initial_hidden(self):
        """The reset hidden state (None for non-recurrent variants)."""
        if self.cfg.variant != "rnn":
            return None
        return RnnHiddenState.zeros(network_shape(self.cfg, self.world))

    def _solve(self, kind, theta, s, t, hidden=None, a=None, xi=None, prev_z=None, shift=False):
        template = self.templates[kind]
        params = template.params(theta, s, t, hidden=hidden, a=a, xi=xi)
        warm = prev_z is not None and self.cfg.solver.warm_start
        z0 = template.guess(params, prev_z=prev_z if warm else None, shift=shift)
        sol = self.solvers[kind].solve(params, z0=z0)
        if not sol.success:
            logger.warning(f"{template.spec.name} at t={t}: {sol.status.value} ({sol.message}).")
        if self._dump is not None:
            self._dump.write(
                {
                    "kind": kind,
                    "t": int(t),
                    "status": sol.status.value,
                    "value": sol.value,
                    "iterations": sol.iterations,
                    "problem": template.spec.describe(),
                }
            )
        return template.outcome(sol, params, theta, t, hidden)

    def solve_policy(self, theta, s, t=0, hidden=None, xi=None):
        """Solve the exploratory program (plain value program when ``xi`` is zero).

        The first solve after ``reset`` starts cold; later ones start from the previous
        policy solution shifted by one step.

        When the solve fails, ``u0`` is the first input of the last feasible iterate: the
        final iterate if its primal residual is within the solver tolerance, otherwise the
        previous successful plan shifted by one step, otherwise the final iterate clipped
        into the action box. ``fallback`` records which one was used.

        Returns
        -------
        MpcOutcome
            The outcome; ``u0`` is the action to apply.
        """
        prev_z = None if self._previous is None else self._previous.solution.z
        outcome = self._solve("exploratory", theta, s, t, hidden=hidden, xi=xi, prev_z=prev_z, shift=True)
        if outcome.success:
            self._previous = outcome
            return outcome

        primal = outcome.solution.kkt.get("primal", np.inf)
        if np.isfinite(outcome.value) and primal <= self.cfg.solver.tol:
            outcome.fallback = "final_iterate"
        elif self._previous is not None:
            plan = self.templates["exploratory"].spec.block(self._previous.solution.z, "U")
            bound = self.world.action_bound
            outcome.u0 = np.clip(plan[min(1, len(plan) - 1)], -bound, bound)
            outcome.fallback = "previous_plan"
        else:
            outcome.fallback = "clipped_iterate"
        logger.info(f"Policy solve failed at t={t}; applying the {outcome.fallback.replace('_', ' ')} input.")
        return outcome

    def solve_value(self, theta, s, t=0, hidden=None, start=None, shift=False):
        """Solve V(s), optionally starting from another outcome."""
        prev_z = None if start is None else start.solution.z
        return self._solve("value", theta, s, t, hidden=hidden, prev_z=prev_z, shift=shift)

    def solve_action_value(self, theta, s, a, t=0, hidden=None, start=None):
        """Solve Q(s, a), optionally starting from another outcome at the same state."""
        prev_z = None if start is None else start.solution.z
        return self._solve("action_value", theta, s, t, hidden=hidden, a=a, prev_z=prev_z)

    def value_gradient(self, outcome):
        """The theta-gradient of an outcome's optimal value.

        Returns
        -------
        ValueGradient
            The gradient and the degeneracy flag.
        """
        return self.solvers[outcome.kind].value_gradient(outcome.params, outcome.solution)
