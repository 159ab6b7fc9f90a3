"""The plant, the obstacle world, the RL stage cost and episode bookkeeping.

States are 4-vectors ``(px, py, vx, vy)`` and actions are 2-vectors ``(ax, ay)``;
both are plain numpy arrays. The plant is a discrete double integrator obtained
by exact zero-order-hold discretization.
"""

from dataclasses import dataclass, field
import logging

import gymnasium as gym
import numpy as np

logger = logging.getLogger(__name__)

NUM_STATES = 4
NUM_INPUTS = 2


def _as_vector(values, size, name):
    """Convert the input into a finite float vector of the given size."""
    vec = np.asarray(values, dtype=float).reshape(-1)
    if vec.shape[0] != size:
        raise ValueError(f"{name} must have {size} entries, got {vec.shape[0]}.")
    if not np.all(np.isfinite(vec)):
        raise ValueError(f"{name} contains non-finite entries: {vec}")
    return vec


def state_vec(values):
    """Validate and return a state vector ``(px, py, vx, vy)``.

    Parameters
    ----------
    values : array_like
        The four state entries.

    Returns
    -------
    numpy.ndarray
        A float array of shape (4,).
    """
    return _as_vector(values, NUM_STATES, "state")


def action_vec(values):
    """Validate and return an action vector ``(ax, ay)``."""
    return _as_vector(values, NUM_INPUTS, "action")


def within_bounds(vec, bound):
    """Return True if the max-norm of ``vec`` is at most ``bound``."""
    return bool(np.max(np.abs(vec)) <= bound)


@dataclass(frozen=True)
class DoubleIntegrator:
    """A 2D double integrator discretized with a zero-order hold.

    Attributes
    ----------
    dt : float
        The sample time in seconds.
    """

    dt: float = 0.2

    def __post_init__(self):
        if not self.dt > 0.0:
            raise ValueError(f"The sample time must be positive, got {self.dt}.")

    @property
    def A(self):  # noqa: N802
        """The 4x4 state matrix."""
        dt = self.dt
        return np.array(
            [
                [1.0, 0.0, dt, 0.0],
                [0.0, 1.0, 0.0, dt],
                [0.0, 0.0, 1.0, 0.0],
                [0.0, 0.0, 0.0, 1.0],
            ]
        )

    @property
    def B(self):  # noqa: N802
        """The 4x2 input matrix."""
        dt = self.dt
        half = 0.5 * dt * dt
        return np.array(
            [
                [half, 0.0],
                [0.0, half],
                [dt, 0.0],
                [0.0, dt],
            ]
        )


def step(plant, s, a):
    """Advance the plant by one sample.

    The action is not clipped; keeping it within the action box is the caller's job.

    Parameters
    ----------
    plant : DoubleIntegrator
        The plant.
    s : array_like
        The current state.
    a : array_like
        The applied action.

    Returns
    -------
    numpy.ndarray
        The next state ``A s + B a``.

    Examples
    --------
    >>> step(DoubleIntegrator(0.2), [1.0, 1.0, 0.0, 0.0], [1.0, 1.0]).round(12).tolist()
    [1.02, 1.02, 0.2, 0.2]
    """
    s = state_vec(s)
    a = action_vec(a)
    return plant.A @ s + plant.B @ a


@dataclass(frozen=True)
class LinearMotion:
    """Back-and-forth horizontal motion along a segment.

    Attributes
    ----------
    x_min, x_max : float
        The segment endpoints. The obstacle reflects at both.
    speed : float
        The distance traveled per step [m].
    direction : int
        The initial direction of travel, +1 (towards ``x_max``) or -1.
    """

    x_min: float
    x_max: float
    speed: float = 0.2
    direction: int = 1

    def __post_init__(self):
        if not self.x_max > self.x_min:
            raise ValueError(f"Empty motion segment [{self.x_min}, {self.x_max}].")
        if self.speed < 0.0:
            raise ValueError(f"The speed must be non-negative, got {self.speed}.")
        if self.direction not in (1, -1):
            raise ValueError(f"The direction must be +1 or -1, got {self.direction}.")


@dataclass(frozen=True)
class Obstacle:
    """A circular obstacle, optionally moving.

    Attributes
    ----------
    cx0, cy0 : float
        The center at step 0.
    radius : float
        The radius (strictly positive).
    motion : LinearMotion or None
        The motion law. None for a static obstacle.
    """

    cx0: float
    cy0: float
    radius: float
    motion: LinearMotion | None = None

    def __post_init__(self):
        if not self.radius > 0.0:
            raise ValueError(f"The obstacle radius must be positive, got {self.radius}.")
        if self.motion is not None and not (self.motion.x_min <= self.cx0 <= self.motion.x_max):
            raise ValueError(
                f"Initial center {self.cx0} is outside the motion segment "
                f"[{self.motion.x_min}, {self.motion.x_max}]."
            )

    @property
    def is_static(self):
        """Whether the obstacle never moves."""
        return self.motion is None or self.motion.speed == 0.0


def _unfolded_position(ob, t):
    """Position along the unfolded (length 2L) reflection cycle after t steps."""
    motion = ob.motion
    length = motion.x_max - motion.x_min
    offset = ob.cx0 - motion.x_min
    if motion.direction < 0:
        offset = 2.0 * length - offset
    return (offset + motion.speed * t) % (2.0 * length), length


def obstacle_center_at(ob, t):
    """Return the obstacle center after ``t`` steps.

    Moving obstacles travel at constant speed and reflect at the segment endpoints.

    Parameters
    ----------
    ob : Obstacle
        The obstacle.
    t : int
        The step index (t >= 0).

    Returns
    -------
    tuple of float
        The center ``(cx, cy)``.

    Examples
    --------
    >>> ob = Obstacle(-4.0, -1.5, 0.7, LinearMotion(-4.0, 0.0, speed=0.2))
    >>> obstacle_center_at(ob, 20)
    (0.0, -1.5)
    """
    if t < 0:
        raise ValueError(f"The step index must be non-negative, got {t}.")
    if ob.is_static:
        return (float(ob.cx0), float(ob.cy0))

    u, length = _unfolded_position(ob, t)
    cx = ob.motion.x_min + (u if u <= length else 2.0 * length - u)
    cx = min(max(cx, ob.motion.x_min), ob.motion.x_max)
    return (float(cx), float(ob.cy0))


def barrier_value(px, py, cx, cy, radius):
    """The signed squared-distance margin of a point to a disk.

    Parameters
    ----------
    px, py : float, numpy.ndarray or casadi.SX
        The point.
    cx, cy : float, numpy.ndarray or casadi.SX
        The disk center.
    radius : float
        The disk radius.

    Returns
    -------
    float, numpy.ndarray or casadi.SX
        ``(px - cx)^2 + (py - cy)^2 - radius^2``; positive outside the disk.
    """
    return (px - cx) ** 2 + (py - cy) ** 2 - radius**2


def obstacle_direction_at(ob, t):
    """Return the travel direction after ``t`` steps: +1, -1, or 0 for static obstacles."""
    if ob.is_static:
        return 0
    u, length = _unfolded_position(ob, t)
    return 1 if u < length else -1


@dataclass(frozen=True)
class World:
    """The obstacle-avoidance task.

    Attributes
    ----------
    plant : DoubleIntegrator
        The plant.
    obstacles : tuple of Obstacle
        At least one obstacle.
    state_bound : float
        The state box is ``|s|_inf <= state_bound``.
    action_bound : float
        The action box is ``|a|_inf <= action_bound``.
    """

    plant: DoubleIntegrator
    obstacles: tuple
    state_bound: float = 5.0
    action_bound: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        if len(self.obstacles) < 1:
            raise ValueError("A world needs at least one obstacle.")

    @property
    def num_obstacles(self):
        """The number of obstacles."""
        return len(self.obstacles)

    @property
    def goal(self):
        """The goal state (the origin)."""
        return np.zeros(NUM_STATES)


def forecast_centers(world, t, n):
    """Return the centers of every obstacle at steps t, ..., t+n.

    Returns
    -------
    numpy.ndarray
        An array of shape (n + 1, num_obstacles, 2).
    """
    centers = np.zeros((n + 1, world.num_obstacles, 2))
    for k in range(n + 1):
        for i, ob in enumerate(world.obstacles):
            centers[k, i, :] = obstacle_center_at(ob, t + k)
    return centers


@dataclass(frozen=True)
class StageCostWeights:
    """Quadratic stage cost weights.

    Attributes
    ----------
    Q : numpy.ndarray
        The 4x4 state weight (symmetric, positive semidefinite).
    R : numpy.ndarray
        The 2x2 input weight (symmetric, positive definite).
    """

    Q: np.ndarray = field(default_factory=lambda: 10.0 * np.eye(NUM_STATES))
    R: np.ndarray = field(default_factory=lambda: np.eye(NUM_INPUTS))

    def __post_init__(self):
        q_mat = np.asarray(self.Q, dtype=float)
        r_mat = np.asarray(self.R, dtype=float)
        if q_mat.shape != (NUM_STATES, NUM_STATES) or r_mat.shape != (NUM_INPUTS, NUM_INPUTS):
            raise ValueError(f"Bad weight shapes: Q {q_mat.shape}, R {r_mat.shape}.")
        if not (np.allclose(q_mat, q_mat.T) and np.allclose(r_mat, r_mat.T)):
            raise ValueError("The stage cost weights must be symmetric.")
        if np.min(np.linalg.eigvalsh(q_mat)) < -1e-12:
            raise ValueError("Q must be positive semidefinite.")
        if np.min(np.linalg.eigvalsh(r_mat)) <= 0.0:
            raise ValueError("R must be positive definite.")
        object.__setattr__(self, "Q", q_mat)
        object.__setattr__(self, "R", r_mat)

    @classmethod
    def from_diagonals(cls, q_diag, r_diag):
        """Create diagonal weights."""
        return cls(Q=np.diag(np.asarray(q_diag, dtype=float)), R=np.diag(np.asarray(r_diag, dtype=float)))


def stage_cost(w, s, a):
    """The RL stage cost ``s^T Q s + a^T R a``.

    Examples
    --------
    >>> stage_cost(StageCostWeights(), [-5.0, -5.0, 0.0, 0.0], [1.0, 1.0])
    502.0
    """
    s = state_vec(s)
    a = action_vec(a)
    return float(s @ w.Q @ s + a @ w.R @ a)


def rollout_cost(trace, weights=None, zeta=1.0):
    """The discounted sum of stage costs along a trace.

    Parameters
    ----------
    trace : list
        Either a list of ``(s, a)`` pairs or a list of precomputed stage costs.
    weights : StageCostWeights, optional
        Required when the trace holds ``(s, a)`` pairs.
    zeta : float
        The discount factor.

    Returns
    -------
    float
        ``sum_t zeta^t L(s_t, a_t)``.
    """
    if len(trace) == 0:
        raise ValueError("Cannot compute the cost of an empty trace.")

    total = 0.0
    for t, item in enumerate(trace):
        if np.isscalar(item):
            cost = float(item)
        else:
            if weights is None:
                raise ValueError("Stage cost weights are needed to evaluate (s, a) pairs.")
            cost = stage_cost(weights, item[0], item[1])
        total += zeta**t * cost
    return total


class Trajectory:
    """Per-step record of one episode.

    Attributes
    ----------
    states : list of numpy.ndarray
        The visited states, including the initial one.
    actions : list of numpy.ndarray
        The applied actions.
    h_values : list of numpy.ndarray
        The barrier values of every obstacle at each visited state.
    decays : list of numpy.ndarray
        The first-step decay rate of every obstacle used for each action.
    slack_totals : list of float
        The total optimal slack of the MPC solve behind each action.
    """

    def __init__(self, initial_state, h_initial):
        self.states = [state_vec(initial_state)]
        self.actions = []
        self.h_values = [np.asarray(h_initial, dtype=float)]
        self.decays = []
        self.slack_totals = []

    def __len__(self):
        return len(self.actions)

    def append(self, action, next_state, h_next, decays, slack_total):
        """Record one step.

        Parameters
        ----------
        action : array_like
            The applied action.
        next_state : array_like
            The resulting state.
        h_next : array_like
            The barrier values at the resulting state.
        decays : array_like
            The decay rates used to pick the action.
        slack_total : float
            The summed optimal slack.
        """
        self.actions.append(action_vec(action))
        self.states.append(state_vec(next_state))
        self.h_values.append(np.asarray(h_next, dtype=float))
        self.decays.append(np.asarray(decays, dtype=float))
        self.slack_totals.append(float(slack_total))

    def stage_costs(self, weights):
        """Return the stage cost of every recorded step."""
        return [stage_cost(weights, s, a) for s, a in zip(self.states[:-1], self.actions)]

    def cumulative_cost(self, weights, zeta=1.0):
        """Return the (discounted) cumulative stage cost, 0 for an empty trajectory."""
        costs = self.stage_costs(weights)
        return rollout_cost(costs, zeta=zeta) if len(costs) > 0 else 0.0

    def min_barrier(self):
        """Return min over t of min over obstacles of h_i(s_t)."""
        return float(np.min(np.vstack(self.h_values)))

    def violations(self):
        """Return the number of visited states inside an obstacle."""
        return int(np.sum(np.min(np.vstack(self.h_values), axis=1) < 0.0))


class ObstacleAvoidanceEnv(gym.Env):
    """A gymnasium environment around a World.

    The reward is the negative stage cost; the cost itself is in ``info["cost"]``.

    Parameters
    ----------
    world : World
        The task.
    weights : StageCostWeights
        The stage cost weights.
    start_state : array_like
        The state every episode starts from.
    episode_length : int
        The number of steps before truncation.
    """

    metadata = {"render_modes": []}

    def __init__(self, world, weights, start_state=(-5.0, -5.0, 0.0, 0.0), episode_length=60):
        super().__init__()
        self.world = world
        self.weights = weights
        self.start_state = state_vec(start_state)
        self.episode_length = int(episode_length)

        bound = world.action_bound
        self.action_space = gym.spaces.Box(low=-bound, high=bound, shape=(NUM_INPUTS,), dtype=np.float64)
        self.observation_space = gym.spaces.Box(
            low=-np.inf, high=np.inf, shape=(NUM_STATES,), dtype=np.float64
        )
        self.state = self.start_state.copy()
        self.t = 0

    def barrier_values(self, s=None, t=None):
        """Return the barrier value of every obstacle at state ``s`` and step ``t``."""
        s = self.state if s is None else state_vec(s)
        t = self.t if t is None else t
        values = []
        for ob in self.world.obstacles:
            cx, cy = obstacle_center_at(ob, t)
            values.append(barrier_value(s[0], s[1], cx, cy, ob.radius))
        return np.array(values)

    def reset(self, *, seed=None, options=None):
        """Reset to the start state at step 0."""
        super().reset(seed=seed)
        self.state = self.start_state.copy()
        self.t = 0
        return self.state.copy(), {"t": 0, "h": self.barrier_values()}

    def step(self, action):
        """Apply an action and advance one step."""
        action = action_vec(action)
        cost = stage_cost(self.weights, self.state, action)
        self.state = step(self.world.plant, self.state, action)
        self.t += 1

        info = {"t": self.t, "cost": cost, "h": self.barrier_values()}
        truncated = self.t >= self.episode_length
        return self.state.copy(), -cost, False, truncated, info
