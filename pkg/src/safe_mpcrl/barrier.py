"""Barrier functions, discrete CBF residuals and the decay parametrizations.

The helpers here work on plain floats, numpy arrays and casadi symbols alike, so the
numeric checks and the constraints inside the MPC problems share one definition.
"""

from dataclasses import dataclass

import numpy as np

from safe_mpcrl.env import barrier_value, obstacle_center_at, state_vec

# Lower bound standing in for the strict bound omega > 0.
EPS_OMEGA = 1e-6


def cbf_condition(h_now, h_next, decay, slack=0.0):
    """The discrete CBF residual ``h_next - (1 - decay) h_now + slack``.

    The constraint is satisfied when the residual is non-negative.
    """
    return h_next - (1.0 - decay) * h_now + slack


@dataclass(frozen=True)
class BarrierFn:
    """The barrier function of a single obstacle.

    Attributes
    ----------
    obstacle : Obstacle
        The obstacle whose exterior is the safe set.
    """

    obstacle: object

    def __call__(self, s, t=0):
        return h_eval(self, s, t)


def h_eval(b, s, t=0):
    """Evaluate the barrier at state ``s`` and step ``t``.

    Parameters
    ----------
    b : BarrierFn
        The barrier.
    s : array_like
        The state (only the position entries are used).
    t : int
        The step index, used to locate moving obstacles.

    Returns
    -------
    float
        The barrier value.

    Examples
    --------
    >>> from safe_mpcrl.env import Obstacle
    >>> b = BarrierFn(Obstacle(2.0, 2.25, 1.5))
    >>> h_eval(b, [-5.0, -5.0, 0.0, 0.0])
    99.3125
    """
    s = state_vec(s)
    cx, cy = obstacle_center_at(b.obstacle, t)
    return float(barrier_value(s[0], s[1], cx, cy, b.obstacle.radius))


def h_gradient(b, s, t=0):
    """The gradient of ``h_eval`` with respect to the full state.

    Returns
    -------
    numpy.ndarray
        ``(2 (px - cx), 2 (py - cy), 0, 0)``.
    """
    s = state_vec(s)
    cx, cy = obstacle_center_at(b.obstacle, t)
    return np.array([2.0 * (s[0] - cx), 2.0 * (s[1] - cy), 0.0, 0.0])


def cbf_residual(b, x_k, x_k1, decay, slack=0.0, t=0):
    """The CBF residual of one predicted transition ``x_k -> x_k1``.

    Parameters
    ----------
    b : BarrierFn
        The barrier.
    x_k, x_k1 : array_like
        The states at absolute steps ``t`` and ``t + 1``.
    decay : float
        The decay rate (gamma or omega).
    slack : float
        The non-negative slack.
    t : int
        The absolute step of ``x_k``.

    Returns
    -------
    float
        ``h(x_k1, t+1) - (1 - decay) h(x_k, t) + slack``; the constraint holds when >= 0.
    """
    if slack < 0.0:
        raise ValueError(f"The slack must be non-negative, got {slack}.")
    return cbf_condition(h_eval(b, x_k, t), h_eval(b, x_k1, t + 1), decay, slack)


@dataclass(frozen=True)
class DecayParamsLOD:
    """Learnable references and penalty weights of the optimal-decay CBF.

    Attributes
    ----------
    omega_bar : numpy.ndarray
        The reference decays, shape (N, num_obstacles).
    p_omega : numpy.ndarray
        The penalty weights (non-negative), shape (N, num_obstacles).
    """

    omega_bar: np.ndarray
    p_omega: np.ndarray

    def __post_init__(self):
        omega_bar = np.atleast_2d(np.asarray(self.omega_bar, dtype=float))
        p_omega = np.atleast_2d(np.asarray(self.p_omega, dtype=float))
        if omega_bar.shape != p_omega.shape:
            raise ValueError(f"Shape mismatch: omega_bar {omega_bar.shape} vs p_omega {p_omega.shape}.")
        if np.any(p_omega < 0.0):
            raise ValueError("The decay penalty weights must be non-negative.")
        object.__setattr__(self, "omega_bar", omega_bar)
        object.__setattr__(self, "p_omega", p_omega)

    @property
    def shape(self):
        """The (horizon, num_obstacles) shape."""
        return self.omega_bar.shape


@dataclass(frozen=True)
class DecayVarsLOD:
    """Decay decision values of the optimal-decay CBF.

    Attributes
    ----------
    omega : numpy.ndarray
        The decays in (0, 1], shape (N, num_obstacles).
    """

    omega: np.ndarray

    def __post_init__(self):
        omega = np.atleast_2d(np.asarray(self.omega, dtype=float))
        if np.any(omega < EPS_OMEGA) or np.any(omega > 1.0):
            raise ValueError(f"Decays must lie in [{EPS_OMEGA}, 1], got {omega}.")
        object.__setattr__(self, "omega", omega)


def decay_penalty(p, v):
    """The decay penalty ``sum_k sum_i P (omega - omega_bar)^2``.

    Parameters
    ----------
    p : DecayParamsLOD
        The references and weights.
    v : DecayVarsLOD
        The decays.

    Returns
    -------
    float
        The penalty (non-negative).

    Examples
    --------
    >>> decay_penalty(DecayParamsLOD([[0.5]], [[0.4]]), DecayVarsLOD([[1.0]]))
    0.1
    """
    if p.shape != v.omega.shape:
        raise ValueError(f"Dimension mismatch: parameters {p.shape} vs decays {v.omega.shape}.")
    return float(np.sum(p.p_omega * (v.omega - p.omega_bar) ** 2))


def context_from_centers(px, centers, moving):
    """The network context scalars at one prediction step.

    Parameters
    ----------
    px : float or casadi.SX
        The (predicted) x-position.
    centers : sequence
        The forecast ``(cx, cy)`` of every obstacle at that step.
    moving : sequence of bool
        Which obstacles move.

    Returns
    -------
    list
        The signed x-distance ``px - cx`` for moving obstacles, 0 for static ones.
    """
    return [px - c[0] if is_moving else 0.0 * px for c, is_moving in zip(centers, moving)]


def context_values(world, s, t=0):
    """The network context of every obstacle at state ``s`` and step ``t``."""
    s = state_vec(s)
    centers = [obstacle_center_at(ob, t) for ob in world.obstacles]
    moving = [not ob.is_static for ob in world.obstacles]
    return np.array(context_from_centers(s[0], centers, moving), dtype=float)


def barrier_values(world, s, t=0):
    """The barrier value of every obstacle in the world."""
    return np.array([h_eval(BarrierFn(ob), s, t) for ob in world.obstacles])
