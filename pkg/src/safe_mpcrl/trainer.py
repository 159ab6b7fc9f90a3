"""Q-learning of the MPC parameters: exploration, TD errors, buffered gradients and AdamQP."""

from dataclasses import dataclass, field
from functools import lru_cache
import logging
import time

import casadi as cs
import numpy as np

from safe_mpcrl.bundle_utils import NdjsonWriter
from safe_mpcrl.env import ObstacleAvoidanceEnv, Trajectory, stage_cost
from safe_mpcrl.mpc import CbfMpc

logger = logging.getLogger(__name__)


def td_error(cost, zeta, v_next, q_cur):
    """The temporal-difference error ``cost + zeta * v_next - q_cur``.

    Examples
    --------
    >>> td_error(0.0, 1.0, 5.0, 3.0)
    2.0
    """
    return float(cost + zeta * v_next - q_cur)


def augment_cost(cost, slack, w_rl):
    """Add the slack penalty ``w_rl * sum(slack)`` to a stage cost.

    Parameters
    ----------
    cost : float
        The stage cost L(s, a).
    slack : array_like
        The optimal CBF slacks of the MPC solve behind ``a`` (non-negative).
    w_rl : float
        The penalty weight.

    Returns
    -------
    float
        The augmented stage cost.
    """
    slack = np.asarray(slack, dtype=float)
    if np.any(slack < 0.0):
        raise ValueError("Slacks must be non-negative.")
    return float(cost + w_rl * np.sum(slack))


@dataclass
class Transition:
    """One environment step as seen by the learner.

    Attributes
    ----------
    s, a, s_next : numpy.ndarray
        The state, applied action and next state.
    cost : float
        The augmented stage cost.
    q : float
        Q(s, a).
    v_next : float
        V(s_next).
    td : float
        The TD error.
    grad : numpy.ndarray
        The parameter gradient ``-td * dQ/dtheta``.
    """

    s: np.ndarray
    a: np.ndarray
    cost: float
    s_next: np.ndarray
    q: float
    v_next: float
    td: float
    grad: np.ndarray


class GradBuffer:
    """A fixed-capacity buffer of per-transition gradients.

    Parameters
    ----------
    capacity : int
        The number of gradients averaged per update.
    """

    def __init__(self, capacity):
        if capacity < 1:
            raise ValueError(f"The buffer capacity must be at least 1, got {capacity}.")
        self.capacity = int(capacity)
        self._grads = []

    def __len__(self):
        return len(self._grads)

    @property
    def is_full(self):
        """Whether an update may fire."""
        return len(self._grads) == self.capacity

    def add(self, grad):
        """Store one gradient.

        Raises
        ------
        ValueError
            If the buffer is already full. A full buffer has to be drained by
            :func:`buffered_update` first.
        """
        if self.is_full:
            raise ValueError(f"The gradient buffer is full ({self.capacity} entries); update first.")
        self._grads.append(np.asarray(grad, dtype=float).copy())

    def mean(self):
        """The averaged gradient."""
        if len(self._grads) == 0:
            raise ValueError("Cannot average an empty gradient buffer.")
        return np.mean(np.vstack(self._grads), axis=0)

    def clear(self):
        """Drop every stored gradient."""
        self._grads.clear()


@dataclass
class AdamState:
    """The running moments of Adam.

    Attributes
    ----------
    m, v : numpy.ndarray
        The first and second moment estimates.
    step : int
        The number of steps taken.
    lr : float
        The learning rate.
    beta1, beta2 : float
        The moment decay rates.
    eps : float
        The denominator floor.
    """

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        """A fresh state for ``n`` parameters."""
        return cls(m=np.zeros(n), v=np.zeros(n), lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def candidate_step(self, grad):
        """Advance the moments and return the unprojected step.

        Parameters
        ----------
        grad : numpy.ndarray
            The averaged gradient.

        Returns
        -------
        numpy.ndarray
            The step to add to theta.
        """
        grad = np.asarray(grad, dtype=float)
        if grad.shape != self.m.shape:
            raise ValueError(f"Gradient shape {grad.shape} does not match the Adam state {self.m.shape}.")
        self.step += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad**2
        m_hat = self.m / (1.0 - self.beta1**self.step)
        v_hat = self.v / (1.0 - self.beta2**self.step)
        return -self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@lru_cache(maxsize=8)
def _projection_qp(n):
    d = cs.SX.sym("d", n)
    target = cs.SX.sym("target", n)
    qp = {"x": d, "p": target, "f": cs.sumsqr(d - target)}
    opts = {"print_time": False, "error_on_fail": False, "print_iter": False, "print_header": False}
    return cs.qpsol("adam_projection", "qrqp", qp, opts)


def project_step(theta, step, lower, upper):
    """Project a parameter step onto the bounds.

    Solves ``min ||d - step||^2`` subject to ``lower <= theta + d <= upper``.

    Returns
    -------
    numpy.ndarray
        The applied step.
    """
    theta = np.asarray(theta, dtype=float)
    step = np.asarray(step, dtype=float)
    if np.all(theta + step >= lower) and np.all(theta + step <= upper):
        return step

    result = _projection_qp(theta.shape[0])(x0=step, p=step, lbx=lower - theta, ubx=upper - theta)
    d = np.asarray(result["x"].full()).reshape(-1)
    return np.clip(theta + d, lower, upper) - theta


def buffered_update(buf, adam, theta):
    """Apply one AdamQP update from a full buffer.

    Parameters
    ----------
    buf : GradBuffer
        The buffer (cleared afterwards).
    adam : AdamState
        The optimizer state (advanced in place).
    theta : ThetaVector
        The current parameters.

    Returns
    -------
    ThetaVector
        The updated parameters, within bounds.
    """
    if not buf.is_full:
        raise ValueError(f"The buffer holds {len(buf)} of {buf.capacity} gradients.")
    flat = theta.flat()
    step = adam.candidate_step(buf.mean())
    applied = project_step(flat, step, theta.lower(), theta.upper())
    buf.clear()
    return theta.with_flat(flat + applied)


@dataclass(frozen=True)
class NoiseSchedule:
    """Gaussian exploration noise with a per-episode multiplicative decay.

    Attributes
    ----------
    std0 : float
        The initial standard deviation per input channel.
    decay : float
        The factor applied per episode.
    seed : int
        The random seed.
    """

    std0: float = 0.5
    decay: float = 0.99
    seed: int = 0

    def __post_init__(self):
        if self.std0 < 0.0:
            raise ValueError(f"The noise std must be non-negative, got {self.std0}.")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError(f"The noise decay must lie in (0, 1], got {self.decay}.")

    def std(self, episode):
        """The noise level at an episode."""
        return self.std0 * self.decay**episode

    def rng(self):
        """A fresh generator for this schedule."""
        return np.random.default_rng(self.seed)


@dataclass(frozen=True)
class TrainerConfig:
    """Settings of the Q-learning loop.

    Attributes
    ----------
    zeta : float
        The TD discount.
    w_rl : float
        The slack penalty of the augmented stage cost.
    learning_rate, beta1, beta2, eps_adam : float
        The Adam settings.
    buffer_capacity : int or None
        Gradients per update (one episode when None). The update fires on the step that
        fills the buffer, so a capacity below the episode length gives several updates per
        episode and a larger one carries gradients across episodes.
    n_episodes : int
        The number of training episodes.
    episode_length : int
        Steps per episode.
    start_state : tuple
        The initial state of every episode.
    noise : NoiseSchedule
        The exploration noise.
    failure_limit : int
        An episode is aborted once its solver failures exceed this count.
    log_path : str or None
        If given, one JSON record per episode is written to this file.
    """

    zeta: float = 0.99
    w_rl: float = 1e3
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    buffer_capacity: int | None = None
    n_episodes: int = 500
    episode_length: int = 60
    start_state: tuple = (-5.0, -5.0, 0.0, 0.0)
    noise: NoiseSchedule = field(default_factory=NoiseSchedule)
    failure_limit: int = 5
    log_path: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.zeta <= 1.0:
            raise ValueError(f"The discount must lie in [0, 1], got {self.zeta}.")
        if self.learning_rate < 0.0:
            raise ValueError(f"The learning rate must be non-negative, got {self.learning_rate}.")
        if self.episode_length < 1:
            raise ValueError(f"The episode length must be at least 1, got {self.episode_length}.")
        if self.n_episodes < 0:
            raise ValueError(f"The episode count must be non-negative, got {self.n_episodes}.")

    @property
    def capacity(self):
        """The effective buffer capacity."""
        return self.episode_length if self.buffer_capacity is None else self.buffer_capacity


@dataclass
class Rollout:
    """The result of one deterministic rollout.

    Attributes
    ----------
    trajectory : Trajectory
        The visited states and applied actions.
    cumulative_cost : float
        The undiscounted sum of stage costs.
    slack_total : float
        The summed optimal slack over all steps.
    failures : int
        The number of failed policy solves.
    """

    trajectory: Trajectory
    cumulative_cost: float
    slack_total: float
    failures: int


@dataclass
class TrainingResult:
    """Everything a training run produces.

    Attributes
    ----------
    records : list of dict
        One record per episode.
    theta : ThetaVector
        The final parameters.
    theta_trace : list of dict
        The parameters after each episode.
    final : Rollout or None
        The deterministic rollout with the final parameters.
    """

    records: list
    theta: object
    theta_trace: list = field(default_factory=list)
    final: Rollout | None = None

    @property
    def failure_rate(self):
        """Failed solves over attempted solves across all episodes."""
        solves = sum(rec["solves"] for rec in self.records)
        failures = sum(rec["failures"] for rec in self.records)
        return failures / solves if solves > 0 else 0.0


class QLearningTrainer:
    """Runs Q-learning with CBF-MPC value functions.

    Parameters
    ----------
    mpc_cfg : MpcConfig
        The MPC settings.
    world : World
        The task.
    cfg : TrainerConfig, optional
        The learning settings.
    """

    def __init__(self, mpc_cfg, world, cfg=None):
        self.cfg = TrainerConfig() if cfg is None else cfg
        self.mpc_cfg = mpc_cfg
        self.world = world
        self.weights = mpc_cfg.weights
        self.mpc = CbfMpc(mpc_cfg, world)
        self.env = ObstacleAvoidanceEnv(world, self.weights, self.cfg.start_state, self.cfg.episode_length)

    def run(self, theta0, n_episodes=None):
        """Train from ``theta0``.

        Parameters
        ----------
        theta0 : ThetaVector
            The initial parameters.
        n_episodes : int, optional
            Overrides the configured episode count.

        Returns
        -------
        TrainingResult
            The per-episode records, the final parameters and their rollout.
        """
        cfg = self.cfg
        n_episodes = cfg.n_episodes if n_episodes is None else n_episodes
        theta = theta0
        rng = cfg.noise.rng()
        buf = GradBuffer(cfg.capacity)
        adam = AdamState.zeros(len(theta), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps_adam)
        log = None if cfg.log_path is None else NdjsonWriter(cfg.log_path, truncate=True)

        records, trace = [], []
        for episode in range(n_episodes):
            started = time.perf_counter()
            record, theta = self._run_episode(episode, theta, rng, buf, adam)
            record["duration"] = time.perf_counter() - started
            records.append(record)
            trace.append({"episode": episode, **theta.values_record()})
            if log is not None:
                log.write(record)
            logger.info(
                f"episode {episode}: cost {record['cumulative_cost']:.1f}, "
                f"slack {record['slack_total']:.3g}, "
                f"min h {record['min_h']:.3g}, failures {record['failures']}, updates {record['updates']}"
            )

        final = self.evaluate(theta) if n_episodes > 0 else None
        return TrainingResult(records=records, theta=theta, theta_trace=trace, final=final)

    def _run_episode(self, episode, theta, rng, buf, adam):
        cfg = self.cfg
        s, info = self.env.reset()
        self.mpc.reset()
        hidden = self.mpc.initial_hidden()
        trajectory = Trajectory(s, info["h"])
        std = cfg.noise.std(episode)

        failures, solves, updates = 0, 0, 0
        tds = []
        aborted = False
        for t in range(cfg.episode_length):
            xi = rng.normal(0.0, std, size=2)
            policy = self.mpc.solve_policy(theta, s, t, hidden=hidden, xi=xi)
            solves += 1
            a = policy.u0
            cost = stage_cost(self.weights, s, a)
            s_next, _, _, truncated, info = self.env.step(a)
            trajectory.append(a, s_next, info["h"], policy.decays, policy.slack_total)

            if policy.success:
                transition = self._transition(theta, s, a, t, hidden, policy, s_next, cost)
                solves += 2
                if transition is None:
                    failures += 1
                else:
                    buf.add(transition.grad)
                    tds.append(transition.td)
                    if buf.is_full:
                        theta = buffered_update(buf, adam, theta)
                        updates += 1
            else:
                failures += 1

            if failures > cfg.failure_limit:
                logger.warning(f"episode {episode}: aborted at t={t} after {failures} solver failures.")
                aborted = True
                break
            hidden = policy.hidden_next
            s = s_next
            if truncated:
                break

        slack_total = float(np.sum(trajectory.slack_totals))
        record = {
            "episode": episode,
            "cumulative_cost": trajectory.cumulative_cost(self.weights),
            "slack_total": slack_total,
            "slack_penalty": cfg.w_rl * slack_total,
            "min_h": trajectory.min_barrier(),
            "violations": trajectory.violations(),
            "failures": failures,
            "solves": solves,
            "mean_abs_td": float(np.mean(np.abs(tds))) if len(tds) > 0 else 0.0,
            "transitions": len(tds),
            "updates": updates,
            "noise_std": std,
            "steps": len(trajectory),
            "aborted": aborted,
        }
        return record, theta

    def _transition(self, theta, s, a, t, hidden, policy, s_next, cost):
        """Solve Q(s, a) and V(s_next) and form the gradient sample (None on failure)."""
        q = self.mpc.solve_action_value(theta, s, a, t, hidden=hidden, start=policy)
        if not q.success:
            return None
        v = self.mpc.solve_value(theta, s_next, t + 1, hidden=policy.hidden_next, start=policy, shift=True)
        if not v.success:
            return None

        augmented = augment_cost(cost, policy.slack, self.cfg.w_rl)
        tau = td_error(augmented, self.cfg.zeta, v.value, q.value)
        grad_q = self.mpc.value_gradient(q).grad
        return Transition(
            s=np.asarray(s),
            a=a,
            cost=augmented,
            s_next=s_next,
            q=q.value,
            v_next=v.value,
            td=tau,
            grad=-tau * grad_q,
        )

    def evaluate(self, theta, episode_length=None):
        """Roll out the noise-free policy.

        Parameters
        ----------
        theta : ThetaVector
            The parameters.
        episode_length : int, optional
            Overrides the configured episode length.

        Returns
        -------
        Rollout
            The trajectory and its cost.
        """
        steps = self.cfg.episode_length if episode_length is None else episode_length
        s, info = self.env.reset()
        self.mpc.reset()
        hidden = self.mpc.initial_hidden()
        trajectory = Trajectory(s, info["h"])

        failures = 0
        for t in range(steps):
            policy = self.mpc.solve_policy(theta, s, t, hidden=hidden)
            if not policy.success:
                failures += 1
            s, _, _, _, info = self.env.step(policy.u0)
            trajectory.append(policy.u0, s, info["h"], policy.decays, policy.slack_total)
            hidden = policy.hidden_next

        return Rollout(
            trajectory=trajectory,
            cumulative_cost=trajectory.cumulative_cost(self.weights),
            slack_total=float(np.sum(trajectory.slack_totals)),
            failures=failures,
        )


def run_training(mpc_cfg, world, theta0, cfg=None, n_episodes=None):
    """Train with a fresh QLearningTrainer (see ``QLearningTrainer.run``)."""
    return QLearningTrainer(mpc_cfg, world, cfg).run(theta0, n_episodes=n_episodes)
