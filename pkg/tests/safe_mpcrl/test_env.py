import numpy as np
import numpy.testing as npt
import pytest

from safe_mpcrl import barrier
from safe_mpcrl.env import (
    DoubleIntegrator,
    LinearMotion,
    Obstacle,
    ObstacleAvoidanceEnv,
    StageCostWeights,
    Trajectory,
    World,
    barrier_value,
    forecast_centers,
    obstacle_center_at,
    obstacle_direction_at,
    rollout_cost,
    stage_cost,
    step,
)


def test_step():
    """Check the zero-order-hold double integrator update."""
    plant = DoubleIntegrator(0.2)
    npt.assert_allclose(step(plant, [0.0, 0.0, 1.0, 0.0], [0.0, 0.0]), [0.2, 0.0, 1.0, 0.0])
    npt.assert_allclose(step(plant, [1.0, 1.0, 0.0, 0.0], [1.0, 1.0]), [1.02, 1.02, 0.2, 0.2])
    npt.assert_array_equal(step(plant, np.zeros(4), np.zeros(2)), np.zeros(4))

    # The matrices are the exact discretization.
    npt.assert_allclose(plant.B[:2, :], 0.02 * np.eye(2))
    npt.assert_allclose(plant.A[:2, 2:], 0.2 * np.eye(2))


def test_step_errors():
    """Check that bad inputs are rejected."""
    plant = DoubleIntegrator(0.2)
    with pytest.raises(ValueError):
        step(plant, [0.0, np.nan, 0.0, 0.0], [0.0, 0.0])
    with pytest.raises(ValueError):
        step(plant, [0.0, 0.0, 0.0], [0.0, 0.0])
    with pytest.raises(ValueError):
        step(plant, np.zeros(4), [np.inf, 0.0])
    with pytest.raises(ValueError):
        DoubleIntegrator(0.0)


def test_obstacle_center_at():
    """Check static and reflecting obstacle motion."""
    static = Obstacle(2.0, 2.25, 1.5)
    assert obstacle_center_at(static, 0) == (2.0, 2.25)
    assert obstacle_center_at(static, 57) == (2.0, 2.25)
    assert static.is_static
    assert obstacle_direction_at(static, 3) == 0

    moving = Obstacle(-4.0, -1.5, 0.7, LinearMotion(-4.0, 0.0, speed=0.2, direction=1))
    assert obstacle_center_at(moving, 0) == (-4.0, -1.5)
    cx, cy = obstacle_center_at(moving, 20)
    assert cx == pytest.approx(0.0, abs=1e-12)
    assert cy == -1.5
    assert obstacle_direction_at(moving, 20) == -1

    # Halfway back after another 10 steps, then back at the start.
    assert obstacle_center_at(moving, 30)[0] == pytest.approx(-2.0, abs=1e-12)
    assert obstacle_center_at(moving, 40)[0] == pytest.approx(-4.0, abs=1e-12)
    assert obstacle_direction_at(moving, 5) == 1

    # Starting leftwards from the right end.
    leftwards = Obstacle(0.0, 1.0, 0.5, LinearMotion(-4.0, 0.0, speed=0.2, direction=-1))
    assert obstacle_center_at(leftwards, 5)[0] == pytest.approx(-1.0, abs=1e-12)

    with pytest.raises(ValueError):
        obstacle_center_at(moving, -1)


def test_obstacle_errors():
    """Check obstacle validation."""
    with pytest.raises(ValueError):
        Obstacle(0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        Obstacle(5.0, 0.0, 1.0, LinearMotion(-4.0, 0.0))
    with pytest.raises(ValueError):
        LinearMotion(1.0, 1.0)
    with pytest.raises(ValueError):
        LinearMotion(0.0, 1.0, direction=2)
    with pytest.raises(ValueError):
        World(DoubleIntegrator(), ())


def test_forecast_centers(dynamic_world):
    """Check the shape and content of the center forecast."""
    centers = forecast_centers(dynamic_world, 0, 6)
    assert centers.shape == (7, 3, 2)
    npt.assert_allclose(centers[:, 0, :], np.tile([-2.0, 0.0], (7, 1)))
    npt.assert_allclose(centers[:, 1, 0], -4.0 + 0.2 * np.arange(7), atol=1e-12)
    npt.assert_allclose(centers[3, 2], obstacle_center_at(dynamic_world.obstacles[2], 3))


def test_stage_cost():
    """Check the quadratic stage cost."""
    w = StageCostWeights()
    assert stage_cost(w, np.zeros(4), np.zeros(2)) == 0.0
    assert stage_cost(w, [1.0, 0.0, 0.0, 0.0], [0.0, 0.0]) == pytest.approx(10.0)
    assert stage_cost(w, [-5.0, -5.0, 0.0, 0.0], [1.0, 1.0]) == pytest.approx(502.0)

    w2 = StageCostWeights.from_diagonals([1.0, 2.0, 0.0, 0.0], [3.0, 3.0])
    assert stage_cost(w2, [1.0, 1.0, 5.0, 5.0], [1.0, 0.0]) == pytest.approx(6.0)

    with pytest.raises(ValueError):
        StageCostWeights(R=np.zeros((2, 2)))
    with pytest.raises(ValueError):
        StageCostWeights(Q=np.eye(3))


def test_rollout_cost():
    """Check the discounted cumulative cost."""
    w = StageCostWeights()
    assert rollout_cost([(np.zeros(4), np.zeros(2))], w) == 0.0
    assert rollout_cost([1.0, 1.0]) == pytest.approx(2.0)
    assert rollout_cost([1.0, 1.0], zeta=0.5) == pytest.approx(1.5)

    with pytest.raises(ValueError):
        rollout_cost([])
    with pytest.raises(ValueError):
        rollout_cost([(np.zeros(4), np.zeros(2))])


def test_trajectory(static_world):
    """Check the episode bookkeeping."""
    w = StageCostWeights()
    env = ObstacleAvoidanceEnv(static_world, w, start_state=[1.0, 0.0, 0.0, 0.0], episode_length=5)
    s, info = env.reset()
    traj = Trajectory(s, info["h"])
    assert len(traj) == 0
    assert traj.cumulative_cost(w) == 0.0

    s_next, _, _, _, info = env.step([0.0, 0.0])
    traj.append([0.0, 0.0], s_next, info["h"], [0.9], 0.0)
    assert len(traj) == 1
    assert traj.cumulative_cost(w) == pytest.approx(10.0)
    assert traj.violations() == 0
    assert traj.min_barrier() == pytest.approx((1.0 - 2.0) ** 2 + 2.25**2 - 2.25)


def test_env_step(static_world):
    """Check the gymnasium wrapper."""
    w = StageCostWeights()
    env = ObstacleAvoidanceEnv(static_world, w, episode_length=2)
    s, info = env.reset(seed=3)
    npt.assert_array_equal(s, [-5.0, -5.0, 0.0, 0.0])
    assert info["t"] == 0
    npt.assert_allclose(info["h"], [99.3125])

    s, reward, terminated, truncated, info = env.step([1.0, 1.0])
    assert reward == pytest.approx(-502.0)
    assert info["cost"] == pytest.approx(502.0)
    assert not terminated
    assert not truncated
    npt.assert_allclose(s, [-4.98, -4.98, 0.2, 0.2])

    _, _, terminated, truncated, info = env.step([0.0, 0.0])
    assert info["t"] == 2
    assert not terminated
    assert truncated
    assert env.action_space.contains(np.array([1.0, -1.0]))


def test_env_barrier_values(dynamic_world):
    """Check that the environment and the barrier module agree on every obstacle."""
    assert barrier.barrier_value is barrier_value
    assert barrier_value(0.5, 2.25, 2.0, 2.25, 1.5) == 0.0

    env = ObstacleAvoidanceEnv(dynamic_world, StageCostWeights(), episode_length=10)
    rng = np.random.default_rng(2)
    for t in (0, 3, 17):
        s = np.concatenate([rng.uniform(-5.0, 5.0, 2), rng.uniform(-1.0, 1.0, 2)])
        npt.assert_allclose(env.barrier_values(s, t), barrier.barrier_values(dynamic_world, s, t), rtol=1e-12)
