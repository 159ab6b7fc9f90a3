import casadi as cs
import numpy as np
import numpy.testing as npt
import pytest

from safe_mpcrl.barrier import (
    BarrierFn,
    DecayParamsLOD,
    DecayVarsLOD,
    barrier_value,
    barrier_values,
    cbf_condition,
    cbf_residual,
    context_values,
    decay_penalty,
    h_eval,
    h_gradient,
)
from safe_mpcrl.env import LinearMotion, Obstacle


def test_h_eval():
    """Check the barrier at the center, on the boundary and far away."""
    b = BarrierFn(Obstacle(2.0, 2.25, 1.5))
    assert h_eval(b, [2.0, 2.25, 0.0, 0.0]) == pytest.approx(-2.25)
    assert h_eval(b, [0.5, 2.25, 3.0, -1.0]) == pytest.approx(0.0)
    assert h_eval(b, [-5.0, -5.0, 0.0, 0.0]) == pytest.approx(99.3125)
    assert b([-5.0, -5.0, 0.0, 0.0]) == h_eval(b, [-5.0, -5.0, 0.0, 0.0])


def test_h_eval_moving():
    """Check that the barrier follows a moving obstacle."""
    b = BarrierFn(Obstacle(-4.0, -1.5, 0.7, LinearMotion(-4.0, 0.0, 0.2)))
    assert h_eval(b, [-4.0, -1.5, 0.0, 0.0], t=0) == pytest.approx(-0.49)
    assert h_eval(b, [-4.0, -1.5, 0.0, 0.0], t=5) == pytest.approx(1.0 - 0.49)


def test_barrier_value_symbolic():
    """Check that the same helper builds casadi expressions."""
    px, py = cs.SX.sym("px"), cs.SX.sym("py")
    fn = cs.Function("h", [px, py], [barrier_value(px, py, 2.0, 2.25, 1.5)])
    assert float(fn(-5.0, -5.0)) == pytest.approx(99.3125)


def test_h_gradient():
    """Check the analytic gradient against central differences."""
    b = BarrierFn(Obstacle(2.0, 2.25, 1.5))
    s = np.array([0.3, -1.2, 0.5, 0.1])
    grad = h_gradient(b, s)
    fd = np.zeros(4)
    for i in range(4):
        e = np.zeros(4)
        e[i] = 1e-6
        fd[i] = (h_eval(b, s + e) - h_eval(b, s - e)) / 2e-6
    npt.assert_allclose(grad, fd, atol=1e-6)


def test_cbf_residual():
    """Check the discrete CBF residual."""
    assert cbf_condition(4.0, 3.0, 0.5) == pytest.approx(1.0)
    assert cbf_condition(4.0, 3.0, 1.0) == pytest.approx(3.0)

    b = BarrierFn(Obstacle(2.0, 2.25, 1.5))
    x = [-5.0, -5.0, 0.0, 0.0]
    # Decay zero on a stationary state is exactly feasible.
    assert cbf_residual(b, x, x, decay=0.0) == pytest.approx(0.0)
    # Decay one only asks for a safe next state.
    assert cbf_residual(b, x, x, decay=1.0) == pytest.approx(99.3125)
    assert cbf_residual(b, x, x, decay=0.0, slack=0.5) == pytest.approx(0.5)

    with pytest.raises(ValueError):
        cbf_residual(b, x, x, decay=0.5, slack=-1.0)


def test_decay_penalty():
    """Check the optimal-decay penalty."""
    p = DecayParamsLOD([[0.5]], [[0.4]])
    assert decay_penalty(p, DecayVarsLOD([[1.0]])) == pytest.approx(0.1)
    assert decay_penalty(p, DecayVarsLOD([[0.5]])) == 0.0
    assert decay_penalty(DecayParamsLOD([[0.5, 0.2]], [[0.0, 0.0]]), DecayVarsLOD([[1.0, 0.7]])) == 0.0

    with pytest.raises(ValueError):
        decay_penalty(p, DecayVarsLOD([[1.0, 1.0]]))
    with pytest.raises(ValueError):
        DecayVarsLOD([[0.0]])
    with pytest.raises(ValueError):
        DecayParamsLOD([[0.5]], [[-1.0]])


def test_world_helpers(dynamic_world):
    """Check the per-obstacle barrier and context vectors."""
    s = [-2.0, -1.5, 0.0, 0.0]
    h = barrier_values(dynamic_world, s, t=0)
    assert h.shape == (3,)
    assert h[0] == pytest.approx(2.25 - 1.0)
    assert h[1] == pytest.approx(4.0 - 0.49)

    ctx = context_values(dynamic_world, s, t=0)
    npt.assert_allclose(ctx, [0.0, 2.0, 2.0])
    ctx = context_values(dynamic_world, s, t=10)
    npt.assert_allclose(ctx, [0.0, 0.0, 0.0], atol=1e-12)


def test_forward_invariance(static_world):
    """Check that steps meeting the CBF condition without slack never leave the safe set."""
    rng = np.random.default_rng(21)
    plant = static_world.plant
    checked = 0
    for _ in range(1000):
        s = np.concatenate([rng.uniform(-5.0, 5.0, 2), rng.uniform(-1.0, 1.0, 2)])
        h = barrier_values(static_world, s)[0]
        if h < 0.0:
            continue
        # Follow a random input sequence for as long as the condition holds.
        for t in range(10):
            decay = rng.uniform(1e-6, 1.0)
            s_next = plant.A @ s + plant.B @ rng.uniform(-1.0, 1.0, 2)
            h_next = barrier_values(static_world, s_next, t + 1)[0]
            if cbf_condition(h, h_next, decay) < 0.0:
                break
            assert h_next >= 0.0
            checked += 1
            s, h = s_next, h_next
    assert checked > 1000
