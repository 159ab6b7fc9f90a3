import pytest

from safe_mpcrl.gradcheck import (
    GradCheckResult,
    check_network_jacobian,
    check_value_gradient,
    relative_error,
    run_gradient_checks,
)
from safe_mpcrl.mpc import MpcConfig
from safe_mpcrl.neural import NetworkShape


def test_relative_error():
    """Check the error measure and its floor of one."""
    assert relative_error([], []) == 0.0
    assert relative_error([10.0, 0.0], [11.0, 0.0]) == pytest.approx(1.0 / 11.0)
    assert relative_error([0.1], [0.2]) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        relative_error([1.0], [1.0, 2.0])


def test_gradcheck_result():
    """Check the pass rule and the summary record."""
    res = GradCheckResult("value", threshold=1e-4)
    assert res.checked == 0
    assert res.max_rel_error == 0.0
    # Nothing checked is not a pass.
    assert not res.passed

    res.errors += [1e-6, 5e-5]
    res.skip("degenerate")
    res.skip("degenerate")
    res.skip("solve_failed")
    assert res.passed
    assert res.to_record() == {
        "suite": "value",
        "checked": 2,
        "skipped": {"degenerate": 2, "solve_failed": 1},
        "max_rel_error": 5e-5,
        "threshold": 1e-4,
        "passed": True,
    }

    res.errors.append(1e-3)
    assert not res.passed


def test_network_jacobian_check():
    """Check that the exact network Jacobians pass their finite-difference check."""
    for recurrent in (False, True):
        shape = NetworkShape.for_obstacles(2, hidden=(5, 3), recurrent=recurrent)
        res = check_network_jacobian(shape, n_instances=3, seed=1)
        assert res.suite == ("network_rnn" if recurrent else "network_mlp")
        assert res.checked == 3
        assert res.passed


def test_value_gradient_bookkeeping(static_world):
    """Check that every instance is either compared or skipped with a reason."""
    cfg = MpcConfig(horizon=1, variant="lod")
    res = check_value_gradient(cfg, static_world, "value", n_instances=2, seed=3, max_coords=5)
    assert res.checked + sum(res.skipped.values()) == 2
    assert set(res.skipped) <= {"solve_failed", "degenerate", "active_set_changed"}

    with pytest.raises(ValueError):
        check_value_gradient(cfg, static_world, "exploratory_value", n_instances=1)


@pytest.mark.slow
def test_value_gradient_static_lod(static_world):
    """Check the envelope gradient of the static LOD problems against central differences."""
    cfg = MpcConfig(horizon=1, variant="lod")
    for res in run_gradient_checks(cfg, static_world, n_instances=20, seed=0):
        assert res.passed, res.to_record()


@pytest.mark.slow
@pytest.mark.parametrize(
    ("variant", "horizon"),
    [("lod", 1), ("lod", 3), ("nn", 1), ("nn", 3), ("nn", 6), ("rnn", 3), ("rnn", 6)],
)
def test_action_value_gradient(dynamic_world, variant, horizon):
    """Check the action-value gradient of every variant on 20 random instances."""
    cfg = MpcConfig(horizon=horizon, variant=variant, w_mpc=20.0**7, hidden=(8, 8))
    res = check_value_gradient(cfg, dynamic_world, "action_value", n_instances=20, seed=horizon)
    assert res.passed, res.to_record()


@pytest.mark.slow
def test_value_gradient_dynamic_rnn(dynamic_world):
    """Check the envelope gradient of the recurrent MPC with six steps."""
    cfg = MpcConfig(horizon=6, variant="rnn", w_mpc=20.0**7, hidden=(8, 8))
    res = check_value_gradient(cfg, dynamic_world, "value", n_instances=20, seed=2)
    assert res.passed, res.to_record()
