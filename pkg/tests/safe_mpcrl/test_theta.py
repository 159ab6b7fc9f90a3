import numpy as np
import numpy.testing as npt
import pytest

from safe_mpcrl.theta import ThetaBlock, ThetaVector


def _example():
    return ThetaVector(
        [
            ThetaBlock("F", np.full(4, 100.0), 1e-3, np.inf),
            ThetaBlock("omega_bar", np.full((1, 1), 1000.0), 1e-6, 1000.0),
            ThetaBlock("p_omega", np.full((1, 1), 0.4), 0.0, np.inf),
        ]
    )


def test_theta_blocks():
    """Check the block access and the flat view."""
    theta = _example()
    assert len(theta) == 6
    assert theta.names == ["F", "omega_bar", "p_omega"]
    assert "F" in theta
    assert "W1" not in theta
    npt.assert_array_equal(theta["p_omega"], [[0.4]])
    assert theta.slices()["omega_bar"] == slice(4, 5)
    npt.assert_array_equal(theta.flat(), [100.0] * 4 + [1000.0, 0.4])
    assert theta.within_bounds()

    with pytest.raises(KeyError):
        theta["W1"]
    with pytest.raises(ValueError):
        ThetaVector([ThetaBlock("F", [1.0], 0.0, 1.0), ThetaBlock("F", [1.0], 0.0, 1.0)])
    with pytest.raises(ValueError):
        ThetaBlock("F", [1.0], 2.0, 1.0)


def test_theta_updates():
    """Check that updates return new vectors with the same layout."""
    theta = _example()
    moved = theta.with_flat(theta.flat() + 1.0)
    assert moved.same_layout(theta)
    npt.assert_array_equal(moved["F"], np.full(4, 101.0))
    npt.assert_array_equal(theta["F"], np.full(4, 100.0))
    assert not moved.within_bounds()

    replaced = theta.with_block("p_omega", [[2.0]])
    npt.assert_array_equal(replaced["p_omega"], [[2.0]])

    with pytest.raises(ValueError):
        theta.with_flat(np.zeros(5))
    with pytest.raises(KeyError):
        theta.with_block("Wq1", [0.0])


def test_theta_snapshot(tmp_path):
    """Check that a snapshot reproduces the parameters and bounds exactly."""
    theta = _example().with_flat([0.1, 1.0 / 3.0, 2e-17, 123456.789, 0.7, np.pi])
    document = theta.to_dict()
    assert document["blocks"][0]["upper"] == [None] * 4

    path = tmp_path / "theta.json"
    theta.save(path)
    back = ThetaVector.load(path)
    assert back.same_layout(theta)
    npt.assert_array_equal(back.flat(), theta.flat())
    npt.assert_array_equal(back.lower(), theta.lower())
    npt.assert_array_equal(back.upper(), theta.upper())

    with pytest.raises(ValueError):
        ThetaVector.from_dict({"format": "other", "version": 1, "blocks": []})
    with pytest.raises(ValueError):
        ThetaVector.from_dict({"format": "safe-mpcrl-theta", "version": 99, "blocks": []})
