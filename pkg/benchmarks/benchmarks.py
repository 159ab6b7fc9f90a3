"""Benchmarks of the MPC solves and the gradients the learner needs.

For more information on writing benchmarks:
https://asv.readthedocs.io/en/stable/writing_benchmarks.html."""

import numpy as np

from safe_mpcrl.env import DoubleIntegrator, LinearMotion, Obstacle, World
from safe_mpcrl.mpc import CbfMpc, MpcConfig, default_theta
from safe_mpcrl.neural import NetworkShape, RnnHiddenState, init_rnn_params, net_param_jacobian

START = np.array([-5.0, -5.0, 0.0, 0.0])


def _static_world():
    return World(DoubleIntegrator(0.2), (Obstacle(2.0, 2.25, 1.5),))


def _dynamic_world():
    return World(
        DoubleIntegrator(0.2),
        (
            Obstacle(-2.0, 0.0, 1.0),
            Obstacle(-4.0, -1.5, 0.7, LinearMotion(-4.0, 0.0, 0.2, 1)),
            Obstacle(-4.0, -3.3, 0.7, LinearMotion(-4.0, 1.0, 0.2, 1)),
        ),
    )


class MpcSolveSuite:
    """Time one cold policy solve and its value gradient per variant."""

    params = ["static-lod", "dynamic-nn", "dynamic-rnn"]
    param_names = ["preset"]

    def setup(self, preset):
        if preset == "static-lod":
            self.world = _static_world()
            cfg = MpcConfig(horizon=1, variant="lod")
        else:
            self.world = _dynamic_world()
            cfg = MpcConfig(horizon=6, variant=preset.split("-")[1], w_mpc=20.0**7)
        self.mpc = CbfMpc(cfg, self.world)
        self.theta = default_theta(cfg, self.world, np.random.default_rng(0))
        self.hidden = self.mpc.initial_hidden()
        self.outcome = self.mpc.solve_value(self.theta, START, 0, hidden=self.hidden)

    def time_solve_policy(self, preset):
        """Time a cold-started policy solve."""
        self.mpc.reset()
        self.mpc.solve_policy(self.theta, START, 0, hidden=self.hidden)

    def time_value_gradient(self, preset):
        """Time the envelope gradient at a solved program."""
        self.mpc.value_gradient(self.outcome)


def time_rnn_param_jacobian():
    """Time the exact Jacobian of the recurrent decay network."""
    rng = np.random.default_rng(0)
    shape = NetworkShape.for_obstacles(3, hidden=(16, 16, 16), recurrent=True)
    params = init_rnn_params(shape, rng)
    net_param_jacobian(params, rng.normal(size=shape.n_in), RnnHiddenState.zeros(shape))
