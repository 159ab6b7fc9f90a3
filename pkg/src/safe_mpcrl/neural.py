"""Feedforward and Elman networks that produce per-obstacle decay rates.

Every forward pass is backend-generic: parameters and inputs may be numpy arrays or
casadi ``SX`` expressions, and the same code builds the symbolic decays inside the MPC
and the numeric decays reported in trajectories. The two backends are never mixed
within the parameters of one call.

Flat parameter order (row-major weights)::

    W1, b1, [Wq1], W2, b2, [Wq2], ..., W{M+1}, b{M+1}

where ``Wj`` has shape (out, in), ``bj`` shape (out,), and the recurrent ``Wqj``
(RNN only) is square with the width of hidden layer ``j``.
"""

from dataclasses import dataclass
from functools import lru_cache
import logging

import casadi as cs
import numpy as np
from scipy.special import expit, logit

from safe_mpcrl.env import NUM_STATES

logger = logging.getLogger(__name__)


def is_symbolic(*values):
    """Return True if any of the values is a casadi expression."""
    return any(isinstance(v, (cs.SX, cs.MX)) for v in values)


def sigmoid(a):
    """Backend-generic logistic function."""
    if is_symbolic(a):
        return 1.0 / (1.0 + cs.exp(-a))
    return expit(a)


def relu(a):
    """Backend-generic ReLU with derivative 0 at the kink."""
    if is_symbolic(a):
        return a * (a > 0)
    return np.where(a > 0.0, a, 0.0)


def _affine(W, z, b):
    if is_symbolic(W, z, b):
        if isinstance(b, np.ndarray):
            b = cs.DM(b)
        return cs.mtimes(W, z) + b
    return W @ z + b


def _concat(parts):
    if is_symbolic(*parts):
        return cs.vertcat(*parts)
    return np.concatenate([np.atleast_1d(np.asarray(p, dtype=float)).reshape(-1) for p in parts])


@dataclass(frozen=True)
class NetworkShape:
    """Layer widths of a decay network.

    Attributes
    ----------
    n_in : int
        The input width (4 + 2 * num_obstacles).
    hidden : tuple of int
        The hidden layer widths (may be empty).
    n_out : int
        The output width (num_obstacles).
    recurrent : bool
        Whether hidden layers carry recurrent matrices.
    """

    n_in: int
    hidden: tuple = (16, 16, 16)
    n_out: int = 1
    recurrent: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        if self.n_in < 1 or self.n_out < 1 or any(w < 1 for w in self.hidden):
            raise ValueError(f"Invalid network widths: {self.n_in}, {self.hidden}, {self.n_out}.")

    @classmethod
    def for_obstacles(cls, num_obstacles, hidden=(16, 16, 16), recurrent=False):
        """The shape of a decay network for a world with ``num_obstacles`` obstacles."""
        return cls(NUM_STATES + 2 * num_obstacles, tuple(hidden), num_obstacles, recurrent)

    @property
    def widths(self):
        """All layer widths from input to output."""
        return (self.n_in, *self.hidden, self.n_out)

    def layout(self):
        """The named parameter blocks in flat order.

        Returns
        -------
        list of tuple
            ``(name, rows, cols)`` for every block; biases have ``cols == 1``.
        """
        widths = self.widths
        blocks = []
        for j in range(1, len(widths)):
            rows, cols = widths[j], widths[j - 1]
            blocks.append((f"W{j}", rows, cols))
            blocks.append((f"b{j}", rows, 1))
            if self.recurrent and j < len(widths) - 1:
                blocks.append((f"Wq{j}", rows, rows))
        return blocks

    @property
    def n_params(self):
        """The total number of scalar parameters."""
        return sum(rows * cols for _, rows, cols in self.layout())


@dataclass
class MlpParams:
    """Weights and biases of a feedforward decay network.

    Attributes
    ----------
    weights : list
        The weight matrices, ``weights[j]`` of shape (width[j+1], width[j]).
    biases : list
        The bias vectors.
    """

    weights: list
    biases: list

    @property
    def num_layers(self):
        """The number of affine layers (hidden layers + 1)."""
        return len(self.weights)


@dataclass
class RnnParams:
    """An MLP plus one recurrent matrix per hidden layer.

    Attributes
    ----------
    mlp : MlpParams
        The feedforward weights and biases.
    recurrent : list
        The square recurrent matrices ``Wq``, one per hidden layer.
    """

    mlp: MlpParams
    recurrent: list


@dataclass
class RnnHiddenState:
    """The hidden state of every hidden layer.

    Attributes
    ----------
    q : list
        One vector per hidden layer.
    """

    q: list

    @classmethod
    def zeros(cls, shape):
        """The reset hidden state for a network shape."""
        return cls([np.zeros(w) for w in shape.hidden])

    def flat(self):
        """All hidden values as one vector."""
        if len(self.q) == 0:
            return np.zeros(0)
        return _concat(self.q)

    @classmethod
    def from_flat(cls, shape, values):
        """Split a flat vector into per-layer hidden states."""
        q = []
        idx = 0
        for width in shape.hidden:
            q.append(values[idx : idx + width])
            idx += width
        return cls(q)


def net_input_vector(state, h_vals, context):
    """Stack ``(state, h_vals, context)`` into one network input."""
    return _concat([state, h_vals, context])


def unflatten_params(shape, flat):
    """Split a flat vector (numpy or casadi) into network parameters.

    Parameters
    ----------
    shape : NetworkShape
        The network shape.
    flat : numpy.ndarray or casadi.SX
        The flat parameters in the documented order.

    Returns
    -------
    MlpParams or RnnParams
        The structured parameters (RnnParams when the shape is recurrent).
    """
    symbolic = is_symbolic(flat)
    if not symbolic:
        flat = np.asarray(flat, dtype=float).reshape(-1)
    size = flat.shape[0]
    if size != shape.n_params:
        raise ValueError(f"Expected {shape.n_params} network parameters, got {size}.")

    blocks = {}
    idx = 0
    for name, rows, cols in shape.layout():
        chunk = flat[idx : idx + rows * cols]
        if cols == 1:
            blocks[name] = chunk
        elif symbolic:
            blocks[name] = cs.reshape(chunk, cols, rows).T
        else:
            blocks[name] = chunk.reshape(rows, cols)
        idx += rows * cols

    n_layers = len(shape.widths) - 1
    mlp = MlpParams(
        weights=[blocks[f"W{j}"] for j in range(1, n_layers + 1)],
        biases=[blocks[f"b{j}"] for j in range(1, n_layers + 1)],
    )
    if not shape.recurrent:
        return mlp
    return RnnParams(mlp=mlp, recurrent=[blocks[f"Wq{j}"] for j in range(1, n_layers)])


def flatten_params(params):
    """Flatten numeric network parameters into the documented order."""
    if isinstance(params, RnnParams):
        mlp, recurrent = params.mlp, params.recurrent
    else:
        mlp, recurrent = params, None

    parts = []
    for j, (W, b) in enumerate(zip(mlp.weights, mlp.biases)):
        parts.append(np.asarray(W, dtype=float).ravel())
        parts.append(np.asarray(b, dtype=float).ravel())
        if recurrent is not None and j < len(recurrent):
            parts.append(np.asarray(recurrent[j], dtype=float).ravel())
    return np.concatenate(parts)


def _check_input(W, z):
    if is_symbolic(W, z):
        return
    if np.shape(W)[1] != np.shape(z)[0]:
        raise ValueError(f"Input width {np.shape(z)[0]} does not match the first layer {np.shape(W)}.")


def mlp_forward(p, z):
    """Evaluate the feedforward decay network.

    Hidden layers use ReLU and the output layer a sigmoid, so every output lies in (0, 1).

    Parameters
    ----------
    p : MlpParams
        The parameters.
    z : numpy.ndarray or casadi.SX
        The stacked network input.

    Returns
    -------
    numpy.ndarray or casadi.SX
        One decay rate per obstacle.

    Examples
    --------
    >>> p = MlpParams([np.zeros((1, 6))], [np.zeros(1)])
    >>> mlp_forward(p, np.ones(6))
    array([0.5])
    """
    if not is_symbolic(z):
        z = np.asarray(z, dtype=float).reshape(-1)
    _check_input(p.weights[0], z)

    for W, b in zip(p.weights[:-1], p.biases[:-1]):
        z = relu(_affine(W, z, b))
    return sigmoid(_affine(p.weights[-1], z, p.biases[-1]))


def rnn_forward(p, z, q_prev):
    """Evaluate one step of the Elman decay network.

    Each hidden layer computes ``q_j = relu(W_j z_{j-1} + Wq_j q_prev_j + b_j)`` and feeds
    ``q_j`` to the next layer.

    Parameters
    ----------
    p : RnnParams
        The parameters.
    z : numpy.ndarray or casadi.SX
        The stacked network input.
    q_prev : RnnHiddenState
        The previous hidden state.

    Returns
    -------
    gamma : numpy.ndarray or casadi.SX
        One decay rate per obstacle.
    q_next : RnnHiddenState
        The updated hidden state.
    """
    mlp = p.mlp
    if not is_symbolic(z):
        z = np.asarray(z, dtype=float).reshape(-1)
    _check_input(mlp.weights[0], z)
    if len(q_prev.q) != len(p.recurrent):
        raise ValueError(f"Expected {len(p.recurrent)} hidden layers, got {len(q_prev.q)}.")

    q_next = []
    for W, b, Wq, q in zip(mlp.weights[:-1], mlp.biases[:-1], p.recurrent, q_prev.q):
        pre = _affine(W, z, b)
        pre = pre + (cs.mtimes(Wq, q) if is_symbolic(Wq, q, pre) else Wq @ q)
        z = relu(pre)
        q_next.append(z)

    gamma = sigmoid(_affine(mlp.weights[-1], z, mlp.biases[-1]))
    return gamma, RnnHiddenState(q_next)


def init_mlp_params(shape, rng, output_decay=0.9):
    """Draw initial feedforward parameters.

    Weights are uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``, biases are zero except the
    output bias, which is set so that a zero hidden signal yields ``output_decay``.

    Parameters
    ----------
    shape : NetworkShape
        The network shape.
    rng : numpy.random.Generator
        The random generator.
    output_decay : float
        The decay produced when the last hidden layer is silent.

    Returns
    -------
    MlpParams
        The parameters.
    """
    widths = shape.widths
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    biases[-1] = np.full(shape.n_out, logit(output_decay))
    return MlpParams(weights, biases)


def scale_to_spectral_radius(W, target):
    """Rescale a square matrix so its largest absolute eigenvalue equals ``target``."""
    rho = float(np.max(np.abs(np.linalg.eigvals(W))))
    if rho > 0.0:
        W = (target / rho) * W
    return W


def init_rnn_params(shape, rng, output_decay=0.9, spectral_radius=0.5):
    """Draw initial Elman parameters.

    The feedforward part follows ``init_mlp_params``; the recurrent matrices are uniform and
    rescaled to the given spectral radius.
    """
    mlp = init_mlp_params(shape, rng, output_decay=output_decay)
    recurrent = []
    for width in shape.hidden:
        bound = 1.0 / np.sqrt(width)
        W = rng.uniform(-bound, bound, size=(width, width))
        recurrent.append(scale_to_spectral_radius(W, spectral_radius))
    return RnnParams(mlp=mlp, recurrent=recurrent)


@lru_cache(maxsize=32)
def _jacobian_function(shape):
    theta = cs.SX.sym("theta", shape.n_params)
    z = cs.SX.sym("z", shape.n_in)
    q_prev = cs.SX.sym("q", sum(shape.hidden))

    params = unflatten_params(shape, theta)
    if shape.recurrent:
        gamma, _ = rnn_forward(params, z, RnnHiddenState.from_flat(shape, q_prev))
    else:
        gamma = mlp_forward(params, z)
    logger.debug(f"Compiled the decay-network Jacobian for {shape}.")
    return cs.Function("net_jacobian", [theta, z, q_prev], [gamma, cs.jacobian(gamma, theta)])


def net_param_jacobian(p, z, q_prev=None):
    """The exact Jacobian of the decay rates with respect to every network parameter.

    Parameters
    ----------
    p : MlpParams or RnnParams
        Numeric parameters.
    z : array_like
        The network input.
    q_prev : RnnHiddenState, optional
        The previous hidden state (RNN only; zeros when omitted).

    Returns
    -------
    numpy.ndarray
        An array of shape (num_obstacles, n_params), columns in flat parameter order.
    """
    mlp = p.mlp if isinstance(p, RnnParams) else p
    hidden = tuple(np.shape(W)[0] for W in mlp.weights[:-1])
    shape = NetworkShape(
        n_in=np.shape(mlp.weights[0])[1],
        hidden=hidden,
        n_out=np.shape(mlp.weights[-1])[0],
        recurrent=isinstance(p, RnnParams),
    )
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.shape[0] != shape.n_in:
        raise ValueError(f"Input width {z.shape[0]} does not match the network input {shape.n_in}.")
    if q_prev is None:
        q_flat = np.zeros(sum(hidden))
    else:
        q_flat = np.asarray(q_prev.flat(), dtype=float)

    _, jac = _jacobian_function(shape)(flatten_params(p), z, q_flat)
    return np.asarray(cs.DM(jac).full())


@dataclass(frozen=True)
class InputScaling:
    """Normalization of the network input.

    Attributes
    ----------
    state_scale : float
        Divides positions and velocities.
    h_scale : tuple of float
        Divides the barrier value of each obstacle.
    context_scale : float
        Divides the context scalars.
    """

    state_scale: float = 1.0
    h_scale: tuple = ()
    context_scale: float = 1.0

    @classmethod
    def for_world(cls, world):
        """Scale by the state bound and by the largest barrier value over the state box."""
        bound = world.state_bound
        corners = [(sx * bound, sy * bound) for sx in (-1.0, 1.0) for sy in (-1.0, 1.0)]
        h_scale = []
        for ob in world.obstacles:
            worst = max((px - ob.cx0) ** 2 + (py - ob.cy0) ** 2 - ob.radius**2 for px, py in corners)
            h_scale.append(float(max(worst, 1.0)))
        return cls(state_scale=float(bound), h_scale=tuple(h_scale), context_scale=float(bound))

    def apply(self, state, h_vals, context):
        """Return the normalized, stacked network input."""
        if len(self.h_scale) == 0:
            h_norm = h_vals
        elif is_symbolic(h_vals):
            h_norm = h_vals / cs.DM(np.asarray(self.h_scale))
        else:
            h_norm = np.asarray(h_vals, dtype=float) / np.asarray(self.h_scale)
        return net_input_vector(state / self.state_scale, h_norm, context / self.context_scale)
