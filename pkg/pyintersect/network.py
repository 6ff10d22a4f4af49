"""A small convolutional Q-network written directly against numpy, with hand-derived backpropagation and RMSProp.

The architecture is fixed::

    grid (18, 26, 3)
      -> conv 32 x 6x6, stride 2, leaky ReLU  -> (7, 11, 32)
      -> conv 64 x 3x3, stride 2, leaky ReLU  -> (3, 5, 64), flattened to 960
      -> dense 100, leaky ReLU
      -> dense 5 (linear), one Q-value per action

Convolutions are "valid" (no padding). Inputs are channels-last; convolution weights are stored as
`(filters, channels, kernel_rows, kernel_cols)`. Everything is computed in float64.

A :class:`DenseParams` network with one hidden layer implements the same interface for problems whose states are plain
vectors.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from pyintersect.encoder import GRID_SHAPE
from pyintersect.categories import ACTIONS

logger = logging.getLogger(__name__)

N_ACTIONS = len(ACTIONS)
CONV1_FILTERS, CONV1_KERNEL, CONV1_STRIDE = 32, 6, 2
CONV2_FILTERS, CONV2_KERNEL, CONV2_STRIDE = 64, 3, 2
CONV1_OUT = (7, 11, CONV1_FILTERS)
CONV2_OUT = (3, 5, CONV2_FILTERS)
FLAT_SIZE = 3 * 5 * CONV2_FILTERS
HIDDEN_SIZE = 100

PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "dense_w", "dense_b", "out_w", "out_b")
"""Parameter arrays of :class:`NetworkParams`, in checkpoint order."""

PARAM_SHAPES = {
    "conv1_w": (CONV1_FILTERS, GRID_SHAPE[2], CONV1_KERNEL, CONV1_KERNEL),
    "conv1_b": (CONV1_FILTERS,),
    "conv2_w": (CONV2_FILTERS, CONV1_FILTERS, CONV2_KERNEL, CONV2_KERNEL),
    "conv2_b": (CONV2_FILTERS,),
    "dense_w": (HIDDEN_SIZE, FLAT_SIZE),
    "dense_b": (HIDDEN_SIZE,),
    "out_w": (N_ACTIONS, HIDDEN_SIZE),
    "out_b": (N_ACTIONS,),
}

PARAMETER_COUNT = sum(int(np.prod(s)) for s in PARAM_SHAPES.values())


class NetworkError(Exception):
    pass


class InputShapeError(NetworkError):
    """Raised when an input does not have the shape a network expects."""
    pass


class StaleCacheError(NetworkError):
    """Raised when backpropagating through a cache whose parameters have been updated since the forward pass."""
    pass


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    """`x` where `x >= 0`, `slope * x` elsewhere."""
    return np.where(x >= 0, x, slope * x)


def leaky_relu_grad(x: np.ndarray, slope: float) -> np.ndarray:
    """Derivative of :func:`leaky_relu`; 1 at zero."""
    return np.where(x >= 0, 1.0, slope)


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """A valid, strided convolution of a channels-last batch.

    :param x: Input of shape (N, H, W, C).
    :param w: Weights of shape (F, C, kh, kw).
    :param b: Biases of shape (F,).
    :return: The output, of shape (N, H', W', F), and the input windows (needed by :func:`conv_backward`).
    """
    kh, kw = w.shape[2:]
    windows = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    return np.einsum("nhwcij,fcij->nhwf", windows, w) + b, windows


def conv_backward(
        dout: np.ndarray,
        windows: np.ndarray,
        w: np.ndarray,
        x_shape: tuple[int, ...],
        stride: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a :func:`conv_forward` call.

    :return: Gradients with respect to the input, the weights and the biases.
    """
    dw = np.einsum("nhwcij,nhwf->fcij", windows, dout)
    db = dout.sum(axis=(0, 1, 2))
    dwin = np.einsum("nhwf,fcij->nhwcij", dout, w)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    h_out, w_out = dout.shape[1:3]
    for i in range(w.shape[2]):
        for j in range(w.shape[3]):
            dx[:, i:i + stride * h_out:stride, j:j + stride * w_out:stride, :] += dwin[..., i, j]
    return dx, dw, db


@dataclass(slots=True)
class ForwardCache:
    """Activations kept from a forward pass for the matching backward pass."""

    params: 'QNetwork'
    version: int
    """The parameters' version at the time of the forward pass."""
    batched: bool
    values: dict[str, Any] = field(default_factory=dict)


class QNetwork(ABC):
    """A parameterised function from states to one Q-value per action, differentiable by hand."""

    leaky_slope: float
    version: int

    @property
    @abstractmethod
    def input_shape(self) -> tuple[int, ...]:
        """Shape of one (unbatched) input."""
        raise NotImplementedError

    @abstractmethod
    def arrays(self) -> dict[str, np.ndarray]:
        """The parameter arrays by name, in a fixed order. The arrays are live: updating them updates the network."""
        raise NotImplementedError

    @abstractmethod
    def _forward(self, x: np.ndarray, cache: ForwardCache) -> np.ndarray:
        raise NotImplementedError

    @abstractmethod
    def _backward(self, dq: np.ndarray, cache: ForwardCache) -> dict[str, np.ndarray]:
        raise NotImplementedError

    @property
    def parameter_count(self) -> int:
        return sum(a.size for a in self.arrays().values())

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        """Compute Q-values for one input or a batch of inputs.

        :param x: One input of shape :attr:`input_shape`, or a batch of shape `(N,) + input_shape`.
        :return: Q-values of shape (5,) or (N, 5), and the cache needed to backpropagate.
        """
        x = np.asarray(x, dtype=np.float64)
        batched = x.shape[1:] == self.input_shape
        if not batched and x.shape != self.input_shape:
            raise InputShapeError(f"Expected input of shape {self.input_shape} (or a batch of them), got {x.shape}.")
        cache = ForwardCache(params=self, version=self.version, batched=batched)
        q = self._forward(x if batched else x[None], cache)
        return (q if batched else q[0]), cache

    def backward(self, dq: np.ndarray, cache: ForwardCache) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss with respect to every parameter array.

        :param dq: Gradient of the loss with respect to the Q-values returned by the forward pass.
        :param cache: The cache returned by that forward pass.
        """
        if cache.params is not self or cache.version != self.version:
            raise StaleCacheError(f"Cache from version {cache.version} used with parameters at version "
                                  f"{self.version}.")
        dq = np.asarray(dq, dtype=np.float64)
        return self._backward(dq if cache.batched else dq[None], cache)

    def copy(self) -> 'QNetwork':
        """An independent copy (a frozen snapshot, as far as the original's training is concerned)."""
        clone = type(self)(**{name: a.copy() for name, a in self.arrays().items()}, leaky_slope=self.leaky_slope)
        clone.version = self.version
        return clone

    def bump_version(self):
        self.version += 1


@dataclass(slots=True, eq=False)
class NetworkParams(QNetwork):
    """Parameters of the convolutional Q-network."""

    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    dense_w: np.ndarray
    dense_b: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray
    leaky_slope: float = 0.01
    version: int = 0
    """Incremented every time the parameters are updated in place."""

    def __post_init__(self):
        for name in PARAM_NAMES:
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.shape != PARAM_SHAPES[name]:
                raise InputShapeError(f"Parameter {name} must have shape {PARAM_SHAPES[name]}, not {a.shape}.")
            setattr(self, name, a)
        if self.leaky_slope <= 0:
            raise ValueError(f"Leaky slope must be strictly positive, not {self.leaky_slope}.")

    @property
    def input_shape(self) -> tuple[int, ...]:
        return GRID_SHAPE

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    @classmethod
    def zeros(cls, leaky_slope: float = 0.01) -> 'NetworkParams':
        return cls(**{name: np.zeros(shape) for name, shape in PARAM_SHAPES.items()}, leaky_slope=leaky_slope)

    @classmethod
    def random(cls, rng: np.random.Generator, leaky_slope: float = 0.01) -> 'NetworkParams':
        """He-style uniform initialization scaled by fan-in; biases start at zero."""
        gain = np.sqrt(2.0 / (1.0 + leaky_slope ** 2))
        arrays = {}
        for name, shape in PARAM_SHAPES.items():
            if name.endswith("_b"):
                arrays[name] = np.zeros(shape)
                continue
            fan_in = int(np.prod(shape[1:]))
            bound = (1.0 if name == "out_w" else gain) * np.sqrt(3.0 / fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        return cls(**arrays, leaky_slope=leaky_slope)

    def _forward(self, x: np.ndarray, cache: ForwardCache) -> np.ndarray:
        a = self.leaky_slope
        z1, win1 = conv_forward(x, self.conv1_w, self.conv1_b, CONV1_STRIDE)
        h1 = leaky_relu(z1, a)
        z2, win2 = conv_forward(h1, self.conv2_w, self.conv2_b, CONV2_STRIDE)
        h2 = leaky_relu(z2, a)
        flat = h2.reshape(len(x), FLAT_SIZE)
        z3 = flat @ self.dense_w.T + self.dense_b
        h3 = leaky_relu(z3, a)
        q = h3 @ self.out_w.T + self.out_b
        cache.values.update(x_shape=x.shape, win1=win1, z1=z1, h1_shape=h1.shape, win2=win2, z2=z2, flat=flat,
                            z3=z3, h3=h3)
        return q

    def _backward(self, dq: np.ndarray, cache: ForwardCache) -> dict[str, np.ndarray]:
        a = self.leaky_slope
        c = cache.values
        grads = {
            "out_w": dq.T @ c["h3"],
            "out_b": dq.sum(axis=0),
        }
        dz3 = (dq @ self.out_w) * leaky_relu_grad(c["z3"], a)
        grads["dense_w"] = dz3.T @ c["flat"]
        grads["dense_b"] = dz3.sum(axis=0)
        dz2 = (dz3 @ self.dense_w).reshape(c["z2"].shape) * leaky_relu_grad(c["z2"], a)
        dh1, grads["conv2_w"], grads["conv2_b"] = conv_backward(dz2, c["win2"], self.conv2_w, c["h1_shape"],
                                                                CONV2_STRIDE)
        dz1 = dh1 * leaky_relu_grad(c["z1"], a)
        _, grads["conv1_w"], grads["conv1_b"] = conv_backward(dz1, c["win1"], self.conv1_w, c["x_shape"],
                                                              CONV1_STRIDE)
        return {name: grads[name] for name in PARAM_NAMES}


@dataclass(slots=True, eq=False)
class DenseParams(QNetwork):
    """A fully connected network with one leaky-ReLU hidden layer, for vector-valued states."""

    hidden_w: np.ndarray
    hidden_b: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray
    leaky_slope: float = 0.01
    version: int = 0

    @property
    def input_shape(self) -> tuple[int, ...]:
        return (self.hidden_w.shape[1],)

    def arrays(self) -> dict[str, np.ndarray]:
        return {"hidden_w": self.hidden_w, "hidden_b": self.hidden_b, "out_w": self.out_w, "out_b": self.out_b}

    @classmethod
    def random(
            cls,
            rng: np.random.Generator,
            n_inputs: int,
            n_hidden: int,
            n_outputs: int = N_ACTIONS,
            leaky_slope: float = 0.01
    ) -> 'DenseParams':
        gain = np.sqrt(2.0 / (1.0 + leaky_slope ** 2))
        b1 = gain * np.sqrt(3.0 / n_inputs)
        b2 = np.sqrt(3.0 / n_hidden)
        return cls(
            hidden_w=rng.uniform(-b1, b1, size=(n_hidden, n_inputs)),
            hidden_b=np.zeros(n_hidden),
            out_w=rng.uniform(-b2, b2, size=(n_outputs, n_hidden)),
            out_b=np.zeros(n_outputs),
            leaky_slope=leaky_slope
        )

    def _forward(self, x: np.ndarray, cache: ForwardCache) -> np.ndarray:
        z = x @ self.hidden_w.T + self.hidden_b
        h = leaky_relu(z, self.leaky_slope)
        cache.values.update(x=x, z=z, h=h)
        return h @ self.out_w.T + self.out_b

    def _backward(self, dq: np.ndarray, cache: ForwardCache) -> dict[str, np.ndarray]:
        c = cache.values
        dz = (dq @ self.out_w) * leaky_relu_grad(c["z"], self.leaky_slope)
        return {
            "hidden_w": dz.T @ c["x"],
            "hidden_b": dz.sum(axis=0),
            "out_w": dq.T @ c["h"],
            "out_b": dq.sum(axis=0),
        }


def forward(grid: np.ndarray, params: QNetwork) -> tuple[np.ndarray, ForwardCache]:
    """Q-values of `params` for `grid` (or a batch of grids). See :meth:`QNetwork.forward`."""
    return params.forward(grid)


def backward(dq: np.ndarray, cache: ForwardCache) -> dict[str, np.ndarray]:
    """Parameter gradients for the forward pass that produced `cache`. See :meth:`QNetwork.backward`."""
    return cache.params.backward(dq, cache)


def q_values(params: QNetwork, x: np.ndarray) -> np.ndarray:
    """Q-values without keeping a cache."""
    return params.forward(x)[0]


@dataclass(slots=True)
class RmsPropState:
    """Running averages of squared gradients, one array per parameter array."""

    accumulators: dict[str, np.ndarray]
    learning_rate: float = 1e-3
    decay: float = 0.95
    epsilon: float = 1e-6

    @classmethod
    def for_params(
            cls,
            params: QNetwork,
            learning_rate: float = 1e-3,
            decay: float = 0.95,
            epsilon: float = 1e-6
    ) -> 'RmsPropState':
        """Fresh (all-zero) accumulators shaped like `params`."""
        return cls(
            accumulators={name: np.zeros_like(a) for name, a in params.arrays().items()},
            learning_rate=learning_rate,
            decay=decay,
            epsilon=epsilon
        )

    def copy(self) -> 'RmsPropState':
        return RmsPropState({k: a.copy() for k, a in self.accumulators.items()}, self.learning_rate, self.decay,
                            self.epsilon)


def rmsprop_update(
        params: QNetwork,
        grads: dict[str, np.ndarray],
        opt: RmsPropState
) -> tuple[QNetwork, RmsPropState]:
    """One RMSProp step, applied in place.

    `acc <- decay * acc + (1 - decay) * g**2` then `param <- param - lr * g / (sqrt(acc) + epsilon)`.

    :return: The same `params` and `opt` objects, updated.
    """
    arrays = params.arrays()
    for name, g in grads.items():
        if g.shape != arrays[name].shape:
            raise InputShapeError(f"Gradient for {name} has shape {g.shape}, expected {arrays[name].shape}.")
        acc = opt.accumulators[name]
        acc *= opt.decay
        acc += (1.0 - opt.decay) * g * g
        arrays[name] -= opt.learning_rate * g / (np.sqrt(acc) + opt.epsilon)
    params.bump_version()
    return params, opt


@dataclass(slots=True, frozen=True)
class GradientCheckResult:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float

    @property
    def relative_error(self) -> float:
        return abs(self.analytic - self.numeric) / max(abs(self.analytic), abs(self.numeric), 1e-8)


def _activation_pattern(cache: ForwardCache) -> list[np.ndarray]:
    """Which pre-activations are on the identity side of the leaky ReLU."""
    return [v >= 0 for k, v in cache.values.items() if k.startswith("z")]


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return all(np.array_equal(p, q) for p, q in zip(a, b))


def gradient_check(
        params: QNetwork,
        x: np.ndarray,
        dq: np.ndarray,
        rng: np.random.Generator,
        samples_per_array: int = 50,
        eps: float = 1e-4,
        names: Optional[tuple[str, ...]] = None
) -> list[GradientCheckResult]:
    """Compare analytic gradients against central finite differences.

    The scalar checked is `sum(dq * Q(x))`. Parameters are perturbed in place and restored afterwards, so `params` is
    left unchanged.

    With every activation on the same side of its kink, the loss is linear in any single parameter and the central
    difference is exact up to rounding. A parameter whose perturbation moves some pre-activation across zero is
    therefore skipped, and another one of the same array is drawn in its place.

    :param params: The network.
    :param x: An input or batch of inputs.
    :param dq: Upstream gradient, shaped like the Q-values of `x`.
    :param rng: Chooses which parameters to check.
    :param samples_per_array: Parameters checked per array (fewer if an array is smaller, or if too many of its
        parameters sit next to a kink).
    :param eps: Finite-difference step.
    :param names: Arrays to check. Defaults to all of them.
    """
    _, cache = params.forward(x)
    analytic = params.backward(dq, cache)
    pattern = _activation_pattern(cache)
    arrays = params.arrays()
    results = []
    skipped = 0
    for name in names or tuple(arrays):
        a = arrays[name]
        wanted = min(samples_per_array, a.size)
        checked = 0
        for flat in rng.permutation(a.size):
            if checked == wanted:
                break
            idx = np.unravel_index(int(flat), a.shape)
            original = a[idx]
            a[idx] = original + eps
            q_plus, cache_plus = params.forward(x)
            a[idx] = original - eps
            q_minus, cache_minus = params.forward(x)
            a[idx] = original
            if not (_same_pattern(pattern, _activation_pattern(cache_plus))
                    and _same_pattern(pattern, _activation_pattern(cache_minus))):
                skipped += 1
                continue
            results.append(GradientCheckResult(
                name=name,
                index=tuple(int(i) for i in idx),
                analytic=float(analytic[name][idx]),
                numeric=(float(np.sum(dq * q_plus)) - float(np.sum(dq * q_minus))) / (2 * eps)
            ))
            checked += 1
    if results:
        worst = max(results, key=lambda r: r.relative_error)
        logger.debug(f"Checked {len(results)} gradients ({skipped} skipped next to a kink); worst relative error "
                     f"{worst.relative_error:.2e} at {worst.name}{list(worst.index)}.")
    return results
