"""Feedforward networks with exact backpropagation, written against numpy.

Each layer is ``Linear -> [BatchNorm] -> activation`` with weights of shape
``(out_dim, in_dim)``. All arithmetic is float64.
"""

from __future__ import annotations

from copy import deepcopy
from dataclasses import dataclass, field
from enum import Enum
import logging
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .exceptions import ConstructionError, ShapeError, StaleCacheError

logger = logging.getLogger(__name__)

DEFAULT_SLOPE = 0.01
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

# Denominator floor of the gradient-check relative error, so that gradients that
# are zero up to finite-difference noise do not blow the ratio up.
GRADCHECK_FLOOR = 1e-5

PARAMETER_ARRAYS = ("weight", "bias", "gamma", "beta", "running_mean", "running_var")


class Activation(str, Enum):
    LEAKY_RELU = "leaky_relu"
    IDENTITY = "identity"


def _check_slope(slope: float) -> None:
    if not 0 < slope < 1:
        raise ConstructionError(f"LeakyReLU slope must be in (0, 1), got {slope!r}.")


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    has_batchnorm: bool = False
    activation: Activation = Activation.IDENTITY
    slope: float = DEFAULT_SLOPE

    def __post_init__(self):
        object.__setattr__(self, "activation", Activation(self.activation))
        for name in ("in_dim", "out_dim"):
            dim = getattr(self, name)
            if int(dim) != dim or dim < 1:
                raise ConstructionError(
                    f"{name} must be a positive integer, got {dim!r}."
                )
            object.__setattr__(self, name, int(dim))
        if self.activation is Activation.LEAKY_RELU:
            _check_slope(self.slope)

    def to_dict(self) -> dict[str, Any]:
        return {
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
            "has_batchnorm": self.has_batchnorm,
            "activation": self.activation.value,
            "slope": self.slope,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> LayerSpec:
        return cls(**data)


@dataclass(eq=False)
class Layer:
    spec: LayerSpec
    weight: np.ndarray
    bias: np.ndarray
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None

    def parameters(self) -> dict[str, np.ndarray]:
        params = {"weight": self.weight, "bias": self.bias}
        if self.spec.has_batchnorm:
            params |= {"gamma": self.gamma, "beta": self.beta}
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        if not self.spec.has_batchnorm:
            return {}
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def check_shapes(self) -> None:
        out_dim, in_dim = self.spec.out_dim, self.spec.in_dim
        expected = {"weight": (out_dim, in_dim), "bias": (out_dim,)}
        if self.spec.has_batchnorm:
            expected |= {
                name: (out_dim,)
                for name in ("gamma", "beta", "running_mean", "running_var")
            }
        for name, shape in expected.items():
            actual = np.shape(getattr(self, name))
            if actual != shape:
                raise ShapeError(f"Layer {name} has shape {actual}, expected {shape}.")
        if self.spec.has_batchnorm and not (self.running_var > 0).all():
            raise ShapeError("BatchNorm running variance must be positive.")


def _check_chain(specs: Sequence[LayerSpec]) -> None:
    if not specs:
        raise ConstructionError("A network needs at least one layer.")
    for i, (prev, nxt) in enumerate(zip(specs, specs[1:])):
        if prev.out_dim != nxt.in_dim:
            raise ConstructionError(
                f"Layer {i} outputs {prev.out_dim} features but layer {i + 1} "
                f"expects {nxt.in_dim}."
            )


class Network:
    """Ordered layers plus a training/inference mode flag.

    ``version`` is bumped by every optimizer step so that backward can refuse a
    forward cache computed with older parameters.
    """

    def __init__(self, layers: Sequence[Layer]):
        _check_chain([layer.spec for layer in layers])
        for layer in layers:
            layer.check_shapes()
        self.layers = list(layers)
        self.training = True
        self.version = 0

    def __repr__(self) -> str:
        dims = " -> ".join(
            [str(self.in_dim)] + [str(layer.spec.out_dim) for layer in self.layers]
        )
        return f"Network({dims}, training={self.training})"

    @property
    def specs(self) -> list[LayerSpec]:
        return [layer.spec for layer in self.layers]

    @property
    def in_dim(self) -> int:
        return self.layers[0].spec.in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].spec.out_dim

    def train(self) -> Network:
        self.training = True
        return self

    def eval(self) -> Network:
        self.training = False
        return self

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            f"{i}.{name}": array
            for i, layer in enumerate(self.layers)
            for name, array in layer.parameters().items()
        }

    def buffers(self) -> dict[str, np.ndarray]:
        return {
            f"{i}.{name}": array
            for i, layer in enumerate(self.layers)
            for name, array in layer.buffers().items()
        }

    @classmethod
    def chain(cls, *networks: Network) -> Network:
        """A network running ``networks`` back to back, sharing their layers."""
        return cls([layer for net in networks for layer in net.layers])

    def copy(self) -> Network:
        return deepcopy(self)

    def to_dict(self) -> dict[str, Any]:
        layers = []
        for layer in self.layers:
            entry = {"spec": layer.spec.to_dict()}
            arrays = layer.parameters() | layer.buffers()
            entry |= {name: array.tolist() for name, array in arrays.items()}
            layers.append(entry)
        return {"layers": layers}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Network:
        layers = []
        for entry in data["layers"]:
            spec = LayerSpec.from_dict(entry["spec"])
            arrays = {
                name: np.array(entry[name], dtype=np.float64)
                for name in PARAMETER_ARRAYS
                if name in entry
            }
            layers.append(Layer(spec, **arrays))
        return cls(layers)


def init_network(specs: Sequence[LayerSpec], seed: int) -> Network:
    """Kaiming-uniform weights (variance 2 / fan_in), zero biases, identity BN."""
    specs = list(specs)
    _check_chain(specs)
    rng = np.random.default_rng(seed)
    layers = []
    for spec in specs:
        bound = np.sqrt(6.0 / spec.in_dim)
        layer = Layer(
            spec,
            weight=rng.uniform(-bound, bound, size=(spec.out_dim, spec.in_dim)),
            bias=np.zeros(spec.out_dim),
        )
        if spec.has_batchnorm:
            layer.gamma = np.ones(spec.out_dim)
            layer.beta = np.zeros(spec.out_dim)
            layer.running_mean = np.zeros(spec.out_dim)
            layer.running_var = np.ones(spec.out_dim)
        layers.append(layer)
    return Network(layers)


def leaky_relu(x, slope: float = DEFAULT_SLOPE):
    """``x`` where non-negative, ``slope * x`` elsewhere; scalars stay scalars."""
    _check_slope(slope)
    out = np.where(np.asarray(x) >= 0, x, slope * np.asarray(x, dtype=np.float64))
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    training: bool


def batchnorm_forward(
    batch: np.ndarray,
    layer: Layer,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
    update_stats: bool = True,
) -> tuple[np.ndarray, BatchNormCache]:
    """Normalize columns, then scale by gamma and shift by beta.

    Training mode uses the batch mean and (biased) variance and moves the
    running statistics towards the batch mean and unbiased variance.
    """
    if training:
        n_rows = batch.shape[0]
        if n_rows < 2:
            raise ShapeError(
                "BatchNorm in training mode needs at least 2 rows; the variance of "
                "a single row is undefined."
            )
        mean = batch.mean(axis=0)
        var = batch.var(axis=0)
        if update_stats:
            layer.running_mean *= 1 - momentum
            layer.running_mean += momentum * mean
            layer.running_var *= 1 - momentum
            layer.running_var += momentum * var * n_rows / (n_rows - 1)
    else:
        mean, var = layer.running_mean, layer.running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (batch - mean) * inv_std
    return layer.gamma * xhat + layer.beta, BatchNormCache(xhat, inv_std, training)


def batchnorm_backward(
    output_grad: np.ndarray, layer: Layer, cache: BatchNormCache
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (input grad, gamma grad, beta grad)."""
    dgamma = (output_grad * cache.xhat).sum(axis=0)
    dbeta = output_grad.sum(axis=0)
    dxhat = output_grad * layer.gamma
    if not cache.training:
        return dxhat * cache.inv_std, dgamma, dbeta

    n_rows = output_grad.shape[0]
    dx = (cache.inv_std / n_rows) * (
        n_rows * dxhat
        - dxhat.sum(axis=0)
        - cache.xhat * (dxhat * cache.xhat).sum(axis=0)
    )
    return dx, dgamma, dbeta


@dataclass
class LayerCache:
    inputs: np.ndarray
    pre_activation: np.ndarray
    batchnorm: BatchNormCache | None


@dataclass
class ForwardCache:
    layers: list[LayerCache]
    network_id: int
    version: int


@dataclass
class ForwardResult:
    output: np.ndarray
    activations: list[np.ndarray]
    cache: ForwardCache


@dataclass
class Gradients:
    params: dict[str, np.ndarray]
    input: np.ndarray


def as_batch(batch: Any, width: int) -> np.ndarray:
    """Validate a ``B x width`` float64 batch without missing values."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != width or batch.shape[0] < 1:
        raise ShapeError(
            f"Expected a batch of shape (B >= 1, {width}), got {batch.shape}."
        )
    if not np.isfinite(batch).all():
        raise ShapeError("Batches must not contain missing or non-finite values.")
    return batch


def forward(
    net: Network,
    batch: Any,
    training: bool | None = None,
    update_stats: bool = True,
) -> ForwardResult:
    """Run ``batch`` through every layer; ``training`` defaults to the net's mode."""
    training = net.training if training is None else training
    x = as_batch(batch, net.in_dim)

    caches, activations = [], []
    for layer in net.layers:
        z = x @ layer.weight.T + layer.bias
        bn_cache = None
        if layer.spec.has_batchnorm:
            z, bn_cache = batchnorm_forward(
                z, layer, training, update_stats=update_stats
            )
        if layer.spec.activation is Activation.LEAKY_RELU:
            out = np.where(z >= 0, z, layer.spec.slope * z)
        else:
            out = z
        caches.append(LayerCache(x, z, bn_cache))
        activations.append(out)
        x = out

    cache = ForwardCache(caches, network_id=id(net), version=net.version)
    return ForwardResult(x, activations, cache)


def backward(
    net: Network, cache: ForwardCache | None, output_grad: np.ndarray
) -> Gradients:
    """Exact gradients of a scalar loss given its gradient w.r.t. the output."""
    if cache is None:
        raise StaleCacheError("backward needs the cache of a forward pass.")
    if cache.network_id != id(net) or cache.version != net.version:
        raise StaleCacheError(
            "The forward cache belongs to another network or to older parameters."
        )
    n_rows = cache.layers[0].inputs.shape[0]
    output_grad = np.asarray(output_grad, dtype=np.float64)
    if output_grad.shape != (n_rows, net.out_dim):
        raise ShapeError(
            f"Output gradient has shape {output_grad.shape}, "
            f"expected {(n_rows, net.out_dim)}."
        )

    grads = {}
    grad = output_grad
    for i in reversed(range(len(net.layers))):
        layer, layer_cache = net.layers[i], cache.layers[i]
        if layer.spec.activation is Activation.LEAKY_RELU:
            negative = layer_cache.pre_activation < 0
            grad = np.where(negative, layer.spec.slope * grad, grad)
        if layer.spec.has_batchnorm:
            grad, grads[f"{i}.gamma"], grads[f"{i}.beta"] = batchnorm_backward(
                grad, layer, layer_cache.batchnorm
            )
        grads[f"{i}.weight"] = grad.T @ layer_cache.inputs
        grads[f"{i}.bias"] = grad.sum(axis=0)
        grad = grad @ layer.weight

    ordered = {name: grads[name] for name in net.parameters()}
    return Gradients(ordered, grad)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> AdamState:
    """Bias-corrected Adam step applied in place to ``params``."""
    if set(grads) != set(params):
        raise ShapeError(
            f"Gradients cover {sorted(grads)}, parameters are {sorted(params)}."
        )
    for name, param in params.items():
        if np.shape(grads[name]) != param.shape:
            raise ShapeError(
                f"Gradient of {name} has shape {np.shape(grads[name])}, "
                f"expected {param.shape}."
            )
        state.m.setdefault(name, np.zeros_like(param))
        state.v.setdefault(name, np.zeros_like(param))

    state.t += 1
    bias1 = 1 - state.beta1**state.t
    bias2 = 1 - state.beta2**state.t
    for name, param in params.items():
        grad = grads[name]
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * grad
        v *= state.beta2
        v += (1 - state.beta2) * grad**2
        param -= state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
    return state


def adam_step(
    net: Network, grads: Gradients, state: AdamState
) -> tuple[Network, AdamState]:
    adam_update(net.parameters(), grads.params, state)
    net.version += 1
    return net, state


LossFn = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


def gradient_check(
    net: Network,
    loss_fn: LossFn,
    batch: Any,
    eps: float = 1e-5,
    n_per_layer: int = 100,
    seed: int = 0,
    training: bool | None = None,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn`` maps the network output to ``(loss, d loss / d output)``. Up to
    ``n_per_layer`` parameters are sampled per layer. BatchNorm running
    statistics are left untouched.
    """
    def loss_at() -> float:
        result = forward(net, batch, training, update_stats=False)
        return loss_fn(result.output)[0]

    result = forward(net, batch, training, update_stats=False)
    _, output_grad = loss_fn(result.output)
    analytic = backward(net, result.cache, output_grad).params

    rng = np.random.default_rng(seed)
    params = net.parameters()
    worst = 0.0
    for i, layer in enumerate(net.layers):
        names = [f"{i}.{name}" for name in layer.parameters()]
        sizes = np.array([params[name].size for name in names])
        offsets = np.cumsum(sizes)
        n_samples = min(n_per_layer, int(sizes.sum()))
        for flat in rng.choice(int(sizes.sum()), size=n_samples, replace=False):
            k = int(np.searchsorted(offsets, flat, side="right"))
            name = names[k]
            param = params[name]
            index = np.unravel_index(flat - (offsets[k] - sizes[k]), param.shape)

            original = param[index]
            param[index] = original + eps
            plus = loss_at()
            param[index] = original - eps
            minus = loss_at()
            param[index] = original

            numeric = (plus - minus) / (2 * eps)
            exact = analytic[name][index]
            scale = max(abs(exact), abs(numeric), GRADCHECK_FLOOR)
            error = abs(exact - numeric) / scale
            worst = max(worst, error)
    logger.debug("Gradient check worst relative error %.3e", worst)
    return worst
