"""Minimal deterministic neural-network engine.

Layers operate on plain numpy arrays (row-major, explicit shape) and cache
whatever the analytic backward pass needs. Everything is single-threaded by
contract: with a fixed RNG the full weight trajectory of a training run is
reproducible bit for bit.

Pre-activations (the value feeding the nonlinearity) are exposed through
``Network.forward(record=True)`` so the sparsity metrics can observe every
convolution and fully connected layer without touching the layer internals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataError, StateError


def check_finite(x: np.ndarray, context: str = "tensor") -> np.ndarray:
    """Raise DataError if ``x`` contains NaN or Inf; NaNs never pass silently."""
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise DataError(f"{context}: {bad} non-finite value(s) in shape {x.shape}")
    return x


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


class Layer:
    """Base layer: forward/backward with cached intermediates.

    ``trainable`` names the parameter attributes; gradients land in
    ``grad_<attr>`` after backward. Layers with ``frozen`` set keep their
    parameters out of the gradient set.
    """

    trainable: tuple[str, ...] = ()

    def __init__(self):
        self.frozen = False

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _require_cache(self, attr: str):
        if getattr(self, attr, None) is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")


class Conv2D(Layer):
    """2D convolution producing the linear (pre-nonlinearity) activation.

    Weights have shape [out_channels, in_channels, kh, kw]. The forward pass
    is im2col + matmul; each output element is the inner product of one
    kernel with its receptive field, plus the bias when present.
    """

    trainable = ("weights", "bias")

    def __init__(self, in_channels: int, out_channels: int, kernel_size,
                 stride=1, padding=0, bias: bool = True,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel_size = _pair(kernel_size)
        self.stride = _pair(stride)
        self.padding = _pair(padding)
        if min(self.stride) < 1:
            raise ConfigurationError(f"stride must be positive, got {self.stride}")
        if min(self.padding) < 0:
            raise ConfigurationError(f"padding must be non-negative, got {self.padding}")
        rng = rng if rng is not None else np.random.default_rng(0)
        kh, kw = self.kernel_size
        fan_in = self.in_channels * kh * kw
        limit = float(np.sqrt(1.0 / fan_in))
        self.weights = rng.uniform(-limit, limit,
                                   size=(self.out_channels, self.in_channels, kh, kw)
                                   ).astype(dtype)
        self.bias = np.zeros(self.out_channels, dtype=dtype) if bias else None
        self.grad_weights = None
        self.grad_bias = None
        self._cols = None
        self._x_shape = None

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel_size
        sh, sw = self.stride
        ph, pw = self.padding
        oh = (h + 2 * ph - kh) // sh + 1
        ow = (w + 2 * pw - kw) // sw + 1
        if h + 2 * ph < kh or w + 2 * pw < kw:
            raise ConfigurationError(
                f"input {h}x{w} with padding {self.padding} smaller than kernel {self.kernel_size}")
        return oh, ow

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ConfigurationError(
                f"conv expects [B, {self.in_channels}, H, W], got {x.shape}")
        b, _, h, w = x.shape
        oh, ow = self.output_hw(h, w)
        kh, kw = self.kernel_size
        sh, sw = self.stride
        ph, pw = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
        cols = np.empty((b, self.in_channels, kh, kw, oh, ow), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = xp[:, :, i:i + (oh - 1) * sh + 1:sh,
                                      j:j + (ow - 1) * sw + 1:sw]
        cols2 = cols.reshape(b, self.in_channels * kh * kw, oh * ow)
        w2 = self.weights.reshape(self.out_channels, -1)
        out = np.matmul(w2, cols2).reshape(b, self.out_channels, oh, ow)
        if self.bias is not None:
            out += self.bias[:, None, None]
        self._cols = cols2
        self._x_shape = x.shape
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        self._require_cache("_cols")
        b, _, h, w = self._x_shape
        _, d, oh, ow = grad_out.shape
        kh, kw = self.kernel_size
        sh, sw = self.stride
        ph, pw = self.padding
        if grad_out.shape[0] != b or d != self.out_channels:
            raise StateError(
                f"gradient shape {grad_out.shape} does not match cached forward")
        g2 = grad_out.reshape(b, d, oh * ow)
        self.grad_weights = np.matmul(g2, self._cols.transpose(0, 2, 1)).sum(axis=0) \
            .reshape(self.weights.shape)
        if self.bias is not None:
            self.grad_bias = grad_out.sum(axis=(0, 2, 3))
        w2 = self.weights.reshape(self.out_channels, -1)
        dcols = np.matmul(w2.T, g2).reshape(b, self.in_channels, kh, kw, oh, ow)
        dxp = np.zeros((b, self.in_channels, h + 2 * ph, w + 2 * pw), dtype=grad_out.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + (oh - 1) * sh + 1:sh,
                    j:j + (ow - 1) * sw + 1:sw] += dcols[:, :, i, j]
        return dxp[:, :, ph:ph + h, pw:pw + w] if ph or pw else dxp


class Dense(Layer):
    """Affine map y = flatten(x) @ W + b; flattens any trailing dims."""

    trainable = ("weights", "bias")

    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        rng = rng if rng is not None else np.random.default_rng(0)
        limit = float(np.sqrt(1.0 / in_features))
        self.weights = rng.uniform(-limit, limit,
                                   size=(self.in_features, self.out_features)).astype(dtype)
        self.bias = np.zeros(self.out_features, dtype=dtype) if bias else None
        self.grad_weights = None
        self.grad_bias = None
        self._x2 = None
        self._x_shape = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        x2 = x.reshape(x.shape[0], -1)
        if x2.shape[1] != self.in_features:
            raise ConfigurationError(
                f"dense expects {self.in_features} features, got {x2.shape[1]} from {x.shape}")
        self._x2 = x2
        self._x_shape = x.shape
        out = x2 @ self.weights
        if self.bias is not None:
            out += self.bias
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        self._require_cache("_x2")
        self.grad_weights = self._x2.T @ grad_out
        if self.bias is not None:
            self.grad_bias = grad_out.sum(axis=0)
        return (grad_out @ self.weights.T).reshape(self._x_shape)


class ReLU(Layer):
    def __init__(self):
        super().__init__()
        self._mask = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        self._require_cache("_mask")
        return grad_out * self._mask


class MaxPool2D(Layer):
    """Non-overlapping max pooling with a square window (stride == window)."""

    def __init__(self, window: int = 2):
        super().__init__()
        self.window = int(window)
        if self.window < 1:
            raise ConfigurationError(f"pool window must be positive, got {window}")
        self._argmax = None
        self._x_shape = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        b, c, h, w = x.shape
        k = self.window
        if h % k or w % k:
            raise ConfigurationError(
                f"pool window {k} does not divide input {h}x{w}")
        oh, ow = h // k, w // k
        windows = x.reshape(b, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5) \
            .reshape(b, c, oh, ow, k * k)
        self._argmax = windows.argmax(axis=-1)
        self._x_shape = x.shape
        return windows.max(axis=-1)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        self._require_cache("_argmax")
        b, c, h, w = self._x_shape
        k = self.window
        oh, ow = h // k, w // k
        dwin = np.zeros((b, c, oh, ow, k * k), dtype=grad_out.dtype)
        np.put_along_axis(dwin, self._argmax[..., None], grad_out[..., None], axis=-1)
        return dwin.reshape(b, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5) \
            .reshape(b, c, h, w)


class Dropout(Layer):
    """Inverted dropout: scales kept units by 1/(1-rate) so the train-mode
    expectation matches the eval-mode identity."""

    def __init__(self, rate: float, rng: np.random.Generator | None = None):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._scale_mask = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if not train or self.rate == 0.0:
            self._scale_mask = 1.0
            return x
        keep = self.rng.random(x.shape) >= self.rate
        self._scale_mask = keep.astype(x.dtype) / (1.0 - self.rate)
        return x * self._scale_mask

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        self._require_cache("_scale_mask")
        return grad_out * self._scale_mask


class BatchNorm(Layer):
    """Per-channel batch normalisation with learned scale/shift.

    Handles [B, D] and [B, D, H, W] inputs. Train mode normalises with batch
    statistics (biased variance) and updates running statistics; eval mode is
    a deterministic affine map using the frozen running statistics.
    """

    trainable = ("gamma", "beta")

    def __init__(self, channels: int, momentum: float = 0.1, epsilon: float = 1e-5,
                 dtype=np.float32):
        super().__init__()
        if epsilon <= 0:
            raise ConfigurationError(f"batch-norm epsilon must be > 0, got {epsilon}")
        if not 0.0 < momentum <= 1.0:
            raise ConfigurationError(f"batch-norm momentum must be in (0, 1], got {momentum}")
        self.channels = int(channels)
        self.momentum = float(momentum)
        self.epsilon = float(epsilon)
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.grad_gamma = None
        self.grad_beta = None
        self._cache = None

    def _axes_shape(self, x: np.ndarray):
        if x.ndim == 2:
            return (0,), (1, self.channels)
        if x.ndim == 4:
            return (0, 2, 3), (1, self.channels, 1, 1)
        raise ConfigurationError(f"batch-norm expects 2D or 4D input, got {x.shape}")

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        axes, bshape = self._axes_shape(x)
        if x.shape[1] != self.channels:
            raise ConfigurationError(
                f"batch-norm over {self.channels} channels got input {x.shape}")
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.running_mean = ((1.0 - m) * self.running_mean + m * mean).astype(x.dtype)
            self.running_var = ((1.0 - m) * self.running_var + m * var).astype(x.dtype)
        else:
            mean = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
        n = x.size // self.channels
        self._cache = (xhat, inv_std, axes, bshape, n, train)
        return self.gamma.reshape(bshape) * xhat + self.beta.reshape(bshape)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        self._require_cache("_cache")
        xhat, inv_std, axes, bshape, n, train = self._cache
        self.grad_gamma = (grad_out * xhat).sum(axis=axes)
        self.grad_beta = grad_out.sum(axis=axes)
        dxhat = grad_out * self.gamma.reshape(bshape)
        if not train:
            return dxhat * inv_std.reshape(bshape)
        s1 = dxhat.sum(axis=axes).reshape(bshape)
        s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
        return (inv_std.reshape(bshape) / n) * (n * dxhat - s1 - xhat * s2)


@dataclass(frozen=True)
class MeasurePoint:
    """One sparsity measurement site: the output of ``layers[layer_index]``
    is the pre-activation feeding the following nonlinearity."""
    name: str
    layer_index: int
    regularize: bool


class Network:
    """Ordered stack of named layers with tagged measurement points.

    The last measure point is the prediction layer; it may be measured but is
    never tagged for the sparsity penalty.
    """

    def __init__(self, layers: list[tuple[str, Layer]],
                 measure_points: list[MeasurePoint] | None = None):
        self.layers = list(layers)
        self.measure_points = list(measure_points or [])
        names = [n for n, _ in self.layers]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate layer names: {names}")
        for mp in self.measure_points:
            if not 0 <= mp.layer_index < len(self.layers):
                raise ConfigurationError(f"measure point {mp.name} out of range")
        if self.measure_points and self.measure_points[-1].regularize:
            raise ConfigurationError(
                "the prediction layer must not be tagged for regularization")
        self._forward_done = False

    def forward(self, x: np.ndarray, train: bool = False, record: bool = False):
        """Run the stack; with ``record`` also return {point name: pre-activation}."""
        wanted = {mp.layer_index: mp.name for mp in self.measure_points} if record else {}
        recorded: dict[str, np.ndarray] = {}
        out = x
        for i, (_, layer) in enumerate(self.layers):
            out = layer.forward(out, train=train)
            if i in wanted:
                recorded[wanted[i]] = out
        self._forward_done = True
        if record:
            return out, recorded
        return out

    def backward(self, grad_out: np.ndarray,
                 extra_grads: dict[int, np.ndarray] | None = None) -> np.ndarray:
        """Reverse pass; ``extra_grads`` adds gradient w.r.t. the output of the
        given layer index (used to chain activity penalties in)."""
        if not self._forward_done:
            raise StateError("backward called before forward")
        g = grad_out
        for i in range(len(self.layers) - 1, -1, -1):
            if extra_grads and i in extra_grads:
                g = g + extra_grads[i]
            g = self.layers[i][1].backward(g)
        return g

    def parameters(self):
        """Yield (layer_name, attr, layer) for every trainable, unfrozen array."""
        for name, layer in self.layers:
            if layer.frozen:
                continue
            for attr in layer.trainable:
                if getattr(layer, attr, None) is not None:
                    yield name, attr, layer

    def gradients(self) -> dict[tuple[str, str], np.ndarray]:
        return {(name, attr): getattr(layer, "grad_" + attr)
                for name, attr, layer in self.parameters()}

    def point_index(self, name: str) -> int:
        for mp in self.measure_points:
            if mp.name == name:
                return mp.layer_index
        raise ConfigurationError(f"no measure point named {name!r}")

    def state_arrays(self) -> dict[str, np.ndarray]:
        """All persistent arrays (parameters plus running statistics), keyed
        ``<layer>.<attr>``; used by checkpoints."""
        out = {}
        for name, layer in self.layers:
            for attr in layer.trainable + ("running_mean", "running_var"):
                arr = getattr(layer, attr, None)
                if isinstance(arr, np.ndarray):
                    out[f"{name}.{attr}"] = arr
        return out

    def load_state(self, arrays: dict[str, np.ndarray]):
        own = self.state_arrays()
        if set(own) != set(arrays):
            missing = set(own) ^ set(arrays)
            raise ConfigurationError(f"checkpoint keys do not match network: {sorted(missing)}")
        for name, layer in self.layers:
            for attr in layer.trainable + ("running_mean", "running_var"):
                arr = getattr(layer, attr, None)
                if isinstance(arr, np.ndarray):
                    incoming = arrays[f"{name}.{attr}"]
                    if incoming.shape != arr.shape:
                        raise ConfigurationError(
                            f"checkpoint {name}.{attr} has shape {incoming.shape}, expected {arr.shape}")
                    setattr(layer, attr, incoming.astype(arr.dtype))


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray):
    """Mean categorical cross entropy and its gradient w.r.t. the logits.

    Stabilised by max subtraction; labels must be class indices in [0, C).
    """
    labels = np.asarray(labels)
    b, c = logits.shape
    if labels.shape != (b,):
        raise DataError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise DataError(f"label out of range [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = float(-logp[np.arange(b), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    grad /= b
    return loss, grad.astype(logits.dtype)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == np.asarray(labels)).mean())


def weight_penalty(network: Network, kind: str, coefficient: float):
    """L1/L2 penalty over conv/dense weight tensors (biases and normalisation
    parameters excluded). Returns (value, {(layer, attr): gradient})."""
    if kind not in ("l1", "l2"):
        raise ConfigurationError(f"penalty kind must be 'l1' or 'l2', got {kind!r}")
    if coefficient < 0:
        raise ConfigurationError(f"penalty coefficient must be >= 0, got {coefficient}")
    value = 0.0
    grads: dict[tuple[str, str], np.ndarray] = {}
    for name, attr, layer in network.parameters():
        if attr != "weights":
            continue
        w = getattr(layer, attr)
        if coefficient == 0.0:
            grads[(name, attr)] = np.zeros_like(w)
            continue
        if kind == "l1":
            value += coefficient * float(np.abs(w).sum())
            grads[(name, attr)] = coefficient * np.sign(w)
        else:
            value += coefficient * float((w * w).sum())
            grads[(name, attr)] = 2.0 * coefficient * w
    return value, grads


def sgd_step(weights: np.ndarray, gradients: np.ndarray, learning_rate: float) -> np.ndarray:
    """Plain SGD update w - lr * g; no momentum, schedule, or decay."""
    if np.shape(weights) != np.shape(gradients):
        raise StateError(
            f"weight shape {np.shape(weights)} != gradient shape {np.shape(gradients)}")
    return weights - learning_rate * gradients


def apply_sgd(network: Network, learning_rate: float,
              extra_weight_grads: dict[tuple[str, str], np.ndarray] | None = None):
    """Update every trainable parameter in place from its stored gradient."""
    for name, attr, layer in network.parameters():
        grad = getattr(layer, "grad_" + attr)
        if grad is None:
            raise StateError(f"no gradient for {name}.{attr}; run backward first")
        if extra_weight_grads and (name, attr) in extra_weight_grads:
            grad = grad + extra_weight_grads[(name, attr)]
        setattr(layer, attr, sgd_step(getattr(layer, attr), grad, learning_rate))
