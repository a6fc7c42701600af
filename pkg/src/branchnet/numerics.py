"""Layer forward/backward math, the SGD optimizer, and a gradient checker.

Tensors are plain numpy ndarrays (C-contiguous, float32 or float64).
Feature maps are (B, C, H, W); dense activations are (B, D). Each layer
is a small single-writer object that caches whatever its backward pass
needs; backward returns the input gradient and stores parameter
gradients in ``layer.grads``.

Convolutions are cross-correlations (no kernel flip), computed as one
GEMM over an im2col patch matrix supplied by the active kernel backend.
"""

import numpy as np

from . import backend

EPS_LOG = 1e-12


class NumericsError(ValueError):
    """Shape mismatch, non-finite values, or invalid layer configuration."""


def assert_finite(x, what="tensor"):
    if not np.all(np.isfinite(x)):
        raise NumericsError(f"non-finite values in {what}")


def glorot_uniform(shape, fan_in, fan_out, rng, dtype):
    """Uniform init in +-sqrt(6/(fan_in+fan_out)), suited to tanh units."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def conv_output_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def conv_padding(kernel, padding):
    """Pixels of zero padding per side for 'same' or 'valid' mode."""
    if padding == "valid":
        return 0
    if padding == "same":
        if kernel % 2 == 0:
            raise NumericsError("same padding requires an odd kernel size")
        return (kernel - 1) // 2
    raise NumericsError(f"padding must be 'same' or 'valid', got {padding!r}")


class Conv2d:
    """k x k convolution; weights (F, C, k, k), bias (F,)."""

    def __init__(self, in_channels, out_channels, kernel, stride=1,
                 padding="same", rng=None, dtype=np.float32):
        if stride < 1:
            raise NumericsError("stride must be >= 1")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.pad = conv_padding(kernel, padding)
        fan_in = in_channels * kernel * kernel
        fan_out = out_channels * kernel * kernel
        rng = rng or np.random.default_rng()
        self.params = {
            "w": glorot_uniform((out_channels, in_channels, kernel, kernel),
                                fan_in, fan_out, rng, dtype),
            "b": np.zeros(out_channels, dtype=dtype),
        }
        self.grads = {}
        self.calls = 0
        self._cols = None
        self._in_shape = None

    def forward(self, x):
        b, c, h, w = x.shape
        if c != self.in_channels:
            raise NumericsError(
                f"expected {self.in_channels} input channels, got {c}")
        k, s, p = self.kernel, self.stride, self.pad
        if h + 2 * p < k or w + 2 * p < k:
            raise NumericsError("kernel larger than padded input")
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        oh = (x.shape[2] - k) // s + 1
        ow = (x.shape[3] - k) // s + 1
        if oh < 1 or ow < 1:
            raise NumericsError("zero-sized convolution output")
        cols = backend.im2col(np.ascontiguousarray(x), k, s)
        w2d = self.params["w"].reshape(self.out_channels, -1)
        out = cols @ w2d.T + self.params["b"]
        self.calls += 1
        self._cols = cols
        self._in_shape = (b, c, h, w)
        self._out_hw = (oh, ow)
        return out.reshape(b, oh, ow, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, dy):
        b, c, h, w = self._in_shape
        k, s, p = self.kernel, self.stride, self.pad
        oh, ow = self._out_hw
        dy2d = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(-1, self.out_channels)
        w2d = self.params["w"].reshape(self.out_channels, -1)
        self.grads = {
            "w": (dy2d.T @ self._cols).reshape(self.params["w"].shape),
            "b": dy2d.sum(axis=0),
        }
        dcols = np.ascontiguousarray(dy2d @ w2d)
        dxp = backend.col2im(dcols, b, c, h + 2 * p, w + 2 * p, k, s)
        self._cols = None
        if p:
            return dxp[:, :, p:p + h, p:p + w]
        return dxp


class MaxPool2:
    """2x2 max pooling, stride 2; gradient goes to the first window max."""

    def forward(self, x):
        if x.shape[2] < 2 or x.shape[3] < 2:
            raise NumericsError("maxpool needs spatial dimensions >= 2")
        out, idx = backend.maxpool2_forward(np.ascontiguousarray(x))
        self._idx = idx
        self._in_hw = x.shape[2:]
        return out

    def backward(self, dy):
        h, w = self._in_hw
        return backend.maxpool2_backward(np.ascontiguousarray(dy), self._idx, h, w)


class BatchNorm2d:
    """Per-channel batch normalization over (B, H, W) with running stats."""

    def __init__(self, channels, momentum=0.99, eps=1e-5, dtype=np.float32):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.params = {
            "gamma": np.ones(channels, dtype=dtype),
            "beta": np.zeros(channels, dtype=dtype),
        }
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.grads = {}

    def forward(self, x, train):
        self._train = train
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = self.momentum
            self.running_mean = (m * self.running_mean + (1 - m) * mean).astype(x.dtype)
            self.running_var = (m * self.running_var + (1 - m) * var).astype(x.dtype)
        else:
            mean = self.running_mean
            var = self.running_var
        istd = 1.0 / np.sqrt(var + self.eps)
        xnorm = (x - mean[:, None, None]) * istd[:, None, None]
        self._xnorm = xnorm
        self._istd = istd
        return self.params["gamma"][:, None, None] * xnorm + self.params["beta"][:, None, None]

    def backward(self, dy):
        xnorm, istd = self._xnorm, self._istd
        self.grads = {
            "gamma": (dy * xnorm).sum(axis=(0, 2, 3)),
            "beta": dy.sum(axis=(0, 2, 3)),
        }
        dxnorm = dy * self.params["gamma"][:, None, None]
        if not self._train:
            return dxnorm * istd[:, None, None]
        # batch statistics depend on x, so the usual three-term formula
        n = dy.shape[0] * dy.shape[2] * dy.shape[3]
        sum_d = dxnorm.sum(axis=(0, 2, 3))
        sum_dx = (dxnorm * xnorm).sum(axis=(0, 2, 3))
        dx = (dxnorm - (sum_d[:, None, None] + xnorm * sum_dx[:, None, None]) / n)
        return dx * istd[:, None, None]


class Dense:
    """Affine layer: (B, D) @ (D, U) + bias."""

    def __init__(self, in_features, out_features, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng()
        self.params = {
            "w": glorot_uniform((in_features, out_features),
                                in_features, out_features, rng, dtype),
            "b": np.zeros(out_features, dtype=dtype),
        }
        self.grads = {}

    def forward(self, x):
        if x.shape[1] != self.params["w"].shape[0]:
            raise NumericsError(
                f"dense expects {self.params['w'].shape[0]} features, got {x.shape[1]}")
        self._x = x
        return x @ self.params["w"] + self.params["b"]

    def backward(self, dy):
        self.grads = {"w": self._x.T @ dy, "b": dy.sum(axis=0)}
        return dy @ self.params["w"].T


class Tanh:
    def forward(self, x):
        y = np.tanh(x)
        self._y = y
        return y

    def backward(self, dy):
        return dy * (1.0 - self._y * self._y)


def softmax(logits):
    """Row-wise softmax with max subtraction for stability."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_soft(predicted, target, eps=EPS_LOG):
    """Mean over the batch of -sum_k target_k * ln(predicted_k + eps).

    Both arguments are (B, K) probability rows; target rows must sum to 1
    within 1e-6.
    """
    rowsums = target.sum(axis=1)
    if np.any(np.abs(rowsums - 1.0) > 1e-6):
        raise NumericsError("target rows are not probability distributions")
    return float(-(target * np.log(predicted + eps)).sum(axis=1).mean())


class SoftmaxCrossEntropy:
    """Softmax output layer with the fused cross-entropy backward.

    ``forward`` turns logits into probabilities; ``backward(target)``
    returns the gradient w.r.t. the logits, (p - t) / B, optionally
    scaled (used to average branch losses).
    """

    def forward(self, logits):
        p = softmax(logits)
        self._p = p
        return p

    def loss(self, target):
        return cross_entropy_soft(self._p, target)

    def backward(self, target, scale=1.0):
        b = self._p.shape[0]
        return (self._p - target) * (scale / b)


class SGD:
    """Momentum SGD with per-update learning-rate decay.

    Effective rate at update t (0-based) is base_lr / (1 + decay * t);
    velocity update v <- mu * v - lr * g, then w <- w + v. Velocities are
    keyed by parameter name so state survives checkpointing.
    """

    def __init__(self, base_lr, decay=0.0, momentum=0.0):
        if base_lr <= 0:
            raise NumericsError("base_lr must be positive")
        self.base_lr = base_lr
        self.decay = decay
        self.momentum = momentum
        self.step_count = 0
        self.velocity = {}

    def effective_lr(self):
        return self.base_lr / (1.0 + self.decay * self.step_count)

    def step(self, params, grads):
        """Apply one update to every parameter present in *grads*."""
        lr = self.effective_lr()
        mu = self.momentum
        for name, g in grads.items():
            w = params[name]
            if g.shape != w.shape:
                raise NumericsError(f"gradient shape mismatch for {name}")
            assert_finite(g, f"gradient of {name}")
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(w)
            v = mu * v - lr * g.astype(w.dtype)
            self.velocity[name] = v
            w += v
        self.step_count += 1


def _central_diff(loss_fn, arr, h):
    num = np.empty_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    out = num.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        lp = loss_fn()
        flat[i] = orig - h
        lm = loss_fn()
        flat[i] = orig
        out[i] = (lp - lm) / (2.0 * h)
    return num


def _max_rel_error(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check(layer, x, h=1e-5, rng=None, forward_kwargs=None):
    """Max relative error between analytic and central-difference gradients.

    The layer output is reduced to a scalar through a fixed random
    projection; the error is taken over the input and all parameters.
    Run in float64 for the tight (1e-6) tolerance regime.
    """
    rng = rng or np.random.default_rng(0)
    kw = forward_kwargs or {}
    y = layer.forward(x, **kw)
    proj = rng.standard_normal(y.shape)

    def loss_fn():
        return float((layer.forward(x, **kw) * proj).sum())

    layer.forward(x, **kw)
    dx = layer.backward(proj.astype(x.dtype))
    analytic = {"__input__": dx.astype(np.float64)}
    for name, g in getattr(layer, "grads", {}).items():
        analytic[name] = g.astype(np.float64)

    worst = 0.0
    worst = max(worst, _max_rel_error(analytic["__input__"], _central_diff(loss_fn, x, h)))
    params = getattr(layer, "params", {})
    for name in params:
        num = _central_diff(loss_fn, params[name], h)
        worst = max(worst, _max_rel_error(analytic[name], num))
    return worst


def grad_check_softmax_xent(logits, target, h=1e-5):
    """Gradient check for the fused softmax + soft-target cross entropy."""
    layer = SoftmaxCrossEntropy()

    def loss_fn():
        layer.forward(logits)
        return layer.loss(target)

    loss_fn()
    analytic = layer.backward(target).astype(np.float64)
    numeric = _central_diff(loss_fn, logits, h)
    return _max_rel_error(analytic, numeric)
