"""Minimal layer kernel for the descriptor networks.

Every layer caches what it needs during ``forward`` and consumes it in
``backward``, which returns the gradient w.r.t. the layer input and
accumulates parameter gradients into ``Tensor.grad``.

Activations use channel-last layout ``(N, H, W, C)``; descriptor-level
layers (batch norm, L2 normalization) take ``(N, D)``. Networks accept
``(N, 1, H, W)`` patches and move to channel-last once at the input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FRN_EPS = 1e-6
BN_EPS = 1e-5
ADAM_EPS = 1e-8
L2_EPS = 1e-10
# thin-input convs (e.g. the grayscale first layer) go through one im2col matmul
IM2COL_MAX_COLS = 32


class Tensor:
    """Parameter array with a gradient slot of identical shape."""

    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray, grad: np.ndarray | None = None):
        self.data = data
        if grad is not None and grad.shape != data.shape:
            raise ValueError(f"grad shape {grad.shape} != data shape {data.shape}")
        self.grad = grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


def orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float = 1.0) -> np.ndarray:
    """Random (semi-)orthogonal ``rows x cols`` matrix."""
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q


class Layer:
    training = True

    def params(self) -> dict[str, Tensor]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)


def _check_channels(x: np.ndarray, expected: int, name: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{name}: expected (N, H, W, C) input, got shape {x.shape}")
    if x.shape[-1] != expected:
        raise ValueError(f"{name}: input has {x.shape[-1]} channels, kernel expects {expected}")


class Conv2d(Layer):
    """Standard cross-correlation; weights stored as ``(k, k, C_in, C_out)``."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, stride: int = 1,
                 padding: int | None = None, bias: bool = True,
                 rng: np.random.Generator | None = None, dtype=np.float32, gain: float = 0.6):
        self.c_in, self.c_out, self.kernel, self.stride = c_in, c_out, kernel, stride
        self.padding = kernel // 2 if padding is None else padding
        rng = rng if rng is not None else np.random.default_rng(0)
        w = orthogonal(rng, c_out, c_in * kernel * kernel, gain)
        # (C_out, k*k*C_in) -> (k, k, C_in, C_out)
        w = w.reshape(c_out, kernel, kernel, c_in).transpose(1, 2, 3, 0)
        self.weight = Tensor(np.ascontiguousarray(w, dtype=dtype))
        self.bias = Tensor(np.zeros(c_out, dtype=dtype)) if bias else None

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def _out_size(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x):
        _check_channels(x, self.c_in, "conv2d")
        p, s, k = self.padding, self.stride, self.kernel
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        n = x.shape[0]
        ho, wo = self._out_size(x.shape[1], x.shape[2])
        if ho < 1 or wo < 1:
            raise ValueError(f"conv2d: input {x.shape[1:3]} too small for kernel {k}")
        w = self.weight.data
        if self.c_in * k * k <= IM2COL_MAX_COLS:
            cols = np.concatenate([xp[:, i:i + s * ho:s, j:j + s * wo:s, :]
                                   for i in range(k) for j in range(k)], axis=-1)
            out = cols @ w.reshape(-1, self.c_out)
        else:
            out = np.zeros((n, ho, wo, self.c_out), dtype=np.result_type(x, w))
            for i in range(k):
                for j in range(k):
                    out += xp[:, i:i + s * ho:s, j:j + s * wo:s, :] @ w[i, j]
        if self.bias is not None:
            out += self.bias.data
        self._xp, self._in_shape = xp, x.shape
        return out

    def backward(self, grad):
        xp, (n, h, w_, _) = self._xp, self._in_shape
        p, s, k = self.padding, self.stride, self.kernel
        ho, wo = grad.shape[1:3]
        w = self.weight.data
        g2 = grad.reshape(-1, self.c_out)
        dw = np.empty_like(w)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(i, i + s * ho, s), slice(j, j + s * wo, s))
                dw[i, j] = xp[sl].reshape(-1, self.c_in).T @ g2
                dxp[sl] += grad @ w[i, j].T
        _accumulate(self.weight, dw)
        if self.bias is not None:
            _accumulate(self.bias, grad.sum(axis=(0, 1, 2)))
        self._xp = None
        return dxp[:, p:p + h, p:p + w_, :] if p else dxp


class DepthwiseConv2d(Layer):
    """One ``k x k`` filter per input channel; weights ``(k, k, C)``."""

    def __init__(self, channels: int, kernel: int = 3, stride: int = 1,
                 padding: int | None = None, bias: bool = True,
                 rng: np.random.Generator | None = None, dtype=np.float32, gain: float = 0.6):
        self.channels, self.kernel, self.stride = channels, kernel, stride
        self.padding = kernel // 2 if padding is None else padding
        rng = rng if rng is not None else np.random.default_rng(0)
        w = orthogonal(rng, channels, kernel * kernel, gain)
        self.weight = Tensor(np.ascontiguousarray(w.T.reshape(kernel, kernel, channels), dtype=dtype))
        self.bias = Tensor(np.zeros(channels, dtype=dtype)) if bias else None

    params = Conv2d.params
    _out_size = Conv2d._out_size

    def forward(self, x):
        _check_channels(x, self.channels, "depthwise_conv2d")
        p, s, k = self.padding, self.stride, self.kernel
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        ho, wo = self._out_size(x.shape[1], x.shape[2])
        w = self.weight.data
        out = np.zeros((x.shape[0], ho, wo, self.channels), dtype=np.result_type(x, w))
        for i in range(k):
            for j in range(k):
                out += xp[:, i:i + s * ho:s, j:j + s * wo:s, :] * w[i, j]
        if self.bias is not None:
            out += self.bias.data
        self._xp, self._in_shape = xp, x.shape
        return out

    def backward(self, grad):
        xp, (n, h, w_, _) = self._xp, self._in_shape
        p, s, k = self.padding, self.stride, self.kernel
        ho, wo = grad.shape[1:3]
        w = self.weight.data
        dw = np.empty_like(w)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(i, i + s * ho, s), slice(j, j + s * wo, s))
                dw[i, j] = np.einsum("nhwc,nhwc->c", xp[sl], grad)
                dxp[sl] += grad * w[i, j]
        _accumulate(self.weight, dw)
        if self.bias is not None:
            _accumulate(self.bias, grad.sum(axis=(0, 1, 2)))
        self._xp = None
        return dxp[:, p:p + h, p:p + w_, :] if p else dxp


class DepthwiseSeparableConv(Layer):
    """Depthwise ``k x k`` filter per channel followed by a pointwise 1x1 mix."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, stride: int = 1,
                 bias: bool = True, rng: np.random.Generator | None = None, dtype=np.float32):
        self.c_in, self.c_out = c_in, c_out
        self.depthwise = DepthwiseConv2d(c_in, kernel, stride, bias=bias, rng=rng, dtype=dtype)
        self.pointwise = Conv2d(c_in, c_out, 1, 1, 0, bias=bias, rng=rng, dtype=dtype)

    def params(self):
        out = {f"depthwise.{k}": v for k, v in self.depthwise.params().items()}
        out.update({f"pointwise.{k}": v for k, v in self.pointwise.params().items()})
        return out

    def forward(self, x):
        return self.pointwise.forward(self.depthwise.forward(x))

    def backward(self, grad):
        return self.depthwise.backward(self.pointwise.backward(grad))


class FRN(Layer):
    """Filter response normalization: ``gamma * x / sqrt(mean_HW(x^2) + eps) + beta``."""

    def __init__(self, channels: int, eps: float = FRN_EPS, dtype=np.float32):
        if eps <= 0:
            raise ValueError("FRN eps must be positive")
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype))
        self.beta = Tensor(np.zeros(channels, dtype=dtype))

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def forward(self, x):
        nu2 = np.mean(x * x, axis=(1, 2), keepdims=True)
        r = 1.0 / np.sqrt(nu2 + self.eps)
        xhat = x * r
        self._xhat, self._r = xhat, r
        return self.gamma.data * xhat + self.beta.data

    def backward(self, grad):
        xhat, r = self._xhat, self._r
        _accumulate(self.gamma, np.einsum("nhwc,nhwc->c", grad, xhat))
        _accumulate(self.beta, grad.sum(axis=(0, 1, 2)))
        gx = grad * self.gamma.data
        proj = np.mean(gx * xhat, axis=(1, 2), keepdims=True)
        self._xhat = self._r = None
        return r * (gx - xhat * proj)


class TLU(Layer):
    """Thresholded linear unit ``max(x, tau)`` with learnable per-channel tau.

    At ``x == tau`` the whole gradient goes to the input.
    """

    def __init__(self, channels: int, dtype=np.float32):
        self.tau = Tensor(np.zeros(channels, dtype=dtype))

    def params(self):
        return {"tau": self.tau}

    def forward(self, x):
        self._mask = x >= self.tau.data
        return np.maximum(x, self.tau.data)

    def backward(self, grad):
        mask = self._mask
        self._mask = None
        passed = grad * mask
        axes = tuple(range(grad.ndim - 1))
        _accumulate(self.tau, grad.sum(axis=axes) - passed.sum(axis=axes))
        return passed


class BatchNorm(Layer):
    """Non-affine batch normalization over every axis but the last."""

    def __init__(self, channels: int, eps: float = BN_EPS, momentum: float = 0.1, dtype=np.float32):
        self.eps, self.momentum = eps, momentum
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x):
        axes = tuple(range(x.ndim - 1))
        if self.training:
            m = x.size // x.shape[-1]
            if x.shape[0] < 2:
                raise ValueError("batch_norm: training mode needs a batch of at least 2")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            mom = self.momentum
            self.running_mean[...] = (1 - mom) * self.running_mean + mom * mean
            self.running_var[...] = (1 - mom) * self.running_var + mom * var * (m / (m - 1))
        else:
            mean, var = self.running_mean, self.running_var
        r = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * r
        self._xhat, self._r = xhat, r
        return xhat

    def backward(self, grad):
        xhat, r = self._xhat, self._r
        self._xhat = self._r = None
        if not self.training:
            return grad * r
        axes = tuple(range(grad.ndim - 1))
        return r * (grad - grad.mean(axis=axes) - xhat * (grad * xhat).mean(axis=axes))


class L2Normalize(Layer):
    """Scale each row of ``(N, D)`` to unit Euclidean norm."""

    def __init__(self, eps: float = L2_EPS):
        self.eps = eps

    def forward(self, x):
        norm = np.sqrt(np.sum(x * x, axis=1, keepdims=True) + self.eps)
        y = x / norm
        self._y, self._norm = y, norm
        return y

    def backward(self, grad):
        y, norm = self._y, self._norm
        self._y = self._norm = None
        return (grad - y * np.sum(grad * y, axis=1, keepdims=True)) / norm


class Flatten(Layer):
    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Sequential(Layer):
    def __init__(self, layers: list[tuple[str, Layer]]):
        self.layers = layers

    def params(self):
        out = {}
        for name, layer in self.layers:
            out.update({f"{name}.{k}": v for k, v in layer.params().items()})
        return out

    def buffers(self):
        out = {}
        for name, layer in self.layers:
            out.update({f"{name}.{k}": v for k, v in layer.buffers().items()})
        return out

    def set_training(self, flag: bool) -> None:
        self.training = flag
        for _, layer in self.layers:
            layer.training = flag
            if isinstance(layer, Sequential):
                layer.set_training(flag)

    def forward(self, x):
        for _, layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for _, layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = g.astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
           stride: int = 1, padding: int = 1) -> np.ndarray:
    """Functional forward pass on ``(N, C, H, W)`` input, ``(C_out, C_in, k, k)`` weight."""
    c_out, c_in, k, _ = weight.shape
    if x.ndim != 4 or x.shape[1] != c_in:
        raise ValueError(f"conv2d: input shape {x.shape} incompatible with weight {weight.shape}")
    layer = Conv2d(c_in, c_out, k, stride, padding, bias=bias is not None, dtype=weight.dtype)
    layer.weight.data = np.ascontiguousarray(weight.transpose(2, 3, 1, 0))
    if bias is not None:
        layer.bias.data = bias
    return layer.forward(x.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2)


# --------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = ADAM_EPS
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"adam_step: grad for {name!r} has shape {g.shape}, param {p.shape}")
        if name in state.m and state.m[name].shape != p.shape:
            raise ValueError(f"adam_step: moment shape mismatch for {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
