"""Small numpy engine: valid 3x3 convolution, ReLU, L2 normalization and ADAM.

Every forward op has a matching explicit backward function. There is no
autodiff tape; callers keep whatever the backward pass needs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, StateError, TrainingError

KERNEL = 3
EPS_NORM = 1e-8


@dataclass
class ConvLayer:
    weight: np.ndarray  # [out, in, 3, 3]
    bias: np.ndarray  # [out]
    relu: bool = True
    grad_weight: np.ndarray = field(init=False, repr=False)
    grad_bias: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2:] != (KERNEL, KERNEL):
            raise ShapeError(f"conv weight must be [out, in, 3, 3], got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"bias must have shape ({self.weight.shape[0]},), got {self.bias.shape}")
        self.zero_grad()

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init_uniform(cls, in_features: int, out_features: int, rng: np.random.Generator,
                     relu: bool = True, dtype=np.float32) -> "ConvLayer":
        """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases."""
        bound = 1.0 / np.sqrt(in_features * KERNEL * KERNEL)
        w = rng.uniform(-bound, bound, size=(out_features, in_features, KERNEL, KERNEL))
        return cls(w.astype(dtype), np.zeros(out_features, dtype=dtype), relu=relu)

    def zero_grad(self) -> None:
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)


@dataclass
class ConvCache:
    """What the backward pass of one conv layer needs."""
    input: np.ndarray
    pre_activation: np.ndarray


def _check_input(x: np.ndarray, layer: ConvLayer) -> None:
    if x.ndim != 3:
        raise ShapeError(f"expected input [C, H, W], got shape {x.shape}")
    c, h, w = x.shape
    if c != layer.in_features:
        raise ShapeError(f"expected {layer.in_features} input channels, got {c}")
    if h < KERNEL or w < KERNEL:
        raise ShapeError(f"input spatial size must be at least 3x3, got {h}x{w}")


def _taps(weight: np.ndarray) -> np.ndarray:
    # [3, 3, out, in], contiguous per tap so every product goes through BLAS
    return np.ascontiguousarray(weight.transpose(2, 3, 0, 1))


def conv2d_valid(x: np.ndarray, layer: ConvLayer,
                 return_cache: bool = False):
    """Valid cross-correlation of ``x`` [C, H, W] with a 3x3 layer, plus bias and activation.

    Output has shape [out, H - 2, W - 2]. The sum is split into nine shifted
    matrix products, one per kernel tap.
    """
    _check_input(x, layer)
    c, h, w = x.shape
    ho, wo = h - 2, w - 2
    o = layer.out_features
    pre = np.empty((o, ho * wo), dtype=np.result_type(x, layer.weight))
    pre[:] = layer.bias[:, None]
    taps = _taps(layer.weight)
    for k in range(KERNEL):
        for l in range(KERNEL):
            patch = x[:, k:k + ho, l:l + wo].reshape(c, -1)
            pre += taps[k, l] @ patch
    pre = pre.reshape(o, ho, wo)
    out = np.maximum(pre, 0) if layer.relu else pre
    if return_cache:
        return out, ConvCache(x, pre)
    return out


def conv2d_valid_backward(grad_out: np.ndarray, cache: ConvCache | None,
                          layer: ConvLayer) -> np.ndarray:
    """Accumulate parameter gradients into ``layer`` and return the input gradient."""
    if cache is None:
        raise StateError("conv backward called before a forward pass was recorded")
    x, pre = cache.input, cache.pre_activation
    if grad_out.shape != pre.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != output shape {pre.shape}")
    g = grad_out * (pre > 0) if layer.relu else grad_out
    c, h, w = x.shape
    o, ho, wo = g.shape
    g2 = g.reshape(o, -1)
    layer.grad_bias += g2.sum(axis=1, dtype=np.float64).astype(layer.bias.dtype)
    grad_in = np.zeros_like(x, dtype=np.result_type(x, g))
    taps = _taps(layer.weight)
    for k in range(KERNEL):
        for l in range(KERNEL):
            patch = x[:, k:k + ho, l:l + wo].reshape(c, -1)
            layer.grad_weight[:, :, k, l] += g2 @ patch.T
            grad_in[:, k:k + ho, l:l + wo] += (taps[k, l].T @ g2).reshape(c, ho, wo)
    return grad_in


def l2_normalize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Unit-normalize along ``axis``; vectors with norm below 1e-8 map to zero."""
    v = np.asarray(v)
    norm = np.sqrt(np.sum(np.square(v, dtype=np.float64), axis=axis, keepdims=True))
    safe = norm >= EPS_NORM
    scale = np.where(safe, 1.0 / np.where(safe, norm, 1.0), 0.0)
    out_dtype = v.dtype if np.issubdtype(v.dtype, np.floating) else np.float64
    return (v * scale).astype(out_dtype, copy=False)


def l2_normalize_backward(grad_out: np.ndarray, v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Gradient of :func:`l2_normalize` w.r.t. its input ``v``.

    For n = |v| and u = v / n: dv = (g - u * <u, g>) / n. Guarded vectors get zero.
    """
    norm = np.sqrt(np.sum(np.square(v, dtype=np.float64), axis=axis, keepdims=True))
    safe = norm >= EPS_NORM
    inv = np.where(safe, 1.0 / np.where(safe, norm, 1.0), 0.0)
    u = v * inv
    proj = np.sum(u * grad_out, axis=axis, keepdims=True, dtype=np.float64)
    return ((grad_out - u * proj) * inv).astype(v.dtype, copy=False)


@dataclass
class Adam:
    """ADAM with bias correction. Parameters are updated in place."""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if g.shape != params[name].shape:
                raise ShapeError(f"gradient for {name!r} has shape {g.shape}, "
                                 f"parameter has {params[name].shape}")
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in params.items():
            g = grads[name].astype(np.float64)
            if name not in self.m:
                self.m[name] = np.zeros(p.shape, dtype=np.float64)
                self.v[name] = np.zeros(p.shape, dtype=np.float64)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p -= update.astype(p.dtype)
