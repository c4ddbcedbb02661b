"""Siamese embedding sub-network and its checkpoint format.

The network is a stack of 3x3 valid convolutions with 64 features each,
ReLU on every layer except the last. A stack of n layers sees a
(2n + 1)-pixel patch, so 4 layers give 9x9 patches and 5 give 11x11.

Lines are embedded densely: one convolution pass over a band (or a whole
image) yields the descriptor of every patch it contains.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError, StateError
from .numeric import ConvCache, ConvLayer, conv2d_valid, conv2d_valid_backward, \
    l2_normalize, l2_normalize_backward

FEATURES = 64
STD_GUARD = 1e-4
CHECKPOINT_MAGIC = b"SSDMETRC"
CHECKPOINT_VERSION = 1


def standardize(image: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance; the std is floored at 1e-4."""
    image = np.asarray(image, dtype=np.float64)
    std = max(float(image.std()), STD_GUARD)
    return (image - image.mean()) / std


@dataclass
class EmbeddingTrace:
    caches: list[ConvCache]
    raw: np.ndarray  # last-layer output before normalization, [H', W', F]


class EmbeddingNetwork:
    def __init__(self, layers: list[ConvLayer], patch_size: int):
        if patch_size % 2 != 1 or len(layers) != (patch_size - 1) // 2:
            raise ShapeError(f"patch size {patch_size} needs {(patch_size - 1) // 2} layers, "
                             f"got {len(layers)}")
        if layers[0].in_features != 1:
            raise ShapeError("first layer must take one (gray) input channel")
        for prev, cur in zip(layers, layers[1:]):
            if cur.in_features != prev.out_features:
                raise ShapeError("layer feature counts do not chain")
        self.layers = layers
        self.patch_size = patch_size

    @classmethod
    def create(cls, patch_size: int = 9, seed: int = 0, features: int = FEATURES,
               dtype=np.float32) -> "EmbeddingNetwork":
        rng = np.random.default_rng(seed)
        n = (patch_size - 1) // 2
        layers = []
        for k in range(n):
            layers.append(ConvLayer.init_uniform(1 if k == 0 else features, features, rng,
                                                 relu=k < n - 1, dtype=dtype))
        return cls(layers, patch_size)

    @property
    def feature_dim(self) -> int:
        return self.layers[-1].out_features

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for k, layer in enumerate(self.layers):
            params[f"conv{k}.weight"] = layer.weight
            params[f"conv{k}.bias"] = layer.bias
        return params

    def gradients(self) -> dict[str, np.ndarray]:
        grads = {}
        for k, layer in enumerate(self.layers):
            grads[f"conv{k}.weight"] = layer.grad_weight
            grads[f"conv{k}.bias"] = layer.grad_bias
        return grads

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()

    def forward(self, image: np.ndarray) -> tuple[np.ndarray, EmbeddingTrace]:
        """Dense descriptors for every full patch of a 2-D ``image``.

        Returns unit descriptors of shape [H - s + 1, W - s + 1, F] where
        entry (r, k) belongs to the patch whose top-left corner is (r, k).
        """
        image = np.asarray(image)
        if image.ndim != 2:
            raise ShapeError(f"expected a 2-D image, got shape {image.shape}")
        s = self.patch_size
        if image.shape[0] < s or image.shape[1] < s:
            raise ShapeError(f"image {image.shape} is smaller than the {s}x{s} patch")
        x = image[None].astype(self.dtype, copy=False)
        caches = []
        for layer in self.layers:
            x, cache = conv2d_valid(x, layer, return_cache=True)
            caches.append(cache)
        raw = np.ascontiguousarray(x.transpose(1, 2, 0))
        return l2_normalize(raw), EmbeddingTrace(caches, raw)

    def backward(self, grad_desc: np.ndarray, trace: EmbeddingTrace | None) -> np.ndarray:
        """Backpropagate d(loss)/d(descriptors); parameter gradients accumulate."""
        if trace is None or not trace.caches:
            raise StateError("backward called before any forward pass")
        if grad_desc.shape != trace.raw.shape:
            raise ShapeError(f"descriptor gradient shape {grad_desc.shape} != {trace.raw.shape}")
        g = l2_normalize_backward(grad_desc.astype(self.dtype, copy=False), trace.raw)
        g = np.ascontiguousarray(g.transpose(2, 0, 1))
        for layer, cache in zip(reversed(self.layers), reversed(trace.caches)):
            g = conv2d_valid_backward(g, cache, layer)
        return g[0]

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        return self.forward(image)[0]


def embed_line(band: np.ndarray, net: EmbeddingNetwork) -> np.ndarray:
    """Descriptors [W - s + 1, F] of a band of height exactly ``net.patch_size``.

    Descriptor k belongs to the patch centred on column k + (s - 1) // 2.
    """
    band = np.asarray(band)
    if band.ndim == 3:
        if band.shape[0] != 1:
            raise ShapeError(f"band must have a single channel, got {band.shape[0]}")
        band = band[0]
    if band.ndim != 2 or band.shape[0] != net.patch_size:
        raise ShapeError(f"band height must be {net.patch_size}, got shape {band.shape}")
    return net.embed_image(band)[0]


def descriptor_to_column(k, patch_size: int):
    return k + (patch_size - 1) // 2


def save_checkpoint(net: EmbeddingNetwork, path: str | Path) -> None:
    """Binary layout: magic, u32 version, u32 layers, u32 features, u32 patch size,
    then per layer its float32 LE weights followed by its biases."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<4I", CHECKPOINT_VERSION, len(net.layers), net.feature_dim,
                             net.patch_size))
        for layer in net.layers:
            fh.write(np.ascontiguousarray(layer.weight, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> EmbeddingNetwork:
    data = Path(path).read_bytes()
    head = len(CHECKPOINT_MAGIC)
    if data[:head] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a metric checkpoint (bad magic)", 0)
    if len(data) < head + 16:
        raise FormatError(f"{path}: truncated header", len(data))
    version, n_layers, features, patch_size = struct.unpack_from("<4I", data, head)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}", head)
    offset = head + 16
    layers = []
    for k in range(n_layers):
        in_f = 1 if k == 0 else features
        n_w = features * in_f * 9
        need = 4 * (n_w + features)
        if offset + need > len(data):
            raise FormatError(f"{path}: truncated data for layer {k}", offset)
        w = np.frombuffer(data, dtype="<f4", count=n_w, offset=offset)
        b = np.frombuffer(data, dtype="<f4", count=features, offset=offset + 4 * n_w)
        offset += need
        layers.append(ConvLayer(w.reshape(features, in_f, 3, 3).astype(np.float32),
                                b.astype(np.float32), relu=k < n_layers - 1))
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes", offset)
    return EmbeddingNetwork(layers, patch_size)
