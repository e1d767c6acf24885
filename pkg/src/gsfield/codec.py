"""MLP decompression codecs mapping K-dim rendered features to D-dim
embedding space, with forward, backward, and seeded initialization.

One codec per branch (region / context); the two are independent networks.
ReLU on all layers but the last. Default shape is K -> 64 -> D.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidPrimitiveError, ShapeError, UsageError

NORM_FLOOR = 1e-8


@dataclass
class MlpCodec:
    weights: list  # [(out, in) float32]
    biases: list  # [(out,) float32]

    def __post_init__(self):
        if not self.weights or len(self.weights) != len(self.biases):
            raise ShapeError("codec: weights and biases must pair up, one per layer")
        self.weights = [np.ascontiguousarray(w, dtype=np.float32) for w in self.weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float32) for b in self.biases]
        prev = None
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"codec layer {i}: weight {w.shape} / bias {b.shape}")
            if prev is not None and w.shape[1] != prev:
                raise ShapeError(
                    f"codec layer {i}: input dim {w.shape[1]} does not chain with {prev}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise InvalidPrimitiveError(f"codec layer {i}: non-finite parameters")
            prev = w.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @classmethod
    def create(cls, in_dim: int, out_dim: int, hidden=(64,), seed: int = 0) -> "MlpCodec":
        """Seeded Glorot-uniform initialization (+- sqrt(6 / (fan_in + fan_out)))."""
        rng = np.random.default_rng(seed)
        dims = [in_dim, *hidden, out_dim]
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(weights=weights, biases=biases)

    def params64(self) -> list:
        """Float64 working copies, weight/bias interleaved per layer."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w.astype(np.float64))
            out.append(b.astype(np.float64))
        return out

    @classmethod
    def from_params(cls, params: list) -> "MlpCodec":
        return cls(weights=[params[i] for i in range(0, len(params), 2)],
                   biases=[params[i] for i in range(1, len(params), 2)])


@dataclass
class CodecCache:
    inputs: list  # per-layer input activations, flattened to (P, dim)
    shape: tuple  # leading shape of the original feats array


def _flatten(feats: np.ndarray, in_dim: int):
    feats = np.asarray(feats)
    if feats.shape[-1] != in_dim:
        raise ShapeError(
            f"decode: feature channels {feats.shape[-1]} != codec input {in_dim}")
    lead = feats.shape[:-1]
    return feats.reshape(-1, in_dim), lead


def decode(codec: MlpCodec, feats: np.ndarray, normalize: bool = False,
           params: list | None = None) -> np.ndarray:
    """Apply the codec per pixel: (..., K) -> (..., D).

    ``normalize`` L2-normalizes each output vector (query-space output);
    training consumes the raw outputs since the cosine loss normalizes itself.
    """
    out, _ = decode_with_cache(codec, feats, params=params)
    if normalize:
        norms = np.linalg.norm(out, axis=-1, keepdims=True)
        out = out / np.maximum(norms, NORM_FLOOR)
    return out


def decode_with_cache(codec: MlpCodec, feats: np.ndarray,
                      params: list | None = None):
    """Forward pass retaining per-layer inputs for the backward pass."""
    if params is None:
        params = codec.params64()
    x, lead = _flatten(feats, codec.in_dim)
    x = x.astype(np.float64)
    inputs = []
    n_layers = len(params) // 2
    for i in range(n_layers):
        w, b = params[2 * i], params[2 * i + 1]
        inputs.append(x)
        x = x @ w.T + b
        if i < n_layers - 1:
            x = np.maximum(x, 0.0)
    return x.reshape(*lead, -1), CodecCache(inputs=inputs, shape=lead)


def codec_backward(codec: MlpCodec, cache: CodecCache, upstream: np.ndarray,
                   params: list | None = None):
    """Backprop through the codec.

    Returns (param_grads, input_grads): ``param_grads`` interleaves dW/db per
    layer matching ``params64()`` order; ``input_grads`` has the caller's
    leading shape and feeds the rasterizer backward as its upstream.
    """
    if cache is None or not isinstance(cache, CodecCache):
        raise UsageError("codec_backward requires the cache from decode_with_cache")
    if params is None:
        params = codec.params64()
    n_layers = len(params) // 2
    up = np.asarray(upstream, np.float64)
    if up.shape[:-1] != cache.shape or up.shape[-1] != codec.out_dim:
        raise ShapeError(
            f"codec_backward: upstream shape {up.shape} does not match "
            f"{cache.shape + (codec.out_dim,)}")
    dz = up.reshape(-1, codec.out_dim)
    grads = [None] * (2 * n_layers)
    for i in range(n_layers - 1, -1, -1):
        w = params[2 * i]
        x = cache.inputs[i]
        grads[2 * i] = dz.T @ x
        grads[2 * i + 1] = dz.sum(axis=0)
        dx = dz @ w
        if i > 0:
            # ReLU mask of the previous layer's pre-activation == its output > 0.
            dx = dx * (x > 0)
        dz = dx
    return grads, dz.reshape(*cache.shape, codec.in_dim)
