"""Parameterized sparse layers built on top of ParamStore."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .params import ParamStore
from .sparse import (
    CUBE_OFFSETS,
    Coords,
    KernelWeights,
    SparseTensor,
    cat,
    downsample_conv,
    kernel_offsets,
    sparse_conv,
    upsample_conv,
)


def relu(x: SparseTensor) -> SparseTensor:
    return x.with_features(ag.relu(x.features))


def add(a: SparseTensor, b: SparseTensor) -> SparseTensor:
    if a.coords != b.coords:
        raise ValueError("support mismatch")
    return a.with_features(a.features + b.features)


def sub(a: SparseTensor, b: SparseTensor) -> SparseTensor:
    if a.coords != b.coords:
        raise ValueError("support mismatch")
    return a.with_features(a.features - b.features)


def _init(rng: np.random.Generator, k: int, c_in: int, c_out: int, gain: float) -> np.ndarray:
    std = gain * np.sqrt(2.0 / (k * c_in))
    return rng.normal(0.0, std, size=(k, c_in, c_out))


class Conv:
    """Stride-1 sparse convolution with a centered ``size**3`` kernel."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, size: int = 3,
                 bias: bool = True, rng: np.random.Generator | None = None, gain: float = 1.0):
        rng = rng or np.random.default_rng(0)
        offsets = kernel_offsets(size)
        self.name = name
        w = store.add(f"{name}.w", _init(rng, len(offsets), c_in, c_out, gain))
        b = store.add(f"{name}.b", np.zeros(c_out)) if bias else None
        self.kernel = KernelWeights(offsets, w, b)

    def __call__(self, x: SparseTensor, out_coords: Coords | None = None) -> SparseTensor:
        return sparse_conv(x, self.kernel, out_coords)


class Down:
    """Stride-2, kernel-2 sparse convolution (no bias)."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 rng: np.random.Generator | None = None, gain: float = 1.0):
        rng = rng or np.random.default_rng(0)
        w = store.add(f"{name}.w", _init(rng, 8, c_in, c_out, gain))
        self.kernel = KernelWeights(CUBE_OFFSETS, w)

    def __call__(self, x: SparseTensor, out_coords: Coords | None = None) -> SparseTensor:
        return downsample_conv(x, self.kernel, out_coords)


class Up:
    """Pruned stride-2 transposed convolution (no bias)."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 rng: np.random.Generator | None = None, gain: float = 1.0):
        rng = rng or np.random.default_rng(0)
        # each target sees a single parent, so fan-in is c_in
        w = store.add(f"{name}.w", _init(rng, 1, c_in, 8 * c_out, gain).reshape(c_in, 8, c_out).transpose(1, 0, 2))
        self.kernel = KernelWeights(CUBE_OFFSETS, w)

    def __call__(self, x: SparseTensor, target: Coords) -> SparseTensor:
        return upsample_conv(x, self.kernel, target)


class IRNBlock:
    """Inception-residual block: two parallel branches, concatenated, plus skip.

    Branch a: 1^3 -> ReLU -> 3^3 (C/2 channels).
    Branch b: 1^3 -> ReLU -> 3^3 -> ReLU -> 3^3 (C/2 channels).
    """

    def __init__(self, store: ParamStore, name: str, channels: int,
                 rng: np.random.Generator | None = None):
        if channels % 2:
            raise ValueError("IRN blocks need an even channel count")
        rng = rng or np.random.default_rng(0)
        h = channels // 2
        self.channels = channels
        self.a1 = Conv(store, f"{name}.a1", channels, h, 1, rng=rng)
        self.a2 = Conv(store, f"{name}.a2", h, h, 3, rng=rng, gain=0.5)
        self.b1 = Conv(store, f"{name}.b1", channels, h, 1, rng=rng)
        self.b2 = Conv(store, f"{name}.b2", h, h, 3, rng=rng)
        self.b3 = Conv(store, f"{name}.b3", h, h, 3, rng=rng, gain=0.5)

    def __call__(self, x: SparseTensor) -> SparseTensor:
        if x.channels != self.channels:
            raise ValueError(f"IRN block expects {self.channels} channels, got {x.channels}")
        a = self.a2(relu(self.a1(x)))
        b = self.b3(relu(self.b2(relu(self.b1(x)))))
        return add(x, cat([a, b]))
