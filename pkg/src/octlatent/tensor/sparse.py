"""Coordinate-keyed sparse tensors and generalized sparse convolution.

Coordinates are non-negative integer triples packed into a single int64 key
(21 bits per axis), so lexicographic order of coordinates equals numeric order
of keys. Kernel maps between two coordinate sets are computed once and cached
on the output ``Coords`` object.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, as_tensor, custom, concat as _concat

AXIS_BITS = 21
AXIS_LIMIT = 1 << AXIS_BITS

CUBE_OFFSETS = np.array(list(itertools.product((0, 1), repeat=3)), dtype=np.int64)


def kernel_offsets(size: int) -> np.ndarray:
    """Lexicographically ordered offsets of a centered ``size**3`` kernel."""
    if size % 2 == 0:
        raise ValueError("centered kernels need an odd size")
    r = size // 2
    return np.array(list(itertools.product(range(-r, r + 1), repeat=3)), dtype=np.int64)


def pack(coords: np.ndarray) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64)
    return (c[:, 0] << (2 * AXIS_BITS)) | (c[:, 1] << AXIS_BITS) | c[:, 2]


def unpack(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    mask = AXIS_LIMIT - 1
    return np.stack([(keys >> (2 * AXIS_BITS)) & mask, (keys >> AXIS_BITS) & mask, keys & mask], axis=1)


class Coords:
    """An immutable, canonically ordered set of integer 3D coordinates."""

    __slots__ = ("array", "keys", "_cache", "__weakref__")

    def __init__(self, array, *, keys: np.ndarray | None = None):
        arr = np.ascontiguousarray(np.asarray(array, dtype=np.int64).reshape(-1, 3))
        if arr.size and (arr.min() < 0 or arr.max() >= AXIS_LIMIT):
            raise ValueError("coordinates must lie in [0, 2**21)")
        if keys is None:
            keys = pack(arr)
        if len(keys) > 1 and not np.all(keys[1:] > keys[:-1]):
            raise ValueError("coordinates must be strictly increasing lexicographically")
        arr.setflags(write=False)
        keys = np.asarray(keys, dtype=np.int64)
        keys.setflags(write=False)
        self.array = arr
        self.keys = keys
        self._cache: dict = {}

    @classmethod
    def from_points(cls, points) -> "Coords":
        """Sort and deduplicate an arbitrary coordinate list."""
        arr = np.asarray(points, dtype=np.int64).reshape(-1, 3)
        if arr.size and (arr.min() < 0 or arr.max() >= AXIS_LIMIT):
            raise ValueError("coordinates must lie in [0, 2**21)")
        keys = np.unique(pack(arr))
        return cls(unpack(keys), keys=keys)

    def __len__(self) -> int:
        return len(self.keys)

    def __eq__(self, other) -> bool:
        if self is other:
            return True
        return isinstance(other, Coords) and np.array_equal(self.keys, other.keys)

    __hash__ = object.__hash__

    def __repr__(self) -> str:
        return f"Coords(n={len(self)})"

    def lookup(self, query: np.ndarray) -> np.ndarray:
        """Index of each query coordinate in this set, -1 where absent."""
        q = np.asarray(query, dtype=np.int64).reshape(-1, 3)
        out = np.full(len(q), -1, dtype=np.int64)
        if len(self) == 0 or len(q) == 0:
            return out
        ok = np.all((q >= 0) & (q < AXIS_LIMIT), axis=1)
        qk = pack(q[ok])
        pos = np.searchsorted(self.keys, qk)
        pos_c = np.minimum(pos, len(self.keys) - 1)
        hit = self.keys[pos_c] == qk
        idx = np.where(hit, pos_c, -1)
        out[ok] = idx
        return out

    def parents(self) -> "Coords":
        """floor(c / 2) of every coordinate, deduplicated (cached)."""
        p = self._cache.get("parents")
        if p is None:
            p = Coords.from_points(self.array >> 1)
            self._cache["parents"] = p
        return p

    def children_of(self, parents: "Coords") -> bool:
        return self.parents() == parents


@dataclass
class SparseTensor:
    coords: Coords
    features: Tensor

    def __post_init__(self):
        self.features = as_tensor(self.features)
        if self.features.data.ndim != 2 or self.features.shape[0] != len(self.coords):
            raise ValueError(
                f"feature rows {self.features.shape} do not match {len(self.coords)} coordinates"
            )

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @property
    def F(self) -> np.ndarray:
        return self.features.data

    def __len__(self) -> int:
        return len(self.coords)

    @classmethod
    def zeros(cls, coords: Coords, channels: int) -> "SparseTensor":
        return cls(coords, Tensor(np.zeros((len(coords), channels))))

    def with_features(self, features) -> "SparseTensor":
        return SparseTensor(self.coords, features)


@dataclass
class KernelWeights:
    """Per-offset weight matrices ``W_i`` (stacked as K x C_in x C_out) and an optional bias."""

    offsets: np.ndarray
    weight: Tensor
    bias: Tensor | None = None

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.int64).reshape(-1, 3)
        if self.weight.data.ndim != 3 or self.weight.shape[0] != len(self.offsets):
            raise ValueError("weight must be stacked K x C_in x C_out matching the offsets")
        if len(np.unique(pack(self.offsets + 4))) != len(self.offsets):
            raise ValueError("kernel offsets must be unique")
        if self.bias is not None and self.bias.shape != (self.weight.shape[2],):
            raise ValueError("bias must have C_out entries")

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[2]


def same_coords(*tensors: SparseTensor) -> Coords:
    first = tensors[0].coords
    for t in tensors[1:]:
        if t.coords != first:
            raise ValueError("sparse tensors are supported on different coordinate sets")
    return first


def cat(tensors: list[SparseTensor]) -> SparseTensor:
    coords = same_coords(*tensors)
    return SparseTensor(coords, _concat([t.features for t in tensors], axis=1))


# kernel maps -------------------------------------------------------------


def _conv_map(in_coords: Coords, out_coords: Coords, offsets: np.ndarray):
    """For each offset i, the (out_idx, in_idx) pairs with out + i in the input."""
    key = ("conv", id(in_coords), offsets.tobytes())
    hit = out_coords._cache.get(key)
    if hit is not None and hit[0] is in_coords:
        return hit[1]
    pairs = []
    out_arr = out_coords.array
    for k, off in enumerate(offsets):
        idx = in_coords.lookup(out_arr + off)
        found = np.nonzero(idx >= 0)[0]
        if len(found):
            pairs.append((k, found, idx[found]))
    out_coords._cache[key] = (in_coords, pairs)
    return pairs


def _gather_matmul(x: Tensor, weight: Tensor, pairs, n_out: int) -> Tensor:
    xd, wd = x.data, weight.data
    out = np.zeros((n_out, wd.shape[2]))
    for k, o_idx, i_idx in pairs:
        out[o_idx] += xd[i_idx] @ wd[k]

    def back(g):
        gx = np.zeros_like(xd)
        gw = np.zeros_like(wd)
        for k, o_idx, i_idx in pairs:
            go = g[o_idx]
            gx[i_idx] += go @ wd[k].T
            gw[k] = xd[i_idx].T @ go
        return gx, gw

    return custom(out, (x, weight), back)


def _check_channels(x: SparseTensor, w: KernelWeights) -> None:
    if x.channels != w.c_in:
        raise ValueError(f"input has {x.channels} channels, kernel expects {w.c_in}")


def _with_bias(t: Tensor, w: KernelWeights) -> Tensor:
    return t if w.bias is None else t + w.bias


def sparse_conv(x: SparseTensor, w: KernelWeights, out_coords: Coords | None = None) -> SparseTensor:
    """Stride-1 generalized sparse convolution; output defaults to the input support."""
    _check_channels(x, w)
    out_coords = x.coords if out_coords is None else out_coords
    if len(w.offsets) == 1 and not w.offsets.any() and out_coords is x.coords:
        return SparseTensor(out_coords, _with_bias(_pointwise(x, w), w))
    pairs = _conv_map(x.coords, out_coords, w.offsets)
    y = _gather_matmul(x.features, w.weight, pairs, len(out_coords))
    return SparseTensor(out_coords, _with_bias(y, w))


def _pointwise(x: SparseTensor, w: KernelWeights) -> Tensor:
    xd, wd = x.features.data, w.weight.data

    def back(g):
        return g @ wd[0].T, (xd.T @ g)[None]

    return custom(xd @ wd[0], (x.features, w.weight), back)


def _require_cube(w: KernelWeights) -> None:
    if len(w.offsets) != 8 or not np.array_equal(w.offsets, CUBE_OFFSETS):
        raise ValueError("stride-2 kernels must have support exactly {0,1}^3 in lexicographic order")


def downsample_conv(x: SparseTensor, w: KernelWeights, out_coords: Coords | None = None) -> SparseTensor:
    """Stride-2, kernel-2 convolution onto the parent coordinates."""
    _require_cube(w)
    _check_channels(x, w)
    parents = x.coords.parents()
    if out_coords is not None:
        if out_coords != parents:
            raise ValueError("output coordinates are not the parent set of the input")
        parents = out_coords
    key = ("down", id(x.coords))
    hit = parents._cache.get(key)
    if hit is not None and hit[0] is x.coords:
        pairs = hit[1]
    else:
        arr = x.coords.array
        parent_idx = parents.lookup(arr >> 1)
        code = ((arr[:, 0] & 1) << 2) | ((arr[:, 1] & 1) << 1) | (arr[:, 2] & 1)
        pairs = []
        for k in range(8):
            sel = np.nonzero(code == k)[0]
            if len(sel):
                pairs.append((k, parent_idx[sel], sel))
        parents._cache[key] = (x.coords, pairs)
    y = _gather_matmul(x.features, w.weight, pairs, len(parents))
    return SparseTensor(parents, _with_bias(y, w))


def upsample_conv(x: SparseTensor, w: KernelWeights, target: Coords) -> SparseTensor:
    """Pruned stride-2 transposed convolution: out(c) = W[c mod 2] . x(floor(c/2)) on ``target`` only."""
    _require_cube(w)
    _check_channels(x, w)
    key = ("up", id(x.coords))
    hit = target._cache.get(key)
    if hit is not None and hit[0] is x.coords:
        pairs = hit[1]
    else:
        arr = target.array
        parent_idx = x.coords.lookup(arr >> 1)
        if np.any(parent_idx < 0):
            raise ValueError("orphan target coordinate: parent missing from the input")
        code = ((arr[:, 0] & 1) << 2) | ((arr[:, 1] & 1) << 1) | (arr[:, 2] & 1)
        pairs = []
        for k in range(8):
            sel = np.nonzero(code == k)[0]
            if len(sel):
                pairs.append((k, sel, parent_idx[sel]))
        target._cache[key] = (x.coords, pairs)
    y = _gather_matmul(x.features, w.weight, pairs, len(target))
    return SparseTensor(target, _with_bias(y, w))
