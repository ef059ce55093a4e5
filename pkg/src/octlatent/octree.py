"""Breadth-first occupancy octree.

Layer ``l`` (1-based) holds the occupied nodes at resolution ``2**(l-1)``
together with one occupancy byte each; the bytes of layer ``l`` describe the
nodes of layer ``l+1`` and the bytes of the last layer describe the leaf
voxels. Child ``b`` of node ``u`` is ``2u + child_offset(b)`` with
``b = 4x + 2y + z``; bit ``b`` (LSB = bit 0) of the byte marks it occupied.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .pcio import QuantizedCloud
from .tensor.sparse import Coords

_BIT_OFFSETS = np.array([[(b >> 2) & 1, (b >> 1) & 1, b & 1] for b in range(8)], dtype=np.int64)
_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.int64)


def child_offset(index: int) -> tuple[int, int, int]:
    if not 0 <= index <= 7:
        raise ValueError(f"child index {index} out of range 0..7")
    return (index >> 2) & 1, (index >> 1) & 1, index & 1


def popcount(byte_values: np.ndarray) -> np.ndarray:
    return _POPCOUNT[np.asarray(byte_values, dtype=np.int64)]


@dataclass
class OctreeLayer:
    coords: Coords
    occupancy: np.ndarray  # uint8-valued int64 array, one byte per node

    def __len__(self) -> int:
        return len(self.coords)


@dataclass
class Octree:
    depth: int
    layers: list[OctreeLayer]
    _leaves: Coords | None = field(default=None, repr=False)

    def layer(self, l: int) -> OctreeLayer:
        """1-based layer access."""
        return self.layers[l - 1]

    @property
    def leaves(self) -> Coords:
        if self._leaves is None:
            self._leaves = expand_layer(self.layers[-1].coords, self.layers[-1].occupancy)
        return self._leaves

    def coords(self, l: int) -> Coords:
        """Node coordinates of layer ``l``; ``l = depth + 1`` gives the leaves."""
        return self.leaves if l == self.depth + 1 else self.layer(l).coords

    def node_counts(self) -> list[int]:
        return [len(layer) for layer in self.layers]


def build_octree(q: QuantizedCloud) -> Octree:
    L = q.params.depth
    vox = np.asarray(q.voxels, dtype=np.int64).reshape(-1, 3)
    if len(vox) == 0:
        raise ValidationError("cannot build an octree from an empty voxel set")
    if vox.min() < 0 or vox.max() >= (1 << L):
        raise ValidationError("voxel outside the [0, 2^L) lattice")
    leaves = Coords.from_points(vox)
    layers: list[OctreeLayer] = []
    child = leaves
    for _ in range(L):
        parent = child.parents()
        arr = child.array
        idx = parent.lookup(arr >> 1)
        bit = ((arr[:, 0] & 1) << 2) | ((arr[:, 1] & 1) << 1) | (arr[:, 2] & 1)
        occ = np.zeros(len(parent), dtype=np.int64)
        np.bitwise_or.at(occ, idx, np.left_shift(1, bit))
        layers.append(OctreeLayer(parent, occ))
        child = parent
    layers.reverse()
    return Octree(L, layers, leaves)


def expand_layer(coords: Coords, occupancy: np.ndarray) -> Coords:
    """Children of every node, in canonical order."""
    occ = np.asarray(occupancy, dtype=np.int64)
    if len(occ) != len(coords):
        raise ValidationError("one occupancy byte per node is required")
    if len(occ) and (occ.min() < 1 or occ.max() > 255):
        raise ValidationError("occupancy bytes must lie in [1, 255]")
    bits = (occ[:, None] >> np.arange(8)) & 1
    node, b = np.nonzero(bits)
    kids = 2 * coords.array[node] + _BIT_OFFSETS[b]
    return Coords.from_points(kids)


def octree_from_layers(depth: int, layer_bytes: list[np.ndarray]) -> Octree:
    """Rebuild an octree from its per-layer byte sequences (decoder side)."""
    if len(layer_bytes) != depth:
        raise ValidationError("need one byte sequence per layer")
    coords = Coords(np.zeros((1, 3), dtype=np.int64))
    layers = []
    for occ in layer_bytes:
        occ = np.asarray(occ, dtype=np.int64)
        if len(occ) != len(coords):
            raise ValidationError("layer size does not match the expansion of the previous layer")
        layers.append(OctreeLayer(coords, occ))
        coords = expand_layer(coords, occ)
    return Octree(depth, layers, coords)


def octree_to_voxels(tree: Octree) -> np.ndarray:
    coords = Coords(np.zeros((1, 3), dtype=np.int64))
    for layer in tree.layers:
        if layer.coords != coords:
            raise ValidationError("layer inconsistency: nodes do not match the expansion of the previous layer")
        coords = expand_layer(coords, layer.occupancy)
    return np.array(coords.array)
