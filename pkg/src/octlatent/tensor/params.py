"""Named parameter storage, the Adam optimizer, and the checkpoint container.

Checkpoint layout (all integers little-endian)::

    magic      8 bytes   b"OCTLCKP1"
    cfg_len    u32       length of the UTF-8 JSON configuration echo
    cfg        cfg_len bytes
    count      u32       number of tensors
    per tensor:
      name_len u16, name (UTF-8)
      ndim     u8, dims (ndim x u32)
      payload  prod(dims) x float64 LE, row-major
    adam_step  u64       optimizer step counter (moments are not stored)
"""

from __future__ import annotations

import hashlib
import json
import struct
from typing import Iterator

import numpy as np

from .autograd import Tensor, parameter

CHECKPOINT_MAGIC = b"OCTLCKP1"


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Ordered mapping of parameter name -> Tensor, with Adam moment buffers."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = parameter(data)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def grads(self) -> dict[str, np.ndarray | None]:
        return {k: t.grad for k, t in self._params.items()}

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self._params):
            missing = sorted(set(self._params) - set(arrays))
            extra = sorted(set(arrays) - set(self._params))
            raise CheckpointError(f"parameter mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for k, t in self._params.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != t.data.shape:
                raise CheckpointError(f"shape mismatch for {k}: {a.shape} vs {t.data.shape}")
            t.data = a.copy()

    def digest(self) -> bytes:
        h = hashlib.sha256()
        for k, t in self._params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.digest()


def adam_step(
    params: ParamStore,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update; clears gradients afterwards."""
    b1, b2 = betas
    params.step += 1
    t = params.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            raise ValueError(f"missing gradient for {name!r}; call zero_grad before the forward pass")
        m = params._m.get(name)
        if m is None:
            m = params._m[name] = np.zeros_like(p.data)
            params._v[name] = np.zeros_like(p.data)
        v = params._v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.grad = np.zeros_like(p.data)


def save_checkpoint(path, params: ParamStore, config: dict) -> bytes:
    blob = checkpoint_bytes(params, config)
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def checkpoint_bytes(params: ParamStore, config: dict) -> bytes:
    cfg = json.dumps(config, sort_keys=True).encode()
    out = [CHECKPOINT_MAGIC, struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(params))]
    for name, t in params.items():
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", t.data.ndim))
        out.append(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        out.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    out.append(struct.pack("<Q", params.step))
    return b"".join(out)


def parse_checkpoint(blob: bytes) -> tuple[dict, dict[str, np.ndarray], int]:
    """Return (config, arrays, adam step) from checkpoint bytes."""
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    try:
        pos = 8
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        config = json.loads(blob[pos : pos + n].decode())
        pos += n
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (nl,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + nl].decode()
            pos += nl
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            arrays[name] = arr.astype(np.float64)
        (step,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from exc
    if pos != len(blob):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return config, arrays, step


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], int]:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
