"""Compress / decompress, bitstream framing and diagnostics.

Frame layout (all little-endian)::

    magic      4 bytes  b"MLGE"
    version    u8
    L, k       u8, u8
    markov     u8
    soft_ops   u8
    bias       3 x f64
    qs         f64
    checksum   8 bytes  (leading bytes of the model digest)
    n_seg      u16
    n_seg x (segment id u8, byte length u32)
    segment payloads, in table order

Segment ids: 0 = adaptive order-0 bytes of layers 1..L-k, 1 = root latent,
2j = residual of learned layer j, 2j+1 = occupancy of learned layer j.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import coder
from .entropy import RateReport
from .errors import ChecksumMismatch, CorruptStreamError, ValidationError
from .model import LatentModel, ModelConfig
from .octree import Octree, build_octree, expand_layer
from .pcio import PointCloud, QuantParams, QuantizedCloud, dequantize, quantize, save_ply
from .tensor import autograd as ag
from .tensor.autograd import Tensor
from .tensor.params import CheckpointError, checkpoint_bytes, parse_checkpoint
from .tensor.sparse import Coords, SparseTensor

MAGIC = b"MLGE"
VERSION = 1
_FIXED = struct.Struct("<4sBBBBB3dd8sH")
_ENTRY = struct.Struct("<BI")

SEG_TOP = 0
SEG_ROOT = 1


def residual_segment(j: int) -> int:
    return 2 * j


def occupancy_segment(j: int) -> int:
    return 2 * j + 1


@dataclass
class CompressedFrame:
    depth: int
    k: int
    markov_order: int
    soft_ops: bool
    params: QuantParams
    checksum: bytes
    segments: list[tuple[int, bytes]] = field(default_factory=list)
    # encoder-side diagnostics, not serialized: (segment id, symbols, table bits, model bits)
    stats: list = field(default_factory=list, compare=False, repr=False)

    def segment(self, sid: int) -> bytes:
        for i, data in self.segments:
            if i == sid:
                return data
        raise CorruptStreamError(f"segment {sid} missing from frame")

    def header_size(self) -> int:
        return _FIXED.size + _ENTRY.size * len(self.segments)

    def to_bytes(self) -> bytes:
        p = self.params
        head = _FIXED.pack(MAGIC, VERSION, self.depth, self.k, self.markov_order, int(self.soft_ops),
                           *p.bias, p.qs, self.checksum, len(self.segments))
        table = b"".join(_ENTRY.pack(i, len(d)) for i, d in self.segments)
        return head + table + b"".join(d for _, d in self.segments)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CompressedFrame":
        if len(blob) < _FIXED.size:
            raise CorruptStreamError("frame shorter than its fixed header")
        magic, ver, L, k, markov, soft, bx, by, bz, qs, checksum, n = _FIXED.unpack_from(blob, 0)
        if magic != MAGIC:
            raise CorruptStreamError("bad frame magic")
        if ver != VERSION:
            raise CorruptStreamError(f"unsupported frame version {ver}")
        if markov not in (1, 2) or soft not in (0, 1) or L < 1 or k >= L + 1:
            raise CorruptStreamError("invalid header fields")
        if not (qs > 0 and np.isfinite(qs) and np.all(np.isfinite([bx, by, bz]))):
            raise CorruptStreamError("invalid quantization parameters")
        pos = _FIXED.size
        if len(blob) < pos + n * _ENTRY.size:
            raise CorruptStreamError("truncated segment table")
        entries = [_ENTRY.unpack_from(blob, pos + i * _ENTRY.size) for i in range(n)]
        pos += n * _ENTRY.size
        if pos + sum(length for _, length in entries) != len(blob):
            raise CorruptStreamError("segment lengths do not match the frame size")
        segments = []
        for sid, length in entries:
            segments.append((sid, bytes(blob[pos:pos + length])))
            pos += length
        params = QuantParams((bx, by, bz), qs, L)
        return cls(L, k, markov, bool(soft), params, checksum, segments)


# shared layer walk ---------------------------------------------------------


def _finite(p: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(p)):
        raise ValidationError(f"model produced non-finite {what} probabilities")
    return p


def _residual_rows(model: LatentModel, j: int) -> np.ndarray:
    return coder.quantize_pmf_rows(_finite(model.densities[j].pmf_table(), "residual"))


class _EncoderSide:
    def __init__(self, model: LatentModel, tree: Octree, f: dict):
        self.model, self.tree, self.f = model, tree, f
        self.segments: list[tuple[int, bytes]] = []
        self.stats: list = []

    def coords(self, l: int) -> Coords:
        return self.tree.coords(l)

    def root(self, l: int, rows: np.ndarray) -> SparseTensor:
        rhat = self.model.coding_residual(self.f[l])
        self._code_residual(SEG_ROOT, rhat, rows)
        return rhat

    def residual(self, j: int, l: int, fbar: SparseTensor, rows: np.ndarray) -> SparseTensor:
        r = self.model.soft_subtract(j, self.f[l], fbar)
        rhat = self.model.coding_residual(r)
        self._code_residual(residual_segment(j), rhat, rows)
        return rhat

    def _code_residual(self, sid: int, rhat: SparseTensor, rows: np.ndarray) -> None:
        B = self.model.cfg.clamp
        sym = rhat.F.astype(np.int64).reshape(-1) + B
        row_of = np.tile(np.arange(rhat.channels), len(rhat))
        self.segments.append((sid, coder.encode_with_rows(sym, rows, row_of)))
        j = 0 if sid == SEG_ROOT else sid // 2
        p = self.model.densities[j].pmf_table()[row_of, sym]
        self.stats.append((sid, len(sym), coder.rows_cross_entropy(sym, rows, row_of),
                           float(-np.log2(p).sum())))

    def occupancy(self, j: int, l: int, rows: np.ndarray, probs: np.ndarray) -> np.ndarray:
        occ = self.tree.layer(l).occupancy
        self.segments.append((occupancy_segment(j), coder.encode_with_rows(occ, rows)))
        p = probs[np.arange(len(occ)), occ]
        self.stats.append((occupancy_segment(j), len(occ), coder.rows_cross_entropy(occ, rows),
                           float(-np.log2(p).sum())))
        return occ


class _DecoderSide:
    def __init__(self, model: LatentModel, frame: CompressedFrame, coords: dict):
        self.model, self.frame, self._coords = model, frame, coords

    def coords(self, l: int) -> Coords:
        return self._coords[l]

    def root(self, l: int, rows: np.ndarray) -> SparseTensor:
        return self._decode_residual(SEG_ROOT, self._coords[l], rows)

    def residual(self, j: int, l: int, fbar: SparseTensor, rows: np.ndarray) -> SparseTensor:
        return self._decode_residual(residual_segment(j), fbar.coords, rows)

    def _decode_residual(self, sid: int, coords: Coords, rows: np.ndarray) -> SparseTensor:
        d, B = self.model.cfg.D, self.model.cfg.clamp
        n = len(coords) * d
        row_of = np.tile(np.arange(d), len(coords))
        sym = coder.decode_with_rows(self.frame.segment(sid), rows, n, row_of)
        return SparseTensor(coords, Tensor((sym - B).astype(np.float64).reshape(len(coords), d)))

    def occupancy(self, j: int, l: int, rows: np.ndarray, probs: np.ndarray) -> np.ndarray:
        coords = self._coords[l]
        occ = coder.decode_with_rows(self.frame.segment(occupancy_segment(j)), rows, len(coords))
        if np.any(occ == 0):
            raise CorruptStreamError(f"decoded an empty occupancy byte in layer {l}")
        self._coords[l + 1] = expand_layer(coords, occ)
        return occ


def _walk(model: LatentModel, depth: int, emb: dict, side) -> dict:
    """Root latent then learned layers top+1..L; returns the decoded bytes per layer.

    Encoder and decoder both run exactly this function, so every fbar/fhat and
    every coding table is computed by the same code in the same order.
    """
    top = model.top_layer(depth)
    fhat: dict = {}
    fhat[top] = side.root(top, _residual_rows(model, 0))
    decoded = {}
    for j in range(1, model.cfg.k + 1):
        l = top + j
        target = side.coords(l)
        fbar = model.predict_latent(j, l, emb, fhat, target)
        rhat = side.residual(j, l, fbar, _residual_rows(model, j))
        fhat[l] = model.soft_add(j, fbar, rhat)
        probs = _finite(ag.softmax(model.decode_occupancy(j, l, emb, fhat).data), "occupancy")
        occ = side.occupancy(j, l, coder.quantize_pmf_rows(probs), probs)
        decoded[l] = occ
        if l < depth:
            emb[l] = model.embed(target, occ)
    return decoded


# public API ---------------------------------------------------------------


def _header_for(model: LatentModel, depth: int, params: QuantParams) -> CompressedFrame:
    cfg = model.cfg
    return CompressedFrame(depth, cfg.k, cfg.markov_order, cfg.soft_ops, params, model.digest()[:8])


def compress(cloud: PointCloud, model: LatentModel, depth: int) -> CompressedFrame:
    q = quantize(cloud, depth)
    return compress_quantized(q, model)


def compress_quantized(q: QuantizedCloud, model: LatentModel) -> CompressedFrame:
    depth = q.params.depth
    top = model.top_layer(depth)
    tree = build_octree(q)
    frame = _header_for(model, depth, q.params)
    top_bytes = np.concatenate([tree.layer(l).occupancy for l in range(1, top + 1)])
    frame.segments.append((SEG_TOP, coder.adaptive_encode(top_bytes)))
    ideal = coder.adaptive_code_length(top_bytes)
    frame.stats.append((SEG_TOP, len(top_bytes), ideal, ideal))
    if model.cfg.k == 0:
        return frame
    with ag.no_grad():
        emb = {l: model.embed(tree.layer(l).coords, tree.layer(l).occupancy)
               for l in range(max(1, top - 1), depth + 1)}
        f = model.encode(tree, emb)
        walk_emb = {l: emb[l] for l in range(max(1, top - 1), top + 1)}
        side = _EncoderSide(model, tree, f)
        _walk(model, depth, walk_emb, side)
    frame.segments.extend(side.segments)
    frame.stats.extend(side.stats)
    return frame


def _check_frame(frame: CompressedFrame, model: LatentModel) -> None:
    if frame.checksum != model.digest()[:8]:
        raise ChecksumMismatch("frame was encoded with a different model")
    cfg = model.cfg
    if (frame.k, frame.markov_order, frame.soft_ops) != (cfg.k, cfg.markov_order, cfg.soft_ops):
        raise ChecksumMismatch("frame header disagrees with the model configuration")
    if frame.depth < cfg.k + 1:
        raise CorruptStreamError("depth too small for the learned layer count")


def decompress_voxels(frame: CompressedFrame, model: LatentModel) -> np.ndarray:
    _check_frame(frame, model)
    model.reset_counters()
    depth = frame.depth
    top = model.top_layer(depth)
    coords = {1: Coords(np.zeros((1, 3), dtype=np.int64))}
    layers: dict[int, np.ndarray] = {}
    dec = coder.AdaptiveDecoder(frame.segment(SEG_TOP))
    try:
        for l in range(1, top + 1):
            occ = np.array([dec.decode() for _ in range(len(coords[l]))], dtype=np.int64)
            if np.any(occ == 0):
                raise CorruptStreamError(f"decoded an empty occupancy byte in layer {l}")
            layers[l] = occ
            coords[l + 1] = expand_layer(coords[l], occ)
        if model.cfg.k:
            with ag.no_grad():
                emb = {l: model.embed(coords[l], layers[l]) for l in range(max(1, top - 1), top + 1)}
                _walk(model, depth, emb, _DecoderSide(model, frame, coords))
    except ValidationError as exc:
        raise CorruptStreamError(str(exc)) from exc
    return np.array(coords[depth + 1].array)


def decompress(frame: CompressedFrame, model: LatentModel) -> PointCloud:
    vox = decompress_voxels(frame, model)
    return dequantize(QuantizedCloud(vox, frame.params))


def bit_breakdown(frame: CompressedFrame, n_points: int = 0) -> RateReport:
    """Per-segment bits; residual[0] is the root latent."""
    sizes = {sid: 8 * len(d) for sid, d in frame.segments}
    rep = RateReport(n_points=n_points)
    rep.top = float(sizes.get(SEG_TOP, 0))
    rep.header = float(8 * frame.header_size())
    if frame.k:
        rep.residual.append(float(sizes.get(SEG_ROOT, 0)))
        for j in range(1, frame.k + 1):
            rep.residual.append(float(sizes.get(residual_segment(j), 0)))
            rep.occupancy.append(float(sizes.get(occupancy_segment(j), 0)))
    return rep


def latent_share(rep: RateReport) -> float:
    """Percentage of the payload spent on latents."""
    payload = rep.total - rep.header
    return 100.0 * rep.residual_total / payload if payload > 0 else 0.0


def visualize_features(t: SparseTensor, seed: int = 0, path=None) -> np.ndarray:
    """Colors (N x 3, uint8) from a seeded random 3 x C projection; optionally written as PLY."""
    rng = np.random.default_rng(seed)
    proj = rng.normal(size=(t.channels, 3))
    y = t.F @ proj
    colors = np.full(y.shape, 128, dtype=np.uint8)
    if len(y):
        lo, hi = y.min(axis=0), y.max(axis=0)
        span = hi - lo
        ok = span > 0
        colors[:, ok] = np.rint(255.0 * (y[:, ok] - lo[ok]) / span[ok]).astype(np.uint8)
    if path is not None:
        save_ply(path, t.coords.array.astype(np.float64), colors)
    return colors


# model files -----------------------------------------------------------------


def model_bytes(model: LatentModel) -> bytes:
    return checkpoint_bytes(model.store, {"model": model.cfg.to_dict()})


def save_model(path, model: LatentModel) -> bytes:
    blob = model_bytes(model)
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def model_from_bytes(blob: bytes) -> LatentModel:
    config, arrays, step = parse_checkpoint(blob)
    if "model" not in config:
        raise CheckpointError("checkpoint carries no model configuration")
    model = LatentModel(ModelConfig.from_dict(config["model"]))
    model.store.load_arrays(arrays)
    model.store.step = step
    return model


def load_model(path) -> LatentModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
