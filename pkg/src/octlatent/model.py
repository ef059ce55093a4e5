"""Networks of the latent-guided octree entropy model.

Layer mapping for depth ``L`` and ``k`` learned layers (``top = L - k``):

* occupancy bytes of layers ``1..top`` go to the adaptive order-0 coder;
* the root latent ``f^(top)`` is quantized and coded directly;
* for each learned layer ``l = top+1..L`` (relative index ``j = l - top``)
  the decoder predicts ``fbar^(l)`` from layers ``l-1`` and ``l-2``, receives
  the residual, reconstructs ``fhat^(l)`` and then predicts the occupancy
  bytes ``x^(l)`` of the layer.

Every per-layer network is indexed by ``j``; the occupancy embedding is shared.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .entropy import FactorizedDensity, RateReport, occupancy_bits, residual_rate
from .errors import ValidationError
from .octree import Octree
from .pcio import round_half_away
from .tensor import autograd as ag
from .tensor.autograd import Tensor
from .tensor.layers import Conv, Down, IRNBlock, Up, add, relu, sub
from .tensor.params import ParamStore
from .tensor.sparse import Coords, SparseTensor, cat

ALPHABET = 256


@dataclass(frozen=True)
class ModelConfig:
    k: int = 5
    D: int = 32
    E: int = 32
    hidden: int = 32
    irn_count: int = 2
    markov_order: int = 2
    soft_ops: bool = True
    clamp: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.k < 0:
            raise ValidationError("k must be >= 0")
        if self.D < 1 or self.E < 1 or self.hidden < 2:
            raise ValidationError("channel widths must be positive")
        if self.hidden % 2:
            raise ValidationError("hidden width must be even (IRN channel split)")
        if self.markov_order not in (1, 2):
            raise ValidationError("markov_order must be 1 or 2")
        if self.irn_count < 0 or self.clamp < 1:
            raise ValidationError("invalid irn_count or clamp")
        if self.irn_count and self.D % 2:
            raise ValidationError("D must be even when IRN blocks are used")

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Small configuration used for CPU experiments."""
        base = dict(k=3, D=8, E=16, hidden=32, irn_count=1)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LatentStack:
    """Per-layer f, fbar, rhat, fhat (dicts keyed by absolute layer index)."""

    f: dict = field(default_factory=dict)
    fbar: dict = field(default_factory=dict)
    rhat: dict = field(default_factory=dict)
    fhat: dict = field(default_factory=dict)


def _zeros(coords: Coords, channels: int) -> SparseTensor:
    return SparseTensor.zeros(coords, channels)


def _proj_init(rng: np.random.Generator, d: int, first: bool, noise: float = 1e-3):
    """Weights realizing h(a, b) = a (first=True) or b through a ReLU pair."""
    w1 = rng.normal(0.0, noise, size=(27, 2 * d, 2 * d))
    w2 = rng.normal(0.0, noise, size=(1, 2 * d, d))
    src = 0 if first else d
    eye = np.eye(d)
    w1[13, src:src + d, :d] += eye  # offset (0,0,0) is index 13 of the 3^3 kernel
    w1[13, src:src + d, d:] -= eye
    w2[0, :d] += eye
    w2[0, d:] -= eye
    return w1, w2


class SoftOp:
    """h(a, b): concat -> conv 3^3 (2D, ReLU) -> conv 1^3 (D)."""

    def __init__(self, store: ParamStore, name: str, d: int, rng: np.random.Generator, pass_first: bool):
        self.c1 = Conv(store, f"{name}.c1", 2 * d, 2 * d, 3, rng=rng)
        self.c2 = Conv(store, f"{name}.c2", 2 * d, d, 1, rng=rng)
        w1, w2 = _proj_init(rng, d, pass_first)
        self.c1.kernel.weight.data = w1
        self.c2.kernel.weight.data = w2

    def __call__(self, a: SparseTensor, b: SparseTensor) -> SparseTensor:
        return self.c2(relu(self.c1(cat([a, b]))))


class OccupancyEmbedding:
    """One-hot (as a table lookup) -> ReLU -> conv 3^3 -> ReLU -> conv 3^3."""

    def __init__(self, store: ParamStore, e: int, rng: np.random.Generator):
        self.table = store.add("emb.table", rng.normal(0.0, 1.0, size=(ALPHABET, e)))
        self.bias = store.add("emb.b0", np.zeros(e))
        self.c1 = Conv(store, "emb.c1", e, e, 3, rng=rng)
        self.c2 = Conv(store, "emb.c2", e, e, 3, rng=rng, gain=0.5)

    def __call__(self, coords: Coords, occupancy: np.ndarray) -> SparseTensor:
        h = ag.gather_rows(self.table, np.asarray(occupancy, dtype=np.int64)) + self.bias
        x = SparseTensor(coords, ag.relu(h))
        return self.c2(relu(self.c1(x)))


class Encoder:
    """f^(l) = fuse(cat(IRN(relu(down(f^(l+1)))), e^(l))).

    The finest encoder only ever sees f^(L+1) = 0, so it has no down branch
    and fuses a zero block with e^(L).
    """

    def __init__(self, store: ParamStore, name: str, cfg: ModelConfig, rng, finest: bool = False):
        self.finest = finest
        self.channels = cfg.D
        if not finest:
            self.down = Down(store, f"{name}.down", cfg.D, cfg.D, rng=rng)
            self.irn = [IRNBlock(store, f"{name}.irn{i}", cfg.D, rng=rng) for i in range(cfg.irn_count)]
        self.fuse = Conv(store, f"{name}.fuse", cfg.D + cfg.E, cfg.D, 3, rng=rng)

    def __call__(self, e: SparseTensor, f_above: SparseTensor) -> SparseTensor:
        if f_above.coords.parents() != e.coords:
            raise ValueError("f_above support is not the child set of this layer")
        if self.finest:
            h = _zeros(e.coords, self.channels)
        else:
            h = relu(self.down(f_above, e.coords))
            for block in self.irn:
                h = block(h)
        return self.fuse(cat([h, e]))


class Predictor:
    """fbar^(l) from (e, fhat) at l-1 and l-2, upsampled onto layer l."""

    def __init__(self, store: ParamStore, name: str, cfg: ModelConfig, rng):
        c = cfg.E + cfg.D
        self.up2 = Up(store, f"{name}.up2", c, c, rng=rng)
        self.up = Up(store, f"{name}.up", 2 * c, cfg.hidden, rng=rng)
        self.irn = [IRNBlock(store, f"{name}.irn{i}", cfg.hidden, rng=rng) for i in range(cfg.irn_count)]
        self.out = Conv(store, f"{name}.out", cfg.hidden, cfg.D, 1, rng=rng)

    def __call__(self, near: SparseTensor, far: SparseTensor | None, target: Coords) -> SparseTensor:
        far = _zeros(near.coords, near.channels) if far is None else self.up2(far, near.coords)
        h = relu(self.up(cat([near, far]), target))
        for block in self.irn:
            h = block(h)
        return self.out(h)


class OccupancyHead:
    """256-way logits for x^(l) from fhat^(l), (e, fhat) at l-1 and e at l-2."""

    def __init__(self, store: ParamStore, name: str, cfg: ModelConfig, rng):
        h = cfg.hidden
        self.up2 = Up(store, f"{name}.up2", cfg.E, cfg.E, rng=rng)
        self.up = Up(store, f"{name}.up", 2 * cfg.E + cfg.D, h, rng=rng)
        self.c1 = Conv(store, f"{name}.c1", cfg.D + h, h, 3, rng=rng)
        self.c2 = Conv(store, f"{name}.c2", h, h, 3, rng=rng)
        self.out = Conv(store, f"{name}.out", h, ALPHABET, 1, rng=rng, gain=0.1)

    def __call__(self, fhat: SparseTensor, e1: SparseTensor, f1: SparseTensor,
                 e2: SparseTensor | None) -> Tensor:
        far = _zeros(e1.coords, e1.channels) if e2 is None else self.up2(e2, e1.coords)
        ctx = relu(self.up(cat([e1, f1, far]), fhat.coords))
        h = relu(self.c1(cat([fhat, ctx])))
        h = relu(self.c2(h))
        return self.out(h).features


class LatentModel:
    """Parameter container plus the per-layer operations shared by encoder and decoder."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.store = ParamStore()
        rng = np.random.default_rng(cfg.seed)
        self.embedding = OccupancyEmbedding(self.store, cfg.E, rng)
        self.encoders = [Encoder(self.store, f"enc{j}", cfg, rng, finest=j == cfg.k)
                         for j in range(cfg.k + 1)] if cfg.k else []
        self.predictors = {j: Predictor(self.store, f"pred{j}", cfg, rng) for j in range(1, cfg.k + 1)}
        self.heads = {j: OccupancyHead(self.store, f"head{j}", cfg, rng) for j in range(1, cfg.k + 1)}
        self.h_s, self.h_a = {}, {}
        if cfg.soft_ops:
            for j in range(1, cfg.k + 1):
                self.h_s[j] = SoftOp(self.store, f"hs{j}", cfg.D, rng, pass_first=True)
                self.h_a[j] = SoftOp(self.store, f"ha{j}", cfg.D, rng, pass_first=True)
        self.densities = [FactorizedDensity(self.store, f"density{j}", cfg.D, cfg.clamp)
                          for j in range(cfg.k + 1)] if cfg.k else []
        self.counters = {"head": 0, "predict": 0}

    # bookkeeping ---------------------------------------------------------
    def reset_counters(self) -> None:
        self.counters = {"head": 0, "predict": 0}

    def digest(self) -> bytes:
        """Identifies parameters and configuration (first 8 bytes go into frames)."""
        h = hashlib.sha256(json.dumps(self.cfg.to_dict(), sort_keys=True).encode())
        h.update(self.store.digest())
        return h.digest()

    def top_layer(self, depth: int) -> int:
        if depth < self.cfg.k + 1:
            raise ValidationError(f"depth {depth} too small for k={self.cfg.k} learned layers")
        return depth - self.cfg.k

    # stages --------------------------------------------------------------
    def embed(self, coords: Coords, occupancy: np.ndarray) -> SparseTensor:
        return self.embedding(coords, occupancy)

    def encode_layer(self, j: int, e: SparseTensor, f_above: SparseTensor) -> SparseTensor:
        return self.encoders[j](e, f_above)

    def encode(self, tree: Octree, emb: dict) -> dict:
        """Encoder pass f^(L)..f^(top), starting from f^(L+1) = 0 on the leaves."""
        top = self.top_layer(tree.depth)
        f_above = _zeros(tree.leaves, self.cfg.D)
        out = {}
        for l in range(tree.depth, top - 1, -1):
            f_above = out[l] = self.encode_layer(l - top, emb[l], f_above)
        return out

    def predict_latent(self, j: int, l: int, emb: dict, fhat: dict, target: Coords) -> SparseTensor:
        self.counters["predict"] += 1
        near = cat([emb[l - 1], fhat[l - 1]])
        far = None
        if self.cfg.markov_order == 2 and (l - 2) in emb and (l - 2) in fhat:
            far = cat([emb[l - 2], fhat[l - 2]])
        elif self.cfg.markov_order == 2 and (l - 2) in emb:
            far = cat([emb[l - 2], _zeros(emb[l - 2].coords, self.cfg.D)])
        return self.predictors[j](near, far, target)

    def decode_occupancy(self, j: int, l: int, emb: dict, fhat: dict, drop_latent: bool = False) -> Tensor:
        """Logits (N_l x 256) of the occupancy bytes of layer l."""
        self.counters["head"] += 1
        cur = fhat[l]
        e1 = emb[l - 1]
        f1 = fhat.get(l - 1)
        if drop_latent:
            cur = _zeros(cur.coords, self.cfg.D)
        if f1 is None or drop_latent or self.cfg.markov_order == 1:
            f1 = _zeros(e1.coords, self.cfg.D)
        e2 = emb.get(l - 2) if self.cfg.markov_order == 2 else None
        return self.heads[j](cur, e1, f1, e2)

    def soft_subtract(self, j: int, f: SparseTensor, fbar: SparseTensor) -> SparseTensor:
        if not self.cfg.soft_ops:
            return sub(f, fbar)
        return sub(f, self.h_s[j](fbar, f))

    def soft_add(self, j: int, fbar: SparseTensor, rhat: SparseTensor) -> SparseTensor:
        if not self.cfg.soft_ops:
            return add(fbar, rhat)
        return add(fbar, self.h_a[j](rhat, fbar))

    def coding_residual(self, r: SparseTensor) -> SparseTensor:
        """Eval-mode quantization clipped to the coder support [-B, B]."""
        q = np.clip(round_half_away(r.F), -self.cfg.clamp, self.cfg.clamp)
        return SparseTensor(r.coords, Tensor(q))

    # full passes ---------------------------------------------------------
    def forward(self, tree: Octree, mode: str = "train", rng: np.random.Generator | None = None,
                drop_latent: bool = False) -> tuple[RateReport, LatentStack]:
        """Rate of the learned layers of ``tree``.

        ``train`` uses the noise surrogate and returns differentiable rates;
        ``eval`` uses hard quantization, integer pmfs and the true bytes.
        """
        if mode not in ("train", "eval"):
            raise ValueError("mode must be 'train' or 'eval'")
        if mode == "train" and rng is None:
            raise ValueError("train mode needs a seeded generator")
        cfg = self.cfg
        report = RateReport(n_points=len(tree.leaves))
        stack = LatentStack()
        if cfg.k == 0:
            return report, stack
        top = self.top_layer(tree.depth)
        emb = {l: self.embed(tree.layer(l).coords, tree.layer(l).occupancy)
               for l in range(max(1, top - 1), tree.depth + 1)}
        f = self.encode(tree, emb)
        stack.f = f
        fhat = stack.fhat

        def quant(r):
            if mode == "eval":
                return self.coding_residual(r)
            return quantize_residual(r, "train", rng)

        root = quant(f[top])
        stack.rhat[top] = fhat[top] = root
        report.residual.append(residual_rate(root.features if mode == "train" else root.F,
                                             self.densities[0], mode))
        report.residual_nodes.append(len(root))
        for j in range(1, cfg.k + 1):
            l = top + j
            coords = tree.coords(l)
            fbar = self.predict_latent(j, l, emb, fhat, coords)
            r = self.soft_subtract(j, f[l], fbar)
            rhat = quant(r)
            fhat[l] = self.soft_add(j, fbar, rhat)
            stack.fbar[l], stack.rhat[l] = fbar, rhat
            report.residual.append(residual_rate(rhat.features if mode == "train" else rhat.F,
                                                 self.densities[j], mode))
            report.residual_nodes.append(len(rhat))
            logits = self.decode_occupancy(j, l, emb, fhat, drop_latent)
            bits = occupancy_bits(logits, tree.layer(l).occupancy)
            report.occupancy.append(bits if mode == "train" else float(bits.data))
            report.occupancy_nodes.append(len(coords))
        return report, stack

    def embedding_distance(self, base: int, others) -> list[float]:
        """Euclidean distances between single-node embeddings of bytes."""
        origin = Coords(np.zeros((1, 3), dtype=np.int64))
        with ag.no_grad():
            b = self.embed(origin, np.array([base])).F[0]
            return [float(np.linalg.norm(self.embed(origin, np.array([o])).F[0] - b)) for o in others]


def quantize_residual(r: SparseTensor, mode: str, rng: np.random.Generator | None = None) -> SparseTensor:
    """Eval: round half away from zero. Train: additive U(-1/2, 1/2) noise."""
    if mode == "eval":
        return SparseTensor(r.coords, Tensor(round_half_away(r.F)))
    if mode != "train":
        raise ValueError("mode must be 'train' or 'eval'")
    if rng is None:
        raise ValueError("train mode needs a seeded generator")
    noise = rng.uniform(-0.5, 0.5, size=r.F.shape)
    return r.with_features(r.features + noise)
