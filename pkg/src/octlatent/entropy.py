"""Rate estimation: factorized residual density, occupancy cross-entropy, loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import autograd as ag
from .tensor.autograd import Tensor
from .tensor.params import ParamStore

PROB_FLOOR = 2.0**-32
LN2 = np.log(2.0)


class FactorizedDensity:
    """Per-channel monotone CDF network ``c_i(x) = sigmoid(H3(H2(H1(x))))``.

    Each ``H`` is an affine map with softplus-positive weights; the first two
    are followed by ``x + tanh(a) * tanh(x)`` (monotone because tanh(a) > -1).
    Biases start at zero, so every initial CDF satisfies c(x) + c(-x) = 1.
    """

    def __init__(self, store: ParamStore, name: str, channels: int, clamp: int = 64,
                 widths: tuple[int, ...] = (3, 3), init_scale: float = 10.0):
        self.channels = channels
        self.clamp = clamp
        self.name = name
        dims = (1,) + tuple(widths) + (1,)
        scale = init_scale ** (1.0 / (len(dims) - 1))
        self.matrices, self.biases, self.factors = [], [], []
        for i in range(len(dims) - 1):
            init = np.log(np.expm1(1.0 / scale / dims[i + 1]))
            self.matrices.append(store.add(f"{name}.m{i}", np.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(store.add(f"{name}.b{i}", np.zeros((channels, dims[i + 1]))))
            if i < len(dims) - 2:
                self.factors.append(store.add(f"{name}.a{i}", np.zeros((channels, dims[i + 1]))))

    def logits_cdf(self, x: Tensor) -> Tensor:
        """x: (N, C) -> cumulative logits (N, C)."""
        n = x.shape[0]
        h = ag.reshape(x, (n, self.channels, 1))
        for i, m in enumerate(self.matrices):
            w = ag.softplus(m)  # (C, out, in)
            h = ag.sum_(ag.reshape(h, (n, self.channels, 1, h.shape[2])) * w, axis=3)
            h = h + self.biases[i]
            if i < len(self.factors):
                h = h + ag.tanh(self.factors[i]) * ag.tanh(h)
        return ag.reshape(h, (n, self.channels))

    def cdf(self, x: np.ndarray) -> np.ndarray:
        with ag.no_grad():
            return ag._sigmoid(self.logits_cdf(Tensor(x)).data)

    def likelihood(self, v: Tensor) -> Tensor:
        """Mass of [v - 1/2, v + 1/2] per element, floored at 2**-32."""
        lower = self.logits_cdf(v - 0.5)
        upper = self.logits_cdf(v + 0.5)
        sign = -np.sign(lower.data + upper.data)
        sign[sign == 0] = 1.0
        lik = ag.abs_(ag.sigmoid(upper * sign) - ag.sigmoid(lower * sign))
        return ag.clamp_min(lik, PROB_FLOOR)

    def pmf_table(self) -> np.ndarray:
        """(C, 2B+1) integer-bin probabilities over [-B, B] with tails folded into the edge bins."""
        B = self.clamp
        ks = np.arange(-B, B + 1, dtype=np.float64)
        edges = np.concatenate([ks - 0.5, [B + 0.5]])
        grid = np.repeat(edges[:, None], self.channels, axis=1)
        with ag.no_grad():
            logits = self.logits_cdf(Tensor(grid)).data.T  # (C, 2B+2)
        # complementary form on the upper half keeps tail mass accurate
        lo, hi = logits[:, :-1], logits[:, 1:]
        pos = (lo + hi) > 0
        p = np.where(pos, ag._sigmoid(-lo) - ag._sigmoid(-hi), ag._sigmoid(hi) - ag._sigmoid(lo))
        p[:, 0] = ag._sigmoid(logits[:, 1])
        p[:, -1] = ag._sigmoid(-logits[:, -2])
        p = np.maximum(p, PROB_FLOOR)
        return p / p.sum(axis=1, keepdims=True)

    def pmf_integer_bins(self, channel: int, k: int) -> float:
        if abs(k) > self.clamp:
            raise ValueError(f"|k| must be <= {self.clamp}")
        return float(self.pmf_table()[channel, k + self.clamp])


def residual_rate(values, density: FactorizedDensity, mode: str = "eval"):
    """Bits needed for a residual tensor.

    ``eval``: values are integers (clipped to +-B) priced with the folded integer pmf.
    ``train``: values are noisy reals priced by the box-convolved continuous density;
    the result is a differentiable Tensor.
    """
    if mode == "train":
        v = values if isinstance(values, Tensor) else Tensor(values)
        if v.data.size == 0:
            return Tensor(0.0)
        return ag.sum_(ag.log(density.likelihood(v))) * (-1.0 / LN2)
    vals = values.data if isinstance(values, Tensor) else np.asarray(values, dtype=np.float64)
    if vals.size == 0:
        return 0.0
    table = density.pmf_table()
    B = density.clamp
    idx = np.clip(np.rint(vals), -B, B).astype(np.int64) + B
    ch = np.broadcast_to(np.arange(vals.shape[1]), vals.shape)
    return float(-np.log2(table[ch, idx]).sum())


def occupancy_rate(probs: np.ndarray, symbols: np.ndarray) -> tuple[float, float]:
    """Total bits and bits per node of the true occupancy bytes under ``probs``."""
    probs = np.asarray(probs, dtype=np.float64)
    symbols = np.asarray(symbols, dtype=np.int64)
    n = len(symbols)
    if n == 0:
        return 0.0, 0.0
    p = probs[np.arange(n), symbols]
    if np.any(p <= 0):
        raise ValueError("zero probability assigned to a true symbol")
    bits = float(-np.log2(p).sum())
    return bits, bits / n


def occupancy_bits(logits: Tensor, symbols: np.ndarray) -> Tensor:
    """Differentiable cross-entropy (bits) of ``symbols`` under ``softmax(logits)``."""
    n = len(symbols)
    lp = ag.log_softmax(logits)
    return ag.sum_(ag.pick(lp, np.arange(n), np.asarray(symbols, dtype=np.int64))) * (-1.0 / LN2)


@dataclass
class RateReport:
    """Per-layer rates. Entries may be floats or Tensors (training)."""

    residual: list = field(default_factory=list)
    occupancy: list = field(default_factory=list)
    residual_nodes: list[int] = field(default_factory=list)
    occupancy_nodes: list[int] = field(default_factory=list)
    n_points: int = 0
    top: float = 0.0
    header: float = 0.0
    top_nodes: int = 0

    @property
    def residual_total(self):
        return sum(self.residual, 0.0)

    @property
    def occupancy_total(self):
        return sum(self.occupancy, 0.0)

    @property
    def total(self):
        return self.residual_total + self.occupancy_total + self.top + self.header

    def bpop(self) -> float:
        """Bits per output point of everything in the report."""
        return _value(self.total) / max(self.n_points, 1)

    def occupancy_per_node(self) -> list[float]:
        """Cross-entropy per node of each layer (the 1/N_l normalization)."""
        return [_value(b) / max(n, 1) for b, n in zip(self.occupancy, self.occupancy_nodes)]

    def per_point(self) -> "RateReport":
        s = 1.0 / max(self.n_points, 1)
        return RateReport([r * s for r in self.residual], [x * s for x in self.occupancy],
                          list(self.residual_nodes), list(self.occupancy_nodes), self.n_points,
                          self.top * s, self.header * s, self.top_nodes)

    def detached(self) -> "RateReport":
        return RateReport([_value(r) for r in self.residual], [_value(x) for x in self.occupancy],
                          list(self.residual_nodes), list(self.occupancy_nodes), self.n_points,
                          _value(self.top), _value(self.header), self.top_nodes)


def _value(x) -> float:
    return float(x.data) if isinstance(x, Tensor) else float(x)


def total_loss(rates: RateReport, alpha: float):
    """alpha * sum of residual rates + sum of occupancy rates."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    return rates.residual_total * alpha + rates.occupancy_total
