"""Training loop: Adam on the rate loss with the alpha schedule and step decay."""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .entropy import RateReport, total_loss
from .errors import CodecError, ValidationError
from .model import LatentModel, ModelConfig
from .octree import Octree, build_octree
from .pcio import PointCloud, quantize
from .pipeline import model_bytes
from .tensor.params import adam_step

log = logging.getLogger(__name__)


class TrainingDiverged(CodecError):
    """Loss became non-finite; ``dump_path`` holds the offending state."""

    def __init__(self, msg: str, dump_path: str):
        super().__init__(f"{msg} (state dumped to {dump_path})")
        self.dump_path = dump_path


@dataclass
class TrainConfig:
    depth: int = 6
    epochs: int = 10
    max_steps: int | None = None
    lr: float = 6e-4
    betas: tuple[float, float] = (0.9, 0.999)
    lr_decay: float = 0.7
    decay_every: int = 20
    alpha_early: float = 0.5
    alpha_late: float = 0.95
    alpha_switch_epoch: int = 10
    seed: int = 0
    dump_dir: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown training keys: {sorted(unknown)}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    alpha: float = 0.5
    lr: float = 6e-4
    history: list[dict] = field(default_factory=list)


def alpha_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.alpha_early if epoch < cfg.alpha_switch_epoch else cfg.alpha_late


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.decay_every)


def prepare_corpus(clouds: list[PointCloud], depth: int) -> list[Octree]:
    if not clouds:
        raise ValidationError("training corpus is empty")
    return [build_octree(quantize(c, depth)) for c in clouds]


def train_step(model: LatentModel, tree: Octree, alpha: float, lr: float,
               rng: np.random.Generator, betas=(0.9, 0.999)) -> tuple[float, RateReport]:
    """One Adam step on bits per output point; returns (loss, detached report)."""
    model.store.zero_grad()
    report, _ = model.forward(tree, "train", rng)
    loss = total_loss(report, alpha) * (1.0 / report.n_points)
    value = float(np.asarray(getattr(loss, "data", loss)))
    if not np.isfinite(value):
        return value, report.detached()
    if hasattr(loss, "backward"):
        loss.backward()
    adam_step(model.store, lr, betas)
    return value, report.detached()


def _dump(model: LatentModel, state: TrainState, cfg: TrainConfig) -> str:
    folder = cfg.dump_dir or tempfile.mkdtemp(prefix="octlatent-diverged-")
    os.makedirs(folder, exist_ok=True)
    with open(os.path.join(folder, "model.ckpt"), "wb") as fh:
        fh.write(model_bytes(model))
    with open(os.path.join(folder, "state.json"), "w") as fh:
        json.dump({"epoch": state.epoch, "step": state.step, "alpha": state.alpha, "lr": state.lr,
                   "history": state.history[-20:]}, fh, indent=1)
    return folder


def train(corpus, model_cfg: ModelConfig, cfg: TrainConfig,
          model: LatentModel | None = None, callback=None) -> tuple[LatentModel, TrainState]:
    """Train on a list of PointClouds (or prebuilt octrees). Deterministic given the seeds."""
    trees = corpus if corpus and isinstance(corpus[0], Octree) else prepare_corpus(list(corpus), cfg.depth)
    if not trees:
        raise ValidationError("training corpus is empty")
    model = model or LatentModel(model_cfg)
    rng = np.random.default_rng(cfg.seed)
    state = TrainState(alpha=alpha_at(0, cfg), lr=lr_at(0, cfg))
    for epoch in range(cfg.epochs):
        state.epoch = epoch
        state.alpha = alpha_at(epoch, cfg)
        state.lr = lr_at(epoch, cfg)
        losses, bits, points = [], 0.0, 0
        for i in rng.permutation(len(trees)):
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                break
            value, rep = train_step(model, trees[i], state.alpha, state.lr, rng, cfg.betas)
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at step {state.step}", _dump(model, state, cfg))
            state.step += 1
            losses.append(value)
            bits += rep.total
            points += rep.n_points
        if not losses:
            break
        entry = {"epoch": epoch, "loss": float(np.mean(losses)), "bpop": bits / max(points, 1),
                 "alpha": state.alpha, "lr": state.lr, "steps": state.step}
        state.history.append(entry)
        log.info("epoch %d loss %.4f bpop %.4f", epoch, entry["loss"], entry["bpop"])
        if callback is not None:
            callback(entry)
    return model, state


def evaluate(model: LatentModel, trees: list[Octree], drop_latent: bool = False) -> RateReport:
    """Summed eval-mode rates over a corpus."""
    from .tensor.autograd import no_grad

    total = RateReport()
    with no_grad():
        for t in trees:
            rep, _ = model.forward(t, "eval", drop_latent=drop_latent)
            if not total.residual:
                total.residual = [0.0] * len(rep.residual)
                total.occupancy = [0.0] * len(rep.occupancy)
                total.residual_nodes = [0] * len(rep.residual)
                total.occupancy_nodes = [0] * len(rep.occupancy)
            for i, v in enumerate(rep.residual):
                total.residual[i] += v
                total.residual_nodes[i] += rep.residual_nodes[i]
            for i, v in enumerate(rep.occupancy):
                total.occupancy[i] += v
                total.occupancy_nodes[i] += rep.occupancy_nodes[i]
            total.n_points += rep.n_points
    return total


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
