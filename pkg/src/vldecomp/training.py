"""Joint pre-training and vision-language decomposition loops."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from . import core_math as cm
from .errors import ConfigError, DivergenceError
from .inputs import InputConfig, PairRecord, atomic_write, match_key
from .losses import LOSSES, decomposition_loss, multi_positive_nce
from .model import JointPairBatcher, VLTransformer, collate, image_inputs, text_inputs
from .optim import AdamWState, adamw_step

log = logging.getLogger(__name__)

# Published recipe: batch 1750, tau 0.005, AdamW lr 5e-5, wd 1e-4.
# Batch size and learning rate are scaled down for desk-size models.
PAPER_BATCH_SIZE = 1750
PAPER_LEARNING_RATE = 5e-5


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    temperature: float = 0.005
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 200
    loss: str = "INFONCE"
    triplet_margin: float = 0.2
    seed: int = 0
    pooler_init: str = "fresh"  # fresh | inherit
    freeze_layers: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.loss == "TRIPLET" and self.batch_size < 2:
            raise ConfigError("triplet loss needs batch_size >= 2")
        if self.epochs < 0 or self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("epochs, learning_rate and weight_decay must be non-negative")
        if self.pooler_init not in ("fresh", "inherit"):
            raise ConfigError("pooler_init must be fresh|inherit")
        if self.freeze_layers < 0:
            raise ConfigError("freeze_layers must be >= 0")


@dataclass(frozen=True)
class PretrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("pretrain batch_size must be >= 2")
        if self.epochs < 0 or self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("epochs, learning_rate and weight_decay must be non-negative")


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    in_batch_r1_t2i: float
    in_batch_r1_i2t: float


@dataclass
class PretrainMetrics:
    epoch: int
    loss: float
    in_batch_acc: float
    logit_margin: float


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


def _trainable(model: VLTransformer, freeze_layers: int) -> dict[str, torch.Tensor]:
    weights = model.named_weights()
    if freeze_layers <= 0:
        return weights
    frozen_prefixes = ("tok_emb", "pos_emb", "seg_emb", "region_", "emb_ln") + tuple(
        f"l{l}_" for l in range(freeze_layers)
    )
    return {k: v for k, v in weights.items() if not k.startswith(frozen_prefixes)}


def _check_finite(loss: torch.Tensor, weights, epoch: int, batch: int) -> None:
    if not bool(torch.isfinite(loss)):
        raise DivergenceError("non-finite loss", epoch, batch)
    for name, w in weights.items():
        if not bool(torch.isfinite(w).all()):
            raise DivergenceError(f"non-finite weights in {name}", epoch, batch)


def _in_batch_r1(sims: torch.Tensor) -> tuple[float, float]:
    n = sims.shape[0]
    target = torch.arange(n)
    t2i = (sims.argmax(dim=1) == target).double().mean().item()
    i2t = (sims.argmax(dim=0) == target).double().mean().item()
    return t2i, i2t


def train_decompose(
    model: VLTransformer,
    pairs: Sequence[PairRecord],
    cfg: TrainConfig,
    input_cfg: InputConfig = InputConfig(),
    on_epoch_end: Callable[[EpochMetrics, VLTransformer], bool] | None = None,
) -> list[EpochMetrics]:
    """Contrastively align separately encoded texts and images, in place.

    Each batch runs the text tower and the image tower over the same shared
    weights, scores every in-batch text/image combination by cosine and
    applies the configured loss. ``on_epoch_end`` may return True to stop.
    """
    if cfg.pooler_init == "fresh":
        model.reset_pooler(cfg.seed + 7919)
    feat_dim = model.cfg.feat_dim
    texts = text_inputs(pairs, input_cfg)
    images = image_inputs(pairs, input_cfg)
    weights = _trainable(model, cfg.freeze_layers)
    state = AdamWState()
    rng = np.random.default_rng(cfg.seed)
    history: list[EpochMetrics] = []

    for epoch in range(1, cfg.epochs + 1):
        losses, r_t2i, r_i2t, sizes = [], [], [], []
        for b, idx in enumerate(_batches(len(pairs), cfg.batch_size, rng)):
            if cfg.loss == "TRIPLET" and len(idx) < 2:
                continue
            rt = model.individual_forward(collate([texts[i] for i in idx], feat_dim))
            rv = model.individual_forward(collate([images[i] for i in idx], feat_dim))
            loss = decomposition_loss(cfg.loss, rt, rv, cfg.temperature, cfg.triplet_margin)
            if not bool(torch.isfinite(loss)):
                raise DivergenceError("non-finite loss", epoch, b)
            grads = cm.backward(loss, weights)
            adamw_step(weights, grads, state, cfg.learning_rate, cfg.weight_decay)
            _check_finite(loss, weights, epoch, b)
            with torch.no_grad():
                t2i, i2t = _in_batch_r1(cm.cosine_matrix(rt, rv))
            losses.append(loss.item())
            r_t2i.append(t2i)
            r_i2t.append(i2t)
            sizes.append(len(idx))
        w = np.asarray(sizes, float)
        m = EpochMetrics(
            epoch,
            float(np.average(losses, weights=w)),
            float(np.average(r_t2i, weights=w)),
            float(np.average(r_i2t, weights=w)),
        )
        history.append(m)
        log.info("decompose epoch %d loss %.4f r1_t2i %.3f r1_i2t %.3f", *vars(m).values())
        if on_epoch_end is not None and on_epoch_end(m, model):
            break
    return history


def positive_mask(pairs: Sequence[PairRecord], idx: np.ndarray) -> torch.Tensor:
    keys = [match_key(pairs[i]) for i in idx]
    return torch.tensor([[a == b for b in keys] for a in keys], dtype=torch.bool)


def _joint_batch_logits(model: VLTransformer, batcher: JointPairBatcher, idx: np.ndarray) -> torch.Tensor:
    n = len(idx)
    ti = np.repeat(idx, n)
    ii = np.tile(idx, n)
    return model.joint_logits(batcher.batch(ti, ii)).view(n, n)


def _joint_stats(logits: torch.Tensor, positive: torch.Tensor) -> tuple[float, float]:
    with torch.no_grad():
        acc = positive[torch.arange(len(logits)), logits.argmax(dim=1)].double().mean().item()
        neg = ~positive
        margin = logits[positive].mean().item() - (logits[neg].mean().item() if bool(neg.any()) else 0.0)
    return acc, margin


def pretrain_joint(
    model: VLTransformer,
    pairs: Sequence[PairRecord],
    cfg: PretrainConfig,
    input_cfg: InputConfig = InputConfig(),
    on_epoch_end: Callable[[PretrainMetrics, VLTransformer], bool] | None = None,
) -> list[PretrainMetrics]:
    """Early-interaction contrastive pre-training, in place.

    Every text in a batch is encoded jointly with every image of the batch
    (N^2 forwards); the [CLS] head logits are trained so that matching
    combinations win along both rows and columns.
    """
    batcher = JointPairBatcher(pairs, model.cfg.feat_dim, input_cfg)
    weights = model.named_weights()
    state = AdamWState()
    rng = np.random.default_rng(cfg.seed)
    history: list[PretrainMetrics] = []
    for epoch in range(1, cfg.epochs + 1):
        rows = []
        for b, idx in enumerate(_batches(len(pairs), cfg.batch_size, rng)):
            if len(idx) < 2:
                continue
            logits = _joint_batch_logits(model, batcher, idx)
            positive = positive_mask(pairs, idx)
            loss = multi_positive_nce(logits, positive)
            if not bool(torch.isfinite(loss)):
                raise DivergenceError("non-finite loss", epoch, b)
            grads = cm.backward(loss, weights)
            adamw_step(weights, grads, state, cfg.learning_rate, cfg.weight_decay)
            _check_finite(loss, weights, epoch, b)
            acc, margin = _joint_stats(logits.detach(), positive)
            rows.append((len(idx), loss.item(), acc, margin))
        arr = np.asarray(rows, float)
        w = arr[:, 0]
        m = PretrainMetrics(epoch, *(float(np.average(arr[:, c], weights=w)) for c in (1, 2, 3)))
        history.append(m)
        log.info("pretrain epoch %d loss %.4f acc %.3f margin %.3f", *vars(m).values())
        if on_epoch_end is not None and on_epoch_end(m, model):
            break
    return history


@torch.no_grad()
def joint_eval(
    model: VLTransformer,
    pairs: Sequence[PairRecord],
    batch_size: int,
    input_cfg: InputConfig = InputConfig(),
    seed: int = 0,
) -> tuple[float, float]:
    """In-batch accuracy and aligned-minus-misaligned logit margin with frozen weights."""
    batcher = JointPairBatcher(pairs, model.cfg.feat_dim, input_cfg)
    rng = np.random.default_rng(seed)
    accs, margins, sizes = [], [], []
    for idx in _batches(len(pairs), batch_size, rng):
        if len(idx) < 2:
            continue
        logits = _joint_batch_logits(model, batcher, idx)
        acc, margin = _joint_stats(logits, positive_mask(pairs, idx))
        accs.append(acc)
        margins.append(margin)
        sizes.append(len(idx))
    return float(np.average(accs, weights=sizes)), float(np.average(margins, weights=sizes))


def metrics_csv(rows: Sequence, columns: Sequence[str]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([getattr(r, c) if isinstance(getattr(r, c), int) else f"{getattr(r, c):.6f}" for c in columns])
    return buf.getvalue().encode("utf-8")


def write_metrics(path, rows: Sequence, columns: Sequence[str]) -> None:
    atomic_write(path, metrics_csv(rows, columns))


DECOMPOSE_COLUMNS = ("epoch", "loss", "in_batch_r1_t2i", "in_batch_r1_i2t")
PRETRAIN_COLUMNS = ("epoch", "loss", "in_batch_acc", "logit_margin")
