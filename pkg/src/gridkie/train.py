"""Training loop: shape-augmented batching, hard-negative loss masking,
step-decay Adam, checkpointing, and JSONL logging."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .data import ClassSet, Document
from .gridder import AugmentParams, map_to_grid, sample_shape
from .model import TokenGridNet, save_checkpoint
from .nn import core
from .nn.optim import Adam
from .tokenizer import Vocabulary, tokenize_document

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    max_steps: int = 40000
    batch_size: int = 32
    base_lr: float = 1e-3
    lr_boundaries: tuple[tuple[int, float], ...] = ((15000, 1e-4), (30000, 1e-5))
    hard_negative_ratio: float = 3.0
    augment: AugmentParams = field(default_factory=AugmentParams)
    seed: int = 0
    checkpoint_interval: int = 5000
    log_interval: int = 50

    def __post_init__(self):
        if self.max_steps < 1 or self.batch_size < 1:
            raise ValueError("max_steps and batch_size must be positive")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.hard_negative_ratio < 0:
            raise ValueError("hard_negative_ratio must be >= 0")
        if self.checkpoint_interval < 1 or self.log_interval < 1:
            raise ValueError("intervals must be positive")
        prev_step = -1
        prev_lr = self.base_lr
        for boundary, lr in self.lr_boundaries:
            if boundary <= prev_step:
                raise ValueError("lr boundaries must be strictly ascending")
            if lr <= 0 or lr >= prev_lr:
                raise ValueError("boundary learning rates must be positive and decreasing")
            prev_step, prev_lr = boundary, lr


def lr_at(step: int, config: TrainConfig) -> float:
    """Piecewise-constant schedule; boundaries switch at their own step."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    lr = config.base_lr
    for boundary, value in config.lr_boundaries:
        if step >= boundary:
            lr = value
    return lr


def build_loss_mask(labels: np.ndarray, occupied: np.ndarray, logits: np.ndarray,
                    ratio: float) -> np.ndarray:
    """Per-cell loss weights with hard negative mining, applied per sample.

    Every occupied cell with a non-background label gets weight 1.  Among a
    sample's background token cells, only the top-(ratio x positive-count)
    by current loss are kept; PAD cells always get 0.  A sample with no
    positives falls back to weighting all its token cells.
    """
    if labels.shape != occupied.shape or logits.shape[0] != labels.shape[0]:
        raise ValueError("label/occupancy/logit shapes do not agree")
    nll = core.per_cell_nll(
        np.ascontiguousarray(logits.transpose(0, 2, 3, 1)), labels)
    weights = np.zeros(labels.shape, dtype=logits.dtype)
    for n in range(labels.shape[0]):
        pos = occupied[n] & (labels[n] != 0)
        neg = occupied[n] & (labels[n] == 0)
        n_pos = int(pos.sum())
        weights[n][pos] = 1.0
        if n_pos == 0:
            if neg.any():
                logger.warning("sample %d has no positive cells; weighting all "
                               "%d token cells", n, int(neg.sum()))
                weights[n][neg] = 1.0
            continue
        quota = int(ratio * n_pos)
        neg_idx = np.flatnonzero(neg.reshape(-1))
        if len(neg_idx) <= quota:
            weights[n][neg] = 1.0
        elif quota > 0:
            neg_losses = nll[n].reshape(-1)[neg_idx]
            keep = neg_idx[np.argpartition(-neg_losses, quota - 1)[:quota]]
            np.put(weights[n].reshape(-1), keep, 1.0)
    return weights


@dataclass
class TrainResult:
    steps: int
    final_loss: float
    log: list[dict]
    checkpoint_path: str | None


def _assemble_batch(docs, piece_cache, picks, shapes, class_set):
    grids = [map_to_grid(docs[i], piece_cache[i], s, class_set)
             for i, s in zip(picks, shapes)]
    rows = max(g.shape.rows for g in grids)
    cols = max(g.shape.cols for g in grids)
    b = len(grids)
    ids = np.zeros((b, rows, cols), dtype=np.int64)
    labels = np.zeros((b, rows, cols), dtype=np.int64)
    occ = np.zeros((b, rows, cols), dtype=bool)
    for n, g in enumerate(grids):
        r, c = g.shape.rows, g.shape.cols
        ids[n, :r, :c] = g.token_ids
        labels[n, :r, :c] = g.labels
        occ[n, :r, :c] = g.occupancy
    return ids, labels, occ


def train(
    model: TokenGridNet,
    docs: list[Document],
    vocab: Vocabulary,
    config: TrainConfig,
    class_set: ClassSet | None = None,
    checkpoint_dir: str | None = None,
    log_path: str | None = None,
    eval_interval: int | None = None,
    eval_fn=None,
) -> TrainResult:
    """Run the full optimisation budget over a document set.

    Batches are sampled with replacement; each slot draws its own grid shape.
    Checkpoints land at <checkpoint_dir>/step-<N>.ckpt.  Raises
    TrainingDiverged on a non-finite loss.
    """
    if not docs:
        raise ValueError("cannot train on an empty document set")
    class_set = class_set or ClassSet()
    piece_cache = [tokenize_document(d, vocab) for d in docs]
    if all(len(p) == 0 for p in piece_cache):
        raise ValueError("no document produced any token piece")
    optimizer = Adam(model.params())
    log: list[dict] = []
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    ckpt_path = None
    t0 = time.monotonic()

    def emit(entry: dict) -> None:
        log.append(entry)
        if log_file:
            log_file.write(json.dumps(entry) + "\n")

    def save(step: int) -> str:
        path = os.path.join(checkpoint_dir, f"step-{step}.ckpt")
        save_checkpoint(path, model, classes=class_set.names,
                        optimizer_state=optimizer.state_dict())
        return path

    try:
        loss = float("nan")
        for step in range(config.max_steps):
            pick_rng = np.random.default_rng([config.seed, step])
            picks = pick_rng.integers(0, len(docs), size=config.batch_size)
            shapes = [
                sample_shape(config.augment,
                             np.random.default_rng([config.seed, step, slot]))
                for slot in range(config.batch_size)
            ]
            ids, labels, occ = _assemble_batch(
                docs, piece_cache, picks, shapes, class_set)

            drop_rng = np.random.default_rng([config.seed, step, config.batch_size])
            logits = model.forward(ids, training=True, rng=drop_rng)
            weights = build_loss_mask(labels, occ, logits,
                                      config.hard_negative_ratio)
            loss, dlogits = core.masked_softmax_xent(logits, labels, weights)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss} at step {step} "
                    f"(lr={lr_at(step, config)}, batch={sorted(set(picks.tolist()))})")
            model.zero_grad()
            model.backward(dlogits)
            optimizer.step(lr_at(step, config))

            if step % config.log_interval == 0 or step == config.max_steps - 1:
                emit({
                    "step": step,
                    "loss": loss,
                    "lr": lr_at(step, config),
                    "masked_cells": int((weights > 0).sum()),
                    "positive_cells": int(((labels != 0) & occ).sum()),
                    "wall_time": round(time.monotonic() - t0, 3),
                })
            if eval_fn and eval_interval and (step + 1) % eval_interval == 0:
                snap = {"step": step, "eval": eval_fn(model)}
                emit(snap)
            if checkpoint_dir and (step + 1) % config.checkpoint_interval == 0:
                ckpt_path = save(step + 1)

        if checkpoint_dir and (ckpt_path is None
                               or not ckpt_path.endswith(f"step-{config.max_steps}.ckpt")):
            ckpt_path = save(config.max_steps)
    finally:
        if log_file:
            log_file.close()
    return TrainResult(config.max_steps, loss, log, ckpt_path)
