"""Training loop: NADAM optimization, inverse-time learning-rate decay
with plateau reduction, checkpoint registry, and the ablation grid runner.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .data import AugmentConfig, augment, sample_rng
from .losses import LossConfig, make_loss
from .metrics import confusion, metrics_csv_row, roc_auc, scalar_metrics
from .model import ModelConfig, R2AUNet, build
from .tensor import Tensor

__all__ = [
    "OptimizerState", "PlateauConfig", "TrainConfig", "CheckpointRegistry",
    "TrainingError", "nadam_step", "lr_schedule", "train", "evaluate_model",
    "ablation_grid", "TABLE1_GRID", "METRIC_LOG_COLUMNS",
]

METRIC_LOG_COLUMNS = ["epoch", "train_loss", "val_dice", "val_precision",
                      "val_recall", "val_accuracy", "val_auc", "val_kappa", "lr"]


class TrainingError(RuntimeError):
    pass


@dataclass
class OptimizerState:
    lr: float = 1e-4
    decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@dataclass
class PlateauConfig:
    patience: int = 3
    factor: float = 0.5
    min_lr: float = 1e-6


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    loss: LossConfig = field(default_factory=LossConfig)
    lr: float = 1e-4
    decay: float = 1e-5
    plateau: PlateauConfig = field(default_factory=PlateauConfig)
    top_k: int = 1
    augment: AugmentConfig | None = None
    early_stop_dice: float | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


class CheckpointRegistry:
    """Parameter snapshots at validation optima during one run."""

    def __init__(self, top_k=1):
        self.top_k = max(top_k, 1)
        self.entries = []   # dicts: epoch, val_metric, arrays

    def register(self, epoch, val_metric, arrays):
        snap = {name: np.array(a, copy=True) for name, a in arrays.items()}
        self.entries.append({"epoch": epoch, "val_metric": val_metric,
                             "arrays": snap})
        self.entries.sort(key=lambda e: (-e["val_metric"], e["epoch"]))
        del self.entries[self.top_k:]

    @property
    def best(self):
        if not self.entries:
            raise TrainingError("empty checkpoint registry")
        return self.entries[0]

    def ensemble_arrays(self):
        """Mean of the retained snapshots (best weights when top_k == 1)."""
        names = self.best["arrays"].keys()
        return {name: np.mean([e["arrays"][name] for e in self.entries], axis=0)
                for name in names}


def nadam_step(params: dict, state: OptimizerState, lr=None):
    """One NADAM update over `params` (name -> Tensor with .grad set)."""
    lr = state.lr if lr is None else lr
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        # Nesterov look-ahead on the first moment
        m_hat = b1 * m / (1 - b1 ** (t + 1)) + (1 - b1) * g / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        state.m[name] = m
        state.v[name] = v
    state.step = t


def lr_schedule(lr0, decay, plateau: PlateauConfig, epoch, val_history):
    """Inverse-time decay, plus a plateau cut each time the validation
    metric fails to improve for `patience` consecutive epochs."""
    best = -math.inf
    since, cuts = 0, 0
    for v in val_history:
        if v > best:
            best = v
            since = 0
        else:
            since += 1
            if since >= plateau.patience:
                cuts += 1
                since = 0
    lr = lr0 / (1.0 + decay * epoch) * plateau.factor ** cuts
    return max(lr, plateau.min_lr)


def _batch_tensor(samples, dtype):
    images = np.concatenate([s.image for s in samples]).astype(dtype)
    masks = np.concatenate([s.mask for s in samples]).astype(dtype)
    return Tensor(images), masks


def evaluate_model(model: R2AUNet, samples, batch_size=4, threshold=0.5,
                   per_image=False) -> dict:
    """Segmentation metrics on a sample list.  Pooled over pixels by
    default; per_image averages each metric over samples instead."""
    counts = None
    probs, targets = [], []
    per_rows = []
    for i in range(0, len(samples), batch_size):
        x, mask = _batch_tensor(samples[i:i + batch_size], model.dtype)
        prob = model.forward(x, mode="eval").data
        pred = (prob >= threshold).astype(np.uint8)
        for b in range(pred.shape[0]):
            c = confusion(pred[b], mask[b].astype(np.uint8))
            counts = c if counts is None else counts + c
            if per_image:
                row = scalar_metrics(c)
                if mask[b].any() and not mask[b].all():
                    row["auc"] = roc_auc(prob[b], mask[b].astype(np.uint8))
                per_rows.append(row)
        probs.append(prob.ravel())
        targets.append(mask.ravel())
    if per_image:
        keys = {k for r in per_rows for k in r}
        return {k: float(np.mean([r[k] for r in per_rows if k in r]))
                for k in keys}
    out = scalar_metrics(counts)
    target = np.concatenate(targets).astype(np.uint8)
    if 0 < target.sum() < target.size:
        out["auc"] = roc_auc(np.concatenate(probs), target)
    else:
        out["auc"] = float("nan")
    return out


def train(model: R2AUNet, splits: dict, cfg: TrainConfig, seed=0):
    """Run the full loop; returns (model with best weights restored,
    CheckpointRegistry, list of metric-log rows)."""
    train_set = list(splits["train"])
    val_set = list(splits["val"])
    train_ids = {s.id for s in train_set}
    if train_ids & {s.id for s in val_set}:
        raise ValueError("train/val splits share sample ids")
    loss_fn = make_loss(cfg.loss)
    state = OptimizerState(lr=cfg.lr, decay=cfg.decay)
    registry = CheckpointRegistry(cfg.top_k)
    rng = np.random.default_rng(seed)
    log = []
    val_history = []
    for epoch in range(cfg.epochs):
        lr = lr_schedule(cfg.lr, cfg.decay, cfg.plateau, epoch, val_history)
        order = rng.permutation(len(train_set))
        losses = []
        for bstart in range(0, len(order), cfg.batch_size):
            batch = [train_set[j] for j in order[bstart:bstart + cfg.batch_size]]
            if cfg.augment is not None:
                batch = [augment(s, cfg.augment,
                                 sample_rng(seed, s.id, epoch)) for s in batch]
            x, mask = _batch_tensor(batch, model.dtype)
            model.zero_grad()
            pred = model.forward(x, mode="train")
            loss = loss_fn(pred, mask)
            lv = float(loss.data)
            if not math.isfinite(lv):
                raise TrainingError(
                    f"non-finite loss {lv} at epoch {epoch}, "
                    f"batch {bstart // cfg.batch_size}")
            loss.backward()
            nadam_step(model.parameters(), state, lr=lr)
            losses.append(lv)
        val = evaluate_model(model, val_set, cfg.batch_size)
        val_dice = val["dice"]
        val_history.append(val_dice)
        registry.register(epoch, val_dice, model.named_arrays())
        log.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                    "val_dice": val_dice, "val_precision": val["precision"],
                    "val_recall": val["recall"], "val_accuracy": val["accuracy"],
                    "val_auc": val["auc"], "val_kappa": val["kappa"], "lr": lr})
        if cfg.early_stop_dice is not None and val_dice >= cfg.early_stop_dice:
            break
    model.load_arrays(registry.ensemble_arrays() if cfg.top_k > 1
                      else registry.best["arrays"])
    return model, registry, log


# Table-1 sweep: 13 focal Tversky settings, plain Dice, BCE+Dice, three
# Tversky settings, and plain BCE — 19 configurations.
TABLE1_GRID = tuple(
    [LossConfig("focal_tversky", alpha=a, beta=b, gamma=g)
     for a, b, g in [(0.4, 0.6, 0.75), (0.3, 0.7, 0.75), (0.2, 0.8, 0.75),
                     (0.3, 0.7, 0.80), (0.3, 0.7, 0.90), (0.3, 0.7, 0.65),
                     (0.2, 0.8, 0.65), (0.2, 0.8, 0.55), (0.2, 0.8, 0.45),
                     (0.2, 0.8, 0.50), (0.2, 0.8, 0.85), (0.4, 0.6, 0.85),
                     (0.4, 0.6, 0.65)]]
    + [LossConfig("dice"), LossConfig("bce_dice")]
    + [LossConfig("tversky", alpha=a, beta=b)
       for a, b in [(0.2, 0.8), (0.3, 0.7), (0.4, 0.6)]]
    + [LossConfig("wbce", wbce_weight=0.5)]
)


def ablation_grid(splits, model_cfg: ModelConfig, grid, train_cfg: TrainConfig,
                  seed=0, dataset_name="synthetic"):
    """Train one model per loss configuration under an identical budget;
    returns one metrics row per configuration (Table-1 column schema).
    Failed rows carry an 'error' field and the grid continues."""
    rows = []
    for loss_cfg in grid:
        cfg = copy.deepcopy(train_cfg)
        cfg.loss = loss_cfg
        model = build(model_cfg, seed=seed, dtype=np.float32)
        try:
            model, _, _ = train(model, splits, cfg, seed=seed)
            values = evaluate_model(model, splits["val"], cfg.batch_size)
            row = metrics_csv_row(dataset_name, model_cfg.variant_name(),
                                  loss_cfg, values)
        except TrainingError as exc:
            row = metrics_csv_row(dataset_name, model_cfg.variant_name(),
                                  loss_cfg, {})
            row["error"] = str(exc)
        rows.append(row)
    return rows
