"""Loss, metrics, augmentation, and the training/evaluation loops.

The loss is cross-entropy weighted by each triangle's share of the total
surface; accuracy is correctly classified area over total area, pooled
across meshes. Everything is reproducible from the seed: batches are
processed in sample-index order and per-sample RNG streams are derived
from (seed, epoch, sample index).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from meshseg import autodiff as ad
from meshseg.autodiff import Tensor
from meshseg.errors import ConfigError, TrainingDivergedError
from meshseg.model import AttentionMasks, ModelConfig, build_masks, init_params, met_forward
from meshseg.optim import AdamW
from meshseg.preprocess import COORD_COLS, NORMAL_COLS, PAD_LABEL, Sample

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "Metrics",
    "area_weights",
    "weighted_cross_entropy",
    "area_accuracy",
    "random_rotation",
    "augment",
    "train",
    "evaluate",
]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-5
    weight_decay: float = 0.01
    batch_size: int = 12
    max_steps: int = 500
    seed: int = 0
    validation_fraction: float = 0.06
    augment: bool = True
    scale_range: tuple[float, float] = (0.9, 1.1)
    translation_range: float = 0.1
    eval_every: int = 50

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.validation_fraction < 1:
            raise ConfigError("validation_fraction must be in [0, 1)")


@dataclass(frozen=True)
class Metrics:
    area_accuracy: float
    per_class: dict[int, float]
    mean_loss: float

    def to_dict(self) -> dict:
        return {
            "area_accuracy": self.area_accuracy,
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "mean_loss": self.mean_loss,
        }


def area_weights(areas: np.ndarray, real_mask: np.ndarray) -> np.ndarray:
    """Per-face loss weights: area over total real area; 0 on padding."""
    areas = np.where(real_mask, areas, 0.0)
    total = areas.sum()
    if total <= 0:
        raise ValueError("total face area is zero")
    return areas / total


def weighted_cross_entropy(scores: Tensor, labels: np.ndarray, weights: np.ndarray) -> Tensor:
    """Sum over faces of weight * negative log-likelihood of the true class.

    Faces labeled ``PAD_LABEL`` contribute exactly zero (their weight is
    forced to 0 and a dummy class 0 is gathered).
    """
    labels = np.asarray(labels)
    num_classes = scores.shape[-1]
    valid = labels != PAD_LABEL
    if labels[valid].size and labels[valid].max() >= num_classes:
        raise ValueError(
            f"label {labels[valid].max()} out of range for {num_classes} classes"
        )
    safe_labels = np.where(valid, labels, 0)
    w = np.where(valid, weights, 0.0).astype(scores.dtype)
    logp = ad.log_softmax(scores)
    picked = ad.gather_rows(logp, safe_labels)
    return ad.scale(ad.reduce_sum(ad.mul(picked, Tensor(w))), -1.0)


def area_accuracy(
    predicted: np.ndarray,
    true_labels: np.ndarray,
    areas: np.ndarray,
    real_mask: np.ndarray,
) -> float:
    """Correctly classified surface area over total real surface area."""
    real = np.asarray(real_mask, dtype=bool)
    total = areas[real].sum()
    if total <= 0:
        raise ValueError("total face area is zero")
    correct = areas[real & (np.asarray(predicted) == np.asarray(true_labels))].sum()
    return float(correct / total)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation matrix via a normalized quaternion."""
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def augment(sample: Sample, rng: np.random.Generator, cfg: TrainConfig | None = None) -> Sample:
    """Random similarity transform of the coordinate blocks.

    Normals are rotated only; spectral features, adjacency, and clustering
    are invariant under similarity transforms and stay untouched. If any
    coordinate leaves [-1, 1] the coordinates are re-standardized.
    """
    cfg = cfg or TrainConfig()
    rot = random_rotation(rng)
    s = rng.uniform(*cfg.scale_range)
    t = rng.uniform(-cfg.translation_range, cfg.translation_range, size=3)

    features = sample.features.copy()
    real = sample.real_mask
    coords = features[real, COORD_COLS].reshape(-1, 3, 3)
    coords = s * (coords @ rot.T) + t
    flat = coords.reshape(-1, 3)
    peak = np.abs(flat).max()
    if peak > 1.0:
        lo, hi = flat.min(axis=0), flat.max(axis=0)
        extent = float((hi - lo).max())
        coords = (coords - 0.5 * (lo + hi)) * (2.0 / extent)
    features[real, COORD_COLS] = coords.reshape(-1, 9)
    features[real, NORMAL_COLS] = features[real, NORMAL_COLS] @ rot.T
    return replace(sample, features=features)


@dataclass
class _Prepared:
    sample: Sample
    masks: AttentionMasks
    weights: np.ndarray


def _prepare(samples, dtype):
    return [
        _Prepared(
            sample=s,
            masks=build_masks(s, dtype=dtype),
            weights=area_weights(s.areas, s.real_mask),
        )
        for s in samples
    ]


def _forward_loss(prep: _Prepared, params, model_cfg, training, rng):
    scores = met_forward(
        prep.sample, params, model_cfg, training=training, rng=rng, masks=prep.masks
    )
    loss = weighted_cross_entropy(scores, prep.sample.labels, prep.weights)
    return scores, loss


def evaluate(samples, params, model_cfg: ModelConfig, prepared=None) -> Metrics:
    """Eval-mode metrics pooled over all meshes by summing areas."""
    if prepared is None:
        prepared = _prepare(samples, params["embed.w"].dtype)
    correct_area = 0.0
    total_area = 0.0
    class_correct: dict[int, float] = {}
    class_total: dict[int, float] = {}
    losses = []
    for prep in prepared:
        s = prep.sample
        if s.num_classes > model_cfg.num_classes:
            raise ConfigError(
                f"sample has {s.num_classes} classes, model has {model_cfg.num_classes}"
            )
        scores, loss = _forward_loss(prep, params, model_cfg, training=False, rng=None)
        losses.append(loss.item())
        pred = scores.data.argmax(axis=1)
        real = s.real_mask
        hit = real & (pred == s.labels)
        correct_area += s.areas[hit].sum()
        total_area += s.areas[real].sum()
        for c in np.unique(s.labels[real]):
            sel = real & (s.labels == c)
            class_total[int(c)] = class_total.get(int(c), 0.0) + s.areas[sel].sum()
            class_correct[int(c)] = class_correct.get(int(c), 0.0) + s.areas[sel & hit].sum()
    per_class = {
        c: (class_correct[c] / class_total[c]) if class_total[c] > 0 else 0.0
        for c in sorted(class_total)
    }
    return Metrics(
        area_accuracy=float(correct_area / total_area),
        per_class=per_class,
        mean_loss=float(np.mean(losses)),
    )


def train(
    samples: list[Sample],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dtype=np.float32,
    metrics_path: str | Path | None = None,
    params: dict[str, Tensor] | None = None,
):
    """Mini-batch AdamW training with a held-out validation fraction.

    Returns ``(best_params, history)`` where history is the list of logged
    validation records. The retained parameters are those with the best
    validation area accuracy (training accuracy when the validation split
    is empty).
    """
    if not samples:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(train_cfg.seed)
    if params is None:
        params = init_params(model_cfg, rng, dtype=dtype)
    optimizer = AdamW(
        params, lr=train_cfg.lr, weight_decay=train_cfg.weight_decay
    )

    indices = rng.permutation(len(samples))
    n_val = int(np.floor(train_cfg.validation_fraction * len(samples)))
    val_idx, train_idx = indices[:n_val], indices[n_val:]
    if not len(train_idx):
        raise ValueError("validation split leaves no training samples")
    prepared = _prepare(samples, dtype)
    train_set = [prepared[i] for i in train_idx]
    val_set = [prepared[i] for i in val_idx]

    history: list[dict] = []
    best_acc = -1.0
    best_params = None
    log_file = open(metrics_path, "w") if metrics_path else None

    def snapshot():
        return {name: p.data.copy() for name, p in params.items()}

    def record(step, loss_value, split):
        eval_set = val_set if split == "val" else train_set
        metrics = evaluate(None, params, model_cfg, prepared=eval_set)
        entry = {
            "step": step,
            "loss": loss_value,
            "accuracy": metrics.area_accuracy,
            "split": split,
        }
        history.append(entry)
        if log_file:
            log_file.write(json.dumps(entry) + "\n")
            log_file.flush()
        return metrics

    try:
        step = 0
        epoch = 0
        while step < train_cfg.max_steps:
            order = np.random.default_rng((train_cfg.seed, 7, epoch)).permutation(
                len(train_set)
            )
            for start in range(0, len(order), train_cfg.batch_size):
                if step >= train_cfg.max_steps:
                    break
                batch = order[start : start + train_cfg.batch_size]
                optimizer.zero_grad()
                batch_loss = 0.0
                for idx in sorted(batch):
                    sample_rng = np.random.default_rng((train_cfg.seed, epoch, int(idx)))
                    prep = train_set[idx]
                    if train_cfg.augment:
                        prep = _Prepared(
                            sample=augment(prep.sample, sample_rng, train_cfg),
                            masks=prep.masks,
                            weights=prep.weights,
                        )
                    _, loss = _forward_loss(
                        prep, params, model_cfg, training=True, rng=sample_rng
                    )
                    batch_loss += loss.item()
                    ad.backward(loss)
                batch_loss /= len(batch)
                if not np.isfinite(batch_loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at step {step}",
                        diagnostics={
                            "step": step,
                            "loss": batch_loss,
                            "param_norms": {
                                name: float(np.linalg.norm(p.data))
                                for name, p in sorted(params.items())
                            },
                        },
                    )
                inv = 1.0 / len(batch)
                for p in params.values():
                    if p.grad is not None:
                        p.grad = p.grad * inv
                optimizer.step()
                step += 1
                if step % train_cfg.eval_every == 0 or step == train_cfg.max_steps:
                    metrics = record(step, batch_loss, "val" if val_set else "train")
                    logger.info(
                        "step %d loss %.4f accuracy %.4f", step, batch_loss, metrics.area_accuracy
                    )
                    if metrics.area_accuracy > best_acc:
                        best_acc = metrics.area_accuracy
                        best_params = snapshot()
            epoch += 1
    finally:
        if log_file:
            log_file.close()
    if best_params is not None:
        for name, data in best_params.items():
            params[name].data = data
    return params, history
