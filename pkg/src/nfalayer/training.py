"""Soft-IoU loss, total-variation regularizer, Adagrad with cosine annealing, and the epoch loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .backbone import Checkpoint, NetworkSpec, UNet, make_checkpoint, save_checkpoint
from .errors import ParameterError, TrainingDivergedError
from .evaluation import average_precision, object_metrics
from .numerics.tensor import Tensor

log = logging.getLogger(__name__)

SOFT_IOU_EPS = 1e-6
LOG_HEADER = ("epoch", "loss", "lr", "val_f1", "val_ap")


def soft_iou_loss(pred, target) -> Tensor:
    """1 - (Σ p·g + ε) / (Σ p + Σ g - Σ p·g + ε), sums taken over the whole batch."""
    pred = nx.as_tensor(pred)
    target = nx.as_tensor(target)
    if pred.shape != target.shape:
        raise ParameterError(f"soft_iou_loss: prediction {pred.shape} and target {target.shape} differ")
    inter = nx.tsum(pred * target)
    union = nx.tsum(pred) + nx.tsum(target) - inter
    return 1.0 - (inter + SOFT_IOU_EPS) / (union + SOFT_IOU_EPS)


def gradient_regularizer(pred) -> Tensor:
    """Mean anisotropic total variation over the last two (spatial) axes."""
    pred = nx.as_tensor(pred)
    if pred.ndim < 2:
        raise ParameterError(f"gradient_regularizer needs a spatial map, got shape {pred.shape}")
    lead = (slice(None),) * (pred.ndim - 2)
    total = None
    if pred.shape[-2] > 1:
        dv = pred[lead + (slice(1, None), slice(None))] - pred[lead + (slice(None, -1), slice(None))]
        total = nx.mean(nx.absolute(dv))
    if pred.shape[-1] > 1:
        dh = pred[lead + (slice(None), slice(1, None))] - pred[lead + (slice(None), slice(None, -1))]
        term = nx.mean(nx.absolute(dh))
        total = term if total is None else total + term
    return total if total is not None else nx.tsum(pred * 0.0)


def adagrad_step(params: Sequence, lr: float, eps: float = 1e-10) -> None:
    """In place: accumulator += g²; param -= lr·g / (√accumulator + eps)."""
    for p in params:
        g = p.grad
        p.accumulator += g * g
        p.data -= lr * g / (np.sqrt(p.accumulator) + eps)


def cosine_annealing(lr_max: float, lr_min: float, t: float, T: float) -> float:
    if T <= 0:
        raise ParameterError(f"schedule length must be positive, got T={T}")
    if t < 0 or t > T:
        raise ParameterError(f"schedule position t={t} is outside [0, {T}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / T))


# ---------------------------------------------------------------------------
# inference helpers
# ---------------------------------------------------------------------------

@dataclass
class Prediction:
    scores: np.ndarray  # (h, w)
    significance: Optional[np.ndarray] = None  # fused significance, NFA head only
    n_test: int = 1


def predict(model: UNet, images: Sequence[np.ndarray]) -> list:
    """Score maps one image at a time (the naive model is estimated per image)."""
    out = []
    with nx.no_grad():
        for img in images:
            x = np.asarray(img, dtype=np.float64)
            if x.ndim == 2:
                x = x[None, None]
            elif x.ndim == 3:
                x = x[None]
            res = model(x, train=False)
            sig = res.fused.values.data[0, 0].copy() if res.fused is not None else None
            n_test = res.fused.n_test if res.fused is not None else 1
            out.append(Prediction(res.scores.data[0, 0].copy(), sig, n_test))
    return out


def validate(model: UNet, samples: Sequence, threshold: Optional[float] = None) -> tuple[float, float]:
    """Object-level F1 at the head's threshold, and AP, on the given samples."""
    if not samples:
        return float("nan"), float("nan")
    thr = model.spec.threshold if threshold is None else threshold
    scores = [p.scores for p in predict(model, [s.image for s in samples])]
    masks = [s.mask for s in samples]
    return object_metrics(scores, masks, thr).f1, average_precision(scores, masks)


# ---------------------------------------------------------------------------
# epoch loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint  # best on validation F1 (last epoch if there is no validation split)
    final: Checkpoint
    log: list = field(default_factory=list)  # rows matching LOG_HEADER
    best_epoch: int = 0


def _batch(samples: Sequence, idx: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    imgs, masks = [], []
    for i in idx:
        img, m = samples[i].image, samples[i].mask
        if rng.random() < 0.5:
            img, m = img[:, ::-1], m[:, ::-1]
        if rng.random() < 0.5:
            img, m = img[::-1, :], m[::-1, :]
        imgs.append(img)
        masks.append(m)
    return np.stack(imgs)[:, None].astype(np.float64), np.stack(masks)[:, None].astype(np.float64)


def _param_norms(model: UNet) -> dict:
    return {name: float(np.linalg.norm(p.data)) for name, p in model.named_parameters().items()}


def write_log(path, rows: Sequence) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
        for r in rows:
            writer.writerow([r[0], repr(float(r[1])), repr(float(r[2])), repr(float(r[3])), repr(float(r[4]))])


def train(
    spec: NetworkSpec,
    dataset,
    epochs: int,
    lr: float = 0.01,
    reg_weight: Optional[float] = None,
    seed: int = 0,
    batch_size: int = 4,
    lr_min: float = 0.0,
    out_dir=None,
    validate_every: int = 1,
) -> TrainResult:
    """Train a fresh network; deterministic given ``seed``.

    Parameters
    ----------
    spec : NetworkSpec
        Architecture and head configuration.
    dataset : Dataset
        Uses the ``train`` split for updates and ``val`` for checkpoint selection.
    epochs : int
        Number of passes; 0 returns the initialization.
    reg_weight : float, optional
        Weight of the total-variation term; defaults to ``spec.reg_weight``.
    out_dir : path, optional
        If given, ``train_log.csv``, ``best.ckpt`` and ``last.ckpt`` are written there.
    """
    train_set = list(dataset.train)
    if not train_set:
        raise ParameterError("training split is empty")
    if epochs < 0 or batch_size < 1:
        raise ParameterError(f"epochs must be >= 0 and batch_size >= 1 (got {epochs}, {batch_size})")
    reg = spec.reg_weight if reg_weight is None else reg_weight
    val_set = list(dataset.val)
    model = UNet(spec, seed)
    params = list(model.named_parameters().values())
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    best = make_checkpoint(model, 0)
    best_key = (-math.inf, -math.inf)
    best_epoch = 0
    rows = []
    for epoch in range(epochs):
        cur_lr = cosine_annealing(lr, lr_min, epoch, epochs)
        order = rng.permutation(len(train_set))
        losses = []
        for b, start in enumerate(range(0, len(order), batch_size)):
            x, y = _batch(train_set, order[start:start + batch_size], rng)
            model.zero_grad()
            scores = model(x, train=True).scores
            loss = soft_iou_loss(scores, y)
            if reg:
                loss = loss + reg * gradient_regularizer(scores)
            value = loss.item()
            if not math.isfinite(value):
                norms = _param_norms(model)
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch + 1}, batch {b}; parameter norms: "
                    + ", ".join(f"{k}={v:.3g}" for k, v in norms.items())
                )
            nx.backward(loss)
            adagrad_step(params, cur_lr)
            losses.append(value)
        mean_loss = float(np.mean(losses))
        val_f1 = val_ap = float("nan")
        if val_set and ((epoch + 1) % validate_every == 0 or epoch + 1 == epochs):
            val_f1, val_ap = validate(model, val_set)
            key = (val_f1, val_ap)
            if key > best_key:
                best_key, best, best_epoch = key, make_checkpoint(model, epoch + 1), epoch + 1
        rows.append((epoch + 1, mean_loss, cur_lr, val_f1, val_ap))
        log.info("epoch %d loss %.5f lr %.5f val_f1 %.4f val_ap %.4f", *rows[-1])
    final = make_checkpoint(model, epochs)
    if not val_set:
        best, best_epoch = final, epochs
    result = TrainResult(best, final, rows, best_epoch)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_log(out / "train_log.csv", rows)
        save_checkpoint(out / "best.ckpt", best)
        save_checkpoint(out / "last.ckpt", final)
    return result
