"""Data splits, Adam with value clipping, and the early-stopping loop."""

import json
import logging
import math
import warnings
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ParameterError
from .io_utils import atomic_write_text
from .model import HarmClassifier, loss as nll_loss

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def _split_sizes(n, ratios):
    """Largest-remainder apportionment of ``n`` items over ``ratios``."""
    raw = [n * r for r in ratios]
    sizes = [int(math.floor(x)) for x in raw]
    rem = n - sum(sizes)
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:rem]:
        sizes[i] += 1
    return sizes


def split_dataset(items: Sequence, ratios=(0.6, 0.2, 0.2), seed: int = 0,
                  stratify_by_label: bool = False, labels: Optional[Sequence] = None):
    """Shuffle by ``seed`` and cut into train/valid/test.

    With stratification each label is apportioned separately, so every
    split holds its exact share of each class to within one item. Labels
    default to ``item.severity``. Classes with fewer than three members go
    to train (with a warning).
    """
    ratios = tuple(float(r) for r in ratios)
    if abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ConfigError(f"split ratios must be non-negative and sum to 1, got {ratios}")
    n = len(items)
    if n == 0:
        raise ConfigError("cannot split an empty dataset")
    rng = np.random.default_rng(seed)
    parts = [[] for _ in ratios]
    if not stratify_by_label:
        order = rng.permutation(n)
        bounds = np.cumsum([0] + _split_sizes(n, ratios))
        for k in range(len(ratios)):
            parts[k] = [items[i] for i in order[bounds[k]:bounds[k + 1]]]
        return tuple(parts)
    if labels is None:
        labels = [getattr(it, "severity") for it in items]
    groups = defaultdict(list)
    for i, lab in enumerate(labels):
        groups[lab].append(i)
    chosen = [[] for _ in ratios]
    for lab in sorted(groups, key=str):
        idx = np.array(groups[lab])
        idx = idx[rng.permutation(len(idx))]
        if len(idx) < 3:
            warnings.warn(f"class {lab!r} has {len(idx)} members; assigning it to the training split")
            chosen[0].extend(idx.tolist())
            continue
        bounds = np.cumsum([0] + _split_sizes(len(idx), ratios))
        for k in range(len(ratios)):
            chosen[k].extend(idx[bounds[k]:bounds[k + 1]].tolist())
    for k in range(len(ratios)):
        sel = np.array(chosen[k], dtype=np.int64)
        sel = sel[rng.permutation(len(sel))]
        parts[k] = [items[i] for i in sel]
    return tuple(parts)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


def clip_gradients(grads: Dict[str, np.ndarray], threshold: float) -> Dict[str, np.ndarray]:
    """Clamp every component into ``[-threshold, threshold]``."""
    if not threshold > 0:
        raise ParameterError(f"clip threshold must be positive, got {threshold}")
    if math.isinf(threshold):
        return dict(grads)
    return {k: np.clip(g, -threshold, threshold) for k, g in grads.items()}


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Dict[str, np.ndarray]):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
              lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam; updates ``params`` and ``state`` in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, p in params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return params, state


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 128
    max_epochs: int = 6
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_threshold: float = 5.0
    early_stop_patience: int = 2
    monitor: str = "accuracy"  # or "f1" (positive-class / macro F1 on validation)
    seed: int = 0

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.early_stop_patience < 0:
            raise ConfigError("early_stop_patience must be >= 0")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.monitor not in ("accuracy", "f1"):
            raise ConfigError(f"monitor must be accuracy or f1, got {self.monitor!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float
    valid_accuracy: float
    valid_f1: float
    step_losses: List[float] = field(default_factory=list, repr=False)


@dataclass
class TrainHistory:
    epochs: List[EpochRecord] = field(default_factory=list)
    chosen_epoch: int = -1
    monitor: str = "accuracy"

    def monitored(self, rec: EpochRecord):
        return rec.valid_accuracy if self.monitor == "accuracy" else rec.valid_f1

    def to_jsonl(self) -> str:
        lines = []
        for rec in self.epochs:
            lines.append(json.dumps({
                "epoch": rec.epoch,
                "train_loss": rec.train_loss,
                "valid_loss": rec.valid_loss,
                "valid_accuracy": rec.valid_accuracy,
                "valid_f1": rec.valid_f1,
                "chosen": rec.epoch == self.chosen_epoch,
            }, sort_keys=True))
        return "\n".join(lines) + "\n"

    def save(self, path):
        atomic_write_text(path, self.to_jsonl())


@dataclass
class EncodedSet:
    ids: np.ndarray
    mask: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


def _f1_score(pred, labels, num_classes):
    from .metrics import confusion, prf1

    counts = confusion(pred, labels, num_classes)
    if num_classes == 2:
        return prf1(counts, 1)[2]
    return float(np.mean([prf1(counts, k)[2] for k in range(num_classes)]))


def evaluate_split(model: HarmClassifier, data: EncodedSet, batch_size=256):
    """``(mean loss, accuracy, f1)`` in inference mode."""
    probs = model.predict_proba(data.ids, data.mask, batch_size)
    p_true = np.maximum(probs[np.arange(len(data)), data.labels], 1e-12)
    pred = probs.argmax(axis=1)
    return (float(-np.log(p_true).mean()), float((pred == data.labels).mean()),
            _f1_score(pred, data.labels, model.config.num_classes))


def train_step(model: HarmClassifier, ids, mask, labels, state: AdamState, cfg: TrainConfig) -> float:
    params = model.parameters()
    with ad.Tape() as tape:
        loss = nll_loss(model.forward(ids, mask), labels)
    grads = ad.backward(tape, loss, params)
    grads = clip_gradients(grads, cfg.clip_threshold)
    adam_step({k: p.data for k, p in params.items()}, grads, state,
              cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    return float(loss.data)


def train(model: HarmClassifier, train_set: EncodedSet, valid_set: EncodedSet, cfg: TrainConfig,
          callback=None):
    """Mini-batch Adam with early stopping on the monitored validation metric.

    Returns ``(model, history)`` with the best-scoring epoch's parameters
    restored (earliest epoch on ties).
    """
    cfg.validate()
    if len(train_set) == 0 or len(valid_set) == 0:
        raise ConfigError("training and validation sets must be non-empty")
    history = TrainHistory(monitor=cfg.monitor)
    state = AdamState.zeros_like(model.state_dict())
    best_score = -np.inf
    best_state = None
    since_best = 0
    N = len(train_set)
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(N)
        step_losses = []
        for s in range(0, N, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            step_losses.append(train_step(
                model, train_set.ids[idx], train_set.mask[idx], train_set.labels[idx], state, cfg))
        model.eval()
        v_loss, v_acc, v_f1 = evaluate_split(model, valid_set)
        rec = EpochRecord(epoch, float(np.mean(step_losses)), v_loss, v_acc, v_f1, step_losses)
        history.epochs.append(rec)
        score = history.monitored(rec)
        log.info("epoch %d train_loss=%.4f valid_loss=%.4f valid_acc=%.4f valid_f1=%.4f",
                 epoch, rec.train_loss, v_loss, v_acc, v_f1)
        if callback is not None:
            callback(rec)
        if score > best_score:
            best_score = score
            best_state = model.state_dict()
            history.chosen_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best > cfg.early_stop_patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    return model, history
