"""Training protocol: Adam with decoupled weight decay, per-epoch cosine
annealing, seeded mini-batch shuffling, early stopping on validation
accuracy, and best-checkpoint retention.

Everything stochastic draws from counter-keyed streams (see rng.py), so a
fixed (seed, data, config) triple reproduces training logs and checkpoints
bitwise. Data augmentation is deliberately a no-op hook: the protocol
reserves a place for it without defining any transform.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import backward
from .errors import (
    ConfigError,
    CorruptCache,
    EmptySplit,
    InsufficientClassSamples,
    LabelOutOfRange,
    NonFiniteLoss,
    ShapeMismatch,
)
from .features import read_features
from .model import (
    LABEL_TO_INDEX,
    LABELS,
    ArchConfig,
    clone_params,
    forward,
    init_params,
)
from .rng import (
    STREAM_AUGMENT,
    STREAM_DROPOUT,
    STREAM_SHUFFLE,
    STREAM_SPLIT,
    DropoutStreams,
    derived_rng,
)

SPLITS = ("train", "val", "test")

TRAIN_LOG_HEADER = ("epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc")

FEATURE_INDEX_NAME = "index.csv"


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters; defaults are the flagship recipe."""

    lr0: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 32
    max_epochs: int = 100
    early_stop_patience: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eta_min: float = 0.0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs it)")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if not 0.0 <= self.eta_min <= self.lr0:
            raise ValueError("eta_min must lie in [0, lr0]")


# --- manifests and splits ----------------------------------------------------

@dataclass
class ManifestRow:
    """One utterance: audio path, integer label, optional split name."""

    path: str
    label: int
    split: str | None = None


def read_manifest(path) -> list[ManifestRow]:
    """CSV with header ``path,label`` or ``path,label,split``. Labels are the
    lowercase class names. Relative audio paths are resolved against the
    manifest's directory."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path}: empty manifest") from None
        if header not in (["path", "label"], ["path", "label", "split"]):
            raise ConfigError(f"{path}: unexpected manifest header {header}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ConfigError(f"{path}:{lineno}: expected {len(header)} fields")
            wav = rec[0]
            if not os.path.isabs(wav):
                wav = str(path.parent / wav)
            name = rec[1].strip().lower()
            if name not in LABEL_TO_INDEX:
                raise LabelOutOfRange(f"{path}:{lineno}: unknown label {rec[1]!r}")
            split = None
            if len(rec) == 3 and rec[2].strip():
                split = rec[2].strip().lower()
                if split not in SPLITS:
                    raise ConfigError(f"{path}:{lineno}: unknown split {rec[2]!r}")
            rows.append(ManifestRow(wav, LABEL_TO_INDEX[name], split))
    return rows


def write_manifest(rows, path) -> None:
    """Paths are written exactly as given (writer chooses relative or not)."""
    has_split = any(r.split for r in rows)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("path", "label", "split") if has_split else ("path", "label"))
        for r in rows:
            rec = [r.path, LABELS[r.label]]
            if has_split:
                rec.append(r.split or "")
            writer.writerow(rec)


def _apportion(n: int, ratios) -> list[int]:
    """Largest-remainder split of n items into len(ratios) buckets, then a
    fix-up pass so no bucket is empty (possible because n >= len(ratios))."""
    exact = [n * r for r in ratios]
    counts = [int(math.floor(e)) for e in exact]
    rem = n - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:rem]:
        counts[i] += 1
    while min(counts) == 0:
        counts[counts.index(max(counts))] -= 1
        counts[counts.index(min(counts))] += 1
    return counts


def make_splits(rows, ratios=(0.70, 0.15, 0.15), seed: int = 0) -> list[ManifestRow]:
    """Stratified train/val/test assignment, deterministic in the seed.

    Every class lands in every split, which requires three or more
    utterances per class and strictly positive ratios.
    """
    if len(ratios) != 3:
        raise ConfigError("need exactly three ratios (train, val, test)")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must sum to 1, got {ratios}")
    if min(ratios) <= 0:
        raise InsufficientClassSamples(
            "every split needs a positive ratio, otherwise stratification is impossible")

    by_label: dict[int, list[int]] = {}
    for i, row in enumerate(rows):
        by_label.setdefault(row.label, []).append(i)

    out = [ManifestRow(r.path, r.label, r.split) for r in rows]
    for label in sorted(by_label):
        idxs = np.asarray(by_label[label])
        if idxs.size < 3:
            raise InsufficientClassSamples(
                f"class {LABELS[label]!r} has {idxs.size} utterances, needs >= 3")
        order = idxs[derived_rng(seed, STREAM_SPLIT, label).permutation(idxs.size)]
        counts = _apportion(idxs.size, ratios)
        start = 0
        for split, count in zip(SPLITS, counts):
            for i in order[start:start + count]:
                out[i].split = split
            start += count
    return out


# --- feature cache and dataset ------------------------------------------------

def read_feature_index(cache_dir) -> dict[str, str]:
    """Map utterance path -> feature file name inside the cache directory."""
    index_path = Path(cache_dir) / FEATURE_INDEX_NAME
    if not index_path.exists():
        raise CorruptCache(
            f"{index_path} not found; run the featurize command to build the cache")
    with open(index_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["path", "feature_file"]:
            raise CorruptCache(f"{index_path}: unexpected header {header}")
        return {rec[0]: rec[1] for rec in reader if rec}


def write_feature_index(mapping: dict[str, str], cache_dir) -> None:
    index_path = Path(cache_dir) / FEATURE_INDEX_NAME
    with open(index_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("path", "feature_file"))
        for path, name in mapping.items():
            writer.writerow((path, name))


@dataclass
class FeatureDataset:
    """In-memory feature tensor N x 1 x F x T with labels, paths, splits."""

    features: np.ndarray
    labels: np.ndarray
    paths: tuple[str, ...]
    splits: tuple[str, ...]

    def __len__(self) -> int:
        return self.features.shape[0]

    def indices(self, split: str) -> np.ndarray:
        return np.asarray([i for i, s in enumerate(self.splits) if s == split],
                          dtype=np.int64)


def load_dataset(rows, cache_dir) -> FeatureDataset:
    """Assemble a FeatureDataset for manifest rows from the feature cache."""
    if not rows:
        raise EmptySplit("manifest has no rows")
    index = read_feature_index(cache_dir)
    cache_dir = Path(cache_dir)
    maps = []
    for row in rows:
        name = index.get(row.path)
        if name is None:
            raise CorruptCache(
                f"no cached features for {row.path}; run the featurize command first")
        fm = read_features(cache_dir / name)
        maps.append(fm.values.astype(np.float32))
    shape = maps[0].shape
    for row, m in zip(rows, maps):
        if m.shape != shape:
            raise ShapeMismatch(
                f"{row.path}: feature shape {m.shape} != {shape} of the first row")
    features = np.stack(maps)[:, None, :, :]
    labels = np.asarray([r.label for r in rows], dtype=np.int64)
    return FeatureDataset(features, labels,
                          tuple(r.path for r in rows),
                          tuple(r.split or "" for r in rows))


# --- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moments per trainable parameter plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def init_adam_state(params) -> AdamState:
    m = {n: np.zeros_like(p.values) for n, p in params.items() if p.requires_grad}
    v = {n: np.zeros_like(p.values) for n, p in params.items() if p.requires_grad}
    return AdamState(m=m, v=v)


def adam_step(params, grads: dict[str, np.ndarray], state: AdamState, lr_t: float,
              weight_decay: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One Adam update with decoupled decay, in place:
    theta <- theta*(1 - lr_t*wd) - lr_t * m_hat / (sqrt(v_hat) + eps)."""
    if lr_t <= 0:
        raise ValueError(f"lr_t must be positive, got {lr_t}")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, g in grads.items():
        theta = params[name].values
        if g is None or g.shape != theta.shape:
            got = None if g is None else g.shape
            raise ShapeMismatch(f"{name}: gradient shape {got} != {theta.shape}")
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        step = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay:
            theta *= 1.0 - lr_t * weight_decay
        theta -= lr_t * step


def zero_grads(params) -> None:
    for p in params.values():
        p.grad = None


def cosine_lr(t: int, t_max: int, lr0: float, eta_min: float = 0.0) -> float:
    """Half-cosine decay from lr0 (t=0) to eta_min (t=t_max), stepped per epoch."""
    if not 0 <= t <= t_max:
        raise ValueError(f"epoch index {t} outside [0, {t_max}]")
    return eta_min + 0.5 * (lr0 - eta_min) * (1.0 + math.cos(math.pi * t / t_max))


# --- training loop ------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainResult:
    params: dict                 # best-validation-accuracy parameters
    final_params: dict           # parameters at the last epoch run
    log: list[EpochRecord]
    best_epoch: int
    best_val_acc: float
    early_stopped: bool


def _batch_bounds(n: int, batch_size: int) -> list[tuple[int, int]]:
    """Consecutive [start, stop) pairs; a trailing singleton is folded into
    the previous batch because training-mode batch norm needs >= 2 items."""
    bounds = [(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]
    if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] == 1:
        last = bounds.pop()
        prev = bounds.pop()
        bounds.append((prev[0], last[1]))
    return bounds


def evaluate_split(params, config: ArchConfig, features: np.ndarray,
                   labels: np.ndarray, batch_size: int) -> tuple[float, float]:
    """Eval-mode mean cross-entropy and accuracy over one split."""
    n = features.shape[0]
    if n == 0:
        raise EmptySplit("cannot evaluate an empty split")
    total_loss, correct = 0.0, 0
    with ad.no_grad():
        for start in range(0, n, batch_size):
            bx = features[start:start + batch_size]
            by = labels[start:start + batch_size]
            logits = forward(bx, params, config, training=False)
            loss = float(ad.cross_entropy(logits, by).values)
            total_loss += loss * bx.shape[0]
            correct += int((logits.values.argmax(axis=1) == by).sum())
    return total_loss / n, correct / n


def train(dataset: FeatureDataset, arch_config: ArchConfig,
          train_config: TrainConfig, augment=None) -> TrainResult:
    """Run the full protocol and return the best parameters plus the log.

    Per epoch: seeded shuffle, mini-batch forward/backward/Adam updates,
    then an eval-mode pass over train and val splits. The logged train loss
    is the mean optimized (training-mode) batch loss; train accuracy is
    measured at epoch end in eval mode, the same protocol as validation.
    Early stopping: no strict val-accuracy improvement for ``patience``
    consecutive epochs. The retained best is the earliest epoch achieving
    the top accuracy.

    ``augment(x, y, rng) -> (x, y)`` runs on each raw batch before the
    forward pass; the default None applies no transform (the protocol has a
    slot for augmentation but defines none).
    """
    cfg = train_config
    train_idx = dataset.indices("train")
    val_idx = dataset.indices("val")
    if train_idx.size == 0:
        raise EmptySplit("train split is empty")
    if val_idx.size == 0:
        raise EmptySplit("val split is empty")
    x_train, y_train = dataset.features[train_idx], dataset.labels[train_idx]
    x_val, y_val = dataset.features[val_idx], dataset.labels[val_idx]

    params = init_params(arch_config, cfg.seed)
    state = init_adam_state(params)
    best_params, best_epoch, best_val_acc = None, 0, -1.0
    since_improve = 0
    early_stopped = False
    log: list[EpochRecord] = []

    for epoch in range(1, cfg.max_epochs + 1):
        lr_t = cosine_lr(epoch - 1, cfg.max_epochs, cfg.lr0, cfg.eta_min)
        perm = derived_rng(cfg.seed, STREAM_SHUFFLE, epoch).permutation(train_idx.size)
        running_loss = 0.0
        for b, (start, stop) in enumerate(_batch_bounds(train_idx.size, cfg.batch_size)):
            take = perm[start:stop]
            bx, by = x_train[take], y_train[take]
            if augment is not None:
                bx, by = augment(bx, by, derived_rng(cfg.seed, STREAM_AUGMENT, epoch, b))
            streams = DropoutStreams(cfg.seed, STREAM_DROPOUT, epoch, b)
            logits = forward(bx, params, arch_config, training=True,
                             dropout_streams=streams)
            loss = ad.cross_entropy(logits, by)
            loss_value = float(loss.values)
            if not math.isfinite(loss_value):
                raise NonFiniteLoss(
                    f"epoch {epoch} batch {b}: training loss is {loss_value}")
            backward(loss)
            grads = {n: p.grad for n, p in params.items() if p.requires_grad}
            adam_step(params, grads, state, lr_t, cfg.weight_decay,
                      cfg.beta1, cfg.beta2, cfg.eps)
            zero_grads(params)
            running_loss += loss_value * bx.shape[0]

        train_loss = running_loss / train_idx.size
        _, train_acc = evaluate_split(params, arch_config, x_train, y_train,
                                      cfg.batch_size)
        val_loss, val_acc = evaluate_split(params, arch_config, x_val, y_val,
                                           cfg.batch_size)
        if not (math.isfinite(val_loss) and math.isfinite(train_acc)):
            raise NonFiniteLoss(f"epoch {epoch}: non-finite validation loss")
        log.append(EpochRecord(epoch, lr_t, train_loss, train_acc, val_loss, val_acc))

        if val_acc > best_val_acc:
            best_params = clone_params(params)
            best_epoch, best_val_acc = epoch, val_acc
            since_improve = 0
        else:
            since_improve += 1
            if since_improve >= cfg.early_stop_patience:
                early_stopped = True
                break

    return TrainResult(params=best_params, final_params=params, log=log,
                       best_epoch=best_epoch, best_val_acc=best_val_acc,
                       early_stopped=early_stopped)


def write_train_log(log, path) -> None:
    """CSV log; floats use shortest round-trip repr so identical runs
    produce identical bytes."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAIN_LOG_HEADER)
        for r in log:
            writer.writerow((str(r.epoch), repr(float(r.lr)),
                             repr(float(r.train_loss)), repr(float(r.train_acc)),
                             repr(float(r.val_loss)), repr(float(r.val_acc))))
