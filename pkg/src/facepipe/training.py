"""Mini-batch SGD training with per-epoch validation and checkpoints."""

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .dataset import augment, compute_mean, load_images, to_tensor_batch
from .model import backward, forward, predict_batch
from .modelfile import load_model, save_model

HISTORY_COLUMNS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, last_checkpoint):
        super().__init__(f"loss became non-finite in epoch {epoch}; "
                         f"last good checkpoint: {last_checkpoint or 'none'}")
        self.epoch = epoch
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    lr_decay: float = 0.1
    lr_milestones: tuple = (20, 27)
    seed: int = 0
    checkpoint_every: int = 10
    augment: bool = False
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        # lr = 0 is accepted as an explicit no-op run
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)

    def lr_at(self, epoch):
        """Learning rate for 0-based ``epoch``."""
        drops = sum(1 for m in self.lr_milestones if epoch >= m)
        return self.lr * self.lr_decay ** drops


@dataclass
class TrainResult:
    graph: object
    history: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    best_checkpoint: str = None


def label_indices(graph, labels):
    index = {name: i for i, name in enumerate(graph.labels)}
    missing = sorted({lab for lab in labels if lab not in index})
    if missing:
        raise ValueError(f"labels not in the model vocabulary: {', '.join(missing)}")
    return np.array([index[lab] for lab in labels], dtype=np.int64)


def _loss_and_acc(graph, x, y, batch_size=64):
    if len(y) == 0:
        return math.nan, math.nan
    total_loss, correct = 0.0, 0
    for s in range(0, len(y), batch_size):
        logits = forward(graph, x[s:s + batch_size])
        loss, probs, _ = nn.softmax_cross_entropy(logits.astype(np.float64), y[s:s + batch_size])
        total_loss += loss * len(probs)
        correct += int((probs.argmax(axis=1) == y[s:s + batch_size]).sum())
    return total_loss / len(y), correct / len(y)


def _fmt(v):
    return "" if isinstance(v, float) and math.isnan(v) else f"{v:.6f}"


def write_history(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"]] + [_fmt(r[c]) for c in HISTORY_COLUMNS[1:]])


def _save_checkpoint(graph, velocity, epoch, out_dir, name=None):
    stem = name or f"ckpt_epoch_{epoch:03d}"
    path = Path(out_dir) / f"{stem}.frcm"
    save_model(graph, path)
    arrays = {f"v{i}_{k}": t for i, ts in velocity.items() for k, t in enumerate(ts)}
    np.savez(Path(out_dir) / f"{stem}.state.npz", epoch=np.int64(epoch), **arrays)
    return str(path)


def _load_checkpoint(path):
    graph = load_model(path)
    state = np.load(str(path)[:-len(".frcm")] + ".state.npz")
    velocity = {}
    for key in state.files:
        if key.startswith("v"):
            i, k = (int(v) for v in key[1:].split("_"))
            velocity.setdefault(i, {})[k] = state[key]
    velocity = {i: [d[k] for k in sorted(d)] for i, d in velocity.items()}
    return graph, velocity, int(state["epoch"])


def train(graph, manifest, cfg=None, out_dir=None, resume_from=None, log=None):
    """Train ``graph`` in place on the manifest's train split.

    Shuffling and dropout masks derive from ``(seed, epoch, batch)`` so a run
    resumed from a checkpoint continues exactly as an uninterrupted one.
    """
    cfg = cfg or TrainConfig()
    start_epoch = 0
    velocity = {}
    if resume_from is not None:
        loaded, velocity, start_epoch = _load_checkpoint(resume_from)
        graph.params = loaded.params
        graph.input_mean = loaded.input_mean
        graph.version += 1
    train_imgs, train_labels = load_images(manifest, "train")
    if not train_imgs:
        raise ValueError("the manifest has no training images")
    y_train = label_indices(graph, train_labels)
    val_imgs, val_labels = load_images(manifest, "validation")
    y_val = label_indices(graph, val_labels)

    c, h, w = graph.input_shape
    if graph.input_mean is None:
        mean = compute_mean(train_imgs, (h, w))
        # float32-exact so a reloaded checkpoint preprocesses identically
        graph.input_mean = tuple(float(np.float32(v)) for v in mean[:c]) if len(mean) >= c \
            else tuple(float(np.float32(np.mean(mean))) for _ in range(c))
    x_train = to_tensor_batch(train_imgs, graph.input_shape, graph.input_mean)
    x_val = to_tensor_batch(val_imgs, graph.input_shape, graph.input_mean)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = TrainResult(graph)
    last_ckpt = str(resume_from) if resume_from else None
    best = -1.0
    n = len(y_train)
    for epoch in range(start_epoch, cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        if cfg.augment:
            x_epoch = to_tensor_batch(
                [augment(img, [cfg.seed, epoch, i]) for i, img in enumerate(train_imgs)],
                graph.input_shape, graph.input_mean)
        else:
            x_epoch = x_train
        loss_sum, correct = 0.0, 0
        for b, s in enumerate(range(0, n, cfg.batch_size)):
            idx = order[s:s + cfg.batch_size]
            rng = np.random.default_rng([cfg.seed, epoch, b, 1])
            logits, cache = forward(graph, x_epoch[idx], train=True, rng=rng, keep_cache=True)
            loss, probs, d_logits = nn.softmax_cross_entropy(logits, y_train[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch + 1, last_ckpt)
            grads = backward(graph, cache, d_logits)
            if cfg.weight_decay:
                for i, (dw, _) in grads.params.items():
                    dw += graph.dtype(cfg.weight_decay) * graph.params[i][0]
            if lr > 0:
                nn.sgd_update(graph.params, grads, lr, cfg.momentum, velocity)
                graph.version += 1
            loss_sum += loss * len(idx)
            correct += int((probs.argmax(axis=1) == y_train[idx]).sum())
        for ts in graph.params.values():
            if not all(np.isfinite(t).all() for t in ts):
                raise TrainingDiverged(epoch + 1, last_ckpt)
        val_loss, val_acc = _loss_and_acc(graph, x_val, y_val)
        row = {"epoch": epoch + 1, "train_loss": loss_sum / n, "train_acc": correct / n,
               "val_loss": val_loss, "val_acc": val_acc}
        result.history.append(row)
        if log is not None:
            log(row)
        if out is not None:
            write_history(out / "history.csv", result.history)
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                last_ckpt = _save_checkpoint(graph, velocity, epoch + 1, out)
                result.checkpoints.append(last_ckpt)
            score = val_acc if not math.isnan(val_acc) else row["train_acc"]
            if score > best:
                best = score
                result.best_checkpoint = _save_checkpoint(graph, velocity, epoch + 1, out, "best")
    if out is not None:
        save_model(graph, out / "model.frcm")
    return result


def config_dict(cfg):
    d = asdict(cfg)
    d["lr_milestones"] = list(cfg.lr_milestones)
    return d


def predict_labels(graph, x, batch_size=64):
    out = []
    for s in range(0, len(x), batch_size):
        out.append(predict_batch(graph, x[s:s + batch_size]).argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
