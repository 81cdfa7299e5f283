"""Cyclical self-regulation: multi-task training, weight self-ensembling,
batch-norm re-estimation and self-distillation against the ensembled model."""

from __future__ import annotations

import copy
import json
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import CLASS_NAMES, HELEN_GROUPS, RunConfig
from .data import augment_params, warp
from .edge_labels import batch_edges
from .losses import SoftTargets, csr_loss, dml_loss
from .metrics import confusion_matrix, mean_f1, summarize
from .model import DMLNet, load_into, save_checkpoint

logger = logging.getLogger(__name__)

_STAT_SUFFIXES = ("running_mean", "running_var", "num_batches_tracked")


class TrainingDiverged(RuntimeError):
    pass


class WeightRecord(Mapping):
    """Immutable ordered snapshot of named arrays (parameters and BN statistics)."""

    def __init__(self, arrays):
        self._arrays: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, arr in OrderedDict(arrays).items():
            arr = np.array(arr, copy=True)
            arr.setflags(write=False)
            self._arrays[name] = arr

    @classmethod
    def from_module(cls, module: nn.Module) -> "WeightRecord":
        return cls((k, v.detach().cpu().numpy()) for k, v in module.state_dict().items())

    @staticmethod
    def is_statistic(name: str) -> bool:
        return name.endswith(_STAT_SUFFIXES)

    def __getitem__(self, name):
        return self._arrays[name]

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def trainable(self) -> list[str]:
        return [k for k in self._arrays if not self.is_statistic(k)]

    def check_compatible(self, other: "WeightRecord") -> None:
        if list(self._arrays) != list(other._arrays):
            raise ValueError("weight records have different array names")
        for k, a in self._arrays.items():
            if a.shape != other[k].shape:
                raise ValueError(f"shape mismatch for {k}: {a.shape} vs {other[k].shape}")

    def load_into(self, model: nn.Module) -> nn.Module:
        load_into(model, self._arrays)
        return model

    def save(self, path, meta: dict | None = None) -> None:
        save_checkpoint(path, self._arrays, meta)


def self_ensemble(best: WeightRecord, models: Sequence[WeightRecord], k: int) -> WeightRecord:
    """M = k/(k+1) * M_best + 1/((k+1) N) * sum(M_n) on every trainable array.

    Evaluated as ``best + (mean(models) - best) / (k + 1)`` so a set of
    models identical to ``best`` reproduces it exactly. BN statistics are
    copied from ``best``; re-estimate them with :func:`recalibrate_bn`.
    """
    if k < 1:
        raise ValueError(f"cycle index k must be >= 1, got {k}")
    if not models:
        raise ValueError("self_ensemble needs at least one model")
    for m in models:
        best.check_compatible(m)
    n = len(models)
    out = OrderedDict()
    for name, b in best.items():
        if WeightRecord.is_statistic(name):
            out[name] = b
            continue
        first = models[0][name].astype(np.float64)
        mean = first.copy()
        for m in models[1:]:
            mean += (m[name] - first) / n
        merged = b.astype(np.float64) + (mean - b) / (k + 1)
        out[name] = merged.astype(b.dtype)
    return WeightRecord(out)


def _as_batches(images, batch_size: int) -> Iterable[torch.Tensor]:
    if isinstance(images, np.ndarray) or torch.is_tensor(images):
        for i in range(0, len(images), batch_size):
            yield torch.as_tensor(np.asarray(images[i:i + batch_size]))
    else:
        for batch in images:
            yield torch.as_tensor(batch)


def recalibrate_bn(weights: WeightRecord, model: nn.Module, images, batch_size: int = 50) -> WeightRecord:
    """Load ``weights`` and replace every BN running mean/variance by the
    cumulative average of batch statistics over ``images`` (one pass).

    ``images`` is an (n, 3, H, W) array or an iterable of image batches.
    """
    load_into(model, weights)
    norms = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    momenta = [m.momentum for m in norms]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None
    model.train()
    seen = 0
    with torch.no_grad():
        for batch in _as_batches(images, batch_size):
            model(batch.float())
            seen += len(batch)
    for m, mom in zip(norms, momenta):
        m.momentum = mom
    model.eval()
    if seen == 0:
        raise ValueError("cannot re-estimate batch-norm statistics on an empty dataset")
    fresh = WeightRecord.from_module(model)
    # trainable arrays are carried over untouched
    return WeightRecord((k, fresh[k] if WeightRecord.is_statistic(k) else weights[k]) for k in weights)


def distill_targets(teacher: DMLNet, images: torch.Tensor) -> SoftTargets:
    """Soft labels of a frozen teacher: softmax of each head."""
    was_training = teacher.training
    teacher.eval()
    with torch.no_grad():
        out = teacher(images, mode="train")
    teacher.train(was_training)
    return SoftTargets(
        parse=F.softmax(out.parsing, dim=1),
        binary=None if out.binary_edge is None else F.softmax(out.binary_edge, dim=1),
        category=None if out.category_edge is None else torch.sigmoid(out.category_edge),
    )


class TeacherCache:
    """Teacher soft labels for the un-augmented training set, computed once per
    cycle and warped alongside each augmented sample."""

    def __init__(self, teacher: DMLNet, images: np.ndarray, batch_size: int = 50):
        parts: list[SoftTargets] = []
        for batch in _as_batches(images, batch_size):
            t = distill_targets(teacher, batch.float())
            parts.append(SoftTargets(*(None if x is None else x.numpy() for x in t)))
        self.parse = np.concatenate([p.parse for p in parts])
        self.binary = None if parts[0].binary is None else np.concatenate([p.binary for p in parts])
        self.category = None if parts[0].category is None else np.concatenate([p.category for p in parts])

    def get(self, indices, params=None) -> SoftTargets:
        fields = []
        for arr, pad in ((self.parse, "first"), (self.binary, "first"), (self.category, "zero")):
            if arr is None:
                fields.append(None)
                continue
            cval = np.zeros(arr.shape[1])
            if pad == "first":
                cval[0] = 1.0  # background / non-edge outside the frame
            rows = []
            for j, i in enumerate(indices):
                if params is None:
                    rows.append(arr[i])
                else:
                    rows.append(warp(arr[i], *params[j], order=1, cval=cval))
            fields.append(torch.from_numpy(np.stack(rows).astype(np.float32)))
        return SoftTargets(*fields)


@dataclass
class TrainResult:
    best: WeightRecord
    best_metric: float
    history: list[dict] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)


def evaluate(model: DMLNet, images: np.ndarray, labels: np.ndarray, batch_size: int = 50) -> np.ndarray:
    """Confusion matrix of infer-mode predictions."""
    model.eval()
    n = model.config.num_classes
    cm = np.zeros((n, n), dtype=np.int64)
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = torch.from_numpy(np.asarray(images[i:i + batch_size], dtype=np.float32))
            pred = model(x, mode="infer").parsing.argmax(1).numpy()
            cm += confusion_matrix(pred, labels[i:i + batch_size], n)
    return cm


def _sample_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


def augmented_copy(images: np.ndarray, seed: int, tag: int) -> np.ndarray:
    """The training images under one fixed draw of the training augmentation.

    Batch statistics seen during training come from augmented (zero-padded)
    images, so re-estimated BN statistics must come from the same distribution.
    """
    out = np.empty_like(images)
    for i, img in enumerate(images):
        p = augment_params(_sample_seed(seed, tag, i))
        out[i] = np.clip(warp(img, *p, order=1, cval=0.0), 0.0, 1.0)
    return out


class _Trainer:
    def __init__(self, config: RunConfig, train_images, train_labels, val_images, val_labels,
                 log: Callable[[dict], None] | None):
        self.cfg = config
        self.x, self.y = train_images, train_labels
        self.vx, self.vy = val_images, val_labels
        self.log = log or (lambda record: None)
        torch.manual_seed(config.seed)
        self.model = DMLNet(copy.deepcopy(config.model))
        self.scratch = DMLNet(copy.deepcopy(config.model))  # for BN re-estimation and teachers
        sched = config.csr
        self.opt = torch.optim.SGD(self.model.parameters(), lr=sched.lr, momentum=sched.momentum,
                                   weight_decay=sched.weight_decay)
        self.rng = np.random.default_rng(config.seed)
        self.epoch = 0
        self.history: list[dict] = []

    def _batch(self, indices):
        cfg = self.cfg
        images, labels, params = [], [], []
        for i in indices:
            img, lab = self.x[i], self.y[i]
            if cfg.data.augment:
                p = augment_params(_sample_seed(cfg.seed, self.epoch, int(i)))
                img = np.clip(warp(img, *p, order=1, cval=0.0), 0.0, 1.0)
                lab = warp(lab, *p, order=0, cval=0)
                params.append(p)
            images.append(img)
            labels.append(lab)
        labels = np.stack(labels)
        binary, per_class = batch_edges(labels, cfg.model.num_classes, cfg.data.edge_thickness)
        return (torch.from_numpy(np.stack(images).astype(np.float32)),
                torch.from_numpy(labels.astype(np.int64)),
                (torch.from_numpy(binary), torch.from_numpy(per_class)),
                params if cfg.data.augment else None)

    def run_epoch(self, lr_at: Callable[[float], float], phase: str, cycle: int,
                  teacher: TeacherCache | None = None) -> None:
        cfg = self.cfg
        bs = cfg.csr.batch_size
        order = self.rng.permutation(len(self.x))
        batches = [order[i:i + bs] for i in range(0, len(order), bs)]
        batches = [b for b in batches if len(b) >= 2]  # batch norm needs two samples
        self.model.train()
        for step, idx in enumerate(batches):
            lr = lr_at(step / len(batches))
            for group in self.opt.param_groups:
                group["lr"] = lr
            images, labels, edges, params = self._batch(idx)
            out = self.model(images, mode="train")
            loss = out.parsing.sum() * 0
            terms: dict[str, float] = {}
            if teacher is None or cfg.csr.keep_gt_loss:
                loss, terms = dml_loss(out, labels, edges, cfg.loss)
            if teacher is not None:
                distill, dterms = csr_loss(out, teacher.get(idx, params), cfg.loss)
                loss = loss + distill
                terms.update(dterms)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {self.epoch} step {step} (lr={lr:g}): {terms}")
            self.opt.zero_grad()
            loss.backward()
            self.opt.step()
            self.log({"event": "step", "phase": phase, "epoch": self.epoch, "cycle": cycle, "step": step,
                      "lr": lr, "loss": float(loss.detach()), "terms": terms})
        self.epoch += 1

    def val_metric(self, model: DMLNet) -> tuple[float, np.ndarray]:
        cm = evaluate(model, self.vx, self.vy)
        return mean_f1(cm), cm


def run_training(config: RunConfig, train_images: np.ndarray, train_labels: np.ndarray,
                 val_images: np.ndarray, val_labels: np.ndarray,
                 log: Callable[[dict], None] | None = None, checkpoint_dir: str | Path | None = None,
                 ) -> TrainResult:
    """Base multi-task training followed by K self-regulation cycles.

    Returns the best record by validation mean F1. With ``csr.K == 0`` this
    is plain multi-task training with the best of the last ``select_last``
    epochs kept.
    """
    config.validate()
    if len(train_images) == 0:
        raise ValueError("empty training set")
    torch.set_num_threads(config.threads)
    sched = config.csr
    t = _Trainer(config, train_images, train_labels, val_images, val_labels, log)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    meta = {"model": vars(config.model)}

    # phase 1: polynomial decay over all initial epochs
    best, best_metric = None, -math.inf
    for e in range(sched.init_epochs):
        def poly(frac, e=e):
            progress = (e + frac) / sched.init_epochs
            return sched.lr * (1.0 - progress) ** sched.poly_power
        t.run_epoch(poly, "init", 0)
        metric, _ = t.val_metric(t.model)
        record = {"event": "epoch", "phase": "init", "epoch": t.epoch, "cycle": 0, "val_mean_f1": metric}
        if e >= sched.init_epochs - sched.select_last and metric > best_metric:
            best, best_metric = WeightRecord.from_module(t.model), metric
        record["best_mean_f1"] = best_metric if best is not None else None
        t.history.append(record)
        t.log(record)
    assert best is not None
    if ckpt_dir is not None:
        best.save(ckpt_dir / "ckpt_cycle0.bin", meta)

    # phase 2: self-ensemble + self-distillation cycles
    teacher_record = best
    for k in range(1, sched.K + 1):
        teacher = TeacherCache(teacher_record.load_into(t.scratch).eval(), train_images)
        snapshots = []
        for n in range(sched.N):
            def cosine(frac, n=n):
                progress = (n + frac) / sched.N
                return sched.min_lr + 0.5 * (sched.cycle_lr - sched.min_lr) * (1 + math.cos(math.pi * progress))
            t.run_epoch(cosine, "cycle", k, teacher)
            snapshots.append(WeightRecord.from_module(t.model))
        del teacher
        merged = self_ensemble(best, snapshots, k)
        stats_images = augmented_copy(train_images, config.seed, 1_000_000 + k) if config.data.augment else train_images
        merged = recalibrate_bn(merged, t.scratch, stats_images)
        metric, _ = t.val_metric(t.scratch)
        improved = metric > best_metric
        if improved:
            best, best_metric = merged, metric
        record = {"event": "cycle", "phase": "cycle", "epoch": t.epoch, "cycle": k,
                  "val_mean_f1": metric, "best_mean_f1": best_metric, "improved": improved}
        t.history.append(record)
        t.log(record)
        if ckpt_dir is not None:
            merged.save(ckpt_dir / f"ckpt_cycle{k}.bin", meta)
        teacher_record = merged

    if ckpt_dir is not None:
        best.save(ckpt_dir / "best.bin", meta)
    best.load_into(t.scratch)
    cm = evaluate(t.scratch, val_images, val_labels)
    metrics = summarize(cm, HELEN_GROUPS, CLASS_NAMES)
    metrics["confusion"] = cm.tolist()
    return TrainResult(best=best, best_metric=best_metric, history=t.history, metrics=metrics)


def jsonl_logger(path: str | Path) -> Callable[[dict], None]:
    fh = open(path, "a", encoding="utf-8")

    def write(record: dict) -> None:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()

    return write
