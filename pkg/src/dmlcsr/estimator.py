"""scikit-learn style wrappers around the trainer and the edge-label generator."""

from __future__ import annotations

import copy

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import HELEN_GROUPS, ModelConfig, RunConfig, apply_overrides, preset
from .csr import WeightRecord, run_training
from .edge_labels import batch_edges
from .metrics import confusion_matrix, mean_f1, summarize
from .model import DMLNet, is_edge_key, load_checkpoint, load_into
from .validation import check_images, check_label_maps


class FaceParser(ClassifierMixin, BaseEstimator):
    """Per-pixel face parser trained with edge-aware losses and self-regulation cycles.

    ``X`` is an image batch (see :func:`check_images`), ``y`` the matching
    (n, H, W) label maps. Any config key not exposed as a parameter can be
    set through ``overrides`` as ``"section.key=value"`` strings.
    """

    def __init__(self, preset="desk", context="ddgcn", use_edges=True, base_width=32,
                 init_epochs=30, cycles=5, cycle_epochs=3, lr=0.02, cycle_lr=0.01,
                 batch_size=16, seed=0, threads=1, overrides=()):
        self.preset = preset
        self.context = context
        self.use_edges = use_edges
        self.base_width = base_width
        self.init_epochs = init_epochs
        self.cycles = cycles
        self.cycle_epochs = cycle_epochs
        self.lr = lr
        self.cycle_lr = cycle_lr
        self.batch_size = batch_size
        self.seed = seed
        self.threads = threads
        self.overrides = overrides

    def make_config(self) -> RunConfig:
        cfg = preset(self.preset)
        cfg.model.context = self.context
        cfg.model.use_edges = bool(self.use_edges)
        cfg.model.base_width = int(self.base_width)
        cfg.csr.init_epochs = int(self.init_epochs)
        cfg.csr.K = int(self.cycles)
        cfg.csr.N = int(self.cycle_epochs)
        cfg.csr.lr = float(self.lr)
        cfg.csr.cycle_lr = float(self.cycle_lr)
        cfg.csr.batch_size = int(self.batch_size)
        cfg.seed = int(self.seed)
        cfg.threads = int(self.threads)
        apply_overrides(cfg, list(self.overrides))
        cfg.validate()
        return cfg

    def fit(self, X, y, eval_set=None, log=None, checkpoint_dir=None):
        """Train on (X, y); ``eval_set=(X_val, y_val)`` selects checkpoints
        (defaults to the training data)."""
        cfg = self.make_config()
        X = check_images(X)
        y = check_label_maps(y, cfg.model.num_classes, len(X), X.shape[2:])
        if eval_set is None:
            vx, vy = X, y
        else:
            vx = check_images(eval_set[0])
            vy = check_label_maps(eval_set[1], cfg.model.num_classes, len(vx), vx.shape[2:])
        result = run_training(cfg, X, y, vx, vy, log=log, checkpoint_dir=checkpoint_dir)
        self.config_ = cfg
        self.best_weights_ = result.best
        self.best_score_ = result.best_metric
        self.history_ = result.history
        self.metrics_ = result.metrics
        self._set_model(cfg.model, result.best)
        return self

    def _set_model(self, model_config: ModelConfig, weights) -> None:
        self.classes_ = np.arange(model_config.num_classes)
        lean = copy.deepcopy(model_config)
        lean.use_edges = False  # the edge heads are not needed for prediction
        self.model_ = DMLNet(lean)
        load_into(self.model_, {k: v for k, v in weights.items() if not is_edge_key(k)})
        self.model_.eval()

    @classmethod
    def from_checkpoint(cls, path) -> "FaceParser":
        """Parser restored from a checkpoint written by training (parsing path only)."""
        arrays, meta = load_checkpoint(path)
        model_config = ModelConfig(**meta.get("model", {}))
        est = cls(context=model_config.context, use_edges=model_config.use_edges,
                  base_width=model_config.base_width)
        est._set_model(model_config, WeightRecord(arrays))
        return est

    def predict_proba(self, X, batch_size: int = 50) -> np.ndarray:
        """Class probabilities, shape (n, C, H, W)."""
        check_is_fitted(self, "model_")
        X = check_images(X)
        out = []
        with torch.no_grad():
            for i in range(0, len(X), batch_size):
                logits = self.model_(torch.from_numpy(X[i:i + batch_size]), mode="infer").parsing
                out.append(torch.softmax(logits, dim=1).numpy())
        return np.concatenate(out)

    def predict(self, X, batch_size: int = 50) -> np.ndarray:
        """Label maps, shape (n, H, W), dtype uint8."""
        check_is_fitted(self, "model_")
        X = check_images(X)
        preds = []
        with torch.no_grad():
            for i in range(0, len(X), batch_size):
                logits = self.model_(torch.from_numpy(X[i:i + batch_size]), mode="infer").parsing
                preds.append(logits.argmax(1).numpy().astype(np.uint8))
        return np.concatenate(preds)

    def score(self, X, y, sample_weight=None) -> float:
        """Mean F1 over foreground classes."""
        if sample_weight is not None:
            raise ValueError("sample_weight is not supported")
        pred = self.predict(X)
        y = check_label_maps(y, len(self.classes_), len(pred), pred.shape[1:])
        return mean_f1(confusion_matrix(pred, y, len(self.classes_)))

    def report(self, X, y, groups=HELEN_GROUPS) -> dict:
        pred = self.predict(X)
        y = check_label_maps(y, len(self.classes_), len(pred), pred.shape[1:])
        return summarize(confusion_matrix(pred, y, len(self.classes_)), groups)


class EdgeLabeler(TransformerMixin, BaseEstimator):
    """Label maps (n, H, W) -> stacked edge maps (n, 1 + C, H, W): the binary
    edge map followed by one channel per class."""

    def __init__(self, num_classes=11, thickness=1):
        self.num_classes = num_classes
        self.thickness = thickness

    def fit(self, y, _=None):
        if self.thickness < 1:
            raise ValueError("thickness must be >= 1")
        check_label_maps(y, self.num_classes)
        self.n_classes_ = self.num_classes
        return self

    def transform(self, y) -> np.ndarray:
        check_is_fitted(self, "n_classes_")
        y = check_label_maps(y, self.num_classes)
        binary, per_class = batch_edges(y, self.num_classes, self.thickness)
        return np.concatenate([binary[:, None], per_class], axis=1)
