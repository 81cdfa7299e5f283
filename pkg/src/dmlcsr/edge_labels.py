"""Binary and category-aware edge pseudo-labels from a pixel-wise label map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import check_label_map


@dataclass
class EdgeLabels:
    binary: np.ndarray  # uint8 H x W
    per_class: np.ndarray  # uint8 C x H x W, channels disjoint
    binary_count: int
    per_class_counts: np.ndarray  # int64 (C,)


def _differs_within(labels: np.ndarray, radius: int) -> np.ndarray:
    """True where some in-bounds pixel within city-block ``radius`` has another label."""
    lab = labels
    out = np.zeros(lab.shape, dtype=bool)
    h, w = lab.shape
    for dy in range(-radius, radius + 1):
        r = radius - abs(dy)
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            # compare lab[y, x] with lab[y + dy, x + dx] on the overlapping window
            ys, yt = slice(max(0, -dy), min(h, h - dy)), slice(max(0, dy), min(h, h + dy))
            xs, xt = slice(max(0, -dx), min(w, w - dx)), slice(max(0, dx), min(w, w + dx))
            out[ys, xs] |= lab[ys, xs] != lab[yt, xt]
    return out


def binary_edges(labels: np.ndarray, thickness: int = 1) -> np.ndarray:
    """1 where a 4-neighbour (in bounds) carries a different label."""
    labels = check_label_map(labels)
    return _differs_within(labels, thickness).astype(np.uint8)


def category_edges(labels: np.ndarray, num_classes: int, thickness: int = 1) -> np.ndarray:
    """Per-class inner boundary: channel j marks class-j pixels touching another class."""
    labels = check_label_map(labels, num_classes)
    edge = _differs_within(labels, thickness)
    classes = np.arange(num_classes)[:, None, None]
    return ((labels[None] == classes) & edge[None]).astype(np.uint8)


def make_edge_labels(labels: np.ndarray, num_classes: int, thickness: int = 1) -> EdgeLabels:
    per_class = category_edges(labels, num_classes, thickness)
    binary = per_class.max(axis=0) if num_classes else np.zeros(labels.shape, np.uint8)
    counts = per_class.reshape(num_classes, -1).sum(axis=1).astype(np.int64)
    return EdgeLabels(
        binary=binary,
        per_class=per_class,
        binary_count=int(binary.sum()),
        per_class_counts=counts,
    )


def batch_edges(labels: np.ndarray, num_classes: int, thickness: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Edge targets for a stack of label maps: (n, H, W) binary and (n, C, H, W) per class."""
    per_class = np.stack([category_edges(lab, num_classes, thickness) for lab in labels])
    return per_class.max(axis=1), per_class
