"""Slow, independent reference implementations used to check the fast paths."""

import itertools
import math

import numpy as np


def binary_edges_loop(labels):
    grid = np.asarray(labels).tolist()
    h, w = len(grid), len(grid[0])
    out = [[0] * w for _ in range(h)]
    for y in range(h):
        for x in range(w):
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w and grid[yy][xx] != grid[y][x]:
                    out[y][x] = 1
                    break
    return np.array(out, dtype=np.uint8).reshape(h, w)


def category_edges_loop(labels, num_classes):
    grid = np.asarray(labels).tolist()
    h, w = len(grid), len(grid[0])
    out = [[[0] * w for _ in range(h)] for _ in range(num_classes)]
    for j in range(num_classes):
        for y in range(h):
            for x in range(w):
                if grid[y][x] != j:
                    continue
                for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w and grid[yy][xx] != j:
                        out[j][y][x] = 1
                        break
    return np.array(out, dtype=np.uint8).reshape(num_classes, h, w)


def band_pixels_loop(labels):
    """Pixels with a differing label within city-block distance 2."""
    h, w = labels.shape
    out = np.zeros((h, w), dtype=bool)
    for y in range(h):
        for x in range(w):
            for yy in range(max(0, y - 2), min(h, y + 3)):
                for xx in range(max(0, x - 2), min(w, x + 3)):
                    if abs(yy - y) + abs(xx - x) <= 2 and labels[yy, xx] != labels[y, x]:
                        out[y, x] = True
    return out


def jaccard_set_loss(mistakes, fg):
    """Jaccard loss of predicting the error set ``mistakes`` for ground truth ``fg``."""
    inter = sum(1 for i, g in enumerate(fg) if g and i not in mistakes)
    union = sum(fg) + sum(1 for i in mistakes if not fg[i])
    return 1.0 - inter / union if union else 0.0


def lovasz_extension_subsets(errors, fg):
    """Lovasz extension as the integral over thresholds of the set function,
    using a table of the Jaccard loss on all 2^p subsets."""
    p = len(errors)
    table = {}
    for r in range(p + 1):
        for subset in itertools.combinations(range(p), r):
            table[frozenset(subset)] = jaccard_set_loss(set(subset), fg)
    levels = sorted(set(errors) | {0.0})
    total = 0.0
    for lo, hi in zip(levels[:-1], levels[1:]):
        superlevel = frozenset(i for i in range(p) if errors[i] >= hi)
        total += (hi - lo) * table[superlevel]
    return total


def lovasz_extension_permutations(errors, fg):
    """Lovasz extension of a submodular function as a max over the base
    polytope's vertices (one per ordering of the ground set)."""
    p = len(errors)
    best = -math.inf
    for order in itertools.permutations(range(p)):
        value, prev, chosen = 0.0, 0.0, set()
        for i in order:
            chosen.add(i)
            cur = jaccard_set_loss(chosen, fg)
            value += errors[i] * (cur - prev)
            prev = cur
        best = max(best, value)
    return best


def lovasz_softmax_brute(probs, labels, extension=lovasz_extension_subsets):
    """probs: (C, P) rows of class probabilities per pixel column; labels: (P,)."""
    losses = []
    for c in range(probs.shape[0]):
        fg = [int(v == c) for v in labels]
        if not any(fg):
            continue
        errors = [abs(f - float(p)) for f, p in zip(fg, probs[c])]
        losses.append(extension(errors, fg))
    return sum(losses) / len(losses)


def ce_loop(logits, labels):
    """Per-pixel softmax cross-entropy with an explicit log-sum-exp."""
    b, c, h, w = logits.shape
    out = np.zeros((b, h, w))
    for i in range(b):
        for y in range(h):
            for x in range(w):
                z = [float(logits[i, k, y, x]) for k in range(c)]
                m = max(z)
                lse = m + math.log(sum(math.exp(v - m) for v in z))
                out[i, y, x] = lse - z[int(labels[i, y, x])]
    return out


def weighted_edge_ce_loop(margins, target):
    """margins: logit(edge) - logit(non-edge), any shape; target: same shape 0/1."""
    m = np.asarray(margins, dtype=np.float64).ravel()
    t = np.asarray(target).ravel()
    pos = int(t.sum())
    neg = t.size - pos
    weight = 1.0 if pos == 0 else min(max(neg / pos, 1.0), 100.0)
    total = 0.0
    for mi, ti in zip(m, t):
        if ti:
            total += weight * math.log1p(math.exp(-mi))
        else:
            total += math.log1p(math.exp(mi))
    return total / t.size


def attention_binary_loop(ce, binary):
    n = ce.shape[0]
    total, counted = 0.0, 0
    for i in range(n):
        b = 0
        s = 0.0
        for y in range(ce.shape[1]):
            for x in range(ce.shape[2]):
                if binary[i, y, x]:
                    b += 1
                    s += float(ce[i, y, x])
        if b:
            total += s / b
            counted += 1
    return total / counted if counted else 0.0


def attention_category_loop(ce, per_class, weights):
    n, c = per_class.shape[:2]
    total, counted = 0.0, 0
    for i in range(n):
        any_edge = False
        for j in range(c):
            cnt = 0
            s = 0.0
            for y in range(ce.shape[1]):
                for x in range(ce.shape[2]):
                    if per_class[i, j, y, x]:
                        cnt += 1
                        s += float(ce[i, y, x])
            if cnt:
                any_edge = True
                total += weights[j] * s / cnt
        counted += any_edge
    return total / (counted * c) if counted else 0.0


def central_difference(f, x, h=1e-3):
    """Numerical gradient of scalar ``f`` at float64 tensor ``x``."""
    import torch

    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = float(flat[i])
            flat[i] = old + h
            fp = float(f(x))
            flat[i] = old - h
            fm = float(f(x))
            flat[i] = old
            g[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric):
    import torch

    scale = max(float(numeric.abs().max()), float(analytic.abs().max()), 1e-12)
    return float((analytic - numeric).abs().max()) / scale
