"""Training objectives for the multi-task parser and its self-distillation."""

from __future__ import annotations

from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .config import LossWeights


class SoftTargets(NamedTuple):
    """Teacher probabilities: parse (B,C,H,W) softmax, binary (B,2,H,W) softmax,
    category (B,C,H,W) per-channel edge probability."""

    parse: torch.Tensor
    binary: Optional[torch.Tensor] = None
    category: Optional[torch.Tensor] = None


def ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Softmax cross-entropy; returns (mean, per-pixel raster of shape B x H x W)."""
    num_classes = logits.shape[1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise ValueError(f"labels outside [0, {num_classes})")
    per_pixel = F.cross_entropy(logits, labels.long(), reduction="none")
    return per_pixel.mean(), per_pixel


def _edge_margin(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    # 2-class logits (B,2,H,W) with (B,H,W) target, or per-channel logits with a
    # same-shaped target read as the 2-class pair [0, z]
    if logits.shape == target.shape:
        return logits
    if logits.shape[1] == 2 and logits.shape[0:1] + logits.shape[2:] == target.shape:
        return logits[:, 1] - logits[:, 0]
    raise ValueError(f"edge logits {tuple(logits.shape)} do not match target {tuple(target.shape)}")


def edge_pos_weight(target: torch.Tensor) -> float:
    """Negative/positive pixel ratio clamped to [1, 100]; 1 when no positives."""
    pos = float(target.sum())
    if pos == 0:
        return 1.0
    neg = target.numel() - pos
    return min(max(neg / pos, 1.0), 100.0)


def weighted_ce_edge(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Class-balanced edge cross-entropy; edge pixels weighted by neg/pos ratio."""
    margin = _edge_margin(logits, target)
    t = target.to(margin.dtype)
    # CE of the 2-class softmax: softplus(-m) on edges, softplus(m) elsewhere
    per = t * F.softplus(-margin) + (1 - t) * F.softplus(margin)
    w = 1 + (edge_pos_weight(target) - 1) * t
    return (w * per).sum() / per.numel()


def lovasz_grad(fg_sorted: torch.Tensor) -> torch.Tensor:
    """Jaccard-loss increments along a sorted error order (one row per class)."""
    gts = fg_sorted.sum(-1, keepdim=True)
    intersection = gts - fg_sorted.cumsum(-1)
    union = gts + (1 - fg_sorted).cumsum(-1)
    jaccard = 1 - intersection / union
    jaccard[..., 1:] = jaccard[..., 1:] - jaccard[..., :-1].clone()
    return jaccard


def lovasz_softmax(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Lovasz-softmax over all pixels of the batch, averaged over present classes."""
    num_classes = probs.shape[1]
    flat = probs.transpose(0, 1).reshape(num_classes, -1)  # classes x pixels
    lab = labels.reshape(-1).long()
    if lab.numel() == 0:
        return probs.sum() * 0
    fg = lab[None] == torch.arange(num_classes, device=lab.device)[:, None]
    present = fg.any(1)
    fg, flat = fg[present], flat[present]
    errors = torch.where(fg, 1 - flat, flat)
    with torch.no_grad():
        # the sort order carries no gradient, so the Jaccard increments are
        # scattered back to pixel order and the loss is a plain dot product
        perm = torch.from_numpy(np.argsort(-errors.cpu().numpy(), axis=1)).to(errors.device)
        grad = lovasz_grad(torch.gather(fg, 1, perm).to(errors.dtype))
        weights = torch.empty_like(grad).scatter_(1, perm, grad)
    return (errors * weights).sum(1).mean()


def edge_attention_binary(per_pixel_ce: torch.Tensor, binary: torch.Tensor) -> torch.Tensor:
    """Mean over images with edges of the edge-pixel-averaged parsing CE."""
    b = binary.reshape(binary.shape[0], -1).sum(1)
    keep = b > 0
    if not bool(keep.any()):
        return per_pixel_ce.sum() * 0
    masked = (per_pixel_ce * binary.to(per_pixel_ce.dtype)).reshape(b.shape[0], -1).sum(1)
    return (masked[keep] / b[keep].to(masked.dtype)).mean()


def edge_attention_category(per_pixel_ce: torch.Tensor, per_class: torch.Tensor,
                            class_weights) -> torch.Tensor:
    """Class-weighted, per-class edge-averaged parsing CE, divided by N*C.

    Classes without edge pixels in an image are skipped; N counts images
    with at least one category edge pixel, C is the total number of classes.
    """
    n, num_classes = per_class.shape[:2]
    w = torch.as_tensor(class_weights, dtype=per_pixel_ce.dtype, device=per_pixel_ce.device)
    mask = per_class.to(per_pixel_ce.dtype)
    counts = mask.reshape(n, num_classes, -1).sum(2)
    masked = (per_pixel_ce[:, None] * mask).reshape(n, num_classes, -1).sum(2)
    has = counts > 0
    images = int(has.any(1).sum())
    if images == 0:
        return per_pixel_ce.sum() * 0
    terms = torch.where(has, masked / counts.clamp(min=1), torch.zeros_like(masked))
    return (terms * w).sum() / (images * num_classes)


def dml_loss(outputs, labels: torch.Tensor, edges: tuple[torch.Tensor, torch.Tensor] | None,
             weights: LossWeights) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of parsing, edge and edge-attention terms.

    ``outputs`` carries ``parsing`` and optionally ``binary_edge`` /
    ``category_edge`` logits; ``edges`` is (binary B x H x W, per-class
    B x C x H x W). Terms whose weight is zero are not evaluated. With
    ``lambda3 = lambda4 = 0`` this is the plain multi-task loss.
    """
    terms: dict[str, torch.Tensor] = {}
    total = outputs.parsing.sum() * 0
    ce, per_pixel = ce_loss(outputs.parsing, labels)
    if weights.lambda0:
        lov = lovasz_softmax(F.softmax(outputs.parsing, dim=1), labels)
        terms["parse_ce"], terms["parse_lovasz"] = ce, lov
        total = total + weights.lambda0 * (ce + lov)
    if edges is not None:
        binary, per_class = edges
        if weights.lambda1 and outputs.binary_edge is not None:
            terms["binary_ce"] = weighted_ce_edge(outputs.binary_edge, binary)
            total = total + weights.lambda1 * terms["binary_ce"]
        if weights.lambda3:
            terms["binary_attn"] = edge_attention_binary(per_pixel, binary)
            total = total + weights.lambda3 * terms["binary_attn"]
        if weights.lambda2 and outputs.category_edge is not None:
            terms["category_ce"] = weighted_ce_edge(outputs.category_edge, per_class)
            total = total + weights.lambda2 * terms["category_ce"]
        if weights.lambda4:
            terms["category_attn"] = edge_attention_category(per_pixel, per_class, weights.class_weights)
            total = total + weights.lambda4 * terms["category_attn"]
    return total, {k: float(v.detach()) for k, v in terms.items()}


def kl_softmax(teacher: torch.Tensor, student_logits: torch.Tensor) -> torch.Tensor:
    """KL(teacher || softmax(student)) over dim 1, mean over remaining positions."""
    log_q = F.log_softmax(student_logits, dim=1)
    kl = torch.xlogy(teacher, teacher) - teacher * log_q
    return kl.sum(1).mean()


def kl_bernoulli(teacher: torch.Tensor, student_logits: torch.Tensor) -> torch.Tensor:
    """Per-channel edge KL (2-class pair [0, z]), summed over channels, mean per pixel."""
    t = teacher
    kl = (torch.xlogy(t, t) + torch.xlogy(1 - t, 1 - t)
          + t * F.softplus(-student_logits) + (1 - t) * F.softplus(student_logits))
    return kl.sum(1).mean()


def csr_loss(student, teacher: SoftTargets, weights: LossWeights) -> tuple[torch.Tensor, dict[str, float]]:
    """Self-distillation loss against the aggregated model's soft outputs."""
    terms: dict[str, torch.Tensor] = {}
    total = student.parsing.sum() * 0
    if weights.alpha0:
        terms["kl_parse"] = kl_softmax(teacher.parse, student.parsing)
        terms["kl_lovasz"] = lovasz_softmax(F.softmax(student.parsing, dim=1), teacher.parse.argmax(1))
        total = total + weights.alpha0 * (terms["kl_parse"] + terms["kl_lovasz"])
    if weights.alpha1 and student.binary_edge is not None and teacher.binary is not None:
        terms["kl_binary"] = kl_softmax(teacher.binary, student.binary_edge)
        total = total + weights.alpha1 * terms["kl_binary"]
    if weights.alpha2 and student.category_edge is not None and teacher.category is not None:
        terms["kl_category"] = kl_bernoulli(teacher.category, student.category_edge)
        total = total + weights.alpha2 * terms["kl_category"]
    return total, {k: float(v.detach()) for k, v in terms.items()}
