"""Decoupled multi-task parsing network and its checkpoint format."""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping, NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig


class FeaturePyramid(NamedTuple):
    c1: torch.Tensor
    c2: torch.Tensor
    c3: torch.Tensor
    c4: torch.Tensor
    c5: torch.Tensor


class NetworkOutputs(NamedTuple):
    parsing: torch.Tensor
    binary_edge: Optional[torch.Tensor] = None
    category_edge: Optional[torch.Tensor] = None


def conv_bn_relu(cin, cout, kernel=3, stride=1, dilation=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride, padding=dilation * (kernel // 2), dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def _upsample(x, size):
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1, dilation=1):
        super().__init__()
        self.conv1 = conv_bn_relu(cin, cout, 3, stride, dilation)
        self.conv2 = nn.Sequential(
            nn.Conv2d(cout, cout, 3, 1, padding=dilation, dilation=dilation, bias=False),
            nn.BatchNorm2d(cout),
        )
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        return F.relu(self.conv2(self.conv1(x)) + self.shortcut(x))


class Encoder(nn.Module):
    """Residual encoder: C1 at 1/2, C2 1/4, C3 1/8, C4 1/16, C5 1/16 (dilated)."""

    def __init__(self, width: int = 32):
        super().__init__()
        self.widths = (width // 2, width, 2 * width, 4 * width, 4 * width)
        w1, w2, w3, w4, w5 = self.widths
        self.stem = conv_bn_relu(3, w1, 3, stride=2)
        self.layer2 = BasicBlock(w1, w2, stride=2)
        self.layer3 = BasicBlock(w2, w3, stride=2)
        self.layer4 = BasicBlock(w3, w4, stride=2)
        self.layer5 = BasicBlock(w4, w5, stride=1, dilation=2)

    def forward(self, image) -> FeaturePyramid:
        if image.shape[-1] % 16 or image.shape[-2] % 16:
            raise ValueError(f"input size {tuple(image.shape[-2:])} is not divisible by 16")
        c1 = self.stem(image)
        c2 = self.layer2(c1)
        c3 = self.layer3(c2)
        c4 = self.layer4(c3)
        c5 = self.layer5(c4)
        return FeaturePyramid(c1, c2, c3, c4, c5)


class DDGCN(nn.Module):
    """Dual graph-convolution context embedding without pooling.

    Spatial branch: every position of X is a node; the adjacency is a softmax
    affinity between two 1-D convolutional embeddings of the nodes, followed by
    one graph convolution. Feature branch: projected channels are the nodes;
    a data-dependent channel affinity aggregates them and a 1-D convolution
    along the node axis supplies the learned adjacency. Output is
    ``[X ; lam * H_S ; gamma * H_F]`` at the spatial size of X.
    """

    def __init__(self, in_channels: int, node_dim: int = 64, feature_nodes: int = 64):
        super().__init__()
        key_dim = max(node_dim // 2, 1)
        self.out_channels = in_channels + node_dim + feature_nodes
        # spatial graph
        self.s_proj = conv_bn_relu(in_channels, node_dim, 1)
        self.s_query = nn.Conv1d(node_dim, key_dim, 1)
        self.s_key = nn.Conv1d(node_dim, key_dim, 1)
        self.s_gcn = nn.Sequential(nn.Conv1d(node_dim, node_dim, 1, bias=False),
                                   nn.BatchNorm1d(node_dim), nn.ReLU(inplace=True))
        self.s_out = nn.Sequential(nn.Conv2d(node_dim, node_dim, 1, bias=False), nn.BatchNorm2d(node_dim))
        # feature graph
        self.f_proj = conv_bn_relu(in_channels, feature_nodes, 1)
        self.f_adj = nn.Sequential(nn.Conv1d(feature_nodes, feature_nodes, 1, bias=False),
                                   nn.BatchNorm1d(feature_nodes), nn.ReLU(inplace=True))
        self.f_out = nn.Sequential(nn.Conv2d(feature_nodes, feature_nodes, 1, bias=False),
                                   nn.BatchNorm2d(feature_nodes))
        self.lam = nn.Parameter(torch.zeros(1))
        self.gamma = nn.Parameter(torch.zeros(1))
        self._key_scale = float(key_dim) ** -0.5

    def spatial_branch(self, x):
        v = self.s_proj(x).flatten(2)  # B x d x n
        q = self.s_query(v)
        k = self.s_key(v)
        adj = torch.softmax(torch.bmm(q.transpose(1, 2), k) * self._key_scale, dim=-1)  # B x n x n
        h = self.s_gcn(torch.bmm(v, adj.transpose(1, 2)))
        h = h.reshape(x.shape[0], h.shape[1], x.shape[2], x.shape[3])
        return self.s_out(h)

    def feature_branch(self, x):
        v = self.f_proj(x).flatten(2)  # B x m x n, channels as nodes
        n = x.shape[2] * x.shape[3]
        adj = torch.softmax(torch.bmm(v, v.transpose(1, 2)) / n ** 0.5, dim=-1)  # B x m x m
        h = self.f_adj(torch.bmm(adj, v))
        h = h.reshape(x.shape[0], h.shape[1], x.shape[2], x.shape[3])
        return self.f_out(h)

    def forward(self, x):
        return torch.cat([x, self.lam * self.spatial_branch(x), self.gamma * self.feature_branch(x)], dim=1)


class ConvContext(nn.Module):
    """Baseline context unit: one 3x3 convolution with normalization."""

    def __init__(self, in_channels: int, width: int = 256):
        super().__init__()
        self.out_channels = width
        self.block = conv_bn_relu(in_channels, width, 3)

    def forward(self, x):
        return self.block(x)


class ParsingHead(nn.Module):
    def __init__(self, context_channels, c2_channels, width, num_classes):
        super().__init__()
        self.reduce = conv_bn_relu(context_channels, width, 1)
        self.fuse = nn.Sequential(conv_bn_relu(width + c2_channels, width, 3), conv_bn_relu(width, width, 3))
        self.classifier = nn.Conv2d(width, num_classes, 1)

    def forward(self, context, c2, size):
        y = _upsample(self.reduce(context), c2.shape[2:])
        y = self.fuse(torch.cat([y, c2], dim=1))
        return _upsample(self.classifier(y), size)


class EdgeDecoder(nn.Module):
    """3x3 decoding at 1/4 scale, then a per-pixel MLP at full resolution.

    Edge bands are one or two pixels wide; classifying bilinearly upsampled
    features lets the ReLU sharpen them, which upsampled logits cannot.
    """

    def __init__(self, cin, width, cout):
        super().__init__()
        hidden = max(width // 2, 1)  # thin full-resolution path keeps the upsampling cheap
        self.body = nn.Sequential(conv_bn_relu(cin, width, 3), nn.Conv2d(width, hidden, 1))
        self.refine = nn.Sequential(nn.ReLU(), nn.Conv2d(hidden, hidden, 1), nn.ReLU(inplace=True),
                                    nn.Conv2d(hidden, cout, 1))

    def forward(self, x, size):
        return self.refine(_upsample(self.body(x), size))


class EdgeHeads(nn.Module):
    """Binary and category edge decoders over concatenated C2, C3, C4."""

    def __init__(self, c2_channels, c3_channels, c4_channels, width, num_classes):
        super().__init__()
        self.reduce3 = conv_bn_relu(c3_channels, width, 1)
        self.reduce4 = conv_bn_relu(c4_channels, width, 1)
        fused = c2_channels + 2 * width
        self.binary = EdgeDecoder(fused, width, 2)
        self.category = EdgeDecoder(fused, width, num_classes)

    def forward(self, c2, c3, c4, size):
        x = torch.cat([c2, _upsample(self.reduce3(c3), c2.shape[2:]),
                       _upsample(self.reduce4(c4), c2.shape[2:])], dim=1)
        return self.binary(x, size), self.category(x, size)


class DMLNet(nn.Module):
    """Parsing network with auxiliary edge heads that are skipped at inference."""

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        config = config or ModelConfig()
        config.validate()
        self.config = config
        self.encoder = Encoder(config.base_width)
        _, w2, w3, w4, w5 = self.encoder.widths
        if config.context == "ddgcn":
            self.context = DDGCN(w5, config.ddgcn_node_dim, config.ddgcn_feature_nodes)
        else:
            self.context = ConvContext(w5, config.context_width)
        self.parsing_head = ParsingHead(self.context.out_channels, w2, config.head_width, config.num_classes)
        self.edge_heads = (EdgeHeads(w2, w3, w4, config.edge_width, config.num_classes)
                           if config.use_edges else None)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Conv1d)):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm1d)):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def forward(self, image, mode: str = "train") -> NetworkOutputs:
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        size = image.shape[2:]
        feats = self.encoder(image)
        parsing = self.parsing_head(self.context(feats.c5), feats.c2, size)
        if mode == "infer" or self.edge_heads is None:
            return NetworkOutputs(parsing)
        binary, category = self.edge_heads(feats.c2, feats.c3, feats.c4, size)
        return NetworkOutputs(parsing, binary, category)


def is_edge_key(name: str) -> bool:
    return name.startswith("edge_heads.")


def count_parameters(model: DMLNet, mode: str = "train") -> int:
    return sum(p.numel() for name, p in model.named_parameters()
               if mode == "train" or not is_edge_key(name))


# --- checkpoints ------------------------------------------------------------

MAGIC = b"DMLCSR1\0"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Magic, u32 manifest length, UTF-8 JSON manifest, float32 LE payloads."""
    entries = []
    payload = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        entries.append({"name": name, "count": int(arr.size), "shape": list(arr.shape)})
        payload.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    manifest = json.dumps({"meta": meta or {}, "arrays": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for chunk in payload:
            fh.write(chunk)


def load_checkpoint(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        (length,) = struct.unpack_from("<I", data, 8)
        manifest = json.loads(data[12:12 + length].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest") from exc
    offset = 12 + length
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    for entry in manifest["arrays"]:
        nbytes = 4 * entry["count"]
        if offset + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
        flat = np.frombuffer(data, dtype="<f4", count=entry["count"], offset=offset)
        arrays[entry["name"]] = flat.reshape(entry["shape"]).astype(np.float32)
        offset += nbytes
    return arrays, manifest["meta"]


def load_into(model: nn.Module, arrays: Mapping[str, np.ndarray], strict: bool = True) -> None:
    """Copy named arrays into ``model``'s parameters and buffers."""
    state = model.state_dict()
    missing = [k for k in state if k not in arrays]
    unexpected = [k for k in arrays if k not in state]
    if strict and (missing or unexpected):
        raise CheckpointError(f"checkpoint mismatch: missing {missing[:3]}, unexpected {unexpected[:3]}")
    if missing:
        raise CheckpointError(f"checkpoint lacks {missing[:3]}")
    new_state = {}
    for k, ref in state.items():
        arr = np.asarray(arrays[k])
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"shape mismatch for {k}: {arr.shape} vs {tuple(ref.shape)}")
        new_state[k] = torch.tensor(arr, dtype=ref.dtype)
    model.load_state_dict(new_state)
