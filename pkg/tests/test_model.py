import time

import numpy as np
import pytest
import torch
import torch.fx
import torch.nn as nn

from dmlcsr.config import ModelConfig
from dmlcsr.data import generate_sample
from dmlcsr.edge_labels import binary_edges
from dmlcsr.losses import weighted_ce_edge
from dmlcsr.model import (
    DDGCN,
    CheckpointError,
    DMLNet,
    Encoder,
    count_parameters,
    is_edge_key,
    load_checkpoint,
    load_into,
    save_checkpoint,
)

POOLING = (nn.MaxPool1d, nn.MaxPool2d, nn.AvgPool1d, nn.AvgPool2d, nn.AdaptiveAvgPool1d,
           nn.AdaptiveAvgPool2d, nn.AdaptiveMaxPool1d, nn.AdaptiveMaxPool2d, nn.LPPool2d)


@pytest.fixture(scope="module")
def net():
    torch.manual_seed(0)
    return DMLNet(ModelConfig()).eval()


def _image(n=2, size=96, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, size, size, generator=g)


def test_encoder_strides():
    enc = Encoder(32).eval()
    feats = enc(_image(1))
    sizes = [f.shape[-1] for f in feats]
    assert sizes == [48, 24, 12, 6, 6]
    assert [f.shape[1] for f in feats] == list(enc.widths)


def test_encoder_rejects_bad_size():
    with pytest.raises(ValueError):
        Encoder(8)(torch.zeros(1, 3, 40, 40))


def test_zero_weight_encoder_is_constant():
    enc = Encoder(8).eval()
    with torch.no_grad():
        for p in enc.parameters():
            p.zero_()
    c5 = enc(_image(2)).c5
    assert torch.all(c5 == c5.flatten()[0])


def test_one_pixel_reaches_c5():
    enc = Encoder(16).eval()
    x = _image(1)
    y = x.clone()
    y[0, :, 0, 0] += 1.0
    with torch.no_grad():
        assert not torch.equal(enc(x).c5, enc(y).c5)


def test_ddgcn_initial_output_is_x_then_zeros():
    torch.manual_seed(1)
    module = DDGCN(128, 64, 64).eval()
    x = torch.randn(2, 128, 6, 6)
    with torch.no_grad():
        y = module(x)
    assert y.shape == (2, 128 + 64 + 64, 6, 6) == (2, module.out_channels, 6, 6)
    assert torch.equal(y[:, :128], x)
    assert torch.all(y[:, 128:] == 0)


@pytest.mark.parametrize("size", [6, 12])
def test_ddgcn_preserves_size_with_nonzero_scales(size):
    module = DDGCN(32, 16, 8).eval()
    with torch.no_grad():
        module.lam.fill_(0.5)
        module.gamma.fill_(2.0)
        y = module(torch.randn(1, 32, size, size))
    assert y.shape == (1, 56, size, size)
    assert y[:, 32:].abs().sum() > 0


def test_ddgcn_channel_arithmetic():
    module = DDGCN(256, 64, 64).eval()
    with torch.no_grad():
        y = module(torch.randn(1, 256, 6, 6))
    assert module.out_channels == 384 and y.shape[1] == 384


def _strided(module):
    stride = getattr(module, "stride", 1)
    return any(v != 1 for v in (stride if isinstance(stride, tuple) else (stride,)))


def test_no_pooling_anywhere(net):
    assert not [m for m in net.modules() if isinstance(m, POOLING)]
    traced = torch.fx.symbolic_trace(net.context)
    modules = dict(traced.named_modules())
    for node in traced.graph.nodes:
        assert "pool" not in str(node.target).lower(), node
        if node.op == "call_module":
            assert not isinstance(modules[node.target], POOLING)
            assert not _strided(modules[node.target]), node.target
    # one set of weights, two spatial sizes
    with torch.no_grad():
        for size in (6, 12):
            assert net.context(torch.randn(1, 128, size, size)).shape[-2:] == (size, size)


def test_head_shapes(net):
    with torch.no_grad():
        out = net(_image(2))
    assert out.parsing.shape == (2, 11, 96, 96)
    assert out.binary_edge.shape == (2, 2, 96, 96)
    assert out.category_edge.shape == (2, 11, 96, 96)
    assert all(torch.isfinite(t).all() for t in out)


def test_zero_classifier_gives_uniform_softmax():
    model = DMLNet(ModelConfig(base_width=8)).eval()
    with torch.no_grad():
        model.parsing_head.classifier.weight.zero_()
        model.parsing_head.classifier.bias.zero_()
        probs = torch.softmax(model(_image(1), mode="infer").parsing, 1)
    assert torch.allclose(probs, torch.full_like(probs, 1 / 11))


def test_edge_heads_do_not_see_c5(net):
    seen = []
    handle = net.edge_heads.register_forward_hook(lambda m, args, out: seen.append(args))
    with torch.no_grad():
        net(_image(1))
    handle.remove()
    c5_channels = net.encoder.widths[4]
    c2, c3, c4, _ = seen[0]
    assert (c2.shape[-1], c3.shape[-1], c4.shape[-1]) == (24, 12, 6)
    # edges are unchanged when only C5 is perturbed
    feats = net.encoder(_image(1))
    with torch.no_grad():
        a = net.edge_heads(feats.c2, feats.c3, feats.c4, (96, 96))
        net.encoder.layer5.register_forward_hook(lambda m, i, o: o + 1.0)
        b = net.edge_heads(*net.encoder(_image(1))[1:4], (96, 96))
    net.encoder.layer5._forward_hooks.clear()
    assert c5_channels == 128
    assert all(torch.equal(u, v) for u, v in zip(a, b))


def test_binary_edge_head_can_overfit():
    sample = generate_sample(0)
    image = torch.from_numpy(sample.image)[None]
    target = torch.from_numpy(binary_edges(sample.labels))[None]
    torch.manual_seed(0)
    model = DMLNet(ModelConfig())
    opt = torch.optim.Adam(model.parameters(), lr=3e-3)
    for _ in range(200):
        loss = weighted_ce_edge(model(image).binary_edge, target)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if loss.item() < 0.1:
            break
    assert loss.item() < 0.1


def test_infer_matches_train_parsing(net):
    x = _image(2)
    with torch.no_grad():
        a = net(x, mode="train").parsing
        b = net(x, mode="infer")
    assert torch.equal(a, b.parsing)
    assert b.binary_edge is None and b.category_edge is None


def test_infer_has_fewer_parameters(net):
    assert count_parameters(net, "infer") < count_parameters(net, "train")
    assert count_parameters(net, "infer") == sum(
        p.numel() for n, p in net.named_parameters() if not n.startswith("edge_heads"))


def test_randomized_edge_heads_do_not_change_inference():
    model = DMLNet(ModelConfig(base_width=8)).eval()
    x = _image(1)
    with torch.no_grad():
        before = model(x, mode="infer").parsing
        for p in model.edge_heads.parameters():
            p.normal_()
        after = model(x, mode="infer").parsing
    assert torch.equal(before, after)


def test_infer_is_faster(net):
    x = _image(4)

    def best_time(mode):
        times = []
        for _ in range(3):
            t0 = time.perf_counter()
            with torch.no_grad():
                net(x, mode=mode)
            times.append(time.perf_counter() - t0)
        return min(times)

    assert best_time("infer") < best_time("train")


def test_bad_mode(net):
    with pytest.raises(ValueError):
        net(_image(1), mode="eval")


def test_gradients_reach_encoder():
    model = DMLNet(ModelConfig(base_width=8)).train()
    out = model(_image(2, 32))
    loss = out.parsing.mean() + out.binary_edge.mean() + out.category_edge.mean()
    loss.backward()
    for name, p in model.encoder.named_parameters():
        assert p.grad is not None and torch.isfinite(p.grad).all(), name
    assert any(p.grad.abs().sum() > 0 for p in model.encoder.parameters())


def test_checkpoint_round_trip(tmp_path):
    model = DMLNet(ModelConfig(base_width=8)).eval()
    arrays = {k: v.numpy() for k, v in model.state_dict().items()}
    path = tmp_path / "m.bin"
    save_checkpoint(path, arrays, {"note": "x"})
    loaded, meta = load_checkpoint(path)
    assert meta == {"note": "x"} and list(loaded) == list(arrays)
    for k in arrays:
        assert np.array_equal(loaded[k], arrays[k].astype(np.float32))
    other = DMLNet(ModelConfig(base_width=8)).eval()
    load_into(other, loaded)
    x = _image(1)
    with torch.no_grad():
        assert torch.equal(model(x).parsing, other(x).parsing)


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTACKPT" + b"\0" * 10)
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    model = DMLNet(ModelConfig(base_width=8))
    arrays = {k: v.numpy() for k, v in model.state_dict().items()}
    path = tmp_path / "m.bin"
    save_checkpoint(path, arrays)
    path.write_bytes(path.read_bytes()[:-16])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_into(DMLNet(ModelConfig(base_width=16)), arrays)


def test_parsing_only_model_loads_full_checkpoint():
    full = DMLNet(ModelConfig(base_width=8)).eval()
    arrays = {k: v.numpy() for k, v in full.state_dict().items()}
    lean = DMLNet(ModelConfig(base_width=8, use_edges=False)).eval()
    load_into(lean, {k: v for k, v in arrays.items() if not is_edge_key(k)})
    x = _image(1)
    with torch.no_grad():
        assert torch.equal(full(x, mode="infer").parsing, lean(x).parsing)
