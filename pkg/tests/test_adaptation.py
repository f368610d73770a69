import numpy as np
import pytest
import torch
import torch.nn as nn

from fss.adaptation import (
    LinearHead,
    LoRALinear,
    MultilayerHead,
    SVFLinear,
    bitfit_mark,
    finetune_mark,
    freeze_all,
    lora_inject,
    lora_merge,
    parameter_digests,
    svf_decompose,
    svf_inject,
    svf_reconstruct,
    trainable_fraction,
)
from fss.encoders import EncoderConfig, tiny_encoder


def _trainable_names(model):
    return {n for n, p in model.named_parameters() if p.requires_grad}


# --- heads ------------------------------------------------------------------


def test_zeroed_classifier_outputs_its_bias():
    head = LinearHead(32, 3, seed=0)
    with torch.no_grad():
        head.conv.weight.zero_()
        head.conv.bias.copy_(torch.tensor([1.5, -2.0, 0.25]))
    head.eval()
    with torch.no_grad():
        out = head(torch.randn(2, 32, 8, 8), (16, 16))
    assert out.shape == (2, 3, 16, 16)
    for c, b in enumerate((1.5, -2.0, 0.25)):
        assert (out[:, c] == b).all()


def test_head_upsamples_to_requested_resolution():
    head = LinearHead(32, 3)
    head.eval()
    with torch.no_grad():
        assert head(torch.randn(1, 32, 8, 8), (64, 64)).shape == (1, 3, 64, 64)
        assert head(torch.randn(1, 32, 8, 8), None).shape == (1, 3, 8, 8)
    with pytest.raises(ValueError, match="channels"):
        head(torch.randn(1, 16, 8, 8), None)


def test_head_init_is_seeded():
    a, b = LinearHead(32, 3, seed=1), LinearHead(32, 3, seed=1)
    assert torch.equal(a.conv.weight, b.conv.weight)
    assert (LinearHead(32, 3, seed=2).conv.weight != a.conv.weight).any()
    assert (a.conv.bias == 0).all()


def test_multilayer_head_concat_width():
    head = MultilayerHead(32, 4, 3)
    assert head.in_channels == 128
    taps = tuple(torch.randn(1, 32, 8, 8) for _ in range(4))
    head.eval()
    with torch.no_grad():
        assert head(taps, (32, 32)).shape == (1, 3, 32, 32)
    with pytest.raises(ValueError, match="taps"):
        head(taps[:3], None)
    with pytest.raises(ValueError, match="shape"):
        head((taps[0], taps[1], taps[2], torch.randn(1, 32, 4, 4)), None)
    with pytest.raises(ValueError):
        MultilayerHead(32, 0, 3)


def test_single_tap_stack_equals_linear_head():
    lin = LinearHead(32, 3, seed=5)
    ml = MultilayerHead(32, 1, 3, seed=5)
    lin.eval()
    ml.eval()
    f = torch.randn(2, 32, 8, 8, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        assert torch.equal(lin(f, None), ml((f,), None))


def test_block_averaging_classifier_collapses_to_linear():
    # identical taps + a classifier that averages its four blocks is the
    # same map as a plain linear head, up to float addition order
    lin = LinearHead(32, 3, seed=2)
    ml = MultilayerHead(32, 4, 3, seed=1)
    with torch.no_grad():
        ml.bn.weight.copy_(lin.bn.weight.repeat(4))
        ml.bn.bias.copy_(lin.bn.bias.repeat(4))
        for i in range(4):
            ml.conv.weight[:, 32 * i : 32 * (i + 1)] = lin.conv.weight / 4.0
        ml.conv.bias.copy_(lin.conv.bias)
    lin.eval()
    ml.eval()
    f = torch.randn(2, 32, 8, 8, generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        a, b = ml((f, f, f, f), (8, 8)), lin(f, (8, 8))
    assert float((a - b).abs().max()) < 1e-5


def test_single_image_running_stats_fallback():
    head = LinearHead(8, 2, single_image_running_stats=True)
    x = torch.randn(4, 8, 4, 4)
    head.train()
    head(x, None)  # populate running stats
    assert int(head.bn.num_batches_tracked) == 1
    one = torch.randn(1, 8, 4, 4)
    got = head(one, None)
    head.eval()
    with torch.no_grad():
        expected = head(one, None)
    # the lone-image training batch used the running estimates, not its own
    assert torch.allclose(got, expected, atol=1e-6)


# --- SVF --------------------------------------------------------------------


def test_svf_decompose_diagonal():
    dec = svf_decompose(torch.diag(torch.tensor([3.0, 2.0, 1.0])))
    assert torch.allclose(dec.s, torch.tensor([3.0, 2.0, 1.0]))


def test_svf_reconstruction_residual():
    g = torch.Generator().manual_seed(0)
    w64 = torch.randn(8, 8, generator=g, dtype=torch.float64)
    dec = svf_decompose(w64)
    with torch.no_grad():
        assert float((svf_reconstruct(dec) - w64).abs().max()) <= 1e-12
        w32 = torch.randn(16, 5, generator=g)
        assert float((svf_reconstruct(svf_decompose(w32)) - w32).abs().max()) <= 1e-5


def test_svf_zeroed_singular_values_zero_the_weight():
    dec = svf_decompose(torch.randn(6, 6, generator=torch.Generator().manual_seed(1)))
    with torch.no_grad():
        dec.s.zero_()
    assert (svf_reconstruct(dec) == 0).all()


def test_svf_conv_kernel_shape_round_trips():
    w = torch.randn(8, 4, 3, 3, generator=torch.Generator().manual_seed(2))
    dec = svf_decompose(w)
    assert dec.s.numel() == min(8, 4 * 3 * 3)
    assert svf_reconstruct(dec).shape == w.shape
    with pytest.raises(ValueError):
        svf_decompose(torch.randn(4, 4, 4))
    with pytest.raises(ValueError, match="finite"):
        svf_decompose(torch.tensor([[1.0, torch.nan], [0.0, 1.0]]))


def test_svf_linear_matches_base_and_trains_only_s():
    base = nn.Linear(16, 8)
    layer = SVFLinear(base)
    x = torch.randn(4, 16, generator=torch.Generator().manual_seed(3))
    with torch.no_grad():
        assert torch.allclose(layer(x), base(x), atol=1e-5)
    assert _trainable_names(layer) == {"decomposition.s"}


def test_svf_inject_counts_and_freezes():
    enc = tiny_encoder()
    expected = sum(
        min(m.weight.shape)
        for _, m in tiny_encoder().named_modules()
        if isinstance(m, nn.Linear)
    )
    _, report = svf_inject(enc)
    assert report.trainable == expected
    assert all(n.endswith("decomposition.s") for n in _trainable_names(enc))
    with pytest.raises(ValueError, match="matched"):
        svf_inject(nn.Sequential(nn.Conv2d(3, 3, 1)))


def test_svf_inject_respects_selector():
    enc = tiny_encoder()
    _, report = svf_inject(enc, ("fc1", "fc2"))
    svf_layers = [m for m in enc.modules() if isinstance(m, SVFLinear)]
    assert len(svf_layers) == 2 * enc.n_blocks
    assert report.trainable == sum(min(32, 128) for _ in svf_layers)


# --- LoRA -------------------------------------------------------------------


def test_lora_parameter_arithmetic():
    layer = LoRALinear(nn.Linear(16, 16), rank=2, seed=0)
    assert layer.lora_a.numel() + layer.lora_b.numel() == 64
    assert _trainable_names(layer) == {"lora_a", "lora_b"}
    assert layer.scaling == 1.0  # alpha defaults to the rank
    assert LoRALinear(nn.Linear(16, 16), rank=2, alpha=4.0).scaling == 2.0
    with pytest.raises(ValueError, match="rank"):
        LoRALinear(nn.Linear(16, 8), rank=9)


def test_lora_is_identity_at_init():
    base = nn.Linear(32, 32)
    frozen = nn.Linear(32, 32)
    frozen.load_state_dict(base.state_dict())
    layer = LoRALinear(base, rank=4, seed=7)
    x = torch.randn(100, 32, generator=torch.Generator().manual_seed(4))
    with torch.no_grad():
        assert torch.equal(layer(x), frozen(x))


def test_lora_inject_targets_and_seeds():
    enc = tiny_encoder()
    _, report = lora_inject(enc, ("q", "v"), rank=4, seed=0)
    adapted = [(n, m) for n, m in enc.named_modules() if isinstance(m, LoRALinear)]
    assert sorted(n.split(".")[-1] for n, _ in adapted) == ["q", "q", "v", "v"]
    assert report.trainable == sum(4 * (32 + 32) for _ in adapted)
    # layers draw from per-layer streams
    assert not torch.equal(adapted[0][1].lora_a, adapted[1][1].lora_a)

    enc2 = tiny_encoder()
    lora_inject(enc2, ("q", "v"), rank=4, seed=0)
    a1 = dict(enc.named_modules())["blocks.0.q"].lora_a
    a2 = dict(enc2.named_modules())["blocks.0.q"].lora_a
    assert torch.equal(a1, a2)


def test_lora_merge_at_init_keeps_weights():
    enc = tiny_encoder()
    original = {
        n: m.weight.detach().clone()
        for n, m in enc.named_modules()
        if isinstance(m, nn.Linear) and n.split(".")[-1] in ("q", "v")
    }
    lora_inject(enc, ("q", "v"), seed=0)
    lora_merge(enc)
    for n, m in enc.named_modules():
        if n in original:
            assert isinstance(m, nn.Linear)
            assert torch.equal(m.weight, original[n])
    with pytest.raises(ValueError, match="already merged"):
        lora_merge(enc)


def test_lora_merge_reproduces_trained_outputs():
    layer = LoRALinear(nn.Linear(24, 12), rank=3, seed=1)
    with torch.no_grad():  # pretend training moved both factors
        layer.lora_b.normal_(std=0.05, generator=torch.Generator().manual_seed(5))
    x = torch.randn(100, 24, generator=torch.Generator().manual_seed(6))
    with torch.no_grad():
        before = layer(x)
        merged = nn.Linear(24, 12)
        merged.load_state_dict(
            {"weight": layer.merged_weight(), "bias": layer.base.bias}
        )
        after = merged(x)
    assert float((before - after).abs().max()) <= 1e-5


# --- marking and accounting ---------------------------------------------------


def test_bitfit_marks_exactly_the_biases():
    enc = tiny_encoder()
    report = bitfit_mark(enc)
    names = _trainable_names(enc)
    assert names == {n for n, _ in enc.named_parameters() if n.endswith(".bias")}
    assert report.trainable == sum(
        p.numel() for n, p in enc.named_parameters() if n.endswith(".bias")
    )
    with pytest.raises(ValueError, match="bias"):
        bitfit_mark(nn.Sequential(nn.Linear(4, 4, bias=False)))


def test_finetune_marks_everything():
    enc = freeze_all(tiny_encoder())
    report = finetune_mark(enc)
    assert report.fraction == 1.0
    assert report.trainable == report.total


def test_probe_fraction_is_head_over_total():
    enc = freeze_all(tiny_encoder())
    head = LinearHead(32, 3)
    report = trainable_fraction({"encoder": enc, "head": head})
    head_params = sum(p.numel() for p in head.parameters())
    assert report.trainable == head_params
    assert report.fraction == head_params / report.total


def test_report_groups_partition_and_adapters_split():
    enc = tiny_encoder()
    lora_inject(enc, ("q", "v"), seed=0)
    report = trainable_fraction({"encoder": enc, "head": LinearHead(32, 3)})
    assert {g.name for g in report.groups} == {"encoder", "encoder/adapters", "head"}
    assert sum(g.total for g in report.groups) == report.total
    adapters = next(g for g in report.groups if g.name == "encoder/adapters")
    assert adapters.trainable == adapters.total == 4 * 4 * 64


def test_vit_shaped_lora_stays_under_one_percent():
    big = tiny_encoder(
        EncoderConfig(
            embed_dim=768, n_blocks=12, patch_size=16, n_heads=12,
            native_resolution=(224, 224),
        )
    )
    _, report = lora_inject(big, ("q", "v"), rank=4, seed=0)
    assert report.trainable == 12 * 2 * 4 * (768 + 768)
    assert report.fraction < 0.01


def test_bitfit_is_larger_than_svf_here():
    # bias vectors outnumber singular values on this architecture; the two
    # methods only come close on much wider models
    svf_rep = svf_inject(tiny_encoder())[1]
    bit_rep = bitfit_mark(tiny_encoder())
    assert bit_rep.trainable > svf_rep.trainable


def test_parameter_digests_cover_frozen_params_not_buffers():
    enc = freeze_all(tiny_encoder())
    head = LinearHead(32, 3)
    digests = parameter_digests({"encoder": enc, "head": head})
    assert "encoder.pos_embed" in digests
    assert "head.conv.weight" in digests
    assert not any("running_mean" in k for k in digests)
    assert all(len(v) == 64 for v in digests.values())

    # value changes show up, name-for-name
    with torch.no_grad():
        head.conv.weight.add_(1.0)
    after = parameter_digests({"encoder": enc, "head": head})
    changed = {k for k in digests if digests[k] != after[k]}
    assert changed == {"head.conv.weight"}
