import numpy as np
import pytest
import torch

from shiftcd.encoder import build_encoder
from shiftcd.errors import CompatibilityError, ConfigError, DimensionError
from shiftcd.imagery import Raster
from shiftcd.translator import (
    AttentionConfig,
    Decoder,
    EfficientSelfAttention,
    StandardStyleAttention,
    TranslatorModel,
    attention_weights,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
    translate,
)


def efficient_param_formula(C, G, m, J):
    """Parameter count written out layer by layer."""
    d = C // G
    stages = int(np.log2(m))
    norms = 2 * 2 * C
    qk = 2 * stages * C * (C // G) * 9
    v = stages * C * C * 9
    bank_out = G * J * d * (d + 1)
    sbg = (C * (C // G) * 9 + C) + (bank_out * (C // G) * 9 + bank_out)
    return norms + qk + v + sbg


def test_attention_weights_against_numpy():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(2, 3, 5, 4))
    k = rng.normal(size=(2, 3, 7, 4))
    logits = np.einsum("bgid,bgjd->bgij", q, k) / 2.0
    expect = np.exp(logits - logits.max(-1, keepdims=True))
    expect /= expect.sum(-1, keepdims=True)
    got = attention_weights(torch.from_numpy(q), torch.from_numpy(k)).numpy()
    assert np.allclose(got, expect, atol=1e-12)


def loop_forward(block, z_pre, z_pos):
    """Grouped attention, bank aggregation and modulation with explicit loops."""
    cfg = block.cfg
    G, J, d = cfg.groups, cfg.variants, cfg.head_dim
    with torch.no_grad():
        content, q, k, grid = block.project_qk(z_pre, z_pos)
        bank = block.style_bank(z_pos).matrices[0].numpy()  # G x P x J x d x (d+1)
    q, k, content = q[0].numpy(), k[0].numpy(), content[0].numpy()
    P = q.shape[1]
    coef = np.zeros((G, P, d, d + 1))
    for g in range(G):
        for i in range(P):
            logits = np.array([q[g, i] @ k[g, j] for j in range(P)]) / np.sqrt(d)
            w = np.exp(logits - logits.max())
            w /= w.sum()
            agg = sum(w[j] * bank[g, j] for j in range(P))  # J x d x (d+1)
            coef[g, i] = agg.mean(axis=0) if cfg.reduce == "mean" else agg[cfg.variant_index % J]
    field = torch.from_numpy(coef.transpose(0, 2, 3, 1).reshape(1, G * d * (d + 1), *grid))
    H, W = content.shape[-2:]
    field = torch.nn.functional.interpolate(field, size=(H, W), mode="bilinear", align_corners=False)[0].numpy()
    field = field.reshape(G, d, d + 1, H, W)
    out = np.zeros_like(content)
    for g in range(G):
        x = content[g * d : (g + 1) * d]
        for i in range(d):
            out[g * d + i] = (field[g, i, :d] * x).sum(axis=0) + field[g, i, d]
    return out


@pytest.mark.parametrize("reduce", ["mean", "index"])
def test_forward_matches_loop_oracle(reduce):
    torch.manual_seed(0)
    cfg = AttentionConfig(channels=8, groups=2, downsample=2, variants=3, reduce=reduce, variant_index=4)
    block = EfficientSelfAttention(cfg).double()
    for p in block.parameters():
        torch.nn.init.normal_(p, std=0.2)
    z_pre = torch.randn(1, 8, 8, 8, dtype=torch.float64)
    z_pos = torch.randn(1, 8, 8, 8, dtype=torch.float64)
    with torch.no_grad():
        got = block(z_pre, z_pos)[0].numpy()
    assert np.allclose(got, loop_forward(block, z_pre, z_pos), atol=1e-10)


def test_identity_bank_passes_normalized_content():
    model = TranslatorModel(AttentionConfig(channels=32, groups=4, variants=2), (8, 16, 32))
    model.initialize(0)
    block = model.attention
    with torch.no_grad():
        block.sbg[2].weight.zero_()
        z_pre, z_pos = torch.randn(1, 32, 8, 8), torch.randn(1, 32, 8, 8)
        out = block(z_pre, z_pos)
        assert torch.allclose(out, block.norm_pre(z_pre), atol=1e-5)


@pytest.mark.parametrize("G,m", [(1, 2), (4, 4), (16, 2), (16, 4)])
def test_shapes_and_row_sums(G, m):
    cfg = AttentionConfig(channels=32, groups=G, downsample=m, variants=2)
    block = EfficientSelfAttention(cfg)
    z = torch.randn(2, 32, 16, 12)
    out, attn = block(z, torch.randn_like(z), return_attention=True)
    assert out.shape == z.shape
    assert attn.shape == (2, G, (16 // m) * (12 // m), (16 // m) * (12 // m))
    assert torch.allclose(attn.sum(-1), torch.ones(()), atol=1e-5)


def test_coarse_modulation_shape():
    block = EfficientSelfAttention(AttentionConfig(channels=16, groups=4, variants=2, modulation="coarse"))
    z = torch.randn(1, 16, 8, 8)
    assert block(z, z).shape == z.shape


def test_parameter_count_formula_and_ratio():
    cfg = AttentionConfig()
    light = count_parameters(EfficientSelfAttention(cfg))
    assert light == efficient_param_formula(256, 16, 4, 8)
    heavy = count_parameters(StandardStyleAttention(256, 16, 8))
    assert heavy >= 5 * light


def test_config_validation():
    with pytest.raises(ConfigError):
        AttentionConfig(channels=30, groups=4)
    with pytest.raises(ConfigError):
        AttentionConfig(downsample=3)
    with pytest.raises(ConfigError):
        AttentionConfig(reduce="max")
    with pytest.raises(ConfigError):
        TranslatorModel(AttentionConfig(channels=64, groups=4), (8, 16, 32))


def test_mismatched_inputs_rejected():
    block = EfficientSelfAttention(AttentionConfig(channels=16, groups=4, variants=1))
    with pytest.raises(DimensionError):
        block(torch.randn(1, 16, 8, 8), torch.randn(1, 16, 8, 4))
    with pytest.raises(DimensionError):
        block(torch.randn(1, 8, 8, 8), torch.randn(1, 8, 8, 8))


def test_decoder_range_and_upsampling():
    dec = Decoder((8, 16, 32))
    out = dec(torch.randn(1, 32, 5, 7) * 10)
    assert out.shape == (1, 3, 20, 28)
    assert out.min() >= 0 and out.max() <= 1


def test_initialize_is_seeded():
    a = TranslatorModel(AttentionConfig(channels=32, groups=4, variants=2), (8, 16, 32))
    b = TranslatorModel(AttentionConfig(channels=32, groups=4, variants=2), (8, 16, 32))
    a.initialize(5)
    b.initialize(5)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_checkpoint_round_trip_and_digest(tmp_path):
    model = TranslatorModel(AttentionConfig(channels=32, groups=4, variants=2), (8, 16, 32))
    model.initialize(1)
    path = save_checkpoint(tmp_path / "ck.npz", model, {"model_digest": "d1", "seed": 1})
    back, manifest = load_checkpoint(path, expect_digest="d1")
    assert manifest["seed"] == 1
    for (ka, va), (kb, vb) in zip(model.state_dict().items(), back.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    with pytest.raises(CompatibilityError):
        load_checkpoint(path, expect_digest="other")


def test_translate_raster_shape():
    enc = build_encoder(widths=(8, 16, 32))
    model = TranslatorModel(AttentionConfig(channels=32, groups=4, variants=2), (8, 16, 32))
    model.initialize(0)
    rng = np.random.default_rng(0)
    I1 = Raster(rng.random((32, 48, 3)).astype(np.float32))
    I2 = Raster(rng.random((32, 48, 3)).astype(np.float32))
    out = translate(I1, I2, model, enc)
    assert out.shape == I1.shape
    with pytest.raises(DimensionError):
        translate(Raster(I1.data[:30]), Raster(I2.data[:30]), model, enc)
