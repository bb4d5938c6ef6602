import numpy as np
import pytest
import torch

from retraj.encoder import (
    AdaptedEncoder,
    LowRankDelta,
    OutputHeads,
    TransformerConfig,
    predict_slots,
)
from retraj.errors import ConfigError


def tiny_cfg(**kw):
    base = dict(layers=2, dim=16, heads=2, ffn_dim=32, lora_rank=2)
    base.update(kw)
    return TransformerConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigError):
        TransformerConfig(dim=10, heads=3)
    with pytest.raises(ConfigError):
        TransformerConfig(lora_rank=0)
    with pytest.raises(ConfigError):
        TransformerConfig(layers=0)


def test_adapter_count_formula():
    # per layer: 3 projections x (dim*rank down + rank*dim up)
    for layers, dim, rank in ((4, 512, 8), (2, 64, 4), (1, 16, 2)):
        cfg = TransformerConfig(layers=layers, dim=dim, heads=2, ffn_dim=dim, lora_rank=rank)
        enc = AdaptedEncoder(cfg)
        n = sum(p.numel() for p in enc.adapter_parameters())
        assert n == layers * 3 * 2 * dim * rank


def test_fresh_adapter_is_exact_identity():
    torch.manual_seed(0)
    cfg = tiny_cfg()
    enc = AdaptedEncoder(cfg)
    x = torch.randn(2, 7, cfg.dim)
    mask = torch.ones(2, 7, dtype=torch.bool)
    with torch.no_grad():
        out_adapted = enc(x, mask)
        for layer in enc.layers:
            # zero the adapters' effect explicitly and compare bit for bit
            assert torch.all(layer.delta_q() == 0.0)
        out_again = enc(x, mask)
    assert torch.equal(out_adapted, out_again)


def test_zero_up_factor_reproduces_base_bitwise():
    torch.manual_seed(1)
    cfg = tiny_cfg()
    enc = AdaptedEncoder(cfg)
    x = torch.randn(3, 5, cfg.dim)
    mask = torch.ones(3, 5, dtype=torch.bool)
    with torch.no_grad():
        base_out = enc(x, mask)
        # perturb only the down factors; with up == 0 the delta stays zero
        for layer in enc.layers:
            layer.delta_q.down.mul_(3.7)
            layer.delta_k.down.add_(1.0)
        out = enc(x, mask)
    assert torch.equal(base_out, out)


def test_materialized_delta_equals_plain_linear():
    torch.manual_seed(2)
    d, r = 16, 3
    delta = LowRankDelta(d, r)
    with torch.no_grad():
        delta.up.copy_(torch.randn(r, d))
    w = torch.randn(d, d)
    bias = torch.randn(d)
    x = torch.randn(4, d)
    got = torch.nn.functional.linear(x, w + delta(), bias)
    want = torch.nn.functional.linear(x, w + delta.down @ delta.up, bias)
    assert torch.equal(got, want)


def test_delta_rank_bounded():
    torch.manual_seed(3)
    delta = LowRankDelta(32, 4)
    with torch.no_grad():
        delta.up.copy_(torch.randn(4, 32))
    mat = delta().detach().numpy()
    rank = np.linalg.matrix_rank(mat, tol=1e-6)
    assert rank <= 4


def test_only_adapters_require_grad():
    enc = AdaptedEncoder(tiny_cfg())
    for _, p in enc.base_parameters():
        assert not p.requires_grad
    for p in enc.adapter_parameters():
        assert p.requires_grad
    n_total = sum(p.numel() for p in enc.parameters() if p.requires_grad)
    assert n_total == sum(p.numel() for p in enc.adapter_parameters())


def test_base_checksum_ignores_adapters_and_sees_base():
    torch.manual_seed(4)
    enc = AdaptedEncoder(tiny_cfg())
    before = enc.base_checksum()
    with torch.no_grad():
        enc.layers[0].delta_q.up.add_(1.0)
    assert enc.base_checksum() == before
    with torch.no_grad():
        enc.layers[0].w_q.weight.add_(1e-3)
    assert enc.base_checksum() != before


def test_base_checksum_unchanged_by_optimizer_steps():
    torch.manual_seed(5)
    enc = AdaptedEncoder(tiny_cfg())
    before = enc.base_checksum()
    opt = torch.optim.Adam(enc.adapter_parameters(), lr=1e-2)
    x = torch.randn(2, 6, 16)
    mask = torch.ones(2, 6, dtype=torch.bool)
    for _ in range(20):
        opt.zero_grad()
        out = enc(x, mask)
        loss = out.square().mean()
        loss.backward()
        opt.step()
    assert enc.base_checksum() == before
    # and the adapters actually moved
    assert enc.layers[0].delta_q.up.abs().sum().item() > 0.0


def test_unfreeze_attention_widens_trainables():
    enc = AdaptedEncoder(tiny_cfg())
    n_before = sum(p.numel() for p in enc.parameters() if p.requires_grad)
    enc.unfreeze_attention()
    n_after = sum(p.numel() for p in enc.parameters() if p.requires_grad)
    d = 16
    per_layer = 4 * (d * d + d)  # q, k, v, o weights and biases
    assert n_after == n_before + 2 * per_layer
    # adapter_parameters must not absorb the unfrozen base weights
    assert len(enc.adapter_parameters()) == 2 * 3 * 2


def test_load_base_weights_shape_check(tmp_path):
    torch.manual_seed(6)
    enc = AdaptedEncoder(tiny_cfg())
    good = {n: p.detach().numpy() for n, p in enc.base_parameters()}
    np.savez(tmp_path / "base.npz", **good)
    enc.load_base_weights(tmp_path / "base.npz")

    bad = dict(good)
    first = next(iter(bad))
    bad[first] = np.zeros((3, 3), dtype=np.float32)
    np.savez(tmp_path / "bad.npz", **bad)
    with pytest.raises(ConfigError, match="shape"):
        enc.load_base_weights(tmp_path / "bad.npz")


def test_load_base_weights_round_trip(tmp_path):
    torch.manual_seed(7)
    src = AdaptedEncoder(tiny_cfg())
    np.savez(
        tmp_path / "w.npz", **{n: p.detach().numpy() for n, p in src.base_parameters()}
    )
    torch.manual_seed(99)
    dst = AdaptedEncoder(tiny_cfg())
    assert dst.base_checksum() != src.base_checksum()
    dst.load_base_weights(tmp_path / "w.npz")
    assert dst.base_checksum() == src.base_checksum()


def test_masked_rows_do_not_affect_kept_rows():
    torch.manual_seed(8)
    cfg = tiny_cfg()
    enc = AdaptedEncoder(cfg)
    x = torch.randn(1, 6, cfg.dim)
    mask = torch.tensor([[True, True, True, True, False, False]])
    x2 = x.clone()
    x2[0, 4:] = 123.0
    with torch.no_grad():
        a = enc(x, mask)
        b = enc(x2, mask)
    assert torch.allclose(a[0, :4], b[0, :4], atol=1e-5)


def test_attention_softmax_rows_sum_to_one():
    torch.manual_seed(9)
    cfg = tiny_cfg(layers=1)
    enc = AdaptedEncoder(cfg)
    layer = enc.layers[0]
    x = torch.randn(2, 5, cfg.dim)
    mask = torch.ones(2, 5, dtype=torch.bool)
    q = torch.nn.functional.linear(x, layer.w_q.weight + layer.delta_q(), layer.w_q.bias)
    k = torch.nn.functional.linear(x, layer.w_k.weight + layer.delta_k(), layer.w_k.bias)
    qh, kh = layer._heads(q), layer._heads(k)
    scores = (qh @ kh.transpose(-1, -2)) / (cfg.dim // cfg.heads) ** 0.5
    attn = torch.softmax(scores, dim=-1)
    sums = attn.sum(dim=-1)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)


# -- output heads ----------------------------------------------------------------


def test_heads_shapes_and_open_interval():
    torch.manual_seed(10)
    heads = OutputHeads(dim=16, n_edges=9)
    z = torch.randn(3, 7, 16) * 50  # large activations push sigmoid to saturation
    logits, ratios = heads(z)
    assert logits.shape == (3, 7, 9)
    assert ratios.shape == (3, 7)
    assert torch.all(ratios > 0.0)
    assert torch.all(ratios < 1.0)


def test_heads_softmax_rows_sum_to_one():
    torch.manual_seed(11)
    heads = OutputHeads(dim=8, n_edges=12)
    logits, _ = heads(torch.randn(2, 4, 8))
    probs = torch.softmax(logits, dim=-1)
    sums = probs.sum(dim=-1)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)


def test_predict_slots_tie_goes_to_smallest_index():
    logits = torch.tensor([[[1.0, 3.0, 3.0, 0.0]]])
    ratios = torch.tensor([[0.25]])
    mask = torch.ones(1, 1)
    picks = predict_slots(logits, ratios, mask)
    assert picks == [[(1, 0.25)]]


def test_predict_slots_skips_padded():
    logits = torch.zeros(1, 3, 4)
    logits[0, 0, 2] = 1.0
    logits[0, 1, 3] = 1.0
    ratios = torch.tensor([[0.1, 0.2, 0.3]])
    mask = torch.tensor([[1.0, 1.0, 0.0]])
    picks = predict_slots(logits, ratios, mask)
    assert len(picks[0]) == 2
    assert picks[0][0][0] == 2 and picks[0][1][0] == 3
