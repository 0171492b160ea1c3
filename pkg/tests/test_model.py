import math
import random

import pytest
import torch

from focustune.model import (
    CHECKPOINT_MAGIC,
    FocusLM,
    LoraConfig,
    ModelConfig,
    attach_lora,
    effective_weight,
    eos_representation,
    init_params,
    load_checkpoint,
    merge_lora,
    reachability,
    save_checkpoint,
    trainable_parameters,
)


def small_cfg(**kw):
    base = dict(vocab_size=50, d_model=32, n_layers=2, n_heads=4, max_len=64, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def rand_tokens(n=20, v=50, seed=0, batch=None):
    g = torch.Generator().manual_seed(seed)
    shape = (n,) if batch is None else (batch, n)
    return torch.randint(0, v, shape, generator=g)


# ------------------------------------------------------------------ config


def test_config_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        small_cfg(d_model=30, n_heads=4)


def test_config_rejects_bad_window():
    with pytest.raises(ValueError):
        small_cfg(window=100, max_len=64)


def test_config_rejects_bad_lora_rank():
    with pytest.raises(ValueError):
        LoraConfig(rank=0)


def test_config_roundtrips_through_dict():
    cfg = small_cfg(window=16, lora=LoraConfig(rank=2, alpha=4.0, targets=("q", "v")),
                    mlp_mult=2)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# ------------------------------------------------------------------ init


def test_init_deterministic():
    a = init_params(small_cfg(seed=7))
    b = init_params(small_cfg(seed=7))
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        assert torch.equal(pa, pb)


def test_init_seed_changes_params():
    a = init_params(small_cfg(seed=1))
    b = init_params(small_cfg(seed=2))
    assert not torch.equal(a.tok_emb, b.tok_emb)


def test_tau_init_readback():
    m = init_params(small_cfg())
    assert float(m.log_inv_tau.detach()) == pytest.approx(math.log(1 / 0.07), rel=1e-6)


def test_position_embedding_init_is_scaled_sinusoid():
    m = init_params(small_cfg())
    d = m.config.d_model
    pos, dim = 5, 6
    angle = pos / (10000.0 ** (dim / d))
    assert float(m.pos_emb[pos, dim].detach()) == pytest.approx(0.1 * math.sin(angle), rel=1e-5)
    assert float(m.pos_emb[pos, dim + 1].detach()) == pytest.approx(0.1 * math.cos(angle), rel=1e-5)


def test_lora_b_starts_at_zero():
    m = init_params(small_cfg(lora=LoraConfig(rank=2)))
    for blk in m.blocks:
        for t in blk.lora_B:
            assert torch.equal(blk.lora_B[t], torch.zeros_like(blk.lora_B[t]))


# ------------------------------------------------------------------ forward


def test_forward_shapes_unbatched():
    m = init_params(small_cfg())
    out = m(rand_tokens(12))
    assert out.logits.shape == (12, 50)
    assert out.hidden.shape == (12, 32)


def test_forward_shapes_batched():
    m = init_params(small_cfg())
    out = m(rand_tokens(12, batch=3))
    assert out.logits.shape == (3, 12, 50)


def test_forward_rejects_overlength():
    m = init_params(small_cfg(max_len=16))
    with pytest.raises(ValueError):
        m(rand_tokens(17))


def test_causality_prefix_logits_invariant_to_suffix():
    m = init_params(small_cfg())
    a = rand_tokens(20, seed=3)
    b = a.clone()
    b[15:] = (b[15:] + 1) % 50
    la = m(a).logits
    lb = m(b).logits
    assert torch.equal(la[:15], lb[:15])


def test_attention_rows_are_distributions():
    m = init_params(small_cfg())
    out = m(rand_tokens(16), want_attn=True)
    for layer_attn in out.attn:
        sums = layer_attn.sum(-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)
        assert (layer_attn >= 0).all()


def test_future_attention_exactly_zero():
    m = init_params(small_cfg())
    out = m(rand_tokens(10), want_attn=True)
    for layer_attn in out.attn:
        upper = torch.triu(torch.ones(10, 10, dtype=torch.bool), diagonal=1)
        assert (layer_attn[:, upper] == 0).all()


def test_window_attention_exact_zero_beyond_width():
    # window=8 on length-64 input: weight (i, j) must be exactly 0 when i-j >= 8
    m = init_params(small_cfg(window=8))
    out = m(rand_tokens(64), want_attn=True)
    i = torch.arange(64).unsqueeze(1)
    j = torch.arange(64).unsqueeze(0)
    far = (i - j) >= 8
    near = ((i - j) >= 0) & ~far
    for layer_attn in out.attn:
        assert (layer_attn[:, far] == 0).all()
        assert (layer_attn[:, near] > 0).all()


def test_batched_forward_matches_unbatched():
    m = init_params(small_cfg())
    x = rand_tokens(14, seed=5)
    single = m(x).logits
    batched = m(torch.stack([x, x])).logits
    assert torch.allclose(single, batched[0], atol=1e-6)
    assert torch.allclose(batched[0], batched[1], atol=0)


def test_mlp_free_blocks_forward():
    m = init_params(small_cfg(mlp_mult=0))
    assert m.blocks[0].w1 is None
    out = m(rand_tokens(8))
    assert out.logits.shape == (8, 50)


# ------------------------------------------------------------------ eos


def test_eos_representation_is_hidden_at_index():
    m = init_params(small_cfg())
    x = rand_tokens(10)
    eos_id = 7
    x[4] = eos_id
    out = m(x, eos_id=eos_id)
    assert out.eos_index == 4
    assert torch.equal(eos_representation(out), out.hidden[4])


def test_eos_representation_requires_eos():
    m = init_params(small_cfg())
    x = torch.full((6,), 3)
    out = m(x, eos_id=9)
    with pytest.raises(ValueError):
        eos_representation(out)


# ------------------------------------------------------------------ lora


def test_lora_noop_at_init():
    base = init_params(small_cfg(seed=11))
    adapted = attach_lora(base, LoraConfig(rank=4, alpha=8.0))
    x = rand_tokens(18, seed=2)
    d = (base(x).logits - adapted(x).logits).abs().max()
    assert float(d.detach()) < 1e-10


def test_attach_lora_freezes_base_weights():
    adapted = attach_lora(init_params(small_cfg()), LoraConfig(rank=2))
    names = {n for n, _ in trainable_parameters(adapted)}
    assert any("lora_" in n for n in names)
    assert "tok_emb" in names and "pos_emb" in names and "log_inv_tau" in names
    assert not any(".wq" in n or ".wk" in n or ".wv" in n or ".wo" in n for n in names)
    assert not any(".w1" in n or ".w2" in n for n in names)
    assert any(".ln" in n for n in names)


def test_attach_lora_rejects_double_attach():
    adapted = attach_lora(init_params(small_cfg()), LoraConfig(rank=2))
    with pytest.raises(ValueError):
        attach_lora(adapted, LoraConfig(rank=2))


def test_effective_weight_zero_b_is_identity():
    w = torch.randn(8, 8)
    a = torch.randn(2, 8)
    b = torch.zeros(8, 2)
    assert torch.equal(effective_weight(w, a, b, alpha=4.0, rank=2), w)


def test_effective_weight_rank1_outer_product():
    w = torch.zeros(3, 3, dtype=torch.float64)
    a = torch.tensor([[1.0, 2.0, 3.0]], dtype=torch.float64)
    b = torch.tensor([[2.0], [0.0], [-1.0]], dtype=torch.float64)
    got = effective_weight(w, a, b, alpha=3.0, rank=1)
    want = 3.0 * torch.outer(b[:, 0], a[0])
    assert torch.allclose(got, want, atol=1e-15)


def test_effective_weight_shape_mismatch():
    with pytest.raises((ValueError, RuntimeError)):
        effective_weight(torch.zeros(4, 4), torch.zeros(2, 5), torch.zeros(4, 2), 1.0, 2)


def test_merge_equals_adapter_path():
    # two-path equivalence is a float64 statement; float32 rounding sits ~1e-7
    base = init_params(small_cfg(seed=5, dtype="float64"))
    adapted = attach_lora(base, LoraConfig(rank=3, alpha=6.0))
    # give the adapters nonzero weights so the test is not vacuous
    g = torch.Generator().manual_seed(9)
    with torch.no_grad():
        for blk in adapted.blocks:
            for t in blk.lora_B:
                blk.lora_B[t].copy_(
                    torch.randn(blk.lora_B[t].shape, generator=g, dtype=torch.float64) * 0.3)
    merged = merge_lora(adapted)
    assert merged.config.lora is None
    x = rand_tokens(20, seed=4)
    d = (adapted(x).logits - merged(x).logits).abs().max()
    assert float(d.detach()) < 1e-10


# ------------------------------------------------------------------ window reachability


def test_reachability_direct_window():
    assert reachability(8, 1, 64, 10, 3)      # i-j=7 < 8
    assert not reachability(8, 1, 64, 10, 2)  # i-j=8


def test_reachability_lost_in_the_beginning():
    # one layer, query at the end, key at the start, context longer than window
    assert not reachability(4, 1, 32, 31, 0)


def test_reachability_depth_extends_range():
    # each extra layer adds w-1 to the reach
    assert reachability(4, 2, 32, 6, 0)
    assert not reachability(4, 2, 32, 7, 0)


def test_reachability_no_window_always_true():
    assert reachability(None, 1, 128, 127, 0)


def _bfs_reachable(w, layers, i, j):
    # oracle: BFS over the layered DAG; one attention hop per layer
    frontier = {i}
    for _ in range(layers):
        nxt = set()
        for p in frontier:
            lo = p - (w - 1) if w is not None else 0
            nxt.update(range(max(0, lo), p + 1))
        frontier = nxt
        if j in frontier:
            return True
    return j in frontier


def test_reachability_matches_bfs_oracle_500():
    rng = random.Random(0)
    for _ in range(500):
        w = rng.choice([None, 2, 3, 4, 8, 16])
        layers = rng.randint(1, 6)
        L = rng.randint(2, 64)
        i = rng.randrange(L)
        j = rng.randint(0, i)
        got = reachability(w, layers, L, i, j)
        want = _bfs_reachable(w, layers, i, j)
        assert got == want, (w, layers, L, i, j)


# ------------------------------------------------------------------ checkpoint


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    m = init_params(small_cfg(window=8, lora=LoraConfig(rank=2), mlp_mult=2))
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert back.config == m.config
    sd_a, sd_b = m.state_dict(), back.state_dict()
    assert sd_a.keys() == sd_b.keys()
    for k in sd_a:
        assert torch.equal(sd_a[k], sd_b[k]), k


def test_checkpoint_magic_string(tmp_path):
    m = init_params(small_cfg())
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    assert path.read_bytes()[: len(CHECKPOINT_MAGIC)] == CHECKPOINT_MAGIC


def test_checkpoint_same_model_same_bytes(tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(init_params(small_cfg(seed=3)), a)
    save_checkpoint(init_params(small_cfg(seed=3)), b)
    assert a.read_bytes() == b.read_bytes()


def test_load_rejects_corrupt_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT99" + b"\x00" * 50)
    with pytest.raises(ValueError):
        load_checkpoint(path)
