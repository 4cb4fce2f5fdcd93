import numpy as np
import pytest
import torch

from diffusion import HeadConfig
from errors import ArgumentError, DimensionError, RangeError
from model import FAKE, MODEL_PRESETS, Decoder, ModelConfig, ModelState, model_preset, parameter_count


def _decoder(cfg: ModelConfig) -> Decoder:
    decoder = Decoder(cfg)
    decoder.initialize_weights()
    decoder.eval()
    return decoder


def _inputs(cfg: ModelConfig, k: int, batch: int = 2, seed: int = 0):
    g = torch.Generator().manual_seed(seed)
    tokens = torch.randn(batch, k, cfg.token_dim, generator=g)
    content = torch.arange(1, k + 1).repeat(batch, 1)
    conds = [torch.randn(cfg.prefix_len, cfg.cond_dim, generator=g).numpy() for _ in range(batch)]
    return tokens, content, conds


def test_hidden_must_divide_by_heads():
    with pytest.raises(ArgumentError):
        ModelConfig(hidden=30, heads=4).validate()
    with pytest.raises(ArgumentError):
        ModelConfig(attention="sideways").validate()


def test_presets():
    cfg = model_preset("mini")
    assert (cfg.layers, cfg.hidden, cfg.heads) == (4, 128, 4)
    assert model_preset("small", max_len=64).max_len == 64
    assert set(MODEL_PRESETS) >= {"mini", "small", "base", "large"}
    with pytest.raises(ArgumentError):
        model_preset("huge")


def test_parameter_count_regression():
    assert parameter_count(model_preset("mini")) == 861456


@pytest.mark.parametrize("layers,target", [(0, True), (2, True), (2, False)])
def test_parameter_count_matches_modules(layers, target):
    cfg = ModelConfig(layers=layers, hidden=16, heads=2, max_len=10, target_pos_emb=target)
    assert sum(p.numel() for p in Decoder(cfg).parameters()) == parameter_count(cfg)


def test_positional_tables_cover_bos_and_sentinel(tiny_model_cfg):
    decoder = Decoder(tiny_model_cfg)
    assert decoder.content_pos.shape[0] == tiny_model_cfg.max_len + 2
    assert decoder.target_pos.shape == decoder.content_pos.shape


def test_zero_layer_context_is_embedding():
    cfg = ModelConfig(layers=0, hidden=8, heads=2, max_len=6, token_dim=3, cond_dim=4, prefix_len=2)
    decoder = _decoder(cfg)
    tokens, content, conds = _inputs(cfg, 4)
    target = content + 1
    bos_target = torch.ones(2, dtype=torch.long)
    with torch.no_grad():
        z = decoder.encode_context(decoder.condition_prefix(conds), tokens, content, target, bos_target)
        bos = decoder.bos + decoder.content_pos[0] + decoder.target_pos[1]
        emb = decoder.token_proj(tokens) + decoder.content_pos[content] + decoder.target_pos[target]
    assert z.shape == (2, 5, 8)
    torch.testing.assert_close(z[:, 0], bos.expand(2, -1))
    torch.testing.assert_close(z[:, 1:], emb)


def test_causal_context_ignores_later_tokens(tiny_model_cfg):
    decoder = _decoder(tiny_model_cfg)
    tokens, content, conds = _inputs(tiny_model_cfg, 6)
    prefix = decoder.condition_prefix(conds)
    bos_target = torch.ones(2, dtype=torch.long)
    with torch.no_grad():
        base = decoder.encode_context(prefix, tokens, content, content + 1, bos_target)
        for j in range(6):
            perturbed = tokens.clone()
            perturbed[:, j] += 5.0
            z = decoder.encode_context(prefix, perturbed, content, content + 1, bos_target)
            # slot j + 1 holds token j; slots up to j only see earlier tokens
            assert torch.equal(z[:, : j + 1], base[:, : j + 1])
            assert not torch.equal(z[:, j + 1], base[:, j + 1])


def test_zeroed_target_table_equals_no_target_embedding(tiny_model_cfg):
    with_target = _decoder(tiny_model_cfg)
    with torch.no_grad():
        with_target.target_pos.zero_()
    cfg_off = ModelConfig(**{**tiny_model_cfg.__dict__, "target_pos_emb": False})
    without = Decoder(cfg_off)
    state = {k: v for k, v in with_target.state_dict().items() if k != "target_pos"}
    without.load_state_dict(state)
    without.eval()
    tokens, content, conds = _inputs(tiny_model_cfg, 5)
    bos_target = torch.ones(2, dtype=torch.long)
    with torch.no_grad():
        a = with_target.encode_context(with_target.condition_prefix(conds), tokens, content, content + 1, bos_target)
        b = without.encode_context(without.condition_prefix(conds), tokens, content, content + 1, bos_target)
    assert torch.equal(a, b)


def test_bidirectional_without_positions_is_permutation_equivariant(tiny_model_cfg):
    cfg = ModelConfig(**{**tiny_model_cfg.__dict__, "attention": "bidirectional"})
    decoder = _decoder(cfg)
    with torch.no_grad():
        decoder.content_pos.zero_()
        decoder.target_pos.zero_()
    tokens, content, conds = _inputs(cfg, 6)
    perm = torch.tensor([3, 0, 5, 1, 4, 2])
    prefix = decoder.condition_prefix(conds)
    bos_target = torch.ones(2, dtype=torch.long)
    with torch.no_grad():
        z = decoder.encode_context(prefix, tokens, content, content + 1, bos_target)
        zp = decoder.encode_context(prefix, tokens[:, perm], content, content + 1, bos_target)
    torch.testing.assert_close(zp[:, 1:], z[:, 1:][:, perm], atol=1e-5, rtol=1e-5)
    torch.testing.assert_close(zp[:, 0], z[:, 0], atol=1e-5, rtol=1e-5)


def test_condition_prefix_variants(tiny_model_cfg):
    decoder = _decoder(tiny_model_cfg)
    P, d = tiny_model_cfg.prefix_len, tiny_model_cfg.hidden
    long_cond = np.random.default_rng(0).standard_normal((5, tiny_model_cfg.cond_dim)).astype(np.float32)
    with torch.no_grad():
        fake = decoder.condition_prefix([FAKE, FAKE])
        torch.testing.assert_close(fake[0], decoder.cond_proj(decoder.fake_latent))
        assert torch.equal(fake[0], fake[1])
        truncated = decoder.condition_prefix([long_cond])
        torch.testing.assert_close(truncated[0], decoder.cond_proj(torch.from_numpy(long_cond[:P])))
        empty = decoder.condition_prefix([np.zeros((0, 0), dtype=np.float32)])
        torch.testing.assert_close(empty[0], decoder.pad_embedding.expand(P, d))
        short = decoder.condition_prefix([long_cond[:1]])
        torch.testing.assert_close(short[0, 1], decoder.pad_embedding)
    with pytest.raises(DimensionError):
        decoder.condition_prefix([np.zeros((1, 3), dtype=np.float32)])


def test_index_overflow_raises(tiny_model_cfg):
    decoder = _decoder(tiny_model_cfg)
    tokens, content, conds = _inputs(tiny_model_cfg, 3, batch=1)
    prefix = decoder.condition_prefix(conds)
    with pytest.raises(RangeError):
        decoder.encode_context(prefix, tokens, content + tiny_model_cfg.max_len, content, torch.ones(1, dtype=torch.long))
    with pytest.raises(RangeError):
        decoder.encode_context(prefix, tokens, content, content + tiny_model_cfg.max_len + 5,
                               torch.ones(1, dtype=torch.long))
    with pytest.raises(DimensionError):
        decoder.encode_context(prefix, tokens, content[:, :2], content, torch.ones(1, dtype=torch.long))


def test_cached_path_matches_full_encoding(tiny_model_cfg):
    decoder = _decoder(tiny_model_cfg)
    tokens, content, conds = _inputs(tiny_model_cfg, 7)
    prefix = decoder.condition_prefix(conds)
    bos_target = torch.ones(2, dtype=torch.long)
    with torch.no_grad():
        full = decoder.encode_context(prefix, tokens, content, content + 1, bos_target)
        cache, z0 = decoder.start_cache(prefix, bos_target)
        steps = [z0]
        for j in range(7):
            steps.append(decoder.extend_cache(cache, tokens[:, j], content[:, j], content[:, j] + 1))
    torch.testing.assert_close(torch.stack(steps, dim=1), full, atol=1e-5, rtol=0)
    assert cache.length == tiny_model_cfg.prefix_len + 1 + 7


def test_cache_needs_causal_attention(tiny_model_cfg):
    decoder = _decoder(ModelConfig(**{**tiny_model_cfg.__dict__, "attention": "bidirectional"}))
    with pytest.raises(ArgumentError):
        decoder.start_cache(decoder.condition_prefix([FAKE]), torch.ones(1, dtype=torch.long))


def test_padding_mask_hides_invalid_keys(tiny_model_cfg):
    cfg = ModelConfig(**{**tiny_model_cfg.__dict__, "attention": "bidirectional"})
    decoder = _decoder(cfg)
    tokens, content, conds = _inputs(cfg, 5, batch=1)
    prefix = decoder.condition_prefix(conds)
    bos_target = torch.ones(1, dtype=torch.long)
    valid = torch.tensor([[True, True, True, False, False]])
    with torch.no_grad():
        short = decoder.encode_context(prefix, tokens[:, :3], content[:, :3], content[:, :3] + 1, bos_target)
        padded = decoder.encode_context(prefix, tokens, content, content + 1, bos_target, valid=valid)
    torch.testing.assert_close(padded[:, :4], short, atol=1e-5, rtol=1e-5)


def test_model_state_checks_token_dims(tiny_model_cfg):
    with pytest.raises(DimensionError):
        ModelState(tiny_model_cfg, HeadConfig(token_dim=3), "mntp")
    with pytest.raises(ArgumentError):
        ModelState(tiny_model_cfg, HeadConfig(token_dim=4), "bert")
    state = ModelState(tiny_model_cfg, HeadConfig(token_dim=4, width=8, time_dim=4, layers=1))
    assert state.parameter_count() == parameter_count(tiny_model_cfg) + sum(p.numel() for p in state.head.parameters())
