"""
Transformer decoder producing one context vector per input slot.

Input layout: [condition prefix (P slots)] [BOS] [tokens ...]. Each token is
summed with a content positional embedding (where it sits) and, optionally,
a target positional embedding (which position it must predict). Outputs at
the prefix slots are discarded.
"""
import logging
import dataclasses

import numpy as np
import torch
import torch.nn as nn

import numerics
from diffusion import DiffusionHead, HeadConfig
from errors import ArgumentError, DimensionError, RangeError

logger = logging.getLogger(__name__)

ATTENTION_MODES = ("causal", "bidirectional")
TASKS = ("ntp", "mntp", "mar")


@dataclasses.dataclass
class ModelConfig:
    layers: int = 4
    hidden: int = 128
    heads: int = 4
    max_len: int = 256
    token_dim: int = 4
    cond_dim: int = 8
    prefix_len: int = 2
    attention: str = "causal"
    target_pos_emb: bool = True
    mlp_ratio: float = 4.0

    @property
    def positions(self) -> int:
        # 0 = BOS, 1..max_len = tokens, max_len + 1 = past-the-end target
        return self.max_len + 2

    @property
    def mlp_hidden(self) -> int:
        return int(self.hidden * self.mlp_ratio)

    def validate(self):
        if self.layers < 0 or self.heads < 1 or self.hidden < 1:
            raise ArgumentError(f"invalid model size in {self}")
        if self.hidden % self.heads:
            raise ArgumentError(f"hidden dim {self.hidden} is not divisible by {self.heads} heads")
        if self.attention not in ATTENTION_MODES:
            raise ArgumentError(f"attention must be one of {ATTENTION_MODES}, got '{self.attention}'")
        if self.prefix_len < 0 or self.max_len < 1:
            raise ArgumentError("prefix length must be >= 0 and max length >= 1")
        return self


MODEL_PRESETS = {
    "mini": dict(layers=4, hidden=128, heads=4),
    "small": dict(layers=8, hidden=256, heads=8),
    "base": dict(layers=24, hidden=768, heads=12),
    "large": dict(layers=32, hidden=1024, heads=16),
}


def model_preset(name: str, **overrides) -> ModelConfig:
    if name not in MODEL_PRESETS:
        raise ArgumentError(f"unknown model preset '{name}'; expected one of {sorted(MODEL_PRESETS)}")
    return ModelConfig(**{**MODEL_PRESETS[name], **overrides}).validate()


def parameter_count(cfg: ModelConfig) -> int:
    """Decoder parameter count as a closed form of the config."""
    d, m = cfg.hidden, cfg.mlp_hidden
    count = cfg.token_dim * d + d  # token projection
    count += cfg.cond_dim * d + d  # condition projection
    count += d + d  # BOS, pad embedding
    count += cfg.prefix_len * cfg.cond_dim  # fake latent
    count += cfg.positions * d * (2 if cfg.target_pos_emb else 1)
    per_block = 4 * d * d + 2 * d * m + 9 * d + m
    count += cfg.layers * per_block
    if cfg.layers > 0:
        count += 2 * d
    return count


class _Fake:
    def __repr__(self):
        return "FAKE"


# Stands in for a condition when the fake latent should be used.
FAKE = _Fake()


# =============================================================================
# BLOCKS
# =============================================================================
class SelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.heads = cfg.heads
        self.head_dim = cfg.hidden // cfg.heads
        self.qkv = nn.Linear(cfg.hidden, 3 * cfg.hidden)
        self.proj = nn.Linear(cfg.hidden, cfg.hidden)

    def forward(self, x, mask=None, past=None):
        """``mask`` is a boolean (.., q, k) keep-mask; ``past`` is cached (k, v)."""
        B, N, C = x.shape
        q, k, v = self.qkv(x).split(C, dim=2)
        q = q.view(B, N, self.heads, self.head_dim).transpose(1, 2)
        k = k.view(B, N, self.heads, self.head_dim).transpose(1, 2)
        v = v.view(B, N, self.heads, self.head_dim).transpose(1, 2)
        if past is not None:
            k = torch.cat([past[0], k], dim=2)
            v = torch.cat([past[1], v], dim=2)
        att = numerics.matmul(q, k.transpose(-2, -1)) * (self.head_dim ** -0.5)
        if mask is not None:
            att = att.masked_fill(~mask, float("-inf"))
        y = numerics.matmul(numerics.softmax(att), v)
        y = y.transpose(1, 2).contiguous().view(B, N, C)
        return self.proj(y), (k, v)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln_1 = nn.LayerNorm(cfg.hidden, eps=numerics.LAYERNORM_EPS)
        self.attn = SelfAttention(cfg)
        self.ln_2 = nn.LayerNorm(cfg.hidden, eps=numerics.LAYERNORM_EPS)
        self.fc = nn.Linear(cfg.hidden, cfg.mlp_hidden)
        self.out = nn.Linear(cfg.mlp_hidden, cfg.hidden)

    def forward(self, x, mask=None, past=None):
        a, kv = self.attn(self.ln_1(x), mask, past)
        x = x + a
        x = x + self.out(numerics.gelu(self.fc(self.ln_2(x))))
        return x, kv


def attention_mask(n: int, causal: bool, key_valid: torch.Tensor = None) -> torch.Tensor:
    """Boolean keep-mask of shape (B or 1, 1, n, n)."""
    mask = torch.ones(n, n, dtype=torch.bool)
    if causal:
        mask = torch.tril(mask)
    mask = mask[None, None]
    if key_valid is not None:
        eye = torch.eye(n, dtype=torch.bool)[None, None]
        mask = (mask & key_valid[:, None, None, :]) | eye
    return mask


class KVCache:
    """Per-layer keys and values of every slot decoded so far."""

    def __init__(self, layers: int):
        self.layers = [None] * layers
        self.length = 0


# =============================================================================
# DECODER
# =============================================================================
class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg.validate()
        d = cfg.hidden
        self.token_proj = nn.Linear(cfg.token_dim, d)
        self.cond_proj = nn.Linear(cfg.cond_dim, d)
        self.bos = nn.Parameter(torch.zeros(d))
        self.pad_embedding = nn.Parameter(torch.zeros(d))
        self.fake_latent = nn.Parameter(torch.zeros(cfg.prefix_len, cfg.cond_dim))
        self.content_pos = nn.Parameter(torch.zeros(cfg.positions, d))
        if cfg.target_pos_emb:
            self.target_pos = nn.Parameter(torch.zeros(cfg.positions, d))
        else:
            self.register_parameter("target_pos", None)
        self.blocks = nn.ModuleList([Block(cfg) for _ in range(cfg.layers)])
        self.ln_f = nn.LayerNorm(d, eps=numerics.LAYERNORM_EPS) if cfg.layers > 0 else nn.Identity()

    def initialize_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        for p in (self.bos, self.pad_embedding, self.fake_latent, self.content_pos, self.target_pos):
            if p is not None:
                nn.init.normal_(p, std=0.02)

    @property
    def causal(self) -> bool:
        return self.cfg.attention == "causal"

    def condition_prefix(self, conditions) -> torch.Tensor:
        """
        Embed one condition per sequence into P prefix slots.

        Conditions longer than P are truncated, shorter ones are padded with
        the pad embedding, and FAKE selects the learned fake latent.
        """
        P, d = self.cfg.prefix_len, self.cfg.hidden
        dtype = self.content_pos.dtype
        rows = []
        for cond in conditions:
            if cond is FAKE:
                rows.append(self.cond_proj(self.fake_latent))
                continue
            cond = torch.as_tensor(np.asarray(cond), dtype=dtype)
            if cond.dim() != 2:
                raise DimensionError(f"condition must be (length, dim), got {tuple(cond.shape)}")
            cond = cond[:P]
            if cond.shape[0] and cond.shape[1] != self.cfg.cond_dim:
                raise DimensionError(f"condition dim {cond.shape[1]} != configured {self.cfg.cond_dim}")
            parts = [self.cond_proj(cond)] if cond.shape[0] else []
            if cond.shape[0] < P:
                parts.append(self.pad_embedding.expand(P - cond.shape[0], d))
            rows.append(torch.cat(parts, dim=0) if parts else self.pad_embedding.new_zeros(0, d))
        return torch.stack(rows, dim=0)

    def _check_indices(self, content_idx, target_idx, bos_target):
        if content_idx.numel() and (int(content_idx.min()) < 0 or int(content_idx.max()) > self.cfg.max_len):
            raise RangeError(f"content index outside 0..{self.cfg.max_len}")
        for idx in (target_idx, bos_target):
            if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) > self.cfg.max_len + 1):
                raise RangeError(f"target index outside 0..{self.cfg.max_len + 1}")

    def _embed_bos(self, bos_target):
        x = self.bos + self.content_pos[0]
        x = x.expand(bos_target.shape[0], -1)
        if self.target_pos is not None:
            x = x + self.target_pos[bos_target]
        return x.unsqueeze(1)

    def _embed_tokens(self, tokens, content_idx, target_idx):
        x = numerics.add(self.token_proj(tokens), self.content_pos[content_idx])
        if self.target_pos is not None:
            x = x + self.target_pos[target_idx]
        return x

    def encode_context(self, prefix, tokens, content_idx, target_idx, bos_target, causal=None,
                       valid=None) -> torch.Tensor:
        """
        Run the decoder and return z of shape (B, 1 + k, hidden): slot 0 is
        the BOS slot, slot j the j-th input token.

        ``valid`` (B, k) marks real tokens when a batch is right-padded.
        """
        B, k = tokens.shape[0], tokens.shape[1]
        if content_idx.shape != (B, k) or target_idx.shape != (B, k) or bos_target.shape != (B,):
            raise DimensionError("tokens, content and target indices must agree in shape")
        if tokens.shape[-1] != self.cfg.token_dim:
            raise DimensionError(f"token dim {tokens.shape[-1]} != configured {self.cfg.token_dim}")
        if k > self.cfg.max_len:
            raise RangeError(f"{k} tokens exceed max length {self.cfg.max_len}")
        self._check_indices(content_idx, target_idx, bos_target)

        P = prefix.shape[1]
        x = torch.cat([prefix, self._embed_bos(bos_target), self._embed_tokens(tokens, content_idx, target_idx)], dim=1)
        key_valid = None
        if valid is not None:
            key_valid = torch.cat([torch.ones(B, P + 1, dtype=torch.bool), valid.to(torch.bool)], dim=1)
        mask = attention_mask(x.shape[1], self.causal if causal is None else causal, key_valid)
        for block in self.blocks:
            x, _ = block(x, mask)
        return self.ln_f(x)[:, P:]

    # causal decoding with cached keys/values
    def start_cache(self, prefix, bos_target):
        """Encode prefix + BOS; returns (cache, z at the BOS slot)."""
        if not self.causal:
            raise ArgumentError("key/value caching needs causal attention")
        self._check_indices(bos_target[:0], bos_target[:0], bos_target)
        x = torch.cat([prefix, self._embed_bos(bos_target)], dim=1)
        cache = KVCache(len(self.blocks))
        mask = attention_mask(x.shape[1], causal=True)
        for i, block in enumerate(self.blocks):
            x, cache.layers[i] = block(x, mask)
        cache.length = x.shape[1]
        return cache, self.ln_f(x)[:, -1]

    def extend_cache(self, cache: KVCache, token, content_idx, target_idx):
        """Append one token per sequence and return its z."""
        self._check_indices(content_idx, target_idx, target_idx[:0])
        x = self._embed_tokens(token.unsqueeze(1), content_idx.unsqueeze(1), target_idx.unsqueeze(1))
        for i, block in enumerate(self.blocks):
            x, cache.layers[i] = block(x, None, cache.layers[i])
        cache.length += 1
        return self.ln_f(x)[:, -1]


class ModelState(nn.Module):
    """Decoder plus diffusion head, tagged with the task they were trained for."""

    def __init__(self, model_cfg: ModelConfig, head_cfg: HeadConfig, task: str = "mntp"):
        super().__init__()
        if task not in TASKS:
            raise ArgumentError(f"task must be one of {TASKS}, got '{task}'")
        if head_cfg.token_dim != model_cfg.token_dim:
            raise DimensionError(f"head token dim {head_cfg.token_dim} != decoder token dim {model_cfg.token_dim}")
        self.model_cfg = model_cfg
        self.head_cfg = head_cfg
        self.task = task
        self.decoder = Decoder(model_cfg)
        self.head = DiffusionHead(head_cfg, model_cfg.hidden)

    def initialize_weights(self):
        self.decoder.initialize_weights()
        self.head.initialize_weights()

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())
