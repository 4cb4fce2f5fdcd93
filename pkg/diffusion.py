"""
Token-wise diffusion head: noise schedule, denoising loss and reverse sampler.

The head is a small residual MLP with adaLN conditioning. It predicts the
noise added to a single token given the decoder's context vector ``z`` and
the timestep, and is trained with the epsilon-prediction objective.
"""
import math
import logging
import dataclasses

import numpy as np
import torch
import torch.nn as nn

import numerics
from errors import ArgumentError, DimensionError, NumericError, RangeError

logger = logging.getLogger(__name__)

VARIANCES = ("lower", "upper")


@dataclasses.dataclass
class HeadConfig:
    layers: int = 3
    width: int = 256
    token_dim: int = 4
    time_dim: int = 64
    train_steps: int = 1000
    variance: str = "lower"
    max_beta: float = 0.999
    min_alpha_bar: float = 1e-3
    zero_init_final: bool = True

    def validate(self):
        if self.layers < 1:
            raise ArgumentError(f"head needs at least one residual layer, got {self.layers}")
        if self.time_dim % 2:
            raise ArgumentError(f"time embedding dim must be even, got {self.time_dim}")
        if self.variance not in VARIANCES:
            raise ArgumentError(f"variance must be one of {VARIANCES}, got '{self.variance}'")
        if not 0.0 <= self.min_alpha_bar < 0.01:
            raise ArgumentError(f"min_alpha_bar must lie in [0, 0.01), got {self.min_alpha_bar}")
        return self


# =============================================================================
# NOISE SCHEDULE
# =============================================================================
@dataclasses.dataclass(frozen=True)
class NoiseSchedule:
    """
    Tables indexed by t = 0..T with alpha_bar[0] = 1.

    ``steps`` is the ascending list of timesteps the reverse sampler visits;
    the sampler walks it from the last entry down to the first.
    """
    alpha_bar: np.ndarray
    steps: tuple
    variance: str = "lower"

    @property
    def train_steps(self) -> int:
        return len(self.alpha_bar) - 1

    @property
    def alpha(self) -> np.ndarray:
        return np.concatenate([[1.0], self.alpha_bar[1:] / self.alpha_bar[:-1]])

    @classmethod
    def from_alpha_bar(cls, alpha_bar, inference_steps: int = None, variance: str = "lower"):
        alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
        if alpha_bar.ndim != 1 or alpha_bar.size < 2 or alpha_bar[0] != 1.0:
            raise ArgumentError("alpha_bar must start at 1 and cover at least one step")
        if np.any(alpha_bar <= 0) or np.any(alpha_bar > 1) or np.any(np.diff(alpha_bar) > 0):
            raise ArgumentError("alpha_bar must be non-increasing inside (0, 1]")
        sched = cls(alpha_bar=alpha_bar, steps=tuple(range(1, alpha_bar.size)), variance=variance)
        return sched.respaced(inference_steps) if inference_steps else sched

    @classmethod
    def cosine(cls, train_steps: int = 1000, s: float = 0.008, max_beta: float = 0.999,
               inference_steps: int = 100, variance: str = "lower", min_alpha_bar: float = 1e-3):
        """
        Cosine schedule with alpha_bar lifted affinely onto [min_alpha_bar, 1],
        which keeps the first strided reverse step's alpha' away from zero.
        alpha_bar stays strictly decreasing with alpha_bar_T < 0.01.
        """
        if not 0.0 <= min_alpha_bar < 0.01:
            raise ArgumentError(f"min_alpha_bar must lie in [0, 0.01), got {min_alpha_bar}")
        t = np.arange(train_steps + 1, dtype=np.float64)
        f = np.cos((t / train_steps + s) / (1.0 + s) * math.pi / 2.0) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], 0.0, max_beta)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        alpha_bar = min_alpha_bar + (1.0 - min_alpha_bar) * alpha_bar
        steps = min(inference_steps, train_steps) if inference_steps else None
        return cls.from_alpha_bar(alpha_bar, steps, variance)

    def respaced(self, count: int) -> "NoiseSchedule":
        """Evenly strided sub-schedule of ``count`` steps ending at T."""
        T = self.train_steps
        if not 1 <= count <= T:
            raise ArgumentError(f"inference steps must lie in 1..{T}, got {count}")
        steps = tuple(int(math.floor(T * j / count + 0.5)) for j in range(1, count + 1))
        return dataclasses.replace(self, steps=steps)

    def reverse_coefficients(self, k: int):
        """(t, alpha', sigma) for the k-th entry of ``steps``."""
        t = self.steps[k]
        t_prev = self.steps[k - 1] if k > 0 else 0
        ab_t, ab_prev = self.alpha_bar[t], self.alpha_bar[t_prev]
        alpha = ab_t / ab_prev
        if k == 0:
            sigma = 0.0
        elif self.variance == "lower":
            sigma = math.sqrt((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - alpha))
        else:
            sigma = math.sqrt(1.0 - alpha)
        return t, alpha, sigma


def schedule_for(head_cfg: HeadConfig, inference_steps: int = 100) -> NoiseSchedule:
    """Cosine training schedule of a head, respaced to ``inference_steps`` for sampling."""
    return NoiseSchedule.cosine(head_cfg.train_steps, max_beta=head_cfg.max_beta, inference_steps=inference_steps,
                                variance=head_cfg.variance, min_alpha_bar=head_cfg.min_alpha_bar)


def _as_timesteps(t, batch: int) -> torch.Tensor:
    if isinstance(t, torch.Tensor):
        return t.to(torch.long).reshape(-1).expand(batch) if t.numel() == 1 else t.to(torch.long)
    return torch.full((batch,), int(t), dtype=torch.long)


def forward_diffuse(x: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(alpha_bar_t) x + sqrt(1 - alpha_bar_t) eps"""
    if tuple(x.shape) != tuple(eps.shape):
        raise DimensionError(f"token {tuple(x.shape)} and noise {tuple(eps.shape)} differ")
    rows = x.shape[0] if x.dim() > 1 else 1
    tt = _as_timesteps(t, rows)
    if int(tt.min()) < 1 or int(tt.max()) > sched.train_steps:
        raise RangeError(f"timestep outside 1..{sched.train_steps}")
    ab = torch.as_tensor(sched.alpha_bar, dtype=x.dtype)[tt]
    if x.dim() > 1:
        ab = ab.unsqueeze(-1)
    else:
        ab = ab.reshape(())
    return torch.sqrt(ab) * x + torch.sqrt(1.0 - ab) * eps


# =============================================================================
# HEAD
# =============================================================================
def modulate(x, shift, scale):
    return x * (1 + scale) + shift


class TimestepEmbedder(nn.Module):
    def __init__(self, width: int, freq_dim: int):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, width), nn.SiLU(), nn.Linear(width, width))

    def sinusoid(self, t: torch.Tensor) -> torch.Tensor:
        half = self.freq_dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.get_default_dtype()) / half)
        args = t.to(freqs.dtype)[:, None] * freqs[None]
        return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)

    def forward(self, t):
        return self.mlp(self.sinusoid(t))


class ResBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(width, 3 * width))

    def forward(self, x, c):
        shift, scale, gate = self.adaLN_modulation(c).chunk(3, dim=-1)
        h = modulate(numerics.layernorm(x), shift, scale)
        return x + gate * self.mlp(h)


class FinalLayer(nn.Module):
    def __init__(self, width: int, out_dim: int):
        super().__init__()
        self.linear = nn.Linear(width, out_dim)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(width, 2 * width))

    def forward(self, x, c):
        shift, scale = self.adaLN_modulation(c).chunk(2, dim=-1)
        return self.linear(modulate(numerics.layernorm(x), shift, scale))


class DiffusionHead(nn.Module):
    """Predicts eps from (x_t, t, z)."""

    def __init__(self, cfg: HeadConfig, z_dim: int):
        super().__init__()
        self.cfg = cfg.validate()
        self.z_dim = z_dim
        self.time_embed = TimestepEmbedder(cfg.width, cfg.time_dim)
        self.cond_embed = nn.Linear(z_dim, cfg.width)
        self.input_proj = nn.Linear(cfg.token_dim, cfg.width)
        self.res_blocks = nn.ModuleList([ResBlock(cfg.width) for _ in range(cfg.layers)])
        self.final_layer = FinalLayer(cfg.width, cfg.token_dim)

    def initialize_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.time_embed.mlp[0].weight, std=0.02)
        nn.init.normal_(self.time_embed.mlp[2].weight, std=0.02)
        for block in self.res_blocks:
            nn.init.zeros_(block.adaLN_modulation[-1].weight)
            nn.init.zeros_(block.adaLN_modulation[-1].bias)
        if self.cfg.zero_init_final:
            nn.init.zeros_(self.final_layer.adaLN_modulation[-1].weight)
            nn.init.zeros_(self.final_layer.adaLN_modulation[-1].bias)
            nn.init.zeros_(self.final_layer.linear.weight)
            nn.init.zeros_(self.final_layer.linear.bias)

    def forward(self, x_t: torch.Tensor, t, z: torch.Tensor) -> torch.Tensor:
        if x_t.shape[-1] != self.cfg.token_dim or z.shape[-1] != self.z_dim:
            raise DimensionError(
                f"head expects tokens of dim {self.cfg.token_dim} and z of dim {self.z_dim}, "
                f"got {tuple(x_t.shape)} and {tuple(z.shape)}"
            )
        tt = _as_timesteps(t, x_t.shape[0])
        c = numerics.add(self.time_embed(tt), self.cond_embed(z))
        x = self.input_proj(x_t)
        for block in self.res_blocks:
            x = block(x, c)
        return self.final_layer(x, c)


# =============================================================================
# LOSS & SAMPLING
# =============================================================================
def head_loss(head: DiffusionHead, z: torch.Tensor, x: torch.Tensor, rng, sched: NoiseSchedule,
              t=None, eps=None, reduction: str = "mean") -> torch.Tensor:
    """
    Squared error between eps and the head's prediction, summed over token
    dims. t ~ U{1..T} comes from the "diffusion-t" stream and eps ~ N(0, I)
    from the "noise" stream unless given.
    """
    if x.dim() != 2 or z.dim() != 2 or x.shape[0] != z.shape[0]:
        raise DimensionError(f"expected (B, h) tokens and (B, d) contexts, got {tuple(x.shape)} and {tuple(z.shape)}")
    batch = x.shape[0]
    if t is None:
        t = torch.from_numpy(np.asarray(rng.stream("diffusion-t").integers(1, sched.train_steps + 1, size=batch)))
    if eps is None:
        eps = rng.stream("noise").normal(tuple(x.shape), dtype=x.dtype)
    x_t = forward_diffuse(x, t, eps, sched)
    per_row = ((head(x_t, t, z) - eps) ** 2).sum(dim=-1)
    if reduction == "none":
        return per_row
    return per_row.mean()


@torch.no_grad()
def sample_token(head: DiffusionHead, z: torch.Tensor, sched: NoiseSchedule, rng, tau: float = 1.0,
                 cfg=None) -> torch.Tensor:
    """
    Reverse-diffuse one token per row of ``z``.

    ``rng`` is an Rng or one Rng per row. ``cfg`` is ``(z_uncond, w)`` and
    combines eps = eps_c + w (eps_c - eps_u).
    """
    if not sched.steps:
        raise ArgumentError("inference schedule has no steps")
    if tau < 0:
        raise ArgumentError(f"temperature must be >= 0, got {tau}")
    if cfg is not None:
        z_uncond, w = cfg
        if w < 1:
            raise ArgumentError(f"guidance scale must be >= 1, got {w}")
        if tuple(z_uncond.shape) != tuple(z.shape):
            raise DimensionError(f"unconditional context {tuple(z_uncond.shape)} differs from {tuple(z.shape)}")

    batch, h = z.shape[0], head.cfg.token_dim
    x = numerics.normal_rows(rng, (batch, h), dtype=z.dtype)
    for k in reversed(range(len(sched.steps))):
        t, alpha, sigma = sched.reverse_coefficients(k)
        eps = head(x, t, z)
        if cfg is not None:
            eps = eps + w * (eps - head(x, t, z_uncond))
        ab_t = sched.alpha_bar[t]
        x = (x - ((1.0 - alpha) / math.sqrt(1.0 - ab_t)) * eps) / math.sqrt(alpha)
        if k > 0:
            x = x + (sigma * tau) * numerics.normal_rows(rng, (batch, h), dtype=z.dtype)
        if not torch.isfinite(x).all():
            raise NumericError(f"non-finite token at reverse step t={t}", step=t)
    return x
