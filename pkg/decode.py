"""
Sequence generation.

Causal models decode left to right, one token per step, with a guidance
scale annealed linearly from w0 at the first position to 1 at the last.
MAR models start from an all-zero input and, each round, sample the masked
slots bidirectionally and keep a cosine-scheduled number of them.
"""
import math
import logging
import dataclasses

import numpy as np
import torch

from codec import TokenSequence
from diffusion import sample_token, schedule_for
from errors import ArgumentError, CapabilityError, NumericError, RangeError
from model import FAKE, ModelState

logger = logging.getLogger(__name__)

ORDERS = ("causal", "random", "left-to-right")


@dataclasses.dataclass
class DecodingPolicy:
    order: str = "causal"
    steps: int = None  # rounds for random / left-to-right order; causal always uses n
    cfg_scale: float = 7.0
    temperature: float = 1.0
    n: int = 32
    cfg: bool = True
    diffusion_steps: int = 100
    use_cache: bool = True

    def validate(self):
        if self.order not in ORDERS:
            raise ArgumentError(f"order must be one of {ORDERS}, got '{self.order}'")
        if self.cfg_scale < 1:
            raise ArgumentError(f"cfg scale must be >= 1, got {self.cfg_scale}")
        if self.temperature < 0:
            raise ArgumentError(f"temperature must be >= 0, got {self.temperature}")
        if self.n < 1 or self.diffusion_steps < 1:
            raise ArgumentError("sequence length and diffusion steps must be positive")
        if self.order == "causal" and self.steps not in (None, self.n):
            raise ArgumentError(f"causal decoding always takes n={self.n} steps, got {self.steps}")
        if self.steps is not None and not 1 <= self.steps <= self.n:
            raise ArgumentError(f"steps must lie in 1..{self.n}, got {self.steps}")
        return self

    @property
    def rounds(self) -> int:
        return self.n if self.steps is None else self.steps


def cfg_scale(i: int, n: int, w0: float) -> float:
    """w_i = 1 + (w0 - 1)(1 - (i - 1)/(n - 1))"""
    if n < 2:
        raise ArgumentError(f"guidance annealing needs n >= 2, got {n}")
    if not 1 <= i <= n:
        raise ArgumentError(f"position {i} outside 1..{n}")
    return 1.0 + (w0 - 1.0) * (1.0 - (i - 1) / (n - 1))


def _scale(i: int, n: int, w0: float) -> float:
    return w0 if n == 1 else cfg_scale(i, n, w0)


def retention_schedule(n: int, steps: int) -> list:
    """Tokens newly retained per round; sums to n and every round keeps at least one."""
    if not 1 <= steps <= n:
        raise ArgumentError(f"steps must lie in 1..{n}, got {steps}")
    counts, remaining = [], n
    for s in range(steps):
        if s == steps - 1:
            counts.append(remaining)
            break
        still_masked = math.floor(n * math.cos(math.pi / 2.0 * (s + 1) / steps))
        still_masked = max(steps - s - 1, min(remaining - 1, still_masked))
        counts.append(remaining - still_masked)
        remaining = still_masked
    return counts


def _lanes(rng, batch: int) -> list:
    return [rng.stream(f"lane-{b}") for b in range(batch)]


def _guided(policy: DecodingPolicy, conditions) -> bool:
    return policy.cfg and any(c is not FAKE for c in conditions)


def _to_sequences(tokens: torch.Tensor, conditions) -> list:
    out = []
    for b, cond in enumerate(conditions):
        out.append(TokenSequence(
            tokens=tokens[b].cpu().numpy().astype(np.float32),
            condition=None if cond is FAKE else np.asarray(cond, dtype=np.float32),
            source_id=f"sample-{b}",
        ))
    return out


def _sample(model, z, sched, lanes, policy, z_u, w, position):
    try:
        return sample_token(model.head, z, sched, lanes, tau=policy.temperature,
                            cfg=(z_u, w) if z_u is not None else None)
    except NumericError as e:
        raise NumericError(f"non-finite token at position {position}: {e}", step=e.step, position=position) from e


# =============================================================================
# CAUSAL DECODING
# =============================================================================
@torch.no_grad()
def decode_causal_batch(model: ModelState, conditions: list, n: int, policy: DecodingPolicy, rng) -> list:
    """Decode one sequence per condition; lane b draws from ``rng.stream("lane-b")``."""
    if model.task == "mar" or not model.decoder.causal:
        raise CapabilityError(f"causal decoding needs a causal ntp/mntp model, got task '{model.task}'")
    if n > model.model_cfg.max_len:
        raise RangeError(f"length {n} exceeds max length {model.model_cfg.max_len}")
    dataclasses.replace(policy, n=n).validate()
    decoder = model.decoder
    sched = schedule_for(model.head_cfg, policy.diffusion_steps)
    B, h = len(conditions), model.model_cfg.token_dim
    lanes = _lanes(rng, B)
    guided = _guided(policy, conditions)

    prefix_c = decoder.condition_prefix(conditions)
    prefix_u = decoder.condition_prefix([FAKE] * B) if guided else None
    bos = torch.ones(B, dtype=torch.long)
    tokens = torch.zeros(B, n, h)

    if policy.use_cache:
        cache_c, z_c = decoder.start_cache(prefix_c, bos)
        cache_u, z_u = decoder.start_cache(prefix_u, bos) if guided else (None, None)
    for i in range(1, n + 1):
        if not policy.use_cache:
            content = torch.arange(1, i, dtype=torch.long).expand(B, -1)
            past = tokens[:, : i - 1]
            z_c = decoder.encode_context(prefix_c, past, content, content + 1, bos)[:, -1]
            z_u = decoder.encode_context(prefix_u, past, content, content + 1, bos)[:, -1] if guided else None
        x = _sample(model, z_c, sched, lanes, policy, z_u, _scale(i, n, policy.cfg_scale), i)
        tokens[:, i - 1] = x
        if policy.use_cache and i < n:
            content = torch.full((B,), i, dtype=torch.long)
            z_c = decoder.extend_cache(cache_c, x, content, content + 1)
            if guided:
                z_u = decoder.extend_cache(cache_u, x, content, content + 1)
    return _to_sequences(tokens, conditions)


def decode_causal(model: ModelState, condition, n: int, policy: DecodingPolicy, rng) -> TokenSequence:
    return decode_causal_batch(model, [condition], n, policy, rng)[0]


# =============================================================================
# RANDOM-ORDER (MAR) DECODING
# =============================================================================
@torch.no_grad()
def decode_random_order_batch(model: ModelState, conditions: list, n: int, steps: int,
                              policy: DecodingPolicy, rng) -> list:
    """
    Iterative unmasking from an all-zero input. ``policy.order`` is
    "random" for a random retention order or "left-to-right" for the
    identity order.
    """
    if model.task != "mar":
        raise CapabilityError(f"random-order decoding needs a model trained with task 'mar', got '{model.task}'")
    if n > model.model_cfg.max_len:
        raise RangeError(f"length {n} exceeds max length {model.model_cfg.max_len}")
    counts = retention_schedule(n, steps)
    decoder = model.decoder
    sched = schedule_for(model.head_cfg, policy.diffusion_steps)
    B, h = len(conditions), model.model_cfg.token_dim
    lanes = _lanes(rng, B)
    guided = _guided(policy, conditions)

    if policy.order == "left-to-right":
        orders = [np.arange(n) for _ in range(B)]
    else:
        orders = [lane.stream("order").permutation(n) for lane in lanes]
    prefix_c = decoder.condition_prefix(conditions)
    prefix_u = decoder.condition_prefix([FAKE] * B) if guided else None
    positions = torch.arange(1, n + 1, dtype=torch.long).expand(B, -1)
    bos = torch.zeros(B, dtype=torch.long)
    tokens = torch.zeros(B, n, h)

    done = 0
    for count in counts:
        z_c = decoder.encode_context(prefix_c, tokens, positions, positions, bos, causal=False)[:, 1:]
        z_u = decoder.encode_context(prefix_u, tokens, positions, positions, bos, causal=False)[:, 1:] if guided else None
        rows = torch.arange(B).repeat_interleave(count)
        cols = torch.from_numpy(np.concatenate([o[done:done + count] for o in orders]).astype(np.int64))
        row_lanes = [lanes[b] for b in rows.tolist()]
        x = _sample(model, z_c[rows, cols], sched, row_lanes, policy,
                    z_u[rows, cols] if guided else None, _scale(done + 1, n, policy.cfg_scale), done + 1)
        tokens[rows, cols] = x
        done += count
    return _to_sequences(tokens, conditions)


def decode_random_order(model: ModelState, condition, n: int, steps: int, policy: DecodingPolicy, rng) -> TokenSequence:
    return decode_random_order_batch(model, [condition], n, steps, policy, rng)[0]


def decode(model: ModelState, conditions: list, policy: DecodingPolicy, rng) -> list:
    """Dispatch on ``policy.order``."""
    policy.validate()
    if policy.order == "causal":
        return decode_causal_batch(model, conditions, policy.n, policy, rng)
    return decode_random_order_batch(model, conditions, policy.n, policy.rounds, policy, rng)
