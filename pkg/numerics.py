"""
Tensor substrate shared by every module.

Differentiable ops are thin, shape-checked wrappers over torch so reverse-mode
gradients come from autograd. Randomness comes from counter-based Philox
generators keyed by ``(seed, stream)``: toggling one source of randomness
never shifts the draws of another.
"""
import math
import hashlib
import logging
import contextlib

import numpy as np
import torch
import torch.nn.functional as F

from errors import ArgumentError, DimensionError, NumericError

logger = logging.getLogger(__name__)

LAYERNORM_EPS = 1e-5


# =============================================================================
# Precision
# =============================================================================
@contextlib.contextmanager
def precision(dtype=torch.float64):
    """Temporarily switch torch's default dtype (64-bit is for gradient checks)."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


# =============================================================================
# Shape-checked ops
# =============================================================================
def _check_trailing(a: torch.Tensor, b: torch.Tensor, op: str):
    sa, sb = tuple(a.shape), tuple(b.shape)
    short, full = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if full[len(full) - len(short):] != short:
        raise DimensionError(f"{op}: shapes {sa} and {sb} differ in trailing dimensions")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents of {tuple(a.shape)} and {tuple(b.shape)} disagree")
    return torch.matmul(a, b)


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_trailing(a, b, "add")
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_trailing(a, b, "mul")
    return a * b


def silu(x: torch.Tensor) -> torch.Tensor:
    return F.silu(x)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def softmax(x: torch.Tensor) -> torch.Tensor:
    return torch.softmax(x, dim=-1)


def layernorm(x: torch.Tensor, weight: torch.Tensor = None, bias: torch.Tensor = None) -> torch.Tensor:
    """Normalise the last dimension; a constant row maps to zeros before the affine."""
    if weight is not None and tuple(weight.shape) != tuple(x.shape[-1:]):
        raise DimensionError(f"layernorm: weight {tuple(weight.shape)} does not match input {tuple(x.shape)}")
    return F.layer_norm(x, x.shape[-1:], weight, bias, LAYERNORM_EPS)


def mse(pred: torch.Tensor, target: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    if tuple(pred.shape) != tuple(target.shape):
        raise DimensionError(f"mse: prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    return F.mse_loss(pred, target, reduction=reduction)


# =============================================================================
# Seeded randomness
# =============================================================================
def stream_key(seed: int, stream: str) -> int:
    digest = hashlib.blake2b(f"{int(seed)}:{stream}".encode("utf-8"), digest_size=16).digest()
    return int.from_bytes(digest, "little")


def torch_seed(seed: int, stream: str) -> int:
    """A 63-bit seed for torch's global generator derived from (seed, stream)."""
    return stream_key(seed, stream) & ((1 << 63) - 1)


class Rng:
    """
    Named random stream over a counter-based Philox generator.

    ``stream(name)`` returns a persistent sub-stream (its position survives
    across calls and checkpoints); ``child(name)`` returns a fresh one that
    always starts at counter zero.
    """

    def __init__(self, seed: int, stream: str = "root"):
        self.seed = int(seed)
        self.name = stream
        self._bits = np.random.Philox(key=stream_key(self.seed, stream))
        self._gen = np.random.Generator(self._bits)
        self._streams = {}

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.name!r}, counter={self.counter})"

    @property
    def counter(self) -> int:
        return int(self._bits.state["state"]["counter"][0])

    def child(self, name: str) -> "Rng":
        return Rng(self.seed, f"{self.name}/{name}")

    def stream(self, name: str) -> "Rng":
        if name not in self._streams:
            self._streams[name] = self.child(name)
        return self._streams[name]

    # draws
    def normal(self, shape, dtype=None) -> torch.Tensor:
        draws = self._gen.standard_normal(size=tuple(shape), dtype=np.float64)
        return torch.from_numpy(draws).to(dtype or torch.get_default_dtype())

    def normal_array(self, shape) -> np.ndarray:
        return self._gen.standard_normal(size=tuple(shape), dtype=np.float64)

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size=size, dtype=np.float64)

    def random(self) -> float:
        return float(self._gen.random())

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    # persistence
    def get_state(self) -> dict:
        state = self._bits.state
        return {
            "seed": self.seed,
            "stream": self.name,
            "counter": [int(v) for v in state["state"]["counter"]],
            "key": [int(v) for v in state["state"]["key"]],
            "buffer": [int(v) for v in state["buffer"]],
            "buffer_pos": int(state["buffer_pos"]),
            "has_uint32": int(state["has_uint32"]),
            "uinteger": int(state["uinteger"]),
            "streams": {name: sub.get_state() for name, sub in self._streams.items()},
        }

    def set_state(self, state: dict):
        if state["seed"] != self.seed or state["stream"] != self.name:
            raise ArgumentError(f"state belongs to stream {state['stream']!r}, not {self.name!r}")
        self._bits.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(state["counter"], dtype=np.uint64),
                "key": np.array(state["key"], dtype=np.uint64),
            },
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": state["buffer_pos"],
            "has_uint32": state["has_uint32"],
            "uinteger": state["uinteger"],
        }
        self._streams = {}
        for name, sub_state in state.get("streams", {}).items():
            self.stream(name).set_state(sub_state)

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"], state["stream"])
        rng.set_state(state)
        return rng


def normal_rows(rng, shape, dtype=None) -> torch.Tensor:
    """
    Draw a (rows, ...) Gaussian block. ``rng`` is either one Rng or a list
    with one Rng per row, so each sequence lane consumes its own stream.
    """
    if isinstance(rng, Rng):
        return rng.normal(shape, dtype)
    if len(rng) != shape[0]:
        raise DimensionError(f"{len(rng)} lanes for {shape[0]} rows")
    return torch.stack([lane.normal(shape[1:], dtype) for lane in rng], dim=0)


# =============================================================================
# Gradient checking
# =============================================================================
def grad_check(f, params, h: float = 1e-3, floor: float = 1e-3) -> float:
    """
    Compare reverse-mode gradients of the scalar ``f()`` with central
    differences (f(p+h) - f(p-h)) / 2h, coordinate by coordinate.

    Returns max |a - n| / max(|a|, |n|, floor * scale), where scale is the
    largest gradient magnitude over all coordinates. The floor keeps the
    O(h^2) difference error on near-zero coordinates from dominating; an
    error of size e on a coordinate is reported only as e / (floor * scale)
    there. ``floor=0`` gives the plain relative error.
    """
    params = list(params)
    loss = f()
    if not torch.isfinite(loss).all():
        raise NumericError(f"grad_check: non-finite loss {float(loss)}")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, grads)]

    numeric = []
    with torch.no_grad():
        for p in params:
            flat = p.detach().view(-1)
            estimate = torch.zeros_like(flat)
            for idx in range(flat.numel()):
                original = flat[idx].item()
                flat[idx] = original + h
                f_plus = float(f())
                flat[idx] = original - h
                f_minus = float(f())
                flat[idx] = original
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise NumericError(f"grad_check: non-finite loss at coordinate {idx}")
                estimate[idx] = (f_plus - f_minus) / (2.0 * h)
            numeric.append(estimate.view_as(p))

    a = torch.cat([g.reshape(-1) for g in analytic]) if analytic else torch.zeros(0)
    n = torch.cat([g.reshape(-1) for g in numeric]) if numeric else torch.zeros(0)
    if a.numel() == 0:
        return 0.0
    scale = max(float(a.abs().max()), float(n.abs().max()))
    if scale == 0.0:
        return 0.0
    denom = torch.clamp(torch.maximum(a.abs(), n.abs()), min=floor * scale)
    if floor == 0.0:
        denom = torch.where(denom == 0, torch.ones_like(denom), denom)
    worst = float(((a - n).abs() / denom).max())
    logger.debug("grad_check over %d coordinates: max relative error %.3e", a.numel(), worst)
    return worst
