"""
Masking-ratio schedules and mask plans.

A plan marks each of n positions visible (1) or masked (0). With the drop
strategy the masked tokens are removed and every kept token predicts the
next kept position, so next-token prediction on the shortened sequence is
masked next-token prediction on the full one.
"""
import math
import logging
import dataclasses

import numpy as np
from scipy import stats

from config import suggest
from errors import ArgumentError

logger = logging.getLogger(__name__)

SCHEDULE_KINDS = ("normal", "truncated-normal", "fixed", "uniform", "mixture")
STRATEGIES = ("drop", "zero", "gaussian", "none")


# =============================================================================
# SCHEDULES
# =============================================================================
@dataclasses.dataclass(frozen=True)
class MaskSchedule:
    """
    Distribution over masking ratios in [0, 1].

    ``normal`` is a normal clamped to [0, 1] by rejection, which has the same
    law as ``truncated-normal`` with lo=0, hi=1.
    """
    kind: str
    mean: float = 0.0
    std: float = 1.0
    lo: float = 0.0
    hi: float = 1.0
    ratio: float = 0.0
    weights: tuple = ()
    components: tuple = ()

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ArgumentError(f"unknown schedule kind '{self.kind}'; expected one of {SCHEDULE_KINDS}")
        if self.kind == "fixed" and not 0.0 <= self.ratio <= 1.0:
            raise ArgumentError(f"fixed ratio {self.ratio} outside [0, 1]")
        if self.kind in ("normal", "truncated-normal") and self.std <= 0:
            raise ArgumentError(f"std must be positive, got {self.std}")
        if self.kind in ("truncated-normal", "uniform") and not 0.0 <= self.lo < self.hi <= 1.0:
            raise ArgumentError(f"bounds [{self.lo}, {self.hi}] must satisfy 0 <= lo < hi <= 1")
        if self.kind == "mixture":
            if not self.components or len(self.components) != len(self.weights):
                raise ArgumentError("mixture needs one weight per component")
            if any(w < 0 for w in self.weights) or abs(sum(self.weights) - 1.0) > 1e-9:
                raise ArgumentError(f"mixture weights {self.weights} must be nonnegative and sum to 1")

    @property
    def bounds(self):
        if self.kind == "normal":
            return 0.0, 1.0
        return self.lo, self.hi

    @property
    def has_density(self) -> bool:
        if self.kind == "mixture":
            return all(c.has_density for c in self.components)
        return self.kind != "fixed"

    def _truncnorm(self):
        lo, hi = self.bounds
        return stats.truncnorm((lo - self.mean) / self.std, (hi - self.mean) / self.std,
                               loc=self.mean, scale=self.std)

    def cdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.kind in ("normal", "truncated-normal"):
            return self._truncnorm().cdf(x)
        if self.kind == "uniform":
            return np.clip((x - self.lo) / (self.hi - self.lo), 0.0, 1.0)
        if self.kind == "fixed":
            return (x >= self.ratio).astype(np.float64)
        return sum(w * c.cdf(x) for w, c in zip(self.weights, self.components))

    def pdf(self, x):
        if not self.has_density:
            raise ArgumentError(f"schedule '{self.kind}' has no density")
        x = np.asarray(x, dtype=np.float64)
        if self.kind in ("normal", "truncated-normal"):
            return self._truncnorm().pdf(x)
        if self.kind == "uniform":
            inside = (x >= self.lo) & (x <= self.hi)
            return np.where(inside, 1.0 / (self.hi - self.lo), 0.0)
        return sum(w * c.pdf(x) for w, c in zip(self.weights, self.components))

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data["components"] = [c.to_dict() for c in self.components]
        data["weights"] = list(self.weights)
        return data


HIGH_RATIO = MaskSchedule("normal", mean=0.95, std=0.15)
LONG_TAIL = MaskSchedule("truncated-normal", mean=0.55, std=0.25, lo=0.0, hi=1.0)

PRESETS = {
    "mixture-default": MaskSchedule("mixture", weights=(0.5, 0.5), components=(HIGH_RATIO, LONG_TAIL)),
    "mar-range": MaskSchedule("truncated-normal", mean=1.0, std=0.25, lo=0.7, hi=1.0),
    "mar-shifted": MaskSchedule("truncated-normal", mean=0.85, std=0.25, lo=0.55, hi=0.85),
    "fixed-0.7": MaskSchedule("fixed", ratio=0.7),
    "uniform": MaskSchedule("uniform", lo=0.0, hi=1.0),
    "high-ratio": HIGH_RATIO,
    "long-tail": LONG_TAIL,
    "none": MaskSchedule("fixed", ratio=0.0),
}


def get_schedule(name: str) -> MaskSchedule:
    if name not in PRESETS:
        message = f"unknown schedule preset '{name}'"
        hint = suggest(name, PRESETS)
        if hint:
            message += f"; did you mean '{hint}'?"
        raise ArgumentError(message)
    return PRESETS[name]


def _truncated_draws(sched: MaskSchedule, rng, size: int) -> np.ndarray:
    lo, hi = sched.bounds
    accept = stats.norm.cdf((hi - sched.mean) / sched.std) - stats.norm.cdf((lo - sched.mean) / sched.std)
    out = np.empty(size, dtype=np.float64)
    filled = 0
    while filled < size:
        batch = int(math.ceil((size - filled) / max(accept, 1e-3) * 1.2)) + 16
        draws = sched.mean + sched.std * rng.normal_array((batch,))
        draws = draws[(draws >= lo) & (draws <= hi)][: size - filled]
        out[filled:filled + draws.size] = draws
        filled += draws.size
    return out


def sample_ratios(sched: MaskSchedule, rng, size: int) -> np.ndarray:
    """Draw ``size`` masking ratios."""
    if sched.kind == "fixed":
        return np.full(size, sched.ratio, dtype=np.float64)
    if sched.kind == "uniform":
        return sched.lo + (sched.hi - sched.lo) * rng.uniform(size)
    if sched.kind in ("normal", "truncated-normal"):
        return _truncated_draws(sched, rng, size)
    picks = np.searchsorted(np.cumsum(sched.weights), rng.uniform(size), side="right")
    picks = np.minimum(picks, len(sched.components) - 1)
    out = np.empty(size, dtype=np.float64)
    for j, component in enumerate(sched.components):
        chosen = picks == j
        out[chosen] = sample_ratios(component, rng, int(chosen.sum()))
    return out


def sample_ratio(sched: MaskSchedule, rng) -> float:
    return float(sample_ratios(sched, rng, 1)[0])


# =============================================================================
# MASK PLANS
# =============================================================================
@dataclasses.dataclass(frozen=True)
class MaskPlan:
    v: np.ndarray  # (n,) int8, 1 = visible
    kept: tuple  # 1-based ascending
    targets: tuple  # next kept position, n + 1 after the last
    strategy: str

    @property
    def n(self) -> int:
        return int(self.v.shape[0])

    @property
    def masked(self) -> tuple:
        return tuple(int(j) + 1 for j in np.flatnonzero(self.v == 0))

    @property
    def bos_target(self) -> int:
        """The position predicted from the BOS slot under drop-masking."""
        return self.kept[0] if self.kept else self.n + 1


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def plan_from_mask(v, strategy: str = "drop") -> MaskPlan:
    if strategy not in STRATEGIES:
        raise ArgumentError(f"unknown strategy '{strategy}'; expected one of {STRATEGIES}")
    v = np.asarray(v, dtype=np.int8)
    if v.ndim != 1 or v.size < 1 or not np.isin(v, (0, 1)).all():
        raise ArgumentError("mask must be a non-empty binary vector")
    if strategy == "none" and not v.all():
        raise ArgumentError("strategy 'none' cannot mask positions")
    kept = tuple(int(j) + 1 for j in np.flatnonzero(v))
    targets = kept[1:] + (v.size + 1,) if kept else ()
    return MaskPlan(v=v, kept=kept, targets=targets, strategy=strategy)


def sample_plan(n: int, ratio: float, strategy: str, rng) -> MaskPlan:
    """Mask a uniformly random subset of round(n * ratio) positions (partial Fisher-Yates)."""
    if n < 1:
        raise ArgumentError(f"sequence length must be >= 1, got {n}")
    if not 0.0 <= ratio <= 1.0:
        raise ArgumentError(f"ratio {ratio} outside [0, 1]")
    masked = round_half_away(n * ratio)
    if strategy == "none" and masked > 0:
        raise ArgumentError(f"strategy 'none' with ratio {ratio} would mask {masked} positions")
    order = np.arange(n)
    for i in range(masked):
        j = int(rng.integers(i, n))
        order[i], order[j] = order[j], order[i]
    v = np.ones(n, dtype=np.int8)
    v[order[:masked]] = 0
    return plan_from_mask(v, strategy)


def apply_plan(tokens: np.ndarray, plan: MaskPlan, rng=None):
    """
    Build the decoder input for a plan.

    Returns ``(inputs, content_idx)`` with 1-based content positions.
    """
    tokens = np.asarray(tokens, dtype=np.float32)
    if tokens.shape[0] != plan.n:
        raise ArgumentError(f"plan covers {plan.n} positions but the sequence has {tokens.shape[0]}")
    if plan.strategy == "drop":
        kept = np.asarray(plan.kept, dtype=np.int64)
        return tokens[kept - 1] if kept.size else tokens[:0], kept
    content = np.arange(1, plan.n + 1, dtype=np.int64)
    if plan.strategy == "none":
        return tokens.copy(), content
    inputs = tokens.copy()
    masked = np.asarray(plan.masked, dtype=np.int64) - 1
    if plan.strategy == "zero":
        inputs[masked] = 0.0
    else:
        if rng is None:
            raise ArgumentError("gaussian mask-fill needs an rng")
        inputs[masked] = rng.normal_array((masked.size, tokens.shape[1])).astype(np.float32)
    return inputs, content


def gclm_mask(n: int, i: int, past, f: int) -> np.ndarray:
    """
    Visibility pattern under which, after dropping, position ``i`` predicts
    ``f`` while seeing exactly the past positions in ``past``.
    """
    past = set(int(j) for j in past)
    if f <= i:
        raise ArgumentError(f"future target {f} must come after current index {i}")
    if not 1 <= i < n or f > n:
        raise ArgumentError(f"need 1 <= i < f <= n, got i={i}, f={f}, n={n}")
    if any(not 1 <= j < i for j in past):
        raise ArgumentError(f"past subset {sorted(past)} must lie in 1..{i - 1}")
    v = np.zeros(n, dtype=np.int8)
    for j in range(1, n + 1):
        if j in (i, f) or j in past:
            v[j - 1] = 1
    return v
