"""
Desk-scale evaluation: latent Frechet distance, held-out teacher-forced
diffusion loss, synthetic-oracle statistics and real-time factor.
"""
import json
import math
import time
import hashlib
import logging
import statistics
import dataclasses

import numpy as np
import torch
from sklearn.linear_model import LinearRegression

from decode import decode
from diffusion import head_loss, schedule_for
from errors import ArgumentError, CapabilityError, NumericError
from numerics import Rng

logger = logging.getLogger(__name__)


# =============================================================================
# FRECHET DISTANCE
# =============================================================================
@dataclasses.dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @classmethod
    def from_samples(cls, samples: np.ndarray) -> "GaussianStats":
        """Mean and unbiased (N - 1) covariance of row samples."""
        x = np.asarray(samples, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 2:
            raise ArgumentError(f"need at least two (N, d) samples, got shape {x.shape}")
        cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
        return cls(mean=x.mean(axis=0), cov=0.5 * (cov + cov.T), count=x.shape[0])

    @classmethod
    def from_sequences(cls, seqs) -> "GaussianStats":
        return cls.from_samples(np.concatenate([s.tokens for s in seqs], axis=0))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)"""
    if a.dim != b.dim:
        raise ArgumentError(f"dimension mismatch: {a.dim} vs {b.dim}")
    for stats in (a, b):
        if stats.count < stats.dim + 1:
            raise ArgumentError(f"{stats.count} samples are too few for dimension {stats.dim}")
    root_a = _psd_sqrt(a.cov)
    middle = root_a @ b.cov @ root_a
    w = np.linalg.eigvalsh(0.5 * (middle + middle.T))
    tr_cross = float(np.sum(np.sqrt(np.clip(w, 0.0, None))))
    diff = a.mean - b.mean
    value = float(diff @ diff) + float(np.trace(a.cov) + np.trace(b.cov)) - 2.0 * tr_cross
    return max(value, 0.0)


def latent_fd(generated, reference) -> float:
    return frechet_distance(GaussianStats.from_sequences(generated), GaussianStats.from_sequences(reference))


# =============================================================================
# HELD-OUT LOSS
# =============================================================================
def _record_stream(seed: int, seq) -> Rng:
    digest = hashlib.blake2b(seq.tokens.tobytes() + seq.condition.tobytes(), digest_size=8).hexdigest()
    return Rng(seed, f"heldout/{digest}")


@torch.no_grad()
def heldout_diffusion_loss(model, dataset, schedule=None, seed: int = 0, reps: int = 4) -> float:
    """
    Teacher-forced diffusion loss: every position sees its full past and
    is scored with ``reps`` independent (t, eps) draws. Each record draws
    from a stream keyed by its content, so the value ignores record order.
    """
    if model.task == "mar" or not model.decoder.causal:
        raise CapabilityError("teacher-forced loss needs a causal model")
    if reps < 1:
        raise ArgumentError(f"reps must be >= 1, got {reps}")
    schedule = schedule or schedule_for(model.head_cfg)
    decoder = model.decoder
    terms = []
    for seq in dataset:
        n = seq.n
        content = torch.arange(1, n + 1, dtype=torch.long)[None]
        tokens = torch.from_numpy(seq.tokens).to(decoder.content_pos.dtype)[None]
        prefix = decoder.condition_prefix([seq.condition])
        z = decoder.encode_context(prefix, tokens, content, content + 1, torch.ones(1, dtype=torch.long))
        z = z[0, :n]
        x = torch.from_numpy(seq.tokens).to(z.dtype)
        rows = head_loss(model.head, z.repeat(reps, 1), x.repeat(reps, 1), _record_stream(seed, seq),
                         schedule, reduction="none")
        terms.extend(rows.double().tolist())
    if not terms:
        raise ArgumentError("held-out set is empty")
    return math.fsum(terms) / len(terms)


# =============================================================================
# REAL-TIME FACTOR
# =============================================================================
def measure_rtf(model, policy, clip_seconds: float = 10.0, condition=None, runs: int = 5, seed: int = 0) -> float:
    """Median wall-clock decode time of one sequence divided by the clip duration."""
    if clip_seconds <= 0:
        raise ArgumentError(f"clip duration must be positive, got {clip_seconds}")
    if condition is None:
        condition = np.zeros((model.model_cfg.prefix_len, model.model_cfg.cond_dim), dtype=np.float32)
    decode(model, [condition], policy, Rng(seed, "rtf-warmup"))
    timings = []
    for run in range(runs):
        start = time.perf_counter()
        decode(model, [condition], policy, Rng(seed, f"rtf-{run}"))
        timings.append(time.perf_counter() - start)
    rtf = statistics.median(timings) / clip_seconds
    logger.info("RTF %.4f (median of %d runs, %.1f s clip)", rtf, runs, clip_seconds)
    return rtf


# =============================================================================
# SYNTHETIC ORACLE
# =============================================================================
def oracle_stats(generated, process) -> dict:
    """
    Compare generated sequences with the gaussian-ar process that produced
    the training data: lag-1 coefficient error, stationary-moment errors
    over the second half of each sequence, and per-token oracle NLL.
    """
    if process.kind != "gaussian-ar":
        raise ArgumentError("oracle statistics need a gaussian-ar process")
    seqs = [s for s in generated if s.n >= 2]
    if not seqs:
        raise ArgumentError("oracle statistics need sequences of length >= 2")
    h, K = process.token_dim, process.classes
    classes = [process.infer_class(s.condition) if s.condition.size else 0 for s in seqs]

    features, targets = [], []
    for seq, k in zip(seqs, classes):
        x = seq.tokens.astype(np.float64)
        onehot = np.zeros((seq.n - 1, K))
        onehot[:, k] = 1.0
        features.append(np.hstack([x[:-1], onehot]))
        targets.append(x[1:])
    reg = LinearRegression(fit_intercept=False)
    reg.fit(np.vstack(features), np.vstack(targets))
    ar_error = float(np.linalg.norm(reg.coef_[:, :h] - process.transition))

    mean_errors, residuals = [], []
    for k in sorted(set(classes)):
        tail = np.vstack([s.tokens[s.n // 2:].astype(np.float64) for s, c in zip(seqs, classes) if c == k])
        mean_errors.append(float(np.linalg.norm(tail.mean(axis=0) - process.stationary_mean(k))))
        residuals.append(tail - process.stationary_mean(k))
    pooled = np.vstack(residuals)
    cov_error = float(np.linalg.norm(pooled.T @ pooled / max(len(pooled) - 1, 1) - process.stationary_cov()))

    total = sum(process.log_likelihood(s.tokens, k) for s, k in zip(seqs, classes))
    nll = -total / sum(s.n for s in seqs)
    return {
        "ar_coef_error": ar_error,
        "stationary_mean_error": float(np.mean(mean_errors)),
        "stationary_cov_error": cov_error,
        "oracle_nll": float(nll),
    }


# =============================================================================
# REPORT
# =============================================================================
@dataclasses.dataclass
class EvalReport:
    latent_fd: float = None
    heldout_diff_loss: float = None
    ar_coef_error: float = None
    stationary_mean_error: float = None
    stationary_cov_error: float = None
    oracle_nll: float = None
    rtf: float = None
    config: dict = None
    seeds: list = dataclasses.field(default_factory=list)

    NUMERIC_FIELDS = ("latent_fd", "heldout_diff_loss", "ar_coef_error", "stationary_mean_error",
                      "stationary_cov_error", "oracle_nll", "rtf")

    def validate(self):
        for name in self.NUMERIC_FIELDS:
            value = getattr(self, name)
            if value is not None and not math.isfinite(value):
                raise NumericError(f"report field {name} is not finite: {value}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, path):
        self.validate()
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
        logger.info("Wrote evaluation report to %s", path)

    @classmethod
    def from_json(cls, path) -> "EvalReport":
        with open(path, "r", encoding="utf-8") as f:
            return cls(**json.load(f))
