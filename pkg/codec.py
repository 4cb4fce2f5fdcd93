"""
Latent-map <-> token-sequence codec, synthetic data processes and the CVTK
dataset format.

A latent map of shape (frames, bands, channels) is cut into p x p patches,
each patch is stacked in (row, col, channel) order into one token of
dimension c * p * p, and patches are flattened row-major so the tokens of one
frame row sit next to each other.
"""
import json
import math
import struct
import logging
import dataclasses
from pathlib import Path

import numpy as np
from scipy import linalg
from scipy.stats import multivariate_normal

from errors import ArgumentError, FormatError, GeometryError, RangeError

logger = logging.getLogger(__name__)

CVTK_MAGIC = b"CVTK"
CVTK_VERSION = 1
_HEADER = struct.Struct("<4sII")
_RECORD = struct.Struct("<IIII")

PROCESS_KINDS = ("gaussian-ar", "sinusoid-map")


# =============================================================================
# GEOMETRY & VALUE TYPES
# =============================================================================
@dataclasses.dataclass(frozen=True)
class Geometry:
    frames: int
    bands: int
    channels: int
    patch: int

    @property
    def n_tokens(self) -> int:
        return (self.frames // self.patch) * (self.bands // self.patch)

    @property
    def token_dim(self) -> int:
        return self.channels * self.patch * self.patch

    def validate(self):
        if min(self.frames, self.bands, self.channels, self.patch) < 1:
            raise GeometryError(f"non-positive extent in {self}")
        if self.frames % self.patch or self.bands % self.patch:
            raise GeometryError(
                f"frames={self.frames} and bands={self.bands} must both divide by patch={self.patch}"
            )
        return self

    @classmethod
    def parse(cls, text: str) -> "Geometry":
        """Parse ``FRAMESxBANDSxCHANNELS/PATCH``, e.g. ``256x16x8/4``."""
        try:
            extents, patch = text.split("/")
            frames, bands, channels = (int(v) for v in extents.lower().split("x"))
            return cls(frames, bands, channels, int(patch)).validate()
        except ValueError as e:
            raise GeometryError(f"cannot parse geometry '{text}': {e}") from e

    def __str__(self):
        return f"{self.frames}x{self.bands}x{self.channels}/{self.patch}"


# 10 s clip: 1000 mel frames padded to 1024, VAE downsampling r=4, 8 channels, p=4
AUDIO_GEOMETRY = Geometry(frames=256, bands=16, channels=8, patch=4)


@dataclasses.dataclass
class LatentMap:
    values: np.ndarray  # (frames, bands, channels)
    pad_frames: int = 0

    @property
    def shape(self):
        return self.values.shape


@dataclasses.dataclass
class TokenSequence:
    tokens: np.ndarray  # (n, h) float32
    condition: np.ndarray = None  # (cond_len, cond_dim) float32
    source_id: str = ""
    pad_count: int = 0

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float32)
        if self.tokens.ndim != 2:
            raise GeometryError(f"tokens must be 2-D, got shape {self.tokens.shape}")
        if self.condition is None:
            self.condition = np.zeros((0, 0), dtype=np.float32)
        self.condition = np.asarray(self.condition, dtype=np.float32)
        if self.condition.ndim != 2:
            raise GeometryError(f"condition must be 2-D, got shape {self.condition.shape}")

    @property
    def n(self) -> int:
        return self.tokens.shape[0]

    @property
    def h(self) -> int:
        return self.tokens.shape[1]


# =============================================================================
# PATCHIFY / FLATTEN
# =============================================================================
def latent_frames(mel_frames: int, r: int = 4, patch: int = 4, clip_mel_frames: int = None) -> int:
    """
    Latent frame count for a clip of ``mel_frames`` mel frames.

    With ``clip_mel_frames`` the clip is padded to that fixed length (1000 ->
    1024 gives 256 latent frames); otherwise to the next multiple of r * patch.
    """
    if clip_mel_frames is not None:
        if mel_frames > clip_mel_frames:
            raise GeometryError(f"{mel_frames} mel frames exceed the clip length {clip_mel_frames}")
        padded = clip_mel_frames
    else:
        padded = math.ceil(mel_frames / (r * patch)) * (r * patch)
    if padded % (r * patch):
        raise GeometryError(f"padded length {padded} does not divide by r*p={r * patch}")
    return padded // r


def pad_frames(latent: LatentMap, patch: int, target_frames: int = None) -> LatentMap:
    """Right-pad the frame axis with zeros to ``target_frames`` or the next multiple of ``patch``."""
    frames = latent.values.shape[0]
    target = target_frames if target_frames is not None else math.ceil(frames / patch) * patch
    if target < frames:
        raise GeometryError(f"cannot pad {frames} frames down to {target}")
    if target % patch:
        raise GeometryError(f"target frames {target} do not divide by patch {patch}")
    extra = target - frames
    values = np.pad(latent.values, ((0, extra), (0, 0), (0, 0)))
    return LatentMap(values=values, pad_frames=latent.pad_frames + extra)


def patchify_flatten(latent: LatentMap, patch: int) -> TokenSequence:
    values = np.asarray(latent.values)
    if values.ndim != 3:
        raise GeometryError(f"latent map must be (frames, bands, channels), got {values.shape}")
    frames, bands, channels = values.shape
    if frames % patch or bands % patch:
        raise GeometryError(f"map {values.shape} does not divide by patch {patch}")
    rows, cols = frames // patch, bands // patch
    tokens = (
        values.reshape(rows, patch, cols, patch, channels)
        .transpose(0, 2, 1, 3, 4)
        .reshape(rows * cols, patch * patch * channels)
    )
    return TokenSequence(tokens=tokens.astype(np.float32, copy=False), pad_count=latent.pad_frames)


def unflatten_unpatchify(seq: TokenSequence, geometry: Geometry) -> LatentMap:
    geometry.validate()
    if seq.n != geometry.n_tokens or seq.h != geometry.token_dim:
        raise GeometryError(
            f"sequence ({seq.n}, {seq.h}) does not fit geometry {geometry} "
            f"({geometry.n_tokens}, {geometry.token_dim})"
        )
    if seq.pad_count > geometry.frames:
        raise GeometryError(f"pad count {seq.pad_count} exceeds {geometry.frames} frames")
    p, c = geometry.patch, geometry.channels
    rows, cols = geometry.frames // p, geometry.bands // p
    values = (
        seq.tokens.reshape(rows, cols, p, p, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(geometry.frames, geometry.bands, c)
    )
    return LatentMap(values=values[: geometry.frames - seq.pad_count].copy(), pad_frames=0)


# =============================================================================
# SYNTHETIC PROCESSES
# =============================================================================
@dataclasses.dataclass
class SyntheticProcess:
    """
    Ground-truth sequence generator with known statistics.

    gaussian-ar:  x^1 ~ N(b_k, s^2 I),  x^i = A x^{i-1} + b_k + s eps
    sinusoid-map: class k picks a temporal frequency of a latent map that is
                  then patchified with ``geometry``.
    """
    kind: str
    transition: np.ndarray  # A, (h, h)
    offsets: np.ndarray  # b, (classes, h)
    noise_std: float
    class_codes: np.ndarray  # (classes, cond_len, cond_dim)
    geometry: Geometry = None
    frequencies: np.ndarray = None

    def __post_init__(self):
        if self.kind not in PROCESS_KINDS:
            raise ArgumentError(f"unknown process kind '{self.kind}'; expected one of {PROCESS_KINDS}")
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.offsets = np.atleast_2d(np.asarray(self.offsets, dtype=np.float64))
        self.class_codes = np.asarray(self.class_codes, dtype=np.float64)
        if self.noise_std < 0:
            raise ArgumentError(f"noise std must be >= 0, got {self.noise_std}")
        if self.class_codes.ndim != 3 or self.class_codes.shape[0] != self.offsets.shape[0]:
            raise ArgumentError("class codes must be (classes, cond_len, cond_dim) with one entry per offset")
        if self.kind == "gaussian-ar":
            h = self.offsets.shape[1]
            if self.transition.shape != (h, h):
                raise ArgumentError(f"transition must be ({h}, {h}), got {self.transition.shape}")
            radius = float(np.max(np.abs(np.linalg.eigvals(self.transition)))) if h else 0.0
            if radius >= 1.0:
                raise ArgumentError(f"transition spectral radius {radius:.4f} must be < 1")
        else:
            if self.geometry is None:
                raise ArgumentError("sinusoid-map needs a geometry")
            self.geometry.validate()
            self.frequencies = np.asarray(self.frequencies, dtype=np.float64)
            if self.frequencies.shape != (self.classes,):
                raise ArgumentError("sinusoid-map needs one frequency per class")

    @property
    def classes(self) -> int:
        return self.offsets.shape[0]

    @property
    def token_dim(self) -> int:
        if self.kind == "gaussian-ar":
            return self.offsets.shape[1]
        return self.geometry.token_dim

    @property
    def cond_len(self) -> int:
        return self.class_codes.shape[1]

    @property
    def cond_dim(self) -> int:
        return self.class_codes.shape[2]

    @classmethod
    def random(cls, kind: str, dim: int, classes: int, rng, radius: float = 0.8, noise_std: float = 0.5,
               offset_scale: float = 1.0, cond_len: int = 2, cond_dim: int = 8, geometry: Geometry = None):
        """Draw process parameters from ``rng``; the transition is rescaled to spectral radius ``radius``."""
        if classes < 1:
            raise ArgumentError("need at least one class")
        codes = rng.normal_array((classes, cond_len, cond_dim))
        if kind == "gaussian-ar":
            if not 0.0 <= radius < 1.0:
                raise ArgumentError(f"spectral radius must lie in [0, 1), got {radius}")
            g = rng.normal_array((dim, dim))
            current = float(np.max(np.abs(np.linalg.eigvals(g))))
            transition = g * (radius / current) if current > 0 else np.zeros((dim, dim))
            offsets = offset_scale * rng.normal_array((classes, dim))
            return cls(kind, transition, offsets, noise_std, codes)
        if kind == "sinusoid-map":
            geometry = geometry or Geometry(frames=8, bands=4, channels=1, patch=2)
            frequencies = 1.0 + np.arange(classes, dtype=np.float64)
            offsets = np.zeros((classes, geometry.token_dim))
            return cls(kind, np.zeros((0, 0)), offsets, noise_std, codes, geometry, frequencies)
        raise ArgumentError(f"unknown process kind '{kind}'; expected one of {PROCESS_KINDS}")

    def _require_ar(self, what: str):
        if self.kind != "gaussian-ar":
            raise ArgumentError(f"{what} is only available in closed form for gaussian-ar")

    def stationary_mean(self, k: int) -> np.ndarray:
        self._require_ar("stationary mean")
        h = self.token_dim
        return np.linalg.solve(np.eye(h) - self.transition, self.offsets[k])

    def stationary_cov(self) -> np.ndarray:
        """Solve S = A S A^T + s^2 I."""
        self._require_ar("stationary covariance")
        h = self.token_dim
        return linalg.solve_discrete_lyapunov(self.transition, (self.noise_std ** 2) * np.eye(h))

    def log_likelihood(self, tokens: np.ndarray, k: int) -> float:
        """Exact log density of a token sequence under class ``k``."""
        self._require_ar("log-likelihood")
        if self.noise_std == 0:
            raise ArgumentError("log-likelihood is undefined for a noiseless process")
        x = np.asarray(tokens, dtype=np.float64)
        mean = np.empty_like(x)
        mean[0] = self.offsets[k]
        mean[1:] = x[:-1] @ self.transition.T + self.offsets[k]
        h = self.token_dim
        dist = multivariate_normal(mean=np.zeros(h), cov=(self.noise_std ** 2) * np.eye(h))
        return float(np.sum(dist.logpdf(x - mean)))

    def infer_class(self, condition: np.ndarray) -> int:
        """Nearest class code to a stored condition prefix."""
        cond = np.asarray(condition, dtype=np.float64)
        rows = min(cond.shape[0], self.cond_len)
        if rows == 0 or cond.shape[1] != self.cond_dim:
            raise RangeError(f"condition of shape {cond.shape} matches no class code")
        dist = ((self.class_codes[:, :rows] - cond[None, :rows]) ** 2).sum(axis=(1, 2))
        return int(np.argmin(dist))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "transition": self.transition.tolist(),
            "offsets": self.offsets.tolist(),
            "noise_std": float(self.noise_std),
            "class_codes": self.class_codes.tolist(),
            "geometry": dataclasses.asdict(self.geometry) if self.geometry else None,
            "frequencies": self.frequencies.tolist() if self.frequencies is not None else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticProcess":
        geometry = Geometry(**data["geometry"]) if data.get("geometry") else None
        return cls(
            kind=data["kind"],
            transition=np.array(data["transition"], dtype=np.float64),
            offsets=np.array(data["offsets"], dtype=np.float64),
            noise_std=float(data["noise_std"]),
            class_codes=np.array(data["class_codes"], dtype=np.float64),
            geometry=geometry,
            frequencies=data.get("frequencies"),
        )


def save_process(proc: SyntheticProcess, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(proc.to_dict(), f, indent=2)


def load_process(path) -> SyntheticProcess:
    with open(path, "r", encoding="utf-8") as f:
        return SyntheticProcess.from_dict(json.load(f))


def gen_synthetic(proc: SyntheticProcess, n: int, k: int, rng, first: np.ndarray = None) -> TokenSequence:
    """Draw one length-``n`` sequence of class ``k``; ``first`` fixes x^1 for gaussian-ar."""
    if n < 1:
        raise ArgumentError(f"sequence length must be >= 1, got {n}")
    if not 0 <= k < proc.classes:
        raise RangeError(f"class {k} outside 0..{proc.classes - 1}")

    if proc.kind == "gaussian-ar":
        h = proc.token_dim
        eps = rng.normal_array((n, h))
        x = np.empty((n, h), dtype=np.float64)
        b = proc.offsets[k]
        x[0] = np.asarray(first, dtype=np.float64) if first is not None else b + proc.noise_std * eps[0]
        for i in range(1, n):
            x[i] = proc.transition @ x[i - 1] + b + proc.noise_std * eps[i]
        tokens = x
    else:
        geo = proc.geometry
        per_row = geo.bands // geo.patch
        if n % per_row:
            raise GeometryError(f"sinusoid-map length {n} must be a multiple of {per_row} tokens per row")
        frames = (n // per_row) * geo.patch
        t = np.arange(frames, dtype=np.float64)[:, None, None] / frames
        cells = geo.bands * geo.channels
        phase = 2.0 * np.pi * np.arange(cells, dtype=np.float64).reshape(1, geo.bands, geo.channels) / cells
        shift = 2.0 * np.pi * rng.random()
        values = np.sin(2.0 * np.pi * proc.frequencies[k] * t + phase + shift)
        values = values + proc.noise_std * rng.normal_array(values.shape)
        tokens = patchify_flatten(LatentMap(values), geo.patch).tokens

    return TokenSequence(
        tokens=tokens.astype(np.float32),
        condition=proc.class_codes[k].astype(np.float32),
        source_id=f"{proc.kind}-class{k}",
    )


# =============================================================================
# CVTK DATASET FILES
# =============================================================================
def save_dataset(seqs, path):
    seqs = list(seqs)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(CVTK_MAGIC, CVTK_VERSION, len(seqs)))
        for seq in seqs:
            cond = np.ascontiguousarray(seq.condition, dtype="<f4")
            tokens = np.ascontiguousarray(seq.tokens, dtype="<f4")
            f.write(_RECORD.pack(tokens.shape[0], tokens.shape[1], cond.shape[0], cond.shape[1]))
            f.write(cond.tobytes())
            f.write(tokens.tobytes())
    logger.info("Wrote %d sequences to %s", len(seqs), path)


def load_dataset(path):
    """Yield the TokenSequence records of a CVTK file in file order."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != CVTK_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r} in {path}", offset=0)
    if len(data) < _HEADER.size:
        raise FormatError(f"truncated header in {path}", offset=len(data))
    _, version, count = _HEADER.unpack_from(data, 0)
    if version != CVTK_VERSION:
        raise FormatError(f"unsupported CVTK version {version} in {path}", offset=4)

    pos = _HEADER.size
    for record in range(count):
        if pos + _RECORD.size > len(data):
            raise FormatError(f"truncated record header in {path}", offset=pos, record=record)
        n, h, cond_len, cond_dim = _RECORD.unpack_from(data, pos)
        pos += _RECORD.size
        cond_bytes = 4 * cond_len * cond_dim
        token_bytes = 4 * n * h
        if pos + cond_bytes + token_bytes > len(data):
            raise FormatError(f"truncated record payload in {path}", offset=pos, record=record)
        cond = np.frombuffer(data, dtype="<f4", count=cond_len * cond_dim, offset=pos)
        pos += cond_bytes
        tokens = np.frombuffer(data, dtype="<f4", count=n * h, offset=pos)
        pos += token_bytes
        yield TokenSequence(
            tokens=tokens.reshape(n, h).astype(np.float32),
            condition=cond.reshape(cond_len, cond_dim).astype(np.float32),
            source_id=f"{Path(path).name}#{record}",
        )
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes in {path}", offset=pos)


def read_dataset(path) -> list:
    return list(load_dataset(path))
