"""Windowed sign features, feature/word embeddings and sinusoidal positions."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, CorpusParseError, DimensionError, SequenceTooShortError, VocabularyError
from .numerics import (
    LayerNorm,
    Linear,
    Module,
    Parameter,
    Tensor,
    as_tensor,
    embedding_lookup,
    layer_norm,
    linear_forward,
)

WINDOW_SIZE = 16
WINDOW_STRIDE = 4


@dataclass
class FeatureSequence:
    video_id: str
    frames: np.ndarray  # [T, F]
    fps: float | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise DimensionError(f"{self.video_id}: frames must be [T>=1, F], got {self.frames.shape}")
        if not np.isfinite(self.frames).all():
            raise DimensionError(f"{self.video_id}: non-finite frame features")

    @property
    def length(self) -> int:
        return self.frames.shape[0]


@dataclass
class WindowedFeatures:
    windows: np.ndarray  # [W, D]
    window_size: int
    stride: int

    @property
    def count(self) -> int:
        return self.windows.shape[0]


def window_count(T: int, L: int = WINDOW_SIZE, stride: int = WINDOW_STRIDE) -> int:
    if T < L:
        raise SequenceTooShortError(T, L)
    return (T - L) // stride + 1


# A provider maps stacked clips [W, L, F] to per-window vectors [W, D].
FeatureProvider = Callable[[np.ndarray], np.ndarray]


def mean_pool_provider(clips: np.ndarray) -> np.ndarray:
    return clips.mean(axis=1)


class ClassProbabilityProvider:
    """Softmax over a fixed linear classifier applied to the mean-pooled clip."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray | None = None):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.zeros(self.weight.shape[1]) if bias is None else np.asarray(bias, dtype=np.float64)

    def __call__(self, clips: np.ndarray) -> np.ndarray:
        logits = clips.mean(axis=1) @ self.weight + self.bias
        logits -= logits.max(axis=-1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=-1, keepdims=True)


def sign_embed(
    seq: FeatureSequence,
    provider: FeatureProvider = mean_pool_provider,
    L: int = WINDOW_SIZE,
    stride: int = WINDOW_STRIDE,
) -> WindowedFeatures:
    """Slide a length-``L`` window with step ``stride`` and reduce each clip."""
    W = window_count(seq.length, L, stride)
    clips = np.lib.stride_tricks.sliding_window_view(seq.frames, L, axis=0)[::stride][:W]
    # sliding_window_view puts the window axis last: [W, F, L] -> [W, L, F]
    clips = np.ascontiguousarray(clips.transpose(0, 2, 1))
    return WindowedFeatures(np.asarray(provider(clips), dtype=np.float64), L, stride)


class FeatureEmbedding(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_model: int):
        self.proj = Linear(rng, d_in, d_model)
        self.norm = LayerNorm(d_model)

    def __call__(self, windows) -> Tensor:
        return self.norm(self.proj(as_tensor(windows)))


def feature_embed(w: WindowedFeatures | np.ndarray | Tensor, proj: FeatureEmbedding) -> Tensor:
    """Linear projection to the model width followed by layer normalisation."""
    x = w.windows if isinstance(w, WindowedFeatures) else w
    x = as_tensor(x)
    if x.shape[-1] != proj.proj.weight.shape[0]:
        raise DimensionError(f"feature width {x.shape[-1]} != projection input {proj.proj.weight.shape[0]}")
    y = linear_forward(x, proj.proj.weight, proj.proj.bias)
    return layer_norm(y, proj.norm.gain, proj.norm.bias, proj.norm.eps)


class EmbeddingTable(Module):
    """One token table shared by the context, spotting and target streams."""

    def __init__(self, rng: np.random.Generator, vocab_size: int, dim: int):
        self.vocab_size = vocab_size
        self.dim = dim
        self.weights = Parameter(rng.normal(0.0, dim**-0.5, size=(vocab_size, dim)))

    def __call__(self, tokens) -> Tensor:
        return word_embed(tokens, self)


def word_embed(tokens, table: EmbeddingTable) -> Tensor:
    ids = np.asarray(tokens, dtype=np.int64)
    bad = ids[(ids < 0) | (ids >= table.vocab_size)]
    if bad.size:
        raise VocabularyError(int(bad[0]), table.vocab_size)
    return embedding_lookup(table.weights, ids)


@lru_cache(maxsize=32)
def _pe_table(n: int, d: int) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    rates = 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(pos / rates)
    pe[:, 1::2] = np.cos(pos / rates)
    pe.setflags(write=False)
    return pe


def positional_table(n: int, d: int) -> np.ndarray:
    if d % 2:
        raise ConfigError(f"positional encoding needs an even model width, got {d}")
    # cache on a rounded-up length so prefixes share one table
    size = max(64, 1 << (max(n, 1) - 1).bit_length())
    return _pe_table(size, d)[:n]


def positional_encode(x: Tensor) -> Tensor:
    """Add the fixed sine/cosine table along the second-to-last axis."""
    x = as_tensor(x)
    n, d = x.shape[-2], x.shape[-1]
    return x + positional_table(n, d)


# ---------------------------------------------------------------------------
# fmat text format: "T F" header, then T rows of F space-separated floats


def write_fmat(path: str | Path, frames: np.ndarray) -> None:
    frames = np.asarray(frames, dtype=np.float64)
    T, F = frames.shape
    lines = [f"{T} {F}"]
    lines.extend(" ".join(repr(float(v)) for v in row) for row in frames)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_fmat(path: str | Path) -> np.ndarray:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise CorpusParseError(path, 1, "expected header 'T F'")
        try:
            T, F = int(header[0]), int(header[1])
        except ValueError as exc:
            raise CorpusParseError(path, 1, f"bad header: {exc}") from None
        rows = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.split(" ")
            if len(parts) != F:
                raise CorpusParseError(path, lineno, f"expected {F} values, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise CorpusParseError(path, lineno, str(exc)) from None
    if len(rows) != T:
        raise CorpusParseError(path, len(rows) + 1, f"expected {T} rows, got {len(rows)}")
    return np.array(rows, dtype=np.float64).reshape(T, F)
