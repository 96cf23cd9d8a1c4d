"""Learned convolutional encoder/decoder and dual-path chunking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _frames, _result


@dataclass(frozen=True)
class CodecConfig:
    window: int = 16
    stride: int = 8
    n_filters: int = 32
    encoder_activation: str = "relu"

    def __post_init__(self):
        if self.window < 1 or self.stride < 1 or self.stride > self.window:
            raise ValueError(f"need 1 <= stride <= window, got window={self.window} stride={self.stride}")
        if self.n_filters < 1:
            raise ValueError("n_filters must be positive")
        if self.encoder_activation not in ("relu", "none"):
            raise ValueError(f"encoder_activation must be 'relu' or 'none', got {self.encoder_activation!r}")


@dataclass(frozen=True)
class ChunkConfig:
    chunk_size: int = 100
    hop: int = 50

    def __post_init__(self):
        if self.chunk_size < 1 or not 1 <= self.hop <= self.chunk_size:
            raise ValueError(f"need 1 <= hop <= chunk_size, got {self.hop}, {self.chunk_size}")


@dataclass(frozen=True)
class Padding:
    """What ``segment`` did to the frame axis, so ``merge`` can undo it."""

    length: int
    padded_length: int
    n_chunks: int


def encoded_length(num_samples: int, cfg: CodecConfig) -> int:
    return (num_samples - cfg.window) // cfg.stride + 1


def decoded_length(num_frames: int, cfg: CodecConfig) -> int:
    return (num_frames - 1) * cfg.stride + cfg.window


def encode(x, kernels: Tensor, cfg: CodecConfig) -> Tensor:
    """Waveform(s) [T] or [batch, T] to representation [N, L] or [batch, N, L]."""
    x = x.samples if hasattr(x, "samples") else x
    x = x if isinstance(x, Tensor) else Tensor(x)
    single = x.ndim == 1
    x = ad.reshape(x, (1, 1, x.shape[-1]) if single else (x.shape[0], 1, x.shape[1]))
    if x.shape[-1] < cfg.window:
        raise ad.InputTooShortError(f"input of {x.shape[-1]} samples is shorter than the {cfg.window}-sample window")
    rep = ad.conv1d(x, kernels, cfg.stride)
    if cfg.encoder_activation == "relu":
        rep = ad.relu(rep)
    return ad.reshape(rep, rep.shape[1:]) if single else rep


def decode(rep: Tensor, kernels: Tensor, cfg: CodecConfig, length: int | None = None) -> Tensor:
    """Representation [..., N, L] back to samples [..., T], trimmed or padded to ``length``."""
    if rep.shape[-2] != kernels.shape[0]:
        raise ad.DimensionError(f"representation has {rep.shape[-2]} channels, decoder expects {kernels.shape[0]}")
    lead = rep.shape[:-2]
    flat = ad.reshape(rep, (-1,) + rep.shape[-2:])
    y = ad.conv1d_transpose(flat, kernels, cfg.stride)  # [b, 1, T]
    t = y.shape[-1]
    y = ad.reshape(y, lead + (t,))
    if length is None or length == t:
        return y
    if length < t:
        return ad.index(y, (Ellipsis, slice(0, length)))
    return _pad_right(y, length)


def _pad_right(x: Tensor, length: int) -> Tensor:
    t = x.shape[-1]
    out = np.zeros(x.shape[:-1] + (length,))
    out[..., :t] = x.data
    return _result(out, (x,), lambda g: (g[..., :t],), "pad")


def chunk_layout(length: int, cfg: ChunkConfig) -> Padding:
    s, hop = cfg.chunk_size, cfg.hop
    if length <= s:
        padded = s
    else:
        padded = s + -(-(length - s) // hop) * hop
    return Padding(length, padded, (padded - s) // hop + 1)


def _overlap_add(chunks: np.ndarray, cfg: ChunkConfig, padded: int) -> np.ndarray:
    out = np.zeros(chunks.shape[:-2] + (padded,))
    for k in range(chunks.shape[-2]):
        out[..., k * cfg.hop : k * cfg.hop + cfg.chunk_size] += chunks[..., k, :]
    return out


def _overlap_counts(pad: Padding, cfg: ChunkConfig) -> np.ndarray:
    return _overlap_add(np.ones((pad.n_chunks, cfg.chunk_size)), cfg, pad.padded_length)


def segment(rep: Tensor, cfg: ChunkConfig) -> tuple[Tensor, Padding]:
    """Split [..., L] into overlapping chunks [..., K, S] after right zero-padding."""
    pad = chunk_layout(rep.shape[-1], cfg)
    padded = np.zeros(rep.shape[:-1] + (pad.padded_length,))
    padded[..., : pad.length] = rep.data
    chunks = np.array(_frames(padded, cfg.chunk_size, cfg.hop, pad.n_chunks))

    def backward(g):
        return (_overlap_add(g, cfg, pad.padded_length)[..., : pad.length],)

    return _result(chunks, (rep,), backward, "segment"), pad


def merge(chunks: Tensor, cfg: ChunkConfig, pad: Padding) -> Tensor:
    """Overlap-add chunks [..., K, S] back to [..., L], averaging overlapped frames."""
    if chunks.shape[-2:] != (pad.n_chunks, cfg.chunk_size):
        raise ValueError(
            f"chunks {chunks.shape[-2:]} inconsistent with padding record "
            f"({pad.n_chunks} chunks of {cfg.chunk_size})"
        )
    counts = _overlap_counts(pad, cfg)
    out = (_overlap_add(chunks.data, cfg, pad.padded_length) / counts)[..., : pad.length]

    def backward(g):
        full = np.zeros(g.shape[:-1] + (pad.padded_length,))
        full[..., : pad.length] = g
        full /= counts
        return (np.array(_frames(full, cfg.chunk_size, cfg.hop, pad.n_chunks)),)

    return _result(out, (chunks,), backward, "merge")
