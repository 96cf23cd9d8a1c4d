"""Waveforms, mixtures, synthetic toy sources, SI-SDR metrics and WAV I/O."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad

SAMPLE_RATE = 8000
SI_SDR_EPS = 1e-12

DEFAULT_BANDS = ((200.0, 800.0), (1200.0, 2400.0), (2800.0, 3600.0))


class SignalError(ValueError):
    pass


class WavFormatError(SignalError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise SignalError(f"waveform must be a non-empty 1-D array, got shape {arr.shape}")
        if self.sample_rate != SAMPLE_RATE:
            raise SignalError(f"sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}")
        object.__setattr__(self, "samples", arr)

    def __len__(self) -> int:
        return self.samples.size


@dataclass(frozen=True)
class MixtureExample:
    mixture: Waveform
    sources: tuple[Waveform, ...]
    noise: Waveform | None = None
    overlap_ratio: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        waves = [self.mixture, *self.sources] + ([self.noise] if self.noise is not None else [])
        if len({len(w) for w in waves}) != 1:
            raise SignalError("all waveforms of a mixture must share one length")

    @property
    def num_sources(self) -> int:
        return len(self.sources)

    def source_matrix(self) -> np.ndarray:
        return np.stack([s.samples for s in self.sources])


@dataclass
class SynthConfig:
    num_sources: int = 2
    duration_seconds: float = 1.0
    gain_db_range: tuple[float, float] = (-33.0, -25.0)
    source_profiles: list[tuple[float, float]] = field(default_factory=lambda: [list(b) for b in DEFAULT_BANDS[:2]])
    seed: int = 0

    def __post_init__(self):
        self.gain_db_range = tuple(float(v) for v in self.gain_db_range)
        self.source_profiles = [tuple(float(f) for f in band) for band in self.source_profiles]
        lo, hi = self.gain_db_range
        if lo > hi:
            raise SignalError(f"gain range low {lo} exceeds high {hi}")
        if self.num_sources < 1:
            raise SignalError("need at least one source")
        if len(self.source_profiles) < self.num_sources:
            raise SignalError(f"{self.num_sources} sources but only {len(self.source_profiles)} frequency bands")
        for f_lo, f_hi in self.source_profiles:
            if not 0 < f_lo <= f_hi:
                raise SignalError(f"invalid band [{f_lo}, {f_hi}]")
            if f_hi >= SAMPLE_RATE / 2:
                raise SignalError(f"band [{f_lo}, {f_hi}] Hz reaches the Nyquist limit {SAMPLE_RATE // 2} Hz")
        if self.duration_seconds <= 0:
            raise SignalError("duration must be positive")

    @property
    def num_samples(self) -> int:
        return int(round(self.duration_seconds * SAMPLE_RATE))


def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def mix_sources(
    sources: Sequence[Waveform],
    gains_db: Sequence[float],
    noise: Waveform | None = None,
    overlap_ratio: float | None = None,
) -> MixtureExample:
    """Scale each source to the given RMS level (dB re full scale) and sum them.

    The returned example carries the scaled sources as ground truth.
    """
    if len(sources) != len(gains_db):
        raise SignalError(f"{len(sources)} sources but {len(gains_db)} gains")
    if len({len(s) for s in sources}) != 1:
        raise SignalError("sources differ in length")
    scaled = []
    for s, g in zip(sources, gains_db):
        level = rms(s.samples)
        if level == 0.0:
            raise SignalError("cannot set the level of an all-zero source")
        scaled.append(Waveform(s.samples * (10.0 ** (g / 20.0) / level)))
    total = np.sum([s.samples for s in scaled], axis=0)
    if noise is not None:
        if len(noise) != len(scaled[0]):
            raise SignalError("noise length differs from sources")
        total = total + noise.samples
    return MixtureExample(Waveform(total), tuple(scaled), noise, overlap_ratio)


def _tone(n: int, band: tuple[float, float], rng: np.random.Generator, n_partials: int = 3) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    freqs = rng.uniform(band[0], band[1], size=n_partials)
    phases = rng.uniform(0.0, 2 * np.pi, size=n_partials)
    amps = rng.uniform(0.5, 1.0, size=n_partials)
    x = (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None])).sum(axis=0)
    # slow envelope, a few Hz wide, keeps energy inside the band
    mod_rate = rng.uniform(1.0, 4.0)
    mod_phase = rng.uniform(0.0, 2 * np.pi)
    return x * (1.0 + 0.3 * np.sin(2 * np.pi * mod_rate * t + mod_phase))


def synth_sources(cfg: SynthConfig, rng: np.random.Generator, num_samples: int | None = None) -> list[Waveform]:
    """One sum-of-sinusoids source per frequency profile."""
    n = cfg.num_samples if num_samples is None else num_samples
    return [Waveform(_tone(n, cfg.source_profiles[i], rng)) for i in range(cfg.num_sources)]


def synth_mixture(cfg: SynthConfig, rng: np.random.Generator) -> MixtureExample:
    sources = synth_sources(cfg, rng)
    gains = rng.uniform(*cfg.gain_db_range, size=len(sources))
    return mix_sources(sources, gains)


def synth_sparse_mixture(cfg: SynthConfig, overlap_ratio: float, rng: np.random.Generator) -> MixtureExample:
    """Two-source mixture whose active regions overlap by ``overlap_ratio``.

    Source 1 occupies the start of the segment and source 2 the end, each
    active for ``a`` samples; the overlap ``2a - t`` over the union ``t``
    gives the ratio, rounded to whole samples.
    """
    if not 0.0 <= overlap_ratio <= 1.0:
        raise SignalError(f"overlap ratio must lie in [0, 1], got {overlap_ratio}")
    if cfg.num_sources != 2:
        raise SignalError("sparse mixtures are defined for two sources")
    t = cfg.num_samples
    active = int(math.floor(t * (1.0 + overlap_ratio) / 2.0 + 0.5))
    active = min(max(active, 1), t)
    tones = synth_sources(cfg, rng, num_samples=active)
    s1 = np.zeros(t)
    s2 = np.zeros(t)
    s1[:active] = tones[0].samples
    s2[t - active :] = tones[1].samples
    gains = rng.uniform(*cfg.gain_db_range, size=2)
    return mix_sources([Waveform(s1), Waveform(s2)], gains, overlap_ratio=overlap_ratio)


def measured_overlap_ratio(example: MixtureExample) -> float:
    a = example.sources[0].samples != 0
    b = example.sources[1].samples != 0
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


# ---------------------------------------------------------------------------
# metrics


def _as_array(x) -> np.ndarray:
    return x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)


def _unit(x: np.ndarray) -> np.ndarray:
    """Mean-removed copy of ``x`` scaled to unit energy along the last axis.

    An all-constant row stays at zero.
    """
    x = x - x.mean(axis=-1, keepdims=True)
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return x / np.where(norm > 0.0, norm, 1.0)


def si_sdr(estimate, reference) -> float:
    """Scale-invariant SDR in dB.

    Both signals are brought to unit energy before projecting, which leaves
    the ratio untouched but makes the epsilon guard scale-free: an exact
    match scores the same 120 dB at any gain.
    """
    est = _as_array(estimate)
    ref = _as_array(reference)
    if est.shape != ref.shape:
        raise SignalError(f"length mismatch {est.shape} vs {ref.shape}")
    if np.all(ref == ref[0]):
        raise SignalError("reference is constant; SI-SDR is undefined")
    est = _unit(est)
    ref = _unit(ref)
    target = np.dot(est, ref) * ref
    noise = est - target
    with np.errstate(divide="ignore"):
        return float(10.0 * np.log10(np.dot(target, target) / (np.dot(noise, noise) + SI_SDR_EPS)))


def si_sdr_improvement(estimate, reference, mixture) -> float:
    return si_sdr(estimate, reference) - si_sdr(mixture, reference)


def snr(estimate, reference) -> float:
    """Plain mean-removed SNR in dB, without projection (diagnostics only)."""
    est = _as_array(estimate)
    ref = _as_array(reference)
    est = est - est.mean()
    ref = ref - ref.mean()
    err = est - ref
    return float(10.0 * np.log10(np.dot(ref, ref) / (np.dot(err, err) + SI_SDR_EPS)))


def si_sdr_tensor(estimate: ad.Tensor, reference: np.ndarray) -> ad.Tensor:
    """Differentiable SI-SDR along the last axis; ``reference`` is constant.

    Returns one value per leading index, shape ``estimate.shape[:-1]``.
    """
    est = estimate.data
    ref = np.asarray(reference, dtype=np.float64)
    if est.shape != ref.shape:
        raise SignalError(f"length mismatch {est.shape} vs {ref.shape}")
    if np.any(np.all(ref == ref[..., :1], axis=-1)):
        raise SignalError("reference is constant; SI-SDR is undefined")
    e = est - est.mean(axis=-1, keepdims=True)
    e_norm = np.sqrt((e * e).sum(axis=-1, keepdims=True))
    u = e / np.where(e_norm > 0.0, e_norm, 1.0)
    r = _unit(ref)
    c = (u * r).sum(axis=-1, keepdims=True)
    noise = u - c * r
    p = (c * c)[..., 0]
    q = (noise * noise).sum(axis=-1) + SI_SDR_EPS
    with np.errstate(divide="ignore"):
        value = 10.0 * np.log10(p / q)
    out_shape = value.shape if value.ndim else (1,)

    def backward(g):
        g = g.reshape(p.shape)
        k = (20.0 / np.log(10.0)) * g
        # value depends on the estimate only through c = <u, r>, and
        # ||noise||^2 = 1 - c^2, so dV/dc = k (1/c + c/q)
        cc = c[..., 0]
        dv_dc = k * (1.0 / np.where(cc != 0.0, cc, np.inf) + cc / q)
        dc_de = (r - c * u) / np.where(e_norm > 0.0, e_norm, np.inf)
        ge = dv_dc[..., None] * dc_de
        return (ge - ge.mean(axis=-1, keepdims=True),)

    return ad._result(value.reshape(out_shape), (estimate,), backward, "si_sdr")


# ---------------------------------------------------------------------------
# WAV I/O

_PCM = 1
_FLOAT = 3


def write_wav(path, wave: Waveform, fmt: str = "float32") -> None:
    """Write a mono WAV file as ``"float32"`` or ``"pcm16"``."""
    x = wave.samples
    if fmt == "float32":
        payload = x.astype("<f4").tobytes()
        tag, bits = _FLOAT, 32
    elif fmt == "pcm16":
        q = np.sign(x) * np.floor(np.abs(x) * 32768.0 + 0.5)
        payload = np.clip(q, -32768, 32767).astype("<i2").tobytes()
        tag, bits = _PCM, 16
    else:
        raise WavFormatError(f"unsupported output format {fmt!r}")
    block = bits // 8
    fmt_chunk = struct.pack("<HHIIHH", tag, 1, wave.sample_rate, wave.sample_rate * block, block, bits)
    chunks = b"fmt " + struct.pack("<I", len(fmt_chunk)) + fmt_chunk
    if tag == _FLOAT:
        chunks += b"fact" + struct.pack("<II", 4, x.size)
    chunks += b"data" + struct.pack("<I", len(payload)) + payload
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks)


def read_wav(path) -> Waveform:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid = raw[pos : pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8 : pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise WavFormatError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body)
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise WavFormatError(f"{path}: missing fmt or data chunk")
    tag, channels, rate, _, _, bits = fmt
    if channels != 1:
        raise WavFormatError(f"{path}: expected mono audio, found {channels} channels")
    if rate != SAMPLE_RATE:
        raise WavFormatError(f"{path}: expected {SAMPLE_RATE} Hz, found {rate} Hz")
    if tag == _PCM and bits == 16:
        samples = np.frombuffer(data[: len(data) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    elif tag == _FLOAT and bits == 32:
        samples = np.frombuffer(data[: len(data) // 4 * 4], dtype="<f4").astype(np.float64)
    else:
        raise WavFormatError(f"{path}: unsupported codec (format tag {tag}, {bits} bits)")
    if samples.size == 0:
        raise WavFormatError(f"{path}: no samples")
    return Waveform(samples, rate)
