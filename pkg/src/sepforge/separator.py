"""Attention-augmented dual-path separator with masking and mapping heads.

Each block runs an intra-chunk pass (along the S axis) and then an
inter-chunk pass (along the K axis).  Both passes are an attention
sublayer followed by a recurrent feedforward sublayer: bidirectional
LSTM straight into a linear projection, with no activation in between.
Sublayers are post-norm (sublayer, residual add, layer norm).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import LstmParams, Tensor
from .codec import ChunkConfig, CodecConfig, Padding, decode, encode, merge, segment
from .signal import Waveform

CHECKPOINT_MAGIC = b"SEPFORGE-CKPT-v1\n"
HEADS = ("masking", "mapping")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class SeparatorConfig:
    n_blocks: int = 3
    feature_dim: int = 32
    lstm_hidden: int = 32
    n_heads: int = 2
    head: str = "mapping"
    n_sources: int = 2
    attention_enabled: bool = True

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.n_blocks < 1:
            raise ValueError("need at least one block")
        if self.n_sources < 2:
            raise ValueError("need at least two sources")
        if self.n_heads < 1 or self.feature_dim % self.n_heads:
            raise ValueError(f"feature_dim {self.feature_dim} is not divisible by n_heads {self.n_heads}")
        if self.lstm_hidden < 1:
            raise ValueError("lstm_hidden must be positive")


@dataclass(frozen=True)
class ModelConfig:
    separator: SeparatorConfig = field(default_factory=SeparatorConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    chunk: ChunkConfig = field(default_factory=ChunkConfig)

    def __post_init__(self):
        if self.codec.n_filters != self.separator.feature_dim:
            raise ValueError(
                f"encoder filters ({self.codec.n_filters}) must equal separator feature_dim "
                f"({self.separator.feature_dim})"
            )
        want = "relu" if self.separator.head == "masking" else "none"
        if self.codec.encoder_activation != want:
            raise ValueError(f"{self.separator.head} head requires encoder_activation={want!r}")

    @classmethod
    def build(
        cls,
        head: str = "mapping",
        n_blocks: int = 3,
        feature_dim: int = 32,
        lstm_hidden: int = 32,
        n_heads: int = 2,
        n_sources: int = 2,
        attention_enabled: bool = True,
        window: int = 16,
        stride: int = 8,
        chunk_size: int = 100,
        hop: int = 50,
    ) -> "ModelConfig":
        """Assemble a consistent config; the encoder activation follows the head."""
        return cls(
            SeparatorConfig(n_blocks, feature_dim, lstm_hidden, n_heads, head, n_sources, attention_enabled),
            CodecConfig(window, stride, feature_dim, "relu" if head == "masking" else "none"),
            ChunkConfig(chunk_size, hop),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(SeparatorConfig(**d["separator"]), CodecConfig(**d["codec"]), ChunkConfig(**d["chunk"]))


@dataclass
class PathParams:
    """Weights of one intra or inter sublayer pair."""

    attn: dict[str, Tensor] | None
    norm1: tuple[Tensor, Tensor] | None
    lstm: LstmParams
    ff_w: Tensor
    ff_b: Tensor
    norm2: tuple[Tensor, Tensor]


@dataclass
class BlockParams:
    intra: PathParams
    inter: PathParams


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) for every learnable tensor; norm params use fan_in 0."""
    sc = cfg.separator
    n, h, w, c = sc.feature_dim, sc.lstm_hidden, cfg.codec.window, sc.n_sources
    specs = [("encoder.kernel", (n, 1, w), w), ("decoder.kernel", (n, 1, w), n)]
    for b in range(sc.n_blocks):
        for path in ("intra", "inter"):
            pre = f"blocks.{b}.{path}"
            if sc.attention_enabled:
                for proj in ("q", "k", "v", "o"):
                    specs.append((f"{pre}.attn.w{proj}", (n, n), n))
                    specs.append((f"{pre}.attn.b{proj}", (n,), n))
                specs += [(f"{pre}.norm1.gain", (n,), 0), (f"{pre}.norm1.bias", (n,), 0)]
            for direction in ("fwd", "bwd"):
                specs += [
                    (f"{pre}.lstm.{direction}.w_ih", (n, 4 * h), h),
                    (f"{pre}.lstm.{direction}.w_hh", (h, 4 * h), h),
                    (f"{pre}.lstm.{direction}.b", (4 * h,), h),
                ]
            specs += [
                (f"{pre}.ff.w", (2 * h, n), 2 * h),
                (f"{pre}.ff.b", (n,), 2 * h),
                (f"{pre}.norm2.gain", (n,), 0),
                (f"{pre}.norm2.bias", (n,), 0),
            ]
    specs += [("head.w", (n, c * n), n), ("head.b", (c * n,), n)]
    return specs


class Separator:
    """Model config plus named parameters; the forward functions below read from it."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        expected = {name: shape for name, shape, _ in _param_shapes(cfg)}
        if set(expected) != set(params):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ValueError(f"parameter set mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.cfg = cfg
        self.params = {name: params[name] for name in expected}

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "Separator":
        params = {}
        for name, shape, fan_in in _param_shapes(cfg):
            if fan_in == 0:
                value = np.ones(shape) if name.endswith("gain") else np.zeros(shape)
            else:
                bound = 1.0 / math.sqrt(fan_in)
                value = rng.uniform(-bound, bound, size=shape)
            params[name] = Tensor(value, requires_grad=True, name=name)
        return cls(cfg, params)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def block(self, index: int) -> BlockParams:
        return BlockParams(self._path(index, "intra"), self._path(index, "inter"))

    def _path(self, index: int, path: str) -> PathParams:
        p = self.params
        pre = f"blocks.{index}.{path}"
        attn = None
        norm1 = None
        if self.cfg.separator.attention_enabled:
            attn = {k: p[f"{pre}.attn.{k}"] for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}
            norm1 = (p[f"{pre}.norm1.gain"], p[f"{pre}.norm1.bias"])
        lstm = LstmParams(
            [p[f"{pre}.lstm.fwd.{k}"] for k in ("w_ih", "w_hh", "b")],
            [p[f"{pre}.lstm.bwd.{k}"] for k in ("w_ih", "w_hh", "b")],
        )
        return PathParams(
            attn, norm1, lstm, p[f"{pre}.ff.w"], p[f"{pre}.ff.b"], (p[f"{pre}.norm2.gain"], p[f"{pre}.norm2.bias"])
        )


# ---------------------------------------------------------------------------
# sublayers


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add_bias(ad.matmul(x, w), b)


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return ad.reshape(x, (1,) + x.shape), True
    return x, False


def attention_weights(x: Tensor, attn: dict[str, Tensor], n_heads: int) -> Tensor:
    """Per-head attention weights [M, heads, T, T] for sequences x [M, T, N]."""
    m, t, n = x.shape
    d = n // n_heads
    q = ad.transpose(ad.reshape(_linear(x, attn["wq"], attn["bq"]), (m, t, n_heads, d)), (0, 2, 1, 3))
    k = ad.transpose(ad.reshape(_linear(x, attn["wk"], attn["bk"]), (m, t, n_heads, d)), (0, 2, 3, 1))
    return ad.softmax(ad.scale(ad.matmul(q, k), 1.0 / math.sqrt(d)), axis=-1)


def attention_sublayer(x: Tensor, attn: dict[str, Tensor], norm: tuple[Tensor, Tensor], n_heads: int) -> Tensor:
    """Multi-head self-attention over x [T, N] or [M, T, N], residual add, layer norm.

    No mask and no positional encoding, so the map is equivariant to
    permutations of the T positions.
    """
    x, single = _as_batch(x)
    m, t, n = x.shape
    if n % n_heads:
        raise ad.DimensionError(f"feature size {n} not divisible by {n_heads} heads")
    d = n // n_heads
    weights = attention_weights(x, attn, n_heads)
    v = ad.transpose(ad.reshape(_linear(x, attn["wv"], attn["bv"]), (m, t, n_heads, d)), (0, 2, 1, 3))
    ctx = ad.reshape(ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)), (m, t, n))
    out = ad.layer_norm(ad.add(x, _linear(ctx, attn["wo"], attn["bo"])), *norm)
    return ad.reshape(out, out.shape[1:]) if single else out


def improved_feedforward(x: Tensor, lstm: LstmParams, w: Tensor, b: Tensor, norm: tuple[Tensor, Tensor]) -> Tensor:
    """Bidirectional LSTM, linear projection back to N, residual add, layer norm."""
    x, single = _as_batch(x)
    y = _linear(ad.lstm_sequence(x, lstm, bidirectional=True), w, b)
    out = ad.layer_norm(ad.add(x, y), *norm)
    return ad.reshape(out, out.shape[1:]) if single else out


def _sublayers(x: Tensor, p: PathParams, n_heads: int) -> Tensor:
    if p.attn is not None:
        x = attention_sublayer(x, p.attn, p.norm1, n_heads)
    return improved_feedforward(x, p.lstm, p.ff_w, p.ff_b, p.norm2)


def attn_aug_block(chunks: Tensor, params: BlockParams, n_heads: int) -> Tensor:
    """One dual-path block on chunks [N, K, S] or [batch, N, K, S]."""
    single = chunks.ndim == 3
    if single:
        chunks = ad.reshape(chunks, (1,) + chunks.shape)
    b, n, k, s = chunks.shape
    x = ad.transpose(chunks, (0, 2, 3, 1))  # [b, K, S, N]
    x = _sublayers(ad.reshape(x, (b * k, s, n)), params.intra, n_heads)
    x = ad.transpose(ad.reshape(x, (b, k, s, n)), (0, 2, 1, 3))  # [b, S, K, N]
    x = _sublayers(ad.reshape(x, (b * s, k, n)), params.inter, n_heads)
    out = ad.transpose(ad.reshape(x, (b, s, k, n)), (0, 3, 2, 1))
    return ad.reshape(out, out.shape[1:]) if single else out


def run_separator(chunks: Tensor, model: Separator, early_break: int | None = None, trace: list | None = None) -> Tensor:
    """Apply blocks 1..early_break (all of them when None) in order.

    Indices of the blocks actually run are appended to ``trace``.
    """
    n_blocks = model.cfg.separator.n_blocks
    depth = n_blocks if early_break is None else early_break
    if not 1 <= depth <= n_blocks:
        raise ValueError(f"early-break index {depth} outside 1..{n_blocks}")
    for i in range(depth):
        chunks = attn_aug_block(chunks, model.block(i), model.cfg.separator.n_heads)
        if trace is not None:
            trace.append(i + 1)
    return chunks


# ---------------------------------------------------------------------------
# output heads


def _project_sources(rep: Tensor, model: Separator, pad: Padding) -> Tensor:
    """Merge chunks and apply the 1x1 head projection: [b, N, K, S] -> [b, c, N, L]."""
    c = model.cfg.separator.n_sources
    merged = merge(rep, model.cfg.chunk, pad)  # [b, N, L]
    b, n, length = merged.shape
    proj = _linear(ad.transpose(merged, (0, 2, 1)), model.params["head.w"], model.params["head.b"])
    return ad.transpose(ad.reshape(proj, (b, length, c, n)), (0, 2, 3, 1))


def _stacked_masking(rep: Tensor, mix_encoding: Tensor, model: Separator, pad: Padding) -> Tensor:
    if model.cfg.separator.head != "masking":
        raise ValueError("masking head called on a mapping-mode model")
    masks = ad.relu(_project_sources(rep, model, pad))
    b, c, n, length = masks.shape
    mix = ad.reshape(mix_encoding, (b, 1, n, length))
    return ad.mul(masks, ad.concat([mix] * c, axis=1))


def _stacked_mapping(rep: Tensor, model: Separator, pad: Padding) -> Tensor:
    if model.cfg.separator.head != "mapping":
        raise ValueError("mapping head called on a masking-mode model")
    return _project_sources(rep, model, pad)


def _unstack(stacked: Tensor, single: bool) -> list[Tensor]:
    out = []
    for i in range(stacked.shape[1]):
        t = ad.index(stacked, (slice(None), i))
        out.append(ad.reshape(t, t.shape[1:]) if single else t)
    return out


def masking_head(rep: Tensor, mix_encoding: Tensor, model: Separator, pad: Padding) -> list[Tensor]:
    """Nonnegative masks times the mixture encoding, one [N, L] tensor per source."""
    single = rep.ndim == 3
    if single:
        rep = ad.reshape(rep, (1,) + rep.shape)
        mix_encoding = ad.reshape(mix_encoding, (1,) + mix_encoding.shape)
    return _unstack(_stacked_masking(rep, mix_encoding, model, pad), single)


def mapping_head(rep: Tensor, model: Separator, pad: Padding) -> list[Tensor]:
    """Source representations predicted directly, one [N, L] tensor per source."""
    single = rep.ndim == 3
    if single:
        rep = ad.reshape(rep, (1,) + rep.shape)
    return _unstack(_stacked_mapping(rep, model, pad), single)


def masks(x: np.ndarray, model: Separator, early_break: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Masking mode diagnostics: (masks [b, c, N, L], encoder output [b, N, L])."""
    with ad.no_grad():
        enc = encode(np.atleast_2d(x), model.params["encoder.kernel"], model.cfg.codec)
        chunks, pad = segment(enc, model.cfg.chunk)
        rep = run_separator(chunks, model, early_break)
        m = ad.relu(_project_sources(rep, model, pad))
    return m.data, enc.data


def forward(x, model: Separator, early_break: int | None = None, trace: list | None = None) -> Tensor:
    """Separate a batch of mixtures [b, t] into estimates [b, c, t]."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = x.shape[-1]
    cfg = model.cfg
    enc = encode(x, model.params["encoder.kernel"], cfg.codec)
    chunks, pad = segment(enc, cfg.chunk)
    rep = run_separator(chunks, model, early_break, trace)
    if cfg.separator.head == "masking":
        sources = _stacked_masking(rep, enc, model, pad)
    else:
        sources = _stacked_mapping(rep, model, pad)
    return decode(sources, model.params["decoder.kernel"], cfg.codec, length=t)


def separate(x: Waveform, model: Separator, early_break: int | None = None) -> list[Waveform]:
    with ad.no_grad():
        est = forward(x.samples[None], model, early_break)
    return [Waveform(est.data[0, i].copy(), x.sample_rate) for i in range(est.shape[1])]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    path,
    model: Separator,
    extra: dict[str, np.ndarray] | None = None,
    meta: dict[str, Any] | None = None,
) -> None:
    """Write config, parameters and optional extra arrays/metadata to one file.

    Layout: magic line, little-endian u64 header size, JSON header, then
    the float64 arrays back to back in header order.
    """
    arrays = {f"param/{k}": v.data for k, v in model.params.items()}
    for k, v in (extra or {}).items():
        arrays[f"extra/{k}"] = np.asarray(v, dtype=np.float64)
    entries = []
    offset = 0
    for name, arr in arrays.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = json.dumps(
        {"config": model.cfg.to_dict(), "arrays": entries, "meta": meta or {}}, sort_keys=True
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[Separator, dict[str, np.ndarray], dict[str, Any]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a {CHECKPOINT_MAGIC.decode().strip()} checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    (size,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    header = json.loads(raw[pos : pos + size])
    base = pos + size
    params: dict[str, Tensor] = {}
    extra: dict[str, np.ndarray] = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        if start + 8 * count > len(raw):
            raise CheckpointError(f"{path}: truncated array {e['name']}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start).astype(np.float64).reshape(e["shape"])
        kind, name = e["name"].split("/", 1)
        if kind == "param":
            params[name] = Tensor(arr, requires_grad=True, name=name)
        else:
            extra[name] = arr
    model = Separator(ModelConfig.from_dict(header["config"]), params)
    return model, extra, header["meta"]
