"""Permutation invariant training, hierarchical constraint training and the training loop."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import Tensor
from .separator import Separator, forward
from .signal import MixtureExample, Waveform, si_sdr, si_sdr_tensor

logger = logging.getLogger(__name__)

BRUTE_FORCE_MAX = 5
CSV_HEADER = ("epoch", "step", "train_loss", "val_loss", "val_sisdri", "lr", "early_break_index")


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, early_break: int, lr: float, detail: str = "non-finite loss"):
        super().__init__(f"{detail} at step {step} (early-break index {early_break}, lr {lr:g})")
        self.step = step
        self.early_break = early_break
        self.lr = lr


# ---------------------------------------------------------------------------
# PIT


@dataclass(frozen=True)
class PitResult:
    permutation: tuple[int, ...]  # estimate i is assigned to target permutation[i] (0-based)
    loss: float


def pairwise_neg_sisdr_matrix(estimates, targets) -> np.ndarray:
    """Entry (i, j) is -SI-SDR(estimate_i, target_j)."""
    est = [e.samples if isinstance(e, Waveform) else np.asarray(e) for e in estimates]
    tgt = [t.samples if isinstance(t, Waveform) else np.asarray(t) for t in targets]
    return np.array([[-si_sdr(e, t) for t in tgt] for e in est])


def pairwise_neg_sisdr_tensor(estimates: Tensor, targets: np.ndarray) -> Tensor:
    """Differentiable pairwise matrix: estimates [b, c, t], targets [b, c, t] -> [b, c, c]."""
    b, c, t = estimates.shape
    rows = np.repeat(np.arange(c), c)
    cols = np.tile(np.arange(c), c)
    est = ad.index(estimates, (slice(None), rows))
    values = si_sdr_tensor(est, np.asarray(targets)[:, cols])
    return ad.scale(ad.reshape(values, (b, c, c)), -1.0)


def pit_brute_force(cost: np.ndarray) -> PitResult:
    c = cost.shape[0]
    best = None
    # itertools.permutations is lexicographic, and only strict improvements replace the incumbent
    for perm in itertools.permutations(range(c)):
        total = float(cost[np.arange(c), perm].mean())
        if best is None or total < best.loss:
            best = PitResult(perm, total)
    return best


def pit_solver(cost: np.ndarray) -> PitResult:
    rows, cols = linear_sum_assignment(cost)
    perm = tuple(int(j) for j in cols[np.argsort(rows)])
    return PitResult(perm, float(cost[np.arange(len(perm)), perm].mean()))


def pit_assign(cost, method: str = "auto") -> PitResult:
    """Minimum-mean assignment of estimates (rows) to targets (columns)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"PIT needs a square cost matrix, got shape {cost.shape}")
    if method == "auto":
        method = "brute" if cost.shape[0] <= BRUTE_FORCE_MAX else "solver"
    if method == "brute":
        return pit_brute_force(cost)
    if method == "solver":
        return pit_solver(cost)
    raise ValueError(f"unknown PIT method {method!r}")


# ---------------------------------------------------------------------------
# HCT


@dataclass
class HctConfig:
    enabled: bool = True
    decay: float = 0.95
    full_depth_fraction: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.decay <= 1.0:
            raise ValueError(f"decay must lie in (0, 1], got {self.decay}")
        if not 0.0 <= self.full_depth_fraction <= 1.0:
            raise ValueError(f"full_depth_fraction must lie in [0, 1], got {self.full_depth_fraction}")


def sample_early_break(hct: HctConfig, n_blocks: int, rng: np.random.Generator) -> int:
    """Full depth with probability ``full_depth_fraction``, else uniform over 1..B-1."""
    if not hct.enabled:
        return n_blocks
    if n_blocks < 2:
        raise ValueError("hierarchical constraint training needs at least two blocks")
    if rng.random() < hct.full_depth_fraction:
        return n_blocks
    return int(rng.integers(1, n_blocks))


def hct_weight(early_break: int, n_blocks: int, hct: HctConfig) -> float:
    if not 1 <= early_break <= n_blocks:
        raise ValueError(f"early-break index {early_break} outside 1..{n_blocks}")
    return hct.decay ** (n_blocks - early_break)


def hct_loss(pit_loss, early_break: int, n_blocks: int, hct: HctConfig):
    """Scale a PIT loss (float or Tensor) by decay ** (B - i)."""
    weight = hct_weight(early_break, n_blocks, hct)
    if weight == 1.0:
        return pit_loss
    if isinstance(pit_loss, Tensor):
        return ad.scale(pit_loss, weight)
    return weight * pit_loss


# ---------------------------------------------------------------------------
# optimizer


def clip_gradients(params: Sequence[Tensor], max_norm: float = 5.0) -> float:
    """Rescale all gradients so their global L2 norm is at most ``max_norm``; returns the norm before clipping."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


@dataclass
class TrainState:
    seed: int = 0
    step: int = 0
    epoch: int = 0
    lr: float = 1e-3
    plateau_count: int = 0
    best_val_loss: float = math.inf
    moments: dict[str, tuple[np.ndarray, np.ndarray, int]] = field(default_factory=dict)
    early_break_counts: dict[int, int] = field(default_factory=dict)
    log: list[dict] = field(default_factory=list)
    batch_rng: np.random.Generator | None = None
    break_rng: np.random.Generator | None = None

    def scalars(self) -> dict:
        return {
            "seed": self.seed,
            "step": self.step,
            "epoch": self.epoch,
            "lr": self.lr,
            "plateau_count": self.plateau_count,
            "best_val_loss": None if math.isinf(self.best_val_loss) else self.best_val_loss,
            "early_break_counts": {str(k): v for k, v in self.early_break_counts.items()},
            "log": self.log,
            "batch_rng": self.batch_rng.bit_generator.state if self.batch_rng else None,
            "break_rng": self.break_rng.bit_generator.state if self.break_rng else None,
            "moment_steps": {k: v[2] for k, v in self.moments.items()},
        }

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, (m, v, _) in self.moments.items():
            out[f"adam_m/{name}"] = m
            out[f"adam_v/{name}"] = v
        return out

    @classmethod
    def restore(cls, scalars: dict, arrays: dict[str, np.ndarray]) -> "TrainState":
        state = cls(
            seed=scalars["seed"],
            step=scalars["step"],
            epoch=scalars["epoch"],
            lr=scalars["lr"],
            plateau_count=scalars["plateau_count"],
            best_val_loss=math.inf if scalars["best_val_loss"] is None else scalars["best_val_loss"],
            early_break_counts={int(k): v for k, v in scalars["early_break_counts"].items()},
            log=list(scalars["log"]),
        )
        for name, steps in scalars["moment_steps"].items():
            state.moments[name] = (arrays[f"adam_m/{name}"].copy(), arrays[f"adam_v/{name}"].copy(), steps)
        for attr in ("batch_rng", "break_rng"):
            if scalars[attr] is not None:
                rng = np.random.default_rng()
                rng.bit_generator.state = scalars[attr]
                setattr(state, attr, rng)
        return state


def adam_step(
    params: dict[str, Tensor],
    state: TrainState,
    lr: float | None = None,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update, then clear gradients.

    Parameters without a gradient (not reached by the last backward pass)
    are left untouched, moments included.
    """
    lr = state.lr if lr is None else lr
    for name, p in params.items():
        if p.grad is None:
            continue
        m, v, t = state.moments.get(name, (np.zeros(p.shape), np.zeros(p.shape), 0))
        t += 1
        m = beta1 * m + (1.0 - beta1) * p.grad
        v = beta2 * v + (1.0 - beta2) * p.grad * p.grad
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        new.flags.writeable = False
        p.data = new
        state.moments[name] = (m, v, t)
        p.grad = None
    state.step += 1


@dataclass
class PlateauConfig:
    patience: int = 5
    factor: float = 0.5
    min_lr: float = 1e-6
    threshold: float = 1e-4


def lr_plateau_step(state: TrainState, val_loss: float, cfg: PlateauConfig | None = None) -> float:
    """Halve (by default) the learning rate after ``patience`` epochs without improvement."""
    cfg = cfg or PlateauConfig()
    if val_loss < state.best_val_loss - cfg.threshold:
        state.best_val_loss = val_loss
        state.plateau_count = 0
    else:
        state.plateau_count += 1
        if state.plateau_count >= cfg.patience:
            state.lr = max(state.lr * cfg.factor, cfg.min_lr)
            state.plateau_count = 0
    return state.lr


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    epochs: int = 16
    max_steps: int | None = 2000
    batch_size: int = 2
    segment_seconds: float = 1.0
    lr: float = 1e-3
    clip_norm: float = 5.0
    patience: int = 5
    lr_factor: float = 0.5
    min_lr: float = 1e-6
    hct: HctConfig = field(default_factory=HctConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be positive (or null for no cap)")
        if self.segment_seconds <= 0 or self.lr <= 0 or self.clip_norm <= 0:
            raise ValueError("segment_seconds, lr and clip_norm must be positive")
        if self.patience < 1 or not 0 < self.lr_factor < 1 or not 0 < self.min_lr <= self.lr:
            raise ValueError("need patience >= 1, 0 < lr_factor < 1 and 0 < min_lr <= lr")

    def plateau(self) -> PlateauConfig:
        return PlateauConfig(self.patience, self.lr_factor, self.min_lr)

    def to_dict(self) -> dict:
        return asdict(self)


def _stack(examples: Sequence[MixtureExample]) -> tuple[np.ndarray, np.ndarray]:
    return (
        np.stack([e.mixture.samples for e in examples]),
        np.stack([e.source_matrix() for e in examples]),
    )


def _crop(mix: np.ndarray, src: np.ndarray, length: int, rng: np.random.Generator):
    t = mix.shape[-1]
    if t <= length:
        return mix, src
    start = rng.integers(0, t - length + 1, size=mix.shape[0])
    mix = np.stack([m[s : s + length] for m, s in zip(mix, start)])
    src = np.stack([x[:, s : s + length] for x, s in zip(src, start)])
    return mix, src


def batch_pit_loss(estimates: Tensor, targets: np.ndarray) -> tuple[Tensor, list[PitResult]]:
    """Mean over examples of the PIT-optimal mean negative SI-SDR."""
    matrix = pairwise_neg_sisdr_tensor(estimates, targets)
    b, c, _ = matrix.shape
    results = [pit_assign(matrix.data[k]) for k in range(b)]
    ex = np.repeat(np.arange(b), c)
    rows = np.tile(np.arange(c), b)
    cols = np.concatenate([r.permutation for r in results])
    chosen = ad.index(matrix, (ex, rows, cols))
    return ad.mean(chosen), results


def score_example(estimates: np.ndarray, sources: np.ndarray, mixture: np.ndarray) -> dict:
    """PIT-optimal loss and SI-SDRi of ``estimates`` [c, t] against ``sources`` [c, t]."""
    cost = pairwise_neg_sisdr_matrix(estimates, sources)
    res = pit_assign(cost)
    base = [si_sdr(mixture, s) for s in sources]
    gains = [-cost[i, j] - base[j] for i, j in enumerate(res.permutation)]
    return {"loss": res.loss, "si_sdri": float(np.mean(gains)), "permutation": res.permutation}


def evaluate_examples(
    model: Separator,
    examples: Sequence[MixtureExample],
    early_break: int | None = None,
    batch_size: int = 8,
) -> list[dict]:
    """Per-example PIT loss and SI-SDRi (PIT-optimal assignment) at a given depth.

    Examples are batched only when they share a length.
    """
    rows = []
    with ad.no_grad():
        start = 0
        while start < len(examples):
            n = len(examples[start].mixture)
            stop = start + 1
            while stop < len(examples) and stop - start < batch_size and len(examples[stop].mixture) == n:
                stop += 1
            chunk = examples[start:stop]
            mix, src = _stack(chunk)
            est = forward(mix, model, early_break).data
            rows.extend(score_example(est[k], src[k], mix[k]) for k in range(len(chunk)))
            start = stop
    return rows


def validate(model: Separator, examples: Sequence[MixtureExample], early_break: int | None = None) -> tuple[float, float]:
    rows = evaluate_examples(model, examples, early_break)
    return float(np.mean([r["loss"] for r in rows])), float(np.mean([r["si_sdri"] for r in rows]))


def new_state(seed: int, lr: float) -> TrainState:
    root = np.random.SeedSequence(seed)
    batch_seq, break_seq = root.spawn(2)
    return TrainState(
        seed=seed,
        lr=lr,
        batch_rng=np.random.default_rng(batch_seq),
        break_rng=np.random.default_rng(break_seq),
    )


def train(
    model: Separator,
    train_set: Sequence[MixtureExample],
    val_set: Sequence[MixtureExample],
    cfg: TrainConfig,
    seed: int = 0,
    state: TrainState | None = None,
    on_epoch_end: Callable[[Separator, TrainState], None] | None = None,
    stop_after_epoch: int | None = None,
) -> TrainState:
    """Train in place; resumes from ``state`` when given.

    One log row per step; validation columns are filled on the last step
    of each epoch.
    """
    state = state or new_state(seed, cfg.lr)
    n_blocks = model.cfg.separator.n_blocks
    if cfg.hct.enabled and n_blocks < 2:
        raise ValueError("hierarchical constraint training needs at least two blocks")
    seg_len = int(round(cfg.segment_seconds * model_sample_rate(train_set)))
    steps_per_epoch = len(train_set) // cfg.batch_size
    if steps_per_epoch == 0:
        raise ValueError(f"batch size {cfg.batch_size} exceeds the {len(train_set)} training examples")
    plateau = cfg.plateau()
    while state.epoch < cfg.epochs:
        if cfg.max_steps is not None and state.step >= cfg.max_steps:
            break
        order = state.batch_rng.permutation(len(train_set))
        for k in range(steps_per_epoch):
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                break
            batch = [train_set[j] for j in order[k * cfg.batch_size : (k + 1) * cfg.batch_size]]
            mix, src = _crop(*_stack(batch), seg_len, state.batch_rng)
            depth = sample_early_break(cfg.hct, n_blocks, state.break_rng)
            est = forward(mix, model, early_break=depth)
            pit, _ = batch_pit_loss(est, src)
            loss = hct_loss(pit, depth, n_blocks, cfg.hct)
            value = float(loss.data[0])
            if not math.isfinite(value):
                raise TrainingAborted(state.step, depth, state.lr)
            model.zero_grad()
            loss.backward()
            clip_gradients(model.parameters(), cfg.clip_norm)
            adam_step(model.params, state)
            state.early_break_counts[depth] = state.early_break_counts.get(depth, 0) + 1
            state.log.append(
                {"epoch": state.epoch + 1, "step": state.step, "train_loss": value, "val_loss": None,
                 "val_sisdri": None, "lr": state.lr, "early_break_index": depth}
            )
        val_loss, val_sisdri = validate(model, val_set)
        if not math.isfinite(val_loss):
            raise TrainingAborted(state.step, n_blocks, state.lr, "non-finite validation loss")
        state.log[-1]["val_loss"] = val_loss
        state.log[-1]["val_sisdri"] = val_sisdri
        lr_plateau_step(state, val_loss, plateau)
        state.epoch += 1
        logger.info(
            "epoch %d step %d val_loss %.4f val_sisdri %.3f lr %g", state.epoch, state.step, val_loss, val_sisdri, state.lr
        )
        if on_epoch_end is not None:
            on_epoch_end(model, state)
        if stop_after_epoch is not None and state.epoch >= stop_after_epoch:
            break
    return state


def model_sample_rate(examples: Sequence[MixtureExample]) -> int:
    return examples[0].mixture.sample_rate


def epoch_rows(state: TrainState) -> list[dict]:
    """Log rows that close an epoch (those carrying validation results)."""
    return [r for r in state.log if r["val_loss"] is not None]


def probe_layers(model: Separator, examples: Sequence[MixtureExample]) -> list[tuple[int, float]]:
    """Mean SI-SDRi when the separator stops after each block."""
    out = []
    for i in range(1, model.cfg.separator.n_blocks + 1):
        rows = evaluate_examples(model, examples, early_break=i)
        out.append((i, float(np.mean([r["si_sdri"] for r in rows]))))
    return out
