"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected and repeated in the terminal summary under
"acceptance criteria". Criteria 6 and 7 share one module-scoped experiment
that trains four desk-scale models through the command line; it takes
roughly twenty minutes per variant on one CPU core. Set
SEPFORGE_ACCEPTANCE_OUT to keep the run directories for inspection.
"""

import csv
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from sepforge import autodiff as ad
from sepforge.autodiff import LstmParams, Tensor
from sepforge.cli import main
from sepforge.codec import ChunkConfig, CodecConfig, chunk_layout, encode, encoded_length, merge, segment
from sepforge.gradcheck import check_gradients
from sepforge.separator import ModelConfig, Separator, forward, mapping_head, masks, run_separator
from sepforge.signal import si_sdr, si_sdr_tensor
from sepforge.training import (
    HctConfig,
    batch_pit_loss,
    hct_loss,
    hct_weight,
    pairwise_neg_sisdr_matrix,
    pit_assign,
    sample_early_break,
)

# Regression threshold pinned after the first complete desk run. The weakest
# of the four variants reached 27.2 dB on the test split; 20 dB leaves room
# for floating point drift across platforms while staying far above 5 dB.
PINNED_TEST_SISDRI_DB = 20.0
MAX_SECONDS_PER_VARIANT = 30 * 60
GRADIENT_BUDGET_SECONDS = 120.0


def report(lines, number, title, checks):
    """Record one criterion; ``checks`` is a list of (description, ok)."""
    failed = [d for d, ok in checks if not ok]
    status = "PASS" if not failed else "FAIL"
    detail = "; ".join(d for d, _ in checks) if not failed else "failed: " + "; ".join(failed)
    line = f"[{status}] criterion {number}: {title} ({detail})"
    print(line)
    lines.append(line)
    assert not failed, line


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# 1. gradients


def _primitive_cases(rng):
    def leaf(*shape, shift=0.0):
        return Tensor(rng.standard_normal(shape) + shift, requires_grad=True)

    def weigh(fn, out_shape):
        w = Tensor(rng.standard_normal(out_shape))
        return lambda: ad.sum(ad.mul(fn(), w))

    a, b = leaf(3, 4), leaf(3, 4)
    m1, m2 = leaf(3, 4), leaf(4, 2)
    pos = leaf(3, 4, shift=3.0)
    v = leaf(4)
    x_conv, k_conv = leaf(2, 30), leaf(3, 2, 5)
    y_conv, k_t = leaf(3, 6), leaf(3, 2, 5)
    sm = leaf(2, 5)
    ln_x, ln_g, ln_b = leaf(3, 6), leaf(6), leaf(6)
    lstm_x = leaf(2, 5, 4)
    lstm_p = LstmParams([leaf(4, 12), leaf(3, 12), leaf(12)], [leaf(4, 12), leaf(3, 12), leaf(12)])
    rep = leaf(2, 17)
    chunks = leaf(2, 5, 6)
    cc = ChunkConfig(6, 3)
    est, ref = leaf(2, 64), rng.standard_normal((2, 64))
    relu_in = Tensor(np.sign(rng.standard_normal((3, 4))) * rng.uniform(0.1, 1.0, (3, 4)), requires_grad=True)

    linear = 1e-6
    return [
        ("add", weigh(lambda: ad.add(a, b), (3, 4)), [a, b], linear),
        ("sub", weigh(lambda: ad.sub(a, b), (3, 4)), [a, b], linear),
        ("mul", weigh(lambda: ad.mul(a, b), (3, 4)), [a, b], linear),
        ("div", weigh(lambda: ad.div(a, pos), (3, 4)), [a, pos], 1e-4),
        ("scale", weigh(lambda: ad.scale(a, -2.5), (3, 4)), [a], linear),
        ("neg", weigh(lambda: ad.neg(a), (3, 4)), [a], linear),
        ("relu", weigh(lambda: ad.relu(relu_in), (3, 4)), [relu_in], linear),
        ("sigmoid", weigh(lambda: ad.sigmoid(a), (3, 4)), [a], 1e-6),
        ("tanh", weigh(lambda: ad.tanh(a), (3, 4)), [a], 1e-6),
        ("log", weigh(lambda: ad.log(pos), (3, 4)), [pos], 1e-6),
        ("add_bias", weigh(lambda: ad.add_bias(a, v), (3, 4)), [a, v], linear),
        ("sum", weigh(lambda: ad.sum(a, axis=0), (4,)), [a], linear),
        ("mean", weigh(lambda: ad.mean(a, axis=1), (3,)), [a], linear),
        ("matmul", weigh(lambda: ad.matmul(m1, m2), (3, 2)), [m1, m2], linear),
        ("transpose", weigh(lambda: ad.transpose(a, (1, 0)), (4, 3)), [a], linear),
        ("reshape", weigh(lambda: ad.reshape(a, (2, 6)), (2, 6)), [a], linear),
        ("concat", weigh(lambda: ad.concat([a, b], axis=1), (3, 8)), [a, b], linear),
        ("index", weigh(lambda: ad.index(a, (np.array([0, 2, 2]), np.array([1, 1, 3]))), (3,)), [a], linear),
        ("softmax", weigh(lambda: ad.softmax(sm, axis=-1), (2, 5)), [sm], 1e-6),
        ("layer_norm", weigh(lambda: ad.layer_norm(ln_x, ln_g, ln_b), (3, 6)), [ln_x, ln_g, ln_b], 1e-5),
        ("conv1d", weigh(lambda: ad.conv1d(x_conv, k_conv, 3), (3, 9)), [x_conv, k_conv], linear),
        ("conv1d_transpose", weigh(lambda: ad.conv1d_transpose(y_conv, k_t, 3), (2, 20)), [y_conv, k_t], linear),
        ("lstm (bidirectional)", weigh(lambda: ad.lstm_sequence(lstm_x, lstm_p), (2, 5, 6)),
         [lstm_x, *lstm_p.tensors()], 1e-4),
        ("segment", weigh(lambda: segment(rep, cc)[0], (2, 5, 6)), [rep], linear),
        ("merge", weigh(lambda: merge(chunks, cc, chunk_layout(17, cc)), (2, 17)), [chunks], linear),
        ("si_sdr", weigh(lambda: si_sdr_tensor(est, ref), (2,)), [est], 1e-4),
    ]


def test_criterion_1_gradient_correctness(acceptance_lines):
    start = time.perf_counter()
    checks = []
    for name, fn, tensors, tol in _primitive_cases(np.random.default_rng(0)):
        err = check_gradients(fn, tensors)
        checks.append((f"{name} {err:.1e}<{tol:.0e}", err < tol))
    rng = np.random.default_rng(1)
    for head in ("masking", "mapping"):
        cfg = ModelConfig.build(head=head, n_blocks=2, feature_dim=8, lstm_hidden=8, n_heads=2,
                                n_sources=2, chunk_size=20, hop=10)
        model = Separator.init(cfg, rng)
        x = rng.standard_normal((1, 400))
        targets = rng.standard_normal((1, 2, 400))
        for depth in (1, 2):
            fn = lambda: hct_loss(batch_pit_loss(forward(x, model, depth), targets)[0], depth, 2, HctConfig())  # noqa: E731
            used = [p for n, p in model.params.items() if not n.startswith(f"blocks.{depth}.")]
            err = check_gradients(fn, used, max_entries=4, rng=np.random.default_rng(depth))
            checks.append((f"{head} pipeline i={depth} {err:.1e}<1e-04", err < 1e-4))
    elapsed = time.perf_counter() - start
    checks.append((f"runtime {elapsed:.0f}s<{GRADIENT_BUDGET_SECONDS:.0f}s", elapsed < GRADIENT_BUDGET_SECONDS))
    report(acceptance_lines, 1, "gradient correctness", checks)


# ---------------------------------------------------------------------------
# 2. SI-SDR


def test_criterion_2_si_sdr_oracle(acceptance_lines):
    hand = si_sdr([1.0, -1.0, 1.0, 1.0], [1.0, -1.0, 1.0, -1.0])
    rng = np.random.default_rng(2)
    worst_scale = worst_offset = 0.0
    for _ in range(1000):
        ref = rng.standard_normal(256)
        est = ref * rng.uniform(-1, 1) + rng.standard_normal(256) * rng.uniform(0.01, 3)
        alpha = rng.choice([-1, 1]) * 10 ** rng.uniform(-3, 3)
        offset = rng.uniform(-10, 10)
        base = si_sdr(est, ref)
        worst_scale = max(worst_scale, abs(si_sdr(alpha * est, ref) - base))
        worst_offset = max(worst_offset, abs(si_sdr(est + offset, ref) - base))
    report(acceptance_lines, 2, "SI-SDR oracle", [
        (f"hand case {hand:.5f} dB", abs(hand - (-3.0103)) <= 1e-4),
        (f"scale invariance worst {worst_scale:.1e} dB", worst_scale <= 1e-9),
        (f"offset invariance worst {worst_offset:.1e} dB", worst_offset <= 1e-9),
    ])


# ---------------------------------------------------------------------------
# 3. PIT


def test_criterion_3_pit_oracle(acceptance_lines):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        cost = rng.standard_normal((5, 5)) * 10
        worst = max(worst, abs(pit_assign(cost, "brute").loss - pit_assign(cost, "solver").loss))
    swaps_ok = True
    for c in (2, 3, 4, 5):
        sig = rng.standard_normal((c, 300))
        perm = tuple(int(j) for j in rng.permutation(c))
        est = sig[list(perm)]
        swaps_ok &= pit_assign(pairwise_neg_sisdr_matrix(est, sig)).permutation == perm
    report(acceptance_lines, 3, "PIT oracle", [
        (f"brute vs solver worst {worst:.1e}", worst <= 1e-12),
        ("swapped estimates select the swap", swaps_ok),
    ])


# ---------------------------------------------------------------------------
# 4. HCT


def test_criterion_4_hct_mechanics(acceptance_lines):
    weight = hct_weight(4, 6, HctConfig(decay=0.95))
    rng = np.random.default_rng(4)
    model = Separator.init(ModelConfig.build(n_blocks=3, feature_dim=8, lstm_hidden=8, chunk_size=20, hop=10), rng)
    x, targets = rng.standard_normal((2, 400)), rng.standard_normal((2, 2, 400))
    pit = batch_pit_loss(forward(x, model, 3), targets)[0]
    same = hct_loss(pit, 3, 3, HctConfig())
    bitwise = same.data.tobytes() == pit.data.tobytes() and all(
        hct_loss(v, 6, 6, HctConfig()) == v for v in rng.standard_normal(100) * 1e3
    )
    loss = hct_loss(batch_pit_loss(forward(x, model, 1), targets)[0], 1, 3, HctConfig())
    model.zero_grad()
    loss.backward()
    skipped = [p for n, p in model.params.items() if n.startswith(("blocks.1.", "blocks.2."))]
    zero = all(p.grad is None or not np.any(p.grad) for p in skipped)
    used_nonzero = all(
        p.grad is not None and np.any(p.grad)
        for n, p in model.params.items()
        if n.startswith("blocks.0.") and not n.endswith(".attn.bk")
    )
    sampler = np.random.default_rng(2024)
    draws = np.array([sample_early_break(HctConfig(), 6, sampler) for _ in range(10000)])
    frac = float(np.mean(draws == 6))
    report(acceptance_lines, 4, "HCT mechanics", [
        (f"weight {weight!r} == 0.95**2", weight == 0.95**2 and abs(weight - 0.9025) <= 1e-15),
        ("i=B recovers the PIT loss bit for bit", bitwise),
        (f"{len(skipped)} skipped-layer tensors get zero gradient", zero and used_nonzero),
        (f"P(i=B)={frac:.4f}", 0.48 <= frac <= 0.52),
    ])


# ---------------------------------------------------------------------------
# 5. segmentation and encoder length


def test_criterion_5_segmentation_round_trip(acceptance_lines):
    cfg = ChunkConfig(100, 50)
    rng = np.random.default_rng(5)
    worst = 0.0
    for length in range(1, 501):
        rep = rng.standard_normal((3, length))
        chunks, pad = segment(Tensor(rep), cfg)
        worst = max(worst, float(np.max(np.abs(merge(chunks, cfg, pad).data - rep))))
    codec = CodecConfig(16, 8, 4, "none")
    kernels = Tensor(rng.standard_normal((4, 1, 16)))
    lengths_ok = all(
        encode(rng.standard_normal(t), kernels, codec).shape[-1] == (t - 16) // 8 + 1
        for t in (16, 17, 23, 24, 25, 31, 32, 100, 999, 8000)
    )
    big = encode(rng.standard_normal(24000), kernels, codec).shape[-1]
    report(acceptance_lines, 5, "segmentation round trip", [
        (f"merge(segment(x)) worst {worst:.1e} over L=1..500", worst <= 1e-12),
        ("encoder length formula on a sweep", lengths_ok),
        (f"t=24000 -> L={big}", big == 2999 == encoded_length(24000, codec)),
    ])


# ---------------------------------------------------------------------------
# 6 and 7. desk-scale training experiment

DESK_CONFIG = {
    "seed": 0,
    "model": {"separator": {"n_blocks": 3, "feature_dim": 32, "lstm_hidden": 32, "n_heads": 2}},
    "training": {"epochs": 16, "max_steps": 2000, "batch_size": 2, "segment_seconds": 1.0},
    "data": {"synth": {"duration_seconds": 1.0, "num_train": 500, "num_val": 50, "num_test": 50, "num_sparse": 0}},
}
VARIANTS = [(head, hct) for head in ("masking", "mapping") for hct in ("off", "on")]


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    keep = os.environ.get("SEPFORGE_ACCEPTANCE_OUT")
    root = Path(keep) if keep else tmp_path_factory.mktemp("desk")
    root.mkdir(parents=True, exist_ok=True)
    synth_cfg = root / "synth.json"
    synth_cfg.write_text(json.dumps(DESK_CONFIG))
    data = root / "data"
    assert main(["--quiet", "synth", "--config", str(synth_cfg), "--out", str(data), "--force"]) == 0
    run_cfg = root / "desk.json"
    run_cfg.write_text(json.dumps({**DESK_CONFIG, "data": {**DESK_CONFIG["data"], "dataset_dir": str(data)}}))
    test_manifest = str(data / "test.jsonl")
    results = {}
    for head, hct in VARIANTS:
        out = root / f"{head}-hct-{hct}"
        start = time.perf_counter()
        code = main(["--quiet", "train", "--config", str(run_cfg), "--out", str(out),
                     "--head", head, "--hct", hct, "--force"])
        seconds = time.perf_counter() - start
        assert code == 0, f"training {head}/{hct} exited with {code}"
        ckpt = str(out / "last.ckpt")
        assert main(["--quiet", "eval", "--checkpoint", ckpt, "--manifest", test_manifest, "--out", str(out / "eval")]) == 0
        assert main(["--quiet", "probe-layers", "--checkpoint", ckpt, "--manifest", test_manifest,
                     "--out", str(out / "probe")]) == 0
        metrics = read_csv(out / "metrics.csv")
        epochs = [r for r in metrics if r["val_loss"]]
        results[head, hct] = {
            "seconds": seconds,
            "steps": int(metrics[-1]["step"]),
            "test_sisdri": float(read_csv(out / "eval" / "eval.csv")[-1]["si_sdri"]),
            "val_loss": [float(r["val_loss"]) for r in epochs],
            "layers": [float(r["si_sdri"]) for r in read_csv(out / "probe" / "layers.csv")],
        }
        print(f"{head}/hct-{hct}: {results[head, hct]}")
    return results


def test_criterion_6_desk_training(acceptance_lines, desk):
    checks = []
    for (head, hct), r in desk.items():
        checks.append((f"{head}/hct-{hct} test SI-SDRi {r['test_sisdri']:.2f} dB", r["test_sisdri"] > PINNED_TEST_SISDRI_DB))
        checks.append((f"{r['steps']} steps in {r['seconds'] / 60:.1f} min",
                       r["steps"] <= 2000 and r["seconds"] <= MAX_SECONDS_PER_VARIANT))
    report(acceptance_lines, 6, f"desk training > {PINNED_TEST_SISDRI_DB} dB", checks)


def test_criterion_7_trends(acceptance_lines, desk):
    checks = []
    for head in ("masking", "mapping"):
        pit, hct = desk[head, "off"], desk[head, "on"]
        n = min(len(pit["val_loss"]), len(hct["val_loss"]))
        wins = sum(h <= p for h, p in zip(hct["val_loss"][:n], pit["val_loss"][:n]))
        checks.append((f"(a) {head}: HCT val loss <= PIT at {wins}/{n} epochs", n > 0 and wins >= 0.7 * n))
        layers = hct["layers"]
        monotone = all(b >= a - 0.5 for a, b in zip(layers, layers[1:]))
        checks.append((f"(b) {head} HCT layers {[round(v, 2) for v in layers]}", monotone))
        gap = pit["layers"][-1] - min(pit["layers"][:-1])
        checks.append((f"(c) {head} PIT layers {[round(v, 2) for v in pit['layers']]} gap {gap:.1f} dB", gap >= 5.0))
    report(acceptance_lines, 7, "qualitative trends", checks)


# ---------------------------------------------------------------------------
# 8. determinism


def test_criterion_8_determinism(acceptance_lines, tmp_path):
    cfg = {
        "seed": 8,
        "model": {"separator": {"n_blocks": 2, "feature_dim": 8, "lstm_hidden": 8}, "chunk": {"chunk_size": 20, "hop": 10}},
        "training": {"epochs": 2, "max_steps": None, "batch_size": 2, "segment_seconds": 0.05},
        "data": {"synth": {"duration_seconds": 0.05, "num_train": 4, "num_val": 2, "num_test": 2,
                           "sparse_ratios": [0.0, 1.0], "num_sparse": 1}},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    outputs = []
    for rep in ("a", "b"):
        base = tmp_path / rep
        data = base / "data"
        run = base / "run"
        main(["--quiet", "synth", "--config", str(path), "--out", str(data)])
        main(["--quiet", "train", "--config", str(path), "--out", str(run)])
        main(["--quiet", "eval", "--checkpoint", str(run / "last.ckpt"), "--manifest", str(data / "sparse.jsonl"),
              "--group-by-overlap", "--out", str(base / "eval")])
        main(["--quiet", "probe-layers", "--checkpoint", str(run / "last.ckpt"), "--manifest", str(data / "test.jsonl"),
              "--out", str(base / "probe")])
        main(["--quiet", "compare", "--config", str(path), "--config", str(path), "--out", str(base / "cmp")])
        files = sorted(p for p in base.rglob("*") if p.is_file() and p.suffix in (".csv", ".jsonl", ".wav"))
        outputs.append({str(p.relative_to(base)): p.read_bytes() for p in files})
    csvs = [k for k in outputs[0] if k.endswith(".csv")]
    report(acceptance_lines, 8, "determinism", [
        (f"{len(csvs)} CSVs and {len(outputs[0]) - len(csvs)} data files byte-identical",
         len(csvs) >= 7 and outputs[0] == outputs[1]),
    ])


# ---------------------------------------------------------------------------
# 9. mode contracts


def test_criterion_9_mode_contracts(acceptance_lines):
    rng = np.random.default_rng(9)
    masking = Separator.init(ModelConfig.build(head="masking"), rng)
    nonneg = True
    for scale in (1e-3, 1.0, 1e3):
        for _ in range(3):
            x = rng.standard_normal((2, 800)) * scale + rng.uniform(-scale, scale)
            m, enc = masks(x, masking)
            nonneg &= bool(np.all(m >= 0) and np.all(enc >= 0))
    mapping = Separator.init(ModelConfig.build(head="mapping"), rng)
    x = rng.standard_normal((1, 800))
    enc = encode(x, mapping.params["encoder.kernel"], mapping.cfg.codec)
    chunks, pad = segment(enc, mapping.cfg.chunk)
    reps = mapping_head(run_separator(chunks, mapping), mapping, pad)
    negative = all(np.any(r.data < 0) for r in reps) and bool(np.any(enc.data < 0))
    report(acceptance_lines, 9, "mode contracts", [
        ("masking masks and encoder output nonnegative", nonneg),
        ("mapping representation has negative entries", negative),
    ])
