import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sepforge import autodiff as ad
from sepforge.gradcheck import check_gradients
from sepforge.signal import (
    SAMPLE_RATE,
    MixtureExample,
    SignalError,
    SynthConfig,
    Waveform,
    WavFormatError,
    measured_overlap_ratio,
    mix_sources,
    read_wav,
    rms,
    si_sdr,
    si_sdr_improvement,
    si_sdr_tensor,
    snr,
    synth_mixture,
    synth_sources,
    synth_sparse_mixture,
    write_wav,
)


def brute_si_sdr(est, ref):
    """Projection via least squares on the centred reference; independent of the library route."""
    est = np.asarray(est, float) - np.mean(est)
    ref = np.asarray(ref, float) - np.mean(ref)
    coef, *_ = np.linalg.lstsq(ref[:, None], est, rcond=None)
    target = ref * coef[0]
    resid = est - target
    return 10 * math.log10(sum(v * v for v in target) / (sum(v * v for v in resid) + 1e-12))


def unit_rms(rng, n):
    x = rng.standard_normal(n)
    return Waveform(x / rms(x))


class TestMixing:
    def test_equal_gains_unit_rms_is_plain_sum(self, rng):
        s1, s2 = unit_rms(rng, 400), unit_rms(rng, 400)
        ex = mix_sources([s1, s2], [0.0, 0.0])
        np.testing.assert_array_equal(ex.mixture.samples, s1.samples + s2.samples)

    def test_single_source(self, rng):
        s1 = unit_rms(rng, 100)
        ex = mix_sources([s1], [0.0])
        np.testing.assert_array_equal(ex.mixture.samples, s1.samples)

    def test_level_ratio(self, rng):
        ex = mix_sources([Waveform(rng.standard_normal(800)), Waveform(rng.standard_normal(800) * 7)], [-33.0, -25.0])
        ratio = rms(ex.sources[0].samples) / rms(ex.sources[1].samples)
        assert ratio == pytest.approx(10 ** (-8 / 20), abs=1e-6)
        assert ratio == pytest.approx(0.3981, abs=1e-4)

    def test_additivity_with_noise(self, rng):
        noise = Waveform(rng.standard_normal(300) * 1e-3)
        ex = mix_sources([unit_rms(rng, 300), unit_rms(rng, 300)], [-30.0, -27.0], noise=noise)
        total = ex.sources[0].samples + ex.sources[1].samples + noise.samples
        assert np.max(np.abs(ex.mixture.samples - total)) <= 1e-9

    def test_errors(self, rng):
        with pytest.raises(SignalError):
            mix_sources([unit_rms(rng, 10), unit_rms(rng, 11)], [0.0, 0.0])
        with pytest.raises(SignalError):
            mix_sources([Waveform(np.zeros(10)), unit_rms(rng, 10)], [0.0, 0.0])
        with pytest.raises(SignalError):
            MixtureExample(Waveform(np.ones(5)), (Waveform(np.ones(4)), Waveform(np.ones(5))))

    def test_waveform_rate_is_fixed(self):
        with pytest.raises(SignalError):
            Waveform(np.ones(4), 16000)
        with pytest.raises(SignalError):
            Waveform(np.array([]))


class TestSynthesis:
    def test_deterministic(self):
        cfg = SynthConfig(seed=0)
        a = synth_sources(cfg, np.random.default_rng(5))
        b = synth_sources(cfg, np.random.default_rng(5))
        for x, y in zip(a, b):
            assert x.samples.tobytes() == y.samples.tobytes()

    def test_length(self):
        src = synth_sources(SynthConfig(duration_seconds=1.0), np.random.default_rng(0))
        assert all(len(s) == 8000 for s in src)

    def test_band_energy(self):
        cfg = SynthConfig(source_profiles=[(200.0, 800.0), (1200.0, 2400.0)])
        for seed in range(10):
            x = synth_sources(cfg, np.random.default_rng(seed))[0].samples
            power = np.abs(np.fft.rfft(x)) ** 2
            freqs = np.fft.rfftfreq(x.size, 1 / SAMPLE_RATE)
            inside = power[(freqs >= 150) & (freqs <= 850)].sum()
            assert inside / power.sum() >= 0.95

    def test_band_above_nyquist(self):
        with pytest.raises(SignalError):
            SynthConfig(source_profiles=[(200.0, 800.0), (3000.0, 4500.0)])

    def test_gains_within_range(self):
        ex = synth_mixture(SynthConfig(), np.random.default_rng(3))
        for s in ex.sources:
            level = 20 * math.log10(rms(s.samples))
            assert -33.0 - 1e-9 <= level <= -25.0 + 1e-9


class TestSparse:
    def test_zero_overlap_is_disjoint(self):
        ex = synth_sparse_mixture(SynthConfig(), 0.0, np.random.default_rng(0))
        assert np.all(ex.sources[0].samples * ex.sources[1].samples == 0.0)

    def test_full_overlap_shares_support(self):
        ex = synth_sparse_mixture(SynthConfig(), 1.0, np.random.default_rng(0))
        np.testing.assert_array_equal(ex.sources[0].samples != 0, ex.sources[1].samples != 0)
        assert np.all(ex.sources[0].samples != 0)

    def test_point_four(self):
        ex = synth_sparse_mixture(SynthConfig(), 0.4, np.random.default_rng(0))
        a = ex.sources[0].samples != 0
        b = ex.sources[1].samples != 0
        union = np.count_nonzero(a | b)
        assert abs(np.count_nonzero(a & b) - 0.4 * union) <= 1

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0.0, 1.0), st.floats(0.25, 1.5), st.integers(0, 1000))
    def test_any_ratio(self, ratio, seconds, seed):
        ex = synth_sparse_mixture(SynthConfig(duration_seconds=seconds), ratio, np.random.default_rng(seed))
        a = ex.sources[0].samples != 0
        b = ex.sources[1].samples != 0
        union = np.count_nonzero(a | b)
        assert abs(np.count_nonzero(a & b) - ratio * union) <= 1
        total = ex.sources[0].samples + ex.sources[1].samples
        assert np.max(np.abs(ex.mixture.samples - total)) <= 1e-9
        assert measured_overlap_ratio(ex) == pytest.approx(ratio, abs=1.0 / union + 1e-12)

    def test_ratio_out_of_range(self):
        with pytest.raises(SignalError):
            synth_sparse_mixture(SynthConfig(), 1.2, np.random.default_rng(0))


class TestSiSdr:
    def test_hand_case(self):
        ref = [1.0, -1.0, 1.0, -1.0]
        est = [1.0, -1.0, 1.0, 1.0]
        assert si_sdr(est, ref) == pytest.approx(-10 * math.log10(2), abs=1e-4)
        assert si_sdr(est, ref) == pytest.approx(brute_si_sdr(est, ref), abs=1e-9)

    def test_exact_match_is_capped_high(self, rng):
        ref = rng.standard_normal(100)
        assert si_sdr(ref, ref) >= 100
        assert si_sdr(2 * ref, ref) == pytest.approx(si_sdr(ref, ref), abs=1e-6)
        assert si_sdr(1e-6 * ref, 1e3 * ref) == pytest.approx(si_sdr(ref, ref), abs=1e-6)

    def test_constant_reference(self):
        with pytest.raises(SignalError):
            si_sdr([1.0, 2.0, 3.0], [2.0, 2.0, 2.0])

    def test_matches_brute_force(self, rng):
        for _ in range(50):
            est, ref = rng.standard_normal(64), rng.standard_normal(64)
            assert si_sdr(est, ref) == pytest.approx(brute_si_sdr(est, ref), abs=1e-9)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(-50, 50).filter(lambda a: abs(a) > 1e-3), st.floats(-10, 10))
    def test_scale_and_offset_invariance(self, seed, alpha, offset):
        r = np.random.default_rng(seed)
        est, ref = r.standard_normal(128), r.standard_normal(128)
        base = si_sdr(est, ref)
        assert si_sdr(alpha * est, ref) == pytest.approx(base, abs=1e-9)
        assert si_sdr(est + offset, ref) == pytest.approx(base, abs=1e-9)

    @pytest.mark.parametrize("sigma", [0.01, 0.1, 0.5, 1.0, 3.0])
    def test_orthogonal_noise(self, rng, sigma):
        ref = rng.standard_normal(256)
        ref -= ref.mean()
        w = rng.standard_normal(256)
        w -= w.mean()
        w -= (w @ ref) / (ref @ ref) * ref
        ref /= rms(ref)
        w /= rms(w)
        assert si_sdr(ref + sigma * w, ref) == pytest.approx(-20 * math.log10(sigma), abs=1e-6)

    def test_improvement(self, rng):
        s1, s2 = rng.standard_normal(200), rng.standard_normal(200)
        mix = s1 + s2
        assert si_sdr_improvement(mix, s1, mix) == 0.0
        assert si_sdr_improvement(s1, s1, mix) >= 100 - si_sdr(mix, s1)
        est = s1 + 0.1 * s2
        assert si_sdr_improvement(est, s1, mix) == pytest.approx(
            brute_si_sdr(est, s1) - brute_si_sdr(mix, s1), abs=1e-9
        )

    def test_snr(self, rng):
        ref = rng.standard_normal(50)
        assert snr(ref, ref) > 100

    def test_tensor_route_matches_and_differentiates(self, rng):
        ref = rng.standard_normal((3, 40))
        est = ad.Tensor(rng.standard_normal((3, 40)), requires_grad=True)
        values = si_sdr_tensor(est, ref).data
        for k in range(3):
            assert values[k] == pytest.approx(si_sdr(est.data[k], ref[k]), abs=1e-9)
        w = ad.Tensor(rng.standard_normal(3))
        assert check_gradients(lambda: ad.sum(ad.mul(si_sdr_tensor(est, ref), w)), [est]) < 1e-6


class TestWav:
    def test_float_round_trip(self, tmp_path, rng):
        x = Waveform(rng.uniform(-1, 1, 500).astype(np.float32).astype(np.float64))
        write_wav(tmp_path / "a.wav", x, "float32")
        y = read_wav(tmp_path / "a.wav")
        assert y.samples.tobytes() == x.samples.tobytes()

    def test_pcm_round_trip(self, tmp_path, rng):
        x = Waveform(rng.uniform(-1, 1, 500))
        write_wav(tmp_path / "a.wav", x, "pcm16")
        y = read_wav(tmp_path / "a.wav")
        assert np.max(np.abs(y.samples - x.samples)) <= 1 / 32768

    def test_pcm_rounding_and_clamp(self, tmp_path):
        x = Waveform(np.array([1.5 / 32768, -1.5 / 32768, 1.0, -1.0, 2.0]))
        write_wav(tmp_path / "a.wav", x, "pcm16")
        q = np.round(read_wav(tmp_path / "a.wav").samples * 32768)
        assert q.tolist() == [2, -2, 32767, -32768, 32767]

    def test_empty_file(self, tmp_path):
        (tmp_path / "e.wav").write_bytes(b"")
        with pytest.raises(WavFormatError):
            read_wav(tmp_path / "e.wav")

    def test_header_without_samples(self, tmp_path):
        fmt = struct.pack("<HHIIHH", 1, 1, 8000, 16000, 2, 16)
        body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", 0)
        (tmp_path / "z.wav").write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
        with pytest.raises(WavFormatError):
            read_wav(tmp_path / "z.wav")

    @pytest.mark.parametrize(
        "tag,channels,rate,bits,match",
        [(1, 2, 8000, 16, "mono"), (1, 1, 16000, 16, "8000"), (1, 1, 8000, 24, "codec"), (3, 1, 8000, 64, "codec")],
    )
    def test_rejections(self, tmp_path, tag, channels, rate, bits, match):
        block = channels * bits // 8
        fmt = struct.pack("<HHIIHH", tag, channels, rate, rate * block, block, bits)
        body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", block * 4) + bytes(block * 4)
        path = tmp_path / "bad.wav"
        path.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
        with pytest.raises(WavFormatError, match=match):
            read_wav(path)
