import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from capsphere import atf_core as ac
from capsphere import audio_pipeline as ap
from capsphere import pressure_field as pf
from capsphere.errors import DomainError, FormatError

GRID = ac.FrequencyGrid()
INTERIOR = slice(ap.WIN_LENGTH, -ap.WIN_LENGTH)


def noise(n, seed=0, scale=0.1):
    return ap.Waveform(scale * np.random.default_rng(seed).standard_normal(n))


def flat_tf(value=1.0):
    v = np.full(GRID.n_bins, value, dtype=complex)
    v[0] = 0
    return ac.TransferFunction(GRID, v, "external", pf.SceneGeometry())


# --- waveform / stft -------------------------------------------------------------

def test_waveform_contract():
    with pytest.raises(DomainError):
        ap.Waveform(np.zeros((2, 10)))
    with pytest.raises(DomainError):
        ap.Waveform(np.zeros(10), sample_rate=44100)
    with pytest.raises(DomainError):
        ap.Waveform(np.array([0.0, np.inf]))


def test_frame_arithmetic():
    s = ap.stft(noise(16000))
    assert s.n_frames == 98 and s.data.shape[1] == 257
    with pytest.raises(DomainError):
        ap.stft(noise(399))


def test_sine_lands_on_bin_32():
    t = np.arange(16000) / 16000
    s = ap.stft(ap.Waveform(0.5 * np.sin(2 * np.pi * 1000 * t)))
    assert np.all(np.argmax(np.abs(s.data), axis=1) == 32)


@pytest.mark.parametrize("n", [16000, 16000 * 3 + 77, 40000])
def test_round_trip(n):
    x = noise(n, seed=n)
    y = ap.istft(ap.stft(x))
    assert len(y) == n
    assert np.max(np.abs(y.samples[INTERIOR] - x.samples[INTERIOR])) < 1e-6


def test_istft_zero_and_linearity():
    a, b = ap.stft(noise(16000, 1)), ap.stft(noise(16000, 2))
    z = ap.Stft(np.zeros_like(a.data), 16000)
    assert np.all(ap.istft(z).samples == 0)
    both = ap.Stft(a.data + b.data, 16000)
    diff = ap.istft(both).samples - ap.istft(a).samples - ap.istft(b).samples
    assert np.max(np.abs(diff)) < 1e-12


# --- ATF application ----------------------------------------------------------------

def test_identity_and_zero_filters():
    s = ap.stft(noise(8000))
    out = ap.apply_atf(s, flat_tf(1.0))
    assert np.all(out.data[:, 0] == 0)
    np.testing.assert_array_equal(out.data[:, 1:], s.data[:, 1:])
    assert np.all(ap.apply_atf(s, flat_tf(0.0)).data == 0)


def test_grid_mismatch():
    s = ap.stft(noise(8000))
    g = ac.FrequencyGrid(16000, 129)
    v = np.ones(129, dtype=complex)
    v[0] = 0
    with pytest.raises(DomainError):
        ap.apply_atf(s, ac.TransferFunction(g, v, "own", pf.SceneGeometry()))


def test_bulk_delay_removed():
    f = GRID.frequencies()
    tau = 200 / 16000
    v = np.exp(-2j * np.pi * f * tau)
    v[0] = 0
    assert ap.bulk_delay(v, f) == pytest.approx(tau, rel=1e-9)
    tf = ac.TransferFunction(GRID, v, "external", pf.SceneGeometry())
    s = ap.stft(noise(8000))
    np.testing.assert_allclose(ap.apply_atf(s, tf).data[:, 1:], s.data[:, 1:], atol=1e-9)


def test_white_noise_takes_on_atf_slope():
    g = pf.SceneGeometry(sphere_radius=0.07, cap_half_angle=math.radians(20),
                         ear_azimuth=math.radians(100))
    tf = ac.own_atf(g, pf.Medium(), GRID)
    x = noise(16000 * 20, seed=11)
    out = ap.apply_atf(ap.stft(x), tf)
    power = np.mean(np.abs(out.data) ** 2, axis=0) / np.mean(np.abs(ap.stft(x).data) ** 2, axis=0)
    f = GRID.frequencies()
    use = (f >= 200) & (f <= 8000)
    measured = np.polyfit(np.log2(f[use]), 10 * np.log10(power[use]), 1)[0]
    expected = ac.log_slope(tf) * math.log10(2)
    assert abs(measured - expected) < 0.5


def test_single_frame_filtering_commutes():
    # a frame-stationary filter: per-frame multiplication equals filtering the one frame
    x = noise(400, seed=5)
    v = np.exp(-np.linspace(0, 3, GRID.n_bins)).astype(complex)
    v[0] = 0
    tf = ac.TransferFunction(GRID, v, "own", pf.SceneGeometry())
    a = ap.apply_atf(ap.stft(x), tf, remove_delay=False).data[0]
    b = np.fft.rfft(x.samples * ap._window(ap.DEFAULT_CONFIG), 512) * v
    np.testing.assert_allclose(a, b, atol=1e-13)


# --- log-mel -------------------------------------------------------------------------

def test_silence_hits_floor():
    seg = ap.features(ap.Waveform(np.zeros(4000)))
    assert np.all(seg.features == math.log(1e-10))


def test_filterbank_partition():
    fb = ap.mel_filterbank()
    assert fb.shape == (80, 257)
    col = fb.sum(axis=0)
    first_peak = np.argmax(fb[0])
    last_peak = np.argmax(fb[-1])
    covered = col[first_peak:last_peak + 1]
    assert np.all(covered > 0) and np.all(covered <= 1.0001)


def test_log_law_and_monotonic():
    s = ap.stft(noise(8000, 3))
    a = ap.logmel(s).features
    b = ap.logmel(ap.Stft(s.data * 10.0, s.n_samples)).features
    unfloored = a > math.log(1e-10) + 1
    np.testing.assert_allclose((b - a)[unfloored], math.log(100.0), atol=1e-9)
    boost = s.data.copy()
    boost[:, 40:60] *= 3.0
    assert np.all(ap.logmel(ap.Stft(boost, s.n_samples)).features >= a - 1e-12)


# --- noise mixing ------------------------------------------------------------------------

@pytest.mark.parametrize("snr", [0.0, 5.0, 10.0, 15.0, 20.0])
def test_snr_accuracy(snr):
    speech = noise(16000, 1, 0.05)
    n = noise(24000, 2, 0.3)
    out = ap.mix_noise_at_snr(speech, n, snr, seed=4)
    added = out.samples - speech.samples
    measured = 20 * math.log10(ap.rms(speech) / ap.rms(added))
    assert abs(measured - snr) < 0.1
    if snr == 0.0:
        assert abs(20 * math.log10(ap.rms(speech) / ap.rms(added))) < 0.01


def test_snr_clean_and_errors():
    speech = noise(1600, 1)
    out = ap.mix_noise_at_snr(speech, noise(1600, 2), ap.CLEAN)
    np.testing.assert_array_equal(out.samples, speech.samples)
    with pytest.raises(DomainError):
        ap.mix_noise_at_snr(ap.Waveform(np.zeros(100)), noise(100), 0)
    with pytest.raises(DomainError):
        ap.mix_noise_at_snr(speech, ap.Waveform(np.zeros(100)), 0)


def test_short_noise_is_looped_and_peak_normalised():
    speech = noise(16000, 1, 0.5)
    out = ap.mix_noise_at_snr(speech, noise(900, 7, 0.5), -10.0, seed=1)
    assert len(out) == 16000 and np.max(np.abs(out.samples)) <= 1.0


# --- segmentation --------------------------------------------------------------------------

def test_segment_counts():
    segs = ap.segment(noise(30 * 16000), 15.0)
    assert len(segs) == 2 and all(m.all() for _, m in segs)
    (w, m), = ap.segment(noise(16000), 15.0)
    assert m.sum() == 98 and not m[98:].any() and len(w) == 15 * 16000
    segs = ap.segment(noise(40000), 1.0)
    assert len(segs) == 3
    m = segs[-1][1]
    assert m.sum() == 48 and len(m) == 98
    with pytest.raises(DomainError):
        ap.segment(ap.Waveform(np.zeros(0)), 1.0)
    with pytest.raises(DomainError):
        ap.segment(noise(100), 0.0)


def test_segment_features_masked_rows_zero():
    segs = ap.segment_features(noise(40000), 1.0, label=1)
    last = segs[-1]
    assert np.all(last.features[~last.mask] == 0) and last.label == 1


# --- statistics and compensation ----------------------------------------------------------

def _segments(seed, n=4, shift=0.0, scale=1.0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        f = shift + scale * rng.standard_normal((30, 80))
        mask = np.ones(30, dtype=bool)
        mask[25:] = False
        f[~mask] = 0
        out.append(ap.LogMelSegment(f, mask))
    return out


def test_estimate_stats_two_pass_oracle():
    segs = _segments(0)
    mu, sd = ap.estimate_stats(segs)
    rows = np.concatenate([s.features[s.mask] for s in segs])
    m2 = sum(rows) / rows.shape[0]
    v2 = sum((r - m2) ** 2 for r in rows) / rows.shape[0]
    np.testing.assert_allclose(mu, m2, atol=1e-12)
    np.testing.assert_allclose(sd, np.sqrt(v2), atol=1e-12)
    two = [ap.LogMelSegment(np.vstack([np.full(80, 1.0), np.full(80, 3.0)]), np.ones(2, bool))]
    mu, sd = ap.estimate_stats(two)
    assert np.all(mu == 2.0) and np.all(sd == 1.0)
    with pytest.raises(DomainError):
        ap.estimate_stats([ap.LogMelSegment(np.zeros((3, 80)), np.zeros(3, bool))])


def test_constant_input_rejected_downstream():
    seg = ap.LogMelSegment(np.full((5, 80), 2.0), np.ones(5, bool))
    mu, sd = ap.estimate_stats([seg])
    stats = ap.CompensationStats(np.zeros(80), mu, sd, mu, np.ones(80))
    with pytest.raises(DomainError):
        ap.compensate(seg, stats)


def test_compensate_identity_and_calibration():
    seg = _segments(1)[0]
    mu, sd = np.linspace(-1, 1, 80), np.linspace(0.5, 2, 80)
    ident = ap.CompensationStats(np.zeros(80), mu, sd, mu, sd)
    assert np.array_equal(ap.compensate(seg, ident).features, seg.features)
    cal = _segments(2, shift=3.0, scale=2.0)
    mu_r, sd_r = ap.estimate_stats(cal)
    mu_s, sd_s = np.linspace(-5, -2, 80), np.linspace(0.2, 0.9, 80)
    stats = ap.CompensationStats(np.zeros(80), mu_r, sd_r, mu_s, sd_s)
    out = [ap.compensate(s, stats) for s in cal]
    m, s = ap.estimate_stats(out)
    np.testing.assert_allclose(m, mu_s, atol=1e-9)
    np.testing.assert_allclose(s, sd_s, atol=1e-9)
    assert all(np.all(o.features[~o.mask] == 0) for o in out)


@given(st.integers(0, 10_000), st.booleans())
def test_compensate_invertible(seed, device):
    rng = np.random.default_rng(seed)
    seg = _segments(seed)[0]
    stats = ap.CompensationStats(rng.normal(size=80), rng.normal(size=80), rng.uniform(0.1, 3, 80),
                                 rng.normal(size=80), rng.uniform(0.1, 3, 80))
    fwd = ap.compensate(seg, stats, use_device_term=device)
    back = ap.compensate(fwd, stats.swapped())
    want = seg.features.copy()
    if device:
        want[seg.mask] -= stats.mu_W
    np.testing.assert_allclose(back.features, want, atol=1e-9)


def test_stats_length_checked():
    with pytest.raises(DomainError):
        ap.CompensationStats(np.zeros(79), np.zeros(80), np.ones(80), np.zeros(80), np.ones(80))
    s = ap.CompensationStats(np.zeros(80), np.ones(80), np.ones(80), np.zeros(80), np.ones(80))
    assert np.array_equal(ap.CompensationStats.from_dict(s.to_dict()).mu_R, s.mu_R)


# --- WAV -------------------------------------------------------------------------------------

@pytest.mark.parametrize("fmt,tol", [("pcm16", 1 / 32768), ("float32", 1e-7)])
def test_wav_round_trip(tmp_path, fmt, tol):
    x = noise(1234, 9, 0.3)
    p = tmp_path / "x.wav"
    ap.write_wav(p, x, fmt)
    y = ap.read_wav(p)
    assert len(y) == len(x) and np.max(np.abs(y.samples - x.samples)) <= tol


def test_wav_rejects_other_formats(tmp_path):
    import wave
    p = tmp_path / "st.wav"
    with wave.open(str(p), "wb") as w:
        w.setnchannels(2)
        w.setsampwidth(2)
        w.setframerate(16000)
        w.writeframes(b"\0" * 400)
    with pytest.raises(FormatError, match="mono"):
        ap.read_wav(p)
    with wave.open(str(p), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(44100)
        w.writeframes(b"\0" * 400)
    with pytest.raises(FormatError, match="Hz"):
        ap.read_wav(p)
    p.write_bytes(b"not a wav at all")
    with pytest.raises(FormatError):
        ap.read_wav(p)
    with pytest.raises(FormatError):
        ap.write_wav(tmp_path / "y.wav", noise(10), "mp3")
