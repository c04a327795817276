"""STFT, ATF filtering, log-mel features, noise mixing, segmentation and
test-time statistic matching."""

from dataclasses import dataclass, field
import math
from pathlib import Path
import wave

import numpy as np

from capsphere.errors import DomainError, FormatError

SAMPLE_RATE = 16000
WIN_LENGTH = 400
HOP_LENGTH = 160
FFT_SIZE = 512
N_MELS = 80
LOG_FLOOR = 1e-10
CLEAN = math.inf


@dataclass(frozen=True)
class PipelineConfig:
    sample_rate: int = SAMPLE_RATE
    win_length: int = WIN_LENGTH
    hop_length: int = HOP_LENGTH
    fft_size: int = FFT_SIZE
    n_mels: int = N_MELS
    f_min: float = 0.0
    f_max: float = 8000.0
    log_floor: float = LOG_FLOOR

    @property
    def n_bins(self):
        return self.fft_size // 2 + 1

    def to_dict(self):
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


DEFAULT_CONFIG = PipelineConfig()


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 1:
            raise DomainError("waveform must be mono (1-D)")
        if self.sample_rate != SAMPLE_RATE:
            raise DomainError(f"sample rate must be {SAMPLE_RATE} Hz")
        if not np.all(np.isfinite(self.samples)):
            raise DomainError("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def seconds(self):
        return len(self) / self.sample_rate


@dataclass
class Stft:
    data: np.ndarray
    n_samples: int
    config: PipelineConfig = DEFAULT_CONFIG

    @property
    def n_frames(self):
        return self.data.shape[0]


@dataclass
class LogMelSegment:
    features: np.ndarray
    mask: np.ndarray
    label: int = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.features.ndim != 2 or self.features.shape[1] != N_MELS:
            raise DomainError(f"features must be frames x {N_MELS}")
        if self.mask.shape != (self.features.shape[0],):
            raise DomainError("mask length must equal frame count")

    @property
    def n_valid(self):
        return int(self.mask.sum())


@dataclass
class CompensationStats:
    mu_W: np.ndarray
    mu_R: np.ndarray
    sigma_R: np.ndarray
    mu_S: np.ndarray
    sigma_S: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("mu_W", "mu_R", "sigma_R", "mu_S", "sigma_S"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (N_MELS,):
                raise DomainError(f"{name} must have length {N_MELS}")
            setattr(self, name, v)

    def swapped(self):
        """Stats mapping the target domain back onto the source domain."""
        return CompensationStats(self.mu_W, self.mu_S, self.sigma_S, self.mu_R, self.sigma_R)

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("mu_W", "mu_R", "sigma_R", "mu_S", "sigma_S")}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(d[k]) for k in ("mu_W", "mu_R", "sigma_R", "mu_S", "sigma_S")})


def _window(cfg):
    # periodic Hann: overlap-adds to a constant at 40% hop
    n = np.arange(cfg.win_length)
    return 0.5 - 0.5 * np.cos(2 * np.pi * n / cfg.win_length)


def _as_samples(x):
    return x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=float)


def frame_count(n_samples, cfg=DEFAULT_CONFIG):
    if n_samples < cfg.win_length:
        return 0
    return (n_samples - cfg.win_length) // cfg.hop_length + 1


def stft(waveform, cfg=DEFAULT_CONFIG):
    x = _as_samples(waveform)
    n_frames = frame_count(x.shape[0], cfg)
    if n_frames < 1:
        raise DomainError(f"input shorter than one window ({cfg.win_length} samples)")
    idx = np.arange(cfg.win_length)[None, :] + cfg.hop_length * np.arange(n_frames)[:, None]
    frames = x[idx] * _window(cfg)
    return Stft(np.fft.rfft(frames, n=cfg.fft_size, axis=1), x.shape[0], cfg)


def istft(spec):
    """Weighted overlap-add synthesis; normalised by the summed squared window."""
    cfg = spec.config
    w = _window(cfg)
    frames = np.fft.irfft(spec.data, n=cfg.fft_size, axis=1)[:, :cfg.win_length] * w
    n_out = max(spec.n_samples, (spec.n_frames - 1) * cfg.hop_length + cfg.win_length)
    out = np.zeros(n_out)
    norm = np.zeros(n_out)
    for t in range(spec.n_frames):
        s = t * cfg.hop_length
        out[s:s + cfg.win_length] += frames[t]
        norm[s:s + cfg.win_length] += w * w
    # the floor only bites in the first and last hop, where a single tapered
    # frame covers the output; interior samples are divided exactly
    out /= np.maximum(norm, 0.1 * norm.max())
    return Waveform(out[:spec.n_samples])


def bulk_delay(values, freqs):
    """Magnitude-weighted mean group delay (seconds) of a transfer function.

    Delays beyond half the FFT length alias on the bin grid.
    """
    v = np.asarray(values, dtype=complex)
    if v.shape[0] < 3:
        return 0.0
    d_phase = np.angle(v[2:] * np.conj(v[1:-1]))
    weight = np.abs(v[2:]) * np.abs(v[1:-1])
    if weight.sum() == 0:
        return 0.0
    d_omega = 2 * np.pi * (freqs[2] - freqs[1])
    return float(-np.sum(weight * d_phase) / weight.sum() / d_omega)


def apply_atf(spec, tf, remove_delay=True):
    """Per-bin multiplication of every frame by the ATF; DC is zeroed.

    The common bulk delay of the ATF is stripped first so that long source
    distances do not wrap around inside a frame.
    """
    values = np.asarray(tf.values, dtype=complex)
    grid = tf.grid
    if values.shape[0] != spec.data.shape[1] or grid.sample_rate != spec.config.sample_rate:
        raise DomainError("ATF grid does not match the STFT bin grid")
    if remove_delay:
        f = grid.frequencies()
        tau = bulk_delay(values, f)
        values = values * np.exp(2j * np.pi * f * tau)
    values = values.copy()
    values[0] = 0.0
    return Stft(spec.data * values[None, :], spec.n_samples, spec.config)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


_FB_CACHE = {}


def mel_filterbank(cfg=DEFAULT_CONFIG):
    """(n_mels, n_bins) triangular HTK filters with unit peaks."""
    key = (cfg.sample_rate, cfg.fft_size, cfg.n_mels, cfg.f_min, cfg.f_max)
    if key in _FB_CACHE:
        return _FB_CACHE[key]
    freqs = np.arange(cfg.n_bins) * cfg.sample_rate / cfg.fft_size
    edges = _mel_to_hz(np.linspace(_hz_to_mel(cfg.f_min), _hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    _FB_CACHE[key] = fb
    return fb


def logmel(spec, label=None):
    cfg = spec.config
    if cfg.sample_rate != SAMPLE_RATE:
        raise DomainError("log-mel expects a 16 kHz grid")
    power = np.abs(spec.data) ** 2
    mel = power @ mel_filterbank(cfg).T
    feats = np.log(np.maximum(mel, cfg.log_floor))
    return LogMelSegment(feats, np.ones(feats.shape[0], dtype=bool), label)


def features(waveform, tf=None, label=None):
    """Shorthand: waveform -> (optional ATF) -> log-mel segment."""
    s = stft(waveform)
    if tf is not None:
        s = apply_atf(s, tf)
    return logmel(s, label)


def rms(x):
    x = _as_samples(x)
    return float(np.sqrt(np.mean(x * x)))


def mix_noise_at_snr(speech, noise, snr_db, seed=0):
    s = _as_samples(speech)
    if math.isinf(snr_db) and snr_db > 0:
        return Waveform(s.copy())
    n = _as_samples(noise)
    if rms(s) == 0:
        raise DomainError("speech is silent")
    if n.shape[0] == 0 or rms(n) == 0:
        raise DomainError("noise is silent")
    rng = np.random.default_rng(seed)
    if n.shape[0] < s.shape[0]:
        reps = -(-s.shape[0] // n.shape[0]) + 1
        looped = np.tile(n, reps)
        off = int(rng.integers(0, n.shape[0]))
        seg = looped[off:off + s.shape[0]]
    else:
        off = int(rng.integers(0, n.shape[0] - s.shape[0] + 1))
        seg = n[off:off + s.shape[0]]
    if rms(seg) == 0:
        raise DomainError("selected noise excerpt is silent")
    gain = rms(s) / (rms(seg) * 10.0 ** (snr_db / 20.0))
    out = s + gain * seg
    peak = np.max(np.abs(out))
    if peak > 1.0:
        out = out / peak
    return Waveform(out)


def segment(waveform, seconds=15.0, cfg=DEFAULT_CONFIG):
    """Non-overlapping fixed-length pieces with per-frame validity masks.

    Returns a list of (Waveform, mask); the last piece is zero-padded and its
    padded frames are masked out.
    """
    if not seconds > 0:
        raise DomainError("segment length must be > 0")
    x = _as_samples(waveform)
    if x.shape[0] == 0:
        raise DomainError("empty input")
    seg_len = int(round(seconds * cfg.sample_rate))
    n_frames = frame_count(seg_len, cfg)
    if n_frames < 1:
        raise DomainError("segment shorter than one window")
    out = []
    for start in range(0, x.shape[0], seg_len):
        piece = x[start:start + seg_len]
        valid = frame_count(piece.shape[0], cfg)
        if valid == 0 and out:
            # tail shorter than a window carries no full frame
            break
        padded = np.zeros(seg_len)
        padded[:piece.shape[0]] = piece
        mask = np.zeros(n_frames, dtype=bool)
        mask[:max(valid, 1 if not out else 0)] = True
        out.append((Waveform(padded), mask))
    return out


def segment_features(waveform, seconds=1.0, tf=None, label=None):
    """Segment a waveform and return masked log-mel segments (masked rows are 0)."""
    out = []
    for piece, mask in segment(waveform, seconds):
        seg = features(piece, tf, label)
        seg.features[~mask] = 0.0
        seg.mask = mask
        out.append(seg)
    return out


def estimate_stats(segments):
    rows = [s.features[s.mask] for s in segments]
    rows = [r for r in rows if r.shape[0]]
    if not rows:
        raise DomainError("no valid frames")
    x = np.concatenate(rows, axis=0)
    if x.shape[0] < 2:
        raise DomainError("need at least two valid frames")
    return x.mean(axis=0), x.std(axis=0)


def compensate(x, stats, use_device_term=False):
    if np.any(stats.sigma_R <= 0):
        raise DomainError("sigma_R must be strictly positive")
    f = x.features.copy()
    v = x.mask
    xt = f[v] - stats.mu_W if use_device_term else f[v]
    # affine form, so matched statistics reproduce the input bit for bit
    scale = stats.sigma_S / stats.sigma_R
    f[v] = xt * scale + (stats.mu_S - stats.mu_R * scale)
    return LogMelSegment(f, v.copy(), x.label)


# ---------------------------------------------------------------------------
# WAV I/O


def read_wav(path):
    """Mono 16 kHz RIFF/WAVE, PCM16 or IEEE float32."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise FormatError(f"{path.name}: not a RIFF/WAVE file")
    pos, fmt, data = 12, None, None
    while pos + 8 <= len(blob):
        cid = blob[pos:pos + 4]
        size = int.from_bytes(blob[pos + 4:pos + 8], "little")
        body = blob[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise FormatError(f"{path.name}: missing fmt or data chunk")
    tag, channels, rate = int.from_bytes(fmt[0:2], "little"), int.from_bytes(fmt[2:4], "little"), \
        int.from_bytes(fmt[4:8], "little")
    bits = int.from_bytes(fmt[14:16], "little")
    if tag == 0xFFFE and len(fmt) >= 26:
        tag = int.from_bytes(fmt[24:26], "little")
    if channels != 1:
        raise FormatError(f"{path.name}: {channels} channels; only mono is supported")
    if rate != SAMPLE_RATE:
        raise FormatError(f"{path.name}: {rate} Hz; only {SAMPLE_RATE} Hz is supported")
    if tag == 1 and bits == 16:
        x = np.frombuffer(data[:len(data) // 2 * 2], dtype="<i2").astype(float) / 32768.0
    elif tag == 3 and bits == 32:
        x = np.frombuffer(data[:len(data) // 4 * 4], dtype="<f4").astype(float)
    else:
        raise FormatError(f"{path.name}: unsupported sample format (tag {tag}, {bits} bit)")
    return Waveform(x)


def write_wav(path, waveform, fmt="pcm16"):
    x = _as_samples(waveform)
    if fmt == "pcm16":
        pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
        with wave.open(str(path), "wb") as w:
            w.setnchannels(1)
            w.setsampwidth(2)
            w.setframerate(SAMPLE_RATE)
            w.writeframes(pcm.tobytes())
        return
    if fmt != "float32":
        raise FormatError(f"unknown WAV format {fmt!r}")
    body = x.astype("<f4").tobytes()
    fmt_chunk = (3).to_bytes(2, "little") + (1).to_bytes(2, "little") + SAMPLE_RATE.to_bytes(4, "little") \
        + (SAMPLE_RATE * 4).to_bytes(4, "little") + (4).to_bytes(2, "little") + (32).to_bytes(2, "little")
    riff = b"WAVE" + b"fmt " + len(fmt_chunk).to_bytes(4, "little") + fmt_chunk \
        + b"data" + len(body).to_bytes(4, "little") + body
    Path(path).write_bytes(b"RIFF" + len(riff).to_bytes(4, "little") + riff)
