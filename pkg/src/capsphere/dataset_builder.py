"""Labelled example sets: class assignment, ATF pairing, noise policy,
manifests with leakage checks, and OVDF feature shards."""

from dataclasses import dataclass, field
import json
import math
from pathlib import Path
import struct

import numpy as np

from capsphere import audio_pipeline as ap
from capsphere.errors import DomainError, FormatError

LABEL_OF = {"external": 0, "own": 1}
CLASS_OF = {0: "external", 1: "own"}
SNR_LEVELS_DB = (0.0, 5.0, 10.0, 15.0, 20.0)
OVDF_MAGIC = b"OVDF"
OVDF_VERSION = 1
MANIFEST_VERSION = 1
CARRIER_RMS = 0.1
NOISE_KINDS = ("white", "pink", "babble")


@dataclass(frozen=True)
class NoisePolicy:
    """Fraction of examples mixed with noise and the SNR levels drawn from."""

    fraction: float = 0.0
    snr_levels_db: tuple = SNR_LEVELS_DB
    kind: str = "babble"

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise DomainError(f"noise kind must be one of {NOISE_KINDS}")
        if not 0.0 <= self.fraction <= 1.0:
            raise DomainError("noise fraction must lie in [0, 1]")
        if self.fraction > 0 and not self.snr_levels_db:
            raise DomainError("noise policy needs at least one SNR level")

    @classmethod
    def off(cls):
        return cls(0.0)

    @classmethod
    def train_default(cls):
        return cls(0.3)

    @classmethod
    def fixed(cls, snr_db, kind="babble"):
        return cls(1.0, (float(snr_db),), kind)

    def to_dict(self):
        return {"fraction": self.fraction, "snr_levels_db": list(self.snr_levels_db), "kind": self.kind}


@dataclass(frozen=True)
class BuildConfig:
    segment_seconds: float = 1.0
    normalize_level: bool = True
    level_jitter_db: float = 10.0
    external_gain_db: float = 0.0
    apply_atf: bool = True

    def to_dict(self):
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


@dataclass
class Example:
    features: ap.LogMelSegment
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DomainError("label must be 0 (external) or 1 (own)")
        if self.features.features.shape[0] == 0:
            raise DomainError("features must be non-empty")


@dataclass
class DatasetManifest:
    records: list
    constants: dict = field(default_factory=dict)

    def to_dict(self):
        return {"format_version": MANIFEST_VERSION, "constants": self.constants, "records": self.records}

    @classmethod
    def from_dict(cls, d):
        if d.get("format_version") != MANIFEST_VERSION:
            raise FormatError("unsupported dataset manifest version")
        return cls(list(d["records"]), dict(d.get("constants", {})))

    def dumps(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def _child_rng(seed, *keys):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *(int(k) for k in keys)]))


def _stable_key(text):
    # deterministic across processes (unlike hash())
    return int.from_bytes(text.encode()[:16].ljust(16, b"\0"), "little") % (2**63)


def assign_classes(utterance_ids, seed):
    ids = sorted(set(utterance_ids))
    if len(ids) < 2:
        raise DomainError("need at least two utterances")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_own = len(ids) // 2
    out = {}
    for rank, i in enumerate(order):
        out[ids[i]] = "own" if rank < n_own else "external"
    return out


# ---------------------------------------------------------------------------
# carriers


def _shape_spectrum(white, gain):
    spec = np.fft.rfft(white)
    return np.fft.irfft(spec * gain, n=white.shape[0])


def _ltass_db(f):
    return -6.0 * np.log2(np.maximum(f / 500.0, 1.0)) - 12.0 * (f < 100.0)


def synth_carrier(kind, seconds, seed):
    """Seeded noise carrier with RMS 0.1.

    ``speech_shaped`` has a random formant-like envelope, spectral tilt and
    syllable-rate amplitude modulation, so carriers differ from utterance
    to utterance.
    """
    if not seconds > 0:
        raise DomainError("seconds must be > 0")
    n = int(round(seconds * ap.SAMPLE_RATE))
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    f = np.fft.rfftfreq(n, 1.0 / ap.SAMPLE_RATE)
    if kind == "white":
        pass
    elif kind == "pink":
        g = np.zeros_like(f)
        g[1:] = 1.0 / np.sqrt(f[1:])
        x = _shape_spectrum(x, g)
    elif kind == "speech_shaped":
        fs = np.maximum(f, 50.0)
        tilt = rng.uniform(-1.0, 1.0)  # dB per octave, talker-to-talker spread
        env_db = _ltass_db(fs) + tilt * np.log2(fs / 1000.0)
        for center, bw in ((rng.uniform(300, 900), 120), (rng.uniform(900, 2400), 180),
                           (rng.uniform(2400, 3500), 250)):
            env_db = env_db + 8.0 * np.exp(-0.5 * ((fs - center) / bw) ** 2)
        x = _shape_spectrum(x, 10.0 ** (env_db / 20.0))
        t = np.arange(n) / ap.SAMPLE_RATE
        rate = rng.uniform(3.0, 6.0)
        mod = 1.0 + 0.8 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
        x = x * mod
    elif kind == "babble":
        # stationary noise with the long-term speech spectrum
        x = _shape_spectrum(x, 10.0 ** (_ltass_db(np.maximum(f, 50.0)) / 20.0))
    else:
        raise DomainError(f"unknown carrier kind {kind!r}")
    return ap.Waveform(x * (CARRIER_RMS / np.sqrt(np.mean(x * x))))


def synthetic_corpus(n, seconds=1.0, kind="speech_shaped", seed=0):
    """[(utterance_id, Waveform)] of seeded carriers."""
    return [(f"utt-{i:05d}", synth_carrier(kind, seconds, [seed, i])) for i in range(n)]


def load_speech_dir(path):
    files = sorted(Path(path).glob("*.wav"))
    if not files:
        raise DomainError(f"no .wav files in {path}")
    return [(f.stem, ap.read_wav(f)) for f in files]


def noise_waveform(kind, n_samples, seed):
    if kind not in NOISE_KINDS:
        raise DomainError(f"noise kind must be one of {NOISE_KINDS}")
    return synth_carrier(kind, n_samples / ap.SAMPLE_RATE, seed)


# ---------------------------------------------------------------------------
# building


def check_manifest(manifest, bank=None):
    split_of = {} if bank is None else {e.id: (e.split, e.label) for e in bank.entries}
    used = {}
    for rec in manifest.records:
        if rec["label"] != LABEL_OF[rec["class"]]:
            raise DomainError(f"record {rec['utterance_id']}: label/class mismatch")
        atf = rec.get("atf_id")
        if atf is None:
            continue
        if bank is not None:
            if atf not in split_of:
                raise DomainError(f"record {rec['utterance_id']}: unknown ATF {atf}")
            a_split, a_label = split_of[atf]
            if a_split != rec["split"]:
                raise DomainError(f"ATF {atf} from split {a_split} used in {rec['split']}")
            if a_label != rec["class"]:
                raise DomainError(f"ATF {atf} is {a_label} but record is {rec['class']}")
        used.setdefault(atf, set()).add(rec["split"])
    leaks = sorted(a for a, s in used.items() if len(s) > 1)
    if leaks:
        raise DomainError(f"ATF ids used in more than one split: {leaks[:5]}")


def build_examples(corpus, bank, split, noise_policy=NoisePolicy.off(), seed=0,
                   config=BuildConfig(), source="synthetic"):
    """Pair each utterance with a same-split ATF of its class and featurise it.

    ``corpus`` is a list of (utterance_id, Waveform). One ATF is drawn per
    utterance; noise is mixed at the microphone, after the ATF.
    """
    corpus = sorted(corpus, key=lambda u: u[0])
    classes = assign_classes([u for u, _ in corpus], seed)
    pools = {c: bank.select(c, split) for c in ("own", "external")}
    if config.apply_atf:
        for c, pool in pools.items():
            if not pool:
                raise DomainError(f"bank has no {c} entries in split {split!r}")
    records, examples = [], []
    for index, (uid, wav) in enumerate(corpus):
        cls = classes[uid]
        rng = _child_rng(seed, index, _stable_key(uid))
        entry = pools[cls][int(rng.integers(len(pools[cls])))] if config.apply_atf else None
        gain_db = float(rng.uniform(-config.level_jitter_db, config.level_jitter_db))
        noisy = rng.random() < noise_policy.fraction
        snr = float(noise_policy.snr_levels_db[int(rng.integers(len(noise_policy.snr_levels_db)))]) \
            if noisy else None
        noise_seed = int(rng.integers(2**31))

        x = wav.samples
        if entry is not None:
            x = ap.istft(ap.apply_atf(ap.stft(x), entry.tf)).samples
        if config.normalize_level and ap.rms(x) > 0:
            # the microphone signal is levelled like a recording, so the
            # absolute ATF gain cannot act as a class cue
            x = x * (CARRIER_RMS / ap.rms(x))
        x = x * 10.0 ** (gain_db / 20.0)
        if cls == "external" and config.external_gain_db:
            x = x * 10.0 ** (config.external_gain_db / 20.0)
        if snr is not None:
            noise = noise_waveform(noise_policy.kind, x.shape[0], noise_seed)
            x = ap.mix_noise_at_snr(x, noise, snr, noise_seed).samples
        segs = ap.segment_features(ap.Waveform(x), config.segment_seconds, label=LABEL_OF[cls])
        for si, seg in enumerate(segs):
            records.append({"utterance_id": uid, "segment": si, "class": cls, "label": LABEL_OF[cls],
                            "atf_id": entry.id if entry is not None else None, "split": split,
                            "snr_db": snr, "gain_db": gain_db, "seed": int(seed)})
            examples.append(Example(seg, LABEL_OF[cls]))
    constants = {"pipeline": ap.DEFAULT_CONFIG.to_dict(), "noise_policy": noise_policy.to_dict(),
                 "build": config.to_dict(), "source": source, "seed": int(seed), "split": split}
    manifest = DatasetManifest(records, constants)
    check_manifest(manifest, bank if config.apply_atf else None)
    return manifest, examples


# ---------------------------------------------------------------------------
# OVDF shards


def encode_ovdf(examples):
    parts = [OVDF_MAGIC, struct.pack("<III", OVDF_VERSION, len(examples), ap.N_MELS)]
    for ex in examples:
        f = np.ascontiguousarray(ex.features.features, dtype="<f4")
        mask = np.packbits(ex.features.mask.astype(np.uint8), bitorder="little")
        parts.append(struct.pack("<IB", f.shape[0], ex.label))
        parts.append(f.tobytes())
        parts.append(mask.tobytes())
    return b"".join(parts)


def decode_ovdf(blob):
    if len(blob) < 16 or blob[:4] != OVDF_MAGIC:
        raise FormatError("not an OVDF shard (bad magic)")
    version, count, n_mels = struct.unpack("<III", blob[4:16])
    if version != OVDF_VERSION:
        raise FormatError(f"unsupported OVDF version {version}")
    if n_mels != ap.N_MELS:
        raise FormatError(f"shard has {n_mels} mel channels")
    pos, out = 16, []
    for _ in range(count):
        if pos + 5 > len(blob):
            raise FormatError("truncated OVDF shard")
        n_frames, label = struct.unpack("<IB", blob[pos:pos + 5])
        pos += 5
        nf = n_frames * n_mels * 4
        nm = math.ceil(n_frames / 8)
        if pos + nf + nm > len(blob):
            raise FormatError("truncated OVDF shard")
        feats = np.frombuffer(blob[pos:pos + nf], dtype="<f4").reshape(n_frames, n_mels).astype(np.float32)
        pos += nf
        mask = np.unpackbits(np.frombuffer(blob[pos:pos + nm], dtype=np.uint8),
                             bitorder="little")[:n_frames].astype(bool)
        pos += nm
        out.append(Example(ap.LogMelSegment(feats, mask, label), int(label)))
    if pos != len(blob):
        raise FormatError("trailing bytes in OVDF shard")
    return out


def serialize(out_dir, manifest, examples, shard_size=4096, run_config=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    shards = []
    for i in range(0, max(len(examples), 1), shard_size):
        chunk = examples[i:i + shard_size]
        if not chunk and examples:
            break
        name = f"features-{i // shard_size:05d}.ovdf"
        (out / name).write_bytes(encode_ovdf(chunk))
        shards.append(name)
    doc = manifest.to_dict()
    doc["shards"] = shards
    doc["run_config"] = run_config
    (out / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return out / "manifest.json"


def load(path):
    path = Path(path)
    try:
        doc = json.loads((path / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read dataset manifest: {exc}") from exc
    manifest = DatasetManifest.from_dict(doc)
    examples = []
    for name in doc.get("shards", []):
        examples.extend(decode_ovdf((path / name).read_bytes()))
    if len(examples) != len(manifest.records):
        raise FormatError("manifest and shards disagree on example count")
    return manifest, examples
