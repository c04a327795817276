import json
from dataclasses import replace

import numpy as np
import pytest

from capsphere import atf_core as ac
from capsphere import audio_pipeline as ap
from capsphere import dataset_builder as db
from capsphere import experiments as ex
from capsphere.errors import DomainError, FormatError


@pytest.fixture(scope="module")
def bank():
    return ac.split_bank(ac.generate_bank(ex.reduced_spec(10), seed=1), seed=1)


SHORT = db.BuildConfig(segment_seconds=0.25)


def corpus(n, seconds=0.25, seed=0):
    return db.synthetic_corpus(n, seconds, "speech_shaped", seed)


def test_assign_classes():
    ids = [f"u{i}" for i in range(10)]
    a = db.assign_classes(ids, 3)
    assert sorted(a.values()).count("own") == 5
    assert a == db.assign_classes(list(reversed(ids)), 3)
    odd = db.assign_classes([f"u{i}" for i in range(11)], 3)
    assert sorted(list(odd.values()).count(c) for c in ("own", "external")) == [5, 6]
    with pytest.raises(DomainError):
        db.assign_classes([], 0)


def test_carriers():
    w = db.synth_carrier("white", 1.0, 4)
    assert len(w) == 16000 and abs(ap.rms(w) - 0.1) < 1e-6
    assert np.array_equal(w.samples, db.synth_carrier("white", 1.0, 4).samples)
    for kind in ("pink", "speech_shaped", "babble"):
        assert abs(ap.rms(db.synth_carrier(kind, 0.5, 1)) - 0.1) < 1e-6
    with pytest.raises(DomainError):
        db.synth_carrier("brown", 1.0, 0)
    with pytest.raises(DomainError):
        db.synth_carrier("white", 0.0, 0)


def test_pink_slope():
    x = db.synth_carrier("pink", 20.0, 2).samples
    f = np.fft.rfftfreq(x.shape[0], 1 / 16000)
    p = np.abs(np.fft.rfft(x)) ** 2
    use = (f >= 200) & (f <= 4000)
    slope = np.polyfit(np.log2(f[use]), 10 * np.log10(p[use]), 1)[0]
    assert abs(slope + 3.0) < 0.5


def test_build_clean_and_invariants(bank):
    man, exs = db.build_examples(corpus(20), bank, "train", db.NoisePolicy.off(), 5, SHORT)
    assert len(exs) == len(man.records) == 20
    assert all(r["snr_db"] is None for r in man.records)
    labels = [e.label for e in exs]
    assert sum(labels) == 10
    split_of = {e.id: e.split for e in bank.entries}
    for r, e in zip(man.records, exs):
        assert split_of[r["atf_id"]] == "train"
        assert r["label"] == e.label == db.LABEL_OF[r["class"]]
        assert r["atf_id"].startswith("own" if r["class"] == "own" else "ext")
    db.check_manifest(man, bank)


def test_noise_fraction_reproducible(bank):
    c = corpus(1000, seconds=0.03)
    cfg = db.BuildConfig(segment_seconds=0.03, apply_atf=False)
    man, _ = db.build_examples(c, bank, "train", db.NoisePolicy.train_default(), 9, cfg)
    n_noisy = sum(r["snr_db"] is not None for r in man.records)
    assert abs(n_noisy - 300) < 4 * np.sqrt(1000 * 0.3 * 0.7)
    again, _ = db.build_examples(c, bank, "train", db.NoisePolicy.train_default(), 9, cfg)
    assert again.dumps() == man.dumps()
    assert {r["snr_db"] for r in man.records} - {None} <= set(db.SNR_LEVELS_DB)


def test_build_deterministic_bytes(bank, tmp_path):
    c = corpus(12)
    a = db.build_examples(c, bank, "val", db.NoisePolicy.fixed(10), 2, SHORT)
    b = db.build_examples(list(reversed(c)), bank, "val", db.NoisePolicy.fixed(10), 2, SHORT)
    db.serialize(tmp_path / "a", *a, run_config={"x": 1})
    db.serialize(tmp_path / "b", *b, run_config={"x": 1})
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_leakage_detected(bank):
    man, _ = db.build_examples(corpus(6), bank, "train", db.NoisePolicy.off(), 1, SHORT)
    bad = db.DatasetManifest([dict(r) for r in man.records], man.constants)
    bad.records[0]["split"] = "test"
    with pytest.raises(DomainError, match="split"):
        db.check_manifest(bad, bank)
    bad = db.DatasetManifest([dict(r) for r in man.records], man.constants)
    bad.records.append(dict(bad.records[0], split="test", utterance_id="x"))
    with pytest.raises(DomainError, match="more than one split"):
        db.check_manifest(bad)
    bad = db.DatasetManifest([dict(man.records[0], label=1 - man.records[0]["label"])])
    with pytest.raises(DomainError, match="mismatch"):
        db.check_manifest(bad)


def test_missing_class_in_split(bank):
    lone = ac.AtfBank([e for e in bank.entries if e.label == "own"], bank.grid_spec)
    with pytest.raises(DomainError, match="external"):
        db.build_examples(corpus(4), lone, "train", db.NoisePolicy.off(), 0, SHORT)


def test_one_atf_per_utterance(bank):
    c = corpus(5, seconds=1.0)
    man, exs = db.build_examples(c, bank, "train", db.NoisePolicy.off(), 3, SHORT)
    assert len(exs) == 20
    by_utt = {}
    for r in man.records:
        by_utt.setdefault(r["utterance_id"], set()).add(r["atf_id"])
    assert all(len(v) == 1 for v in by_utt.values())


def test_ovdf_round_trip(bank, tmp_path):
    man, exs = db.build_examples(corpus(9, seconds=0.6), bank, "test", db.NoisePolicy.off(), 4, SHORT)
    exs[0].features.mask[-3:] = False
    exs[0].features.features[-3:] = 0
    db.serialize(tmp_path / "d", man, exs, shard_size=7)
    assert len(exs) == 27
    assert len(list((tmp_path / "d").glob("*.ovdf"))) == 4
    man2, back = db.load(tmp_path / "d")
    assert man2.records == json.loads(man.dumps())["records"]
    for a, b in zip(exs, back):
        assert a.label == b.label
        assert np.array_equal(a.features.features.astype(np.float32), b.features.features)
        assert np.array_equal(a.features.mask, b.features.mask)


def test_ovdf_errors_and_empty(tmp_path):
    ex0 = db.Example(ap.LogMelSegment(np.ones((3, 80)), np.ones(3, bool)), 1)
    blob = db.encode_ovdf([ex0])
    with pytest.raises(FormatError, match="magic"):
        db.decode_ovdf(b"XXXX" + blob[4:])
    with pytest.raises(FormatError, match="truncated"):
        db.decode_ovdf(blob[:-2])
    with pytest.raises(FormatError, match="version"):
        db.decode_ovdf(blob[:4] + (9).to_bytes(4, "little") + blob[8:])
    db.serialize(tmp_path / "e", db.DatasetManifest([]), [])
    man, exs = db.load(tmp_path / "e")
    assert man.records == [] and exs == []
    with pytest.raises(FormatError):
        db.load(tmp_path / "nope")


def test_example_contract():
    with pytest.raises(DomainError):
        db.Example(ap.LogMelSegment(np.ones((3, 80)), np.ones(3, bool)), 2)
    with pytest.raises(DomainError):
        db.Example(ap.LogMelSegment(np.ones((0, 80)), np.ones(0, bool)), 0)


def test_external_gain_only_touches_external(bank):
    c = corpus(6)
    base = db.build_examples(c, bank, "train", db.NoisePolicy.off(), 2, SHORT)[1]
    louder = db.build_examples(c, bank, "train", db.NoisePolicy.off(), 2,
                               replace(SHORT, external_gain_db=12.0))[1]
    for a, b in zip(base, louder):
        d = b.features.features - a.features.features
        if a.label == 1:
            assert np.array_equal(d, 0 * d)
        else:
            assert np.median(d) == pytest.approx(np.log(10 ** 1.2), rel=1e-6)


def test_speech_dir(tmp_path):
    for i in range(3):
        ap.write_wav(tmp_path / f"s{i}.wav", db.synth_carrier("white", 0.2, i))
    got = db.load_speech_dir(tmp_path)
    assert [u for u, _ in got] == ["s0", "s1", "s2"]
    with pytest.raises(DomainError):
        db.load_speech_dir(tmp_path / "missing")
