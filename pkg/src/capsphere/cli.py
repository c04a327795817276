"""Command-line entry point.

Every subcommand resolves one RunConfig (built-in defaults, then an optional
``--config`` file, then explicit flags) and embeds it, minus host-only
settings such as the thread count, in the manifest written next to its
output. Passing that manifest back as ``--config`` repeats the run.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

import argparse
import copy
from dataclasses import fields
import json
import math
import os
from pathlib import Path
import sys

import numpy as np

from capsphere import _accel
from capsphere import atf_core as ac
from capsphere import audio_pipeline as ap
from capsphere import classifier as clf
from capsphere import dataset_builder as db
from capsphere import experiments as ex
from capsphere import pressure_field as pf
from capsphere.errors import CapsphereError
from capsphere.special_math import TruncationPolicy

RUN_CONFIG_VERSION = 1
SPLITS = ("train", "val", "test")

# section name -> dataclass whose fields it mirrors
_SECTIONS = {
    "medium": pf.Medium,
    "truncation": TruncationPolicy,
    "grid": ac.FrequencyGrid,
    "pipeline": ap.PipelineConfig,
    "build": db.BuildConfig,
    "model": clf.ModelConfig,
    "train": clf.TrainConfig,
}


class UsageError(Exception):
    pass


def _plain(obj):
    """JSON-ready copy: tuples become lists."""
    return json.loads(json.dumps(obj))


def default_run_config():
    doc = {"version": RUN_CONFIG_VERSION, "seed": 0}
    for name, cls in _SECTIONS.items():
        inst = cls()
        doc[name] = _plain({f.name: getattr(inst, f.name) for f in fields(cls)})
    # the desk-scale recipe; the module default leaves 50 short epochs under-trained
    doc["train"]["lr"] = ex.ExperimentConfig().lr
    doc["noise"] = _plain(db.NoisePolicy.train_default().to_dict())
    doc["grid_spec"] = ex.reduced_spec().to_dict()
    doc["corpus"] = {"source": "synthetic", "n_utterances": 2000, "seconds": 1.0,
                     "carrier": "speech_shaped"}
    doc["split_fractions"] = [0.7, 0.1, 0.2]
    doc["finetune"] = {"strategy": "encoder_plus_head", "epochs": 5}
    doc["directivity"] = {"field": "cap", "freq_hz": 1000.0, "radius_m": 0.0875, "cap_deg": 10.0,
                          "distance_m": 1.0, "step_deg": 1.0}
    doc["augment"] = {"atf_id": None, "snr_db": None, "noise_kind": "babble", "gain_db": 0.0}
    doc["inputs"] = {}
    return doc


def merge_run_config(base, override):
    """Overlay a (possibly partial) RunConfig document onto ``base``."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise UsageError(f"unknown RunConfig key {key!r}")
        if isinstance(out[key], dict) and key not in ("grid_spec", "inputs"):
            if not isinstance(value, dict):
                raise UsageError(f"RunConfig section {key!r} must be an object")
            for sub, v in value.items():
                if sub not in out[key]:
                    raise UsageError(f"unknown RunConfig key {key}.{sub}")
                out[key][sub] = v
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_run_config(path):
    """A RunConfig file, or any manifest with an embedded ``run_config``."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if isinstance(doc, dict) and isinstance(doc.get("run_config"), dict):
        doc = doc["run_config"]
    elif isinstance(doc, dict) and isinstance((doc.get("extra") or {}).get("run_config"), dict):
        doc = doc["extra"]["run_config"]
    if not isinstance(doc, dict):
        raise UsageError(f"{path} is not a RunConfig document")
    doc = dict(doc)
    doc.pop("command", None)
    if doc.get("version", RUN_CONFIG_VERSION) != RUN_CONFIG_VERSION:
        raise UsageError("unsupported RunConfig version")
    return merge_run_config(default_run_config(), doc)


def _build(cls, section):
    try:
        return cls(**section)
    except TypeError as exc:
        raise UsageError(f"bad {cls.__name__} settings: {exc}") from exc


class Run:
    """Typed views over a resolved RunConfig document."""

    def __init__(self, doc, command):
        self.doc = doc
        self.command = command
        if ap.PipelineConfig(**doc["pipeline"]) != ap.DEFAULT_CONFIG:
            raise UsageError("pipeline constants are fixed in this build; use the defaults")

    @property
    def seed(self):
        return int(self.doc["seed"])

    def medium(self):
        return _build(pf.Medium, self.doc["medium"])

    def policy(self):
        return _build(TruncationPolicy, self.doc["truncation"])

    def grid(self):
        return _build(ac.FrequencyGrid, self.doc["grid"])

    def build_config(self, **kw):
        return _build(db.BuildConfig, {**self.doc["build"], **kw})

    def noise(self):
        n = self.doc["noise"]
        return _build(db.NoisePolicy, {**n, "snr_levels_db": tuple(n["snr_levels_db"])})

    def model_config(self):
        return _build(clf.ModelConfig, self.doc["model"])

    def train_config(self, **kw):
        return _build(clf.TrainConfig, {**self.doc["train"], **kw})

    def grid_spec(self):
        try:
            return ac.GridSpec.from_dict(self.doc["grid_spec"])
        except (KeyError, TypeError) as exc:
            raise UsageError(f"bad grid_spec: {exc}") from exc

    def manifest_doc(self):
        return {"command": self.command, **copy.deepcopy(self.doc)}


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


# flag dest -> RunConfig path; only flags the user actually passed override
_OVERRIDES = {
    "seed": ("seed",),
    "freq": ("directivity", "freq_hz"),
    "radius": ("directivity", "radius_m"),
    "cap_deg": ("directivity", "cap_deg"),
    "field": ("directivity", "field"),
    "distance": ("directivity", "distance_m"),
    "step_deg": ("directivity", "step_deg"),
    "atf_id": ("augment", "atf_id"),
    "snr": ("augment", "snr_db"),
    "noise_kind": ("augment", "noise_kind"),
    "gain_db": ("augment", "gain_db"),
    "n_utterances": ("corpus", "n_utterances"),
    "seconds": ("corpus", "seconds"),
    "carrier": ("corpus", "carrier"),
    "noise_fraction": ("noise", "fraction"),
    "external_gain_db": ("build", "external_gain_db"),
    "level_jitter_db": ("build", "level_jitter_db"),
    "epochs": ("train", "epochs"),
    "lr": ("train", "lr"),
    "batch_size": ("train", "batch_size"),
    "strategy": ("finetune", "strategy"),
    "ft_epochs": ("finetune", "epochs"),
}

# flag dest -> key under RunConfig "inputs"
_INPUTS = ("spec", "bank", "speech", "data", "checkpoint", "input", "reference", "target",
           "compensation")


def _common(p):
    p.add_argument("--config", help="RunConfig JSON or an output manifest to repeat")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="worker threads (default: $CAPSPHERE_THREADS or all cores)")


def build_parser():
    parser = _Parser(prog="capsphere", description="Analytical sphere ATFs and own-voice detection.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("atf-gen", help="generate an ATF bank")
    _common(p)
    p.add_argument("--spec", help="GridSpec JSON (default: the reduced 250/250 grid)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("directivity", help="write a directivity pattern as CSV")
    _common(p)
    p.add_argument("--freq", type=float)
    p.add_argument("--radius", type=float)
    p.add_argument("--cap-deg", type=float)
    p.add_argument("--field", choices=("cap", "point_scatter"))
    p.add_argument("--distance", type=float, help="source distance for point_scatter")
    p.add_argument("--step-deg", type=float)
    p.add_argument("--out", required=True)

    p = sub.add_parser("augment", help="apply one bank ATF (and optional noise) to a WAV file")
    _common(p)
    p.add_argument("--input")
    p.add_argument("--bank")
    p.add_argument("--atf-id")
    p.add_argument("--snr", type=float)
    p.add_argument("--noise-kind", choices=db.NOISE_KINDS)
    p.add_argument("--gain-db", type=float)
    p.add_argument("--out", required=True)

    p = sub.add_parser("dataset-build", help="featurise a corpus through a bank into train/val/test")
    _common(p)
    p.add_argument("--bank")
    p.add_argument("--speech", help="directory of 16 kHz mono WAV files (default: synthetic carriers)")
    p.add_argument("--n-utterances", type=int)
    p.add_argument("--seconds", type=float)
    p.add_argument("--carrier", choices=("speech_shaped", "white", "pink", "babble"))
    p.add_argument("--noise-fraction", type=float, help="noisy fraction of the training split")
    p.add_argument("--level-jitter-db", type=float)
    p.add_argument("--external-gain-db", type=float)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train the classifier")
    _common(p)
    p.add_argument("--data", help="dataset directory holding train/ and val/")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint on new data")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--strategy", choices=clf.STRATEGIES)
    p.add_argument("--epochs", dest="ft_epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", required=True)

    for name, help_ in (("eval", "accuracy and confusion matrix as JSON"), ("roc", "ROC curve as CSV")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        p.add_argument("--checkpoint")
        p.add_argument("--data", help="a split directory, or a dataset directory holding test/")
        p.add_argument("--compensation", help="stats JSON from `compensate`, applied before scoring")
        p.add_argument("--out", required=True)

    p = sub.add_parser("compensate", help="estimate statistic-matching parameters")
    _common(p)
    p.add_argument("--reference", help="training-domain split directory")
    p.add_argument("--target", help="test-domain split directory")
    p.add_argument("--out", required=True)

    p = sub.add_parser("selftest", help="run the built-in invariant checks")
    p.add_argument("--threads", type=int)
    return parser


def _set_path(doc, path, value):
    node = doc
    for key in path[:-1]:
        node = node[key]
    node[path[-1]] = value


def resolve(args):
    doc = load_run_config(args.config) if getattr(args, "config", None) else default_run_config()
    for dest, path in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            _set_path(doc, path, value)
    for dest in _INPUTS:
        value = getattr(args, dest, None)
        if value is not None:
            doc["inputs"][dest] = str(value)
    return Run(doc, args.command)


def resolve_threads(flag):
    if flag is not None:
        n = flag
    elif os.environ.get("CAPSPHERE_THREADS"):
        try:
            n = int(os.environ["CAPSPHERE_THREADS"])
        except ValueError:
            raise UsageError("CAPSPHERE_THREADS must be an integer") from None
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise UsageError("--threads must be >= 1")
    return n


def _need(run, key):
    value = run.doc["inputs"].get(key)
    if value is None:
        raise UsageError(f"--{key} is required")
    return value


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _sidecar(out, run, **extra):
    _write_json(f"{out}.manifest.json", {"run_config": run.manifest_doc(), **extra})


def _split_dir(path, split):
    path = Path(path)
    if (path / "manifest.json").exists() and not (path / split / "manifest.json").exists():
        return path
    return path / split


# ---------------------------------------------------------------------------
# subcommands


def cmd_atf_gen(run, args, threads):
    spec_path = run.doc["inputs"].get("spec")
    if spec_path is not None:
        try:
            run.doc["grid_spec"] = json.loads(Path(spec_path).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read grid spec {spec_path}: {exc}") from exc
        # the grid content is embedded, so the path is not needed to repeat the run
        del run.doc["inputs"]["spec"]
    spec = run.grid_spec()
    bank = ac.generate_bank(spec, run.medium(), run.grid(), seed=run.seed, threads=threads,
                            policy=run.policy())
    bank = ac.split_bank(bank, tuple(run.doc["split_fractions"]), seed=run.seed)
    ac.write_bank(bank, args.out, run_config=run.manifest_doc())
    counts = bank.counts()
    print(f"wrote {len(bank.entries)} ATFs to {args.out} ({json.dumps(counts, sort_keys=True)})")


def cmd_directivity(run, args, threads):
    d = run.doc["directivity"]
    geom = pf.SceneGeometry(sphere_radius=float(d["radius_m"]), cap_half_angle=math.radians(d["cap_deg"]),
                            source_distance=float(d["distance_m"]),
                            ref_distance=min(0.1, 0.5 * float(d["distance_m"])))
    step = float(d["step_deg"])
    if not 0 < step <= 180:
        raise UsageError("--step-deg must lie in (0, 180]")
    n = int(round(180.0 / step))
    thetas = [math.radians(i * step) for i in range(n + 1) if i * step <= 180.0 + 1e-9]
    k = float(run.medium().wavenumber(float(d["freq_hz"])))
    pattern = pf.directivity_pattern(d["field"], run.medium(), geom, k, thetas, policy=run.policy())
    pf.write_directivity_csv(args.out, pattern)
    _sidecar(args.out, run)
    print(f"wrote {len(pattern)} angles to {args.out}")


def cmd_augment(run, args, threads):
    wav = ap.read_wav(_need(run, "input"))
    bank = ac.read_bank(_need(run, "bank"))
    a = run.doc["augment"]
    if a["atf_id"] is None:
        raise UsageError("--atf-id is required")
    entry = next((e for e in bank.entries if e.id == a["atf_id"]), None)
    if entry is None:
        raise UsageError(f"no ATF {a['atf_id']!r} in the bank")
    x = ap.istft(ap.apply_atf(ap.stft(wav), entry.tf)).samples
    x = x * 10.0 ** (float(a["gain_db"]) / 20.0)
    if a["snr_db"] is not None:
        noise = db.noise_waveform(a["noise_kind"], x.shape[0], run.seed)
        x = ap.mix_noise_at_snr(x, noise, float(a["snr_db"]), run.seed).samples
    ap.write_wav(args.out, ap.Waveform(x), fmt="float32")
    _sidecar(args.out, run, atf={"id": entry.id, "class": entry.label, "geometry": entry.geometry.to_dict()})
    print(f"wrote {args.out} ({entry.label} ATF {entry.id})")


def _corpus(run):
    speech = run.doc["inputs"].get("speech")
    if speech is not None:
        return db.load_speech_dir(speech), "speech_dir"
    c = run.doc["corpus"]
    return db.synthetic_corpus(int(c["n_utterances"]), float(c["seconds"]), c["carrier"], run.seed), "synthetic"


def cmd_dataset_build(run, args, threads):
    bank = ac.read_bank(_need(run, "bank"))
    corpus, source = _corpus(run)
    parts = ex.split_corpus(corpus, tuple(run.doc["split_fractions"]), seed=run.seed)
    out = Path(args.out)
    build = run.build_config()
    counts = {}
    for i, (split, utts) in enumerate(zip(SPLITS, parts)):
        noise = run.noise() if split == "train" else db.NoisePolicy.off()
        manifest, examples = db.build_examples(utts, bank, split, noise, run.seed + 101 * (i + 1), build, source)
        db.serialize(out / split, manifest, examples, run_config=run.manifest_doc())
        counts[split] = len(examples)
    _write_json(out / "manifest.json", {"run_config": run.manifest_doc(), "splits": list(SPLITS),
                                        "counts": counts})
    print(f"wrote {out}: " + ", ".join(f"{s} {counts[s]}" for s in SPLITS))


def _load(path):
    return db.load(path)[1]


def cmd_train(run, args, threads):
    data = Path(_need(run, "data"))
    train_set = _load(_split_dir(data, "train"))
    val_dir = data / "val"
    val_set = _load(val_dir) if (val_dir / "manifest.json").exists() else None
    model = clf.init_model(run.model_config(), seed=run.seed)
    model, hist = clf.train(model, train_set, val_set, run.train_config(seed=run.seed))
    clf.save_checkpoint(model, args.out, extra={"run_config": run.manifest_doc()})
    _sidecar(args.out, run, history=hist.to_dict())
    print(f"trained {run.doc['train']['epochs']} epochs; best epoch {hist.best_epoch}, "
          f"val accuracy {max(hist.val_accuracy) if hist.val_accuracy else float('nan'):.4f}")


def cmd_finetune(run, args, threads):
    model = clf.load_checkpoint(_need(run, "checkpoint"))
    data = Path(_need(run, "data"))
    train_set = _load(_split_dir(data, "train"))
    val_dir = data / "val"
    val_set = _load(val_dir) if (val_dir / "manifest.json").exists() else None
    ft = run.doc["finetune"]
    cfg = run.train_config(seed=run.seed, epochs=int(ft["epochs"]))
    model, hist = clf.finetune(model, train_set, ft["strategy"], cfg, val_set)
    clf.save_checkpoint(model, args.out, extra={"run_config": run.manifest_doc()})
    _sidecar(args.out, run, history=hist.to_dict())
    print(f"fine-tuned ({ft['strategy']}, {ft['epochs']} epochs)")


def _scored_set(run):
    model = clf.load_checkpoint(_need(run, "checkpoint"))
    examples = _load(_split_dir(_need(run, "data"), "test"))
    comp = run.doc["inputs"].get("compensation")
    if comp is not None:
        try:
            stats = ap.CompensationStats.from_dict(json.loads(Path(comp).read_text()))
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot read compensation stats {comp}: {exc}") from exc
        examples = [db.Example(ap.compensate(e.features, stats), e.label) for e in examples]
    return model, examples


def cmd_eval(run, args, threads):
    model, examples = _scored_set(run)
    metrics = clf.evaluate(model, examples)
    prob = clf.predict_proba(model, examples)
    _, auc = clf.roc_from_scores(prob, [e.label for e in examples])
    metrics["auc"] = auc
    _write_json(args.out, {"run_config": run.manifest_doc(), "metrics": metrics})
    print(f"accuracy {metrics['accuracy']:.4f}, AUC {auc:.4f} over {metrics['n']} segments")


def cmd_roc(run, args, threads):
    model, examples = _scored_set(run)
    points, auc = clf.roc_auc(model, examples)
    clf.write_roc_csv(args.out, points)
    _sidecar(args.out, run, auc=auc)
    print(f"AUC {auc:.6f}; {len(points)} points to {args.out}")


def cmd_compensate(run, args, threads):
    ref = _load(_split_dir(_need(run, "reference"), "train"))
    tgt = _load(_split_dir(_need(run, "target"), "test"))
    mu_s, sigma_s = ap.estimate_stats([e.features for e in ref])
    mu_r, sigma_r = ap.estimate_stats([e.features for e in tgt])
    stats = ap.CompensationStats(np.zeros(ap.N_MELS), mu_r, sigma_r, mu_s, sigma_s)
    _write_json(args.out, {**stats.to_dict(), "run_config": run.manifest_doc()})
    print(f"wrote compensation stats to {args.out}")


def selftest():
    """Fast invariant checks; returns a list of (name, ok, detail)."""
    out = []

    def check(name, ok, detail):
        out.append((name, bool(ok), detail))

    medium, grid = pf.Medium(), ac.FrequencyGrid()
    g = pf.SceneGeometry(sphere_radius=0.0875, source_distance=1.5, source_azimuth=math.radians(30))
    k = medium.wavenumber(np.array([500.0, 2000.0, 8000.0]))

    # rigid boundary by a one-sided 5-point radial stencil
    R, worst = g.sphere_radius, 0.0
    for kk in k:
        h = 1e-3 / kk
        coef = np.array([-25.0, 48.0, -36.0, 16.0, -3.0]) / 12.0
        for theta in (0.0, math.pi / 2, math.pi):
            vals = [pf.total_pressure(medium, 1.0, g, R + i * h, theta, kk) for i in range(5)]
            dp = sum(c * v for c, v in zip(coef, vals)) / h
            ref = abs(pf.incident_radial_derivative(medium, 1.0, g, R, theta, kk))
            worst = max(worst, abs(dp) / ref)
    check("rigid boundary", worst < 1e-6, f"max |u_r| rel {worst:.2e}")

    r, th = 0.3, 0.7
    series = pf.incident_pressure_series(medium, 1.0, g, r, th, k)
    r1 = math.sqrt(r * r + g.source_distance ** 2 - 2 * r * g.source_distance * math.cos(th))
    closed = pf.incident_pressure_freefield(medium, 1.0, r1, k)
    err = float(np.max(np.abs(series - closed) / np.abs(closed)))
    check("series vs closed form", err < 1e-8, f"rel {err:.2e}")

    og = pf.SceneGeometry(ear_azimuth=0.0)
    cs = ac.h_cs(og, medium, grid.wavenumbers(medium)[1:])
    check("h_cs on axis", np.all(cs == 1 + 0j), "exact 1+0i")
    pp = ac.h_pp(g, grid.wavenumbers(medium)[1:])
    err = float(np.max(np.abs(np.abs(pp) - g.ref_distance / g.source_distance)))
    check("|h_pp| = r0/r1", err < 1e-15, f"abs {err:.1e}")
    pat = pf.directivity_pattern("cap", medium, g, float(k[1]), [0.0, 1.0])
    check("directivity(0) = 0 dB", pat[0][1] == 0.0, f"{pat[0][1]}")

    rng = np.random.default_rng(0)
    x = ap.Waveform(rng.standard_normal(8000) * 0.1)
    y = ap.istft(ap.stft(x)).samples
    # first and last window are tapered by a single frame, so compare inside them
    w = ap.WIN_LENGTH
    err = float(np.max(np.abs(y[w:-w] - x.samples[w:-w])))
    check("STFT round trip", err < 1e-6, f"max abs {err:.1e}")
    seg = ap.features(x)
    mu, sd = ap.estimate_stats([seg])
    same = ap.compensate(seg, ap.CompensationStats(np.zeros(ap.N_MELS), mu, sd, mu, sd))
    check("compensate identity", np.array_equal(same.features, seg.features), "bitwise")

    noise = rng.standard_normal(8000)
    mixed = ap.mix_noise_at_snr(x, noise, 10.0, 0).samples
    got = 20 * math.log10(ap.rms(x) / ap.rms(mixed - x.samples))
    check("SNR mixing", abs(got - 10.0) < 0.1, f"{got:.4f} dB")

    model = clf.init_model(clf.ModelConfig(encoder_hidden_dims=(8,)), seed=0)
    exs = [db.Example(ap.features(ap.Waveform(rng.standard_normal(4000) * 0.1), label=i % 2), i % 2)
           for i in range(4)]
    batch = clf.make_batch(exs)
    clf.fit_normalizer(model, batch)
    gc = clf.gradient_check(model, batch, n_coords=5)
    check("gradient check", gc < 1e-4, f"max rel {gc:.1e}")
    return out


def cmd_selftest():
    results = selftest()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    failed = [n for n, ok, _ in results if not ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 0 if not failed else 2


COMMANDS = {
    "atf-gen": cmd_atf_gen,
    "directivity": cmd_directivity,
    "augment": cmd_augment,
    "dataset-build": cmd_dataset_build,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "roc": cmd_roc,
    "compensate": cmd_compensate,
}


def dispatch(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # --help exits 0; everything argparse rejects is a usage error
        return 0 if exc.code in (0, None) else 1
    try:
        threads = resolve_threads(args.threads)
        _accel.set_threads(threads)
        if args.command == "selftest":
            return cmd_selftest()
        run = resolve(args)
        COMMANDS[args.command](run, args, threads)
        return 0
    except UsageError as exc:
        print(f"capsphere {args.command}: {exc}", file=sys.stderr)
        return 1
    except (CapsphereError, OSError, ValueError, ArithmeticError) as exc:
        print(f"capsphere {args.command}: error: {exc}", file=sys.stderr)
        return 2


def main(argv=None):
    sys.exit(dispatch(argv))
