"""Desk-scale experiment drivers shared by the CLI and the acceptance suite."""

from dataclasses import dataclass, replace
import time

import numpy as np

from capsphere import atf_core as ac
from capsphere import classifier as clf
from capsphere import dataset_builder as db


def reduced_spec(n_per_class=250, **overrides):
    """Standard head, distance, mouth and ear ranges; both classes drawn continuously to a fixed budget."""
    base = dict(angle_deg=ac.ParamRange(0.0, 360.0, 360, periodic=True),
                radius_m=ac.ParamRange(0.07, 0.10, 50),
                distance_m=ac.ParamRange(0.5, 20.0, 100),
                mouth_deg=ac.ParamRange(5.0, 20.0, 15),
                ear_deg=ac.ParamRange(90.0, 120.0, 20),
                budget_own=n_per_class, budget_external=n_per_class,
                sampling_own="continuous", sampling_external="continuous")
    base.update(overrides)
    return ac.GridSpec(**base)


def perturbed_spec(n_per_class=100):
    """Shifted domain: larger heads, wider mouths, ears further back, all beyond the base grid."""
    return reduced_spec(n_per_class, radius_m=ac.ParamRange(0.10, 0.12, 20),
                        mouth_deg=ac.ParamRange(20.0, 30.0, 10),
                        ear_deg=ac.ParamRange(120.0, 140.0, 10))


@dataclass(frozen=True)
class ExperimentConfig:
    n_utterances: int = 2000
    seconds: float = 1.0
    carrier: str = "speech_shaped"
    atfs_per_class: int = 250
    seed: int = 0
    epochs: int = 50
    # ~1.1k optimiser steps at this scale; 1e-4 leaves the model under-trained
    lr: float = 1e-3
    threads: int = 1

    def to_dict(self):
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


def split_corpus(corpus, fractions=(0.7, 0.1, 0.2), seed=0):
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(corpus))
    n_tr = int(round(fractions[0] * len(corpus)))
    n_va = int(round(fractions[1] * len(corpus)))
    pick = lambda idx: [corpus[i] for i in sorted(idx)]
    return pick(order[:n_tr]), pick(order[n_tr:n_tr + n_va]), pick(order[n_tr + n_va:])


@dataclass
class Baseline:
    config: ExperimentConfig
    bank: ac.AtfBank
    corpus: dict
    data: dict
    model: clf.Model
    history: clf.History
    seconds_elapsed: float


def build_split_data(corpus, bank, split, seed, noise=db.NoisePolicy.off(), build=db.BuildConfig()):
    manifest, examples = db.build_examples(corpus, bank, split, noise, seed, build)
    return manifest, examples


def run_baseline(cfg=ExperimentConfig()):
    t0 = time.time()
    bank = ac.split_bank(ac.generate_bank(reduced_spec(cfg.atfs_per_class), seed=cfg.seed,
                                          threads=cfg.threads), seed=cfg.seed)
    corpus_all = db.synthetic_corpus(cfg.n_utterances, cfg.seconds, cfg.carrier, cfg.seed)
    tr, va, te = split_corpus(corpus_all, seed=cfg.seed)
    corpus = {"train": tr, "val": va, "test": te}
    data = {}
    for i, split in enumerate(("train", "val", "test")):
        noise = db.NoisePolicy.train_default() if split == "train" else db.NoisePolicy.off()
        data[split] = build_split_data(corpus[split], bank, split, cfg.seed + 101 * (i + 1), noise)
    model = clf.init_model(clf.ModelConfig(), seed=cfg.seed)
    tcfg = clf.TrainConfig(lr=cfg.lr, epochs=cfg.epochs, seed=cfg.seed)
    model, hist = clf.train(model, data["train"][1], data["val"][1], tcfg)
    return Baseline(cfg, bank, corpus, data, model, hist, time.time() - t0)


def eval_variant(base, **build_kw):
    """Re-featurise the held-out utterances with a modified build; returns evaluate() metrics."""
    noise = build_kw.pop("noise", db.NoisePolicy.off())
    build = replace(db.BuildConfig(), **build_kw)
    _, ex = db.build_examples(base.corpus["test"], base.bank, "test", noise,
                              base.config.seed + 303, build)
    return clf.evaluate(base.model, ex)


def finetune_comparison(base, seed, n_shift_utts=600, epochs=5, lr=None):
    """Accuracy on a shifted ATF domain after head-only vs encoder+head fine-tuning."""
    shift = ac.split_bank(ac.generate_bank(perturbed_spec(), seed=1000 + seed), seed=1000 + seed)
    corpus = db.synthetic_corpus(n_shift_utts, base.config.seconds, base.config.carrier, 5000 + seed)
    tr, va, te = split_corpus(corpus, seed=seed)
    _, d_tr = db.build_examples(tr, shift, "train", db.NoisePolicy.off(), 7000 + seed)
    _, d_te = db.build_examples(te, shift, "test", db.NoisePolicy.off(), 9000 + seed)
    tcfg = clf.TrainConfig(lr=base.config.lr if lr is None else lr, epochs=epochs, seed=seed)
    out = {"pretrained": clf.evaluate(base.model, d_te)["accuracy"]}
    for strategy in clf.STRATEGIES:
        m, _ = clf.finetune(base.model, d_tr, strategy, tcfg)
        out[strategy] = clf.evaluate(m, d_te)["accuracy"]
    return out
