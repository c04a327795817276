"""Frame-MLP encoder with temporal gate pooling and a two-logit head.

Everything is plain numpy with hand-written gradients. Segments are batched
as (B, T, 80) arrays with (B, T) validity masks; masked frames get zero
gate weight, so trailing padding never changes a prediction.
"""

from dataclasses import dataclass, field
import json
import math
from pathlib import Path

import numpy as np

from capsphere.errors import CapsphereError, DomainError, FormatError

INPUT_DIM = 80
EPS = 1e-8
CHECKPOINT_VERSION = 1
STRATEGIES = ("head_only", "encoder_plus_head")


class TrainingError(CapsphereError, ArithmeticError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = INPUT_DIM
    encoder_hidden_dims: tuple = (64, 64)
    nonlinearity: str = "relu"
    pool: str = "temporal_gate"
    n_classes: int = 2
    normalize_input: bool = True
    # subtract each segment's mean log-mel level, so a broadband gain is a no-op
    level_invariant: bool = True

    def __post_init__(self):
        object.__setattr__(self, "encoder_hidden_dims", tuple(int(d) for d in self.encoder_hidden_dims))
        if self.input_dim != INPUT_DIM:
            raise DomainError(f"input_dim must be {INPUT_DIM}")
        if len(self.encoder_hidden_dims) < 1 or min(self.encoder_hidden_dims) < 1:
            raise DomainError("need at least one encoder layer")
        if self.nonlinearity not in ("relu", "identity"):
            raise DomainError("nonlinearity must be relu or identity")
        if self.n_classes != 2:
            raise DomainError("n_classes must be 2")

    def to_dict(self):
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d["encoder_hidden_dims"] = list(self.encoder_hidden_dims)
        return d


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_fraction: float = 0.1
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise DomainError("lr must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise DomainError("epochs and batch_size must be >= 1")

    def to_dict(self):
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


@dataclass
class Model:
    config: ModelConfig
    params: dict
    seed: int = 0
    # fixed per-channel input standardisation, fitted once on training data
    input_mean: np.ndarray = None
    input_std: np.ndarray = None

    def __post_init__(self):
        if self.input_mean is None:
            self.input_mean = np.zeros(INPUT_DIM)
        if self.input_std is None:
            self.input_std = np.ones(INPUT_DIM)
        n = len(self.config.encoder_hidden_dims)
        dims = (INPUT_DIM,) + self.config.encoder_hidden_dims
        expect = {}
        for i in range(n):
            expect[f"enc{i}.W"] = (dims[i], dims[i + 1])
            expect[f"enc{i}.b"] = (dims[i + 1],)
        expect.update({"gate.w": (dims[-1],), "gate.b": (1,), "head.W": (dims[-1], 2), "head.b": (2,)})
        if set(expect) != set(self.params):
            raise DomainError("parameter names do not match the config")
        for k, shape in expect.items():
            if self.params[k].shape != shape:
                raise DomainError(f"{k} has shape {self.params[k].shape}, expected {shape}")
            if not np.all(np.isfinite(self.params[k])):
                raise DomainError(f"{k} has non-finite values")

    def copy(self):
        return Model(self.config, {k: v.copy() for k, v in self.params.items()}, self.seed,
                     self.input_mean.copy(), self.input_std.copy())

    @property
    def n_layers(self):
        return len(self.config.encoder_hidden_dims)

    def encoder_keys(self):
        return [k for k in self.params if k.startswith("enc") or k.startswith("gate")]

    def head_keys(self):
        return ["head.W", "head.b"]


def init_model(config=ModelConfig(), seed=0):
    rng = np.random.default_rng(seed)
    dims = (INPUT_DIM,) + config.encoder_hidden_dims
    params = {}

    def uni(fan_in, shape):
        a = math.sqrt(1.0 / fan_in)
        return rng.uniform(-a, a, shape)

    for i in range(len(config.encoder_hidden_dims)):
        params[f"enc{i}.W"] = uni(dims[i], (dims[i], dims[i + 1]))
        params[f"enc{i}.b"] = uni(dims[i], (dims[i + 1],))
    params["gate.w"] = uni(dims[-1], (dims[-1],))
    params["gate.b"] = uni(dims[-1], (1,))
    params["head.W"] = uni(dims[-1], (dims[-1], 2))
    params["head.b"] = uni(dims[-1], (2,))
    return Model(config, params, seed)


def fit_normalizer(model, batch):
    """Set the input standardisation from the valid frames of ``batch``."""
    x, m, _ = batch
    rows = _centre(model, x, m)[m]
    if rows.shape[0] < 2:
        raise DomainError("need at least two valid frames to fit the normaliser")
    model.input_mean = rows.mean(axis=0)
    model.input_std = np.maximum(rows.std(axis=0), 1e-3)
    return model


# ---------------------------------------------------------------------------
# batching


def make_batch(examples):
    """(x (B,T,80), mask (B,T), labels (B,)) with zero right-padding."""
    if not examples:
        raise DomainError("empty batch")
    T = max(e.features.features.shape[0] for e in examples)
    x = np.zeros((len(examples), T, INPUT_DIM))
    m = np.zeros((len(examples), T), dtype=bool)
    y = np.empty(len(examples), dtype=int)
    for i, e in enumerate(examples):
        n = e.features.features.shape[0]
        x[i, :n] = e.features.features
        m[i, :n] = e.features.mask
        y[i] = e.label
    return x, m, y


def _as_batch(x):
    if hasattr(x, "features") and hasattr(x, "mask"):
        return x.features[None], x.mask[None]
    if isinstance(x, tuple):
        return x[0], x[1]
    raise DomainError("expected a LogMelSegment or (x, mask)")


# ---------------------------------------------------------------------------
# forward / backward


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _centre(model, x, m):
    if not model.config.level_invariant:
        return x
    # accumulate over t in order so trailing padding adds exact zeros
    tot = np.zeros(x.shape[0])
    for t in range(x.shape[1]):
        tot += np.where(m[:, t], x[:, t].sum(axis=1), 0.0)
    level = tot / (np.maximum(m.sum(axis=1), 1) * x.shape[2])
    return x - level[:, None, None]


def _forward(model, x, m):
    cfg = model.config
    if np.any(m.sum(axis=1) == 0):
        raise DomainError("every segment needs at least one valid frame")
    p = model.params
    B, T, _ = x.shape
    # only valid frames go through the encoder, so padding cannot perturb
    # the arithmetic of the frames that matter
    rows = _centre(model, x, m)[m]
    h = (rows - model.input_mean) / model.input_std if cfg.normalize_input else rows
    acts_v, pre_v = [h], []
    for i in range(model.n_layers):
        z = acts_v[-1] @ p[f"enc{i}.W"] + p[f"enc{i}.b"]
        pre_v.append(z)
        acts_v.append(np.maximum(z, 0.0) if cfg.nonlinearity == "relu" else z)

    def scatter(v):
        full = np.zeros((B, T, v.shape[1]))
        full[m] = v
        return full

    acts = [scatter(a) for a in acts_v]
    pre = [scatter(z) for z in pre_v]
    H = acts[-1]
    s = np.zeros((B, T))
    s[m] = _sigmoid(acts_v[-1] @ p["gate.w"] + p["gate.b"][0])
    g = s * m
    acc = np.zeros((B, H.shape[2]))
    S = np.zeros(B)
    for t in range(T):
        acc += g[:, t, None] * H[:, t]
        S += g[:, t]
    S = S + EPS
    pooled = acc / S[:, None]
    logits = pooled @ p["head.W"] + p["head.b"]
    cache = dict(acts=acts, pre=pre, s=s, g=g, S=S, pooled=pooled, m=m)
    return logits, cache


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(model, x):
    """(logits, prob_own) for one segment or a batch (x, mask)."""
    xb, mb = _as_batch(x)
    logits, _ = _forward(model, xb, mb)
    prob = softmax(logits)[:, 1]
    if hasattr(x, "features"):
        return logits[0], float(prob[0])
    return logits, prob


def loss_and_grads(model, batch):
    x, m, y = batch
    logits, c = _forward(model, x, m)
    B = x.shape[0]
    prob = softmax(logits)
    loss = float(-np.mean(np.log(np.maximum(prob[np.arange(B), y], 1e-300))))
    p = model.params
    grads = {}
    dlog = prob.copy()
    dlog[np.arange(B), y] -= 1.0
    dlog /= B
    grads["head.W"] = c["pooled"].T @ dlog
    grads["head.b"] = dlog.sum(axis=0)
    dpool = dlog @ p["head.W"].T
    H = c["acts"][-1]
    S = c["S"]
    dH = c["g"][..., None] * (dpool / S[:, None])[:, None, :]
    dg = np.einsum("btd,bd->bt", H - c["pooled"][:, None, :], dpool) / S[:, None]
    da = dg * c["s"] * (1.0 - c["s"]) * c["m"]
    grads["gate.w"] = np.einsum("bt,btd->d", da, H)
    grads["gate.b"] = np.array([da.sum()])
    dH = dH + da[..., None] * p["gate.w"]
    for i in reversed(range(model.n_layers)):
        dz = dH * (c["pre"][i] > 0) if model.config.nonlinearity == "relu" else dH
        a_in = c["acts"][i]
        grads[f"enc{i}.W"] = np.einsum("bti,btj->ij", a_in, dz)
        grads[f"enc{i}.b"] = dz.sum(axis=(0, 1))
        dH = dz @ p[f"enc{i}.W"].T
    return loss, grads


def _loss_and_kinks(model, batch):
    x, m, y = batch
    logits, c = _forward(model, x, m)
    prob = softmax(logits)
    loss = float(-np.mean(np.log(np.maximum(prob[np.arange(len(y)), y], 1e-300))))
    kinks = None
    if model.config.nonlinearity == "relu":
        kinks = np.concatenate([(z[m] > 0).ravel() for z in c["pre"]])
    return loss, kinks


def batch_loss(model, batch):
    return _loss_and_kinks(model, batch)[0]


def gradient_check(model, batch, step=1e-4, n_coords=20, seed=0):
    """Max relative error between analytic and central-difference gradients.

    A coordinate whose +-step probe flips the sign of any ReLU pre-activation
    is skipped and another one drawn: across a kink the central difference
    is not an estimate of the derivative. Each tensor contributes up to
    ``n_coords`` compared coordinates; fewer only when it runs out of
    kink-free ones.
    """
    rng = np.random.default_rng(seed)
    _, grads = loss_and_grads(model, batch)
    _, base = _loss_and_kinks(model, batch)
    worst = 0.0
    for key, value in model.params.items():
        flat = value.reshape(-1)
        compared = 0
        for j in rng.permutation(flat.size):
            if compared == n_coords:
                break
            orig = flat[j]
            flat[j] = orig + step
            lp, kp = _loss_and_kinks(model, batch)
            flat[j] = orig - step
            lm, km = _loss_and_kinks(model, batch)
            flat[j] = orig
            if base is not None and not (np.array_equal(kp, base) and np.array_equal(km, base)):
                continue
            compared += 1
            num = (lp - lm) / (2 * step)
            ana = grads[key].reshape(-1)[j]
            denom = max(abs(num), abs(ana), 1e-6)
            worst = max(worst, abs(num - ana) / denom)
        if compared == 0:
            raise DomainError(f"{key}: every coordinate straddles a kink; use a smaller step")
    return worst


# ---------------------------------------------------------------------------
# optimisation


def lr_at(step, total, cfg):
    """Linear warmup over the first warmup_fraction of steps, then cosine to 0."""
    warm = max(1, int(round(cfg.warmup_fraction * total)))
    if step < warm:
        return cfg.lr * (step + 1) / warm
    frac = (step - warm) / max(1, total - warm)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(1.0, frac)))


class AdamW:
    def __init__(self, keys, cfg):
        self.cfg = cfg
        self.keys = list(keys)
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads, lr):
        c = self.cfg
        self.t += 1
        b1t = 1.0 - c.beta1 ** self.t
        b2t = 1.0 - c.beta2 ** self.t
        for k in self.keys:
            g = grads[k]
            m = self.m.get(k, np.zeros_like(g))
            v = self.v.get(k, np.zeros_like(g))
            m = c.beta1 * m + (1 - c.beta1) * g
            v = c.beta2 * v + (1 - c.beta2) * g * g
            self.m[k], self.v[k] = m, v
            params[k] -= lr * (m / b1t / (np.sqrt(v / b2t) + c.adam_eps) + c.weight_decay * params[k])


@dataclass
class History:
    train_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    best_epoch: int = -1
    initial_loss: float = None

    def to_dict(self):
        return {"train_loss": self.train_loss, "val_accuracy": self.val_accuracy,
                "best_epoch": self.best_epoch, "initial_loss": self.initial_loss}


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _run(model, train_set, val_set, cfg, keys):
    if not train_set:
        raise DomainError("empty training set")
    labels = {e.label for e in train_set}
    if labels != {0, 1}:
        raise DomainError("training set needs both classes")
    rng = np.random.default_rng(cfg.seed)
    full = make_batch(train_set)
    val = make_batch(val_set) if val_set else None
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    opt = AdamW(keys, cfg)
    hist = History(initial_loss=batch_loss(model, full))
    best, best_acc, step = model.copy(), -1.0, 0
    for epoch in range(cfg.epochs):
        losses, weights = [], []
        for idx in _batches(len(train_set), cfg.batch_size, rng):
            batch = (full[0][idx], full[1][idx], full[2][idx])
            loss, grads = loss_and_grads(model, batch)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            opt.step(model.params, grads, lr_at(step, total, cfg))
            losses.append(loss)
            weights.append(len(idx))
            step += 1
        hist.train_loss.append(float(np.average(losses, weights=weights)))
        acc = accuracy_on_batch(model, val if val is not None else full)
        hist.val_accuracy.append(acc)
        if acc > best_acc:
            best_acc, best, hist.best_epoch = acc, model.copy(), epoch
    return best, hist


def train(model, train_set, val_set, config=TrainConfig()):
    """Train all parameters; returns (best-validation model, history)."""
    model = model.copy()
    if model.config.normalize_input:
        fit_normalizer(model, make_batch(train_set))
    return _run(model, train_set, val_set, config, list(model.params))


def finetune(model, data, strategy, config=TrainConfig(epochs=5), val_set=None):
    if strategy not in STRATEGIES:
        raise DomainError(f"unknown fine-tuning strategy {strategy!r}")
    model = model.copy()
    keys = model.head_keys() if strategy == "head_only" else list(model.params)
    return _run(model, data, val_set, config, keys)


# ---------------------------------------------------------------------------
# evaluation


def predict_proba(model, examples, batch_size=256):
    out = []
    for i in range(0, len(examples), batch_size):
        x, m, _ = make_batch(examples[i:i + batch_size])
        out.append(forward(model, (x, m))[1])
    return np.concatenate(out) if out else np.zeros(0)


def accuracy_on_batch(model, batch):
    x, m, y = batch
    prob = forward(model, (x, m))[1]
    return float(np.mean((prob > 0.5).astype(int) == y))


def evaluate_scores(prob, labels):
    """Accuracy metrics from scores; prob == 0.5 predicts class 0."""
    prob = np.asarray(prob, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if prob.shape[0] == 0:
        raise DomainError("empty evaluation set")
    pred = (prob > 0.5).astype(int)
    conf = {f"true{t}_pred{p}": int(np.sum((labels == t) & (pred == p))) for t in (0, 1) for p in (0, 1)}
    per = {}
    for c in (0, 1):
        n = int(np.sum(labels == c))
        per[c] = float(np.mean(pred[labels == c] == c)) if n else None
    return {"accuracy": float(np.mean(pred == labels)), "per_class_accuracy": per,
            "confusion": conf, "n": int(labels.shape[0])}


def evaluate(model, test_set):
    return evaluate_scores(predict_proba(model, test_set), [e.label for e in test_set])


def roc_from_scores(scores, labels):
    """ROC points (fpr, tpr) over unique thresholds and trapezoid AUC."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise DomainError("ROC needs both classes")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    distinct = np.r_[np.nonzero(np.diff(s))[0], s.shape[0] - 1]
    tps = np.cumsum(y == 1)[distinct]
    fps = np.cumsum(y == 0)[distinct]
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return list(zip(fpr.tolist(), tpr.tolist())), auc


def roc_auc(model, test_set):
    return roc_from_scores(predict_proba(model, test_set), [e.label for e in test_set])


def write_roc_csv(path, points):
    with open(path, "w", newline="\n") as fh:
        fh.write("fpr,tpr\n")
        for f, t in points:
            fh.write(f"{f:.9g},{t:.9g}\n")


# ---------------------------------------------------------------------------
# checkpoints


def _f32_list(a):
    return [float(v) for v in np.asarray(a, dtype=np.float32).reshape(-1)]


def save_checkpoint(model, path, extra=None):
    tensors = {k: {"shape": list(v.shape), "values": _f32_list(v)} for k, v in sorted(model.params.items())}
    doc = {"version": CHECKPOINT_VERSION, "config": model.config.to_dict(), "seed": model.seed,
           "tensors": tensors,
           "normalizer": {"mean": _f32_list(model.input_mean), "std": _f32_list(model.input_std)},
           "extra": extra}
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_checkpoint(path):
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read checkpoint: {exc}") from exc
    if doc.get("version") != CHECKPOINT_VERSION:
        raise FormatError("unsupported checkpoint version")
    cfg = ModelConfig(**doc["config"])
    params = {k: np.asarray(t["values"], dtype=np.float32).astype(float).reshape(t["shape"])
              for k, t in doc["tensors"].items()}
    norm = doc["normalizer"]
    return Model(cfg, params, doc["seed"], np.asarray(norm["mean"], dtype=float),
                 np.asarray(norm["std"], dtype=float))


def rounded_to_f32(model):
    """Copy with parameters rounded through float32, as a checkpoint stores them."""
    m = model.copy()
    for k in m.params:
        m.params[k] = m.params[k].astype(np.float32).astype(float)
    m.input_mean = m.input_mean.astype(np.float32).astype(float)
    m.input_std = m.input_std.astype(np.float32).astype(float)
    return m

