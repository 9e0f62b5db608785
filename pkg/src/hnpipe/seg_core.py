"""Per-pixel segmentation models for the three CT/PET fusion topologies.

* arch 1: CT only, one linear-softmax head over the CT pixel features.
* arch 2: stacked CT, PET and their mean, one linear-softmax head.
* arch 3: a CT stream and a PET stream (each linear-softmax over its own
  four features) whose six class probabilities feed a linear-softmax fusion
  head; all three are trained jointly.

Training minimises soft Dice over classes 1 and 2 with Adam and keeps the
epoch with the best validation mean IoU.
"""
import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .preprocess import augment

N_CLASSES = 3
FEATURES_PER_CHANNEL = 4
CHANNELS = {1: 1, 2: 3, 3: 2}
SCHEMA_VERSION = 1


def extract_pixel_features(channels, out=None):
    """Stack [raw, 3x3 mean, 3x3 std, Sobel magnitude] per channel, all / 255."""
    return kernels.pixel_features(np.stack([np.asarray(c, dtype=np.float64) for c in channels]), 255.0, out)


@dataclass
class SegModelParams:
    arch: int
    arrays: dict

    @classmethod
    def zeros(cls, arch):
        if arch in (1, 2):
            nf = FEATURES_PER_CHANNEL * CHANNELS[arch]
            return cls(arch, {"W": np.zeros((N_CLASSES, nf)), "b": np.zeros(N_CLASSES)})
        if arch == 3:
            k = FEATURES_PER_CHANNEL
            return cls(arch, {
                "W_ct": np.zeros((N_CLASSES, k)), "b_ct": np.zeros(N_CLASSES),
                "W_pet": np.zeros((N_CLASSES, k)), "b_pet": np.zeros(N_CLASSES),
                "W_fuse": np.zeros((N_CLASSES, 2 * N_CLASSES)), "b_fuse": np.zeros(N_CLASSES),
            })
        raise ValueError(f"arch must be 1, 2 or 3, got {arch}")

    @classmethod
    def initial(cls, arch):
        """Training start point: all zeros, except that the arch 3 fusion
        head starts as [I | I] so each stream votes for its own class.

        An all-zero fusion head is a saddle: it passes no gradient to either
        stream and keeps its six columns identical forever.
        """
        p = cls.zeros(arch)
        if arch == 3:
            p.arrays["W_fuse"] = np.hstack([np.eye(N_CLASSES), np.eye(N_CLASSES)])
        return p

    @property
    def n_features(self):
        return FEATURES_PER_CHANNEL * CHANNELS[self.arch]

    def copy(self):
        return SegModelParams(self.arch, {k: v.copy() for k, v in self.arrays.items()})


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _flatten(p, f):
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-1] != p.n_features:
        raise ValueError(f"arch {p.arch} expects {p.n_features} features per pixel, got {f.shape[-1]}")
    return f.reshape(-1, f.shape[-1]), f.shape[:-1]


def _forward_flat(p, x):
    a = p.arrays
    if p.arch in (1, 2):
        return kernels.head_probs(x, a["W"], a["b"])
    return kernels.fusion_probs(x, a["W_ct"], a["b_ct"], a["W_pet"], a["b_pet"], a["W_fuse"], a["b_fuse"])


def forward(p, f):
    """Per-pixel class probabilities, shape ``f.shape[:-1] + (3,)``."""
    x, lead = _flatten(p, f)
    probs = _forward_flat(p, x)
    return probs.reshape(lead + (N_CLASSES,))


def dice_loss(probs, gt, eps=1.0):
    """1 - mean soft Dice over classes 1 and 2 (background channel skipped)."""
    probs = np.asarray(probs, dtype=np.float64).reshape(-1, N_CLASSES)
    gt = np.asarray(gt).reshape(-1)
    loss = 1.0
    for c in (1, 2):
        gc = gt == c
        inter = probs[gc, c].sum()
        loss -= 0.5 * (2.0 * inter + eps) / (probs[:, c].sum() + gc.sum() + eps)
    return float(loss)


def loss_and_grad(p, f, gt, eps=1.0):
    """Dice loss and its analytic gradient w.r.t. every parameter array."""
    x, _ = _flatten(p, f)
    gt = np.asarray(gt).reshape(-1)
    a = p.arrays
    if p.arch in (1, 2):
        loss, dw, db = kernels.dice_head_grad(x, gt, a["W"], a["b"], eps)
        return loss, {"W": dw, "b": db}
    loss, *g = kernels.dice_fusion_grad(x, gt, a["W_ct"], a["b_ct"], a["W_pet"], a["b_pet"], a["W_fuse"], a["b_fuse"], eps)
    return loss, dict(zip(("W_ct", "b_ct", "W_pet", "b_pet", "W_fuse", "b_fuse"), g))


def backward(p, f, gt, eps=1.0):
    return loss_and_grad(p, f, gt, eps)[1]


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params):
        arrays = params.arrays if isinstance(params, SegModelParams) else params
        return cls({k: np.zeros_like(a) for k, a in arrays.items()}, {k: np.zeros_like(a) for k, a in arrays.items()})


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    arrays = params.arrays if isinstance(params, SegModelParams) else params
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new, m_new, v_new = {}, {}, {}
    for k, theta in arrays.items():
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new[k] = theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        m_new[k], v_new[k] = m, v
    out = SegModelParams(params.arch, new) if isinstance(params, SegModelParams) else new
    return out, AdamState(m_new, v_new, t, b1, b2, state.eps)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 100
    # a linear per-pixel model needs a far larger step than a deep net
    lr: float = 1e-2
    lr_final: float = 1e-3
    lr_drop_epoch: int = 50  # epochs 1..lr_drop_epoch use lr
    batch_size: int = 8
    seed: int = 0
    dice_eps: float = 1.0
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr <= 0 or self.lr_final <= 0:
            raise ValueError("learning rates must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def lr_at(self, epoch):
        return self.lr if epoch <= self.lr_drop_epoch else self.lr_final


@dataclass
class Checkpoint:
    params: SegModelParams
    epoch: int
    val_iou: float
    history: list = field(default_factory=list)  # (epoch, train_loss, val_iou)

    def to_json(self):
        doc = {
            "schema_version": SCHEMA_VERSION,
            "arch": self.params.arch,
            "epoch": self.epoch,
            "val_iou": self.val_iou,
            "params": {k: {"shape": list(a.shape), "data": a.ravel().tolist()} for k, a in sorted(self.params.arrays.items())},
        }
        return json.dumps(doc, indent=1, sort_keys=True).encode("utf-8")

    @classmethod
    def from_json(cls, data):
        doc = json.loads(data)
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported checkpoint schema {doc.get('schema_version')}")
        arrays = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["params"].items()}
        return cls(SegModelParams(int(doc["arch"]), arrays), int(doc["epoch"]), float(doc["val_iou"]))


def metric_log_csv(history):
    lines = ["epoch,train_loss,val_iou"]
    lines += [f"{e},{loss!r},{iou!r}" for e, loss, iou in history]
    return ("\n".join(lines) + "\n").encode("utf-8")


def _check_channels(arch, sample):
    if len(sample.channels) != CHANNELS[arch]:
        raise ValueError(f"arch {arch} expects {CHANNELS[arch]} channels, got {len(sample.channels)}")


def pooled_iou(preds, gts, classes=(1, 2)):
    """Per-class IoU pooled over all pixels of all slices; both-empty -> 1."""
    out = []
    for c in classes:
        inter = union = 0
        for p, g in zip(preds, gts):
            pc, gc = p == c, g == c
            inter += int((pc & gc).sum())
            union += int((pc | gc).sum())
        out.append(1.0 if union == 0 else inter / union)
    return out


def _val_iou(params, val_feats, val_labels):
    preds = [predict_labels(forward(params, f)) for f in val_feats]
    return float(np.mean(pooled_iou(preds, val_labels)))


def train(arch, train_samples, val_samples, cfg=TrainConfig(), progress=None):
    """Train one topology from :meth:`SegModelParams.initial`; return the best-validation checkpoint."""
    if not train_samples:
        raise ValueError("empty training set")
    shape = np.shape(train_samples[0].label)
    for s in list(train_samples) + list(val_samples):
        _check_channels(arch, s)
        if np.shape(s.label) != shape:
            raise ValueError(f"slice shapes differ: {np.shape(s.label)} vs {shape}")
    params = SegModelParams.initial(arch)
    state = AdamState.fresh(params)
    val_feats = [extract_pixel_features(s.channels) for s in val_samples]
    val_labels = [s.label for s in val_samples]
    plain_feats = None if cfg.augment else [extract_pixel_features(s.channels) for s in train_samples]

    if cfg.epochs == 0:
        iou = _val_iou(params, val_feats, val_labels)
        return Checkpoint(params.copy(), 0, iou, [])

    best, history = None, []
    n = len(train_samples)
    h, w = shape
    # batch buffers are filled in place; every sample in a run shares one slice shape
    feat_buf = np.empty((cfg.batch_size, h, w, FEATURES_PER_CHANNEL * CHANNELS[arch]))
    label_buf = np.empty((cfg.batch_size, h, w), dtype=np.uint8)
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            for k, i in enumerate(idx):
                if cfg.augment:
                    s = augment(train_samples[i], np.random.SeedSequence([cfg.seed, epoch, int(i)]))
                    extract_pixel_features(s.channels, feat_buf[k])
                    label_buf[k] = s.label
                else:
                    feat_buf[k] = plain_feats[i]
                    label_buf[k] = train_samples[i].label
            m = len(idx)
            loss, grads = loss_and_grad(params, feat_buf[:m], label_buf[:m], cfg.dice_eps)
            params, state = adam_step(params, grads, state, lr)
            losses.append(loss)
        iou = _val_iou(params, val_feats, val_labels)
        history.append((epoch, float(np.mean(losses)), iou))
        if best is None or iou > best.val_iou:
            best = Checkpoint(params.copy(), epoch, iou)
        if progress is not None:
            progress(epoch, history[-1][1], iou)
    best.history = history
    return best


def predict_labels(probs):
    """Argmax over classes; ``np.argmax`` already breaks ties toward class 0."""
    return np.argmax(probs, axis=-1).astype(np.uint8)


def predict_slice(ckpt, channels):
    params = ckpt.params if isinstance(ckpt, Checkpoint) else ckpt
    if len(channels) != CHANNELS[params.arch]:
        raise ValueError(f"arch {params.arch} expects {CHANNELS[params.arch]} channels")
    probs = forward(params, extract_pixel_features(channels))
    return probs, predict_labels(probs)
