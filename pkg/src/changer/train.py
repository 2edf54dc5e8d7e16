"""Optimization and evaluation: cross-entropy loss, AdamW with decoupled
decay, poly schedule, augmentations (including the temporal-order swap), a
synthetic bi-temporal dataset, and change-class precision/recall/F1."""

import os
from dataclasses import dataclass

import numpy as np

from .model import ChangerModel, save_checkpoint
from .tensor import Tensor, _accum, _make


@dataclass
class Sample:
    """Bi-temporal pair (3,h,w in [0,1]) plus binary change mask (h,w)."""
    x0: np.ndarray
    x1: np.ndarray
    y: np.ndarray
    id: str = ""


@dataclass
class TrainConfig:
    lr0: float = 0.001
    weight_decay: float = 0.05
    max_iters: int = 2000
    batch_size: int = 4
    poly_power: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_interval: int = 500
    aug_flip: bool = True
    aug_photometric: bool = True
    aug_swap: bool = True
    aug_crop: bool = False
    crop_size: int = 64


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, tp, fp, fn, tn):
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = (2 * precision * recall / (precision + recall)
              if precision + recall > 0 else 0.0)
        return cls(tp=tp, fp=fp, fn=fn, tn=tn, precision=precision,
                   recall=recall, f1=f1)


class NumericError(RuntimeError):
    """Non-finite loss or gradients; aborts the training step."""


# ---------------------------------------------------------------------------
# loss


def ce_loss(logits, y):
    """Mean pixel cross-entropy of 2-channel logits against {0,1} labels.

    Stabilized with max-subtracted log-sum-exp; differentiable w.r.t. logits.
    """
    y = np.asarray(y)
    n, c, h, w = logits.data.shape
    if c != 2:
        raise ValueError("ce_loss expects 2 logit channels, got %d" % c)
    if y.shape != (n, h, w):
        raise ValueError("ce_loss: labels %s vs logits %s"
                         % (y.shape, logits.data.shape))
    if not np.isin(y, (0, 1)).all():
        raise ValueError("ce_loss: labels must be in {0,1}")
    y = y.astype(np.intp)
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, y[:, None], axis=1)[:, 0]
    npx = n * h * w
    loss = -picked.sum() / npx

    def back(g):
        softmax = np.exp(logp)
        onehot = np.zeros_like(z)
        np.put_along_axis(onehot, y[:, None], 1.0, axis=1)
        _accum(logits, float(g) * (softmax - onehot) / npx)

    return _make(np.float64(loss), (logits,), back)


# ---------------------------------------------------------------------------
# optimizer / schedule


def adamw_init():
    return {"step": 0, "moments": {}}


def adamw_step(params, state, lr, wd, betas=(0.9, 0.999), eps=1e-8):
    """Bias-corrected Adam update plus decoupled decay theta -= lr*wd*theta.

    Leaves flagged decay=False (norm affines, biases) skip the decay term.
    Raises NumericError on non-finite gradients, leaving params untouched.
    """
    bad = [leaf.name for leaf in params.leaves()
           if leaf.trainable and leaf.tensor.grad is not None
           and not np.isfinite(leaf.tensor.grad).all()]
    if bad:
        raise NumericError("non-finite gradients in: %s" % ", ".join(bad))
    state["step"] += 1
    t = state["step"]
    b1, b2 = betas
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for leaf in params.leaves():
        if not leaf.trainable:
            continue
        tens = leaf.tensor
        g = tens.grad if tens.grad is not None else np.zeros_like(tens.data)
        mom = state["moments"].get(leaf.name)
        if mom is None:
            mom = {"m": np.zeros_like(tens.data), "v": np.zeros_like(tens.data)}
            state["moments"][leaf.name] = mom
        mom["m"] = b1 * mom["m"] + (1.0 - b1) * g
        mom["v"] = b2 * mom["v"] + (1.0 - b2) * g * g
        mhat = mom["m"] / bc1
        vhat = mom["v"] / bc2
        tens.data = tens.data - lr * mhat / (np.sqrt(vhat) + eps)
        if wd and leaf.decay:
            tens.data = tens.data - lr * wd * tens.data


def poly_lr(it, cfg):
    if not 0 <= it <= cfg.max_iters:
        raise ValueError("iteration %d outside [0, %d]" % (it, cfg.max_iters))
    return cfg.lr0 * (1.0 - it / cfg.max_iters) ** cfg.poly_power


# ---------------------------------------------------------------------------
# augmentation


def _photometric(img, rng):
    gain = rng.uniform(0.8, 1.25)
    bias = rng.uniform(-0.1, 0.1)
    tint = rng.uniform(0.95, 1.05, size=3)
    return np.clip(img * gain * tint[:, None, None] + bias, 0.0, 1.0)


def augment(s, rng, cfg):
    """Shared geometric transform for (x0, x1, y); independent photometric
    distortion per temporal image; temporal-order swap with p=0.5 (the binary
    change label is symmetric in time, so y is unchanged)."""
    x0, x1, y = s.x0, s.x1, s.y
    if cfg.aug_crop:
        ch = cw = cfg.crop_size
        h, w = y.shape
        if ch > h or cw > w:
            raise ValueError("crop %d exceeds image size %dx%d" % (ch, h, w))
        i = int(rng.integers(0, h - ch + 1))
        j = int(rng.integers(0, w - cw + 1))
        x0 = x0[:, i:i + ch, j:j + cw]
        x1 = x1[:, i:i + ch, j:j + cw]
        y = y[i:i + ch, j:j + cw]
    if cfg.aug_flip:
        if rng.random() < 0.5:
            x0, x1, y = x0[:, :, ::-1], x1[:, :, ::-1], y[:, ::-1]
        if rng.random() < 0.5:
            x0, x1, y = x0[:, ::-1], x1[:, ::-1], y[::-1]
    if cfg.aug_photometric:
        x0 = _photometric(x0, rng)
        x1 = _photometric(x1, rng)
    if cfg.aug_swap and rng.random() < 0.5:
        x0, x1 = x1, x0
    return Sample(x0=np.ascontiguousarray(x0), x1=np.ascontiguousarray(x1),
                  y=np.ascontiguousarray(y), id=s.id)


# ---------------------------------------------------------------------------
# synthetic data


def _smooth_noise(rng, size, cells=8):
    """Low-frequency background: coarse noise grid, bilinearly upsampled."""
    from .tensor import _upsample_matrix
    coarse = rng.uniform(0.15, 0.55, size=(3, cells, cells))
    a = _upsample_matrix(cells, size // cells)
    return np.einsum("pi,cij,qj->cpq", a, coarse, a)


def _draw_rects(img, mask, rects):
    for (i0, i1, j0, j1, color) in rects:
        img[:, i0:i1, j0:j1] = color[:, None, None]
        mask[i0:i1, j0:j1] = True


def _random_rect(rng, size):
    rh = int(rng.integers(size // 8, size // 4 + 1))
    rw = int(rng.integers(size // 8, size // 4 + 1))
    i0 = int(rng.integers(0, size - rh + 1))
    j0 = int(rng.integers(0, size - rw + 1))
    color = rng.uniform(0.55, 0.95, size=3)
    return (i0, i0 + rh, j0, j0 + rw, color)


def synth_generate(seed, n, size, difficulty=1.0):
    """Deterministic synthetic bi-temporal scenes.

    Low-frequency background plus axis-aligned "building" rectangles; the
    second image drops a random subset, adds new ones, and gets a global
    photometric shift emulating inter-temporal domain differences.  The label
    is the symmetric difference of the two footprint masks.  Per-sample RNG
    streams derive from (seed, index), so generation is schedule-independent.
    """
    if size % 32:
        raise ValueError("size %d not divisible by 32" % size)
    samples = []
    for idx in range(n):
        rng = np.random.default_rng([seed, idx])
        bg = _smooth_noise(rng, size)
        bg = np.clip(bg + rng.normal(0.0, 0.02, size=bg.shape), 0.0, 1.0)
        k = int(rng.integers(4, 8))
        rects = [_random_rect(rng, size) for _ in range(k)]

        keep = rng.random(k) >= 0.35 * difficulty
        n_new = int(rng.binomial(3, 0.5 * difficulty)) if difficulty > 0 else 0
        new_rects = [_random_rect(rng, size) for _ in range(n_new)]

        x0 = bg.copy()
        mask0 = np.zeros((size, size), dtype=bool)
        _draw_rects(x0, mask0, rects)

        x1 = bg.copy()
        mask1 = np.zeros((size, size), dtype=bool)
        _draw_rects(x1, mask1, [r for r, kp in zip(rects, keep) if kp] + new_rects)

        if difficulty > 0:
            gain = 1.0 + difficulty * rng.uniform(-0.2, 0.25)
            bias = difficulty * rng.uniform(-0.1, 0.1)
            tint = 1.0 + difficulty * rng.uniform(-0.05, 0.05, size=3)
            x1 = np.clip(x1 * gain * tint[:, None, None] + bias, 0.0, 1.0)

        y = (mask0 ^ mask1).astype(np.uint8)
        samples.append(Sample(x0=x0, x1=x1, y=y, id="synth-%d-%d" % (seed, idx)))
    return samples


def load_dataset_dir(root):
    """Ingest a directory with A/, B/, label/ sub-folders of same-named 8-bit
    PNGs; labels binarized at >127."""
    from PIL import Image

    a_dir = os.path.join(root, "A")
    b_dir = os.path.join(root, "B")
    l_dir = os.path.join(root, "label")
    for d in (a_dir, b_dir, l_dir):
        if not os.path.isdir(d):
            raise FileNotFoundError("dataset dir missing sub-folder: %s" % d)
    names = sorted(os.listdir(a_dir))
    if not names:
        raise FileNotFoundError("dataset dir %s has no images" % a_dir)
    samples = []
    for name in names:
        xa = np.asarray(Image.open(os.path.join(a_dir, name)).convert("RGB"))
        xb = np.asarray(Image.open(os.path.join(b_dir, name)).convert("RGB"))
        lab = np.asarray(Image.open(os.path.join(l_dir, name)).convert("L"))
        samples.append(Sample(
            x0=xa.transpose(2, 0, 1).astype(np.float64) / 255.0,
            x1=xb.transpose(2, 0, 1).astype(np.float64) / 255.0,
            y=(lab > 127).astype(np.uint8),
            id=name))
    return samples


# ---------------------------------------------------------------------------
# evaluation


def _batched(samples, size):
    for i in range(0, len(samples), size):
        yield samples[i:i + size]


def evaluate(model, samples, batch_size=8):
    """Micro-averaged precision/recall/F1, change class positive, argmax over
    the two logit channels."""
    if not samples:
        raise ValueError("evaluate: empty dataset")
    tp = fp = fn = tn = 0
    for chunk in _batched(samples, batch_size):
        x0 = np.stack([s.x0 for s in chunk])
        x1 = np.stack([s.x1 for s in chunk])
        y = np.stack([s.y for s in chunk]).astype(bool)
        logits = model.forward(Tensor(x0), Tensor(x1))
        pred = logits.data.argmax(axis=1).astype(bool)
        tp += int(np.count_nonzero(pred & y))
        fp += int(np.count_nonzero(pred & ~y))
        fn += int(np.count_nonzero(~pred & y))
        tn += int(np.count_nonzero(~pred & ~y))
    return EvalReport.from_counts(tp, fp, fn, tn)


# ---------------------------------------------------------------------------
# training loop


CSV_HEADER = "iter,lr,loss,precision,recall,f1"


def _fmt(x):
    return repr(float(x))


def train_loop(mcfg, tcfg, train_set, eval_set=None, log_path=None,
               checkpoint_path=None):
    """Sample batch -> augment -> forward -> CE -> backward -> AdamW at the
    poly rate.  Returns (model, csv_rows, final_report)."""
    model = ChangerModel(mcfg)
    state = adamw_init()
    batch_rng = np.random.default_rng([tcfg.seed, 17])
    rows = [CSV_HEADER]
    final_report = None
    for it in range(tcfg.max_iters):
        idx = batch_rng.integers(0, len(train_set), size=tcfg.batch_size)
        batch = []
        for slot, i in enumerate(idx):
            aug_rng = np.random.default_rng([tcfg.seed, 23, it, slot])
            batch.append(augment(train_set[int(i)], aug_rng, tcfg))
        x0 = np.stack([s.x0 for s in batch])
        x1 = np.stack([s.x1 for s in batch])
        y = np.stack([s.y for s in batch])

        model.params.zero_grad()
        logits = model.forward(Tensor(x0), Tensor(x1))
        loss = ce_loss(logits, y)
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise NumericError("non-finite loss at iteration %d, batch ids: %s"
                               % (it + 1, [s.id for s in batch]))
        loss.backward()
        lr = poly_lr(it, tcfg)
        adamw_step(model.params, state, lr, tcfg.weight_decay,
                   betas=(tcfg.beta1, tcfg.beta2), eps=tcfg.adam_eps)

        do_eval = (eval_set is not None
                   and ((it + 1) % tcfg.eval_interval == 0
                        or it + 1 == tcfg.max_iters))
        if do_eval:
            rep = evaluate(model, eval_set)
            final_report = rep
            rows.append("%d,%s,%s,%s,%s,%s" % (
                it + 1, _fmt(lr), _fmt(loss_val), _fmt(rep.precision),
                _fmt(rep.recall), _fmt(rep.f1)))
        else:
            rows.append("%d,%s,%s,,," % (it + 1, _fmt(lr), _fmt(loss_val)))

    if log_path is not None:
        with open(log_path, "w") as fh:
            fh.write("\n".join(rows) + "\n")
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model)
    return model, rows, final_report
