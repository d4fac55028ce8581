"""The segmentation environment: a three-level U-Net with skip connections."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .layers import ParamSet
from .metrics import evaluate_masks
from .synthdata import DatasetSplit, MaskGrid, SampleGrid, hist_equalize

log = logging.getLogger(__name__)

PROB_EPS = 1e-6


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, last_finite_loss: float | None):
        super().__init__(f"non-finite loss at epoch {epoch}; last finite loss {last_finite_loss}")
        self.epoch = epoch
        self.last_finite_loss = last_finite_loss


@dataclass
class SegHyper:
    lr: float = 5e-3
    batch_size: int = 4
    epochs: int = 30
    patience: int = 10
    restore_best: bool = False
    seed: int = 0
    equalize: bool = True
    finetune_lr_scale: float = 0.1
    finetune_steps: int = 4
    finetune_batch: int = 16
    # an up-weighted foreground on self-generated targets inflates masks round after round
    finetune_pos_weight: float = 1.0
    # weight on the true-label half of a fine-tune batch; None keeps the supervised pos_weight
    finetune_labeled_pos_weight: float | None = None
    threshold: float = 0.5
    pos_weight: float = 5.0
    min_epoch_samples: int = 48
    augment: bool = True
    final_lr_scale: float = 0.1   # cosine decay from lr to lr * final_lr_scale over the epoch budget


class SegModel(ParamSet):
    arch_id = "seg-v1"

    def __init__(self, widths=(8, 16, 32), seed: int = 0, hyper: SegHyper | None = None):
        super().__init__()
        self.widths = tuple(widths)
        self.hyper = hyper or SegHyper(seed=seed)
        # optimizer moments carried from one fine-tuning round to the next
        self.finetune_opt: nc.OptimizerState | None = None
        rng = np.random.default_rng([seed, 101])
        a, b, c = self.widths
        self.add_conv("enc1a", 1, a, 3, rng)
        self.add_conv("enc1b", a, a, 3, rng)
        self.add_conv("enc2a", a, b, 3, rng)
        self.add_conv("enc2b", b, b, 3, rng)
        self.add_conv("mid_a", b, c, 3, rng)
        self.add_conv("mid_b", c, c, 3, rng)
        self.add_conv("dec2a", c + b, b, 3, rng)
        self.add_conv("dec2b", b, b, 3, rng)
        self.add_conv("dec1a", b + a, a, 3, rng)
        self.add_conv("dec1b", a, a, 3, rng)
        # small head keeps the untrained output near 0.5
        self.add_conv("head", a, 1, 1, rng, std=1e-3)

    def forward(self, x: nc.Tensor) -> nc.Tensor:
        """Logits (N,1,H,W) for inputs (N,1,H,W); H and W divisible by 4."""
        if x.data.ndim != 4 or x.shape[1] != 1 or x.shape[2] % 4 or x.shape[3] % 4:
            raise nc.ShapeError(f"SegModel expects (N,1,H,W) with H,W divisible by 4, got {x.shape}")
        c = lambda name, t: nc.relu(self.conv(name, t))  # noqa: E731
        e1 = c("enc1b", c("enc1a", x))
        e2 = c("enc2b", c("enc2a", nc.max_pool2d(e1)))
        m = c("mid_b", c("mid_a", nc.max_pool2d(e2)))
        d2 = c("dec2b", c("dec2a", nc.concat([nc.upsample2x(m), e2])))
        d1 = c("dec1b", c("dec1a", nc.concat([nc.upsample2x(d2), e1])))
        return self.conv("head", d1)

    def copy(self) -> "SegModel":
        return copy.deepcopy(self)


def prepare(images: list, equalize: bool = True) -> np.ndarray:
    grids = [hist_equalize(im) if equalize else im for im in images]
    # centred inputs train markedly faster than raw [0, 1] intensities
    return (2.0 * np.stack([g.pixels for g in grids])[:, None] - 1.0).astype(np.float32)


def predict_batch(model: SegModel, images: list, chunk: int = 32) -> np.ndarray:
    """Probability maps (N,H,W), values clipped into the open interval (0, 1)."""
    outs = []
    for i in range(0, len(images), chunk):
        x = nc.Tensor(prepare(images[i:i + chunk], model.hyper.equalize))
        z = model.forward(x).data[:, 0]
        outs.append(nc.stable_sigmoid(z))
    return np.clip(np.concatenate(outs), PROB_EPS, 1 - PROB_EPS).astype(np.float32)


def predict(model: SegModel, image: SampleGrid) -> np.ndarray:
    """The MDP state for one image: its probability map."""
    return predict_batch(model, [image])[0]


def predict_masks(model: SegModel, images: list) -> list:
    probs = predict_batch(model, images)
    return [(p >= model.hyper.threshold).astype(np.uint8) for p in probs]


def evaluate(model: SegModel, pairs: list, iou_thresh: float = 0.25):
    preds = predict_masks(model, [s for s, _ in pairs])
    return evaluate_masks(preds, [m.pixels for _, m in pairs], iou_thresh)


def validation_f1(model: SegModel, pairs: list) -> float:
    return evaluate(model, pairs).f1


def random_dihedral(rng: np.random.Generator, *arrays: np.ndarray) -> tuple:
    """Apply one random rotation/flip per sample, the same one to every array.

    Arrays are (N, C, H, W) with square H == W.
    """
    n = len(arrays[0])
    ks = rng.integers(4, size=n)
    flips = rng.random(n) < 0.5
    out = []
    for a in arrays:
        b = np.empty_like(a)
        for i in range(n):
            v = np.rot90(a[i], k=int(ks[i]), axes=(1, 2))
            b[i] = v[:, :, ::-1] if flips[i] else v
        out.append(b)
    return tuple(out)


def _train_step(model: SegModel, opt: nc.OptimizerState, x: np.ndarray, y: np.ndarray,
                pos_weight=None) -> float:
    """One optimizer step; ``pos_weight`` is a scalar or a per-sample (N, 1, 1, 1) array."""
    params = model.parameters()
    pw = model.hyper.pos_weight if pos_weight is None else pos_weight
    weight = None if np.all(np.asarray(pw) == 1.0) else 1.0 + (np.asarray(pw, np.float32) - 1.0) * y
    with nc.Tape() as tape:
        loss = nc.bce_with_logits(model.forward(nc.Tensor(x)), nc.Tensor(y), weight=weight)
    value = loss.item()
    if not np.isfinite(value):
        raise FloatingPointError("non-finite loss")
    tape.backward(loss)
    nc.optimizer_step(opt, params)
    return value


@dataclass
class TrainResult:
    model: SegModel
    curve: list = field(default_factory=list)   # (epoch, mean loss, val f1)
    best_epoch: int = 0
    best_f1: float = 0.0


def train_on_pairs(train: list, val: list, hyper: SegHyper, widths=(8, 16, 32),
                   model: SegModel | None = None) -> TrainResult:
    if not train:
        raise ValueError("supervised training needs at least one labeled pair")
    model = model or SegModel(widths, seed=hyper.seed, hyper=hyper)
    rng = np.random.default_rng([hyper.seed, 202])
    opt = nc.adam(hyper.lr)
    xs = prepare([s for s, _ in train], hyper.equalize)
    ys = np.stack([m.pixels for _, m in train])[:, None].astype(np.float32)
    curve = []
    best_state, best_f1, best_epoch, stale = model.state_dict(), -1.0, 0, 0
    last_finite = None
    for epoch in range(1, hyper.epochs + 1):
        frac = (epoch - 1) / max(1, hyper.epochs - 1)
        opt.lr = hyper.lr * (hyper.final_lr_scale + (1 - hyper.final_lr_scale) * 0.5 * (1 + np.cos(np.pi * frac)))
        # small training sets are cycled so every epoch sees the same number of samples
        reps = -(-max(hyper.min_epoch_samples, len(train)) // len(train))
        order = np.concatenate([rng.permutation(len(train)) for _ in range(reps)])
        order = order[:max(hyper.min_epoch_samples, len(train))]
        losses = []
        for i in range(0, len(order), hyper.batch_size):
            idx = order[i:i + hyper.batch_size]
            x, y = xs[idx], ys[idx]
            if hyper.augment:
                x, y = random_dihedral(rng, x, y)
            try:
                losses.append(_train_step(model, opt, x, y))
            except FloatingPointError:
                raise TrainingDivergedError(epoch, last_finite) from None
            last_finite = losses[-1]
        f1 = validation_f1(model, val) if val else float(-np.mean(losses))
        curve.append((epoch, float(np.mean(losses)), f1))
        if f1 > best_f1:
            best_state, best_f1, best_epoch, stale = model.state_dict(), f1, epoch, 0
        elif best_f1 > 0:
            # patience only runs once the model has left the all-background plateau
            stale += 1
            if stale >= hyper.patience:
                break
    if hyper.restore_best:
        model.load_state_dict(best_state)
    log.debug("supervised training stopped at epoch %d (best %d, f1 %.3f)", epoch, best_epoch, best_f1)
    return TrainResult(model, curve, best_epoch, best_f1)


def train_supervised(split: DatasetSplit, fold: int, hyper: SegHyper | None = None,
                     widths=(8, 16, 32)) -> TrainResult:
    """Train on every labeled fold except ``fold``; early-stop on the held-out fold."""
    hyper = hyper or SegHyper()
    train, val = split.fold_pairs(fold)
    return train_on_pairs(train, val, hyper, widths)


@dataclass
class FineTuneResult:
    model: SegModel
    r_val: float
    reverted: bool = False
    steps: int = 0


def fine_tune(model: SegModel, pseudo: list, val: list, hyper: SegHyper | None = None,
              labeled: list | None = None, steps: int | None = None, seed: int = 0) -> FineTuneResult:
    """Fine-tune a copy of ``model`` on pseudolabel pairs mixed 1:1 with true labels.

    Returns the updated model and R_val, the pooled pixel F1 on ``val``. On a
    non-finite loss the original model is returned with ``reverted=True``.
    """
    if not pseudo:
        raise ValueError("fine_tune needs a non-empty pseudolabel batch")
    if not val:
        raise ValueError("fine_tune needs a non-empty validation set")
    val_ids = {s.id for s, _ in val}
    if any(s.id in val_ids for s, _ in pseudo):
        raise ValueError("pseudolabel sources overlap the validation set")
    hyper = hyper or model.hyper
    steps = hyper.finetune_steps if steps is None else steps
    if steps == 0:
        return FineTuneResult(model, validation_f1(model, val), steps=0)

    tuned = model.copy()
    rng = np.random.default_rng([seed, 303])
    if tuned.finetune_opt is None:
        tuned.finetune_opt = nc.adam(hyper.lr * hyper.finetune_lr_scale)
    opt = tuned.finetune_opt
    px = prepare([s for s, _ in pseudo], hyper.equalize)
    py = np.stack([_mask_px(m) for _, m in pseudo])[:, None].astype(np.float32)
    if labeled:
        lx = prepare([s for s, _ in labeled], hyper.equalize)
        ly = np.stack([m.pixels for _, m in labeled])[:, None].astype(np.float32)
    half = max(1, hyper.finetune_batch // 2) if labeled else hyper.finetune_batch
    lpw = hyper.pos_weight if hyper.finetune_labeled_pos_weight is None \
        else hyper.finetune_labeled_pos_weight
    for _ in range(steps):
        pi = rng.choice(len(pseudo), size=min(half, len(pseudo)), replace=False)
        x, y = px[pi], py[pi]
        pw = hyper.finetune_pos_weight
        if labeled:
            li = rng.choice(len(labeled), size=len(pi), replace=len(pi) > len(labeled))
            x = np.concatenate([x, lx[li]])
            y = np.concatenate([y, ly[li]])
            if lpw != hyper.finetune_pos_weight:
                pw = np.repeat(np.float32([hyper.finetune_pos_weight, lpw]), len(pi))[:, None, None, None]
        if hyper.augment:
            x, y = random_dihedral(rng, x, y)
        try:
            _train_step(tuned, opt, x, y, pw)
        except FloatingPointError:
            log.warning("fine-tune diverged; reverting to pre-fine-tune parameters")
            return FineTuneResult(model, validation_f1(model, val), reverted=True)
    return FineTuneResult(tuned, validation_f1(tuned, val), steps=steps)


def _mask_px(m) -> np.ndarray:
    return m.pixels if isinstance(m, MaskGrid) else np.asarray(m)
