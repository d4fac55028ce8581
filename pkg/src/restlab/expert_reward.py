"""Expert reward: a max-margin classifier over (state, label) pairs.

Positives are the segmentation model's own output on labeled images paired
with the true masks; negatives are corrupted copies of those masks. Once
trained the model is frozen and only scores.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from . import numcore as nc
from .layers import ParamSet
from .segnet import SegModel, predict_batch

log = logging.getLogger(__name__)

RECIPES = ("translate", "morph", "random", "empty")


class UnusableRewardModel(RuntimeError):
    """The reward classifier could not separate expert pairs from negatives."""


@dataclass
class Demonstration:
    state: np.ndarray
    label: np.ndarray
    polarity: int            # +1 expert, -1 synthetic negative
    source_id: int
    recipe: str = "expert"

    def __post_init__(self):
        if self.state.shape != self.label.shape:
            raise ValueError(f"state {self.state.shape} and label {self.label.shape} differ")


@dataclass
class NegativeRecipe:
    per_positive: int = 2
    enabled: tuple = RECIPES
    shift: tuple = (8, 24)       # translation distance, pixels
    morph: tuple = (2, 4)        # dilation / erosion radius, pixels
    radius: tuple = (3.0, 8.0)   # random-blob radius, pixels
    min_difference: float = 0.05
    min_shift: float = 8.0       # translations shorter than this are not negatives

    def __post_init__(self):
        if not self.enabled:
            raise ValueError("at least one negative recipe must be enabled")
        unknown = set(self.enabled) - set(RECIPES)
        if unknown:
            raise ValueError(f"unknown recipes {sorted(unknown)}")
        if self.min_shift <= 0 or self.shift[0] < self.min_shift or self.shift[1] < self.shift[0]:
            raise ValueError(f"translation range {self.shift} must start at >= {self.min_shift:g} px")
        if self.morph[0] < 1 or self.morph[1] < self.morph[0]:
            raise ValueError(f"bad morphology radius range {self.morph}")
        if self.per_positive < 1:
            raise ValueError("per_positive must be >= 1")

    @classmethod
    def for_size(cls, size: int, **overrides) -> "NegativeRecipe":
        """Pixel distances scaled from their 64-pixel defaults to ``size``."""
        s = size / 64.0
        base = dict(shift=(8 * s, 24 * s), min_shift=8 * s,
                    morph=(max(1, round(2 * s)), max(1, round(4 * s))),
                    radius=(3.0 * s, 8.0 * s))
        base.update(overrides)
        return cls(**base)


def build_demonstrations(model: SegModel, labeled: list) -> list:
    """One expert demonstration per labeled pair: (model output, true mask)."""
    if not labeled:
        raise ValueError("need labeled pairs to build demonstrations")
    states = predict_batch(model, [s for s, _ in labeled])
    return [Demonstration(st, m.pixels.astype(np.uint8), +1, s.id)
            for st, (s, m) in zip(states, labeled)]


def _disk(r: int) -> np.ndarray:
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (yy * yy + xx * xx) <= r * r


def _shift(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(mask)
    h, w = mask.shape
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = mask[ys, xs]
    return out


def _random_blob(shape, rng, radius) -> np.ndarray:
    h, w = shape
    r = rng.uniform(*radius)
    cy, cx = rng.uniform(r, h - 1 - r), rng.uniform(r, w - 1 - r)
    yy, xx = np.mgrid[0:h, 0:w]
    ry, rx = r, r * rng.uniform(0.67, 1.0)
    return ((((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) <= 1).astype(np.uint8)


def _corrupt(label: np.ndarray, recipe: str, rng, cfg: NegativeRecipe) -> np.ndarray:
    if recipe == "translate":
        dist = rng.uniform(*cfg.shift)
        ang = rng.uniform(0, 2 * np.pi)
        return _shift(label, int(round(dist * np.sin(ang))), int(round(dist * np.cos(ang))))
    if recipe == "morph":
        r = int(rng.integers(cfg.morph[0], cfg.morph[1] + 1))
        op = ndimage.binary_dilation if rng.random() < 0.5 else ndimage.binary_erosion
        return op(label > 0, structure=_disk(r)).astype(np.uint8)
    if recipe == "random":
        return _random_blob(label.shape, rng, cfg.radius)
    if recipe == "empty":
        return np.zeros_like(label)
    raise ValueError(recipe)


def _difference(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero((a > 0) | (b > 0))
    return np.count_nonzero((a > 0) != (b > 0)) / union if union else 0.0


def synthesize_negatives(positives: list, seed: int, cfg: Optional[NegativeRecipe] = None) -> list:
    """Corrupted-label negatives, ``cfg.per_positive`` per positive."""
    cfg = cfg or NegativeRecipe()
    if not positives:
        raise ValueError("need at least one positive demonstration")
    out = []
    for k, pos in enumerate(positives):
        rng = np.random.default_rng([seed, 505, k])
        has_fg = bool(pos.label.any())
        usable = [r for r in cfg.enabled if has_fg or r == "random"]
        if not usable:
            # an empty expert label can only be contradicted by inventing a lesion
            usable = ["random"]
        made = 0
        for _attempt in range(50 * cfg.per_positive):
            recipe = usable[int(rng.integers(len(usable)))]
            neg = _corrupt(pos.label, recipe, rng, cfg)
            if _difference(neg, pos.label) < cfg.min_difference:
                continue
            out.append(Demonstration(pos.state, neg, -1, pos.source_id, recipe))
            made += 1
            if made == cfg.per_positive:
                break
        else:
            raise RuntimeError(f"could not corrupt label of source {pos.source_id}")
    return out


@dataclass
class IRLHyper:
    lr: float = 3e-3
    epochs: int = 60
    batch_size: int = 32
    weight_decay: float = 1e-4
    holdout: float = 0.25
    target_accuracy: float = 0.9
    abort_accuracy: float = 0.75
    min_epochs: int = 5
    augment: bool = True
    state_temper: tuple = (0.25, 1.0)   # logit scale range for softened training states
    restarts: int = 3
    seed: int = 0


class ExpertRewardModel(ParamSet):
    arch_id = "irl-v1"

    def __init__(self, seed: int = 0, widths=(16, 24)):
        super().__init__()
        rng = np.random.default_rng([seed, 606])
        a, b = widths
        self.add_conv("c1", 2, a, 3, rng)
        self.add_conv("c2", a, b, 3, rng)
        self.add_conv("c3", b, 1, 3, rng, std=0.05)
        self.threshold = 0.0
        self.frozen = False
        self.heldout_accuracy: float = float("nan")

    def score_tensor(self, x: nc.Tensor) -> nc.Tensor:
        """Raw margin scores (N,) for stacked (N,2,H,W) inputs; H, W divisible by 4."""
        h = nc.max_pool2d(nc.relu(self.conv("c1", x)))
        h = nc.max_pool2d(nc.relu(self.conv("c2", h)))
        return nc.mean(self.conv("c3", h), axis=(1, 2, 3))

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        self.frozen = True


def stack_pairs(states, labels) -> np.ndarray:
    s = np.asarray(states, dtype=np.float32)
    lab = np.asarray(labels, dtype=np.float32)
    if s.shape != lab.shape:
        raise nc.ShapeError(f"state {s.shape} and label {lab.shape} shapes differ")
    return np.stack([2 * s - 1, 2 * lab - 1], axis=1)


def raw_scores(model: ExpertRewardModel, states, labels, chunk: int = 128) -> np.ndarray:
    x = stack_pairs(states, labels)
    out = [model.score_tensor(nc.Tensor(x[i:i + chunk])).data for i in range(0, len(x), chunk)]
    return np.concatenate(out).astype(np.float64) if out else np.zeros(0)


def score(model: ExpertRewardModel, state, label) -> tuple[int, float]:
    """(1 if the label looks expert-like else 0, raw margin)."""
    m = float(raw_scores(model, [state], [label])[0])
    return int(m >= model.threshold), m


def batch_scores(model: ExpertRewardModel, pairs: list) -> np.ndarray:
    if not pairs:
        return np.zeros(0, dtype=np.int64)
    m = raw_scores(model, [p[0] for p in pairs], [p[1] for p in pairs])
    return (m >= model.threshold).astype(np.int64)


def batch_reward(model: ExpertRewardModel, pairs: list) -> float:
    """Mean binary expert score of (state, label) pairs."""
    if not pairs:
        raise ValueError("batch_reward needs at least one pair")
    return float(batch_scores(model, pairs).mean())


def equal_error_threshold(pos_scores: np.ndarray, neg_scores: np.ndarray) -> float:
    """Threshold where false-accept and false-reject rates are closest."""
    cands = np.unique(np.concatenate([pos_scores, neg_scores]))
    mids = np.concatenate([[cands[0] - 1e-6], (cands[:-1] + cands[1:]) / 2, [cands[-1] + 1e-6]])
    best, best_key = 0.0, None
    for t in mids:
        frr = np.mean(pos_scores < t)
        far = np.mean(neg_scores >= t)
        key = (abs(far - frr), far + frr, abs(t))
        if best_key is None or key < best_key:
            best, best_key = float(t), key
    return best


def _augment(x: np.ndarray, rng: np.random.Generator, temper: tuple) -> np.ndarray:
    """Random dihedral transform per sample plus a softened state channel.

    Demonstration states come from images the segmentation model was trained
    on and are sharper than its output on unseen images; scaling their logits
    down keeps the scorer from keying on confidence alone.
    """
    out = np.empty_like(x)
    for i in range(len(x)):
        v = np.rot90(x[i], k=int(rng.integers(4)), axes=(1, 2))
        if rng.random() < 0.5:
            v = v[:, :, ::-1]
        out[i] = v
    p = np.clip((out[:, 0] + 1) / 2, 1e-6, 1 - 1e-6)
    a = rng.uniform(*temper, size=(len(x), 1, 1))
    out[:, 0] = 2 * nc.stable_sigmoid(a * np.log(p / (1 - p))) - 1
    return out


def _accuracy(model, demos, threshold) -> float:
    m = raw_scores(model, [d.state for d in demos], [d.label for d in demos])
    y = np.array([d.polarity for d in demos])
    pred = np.where(m >= threshold, 1, -1)
    return float(np.mean(pred == y))


def split_holdout(pos: list, neg: list, hyper: IRLHyper) -> tuple[list, list, list]:
    """(train positives, train negatives, held-out demonstrations), split by source image."""
    rng = np.random.default_rng([hyper.seed, 707])
    sources = sorted({d.source_id for d in pos} | {d.source_id for d in neg})
    n_hold = max(1, int(round(hyper.holdout * len(sources)))) if len(sources) > 1 else 0
    held_src = set(rng.permutation(sources)[:n_hold].tolist())
    tr_pos = [d for d in pos if d.source_id not in held_src]
    tr_neg = [d for d in neg if d.source_id not in held_src]
    ho = [d for d in pos + neg if d.source_id in held_src]
    if not tr_pos or not tr_neg:
        tr_pos, tr_neg, ho = pos, neg, pos + neg
    if not any(d.polarity > 0 for d in ho) or not any(d.polarity < 0 for d in ho):
        ho = pos + neg
    return tr_pos, tr_neg, ho


def _fit(tr_pos, tr_neg, ho, hyper: IRLHyper, attempt: int) -> ExpertRewardModel:
    rng = np.random.default_rng([hyper.seed, 707] if attempt == 0 else [hyper.seed, 707, attempt])
    model = ExpertRewardModel(seed=hyper.seed if attempt == 0 else hyper.seed + 7919 * attempt)
    opt = nc.adam(hyper.lr, weight_decay=hyper.weight_decay)
    params = model.parameters()
    xp = stack_pairs([d.state for d in tr_pos], [d.label for d in tr_pos])
    xn = stack_pairs([d.state for d in tr_neg], [d.label for d in tr_neg])
    half = max(1, hyper.batch_size // 2)
    n_steps = max(1, max(len(xp), len(xn)) // half)
    best_acc, best_state, epoch = -1.0, None, 0
    for epoch in range(1, hyper.epochs + 1):
        for _ in range(n_steps):
            # class-balanced batches
            ip = rng.integers(len(xp), size=half)
            ineg = rng.integers(len(xn), size=half)
            x = np.concatenate([xp[ip], xn[ineg]])
            if hyper.augment:
                x = _augment(x, rng, hyper.state_temper)
            y = np.concatenate([np.ones(half), -np.ones(half)]).astype(np.float32)
            with nc.Tape() as tape:
                loss = nc.hinge(model.score_tensor(nc.Tensor(x)), nc.Tensor(y))
            tape.backward(loss)
            nc.optimizer_step(opt, params)
        acc = _accuracy(model, ho, 0.0)
        if acc > best_acc:
            best_acc, best_state = acc, model.state_dict()
        if epoch >= hyper.min_epochs and acc >= hyper.target_accuracy:
            break
    # keep the epoch that generalized best, not whichever came last
    model.load_state_dict(best_state)
    ho_pos = raw_scores(model, [d.state for d in ho if d.polarity > 0], [d.label for d in ho if d.polarity > 0])
    ho_neg = raw_scores(model, [d.state for d in ho if d.polarity < 0], [d.label for d in ho if d.polarity < 0])
    model.threshold = equal_error_threshold(ho_pos, ho_neg)
    model.heldout_accuracy = _accuracy(model, ho, model.threshold)
    log.info("expert reward attempt %d: %d epochs, held-out accuracy %.3f",
             attempt, epoch, model.heldout_accuracy)
    return model


def train_expert_reward(pos: list, neg: list, hyper: Optional[IRLHyper] = None) -> ExpertRewardModel:
    """Hinge-loss (max-margin) training on expert vs corrupted pairs, then freeze.

    Small demonstration sets make a single initialization unreliable, so up to
    ``hyper.restarts`` fresh ones are tried while held-out accuracy misses the
    target; the best is kept. Raises UnusableRewardModel if that stays below
    the abort level.
    """
    hyper = hyper or IRLHyper()
    if not pos or not neg:
        raise ValueError("need both expert and negative demonstrations")
    tr_pos, tr_neg, ho = split_holdout(pos, neg, hyper)

    best = None
    for attempt in range(max(1, hyper.restarts + 1)):
        model = _fit(tr_pos, tr_neg, ho, hyper, attempt)
        if best is None or model.heldout_accuracy > best.heldout_accuracy:
            best = model
        if best.heldout_accuracy >= hyper.target_accuracy:
            break
    if best.heldout_accuracy < hyper.abort_accuracy:
        raise UnusableRewardModel(
            f"held-out accuracy {best.heldout_accuracy:.3f} below {hyper.abort_accuracy}")
    best.freeze()
    return best


@dataclass
class DemonstrationSet:
    positives: list = field(default_factory=list)
    negatives: list = field(default_factory=list)

    def manifest_lines(self) -> list[str]:
        lines = ["# source_id polarity recipe"]
        for d in self.positives + self.negatives:
            lines.append(f"{d.source_id} {'+1' if d.polarity > 0 else '-1'} {d.recipe}")
        return lines
