"""The self-training loop: exploration under the expert reward, exploitation
under validation feedback, and the two thresholding baselines it is compared to.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .expert_reward import ExpertRewardModel, batch_scores
from .metrics import MetricsRecord
from .policy import (EpsilonSchedule, HeuristicConfig, PolicyModel, RunningBaseline,
                     anneal_temperature, heuristic_pseudolabel, reinforce_update, select_batch)
from .segnet import SegModel, evaluate, fine_tune, predict_batch
from .synthdata import DatasetSplit

log = logging.getLogger(__name__)

EXPLORATION = "exploration"
EXPLOITATION = "exploitation"


class RewardModifiedError(RuntimeError):
    """The frozen expert reward changed during a run."""


@dataclass
class RestConfig:
    k_iterations: int = 30
    tau_phase: float = 0.7
    batch_size: int = 16
    window: int = 3
    delta_stab: float = 0.005
    anneal_factor: float = 0.9
    retention: str = "fresh"
    policy_lr: float = 1e-3
    baseline_decay: float = 0.9
    finetune_steps: Optional[int] = None   # None: the segmentation model's own setting
    expert_filter: bool = True              # fine-tune only on pairs the expert accepts
    seed: int = 0

    def __post_init__(self):
        if self.k_iterations < 1:
            raise ValueError("k_iterations must be >= 1")
        # a threshold at or above 1 is allowed: it keeps the gate shut for the whole run
        if self.tau_phase <= 0:
            raise ValueError(f"tau_phase must be > 0, got {self.tau_phase}")
        if self.window < 2:
            raise ValueError("stabilization window must be >= 2")
        if self.delta_stab <= 0:
            raise ValueError("delta_stab must be > 0")
        if not 0 < self.anneal_factor < 1:
            raise ValueError("anneal_factor must be in (0, 1)")
        if self.retention != "fresh":
            raise ValueError(f"unsupported retention policy {self.retention!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class RestHistory:
    records: list = field(default_factory=list)         # MetricsRecord, iteration 0 is the starting model
    phases: list = field(default_factory=list)          # one tag per iteration 1..k
    rewards: list = field(default_factory=list)         # batch expert reward per iteration
    reward_sources: list = field(default_factory=list)  # which rewards updated the policy
    r_val: list = field(default_factory=list)           # (iteration, R_val) for exploitation steps
    n_pseudo: list = field(default_factory=list)
    halted: Optional[str] = None

    @property
    def final(self) -> MetricsRecord:
        return self.records[-1]

    @property
    def initial(self) -> MetricsRecord:
        return self.records[0]


@dataclass
class RunContext:
    """Identifies the records a run emits."""
    run_id: str = "run"
    method: str = "rest"
    labeled_fraction: float = 1.0
    repeat: int = 0
    fold: int = 0


def _record(ctx: RunContext, iteration: int, scores, reward: Optional[float]) -> MetricsRecord:
    return MetricsRecord(ctx.run_id, ctx.method, ctx.labeled_fraction, ctx.repeat, ctx.fold,
                         iteration, scores.f1, scores.sensitivity, scores.fps_per_image, reward)


def _batch_indices(n_pool: int, size: int, rng: np.random.Generator) -> np.ndarray:
    return np.sort(rng.choice(n_pool, size=min(size, n_pool), replace=False))


def _stabilized(values: list, window: int, delta: float) -> bool:
    if len(values) < window:
        return False
    tail = values[-window:]
    return max(tail) - min(tail) < delta


def run_rest(seg: SegModel, pol: PolicyModel, rew: ExpertRewardModel, split: DatasetSplit,
             fold: int, cfg: Optional[RestConfig] = None, heuristic: Optional[HeuristicConfig] = None,
             ctx: Optional[RunContext] = None, observer: Optional[Callable] = None):
    """Alternate exploration and exploitation for ``cfg.k_iterations`` iterations.

    Returns (seg, pol, history). The inputs are not modified; both models are
    copied first. The expert reward must already be trained and frozen.
    ``observer(iteration, seg, pol, phase)`` is called after every completed
    iteration.
    """
    cfg = cfg or RestConfig()
    heuristic = heuristic or HeuristicConfig()
    ctx = ctx or RunContext(method="rest", labeled_fraction=split.labeled_fraction, fold=fold)
    if not rew.frozen:
        raise ValueError("the expert reward model must be frozen before the loop starts")
    if not split.unlabeled:
        raise ValueError("the loop needs an unlabeled pool")
    train, val = split.fold_pairs(fold)
    digest = rew.digest()
    seg, pol = seg.copy(), pol.copy()
    pol.opt.lr = cfg.policy_lr
    pool = split.unlabeled
    pick_rng = np.random.default_rng([cfg.seed, 909])
    act_rng = np.random.default_rng([cfg.seed, 910])
    eps = EpsilonSchedule(heuristic)
    epsilon = heuristic.epsilon
    exp_baseline = RunningBaseline(cfg.baseline_decay)
    val_baseline = RunningBaseline(cfg.baseline_decay)

    scores = evaluate(seg, val)
    history = RestHistory()
    history.records.append(_record(ctx, 0, scores, None))
    window: list = []
    cooldown = 0
    for it in range(1, cfg.k_iterations + 1):
        good_seg, good_pol, good_temp = seg.copy(), pol.copy(), pol.temperature
        try:
            idx = _batch_indices(len(pool), cfg.batch_size, pick_rng)
            images = [pool[i] for i in idx]
            states = predict_batch(seg, images)
            batch = select_batch(pol, heuristic, images, states, epsilon, act_rng)
            accepted = batch_scores(rew, [(e.state, e.mask) for e in batch])
            reward = float(accepted.mean()) if batch else 0.0
            sources = ["expert"] if reinforce_update(pol, batch, reward, exp_baseline) else []

            gate_open = bool(batch) and reward > cfg.tau_phase and cooldown == 0
            if gate_open:
                phase = EXPLOITATION
                anneal_temperature(pol, cfg.anneal_factor)
                before = scores.f1
                keep = [e for e, a in zip(batch, accepted) if a or not cfg.expert_filter]
                tuned = fine_tune(seg, [(e.image, e.mask) for e in keep], val, labeled=train,
                                  steps=cfg.finetune_steps, seed=cfg.seed * 7919 + it)
                if tuned.reverted:
                    raise FloatingPointError("fine-tuning produced a non-finite loss")
                seg = tuned.model
                scores = evaluate(seg, val)
                if reinforce_update(pol, batch, tuned.r_val - before, val_baseline):
                    sources.append("validation")
                history.r_val.append((it, tuned.r_val))
                window.append(tuned.r_val)
                if _stabilized(window, cfg.window, cfg.delta_stab):
                    # the environment has settled: go back to exploring for a while
                    log.debug("R_val stabilized at iteration %d; returning to exploration", it)
                    window.clear()
                    cooldown = cfg.window
            else:
                phase = EXPLORATION
                cooldown = max(0, cooldown - 1)
            # every iteration runs the exploration step (sample, expert reward, update)
            epsilon = eps.step()
            _check_finite(pol)
        except FloatingPointError as exc:
            seg, pol = good_seg, good_pol
            pol.temperature = good_temp
            history.halted = f"iteration {it}: {exc}"
            log.error("loop halted, models reverted to iteration %d: %s", it - 1, exc)
            break
        history.phases.append(phase)
        history.rewards.append(reward)
        history.reward_sources.append(sources)
        history.n_pseudo.append(len(batch))
        history.records.append(_record(ctx, it, scores, reward))
        if observer is not None:
            observer(it, seg, pol, phase)

    if rew.digest() != digest:
        raise RewardModifiedError("expert reward parameters changed during the loop")
    return seg, pol, history


def _check_finite(model) -> None:
    for name, p in model.params.items():
        if not np.all(np.isfinite(p.data)):
            raise FloatingPointError(f"parameter {name} became non-finite")


def _threshold_loop(seg: SegModel, split: DatasetSplit, fold: int, labeler, cfg: RestConfig,
                    ctx: RunContext):
    train, val = split.fold_pairs(fold)
    seg = seg.copy()
    pool = split.unlabeled
    pick_rng = np.random.default_rng([cfg.seed, 909])
    scores = evaluate(seg, val)
    history = RestHistory()
    history.records.append(_record(ctx, 0, scores, None))
    for it in range(1, cfg.k_iterations + 1):
        good_seg = seg.copy()
        idx = _batch_indices(len(pool), cfg.batch_size, pick_rng)
        images = [pool[i] for i in idx]
        states = predict_batch(seg, images)
        pseudo = []
        for img, st in zip(images, states):
            mask = labeler(st)
            if mask is not None:
                pseudo.append((img, mask))
        if pseudo:
            tuned = fine_tune(seg, pseudo, val, labeled=train, steps=cfg.finetune_steps,
                              seed=cfg.seed * 7919 + it)
            if tuned.reverted:
                seg = good_seg
                history.halted = f"iteration {it}: fine-tuning produced a non-finite loss"
                break
            seg = tuned.model
            scores = evaluate(seg, val)
        history.phases.append(EXPLOITATION if pseudo else EXPLORATION)
        history.rewards.append(0.0)
        history.reward_sources.append([])
        history.n_pseudo.append(len(pseudo))
        history.records.append(_record(ctx, it, scores, None))
    return seg, history


def run_standard_self_training(seg: SegModel, split: DatasetSplit, fold: int,
                               heuristic: Optional[HeuristicConfig] = None,
                               cfg: Optional[RestConfig] = None, ctx: Optional[RunContext] = None):
    """Confident-prediction pseudolabels (dual threshold, no size filter)."""
    cfg = cfg or RestConfig()
    heuristic = replace(heuristic or HeuristicConfig(), min_area_px=1)
    ctx = ctx or RunContext(method="self-train", labeled_fraction=split.labeled_fraction, fold=fold)
    return _threshold_loop(seg, split, fold, lambda st: heuristic_pseudolabel(st, heuristic), cfg, ctx)


def run_pseudonegative_mining(seg: SegModel, split: DatasetSplit, fold: int,
                              heuristic: Optional[HeuristicConfig] = None,
                              cfg: Optional[RestConfig] = None, ctx: Optional[RunContext] = None):
    """Only confidently normal images, labeled all-background, are used."""
    cfg = cfg or RestConfig()
    heuristic = heuristic or HeuristicConfig()
    ctx = ctx or RunContext(method="neg-mine", labeled_fraction=split.labeled_fraction, fold=fold)

    def labeler(state):
        return np.zeros(state.shape, np.uint8) if state.max() < heuristic.theta_neg else None

    return _threshold_loop(seg, split, fold, labeler, cfg, ctx)
