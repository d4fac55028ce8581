"""Per-fold experiment pipeline shared by the CLI and the acceptance suite.

One fold of one repeat at one labeled fraction runs: supervised training,
demonstration building, expert-reward training, then the loop or a baseline.
Every seed is derived from ``protocol.master_seed``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import logging
from dataclasses import dataclass
from typing import Optional

from . import config as cfgmod
from .expert_reward import (DemonstrationSet, ExpertRewardModel, build_demonstrations,
                            synthesize_negatives, train_expert_reward)
from .metrics import MetricsRecord, repeat_seed
from .policy import PolicyModel
from .rest_loop import (RunContext, run_pseudonegative_mining, run_rest,
                        run_standard_self_training)
from .segnet import SegModel, evaluate, train_supervised
from .synthdata import DatasetSplit, generate_dataset, subset_labeled, with_folds

log = logging.getLogger(__name__)

METHODS = ("supervised", "rest", "self-train", "neg-mine")


def fold_seed(master: int, repeat: int, fold: int) -> int:
    return repeat_seed(master, repeat) * 31 + fold


def run_id(cfg: cfgmod.ExperimentConfig, method: str, fraction: float) -> str:
    """Stable id of one (config, seed, method, fraction) run; where outputs go is not part of it."""
    text = cfgmod.serialize(dataclasses.replace(cfg, output=cfgmod.OutputConfig()), docs=False)
    key = f"{text}\nseed={cfg.protocol.master_seed}\nmethod={method}\nfraction={fraction!r}"
    return hashlib.sha256(key.encode()).hexdigest()[:12]


def build_dataset(cfg: cfgmod.ExperimentConfig) -> DatasetSplit:
    d = cfg.data
    return generate_dataset(d.n_labeled, d.n_unlabeled, d.seed, d.shape(), k=cfg.protocol.k)


def fraction_split(full: DatasetSplit, cfg: cfgmod.ExperimentConfig, fraction: float,
                   repeat: int) -> DatasetSplit:
    """Labeled subset for ``fraction`` (nested across fractions) with the repeat's folds."""
    sub = subset_labeled(full, fraction, cfg.protocol.master_seed)
    return with_folds(sub, cfg.protocol.k, repeat_seed(cfg.protocol.master_seed, repeat))


def seg_hyper(cfg: cfgmod.ExperimentConfig, seed: int):
    return dataclasses.replace(cfg.seg, seed=seed)


def train_environment(cfg: cfgmod.ExperimentConfig, split: DatasetSplit, fold: int, repeat: int):
    seed = fold_seed(cfg.protocol.master_seed, repeat, fold)
    return train_supervised(split, fold, seg_hyper(cfg, seed))


def supervised_record(cfg, seg: SegModel, split: DatasetSplit, fold: int, repeat: int,
                      rid: str, iteration: int = 0) -> MetricsRecord:
    _, val = split.fold_pairs(fold)
    s = evaluate(seg, val, cfg.protocol.iou_thresh)
    return MetricsRecord(rid, "supervised", split.labeled_fraction, repeat, fold, iteration,
                         s.f1, s.sensitivity, s.fps_per_image, None)


def train_reward(cfg: cfgmod.ExperimentConfig, seg: SegModel, split: DatasetSplit, fold: int,
                 repeat: int):
    """Expert reward from the fold's training pairs; returns (model, demonstrations)."""
    seed = fold_seed(cfg.protocol.master_seed, repeat, fold)
    train, _ = split.fold_pairs(fold)
    pos = build_demonstrations(seg, train)
    neg = synthesize_negatives(pos, seed, cfg.negatives.recipe(cfg.data.size))
    model = train_expert_reward(pos, neg, dataclasses.replace(cfg.irl, seed=seed))
    return model, DemonstrationSet(pos, neg)


def run_method(cfg: cfgmod.ExperimentConfig, method: str, seg: SegModel, split: DatasetSplit,
               fold: int, repeat: int, rid: str, reward: Optional[ExpertRewardModel] = None):
    """Run the loop or a baseline from a trained environment.

    Returns (seg, history, policy); the policy is None for the baselines.
    """
    seed = fold_seed(cfg.protocol.master_seed, repeat, fold)
    rest_cfg = dataclasses.replace(cfg.rest, seed=seed)
    ctx = RunContext(rid, method, split.labeled_fraction, repeat, fold)
    if method == "rest":
        if reward is None:
            raise ValueError("the loop needs a trained expert reward")
        pol = PolicyModel.from_hyper(cfg.policy, seed=seed)
        out_seg, out_pol, history = run_rest(seg, pol, reward, split, fold, rest_cfg, cfg.heuristic, ctx)
        return out_seg, history, out_pol
    if method == "self-train":
        return (*run_standard_self_training(seg, split, fold, cfg.heuristic, rest_cfg, ctx), None)
    if method == "neg-mine":
        return (*run_pseudonegative_mining(seg, split, fold, cfg.heuristic, rest_cfg, ctx), None)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS[1:]}")


@dataclass
class FoldResult:
    repeat: int
    fold: int
    fraction: float
    pre: MetricsRecord
    histories: dict            # method -> RestHistory
    reward: Optional[ExpertRewardModel] = None
    reward_digest_before: str = ""
    seg: Optional[SegModel] = None


def run_fold(cfg: cfgmod.ExperimentConfig, full: DatasetSplit, fraction: float, repeat: int,
             fold: int, methods=("rest",)) -> FoldResult:
    """Every requested method on one fold, all starting from the same environment."""
    split = fraction_split(full, cfg, fraction, repeat)
    seg = train_environment(cfg, split, fold, repeat).model
    pre = supervised_record(cfg, seg, split, fold, repeat, run_id(cfg, "supervised", fraction))
    result = FoldResult(repeat, fold, fraction, pre, {}, seg=seg)
    if "rest" in methods:
        result.reward, _ = train_reward(cfg, seg, split, fold, repeat)
        result.reward_digest_before = result.reward.digest()
    for m in methods:
        _, history, _ = run_method(cfg, m, seg, split, fold, repeat, run_id(cfg, m, fraction), result.reward)
        result.histories[m] = history
    return result
