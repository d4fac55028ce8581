"""The pseudolabeling agent: a stochastic per-pixel Bernoulli policy.

Also holds the thresholding heuristic used during the agent's early life,
epsilon-greedy selection between the two, temperature annealing and the
REINFORCE update.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numcore as nc
from .layers import ParamSet
from .metrics import label_components

log = logging.getLogger(__name__)

SATURATION = 30.0


@dataclass
class HeuristicConfig:
    theta_pos: float = 0.9
    theta_neg: float = 0.1
    min_area_px: int = 3
    epsilon: float = 0.9
    epsilon_decay: float = 0.95
    epsilon_floor: float = 0.05

    def __post_init__(self):
        if not 0.5 < self.theta_pos < 1:
            raise ValueError(f"theta_pos must be in (0.5, 1), got {self.theta_pos}")
        if not 0 < self.theta_neg < 0.5:
            raise ValueError(f"theta_neg must be in (0, 0.5), got {self.theta_neg}")
        if self.min_area_px < 1:
            raise ValueError("min_area_px must be >= 1")
        for name in ("epsilon", "epsilon_floor"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be in [0, 1]")


class EpsilonSchedule:
    def __init__(self, cfg: HeuristicConfig):
        self.value = cfg.epsilon
        self.decay = cfg.epsilon_decay
        self.floor = cfg.epsilon_floor

    def step(self) -> float:
        self.value = max(self.value * self.decay, self.floor)
        return self.value


@dataclass
class PolicyHyper:
    width: int = 8
    temperature: float = 1.0
    t_min: float = 0.05
    init_gain: float = 24.0
    lr: float = 1e-3
    rule: str = "adam"


class PolicyModel(ParamSet):
    """Maps the stacked (image, state) pair to per-pixel Bernoulli logits.

    A 1x1 skip path reads the state directly; it is initialised so the
    untrained policy labels roughly where the segmentation model is confident,
    and the two-layer conv path learns corrections on top of it.
    """

    arch_id = "pol-v1"

    def __init__(self, width: int = 8, seed: int = 0, temperature: float = 1.0,
                 t_min: float = 0.05, init_gain: float = 24.0, lr: float = 1e-3,
                 rule: str = "adam"):
        super().__init__()
        if temperature <= 0:
            raise ValueError("temperature must be > 0")
        self.temperature = float(temperature)
        self.t_min = float(t_min)
        rng = np.random.default_rng([seed, 404])
        self.add_conv("c1", 2, width, 3, rng)
        self.add_conv("c2", width, width, 3, rng)
        self.add_conv("out", width, 1, 1, rng, std=1e-3)
        self.add_conv("skip", 2, 1, 1, rng, std=0.0)
        self.params["skip.w"].data[0, 1, 0, 0] = init_gain
        self.params["skip.b"].data[0] = -init_gain / 2
        self.opt = nc.OptimizerState(lr=lr, rule=rule)

    @classmethod
    def from_hyper(cls, hyper: PolicyHyper, seed: int = 0) -> "PolicyModel":
        return cls(hyper.width, seed, hyper.temperature, hyper.t_min, hyper.init_gain,
                   hyper.lr, hyper.rule)

    def logits(self, x: nc.Tensor) -> nc.Tensor:
        """Temperature-free logits for inputs (N,2,H,W)."""
        if x.data.ndim != 4 or x.shape[1] != 2:
            raise nc.ShapeError(f"PolicyModel expects (N,2,H,W), got {x.shape}")
        h = nc.relu(self.conv("c2", nc.relu(self.conv("c1", x))))
        return nc.add(self.conv("out", h), self.conv("skip", x))

    def scaled_logits(self, x: nc.Tensor) -> nc.Tensor:
        return nc.scale(self.logits(x), 1.0 / self.temperature)

    def copy(self) -> "PolicyModel":
        return copy.deepcopy(self)


def policy_input(images, states) -> np.ndarray:
    """Stack equalized images (centred) with probability maps into (N,2,H,W)."""
    from .segnet import prepare
    imgs = prepare(list(images))[:, 0]
    states = np.asarray(states, dtype=np.float32)
    if imgs.shape != states.shape:
        raise nc.ShapeError(f"image/state shape mismatch: {imgs.shape} vs {states.shape}")
    return np.stack([imgs, states], axis=1)


def bernoulli_log_prob(z: np.ndarray, sample: np.ndarray) -> np.ndarray:
    """Per-pixel log-probability of ``sample`` under Bernoulli(sigmoid(z))."""
    z = z.astype(np.float64)
    return -(np.maximum(z, 0) - z * sample + np.log1p(np.exp(-np.abs(z))))


def sample_from_logits(z: np.ndarray, rng: np.random.Generator):
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("non-finite policy logits")
    prob = nc.stable_sigmoid(z.astype(np.float64))
    u = rng.random(z.shape)
    mask = (u < prob).astype(np.uint8)
    # saturated logits are deterministic regardless of the uniform draw
    mask[z > SATURATION] = 1
    mask[z < -SATURATION] = 0
    axes = tuple(range(1, z.ndim))
    return mask, bernoulli_log_prob(z, mask).sum(axis=axes)


def policy_sample_batch(policy: PolicyModel, x: np.ndarray, rng: np.random.Generator):
    """Masks (N,H,W) and total log-probabilities (N,) for a stacked input batch."""
    z = policy.scaled_logits(nc.Tensor(x)).data[:, 0]
    return sample_from_logits(z, rng)


def policy_sample(policy: PolicyModel, image, state, rng: np.random.Generator):
    """Draw one pseudolabel mask and its total log-probability."""
    masks, logp = policy_sample_batch(policy, policy_input([image], [state]), rng)
    return masks[0], float(logp[0])


def heuristic_pseudolabel(state: np.ndarray, cfg: HeuristicConfig) -> Optional[np.ndarray]:
    """All-zero mask for confidently normal states, the large confident regions
    for confidently positive ones, None when the state is uninformative."""
    state = np.asarray(state)
    if state.max() < cfg.theta_neg:
        return np.zeros(state.shape, dtype=np.uint8)
    labels, n = label_components(state >= cfg.theta_pos)
    if n == 0:
        return None
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    keep = np.nonzero(areas >= cfg.min_area_px)[0]
    keep = keep[keep > 0]
    if keep.size == 0:
        return None
    return np.isin(labels, keep).astype(np.uint8)


@dataclass
class PseudoEntry:
    image: object          # SampleGrid
    state: np.ndarray
    mask: np.ndarray
    log_prob: Optional[float]
    source: str            # "policy" | "heuristic"


def epsilon_greedy_select(policy: PolicyModel, cfg: HeuristicConfig, image, state,
                          epsilon: float, rng: np.random.Generator) -> Optional[PseudoEntry]:
    """Heuristic with probability epsilon, else a policy sample; None if skipped."""
    if not 0 <= epsilon <= 1:
        raise ValueError(f"epsilon must be in [0, 1], got {epsilon}")
    if rng.random() < epsilon:
        mask = heuristic_pseudolabel(state, cfg)
        return None if mask is None else PseudoEntry(image, state, mask, None, "heuristic")
    mask, logp = policy_sample(policy, image, state, rng)
    return PseudoEntry(image, state, mask, logp, "policy")


def select_batch(policy: PolicyModel, cfg: HeuristicConfig, images: list, states: np.ndarray,
                 epsilon: float, rng: np.random.Generator) -> list:
    """Batched epsilon-greedy selection (one policy forward pass for the batch).

    Random draws happen in the same order as repeated epsilon_greedy_select calls
    would make them for the source choice; policy masks come from a single
    batched draw afterwards.
    """
    use_heuristic = rng.random(len(images)) < epsilon
    entries: list = [None] * len(images)
    policy_idx = [i for i in range(len(images)) if not use_heuristic[i]]
    for i in np.nonzero(use_heuristic)[0]:
        mask = heuristic_pseudolabel(states[i], cfg)
        if mask is not None:
            entries[i] = PseudoEntry(images[i], states[i], mask, None, "heuristic")
    if policy_idx:
        x = policy_input([images[i] for i in policy_idx], states[policy_idx])
        masks, logps = policy_sample_batch(policy, x, rng)
        for j, i in enumerate(policy_idx):
            entries[i] = PseudoEntry(images[i], states[i], masks[j], float(logps[j]), "policy")
    return [e for e in entries if e is not None]


class RunningBaseline:
    """Exponential moving average of rewards."""

    def __init__(self, decay: float = 0.9, value: float = 0.0):
        self.decay = decay
        self.value = value

    def update(self, reward: float) -> float:
        self.value = self.decay * self.value + (1 - self.decay) * reward
        return self.value


class NoPolicyEntries(RuntimeWarning):
    pass


def reinforce_update(policy: PolicyModel, batch: list, reward: float,
                     baseline: RunningBaseline | None, lr: float | None = None) -> bool:
    """Gradient ascent on (reward - baseline) * sum of policy log-probs.

    The same advantage is broadcast to every policy-sourced entry; heuristic
    entries carry no log-prob and contribute nothing. Returns False (no-op)
    when the batch has no policy entries.
    """
    entries = [e for e in batch if e.source == "policy"]
    b = baseline.value if baseline is not None else 0.0
    advantage = float(reward) - b
    if baseline is not None:
        baseline.update(reward)
    if not entries:
        log.info("reinforce_update: no policy-sourced entries, skipping")
        return False
    if advantage == 0.0:
        return True
    if lr is not None:
        policy.opt.lr = lr
    x = policy_input([e.image for e in entries], np.stack([e.state for e in entries]))
    masks = np.stack([e.mask for e in entries]).astype(np.float32)[:, None]
    reinforce_step(policy, x, masks, np.full(len(entries), advantage))
    return True


def reinforce_gradient(policy, x: np.ndarray, masks: np.ndarray, advantages: np.ndarray) -> float:
    """Populate parameter grads with those of -mean_i(adv_i * log pi(mask_i | x_i)).

    ``masks`` is (N,1,H,W); advantages are per sample. Returns the surrogate loss.
    """
    n = x.shape[0]
    # -log pi = bce_with_logits(sum); per-sample advantages enter as constant weights
    weight = np.broadcast_to((np.asarray(advantages, dtype=np.float32) / n)[:, None, None, None],
                             masks.shape)
    with nc.Tape() as tape:
        loss = nc.bce_with_logits(policy.scaled_logits(nc.Tensor(x)), nc.Tensor(masks),
                                  reduction="sum", weight=np.ascontiguousarray(weight))
    tape.backward(loss)
    return loss.item()


def reinforce_step(policy, x: np.ndarray, masks: np.ndarray, advantages: np.ndarray) -> None:
    """One optimizer step along the REINFORCE estimate (see reinforce_gradient)."""
    reinforce_gradient(policy, x, masks, advantages)
    nc.optimizer_step(policy.opt, policy.parameters())


def anneal_temperature(policy: PolicyModel, factor: float) -> PolicyModel:
    if not 0 < factor < 1:
        raise ValueError(f"anneal factor must be in (0, 1), got {factor}")
    policy.temperature = max(policy.temperature * factor, policy.t_min)
    return policy


def bernoulli_entropy(z: np.ndarray) -> np.ndarray:
    p = nc.stable_sigmoid(np.asarray(z, dtype=np.float64))
    q = 1 - p
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(np.where(p > 0, p * np.log(p), 0) + np.where(q > 0, q * np.log(q), 0))
    return h
