"""Experiment configuration: a line-oriented ``key = value`` file with sections.

Every field has a default; ``serialize(ExperimentConfig())`` is the documented
default file and ``parse(serialize(cfg)) == cfg`` for any valid config.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .expert_reward import RECIPES, IRLHyper, NegativeRecipe
from .policy import HeuristicConfig, PolicyHyper
from .rest_loop import RestConfig
from .segnet import SegHyper
from .synthdata import ShapeConfig

SUPPORTED_FRACTIONS = (0.25, 0.5, 0.75, 1.0)


class ConfigError(ValueError):
    def __init__(self, msg: str, line_no: Optional[int] = None):
        where = f"line {line_no}: " if line_no is not None else ""
        super().__init__(where + msg)
        self.line_no = line_no


@dataclass
class DataConfig:
    n_labeled: int = 80
    n_unlabeled: int = 240
    seed: int = 1
    size: int = 32
    radius: tuple = (1.6, 4.0)
    max_aspect: float = 1.5
    p_positive: float = 0.7
    count_weights: tuple = (0.6, 0.3, 0.1)
    contrast: tuple = (0.22, 0.4)
    noise_sd: float = 0.025
    max_fg_rate: float = 0.08
    min_fg_rate: float = 0.005

    def shape(self) -> ShapeConfig:
        return ShapeConfig(self.size, self.radius, self.max_aspect, self.p_positive,
                           self.count_weights, self.contrast, self.noise_sd,
                           self.max_fg_rate, self.min_fg_rate)


@dataclass
class ProtocolConfig:
    fractions: tuple = SUPPORTED_FRACTIONS
    k: int = 5
    repeats: int = 5
    master_seed: int = 0
    iou_thresh: float = 0.25


@dataclass
class NegativesConfig:
    per_positive: int = 2
    enabled: tuple = RECIPES
    shift: tuple = (8.0, 24.0)
    morph: tuple = (2, 4)
    radius: tuple = (3.0, 8.0)
    min_difference: float = 0.05
    min_shift: float = 8.0
    scale_to_image: bool = True

    def recipe(self, size: int) -> NegativeRecipe:
        kw = dict(per_positive=self.per_positive, enabled=tuple(self.enabled),
                  min_difference=self.min_difference)
        if not self.scale_to_image:
            return NegativeRecipe(shift=self.shift, morph=self.morph, radius=self.radius,
                                  min_shift=self.min_shift, **kw)
        s = size / 64.0
        return NegativeRecipe(shift=(self.shift[0] * s, self.shift[1] * s),
                              morph=(max(1, round(self.morph[0] * s)), max(1, round(self.morph[1] * s))),
                              radius=(self.radius[0] * s, self.radius[1] * s),
                              min_shift=self.min_shift * s, **kw)


@dataclass
class OutputConfig:
    out_dir: str = "rest_lab_out"
    overlay_ids: tuple = ()


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    seg: SegHyper = field(default_factory=SegHyper)
    irl: IRLHyper = field(default_factory=IRLHyper)
    negatives: NegativesConfig = field(default_factory=NegativesConfig)
    policy: PolicyHyper = field(default_factory=PolicyHyper)
    heuristic: HeuristicConfig = field(default_factory=HeuristicConfig)
    rest: RestConfig = field(default_factory=RestConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self) -> "ExperimentConfig":
        bad = [f for f in self.protocol.fractions if f not in SUPPORTED_FRACTIONS]
        if bad or not self.protocol.fractions:
            raise ConfigError(f"fractions must be a non-empty subset of {SUPPORTED_FRACTIONS}, got {bad}")
        if self.protocol.k < 2 or self.protocol.repeats < 1:
            raise ConfigError("need k >= 2 folds and at least one repeat")
        if self.data.n_labeled * min(self.protocol.fractions) < 2 * self.protocol.k:
            raise ConfigError("smallest labeled fraction leaves fewer than two images per fold")
        if self.data.size % 4:
            raise ConfigError("image size must be divisible by 4")
        if not 0 < self.protocol.iou_thresh < 1:
            raise ConfigError("iou_thresh must be in (0, 1)")
        parent = Path(self.output.out_dir).resolve().parent
        if not parent.exists():
            raise ConfigError(f"output directory parent {parent} does not exist")
        try:
            self.negatives.recipe(self.data.size)
        except ValueError as exc:
            raise ConfigError(f"[negatives] {exc}") from None
        return self


# seeds inside module hyperparameters are derived from protocol.master_seed
_SKIP = {("seg", "seed"), ("irl", "seed"), ("rest", "seed")}

# fields whose default is None need an explicit value type
_OPTIONAL_TYPES = {("rest", "finetune_steps"): int, ("seg", "finetune_labeled_pos_weight"): float}

DOCS = {
    "data": "synthetic dataset (pixel sizes refer to the generated images)",
    "data.n_labeled": "labeled images before fraction subsetting",
    "data.n_unlabeled": "unlabeled pool shared by every method",
    "data.seed": "generator seed",
    "data.size": "image side in pixels (divisible by 4)",
    "data.radius": "blob half-maximum radius range",
    "data.max_aspect": "largest blob axis ratio",
    "data.p_positive": "probability that an image holds at least one blob",
    "data.count_weights": "relative odds of 1, 2, 3 blobs in a positive image",
    "data.contrast": "blob peak amplitude range",
    "data.noise_sd": "background noise level",
    "data.max_fg_rate": "largest foreground fraction of a positive image",
    "data.min_fg_rate": "smallest foreground fraction of a positive image",
    "protocol": "cross-validation protocol",
    "protocol.fractions": "labeled fractions to run",
    "protocol.k": "folds per repeat",
    "protocol.repeats": "fold reshuffles",
    "protocol.master_seed": "root of every derived seed",
    "protocol.iou_thresh": "component IoU needed to count a lesion as detected",
    "seg": "segmentation network training",
    "seg.lr": "Adam learning rate",
    "seg.batch_size": "supervised mini-batch size",
    "seg.epochs": "supervised epoch budget",
    "seg.patience": "early-stop patience in epochs",
    "seg.restore_best": "reload the best validation epoch after training",
    "seg.equalize": "per-image histogram equalization of inputs",
    "seg.finetune_lr_scale": "fine-tuning rate relative to lr",
    "seg.finetune_steps": "optimizer steps per fine-tuning round",
    "seg.finetune_batch": "fine-tuning batch (half pseudolabels, half true labels)",
    "seg.finetune_pos_weight": "foreground loss weight while fine-tuning",
    "seg.finetune_labeled_pos_weight": "foreground loss weight on the true-label half of a fine-tune batch (none: same as pos_weight)",
    "seg.threshold": "probability threshold for binary predictions",
    "seg.pos_weight": "foreground loss weight in supervised training",
    "seg.min_epoch_samples": "small training sets are cycled up to this many samples per epoch",
    "seg.augment": "random rotations and flips of training batches",
    "seg.final_lr_scale": "end of the cosine learning-rate decay, relative to lr",
    "irl": "expert reward classifier",
    "irl.lr": "Adam learning rate",
    "irl.epochs": "epoch budget",
    "irl.batch_size": "class-balanced batch size",
    "irl.weight_decay": "L2 regularization",
    "irl.holdout": "share of demonstration sources held out",
    "irl.target_accuracy": "stop once held-out accuracy reaches this",
    "irl.abort_accuracy": "below this the reward is unusable and the run aborts",
    "irl.min_epochs": "epochs before the stopping rule applies",
    "irl.augment": "random rotations, flips and state softening",
    "irl.state_temper": "logit scale range used to soften training states",
    "irl.restarts": "fresh initializations tried when held-out accuracy misses the target",
    "negatives": "corrupted-label negatives (distances in pixels at 64 px when scaled)",
    "negatives.per_positive": "negatives per expert demonstration",
    "negatives.enabled": "recipes to draw from",
    "negatives.shift": "translation distance range",
    "negatives.morph": "dilation or erosion radius range",
    "negatives.radius": "random blob radius range",
    "negatives.min_difference": "least changed share of the label union",
    "negatives.min_shift": "shortest allowed translation",
    "negatives.scale_to_image": "scale the distances by size / 64",
    "policy": "pseudolabeling policy network",
    "policy.width": "hidden channels",
    "policy.temperature": "initial sampling temperature",
    "policy.t_min": "temperature floor",
    "policy.init_gain": "initial weight of the state on the logits",
    "policy.lr": "policy learning rate",
    "policy.rule": "optimizer (adam or sgd)",
    "heuristic": "thresholding pseudolabeler and epsilon-greedy schedule",
    "heuristic.theta_pos": "positive threshold",
    "heuristic.theta_neg": "negative threshold",
    "heuristic.min_area_px": "smallest kept component",
    "heuristic.epsilon": "initial probability of using the heuristic",
    "heuristic.epsilon_decay": "per-iteration decay factor",
    "heuristic.epsilon_floor": "smallest epsilon",
    "rest": "self-training loop",
    "rest.k_iterations": "loop iterations",
    "rest.tau_phase": "expert reward needed to fine-tune the environment",
    "rest.batch_size": "unlabeled images drawn per iteration",
    "rest.window": "R_val values checked for stabilization",
    "rest.delta_stab": "R_val range under which the environment counts as stable",
    "rest.anneal_factor": "temperature factor per exploitation iteration",
    "rest.retention": "pseudolabel retention policy (fresh)",
    "rest.policy_lr": "policy learning rate inside the loop",
    "rest.baseline_decay": "moving-average decay of the reward baselines",
    "rest.finetune_steps": "fine-tuning steps per round (none: seg.finetune_steps)",
    "rest.expert_filter": "fine-tune only on pairs the expert accepts",
    "output": "output locations",
    "output.out_dir": "output directory (REST_LAB_OUT overrides)",
    "output.overlay_ids": "labeled image ids rendered as overlays by report",
}


def _sections(cfg: ExperimentConfig):
    for sec in dataclasses.fields(cfg):
        obj = getattr(cfg, sec.name)
        yield sec.name, obj, [f for f in dataclasses.fields(obj) if (sec.name, f.name) not in _SKIP]


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


def serialize(cfg: ExperimentConfig, docs: bool = True) -> str:
    lines = []
    for name, obj, fields in _sections(cfg):
        if docs:
            lines.append(f"# {DOCS.get(name, '')}")
        lines.append(f"[{name}]")
        for f in fields:
            if docs:
                lines.append(f"# {DOCS.get(f'{name}.{f.name}', '')}")
            lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def _scalar(text: str, kind):
    text = text.strip()
    if kind is bool:
        if text.lower() in ("true", "yes", "1"):
            return True
        if text.lower() in ("false", "no", "0"):
            return False
        raise ValueError(f"expected true/false, got {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def _parse_value(text: str, default, optional_kind=None):
    text = text.strip()
    if default is None:
        return None if text.lower() == "none" else _scalar(text, optional_kind or str)
    if isinstance(default, tuple):
        if not text:
            return ()
        parts = [p for p in (s.strip() for s in text.split(",")) if p]
        kinds = [type(v) for v in default] or [str]
        # a tuple default of ints may still hold floats, e.g. fractions
        if all(k is int for k in kinds) and any("." in p or "e" in p.lower() for p in parts):
            kinds = [float]
        return tuple(_scalar(p, kinds[min(i, len(kinds) - 1)]) for i, p in enumerate(parts))
    if isinstance(default, float):
        return _scalar(text, float)
    return _scalar(text, type(default))


def parse(text: str) -> ExperimentConfig:
    """Parse a config file's text; unspecified keys keep their defaults."""
    base = ExperimentConfig()
    known = {name: (obj, {f.name for f in fields}) for name, obj, fields in _sections(base)}
    values: dict = {name: {} for name in known}
    section = None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in known:
                raise ConfigError(f"unknown section [{section}]", no)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", no)
        if section is None:
            raise ConfigError("key outside of any section", no)
        key, _, val = line.partition("=")
        key = key.strip()
        obj, names = known[section]
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in [{section}]", no)
        if key in values[section]:
            raise ConfigError(f"duplicate key {key!r} in [{section}]", no)
        try:
            values[section][key] = _parse_value(val, getattr(obj, key), _OPTIONAL_TYPES.get((section, key)))
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}", no) from None
    try:
        parts = {name: dataclasses.replace(obj, **values[name]) for name, (obj, _) in known.items()}
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return ExperimentConfig(**parts)


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse(text)


def with_overrides(cfg: ExperimentConfig, assignments) -> ExperimentConfig:
    """Apply ``section.key=value`` assignments, as given on the command line."""
    for item in assignments:
        name, sep, val = item.partition("=")
        sec, _, key = name.strip().partition(".")
        if not sep or not key:
            raise ConfigError(f"expected section.key=value, got {item!r}")
        obj = getattr(cfg, sec, None)
        if obj is None or not dataclasses.is_dataclass(obj) or (sec, key) in _SKIP \
                or key not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"unknown setting {name.strip()!r}")
        try:
            new = _parse_value(val, getattr(ExperimentConfig().__dict__[sec], key),
                               _OPTIONAL_TYPES.get((sec, key)))
            cfg = dataclasses.replace(cfg, **{sec: dataclasses.replace(obj, **{key: new})})
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{name.strip()}: {exc}") from None
    return cfg
