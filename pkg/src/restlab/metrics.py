"""Evaluation: pixel F1, lesion detection counts, Welch t-test, cross-validation."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import ndimage

_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])

CSV_FIELDS = ("run_id", "method", "labeled_fraction", "repeat", "fold", "iteration",
              "f1", "sensitivity", "fps_per_image", "reward")


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 1.0 if denom == 0 else 2 * self.tp / denom


@dataclass
class LesionMatch:
    matched_gt: list          # indices of detected GT components
    n_gt: int
    n_pred: int
    false_positives: int


@dataclass
class MetricsRecord:
    run_id: str
    method: str
    labeled_fraction: float
    repeat: int
    fold: int
    iteration: int
    f1: float
    sensitivity: float
    fps_per_image: float
    reward: Optional[float] = None

    def __post_init__(self):
        for name in ("f1", "sensitivity", "fps_per_image"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"MetricsRecord.{name} is not finite")
        if self.reward is not None and not math.isfinite(self.reward):
            raise ValueError("MetricsRecord.reward is not finite")
        if not self.run_id or not self.method:
            raise ValueError("MetricsRecord needs a run_id and a method")


def _pixels(mask) -> np.ndarray:
    return np.asarray(getattr(mask, "pixels", mask)) > 0


def confusion(pred, gt) -> ConfusionCounts:
    p, g = _pixels(pred), _pixels(gt)
    if p.shape != g.shape:
        raise ValueError(f"mask shape mismatch: {p.shape} vs {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def pixel_f1(pred, gt) -> float:
    """2tp / (2tp + fp + fn); two empty masks agree perfectly (1.0)."""
    return confusion(pred, gt).f1()


def label_components(mask) -> tuple[np.ndarray, int]:
    """4-connected labels numbered in row-major order of first pixel."""
    labels, n = ndimage.label(_pixels(mask), structure=_FOUR_CONNECTED)
    return labels, n


def count_components(mask) -> int:
    return label_components(mask)[1]


def connected_components(mask) -> list[np.ndarray]:
    """List of components, each an array of flat (row-major) pixel indices."""
    labels, n = label_components(mask)
    if n == 0:
        return []
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=n + 1)
    bounds = np.cumsum(counts)
    comps = [order[bounds[i - 1]:bounds[i]] for i in range(1, n + 1)]
    comps.sort(key=lambda c: int(c[0]))
    return comps


def lesion_metrics(pred, gt, iou_thresh: float = 0.25) -> LesionMatch:
    """Greedy one-to-one matching of components by descending IoU.

    Only pairs with IoU >= iou_thresh may be matched; every predicted
    component left unmatched is a false positive.
    """
    if not 0 < iou_thresh < 1:
        raise ValueError(f"iou_thresh must be in (0, 1), got {iou_thresh}")
    p, g = _pixels(pred), _pixels(gt)
    if p.shape != g.shape:
        raise ValueError(f"mask shape mismatch: {p.shape} vs {g.shape}")
    pl, n_pred = label_components(p)
    gl, n_gt = label_components(g)
    if n_pred == 0 or n_gt == 0:
        return LesionMatch([], n_gt, n_pred, n_pred)
    inter = np.zeros((n_pred + 1, n_gt + 1), dtype=np.int64)
    np.add.at(inter, (pl.ravel(), gl.ravel()), 1)
    inter = inter[1:, 1:]
    area_p = np.bincount(pl.ravel(), minlength=n_pred + 1)[1:]
    area_g = np.bincount(gl.ravel(), minlength=n_gt + 1)[1:]
    iou = inter / (area_p[:, None] + area_g[None, :] - inter)
    cand = [(iou[i, j], i, j) for i, j in zip(*np.nonzero(iou >= iou_thresh))]
    cand.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_p, used_g = set(), set()
    for _, i, j in cand:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
    return LesionMatch(sorted(int(j) for j in used_g), n_gt, n_pred, n_pred - len(used_p))


@dataclass
class SetScores:
    f1: float
    sensitivity: float
    fps_per_image: float
    counts: ConfusionCounts = field(default_factory=ConfusionCounts)


def evaluate_masks(preds: list, gts: list, iou_thresh: float = 0.25) -> SetScores:
    """Pixel F1 and lesion sensitivity pooled over the set; FPs averaged per image."""
    if len(preds) != len(gts) or not preds:
        raise ValueError("need equally many (non-zero) predictions and ground truths")
    counts = ConfusionCounts()
    detected = total_gt = fps = 0
    for p, g in zip(preds, gts):
        counts = counts + confusion(p, g)
        m = lesion_metrics(p, g, iou_thresh)
        detected += len(m.matched_gt)
        total_gt += m.n_gt
        fps += m.false_positives
    sens = detected / total_gt if total_gt else 1.0
    return SetScores(counts.f1(), sens, fps / len(preds), counts)


# --- Welch t-test ------------------------------------------------------------

def _betacf(a: float, b: float, x: float, max_iter: int = 300, eps: float = 3e-16) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must be in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    return betainc(df / 2.0, 0.5, df / (df + t * t))


@dataclass
class WelchResult:
    t: float
    df: float
    p: float


def welch(a, b) -> WelchResult:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError(f"Welch test needs >= 2 samples per group, got {a.size} and {b.size}")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va == 0 or vb == 0:
        raise ValueError(f"degenerate variance in Welch test (var_a={va}, var_b={vb})")
    sa, sb = va / a.size, vb / b.size
    se = math.sqrt(sa + sb)
    t = (a.mean() - b.mean()) / se
    df = (sa + sb) ** 2 / (sa * sa / (a.size - 1) + sb * sb / (b.size - 1))
    return WelchResult(float(t), float(df), float(min(1.0, t_sf_two_sided(float(t), df))))


def welch_t_test(a, b) -> float:
    """Two-sided p-value of Welch's unequal-variance t-test."""
    return welch(a, b).p


# --- cross-validation ----------------------------------------------------------

class CrossValidationError(RuntimeError):
    def __init__(self, fold: int, repeat: int, cause: BaseException):
        super().__init__(f"runner failed at repeat={repeat} fold={fold}: {cause}")
        self.fold, self.repeat, self.cause = fold, repeat, cause


@dataclass
class Summary:
    n: int
    mean: dict
    sd: dict

    def fmt(self, metric: str) -> str:
        return f"{self.mean[metric]:.3f} ± {self.sd[metric]:.3f}"


def summarize(records: list, metrics=("f1", "sensitivity", "fps_per_image")) -> Summary:
    mean, sd = {}, {}
    for m in metrics:
        vals = np.array([getattr(r, m) for r in records], dtype=np.float64)
        mean[m] = float(vals.mean()) if vals.size else float("nan")
        sd[m] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
    return Summary(len(records), mean, sd)


def repeat_seed(master_seed: int, repeat: int) -> int:
    return master_seed * 1009 + repeat


def cross_validate(runner: Callable, split, k: int = 5, repeats: int = 5,
                   seed: int = 0) -> tuple[list, Summary]:
    """Run ``runner(split_with_folds, fold, repeat)`` for every fold of every repeat.

    The runner returns one MetricsRecord (its final evaluation).
    """
    from .synthdata import with_folds

    records = []
    for r in range(repeats):
        folded = with_folds(split, k, repeat_seed(seed, r))
        for f in range(k):
            try:
                rec = runner(folded, f, r)
            except Exception as exc:
                raise CrossValidationError(f, r, exc) from exc
            records.append(rec)
    records.sort(key=lambda rec: (rec.repeat, rec.fold))
    return records, summarize(records)


# --- CSV persistence ------------------------------------------------------------

def append_records(path, records: list) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(CSV_FIELDS)
        for rec in records:
            row = asdict(rec)
            row["reward"] = "" if rec.reward is None else repr(float(rec.reward))
            for key in ("f1", "sensitivity", "fps_per_image", "labeled_fraction"):
                row[key] = repr(float(row[key]))
            w.writerow([row[k] for k in CSV_FIELDS])


def read_records(path) -> list:
    out = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_FIELDS:
            raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
        for row in reader:
            out.append(MetricsRecord(
                run_id=row["run_id"], method=row["method"],
                labeled_fraction=float(row["labeled_fraction"]),
                repeat=int(row["repeat"]), fold=int(row["fold"]), iteration=int(row["iteration"]),
                f1=float(row["f1"]), sensitivity=float(row["sensitivity"]),
                fps_per_image=float(row["fps_per_image"]),
                reward=float(row["reward"]) if row["reward"] else None))
    return out
