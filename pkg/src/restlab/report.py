"""Summaries of a metrics directory: the pre/post table, convergence curves,
overlay triptychs, and the small rasterizer they are drawn with.
"""
from __future__ import annotations

import math
import struct
import zlib
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .metrics import read_records, welch

TABLE_METRICS = ("f1", "sensitivity", "fps_per_image")
CURVE_METHODS = ("rest", "self-train", "neg-mine")
METHOD_COLORS = {"rest": (200, 30, 30), "self-train": (30, 90, 200), "neg-mine": (20, 150, 60)}


class ReportError(RuntimeError):
    pass


# --- loading ----------------------------------------------------------------

def load_metrics(metrics_dir) -> list:
    """Every record of every CSV in ``metrics_dir``, in a stable order."""
    records = []
    for path in sorted(Path(metrics_dir).glob("*.csv")):
        records.extend(read_records(path))
    return records


def final_records(records: list) -> list:
    """The last iteration of each (run_id, repeat, fold)."""
    last: dict = {}
    for r in records:
        key = (r.run_id, r.repeat, r.fold)
        if key not in last or r.iteration > last[key].iteration:
            last[key] = r
    return sorted(last.values(), key=lambda r: (r.labeled_fraction, r.method, r.repeat, r.fold))


def _by(records: list, method: str, fraction: float) -> list:
    return [r for r in records if r.method == method and abs(r.labeled_fraction - fraction) < 1e-9]


# --- table ------------------------------------------------------------------

def report_p(a, b) -> float:
    """Welch p-value; identical samples give 1.0 and degenerate ones NaN."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape == b.shape and np.array_equal(a, b):
        return 1.0
    try:
        return welch(a, b).p
    except ValueError:
        return float("nan")


@dataclass
class TableRow:
    fraction: float
    n: int
    pre_mean: dict
    pre_sd: dict
    post_mean: dict
    post_sd: dict
    p: dict


def _stats(recs: list, metric: str) -> tuple[float, float]:
    v = np.array([getattr(r, metric) for r in recs], dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def _check_folds(fraction: float, pre: list, post: list) -> None:
    keys_pre = {(r.repeat, r.fold) for r in pre}
    keys_post = {(r.repeat, r.fold) for r in post}
    if keys_pre != keys_post:
        runs = sorted({r.run_id for r in pre} | {r.run_id for r in post})
        raise ReportError(f"fraction {fraction}: fold counts differ ({len(keys_pre)} pre vs "
                          f"{len(keys_post)} post) across runs {', '.join(runs)}")


def build_table(records: list, pre_method: str = "supervised", post_method: str = "rest") -> list:
    """One row per labeled fraction holding both methods, sorted by fraction."""
    finals = final_records(records)
    fractions = sorted({r.labeled_fraction for r in finals if r.method == post_method})
    rows = []
    for frac in fractions:
        pre, post = _by(finals, pre_method, frac), _by(finals, post_method, frac)
        if not pre:
            # the loop's own starting evaluation is the supervised model
            pre = [r for r in records if r.method == post_method and r.iteration == 0
                   and abs(r.labeled_fraction - frac) < 1e-9]
        _check_folds(frac, pre, post)
        pre.sort(key=lambda r: (r.repeat, r.fold))
        post.sort(key=lambda r: (r.repeat, r.fold))
        row = TableRow(frac, len(post), {}, {}, {}, {}, {})
        for m in TABLE_METRICS:
            row.pre_mean[m], row.pre_sd[m] = _stats(pre, m)
            row.post_mean[m], row.post_sd[m] = _stats(post, m)
            row.p[m] = report_p([getattr(r, m) for r in pre], [getattr(r, m) for r in post])
        rows.append(row)
    return rows


def _fmt_p(p: float) -> str:
    if math.isnan(p):
        return "n/a"
    return "<0.001" if p < 1e-3 else f"{p:.3f}"


def format_table(rows: list) -> str:
    head = ("fraction", "n", "F1 pre", "F1 post", "p(F1)", "Sens pre", "Sens post", "p(Sens)",
            "FPs/img pre", "FPs/img post", "p(FPs)")
    lines = [" | ".join(head)]
    for r in rows:
        cells = [f"{r.fraction:.2f}", str(r.n)]
        for m in TABLE_METRICS:
            cells += [f"{r.pre_mean[m]:.3f} ± {r.pre_sd[m]:.3f}",
                      f"{r.post_mean[m]:.3f} ± {r.post_sd[m]:.3f}", _fmt_p(r.p[m])]
        lines.append(" | ".join(cells))
    return "\n".join(lines)


def table_csv(rows: list) -> str:
    cols = ["fraction", "n"]
    for m in TABLE_METRICS:
        cols += [f"{m}_pre_mean", f"{m}_pre_sd", f"{m}_post_mean", f"{m}_post_sd", f"{m}_p"]
    lines = [",".join(cols)]
    for r in rows:
        vals = [repr(r.fraction), str(r.n)]
        for m in TABLE_METRICS:
            vals += [repr(v) for v in (r.pre_mean[m], r.pre_sd[m], r.post_mean[m], r.post_sd[m], r.p[m])]
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


# --- curves ------------------------------------------------------------------

def curve_data(records: list, methods=CURVE_METHODS) -> dict:
    """{(fraction, method): [(iteration, mean f1), ...]} averaged over folds."""
    acc: dict = defaultdict(lambda: defaultdict(list))
    for r in records:
        if r.method in methods:
            acc[(r.labeled_fraction, r.method)][r.iteration].append(r.f1)
    return {key: [(it, float(np.mean(v))) for it, v in sorted(per.items())]
            for key, per in sorted(acc.items())}


def curves_csv(curves: dict) -> str:
    lines = ["labeled_fraction,method,iteration,mean_f1"]
    for (frac, method), pts in curves.items():
        lines += [f"{frac!r},{method},{it},{f1!r}" for it, f1 in pts]
    return "\n".join(lines) + "\n"


class Canvas:
    """An RGB raster with just enough drawing for line plots and overlays."""

    def __init__(self, height: int, width: int, background=(255, 255, 255)):
        self.pixels = np.empty((height, width, 3), np.uint8)
        self.pixels[:] = background

    @property
    def shape(self):
        return self.pixels.shape[:2]

    def fill_rect(self, y0: int, x0: int, y1: int, x1: int, color) -> None:
        h, w = self.shape
        self.pixels[max(0, y0):min(h, y1), max(0, x0):min(w, x1)] = color

    def line(self, y0: float, x0: float, y1: float, x1: float, color, thickness: int = 1) -> None:
        n = int(max(abs(y1 - y0), abs(x1 - x0))) + 1
        ys = np.rint(np.linspace(y0, y1, n)).astype(int)
        xs = np.rint(np.linspace(x0, x1, n)).astype(int)
        r = thickness // 2
        for y, x in zip(ys, xs):
            self.fill_rect(y - r, x - r, y + r + 1, x + r + 1, color)

    def blit(self, y: int, x: int, rgb: np.ndarray) -> None:
        h, w = rgb.shape[:2]
        self.pixels[y:y + h, x:x + w] = rgb


def write_ppm(path, rgb: np.ndarray) -> None:
    h, w = rgb.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, np.uint8).tobytes())


def encode_png(rgb: np.ndarray) -> bytes:
    h, w = rgb.shape[:2]
    raw = b"".join(b"\x00" + np.ascontiguousarray(rgb[y], np.uint8).tobytes() for y in range(h))

    def chunk(tag: bytes, body: bytes) -> bytes:
        return struct.pack(">I", len(body)) + tag + body + struct.pack(">I", zlib.crc32(tag + body) & 0xFFFFFFFF)

    header = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    return b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", header) + chunk(b"IDAT", zlib.compress(raw, 9)) + chunk(b"IEND", b"")


def write_png(path, rgb: np.ndarray) -> None:
    Path(path).write_bytes(encode_png(rgb))


def plot_curves(curves: dict, fraction: float, height: int = 240, width: int = 360) -> np.ndarray:
    """Mean F1 against iteration for each method at one fraction; y spans [0, 1]."""
    c = Canvas(height, width)
    m = 24
    c.line(height - m, m, height - m, width - m, (0, 0, 0))
    c.line(m, m, height - m, m, (0, 0, 0))
    for k in range(1, 5):
        y = height - m - k * (height - 2 * m) / 4
        c.line(y, m, y, width - m, (225, 225, 225))
    series = {meth: pts for (frac, meth), pts in curves.items() if abs(frac - fraction) < 1e-9}
    last = max((pts[-1][0] for pts in series.values() if pts), default=1) or 1
    for row, (meth, pts) in enumerate(sorted(series.items())):
        color = METHOD_COLORS.get(meth, (90, 90, 90))
        xy = [(height - m - f1 * (height - 2 * m), m + it / last * (width - 2 * m)) for it, f1 in pts]
        for (y0, x0), (y1, x1) in zip(xy, xy[1:]):
            c.line(y0, x0, y1, x1, color, thickness=2)
        # legend: one swatch per method, top right, in name order
        c.fill_rect(m + 4 + 12 * row, width - m - 14, m + 12 + 12 * row, width - m - 4, color)
    return c.pixels


# --- overlays ----------------------------------------------------------------

def overlay(image: np.ndarray, mask: np.ndarray, color=(230, 40, 40), alpha: float = 0.45) -> np.ndarray:
    """Grayscale image with the mask tinted in ``color``."""
    g = np.clip(np.asarray(image, np.float64), 0, 1) * 255
    rgb = np.repeat(g[..., None], 3, axis=2)
    sel = np.asarray(mask) > 0
    rgb[sel] = (1 - alpha) * rgb[sel] + alpha * np.asarray(color, np.float64)
    return np.rint(rgb).astype(np.uint8)


def triptych(image: np.ndarray, gt: np.ndarray, pre: np.ndarray, post: np.ndarray,
             scale: int = 4, gap: int = 4) -> np.ndarray:
    """Ground truth | before | after, side by side, each upscaled by ``scale``."""
    panels = [overlay(image, gt, (40, 200, 40)), overlay(image, pre), overlay(image, post)]
    panels = [np.kron(p, np.ones((scale, scale, 1), np.uint8)) for p in panels]
    h, w = panels[0].shape[:2]
    c = Canvas(h, 3 * w + 2 * gap)
    for i, p in enumerate(panels):
        c.blit(0, i * (w + gap), p)
    return c.pixels


def write_report(metrics_dir, out_dir) -> dict:
    """Table and curves for a metrics directory; returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = load_metrics(metrics_dir)
    if not records:
        raise ReportError(f"no metrics records under {metrics_dir}")
    written = {}
    rows = build_table(records)
    if rows:
        (out / "table.txt").write_text(format_table(rows) + "\n")
        (out / "table.csv").write_text(table_csv(rows))
        written["table"] = out / "table.txt"
    curves = curve_data(records)
    (out / "curves.csv").write_text(curves_csv(curves))
    written["curves"] = out / "curves.csv"
    for frac in sorted({f for f, _ in curves}):
        path = out / f"curves-{frac:.2f}.png"
        write_png(path, plot_curves(curves, frac))
        written[f"plot-{frac:.2f}"] = path
    return written

