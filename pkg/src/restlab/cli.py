"""Command-line front end: one subcommand per pipeline stage.

Output layout under the output directory::

    dataset/                    PGM images and masks, manifest.txt, digest.txt
    checkpoints/f0.50/r0-f3/    seg-v1.ckpt, irl-v1.ckpt (+ irl-meta.txt, demonstrations.txt),
                                pol-v1.ckpt and the post-loop seg-<method>.ckpt
    metrics/                    <method>-f0.50-<run_id>.csv, append-only
    curves/                     supervised training curves
    runs/                       one manifest per run
    report/                     table, curve CSV and plots, overlays

Failures print one line ``restlab: error code=N kind=K: message`` to stderr.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import experiment as ex
from . import numcore as nc
from .expert_reward import ExpertRewardModel, UnusableRewardModel
from .metrics import append_records, read_records
from .report import ReportError, triptych, write_png, write_report
from .segnet import SegModel, TrainingDivergedError, predict_masks
from .synthdata import DataError, dataset_digest, load_dataset, save_dataset

log = logging.getLogger("restlab")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, kind: str, msg: str):
        super().__init__(msg)
        self.code, self.kind = code, kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_CONFIG, "usage", message)


# --- paths ------------------------------------------------------------------

class Layout:
    def __init__(self, root):
        self.root = Path(root)
        self.dataset = self.root / "dataset"
        self.metrics = self.root / "metrics"
        self.curves = self.root / "curves"
        self.runs = self.root / "runs"
        self.report = self.root / "report"

    def fold_dir(self, fraction: float, repeat: int, fold: int) -> Path:
        return self.root / "checkpoints" / f"f{fraction:.2f}" / f"r{repeat}-f{fold}"

    def stem(self, method: str, fraction: float, rid: str) -> str:
        return f"{method}-f{fraction:.2f}-{rid}"


def resolve_out(cfg: cfgmod.ExperimentConfig, cli_out: str | None) -> str:
    return cli_out or os.environ.get("REST_LAB_OUT") or cfg.output.out_dir


def load_config(args) -> cfgmod.ExperimentConfig:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.ExperimentConfig()
    cfg = cfgmod.with_overrides(cfg, args.set or [])
    out = resolve_out(cfg, args.out)
    cfg.output.out_dir = out
    return cfg.validate()


def _dataset(layout: Layout):
    if not (layout.dataset / "manifest.txt").exists():
        raise CliError(EXIT_DATA, "data", f"no dataset at {layout.dataset}; run 'restlab generate' first")
    return load_dataset(layout.dataset)


def _fractions(cfg, args) -> list:
    if args.fraction is None:
        return list(cfg.protocol.fractions)
    if args.fraction not in cfgmod.SUPPORTED_FRACTIONS:
        raise CliError(EXIT_CONFIG, "config", f"fraction must be one of {cfgmod.SUPPORTED_FRACTIONS}")
    return [args.fraction]


def _done(path: Path) -> set:
    return {(r.repeat, r.fold) for r in read_records(path)} if path.exists() else set()


def _write_manifest(layout: Layout, stem: str, cfg, method: str, fraction: float, rid: str,
                    digest: str, folds: dict, checkpoints: list) -> None:
    layout.runs.mkdir(parents=True, exist_ok=True)
    lines = [f"run_id = {rid}", f"method = {method}", f"labeled_fraction = {fraction!r}",
             f"master_seed = {cfg.protocol.master_seed}", f"dataset_digest = {digest}"]
    for (r, f), ids in sorted(folds.items()):
        lines.append(f"fold r{r}-f{f} seed={ex.fold_seed(cfg.protocol.master_seed, r, f)} "
                     f"heldout={','.join(map(str, ids))}")
    lines += [f"checkpoint = {p}" for p in checkpoints]
    lines += ["", "# config snapshot", cfgmod.serialize(cfg, docs=False)]
    (layout.runs / f"{stem}.txt").write_text("\n".join(lines) + "\n")


def _folds(cfg):
    for r in range(cfg.protocol.repeats):
        for f in range(cfg.protocol.k):
            yield r, f


def load_seg(cfg, path: Path) -> SegModel:
    if not path.exists():
        raise CliError(EXIT_DATA, "missing-checkpoint",
                       f"{path} not found; run 'restlab train-supervised' for this fraction first")
    seg = SegModel(hyper=cfg.seg)
    seg.load_params(path)
    return seg


def save_reward(model: ExpertRewardModel, fold_dir: Path) -> None:
    model.save(fold_dir / "irl-v1.ckpt")
    (fold_dir / "irl-meta.txt").write_text(
        f"threshold = {model.threshold!r}\nheldout_accuracy = {model.heldout_accuracy!r}\n")


def load_reward(fold_dir: Path) -> ExpertRewardModel:
    path = fold_dir / "irl-v1.ckpt"
    if not path.exists():
        raise CliError(EXIT_DATA, "missing-checkpoint", f"{path} not found; run 'restlab train-irl' first")
    model = ExpertRewardModel()
    model.load_params(path)
    meta = dict(line.split(" = ", 1) for line in (fold_dir / "irl-meta.txt").read_text().splitlines() if line)
    model.threshold = float(meta["threshold"])
    model.heldout_accuracy = float(meta["heldout_accuracy"])
    model.freeze()
    return model


# --- subcommands -------------------------------------------------------------

def cmd_config(cfg, layout, args) -> None:
    print(cfgmod.serialize(cfgmod.ExperimentConfig() if args.defaults else cfg), end="")


def cmd_generate(cfg, layout, args) -> None:
    split = ex.build_dataset(cfg)
    save_dataset(split, layout.dataset)
    digest = dataset_digest(split)
    (layout.dataset / "digest.txt").write_text(digest + "\n")
    print(digest)


def cmd_train_supervised(cfg, layout, args) -> None:
    fractions = _fractions(cfg, args)
    full = _dataset(layout)
    digest = dataset_digest(full)
    for frac in fractions:
        rid = ex.run_id(cfg, "supervised", frac)
        stem = layout.stem("supervised", frac, rid)
        path = layout.metrics / f"{stem}.csv"
        layout.metrics.mkdir(parents=True, exist_ok=True)
        layout.curves.mkdir(parents=True, exist_ok=True)
        done, folds, ckpts = _done(path), {}, []
        for r, f in _folds(cfg):
            split = ex.fraction_split(full, cfg, frac, r)
            fold_dir = layout.fold_dir(frac, r, f)
            folds[(r, f)] = split.folds[f]
            ckpts.append(fold_dir / "seg-v1.ckpt")
            if (r, f) in done:
                continue
            result = ex.train_environment(cfg, split, f, r)
            fold_dir.mkdir(parents=True, exist_ok=True)
            result.model.save(ckpts[-1])
            (fold_dir / "heldout.txt").write_text(" ".join(map(str, split.folds[f])) + "\n")
            curve_path = layout.curves / f"{stem}.csv"
            new = not curve_path.exists()
            with curve_path.open("a") as fh:
                if new:
                    fh.write("repeat,fold,epoch,loss,val_f1\n")
                for epoch, loss, f1 in result.curve:
                    fh.write(f"{r},{f},{epoch},{loss!r},{f1!r}\n")
            append_records(path, [ex.supervised_record(cfg, result.model, split, f, r, rid)])
            log.info("supervised f=%.2f r%d-f%d done", frac, r, f)
        _write_manifest(layout, stem, cfg, "supervised", frac, rid, digest, folds, ckpts)


def cmd_train_irl(cfg, layout, args) -> None:
    fractions = _fractions(cfg, args)
    full = _dataset(layout)
    for frac in fractions:
        for r, f in _folds(cfg):
            split = ex.fraction_split(full, cfg, frac, r)
            fold_dir = layout.fold_dir(frac, r, f)
            seg = load_seg(cfg, fold_dir / "seg-v1.ckpt")
            model, demos = ex.train_reward(cfg, seg, split, f, r)
            save_reward(model, fold_dir)
            (fold_dir / "demonstrations.txt").write_text("\n".join(demos.manifest_lines()) + "\n")
            log.info("expert reward f=%.2f r%d-f%d held-out accuracy %.3f", frac, r, f,
                     model.heldout_accuracy)


def _run_loop(cfg, layout, args, method: str) -> None:
    fractions = _fractions(cfg, args)
    full = _dataset(layout)
    digest = dataset_digest(full)
    halted = []
    for frac in fractions:
        rid = ex.run_id(cfg, method, frac)
        stem = layout.stem(method, frac, rid)
        path = layout.metrics / f"{stem}.csv"
        layout.metrics.mkdir(parents=True, exist_ok=True)
        done, folds, ckpts = _done(path), {}, []
        for r, f in _folds(cfg):
            split = ex.fraction_split(full, cfg, frac, r)
            fold_dir = layout.fold_dir(frac, r, f)
            folds[(r, f)] = split.folds[f]
            ckpts.append(fold_dir / f"seg-{method}.ckpt")
            if (r, f) in done:
                continue
            seg = load_seg(cfg, fold_dir / "seg-v1.ckpt")
            reward = load_reward(fold_dir) if method == "rest" else None
            out_seg, history, pol = ex.run_method(cfg, method, seg, split, f, r, rid, reward)
            out_seg.save(ckpts[-1])
            if pol is not None:
                pol.save(fold_dir / "pol-v1.ckpt")
            append_records(path, history.records)
            if history.halted:
                halted.append(f"{method} f={frac:.2f} r{r}-f{f}: {history.halted}")
        if method == "rest":
            ckpts += [layout.fold_dir(frac, r, f) / "pol-v1.ckpt" for r, f in _folds(cfg)]
        _write_manifest(layout, stem, cfg, method, frac, rid, digest, folds, ckpts)
    if halted:
        raise CliError(EXIT_NUMERIC, "numerical", "; ".join(halted))


def cmd_rest(cfg, layout, args) -> None:
    _run_loop(cfg, layout, args, "rest")


def cmd_baseline(cfg, layout, args) -> None:
    _run_loop(cfg, layout, args, args.method)


def cmd_report(cfg, layout, args) -> None:
    metrics_dir = Path(args.metrics_dir) if args.metrics_dir else layout.metrics
    written = write_report(metrics_dir, layout.report)
    ids = args.ids if args.ids is not None else list(cfg.output.overlay_ids)
    if ids:
        written.update(write_overlays(cfg, layout, ids))
    table = written.get("table")
    if table is not None:
        print(table.read_text(), end="")
    for name, path in sorted(written.items()):
        print(f"{name}: {path}")


def write_overlays(cfg, layout: Layout, ids) -> dict:
    """GT | pre | post triptychs for labeled ids, from the repeat-0 fold that holds each out."""
    full = _dataset(layout)
    by_id = full.by_id()
    written = {}
    for frac_dir in sorted((layout.root / "checkpoints").glob("f*")):
        frac = float(frac_dir.name[1:])
        for fold_dir in sorted(frac_dir.glob("r0-f*")):
            held = (fold_dir / "heldout.txt")
            post_path = fold_dir / "seg-rest.ckpt"
            if not held.exists() or not post_path.exists():
                continue
            wanted = [i for i in map(int, held.read_text().split()) if i in ids and i in by_id]
            if not wanted:
                continue
            pre, post = load_seg(cfg, fold_dir / "seg-v1.ckpt"), load_seg(cfg, post_path)
            images = [by_id[i][0] for i in wanted]
            for i, img, a, b in zip(wanted, images, predict_masks(pre, images), predict_masks(post, images)):
                path = layout.report / f"overlay-f{frac:.2f}-{i}.png"
                write_png(path, triptych(img.pixels, by_id[i][1].pixels, a, b))
                written[f"overlay-{frac:.2f}-{i}"] = path
    return written


COMMANDS = {
    "config": cmd_config, "generate": cmd_generate, "train-supervised": cmd_train_supervised,
    "train-irl": cmd_train_irl, "rest": cmd_rest, "baseline": cmd_baseline, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file (defaults when omitted)")
    common.add_argument("--out", help="output directory (overrides REST_LAB_OUT and the config)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")
    frac = argparse.ArgumentParser(add_help=False)
    frac.add_argument("--fraction", type=float, help="one labeled fraction (default: all configured)")

    p = _Parser(prog="restlab", description="reinforced self-training experiments on synthetic data")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    c = sub.add_parser("config", parents=[common], help="print the configuration")
    c.add_argument("--defaults", action="store_true", help="print the documented defaults")
    sub.add_parser("generate", parents=[common], help="write the synthetic dataset")
    sub.add_parser("train-supervised", parents=[common, frac], help="cross-validated supervised training")
    sub.add_parser("train-irl", parents=[common, frac], help="train the expert reward per fold")
    sub.add_parser("rest", parents=[common, frac], help="run the self-training loop per fold")
    b = sub.add_parser("baseline", parents=[common, frac], help="run a thresholding baseline per fold")
    b.add_argument("--method", choices=("self-train", "neg-mine"), required=True)
    r = sub.add_parser("report", parents=[common], help="summarize the metrics directory")
    r.add_argument("--metrics-dir", help="defaults to <out>/metrics")
    r.add_argument("--ids", type=int, nargs="*", help="labeled ids to render as overlays")
    return p


def _classify(exc: BaseException) -> tuple[int, str]:
    if isinstance(exc, CliError):
        return exc.code, exc.kind
    if isinstance(exc, cfgmod.ConfigError):
        return EXIT_CONFIG, "config"
    if isinstance(exc, (TrainingDivergedError, UnusableRewardModel, FloatingPointError)):
        return EXIT_NUMERIC, "numerical"
    if isinstance(exc, (DataError, nc.CheckpointError, ReportError, OSError)):
        return EXIT_DATA, "data"
    return 1, "internal"


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args)
        layout = Layout(cfg.output.out_dir)
        np.seterr(over="ignore", under="ignore")
        COMMANDS[args.command](cfg, layout, args)
    except Exception as exc:  # every failure becomes one parsable line
        code, kind = _classify(exc)
        text = " ".join(str(exc).split()) or type(exc).__name__
        print(f"restlab: error code={code} kind={kind}: {text}", file=sys.stderr)
        if code == 1:
            log.debug("internal error", exc_info=True)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
