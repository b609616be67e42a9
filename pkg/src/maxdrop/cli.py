"""``maxdrop`` command line: train, compare, mask-sim, report.

Exit codes: 0 success, 2 bad input (config, image, results dir), 3 training
diverged.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import re
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as config_mod
from .config import ExperimentConfig, load_datasets
from .errors import CifarFormatError, ConfigError, TrainingDiverged
from .models import resolve_slots
from .regularizers import max_dropout_mask
from .rng import Rng
from .train import Aggregate, RunMetrics, aggregate_runs, format_cell, train_run

log = logging.getLogger("maxdrop")

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED = 0, 2, 3

KIND_LABELS = {"none": None, "dropout": "Dropout", "maxdropout": "MaxDropout"}
AUG_LABELS = {"cutout": "Cutout", "erasing": "RandomErasing"}


def run_experiment(cfg: ExperimentConfig, out_dir: Path, data_root: Optional[str] = None) -> tuple[list[RunMetrics], Aggregate]:
    """Execute ``cfg.train.runs`` seeded runs and write per-run CSV/JSON plus ``summary.json``."""
    train_set, test_set = load_datasets(cfg.dataset, data_root)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = []
    for i in range(cfg.train.runs):
        seed = cfg.train.seed + i
        log.info("%s: run %d/%d (seed %d)", cfg.name, i + 1, cfg.train.runs, seed)
        m = train_run(cfg.model, cfg.train, train_set, test_set, Rng(seed), cfg.augment, cfg.drop, seed=seed)
        (out_dir / f"run_{i:03d}.csv").write_text(m.to_csv())
        (out_dir / f"run_{i:03d}.json").write_text(m.to_json() + "\n")
        runs.append(m)
    agg = aggregate_runs(runs)
    summary = {
        "name": cfg.name,
        "label": experiment_label(cfg),
        "dataset": cfg.dataset.label(),
        "fingerprint": cfg.fingerprint(),
        "runs": len(runs),
        "mean_error": agg.mean,
        "std_error": agg.std,
        "std_formula": "population",
        "finals": agg.finals,
        "cell": agg.cell(),
        "config": cfg.to_dict(),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return runs, agg


def experiment_label(cfg: ExperimentConfig) -> str:
    """Row label in the style ``resnet-mini + MaxDropout + Cutout``."""
    kinds = sorted(set(resolve_slots(cfg.model).values()) - {"none"})
    parts = [cfg.model.family]
    parts += [KIND_LABELS[k] for k in kinds]
    if cfg.augment.cutout_enabled:
        parts.append("Cutout")
    if cfg.augment.erasing_enabled:
        parts.append("RandomErasing")
    return " + ".join(parts)


def apply_variant(cfg: ExperimentConfig, variant: str) -> ExperimentConfig:
    """Return a copy of ``cfg`` with a variant override applied.

    A variant is ``+``-separated tokens: ``none``/``dropout``/``maxdropout``
    (every slot), ``slot=kind`` (one slot), ``cutout``/``erasing`` (input
    augmentation). Example: ``maxdropout+cutout``.
    """
    data = cfg.to_dict()
    slots = dict(data["model"]["slot_assignment"])
    for token in filter(None, (t.strip() for t in variant.split("+"))):
        if token in KIND_LABELS:
            slots = {"*": token}
        elif token in AUG_LABELS:
            data["augment"][f"{token}_enabled"] = True
        elif "=" in token:
            slot, kind = token.split("=", 1)
            slots[slot.strip()] = kind.strip()
        else:
            raise ConfigError("variant", f"unknown token {token!r} in {variant!r}")
    data["model"]["slot_assignment"] = slots
    data["name"] = f"{cfg.name}/{variant}"
    return config_mod.from_dict(data)


def _variant_dir(variant: str, used: set[str]) -> str:
    base = re.sub(r"[^A-Za-z0-9_.-]+", "_", variant) or "variant"
    name, k = base, 1
    while name in used:
        k += 1
        name = f"{base}_{k}"
    used.add(name)
    return name


def comparison_table(rows: Sequence[tuple[str, Aggregate]], dataset: str, runs: int) -> str:
    lines = [
        f"| Model | {dataset} |",
        "|---|---|",
        *[f"| {label} | {agg.cell()} |" for label, agg in rows],
        "",
        f"Test error rate (%), mean ± population standard deviation over {runs} runs.",
        "",
    ]
    return "\n".join(lines)


def comparison_csv(rows: Sequence[tuple[str, str, Aggregate]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "model", "mean_error_pct", "std_error_pct", "cell"])
    for variant, label, agg in rows:
        w.writerow([variant, label, f"{100 * agg.mean:.2f}", f"{100 * agg.std:.2f}", agg.cell()])
    return buf.getvalue()


def _load_config(args) -> ExperimentConfig:
    cfg = config_mod.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
        cfg.train.validate()
    return cfg


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out or cfg.output_dir)
    _, agg = run_experiment(cfg, out, args.data_dir)
    print(f"{experiment_label(cfg)}: {agg.cell()}  ({cfg.train.runs} runs, written to {out})")
    return EXIT_OK


def cmd_compare(args) -> int:
    if len(args.variant) < 2:
        raise ConfigError("variant", "compare needs at least two --variant values")
    cfg = _load_config(args)
    variants = [(v, apply_variant(cfg, v)) for v in args.variant]
    out = Path(args.out or cfg.output_dir)
    used: set[str] = set()
    rows = []
    for variant, vcfg in variants:
        _, agg = run_experiment(vcfg, out / _variant_dir(variant, used), args.data_dir)
        rows.append((variant, experiment_label(vcfg), agg))
    table = comparison_table([(label, agg) for _, label, agg in rows], cfg.dataset.label(), cfg.train.runs)
    (out / "comparison.md").write_text(table)
    (out / "comparison.csv").write_text(comparison_csv(rows))
    print(table, end="")
    return EXIT_OK


def load_png(path) -> np.ndarray:
    """8-bit grayscale (H, W) or RGB (H, W, 3) PNG as uint8."""
    from PIL import Image

    with Image.open(path) as im:
        if im.format != "PNG":
            raise ValueError(f"{path}: not a PNG (format {im.format})")
        if im.mode not in ("L", "RGB"):
            raise ValueError(f"{path}: unsupported PNG mode {im.mode!r}; need 8-bit grayscale (L) or RGB")
        return np.asarray(im, dtype=np.uint8).copy()


def save_png(arr: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(arr.astype(np.uint8)).save(path, format="PNG")


def mask_image(img: np.ndarray, method: str, rate: float, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Treat an image as one activation tensor and return ``(masked, keep_mask)``.

    MaxDropout uses ``rate`` directly (no U(0, r) draw), so it is deterministic.
    Dropout keeps each value with probability ``1 - rate``; kept values are
    shown unscaled.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"rate must be in [0, 1), got {rate}")
    if method == "maxdropout":
        keep = max_dropout_mask(img, rate).mask.astype(bool)
    elif method == "dropout":
        keep = Rng(seed).split("mask-sim").random(img.shape) >= rate
    else:
        raise ValueError(f"unknown method {method!r}")
    return np.where(keep, img, 0).astype(np.uint8), keep


def cmd_mask_sim(args) -> int:
    try:
        img = load_png(args.image)
    except (OSError, ValueError) as exc:
        print(f"error: cannot use image: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        masked, keep = mask_image(img, args.method, args.rate, args.seed)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    out = args.out or str(Path(args.image).with_name(f"{Path(args.image).stem}_{args.method}.png"))
    save_png(masked, out)
    print(f"dropped fraction: {1.0 - keep.mean():.4f} ({int(keep.size - keep.sum())} of {keep.size} values) -> {out}")
    return EXIT_OK


def collect_summaries(root: Path) -> list[tuple[Path, dict]]:
    found = []
    for path in sorted(root.rglob("summary.json")):
        try:
            data = json.loads(path.read_text())
            row = (data["label"], data["dataset"], float(data["mean_error"]), float(data["std_error"]),
                   int(data["runs"]), data["fingerprint"])
        except (OSError, ValueError, KeyError, TypeError) as exc:
            log.warning("skipping %s: %s", path, exc)
            print(f"warning: skipping malformed summary {path}: {exc}", file=sys.stderr)
            continue
        found.append((path, dict(zip(("label", "dataset", "mean", "std", "runs", "fingerprint"), row))))
    return found


def render_report(root: Path, rows: list[tuple[Path, dict]]) -> str:
    lines = [
        "# Regularizer comparison",
        "",
        "| Experiment | Model | Dataset | Error (%) | Runs | Config |",
        "|---|---|---|---|---|---|",
    ]
    for path, r in rows:
        exp = path.parent.relative_to(root).as_posix() or "."
        lines.append(
            f"| {exp} | {r['label']} | {r['dataset']} | {format_cell(r['mean'], r['std'])} | {r['runs']} | `{r['fingerprint']}` |"
        )
    lines += ["", "Error rate in percent: mean ± population standard deviation of final test error over runs.", ""]
    return "\n".join(lines)


def cmd_report(args) -> int:
    root = Path(args.results)
    if not root.is_dir():
        print(f"error: {root} is not a directory", file=sys.stderr)
        return EXIT_INPUT
    candidates = sorted(root.rglob("summary.json"))
    if not candidates:
        print(f"error: no summary.json files under {root}", file=sys.stderr)
        return EXIT_INPUT
    rows = collect_summaries(root)
    text = render_report(root, rows)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maxdrop", description="MaxDropout experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the configured number of seeded training runs")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (default: config output_dir)")
    p.add_argument("--data-dir", help="CIFAR directory (default: $MAXDROP_DATA_DIR)")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="train several variants under identical seeds and tabulate")
    p.add_argument("--config", required=True)
    p.add_argument("--variant", action="append", default=[],
                   help="e.g. none, dropout, maxdropout, maxdropout+cutout, stage1.block1=maxdropout")
    p.add_argument("--out")
    p.add_argument("--data-dir")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("mask-sim", help="apply Dropout or MaxDropout to a PNG treated as an activation tensor")
    p.add_argument("image")
    p.add_argument("--method", choices=("dropout", "maxdropout"), default="maxdropout")
    p.add_argument("--rate", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_mask_sim)

    p = sub.add_parser("report", help="collate summary.json files into a Markdown table")
    p.add_argument("results")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (FileNotFoundError, CifarFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
