"""Command-line entry point: ``diffhpe <command> ...``.

Commands: gen-data, train, eval, occlusion-matrix, sample. Every command
accepts ``--config`` (a JSON object whose keys mirror the long flag names
with underscores); flags given on the command line override file values.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .data import (DatasetFormatError, SchemaError, load_external, save_dataset, stack_clips, synthetic_dataset,
                   with_detection_noise)
from .metrics import METRICS, difference_matrix, matrix_from_table, write_table
from .occlusion import PATTERNS, OcclusionSpec
from .skeleton import load_skeleton

log = logging.getLogger("diffhpe")

GEN_DEFAULTS = dict(seed=0, num_tracks=50, track_length=135, skeleton="h36m17", test_fraction=0.2,
                    valid_fraction=0.0, detection_noise=0.0, out=None)
EVAL_DEFAULTS = dict(checkpoint=None, dataset=None, pattern="none", hypotheses=5, model="diffusion", split="test",
                     seq_len=None, seed=0, out=None, skeleton=None)
SAMPLE_DEFAULTS = dict(checkpoint=None, dataset=None, pattern="none", hypotheses=5, split="test", seq_len=None,
                       num_clips=8, seed=0, out=None)
MATRIX_DEFAULTS = dict(dataset=None, test_patterns=None, hypotheses=5, split="test", seq_len=None, seed=0,
                       out=None, methods=None, checkpoints=None, baseline="backbone", candidate="diffusion",
                       metrics=list(METRICS))


class UsageError(ValueError):
    """Invalid combination of command-line / config values."""


def _merge(args, defaults: dict) -> dict:
    """Defaults <- config file <- explicitly given flags."""
    opts = dict(defaults)
    if getattr(args, "config", None):
        opts.update(json.loads(Path(args.config).read_text()))
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            opts[k] = v
    return opts


def _require(opts, *keys):
    for k in keys:
        if opts.get(k) in (None, ""):
            raise UsageError(f"--{k.replace('_', '-')} is required (flag or config key)")


def _existing(path, what) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _load_dataset(path, skeleton=None):
    p = _existing(path, "dataset")
    return load_external(p, "npz" if p.suffix == ".npz" else "diffhpe", skeleton)


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# -- commands ---------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    opts = _merge(args, GEN_DEFAULTS)
    _require(opts, "out")
    if opts["num_tracks"] < 1:
        raise UsageError("--num-tracks must be at least 1")
    if opts["track_length"] < 1:
        raise UsageError("--track-length must be at least 1")
    ds = synthetic_dataset(opts["seed"], opts["num_tracks"], opts["track_length"], load_skeleton(opts["skeleton"]),
                           test_fraction=opts["test_fraction"], valid_fraction=opts["valid_fraction"])
    ds = with_detection_noise(ds, float(opts["detection_noise"]), opts["seed"])
    out = save_dataset(ds, opts["out"])
    print(f"wrote {len(ds.tracks)} tracks to {out}")
    return 0


def cmd_train(args) -> int:
    from .trainer import TrainConfig, fit

    base = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.preset:
        base = {**TrainConfig.preset(args.preset).to_dict(), **base}
    overrides = {"dataset": args.dataset, "out_dir": args.out, "seed": args.seed, "epochs": args.epochs,
                 "max_steps": args.max_steps}
    base.update({k: v for k, v in overrides.items() if v is not None})
    if args.pattern is not None:
        # p and n fall back to the new pattern's defaults
        base["occlusion"] = {"pattern": args.pattern}
    cfg = TrainConfig.from_dict(base)
    _require(cfg.to_dict(), "dataset", "out_dir")
    ds = _load_dataset(cfg.dataset)
    out = Path(cfg.out_dir)
    resume = _existing(args.resume, "checkpoint") if args.resume else None
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    res = fit(cfg, ds, out, resume=resume)
    print(f"best eval MPJPE {res.best_mpjpe_mm:.2f} mm at epoch {res.best_epoch}; checkpoint {res.checkpoint}")
    return 0


def _load_for_eval(path, what):
    """(model-or-backbone, stats, meta) from a diffusion or backbone checkpoint."""
    from .model import load_backbone, load_model

    arrays, meta = ckpt_io.load_arrays(_existing(path, "checkpoint"))
    if meta.get("kind") == "backbone":
        if what != "backbone":
            raise UsageError(f"{path} holds only a backbone; use --model backbone")
        bb, stats = load_backbone(path)
        return bb, stats, meta
    model, stats, _, meta = load_model(path, which="best")
    return model, stats, meta


def _eval_clips(ds, split, seq_len):
    clips = ds.clips(split, seq_len, seq_len)
    if not clips:
        raise UsageError(f"split {split!r} has no clips of length {seq_len}")
    return stack_clips(clips)


def _seq_len(opts, meta):
    if opts.get("seq_len"):
        return int(opts["seq_len"])
    return int((meta or {}).get("config", {}).get("seq_len", 27))


def evaluate_cell(source, stats, meta, ds, pattern, opts, **labels):
    from .model import evaluate_model

    x2d, x3d = _eval_clips(ds, opts["split"], _seq_len(opts, meta))
    return evaluate_model(source, x2d, x3d, stats, H=int(opts["hypotheses"]), seed=int(opts["seed"]),
                          occlusion=pattern, what=labels.pop("what"), skeleton=ds.skeleton, **labels)


def cmd_eval(args) -> int:
    opts = _merge(args, EVAL_DEFAULTS)
    _require(opts, "dataset", "out")
    what = opts["model"]
    if what == "oracle":
        source, stats, meta = None, None, None
        skel = load_skeleton(opts["skeleton"]) if opts.get("skeleton") else None
        ds = _load_dataset(opts["dataset"], skel)
    else:
        _require(opts, "checkpoint")
        source, stats, meta = _load_for_eval(opts["checkpoint"], what)
        ds = _load_dataset(opts["dataset"])
    train_pattern = OcclusionSpec.from_value((meta or {}).get("config", {}).get("occlusion")).pattern
    report, _ = evaluate_cell(source, stats, meta, ds, opts["pattern"], opts, what=what, model=what,
                              train_pattern=train_pattern if meta else "")
    out = Path(opts["out"])
    write_table([report], out / "eval.csv")
    _write_json(out / "eval.json", report.to_dict())
    print(json.dumps(report.row()))
    return 0


def _matrix_methods(opts):
    """{method name: (prediction source, {train pattern: checkpoint})}."""
    if opts.get("methods"):
        return {name: (m["source"], m["checkpoints"]) for name, m in opts["methods"].items()}
    if not opts.get("checkpoints"):
        raise UsageError("the manifest needs 'checkpoints' or 'methods'")
    return {"backbone": ("backbone", opts["checkpoints"]), "diffusion": ("diffusion", opts["checkpoints"])}


def _heatmap(matrix, rows, cols, title, path: Path, diverging=False):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(1.6 + 1.3 * len(cols), 1.2 + 1.0 * len(rows)))
    if diverging:
        lim = float(np.max(np.abs(matrix))) or 1.0
        im = ax.imshow(matrix, cmap="RdBu", vmin=-lim, vmax=lim)
    else:
        im = ax.imshow(matrix, cmap="viridis")
    ax.set_xticks(range(len(cols)), cols, rotation=30, ha="right")
    ax.set_yticks(range(len(rows)), rows)
    ax.set_xlabel("test occlusion")
    ax.set_ylabel("train occlusion")
    ax.set_title(title)
    for i in range(len(rows)):
        for j in range(len(cols)):
            ax.text(j, i, f"{matrix[i, j]:.1f}", ha="center", va="center", color="black",
                    bbox=dict(facecolor="white", alpha=0.6, lw=0))
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def _write_matrix(path: Path, matrix, rows, cols):
    lines = ["train\\test," + ",".join(cols)]
    lines += [f"{r}," + ",".join(repr(float(v)) for v in matrix[i]) for i, r in enumerate(rows)]
    path.write_text("\n".join(lines) + "\n")


def cmd_occlusion_matrix(args) -> int:
    opts = _merge(args, MATRIX_DEFAULTS)
    if args.pattern:
        opts["test_patterns"] = args.pattern
    _require(opts, "dataset", "out")
    methods = _matrix_methods(opts)
    train_patterns = list(next(iter(methods.values()))[1])
    for name, (_, cks) in methods.items():
        if list(cks) != train_patterns:
            raise UsageError(f"method {name!r} lists train patterns {list(cks)}, expected {train_patterns}")
    test_patterns = list(opts["test_patterns"] or train_patterns)
    for p in train_patterns + test_patterns:
        if p not in PATTERNS:
            raise UsageError(f"unknown occlusion pattern {p!r}")
    ds = _load_dataset(opts["dataset"])
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)

    reports = []
    for name, (what, cks) in methods.items():
        for tp in train_patterns:
            source, stats, meta = _load_for_eval(cks[tp], what)
            for sp in test_patterns:
                rep, _ = evaluate_cell(source, stats, meta, ds, sp, opts, what=what, model=name, train_pattern=tp)
                log.info("%s train=%s test=%s MPJPE %.2f mm", name, tp, sp, rep.mpjpe_mm)
                reports.append(rep)
    rows = [r.row() for r in reports]
    write_table(reports, out / "reports.csv")
    with (out / "reports.jsonl").open("w") as f:
        for r in reports:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")

    for metric in opts["metrics"]:
        mats = {}
        for name in methods:
            mats[name] = matrix_from_table(rows, name, train_patterns, test_patterns, metric)
            _write_matrix(out / f"matrix_{name}_{metric}.csv", mats[name], train_patterns, test_patterns)
            _heatmap(mats[name], train_patterns, test_patterns, f"{name}: {metric}",
                     out / f"heatmap_{name}_{metric}.png")
        base, cand = opts["baseline"], opts["candidate"]
        if base in mats and cand in mats:
            diff = difference_matrix(mats[base], mats[cand])
            _write_matrix(out / f"difference_{metric}.csv", diff, train_patterns, test_patterns)
            _heatmap(diff, train_patterns, test_patterns, f"{base} - {cand}: {metric} (positive favours {cand})",
                     out / f"difference_{metric}.png", diverging=True)
    print(f"wrote {len(reports)} reports and matrices to {out}")
    return 0


def cmd_sample(args) -> int:
    from .model import occlude, predict

    opts = _merge(args, SAMPLE_DEFAULTS)
    _require(opts, "checkpoint", "dataset", "out")
    model, stats, meta = _load_for_eval(opts["checkpoint"], "diffusion")
    ds = _load_dataset(opts["dataset"])
    x2d, x3d = _eval_clips(ds, opts["split"], _seq_len(opts, meta))
    n = int(opts["num_clips"])
    x2d, x3d = x2d[:n], x3d[:n]
    xin = occlude(x2d, opts["pattern"], int(opts["seed"]), ds.skeleton)
    hyp = predict(model, xin, stats, H=int(opts["hypotheses"]), seed=int(opts["seed"]))
    root = ds.skeleton.root
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "hypotheses.npy", hyp)
    np.save(out / "aggregate.npy", hyp.mean(axis=0))
    np.save(out / "ground_truth.npy", x3d - x3d[..., root:root + 1, :])
    np.save(out / "inputs_2d.npy", xin)
    print(f"wrote {hyp.shape[0]} hypotheses for {hyp.shape[1]} clips to {out}")
    return 0


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffhpe", description="Diffusion-based 2D-to-3D pose lifting.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *names):
        sp.add_argument("--config", help="JSON file with option values")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        if "dataset" in names:
            sp.add_argument("--dataset", help="dataset directory (or .npz file)")
        if "checkpoint" in names:
            sp.add_argument("--checkpoint")
        if "hypotheses" in names:
            sp.add_argument("--hypotheses", type=int, help="number of sampled hypotheses H")

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(g)
    g.add_argument("--num-tracks", type=int)
    g.add_argument("--track-length", type=int)
    g.add_argument("--skeleton", help="bundled skeleton name or JSON path")
    g.add_argument("--test-fraction", type=float)
    g.add_argument("--valid-fraction", type=float)
    g.add_argument("--detection-noise", type=float, help="std (pixels) of Gaussian error added to the 2D keypoints")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a diffusion model")
    common(t, "dataset")
    t.add_argument("--preset", choices=["diffhpe_2d", "diffhpe_wrapper"], help="start from the stock hyperparameters")
    t.add_argument("--pattern", choices=PATTERNS, help="training-time occlusion pattern")
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e, "dataset", "checkpoint", "hypotheses")
    e.add_argument("--pattern", choices=PATTERNS, help="test-time occlusion pattern")
    e.add_argument("--model", choices=["diffusion", "backbone", "oracle"], help="prediction source")
    e.add_argument("--split")
    e.add_argument("--seq-len", type=int)
    e.add_argument("--skeleton", help="skeleton for --model oracle (defaults to the dataset's)")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("occlusion-matrix", help="cross-domain occlusion tables and heatmaps")
    common(m, "dataset", "hypotheses")
    m.add_argument("--pattern", nargs="+", choices=PATTERNS, help="test-time patterns (default: the train patterns)")
    m.add_argument("--split")
    m.add_argument("--seq-len", type=int)
    m.set_defaults(func=cmd_occlusion_matrix)

    s = sub.add_parser("sample", help="dump sampled hypotheses for a few clips")
    common(s, "dataset", "checkpoint", "hypotheses")
    s.add_argument("--pattern", choices=PATTERNS)
    s.add_argument("--split")
    s.add_argument("--seq-len", type=int)
    s.add_argument("--num-clips", type=int)
    s.set_defaults(func=cmd_sample)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        parser.error(str(e))
    except (ValueError, KeyError, OSError, DatasetFormatError, SchemaError, ckpt_io.CheckpointError,
            FloatingPointError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
