"""Desk-scale benchmark drivers shared by ``scripts/`` and the acceptance suite.

``ordinal_benchmark`` fits a toy backbone, trains DiffHPE-Wrapper on top of it
and DiffHPE-2D from scratch, and compares all three on held-out clips.
``cross_domain`` runs the occlusion train/test matrix end to end through the
command-line interface.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .conditioning import toy_backbone
from .data import fit_stats, save_dataset, stack_clips, synthetic_dataset, to_model_space, with_detection_noise
from .metrics import EvalReport, mpjpe, write_table
from .model import evaluate_model, load_model
from .skeleton import load_skeleton
from .trainer import TrainConfig, fit, fit_backbone

BACKBONE = "backbone"
WRAPPER = "diffhpe_wrapper"
RAW2D = "diffhpe_2d"


@dataclass
class BenchmarkConfig:
    """One clip per synthetic track, so clip counts are also track counts.

    ``detection_noise_px`` is the std of the Gaussian error added to every 2D
    keypoint (train and test), so models see detector-like inputs.
    """

    skeleton: str = "h36m17"
    seq_len: int = 27
    train_clips: int = 200
    valid_clips: int = 25
    test_clips: int = 50
    detection_noise_px: float = 5.0
    seed: int = 0
    num_blocks: int = 4
    channels: int = 32
    time_embedding_dim: int = 128
    joint_embedding_dim: int = 16
    batch_size: int = 32
    learning_rate: float = 2e-3
    dropout: float = 0.0
    max_steps: int = 3500
    eval_every: int = 30
    eval_hypotheses: int = 3
    scheduler_patience: int = 3
    hypotheses: int = 5
    backbone_steps: int = 1500
    backbone_feat_dim: int = 16
    modes: tuple = (WRAPPER, RAW2D)

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkConfig":
        d = dict(d)
        if "modes" in d:
            d["modes"] = tuple(d["modes"])
        return cls(**d)

    def train_config(self, mode: str, **overrides) -> TrainConfig:
        return TrainConfig(
            mode=mode, batch_size=self.batch_size, learning_rate=self.learning_rate, dropout=self.dropout,
            epochs=10 ** 6, max_steps=self.max_steps, eval_every=self.eval_every,
            eval_hypotheses=self.eval_hypotheses,
            scheduler_patience=self.scheduler_patience, seed=self.seed, num_blocks=self.num_blocks,
            channels=self.channels, time_embedding_dim=self.time_embedding_dim,
            joint_embedding_dim=self.joint_embedding_dim, seq_len=self.seq_len,
            stride=self.seq_len, backbone_feat_dim=self.backbone_feat_dim, backbone_steps=self.backbone_steps,
            selection_split="valid" if self.valid_clips else "test", **overrides)


def benchmark_dataset(cfg: BenchmarkConfig):
    n = cfg.train_clips + cfg.valid_clips + cfg.test_clips
    ds = synthetic_dataset(cfg.seed, n, cfg.seq_len, load_skeleton(cfg.skeleton), test_fraction=cfg.test_clips / n,
                           valid_fraction=cfg.valid_clips / n)
    return with_detection_noise(ds, cfg.detection_noise_px, cfg.seed)


def per_clip_jensen(hypotheses, gt, root=0) -> np.ndarray:
    """Per clip: MPJPE of the mean hypothesis minus the mean per-hypothesis MPJPE (never positive)."""
    agg = hypotheses.mean(0)
    return np.array([mpjpe(agg[k], gt[k], root) - np.mean([mpjpe(h[k], gt[k], root) for h in hypotheses])
                     for k in range(gt.shape[0])])


@dataclass
class OrdinalResult:
    reports: dict
    jensen_max_gap_mm: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)

    def checks(self) -> dict:
        """Named directional outcomes; each value is a bool."""
        bb = self.reports[BACKBONE]
        out = {}
        if WRAPPER in self.reports:
            out["wrapper_mpjpe_le_backbone"] = self.reports[WRAPPER].mpjpe_mm <= bb.mpjpe_mm
        for mode in (WRAPPER, RAW2D):
            if mode in self.reports:
                rep = self.reports[mode]
                out[f"{mode}_symmetry_below_backbone"] = rep.symmetry_gap_mm < bb.symmetry_gap_mm
                out[f"{mode}_temporal_below_backbone"] = rep.temporal_std_mm < bb.temporal_std_mm
        for mode, gap in self.jensen_max_gap_mm.items():
            out[f"{mode}_aggregate_never_worse"] = gap <= 1e-9
        return out

    def to_dict(self) -> dict:
        return {"reports": {k: r.to_dict() for k, r in self.reports.items()},
                "jensen_max_gap_mm": self.jensen_max_gap_mm, "seconds": self.seconds, "checks": self.checks()}


def ordinal_benchmark(cfg: BenchmarkConfig, out_dir) -> OrdinalResult:
    """Backbone vs DiffHPE-Wrapper vs DiffHPE-2D on the synthetic benchmark.

    Writes ``reports.csv`` and ``summary.json`` plus one training directory per
    diffusion variant under ``out_dir``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    ds = benchmark_dataset(cfg)
    L = cfg.seq_len
    train = ds.clips("train", L, L)
    stats = fit_stats(train, ds.skeleton.root)
    x2d, x3d = stack_clips(train)
    _, x3d_std, _ = to_model_space(x2d, x3d, stats)
    test2d, test3d = stack_clips(ds.clips("test", L, L))

    backbone = fit_backbone(toy_backbone(ds.skeleton, cfg.seed, cfg.backbone_feat_dim), x2d, x3d_std, stats,
                            steps=cfg.backbone_steps, seed=cfg.seed, skeleton=ds.skeleton)
    reports = {}
    reports[BACKBONE], _ = evaluate_model(backbone, test2d, test3d, stats, what="backbone", model=BACKBONE)
    seconds = {BACKBONE: time.perf_counter() - t0}
    jensen = {}
    gt = test3d - test3d[..., ds.skeleton.root:ds.skeleton.root + 1, :]
    for mode in cfg.modes:
        t1 = time.perf_counter()
        res = fit(cfg.train_config(mode), ds, out / mode, backbone=backbone if mode == WRAPPER else None)
        model, model_stats, _, _ = load_model(res.checkpoint, which="best")
        rep, hyp = evaluate_model(model, test2d, test3d, model_stats, H=cfg.hypotheses, seed=cfg.seed, model=mode)
        reports[mode] = rep
        jensen[mode] = 1000.0 * float(per_clip_jensen(hyp, gt, ds.skeleton.root).max())
        seconds[mode] = time.perf_counter() - t1
    seconds["total"] = time.perf_counter() - t0
    result = OrdinalResult(reports, jensen, seconds)
    write_table(list(reports.values()), out / "reports.csv")
    (out / "summary.json").write_text(json.dumps({"config": asdict(cfg), **result.to_dict()}, indent=1) + "\n")
    return result


@dataclass
class CrossDomainConfig:
    patterns: tuple = ("none", "consecutive_frames")
    benchmark: BenchmarkConfig = field(default_factory=lambda: BenchmarkConfig(modes=(WRAPPER,), max_steps=1500))

    @classmethod
    def from_dict(cls, d: dict) -> "CrossDomainConfig":
        d = dict(d)
        return cls(tuple(d.get("patterns", cls.patterns)), BenchmarkConfig.from_dict(d.get("benchmark", {})))


def cross_domain(cfg: CrossDomainConfig, out_dir) -> Path:
    """Train one wrapper model per occlusion pattern and build the train/test matrix.

    Every stage goes through the command-line entry point, so this doubles as
    an end-to-end run of ``gen-data``-equivalent output, ``train`` and
    ``occlusion-matrix``. Returns the matrix directory.
    """
    from .cli import main

    out = Path(out_dir)
    b = cfg.benchmark
    save_dataset(benchmark_dataset(b), out / "dataset")
    checkpoints = {}
    for pattern in cfg.patterns:
        conf = b.train_config(WRAPPER).to_dict()
        conf["occlusion"] = {"pattern": pattern}
        path = out / f"train_{pattern}.json"
        path.write_text(json.dumps(conf, indent=1))
        run = out / f"run_{pattern}"
        if main(["train", "--config", str(path), "--dataset", str(out / "dataset"), "--out", str(run)]) != 0:
            raise RuntimeError(f"training with occlusion {pattern!r} failed")
        checkpoints[pattern] = str(run / "checkpoint.ckpt")
    manifest = out / "matrix.json"
    manifest.write_text(json.dumps({"dataset": str(out / "dataset"), "checkpoints": checkpoints,
                                    "test_patterns": list(cfg.patterns), "hypotheses": b.hypotheses,
                                    "seed": b.seed}, indent=1))
    if main(["occlusion-matrix", "--config", str(manifest), "--out", str(out / "matrix")]) != 0:
        raise RuntimeError("occlusion matrix failed")
    return out / "matrix"


def format_reports(reports: dict) -> str:
    lines = [f"{'model':<18}{'MPJPE':>10}{'symmetry':>10}{'temporal':>10}  (mm)"]
    for name, r in reports.items():
        r: EvalReport
        lines.append(f"{name:<18}{r.mpjpe_mm:>10.2f}{r.symmetry_gap_mm:>10.2f}{r.temporal_std_mm:>10.2f}")
    return "\n".join(lines)
