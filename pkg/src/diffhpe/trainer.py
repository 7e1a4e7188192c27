"""Training: config, the epsilon-regression step, backbone pre-fitting and the
epoch loop with plateau scheduling, evaluation and checkpointing."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from .conditioning import FrozenBackboneError, LiftingBackbone, normalize_2d, toy_backbone
from .data import PoseDataset, fit_stats, stack_clips, to_model_space
from .diffusion import forward_sample, make_schedule
from .model import DiffHPE, build_model, evaluate_model, load_model, save_model
from .occlusion import OcclusionSpec, apply_mask, generate_masks

log = logging.getLogger(__name__)

# batch size, learning rate, dropout, epochs
PRESETS = {
    "diffhpe_2d": dict(batch_size=200, learning_rate=8.0e-4, dropout=0.03, epochs=1000),
    "diffhpe_wrapper": dict(batch_size=200, learning_rate=2.7e-4, dropout=0.27, epochs=1000),
}


@dataclass
class TrainConfig:
    mode: str = "diffhpe_2d"
    batch_size: int = 200
    learning_rate: float = 8.0e-4
    dropout: float = 0.03
    epochs: int = 1000
    T: int = 50
    schedule: str = "quadratic"
    beta_min: float = 1e-4
    beta_max: float = 0.5
    reverse_variance: str = "posterior"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 1e-6
    scheduler: str = "plateau"
    scheduler_factor: float = 0.5
    scheduler_patience: int = 5
    eval_every: int = 10
    eval_hypotheses: int = 1
    occlusion: OcclusionSpec = field(default_factory=OcclusionSpec)
    seed: int = 0
    num_blocks: int = 16
    channels: int = 64
    time_embedding_dim: int = 128
    joint_embedding_dim: int = 16
    seq_len: int = 27
    stride: int = 1
    eval_stride: int | None = None
    selection_split: str = "valid"
    select_on_test: bool = False
    max_steps: int | None = None
    backbone_checkpoint: str | None = None
    backbone_feat_dim: int = 16
    backbone_steps: int = 2000
    backbone_lr: float = 3e-3
    backbone_batch_size: int = 64
    dataset: str | None = None
    out_dir: str | None = None

    def __post_init__(self):
        self.occlusion = OcclusionSpec.from_value(self.occlusion)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.mode not in PRESETS:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.scheduler_patience < 1 or not 0.0 < self.scheduler_factor < 1.0:
            raise ValueError("plateau patience must be >= 1 and factor in (0, 1)")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.scheduler not in ("plateau", "none"):
            raise ValueError(f"unknown scheduler {self.scheduler!r}")

    @classmethod
    def preset(cls, mode: str, **overrides) -> "TrainConfig":
        return cls(mode=mode, **{**PRESETS[mode], **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["occlusion"] = self.occlusion.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def make_schedule(self):
        return make_schedule(self.schedule, self.beta_min, self.beta_max, self.T, self.reverse_variance)

    @property
    def eval_split(self) -> str:
        return "test" if self.select_on_test else self.selection_split


class _Batches:
    """Training arrays with per-epoch occlusion resampling."""

    def __init__(self, x2d_px, x3d_std, stats, occlusion, skeleton, rng):
        self.x2d_px = np.asarray(x2d_px, dtype=np.float64)
        self.x3d = torch.as_tensor(x3d_std, dtype=torch.float32)
        self.stats = stats
        self.occlusion = occlusion
        self.skeleton = skeleton
        self.rng = rng
        self._fixed = None
        self.clean = torch.as_tensor(normalize_2d(self.x2d_px, stats.image_size), dtype=torch.float32)

    def __len__(self):
        return len(self.x3d)

    def epoch_inputs(self):
        spec = self.occlusion
        if spec.pattern == "none":
            return self.clean
        if spec.fixed and self._fixed is not None:
            return self._fixed
        N, L, J = self.x2d_px.shape[:3]
        masks = generate_masks(spec, N, L, J, self.rng, self.skeleton)
        x = torch.as_tensor(normalize_2d(apply_mask(self.x2d_px, masks), self.stats.image_size),
                            dtype=torch.float32)
        if spec.fixed:
            self._fixed = x
        return x


def check_frozen(model: DiffHPE, optimizer=None):
    bb = model.backbone
    if bb is None:
        return
    if not bb.frozen or any(p.requires_grad for p in bb.parameters()):
        raise FrozenBackboneError("backbone parameters are trainable")
    if optimizer is not None:
        ids = {id(p) for p in bb.parameters()}
        if any(id(p) in ids for g in optimizer.param_groups for p in g["params"]):
            raise FrozenBackboneError("optimizer would update the frozen backbone")


def make_optimizer(model: DiffHPE, cfg: TrainConfig):
    return torch.optim.Adam(model.denoiser.parameters(), lr=cfg.learning_rate,
                            betas=(cfg.adam_beta1, cfg.adam_beta2), weight_decay=cfg.weight_decay)


def diffusion_loss(model: DiffHPE, x2d_norm, x3d, gen, t=None, noise=None):
    """MSE between sampled noise and its prediction, averaged over every coordinate."""
    B = x3d.shape[0]
    if t is None:
        t = torch.randint(1, model.schedule.T + 1, (B,), generator=gen)
    if noise is None:
        noise = torch.randn(x3d.shape, generator=gen, dtype=x3d.dtype)
    x_t = forward_sample(x3d, t, noise, model.schedule)
    eps_hat = model.eps(x_t, model.condition(x2d_norm), t)
    return F.mse_loss(eps_hat, noise)


def train_step(model: DiffHPE, x2d_norm, x3d, optimizer, gen) -> float:
    """One optimisation step on a batch of normalized 2D / standardized 3D clips."""
    check_frozen(model, optimizer)
    model.train()
    loss = diffusion_loss(model, x2d_norm, x3d, gen)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def fit_backbone(backbone: LiftingBackbone, x2d_px, x3d_std, stats, steps=2000, lr=3e-3, batch_size=64,
                 seed=0, occlusion=None, skeleton=None):
    """Supervised MSE regression of head(features(x2d)) onto standardized 3D, then freeze."""
    if backbone.frozen:
        raise FrozenBackboneError("cannot fit a frozen backbone")
    spec = OcclusionSpec.from_value(occlusion)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    data = _Batches(x2d_px, x3d_std, stats, spec, skeleton or getattr(backbone, "skeleton", None), rng)
    opt = torch.optim.Adam(backbone.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    backbone.train()
    N = len(data)
    x2d = data.epoch_inputs()
    per_epoch = max(1, math.ceil(N / batch_size))
    for step in range(steps):
        if step % per_epoch == 0:
            x2d = data.epoch_inputs()
            perm = torch.randperm(N, generator=gen)
        idx = perm[(step % per_epoch) * batch_size:(step % per_epoch + 1) * batch_size]
        loss = F.mse_loss(backbone.lift(x2d[idx]), data.x3d[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
    return backbone.freeze()


@dataclass
class FitResult:
    history: list
    checkpoint: Path
    best_mpjpe_mm: float
    best_epoch: int
    steps: int


def _optimizer_parts(opt):
    sd = opt.state_dict()
    arrays = {}
    for idx, st in sd["state"].items():
        for k, v in st.items():
            arrays[f"optim/{idx}/{k}"] = torch.as_tensor(v).detach().cpu().numpy()
    groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()} for g in sd["param_groups"]]
    return arrays, groups


def _restore_optimizer(opt, arrays, groups):
    state = {}
    for k, v in arrays.items():
        if not k.startswith("optim/"):
            continue
        _, idx, name = k.split("/", 2)
        state.setdefault(int(idx), {})[name] = torch.from_numpy(v.copy())
    for g in groups:
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
    opt.load_state_dict({"state": state, "param_groups": groups})


def _prepare(cfg: TrainConfig, dataset: PoseDataset):
    train_clips = dataset.clips("train", cfg.seq_len, cfg.stride)
    eval_clips = dataset.clips(cfg.eval_split, cfg.seq_len, cfg.eval_stride or cfg.seq_len)
    if not train_clips:
        raise ValueError("no training clips; check the split and sequence length")
    if not eval_clips:
        raise ValueError(f"no clips in the {cfg.eval_split!r} split for checkpoint selection")
    stats = fit_stats(train_clips, dataset.skeleton.root)
    stats.check_disjoint(eval_clips)
    return train_clips, eval_clips, stats


def fit(cfg: TrainConfig, dataset: PoseDataset, out_dir, model: DiffHPE | None = None, resume=None,
        backbone: LiftingBackbone | None = None) -> FitResult:
    """Train a model on ``dataset``; writes ``checkpoint.ckpt`` and ``train_log.jsonl`` to ``out_dir``.

    The single checkpoint holds the latest parameters and optimizer state
    (for resuming) and the best-by-MPJPE parameters under ``best/``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    train_clips, eval_clips, stats = _prepare(cfg, dataset)
    x2d_px, x3d = stack_clips(train_clips)
    _, x3d_std, _ = to_model_space(x2d_px, x3d, stats)
    ev2d, ev3d = stack_clips(eval_clips)
    skeleton = dataset.skeleton

    start_epoch, history, best = 1, [], (math.inf, 0)
    arrays = meta = None
    if resume is not None:
        model, stats_ckpt, arrays, meta = load_model(resume, which="model")
        if not np.allclose(stats_ckpt.mean, stats.mean) or not np.allclose(stats_ckpt.std, stats.std):
            raise ValueError("resumed checkpoint was trained on different data")
        start_epoch = meta["epoch"] + 1
        history = meta["history"]
        best = (meta["best_mpjpe_mm"], meta["best_epoch"])
    elif model is None:
        if cfg.mode == "diffhpe_wrapper" and backbone is None:
            backbone = _make_backbone(cfg, x2d_px, x3d_std, stats, skeleton)
        model = build_model(cfg.mode, skeleton, cfg.num_blocks, cfg.channels, cfg.dropout,
                            cfg.time_embedding_dim, cfg.make_schedule(), backbone, cfg.seed,
                            cfg.joint_embedding_dim)

    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = make_optimizer(model, cfg)
    # torch reduces once the bad-evaluation count exceeds its patience; we reduce when it reaches ours
    plateau = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=cfg.scheduler_factor, patience=cfg.scheduler_patience - 1, threshold=0.0)
    best_state = copy.deepcopy(model.denoiser.state_dict())
    steps = 0
    if arrays is not None:
        _restore_optimizer(opt, arrays, meta["optimizer"])
        plateau.load_state_dict(meta["plateau"])
        gen.set_state(torch.from_numpy(arrays["rng/torch"].copy()))
        rng.bit_generator.state = meta["rng_numpy"]
        best_state = {k[5:]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("best/")}
        steps = meta["steps"]
    check_frozen(model, opt)

    data = _Batches(x2d_px, x3d_std, stats, cfg.occlusion, skeleton, rng)
    N = len(data)
    ckpt_path = out / "checkpoint.ckpt"
    log_path = out / "train_log.jsonl"
    if resume is None and log_path.exists():
        log_path.unlink()
    stop = False
    for epoch in range(start_epoch, cfg.epochs + 1):
        inputs = data.epoch_inputs()
        perm = torch.randperm(N, generator=gen)
        losses = []
        for s in range(0, N, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            loss = train_step(model, inputs[idx], data.x3d[idx], opt, gen)
            steps += 1
            if not math.isfinite(loss):
                dump = {"epoch": epoch, "step": steps, "loss": loss, "lr": opt.param_groups[0]["lr"],
                        "config": cfg.to_dict()}
                (out / "diverged.json").write_text(json.dumps(dump, indent=1, default=str))
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, step {steps}; state in diverged.json")
            losses.append(loss)
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                stop = True
                break
        last = epoch == cfg.epochs or stop
        if epoch % cfg.eval_every == 0 or last:
            report, _ = evaluate_model(model, ev2d, ev3d, stats, H=cfg.eval_hypotheses, seed=cfg.seed)
            lr = opt.param_groups[0]["lr"]
            if cfg.scheduler == "plateau":
                plateau.step(report.mpjpe_mm)
            if report.mpjpe_mm < best[0]:
                best = (report.mpjpe_mm, epoch)
                best_state = copy.deepcopy(model.denoiser.state_dict())
            rec = {"epoch": epoch, "step": steps, "loss": float(np.mean(losses)), "eval_mpjpe_mm": report.mpjpe_mm,
                   "lr": lr, "split": cfg.eval_split}
            history.append(rec)
            with log_path.open("a") as f:
                f.write(json.dumps(rec) + "\n")
            log.info("epoch %d step %d loss %.4f eval MPJPE %.2f mm lr %.2e", epoch, steps, rec["loss"],
                     report.mpjpe_mm, lr)
            opt_arrays, groups = _optimizer_parts(opt)
            opt_arrays["rng/torch"] = gen.get_state().numpy()
            save_model(ckpt_path, model, stats, extra_arrays=opt_arrays, best_state=best_state, extra_meta={
                "epoch": epoch, "steps": steps, "history": history, "best_mpjpe_mm": best[0],
                "best_epoch": best[1], "optimizer": groups, "plateau": plateau.state_dict(),
                "rng_numpy": rng.bit_generator.state, "config": cfg.to_dict(),
            })
        if stop:
            break
    model.denoiser.load_state_dict(best_state)
    model.eval()
    return FitResult(history, ckpt_path, best[0], best[1], steps)


def _make_backbone(cfg: TrainConfig, x2d_px, x3d_std, stats, skeleton):
    if cfg.backbone_checkpoint:
        from .model import load_backbone

        bb, _ = load_backbone(cfg.backbone_checkpoint, cfg.backbone_feat_dim)
        return bb if bb.frozen else bb.freeze()
    bb = toy_backbone(skeleton, cfg.seed, cfg.backbone_feat_dim)
    return fit_backbone(bb, x2d_px, x3d_std, stats, cfg.backbone_steps, cfg.backbone_lr, cfg.backbone_batch_size,
                        cfg.seed, cfg.occlusion, skeleton)
