"""Assembled lifting model: denoiser + schedule + conditioner, with sampling,
evaluation and checkpoint round-tripping."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from . import checkpoint
from .conditioning import RAW2D, WRAPPER, FrozenBackboneError, LiftingBackbone, ToyBackbone, normalize_2d
from .data import NormalizationStats, from_model_space
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import VarianceSchedule, aggregate, sample_hypotheses, schedule_from_params
from .metrics import evaluate_predictions
from .occlusion import OcclusionSpec, apply_mask, generate_masks
from .skeleton import skeleton_from_dict

MODES = {"diffhpe_2d": RAW2D, "diffhpe_wrapper": WRAPPER, RAW2D: RAW2D, WRAPPER: WRAPPER}


class DiffHPE(nn.Module):
    """Conditional DDPM over standardized root-relative 3D poses.

    In ``raw2d`` mode the conditioner is the normalized 2D clip; in
    ``wrapper`` mode it is the frozen backbone's features.
    """

    def __init__(self, denoiser: Denoiser, schedule: VarianceSchedule, mode: str = RAW2D,
                 backbone: LiftingBackbone | None = None):
        super().__init__()
        mode = MODES[mode]
        if mode == WRAPPER:
            if backbone is None:
                raise ValueError("wrapper mode needs a backbone")
            if not backbone.frozen:
                raise FrozenBackboneError("the wrapped backbone must be frozen")
            if backbone.feat_dim != denoiser.config.condition_channels:
                raise ValueError("denoiser condition channels must equal the backbone feature width")
        elif denoiser.config.condition_channels != 2:
            raise ValueError("raw2d mode needs a denoiser with 2 condition channels")
        self.denoiser = denoiser
        self.schedule = schedule
        self.mode = mode
        self.backbone = backbone

    @property
    def skeleton(self):
        return self.denoiser.config.skeleton

    def condition(self, x2d_norm):
        if self.mode == RAW2D:
            return x2d_norm
        with torch.no_grad():
            return self.backbone.features(x2d_norm)

    def eps(self, x_t, cond, t):
        return self.denoiser(x_t, cond, t)

    @torch.no_grad()
    def sample(self, x2d_norm, H=5, seeds=None, rng=None):
        """(H, B, L, J, 3) hypotheses in model space for normalized 2D clips."""
        was_training = self.training
        self.eval()
        try:
            cond = self.condition(torch.as_tensor(x2d_norm, dtype=torch.float32))
            return sample_hypotheses(self.eps, cond, H, self.schedule, rng=rng, seeds=seeds)
        finally:
            self.train(was_training)


def build_model(mode, skeleton, num_blocks=16, channels=64, dropout=0.0, time_embedding_dim=128,
                schedule=None, backbone=None, seed=0, joint_embedding_dim=16):
    from .diffusion import make_schedule

    mode = MODES[mode]
    cond_ch = 2 if mode == RAW2D else backbone.feat_dim
    cfg = DenoiserConfig(num_blocks=num_blocks, channels=channels, dropout=dropout,
                         time_embedding_dim=time_embedding_dim, condition_channels=cond_ch,
                         joint_embedding_dim=joint_embedding_dim, skeleton=skeleton)
    state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        den = Denoiser(cfg)
    finally:
        torch.random.set_rng_state(state)
    return DiffHPE(den, schedule or make_schedule(), mode, backbone)


def hypothesis_seeds(seed: int, chunk: int, H: int) -> list:
    return [int(s) for s in np.random.SeedSequence([seed, chunk]).generate_state(H, dtype=np.uint64) >> 2]


def occlude(x2d, spec, seed: int, skeleton):
    """Apply a seeded occlusion pattern to (N, L, J, 2) pixel clips."""
    spec = OcclusionSpec.from_value(spec)
    if spec.pattern == "none":
        return np.asarray(x2d)
    N, L, J = np.shape(x2d)[:3]
    masks = generate_masks(spec, N, L, J, np.random.default_rng(seed), skeleton)
    return apply_mask(x2d, masks)


def _root_relative(x3d_std, stats: NormalizationStats):
    # the root is identically zero in model space; its sampled value is pure noise at a 1 m scale
    x3d_std = x3d_std.copy()
    x3d_std[..., stats.root, :] = 0.0
    return from_model_space(x3d_std, stats)


def predict(model: DiffHPE, x2d, stats: NormalizationStats, H=5, seed=0, batch_size=64):
    """Root-relative 3D hypotheses (H, N, L, J, 3) in meters for pixel clips (N, L, J, 2)."""
    x2d_norm = normalize_2d(np.asarray(x2d, dtype=np.float64), stats.image_size)
    outs = []
    for c, start in enumerate(range(0, len(x2d_norm), batch_size)):
        chunk = torch.as_tensor(x2d_norm[start:start + batch_size], dtype=torch.float32)
        hyp = model.sample(chunk, H, seeds=hypothesis_seeds(seed, c, H))
        outs.append(hyp.double().numpy())
    return _root_relative(np.concatenate(outs, axis=1), stats)


@torch.no_grad()
def predict_backbone(backbone: LiftingBackbone, x2d, stats: NormalizationStats, batch_size=256):
    """Root-relative 3D (N, L, J, 3) in meters from the backbone's own head."""
    backbone.eval()
    x2d_norm = normalize_2d(np.asarray(x2d, dtype=np.float64), stats.image_size)
    outs = []
    for start in range(0, len(x2d_norm), batch_size):
        chunk = torch.as_tensor(x2d_norm[start:start + batch_size], dtype=torch.float32)
        outs.append(backbone.lift(chunk).double().numpy())
    return _root_relative(np.concatenate(outs), stats)


def evaluate_model(predictor, x2d, x3d, stats, H=5, seed=0, occlusion=None, what="diffusion", skeleton=None,
                   **labels):
    """EvalReport for pixel clips ``x2d`` against camera-frame 3D ``x3d`` (meters).

    ``what`` is ``"diffusion"`` (H averaged hypotheses), ``"backbone"``
    (the backbone's own regression; ``predictor`` may be the backbone itself) or
    ``"oracle"`` (ground truth passed through, a harness check needing only
    ``skeleton``). Returns ``(report, hypotheses)``.
    """
    if skeleton is None:
        skeleton = predictor.skeleton
    x3d = np.asarray(x3d, dtype=np.float64)
    gt = x3d - x3d[..., skeleton.root:skeleton.root + 1, :]
    spec = OcclusionSpec.from_value(occlusion)
    labels.setdefault("test_pattern", spec.pattern)
    if what == "oracle":
        return evaluate_predictions(gt, gt, skeleton, **labels), None
    xin = occlude(x2d, spec, seed, skeleton)
    if what == "diffusion":
        hyp = predict(predictor, xin, stats, H=H, seed=seed)
        return evaluate_predictions(aggregate(hyp), gt, skeleton, hypotheses=hyp, **labels), hyp
    if what == "backbone":
        bb = predictor.backbone if isinstance(predictor, DiffHPE) else predictor
        if bb is None:
            raise ValueError("model has no backbone to evaluate")
        pred = predict_backbone(bb, xin, stats)
        return evaluate_predictions(pred, gt, skeleton, **labels), None
    raise ValueError(f"unknown prediction source {what!r}")


# -- checkpoints ---------------------------------------------------------------


def _state_arrays(module: nn.Module, prefix: str) -> dict:
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def _load_state(module: nn.Module, arrays: dict, prefix: str):
    sd = {k[len(prefix) + 1:]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(prefix + "/")}
    module.load_state_dict(sd)


def backbone_parts(backbone: LiftingBackbone | None):
    if backbone is None:
        return {}, None
    if not isinstance(backbone, ToyBackbone):
        raise ValueError("only toy backbones can be embedded in a checkpoint")
    meta = {"kind": "toy", "feat_dim": backbone.feat_dim, "skeleton": backbone.skeleton.to_dict(),
            "frozen": backbone.frozen}
    return _state_arrays(backbone, "backbone"), meta


def backbone_from_parts(arrays, meta) -> ToyBackbone | None:
    if not meta:
        return None
    bb = ToyBackbone(skeleton_from_dict(meta["skeleton"]), meta["feat_dim"])
    _load_state(bb, arrays, "backbone")
    if meta.get("frozen", True):
        bb.freeze()
    return bb


def save_model(path, model: DiffHPE, stats: NormalizationStats, extra_arrays=None, extra_meta=None,
               best_state=None):
    """Write params (+ optional best params under ``best/``), config, schedule and stats."""
    arrays = _state_arrays(model.denoiser, "model")
    if best_state is not None:
        arrays.update({f"best/{k}": v.detach().cpu().numpy() for k, v in best_state.items()})
    bb_arrays, bb_meta = backbone_parts(model.backbone)
    arrays.update(bb_arrays)
    arrays.update(stats.arrays())
    arrays.update(extra_arrays or {})
    meta = {
        "kind": "diffhpe",
        "mode": model.mode,
        "denoiser": model.denoiser.config.to_dict(),
        "schedule": model.schedule.params(),
        "stats": stats.meta(),
        "backbone": bb_meta,
    }
    meta.update(extra_meta or {})
    return checkpoint.save_arrays(path, arrays, meta)


def load_model(path, which="best"):
    """Return ``(model, stats, arrays, meta)``; ``which`` picks ``best`` or ``model`` (latest) params."""
    arrays, meta = checkpoint.load_arrays(path)
    if meta.get("kind") != "diffhpe":
        raise checkpoint.CheckpointError(f"{path}: not a diffusion-model checkpoint")
    backbone = backbone_from_parts(arrays, meta.get("backbone"))
    den = Denoiser(DenoiserConfig.from_dict(meta["denoiser"]))
    prefix = "best" if which == "best" and any(k.startswith("best/") for k in arrays) else "model"
    _load_state(den, arrays, prefix)
    model = DiffHPE(den, schedule_from_params(meta["schedule"]), meta["mode"], backbone)
    model.eval()
    stats = NormalizationStats.from_parts(arrays, meta["stats"])
    return model, stats, arrays, meta


def save_backbone(path, backbone: ToyBackbone, stats: NormalizationStats, extra_meta=None):
    arrays, bb_meta = backbone_parts(backbone)
    arrays.update(stats.arrays())
    meta = {"kind": "backbone", "backbone": bb_meta, "stats": stats.meta()}
    meta.update(extra_meta or {})
    return checkpoint.save_arrays(path, arrays, meta)


def load_backbone(path, feat_dim=None):
    """Load a toy-backbone checkpoint, or wrap a TorchScript file (``feat_dim`` required)."""
    from .conditioning import ExternalBackbone

    try:
        arrays, meta = checkpoint.load_arrays(path)
    except checkpoint.CheckpointError:
        if feat_dim is None:
            raise ValueError("external backbones need a declared feature width") from None
        return ExternalBackbone(path, feat_dim), None
    if meta.get("backbone") is None:
        raise checkpoint.CheckpointError(f"{path}: checkpoint holds no backbone")
    stats = NormalizationStats.from_parts(arrays, meta["stats"]) if "stats/mean" in arrays else None
    return backbone_from_parts(arrays, meta["backbone"]), stats
