"""Conditioners for the denoiser: raw normalized 2D keypoints or frozen
lifting-backbone features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .denoiser import GraphConv
from .skeleton import SkeletonGraph, adjacency

RAW2D = "raw2d"
WRAPPER = "wrapper"


class FrozenBackboneError(RuntimeError):
    """Raised when something tries to update a frozen backbone."""


def normalize_2d(x2d, image_size):
    """Pixels -> width-scaled coordinates: x' = 2x/w - 1, y' = 2y/w - h/w.

    The image centre maps to (0, 0); x spans [-1, 1] and y keeps the aspect
    ratio. Occluded keypoints (pixel 0) are normalized like any other value.
    """
    w, h = image_size
    if w <= 0 or h <= 0:
        raise ValueError(f"image size must be positive, got {image_size}")
    x2d = torch.as_tensor(x2d) if isinstance(x2d, torch.Tensor) else np.asarray(x2d, dtype=np.float64)
    out = x2d * (2.0 / w)
    offset = np.array([1.0, h / w])
    if isinstance(out, torch.Tensor):
        offset = torch.as_tensor(offset, dtype=out.dtype, device=out.device)
    return out - offset


def denormalize_2d(x2d_norm, image_size):
    w, h = image_size
    if w <= 0 or h <= 0:
        raise ValueError(f"image size must be positive, got {image_size}")
    offset = np.array([1.0, h / w])
    if isinstance(x2d_norm, torch.Tensor):
        offset = torch.as_tensor(offset, dtype=x2d_norm.dtype, device=x2d_norm.device)
    else:
        x2d_norm = np.asarray(x2d_norm, dtype=np.float64)
    return (x2d_norm + offset) * (w / 2.0)


@dataclass
class ConditionerOutput:
    tensor: torch.Tensor
    mode: str

    @property
    def channels(self) -> int:
        return self.tensor.shape[-1]


class LiftingBackbone(nn.Module):
    """Interface for a pre-trained lifting model f = g o h.

    Subclasses implement :meth:`features` (h, returning (..., L, J, feat_dim)
    from normalized 2D keypoints) and optionally :meth:`head` (g, linear
    features -> 3D in model space).
    """

    feat_dim: int = 0

    def __init__(self):
        super().__init__()
        self.frozen = False

    def features(self, x2d_norm):
        raise NotImplementedError

    def head(self, feats):
        raise NotImplementedError

    def lift(self, x2d_norm):
        return self.head(self.features(x2d_norm))

    def freeze(self):
        self.frozen = True
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def train(self, mode: bool = True):
        # a frozen backbone always runs in inference mode
        return super().train(mode and not getattr(self, "frozen", False))


class PerJointLinear(nn.Module):
    """Affine map with separate weights for every joint: (..., J, i) -> (..., J, o)."""

    def __init__(self, num_joints: int, in_features: int, out_features: int):
        super().__init__()
        bound = 1.0 / in_features ** 0.5
        self.weight = nn.Parameter(torch.empty(num_joints, in_features, out_features).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(num_joints, out_features).uniform_(-bound, bound))

    def forward(self, x):
        return torch.einsum("...ji,jio->...jo", x, self.weight) + self.bias


class ToyBackbone(LiftingBackbone):
    """Small frame-wise lifting network standing in for a pre-trained model.

    ``h(x) = u + relu(GraphConv(u))`` with ``u`` a per-joint linear map
    2 -> feat_dim; ``g`` is a per-joint linear map feat_dim -> 3.
    """

    def __init__(self, skeleton: SkeletonGraph, feat_dim: int = 16):
        super().__init__()
        self.feat_dim = feat_dim
        self.skeleton = skeleton
        J = skeleton.num_joints
        self.inp = PerJointLinear(J, 2, feat_dim)
        self.gconv = GraphConv(feat_dim, feat_dim, adjacency(skeleton))
        self.out = PerJointLinear(J, feat_dim, 3)

    def features(self, x2d_norm):
        u = self.inp(x2d_norm)
        return u + F.relu(self.gconv(u))

    def head(self, feats):
        return self.out(feats)


class ExternalBackbone(LiftingBackbone):
    """Adapter for a TorchScript lifting model exported elsewhere.

    The scripted module must expose ``features(x)`` mapping normalized
    (B, L, J, 2) keypoints to (B, L, J, feat_dim); ``head(f)`` is optional.
    """

    def __init__(self, path, feat_dim: int):
        super().__init__()
        self.module = torch.jit.load(str(path), map_location="cpu")
        self.feat_dim = int(feat_dim)
        self.freeze()

    def features(self, x2d_norm):
        f = self.module.features(x2d_norm)
        if f.shape[-1] != self.feat_dim:
            raise ValueError(f"backbone returned {f.shape[-1]} channels, declared {self.feat_dim}")
        return f

    def head(self, feats):
        if not hasattr(self.module, "head"):
            raise NotImplementedError("external backbone has no regression head")
        return self.module.head(feats)


def toy_backbone(skeleton: SkeletonGraph, seed: int = 0, feat_dim: int = 16) -> ToyBackbone:
    """Deterministically initialised (unfitted, unfrozen) toy backbone."""
    state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        return ToyBackbone(skeleton, feat_dim)
    finally:
        torch.random.set_rng_state(state)


def condition_raw2d(x2d, image_size) -> ConditionerOutput:
    x = normalize_2d(torch.as_tensor(x2d, dtype=torch.float32), image_size)
    return ConditionerOutput(x.float(), RAW2D)


@torch.no_grad()
def condition_wrapper(x2d, backbone: LiftingBackbone, image_size) -> ConditionerOutput:
    if not backbone.frozen:
        raise FrozenBackboneError("wrapper conditioning requires a frozen backbone")
    x = normalize_2d(torch.as_tensor(x2d, dtype=torch.float32), image_size).float()
    return ConditionerOutput(backbone.features(x), WRAPPER)


def embed_noisy_pose(x3d_t, w_theta: nn.Linear):
    """Per-joint linear embedding of the noisy pose (E3D_t)."""
    if x3d_t.shape[-1] != w_theta.in_features:
        raise ValueError(f"expected {w_theta.in_features} coordinates, got {x3d_t.shape[-1]}")
    return w_theta(x3d_t)
