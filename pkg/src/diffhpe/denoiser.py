"""Graph-convolutional noise predictor.

CSDI/DiffWave-style stack of gated residual blocks. Each block runs two
pre-aggregated graph convolutions followed by a graph non-local layer; even
blocks convolve along time (chain graph over frames, independently per
joint), odd blocks along the skeleton (per frame). All tensors are laid out
(B, L, J, C).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .skeleton import SkeletonGraph, adjacency, standard_h36m_skeleton

TIME_WISE = "time"
FEATURE_WISE = "feature"


def time_embedding(t, dim: int = 128):
    """Sinusoidal step encoding: ``[sin(t f_0..f_{d/2-1}), cos(t f_0..)]``.

    Frequencies are geometrically spaced from 1 to 1e4. ``t`` may be a
    scalar or a 1-D tensor; the output has shape (..., dim).
    """
    if dim % 2:
        raise ValueError("embedding dimension must be even")
    half = dim // 2
    t = torch.as_tensor(t, dtype=torch.float32)
    freqs = 10.0 ** (torch.arange(half, dtype=torch.float32) / max(half - 1, 1) * 4.0)
    arg = t.unsqueeze(-1) * freqs
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)


def normalized_adjacency(A: np.ndarray) -> torch.Tensor:
    """Row-normalized D^-1 A (rows without neighbours stay zero)."""
    A = np.asarray(A, dtype=np.float64)
    deg = A.sum(1, keepdims=True)
    return torch.as_tensor(np.divide(A, deg, out=np.zeros_like(A), where=deg > 0), dtype=torch.float32)


def chain_adjacency(n: int) -> np.ndarray:
    A = np.zeros((n, n))
    i = np.arange(n - 1)
    A[i, i + 1] = A[i + 1, i] = 1.0
    return A


class GraphConv(nn.Module):
    """Pre-aggregated graph convolution with decoupled self-connection.

    ``out = W_self x_j + W_nbr mean_{k in N(j)} x_k``. Neighbour features are
    averaged with D^-1 A before the shared linear map. ``axis`` selects the
    node dimension: ``-2`` for joints, ``-3`` for frames (the chain graph is
    then built for the actual sequence length).
    """

    def __init__(self, in_channels, out_channels, adj=None, axis=-2):
        super().__init__()
        self.self_lin = nn.Linear(in_channels, out_channels)
        self.nbr_lin = nn.Linear(in_channels, out_channels, bias=False)
        self.axis = axis
        if adj is not None:
            self.register_buffer("adj", normalized_adjacency(adj))
        else:
            self.adj = None
        self._chain_cache = {}

    def _adj(self, n, like):
        if self.adj is not None:
            if self.adj.shape[0] != n:
                raise ValueError(f"graph has {self.adj.shape[0]} nodes, input has {n}")
            return self.adj.to(like.dtype)
        key = (n, like.dtype, like.device)
        if key not in self._chain_cache:
            self._chain_cache[key] = normalized_adjacency(chain_adjacency(n)).to(like)
        return self._chain_cache[key]

    def aggregate(self, x):
        n = x.shape[self.axis]
        A = self._adj(n, x)
        if self.axis == -2:
            return torch.einsum("jk,...kc->...jc", A, x)
        return torch.einsum("lm,...mjc->...ljc", A, x)

    def forward(self, x):
        return self.self_lin(x) + self.nbr_lin(self.aggregate(x))


class GraphNonLocal(nn.Module):
    """Residual non-local attention over the joints of each frame."""

    def __init__(self, channels, inter_channels=None):
        super().__init__()
        inter = inter_channels or max(channels // 2, 1)
        self.theta = nn.Linear(channels, inter)
        self.phi = nn.Linear(channels, inter)
        self.g = nn.Linear(channels, inter)
        self.w_z = nn.Linear(inter, channels)
        # identity at initialisation
        nn.init.zeros_(self.w_z.weight)
        nn.init.zeros_(self.w_z.bias)

    def forward(self, x):
        affinity = torch.softmax(self.theta(x) @ self.phi(x).transpose(-1, -2), dim=-1)
        return x + self.w_z(affinity @ self.g(x))


class _BatchNorm(nn.BatchNorm1d):
    def forward(self, x):
        return super().forward(x.reshape(-1, x.shape[-1])).reshape(x.shape)


class ResidualBlock(nn.Module):
    def __init__(self, channels, cond_channels, skeleton_adj, axis=FEATURE_WISE, dropout=0.0):
        super().__init__()
        if axis not in (TIME_WISE, FEATURE_WISE):
            raise ValueError(f"unknown axis {axis!r}")
        self.axis = axis
        C = channels
        adj = skeleton_adj if axis == FEATURE_WISE else None
        node_axis = -2 if axis == FEATURE_WISE else -3
        self.step_proj = nn.Linear(C, C)
        self.gconv1 = GraphConv(C, C, adj, node_axis)
        self.bn1 = _BatchNorm(C)
        self.gconv2 = GraphConv(C, C, adj, node_axis)
        self.bn2 = _BatchNorm(C)
        self.dropout = nn.Dropout(dropout)
        self.non_local = GraphNonLocal(C)
        self.mid_proj = nn.Linear(C, 2 * C)
        self.cond_proj = nn.Linear(cond_channels, 2 * C)
        self.res_proj = nn.Linear(C, C)
        self.skip_proj = nn.Linear(C, C)

    def forward(self, x, step_emb, cond):
        """``x`` (B, L, J, C); ``step_emb`` (B, C); ``cond`` (B, L, J, C_cond)."""
        h = x + self.step_proj(step_emb)[:, None, None, :]
        h = self.dropout(F.relu(self.bn1(self.gconv1(h))))
        h = self.dropout(F.relu(self.bn2(self.gconv2(h))))
        h = self.non_local(h)
        h = self.mid_proj(h) + self.cond_proj(cond)
        filt, gate = h.chunk(2, dim=-1)
        y = torch.tanh(filt) * torch.sigmoid(gate)
        return (x + self.res_proj(y)) / math.sqrt(2.0), self.skip_proj(y)


@dataclass
class DenoiserConfig:
    num_blocks: int = 16
    channels: int = 64
    dropout: float = 0.0
    time_embedding_dim: int = 128
    condition_channels: int = 2
    joint_embedding_dim: int = 16
    skip_scale: bool = False
    skeleton: SkeletonGraph = field(default_factory=standard_h36m_skeleton)

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.condition_channels < 1:
            raise ValueError("condition_channels must be >= 1")
        if self.joint_embedding_dim < 0:
            raise ValueError("joint_embedding_dim must be >= 0")

    def to_dict(self) -> dict:
        return {
            "num_blocks": self.num_blocks,
            "channels": self.channels,
            "dropout": self.dropout,
            "time_embedding_dim": self.time_embedding_dim,
            "condition_channels": self.condition_channels,
            "joint_embedding_dim": self.joint_embedding_dim,
            "skip_scale": self.skip_scale,
            "skeleton": self.skeleton.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        from .skeleton import skeleton_from_dict

        d = dict(d)
        d["skeleton"] = skeleton_from_dict(d["skeleton"])
        return cls(**d)


class Denoiser(nn.Module):
    """Noise predictor eps_theta together with the 3D embedding w_theta.

    The conditioner is concatenated with a learned per-joint embedding before
    it reaches the input projection and every block. The graph convolutions
    share weights across joints, so without it mirrored limbs would be
    indistinguishable to the network.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        C = config.channels
        A = adjacency(config.skeleton)
        side = config.condition_channels + config.joint_embedding_dim
        self.w_theta = nn.Linear(3, C)
        self.joint_embedding = nn.Parameter(torch.randn(config.skeleton.num_joints, config.joint_embedding_dim))
        self.input_proj = nn.Linear(C + side, C)
        self.step_mlp = nn.Sequential(
            nn.Linear(config.time_embedding_dim, C), nn.SiLU(), nn.Linear(C, C), nn.SiLU()
        )
        self.blocks = nn.ModuleList(
            ResidualBlock(C, side, A,
                          axis=TIME_WISE if i % 2 == 0 else FEATURE_WISE, dropout=config.dropout)
            for i in range(config.num_blocks)
        )
        self.out_hidden = nn.Linear(C, C)
        self.out_head = nn.Linear(C, 3)
        nn.init.zeros_(self.out_head.weight)
        nn.init.zeros_(self.out_head.bias)

    def embed(self, x3d_t):
        return self.w_theta(x3d_t)

    def predict_noise(self, e3d, cond, t):
        """eps_theta(E3D_t, E2D, t) for a batch; ``t`` is an int or a (B,) tensor."""
        if cond.shape[-1] != self.config.condition_channels:
            raise ValueError(
                f"conditioner has {cond.shape[-1]} channels, denoiser expects {self.config.condition_channels}"
            )
        if e3d.shape[:-1] != cond.shape[:-1]:
            raise ValueError(f"embedding {tuple(e3d.shape)} and conditioner {tuple(cond.shape)} disagree")
        B = e3d.shape[0]
        t = torch.as_tensor(t, device=e3d.device)
        if t.ndim == 0:
            t = t.expand(B)
        emb = self.step_mlp(time_embedding(t, self.config.time_embedding_dim).to(e3d))
        cond = torch.cat([cond, self.joint_embedding.to(cond).expand(*cond.shape[:-1], -1)], dim=-1)
        x = F.relu(self.input_proj(torch.cat([e3d, cond], dim=-1)))
        skip = 0.0
        for block in self.blocks:
            x, s = block(x, emb, cond)
            skip = skip + s
        if self.config.skip_scale:
            skip = skip / math.sqrt(len(self.blocks))
        return self.out_head(F.relu(self.out_hidden(F.relu(skip))))

    def forward(self, x3d_t, cond, t):
        return self.predict_noise(self.embed(x3d_t), cond, t)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
