"""DDPM variance schedule, forward noising and ancestral sampling.

Steps are 1-based throughout (``t`` in ``1..T``); the arrays of
:class:`VarianceSchedule` are indexed with ``t - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

SCHEDULE_KINDS = ("linear", "quadratic")
REVERSE_VARIANCES = ("posterior", "beta")


@dataclass(frozen=True, eq=False)
class VarianceSchedule:
    kind: str
    beta_min: float
    beta_max: float
    T: int
    betas: np.ndarray
    alpha_bar: np.ndarray
    k1: np.ndarray
    k2: np.ndarray
    sigma2: np.ndarray
    reverse_variance: str = "posterior"

    def params(self) -> dict:
        return {
            "kind": self.kind,
            "beta_min": self.beta_min,
            "beta_max": self.beta_max,
            "T": self.T,
            "reverse_variance": self.reverse_variance,
        }

    def _check_step(self, t: int):
        if not 1 <= t <= self.T:
            raise ValueError(f"step {t} outside 1..{self.T}")


def make_schedule(kind="quadratic", beta_min=1e-4, beta_max=0.5, T=50, reverse_variance="posterior"):
    """Build a schedule.

    ``quadratic`` interpolates sqrt(beta) linearly (the CSDI "quad"
    schedule); ``linear`` interpolates beta. ``reverse_variance`` picks the
    reverse-step variance: the true posterior variance
    ``beta_t (1 - abar_{t-1}) / (1 - abar_t)`` or ``beta_t`` itself.
    """
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}")
    if reverse_variance not in REVERSE_VARIANCES:
        raise ValueError(f"unknown reverse variance {reverse_variance!r}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    T = int(T)
    if kind == "linear":
        betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    else:
        betas = np.linspace(beta_min**0.5, beta_max**0.5, T, dtype=np.float64) ** 2
    alpha_bar = np.cumprod(1.0 - betas)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    k1 = 1.0 / np.sqrt(1.0 - betas)
    k2 = betas / np.sqrt(1.0 - alpha_bar)
    if reverse_variance == "posterior":
        sigma2 = betas * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    else:
        sigma2 = betas.copy()
    for a in (betas, alpha_bar, k1, k2, sigma2):
        a.setflags(write=False)
    return VarianceSchedule(kind, float(beta_min), float(beta_max), T, betas, alpha_bar, k1, k2, sigma2,
                            reverse_variance)


def schedule_from_params(params: dict) -> VarianceSchedule:
    return make_schedule(params["kind"], params["beta_min"], params["beta_max"], params["T"],
                         params.get("reverse_variance", "posterior"))


def _randn_like(x, rng):
    if isinstance(x, torch.Tensor):
        return torch.randn(x.shape, generator=rng, dtype=x.dtype, device=x.device)
    if rng is None:
        rng = np.random.default_rng()
    return rng.standard_normal(np.shape(x))


def _per_item(values, t, like):
    """Gather schedule values for scalar or per-batch-item steps."""
    if np.ndim(t) == 0:
        return float(values[int(t) - 1])
    idx = np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t, dtype=int) - 1
    v = values[idx]
    shape = (len(idx),) + (1,) * (like.ndim - 1)
    if isinstance(like, torch.Tensor):
        return torch.as_tensor(v, dtype=like.dtype, device=like.device).reshape(shape)
    return v.reshape(shape)


def _check_steps(sched, t):
    tt = np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t)
    if tt.size and (tt.min() < 1 or tt.max() > sched.T):
        raise ValueError(f"steps must lie in 1..{sched.T}")


def forward_sample(x0, t, noise, sched: VarianceSchedule):
    """Closed-form q(x_t | x_0): sqrt(abar_t) x0 + sqrt(1 - abar_t) noise.

    ``t`` is an int or a length-B vector of steps (one per leading item).
    Works on numpy arrays and torch tensors alike.
    """
    if tuple(np.shape(noise)) != tuple(np.shape(x0)):
        raise ValueError(f"noise shape {tuple(np.shape(noise))} != x0 shape {tuple(np.shape(x0))}")
    _check_steps(sched, t)
    ab = _per_item(sched.alpha_bar, t, x0)
    if isinstance(ab, float):
        return ab**0.5 * x0 + (1.0 - ab) ** 0.5 * noise
    sqrt = torch.sqrt if isinstance(ab, torch.Tensor) else np.sqrt
    return sqrt(ab) * x0 + sqrt(1.0 - ab) * noise


def forward_step(x_prev, t, noise, sched: VarianceSchedule):
    """One step of the forward chain q(x_t | x_{t-1})."""
    sched._check_step(t)
    b = float(sched.betas[t - 1])
    return (1.0 - b) ** 0.5 * x_prev + b**0.5 * noise


def reverse_mean(x_t, eps_hat, t, sched: VarianceSchedule):
    sched._check_step(t)
    return float(sched.k1[t - 1]) * (x_t - float(sched.k2[t - 1]) * eps_hat)


def reverse_step(x_t, eps_hat, t, sched: VarianceSchedule, rng=None, noise=None):
    """Ancestral step x_t -> x_{t-1}.

    Returns the mean ``k1 (x_t - k2 eps_hat)`` plus ``sqrt(sigma2_t) z``;
    no noise is added at ``t == 1``. ``noise`` overrides the draw from
    ``rng`` (a torch Generator for tensors, a numpy Generator for arrays).
    """
    if tuple(np.shape(eps_hat)) != tuple(np.shape(x_t)):
        raise ValueError(f"eps_hat shape {tuple(np.shape(eps_hat))} != x_t shape {tuple(np.shape(x_t))}")
    mu = reverse_mean(x_t, eps_hat, t, sched)
    if t == 1:
        return mu
    z = _randn_like(x_t, rng) if noise is None else noise
    return mu + float(sched.sigma2[t - 1]) ** 0.5 * z


@torch.no_grad()
def sample_hypotheses(eps_model, cond, H, sched: VarianceSchedule, rng=None, shape=None, seeds=None):
    """Draw H reverse-diffusion trajectories for every conditioner in ``cond``.

    ``eps_model(x_t, cond, t)`` predicts the noise for a batch of noisy poses
    ``x_t`` (B, L, J, 3) given conditioners (B, L, J, C) and integer step t.
    ``shape`` is the per-item pose shape (L, J, 3); it defaults to the
    conditioner's (L, J) with 3 coordinates.

    Each hypothesis gets its own random stream: a torch Generator seeded from
    ``seeds[h]`` when given, else from ``rng`` (a torch Generator), so that
    hypothesis h is reproducible independently of H.

    Returns a tensor (H, B, L, J, 3).
    """
    if H < 1:
        raise ValueError("need at least one hypothesis")
    cond = torch.as_tensor(cond)
    B = cond.shape[0]
    if shape is None:
        shape = (cond.shape[1], cond.shape[2], 3)
    if seeds is None:
        if rng is None:
            rng = torch.Generator().manual_seed(0)
        seeds = torch.randint(0, 2**62, (H,), generator=rng).tolist()
    if len(seeds) != H:
        raise ValueError("one seed per hypothesis is required")
    gens = [torch.Generator().manual_seed(int(s)) for s in seeds]
    dtype = cond.dtype if cond.is_floating_point() else torch.float32
    x = torch.stack([torch.randn((B, *shape), generator=g, dtype=dtype) for g in gens]).to(cond.device)
    cond_rep = cond.unsqueeze(0).expand(H, *cond.shape).reshape(H * B, *cond.shape[1:])
    for t in range(sched.T, 0, -1):
        eps = eps_model(x.reshape(H * B, *shape), cond_rep, t).reshape(x.shape)
        mu = reverse_mean(x, eps, t, sched)
        if t > 1:
            z = torch.stack([torch.randn((B, *shape), generator=g, dtype=dtype) for g in gens]).to(x.device)
            x = mu + float(sched.sigma2[t - 1]) ** 0.5 * z
        else:
            x = mu
    return x


def aggregate(hypotheses):
    """Element-wise mean over the leading hypothesis axis."""
    if isinstance(hypotheses, (list, tuple)):
        shapes = {tuple(np.shape(h)) for h in hypotheses}
        if len(shapes) != 1:
            raise ValueError(f"hypotheses have mismatched shapes {sorted(shapes)}")
        if isinstance(hypotheses[0], torch.Tensor):
            hypotheses = torch.stack(list(hypotheses))
        else:
            hypotheses = np.stack(hypotheses)
    if len(hypotheses) < 1:
        raise ValueError("need at least one hypothesis")
    return hypotheses.mean(0) if isinstance(hypotheses, torch.Tensor) else np.mean(hypotheses, axis=0)
