"""Keypoint occlusion patterns applied to 2D inputs."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .skeleton import SkeletonGraph

PATTERNS = ("none", "random", "random_leg_arm", "consecutive_leg", "consecutive_frames")

DEFAULT_P = {"random": 0.2, "random_leg_arm": 0.4}
DEFAULT_N = {"consecutive_leg": 10, "consecutive_frames": 5}


@dataclass(frozen=True)
class OcclusionSpec:
    """Occlusion pattern with its parameters.

    ``p`` is the hiding probability of the random patterns, ``n`` the span of
    the consecutive ones in frames. If ``fraction`` is set, the span is
    ``round(fraction * L)`` instead of ``n``. ``fixed`` asks training loops
    to draw one mask per clip and reuse it every epoch.
    """

    pattern: str = "none"
    p: float | None = None
    n: int | None = None
    fraction: float | None = None
    fixed: bool = False

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown occlusion pattern {self.pattern!r}; expected one of {PATTERNS}")
        if self.p is None and self.pattern in DEFAULT_P:
            object.__setattr__(self, "p", DEFAULT_P[self.pattern])
        if self.n is None and self.pattern in DEFAULT_N:
            object.__setattr__(self, "n", DEFAULT_N[self.pattern])
        if self.p is not None and not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")
        if self.n is not None and self.n < 0:
            raise ValueError(f"n must be non-negative, got {self.n}")
        if self.fraction is not None and not 0.0 <= self.fraction <= 1.0:
            raise ValueError(f"fraction must lie in [0, 1], got {self.fraction}")

    def span(self, L: int) -> int:
        n = int(round(self.fraction * L)) if self.fraction is not None else self.n
        if n > L:
            raise ValueError(f"cannot hide {n} consecutive frames in a clip of {L}")
        return n

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_value(cls, value) -> "OcclusionSpec":
        if value is None:
            return cls()
        if isinstance(value, OcclusionSpec):
            return value
        if isinstance(value, str):
            return cls(value)
        return cls(**value)


def generate_mask(spec: OcclusionSpec, L: int, J: int, rng: np.random.Generator, skeleton: SkeletonGraph | None = None):
    """Visibility mask of shape (L, J); True means visible.

    ``skeleton`` provides the ``left_arm`` / ``right_leg`` joint groups and
    is required by the limb patterns.
    """
    spec = OcclusionSpec.from_value(spec)
    mask = np.ones((L, J), dtype=bool)
    pat = spec.pattern
    if pat == "none":
        return mask
    if pat == "random":
        return rng.random((L, J)) >= spec.p
    if pat in ("random_leg_arm", "consecutive_leg") and skeleton is None:
        raise ValueError(f"pattern {pat!r} needs a skeleton for its joint groups")
    if skeleton is not None and skeleton.num_joints != J:
        raise ValueError(f"skeleton has {skeleton.num_joints} joints, mask has {J}")
    if pat == "random_leg_arm":
        joints = list(skeleton.group("left_arm")) + list(skeleton.group("right_leg"))
        frames = rng.random(L) < spec.p
        mask[np.ix_(frames, joints)] = False
        return mask
    n = spec.span(L)
    start = int(rng.integers(0, L - n + 1))
    if pat == "consecutive_leg":
        mask[start:start + n, list(skeleton.group("right_leg"))] = False
    else:
        mask[start:start + n] = False
    return mask


def generate_masks(spec, B, L, J, rng, skeleton=None):
    return np.stack([generate_mask(spec, L, J, rng, skeleton) for _ in range(B)]) if B else np.ones((0, L, J), bool)


def apply_mask(x2d, mask):
    """Zero the hidden keypoints (both pixel coordinates)."""
    x2d = np.asarray(x2d)
    mask = np.asarray(mask, dtype=bool)
    if x2d.shape[:-1] != mask.shape:
        raise ValueError(f"mask shape {mask.shape} does not match keypoints {x2d.shape[:-1]}")
    return np.where(mask[..., None], x2d, 0.0).astype(x2d.dtype, copy=False)
