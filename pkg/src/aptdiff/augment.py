"""Probabilistic zoom-out + rotation applied to clean images before noising."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from aptdiff.errors import RangeError


@dataclass(frozen=True)
class AugmentPolicy:
    scale_range: tuple[float, float] = (1.0, 3.0)
    rotation_range: tuple[float, float] = (-15.0, 15.0)
    fill: float | str = "mean"  # a constant, or "mean" for the per-channel image mean
    p_max: float = 0.8

    def __post_init__(self):
        lo, hi = self.scale_range
        if lo < 1.0 or hi < lo:
            raise RangeError(f"zoom-out scales must satisfy 1 <= lo <= hi, got {self.scale_range}")
        if self.rotation_range[0] != -self.rotation_range[1] or self.rotation_range[1] < 0:
            raise RangeError(f"rotation range must be symmetric about 0, got {self.rotation_range}")
        if not 0.0 <= self.p_max <= 1.0:
            raise RangeError(f"p_max must lie in [0, 1], got {self.p_max}")
        if isinstance(self.fill, str) and self.fill != "mean":
            raise RangeError(f"fill must be a number or 'mean', got {self.fill!r}")


@dataclass(frozen=True)
class AugmentParams:
    scale: float = 1.0
    angle: float = 0.0


def affine_zoom_rotate(x: torch.Tensor, scale: float, angle_deg: float, fill) -> torch.Tensor:
    """Shrink content by ``1/scale`` about the centre, rotate by ``angle_deg``, pad with ``fill``.

    ``x`` is (C, H, W) or (B, C, H, W). Exposed pixels are a bilinear blend
    towards ``fill``, so outputs stay inside the convex hull of input and fill.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    B, C, H, W = x.shape
    if isinstance(fill, str):
        fill_v = x.mean(dim=(2, 3), keepdim=True)
    else:
        fill_v = torch.full((B, C, 1, 1), float(fill), dtype=x.dtype)
    a = math.radians(angle_deg)
    cos, sin = math.cos(a), math.sin(a)
    # output normalized coord p samples input at scale * R(-angle) p
    theta = torch.tensor([[scale * cos, scale * sin, 0.0],
                          [-scale * sin, scale * cos, 0.0]], dtype=x.dtype)
    grid = F.affine_grid(theta.expand(B, 2, 3), [B, C, H, W], align_corners=False)
    warped = F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    cover = F.grid_sample(torch.ones(B, 1, H, W, dtype=x.dtype), grid, mode="bilinear",
                          padding_mode="zeros", align_corners=False)
    out = warped + (1.0 - cover) * fill_v
    return out[0] if squeeze else out


def maybe_augment(x0: torch.Tensor, p: float, policy: AugmentPolicy, rng: torch.Generator):
    """With probability ``p`` apply a random zoom-out/rotation to ``x0``.

    Three uniforms are drawn on every call whether or not the transform fires,
    so the rng stream advances identically regardless of ``p``.

    Returns:
        ``(image, applied, params)``; ``params`` is ``None`` when not applied.
    """
    if not 0.0 <= p <= 1.0:
        raise RangeError(f"augmentation probability must lie in [0, 1], got {p}")
    u, su, au = torch.rand(3, generator=rng, dtype=torch.float64).tolist()
    if not u < p:
        return x0, False, None
    lo, hi = policy.scale_range
    scale = lo + (hi - lo) * su
    rot = policy.rotation_range[1]
    angle = -rot + 2.0 * rot * au
    return affine_zoom_rotate(x0, scale, angle, policy.fill), True, AugmentParams(scale, angle)


def empirical_rate(p: float, n: int, rng: torch.Generator, policy: AugmentPolicy | None = None) -> float:
    """Fraction of ``n`` calls on a dummy image for which the transform fired."""
    if n < 1:
        raise RangeError("n must be >= 1")
    policy = policy or AugmentPolicy()
    dummy = torch.zeros(1, 4, 4)
    hits = sum(maybe_augment(dummy, p, policy, rng)[1] for _ in range(n))
    return hits / n
