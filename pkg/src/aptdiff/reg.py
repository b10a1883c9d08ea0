"""Regularizers that keep the fine-tuned model close to the prior, and the total objective.

Prior-side taps are always detached here: the prior is a frozen reference, so
gradients must never flow into it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from aptdiff.errors import NonFiniteError, RangeError, ShapeError, TapMismatchError
from aptdiff.tinynet import TapBundle

VAR_FLOOR = 1e-8


@dataclass(frozen=True)
class RegWeights:
    lambda_dist: float = 30.0
    lambda_attn: float = 3e-4

    def __post_init__(self):
        for name in ("lambda_dist", "lambda_attn"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise RangeError(f"{name} must be finite and >= 0, got {v}")


def feature_stats(h: torch.Tensor, reduction: str = "channel") -> tuple[torch.Tensor, torch.Tensor]:
    """Mean and population std of a (B, C, H, W) map.

    ``channel`` reduces over spatial positions (B, C); ``global`` over C, H and W (B, 1).
    """
    if reduction == "channel":
        flat = h.flatten(2)
    elif reduction == "global":
        flat = h.flatten(1)[:, None, :]
    else:
        raise RangeError(f"unknown stat reduction {reduction!r}")
    mu = flat.mean(dim=-1)
    var = flat.var(dim=-1, unbiased=False)
    return mu, var.clamp_min(VAR_FLOOR).sqrt()


def _check_ids(a: dict, b: dict, what: str):
    if set(a) != set(b):
        raise TapMismatchError(f"{what} tap ids differ: {sorted(a)} vs {sorted(b)}")
    for k in a:
        if a[k].shape != b[k].shape:
            raise TapMismatchError(f"{what} tap {k} shapes differ: {tuple(a[k].shape)} vs {tuple(b[k].shape)}")


def stat_losses(taps_theta: TapBundle, taps_phi: TapBundle, reduction: str = "channel"):
    """Sum over tapped layers of squared distances between feature means and stds.

    Returns ``(L_mu, L_sigma)``; per-sample squared norms are averaged over the batch.
    """
    _check_ids(taps_theta.features, taps_phi.features, "feature")
    l_mu = l_sigma = None
    for k in sorted(taps_theta.features):
        mu_t, sd_t = feature_stats(taps_theta.features[k], reduction)
        with torch.no_grad():
            mu_p, sd_p = feature_stats(taps_phi.features[k].detach(), reduction)
        m = (mu_t - mu_p).pow(2).sum(dim=1).mean()
        s = (sd_t - sd_p).pow(2).sum(dim=1).mean()
        l_mu = m if l_mu is None else l_mu + m
        l_sigma = s if l_sigma is None else l_sigma + s
    if l_mu is None:
        zero = torch.zeros(())
        return zero, zero.clone()
    return l_mu, l_sigma


def attn_align_loss(taps_theta: TapBundle, taps_phi: TapBundle) -> torch.Tensor:
    """Per layer ``(1/H) * ||sum_heads A_theta - sum_heads A_phi||^2`` over every query and token, summed over layers.

    Attention tensors are (B, H, queries, tokens) or (H, queries, tokens); the
    squared norm is taken per sample and averaged over the batch.
    """
    _check_ids(taps_theta.attentions, taps_phi.attentions, "attention")
    total = None
    for k in sorted(taps_theta.attentions):
        a_t = taps_theta.attentions[k]
        a_p = taps_phi.attentions[k].detach()
        if a_t.ndim == 3:
            a_t, a_p = a_t[None], a_p[None]
        if a_t.ndim != 4:
            raise ShapeError(f"attention tap {k} must be (B, H, Q, L), got {tuple(a_t.shape)}")
        heads = a_t.shape[1]
        d = a_t.sum(dim=1) - a_p.sum(dim=1)
        term = d.pow(2).flatten(1).sum(dim=1).mean() / heads
        total = term if total is None else total + term
    return torch.zeros(()) if total is None else total


def total_loss(weighted_dm, l_mu, l_sigma, l_attn, weights: RegWeights):
    """``weighted_dm + lambda_dist * (L_mu + L_sigma) + lambda_attn * L_attn``."""
    for v in (weighted_dm, l_mu, l_sigma, l_attn):
        v = v.item() if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(v):
            raise NonFiniteError(f"non-finite loss term {v}")
    return weighted_dm + weights.lambda_dist * (l_mu + l_sigma) + weights.lambda_attn * l_attn
