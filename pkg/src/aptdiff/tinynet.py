"""A miniature text-conditioned U-Net denoiser.

One parameter set plays both roles needed for personalization: with adapters
off it is the frozen prior, with adapters on it is the fine-tuned model. Every
attention projection (q/k/v/out, self- and cross-attention) is a
:class:`LoRALinear`. Up-block levels listed in ``tap_levels`` report their
output feature map and their cross-attention probabilities.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from aptdiff.errors import EmptyInputError, RangeError, ShapeError

TapId = tuple[int, int]


@dataclass(frozen=True)
class NetConfig:
    image_size: int = 32
    in_channels: int = 3
    base_channels: int = 16
    channel_multipliers: tuple[int, ...] = (1, 2, 2)
    attention_levels: tuple[int, ...] = (0, 1, 2)
    self_attention_levels: tuple[int, ...] = (1, 2)
    num_heads: int = 2
    token_dim: int = 32
    context_len: int = 8
    tap_levels: tuple[int, ...] = (0, 1)
    num_timesteps: int = 1000
    groups: int = 8

    def __post_init__(self):
        for name in ("channel_multipliers", "attention_levels", "self_attention_levels", "tap_levels"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        n = len(self.channel_multipliers)
        if n < 1:
            raise RangeError("need at least one resolution level")
        if self.image_size % (2 ** (n - 1)):
            raise RangeError(f"image_size {self.image_size} not divisible by 2^{n - 1}")
        for lvl in self.attention_levels + self.self_attention_levels + self.tap_levels:
            if not 0 <= lvl < n:
                raise RangeError(f"level {lvl} outside [0, {n})")
        if not set(self.self_attention_levels) <= set(self.attention_levels):
            raise RangeError("self-attention levels must also carry cross-attention")
        if not set(self.tap_levels) <= set(self.attention_levels):
            raise RangeError("every tap level needs an attention block to tap")
        for lvl in self.attention_levels:
            if self.channels(lvl) % self.num_heads:
                raise RangeError(f"{self.num_heads} heads do not divide width {self.channels(lvl)} at level {lvl}")
        for lvl in range(n):
            if self.channels(lvl) % self.groups:
                raise RangeError(f"group count {self.groups} does not divide width {self.channels(lvl)}")

    def channels(self, level: int) -> int:
        return self.base_channels * self.channel_multipliers[level]

    def resolution(self, level: int) -> int:
        return self.image_size // 2**level

    def tap_ids(self) -> list[TapId]:
        return [(lvl, 0) for lvl in sorted(self.tap_levels)]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


@dataclass
class TapBundle:
    features: dict[TapId, torch.Tensor] = field(default_factory=dict)
    attentions: dict[TapId, torch.Tensor] = field(default_factory=dict)

    def ids(self) -> list[TapId]:
        return sorted(self.features)

    def detach(self) -> "TapBundle":
        return TapBundle({k: v.detach() for k, v in self.features.items()},
                         {k: v.detach() for k, v in self.attentions.items()})


class LoRALinear(nn.Module):
    """``base(x) + scale * up(down(x))`` with ``up`` zero-initialised."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        self.base = nn.Linear(in_features, out_features, bias=bias)
        self.rank = 0
        self.scale = 1.0
        self.lora_down = None
        self.lora_up = None

    @property
    def in_features(self):
        return self.base.in_features

    @property
    def out_features(self):
        return self.base.out_features

    def attach(self, rank: int, generator: torch.Generator | None = None) -> None:
        self.rank = rank
        if rank == 0:
            self.lora_down = self.lora_up = None
            return
        down = torch.randn(rank, self.in_features, generator=generator) / math.sqrt(self.in_features)
        self.lora_down = nn.Parameter(down)
        self.lora_up = nn.Parameter(torch.zeros(self.out_features, rank))

    def forward(self, x: torch.Tensor, adapters_on: bool = False) -> torch.Tensor:
        y = self.base(x)
        if adapters_on and self.rank > 0 and self.scale != 0.0:
            y = y + self.scale * F.linear(F.linear(x, self.lora_down), self.lora_up)
        return y


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Attention(nn.Module):
    """Multi-head attention whose projections are all adapter-capable."""

    def __init__(self, dim: int, context_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.to_q = LoRALinear(dim, dim, bias=False)
        self.to_k = LoRALinear(context_dim, dim, bias=False)
        self.to_v = LoRALinear(context_dim, dim, bias=False)
        self.to_out = LoRALinear(dim, dim)

    def forward(self, x, context, adapters_on):
        B, N, C = x.shape
        h, d = self.heads, C // self.heads
        q = self.to_q(x, adapters_on).view(B, N, h, d).transpose(1, 2)
        k = self.to_k(context, adapters_on).view(B, -1, h, d).transpose(1, 2)
        v = self.to_v(context, adapters_on).view(B, -1, h, d).transpose(1, 2)
        probs = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)  # (B, H, N, M)
        out = (probs @ v).transpose(1, 2).reshape(B, N, C)
        return self.to_out(out, adapters_on), probs


class TransformerBlock(nn.Module):
    def __init__(self, ch: int, token_dim: int, heads: int, groups: int, self_attention: bool):
        super().__init__()
        self.norm = nn.GroupNorm(groups, ch)
        self.proj_in = nn.Conv2d(ch, ch, 1)
        self.self_attn = Attention(ch, ch, heads) if self_attention else None
        self.ln1 = nn.LayerNorm(ch) if self_attention else None
        self.ln2 = nn.LayerNorm(ch)
        self.cross_attn = Attention(ch, token_dim, heads)
        self.ln3 = nn.LayerNorm(ch)
        self.ff = nn.Sequential(nn.Linear(ch, 2 * ch), nn.GELU(), nn.Linear(2 * ch, ch))
        self.proj_out = nn.Conv2d(ch, ch, 1)

    def forward(self, x, context, adapters_on):
        B, C, H, W = x.shape
        h = self.proj_in(self.norm(x)).flatten(2).transpose(1, 2)
        if self.self_attn is not None:
            n = self.ln1(h)
            h = h + self.self_attn(n, n, adapters_on)[0]
        a, probs = self.cross_attn(self.ln2(h), context, adapters_on)
        h = h + a
        h = h + self.ff(self.ln3(h))
        h = h.transpose(1, 2).reshape(B, C, H, W)
        return x + self.proj_out(h), probs


class TinyUNet(nn.Module):
    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = cfg = config
        levels = len(cfg.channel_multipliers)
        c0 = cfg.base_channels
        temb_dim = 4 * c0
        self.time_mlp = nn.Sequential(nn.Linear(c0, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.pos_emb = nn.Parameter(torch.randn(cfg.context_len, cfg.token_dim) * 0.02)
        self.conv_in = nn.Conv2d(cfg.in_channels, c0, 3, padding=1)

        def attn(level):
            if level not in cfg.attention_levels:
                return None
            return TransformerBlock(cfg.channels(level), cfg.token_dim, cfg.num_heads, cfg.groups,
                                    level in cfg.self_attention_levels)

        self.down_res, self.down_attn, self.downsample = nn.ModuleList(), nn.ModuleList(), nn.ModuleList()
        ch = c0
        for lvl in range(levels):
            cout = cfg.channels(lvl)
            self.down_res.append(ResBlock(ch, cout, temb_dim, cfg.groups))
            self.down_attn.append(attn(lvl) or nn.Identity())
            self.downsample.append(nn.Conv2d(cout, cout, 3, stride=2, padding=1) if lvl < levels - 1 else nn.Identity())
            ch = cout

        deepest = levels - 1
        self.mid_res1 = ResBlock(ch, ch, temb_dim, cfg.groups)
        self.mid_attn = attn(deepest) or nn.Identity()
        self.mid_res2 = ResBlock(ch, ch, temb_dim, cfg.groups)

        # indexed by level, applied deepest first
        self.up_res, self.up_attn, self.upsample = nn.ModuleList(), nn.ModuleList(), nn.ModuleList()
        for lvl in range(levels):
            cout = cfg.channels(lvl)
            cin = (cfg.channels(lvl + 1) if lvl < deepest else ch) + cout
            self.up_res.append(ResBlock(cin, cout, temb_dim, cfg.groups))
            self.up_attn.append(attn(lvl) or nn.Identity())
            self.upsample.append(nn.Conv2d(cout, cout, 3, padding=1) if lvl > 0 else nn.Identity())

        self.norm_out = nn.GroupNorm(cfg.groups, c0)
        self.conv_out = nn.Conv2d(c0, cfg.in_channels, 3, padding=1)
        self.adapter_rank = 0

    # -- adapters ---------------------------------------------------------

    def lora_layers(self) -> list[LoRALinear]:
        return [m for m in self.modules() if isinstance(m, LoRALinear)]

    def attach_adapters(self, rank: int, generator: torch.Generator | None = None) -> None:
        if rank < 0:
            raise RangeError("adapter rank must be >= 0")
        for layer in self.lora_layers():
            layer.attach(rank, generator)
        self.adapter_rank = rank

    def adapter_params(self) -> list[nn.Parameter]:
        params = []
        for layer in self.lora_layers():
            if layer.rank:
                params += [layer.lora_down, layer.lora_up]
        return params

    def base_params(self) -> list[nn.Parameter]:
        adapter = {id(p) for p in self.adapter_params()}
        return [p for p in self.parameters() if id(p) not in adapter]

    def freeze_base(self, frozen: bool = True) -> None:
        for p in self.base_params():
            p.requires_grad_(not frozen)

    def set_adapter_scale(self, scale: float) -> None:
        if not 0.0 <= scale <= 1.0:
            raise RangeError(f"adapter scale must lie in [0, 1], got {scale}")
        for layer in self.lora_layers():
            layer.scale = float(scale)

    @property
    def adapter_scale(self) -> float:
        layers = self.lora_layers()
        return layers[0].scale if layers else 1.0

    def base_state(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.state_dict().items() if ".lora_" not in k}

    def adapter_state(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.state_dict().items() if ".lora_" in k}

    # -- forward ----------------------------------------------------------

    def forward(self, x_t: torch.Tensor, t, tokens: torch.Tensor, adapters_on: bool = False,
                capture_taps: bool = False):
        """Predict the noise in ``x_t``.

        Args:
            x_t: (B, C, H, W) noised images.
            t: int or (B,) integer timesteps in [0, num_timesteps).
            tokens: (L, token_dim) or (B, L, token_dim) token embeddings.
            adapters_on: run the fine-tuned model instead of the frozen prior.
            capture_taps: also return a :class:`TapBundle`.

        Returns:
            ``eps_hat``, or ``(eps_hat, taps)`` when ``capture_taps``.
        """
        cfg = self.config
        expect = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if x_t.ndim != 4 or tuple(x_t.shape[1:]) != expect:
            raise ShapeError(f"x_t must be (B, {expect[0]}, {expect[1]}, {expect[2]}), got {tuple(x_t.shape)}")
        B = x_t.shape[0]
        if tokens.ndim == 2:
            tokens = tokens.unsqueeze(0).expand(B, -1, -1)
        if tokens.ndim != 3 or tokens.shape[1] == 0:
            raise EmptyInputError("conditioning needs at least one token")
        if tokens.shape[0] != B or tokens.shape[2] != cfg.token_dim or tokens.shape[1] > cfg.context_len:
            raise ShapeError(f"tokens shape {tuple(tokens.shape)} incompatible with batch {B}")
        t = torch.as_tensor(t, dtype=torch.long)
        if t.ndim == 0:
            t = t.expand(B)
        if int(t.min()) < 0 or int(t.max()) >= cfg.num_timesteps:
            raise RangeError(f"timestep outside [0, {cfg.num_timesteps})")

        context = tokens + self.pos_emb[: tokens.shape[1]]
        temb = self.time_mlp(timestep_embedding(t, cfg.base_channels))
        taps = TapBundle() if capture_taps else None

        h = self.conv_in(x_t)
        skips = []
        levels = len(cfg.channel_multipliers)
        for lvl in range(levels):
            h = self.down_res[lvl](h, temb)
            if lvl in cfg.attention_levels:
                h, _ = self.down_attn[lvl](h, context, adapters_on)
            skips.append(h)
            h = self.downsample[lvl](h)

        h = self.mid_res1(h, temb)
        if levels - 1 in cfg.attention_levels:
            h, _ = self.mid_attn(h, context, adapters_on)
        h = self.mid_res2(h, temb)

        for lvl in reversed(range(levels)):
            h = self.up_res[lvl](torch.cat([h, skips.pop()], dim=1), temb)
            if lvl in cfg.attention_levels:
                h, probs = self.up_attn[lvl](h, context, adapters_on)
                if taps is not None and lvl in cfg.tap_levels:
                    taps.features[(lvl, 0)] = h
                    taps.attentions[(lvl, 0)] = probs
            if lvl > 0:
                h = self.upsample[lvl](F.interpolate(h, scale_factor=2.0, mode="nearest"))

        eps = self.conv_out(F.silu(self.norm_out(h)))
        return (eps, taps) if capture_taps else eps
