"""Video denoiser with named, hookable attention sites.

A small UNet predicts the noise in a window of video latents. Conditioning
enters three ways: the reference frame latent is channel-concatenated to
every frame (and pooled into the timestep embedding), per-frame audio
envelope features are consumed by cross-attention, and a learned null audio
row supports classifier-free guidance over audio only.

Attention is organized in triplets per decoder resolution level, in fixed
order [spatial self, audio cross, temporal]. Every site has a stable id
("dec2.spatial", ...). Before each attention product the module offers its
query/key/value tensors to an optional hook context, which may record them
or swap in replacements; with no hooks (or none returning overrides) the
tensors pass through untouched, bitwise.

Tensor layouts at the sites, with B batch, F frames, h*w spatial tokens,
D audio slots, C channels:
    spatial self:  q, k, v  [B*F, h*w, C]
    audio cross:   q [B*F, h*w, C];  k, v [B*F, D, C]  (frame-aligned rows)
    temporal:      q, k, v  [B*h*w, F, C]  (per location, across frames)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np
import torch
from torch import nn

from .errors import ValidationError


class AttentionKind(str, Enum):
    SPATIAL_SELF = "spatial_self"
    AUDIO_CROSS = "audio_cross"
    TEMPORAL = "temporal"


@dataclass(frozen=True)
class AttentionSite:
    block_id: str
    kind: AttentionKind
    resolution_level: int


@dataclass(frozen=True)
class AttentionRecord:
    """Q/K/V captured at one site during one denoising step."""

    site: AttentionSite
    step_index: int
    q: torch.Tensor
    k: torch.Tensor
    v: torch.Tensor


@dataclass
class ConditioningBundle:
    """Everything the denoiser is told besides the noisy latents."""

    audio_feats: np.ndarray  # [F, D] float32
    ref_latent: np.ndarray  # [C, H, W] float32
    ref_embedding: Optional[np.ndarray] = None  # pooled, filled lazily
    null_audio: bool = False

    def nulled(self) -> "ConditioningBundle":
        """Copy with the audio condition dropped (for guidance)."""
        return replace(self, null_audio=True)


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 3
    base_width: int = 64
    num_down_levels: int = 2
    attention_head_dim: int = 32
    audio_feature_dim: int = 8
    max_frames: int = 16

    def validate(self) -> None:
        if self.base_width % 8 != 0:
            raise ValidationError(f"base_width must be a multiple of 8, got {self.base_width}")
        if not 1 <= self.num_down_levels <= 3:
            raise ValidationError(f"num_down_levels must be 1..3, got {self.num_down_levels}")
        for k in range(1, self.num_down_levels + 1):
            ch = self.base_width * (1 << (k - 1))
            if ch % self.attention_head_dim != 0:
                raise ValidationError(
                    f"level {k} width {ch} not divisible by head dim {self.attention_head_dim}"
                )
        if self.audio_feature_dim < 1 or self.max_frames < 2:
            raise ValidationError("audio_feature_dim must be >= 1 and max_frames >= 2")

    def to_dict(self) -> dict:
        return {
            "latent_channels": self.latent_channels,
            "base_width": self.base_width,
            "num_down_levels": self.num_down_levels,
            "attention_head_dim": self.attention_head_dim,
            "audio_feature_dim": self.audio_feature_dim,
            "max_frames": self.max_frames,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


def attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    replace: Optional[dict] = None,
    n_heads: int = 1,
    return_weights: bool = False,
):
    """softmax(q k^T / sqrt(d_head)) v with optional pre-product overrides.

    `replace` maps a subset of {"q", "k", "v"} to drop-in tensors that must
    match the incumbent shapes exactly; substitution happens before the
    product so downstream math cannot tell records from live tensors.
    """
    if replace:
        unknown = set(replace) - {"q", "k", "v"}
        if unknown:
            raise ValidationError(f"unknown replacement fields {sorted(unknown)}")
        fields = {"q": q, "k": k, "v": v}
        for name, new in replace.items():
            if tuple(new.shape) != tuple(fields[name].shape):
                raise ValidationError(
                    f"replacement {name} shape {tuple(new.shape)} != {tuple(fields[name].shape)}"
                )
            fields[name] = new
        q, k, v = fields["q"], fields["k"], fields["v"]
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValidationError(
            f"incompatible attention shapes q={tuple(q.shape)} k={tuple(k.shape)} v={tuple(v.shape)}"
        )
    d = q.shape[-1]
    if d % n_heads != 0 or v.shape[-1] % n_heads != 0:
        raise ValidationError(f"dim {d} not divisible by {n_heads} heads")

    def split(x):
        *lead, t, dim = x.shape
        return x.view(*lead, t, n_heads, dim // n_heads).transpose(-3, -2)

    qh, kh, vh = split(q), split(k), split(v)
    weights = torch.softmax(qh @ kh.transpose(-1, -2) / math.sqrt(d // n_heads), dim=-1)
    out = weights @ vh
    out = out.transpose(-3, -2).reshape(*q.shape[:-1], v.shape[-1])
    if return_weights:
        return out, weights
    return out


def _timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1)
    )
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, ch_in: int, ch_out: int, t_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, ch_in)
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.t_proj = nn.Linear(t_dim, ch_out)
        self.norm2 = nn.GroupNorm(8, ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.t_proj(temb)[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class AttentionTriplet(nn.Module):
    """Spatial-self, audio-cross and temporal attention at one resolution."""

    def __init__(self, ch: int, head_dim: int, audio_dim: int, max_frames: int, block_id: str, level: int):
        super().__init__()
        self.heads = ch // head_dim
        self.block_id = block_id
        self.sites = {
            AttentionKind.SPATIAL_SELF: AttentionSite(f"{block_id}.spatial", AttentionKind.SPATIAL_SELF, level),
            AttentionKind.AUDIO_CROSS: AttentionSite(f"{block_id}.cross", AttentionKind.AUDIO_CROSS, level),
            AttentionKind.TEMPORAL: AttentionSite(f"{block_id}.temporal", AttentionKind.TEMPORAL, level),
        }
        self.norm_s = nn.LayerNorm(ch)
        self.sq = nn.Linear(ch, ch, bias=False)
        self.sk = nn.Linear(ch, ch, bias=False)
        self.sv = nn.Linear(ch, ch, bias=False)
        self.so = nn.Linear(ch, ch)

        self.norm_c = nn.LayerNorm(ch)
        self.cq = nn.Linear(ch, ch, bias=False)
        self.ck = nn.Linear(ch, ch, bias=False)
        self.cv = nn.Linear(ch, ch, bias=False)
        self.co = nn.Linear(ch, ch)
        self.slot_emb = nn.Parameter(torch.randn(audio_dim, ch) * 0.2)
        self.slot_scale = nn.Parameter(torch.ones(audio_dim, ch) + torch.randn(audio_dim, ch) * 0.2)

        self.norm_t = nn.LayerNorm(ch)
        self.tq = nn.Linear(ch, ch, bias=False)
        self.tk = nn.Linear(ch, ch, bias=False)
        self.tv = nn.Linear(ch, ch, bias=False)
        self.to_ = nn.Linear(ch, ch)
        # learned frame position code, zero so untrained temporal attention is
        # permutation equivariant
        self.frame_pos = nn.Parameter(torch.zeros(max_frames, ch))

    def _offer(self, ctx, kind: AttentionKind, q, k, v):
        if ctx is None:
            return q, k, v
        return ctx.apply(self.sites[kind], q, k, v)

    def forward(self, x: torch.Tensor, audio: torch.Tensor, batch: int, frames: int, ctx=None) -> torch.Tensor:
        bf, ch, hh, ww = x.shape
        tokens = x.view(bf, ch, hh * ww).transpose(1, 2)  # [B*F, hw, ch]

        t = self.norm_s(tokens)
        q, k, v = self.sq(t), self.sk(t), self.sv(t)
        q, k, v = self._offer(ctx, AttentionKind.SPATIAL_SELF, q, k, v)
        tokens = tokens + self.so(attention(q, k, v, n_heads=self.heads))

        t = self.norm_c(tokens)
        atok = self.slot_emb[None] + audio[:, :, None] * self.slot_scale[None]  # [B*F, D, ch]
        q = self.cq(t)
        k, v = self.ck(atok), self.cv(atok)
        q, k, v = self._offer(ctx, AttentionKind.AUDIO_CROSS, q, k, v)
        tokens = tokens + self.co(attention(q, k, v, n_heads=self.heads))

        across = tokens.view(batch, frames, hh * ww, ch).permute(0, 2, 1, 3)
        across = across.reshape(batch * hh * ww, frames, ch)  # [B*hw, F, ch]
        t = self.norm_t(across) + self.frame_pos[:frames][None]
        q, k, v = self.tq(t), self.tk(t), self.tv(t)
        q, k, v = self._offer(ctx, AttentionKind.TEMPORAL, q, k, v)
        across = across + self.to_(attention(q, k, v, n_heads=self.heads))

        tokens = across.view(batch, hh * ww, frames, ch).permute(0, 2, 1, 3).reshape(bf, hh * ww, ch)
        return tokens.transpose(1, 2).view(bf, ch, hh, ww)


class Denoiser(nn.Module):
    """Noise predictor over [B, F, C, H, W] latent windows."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        config.validate()
        self.config = config
        c = config.latent_channels
        w = config.base_width
        levels = config.num_down_levels
        t_dim = 4 * w
        self.t_dim = t_dim
        widths = [w * (1 << k) for k in range(levels)]

        self.time_mlp = nn.Sequential(nn.Linear(w, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim))
        self.ref_conv = nn.Sequential(
            nn.Conv2d(c, w, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(w, w, 3, stride=2, padding=1),
            nn.SiLU(),
        )
        self.ref_proj = nn.Linear(w, t_dim)

        self.stem = nn.Conv2d(2 * c, widths[0], 3, stride=2, padding=1)
        self.enc = nn.ModuleList([ResBlock(widths[k], widths[k], t_dim) for k in range(levels)])
        self.down = nn.ModuleList(
            [nn.Conv2d(widths[k], widths[k + 1], 3, stride=2, padding=1) for k in range(levels - 1)]
        )
        self.mid = ResBlock(widths[-1], widths[-1], t_dim)
        self.dec = nn.ModuleList(
            [ResBlock(2 * widths[k], widths[k], t_dim) for k in range(levels)]
        )
        self.triplets = nn.ModuleList(
            [
                AttentionTriplet(
                    widths[k],
                    config.attention_head_dim,
                    config.audio_feature_dim,
                    config.max_frames,
                    f"dec{k + 1}",
                    k + 1,
                )
                for k in range(levels)
            ]
        )
        self.up = nn.ModuleList(
            [
                nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(widths[k], widths[k - 1], 3, padding=1))
                for k in range(1, levels)
            ]
        )
        head_w = max(w // 2, 8)
        self.head_up = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(widths[0], head_w, 3, padding=1)
        )
        self.head_conv = nn.Conv2d(head_w + 2 * c, head_w, 3, padding=1)
        self.out_conv = nn.Conv2d(head_w, c, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

        self.null_audio_feat = nn.Parameter(torch.full((config.audio_feature_dim,), -0.5))

    def attention_sites(self) -> list[AttentionSite]:
        """All hookable sites in forward execution order (deepest level first)."""
        sites = []
        for trip in reversed(self.triplets):
            for kind in (AttentionKind.SPATIAL_SELF, AttentionKind.AUDIO_CROSS, AttentionKind.TEMPORAL):
                sites.append(trip.sites[kind])
        return sites

    def encode_reference(self, ref: torch.Tensor) -> torch.Tensor:
        """Pooled appearance embedding [B, t_dim] of reference latents [B, C, H, W]."""
        pooled = self.ref_conv(ref).mean(dim=(-2, -1))
        return self.ref_proj(pooled)

    def forward(
        self,
        z: torch.Tensor,
        t: torch.Tensor,
        ref: torch.Tensor,
        audio: torch.Tensor,
        null_audio: Optional[torch.Tensor] = None,
        ref_emb: Optional[torch.Tensor] = None,
        ctx=None,
    ) -> torch.Tensor:
        cfg = self.config
        if z.ndim != 5 or z.shape[2] != cfg.latent_channels:
            raise ValidationError(f"latents must be [B, F, {cfg.latent_channels}, H, W], got {tuple(z.shape)}")
        b, f, c, hh, ww = z.shape
        if f > cfg.max_frames:
            raise ValidationError(f"{f} frames exceeds max_frames {cfg.max_frames}")
        div = 1 << cfg.num_down_levels
        if hh % div or ww % div:
            raise ValidationError(f"spatial size {hh}x{ww} not divisible by {div}")
        if audio.shape != (b, f, cfg.audio_feature_dim):
            raise ValidationError(
                f"audio must be [{b}, {f}, {cfg.audio_feature_dim}], got {tuple(audio.shape)}"
            )
        if ref.shape != (b, c, hh, ww):
            raise ValidationError(f"reference must be [{b}, {c}, {hh}, {ww}], got {tuple(ref.shape)}")

        if null_audio is not None:
            audio = torch.where(
                null_audio[:, None, None], self.null_audio_feat.view(1, 1, -1), audio
            )
        if ref_emb is None:
            ref_emb = self.encode_reference(ref)
        temb = self.time_mlp(_timestep_embedding(t, self.config.base_width)) + ref_emb
        temb_f = temb.repeat_interleave(f, dim=0)

        x_in = torch.cat([z, ref[:, None].expand(-1, f, -1, -1, -1)], dim=2)
        x_in = x_in.reshape(b * f, 2 * c, hh, ww)
        audio_f = audio.reshape(b * f, cfg.audio_feature_dim)

        h = self.stem(x_in)
        skips = []
        for k, block in enumerate(self.enc):
            h = block(h, temb_f)
            skips.append(h)
            if k < len(self.down):
                h = self.down[k](h)
        h = self.mid(h, temb_f)
        for k in reversed(range(cfg.num_down_levels)):
            h = self.dec[k](torch.cat([h, skips[k]], dim=1), temb_f)
            h = self.triplets[k](h, audio_f, b, f, ctx)
            if k > 0:
                h = self.up[k - 1](h)
        h = self.head_up(h)
        h = torch.nn.functional.silu(self.head_conv(torch.cat([h, x_in], dim=1)))
        eps = self.out_conv(h)
        return eps.view(b, f, c, hh, ww)


def build_model(config: DenoiserConfig, seed: int = 0) -> Denoiser:
    """Construct a denoiser with seeded, reproducible initialization."""
    from .rng import stream_seed

    torch.manual_seed(stream_seed(seed, "model-init"))
    return Denoiser(config)


def denoise(
    model: Denoiser,
    z_t: np.ndarray,
    step_index: int,
    t: int,
    cond: ConditioningBundle,
    hooks=None,
) -> np.ndarray:
    """Predict noise for one latent video [F, C, H, W] at a shared timestep.

    `hooks` is an optional context whose `apply(site, q, k, v)` is offered
    every attention tensor; its step index is set to `step_index` first.
    """
    f = z_t.shape[0]
    if cond.audio_feats.shape[0] != f:
        raise ValidationError(
            f"conditioning has {cond.audio_feats.shape[0]} audio rows for {f} frames"
        )
    model.eval()
    if hooks is not None:
        hooks.step_index = step_index
    with torch.no_grad():
        z = torch.from_numpy(np.ascontiguousarray(z_t, dtype=np.float32))[None]
        ref = torch.from_numpy(np.ascontiguousarray(cond.ref_latent, dtype=np.float32))[None]
        audio = torch.from_numpy(np.ascontiguousarray(cond.audio_feats, dtype=np.float32))[None]
        if cond.ref_embedding is None:
            cond.ref_embedding = model.encode_reference(ref)[0].numpy()
        ref_emb = torch.from_numpy(cond.ref_embedding)[None]
        eps = model(
            z,
            torch.tensor([t], dtype=torch.long),
            ref,
            audio,
            null_audio=torch.tensor([cond.null_audio]),
            ref_emb=ref_emb,
            ctx=hooks,
        )
    return eps[0].numpy()
