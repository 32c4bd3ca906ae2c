"""Pixel decoder: M layers of per-scale self-attention, cross-scale mixing and
text-to-pixel attention, followed by a linear head producing per-pixel
embeddings ``Z`` at the fine scale."""
import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .attention import FeedForward, MultiHeadAttention
from .errors import ConfigError


class TextToPixelAttention(nn.Module):
    """Single-head cross-attention with pixels as queries and the K textual
    cluster centers as keys/values; residual update ``z + W V``.

    ``last_weights`` holds the most recent attention weights (B, L, K).
    """

    def __init__(self, dim, scaled=True):
        super().__init__()
        self.dim = dim
        self.scaled = scaled
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.last_weights = None

    def forward(self, z, centers):
        if z.shape[-1] != self.dim or centers.shape[-1] != self.dim:
            raise ConfigError(
                f"text-to-pixel attention expects feature dim {self.dim}, "
                f"got z {tuple(z.shape)} and centers {tuple(centers.shape)}")
        logits = self.q_proj(z) @ self.k_proj(centers).transpose(-2, -1)
        if self.scaled:
            logits = logits / math.sqrt(self.dim)
        w = torch.softmax(logits, dim=-1)
        self.last_weights = w
        return z + w @ self.v_proj(centers), w


def text_to_pixel_attention(z, centers, block):
    """Returns ``(refined z, W)``; ``centers`` may be (K, D) or (B, K, D)."""
    return block(z, centers)


def _resample(x, shape):
    if tuple(x.shape[-2:]) == tuple(shape):
        return x
    return F.interpolate(x, size=shape, mode="bilinear", align_corners=False)


class PixelDecoderLayer(nn.Module):

    def __init__(self, dim, nhead=4, ffn_dim=64, num_scales=3, text_to_pixel=True, scaled=True):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, nhead)
        self.norm_sa = nn.LayerNorm(dim)
        self.mix = nn.Linear(num_scales * dim, dim)
        self.norm_mix = nn.LayerNorm(dim)
        self.t2p = TextToPixelAttention(dim, scaled) if text_to_pixel else None
        self.ffn = FeedForward(dim, ffn_dim)
        self.norm_ffn = nn.LayerNorm(dim)

    def forward(self, feats, shapes, centers=None):
        b, d = feats[0].shape[0], feats[0].shape[-1]
        feats = [self.norm_sa(f + self.self_attn(f, need_weights=False)[0]) for f in feats]
        grids = [f.transpose(1, 2).reshape(b, d, *s) for f, s in zip(feats, shapes)]
        mixed = []
        for f, s in zip(feats, shapes):
            # every scale sees every other scale resampled to its own grid
            ctx = torch.cat([_resample(g, s) for g in grids], dim=1).flatten(2).transpose(1, 2)
            mixed.append(self.norm_mix(f + self.mix(ctx)))
        z = torch.cat(mixed, dim=1)
        w = None
        if self.t2p is not None:
            if centers is None:
                raise ConfigError("text-to-pixel attention enabled but no cluster centers given")
            z, w = self.t2p(z, centers)
        z = self.norm_ffn(z + self.ffn(z))
        sizes = [s[0] * s[1] for s in shapes]
        return list(torch.split(z, sizes, dim=1)), w


@dataclass
class PixelDecoderOutput:
    features: list        # refined per-scale (B, h_s*w_s, D), order fine, mid, coarse
    shapes: list
    Z: torch.Tensor       # (B, H', W', D) at the fine scale
    stage0: list          # per-scale features entering layer 0 (m = 0)
    attn_weights: list    # per-layer W (B, L, K) or None


class PixelDecoder(nn.Module):

    def __init__(self, dim=32, num_layers=6, nhead=4, ffn_dim=64, num_scales=3,
                 text_to_pixel=True, scaled=True):
        super().__init__()
        self.level_embed = nn.Parameter(torch.zeros(num_scales, dim))
        self.layers = nn.ModuleList(
            PixelDecoderLayer(dim, nhead, ffn_dim, num_scales, text_to_pixel, scaled)
            for _ in range(num_layers))
        self.text_to_pixel = text_to_pixel
        self.mask_head = nn.Linear(dim, dim)

    def forward(self, ms_features, shapes, centers=None):
        if len(ms_features) != len(self.level_embed):
            raise ConfigError(f"expected {len(self.level_embed)} scales, got {len(ms_features)}")
        stage0 = list(ms_features)
        feats = stage0
        if len(self.layers):
            feats = [f + self.level_embed[i] for i, f in enumerate(feats)]
        weights = []
        for layer in self.layers:
            feats, w = layer(feats, shapes, centers)
            weights.append(w)
        b, d = feats[0].shape[0], feats[0].shape[-1]
        h, w_ = shapes[0]
        Z = self.mask_head(feats[0]).reshape(b, h, w_, d)
        return PixelDecoderOutput(feats, list(shapes), Z, stage0, weights)


def pixel_decode(ms_features, shapes, centers, decoder):
    return decoder(ms_features, shapes, centers)
