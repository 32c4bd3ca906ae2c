"""Small attention primitives shared by every transformer block in the package.

The weights path is written out explicitly so attention maps are inspectable
and masked logits are exactly ``-inf``; blocks that never look at their
weights use the fused kernel.
"""
import math

import torch
from torch import nn
from torch.nn import functional as F


def softmax_attention(q, k, v, mask=None, scale=True):
    """Scaled dot-product attention returning ``(out, weights)``.

    ``mask`` is boolean and broadcastable to the logits; ``True`` marks a
    *disallowed* key. Disallowed keys get exactly zero weight.
    """
    if scale:
        q = q / math.sqrt(q.shape[-1])
    logits = q @ k.transpose(-2, -1)
    if mask is not None:
        logits = logits.masked_fill(mask, float("-inf"))
    weights = torch.softmax(logits, dim=-1)
    return weights @ v, weights


class MultiHeadAttention(nn.Module):

    def __init__(self, dim, nhead, kv_dim=None):
        super().__init__()
        if dim % nhead:
            raise ValueError(f"dim {dim} not divisible by nhead {nhead}")
        kv_dim = dim if kv_dim is None else kv_dim
        self.nhead = nhead
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(kv_dim, dim)
        self.v_proj = nn.Linear(kv_dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _split(self, x):
        b, n, d = x.shape
        return x.view(b, n, self.nhead, d // self.nhead).transpose(1, 2)

    def forward(self, x, memory=None, mask=None, need_weights=True):
        """``x``: (B, Nq, D); ``memory``: (B, Nk, Dkv); ``mask``: (B, Nq, Nk) bool.

        Returns the attended output and head-averaged weights (B, Nq, Nk), or
        ``None`` for the weights when ``need_weights`` is False.
        """
        memory = x if memory is None else memory
        q = self._split(self.q_proj(x))
        k = self._split(self.k_proj(memory))
        v = self._split(self.v_proj(memory))
        if mask is not None:
            mask = mask.unsqueeze(1)
        if need_weights:
            out, weights = softmax_attention(q, k, v, mask)
            weights = weights.mean(dim=1)
        else:
            out = F.scaled_dot_product_attention(q, k, v, attn_mask=None if mask is None else ~mask)
            weights = None
        b, h, n, dh = out.shape
        out = out.transpose(1, 2).reshape(b, n, h * dh)
        return self.out_proj(out), weights


class FeedForward(nn.Module):

    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderBlock(nn.Module):
    """Pre-norm transformer block used by the toy text and image encoders."""

    def __init__(self, dim, nhead, mlp_ratio=4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, nhead)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim, dim * mlp_ratio)

    def forward(self, x, mask=None):
        x = x + self.attn(self.norm1(x), mask=mask, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))
