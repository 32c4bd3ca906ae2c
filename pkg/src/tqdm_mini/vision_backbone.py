"""Toy ViT image encoder with multi-scale outputs and a frozen reference copy."""
import copy
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .attention import EncoderBlock
from .errors import InputError


@dataclass
class BackboneOutput:
    ms_features: list   # [fine, mid, coarse], each (B, h_s*w_s, D)
    grid_shapes: list   # [(h, w)] matching ms_features
    x: torch.Tensor     # (B, h*w, C) joint-space patch embeddings
    cls_token: torch.Tensor  # (B, C)
    grid: tuple         # patch grid (h, w)


class ToyViT(nn.Module):
    """Patch-8 ViT. Scales: fine = 2x transposed-conv upsample of the patch
    grid, mid = the patch grid, coarse = 2x average pool; each projected to D."""

    def __init__(self, image_size=64, patch_size=8, width=96, depth=4, nhead=4,
                 embed_dim=64, feature_dim=32):
        super().__init__()
        if image_size % patch_size:
            raise InputError(f"image size {image_size} not divisible by patch size {patch_size}")
        self.image_size = image_size
        self.patch_size = patch_size
        n = (image_size // patch_size) ** 2
        self.patch_embed = nn.Conv2d(3, width, patch_size, stride=patch_size)
        self.cls_embed = nn.Parameter(0.02 * torch.randn(1, 1, width))
        self.pos_embed = nn.Parameter(0.02 * torch.randn(1, n + 1, width))
        self.blocks = nn.ModuleList(EncoderBlock(width, nhead) for _ in range(depth))
        self.norm = nn.LayerNorm(width)
        # shared between patch tokens and the [class] token
        self.joint_proj = nn.Linear(width, embed_dim)
        self.up = nn.ConvTranspose2d(width, width, 2, stride=2)
        self.proj_fine = nn.Linear(width, feature_dim)
        self.proj_mid = nn.Linear(width, feature_dim)
        self.proj_coarse = nn.Linear(width, feature_dim)

    def forward(self, images):
        """``images``: (B, 3, H, W) in [0, 1]."""
        b, _, h_img, w_img = images.shape
        p = self.patch_size
        if h_img % p or w_img % p:
            raise InputError(f"image {h_img}x{w_img} not divisible by patch size {p}")
        if (h_img, w_img) != (self.image_size, self.image_size):
            raise InputError(f"expected {self.image_size}x{self.image_size} input, got {h_img}x{w_img}")
        h, w = h_img // p, w_img // p
        tok = self.patch_embed(images).flatten(2).transpose(1, 2)
        tok = torch.cat([self.cls_embed.expand(b, -1, -1), tok], dim=1) + self.pos_embed
        for blk in self.blocks:
            tok = blk(tok)
        tok = self.norm(tok)
        joint = self.joint_proj(tok)
        patches = tok[:, 1:]
        grid = patches.transpose(1, 2).reshape(b, -1, h, w)
        fine = self.up(grid)
        coarse = F.avg_pool2d(grid, 2)
        feats = [
            self.proj_fine(fine.flatten(2).transpose(1, 2)),
            self.proj_mid(patches),
            self.proj_coarse(coarse.flatten(2).transpose(1, 2)),
        ]
        shapes = [(2 * h, 2 * w), (h, w), (h // 2, w // 2)]
        return BackboneOutput(feats, shapes, joint[:, 1:], joint[:, 0], (h, w))


def encode_image(images, backbone):
    return backbone(images)


class FrozenReference(nn.Module):
    """Parameter snapshot of a backbone, taken at construction and never updated."""

    def __init__(self, backbone):
        super().__init__()
        self.backbone = copy.deepcopy(backbone)
        self.backbone.requires_grad_(False)
        self.backbone.eval()

    def train(self, mode=True):
        # snapshot stays in eval mode regardless of the parent module
        return super().train(False)

    @torch.no_grad()
    def forward(self, images):
        return self.backbone(images).cls_token


def reference_cls(images, ref):
    """``x_0^CLS`` from the frozen initial parameters; carries no gradient."""
    return ref(images)
