"""Transformer decoder with masked attention, mask/class heads, query-to-GT
assignment (fixed or bipartite), semantic inference and region proposals."""
from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from torch import nn
from torch.nn import functional as F

from .attention import FeedForward, MultiHeadAttention
from .errors import InputError

IGNORE = 255
NO_OBJECT = -1


def predict_masks(q, Z):
    """Mask logits ``<q_k, Z[i, j]>``: (B, K, H', W') or (K, H', W') unbatched."""
    if q.ndim == 2:
        return torch.einsum("kd,hwd->khw", q, Z)
    return torch.einsum("bkd,bhwd->bkhw", q, Z)


def attention_mask(mask_logits, shape):
    """Boolean (B, K, h*w) with True on pixels a query may NOT attend to.

    Pixels are allowed where ``sigmoid(logit) > 0.5`` after bilinear resizing to
    ``shape``; a query with no allowed pixel falls back to full attention.
    """
    m = F.interpolate(mask_logits, size=shape, mode="bilinear", align_corners=False)
    blocked = (m.sigmoid() <= 0.5).flatten(2)
    empty = blocked.all(dim=-1, keepdim=True)
    return (blocked & ~empty).detach()


class MaskedAttentionLayer(nn.Module):
    """Masked cross-attention -> query self-attention -> FFN (post-norm residuals)."""

    def __init__(self, dim, nhead=4, ffn_dim=64):
        super().__init__()
        self.cross_attn = MultiHeadAttention(dim, nhead)
        self.norm_cross = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, nhead)
        self.norm_self = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim)
        self.norm_ffn = nn.LayerNorm(dim)
        self.last_weights = None

    def forward(self, q, memory, blocked=None):
        out, w = self.cross_attn(q, memory, mask=blocked)
        self.last_weights = w
        q = self.norm_cross(q + out)
        q = self.norm_self(q + self.self_attn(q, need_weights=False)[0])
        return self.norm_ffn(q + self.ffn(q))


def masked_attention_layer(q, z, prev_mask, shape, layer):
    """One decoder layer; ``prev_mask`` (B, K, H', W') is resized to ``shape``."""
    return layer(q, z, attention_mask(prev_mask, shape))


@dataclass
class DecoderOutput:
    queries: list       # q^0 .. q^N, each (B, K, D)
    mask_logits: list   # predictions from q^0 .. q^N, each (B, K, H', W')
    class_logits: list  # same indexing, each (B, K, K+1)

    @property
    def final_mask(self):
        return self.mask_logits[-1]

    @property
    def final_class(self):
        return self.class_logits[-1]

    @property
    def intermediate_masks(self):
        """The N masks that restricted attention in layers 1..N."""
        return self.mask_logits[:-1]


class TransformerDecoder(nn.Module):
    """Refines queries over N layers, cycling coarse -> mid -> fine."""

    def __init__(self, dim=32, num_classes=5, num_layers=9, nhead=4, ffn_dim=64, num_scales=3):
        super().__init__()
        self.num_scales = num_scales
        self.level_embed = nn.Parameter(torch.zeros(num_scales, dim))
        self.layers = nn.ModuleList(MaskedAttentionLayer(dim, nhead, ffn_dim) for _ in range(num_layers))
        self.class_head = nn.Linear(dim, num_classes + 1)

    def scale_schedule(self):
        # features are stored fine, mid, coarse; visit coarse first
        return [self.num_scales - 1 - (n % self.num_scales) for n in range(len(self.layers))]

    def forward(self, q0, features, shapes, Z):
        b = Z.shape[0]
        q = q0.expand(b, -1, -1) if q0.ndim == 2 else q0
        queries, masks, classes = [q], [predict_masks(q, Z)], [self.class_head(q)]
        for layer, s in zip(self.layers, self.scale_schedule()):
            blocked = attention_mask(masks[-1], shapes[s])
            q = layer(q, features[s] + self.level_embed[s], blocked)
            queries.append(q)
            masks.append(predict_masks(q, Z))
            classes.append(self.class_head(q))
        return DecoderOutput(queries, masks, classes)


def decode_queries(q0, features, shapes, Z, decoder):
    """Returns ``(q^N, intermediate mask logits)``; the list has one entry per layer."""
    out = decoder(q0, features, shapes, Z)
    return out.queries[-1], out.intermediate_masks


def predict_classes(q, class_head):
    return class_head(q)


@dataclass
class MatchAssignment:
    """Per-query targets for one image.

    ``classes[j]`` is the class id assigned to query j or ``NO_OBJECT``;
    ``masks[j]`` is the binary GT mask of that class (all False for no-object);
    ``valid`` marks non-ignore pixels.
    """
    classes: np.ndarray
    masks: np.ndarray
    valid: np.ndarray

    @property
    def matched(self):
        return self.classes != NO_OBJECT


def _as_numpy(labels):
    if isinstance(labels, torch.Tensor):
        labels = labels.cpu().numpy()
    return np.asarray(labels)


def fixed_match(labels, num_classes):
    """Query k <- class k if class k occupies at least one pixel, else no-object."""
    labels = _as_numpy(labels)
    valid = labels != IGNORE
    if np.any(valid & ((labels < 0) | (labels >= num_classes))):
        raise InputError(f"labels must lie in [0, {num_classes}) or be {IGNORE}")
    masks = np.stack([labels == k for k in range(num_classes)])
    present = masks.reshape(num_classes, -1).any(axis=1)
    classes = np.where(present, np.arange(num_classes), NO_OBJECT)
    return MatchAssignment(classes, masks, valid)


def bipartite_match(labels, mask_logits, class_logits, num_classes,
                    cost_class=2.0, cost_mask=5.0, cost_dice=5.0):
    """Hungarian assignment of present GT classes to queries (ablation only)."""
    labels = _as_numpy(labels)
    fixed = fixed_match(labels, num_classes)
    present = np.flatnonzero(fixed.matched)
    n_q = mask_logits.shape[0]
    classes = np.full(n_q, NO_OBJECT)
    masks = np.zeros((n_q,) + labels.shape, dtype=bool)
    if len(present) == 0:
        return MatchAssignment(classes, masks, fixed.valid)
    with torch.no_grad():
        valid = torch.from_numpy(fixed.valid).to(mask_logits.dtype).flatten()
        tgt = torch.from_numpy(fixed.masks[present]).to(mask_logits.dtype).flatten(1)
        logits = mask_logits.flatten(1)
        prob = class_logits.softmax(-1)[:, present]
        pos = F.binary_cross_entropy_with_logits(logits, torch.ones_like(logits), reduction="none") * valid
        neg = F.binary_cross_entropy_with_logits(logits, torch.zeros_like(logits), reduction="none") * valid
        bce = (pos @ tgt.T + neg @ (1 - tgt).T) / valid.sum().clamp(min=1)
        p = logits.sigmoid() * valid
        dice = 1 - (2 * p @ tgt.T + 1) / (p.sum(-1)[:, None] + tgt.sum(-1)[None, :] + 1)
        cost = cost_mask * bce + cost_dice * dice - cost_class * prob
    rows, cols = linear_sum_assignment(cost.cpu().numpy())
    for r, c in zip(rows, cols):
        classes[r] = present[c]
        masks[r] = fixed.masks[present[c]]
    return MatchAssignment(classes, masks, fixed.valid)


def semantic_inference(mask_logits, class_logits):
    """Label map from ``sum_k softmax(cls)_{k,c} * sigmoid(mask)_k``; the
    no-object column is dropped and ties go to the lowest class index."""
    prob = class_logits.softmax(-1)[..., :-1]
    if mask_logits.ndim == 3:
        scores = torch.einsum("kc,khw->chw", prob, mask_logits.sigmoid())
        return scores.argmax(dim=0)
    scores = torch.einsum("bkc,bkhw->bchw", prob, mask_logits.sigmoid())
    return scores.argmax(dim=1)


def region_proposals(Z, q0, threshold):
    """Binary (H', W', K) map: 1 where ``sigmoid(Z q0^T) > threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise InputError(f"threshold must be in [0, 1], got {threshold}")
    return (torch.sigmoid(Z @ q0.T) > threshold).to(torch.uint8)
