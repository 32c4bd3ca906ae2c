"""Segmentation loss, the three alignment regularizers, the full objective and
the pixel-query baseline objective.

Mask losses take a batch of mask logits (B, K, H, W) and one
``MatchAssignment`` per image; reductions run over all matched (image, query)
pairs so a batch behaves like one long list of masks.
"""
import warnings
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch.nn import functional as F

from .errors import ConfigError
from .mask_decoder import IGNORE, NO_OBJECT


@dataclass(frozen=True)
class LossConfig:
    bce_weight: float = 5.0
    dice_weight: float = 5.0
    cls_weight: float = 2.0
    tau: float = 0.07
    no_object_weight: float = 0.1
    dice_eps: float = 1.0
    use_lang_reg: bool = True
    use_vl_reg: bool = True
    use_v_reg: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        for name in ("bce_weight", "dice_weight", "cls_weight", "no_object_weight"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")


def _stack_targets(mask_logits, assigns):
    """Gather matched logits (M, P), binary targets (M, P) and validity (M, P)."""
    rows, tgts, valids = [], [], []
    for b, a in enumerate(assigns):
        idx = np.flatnonzero(a.matched)
        if len(idx) == 0:
            continue
        rows.append(mask_logits[b, idx].flatten(1))
        tgts.append(torch.from_numpy(a.masks[idx].reshape(len(idx), -1)))
        valids.append(torch.from_numpy(np.repeat(a.valid.reshape(1, -1), len(idx), axis=0)))
    if not rows:
        return None
    dtype = mask_logits.dtype
    return torch.cat(rows), torch.cat(tgts).to(dtype), torch.cat(valids).to(dtype)


def bce_mask_loss(mask_logits, assigns):
    """Per-pixel BCE averaged over valid pixels of matched queries (0 if none)."""
    st = _stack_targets(mask_logits, assigns)
    if st is None:
        return mask_logits.sum() * 0
    logits, tgt, valid = st
    per_pixel = F.binary_cross_entropy_with_logits(logits, tgt, reduction="none")
    per_query = (per_pixel * valid).sum(1) / valid.sum(1).clamp(min=1)
    return per_query.mean()


def dice_loss(mask_logits, assigns, eps=1.0):
    """``1 - (2 sum p y + eps) / (sum p + sum y + eps)`` averaged over matched queries."""
    st = _stack_targets(mask_logits, assigns)
    if st is None:
        return mask_logits.sum() * 0
    logits, tgt, valid = st
    p = logits.sigmoid() * valid
    y = tgt * valid
    num = 2 * (p * y).sum(1) + eps
    den = p.sum(1) + y.sum(1) + eps
    return (1 - num / den).mean()


def cls_loss(class_logits, assigns, cfg=LossConfig()):
    """Weighted cross-entropy; no-object targets (index K) carry ``no_object_weight``.

    Reduction is the weighted mean, so the value does not depend on how many
    queries are unmatched; an all-zero weight sum gives 0.
    """
    n_cls = class_logits.shape[-1] - 1
    targets = []
    for a in assigns:
        targets.append(np.where(a.classes == NO_OBJECT, n_cls, a.classes))
    target = torch.from_numpy(np.concatenate(targets)).long()
    logits = class_logits.reshape(-1, n_cls + 1)
    weight = torch.ones(n_cls + 1, dtype=logits.dtype)
    weight[-1] = cfg.no_object_weight
    per_query = F.cross_entropy(logits, target, reduction="none")
    w = weight[target]
    total = w.sum()
    if total == 0:
        return logits.sum() * 0
    return (per_query * w).sum() / total


def seg_loss(mask_logits_list, class_logits_list, assigns_list, cfg=LossConfig()):
    """Weighted sum of bce/dice/cls over every (final and auxiliary) prediction.

    ``assigns_list`` holds one list of per-image assignments per prediction
    (with fixed matching these are all the same list). Returns
    ``(total, {"bce": ..., "dice": ..., "cls": ...})`` with unweighted sums.
    """
    bce = dice = cls = 0
    for m, c, a in zip(mask_logits_list, class_logits_list, assigns_list):
        bce = bce + bce_mask_loss(m, a)
        dice = dice + dice_loss(m, a, cfg.dice_eps)
        cls = cls + cls_loss(c, a, cfg)
    total = cfg.bce_weight * bce + cfg.dice_weight * dice + cfg.cls_weight * cls
    return total, {"bce": bce, "dice": dice, "cls": cls}


def lang_reg(t, T0):
    """Cross-entropy of ``softmax(t_hat T0_hat^T)`` rows against identity targets, row-averaged."""
    sim = F.normalize(t, dim=-1) @ F.normalize(T0, dim=-1).T
    target = torch.arange(len(t))
    return F.cross_entropy(sim, target)


def downsample_labels(labels, grid):
    """Nearest-neighbour sampling of (B, H, W) labels at patch centers of ``grid``."""
    h, w = grid
    H, W = labels.shape[-2:]
    sy, sx = H // h, W // w
    return labels[..., sy // 2::sy, sx // 2::sx][..., :h, :w]


def pixel_text_ce(x, q, labels, tau):
    """Per-pixel CE of ``softmax(x_hat q_hat^T / tau)`` against ``labels``.

    ``x``: (B, hw, C); ``q``: (K, C) or (B, K, C); ``labels``: (B, hw) long,
    with ``IGNORE`` pixels skipped. Returns 0 (and warns) if nothing is valid.
    """
    xh = F.normalize(x, dim=-1)
    qh = F.normalize(q, dim=-1)
    S = xh @ qh.transpose(-2, -1) if qh.ndim == 3 else xh @ qh.T
    labels = labels.reshape(-1).long()
    valid = labels != IGNORE
    if not valid.any():
        warnings.warn("pixel-text loss: every pixel is ignore-labelled; returning 0", RuntimeWarning)
        return S.sum() * 0
    logits = S.reshape(-1, S.shape[-1])[valid] / tau
    return F.cross_entropy(logits, labels[valid])


def vl_reg(x, t, labels, cfg=LossConfig(), grid=None):
    """Pixel-text score map loss. ``labels`` are (B, H, W) at image resolution
    (downsampled to ``grid``) or already (B, hw) when ``grid`` is None."""
    if grid is not None:
        labels = downsample_labels(labels, grid)
    return pixel_text_ce(x, t, labels.reshape(labels.shape[0], -1), cfg.tau)


def v_reg(cls_live, cls_ref):
    """``||x_cls - x0_cls||_2`` averaged over the batch."""
    diff = cls_live - cls_ref
    if diff.ndim == 1:
        diff = diff[None]
    # sqrt has no derivative at 0; the zero case is handled by the safe form below
    sq = (diff * diff).sum(-1)
    nz = sq > 0
    safe = torch.where(nz, sq, torch.ones_like(sq))
    return torch.where(nz, safe.sqrt(), torch.zeros_like(sq)).mean()


def baseline_objective(x, q, labels, tau=LossConfig().tau):
    """Pixel-query cross-entropy of the text-or-random query baseline."""
    return pixel_text_ce(x, q, labels.reshape(labels.shape[0], -1), tau)


@dataclass
class LossReport:
    bce: float
    dice: float
    cls: float
    seg: float
    reg_L: float
    reg_VL: float
    reg_V: float
    total: float

    def as_dict(self):
        return asdict(self)


def total_loss(seg, reg_L, reg_VL, reg_V, cfg=LossConfig()):
    """Sum of the segmentation loss and the enabled regularizers."""
    total = seg
    if cfg.use_lang_reg:
        total = total + reg_L
    if cfg.use_vl_reg:
        total = total + reg_VL
    if cfg.use_v_reg:
        total = total + reg_V
    return total


def make_report(total, seg, parts, reg_L, reg_VL, reg_V):
    f = lambda v: float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
    return LossReport(bce=f(parts["bce"]), dice=f(parts["dice"]), cls=f(parts["cls"]), seg=f(seg),
                      reg_L=f(reg_L), reg_VL=f(reg_VL), reg_V=f(reg_V), total=f(total))
