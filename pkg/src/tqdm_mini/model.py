"""Full textual-query mask transformer and the pixel-query baseline model."""
from dataclasses import dataclass, field

import torch
from torch import nn
from torch.nn import functional as F

from .losses import (LossConfig, lang_reg, make_report, seg_loss, total_loss, v_reg, vl_reg,
                     baseline_objective, downsample_labels)
from .mask_decoder import (DecoderOutput, TransformerDecoder, bipartite_match, fixed_match,
                           semantic_inference, NO_OBJECT)
from .pixel_decoder import PixelDecoder
from .text_query import ClassVocabulary, TextQueryGenerator
from .vision_backbone import FrozenReference, ToyViT

SYNTH_CLASSES = ("background", "disc", "rectangle", "triangle", "stripe", "ring", "cross", "diamond")


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 5
    embed_dim: int = 64         # C, joint vision-language space
    query_dim: int = 32         # D
    prompt_length: int = 8      # P
    token_dim: int = 64
    image_size: int = 64
    patch_size: int = 8
    vit_width: int = 96
    vit_depth: int = 4
    vit_heads: int = 4
    pixel_layers: int = 6       # M
    decoder_layers: int = 9     # N
    heads: int = 4
    ffn_dim: int = 64
    scaled_t2p: bool = True
    use_textual_queries: bool = True
    use_text_to_pixel: bool = True
    learnable_prompt: bool = True
    matching: str = "fixed"
    class_names: tuple = ()
    encoder_seed: int = 0

    def names(self):
        return tuple(self.class_names) or SYNTH_CLASSES[:self.num_classes]


@dataclass
class ModelOutput:
    decoder: DecoderOutput
    Z: torch.Tensor
    x: torch.Tensor
    cls_token: torch.Tensor
    grid: tuple
    t: torch.Tensor
    q0: torch.Tensor
    pixel_stage0: list
    pixel_stageM: list
    shapes: list


class FixedMatchViolation(AssertionError):
    pass


class TQDM(nn.Module):

    def __init__(self, cfg=ModelConfig()):
        super().__init__()
        self.cfg = cfg
        vocab = ClassVocabulary.from_names(cfg.names())
        if len(vocab) != cfg.num_classes:
            raise ValueError(f"{len(vocab)} class names for num_classes={cfg.num_classes}")
        self.text = TextQueryGenerator(vocab, cfg.embed_dim, cfg.query_dim, cfg.prompt_length,
                                       cfg.token_dim, cfg.learnable_prompt, cfg.encoder_seed)
        if not cfg.use_textual_queries:
            self.random_queries = nn.Parameter(torch.randn(cfg.num_classes, cfg.query_dim))
        self.backbone = ToyViT(cfg.image_size, cfg.patch_size, cfg.vit_width, cfg.vit_depth,
                               cfg.vit_heads, cfg.embed_dim, cfg.query_dim)
        self.reference = FrozenReference(self.backbone)
        self.pixel_decoder = PixelDecoder(cfg.query_dim, cfg.pixel_layers, cfg.heads, cfg.ffn_dim,
                                          text_to_pixel=cfg.use_text_to_pixel, scaled=cfg.scaled_t2p)
        self.decoder = TransformerDecoder(cfg.query_dim, cfg.num_classes, cfg.decoder_layers,
                                          cfg.heads, cfg.ffn_dim)

    def param_groups(self):
        """Trainable parameters split into (backbone, rest)."""
        bb = [p for p in self.backbone.parameters() if p.requires_grad]
        ids = {id(p) for p in bb}
        rest = [p for p in self.parameters() if p.requires_grad and id(p) not in ids]
        return bb, rest

    def forward(self, images):
        t, q0, centers = self.text()
        if not self.cfg.use_textual_queries:
            q0 = self.random_queries
        bo = self.backbone(images)
        pd = self.pixel_decoder(bo.ms_features, bo.grid_shapes,
                                centers if self.cfg.use_text_to_pixel else None)
        dec = self.decoder(q0, pd.features, pd.shapes, pd.Z)
        return ModelOutput(dec, pd.Z, bo.x, bo.cls_token, bo.grid, t, q0,
                           pd.stage0, pd.features, pd.shapes)

    def upsampled(self, mask_logits, size):
        return F.interpolate(mask_logits, size=size, mode="bilinear", align_corners=False)

    def assignments(self, labels, mask_logits, class_logits):
        k = self.cfg.num_classes
        if self.cfg.matching == "fixed":
            return [fixed_match(y, k) for y in labels]
        return [bipartite_match(y, m, c, k) for y, m, c in zip(labels, mask_logits, class_logits)]

    def loss(self, images, labels, loss_cfg=LossConfig(), out=None, check_fixed_matching=False):
        """Returns ``(total, LossReport)``. ``labels`` is (B, H, W) long at image resolution."""
        out = self.forward(images) if out is None else out
        size = labels.shape[-2:]
        masks = [self.upsampled(m, size) for m in out.decoder.mask_logits]
        classes = out.decoder.class_logits
        if self.cfg.matching == "fixed":
            a = self.assignments(labels, None, None)
            if check_fixed_matching:
                check_fixed(a)
            assigns = [a] * len(masks)
        else:
            assigns = [self.assignments(labels, m.detach(), c.detach()) for m, c in zip(masks, classes)]
        seg, parts = seg_loss(masks, classes, assigns, loss_cfg)
        r_l = lang_reg(out.t, self.text.fixed_embeddings())
        r_vl = vl_reg(out.x, out.t, labels, loss_cfg, grid=out.grid)
        r_v = v_reg(out.cls_token, self.reference(images))
        total = total_loss(seg, r_l, r_vl, r_v, loss_cfg)
        return total, make_report(total, seg, parts, r_l, r_vl, r_v)

    @torch.no_grad()
    def predict(self, images):
        out = self.forward(images)
        m = self.upsampled(out.decoder.final_mask, images.shape[-2:])
        return semantic_inference(m, out.decoder.final_class)


def check_fixed(assigns):
    """Raise if any query k has a class target other than k or no-object."""
    for a in assigns:
        k = torch.arange(len(a.classes)).numpy()
        bad = (a.classes != k) & (a.classes != NO_OBJECT)
        if bad.any():
            raise FixedMatchViolation(f"query targets {a.classes.tolist()} break fixed matching")


class PixelQueryModel(nn.Module):
    """Image encoder plus K object queries in the joint space; logits are the
    cosine similarities between pixel embeddings and queries.

    ``query_mode='text'`` takes the queries from the prompted text encoder
    (the prompt is the only trainable part); ``'random'`` uses a randomly
    initialised learnable K x C matrix.
    """

    def __init__(self, cfg=ModelConfig(), query_mode="text", tau=LossConfig().tau):
        super().__init__()
        if query_mode not in ("text", "random"):
            raise ValueError(f"query_mode must be 'text' or 'random', got {query_mode!r}")
        self.cfg = cfg
        self.query_mode = query_mode
        self.tau = tau
        self.backbone = ToyViT(cfg.image_size, cfg.patch_size, cfg.vit_width, cfg.vit_depth,
                               cfg.vit_heads, cfg.embed_dim, cfg.query_dim)
        if query_mode == "text":
            vocab = ClassVocabulary.from_names(cfg.names())
            self.text = TextQueryGenerator(vocab, cfg.embed_dim, cfg.query_dim, cfg.prompt_length,
                                           cfg.token_dim, cfg.learnable_prompt, cfg.encoder_seed)
            # only the prompt feeds the queries here
            self.text.query_mlp.requires_grad_(False)
            self.text.center_proj.requires_grad_(False)
        else:
            self.queries = nn.Parameter(torch.randn(cfg.num_classes, cfg.embed_dim))

    def param_groups(self):
        bb = [p for p in self.backbone.parameters() if p.requires_grad]
        ids = {id(p) for p in bb}
        rest = [p for p in self.parameters() if p.requires_grad and id(p) not in ids]
        return bb, rest

    def query_matrix(self):
        return self.text.text_embeddings() if self.query_mode == "text" else self.queries

    def forward(self, images):
        bo = self.backbone(images)
        return bo.x, self.query_matrix(), bo.grid

    def loss(self, images, labels):
        x, q, grid = self.forward(images)
        return baseline_objective(x, q, downsample_labels(labels, grid), self.tau)

    @torch.no_grad()
    def predict(self, images):
        x, q, (h, w) = self.forward(images)
        S = F.normalize(x, dim=-1) @ F.normalize(q, dim=-1).T
        S = S.transpose(1, 2).reshape(len(images), -1, h, w)
        S = F.interpolate(S, size=images.shape[-2:], mode="bilinear", align_corners=False)
        return S.argmax(dim=1)
