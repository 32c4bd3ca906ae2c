"""Training loop, learning-rate schedule, checkpoints and evaluation."""
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import synthdata
from .errors import ConfigError, TrainingDiverged
from .evalkit import accumulate_confusion, empty_confusion, miou, write_jsonl
from .losses import LossConfig
from .model import TQDM, ModelConfig, PixelQueryModel

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class RunConfig:
    # architecture
    arch: str = "tqdm"                 # "tqdm" or "pixel_query" (text-vs-random baseline)
    query_mode: str = "text"           # pixel_query only: "text" or "random"
    num_classes: int = 5
    embed_dim: int = 64
    query_dim: int = 32
    prompt_length: int = 8
    pixel_layers: int = 6
    decoder_layers: int = 9
    # ablation toggles
    use_textual_queries: bool = True
    use_text_to_pixel: bool = True
    matching: str = "fixed"
    prompt: str = "learnable"          # or "fixed_template"
    use_lang_reg: bool = True
    use_vl_reg: bool = True
    use_v_reg: bool = True
    # loss
    bce_weight: float = 5.0
    dice_weight: float = 5.0
    cls_weight: float = 2.0
    tau: float = 0.07
    no_object_weight: float = 0.1
    # optimisation
    lr: float = 1e-3
    backbone_lr_factor: float = 0.1
    weight_decay: float = 0.05
    warmup_iters: int = 150
    iterations: int = 2000
    batch_size: int = 8
    crop_size: int = 64
    # data and bookkeeping
    train_count: int = 500
    data_dir: str = ""
    seed: int = 0
    dtype: str = "float32"
    checkpoint_every: int = 500
    check_fixed_matching: bool = True

    def __post_init__(self):
        if self.arch not in ("tqdm", "pixel_query"):
            raise ConfigError(f"arch must be 'tqdm' or 'pixel_query', got {self.arch!r}")
        if self.matching not in ("fixed", "bipartite"):
            raise ConfigError(f"matching must be 'fixed' or 'bipartite', got {self.matching!r}")
        if self.prompt not in ("learnable", "fixed_template"):
            raise ConfigError(f"prompt must be 'learnable' or 'fixed_template', got {self.prompt!r}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")
        for name in ("iterations", "batch_size", "crop_size", "train_count", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.warmup_iters <= self.iterations:
            raise ConfigError("warmup_iters must lie in [0, iterations]")
        self.loss_config()  # validates loss fields

    def model_config(self):
        return ModelConfig(num_classes=self.num_classes, embed_dim=self.embed_dim, query_dim=self.query_dim,
                           prompt_length=self.prompt_length, image_size=self.crop_size,
                           pixel_layers=self.pixel_layers, decoder_layers=self.decoder_layers,
                           use_textual_queries=self.use_textual_queries,
                           use_text_to_pixel=self.use_text_to_pixel,
                           learnable_prompt=self.prompt == "learnable", matching=self.matching)

    def loss_config(self):
        return LossConfig(bce_weight=self.bce_weight, dice_weight=self.dice_weight, cls_weight=self.cls_weight,
                          tau=self.tau, no_object_weight=self.no_object_weight,
                          use_lang_reg=self.use_lang_reg, use_vl_reg=self.use_vl_reg, use_v_reg=self.use_v_reg)

    def to_dict(self):
        return asdict(self)

    def config_hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def replace(self, **overrides):
        return dataclasses.replace(self, **overrides)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def configure_threads():
    """Cap intra-op threads (``TQDM_MINI_THREADS``, default 1 for determinism)."""
    torch.set_num_threads(max(1, int(os.environ.get("TQDM_MINI_THREADS", "1"))))


def lr_factor(step, warmup, total):
    """Linear warm-up to 1 at ``warmup`` then linear decay to 0 at ``total``."""
    if warmup and step < warmup:
        return step / warmup
    if total == warmup:
        return 1.0
    return max(0.0, (total - step) / (total - warmup))


def build_model(cfg):
    mcfg = cfg.model_config()
    if cfg.arch == "tqdm":
        model = TQDM(mcfg)
    else:
        model = PixelQueryModel(mcfg, cfg.query_mode, cfg.tau)
    return model.to(DTYPES[cfg.dtype])


def build_optimizer(model, cfg):
    backbone, rest = model.param_groups()
    return torch.optim.AdamW([
        {"params": backbone, "lr": cfg.lr * cfg.backbone_lr_factor},
        {"params": rest, "lr": cfg.lr},
    ], weight_decay=cfg.weight_decay)


def build_scheduler(opt, cfg):
    return torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: lr_factor(s, cfg.warmup_iters, cfg.iterations))


def training_scenes(cfg):
    if cfg.data_dir:
        return synthdata.load_split(cfg.data_dir, "train", cfg.num_classes)[:cfg.train_count]
    return synthdata.generate_split("train", cfg.num_classes, cfg.crop_size, cfg.train_count)


def sample_batch(scenes, cfg, step):
    """Augmented batch for ``step``; a pure function of (seed, step)."""
    rng = np.random.default_rng([cfg.seed, step, 31337])
    idx = rng.choice(len(scenes), size=cfg.batch_size, replace=len(scenes) < cfg.batch_size)
    aug = synthdata.AugmentConfig(crop_size=cfg.crop_size)
    batch = [synthdata.augment(scenes[i], int(rng.integers(2 ** 31)), aug) for i in idx]
    images, labels = synthdata.to_arrays(batch)
    return torch.from_numpy(images).to(DTYPES[cfg.dtype]), torch.from_numpy(labels)


def save_checkpoint(path, model, cfg, step, opt=None, sched=None):
    state = {
        "model": model.state_dict(),
        "optimizer": None if opt is None else opt.state_dict(),
        "scheduler": None if sched is None else sched.state_dict(),
        "step": step,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
    }
    torch.save(state, path)
    return path


def load_checkpoint(path):
    """Returns ``(model, cfg, state)``; the model is in eval mode."""
    state = torch.load(path, map_location="cpu", weights_only=False)
    cfg = RunConfig.from_dict(state["config"])
    model = build_model(cfg)
    model.load_state_dict(state["model"])
    model.eval()
    return model, cfg, state


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class TrainResult:
    model: torch.nn.Module
    config: RunConfig
    metrics: list
    checkpoint: Path = None
    metrics_path: Path = None


def _loss(model, cfg, images, labels):
    if cfg.arch == "tqdm":
        total, report = model.loss(images, labels, cfg.loss_config(),
                                   check_fixed_matching=cfg.check_fixed_matching and cfg.matching == "fixed")
        return total, report.as_dict()
    total = model.loss(images, labels)
    return total, {"total": float(total.detach())}


def train(cfg, out_dir=None, scenes=None, step_callback=None):
    """Train on the source domain. Writes ``metrics.jsonl`` and checkpoints to
    ``out_dir`` when given. ``step_callback(step, model, report)`` runs after
    every optimiser step."""
    configure_threads()
    torch.manual_seed(cfg.seed)
    scenes = training_scenes(cfg) if scenes is None else scenes
    model = build_model(cfg)
    model.train()
    opt = build_optimizer(model, cfg)
    sched = build_scheduler(opt, cfg)
    out = Path(out_dir) if out_dir else None
    metrics_path = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        metrics_path = out / "metrics.jsonl"
        metrics_path.write_text("")
    metrics = []
    for step in range(cfg.iterations):
        images, labels = sample_batch(scenes, cfg, step)
        total, report = _loss(model, cfg, images, labels)
        if not torch.isfinite(total):
            dump = None
            if out:
                dump = out / f"nonfinite_step{step}.npz"
                np.savez(dump, images=images.numpy(), labels=labels.numpy())
            raise TrainingDiverged(f"non-finite loss at step {step}: {report}; batch dumped to {dump}")
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        row = {"step": step, "lr": opt.param_groups[1]["lr"], **report}
        sched.step()
        metrics.append(row)
        if out:
            write_jsonl(metrics_path, [row], mode="a")
            if (step + 1) % cfg.checkpoint_every == 0 and step + 1 < cfg.iterations:
                save_checkpoint(out / f"ckpt_{step + 1:06d}.pt", model, cfg, step + 1, opt, sched)
        if step_callback is not None:
            step_callback(step, model, report)
        if step % 100 == 0:
            log.info("step %d total %.4f", step, report["total"])
    model.eval()
    ckpt = save_checkpoint(out / "final.pt", model, cfg, cfg.iterations, opt, sched) if out else None
    return TrainResult(model, cfg, metrics, ckpt, metrics_path)


@torch.no_grad()
def predict(model, images, batch_size=25):
    out = []
    for i in range(0, len(images), batch_size):
        out.append(model.predict(images[i:i + batch_size]))
    return torch.cat(out)


@torch.no_grad()
def evaluate(model, scenes, num_classes, dtype=torch.float32):
    """Confusion matrix, per-class IoU and mIoU of ``model`` on ``scenes``."""
    images, labels = synthdata.to_arrays(scenes)
    pred = predict(model, torch.from_numpy(images).to(dtype))
    cm = empty_confusion(num_classes)
    for p, g in zip(pred, labels):
        cm = accumulate_confusion(p, g, cm)
    per_class, mean = miou(cm)
    return {"confusion": cm, "iou": per_class, "miou": mean}


def evaluate_domains(model, cfg, splits=("val",) + synthdata.TARGET_DOMAINS, count=None):
    res = {}
    for split in splits:
        if cfg.data_dir:
            scenes = synthdata.load_split(cfg.data_dir, split, cfg.num_classes)[:count]
        else:
            scenes = synthdata.generate_split(split, cfg.num_classes, cfg.crop_size, count)
        res[split] = evaluate(model, scenes, cfg.num_classes, DTYPES[cfg.dtype])
    return res
