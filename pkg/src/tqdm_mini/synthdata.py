"""Deterministic multi-domain synthetic segmentation benchmark.

Scenes hold class-specific shapes on a textured background. The label map is
a function of the seed only; the rendering style (domain) changes appearance:

* ``source``: flat saturated colours, per-class hue bands
* ``hue_shift``: source rendering with hue rotated by 120 degrees
* ``texture_noise``: source rendering plus seeded band-pass noise
* ``sketch``: dark luminance edges on a white background

Files on disk are binary PPM (image) / PGM (labels) plus a JSON-lines manifest.
"""
import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError, ValidationError

IGNORE = 255
DOMAINS = ("source", "hue_shift", "texture_noise", "sketch")
TARGET_DOMAINS = DOMAINS[1:]

# class id -> (shape, placement probability, hue centre in degrees)
CLASS_SPECS = {
    1: ("disc", 0.97, 0.0),
    2: ("rectangle", 0.97, 215.0),
    3: ("triangle", 0.97, 120.0),
    4: ("stripe", 0.20, 45.0),
    5: ("ring", 0.97, 285.0),
    6: ("cross", 0.97, 170.0),
    7: ("diamond", 0.97, 330.0),
}
# drawing order: stripes lie underneath everything else
DRAW_ORDER = (4, 2, 6, 3, 7, 5, 1)


@dataclass(frozen=True)
class DomainStyle:
    name: str
    hue_rotation: float = 0.0     # degrees, [0, 360)
    noise_amplitude: float = 0.0  # [0, 1]
    edge_strength: float = 0.0    # [0, 1]; > 0 renders a sketch

    def __post_init__(self):
        if not 0.0 <= self.hue_rotation < 360.0:
            raise ConfigError(f"hue rotation must be in [0, 360), got {self.hue_rotation}")
        if not 0.0 <= self.noise_amplitude <= 1.0:
            raise ConfigError(f"noise amplitude must be in [0, 1], got {self.noise_amplitude}")
        if not 0.0 <= self.edge_strength <= 1.0:
            raise ConfigError(f"edge strength must be in [0, 1], got {self.edge_strength}")


STYLES = {
    "source": DomainStyle("source"),
    "hue_shift": DomainStyle("hue_shift", hue_rotation=120.0),
    "texture_noise": DomainStyle("texture_noise", noise_amplitude=0.15),
    "sketch": DomainStyle("sketch", edge_strength=1.0),
}


def get_style(domain):
    if isinstance(domain, DomainStyle):
        return domain
    try:
        return STYLES[domain]
    except KeyError:
        raise ConfigError(f"unknown domain {domain!r}; choose from {DOMAINS}") from None


@dataclass
class LabeledScene:
    image: np.ndarray   # (H, W, 3) float in [0, 1]
    labels: np.ndarray  # (H, W) uint8, class id or IGNORE
    domain: str = "source"
    seed: int = -1

    def validate(self, num_classes):
        bad = (self.labels != IGNORE) & (self.labels >= num_classes)
        if bad.any():
            raise ValidationError(f"label values {np.unique(self.labels[bad]).tolist()} >= K={num_classes}")
        if self.image.min() < 0 or self.image.max() > 1:
            raise ValidationError("image values outside [0, 1]")


def _hsv_to_rgb(h, s, v):
    return np.array(colorsys.hsv_to_rgb((h / 360.0) % 1.0, s, v))


def _shape_mask(kind, rng, size):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cy, cx = rng.uniform(0.15 * size, 0.85 * size, 2)
    r = rng.uniform(0.08, 0.15) * size
    if kind == "disc":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
    if kind == "rectangle":
        hh, hw = r * rng.uniform(0.6, 1.0), r * rng.uniform(1.0, 1.6)
        return (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
    if kind == "triangle":
        # upward isoceles triangle
        top, base = cy - r, cy + r
        half = (yy - top) / (2 * r) * r * 1.2
        return (yy >= top) & (yy <= base) & (np.abs(xx - cx) <= half)
    if kind == "stripe":
        width = rng.uniform(0.08, 0.12) * size
        angle = rng.uniform(0, np.pi)
        d = (yy - cy) * np.cos(angle) - (xx - cx) * np.sin(angle)
        return np.abs(d) <= width / 2
    if kind == "ring":
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    if kind == "cross":
        arm = 0.35 * r
        return ((np.abs(yy - cy) <= arm) & (np.abs(xx - cx) <= r)) | \
               ((np.abs(xx - cx) <= arm) & (np.abs(yy - cy) <= r))
    if kind == "diamond":
        return np.abs(yy - cy) + np.abs(xx - cx) <= r
    raise ConfigError(f"unknown shape {kind!r}")


def _layout(seed, num_classes, size):
    """Label map and per-region colours; independent of the domain style."""
    rng = np.random.default_rng([seed, 7919])
    labels = np.zeros((size, size), dtype=np.uint8)
    bg_h, bg_s, bg_v = rng.uniform(0, 360), rng.uniform(0.0, 0.25), rng.uniform(0.25, 0.6)
    image = np.empty((size, size, 3))
    image[:] = _hsv_to_rgb(bg_h, bg_s, bg_v)
    # slow background gradient so that flat colour alone does not identify it
    ramp = np.linspace(-0.08, 0.08, size)
    image += (ramp[:, None] * rng.choice([-1, 1]))[..., None]
    for c in DRAW_ORDER:
        if c >= num_classes:
            continue
        kind, prob, hue = CLASS_SPECS[c]
        if rng.uniform() >= prob:
            continue
        for _ in range(1 if kind == "stripe" else rng.integers(1, 3)):
            m = _shape_mask(kind, rng, size)
            colour = _hsv_to_rgb(hue + rng.uniform(-20, 20), rng.uniform(0.65, 1.0), rng.uniform(0.65, 1.0))
            image[m] = colour
            labels[m] = c
    return np.clip(image, 0, 1), labels


def _rotate_hue(image, degrees):
    flat = image.reshape(-1, 3)
    out = np.array([colorsys.hsv_to_rgb(*_shift(colorsys.rgb_to_hsv(*px), degrees)) for px in flat])
    return out.reshape(image.shape)


def _shift(hsv, degrees):
    h, s, v = hsv
    return (h + degrees / 360.0) % 1.0, s, v


def _bandpass_noise(rng, size):
    white = rng.standard_normal((size, size, 3))
    band = ndimage.gaussian_filter(white, (1.0, 1.0, 0)) - ndimage.gaussian_filter(white, (3.0, 3.0, 0))
    return band / (np.abs(band).max() + 1e-12)


def _sketch(image, strength):
    lum = image @ np.array([0.299, 0.587, 0.114])
    mag = np.hypot(ndimage.sobel(lum, 0), ndimage.sobel(lum, 1))
    mag = mag / (mag.max() + 1e-12)
    gray = 1.0 - strength * np.clip(2.0 * mag, 0, 1)
    return np.repeat(gray[..., None], 3, axis=2)


def render(base, style, seed):
    image = base
    if style.hue_rotation:
        image = _rotate_hue(image, style.hue_rotation)
    if style.noise_amplitude:
        rng = np.random.default_rng([seed, 104729])
        image = image + style.noise_amplitude * _bandpass_noise(rng, image.shape[0])
    if style.edge_strength:
        image = _sketch(image, style.edge_strength)
    return np.clip(image, 0.0, 1.0)


def generate_scene(seed, num_classes=5, size=64, domain="source", patch_size=8):
    """Scene for ``seed``; the label map is identical across all domains."""
    if not 2 <= num_classes <= 8:
        raise ConfigError(f"num_classes must be in [2, 8], got {num_classes}")
    if size % patch_size:
        raise ConfigError(f"size {size} not divisible by patch size {patch_size}")
    style = get_style(domain)
    base, labels = _layout(seed, num_classes, size)
    return LabeledScene(render(base, style, seed), labels, style.name, seed)


# ---------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentConfig:
    scale_range: tuple = (0.75, 1.5)
    crop_size: int = 64
    flip_prob: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2


def hflip(scene):
    return LabeledScene(scene.image[:, ::-1].copy(), scene.labels[:, ::-1].copy(), scene.domain, scene.seed)


def color_jitter(image, rng, cfg=AugmentConfig()):
    b = 1 + rng.uniform(-cfg.brightness, cfg.brightness)
    c = 1 + rng.uniform(-cfg.contrast, cfg.contrast)
    s = 1 + rng.uniform(-cfg.saturation, cfg.saturation)
    out = image * b
    mean = out.mean()
    out = (out - mean) * c + mean
    gray = out.mean(axis=2, keepdims=True)
    out = (out - gray) * s + gray
    return np.clip(out, 0, 1)


def crop_window(shape, crop, rng):
    """Top-left corner of a ``crop`` window inside ``shape`` (padded if smaller)."""
    h, w = shape
    return int(rng.integers(0, max(h - crop, 0) + 1)), int(rng.integers(0, max(w - crop, 0) + 1))


def augment(scene, seed, cfg=AugmentConfig()):
    """Random scale, crop, horizontal flip and colour jitter (labels move with
    the geometry; jitter never touches them). Regions padded by the crop are
    labelled ``IGNORE``."""
    rng = np.random.default_rng([seed, 15485863])
    image, labels = scene.image, scene.labels
    f = rng.uniform(*cfg.scale_range)
    h, w = labels.shape
    nh, nw = max(1, round(h * f)), max(1, round(w * f))
    image = ndimage.zoom(image, (nh / h, nw / w, 1), order=1, mode="nearest", grid_mode=True)
    labels = ndimage.zoom(labels, (nh / h, nw / w), order=0, mode="nearest", grid_mode=True)
    c = cfg.crop_size
    ph, pw = max(c - labels.shape[0], 0), max(c - labels.shape[1], 0)
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)))
        labels = np.pad(labels, ((0, ph), (0, pw)), constant_values=IGNORE)
    y, x = crop_window(labels.shape, c, rng)
    image, labels = image[y:y + c, x:x + c], labels[y:y + c, x:x + c]
    if rng.uniform() < cfg.flip_prob:
        image, labels = image[:, ::-1], labels[:, ::-1]
    image = color_jitter(np.clip(image, 0, 1), rng, cfg)
    return LabeledScene(np.ascontiguousarray(image), np.ascontiguousarray(labels), scene.domain, scene.seed)


# ---------------------------------------------------------------- file I/O

def _write_pnm(path, magic, array):
    h, w = array.shape[:2]
    header = f"{magic}\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(array, dtype=np.uint8).tobytes())


def _read_pnm(path, magic, channels):
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        fields.append(data[start:pos])
    if fields[0] != magic.encode():
        raise FormatError(f"{path}: expected magic {magic}, got {fields[0]!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise FormatError(f"{path}: non-integer header field") from None
    if maxval != 255 or w <= 0 or h <= 0:
        raise FormatError(f"{path}: unsupported header (w={w}, h={h}, maxval={maxval})")
    pos += 1  # single whitespace byte after maxval
    n = w * h * channels
    payload = data[pos:pos + n]
    if len(payload) != n:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {n}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w))


def quantize(image):
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


def write_scene(scene, image_path, label_path):
    _write_pnm(image_path, "P6", quantize(scene.image))
    _write_pnm(label_path, "P5", scene.labels.astype(np.uint8))


def read_scene(image_path, label_path, num_classes=None, domain="source", seed=-1):
    image = _read_pnm(image_path, "P6", 3)
    labels = _read_pnm(label_path, "P5", 1).copy()
    if image.shape[:2] != labels.shape:
        raise FormatError(f"image {image.shape[:2]} and labels {labels.shape} differ in size")
    scene = LabeledScene(image.astype(np.float64) / 255.0, labels, domain, seed)
    if num_classes is not None:
        scene.validate(num_classes)
    return scene


# ---------------------------------------------------------------- splits

SPLITS = {
    # name: (domain, first seed, default count)
    "train": ("source", 0, 500),
    "val": ("source", 100_000, 100),
    "hue_shift": ("hue_shift", 200_000, 100),
    "texture_noise": ("texture_noise", 300_000, 100),
    "sketch": ("sketch", 400_000, 100),
}


SEED_BLOCK = 1_000_000


def split_seeds(split, count=None, base_seed=0):
    """Domain and scene seeds of ``split``; ``base_seed`` shifts every split by
    a whole block so different datasets never share a scene."""
    domain, start, default = SPLITS[split]
    start += base_seed * SEED_BLOCK
    return domain, range(start, start + (default if count is None else count))


def generate_split(split, num_classes=5, size=64, count=None, base_seed=0):
    domain, seeds = split_seeds(split, count, base_seed)
    return [generate_scene(s, num_classes, size, domain) for s in seeds]


def write_dataset(root, num_classes=5, size=64, counts=None, base_seed=0):
    """Write every split under ``root`` and a ``manifest.jsonl``; returns its path."""
    root = Path(root)
    counts = counts or {}
    rows = []
    for split in SPLITS:
        d = root / split
        d.mkdir(parents=True, exist_ok=True)
        domain, seeds = split_seeds(split, counts.get(split), base_seed)
        for s in seeds:
            scene = generate_scene(s, num_classes, size, domain)
            img, lab = d / f"{s:08d}.ppm", d / f"{s:08d}.pgm"
            write_scene(scene, img, lab)
            rows.append({"path_image": str(img.relative_to(root)), "path_label": str(lab.relative_to(root)),
                         "domain": domain, "seed": s, "split": split})
    manifest = root / "manifest.jsonl"
    manifest.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    return manifest


def read_manifest(path):
    return [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()]


def load_split(root, split, num_classes=None):
    root = Path(root)
    rows = [r for r in read_manifest(root / "manifest.jsonl") if r["split"] == split]
    return [read_scene(root / r["path_image"], root / r["path_label"], num_classes, r["domain"], r["seed"])
            for r in rows]


def to_arrays(scenes):
    """Stack scenes into (N, 3, H, W) float and (N, H, W) int64 arrays."""
    images = np.stack([s.image.transpose(2, 0, 1) for s in scenes])
    labels = np.stack([s.labels for s in scenes]).astype(np.int64)
    return images, labels
