"""Analysis studies on a trained model: similarity maps, semantic coherence of
pixel-decoder embeddings and region-proposal PR curves, with CSV exports."""
from pathlib import Path

import numpy as np
import torch

from . import synthdata
from .evalkit import coherence_map, pr_curve, proposal_scores, similarity_map, write_csv, write_grid_csv
from .losses import downsample_labels


def _batch(scenes, dtype):
    images, labels = synthdata.to_arrays(scenes)
    return torch.from_numpy(images).to(dtype), torch.from_numpy(labels)


def _dtype(model):
    return next(model.parameters()).dtype


@torch.no_grad()
def similarity_study(model, scenes):
    """Per (image, present class): mean similarity-map value inside vs outside
    the GT region. Returns (rows, maps) with maps (N, H, W, K)."""
    images, labels = _batch(scenes, _dtype(model))
    if hasattr(model, "text"):
        out = model(images)
        x, t, grid = out.x, out.t, out.grid
    else:
        x, t, grid = model(images)
    rows, maps = [], []
    for i in range(len(scenes)):
        m = similarity_map(x[i], t, grid, tuple(labels.shape[-2:]))
        maps.append(m)
        for k in range(t.shape[0]):
            gt = labels[i] == k
            if not gt.any() or gt.all():
                continue
            valid = labels[i] != synthdata.IGNORE
            inside = float(m[..., k][gt].mean())
            outside = float(m[..., k][~gt & valid].mean())
            rows.append({"image": i, "seed": scenes[i].seed, "class": k,
                         "inside": inside, "outside": outside, "higher_inside": inside > outside})
    return rows, torch.stack(maps)


def _fine_maps(features, shape):
    b, _, d = features.shape
    return features.reshape(b, *shape, d)


@torch.no_grad()
def coherence_study(model, scenes, num_anchors=20, seed=0):
    """Same-class coherence at pixel-decoder stage 0 and stage M.

    Anchors are sampled pixels (at the fine decoder scale) of a non-background
    class; each anchor's cosine map is taken over the next image in ``scenes``
    and averaged over pixels sharing the anchor's class. The average over all
    other labelled pixels is kept alongside for contrast.
    """
    images, labels = _batch(scenes, _dtype(model))
    out = model(images)
    shape = out.shapes[0]
    f0 = _fine_maps(out.pixel_stage0[0], shape)
    fM = _fine_maps(out.pixel_stageM[0], shape)
    lab = downsample_labels(labels, shape)
    rng = np.random.default_rng(seed)
    rows, n = [], len(scenes)
    attempts = 0
    while len(rows) < num_anchors and attempts < 100 * num_anchors:
        attempts += 1
        i = int(rng.integers(n))
        j = (i + 1) % n
        ys, xs = np.nonzero((lab[i] > 0).numpy() & (lab[i] != synthdata.IGNORE).numpy())
        if len(ys) == 0:
            continue
        p = int(rng.integers(len(ys)))
        anchor = (int(ys[p]), int(xs[p]))
        c = int(lab[i][anchor])
        same = lab[j] == c
        other = (lab[j] != c) & (lab[j] != synthdata.IGNORE)
        if not same.any() or not other.any():
            continue
        row = {"image": i, "target": j, "y": anchor[0], "x": anchor[1], "class": c}
        for name, f in (("stage0", f0), ("stageM", fM)):
            cm = coherence_map(f[i], anchor, f[j])
            row[f"{name}_same"] = float(cm[same].mean())
            row[f"{name}_other"] = float(cm[other].mean())
            row[f"{name}_self"] = float(coherence_map(f[i], anchor)[anchor])
        rows.append(row)
    return rows


@torch.no_grad()
def pr_study(model, scenes, thresholds=None):
    """Region-proposal PR curve per class, pooled over ``scenes``. Proposals
    ``sigmoid(Z q0^T)`` live on the fine grid; labels are sampled to match."""
    images, labels = _batch(scenes, _dtype(model))
    out = model(images)
    scores = torch.stack([proposal_scores(z, out.q0) for z in out.Z])  # (N, h, w, K)
    lab = downsample_labels(labels, tuple(scores.shape[1:3]))
    valid = lab != synthdata.IGNORE
    curves = []
    for k in range(scores.shape[-1]):
        curves.append(pr_curve(scores[..., k][valid].double().numpy(), (lab[valid] == k).numpy(), thresholds))
    return curves


def export_simmap(model, scenes, out_dir, max_images=4):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, maps = similarity_study(model, scenes)
    write_csv(out / "simmap_summary.csv", ["image", "seed", "class", "inside", "outside", "higher_inside"],
              [[r[k] for k in ("image", "seed", "class", "inside", "outside", "higher_inside")] for r in rows])
    for i in range(min(max_images, len(scenes))):
        for k in range(maps.shape[-1]):
            write_grid_csv(out / f"simmap_img{i}_class{k}.csv", maps[i, ..., k])
    return rows


def export_coherence(model, scenes, out_dir, num_anchors=20, seed=0, max_maps=4):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = coherence_study(model, scenes, num_anchors, seed)
    keys = ["image", "target", "y", "x", "class", "stage0_self", "stage0_same", "stage0_other",
            "stageM_self", "stageM_same", "stageM_other"]
    write_csv(out / "coherence_summary.csv", keys, [[r[k] for k in keys] for r in rows])
    images, _ = _batch(scenes, _dtype(model))
    with torch.no_grad():
        o = model(images)
    shape = o.shapes[0]
    for n, r in enumerate(rows[:max_maps]):
        for name, feats in (("stage0", o.pixel_stage0[0]), ("stageM", o.pixel_stageM[0])):
            f = _fine_maps(feats, shape)
            write_grid_csv(out / f"coherence_anchor{n}_{name}.csv",
                           coherence_map(f[r["image"]], (r["y"], r["x"]), f[r["target"]]))
    return rows


def export_pr(model, scenes, out_dir, class_names=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    curves = pr_study(model, scenes)
    rows, ap_rows = [], []
    for k, c in enumerate(curves):
        name = class_names[k] if class_names else str(k)
        rows += [[k, name, float(t), float(p), float(r)] for t, p, r in zip(c.thresholds, c.precision, c.recall)]
        ap_rows.append([k, name, c.ap, c.defined])
    write_csv(out / "pr_curves.csv", ["class", "name", "threshold", "precision", "recall"], rows)
    write_csv(out / "pr_ap.csv", ["class", "name", "ap", "defined"], ap_rows)
    return curves

