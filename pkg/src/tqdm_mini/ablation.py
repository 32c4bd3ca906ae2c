"""Toggle grid for the component ablations and its CSV table."""
from pathlib import Path

import numpy as np

from . import synthdata
from .evalkit import write_csv
from .train import evaluate_domains, file_sha256, train

# name -> config overrides; grouped the way the ablation table reads
VARIANTS = {
    # query / attention components
    "random_queries": dict(use_textual_queries=False, use_text_to_pixel=False),
    "textual_queries": dict(use_textual_queries=True, use_text_to_pixel=False),
    "textual_queries+t2p": dict(use_textual_queries=True, use_text_to_pixel=True),
    # regularizers
    "no_reg": dict(use_lang_reg=False, use_vl_reg=False, use_v_reg=False),
    "reg_L": dict(use_lang_reg=True, use_vl_reg=False, use_v_reg=False),
    "reg_L+VL": dict(use_lang_reg=True, use_vl_reg=True, use_v_reg=False),
    "reg_L+VL+V": dict(use_lang_reg=True, use_vl_reg=True, use_v_reg=True),
    # matching and prompt
    "bipartite_matching": dict(matching="bipartite"),
    "fixed_template_prompt": dict(prompt="fixed_template"),
}
TOGGLES = ("use_textual_queries", "use_text_to_pixel", "use_lang_reg", "use_vl_reg", "use_v_reg",
           "matching", "prompt")
DEFAULT_GRID = ("random_queries", "textual_queries", "textual_queries+t2p")


def run_grid(base_cfg, out_dir, variants=DEFAULT_GRID, seeds=(0, 1, 2), eval_count=None,
             splits=("val",) + synthdata.TARGET_DOMAINS, scenes=None):
    """Train every (variant, seed) pair and evaluate it. Writes
    ``ablation.csv`` (one row per run) and returns the rows as dicts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name in variants:
        if name not in VARIANTS:
            raise KeyError(f"unknown ablation variant {name!r}; choose from {sorted(VARIANTS)}")
        for seed in seeds:
            cfg = base_cfg.replace(seed=seed, **VARIANTS[name])
            run_dir = out / f"{name}_seed{seed}"
            res = train(cfg, run_dir, scenes=scenes)
            ev = evaluate_domains(res.model, cfg, splits, eval_count)
            row = {"variant": name, "seed": seed, **{k: getattr(cfg, k) for k in TOGGLES}}
            row.update({f"miou_{s}": ev[s]["miou"] for s in splits})
            shifted = [ev[s]["miou"] for s in splits if s in synthdata.TARGET_DOMAINS]
            row["miou_shifted_mean"] = float(np.mean(shifted)) if shifted else float("nan")
            row["config_hash"] = cfg.config_hash()
            row["checkpoint_sha256"] = file_sha256(res.checkpoint)
            rows.append(row)
    header = list(rows[0]) if rows else []
    write_csv(out / "ablation.csv", header, [[r[k] for k in header] for r in rows])
    return rows


def summarize(rows):
    """Mean over seeds per variant: {variant: {metric: mean}}."""
    out = {}
    for name in dict.fromkeys(r["variant"] for r in rows):
        sel = [r for r in rows if r["variant"] == name]
        out[name] = {k: float(np.mean([r[k] for r in sel])) for k in sel[0] if k.startswith("miou_")}
    return out
