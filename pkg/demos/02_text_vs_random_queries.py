"""
Textual vs random object queries
================================

The simple pixel-query model: a toy image encoder plus K queries, scored by
cosine similarity per pixel. Queries come either from the prompted text
encoder or from a random learnable matrix. Both are trained on the source
style only and evaluated on the shifted styles.

Set ITERS (first argument) higher for steadier numbers.
"""
import sys

import numpy as np

from tqdm_mini import synthdata
from tqdm_mini.train import RunConfig, evaluate_domains, train

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 200
scenes = synthdata.generate_split("train")

results = {}
for mode in ("text", "random"):
    per_seed = []
    for seed in range(3):
        cfg = RunConfig(arch="pixel_query", query_mode=mode, iterations=iters,
                        warmup_iters=int(0.075 * iters), seed=seed)
        model = train(cfg, scenes=scenes).model
        per_seed.append({d: r["miou"] for d, r in evaluate_domains(model, cfg).items()})
    results[mode] = {d: np.mean([r[d] for r in per_seed]) for d in per_seed[0]}

print(f"{'domain':14s} {'text':>7s} {'random':>7s}")
for d in results["text"]:
    print(f"{d:14s} {results['text'][d]:7.4f} {results['random'][d]:7.4f}")
