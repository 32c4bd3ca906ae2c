"""
Training the full model and looking inside
==========================================

A short run of the full model (text queries, text-to-pixel attention, all
three regularizers), then the per-domain mIoU, a similarity-map check,
coherence of the pixel-decoder embeddings and region-proposal AP.

The acceptance run uses 2000 iterations; the default here is shorter.
"""
import sys

import numpy as np

from tqdm_mini import synthdata
from tqdm_mini.analysis import coherence_study, pr_study, similarity_study
from tqdm_mini.train import RunConfig, evaluate_domains, train

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 300
cfg = RunConfig(iterations=iters, warmup_iters=int(0.075 * iters))
res = train(cfg)
m = res.metrics
print(f"loss: first 50 steps {np.mean([r['total'] for r in m[:50]]):.2f}, "
      f"last 50 steps {np.mean([r['total'] for r in m[-50:]]):.2f}")

for d, r in evaluate_domains(res.model, cfg, count=50).items():
    print(f"{d:14s} mIoU {r['miou']:.4f}  per class {np.round(r['iou'], 3)}")

# pixel-text similarity should be higher on the class's own pixels
val = synthdata.generate_split("val", count=30)
rows, _ = similarity_study(res.model, val)
print(f"similarity higher inside GT: {np.mean([r['higher_inside'] for r in rows]):.0%} of pairs")

# same-class cosine similarity to an anchor pixel, before and after the pixel decoder
for d in synthdata.TARGET_DOMAINS:
    rows = coherence_study(res.model, synthdata.generate_split(d, count=30))
    s0 = np.mean([r["stage0_same"] for r in rows])
    sM = np.mean([r["stageM_same"] for r in rows])
    print(f"{d:14s} coherence {s0:.3f} -> {sM:.3f}")

# region proposals from the initial queries
for k, c in enumerate(pr_study(res.model, val)):
    print(f"class {k} proposal AP {c.ap:.3f}")
