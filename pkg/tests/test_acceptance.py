"""Acceptance gate. Each test prints one PASS/FAIL line for its criterion; the
lines are repeated in the terminal summary.

The training-based criteria (3, 6-10) take roughly half an hour on one core.
"""
import math
import time
import warnings

import numpy as np
import pytest
import torch

from conftest import record
from fdcheck import check_grads
from tqdm_mini import synthdata
from tqdm_mini.analysis import coherence_study, similarity_study
from tqdm_mini.evalkit import accumulate_confusion, empty_confusion, miou, pr_curve
from tqdm_mini.losses import (LossConfig, baseline_objective, bce_mask_loss, cls_loss, dice_loss, lang_reg,
                              seg_loss, total_loss, v_reg, vl_reg)
from tqdm_mini.mask_decoder import (IGNORE, NO_OBJECT, MaskedAttentionLayer, MatchAssignment, attention_mask,
                                    fixed_match, predict_classes, predict_masks)
from tqdm_mini.pixel_decoder import TextToPixelAttention
from tqdm_mini.train import (RunConfig, build_model, evaluate_domains, file_sha256, load_checkpoint, sample_batch,
                             train)
from tqdm_mini.vision_backbone import ToyViT

pytestmark = pytest.mark.slow

N_INSTANCES = 20
TOL = 1e-4
DOMAINS = synthdata.TARGET_DOMAINS


# ---------------------------------------------------------------- 1. gradients

def _inst(seed):
    return torch.Generator().manual_seed(seed), np.random.default_rng(seed)


def _rand(g, *shape):
    return torch.randn(*shape, generator=g, dtype=torch.float64)


def _seg_instance(g, b=2, k=3, n=2, size=4):
    labels = torch.randint(0, k, (b, size, size), generator=g)
    labels[0, 0, 0] = IGNORE
    assigns = [fixed_match(l, k) for l in labels]
    masks = [_rand(g, b, k, size, size).requires_grad_() for _ in range(n)]
    classes = [_rand(g, b, k, k + 1).requires_grad_() for _ in range(n)]
    return masks, classes, [assigns] * n


def grad_cases():
    """name -> function(seed) returning the worst relative error of one instance."""

    def bce(seed):
        g, r = _inst(seed)
        m, _, a = _seg_instance(g, n=1)
        return check_grads(lambda: bce_mask_loss(m[0], a[0]), m, r)

    def dice(seed):
        g, r = _inst(seed)
        m, _, a = _seg_instance(g, n=1)
        return check_grads(lambda: dice_loss(m[0], a[0]), m, r)

    def cls(seed):
        g, r = _inst(seed)
        _, c, a = _seg_instance(g, n=1)
        return check_grads(lambda: cls_loss(c[0], a[0]), c, r)

    def seg(seed):
        g, r = _inst(seed)
        m, c, a = _seg_instance(g)
        return check_grads(lambda: seg_loss(m, c, a)[0], m + c, r)

    def lang(seed):
        g, r = _inst(seed)
        t, T0 = _rand(g, 4, 6).requires_grad_(), _rand(g, 4, 6)
        return check_grads(lambda: lang_reg(t, T0), [t], r)

    def vl(seed):
        g, r = _inst(seed)
        x, t = _rand(g, 2, 9, 6).requires_grad_(), _rand(g, 3, 6).requires_grad_()
        y = torch.randint(0, 3, (2, 9), generator=g)
        return check_grads(lambda: vl_reg(x, t, y), [x, t], r)

    def v(seed):
        g, r = _inst(seed)
        a, b = _rand(g, 2, 6).requires_grad_(), _rand(g, 2, 6)
        return check_grads(lambda: v_reg(a, b), [a], r)

    def total(seed):
        g, r = _inst(seed)
        m, c, a = _seg_instance(g)
        t, T0 = _rand(g, 3, 6).requires_grad_(), _rand(g, 3, 6)
        x = _rand(g, 2, 9, 6).requires_grad_()
        y = torch.randint(0, 3, (2, 9), generator=g)
        cl, ref = _rand(g, 2, 6).requires_grad_(), _rand(g, 2, 6)
        f = lambda: total_loss(seg_loss(m, c, a)[0], lang_reg(t, T0), vl_reg(x, t, y), v_reg(cl, ref))
        return check_grads(f, [m[0], c[1], t, x, cl], r)

    def baseline(seed):
        g, r = _inst(seed)
        x, q = _rand(g, 2, 9, 6).requires_grad_(), _rand(g, 3, 6).requires_grad_()
        y = torch.randint(0, 3, (2, 9), generator=g)
        return check_grads(lambda: baseline_objective(x, q, y), [x, q], r)

    def t2p(seed):
        g, r = _inst(seed)
        torch.manual_seed(seed)
        blk = TextToPixelAttention(4).double()
        z, c = _rand(g, 7, 4).requires_grad_(), _rand(g, 3, 4).requires_grad_()
        # the key bias cancels inside the softmax; its gradient is identically zero
        params = [p for n, p in blk.named_parameters() if n != "k_proj.bias"]
        return check_grads(lambda: blk(z, c)[0].square().sum(), [z, c] + params, r, n_coords=4)

    def masked(seed):
        g, r = _inst(seed)
        torch.manual_seed(seed)
        lyr = MaskedAttentionLayer(8, nhead=2, ffn_dim=16).double()
        q, mem = _rand(g, 1, 3, 8).requires_grad_(), _rand(g, 1, 16, 8).requires_grad_()
        blocked = attention_mask(_rand(g, 1, 3, 4, 4), (4, 4))
        # the layer ends in LayerNorm, so ||out||^2 is nearly constant; probe a random projection
        w = _rand(g, 1, 3, 8)
        params = [lyr.cross_attn.q_proj.weight, lyr.cross_attn.v_proj.weight, lyr.ffn.fc1.weight]
        return check_grads(lambda: (lyr(q, mem, blocked) * w).sum(), [q, mem] + params, r, n_coords=4)

    def mask_head(seed):
        g, r = _inst(seed)
        q, Z = _rand(g, 2, 3, 5).requires_grad_(), _rand(g, 2, 4, 4, 5).requires_grad_()
        w = _rand(g, 2, 3, 4, 4)
        return check_grads(lambda: (predict_masks(q, Z).sigmoid() * w).sum(), [q, Z], r)

    def class_head(seed):
        g, r = _inst(seed)
        torch.manual_seed(seed)
        head = torch.nn.Linear(5, 4).double()
        q = _rand(g, 2, 3, 5).requires_grad_()
        return check_grads(lambda: predict_classes(q, head).log_softmax(-1)[..., 0].sum(),
                           [q, head.weight, head.bias], r)

    def backbone(seed):
        g, r = _inst(seed)
        torch.manual_seed(seed)
        vit = ToyViT(16, 8, 16, 1, 2, 8, 8).double()
        img = torch.rand(1, 3, 16, 16, generator=g, dtype=torch.float64)
        w = _rand(g, 1, 4, 8)
        params = [vit.patch_embed.weight, vit.blocks[0].attn.k_proj.weight, vit.joint_proj.weight,
                  vit.proj_fine.weight]
        f = lambda: (vit(img).x * w).sum() + vit(img).ms_features[0].square().mean()
        return check_grads(f, params, r, n_coords=3)

    return {"bce": bce, "dice": dice, "cls": cls, "seg_loss": seg, "lang_reg": lang, "vl_reg": vl,
            "v_reg": v, "total_loss": total, "baseline_objective": baseline, "text_to_pixel": t2p,
            "masked_attention": masked, "mask_head": mask_head, "class_head": class_head,
            "backbone": backbone}


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    worst = {}
    for name, case in grad_cases().items():
        worst[name] = max(case(seed) for seed in range(N_INSTANCES))
    elapsed = time.perf_counter() - start
    bad = {k: v for k, v in worst.items() if not v < TOL}
    ok = not bad and elapsed < 120
    top = max(worst, key=worst.get)
    record(1, ok, f"{len(worst)} losses/blocks x {N_INSTANCES} instances, worst rel. err "
                  f"{worst[top]:.1e} ({top}), {elapsed:.0f}s")
    assert not bad, bad
    assert elapsed < 120


# ---------------------------------------------------------------- 2. attention normalisation

def test_criterion_2_attention_normalisation():
    g = torch.Generator().manual_seed(0)
    row_err = 0.0
    for i in range(100):
        d = int(torch.randint(2, 17, (1,), generator=g))
        blk = TextToPixelAttention(d)
        L, K = (int(v) for v in torch.randint(1, 40, (2,), generator=g))
        _, W = blk(3 * torch.randn(L, d, generator=g), 3 * torch.randn(K, d, generator=g))
        row_err = max(row_err, float((W.detach().sum(-1) - 1).abs().max()))
    leak, checked = 0.0, 0
    for i in range(100):
        torch.manual_seed(i)
        lyr = MaskedAttentionLayer(8, nhead=2, ffn_dim=16)
        prev = 2 * torch.randn(2, 4, 4, 4, generator=g)
        blocked = attention_mask(prev, (4, 4))
        lyr(torch.randn(2, 4, 8, generator=g), torch.randn(2, 16, 8, generator=g), blocked)
        w = lyr.last_weights
        leak = max(leak, float(w.detach()[blocked].abs().max()) if blocked.any() else 0.0)
        checked += int(blocked.sum())
    ok = row_err < 1e-6 and leak == 0.0
    record(2, ok, f"max |row sum - 1| = {row_err:.1e} over 100 instances; "
                  f"max weight on {checked} disallowed pixels = {leak}")
    assert row_err < 1e-6 and leak == 0.0


# ---------------------------------------------------------------- 4. oracles

def _hand_miou(pred, gt, k):
    tp, fp, fn = [0] * k, [0] * k, [0] * k
    for p, y in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if y == IGNORE:
            continue
        if p == y:
            tp[y] += 1
        else:
            fp[p] += 1
            fn[y] += 1
    ious = [tp[c] / (tp[c] + fp[c] + fn[c]) for c in range(k) if tp[c] + fp[c] + fn[c]]
    return sum(ious) / len(ious)


def _brute_ap(scores, gt):
    pts = []
    for th in sorted(set(scores.tolist()) | {-1.0, 2.0}, reverse=True):
        sel = scores > th
        tp, n = int((sel & gt).sum()), int(sel.sum())
        pts.append((tp / gt.sum(), tp / n if n else 1.0))
    return sum((r1 - r0) * (p0 + p1) / 2 for (r0, p0), (r1, p1) in zip(pts, pts[1:]))


def test_criterion_4_oracle_equivalence():
    rng = np.random.default_rng(4)
    miou_ok = True
    for i in range(10):
        k = int(rng.integers(2, 5))
        gt = rng.integers(0, k, size=(4, 4))
        gt[rng.random((4, 4)) < 0.1] = IGNORE
        pred = np.where(rng.random((4, 4)) < 0.6, gt, rng.integers(0, k, size=(4, 4)))
        pred[gt == IGNORE] = 0
        _, m = miou(accumulate_confusion(pred, gt, empty_confusion(k)))
        miou_ok &= m == _hand_miou(pred, gt, k)
    _, m = miou(np.array([[3, 1], [1, 3]]))
    miou_ok &= abs(m - 0.6) < 1e-15

    ap_ok = True
    for i in range(20):
        n = int(rng.integers(1, 17))
        scores = rng.integers(0, 101, size=n) / 100.0
        gt = rng.random(n) < 0.5
        gt[0] = True
        exhaustive = np.concatenate([[-1.0], np.unique(scores), [2.0]])
        ap_ok &= pr_curve(scores, gt, exhaustive).ap == pytest.approx(_brute_ap(scores, gt), abs=1e-15)

    errs = []
    ones = MatchAssignment(np.array([0, 1, 2, 3]), np.ones((4, 2, 2), bool), np.ones((2, 2), bool))
    errs.append(abs(bce_mask_loss(torch.zeros(1, 4, 2, 2, dtype=torch.float64), [ones]).item() - math.log(2)))
    p = np.array([0.9, 0.1, 0.2, 0.8])
    y = np.array([1, 0, 0, 1])
    a = MatchAssignment(np.array([0]), y.reshape(1, 2, 2).astype(bool), np.ones((2, 2), bool))
    dice = dice_loss(torch.from_numpy(np.log(p / (1 - p))).reshape(1, 1, 2, 2), [a]).item()
    errs.append(abs(dice - (1 - (2 * 1.7 + 1) / (2.0 + 2 + 1))))
    errs.append(abs(cls_loss(torch.zeros(1, 4, 5, dtype=torch.float64), [ones]).item() - math.log(5)))
    none = MatchAssignment(np.full(4, NO_OBJECT), np.zeros((4, 2, 2), bool), np.ones((2, 2), bool))
    errs.append(abs(cls_loss(torch.randn(1, 4, 5, dtype=torch.float64), [none],
                             LossConfig(no_object_weight=0)).item()))
    e = torch.eye(2, 3, dtype=torch.float64)
    errs.append(abs(lang_reg(e, e).item() - math.log(1 + math.exp(-1))))
    loss_ok = max(errs) < 1e-10
    ok = bool(miou_ok and ap_ok and loss_ok)
    record(4, ok, f"mIoU exact on 10 random 4x4 + 1 crafted: {bool(miou_ok)}; AP = brute force on 20 "
                  f"instances: {bool(ap_ok)}; closed-form losses max err {max(errs):.1e}")
    assert ok


# ---------------------------------------------------------------- 5. additivity and toggles

def test_criterion_5_additivity_and_toggles():
    cfg = RunConfig(dtype="float64", pixel_layers=2, decoder_layers=3)
    torch.manual_seed(0)
    model = build_model(cfg)
    scenes = synthdata.generate_split("train", count=8)
    images, labels = sample_batch(scenes, cfg, 0)
    with torch.no_grad():
        out = model(images)
        full, rep = model.loss(images, labels, cfg.loss_config(), out=out)
    add_err = abs(rep.total - (rep.seg + rep.reg_L + rep.reg_VL + rep.reg_V))
    tog_err = 0.0
    for field, term in (("use_lang_reg", rep.reg_L), ("use_vl_reg", rep.reg_VL), ("use_v_reg", rep.reg_V)):
        with torch.no_grad():
            off, _ = model.loss(images, labels, cfg.replace(**{field: False}).loss_config(), out=out)
        tog_err = max(tog_err, abs((full - off).item() - term))
    with torch.no_grad():
        none, _ = model.loss(images, labels, cfg.replace(use_lang_reg=False, use_vl_reg=False,
                                                         use_v_reg=False).loss_config(), out=out)
    tog_err = max(tog_err, abs(none.item() - rep.seg))
    ok = add_err < 1e-12 and tog_err < 1e-12
    record(5, ok, f"|total - sum of terms| = {add_err:.1e}; toggle difference error {tog_err:.1e}")
    assert ok


# ---------------------------------------------------------------- 6. textual vs random queries

def _directional(better, worse):
    """(strict, soft): strict = better >= worse on every domain; soft fails only
    if better < worse on at least two domains."""
    losses = sum(better[d] < worse[d] for d in DOMAINS)
    return losses == 0, losses < 2


def _mean_over_seeds(results):
    return {d: float(np.mean([r[d]["miou"] for r in results])) for d in DOMAINS}


def test_criterion_6_textual_vs_random_queries():
    start = time.perf_counter()
    scenes = synthdata.generate_split("train")
    means = {}
    for mode in ("text", "random"):
        res = []
        for seed in range(3):
            cfg = RunConfig(arch="pixel_query", query_mode=mode, iterations=500, warmup_iters=37, seed=seed)
            model = train(cfg, scenes=scenes).model
            res.append(evaluate_domains(model, cfg, DOMAINS))
        means[mode] = _mean_over_seeds(res)
    elapsed = time.perf_counter() - start
    strict, soft = _directional(means["text"], means["random"])
    detail = ", ".join(f"{d} {means['text'][d]:.4f} vs {means['random'][d]:.4f}" for d in DOMAINS)
    record(6, strict and elapsed < 900, f"text vs random mIoU (3 seeds): {detail}; {elapsed:.0f}s"
                                        + ("" if soft else "; REGRESSION FLAG"))
    assert soft, "textual queries lose to random queries on two or more shifted domains"
    assert elapsed < 900


# ---------------------------------------------------------------- 7. text-to-pixel attention

T2P_ITERS = 500


def test_criterion_7_text_to_pixel_ablation():
    scenes = synthdata.generate_split("train")
    means = {}
    for use in (True, False):
        res = []
        for seed in range(3):
            cfg = RunConfig(use_text_to_pixel=use, iterations=T2P_ITERS, warmup_iters=int(0.075 * T2P_ITERS),
                            seed=seed)
            model = train(cfg, scenes=scenes).model
            res.append(evaluate_domains(model, cfg, DOMAINS))
        means[use] = _mean_over_seeds(res)
    on, off = np.mean(list(means[True].values())), np.mean(list(means[False].values()))
    strict, soft = _directional(means[True], means[False])
    detail = ", ".join(f"{d} {means[True][d]:.4f} vs {means[False][d]:.4f}" for d in DOMAINS)
    record(7, on >= off, f"mean shifted mIoU with/without text-to-pixel {on:.4f} vs {off:.4f} "
                         f"({T2P_ITERS} iters, 3 seeds; {detail})" + ("" if soft else "; REGRESSION FLAG"))
    assert soft, "text-to-pixel attention loses on two or more shifted domains"


# ---------------------------------------------------------------- 3, 8, 9, 10 share one full run

@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("full_run")
    cfg = RunConfig()
    assert cfg.iterations == 2000 and cfg.check_fixed_matching
    start = time.perf_counter()
    res = train(cfg, out)
    return res, time.perf_counter() - start


def test_criterion_3_fixed_matching_invariant(full_run):
    res, elapsed = full_run
    steps = len(res.metrics)
    early = np.mean([m["total"] for m in res.metrics[:50]])
    later = np.mean([m["total"] for m in res.metrics[150:200]])
    ok = steps == 2000
    record(3, ok, f"fixed-matching assertion held for all {steps} steps ({elapsed / 60:.1f} min); "
                  f"mean loss steps 0-50 {early:.2f} -> 150-200 {later:.2f}")
    assert ok
    assert later < early


def test_criterion_8_similarity_maps(full_run):
    res, _ = full_run
    scenes = synthdata.generate_split("val")
    rows, maps = similarity_study(res.model, scenes)
    frac = float(np.mean([r["higher_inside"] for r in rows]))
    ok = frac >= 0.8 and float(maps.min()) >= 0 and float(maps.max()) <= 1
    record(8, ok, f"similarity higher inside GT for {frac:.1%} of {len(rows)} (image, class) pairs")
    assert ok


def test_criterion_9_coherence(full_run):
    res, _ = full_run
    rows = []
    for d in DOMAINS:
        rows += coherence_study(res.model, synthdata.generate_split(d, count=40), num_anchors=20, seed=0)
    s0 = float(np.mean([r["stage0_same"] for r in rows]))
    sM = float(np.mean([r["stageM_same"] for r in rows]))
    o0 = float(np.mean([r["stage0_other"] for r in rows]))
    oM = float(np.mean([r["stageM_other"] for r in rows]))
    ok = sM > s0
    record(9, ok, f"same-class coherence stage 0 {s0:.4f} -> stage M {sM:.4f} "
                  f"(other-class {o0:.4f} -> {oM:.4f}; 20 anchors x 3 shifted domains; soft gate)")
    assert all(abs(r["stageM_self"] - 1) < 1e-5 for r in rows)
    if not ok:
        warnings.warn("coherence did not increase from stage 0 to stage M", RuntimeWarning)


def test_criterion_10_determinism_and_serialization(full_run, tmp_path):
    res, _ = full_run
    cfg = RunConfig(dtype="float64", iterations=20, warmup_iters=3, train_count=16, seed=7)
    a = train(cfg, tmp_path / "a")
    b = train(cfg, tmp_path / "b")
    same_log = file_sha256(a.metrics_path) == file_sha256(b.metrics_path)
    same_ckpt = all(torch.equal(a.model.state_dict()[k], b.model.state_dict()[k]) for k in a.model.state_dict())
    model, _, _ = load_checkpoint(res.checkpoint)
    images = torch.from_numpy(synthdata.to_arrays(synthdata.generate_split("hue_shift", count=4))[0]).float()
    with torch.no_grad():
        o1, o2 = res.model(images), model(images)
    round_trip = all(torch.equal(x, y) for x, y in zip(o1.decoder.mask_logits + o1.decoder.class_logits,
                                                       o2.decoder.mask_logits + o2.decoder.class_logits))
    ok = same_log and same_ckpt and round_trip
    record(10, ok, f"metrics logs hash-identical: {same_log}; weights identical: {same_ckpt}; "
                   f"checkpoint reload reproduces outputs exactly: {round_trip}")
    assert ok
