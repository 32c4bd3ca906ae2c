"""Command-line entry points: gen-data, train, eval, analyze, ablate.

Configs are flat JSON files with ``RunConfig`` keys. ``--seed`` and any
``--set key=value`` flags override the file, and the resolved config is
written next to every output.
"""
import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import ablation, analysis, synthdata
from .errors import ConfigError, TqdmMiniError
from .evalkit import write_csv, write_jsonl
from .model import SYNTH_CLASSES
from .train import RunConfig, configure_threads, evaluate_domains, file_sha256, load_checkpoint, train

log = logging.getLogger("tqdm_mini")


def _coerce(field, text):
    """Parse a ``--set`` value according to the RunConfig field type."""
    kind = field.type if isinstance(field.type, str) else field.type.__name__
    if kind == "bool":
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{field.name}: expected a boolean, got {text!r}")
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    return text


def resolve_config(args):
    d = {}
    if getattr(args, "config", None):
        d.update(json.loads(Path(args.config).read_text()))
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep or key not in fields:
            raise ConfigError(f"bad --set {item!r}; expected KEY=VALUE with a known key")
        d[key] = _coerce(fields[key], value)
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    return RunConfig.from_dict(d)


def _write_config(out, cfg, extra=None):
    payload = {"config": cfg.to_dict(), "config_hash": cfg.config_hash(), **(extra or {})}
    (out / "resolved_config.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def cmd_gen_data(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    d = json.loads(Path(args.config).read_text()) if args.config else {}
    size = d.get("crop_size", 64)
    k = d.get("num_classes", 5)
    counts = {s: d[f"{s}_count"] for s in synthdata.SPLITS if f"{s}_count" in d}
    seed = args.seed or 0
    manifest = synthdata.write_dataset(out, k, size, counts, base_seed=seed)
    resolved = {"num_classes": k, "crop_size": size, "seed": seed,
                "counts": {s: counts.get(s, synthdata.SPLITS[s][2]) for s in synthdata.SPLITS}}
    (out / "dataset_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True))
    print(f"wrote {len(synthdata.read_manifest(manifest))} scenes to {out}")


def cmd_train(args):
    cfg = resolve_config(args)
    out = Path(args.out)
    res = train(cfg, out)
    _write_config(out, cfg, {"checkpoint": res.checkpoint.name,
                             "checkpoint_sha256": file_sha256(res.checkpoint)})
    last = res.metrics[-1]
    print(f"trained {cfg.iterations} steps, final total loss {last['total']:.4f}; checkpoint {res.checkpoint}")


def _names(cfg):
    return SYNTH_CLASSES[:cfg.num_classes]


def cmd_eval(args):
    model, cfg, _ = load_checkpoint(args.checkpoint)
    if args.data_dir:
        cfg = cfg.replace(data_dir=args.data_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = evaluate_domains(model, cfg, tuple(args.domains), args.count)
    write_csv(out / "miou.csv", ["domain", "miou"], [[d, r["miou"]] for d, r in res.items()])
    rows = [[d, k, name, r["iou"][k]] for d, r in res.items() for k, name in enumerate(_names(cfg))]
    write_csv(out / "class_iou.csv", ["domain", "class", "name", "iou"], rows)
    write_jsonl(out / "eval.jsonl", [{"domain": d, "miou": r["miou"], "iou": r["iou"].tolist(),
                                      "confusion": r["confusion"].tolist()} for d, r in res.items()])
    _write_config(out, cfg, {"checkpoint": str(args.checkpoint),
                             "checkpoint_sha256": file_sha256(args.checkpoint)})
    for d, r in res.items():
        print(f"{d:14s} mIoU {r['miou']:.4f}")


def cmd_analyze(args):
    model, cfg, _ = load_checkpoint(args.checkpoint)
    if cfg.arch != "tqdm" and args.kind != "simmap":
        raise ConfigError(f"analysis {args.kind!r} needs a tqdm checkpoint")
    out = Path(args.out)
    if cfg.data_dir or args.data_dir:
        scenes = synthdata.load_split(args.data_dir or cfg.data_dir, args.split, cfg.num_classes)[:args.count]
    else:
        scenes = synthdata.generate_split(args.split, cfg.num_classes, cfg.crop_size, args.count)
    if args.kind == "simmap":
        rows = analysis.export_simmap(model, scenes, out)
        frac = sum(r["higher_inside"] for r in rows) / max(len(rows), 1)
        print(f"similarity higher inside GT for {frac:.1%} of {len(rows)} (image, class) pairs")
    elif args.kind == "coherence":
        rows = analysis.export_coherence(model, scenes, out, args.anchors, cfg.seed)
        s0 = sum(r["stage0_same"] for r in rows) / len(rows)
        sM = sum(r["stageM_same"] for r in rows) / len(rows)
        print(f"same-class coherence over {len(rows)} anchors: stage 0 {s0:.4f}, stage M {sM:.4f}")
    else:
        curves = analysis.export_pr(model, scenes, out, _names(cfg))
        for name, c in zip(_names(cfg), curves):
            print(f"{name:12s} AP {c.ap:.4f}")
    _write_config(out, cfg, {"checkpoint": str(args.checkpoint), "analysis": args.kind,
                             "split": args.split, "count": args.count})


def cmd_ablate(args):
    cfg = resolve_config(args)
    out = Path(args.out)
    rows = ablation.run_grid(cfg, out, tuple(args.variants), tuple(args.seeds), args.count)
    _write_config(out, cfg, {"variants": args.variants, "seeds": args.seeds})
    for name, m in ablation.summarize(rows).items():
        print(f"{name:24s} shifted mIoU {m['miou_shifted_mean']:.4f}")


def build_parser():
    p = argparse.ArgumentParser(prog="tqdm-mini", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", type=Path, help="flat JSON config")
        if seed:
            sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path, required=True)

    sp = sub.add_parser("gen-data", help="write the synthetic benchmark")
    common(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train on the source domain")
    common(sp)
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="mIoU and per-class IoU per domain")
    common(sp, seed=False)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--domains", nargs="+", default=["val", *synthdata.TARGET_DOMAINS],
                    choices=list(synthdata.SPLITS))
    sp.add_argument("--count", type=int)
    sp.add_argument("--data-dir")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("analyze", help="similarity maps, coherence maps or PR curves")
    common(sp, seed=False)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--kind", choices=["simmap", "coherence", "pr"], required=True)
    sp.add_argument("--split", default="val", choices=list(synthdata.SPLITS))
    sp.add_argument("--count", type=int, default=20)
    sp.add_argument("--anchors", type=int, default=20)
    sp.add_argument("--data-dir")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("ablate", help="train and evaluate a toggle grid")
    common(sp)
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.add_argument("--variants", nargs="+", default=list(ablation.DEFAULT_GRID),
                    choices=sorted(ablation.VARIANTS))
    sp.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    sp.add_argument("--count", type=int, help="scenes per evaluation split")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    configure_threads()
    try:
        args.func(args)
    except (TqdmMiniError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
