"""Command-line entry points: train, eval, ablate, sweep, synth, check."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

# MYGRAM_THREADS caps BLAS threads; it only takes effect before numpy loads
if os.environ.get("MYGRAM_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["MYGRAM_THREADS"])

import numpy as np

from .config import TrainConfig
from .kgdata import IngestOptions, SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from .model import VARIANTS, ModelParams, check_variant
from .pipeline import AlignmentData, RankingReport, TrainingDiverged, ablate, evaluate, seed_sweep, train

log = logging.getLogger("gramalign")


def _config(path) -> TrainConfig:
    return TrainConfig.from_json(path) if path else TrainConfig()


def _data(root, cfg: TrainConfig) -> AlignmentData:
    opts = IngestOptions(visual_dim=cfg.visual_dim, train_ratio=cfg.train_ratio, split_seed=cfg.seed)
    kg1, kg2, seeds = load_dataset(root, opts)
    return AlignmentData.from_graphs(kg1, kg2, seeds)


def _int_list(text):
    return [int(x) for x in text.split(",") if x.strip()]


def _float_list(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _table(rows, header):
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*header), fmt.format(*("-" * w for w in widths))]
    lines += [fmt.format(*r) for r in rows]
    return "\n".join(lines)


def _metrics(rep: RankingReport):
    return [f"{rep.hits1:.4f}", f"{rep.hits10:.4f}", f"{rep.mrr:.4f}"]


def sidecar_path(ckpt) -> Path:
    return Path(str(ckpt) + ".json")


def cmd_train(args):
    cfg = _config(args.config)
    variant = check_variant(args.variant)
    data = _data(args.data, cfg)
    result = train(data, cfg, variant)
    result.params.save(args.out)
    with open(sidecar_path(args.out), "w", encoding="utf-8") as fh:
        json.dump({"config": cfg.to_flat(), "variant": variant}, fh, indent=2, sort_keys=True)
    print(f"trained {cfg.epochs} epochs, final loss {result.history[-1]:.6f}" if result.history
          else "trained 0 epochs")
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_eval(args):
    side = sidecar_path(args.ckpt)
    variant = "full"
    if args.config:
        cfg = _config(args.config)
    elif side.exists():
        meta = json.loads(side.read_text(encoding="utf-8"))
        cfg = TrainConfig.from_flat(meta["config"])
        variant = meta.get("variant", "full")
    else:
        cfg = TrainConfig()
    data = _data(args.data, cfg)
    params = ModelParams.load(args.ckpt, cfg)
    rep = evaluate(params, data, cfg, variant)
    if args.json:
        print(json.dumps(rep.to_dict()))
    else:
        print(_table([_metrics(rep) + [str(len(rep.per_query_rank))]],
                     ["Hits@1", "Hits@10", "MRR", "queries"]))
    return 0


def cmd_ablate(args):
    base = _config(args.config)
    variants = [check_variant(v.strip()) for v in args.variant.split(",") if v.strip()]
    seeds = _int_list(args.seeds) if args.seeds else [base.seed]
    out = {"seeds": seeds, "variants": {}}
    for variant in variants:
        runs = []
        for seed in seeds:
            cfg = replace(base, seed=seed)
            rep, _ = ablate(_data(args.data, cfg), cfg, variant)
            runs.append({"seed": seed, "hits1": rep.hits1, "hits10": rep.hits10, "mrr": rep.mrr})
            log.info("%s seed %d: mrr %.4f", variant, seed, rep.mrr)
        mean = {k: float(np.mean([r[k] for r in runs])) for k in ("hits1", "hits10", "mrr")}
        out["variants"][variant] = {"mean": mean, "runs": runs}
    if args.json:
        print(json.dumps(out))
    else:
        rows = [[v, f"{m['mean']['hits1']:.4f}", f"{m['mean']['hits10']:.4f}", f"{m['mean']['mrr']:.4f}"]
                for v, m in out["variants"].items()]
        print(f"mean over seeds {seeds}")
        print(_table(rows, ["variant", "Hits@1", "Hits@10", "MRR"]))
    return 0


def cmd_sweep(args):
    cfg = _config(args.config)
    ratios = _float_list(args.ratios)
    reports = seed_sweep(_data(args.data, cfg), cfg, ratios)
    out = [{"ratio": r, **{k: v for k, v in rep.to_dict().items() if k != "ranks"}}
           for r, rep in zip(ratios, reports)]
    if args.json:
        print(json.dumps({"sweep": out}))
    else:
        print(_table([[f"{r:g}"] + _metrics(rep) for r, rep in zip(ratios, reports)],
                     ["ratio", "Hits@1", "Hits@10", "MRR"]))
    return 0


def cmd_synth(args):
    spec = SyntheticSpec.from_json(args.spec) if args.spec else SyntheticSpec()
    kg1, kg2, seeds = generate_synthetic(spec, rng_seed=args.seed)
    save_dataset(args.out, kg1, kg2, seeds)
    print(f"wrote {spec.n} + {spec.n} entities, {len(kg1.triples)} + {len(kg2.triples)} triples to {args.out}")
    return 0


def cmd_check(args):
    from .selfcheck import run_all
    ok = run_all(sys.stdout)
    print("all checks passed" if ok else "some checks failed")
    return 0 if ok else 1


def build_parser():
    p = argparse.ArgumentParser(prog="gramalign", description="Multi-modal entity alignment.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train and write a checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--variant", default="full", help=", ".join(VARIANTS))
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="rank test pairs with a checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--config", help="defaults to the config saved next to the checkpoint")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="train and evaluate model variants")
    s.add_argument("--variant", required=True, help="comma-separated: " + ", ".join(VARIANTS))
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--seeds", help="comma-separated seeds to average over")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("sweep", help="retrain at several seed ratios")
    s.add_argument("--ratios", default="0.05,0.1,0.2,0.3")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("synth", help="write a synthetic benchmark dataset")
    s.add_argument("--spec")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("check", help="run numerical self-checks")
    s.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
