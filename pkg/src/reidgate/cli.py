"""Command-line surface: train, eval, ablate, gradcheck, gen-data, rerank."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import retrieval, synthdata, training
from .config import ExperimentConfig, apply_overrides, load_config
from .verification import run_pipeline_gradcheck


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    for item in getattr(args, "set", None) or []:
        key, _, value = item.partition("=")
        overrides[key] = json.loads(value)
    return apply_overrides(cfg, overrides) if overrides else cfg


def cmd_train(args):
    cfg = _load_cfg(args)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    t0 = time.time()
    result = training.train(cfg, out_dir=out, log=print)
    ckpt = os.path.join(out, "checkpoint.json")
    training.save_checkpoint(ckpt, result.model, cfg, result.vocab, result.label_classes,
                             len(result.trace), result.rng)
    training.write_trace_csv(result.trace, os.path.join(out, "loss_trace.csv"))
    cfg.to_json(os.path.join(out, "config.json"))
    print(f"trained {cfg.optim.epochs} epochs in {time.time() - t0:.1f}s; checkpoint at {ckpt}")


def cmd_eval(args):
    model, cfg, vocab, _, _, _ = training.load_checkpoint(args.checkpoint)
    if args.synthetic:
        dataset = training.build_dataset(cfg)
    elif args.data:
        dataset = synthdata.load_dataset(os.path.join(args.data, "features.jsonl"),
                                         os.path.join(args.data, "captions.jsonl"))
    else:
        raise SystemExit("eval: pass --data DIR or --synthetic")
    run = training.evaluate(model, dataset, vocab, cfg, metric=args.metric)
    doc = run.to_json_dict(include_embeddings=args.out is not None)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(doc, fh)
        print(f"evaluation run written to {args.out}")
    print(json.dumps({"metrics": doc["metrics"], "gate_stats": doc["gate_stats"]}, indent=2))


def cmd_ablate(args):
    cfg = _load_cfg(args)
    rows = training.ablation(cfg, log=print)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=2)
    print(training.format_ablation_table(rows))


def cmd_gradcheck(args):
    t0 = time.time()
    checks = run_pipeline_gradcheck(trials=args.trials, tolerance=args.tolerance, log=print)
    worst = max(c.max_rel_err for c in checks)
    ok = all(c.passed for c in checks)
    print(f"{len(checks)} trials, worst rel err {worst:.3e}, {time.time() - t0:.1f}s: "
          f"{'PASS' if ok else 'FAIL'}")
    sys.exit(0 if ok else 1)


def cmd_gen_data(args):
    os.makedirs(args.out, exist_ok=True)
    bank = synthdata.synth_identity_bank(args.ids, seed=args.seed)
    records = synthdata.generate_dataset(bank, obs_per_id=args.obs, seed=args.seed)
    synthdata.save_features(records, os.path.join(args.out, "features.jsonl"))
    synthdata.save_captions(records, os.path.join(args.out, "captions.jsonl"))
    print(f"wrote {len(records)} observations for {args.ids} identities to {args.out}")


def cmd_rerank(args):
    with open(args.report) as fh:
        doc = json.load(fh)
    if "query" not in doc:
        raise SystemExit("rerank: the evaluation run file lacks embeddings; "
                         "re-run `reidgate eval --out` to produce one")
    q = np.asarray(doc["query"]["features"])
    g = np.asarray(doc["gallery"]["features"])
    dist = retrieval.distance_matrix(q, g, "euclidean")
    reranked = retrieval.k_reciprocal_rerank(dist, q, g, k1=args.k1, k2=args.k2, lam=getattr(args, "lambda"))
    report = retrieval.evaluate_ranking(
        q, g, np.asarray(doc["query"]["ids"]), np.asarray(doc["query"]["cameras"]),
        np.asarray(doc["gallery"]["ids"]), np.asarray(doc["gallery"]["cameras"]),
        dist=reranked,
    )
    print(json.dumps(report.to_json_dict(), indent=2))


def build_parser():
    parser = argparse.ArgumentParser(prog="reidgate",
                                     description="Gated caption + visual fusion re-id laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=JSON",
                   help="override a config key, e.g. --set optim.lr=0.01")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="directory with features.jsonl and captions.jsonl")
    p.add_argument("--synthetic", action="store_true",
                   help="regenerate the synthetic dataset from the checkpoint config")
    p.add_argument("--metric", default="euclidean", choices=retrieval.METRICS)
    p.add_argument("--out", help="write the full evaluation run (with embeddings) here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare loss/gate variants")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="write the comparison table JSON here")
    p.add_argument("--set", action="append", metavar="KEY=JSON")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full pipeline")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset on disk")
    p.add_argument("--out", required=True)
    p.add_argument("--ids", type=int, default=50)
    p.add_argument("--obs", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("rerank", help="re-rank a saved evaluation run")
    p.add_argument("--report", required=True, help="evaluation run JSON from `eval --out`")
    p.add_argument("--k1", type=int, default=20)
    p.add_argument("--k2", type=int, default=6)
    p.add_argument("--lambda", type=float, default=0.3, dest="lambda")
    p.set_defaults(func=cmd_rerank)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
