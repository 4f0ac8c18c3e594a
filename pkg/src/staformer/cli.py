"""Command line interface.

Exit codes: 0 success, 2 invalid input or configuration, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .ablation import ALL_ROWS, run_ablation_ladder
from .affordance import build_database, load_database, samples_from_json, samples_to_json, save_database
from .config import PipelineConfig, load_config
from .errors import NumericError, StaformerError
from .evaluator import evaluate, group_ground_truth, group_predictions
from .pipeline import (
    affordance_samples,
    dump_stages,
    load_checkpoint,
    predict_dataset,
    run_pipeline_full,
    save_checkpoint,
    train_toy,
)
from .synthetic import DatasetSpec, generate_dataset, load_dataset, save_dataset

log = logging.getLogger("staformer")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    return cfg


def _out(args) -> Path:
    if args.out is None:
        raise StaformerError(f"{args.command} needs --out")
    return Path(args.out)


def cmd_gen_data(args) -> None:
    spec = DatasetSpec(num_scenarios=args.num, num_scenes=args.scenes)
    seed = 0 if args.seed is None else args.seed
    save_dataset(generate_dataset(spec, seed), _out(args), spec, seed)


def cmd_train_toy(args) -> None:
    cfg = _config(args)
    if args.steps is not None:
        cfg.train.steps = args.steps
    scenarios, _, _ = load_dataset(args.data)
    ckpt = train_toy(scenarios, cfg)
    out = _out(args)
    save_checkpoint(ckpt, out / "checkpoint")
    # embeddings of the training set, the input of build-affordances
    _write_json(out / "affordance_samples.json", samples_to_json(affordance_samples(ckpt.build_model(), scenarios)))
    _write_json(out / "loss.json", {"loss": ckpt.history})


def _load_db(args, cfg):
    if not cfg.affordance.enabled:
        return None
    if args.affordances is None:
        raise StaformerError("affordances are enabled in the config but --affordances was not given")
    return load_database(args.affordances)[0]


def cmd_infer(args) -> None:
    cfg = _config(args)
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model(cfg)
    scenarios, _, _ = load_dataset(args.data)
    preds = predict_dataset(model, scenarios, cfg, _load_db(args, cfg))
    items = [p.to_json(sid) for sid in sorted(preds) for p in preds[sid]]
    _write_json(_out(args), items)


def cmd_build_affordances(args) -> None:
    cfg = _config(args)
    if args.zones is not None:
        cfg.affordance.num_zones = args.zones
    if args.seed is not None:
        cfg.affordance.seed = args.seed
    samples = samples_from_json(json.loads(Path(args.inp).read_text()))
    db = build_database(samples, cfg.head.num_nouns, cfg.head.num_verbs, cfg.affordance)
    save_database(db, _out(args), cfg.affordance, cfg.head.num_nouns, cfg.head.num_verbs)


def cmd_eval(args) -> None:
    preds = group_predictions(json.loads(Path(args.pred).read_text()))
    gts = group_ground_truth(json.loads(Path(args.gt).read_text()))
    report = evaluate(preds, gts, iou_threshold=args.iou, ttc_tolerance=args.ttc_tol)
    _write_json(_out(args), report.to_json())


def cmd_ablate(args) -> None:
    train, _, _ = load_dataset(args.train)
    test, _, _ = load_dataset(args.test)
    base = load_config(args.config) if args.config else None
    seed0 = 0 if args.seed is None else args.seed
    result = run_ablation_ladder(train, test, [seed0 + i for i in range(args.num_seeds)], ALL_ROWS, base)
    out = _out(args)
    _write_json(out / "ladder.json", result.to_json())
    (out / "ladder.txt").write_text(result.render() + "\n")
    print(result.render())


def cmd_dump_stages(args) -> None:
    cfg = _config(args)
    ckpt = load_checkpoint(args.checkpoint)
    scenarios, _, _ = load_dataset(args.data)
    by_id = {s.scenario_id: s for s in scenarios}
    if args.scenario not in by_id:
        raise StaformerError(f"scenario {args.scenario} not in dataset")
    output = run_pipeline_full(by_id[args.scenario], cfg, ckpt, _load_db(args, cfg))
    dump_stages(output, _out(args))


def build_parser() -> argparse.ArgumentParser:
    def global_flags(default):
        # flags are accepted before or after the subcommand; the subcommand
        # copy uses SUPPRESS so it never overwrites a value given up front
        p = argparse.ArgumentParser(add_help=False)
        p.add_argument("--seed", type=int, default=default)
        p.add_argument("--config", default=default, help="YAML or JSON pipeline config")
        p.add_argument("--out", default=default)
        p.add_argument("-v", "--verbose", action="store_true", default=default or False)
        return p

    common = global_flags(argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="staformer", parents=[global_flags(None)])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset directory")
    p.add_argument("--num", type=int, default=64)
    p.add_argument("--scenes", type=int, default=4)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-toy", parents=[common], help="train on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("infer", parents=[common], help="predict every scenario of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--affordances", default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("build-affordances", parents=[common], help="cluster samples into zones")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--zones", type=int, default=None)
    p.set_defaults(func=cmd_build_affordances)

    p = sub.add_parser("eval", parents=[common], help="top-5 mAP report")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--ttc-tol", type=float, default=0.25)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="run the ablation ladder")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--num-seeds", type=int, default=3)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-stages", parents=[common], help="write intermediate tensors of one scenario")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenario", type=int, default=0)
    p.add_argument("--affordances", default=None)
    p.set_defaults(func=cmd_dump_stages)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (StaformerError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
