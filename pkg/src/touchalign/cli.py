"""Command line entry points.

Subcommands:
  gen-data            synthesize a dataset to disk
  train               fit an encoder; writes checkpoint + metrics.ndjson
  eval zero-shot      prompt-based classification on a frozen checkpoint
  eval grasp          stable-vs-slip prediction from grasp phrases
  eval probe          linear probe on frozen embeddings
  eval retrieval      touch-to-anchor mAP
  ablate              flag/sigma grid over seeds; report JSON + CSV + SVG
  export-embeddings   dump touch + paired vision-anchor rows for a split
  prototypes          per-sensor mean-color prototypes

Machine-readable JSON goes to stdout, logs to stderr. Exit codes: 0 on
success, 1 on usage errors, 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .anchor import EmbeddingTable, write_embedding_table
from .datagen import Dataset, WorldConfig, generate_and_write, read_dataset
from .encoder import compute_prototypes
from .evalsuite import (
    DEFAULT_ZERO_SHOT_TEMPLATE,
    embed_split,
    eval_grasp,
    eval_probe,
    eval_retrieval,
    eval_zero_shot,
    plot_sigma_sweep,
    report_to_csv,
    run_ablation_grid,
)
from .tensorio import dump_json, load_json
from .trainer import Checkpoint, TrainConfig, fit, load_checkpoint

log = logging.getLogger("touchalign.cli")


class UsageError(Exception):
    """Bad invocation or bad flag combination; exits with status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # noqa: D102 - argparse hook
        raise UsageError(message)


def _emit(payload: dict[str, Any]) -> None:
    sys.stdout.write(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def export_embeddings(
    ckpt: Checkpoint, dataset: Dataset, out_dir: str | Path, split: str = "test"
) -> dict[str, Any]:
    """Write an embedding table of touch rows plus their vision-anchor pairs."""
    from .anchor import build_anchor, vision_embeddings

    se = embed_split(ckpt, dataset, split)
    space = build_anchor(ckpt.anchor_config)
    vision = vision_embeddings(space, se.material, se.freq, se.depth, se.centers, se.grasp)
    n = se.embeddings.shape[0]
    keys = [f"{split}/{i:06d}" for i in range(n)]
    table = EmbeddingTable(
        keys=keys + keys,
        modalities=["touch"] * n + ["vision"] * n,
        embeddings=np.concatenate([se.embeddings, vision.astype(np.float32)]),
    )
    write_embedding_table(table, out_dir)
    dump_json(
        Path(out_dir) / "labels.json",
        {
            "split": split,
            "material": se.material.tolist(),
            "grasp": se.grasp.tolist(),
            "object_id": se.object_id.tolist(),
            "resolved_sensor": se.resolved_sensor.tolist(),
        },
    )
    return {"out": str(out_dir), "split": split, "rows": 2 * n, "c": table.c}


# ---------------------------------------------------------------------------
# Handlers

def _load_train_config(args) -> TrainConfig:
    if args.config:
        cfg = TrainConfig.from_dict(load_json(args.config))
    else:
        cfg = TrainConfig()
    import dataclasses

    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "sigma", None) is not None:
        cfg = dataclasses.replace(cfg, sigma=args.sigma)
    return cfg


def _cmd_gen_data(args) -> int:
    cfg = WorldConfig.from_dict(load_json(args.config)) if args.config else WorldConfig()
    log.info("generating dataset m=%d k=%d pairs/sensor=%d", cfg.m, cfg.k, cfg.pairs_per_sensor)
    dataset = generate_and_write(cfg, args.seed, args.out)
    counts = {name: int(sum((p.split_indices(name)).size for p in dataset.parts))
              for name in ("train", "val", "test")}
    _emit({"out": args.out, "m": dataset.m, "k": dataset.k,
           "n_samples": sum(p.touch.shape[0] for p in dataset.parts), "splits": counts})
    return 0


def _cmd_train(args) -> int:
    dataset = read_dataset(args.data)
    cfg = _load_train_config(args)
    log.info("training: epochs=%d batch=%d sigma=%.2f seed=%d",
             cfg.epochs, cfg.batch_size, cfg.sigma, cfg.seed)
    ckpt = fit(dataset, cfg, out_dir=args.out, resume=args.resume)
    final = ckpt.metrics[-1] if ckpt.metrics else {}
    _emit({"out": args.out, "step": ckpt.step, "epoch": ckpt.epoch, "final": final})
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    dataset = read_dataset(args.data)
    if args.task == "zero-shot":
        payload = eval_zero_shot(ckpt, dataset, args.split, args.template)
    elif args.task == "grasp":
        payload = eval_grasp(ckpt, dataset, args.split)
    elif args.task == "probe":
        payload = eval_probe(ckpt, dataset, args.split)
    elif args.task == "retrieval":
        payload = eval_retrieval(ckpt, dataset, args.modality, args.split)
    else:  # pragma: no cover - argparse restricts choices
        raise UsageError(f"unknown eval task {args.task!r}")
    if args.out:
        dump_json(args.out, payload)
    _emit(payload)
    return 0


def _cmd_ablate(args) -> int:
    dataset = read_dataset(args.data)
    cfg = _load_train_config(args)
    seeds = tuple(range(args.seed, args.seed + 3))
    log.info("ablation grid: seeds=%s jobs=%d", seeds, args.jobs)
    report = run_ablation_grid(
        dataset, cfg, seeds=seeds, jobs=args.jobs, dataset_dir=args.data,
        template=args.template,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(out / "report.json", report)
    (out / "report.csv").write_text(report_to_csv(report))
    plot_sigma_sweep(report, out / "sigma_sweep.svg")
    _emit(report)
    return 0


def _cmd_export(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    dataset = read_dataset(args.data)
    _emit(export_embeddings(ckpt, dataset, args.out, args.split))
    return 0


def _cmd_prototypes(args) -> int:
    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
        protos = ckpt.prototypes
        source = "checkpoint"
    elif args.data:
        dataset = read_dataset(args.data)
        protos = compute_prototypes(dataset, "train")
        source = "dataset"
    else:
        raise UsageError("prototypes requires --data or --ckpt")
    payload = {"prototypes": [[float(x) for x in row] for row in protos], "source": source}
    if args.out:
        dump_json(args.out, payload)
    _emit(payload)
    return 0


# ---------------------------------------------------------------------------
# Parser wiring

def build_parser() -> _Parser:
    parser = _Parser(prog="touchalign", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="synthesize a dataset")
    p.add_argument("--config", help="world config JSON (defaults when omitted)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=_cmd_gen_data)

    p = sub.add_parser("train", help="fit an encoder")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint output directory")
    p.add_argument("--config", help="train config JSON (defaults when omitted)")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--sigma", type=float, default=None, help="override majority fraction")
    p.add_argument("--resume", action="store_true", help="resume from a mid checkpoint in --out")
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a frozen checkpoint")
    p.add_argument("task", choices=["zero-shot", "grasp", "probe", "retrieval"])
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--template", default=DEFAULT_ZERO_SHOT_TEMPLATE)
    p.add_argument("--modality", default="vision", choices=["vision", "audio", "text"])
    p.add_argument("--out", help="also write the metrics JSON to this file")
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("ablate", help="run the flag/sigma ablation grid")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--config", help="train config JSON (defaults when omitted)")
    p.add_argument("--seed", type=int, default=0, help="first of three consecutive seeds")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--template", default=DEFAULT_ZERO_SHOT_TEMPLATE)
    p.set_defaults(handler=_cmd_ablate)

    p = sub.add_parser("export-embeddings", help="write an embedding table")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.set_defaults(handler=_cmd_export)

    p = sub.add_parser("prototypes", help="per-sensor mean-color prototypes")
    p.add_argument("--data", help="dataset directory (compute from train split)")
    p.add_argument("--ckpt", help="checkpoint directory (use stored prototypes)")
    p.add_argument("--out", help="also write JSON to this file")
    p.set_defaults(handler=_cmd_prototypes)

    return parser


def dispatch(argv: Sequence[str]) -> int:
    """Parse argv and run one subcommand; never raises, returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help path
        return 0 if exc.code in (0, None) else 1
    if not getattr(args, "handler", None):
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.error("%s: %s", type(exc).__name__, exc)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
