"""Command-line interface covering the full workflow.

Exit codes: 0 on success, 1 on usage errors, 2 on data/contract errors.
Progress goes to stderr; machine-readable results go to stdout or files.
Worker threads only parallelize data loading; results are independent of
the thread count.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


def _default_threads() -> int:
    return os.cpu_count() or 1

from .errors import DpnetError
from .feature_store import load_manifest, read_feature_map
from .interpret import (
    DPC_MODE_LITERAL,
    DPC_MODE_LOG1P,
    PartStats,
    compute_stats,
    explain,
    top_regions_for_part,
    write_heat_pgm,
)
from .part_model import load_checkpoint, save_checkpoint
from .synth import SynthSpec, generate
from .trainer import TrainConfig, evaluate, train, write_metrics_csv


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures routed to exit code 1."""

    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="dpnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", default="default", help="'default' or a JSON spec file")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train a part model")
    p.add_argument("--config", default=None, help="JSON training config")
    p.add_argument("--train", required=True, dest="train_manifest", help="training manifest")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", default=None, help="metrics CSV path (default: <out>.metrics.csv)")
    p.add_argument("--threads", type=int, default=_default_threads(),
                   help="worker threads for data loading (default: all cores)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True, dest="test_manifest")
    p.add_argument("--per-class", default=None, help="write per-class accuracy CSV here")
    p.add_argument("--threads", type=int, default=_default_threads())

    p = sub.add_parser("stats", help="part frequency and discriminative power")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train", required=True, dest="train_manifest")
    p.add_argument("--out", required=True, help="stats JSON path")
    p.add_argument("--top-k", type=int, default=None, help="parts per class counted as 'most activated'")
    p.add_argument("--dpc-mode", choices=[DPC_MODE_LOG1P, DPC_MODE_LITERAL], default=DPC_MODE_LOG1P)
    p.add_argument("--threads", type=int, default=_default_threads())

    p = sub.add_parser("top-parts", help="most discriminative parts of a class")
    p.add_argument("--stats", required=True)
    p.add_argument("--class", required=True, type=int, dest="class_index")
    p.add_argument("--n", type=int, default=3)

    p = sub.add_parser("top-regions", help="highest scoring regions of a part")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train", required=True, dest="train_manifest")
    p.add_argument("--part", required=True, type=int)
    p.add_argument("--k", type=int, default=10)

    p = sub.add_parser("explain", help="heatmap explanation for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--image", required=True, help="feature file path, or an id with --manifest")
    p.add_argument("--manifest", default=None, help="manifest used to resolve --image ids")
    p.add_argument("--class", required=True, type=int, dest="class_index")
    p.add_argument("--N", type=int, default=3, help="parts to use")
    p.add_argument("--M", type=int, default=10, help="regions per part")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr)


def _config_from_trailer(trailer: dict) -> TrainConfig:
    cfg = trailer.get("config")
    if not isinstance(cfg, dict):
        raise DpnetError("checkpoint trailer carries no training config")
    return TrainConfig.from_dict(cfg)


def _cmd_synth(args) -> int:
    if args.spec == "default":
        spec = SynthSpec()
    else:
        try:
            with open(args.spec, "r", encoding="utf-8") as f:
                spec = SynthSpec.from_dict(json.load(f))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise DpnetError(f"bad synth spec '{args.spec}': {exc}") from exc
    if args.seed is not None:
        spec = SynthSpec.from_dict({**spec.__dict__, "seed": args.seed})
    paths = generate(spec, args.out)
    _progress(f"wrote {paths['train']} and {paths['test']}")
    print(f"train_manifest={paths['train']}")
    print(f"test_manifest={paths['test']}")
    return 0


def _cmd_train(args) -> int:
    cfg = TrainConfig.from_json_file(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        d = cfg.to_dict()
        d["seed"] = args.seed
        cfg = TrainConfig.from_dict(d)
    manifest = load_manifest(args.train_manifest)

    def trailer_for(epochs_trained: int, model) -> dict:
        return {
            "class_names": manifest.class_names,
            "config": cfg.to_dict(),
            "metadata": {
                "train_images": len(manifest),
                "descriptor_dim": model.descriptor_dim,
                "epochs_trained": epochs_trained,
            },
        }

    def periodic(epoch: int, model) -> None:
        if epoch + 1 < cfg.epochs:  # final epoch is covered by the main write
            path = f"{args.out}.epoch{epoch + 1:03d}"
            save_checkpoint(model, path, trailer_for(epoch + 1, model))
            _progress(f"intermediate checkpoint written to {path}")

    model, metrics = train(
        manifest, cfg, threads=args.threads, progress=_progress,
        checkpoint_callback=periodic,
    )
    save_checkpoint(model, args.out, trailer_for(cfg.epochs, model))
    metrics_path = args.metrics or args.out + ".metrics.csv"
    write_metrics_csv(metrics, metrics_path)
    _progress(f"checkpoint written to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    model, trailer = load_checkpoint(args.checkpoint)
    cfg = _config_from_trailer(trailer)
    manifest = load_manifest(args.test_manifest)
    result = evaluate(model, manifest, cfg, threads=args.threads)
    print(f"accuracy={result.accuracy!r}")
    if args.per_class:
        names = trailer.get("class_names") or manifest.class_names
        with open(args.per_class, "w", encoding="utf-8", newline="") as f:
            f.write("class,class_name,correct,total,accuracy\n")
            acc = result.per_class_accuracy()
            for c in range(model.num_classes):
                name = names[c] if c < len(names) else ""
                f.write(
                    f"{c},{name},{int(result.per_class_correct[c])},"
                    f"{int(result.per_class_total[c])},{float(acc[c])!r}\n"
                )
    return 0


def _cmd_stats(args) -> int:
    model, trailer = load_checkpoint(args.checkpoint)
    cfg = _config_from_trailer(trailer)
    manifest = load_manifest(args.train_manifest)
    stats = compute_stats(
        model, manifest, cfg, top_k_per_class=args.top_k, mode=args.dpc_mode,
        threads=args.threads,
    )
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(stats.to_json())
        f.write("\n")
    _progress(f"stats written to {args.out}")
    return 0


def _cmd_top_parts(args) -> int:
    with open(args.stats, "r", encoding="utf-8") as f:
        stats = PartStats.from_json(f.read())
    if not 0 <= args.class_index < stats.dpc.shape[0]:
        raise DpnetError(f"class {args.class_index} out of range for stats file")
    row = stats.dpc[args.class_index]
    ranked = sorted(range(row.shape[0]), key=lambda p: (-row[p], p))
    print("rank,part,d")
    for rank, p in enumerate(ranked[: args.n]):
        print(f"{rank},{p},{float(row[p])!r}")
    return 0


def _cmd_top_regions(args) -> int:
    model, trailer = load_checkpoint(args.checkpoint)
    cfg = _config_from_trailer(trailer)
    manifest = load_manifest(args.train_manifest)
    rows = top_regions_for_part(model, manifest, cfg, args.part, args.k)
    print("rank,image_id,h0,w0,h1,w1,score")
    for rank, (image_id, region, score) in enumerate(rows):
        h0, w0, h1, w1 = region.as_tuple()
        print(f"{rank},{image_id},{h0},{w0},{h1},{w1},{score!r}")
    return 0


def _cmd_explain(args) -> int:
    model, trailer = load_checkpoint(args.checkpoint)
    cfg = _config_from_trailer(trailer)
    with open(args.stats, "r", encoding="utf-8") as f:
        stats = PartStats.from_json(f.read())
    if os.path.exists(args.image):
        fm = read_feature_map(args.image)
    elif args.manifest:
        manifest = load_manifest(args.manifest)
        matches = [e for e in manifest.entries if e.image_id == args.image]
        if not matches:
            raise DpnetError(f"image id '{args.image}' not found in {args.manifest}")
        fm = read_feature_map(matches[0].path)
    else:
        raise DpnetError(
            f"'{args.image}' is not a file; pass --manifest to resolve image ids"
        )
    expl = explain(model, stats, fm, args.class_index, args.N, args.M, cfg)
    os.makedirs(args.out, exist_ok=True)
    json_path = os.path.join(args.out, f"{fm.image_id}.json")
    pgm_path = os.path.join(args.out, f"{fm.image_id}.pgm")
    with open(json_path, "w", encoding="utf-8") as f:
        f.write(expl.to_json())
        f.write("\n")
    write_heat_pgm(expl, fm.image_px, pgm_path)
    _progress(f"explanation written to {json_path} and {pgm_path}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "stats": _cmd_stats,
    "top-parts": _cmd_top_parts,
    "top-regions": _cmd_top_regions,
    "explain": _cmd_explain,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except DpnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
