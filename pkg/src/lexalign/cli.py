"""``lexalign`` command line.

Every subcommand writes into ``--out`` (default ``$LEXALIGN_OUT`` or
``runs/<subcommand>``)::

    out/config.json       resolved configuration and seeds
    out/metrics.jsonl     per-step training metrics (training commands)
    out/checkpoints/      model checkpoints
    out/reports/          evaluation reports

Exit status is 0 on success, 1 for user errors (bad flags, configs or input
files) and 2 for anything unexpected.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import traceback
from pathlib import Path

import torch

from lexalign import __version__
from lexalign.config import build, derive_seed, parse_assignment, read_config_file, section
from lexalign.data.coco import build_grounded_corpus
from lexalign.data.corpus import CorpusManifest
from lexalign.data.synthetic import generate_synthetic_corpus
from lexalign.errors import ConfigError, LexAlignError
from lexalign.evaluate import DEFAULT_TEMPLATE, analyze_concordance, eval_bbox_classification, eval_retrieval
from lexalign.experiments import OBJECTIVE_ROWS, run_ablation_grid, run_stage2_finetune
from lexalign.model import load_checkpoint
from lexalign.train import fit

log = logging.getLogger("lexalign")
OUT_ENV = "LEXALIGN_OUT"


class UsageError(LexAlignError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, default=0, help="root seed; sub-seeds derive from it")
    p.add_argument("--out", type=Path, help=f"output directory (default ${OUT_ENV} or runs/<command>)")
    p.add_argument("-v", "--verbose", action="store_true")


def _data_args(p, name="--data", required=True, help="corpus directory"):
    p.add_argument(name, type=Path, required=required, help=help)
    p.add_argument("--image-root", type=Path, help="image directory when the corpus stores none")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lexalign", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synth", help="render a synthetic grounded corpus")
    _common(p)
    p.add_argument("--n-images", type=int, default=100)

    p = sub.add_parser("build-data", help="merge caption and instance annotation files")
    _common(p)
    p.add_argument("--captions", type=Path, required=True)
    p.add_argument("--instances", type=Path, required=True)
    p.add_argument("--plurals", action="store_true", help="also match plural forms of labels")
    p.add_argument("--min-box-area", type=float, default=1.0)

    p = sub.add_parser("train", help="train or fine-tune a model")
    _common(p)
    _data_args(p)
    p.add_argument("--init", type=Path, help="checkpoint to start from (default: fresh model)")
    p.add_argument("--teacher", type=Path, help="teacher checkpoint (default: frozen copy of the init)")

    for name, helptext in (("eval-retrieval", "image-text Recall@1"),
                           ("eval-bbox", "zero-shot box classification"),
                           ("analyze", "global/region concordance")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        _data_args(p)
        p.add_argument("--checkpoint", type=Path, required=True)
        if name == "eval-bbox":
            p.add_argument("--template", default=DEFAULT_TEMPLATE)
        if name == "analyze":
            p.add_argument("--bins", type=int, default=10)
            p.add_argument("--heatmap", action="store_true", help="also render a PNG (needs matplotlib)")

    p = sub.add_parser("ablate", help="train and evaluate one model per grid value")
    _common(p)
    _data_args(p)
    p.add_argument("--eval-data", type=Path, help="evaluation corpus (default: training corpus)")
    p.add_argument("--init", type=Path)
    p.add_argument("--axis", choices=("loss_mask", "unlocked_layers"), default="loss_mask")
    p.add_argument("--values", help="';'-separated grid values, e.g. 'GC;GC,LRC' or '3;6;9;12'")

    p = sub.add_parser("stage2", help="fine-tune a checkpoint with the lexeme-region loss")
    _common(p)
    _data_args(p)
    p.add_argument("--eval-data", type=Path)
    p.add_argument("--checkpoint", type=Path, required=True)
    return parser


def resolve_config(args) -> dict[str, object]:
    flat = read_config_file(args.config) if args.config else {}
    for item in args.overrides:
        key, value = parse_assignment(item)
        flat[key] = value
    return flat


def _load_corpus(path: Path, image_root: Path | None) -> CorpusManifest:
    return CorpusManifest.load(path, image_root=image_root)


def _train_cfg(flat, root_seed):
    return build(flat, "train", seed=derive_seed(root_seed, "train"))


def _snapshot(out: Path, args, flat, resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    argv = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}
    snap = {"version": __version__, "command": args.command, "root_seed": args.seed,
            "args": argv, "overrides": flat, "resolved": resolved}
    (out / "config.json").write_text(json.dumps(snap, indent=2, default=str) + "\n")


def _report(out: Path, name: str, payload: dict) -> None:
    reports = out / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    (reports / f"{name}.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(json.dumps(payload, indent=2))


def run(args) -> None:
    out = args.out or Path(os.environ.get(OUT_ENV) or Path("runs") / args.command)
    flat = resolve_config(args)
    cmd = args.command

    if cmd == "gen-synth":
        cfg = build(flat, "synth")
        seed = int(section(flat, "run").get("synth_seed", derive_seed(args.seed, "synth")))
        _snapshot(out, args, flat, {"synth": dataclasses.asdict(cfg), "synth_seed": seed})
        corpus = generate_synthetic_corpus(seed, args.n_images, cfg)
        corpus.save(out / "data")
        print(json.dumps(corpus.stats))
        return

    if cmd == "build-data":
        _snapshot(out, args, flat, {})
        corpus = build_grounded_corpus(args.captions, args.instances, args.plurals, args.min_box_area)
        corpus.save(out / "data")
        print(json.dumps(corpus.stats))
        return

    data = _load_corpus(args.data, args.image_root)

    if cmd == "train":
        tcfg = _train_cfg(flat, args.seed)
        mcfg = build(flat, "model", vocab_size=len(data.vocab)) if args.init is None else None
        _snapshot(out, args, flat, {"train": dataclasses.asdict(tcfg),
                                    "model": dataclasses.asdict(mcfg) if mcfg else None})
        res = fit(data, tcfg, init=args.init, model_cfg=mcfg, teacher=args.teacher, out_dir=out)
        final = res.metrics[-1] if res.metrics else {}
        print(json.dumps({"checkpoint": str(res.checkpoint), "steps": len(res.metrics), **final}))
        return

    if cmd in ("eval-retrieval", "eval-bbox", "analyze"):
        _snapshot(out, args, flat, {})
        model, _ = load_checkpoint(args.checkpoint)
        if cmd == "eval-retrieval":
            _report(out, "retrieval", eval_retrieval(model, data).to_json())
        elif cmd == "eval-bbox":
            _report(out, "bbox", eval_bbox_classification(model, data, prompt_template=args.template).to_json())
        else:
            rep = analyze_concordance(model, data, bins=args.bins)
            rep.write(out / "reports", heatmap=args.heatmap)
            print(json.dumps({"pearson_r": rep.pearson_r, "mean_region_image": rep.mean_region_image,
                              "mean_region_text": rep.mean_region_text}))
        return

    eval_data = _load_corpus(args.eval_data, args.image_root) if args.eval_data else data
    tcfg = _train_cfg(flat, args.seed)

    if cmd == "ablate":
        if args.values:
            values = [v for v in args.values.split(";") if v.strip()]
        elif args.axis == "loss_mask":
            values = [",".join(m) for m in OBJECTIVE_ROWS]
        else:
            raise ConfigError("--values is required for the unlocked_layers axis")
        mcfg = build(flat, "model", vocab_size=len(data.vocab)) if args.init is None else None
        _snapshot(out, args, flat, {"train": dataclasses.asdict(tcfg), "grid": {args.axis: values},
                                    "model": dataclasses.asdict(mcfg) if mcfg else None})
        table = run_ablation_grid(tcfg, {args.axis: values}, data, eval_data, init=args.init,
                                  model_cfg=mcfg, out_dir=out / "reports")
        print(table.summary(), end="")
        return

    if cmd == "stage2":
        if "train.loss_mask" not in flat:
            tcfg = dataclasses.replace(tcfg, loss_mask=("GC", "LRC"))
        _snapshot(out, args, flat, {"train": dataclasses.asdict(tcfg)})
        _, report = run_stage2_finetune(args.checkpoint, tcfg, data, eval_data, out_dir=out)
        print(json.dumps(report.to_json(), indent=2))
        return

    raise UsageError(f"unknown command {cmd!r}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"lexalign: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))
    try:
        run(args)
    except (LexAlignError, ValueError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"lexalign: error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
