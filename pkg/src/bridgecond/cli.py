"""``bridgecond`` command line: world generation, dataset build, staged training, editing, eval, gradcheck.

Exit codes: 0 success, 1 usage or input error, 2 partial external-scorer failure,
3 numeric failure (non-finite values, or a gradient check above tolerance).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import gradcheck
from .checkpoint import CheckpointError
from .comprehension import VocabSpec
from .config import RunConfig
from .datapipe import world
from .datapipe.imageio import read_ppm, write_ppm
from .datapipe.pipeline import PipelineConfig, read_manifest, run_pipeline
from .datapipe.scorer import ScorerAdapter
from .metrics import evaluate
from .model import EditModel
from .tensor import NumericError
from .training import EditDataset, model_from_checkpoint, train_stage

log = logging.getLogger("bridgecond")

EXIT_OK, EXIT_USAGE, EXIT_SCORER, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


SEED_HELP = "seed (default: $BRIDGECOND_SEED, else the config's seed)"


def _seed(args, cfg: RunConfig) -> int:
    """--seed, then BRIDGECOND_SEED, then the config file."""
    if args.seed is not None:
        return args.seed
    raw = os.environ.get("BRIDGECOND_SEED")
    if raw is None:
        return cfg.seed
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"BRIDGECOND_SEED must be an integer, got {raw!r}") from None


def _load_config(path) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


# --- commands ----------------------------------------------------------------

def cmd_gen_world(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    first = _seed(args, RunConfig())
    for seed in range(first, first + args.count):
        scene, img = world.gen_scene(seed)
        write_ppm(out / f"scene_{seed:05d}.ppm", img)
        (out / f"scene_{seed:05d}.json").write_text(json.dumps(scene.to_dict(), sort_keys=True) + "\n",
                                                    encoding="utf-8")
    print(f"wrote {args.count} scenes to {out}")
    return EXIT_OK


def cmd_build_dataset(args) -> int:
    cfg = _load_config(args.config)
    p = cfg.pipeline
    pcfg = PipelineConfig(seed=_seed(args, cfg), tau_conf=p.tau_conf,
                          tau_q=p.tau_q if args.tau_q is None else args.tau_q,
                          kernel_radius=p.kernel_radius, tasks=tuple(p.tasks.split(",")),
                          modes=tuple(p.modes.split(",")), scorer=args.scorer or p.scorer, workers=args.workers)
    _, stats = run_pipeline(args.scenes, pcfg, args.out)
    for line in stats.lines():
        print(line)
    if stats.unscored:
        print(f"warning: {stats.unscored} samples could not be scored", file=sys.stderr)
        return EXIT_SCORER
    return EXIT_OK


def _manifest_path(path) -> Path:
    path = Path(path)
    return path / "manifest.jsonl" if path.is_dir() else path


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.stage > 1 and not args.from_checkpoint:
        raise UsageError(f"stage {args.stage} requires --from-checkpoint with a stage {args.stage - 1} checkpoint")
    data = EditDataset.from_manifest(_manifest_path(args.data))
    if args.from_checkpoint:
        prior = ckpt_io.load(args.from_checkpoint)
        if prior.stage != args.stage - 1:
            raise UsageError(f"stage {args.stage} needs a stage {args.stage - 1} checkpoint, "
                             f"got stage {prior.stage}")
        model = model_from_checkpoint(prior, cfg.model if args.config else None)
    else:
        model = EditModel(cfg.model, VocabSpec.default(cfg.model.r))
    schedule = cfg.schedule(args.stage)
    if args.steps:
        schedule.steps = args.steps
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, trace = train_stage(model, args.stage, data, schedule, seed=_seed(args, cfg),
                              trace_path=out / f"stage{args.stage}_trace.csv")
    ckpt_io.save(out / f"stage{args.stage}.ckpt", ckpt)
    first, last = trace[0], trace[-1]
    print(f"stage {args.stage}: {len(trace)} steps, total loss {first.total:.5f} -> {last.total:.5f}")
    print(f"wrote {out / f'stage{args.stage}.ckpt'} and {out / f'stage{args.stage}_trace.csv'}")
    return EXIT_OK


def cmd_edit(args) -> int:
    ck = ckpt_io.load(args.checkpoint)
    if ck.stage < 3:
        print(f"warning: checkpoint is from stage {ck.stage}; edits come from a partially trained model",
              file=sys.stderr)
    model = model_from_checkpoint(ck)
    cfg = _load_config(args.config)
    lam = cfg.edit.lam if args.lam is None else args.lam
    steps = cfg.edit.steps if args.steps is None else args.steps
    seed = _seed(args, cfg)
    if args.manifest:
        rows = read_manifest(args.manifest)
        root = Path(args.manifest).parent
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for start in range(0, len(rows), args.batch):
            chunk = rows[start:start + args.batch]
            src = np.stack([read_ppm(root / r["src_path"]) for r in chunk])
            edited = model.edit(src, [r["instruction"] for r in chunk], lam, steps, seed + start)
            for r, img in zip(chunk, edited):
                write_ppm(out / f"{r['id']}.ppm", img)
        print(f"wrote {len(rows)} edited images to {out}")
        return EXIT_OK
    if not (args.image and args.instruction):
        raise UsageError("edit needs --image and --instruction, or --manifest")
    img = read_ppm(args.image)
    edited = model.edit(img, [args.instruction], lam, steps, seed)
    write_ppm(args.out, edited)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    scorer = ScorerAdapter.from_spec(args.scorer) if args.scorer != "none" else None
    try:
        report = evaluate(args.manifest, args.pred, scorer, args.workers)
    finally:
        if scorer is not None:
            scorer.close()
    report.write_csv(args.out)
    print(report.summary())
    print(f"rows: {len(report.rows)}  missing predictions: {report.missing}  "
          f"scorer failures: {report.scorer_failures}")
    if report.missing:
        print(f"error: {report.missing} predictions missing under {args.pred}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_SCORER if report.scorer_failures else EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run(args.module, _seed(args, RunConfig()))
    print(gradcheck.format_table(results))
    return EXIT_OK if all(r.ok for r in results) else EXIT_NUMERIC


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    ap = _Parser(prog="bridgecond", description="Two-stream conditioned image editing at desk scale.",
                 formatter_class=fmt)
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-world", help="render synthetic scenes", formatter_class=fmt)
    p.add_argument("--count", type=int, default=10, help="number of scenes")
    p.add_argument("--seed", type=int, default=None, help=SEED_HELP)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_world)

    p = sub.add_parser("build-dataset", help="run the edit-pair construction pipeline", formatter_class=fmt)
    p.add_argument("--scenes", type=int, default=100, help="number of source scenes")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--seed", type=int, default=None, help=SEED_HELP)
    p.add_argument("--tau-q", type=float, default=None, help="override pipeline.tau_q")
    p.add_argument("--scorer", default=None, help="mock or cmd:<command>; overrides pipeline.scorer")
    p.add_argument("--workers", type=int, default=1, help="scene worker threads")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", help="run one training stage", formatter_class=fmt)
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True, help="training stage")
    p.add_argument("--data", required=True, help="dataset directory or manifest.jsonl")
    p.add_argument("--from-checkpoint", default=None, help="previous stage checkpoint (stages 2-3)")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--out", required=True, help="output directory for checkpoint and trace")
    p.add_argument("--seed", type=int, default=None, help=SEED_HELP)
    p.add_argument("--steps", type=int, default=None, help="override the stage step count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("edit", help="edit an image with a trained checkpoint", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="stage 3 checkpoint")
    p.add_argument("--image", default=None, help="source image (PPM)")
    p.add_argument("--instruction", default=None, help="edit instruction")
    p.add_argument("--manifest", default=None, help="edit every row of a manifest instead; --out is a directory")
    p.add_argument("--config", default=None, help="key=value config file (edit.lambda, edit.steps, seed)")
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="image-condition weight (default: config edit.lambda)")
    p.add_argument("--steps", type=int, default=None, help="sampling steps (default: config edit.steps)")
    p.add_argument("--batch", type=int, default=16, help="images per sampling batch with --manifest")
    p.add_argument("--seed", type=int, default=None, help=SEED_HELP)
    p.add_argument("--out", required=True, help="output image, or directory with --manifest")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("eval", help="score predictions against a manifest", formatter_class=fmt)
    p.add_argument("--manifest", required=True, help="manifest.jsonl")
    p.add_argument("--pred", required=True, help="directory of <id>.ppm predictions")
    p.add_argument("--scorer", default="mock", help="mock, cmd:<command>, or none")
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--workers", type=int, default=1, help="row worker threads")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every block", formatter_class=fmt)
    p.add_argument("--module", default="all", choices=("all", *gradcheck.CHECKS), help="block to check")
    p.add_argument("--seed", type=int, default=None, help=SEED_HELP)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"bridgecond: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, CheckpointError, ValueError, OSError) as exc:
        print(f"bridgecond: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
