"""Command-line entry point: generate, train, eval, segment, inspect-checkpoint.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(missing or malformed files), 3 numeric error (non-finite values).
Log verbosity comes from the GROUPVIT_LOG_LEVEL environment variable.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import config as cfgmod
from . import synthetic, tensorfile
from .config import ConfigError, RunConfig
from .objectives import PromptSet
from .pipeline import build_class_table, evaluate, segment_images
from .text import DEFAULT_TEMPLATES, Vocabulary, load_lines, load_templates
from .train import Trainer, TrainResources, load_model
from .zeroshot import compose_assignments, rasterize

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CONFIG_NAME = "config.cfg"
LOG_ENV = "GROUPVIT_LOG_LEVEL"

log = logging.getLogger("groupvit")

# distinct, saturated colors for group maps; cycled when there are more groups
PALETTE = np.array(
    [
        (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
        (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
        (0, 128, 128), (220, 190, 255), (170, 110, 40), (255, 250, 200), (128, 0, 0), (0, 0, 128),
    ],
    dtype=np.uint8,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="groupvit", description="Desk-scale grouping vision transformer.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", help="run config file (key = value); defaults to the desk preset")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="output file or directory")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True, help="checkpoint file")

    g = sub.add_parser("generate", help="write a synthetic split")
    common(g)
    g.add_argument("--n", type=int, default=512, help="number of samples")
    g.add_argument("--split", choices=("train", "val", "test"), default="train")

    t = sub.add_parser("train", help="train a model on a split directory")
    common(t)
    t.add_argument("--data", required=True, help="training split directory")
    t.add_argument("--checkpoint", help="resume from this checkpoint")
    t.add_argument("--mode", choices=("soft", "hard"))
    t.add_argument("--stages", type=int, help="keep only the first N grouping stages")
    t.add_argument("--epochs", type=int)
    t.add_argument("--no-multilabel", action="store_true", help="train with the image-caption loss only")

    e = sub.add_parser("eval", help="zero-shot segmentation scores on a split")
    common(e, checkpoint=True)
    e.add_argument("--data", required=True, help="split directory with masks")
    e.add_argument("--threshold", type=float)
    e.add_argument("--baseline-trials", type=int, default=100)

    s = sub.add_parser("segment", help="segment one image and write mask and group maps")
    common(s, checkpoint=True)
    s.add_argument("--image", required=True, help="binary PPM image")
    s.add_argument("--threshold", type=float)
    s.add_argument("--classes", help="class list file, background first (default: synthetic classes)")

    i = sub.add_parser("inspect-checkpoint", help="print checkpoint contents")
    i.add_argument("--checkpoint", required=True)
    return p


# ---------------------------------------------------------------- helpers


def with_stages(cfg: RunConfig, n: int) -> RunConfig:
    """Keep the first ``n`` stages; the last kept stage still emits the original final group count."""
    stages = cfg.model.stages
    if not 1 <= n <= len(stages):
        raise ConfigError("stages", f"must be between 1 and {len(stages)}, got {n}")
    if n == len(stages):
        return cfg
    kept = list(stages[:n])
    final = stages[-1].output_tokens
    if kept[-1].output_tokens != final:
        kept[-1] = dataclasses.replace(kept[-1], num_output_tokens=final)
    return cfg.replace(stages=tuple(kept))


def load_config(args, checkpoint: str | None = None) -> RunConfig:
    path = args.config
    if path is None and checkpoint:
        beside = Path(checkpoint).parent / CONFIG_NAME
        path = str(beside) if beside.exists() else None
    cfg = cfgmod.load(path, base=cfgmod.desk_preset()) if path else cfgmod.desk_preset()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def data_resources(data_dir: Path | None, cfg: RunConfig):
    """Vocabulary, templates, and noun lexicon: files in the split directory win over defaults."""
    vocab = synthetic.vocabulary()
    templates = list(DEFAULT_TEMPLATES)
    lexicon = list(synthetic.SHAPES)
    if data_dir is not None:
        if (data_dir / "vocab.txt").exists():
            vocab = Vocabulary.load(data_dir / "vocab.txt")
        if (data_dir / "templates.txt").exists():
            templates = load_templates(data_dir / "templates.txt")
        if (data_dir / "lexicon.txt").exists():
            lexicon = load_lines(data_dir / "lexicon.txt")
    if cfg.templates_path:
        templates = load_templates(cfg.templates_path)
    if cfg.lexicon_path:
        lexicon = load_lines(cfg.lexicon_path)
    return vocab, tuple(templates), frozenset(lexicon)


def class_names_for(cfg: RunConfig, data_dir: Path | None, override: str | None = None) -> list[str]:
    for candidate in (override, cfg.class_list_path, data_dir and data_dir / "classes.txt"):
        if candidate and Path(candidate).exists():
            return load_lines(candidate)
        if candidate and override == candidate:
            raise FileNotFoundError(candidate)
    return list(synthetic.CLASS_NAMES)


def colorize(indices: np.ndarray) -> np.ndarray:
    return PALETTE[np.asarray(indices) % len(PALETTE)]


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    if not args.out:
        raise UsageError("--out is required")
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    seed = 0 if args.seed is None else args.seed
    out = synthetic.generate_split(args.out, args.n, seed, args.split)
    print(f"wrote {args.n} {args.split} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    if not args.out:
        raise UsageError("--out is required")
    cfg = load_config(args)
    changes = {}
    if args.mode:
        changes["mode"] = args.mode
    if args.epochs is not None:
        changes["epochs"] = args.epochs
    if args.no_multilabel:
        changes["multilabel"] = False
    cfg = cfg.replace(**changes) if changes else cfg
    if args.stages is not None:
        cfg = with_stages(cfg, args.stages)
    data_dir = Path(args.data)
    data = synthetic.load_split(data_dir)
    vocab, templates, lexicon = data_resources(data_dir, cfg)
    trainer = Trainer(cfg, data, TrainResources(vocab, PromptSet(templates, lexicon, cfg.k_nouns), templates))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.save(out / CONFIG_NAME, cfg)
    if args.checkpoint:
        trainer.load_checkpoint(args.checkpoint)
        log.info("resumed from %s at step %d", args.checkpoint, trainer.step)
    trainer.run(log_path=out / "metrics.jsonl", checkpoint_dir=out)
    print(f"trained to step {trainer.step}; checkpoint {out / 'last.ckpt'}")
    return EXIT_OK


def _model_and_threshold(args):
    cfg = load_config(args, args.checkpoint)
    model = load_model(args.checkpoint, cfg)
    threshold = cfg.threshold if args.threshold is None else args.threshold
    tau = cfg.label_temperature or None
    return cfg, model, threshold, tau


def cmd_eval(args) -> int:
    cfg, model, threshold, tau = _model_and_threshold(args)
    data_dir = Path(args.data)
    data = synthetic.load_split(data_dir)
    vocab, templates, _ = data_resources(data_dir, cfg)
    names = class_names_for(cfg, data_dir)
    report = evaluate(model, data, names, templates, vocab, threshold, tau, baseline_trials=args.baseline_trials)
    text = "\n".join(report.lines()) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


def cmd_segment(args) -> int:
    if not args.out:
        raise UsageError("--out is required")
    cfg, model, threshold, tau = _model_and_threshold(args)
    image = synthetic.read_ppm(args.image).astype(np.float64) / 255.0
    vocab, templates, _ = data_resources(None, cfg)
    names = class_names_for(cfg, None, args.classes)
    table = build_class_table(model, names[1:], templates, vocab)
    seg = segment_images(model, image[None], table, threshold, tau)[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    synthetic.write_pgm(out / "mask.pgm", seg.result.labels.astype(np.uint8))
    synthetic.write_ppm(out / "mask.ppm", colorize(seg.result.labels))
    h, w = seg.result.labels.shape
    # one map per stage: the assignments composed up to that stage
    grid = seg.composed.patch_grid
    for i in range(len(seg.stage_assignments)):
        partial = compose_assignments(seg.stage_assignments[: i + 1], grid)
        groups = rasterize(partial, np.arange(partial.num_groups), (h, w)).group_map
        synthetic.write_ppm(out / f"groups_stage{i + 1}.ppm", colorize(groups))
    present = sorted({int(v) for v in np.unique(seg.result.labels)})
    print("labels: " + ", ".join(f"{v}={names[v]}" for v in present))
    return EXIT_OK


def cmd_inspect(args) -> int:
    state = tensorfile.load(args.checkpoint)
    params = {k: v for k, v in state.items() if k.startswith("param/")}
    meta = {k: v for k, v in state.items() if k.startswith("meta/")}
    for k, v in meta.items():
        print(f"{k}\t{int(v) if float(v).is_integer() else float(v)}")
    if "param/logit_scale" in state:
        print(f"tau\t{float(np.exp(-state['param/logit_scale'])):.6g}")
    print(f"parameters\t{sum(v.size for v in params.values())}")
    for k, v in params.items():
        print(f"{k[len('param/'):]}\t{'x'.join(map(str, v.shape)) or 'scalar'}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "segment": cmd_segment,
    "inspect-checkpoint": cmd_inspect,
}


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get(LOG_ENV, "WARNING").upper(), format="%(asctime)s %(name)s %(levelname)s %(message)s"
    )
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"groupvit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ag.NumericError, FloatingPointError) as exc:
        print(f"groupvit: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, KeyError, ValueError) as exc:
        print(f"groupvit: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
