"""Command-line front end: train, eval, ablate, bench, selftest, dump-scenes."""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

from . import __version__

log = logging.getLogger("roiattn")

EXIT_OK = 0
EXIT_FAILED = 1  # the action ran but did not succeed (e.g. a failing self-test)
EXIT_USAGE = 2  # bad flag, malformed config
EXIT_NO_CHECKPOINT = 3
EXIT_BAD_CHECKPOINT = 4

CHECKPOINT_NAME = "checkpoint.ratn"
METRICS_NAME = "metrics.csv"
CONFIG_NAME = "config.cfg"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser, skip=()) -> None:
    from .pipeline import CONFIG_FIELDS, DetectionConfig

    defaults = DetectionConfig()
    p.add_argument("--config", type=Path, default=None, help="flat 'key = value' config file; built-in defaults when omitted")
    g = p.add_argument_group("config overrides (take precedence over --config)")
    for name in CONFIG_FIELDS:
        if name in skip:
            continue
        v = getattr(defaults, name)
        shown = ",".join(map(str, v)) if isinstance(v, tuple) else str(v).lower() if isinstance(v, bool) else v
        g.add_argument(_flag(name), dest=f"cfg_{name}", metavar="V", default=argparse.SUPPRESS,
                       help=f"(default: {shown})")


def _build_config(args):
    from .pipeline import ConfigError, DetectionConfig, coerce_config_value, parse_config_text

    values = {}
    if args.config is not None:
        try:
            text = args.config.read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc.strerror}") from None
        try:
            values.update(parse_config_text(text))
        except ConfigError as exc:
            raise UsageError(f"{args.config}: {exc}") from None
    for key, raw in vars(args).items():
        if key.startswith("cfg_"):
            name = key[4:]
            try:
                values[name] = coerce_config_value(name, raw)
            except (ValueError, ConfigError) as exc:
                raise UsageError(f"{_flag(name)} {raw!r}: {exc}") from None
    try:
        return DetectionConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    from .data import dump_scenes
    from .pipeline import format_config, scene_seeds, train, write_outputs

    cfg = _build_config(args)
    log.info("config:\n%s", format_config(cfg).rstrip())
    if args.dump_scenes is not None:
        paths = dump_scenes(args.dump_scenes, scene_seeds(cfg, "train"))
        log.info("wrote %d training scenes to %s", len(paths), args.dump_scenes)
    result = train(cfg)
    metrics, ckpt = write_outputs(result, args.out)
    log.info("wrote %s and %s", metrics, ckpt)
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import checkpoint
    from .data import generate_scene
    from .pipeline import Detector, evaluate, scene_seeds

    if not args.checkpoint.is_file():
        log.error("checkpoint not found: %s", args.checkpoint)
        return EXIT_NO_CHECKPOINT
    sidecar = args.checkpoint.parent / CONFIG_NAME
    if args.config is None and sidecar.is_file():
        args.config = sidecar
    cfg = _build_config(args)
    try:
        state = checkpoint.load(args.checkpoint)
        model = Detector(cfg)
        model.load_state_dict(state)
    except checkpoint.CheckpointError as exc:
        log.error("%s: %s", args.checkpoint, exc)
        return EXIT_BAD_CHECKPOINT
    split = cfg.replace(seed=args.seed, val_scenes=args.scenes)
    scenes = [generate_scene(s) for s in scene_seeds(split, "val")]
    table = evaluate(model, scenes)
    print("scenes,seed,AP,AP50,AP75")
    print(f"{args.scenes},{args.seed},{table.AP:.6f},{table.AP50:.6f},{table.AP75:.6f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .pipeline import format_ablation_csv, format_ablation_markdown, run_ablation, run_variant_ablation

    cfg = _build_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_ablation(cfg, progress=log.info)
    (out / "ablation.csv").write_text(format_ablation_csv(rows), encoding="utf-8")
    (out / "ablation.md").write_text(format_ablation_markdown(rows), encoding="utf-8")
    log.info("wrote %s", out / "ablation.csv")
    if args.variants:
        seeds = tuple(int(s) for s in args.seeds.split(",") if s)
        report = run_variant_ablation(cfg, seeds=seeds, progress=log.info)
        (out / "variants.csv").write_text(report.text(), encoding="utf-8")
        for inv in report.inversions:
            log.warning("ordering inversion: %s", inv)
        log.info("wrote %s", out / "variants.csv")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .attention import bench_attention, format_bench, growth_ratios

    if args.smin < 1 or args.smax < args.smin:
        raise UsageError(f"need 1 <= --smin <= --smax, got {args.smin}, {args.smax}")
    s_values, s = [], args.smin
    while s <= args.smax:
        s_values.append(s)
        s *= 2
    rows = bench_attention(s_values, L=args.L, d=args.d, repeats=args.repeats, seed=args.seed)
    text = format_bench(rows)
    sys.stdout.write(text)
    if args.out is not None:
        args.out.write_text(text, encoding="utf-8")
    for variant in ("external", "dense"):
        for lo, hi, ratio in growth_ratios(rows, variant):
            log.info("%s: s %d -> %d grows %.2fx", variant, lo, hi, ratio)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import SUITES

    names = list(SUITES) if not args.only else args.only.split(",")
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise UsageError(f"unknown suite(s) {unknown}; choose from {list(SUITES)}")
    ok = True
    for name in names:
        r = SUITES[name]()
        print(r.row(), flush=True)
        ok &= r.passed
    print("all suites passed" if ok else "SOME SUITES FAILED")
    return EXIT_OK if ok else EXIT_FAILED


def cmd_dump_scenes(args) -> int:
    from .data import dump_scenes

    paths = dump_scenes(args.directory, range(args.seed, args.seed + args.count))
    log.info("wrote %d scenes to %s", len(paths), args.directory)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="roiattn", description=__doc__, formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more diagnostics on stderr")
    p.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors on stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND", parser_class=_Parser)

    t = sub.add_parser("train", help="train a detector and write metrics and checkpoint", formatter_class=fmt)
    _add_config_flags(t)
    t.add_argument("--out", type=Path, default=Path("runs/train"), help="output directory")
    t.add_argument("--dump-scenes", type=Path, default=None, metavar="DIR", help="also write the training scenes as PPM")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on freshly generated scenes", formatter_class=fmt)
    e.add_argument("--checkpoint", type=Path, required=True, help=f"checkpoint file ({CONFIG_NAME} beside it is used if present)")
    e.add_argument("--scenes", type=int, default=128, help="number of evaluation scenes")
    e.add_argument("--seed", type=int, default=0, help="scene seed")
    # --seed here picks evaluation scenes; the model config comes from the checkpoint sidecar or --config
    _add_config_flags(e, skip=("seed",))
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="d x depth grid; optionally the head-variant study", formatter_class=fmt)
    _add_config_flags(a)
    a.add_argument("--out", type=Path, default=Path("runs/ablate"), help="output directory")
    a.add_argument("--variants", action="store_true", help="also run the head-variant ablation")
    a.add_argument("--seeds", default="0,1,2", help="seeds for the head-variant ablation")
    a.set_defaults(func=cmd_ablate)

    b = sub.add_parser("bench", help="time external vs dense attention, doubling s", formatter_class=fmt)
    b.add_argument("--smin", type=int, default=512, help="smallest RoI count")
    b.add_argument("--smax", type=int, default=2048, help="largest RoI count")
    b.add_argument("--L", type=int, default=256, help="flattened RoI length")
    b.add_argument("--d", type=int, default=10, help="memory size")
    b.add_argument("--repeats", type=int, default=7, help="timed repeats per point (median reported)")
    b.add_argument("--seed", type=int, default=0, help="input seed")
    b.add_argument("--out", type=Path, default=None, help="also write the CSV here")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("selftest", help="run oracle and invariant suites", formatter_class=fmt)
    s.add_argument("--only", default="", help="comma-separated suite names (default: all)")
    s.set_defaults(func=cmd_selftest)

    d = sub.add_parser("dump-scenes", help="write synthetic scenes as PPM plus annotation sidecars", formatter_class=fmt)
    d.add_argument("directory", type=Path, help="output directory")
    d.add_argument("--count", type=int, default=16, help="number of scenes")
    d.add_argument("--seed", type=int, default=0, help="first scene seed")
    d.set_defaults(func=cmd_dump_scenes)
    return p


def _thread_limit():
    raw = os.environ.get("ROIATTN_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"ROIATTN_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError(f"ROIATTN_THREADS must be >= 0, got {n}")
    if n == 0:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.quiet else logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(message)s", force=True)
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except KeyboardInterrupt:
        log.error("interrupted")
        return 130


if __name__ == "__main__":
    sys.exit(main())
