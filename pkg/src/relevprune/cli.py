"""Command-line entry point.

Stages read and write a shared ``--out-dir``; ``gen-data`` stores the
experiment config there and later stages pick it up unless ``--config`` is
given. Exit status: 0 success, 1 invalid input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import compressor as C
from . import explain as E
from . import flops as F
from . import pipeline as PL
from . import toylm as T

log = logging.getLogger("relevprune")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out-dir", type=Path, default=None, help="artifact directory (default: ./out)")
    p.add_argument("--config", type=Path, default=None, help="experiment config JSON")
    p.add_argument("--jobs", type=int, default=None, help="worker threads within a stage")
    return p


def _strategy_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--strategy", choices=[s.value for s in E.Strategy], default=None)
    p.add_argument("--clamp", choices=["on", "off"], default=None)


def build_parser() -> Parser:
    common = _common()
    parser = Parser(prog="relevprune", description="Relevance-guided visual token pruning on a toy LM.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    sub.add_parser("gen-data", parents=[common], help="write train/held-out grid-QA datasets")
    sub.add_parser("train-lm", parents=[common], help="train the toy LM")

    p = sub.add_parser("explain", parents=[common], help="relevance scores for held-out samples")
    _strategy_flags(p)
    p.add_argument("--heatmap-out", type=Path, default=None, help="CSV heatmap of one sample")
    p.add_argument("--sample", type=int, default=0, help="held-out index for the heatmap")

    p = sub.add_parser("build-pairs", parents=[common], help="(A0v, label) pairs for the compressor")
    _strategy_flags(p)

    p = sub.add_parser("train-compressor", parents=[common], help="fit the relevance compressor")
    _strategy_flags(p)

    p = sub.add_parser("eval", parents=[common], help="accuracy after pruning held-out prompts")
    p.add_argument("--method", choices=["vanilla", *PL.METHODS], required=True)
    p.add_argument("--ratio", type=float, default=1.0)
    _strategy_flags(p)

    p = sub.add_parser("flops", parents=[common], help="analytical FLOPs report")
    p.add_argument("--n", type=int, required=True, help="visual tokens")
    p.add_argument("--d", type=int, required=True, help="hidden size")
    p.add_argument("--m", type=int, required=True, help="FFN intermediate size")
    p.add_argument("--ffn-l", type=int, default=3, help="FFN matrices per layer")
    p.add_argument("--nl", type=int, default=1, help="LM layers")
    p.add_argument("--conv-channels", default=",".join(map(str, F.COMPRESSOR_CHANNELS)))
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--no-final-pointwise", action="store_true")
    p.add_argument("--stated-total", type=int, default=None, help="denominator for the shares")

    p = sub.add_parser("pipeline", parents=[common], help="run every stage end to end")
    _strategy_flags(p)
    p.add_argument("--lm", type=Path, default=None, help="reuse a trained LM instead of training")

    sub.add_parser("validate", parents=[common], help="check every artifact in --out-dir")
    return parser


def resolve_config(args) -> PL.ExperimentConfig:
    out = args.out_dir
    if args.config is not None:
        cfg = PL.ExperimentConfig.load(args.config)
    elif out is not None and (out / "config.json").is_file():
        cfg = PL.ExperimentConfig.load(out / "config.json")
    else:
        cfg = PL.ExperimentConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.jobs is not None:
        over["jobs"] = args.jobs
    if getattr(args, "strategy", None):
        over["strategy"] = args.strategy
    if getattr(args, "clamp", None):
        over["clamp"] = args.clamp == "on"
    return PL.ExperimentConfig(**{**{f: getattr(cfg, f) for f in cfg.__dataclass_fields__}, **over})


def _need(path: Path) -> Path:
    if not path.is_file():
        raise UsageError(f"missing input {path}; run the earlier stage first")
    return path


def _datasets(out: Path):
    return T.read_dataset(_need(out / "train.jsonl")), T.read_dataset(_need(out / "heldout.jsonl"))


def _lm(cfg, out: Path) -> T.ToyLM:
    lm = T.load_lm(_need(out / "lm.bin"))
    if lm.config != cfg.lm_config:
        raise UsageError("lm.bin was trained for a different config")
    return lm


def cmd_gen_data(cfg, args, out):
    PL.write_text(out / "config.json", cfg.dumps())
    train, held = PL.gen_data(cfg, out)
    print(f"wrote {len(train)} train and {len(held)} held-out samples to {out}")


def cmd_train_lm(cfg, args, out):
    train, held = _datasets(out)
    lm = PL.train_lm(cfg, out, train, held)
    print(f"held-out accuracy {T.accuracy(lm, held, cfg.vocab, cfg.n_sys):.4f}")


def cmd_explain(cfg, args, out):
    _, held = _datasets(out)
    analysis = PL.analyse(cfg, _lm(cfg, out), held)
    path = PL.explain(cfg, out, analysis)
    if args.heatmap_out is not None:
        if not 0 <= args.sample < len(held):
            raise UsageError(f"--sample {args.sample} outside the held-out set")
        E.write_heatmap(args.heatmap_out, analysis.relevance[args.sample], cfg.grid_size)
    print(f"wrote {path}")


def cmd_build_pairs(cfg, args, out):
    train, held = _datasets(out)
    lm = _lm(cfg, out)
    build = PL.build_pairs(cfg, out, lm, train)
    pairs = PL.heldout_pairs(PL.analyse(cfg, lm, held))
    C.write_pairs(out / f"heldout_pairs_{cfg.strategy}.jsonl", pairs)
    print(f"{len(build.examples)} training pairs ({build.retained_fraction:.3f} of inputs answered correctly), "
          f"{len(pairs)} held-out pairs")


def cmd_train_compressor(cfg, args, out):
    pairs = C.read_pairs(_need(out / f"pairs_{cfg.strategy}.jsonl"))
    held = C.read_pairs(_need(out / f"heldout_pairs_{cfg.strategy}.jsonl"))
    res = PL.train_compressor(cfg, out, pairs, held)
    print(f"held-out KL {res.heldout_kl:.6f}")


def cmd_eval(cfg, args, out):
    if not 0 < args.ratio <= 1:
        raise UsageError("--ratio must lie in (0, 1]")
    _, held = _datasets(out)
    lm = _lm(cfg, out)
    analysis = PL.analyse(cfg, lm, held)
    rows = [PL.vanilla_row(cfg, analysis)]
    if args.method != "vanilla":
        predicted = kl = None
        if args.method == "predicted":
            ccfg, params = C.load_params(_need(out / "f_theta.bin"))
            predicted = C.predict_batch(ccfg, params, analysis.a0v)
            usable = [ex for ex in PL.heldout_pairs(analysis) if not ex.degenerate]
            kl = C.mean_kl(ccfg, params, usable) if usable else None
        rows.append(PL.evaluate(cfg, lm, analysis, held, args.method, args.ratio, predicted, kl))
    PL.write_text(out / f"eval_{args.method}_{args.ratio:g}.csv", PL.rows_to_csv(rows))
    sys.stdout.write(PL.rows_to_markdown(rows))


def cmd_flops(cfg, args, out):
    try:
        channels = tuple(int(c) for c in args.conv_channels.split(",") if c.strip())
    except ValueError as e:
        raise UsageError(f"--conv-channels: {e}") from e
    llm = F.LlmFlopsConfig(args.n, args.d, args.m, args.ffn_l, args.nl)
    conv = F.ConvFlopsConfig.from_channels(args.n, channels, args.kernel, not args.no_final_pointwise)
    rep = F.report(llm, conv, args.stated_total)
    print(f"FLOPs_LLM  {rep.flops_llm:,}")
    print(f"FLOPs_attn {rep.flops_attn:,}")
    print(f"FLOPs_conv {rep.flops_conv:,}")
    print()
    sys.stdout.write(rep.to_markdown())
    if args.out_dir is not None:
        PL.write_text(out / "flops.csv", rep.to_csv())
        PL.write_text(out / "flops.md", rep.to_markdown())


def cmd_pipeline(cfg, args, out):
    if args.lm is not None:
        _need(args.lm)
    res = PL.run_pipeline(cfg, out, args.lm)
    sys.stdout.write(PL.rows_to_markdown(res.rows))
    print(json.dumps(res.metrics, sort_keys=True))


def cmd_validate(cfg, args, out):
    problems = PL.validate_dir(out)
    for p in problems:
        print(p, file=sys.stderr)
    if problems:
        raise UsageError(f"{len(problems)} invalid artifact(s) in {out}")
    print(f"{out}: all artifacts valid")


COMMANDS = {
    "gen-data": cmd_gen_data, "train-lm": cmd_train_lm, "explain": cmd_explain, "build-pairs": cmd_build_pairs,
    "train-compressor": cmd_train_compressor, "eval": cmd_eval, "flops": cmd_flops, "pipeline": cmd_pipeline,
    "validate": cmd_validate,
}


def _snapshot(out: Path) -> dict[Path, tuple[int, int]]:
    if not out.is_dir():
        return {}
    return {p: (p.stat().st_mtime_ns, p.stat().st_size) for p in out.iterdir() if p.is_file()}


def _cleanup(out: Path, before: dict[Path, tuple[int, int]], created_dir: bool) -> None:
    for p, stamp in _snapshot(out).items():
        if before.get(p) != stamp:
            p.unlink(missing_ok=True)
    if created_dir and out.is_dir() and not any(out.iterdir()):
        out.rmdir()


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    out = args.out_dir if args.out_dir is not None else Path("out")
    writes = args.command != "validate" and not (args.command == "flops" and args.out_dir is None)
    created_dir = writes and not out.exists()
    before = _snapshot(out)
    try:
        cfg = resolve_config(args)
        if writes:
            out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args, out)
        return EXIT_OK
    except (UsageError, PL.ConfigError) as e:
        code, msg = EXIT_INVALID, str(e)
    except (ValueError, IndexError) as e:
        # bad numbers that reach a library call (negative sizes, ratios, ...)
        code, msg = EXIT_INVALID, f"{args.command}: {e}"
    except Exception as e:  # noqa: BLE001 - reported and mapped to the runtime exit code
        code, msg = EXIT_RUNTIME, f"{args.command}: {e}"
    if writes:
        _cleanup(out, before, created_dir)
    print(f"error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
