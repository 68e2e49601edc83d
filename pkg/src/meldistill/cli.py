"""Command-line driver.

Subcommands: train-teacher, run, eval, export, gen-corpus. Every subcommand
accepts --config PATH, --seed N, --out DIR, --single-thread, plus dotted
overrides of any config field (--inversion.tau=0.05). Exit codes: 0 success,
2 config error, 3 data/ingestion error, 4 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import os
import sys


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meldistill", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="run seed (overrides config)")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--single-thread", action="store_true", help="pin BLAS to one thread for reproducibility")
        p.add_argument("--method", default=None, help="method selector (overrides config)")

    p_teacher = sub.add_parser("train-teacher", help="pre-train the teacher on labelled data")
    common(p_teacher)

    p_run = sub.add_parser("run", help="run the configured method end to end")
    common(p_run)
    p_run.add_argument("--teacher", default=None, help="teacher checkpoint base path")
    p_run.add_argument("--seeds", default=None,
                       help="comma-separated seeds; runs them sequentially into <out>/seed_N/")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on held-out data")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True, help="checkpoint base path (no extension)")
    p_eval.add_argument("--corpus", default=None, help="corpus directory (default: config's eval split)")

    p_export = sub.add_parser("export", help="render bank items or one spectrogram to png/wav")
    common(p_export)
    group = p_export.add_mutually_exclusive_group(required=True)
    group.add_argument("--bank", default=None, help="memory bank directory")
    group.add_argument("--spec", default=None, help="single spectrogram payload (.f32)")
    p_export.add_argument("--format", choices=("png", "wav"), default="png")
    p_export.add_argument("--scale", type=int, default=1, help="integer pixel scale for png")

    p_gen = sub.add_parser("gen-corpus", help="write a synthetic labelled corpus to disk")
    common(p_gen)
    p_gen.add_argument("--split", choices=("train", "eval"), default="train")
    return parser


def _split_overrides(argv: list[str]) -> tuple[list[str], dict[str, str]]:
    """Pull out --section.key=value tokens argparse would reject."""
    plain: list[str] = []
    overrides: dict[str, str] = {}
    for token in argv:
        if token.startswith("--") and "=" in token and "." in token.split("=", 1)[0]:
            key, value = token[2:].split("=", 1)
            overrides[key] = value
        else:
            plain.append(token)
    return plain, overrides


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    if "--single-thread" in argv:
        # set before numpy spins up its thread pools in fresh processes
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, "1")
    plain, overrides = _split_overrides(argv)
    parser = _build_parser()
    args = parser.parse_args(plain)

    from .config import load_config
    from .errors import MeldistillError

    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.single_thread:
        overrides["single_thread"] = "true"
    if args.method is not None:
        overrides["method"] = args.method
    if getattr(args, "teacher", None):
        overrides["teacher_checkpoint"] = args.teacher

    try:
        cfg = load_config(args.config, overrides)
        result = _dispatch(args, cfg)
    except MeldistillError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return getattr(exc, "exit_code", 1)
    print(json.dumps(result, sort_keys=True, indent=2))
    return 0


def _dispatch(args: argparse.Namespace, cfg) -> dict:
    from . import runner
    from .audio import CorpusSpec, save_corpus, synth_corpus
    from .export import export_bank, export_spectrogram_file
    from .tensor import RngState

    if args.command == "train-teacher":
        report = runner.train_teacher(cfg)
        return {"command": "train-teacher", **report}

    if args.command == "run":
        if getattr(args, "seeds", None):
            import copy
            from pathlib import Path

            try:
                seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
            except ValueError as exc:
                from .errors import ConfigError

                raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from exc
            summaries = []
            for seed in seeds:
                sub_cfg = copy.deepcopy(cfg)
                sub_cfg.seed = seed
                sub_cfg.out_dir = str(Path(cfg.out_dir) / f"seed_{seed}")
                manifest = runner.run_experiment(sub_cfg)
                summaries.append({"seed": seed, "out_dir": sub_cfg.out_dir,
                                  "final_accuracy": manifest["final_accuracy"]})
            return {"command": "run", "out_dir": cfg.out_dir, "seeds": summaries}
        manifest = runner.run_experiment(cfg)
        return {"command": "run", "out_dir": cfg.out_dir, "manifest": manifest}

    if args.command == "eval":
        return {"command": "eval", **runner.evaluate_checkpoint(args.checkpoint, cfg, args.corpus)}

    if args.command == "export":
        if cfg.single_thread:
            runner.set_single_thread()
        if args.bank:
            written = export_bank(args.bank, cfg.out_dir, args.format, args.scale)
        else:
            written = export_spectrogram_file(args.spec, cfg.out_dir, args.format, args.scale)
        return {"command": "export", "format": args.format, "files": [p.name for p in written],
                "out_dir": cfg.out_dir}

    if args.command == "gen-corpus":
        stream = 1 if args.split == "train" else 2
        per_class = cfg.data.items_per_class if args.split == "train" else cfg.data.eval_items_per_class
        spec = CorpusSpec(
            class_count=cfg.data.class_count,
            items_per_class=per_class,
            duration_s=cfg.data.duration_s,
            mode=cfg.data.mode,
            mel_bins=cfg.data.mel_bins,
        )
        corpus = synth_corpus(RngState(cfg.seed).derive(stream), spec)
        save_corpus(cfg.out_dir, corpus)
        return {"command": "gen-corpus", "out_dir": cfg.out_dir, "items": len(corpus),
                "class_count": corpus.class_count, "mode": corpus.mode, "split": args.split}

    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
