"""Command-line entry point: ``gaitvlm <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import datasim as dsm
from . import decoder as dec
from . import harness as hx

log = logging.getLogger("gaitvlm")


def _config(args) -> hx.ExperimentConfig:
    overrides = {"seed": args.seed, "task": args.task}
    if getattr(args, "no_kapt", False):
        overrides["use_knowledge"] = False
    if getattr(args, "no_nte", False):
        overrides["use_nte"] = False
    if getattr(args, "data", None):
        overrides["data_dir"] = str(args.data)
    if getattr(args, "folds", None):
        overrides["k_folds"] = args.folds
    if args.config:
        return hx.ExperimentConfig.from_file(args.config, **overrides)
    return hx.ExperimentConfig.from_text("", **overrides)


def _run_dir(arg: str | None, name: str) -> Path:
    if arg:
        return Path(arg)
    return Path(os.environ.get(hx.RUN_ROOT_ENV, "runs")) / name


def cmd_gen_data(args) -> dict:
    cfg = _config(args)
    out = _run_dir(args.out, "data")
    ds = dsm.generate_dataset(cfg.synthetic())
    dsm.save_dataset(ds, out)
    return {"dataset": str(out), "subjects": len(ds.subjects), "videos": len(ds.videos)}


def cmd_train(args) -> dict:
    cfg = _config(args)
    out = _run_dir(args.out, "run")
    if args.ablation:
        reports = hx.run_ablation(cfg, out)
        return {name: {"accuracy": r["accuracy"], "macro_f1": r["macro_f1"]} for name, r in reports.items()}
    run = hx.run_cv(cfg, out, progress=lambda msg: log.info(msg))
    return {"run": str(out), "accuracy": run.report["accuracy"], "macro_f1": run.report["macro_f1"]}


def cmd_eval(args) -> dict:
    run_dir = _run_dir(args.run, "run")
    result = hx.reevaluate(run_dir)
    (run_dir / "reevaluation.json").write_text(json.dumps(result, indent=2) + "\n")
    return {"run": str(run_dir), "accuracy": result["accuracy"], "macro_f1": result["macro_f1"]}


def cmd_decode(args) -> dict:
    run_dir = _run_dir(args.run, "run")
    report = json.loads((run_dir / "report.json").read_text())
    cfg = hx.ExperimentConfig(**report["config"])
    stack = hx.build_stack(cfg)
    data = hx.load_data(cfg)
    plan = dsm.dataset_folds(data, cfg.k_folds, cfg.seed, cfg.split_level)
    fold = plan.folds[args.fold]
    meta = json.loads((run_dir / f"fold_{fold.index:02d}.json").read_text())
    stats = hx.load_stats(meta)
    combos = [hx.gp.ParameterCombination(tuple(c)) for c in meta["combinations"]]
    if stats is None or not combos:
        raise ValueError(f"fold {fold.index} has no numeric sentences to train a decoder on")
    fd = hx.split_fold(data, fold, cfg.split_level)
    corpus = hx.decoder_corpus(stack, fd.train_params, stats, combos, cfg.dec_sentences,
                               np.random.default_rng(cfg.seed))
    ids = [dec.sentence_token_ids(hx.nt.tokenize(s, stack.vocab, stats), stack.vocab) for s in corpus.sentences]
    model = dec.train_decoder(corpus.features, ids, stack.vocab, hx.decoder_config(cfg),
                              progress=lambda e, loss: log.info("decoder epoch %d loss %.4f", e, loss))
    result = hx.FoldResult(fold.index, None, [], [], [], 0.0, [], hx.load_fold_params(run_dir, fold.index),
                           stats, combos, corpus)
    desc = hx.describe_classes(stack, result, corpus, model)
    path = run_dir / "class_descriptions.json"
    path.write_text(json.dumps(desc, indent=2) + "\n")
    return {"descriptions": str(path), "classes": desc}


def cmd_plot(args) -> dict:
    run_dir = _run_dir(args.run, "run")
    files = hx.emit_plots(run_dir, grid_points=args.points)
    return {"files": [str(f) for f in files]}


def cmd_gradcheck(args) -> dict:
    worst = hx.gradient_audit(seed=args.seed or 0, n_points=args.points)
    ok = all(v < args.tol for v in worst.values())
    if not ok:
        raise GradientError(worst, args.tol)
    return {"max_relative_error": worst, "tolerance": args.tol}


class GradientError(RuntimeError):
    def __init__(self, worst, tol):
        super().__init__(f"relative gradient error above {tol}: {worst}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gaitvlm", description="Gait vision-language experiments on synthetic data.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, ablations=False):
        sp.add_argument("--config", type=Path, help="flat key = value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--task", choices=sorted(dsm.TASK_CLASSES))
        if ablations:
            sp.add_argument("--no-kapt", action="store_true", help="plain learnable prompts")
            sp.add_argument("--no-nte", action="store_true", help="numbers as ordinary tokens")

    sp = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    common(sp)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="k-fold cross-validated training")
    common(sp, ablations=True)
    sp.add_argument("--data", type=Path, help="dataset directory (default: generate in memory)")
    sp.add_argument("--folds", type=int)
    sp.add_argument("--out")
    sp.add_argument("--ablation", action="store_true", help="run all four prompt/embedding variants")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="reload checkpoints and rescore validation folds")
    common(sp)
    sp.add_argument("--run")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("decode", help="train the sentence decoder and describe each class")
    common(sp)
    sp.add_argument("--run")
    sp.add_argument("--fold", type=int, default=0)
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("plot-similarity", help="similarity map, PCA and loss-curve files")
    common(sp)
    sp.add_argument("--run")
    sp.add_argument("--points", type=int, default=201)
    sp.set_defaults(func=cmd_plot)

    sp = sub.add_parser("gradcheck", help="finite-difference audit of every loss")
    common(sp)
    sp.add_argument("--points", type=int, default=10)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except Exception as exc:  # reported as a machine-readable record
        record = {"ok": False, "command": args.command, "error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        return 2
    print(json.dumps({"ok": True, "command": args.command, **result}, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
