"""Command-line entry point: ``crcrisk {synth,pretrain,train,eval,explain,report}``.

Every command writes into ``--out`` and echoes the resolved configuration to
``config.ini`` there. Log verbosity comes from the ``CRCRISK_LOG`` environment
variable (DEBUG, INFO, WARNING; default WARNING).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import interpret as it
from . import maskhit as mh
from . import pipelines as pl
from . import training as tr
from .config import load_config
from .errors import ConfigError, CrcRiskError, MissingArtifactError
from .evalstat import run_experiment, repeat_splits
from .report import build_report
from .synthcohort import generate_cohort, read_cohort, write_cohort

log = logging.getLogger("crcrisk")


def _cohort(cfg, args):
    path = args.cohort or cfg.paths.get("cohort")
    if path:
        if not Path(path).exists():
            raise MissingArtifactError(f"cohort directory {path} does not exist")
        return read_cohort(path)
    return generate_cohort(cfg.synth)


def _checkpoint(path, what):
    if not path:
        raise ConfigError(f"no {what} checkpoint given (flag or [paths] entry)")
    if not Path(path).exists():
        raise MissingArtifactError(f"{what} checkpoint {path} does not exist")
    return mh.load_checkpoint(path)


def _bank(cfg, cohort, ckpt=None):
    seed = ckpt.featurizer_seed if ckpt is not None else cfg.featurizer_seed
    mcfg = ckpt.params.config if ckpt is not None else cfg.transformer
    return tr.SlideBank.for_model(mcfg, cohort.config.patch_px, seed)


def cmd_synth(cfg, args, out):
    cohort = generate_cohort(cfg.synth)
    write_cohort(cohort, out / "cohort")
    print(f"wrote {len(cohort)} patients ({int(cohort.labels.sum())} positive) to {out / 'cohort'}")


def cmd_pretrain(cfg, args, out):
    cohort = _cohort(cfg, args)
    bank = _bank(cfg, cohort)
    rows = []
    init = tr.init_checkpoint(cfg.transformer, cfg.featurizer_seed, cfg.train.seed)
    ckpt = tr.pretrain(cohort, cfg.train, bank, init, rows)
    mh.save_checkpoint(out / "pretrained.ckpt", ckpt)
    tr.write_training_log(rows, out / "training_log.csv")
    print(f"wrote {out / 'pretrained.ckpt'}")


def cmd_train(cfg, args, out):
    cohort = _cohort(cfg, args)
    pre = _checkpoint(args.checkpoint or cfg.paths.get("pretrained"), "pretrained")
    bank = _bank(cfg, cohort, pre)
    rows = []
    if args.mode == "direct":
        ckpt = tr.finetune_direct(pre, cohort, cfg.train, bank, log_rows=rows)
    else:
        tcfg = tr.TrainConfig.from_dict({**cfg.train.to_dict(), "freeze_transformer": args.mode == "guided-freeze"})
        ckpt = tr.finetune_guided(pre, cohort, args.target, tcfg, bank, log_rows=rows)
    path = out / f"{args.mode}.ckpt"
    mh.save_checkpoint(path, ckpt)
    tr.write_training_log(rows, out / "training_log.csv")
    print(f"wrote {path}")


def _context(cfg, args, cohort):
    pre = args.checkpoint or cfg.paths.get("pretrained")
    ctx = pl.ExperimentContext(cohort, cfg.transformer, cfg.train, cfg.featurizer_seed,
                               cfg.experiment.cv_folds, cfg.experiment.seed)
    if pre:
        ctx.pretrained = _checkpoint(pre, "pretrained")
    return ctx


def _pipeline_defaults(cfg):
    return {"fusion": cfg.fusion.method, "model": cfg.fusion.classifier}


def cmd_eval(cfg, args, out):
    if not args.pipeline:
        raise ConfigError(f"eval needs at least one --pipeline; valid tokens: {', '.join(pl.valid_tokens())}")
    specs = [pl.parse_pipeline(p, _pipeline_defaults(cfg)) for p in args.pipeline]
    cohort = _cohort(cfg, args)
    ctx = _context(cfg, args, cohort)
    funcs = {s.name: pl.make_pipeline(s, ctx, cfg.fusion.weight) for s in specs}
    report = run_experiment(cfg.experiment, cohort.labels, funcs)
    report.write(out)
    print(report.summary_text(), end="")


def _explain_attention(cfg, args, out, diff):
    cohort = _cohort(cfg, args)
    if diff:
        pre = _checkpoint(args.pretrained or cfg.paths.get("pretrained"), "pretrained")
        fine = _checkpoint(args.finetuned or cfg.paths.get("finetuned"), "fine-tuned")
        bank = _bank(cfg, cohort, fine)
    else:
        fine = _checkpoint(args.checkpoint or cfg.paths.get("checkpoint"), "model")
        bank = _bank(cfg, cohort, fine)
    slides = [s for p in cohort.patients for s in p.slides][: args.n_slides]
    odir = out / "overlays"
    odir.mkdir(parents=True, exist_ok=True)
    for s in slides:
        amap = it.attention_difference(pre, fine, s, bank) if diff else it.attention_map(fine, s, bank)
        stem = f"{'diff' if diff else 'attention'}_{s.id}"
        it.render_overlay(s, amap, odir / f"{stem}.{args.format}")
        it.write_attention_csv(amap, odir / f"{stem}.csv")
    print(f"wrote {len(slides)} overlays to {odir}")


def _explain_shapley(cfg, args, out):
    if len(args.pipeline or []) != 1:
        raise ConfigError("explain --kind shapley needs exactly one --pipeline")
    spec = pl.parse_pipeline(args.pipeline[0], _pipeline_defaults(cfg))
    if not spec.tabular:
        raise ConfigError("Shapley attribution needs a pipeline with clinical inputs")
    cohort = _cohort(cfg, args)
    ctx = _context(cfg, args, cohort)
    fn = pl.make_pipeline(spec, ctx, cfg.fusion.weight)
    labels = cohort.labels
    reports, perms = [], []
    for r, (train, test) in enumerate(repeat_splits(labels, cfg.experiment)):
        res = fn(train, test, r)
        ex = res.extra
        groups = pl.shapley_groups(spec, ex["schema"], ex.get("embed_dim", 0))
        rng = np.random.default_rng([cfg.experiment.seed, r, 7])
        reports.append(it.mean_abs_shapley(ex["model"], ex["X_test"], ex["X_train"], groups,
                                           max_instances=args.max_instances, rng=rng,
                                           n_permutations=args.permutations))
        if args.permutation_importance:
            perms.append(it.permutation_importance(ex["model"], ex["X_test"], labels[test], groups, rng))
    rep = it.aggregate_shapley(reports, perms or None)
    (out / "shapley.csv").write_text(rep.to_csv())
    names, means, _ = rep.top(10)
    for n, m in zip(names, means):
        print(f"{n:<32s} {m:.4f}")


def cmd_explain(cfg, args, out):
    if args.kind == "shapley":
        _explain_shapley(cfg, args, out)
    else:
        _explain_attention(cfg, args, out, args.kind == "attention-diff")


def cmd_report(cfg, args, out):
    run_dir = Path(args.run or cfg.paths.get("run") or out)
    for p in build_report(run_dir, out):
        print(f"wrote {p}")


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
            "explain": cmd_explain, "report": cmd_report}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int, help="global seed (overrides [run] seed)")
    common.add_argument("--out", required=True, help="run directory")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("--cohort", help="cohort directory (default: generate from [synth])")
    common.add_argument("--checkpoint", help="model checkpoint")

    ap = argparse.ArgumentParser(prog="crcrisk", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic cohort")
    sub.add_parser("pretrain", parents=[common], help="masked-feature pretraining")
    p = sub.add_parser("train", parents=[common], help="fine-tune a pretrained checkpoint")
    p.add_argument("--mode", choices=pl.WSI_MODES, default="direct")
    p.add_argument("--target", default="all_colonoscopy", help="intermediate targets for guided modes")
    p = sub.add_parser("eval", parents=[common], help="repeated-split evaluation of pipelines")
    p.add_argument("--pipeline", action="append", help="pipeline name (repeatable)")
    p = sub.add_parser("explain", parents=[common], help="attention overlays or Shapley values")
    p.add_argument("--kind", choices=("attention", "attention-diff", "shapley"), required=True)
    p.add_argument("--pipeline", action="append")
    p.add_argument("--pretrained")
    p.add_argument("--finetuned")
    p.add_argument("--n-slides", type=int, default=4)
    p.add_argument("--format", choices=("png", "ppm"), default="png")
    p.add_argument("--max-instances", type=int, default=50)
    p.add_argument("--permutations", type=int, default=200, help="Monte-Carlo permutations above 15 groups")
    p.add_argument("--permutation-importance", action="store_true")
    p = sub.add_parser("report", parents=[common], help="render figures from a run directory")
    p.add_argument("--run", help="run directory to read (default: --out)")
    return ap


def main(argv=None):
    logging.basicConfig(level=os.environ.get("CRCRISK_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        text = ""
        if args.config:
            if not Path(args.config).exists():
                raise MissingArtifactError(f"config file {args.config} does not exist")
            text = Path(args.config).read_text()
        cfg = load_config(text, args.seed, args.set)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(cfg.dumps())
        with warnings.catch_warnings():
            if not log.isEnabledFor(logging.INFO):
                warnings.simplefilter("ignore", RuntimeWarning)
            COMMANDS[args.command](cfg, args, out)
    except CrcRiskError as exc:
        print(f"crcrisk: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
