"""Command-line entry point: ``diffdistill <subcommand> [--config PATH] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config
from .datasets_features import LabeledDataset
from .denoiser import load_checkpoint, save_checkpoint
from .eval_harness import compare_methods, write_results_csv, write_summary_csv
from .im_finetune import write_loss_log
from .pipeline import (
    METHODS, SWEEP_AXES, Experiment, StageError, alpha_beta_grid, export_embeddings, run_instability,
    run_pipeline, run_sweep, stage,
)
from .sss_select import CandidatePool, select_greedy

log = logging.getLogger("diffdistill")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = str(args.out)
    return cfg.replace(**overrides) if overrides else cfg


def _experiment(cfg: ExperimentConfig, out: Path) -> Experiment:
    """Experiment that reuses checkpoints already written to ``out`` by earlier subcommands."""
    exp = Experiment(cfg)
    base = out / "denoiser_base.ckpt"
    if base.exists():
        exp.__dict__["pretrained"] = (load_checkpoint(base), [])
    im = out / "denoiser_im.ckpt"
    if im.exists():
        exp._finetuned[cfg.finetune.lambda_im] = (load_checkpoint(im), [])
    return exp


def cmd_pretrain(cfg, out, args):
    exp = Experiment(cfg)
    params, plog = exp.pretrained
    save_checkpoint(params, out / "denoiser_base.ckpt")
    write_loss_log(out / "pretrain_log.csv", plog)


def cmd_finetune(cfg, out, args):
    if not (out / "denoiser_base.ckpt").exists():
        raise StageError("finetune", FileNotFoundError(f"{out / 'denoiser_base.ckpt'} missing; run pretrain first"))
    exp = _experiment(cfg, out)
    params, flog = exp.finetuned()
    save_checkpoint(params, out / "denoiser_im.ckpt")
    write_loss_log(out / "finetune_log.csv", flog)


def cmd_pool(cfg, out, args):
    exp = _experiment(cfg, out)
    pool = exp.pool(args.generator)
    pool.to_csv(out / f"pool_{args.generator}_centroids.csv", out / f"pool_{args.generator}_members.csv")


def cmd_select(cfg, out, args):
    path = out / f"pool_{args.generator}_centroids.csv"
    with stage("select"):
        pool = CandidatePool.from_csv(path) if path.exists() else _experiment(cfg, out).pool(args.generator)
        alpha = cfg.selection.alpha if args.alpha is None else args.alpha
        beta = cfg.selection.beta if args.beta is None else args.beta
        sel = select_greedy(pool, alpha, beta)
        print(sel.to_json(out / f"assignment_{args.generator}.json"))


def cmd_eval(cfg, out, args):
    exp = _experiment(cfg, out)
    if args.train:
        methods = {}
        for item in args.train:
            name, _, path = item.partition("=")
            methods[name] = LabeledDataset.from_csv(path, n_classes=cfg.gmm.C)
    else:
        datasets, _ = exp.method_datasets()
        methods = {m: datasets[m] for m in METHODS}
    with stage("eval"):
        reports = compare_methods(methods, exp.data[1], cfg.eval.seeds, exp.recipe, cfg.selection.ipc)
    write_results_csv(out / "results.csv", reports)
    write_summary_csv(out / "summary.csv", reports)
    for r in reports:
        print(f"{r.method:12s} {100 * r.mean:6.2f} +- {100 * r.std:.2f}")


def cmd_pipeline(cfg, out, args):
    run_pipeline(cfg, out)
    print((out / "summary.csv").read_text(), end="")


def cmd_sweep(cfg, out, args):
    if args.axis == "alpha_beta_grid" and args.values in (None, "grid"):
        values = alpha_beta_grid()
    elif args.values is None:
        raise StageError("sweep", ValueError(f"--values is required for axis {args.axis}"))
    else:
        values = json.loads(args.values)
    exp = _experiment(cfg, out)
    run_sweep(cfg, args.axis, values, out / f"sweep_{args.axis}.csv", exp)


def cmd_instability(cfg, out, args):
    exp = _experiment(cfg, out)
    rep = run_instability(exp, args.generator, args.class_id, args.probes, args.steps, args.h)
    rep.to_files(out / f"instability_{args.generator}.csv", out / f"instability_{args.generator}.json")
    print(json.dumps(rep.summary(), indent=2))


def cmd_export_embeddings(cfg, out, args):
    for p in export_embeddings(_experiment(cfg, out), out):
        print(p)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file (defaults used if omitted)")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--out", type=Path, help="output directory (overrides out_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="diffdistill", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common]).set_defaults(func=cmd_pretrain)
    sub.add_parser("finetune", parents=[common]).set_defaults(func=cmd_finetune)
    for name, func in (("pool", cmd_pool), ("select", cmd_select)):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--generator", choices=("base", "im"), default="im")
        if name == "select":
            p.add_argument("--alpha", type=float)
            p.add_argument("--beta", type=float)
        p.set_defaults(func=func)
    p = sub.add_parser("eval", parents=[common])
    p.add_argument("--train", action="append", metavar="NAME=CSV",
                   help="dataset CSV to evaluate; repeatable. Default: the five pipeline methods")
    p.set_defaults(func=cmd_eval)
    sub.add_parser("pipeline", parents=[common]).set_defaults(func=cmd_pipeline)
    p = sub.add_parser("sweep", parents=[common])
    p.add_argument("--axis", choices=SWEEP_AXES, required=True)
    p.add_argument("--values", help='JSON list, e.g. "[0.002, 0.008]" or "[[0.1, 0.5]]"; '
                                    '"grid" for the 9x9 alpha/beta grid')
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("instability", parents=[common])
    p.add_argument("--generator", choices=("base", "im"), default="im")
    p.add_argument("--class-id", type=int, default=0)
    p.add_argument("--probes", type=int, default=50)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--h", type=float, default=1e-4)
    p.set_defaults(func=cmd_instability)
    sub.add_parser("export-embeddings", parents=[common]).set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"diffdistill: stage 'config' failed: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        args.func(cfg, out, args)
    except StageError as exc:
        print(f"diffdistill: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"diffdistill: stage '{args.command}' failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
