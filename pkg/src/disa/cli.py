"""Command-line front end.

Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flag, unknown
config key, unparsable value).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import data as D
from . import harness as H
from . import losses as L
from .config import ConfigError, ExperimentConfig, load_config, parse_overrides
from .gradcheck import format_table, gradcheck
from .plotting import plot_loss_traces, render_report_figures
from .reporting import write_report, write_saliency

log = logging.getLogger("disa")

SNAPSHOT = "config.resolved.cfg"
SWEEPS = {"lambda": "lambda-sweep", "depth": "depth-sweep"}


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="sectioned key=value config file")
    common.add_argument("--out", metavar="DIR", help="output directory (default: $DISA_OUT/<subcommand>)")
    common.add_argument("--seed", type=int, metavar="N", help="run a single seed instead of run.seeds")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, e.g. loss.lambda=0 (repeatable)")
    common.add_argument("--parallel", type=int, default=1, metavar="N", help="independent runs in parallel")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="disa", description="Prompt learning with frozen-teacher regularizers "
                                "on a toy dual encoder.")
    sub = p.add_subparsers(dest="command", required=True, metavar="subcommand")
    sub.add_parser("pretrain", parents=[common], help="pretrain and freeze the backbone, write a checkpoint")
    sub.add_parser("train", parents=[common], help="train prompts on one seed, write a checkpoint")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a trained checkpoint base-to-novel")
    ev.add_argument("--checkpoint", required=True, metavar="PATH")
    sub.add_parser("protocol", parents=[common], help="run the protocol named by run.protocol")
    sub.add_parser("ablate", parents=[common], help="six-row component ablation")
    sw = sub.add_parser("sweep", parents=[common], help="lambda or prompt-depth sweep")
    sw.add_argument("axis", choices=sorted(SWEEPS))
    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every primitive and loss")
    gc.add_argument("--cases", type=int, default=100)
    sub.add_parser("dump-saliency", parents=[common], help="per-step saliency and mask CSV for one run")
    return p


def resolve_config(args) -> ExperimentConfig:
    overrides = parse_overrides(args.overrides)
    if args.seed is not None:
        overrides["run.seeds"] = str(args.seed)
    if args.command == "ablate":
        overrides.setdefault("run.protocol", "ablation")
    elif args.command == "sweep":
        overrides["run.protocol"] = SWEEPS[args.axis]
    if args.config and not Path(args.config).is_file():
        raise UsageError(f"config file {args.config} does not exist")
    return load_config(args.config, overrides)


def output_dir(args) -> Path:
    out = Path(args.out) if args.out else Path(os.environ.get("DISA_OUT", "runs")) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_snapshot(cfg: ExperimentConfig, out: Path) -> Path:
    path = out / SNAPSHOT
    path.write_text(cfg.to_text())
    return path


def _report(report, cfg: ExperimentConfig, out: Path) -> None:
    paths = write_report(report, out)
    if cfg.run.figures:
        render_report_figures(report, out)
    for row in report.summary:
        log.info("%-28s %-20s base %s novel %s hm %s", row["condition"], row["dataset"],
                 _fmt(row.get("base_acc_mean")), _fmt(row.get("novel_acc_mean")), _fmt(row.get("hm_mean")))
    log.info("wrote %s", ", ".join(str(p) for p in paths.values()))


def _fmt(v) -> str:
    return "-" if v is None else f"{v:6.2f}"


def cmd_pretrain(cfg, args, out):
    enc = H.pretrain_backbone(cfg)
    path = out / "backbone.ckpt"
    ckpt.write_checkpoint(path, ckpt.prefixed("backbone", enc.state_dict()))
    log.info("backbone checksum %s -> %s", enc.checksum(), path)


def _single_run(cfg: ExperimentConfig, dump_saliency: bool = False):
    seed = cfg.run.seeds[0]
    enc = H._backbone_for(cfg)
    corpus = H.downstream_corpus(cfg, seed)
    dt = cfg.data
    split = D.split_base_novel(corpus, dt.base_fraction, seed, dt.test_per_class, dt.k_shot)
    train = D.sample_k_shot(corpus, split, dt.k_shot, seed)
    result = H.train_prompts(cfg, enc, train, seed=seed, depth=H.default_depth(cfg, "base-to-novel"),
                             dump_saliency=dump_saliency)
    return enc, corpus, split, train, result


def cmd_train(cfg, args, out):
    enc, _, _, train, result = _single_run(cfg)
    f_o, _ = H._frozen_pass(enc, train.images)
    protos = L.compute_prototypes(f_o, train.labels, train.class_ids)
    blocks = {**ckpt.prefixed("backbone", enc.state_dict()), **ckpt.prefixed("prompts", result.bank.state_dict()),
              **ckpt.prototype_blocks(protos)}
    path = out / f"prompts_seed{cfg.run.seeds[0]}.ckpt"
    ckpt.write_checkpoint(path, blocks)
    if cfg.run.figures:
        plot_loss_traces({f"seed{cfg.run.seeds[0]}": result.trace}, out / "train_losses.png")
    log.info("trained %d steps, final %s -> %s", result.steps,
             ", ".join(f"{k}={v:.4f}" for k, v in result.final.items() if k != "epoch"), path)


def cmd_eval(cfg, args, out):
    from .encoders import PromptBank

    blocks = ckpt.read_checkpoint(args.checkpoint)
    enc = H.build_encoder(cfg, cfg.pretrain.seed)
    enc.load_state_dict(ckpt.group(blocks, "backbone"))
    enc.freeze()
    bank = PromptBank.from_state_dict(ckpt.group(blocks, "prompts"))
    rows = []
    dt = cfg.data
    for seed in cfg.run.seeds:
        corpus = H.downstream_corpus(cfg, seed)
        split = D.split_base_novel(corpus, dt.base_fraction, seed, dt.test_per_class, dt.k_shot)
        base = 100 * H.evaluate(bank, enc, D.test_set(corpus, split, split.base_classes))
        novel = 100 * H.evaluate(bank, enc, D.test_set(corpus, split, split.novel_classes))
        rows.append({"protocol": "base-to-novel", "dataset": "corpus-A", "condition": "checkpoint", "seed": seed,
                     "k_shot": dt.k_shot, "lambda": cfg.loss.lambda_, "depth": bank.depth,
                     "switches": H.switches(cfg), "base_acc": base, "novel_acc": novel,
                     "hm": H.harmonic_mean(base, novel), "ce": None, "sr": None, "cir": None, "dir": None})
    report = H.EvalReport("base-to-novel", cfg.digest(), rows, H.summarize(rows), {})
    _report(report, cfg, out)


def cmd_protocol(cfg, args, out):
    _report(H.run_protocol(cfg, parallel=args.parallel), cfg, out)


def cmd_gradcheck(cfg, args, out):
    rows = gradcheck(cases=args.cases, seed=cfg.run.seeds[0])
    table = format_table(rows)
    print(table)
    (out / "gradcheck.txt").write_text(table + "\n")
    failed = [r.name for r in rows if not r.passed]
    if failed:
        log.error("gradcheck failed for: %s", ", ".join(failed))
        return 1
    return 0


def cmd_dump_saliency(cfg, args, out):
    _, _, _, _, result = _single_run(cfg, dump_saliency=True)
    path = out / "saliency.csv"
    write_saliency(result.saliency_rows, path)
    log.info("wrote %d saliency rows -> %s", len(result.saliency_rows), path)


COMMANDS = {"pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval, "protocol": cmd_protocol,
            "ablate": cmd_protocol, "sweep": cmd_protocol, "gradcheck": cmd_gradcheck,
            "dump-saliency": cmd_dump_saliency}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        out = output_dir(args)
        write_snapshot(cfg, out)
        status = COMMANDS[args.command](cfg, args, out)
    except (ConfigError, UsageError) as exc:
        parser.print_usage(sys.stderr)
        print(f"disa: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit 1
        log.debug("traceback", exc_info=True)
        print(f"disa: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return int(status or 0)


if __name__ == "__main__":
    np.seterr(all="ignore")
    sys.exit(main())
