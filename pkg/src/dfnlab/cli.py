"""Command-line entry point: ``dfnlab <subcommand>`` or ``python -m dfnlab``."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .config import ExperimentConfig, load_config
from .fdmp import read_fdmp
from .metrics import cka, mmd_rbf


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seeds"] = (args.seed,)
    if getattr(args, "rho", None) is not None:
        over["rho"] = args.rho
    if getattr(args, "shots", None) is not None:
        over["shots"] = args.shots
    if getattr(args, "sam_target", None) is not None:
        over["sam_target"] = args.sam_target
    if getattr(args, "adapters", None) is not None:
        over["adapters"] = args.adapters
    return replace(cfg, **over)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _pooled(arr: np.ndarray) -> np.ndarray:
    # conv feature dumps (n, C, H, W) are globally average pooled to (n, C)
    if arr.ndim > 2:
        return arr.reshape(arr.shape[0], arr.shape[1], -1).mean(axis=2)
    return arr


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = _out(args)
    for seed in cfg.seeds:
        bb = harness.get_backbone(seed, cfg.pretrain_steps)
        path = out / f"backbone-s{seed}.ckpt"
        harness.save_backbone(bb, path)
        print(json.dumps({"seed": seed, "pretext_accuracy": bb.pretext_accuracy,
                          "checksum": bb.checksum(), "path": str(path)}))
    return 0


def cmd_train_source(args) -> int:
    cfg = _config(args)
    out = _out(args)
    reports = []
    for seed in cfg.seeds:
        ckpt = out / f"model-s{seed}.ckpt"
        _, rep = harness.run_source_training(cfg, seed, checkpoint=ckpt)
        rep.kind = f"train-source-s{seed}"
        reports.append(rep)
        print(json.dumps({"seed": seed, "checkpoint": str(ckpt), **rep.summary}))
    harness.emit_report(reports, out)
    return 0


def cmd_finetune(args) -> int:
    cfg = _config(args)
    out = _out(args)
    model = harness.load_model(args.checkpoint)
    reports = []
    for seed in cfg.seeds:
        for target in (args.target or cfg.targets):
            _, rep = harness.run_target_finetune(model, target, cfg, seed, mode=args.mode)
            rep.kind = f"finetune-{target}-s{seed}"
            reports.append(rep)
            s = rep.summary
            print(json.dumps({"seed": seed, "target": target, "mode": s["mode"], "miou": s["miou"],
                              "freeze_audit": s["freeze_audit"]}))
    harness.emit_report(reports, out)
    return 0


def cmd_decouple_probe(args) -> int:
    cfg = _config(args)
    out = _out(args)
    rep = harness._new_report("decouple-probe", cfg, cfg.seeds)
    harness._signature_rows("decouple-probe", ("baseline", args.variant), cfg, rep)
    harness.emit_report(rep, out)
    for row in rep.rows:
        print(json.dumps(row))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    rep = harness.ablate(args.kind, cfg)
    paths = harness.emit_report(rep, _out(args))
    print("\n".join(str(p) for p in paths))
    return 0


def cmd_measure(args) -> int:
    a, b = (_pooled(read_fdmp(p)) for p in args.from_dumps)
    if args.metric == "cka":
        value = cka(a, b)
    else:
        value = mmd_rbf(a, b)
    print(json.dumps({"metric": args.metric, "value": value, "n": int(a.shape[0]), "seed": args.seed}))
    return 0


def cmd_synthbench(args) -> int:
    from .synthbench import export, get_domain

    path = export(get_domain(args.domain), args.n, args.out, seed=args.seed)
    print(str(path))
    return 0


def cmd_sharpness(args) -> int:
    cfg = _config(args)
    rep = harness._new_report(f"sharpness-{args.mode}", cfg, cfg.seeds)
    for seed in cfg.seeds:
        if args.mode == "re-init":
            res = harness.reinit_spread(cfg, seed, cfg.sam_target, variant=cfg.adapters)
            rep.records.append({"seed": seed, **res})
        else:
            model, _ = harness.trained_model(cfg, seed, cfg.adapters, cfg.sam_target)
            rep.records.append({"seed": seed, "loss_fluctuation": harness.noise_fluctuation(model, cfg, seed)})
        print(json.dumps(rep.records[-1]))
    harness.emit_report(rep, _out(args), formats=("json",))
    return 0


def cmd_report(args) -> int:
    reports = [harness.RunReport.from_json(p.read_text()) for p in sorted(Path(args.input).glob("*.json"))]
    if not reports:
        print(f"no reports in {args.input}", file=sys.stderr)
        return 1
    paths = harness.emit_report(reports, _out(args), formats=("csv", "markdown"))
    print("\n".join(str(p) for p in paths))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dfnlab", description="Adapter decoupling experiments on a synthetic benchmark")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--seed", type=int, default=None, help="run a single seed instead of the config list")
        sp.add_argument("--config", default=None, help="flat key=value config file")
        sp.add_argument("--rho", type=float, default=None)
        sp.add_argument("--shots", type=int, choices=(1, 5), default=None)
        if out:
            sp.add_argument("--out", default="runs")

    sp = sub.add_parser("pretrain", help="pretrain and save the frozen backbone")
    common(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("train-source", help="source-domain training with a checkpoint per seed")
    common(sp)
    sp.add_argument("--adapters", default=None, help="adapter preset (dfn, deep, none, ...)")
    sp.add_argument("--sam-target", dest="sam_target", default=None,
                    choices=("none", "whole-model", "dfn-only", "svn"))
    sp.set_defaults(func=cmd_train_source)

    sp = sub.add_parser("finetune", help="navigator-only finetuning on target domains")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--target", action="append", default=None)
    sp.add_argument("--mode", default="finetune-from-source",
                    choices=harness.USAGE_MODES + ("zero-shot",))
    sp.add_argument("--sam-target", dest="sam_target", default=None,
                    choices=("none", "whole-model", "dfn-only", "svn"))
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("decouple-probe", help="source/target CKA at backbone and encoder taps")
    common(sp)
    sp.add_argument("--variant", default="backbone-deep")
    sp.set_defaults(func=cmd_decouple_probe)

    sp = sub.add_parser("ablate", help="run one ablation grid")
    common(sp)
    sp.add_argument("--kind", required=True, choices=harness.ABLATIONS)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("measure", help="CKA or MMD between two FDMP feature dumps")
    sp.add_argument("--from-dumps", dest="from_dumps", nargs=2, required=True, metavar="DUMP")
    sp.add_argument("--metric", choices=("cka", "mmd"), default="cka")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_measure)

    sp = sub.add_parser("synthbench", help="benchmark utilities")
    bsub = sp.add_subparsers(dest="action", required=True)
    ex = bsub.add_parser("export", help="write image/mask FDMP files and a manifest")
    ex.add_argument("--domain", required=True)
    ex.add_argument("--n", type=int, default=100)
    ex.add_argument("--out", required=True)
    ex.add_argument("--seed", type=int, default=0)
    ex.set_defaults(func=cmd_synthbench)

    sp = sub.add_parser("sharpness", help="loss-fluctuation probes")
    common(sp)
    sp.add_argument("--mode", choices=("gaussian-noise", "re-init"), default="gaussian-noise")
    sp.add_argument("--adapters", default=None)
    sp.add_argument("--sam-target", dest="sam_target", default=None,
                    choices=("none", "whole-model", "dfn-only", "svn"))
    sp.set_defaults(func=cmd_sharpness)

    sp = sub.add_parser("report", help="re-emit saved JSON reports as csv and markdown tables")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", default="runs")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
