"""Command-line interface.

Subcommands: ``train`` (build the model zoo), ``attack`` (craft examples
for one variant, dumping images and diagnostics), ``probe-crop`` (the
crop-invariance probe), ``bench`` (the full transfer sweep) and
``verify`` (the invariant/oracle suites). Every run echoes its fully
resolved configuration, defaults included.

Perturbation sizes are given in [0, 1] pixel units; pass ``--pixel-scale
255`` to write them on the conventional 0..255 scale instead (so
``--epsilon 16 --pixel-scale 255`` resolves to 16/255).

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import VARIANTS, attack_config
from .autodiff import Tensor
from .config import (
    dataset_from_config,
    load_config,
    load_zoo,
    save_zoo,
    zoo_from_config,
)
from .data import select_correctly_classified, stack_examples, write_ppm
from .errors import AdvcraftError, ConfigError
from .evaluate import (
    BENCH_AUGS,
    BENCH_BASES,
    EvalConfig,
    config_hash,
    craft_batched,
    emit_probe_report,
    emit_report,
    run_attack_eval,
    run_bench,
    run_probe,
)
from .models import accuracy


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors, per the CLI contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _render(value):
    if isinstance(value, float):
        text = f"{value:.6f}".rstrip("0").rstrip(".")
        return text if text else "0"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_render(v) for v in value) + "]"
    return str(value)


def _echo(title: str, mapping: dict) -> None:
    print(f"{title}:")
    for key in sorted(mapping):
        print(f"  {key} = {_render(mapping[key])}")


def _resolved_attack(args, cfg: dict):
    overrides = dict(cfg.get("attack", {}))
    scale = getattr(args, "pixel_scale", 1.0)
    for flag in ("epsilon", "alpha"):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[flag] = value / scale
    for flag in ("iterations", "seed", "copies", "mu"):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[flag] = value
    return attack_config(args.variant, **overrides)


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    _echo("resolved dataset config", cfg["dataset"])
    _echo("resolved zoo config", cfg["zoo"])
    data = dataset_from_config(cfg)
    holdout = dataset_from_config(cfg, holdout=True)
    zoo = zoo_from_config(cfg, data)
    save_zoo(zoo, args.out)
    for name in sorted(zoo):
        print(f"{name}: train accuracy {accuracy(zoo[name], data):.4f}, "
              f"holdout accuracy {accuracy(zoo[name], holdout):.4f}")
    print(f"saved {len(zoo)} checkpoints to {args.out}")
    return 0


def _cmd_attack(args) -> int:
    cfg = load_config(args.config)
    zoo = load_zoo(args.zoo)
    attack = _resolved_attack(args, cfg)
    _echo("resolved attack config", asdict(attack))
    sources = args.source
    for name in sources:
        if name not in zoo:
            raise ConfigError(f"model {name!r} not in the zoo ({', '.join(sorted(zoo))})")
    if len(sources) == 1:
        target = zoo[sources[0]]
    else:
        from .attacks import EnsembleSpec
        target = EnsembleSpec.equal([zoo[s] for s in sources])
    holdout = dataset_from_config(cfg, holdout=True)
    filter_models = list(zoo.values()) if cfg["eval"]["selection"] == "all" \
        else [zoo[s] for s in sources]
    examples = select_correctly_classified(filter_models, holdout, args.count,
                                           cfg["eval"]["seed"])
    images, labels = stack_examples(examples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    diagnostics: list = []
    adv = craft_batched(target, images, labels, attack,
                        batch=cfg["eval"]["batch"], workers=args.workers,
                        diagnostics=diagnostics)
    for i in range(adv.shape[0]):
        write_ppm(Tensor(adv[i]), out / f"{i}_{attack.variant}.ppm")
    with open(out / f"diagnostics_{attack.variant}.jsonl", "w", encoding="utf-8") as fh:
        for record in diagnostics:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    with open(out / f"config_{attack.variant}.json", "w", encoding="utf-8") as fh:
        json.dump({"attack": asdict(attack), "hash": config_hash(attack)},
                  fh, sort_keys=True, indent=2)
    linf = float(np.abs(adv - images).max())
    print(f"crafted {adv.shape[0]} adversarial examples "
          f"(max perturbation {linf:.6f}) into {out}")
    return 0


def _cmd_probe_crop(args) -> int:
    cfg = load_config(args.config)
    zoo = load_zoo(args.zoo)
    if args.model not in zoo:
        raise ConfigError(f"model {args.model!r} not in the zoo ({', '.join(sorted(zoo))})")
    holdout = dataset_from_config(cfg, holdout=True)
    _echo("resolved probe config", {"model": args.model, "seed": args.seed,
                                    "examples": len(holdout)})
    report = run_probe(zoo[args.model], holdout, seed=args.seed)
    emit_probe_report(report, args.out)
    for width, loss, acc in report.rows:
        print(f"width {width:3d}: mean loss {loss:.6f}, accuracy {acc:.4f}")
    print(f"wrote {args.out}")
    return 0


def _cmd_bench(args) -> int:
    cfg = load_config(args.config)
    zoo = load_zoo(args.zoo)
    holdout = dataset_from_config(cfg, holdout=True)
    eval_cfg = cfg["eval"]
    seed = args.seed if args.seed is not None else eval_cfg["seed"]
    bases = args.bases or list(BENCH_BASES)
    augs = args.augs or list(BENCH_AUGS)
    _echo("resolved bench config", {
        "examples": eval_cfg["examples"], "selection": eval_cfg["selection"],
        "seed": seed, "batch": eval_cfg["batch"], "bases": bases, "augs": augs,
        "sources": args.sources or sorted(zoo), "ensemble": not args.no_ensemble,
        "workers": args.workers, **cfg.get("attack", {}),
    })
    reports = run_bench(
        zoo, holdout, examples=eval_cfg["examples"], seed=seed,
        batch=eval_cfg["batch"], bases=bases, augs=augs,
        sources=args.sources, include_ensemble=not args.no_ensemble,
        selection=eval_cfg["selection"],
        attack_overrides=dict(cfg.get("attack", {})), workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    emit_report(reports, "csv", out / "bench.csv")
    emit_report(reports, "json", out / "bench.json")
    print(f"wrote {out / 'bench.csv'} and {out / 'bench.json'} "
          f"({len(reports)} attack/source cells)")
    return 0


def _cmd_verify(args) -> int:
    from .verify import run_all

    results = run_all(workdir=args.workdir, quick=args.quick,
                      config_path=args.config)
    failed = [r for r in results if not r.passed]
    return 0 if not failed else 2


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="advcraft",
                     description="Craft adversarial examples and benchmark their transferability.")
    parser.add_argument("--version", action="version", version=f"advcraft {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train and checkpoint the model zoo")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--out", required=True, help="checkpoint output directory")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("attack", help="craft adversarial examples for one variant")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--zoo", required=True, help="checkpoint directory from `train`")
    p.add_argument("--variant", required=True, choices=sorted(VARIANTS),
                   help="attack variant preset")
    p.add_argument("--source", nargs="+", default=["cnn-a"],
                   help="source model name(s); several build an equal-weight ensemble")
    p.add_argument("--count", type=int, default=8, help="number of examples to craft")
    p.add_argument("--out", required=True, help="output directory for images/diagnostics")
    p.add_argument("--epsilon", type=float, help="perturbation budget (see --pixel-scale)")
    p.add_argument("--alpha", type=float, help="step size (see --pixel-scale)")
    p.add_argument("--pixel-scale", type=float, default=1.0,
                   help="divide --epsilon/--alpha by this (255 for 0..255 units)")
    p.add_argument("--iterations", type=int, help="iteration count T")
    p.add_argument("--mu", type=float, help="momentum decay factor")
    p.add_argument("--copies", type=int, help="transformed copies per step")
    p.add_argument("--seed", type=int, help="attack seed")
    p.add_argument("--workers", type=int, default=1, help="parallel crafting workers")
    p.set_defaults(fn=_cmd_attack)

    p = sub.add_parser("probe-crop", help="crop-invariance probe (loss/accuracy vs crop width)")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--zoo", required=True, help="checkpoint directory from `train`")
    p.add_argument("--model", required=True, help="model to probe")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(fn=_cmd_probe_crop)

    p = sub.add_parser("bench", help="full transfer benchmark sweep")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--zoo", required=True, help="checkpoint directory from `train`")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--seed", type=int, help="override the eval seed")
    p.add_argument("--bases", nargs="+", choices=BENCH_BASES, help="restrict base attacks")
    p.add_argument("--augs", nargs="+", choices=BENCH_AUGS, help="restrict augmentations")
    p.add_argument("--sources", nargs="+", help="restrict single-source models")
    p.add_argument("--no-ensemble", action="store_true", help="skip the ensemble source")
    p.add_argument("--workers", type=int, default=1, help="parallel crafting workers")
    p.set_defaults(fn=_cmd_bench)

    p = sub.add_parser("verify", help="run the invariant/oracle verification suites")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--workdir", default="advcraft-verify",
                   help="cache directory for the trained zoo")
    p.add_argument("--quick", action="store_true",
                   help="fast checks only (skips trained-model criteria)")
    p.set_defaults(fn=_cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except AdvcraftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
