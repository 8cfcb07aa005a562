"""Command-line entry point: ``cganet {train,eval,ablate,analyze,gen-data}``.

Every command writes ``run.json`` into its output directory with the full
config snapshot, the seed, the command line and SHA-256 hashes of every
artifact it produced.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError
from .complexity import GraphError, analyze, load_graph, preset, PRESETS
from .config import ABLATION_ROWS, ConfigError, RunConfig
from .data import VolumeFormatError, file_sha256, is_writable_dir, write_dataset
from .metrics import format_report, json_safe, write_report
from .sam import LabelError
from .tensor import NumericError, ShapeError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_OUTPUT = 5

log = logging.getLogger("cganet")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# Flag name -> config key.
_OVERRIDES = {
    "seed": "train.seed",
    "epochs": "train.epochs",
    "sam_residual": "sam.residual",
    "sam_intra_classes": "sam.intra_classes",
    "inter_sign": "inter.sign",
    "loss_inter_weight": "loss.inter_weight",
    "switch_epoch": "schedule.switch_epoch",
    "scale": "model.scale",
    "folds": "data.folds",
    "data": "data.dir",
    "count_mode": "analyze.count_mode",
}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of dotted config keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--data", help="dataset directory written by gen-data (default: in-memory phantoms)")
    p.add_argument("--sam.residual", dest="sam_residual", choices=["true", "false"])
    p.add_argument("--sam.intra-classes", dest="sam_intra_classes", help='label values, e.g. "1,4", or "all"')
    p.add_argument("--inter.sign", dest="inter_sign", choices=["maximize", "minimize"])
    p.add_argument("--loss.inter-weight", dest="loss_inter_weight", type=float)
    p.add_argument("--switch-epoch", dest="switch_epoch", type=int)
    p.add_argument("--scale", type=int, help="channel-width divisor (1 = full width)")
    p.add_argument("--folds", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cganet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"cganet {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model")
    _add_run_flags(p)

    p = sub.add_parser("eval", help="score a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--data", help="dataset directory (default: the phantoms the checkpoint was trained on)")
    p.add_argument("--split", choices=["val", "train", "all"], default="val")
    p.add_argument("--scale", type=int, help="build the model at this width divisor instead of the stored one")
    p.add_argument("--dump-heatmaps", action="store_true", help="write attention and feature volumes per case")
    p.add_argument("--out")

    p = sub.add_parser("ablate", help="run the ablation rows over folds or seeds")
    _add_run_flags(p)
    p.add_argument("--rows", nargs="+", choices=list(ABLATION_ROWS), metavar="ROW",
                   help="subset of rows (default: all eight)")
    p.add_argument("--seeds", nargs="+", type=int, help="repeat over seeds on one split instead of over folds")

    p = sub.add_parser("analyze", help="static FLOPs/parameter report")
    p.add_argument("target", help=f"preset ({', '.join(PRESETS)}) or graph JSON file")
    p.add_argument("--count-mode", dest="count_mode", choices=["fma", "flop"])
    p.add_argument("--config")
    p.add_argument("--out")

    p = sub.add_parser("gen-data", help="write a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--n-cases", dest="n_cases", type=int)
    p.add_argument("--extent", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--folds", type=int)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    flat = cfg.to_flat()
    flat["task"] = args.command
    for attr, key in _OVERRIDES.items():
        value = getattr(args, attr, None)
        if value is not None:
            flat[key] = value
    for item in getattr(args, "set", []) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        flat[k.strip()] = v.strip()
    if getattr(args, "out", None):
        flat["out.dir"] = args.out
    return RunConfig.from_flat(flat)


def _prepare_out(path) -> Path:
    out = Path(path)
    if not is_writable_dir(out):
        raise CliError(f"output directory {out} is not writable", EXIT_OUTPUT)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}", EXIT_OUTPUT) from exc
    return out


def write_manifest(out: Path, argv: list[str], cfg: RunConfig, extra: dict | None = None) -> Path:
    artifacts = {}
    for f in sorted(out.rglob("*")):
        if f.is_file() and f.name != "run.json":
            artifacts[str(f.relative_to(out))] = file_sha256(f)
    manifest = {
        "version": __version__,
        "command": argv[0] if argv else "",
        "argv": argv,
        "seed": cfg.seed,
        "config": cfg.to_flat(),
        "numpy": np.__version__,
        "artifacts": artifacts,
    }
    if extra:
        manifest.update(extra)
    path = out / "run.json"
    with open(path, "w") as fh:
        json.dump(json_safe(manifest), fh, indent=2, sort_keys=True)
    return path


def _check_data(cfg: RunConfig) -> None:
    if cfg.data_dir and not (Path(cfg.data_dir) / "manifest.json").exists():
        raise CliError(f"dataset {cfg.data_dir} not found (no manifest.json); run gen-data first", EXIT_DATA)


def cmd_train(args, argv) -> int:
    from .training import train

    cfg = resolve_config(args)
    _check_data(cfg)
    out = _prepare_out(cfg.out_dir)
    cfg.save(out / "config.json")
    res = train(cfg, out_dir=out, on_epoch=lambda r: print(_epoch_line(r), flush=True))
    write_manifest(out, argv, cfg, {"final_epoch": res.history[-1] if res.history else None})
    print(f"wrote {out}")
    return EXIT_OK


def _epoch_line(r: dict) -> str:
    keys = ["L_M", "L_A", "L_I", "total", "val_dice_fg_mean"]
    return f"epoch {r['epoch']:3d}  " + "  ".join(f"{k}={r[k]:.4f}" for k in keys if k in r)


def cmd_eval(args, argv) -> int:
    from .training import dataset_cases, evaluate, load_cases, model_from_checkpoint, split
    from .checkpoint import load_checkpoint, load_model_state
    from .network import build_cga_unet

    if args.scale is not None:
        ckpt = load_checkpoint(args.checkpoint)
        cfg = RunConfig.from_flat({**ckpt.meta.get("config", {}), "model.scale": args.scale})
        model = build_cga_unet(cfg.network_spec(), seed=cfg.seed, sam=cfg.sam_config())
        load_model_state(model, ckpt)
    else:
        model, ckpt, cfg = model_from_checkpoint(args.checkpoint)
    if args.data:
        cfg = cfg.replace(data_dir=args.data)
    _check_data(cfg)
    cases = dataset_cases(cfg.data_dir) if cfg.data_dir else load_cases(cfg)
    train_cases, val_cases = split(cases, cfg.val_fold)
    chosen = {"val": val_cases, "train": train_cases, "all": list(cases)}[args.split]
    out = _prepare_out(args.out or Path(args.checkpoint).parent / f"eval_{args.split}")
    result = evaluate(model, chosen, dump_dir=out / "heatmaps" if args.dump_heatmaps else None)
    write_report(out / "report.json", result["cases"], result["aggregate"], result["confidence_bins"])
    print(format_report(result["aggregate"], f"{args.split} split, {len(chosen)} cases"))
    print("confidence bins:", " ".join(f"{v:.4f}" for v in result["confidence_bins"]))
    write_manifest(out, argv, cfg, {"checkpoint": str(args.checkpoint),
                                    "checkpoint_sha256": file_sha256(args.checkpoint)})
    return EXIT_OK


def cmd_ablate(args, argv) -> int:
    from .training import format_ablation_table, run_ablation

    cfg = resolve_config(args)
    _check_data(cfg)
    out = _prepare_out(cfg.out_dir)
    cfg.save(out / "config.json")
    results = run_ablation(cfg, rows=args.rows, seeds=args.seeds, progress=lambda s: print(s, flush=True))
    table = format_ablation_table(results)
    print(table)
    (out / "ablation.txt").write_text(table + "\n")
    with open(out / "ablation.json", "w") as fh:
        json.dump(json_safe(results), fh, indent=2, sort_keys=True)
    write_manifest(out, argv, cfg)
    return EXIT_OK


def cmd_analyze(args, argv) -> int:
    cfg = resolve_config(args)
    target = args.target
    if target in PRESETS:
        nodes = preset(target)
    elif Path(target).exists():
        nodes = load_graph(target)
    else:
        raise CliError(f"unknown preset {target!r}; available: {', '.join(sorted(PRESETS))} "
                       f"(or pass a graph JSON file)", EXIT_CONFIG)
    report = analyze(nodes, cfg.count_mode)
    print(report.format_table(f"{target} (count mode {cfg.count_mode})"))
    if args.out:
        out = _prepare_out(args.out)
        with open(out / "cost.json", "w") as fh:
            json.dump(report.as_dict(), fh, indent=2, sort_keys=True)
        write_manifest(out, argv, cfg)
    return EXIT_OK


def cmd_gen_data(args, argv) -> int:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    changes = {k: v for k, v in (("n_cases", args.n_cases), ("phantom_extent", args.extent),
                                 ("phantom_seed", args.seed), ("folds", args.folds)) if v is not None}
    if args.extent is not None and "crop" not in changes:
        changes["crop"] = min(cfg.crop, args.extent)
    cfg = cfg.replace(task="gen-data", data_dir=args.out, **changes)
    out = _prepare_out(args.out)
    write_dataset(out, cfg.n_cases, cfg.phantom_spec(), cfg.folds, cfg.phantom_seed)
    write_manifest(out, argv, cfg)
    print(f"wrote {cfg.n_cases} cases to {out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "analyze": cmd_analyze,
            "gen-data": cmd_gen_data}


def main(argv: list[str] | None = None) -> int:
    from .training import TrainingDiverged

    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args, argv)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, GraphError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, VolumeFormatError, CheckpointError, LabelError, ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except PermissionError as exc:
        print(f"output error: {exc}", file=sys.stderr)
        return EXIT_OUTPUT


if __name__ == "__main__":
    sys.exit(main())
