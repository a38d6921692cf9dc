"""``hemisit`` command line.

Precedence for every setting: built-in default < ``--config`` JSON file <
command-line flag.  The resolved configuration is printed to stderr and
written to ``<out>/config.json`` before any computation starts.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .data import TASKS, SynthSpec, make_dataset, read_manifest, read_volume
from .errors import ConfigurationError, InputError, NonFiniteError
from .gradcam import LAYERS, export_heatmap, gradcam
from .model import VARIANTS
from .train import ModelConfig, build_model, evaluate, run_variant

log = logging.getLogger("hemisit")

PATH_KEYS = ("dataset_root", "manifest", "out_dir")
EXTRA_KEYS = ("paper_scale", "n_per_class", "fractions", "task")
PAPER_PATCH = 25

# flag dest -> config key
FLAG_KEYS = {
    "seed": "seed", "variant": "variant", "patch_size": "patch_size", "units": "n_units",
    "heads": "n_heads", "lam": "lambda", "gam": "gamma", "epochs": "epochs",
    "batch_size": "batch_size", "out": "out_dir", "data_root": "dataset_root",
    "manifest": "manifest", "paper_scale": "paper_scale", "n_per_class": "n_per_class",
    "fractions": "fractions", "task": "task",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def default_run_config():
    cfg = ModelConfig().to_dict()
    cfg.update({"dataset_root": "data", "manifest": None, "out_dir": "runs/latest",
                "paper_scale": False, "n_per_class": 100, "fractions": [0.7, 0.15, 0.15], "task": "ad_cn"})
    return cfg


def resolve_config(args):
    cfg = default_run_config()
    file_cfg = {}
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a flat JSON object")
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update(file_cfg)
    for dest, key in FLAG_KEYS.items():
        val = getattr(args, dest, None)
        if val is not None and val is not False:
            cfg[key] = val
    if isinstance(cfg["fractions"], str):
        cfg["fractions"] = [float(x) for x in cfg["fractions"].split(",")]
    if cfg["paper_scale"] and getattr(args, "patch_size", None) is None and "patch_size" not in file_cfg:
        cfg["patch_size"] = PAPER_PATCH
    if cfg["task"] not in TASKS:
        raise UsageError(f"unknown task {cfg['task']!r}")
    return cfg


def model_config(cfg) -> ModelConfig:
    return ModelConfig.from_dict({k: cfg[k] for k in ModelConfig.keys()})


def synth_spec(cfg, task=None) -> SynthSpec:
    return SynthSpec.for_task(task or cfg["task"], paper_scale=cfg["paper_scale"], seed=cfg["seed"])


def announce(cfg, out_dir=None):
    text = json.dumps(cfg, indent=2, sort_keys=True)
    print(text, file=sys.stderr)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(text + "\n")


def manifest_for(cfg, root=None):
    root = Path(root or cfg["dataset_root"])
    path = Path(cfg["manifest"]) if cfg["manifest"] else root / "manifest.jsonl"
    if not path.exists():
        raise InputError(f"manifest {path} not found; run `hemisit gen` first")
    return read_manifest(path, root)


def ensure_dataset(cfg, root, task):
    root = Path(root)
    if (root / "manifest.jsonl").exists():
        return read_manifest(root / "manifest.jsonl", root)
    return make_dataset(synth_spec(cfg, task), cfg["n_per_class"], cfg["fractions"], seed=cfg["seed"], root=root)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(args, cfg):
    root = Path(cfg["dataset_root"])
    announce(cfg, root)
    man = make_dataset(synth_spec(cfg), cfg["n_per_class"], cfg["fractions"], seed=cfg["seed"], root=root)
    counts = {s: len(man.split(s)) for s in ("train", "val", "test")}
    print(json.dumps({"manifest": str(root / "manifest.jsonl"), **counts}))


def _progress(rec):
    print(json.dumps(rec), file=sys.stderr, flush=True)


def cmd_train(args, cfg):
    out = Path(cfg["out_dir"])
    announce(cfg, out)
    mcfg = model_config(cfg)
    man = manifest_for(cfg)
    _, _, report = run_variant(mcfg, man, out_dir=out, on_epoch=_progress)
    print(report.to_json())


def _load_model(cfg, checkpoint):
    model = build_model(model_config(cfg))
    model.load_state_dict(load_checkpoint(checkpoint))
    return model


def cmd_eval(args, cfg):
    announce(cfg)
    model = _load_model(cfg, args.checkpoint)
    man = manifest_for(cfg)
    vols, labels = man.load_split(args.split)
    print(evaluate(model, vols, labels).to_json())


def cmd_ablate(args, cfg):
    out = Path(cfg["out_dir"])
    announce(cfg, out)
    tasks = args.tasks.split(",")
    rows = {}
    for task in tasks:
        root = Path(cfg["dataset_root"]) / task
        man = ensure_dataset(cfg, root, task)
        for variant in VARIANTS:
            run_cfg = dict(cfg, variant=variant)
            t0 = time.perf_counter()
            _, _, rep = run_variant(model_config(run_cfg), man, out_dir=out / task / variant)
            log.info("%s %s done in %.0fs", task, variant, time.perf_counter() - t0)
            rows.setdefault(variant, {})[task] = rep.to_dict()
    table = ablation_table(rows, tasks)
    (out / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    (out / "ablation.md").write_text(table + "\n")
    print(table)


METRIC_KEYS = ("acc", "sen", "spe", "auc")


def _fmt(v):
    return "  n/a" if v is None else f"{100 * v:6.2f}"


def ablation_table(rows, tasks):
    head = "| method | " + " | ".join(f"{t} {m.upper()}" for t in tasks for m in METRIC_KEYS) + " |"
    sep = "|---" * (1 + len(tasks) * len(METRIC_KEYS)) + "|"
    lines = [head, sep]
    for i, variant in enumerate(VARIANTS, 1):
        if variant not in rows:
            continue
        cells = [_fmt(rows[variant][t][m]) for t in tasks for m in METRIC_KEYS]
        lines.append(f"| {i}-{variant} | " + " | ".join(cells) + " |")
    return "\n".join(lines)


SWEEP_PARAMS = ("units", "heads", "units_heads", "patch_size", "lambda", "gamma")


def sweep_settings(param, values):
    """Config overrides for each sweep point."""
    out = []
    for raw in values.split(","):
        raw = raw.strip()
        if param == "units":
            out.append({"n_units": int(raw)})
        elif param == "heads":
            out.append({"n_heads": int(raw)})
        elif param == "units_heads":
            u, h = raw.lower().split("x")
            out.append({"n_units": int(u), "n_heads": int(h)})
        elif param == "patch_size":
            out.append({"patch_size": int(raw)})
        elif param == "lambda":
            out.append({"lambda": float(raw), "gamma": 0.0})
        elif param == "gamma":
            out.append({"gamma": float(raw), "lambda": 0.0})
        else:
            raise UsageError(f"unknown sweep parameter {param!r}; expected one of {', '.join(SWEEP_PARAMS)}")
    return out


def report_params(mcfg: ModelConfig):
    """Trainable scalar counts per module group plus the total."""
    counts = build_model(mcfg).param_counts()
    counts["total"] = sum(counts.values())
    return counts


def cmd_sweep(args, cfg):
    out = Path(cfg["out_dir"])
    announce(cfg, out)
    points = sweep_settings(args.param, args.values)
    man = ensure_dataset(cfg, Path(cfg["dataset_root"]), cfg["task"])
    results = []
    for point in points:
        run_cfg = dict(cfg, **point)
        mcfg = model_config(run_cfg)
        tag = "_".join(f"{k}{v}" for k, v in point.items())
        _, _, rep = run_variant(mcfg, man, out_dir=out / tag)
        row = {"setting": point, **rep.to_dict()}
        if args.param == "patch_size":
            row["params"] = report_params(mcfg)
        results.append(row)
        print(json.dumps(row), flush=True)
    (out / "sweep.json").write_text(json.dumps({"param": args.param, "results": results}, indent=2) + "\n")


def cmd_gradcam(args, cfg):
    announce(cfg)
    model = _load_model(cfg, args.checkpoint)
    vol = read_volume(args.volume)
    heat = gradcam(model, vol, args.target, layer=args.layer)
    dest = Path(args.output) if args.output else Path(cfg["out_dir"]) / (Path(args.volume).stem + "_heatmap.sitvol")
    dest.parent.mkdir(parents=True, exist_ok=True)
    path, side = export_heatmap(heat, dest, source_path=args.volume)
    print(json.dumps({"heatmap": str(path), "sidecar": str(side), "zero_map": heat.zero_map}))


def cmd_selftest(args, cfg):
    from .selftest import run

    if not run(seeds=args.seeds):
        raise RuntimeError("selftest failed")


def cmd_params(args, cfg):
    announce(cfg)
    print(json.dumps(report_params(model_config(cfg)), indent=2))


COMMANDS = {
    "gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
    "sweep": cmd_sweep, "gradcam": cmd_gradcam, "selftest": cmd_selftest, "params": cmd_params,
}


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH")
    common.add_argument("--out", metavar="DIR")
    common.add_argument("--data-root", metavar="DIR")
    common.add_argument("--manifest", metavar="PATH")
    common.add_argument("--seed", type=int)
    common.add_argument("--variant", choices=VARIANTS)
    common.add_argument("--patch-size", type=int)
    common.add_argument("--units", type=int)
    common.add_argument("--heads", type=int)
    common.add_argument("--lambda", dest="lam", type=float)
    common.add_argument("--gamma", dest="gam", type=float)
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch-size", type=int)
    common.add_argument("--paper-scale", action="store_true", default=None,
                        help="121x145x121 geometry with patch size 25")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="hemisit", description="Symmetry-interactive transformer on hemispheric patches.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    p = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--n-per-class", type=int)
    p.add_argument("--fractions", help="train,val,test fractions, e.g. 0.7,0.15,0.15")
    p.add_argument("--task", choices=tuple(TASKS))
    sub.add_parser("train", parents=[common], help="train one variant")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p = sub.add_parser("ablate", parents=[common], help="train all six variants on both tasks")
    p.add_argument("--tasks", default="ad_cn,pmci_smci")
    p.add_argument("--n-per-class", type=int)
    p = sub.add_parser("sweep", parents=[common], help="parameter study")
    p.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    p.add_argument("--values", required=True)
    p.add_argument("--task", choices=tuple(TASKS))
    p.add_argument("--n-per-class", type=int)
    p = sub.add_parser("gradcam", parents=[common], help="export a Grad-CAM heatmap")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--target", type=int, default=1, choices=(0, 1))
    p.add_argument("--output", metavar="PATH")
    p.add_argument("--layer", default="last", choices=LAYERS,
                   help="token layer: transformer output (default) or encoder tokens")
    p = sub.add_parser("selftest", parents=[common], help="run the built-in invariant suite")
    p.add_argument("--seeds", type=int, default=5)
    sub.add_parser("params", parents=[common], help="print parameter counts")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if not argv:
            raise UsageError("no command given")
        args = parser.parse_args(argv)
        if args.command not in COMMANDS:
            raise UsageError(f"unknown command {args.command!r}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
        model_config(cfg)  # validate before any work
    except (UsageError, ConfigurationError) as exc:
        print(parser.format_usage(), file=sys.stderr, end="")
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, NonFiniteError, OSError, RuntimeError) as exc:  # library errors are ValueErrors
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
