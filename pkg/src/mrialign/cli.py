"""Command-line entry point: ``mrialign {gen,pretrain,finetune,evaluate}``.

Settings resolve as CLI flag > config file (flat ``key = value`` lines) >
built-in default. Every run writes a manifest JSON with the effective config,
the seed streams, the git description and SHA-256 hashes of all artifacts.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import subprocess
import sys
import time
from pathlib import Path

from . import containers
from .evaluation import METRICS, MetricsReport, evaluate_experiment
from .synthdata import DatasetSpec, generate_dataset
from .training import ABLATION_MODES, TrainRunConfig, finetune, pretrain

MANIFEST_VERSION = 1


class UsageError(Exception):
    """Bad flags or config keys; exit status 2."""


# ---------------------------------------------------------------- config files

def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` text; blank lines and ``#`` comments are ignored."""
    values = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _coerce(value: str, default):
    if isinstance(default, bool):
        lowered = str(value).lower()
        if lowered in ("1", "true", "on", "yes"):
            return True
        if lowered in ("0", "false", "off", "no"):
            return False
        raise UsageError(f"expected on/off, got {value!r}")
    if isinstance(default, tuple):
        return tuple(int(v) for v in str(value).replace("x", ",").split(","))
    return type(default)(value)


def resolve(defaults: dict, file_values: dict[str, str], cli_values: dict) -> dict:
    """Merge the three layers; unknown file keys are a usage error."""
    unknown = set(file_values) - set(defaults)
    if unknown:
        raise UsageError(f"unknown config keys {sorted(unknown)}; valid keys: {sorted(defaults)}")
    merged = dict(defaults)
    for key, value in file_values.items():
        merged[key] = _coerce(value, defaults[key])
    for key, value in cli_values.items():
        if value is not None:
            merged[key] = _coerce(value, defaults[key]) if isinstance(value, str) else value
    return merged


def _field_defaults(cls) -> dict:
    return {f.name: (f.default if f.default is not dataclasses.MISSING else f.default_factory())
            for f in dataclasses.fields(cls)}


# ---------------------------------------------------------------- manifests

def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def write_manifest(path: Path, command: str, config_path, seed: int, output_dir: Path,
                   effective: dict, artifacts: list[Path], started: float,
                   streams=("init", "shuffle", "sampler", "dropout", "data")) -> None:
    manifest = {
        "format": "mrialign-manifest", "version": MANIFEST_VERSION,
        "command": command,
        "config_path": str(config_path) if config_path else None,
        "seed": seed,
        "seed_streams": list(streams),
        "output_dir": str(output_dir),
        "git_describe": git_describe(),
        "wall_time_s": round(time.time() - started, 3),
        "effective_config": {k: list(v) if isinstance(v, tuple) else v for k, v in effective.items()},
        "artifacts": {p.name: containers.file_sha256(p) for p in artifacts},
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands

GEN_FLAGS = {"n": "n_patients", "dims": "dims", "vocab": "vocab_size", "balance": "class_balance",
             "seed": "seed", "shift": "shift"}
PRETRAIN_FLAGS = {"mode": "ablation_mode", "epochs": "pretrain_epochs", "batch": "batch_size", "margin": "margin",
                  "location_coef": "location_coef", "neg": "strategy", "lr": "lr", "seed": "seed"}
FINETUNE_FLAGS = {"folds": "folds", "epochs": "finetune_epochs", "batch": "batch_size", "lr": "finetune_lr",
                  "seed": "seed"}


def _cli_layer(args, flags: dict[str, str]) -> dict:
    return {field: getattr(args, flag) for flag, field in flags.items()}


def cmd_gen(args) -> list[Path]:
    started = time.time()
    defaults = _field_defaults(DatasetSpec)
    file_values = read_config_file(args.config) if args.config else {}
    eff = resolve(defaults, file_values, _cli_layer(args, GEN_FLAGS))
    spec = DatasetSpec(**eff)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    containers.save_dataset(out, spec, generate_dataset(spec))
    manifest = out.with_name(out.name + ".manifest.json")
    write_manifest(manifest, "gen", args.config, spec.seed, out.parent, spec.to_dict(), [out], started)
    return [out, manifest]


def _run_config(args, flags) -> tuple[TrainRunConfig, dict]:
    defaults = _field_defaults(TrainRunConfig)
    file_values = read_config_file(args.config) if args.config else {}
    eff = resolve(defaults, file_values, _cli_layer(args, flags))
    try:
        return TrainRunConfig(**eff), eff
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _load_records(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"dataset not found: {path}")
    return containers.load_dataset(path)


def cmd_pretrain(args) -> list[Path]:
    started = time.time()
    run, eff = _run_config(args, PRETRAIN_FLAGS)
    spec, records = _load_records(args.data)
    result = pretrain(records, run, vocab_size=spec.vocab_size)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, traj, cfg = out / "checkpoint.bin", out / "trajectory.csv", out / "run_config.txt"
    containers.save_checkpoint(ckpt, result.params, {"run": eff, "dims": list(spec.dims),
                                                     "vocab_size": spec.vocab_size})
    traj.write_text(result.trajectory_csv())
    cfg.write_text(run.to_text())
    write_manifest(out / "manifest.json", "pretrain", args.config, run.seed, out,
                   {**eff, "data": str(args.data)}, [ckpt, traj, cfg], started)
    return [ckpt, traj, cfg, out / "manifest.json"]


def parse_init(value: str):
    """``random`` or ``pretrained:PATH`` -> checkpoint path or None."""
    if value == "random":
        return None
    if value.startswith("pretrained:") and len(value) > len("pretrained:"):
        return Path(value.split(":", 1)[1])
    raise UsageError(f"--init must be 'random' or 'pretrained:PATH', got {value!r}")


def _fold_csv(results, split: str) -> str:
    lines = ["fold," + ",".join(METRICS)]
    for r in results:
        row = getattr(r, split)
        lines.append(f"{r.fold}," + ",".join(repr(float(row[m])) for m in METRICS))
    return "\n".join(lines) + "\n"


def cmd_finetune(args) -> list[Path]:
    started = time.time()
    run, eff = _run_config(args, FINETUNE_FLAGS)
    ckpt_path = parse_init(args.init)
    init = None
    if ckpt_path is not None:
        if not ckpt_path.is_file():
            raise FileNotFoundError(f"checkpoint not found: {ckpt_path}")
        _, init = containers.load_checkpoint(ckpt_path)
    spec, records = _load_records(args.data)
    external = _load_records(args.external)[1] if args.external else None
    results = finetune(records, run, init=init, external=external, vocab_size=spec.vocab_size, keep_params=True)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    name = args.name or ("random" if ckpt_path is None else ckpt_path.parent.name or "pretrained")
    report = MetricsReport()
    report.add(evaluate_experiment(name, [r.internal for r in results],
                                   [r.external for r in results] if external else None))
    artifacts = [out / "metrics.json", out / "folds_internal.csv"]
    artifacts[0].write_text(report.to_json() + "\n")
    artifacts[1].write_text(_fold_csv(results, "internal"))
    if external:
        artifacts.append(out / "folds_external.csv")
        artifacts[-1].write_text(_fold_csv(results, "external"))
    for r in results:
        path = out / f"fold{r.fold}.bin"
        containers.save_checkpoint(path, r.params, {"fold": r.fold, "run": eff})
        artifacts.append(path)
    write_manifest(out / "manifest.json", "finetune", args.config, run.seed, out,
                   {**eff, "init": args.init, "data": str(args.data), "external": args.external, "name": name},
                   artifacts, started)
    return artifacts + [out / "manifest.json"]


CLASSIFICATION = ("auc", "precision", "recall", "f1")
EXPLAINABILITY = ("dice2d", "dice3d")


def cmd_evaluate(args) -> list[Path]:
    started = time.time()
    report = MetricsReport()
    for path in args.results:
        path = Path(path)
        path = path / "metrics.json" if path.is_dir() else path
        if not path.is_file():
            raise FileNotFoundError(f"metrics file not found: {path}")
        for summary in MetricsReport.from_dict(json.loads(path.read_text())).experiments.values():
            if summary.name in report.experiments:
                raise UsageError(f"duplicate experiment name {summary.name!r} (from {path})")
            report.add(summary)
    names = list(report.experiments)
    pairs = [tuple(p.split(":", 1)) for p in args.compare] if args.compare else \
        [(names[0], other) for other in names[1:]]
    for a, b in pairs:
        for n in (a, b):
            if n not in report.experiments:
                raise UsageError(f"unknown experiment {n!r}; known: {names}")
        for split in ("internal", "external"):
            if report.experiments[a].split(split) and report.experiments[b].split(split):
                report.compare(a, b, split, [m for m in METRICS if m in report.experiments[a].split(split)])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts, text = [], []
    for split in ("internal", "external"):
        if not any(e.split(split) for e in report.experiments.values()):
            continue
        for label, metrics in (("classification", CLASSIFICATION), ("explainability", EXPLAINABILITY)):
            path = out / f"{label}_{split}.csv"
            path.write_text(report.table_csv(split, metrics))
            artifacts.append(path)
            text.append(report.render_table(split, metrics, title=f"{label.capitalize()} ({split})"))
    (out / "ttests.csv").write_text(report.ttest_csv())
    (out / "tables.txt").write_text("\n".join(text))
    (out / "report.json").write_text(report.to_json() + "\n")
    artifacts += [out / "ttests.csv", out / "tables.txt", out / "report.json"]
    write_manifest(out / "manifest.json", "evaluate", None, 0, out,
                   {"results": [str(p) for p in args.results], "compare": [f"{a}:{b}" for a, b in pairs]},
                   artifacts, started)
    print("\n".join(text), end="")
    return artifacts + [out / "manifest.json"]


# ---------------------------------------------------------------- parser

def _help(text: str, default) -> str:
    return f"{text} (default: {default})"


def build_parser() -> argparse.ArgumentParser:
    ds, tr = _field_defaults(DatasetSpec), _field_defaults(TrainRunConfig)
    parser = argparse.ArgumentParser(prog="mrialign", description="MRI-report contrastive alignment toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic paired dataset")
    g.add_argument("--config", help=_help("flat key = value file of DatasetSpec fields", None))
    g.add_argument("--n", type=int, help=_help("number of patients", ds["n_patients"]))
    g.add_argument("--dims", help=_help("volume dims as D,H,W", ",".join(map(str, ds["dims"]))))
    g.add_argument("--vocab", type=int, help=_help("vocabulary size", ds["vocab_size"]))
    g.add_argument("--balance", type=float, help=_help("fraction of label-1 patients", ds["class_balance"]))
    g.add_argument("--seed", type=int, help=_help("master seed", ds["seed"]))
    g.add_argument("--shift", choices=("on", "off"), help=_help("external-scanner distribution shift", "off"))
    g.add_argument("--out", required=True, help="output dataset file")
    g.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain", help="contrastive pretraining")
    p.add_argument("--config", help=_help("flat key = value file of run config fields", None))
    p.add_argument("--data", required=True, help="dataset file from 'gen'")
    p.add_argument("--mode", choices=ABLATION_MODES, help=_help("loss variant", tr["ablation_mode"]))
    p.add_argument("--epochs", type=int, help=_help("pretraining epochs", tr["pretrain_epochs"]))
    p.add_argument("--batch", type=int, help=_help("batch size", tr["batch_size"]))
    p.add_argument("--margin", type=float, help=_help("triplet margin", tr["margin"]))
    p.add_argument("--location-coef", type=float, help=_help("same-location coefficient", tr["location_coef"]))
    p.add_argument("--neg", help=_help("negative sampling: random, semihard:S or hard", tr["strategy"]))
    p.add_argument("--lr", type=float, help=_help("learning rate", tr["lr"]))
    p.add_argument("--seed", type=int, help=_help("master seed", tr["seed"]))
    p.add_argument("--out-dir", required=True, help="run directory")
    p.set_defaults(func=cmd_pretrain)

    f = sub.add_parser("finetune", help="k-fold marker classification fine-tuning")
    f.add_argument("--config", help=_help("flat key = value file of run config fields", None))
    f.add_argument("--data", required=True, help="training dataset file")
    f.add_argument("--external", help=_help("external (shifted) dataset file", None))
    f.add_argument("--init", default="random", help=_help("random or pretrained:PATH", "random"))
    f.add_argument("--folds", type=int, help=_help("cross-validation folds", tr["folds"]))
    f.add_argument("--epochs", type=int, help=_help("fine-tuning epochs", tr["finetune_epochs"]))
    f.add_argument("--batch", type=int, help=_help("batch size", tr["batch_size"]))
    f.add_argument("--lr", type=float, help=_help("base learning rate", tr["finetune_lr"]))
    f.add_argument("--seed", type=int, help=_help("master seed", tr["seed"]))
    f.add_argument("--name", help=_help("experiment name in the metrics file", "derived from --init"))
    f.add_argument("--out-dir", required=True, help="run directory")
    f.set_defaults(func=cmd_finetune)

    e = sub.add_parser("evaluate", help="result tables and paired t-tests")
    e.add_argument("results", nargs="+", help="metrics.json files or finetune run directories")
    e.add_argument("--compare", action="append", help=_help("experiment pair A:B, repeatable", "first vs each other"))
    e.add_argument("--out-dir", required=True, help="output directory")
    e.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "shift", None) is not None:
        args.shift = args.shift == "on"
    try:
        args.func(args)
    except UsageError as exc:
        print(f"mrialign {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - one-line diagnostic is the contract
        print(f"mrialign {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
