"""Command line pipelines.

Five subcommands cover the workflow end to end: `datagen` writes a synthetic
dataset, `train` runs the two training stages and saves a checkpoint, `debug`
runs an interactive session (simulated annotator in process, or a human over
HTTP), `eval` scores a checkpoint, and `report` summarizes a run directory.

Settings come from an optional TOML or JSON config file with flag overrides
on top (`--set section.key=value`, repeatable). Every artifact-producing
command writes a run_manifest.json describing inputs and outputs. Exit codes:
0 success, 1 runtime failure (e.g. training diverged), 2 invalid config.
"""

from __future__ import annotations

import argparse
import functools
import json
import os
import sys
from pathlib import Path

import tomli

from . import __version__
from .data import (
    DatasetSpec,
    FormatError,
    GenerationError,
    context_swap,
    generate,
    load_dataset,
    save_dataset,
)
from .debugger import DebugConfig, DebugSession, oracle_annotator, run_session
from .errors import ConfigError, DataError
from .explain import prototype_activation_precision
from .losses import LossWeights
from .metrics import evaluate
from .model import ModelConfig, PartProtoNet, load_checkpoint, save_checkpoint
from .training import TrainConfig, train_stage1, train_stage2

CONFIG_ERRORS = (ConfigError, GenerationError, FormatError, DataError)

DEFAULT_PORT = 8414
PORT_ENV_VAR = "PARTPROTO_PORT"


# -- config plumbing ----------------------------------------------------------------


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    if p.suffix == ".toml":
        with open(p, "rb") as fh:
            return tomli.load(fh)
    if p.suffix == ".json":
        with open(p) as fh:
            return json.load(fh)
    raise ConfigError(f"config must be .toml or .json, got {p.suffix!r}")


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    """`section.key=value` assignments on top of the file; values parse as
    JSON where possible so numbers and lists come through typed."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, _, raw = item.partition("=")
        keys = dotted.strip().split(".")
        if not all(keys):
            raise ConfigError(f"override {item!r} has an empty key segment")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = config
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a non-table value")
        node[keys[-1]] = value
    return config


def _section(config: dict, name: str) -> dict:
    value = config.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"config section [{name}] must be a table")
    return dict(value)


def _build(cls, kwargs: dict, section: str):
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"config section [{section}]: {exc}") from exc


def _dataset_spec(config: dict, seed: int | None) -> DatasetSpec:
    kw = _section(config, "dataset")
    for key in ("confounded_classes", "confounder_colors", "glyph_sizes", "bg_range"):
        if key in kw:
            kw[key] = tuple(tuple(x) if isinstance(x, list) else x for x in kw[key])
    if seed is not None:
        kw["seed"] = seed
    spec = _build(DatasetSpec, kw, "dataset")
    spec.validate()
    return spec


def _model_config(config: dict, seed: int | None) -> ModelConfig:
    kw = _section(config, "model")
    if "conv_channels" in kw:
        kw["conv_channels"] = tuple(kw["conv_channels"])
    if seed is not None:
        kw["seed"] = seed
    cfg = _build(ModelConfig, kw, "model")
    cfg.validate()
    return cfg


def _train_config(config: dict, section: str = "train") -> TrainConfig:
    kw = _section(config, section)
    if "weights" in kw:
        kw["weights"] = _build(LossWeights, dict(kw["weights"]), f"{section}.weights")
    cfg = _build(TrainConfig, kw, section)
    cfg.validate()
    return cfg


def _debug_config(config: dict) -> DebugConfig:
    kw = _section(config, "debug")
    if "finetune" in kw:
        ft = dict(kw["finetune"])
        if "weights" in ft:
            ft["weights"] = _build(LossWeights, dict(ft["weights"]), "debug.finetune.weights")
        kw["finetune"] = _build(TrainConfig, ft, "debug.finetune")
    cfg = _build(DebugConfig, kw, "debug")
    cfg.validate()
    return cfg


def _write_manifest(out: Path, command: str, config: dict, inputs: dict,
                    artifacts: dict) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "inputs": inputs,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
    }
    with open(out / "run_manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands ------------------------------------------------------------------


def cmd_datagen(args) -> int:
    config = apply_overrides(load_config(args.config), args.set)
    spec = _dataset_spec(config, args.seed)
    out = _outdir(args)
    ds = generate(spec)
    save_dataset(ds, out)
    _write_manifest(out, "datagen", config, {"seed": spec.seed},
                    {"dataset": out, "manifest": out / "run_manifest.json"})
    print(f"dataset: {len(ds.train)} train / {len(ds.test)} test "
          f"/ {len(ds.visualization)} visualization -> {out}")
    return 0


def cmd_train(args) -> int:
    config = apply_overrides(load_config(args.config), args.set)
    ds = load_dataset(args.data)
    model_cfg = _model_config(config, args.seed)
    if model_cfg.v != ds.spec.v:
        raise ConfigError(f"model has {model_cfg.v} classes but dataset has {ds.spec.v}")
    train_cfg = _train_config(config)
    stage2 = _section(config, "stage2")
    unknown = set(stage2) - {"steps", "lr", "ridge"}
    if unknown:
        raise ConfigError(f"config section [stage2]: unknown keys {sorted(unknown)}")

    out = _outdir(args)
    model = PartProtoNet(model_cfg)
    model, report = train_stage1(ds, model, train_cfg)
    model = train_stage2(ds, model, **stage2)

    ckpt = save_checkpoint(model, out / "model.ckpt")
    report_path = out / "train_report.json"
    report_path.write_text(report.to_json() + "\n")
    _write_manifest(out, "train", config, {"data": str(args.data)},
                    {"checkpoint": ckpt, "train_report": report_path})
    print(f"trained {train_cfg.epochs} epochs: "
          f"train macro-F1 {report.train_macro_f1:.3f}, "
          f"test macro-F1 {report.test_macro_f1:.3f} -> {ckpt}")
    return 0


def _print_round_table(report) -> None:
    print("round  n_forbid  n_keep  n_skip  train_f1  test_f1")
    for entry in report.rounds:
        print(f"{entry['round']:>5}  {entry['n_forbid']:>8}  {entry['n_keep']:>6}  "
              f"{entry['n_skip']:>6}  {entry.get('train_macro_f1', float('nan')):>8.3f}  "
              f"{entry.get('test_macro_f1', float('nan')):>7.3f}")
    state = "converged" if report.converged else "round cap reached"
    print(f"{state} after {report.n_rounds} round(s); "
          f"final test macro-F1 {report.final_test_macro_f1:.3f}")


def cmd_debug(args) -> int:
    config = apply_overrides(load_config(args.config), args.set)
    ds = load_dataset(args.data)
    model = load_checkpoint(args.checkpoint)
    debug_cfg = _debug_config(config)
    out = _outdir(args)
    feedback_path = out / "feedback.jsonl"
    session = DebugSession(ds, model, debug_cfg, feedback_path=feedback_path)

    if args.annotator == "oracle":
        oracle = functools.partial(oracle_annotator,
                                   threshold=debug_cfg.overlap_threshold,
                                   scope=args.oracle_scope)
        model, report = run_session(ds, model, debug_cfg, oracle,
                                    session=session)
    else:
        from .service import create_app
        import uvicorn
        port = args.port or int(os.environ.get(PORT_ENV_VAR, DEFAULT_PORT))
        app = create_app(session)
        print(f"annotate at http://{args.host}:{port} (ctrl-c to stop)")
        uvicorn.run(app, host=args.host, port=port, log_level="warning")
        model, report = session.model, session.report()

    ckpt = save_checkpoint(model, out / "model.ckpt")
    report_path = out / "session_report.json"
    report_path.write_text(report.to_json() + "\n")
    state_path = out / "session_state.json"
    session.save_state(state_path)
    _write_manifest(out, "debug", config,
                    {"data": str(args.data), "checkpoint": str(args.checkpoint),
                     "annotator": args.annotator},
                    {"checkpoint": ckpt, "session_report": report_path,
                     "session_state": state_path, "feedback": feedback_path})
    _print_round_table(report)
    return 0


def cmd_eval(args) -> int:
    ds = load_dataset(args.data)
    model = load_checkpoint(args.checkpoint)
    examples = ds.test
    if args.swap_context:
        examples = context_swap(examples, seed=args.seed if args.seed is not None else 0)
    labels = [e.label for e in examples]
    aps = prototype_activation_precision(model, examples, tau=args.tau)
    result = evaluate(model.predict(examples), labels, model.config.v, prototype_ap=aps)
    print(result.to_json())
    if args.out:
        out = _outdir(args)
        (out / "eval.json").write_text(result.to_json() + "\n")
        _write_manifest(out, "eval", {},
                        {"data": str(args.data), "checkpoint": str(args.checkpoint),
                         "swap_context": bool(args.swap_context)},
                        {"eval": out / "eval.json"})
    return 0


def cmd_report(args) -> int:
    run = Path(args.run)
    if not run.is_dir():
        raise ConfigError(f"run directory not found: {run}")
    manifest_path = run / "run_manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"no run_manifest.json under {run}")
    manifest = json.loads(manifest_path.read_text())
    print(f"run: {run}  command: {manifest['command']}  version: {manifest['version']}")
    train_report = run / "train_report.json"
    if train_report.exists():
        tr = json.loads(train_report.read_text())
        print(f"training: {len(tr['epoch_losses'])} epochs, "
              f"train macro-F1 {tr['train_macro_f1']:.3f}, "
              f"test macro-F1 {tr['test_macro_f1']:.3f}, "
              f"{tr['wall_time_s']:.1f}s")
    session_report = run / "session_report.json"
    if session_report.exists():
        sr = json.loads(session_report.read_text())
        print(f"debugging: {sr['n_rounds']} round(s), "
              f"{'converged' if sr['converged'] else 'not converged'}, "
              f"final test macro-F1 {sr['final_test_macro_f1']:.3f}")
    eval_report = run / "eval.json"
    if eval_report.exists():
        ev = json.loads(eval_report.read_text())
        print(f"evaluation: macro-F1 {ev['macro_f1']:.3f}, micro-F1 {ev['micro_f1']:.3f}")
    return 0


# -- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="partproto",
        description="part-prototype networks with concept-level debugging")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--config", help="TOML or JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="config override, e.g. --set train.epochs=10")
        p.add_argument("--seed", type=int, help="seed override")
        p.add_argument("--out", default=out_default, help="output directory")

    p = sub.add_parser("datagen", help="generate a synthetic dataset")
    common(p, "dataset")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="two-stage training run")
    common(p, "run")
    p.add_argument("--data", required=True, help="dataset directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("debug", help="interactive concept-debugging session")
    common(p, "debug-run")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--annotator", choices=("oracle", "http"), default="oracle")
    p.add_argument("--oracle-scope", choices=("class", "all"), default="class",
                   help="whether oracle rejections apply to one class or all")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int,
                   help=f"HTTP port (default ${PORT_ENV_VAR} or {DEFAULT_PORT})")
    p.set_defaults(func=cmd_debug)

    p = sub.add_parser("eval", help="score a checkpoint on the test split")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--swap-context", action="store_true",
                   help="evaluate on the context-swapped test split")
    p.add_argument("--tau", type=float, default=5.0, help="AP percentile mass")
    p.add_argument("--seed", type=int, help="context-swap seed")
    p.add_argument("--out", help="optional output directory for eval.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="summarize a run directory")
    p.add_argument("--run", required=True, help="run directory with run_manifest.json")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 1
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
