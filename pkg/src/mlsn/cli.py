"""Command-line entry point: ``mlsn <subcommand> ...``.

Config files are flat ``key=value`` text.  Keys are the TrainConfig fields
plus the run keys in ``RUN_DEFAULTS``; ``#`` starts a comment.  Flags given
on the command line override file values.

Exit status: 0 success, 2 validation error, 3 runtime or numeric error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import NumericError
from .data import (
    gen_two_moons,
    gen_weak_pairs,
    load_csv_dataset,
    load_digits_dataset,
    load_weak_pairs,
    save_csv_dataset,
    save_weak_pairs,
)
from .gradcheck import format_report, run_suite
from .networks import load_checkpoint, save_checkpoint
from .trainer import (
    METHODS,
    SplitSpec,
    TrainConfig,
    compare_methods,
    evaluate,
    export_features,
    format_summary,
    make_split,
    summary_json,
    train,
    write_feature_csvs,
    write_metrics_csv,
)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3

RUN_DEFAULTS = {
    "dataset": "",
    "num_classes": 0,  # 0: infer from the labels
    "n_labeled": 6,
    "test_fraction": 0.2,
    "stratified": True,
    "standardize": True,
    "fresh_split": True,
    "split_seed": 0,
    "n_weak_pairs": 0,
    "weak_pairs": "",
    "out_dir": "run",
}


class ConfigError(ValueError):
    """One or more config fields are invalid; ``problems`` lists each."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


def _train_field_types() -> dict[str, object]:
    defaults = TrainConfig()
    return {f.name: getattr(defaults, f.name) for f in fields(TrainConfig)}


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected a boolean")
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.replace(" ", "").split(",") if v) if raw not in ("", "-") else ()
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError([f"{source}:{lineno}: expected key=value"])
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_config(raw: dict[str, str]) -> tuple[TrainConfig, dict]:
    """Materialize every default and validate; all problems are reported at once."""
    types = {**_train_field_types(), **RUN_DEFAULTS}
    problems, values = [], {}
    for k, v in raw.items():
        if k not in types:
            problems.append(f"{k}: unknown key")
            continue
        try:
            values[k] = _coerce(k, v, types[k])
        except ValueError as exc:
            problems.append(f"{k}: cannot parse {v!r} ({exc})")
    train_kw = {k: v for k, v in values.items() if k in _train_field_types()}
    run = {**RUN_DEFAULTS, **{k: v for k, v in values.items() if k in RUN_DEFAULTS}}
    cfg = TrainConfig(**train_kw)
    problems += cfg.problems()
    if not run["dataset"]:
        problems.append("dataset: required (path to a dataset CSV)")
    elif not Path(run["dataset"]).is_file():
        problems.append(f"dataset: file not found: {run['dataset']}")
    if run["weak_pairs"] and not Path(run["weak_pairs"]).is_file():
        problems.append(f"weak_pairs: file not found: {run['weak_pairs']}")
    if not 0 <= run["test_fraction"] < 1:
        problems.append("test_fraction: must lie in [0, 1)")
    if run["n_labeled"] < 1:
        problems.append("n_labeled: must be >= 1")
    if run["n_weak_pairs"] < 0:
        problems.append("n_weak_pairs: must be >= 0")
    if run["num_classes"] < 0 or run["num_classes"] == 1:
        problems.append("num_classes: must be 0 (infer) or >= 2")
    if problems:
        raise ConfigError(problems)
    return cfg, run


def load_config(path: str | None, overrides: list[str]) -> tuple[TrainConfig, dict]:
    raw = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError([f"config: file not found: {path}"])
        if p.suffix == ".json":
            raw = {k: _unparse(v) for k, v in json.loads(p.read_text())["config"].items()}
        else:
            raw = parse_config_text(p.read_text(), str(p))
    raw.update(parse_config_text("\n".join(overrides), "--set"))
    return resolve_config(raw)


def _manifest_args(path: str | None) -> dict:
    if path and path.endswith(".json") and Path(path).is_file():
        return json.loads(Path(path).read_text()).get("args", {})
    return {}


def _unparse(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path: Path, command: str, config: dict, inputs: list, seed, outputs: dict,
                   args: dict | None = None) -> None:
    """Record everything needed to rerun the command; written before any work starts."""
    manifest = {
        "args": args or {},
        "command": command,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in config.items()},
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "seed": seed,
        "outputs": {k: str(v) for k, v in outputs.items()},
        "version": f"mlsn {__version__}",
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _full_config(cfg: TrainConfig, run: dict) -> dict:
    return {**asdict(cfg), **run}


def _split_spec(run: dict):
    ds = load_csv_dataset(run["dataset"], num_classes=run["num_classes"] or None)
    return SplitSpec(ds, run["n_labeled"], run["test_fraction"], run["stratified"],
                     run["fresh_split"], run["standardize"], run["n_weak_pairs"], run["split_seed"])


# subcommands


def cmd_gen_data(args) -> int:
    kinds = [args.two_moons, args.digits, args.weak_pairs]
    if sum(kinds) != 1:
        raise ConfigError(["gen-data: choose exactly one of --two-moons, --digits, --weak-pairs"])
    out = Path(args.out)
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    inputs = [args.dataset] if args.weak_pairs and args.dataset else []
    if args.weak_pairs and not (args.dataset and Path(args.dataset).is_file()):
        raise ConfigError(["dataset: --weak-pairs needs an existing --dataset <labeled CSV>"])
    if args.two_moons and (args.n < 2 or args.n % 2):
        raise ConfigError([f"n: two-moons needs an even n >= 2, got {args.n}"])
    write_manifest(out.with_name(out.name + ".manifest.json"), "gen-data", flags, inputs,
                   args.seed, {"data": out})
    rng = np.random.default_rng(args.seed)
    if args.two_moons:
        save_csv_dataset(gen_two_moons(args.n, args.noise, rng), out)
    elif args.digits:
        save_csv_dataset(load_digits_dataset(), out)
    else:
        ds = load_csv_dataset(args.dataset)
        save_weak_pairs(gen_weak_pairs(ds, args.n_pairs, rng), out)
    print(f"wrote {out}")
    return EXIT_OK


def _train_overrides(args) -> list[str]:
    sets = list(args.set or [])
    for key in ("seed", "epochs", "dataset", "weak_pairs", "out_dir"):
        v = getattr(args, key, None)
        if v is not None:
            sets.append(f"{key}={v}")
    return sets


def cmd_train(args) -> int:
    cfg, run = load_config(args.config, _train_overrides(args))
    out_dir = Path(run["out_dir"])
    outputs = {"metrics": out_dir / "metrics.csv", "checkpoint": out_dir / "model.ckpt"}
    inputs = [run["dataset"]] + ([run["weak_pairs"]] if run["weak_pairs"] else [])
    write_manifest(out_dir / "manifest.json", "train", _full_config(cfg, run), inputs, cfg.seed, outputs)

    spec = _split_spec(run)
    split = make_split(spec, cfg.seed)
    weak = load_weak_pairs(run["weak_pairs"]) if run["weak_pairs"] else None
    res = train(cfg, split, weak_pairs=weak)
    write_metrics_csv(res.metrics, outputs["metrics"])
    arrays = {}
    if split.mean is not None:
        arrays = {"input_mean": split.mean, "input_scale": split.scale}
    meta = {"teacher_step": str(res.teacher.step), "alpha_max": repr(res.teacher.alpha_max),
            "noise_sigma": repr(res.teacher.noise_sigma), "eval_with": cfg.eval_with}
    save_checkpoint(outputs["checkpoint"], res.student, extra={"teacher": res.teacher.params},
                    meta=meta, arrays=arrays)
    model = res.teacher if cfg.eval_with == "teacher" else res.student
    err = evaluate(model, split.test) if len(split.test) else float("nan")
    print(f"final test error ({cfg.eval_with}): {err:.4f}")
    return EXIT_OK


def _load_model(path: str, use_teacher: bool):
    ck = load_checkpoint(path)
    name = "teacher" if use_teacher else "student"
    if name not in ck.models:
        raise ConfigError([f"checkpoint: {path} holds no {name} parameters"])
    return ck, ck.models[name]


def _prepare_features(ck, ds, path):
    if ck.models["student"].h_spec.input_dim != ds.dim:
        raise ConfigError([f"dataset: {ds.dim} features but checkpoint {path} expects "
                           f"{ck.models['student'].h_spec.input_dim}"])
    if "input_mean" in ck.arrays:
        return replace(ds, features=(ds.features - ck.arrays["input_mean"]) / ck.arrays["input_scale"])
    return ds


def cmd_eval(args) -> int:
    ck, model = _load_model(args.checkpoint, not args.use_student)
    ds = load_csv_dataset(args.dataset, num_classes=model.num_classes)
    ds = _prepare_features(ck, ds, args.checkpoint)
    labeled = ds.subset(np.flatnonzero(ds.labeled_mask))
    err = evaluate(model, labeled)
    print(f"test error: {err:.6f} ({len(labeled)} rows)")
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg, run = load_config(args.config, _train_overrides(args))
    saved = _manifest_args(args.config)
    methods_arg = args.methods or saved.get("methods", ",".join(METHODS))
    n_seeds = args.seeds if args.seeds is not None else int(saved.get("seeds", 10))
    methods = [m.strip() for m in methods_arg.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise ConfigError([f"methods: unknown {bad or methods}; choose from {','.join(METHODS)}"])
    if n_seeds < 1:
        raise ConfigError(["seeds: must be >= 1"])
    out_dir = Path(run["out_dir"])
    outputs = {"summary": out_dir / "summary.txt", "summary_json": out_dir / "summary.json"}
    write_manifest(out_dir / "manifest.json", "experiment", _full_config(cfg, run), [run["dataset"]],
                   cfg.seed, outputs, args={"methods": ",".join(methods), "seeds": n_seeds})
    summaries = compare_methods(cfg, _split_spec(run), n_seeds, methods)
    text = format_summary(summaries)
    outputs["summary"].write_text(text)
    outputs["summary_json"].write_text(summary_json(summaries))
    print(text, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite()
    print(format_report(results), end="")
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def cmd_export_features(args) -> int:
    prefix = Path(args.out_prefix)
    outputs = {"projection": prefix.with_name(prefix.name + "_pca.csv"),
               "features": prefix.with_name(prefix.name + "_features.csv")}
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    write_manifest(prefix.with_name(prefix.name + "_manifest.json"), "export-features", flags,
                   [args.checkpoint, args.dataset], None, outputs)
    ck, model = _load_model(args.checkpoint, args.use_teacher)
    ds = load_csv_dataset(args.dataset, num_classes=model.num_classes)
    ds = _prepare_features(ck, ds, args.checkpoint)
    export = export_features(model, ds)
    write_feature_csvs(export, outputs["projection"], outputs["features"])
    print(f"wrote {outputs['projection']} and {outputs['features']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlsn", description="Semi-supervised training with a learned similarity network.")
    p.add_argument("--version", action="version", version=f"mlsn {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a dataset CSV or a weak-pair CSV")
    g.add_argument("--two-moons", action="store_true")
    g.add_argument("--digits", action="store_true", help="8x8 handwritten digits (1797 rows)")
    g.add_argument("--weak-pairs", action="store_true", help="sample same/different pairs from --dataset")
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--noise", type=float, default=0.15)
    g.add_argument("--n-pairs", type=int, default=5000)
    g.add_argument("--dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    def run_flags(sp):
        sp.add_argument("--config", help="key=value file (or a manifest.json to rerun)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--dataset")
        sp.add_argument("--out-dir", dest="out_dir")

    t = sub.add_parser("train", help="train one model and write metrics, checkpoint and manifest")
    run_flags(t)
    t.add_argument("--weak-pairs", dest="weak_pairs", help="weak-pair CSV; enables weak-label mode")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="test error of a checkpoint on a labeled CSV")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--use-student", action="store_true")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("experiment", help="paired-seed comparison of methods")
    run_flags(x)
    x.add_argument("--methods", help=f"comma list from {','.join(METHODS)} (default: all)")
    x.add_argument("--seeds", type=int, help="number of paired seeds (default 10)")
    x.set_defaults(func=cmd_experiment)

    c = sub.add_parser("gradcheck", help="finite-difference check of every primitive and loss")
    c.set_defaults(func=cmd_gradcheck)

    f = sub.add_parser("export-features", help="raw features and a 2-D PCA projection")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--dataset", required=True)
    f.add_argument("--out-prefix", required=True)
    f.add_argument("--use-teacher", action="store_true")
    f.set_defaults(func=cmd_export_features)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for prob in exc.problems:
            print(f"error: {prob}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericError, FloatingPointError, ArithmeticError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, IndexError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
