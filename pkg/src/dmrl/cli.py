"""Command-line entry point: train, eval, ablate, sweep, gradcheck, synth-gen.

Exit codes: 0 success, 1 check failure, 2 usage/configuration/data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import checks, models
from .datasets import SynthSpec, dataset_to_idx, generate_synthetic, load_any
from .errors import DMRLError
from .objectives import ABLATION_VARIANTS, LAMBDA_T_GRID, HyperParams
from .trainer import RunData, accuracy, train

log = logging.getLogger("dmrl")

METRICS_SCHEMA = "# schema: dmrl-metrics/1"
ABLATION_SCHEMA = "# schema: dmrl-ablation/1"
SWEEP_SCHEMA = "# schema: dmrl-sweep/1"
METRICS_HEADER = ["epoch", "p", "eta_p", "lambda_d", "l_c", "l_s_r", "l_t_r", "l_adv", "l_adv_r",
                  "src_acc", "tgt_acc"]

SWEEP_PARAMS = ("alpha", "lambda_s", "lambda_r", "lambda_t")
DEFAULT_GRIDS = {
    "alpha": (0.1, 0.2, 0.5, 1.0, 2.0),
    "lambda_s": (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1),
    "lambda_r": (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1),
    "lambda_t": LAMBDA_T_GRID,
}

_hp = HyperParams()

# key -> (parser, default); every key may appear in a config file or as --key
CONFIG_KEYS: dict[str, tuple] = {
    "task": (str, "synth"),
    "arch": (str, "mlp"),
    "feature_dim": (int, None),
    "alpha": (float, _hp.alpha),
    "lambda_s": (float, _hp.lambda_s),
    "lambda_t": (float, _hp.lambda_t),
    "lambda_r": (float, _hp.lambda_r),
    "eta0": (float, _hp.eta0),
    "momentum": (float, _hp.momentum),
    "epochs": (int, _hp.epochs),
    "batch_size": (int, _hp.batch_size),
    "seed": (int, 0),
    "variant": (str, _hp.variant),
    "out_dir": (str, "runs/dmrl"),
    "seeds": (str, "0,1,2,3,4"),
    "jobs": (int, 1),
    # synthetic task
    "synth_classes": (int, 3),
    "synth_per_class": (int, 100),
    "synth_eval_per_class": (int, 100),
    "synth_radius": (float, 3.0),
    "synth_sigma": (float, 0.5),
    "synth_rotation_deg": (float, 50.0),
    "synth_shift_x": (float, 0.0),
    "synth_shift_y": (float, 0.0),
    "synth_seed": (int, None),
    # digit task (paths default under $DMRL_DATA_DIR)
    "source_train_images": (str, None),
    "source_train_labels": (str, None),
    "source_eval_images": (str, None),
    "source_eval_labels": (str, None),
    "target_train_images": (str, None),
    "target_eval_images": (str, None),
    "target_eval_labels": (str, None),
    "source_limit": (int, None),
}

DIGIT_DEFAULTS = {
    "source_train_images": "mnist/train-images-idx3-ubyte",
    "source_train_labels": "mnist/train-labels-idx1-ubyte",
    "source_eval_images": "mnist/t10k-images-idx3-ubyte",
    "source_eval_labels": "mnist/t10k-labels-idx1-ubyte",
    "target_train_images": "usps/usps_train.csv",
    "target_eval_images": "usps/usps_test.csv",
}


class UsageError(DMRLError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _parse_value(key: str, raw):
    kind, _ = CONFIG_KEYS[key]
    if raw is None or raw == "" or raw == "none":
        return None
    try:
        return kind(raw)
    except ValueError as exc:
        raise UsageError(f"config key {key!r}: cannot parse {raw!r} as {kind.__name__}") from exc


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys are fatal."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = _parse_value(key, value)
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = {k: default for k, (_, default) in CONFIG_KEYS.items()}
    if getattr(args, "config", None):
        cfg.update(read_config_file(args.config))
    for key in CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def format_config(cfg: dict) -> str:
    lines = ["# resolved dmrl run configuration"]
    lines += [f"{k} = {'' if v is None else v}" for k, v in cfg.items()]
    return "\n".join(lines) + "\n"


def hyperparams_from(cfg: dict) -> HyperParams:
    return HyperParams(alpha=cfg["alpha"], lambda_s=cfg["lambda_s"], lambda_t=cfg["lambda_t"],
                       lambda_r=cfg["lambda_r"], eta0=cfg["eta0"], momentum=cfg["momentum"],
                       batch_size=cfg["batch_size"], epochs=cfg["epochs"], variant=cfg["variant"]).validate()


def synth_spec_from(cfg: dict) -> SynthSpec:
    seed = cfg["synth_seed"] if cfg["synth_seed"] is not None else cfg["seed"]
    return SynthSpec(num_classes=cfg["synth_classes"], per_class=cfg["synth_per_class"],
                     eval_per_class=cfg["synth_eval_per_class"], radius=cfg["synth_radius"],
                     sigma=cfg["synth_sigma"], rotation=math.radians(cfg["synth_rotation_deg"]),
                     translation=(cfg["synth_shift_x"], cfg["synth_shift_y"]), seed=seed)


def _data_path(cfg: dict, key: str) -> str | None:
    value = cfg.get(key)
    if value is None and key in DIGIT_DEFAULTS:
        value = str(Path(os.environ.get("DMRL_DATA_DIR", "data")) / DIGIT_DEFAULTS[key])
    return value


def load_run_data(cfg: dict) -> RunData:
    if cfg["task"] == "synth":
        spec = synth_spec_from(cfg)
        src, tgt = generate_synthetic(spec)
        src_eval, tgt_eval = generate_synthetic(spec, "eval")
        return RunData(src, tgt, src_eval, tgt_eval)
    if cfg["task"] != "digits":
        raise UsageError(f"unknown task {cfg['task']!r}; expected synth or digits")
    for key in ("source_train_images", "target_train_images", "target_eval_images"):
        path = _data_path(cfg, key)
        if not Path(path).exists():
            raise UsageError(f"data file for {key} not found: {path}")
    src = load_any(_data_path(cfg, "source_train_images"), _data_path(cfg, "source_train_labels"))
    if cfg["source_limit"]:
        src = src.subset(cfg["source_limit"])
    src_eval_path = _data_path(cfg, "source_eval_images")
    src_eval = (load_any(src_eval_path, _data_path(cfg, "source_eval_labels"), split="eval")
                if src_eval_path and Path(src_eval_path).exists() else src)
    tgt = load_any(_data_path(cfg, "target_train_images"), domain_tag="target").unlabeled()
    tgt_eval = load_any(_data_path(cfg, "target_eval_images"), cfg.get("target_eval_labels"),
                        domain_tag="target", split="eval")
    return RunData(src, tgt, src_eval, tgt_eval)


def architecture_for(cfg: dict, data: RunData) -> models.Architecture:
    num_classes = max(int(data.source_train.labels.max()) + 1, data.source_train.num_classes or 0)
    if cfg["arch"] == "mlp":
        arch = models.Architecture(kind="mlp", input_shape=data.source_train.input_shape,
                                   feature_dim=cfg["feature_dim"] or 16, num_classes=num_classes)
    elif cfg["arch"] == "lenet_like":
        arch = models.Architecture(kind="lenet_like", input_shape=data.source_train.input_shape,
                                   feature_dim=cfg["feature_dim"] or 500, num_classes=num_classes,
                                   disc_hidden=1024)
    else:
        raise UsageError(f"unknown arch {cfg['arch']!r}; expected mlp or lenet_like")
    arch.validate()
    return arch


# ---------------------------------------------------------------------------
# output files


def write_metrics_csv(path, metrics) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(METRICS_SCHEMA + "\n")
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for r in metrics.epochs:
            w.writerow([r.epoch, repr(r.p), repr(r.eta_p), repr(r.lambda_d), repr(r.l_c), repr(r.l_s_r),
                        repr(r.l_t_r), repr(r.l_adv), repr(r.l_adv_r), repr(r.source_accuracy),
                        repr(r.target_accuracy)])


def read_metrics_csv(path) -> list[dict]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def run_training(cfg: dict) -> dict:
    """Train one configuration and write its artifacts into ``cfg['out_dir']``."""
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg))
    hp = hyperparams_from(cfg)
    data = load_run_data(cfg)
    arch = architecture_for(cfg, data)
    start = time.perf_counter()
    params, metrics = train(arch, hp, data, seed=cfg["seed"])
    wall = time.perf_counter() - start
    write_metrics_csv(out / "metrics.csv", metrics)
    models.save_checkpoint(params, out / "checkpoint.dmrl")
    summary = {
        "config": cfg,
        "variant": hp.variant,
        "final_target_accuracy": metrics.summary["final_target_accuracy"],
        "best_target_accuracy": metrics.summary["best_target_accuracy"],
        "final_source_accuracy": metrics.summary["final_source_accuracy"],
        "iterations": metrics.summary["iterations"],
        "checkpoint_sha256": params.digest(),
        "wall_time_s": wall,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    summary = run_training(cfg)
    print(f"variant={summary['variant']} final_target_accuracy={summary['final_target_accuracy']:.4f} "
          f"-> {cfg['out_dir']}")
    return 0


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"seeds must be a comma-separated list of integers, got {text!r}") from exc
    if not seeds:
        raise UsageError("seeds list is empty")
    return seeds


def _run_many(configs: list[dict], jobs: int) -> list[dict]:
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run_training, configs))
    return [run_training(c) for c in configs]


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    seeds = _parse_seeds(cfg["seeds"])
    base = Path(cfg["out_dir"])
    runs = [dict(cfg, variant=v, seed=s, out_dir=str(base / v / f"seed{s}"))
            for v in ABLATION_VARIANTS for s in seeds]
    results = _run_many(runs, cfg["jobs"])
    by_variant: dict[str, list[float]] = {v: [] for v in ABLATION_VARIANTS}
    for run, res in zip(runs, results):
        by_variant[run["variant"]].append(res["final_target_accuracy"])
    base.mkdir(parents=True, exist_ok=True)
    with open(base / "ablation.csv", "w", newline="") as fh:
        fh.write(ABLATION_SCHEMA + "\n")
        w = csv.writer(fh)
        w.writerow(["variant", "median_target_accuracy", "n_seeds", "seeds", "target_accuracies"])
        for v in ABLATION_VARIANTS:
            accs = by_variant[v]
            w.writerow([v, repr(statistics.median(accs)), len(accs), " ".join(map(str, seeds)),
                        " ".join(repr(a) for a in accs)])
    for v in ABLATION_VARIANTS:
        print(f"{v:12s} median target accuracy {statistics.median(by_variant[v]):.4f}")
    return 0


def _parse_values(text) -> list[float]:
    if text is None:
        return []
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"values must be a comma-separated list of numbers, got {text!r}") from exc


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    if args.param not in SWEEP_PARAMS:
        raise UsageError(f"cannot sweep {args.param!r}; choose one of {SWEEP_PARAMS}")
    values = list(DEFAULT_GRIDS[args.param]) if args.values == "default" else _parse_values(args.values)
    if not values:
        raise UsageError("sweep needs at least one value")
    base = Path(cfg["out_dir"])
    runs = [dict(cfg, **{args.param: v}, out_dir=str(base / f"{args.param}={v!r}")) for v in values]
    results = _run_many(runs, cfg["jobs"])
    base.mkdir(parents=True, exist_ok=True)
    with open(base / "sweep.csv", "w", newline="") as fh:
        fh.write(SWEEP_SCHEMA + "\n")
        w = csv.writer(fh)
        w.writerow(["param", "value", "final_target_accuracy"])
        for v, res in zip(values, results):
            w.writerow([args.param, repr(v), repr(res["final_target_accuracy"])])
            print(f"{args.param}={v!r}: final target accuracy {res['final_target_accuracy']:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    start = time.perf_counter()
    failed = []
    for seed in args.seeds:
        for res in checks.gradcheck_terms(args.arch, seed, h=args.step):
            r = res.report
            status = "ok" if res.passed else "FAIL"
            print(f"seed={seed} {res.term:9s} max_rel_err={r.max_relative_error:.3e} "
                  f"checked={r.checked} excluded={r.excluded} {status}")
            if not res.passed:
                failed.append(f"{res.term} (seed {seed}, worst coordinate {r.worst_param}[{r.worst_index}], "
                              f"error {r.max_relative_error:.3e})")
    print(f"elapsed {time.perf_counter() - start:.2f}s")
    if failed:
        suspects = [op for op, err in checks.check_primitives().items() if not err < checks.TOLERANCE]
        for f in failed:
            print(f"gradcheck failed: {f}", file=sys.stderr)
        print(f"suspect ops: {', '.join(suspects) if suspects else 'none isolated'}", file=sys.stderr)
        return 1
    return 0


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    if args.images:
        ds = load_any(args.images, args.labels, split="eval")
    else:
        cfg = resolve_config(args)
        spec = synth_spec_from(cfg)
        pair = generate_synthetic(spec, args.split)
        ds = pair[0] if args.domain == "source" else pair[1]
    if ds.labels is None:
        raise UsageError("evaluation needs a labeled dataset")
    params = models.load_checkpoint(args.checkpoint, ds.input_shape)
    result = evaluate(params, ds)
    print(f"accuracy {result['accuracy']:.4f} ({result['n']} samples)")
    text = json.dumps(result, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0


def evaluate(params: models.ModelParams, ds) -> dict:
    pred = models.predict(params, ds.images)
    per_class = {}
    for k in range(params.arch.num_classes):
        mask = ds.labels == k
        per_class[str(k)] = float(np.mean(pred[mask] == k)) if mask.any() else None
    return {"accuracy": accuracy(params, ds), "n": int(len(ds)), "per_class_accuracy": per_class}


def cmd_synth_gen(args) -> int:
    cfg = resolve_config(args)
    spec = synth_spec_from(cfg)
    out = Path(args.out_dir or cfg["out_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        files = {}
        for split in ("train", "eval"):
            src, tgt = generate_synthetic(spec, split)
            for ds in (src, tgt):
                stem = f"{ds.domain_tag}-{split}"
                img, lab = out / f"{stem}-images.idx", out / f"{stem}-labels.idx"
                dataset_to_idx(ds, img, lab if ds.labeled else None)
                files[stem] = {"images": img.name, "labels": lab.name if ds.labeled else None}
        manifest = {
            "num_classes": spec.num_classes, "per_class": spec.per_class,
            "eval_per_class": spec.eval_per_class, "radius": spec.radius, "sigma": spec.sigma,
            "rotation_rad": spec.rotation, "rotation_deg": cfg["synth_rotation_deg"],
            "translation": list(spec.translation), "seed": spec.seed, "files": files,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        print(f"error: cannot write synthetic data to {out}: {exc}", file=sys.stderr)
        return 2
    print(f"wrote synthetic datasets to {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value run configuration file")
    for key, (kind, _) in CONFIG_KEYS.items():
        p.add_argument(f"--{key}", type=kind, default=None, dest=key)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmrl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run every ablation variant over a list of seeds")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="hyperparameter sensitivity sweep")
    _add_config_flags(p)
    p.add_argument("--param", required=True)
    p.add_argument("--values", default="default", help="comma-separated values, or 'default' for the built-in grid")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss term")
    p.add_argument("--arch", default="mlp", choices=("mlp", "lenet_like"))
    p.add_argument("--seed", dest="seeds", type=int, action="append")
    p.add_argument("--step", type=float, default=checks.DEFAULT_STEP)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a labeled dataset")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", help="IDX image file or digit CSV (default: synthetic data from the config)")
    p.add_argument("--labels")
    p.add_argument("--domain", default="target", choices=("source", "target"))
    p.add_argument("--split", default="eval", choices=("train", "eval"))
    p.add_argument("--out", help="also write the JSON result here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth-gen", help="write synthetic datasets as IDX files")
    _add_config_flags(p)
    p.set_defaults(func=cmd_synth_gen)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "gradcheck" and not args.seeds:
        args.seeds = [0]
    try:
        return args.func(args)
    except (DMRLError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
