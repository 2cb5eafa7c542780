"""Command-line front end: train / impute / evaluate / benchmark.

Experiments are described by a JSON config file with strict validation
(unknown keys are rejected). Exit codes: 0 ok, 1 runtime failure, 2
usage/config error. Metric output files are byte-identical across reruns
with the same config and seed; wall-clock numbers live in sidecar files.
"""

import argparse
import csv
import dataclasses
import json
import os
import sys
import time

import numpy as np

from .data import load_csv, make_mcar_split, make_synthetic, export_split
from .evaluation import (BASELINES, MetricReport, derive_seed, export_bands,
                         impute_series, run_benchmark, score_baseline,
                         score_model)
from .imputer import load_checkpoint, save_checkpoint
from .training import TrainConfig, config_hash, train


class ConfigError(ValueError):
    pass


DEFAULT_EXPERIMENT = {
    "dataset": {"path": "synthetic", "missing_token": "", "time_column": "auto"},
    "synthetic": {"n_steps": 2000, "n_features": 10, "noise_std": 0.1,
                  "seed": 1234},
    "train": {},
    "rates": [0.5],
    "seeds": [1, 2, 3, 4, 5],
    "output_dir": "out",
    "crps_normalize": False,
}

_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}


def _merge_section(name, defaults, given):
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown {name} config keys: {sorted(unknown)}")
    merged = dict(defaults)
    merged.update(given)
    return merged


def load_experiment(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") \
            from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(raw) - set(DEFAULT_EXPERIMENT)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = dict(DEFAULT_EXPERIMENT)
    cfg["dataset"] = _merge_section("dataset", DEFAULT_EXPERIMENT["dataset"],
                                    raw.get("dataset", {}))
    cfg["synthetic"] = _merge_section("synthetic",
                                      DEFAULT_EXPERIMENT["synthetic"],
                                      raw.get("synthetic", {}))
    train_raw = raw.get("train", {})
    unknown = set(train_raw) - _TRAIN_FIELDS
    if unknown:
        raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
    cfg["train"] = dict(train_raw)
    for key in ("rates", "seeds", "output_dir", "crps_normalize"):
        if key in raw:
            cfg[key] = raw[key]
    for rate in cfg["rates"]:
        if not (0.0 <= float(rate) < 1.0):
            raise ConfigError(f"rates must lie in [0, 1), got {rate}")
    if not cfg["seeds"]:
        raise ConfigError("seeds must be a non-empty list")
    return cfg


def build_train_config(cfg, seed=None, **overrides):
    params = dict(cfg["train"])
    params.update(overrides)
    if seed is not None:
        params["seed"] = int(seed)
    for key in ("ensemble_mode", "quantile_preset"):
        if isinstance(params.get(key), list) and \
                all(isinstance(v, str) for v in params.get(key, [])):
            raise ConfigError(
                f"train.{key} sweep lists are only valid for `benchmark`")
    try:
        return TrainConfig(**params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train config: {exc}") from None


def load_dataset(cfg, override_path=None):
    path = override_path or cfg["dataset"]["path"]
    if path == "synthetic":
        return make_synthetic(**cfg["synthetic"])
    if not os.path.exists(path):
        raise ConfigError(f"dataset file not found: {path}")
    return load_csv(path, missing_token=cfg["dataset"]["missing_token"],
                    time_column=cfg["dataset"]["time_column"])


def _write_atomic(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_json(path, payload):
    _write_atomic(path, json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _rows_to_csv(path, rows, columns):
    lines = [",".join(columns)]
    for row in rows:
        cells = []
        for col in columns:
            v = row.get(col)
            cells.append("" if v is None else repr(v)
                         if isinstance(v, float) else str(v))
        lines.append(",".join(cells))
    _write_atomic(path, "\n".join(lines) + "\n")


METRIC_COLUMNS = ["method", "rate", "seed", "mae", "mae_raw", "crps",
                  "n_eval_points", "config_hash", "variance_mode",
                  "crps_normalized", "eval_mask_hash"]


def _metric_rows(reports):
    return [{k: r.to_row()[k] for k in METRIC_COLUMNS} for r in reports]


def _timing_rows(reports):
    return [{"method": r.method, "rate": r.rate, "seed": r.seed,
             "train_wall_ms": r.train_wall_ms,
             "infer_wall_ms": r.infer_wall_ms} for r in reports]


# ----------------------------------------------------------------------
# subcommands

def cmd_train(args):
    cfg = load_experiment(args.config)
    dataset = load_dataset(cfg, args.dataset)
    tcfg = build_train_config(cfg, seed=args.seed)
    rate = args.rate if args.rate is not None else \
        (cfg["rates"][0] if cfg["rates"] else 0.0)
    split = make_mcar_split(dataset, rate,
                            seed=derive_seed(tcfg.seed, "split", rate))
    out_dir = args.out or cfg["output_dir"]
    os.makedirs(out_dir, exist_ok=True)

    callbacks = None
    if args.checkpoint_every > 0:
        def callbacks(epoch, model, stats):
            if (epoch + 1) % args.checkpoint_every == 0:
                save_checkpoint(
                    os.path.join(out_dir, f"checkpoint_epoch{epoch + 1}.npz"),
                    model, stats, meta={"epoch": epoch + 1})

    result = train(dataset, split, tcfg, on_epoch=callbacks)
    meta = {"config": result.config, "config_hash": result.config_hash,
            "seed": tcfg.seed, "rate": rate,
            "window_length": tcfg.window_length,
            "variance_mode": tcfg.variance_mode}
    ck_path = os.path.join(out_dir, "checkpoint.npz")
    save_checkpoint(ck_path, result.model, result.stats, meta=meta)
    log_path = os.path.join(out_dir, "train_log.jsonl")
    _write_atomic(log_path, "".join(
        json.dumps(e, sort_keys=True) + "\n" for e in result.trajectory))
    export_split(split, os.path.join(out_dir, "split.csv"))
    _write_json(os.path.join(out_dir, "run_info.json"),
                {"config_hash": result.config_hash, "seed": tcfg.seed,
                 "wall_ms": result.wall_ms,
                 "stopped_early": result.stopped_early})
    print(f"checkpoint written to {ck_path} "
          f"(config {result.config_hash}, seed {tcfg.seed})")
    return 0


def cmd_impute(args):
    model, stats, meta = load_checkpoint(args.checkpoint)
    if not os.path.exists(args.input):
        raise ConfigError(f"input file not found: {args.input}")
    dataset = load_csv(args.input, missing_token=args.missing_token,
                       time_column=args.time_column)
    if dataset.n_features != model.dims.n_features:
        raise ConfigError(
            f"checkpoint expects {model.dims.n_features} features, "
            f"input has {dataset.n_features}")
    window_length = meta.get("window_length", 48)
    result = impute_series(model, dataset.values, dataset.mask,
                           dataset.timestamps, stats, window_length,
                           variance_mode=meta.get("variance_mode",
                                                  "dispersion"))
    filled = result.agg_mean * stats.std + stats.mean

    # observed cells keep their original text, so the output is identical
    # to the input wherever a value was present
    with open(args.input, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        raw_rows = [row for row in reader
                    if row and any(c.strip() for c in row)]
    first_feature = len(header) - dataset.n_features
    # load_csv may have sorted rows by timestamp; map each raw row back to
    # its dataset index
    row_to_idx = np.arange(len(raw_rows))
    if dataset.meta.get("sorted"):
        orig_ts = np.array([float(r[0]) for r in raw_rows])
        order = np.argsort(orig_ts, kind="stable")
        row_to_idx[order] = np.arange(len(raw_rows))

    lines = [",".join(header)]
    for i, row in enumerate(raw_rows):
        out_row = list(row)
        ti = int(row_to_idx[i])
        for j in range(dataset.n_features):
            if dataset.mask[ti, j] == 0.0:
                out_row[first_feature + j] = repr(float(filled[ti, j]))
        lines.append(",".join(out_row))
    _write_atomic(args.output, "\n".join(lines) + "\n")
    _write_json(args.output + ".meta.json",
                {"config_hash": meta.get("config_hash", ""),
                 "seed": meta.get("seed", model.seed),
                 "checkpoint": os.path.basename(args.checkpoint)})
    if args.bands:
        export_bands(args.bands, result, dataset.values, dataset.mask,
                     dataset.mask, stats)
    print(f"imputed series written to {args.output}")
    return 0


def cmd_evaluate(args):
    cfg = load_experiment(args.config)
    dataset = load_dataset(cfg, args.dataset)
    model, stats, meta = load_checkpoint(args.checkpoint)
    if dataset.n_features != model.dims.n_features:
        raise ConfigError(
            f"checkpoint expects {model.dims.n_features} features, "
            f"dataset has {dataset.n_features}")
    seed = args.seed if args.seed is not None else meta.get("seed", 0)
    rate = args.rate if args.rate is not None else meta.get("rate", 0.5)
    split = make_mcar_split(dataset, rate,
                            seed=derive_seed(seed, "split", rate))
    if float(split.eval_mask.sum()) == 0:
        raise ConfigError("evaluation split is empty; use a rate > 0")
    window_length = meta.get("window_length", 48)

    t0 = time.perf_counter()
    result = impute_series(model, dataset.values, split.train_mask,
                           dataset.timestamps, stats, window_length,
                           variance_mode=meta.get("variance_mode",
                                                  "dispersion"))
    infer_ms = int((time.perf_counter() - t0) * 1000)
    mae_n, mae_r, crps, pinballs = score_model(
        result, dataset.values, split.eval_mask, stats,
        crps_normalize=cfg["crps_normalize"])
    reports = [MetricReport(
        method="model:" + model.mode, mae=mae_n, mae_raw=mae_r, crps=crps,
        per_quantile_pinball=pinballs,
        n_eval_points=int(split.eval_mask.sum()), train_wall_ms=0,
        infer_wall_ms=infer_ms, config_hash=meta.get("config_hash", ""),
        variance_mode=result.variance_mode, rate=rate, seed=seed,
        crps_normalized=cfg["crps_normalize"])]
    vis_values = np.where(split.train_mask > 0, dataset.values, 0.0)
    for name, fn in BASELINES.items():
        filled = fn(vis_values, split.train_mask, dataset.timestamps,
                    dataset.feature_names)
        b_n, b_r = score_baseline(filled, dataset.values, split.eval_mask,
                                  stats)
        reports.append(MetricReport(
            method=name, mae=b_n, mae_raw=b_r, crps=None,
            per_quantile_pinball=[], n_eval_points=int(split.eval_mask.sum()),
            train_wall_ms=0, infer_wall_ms=0,
            config_hash=meta.get("config_hash", ""), variance_mode="",
            rate=rate, seed=seed))

    out_dir = args.out or cfg["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    _rows_to_csv(os.path.join(out_dir, "evaluation.csv"),
                 _metric_rows(reports), METRIC_COLUMNS)
    _write_json(os.path.join(out_dir, "evaluation.json"),
                {"rows": _metric_rows(reports)})
    _write_json(os.path.join(out_dir, "evaluation.timings.json"),
                {"rows": _timing_rows(reports)})
    for r in reports:
        crps_txt = "-" if r.crps is None else f"{r.crps:.4f}"
        print(f"{r.method:24s} mae {r.mae:.4f}  crps {crps_txt}")
    return 0


def _expand_variants(cfg):
    modes = cfg["train"].get("ensemble_mode", "shared_trunk")
    presets = cfg["train"].get("quantile_preset", "Q1")
    modes = modes if isinstance(modes, list) else [modes]
    if isinstance(presets, list) and all(isinstance(p, str) for p in presets):
        preset_list = presets
    else:
        preset_list = [presets]
    return [(m, p) for m in modes for p in preset_list]


def cmd_benchmark(args):
    cfg = load_experiment(args.config)
    dataset = load_dataset(cfg, args.dataset)
    rates = [args.rate] if args.rate is not None else cfg["rates"]
    seeds = [args.seed] if args.seed is not None else cfg["seeds"]
    out_dir = args.out or cfg["output_dir"]
    os.makedirs(out_dir, exist_ok=True)

    all_reports = []
    failures = []
    for vi, (mode, preset) in enumerate(_expand_variants(cfg)):
        for seed in seeds:
            try:
                tcfg = build_train_config(
                    cfg, seed=seed, ensemble_mode=mode, quantile_preset=preset)
                rows = run_benchmark(dataset, rates, tcfg, master_seed=seed,
                                     crps_normalize=cfg["crps_normalize"],
                                     include_baselines=(vi == 0))
                for r in rows:
                    if r.method.startswith("model:"):
                        r.method = f"model:{mode}:{preset}"
                all_reports.extend(rows)
            except Exception as exc:           # noqa: BLE001 (per-seed isolation)
                failures.append({"mode": mode, "preset": str(preset),
                                 "seed": seed, "error": f"{exc}"})
                print(f"seed {seed} ({mode}, {preset}) failed: {exc}",
                      file=sys.stderr)

    rows = _metric_rows(all_reports)
    _rows_to_csv(os.path.join(out_dir, "results.csv"), rows, METRIC_COLUMNS)
    _write_json(os.path.join(out_dir, "results.json"), {"rows": rows})

    agg = {}
    for r in all_reports:
        agg.setdefault((r.method, r.rate), []).append(r)
    agg_rows = []
    for (method, rate), rs in sorted(agg.items()):
        maes = np.array([r.mae for r in rs])
        crps = [r.crps for r in rs if r.crps is not None]
        agg_rows.append({
            "method": method, "rate": rate, "n_seeds": len(rs),
            "mae_mean": float(np.mean(maes)), "mae_std": float(np.std(maes)),
            "crps_mean": float(np.mean(crps)) if crps else None,
            "crps_std": float(np.std(crps)) if crps else None,
            "config_hash": rs[0].config_hash,
        })
    agg_cols = ["method", "rate", "n_seeds", "mae_mean", "mae_std",
                "crps_mean", "crps_std", "config_hash"]
    _rows_to_csv(os.path.join(out_dir, "aggregated.csv"), agg_rows, agg_cols)
    _write_json(os.path.join(out_dir, "timings.json"),
                {"rows": _timing_rows(all_reports), "failures": failures,
                 "written_at": time.strftime("%Y-%m-%dT%H:%M:%S")})
    for row in agg_rows:
        crps_txt = "-" if row["crps_mean"] is None \
            else f"{row['crps_mean']:.4f}"
        print(f"{row['method']:28s} rate {row['rate']:.2f}  "
              f"mae {row['mae_mean']:.4f} +- {row['mae_std']:.4f}  "
              f"crps {crps_txt}")
    if failures and not all_reports:
        return 1
    return 0


# ----------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="quantimp",
        description="Uncertainty-aware time-series imputation with a "
                    "bidirectional recurrent quantile ensemble.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       help="experiment config (JSON)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--dataset", default=None,
                       help="dataset path or 'synthetic' (overrides config)")
        p.add_argument("--rate", type=float, default=None)

    p = sub.add_parser("train", help="fit a model and write a checkpoint")
    common(p)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("impute", help="fill a CSV with a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--bands", default=None,
                   help="also write a predictive-quantile band CSV")
    p.add_argument("--missing-token", default="")
    p.add_argument("--time-column", default="auto")
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("evaluate",
                       help="score a checkpoint against the baselines")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark",
                       help="train and score across seeds and rates")
    common(p)
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:                    # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
