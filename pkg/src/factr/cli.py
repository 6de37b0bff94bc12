"""Command-line entry points.

Every run command takes a JSON config (strictly validated: unknown keys are
errors), writes its artifacts into --out, and drops a manifest.json there
recording the exact configuration, the seed, and a content hash of the
input data, so any output directory is self-describing.

Exit codes: 0 success, 1 configuration/validation problem, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import __version__
from . import data as D
from . import evaluation as E
from . import training as TR
from .model import Forecaster, ModelConfig, ModelError, load_checkpoint


class CliError(ValueError):
    """User-facing configuration problem; maps to exit code 1."""


# ---------------------------------------------------------------------------
# config schema


_MODEL_KEYS = {"lookback", "horizon", "patch_len", "stride", "d_model", "fm_rank",
               "spatial_rank", "dropout", "variant"}
_TRAIN_KEYS = {"lr", "rho", "batch_size", "max_epochs", "patience", "seed", "beta1",
               "beta2", "adam_eps", "lr_min", "restart_period", "restart_mult",
               "masked_only"}
_DATA_KEYS = {"path", "frequency", "split", "covariates"}
_SPLIT_KEYS = {"mode", "train", "val", "test"}
_TRANSFER_KEYS = {"head_epochs", "full_epochs"}
_TOP_KEYS = {"data", "model", "train", "transfer"}


@dataclass
class RunSpec:
    data_path: str
    frequency: str | None
    split: D.SplitSpec
    covariates: str                      # "calendar" | "none"
    model_kwargs: dict
    train_cfg: TR.TrainConfig
    head_epochs: int
    full_epochs: int


def _reject_unknown(section: dict, allowed: set, where: str):
    extra = sorted(set(section) - allowed)
    if extra:
        raise CliError(f"unknown config key {where}.{extra[0]!r}")


def parse_run_config(raw: dict) -> RunSpec:
    if not isinstance(raw, dict):
        raise CliError("config root must be a JSON object")
    _reject_unknown(raw, _TOP_KEYS, "$")
    data = raw.get("data")
    if not isinstance(data, dict) or "path" not in data:
        raise CliError("config needs a 'data' object with at least 'path'")
    _reject_unknown(data, _DATA_KEYS, "data")
    split_raw = data.get("split", {"mode": "ratio", "train": 7, "val": 1, "test": 2})
    if not isinstance(split_raw, dict):
        raise CliError("data.split must be an object")
    _reject_unknown(split_raw, _SPLIT_KEYS, "data.split")
    try:
        split = D.SplitSpec(
            mode=split_raw.get("mode", "ratio"),
            train=split_raw.get("train", 7),
            val=split_raw.get("val", 1),
            test=split_raw.get("test", 2))
    except D.DataError as exc:
        raise CliError(str(exc)) from exc
    covariates = data.get("covariates", "none")
    if covariates not in ("calendar", "none"):
        raise CliError(f"data.covariates must be 'calendar' or 'none', got {covariates!r}")

    model = raw.get("model", {})
    _reject_unknown(model, _MODEL_KEYS, "model")

    train = dict(raw.get("train", {}))
    _reject_unknown(train, _TRAIN_KEYS, "train")
    try:
        train_cfg = TR.TrainConfig(**train)
        train_cfg.validate()
    except (TypeError, TR.TrainingError) as exc:
        raise CliError(f"bad train section: {exc}") from exc

    transfer = raw.get("transfer", {})
    _reject_unknown(transfer, _TRANSFER_KEYS, "transfer")

    return RunSpec(
        data_path=data["path"],
        frequency=data.get("frequency"),
        split=split,
        covariates=covariates,
        model_kwargs=dict(model),
        train_cfg=train_cfg,
        head_epochs=int(transfer.get("head_epochs", 10)),
        full_epochs=int(transfer.get("full_epochs", 20)),
    )


def load_run_config(path: str) -> tuple[RunSpec, dict]:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise CliError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"config is not valid JSON: {exc}") from exc
    return parse_run_config(raw), raw


# ---------------------------------------------------------------------------
# shared plumbing


@dataclass
class Prepared:
    dataset: D.SeriesDataset          # z-scored
    ranges: D.SplitRanges
    stats: D.NormStats
    codes: np.ndarray | None
    model_config: ModelConfig


def prepare(spec: RunSpec, overrides: dict | None = None,
            reconstruction: bool = False) -> Prepared:
    raw_ds = D.load_csv_dataset(spec.data_path, spec.frequency)
    ranges = D.chronological_split(raw_ds, spec.split)
    stats = D.fit_norm_stats(raw_ds, ranges.train)
    dataset = D.apply_norm(raw_ds, stats)

    codes = None
    dyn_sizes: tuple = ()
    if spec.covariates == "calendar":
        if dataset.timestamps is None:
            raise CliError("calendar covariates need a 'date' column in the data")
        codes = D.calendar_covariates(dataset.timestamps)
        dyn_sizes = D.CALENDAR_SIZES

    kwargs = dict(spec.model_kwargs)
    if overrides:
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
    if reconstruction:
        kwargs["horizon"] = kwargs.get("lookback", 512)
    try:
        model_config = ModelConfig(n_channels=dataset.n_channels,
                                   dyn_vocab_sizes=dyn_sizes, **kwargs)
    except (TypeError, ModelError) as exc:
        raise CliError(f"bad model section: {exc}") from exc
    return Prepared(dataset, ranges, stats, codes, model_config)


def resolve_seed(flag_value: int | None, spec: RunSpec) -> int:
    """--seed beats config train.seed beats FACTR_SEED beats 0."""
    if flag_value is not None:
        return flag_value
    if spec.train_cfg.seed != 0:
        return spec.train_cfg.seed
    env = os.environ.get("FACTR_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise CliError(f"FACTR_SEED must be an integer, got {env!r}") from exc
    return 0


def ensure_out_dir(path: str, force: bool):
    if os.path.isdir(path) and os.listdir(path):
        if not force:
            raise CliError(f"output directory {path!r} is not empty; pass --force to reuse")
    os.makedirs(path, exist_ok=True)


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: str, command: str, raw_config: dict, seed: int,
                   data_path: str | None, extra: dict | None = None):
    manifest = {
        "command": command,
        "config": raw_config,
        "seed": seed,
        "version": __version__,
    }
    if data_path:
        manifest["data_sha256"] = sha256_file(data_path)
    if extra:
        manifest.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_report(out_dir: str, report: E.ForecastReport):
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    with open(os.path.join(out_dir, "per_channel.csv"), "w") as fh:
        fh.write("channel,mse,mae\n")
        for name, mse, mae in E.rank_channels(report):
            fh.write(f"{name},{mse:.8f},{mae:.8f}\n")


def _write_log(out_dir: str, name: str, result: TR.TrainResult):
    with open(os.path.join(out_dir, name), "w") as fh:
        fh.write(TR.log_to_tsv(result.log))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.days < 100:
        raise CliError("--days must be at least 100 for a usable promo structure")
    out = args.out
    if os.path.exists(out) and not args.force:
        raise CliError(f"{out!r} exists; pass --force to overwrite")
    parent = os.path.dirname(out)
    if parent:
        os.makedirs(parent, exist_ok=True)
    ds = D.synth_retail_generate(args.days, args.seed)
    D.write_csv(ds, out)
    print(f"wrote {args.days} days x {ds.n_channels} channels to {out}")
    return 0


def cmd_train(args) -> int:
    spec, raw = load_run_config(args.config)
    seed = resolve_seed(args.seed, spec)
    prep = prepare(spec, overrides={"horizon": args.horizon, "variant": args.variant})
    cfg = spec.train_cfg
    cfg.seed = seed
    if args.rho is not None:
        cfg.rho = args.rho
    ensure_out_dir(args.out, args.force)

    model = Forecaster(prep.model_config, seed=seed)
    data = TR.TrainData(prep.dataset, prep.ranges, prep.codes)
    result = TR.train_forecaster(model, data, cfg)

    model.save_checkpoint(os.path.join(args.out, "model.ckpt"))
    _write_log(args.out, "train_log.tsv", result)
    span = D.context_range(prep.ranges, "test", prep.model_config.lookback)
    report = E.evaluate(model, prep.dataset, span, covariate_codes=prep.codes)
    _write_report(args.out, report)
    write_manifest(args.out, "train", raw, seed, spec.data_path,
                   {"rho": cfg.rho, "best_epoch": result.best_epoch,
                    "epochs_run": result.epochs_run})
    print(f"best val MSE {result.best_val:.6f} at epoch {result.best_epoch} "
          f"({result.epochs_run} epochs run)")
    print(f"test MSE {report.mse:.6f}  test MAE {report.mae:.6f}")
    return 0


def cmd_eval(args) -> int:
    spec, raw = load_run_config(args.config)
    ckpt_config, tensors = load_checkpoint(args.checkpoint)
    prep = prepare(spec)
    if ckpt_config.n_channels != prep.dataset.n_channels:
        raise CliError(
            f"checkpoint was trained on {ckpt_config.n_channels} channels, "
            f"data has {prep.dataset.n_channels}")
    model = Forecaster(ckpt_config, seed=0)
    model.load_state(tensors)
    ensure_out_dir(args.out, args.force)
    span = D.context_range(prep.ranges, args.split, ckpt_config.lookback)
    codes = prep.codes if ckpt_config.n_dyn_features else None
    report = E.evaluate(model, prep.dataset, span, covariate_codes=codes)
    _write_report(args.out, report)
    write_manifest(args.out, "eval", raw, 0, spec.data_path,
                   {"checkpoint": os.path.abspath(args.checkpoint), "split": args.split})
    print(f"{args.split} MSE {report.mse:.6f}  MAE {report.mae:.6f} "
          f"over {report.n_windows} windows")
    return 0


def cmd_pretrain(args) -> int:
    spec, raw = load_run_config(args.config)
    seed = resolve_seed(args.seed, spec)
    prep = prepare(spec, reconstruction=True)
    cfg = spec.train_cfg
    cfg.seed = seed
    ensure_out_dir(args.out, args.force)
    model = Forecaster(prep.model_config, seed=seed)
    data = TR.TrainData(prep.dataset, prep.ranges, prep.codes)
    result = TR.pretrain_reconstructor(model, data, cfg, args.mask_ratio)
    model.save_checkpoint(os.path.join(args.out, "encoder.ckpt"))
    _write_log(args.out, "pretrain_log.tsv", result)
    write_manifest(args.out, "pretrain", raw, seed, spec.data_path,
                   {"mask_ratio": args.mask_ratio})
    first, last = result.log[0].train_loss, result.log[-1].train_loss
    print(f"reconstruction loss {first:.6f} -> {last:.6f} "
          f"over {result.epochs_run} epochs")
    return 0


def _transfer_common(args, finetune: bool) -> int:
    spec, raw = load_run_config(args.config)
    seed = resolve_seed(args.seed, spec)
    prep = prepare(spec, overrides={"horizon": args.horizon})
    ensure_out_dir(args.out, args.force)
    model = Forecaster(prep.model_config, seed=seed)
    try:
        TR.load_encoder(model, args.checkpoint)
    except TR.TrainingError as exc:
        raise CliError(str(exc)) from exc
    data = TR.TrainData(prep.dataset, prep.ranges, prep.codes)

    head_cfg = TR.TrainConfig(**{**spec.train_cfg.__dict__})
    head_cfg.seed = seed
    head_cfg.max_epochs = spec.head_epochs
    head_cfg.patience = None
    if finetune:
        full_cfg = TR.TrainConfig(**{**spec.train_cfg.__dict__})
        full_cfg.seed = seed
        full_cfg.max_epochs = spec.full_epochs
        full_cfg.patience = None
        head_result, full_result = TR.finetune_all(model, data, head_cfg, full_cfg)
        _write_log(args.out, "probe_log.tsv", head_result)
        _write_log(args.out, "finetune_log.tsv", full_result)
    else:
        head_result = TR.probe_head(model, data, head_cfg)
        _write_log(args.out, "probe_log.tsv", head_result)

    model.save_checkpoint(os.path.join(args.out, "model.ckpt"))
    span = D.context_range(prep.ranges, "test", prep.model_config.lookback)
    report = E.evaluate(model, prep.dataset, span, covariate_codes=prep.codes)
    _write_report(args.out, report)
    write_manifest(args.out, "finetune" if finetune else "probe", raw, seed,
                   spec.data_path, {"encoder": os.path.abspath(args.checkpoint)})
    print(f"test MSE {report.mse:.6f}  MAE {report.mae:.6f}")
    return 0


def cmd_probe(args) -> int:
    return _transfer_common(args, finetune=False)


def cmd_finetune(args) -> int:
    return _transfer_common(args, finetune=True)


def cmd_inspect(args) -> int:
    spec, raw = load_run_config(args.config)
    ckpt_config, tensors = load_checkpoint(args.checkpoint)
    prep = prepare(spec)
    model = Forecaster(ckpt_config, seed=0)
    model.load_state(tensors)
    ensure_out_dir(args.out, args.force)
    span = D.context_range(prep.ranges, args.split, ckpt_config.lookback)
    codes = prep.codes if ckpt_config.n_dyn_features else None
    batches = D.window_iter(prep.dataset, span, ckpt_config.lookback,
                            ckpt_config.horizon, 1, covariate_codes=codes)
    batch = next(itertools.islice(batches, args.window, None), None)
    if batch is None:
        raise CliError(f"window {args.window} is out of range for the {args.split} split")
    try:
        E.export_interpretability(model, batch, args.out)
    except ModelError as exc:
        raise CliError(str(exc)) from exc
    write_manifest(args.out, "inspect", raw, 0, spec.data_path,
                   {"window": args.window, "split": args.split})
    print(f"interpretability exports written to {args.out}")
    return 0


def cmd_dump(args) -> int:
    spec, raw = load_run_config(args.config)
    ckpt_config, tensors = load_checkpoint(args.checkpoint)
    prep = prepare(spec)
    model = Forecaster(ckpt_config, seed=0)
    model.load_state(tensors)
    ensure_out_dir(args.out, args.force)
    try:
        windows = [int(w) for w in args.windows.split(",") if w]
    except ValueError as exc:
        raise CliError(f"--windows must be comma-separated integers: {exc}") from exc
    span = D.context_range(prep.ranges, args.split, ckpt_config.lookback)
    codes = prep.codes if ckpt_config.n_dyn_features else None
    try:
        E.forecast_dump(model, prep.dataset, span, windows, args.out,
                        covariate_codes=codes)
    except ModelError as exc:
        raise CliError(str(exc)) from exc
    write_manifest(args.out, "dump", raw, 0, spec.data_path,
                   {"windows": windows, "split": args.split})
    print(f"forecast dumps for windows {windows} written to {args.out}")
    return 0


def cmd_params(args) -> int:
    spec, _ = load_run_config(args.config)
    prep = prepare(spec)
    model = Forecaster(prep.model_config, seed=0)
    counts = E.audit_params(model)
    width = max(len(k) for k in counts)
    for key, value in counts.items():
        print(f"{key:<{width}}  {value:>10,}")
    return 0


def cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",") if s]
    if len(sizes) < 2:
        raise CliError("--sizes needs at least two values")
    result = E.scaling_benchmark(args.component, sizes, reps=args.reps)
    line = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        ensure_out_dir(args.out, args.force)
        with open(os.path.join(args.out, "bench.json"), "w") as fh:
            fh.write(line + "\n")
    print(line)
    return 0


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # argparse exits 2 on usage errors; bad flags are a validation
        # problem here, same as a bad config.
        raise CliError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="factr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, checkpoint=False, out=True):
        if config:
            p.add_argument("--config", required=True, help="JSON run config")
        if checkpoint:
            p.add_argument("--checkpoint", required=True)
        if out:
            p.add_argument("--out", required=True, help="output directory")
            p.add_argument("--force", action="store_true",
                           help="reuse a non-empty output directory")

    p = sub.add_parser("synth", help="generate the synthetic retail dataset")
    p.add_argument("--days", type=int, default=1460)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a forecaster")
    common(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--rho", type=float, default=None, help="SAM radius override")
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--variant", choices=("temporal_only", "plus_fm", "full"),
                   default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p, checkpoint=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("pretrain", help="masked-patch reconstruction pretraining")
    common(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--mask-ratio", type=float, default=0.45)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("probe", help="train a fresh head on a frozen encoder")
    common(p, checkpoint=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--horizon", type=int, default=None)
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("finetune", help="probe, then unfreeze everything")
    common(p, checkpoint=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--horizon", type=int, default=None)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("inspect", help="export attention structure for one window")
    common(p, checkpoint=True)
    p.add_argument("--window", type=int, default=0)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("dump", help="write forecasts next to actuals")
    common(p, checkpoint=True)
    p.add_argument("--windows", default="0", help="comma-separated window ids")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(fn=cmd_dump)

    p = sub.add_parser("params", help="parameter accounting for a config")
    common(p, out=False)
    p.set_defaults(fn=cmd_params)

    p = sub.add_parser("bench", help="scaling benchmark for one block")
    p.add_argument("--component", choices=("cross_channel", "temporal"),
                   default="cross_channel")
    p.add_argument("--sizes", default="64,128,256,512")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (CliError, D.DataError, ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TR.TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort runtime mapping
        print(f"unexpected failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
