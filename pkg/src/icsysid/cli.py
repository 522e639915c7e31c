"""Experiment orchestration: JSON configs, runners, manifests, CSV emission.

Subcommands `pretrain`, `metagen`, `adapt-mc`, `short2long` and `eval` each
take --config <json>, --out <dir> and --seed <int> (seed overrides the
config). Exit codes: 0 success, 1 config error, 2 runtime/numeric error,
3 I/O or checkpoint error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .datapipe import batch_from_sequences, make_split_dataset
from .errors import CheckpointError, ConfigError, InputError, NumericError, ShapeError
from .metrics import abs_error_quantiles, eval_on_stream, sequence_rmse, write_quantile_band_csv
from .model import TransformerConfig, TransformerParams, forward
from .sysgen import ClassSpec, sample_from_class
from .train import TrainConfig, TrainRecord, adapt, meta_train

_MC_TAG = 808

EXPERIMENTS = ("pretrain", "metagen", "adapt_mc", "short2long", "eval")


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int
    out_dir: Path
    raw: dict


def _require(raw: dict, key: str):
    if key not in raw:
        raise ConfigError(f"config is missing required field {key!r}")
    return raw[key]


def _checkpoint_field(raw: dict, key: str) -> None:
    if key in raw and not Path(raw[key]).is_file():
        raise ConfigError(f"{key} {raw[key]!r} does not exist")


def load_experiment_config(
    path, out_override=None, seed_override: int | None = None, expected: str | None = None
) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path!r} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    experiment = raw.get("experiment", expected)
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {experiment!r}")
    if expected is not None and experiment != expected:
        raise ConfigError(
            f"config is for experiment {experiment!r} but the {expected!r} command was invoked"
        )
    seed = seed_override if seed_override is not None else raw.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    out_dir = out_override or raw.get("out_dir")
    if out_dir is None:
        raise ConfigError("no output directory: set 'out_dir' in the config or pass --out")
    for key in ("checkpoint", "init_checkpoint", "short_checkpoint"):
        _checkpoint_field(raw, key)
    return ExperimentConfig(
        experiment=experiment, seed=seed, out_dir=Path(out_dir), raw=raw
    )


def _from_fields(cls, d: dict, what: str, **overrides):
    if not isinstance(d, dict):
        raise ConfigError(f"{what} section must be a JSON object, got {d!r}")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown {what} fields: {unknown}")
    return cls(**{**d, **overrides})


def _model_config(raw: dict) -> TransformerConfig:
    return _from_fields(TransformerConfig, raw.get("model", {}), "model")


def _train_config(cfg: ExperimentConfig, block: dict | None = None, **overrides) -> TrainConfig:
    block = cfg.raw.get("train", {}) if block is None else block
    return _from_fields(TrainConfig, block, "train", seed=overrides.pop("seed", cfg.seed), **overrides)


def _git_blob_sha1(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\x00" % len(data) + data).hexdigest()


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_manifest(cfg: ExperimentConfig, outputs: list[Path]) -> Path:
    manifest = {
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "config": cfg.raw,
        "outputs": {
            p.name: _git_blob_sha1(p.read_bytes()) for p in sorted(outputs)
        },
    }
    path = cfg.out_dir / "manifest.json"
    _write_json(path, manifest)
    return path


def _finite_or_none(x: float):
    import math

    return x if math.isfinite(x) else None


def _record_meta(cfg: ExperimentConfig, record: TrainRecord, snapshot: str) -> dict:
    return {
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "snapshot": snapshot,
        "iterations": len(record.train_losses),
        "best_iter": record.best_iter,
        "best_val_loss": _finite_or_none(record.best_val_loss),
    }


def _write_stream_csv(path: Path, record: TrainRecord, extra_name: str) -> None:
    """Columns iter,loss_train_class,loss_test_class at evaluation points."""
    lines = ["iter,loss_train_class,loss_test_class"]
    for it, train_loss, test_loss in zip(
        record.val_iters, record.val_losses, record.extra_losses[extra_name]
    ):
        lines.append(f"{it},{train_loss!r},{test_loss!r}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def run_pretrain(cfg: ExperimentConfig) -> list[Path]:
    """Meta-train on the configured class; write checkpoints and loss.csv."""
    class_spec = ClassSpec.from_dict(_require(cfg.raw, "class_spec"))
    model_cfg = _model_config(cfg.raw)
    train_cfg = _train_config(cfg)
    init = None
    if "init_checkpoint" in cfg.raw:
        init, _ = load_checkpoint(cfg.raw["init_checkpoint"], n_ctx_dec=model_cfg.n_ctx_dec)
    record = meta_train(train_cfg, class_spec, model_cfg, init=init)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    loss_csv = cfg.out_dir / "loss.csv"
    record.write_loss_csv(loss_csv)
    outputs.append(loss_csv)
    for name, params in (("best", record.best_params), ("final", record.final_params)):
        path = cfg.out_dir / f"checkpoint_{name}.bin"
        save_checkpoint(params, _record_meta(cfg, record, name), path)
        outputs.append(path)
    outputs.append(_write_manifest(cfg, outputs))
    print(f"pretrain: {len(record.train_losses)} iterations, "
          f"best val loss {record.best_val_loss:.4g} at iteration {record.best_iter}")
    return outputs


def run_metagen(cfg: ExperimentConfig) -> list[Path]:
    """Train on regions a, b and the a+b mixture, always testing on region c."""
    specs_raw = _require(cfg.raw, "class_specs")
    for name in ("a", "b", "c"):
        if name not in specs_raw:
            raise ConfigError(f"metagen needs class_specs entries 'a', 'b', 'c'; missing {name!r}")
    spec_a = ClassSpec.from_dict(specs_raw["a"])
    spec_b = ClassSpec.from_dict(specs_raw["b"])
    spec_c = ClassSpec.from_dict(specs_raw["c"])
    mixture = ClassSpec(kind="mixture", components=((spec_a, 0.5), (spec_b, 0.5)))
    model_cfg = _model_config(cfg.raw)
    train_cfg = _train_config(cfg)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    summary = {}
    for arm, spec in (("a", spec_a), ("b", spec_b), ("ab", mixture)):
        record = meta_train(
            train_cfg, spec, model_cfg, val_spec=spec, extra_eval_specs={"test_c": spec_c}
        )
        loss_csv = cfg.out_dir / f"loss_{arm}.csv"
        record.write_loss_csv(loss_csv)
        stream_csv = cfg.out_dir / f"stream_{arm}.csv"
        _write_stream_csv(stream_csv, record, "test_c")
        outputs += [loss_csv, stream_csv]
        summary[arm] = {
            "final_loss_train_class": record.val_losses[-1],
            "final_loss_test_class": record.extra_losses["test_c"][-1],
        }
        print(f"metagen arm {arm}: train-class {summary[arm]['final_loss_train_class']:.4g}, "
              f"test-on-c {summary[arm]['final_loss_test_class']:.4g}")
    summary_path = cfg.out_dir / "summary.json"
    _write_json(summary_path, summary)
    outputs.append(summary_path)
    outputs.append(_write_manifest(cfg, outputs))
    return outputs


def _eval_on_sequences(
    params: TransformerParams, sequences, m: int
) -> tuple[float, np.ndarray]:
    """Mean per-sequence RMSE plus the (n_seq, n) absolute-error matrix."""
    batch = batch_from_sequences(sequences, m)
    yhat = forward(params.detached(), batch.u_ctx, batch.y_ctx, batch.u_query)
    pred = yhat.data.astype(np.float64)
    per_seq = sequence_rmse(pred, batch.y_query)
    abs_err = np.abs(pred - batch.y_query)[:, :, 0]
    return float(per_seq.mean()), abs_err


def run_adapt_mc(cfg: ExperimentConfig) -> list[Path]:
    """Monte Carlo adaptation: sample systems, fine-tune per system, compare
    pre/post test error and pool the quantile bands."""
    params0, _ = load_checkpoint(_require(cfg.raw, "checkpoint"))
    target = ClassSpec.from_dict(_require(cfg.raw, "target_spec"))
    runs = int(cfg.raw.get("runs", 10))
    n_seq = int(_require(cfg.raw, "n_seq"))
    split = tuple(int(x) for x in _require(cfg.raw, "split"))
    if runs < 1 or len(split) != 3:
        raise ConfigError("adapt_mc needs runs >= 1 and a 3-way split")
    base_train = cfg.raw.get("train", {})
    adapt_block = {**base_train, **cfg.raw.get("adapt", {})}
    N = int(base_train.get("N", TrainConfig().N))
    m = int(base_train.get("m", TrainConfig().m))
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    run_rows = []
    pre_pool, post_pool = [], []
    for r in range(runs):
        mc_rng = np.random.default_rng([cfg.seed, _MC_TAG, r])
        system = sample_from_class(target, mc_rng)
        dataset = make_split_dataset(system, n_seq, N, split, mc_rng)
        pre_rmse, pre_abs = _eval_on_sequences(params0, dataset.test, m)
        adapt_seed = int(np.random.SeedSequence([cfg.seed, r]).generate_state(1)[0])
        adapt_cfg = _train_config(cfg, block=adapt_block, seed=adapt_seed)
        record = adapt(params0, dataset, adapt_cfg)
        post_rmse, post_abs = _eval_on_sequences(record.best_params, dataset.test, m)
        loss_csv = cfg.out_dir / f"run_{r:02d}_loss.csv"
        record.write_loss_csv(loss_csv)
        outputs.append(loss_csv)
        pre_pool.append(pre_abs)
        post_pool.append(post_abs)
        run_rows.append(
            {
                "run": r,
                "pre_rmse": pre_rmse,
                "post_rmse": post_rmse,
                "best_iter": record.best_iter,
                "best_val_loss": _finite_or_none(record.best_val_loss),
            }
        )
        print(f"adapt-mc run {r}: test rmse {pre_rmse:.4f} -> {post_rmse:.4f} "
              f"(best val at iteration {record.best_iter})")
    pre_band = abs_error_quantiles(np.vstack(pre_pool))
    post_band = abs_error_quantiles(np.vstack(post_pool))
    quantile_csv = cfg.out_dir / "quantiles.csv"
    write_quantile_band_csv(quantile_csv, pre_band, post_band)
    outputs.append(quantile_csv)
    summary = {
        "runs": run_rows,
        "median_pre_rmse": float(np.median([row["pre_rmse"] for row in run_rows])),
        "median_post_rmse": float(np.median([row["post_rmse"] for row in run_rows])),
    }
    summary_path = cfg.out_dir / "summary.json"
    _write_json(summary_path, summary)
    outputs.append(summary_path)
    outputs.append(_write_manifest(cfg, outputs))
    return outputs


def run_short2long(cfg: ExperimentConfig) -> list[Path]:
    """Short-horizon pretraining, then long-horizon arms from scratch and
    warm-started from the short weights, with shared seeds."""
    class_spec = ClassSpec.from_dict(_require(cfg.raw, "class_spec"))
    model_base = _model_config(cfg.raw)
    train_base = _train_config(cfg)
    n_short = int(cfg.raw.get("n_short", 50))
    n_long = int(cfg.raw.get("n_long", 200))
    iters_short = int(cfg.raw.get("iters_short", train_base.max_iters))
    iters_long = int(cfg.raw.get("iters_long", train_base.max_iters))
    m = train_base.m
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []

    if "short_checkpoint" in cfg.raw:
        short_params, _ = load_checkpoint(cfg.raw["short_checkpoint"])
    else:
        short_model = replace(model_base, n_ctx_dec=n_short)
        short_cfg = replace(train_base, N=m + n_short, max_iters=iters_short)
        rec_short = meta_train(short_cfg, class_spec, short_model)
        short_csv = cfg.out_dir / "loss_short.csv"
        rec_short.write_loss_csv(short_csv)
        ckpt = cfg.out_dir / "checkpoint_short_best.bin"
        save_checkpoint(rec_short.best_params, _record_meta(cfg, rec_short, "best"), ckpt)
        outputs += [short_csv, ckpt]
        short_params = rec_short.best_params
        print(f"short2long short arm: best val loss {rec_short.best_val_loss:.4g}")

    long_model = replace(model_base, n_ctx_dec=n_long)
    long_cfg = replace(train_base, N=m + n_long, max_iters=iters_long)
    summary = {}
    for arm, init in (("long_scratch", None), ("long_warm", short_params)):
        record = meta_train(long_cfg, class_spec, long_model, init=init)
        csv_path = cfg.out_dir / f"loss_{arm}.csv"
        record.write_loss_csv(csv_path)
        outputs.append(csv_path)
        tail = record.train_losses[-200:]
        summary[arm] = {
            "initial_val_loss": record.val_losses[0] if record.val_losses else None,
            "mean_tail_train_loss": float(np.mean(tail)) if tail else None,
        }
        print(f"short2long arm {arm}: tail train loss "
              f"{summary[arm]['mean_tail_train_loss']}")
    summary_path = cfg.out_dir / "summary.json"
    _write_json(summary_path, summary)
    outputs.append(summary_path)
    outputs.append(_write_manifest(cfg, outputs))
    return outputs


def run_eval(cfg: ExperimentConfig) -> list[Path]:
    """Stream-evaluate a checkpoint on one or more classes."""
    params, _ = load_checkpoint(_require(cfg.raw, "checkpoint"))
    classes = _require(cfg.raw, "classes")
    if not isinstance(classes, dict) or not classes:
        raise ConfigError("eval needs a non-empty 'classes' object")
    n_batches = int(cfg.raw.get("n_batches", 8))
    train_cfg = _train_config(cfg)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["class,mean_loss"]
    for name in sorted(classes):
        spec = ClassSpec.from_dict(classes[name])
        loss = eval_on_stream(params, spec, n_batches, train_cfg)
        lines.append(f"{name},{loss!r}")
        print(f"eval {name}: mean loss {loss:.4g}")
    eval_csv = cfg.out_dir / "eval.csv"
    with open(eval_csv, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    outputs = [eval_csv, _write_manifest(cfg, [eval_csv])]
    return outputs


_RUNNERS = {
    "pretrain": run_pretrain,
    "metagen": run_metagen,
    "adapt_mc": run_adapt_mc,
    "short2long": run_short2long,
    "eval": run_eval,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="icsysid", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for command in ("pretrain", "metagen", "adapt-mc", "short2long", "eval"):
        s = sub.add_parser(command)
        s.add_argument("--config", required=True, help="experiment JSON")
        s.add_argument("--out", default=None, help="output directory (overrides config)")
        s.add_argument("--seed", type=int, default=None, help="seed (overrides config)")
    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        experiment = args.command.replace("-", "_")
        cfg = load_experiment_config(args.config, args.out, args.seed, expected=experiment)
        _RUNNERS[experiment](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (ShapeError, InputError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
