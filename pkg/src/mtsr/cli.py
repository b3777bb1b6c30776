"""Command-line front end.

Commands: synth | train | infer | evaluate | saliency. Flags override
config-file values, which override defaults. Every command is
deterministic under a fixed --seed. Exit codes: 0 success, 1
runtime/numeric failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import datapipe as dp
from . import evaluation as ev
from .errors import CheckpointError, ConfigError, DataError, MtsrError, NumericError
from .networks import DiscriminatorSpec, InstanceConfig, ZipNetSpec, build_discriminator, build_zipnet
from .training import (
    Checkpoint,
    TrainConfig,
    load_checkpoint,
    pretrain_generator,
    save_checkpoint,
    train_gan,
    write_history,
)

LAYOUT_CHOICES = ("up2", "up4", "up10", "mixture")


def _layout_for(name: str, rows: int, cols: int) -> dp.ProbeLayout:
    if name == "mixture":
        return dp.ProbeLayout.mixture(rows, cols)
    return dp.ProbeLayout.uniform(int(name[2:]), rows, cols)


def _auto_window(rows: int, cols: int, factor: int, kind: str) -> int:
    w = min(80, rows, cols)
    if kind == "mixture":
        w -= w % 20
        if w < 40:
            raise ConfigError(f"grid {rows}x{cols} too small for a mixture window")
    else:
        w -= w % factor
        if w < factor:
            raise ConfigError(f"grid {rows}x{cols} too small for factor {factor}")
    return w


def _merge(args: argparse.Namespace, defaults: dict) -> dict:
    """Flags override config-file values override defaults."""
    file_cfg = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        with open(path) as fh:
            try:
                file_cfg = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    merged = {}
    for key, default in defaults.items():
        cli = getattr(args, key, None)
        merged[key] = cli if cli is not None else file_cfg.get(key, default)
    return merged


def _out_dir(spec) -> Path:
    out = Path(spec)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} {p} does not exist")
    return p


def write_pgm(path, values: np.ndarray, vmax: float):
    """16-bit binary PGM (P5), values linearly mapped over [0, vmax]."""
    gray = np.clip(np.asarray(values, dtype=np.float64) / vmax, 0.0, 1.0)
    gray = np.round(gray * 65535.0).astype(">u2")
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(gray.tobytes())


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

SYNTH_DEFAULTS = {
    "rows": 32, "cols": 32, "frames": 200, "hotspots": 4, "seed": 0,
    "interval_minutes": 10, "noise_scale": 0.02, "period_frames": 144, "out": ".",
}


def cmd_synth(args) -> int:
    cfg = _merge(args, SYNTH_DEFAULTS)
    out = _out_dir(cfg["out"])
    series = dp.synth_series(
        cfg["rows"], cfg["cols"], cfg["frames"], hotspots=cfg["hotspots"], seed=cfg["seed"],
        interval_minutes=cfg["interval_minutes"], noise_scale=cfg["noise_scale"],
        period_frames=cfg["period_frames"],
    )
    csv_path, meta_path = dp.write_series(series, out / "synthetic.csv")
    print(f"wrote {csv_path} and {meta_path} ({series.frames} frames, "
          f"{series.grid_shape[0]}x{series.grid_shape[1]})")
    return 0


TRAIN_DEFAULTS = {
    "data": None, "layout": "up2", "out": ".", "seed": 0,
    "window": None, "temporal_length": 6, "offset": 1, "split": "40,10,10",
    "batch_size": 16, "learning_rate": 0.0001, "n_g": 1, "n_d": 1,
    "pretrain_epochs": 50, "gan_epochs": 50, "skip_gan": False,
    "loss_variant": "mse_scaled", "sigma_sq": None, "log_clip": 1e-7,
    "upscaling_filters": 64, "zipper_modules": 24, "zipper_filters": 64,
    "final_filters": "128,256,1", "disc_filters": 64,
}


def _parse_split(text) -> tuple:
    parts = [float(p) for p in str(text).split(",")]
    if len(parts) != 3:
        raise ConfigError(f"split needs three comma-separated weights, got {text!r}")
    return tuple(parts)


def _train_setup(cfg):
    data = _require_file(cfg["data"], "dataset CSV")
    series = dp.ingest(data)
    rows, cols = series.grid_shape
    layout = _layout_for(cfg["layout"], rows, cols)
    window = cfg["window"] or _auto_window(rows, cols, layout.projected_factor, layout.kind)
    instance = InstanceConfig(
        upscaling_factor=layout.projected_factor,
        window_side=window,
        temporal_length=cfg["temporal_length"],
        layout_kind=layout.kind,
    )
    split = _parse_split(cfg["split"])
    train_set, val_set, test_set = dp.build_dataset(
        series, layout, S=instance.temporal_length, window_side=window,
        offset=cfg["offset"], split=split,
    )
    train_range = dp.split_ranges(series.frames, split)[0]
    stats = dp.fit_norm(series, train_range)
    return series, layout, instance, (train_set, val_set, test_set), stats


def cmd_train(args) -> int:
    cfg = _merge(args, TRAIN_DEFAULTS)
    if not cfg["data"]:
        raise ConfigError("train requires --data")
    out = _out_dir(cfg["out"])
    series, layout, instance, (train_set, _val, _test), stats = _train_setup(cfg)
    tc = TrainConfig(
        batch_size=cfg["batch_size"], learning_rate=cfg["learning_rate"],
        n_g=cfg["n_g"], n_d=cfg["n_d"], pretrain_epochs=cfg["pretrain_epochs"],
        gan_epochs=0 if cfg["skip_gan"] else cfg["gan_epochs"],
        loss_variant=cfg["loss_variant"], sigma_sq=cfg["sigma_sq"],
        log_clip=cfg["log_clip"], seed=cfg["seed"],
    )
    zspec = ZipNetSpec(
        upscaling_filters=cfg["upscaling_filters"], zipper_modules=cfg["zipper_modules"],
        zipper_filters=cfg["zipper_filters"],
        final_block_filters=tuple(int(f) for f in str(cfg["final_filters"]).split(",")),
    )
    gen = build_zipnet(instance, zspec, seed=tc.seed)
    disc = None
    history = []
    trace = pretrain_generator(gen, train_set, tc, stats)
    history.extend((e, "pretrain", v) for e, v in enumerate(trace))
    if tc.gan_epochs > 0:
        disc = build_discriminator(instance.window_side, DiscriminatorSpec.vgg(cfg["disc_filters"]),
                                   seed=tc.seed + 1)
        gen, disc, gan_rows = train_gan(gen, disc, train_set, tc, stats)
        history.extend(gan_rows)
    ckpt = Checkpoint.from_models(gen, disc, tc, stats, epoch=tc.gan_epochs)
    ckpt_path = out / "checkpoint.mtsr"
    save_checkpoint(ckpt_path, ckpt)
    hist_path = out / "history.csv"
    write_history(hist_path, history)
    print(f"wrote {ckpt_path} and {hist_path} "
          f"({len(trace)} pretrain epochs, {tc.gan_epochs} adversarial epochs)")
    return 0


INFER_DEFAULTS = {
    "checkpoint": None, "data": None, "time_index": None, "out": ".", "seed": 0,
    "offset": 1, "pgm": False, "psnr_max": 5496.0,
}


def cmd_infer(args) -> int:
    cfg = _merge(args, INFER_DEFAULTS)
    if not cfg["checkpoint"] or not cfg["data"] or cfg["time_index"] is None:
        raise ConfigError("infer requires --checkpoint, --data and --time-index")
    out = _out_dir(cfg["out"])
    ckpt = load_checkpoint(_require_file(cfg["checkpoint"], "checkpoint"))
    series = dp.ingest(_require_file(cfg["data"], "dataset CSV"))
    rows, cols = series.grid_shape
    inst = ckpt.instance
    layout = _layout_for("mixture" if inst.layout_kind == "mixture" else f"up{inst.upscaling_factor}",
                         rows, cols)
    if layout.projected_factor != inst.upscaling_factor:
        raise ConfigError("checkpoint instance does not match the dataset layout")
    t = int(cfg["time_index"])
    s_len = inst.temporal_length
    if t < s_len - 1 or t >= series.frames:
        raise ConfigError(f"time index {t} needs {s_len} history frames within 0..{series.frames - 1}")
    gen = ckpt.restore_generator()
    stats = ckpt.norm_stats
    win = inst.window_side
    origins = dp.window_origins(rows, cols, win, cfg["offset"])
    win_layout = layout.for_window(win)
    inputs = np.stack([
        np.stack([win_layout.aggregate(series.values[tt, r : r + win, c : c + win])
                  for tt in range(t - s_len + 1, t + 1)])
        for r, c in origins
    ])
    preds = dp.denormalize(gen.predict(dp.normalize(inputs, stats)), stats)
    frame = dp.stitch(list(zip(origins, preds)), (rows, cols))
    values = np.clip(frame.values, 0.0, None)
    pred_series = dp.TrafficSeries(
        np.concatenate([np.zeros((t, rows, cols)), values[None]], axis=0),
        interval_minutes=series.interval_minutes,
    )
    csv_path = out / f"prediction_t{t}.csv"
    dp.write_series(pred_series, csv_path)
    if cfg["pgm"]:
        write_pgm(out / f"prediction_t{t}.pgm", values, cfg["psnr_max"])
    print(f"wrote {csv_path} (grid {rows}x{cols})")
    return 0


EVALUATE_DEFAULTS = {
    "data": None, "layouts": "up2", "methods": "uniform,bicubic", "checkpoint": None,
    "out": ".", "seed": 0, "window": None, "temporal_length": 6, "offset": 1,
    "split": "40,10,10", "psnr_max": 5496.0,
}


def cmd_evaluate(args) -> int:
    cfg = _merge(args, EVALUATE_DEFAULTS)
    if not cfg["data"]:
        raise ConfigError("evaluate requires --data")
    out = _out_dir(cfg["out"])
    series = dp.ingest(_require_file(cfg["data"], "dataset CSV"))
    rows, cols = series.grid_shape
    layout_names = [s.strip() for s in str(cfg["layouts"]).split(",") if s.strip()]
    for name in layout_names:
        if name not in LAYOUT_CHOICES:
            raise ConfigError(f"unknown layout {name!r}; choices: {LAYOUT_CHOICES}")
    layouts = [_layout_for(name, rows, cols) for name in layout_names]
    method_names = [s.strip() for s in str(cfg["methods"]).split(",") if s.strip()]
    s_len = cfg["temporal_length"]
    ckpt = None
    if cfg["checkpoint"]:
        ckpt = load_checkpoint(_require_file(cfg["checkpoint"], "checkpoint"))
        s_len = ckpt.instance.temporal_length

    def unavailable(reason):
        def method(inputs, ctx):
            raise ConfigError(reason)
        return method

    methods = {}
    for name in method_names:
        if name == "uniform":
            methods[name] = ev.make_uniform_method()
        elif name == "bicubic":
            methods[name] = ev.make_bicubic_method()
        elif name == "zipnet":
            if ckpt is None:
                # missing model: keep the row, flagged, instead of aborting
                methods[name] = unavailable("the zipnet method requires --checkpoint")
            else:
                methods[name] = ev.make_model_method(ckpt.restore_generator(), ckpt.norm_stats)
        else:
            raise ConfigError(f"unknown method {name!r}; choices: uniform, bicubic, zipnet")

    window = cfg["window"] or (ckpt.instance.window_side if ckpt else
                               _auto_window(rows, cols, layouts[0].projected_factor, layouts[0].kind))
    split = _parse_split(cfg["split"])
    test_range = dp.split_ranges(series.frames, split)[2]
    metric_cfg = ev.MetricConfig(psnr_max=cfg["psnr_max"])
    report = ev.evaluate_suite(methods, series, layouts, S=s_len, window_side=window,
                               offset=cfg["offset"], test_range=test_range, config=metric_cfg)
    path = out / "report.csv"
    ev.write_report_csv(path, report)
    print(f"wrote {path} ({len(report)} rows)")
    return 0


SALIENCY_DEFAULTS = {
    "checkpoint": None, "data": None, "out": ".", "seed": 0,
    "window": None, "offset": 1, "split": "40,10,10", "max_samples": 64,
}


def cmd_saliency(args) -> int:
    cfg = _merge(args, SALIENCY_DEFAULTS)
    if not cfg["checkpoint"] or not cfg["data"]:
        raise ConfigError("saliency requires --checkpoint and --data")
    out = _out_dir(cfg["out"])
    ckpt = load_checkpoint(_require_file(cfg["checkpoint"], "checkpoint"))
    if not ckpt.has_discriminator:
        raise ConfigError("saliency needs a checkpoint that includes the discriminator")
    series = dp.ingest(_require_file(cfg["data"], "dataset CSV"))
    rows, cols = series.grid_shape
    inst = ckpt.instance
    layout = _layout_for("mixture" if inst.layout_kind == "mixture" else f"up{inst.upscaling_factor}",
                         rows, cols)
    window = cfg["window"] or inst.window_side
    _train, _val, test_set = dp.build_dataset(series, layout, S=inst.temporal_length,
                                              window_side=window, offset=cfg["offset"],
                                              split=_parse_split(cfg["split"]))
    test_set = test_set[: cfg["max_samples"]]
    gen = ckpt.restore_generator()
    disc = ckpt.restore_discriminator()
    report = ev.saliency(gen, disc, test_set, stats=ckpt.norm_stats,
                         log_clip=ckpt.train_config.log_clip)
    path = out / "saliency.csv"
    ev.write_saliency_csv(path, report)
    print(f"wrote {path} ({len(report.per_frame_magnitudes)} frames)")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_shared(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int, help="deterministic seed")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtsr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic traffic series")
    _add_shared(p)
    p.add_argument("--rows", type=int)
    p.add_argument("--cols", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--hotspots", type=int)
    p.add_argument("--interval-minutes", type=int, dest="interval_minutes")
    p.add_argument("--noise-scale", type=float, dest="noise_scale")
    p.add_argument("--period-frames", type=int, dest="period_frames")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="pretrain and adversarially train the generator")
    _add_shared(p)
    p.add_argument("--data")
    p.add_argument("--layout", choices=LAYOUT_CHOICES)
    p.add_argument("--window", type=int)
    p.add_argument("--temporal-length", type=int, dest="temporal_length")
    p.add_argument("--offset", type=int)
    p.add_argument("--split")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--n-g", type=int, dest="n_g")
    p.add_argument("--n-d", type=int, dest="n_d")
    p.add_argument("--pretrain-epochs", type=int, dest="pretrain_epochs")
    p.add_argument("--gan-epochs", type=int, dest="gan_epochs")
    p.add_argument("--skip-gan", action="store_true", default=None, dest="skip_gan")
    p.add_argument("--loss-variant", choices=("mse_scaled", "sigma_weighted"), dest="loss_variant")
    p.add_argument("--sigma-sq", type=float, dest="sigma_sq")
    p.add_argument("--log-clip", type=float, dest="log_clip")
    p.add_argument("--upscaling-filters", type=int, dest="upscaling_filters")
    p.add_argument("--zipper-modules", type=int, dest="zipper_modules")
    p.add_argument("--zipper-filters", type=int, dest="zipper_filters")
    p.add_argument("--final-filters", dest="final_filters")
    p.add_argument("--disc-filters", type=int, dest="disc_filters")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="reconstruct a fine frame from coarse aggregates")
    _add_shared(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--time-index", type=int, dest="time_index")
    p.add_argument("--offset", type=int)
    p.add_argument("--pgm", action="store_true", default=None)
    p.add_argument("--psnr-max", type=float, dest="psnr_max")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score methods across layouts on the test split")
    _add_shared(p)
    p.add_argument("--data")
    p.add_argument("--layouts")
    p.add_argument("--methods")
    p.add_argument("--checkpoint")
    p.add_argument("--window", type=int)
    p.add_argument("--temporal-length", type=int, dest="temporal_length")
    p.add_argument("--offset", type=int)
    p.add_argument("--split")
    p.add_argument("--psnr-max", type=float, dest="psnr_max")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("saliency", help="per-frame input-gradient magnitudes")
    _add_shared(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--window", type=int)
    p.add_argument("--offset", type=int)
    p.add_argument("--split")
    p.add_argument("--max-samples", type=int, dest="max_samples")
    p.set_defaults(func=cmd_saliency)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, NumericError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except MtsrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
