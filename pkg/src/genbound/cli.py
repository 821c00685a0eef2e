"""Command-line driver: train | sweep | check | render.

Configuration is a JSON file plus flag overrides; unknown keys are rejected.
Exit codes: 0 success, 1 config error, 2 runtime failure, 3 property-suite
failure.  All randomness flows from config seeds, so reruns with the same
config produce byte-identical artifacts.  GENBOUND_THREADS caps the internal
Monte-Carlo parallelism (default 1).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bounds as bounds_mod
from .bounds import (
    BoundObserver,
    BoundOptions,
    BoundTrace,
    RateModel,
    rate_sweep,
)
from .data import Dataset, load_mnist_idx, synth_digit_images, synth_gaussian_mixture, take_subset
from .exceptions import ConfigError, GenboundError
from .nn import init_mlp, mlp_forward, parse_loss
from .optim import NoiseSchedule, TrainConfig, run_training
from .rng import STREAM_FLATNESS, StreamKey

TRACE_HEADER = [
    "epoch", "step", "train_loss", "test_loss", "gap",
    "flatness_t2pm", "flatness_t1pm", "traj_increment",
    "bound_subg_t2pm", "bound_subg_t1pm", "bound_bounded", "bound_clipped",
    "sigma_k",
]

SWEEP_HEADER = [
    "axis", "value", "train_loss", "test_loss", "test_accuracy",
    "flatness_t2pm", "flatness_t1pm",
    "bound_subg_t2pm", "bound_subg_t1pm", "bound_bounded", "bound_clipped",
    "bound_total",
]


def _fmt(value) -> str:
    """Floats with 9 significant digits; empty cell for missing values."""
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{value:.9g}"


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


def _check_keys(section: dict, where: str, allowed: set[str], required: set[str] = frozenset()):
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    missing = sorted(required - set(section))
    if missing:
        raise ConfigError(f"{where}: missing required keys {missing}")


@dataclass
class ExperimentConfig:
    raw: dict
    seed: int
    train_data: Dataset
    test_data: Dataset | None
    hidden_dims: tuple[int, ...]
    train: TrainConfig
    noise: NoiseSchedule
    bound_options: BoundOptions
    probe_size: int
    rate_steps: int
    scale_c: float | None
    scale_gamma: float | None


def _build_noise(section: dict, n_train: int) -> tuple[NoiseSchedule, float | None, float | None]:
    _check_keys(section, "noise", {"sigma", "sigmas", "diag", "scale_c", "scale_gamma"})
    scale_c = section.get("scale_c")
    scale_gamma = section.get("scale_gamma")
    if (scale_c is None) != (scale_gamma is None):
        raise ConfigError("noise: scale_c and scale_gamma must be given together")
    try:
        if scale_c is not None:
            return NoiseSchedule.scaled(scale_c, scale_gamma, n_train), scale_c, scale_gamma
        if "diag" in section:
            return NoiseSchedule.diagonal(section["diag"]), None, None
        if "sigmas" in section:
            return NoiseSchedule.isotropic(section["sigmas"]), None, None
        if "sigma" in section:
            return NoiseSchedule.isotropic(section["sigma"]), None, None
    except GenboundError as exc:
        raise ConfigError(f"noise: {exc}") from exc
    raise ConfigError("noise: specify sigma, sigmas, diag, or scale_c/scale_gamma")


def _build_dataset(section: dict, seed: int) -> tuple[Dataset, Dataset | None]:
    kind = section.get("kind")
    if kind == "mnist":
        _check_keys(
            section, "dataset",
            {"kind", "images", "labels", "test_images", "test_labels",
             "train_subset", "test_subset"},
            {"images", "labels"},
        )
        train = load_mnist_idx(section["images"], section["labels"])
        if "train_subset" in section:
            train = take_subset(train, int(section["train_subset"]), seed)
        test = None
        if "test_images" in section:
            test = load_mnist_idx(section["test_images"], section["test_labels"])
            if "test_subset" in section:
                test = take_subset(test, int(section["test_subset"]), seed + 1)
        return train, test
    if kind == "synthetic":
        _check_keys(section, "dataset", {"kind", "n", "dims", "classes", "test_n"},
                    {"n", "dims", "classes"})
        test_n = int(section.get("test_n", 0))
        full = synth_gaussian_mixture(int(section["n"]) + test_n, int(section["dims"]),
                                      int(section["classes"]), seed)
        if test_n == 0:
            return full, None
        n = int(section["n"])
        return (
            Dataset(full.features[:n], full.labels[:n]),
            Dataset(full.features[n:], full.labels[n:]),
        )
    if kind == "synthetic_images":
        _check_keys(section, "dataset",
                    {"kind", "n", "classes", "test_n", "side", "noise"}, {"n"})
        test_n = int(section.get("test_n", 0))
        full = synth_digit_images(
            int(section["n"]) + test_n,
            seed,
            classes=int(section.get("classes", 10)),
            side=int(section.get("side", 28)),
            noise=float(section.get("noise", 0.25)),
        )
        if test_n == 0:
            return full, None
        n = int(section["n"])
        return (
            Dataset(full.features[:n], full.labels[:n]),
            Dataset(full.features[n:], full.labels[n:]),
        )
    raise ConfigError(f"dataset: unknown kind {kind!r}")


def load_config(path: str, overrides: Sequence[str] = (), seed: int | None = None) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")

    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form path.key=value")
        dotted, _, value = item.partition("=")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = raw
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {dotted}: {part} is not an object")
        node[leaf] = parsed
    if seed is not None:
        raw["seed"] = seed

    # Validate every section's keys before touching any dataset I/O.
    _check_keys(raw, "config", {"seed", "dataset", "model", "train", "noise", "bounds"},
                {"dataset", "train", "noise"})
    cfg_seed = int(raw.get("seed", 0))
    model_sec = raw.get("model", {})
    _check_keys(model_sec, "model", {"hidden_dims"})
    hidden = tuple(int(h) for h in model_sec.get("hidden_dims", [512]))
    tr = raw["train"]
    _check_keys(tr, "train",
                {"eta", "batch_size", "epochs", "max_steps", "clip_threshold", "loss",
                 "loss_c0", "early_stop_patience", "early_stop_tol", "sample_mode"})
    bd = raw.get("bounds", {})
    _check_keys(bd, "bounds",
                {"subgaussian", "bounded", "m_samples", "probe_size",
                 "R", "c0", "c1", "alpha", "rate_steps"})

    train_data, test_data = _build_dataset(raw["dataset"], cfg_seed)
    try:
        loss = parse_loss(tr.get("loss", "cross_entropy"), float(tr.get("loss_c0", 1.0)))
        eta = tr.get("eta", 0.01)
        train_config = TrainConfig(
            eta=eta if np.isscalar(eta) else tuple(eta),
            batch_size=int(tr.get("batch_size", 64)),
            epochs=int(tr["epochs"]) if "epochs" in tr else None,
            max_steps=int(tr["max_steps"]) if "max_steps" in tr else None,
            clip_threshold=tr.get("clip_threshold"),
            loss=loss,
            sample_mode=tr.get("sample_mode", "epoch"),
            seed=cfg_seed,
            # Default patience 3; an explicit null disables early stopping.
            early_stop_patience=tr.get("early_stop_patience", 3),
            early_stop_tol=float(tr.get("early_stop_tol", 1e-4)),
            R=float(bd.get("R", 1.0)),
            c0=float(bd.get("c0", 1.0)),
            c1=float(bd.get("c1", 1.0)),
            alpha=float(bd.get("alpha", 0.5)),
        )
        noise, scale_c, scale_gamma = _build_noise(raw["noise"], train_data.n)
        options = BoundOptions(
            subgaussian=bool(bd.get("subgaussian", True)),
            bounded=bool(bd.get("bounded", True)),
            m_samples=int(bd.get("m_samples", 32)),
        )
    except GenboundError as exc:
        raise ConfigError(str(exc)) from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc

    return ExperimentConfig(
        raw=raw,
        seed=cfg_seed,
        train_data=train_data,
        test_data=test_data,
        hidden_dims=hidden,
        train=train_config,
        noise=noise,
        bound_options=options,
        probe_size=int(bd.get("probe_size", 512)),
        rate_steps=int(bd.get("rate_steps", 100)),
        scale_c=scale_c,
        scale_gamma=scale_gamma,
    )


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def _probe_batch(cfg: ExperimentConfig) -> Dataset:
    source = cfg.test_data if cfg.test_data is not None else cfg.train_data
    probe_n = min(cfg.probe_size, source.n)
    return take_subset(source, probe_n, cfg.seed + 17)


def _accuracy(model, data: Dataset) -> float:
    logits, _ = mlp_forward(model, data.features)
    return float((np.argmax(logits, axis=1) == data.labels).mean())


def _run_experiment(cfg: ExperimentConfig) -> tuple:
    model = init_mlp(
        (cfg.train_data.dims, *cfg.hidden_dims, cfg.train_data.num_classes), cfg.seed
    )
    probe = _probe_batch(cfg)
    observer = BoundObserver(
        probe.features, probe.labels, cfg.train_data.n,
        StreamKey(cfg.seed, STREAM_FLATNESS), cfg.bound_options,
    )
    result = run_training(
        cfg.train, model, cfg.train_data, test=cfg.test_data,
        observers=[observer], noise=cfg.noise,
    )
    return result, observer.rows


def _write_trace_csv(rows: list[BoundTrace], path: Path) -> None:
    lines = [",".join(TRACE_HEADER)]
    for r in rows:
        lines.append(",".join([
            _fmt(r.epoch), _fmt(r.step), _fmt(r.train_loss), _fmt(r.test_loss),
            _fmt(r.gap), _fmt(r.flatness_t2pm), _fmt(r.flatness_t1pm),
            _fmt(r.traj_increment), _fmt(r.bound_subg_t2pm), _fmt(r.bound_subg_t1pm),
            _fmt(r.bound_bounded), _fmt(r.bound_clipped), _fmt(r.sigma_k),
        ]))
    path.write_text("\n".join(lines) + "\n")


def cmd_train(cfg: ExperimentConfig, out_dir: Path) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    result, rows = _run_experiment(cfg)
    _write_trace_csv(rows, out_dir / "trace.csv")

    last = rows[-1] if rows else None
    summary = {
        "epochs_run": result.epochs_run,
        "stopped_early": result.stopped_early,
        "train_n": cfg.train_data.n,
        "test_n": cfg.test_data.n if cfg.test_data is not None else None,
        "num_params": result.model.num_params,
        "layer_dims": list(result.model.layer_dims),
        "final": {
            "train_loss": result.final_train_loss,
            "test_loss": result.final_test_loss,
            "train_accuracy": _accuracy(result.model, cfg.train_data),
            "test_accuracy": (
                _accuracy(result.model, cfg.test_data) if cfg.test_data is not None else None
            ),
            "flatness_t2pm": last.flatness_t2pm if last else None,
            "flatness_t1pm": last.flatness_t1pm if last else None,
            "bound_subg_t2pm": last.bound_subg_t2pm if last else None,
            "bound_subg_t1pm": last.bound_subg_t1pm if last else None,
            "bound_bounded": last.bound_bounded if last else None,
            "bound_clipped": last.bound_clipped if last else None,
        },
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out_dir / 'trace.csv'} ({len(rows)} rows) and summary.json")
    return 0


# --------------------------------------------------------------------------
# sweep
# --------------------------------------------------------------------------


def _sweep_row(axis: str, value, result=None, rows=None, model=None, cfg=None, total=None) -> list[str]:
    last = rows[-1] if rows else None
    test_acc = None
    if model is not None and cfg is not None and cfg.test_data is not None:
        test_acc = _accuracy(model, cfg.test_data)
    return [
        axis, _fmt(value),
        _fmt(result.final_train_loss if result else None),
        _fmt(result.final_test_loss if result else None),
        _fmt(test_acc),
        _fmt(last.flatness_t2pm if last else None),
        _fmt(last.flatness_t1pm if last else None),
        _fmt(last.bound_subg_t2pm if last else None),
        _fmt(last.bound_subg_t1pm if last else None),
        _fmt(last.bound_bounded if last else None),
        _fmt(last.bound_clipped if last else None),
        _fmt(total),
    ]


def cmd_sweep(cfg: ExperimentConfig, axis: str, values: list[float], out_dir: Path) -> int:
    if len(values) < 2:
        raise ConfigError("sweep needs at least 2 axis values")
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [",".join(SWEEP_HEADER)]
    summary: dict = {"axis": axis, "values": values}

    if axis == "n":
        if cfg.scale_gamma is None:
            raise ConfigError("n-sweep needs noise given as scale_c/scale_gamma")
        model = RateModel(
            noise_scale=cfg.scale_c,
            eta=cfg.train.eta_at(1),
            alpha=cfg.train.alpha,
            steps=cfg.rate_steps,
            c0=cfg.train.c0,
            c1=cfg.train.c1,
        )
        res = rate_sweep([int(v) for v in values], cfg.scale_gamma, model)
        for n, total in zip(res.n_values, res.bound_values):
            lines.append(",".join(_sweep_row("n", n, total=total)))
        summary["fitted_slope"] = res.slope
        summary["top_decade_slope"] = res.top_decade_slope
        print(f"n-sweep fitted slope: {res.slope:.6f} (top decade {res.top_decade_slope:.6f})")
    elif axis in ("width", "gamma"):
        for value in values:
            sub = _apply_axis(cfg, axis, value)
            result, rows = _run_experiment(sub)
            lines.append(",".join(_sweep_row(axis, value, result, rows, result.model, sub)))
            print(f"{axis}={value}: done ({result.epochs_run} epochs)")
    else:
        raise ConfigError(f"unknown sweep axis {axis!r} (choose n, width, or gamma)")

    (out_dir / "sweep.csv").write_text("\n".join(lines) + "\n")
    (out_dir / "sweep_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n"
    )
    print(f"wrote {out_dir / 'sweep.csv'}")
    return 0


def _apply_axis(cfg: ExperimentConfig, axis: str, value: float) -> ExperimentConfig:
    import copy

    sub = copy.copy(cfg)
    if axis == "width":
        sub.hidden_dims = tuple(int(value) for _ in (cfg.hidden_dims or (1,)))
    elif axis == "gamma":
        if cfg.scale_c is None:
            raise ConfigError("gamma-sweep needs noise given as scale_c/scale_gamma")
        sub.noise = NoiseSchedule.scaled(cfg.scale_c, float(value), cfg.train_data.n)
        sub.scale_gamma = float(value)
    return sub


# --------------------------------------------------------------------------
# check
# --------------------------------------------------------------------------


def cmd_check(inject_fault: str | None = None) -> int:
    from .checks import run_property_suite

    if inject_fault:
        bounds_mod._FAULT_HOOKS.add(inject_fault)
    try:
        results = run_property_suite()
    finally:
        bounds_mod._FAULT_HOOKS.discard(inject_fault)
    failures = 0
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failures += not ok
    print(f"{len(results) - failures}/{len(results)} properties passed")
    return 3 if failures else 0


# --------------------------------------------------------------------------
# render
# --------------------------------------------------------------------------


def cmd_render(trace_path: str, columns: list[str], out_file: Path) -> int:
    from .svg import render_line_chart

    with open(trace_path, newline="") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        records = list(reader)
    for col in columns:
        if col not in header:
            raise ConfigError(f"column {col!r} not present in {trace_path}")
    if "epoch" not in header:
        raise ConfigError(f"trace {trace_path} has no epoch column")

    series = {}
    for col in columns:
        xs, ys = [], []
        for rec in records:
            if rec[col] != "":
                xs.append(float(rec["epoch"]))
                ys.append(float(rec[col]))
        series[col] = (xs, ys)
    out_file.parent.mkdir(parents=True, exist_ok=True)
    out_file.write_text(render_line_chart(series, x_label="epoch"))
    print(f"wrote {out_file}")
    return 0


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="genbound", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a model and emit trace.csv + summary.json")
    train.add_argument("--config", required=True)
    train.add_argument("--seed", type=int)
    train.add_argument("--out", default="out")
    train.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="PATH=VALUE", help="override a config entry, e.g. train.epochs=2")

    sweep = sub.add_parser("sweep", help="sweep an axis and emit sweep.csv")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--seed", type=int)
    sweep.add_argument("--out", default="out")
    sweep.add_argument("--axis", required=True, choices=["n", "width", "gamma"])
    sweep.add_argument("--values", required=True,
                       help="comma-separated axis values, e.g. 64,512")
    sweep.add_argument("--set", dest="overrides", action="append", default=[])

    check = sub.add_parser("check", help="run the property verification suite")
    check.add_argument("--inject-fault", default=None,
                       help="testing hook: inject a named fault (e.g. delta-sign)")

    render = sub.add_parser("render", help="render trace columns to an SVG line chart")
    render.add_argument("--trace", required=True)
    render.add_argument("--columns", required=True, help="comma-separated column names")
    render.add_argument("--out-file", required=True)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "train":
            cfg = load_config(args.config, args.overrides, args.seed)
            return cmd_train(cfg, Path(args.out))
        if args.command == "sweep":
            values = [float(v) for v in args.values.split(",") if v != ""]
            cfg = load_config(args.config, args.overrides, args.seed)
            return cmd_sweep(cfg, args.axis, values, Path(args.out))
        if args.command == "check":
            return cmd_check(args.inject_fault)
        if args.command == "render":
            return cmd_render(args.trace, args.columns.split(","), Path(args.out_file))
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (GenboundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
