"""Command-line pipeline: synth -> pretrain -> uq -> predict -> eval, plus plot.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime or
training error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import shutil
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Grid2D, SynthConfig, generate_synthetic, load_dataset, load_grid, save_dataset, save_grid
from .errors import (
    ConfigError,
    InvariantError,
    NonFiniteError,
    ParseError,
    SeisBayesError,
    ShapeError,
    TrainingError,
    UndefinedMetricError,
    UsageError,
)
from .metrics import MetricsReport, abs_difference, evaluate
from .model import (
    ForwardModelConfig,
    InverseModelConfig,
    build_models,
    load_checkpoint,
    mean_checksum,
    save_checkpoint,
)
from .training import TrainConfig, coverage_2sigma, fit_variational, predict_mc, pretrain
from .variational import LayerMode, PriorConfig

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3

# seeds live at the top level only
_SECTIONS = {
    "synth": (SynthConfig, {"seed"}),
    "inverse": (InverseModelConfig, set()),
    "forward": (ForwardModelConfig, set()),
    "train": (TrainConfig, {"seed"}),
    "prior": (PriorConfig, set()),
}


@dataclass
class RunConfig:
    """One JSON document drives every stage.  Section dicts hold only the
    keys the user set; ``seed`` is global."""

    synth: dict = field(default_factory=dict)
    inverse: dict = field(default_factory=dict)
    forward: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    prior: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        for name, (cls, banned) in _SECTIONS.items():
            section = getattr(self, name)
            if not isinstance(section, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            allowed = {f.name for f in dataclasses.fields(cls)} - banned
            unknown = sorted(set(section) - allowed)
            if unknown:
                raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        # fail early on invalid values
        self.synth_config()
        self.train_config()
        self.prior_config()

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(d) - {f.name for f in dataclasses.fields(cls)})
        if unknown:
            raise ConfigError(f"unknown top-level config key(s): {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def synth_config(self) -> SynthConfig:
        return _build(SynthConfig, self.synth, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return _build(TrainConfig, self.train, seed=self.seed)

    def prior_config(self) -> PriorConfig:
        return _build(PriorConfig, self.prior)

    def model_configs(self, h: int, length_ratio: int) -> tuple[InverseModelConfig, ForwardModelConfig]:
        """Model configs matched to a dataset's patch width and sampling ratio
        unless the user set those fields explicitly."""
        inv = {"h": h, "upsample": length_ratio > 1, "length_ratio": length_ratio}
        if length_ratio > 1:
            inv["upsample_layers"] = int(np.log2(length_ratio))
        inv.update(self.inverse)
        fwd = {"length_ratio": length_ratio}
        fwd.update(self.forward)
        inv_cfg = _build(InverseModelConfig, inv)
        if inv_cfg.h != h:
            raise ConfigError(f"config inverse.h={inv_cfg.h} but the dataset was built with h={h}")
        return inv_cfg, _build(ForwardModelConfig, fwd)


def _build(cls, values: dict, **extra):
    try:
        return cls(**{**values, **extra})
    except TypeError as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None


def _parse_json(text: str, source: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_override(d: dict, assignment: str) -> None:
    """Apply ``a.b=value`` (value parsed as JSON, else taken as a string)."""
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {assignment!r} is not of the form key.path=value")
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-object")
    node[parts[-1]] = _parse_value(raw)


def load_run_config(path, overrides=(), seed: int | None = None) -> RunConfig:
    d: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        d = _parse_json(p.read_text(), str(p))
        if not isinstance(d, dict):
            raise ConfigError(f"{p}: config must be a JSON object")
    for item in overrides:
        apply_override(d, item)
    if seed is not None:
        d["seed"] = seed
    return RunConfig.from_dict(d)


def _require_files(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise ConfigError(f"input file {p} does not exist")


def _prepare_out_dir(path: Path, force: bool) -> None:
    if path.exists():
        if not force:
            raise UsageError(f"output directory {path} exists; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    path.mkdir(parents=True)


def _log_path(out: Path, given) -> Path:
    return Path(given) if given else out.with_name(out.name + ".log.csv")


def _echo(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    rc = load_run_config(args.config, args.set, args.seed)
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    ds = generate_synthetic(rc.synth_config())
    save_dataset(ds, out)
    _echo(f"traces={ds.n_traces} samples={ds.seismic.n_samples} ai_samples={ds.ai.n_samples} wells={ds.n_labeled} h={ds.h}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    _require_files(args.manifest)
    rc = load_run_config(args.config, args.set, args.seed)
    ds = load_dataset(args.manifest)
    inv_cfg, fwd_cfg = rc.model_configs(ds.h, ds.length_ratio)
    inverse, forward = build_models(inv_cfg, fwd_cfg, rc.seed)
    tc = rc.train_config()
    hist = pretrain(inverse, forward, ds, tc)
    out = Path(args.out)
    save_checkpoint(out, inverse, forward, {"stage": "pretrain", "seed": rc.seed})
    hist.write_csv(_log_path(out, args.log), {"stage": "pretrain", "epochs": tc.epochs_pretrain, "seed": rc.seed})
    _echo(f"pretrain: supervised {hist.supervised[0]:.6g} -> {hist.supervised[-1]:.6g}; wrote {out}")
    return EXIT_OK


def cmd_uq(args) -> int:
    _require_files(args.checkpoint, args.manifest)
    overrides = list(args.set)
    if args.sigma0_sq is not None:
        overrides.append(f"prior.sigma0_sq={args.sigma0_sq!r}")
    if args.beta is not None:
        overrides.append(f"train.beta={args.beta!r}")
    rc = load_run_config(args.config, overrides, args.seed)
    ds = load_dataset(args.manifest)
    inverse, forward, _ = load_checkpoint(args.checkpoint)
    for m in (inverse, forward):
        m.set_mode(LayerMode.DETERMINISTIC)
    tc, prior = rc.train_config(), rc.prior_config()
    before = mean_checksum((inverse, forward))
    hist = fit_variational(inverse, forward, ds, tc, prior)
    out = Path(args.out)
    save_checkpoint(out, inverse, forward, {"stage": "uq", "seed": rc.seed, "sigma0_sq": prior.sigma0_sq, "beta": tc.beta})
    hist.write_csv(
        _log_path(out, args.log),
        {"stage": "uq", "sigma0_sq": repr(prior.sigma0_sq), "beta": repr(tc.beta), "M": tc.M, "epochs": tc.epochs_uq, "seed": rc.seed},
    )
    _echo(f"uq: objective {hist.objective[0]:.6g} -> {hist.objective[-1]:.6g}; mean checksum {before[:16]} unchanged; wrote {out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    _require_files(args.checkpoint, args.manifest)
    if args.N < 2:
        raise ConfigError(f"--N must be at least 2, got {args.N}")
    ds = load_dataset(args.manifest)
    inverse, _, _ = load_checkpoint(args.checkpoint)
    if inverse.cfg.h != ds.h:
        raise ConfigError(f"checkpoint h={inverse.cfg.h} does not match dataset h={ds.h}")
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    summary = predict_mc(inverse, ds.patches(), args.N, args.seed, mean=args.mean)
    truth = ds.ai.with_values(ds.ai_std())
    summary.coverage_2sigma = coverage_2sigma(summary, truth)
    save_grid(summary.mean, out / "mean.grid")
    save_grid(summary.std, out / "std.grid")
    save_grid(truth, out / "truth.grid")
    save_grid(abs_difference(summary.mean, truth), out / "absdiff.grid")
    phys = summary.to_physical(ds.ai_stats)
    save_grid(phys.mean, out / "mean_physical.grid")
    save_grid(phys.std, out / "std_physical.grid")
    report = evaluate(summary.mean, truth, dataset_id=str(Path(args.manifest).resolve().parent.name), method_id=f"mc-{args.mean}")
    payload = {
        "N": args.N,
        "seed": args.seed,
        "mean": args.mean,
        "coverage_2sigma": summary.coverage_2sigma,
        "metrics": report.to_dict(),
    }
    (out / "predict_report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _echo(f"predict: N={args.N} coverage={summary.coverage_2sigma:.4f} pcc={report.pcc:.4f}; wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _require_files(args.pred, args.truth, args.manifest)
    pred, truth = load_grid(args.pred, "impedance"), load_grid(args.truth, "impedance")
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction grid {pred.shape} and truth grid {truth.shape} differ in shape")
    stats = None
    if args.physical:
        if args.manifest is None:
            raise UsageError("--physical needs --manifest for the normalization stats")
        stats = load_dataset(args.manifest).ai_stats
    report = evaluate(pred, truth, stats=stats, physical=args.physical, dataset_id=args.dataset_id, method_id=args.method_id)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    sys.stdout.write(text)
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plotting import write_ppm

    _require_files(args.grid)
    grid = load_grid(args.grid)
    lo, hi = args.clip
    write_ppm(grid, args.out, colormap=args.colormap, clip_percentiles=(lo, hi))
    if args.csv:
        save_grid(grid, Path(args.csv).with_suffix(".csv"))
    _echo(f"plot: {grid.n_samples}x{grid.n_traces} image written to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="seisbayes", description="Bayesian seismic impedance inversion")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="RunConfig JSON file")
            p.add_argument("--set", action="append", default=[], metavar="KEY.PATH=VALUE", help="override a config field")
            p.add_argument("--seed", type=int, default=None, help="global seed (overrides the config)")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite an existing output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="stage 1: fit the means")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="CSV log path (default: <out>.log.csv)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("uq", help="stage 2: fit the posterior scales")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="CSV log path (default: <out>.log.csv)")
    p.add_argument("--sigma0-sq", type=float, default=None, help="prior variance override")
    p.add_argument("--beta", type=float, default=None, help="likelihood precision override")
    p.set_defaults(func=cmd_uq)

    p = sub.add_parser("predict", help="Monte Carlo posterior prediction")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--N", type=int, default=40, help="number of MC samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mean", choices=("mc", "pretrained"), default="mc")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="metrics between two grids")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--manifest", help="dataset manifest (for --physical)")
    p.add_argument("--physical", action="store_true", help="compute in physical units")
    p.add_argument("--dataset-id", default="")
    p.add_argument("--method-id", default="")
    p.add_argument("--out", help="write the report JSON here")
    p.add_argument("--csv", help="write a one-row CSV report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="render a grid as a binary PPM image")
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--colormap", default="seismic", choices=("gray", "seismic", "viridis"))
    p.add_argument("--clip", type=float, nargs=2, default=(2.0, 98.0), metavar=("LO", "HI"))
    p.add_argument("--csv", help="also dump the raw grid values as CSV")
    p.set_defaults(func=cmd_plot)
    return ap


_USAGE_ERRORS = (ConfigError, UsageError, ParseError, ShapeError, UndefinedMetricError)
_RUNTIME_ERRORS = (TrainingError, InvariantError, NonFiniteError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _RUNTIME_ERRORS as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except SeisBayesError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
