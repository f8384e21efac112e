"""The synthetic end-to-end benchmark (200 traces x 256 samples, 10 wells)."""
from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from .data import SynthConfig, generate_synthetic, save_dataset, save_grid
from .metrics import abs_difference, evaluate, pcc
from .model import ForwardModelConfig, InverseModelConfig, build_models, save_checkpoint
from .training import TrainConfig, coverage_2sigma, fit_variational, pretrain, predict_mc
from .variational import PriorConfig

# Narrower than the library defaults so the whole run fits a desk budget on
# one core; see README.
BENCHMARK_MODEL = {"branch_channels": 2, "serial_channels": 4, "gru_hidden": 8, "regression_hidden": 8}


def run_benchmark(
    out_dir,
    *,
    epochs_pretrain: int = 500,
    epochs_uq: int = 300,
    N: int = 40,
    seed: int = 0,
    model_overrides: dict | None = None,
    synth_overrides: dict | None = None,
    progress: bool = False,
) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}

    def log_every(stage, total):
        def log(epoch, hist):
            if progress and (epoch == 1 or epoch % 50 == 0 or epoch == total):
                print(f"[{stage}] epoch {epoch}/{total} objective {hist.objective[-1]:.6g} ({hist.wall_ms[-1]:.0f} ms)", flush=True)
        return log

    t = time.perf_counter()
    synth = SynthConfig(seed=seed, **(synth_overrides or {}))
    ds = generate_synthetic(synth)
    save_dataset(ds, out / "data")
    timings["synth"] = time.perf_counter() - t

    inv_cfg = InverseModelConfig(h=synth.h, **(model_overrides if model_overrides is not None else BENCHMARK_MODEL))
    inv, fwd = build_models(inv_cfg, ForwardModelConfig(), seed)
    cfg = TrainConfig(epochs_pretrain=epochs_pretrain, epochs_uq=epochs_uq, N=N, seed=seed)

    t = time.perf_counter()
    h_pre = pretrain(inv, fwd, ds, cfg, log=log_every("pretrain", epochs_pretrain))
    timings["pretrain"] = time.perf_counter() - t
    h_pre.write_csv(out / "pretrain_log.csv")

    t = time.perf_counter()
    prior = PriorConfig()
    h_uq = fit_variational(inv, fwd, ds, cfg, prior, log=log_every("uq", epochs_uq))
    timings["uq"] = time.perf_counter() - t
    h_uq.write_csv(out / "uq_log.csv", {"sigma0_sq": prior.sigma0_sq, "beta": cfg.beta, "M": cfg.M})
    save_checkpoint(out / "model.ckpt", inv, fwd)

    t = time.perf_counter()
    summary = predict_mc(inv, ds.patches(), N, seed)
    timings["predict"] = time.perf_counter() - t

    truth = ds.ai.with_values(ds.ai_std())
    summary.coverage_2sigma = coverage_2sigma(summary, truth)
    diff = abs_difference(summary.mean, truth)
    report = evaluate(summary.mean, truth, dataset_id="synthetic-200x256", method_id="bnn-mc")
    for name, grid in (("mean", summary.mean), ("std", summary.std), ("absdiff", diff)):
        save_grid(grid, out / f"{name}.grid")
    (out / "report.json").write_text(report.to_json())

    std_err_corr = pcc(summary.std.values, diff.values) if np.ptp(summary.std.values) > 0 else 0.0
    return {
        "metrics": report.to_dict(),
        "coverage_2sigma": summary.coverage_2sigma,
        "std_abs_diff_pcc": std_err_corr,
        "mean_std": float(summary.std.values.mean()),
        "mean_abs_diff": float(diff.values.mean()),
        "pretrain_supervised_first_last": [h_pre.supervised[0], h_pre.supervised[-1]],
        "uq_objective_first_last": [h_uq.objective[0], h_uq.objective[-1]],
        "timings_s": timings,
        "model": json.loads(json.dumps(inv_cfg.__dict__, default=list)),
    }
