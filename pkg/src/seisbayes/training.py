"""Two-stage training: deterministic pre-training of the means, then
variational fitting of rho with the means frozen, and Monte Carlo prediction."""
from __future__ import annotations

import csv
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Grid2D, NormStats, TraceDataset, save_grid
from .errors import ConfigError, InvariantError, NonFiniteError, TrainingError
from .model import ForwardModel, InverseModel, mean_checksum, total_kl
from .tensor import Adam, Tensor, div_scalar, no_grad, square, sub, take, tsum
from .variational import DEFAULT_RHO, LayerMode, PriorConfig

MEAN_MODES = ("mc", "pretrained")


@dataclass
class TrainConfig:
    """``alpha1``/``alpha2`` default to 1/N_l and 1/(5 N_u) when left as None.
    ``batch_size`` None means full batch."""

    alpha1: float | None = None
    alpha2: float | None = None
    epochs_pretrain: int = 500
    epochs_uq: int = 300
    lr_pretrain: float = 1e-3
    lr_uq: float = 1e-3
    beta: float = 1.0
    M: int = 1
    N: int = 40
    batch_size: int | None = None
    rho_init: float = DEFAULT_RHO
    mean: str = "mc"
    seed: int = 0

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        if self.M < 1:
            raise ConfigError(f"M must be at least 1, got {self.M}")
        if self.N < 2:
            raise ConfigError(f"N must be at least 2, got {self.N}")
        if self.epochs_pretrain < 1 or self.epochs_uq < 1:
            raise ConfigError("epoch counts must be at least 1")
        if not (self.lr_pretrain > 0 and self.lr_uq > 0):
            raise ConfigError("learning rates must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch size must be positive")
        if self.mean not in MEAN_MODES:
            raise ConfigError(f"mean must be one of {MEAN_MODES}, got {self.mean!r}")
        for name in ("alpha1", "alpha2"):
            v = getattr(self, name)
            if v is not None and not v >= 0:
                raise ConfigError(f"{name} must be non-negative")


@dataclass
class History:
    """Per-epoch record.  Pre-training logs the alpha-weighted terms and
    kl = 0.  The variational fit logs unweighted sums of squares over the M
    draws, and ``objective`` = misfit / (beta M) + kl."""

    epoch: list[int] = field(default_factory=list)
    supervised: list[float] = field(default_factory=list)
    reconstruction: list[float] = field(default_factory=list)
    misfit: list[float] = field(default_factory=list)
    kl: list[float] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)

    def append(self, epoch, supervised, reconstruction, misfit, kl, objective, wall_ms):
        for name, v in zip(
            ("epoch", "supervised", "reconstruction", "misfit", "kl", "objective", "wall_ms"),
            (epoch, supervised, reconstruction, misfit, kl, objective, wall_ms),
        ):
            getattr(self, name).append(v)

    def __len__(self) -> int:
        return len(self.epoch)

    def write_csv(self, path, comments: dict | None = None) -> None:
        with open(path, "w", newline="") as fh:
            for k, v in (comments or {}).items():
                fh.write(f"# {k}={v}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "supervised", "reconstruction", "misfit", "kl", "objective", "wall_ms"])
            for row in zip(self.epoch, self.supervised, self.reconstruction, self.misfit, self.kl, self.objective, self.wall_ms):
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:-1]] + [f"{row[-1]:.3f}"])


def read_history_csv(path) -> tuple[dict, History]:
    comments, hist = {}, History()
    with open(path) as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("# "):
            k, _, v = line[2:].partition("=")
            comments[k] = v
        else:
            body.append(line)
    for row in list(csv.DictReader(body)):
        hist.append(
            int(row["epoch"]),
            *(float(row[k]) for k in ("supervised", "reconstruction", "misfit", "kl", "objective", "wall_ms")),
        )
    return comments, hist


def loss_weights(cfg: TrainConfig, n_labeled: int, n_unlabeled: int) -> tuple[float, float]:
    a1 = 1.0 / n_labeled if cfg.alpha1 is None else cfg.alpha1
    a2 = 1.0 / (5.0 * n_unlabeled) if cfg.alpha2 is None else cfg.alpha2
    return a1, a2


def _stream(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


def _check_dataset(dataset: TraceDataset, inverse: InverseModel) -> None:
    if dataset.n_traces == 0:
        raise ConfigError("dataset has no traces")
    if dataset.n_labeled == 0:
        raise ConfigError("dataset has no wells; the supervised term is undefined")
    if dataset.h != inverse.cfg.h:
        raise ConfigError(f"dataset patch half-width {dataset.h} != model h {inverse.cfg.h}")
    if dataset.length_ratio != inverse.cfg.length_ratio:
        raise ConfigError(
            f"dataset length ratio {dataset.length_ratio} != model length ratio {inverse.cfg.length_ratio}"
        )


class _Arrays:
    """Standardized training arrays, sliced per batch."""

    def __init__(self, dataset: TraceDataset):
        self.patches = dataset.patches().data
        self.seismic = dataset.seismic_std()
        self.ai = dataset.ai_std()
        self.is_well = np.zeros(dataset.n_traces, dtype=bool)
        self.is_well[dataset.well_indices] = True

    def batches(self, batch_size: int | None, rng: np.random.Generator | None):
        n = self.patches.shape[0]
        if batch_size is None or batch_size >= n:
            yield np.arange(n)
            return
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            yield np.sort(order[s : s + batch_size])


def data_terms(inverse, forward, arrays: _Arrays, idx: np.ndarray, a1: float, a2: float, rng=None):
    """Weighted supervised and reconstruction sums over the traces ``idx``."""
    x = Tensor(arrays.patches[idx], copy=False)
    pred = inverse(x, rng)
    recon = forward(pred, rng)
    rec = tsum(square(sub(Tensor(arrays.seismic[idx], copy=False), recon))) * a2
    wells = np.flatnonzero(arrays.is_well[idx])
    if wells.size:
        y = Tensor(arrays.ai[idx[wells]], copy=False)
        sup = tsum(square(sub(y, take(pred, wells, axis=0)))) * a1
    else:
        sup = None
    return sup, rec


def _val(t) -> float:
    return 0.0 if t is None else t.item()


def pretrain(inverse: InverseModel, forward: ForwardModel, dataset: TraceDataset, cfg: TrainConfig, log=None) -> History:
    """Stage 1: fit every mean parameter by minimizing the semi-supervised loss."""
    _check_dataset(dataset, inverse)
    for m in (inverse, forward):
        if m.variational:
            raise ConfigError("pre-training needs deterministic-mode models")
    arrays = _Arrays(dataset)
    a1, a2 = loss_weights(cfg, dataset.n_labeled, dataset.n_traces)
    opt = Adam(inverse.mean_parameters() + forward.mean_parameters(), lr=cfg.lr_pretrain)
    rng = _stream(cfg.seed, 0)
    hist = History()
    for epoch in range(1, cfg.epochs_pretrain + 1):
        t0 = time.perf_counter()
        sup_sum = rec_sum = 0.0
        try:
            for idx in arrays.batches(cfg.batch_size, rng):
                sup, rec = data_terms(inverse, forward, arrays, idx, a1, a2)
                loss = rec if sup is None else sup + rec
                opt.zero_grad()
                loss.backward()
                opt.step()
                sup_sum += _val(sup)
                rec_sum += rec.item()
        except NonFiniteError as exc:
            raise TrainingError(f"pre-training diverged at epoch {epoch}: {exc}") from exc
        total = sup_sum + rec_sum
        if not np.isfinite(total):
            raise TrainingError(f"pre-training diverged at epoch {epoch}: loss {total}")
        hist.append(epoch, sup_sum, rec_sum, total, 0.0, total, 1e3 * (time.perf_counter() - t0))
        if log is not None:
            log(epoch, hist)
    return hist


def fit_variational(
    inverse: InverseModel,
    forward: ForwardModel,
    dataset: TraceDataset,
    cfg: TrainConfig,
    prior: PriorConfig,
    log=None,
) -> History:
    """Stage 2: fit rho by minimizing misfit / (beta M) + KL with the means
    frozen.  The misfit is the plain sum of squared errors over the wells
    plus the reconstruction error over all traces (the Gaussian likelihood
    with variance 1/beta).  Raises InvariantError if any mean changed."""
    _check_dataset(dataset, inverse)
    models = (inverse, forward)
    for m in models:
        m.set_mode(LayerMode.VARIATIONAL, cfg.rho_init)
    before = mean_checksum(models)
    arrays = _Arrays(dataset)
    opt = Adam(inverse.rho_parameters() + forward.rho_parameters(), lr=cfg.lr_uq)
    noise = _stream(cfg.seed, 1)
    shuffle = _stream(cfg.seed, 2)
    scale = cfg.beta * cfg.M
    hist = History()
    n_batches = 1 if cfg.batch_size is None else -(-dataset.n_traces // cfg.batch_size)
    for epoch in range(1, cfg.epochs_uq + 1):
        t0 = time.perf_counter()
        sup_sum = rec_sum = kl_sum = 0.0
        try:
            for idx in arrays.batches(cfg.batch_size, shuffle):
                misfit = None
                for _ in range(cfg.M):
                    sup, rec = data_terms(inverse, forward, arrays, idx, 1.0, 1.0, noise)
                    term = rec if sup is None else sup + rec
                    misfit = term if misfit is None else misfit + term
                    sup_sum += _val(sup)
                    rec_sum += rec.item()
                # KL is spread evenly over the batches of an epoch
                kl = total_kl(models, prior)
                if n_batches > 1:
                    kl = div_scalar(kl, float(n_batches))
                objective = div_scalar(misfit, scale) + kl
                opt.zero_grad()
                objective.backward()
                opt.step()
                kl_sum += kl.item()
        except NonFiniteError as exc:
            raise TrainingError(f"variational fit diverged at epoch {epoch}: {exc}") from exc
        misfit_val = sup_sum + rec_sum
        obj = misfit_val / scale + kl_sum
        if not np.isfinite(obj):
            raise TrainingError(f"variational fit diverged at epoch {epoch}: objective {obj}")
        hist.append(epoch, sup_sum, rec_sum, misfit_val, kl_sum, obj, 1e3 * (time.perf_counter() - t0))
        if log is not None:
            log(epoch, hist)
    after = mean_checksum(models)
    if after != before:
        raise InvariantError(f"posterior means changed during variational fit ({before[:12]} -> {after[:12]})")
    return hist


# ---------------------------------------------------------------------------
# prediction


@dataclass
class PredictiveSummary:
    """Posterior mean and std in the model's (standardized) units."""

    mean: Grid2D
    std: Grid2D
    n_samples: int
    coverage_2sigma: float | None = None

    def __post_init__(self):
        if self.mean.shape != self.std.shape:
            raise ConfigError("mean and std grids differ in shape")
        if (self.std.values < 0).any():
            raise InvariantError("negative predictive std")

    def to_physical(self, stats: NormStats) -> "PredictiveSummary":
        return PredictiveSummary(
            self.mean.with_values(stats.invert(self.mean.values)),
            self.std.with_values(self.std.values * stats.std),
            self.n_samples,
            self.coverage_2sigma,
        )


class _ZeroNoise:
    """Stands in for an RNG; turns a variational pass into its mean path."""

    @staticmethod
    def standard_normal(shape):
        return np.zeros(shape)


def _thread_count(n: int) -> int:
    raw = os.environ.get("SEISBAYES_THREADS")
    if raw is None:
        cap = os.cpu_count() or 1
    else:
        try:
            cap = int(raw)
        except ValueError:
            raise ConfigError(f"SEISBAYES_THREADS must be an integer, got {raw!r}") from None
        if cap < 1:
            raise ConfigError("SEISBAYES_THREADS must be at least 1")
    return max(1, min(cap, n))


def _forward_np(model: InverseModel, patches: np.ndarray, rng) -> np.ndarray:
    with no_grad():
        return model(Tensor(patches, copy=False), rng).data


def reduce_samples(samples) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population variance in a fixed order, shifted by the first
    sample so identical samples give exactly zero variance."""
    ref = samples[0]
    acc = np.zeros_like(ref)
    for s in samples:
        acc += s - ref
    n = len(samples)
    dbar = acc / n
    sq = np.zeros_like(ref)
    for s in samples:
        d = (s - ref) - dbar
        sq += d * d
    return ref + dbar, sq / n


def predict_mc(inverse: InverseModel, patches, N: int, seed: int, mean: str = "mc", threads: int | None = None) -> PredictiveSummary:
    """N stochastic passes with independent streams spawned from ``seed``.
    ``mean='pretrained'`` replaces the MC mean with the mean-path output."""
    if N < 2:
        raise ConfigError(f"predict_mc needs N >= 2, got {N}")
    if mean not in MEAN_MODES:
        raise ConfigError(f"mean must be one of {MEAN_MODES}")
    x = patches.data if isinstance(patches, Tensor) else np.asarray(patches, dtype=np.float64)
    variational = inverse.variational
    streams = np.random.SeedSequence(seed).spawn(N)

    def one(i):
        return _forward_np(inverse, x, np.random.default_rng(streams[i]) if variational else None)

    workers = _thread_count(N) if threads is None else max(1, min(threads, N))
    if workers == 1:
        samples = [one(i) for i in range(N)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(one, range(N)))
    mu, var = reduce_samples(samples)
    if mean == "pretrained":
        mu = _forward_np(inverse, x, _ZeroNoise() if variational else None)
    return PredictiveSummary(
        Grid2D.from_array(mu, "impedance"),
        Grid2D.from_array(np.sqrt(var), "uncertainty"),
        N,
    )


def coverage_2sigma(summary: PredictiveSummary, truth: Grid2D) -> float:
    """Fraction of cells with |truth - mean| < 2 std."""
    if truth.shape != summary.mean.shape:
        raise ConfigError(f"truth shape {truth.shape} != prediction shape {summary.mean.shape}")
    inside = np.abs(truth.values - summary.mean.values) < 2.0 * summary.std.values
    return float(inside.mean())


def save_summary(summary: PredictiveSummary, out_dir) -> None:
    out = Path(out_dir)
    save_grid(summary.mean, out / "mean.grid")
    save_grid(summary.std, out / "std.grid")
