"""Synthetic layered-earth data, grid file I/O, standardization, wells and patches."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError, ShapeError
from .tensor import Tensor

GRID_KINDS = ("seismic", "impedance", "uncertainty", "difference")
GRID_MAGIC = b"SBGRID01"
MANIFEST_FORMAT = "seisbayes-manifest/1"


@dataclass
class Grid2D:
    """Trace-major 2-d grid: ``values[i, t]`` is sample t of trace i."""

    n_traces: int
    n_samples: int
    values: np.ndarray
    kind: str = "seismic"

    def __post_init__(self):
        if self.kind not in GRID_KINDS:
            raise ConfigError(f"unknown grid kind {self.kind!r}; expected one of {GRID_KINDS}")
        v = np.asarray(self.values, dtype=np.float64)
        if v.size != self.n_traces * self.n_samples:
            raise ShapeError(f"{v.size} values for a {self.n_traces}x{self.n_samples} grid")
        v = v.reshape(self.n_traces, self.n_samples)
        bad = np.flatnonzero(~np.isfinite(v))
        if bad.size:
            raise ParseError(f"non-finite grid value at flat index {bad[0]}")
        self.values = v

    @classmethod
    def from_array(cls, values, kind: str = "seismic") -> "Grid2D":
        v = np.asarray(values, dtype=np.float64)
        if v.ndim != 2:
            raise ShapeError(f"grid array must be 2-d (traces, samples), got {v.shape}")
        return cls(v.shape[0], v.shape[1], v.copy(), kind)

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_traces, self.n_samples

    def with_values(self, values, kind: str | None = None) -> "Grid2D":
        return Grid2D(self.n_traces, self.n_samples, np.asarray(values, dtype=np.float64).copy(), kind or self.kind)


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def invert(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean


def compute_stats(values: np.ndarray) -> NormStats:
    values = np.asarray(values, dtype=np.float64)
    std = float(values.std())
    if not std > 0.0:
        raise ConfigError("cannot standardize a constant grid (zero variance)")
    return NormStats(float(values.mean()), std)


def standardize(grid: Grid2D, stats: NormStats | None = None) -> tuple[Grid2D, NormStats]:
    """Global zero-mean/unit-variance transform; ``stats`` overrides the
    grid's own moments."""
    stats = compute_stats(grid.values) if stats is None else stats
    return grid.with_values(stats.apply(grid.values)), stats


def destandardize(grid: Grid2D, stats: NormStats) -> Grid2D:
    return grid.with_values(stats.invert(grid.values))


def select_wells(n_traces: int, n_wells: int) -> np.ndarray:
    """Evenly spread trace indices: the center sample floor((j + 0.5) * n / k)
    of each of k equal bins, deduplicated."""
    if n_traces < 1 or n_wells < 1:
        raise ConfigError("need at least one trace and one well")
    n_wells = min(n_wells, n_traces)
    idx = [int(math.floor((j + 0.5) * n_traces / n_wells)) for j in range(n_wells)]
    return np.unique(np.asarray(idx, dtype=np.int64))


def make_patches(seismic, h: int) -> Tensor:
    """(N, 2h+1, T) patches; patch i holds traces i-h..i+h, zeros off the edge."""
    values = seismic.values if isinstance(seismic, Grid2D) else np.asarray(seismic, dtype=np.float64)
    if h < 0:
        raise ConfigError("patch half-width must be non-negative")
    n, t = values.shape
    padded = np.zeros((n + 2 * h, t))
    padded[h : h + n] = values
    idx = np.arange(n)[:, None] + np.arange(2 * h + 1)[None, :]
    return Tensor(padded[idx], copy=False)


@dataclass
class TraceDataset:
    """Seismic and impedance grids (physical units) plus well bookkeeping.

    Impedance statistics are taken from the well traces only, so the
    unlabeled impedance never influences training.
    """

    seismic: Grid2D
    ai: Grid2D
    well_indices: np.ndarray
    h: int
    seismic_stats: NormStats
    ai_stats: NormStats

    def __post_init__(self):
        self.well_indices = np.asarray(self.well_indices, dtype=np.int64)
        w = self.well_indices
        if w.size and (w.min() < 0 or w.max() >= self.seismic.n_traces):
            raise ConfigError(f"well indices out of range [0, {self.seismic.n_traces})")
        if w.size and np.any(np.diff(w) <= 0):
            raise ConfigError("well indices must be sorted and unique")
        if self.ai.n_traces != self.seismic.n_traces:
            raise ShapeError("seismic and impedance grids have different trace counts")
        if self.ai.n_samples not in (self.seismic.n_samples, 4 * self.seismic.n_samples):
            raise ShapeError(
                f"impedance length {self.ai.n_samples} must equal or be 4x seismic length {self.seismic.n_samples}"
            )
        if self.h < 0:
            raise ConfigError("patch half-width must be non-negative")

    @classmethod
    def build(cls, seismic: Grid2D, ai: Grid2D, well_indices, h: int) -> "TraceDataset":
        wells = np.asarray(well_indices, dtype=np.int64)
        ds = cls(seismic, ai, wells, h, compute_stats(seismic.values), NormStats(0.0, 1.0))
        if wells.size:
            ds.ai_stats = compute_stats(ai.values[wells])
        return ds

    @property
    def length_ratio(self) -> int:
        return self.ai.n_samples // self.seismic.n_samples

    @property
    def n_labeled(self) -> int:
        return int(self.well_indices.size)

    @property
    def n_traces(self) -> int:
        return self.seismic.n_traces

    def seismic_std(self) -> np.ndarray:
        return self.seismic_stats.apply(self.seismic.values)

    def ai_std(self) -> np.ndarray:
        return self.ai_stats.apply(self.ai.values)

    def patches(self) -> Tensor:
        return make_patches(self.seismic_std(), self.h)


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class SynthConfig:
    n_traces: int = 200
    n_samples: int = 256
    layers: tuple[int, int] = (10, 18)
    ai_range: tuple[float, float] = (3000.0, 12000.0)
    peak_freq: float = 25.0
    dt: float = 0.002
    noise_std: float = 0.005
    dip: float = 0.12
    fault_position: float = 0.6
    fault_throw: float = 10.0
    undulation_amp: float = 4.0
    undulation_wavelength: float = 150.0
    ai_upsample: int = 1
    n_wells: int = 10
    h: int = 2
    seed: int = 0

    def __post_init__(self):
        self.layers = tuple(int(v) for v in self.layers)
        self.ai_range = tuple(float(v) for v in self.ai_range)
        lo, hi = self.layers
        if not 1 <= lo <= hi:
            raise ConfigError(f"layer count range {self.layers} is empty")
        if not 0 < self.ai_range[0] < self.ai_range[1]:
            raise ConfigError(f"impedance range {self.ai_range} must be positive and increasing")
        if self.n_traces < 1 or self.n_samples < 2:
            raise ConfigError("grid needs at least one trace and two samples")
        if self.noise_std < 0:
            raise ConfigError("noise std must be non-negative")
        if self.peak_freq <= 0 or self.dt <= 0:
            raise ConfigError("wavelet frequency and sampling must be positive")
        if self.peak_freq * self.dt >= 0.5:
            raise ConfigError("peak frequency above Nyquist")
        if self.ai_upsample not in (1, 4):
            raise ConfigError("impedance sampling factor must be 1 or 4")
        if self.undulation_wavelength <= 0:
            raise ConfigError("undulation wavelength must be positive")
        if not 0.0 <= self.fault_position <= 1.0:
            raise ConfigError("fault position is a fraction of the section width")
        if self.n_wells < 1 or self.h < 0:
            raise ConfigError("need at least one well and a non-negative patch half-width")


def ricker(peak_freq: float, dt: float, half_length: int | None = None) -> np.ndarray:
    """Zero-phase Ricker wavelet sampled at ``dt``, odd length, peak 1 at the center."""
    if half_length is None:
        half_length = int(math.ceil(1.5 / (peak_freq * dt)))
    t = np.arange(-half_length, half_length + 1) * dt
    a = (math.pi * peak_freq * t) ** 2
    return (1.0 - 2.0 * a) * np.exp(-a)


def reflectivity(ai: np.ndarray) -> np.ndarray:
    """r_t = (AI_{t+1} - AI_t) / (AI_{t+1} + AI_t), zero at the last sample."""
    ai = np.asarray(ai, dtype=np.float64)
    r = np.zeros_like(ai)
    r[..., :-1] = (ai[..., 1:] - ai[..., :-1]) / (ai[..., 1:] + ai[..., :-1])
    return r


def convolve_traces(refl: np.ndarray, wavelet: np.ndarray) -> np.ndarray:
    """Centered convolution of every trace with an odd-length wavelet."""
    refl = np.atleast_2d(refl)
    lo = len(wavelet) // 2
    n = refl.shape[1]
    # slice the full product; mode="same" would return the wavelet's length for short traces
    return np.stack([np.convolve(r, wavelet)[lo : lo + n] for r in refl])


def _layered_impedance(cfg: SynthConfig, rng: np.random.Generator, n_fine: int) -> np.ndarray:
    scale = n_fine / cfg.n_samples
    n_layers = int(rng.integers(cfg.layers[0], cfg.layers[1] + 1))
    log_lo, log_hi = np.log(cfg.ai_range)
    # compaction trend plus random contrasts, all in log space
    trend = np.linspace(0.15, 0.85, n_layers + 1)
    log_ai = log_lo + (log_hi - log_lo) * np.clip(trend + rng.uniform(-0.15, 0.15, n_layers + 1), 0.0, 1.0)
    tops = np.sort(rng.uniform(0.04, 0.96, n_layers)) * cfg.n_samples
    x = np.arange(cfg.n_traces, dtype=np.float64)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    shift = cfg.dip * x + cfg.undulation_amp * np.sin(2.0 * math.pi * x / cfg.undulation_wavelength + phase)
    shift = shift + np.where(x >= cfg.fault_position * cfg.n_traces, cfg.fault_throw, 0.0)
    depth = (tops[None, :] + shift[:, None]) * scale
    t = np.arange(n_fine, dtype=np.float64)
    layer = (depth[:, None, :] <= t[None, :, None]).sum(axis=2)
    return np.exp(log_ai[layer])


def generate_synthetic(cfg: SynthConfig) -> TraceDataset:
    """Layered earth with dip, an undulation and a fault, convolved with a
    Ricker wavelet; deterministic given ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    r = cfg.ai_upsample
    ai = _layered_impedance(cfg, rng, r * cfg.n_samples)
    seis_fine = convolve_traces(reflectivity(ai), ricker(cfg.peak_freq, cfg.dt / r))
    seismic = seis_fine[:, ::r]
    if cfg.noise_std > 0:
        seismic = seismic + rng.normal(0.0, cfg.noise_std, seismic.shape)
    return TraceDataset.build(
        Grid2D.from_array(seismic, "seismic"),
        Grid2D.from_array(ai, "impedance"),
        select_wells(cfg.n_traces, cfg.n_wells),
        cfg.h,
    )


# ---------------------------------------------------------------------------
# grid files


def save_grid(grid: Grid2D, path) -> None:
    """Binary (``SBGRID01``) unless the suffix is ``.csv``."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        np.savetxt(path, grid.values, fmt="%.9g", delimiter=",")
        return
    header = json.dumps(
        {
            "n_traces": grid.n_traces,
            "n_samples": grid.n_samples,
            "kind": grid.kind,
            "dtype": "f32le",
            "layout": "trace-major",
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(grid.values.astype("<f4").tobytes())


def load_grid(path, kind: str = "seismic") -> Grid2D:
    """Load a binary or CSV grid; ``kind`` applies to CSV only."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return _load_csv(path, kind)
    return _load_binary(path)


def _load_binary(path: Path) -> Grid2D:
    raw = path.read_bytes()
    if raw[:8] != GRID_MAGIC:
        raise ParseError(f"{path}: bad magic {raw[:8]!r}, expected {GRID_MAGIC!r}")
    if len(raw) < 12:
        raise ParseError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12 : 12 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"{path}: unreadable grid header ({exc})") from None
    if header.get("dtype") != "f32le" or header.get("layout") != "trace-major":
        raise ParseError(f"{path}: unsupported encoding {header.get('dtype')}/{header.get('layout')}")
    n, t = int(header["n_traces"]), int(header["n_samples"])
    start = 12 + hlen
    expected = 4 * n * t
    actual = len(raw) - start
    if actual != expected:
        raise ParseError(f"{path}: payload has {actual} bytes, header implies {expected}")
    values = np.frombuffer(raw, dtype="<f4", offset=start).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise ParseError(f"{path}: non-finite value at byte offset {start + 4 * int(bad[0])}")
    return Grid2D(n, t, values, header.get("kind", "seismic"))


def _load_csv(path: Path, kind: str) -> Grid2D:
    rows = []
    offset = 0
    with open(path, "rb") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.decode()
            if text.strip():
                try:
                    row = [float(v) for v in text.split(",")]
                except ValueError as exc:
                    raise ParseError(f"{path}: line {lineno} (byte offset {offset}): {exc}") from None
                finite = np.isfinite(row)
                if not finite.all():
                    col = int(np.argmin(finite))
                    raise ParseError(f"{path}: non-finite value at line {lineno}, column {col + 1} (byte offset {offset})")
                if rows and len(row) != len(rows[0]):
                    raise ParseError(f"{path}: line {lineno} has {len(row)} values, expected {len(rows[0])}")
                rows.append(row)
            offset += len(line)
    if not rows:
        raise ParseError(f"{path}: empty grid")
    return Grid2D.from_array(np.asarray(rows), kind)


# ---------------------------------------------------------------------------
# manifests


def save_dataset(dataset: TraceDataset, out_dir, manifest_name: str = "manifest.json") -> Path:
    """Write both grids and a manifest referencing them; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_grid(dataset.seismic, out / "seismic.grid")
    save_grid(dataset.ai, out / "impedance.grid")
    manifest = {
        "format": MANIFEST_FORMAT,
        "seismic": "seismic.grid",
        "ai": "impedance.grid",
        "well_indices": [int(i) for i in dataset.well_indices],
        "h": dataset.h,
        "stats": {"seismic": asdict(dataset.seismic_stats), "ai": asdict(dataset.ai_stats)},
    }
    path = out / manifest_name
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(manifest_path) -> TraceDataset:
    path = Path(manifest_path)
    if not path.is_file():
        raise ConfigError(f"manifest {path} does not exist")
    try:
        m = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if m.get("format") != MANIFEST_FORMAT:
        raise ParseError(f"{path}: unknown manifest format {m.get('format')!r}")
    base = path.parent
    seismic = load_grid(base / m["seismic"])
    ai = load_grid(base / m["ai"])
    stats = m["stats"]
    return TraceDataset(
        seismic,
        ai,
        np.asarray(m["well_indices"], dtype=np.int64),
        int(m["h"]),
        NormStats(**stats["seismic"]),
        NormStats(**stats["ai"]),
    )


__all__ = [
    "GRID_KINDS",
    "Grid2D",
    "NormStats",
    "SynthConfig",
    "TraceDataset",
    "compute_stats",
    "convolve_traces",
    "destandardize",
    "generate_synthetic",
    "load_dataset",
    "load_grid",
    "make_patches",
    "reflectivity",
    "ricker",
    "save_dataset",
    "save_grid",
    "select_wells",
    "standardize",
]
