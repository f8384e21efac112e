"""Image-style evaluation metrics for predicted impedance grids."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import Grid2D, NormStats
from .errors import ParseError, ShapeError, UndefinedMetricError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _arrays(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = pred.values if isinstance(pred, Grid2D) else np.asarray(pred, dtype=np.float64)
    t = truth.values if isinstance(truth, Grid2D) else np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"prediction shape {p.shape} != truth shape {t.shape}")
    if p.size == 0:
        raise ShapeError("empty grids")
    return p, t


def _require_varying(t: np.ndarray, name: str) -> None:
    if not np.ptp(t) > 0:
        raise UndefinedMetricError(f"{name} is undefined for a constant truth grid")


def mse(pred, truth) -> float:
    p, t = _arrays(pred, truth)
    return float(np.mean((p - t) ** 2))


def pcc(pred, truth) -> float:
    """Pearson correlation over all cells."""
    p, t = _arrays(pred, truth)
    _require_varying(t, "PCC")
    dp, dt = p - p.mean(), t - t.mean()
    denom = math.sqrt(float(np.sum(dp * dp)) * float(np.sum(dt * dt)))
    if denom == 0.0:
        raise UndefinedMetricError("PCC is undefined for a constant prediction")
    return float(np.clip(np.sum(dp * dt) / denom, -1.0, 1.0))


def r2(pred, truth) -> float:
    """1 - SSE / SST."""
    p, t = _arrays(pred, truth)
    _require_varying(t, "r2")
    sse = float(np.sum((p - t) ** 2))
    sst = float(np.sum((t - t.mean()) ** 2))
    return 1.0 - sse / sst


def dynamic_range(truth) -> float:
    t = truth.values if isinstance(truth, Grid2D) else np.asarray(truth, dtype=np.float64)
    return float(t.max() - t.min())


def psnr(pred, truth) -> float:
    """10 log10(R^2 / MSE) with R the truth's max-min span; +inf when exact."""
    p, t = _arrays(pred, truth)
    _require_varying(t, "PSNR")
    err = mse(p, t)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(dynamic_range(t) ** 2 / err)


def ssim(pred, truth, window: int = SSIM_WINDOW, k1: float = 0.01, k2: float = 0.03, data_range: float | None = None) -> float:
    """Mean local SSIM with a Gaussian window (sigma 1.5, ``window`` taps),
    averaged over cells whose window lies inside the grid."""
    p, t = _arrays(pred, truth)
    if window < 1 or window % 2 == 0:
        raise ShapeError("SSIM window must be a positive odd size")
    rad = window // 2
    if min(p.shape) < window:
        raise ShapeError(f"grid {p.shape} smaller than the SSIM window {window}")
    rng_ = dynamic_range(t) if data_range is None else float(data_range)
    if not rng_ > 0:
        raise UndefinedMetricError("SSIM is undefined for a zero dynamic range")
    c1, c2 = (k1 * rng_) ** 2, (k2 * rng_) ** 2

    def smooth(a):
        return gaussian_filter(a, sigma=SSIM_SIGMA, truncate=rad / SSIM_SIGMA, mode="reflect")

    mp, mt = smooth(p), smooth(t)
    vp = smooth(p * p) - mp * mp
    vt = smooth(t * t) - mt * mt
    cov = smooth(p * t) - mp * mt
    s = ((2 * mp * mt + c1) * (2 * cov + c2)) / ((mp * mp + mt * mt + c1) * (vp + vt + c2))
    return float(s[rad:-rad, rad:-rad].mean()) if rad else float(s.mean())


def abs_difference(pred, truth) -> Grid2D:
    p, t = _arrays(pred, truth)
    return Grid2D.from_array(np.abs(p - t), "difference")


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    mse: float
    pcc: float
    r2: float
    psnr_db: float
    ssim: float
    dataset_id: str = ""
    method_id: str = ""
    units: str = "standardized"
    psnr_range: float = 0.0

    NUMERIC = ("mse", "pcc", "r2", "psnr_db", "ssim", "psnr_range")

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return self.mse, self.pcc, self.r2, self.psnr_db, self.ssim

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in self.NUMERIC:
            if math.isinf(d[k]):
                d[k] = "inf" if d[k] > 0 else "-inf"
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        d = self.to_dict()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = [f.name for f in fields(self)]
        w.writerow(names)
        w.writerow([d[n] if isinstance(d[n], str) else repr(d[n]) for n in names])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        validate_report(d)
        kw = {}
        for f in fields(cls):
            v = d[f.name]
            kw[f.name] = float(v) if f.name in cls.NUMERIC else v
        return cls(**kw)


def validate_report(d: dict) -> None:
    """Check a decoded report against the schema: exactly the report fields,
    numbers (or "inf"/"-inf") for metrics, strings for metadata."""
    expected = {f.name for f in fields(MetricsReport)}
    if set(d) != expected:
        raise ParseError(f"report keys {sorted(d)} != {sorted(expected)}")
    for k in MetricsReport.NUMERIC:
        v = d[k]
        if isinstance(v, str):
            if v not in ("inf", "-inf"):
                raise ParseError(f"report field {k}: bad value {v!r}")
        elif not isinstance(v, (int, float)) or isinstance(v, bool) or math.isnan(v):
            raise ParseError(f"report field {k} must be a number")
    for k in expected - set(MetricsReport.NUMERIC):
        if not isinstance(d[k], str):
            raise ParseError(f"report field {k} must be a string")
    pc, ss, m = float(d["pcc"]), float(d["ssim"]), float(d["mse"])
    if not (-1.0 <= pc <= 1.0 and -1.0 <= ss <= 1.0 and m >= 0.0):
        raise ParseError("report values out of range")


def evaluate(
    pred,
    truth,
    *,
    stats: NormStats | None = None,
    physical: bool = False,
    dataset_id: str = "",
    method_id: str = "",
) -> MetricsReport:
    """All five metrics.  Inputs are in standardized units; with
    ``physical=True`` both grids are mapped back through ``stats`` first."""
    p, t = _arrays(pred, truth)
    units = "standardized"
    if physical:
        if stats is None:
            raise ShapeError("physical-unit metrics need the normalization stats")
        p, t = stats.invert(p), stats.invert(t)
        units = "physical"
    return MetricsReport(
        mse=mse(p, t),
        pcc=pcc(p, t),
        r2=r2(p, t),
        psnr_db=psnr(p, t),
        ssim=ssim(p, t),
        dataset_id=dataset_id,
        method_id=method_id,
        units=units,
        psnr_range=dynamic_range(t),
    )
