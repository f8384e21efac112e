"""Inverse (seismic -> impedance) and forward (impedance -> seismic) networks."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError, ShapeError
from .layers import GRU, Conv1d, Conv2d, ConvTranspose1d, GroupNorm, Linear, Module
from .tensor import (
    Tensor,
    add,
    concat,
    maxpool2d,
    pointwise,
    reshape,
    transpose,
    tsum,
)
from .variational import LayerMode, PriorConfig, kl_full, kl_to_prior


@dataclass
class InverseModelConfig:
    h: int = 2
    branch_channels: int = 8
    dilations: tuple[int, int, int] = (1, 3, 6)
    kernel_2d: tuple[int, int] = (5, 3)
    serial_kernels: tuple[int, ...] = (5, 5, 5)
    serial_channels: int = 8
    groups: int = 2
    pool_window: tuple[int, int] = (1, 2)
    gru_hidden: int = 16
    gru_layers: int = 3
    upsample: bool = False
    upsample_layers: int = 2
    upsample_kernel: int = 5
    length_ratio: int = 1
    regression_hidden: int = 16
    activation: str = "relu"

    def __post_init__(self):
        self.dilations = tuple(self.dilations)
        self.kernel_2d = tuple(self.kernel_2d)
        self.serial_kernels = tuple(self.serial_kernels)
        self.pool_window = tuple(self.pool_window)
        if self.h < 0:
            raise ConfigError("h must be non-negative")
        if len(self.dilations) != 3:
            raise ConfigError("exactly three parallel dilated branches are required")
        if len(self.serial_kernels) < 2:
            raise ConfigError("serial block needs a 2-d conv followed by at least one 1-d conv")
        if self.gru_layers < 1:
            raise ConfigError("need at least one GRU layer")
        expected = 2**self.upsample_layers if self.upsample else 1
        if self.length_ratio != expected:
            raise ConfigError(
                f"length ratio {self.length_ratio} inconsistent with upsample={self.upsample} "
                f"({self.upsample_layers} stride-2 layers give {expected})"
            )

    @property
    def width(self) -> int:
        return 2 * self.h + 1


@dataclass
class ForwardModelConfig:
    channels: int = 8
    kernel_first: int = 9
    kernel_second: int = 5
    activation: str = "tanh"
    length_ratio: int = 1


def config_to_dict(cfg) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(cfg).items()}


def _pool_window(window, width: int) -> tuple[int, int]:
    return window[0], min(window[1], width)


class InverseModel(Module):
    """Sequence modeling (GRU stack on the center trace) plus local pattern
    analysis (2-d CNN on the patch), summed, optionally upsampled, then
    regressed to impedance with a GRU and a linear head."""

    def __init__(self, cfg: InverseModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        m = self.modules
        hid = cfg.gru_hidden
        for i in range(cfg.gru_layers):
            m[f"gru{i}"] = GRU(1 if i == 0 else hid, hid, rng)
        bc = cfg.branch_channels
        for i, d in enumerate(cfg.dilations):
            m[f"branch{i}_conv"] = Conv2d(1, bc, cfg.kernel_2d, rng, dilation=(d, 1))
            m[f"branch{i}_norm"] = GroupNorm(cfg.groups, bc)
        sc = cfg.serial_channels
        m["serial0_conv"] = Conv2d(3 * bc, sc, (cfg.serial_kernels[0], cfg.kernel_2d[1]), rng)
        m["serial0_norm"] = GroupNorm(cfg.groups, sc)
        n_serial = len(cfg.serial_kernels)
        for i in range(1, n_serial):
            cout = hid if i == n_serial - 1 else sc
            m[f"serial{i}_conv"] = Conv1d(sc, cout, cfg.serial_kernels[i], rng)
            m[f"serial{i}_norm"] = GroupNorm(cfg.groups, cout)
        if cfg.upsample:
            for i in range(cfg.upsample_layers):
                m[f"up{i}_conv"] = ConvTranspose1d(hid, hid, cfg.upsample_kernel, rng, stride=2)
                m[f"up{i}_norm"] = GroupNorm(cfg.groups, hid)
        m["reg_gru"] = GRU(hid, cfg.regression_hidden, rng)
        m["reg_out"] = Linear(cfg.regression_hidden, 1, rng)

    def _act(self, x: Tensor) -> Tensor:
        return pointwise(x, self.cfg.activation)

    def __call__(self, patches: Tensor, rng=None) -> Tensor:
        return inverse_forward(self, patches, rng)


class ForwardModel(Module):
    """Two 1-d convolutions along time mapping impedance to seismic."""

    def __init__(self, cfg: ForwardModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        if cfg.length_ratio < 1:
            raise ConfigError("length ratio must be a positive integer")
        self.modules["conv0"] = Conv1d(1, cfg.channels, cfg.kernel_first, rng, stride=cfg.length_ratio)
        self.modules["conv1"] = Conv1d(cfg.channels, 1, cfg.kernel_second, rng)

    def __call__(self, ai: Tensor, rng=None) -> Tensor:
        return forward_model_forward(self, ai, rng)


def build_inverse_model(cfg: InverseModelConfig, seed: int) -> InverseModel:
    return InverseModel(cfg, np.random.default_rng(seed))


def build_forward_model(cfg: ForwardModelConfig, seed: int) -> ForwardModel:
    return ForwardModel(cfg, np.random.default_rng(seed))


def build_models(inv_cfg: InverseModelConfig, fwd_cfg: ForwardModelConfig, seed: int) -> tuple[InverseModel, ForwardModel]:
    if fwd_cfg.length_ratio != inv_cfg.length_ratio:
        raise ConfigError(
            f"forward model ratio {fwd_cfg.length_ratio} != inverse model ratio {inv_cfg.length_ratio}"
        )
    s_inv, s_fwd = np.random.SeedSequence(seed).spawn(2)
    return (
        InverseModel(inv_cfg, np.random.default_rng(s_inv)),
        ForwardModel(fwd_cfg, np.random.default_rng(s_fwd)),
    )


def _rng_for(model: Module, rng):
    if model.variational and rng is None:
        raise ConfigError("variational forward pass needs an RNG")
    return rng if model.variational else None


def inverse_forward(model: InverseModel, patches: Tensor, rng=None) -> Tensor:
    """(B, 2h+1, T) seismic patches -> (B, T_y) impedance."""
    cfg, m = model.cfg, model.modules
    rng = _rng_for(model, rng)
    if patches.ndim != 3 or patches.shape[1] != cfg.width:
        raise ShapeError(f"expected patches (B, {cfg.width}, T), got {patches.shape}")
    bsz, width, steps = patches.shape

    # sequence modeling: center trace only, one trace per batch row
    seq = reshape(patches[:, cfg.h, :], (bsz, steps, 1))
    for i in range(cfg.gru_layers):
        seq = m[f"gru{i}"](seq, rng)
    seq = transpose(seq, (0, 2, 1))

    # local pattern analysis on the (T, 2h+1) patch
    img = reshape(transpose(patches, (0, 2, 1)), (bsz, 1, steps, width))
    branches = []
    for i in range(3):
        y = m[f"branch{i}_conv"](img, rng)
        y = model._act(m[f"branch{i}_norm"](y, rng))
        branches.append(maxpool2d(y, _pool_window(cfg.pool_window, y.shape[3]), _pool_window(cfg.pool_window, y.shape[3])))
    y = concat(branches, axis=1)
    y = model._act(m["serial0_norm"](m["serial0_conv"](y, rng), rng))
    win = _pool_window(cfg.pool_window, y.shape[3])
    y = maxpool2d(y, win, win)
    y = tsum(y, axis=3) / y.shape[3]
    for i in range(1, len(cfg.serial_kernels)):
        y = model._act(m[f"serial{i}_norm"](m[f"serial{i}_conv"](y, rng), rng))

    x = add(seq, y)
    if cfg.upsample:
        for i in range(cfg.upsample_layers):
            x = model._act(m[f"up{i}_norm"](m[f"up{i}_conv"](x, rng), rng))

    x = m["reg_gru"](transpose(x, (0, 2, 1)), rng)
    out = m["reg_out"](x, rng)
    return reshape(out, out.shape[:2])


def forward_model_forward(model: ForwardModel, ai: Tensor, rng=None) -> Tensor:
    """(B, T_y) impedance -> (B, T_y / ratio) seismic."""
    rng = _rng_for(model, rng)
    if ai.ndim != 2:
        raise ShapeError(f"expected impedance traces (B, T), got {ai.shape}")
    x = reshape(ai, (ai.shape[0], 1, ai.shape[1]))
    x = pointwise(model.modules["conv0"](x, rng), model.cfg.activation)
    x = model.modules["conv1"](x, rng)
    return reshape(x, (x.shape[0], x.shape[2]))


def total_kl(models, prior: PriorConfig) -> Tensor:
    """Sum of the rho-dependent KL over every Gaussian weight of every model."""
    terms = [kl_to_prior(vp, prior) for model in models for _, vp in model.named_vparams()]
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def total_kl_full(models, prior: PriorConfig) -> float:
    return float(sum(kl_full(vp, prior) for model in models for _, vp in model.named_vparams()))


def mean_checksum(models) -> str:
    h = hashlib.sha256()
    for model in models:
        for t in model.mean_parameters():
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoints: magic, u32 header length, JSON header, raw <f8 blocks

CKPT_MAGIC = b"SBCKPT01"


def _blocks(name: str, model: Module):
    for pname, t in model.named_plain():
        yield f"{name}/{pname}", t
    for pname, vp in model.named_vparams():
        yield f"{name}/{pname}.mu", vp.mu
        if vp.rho is not None:
            yield f"{name}/{pname}.rho", vp.rho


def save_checkpoint(path, inverse: InverseModel, forward: ForwardModel, extra: dict | None = None) -> None:
    blocks = list(_blocks("inverse", inverse)) + list(_blocks("forward", forward))
    header = {
        "format": 1,
        "inverse": {"config": config_to_dict(inverse.cfg), "mode": inverse.mode.value},
        "forward": {"config": config_to_dict(forward.cfg), "mode": forward.mode.value},
        "blocks": [{"name": n, "shape": list(t.shape)} for n, t in blocks],
        "mean_checksum": mean_checksum((inverse, forward)),
        "extra": extra or {},
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for _, t in blocks:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        buf = fh.read()
    return _parse_header(buf, path)[0]


def _parse_header(buf: bytes, path):
    if buf[:8] != CKPT_MAGIC:
        raise ParseError(f"{path}: not a checkpoint (bad magic)")
    if len(buf) < 12:
        raise ParseError(f"{path}: truncated header")
    (n,) = struct.unpack("<I", buf[8:12])
    try:
        header = json.loads(buf[12 : 12 + n])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: corrupt checkpoint header: {exc}") from None
    return header, 12 + n


def load_checkpoint(path) -> tuple[InverseModel, ForwardModel, dict]:
    path = Path(path)
    buf = path.read_bytes()
    header, offset = _parse_header(buf, path)
    inv_cfg = InverseModelConfig(**header["inverse"]["config"])
    fwd_cfg = ForwardModelConfig(**header["forward"]["config"])
    inverse, forward = build_models(inv_cfg, fwd_cfg, seed=0)
    modes = {"inverse": LayerMode(header["inverse"]["mode"]), "forward": LayerMode(header["forward"]["mode"])}
    has_rho = any(b["name"].endswith(".rho") for b in header["blocks"])
    for model, key in ((inverse, "inverse"), (forward, "forward")):
        if has_rho:
            model.set_mode(LayerMode.VARIATIONAL)
    targets = dict(_blocks("inverse", inverse)) | dict(_blocks("forward", forward))
    expected = sum(int(np.prod(b["shape"])) * 8 for b in header["blocks"])
    if len(buf) - offset != expected:
        raise ParseError(f"{path}: payload is {len(buf) - offset} bytes, header describes {expected}")
    for b in header["blocks"]:
        n = int(np.prod(b["shape"]))
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).reshape(b["shape"]).astype(np.float64)
        offset += n * 8
        if b["name"] not in targets:
            raise ParseError(f"{path}: unknown block {b['name']}")
        t = targets[b["name"]]
        if t.shape != arr.shape:
            raise ParseError(f"{path}: block {b['name']} has shape {arr.shape}, model expects {t.shape}")
        t.data = arr
    for model, key in ((inverse, "inverse"), (forward, "forward")):
        model.set_mode(modes[key])
    return inverse, forward, header
