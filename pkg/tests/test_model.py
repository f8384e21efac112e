import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seisbayes.errors import ConfigError, ParseError, ShapeError
from seisbayes.model import (
    ForwardModelConfig,
    InverseModelConfig,
    build_forward_model,
    build_inverse_model,
    build_models,
    forward_model_forward,
    kl_to_prior,
    load_checkpoint,
    mean_checksum,
    save_checkpoint,
    total_kl,
)
from seisbayes.tensor import Tensor, tsum
from seisbayes.variational import LayerMode, PriorConfig

TINY = dict(branch_channels=2, serial_channels=2, gru_hidden=4, regression_hidden=4, gru_layers=2)


def tiny(h=1, **kw):
    return InverseModelConfig(h=h, **{**TINY, **kw})


def patches(rng, b=3, h=1, t=16):
    return Tensor(rng.standard_normal((b, 2 * h + 1, t)))


def test_same_seed_same_parameters():
    a, b = build_inverse_model(tiny(), 5), build_inverse_model(tiny(), 5)
    assert mean_checksum([a]) == mean_checksum([b])
    assert mean_checksum([build_inverse_model(tiny(), 6)]) != mean_checksum([a])


def test_output_lengths(rng):
    x = patches(rng, t=12)
    assert build_inverse_model(tiny(), 0)(x).shape == (3, 12)
    up = build_inverse_model(tiny(upsample=True, length_ratio=4), 0)
    assert up(x).shape == (3, 48)


def test_inconsistent_ratio_rejected():
    with pytest.raises(ConfigError):
        tiny(upsample=False, length_ratio=4)
    with pytest.raises(ConfigError):
        build_models(tiny(), ForwardModelConfig(length_ratio=4), 0)


def test_wrong_patch_width(rng):
    with pytest.raises(ShapeError):
        build_inverse_model(tiny(h=2), 0)(patches(rng, h=1))


def test_no_cross_batch_leakage(rng):
    model = build_inverse_model(tiny(), 1)
    x = patches(rng, b=1)
    pair = Tensor(np.concatenate([x.data, x.data]))
    one, two = model(x).data, model(pair).data
    assert np.array_equal(two[0], two[1]) and np.allclose(two[0], one[0], rtol=0, atol=1e-12)


def test_deterministic_mode_repeatable(rng):
    model, x = build_inverse_model(tiny(), 1), patches(rng)
    assert model(x).data.tobytes() == model(x).data.tobytes()


def test_variational_zero_sigma_equals_deterministic(rng):
    inv, fwd = build_models(tiny(), ForwardModelConfig(), 2)
    x = patches(rng)
    det = fwd(inv(x)).data
    for m in (inv, fwd):
        m.set_mode(LayerMode.VARIATIONAL, rho_init=-40.0)
    var = fwd(inv(x, rng), rng).data
    assert np.max(np.abs(var - det)) < 1e-9


def test_variational_needs_rng(rng):
    inv = build_inverse_model(tiny(), 0)
    inv.set_mode(LayerMode.VARIATIONAL)
    with pytest.raises(ConfigError):
        inv(patches(rng))


def test_distinct_outputs_per_seed(rng):
    inv = build_inverse_model(tiny(), 0)
    inv.set_mode(LayerMode.VARIATIONAL, rho_init=-3.0)
    x = patches(rng)
    outs = {inv(x, np.random.default_rng(s)).data.tobytes() for s in range(5)}
    assert len(outs) == 5


def test_patch_locality(rng):
    model = build_inverse_model(tiny(), 3)
    x = patches(rng, b=4)
    base = model(x).data
    x2 = x.data.copy()
    x2[2] = rng.standard_normal(x2[2].shape)
    moved = model(Tensor(x2)).data
    assert np.array_equal(np.delete(moved, 2, 0), np.delete(base, 2, 0))
    assert not np.allclose(moved[2], base[2])


@settings(max_examples=12)
@given(st.integers(0, 3), st.integers(4, 24), st.booleans())
def test_branch_sum_shape_sweep(h, t, up):
    cfg = tiny(h=h, upsample=up, length_ratio=4 if up else 1)
    out = build_inverse_model(cfg, 0)(Tensor(np.ones((2, 2 * h + 1, t))))
    assert out.shape == (2, 4 * t if up else t)


# -- forward model ---------------------------------------------------------


def test_forward_zero_in_zero_out():
    fwd = build_forward_model(ForwardModelConfig(), 0)
    for _, vp in fwd.named_vparams():
        if vp.mu.ndim == 1:
            vp.mu.data[:] = 0.0
    assert not fwd(Tensor(np.zeros((2, 20)))).data.any()


def test_forward_output_length():
    assert build_forward_model(ForwardModelConfig(length_ratio=4), 0)(Tensor(np.ones((2, 40)))).shape == (2, 10)
    assert build_forward_model(ForwardModelConfig(), 0)(Tensor(np.ones((2, 40)))).shape == (2, 40)


def test_forward_linear_mode_is_linear(rng):
    fwd = build_forward_model(ForwardModelConfig(activation="identity"), 0)
    for _, vp in fwd.named_vparams():
        if vp.mu.ndim == 1:
            vp.mu.data[:] = 0.0
    ai = rng.standard_normal((2, 30))
    assert np.allclose(forward_model_forward(fwd, Tensor(2 * ai)).data, 2 * fwd(Tensor(ai)).data, atol=1e-13)


# -- KL accumulation -------------------------------------------------------


def _models_at_sigma(sigma):
    inv, fwd = build_models(tiny(), ForwardModelConfig(), 0)
    rho = float(np.log(np.expm1(sigma)))
    for m in (inv, fwd):
        m.set_mode(LayerMode.VARIATIONAL, rho_init=rho)
    return inv, fwd


def test_total_kl_at_prior_scale():
    inv, fwd = _models_at_sigma(1.0)
    count = sum(vp.size for m in (inv, fwd) for _, vp in m.named_vparams())
    assert total_kl((inv, fwd), PriorConfig(1.0)).item() == pytest.approx(0.5 * count, rel=1e-10)


def test_total_kl_is_sum_of_layers():
    inv, fwd = _models_at_sigma(0.03)
    prior = PriorConfig(1e-3)
    parts = sum(kl_to_prior(vp, prior).item() for m in (inv, fwd) for _, vp in m.named_vparams())
    assert total_kl((inv, fwd), prior).item() == pytest.approx(parts, rel=1e-12)


def test_total_kl_gradient_reaches_every_rho():
    inv, fwd = _models_at_sigma(0.03)
    total_kl((inv, fwd), PriorConfig(1e-3)).backward()
    rhos = inv.rho_parameters() + fwd.rho_parameters()
    assert rhos and all(r.grad is not None and np.all(r.grad != 0) for r in rhos)


def test_data_gradient_reaches_every_rho(rng):
    inv, fwd = _models_at_sigma(0.03)
    tsum(fwd(inv(patches(rng), rng), rng)).backward()
    assert all(r.grad is not None and np.any(r.grad != 0) for r in inv.rho_parameters() + fwd.rho_parameters())


# -- checkpoints -----------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, rng):
    inv, fwd = _models_at_sigma(0.02)
    save_checkpoint(tmp_path / "m.ckpt", inv, fwd, {"note": "x"})
    inv2, fwd2, header = load_checkpoint(tmp_path / "m.ckpt")
    assert header["extra"] == {"note": "x"} and inv2.mode is LayerMode.VARIATIONAL
    assert mean_checksum((inv, fwd)) == mean_checksum((inv2, fwd2))
    for a, b in zip(inv.rho_parameters(), inv2.rho_parameters()):
        assert a.data.tobytes() == b.data.tobytes()
    save_checkpoint(tmp_path / "m2.ckpt", inv2, fwd2, {"note": "x"})
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()


def test_checkpoint_corrupt(tmp_path):
    inv, fwd = build_models(tiny(), ForwardModelConfig(), 0)
    save_checkpoint(tmp_path / "m.ckpt", inv, fwd)
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-8])
    with pytest.raises(ParseError):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "b.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(ParseError):
        load_checkpoint(tmp_path / "b.ckpt")
