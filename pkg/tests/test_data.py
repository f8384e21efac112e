import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from seisbayes.data import (
    Grid2D,
    SynthConfig,
    TraceDataset,
    convolve_traces,
    destandardize,
    generate_synthetic,
    load_dataset,
    load_grid,
    make_patches,
    reflectivity,
    ricker,
    save_dataset,
    save_grid,
    select_wells,
    standardize,
)
from seisbayes.errors import ConfigError, ParseError, ShapeError


def small_cfg(**kw):
    base = dict(n_traces=30, n_samples=64, n_wells=3, h=1, seed=3)
    base.update(kw)
    return SynthConfig(**base)


# -- Grid2D ----------------------------------------------------------------


def test_grid_validates():
    with pytest.raises(ShapeError):
        Grid2D(2, 3, np.zeros(5))
    with pytest.raises(ParseError):
        Grid2D(1, 2, np.array([0.0, np.inf]))
    with pytest.raises(ConfigError):
        Grid2D(1, 1, np.zeros(1), "velocity")


# -- synthetic generator ---------------------------------------------------


def test_constant_layer_gives_zero_seismic():
    cfg = small_cfg(noise_std=0.0)
    ai = np.full((3, 40), 5000.0)
    assert not convolve_traces(reflectivity(ai), ricker(cfg.peak_freq, cfg.dt)).any()


def test_two_layer_gives_centered_scaled_wavelet():
    ai = np.full(200, 4000.0)
    ai[100:] = 6000.0
    w = ricker(25.0, 0.002)
    seis = convolve_traces(reflectivity(ai), w)[0]
    r = (6000.0 - 4000.0) / (6000.0 + 4000.0)
    half = len(w) // 2
    expected = np.zeros(200)
    expected[99 - half : 99 + half + 1] = r * w  # spike sits on the last sample above the interface
    assert np.allclose(seis, expected, atol=1e-15)
    assert np.argmax(seis) == 99


def test_generator_deterministic():
    a, b = generate_synthetic(small_cfg()), generate_synthetic(small_cfg())
    assert a.seismic.values.tobytes() == b.seismic.values.tobytes()
    assert a.ai.values.tobytes() == b.ai.values.tobytes()
    assert not np.array_equal(generate_synthetic(small_cfg(seed=4)).ai.values, a.ai.values)


def test_generator_properties():
    ds = generate_synthetic(small_cfg(noise_std=0.0))
    assert np.all(ds.ai.values > 0)
    assert np.abs(reflectivity(ds.ai.values)).max() < 1.0
    # seismic is linear in reflectivity at zero noise
    w = ricker(25.0, 0.002)
    r = reflectivity(ds.ai.values)
    assert np.allclose(convolve_traces(2.5 * r, w), 2.5 * convolve_traces(r, w))
    assert np.allclose(ds.seismic.values, convolve_traces(r, w))


def test_generator_upsampled_ai():
    ds = generate_synthetic(small_cfg(ai_upsample=4))
    assert ds.ai.n_samples == 4 * ds.seismic.n_samples and ds.length_ratio == 4


@pytest.mark.parametrize(
    "kw", [dict(layers=(5, 2)), dict(ai_range=(10.0, 5.0)), dict(noise_std=-1.0), dict(peak_freq=300.0), dict(ai_upsample=2)]
)
def test_generator_rejects_bad_config(kw):
    with pytest.raises(ConfigError):
        small_cfg(**kw)


# -- wells -----------------------------------------------------------------


def test_select_wells_examples():
    w20 = select_wells(2721, 20)
    assert len(w20) == 20 and np.all(np.diff(w20) > 0)
    assert np.ptp(np.diff(w20)) <= 1  # evenly spaced
    assert len(select_wells(501, 10)) == 10
    assert np.array_equal(select_wells(7, 7), np.arange(7))
    assert select_wells(200, 10).tolist() == list(range(10, 200, 20))


@given(st.integers(1, 3000), st.integers(1, 3000))
def test_select_wells_properties(n, k):
    w = select_wells(n, k)
    assert np.all(np.diff(w) > 0) and w[0] >= 0 and w[-1] < n
    assert len(w) == min(n, k)


# -- standardization -------------------------------------------------------


def test_standardize_examples(rng):
    g = Grid2D.from_array(3.0 + 2.0 * rng.standard_normal((10, 20)))
    s, stats = standardize(g)
    assert abs(s.values.mean()) < 1e-12 and abs(s.values.std() - 1.0) < 1e-12
    again, _ = standardize(s)
    assert np.allclose(again.values, s.values, atol=1e-12)
    assert np.allclose(destandardize(s, stats).values, g.values, atol=1e-10)
    with pytest.raises(ConfigError):
        standardize(Grid2D.from_array(np.ones((3, 3))))


def test_ai_stats_come_from_wells():
    ds = generate_synthetic(small_cfg())
    wells = ds.ai.values[ds.well_indices]
    assert ds.ai_stats.mean == pytest.approx(wells.mean()) and ds.ai_stats.std == pytest.approx(wells.std())


# -- patches ---------------------------------------------------------------


def test_patch_boundary_and_interior(rng):
    v = rng.standard_normal((6, 9))
    p = make_patches(v, 1).data
    assert not p[0, 0].any()
    assert np.array_equal(p[3], v[2:5])
    assert np.array_equal(make_patches(v, 0).data[:, 0], v)


@given(st.integers(1, 12), st.integers(1, 10), st.integers(0, 4))
def test_patch_center_column_round_trip(n, t, h):
    v = np.random.default_rng(n * 100 + t).standard_normal((n, t))
    assert np.array_equal(make_patches(v, h).data[:, h], v)


def test_dataset_rejects_bad_wells():
    g = Grid2D.from_array(np.arange(12.0).reshape(3, 4))
    with pytest.raises((ConfigError, ShapeError)):
        TraceDataset.build(g, g.with_values(g.values, "impedance"), [5], 1)


# -- grid files ------------------------------------------------------------


def test_grid_binary_round_trip(tmp_path, rng):
    g = Grid2D.from_array(rng.standard_normal((5, 7)).astype(np.float32), "impedance")
    save_grid(g, tmp_path / "a.grid")
    back = load_grid(tmp_path / "a.grid")
    assert back.kind == "impedance" and back.values.tobytes() == g.values.tobytes()


def test_grid_truncated_payload(tmp_path, rng):
    save_grid(Grid2D.from_array(rng.standard_normal((4, 4))), tmp_path / "a.grid")
    raw = (tmp_path / "a.grid").read_bytes()
    (tmp_path / "b.grid").write_bytes(raw[:-6])
    with pytest.raises(ParseError, match="payload has 58 bytes, header implies 64"):
        load_grid(tmp_path / "b.grid")


def test_grid_nonfinite_payload_reports_offset(tmp_path):
    save_grid(Grid2D.from_array(np.zeros((2, 3))), tmp_path / "a.grid")
    raw = bytearray((tmp_path / "a.grid").read_bytes())
    raw[-4:] = np.float32(np.nan).tobytes()
    (tmp_path / "a.grid").write_bytes(bytes(raw))
    with pytest.raises(ParseError, match="offset"):
        load_grid(tmp_path / "a.grid")


def test_csv_and_binary_agree(tmp_path, rng):
    g = Grid2D.from_array(1e3 * rng.standard_normal((6, 5)))
    save_grid(g, tmp_path / "a.grid")
    save_grid(g, tmp_path / "a.csv")
    a, b = load_grid(tmp_path / "a.grid"), load_grid(tmp_path / "a.csv")
    assert np.allclose(a.values, b.values, rtol=1e-7, atol=0)


def test_csv_bad_value(tmp_path):
    (tmp_path / "g.csv").write_text("1,2,3\n4,oops,6\n")
    with pytest.raises(ParseError, match="line 2"):
        load_grid(tmp_path / "g.csv")


def test_dataset_manifest_round_trip(tmp_path):
    ds = generate_synthetic(small_cfg())
    manifest = save_dataset(ds, tmp_path / "d")
    back = load_dataset(manifest)
    assert back.well_indices.tolist() == ds.well_indices.tolist() and back.h == ds.h
    assert back.ai_stats == ds.ai_stats
    sizes = json.loads(manifest.read_text())
    assert sizes["h"] == 1
    raw = (tmp_path / "d" / "seismic.grid").read_bytes()
    assert len(raw) == 12 + int.from_bytes(raw[8:12], "little") + 4 * 30 * 64


def test_manifest_bad_json(tmp_path):
    (tmp_path / "m.json").write_text('{"format": \n')
    with pytest.raises(ParseError, match="line 2"):
        load_dataset(tmp_path / "m.json")


def test_short_trace_keeps_length():
    ds = generate_synthetic(small_cfg(n_samples=20))
    assert ds.seismic.n_samples == 20
