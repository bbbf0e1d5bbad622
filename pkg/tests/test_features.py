"""Feature blocks and tensor assembly. Expected vectors are hand-frozen."""

import datetime as dt

import numpy as np
import pytest

from trafficfuse.ctm import FdParams
from trafficfuse.features import (
    FEATURE_NAMES,
    INDICATOR_FEATURES,
    boundary_flow_feature,
    build_tensor,
    los_band,
    load_tensor,
    manifest_hash,
    sd_features,
    sp_features,
    temporal_features,
)
from trafficfuse.network import CountMatrix, Segment

from conftest import make_chain

T0 = dt.datetime(2024, 1, 1)  # Monday
BIN = 900.0
SEG = Segment(id=0, length_m=500.0, lanes=2, capacity_vph=1800.0, free_flow_mps=10.0)
FD = FdParams(wave_speed=4.0, jam_density=1.0, crit_speed=7.0)


def test_feature_layout_is_22_wide():
    assert len(FEATURE_NAMES) == 22
    assert len(set(FEATURE_NAMES)) == 22
    for ind in INDICATOR_FEATURES:
        assert ind in FEATURE_NAMES


def test_temporal_midnight_monday():
    # sin 0, cos 1 for both encodings; midnight is night, not weekend or rush
    assert np.array_equal(temporal_features(0, 0), [0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0])


def test_temporal_policy_sets():
    f = temporal_features(18, 5)  # Saturday evening rush hour
    assert f[4] == 1.0 and f[5] == 1.0 and f[6] == 0.0
    assert temporal_features(10, 4)[4:].tolist() == [0.0, 0.0, 0.0]
    for h in (22, 23, 0, 1, 2, 3, 4, 5):
        assert temporal_features(h, 2)[6] == 1.0
    assert temporal_features(6, 2)[6] == 0.0
    assert temporal_features(21, 2)[6] == 0.0


def test_temporal_unit_circle_invariant():
    for h in range(24):
        for d in range(7):
            f = temporal_features(h, d)
            assert f[0] ** 2 + f[1] ** 2 == pytest.approx(1.0, abs=1e-12)
            assert f[2] ** 2 + f[3] ** 2 == pytest.approx(1.0, abs=1e-12)


def test_temporal_rejects_bad_input():
    with pytest.raises(ValueError):
        temporal_features(24, 0)
    with pytest.raises(ValueError):
        temporal_features(0, 7)


@pytest.mark.parametrize(
    "ratio,value",
    [
        (0.0, 0.0),
        (0.34, 0.0),
        (0.35, 0.2),
        (0.54, 0.2),
        (0.55, 0.4),
        (0.74, 0.4),
        (0.75, 0.6),
        (0.89, 0.6),
        (0.9, 0.8),
        (0.99, 0.8),
        (1.0, 1.0),
        (1.7, 1.0),
    ],
)
def test_los_bands(ratio, value):
    assert los_band(ratio) == value


def test_los_rejects_negative():
    with pytest.raises(ValueError):
        los_band(-0.1)


def test_sd_free_flow_empty_segment():
    # b=1 gives rho=0, so demand 0 and supply min(4*100, 450) = 400
    f = sd_features(1.0, 0.0, SEG, FD, BIN, n_max=1.0)
    assert np.allclose(f, [1.0, 0.0, 0.0, 400.0 / 450.0, 0.0, 0.0, 0.0, 0.0, 0.0], atol=1e-12)


def test_sd_mid_range_values():
    # b=0.8 -> rho=15, D=150, S=340; q=90 gives q/C = 0.2 (LOS A)
    f = sd_features(0.8, 90.0, SEG, FD, BIN, n_max=100.0)
    expect = [0.8, 0.2, 150.0 / 450.0, 340.0 / 450.0, 0.2, 0.0, 0.0, 0.0, 0.9]
    assert np.allclose(f, expect, atol=1e-12)


def test_sd_congested_flags():
    f = sd_features(0.3, 360.0, SEG, FD, BIN, n_max=400.0)
    assert f[6] == 1.0  # b < 0.5
    assert f[4] == pytest.approx(0.8)
    assert f[7] == 1.0  # 0.7 < q/C < 0.9
    assert f[5] == 0.6  # LOS D at 0.8


def test_sd_nmax_floor():
    f = sd_features(1.0, 0.5, SEG, FD, BIN, n_max=0.0)
    assert f[8] == 0.5  # denominator floored at 1


def test_sp_chain_values():
    net = make_chain(3)
    b = np.array([1.0, 0.5, 0.25])
    f = sp_features(b, net)
    assert np.allclose(f[1], [0.25, 0.25, 1.0, -0.5], atol=1e-12)
    # no upstream at the head, no downstream at the tail: gradients read 0
    assert np.allclose(f[0], [0.5, 0.5, 1.0, 0.0], atol=1e-12)
    assert np.allclose(f[2], [0.25, 0.0, 0.5, -0.25], atol=1e-12)


def test_boundary_flow_feature_value():
    assert boundary_flow_feature(5.0, 2.0, SEG, BIN) == pytest.approx(3.0 / 450.0)


def _toy_inputs(t=16, missing_speed=False, missing_count=False):
    net = make_chain(3)
    rng = np.random.default_rng(3)
    counts = rng.uniform(0, 300, (3, t))
    speeds = rng.uniform(3, 10, (3, t))
    if missing_speed:
        speeds[1, 4] = np.nan
    if missing_count:
        counts[2, 5] = np.nan
    cm = CountMatrix(np.where(np.isnan(counts), np.nan, counts), 900, T0)
    return net, cm, speeds


def test_build_tensor_shape_and_consistency_with_scalar_ops():
    net, cm, speeds = _toy_inputs()
    fd = FdParams(wave_speed=2.0, jam_density=2.0, crit_speed=7.0)
    ft = build_tensor(net, fd, cm, speeds, train_cols=12)
    assert ft.values.shape == (3, 16, 22)
    # scalar path reproduces the vectorized speed-density block
    for i in (0, 1, 2):
        for t in (0, 7, 15):
            b = min(max(speeds[i, t] / 10.0, 0.0), 1.0)
            row = sd_features(b, cm.values[i, t], net.segments[i], fd, 900, ft.n_max[i])
            assert np.allclose(ft.values[i, t, 9:18], row, atol=1e-12)
            tf = temporal_features(int(cm.hours()[t]), int(cm.days()[t]))
            assert np.allclose(ft.values[i, t, 1:8], tf, atol=1e-12)
    sp = sp_features(np.clip(speeds[:, 7] / 10.0, 0, 1), net)
    assert np.allclose(ft.values[:, 7, 18:22], sp, atol=1e-12)


def test_build_tensor_imputation_diagnostics():
    net, cm, speeds = _toy_inputs(missing_speed=True, missing_count=True)
    fd = FdParams(wave_speed=2.0, jam_density=2.0, crit_speed=7.0)
    ft = build_tensor(net, fd, cm, speeds)
    assert ft.n_imputed_speed == 1
    assert ft.n_imputed_count == 1
    assert ft.values[1, 4, 9] == 1.0  # missing speed reads free flow
    assert ft.values[2, 5, 0] == 0.0  # missing count reads zero


def test_build_tensor_nmax_uses_training_columns_only():
    net, cm, speeds = _toy_inputs()
    cm.values[0, 12:] = 10_000.0  # huge counts outside the training split
    fd = FdParams(wave_speed=2.0, jam_density=2.0, crit_speed=7.0)
    ft = build_tensor(net, fd, cm, speeds, train_cols=12)
    assert ft.n_max[0] == cm.values[0, :12].max()
    all_cols = build_tensor(net, fd, cm, speeds)
    assert all_cols.n_max[0] == 10_000.0


def test_normalization_roundtrip_and_indicator_passthrough():
    net, cm, speeds = _toy_inputs()
    fd = FdParams(wave_speed=2.0, jam_density=2.0, crit_speed=7.0)
    ft = build_tensor(net, fd, cm, speeds, train_cols=12)
    z = ft.normalized()
    assert np.allclose(ft.denormalize(z), ft.values, atol=1e-9)
    ind = ft.indicator_mask
    vals = z[:, :, ind]
    assert set(np.unique(vals)).issubset({0.0, 1.0})
    # non-indicator training columns are standardized
    flat = z[:, :12, ~ind].reshape(-1, (~ind).sum())
    assert np.allclose(flat.mean(axis=0), 0.0, atol=1e-9)


def test_boundary_feature_zero_off_boundary():
    net, cm, speeds = _toy_inputs()
    fd = FdParams(wave_speed=2.0, jam_density=2.0, crit_speed=7.0)
    bi = np.full((3, 16), 5.0)
    bo = np.full((3, 16), 2.0)
    ft = build_tensor(net, fd, cm, speeds, boundary_in=bi, boundary_out=bo)
    # chain boundary is {0, 2}; interior segment keeps a zero feature
    assert np.allclose(ft.values[0, :, 8], 3.0 / 450.0)
    assert np.all(ft.values[1, :, 8] == 0.0)


def test_tensor_save_load_roundtrip(tmp_path):
    net, cm, speeds = _toy_inputs()
    fd = FdParams(wave_speed=2.0, jam_density=2.0, crit_speed=7.0)
    ft = build_tensor(net, fd, cm, speeds, train_cols=12)
    prefix = str(tmp_path / "feat")
    ft.save(prefix)
    back = load_tensor(prefix)
    assert np.array_equal(back.values, ft.values)
    assert np.array_equal(back.mean, ft.mean)
    assert np.array_equal(back.scale, ft.scale)
    assert back.train_cols == 12
    assert back.start_time == T0


def test_tensor_load_rejects_corruption(tmp_path):
    import json

    net, cm, speeds = _toy_inputs()
    fd = FdParams(wave_speed=2.0, jam_density=2.0, crit_speed=7.0)
    ft = build_tensor(net, fd, cm, speeds)
    prefix = str(tmp_path / "feat")
    ft.save(prefix)
    with open(prefix + ".json") as fh:
        m = json.load(fh)
    m["shape"][1] += 3
    with open(prefix + ".json", "w") as fh:
        json.dump(m, fh)
    with pytest.raises(ValueError, match="payload"):
        load_tensor(prefix)
    m["names"][0] = "renamed"
    with open(prefix + ".json", "w") as fh:
        json.dump(m, fh)
    with pytest.raises(ValueError, match="hash"):
        load_tensor(prefix)


def test_manifest_hash_stable():
    assert manifest_hash() == manifest_hash(FEATURE_NAMES, "1")
    assert manifest_hash() != manifest_hash(FEATURE_NAMES, "2")
