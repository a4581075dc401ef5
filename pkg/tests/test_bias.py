import numpy as np
import pytest
from hypothesis import given, strategies as st

from fmcw_odom.bias import (BiasModel, CalibrationSample, CalibrationSet, build_calibration_samples,
                            fit, frame_bias, load_bias_model, predict_bias, rms_by_range,
                            save_bias_model)
from fmcw_odom.errors import ParseError
from fmcw_odom.measurement import Extrinsics
from fmcw_odom.pointcloud import GridConfig
from fmcw_odom.sim import Sequence, SimConfig

from helpers import make_frame

SHAPE = (4, 6)


def model_with(bins):
    m = BiasModel.empty(SHAPE)
    for (r, c), (b0, b1) in bins.items():
        m.b0[r, c], m.b1[r, c], m.valid[r, c] = b0, b1, True
    return m


def line_samples(bin_, b0, b1, ranges):
    return [CalibrationSample(bin_, float(x), b0 + b1 * x) for x in ranges]


# -- predict -----------------------------------------------------------------

def test_predict_zero_model():
    assert predict_bias(model_with({(0, 0): (0.0, 0.0)}), (0, 0), 42.0) == 0.0


def test_predict_arithmetic():
    assert predict_bias(model_with({(1, 2): (0.05, 0.001)}), (1, 2), 100.0) == pytest.approx(0.15, abs=1e-15)


def test_predict_uncalibrated_bin_is_zero_and_flagged():
    m = model_with({(1, 2): (0.05, 0.001)})
    assert predict_bias(m, (0, 0), 100.0) == 0.0
    bias, ok = m.predict([0, 1], [0, 2], [100.0, 100.0])
    assert np.array_equal(ok, [False, True])
    assert bias[0] == 0.0


def test_predict_out_of_grid():
    with pytest.raises(IndexError):
        predict_bias(BiasModel.empty(SHAPE), (4, 0), 1.0)
    with pytest.raises(IndexError):
        predict_bias(BiasModel.empty(SHAPE), (0, -1), 1.0)
    bias, ok = BiasModel.empty(SHAPE).predict([0], [-1], [5.0])
    assert not ok[0] and bias[0] == 0.0


@given(st.floats(-1, 1), st.floats(-0.01, 0.01), st.integers(1, 200), st.integers(1, 200))
def test_predict_affine_in_range(b0, b1, r1, r2):
    m = model_with({(0, 0): (b0, b1)})
    lhs = predict_bias(m, (0, 0), r1) + predict_bias(m, (0, 0), r2)
    assert lhs == pytest.approx(2 * predict_bias(m, (0, 0), (r1 + r2) / 2), abs=1e-12)


def test_model_shape_mismatch():
    with pytest.raises(ValueError):
        BiasModel(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2), dtype=bool))


def test_frame_bias_uses_grid_columns():
    grid = GridConfig(azimuth_bin_deg=20.0, num_beam_rows=4)
    m = model_with({(1, 3): (0.1, 0.0)})
    # azimuth +5 deg falls in column 3 of [-60, 60] at 20 deg bins
    az = np.radians(5.0)
    f = make_frame([[10 * np.cos(az), 10 * np.sin(az), 0.0], [10.0, -5.0, 0.0]], beam_row=[1, 1])
    bias, ok = frame_bias(m, f, grid)
    assert np.allclose(bias, [0.1, 0.0]) and np.array_equal(ok, [True, False])
    assert np.array_equal(frame_bias(None, f, grid)[1], [False, False])


# -- fit -----------------------------------------------------------------------

def test_fit_exact_line():
    s = line_samples((2, 3), 0.02, 0.0005, np.linspace(5, 100, 60))
    m = fit(s, SHAPE)
    assert m.valid[2, 3] and m.valid.sum() == 1
    assert abs(m.b0[2, 3] - 0.02) < 1e-12 and abs(m.b1[2, 3] - 0.0005) < 1e-12
    assert m.n_samples[2, 3] == 60


def test_fit_too_few_samples():
    m = fit([CalibrationSample((0, 0), 10.0, 0.1)], SHAPE, min_samples_per_bin=10)
    assert not m.valid.any()


def test_fit_narrow_range_spread_is_invalid():
    s = line_samples((0, 0), 0.02, 0.001, np.linspace(20, 22, 100))
    assert not fit(s, SHAPE, min_range_spread=5.0).valid[0, 0]
    assert fit(s, SHAPE, min_range_spread=1.0).valid[0, 0]


def test_fit_all_zero_residuals():
    rng = np.random.default_rng(0)
    s = CalibrationSet(rng.integers(0, 4, 5000), rng.integers(0, 6, 5000),
                       rng.uniform(5, 100, 5000), np.zeros(5000))
    m = fit(s, SHAPE)
    assert m.valid.all()
    assert np.array_equal(m.b0, np.zeros(SHAPE)) and np.array_equal(m.b1, np.zeros(SHAPE))


def test_fit_empty():
    assert not fit([], SHAPE).valid.any()


def test_fit_ignores_out_of_grid_samples():
    s = line_samples((0, 0), 0.1, 0.0, np.linspace(5, 50, 60)) + \
        line_samples((9, 9), 5.0, 1.0, np.linspace(5, 50, 60))
    m = fit(s, SHAPE)
    assert m.valid.sum() == 1 and abs(m.b0[0, 0] - 0.1) < 1e-12


def test_fit_round_trip_noiseless(rng):
    b0 = rng.uniform(-0.1, 0.1, SHAPE)
    b1 = rng.uniform(-0.002, 0.002, SHAPE)
    rows = rng.integers(0, 4, 20000)
    cols = rng.integers(0, 6, 20000)
    ranges = rng.uniform(2, 120, 20000)
    m = fit(CalibrationSet(rows, cols, ranges, b0[rows, cols] + b1[rows, cols] * ranges), SHAPE)
    assert m.valid.all()
    assert np.max(np.abs(m.b0 - b0)) < 1e-9 and np.max(np.abs(m.b1 - b1)) < 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_fit_round_trip_noisy_within_standard_error(seed):
    rng = np.random.default_rng(seed)
    sigma = 0.03
    n = 400
    b0, b1 = 0.05, 0.001
    x = rng.uniform(5, 100, n)
    s = CalibrationSet(np.zeros(n), np.zeros(n), x, b0 + b1 * x + rng.normal(0, sigma, n))
    m = fit(s, (1, 1))
    sxx = np.sum((x - x.mean()) ** 2)
    # prediction at the mean range has standard error sigma / sqrt(n)
    assert abs(m.b0[0, 0] + m.b1[0, 0] * x.mean() - (b0 + b1 * x.mean())) < 3 * sigma / np.sqrt(n)
    assert abs(m.b1[0, 0] - b1) < 3 * sigma / np.sqrt(sxx)


def test_fit_matches_lstsq_oracle(rng):
    x = rng.uniform(5, 100, 300)
    y = rng.normal(size=300)
    m = fit(CalibrationSet(np.zeros(300), np.ones(300), x, y), (1, 2), min_samples_per_bin=10)
    ref, *_ = np.linalg.lstsq(np.column_stack([np.ones(300), x]), y, rcond=None)
    assert np.allclose([m.b0[0, 1], m.b1[0, 1]], ref, atol=1e-12)


def test_calibration_set_round_trip():
    s = [CalibrationSample((1, 2), 10.0, 0.5), CalibrationSample((0, 0), 3.0, -0.1)]
    assert CalibrationSet.from_samples(s).samples() == s
    both = CalibrationSet.concatenate([CalibrationSet.from_samples(s)] * 2)
    assert len(both) == 4
    assert len(CalibrationSet.concatenate([])) == 0


# -- persistence ---------------------------------------------------------------

def test_save_load_round_trip(tmp_path, rng):
    m = BiasModel(rng.normal(size=SHAPE), rng.normal(size=SHAPE), rng.random(SHAPE) > 0.5,
                  rng.integers(0, 1000, SHAPE))
    save_bias_model(m, tmp_path / "b.csv")
    back = load_bias_model(tmp_path / "b.csv", SHAPE)
    assert np.array_equal(back.valid, m.valid)
    assert np.array_equal(back.b0[m.valid], m.b0[m.valid])
    assert np.array_equal(back.b1[m.valid], m.b1[m.valid])
    assert np.array_equal(back.n_samples[m.valid], m.n_samples[m.valid])
    assert (tmp_path / "b.csv").read_text().splitlines()[0] == "row,col,b0,b1,n_samples"


def test_load_rejects_bad_files(tmp_path):
    p = tmp_path / "b.csv"
    p.write_text("a,b\n")
    with pytest.raises(ParseError):
        load_bias_model(p, SHAPE)
    p.write_text("row,col,b0,b1,n_samples\n0,0,x,0,1\n")
    with pytest.raises(ParseError, match="record 1"):
        load_bias_model(p, SHAPE)
    p.write_text("row,col,b0,b1,n_samples\n7,0,0,0,1\n")
    with pytest.raises(ParseError):
        load_bias_model(p, SHAPE)


# -- samples from frames -------------------------------------------------------

class Still:
    span = (0.0, 1.0)

    def velocity(self, t):
        return np.zeros((np.size(t), 6))


def test_stationary_residual_is_raw_doppler():
    grid = GridConfig(azimuth_bin_deg=1.0, num_beam_rows=4)
    f = make_frame([[10, 0, 0], [10, 3, 0], [10, 5, 1]], doppler=[0.1, -0.2, 0.3], beam_row=[0, 1, 2])
    s = build_calibration_samples([f], Still(), Extrinsics.identity(),
                                  grid, ransac=None)
    assert np.allclose(np.sort(s.residuals), [-0.2, 0.1, 0.3])


def test_empty_frame_gives_no_samples():
    s = build_calibration_samples([make_frame(np.zeros((0, 3)))], Still(), Extrinsics.identity(),
                                  GridConfig())
    assert len(s) == 0


def test_samples_outside_groundtruth_span_are_skipped():
    f = make_frame([[10, 0, 0], [10, 1, 0]], timestamps=[0.5, 1.5], start=0.0, end=2.0)
    s = build_calibration_samples([f], Still(), Extrinsics.identity(),
                                  GridConfig(azimuth_bin_deg=1.0, num_beam_rows=4), ransac=None)
    assert len(s) == 1 and s.skipped == 1


def test_simulated_bias_recovered_on_its_line():
    grid = GridConfig(azimuth_bin_deg=6.0, num_beam_rows=80)
    truth = BiasModel.empty(grid.shape)
    for r, c in [(50, 10), (60, 4)]:
        truth.b0[r, c], truth.b1[r, c], truth.valid[r, c] = 0.01, 0.002, True
    cfg = SimConfig(duration=1.0, returns_per_frame=5000, bias=truth, grid=grid)
    seq = Sequence(cfg)
    s = build_calibration_samples(seq.frames(), seq.groundtruth, cfg.lidar, grid, ransac=None)
    biased = truth.valid[s.rows, s.cols]
    assert biased.sum() > 0
    assert np.allclose(s.residuals[biased], 0.01 + 0.002 * s.ranges[biased], atol=1e-9)
    assert np.max(np.abs(s.residuals[~biased])) < 1e-9


def test_rms_by_range_improves_after_correction(rng):
    x = rng.uniform(0, 100, 2000)
    y = 0.05 + 0.002 * x + rng.normal(0, 0.01, 2000)
    s = CalibrationSet(np.zeros(2000), np.zeros(2000), x, y)
    bands = rms_by_range(s, fit(s, (1, 1)), [0, 50, 100])
    assert [b["n"] for b in bands] == [np.sum(x < 50), np.sum(x >= 50)]
    assert all(b["rms_after"] < b["rms_before"] for b in bands)
