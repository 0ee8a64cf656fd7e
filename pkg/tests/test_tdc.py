import math

import numpy as np
import pytest

from tdc_detector.core import AttackMethod, CalibrationFailed, DataError, TraceLabel
from tdc_detector.tdc import (
    CalibrationResult,
    ReadoutMode,
    TDCConfig,
    Trace,
    TraceMeta,
    calibrate,
    calibration_surface,
    encode,
    read_trace,
    readout,
    sample_trace,
    subsample,
    write_trace,
)


@pytest.fixture
def cfg():
    return TDCConfig()


@pytest.fixture
def calib(cfg):
    return calibrate(cfg)


def test_default_calibration(cfg, calib):
    assert cfg.capture_window_ps == pytest.approx(3333.333, rel=1e-6)
    assert (calib.coarse_len, calib.fine_len, calib.nominal_readout) == (22, 28, 64)
    assert int(cfg.taps_reached(22, 28)) == 64


def test_calibration_surface_marks_invalid_settings(cfg):
    surface = calibration_surface(cfg)
    assert surface.shape == (33, 33)
    # with no initial delay the edge runs off the end of the line
    assert surface[0, 0] == -1
    assert surface[22, 28] == 64


def test_calibration_fails_when_nothing_fits():
    with pytest.raises(CalibrationFailed):
        calibrate(TDCConfig(coarse_max=0, fine_max=0))


def _exhaustive_calibration(cfg):
    window = cfg.sampling_phase / cfg.sensor_clock_hz * 1e12
    landing = []
    for coarse in range(cfg.coarse_max + 1):
        for fine in range(cfg.fine_max + 1):
            r = math.floor((window - (coarse * cfg.coarse_unit + fine * cfg.fine_unit)) / cfg.tap_unit)
            if 0 < r < cfg.taps:
                landing.append((abs(r - cfg.taps / 2), coarse, fine, r))
    if not landing:
        return None
    _, coarse, fine, r = min(landing)
    if not cfg.taps / 4 < r < 3 * cfg.taps / 4:
        return None
    return coarse, fine, r


def test_calibration_matches_exhaustive_search(cfg, calib):
    assert _exhaustive_calibration(cfg) == (calib.coarse_len, calib.fine_len, calib.nominal_readout)


def test_calibration_matches_exhaustive_search_on_random_lines():
    rng = np.random.default_rng(11)
    for _ in range(200):
        cfg = TDCConfig(
            taps=int(rng.choice([64, 128, 256])),
            coarse_unit=float(rng.uniform(40, 120)),
            fine_unit=float(rng.uniform(4, 20)),
            tap_unit=float(rng.uniform(8, 40)),
            sampling_phase=float(rng.uniform(0.2, 0.8)),
        )
        expected = _exhaustive_calibration(cfg)
        if expected is None:
            with pytest.raises(CalibrationFailed):
                calibrate(cfg)
        else:
            result = calibrate(cfg)
            assert (result.coarse_len, result.fine_len, result.nominal_readout) == expected
            assert cfg.taps / 4 < result.nominal_readout < 3 * cfg.taps / 4


def test_calibration_ties_prefer_shorter_lines():
    # equal coarse and fine units make many settings reach the same tap
    cfg = TDCConfig(coarse_unit=30.0, fine_unit=30.0, tap_unit=40.0)
    result = calibrate(cfg)
    assert (result.coarse_len, result.fine_len, result.nominal_readout) == (0, 25, 64)
    assert int(cfg.taps_reached(25, 0)) == 64


def test_calibration_needs_landing_strictly_inside_middle_half():
    # no delay elements: the edge reaches window / tap_unit taps
    at_quarter = TDCConfig(coarse_max=0, fine_max=0, sampling_phase=0.0975)
    assert int(at_quarter.taps_reached(0, 0)) == 32
    with pytest.raises(CalibrationFailed):
        calibrate(at_quarter)
    just_inside = TDCConfig(coarse_max=0, fine_max=0, sampling_phase=0.1005)
    assert calibrate(just_inside).nominal_readout == 33


def test_describe(cfg, calib):
    text = calib.describe(cfg)
    assert "coarse=22" in text and "nominal=64/128" in text


def test_readout_is_linear_and_clamped(cfg, calib):
    np.testing.assert_array_equal(readout(cfg, calib, [0.0, 0.01, 0.1, 1.0, -1.0]), [64, 60, 24, 0, 128])


@pytest.mark.parametrize("taps,expected", [(0, 0), (15, 15), (16, 16), (20, 24), (64, 240), (128, 4080)])
def test_exp_sum_encoding(cfg, taps, expected):
    assert int(encode(cfg, taps, ReadoutMode.exp_sum)) == expected


def test_exp_sum_is_monotone(cfg):
    values = encode(cfg, np.arange(129), ReadoutMode.exp_sum)
    assert np.all(np.diff(values) > 0)


def test_raw_encoding_is_thermometer(cfg):
    code = encode(cfg, np.array([3, 0]), ReadoutMode.raw)
    assert code.shape == (2, 128)
    assert code[0, :3].tolist() == [1, 1, 1] and code[0, 3:].sum() == 0
    assert code[1].sum() == 0


def test_config_validation():
    with pytest.raises(ValueError):
        TDCConfig(taps=130)
    with pytest.raises(ValueError):
        TDCConfig(sensor_clock_hz=1e6, bus_clock_hz=1e7)
    assert TDCConfig(readout_mode="exp_sum").readout_mode == ReadoutMode.exp_sum


def test_sample_trace_and_frequency_factor(cfg, calib):
    v = np.linspace(0.0, 0.1, 100)
    trace = sample_trace(v, cfg, calib, label=TraceLabel.adversarial)
    assert len(trace) == 100
    assert trace.readouts[0] == 64
    assert trace.label == TraceLabel.adversarial

    slow = sample_trace(v, cfg, calib, frequency_factor=4)
    assert len(slow) == 25
    assert slow.meta.factor == 4
    np.testing.assert_array_equal(slow.readouts, trace.readouts[::4])
    np.testing.assert_array_equal(subsample(trace, 4).readouts, slow.readouts)


def test_sample_trace_errors(cfg, calib):
    with pytest.raises(DataError):
        sample_trace(np.zeros(0), cfg, calib)
    with pytest.raises(ValueError):
        sample_trace(np.zeros(4), cfg, calib, frequency_factor=0)


def test_raw_mode_stores_thermometer_length(calib):
    cfg = TDCConfig(readout_mode=ReadoutMode.raw)
    trace = sample_trace(np.zeros(3), cfg, calib)
    np.testing.assert_array_equal(trace.readouts, [64, 64, 64])
    assert trace.thermometer(cfg.taps).shape == (3, 128)


def test_sctr_file(tmp_path):
    meta = TraceMeta(victim_id=100_007, attack=AttackMethod.watermark, placement=2, factor=3)
    trace = Trace(np.array([1, 2, 4080]), TraceLabel.backdoor, meta, ReadoutMode.exp_sum)
    path = tmp_path / "t.sctr"
    write_trace(path, trace)
    assert path.read_bytes()[:4] == b"SCTR"

    loaded = read_trace(path)
    np.testing.assert_array_equal(loaded.readouts, trace.readouts)
    assert loaded.label == TraceLabel.backdoor
    assert loaded.meta == meta
    assert loaded.readout_mode == ReadoutMode.exp_sum


def test_sctr_bad_magic(tmp_path):
    path = tmp_path / "bad.sctr"
    path.write_bytes(b"XXXX" + bytes(32))
    with pytest.raises(DataError):
        read_trace(path)


def test_calibration_result_is_hashable():
    assert len({CalibrationResult(1, 2, 3), CalibrationResult(1, 2, 3)}) == 1
