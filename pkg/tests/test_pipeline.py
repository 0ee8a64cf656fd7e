import numpy as np
import pytest

from tdc_detector.core import AttackMethod, TraceLabel
from tdc_detector.leakage import PLACEMENTS
from tdc_detector.pipeline import CaptureJob, TracePipeline
from tdc_detector.utils import make_rng


def test_capture_without_noise_is_deterministic(quantized_cnn, quiet_pipeline, digits):
    a, pred_a = quiet_pipeline.capture(quantized_cnn, digits.x[0], None)
    b, pred_b = quiet_pipeline.capture(quantized_cnn, digits.x[0], None)
    np.testing.assert_array_equal(a.readouts, b.readouts)
    assert pred_a == pred_b
    assert len(a) == 3272
    assert a.readouts.max() <= 64


def test_capture_labels_follow_attack(quantized_cnn, quiet_pipeline, digits):
    trace, _ = quiet_pipeline.capture(quantized_cnn, digits.x[0], None, attack=AttackMethod.cw, victim_id=7)
    assert trace.label == TraceLabel.adversarial
    assert trace.meta.victim_id == 7
    assert trace.meta.attack == AttackMethod.cw


def test_noise_is_seeded(quantized_cnn, digits):
    pipe = TracePipeline()
    a, _ = pipe.capture(quantized_cnn, digits.x[0], make_rng(1, 2))
    b, _ = pipe.capture(quantized_cnn, digits.x[0], make_rng(1, 2))
    c, _ = pipe.capture(quantized_cnn, digits.x[0], make_rng(1, 3))
    np.testing.assert_array_equal(a.readouts, b.readouts)
    assert np.any(a.readouts != c.readouts)


def test_inputs_change_the_trace(quantized_cnn, quiet_pipeline, digits):
    a, _ = quiet_pipeline.capture(quantized_cnn, digits.x[0], None)
    b, _ = quiet_pipeline.capture(quantized_cnn, digits.x[1], None)
    assert np.any(a.readouts != b.readouts)


def test_placement_attenuates_and_is_recorded(quantized_cnn, quiet_pipeline, digits):
    far = quiet_pipeline.with_placement(PLACEMENTS["top-left"])
    assert far.calib == quiet_pipeline.calib
    near_trace, _ = quiet_pipeline.capture(quantized_cnn, digits.x[0], None)
    far_trace, _ = far.capture(quantized_cnn, digits.x[0], None)
    assert far_trace.meta.placement == PLACEMENTS["top-left"].code
    nominal = quiet_pipeline.calib.nominal_readout
    assert np.abs(far_trace.readouts - nominal).sum() < np.abs(near_trace.readouts - nominal).sum()


def test_frequency_factor_shortens_trace(quantized_cnn, quiet_pipeline, digits):
    trace, _ = quiet_pipeline.capture(quantized_cnn, digits.x[0], None, frequency_factor=4)
    assert len(trace) == 818
    assert trace.meta.factor == 4


def test_run_is_independent_of_worker_count(quantized_cnn, digits):
    pipe = TracePipeline()
    jobs = [CaptureJob(0, x, AttackMethod.none) for x in digits.x[:4]]
    serial = pipe.run(jobs, {0: quantized_cnn}, seed=9, n_jobs=1, disable_progress=True)
    parallel = pipe.run(jobs, {0: quantized_cnn}, seed=9, n_jobs=2, disable_progress=True)
    for a, b in zip(serial.traces, parallel.traces):
        np.testing.assert_array_equal(a.readouts, b.readouts)
    np.testing.assert_array_equal(serial.predictions, parallel.predictions)
    assert serial.labels.tolist() == [0, 0, 0, 0]


def test_capture_result_plot_and_pickle(tmp_path, quantized_cnn, quiet_pipeline, digits):
    result = quiet_pipeline.run([CaptureJob(0, digits.x[0])], {0: quantized_cnn}, disable_progress=True)
    ax = result.plot_trace(0)
    assert ax.get_ylabel() == "TDC readout"
    result.save_to_pickle(tmp_path / "capture.pkl")
    assert (tmp_path / "capture.pkl").exists()


def test_unknown_victim(quiet_pipeline, digits):
    with pytest.raises(KeyError):
        quiet_pipeline.run([CaptureJob(5, digits.x[0])], {}, disable_progress=True)
