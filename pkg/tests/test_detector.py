import numpy as np
import pandas as pd
import pytest

from tdc_detector.core import DataError, TraceLabel
from tdc_detector.detector import (
    CLASS_NAMES,
    DetectionReport,
    DetectorConfig,
    DetectorModel,
    build_detector,
    evaluate,
    grad_cam,
    load_from_pickle,
    preprocess,
    preprocess_batch,
    train_detector,
)
from tdc_detector.network import check_gradients
from tdc_detector.tdc import Trace

SMALL = dict(window=1, trace_len=48, N=2, D=8, conv_channels=4, conv_kernel=3, epochs=1, batch=8)


def _toy_traces(n_per_class, length, rng, region=None):
    """
    Four classes of noisy traces that differ by a bump on the region indices
    whose height depends on the class.
    """
    if region is None:
        region = slice(0, length)
    X, y = [], []
    for label in TraceLabel:
        for _ in range(n_per_class):
            trace = rng.normal(0.0, 0.05, length)
            trace[region] += 0.4 * int(label)
            trace[0], trace[-1] = 0.0, 1.6
            X.append(trace)
            y.append(int(label))
    return X, np.array(y)


def test_config_validation():
    with pytest.raises(ValueError):
        DetectorConfig(rows=4)
    with pytest.raises(ValueError):
        DetectorConfig(trace_len=100)
    with pytest.raises(ValueError):
        DetectorConfig(D=100)
    with pytest.raises(ValueError):
        DetectorConfig(N=0)
    assert DetectorConfig().columns == 256


def test_preprocess_shapes_and_range(rng):
    cfg = DetectorConfig()
    out = preprocess(rng.normal(size=7680), cfg)
    assert out.shape == (3, 256)
    assert out.min() == pytest.approx(0.0) and out.max() == pytest.approx(1.0)


def test_preprocess_constant_trace():
    out = preprocess(np.full(7680, 42), DetectorConfig())
    np.testing.assert_array_equal(out, 0.5)


def test_preprocess_pads_short_traces():
    cfg = DetectorConfig(window=1, trace_len=12)
    out = preprocess(np.arange(6.0), cfg)
    np.testing.assert_allclose(out.reshape(-1), [0, 0, 0, 0, 0.2, 0.4, 0.6, 0.8, 1, 0, 0, 0])


def test_preprocess_crops_long_traces():
    cfg = DetectorConfig(window=1, trace_len=6)
    out = preprocess(np.arange(12.0), cfg)
    np.testing.assert_allclose(out.reshape(-1) * 11, [3, 4, 5, 6, 7, 8])


def test_preprocess_accepts_traces():
    trace = Trace(np.array([1, 2, 3, 4, 5, 6]))
    out = preprocess(trace, DetectorConfig(window=2, trace_len=3))
    np.testing.assert_allclose(out.reshape(-1), [0, 0.5, 1])
    with pytest.raises(DataError):
        preprocess(np.zeros(0), DetectorConfig())


def _pooled_oracle(values, window, length):
    pooled = [float(np.mean(values[i : i + window])) for i in range(0, len(values), window)]
    lo, hi = min(pooled), max(pooled)
    pooled = [(v - lo) / (hi - lo) for v in pooled] if hi > lo else [0.5] * len(pooled)
    if len(pooled) >= length:
        start = (len(pooled) - length) // 2
        return pooled[start : start + length]
    before = (length - len(pooled)) // 2
    return [0.0] * before + pooled + [0.0] * (length - len(pooled) - before)


@pytest.mark.parametrize("window", [1, 3, 7, 10])
def test_preprocess_matches_mean_pooling(rng, window):
    cfg = DetectorConfig(window=window, trace_len=48)
    for _ in range(25):
        raw = rng.integers(0, 129, size=int(rng.integers(20, 600)))
        expected = np.array(_pooled_oracle(raw.astype(float), window, 48)).reshape(3, 16)
        np.testing.assert_allclose(preprocess(raw, cfg), expected, rtol=1e-12, atol=1e-12)


def _closed_form_parameters(cfg):
    C, k, D = cfg.conv_channels, cfg.conv_kernel, cfg.D
    count = C * cfg.rows * k + C + C * D + D
    for i in range(cfg.N):
        inputs = D if i == 0 else 2 * D
        count += 2 * (inputs * 3 * D + D * 3 * D + 3 * D)
    return count + 2 * D * 4 + 4


@pytest.mark.parametrize("N,D", [(1, 8), (2, 16), (5, 128)])
def test_detector_parameter_count(N, D):
    cfg = DetectorConfig(N=N, D=D)
    assert build_detector(cfg).n_parameters() == _closed_form_parameters(cfg)


def test_deeper_detector_has_more_parameters():
    shallow = build_detector(DetectorConfig(N=1, D=128)).n_parameters()
    deep = build_detector(DetectorConfig(N=5, D=128)).n_parameters()
    assert deep > shallow


def test_detector_architecture():
    cfg = DetectorConfig(**SMALL)
    net = build_detector(cfg)
    kinds = [layer.kind.name for layer in net.layers]
    assert kinds == ["Conv1D", "FullyConnected", "BGRU", "BGRU", "GELU", "Dropout", "FullyConnected", "Softmax"]
    probs = net.forward(np.zeros((5, 3, 16)))
    assert probs.shape == (5, 4)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)


def test_detector_gradients(rng):
    cfg = DetectorConfig(window=1, trace_len=18, N=1, D=8, d_menu=(8,), conv_channels=2, conv_kernel=3, dropout=0.0)
    net = build_detector(cfg)
    x = rng.random((2, 3, 6))
    assert check_gradients(net, x, h=1e-5, labels=np.array([0, 3])) < 1e-3


def test_training_needs_every_class(rng):
    cfg = DetectorConfig(**SMALL)
    X = rng.random((8, 3, 16))
    with pytest.raises(DataError, match="extraction"):
        train_detector(X, np.array([0, 1, 2, 0, 1, 2, 0, 1]), cfg)


def test_report_metrics():
    y_true = np.array([0, 0, 0, 0, 1, 1, 2, 3, 3, 3])
    y_pred = np.array([0, 0, 0, 2, 3, 1, 2, 3, 1, 0])
    report = DetectionReport.from_predictions(y_true, y_pred)
    assert report.confusion.sum() == 10
    np.testing.assert_allclose(report.per_class_acc, [0.75, 0.5, 1.0, 1 / 3])
    assert report.total_acc == pytest.approx(0.6)
    # adversarial and extraction swaps count as correct when merged
    assert report.merged_acc == pytest.approx(0.8)
    assert report.fpr == pytest.approx(0.25)
    np.testing.assert_allclose(report.merged_per_class(), [0.75, 1.0, 1.0, 2 / 3])


def test_report_absent_class_is_zero():
    report = DetectionReport.from_predictions(np.array([0, 0, 1]), np.array([0, 1, 1]))
    assert report.per_class_acc[TraceLabel.backdoor] == 0.0
    with pytest.raises(DataError):
        DetectionReport.from_predictions(np.array([]), np.array([]))


def test_report_frame_and_text(tmp_path):
    report = DetectionReport.from_predictions(np.array([0, 1, 2, 3]), np.array([0, 1, 2, 3]))
    frame = report.to_frame()
    assert frame["class"].tolist() == CLASS_NAMES + ["total"]
    assert frame["accuracy"].tolist() == [100.0] * 5
    report.to_csv(tmp_path / "report.csv")
    assert pd.read_csv(tmp_path / "report.csv").shape == (5, 6)
    assert "FPR: 0.0%" in report.pretty()


def test_save_and_load(tmp_path, rng):
    cfg = DetectorConfig(**SMALL)
    model = DetectorModel(build_detector(cfg), cfg, [1.0], [0.5])
    model.save(tmp_path / "det")
    loaded = DetectorModel.load(tmp_path / "det")
    assert loaded.cfg == cfg
    assert loaded.losses == [1.0]
    X = rng.random((3, 3, 16))
    np.testing.assert_allclose(loaded.predict_proba(X), model.predict_proba(X), atol=1e-5)

    model.save_to_pickle(tmp_path / "det.pkl")
    np.testing.assert_array_equal(load_from_pickle(tmp_path / "det.pkl").predict(X), model.predict(X))


def test_grad_cam_map(rng):
    cfg = DetectorConfig(**SMALL)
    net = build_detector(cfg)
    cam = grad_cam(net, rng.random((3, 16)), target_class=2)
    assert cam.importance.shape == (16,)
    assert cam.target_class == 2
    if not cam.all_zero:
        assert cam.importance.max() == pytest.approx(1.0)
        assert cam.importance.min() >= 0


def test_grad_cam_without_evidence():
    cfg = DetectorConfig(**SMALL)
    net = build_detector(cfg)
    for params in net.layers[0].params.values():
        params[:] = 0.0
    cam = grad_cam(DetectorModel(net, cfg), np.ones((3, 16)), target_class=1)
    assert cam.all_zero
    np.testing.assert_array_equal(cam.importance, 0.0)


@pytest.mark.slow
def test_detector_learns_separable_classes():
    rng = np.random.default_rng(0)
    traces, y = _toy_traces(40, 48, rng)
    cfg = DetectorConfig(window=1, trace_len=48, N=1, D=16, conv_channels=8, conv_kernel=3, epochs=30, lr=5e-3, batch=16)
    X = preprocess_batch(traces, cfg)
    model = train_detector(X, y, cfg)
    test_traces, test_y = _toy_traces(10, 48, np.random.default_rng(1))
    report = evaluate(model, preprocess_batch(test_traces, cfg), test_y)
    assert report.total_acc > 0.8
    np.testing.assert_array_equal(model.classify(test_traces[:4]), model.predict(preprocess_batch(test_traces[:4], cfg)))


@pytest.mark.slow
def test_grad_cam_focuses_on_discriminative_region():
    rng = np.random.default_rng(2)
    length = 96
    middle = np.concatenate([np.arange(r * 32 + 11, r * 32 + 21) for r in range(3)])
    traces, y = _toy_traces(40, length, rng, region=middle)
    cfg = DetectorConfig(window=1, trace_len=length, N=1, D=16, conv_channels=8, conv_kernel=3, epochs=30, lr=5e-3, batch=16)
    X = preprocess_batch(traces, cfg)
    model = train_detector(X, y, cfg)

    # columns 11-20 of every row hold the bump
    maps = [grad_cam(model, X[i], int(y[i])).importance for i in np.flatnonzero(y == TraceLabel.extraction)]
    mean = np.mean(maps, axis=0)
    assert mean[11:21].sum() / mean.sum() > 0.5
