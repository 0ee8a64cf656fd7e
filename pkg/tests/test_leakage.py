import numpy as np
import pytest

from tdc_detector.leakage import (
    PLACEMENTS,
    PDNParams,
    PlacementProfile,
    VoltageSeries,
    apply_placement,
    get_placement,
    pdn_filter,
    switching_activity,
)
from tdc_detector.schedule import emit_schedule


def test_switching_activity_counts_toggles():
    words = np.array([[0xFF, 0x00], [0xFF, 0x0F], [0x00, 0x0F]], dtype=np.uint8)
    np.testing.assert_array_equal(switching_activity(words), [8, 4, 8])


def test_constant_words_toggle_once():
    words = np.full((5, 4), 0xAA, dtype=np.uint8)
    np.testing.assert_array_equal(switching_activity(words), [16, 0, 0, 0, 0])


def test_rc_node_is_transparent_at_defaults():
    assert PDNParams().rc_alpha == 1.0
    assert PDNParams(C=1e-5).rc_alpha == pytest.approx(0.1)


@pytest.mark.parametrize("n", [1, 10, 100])
def test_impulse_response(n):
    params = PDNParams()
    activity = np.zeros(6)
    activity[0] = n
    v = pdn_filter(activity, params).samples
    assert v[0] == pytest.approx(0.11 * 5e-4 * n)
    # the falling edge drives L di/dt negative, clamped to 0
    np.testing.assert_array_equal(v[1:], 0.0)


def test_steady_state_is_resistive():
    params = PDNParams()
    v = pdn_filter(np.full(50, 20), params).samples
    assert v[-1] == pytest.approx(20 * 5e-4 * 0.1)


def test_rc_smoothing_delays_response():
    v = pdn_filter(np.full(20, 10), PDNParams(C=1e-5)).samples
    assert np.all(np.diff(v[1:]) >= 0)
    assert v[1] < v[-1]


def test_pdn_params_validation():
    with pytest.raises(ValueError):
        PDNParams(R=0.0)
    with pytest.raises(ValueError):
        PDNParams(noise_sigma=-1.0)


def test_placement_gain_and_smear():
    series = VoltageSeries(np.array([0.0, 1.0, 0.0, 0.0, 0.0]))
    out = apply_placement(series, PlacementProfile("p", gain=0.5, smear=1), noise_sigma=0.0)
    np.testing.assert_allclose(out.samples, [0.0, 0.25, 0.25, 0.0, 0.0])
    assert out.meta["placement"] == "p"


def test_baseline_placement_is_identity_without_noise(rng):
    v = rng.random(30)
    out = apply_placement(VoltageSeries(v), PLACEMENTS["baseline"], noise_sigma=0.0)
    np.testing.assert_allclose(out.samples, v)


def test_placement_noise_needs_rng():
    series = VoltageSeries(np.zeros(4), noise_sigma=1e-3)
    with pytest.raises(ValueError):
        apply_placement(series, PLACEMENTS["baseline"])
    out = apply_placement(series, PLACEMENTS["baseline"], rng=np.random.default_rng(0))
    assert np.std(out.samples) > 0


def test_placement_registry():
    assert get_placement("center").gain == pytest.approx(0.7)
    with pytest.raises(ValueError, match="not registered"):
        get_placement("nowhere")
    with pytest.raises(ValueError):
        PlacementProfile("bad", gain=1.5)


def test_voltage_from_schedule(quantized_cnn, digits):
    stream = emit_schedule(quantized_cnn, digits.x[0])
    v = pdn_filter(switching_activity(stream), PDNParams(noise_sigma=0.0))
    assert len(v) == len(stream)
    assert np.all(v.samples >= 0)
    assert v.samples.max() > 0


def _toggle_oracle(words):
    total = np.zeros(len(words), dtype=int)
    previous = [0] * words.shape[1]
    for t, row in enumerate(words):
        total[t] = sum(bin(int(w) ^ p).count("1") for w, p in zip(row, previous))
        previous = [int(w) for w in row]
    return total


def test_switching_activity_matches_bitwise_oracle(rng):
    for lanes in (1, 16, 33):
        words = rng.integers(0, 256, size=(100, lanes), dtype=np.uint8)
        np.testing.assert_array_equal(switching_activity(words), _toggle_oracle(words))


@pytest.mark.parametrize("k", [1, 5])
def test_leading_zero_cycles_shift_activity(rng, k):
    words = rng.integers(0, 256, size=(40, 8), dtype=np.uint8)
    padded = np.vstack([np.zeros((k, 8), dtype=np.uint8), words])
    shifted = switching_activity(padded)
    np.testing.assert_array_equal(shifted[:k], 0)
    np.testing.assert_array_equal(shifted[k:], switching_activity(words))


def test_zero_activity_gives_zero_drop():
    np.testing.assert_array_equal(pdn_filter(np.zeros(25), PDNParams()).samples, 0.0)


@pytest.mark.parametrize("C", [1e-6, 1e-5])
def test_pdn_filter_is_linear(rng, C):
    # non-decreasing activity keeps di/dt >= 0, so the clamp never engages
    a1 = np.cumsum(rng.integers(0, 5, 60))
    a2 = np.cumsum(rng.integers(0, 5, 60))
    params = PDNParams(C=C, noise_sigma=0.0)
    total = pdn_filter(a1 + a2, params).samples
    np.testing.assert_allclose(total, pdn_filter(a1, params).samples + pdn_filter(a2, params).samples, rtol=1e-12, atol=1e-18)


def test_placements_give_distinct_traces(rng):
    series = VoltageSeries(rng.random(50))
    outs = [apply_placement(series, PLACEMENTS[name], noise_sigma=0.0).samples for name in ("top-left", "center", "bottom-right")]
    for i in range(3):
        for j in range(i + 1, 3):
            assert not np.allclose(outs[i], outs[j])
