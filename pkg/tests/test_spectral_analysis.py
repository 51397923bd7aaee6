import math

import numpy as np
import pytest

from atomic_structure import transition_table
from conftest import scan_frequency
from errors import CalibrationError, PeakFitError
from obe_simulator import OBEParams, Spectrum, weak_probe_spectrum
from spectral_analysis import (RawTrace, build_frequency_axis, calibrate_trace, detect_etalon_peaks, detect_lines,
                               detrend_intensity, extract_peaks, fit_peak, fit_peak_pair, lineshape_fwhm,
                               parabolic_subpixel, remove_background, savitzky_golay, sigma_calib_from_markers)


def _gaussian(x, center, fwhm):
    return np.exp(-4 * math.log(2) * ((x - center) / fwhm) ** 2)


def _true_samples(frequencies, n_samples=3000, curvature=1e-4):
    """Invert the synthetic quadratic scan."""
    last = n_samples - 1
    slope = (31000.0 - curvature * last ** 2) / last
    return (-slope + np.sqrt(slope ** 2 + 4 * curvature * (np.asarray(frequencies) + 500.0))) / (2 * curvature)


# ---------------------------------------------------------------------------
# Savitzky-Golay


def test_savitzky_golay_keeps_cubics():
    x = np.linspace(-1, 1, 101)
    cubic = 0.3 - 1.2 * x + 0.5 * x ** 2 + 2.0 * x ** 3
    np.testing.assert_allclose(savitzky_golay(cubic), cubic, atol=1e-9)
    np.testing.assert_allclose(savitzky_golay(np.full(50, 4.2)), 4.2, atol=1e-12)


def test_savitzky_golay_is_linear_in_offset_and_ramp():
    rng = np.random.default_rng(1)
    signal = rng.standard_normal(300)
    ramp = 2.5 + 0.01 * np.arange(300)
    np.testing.assert_allclose(savitzky_golay(signal + ramp), savitzky_golay(signal) + ramp, atol=1e-9)


def test_savitzky_golay_preserves_resolved_peaks():
    x = np.arange(400, dtype=float)
    peak = _gaussian(x, 200.0, 30.0)
    assert savitzky_golay(peak).max() == pytest.approx(1.0, abs=0.02)


def test_savitzky_golay_reduces_white_noise():
    noise = np.random.default_rng(5).standard_normal(10000)
    smoothed = savitzky_golay(noise)
    assert noise[100:-100].std() / smoothed[100:-100].std() > 2.0


@pytest.mark.parametrize("window, order", [(10, 3), (3, 3), (5, 0), (1001, 3)])
def test_savitzky_golay_rejects_bad_parameters(window, order):
    with pytest.raises(ValueError):
        savitzky_golay(np.zeros(500), window, order)


# ---------------------------------------------------------------------------
# Etalon markers


def test_detects_every_etalon_marker_at_snr_20(etalon_trace):
    trace = etalon_trace(noise=0.05, seed=2)
    result = calibrate_trace(trace, min_prominence=0.3, min_spacing=50)
    expected = _true_samples(1500.0 * np.arange(21))
    assert len(result.markers) == 21
    np.testing.assert_array_less(np.abs(result.markers - expected), 2.0)


def test_marker_refinement_error_at_snr_20(etalon_trace):
    expected = _true_samples(1500.0 * np.arange(21))
    clean = calibrate_trace(etalon_trace(), min_prominence=0.3, min_spacing=50).markers
    np.testing.assert_array_less(np.abs(clean - expected), 0.05)

    # 15-sample wide markers: single-marker scatter sits near 0.25 samples, the bias must not.
    errors = np.concatenate([
        calibrate_trace(etalon_trace(noise=0.05, seed=seed), min_prominence=0.3, min_spacing=50).markers - expected
        for seed in range(20)])
    assert len(errors) == 20 * 21
    assert abs(errors.mean()) < 0.05
    assert np.sqrt(np.mean(errors ** 2)) < 0.5


def test_detect_etalon_peaks_edge_cases():
    assert detect_etalon_peaks(np.arange(100.0)) == []
    assert detect_etalon_peaks(np.ones(100)) == []
    x = np.arange(200, dtype=float)
    merged = _gaussian(x, 100.0, 12.0) + _gaussian(x, 104.0, 12.0)
    assert len(detect_etalon_peaks(merged)) == 1
    two = _gaussian(x, 50.0, 10.0) + _gaussian(x, 150.0, 10.0)
    assert detect_etalon_peaks(two) == [50, 150]


def test_parabolic_subpixel_exact_cases():
    assert parabolic_subpixel([0.0, 1.0, 0.0], 1) == (1.0, False)
    x = np.arange(20, dtype=float)
    center, flat = parabolic_subpixel(-(x - 10.3) ** 2, 10)
    assert center == pytest.approx(10.3, abs=1e-12) and not flat
    assert parabolic_subpixel([1.0, 1.0, 1.0], 1) == (1.0, True)
    with pytest.raises(ValueError):
        parabolic_subpixel([0.0, 1.0, 0.0], 0)


def test_parabolic_subpixel_on_sampled_gaussian():
    x = np.arange(100, dtype=float)
    center, _ = parabolic_subpixel(_gaussian(x, 50.25, 10.0), 50)
    assert center == pytest.approx(50.25, abs=0.02)


def test_parabolic_subpixel_with_noise():
    rng = np.random.default_rng(9)
    x = np.arange(40, dtype=float)
    errors = []
    for offset in rng.uniform(-0.3, 0.3, 200):
        trace = _gaussian(x, 20.0 + offset, 4.0) + 0.005 * rng.standard_normal(len(x))
        errors.append(parabolic_subpixel(trace, 20).center - (20.0 + offset))
    assert np.mean(np.abs(errors)) < 0.05


# ---------------------------------------------------------------------------
# Frequency axis


def test_linear_frequency_axis():
    markers = 100.0 + 150.0 * np.arange(21)
    axis = build_frequency_axis(markers, 1500.0, (100.0, 0.0), 3300)
    np.testing.assert_allclose(axis.detuning, 10.0 * (np.arange(3300) - 100.0), atol=1e-9)
    np.testing.assert_allclose(axis.slope_mhz_per_sample, 10.0)


def test_quadratic_scan_axis_accuracy(etalon_trace):
    result = calibrate_trace(etalon_trace(), min_prominence=0.3, min_spacing=50)
    markers = result.markers
    true_markers = _true_samples(1500.0 * np.arange(21))
    at_markers = result.axis.at(true_markers) - 1500.0 * np.arange(21)
    assert np.sqrt(np.mean(at_markers ** 2)) < 1.0

    inside = np.arange(int(math.ceil(markers[0])), int(markers[-1]) + 1)
    between = result.axis.detuning[inside] - scan_frequency(inside.astype(float))
    assert np.abs(between).max() < 5.0
    assert result.axis.at(markers[-1]) - result.axis.at(markers[0]) == pytest.approx(30000.0, rel=1e-12)


def test_axis_anchor_is_exact():
    markers = np.array([120.3, 270.9, 419.5, 571.2])
    axis = build_frequency_axis(markers, 1500.0, (333.3, -4000.0), 700)
    assert axis.at(333.3) == pytest.approx(-4000.0, abs=1e-9)
    np.testing.assert_allclose(np.diff(axis.at(markers)), 1500.0, rtol=1e-12)
    assert np.all(np.diff(axis.detuning) > 0)


@pytest.mark.parametrize("markers, fsr, anchor", [
    ([100.0], 1500.0, (100.0, 0.0)),
    ([100.0, 90.0, 300.0], 1500.0, (100.0, 0.0)),
    ([100.0, 250.0], 0.0, (100.0, 0.0)),
    ([100.0, 250.0], 1500.0, (-5.0, 0.0)),
])
def test_axis_errors(markers, fsr, anchor):
    with pytest.raises(CalibrationError):
        build_frequency_axis(markers, fsr, anchor, 1000)


def test_sigma_calib_from_markers():
    assert sigma_calib_from_markers([0.0, 100.0, 200.0, 300.0], 1500.0) == 0.0
    assert sigma_calib_from_markers([0.0, 100.0], 1500.0) == 0.0
    assert sigma_calib_from_markers([0.0, 99.0, 200.0, 299.0, 400.0], 1500.0) == pytest.approx(15.0, rel=1e-12)


# ---------------------------------------------------------------------------
# Profile fits


def test_fit_gaussian_noiseless():
    x = np.linspace(-100, 100, 401)
    spectrum = Spectrum(detuning=x, signal=0.8 * _gaussian(x, 3.2, 25.0) + 0.1)
    fit = fit_peak(spectrum, (-80.0, 80.0))
    assert fit.center_mhz == pytest.approx(3.2, abs=1e-6)
    assert fit.fwhm_mhz == pytest.approx(25.0, rel=1e-6)
    assert fit.amplitude == pytest.approx(0.8, rel=1e-6)
    assert fit.baseline == pytest.approx(0.1, abs=1e-6)


def test_fit_lorentzian_width():
    x = np.linspace(-100, 100, 801)
    spectrum = Spectrum(detuning=x, signal=1.0 / (1.0 + 4 * ((x - 1.0) / 12.0) ** 2))
    fit = fit_peak(spectrum, (-100.0, 100.0), kind="lorentzian")
    assert fit.fwhm_mhz == pytest.approx(12.0, rel=1e-3)
    assert lineshape_fwhm(spectrum, 1.0, 100.0) == pytest.approx(12.0, rel=1e-3)


def test_fit_noisy_gaussian_is_consistent():
    rng = np.random.default_rng(21)
    x = np.linspace(-100, 100, 401)
    within = 0
    for _ in range(100):
        truth = rng.uniform(-5, 5)
        spectrum = Spectrum(detuning=x, signal=_gaussian(x, truth, 25.0) + 0.02 * rng.standard_normal(len(x)))
        fit = fit_peak(spectrum, (-80.0, 80.0))
        assert abs(fit.center_mhz - truth) < 25.0 / 20
        within += abs(fit.center_mhz - truth) < 2 * fit.sigma_center_mhz
    assert within >= 85


def test_fit_flat_window_raises():
    x = np.linspace(-10, 10, 50)
    with pytest.raises(PeakFitError):
        fit_peak(Spectrum(detuning=x, signal=np.ones(50)), (-10.0, 10.0))
    with pytest.raises(PeakFitError):
        fit_peak(Spectrum(detuning=x, signal=_gaussian(x, 0.0, 3.0)), (20.0, 30.0))


def test_fit_peak_pair_resolves_separated_lines():
    x = np.linspace(-100, 100, 801)
    spectrum = Spectrum(detuning=x, signal=_gaussian(x, -20.0, 20.0) + 0.6 * _gaussian(x, 20.0, 20.0))
    first, second = fit_peak_pair(spectrum, (-100.0, 100.0), (-18.0, 22.0), (20.0, 20.0))
    assert first.center_mhz == pytest.approx(-20.0, abs=1e-4)
    assert second.center_mhz == pytest.approx(20.0, abs=1e-4)
    assert second.amplitude == pytest.approx(0.6, rel=1e-4)


def test_remove_background_keeps_narrow_features():
    x = np.arange(-5000.0, 5000.0 + 5, 5.0)
    pedestal = 2.0 - 1e-8 * x ** 2
    spectrum = Spectrum(detuning=x, signal=pedestal + _gaussian(x, 300.0, 20.0), metadata={"field_T": 0.4})
    flat = remove_background(spectrum)
    far = np.abs(x - 300.0) > 1000
    assert np.abs(flat.signal[far]).max() < 1e-6
    assert flat.signal[np.argmin(np.abs(x - 300.0))] > 0.9
    assert flat.metadata["field_T"] == 0.4


# ---------------------------------------------------------------------------
# Line extraction


def test_extract_peaks_recovers_isolated_lines(constants, table_4092):
    params = OBEParams(temperature_k=1.0, detuning_min_mhz=-13000.0, detuning_max_mhz=13000.0,
                       detuning_step_mhz=1.0)
    spectrum = weak_probe_spectrum(0.4092, params, constants)
    peaks = extract_peaks(spectrum, table_4092)
    strong = table_4092.strong()

    isolated = [row for row in strong
                if min(abs(row.detuning_mhz - other.detuning_mhz) for other in strong if other is not row) > 300]
    assert len(isolated) >= 10
    by_label = {entry.label: entry for entry in peaks if entry.status == "ok"}
    for row in isolated:
        entry = by_label[row.label]
        assert entry.center_mhz == pytest.approx(row.detuning_mhz, abs=1.0)
        assert entry.key == row.key
    assert all(entry.status != "missing" for entry in peaks)


def test_detect_lines_returns_unassigned_entries():
    x = np.arange(-3000.0, 3000.0, 1.0)
    signal = sum(_gaussian(x, c, 30.0) for c in (-1000.0, 0.0, 2000.0))
    peaks = detect_lines(Spectrum(detuning=x, signal=signal))
    assert len(peaks) == 3
    np.testing.assert_allclose([entry.center_mhz for entry in peaks], [-1000.0, 0.0, 2000.0], atol=1e-3)
    assert all(entry.key is None and entry.label.startswith("peak@") for entry in peaks)


def test_detect_lines_finds_dips():
    x = np.arange(-1000.0, 1000.0, 1.0)
    peaks = detect_lines(Spectrum(detuning=x, signal=1.0 - 0.4 * _gaussian(x, 120.0, 40.0)))
    assert [round(entry.center_mhz, 3) for entry in peaks] == [120.0]


# ---------------------------------------------------------------------------
# Calibration pipeline


def test_calibrate_trace_diagnostics(etalon_trace):
    result = calibrate_trace(etalon_trace(), min_prominence=0.3, min_spacing=50)
    assert result.diagnostics["marker_count"] == 21
    assert result.diagnostics["intervals"] == 20
    assert result.diagnostics["span_MHz"] == pytest.approx(31000.0, abs=50.0)
    assert result.axis.at(result.markers[0]) == pytest.approx(0.0, abs=1e-9)
    assert result.flat_markers == 0
    dip = result.spectrum.detuning[np.argmin(result.spectrum.signal)]
    assert dip == pytest.approx(15000.0, abs=15.0)


def test_calibrate_trace_with_reference_line(etalon_trace):
    trace = etalon_trace()
    by_marker = calibrate_trace(trace, min_prominence=0.3, min_spacing=50)
    by_reference = calibrate_trace(trace, min_prominence=0.3, min_spacing=50, reference_window=(0, 150))
    np.testing.assert_allclose(by_reference.axis.detuning, by_marker.axis.detuning, atol=1.0)


def test_calibrate_trace_requires_etalon_channel(etalon_trace):
    trace = etalon_trace(channels=("pd1_V", "pd2_V"))
    with pytest.raises(CalibrationError, match="pd3_V"):
        calibrate_trace(trace)


def test_calibrate_trace_without_markers(etalon_trace):
    trace = etalon_trace()
    flat = RawTrace(time=trace.time, channels=dict(trace.channels, pd3_V=np.zeros(len(trace))))
    with pytest.raises(CalibrationError, match="at least 2"):
        calibrate_trace(flat)


def test_raw_trace_validation():
    with pytest.raises(CalibrationError):
        RawTrace(time=np.arange(10.0), channels={})
    time = np.arange(2000.0)
    time[1000] += 0.5
    with pytest.raises(CalibrationError, match="uniformly"):
        RawTrace(time=time, channels={})
    with pytest.raises(CalibrationError, match="length"):
        RawTrace(time=np.arange(2000.0), channels={"pd1_V": np.zeros(1999)})


def test_detrend_intensity():
    monitor = 1.0 + 1e-4 * np.arange(2000)
    np.testing.assert_allclose(detrend_intensity(2 * monitor, monitor), 2 * monitor.mean(), rtol=1e-9)
    with pytest.raises(CalibrationError):
        detrend_intensity(np.ones(100), -np.ones(100))


def test_line_centres_move_monotonically_with_field(constants):
    params = OBEParams(temperature_k=1.0, detuning_min_mhz=-14000.0, detuning_max_mhz=14000.0,
                       detuning_step_mhz=1.0)
    fields = (0.2602, 0.3263, 0.4092)
    centres = {}
    for field in fields:
        for entry in extract_peaks(weak_probe_spectrum(field, params, constants), transition_table(field, constants)):
            if entry.assigned:
                centres.setdefault(entry.key, []).append(entry.center_mhz)
    tracked = {key: values for key, values in centres.items() if len(values) == len(fields)}
    assert len(tracked) >= 8
    for (_, _, q), values in tracked.items():
        steps = np.diff(values)
        assert np.all(steps > 0) if q == 1 else np.all(steps < 0)
