"""Trace calibration (etalon frequency ruler) and line-centre extraction."""
import logging
import math
from dataclasses import dataclass, field as dc_field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import least_squares
from scipy.signal import find_peaks, savgol_filter

from atomic_structure import STRONG_COUPLING, TransitionRow, TransitionTable
from errors import CalibrationError, PeakFitError
from field_estimator import PeakEntry, PeakList
from obe_simulator import Spectrum

logger = logging.getLogger(__name__)

MIN_TRACE_SAMPLES = 1000
SAMPLING_JITTER = 1e-6
ETALON_CHANNEL = "pd3_V"
SIGNAL_CHANNEL = "pd1_V"
REFERENCE_CHANNEL = "pd2_V"
MONITOR_CHANNEL = "pd4_V"


def _gaussian(u: np.ndarray) -> np.ndarray:
    return np.exp(-4 * math.log(2) * u ** 2)


def _lorentzian(u: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + 4 * u ** 2)


# Profiles are parametrized by their FWHM.
PROFILES = {"gaussian": _gaussian, "lorentzian": _lorentzian}


@dataclass(frozen=True, eq=False)
class RawTrace:
    time: np.ndarray
    channels: Dict[str, np.ndarray]

    def __post_init__(self):
        time = np.asarray(self.time, dtype=float)
        if len(time) < MIN_TRACE_SAMPLES:
            raise CalibrationError(f"trace has {len(time)} samples, need at least {MIN_TRACE_SAMPLES}")
        steps = np.diff(time)
        mean_step = steps.mean()
        if mean_step <= 0 or np.abs(steps - mean_step).max() > SAMPLING_JITTER * abs(mean_step):
            raise CalibrationError("trace is not uniformly sampled")
        channels = {name: np.asarray(values, dtype=float) for name, values in self.channels.items()}
        for name, values in channels.items():
            if values.shape != time.shape:
                raise CalibrationError(f"channel {name} length differs from the time column")
        object.__setattr__(self, "time", time)
        object.__setattr__(self, "channels", channels)

    def __len__(self) -> int:
        return len(self.time)

    def channel(self, name: str) -> np.ndarray:
        if name not in self.channels:
            raise CalibrationError(f"trace has no channel {name!r} (have {sorted(self.channels)})")
        return self.channels[name]


@dataclass(frozen=True, eq=False)
class FrequencyAxis:
    detuning: np.ndarray
    fsr_mhz: float
    anchor_sample: float
    anchor_detuning_mhz: float
    marker_samples: np.ndarray
    offset_mhz: float = 0.0

    def at(self, samples) -> np.ndarray:
        """Detuning (MHz) at fractional sample positions."""
        return _piecewise(np.asarray(samples, dtype=float), self.marker_samples, self.fsr_mhz) + self.offset_mhz

    @property
    def slope_mhz_per_sample(self) -> np.ndarray:
        return self.fsr_mhz / np.diff(self.marker_samples)


@dataclass(frozen=True)
class PeakFit:
    center_mhz: float
    width_mhz: float
    amplitude: float
    baseline: float
    sigma_center_mhz: float
    kind: str
    goodness: float

    @property
    def fwhm_mhz(self) -> float:
        return self.width_mhz

    def to_entry(self, row: Optional[TransitionRow] = None, status: str = "ok", label: str = "") -> PeakEntry:
        return PeakEntry(
            center_mhz=self.center_mhz,
            sigma_fit_mhz=self.sigma_center_mhz,
            label=label or (row.label if row else ""),
            alpha=row.alpha if row and status == "ok" else None,
            beta=row.beta if row and status == "ok" else None,
            polarization=row.polarization if row and status == "ok" else None,
            fwhm_mhz=self.width_mhz,
            kind=self.kind,
            status=status,
        )


class SubpixelPeak(NamedTuple):
    center: float
    flat: bool


@dataclass(frozen=True, eq=False)
class CalibrationResult:
    axis: FrequencyAxis
    spectrum: Spectrum
    markers: np.ndarray
    sigma_calib_mhz: float
    flat_markers: int = 0
    diagnostics: Dict[str, float] = dc_field(default_factory=dict)


# ---------------------------------------------------------------------------
# Filtering and peak finding


def savitzky_golay(signal, window: int = 11, order: int = 3) -> np.ndarray:
    """Polynomial smoothing; window must be odd and longer than order."""
    signal = np.asarray(signal, dtype=float)
    if window % 2 == 0 or not window > order >= 1 or window > len(signal):
        raise ValueError(f"invalid Savitzky-Golay window={window}, order={order} for length {len(signal)}")
    return savgol_filter(signal, window, order, mode="interp")


def detect_etalon_peaks(trace, min_prominence: float = 0.1, min_spacing: int = 1) -> List[int]:
    """Local maxima with prominence above min_prominence * (trace range), sorted."""
    trace = np.asarray(trace, dtype=float)
    span = float(np.ptp(trace)) if len(trace) else 0.0
    if span == 0:
        return []
    indices, _ = find_peaks(trace, prominence=min_prominence * span, distance=max(1, int(min_spacing)))
    return [int(i) for i in indices]


def parabolic_subpixel(trace, index: int) -> SubpixelPeak:
    """Vertex of the parabola through (index-1, index, index+1)."""
    trace = np.asarray(trace, dtype=float)
    if not 1 <= index <= len(trace) - 2:
        raise ValueError(f"index {index} has no neighbours in a trace of length {len(trace)}")
    y_minus, y_zero, y_plus = trace[index - 1:index + 2]
    curvature = y_minus - 2 * y_zero + y_plus
    if curvature == 0:
        return SubpixelPeak(float(index), True)
    return SubpixelPeak(index + (y_minus - y_plus) / (2 * curvature), False)


# ---------------------------------------------------------------------------
# Frequency axis


def _piecewise(samples: np.ndarray, markers: np.ndarray, fsr: float) -> np.ndarray:
    frequencies = fsr * np.arange(len(markers))
    values = np.interp(samples, markers, frequencies)
    first_slope = fsr / (markers[1] - markers[0])
    last_slope = fsr / (markers[-1] - markers[-2])
    before, after = samples < markers[0], samples > markers[-1]
    values = np.where(before, (samples - markers[0]) * first_slope, values)
    values = np.where(after, frequencies[-1] + (samples - markers[-1]) * last_slope, values)
    return values


def build_frequency_axis(etalon_centers: Sequence[float], fsr_mhz: float, anchor: Tuple[float, float],
                         n_samples: int) -> FrequencyAxis:
    """Piecewise-linear sample -> detuning map with markers exactly fsr apart."""
    markers = np.asarray(etalon_centers, dtype=float)
    if len(markers) < 2:
        raise CalibrationError(f"need at least 2 etalon markers, found {len(markers)}")
    if np.any(np.diff(markers) <= 0):
        raise CalibrationError("etalon markers are not strictly increasing")
    if fsr_mhz <= 0:
        raise CalibrationError("FSR must be positive")
    anchor_sample, anchor_detuning = float(anchor[0]), float(anchor[1])
    if not 0 <= anchor_sample <= n_samples - 1:
        raise CalibrationError(f"anchor sample {anchor_sample} outside the scan")
    offset = anchor_detuning - float(_piecewise(np.array([anchor_sample]), markers, fsr_mhz)[0])
    detuning = _piecewise(np.arange(n_samples, dtype=float), markers, fsr_mhz) + offset
    return FrequencyAxis(detuning=detuning, fsr_mhz=fsr_mhz, anchor_sample=anchor_sample,
                         anchor_detuning_mhz=anchor_detuning, marker_samples=markers, offset_mhz=offset)


def sigma_calib_from_markers(markers: Sequence[float], fsr_mhz: float) -> float:
    """RMS deviation of marker spacings from their mean, in MHz."""
    spacings = np.diff(np.asarray(markers, dtype=float))
    if len(spacings) < 2:
        return 0.0
    mean_spacing = spacings.mean()
    return float(np.sqrt(np.mean((spacings - mean_spacing) ** 2)) * fsr_mhz / mean_spacing)


# ---------------------------------------------------------------------------
# Profile fits


def _covariance(result, n_points: int) -> Tuple[np.ndarray, float]:
    dof = n_points - len(result.x)
    if dof <= 0:
        raise PeakFitError("more parameters than points", result.x)
    variance = 2 * result.cost / dof
    _, singular, vt = np.linalg.svd(result.jac, full_matrices=False)
    if singular[-1] <= singular[0] * 1e-12:
        raise PeakFitError("singular fit covariance", result.x)
    return (vt.T / singular ** 2) @ vt * variance, variance


def _solve(residuals, p0: np.ndarray, max_iter: int):
    result = least_squares(residuals, p0, method="lm", x_scale="jac", xtol=1e-12, ftol=1e-12, gtol=1e-12,
                           max_nfev=max_iter * (len(p0) + 1))
    if result.status <= 0:
        raise PeakFitError(f"fit did not converge: {result.message}", result.x)
    return result


def _window_data(spectrum: Spectrum, window: Tuple[float, float]) -> Tuple[np.ndarray, np.ndarray]:
    low, high = window
    x, y = spectrum.window(low, high)
    if len(x) < 5:
        raise PeakFitError(f"window {window} holds {len(x)} points")
    if np.ptp(y) == 0:
        raise PeakFitError(f"window {window} is flat")
    return x, y


def _edge_baseline(y: np.ndarray) -> float:
    edge = max(1, len(y) // 10)
    return float(np.median(np.concatenate([y[:edge], y[-edge:]])))


def fit_peak(spectrum: Spectrum, window: Tuple[float, float], kind: str = "gaussian",
             max_iter: int = 200) -> PeakFit:
    """amplitude * profile((nu - nu0) / w) + baseline by nonlinear least squares."""
    if kind not in PROFILES:
        raise ValueError(f"profile kind must be one of {sorted(PROFILES)}")
    profile = PROFILES[kind]
    low, high = window
    x, y = _window_data(spectrum, window)
    baseline = _edge_baseline(y)
    extremum = int(np.argmax(np.abs(y - baseline)))
    p0 = np.array([y[extremum] - baseline, x[extremum], (high - low) / 2, baseline])

    def residuals(p):
        return p[0] * profile((x - p[1]) / p[2]) + p[3] - y

    result = _solve(residuals, p0, max_iter)
    amplitude, center, width, offset = result.x
    if not low <= center <= high:
        raise PeakFitError(f"fitted centre {center:.3f} MHz left the window {window}", result.x)
    covariance, variance = _covariance(result, len(x))
    return PeakFit(
        center_mhz=float(center),
        width_mhz=float(abs(width)),
        amplitude=float(amplitude),
        baseline=float(offset),
        sigma_center_mhz=float(max(math.sqrt(max(covariance[1, 1], 0.0)), 1e-12)),
        kind=kind,
        goodness=float(math.sqrt(variance)),
    )


def fit_peak_pair(spectrum: Spectrum, window: Tuple[float, float], centers: Tuple[float, float],
                  widths: Tuple[float, float], kind: str = "gaussian", max_iter: int = 400) -> Tuple[PeakFit, PeakFit]:
    """Joint two-profile fit with a shared baseline; raises PeakFitError if unresolved."""
    profile = PROFILES[kind]
    low, high = window
    x, y = _window_data(spectrum, window)
    baseline = _edge_baseline(y)
    heights = [float(np.interp(c, x, y)) - baseline for c in centers]
    p0 = np.array([heights[0], centers[0], widths[0], heights[1], centers[1], widths[1], baseline])

    def residuals(p):
        return p[0] * profile((x - p[1]) / p[2]) + p[3] * profile((x - p[4]) / p[5]) + p[6] - y

    result = _solve(residuals, p0, max_iter)
    covariance, variance = _covariance(result, len(x))
    a1, c1, w1, a2, c2, w2, offset = result.x
    separation = abs(c2 - c1)
    sigmas = [math.sqrt(max(covariance[1, 1], 0.0)), math.sqrt(max(covariance[4, 4], 0.0))]
    if not (low <= c1 <= high and low <= c2 <= high) or max(sigmas) > separation / 4:
        raise PeakFitError("pair not resolved", result.x)
    fits = tuple(PeakFit(center_mhz=float(c), width_mhz=float(abs(w)), amplitude=float(a), baseline=float(offset),
                         sigma_center_mhz=float(max(s, 1e-12)), kind=kind, goodness=float(math.sqrt(variance)))
                 for a, c, w, s in ((a1, c1, w1, sigmas[0]), (a2, c2, w2, sigmas[1])))
    return fits[0], fits[1]


def lineshape_fwhm(spectrum: Spectrum, center_mhz: float, half_width_mhz: float, kind: str = "lorentzian") -> float:
    """FWHM in MHz of a single-profile fit over center +- half_width."""
    return fit_peak(spectrum, (center_mhz - half_width_mhz, center_mhz + half_width_mhz), kind).fwhm_mhz


def remove_background(spectrum: Spectrum, window_mhz: float = 1500.0, order: int = 2) -> Spectrum:
    """Subtract a wide Savitzky-Golay baseline (the Doppler pedestal)."""
    step = float(np.median(np.diff(spectrum.detuning)))
    window = int(window_mhz / step) | 1
    window = min(window, len(spectrum.signal) - (1 - len(spectrum.signal) % 2))
    baseline = savitzky_golay(spectrum.signal, window, order)
    metadata = dict(spectrum.metadata, background_window_MHz=window_mhz)
    return Spectrum(detuning=spectrum.detuning, signal=spectrum.signal - baseline, metadata=metadata)


def _missing(row: TransitionRow, kind: str) -> PeakEntry:
    return PeakEntry(center_mhz=float("nan"), sigma_fit_mhz=float("nan"), label=row.label, kind=kind,
                     status="missing")


def extract_peaks(spectrum: Spectrum, expected: TransitionTable, search_half_width: float = 150.0,
                  kind: str = "gaussian", strong: float = STRONG_COUPLING) -> PeakList:
    """One fit per expected strong line; close pairs are fit jointly or reported blended."""
    lines = sorted(expected.strong(strong), key=lambda row: row.detuning_mhz)
    singles: List[Optional[PeakFit]] = []
    for row in lines:
        window = (row.detuning_mhz - search_half_width, row.detuning_mhz + search_half_width)
        try:
            singles.append(fit_peak(spectrum, window, kind))
        except PeakFitError as e:
            logger.debug("No peak for %s: %s", row.label, e)
            singles.append(None)

    entries: List[PeakEntry] = []
    i = 0
    while i < len(lines):
        row, fit = lines[i], singles[i]
        if fit is None:
            entries.append(_missing(row, kind))
            i += 1
            continue
        partner = i + 1 if i + 1 < len(lines) and singles[i + 1] is not None else None
        if partner is not None:
            other, other_fit = lines[partner], singles[partner]
            if abs(other.detuning_mhz - row.detuning_mhz) < 2 * max(fit.fwhm_mhz, other_fit.fwhm_mhz):
                window = (row.detuning_mhz - search_half_width, other.detuning_mhz + search_half_width)
                try:
                    first, second = fit_peak_pair(spectrum, window, (row.detuning_mhz, other.detuning_mhz),
                                                  (fit.fwhm_mhz, other_fit.fwhm_mhz), kind)
                    entries.extend([first.to_entry(row), second.to_entry(other)])
                except PeakFitError as e:
                    logger.info("Blended: %s and %s (%s)", row.label, other.label, e)
                    entries.append(fit.to_entry(status="blended", label=f"{row.label} + {other.label}"))
                i += 2
                continue
        entries.append(fit.to_entry(row))
        i += 1
    return PeakList(tuple(entries))


def detect_lines(spectrum: Spectrum, min_prominence: float = 0.1, search_half_width: float = 150.0,
                 kind: str = "gaussian") -> PeakList:
    """Unassigned peak list: every prominent feature, fit in its own window."""
    contrast = spectrum.signal - np.median(spectrum.signal)
    if abs(contrast.min()) > contrast.max():
        contrast = -contrast
    step = float(np.median(np.diff(spectrum.detuning)))
    indices = detect_etalon_peaks(contrast, min_prominence, max(1, int(search_half_width / step)))
    entries = []
    for index in indices:
        center = spectrum.detuning[index]
        try:
            fit = fit_peak(spectrum, (center - search_half_width, center + search_half_width), kind)
        except PeakFitError as e:
            logger.debug("Feature at %.1f MHz not fit: %s", center, e)
            continue
        entries.append(fit.to_entry(label=f"peak@{fit.center_mhz:.1f}"))
    logger.info("Detected %d line(s)", len(entries))
    return PeakList(tuple(entries))


# ---------------------------------------------------------------------------
# Calibration pipeline


def detrend_intensity(signal: np.ndarray, monitor: np.ndarray) -> np.ndarray:
    """Divide out a linear drift fitted to the intensity monitor."""
    samples = np.arange(len(monitor), dtype=float)
    trend = np.polyval(np.polyfit(samples, monitor, 1), samples)
    if np.any(trend <= 0):
        raise CalibrationError("intensity monitor trend is not positive")
    return signal / (trend / trend.mean())


def locate_reference(trace: RawTrace, window: Tuple[int, int], kind: str = "gaussian",
                     channel: str = REFERENCE_CHANNEL) -> float:
    """Fractional sample of the reference-cell line inside a sample window."""
    values = trace.channel(channel)
    samples = Spectrum(detuning=np.arange(len(values), dtype=float), signal=values)
    return fit_peak(samples, (float(window[0]), float(window[1])), kind).center_mhz


def calibrate_trace(trace: RawTrace, fsr_mhz: float = 1500.0, window: int = 11, order: int = 3,
                    min_prominence: float = 0.1, min_spacing: int = 1,
                    anchor: Optional[Tuple[float, float]] = None, reference_window: Optional[Tuple[int, int]] = None,
                    anchor_detuning_mhz: float = 0.0, detrend: bool = False) -> CalibrationResult:
    """Etalon channel to frequency axis, then the signal channel on that axis.

    Markers are the sub-pixel centres of the smoothed etalon peaks. The anchor
    ties one sample to anchor_detuning_mhz: explicit, else the reference-cell
    line inside reference_window, else the first marker.
    """
    etalon = savitzky_golay(trace.channel(ETALON_CHANNEL), window, order)
    coarse = [i for i in detect_etalon_peaks(etalon, min_prominence, min_spacing) if 1 <= i <= len(etalon) - 2]
    refined = [parabolic_subpixel(etalon, i) for i in coarse]
    markers = np.array([peak.center for peak in refined])
    logger.info("Found %d etalon markers", len(markers))

    if anchor is None:
        if reference_window is not None:
            anchor = (locate_reference(trace, reference_window), anchor_detuning_mhz)
        elif len(markers):
            anchor = (float(markers[0]), anchor_detuning_mhz)
        else:
            raise CalibrationError("need at least 2 etalon markers, found 0")
    axis = build_frequency_axis(markers, fsr_mhz, anchor, len(trace))

    signal = trace.channel(SIGNAL_CHANNEL)
    if detrend:
        signal = detrend_intensity(signal, trace.channel(MONITOR_CHANNEL))
    sigma_calib = sigma_calib_from_markers(markers, fsr_mhz)
    diagnostics = {
        "marker_count": int(len(markers)),
        "intervals": int(len(markers) - 1),
        "spacing_rms_samples": float(np.std(np.diff(markers))) if len(markers) > 2 else 0.0,
        "sigma_calib_MHz": sigma_calib,
        "span_MHz": float(axis.detuning[-1] - axis.detuning[0]),
    }
    spectrum = Spectrum(detuning=axis.detuning, signal=signal,
                        metadata={"fsr_MHz": fsr_mhz, "anchor_sample": axis.anchor_sample,
                                  "anchor_detuning_MHz": axis.anchor_detuning_mhz})
    return CalibrationResult(axis=axis, spectrum=spectrum, markers=markers, sigma_calib_mhz=sigma_calib,
                             flat_markers=sum(peak.flat for peak in refined), diagnostics=diagnostics)
