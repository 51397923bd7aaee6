"""Magnetic field inversion from measured line centres, with Monte Carlo errors."""
import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import minimize_scalar

from atomic_structure import (STRONG_COUPLING, AtomicConstants, TransitionRow, line_detunings,
                              transition_table)
from errors import BracketError, EstimationError, MonteCarloError, UnderConstrainedError

logger = logging.getLogger(__name__)

PEAK_STATUSES = ("ok", "blended", "missing")
DEFAULT_GATE_MHZ = 300.0
DEFAULT_BLEND_MHZ = 400.0
DEFAULT_XATOL_T = 1e-6
MAX_FAILURE_FRACTION = 0.05
SCAN_STEP_T = 5e-4


@dataclass(frozen=True)
class PeakEntry:
    center_mhz: float
    sigma_fit_mhz: float = 0.0
    label: str = ""
    alpha: Optional[int] = None
    beta: Optional[int] = None
    polarization: Optional[int] = None
    fwhm_mhz: float = float("nan")
    kind: str = "gaussian"
    status: str = "ok"

    @property
    def key(self) -> Optional[Tuple[int, int, int]]:
        if self.alpha is None or self.beta is None or self.polarization is None:
            return None
        return self.alpha, self.beta, self.polarization

    @property
    def usable(self) -> bool:
        return self.status == "ok"

    @property
    def assigned(self) -> bool:
        return self.usable and self.key is not None

    def assign(self, row: Optional[TransitionRow]) -> "PeakEntry":
        if row is None:
            return dataclasses.replace(self, alpha=None, beta=None, polarization=None)
        return dataclasses.replace(self, alpha=row.alpha, beta=row.beta, polarization=row.polarization,
                                   label=row.label)


@dataclass(frozen=True)
class PeakList:
    entries: Tuple[PeakEntry, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        seen = set()
        for entry in self.entries:
            if entry.status not in PEAK_STATUSES:
                raise ValueError(f"unknown peak status {entry.status!r}")
            if not entry.usable:
                continue
            if not math.isfinite(entry.center_mhz):
                raise ValueError(f"peak {entry.label or '?'} has a non-finite centre")
            if not entry.sigma_fit_mhz >= 0:
                raise ValueError(f"peak {entry.label or '?'} has a negative sigma_fit")
            if entry.key is not None:
                if entry.key in seen:
                    raise ValueError(f"transition {entry.key} assigned twice")
                seen.add(entry.key)

    @classmethod
    def from_centers(cls, centers: Sequence[float], sigma_fit_mhz: float = 0.0) -> "PeakList":
        return cls(tuple(PeakEntry(center_mhz=float(c), sigma_fit_mhz=sigma_fit_mhz) for c in centers))

    def __iter__(self) -> Iterator[PeakEntry]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def assigned(self) -> List[PeakEntry]:
        return [entry for entry in self.entries if entry.assigned]

    def usable(self) -> List[PeakEntry]:
        return [entry for entry in self.entries if entry.usable]


@dataclass(frozen=True, eq=False)
class FieldEstimate:
    field_t: float
    sigma_t: float
    n_mc: int
    loss: float
    residuals: Dict[str, float]
    bounds: Tuple[float, float]
    sigma_calib_mhz: float
    trials: np.ndarray = dc_field(repr=False)
    failures: int = 0
    sigma_analytic_t: float = float("nan")
    weighted: bool = False

    @property
    def trial_summary(self) -> Dict[str, float]:
        good = self.trials[np.isfinite(self.trials)]
        if not len(good):
            return {"mean": float("nan"), "std": float("nan"), "min": float("nan"), "max": float("nan")}
        return {
            "mean": float(good.mean()),
            "std": float(good.std(ddof=1)) if len(good) > 1 else 0.0,
            "min": float(good.min()),
            "max": float(good.max()),
        }

    def summary_line(self) -> str:
        return f"B = {self.field_t:.4f} ± {self.sigma_t:.4f} T"


@dataclass(frozen=True)
class SensitivityReport:
    value_mt_per_rthz: float
    measurement_time_s: float
    formula: str = "sigma_B[mT] * sqrt(t[s])"


# ---------------------------------------------------------------------------
# Assignment


def resolvable_lines(field: float, constants: AtomicConstants, blend_mhz: float = DEFAULT_BLEND_MHZ,
                     strong: float = STRONG_COUPLING) -> List[TransitionRow]:
    """Strong σ± lines with no same-polarization strong neighbour closer than blend_mhz."""
    rows = transition_table(field, constants).strong(strong)
    resolvable = []
    for row in rows:
        neighbours = [abs(other.detuning_mhz - row.detuning_mhz) for other in rows
                      if other is not row and other.polarization == row.polarization]
        if not neighbours or min(neighbours) >= blend_mhz:
            resolvable.append(row)
    return resolvable


def _coerce(peaks: Union[PeakList, Sequence[float], Sequence[PeakEntry]]) -> PeakList:
    if isinstance(peaks, PeakList):
        return peaks
    items = list(peaks)
    if items and not isinstance(items[0], PeakEntry):
        return PeakList.from_centers(items)
    return PeakList(tuple(items))


def _gated_cost(centers: np.ndarray, lines: np.ndarray, gate: float) -> float:
    if not len(lines):
        return len(centers) * gate ** 2
    distance = np.abs(centers[:, None] - lines[None, :]).min(axis=1)
    return float(np.sum(np.minimum(distance, gate) ** 2))


def refine_guess(peaks: PeakList, field_guess: float, constants: AtomicConstants, span_t: float,
                 bounds: Optional[Tuple[float, float]] = None, gate_mhz: float = DEFAULT_GATE_MHZ,
                 blend_mhz: float = DEFAULT_BLEND_MHZ) -> float:
    """Field on a SCAN_STEP_T grid around the guess minimizing the gated nearest-line cost."""
    low, high = bounds if bounds else (0.0, math.inf)
    low, high = max(low, field_guess - span_t, 0.0), min(high, field_guess + span_t)
    grid = np.arange(low, high + SCAN_STEP_T / 2, SCAN_STEP_T)
    centers = np.array([entry.center_mhz for entry in peaks.usable()])
    costs = [_gated_cost(centers, np.array([row.detuning_mhz for row in
                                            resolvable_lines(b, constants, blend_mhz)]), gate_mhz)
             for b in grid]
    best = float(grid[int(np.argmin(costs))])
    logger.debug("Refined assignment guess %.4f T -> %.4f T", field_guess, best)
    return best


def assign_peaks(peaks: Union[PeakList, Sequence[float]], field_guess: float, constants: AtomicConstants,
                 gate_mhz: float = DEFAULT_GATE_MHZ, blend_mhz: float = DEFAULT_BLEND_MHZ,
                 search_span_t: float = 0.0, bounds: Optional[Tuple[float, float]] = None) -> PeakList:
    """Greedy one-to-one nearest-neighbour assignment against transition_table(field_guess)."""
    peaks = _coerce(peaks)
    if bounds and not bounds[0] <= field_guess <= bounds[1]:
        raise ValueError(f"field guess {field_guess} T outside bounds {bounds}")
    if search_span_t > 0:
        field_guess = refine_guess(peaks, field_guess, constants, search_span_t, bounds, gate_mhz, blend_mhz)
    lines = resolvable_lines(field_guess, constants, blend_mhz)

    candidates = []
    for k, entry in enumerate(peaks.entries):
        if not entry.usable:
            continue
        for j, row in enumerate(lines):
            mismatch = abs(entry.center_mhz - row.detuning_mhz)
            if mismatch < gate_mhz:
                candidates.append((mismatch, k, j))
    candidates.sort()

    matched: Dict[int, TransitionRow] = {}
    taken = set()
    for _, k, j in candidates:
        if k in matched or j in taken:
            continue
        matched[k] = lines[j]
        taken.add(j)

    entries = tuple(entry.assign(matched.get(k)) for k, entry in enumerate(peaks.entries))
    if len(matched) < 2:
        raise UnderConstrainedError(f"only {len(matched)} peak(s) assigned within {gate_mhz} MHz")
    logger.info("Assigned %d of %d peaks at B_guess=%.4f T", len(matched), len(peaks.usable()), field_guess)
    return PeakList(entries)


def exclude_blended(peaks: PeakList, field: float, constants: AtomicConstants,
                    blend_mhz: float = DEFAULT_BLEND_MHZ) -> PeakList:
    """Mark assigned peaks whose line has a close same-polarization neighbour at `field` as blended."""
    keep = {row.key for row in resolvable_lines(field, constants, blend_mhz)}
    entries = tuple(dataclasses.replace(entry, status="blended") if entry.assigned and entry.key not in keep
                    else entry for entry in peaks.entries)
    dropped = sum(a.status != b.status for a, b in zip(peaks.entries, entries))
    if dropped:
        logger.info("Excluded %d blended line(s) at %.4f T", dropped, field)
    return PeakList(entries)


# ---------------------------------------------------------------------------
# Loss and inversion


def _prepared(peaks: PeakList, sigma_calib: float = 0.0):
    assigned = peaks.assigned()
    if len(assigned) < 2:
        raise UnderConstrainedError(f"need at least 2 assigned peaks, got {len(assigned)}")
    keys = [(entry.alpha, entry.beta) for entry in assigned]
    centers = np.array([entry.center_mhz for entry in assigned])
    sigmas = np.sqrt(np.array([entry.sigma_fit_mhz for entry in assigned]) ** 2 + sigma_calib ** 2)
    return assigned, keys, centers, sigmas


def _weights(sigmas: np.ndarray, weighted: bool) -> np.ndarray:
    if not weighted:
        return np.ones_like(sigmas)
    if np.any(sigmas <= 0):
        raise ValueError("weighted loss needs positive per-peak uncertainties")
    return 1.0 / sigmas ** 2


def _residual_loss(field: float, keys, centers: np.ndarray, weights: np.ndarray,
                   constants: AtomicConstants) -> float:
    residuals = centers - line_detunings(field, keys, constants)
    return float(np.sum(weights * residuals ** 2))


def loss(field: float, peaks: PeakList, constants: AtomicConstants, weighted: bool = False,
         sigma_calib: float = 0.0) -> float:
    """L(B) = sum_k (nu_exp - nu_theo(B))^2 in MHz^2 (optionally 1/sigma_k^2 weighted)."""
    _, keys, centers, sigmas = _prepared(peaks, sigma_calib)
    return _residual_loss(field, keys, centers, _weights(sigmas, weighted), constants)


def _validate_bounds(bounds: Tuple[float, float]) -> Tuple[float, float]:
    low, high = float(bounds[0]), float(bounds[1])
    if not (0 <= low < high and math.isfinite(high)):
        raise ValueError(f"invalid field bounds {bounds}")
    return low, high


def _minimize(keys, centers: np.ndarray, weights: np.ndarray, bounds: Tuple[float, float],
              constants: AtomicConstants, xatol: float, max_iter: int) -> Tuple[float, float]:
    result = minimize_scalar(_residual_loss, bounds=bounds, method="bounded",
                             args=(keys, centers, weights, constants),
                             options={"xatol": xatol, "maxiter": max_iter})
    if not result.success:
        raise EstimationError(f"bounded minimization did not converge: {result.message}")
    field = float(result.x)
    if field - bounds[0] < 10 * xatol or bounds[1] - field < 10 * xatol:
        raise BracketError(f"loss minimum at the search bound ({field:.6f} T in {bounds})")
    return field, float(result.fun)


def estimate_field(peaks: PeakList, bounds: Tuple[float, float], constants: AtomicConstants,
                   xatol: float = DEFAULT_XATOL_T, max_iter: int = 500, weighted: bool = False,
                   sigma_calib: float = 0.0) -> float:
    """B_hat from bounded golden-section/parabolic minimization of the loss."""
    bounds = _validate_bounds(bounds)
    _, keys, centers, sigmas = _prepared(peaks, sigma_calib)
    field, _ = _minimize(keys, centers, _weights(sigmas, weighted), bounds, constants, xatol, max_iter)
    return field


def analytic_sigma_b(peaks: PeakList, field: float, sigma_calib: float, constants: AtomicConstants,
                     weighted: bool = False, step_t: float = 1e-5) -> float:
    """Linearized sigma_B from the Jacobian d nu_theo / dB at the estimate."""
    _, keys, _, sigmas = _prepared(peaks, sigma_calib)
    jacobian = (line_detunings(field + step_t, keys, constants)
                - line_detunings(max(field - step_t, 0.0), keys, constants)) / (field + step_t - max(field - step_t, 0.0))
    weights = _weights(sigmas, weighted)
    information = np.sum(weights * jacobian ** 2)
    return float(math.sqrt(np.sum((weights * jacobian * sigmas) ** 2)) / information)


def monte_carlo_uncertainty(peaks: PeakList, sigma_calib: float, n_mc: int, bounds: Tuple[float, float],
                            seed: int, constants: AtomicConstants, weighted: bool = False, jobs: int = 1,
                            xatol: float = DEFAULT_XATOL_T, max_iter: int = 500) -> FieldEstimate:
    """B_hat from the measured centres plus its Monte Carlo spread.

    Each of the n_mc trials perturbs every centre by a normal draw with its combined
    sigma (fit and calibration in quadrature) and re-minimizes. Trials that fail are
    recorded as NaN; more than MAX_FAILURE_FRACTION of them raises MonteCarloError.
    """
    if n_mc < 100:
        raise ValueError(f"N_MC must be at least 100, got {n_mc}")
    if seed is None:
        raise ValueError("an explicit seed is required")
    if sigma_calib < 0:
        raise ValueError("sigma_calib must be non-negative")
    bounds = _validate_bounds(bounds)
    assigned, keys, centers, sigmas = _prepared(peaks, sigma_calib)
    weights = _weights(sigmas, weighted)
    field, best_loss = _minimize(keys, centers, weights, bounds, constants, xatol, max_iter)

    # Noise is drawn up-front so trial scheduling cannot change the result.
    noise = np.random.default_rng(seed).standard_normal((n_mc, len(centers))) * sigmas

    def trial(j: int) -> float:
        try:
            return _minimize(keys, centers + noise[j], weights, bounds, constants, xatol, max_iter)[0]
        except EstimationError as e:
            logger.debug("Trial %d failed: %s", j, e)
            return float("nan")

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            trials = np.array(list(pool.map(trial, range(n_mc))))
    else:
        trials = np.array([trial(j) for j in range(n_mc)])

    failures = int(np.isnan(trials).sum())
    if failures > MAX_FAILURE_FRACTION * n_mc:
        raise MonteCarloError(f"{failures} of {n_mc} Monte Carlo trials failed", failures, n_mc)
    good = trials[np.isfinite(trials)]
    # Spread about the first trial so identical draws give exactly zero.
    sigma = float((good - good[0]).std(ddof=1)) if len(good) > 1 else 0.0

    theory = line_detunings(field, keys, constants)
    residuals = {entry.label or f"{entry.key}": float(c - t) for entry, c, t in zip(assigned, centers, theory)}
    logger.info("B_hat = %.6f T, sigma_B = %.6f T over %d trials (%d failed)", field, sigma, n_mc, failures)
    return FieldEstimate(
        field_t=field,
        sigma_t=sigma,
        n_mc=n_mc,
        loss=best_loss,
        residuals=residuals,
        bounds=bounds,
        sigma_calib_mhz=sigma_calib,
        trials=trials,
        failures=failures,
        sigma_analytic_t=analytic_sigma_b(peaks, field, sigma_calib, constants, weighted),
        weighted=weighted,
    )


def sensitivity_report(estimate: Union[FieldEstimate, float], measurement_time: float) -> SensitivityReport:
    """sigma_B * sqrt(t) in mT/sqrt(Hz)."""
    if not measurement_time > 0:
        raise ValueError("measurement time must be positive")
    sigma_t = estimate.sigma_t if isinstance(estimate, FieldEstimate) else float(estimate)
    return SensitivityReport(value_mt_per_rthz=sigma_t * 1e3 * math.sqrt(measurement_time),
                             measurement_time_s=measurement_time)
