import numpy as np
import pytest

from errors import BracketError, MonteCarloError, UnderConstrainedError
from field_estimator import (PeakEntry, PeakList, analytic_sigma_b, assign_peaks, estimate_field, exclude_blended,
                             loss, monte_carlo_uncertainty, resolvable_lines, sensitivity_report)

B0 = 0.4092


def _peaks(field, constants, shift_mhz=None, sigma_fit_mhz=0.0, rows=None):
    rows = rows if rows is not None else resolvable_lines(field, constants)
    shifts = np.zeros(len(rows)) if shift_mhz is None else shift_mhz
    return PeakList(tuple(PeakEntry(center_mhz=row.detuning_mhz + s, sigma_fit_mhz=sigma_fit_mhz).assign(row)
                          for row, s in zip(rows, shifts)))


def test_resolvable_lines_drop_close_pairs(constants, table_4092):
    lines = resolvable_lines(B0, constants)
    assert len(lines) == 12
    detunings = {round(row.detuning_mhz) for row in lines}
    for close in (-7905, -7899, 6927, 7134):
        assert all(abs(d - close) > 2 for d in detunings)
    assert len(resolvable_lines(B0, constants, blend_mhz=0.0)) == len(table_4092.strong())


def test_assignment_is_identity_on_table_centres(constants):
    lines = resolvable_lines(B0, constants)
    assigned = assign_peaks([row.detuning_mhz for row in lines], B0, constants)
    assert [entry.key for entry in assigned] == [row.key for row in lines]
    assert all(entry.label == row.label for entry, row in zip(assigned, lines))


def test_spurious_peak_stays_unassigned(constants):
    lines = resolvable_lines(B0, constants)
    centers = [row.detuning_mhz for row in lines] + [0.0]
    assigned = assign_peaks(centers, B0, constants)
    assert assigned.entries[-1].key is None
    assert len(assigned.assigned()) == len(lines)


def test_assignment_from_rough_guess(constants):
    lines = resolvable_lines(B0, constants)
    centers = [row.detuning_mhz for row in lines]
    assigned = assign_peaks(centers, 0.38, constants, search_span_t=0.05, bounds=(0.2, 0.5))
    assert [entry.key for entry in assigned] == [row.key for row in lines]


def test_assignment_rejects_guess_outside_bounds(constants):
    with pytest.raises(ValueError):
        assign_peaks([-12186.7, 12742.0], 0.6, constants, bounds=(0.2, 0.5))


def test_single_peak_is_under_constrained(constants):
    peaks = _peaks(B0, constants, rows=resolvable_lines(B0, constants)[:1])
    with pytest.raises(UnderConstrainedError):
        estimate_field(peaks, (0.2, 0.5), constants)
    with pytest.raises(UnderConstrainedError):
        assign_peaks([-12186.73], B0, constants)


def test_loss_vanishes_at_true_field(constants):
    peaks = _peaks(B0, constants)
    assert loss(B0, peaks, constants) < 1e-12
    values = [loss(B0 + d, peaks, constants) for d in (-0.002, -0.001, 0.0, 0.001, 0.002)]
    assert values[0] > values[1] > values[2] < values[3] < values[4]


@pytest.mark.parametrize("field", np.linspace(0.25, 0.45, 10))
def test_round_trip(constants, field):
    assert estimate_field(_peaks(field, constants), (0.2, 0.5), constants) == pytest.approx(field, abs=1e-5)


def test_full_table_centres_recover_field(constants, table_4092):
    peaks = _peaks(B0, constants, rows=table_4092.strong())
    assert estimate_field(peaks, (0.2, 0.5), constants) == pytest.approx(B0, abs=1e-4)


def test_perturbed_sigma_minus_lines(constants):
    rows = [row for row in resolvable_lines(B0, constants) if row.polarization == -1]
    shifts = np.random.default_rng(4).normal(0.0, 1.0, len(rows))
    assert estimate_field(_peaks(B0, constants, shifts, rows=rows), (0.2, 0.5), constants) == pytest.approx(
        B0, abs=1e-3)


def test_weighted_estimate(constants):
    peaks = _peaks(B0, constants, sigma_fit_mhz=0.5)
    assert estimate_field(peaks, (0.2, 0.5), constants, weighted=True) == pytest.approx(B0, abs=1e-5)
    with pytest.raises(ValueError):
        estimate_field(_peaks(B0, constants), (0.2, 0.5), constants, weighted=True)


def test_minimum_on_bound_raises(constants):
    with pytest.raises(BracketError):
        estimate_field(_peaks(B0, constants), (0.2, 0.3), constants)
    with pytest.raises(ValueError):
        estimate_field(_peaks(B0, constants), (0.5, 0.2), constants)


def test_published_centres_recover_field(constants, published_detunings):
    blended = {-7905.06, -7898.86, 6927.47, 7134.37}
    centers = [d for q in (-1, 1) for d in published_detunings[q] if d not in blended]
    assert len(centers) == 12
    peaks = assign_peaks(centers, 0.35, constants, search_span_t=0.15, bounds=(0.2, 0.5))
    assert len(peaks.assigned()) == 12
    assert estimate_field(peaks, (0.2, 0.5), constants) == pytest.approx(B0, abs=5e-4)


def test_exclude_blended(constants, table_4092):
    peaks = _peaks(B0, constants, rows=table_4092.strong())
    trimmed = exclude_blended(peaks, B0, constants)
    assert len(trimmed) == len(peaks)
    assert len(trimmed.assigned()) == 12
    assert sum(entry.status == "blended" for entry in trimmed) == 4


# ---------------------------------------------------------------------------
# Monte Carlo


def test_monte_carlo_without_noise(constants):
    estimate = monte_carlo_uncertainty(_peaks(B0, constants), 0.0, 100, (0.2, 0.5), 1, constants)
    assert estimate.sigma_t == 0.0
    assert estimate.field_t == pytest.approx(B0, abs=1e-5)
    assert estimate.failures == 0
    assert estimate.trials.shape == (100,)


def test_monte_carlo_scales_with_sigma(constants):
    peaks = _peaks(B0, constants)
    single = monte_carlo_uncertainty(peaks, 20.0, 400, (0.2, 0.5), 3, constants)
    double = monte_carlo_uncertainty(peaks, 40.0, 400, (0.2, 0.5), 3, constants)
    assert double.sigma_t / single.sigma_t == pytest.approx(2.0, rel=0.02)


def test_monte_carlo_matches_linear_propagation(constants):
    peaks = _peaks(B0, constants)
    estimate = monte_carlo_uncertainty(peaks, 20.0, 1000, (0.2, 0.5), 11, constants)
    analytic = analytic_sigma_b(peaks, estimate.field_t, 20.0, constants)
    assert estimate.sigma_t == pytest.approx(analytic, rel=0.15)
    assert estimate.sigma_analytic_t == pytest.approx(analytic)
    assert estimate.trial_summary["mean"] == pytest.approx(B0, abs=3 * analytic)


def test_monte_carlo_is_reproducible(constants):
    peaks = _peaks(B0, constants)
    first = monte_carlo_uncertainty(peaks, 10.0, 200, (0.2, 0.5), 42, constants)
    again = monte_carlo_uncertainty(peaks, 10.0, 200, (0.2, 0.5), 42, constants)
    threaded = monte_carlo_uncertainty(peaks, 10.0, 200, (0.2, 0.5), 42, constants, jobs=4)
    other = monte_carlo_uncertainty(peaks, 10.0, 200, (0.2, 0.5), 43, constants)
    np.testing.assert_array_equal(first.trials, again.trials)
    np.testing.assert_array_equal(first.trials, threaded.trials)
    assert first.sigma_t == threaded.sigma_t
    assert not np.array_equal(first.trials, other.trials)


def test_monte_carlo_fails_when_trials_hit_bounds(constants):
    with pytest.raises(MonteCarloError) as info:
        monte_carlo_uncertainty(_peaks(B0, constants), 20.0, 200, (0.409, 0.5), 5, constants)
    assert info.value.trials == 200
    assert info.value.failures > 10


def test_monte_carlo_argument_checks(constants):
    peaks = _peaks(B0, constants)
    with pytest.raises(ValueError):
        monte_carlo_uncertainty(peaks, 1.0, 99, (0.2, 0.5), 1, constants)
    with pytest.raises(ValueError):
        monte_carlo_uncertainty(peaks, 1.0, 100, (0.2, 0.5), None, constants)
    with pytest.raises(ValueError):
        monte_carlo_uncertainty(peaks, -1.0, 100, (0.2, 0.5), 1, constants)


def test_summary_and_sensitivity(constants):
    estimate = monte_carlo_uncertainty(_peaks(B0, constants), 0.0, 100, (0.2, 0.5), 1, constants)
    assert estimate.summary_line() == "B = 0.4092 ± 0.0000 T"
    assert set(estimate.residuals) == {row.label for row in resolvable_lines(B0, constants)}
    assert sensitivity_report(1.7e-3, 0.061).value_mt_per_rthz == pytest.approx(0.42, abs=0.005)
    assert sensitivity_report(estimate, 1.0).value_mt_per_rthz == 0.0
    with pytest.raises(ValueError):
        sensitivity_report(estimate, 0.0)


def test_peak_list_validation():
    entry = PeakEntry(center_mhz=1.0, alpha=1, beta=9, polarization=-1)
    with pytest.raises(ValueError, match="twice"):
        PeakList((entry, entry))
    with pytest.raises(ValueError):
        PeakList((PeakEntry(center_mhz=float("nan")),))
    with pytest.raises(ValueError):
        PeakList((PeakEntry(center_mhz=1.0, status="weird"),))
    assert len(PeakList((PeakEntry(center_mhz=float("nan"), status="missing"),)).usable()) == 0


@pytest.mark.slow
@pytest.mark.parametrize("sigma_fit_mhz", [0.5, 1.0, 2.0])
def test_monte_carlo_linearity_at_intermediate_field(constants, sigma_fit_mhz):
    field = 0.3263
    single = monte_carlo_uncertainty(_peaks(field, constants, sigma_fit_mhz=sigma_fit_mhz), 0.0, 1000, (0.2, 0.5),
                                     17, constants, xatol=1e-9)
    double = monte_carlo_uncertainty(_peaks(field, constants, sigma_fit_mhz=2 * sigma_fit_mhz), 0.0, 1000,
                                     (0.2, 0.5), 17, constants, xatol=1e-9)
    assert single.sigma_t > 0
    assert single.sigma_t == pytest.approx(single.sigma_analytic_t, rel=0.15)
    assert double.sigma_t / single.sigma_t == pytest.approx(2.0, rel=0.1)
