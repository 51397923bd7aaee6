import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from atomic_structure import AtomicConstants, load_constants, transition_table
from data_io import (OutputDir, file_digest, read_json, read_peaks, read_trace, sidecar_path, write_frame,
                     write_json, write_peaks, write_spectrum, write_trials)
from errors import ConfigError, HPBMagError
from field_estimator import (assign_peaks, estimate_field, exclude_blended, monte_carlo_uncertainty,
                             sensitivity_report)
from obe_simulator import SPECTRUM_MODELS, Spectrum, timestamp
from run_config import RunConfig
from spectral_analysis import calibrate_trace, detect_lines, extract_peaks, remove_background

GENERATOR = "hpbmag 1.0.0"

logger = logging.getLogger("hpbmag")


class _Parser(argparse.ArgumentParser):
    """Usage errors become ConfigError so they share the JSON error record and exit code 1."""

    def error(self, message):
        raise ConfigError(message)


def _field_list(text: str) -> Tuple[float, ...]:
    try:
        return tuple(float(item) for item in text.split(",") if item.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of fields: {text!r}") from None


def _output(args, config: RunConfig) -> OutputDir:
    return OutputDir(args.output or config.output_dir)


def _provenance(config: RunConfig, constants: AtomicConstants, seed: Optional[int]) -> Dict[str, Any]:
    return {
        "generator": GENERATOR,
        "config_digest": config.digest(),
        "config_file": config.source,
        "constants_version": constants.version,
        "constants_digest": constants.digest(),
        "seed": seed,
    }


def _progress(label: str) -> Callable[[int, int], None]:
    def report(done: int, total: int):
        if done == total or done % max(1, total // 10) == 0:
            logger.info("%s: %d/%d work items", label, done, total)
    return report


def _spectrum_name(field: float) -> str:
    return f"spectrum_{field:.6f}T.csv"


# ---------------------------------------------------------------------------
# Commands


def cmd_simulate(args, config: RunConfig, constants: AtomicConstants) -> int:
    fields = args.B if args.B is not None else config.fields_t
    if not fields:
        raise ConfigError("no work: the field list is empty")
    params = config.obe_params()
    model = SPECTRUM_MODELS[config.spectrum_model]
    out = _output(args, config)
    for field in fields:
        spectrum = model(field, params, constants, jobs=args.jobs, progress=_progress(f"B={field:.4f} T"))
        path = write_spectrum(spectrum, out.path(_spectrum_name(field)), _provenance(config, constants, config.seed))
        logger.info("✓ B=%.4f T -> %s", field, path.name)
    return 0


def cmd_calibrate(args, config: RunConfig, constants: AtomicConstants) -> int:
    trace = read_trace(args.trace)
    result = calibrate_trace(
        trace,
        fsr_mhz=config.fsr_mhz,
        window=config.sg_window,
        order=config.sg_order,
        min_prominence=config.peak_prominence,
        min_spacing=config.peak_spacing,
        anchor=config.anchor,
        reference_window=config.reference_window,
        anchor_detuning_mhz=config.anchor_detuning_mhz,
        detrend=config.detrend,
    )
    sigma_calib = config.sigma_calib_mhz if config.sigma_calib_mhz is not None else result.sigma_calib_mhz
    diagnostics = dict(result.diagnostics, sigma_calib_used_MHz=sigma_calib,
                       sigma_calib_source="config" if config.sigma_calib_mhz is not None else "etalon-spacing-rms",
                       flat_markers=result.flat_markers, trace=Path(args.trace).name,
                       trace_md5=file_digest(args.trace))
    out = _output(args, config)
    provenance = _provenance(config, constants, config.seed)

    spectrum = result.spectrum
    if config.background_window_mhz > 0:
        spectrum = remove_background(spectrum, config.background_window_mhz)
    write_spectrum(spectrum, out.path("calibrated_spectrum.csv"), dict(provenance, **diagnostics))
    write_frame(pd.DataFrame({"marker": np.arange(len(result.markers)), "sample": result.markers,
                              "detuning_MHz": result.axis.at(result.markers)}), out.path("markers.csv"))
    logger.info("✓ Frequency axis: %d markers, span %.0f MHz, sigma_calib %.3f MHz",
                len(result.markers), diagnostics["span_MHz"], sigma_calib)

    if config.expected_field_t is not None:
        peaks = extract_peaks(spectrum, transition_table(config.expected_field_t, constants),
                              config.search_half_width_mhz, config.profile)
    else:
        peaks = detect_lines(spectrum, config.peak_prominence, config.search_half_width_mhz, config.profile)
    peaks_path = write_peaks(peaks, out.path("peaks.csv"))
    write_json(sidecar_path(peaks_path), dict(provenance, sigma_calib_MHz=sigma_calib,
                                              sigma_calib_source=diagnostics["sigma_calib_source"],
                                              md5=file_digest(peaks_path)))
    write_json(out.path("calibration.json"), dict(provenance, **diagnostics))
    logger.info("✓ %d peak(s) -> %s", len(peaks.usable()), peaks_path.name)
    return 0


def _sigma_calib(peaks_file: Path, config: RunConfig) -> Tuple[float, str]:
    if config.sigma_calib_mhz is not None:
        return config.sigma_calib_mhz, "config"
    sidecar = sidecar_path(peaks_file)
    if sidecar.is_file():
        record = read_json(sidecar)
        if record.get("sigma_calib_MHz") is not None:
            return float(record["sigma_calib_MHz"]), f"sidecar:{record.get('sigma_calib_source', 'unknown')}"
    logger.warning("No sigma_calib configured or recorded; using 0 MHz")
    return 0.0, "default-zero"


def cmd_estimate(args, config: RunConfig, constants: AtomicConstants) -> int:
    seed = config.require_seed()
    peaks_file = Path(args.peaks)
    peaks = read_peaks(peaks_file)
    sigma_calib, sigma_source = _sigma_calib(peaks_file, config)

    if not peaks.assigned():
        low, high = config.bounds
        guess = config.field_guess_t if config.field_guess_t is not None else (low + high) / 2
        span = config.search_span_t if config.field_guess_t is not None else (high - low) / 2
        peaks = assign_peaks(peaks, guess, constants, config.gate_mhz, config.blend_mhz, span, config.bounds)
    elif config.exclude_blended:
        first = estimate_field(peaks, config.bounds, constants, weighted=config.weighted, sigma_calib=sigma_calib)
        peaks = exclude_blended(peaks, first, constants, config.blend_mhz)

    estimate = monte_carlo_uncertainty(peaks, sigma_calib, config.n_mc, config.bounds, seed, constants,
                                       weighted=config.weighted, jobs=args.jobs)
    out = _output(args, config)
    trials_path = write_trials(estimate.trials, out.path("trials.csv"))
    report = dict(
        _provenance(config, constants, seed),
        created=timestamp(),
        peaks_file=peaks_file.name,
        peaks_md5=file_digest(peaks_file),
        B_hat_T=estimate.field_t,
        sigma_B_T=estimate.sigma_t,
        sigma_B_analytic_T=estimate.sigma_analytic_t,
        N_MC=estimate.n_mc,
        failed_trials=estimate.failures,
        loss_MHz2=estimate.loss,
        residuals_MHz=estimate.residuals,
        bounds_T=list(estimate.bounds),
        sigma_calib_MHz=sigma_calib,
        sigma_calib_source=sigma_source,
        weighted=estimate.weighted,
        trials=estimate.trial_summary,
        trials_file=trials_path.name,
    )
    if config.measurement_time_s is not None:
        sensitivity = sensitivity_report(estimate, config.measurement_time_s)
        report["sensitivity"] = {"value_mT_per_rtHz": sensitivity.value_mt_per_rthz,
                                 "measurement_time_s": sensitivity.measurement_time_s,
                                 "formula": sensitivity.formula}
    write_json(out.path("estimate.json"), report)
    print(estimate.summary_line())
    return 0


def cmd_generate_dataset(args, config: RunConfig, constants: AtomicConstants) -> int:
    seed = config.require_seed()
    rng = np.random.default_rng(seed)
    fields = rng.uniform(config.dataset_field_low_t, config.dataset_field_high_t, config.dataset_count)
    params = config.obe_params()
    model = SPECTRUM_MODELS[config.spectrum_model]
    out = _output(args, config)
    provenance = _provenance(config, constants, seed)

    items: List[Dict[str, Any]] = []
    for i, field in enumerate(fields):
        spectrum = model(float(field), params, constants, jobs=args.jobs)
        # Draws happen even at zero amplitude so the stream does not depend on the noise settings.
        noise = rng.standard_normal(len(spectrum.signal)) * config.noise_amplitude
        offset = float(rng.standard_normal()) * config.axis_jitter_mhz
        noisy = Spectrum(detuning=spectrum.detuning + offset, signal=spectrum.signal + noise,
                         metadata=spectrum.metadata)
        name = f"spectrum_{i:04d}.csv"
        path = write_spectrum(noisy, out.path(name), dict(provenance, true_field_T=float(field), index=i,
                                                         noise_amplitude=config.noise_amplitude,
                                                         axis_offset_MHz=offset))
        items.append({"file": name, "field_T": float(field), "md5": file_digest(path),
                      "params_digest": params.digest(), "noise_amplitude": config.noise_amplitude,
                      "axis_offset_MHz": offset, "seed": seed})
        logger.info("✓ %d/%d B=%.6f T -> %s", i + 1, len(fields), field, name)

    write_frame(pd.DataFrame(items)[["file", "field_T", "noise_amplitude", "axis_offset_MHz"]],
                out.path("truth.csv"))
    write_json(out.path("manifest.json"), dict(
        provenance,
        created=timestamp(),
        field_range_T=[config.dataset_field_low_t, config.dataset_field_high_t],
        noise={"amplitude": config.noise_amplitude, "axis_jitter_MHz": config.axis_jitter_mhz},
        spectrum_model=config.spectrum_model,
        spectra=items,
    ))
    return 0


def cmd_transitions(args, config: RunConfig, constants: AtomicConstants) -> int:
    fields = args.B if args.B is not None else config.fields_t
    if not fields:
        raise ConfigError("no work: pass --B or set FIELDS_T")
    frames = []
    for field in fields:
        frame = transition_table(field, constants).to_frame()
        frame.insert(0, "field_T", field)
        frames.append(frame)
    table = pd.concat(frames, ignore_index=True)
    if args.output:
        path = write_frame(table, OutputDir(args.output).path("transitions.csv"))
        logger.info("✓ %d line(s) at %d field(s) -> %s", len(table), len(fields), path)
    else:
        table.to_csv(sys.stdout, index=False, float_format="%.6f", lineterminator="\n")
    return 0


# name, description, handler, extra arguments
COMMANDS: List[Tuple[str, str, Callable, List[Tuple[Sequence[str], Dict[str, Any]]]]] = [
    (
        "simulate",
        "Forward-simulate spectra at one or more fields",
        cmd_simulate,
        [(["--B"], {"type": _field_list, "default": None, "help": "comma-separated fields in T (overrides FIELDS_T)"})],
    ),
    (
        "calibrate",
        "Build a frequency axis from an etalon trace and extract peaks",
        cmd_calibrate,
        [(["trace"], {"help": "trace CSV (time_s, pd1_V, pd2_V, pd3_V, pd4_V)"})],
    ),
    (
        "estimate",
        "Estimate the field and its Monte Carlo uncertainty from a peak list",
        cmd_estimate,
        [(["peaks"], {"help": "peak list CSV"})],
    ),
    (
        "generate-dataset",
        "Generate seeded synthetic spectra with ground-truth fields",
        cmd_generate_dataset,
        [],
    ),
    (
        "transitions",
        "Dump the sigma+/- transition table as CSV",
        cmd_transitions,
        [(["--B"], {"type": _field_list, "default": None, "help": "comma-separated fields in T"})],
    ),
]


REPRODUCIBILITY = ("JSON sidecars, manifests and result records carry a \"created\" UTC time. "
                   "Set SOURCE_DATE_EPOCH to pin it; reruns are byte-identical only then.")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hpbmag", description="High-field Rb D2 saturated-absorption magnetometry",
                     epilog=REPRODUCIBILITY)
    commands = parser.add_subparsers(dest="command", required=True)
    for name, description, handler, arguments in COMMANDS:
        command = commands.add_parser(name, help=description, description=description, epilog=REPRODUCIBILITY)
        command.add_argument("--config", help="run configuration file (default: $HPBMAG_CONFIG)")
        command.add_argument("--output", help="output directory (overrides OUTPUT_DIR)")
        command.add_argument("--seed", type=int, help="random seed (overrides SEED)")
        command.add_argument("--jobs", type=int, default=1, help="worker threads")
        command.add_argument("--verbose", action="store_true")
        for flags, options in arguments:
            command.add_argument(*flags, **options)
        command.set_defaults(handler=handler)
    return parser


def _configure_logging(verbose: bool):
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def _error_record(command: Optional[str], error: BaseException) -> str:
    return json.dumps({
        "status": "error",
        "command": command,
        "error_type": type(error).__name__,
        "message": str(error),
    })


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        _configure_logging(args.verbose)
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        config = RunConfig.load(args.config)
        if args.seed is not None:
            config = config.replace(seed=args.seed)
        constants = load_constants(config.constants_file)
        logger.debug("Running %s with config digest %s", command, config.digest())
        return args.handler(args, config, constants)
    except HPBMagError as e:
        print(_error_record(command, e), file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception("Unexpected failure")
        print(_error_record(command, e), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
