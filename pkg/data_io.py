"""File formats: spectra, traces, peak lists, trials, reports and manifests."""
import hashlib
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from errors import DataIOError
from field_estimator import PeakEntry, PeakList
from obe_simulator import Spectrum
from spectral_analysis import RawTrace

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
FLOAT_FORMAT = "%.10g"
PEAK_COLUMNS = ["transition_label", "alpha", "beta", "polarization", "center_MHz", "sigma_fit_MHz",
                "fwhm_MHz", "kind", "status"]
TIME_COLUMN = "time_s"


class OutputDir:
    """Output root; every path handed out stays inside it."""

    def __init__(self, root: PathLike):
        self.root = Path(root).resolve()

    def path(self, name: PathLike) -> Path:
        target = (self.root / name).resolve()
        if target != self.root and self.root not in target.parents:
            raise DataIOError(f"refusing to write outside {self.root}: {target}")
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise DataIOError(f"could not create {target.parent}: {e}") from e
        return target


def file_digest(path: PathLike) -> str:
    try:
        return hashlib.md5(Path(path).read_bytes()).hexdigest()
    except OSError as e:
        raise DataIOError(f"could not read {path}: {e}") from e


def sidecar_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".json")


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_json(path: PathLike, payload: Dict[str, Any]) -> Path:
    """Sorted, indented JSON; numpy scalars unwrapped and non-finite floats written as null."""
    path = Path(path)
    try:
        path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise DataIOError(f"could not write {path}: {e}") from e
    return path


def read_json(path: PathLike) -> Dict[str, Any]:
    try:
        return json.loads(Path(path).read_text())
    except OSError as e:
        raise DataIOError(f"could not read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataIOError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e


def _write_frame(frame: pd.DataFrame, path: Path) -> Path:
    try:
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    except OSError as e:
        raise DataIOError(f"could not write {path}: {e}") from e
    return path


def _read_frame(path: PathLike, **kwargs) -> pd.DataFrame:
    try:
        return pd.read_csv(path, **kwargs)
    except FileNotFoundError as e:
        raise DataIOError(f"file not found: {path}") from e
    except pd.errors.EmptyDataError as e:
        raise DataIOError(f"{path}: file is empty") from e
    except pd.errors.ParserError as e:
        raise DataIOError(f"{path}: {e}") from e
    except (OSError, UnicodeDecodeError) as e:
        raise DataIOError(f"could not read {path}: {e}") from e


def _numeric_column(frame: pd.DataFrame, column: str, path: PathLike) -> np.ndarray:
    values = pd.to_numeric(frame[column], errors="coerce")
    bad = values.isna() & frame[column].notna()
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataIOError(f"{path}: line {row + 2}: {column} is not a number: {frame[column].iloc[row]!r}")
    return values.to_numpy(dtype=float)


# ---------------------------------------------------------------------------
# Spectra and traces


def write_spectrum(spectrum: Spectrum, path: PathLike, metadata: Optional[Dict[str, Any]] = None) -> Path:
    """CSV (detuning_MHz, signal) plus a JSON sidecar with the CSV digest."""
    path = Path(path)
    _write_frame(pd.DataFrame({"detuning_MHz": spectrum.detuning, "signal": spectrum.signal}), path)
    record = dict(spectrum.metadata)
    record.update(metadata or {})
    record["file"] = path.name
    record["md5"] = file_digest(path)
    write_json(sidecar_path(path), record)
    return path


def read_spectrum(path: PathLike) -> Spectrum:
    """Spectrum CSV; the JSON sidecar, when present, becomes its metadata."""
    frame = _read_frame(path)
    missing = {"detuning_MHz", "signal"} - set(frame.columns)
    if missing:
        raise DataIOError(f"{path}: missing columns {sorted(missing)}")
    metadata = read_json(sidecar_path(path)) if sidecar_path(path).is_file() else {}
    return Spectrum(detuning=_numeric_column(frame, "detuning_MHz", path),
                    signal=_numeric_column(frame, "signal", path), metadata=metadata)


def read_trace(path: PathLike) -> RawTrace:
    """Trace CSV: a time_s column and one column per recorded channel."""
    frame = _read_frame(path)
    if TIME_COLUMN not in frame.columns:
        raise DataIOError(f"{path}: no {TIME_COLUMN} column")
    channels = {column: _numeric_column(frame, column, path) for column in frame.columns if column != TIME_COLUMN}
    logger.debug("Read %d samples, channels %s", len(frame), sorted(channels))
    return RawTrace(time=_numeric_column(frame, TIME_COLUMN, path), channels=channels)


def write_trace(trace: RawTrace, path: PathLike) -> Path:
    frame = pd.DataFrame({TIME_COLUMN: trace.time, **trace.channels})
    return _write_frame(frame, Path(path))


# ---------------------------------------------------------------------------
# Peak lists


def _optional_int(text: str, column: str, line: int, path: PathLike) -> Optional[int]:
    if not text.strip():
        return None
    try:
        return int(float(text))
    except ValueError:
        raise DataIOError(f"{path}: line {line}: {column} is not an integer: {text!r}") from None


def _float_cell(text: str, column: str, line: int, path: PathLike, default: float) -> float:
    if not text.strip():
        return default
    try:
        return float(text)
    except ValueError:
        raise DataIOError(f"{path}: line {line}: {column} is not a number: {text!r}") from None


def write_peaks(peaks: PeakList, path: PathLike) -> Path:
    frame = pd.DataFrame([{
        "transition_label": entry.label,
        "alpha": entry.alpha,
        "beta": entry.beta,
        "polarization": entry.polarization,
        "center_MHz": entry.center_mhz,
        "sigma_fit_MHz": entry.sigma_fit_mhz,
        "fwhm_MHz": entry.fwhm_mhz,
        "kind": entry.kind,
        "status": entry.status,
    } for entry in peaks], columns=PEAK_COLUMNS)
    for column in ("alpha", "beta", "polarization"):
        frame[column] = frame[column].astype("Int64")
    return _write_frame(frame, Path(path))


def read_peaks(path: PathLike) -> PeakList:
    """Peak list CSV; only center_MHz is required. Errors name the offending line."""
    frame = _read_frame(path, dtype=str, keep_default_na=False)
    if "center_MHz" not in frame.columns:
        raise DataIOError(f"{path}: no center_MHz column")
    unknown = sorted(set(frame.columns) - set(PEAK_COLUMNS))
    if unknown:
        raise DataIOError(f"{path}: unknown columns {unknown}")
    entries: List[PeakEntry] = []
    for i, row in enumerate(frame.to_dict("records")):
        line = i + 2
        status = row.get("status", "").strip() or "ok"
        center = _float_cell(row["center_MHz"], "center_MHz", line, path, float("nan"))
        if status == "ok" and not math.isfinite(center):
            raise DataIOError(f"{path}: line {line}: center_MHz is missing")
        try:
            entries.append(PeakEntry(
                center_mhz=center,
                sigma_fit_mhz=_float_cell(row.get("sigma_fit_MHz", ""), "sigma_fit_MHz", line, path, 0.0),
                label=row.get("transition_label", "").strip(),
                alpha=_optional_int(row.get("alpha", ""), "alpha", line, path),
                beta=_optional_int(row.get("beta", ""), "beta", line, path),
                polarization=_optional_int(row.get("polarization", ""), "polarization", line, path),
                fwhm_mhz=_float_cell(row.get("fwhm_MHz", ""), "fwhm_MHz", line, path, float("nan")),
                kind=row.get("kind", "").strip() or "gaussian",
                status=status,
            ))
        except ValueError as e:
            raise DataIOError(f"{path}: line {line}: {e}") from e
    try:
        return PeakList(tuple(entries))
    except ValueError as e:
        raise DataIOError(f"{path}: {e}") from e


# ---------------------------------------------------------------------------
# Estimates and datasets


def write_trials(trials: Sequence[float], path: PathLike) -> Path:
    frame = pd.DataFrame({"trial": np.arange(len(trials)), "B_T": np.asarray(trials, dtype=float)})
    return _write_frame(frame, Path(path))


def write_frame(frame: pd.DataFrame, path: PathLike) -> Path:
    return _write_frame(frame, Path(path))


def verify_manifest(path: PathLike) -> Dict[str, Any]:
    """Load a dataset manifest and check each listed file against its digest."""
    path = Path(path)
    manifest = read_json(path)
    low, high = manifest.get("field_range_T", [-math.inf, math.inf])
    for item in manifest.get("spectra", []):
        target = path.parent / item["file"]
        if not target.is_file():
            raise DataIOError(f"{path}: listed file missing: {item['file']}")
        if file_digest(target) != item["md5"]:
            raise DataIOError(f"{path}: digest mismatch for {item['file']}")
        if not low <= item["field_T"] <= high:
            raise DataIOError(f"{path}: {item['file']} field {item['field_T']} T outside {low}..{high} T")
    return manifest
