"""Run configuration: strict key/value files with units in every key name."""
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple, Union

from dotenv import dotenv_values

from atomic_structure import DEFAULT_CONSTANTS_PATH, SUPPORTED_SCHEMA_VERSIONS
from errors import ConfigError
from obe_simulator import SPECTRUM_MODELS, OBEParams
from spectral_analysis import PROFILES

logger = logging.getLogger(__name__)


def _bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _floats(raw: str) -> Tuple[float, ...]:
    return tuple(float(item) for item in raw.split(",") if item.strip())


def _text(raw: str) -> str:
    return raw.strip()


# file key -> (attribute, parser)
_KEYS: Dict[str, Tuple[str, Callable[[str], Any]]] = {
    "CONSTANTS_FILE": ("constants_file", _text),
    "OUTPUT_DIR": ("output_dir", _text),
    "SEED": ("seed", int),
    # forward model
    "FIELDS_T": ("fields_t", _floats),
    "SPECTRUM_MODEL": ("spectrum_model", _text),
    "POWER_W": ("power_w", float),
    "WAIST_M": ("waist_m", float),
    "INTENSITY_W_PER_M2": ("intensity_w_per_m2", float),
    "TEMPERATURE_K": ("temperature_k", float),
    "VELOCITY_COUNT": ("n_velocity", int),
    "VELOCITY_SPAN_VP": ("velocity_span", float),
    "DETUNING_MIN_MHZ": ("detuning_min_mhz", float),
    "DETUNING_MAX_MHZ": ("detuning_max_mhz", float),
    "DETUNING_STEP_MHZ": ("detuning_step_mhz", float),
    "TIME_STEP_TAU": ("dt_tau", float),
    "DURATION_TAU": ("t_max_tau", float),
    "AVERAGE_FRACTION": ("average_fraction", float),
    "PHASE_COUNT": ("n_phases", int),
    "POLARIZATION": ("polarization", _text),
    "COHERENCE_FLOOR": ("coherence_floor", float),
    # calibration and peak extraction
    "ETALON_FSR_MHZ": ("fsr_mhz", float),
    "SG_WINDOW": ("sg_window", int),
    "SG_ORDER": ("sg_order", int),
    "PEAK_PROMINENCE": ("peak_prominence", float),
    "PEAK_SPACING_SAMPLES": ("peak_spacing", int),
    "ANCHOR_SAMPLE": ("anchor_sample", float),
    "ANCHOR_DETUNING_MHZ": ("anchor_detuning_mhz", float),
    "REFERENCE_WINDOW_LOW_SAMPLE": ("reference_low", int),
    "REFERENCE_WINDOW_HIGH_SAMPLE": ("reference_high", int),
    "DETREND_INTENSITY": ("detrend", _bool),
    "PROFILE": ("profile", _text),
    "SEARCH_HALF_WIDTH_MHZ": ("search_half_width_mhz", float),
    "BACKGROUND_WINDOW_MHZ": ("background_window_mhz", float),
    "EXPECTED_FIELD_T": ("expected_field_t", float),
    # estimator
    "BOUND_LOW_T": ("bound_low_t", float),
    "BOUND_HIGH_T": ("bound_high_t", float),
    "SIGMA_CALIB_MHZ": ("sigma_calib_mhz", float),
    "MC_TRIALS": ("n_mc", int),
    "GATE_MHZ": ("gate_mhz", float),
    "BLEND_MHZ": ("blend_mhz", float),
    "FIELD_GUESS_T": ("field_guess_t", float),
    "SEARCH_SPAN_T": ("search_span_t", float),
    "WEIGHTED": ("weighted", _bool),
    "EXCLUDE_BLENDED": ("exclude_blended", _bool),
    "MEASUREMENT_TIME_S": ("measurement_time_s", float),
    # dataset generation
    "DATASET_COUNT": ("dataset_count", int),
    "DATASET_FIELD_LOW_T": ("dataset_field_low_t", float),
    "DATASET_FIELD_HIGH_T": ("dataset_field_high_t", float),
    "NOISE_AMPLITUDE": ("noise_amplitude", float),
    "AXIS_JITTER_MHZ": ("axis_jitter_mhz", float),
}

# Fields the forward model accepts, mapped onto OBEParams.
_OBE_FIELDS = ("power_w", "waist_m", "intensity_w_per_m2", "temperature_k", "n_velocity", "velocity_span",
               "detuning_min_mhz", "detuning_max_mhz", "detuning_step_mhz", "dt_tau", "t_max_tau",
               "average_fraction", "n_phases", "polarization", "coherence_floor")


@dataclass(frozen=True)
class RunConfig:
    schema_version: str = "1"
    source: Optional[str] = None
    constants_file: str = str(DEFAULT_CONSTANTS_PATH)
    output_dir: str = "out"
    seed: Optional[int] = None

    fields_t: Tuple[float, ...] = ()
    spectrum_model: str = "obe"
    power_w: float = 6e-3
    waist_m: float = 0.84e-3
    intensity_w_per_m2: Optional[float] = None
    temperature_k: float = 313.0
    n_velocity: int = 81
    velocity_span: float = 4.0
    detuning_min_mhz: float = -14000.0
    detuning_max_mhz: float = 14000.0
    detuning_step_mhz: float = 10.0
    dt_tau: float = 0.01
    t_max_tau: float = 40.0
    average_fraction: float = 0.5
    n_phases: int = 4
    polarization: str = "both"
    coherence_floor: float = 0.05

    fsr_mhz: float = 1500.0
    sg_window: int = 11
    sg_order: int = 3
    peak_prominence: float = 0.1
    peak_spacing: int = 1
    anchor_sample: Optional[float] = None
    anchor_detuning_mhz: float = 0.0
    reference_low: Optional[int] = None
    reference_high: Optional[int] = None
    detrend: bool = False
    profile: str = "gaussian"
    search_half_width_mhz: float = 150.0
    background_window_mhz: float = 0.0
    expected_field_t: Optional[float] = None

    bound_low_t: float = 0.2
    bound_high_t: float = 0.5
    sigma_calib_mhz: Optional[float] = None
    n_mc: int = 1000
    gate_mhz: float = 300.0
    blend_mhz: float = 400.0
    field_guess_t: Optional[float] = None
    search_span_t: float = 0.05
    weighted: bool = False
    exclude_blended: bool = True
    measurement_time_s: Optional[float] = None

    dataset_count: int = 10
    dataset_field_low_t: float = 0.2
    dataset_field_high_t: float = 0.4
    noise_amplitude: float = 0.0
    axis_jitter_mhz: float = 0.0

    def __post_init__(self):
        if self.spectrum_model not in SPECTRUM_MODELS:
            raise ConfigError(f"SPECTRUM_MODEL must be one of {sorted(SPECTRUM_MODELS)}")
        if self.profile not in PROFILES:
            raise ConfigError(f"PROFILE must be one of {sorted(PROFILES)}")
        if any(b < 0 for b in self.fields_t):
            raise ConfigError("FIELDS_T must be non-negative")
        if not 0 <= self.bound_low_t < self.bound_high_t:
            raise ConfigError(f"invalid field bounds [{self.bound_low_t}, {self.bound_high_t}] T")
        if self.n_mc < 100:
            raise ConfigError(f"MC_TRIALS must be at least 100, got {self.n_mc}")
        if self.sigma_calib_mhz is not None and self.sigma_calib_mhz < 0:
            raise ConfigError("SIGMA_CALIB_MHZ must be non-negative")
        if self.gate_mhz <= 0 or self.blend_mhz < 0 or self.fsr_mhz <= 0:
            raise ConfigError("GATE_MHZ and ETALON_FSR_MHZ must be positive, BLEND_MHZ non-negative")
        if self.dataset_count < 1:
            raise ConfigError("DATASET_COUNT must be at least 1")
        if not 0 <= self.dataset_field_low_t <= self.dataset_field_high_t:
            raise ConfigError("dataset field range must satisfy 0 <= low <= high")
        if self.noise_amplitude < 0 or self.axis_jitter_mhz < 0:
            raise ConfigError("NOISE_AMPLITUDE and AXIS_JITTER_MHZ must be non-negative")
        if (self.reference_low is None) != (self.reference_high is None):
            raise ConfigError("REFERENCE_WINDOW_LOW_SAMPLE and REFERENCE_WINDOW_HIGH_SAMPLE go together")
        if self.measurement_time_s is not None and self.measurement_time_s <= 0:
            raise ConfigError("MEASUREMENT_TIME_S must be positive")
        if not Path(self.constants_file).is_file():
            raise ConfigError(f"constants file not found: {self.constants_file}")

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RunConfig":
        """Strict parse: SCHEMA_VERSION required, unknown or empty keys rejected."""
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        raw = dotenv_values(path)
        schema = raw.pop("SCHEMA_VERSION", None)
        if schema not in SUPPORTED_SCHEMA_VERSIONS:
            raise ConfigError(f"{path}: unsupported or missing SCHEMA_VERSION {schema!r}")
        unknown = sorted(set(raw) - set(_KEYS))
        if unknown:
            raise ConfigError(f"{path}: unknown keys {unknown}")

        values: Dict[str, Any] = {"schema_version": schema, "source": str(path)}
        for key, text in raw.items():
            attr, parse = _KEYS[key]
            if text is None or not text.strip():
                raise ConfigError(f"{path}: {key} has no value")
            try:
                values[attr] = parse(text)
            except ValueError as e:
                raise ConfigError(f"{path}: {key}: {e}") from e
        # Relative paths resolve against the config file's directory.
        for attr in ("constants_file", "output_dir"):
            if attr in values and not Path(values[attr]).is_absolute():
                values[attr] = str((path.parent / values[attr]).resolve())
        try:
            return cls(**values)
        except ConfigError as e:
            raise ConfigError(f"{path}: {e}") from e

    @classmethod
    def load(cls, path: Optional[Union[str, Path]] = None) -> "RunConfig":
        """Config from path, else HPBMAG_CONFIG, else built-in defaults."""
        path = path or os.getenv("HPBMAG_CONFIG")
        if not path:
            logger.debug("No config file given, using defaults")
            constants = os.getenv("HPBMAG_CONSTANTS")
            return cls(constants_file=constants) if constants else cls()
        return cls.from_file(path)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def obe_params(self) -> OBEParams:
        """The OBE and weak-drive model parameters held by this config."""
        return OBEParams(**{name: getattr(self, name) for name in _OBE_FIELDS})

    @property
    def bounds(self) -> Tuple[float, float]:
        return self.bound_low_t, self.bound_high_t

    @property
    def anchor(self) -> Optional[Tuple[float, float]]:
        if self.anchor_sample is None:
            return None
        return self.anchor_sample, self.anchor_detuning_mhz

    @property
    def reference_window(self) -> Optional[Tuple[int, int]]:
        if self.reference_low is None:
            return None
        return self.reference_low, self.reference_high

    def require_seed(self) -> int:
        if self.seed is None:
            raise ConfigError("an explicit SEED (config) or --seed is required")
        return self.seed

    def to_dict(self) -> Dict[str, Any]:
        return {key: getattr(self, attr) for key, (attr, _) in _KEYS.items()}

    def digest(self) -> str:
        """md5 of the parameters that shape outputs (paths excluded)."""
        payload = {key: value for key, value in self.to_dict().items() if key not in ("OUTPUT_DIR", "CONSTANTS_FILE")}
        return hashlib.md5(json.dumps(payload, sort_keys=True).encode()).hexdigest()
