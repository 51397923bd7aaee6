import math

import numpy as np
import pytest

from atomic_structure import DEFAULT_CONSTANTS_PATH, AtomicConstants, transition_table
from obe_simulator import DrivenLines
from spectral_analysis import RawTrace

FIELD_4092 = 0.4092
SIGMA_MINUS_4092 = (-12186.73, -10995.19, -9616.43, -7905.06, -7898.86, -5553.14, -4001.62, -2786.95)
SIGMA_PLUS_4092 = (3357.96, 4369.00, 5577.04, 6927.47, 7134.37, 9654.02, 11373.56, 12742.01)


@pytest.fixture(scope="session")
def constants() -> AtomicConstants:
    return AtomicConstants.from_file(DEFAULT_CONSTANTS_PATH)


@pytest.fixture(scope="session")
def table_4092(constants):
    return transition_table(FIELD_4092, constants)


@pytest.fixture(scope="session")
def published_detunings():
    """Line positions at 0.4092 T, keyed by polarization."""
    return {-1: SIGMA_MINUS_4092, 1: SIGMA_PLUS_4092}


@pytest.fixture
def two_level():
    """Factory for a closed single-line system (one ground, one excited level)."""
    def make(rabi: float, detuning_mhz: float = 0.0) -> DrivenLines:
        return DrivenLines(
            n_ground=1,
            n_excited=1,
            alpha=np.array([0]),
            beta=np.array([0]),
            polarization=np.array([1]),
            coupling=np.array([1.0]),
            rabi=np.array([rabi]),
            detuning_mhz=np.array([detuning_mhz]),
            decay=np.array([[1.0]]),
        )
    return make


def airy(frequency_mhz: np.ndarray, fsr_mhz: float = 1500.0, finesse: float = 10.0) -> np.ndarray:
    coefficient = (2 * finesse / math.pi) ** 2
    return 1.0 / (1.0 + coefficient * np.sin(math.pi * frequency_mhz / fsr_mhz) ** 2)


def scan_frequency(samples: np.ndarray, n_samples: int = 3000, curvature: float = 1e-4) -> np.ndarray:
    """Quadratic scan from -500 MHz to 30500 MHz across the record."""
    last = n_samples - 1
    slope = (31000.0 - curvature * last ** 2) / last
    return -500.0 + slope * samples + curvature * samples ** 2


@pytest.fixture
def etalon_trace():
    """Factory for synthetic scope traces with 21 etalon markers over 30 GHz."""
    def make(n_samples: int = 3000, curvature: float = 1e-4, noise: float = 0.0, seed: int = 0,
             channels=("pd1_V", "pd2_V", "pd3_V", "pd4_V")) -> RawTrace:
        rng = np.random.default_rng(seed)
        samples = np.arange(n_samples, dtype=float)
        frequency = scan_frequency(samples, n_samples, curvature)
        values = {
            "pd1_V": 1.0 - 0.5 * np.exp(-((frequency - 15000.0) / 60.0) ** 2),
            "pd2_V": np.exp(-((frequency - 0.0) / 80.0) ** 2),
            "pd3_V": airy(frequency) + noise * rng.standard_normal(n_samples),
            "pd4_V": np.full(n_samples, 2.0),
        }
        return RawTrace(time=samples * 1e-5, channels={name: values[name] for name in channels})
    return make
