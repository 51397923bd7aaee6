"""Reduced optical Bloch equations for counter-propagating pump/probe SAS.

Internally time is measured in units of the excited-state lifetime tau and all
rates are multiplied by tau; the public functions take SI inputs.
"""
import dataclasses
import hashlib
import json
import logging
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from datetime import datetime, timezone
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import constants as sc
from scipy.special import voigt_profile

from atomic_structure import AtomicConstants, TransitionRow, TransitionTable, transition_table
from errors import ConfigError, IntegrationError, InvariantViolation

logger = logging.getLogger(__name__)

DRIVEN_POLARIZATIONS = {"both": (-1, 1), "sigma+": (1,), "sigma-": (-1,)}
TRACE_TOLERANCE = 1e-9
POPULATION_TOLERANCE = 1e-9
COHERENCE_TOLERANCE = 1e-9
COLLOCATION_SWEEPS = 4

# Contour points for the _psi means.
_CONTOUR = np.exp(2j * np.pi * (np.arange(32) + 0.5) / 32)


def timestamp() -> str:
    """UTC creation time; SOURCE_DATE_EPOCH pins it for reproducible outputs."""
    epoch = os.getenv("SOURCE_DATE_EPOCH")
    moment = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return moment.strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class OBEParams:
    """Numerical and experimental settings of one forward-model run.

    dt_tau and t_max_tau are in units of the excited-state lifetime. The step
    actually taken is also capped so that neither the standing-wave phase k v h
    nor the largest Rabi angle Omega h exceeds max_phase_step or max_rabi_step.
    """
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
    max_phase_step: float = 0.5
    max_rabi_step: float = 0.25
    chunk_size: int = 256
    max_steps: int = 10_000_000

    def __post_init__(self):
        if self.n_velocity < 3 or self.n_velocity % 2 == 0:
            raise ConfigError(f"n_velocity must be odd and >= 3, got {self.n_velocity}")
        if self.t_max_tau < 20:
            raise ConfigError(f"t_max must be at least 20 tau, got {self.t_max_tau}")
        if not 0 < self.dt_tau <= 1 / 50:
            raise ConfigError(f"dt must lie in (0, tau/50], got {self.dt_tau} tau")
        if not (self.detuning_step_mhz > 0 and self.detuning_max_mhz >= self.detuning_min_mhz):
            raise ConfigError("detuning grid must be strictly increasing")
        if not 0 < self.average_fraction <= 1:
            raise ConfigError(f"average_fraction must lie in (0, 1], got {self.average_fraction}")
        if self.n_phases < 1 or self.chunk_size < 1:
            raise ConfigError("n_phases and chunk_size must be positive")
        if self.polarization not in DRIVEN_POLARIZATIONS:
            raise ConfigError(f"polarization must be one of {sorted(DRIVEN_POLARIZATIONS)}")
        if min(self.temperature_k, self.velocity_span, self.max_phase_step, self.max_rabi_step) <= 0:
            raise ConfigError("temperature, velocity span and step limits must be positive")
        if self.intensity_w_per_m2 is None and (self.power_w < 0 or self.waist_m <= 0):
            raise ConfigError("power must be >= 0 and waist > 0")
        if self.intensity_w_per_m2 is not None and self.intensity_w_per_m2 < 0:
            raise ConfigError("intensity must be >= 0")

    @property
    def intensity(self) -> float:
        """Peak intensity in W/m^2, I = 2P/(pi w0^2) unless given directly."""
        if self.intensity_w_per_m2 is not None:
            return self.intensity_w_per_m2
        return 2 * self.power_w / (math.pi * self.waist_m ** 2)

    @property
    def field_amplitude(self) -> float:
        """E = sqrt(2I/(c eps0)) in V/m."""
        return math.sqrt(2 * self.intensity / (sc.c * sc.epsilon_0))

    def detuning_grid(self) -> np.ndarray:
        """Uniform laser detunings in MHz, both ends included."""
        count = int(round((self.detuning_max_mhz - self.detuning_min_mhz) / self.detuning_step_mhz)) + 1
        return self.detuning_min_mhz + self.detuning_step_mhz * np.arange(count)

    def velocity_grid(self, constants: AtomicConstants) -> np.ndarray:
        """Odd, symmetric grid over +-velocity_span most-probable speeds, so v = 0 is a node."""
        span = self.velocity_span * most_probable_speed(self.temperature_k, constants)
        return np.linspace(-span, span, self.n_velocity)

    def replace(self, **changes) -> "OBEParams":
        return dataclasses.replace(self, **changes)

    def digest(self) -> str:
        payload = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.md5(payload.encode()).hexdigest()


def most_probable_speed(temperature: float, constants: AtomicConstants) -> float:
    """sqrt(2 k_B T / m) in m/s."""
    return math.sqrt(2 * sc.k * temperature / constants.mass_kg)


def rabi_frequency(coupling, e_field, constants: AtomicConstants):
    """Omega = C sqrt(3 pi eps0 / (k^3 tau hbar)) E in rad/s."""
    if np.any(np.asarray(e_field) < 0):
        raise ValueError("field amplitude must be non-negative")
    scale = math.sqrt(3 * math.pi * sc.epsilon_0 / (constants.wavevector ** 3 * constants.lifetime_s * sc.hbar))
    rabi = np.asarray(coupling, dtype=float) * scale * np.asarray(e_field, dtype=float)
    return float(rabi) if rabi.ndim == 0 else rabi


def maxwell_weights(temperature: float, velocities: np.ndarray, constants: AtomicConstants) -> np.ndarray:
    """1-D Maxwell-Boltzmann weights on the given velocities, normalized to sum to 1."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    velocities = np.asarray(velocities, dtype=float)
    weights = np.exp(-constants.mass_kg * velocities ** 2 / (2 * sc.k * temperature))
    return weights / weights.sum()


# ---------------------------------------------------------------------------
# Broadening helpers


def natural_linewidth_mhz(constants: AtomicConstants) -> float:
    return constants.gamma / (2 * math.pi) / 1e6


def doppler_fwhm_mhz(temperature: float, constants: AtomicConstants) -> float:
    """Gaussian Doppler FWHM of a single line for a thermal vapour."""
    sigma = math.sqrt(sc.k * temperature / constants.mass_kg) / constants.wavelength_m
    return 2 * math.sqrt(2 * math.log(2)) * sigma / 1e6


def saturation_parameter(intensity: float, constants: AtomicConstants) -> float:
    return intensity / constants.saturation_intensity_w_per_m2


def power_broadened_fwhm_mhz(intensity: float, constants: AtomicConstants) -> float:
    """Gamma sqrt(1 + I/I_sat) in MHz."""
    return natural_linewidth_mhz(constants) * math.sqrt(1 + saturation_parameter(intensity, constants))


def power_broadening_ratio(intensity_low: float, intensity_high: float, constants: AtomicConstants) -> float:
    """FWHM(I_low) / FWHM(I_high) for a driven two-level line."""
    return power_broadened_fwhm_mhz(intensity_low, constants) / power_broadened_fwhm_mhz(intensity_high, constants)


def two_level_steady_state(rabi, detuning, gamma):
    """Excited population of the closed two-level limit of the equations (all angular units)."""
    rabi = np.asarray(rabi, dtype=float)
    return rabi ** 2 / (np.asarray(detuning, dtype=float) ** 2 + gamma ** 2 / 4 + 2 * rabi ** 2)


# ---------------------------------------------------------------------------
# Driven line set and state


@dataclass(frozen=True, eq=False)
class DrivenLines:
    """Ground/excited pairs that carry a coherence, with their drive strengths.

    alpha and beta are 0-based indices into the ground and excited levels; decay is
    the (excited, ground) branching matrix with unit row sums.
    """
    n_ground: int
    n_excited: int
    alpha: np.ndarray
    beta: np.ndarray
    polarization: np.ndarray
    coupling: np.ndarray
    rabi: np.ndarray
    detuning_mhz: np.ndarray
    decay: np.ndarray
    ground_incidence: np.ndarray = dc_field(init=False, repr=False)
    excited_incidence: np.ndarray = dc_field(init=False, repr=False)
    shared: np.ndarray = dc_field(init=False, repr=False)

    def __post_init__(self):
        total = self.decay.sum(axis=1)
        if self.decay.shape != (self.n_excited, self.n_ground) or np.any(np.abs(total - 1) > 1e-8):
            raise ValueError("decay matrix must be (excited, ground) with unit row sums")
        n = len(self.alpha)
        ground = np.zeros((n, self.n_ground))
        excited = np.zeros((n, self.n_excited))
        ground[np.arange(n), self.alpha] = 1.0
        excited[np.arange(n), self.beta] = 1.0
        object.__setattr__(self, "ground_incidence", ground)
        object.__setattr__(self, "excited_incidence", excited)
        # Lines whose ground level also carries another driven line.
        object.__setattr__(self, "shared", ground.sum(axis=0)[np.asarray(self.alpha, dtype=int)] > 1)

    @property
    def n_coherences(self) -> int:
        return len(self.alpha)

    @property
    def size(self) -> int:
        return self.n_ground + self.n_excited + self.n_coherences

    @classmethod
    def from_table(cls, table: TransitionTable, params: OBEParams, constants: AtomicConstants,
                   rows: Optional[Sequence[TransitionRow]] = None) -> "DrivenLines":
        """Lines driven by params.polarization at the configured intensity.

        By default these are the strong direct lines of the table (16 at high field
        with both polarizations). rows overrides the candidate set; it is still
        filtered by polarization.
        """
        driven = DRIVEN_POLARIZATIONS[params.polarization]
        amplitude = params.field_amplitude / (math.sqrt(2) if len(driven) == 2 else 1.0)
        if rows is None:
            rows = table.strong(params.coherence_floor)
        rows = [row for row in rows if row.polarization in driven]
        coupling = np.array([row.coupling for row in rows])
        return cls(
            n_ground=table.n_ground,
            n_excited=table.n_excited,
            alpha=np.array([row.alpha - 1 for row in rows], dtype=int),
            beta=np.array([row.beta - table.n_ground - 1 for row in rows], dtype=int),
            polarization=np.array([row.polarization for row in rows], dtype=int),
            coupling=coupling,
            rabi=rabi_frequency(coupling, amplitude, constants),
            detuning_mhz=np.array([row.detuning_mhz for row in rows]),
            decay=table.decay_matrix,
        )


@dataclass(frozen=True, eq=False)
class OBEState:
    """Populations and driven-line coherences for one trajectory."""
    ground: np.ndarray
    excited: np.ndarray
    coherences: np.ndarray

    @classmethod
    def thermal(cls, lines: DrivenLines) -> "OBEState":
        return cls(
            ground=np.full(lines.n_ground, 1.0 / lines.n_ground),
            excited=np.zeros(lines.n_excited),
            coherences=np.zeros(lines.n_coherences, dtype=complex),
        )

    @classmethod
    def from_vector(cls, vector: np.ndarray, n_ground: int, n_excited: int) -> "OBEState":
        vector = np.asarray(vector)
        return cls(
            ground=vector[:n_ground].real.copy(),
            excited=vector[n_ground:n_ground + n_excited].real.copy(),
            coherences=np.asarray(vector[n_ground + n_excited:], dtype=complex).copy(),
        )

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.ground.astype(complex), self.excited.astype(complex),
                               self.coherences.astype(complex)])

    @property
    def total_population(self) -> float:
        return float(self.ground.sum() + self.excited.sum())

    def check(self, lines: DrivenLines, tolerance: float = TRACE_TOLERANCE) -> None:
        if abs(self.total_population - 1) > tolerance:
            raise InvariantViolation(f"total population {self.total_population:.12f} != 1")
        populations = np.concatenate([self.ground, self.excited])
        if populations.min() < -tolerance or populations.max() > 1 + tolerance:
            raise InvariantViolation("population outside [0, 1]")
        bound = self.ground[lines.alpha] * self.excited[lines.beta] + tolerance
        if np.any(np.abs(self.coherences) ** 2 > bound):
            raise InvariantViolation("coherence exceeds the Cauchy-Schwarz bound")


# ---------------------------------------------------------------------------
# Right-hand side and integrator


def _drive(y: np.ndarray, phi: np.ndarray, lines: DrivenLines, rabi_tau: np.ndarray) -> np.ndarray:
    """Every term except the free coherence evolution, batched over rows, tau units."""
    ng, ne = lines.n_ground, lines.n_excited
    npop = ng + ne
    ground = y[:, :ng].real
    excited = y[:, ng:npop].real
    coherences = y[:, npop:]
    drive = 2.0 * phi[:, None] * rabi_tau[None, :] * coherences.imag
    out = np.empty_like(y)
    out[:, :ng] = drive @ lines.ground_incidence + excited @ lines.decay
    out[:, ng:npop] = -(drive @ lines.excited_incidence) - excited
    out[:, npop:] = 1j * rabi_tau[None, :] * phi[:, None] * (excited[:, lines.beta] - ground[:, lines.alpha])
    return out


def _free_rates(lines: DrivenLines, detuning: np.ndarray, tau: float) -> np.ndarray:
    """-(i (omega_ba - omega) + 1/(2 tau)) * tau per row and coherence."""
    mismatch = 2 * math.pi * (lines.detuning_mhz[None, :] - np.asarray(detuning)[:, None]) * 1e6 * tau
    return -(1j * mismatch + 0.5)


def _psi(z, order: int) -> np.ndarray:
    """Integral of x**order * exp(z x) over [0, 1], by contour means so z near 0 is exact."""
    w = np.asarray(z, dtype=complex)[..., None] + _CONTOUR
    ew = np.exp(w)
    if order == 0:
        values = (ew - 1) / w
    elif order == 1:
        values = (ew * (w - 1) + 1) / w ** 2
    else:
        values = (ew * (w * w - 2 * w + 2) - 2) / w ** 3
    return values.mean(axis=-1)


def _step_plan(kv_tau: float, duration_tau: float, params: OBEParams, rabi_tau: float = 0.0) -> Tuple[float, int]:
    """Step size and count: at most dt, max_phase_step of standing-wave phase and max_rabi_step of Rabi angle."""
    h_max = params.dt_tau
    if kv_tau:
        h_max = min(h_max, params.max_phase_step / abs(kv_tau))
    if rabi_tau:
        h_max = min(h_max, params.max_rabi_step / abs(rabi_tau))
    n_steps = max(1, int(math.ceil(duration_tau / h_max - 1e-9)))
    if n_steps > params.max_steps:
        raise IntegrationError(f"step count {n_steps} exceeds max_steps {params.max_steps}")
    return duration_tau / n_steps, n_steps


class _CollocationStep:
    """One step of length h for a batch of trajectories, tau units.

    Over a step each population difference n = rho_bb - rho_aa is taken as the
    quadratic through its values at 0, h/2 and h. For that history the coherence
    has a closed form, and the population transfer is the exact time integral of
    the coherent flux 2 Omega phi Im(rho_ab). A coherence rotating much faster
    than 1/h therefore cannot alias into the populations, and the trace is kept
    to rounding. The node values come from a few fixed-point sweeps.
    """

    def __init__(self, lines: DrivenLines, detuning: np.ndarray, kv_tau: np.ndarray, kz0: np.ndarray,
                 h: float, tau: float):
        self.lines = lines
        self.kv = np.asarray(kv_tau, dtype=float)
        self.kz0 = np.asarray(kz0, dtype=float)
        self.rabi = lines.rabi * tau
        self.nodes = (h / 2, h)
        d = -_free_rates(lines, detuning, tau)
        kv = self.kv[:, None]
        self.shifted = (d, d - 1)
        self.denominator = (d ** 2 + kv ** 2, (d - 1) ** 2 + kv ** 2)
        # Per node: free decay, drive response per sideband and power, and the
        # integrals of (u/h)^p e^(mu u) with and without the doubled standing-wave phase.
        self.free, self.response, self.plain, self.wave = [], [], [], []
        for s in self.nodes:
            decay = np.exp(-d * s)
            scale = [s * (s / h) ** p for p in range(3)]
            self.free.append(decay)
            self.response.append([[decay * scale[p] * _psi((d + 1j * sign * kv) * s, p) for p in range(3)]
                                  for sign in (1, -1)])
            self.plain.append([[scale[p] * _psi(mu * s, p).real for p in range(3)] for mu in (0, 1)])
            self.wave.append([[scale[p] * _psi((mu + 2j * self.kv) * s, p) for p in range(3)] for mu in (0, 1)])

    def _node_terms(self, k: int, rotor: np.ndarray, theta: np.ndarray):
        s = self.nodes[k]
        phase = theta + self.kv * s
        phi = np.cos(phase)[:, None]
        slope = (-self.kv * np.sin(phase))[:, None]
        plus, minus = rotor[:, None], rotor.conj()[:, None]
        drive = [plus * self.response[k][0][p] + minus * self.response[k][1][p] for p in range(3)]
        double = rotor ** 2
        square, cross = [], []
        for mu in (0, 1):
            waves = [double * wave for wave in self.wave[k][mu]]
            square.append([(0.5 * self.plain[k][mu][p] + 0.5 * waves[p].real)[:, None] for p in range(3)])
            cross.append([(-0.5 * self.kv * waves[p].imag)[:, None] for p in range(3)])
        return s, phi, slope, drive, square, cross

    def advance(self, ground: np.ndarray, excited: np.ndarray, coherences: np.ndarray,
                t: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        lines, rabi = self.lines, self.rabi
        theta = self.kz0 + self.kv * t
        rotor = np.exp(1j * theta)
        phi0 = np.cos(theta)[:, None]
        slope0 = (-self.kv * np.sin(theta))[:, None]
        terms = [self._node_terms(k, rotor, theta) for k in range(len(self.nodes))]

        n0 = excited[:, lines.beta] - ground[:, lines.alpha]
        n_mid = n_end = n0
        for _ in range(COLLOCATION_SWEEPS):
            history = (n0, 4 * n_mid - 3 * n0 - n_end, 2 * (n0 - 2 * n_mid + n_end))
            states = []
            for k, (s, phi, slope, drive, square, cross) in enumerate(terms):
                c = self.free[k] * coherences + 0.5j * rabi * sum(nu * part for nu, part in zip(history, drive))
                transfer = []
                for mu, weight in enumerate((1.0, math.exp(s))):
                    a = sum(nu * part for nu, part in zip(history, square[mu]))
                    b = sum(nu * part for nu, part in zip(history, cross[mu]))
                    r1 = 1j * rabi * a - (weight * phi * c - phi0 * coherences)
                    r2 = 1j * rabi * b - (weight * slope * c - slope0 * coherences)
                    flux = (self.shifted[mu] * r1 + r2) / self.denominator[mu]
                    transfer.append(2 * rabi * flux.imag)
                e = math.exp(-s) * (excited - transfer[1] @ lines.excited_incidence)
                dwell = excited - e - transfer[0] @ lines.excited_incidence
                g = ground + transfer[0] @ lines.ground_incidence + dwell @ lines.decay
                states.append((g, e, c))
            (g_mid, e_mid, _), end = states
            n_mid = e_mid[:, lines.beta] - g_mid[:, lines.alpha]
            n_end = end[1][:, lines.beta] - end[0][:, lines.alpha]
        return end


def _restore_positivity(ground: np.ndarray, excited: np.ndarray, coherences: np.ndarray,
                        lines: DrivenLines) -> Tuple[np.ndarray, float]:
    """Scale shared-ground coherences back onto |rho_ab|^2 <= rho_aa rho_bb.

    The reduced equations drop the ground Zeeman coherences, so when two driven
    lines share a ground level the bound is not implied by the dynamics.
    """
    shared = lines.shared
    bound = np.clip(ground[:, lines.alpha] * excited[:, lines.beta], 0.0, None)
    size = np.abs(coherences) ** 2
    over = shared[None, :] & (size > bound)
    if not over.any():
        return coherences, 0.0
    excess = float((size - bound)[over].max())
    scale = np.ones(coherences.shape)
    scale[over] = np.sqrt(bound[over] / size[over])
    return coherences * scale, excess


def _check_batch(ground: np.ndarray, excited: np.ndarray, coherences: np.ndarray, lines: DrivenLines,
                 detuning: np.ndarray, kv_tau: np.ndarray, t_tau: float, constants: AtomicConstants) -> None:
    """Trace, population bounds and the Cauchy-Schwarz bound for every row."""
    populations = np.concatenate([ground, excited], axis=1)
    trace = np.abs(populations.sum(axis=1) - 1)
    excess = np.abs(coherences) ** 2 - ground[:, lines.alpha] * excited[:, lines.beta]
    if (trace.max() <= TRACE_TOLERANCE and populations.min() >= -POPULATION_TOLERANCE
            and populations.max() <= 1 + POPULATION_TOLERANCE
            and excess.max(initial=-np.inf) <= COHERENCE_TOLERANCE):
        return

    tau = constants.lifetime_s
    velocity = kv_tau / (constants.wavevector * tau)
    when = t_tau * tau
    finite = np.isfinite(populations).all(axis=1) & np.isfinite(coherences).all(axis=1)
    if not finite.all():
        row = int(np.flatnonzero(~finite)[0])
        raise IntegrationError("non-finite state", velocity[row], detuning[row], when)
    if trace.max() > TRACE_TOLERANCE:
        row = int(np.argmax(trace))
        raise InvariantViolation(f"trace drift {trace[row]:.3e}", velocity[row], detuning[row], when)
    outside = np.maximum(-populations.min(axis=1), populations.max(axis=1) - 1)
    if outside.max() > POPULATION_TOLERANCE:
        row = int(np.argmax(outside))
        raise InvariantViolation(f"population outside [0, 1] by {outside[row]:.3e}",
                                 velocity[row], detuning[row], when)
    worst = excess.max(axis=1)
    row = int(np.argmax(worst))
    raise InvariantViolation(f"coherence exceeds the Cauchy-Schwarz bound by {worst[row]:.3e}",
                             velocity[row], detuning[row], when)


def _propagate(lines: DrivenLines, y0: np.ndarray, detuning: np.ndarray, kv_tau: np.ndarray,
               kz0: np.ndarray, h: float, n_steps: int, n_average: int,
               constants: AtomicConstants) -> Tuple[np.ndarray, np.ndarray]:
    """Advance a batch of trajectories; returns (final state, window-averaged excited populations).

    Every invariant is checked after every step.
    """
    ng, ne = lines.n_ground, lines.n_excited
    npop = ng + ne
    y0 = np.asarray(y0)
    ground = y0[:, :ng].real.copy()
    excited = y0[:, ng:npop].real.copy()
    coherences = np.array(y0[:, npop:], dtype=complex)
    step = _CollocationStep(lines, detuning, kv_tau, kz0, h, constants.lifetime_s)
    restore = bool(lines.shared.any())

    accumulated = np.zeros((len(y0), ne))
    average_from = n_steps - n_average
    clipped = 0.0
    for n in range(n_steps):
        ground, excited, coherences = step.advance(ground, excited, coherences, n * h)
        if restore:
            coherences, excess = _restore_positivity(ground, excited, coherences, lines)
            clipped = max(clipped, excess)
        _check_batch(ground, excited, coherences, lines, detuning, kv_tau, (n + 1) * h, constants)
        if n >= average_from:
            accumulated += excited
    if clipped:
        logger.debug("Shared-ground coherences held on the positivity bound, largest excess %.3e", clipped)
    y = np.concatenate([ground.astype(complex), excited.astype(complex), coherences], axis=1)
    return y, accumulated / n_average


def obe_derivative(state: OBEState, t: float, velocity: float, detuning: float, lines: DrivenLines,
                   constants: AtomicConstants, z0: float = 0.0) -> OBEState:
    """Time derivative of the state in s^-1 at time t (s) for one trajectory."""
    tau = constants.lifetime_s
    k = constants.wavevector
    y = state.to_vector()[None, :]
    phi = np.array([math.cos(k * (z0 + velocity * t))])
    npop = lines.n_ground + lines.n_excited
    rates = _drive(y, phi, lines, lines.rabi * tau)
    if lines.n_coherences:
        rates[:, npop:] += _free_rates(lines, np.array([detuning]), tau) * y[:, npop:]
    return OBEState.from_vector(rates[0] / tau, lines.n_ground, lines.n_excited)


def propagate(state0: OBEState, duration_s: float, velocity: float, detuning: float, lines: DrivenLines,
              params: OBEParams, constants: AtomicConstants, z0: float = 0.0) -> OBEState:
    """Final state after duration_s along one trajectory entering the standing wave at z0 (m).

    Raises IntegrationError, or its subclass InvariantViolation, with the
    velocity, detuning and time of the first offending step.
    """
    tau = constants.lifetime_s
    kv_tau = constants.wavevector * velocity * tau
    h, n_steps = _step_plan(kv_tau, duration_s / tau, params, _peak_rabi_tau(lines, constants))
    y, _ = _propagate(lines, state0.to_vector()[None, :], np.array([detuning]), np.array([kv_tau]),
                      np.array([constants.wavevector * z0]), h, n_steps, 1, constants)
    return OBEState.from_vector(y[0], lines.n_ground, lines.n_excited)


def _peak_rabi_tau(lines: DrivenLines, constants: AtomicConstants) -> float:
    return float(np.abs(lines.rabi).max(initial=0.0)) * constants.lifetime_s


def _phase_offsets(params: OBEParams) -> np.ndarray:
    """Entry phases k z0, equally spaced over [0, pi)."""
    return math.pi * np.arange(params.n_phases) / params.n_phases


def _averaged_block(lines: DrivenLines, y0: np.ndarray, detunings: np.ndarray, velocity: float,
                    params: OBEParams, constants: AtomicConstants) -> np.ndarray:
    """Phase-averaged excited populations, shape (len(detunings), n_excited)."""
    kv_tau = constants.wavevector * velocity * constants.lifetime_s
    h, n_steps = _step_plan(kv_tau, params.t_max_tau, params, _peak_rabi_tau(lines, constants))
    n_average = max(1, int(round(params.average_fraction * n_steps)))
    phases = _phase_offsets(params)
    rows = len(detunings) * len(phases)
    _, averaged = _propagate(
        lines,
        np.tile(y0, (rows, 1)),
        np.repeat(detunings, len(phases)),
        np.full(rows, kv_tau),
        np.tile(phases, len(detunings)),
        h, n_steps, n_average, constants,
    )
    return averaged.reshape(len(detunings), len(phases), -1).mean(axis=1)


def integrate(state0: Optional[OBEState], velocity: float, detuning, lines: DrivenLines,
              params: OBEParams, constants: AtomicConstants) -> np.ndarray:
    """Time- and phase-averaged excited populations at one velocity.

    A scalar detuning gives shape (n_excited,); an array gives one row per detuning.
    """
    state0 = state0 or OBEState.thermal(lines)
    averaged = _averaged_block(lines, state0.to_vector(), np.atleast_1d(np.asarray(detuning, dtype=float)),
                               velocity, params, constants)
    return averaged[0] if np.ndim(detuning) == 0 else averaged


@dataclass(frozen=True, eq=False)
class Spectrum:
    detuning: np.ndarray
    signal: np.ndarray
    metadata: Dict[str, Any] = dc_field(default_factory=dict)

    def __post_init__(self):
        detuning = np.asarray(self.detuning, dtype=float)
        signal = np.asarray(self.signal, dtype=float)
        if detuning.ndim != 1 or detuning.shape != signal.shape:
            raise ValueError("detuning and signal must be 1-D arrays of equal length")
        object.__setattr__(self, "detuning", detuning)
        object.__setattr__(self, "signal", signal)

    def window(self, low: float, high: float) -> Tuple[np.ndarray, np.ndarray]:
        mask = (self.detuning >= low) & (self.detuning <= high)
        return self.detuning[mask], self.signal[mask]


def _spectrum_metadata(field: float, params: OBEParams, constants: AtomicConstants, model: str) -> Dict[str, Any]:
    return {
        "field_T": field,
        "model": model,
        "params_digest": params.digest(),
        "constants_version": constants.version,
        "created": timestamp(),
    }


def _normalized(signal: np.ndarray) -> np.ndarray:
    signal = np.clip(signal, 0.0, None)
    peak = signal.max(initial=0.0)
    return signal / peak if peak > 0 else signal


def simulate_spectrum(field: float, params: OBEParams, constants: AtomicConstants, jobs: int = 1,
                      progress: Optional[Callable[[int, int], None]] = None) -> Spectrum:
    """Velocity-averaged fluorescence F(detuning), normalized to unit maximum.

    Work is split into (velocity, detuning chunk) tasks; with jobs > 1 they run on a
    thread pool, and the weighted sum is reduced in task order so the result does
    not depend on scheduling. progress(done, total) is called after each task.
    """
    started = time.perf_counter()
    table = transition_table(field, constants)
    lines = DrivenLines.from_table(table, params, constants)
    detunings = params.detuning_grid()
    velocities = params.velocity_grid(constants)
    weights = maxwell_weights(params.temperature_k, velocities, constants)
    fluorescence = table.decay_matrix.sum(axis=1)
    y0 = OBEState.thermal(lines).to_vector()

    chunks = [np.arange(start, min(start + params.chunk_size, len(detunings)))
              for start in range(0, len(detunings), params.chunk_size)]
    tasks = [(i, chunk) for i in range(len(velocities)) for chunk in chunks]
    lock = threading.Lock()
    done = 0

    def run(task):
        nonlocal done
        i, chunk = task
        result = _averaged_block(lines, y0, detunings[chunk], velocities[i], params, constants) @ fluorescence
        with lock:
            done += 1
            if progress:
                progress(done, len(tasks))
        return result

    logger.info("Simulating B=%.4f T: %d detunings x %d velocities, %d coherences",
                field, len(detunings), len(velocities), lines.n_coherences)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(task) for task in tasks]

    # Fixed reduction order keeps the output independent of scheduling.
    signal = np.zeros(len(detunings))
    for (i, chunk), result in zip(tasks, results):
        signal[chunk] += weights[i] * result
    logger.info("B=%.4f T done in %.1f s", field, time.perf_counter() - started)
    return Spectrum(detuning=detunings, signal=_normalized(signal),
                    metadata=_spectrum_metadata(field, params, constants, "obe"))


def weak_probe_spectrum(field: float, params: OBEParams, constants: AtomicConstants, jobs: int = 1,
                        progress: Optional[Callable[[int, int], None]] = None) -> Spectrum:
    """Rate-equation limit: sum of C^2-weighted Voigt lines over the driven strong lines.

    The Gaussian part is the Doppler width at params.temperature_k. The Lorentzian
    part is the natural width power-broadened by the line's own saturation
    parameter C^2 I / I_sat, with I split evenly between driven polarizations.
    jobs and progress are accepted so both models share one call signature.
    """
    table = transition_table(field, constants)
    detunings = params.detuning_grid()
    sigma = doppler_fwhm_mhz(params.temperature_k, constants) / (2 * math.sqrt(2 * math.log(2)))
    driven = DRIVEN_POLARIZATIONS[params.polarization]
    intensity = params.intensity / len(driven)
    signal = np.zeros(len(detunings))
    for row in table.strong(params.coherence_floor):
        if row.polarization in driven:
            gamma = power_broadened_fwhm_mhz(row.coupling ** 2 * intensity, constants) / 2
            signal += row.coupling ** 2 * voigt_profile(detunings - row.detuning_mhz, sigma, gamma)
    return Spectrum(detuning=detunings, signal=_normalized(signal),
                    metadata=_spectrum_metadata(field, params, constants, "weak-probe"))


SPECTRUM_MODELS = {"obe": simulate_spectrum, "weak-probe": weak_probe_spectrum}
