"""Hyperfine + Zeeman structure of the 87Rb D2 line in the uncoupled basis.

Energies are in MHz relative to each manifold's zero-field centre of gravity;
fields are in tesla. Basis states are ordered m_I descending, then m_J
descending, and eigenstate i is the one whose dominant character is basis
state i.
"""
import hashlib
import json
import logging
import math
import os
import threading
from dataclasses import asdict, dataclass, field as dc_field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from cachetools import LRUCache, cached
from dotenv import dotenv_values
from scipy.linalg import eigh
from scipy.optimize import linear_sum_assignment
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from errors import AtomicStructureError, ConfigError, DataIOError

logger = logging.getLogger(__name__)

DEFAULT_CONSTANTS_PATH = Path(__file__).resolve().parent / "constants" / "rb87_d2.env"
SUPPORTED_SCHEMA_VERSIONS = ("1",)
MANIFOLDS = ("ground", "excited")
POLARIZATIONS = (-1, 0, 1)
STRONG_COUPLING = 0.05

Label = Tuple[float, float]


@dataclass(frozen=True)
class AtomicConstants:
    version: str
    nuclear_spin: float
    j_ground: float
    j_excited: float
    a_ground_mhz: float
    a_excited_mhz: float
    b_excited_mhz: float
    gj_ground: float
    gj_excited: float
    gi: float
    lifetime_s: float
    wavelength_m: float
    center_frequency_hz: float
    saturation_intensity_w_per_m2: float
    bohr_magneton_mhz_per_t: float
    atomic_mass_u: float

    _KEYS = {
        "NUCLEAR_SPIN": "nuclear_spin",
        "J_GROUND": "j_ground",
        "J_EXCITED": "j_excited",
        "A_GROUND_MHZ": "a_ground_mhz",
        "A_EXCITED_MHZ": "a_excited_mhz",
        "B_EXCITED_MHZ": "b_excited_mhz",
        "G_J_GROUND": "gj_ground",
        "G_J_EXCITED": "gj_excited",
        "G_I": "gi",
        "LIFETIME_S": "lifetime_s",
        "WAVELENGTH_M": "wavelength_m",
        "CENTER_FREQUENCY_HZ": "center_frequency_hz",
        "SATURATION_INTENSITY_W_PER_M2": "saturation_intensity_w_per_m2",
        "BOHR_MAGNETON_MHZ_PER_T": "bohr_magneton_mhz_per_t",
        "ATOMIC_MASS_U": "atomic_mass_u",
    }

    def __post_init__(self):
        for name in ("nuclear_spin", "j_ground", "j_excited"):
            value = getattr(self, name)
            if value < 0 or (2 * value) != round(2 * value):
                raise ConfigError(f"{name} must be a non-negative half-integer, got {value}")
        for name in ("lifetime_s", "wavelength_m", "center_frequency_hz",
                     "saturation_intensity_w_per_m2", "bohr_magneton_mhz_per_t", "atomic_mass_u"):
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0:
                raise ConfigError(f"{name} must be positive and finite, got {value}")

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "AtomicConstants":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Constants file not found: {path}")
        raw = dotenv_values(path)
        schema = raw.pop("SCHEMA_VERSION", None)
        if schema not in SUPPORTED_SCHEMA_VERSIONS:
            raise ConfigError(f"{path}: unsupported or missing SCHEMA_VERSION {schema!r}")
        version = raw.pop("CONSTANTS_VERSION", None)
        if not version:
            raise ConfigError(f"{path}: CONSTANTS_VERSION is required")
        unknown = sorted(set(raw) - set(cls._KEYS))
        if unknown:
            raise ConfigError(f"{path}: unknown keys {unknown}")
        missing = sorted(set(cls._KEYS) - set(raw))
        if missing:
            raise ConfigError(f"{path}: missing keys {missing}")
        values = {}
        for key, attr in cls._KEYS.items():
            try:
                values[attr] = float(Fraction(raw[key].strip()))
            except (ValueError, ZeroDivisionError, AttributeError) as e:
                raise ConfigError(f"{path}: {key} is not a number: {raw[key]!r}") from e
        return cls(version=version, **values)

    @property
    def gamma(self) -> float:
        """Natural decay rate 1/tau in s^-1."""
        return 1.0 / self.lifetime_s

    @property
    def wavevector(self) -> float:
        return 2.0 * math.pi / self.wavelength_m

    @property
    def mass_kg(self) -> float:
        from scipy.constants import atomic_mass
        return self.atomic_mass_u * atomic_mass

    def spins(self, manifold: str) -> Tuple[float, float]:
        if manifold == "ground":
            return self.nuclear_spin, self.j_ground
        if manifold == "excited":
            return self.nuclear_spin, self.j_excited
        raise AtomicStructureError(f"Unknown manifold {manifold!r}; expected one of {MANIFOLDS}")

    def digest(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True)
        return hashlib.md5(payload.encode()).hexdigest()


def load_constants(path: Optional[Union[str, Path]] = None) -> AtomicConstants:
    """Load the constants file; HPBMAG_CONSTANTS overrides the shipped default."""
    path = path or os.getenv("HPBMAG_CONSTANTS") or DEFAULT_CONSTANTS_PATH
    constants = AtomicConstants.from_file(path)
    logger.debug("Loaded constants %s from %s", constants.version, path)
    return constants


# ---------------------------------------------------------------------------
# Angular momentum algebra


def _half_integer(value) -> Fraction:
    try:
        twice = Fraction(value) * 2
    except (TypeError, ValueError) as e:
        raise ValueError(f"Not a half-integer: {value!r}") from e
    if twice.denominator != 1:
        raise ValueError(f"Not a half-integer: {value!r}")
    return twice / 2


def _factorial(x: Fraction) -> int:
    return math.factorial(int(x))


def wigner_3j(j1, j2, j3, m1, m2, m3) -> float:
    """Wigner 3j symbol by the Racah formula, summed in exact arithmetic."""
    j1, j2, j3, m1, m2, m3 = (_half_integer(x) for x in (j1, j2, j3, m1, m2, m3))
    if min(j1, j2, j3) < 0:
        raise ValueError("angular momenta must be non-negative")
    if m1 + m2 + m3 != 0:
        return 0.0
    for j, m in ((j1, m1), (j2, m2), (j3, m3)):
        if abs(m) > j or (j - m).denominator != 1:
            return 0.0
    if j3 < abs(j1 - j2) or j3 > j1 + j2 or (j1 + j2 + j3).denominator != 1:
        return 0.0

    f = _factorial
    triangle = Fraction(f(j1 + j2 - j3) * f(j1 - j2 + j3) * f(-j1 + j2 + j3), f(j1 + j2 + j3 + 1))
    norm = f(j1 + m1) * f(j1 - m1) * f(j2 + m2) * f(j2 - m2) * f(j3 + m3) * f(j3 - m3)
    k_min = max(0, j2 - j3 - m1, j1 - j3 + m2)
    k_max = min(j1 + j2 - j3, j1 - m1, j2 + m2)
    total = Fraction(0)
    for k in range(int(k_min), int(k_max) + 1):
        total += Fraction((-1) ** k, f(k) * f(j3 - j2 + k + m1) * f(j3 - j1 + k - m2)
                          * f(j1 + j2 - j3 - k) * f(j1 - k - m1) * f(j2 - k + m2))
    if total == 0:
        return 0.0
    sign = -1.0 if (int(j1 - j2 - m3) % 2) else 1.0
    if total < 0:
        sign = -sign
    return sign * math.sqrt(total * total * triangle * norm)


def _spin_matrices(j: float) -> Tuple[np.ndarray, np.ndarray]:
    """(J_z, J_+) in the |j, m> basis ordered m = j, j-1, ..., -j."""
    m = j - np.arange(int(round(2 * j + 1)))
    jz = np.diag(m)
    jp = np.diag(np.sqrt(j * (j + 1) - m[1:] * (m[1:] + 1)), k=1)
    return jz, jp


def uncoupled_basis(nuclear_spin: float, j: float) -> Tuple[Label, ...]:
    """(m_I, m_J) labels, m_I outer and descending, m_J descending within."""
    m_i = nuclear_spin - np.arange(int(round(2 * nuclear_spin + 1)))
    m_j = j - np.arange(int(round(2 * j + 1)))
    return tuple((float(a), float(b)) for a in m_i for b in m_j)


def format_m(m: float) -> str:
    value = Fraction(m).limit_denominator(2)
    text = f"{abs(value.numerator)}" if value.denominator == 1 else f"{abs(value.numerator)}/2"
    return ("-" if value < 0 else "+") + text


def format_label(label: Label) -> str:
    return f"|{format_m(label[0])},{format_m(label[1])}>"


# ---------------------------------------------------------------------------
# Hamiltonian and eigensystems


@dataclass(frozen=True, eq=False)
class Hamiltonian:
    matrix: np.ndarray
    basis: Tuple[Label, ...]
    manifold: str
    field: float


@dataclass(frozen=True, eq=False)
class ZeemanEigensystem:
    field: float
    manifold: str
    energies: np.ndarray
    vectors: np.ndarray
    basis: Optional[Tuple[Label, ...]] = None

    @property
    def labels(self) -> Optional[Tuple[Label, ...]]:
        return self.basis

    @property
    def m_f(self) -> np.ndarray:
        if self.basis is None:
            raise AtomicStructureError("eigensystem has no basis labels")
        return np.array([a + b for a, b in self.basis])

    def index_of(self, label: Label) -> int:
        try:
            return self.basis.index((float(label[0]), float(label[1])))
        except (ValueError, AttributeError) as e:
            raise AtomicStructureError(f"No eigenstate labelled {label}") from e

    def block_energies(self, m_f: float) -> np.ndarray:
        return np.sort(self.energies[np.isclose(self.m_f, m_f)])


@dataclass(frozen=True, eq=False)
class _HamiltonianParts:
    zero_field: np.ndarray
    zeeman: np.ndarray
    basis: Tuple[Label, ...]
    blocks: Tuple[np.ndarray, ...]
    tie_bias: np.ndarray


@cached(cache=LRUCache(maxsize=32), lock=threading.RLock())
def _hamiltonian_parts(manifold: str, constants: AtomicConstants) -> _HamiltonianParts:
    """Field-independent pieces: H(B) = zero_field + B * zeeman."""
    nuclear_spin, j = constants.spins(manifold)
    if manifold == "ground":
        a_hfs, b_hfs, g_j = constants.a_ground_mhz, 0.0, constants.gj_ground
    else:
        a_hfs, b_hfs, g_j = constants.a_excited_mhz, constants.b_excited_mhz, constants.gj_excited

    iz, ip = _spin_matrices(nuclear_spin)
    jz, jp = _spin_matrices(j)
    one_i, one_j = np.eye(len(iz)), np.eye(len(jz))
    big_iz, big_jz = np.kron(iz, one_j), np.kron(one_i, jz)
    i_dot_j = big_iz @ big_jz + 0.5 * (np.kron(ip, jp.T) + np.kron(ip.T, jp))

    zero_field = a_hfs * i_dot_j
    if b_hfs and nuclear_spin > 0.5 and j > 0.5:
        eye = np.eye(len(zero_field))
        zero_field = zero_field + b_hfs * (
            3 * i_dot_j @ i_dot_j + 1.5 * i_dot_j
            - nuclear_spin * (nuclear_spin + 1) * j * (j + 1) * eye
        ) / (2 * nuclear_spin * (2 * nuclear_spin - 1) * j * (2 * j - 1))
    zeeman = constants.bohr_magneton_mhz_per_t * (g_j * big_jz + constants.gi * big_iz)

    basis = uncoupled_basis(nuclear_spin, j)
    m_f = np.array([a + b for a, b in basis])
    blocks = tuple(np.flatnonzero(np.isclose(m_f, value)) for value in np.unique(m_f))
    # Lower m_J wins exact dominance ties.
    tie_bias = -1e-9 * np.array([m_j for _, m_j in basis])
    return _HamiltonianParts(zero_field, zeeman, basis, blocks, tie_bias)


def build_hamiltonian(field: float, manifold: str, constants: AtomicConstants) -> Hamiltonian:
    """H = A I.J + quadrupole + (muB/h)(gJ Jz + gI Iz) B in MHz."""
    if not math.isfinite(field) or field < 0:
        raise AtomicStructureError(f"Field must be finite and non-negative, got {field}")
    parts = _hamiltonian_parts(manifold, constants)
    return Hamiltonian(matrix=parts.zero_field + field * parts.zeeman, basis=parts.basis,
                       manifold=manifold, field=field)


def _dominant_order(weights: np.ndarray, tie_bias: np.ndarray) -> np.ndarray:
    """Basis position (within a block) claimed by each eigenvector column."""
    biased = weights + tie_bias[:, None]
    order = np.argmax(biased, axis=0)
    if len(set(order.tolist())) == len(order):
        return order
    cols, rows = linear_sum_assignment(-biased.T)
    result = np.empty(len(order), dtype=int)
    result[cols] = rows
    return result


def _solve_blocks(matrix: np.ndarray, blocks: Sequence[np.ndarray],
                  tie_bias: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    energies = np.empty(len(matrix))
    vectors = np.zeros_like(matrix)
    for idx in blocks:
        values, vecs = eigh(matrix[np.ix_(idx, idx)])
        order = _dominant_order(np.abs(vecs) ** 2, tie_bias[idx])
        for col, row in enumerate(order):
            vec = vecs[:, col]
            if vec[row].real < 0:
                vec = -vec
            energies[idx[row]] = values[col]
            vectors[idx, idx[row]] = vec
    return energies, vectors


def diagonalize(hamiltonian: Union[Hamiltonian, np.ndarray]) -> ZeemanEigensystem:
    """Blockwise eigendecomposition; blocks are the connected components of H."""
    if isinstance(hamiltonian, Hamiltonian):
        matrix, basis = hamiltonian.matrix, hamiltonian.basis
        field, manifold = hamiltonian.field, hamiltonian.manifold
    else:
        matrix, basis, field, manifold = np.asarray(hamiltonian), None, float("nan"), ""
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise AtomicStructureError(f"Hamiltonian must be square, got shape {matrix.shape}")
    scale = max(1.0, float(np.abs(matrix).max(initial=0.0)))
    if np.abs(matrix - matrix.conj().T).max(initial=0.0) > 1e-10 * scale:
        raise AtomicStructureError("Hamiltonian is not Hermitian")
    if np.iscomplexobj(matrix) and np.abs(matrix.imag).max(initial=0.0) <= 1e-14 * scale:
        matrix = matrix.real
    matrix = np.asarray(matrix, dtype=complex if np.iscomplexobj(matrix) else float)

    if basis is not None:
        tie_bias = -1e-9 * np.array([m_j for _, m_j in basis])
    else:
        tie_bias = np.zeros(len(matrix))
    n_blocks, block_of = connected_components(csr_matrix(np.abs(matrix) > 1e-12 * scale), directed=False)
    blocks = [np.flatnonzero(block_of == block) for block in range(n_blocks)]
    energies, vectors = _solve_blocks(matrix, blocks, tie_bias)
    return ZeemanEigensystem(field=field, manifold=manifold, energies=energies, vectors=vectors, basis=basis)


@cached(cache=LRUCache(maxsize=4096), lock=threading.RLock())
def eigensystem(manifold: str, field: float, constants: AtomicConstants) -> ZeemanEigensystem:
    """Memoized eigensystem using the precomputed m_F blocks."""
    hamiltonian = build_hamiltonian(field, manifold, constants)
    parts = _hamiltonian_parts(manifold, constants)
    energies, vectors = _solve_blocks(hamiltonian.matrix, parts.blocks, parts.tie_bias)
    return ZeemanEigensystem(field=field, manifold=manifold, energies=energies, vectors=vectors,
                             basis=parts.basis)


# ---------------------------------------------------------------------------
# Dipole couplings


def _angular_factors(ground_basis, excited_basis, j_ground: float, j_excited: float, q: int) -> np.ndarray:
    """Bare <J' m_J'| d_q |J m_J> factors, rows excited, columns ground."""
    factors = np.zeros((len(excited_basis), len(ground_basis)))
    for b, (mi_e, mj_e) in enumerate(excited_basis):
        for a, (mi_g, mj_g) in enumerate(ground_basis):
            if mi_e != mi_g or mj_e != mj_g + q:
                continue
            phase = -1.0 if int(round(j_excited - mj_e)) % 2 else 1.0
            factors[b, a] = phase * math.sqrt(2 * j_excited + 1) * wigner_3j(j_excited, 1, j_ground, -mj_e, q, mj_g)
    return factors


def coupling_matrices(ground: ZeemanEigensystem, excited: ZeemanEigensystem,
                      constants: AtomicConstants) -> Dict[int, np.ndarray]:
    """C_q for q = -1, 0, +1 with every excited state's total branching normalized to 1."""
    if not math.isclose(ground.field, excited.field, rel_tol=0.0, abs_tol=1e-12):
        raise AtomicStructureError(
            f"Eigensystems computed at different fields: {ground.field} T vs {excited.field} T")
    if ground.basis is None or excited.basis is None:
        raise AtomicStructureError("Coupling matrices need labelled eigensystems")
    raw = {}
    for q in POLARIZATIONS:
        factors = _angular_factors(ground.basis, excited.basis, constants.j_ground, constants.j_excited, q)
        raw[q] = excited.vectors.conj().T @ factors @ ground.vectors
    norm = np.sqrt(sum((raw[q] ** 2).sum(axis=1) for q in POLARIZATIONS))
    if np.any(norm <= 0):
        raise AtomicStructureError("Excited state with no decay channel")
    return {q: raw[q] / norm[:, None] for q in POLARIZATIONS}


def coupling_matrix(ground: ZeemanEigensystem, excited: ZeemanEigensystem, q: int,
                    constants: AtomicConstants) -> np.ndarray:
    """Normalized C_q, rows excited and columns ground."""
    if q not in POLARIZATIONS:
        raise AtomicStructureError(f"Polarization must be one of {POLARIZATIONS}, got {q}")
    return coupling_matrices(ground, excited, constants)[q]


# ---------------------------------------------------------------------------
# Transition table


@dataclass(frozen=True)
class TransitionRow:
    alpha: int
    beta: int
    polarization: int
    detuning_mhz: float
    coupling: float
    ground_label: Label
    excited_label: Label

    @property
    def label(self) -> str:
        return f"{format_label(self.ground_label)}->{format_label(self.excited_label)}"

    @property
    def key(self) -> Tuple[int, int, int]:
        return self.alpha, self.beta, self.polarization

    @property
    def direct(self) -> bool:
        """Same m_I, and m_J steps by the polarization, between the dominant labels."""
        return (self.ground_label[0] == self.excited_label[0]
                and self.excited_label[1] == self.ground_label[1] + self.polarization)


@dataclass(frozen=True, eq=False)
class TransitionTable:
    field: float
    rows: Tuple[TransitionRow, ...]
    ground: ZeemanEigensystem
    excited: ZeemanEigensystem
    couplings: Mapping[int, np.ndarray] = dc_field(repr=False)

    @property
    def n_ground(self) -> int:
        return len(self.ground.energies)

    @property
    def n_excited(self) -> int:
        return len(self.excited.energies)

    @property
    def decay_matrix(self) -> np.ndarray:
        """Branching ratios summed over q, shape (excited, ground)."""
        return sum(c ** 2 for c in self.couplings.values())

    def for_polarization(self, q: int) -> List[TransitionRow]:
        return [row for row in self.rows if row.polarization == q]

    def strong(self, threshold: float = STRONG_COUPLING, q: Optional[int] = None) -> List[TransitionRow]:
        """Direct lines with |C| above threshold, 8 per polarization at high field.

        Ground-state mixing gives the crossed (m_I changing) lines couplings up to ~0.3
        near 0.4 T. They stay in the table but never count as strong.
        """
        return [row for row in self.rows
                if row.direct and abs(row.coupling) > threshold and (q is None or row.polarization == q)]

    def find(self, alpha: int, beta: int, q: int) -> Optional[TransitionRow]:
        for row in self.rows:
            if row.key == (alpha, beta, q):
                return row
        return None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{
            "label": row.label,
            "alpha": row.alpha,
            "beta": row.beta,
            "polarization": row.polarization,
            "detuning_MHz": row.detuning_mhz,
            "coupling": row.coupling,
            "ground_mI": row.ground_label[0],
            "ground_mJ": row.ground_label[1],
            "excited_mI": row.excited_label[0],
            "excited_mJ": row.excited_label[1],
        } for row in self.rows])

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        try:
            self.to_frame().to_csv(path, index=False, float_format="%.6f")
        except OSError as e:
            raise DataIOError(f"Could not write transition table to {path}: {e}") from e
        return path


def transition_table(field: float, constants: AtomicConstants, c_min: float = 1e-6) -> TransitionTable:
    """σ± lines with |C| > c_min, sorted by detuning (MHz from line centre)."""
    ground = eigensystem("ground", field, constants)
    excited = eigensystem("excited", field, constants)
    couplings = coupling_matrices(ground, excited, constants)
    n_ground = len(ground.energies)
    rows = []
    for q in (-1, 1):
        matrix = couplings[q]
        for b, a in zip(*np.nonzero(np.abs(matrix) > c_min)):
            rows.append(TransitionRow(
                alpha=int(a) + 1,
                beta=int(b) + n_ground + 1,
                polarization=q,
                detuning_mhz=float(excited.energies[b] - ground.energies[a]),
                coupling=float(matrix[b, a]),
                ground_label=ground.basis[a],
                excited_label=excited.basis[b],
            ))
    rows.sort(key=lambda row: (row.detuning_mhz, row.polarization, row.alpha))
    return TransitionTable(field=field, rows=tuple(rows), ground=ground, excited=excited, couplings=couplings)


def line_detunings(field: float, keys: Sequence[Tuple[int, int]], constants: AtomicConstants) -> np.ndarray:
    """E_beta - E_alpha for (alpha, beta) index pairs without building couplings."""
    ground = eigensystem("ground", field, constants)
    excited = eigensystem("excited", field, constants)
    n_ground = len(ground.energies)
    alpha = np.array([k[0] for k in keys], dtype=int) - 1
    beta = np.array([k[1] for k in keys], dtype=int) - n_ground - 1
    return excited.energies[beta] - ground.energies[alpha]
