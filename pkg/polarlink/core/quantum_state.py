"""
Two-photon polarization state algebra.

Conventions:
- Basis order is (HH, HV, VH, VV). The first factor is the photon analysed
  locally, the second is the photon that travels through the fibre.
- Linear polarizer at angle θ projects on (cos θ, sin θ), so H = 0°, V = 90°,
  D = 45°, A = -45°.
- Stokes axes are S1 = H/V, S2 = D/A, S3 = R/L with Pauli matrices
  σ1 = diag(1, -1), σ2 = [[0, 1], [1, 0]], σ3 = [[0, -i], [i, 0]].
- A Poincaré-sphere rotation by angle φ about unit axis n acts on the Jones
  vector as U = cos(φ/2) I - i sin(φ/2) (n · σ). The SU(2) angle is half the
  Poincaré angle, and U is an active right-handed rotation of the Stokes
  vector, matching ``scipy.spatial.transform.Rotation.from_rotvec``.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

HERMITIAN_TOL = 1e-12
TRACE_TOL = 1e-12
PSD_TOL = 1e-10

IDENTITY_2 = np.eye(2, dtype=complex)
SIGMA_1 = np.array([[1, 0], [0, -1]], dtype=complex)
SIGMA_2 = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_3 = np.array([[0, -1j], [1j, 0]], dtype=complex)
PAULI = np.stack([SIGMA_1, SIGMA_2, SIGMA_3])

LABEL_ANGLES = {"H": 0.0, "V": 90.0, "D": 45.0, "A": -45.0}

PHI_MINUS = np.array([-1.0, 0.0, 0.0, 1.0], dtype=complex) / math.sqrt(2.0)


def _normalize_angle(angle_deg: float) -> float:
    """Map an analyzer angle to (-90°, 90°]."""
    a = math.fmod(float(angle_deg) + 90.0, 180.0)
    if a <= 0.0:
        a += 180.0
    return a - 90.0


@dataclass(frozen=True)
class PolarizationBasisSetting:
    """Linear analyzer setting, stored as the polarizer angle in degrees."""

    angle_deg: float

    def __post_init__(self):
        object.__setattr__(self, "angle_deg", _normalize_angle(self.angle_deg))

    @classmethod
    def from_label(cls, label: str) -> "PolarizationBasisSetting":
        try:
            return cls(LABEL_ANGLES[label.strip().upper()])
        except KeyError:
            raise ValueError(f"unknown analyzer label {label!r}, expected one of H, V, D, A") from None

    @property
    def label(self) -> str:
        """Canonical letter for H/V/D/A settings, otherwise the angle."""
        for name, angle in LABEL_ANGLES.items():
            if math.isclose(self.angle_deg, _normalize_angle(angle), abs_tol=1e-9):
                return name
        return f"{self.angle_deg:g}deg"

    @property
    def jones(self) -> np.ndarray:
        theta = math.radians(self.angle_deg)
        return np.array([math.cos(theta), math.sin(theta)], dtype=complex)

    def orthogonal(self) -> "PolarizationBasisSetting":
        return PolarizationBasisSetting(self.angle_deg + 90.0)

    def __str__(self) -> str:
        return self.label


@dataclass(frozen=True, eq=False)
class TwoPhotonState:
    """Validated 4x4 density matrix over (HH, HV, VH, VV)."""

    rho: np.ndarray = field(repr=False)

    def __post_init__(self):
        rho = np.array(self.rho, dtype=complex)
        if rho.shape != (4, 4):
            raise ValueError(f"density matrix must be 4x4, got {rho.shape}")
        if np.max(np.abs(rho - rho.conj().T)) > HERMITIAN_TOL:
            raise ValueError("density matrix is not Hermitian")
        if abs(np.trace(rho) - 1.0) > TRACE_TOL:
            raise ValueError(f"density matrix trace is {np.trace(rho).real:.15g}, expected 1")
        if np.min(np.linalg.eigvalsh(rho)) < -PSD_TOL:
            raise ValueError("density matrix is not positive semidefinite")
        rho.setflags(write=False)
        object.__setattr__(self, "rho", rho)

    @property
    def purity(self) -> float:
        return float(np.real(np.trace(self.rho @ self.rho)))

    def __eq__(self, other: object) -> bool:
        return isinstance(other, TwoPhotonState) and np.array_equal(self.rho, other.rho)


@dataclass(frozen=True)
class PoincareRotation:
    """Rotation on the Poincaré sphere: unit axis (S1, S2, S3) and angle in degrees."""

    axis: tuple[float, float, float] = (1.0, 0.0, 0.0)
    angle_deg: float = 0.0

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float)
        if axis.shape != (3,):
            raise ValueError(f"rotation axis must be a 3-vector, got shape {axis.shape}")
        norm = float(np.linalg.norm(axis))
        if norm == 0.0:
            if self.angle_deg != 0.0:
                raise ValueError("rotation axis must be non-zero")
            axis, norm = np.array([1.0, 0.0, 0.0]), 1.0
        object.__setattr__(self, "axis", tuple(float(x) for x in axis / norm))
        object.__setattr__(self, "angle_deg", float(self.angle_deg))

    @classmethod
    def identity(cls) -> "PoincareRotation":
        return cls()

    @classmethod
    def from_rotvec(cls, rotvec, degrees: bool = False) -> "PoincareRotation":
        v = np.asarray(rotvec, dtype=float)
        angle = float(np.linalg.norm(v))
        if angle == 0.0:
            return cls()
        return cls(tuple(v / angle), angle if degrees else math.degrees(angle))

    def as_rotvec(self) -> np.ndarray:
        """Rotation vector in radians."""
        return np.asarray(self.axis) * math.radians(self.angle_deg)

    def to_scipy(self) -> Rotation:
        return Rotation.from_rotvec(self.as_rotvec())

    def inverse(self) -> "PoincareRotation":
        return PoincareRotation(self.axis, -self.angle_deg)

    def then(self, other: "PoincareRotation") -> "PoincareRotation":
        """This rotation followed by ``other``."""
        return PoincareRotation.from_rotvec((other.to_scipy() * self.to_scipy()).as_rotvec())

    def su2(self) -> np.ndarray:
        half = math.radians(self.angle_deg) / 2.0
        n_sigma = np.tensordot(np.asarray(self.axis), PAULI, axes=1)
        return math.cos(half) * IDENTITY_2 - 1j * math.sin(half) * n_sigma


def su2_from_rotvecs(rotvecs: np.ndarray) -> np.ndarray:
    """Jones matrices (N, 2, 2) for Poincaré rotation vectors (N, 3) in radians."""
    rotvecs = np.asarray(rotvecs, dtype=float).reshape(-1, 3)
    angles = np.linalg.norm(rotvecs, axis=1)
    safe = np.where(angles > 0.0, angles, 1.0)
    axes = rotvecs / safe[:, None]
    n_sigma = np.einsum("nk,kij->nij", axes, PAULI)
    half = angles / 2.0
    return np.cos(half)[:, None, None] * IDENTITY_2 - 1j * np.sin(half)[:, None, None] * n_sigma


def projector(setting: PolarizationBasisSetting, contrast: float = 1.0) -> np.ndarray:
    """Single-photon analyzer operator.

    ``contrast`` < 1 leaks the orthogonal polarization through the analyzer:
    (1 + c)/2 |θ⟩⟨θ| + (1 - c)/2 |θ⊥⟩⟨θ⊥|. Contrast 1 is the ideal projector.
    """
    if not 0.0 <= contrast <= 1.0:
        raise ValueError(f"analyzer contrast must be in [0, 1], got {contrast}")
    v = setting.jones
    w = setting.orthogonal().jones
    return (1.0 + contrast) / 2.0 * np.outer(v, v.conj()) + (1.0 - contrast) / 2.0 * np.outer(w, w.conj())


def partial_trace(state: TwoPhotonState | np.ndarray, keep: int) -> np.ndarray:
    """Reduced 2x2 density matrix of photon ``keep`` (0 = local, 1 = travelling)."""
    rho = state.rho if isinstance(state, TwoPhotonState) else np.asarray(state)
    r = rho.reshape(2, 2, 2, 2)
    if keep == 0:
        return np.einsum("ijkj->ik", r)
    if keep == 1:
        return np.einsum("ijil->jl", r)
    raise ValueError(f"keep must be 0 or 1, got {keep}")


def _hermitize(rho: np.ndarray) -> np.ndarray:
    return (rho + rho.conj().T) / 2.0


def make_phi_minus() -> TwoPhotonState:
    """Pure |Φ⁻⟩ = (|VV⟩ - |HH⟩)/√2."""
    return TwoPhotonState(np.outer(PHI_MINUS, PHI_MINUS.conj()))


def werner_mix(state: TwoPhotonState, p: float) -> TwoPhotonState:
    """Isotropic mixture p·rho + (1 - p)·I/4."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"mixing parameter must be in [0, 1], got {p}")
    return TwoPhotonState(p * state.rho + (1.0 - p) * np.eye(4) / 4.0)


def werner_parameter_for_fidelity(fidelity: float) -> float:
    """Mixing parameter giving |Φ⁻⟩ fidelity ``fidelity``: p = (4F - 1)/3."""
    if not 0.25 <= fidelity <= 1.0:
        raise ValueError(f"Werner fidelity must be in [0.25, 1], got {fidelity}")
    return (4.0 * fidelity - 1.0) / 3.0


def apply_one_sided_unitary(state: TwoPhotonState, rotation: PoincareRotation) -> TwoPhotonState:
    """Apply the fibre rotation to the travelling photon: (I ⊗ U) rho (I ⊗ U)†."""
    u = np.kron(IDENTITY_2, rotation.su2())
    return TwoPhotonState(_hermitize(u @ state.rho @ u.conj().T))


def coincidence_probability(
    state: TwoPhotonState,
    a: PolarizationBasisSetting,
    b: PolarizationBasisSetting,
    contrast: float = 1.0,
) -> float:
    """Probability that both analyzers pass: tr(rho · P_a ⊗ P_b)."""
    op = np.kron(projector(a, contrast), projector(b, contrast))
    return float(np.clip(np.real(np.trace(state.rho @ op)), 0.0, 1.0))


def fidelity_to_phi_minus(state: TwoPhotonState) -> float:
    """⟨Φ⁻|rho|Φ⁻⟩."""
    return float(np.clip(np.real(PHI_MINUS.conj() @ state.rho @ PHI_MINUS), 0.0, 1.0))
