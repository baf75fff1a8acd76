"""
Physics figures of merit from coincidence counts.

Visibility, fidelity bound, QBER, accidental-coincidence model, fidelity
ceiling, sifted and asymptotic secure key rate, and rotation-angle
diagnostics. Analyzer settings in a ``MeasurementRecord`` are the labels the
experiment reports: a record is "correlated" when its two labels are
orthogonal (H-V, V-H, D-A, A-D) and "uncorrelated" when they coincide.
"""

import math
from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.optimize import bisect
from scipy.special import entr, erf

from . import constants
from .errors import UndefinedVisibilityError
from .quantum_state import PolarizationBasisSetting

FAMILIES = {"H": "H-V", "V": "H-V", "D": "D-A", "A": "D-A"}
CHSH_FIDELITY = 1.0 / math.sqrt(2.0)


def _setting(value: PolarizationBasisSetting | str) -> PolarizationBasisSetting:
    return PolarizationBasisSetting.from_label(value) if isinstance(value, str) else value


@dataclass(frozen=True)
class MeasurementRecord:
    """Counts of one measurement block with fixed analyzer labels."""

    basis_a: PolarizationBasisSetting
    basis_b: PolarizationBasisSetting
    duration_s: float
    coincidences: int
    singles_a: int = 0
    singles_b: int = 0

    def __post_init__(self):
        object.__setattr__(self, "basis_a", _setting(self.basis_a))
        object.__setattr__(self, "basis_b", _setting(self.basis_b))
        if not self.duration_s > 0:
            raise ValueError(f"duration must be positive, got {self.duration_s}")
        if min(self.coincidences, self.singles_a, self.singles_b) < 0:
            raise ValueError("counts must be non-negative")

    @property
    def labels(self) -> str:
        return f"{self.basis_a.label}-{self.basis_b.label}"

    @property
    def family(self) -> str:
        """Basis family, ``H-V`` or ``D-A``; raises ValueError for settings outside the protocol."""
        fa, fb = FAMILIES.get(self.basis_a.label), FAMILIES.get(self.basis_b.label)
        if fa is None or fa != fb:
            raise ValueError(f"record {self.labels} does not belong to the H-V or D-A family")
        return fa

    @property
    def is_correlated(self) -> bool:
        return self.basis_a.orthogonal() == self.basis_b

    @property
    def coincidence_rate(self) -> float:
        return self.coincidences / self.duration_s

    @property
    def singles_rate_a(self) -> float:
        return self.singles_a / self.duration_s

    @property
    def singles_rate_b(self) -> float:
        return self.singles_b / self.duration_s


@dataclass(frozen=True)
class VisibilityResult:
    basis_pair: str
    visibility: float
    stderr: float

    def __post_init__(self):
        if not -1.0 <= self.visibility <= 1.0:
            raise ValueError(f"visibility must be in [-1, 1], got {self.visibility}")


@dataclass(frozen=True)
class KeyRateEstimate:
    sifted_rate: float
    qber: float
    secure_rate: float
    ec_efficiency: float = constants.EC_EFFICIENCY
    qber_stderr: float = 0.0

    def __post_init__(self):
        if self.secure_rate < 0:
            raise ValueError(f"secure rate must be >= 0, got {self.secure_rate}")
        if not 0.0 <= self.qber <= 0.5:
            raise ValueError(f"QBER must be in [0, 0.5], got {self.qber}")


class RotationConvention(str, Enum):
    COSINE = "cosine"
    QBER_SIN2 = "qber-sin2"


def visibility(records: Sequence[MeasurementRecord]) -> VisibilityResult:
    """Visibility of one basis family from its four records.

    V = (C_corr - C_uncorr) / (C_corr + C_uncorr) on duration-normalized
    coincidence rates, with the standard error propagated from Poisson counts.

    Raises:
        ValueError: not four records of one family with two correlated and two uncorrelated
        UndefinedVisibilityError: all four records hold zero coincidences
    """
    if len(records) != 4:
        raise ValueError(f"visibility needs 4 records, got {len(records)}")
    families = {r.family for r in records}
    if len(families) != 1:
        raise ValueError(f"records mix basis families {sorted(families)}")
    corr = [r for r in records if r.is_correlated]
    uncorr = [r for r in records if r.basis_a == r.basis_b]
    if len(corr) != 2 or len(uncorr) != 2:
        raise ValueError(f"expected two correlated and two uncorrelated records, got {[r.labels for r in records]}")

    rc = sum(r.coincidence_rate for r in corr)
    ru = sum(r.coincidence_rate for r in uncorr)
    total = rc + ru
    if total <= 0:
        raise UndefinedVisibilityError(f"no coincidences in the {families.pop()} records")
    var_c = sum(r.coincidences / r.duration_s**2 for r in corr)
    var_u = sum(r.coincidences / r.duration_s**2 for r in uncorr)
    stderr = 2.0 / total**2 * math.sqrt(ru**2 * var_c + rc**2 * var_u)
    return VisibilityResult(families.pop(), (rc - ru) / total, stderr)


def fidelity_lower_bound(v_hv: float, v_da: float) -> float:
    """Bell-state fidelity bound: the mean of the H-V and D-A visibilities."""
    for v in (v_hv, v_da):
        if not -1.0 <= v <= 1.0:
            raise ValueError(f"visibility must be in [-1, 1], got {v}")
    return (v_hv + v_da) / 2.0


def qber_from_visibility(v: float) -> float:
    if not -1.0 <= v <= 1.0:
        raise ValueError(f"visibility must be in [-1, 1], got {v}")
    return min(max((1.0 - v) / 2.0, 0.0), 0.5)


def accidental_rate(s1: float, s2: float, window_ps: float) -> float:
    """Uncorrelated coincidences per second: s1 · s2 · window."""
    if s1 < 0 or s2 < 0 or window_ps < 0:
        raise ValueError("rates and window must be non-negative")
    return s1 * s2 * window_ps / constants.PS_PER_SECOND


def fidelity_ceiling(
    local_fidelity: float,
    true_coinc_rate: float,
    s1: float,
    s2: float,
    window_ps: float,
    measured_accidental_rate: float | None = None,
) -> float:
    """Best reachable fidelity when accidentals add maximally mixed pairs.

    F_max = (F_local · C_true + C_acc / 4) / (C_true + C_acc). C_acc is the
    product-formula accidental rate unless a measured rate is given.
    """
    if true_coinc_rate < 0 or (measured_accidental_rate is not None and measured_accidental_rate < 0):
        raise ValueError("rates must be non-negative")
    c_acc = accidental_rate(s1, s2, window_ps) if measured_accidental_rate is None else measured_accidental_rate
    total = true_coinc_rate + c_acc
    if total == 0:
        return local_fidelity
    return (local_fidelity * true_coinc_rate + 0.25 * c_acc) / total


def sifted_rate(records: Sequence[MeasurementRecord]) -> float:
    """One fourth of the summed coincidence rates of the eight protocol blocks."""
    if len(records) != 8:
        raise ValueError(f"sifted rate needs the 8 protocol records, got {len(records)}")
    return sum(r.coincidence_rate for r in records) / 4.0


def binary_entropy(x):
    """H2(x) in bits; H2(0) = H2(1) = 0. Accepts scalars and arrays."""
    arr = np.asarray(x, dtype=float)
    if np.any((arr < 0) | (arr > 1)):
        raise ValueError("binary entropy argument must be in [0, 1]")
    h = (entr(arr) + entr(1.0 - arr)) / math.log(2.0)
    return float(h) if h.ndim == 0 else h


def secure_rate(sifted: float, qber: float, f: float = constants.EC_EFFICIENCY) -> float:
    """Asymptotic secure key rate max(0, R · (1 - f·H2(e) - H2(e)))."""
    if not 0.0 <= qber <= 0.5:
        raise ValueError(f"QBER must be in [0, 0.5], got {qber}")
    if sifted < 0:
        raise ValueError(f"sifted rate must be >= 0, got {sifted}")
    h = binary_entropy(qber)
    return max(0.0, sifted * (1.0 - f * h - h))


def zero_key_qber(f: float = constants.EC_EFFICIENCY, xtol: float = 1e-10) -> float:
    """QBER at which the secure rate reaches zero, located by bisection."""
    if not f > 0:
        raise ValueError(f"error-correction efficiency must be positive, got {f}")
    return float(bisect(lambda e: 1.0 - (1.0 + f) * binary_entropy(e), 1e-12, 0.5, xtol=xtol))


def minimum_key_fidelity(f: float = constants.EC_EFFICIENCY) -> float:
    """Fidelity bound below which no key is distilled: 1 - 2·e*(f)."""
    return 1.0 - 2.0 * zero_key_qber(f)


def certifies_entanglement(fidelity: float) -> bool:
    """Whether the fidelity exceeds the CHSH-violation threshold 1/√2."""
    return fidelity > CHSH_FIDELITY


def rotation_angle_from_visibility_drop(
    v_ref: float, v_obs: float, convention: RotationConvention | str = RotationConvention.COSINE
) -> float:
    """Poincaré rotation in degrees that explains a visibility drop.

    COSINE: arccos(v_obs / v_ref). QBER_SIN2: 2·arcsin(sqrt((v_ref - v_obs) / 2)).
    """
    convention = RotationConvention(convention)
    if v_obs > v_ref:
        raise ValueError(f"observed visibility {v_obs} exceeds reference {v_ref}")
    if not (0.0 < v_obs and v_ref <= 1.0):
        raise ValueError(f"visibilities must satisfy 0 < v_obs <= v_ref <= 1, got {v_obs}, {v_ref}")
    if convention is RotationConvention.COSINE:
        return math.degrees(math.acos(min(1.0, v_obs / v_ref)))
    return 2.0 * math.degrees(math.asin(math.sqrt((v_ref - v_obs) / 2.0)))


def window_efficiency(window_ps: float, timing_fwhm_ps: float) -> float:
    """Fraction of a Gaussian coincidence peak inside a centred window."""
    if window_ps < 0 or not timing_fwhm_ps > 0:
        raise ValueError("window must be >= 0 and the timing FWHM positive")
    return float(erf(math.sqrt(math.log(2.0)) * window_ps / timing_fwhm_ps))


def combined_timing_fwhm(*fwhm_ps: float) -> float:
    """Quadrature sum of independent Gaussian timing contributions."""
    return math.sqrt(sum(f * f for f in fwhm_ps))


def estimate_key_rate(records: Sequence[MeasurementRecord], f: float = constants.EC_EFFICIENCY) -> KeyRateEstimate:
    """Sifted rate, QBER and secure rate of one eight-block cycle.

    The QBER is that of the fidelity bound, i.e. the mean of the H-V and D-A
    error rates.
    """
    sifted = sifted_rate(records)
    by_family: dict[str, list[MeasurementRecord]] = {}
    for r in records:
        by_family.setdefault(r.family, []).append(r)
    if sorted(by_family) != ["D-A", "H-V"]:
        raise ValueError(f"expected H-V and D-A records, got {sorted(by_family)}")
    v_hv = visibility(by_family["H-V"])
    v_da = visibility(by_family["D-A"])
    qber = qber_from_visibility(fidelity_lower_bound(v_hv.visibility, v_da.visibility))
    qber_err = math.hypot(v_hv.stderr, v_da.stderr) / 4.0
    return KeyRateEstimate(sifted, qber, secure_rate(sifted, qber, f), f, qber_err)
