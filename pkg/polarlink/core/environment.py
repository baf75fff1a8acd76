"""
Thermal model of the fibre.

The optical delay of a fibre of length L is τ = n L / c. A uniform
temperature change ΔT alters both the index and the length, giving
Δτ = (L / c) (dn/dT + n α) ΔT.
"""

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import constants
from .errors import ConfigError

logger = logging.getLogger(__name__)

PROFILE_HEADER = "time_s,temp_offset_K"


@dataclass(frozen=True)
class ThermalConstants:
    alpha: float = constants.THERMAL_EXPANSION
    dn_dt: float = constants.THERMO_OPTIC
    group_index: float = constants.GROUP_INDEX
    length_m: float = constants.LOOP_LENGTH_M

    def __post_init__(self):
        for name in ("alpha", "dn_dt", "group_index", "length_m"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ConfigError(f"must be positive, got {value}", f"thermal.{name}")

    @property
    def sensitivity_ps_per_k(self) -> float:
        """Delay change per kelvin, (L/c)(dn/dT + n α) in ps/K."""
        transit_ps = self.length_m / constants.SPEED_OF_LIGHT * constants.PS_PER_SECOND
        return transit_ps * (self.dn_dt + self.group_index * self.alpha)


def delay_shift_from_temperature(dt_k, k: ThermalConstants | None = None):
    """Delay change in ps for a temperature change in kelvin (scalar or array)."""
    k = k or ThermalConstants()
    return k.sensitivity_ps_per_k * dt_k


def temperature_from_delay_shift(dtau_ps, k: ThermalConstants | None = None):
    """Temperature change in kelvin that explains a delay change in ps."""
    k = k or ThermalConstants()
    return dtau_ps / k.sensitivity_ps_per_k


def length_change(dt_k, k: ThermalConstants | None = None):
    """Fibre elongation in mm, L α ΔT."""
    k = k or ThermalConstants()
    return k.length_m * k.alpha * dt_k * 1e3


@dataclass(frozen=True, eq=False)
class TemperatureProfile:
    """Piecewise-linear temperature offset in kelvin versus time in seconds."""

    times_s: np.ndarray
    offsets_k: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times_s, dtype=float)
        offsets = np.asarray(self.offsets_k, dtype=float)
        if times.shape != offsets.shape or times.ndim != 1:
            raise ConfigError("times and offsets must be 1-D arrays of equal length", "temperature_profile")
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise ConfigError("profile times must be strictly increasing", "temperature_profile")
        object.__setattr__(self, "times_s", times)
        object.__setattr__(self, "offsets_k", offsets)

    def __len__(self) -> int:
        return int(self.times_s.size)

    def at(self, times_s) -> np.ndarray:
        """Offset at the given times, held constant outside the profile."""
        if len(self) == 0:
            return np.zeros_like(np.asarray(times_s, dtype=float))
        return np.interp(times_s, self.times_s, self.offsets_k)

    def scaled_in_time(self, factor: float) -> "TemperatureProfile":
        return TemperatureProfile(self.times_s * factor, self.offsets_k)


def ramp_profile(delta_k: float, start_s: float, end_s: float) -> TemperatureProfile:
    """Flat, then a linear ramp by ``delta_k`` between start and end, then flat."""
    if not end_s > start_s >= 0:
        raise ValueError(f"ramp needs 0 <= start < end, got {start_s}, {end_s}")
    if start_s == 0:
        return TemperatureProfile(np.array([0.0, end_s]), np.array([0.0, delta_k]))
    return TemperatureProfile(np.array([0.0, start_s, end_s]), np.array([0.0, 0.0, delta_k]))


def drift_trajectory(
    profile: TemperatureProfile, k: ThermalConstants | None = None
) -> Callable[[np.ndarray], np.ndarray]:
    """Delay offset in ps as a function of time in ps, for the fibre's thermal hook."""
    k = k or ThermalConstants()
    sensitivity = k.sensitivity_ps_per_k

    def shift(times_ps: np.ndarray) -> np.ndarray:
        t = np.asarray(times_ps, dtype=float)
        if len(profile) == 0:
            return np.zeros_like(t)
        return sensitivity * profile.at(t / constants.PS_PER_SECOND)

    return shift


def load_temperature_profile(path: str | Path) -> TemperatureProfile:
    """Read a ``time_s,temp_offset_K`` CSV."""
    path = Path(path)
    try:
        header = path.read_text().splitlines()[0].strip() if path.stat().st_size else ""
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}", "temperature_profile") from e
    if header != PROFILE_HEADER:
        raise ConfigError(f"{path}: expected header {PROFILE_HEADER!r}, got {header!r}", "temperature_profile")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.size == 0:
        return TemperatureProfile(np.empty(0), np.empty(0))
    logger.debug(f"Loaded temperature profile with {data.shape[0]} points from {path}")
    return TemperatureProfile(data[:, 0], data[:, 1])


def write_temperature_profile(path: str | Path, profile: TemperatureProfile) -> None:
    data = np.column_stack([profile.times_s, profile.offsets_k])
    np.savetxt(path, data, fmt="%.9g", delimiter=",", header=PROFILE_HEADER, comments="")
