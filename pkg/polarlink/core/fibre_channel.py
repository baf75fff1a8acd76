"""
Deployed-fibre impairments for the travelling photon.

``propagate`` thins pair emissions by the link transmission, delays the
survivors by the group delay plus a chromatic-dispersion shift and an optional
thermal shift, and attaches the Poincaré rotation the fibre birefringence
applies at emission time.
"""

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from ..utils.rng import substream
from . import constants
from .errors import ConfigError
from .pair_source import PairBatch
from .quantum_state import PoincareRotation, TwoPhotonState

logger = logging.getLogger(__name__)

# times_ps -> values, evaluated per photon
TimeFunction = Callable[[np.ndarray], np.ndarray]

DELAY_CONSISTENCY_TOL = 1e-3


def _default_residual() -> PoincareRotation:
    return PoincareRotation.from_rotvec(constants.RESIDUAL_ROTVEC_DEG, degrees=True)


@dataclass(frozen=True)
class ChannelConfig:
    """Fibre link parameters.

    ``birefringence_trajectory`` maps emission times (ps) to rotation vectors
    (N, 3) in radians. When unset the link applies the constant
    ``residual_rotation``. The drift fields configure the random-walk
    trajectory the harness builds for a run.
    """

    length_m: float = constants.LOOP_LENGTH_M
    loss_db: float = constants.LOOP_LOSS_DB
    base_delay_ps: float = constants.BASE_DELAY_PS
    dispersion_fwhm_ps: float = constants.DISPERSION_FWHM_PS
    dispersion_sign: int = 1
    group_index: float = constants.GROUP_INDEX
    residual_rotation: PoincareRotation = field(default_factory=_default_residual)
    drift_speed_deg_per_sqrt_h: float = constants.DRIFT_SPEED_DEG_PER_SQRT_H
    drift_cap_deg: float = constants.DRIFT_CAP_DEG
    drift_step_s: float = constants.DRIFT_STEP_S
    birefringence_trajectory: TimeFunction | None = field(default=None, compare=False, repr=False)
    thermal_shift: TimeFunction | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.loss_db >= 0:
            raise ConfigError(f"must be >= 0, got {self.loss_db}", "channel.loss_db")
        if not self.length_m >= 0:
            raise ConfigError(f"must be >= 0, got {self.length_m}", "channel.length")
        if not self.dispersion_fwhm_ps >= 0:
            raise ConfigError(f"must be >= 0, got {self.dispersion_fwhm_ps}", "channel.dispersion_fwhm")
        if self.dispersion_sign not in (1, -1):
            raise ConfigError(f"must be +1 or -1, got {self.dispersion_sign}", "channel.dispersion_sign")
        if not self.group_index > 0:
            raise ConfigError(f"must be positive, got {self.group_index}", "channel.group_index")
        if self.drift_cap_deg < 0 or self.drift_speed_deg_per_sqrt_h < 0 or self.drift_step_s <= 0:
            raise ConfigError("drift speed and cap must be >= 0 and the step positive", "channel.drift")
        expected = self.expected_delay_ps
        if abs(self.base_delay_ps - expected) > DELAY_CONSISTENCY_TOL * expected or (
            expected == 0 and self.base_delay_ps != 0
        ):
            raise ConfigError(
                f"{self.base_delay_ps:.6g} ps is inconsistent with group_index × length / c = {expected:.6g} ps",
                "channel.base_delay",
            )

    @property
    def expected_delay_ps(self) -> float:
        return self.group_index * self.length_m / constants.SPEED_OF_LIGHT * constants.PS_PER_SECOND

    @property
    def transmission(self) -> float:
        return transmission_from_db(self.loss_db)

    @classmethod
    def for_delay(cls, base_delay_ps: float, **overrides) -> "ChannelConfig":
        """Channel whose length matches ``base_delay_ps`` at the configured group index."""
        group_index = overrides.pop("group_index", constants.GROUP_INDEX)
        length = base_delay_ps / constants.PS_PER_SECOND * constants.SPEED_OF_LIGHT / group_index
        return cls(length_m=length, base_delay_ps=base_delay_ps, group_index=group_index, **overrides)

    @classmethod
    def local_arm(cls, coupling: float) -> "ChannelConfig":
        """Zero-length arm to the local analyzer with transmission ``coupling``."""
        loss = math.inf if coupling <= 0 else max(0.0, -10.0 * math.log10(coupling))
        return cls(
            length_m=0.0,
            loss_db=loss,
            base_delay_ps=0.0,
            dispersion_fwhm_ps=0.0,
            residual_rotation=PoincareRotation.identity(),
            drift_speed_deg_per_sqrt_h=0.0,
            drift_cap_deg=0.0,
        )

    def with_hooks(
        self, trajectory: TimeFunction | None = None, thermal_shift: TimeFunction | None = None
    ) -> "ChannelConfig":
        return replace(self, birefringence_trajectory=trajectory, thermal_shift=thermal_shift)


@dataclass(eq=False)
class PhotonBatch:
    """Photons at a detector input, time-ordered by arrival."""

    pair_id: np.ndarray
    emission_ps: np.ndarray
    arrival_ps: np.ndarray
    rotvec: np.ndarray
    state: TwoPhotonState = field(repr=False)

    def __len__(self) -> int:
        return int(self.arrival_ps.shape[0])

    def take(self, index: np.ndarray) -> "PhotonBatch":
        return PhotonBatch(
            self.pair_id[index], self.emission_ps[index], self.arrival_ps[index], self.rotvec[index], self.state
        )

    @classmethod
    def at_times(
        cls, arrival_ps: np.ndarray, state: TwoPhotonState, rotation: PoincareRotation | None = None
    ) -> "PhotonBatch":
        """Photons arriving at given times, e.g. a test source with no fibre."""
        arrival = np.asarray(arrival_ps, dtype=np.int64)
        n = arrival.shape[0]
        rot = rotation.as_rotvec() if rotation is not None else np.zeros(3)
        return cls(np.arange(n, dtype=np.int64), arrival.copy(), arrival, np.tile(rot, (n, 1)), state)


def transmission_from_db(loss_db: float) -> float:
    """Power transmission for a loss in dB: 10^(-loss/10)."""
    if not loss_db >= 0:
        raise ValueError(f"loss must be >= 0 dB, got {loss_db}")
    return 10.0 ** (-loss_db / 10.0)


def dispersion_slope_ps_per_nm(cfg: ChannelConfig, spectral_fwhm_nm: float) -> float:
    """Delay per nm of wavelength offset giving an arrival spread of ``dispersion_fwhm_ps``."""
    if spectral_fwhm_nm <= 0:
        raise ValueError(f"spectral FWHM must be positive, got {spectral_fwhm_nm}")
    return cfg.dispersion_sign * cfg.dispersion_fwhm_ps / spectral_fwhm_nm


def propagate(
    events: PairBatch,
    cfg: ChannelConfig,
    seed: int,
    *,
    side: str = "remote",
    stream_key: tuple[int, ...] = (0, 0),
) -> PhotonBatch:
    """Send one photon of each pair through the channel.

    Args:
        events: Time-ordered pair emissions
        cfg: Channel parameters
        seed: Run seed
        side: "remote" for the fibre link, "local" for the analyzer arm
        stream_key: Extra stream indices, (block, chunk) in a run

    Returns:
        Surviving photons sorted by arrival time
    """
    rng = substream(seed, f"channel_{side}", *stream_key)
    n = len(events)
    survive = rng.random(n) < cfg.transmission
    emission = events.emission_ps[survive]
    offsets = events.signal_offset_nm[survive]

    shift = np.full(emission.shape[0], float(cfg.base_delay_ps))
    if cfg.dispersion_fwhm_ps > 0:
        shift += dispersion_slope_ps_per_nm(cfg, events.signal_fwhm_nm) * offsets
    if cfg.thermal_shift is not None and emission.size:
        shift += np.asarray(cfg.thermal_shift(emission.astype(float)), dtype=float)
    arrival = emission + np.rint(shift).astype(np.int64)

    if cfg.birefringence_trajectory is not None and emission.size:
        rotvec = np.asarray(cfg.birefringence_trajectory(emission.astype(float)), dtype=float).reshape(-1, 3)
    else:
        rotvec = np.tile(cfg.residual_rotation.as_rotvec(), (emission.shape[0], 1))

    photons = PhotonBatch(events.pair_id[survive], emission, arrival, rotvec, events.state)
    if arrival.size > 1 and np.any(np.diff(arrival) < 0):
        photons = photons.take(np.argsort(arrival, kind="stable"))
    return photons


class RandomWalkTrajectory:
    """Slow birefringence wander on the Poincaré sphere.

    Knots every ``step_s`` seconds follow a Gaussian random walk of rotation
    vectors, pulled back onto the ``cap_deg`` ball whenever they leave it.
    Rotations between knots are slerped. The static ``offset`` rotation is
    applied before the wander.
    """

    def __init__(
        self,
        seed: int,
        horizon_s: float,
        speed_deg_per_sqrt_h: float = constants.DRIFT_SPEED_DEG_PER_SQRT_H,
        cap_deg: float = constants.DRIFT_CAP_DEG,
        step_s: float = constants.DRIFT_STEP_S,
        offset: PoincareRotation | None = None,
    ):
        n_knots = max(2, math.ceil(horizon_s / step_s) + 2)
        rng = substream(seed, "birefringence")
        step_rad = math.radians(speed_deg_per_sqrt_h) * math.sqrt(step_s / 3600.0)
        cap = math.radians(cap_deg)
        increments = rng.normal(0.0, step_rad, (n_knots - 1, 3))

        knots = np.zeros((n_knots, 3))
        for k in range(1, n_knots):
            v = knots[k - 1] + increments[k - 1]
            norm = float(np.linalg.norm(v))
            if norm > cap:
                v *= cap / norm
            knots[k] = v

        self.step_s = step_s
        self.knots = knots
        self._times_s = np.arange(n_knots) * step_s
        self._slerp = Slerp(self._times_s, Rotation.from_rotvec(knots))
        self._offset = (offset or PoincareRotation.identity()).to_scipy()

    def __call__(self, times_ps: np.ndarray) -> np.ndarray:
        t = np.clip(np.asarray(times_ps, dtype=float) / constants.PS_PER_SECOND, 0.0, self._times_s[-1])
        return (self._slerp(t) * self._offset).as_rotvec().reshape(-1, 3)

    def rotation_at(self, time_s: float) -> PoincareRotation:
        return PoincareRotation.from_rotvec(self(np.array([time_s * constants.PS_PER_SECOND]))[0])

    def max_drift_deg(self) -> float:
        return float(np.degrees(np.linalg.norm(self.knots, axis=1).max()))
