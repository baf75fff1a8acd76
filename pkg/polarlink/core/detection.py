"""
Detector click streams.

A photon reaching an analysis module passes the analyzer with its Born-rule
probability, clicks with the detector efficiency, and is time-stamped with
Gaussian jitter before the time tagger quantizes it to a bin index. Dark
counts are an independent Poisson process over the detection interval.

For the travelling photon the analyzer probability is conditioned on what
happened to its partner at the local analyzer (passed, blocked, or lost
before the analyzer), so simulated coincidences follow the joint statistics
of the two-photon state rather than the product of the marginals.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from ..utils.rng import substream
from . import constants
from .errors import ConfigError
from .fibre_channel import PhotonBatch
from .quantum_state import (
    IDENTITY_2,
    PolarizationBasisSetting,
    PoincareRotation,
    TwoPhotonState,
    partial_trace,
    projector,
    su2_from_rotvecs,
)

logger = logging.getLogger(__name__)

SIDES = {"local": 0, "remote": 1}

# Partner outcome codes for conditional detection
PARTNER_PASSED = 0
PARTNER_BLOCKED = 1
PARTNER_ABSENT = 2


@dataclass(frozen=True)
class DetectorConfig:
    """SNSPD behind a half-wave plate and PBS; ``jitter_fwhm_ps`` covers detection and tagging."""

    efficiency: float
    dark_rate: float
    jitter_fwhm_ps: float = constants.DETECTOR_JITTER_FWHM_PS
    label: str = "detector"
    channel: int = 0
    analyzer_contrast: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ConfigError(f"must be in [0, 1], got {self.efficiency}", f"{self.label}.efficiency")
        if not self.dark_rate >= 0:
            raise ConfigError(f"must be >= 0, got {self.dark_rate}", f"{self.label}.dark_rate")
        if not self.jitter_fwhm_ps >= 0:
            raise ConfigError(f"must be >= 0, got {self.jitter_fwhm_ps}", f"{self.label}.jitter_fwhm")
        if not 0 <= self.channel <= 255:
            raise ConfigError(f"must fit in one byte, got {self.channel}", f"{self.label}.channel")
        if not 0.0 <= self.analyzer_contrast <= 1.0:
            raise ConfigError(f"must be in [0, 1], got {self.analyzer_contrast}", f"{self.label}.analyzer_contrast")


def local_detector(**overrides) -> DetectorConfig:
    params = {
        "efficiency": constants.LOCAL_EFFICIENCY,
        "dark_rate": constants.LOCAL_DARK_RATE,
        "label": "detector_local",
        "channel": constants.LOCAL_CHANNEL,
    }
    params.update(overrides)
    return DetectorConfig(**params)


def remote_detector(**overrides) -> DetectorConfig:
    params = {
        "efficiency": constants.REMOTE_EFFICIENCY,
        "dark_rate": constants.REMOTE_DARK_RATE,
        "label": "detector_remote",
        "channel": constants.REMOTE_CHANNEL,
    }
    params.update(overrides)
    return DetectorConfig(**params)


@dataclass(frozen=True)
class TaggerConfig:
    """Time-tagging unit. Sync jitter applies to the long-delay (remote) channel only."""

    bin_width_ps: float = constants.TAGGER_BIN_PS
    sync_jitter_fwhm_ps: float = constants.SYNC_JITTER_FWHM_PS
    channel_count: int = constants.TAGGER_CHANNELS

    def __post_init__(self):
        if not self.bin_width_ps > 0 or round(self.bin_width_ps * constants.FS_PER_PS) < 1:
            raise ConfigError(f"must be positive and at least 1 fs, got {self.bin_width_ps}", "tagger.bin_width")
        if not self.sync_jitter_fwhm_ps >= 0:
            raise ConfigError(f"must be >= 0, got {self.sync_jitter_fwhm_ps}", "tagger.sync_jitter_fwhm")

    @property
    def bin_width_fs(self) -> int:
        return int(round(self.bin_width_ps * constants.FS_PER_PS))


class TimeTagStream:
    """Ordered detector clicks stored as tagger bin indices.

    Timestamps are ``bins * bin_width``; the bin width is kept in integer
    femtoseconds so no rounding accumulates over long runs.
    """

    def __init__(self, bins, channels=None, bin_width_fs: int = 82300, validate: bool = True):
        self.bins = np.ascontiguousarray(bins, dtype=np.int64)
        if channels is None:
            channels = np.zeros(self.bins.shape[0], dtype=np.uint8)
        self.channels = np.ascontiguousarray(channels, dtype=np.uint8)
        self.bin_width_fs = int(bin_width_fs)
        if self.bin_width_fs <= 0:
            raise ValueError(f"bin width must be positive, got {bin_width_fs} fs")
        if self.channels.shape != self.bins.shape:
            raise ValueError("bins and channels must have the same length")
        if validate and self.bins.size > 1 and np.any(np.diff(self.bins) < 0):
            raise ValueError("time tags are not sorted")

    def __len__(self) -> int:
        return int(self.bins.shape[0])

    def __repr__(self) -> str:
        return f"TimeTagStream({len(self)} tags, bin_width={self.bin_width_ps:g} ps)"

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, TimeTagStream)
            and self.bin_width_fs == other.bin_width_fs
            and np.array_equal(self.bins, other.bins)
            and np.array_equal(self.channels, other.channels)
        )

    @property
    def bin_width_ps(self) -> float:
        return self.bin_width_fs / constants.FS_PER_PS

    @property
    def times_ps(self) -> np.ndarray:
        return self.bins * self.bin_width_ps

    @classmethod
    def empty(cls, bin_width_fs: int = 82300) -> "TimeTagStream":
        return cls(np.empty(0, np.int64), np.empty(0, np.uint8), bin_width_fs)

    @classmethod
    def merge(cls, streams: list["TimeTagStream"]) -> "TimeTagStream":
        """Merge streams of equal bin width into one ordered stream (stable for ties)."""
        if not streams:
            raise ValueError("nothing to merge")
        widths = {s.bin_width_fs for s in streams}
        if len(widths) != 1:
            raise ValueError(f"cannot merge streams with different bin widths: {sorted(widths)} fs")
        bins = np.concatenate([s.bins for s in streams])
        channels = np.concatenate([s.channels for s in streams])
        order = np.argsort(bins, kind="stable")
        return cls(bins[order], channels[order], widths.pop(), validate=False)

    def first_bin_at_or_after(self, time_ps: float) -> int:
        """Smallest bin index whose timestamp is >= ``time_ps``."""
        return -((-int(round(time_ps)) * constants.FS_PER_PS) // self.bin_width_fs)

    def between(self, start_ps: float, end_ps: float) -> "TimeTagStream":
        """Tags with start <= t < end, as a view."""
        lo = int(np.searchsorted(self.bins, self.first_bin_at_or_after(start_ps), side="left"))
        hi = int(np.searchsorted(self.bins, self.first_bin_at_or_after(end_ps), side="left"))
        return TimeTagStream(self.bins[lo:hi], self.channels[lo:hi], self.bin_width_fs, validate=False)

    def channel(self, channel: int) -> "TimeTagStream":
        mask = self.channels == channel
        return TimeTagStream(self.bins[mask], self.channels[mask], self.bin_width_fs, validate=False)


@dataclass(eq=False)
class DetectionResult:
    stream: TimeTagStream
    analyzer_pass: np.ndarray
    clicked_pair_ids: np.ndarray
    dark_count: int


def quantize(arrival_ps: np.ndarray, offset_ps: np.ndarray, bin_width_fs: int) -> np.ndarray:
    """Tagger bin of ``arrival + offset``: floor((arrival + offset) / bin_width).

    The integer arrival is split as ``hi * bin_width_fs + lo`` so the float part
    stays small and exact over arbitrarily long runs.
    """
    hi, lo = np.divmod(np.asarray(arrival_ps, dtype=np.int64), np.int64(bin_width_fs))
    frac = np.floor((lo + np.asarray(offset_ps, dtype=float)) * constants.FS_PER_PS / bin_width_fs)
    return hi * constants.FS_PER_PS + frac.astype(np.int64)


def single_sided_click_probability(
    state: TwoPhotonState,
    basis: PolarizationBasisSetting,
    rotation: PoincareRotation | None = None,
    *,
    side: int = 1,
    contrast: float = 1.0,
) -> float:
    """Analyzer pass probability of one photon, ignoring its partner.

    Traces out the partner, applies ``rotation`` to the remaining photon and
    projects on ``basis``.
    """
    reduced = partial_trace(state, keep=side)
    if rotation is not None:
        u = rotation.su2()
        reduced = u @ reduced @ u.conj().T
    return float(np.clip(np.real(np.trace(reduced @ projector(basis, contrast))), 0.0, 1.0))


def conditional_operators(
    state: TwoPhotonState,
    side: int,
    partner_setting: PolarizationBasisSetting | None,
    contrast: float = 1.0,
) -> np.ndarray:
    """Normalized states (3, 2, 2) of photon ``side`` given the partner passed, was blocked, or was lost."""
    r = state.rho.reshape(2, 2, 2, 2)
    marginal = partial_trace(state, keep=side)
    if partner_setting is None:
        return np.stack([marginal, marginal, marginal])

    p = projector(partner_setting, contrast)
    ops = []
    for q in (p, IDENTITY_2 - p):
        if side == 1:
            sigma = np.einsum("ijml,mi->jl", r, q)
        else:
            sigma = np.einsum("ijkm,mj->ik", r, q)
        weight = np.real(np.trace(sigma))
        ops.append(sigma / weight if weight > 1e-15 else marginal)
    ops.append(marginal)
    return np.stack(ops)


def pass_probabilities(
    photons: PhotonBatch,
    basis: PolarizationBasisSetting,
    side: int,
    contrast: float = 1.0,
    partner_setting: PolarizationBasisSetting | None = None,
    partner_outcome: np.ndarray | None = None,
) -> np.ndarray:
    """Per-photon analyzer pass probability including each photon's rotation."""
    n = len(photons)
    if n == 0:
        return np.empty(0)
    sigmas = conditional_operators(photons.state, side, partner_setting, contrast)
    outcome = (
        np.full(n, PARTNER_ABSENT, dtype=np.int8) if partner_outcome is None else np.asarray(partner_outcome)
    )
    u = su2_from_rotvecs(photons.rotvec)
    w = np.einsum("nji,jk,nkl->nil", u.conj(), projector(basis, contrast), u)
    prob = np.real(np.einsum("nil,nli->n", sigmas[outcome], w))
    return np.clip(prob, 0.0, 1.0)


def jitter_sigma_ps(det: DetectorConfig, tagger: TaggerConfig, apply_sync: bool) -> float:
    fwhm_sq = det.jitter_fwhm_ps**2 + (tagger.sync_jitter_fwhm_ps**2 if apply_sync else 0.0)
    return math.sqrt(fwhm_sq) / constants.FWHM_PER_SIGMA


def detect_with_outcomes(
    photons: PhotonBatch,
    basis: PolarizationBasisSetting,
    det: DetectorConfig,
    tagger: TaggerConfig,
    duration: float,
    seed: int,
    *,
    start_ps: int = 0,
    side: str = "remote",
    apply_sync: bool | None = None,
    partner_setting: PolarizationBasisSetting | None = None,
    partner_outcome: np.ndarray | None = None,
    stream_key: tuple[int, ...] = (0, 0),
) -> DetectionResult:
    """Turn photons into detector clicks and add dark counts.

    Args:
        photons: Photons at the analyzer, ordered by arrival
        basis: Physical analyzer setting
        det: Detector parameters
        tagger: Time tagger parameters
        duration: Length in seconds of the dark-count interval [start, start + duration)
        seed: Run seed
        start_ps: Start of the dark-count interval
        side: "local" (first tensor factor) or "remote" (second)
        apply_sync: Add the tagger's clock-sync jitter; defaults to True for the remote side
        partner_setting: Analyzer setting the partner photon met
        partner_outcome: Per-photon PARTNER_* codes

    Returns:
        DetectionResult with the merged stream and per-photon analyzer outcomes
    """
    if side not in SIDES:
        raise ValueError(f"side must be 'local' or 'remote', got {side!r}")
    if apply_sync is None:
        apply_sync = side == "remote"
    bw_fs = tagger.bin_width_fs
    rng = substream(seed, f"detector_{side}", *stream_key)

    prob = pass_probabilities(photons, basis, SIDES[side], det.analyzer_contrast, partner_setting, partner_outcome)
    n = len(photons)
    analyzer_pass = rng.random(n) < prob
    click = analyzer_pass & (rng.random(n) < det.efficiency)
    jitter = rng.normal(0.0, jitter_sigma_ps(det, tagger, apply_sync), int(click.sum()))
    click_bins = quantize(photons.arrival_ps[click], jitter, bw_fs)
    clicked_ids = photons.pair_id[click]
    keep = click_bins >= 0
    click_bins, clicked_ids = click_bins[keep], clicked_ids[keep]

    dark_rng = substream(seed, f"dark_{side}", *stream_key)
    duration_ps = duration * constants.PS_PER_SECOND
    n_dark = int(dark_rng.poisson(det.dark_rate * duration)) if det.dark_rate > 0 and duration > 0 else 0
    dark_bins = quantize(np.full(n_dark, start_ps, dtype=np.int64), dark_rng.random(n_dark) * duration_ps, bw_fs)

    bins = np.concatenate([click_bins, dark_bins])
    order = np.argsort(bins, kind="stable")
    stream = TimeTagStream(bins[order], np.full(bins.shape[0], det.channel, dtype=np.uint8), bw_fs, validate=False)
    return DetectionResult(stream, analyzer_pass, clicked_ids, n_dark)


def detect(
    photons: PhotonBatch,
    basis: PolarizationBasisSetting,
    det: DetectorConfig,
    tagger: TaggerConfig,
    duration: float,
    seed: int,
    **kwargs,
) -> TimeTagStream:
    """Click stream of one detector; see ``detect_with_outcomes``."""
    return detect_with_outcomes(photons, basis, det, tagger, duration, seed, **kwargs).stream


def partner_outcomes(remote: PhotonBatch, local: PhotonBatch, local_pass: np.ndarray) -> np.ndarray:
    """PARTNER_* code for each remote photon from the local photons of the same pairs."""
    codes = np.full(len(remote), PARTNER_ABSENT, dtype=np.int8)
    if len(local) == 0 or len(remote) == 0:
        return codes
    order = np.argsort(local.pair_id, kind="stable")
    ids = local.pair_id[order]
    pos = np.clip(np.searchsorted(ids, remote.pair_id), 0, ids.shape[0] - 1)
    found = ids[pos] == remote.pair_id
    passed = local_pass[order][pos]
    codes[found & passed] = PARTNER_PASSED
    codes[found & ~passed] = PARTNER_BLOCKED
    return codes
