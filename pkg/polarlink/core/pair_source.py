"""
CW-pumped SPDC pair source.

Pairs are emitted as a homogeneous Poisson process. Each pair carries its
emission time in integer picoseconds, the shared two-photon state and the
signal photon's wavelength offset from the filter centre. The signal photon
(ITU channel 32) is the one sent through the fibre.

Generation is chunked: the interval is cut into fixed-length chunks and each
chunk draws from its own stream ``substream(seed, "source", block, chunk)``,
so chunks can be produced in any order and concatenate to the same sequence.
"""

import logging
import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field

import numpy as np

from ..utils.rng import substream
from . import constants
from .errors import ConfigError
from .quantum_state import TwoPhotonState, make_phi_minus, werner_mix, werner_parameter_for_fidelity

logger = logging.getLogger(__name__)

# Pair ids are (chunk << CHUNK_ID_SHIFT) + index within the chunk
CHUNK_ID_SHIFT = 32


@dataclass(frozen=True)
class ItuChannel:
    """DWDM grid channel: number, centre wavelength and filter FWHM in nm."""

    number: int
    centre_nm: float
    fwhm_nm: float = constants.ITU_FILTER_FWHM_NM

    def __post_init__(self):
        if not self.fwhm_nm > 0:
            raise ConfigError(f"channel FWHM must be positive, got {self.fwhm_nm}", "fwhm_nm")

    @property
    def sigma_nm(self) -> float:
        return self.fwhm_nm / constants.FWHM_PER_SIGMA


ITU_32 = ItuChannel(32, constants.ITU_32_CENTRE_NM)
ITU_36 = ItuChannel(36, constants.ITU_36_CENTRE_NM)


@dataclass(frozen=True)
class SourceConfig:
    """Pair source parameters.

    ``remote_coupling`` is an effective efficiency correction applied on top of
    the measured link loss. It is not bounded by 1; see ``calibrate_rates``.
    """

    pair_rate: float = constants.PAIR_RATE
    local_fidelity: float = constants.LOCAL_FIDELITY
    signal_channel: ItuChannel = ITU_32
    idler_channel: ItuChannel = ITU_36
    local_coupling: float = constants.LOCAL_COUPLING
    remote_coupling: float = constants.REMOTE_COUPLING

    def __post_init__(self):
        if not self.pair_rate >= 0:
            raise ConfigError(f"must be >= 0, got {self.pair_rate}", "source.pair_rate")
        if not 0.25 <= self.local_fidelity <= 1.0:
            raise ConfigError(f"must be in [0.25, 1], got {self.local_fidelity}", "source.local_fidelity")
        if not 0.0 <= self.local_coupling <= 1.0:
            raise ConfigError(f"must be in [0, 1], got {self.local_coupling}", "source.local_coupling")
        if not self.remote_coupling >= 0:
            raise ConfigError(f"must be >= 0, got {self.remote_coupling}", "source.remote_coupling")

    def state(self) -> TwoPhotonState:
        """Emitted state: |Φ⁻⟩ mixed with white noise down to ``local_fidelity``."""
        return werner_mix(make_phi_minus(), werner_parameter_for_fidelity(self.local_fidelity))


@dataclass(frozen=True)
class PairEvent:
    emission_time_ps: int
    state: TwoPhotonState
    signal_wavelength_offset_nm: float
    pair_id: int


@dataclass(eq=False)
class PairBatch(Sequence):
    """Struct-of-arrays block of pair emissions sharing one state."""

    emission_ps: np.ndarray
    signal_offset_nm: np.ndarray
    pair_id: np.ndarray
    state: TwoPhotonState = field(repr=False)
    signal_fwhm_nm: float = constants.ITU_FILTER_FWHM_NM

    def __len__(self) -> int:
        return int(self.emission_ps.shape[0])

    def __getitem__(self, i):  # type: ignore[override]
        if isinstance(i, slice | np.ndarray):
            return PairBatch(
                self.emission_ps[i], self.signal_offset_nm[i], self.pair_id[i], self.state, self.signal_fwhm_nm
            )
        return PairEvent(int(self.emission_ps[i]), self.state, float(self.signal_offset_nm[i]), int(self.pair_id[i]))

    @classmethod
    def empty(cls, state: TwoPhotonState, signal_fwhm_nm: float = constants.ITU_FILTER_FWHM_NM) -> "PairBatch":
        return cls(np.empty(0, np.int64), np.empty(0, float), np.empty(0, np.int64), state, signal_fwhm_nm)

    @classmethod
    def concatenate(cls, batches: Sequence["PairBatch"]) -> "PairBatch":
        if not batches:
            raise ValueError("nothing to concatenate")
        first = batches[0]
        return cls(
            np.concatenate([b.emission_ps for b in batches]),
            np.concatenate([b.signal_offset_nm for b in batches]),
            np.concatenate([b.pair_id for b in batches]),
            first.state,
            first.signal_fwhm_nm,
        )


def chunk_bounds(start_ps: int, duration_ps: int, chunk_ps: int) -> list[tuple[int, int]]:
    """Cut [start, start + duration) into consecutive chunks of at most ``chunk_ps``."""
    if chunk_ps <= 0:
        raise ValueError(f"chunk length must be positive, got {chunk_ps}")
    end = start_ps + duration_ps
    return [(s, min(s + chunk_ps, end)) for s in range(start_ps, end, chunk_ps)]


def generate_chunk(
    cfg: SourceConfig,
    start_ps: int,
    end_ps: int,
    rng: np.random.Generator,
    chunk_index: int = 0,
    state: TwoPhotonState | None = None,
) -> PairBatch:
    """Emit the pairs of one chunk [start_ps, end_ps)."""
    state = state if state is not None else cfg.state()
    span = end_ps - start_ps
    n = int(rng.poisson(cfg.pair_rate * span / constants.PS_PER_SECOND)) if cfg.pair_rate > 0 else 0
    if n == 0:
        return PairBatch.empty(state, cfg.signal_channel.fwhm_nm)

    u = np.sort(rng.random(n))
    times = start_ps + np.floor(u * span).astype(np.int64)
    # integer ps can collide at high rates; nudge to strictly increasing
    idx = np.arange(n, dtype=np.int64)
    times = np.maximum.accumulate(times - idx) + idx

    offsets = rng.normal(0.0, cfg.signal_channel.sigma_nm, n)
    pair_id = (np.int64(chunk_index) << CHUNK_ID_SHIFT) + idx
    return PairBatch(times, offsets, pair_id, state, cfg.signal_channel.fwhm_nm)


def iter_pair_chunks(
    cfg: SourceConfig,
    duration: float,
    seed: int,
    chunk_seconds: float = 0.25,
    start_ps: int = 0,
    block: int = 0,
) -> Iterator[tuple[int, PairBatch]]:
    """Yield ``(chunk_index, batch)`` covering [start, start + duration) in order."""
    if not duration > 0:
        raise ValueError(f"duration must be positive, got {duration}")
    state = cfg.state()
    duration_ps = int(round(duration * constants.PS_PER_SECOND))
    chunk_ps = int(round(chunk_seconds * constants.PS_PER_SECOND))
    for chunk_index, (lo, hi) in enumerate(chunk_bounds(start_ps, duration_ps, chunk_ps)):
        rng = substream(seed, "source", block, chunk_index)
        yield chunk_index, generate_chunk(cfg, lo, hi, rng, _global_chunk(block, chunk_index), state)


def _global_chunk(block: int, chunk_index: int) -> int:
    # 2**20 chunks per block keeps pair ids unique across a run
    return (block << 20) + chunk_index


def generate_pairs(cfg: SourceConfig, duration: float, seed: int, chunk_seconds: float = 0.25) -> PairBatch:
    """Poisson pair emissions over [0, duration) seconds.

    Args:
        cfg: Source parameters
        duration: Interval length in seconds
        seed: Run seed
        chunk_seconds: Chunk length of the generation rule

    Returns:
        All pairs, time-ordered
    """
    batches = [batch for _, batch in iter_pair_chunks(cfg, duration, seed, chunk_seconds)]
    batch = PairBatch.concatenate(batches)
    logger.debug(
        f"Generated {len(batch)} pairs over {duration:g} s "
        f"(expected {cfg.pair_rate * duration:.0f} ± {math.sqrt(cfg.pair_rate * duration):.0f})"
    )
    return batch
