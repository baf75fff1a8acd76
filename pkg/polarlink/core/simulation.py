"""
End-to-end link simulation and the analytic rate model.

``run_simulation`` drives source, channel and detectors block by block and
chunk by chunk, writing one tag file per detector plus a run manifest.
Every chunk draws from its own random substreams keyed by (block, chunk), so
the output does not depend on how many workers process the chunks.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from itertools import islice
from pathlib import Path
from typing import Any

import numpy as np

from ..__version__ import __version__
from ..utils.manifest import file_entry, write_manifest
from ..utils.tagfile import SortedTagBuffer, TagFileWriter, read_tags, write_tags_csv
from . import constants
from .detection import DetectionResult, TimeTagStream, detect_with_outcomes, partner_outcomes
from .entanglement_metrics import accidental_rate, combined_timing_fwhm, window_efficiency
from .environment import drift_trajectory
from .errors import CalibrationError, TagFileError
from .fibre_channel import ChannelConfig, RandomWalkTrajectory, propagate
from .link_config import PROTOCOL_ORDER, LinkConfig, MeasurementBlock
from .pair_source import PairBatch, SourceConfig, chunk_bounds, iter_pair_chunks
from .quantum_state import TwoPhotonState, apply_one_sided_unitary, projector

logger = logging.getLogger(__name__)

TAGS_LOCAL = "tags_local.qtt"
TAGS_REMOTE = "tags_remote.qtt"

# Tags of later chunks never land more than this before the chunk start
WATERMARK_MARGIN_PS = 1e6


@dataclass(frozen=True)
class BlockSummary:
    index: int
    labels: str
    start_s: float
    duration_s: float
    singles_local: int
    singles_remote: int
    dark_local: int
    dark_remote: int
    true_pairs: int


@dataclass(frozen=True)
class SimulationResult:
    out_dir: Path
    tags_local: Path
    tags_remote: Path
    manifest: Path
    blocks: list[BlockSummary]


@dataclass(frozen=True)
class ExpectedRates:
    """Analytic per-second rates of one measurement block."""

    singles_local: float
    singles_remote: float
    true_coincidences: float
    accidental_coincidences: float
    joint_probability: float
    timing_fwhm_ps: float
    window_efficiency: float

    @property
    def coincidences(self) -> float:
        return self.true_coincidences + self.accidental_coincidences


def remote_transmission(cfg: LinkConfig) -> float:
    """Link transmission times the remote coupling correction, capped at 1."""
    t = cfg.channel.transmission * cfg.source.remote_coupling
    if t > 1.0:
        logger.warning(f"Remote coupling {cfg.source.remote_coupling:g} saturates the link; transmission capped at 1")
    return min(t, 1.0)


def effective_remote_channel(cfg: LinkConfig) -> ChannelConfig:
    """The fibre with the remote coupling folded into its loss."""
    t = remote_transmission(cfg)
    loss = math.inf if t <= 0 else max(0.0, -10.0 * math.log10(t))
    return replace(cfg.channel, loss_db=loss)


def timing_fwhm_ps(cfg: LinkConfig) -> float:
    """Expected coincidence-peak FWHM: jitters, sync, dispersion and tagger binning."""
    bin_ps = cfg.tagger.bin_width_ps
    quantization = constants.FWHM_PER_SIGMA * bin_ps * math.sqrt(2.0 / 12.0)
    return combined_timing_fwhm(
        cfg.detector_local.jitter_fwhm_ps,
        cfg.detector_remote.jitter_fwhm_ps,
        cfg.tagger.sync_jitter_fwhm_ps,
        cfg.channel.dispersion_fwhm_ps,
        quantization,
    )


def _joint_probability(cfg: LinkConfig, state: TwoPhotonState, block: MeasurementBlock) -> float:
    a, b = cfg.physical_settings(block)
    op = np.kron(
        projector(a, cfg.detector_local.analyzer_contrast), projector(b, cfg.detector_remote.analyzer_contrast)
    )
    return float(np.real(np.trace(state.rho @ op)))


def _channel_state(cfg: LinkConfig) -> TwoPhotonState:
    return apply_one_sided_unitary(cfg.source.state(), cfg.channel.residual_rotation)


def expected_rates(cfg: LinkConfig, block: MeasurementBlock) -> ExpectedRates:
    """Singles, true and accidental coincidence rates predicted for a block.

    Uses the static residual rotation and ignores the slow drift; the
    analyzer marginals of a Werner state are 1/2 whatever the rotation.
    """
    state = _channel_state(cfg)
    rate = cfg.source.pair_rate
    t_local = cfg.source.local_coupling
    t_remote = remote_transmission(cfg)
    eta_l, eta_r = cfg.detector_local.efficiency, cfg.detector_remote.efficiency

    singles_local = rate * t_local * eta_l / 2.0 + cfg.detector_local.dark_rate
    singles_remote = rate * t_remote * eta_r / 2.0 + cfg.detector_remote.dark_rate
    joint = _joint_probability(cfg, state, block)
    fwhm = timing_fwhm_ps(cfg)
    eff = window_efficiency(cfg.window_ps, fwhm)
    true = rate * t_local * t_remote * eta_l * eta_r * joint * eff
    acc = accidental_rate(singles_local, singles_remote, cfg.window_ps)
    return ExpectedRates(singles_local, singles_remote, true, acc, joint, fwhm, eff)


def calibrate_rates(
    target_local_singles: float,
    target_coincidences: float,
    cfg: LinkConfig | None = None,
    target_remote_singles: float = 55.0,
) -> SourceConfig:
    """Fit pair rate and coupling factors to measured rates.

    Solves for the pair rate R, local coupling c_l and remote correction c_r
    such that the rate model gives the target local singles, remote singles
    and mean correlated-combination coincidence rate.

    Raises:
        CalibrationError: a target is not positive, lies below the dark or
            accidental floor, or needs a local coupling above 1
    """
    cfg = cfg or LinkConfig()
    if min(target_local_singles, target_coincidences, target_remote_singles) <= 0:
        raise CalibrationError("calibration targets must be positive (a zero target means a zero pair rate)")

    eta_l, eta_r = cfg.detector_local.efficiency, cfg.detector_remote.efficiency
    dark_l, dark_r = cfg.detector_local.dark_rate, cfg.detector_remote.dark_rate
    if target_local_singles <= dark_l or target_remote_singles <= dark_r:
        raise CalibrationError("singles targets must exceed the detector dark-count rates")
    if eta_l <= 0 or eta_r <= 0 or cfg.channel.transmission <= 0:
        raise CalibrationError("detector efficiencies and link transmission must be non-zero")

    state = _channel_state(cfg)
    correlated = [MeasurementBlock(p[0], p[2], 1.0) for p in PROTOCOL_ORDER if p[0] != p[2]]
    joint = float(np.mean([_joint_probability(cfg, state, b) for b in correlated]))
    eff = window_efficiency(cfg.window_ps, timing_fwhm_ps(cfg))
    acc = accidental_rate(target_local_singles, target_remote_singles, cfg.window_ps)
    if target_coincidences <= acc or joint <= 0:
        raise CalibrationError(
            f"coincidence target {target_coincidences:g}/s does not exceed the accidental floor {acc:.3g}/s"
        )

    transmission = cfg.channel.transmission
    local_product = 2.0 * (target_local_singles - dark_l) / eta_l
    remote_product = 2.0 * (target_remote_singles - dark_r) / (transmission * eta_r)
    triple = (target_coincidences - acc) / (transmission * eta_l * eta_r * joint * eff)
    pair_rate = local_product * remote_product / triple
    local_coupling = local_product / pair_rate
    remote_coupling = remote_product / pair_rate

    if local_coupling > 1.0:
        raise CalibrationError(f"targets need a local coupling of {local_coupling:.3g} > 1")
    if remote_coupling > 1.0:
        logger.warning(
            f"Remote coupling correction {remote_coupling:.3g} exceeds 1: the loss and efficiency figures "
            "cannot produce the remote singles target on their own"
        )
    logger.info(
        f"Calibrated pair rate {pair_rate:.4g}/s, local coupling {local_coupling:.4g}, remote {remote_coupling:.4g}"
    )
    return replace(cfg.source, pair_rate=pair_rate, local_coupling=local_coupling, remote_coupling=remote_coupling)


@dataclass
class _ChunkOutput:
    local: DetectionResult
    remote: DetectionResult
    true_pairs: int


class _LinkRun:
    """Per-run state shared by all chunks."""

    def __init__(self, cfg: LinkConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.local_arm = ChannelConfig.local_arm(cfg.source.local_coupling)
        trajectory = RandomWalkTrajectory(
            seed,
            horizon_s=cfg.total_duration_s + 1.0,
            speed_deg_per_sqrt_h=cfg.channel.drift_speed_deg_per_sqrt_h,
            cap_deg=cfg.channel.drift_cap_deg,
            step_s=cfg.channel.drift_step_s,
            offset=cfg.channel.residual_rotation,
        )
        thermal = None
        self.thermal_floor_ps = 0.0
        if cfg.temperature_profile is not None and len(cfg.temperature_profile):
            thermal = drift_trajectory(cfg.temperature_profile, cfg.thermal)
            shifts = cfg.thermal.sensitivity_ps_per_k * cfg.temperature_profile.offsets_k
            self.thermal_floor_ps = min(0.0, float(shifts.min()))
        self.remote_channel = effective_remote_channel(cfg).with_hooks(trajectory, thermal)
        self.trajectory = trajectory

    def chunk(self, block_index: int, block: MeasurementBlock, chunk_index: int, batch: PairBatch, lo: int, hi: int):
        cfg, key = self.cfg, (block_index, chunk_index)
        setting_a, setting_b = cfg.physical_settings(block)
        duration = (hi - lo) / constants.PS_PER_SECOND

        local = propagate(batch, self.local_arm, self.seed, side="local", stream_key=key)
        remote = propagate(batch, self.remote_channel, self.seed, side="remote", stream_key=key)
        det_local = detect_with_outcomes(
            local,
            setting_a,
            cfg.detector_local,
            cfg.tagger,
            duration,
            self.seed,
            start_ps=lo,
            side="local",
            stream_key=key,
        )
        outcomes = partner_outcomes(remote, local, det_local.analyzer_pass)
        det_remote = detect_with_outcomes(
            remote,
            setting_b,
            cfg.detector_remote,
            cfg.tagger,
            duration,
            self.seed,
            start_ps=lo,
            side="remote",
            stream_key=key,
            partner_setting=setting_a,
            partner_outcome=outcomes,
        )
        true_pairs = int(np.intersect1d(det_local.clicked_pair_ids, det_remote.clicked_pair_ids).size)
        return _ChunkOutput(det_local, det_remote, true_pairs)


def run_simulation(
    cfg: LinkConfig,
    seed: int,
    out_dir: str | Path,
    *,
    chunk_seconds: float = 0.25,
    workers: int = 1,
    write_csv: bool = False,
    extra_manifest: dict[str, Any] | None = None,
) -> SimulationResult:
    """Simulate the schedule and write tag files plus ``manifest.json``.

    Args:
        cfg: Link configuration
        seed: Run seed
        out_dir: Output directory, created if needed
        chunk_seconds: Generation chunk length
        workers: Threads simulating chunks
        write_csv: Also write the tag streams as CSV
        extra_manifest: Additional manifest entries

    Returns:
        SimulationResult with output paths and per-block summaries
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise TagFileError(f"cannot create output directory {out_dir}: {e}") from e

    run = _LinkRun(cfg, seed)
    bw_fs = cfg.tagger.bin_width_fs
    ref = TimeTagStream.empty(bw_fs)
    chunk_ps = int(round(chunk_seconds * constants.PS_PER_SECOND))
    margin_ps = WATERMARK_MARGIN_PS - run.thermal_floor_ps

    local_writer = TagFileWriter(out_dir / TAGS_LOCAL, bw_fs, cfg.tagger.channel_count)
    remote_writer = TagFileWriter(out_dir / TAGS_REMOTE, bw_fs, cfg.tagger.channel_count)
    local_buffer, remote_buffer = SortedTagBuffer(local_writer), SortedTagBuffer(remote_writer)
    summaries: list[BlockSummary] = []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    try:
        for block_index, (block, start_s) in enumerate(zip(cfg.blocks(), cfg.block_starts_s(), strict=True)):
            start_ps = int(round(start_s * constants.PS_PER_SECOND))
            duration_ps = int(round(block.duration_s * constants.PS_PER_SECOND))
            bounds = chunk_bounds(start_ps, duration_ps, chunk_ps)
            chunks = iter_pair_chunks(cfg.source, block.duration_s, seed, chunk_seconds, start_ps, block_index)
            counts = {"singles_local": 0, "singles_remote": 0, "dark_local": 0, "dark_remote": 0, "true_pairs": 0}

            while window := list(islice(chunks, max(1, 2 * workers))):

                def work(item, block_index=block_index, block=block, bounds=bounds):
                    chunk_index, batch = item
                    return run.chunk(block_index, block, chunk_index, batch, *bounds[chunk_index])

                outputs = list(pool.map(work, window)) if pool else [work(item) for item in window]
                for (chunk_index, _), out in zip(window, outputs, strict=True):
                    local_buffer.push(out.local.stream)
                    remote_buffer.push(out.remote.stream)
                    counts["singles_local"] += len(out.local.stream)
                    counts["singles_remote"] += len(out.remote.stream)
                    counts["dark_local"] += out.local.dark_count
                    counts["dark_remote"] += out.remote.dark_count
                    counts["true_pairs"] += out.true_pairs
                    watermark = ref.first_bin_at_or_after(bounds[chunk_index][1] - margin_ps)
                    local_buffer.flush_below(watermark)
                    remote_buffer.flush_below(watermark)

            summary = BlockSummary(block_index, block.labels, start_s, block.duration_s, **counts)
            summaries.append(summary)
            logger.info(
                f"Block {block_index} {block.labels}: {summary.singles_local} local / "
                f"{summary.singles_remote} remote clicks, {summary.true_pairs} true pairs"
            )
            if summary.singles_remote == summary.dark_remote:
                logger.warning(f"Block {block_index} recorded no remote photon clicks")
    finally:
        if pool is not None:
            pool.shutdown()
        local_buffer.close()
        remote_buffer.close()

    files = {
        "tags_local": file_entry(local_writer.path, local_writer.count),
        "tags_remote": file_entry(remote_writer.path, remote_writer.count),
    }
    if write_csv:
        for path in (local_writer.path, remote_writer.path):
            write_tags_csv(path.with_suffix(".csv"), read_tags(path))

    manifest = write_manifest(
        out_dir,
        {
            "polarlink_version": __version__,
            "seed": seed,
            "chunk_seconds": chunk_seconds,
            "config": cfg.to_flat(),
            "files": files,
            "blocks": [asdict(s) for s in summaries],
            "max_drift_deg": run.trajectory.max_drift_deg(),
            **(extra_manifest or {}),
        },
    )
    return SimulationResult(out_dir, local_writer.path, remote_writer.path, manifest, summaries)
