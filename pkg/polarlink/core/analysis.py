"""
Analysis of a pair of tag files against a measurement schedule.

Pipeline:
1. locate the coincidence peak with a coarse search over the first
   correlated block;
2. fit the peak in every correlated block, tracking slow delay drift;
3. count coincidences in every block inside a window centred on the
   cycle's fitted delay;
4. turn the counts into visibilities, fidelity bound, QBER and key rate per
   cycle and for the whole run.

Outputs written to the analysis directory:
    timeseries.csv        one row per schedule cycle
    blocks.csv            one row per block
    summary.txt / .json   run-level figures
    correlation.csv       fine cross-correlation of the first correlated block
    correlation_fit.json  its Gaussian fit
"""

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import numpy as np
import orjson

from ..utils.manifest import MANIFEST_NAME, read_manifest, verify_files
from ..utils.tagfile import load_stream
from . import constants
from .detection import TimeTagStream
from .entanglement_metrics import (
    MeasurementRecord,
    VisibilityResult,
    accidental_rate,
    certifies_entanglement,
    estimate_key_rate,
    fidelity_ceiling,
    fidelity_lower_bound,
    qber_from_visibility,
    rotation_angle_from_visibility_drop,
    visibility,
)
from .environment import length_change, temperature_from_delay_shift
from .errors import NoPeakFoundError, ScheduleMismatchError, UndefinedVisibilityError
from .link_config import PROTOCOL_ORDER, LinkConfig
from .quantum_state import werner_parameter_for_fidelity
from .timetag_analysis import (
    CoincidenceMode,
    PeakFit,
    PeakSearch,
    background_rate,
    count_coincidences,
    locate_peak,
    write_fit_sidecar,
    write_histogram_csv,
)

logger = logging.getLogger(__name__)

TIMESERIES_COLUMNS = ["time_h", "qber", "qber_err", "secure_rate", "peak_pos_ps", "peak_err_ps"]
BLOCK_COLUMNS = [
    "time_h",
    "block",
    "basis_a",
    "basis_b",
    "duration_s",
    "singles_a",
    "singles_b",
    "coincidences",
    "peak_pos_ps",
    "peak_err_ps",
    "fwhm_ps",
]

# Tag streams may run past the schedule by the fibre delay and jitter
SCHEDULE_SLACK_PS = constants.PS_PER_SECOND


@dataclass(frozen=True)
class BlockResult:
    index: int
    cycle: int
    label_a: str
    label_b: str
    start_s: float
    duration_s: float
    singles_a: int
    singles_b: int
    coincidences: int
    peak_pos_ps: float = math.nan
    peak_err_ps: float = math.nan
    fwhm_ps: float = math.nan

    @property
    def time_h(self) -> float:
        return (self.start_s + self.duration_s / 2.0) / 3600.0


@dataclass(frozen=True)
class CycleResult:
    index: int
    time_h: float
    peak_pos_ps: float
    peak_err_ps: float
    visibilities: dict[str, VisibilityResult]
    fidelity_bound: float = math.nan
    qber: float = math.nan
    qber_err: float = math.nan
    secure_rate: float = math.nan


@dataclass
class AnalysisReport:
    blocks: list[BlockResult]
    cycles: list[CycleResult]
    summary: dict[str, Any]
    correlation: PeakSearch


@dataclass(frozen=True)
class AnalysisSettings:
    window_ps: float | None = None
    mode: CoincidenceMode = CoincidenceMode.HISTOGRAM
    ec_efficiency: float = constants.EC_EFFICIENCY
    search_range_ps: float = constants.SEARCH_RANGE_PS
    coarse_bin_ps: float = constants.COARSE_BIN_PS
    fine_span_ps: float = constants.FINE_SPAN_PS
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "mode", CoincidenceMode(self.mode))


def load_schedule(path: str | Path) -> tuple[LinkConfig, dict[str, Any] | None]:
    """Read a schedule from a run manifest (JSON or run directory) or a link-config file."""
    path = Path(path)
    if path.is_dir() or path.suffix.lower() == ".json":
        manifest = read_manifest(path)
        return LinkConfig.from_flat(manifest["config"]), manifest
    return LinkConfig.from_file(path), None


def _block_windows_ps(cfg: LinkConfig) -> list[tuple[int, int]]:
    windows = []
    for block, start in zip(cfg.blocks(), cfg.block_starts_s(), strict=True):
        lo = int(round(start * constants.PS_PER_SECOND))
        windows.append((lo, lo + int(round(block.duration_s * constants.PS_PER_SECOND))))
    return windows


def _check_streams(a: TimeTagStream, b: TimeTagStream, cfg: LinkConfig) -> None:
    if a.bin_width_fs != b.bin_width_fs:
        raise ScheduleMismatchError(f"tag files have different bin widths ({a.bin_width_fs} vs {b.bin_width_fs} fs)")
    if a.bin_width_fs != cfg.tagger.bin_width_fs:
        raise ScheduleMismatchError(
            f"tag files use {a.bin_width_ps:g} ps bins but the schedule's tagger has {cfg.tagger.bin_width_ps:g} ps"
        )
    if len(a) == 0 or len(b) == 0:
        raise ScheduleMismatchError("a tag file is empty")
    end_ps = cfg.total_duration_s * constants.PS_PER_SECOND
    last_ps = int(a.bins[-1]) * a.bin_width_fs / constants.FS_PER_PS
    if last_ps > end_ps + SCHEDULE_SLACK_PS:
        raise ScheduleMismatchError(
            f"tags run to {last_ps / constants.PS_PER_SECOND:.1f} s, past the schedule's {cfg.total_duration_s:g} s"
        )
    if last_ps < end_ps - max(SCHEDULE_SLACK_PS, 0.01 * end_ps):
        raise ScheduleMismatchError(
            f"tags end at {last_ps / constants.PS_PER_SECOND:.1f} s, before the schedule's {cfg.total_duration_s:g} s"
        )


def _weighted_center(fits: list[PeakFit]) -> tuple[float, float]:
    usable = [f for f in fits if f.center_stderr_ps > 0 and math.isfinite(f.center_stderr_ps)]
    if not usable:
        return (fits[0].center_ps, math.nan) if fits else (math.nan, math.nan)
    w = np.array([1.0 / f.center_stderr_ps**2 for f in usable])
    c = np.array([f.center_ps for f in usable])
    return float(np.sum(w * c) / np.sum(w)), float(1.0 / math.sqrt(np.sum(w)))


def _coarse_search(
    a: TimeTagStream,
    b: TimeTagStream,
    correlated: list[int],
    windows: list[tuple[int, int]],
    settings: AnalysisSettings,
) -> tuple[int, PeakSearch]:
    """Coarse peak search on the first correlated block that shows a peak."""
    span = settings.search_range_ps + settings.fine_span_ps
    error: NoPeakFoundError | None = None
    for i in correlated:
        lo, hi = windows[i]
        try:
            search = locate_peak(
                a.between(lo, hi),
                b.between(lo - span, hi + span),
                search_range_ps=settings.search_range_ps,
                coarse_bin_ps=settings.coarse_bin_ps,
                fine_span_ps=settings.fine_span_ps,
                workers=settings.workers,
            )
        except NoPeakFoundError as e:
            logger.warning(f"Block {i}: {e}")
            error = e
            continue
        return i, search
    raise error or NoPeakFoundError("no correlated blocks")


def analyze_streams(
    a: TimeTagStream, b: TimeTagStream, cfg: LinkConfig, settings: AnalysisSettings | None = None
) -> AnalysisReport:
    """Run the analysis pipeline on in-memory streams.

    Args:
        a: Local detector stream
        b: Remote detector stream
        cfg: Link configuration carrying the schedule
        settings: Window, coincidence mode and search parameters

    Raises:
        ScheduleMismatchError: streams do not fit the schedule
        NoPeakFoundError: no coincidence peak in any correlated block
    """
    settings = settings or AnalysisSettings()
    window = settings.window_ps if settings.window_ps is not None else cfg.window_ps
    _check_streams(a, b, cfg)

    blocks = cfg.blocks()
    windows = _block_windows_ps(cfg)
    per_cycle = len(cfg.schedule)
    correlated = [i for i, blk in enumerate(blocks) if (blk.label_a, blk.label_b) in constants.CORRELATED_LABELS]
    if not correlated:
        raise ScheduleMismatchError("schedule has no correlated (H-V, V-H, D-A, A-D) blocks")

    first, first_search = _coarse_search(a, b, correlated, windows, settings)
    logger.info(
        f"Coincidence peak at {first_search.fit.center_ps:.1f} ± {first_search.fit.center_stderr_ps:.1f} ps, "
        f"FWHM {first_search.fit.fwhm_ps:.0f} ps"
    )

    # fine fits, tracking drift from block to block
    fits: dict[int, PeakFit] = {first: first_search.fit}
    tracked = first_search.fit.center_ps
    margin = settings.fine_span_ps + window
    for i in correlated[correlated.index(first) + 1 :]:
        lo, hi = windows[i]
        try:
            search = locate_peak(
                a.between(lo, hi),
                b.between(lo + tracked - margin, hi + tracked + margin),
                fine_span_ps=settings.fine_span_ps,
                expected_delay_ps=tracked,
                workers=settings.workers,
            )
        except NoPeakFoundError as e:
            logger.warning(f"Block {i} ({blocks[i].labels}): {e}")
            continue
        fits[i] = search.fit
        tracked = search.fit.center_ps

    # window centre per cycle
    n_cycles = len(blocks) // per_cycle
    centers = []
    fallback = first_search.fit.center_ps
    for c in range(n_cycles):
        cycle_fits = [fits[i] for i in range(c * per_cycle, (c + 1) * per_cycle) if i in fits]
        center, err = _weighted_center(cycle_fits)
        if math.isnan(center):
            center = fallback
        fallback = center
        centers.append((center, err))

    def count(i: int) -> BlockResult:
        lo, hi = windows[i]
        center = centers[i // per_cycle][0]
        a_blk = a.between(lo, hi)
        b_blk = b.between(lo + center - window, hi + center + window)
        n = count_coincidences(a_blk, b_blk, center, window, mode=settings.mode)
        fit = fits.get(i)
        return BlockResult(
            index=i,
            cycle=i // per_cycle,
            label_a=blocks[i].label_a,
            label_b=blocks[i].label_b,
            start_s=lo / constants.PS_PER_SECOND,
            duration_s=blocks[i].duration_s,
            singles_a=len(a_blk),
            singles_b=len(b.between(lo + center, hi + center)),
            coincidences=n,
            peak_pos_ps=fit.center_ps if fit else math.nan,
            peak_err_ps=fit.center_stderr_ps if fit else math.nan,
            fwhm_ps=fit.fwhm_ps if fit else math.nan,
        )

    indices = range(n_cycles * per_cycle)
    if settings.workers > 1:
        with ThreadPoolExecutor(max_workers=settings.workers) as pool:
            results = list(pool.map(count, indices))
    else:
        results = [count(i) for i in indices]

    cycles = [
        _cycle_result(c, results[c * per_cycle : (c + 1) * per_cycle], centers[c], settings.ec_efficiency)
        for c in range(n_cycles)
    ]
    summary = _summarize(results, cycles, fits, first_search, cfg, window, settings)
    return AnalysisReport(results, cycles, summary, first_search)


def _family_records(records: list[MeasurementRecord]) -> dict[str, list[MeasurementRecord]]:
    out: dict[str, list[MeasurementRecord]] = {}
    for r in records:
        try:
            out.setdefault(r.family, []).append(r)
        except ValueError:
            continue
    return out


def _visibilities(records: list[MeasurementRecord]) -> dict[str, VisibilityResult]:
    results = {}
    for family, recs in _family_records(records).items():
        if len(recs) != 4:
            continue
        try:
            results[family] = visibility(recs)
        except (ValueError, UndefinedVisibilityError) as e:
            logger.warning(f"No {family} visibility: {e}")
    return results


def _is_protocol(records: list[MeasurementRecord]) -> bool:
    return sorted(r.labels for r in records) == sorted(PROTOCOL_ORDER)


def _cycle_result(index: int, blocks: list[BlockResult], center: tuple[float, float], f: float) -> CycleResult:
    records = _aggregate(blocks)
    vis = _visibilities(records)
    start = blocks[0].start_s
    end = blocks[-1].start_s + blocks[-1].duration_s
    result = CycleResult(index, (start + end) / 2.0 / 3600.0, center[0], center[1], vis)
    if "H-V" in vis and "D-A" in vis:
        bound = fidelity_lower_bound(vis["H-V"].visibility, vis["D-A"].visibility)
        result = replace(result, fidelity_bound=bound)
        if _is_protocol(records):
            key = estimate_key_rate(records, f)
            result = replace(result, qber=key.qber, qber_err=key.qber_stderr, secure_rate=key.secure_rate)
    elif len(vis) == 1:
        (only,) = vis.values()
        result = replace(result, qber=qber_from_visibility(only.visibility))
    return result


def _aggregate(blocks: list[BlockResult]) -> list[MeasurementRecord]:
    """Sum counts and durations of blocks with equal label pairs."""
    grouped: dict[tuple[str, str], list[BlockResult]] = {}
    for b in blocks:
        grouped.setdefault((b.label_a, b.label_b), []).append(b)
    return [
        MeasurementRecord(
            a,
            b,
            sum(x.duration_s for x in group),
            sum(x.coincidences for x in group),
            sum(x.singles_a for x in group),
            sum(x.singles_b for x in group),
        )
        for (a, b), group in grouped.items()
    ]


def _finite(values: list[float]) -> list[float]:
    return [v for v in values if math.isfinite(v)]


def _summarize(
    blocks: list[BlockResult],
    cycles: list[CycleResult],
    fits: dict[int, PeakFit],
    first: PeakSearch,
    cfg: LinkConfig,
    window: float,
    settings: AnalysisSettings,
) -> dict[str, Any]:
    duration = sum(b.duration_s for b in blocks)
    records = _aggregate(blocks)
    corr = [r for r in records if r.is_correlated]
    uncorr = [r for r in records if (r.basis_a.label, r.basis_b.label) in constants.UNCORRELATED_LABELS]
    s_a = sum(b.singles_a for b in blocks) / duration
    s_b = sum(b.singles_b for b in blocks) / duration
    rc = float(np.mean([r.coincidence_rate for r in corr])) if corr else math.nan
    ru = float(np.mean([r.coincidence_rate for r in uncorr])) if uncorr else math.nan

    center, center_err = _weighted_center(list(fits.values()))
    fwhms = [f.fwhm_ps for f in fits.values()]
    summary: dict[str, Any] = {
        "blocks": len(blocks),
        "cycles": len(cycles),
        "duration_s": duration,
        "window_ps": window,
        "coincidence_mode": settings.mode.value,
        "peak_delay_ps": center,
        "peak_delay_err_ps": center_err,
        "peak_fwhm_ps": float(np.mean(fwhms)),
        "peak_fwhm_err_ps": first.fit.fwhm_stderr_ps,
        "singles_a_rate": s_a,
        "singles_b_rate": s_b,
        "correlated_rate": rc,
        "uncorrelated_rate": ru,
    }

    acc_model = accidental_rate(s_a, s_b, window)
    fit = first.fit
    bg = background_rate(first.histogram, fit.center_ps, 3.0 * fit.fwhm_ps)
    first_block = next(b for b in blocks if b.index in fits)
    summary["accidental_rate_model"] = acc_model
    summary["accidental_rate_offpeak"] = bg * window / first_block.duration_s

    vis = _visibilities(records)
    for family, key in (("H-V", "hv"), ("D-A", "da")):
        if family in vis:
            summary[f"visibility_{key}"] = vis[family].visibility
            summary[f"visibility_{key}_err"] = vis[family].stderr

    local_fidelity = cfg.source.local_fidelity
    if "H-V" in vis and "D-A" in vis:
        bound = fidelity_lower_bound(vis["H-V"].visibility, vis["D-A"].visibility)
        summary["fidelity_bound"] = bound
        summary["fidelity_bound_err"] = math.hypot(vis["H-V"].stderr, vis["D-A"].stderr) / 2.0
        cycle_bounds = _finite([c.fidelity_bound for c in cycles])
        # empty when no cycle holds both families
        summary["fidelity_bound_mean"] = float(np.mean(cycle_bounds)) if cycle_bounds else math.nan
        summary["fidelity_bound_max"] = max(cycle_bounds) if cycle_bounds else math.nan
        summary["certifies_entanglement"] = certifies_entanglement(bound)
        if _is_protocol(records):
            key = estimate_key_rate(records, settings.ec_efficiency)
            summary["qber"] = key.qber
            summary["qber_err"] = key.qber_stderr
            summary["sifted_rate"] = key.sifted_rate
            summary["secure_rate"] = key.secure_rate
            summary["ec_efficiency"] = key.ec_efficiency

    if math.isfinite(rc):
        true_model = max(rc - acc_model, 0.0)
        summary["fidelity_ceiling_model"] = fidelity_ceiling(local_fidelity, true_model, s_a, s_b, window)
    if math.isfinite(rc) and math.isfinite(ru):
        summary["fidelity_ceiling_measured"] = fidelity_ceiling(
            local_fidelity, max(rc - ru, 0.0), s_a, s_b, window, measured_accidental_rate=ru
        )

    v_ref = werner_parameter_for_fidelity(local_fidelity)
    for family, key in (("H-V", "hv"), ("D-A", "da")):
        observed = _finite([c.visibilities[family].visibility for c in cycles if family in c.visibilities])
        if observed and 0.0 < min(observed):
            v_obs = min(min(observed), v_ref)
            summary[f"rotation_{key}_cosine_deg"] = rotation_angle_from_visibility_drop(v_ref, v_obs, "cosine")
            summary[f"rotation_{key}_sin2_deg"] = rotation_angle_from_visibility_drop(v_ref, v_obs, "qber-sin2")

    positions = _finite([c.peak_pos_ps for c in cycles])
    if len(positions) > 1:
        drift = max(positions) - min(positions)
        dt = temperature_from_delay_shift(drift, cfg.thermal)
        summary["peak_drift_ps"] = drift
        summary["temperature_change_mK"] = dt * 1e3
        summary["length_change_mm"] = length_change(dt, cfg.thermal)
    return summary


# ───────────────────────────── output ─────────────────────────────


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.6g}"
    return str(value)


def render_summary(summary: dict[str, Any]) -> str:
    """``key=value`` lines."""
    return "\n".join(f"{k}={_fmt(v)}" for k, v in summary.items()) + "\n"


def _write_csv(path: Path, columns: list[str], rows: list[list[Any]]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        writer.writerows([[_fmt(v) for v in row] for row in rows])


def write_report(report: AnalysisReport, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(
        out_dir / "timeseries.csv",
        TIMESERIES_COLUMNS,
        [[c.time_h, c.qber, c.qber_err, c.secure_rate, c.peak_pos_ps, c.peak_err_ps] for c in report.cycles],
    )
    _write_csv(
        out_dir / "blocks.csv",
        BLOCK_COLUMNS,
        [
            [
                b.time_h,
                b.index,
                b.label_a,
                b.label_b,
                b.duration_s,
                b.singles_a,
                b.singles_b,
                b.coincidences,
                b.peak_pos_ps,
                b.peak_err_ps,
                b.fwhm_ps,
            ]
            for b in report.blocks
        ],
    )
    (out_dir / "summary.txt").write_text(render_summary(report.summary))
    (out_dir / "summary.json").write_bytes(
        orjson.dumps(report.summary, option=orjson.OPT_INDENT_2 | orjson.OPT_SERIALIZE_NUMPY)
    )
    write_histogram_csv(out_dir / "correlation.csv", report.correlation.histogram)
    write_fit_sidecar(out_dir / "correlation_fit.json", report.correlation.fit)
    logger.info(f"Wrote analysis to {out_dir}")
    return out_dir


def analyze(
    tags_a: str | Path,
    tags_b: str | Path,
    schedule: str | Path,
    out_dir: str | Path | None = None,
    settings: AnalysisSettings | None = None,
) -> AnalysisReport:
    """Analyze two tag files against a schedule and optionally write the report.

    ``schedule`` is a run manifest (or the run directory holding one), whose
    checksums must match the tag files, or a link-config file.

    Raises:
        ScheduleMismatchError: checksums or stream extents do not match the schedule
        NoPeakFoundError: no coincidence peak found
        TagFileError: a tag file cannot be read
    """
    cfg, manifest = load_schedule(schedule)
    if manifest is not None:
        verify_files(manifest, {"tags_local": Path(tags_a), "tags_remote": Path(tags_b)})
    bin_width_fs = cfg.tagger.bin_width_fs
    a = load_stream(tags_a, bin_width_fs)
    b = load_stream(tags_b, bin_width_fs)
    report = analyze_streams(a, b, cfg, settings)
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def render_report(analysis_dir: str | Path) -> str:
    """Re-render ``summary.txt`` content from an analysis directory's ``summary.json``."""
    path = Path(analysis_dir) / "summary.json"
    if not path.exists():
        if (Path(analysis_dir) / MANIFEST_NAME).exists():
            raise ScheduleMismatchError(f"{analysis_dir} is a run directory; run `polarlink analyze` on it first")
        raise ScheduleMismatchError(f"no summary.json in {analysis_dir}")
    return render_summary(orjson.loads(path.read_bytes()))
