"""
Coincidence analysis of two time-tag streams.

All delay arithmetic is done on integers: tag differences are counted in
tagger bins and converted to femtoseconds before binning, so histograms are
bit-identical however the work is split. Histogram bins are half-open,
[start + k·w, start + (k+1)·w).

The kernels are two-pointer merges compiled with numba. Stream A is
partitioned across threads (the kernels release the GIL) and the integer
partial histograms are summed.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import orjson
from numba import njit
from scipy.optimize import curve_fit

from . import constants
from .detection import TimeTagStream
from .errors import NoPeakFoundError

logger = logging.getLogger(__name__)

PEAK_TO_MEDIAN = 5.0
FIT_MAX_ITERATIONS = 200
FIT_XTOL = 1e-8


class CoincidenceMode(str, Enum):
    """How ``count_coincidences`` treats a tag that could pair with several partners."""

    HISTOGRAM = "histogram"  # integrate the correlation function, every pair counts
    GREEDY = "greedy"  # one-to-one, earliest unused partner


@dataclass(eq=False)
class CorrelationHistogram:
    start_delay_ps: float
    bin_width_ps: float
    counts: np.ndarray
    total_pairs_considered: int = 0

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if not self.bin_width_ps > 0:
            raise ValueError(f"bin width must be positive, got {self.bin_width_ps}")
        if self.counts.ndim != 1 or self.counts.size == 0:
            raise ValueError("histogram needs at least one bin")

    @property
    def centers_ps(self) -> np.ndarray:
        return self.start_delay_ps + (np.arange(self.counts.size) + 0.5) * self.bin_width_ps

    @property
    def end_delay_ps(self) -> float:
        return self.start_delay_ps + self.counts.size * self.bin_width_ps

    def window_sum(self, lo_ps: float, hi_ps: float) -> int:
        """Counts in the bins whose centres fall in [lo, hi]."""
        c = self.centers_ps
        return int(self.counts[(c >= lo_ps) & (c <= hi_ps)].sum())


@dataclass(frozen=True)
class PeakFit:
    center_ps: float
    center_stderr_ps: float
    fwhm_ps: float
    fwhm_stderr_ps: float
    amplitude: float
    baseline: float

    @property
    def sigma_ps(self) -> float:
        return self.fwhm_ps / constants.FWHM_PER_SIGMA

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


@dataclass(frozen=True)
class PeakSearch:
    coarse_delay_ps: float
    histogram: CorrelationHistogram
    fit: PeakFit


# ───────────────────────────── kernels ─────────────────────────────


@njit(nogil=True, cache=True)
def _histogram_kernel(a, b, j, lo_bins, hi_bins, bw_fs, dmin_fs, hbw_fs, counts):  # pragma: no cover
    nb = b.shape[0]
    nbins = counts.shape[0]
    considered = 0
    for i in range(a.shape[0]):
        ta = a[i]
        while j < nb and b[j] - ta < lo_bins:
            j += 1
        k = j
        while k < nb and b[k] - ta <= hi_bins:
            considered += 1
            d = (b[k] - ta) * bw_fs - dmin_fs
            if d >= 0:
                idx = d // hbw_fs
                if idx < nbins:
                    counts[idx] += 1
            k += 1
    return considered


@njit(nogil=True, cache=True)
def _window_kernel(a, b, j, lo_bins, hi_bins, bw_fs, delay_fs, window_fs):  # pragma: no cover
    nb = b.shape[0]
    count = 0
    for i in range(a.shape[0]):
        ta = a[i]
        while j < nb and b[j] - ta < lo_bins:
            j += 1
        k = j
        while k < nb and b[k] - ta <= hi_bins:
            if 2 * abs((b[k] - ta) * bw_fs - delay_fs) <= window_fs:
                count += 1
            k += 1
    return count


@njit(nogil=True, cache=True)
def _greedy_kernel(a, b, bw_fs, delay_fs, window_fs):  # pragma: no cover
    nb = b.shape[0]
    j = 0
    count = 0
    for i in range(a.shape[0]):
        ta = a[i]
        while j < nb and 2 * ((b[j] - ta) * bw_fs - delay_fs) < -window_fs:
            j += 1
        if j < nb and 2 * abs((b[j] - ta) * bw_fs - delay_fs) <= window_fs:
            count += 1
            j += 1
    return count


# ───────────────────────────── helpers ─────────────────────────────


def _check_compatible(a: TimeTagStream, b: TimeTagStream) -> int:
    if a.bin_width_fs != b.bin_width_fs:
        raise ValueError(f"streams have different bin widths: {a.bin_width_fs} fs vs {b.bin_width_fs} fs")
    return a.bin_width_fs


def _partitions(n: int, chunks: int) -> list[tuple[int, int]]:
    chunks = max(1, min(int(chunks), max(n, 1)))
    edges = np.linspace(0, n, chunks + 1).astype(np.int64)
    return [(int(lo), int(hi)) for lo, hi in zip(edges[:-1], edges[1:], strict=True) if hi > lo]


def _run_partitioned(func, a_bins: np.ndarray, chunks: int, workers: int) -> list:
    parts = _partitions(a_bins.shape[0], chunks)
    if workers <= 1 or len(parts) <= 1:
        return [func(lo, hi) for lo, hi in parts]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda p: func(*p), parts))


def _to_fs(value_ps: float) -> int:
    return int(round(value_ps * constants.FS_PER_PS))


# ───────────────────────────── operations ─────────────────────────────


def cross_correlate(
    a: TimeTagStream,
    b: TimeTagStream,
    delay_min: float,
    delay_max: float,
    bin_width: float,
    *,
    chunks: int = 1,
    workers: int = 1,
) -> CorrelationHistogram:
    """Histogram of t_b - t_a over [delay_min, delay_max) in ps.

    The range is rounded up to a whole number of bins.

    Args:
        a: Start stream
        b: Stop stream
        delay_min: Lower delay edge in ps
        delay_max: Upper delay edge in ps
        bin_width: Histogram bin width in ps
        chunks: Partitions of stream A
        workers: Threads working on the partitions

    Returns:
        CorrelationHistogram; empty streams give an all-zero histogram
    """
    if not delay_min < delay_max:
        raise ValueError(f"delay_min must be below delay_max, got [{delay_min}, {delay_max}]")
    bw_fs = _check_compatible(a, b)
    dmin_fs, dmax_fs, hbw_fs = _to_fs(delay_min), _to_fs(delay_max), _to_fs(bin_width)
    if hbw_fs <= 0:
        raise ValueError(f"histogram bin width must be at least 1 fs, got {bin_width} ps")
    nbins = -((dmin_fs - dmax_fs) // hbw_fs)
    # the last bin is kept whole
    dmax_fs = dmin_fs + nbins * hbw_fs
    lo_bins = dmin_fs // bw_fs
    hi_bins = -((-dmax_fs) // bw_fs)
    a_bins, b_bins = a.bins, b.bins

    def work(lo: int, hi: int) -> tuple[np.ndarray, int]:
        counts = np.zeros(nbins, dtype=np.int64)
        part = a_bins[lo:hi]
        j = int(np.searchsorted(b_bins, part[0] + lo_bins, side="left"))
        considered = _histogram_kernel(part, b_bins, j, lo_bins, hi_bins, bw_fs, dmin_fs, hbw_fs, counts)
        return counts, int(considered)

    counts = np.zeros(nbins, dtype=np.int64)
    considered = 0
    if len(a) and len(b):
        for part_counts, part_considered in _run_partitioned(work, a_bins, chunks, workers):
            counts += part_counts
            considered += part_considered
    start = dmin_fs / constants.FS_PER_PS
    return CorrelationHistogram(start, hbw_fs / constants.FS_PER_PS, counts, considered)


def count_coincidences(
    a: TimeTagStream,
    b: TimeTagStream,
    delay: float,
    window: float,
    *,
    mode: CoincidenceMode | str = CoincidenceMode.HISTOGRAM,
    chunks: int = 1,
    workers: int = 1,
) -> int:
    """Number of (t_a, t_b) pairs with |t_b - t_a - delay| <= window / 2.

    HISTOGRAM mode counts every such pair, as integrating the correlation
    function does. GREEDY mode pairs each tag at most once, earliest match first.
    """
    if not window > 0:
        raise ValueError(f"window must be positive, got {window}")
    mode = CoincidenceMode(mode)
    bw_fs = _check_compatible(a, b)
    delay_fs, window_fs = _to_fs(delay), _to_fs(window)
    if not (len(a) and len(b)):
        return 0
    if mode is CoincidenceMode.GREEDY:
        return int(_greedy_kernel(a.bins, b.bins, bw_fs, delay_fs, window_fs))

    lo_bins = (2 * delay_fs - window_fs) // (2 * bw_fs)
    hi_bins = -((-2 * delay_fs - window_fs) // (2 * bw_fs))
    a_bins, b_bins = a.bins, b.bins

    def work(lo: int, hi: int) -> int:
        part = a_bins[lo:hi]
        j = int(np.searchsorted(b_bins, part[0] + lo_bins, side="left"))
        return int(_window_kernel(part, b_bins, j, lo_bins, hi_bins, bw_fs, delay_fs, window_fs))

    return sum(_run_partitioned(work, a_bins, chunks, workers))


def _gaussian(x, amplitude, center, sigma, baseline):
    return amplitude * np.exp(-0.5 * ((x - center) / sigma) ** 2) + baseline


def fit_gaussian_peak(h: CorrelationHistogram) -> PeakFit:
    """Least-squares fit of a Gaussian on a flat baseline.

    Uses Levenberg-Marquardt with Poisson weights, starting from the argmax bin,
    amplitude max - median, baseline median and a width of two bins.

    Raises:
        NoPeakFoundError: no bin reaches five times the median, or the fit fails
    """
    counts = h.counts.astype(float)
    peak = float(counts.max())
    median = float(np.median(counts))
    if counts.size < 4 or peak <= 0 or peak < PEAK_TO_MEDIAN * median:
        raise NoPeakFoundError(f"no peak found: max {peak:g} vs median {median:g} over {counts.size} bins")

    k = int(np.argmax(counts))
    x0 = float(h.centers_ps[k])
    u = h.centers_ps - x0
    p0 = [peak - median, 0.0, 2.0 * h.bin_width_ps, median]
    sigma = np.sqrt(np.maximum(counts, 1.0))
    try:
        popt, pcov = curve_fit(
            _gaussian,
            u,
            counts,
            p0=p0,
            sigma=sigma,
            absolute_sigma=True,
            method="lm",
            maxfev=FIT_MAX_ITERATIONS * (len(p0) + 1),
            xtol=FIT_XTOL,
        )
    except (RuntimeError, ValueError) as e:
        raise NoPeakFoundError(f"Gaussian fit did not converge: {e}") from e

    perr = np.sqrt(np.abs(np.diag(pcov)))
    amplitude, mu, s, baseline = (float(v) for v in popt)
    s = abs(s)
    if not (np.all(np.isfinite(perr)) and s > 0 and amplitude > 0):
        raise NoPeakFoundError(f"Gaussian fit is degenerate (amplitude={amplitude:g}, sigma={s:g})")

    return PeakFit(
        center_ps=x0 + mu,
        center_stderr_ps=float(perr[1]),
        fwhm_ps=constants.FWHM_PER_SIGMA * s,
        fwhm_stderr_ps=constants.FWHM_PER_SIGMA * float(perr[2]),
        amplitude=amplitude,
        baseline=baseline,
    )


def locate_peak(
    a: TimeTagStream,
    b: TimeTagStream,
    *,
    search_range_ps: float = constants.SEARCH_RANGE_PS,
    coarse_bin_ps: float = constants.COARSE_BIN_PS,
    fine_span_ps: float = constants.FINE_SPAN_PS,
    expected_delay_ps: float | None = None,
    workers: int = 1,
) -> PeakSearch:
    """Find and fit the coincidence peak.

    A coarse histogram over ±``search_range_ps`` locates the peak unless
    ``expected_delay_ps`` is given; a histogram at the tagger resolution over
    ±``fine_span_ps`` around it is then fitted.
    """
    if expected_delay_ps is None:
        coarse = cross_correlate(
            a, b, -search_range_ps, search_range_ps, coarse_bin_ps, chunks=workers, workers=workers
        )
        k = int(np.argmax(coarse.counts))
        peak = float(coarse.counts[k])
        median = float(np.median(coarse.counts))
        if peak <= 0 or peak - median < PEAK_TO_MEDIAN * math.sqrt(median + 1.0):
            raise NoPeakFoundError(
                f"no coincidence peak within ±{search_range_ps:g} ps (max {peak:g}, median {median:g})"
            )
        expected_delay_ps = float(coarse.centers_ps[k])
        logger.debug(f"Coarse peak at {expected_delay_ps:.0f} ps ({peak:g} counts over median {median:g})")

    # bin centres on the tagger's discrete delays k·bin_width
    bw = a.bin_width_ps
    first = math.floor((expected_delay_ps - fine_span_ps) / bw)
    nbins = math.ceil(2.0 * fine_span_ps / bw) + 1
    fine = cross_correlate(
        a,
        b,
        (first - 0.5) * bw,
        (first + nbins - 0.5) * bw,
        bw,
        chunks=workers,
        workers=workers,
    )
    return PeakSearch(expected_delay_ps, fine, fit_gaussian_peak(fine))


def background_rate(h: CorrelationHistogram, exclude_center_ps: float, exclude_half_width_ps: float) -> float:
    """Mean flat background in counts per ps, ignoring bins near the peak."""
    mask = np.abs(h.centers_ps - exclude_center_ps) > exclude_half_width_ps
    if not np.any(mask):
        return 0.0
    return float(h.counts[mask].mean()) / h.bin_width_ps


def write_histogram_csv(path: str | Path, h: CorrelationHistogram) -> None:
    """CSV with header ``delay_ps,counts``; delays are bin centres."""
    data = np.column_stack([h.centers_ps, h.counts])
    np.savetxt(path, data, fmt=["%.3f", "%d"], delimiter=",", header="delay_ps,counts", comments="")


def read_histogram_csv(path: str | Path) -> CorrelationHistogram:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    centers = data[:, 0]
    width = float(centers[1] - centers[0]) if centers.size > 1 else 1.0
    return CorrelationHistogram(float(centers[0]) - width / 2, width, np.rint(data[:, 1]).astype(np.int64))


def write_fit_sidecar(path: str | Path, fit: PeakFit) -> None:
    Path(path).write_bytes(orjson.dumps(fit.to_dict(), option=orjson.OPT_INDENT_2))
