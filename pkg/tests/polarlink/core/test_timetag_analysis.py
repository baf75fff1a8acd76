"""Tests for cross-correlation, coincidence counting and peak fitting."""

import numpy as np
import orjson
import pytest

from polarlink.core import constants
from polarlink.core.detection import TimeTagStream
from polarlink.core.errors import NoPeakFoundError
from polarlink.core.timetag_analysis import (
    CoincidenceMode,
    CorrelationHistogram,
    background_rate,
    count_coincidences,
    cross_correlate,
    fit_gaussian_peak,
    locate_peak,
    read_histogram_csv,
    write_fit_sidecar,
    write_histogram_csv,
)

BW_FS = 82300


def random_stream(n: int, span_bins: int, seed: int, bin_width_fs: int = 1000) -> TimeTagStream:
    rng = np.random.default_rng(seed)
    return TimeTagStream(np.sort(rng.integers(0, span_bins, n)), bin_width_fs=bin_width_fs)


def brute_force_histogram(a, b, dmin_fs, dmax_fs, hbw_fs):
    nbins = -((dmin_fs - dmax_fs) // hbw_fs)
    d = (b.bins[None, :] - a.bins[:, None]).ravel() * a.bin_width_fs
    d = d[(d >= dmin_fs) & (d < dmin_fs + nbins * hbw_fs)]
    return np.bincount((d - dmin_fs) // hbw_fs, minlength=nbins)


def correlated_streams(
    n_pairs=20_000, delay_ps=5.03e5, jitter_ps=300.0, background=5_000, duration_ps=1e12, seed=0
) -> tuple[TimeTagStream, TimeTagStream]:
    rng = np.random.default_rng(seed)
    t_a = np.sort(rng.uniform(0, duration_ps, n_pairs))
    keep = rng.random(n_pairs) < 0.2
    t_b = t_a[keep] + delay_ps + rng.normal(0.0, jitter_ps, keep.sum())
    t_b = np.concatenate([t_b, rng.uniform(0, duration_ps, background)])
    to_bins = lambda t: np.sort(np.floor(t * constants.FS_PER_PS / BW_FS).astype(np.int64))  # noqa: E731
    return TimeTagStream(to_bins(t_a), bin_width_fs=BW_FS), TimeTagStream(to_bins(t_b), bin_width_fs=BW_FS)


class TestCrossCorrelate:
    def test_small_example(self):
        a = TimeTagStream([0, 1000], bin_width_fs=1000)
        b = TimeTagStream([10, 1010], bin_width_fs=1000)
        h = cross_correlate(a, b, -20.0, 20.0, 1.0)
        assert h.counts.size == 40
        assert h.counts[30] == 2
        assert h.counts.sum() == 2
        assert h.total_pairs_considered == 2
        assert h.centers_ps[30] == pytest.approx(10.5)

    def test_matches_brute_force(self):
        a = random_stream(400, 100_000, seed=1)
        b = random_stream(500, 100_000, seed=2)
        h = cross_correlate(a, b, -5000.0, 7000.0, 37.0)
        assert np.array_equal(h.counts, brute_force_histogram(a, b, -5_000_000, 7_000_000, 37_000))

    def test_bins_are_half_open(self):
        """A delay on a bin edge belongs to the bin it opens."""
        a = TimeTagStream([0], bin_width_fs=1000)
        b = TimeTagStream([10, 20], bin_width_fs=1000)
        h = cross_correlate(a, b, 0.0, 20.0, 10.0)
        assert list(h.counts) == [0, 1]

    def test_partitioning_does_not_change_counts(self):
        a = random_stream(5_000, 1_000_000, seed=3)
        b = random_stream(5_000, 1_000_000, seed=4)
        serial = cross_correlate(a, b, -2000.0, 2000.0, 10.0)
        parallel = cross_correlate(a, b, -2000.0, 2000.0, 10.0, chunks=7, workers=3)
        assert np.array_equal(serial.counts, parallel.counts)
        assert serial.total_pairs_considered == parallel.total_pairs_considered

    @pytest.mark.slow
    def test_large_fixture_is_identical_across_partitions(self):
        a = random_stream(10_000_000, 10_000_000_000, seed=11)
        b = random_stream(10_000_000, 10_000_000_000, seed=12)
        serial = cross_correlate(a, b, -2000.0, 2000.0, 1.0)
        serial_count = count_coincidences(a, b, 100.0, 823.0)
        assert serial.counts.sum() > 0
        for chunks in (2, 8):
            parallel = cross_correlate(a, b, -2000.0, 2000.0, 1.0, chunks=chunks, workers=chunks)
            assert np.array_equal(serial.counts, parallel.counts)
            assert serial.total_pairs_considered == parallel.total_pairs_considered
            assert count_coincidences(a, b, 100.0, 823.0, chunks=chunks, workers=chunks) == serial_count

    def test_time_reversal(self):
        """Swapping the streams mirrors a histogram whose bins centre on the tagger's delays."""
        a = random_stream(2_000, 200_000, seed=5)
        b = random_stream(2_000, 200_000, seed=6)
        forward = cross_correlate(a, b, -50.5, 50.5, 1.0)
        backward = cross_correlate(b, a, -50.5, 50.5, 1.0)
        assert np.array_equal(forward.counts, backward.counts[::-1])

    def test_empty_stream(self):
        a = TimeTagStream.empty(1000)
        b = random_stream(100, 1000, seed=1)
        h = cross_correlate(a, b, -10.0, 10.0, 1.0)
        assert h.counts.sum() == 0
        assert h.counts.size == 20

    def test_rejects_mixed_bin_widths(self):
        with pytest.raises(ValueError, match="different bin widths"):
            cross_correlate(TimeTagStream([1], bin_width_fs=1000), TimeTagStream([1], bin_width_fs=2000), -1, 1, 1)

    def test_rejects_empty_range(self):
        a = random_stream(10, 100, seed=1)
        with pytest.raises(ValueError):
            cross_correlate(a, a, 5.0, 5.0, 1.0)


class TestCountCoincidences:
    def test_matches_brute_force(self):
        a = random_stream(1_000, 200_000, seed=7)
        b = random_stream(1_000, 200_000, seed=8)
        d = (b.bins[None, :] - a.bins[:, None]) * 1000
        expected = int(np.sum(2 * np.abs(d - 300_000) <= 80_000))
        assert count_coincidences(a, b, 300.0, 80.0) == expected
        assert count_coincidences(a, b, 300.0, 80.0, chunks=5, workers=2) == expected

    def test_window_edges_are_inclusive(self):
        a = TimeTagStream([100], bin_width_fs=1000)
        b = TimeTagStream([95, 105, 106], bin_width_fs=1000)
        assert count_coincidences(a, b, 0.0, 10.0) == 2

    def test_greedy_pairs_each_tag_once(self):
        a = TimeTagStream([100, 101], bin_width_fs=1000)
        b = TimeTagStream([100, 101, 102], bin_width_fs=1000)
        assert count_coincidences(a, b, 0.0, 10.0) == 6
        assert count_coincidences(a, b, 0.0, 10.0, mode=CoincidenceMode.GREEDY) == 2
        assert count_coincidences(a, b, 0.0, 10.0, mode="greedy") == 2

    def test_modes_agree_on_sparse_streams(self):
        a, b = correlated_streams()
        histogram = count_coincidences(a, b, 5.03e5, 823.0)
        greedy = count_coincidences(a, b, 5.03e5, 823.0, mode=CoincidenceMode.GREEDY)
        assert greedy <= histogram
        assert histogram - greedy <= 2
        assert histogram > 3_000

    @staticmethod
    def accidentals(rate_a_hz: float, rate_b_hz: float, seconds: int, seed: int) -> int:
        """Coincidences between independent Poisson streams, one second at a time."""
        rng = np.random.default_rng(seed)
        second_ps = 1_000_000_000_000

        def poisson(rate_hz):
            return TimeTagStream(np.sort(rng.integers(0, second_ps, rng.poisson(rate_hz))), bin_width_fs=1000)

        return sum(count_coincidences(poisson(rate_a_hz), poisson(rate_b_hz), 0.0, 823.0) for _ in range(seconds))

    @pytest.mark.slow
    def test_accidentals_at_link_rates(self):
        expected = 2.1e6 * 55 * 100 * 823e-12
        assert expected == pytest.approx(9.51, abs=0.01)
        n = self.accidentals(2.1e6, 55, 100, seed=21)
        assert abs(n - expected) <= 5 * np.sqrt(expected)

    @pytest.mark.slow
    def test_accidental_rate_follows_rate_product(self):
        expected = 2.1e6 * 5.5e5 * 10 * 823e-12
        n = self.accidentals(2.1e6, 5.5e5, 10, seed=22)
        assert n == pytest.approx(expected, rel=0.05)

    def test_empty(self):
        assert count_coincidences(TimeTagStream.empty(1000), random_stream(5, 10, seed=1), 0.0, 1.0) == 0

    def test_rejects_zero_window(self):
        a = random_stream(10, 100, seed=1)
        with pytest.raises(ValueError):
            count_coincidences(a, a, 0.0, 0.0)


class TestPeakFit:
    def make_histogram(self, center=12.0, fwhm=700.0, amplitude=2_000.0, baseline=5.0):
        width = 82.3
        start = -20_000.0
        centers = start + (np.arange(486) + 0.5) * width
        sigma = fwhm / constants.FWHM_PER_SIGMA
        counts = np.rint(amplitude * np.exp(-0.5 * ((centers - center) / sigma) ** 2) + baseline)
        return CorrelationHistogram(start, width, counts.astype(np.int64))

    def test_recovers_parameters(self):
        fit = fit_gaussian_peak(self.make_histogram())
        assert fit.center_ps == pytest.approx(12.0, abs=2.0)
        assert fit.fwhm_ps == pytest.approx(700.0, rel=0.02)
        assert fit.amplitude == pytest.approx(2_000.0, rel=0.02)
        assert fit.baseline == pytest.approx(5.0, abs=0.5)
        assert 0 < fit.center_stderr_ps < 5.0
        assert fit.sigma_ps == pytest.approx(fit.fwhm_ps / constants.FWHM_PER_SIGMA)

    def test_center_stderr_matches_replicate_scatter(self):
        rng = np.random.default_rng(5)
        clean = self.make_histogram(fwhm=400.0 * constants.FWHM_PER_SIGMA, amplitude=200.0, baseline=20.0)
        fits = [
            fit_gaussian_peak(CorrelationHistogram(clean.start_delay_ps, clean.bin_width_ps, rng.poisson(clean.counts)))
            for _ in range(100)
        ]
        scatter = np.std([f.center_ps for f in fits], ddof=1)
        reported = np.mean([f.center_stderr_ps for f in fits])
        assert 1 / 1.5 < scatter / reported < 1.5

    def test_flat_histogram_has_no_peak(self):
        h = CorrelationHistogram(0.0, 10.0, np.full(100, 50))
        with pytest.raises(NoPeakFoundError):
            fit_gaussian_peak(h)

    def test_empty_histogram_has_no_peak(self):
        with pytest.raises(NoPeakFoundError):
            fit_gaussian_peak(CorrelationHistogram(0.0, 10.0, np.zeros(100)))

    def test_sidecar(self, tmp_path):
        fit = fit_gaussian_peak(self.make_histogram())
        write_fit_sidecar(tmp_path / "fit.json", fit)
        data = orjson.loads((tmp_path / "fit.json").read_bytes())
        assert data["center_ps"] == pytest.approx(fit.center_ps)
        assert set(data) == {"center_ps", "center_stderr_ps", "fwhm_ps", "fwhm_stderr_ps", "amplitude", "baseline"}


class TestLocatePeak:
    def test_finds_delay(self):
        a, b = correlated_streams()
        search = locate_peak(a, b, search_range_ps=1e6, coarse_bin_ps=1e4, fine_span_ps=2e4)
        assert search.coarse_delay_ps == pytest.approx(5.05e5)
        assert search.fit.center_ps == pytest.approx(5.03e5, abs=20.0)
        assert search.fit.fwhm_ps == pytest.approx(300.0 * constants.FWHM_PER_SIGMA, rel=0.1)

    def test_fine_bins_follow_tagger(self):
        a, b = correlated_streams()
        search = locate_peak(a, b, expected_delay_ps=5.03e5, fine_span_ps=2e4)
        h = search.histogram
        assert h.bin_width_ps == pytest.approx(82.3)
        assert (h.start_delay_ps / 82.3) % 1.0 == pytest.approx(0.5, abs=1e-6)
        assert h.start_delay_ps <= 5.03e5 - 2e4
        assert h.end_delay_ps >= 5.03e5 + 2e4

    def test_uncorrelated_streams(self):
        a, _ = correlated_streams(seed=1)
        _, b = correlated_streams(seed=2)
        with pytest.raises(NoPeakFoundError):
            locate_peak(a, b, search_range_ps=1e6, coarse_bin_ps=1e4, fine_span_ps=2e4)


class TestHistogramHelpers:
    def test_background_rate(self):
        h = CorrelationHistogram(0.0, 10.0, np.r_[np.ones(45), np.full(10, 100), np.ones(45)])
        assert background_rate(h, 500.0, 60.0) == pytest.approx(0.1)

    def test_window_sum(self):
        h = CorrelationHistogram(0.0, 10.0, np.arange(10))
        assert h.window_sum(20.0, 40.0) == 2 + 3
        assert h.end_delay_ps == 100.0

    def test_csv(self, tmp_path):
        h = CorrelationHistogram(-41.15, 82.3, np.array([1, 5, 2]))
        write_histogram_csv(tmp_path / "h.csv", h)
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "delay_ps,counts"
        assert lines[1] == "0.000,1"
        back = read_histogram_csv(tmp_path / "h.csv")
        assert np.array_equal(back.counts, h.counts)
        assert back.bin_width_ps == pytest.approx(82.3)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            CorrelationHistogram(0.0, 1.0, np.empty(0))
