"""Tests for detectors, the time tagger and tag streams."""

import math

import numpy as np
import pytest

from polarlink.core import constants
from polarlink.core.detection import (
    PARTNER_ABSENT,
    PARTNER_BLOCKED,
    PARTNER_PASSED,
    DetectorConfig,
    TaggerConfig,
    TimeTagStream,
    conditional_operators,
    detect,
    detect_with_outcomes,
    local_detector,
    partner_outcomes,
    quantize,
    remote_detector,
    single_sided_click_probability,
)
from polarlink.core.errors import ConfigError
from polarlink.core.fibre_channel import PhotonBatch
from polarlink.core.quantum_state import PoincareRotation, PolarizationBasisSetting, make_phi_minus

H, V, D, A = (PolarizationBasisSetting.from_label(x) for x in "HVDA")
TAGGER = TaggerConfig()


def uniform_photons(n: int, duration_ps: float, seed: int = 0, rotation=None) -> PhotonBatch:
    rng = np.random.default_rng(seed)
    return PhotonBatch.at_times(np.sort(rng.integers(0, int(duration_ps), n)), make_phi_minus(), rotation)


class TestConfigs:
    def test_default_detectors(self):
        assert local_detector().efficiency == 0.6
        assert local_detector().dark_rate == 900.0
        assert remote_detector().efficiency == 0.12
        assert remote_detector().channel == constants.REMOTE_CHANNEL

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"efficiency": 1.2, "dark_rate": 0.0},
            {"efficiency": 0.5, "dark_rate": -1.0},
            {"efficiency": 0.5, "dark_rate": 0.0, "jitter_fwhm_ps": -1.0},
            {"efficiency": 0.5, "dark_rate": 0.0, "channel": 300},
            {"efficiency": 0.5, "dark_rate": 0.0, "analyzer_contrast": 1.5},
        ],
    )
    def test_detector_rejects_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            DetectorConfig(**kwargs)

    def test_tagger_bin_width_fs(self):
        assert TAGGER.bin_width_fs == 82300
        with pytest.raises(ConfigError):
            TaggerConfig(bin_width_ps=0.0)


class TestTimeTagStream:
    def test_rejects_unsorted(self):
        with pytest.raises(ValueError, match="not sorted"):
            TimeTagStream([3, 1, 2])

    def test_times(self):
        stream = TimeTagStream([0, 10, 20], bin_width_fs=82300)
        assert np.allclose(stream.times_ps, [0.0, 823.0, 1646.0])
        assert stream.bin_width_ps == 82.3

    def test_between_is_half_open(self):
        stream = TimeTagStream(np.arange(100), bin_width_fs=1000)
        part = stream.between(10.0, 20.0)
        assert part.bins[0] == 10
        assert part.bins[-1] == 19

    def test_first_bin_at_or_after(self):
        stream = TimeTagStream.empty(82300)
        assert stream.first_bin_at_or_after(0.0) == 0
        assert stream.first_bin_at_or_after(82.3) == 1
        assert stream.first_bin_at_or_after(83.0) == 2
        assert stream.first_bin_at_or_after(-165.0) == -2

    def test_merge_is_stable(self):
        a = TimeTagStream([1, 5, 9], [0, 0, 0], 1000)
        b = TimeTagStream([5, 6], [1, 1], 1000)
        merged = TimeTagStream.merge([a, b])
        assert list(merged.bins) == [1, 5, 5, 6, 9]
        assert list(merged.channels) == [0, 0, 1, 1, 0]
        assert merged.channel(1) == b

    def test_merge_rejects_mixed_widths(self):
        with pytest.raises(ValueError, match="different bin widths"):
            TimeTagStream.merge([TimeTagStream([1], bin_width_fs=1000), TimeTagStream([1], bin_width_fs=2000)])


class TestQuantize:
    def test_floor(self):
        bins = quantize(np.array([0, 82, 83, 823]), np.zeros(4), 82300)
        assert list(bins) == [0, 0, 1, 10]

    def test_offset_shifts_bins(self):
        assert quantize(np.array([100]), np.array([-30.0]), 82300)[0] == 0
        assert quantize(np.array([100]), np.array([-20.0]), 82300)[0] == 0
        assert quantize(np.array([100]), np.array([70.0]), 82300)[0] == 2

    def test_exact_for_long_runs(self):
        """Bin indices stay exact for arrival times of days."""
        t = np.array([10**17 + 823 * 7], dtype=np.int64)
        bins = quantize(t, np.zeros(1), 82300)
        assert bins[0] == (10**17 * 1000 + 823_000 * 7) // 82300


class TestClickProbabilities:
    def test_marginal_is_half(self):
        state = make_phi_minus()
        for basis in (H, V, D, A):
            assert single_sided_click_probability(state, basis) == pytest.approx(0.5)

    def test_rotation_does_not_change_marginal(self):
        rotation = PoincareRotation((1, 2, 0), 70.0)
        assert single_sided_click_probability(make_phi_minus(), D, rotation) == pytest.approx(0.5)

    def test_conditional_on_partner(self):
        """Given the local photon passed H, the remote photon of |Φ⁻⟩ is H."""
        ops = conditional_operators(make_phi_minus(), side=1, partner_setting=H)
        h = H.jones
        assert np.real(h.conj() @ ops[PARTNER_PASSED] @ h) == pytest.approx(1.0)
        assert np.real(h.conj() @ ops[PARTNER_BLOCKED] @ h) == pytest.approx(0.0, abs=1e-12)
        assert np.real(h.conj() @ ops[PARTNER_ABSENT] @ h) == pytest.approx(0.5)


class TestDetect:
    def test_efficiency_and_analyzer(self):
        photons = uniform_photons(200_000, 1e12)
        det = DetectorConfig(efficiency=0.4, dark_rate=0.0, channel=1)
        stream = detect(photons, H, det, TAGGER, 1.0, seed=1)
        expected = 200_000 * 0.5 * 0.4
        assert abs(len(stream) - expected) < 5 * math.sqrt(expected)
        assert set(np.unique(stream.channels)) == {1}

    def test_dark_counts_only(self):
        photons = uniform_photons(0, 1e12)
        det = DetectorConfig(efficiency=0.5, dark_rate=1000.0)
        result = detect_with_outcomes(photons, H, det, TAGGER, 10.0, seed=2, start_ps=5 * 10**12)
        assert abs(result.dark_count - 10_000) < 500
        assert len(result.stream) == result.dark_count
        times = result.stream.times_ps
        assert times.min() >= 5e12
        assert times.max() < 15e12

    def test_jitter_width(self):
        photons = PhotonBatch.at_times(np.arange(100_000, dtype=np.int64) * 10**6, make_phi_minus())
        det = DetectorConfig(efficiency=1.0, dark_rate=0.0, jitter_fwhm_ps=250.0)
        fine = TaggerConfig(bin_width_ps=1.0)
        result = detect_with_outcomes(photons, H, det, fine, 0.1, seed=3, side="local")
        clicked = np.isin(photons.pair_id, result.clicked_pair_ids)
        residual = result.stream.times_ps - photons.arrival_ps[clicked]
        assert constants.FWHM_PER_SIGMA * np.std(residual) == pytest.approx(250.0, rel=0.03)

    def test_sync_jitter_on_remote_side(self):
        photons = PhotonBatch.at_times(np.arange(100_000, dtype=np.int64) * 10**6, make_phi_minus())
        det = DetectorConfig(efficiency=1.0, dark_rate=0.0, jitter_fwhm_ps=0.0)
        fine = TaggerConfig(bin_width_ps=1.0, sync_jitter_fwhm_ps=500.0)
        result = detect_with_outcomes(photons, H, det, fine, 0.1, seed=3, side="remote")
        clicked = np.isin(photons.pair_id, result.clicked_pair_ids)
        residual = result.stream.times_ps - photons.arrival_ps[clicked]
        assert constants.FWHM_PER_SIGMA * np.std(residual) == pytest.approx(500.0, rel=0.03)

    def test_rejects_unknown_side(self):
        with pytest.raises(ValueError):
            detect(uniform_photons(10, 1e6), H, local_detector(), TAGGER, 1.0, seed=1, side="middle")

    def test_reproducible(self):
        photons = uniform_photons(10_000, 1e11)
        a = detect(photons, D, remote_detector(), TAGGER, 0.1, seed=5)
        b = detect(photons, D, remote_detector(), TAGGER, 0.1, seed=5)
        assert a == b

    def test_joint_statistics_follow_state(self):
        """Conditioned remote detection reproduces |Φ⁻⟩ correlations pair by pair."""
        n = 100_000
        local = PhotonBatch.at_times(np.arange(n, dtype=np.int64) * 10**6, make_phi_minus())
        remote = PhotonBatch.at_times(local.arrival_ps + 5000, make_phi_minus())
        det = DetectorConfig(efficiency=1.0, dark_rate=0.0, jitter_fwhm_ps=0.0)
        for a, b, expected in ((H, H, 0.5), (H, V, 0.0), (D, A, 0.5), (D, D, 0.0)):
            res_a = detect_with_outcomes(local, a, det, TAGGER, 0.1, seed=7, side="local")
            codes = partner_outcomes(remote, local, res_a.analyzer_pass)
            res_b = detect_with_outcomes(
                remote,
                b,
                det,
                TAGGER,
                0.1,
                seed=7,
                side="remote",
                partner_setting=a,
                partner_outcome=codes,
            )
            joint = np.intersect1d(res_a.clicked_pair_ids, res_b.clicked_pair_ids).size / n
            assert joint == pytest.approx(expected, abs=0.01)


class TestPartnerOutcomes:
    def test_codes(self):
        state = make_phi_minus()
        local = PhotonBatch(
            np.array([1, 3, 5]), np.zeros(3, np.int64), np.zeros(3, np.int64), np.zeros((3, 3)), state
        )
        remote = PhotonBatch(
            np.array([5, 2, 1]), np.zeros(3, np.int64), np.zeros(3, np.int64), np.zeros((3, 3)), state
        )
        codes = partner_outcomes(remote, local, np.array([True, False, False]))
        assert list(codes) == [PARTNER_BLOCKED, PARTNER_ABSENT, PARTNER_PASSED]

    def test_empty_local(self):
        remote = uniform_photons(5, 1e6)
        local = uniform_photons(0, 1e6)
        assert list(partner_outcomes(remote, local, np.empty(0, bool))) == [PARTNER_ABSENT] * 5
