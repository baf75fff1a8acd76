"""Tests for the SPDC pair source."""

import numpy as np
import pytest

from polarlink.core import constants
from polarlink.core.errors import ConfigError
from polarlink.core.pair_source import (
    CHUNK_ID_SHIFT,
    ITU_32,
    ItuChannel,
    PairBatch,
    PairEvent,
    SourceConfig,
    chunk_bounds,
    generate_pairs,
    iter_pair_chunks,
)
from polarlink.core.quantum_state import fidelity_to_phi_minus


class TestSourceConfig:
    def test_defaults(self):
        cfg = SourceConfig()
        assert cfg.pair_rate == constants.PAIR_RATE
        assert cfg.signal_channel.number == 32
        assert cfg.idler_channel.number == 36

    def test_state_has_configured_fidelity(self):
        assert fidelity_to_phi_minus(SourceConfig(local_fidelity=0.9).state()) == pytest.approx(0.9)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"pair_rate": -1.0},
            {"local_fidelity": 0.1},
            {"local_coupling": 1.5},
            {"remote_coupling": -0.1},
        ],
    )
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            SourceConfig(**kwargs)

    def test_remote_coupling_may_exceed_one(self):
        assert SourceConfig(remote_coupling=1.6).remote_coupling == 1.6

    def test_itu_sigma(self):
        assert ITU_32.sigma_nm == pytest.approx(0.6 / 2.3548, rel=1e-4)
        with pytest.raises(ConfigError):
            ItuChannel(32, 1551.72, 0.0)


class TestChunkBounds:
    def test_covers_interval(self):
        assert chunk_bounds(10, 25, 10) == [(10, 20), (20, 30), (30, 35)]

    def test_single_chunk(self):
        assert chunk_bounds(0, 5, 10) == [(0, 5)]

    def test_rejects_zero_chunk(self):
        with pytest.raises(ValueError):
            chunk_bounds(0, 5, 0)


class TestGeneratePairs:
    def setup_method(self):
        self.cfg = SourceConfig(pair_rate=2e5)

    def test_count_is_poisson(self):
        batch = generate_pairs(self.cfg, 1.0, seed=7)
        expected = self.cfg.pair_rate
        assert abs(len(batch) - expected) < 5 * np.sqrt(expected)

    def test_times_strictly_increasing_and_in_range(self):
        batch = generate_pairs(self.cfg, 0.5, seed=1, chunk_seconds=0.1)
        assert np.all(np.diff(batch.emission_ps) > 0)
        assert batch.emission_ps[0] >= 0
        assert batch.emission_ps[-1] < 0.5 * constants.PS_PER_SECOND

    def test_reproducible(self):
        a = generate_pairs(self.cfg, 0.2, seed=3)
        b = generate_pairs(self.cfg, 0.2, seed=3)
        assert np.array_equal(a.emission_ps, b.emission_ps)
        assert np.array_equal(a.signal_offset_nm, b.signal_offset_nm)

    def test_seeds_differ(self):
        a = generate_pairs(self.cfg, 0.2, seed=3)
        b = generate_pairs(self.cfg, 0.2, seed=4)
        assert not np.array_equal(a.emission_ps[:100], b.emission_ps[:100])

    def test_chunks_are_independent_of_order(self):
        """Any chunk can be regenerated alone and matches the full sequence."""
        chunks = dict(iter_pair_chunks(self.cfg, 1.0, seed=5, chunk_seconds=0.25))
        again = dict(iter_pair_chunks(self.cfg, 1.0, seed=5, chunk_seconds=0.25))
        for index in (3, 0, 2, 1):
            assert np.array_equal(chunks[index].emission_ps, again[index].emission_ps)
        full = generate_pairs(self.cfg, 1.0, seed=5, chunk_seconds=0.25)
        assert np.array_equal(full.emission_ps, np.concatenate([chunks[i].emission_ps for i in range(4)]))

    def test_blocks_draw_distinct_streams(self):
        (_, first), *_ = iter_pair_chunks(self.cfg, 0.1, seed=5, block=0)
        (_, second), *_ = iter_pair_chunks(self.cfg, 0.1, seed=5, block=1)
        assert not np.array_equal(first.signal_offset_nm[:50], second.signal_offset_nm[:50])

    def test_pair_ids_unique_across_chunks(self):
        batch = generate_pairs(self.cfg, 1.0, seed=2, chunk_seconds=0.25)
        assert np.unique(batch.pair_id).size == len(batch)
        assert int(batch.pair_id[-1]) >> CHUNK_ID_SHIFT == 3

    def test_wavelength_offsets_follow_filter(self):
        batch = generate_pairs(self.cfg, 1.0, seed=11)
        assert np.mean(batch.signal_offset_nm) == pytest.approx(0.0, abs=0.005)
        assert np.std(batch.signal_offset_nm) == pytest.approx(ITU_32.sigma_nm, rel=0.02)

    def test_zero_rate(self):
        batch = generate_pairs(SourceConfig(pair_rate=0.0), 1.0, seed=1)
        assert len(batch) == 0

    def test_rejects_non_positive_duration(self):
        with pytest.raises(ValueError):
            list(iter_pair_chunks(self.cfg, 0.0, seed=1))

    def test_high_rate_tie_breaking(self):
        """Integer-ps collisions at high rates are nudged to keep times strictly increasing."""
        batch = generate_pairs(SourceConfig(pair_rate=5e10), 1e-6, seed=1)
        assert len(batch) > 1000
        assert np.all(np.diff(batch.emission_ps) > 0)


class TestPairBatch:
    def test_indexing(self):
        batch = generate_pairs(SourceConfig(pair_rate=1e4), 0.1, seed=1)
        event = batch[0]
        assert isinstance(event, PairEvent)
        assert event.emission_time_ps == int(batch.emission_ps[0])
        assert event.state is batch.state
        assert len(batch[:3]) == 3

    def test_concatenate_rejects_empty(self):
        with pytest.raises(ValueError):
            PairBatch.concatenate([])
