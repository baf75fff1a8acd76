"""Tests for CLI commands."""

import os
from pathlib import Path
from unittest.mock import patch

import numpy as np
import orjson
import pytest
from click.testing import CliRunner

from polarlink.cli import cli
from polarlink.core.detection import TimeTagStream
from polarlink.core.link_config import LinkConfig
from polarlink.utils.tagfile import write_tags

SMALL_LINK = [
    "source.pair_rate=1e5",
    "source.local_coupling=0.5",
    "source.remote_coupling=1.0",
    "channel.loss_db=3dB",
    "channel.base_delay=5us",
    "channel.residual_rotvec=0,0,0",
    "channel.drift_speed=0",
    "detector_remote.efficiency=0.5",
    "schedule=H-V 0.25s; V-H 0.25s; H-H 0.25s; V-V 0.25s; D-A 0.25s; A-D 0.25s; D-D 0.25s; A-A 0.25s",
]


def set_args(items: list[str]) -> list[str]:
    return [arg for item in items for arg in ("--set", item)]


class TestCLICommands:
    """Test CLI commands."""

    def setup_method(self):
        self.runner = CliRunner()

    def invoke(self, args):
        """Run the CLI with the config directory inside the isolated filesystem."""
        with patch("polarlink.config.Path.home") as mock_home:
            mock_home.return_value = Path(".")
            return self.runner.invoke(cli, args)

    def test_version_command(self):
        result = self.runner.invoke(cli, ["version"])
        assert result.exit_code == 0
        assert "polarlink v" in result.output

    def test_help_command(self):
        result = self.runner.invoke(cli, ["help"])
        assert result.exit_code == 0
        assert "Usage Examples:" in result.output
        assert "Configuration Keys:" in result.output
        assert "window_ps" in result.output
        assert "Exit codes" in result.output

    def test_unknown_command_is_usage_error(self):
        result = self.runner.invoke(cli, ["teleport"])
        assert result.exit_code == 1

    def test_missing_required_option(self):
        result = self.runner.invoke(cli, ["simulate"])
        assert result.exit_code == 1
        assert "--out" in result.output

    def test_calibrate(self):
        with self.runner.isolated_filesystem():
            result = self.invoke(["calibrate"])
            assert result.exit_code == 0
            values = dict(line.split(" = ") for line in result.output.splitlines() if " = " in line)
            assert float(values["source.pair_rate"]) == pytest.approx(2.279e7, rel=0.01)
            assert float(values["source.local_coupling"]) == pytest.approx(0.307, rel=0.01)
            assert float(values["source.remote_coupling"]) == pytest.approx(1.615, rel=0.01)

    def test_calibrate_writes_config(self):
        with self.runner.isolated_filesystem():
            result = self.invoke(["calibrate", "--write", "calibrated.conf"])
            assert result.exit_code == 0
            assert "✅ Wrote calibrated link config to calibrated.conf" in result.output
            link = LinkConfig.from_file("calibrated.conf")
            assert link.source.pair_rate == pytest.approx(2.279e7, rel=0.01)

    def test_calibrate_unreachable_target(self):
        with self.runner.isolated_filesystem():
            result = self.invoke(["calibrate", "--coincidences", "100"])
            assert result.exit_code == 2
            assert "local coupling" in result.output

    def test_report_expected_rates(self):
        with self.runner.isolated_filesystem():
            result = self.invoke(["report"])
            assert result.exit_code == 0
            assert "Expected rates per block (window 823 ps):" in result.output
            for labels in ("H-V", "V-H", "H-H", "V-V", "D-A", "A-D", "D-D", "A-A"):
                assert f"  {labels}  local" in result.output
            assert "Timing FWHM 950.1 ps" in result.output

    def test_report_with_overrides(self):
        with self.runner.isolated_filesystem():
            result = self.invoke(["report", "--set", "schedule=D-A 10s", "--set", "analysis.window=1ns"])
            assert result.exit_code == 0
            assert "window 1000 ps" in result.output
            assert "H-V" not in result.output

    def test_bad_override(self):
        with self.runner.isolated_filesystem():
            result = self.invoke(["report", "--set", "schedule"])
            assert result.exit_code == 1
            assert "expected KEY=VALUE" in result.output

    def test_unknown_link_key(self):
        with self.runner.isolated_filesystem():
            result = self.invoke(["simulate", "--out", "run", "--set", "source.colour=blue"])
            assert result.exit_code == 1
            assert "unknown key" in result.output

    def test_simulate_then_analyze(self):
        with self.runner.isolated_filesystem():
            result = self.invoke(["simulate", "--seed", "2", "--out", "run", *set_args(SMALL_LINK)])
            assert result.exit_code == 0, result.output
            assert "Simulating 8 blocks (2 s) with seed 2" in result.output
            assert "✅ Wrote tags_local.qtt, tags_remote.qtt and manifest.json to run" in result.output

            args = ["--tags-a", "run/tags_local.qtt", "--tags-b", "run/tags_remote.qtt", "--schedule", "run"]
            result = self.invoke(["analyze", *args, "--out", "analysis"])
            assert result.exit_code == 0, result.output
            assert "visibility_hv=" in result.output
            assert "✅ Wrote analysis to analysis" in result.output
            summary = orjson.loads(Path("analysis/summary.json").read_bytes())
            assert summary["visibility_hv"] > 0.9
            assert summary["peak_delay_ps"] == pytest.approx(5e6, abs=50.0)

            result = self.invoke(["report", "--in", "analysis"])
            assert result.exit_code == 0
            assert "visibility_hv=" in result.output

            result = self.invoke(["report", "--in", "run"])
            assert result.exit_code == 2

            swapped = ["--tags-a", "run/tags_remote.qtt", "--tags-b", "run/tags_local.qtt", "--schedule", "run"]
            result = self.invoke(["analyze", *swapped])
            assert result.exit_code == 2
            assert "does not match" in result.output

    def test_simulate_with_rate_scale(self):
        with self.runner.isolated_filesystem():
            small = [*SMALL_LINK[:-1], "schedule=H-V 0.1s"]
            result = self.invoke(["simulate", "--out", "run", "--rate-scale", "2", *set_args(small)])
            assert result.exit_code == 0, result.output
            assert "rates scaled by 1/2" in result.output
            manifest = orjson.loads(Path("run/manifest.json").read_bytes())
            assert manifest["rate_scale"] == 2.0
            assert manifest["blocks"][0]["duration_s"] == pytest.approx(0.2)


class TestCorrelateCommand:
    def setup_method(self):
        self.runner = CliRunner()

    def write_pair(self, delay_bins: int = 500, jitter_bins: float = 30.0, n: int = 2000):
        rng = np.random.default_rng(4)
        a = np.sort(rng.choice(10**9, n, replace=False)).astype(np.int64)
        b = np.sort(a + delay_bins + np.rint(rng.normal(0.0, jitter_bins, n)).astype(np.int64))
        write_tags("a.qtt", TimeTagStream(a, bin_width_fs=1000))
        write_tags("b.qtt", TimeTagStream(b, bin_width_fs=1000))

    def test_small_histogram(self):
        with self.runner.isolated_filesystem():
            write_tags("a.qtt", TimeTagStream([0, 1000], bin_width_fs=1000))
            write_tags("b.qtt", TimeTagStream([10, 1010], bin_width_fs=1000))
            args = ["correlate", "--tags-a", "a.qtt", "--tags-b", "b.qtt", "--min", "-20ps", "--max", "20ps"]
            result = self.runner.invoke(cli, [*args, "--bin", "1ps", "--out", "h.csv"])
            assert result.exit_code == 0, result.output
            assert "2 x 2 tags, 40 bins, 2 pairs in range" in result.output
            assert "Maximum bin at 10.5ps with 2 counts" in result.output
            assert "✅ Wrote h.csv" in result.output
            assert Path("h.csv").read_text().splitlines()[0] == "delay_ps,counts"

    def test_fit(self):
        with self.runner.isolated_filesystem():
            self.write_pair()
            args = ["correlate", "--tags-a", "a.qtt", "--tags-b", "b.qtt", "--min", "0", "--max", "1ns"]
            result = self.runner.invoke(cli, [*args, "--bin", "10ps", "--fit"])
            assert result.exit_code == 0, result.output
            assert "Peak at " in result.output
            fit = orjson.loads(Path("correlation.json").read_bytes())
            assert fit["center_ps"] == pytest.approx(500.0, abs=5.0)

    def test_fit_without_peak(self):
        with self.runner.isolated_filesystem():
            self.write_pair()
            args = ["correlate", "--tags-a", "a.qtt", "--tags-b", "b.qtt", "--min", "-5ns", "--max", "-4ns"]
            result = self.runner.invoke(cli, [*args, "--bin", "10ps", "--fit"])
            assert result.exit_code == 2
            assert "no peak found" in result.output

    def test_empty_range(self):
        with self.runner.isolated_filesystem():
            self.write_pair()
            args = ["correlate", "--tags-a", "a.qtt", "--tags-b", "b.qtt", "--min", "5ps", "--max", "5ps"]
            result = self.runner.invoke(cli, [*args, "--bin", "1ps"])
            assert result.exit_code == 1
            assert "--min must be below --max" in result.output

    def test_bad_time(self):
        with self.runner.isolated_filesystem():
            self.write_pair()
            args = ["correlate", "--tags-a", "a.qtt", "--tags-b", "b.qtt", "--min", "soon", "--max", "5ps"]
            result = self.runner.invoke(cli, [*args, "--bin", "1ps"])
            assert result.exit_code == 1


class TestConfigCommands:
    def setup_method(self):
        self.runner = CliRunner()

    def invoke(self, args):
        with patch("polarlink.config.Path.home") as mock_home:
            mock_home.return_value = Path(".")
            return self.runner.invoke(cli, args)

    def test_config_show(self):
        with self.runner.isolated_filesystem():
            result = self.invoke(["config", "show"])
            assert result.exit_code == 0
            assert "Current configuration:" in result.output
            assert "workers: 1 (from default)" in result.output

    def test_config_show_json(self):
        with self.runner.isolated_filesystem():
            result = self.invoke(["config", "show", "--json"])
            assert result.exit_code == 0
            config_data = orjson.loads(result.output)
            assert config_data["workers"] == 1
            assert config_data["window_ps"] == 823.0

    def test_config_set(self):
        with self.runner.isolated_filesystem():
            result = self.invoke(["config", "set", "workers", "4"])
            assert result.exit_code == 0
            assert "✅ Set workers = 4" in result.output
            config_data = orjson.loads(self.invoke(["config", "show", "--json"]).output)
            assert config_data["workers"] == 4
            assert "workers: 4 (from config file)" in self.invoke(["config", "show"]).output

    def test_config_set_float(self):
        with self.runner.isolated_filesystem():
            result = self.invoke(["config", "set", "window_ps", "1200"])
            assert result.exit_code == 0
            assert "✅ Set window_ps = 1200.0" in result.output

    def test_config_set_invalid_key(self):
        with self.runner.isolated_filesystem():
            result = self.invoke(["config", "set", "invalid_key", "value"])
            assert result.exit_code == 1
            assert "Unknown configuration key 'invalid_key'" in result.output
            assert "Valid keys:" in result.output

    def test_config_set_invalid_integer(self):
        with self.runner.isolated_filesystem():
            result = self.invoke(["config", "set", "workers", "many"])
            assert result.exit_code == 1
            assert "workers must be an integer" in result.output

    def test_config_set_invalid_number(self):
        with self.runner.isolated_filesystem():
            result = self.invoke(["config", "set", "window_ps", "wide"])
            assert result.exit_code == 1
            assert "window_ps must be a number" in result.output

    def test_config_unset(self):
        with self.runner.isolated_filesystem():
            self.invoke(["config", "set", "workers", "4"])
            result = self.invoke(["config", "unset", "workers"])
            assert result.exit_code == 0
            assert "✅ Removed workers from config file" in result.output
            assert "workers: 1 (from default)" in self.invoke(["config", "show"]).output

    def test_config_environment_override(self):
        with self.runner.isolated_filesystem():
            self.invoke(["config", "set", "workers", "4"])
            with patch.dict(os.environ, {"POLARLINK_WORKERS": "3"}):
                result = self.invoke(["config", "show"])
                assert "workers: 3 (from environment)" in result.output
