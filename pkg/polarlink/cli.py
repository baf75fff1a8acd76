import logging
import math
from dataclasses import replace
from pathlib import Path

import click
import orjson

from . import __version__
from .config import DESCRIPTIONS, Config
from .core.analysis import AnalysisSettings, analyze, render_report, render_summary
from .core.errors import (
    CalibrationError,
    ConfigError,
    NoPeakFoundError,
    ScheduleMismatchError,
    TagFileError,
    UndefinedVisibilityError,
)
from .core.link_config import LinkConfig
from .core.simulation import calibrate_rates, expected_rates, run_simulation
from .core.timetag_analysis import (
    CoincidenceMode,
    cross_correlate,
    fit_gaussian_peak,
    write_fit_sidecar,
    write_histogram_csv,
)
from .utils.logging import setup_logging
from .utils.tagfile import load_stream
from .utils.units import TIME, format_time_ps

# Set up logging
setup_logging()
logger = logging.getLogger(__name__)

ANALYSIS_ERRORS = (
    NoPeakFoundError,
    ScheduleMismatchError,
    UndefinedVisibilityError,
    TagFileError,
    CalibrationError,
)


class AnalysisFailure(click.ClickException):
    """Analysis could not produce a result (exit code 2)."""

    exit_code = 2


class PolarlinkGroup(click.Group):
    """Command group mapping errors to exit codes: 1 for usage and config, 2 for analysis."""

    group_class = type

    def make_context(self, *args, **kwargs):
        try:
            return super().make_context(*args, **kwargs)
        except click.UsageError as e:
            e.exit_code = 1
            raise

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            e.exit_code = 1
            raise
        except ConfigError as e:
            raise click.ClickException(str(e)) from e
        except ANALYSIS_ERRORS as e:
            raise AnalysisFailure(str(e)) from e


def _parse_overrides(values: tuple[str, ...]) -> dict[str, str]:
    overrides = {}
    for item in values:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise click.BadParameter(f"expected KEY=VALUE, got {item!r}", param_hint="--set")
        overrides[key.strip()] = value.strip()
    return overrides


def _load_link_config(path: str | None, overrides: dict[str, str]) -> LinkConfig:
    if path is None:
        return LinkConfig.from_flat(overrides)
    return LinkConfig.from_file(path, overrides)


@click.group(cls=PolarlinkGroup)
def cli():
    """polarlink - entangled-photon fibre link simulator and analysis toolkit"""
    pass


@cli.command()
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False), help="Link-config file")
@click.option("--seed", type=int, default=0, show_default=True, help="Run seed")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True, help="Output directory")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override one link-config key")
@click.option("--rate-scale", type=float, help="Divide rates and stretch durations by this factor")
@click.option("--chunk-seconds", type=float, help="Generation chunk length in seconds")
@click.option("--workers", type=int, help="Worker threads")
@click.option("--csv", "write_csv", is_flag=True, help="Also write the tag streams as CSV")
def simulate(config_file, seed, out_dir, overrides, rate_scale, chunk_seconds, workers, write_csv):
    """Simulate the link and write tag files plus a run manifest"""
    cfg = Config()
    rate_scale = rate_scale if rate_scale is not None else cfg.get("rate_scale")
    chunk_seconds = chunk_seconds if chunk_seconds is not None else cfg.get("chunk_seconds")
    workers = workers if workers is not None else cfg.get("workers")

    link = _load_link_config(config_file, _parse_overrides(overrides)).scaled(rate_scale)
    blocks = link.blocks()
    click.echo(
        f"Simulating {len(blocks)} blocks ({link.total_duration_s:g} s) with seed {seed}"
        + (f", rates scaled by 1/{rate_scale:g}" if rate_scale != 1 else "")
    )
    result = run_simulation(
        link,
        seed,
        out_dir,
        chunk_seconds=chunk_seconds,
        workers=workers,
        write_csv=write_csv,
        extra_manifest={"rate_scale": rate_scale},
    )
    for block in result.blocks:
        click.echo(
            f"  {block.index:4d} {block.labels}  local {block.singles_local / block.duration_s:12.1f}/s  "
            f"remote {block.singles_remote / block.duration_s:8.2f}/s  true pairs {block.true_pairs}"
        )
    click.echo(f"✅ Wrote {result.tags_local.name}, {result.tags_remote.name} and {result.manifest.name} to {out_dir}")


@cli.command("analyze")
@click.option("--tags-a", type=click.Path(exists=True, dir_okay=False), required=True, help="Local tag file")
@click.option("--tags-b", type=click.Path(exists=True, dir_okay=False), required=True, help="Remote tag file")
@click.option("--schedule", type=click.Path(exists=True), required=True, help="Run manifest or link-config file")
@click.option("--window", type=TIME, help="Coincidence window, e.g. 823ps")
@click.option("--mode", type=click.Choice([m.value for m in CoincidenceMode]), help="Coincidence counting mode")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Directory for CSV and summary output")
@click.option("--ec-efficiency", type=float, help="Error-correction efficiency f")
@click.option("--workers", type=int, help="Worker threads")
@click.option("--json", "as_json", is_flag=True, help="Print the summary as JSON")
def analyze_command(tags_a, tags_b, schedule, window, mode, out_dir, ec_efficiency, workers, as_json):
    """Analyze two tag files against a measurement schedule"""
    cfg = Config()
    if window is None and cfg.source_of("window_ps") != "default":
        window = cfg.get("window_ps")
    settings = AnalysisSettings(
        window_ps=window,
        mode=CoincidenceMode(mode or CoincidenceMode.HISTOGRAM),
        ec_efficiency=ec_efficiency if ec_efficiency is not None else cfg.get("ec_efficiency"),
        search_range_ps=cfg.get("search_range_ps"),
        coarse_bin_ps=cfg.get("coarse_bin_ps"),
        fine_span_ps=cfg.get("fine_span_ps"),
        workers=workers if workers is not None else cfg.get("workers"),
    )
    report = analyze(tags_a, tags_b, schedule, out_dir, settings)
    if as_json:
        click.echo(orjson.dumps(report.summary, option=orjson.OPT_INDENT_2 | orjson.OPT_SERIALIZE_NUMPY).decode())
    else:
        click.echo(render_summary(report.summary), nl=False)
    if out_dir:
        click.echo(f"✅ Wrote analysis to {out_dir}")


@cli.command()
@click.option("--tags-a", type=click.Path(exists=True, dir_okay=False), required=True, help="Start tag file")
@click.option("--tags-b", type=click.Path(exists=True, dir_okay=False), required=True, help="Stop tag file")
@click.option("--min", "delay_min", type=TIME, required=True, help="Lower delay, e.g. -1.2ms")
@click.option("--max", "delay_max", type=TIME, required=True, help="Upper delay, e.g. 1.2ms")
@click.option("--bin", "bin_width", type=TIME, required=True, help="Histogram bin width, e.g. 82.3ps")
@click.option("--tag-bin", type=TIME, help="Tagger bin width for CSV tag files")
@click.option("--out", "out_file", type=click.Path(dir_okay=False), help="Histogram CSV (default: correlation.csv)")
@click.option("--fit", is_flag=True, help="Fit a Gaussian peak and write a JSON sidecar")
@click.option("--workers", type=int, help="Worker threads")
def correlate(tags_a, tags_b, delay_min, delay_max, bin_width, tag_bin, out_file, fit, workers):
    """Cross-correlate two tag files"""
    cfg = Config()
    workers = workers if workers is not None else cfg.get("workers")
    if delay_min >= delay_max:
        raise click.BadParameter("--min must be below --max", param_hint="--min")
    if bin_width <= 0:
        raise click.BadParameter("bin width must be positive", param_hint="--bin")
    if (delay_max - delay_min) / bin_width > 5e7:
        raise click.BadParameter("more than 5e7 histogram bins; use a wider --bin", param_hint="--bin")

    tag_bin_fs = int(round(tag_bin * 1000)) if tag_bin is not None else None
    a = load_stream(tags_a, tag_bin_fs)
    b = load_stream(tags_b, tag_bin_fs)
    h = cross_correlate(a, b, delay_min, delay_max, bin_width, chunks=workers, workers=workers)
    out_path = Path(out_file or "correlation.csv")
    write_histogram_csv(out_path, h)

    k = int(h.counts.argmax())
    click.echo(f"{len(a)} x {len(b)} tags, {h.counts.size} bins, {int(h.counts.sum())} pairs in range")
    click.echo(f"Maximum bin at {format_time_ps(float(h.centers_ps[k]))} with {int(h.counts[k])} counts")
    if fit:
        peak = fit_gaussian_peak(h)
        write_fit_sidecar(out_path.with_suffix(".json"), peak)
        click.echo(
            f"Peak at {peak.center_ps:.1f} ± {peak.center_stderr_ps:.1f} ps, "
            f"FWHM {peak.fwhm_ps:.1f} ± {peak.fwhm_stderr_ps:.1f} ps"
        )
    click.echo(f"✅ Wrote {out_path}")


@cli.command()
@click.option("--local-singles", type=float, default=2.1e6, show_default=True, help="Target local singles per s")
@click.option("--coincidences", type=float, default=4.3, show_default=True, help="Target correlated coincidences per s")
@click.option("--remote-singles", type=float, default=55.0, show_default=True, help="Target remote singles per s")
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False), help="Link-config file")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override one link-config key")
@click.option("--write", "write_file", type=click.Path(dir_okay=False), help="Write the calibrated link config here")
def calibrate(local_singles, coincidences, remote_singles, config_file, overrides, write_file):
    """Fit pair rate and coupling factors to measured rates"""
    link = _load_link_config(config_file, _parse_overrides(overrides))
    source = calibrate_rates(local_singles, coincidences, link, target_remote_singles=remote_singles)
    click.echo(f"source.pair_rate = {source.pair_rate:.6g}")
    click.echo(f"source.local_coupling = {source.local_coupling:.6g}")
    click.echo(f"source.remote_coupling = {source.remote_coupling:.6g}")
    if write_file:
        replace(link, source=source).to_file(write_file)
        click.echo(f"✅ Wrote calibrated link config to {write_file}")


@cli.command()
@click.option("--in", "in_dir", type=click.Path(exists=True, file_okay=False), help="Analysis output directory")
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False), help="Link-config file")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override one link-config key")
def report(in_dir, config_file, overrides):
    """Show an analysis summary, or the rates a link config should produce"""
    if in_dir:
        click.echo(render_report(in_dir), nl=False)
        return

    link = _load_link_config(config_file, _parse_overrides(overrides))
    click.echo(f"Expected rates per block (window {link.window_ps:g} ps):")
    seen = set()
    for block in link.schedule:
        if block.labels in seen:
            continue
        seen.add(block.labels)
        r = expected_rates(link, block)
        click.echo(
            f"  {block.labels}  local {r.singles_local:12.1f}/s  remote {r.singles_remote:8.2f}/s  "
            f"coincidences {r.coincidences:7.3f}/s (true {r.true_coincidences:.3f}, "
            f"accidental {r.accidental_coincidences:.4f})"
        )
    first = expected_rates(link, link.schedule[0])
    click.echo(f"Timing FWHM {first.timing_fwhm_ps:.1f} ps, window efficiency {first.window_efficiency:.3f}")


@cli.command()
def version():
    """Show version information"""
    click.echo(f"polarlink v{__version__}")


@cli.group()
def config():
    """Manage configuration settings"""
    pass


@config.command("show")
@click.option("--json", "as_json", is_flag=True, help="Output in JSON format")
def show_config(as_json):
    """Show current configuration"""
    cfg = Config()
    config_data = cfg.get_all()

    if as_json:
        click.echo(orjson.dumps(config_data, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS).decode())
    else:
        click.echo("Current configuration:")
        for key, value in sorted(config_data.items()):
            click.echo(f"  {key}: {value} (from {cfg.source_of(key)})")


@config.command("set")
@click.argument("key")
@click.argument("value")
def set_config(key, value):
    """Set a configuration value"""
    cfg = Config()

    if key not in Config.DEFAULTS:
        raise click.ClickException(
            f"Unknown configuration key '{key}'. Valid keys: {', '.join(sorted(Config.DEFAULTS.keys()))}"
        )

    default = Config.DEFAULTS[key]
    if isinstance(default, int):
        try:
            value = int(value)
        except ValueError:
            raise click.ClickException(f"{key} must be an integer") from None
    elif isinstance(default, float):
        try:
            value = float(value)
        except ValueError:
            raise click.ClickException(f"{key} must be a number") from None
        if not math.isfinite(value):
            raise click.ClickException(f"{key} must be finite")

    cfg.set(key, value)
    click.echo(f"✅ Set {key} = {value}")


@config.command("unset")
@click.argument("key")
def unset_config(key):
    """Remove a configuration value"""
    cfg = Config()
    cfg.unset(key)
    click.echo(f"✅ Removed {key} from config file")


@cli.command(name="help")
def show_help():
    """Show detailed help and usage examples"""
    keys = "\n".join(
        f"  {key:<18}- {DESCRIPTIONS[key]} (default: {default})" for key, default in Config.DEFAULTS.items()
    )
    click.echo(
        f"""polarlink - entangled-photon fibre link simulator and analysis toolkit

Usage Examples:

  # Simulate the default 192 km link for one eight-block cycle
  polarlink simulate --seed 1 --out run1

  # Same at 1/100 of the rates, 100x longer blocks
  polarlink simulate --seed 1 --out run1 --rate-scale 100

  # Override single link parameters
  polarlink simulate --out run2 --set channel.loss_db=40dB --set schedule.repeat=4

  # Analyze a run
  polarlink analyze --tags-a run1/tags_local.qtt --tags-b run1/tags_remote.qtt \\
      --schedule run1/manifest.json --window 823ps --out run1/analysis

  # Cross-correlate over the full delay search range
  polarlink correlate --tags-a run1/tags_local.qtt --tags-b run1/tags_remote.qtt \\
      --min -1.2ms --max 1.2ms --bin 10ns

  # Fit source rate and couplings to measured rates
  polarlink calibrate --local-singles 2.1e6 --coincidences 4.3

  # Show a stored analysis summary, or the rates a config predicts
  polarlink report --in run1/analysis
  polarlink report --config link.conf

  # Show and change settings
  polarlink config show
  polarlink config set workers 4

Configuration Keys:
{keys}

Exit codes: 0 success, 1 usage or configuration error, 2 analysis failure.
"""
    )
