"""
Link configuration: every physical parameter of one experiment.

Link-config files are flat ``key = value`` text with dotted keys, read with
python-dotenv::

    # 192 km submarine loop, default figures
    source.pair_rate = 2.279e7
    channel.loss_db = 48 dB
    detector_remote.jitter_fwhm = 176.8 ps
    schedule = H-V 100s; V-H 100s; H-H 100s; V-V 100s
    schedule.repeat = 29

Values may carry units (ps, ns, us, ms, s, dB, nm, deg). Keys that are
absent keep their default; unknown keys are rejected.
"""

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np
from dotenv import dotenv_values

from ..utils.units import parse_plain, parse_seconds, parse_time_ps
from . import constants
from .detection import DetectorConfig, TaggerConfig, local_detector, remote_detector
from .environment import TemperatureProfile, ThermalConstants, load_temperature_profile
from .errors import ConfigError
from .fibre_channel import ChannelConfig
from .pair_source import ItuChannel, SourceConfig
from .quantum_state import LABEL_ANGLES, PoincareRotation, PolarizationBasisSetting

logger = logging.getLogger(__name__)


class LabelConvention(str, Enum):
    """How analyzer labels map to physical polarizer angles.

    REFLECTED mirrors the remote analyzer (θ → 90° - θ) so that H-V, V-H, D-A and
    A-D are the correlated combinations for |Φ⁻⟩. LITERAL uses the label
    angles on both sides.
    """

    REFLECTED = "reflected"
    LITERAL = "literal"


@dataclass(frozen=True)
class MeasurementBlock:
    label_a: str
    label_b: str
    duration_s: float

    def __post_init__(self):
        for label in (self.label_a, self.label_b):
            if label not in LABEL_ANGLES:
                raise ConfigError(f"unknown analyzer label {label!r}", "schedule")
        if not self.duration_s > 0:
            raise ConfigError(f"block duration must be positive, got {self.duration_s}", "schedule")

    @property
    def labels(self) -> str:
        return f"{self.label_a}-{self.label_b}"

    def __str__(self) -> str:
        return f"{self.labels} {self.duration_s:g}s"


PROTOCOL_ORDER = ("H-V", "V-H", "H-H", "V-V", "D-A", "A-D", "D-D", "A-A")

DEFAULT_SCHEDULE = tuple(MeasurementBlock(p[0], p[2], constants.BLOCK_DURATION_S) for p in PROTOCOL_ORDER)


def parse_schedule(text: str) -> tuple[MeasurementBlock, ...]:
    """Parse ``"H-V 100s; V-H 84s"`` into blocks."""
    blocks = []
    for item in text.split(";"):
        item = item.strip()
        if not item:
            continue
        parts = item.split()
        if len(parts) != 2 or parts[0].count("-") != 1:
            raise ConfigError(f"cannot parse block {item!r}, expected e.g. 'H-V 100s'", "schedule")
        a, b = (x.strip().upper() for x in parts[0].split("-"))
        try:
            duration = parse_seconds(parts[1])
        except ValueError as e:
            raise ConfigError(str(e), "schedule") from e
        blocks.append(MeasurementBlock(a, b, duration))
    if not blocks:
        raise ConfigError("schedule has no blocks", "schedule")
    return tuple(blocks)


def format_schedule(blocks: tuple[MeasurementBlock, ...]) -> str:
    return "; ".join(str(b) for b in blocks)


def _parse_profile(text: str) -> TemperatureProfile:
    """Inline profile ``"0:0, 8208:0, 22608:0.022"`` of time_s:offset_K points."""
    points = [p.strip() for p in text.split(",") if p.strip()]
    try:
        pairs = [tuple(float(v) for v in p.split(":")) for p in points]
    except ValueError as e:
        raise ConfigError(f"cannot parse profile point: {e}", "thermal.profile") from e
    if any(len(p) != 2 for p in pairs):
        raise ConfigError("profile points must be time_s:offset_K", "thermal.profile")
    arr = np.array(pairs, dtype=float).reshape(-1, 2)
    return TemperatureProfile(arr[:, 0], arr[:, 1])


def _format_profile(profile: TemperatureProfile) -> str:
    return ", ".join(f"{t!r}:{k!r}" for t, k in zip(profile.times_s, profile.offsets_k, strict=True))


def _number(*units: str) -> Callable[[str], float]:
    return lambda text: parse_plain(text, units)


def _count(text: str) -> int:
    value = float(text)
    if value != int(value):
        raise ValueError(f"expected an integer, got {text!r}")
    return int(value)


def _rotvec(text: str) -> tuple[float, ...]:
    parts = [parse_plain(p, ("deg",)) for p in text.split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected three comma-separated components, got {text!r}")
    return tuple(parts)


# key -> (section, attribute, parser, unit written by to_flat)
FIELDS: dict[str, tuple[str, str, Callable[[str], Any], str]] = {
    "source.pair_rate": ("source", "pair_rate", _number("/s"), ""),
    "source.local_fidelity": ("source", "local_fidelity", _number(), ""),
    "source.local_coupling": ("source", "local_coupling", _number(), ""),
    "source.remote_coupling": ("source", "remote_coupling", _number(), ""),
    "source.signal_fwhm": ("source", "signal_fwhm_nm", _number("nm"), " nm"),
    "source.idler_fwhm": ("source", "idler_fwhm_nm", _number("nm"), " nm"),
    "channel.length": ("channel", "length_m", _number("m"), " m"),
    "channel.loss_db": ("channel", "loss_db", _number("dB"), " dB"),
    "channel.base_delay": ("channel", "base_delay_ps", parse_time_ps, " ps"),
    "channel.dispersion_fwhm": ("channel", "dispersion_fwhm_ps", parse_time_ps, " ps"),
    "channel.dispersion_sign": ("channel", "dispersion_sign", _count, ""),
    "channel.group_index": ("channel", "group_index", _number(), ""),
    "channel.residual_rotvec": ("channel", "residual_rotvec_deg", _rotvec, ""),
    "channel.drift_speed": ("channel", "drift_speed_deg_per_sqrt_h", _number("deg"), ""),
    "channel.drift_cap": ("channel", "drift_cap_deg", _number("deg"), " deg"),
    "channel.drift_step": ("channel", "drift_step_s", parse_seconds, " s"),
    "tagger.bin_width": ("tagger", "bin_width_ps", parse_time_ps, " ps"),
    "tagger.sync_jitter_fwhm": ("tagger", "sync_jitter_fwhm_ps", parse_time_ps, " ps"),
    "thermal.alpha": ("thermal", "alpha", _number("/K"), ""),
    "thermal.dn_dt": ("thermal", "dn_dt", _number("/K"), ""),
}
for _side in ("detector_local", "detector_remote"):
    FIELDS.update(
        {
            f"{_side}.efficiency": (_side, "efficiency", _number(), ""),
            f"{_side}.dark_rate": (_side, "dark_rate", _number("/s"), ""),
            f"{_side}.jitter_fwhm": (_side, "jitter_fwhm_ps", parse_time_ps, " ps"),
            f"{_side}.analyzer_contrast": (_side, "analyzer_contrast", _number(), ""),
        }
    )

SPECIAL_KEYS = (
    "schedule",
    "schedule.repeat",
    "labels",
    "analysis.window",
    "thermal.profile",
    "thermal.profile_file",
)


@dataclass(frozen=True)
class LinkConfig:
    """Source, channel, detectors, tagger, thermal model and measurement schedule."""

    source: SourceConfig = field(default_factory=SourceConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    detector_local: DetectorConfig = field(default_factory=local_detector)
    detector_remote: DetectorConfig = field(default_factory=remote_detector)
    tagger: TaggerConfig = field(default_factory=TaggerConfig)
    thermal: ThermalConstants = field(default_factory=ThermalConstants)
    schedule: tuple[MeasurementBlock, ...] = DEFAULT_SCHEDULE
    repeat: int = 1
    label_convention: LabelConvention = LabelConvention.REFLECTED
    window_ps: float = constants.COINCIDENCE_WINDOW_PS
    temperature_profile: TemperatureProfile | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.schedule:
            raise ConfigError("schedule has no blocks", "schedule")
        if self.repeat < 1:
            raise ConfigError(f"must be >= 1, got {self.repeat}", "schedule.repeat")
        if not self.window_ps > 0:
            raise ConfigError(f"must be positive, got {self.window_ps}", "analysis.window")
        if self.detector_local.channel == self.detector_remote.channel:
            raise ConfigError("local and remote detectors share a tagger channel", "detector_remote.channel")

    # ───────────────────────── schedule ─────────────────────────

    def blocks(self) -> list[MeasurementBlock]:
        """The schedule repeated ``repeat`` times."""
        return list(self.schedule) * self.repeat

    def block_starts_s(self) -> list[float]:
        starts, t = [], 0.0
        for block in self.blocks():
            starts.append(t)
            t += block.duration_s
        return starts

    @property
    def total_duration_s(self) -> float:
        return sum(b.duration_s for b in self.blocks())

    def physical_settings(self, block: MeasurementBlock) -> tuple[PolarizationBasisSetting, PolarizationBasisSetting]:
        """Polarizer settings (local, remote) that realise a block's labels."""
        a = PolarizationBasisSetting.from_label(block.label_a)
        b = PolarizationBasisSetting.from_label(block.label_b)
        if self.label_convention is LabelConvention.REFLECTED:
            b = PolarizationBasisSetting(90.0 - b.angle_deg)
        return a, b

    # ───────────────────────── scaling ─────────────────────────

    def scaled(self, k: float) -> "LinkConfig":
        """Divide every rate by ``k`` and stretch durations by ``k``.

        Expected singles and true-coincidence counts per block are unchanged;
        accidental coincidences drop by ``k``. The birefringence drift and the
        temperature profile are stretched with the schedule.
        """
        if not k > 0:
            raise ConfigError(f"must be positive, got {k}", "rate_scale")
        if k == 1:
            return self
        return replace(
            self,
            source=replace(self.source, pair_rate=self.source.pair_rate / k),
            channel=replace(
                self.channel,
                drift_speed_deg_per_sqrt_h=self.channel.drift_speed_deg_per_sqrt_h / math.sqrt(k),
                drift_step_s=self.channel.drift_step_s * k,
            ),
            detector_local=replace(self.detector_local, dark_rate=self.detector_local.dark_rate / k),
            detector_remote=replace(self.detector_remote, dark_rate=self.detector_remote.dark_rate / k),
            schedule=tuple(replace(b, duration_s=b.duration_s * k) for b in self.schedule),
            temperature_profile=(
                self.temperature_profile.scaled_in_time(k) if self.temperature_profile is not None else None
            ),
        )

    # ───────────────────────── flat form ─────────────────────────

    def to_flat(self) -> dict[str, str]:
        """All parameters as ``key -> value`` strings; ``from_flat`` inverts it."""
        sections = {
            "source": _source_fields(self.source),
            "channel": _channel_fields(self.channel),
            "detector_local": _vars(self.detector_local),
            "detector_remote": _vars(self.detector_remote),
            "tagger": _vars(self.tagger),
            "thermal": _vars(self.thermal),
        }
        flat = {}
        for key, (section, attr, _, unit) in FIELDS.items():
            value = sections[section][attr]
            if isinstance(value, tuple):
                flat[key] = ", ".join(repr(float(v)) for v in value)
            else:
                flat[key] = f"{value!r}{unit}"
        flat["schedule"] = format_schedule(self.schedule)
        flat["schedule.repeat"] = str(self.repeat)
        flat["labels"] = self.label_convention.value
        flat["analysis.window"] = f"{self.window_ps!r} ps"
        if self.temperature_profile is not None:
            flat["thermal.profile"] = _format_profile(self.temperature_profile)
        return flat

    @classmethod
    def from_flat(cls, flat: dict[str, str | None], base_dir: Path | None = None) -> "LinkConfig":
        """Build a config from ``key -> value`` strings, defaults filling the rest.

        Raises:
            ConfigError: unknown key or unparseable / out-of-range value
        """
        values: dict[str, dict[str, Any]] = {s: {} for s in {f[0] for f in FIELDS.values()}}
        for key, raw in flat.items():
            if key in SPECIAL_KEYS:
                continue
            if key not in FIELDS:
                raise ConfigError(f"unknown key (valid keys: {', '.join(sorted([*FIELDS, *SPECIAL_KEYS]))})", key)
            if raw is None or not str(raw).strip():
                raise ConfigError("missing value", key)
            section, attr, parse, _ = FIELDS[key]
            try:
                values[section][attr] = parse(str(raw).strip())
            except ValueError as e:
                raise ConfigError(str(e), key) from e

        source = _build_source(values["source"])
        channel = _build_channel(values["channel"])
        kwargs: dict[str, Any] = {
            "source": source,
            "channel": channel,
            "detector_local": local_detector(**values["detector_local"]),
            "detector_remote": remote_detector(**values["detector_remote"]),
            "tagger": TaggerConfig(**values["tagger"]),
            "thermal": ThermalConstants(
                **values["thermal"], group_index=channel.group_index, length_m=max(channel.length_m, 1e-9)
            ),
        }
        if "schedule" in flat:
            kwargs["schedule"] = parse_schedule(str(flat["schedule"] or ""))
        if "schedule.repeat" in flat:
            try:
                kwargs["repeat"] = _count(str(flat["schedule.repeat"]))
            except ValueError as e:
                raise ConfigError(str(e), "schedule.repeat") from e
        if "labels" in flat:
            try:
                kwargs["label_convention"] = LabelConvention(str(flat["labels"]).strip().lower())
            except ValueError:
                raise ConfigError(f"must be 'reflected' or 'literal', got {flat['labels']!r}", "labels") from None
        if "analysis.window" in flat:
            try:
                kwargs["window_ps"] = parse_time_ps(str(flat["analysis.window"]))
            except ValueError as e:
                raise ConfigError(str(e), "analysis.window") from e
        if "thermal.profile" in flat:
            kwargs["temperature_profile"] = _parse_profile(str(flat["thermal.profile"] or ""))
        elif "thermal.profile_file" in flat:
            path = Path(str(flat["thermal.profile_file"]))
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            kwargs["temperature_profile"] = load_temperature_profile(path)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path, overrides: dict[str, str] | None = None) -> "LinkConfig":
        """Load a link-config file; ``overrides`` replace single keys."""
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"link config {path} does not exist")
        flat = dict(dotenv_values(path, interpolate=False))
        flat.update(overrides or {})
        logger.debug(f"Loaded {len(flat)} link-config keys from {path}")
        return cls.from_flat(flat, base_dir=path.parent)

    def to_file(self, path: str | Path) -> None:
        lines = ["# polarlink link configuration", *(f"{k} = {v}" for k, v in self.to_flat().items())]
        Path(path).write_text("\n".join(lines) + "\n")


def _vars(obj: Any) -> dict[str, Any]:
    return dict(vars(obj))


def _source_fields(source: SourceConfig) -> dict[str, Any]:
    fields = _vars(source)
    fields["signal_fwhm_nm"] = source.signal_channel.fwhm_nm
    fields["idler_fwhm_nm"] = source.idler_channel.fwhm_nm
    return fields


def _channel_fields(channel: ChannelConfig) -> dict[str, Any]:
    fields = _vars(channel)
    fields["residual_rotvec_deg"] = tuple(np.degrees(channel.residual_rotation.as_rotvec()))
    return fields


def _build_source(values: dict[str, Any]) -> SourceConfig:
    base = SourceConfig()
    signal_fwhm = values.pop("signal_fwhm_nm", None)
    idler_fwhm = values.pop("idler_fwhm_nm", None)
    if signal_fwhm is not None:
        values["signal_channel"] = ItuChannel(base.signal_channel.number, base.signal_channel.centre_nm, signal_fwhm)
    if idler_fwhm is not None:
        values["idler_channel"] = ItuChannel(base.idler_channel.number, base.idler_channel.centre_nm, idler_fwhm)
    return SourceConfig(**values)


def _build_channel(values: dict[str, Any]) -> ChannelConfig:
    rotvec = values.pop("residual_rotvec_deg", None)
    if rotvec is not None:
        values["residual_rotation"] = PoincareRotation.from_rotvec(rotvec, degrees=True)
    has_length, has_delay = "length_m" in values, "base_delay_ps" in values
    n = values.get("group_index", constants.GROUP_INDEX)
    if has_delay and not has_length:
        values["length_m"] = values["base_delay_ps"] / constants.PS_PER_SECOND * constants.SPEED_OF_LIGHT / n
    elif not has_delay:
        length = values.get("length_m", constants.LOOP_LENGTH_M)
        values["base_delay_ps"] = n * length / constants.SPEED_OF_LIGHT * constants.PS_PER_SECOND
    return ChannelConfig(**values)
