"""Parsing of unit-suffixed quantities such as ``823ps``, ``-1.2ms`` or ``48 dB``."""

import re

import click

_NUMBER = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_QUANTITY_RE = re.compile(rf"^\s*({_NUMBER})\s*([A-Za-zµ/°]*)\s*$")

# Multipliers to picoseconds
TIME_UNITS_PS = {
    "fs": 1e-3,
    "ps": 1.0,
    "ns": 1e3,
    "us": 1e6,
    "µs": 1e6,
    "ms": 1e9,
    "s": 1e12,
    "min": 60e12,
    "h": 3600e12,
}


def split_quantity(text: str) -> tuple[float, str]:
    """Split ``"823 ps"`` into ``(823.0, "ps")``."""
    match = _QUANTITY_RE.match(str(text))
    if match is None:
        raise ValueError(f"cannot parse quantity {text!r}")
    return float(match.group(1)), match.group(2)


def parse_time_ps(text: str | float, default_unit: str = "ps") -> float:
    """Parse a time with an optional ps/ns/us/ms/s suffix into picoseconds."""
    if isinstance(text, int | float):
        return float(text) * TIME_UNITS_PS[default_unit]
    value, unit = split_quantity(text)
    unit = unit or default_unit
    if unit not in TIME_UNITS_PS:
        raise ValueError(f"unknown time unit {unit!r} in {text!r}")
    return value * TIME_UNITS_PS[unit]


def parse_seconds(text: str | float) -> float:
    """Parse a duration into seconds; a bare number is taken as seconds."""
    return parse_time_ps(text, default_unit="s") / 1e12


def parse_plain(text: str | float, allowed: tuple[str, ...] = ()) -> float:
    """Parse a number that may carry one of ``allowed`` unit labels (dB, nm, deg, /s)."""
    if isinstance(text, int | float):
        return float(text)
    value, unit = split_quantity(text)
    if unit and unit not in allowed:
        raise ValueError(f"unexpected unit {unit!r} in {text!r}")
    return value


def format_time_ps(value_ps: float) -> str:
    """Format picoseconds with the largest unit that keeps the number readable."""
    for unit in ("s", "ms", "us", "ns"):
        scale = TIME_UNITS_PS[unit]
        if abs(value_ps) >= scale:
            return f"{value_ps / scale:g}{unit}"
    return f"{value_ps:g}ps"


class TimeParamType(click.ParamType):
    """Click parameter accepting times like ``823ps`` or ``-1.2ms``; yields picoseconds."""

    name = "time"

    def __init__(self, default_unit: str = "ps"):
        self.default_unit = default_unit

    def convert(self, value, param, ctx):
        if isinstance(value, float):
            return value
        try:
            return parse_time_ps(value, self.default_unit)
        except ValueError as e:
            self.fail(str(e), param, ctx)


TIME = TimeParamType()
