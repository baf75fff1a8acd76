"""
Time-tag file formats.

Binary (little-endian):
    24-byte header: magic "QTT1", bin width in femtoseconds (u64),
    channel count (u32), 8 reserved bytes.
    Then 9-byte records: bin index (u64) + channel (u8).

Text: CSV with header ``bin_index,channel``. CSV carries no bin width, so
readers must be told it.
"""

import logging
import struct
from pathlib import Path

import numpy as np

from ..core.detection import TimeTagStream
from ..core.errors import TagFileError

logger = logging.getLogger(__name__)

MAGIC = b"QTT1"
HEADER = struct.Struct("<4sQI8x")
RECORD_DTYPE = np.dtype([("bin", "<u8"), ("channel", "u1")])
CSV_HEADER = "bin_index,channel"


def read_header(path: str | Path) -> tuple[int, int]:
    """Return ``(bin_width_fs, channel_count)`` of a binary tag file."""
    path = Path(path)
    try:
        with open(path, "rb") as f:
            raw = f.read(HEADER.size)
    except OSError as e:
        raise TagFileError(f"cannot read {path}: {e}") from e
    if len(raw) < HEADER.size:
        raise TagFileError(f"{path}: file too short for a tag-file header")
    magic, bin_width_fs, channel_count = HEADER.unpack(raw)
    if magic != MAGIC:
        raise TagFileError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if bin_width_fs == 0:
        raise TagFileError(f"{path}: bin width is zero")
    return bin_width_fs, channel_count


def read_tags(path: str | Path) -> TimeTagStream:
    """Load a binary tag file. Records are memory-mapped and copied once into int64 arrays."""
    path = Path(path)
    bin_width_fs, _ = read_header(path)
    payload = path.stat().st_size - HEADER.size
    if payload % RECORD_DTYPE.itemsize:
        raise TagFileError(f"{path}: truncated record ({payload % RECORD_DTYPE.itemsize} trailing bytes)")
    n = payload // RECORD_DTYPE.itemsize
    if n == 0:
        return TimeTagStream.empty(bin_width_fs)
    records = np.memmap(path, dtype=RECORD_DTYPE, mode="r", offset=HEADER.size, shape=(n,))
    bins = records["bin"].astype(np.int64)
    channels = np.array(records["channel"], dtype=np.uint8)
    del records
    try:
        return TimeTagStream(bins, channels, bin_width_fs)
    except ValueError as e:
        raise TagFileError(f"{path}: {e}") from e


def write_tags(path: str | Path, stream: TimeTagStream, channel_count: int = 2) -> None:
    with TagFileWriter(path, stream.bin_width_fs, channel_count) as writer:
        writer.append(stream)


class TagFileWriter:
    """Append-only writer that enforces non-decreasing bin order across appends."""

    def __init__(self, path: str | Path, bin_width_fs: int, channel_count: int = 2):
        self.path = Path(path)
        self.bin_width_fs = int(bin_width_fs)
        self.count = 0
        self._last_bin = -1
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._file = open(self.path, "wb")
            self._file.write(HEADER.pack(MAGIC, self.bin_width_fs, channel_count))
        except OSError as e:
            raise TagFileError(f"cannot write {self.path}: {e}") from e

    def append(self, stream: TimeTagStream) -> None:
        if len(stream) == 0:
            return
        if stream.bin_width_fs != self.bin_width_fs:
            raise TagFileError(f"bin width {stream.bin_width_fs} fs does not match file ({self.bin_width_fs} fs)")
        if stream.bins[0] < self._last_bin:
            raise TagFileError(f"{self.path}: tag {stream.bins[0]} written after {self._last_bin}")
        if stream.bins[0] < 0:
            raise TagFileError(f"{self.path}: negative bin index {stream.bins[0]}")
        records = np.empty(len(stream), dtype=RECORD_DTYPE)
        records["bin"] = stream.bins
        records["channel"] = stream.channels
        try:
            self._file.write(records.tobytes())
        except OSError as e:
            raise TagFileError(f"cannot write {self.path}: {e}") from e
        self._last_bin = int(stream.bins[-1])
        self.count += len(stream)

    def close(self) -> None:
        if not self._file.closed:
            self._file.close()

    def __enter__(self) -> "TagFileWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class SortedTagBuffer:
    """Collects out-of-order chunks and writes them once a watermark passes.

    Callers promise that no later chunk holds a tag below the watermark they
    flush to; a violation surfaces as a TagFileError from the writer.
    """

    def __init__(self, writer: TagFileWriter):
        self.writer = writer
        self._pending: list[TimeTagStream] = []

    def push(self, stream: TimeTagStream) -> None:
        if len(stream):
            self._pending.append(stream)

    def flush_below(self, bin_index: int) -> None:
        if not self._pending:
            return
        merged = TimeTagStream.merge(self._pending)
        cut = int(np.searchsorted(merged.bins, bin_index, side="left"))
        head = TimeTagStream(merged.bins[:cut], merged.channels[:cut], merged.bin_width_fs, validate=False)
        self.writer.append(head)
        rest = TimeTagStream(merged.bins[cut:], merged.channels[cut:], merged.bin_width_fs, validate=False)
        self._pending = [rest] if len(rest) else []

    def close(self) -> None:
        if self._pending:
            self.flush_below(np.iinfo(np.int64).max)
        self.writer.close()


def write_tags_csv(path: str | Path, stream: TimeTagStream) -> None:
    data = np.column_stack([stream.bins, stream.channels.astype(np.int64)])
    try:
        np.savetxt(path, data, fmt="%d", delimiter=",", header=CSV_HEADER, comments="")
    except OSError as e:
        raise TagFileError(f"cannot write {path}: {e}") from e


def read_tags_csv(path: str | Path, bin_width_fs: int) -> TimeTagStream:
    path = Path(path)
    try:
        with open(path) as f:
            header = f.readline().strip()
    except OSError as e:
        raise TagFileError(f"cannot read {path}: {e}") from e
    if header != CSV_HEADER:
        raise TagFileError(f"{path}: expected header {CSV_HEADER!r}, got {header!r}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    if data.size == 0:
        return TimeTagStream.empty(bin_width_fs)
    try:
        return TimeTagStream(data[:, 0], data[:, 1], bin_width_fs)
    except ValueError as e:
        raise TagFileError(f"{path}: {e}") from e


def load_stream(path: str | Path, bin_width_fs: int | None = None) -> TimeTagStream:
    """Read a binary or CSV tag file, chosen by suffix."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        if bin_width_fs is None:
            raise TagFileError(f"{path}: CSV tag files need an explicit bin width")
        return read_tags_csv(path, bin_width_fs)
    return read_tags(path)
