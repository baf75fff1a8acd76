"""
Run manifests.

A simulation writes ``manifest.json`` next to its tag files. It records the
full link configuration, the seed, the block layout and per-block counts, and
an MD5 checksum of each tag file so an analysis can refuse files that do not
belong to the run.

Layout::

    <run dir>/
    ├── manifest.json
    ├── tags_local.qtt
    └── tags_remote.qtt
"""

import hashlib
import logging
from datetime import datetime
from pathlib import Path
from typing import Any

import orjson

from ..core.errors import ScheduleMismatchError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1


def file_checksum(path: str | Path, chunk_size: int = 1 << 20) -> str:
    """MD5 of a file's contents, read in chunks."""
    digest = hashlib.md5()
    with open(path, "rb") as f:
        while chunk := f.read(chunk_size):
            digest.update(chunk)
    return digest.hexdigest()


def file_entry(path: str | Path, tags: int) -> dict[str, Any]:
    path = Path(path)
    return {"name": path.name, "md5": file_checksum(path), "size": path.stat().st_size, "tags": tags}


def write_manifest(out_dir: str | Path, data: dict[str, Any]) -> Path:
    """Write ``manifest.json`` into ``out_dir`` and return its path."""
    path = Path(out_dir) / MANIFEST_NAME
    payload = {"format": FORMAT_VERSION, "created_at": datetime.now().isoformat(), **data}
    path.write_bytes(orjson.dumps(payload, option=orjson.OPT_INDENT_2 | orjson.OPT_SERIALIZE_NUMPY))
    logger.debug(f"Wrote manifest {path}")
    return path


def read_manifest(path: str | Path) -> dict[str, Any]:
    """Load a manifest; a directory is taken to contain ``manifest.json``."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        data = orjson.loads(path.read_bytes())
    except (OSError, orjson.JSONDecodeError) as e:
        raise ScheduleMismatchError(f"cannot read manifest {path}: {e}") from e
    if not isinstance(data, dict) or data.get("format") != FORMAT_VERSION:
        raise ScheduleMismatchError(f"{path} is not a polarlink run manifest")
    return data


def verify_files(manifest: dict[str, Any], files: dict[str, Path]) -> None:
    """Check tag files against the manifest checksums.

    Args:
        manifest: Loaded manifest
        files: Role ("tags_local", "tags_remote") to the file being analysed

    Raises:
        ScheduleMismatchError: a file is unknown to the manifest or its checksum differs
    """
    recorded = manifest.get("files", {})
    for role, path in files.items():
        entry = recorded.get(role)
        if entry is None:
            raise ScheduleMismatchError(f"manifest has no entry for {role}")
        actual = file_checksum(path)
        if actual != entry["md5"]:
            raise ScheduleMismatchError(
                f"{path} does not match the manifest's {role} ({entry['name']}): md5 {actual} != {entry['md5']}"
            )
