"""Atomic file writes, JSON manifests and config hashing"""
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Optional, Union
import hashlib
import json
import logging
import os
import tempfile

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'


def utc_timestamp() -> str:
    return datetime.now(timezone.utc).isoformat()


def config_hash(document: dict) -> str:
    """SHA-256 of the canonical JSON form of ``document``"""
    canonical = json.dumps(document, sort_keys=True, separators=(',', ':'), default=str)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def atomic_write(path: Union[str, Path], writer: Callable[[Any], None], binary: bool = True) -> Path:
    """Write through ``writer`` into a temp file next to ``path``, then rename over it"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix='.tmp', dir=path.parent)
    try:
        with os.fdopen(fd, 'wb' if binary else 'w') as handle:
            writer(handle)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def atomic_write_json(path: Union[str, Path], document: dict) -> Path:
    return atomic_write(path, lambda handle: json.dump(document, handle, indent=2, sort_keys=True,
                                                       default=str), binary=False)


def read_json(path: Union[str, Path]) -> Optional[dict]:
    """Parsed JSON document, or None when missing or unreadable"""
    path = Path(path)
    try:
        with open(path) as handle:
            return json.load(handle)
    except FileNotFoundError:
        return None
    except (OSError, json.JSONDecodeError) as e:
        logger.warning(f"Ignoring unreadable manifest {path}: {e}")
        return None


def manifest_is_valid(directory: Union[str, Path], expected_hash: str) -> bool:
    """True when ``directory`` holds a manifest written for ``expected_hash``"""
    manifest = read_json(Path(directory) / MANIFEST_NAME)
    return bool(manifest) and manifest.get('config_hash') == expected_hash and manifest.get('complete', True)
