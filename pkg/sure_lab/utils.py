import hashlib
import json
import logging
import typing
from importlib import metadata
from pathlib import Path
from typing import Any, Type, TypeVar

from packaging.version import InvalidVersion, Version
from pydantic import BaseModel

from .errors import ConfigError

logger = logging.getLogger(__name__)

TOOL_NAME = "sure-lab"
MANIFEST_NAME = "manifest.json"


def tool_version() -> str:
    try:
        return metadata.version(TOOL_NAME)
    except metadata.PackageNotFoundError:
        return "0.0.0"


def config_hash(config: BaseModel) -> str:
    """SHA-256 of the canonical (sorted, compact) JSON form of a config model."""
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def write_manifest(
    directory: str | Path,
    files: typing.Iterable[str | Path],
    seed: int | None,
    command: str,
    config: BaseModel | None = None,
) -> Path:
    """Provenance record for an output directory; carries no timestamps so reruns stay byte-identical."""
    directory = Path(directory)
    names = sorted({Path(f).relative_to(directory).as_posix() for f in files} - {MANIFEST_NAME})
    manifest = {
        "tool": TOOL_NAME,
        "version": tool_version(),
        "seed": seed,
        "config_hash": config_hash(config) if config is not None else None,
        "command": command,
        "files": names,
    }
    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    logger.info("Wrote %s (%d files)", path, len(names))
    return path


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / MANIFEST_NAME
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read {path}: {e}") from e


def check_version(recorded: str) -> bool:
    """False (with a warning) when the recorded major/minor differs from the running tool."""
    try:
        then, now = Version(recorded), Version(tool_version())
    except InvalidVersion:
        logger.warning("Unparseable tool version %r in manifest", recorded)
        return False
    if (then.major, then.minor) != (now.major, now.minor):
        logger.warning("Run was produced by %s %s, running %s", TOOL_NAME, then, now)
        return False
    return True


T = TypeVar("T")


def assertType(x: Any, t: Type[T]) -> T:
    if not isinstance(x, t):
        raise ConfigError(f"Expected {t}, got {type(x)}")
    return x
