"""Run directories and the manifests that describe them.

Every command writes its artifacts into a fresh run directory named after its start time and master seed, and finishes
by writing `manifest.json` into it: the resolved configuration (plus the values that came from the config file and from
flags), the package version, wall-clock metadata and the SHA-256 of every file emitted.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime
from hashlib import file_digest
from typing import Any, Optional

from dateutil import parser, tz

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


class ManifestError(Exception):
    pass


class BadChecksumError(ManifestError):
    """An error raised when a file does not have the checksum its manifest records."""
    pass


class NoRunsFoundError(ManifestError):
    pass


class OutputDirError(ManifestError):
    """The output directory cannot be created or written to."""
    pass


def now() -> datetime:
    return datetime.now(tz.UTC)


def sha256_of(fpath: str) -> str:
    with open(fpath, "rb") as fd:
        return file_digest(fd, "sha256").hexdigest()


def make_run_dir(root: str, seed: int, started: Optional[datetime] = None) -> str:
    """Create a fresh run directory under `root`, named by start time and seed.

    :return: The path of the new directory.
    """
    started = started or now()
    name = f"{started.strftime('%Y%m%dT%H%M%S%fZ')}-seed{seed}"
    path = os.path.join(root, name)
    try:
        os.makedirs(path, exist_ok=False)
    except FileExistsError:
        raise OutputDirError(f"Run directory {path} already exists.")
    except OSError as e:
        raise OutputDirError(f"Cannot create run directory {path}: {e}")
    if not os.access(path, os.W_OK):
        raise OutputDirError(f"Run directory {path} is not writable.")
    logger.debug(f"Created run directory {path}.")
    return path


@dataclass
class RunManifest:
    experiment: str
    """The command that produced the run."""
    version: str
    """Version of this package that produced the run."""
    seed: int
    config: dict[str, Any]
    """Every resolved config key. Fed back as a config file, it reproduces the run."""
    file_values: dict[str, Any] = field(default_factory=dict)
    """Values that came from the config file."""
    overrides: dict[str, Any] = field(default_factory=dict)
    """Values that came from command-line flags."""
    started: Optional[datetime] = None
    finished: Optional[datetime] = None
    files: dict[str, str] = field(default_factory=dict)
    """SHA-256 of every emitted file, keyed by path relative to the run directory."""
    format_version: int = MANIFEST_VERSION

    @property
    def wall_seconds(self) -> Optional[float]:
        if self.started is None or self.finished is None:
            return None
        return (self.finished - self.started).total_seconds()

    def record_files(self, run_dir: str):
        """Checksum every file in `run_dir` other than the manifest itself."""
        self.files = {}
        for dirpath, _, filenames in os.walk(run_dir):
            for fname in sorted(filenames):
                if fname in (MANIFEST_NAME, f"{MANIFEST_NAME}.part"):
                    continue
                fpath = os.path.join(dirpath, fname)
                self.files[os.path.relpath(fpath, run_dir).replace(os.sep, "/")] = sha256_of(fpath)
        self.files = dict(sorted(self.files.items()))

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["started"] = self.started.isoformat() if self.started else None
        d["finished"] = self.finished.isoformat() if self.finished else None
        d["wall_seconds"] = self.wall_seconds
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> 'RunManifest':
        return cls(
            experiment=d["experiment"],
            version=d["version"],
            seed=int(d["seed"]),
            config=dict(d["config"]),
            file_values=dict(d.get("file_values") or {}),
            overrides=dict(d.get("overrides") or {}),
            started=parser.isoparse(d["started"]) if d.get("started") else None,
            finished=parser.isoparse(d["finished"]) if d.get("finished") else None,
            files=dict(d.get("files") or {}),
            format_version=int(d.get("format_version", MANIFEST_VERSION))
        )

    def write(self, run_dir: str) -> str:
        """Checksum the run directory's files and write the manifest atomically.

        :return: The path of the manifest.
        """
        self.finished = self.finished or now()
        self.record_files(run_dir)
        fpath = os.path.join(run_dir, MANIFEST_NAME)
        fpath_part = f"{fpath}.part"
        with open(fpath_part, "w", encoding="utf-8") as fd:
            json.dump(self.to_dict(), fd, indent=2)
        os.replace(fpath_part, fpath)
        logger.info(f"Wrote manifest listing {len(self.files)} files to {fpath}.")
        return fpath

    def verify(self, run_dir: str):
        """Check every listed file against its recorded checksum."""
        for rel, expected in self.files.items():
            fpath = os.path.join(run_dir, rel)
            if not os.path.exists(fpath):
                raise BadChecksumError(f"File {fpath} listed in the manifest is missing.")
            check = sha256_of(fpath)
            if check != expected:
                raise BadChecksumError(f"File {fpath} has checksum {check}, expected {expected}.")


def read_manifest(fpath: str) -> RunManifest:
    """Read a manifest file, raising :class:`ManifestError` naming the file if it is unreadable or incomplete."""
    try:
        with open(fpath, encoding="utf-8") as fd:
            return RunManifest.from_dict(json.load(fd))
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise ManifestError(f"Corrupt manifest {fpath}: {e!r}")


def find_run_dirs(root: str) -> list[str]:
    """Every directory at or below `root` that holds a manifest, in sorted order."""
    found = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        if MANIFEST_NAME in filenames:
            found.append(dirpath)
    return sorted(found)
