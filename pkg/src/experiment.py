"""
Result directories with a content manifest.

Every file of a run goes through ExperimentWriter; finalize() writes
manifest.json with the SHA-256 of each file. Nothing time- or host-dependent
is written, so re-running a command with the same config and seed gives
byte-identical files.
"""
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Union

import pandas as pd

from src.exceptions import ConfigError

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
CONFIG_ECHO = "config.ini"


def file_sha256(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


class ExperimentWriter:
    """
    Output directory of one subcommand run.

    The directory is created on the first write. An existing directory is
    reused only if it is empty or holds a previous run of ours (a manifest);
    the previous run's files are removed first. discard() undoes an
    unfinished run.
    """

    def __init__(self, out_dir: Union[str, Path]):
        self.out_dir = Path(out_dir)
        self.files: List[str] = []
        self._prepared = False
        self._created = False

    def _prepare(self):
        if self._prepared:
            return
        if self.out_dir.exists():
            if not self.out_dir.is_dir():
                raise ConfigError(f"output path {self.out_dir} exists and is not a directory")
            entries = list(self.out_dir.iterdir())
            manifest = self.out_dir / MANIFEST
            if entries and not manifest.is_file():
                raise ConfigError(f"output directory {self.out_dir} is not empty and holds no {MANIFEST}")
            if manifest.is_file():
                self._clear_previous(manifest)
        self._created = not self.out_dir.exists()
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._prepared = True

    def _clear_previous(self, manifest: Path):
        try:
            previous = json.loads(manifest.read_text(encoding="utf-8"))
            names = [entry["name"] for entry in previous.get("files", [])]
        except (json.JSONDecodeError, KeyError, TypeError):
            raise ConfigError(f"{manifest} is unreadable, refusing to overwrite {self.out_dir}") from None
        for name in names:
            (self.out_dir / name).unlink(missing_ok=True)
        manifest.unlink()
        logger.info(f"♻️ replaced previous run in {self.out_dir} ({len(names)} files)")

    def path(self, name: str) -> Path:
        """Path for a file written by someone else (e.g. a checkpoint); registered for the manifest."""
        self._prepare()
        if name not in self.files:
            self.files.append(name)
        return self.out_dir / name

    def write_text(self, name: str, text: str) -> Path:
        path = self.path(name)
        path.write_text(text, encoding="utf-8", newline="\n")
        return path

    def write_json(self, name: str, data: Any) -> Path:
        return self.write_text(name, json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False) + "\n")

    def write_csv(self, name: str, frame: pd.DataFrame) -> Path:
        path = self.path(name)
        frame.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")
        logger.info(f"📁 wrote {path} ({len(frame)} rows)")
        return path

    def write_config(self, run_config) -> Path:
        return self.write_text(CONFIG_ECHO, run_config.to_ini())

    def finalize(self) -> Path:
        """Write manifest.json listing every file with its hash and size."""
        self._prepare()
        entries: List[Dict] = []
        for name in sorted(self.files):
            path = self.out_dir / name
            if not path.is_file():
                raise ConfigError(f"registered output {name} was never written")
            entries.append({"name": name, "sha256": file_sha256(path), "bytes": path.stat().st_size})
        manifest = self.out_dir / MANIFEST
        manifest.write_text(json.dumps({"files": entries}, sort_keys=True, indent=2) + "\n",
                            encoding="utf-8", newline="\n")
        logger.info(f"✅ manifest written: {manifest} ({len(entries)} files)")
        return manifest

    def discard(self):
        """Remove what this run wrote so far; the directory goes too if this run created it."""
        for name in self.files:
            (self.out_dir / name).unlink(missing_ok=True)
        removed = len(self.files)
        self.files = []
        if self._created and self.out_dir.is_dir() and not any(self.out_dir.iterdir()):
            self.out_dir.rmdir()
        if removed:
            logger.warning(f"🗑️ discarded unfinished run in {self.out_dir} ({removed} files)")
