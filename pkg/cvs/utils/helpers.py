"""
Utility functions for the CvS pipeline
"""

import hashlib
import json
import os
import random
import shutil
import sys
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Union

import numpy as np
import torch
from loguru import logger

from ..exceptions import OutputLockedError

PathLike = Union[str, Path]


def setup_logging(level: str = "INFO"):
    """
    Route loguru output to stderr at the requested level

    Args:
        level: Minimum level name (DEBUG, INFO, WARNING, ...)
    """
    logger.remove()
    logger.add(sys.stderr, level=level.upper(), format="{time:HH:mm:ss} | {level: <7} | {message}")


def seed_everything(seed: int):
    """
    Seed python, numpy and torch from one root seed

    Args:
        seed: Root seed recorded in the resolved config
    """
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def derive_seed(*parts: int) -> int:
    """Combine integers into a stable 32-bit seed."""
    digest = hashlib.sha256(",".join(str(int(p)) for p in parts).encode()).hexdigest()
    return int(digest[:8], 16)


def config_hash(document: Dict) -> str:
    """
    Hash a configuration document

    Args:
        document: JSON-serializable mapping

    Returns:
        Hex SHA-256 of the canonical JSON encoding
    """
    payload = json.dumps(document, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def atomic_write_text(path: PathLike, text: str):
    """Write a text file through a temporary sibling and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(f".{path.name}.tmp")
    with open(tmp_path, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp_path, path)


def atomic_write_json(path: PathLike, data: Dict):
    atomic_write_text(path, json.dumps(data, indent=2, sort_keys=True, default=str) + "\n")


def atomic_replace_dir(tmp_dir: PathLike, final_dir: PathLike):
    """
    Move a fully written temporary directory over its final location

    Args:
        tmp_dir: Directory holding the finished content
        final_dir: Destination, replaced if it exists
    """
    tmp_dir, final_dir = Path(tmp_dir), Path(final_dir)
    backup = final_dir.with_name(f".{final_dir.name}.old")
    if backup.exists():
        shutil.rmtree(backup)
    if final_dir.exists():
        os.replace(final_dir, backup)
    os.replace(tmp_dir, final_dir)
    if backup.exists():
        shutil.rmtree(backup)


def write_tsv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence]):
    """
    Write tab-separated rows with a header line

    Args:
        path: Output file
        header: Column names
        rows: Row values, converted with ``format_value``
    """
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join(format_value(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_tsv(path: PathLike) -> List[Dict[str, str]]:
    """Read a file written by ``write_tsv`` into a list of dicts."""
    with open(path, "r", encoding="utf-8") as f:
        lines = [line.rstrip("\n") for line in f if line.strip()]
    if not lines:
        return []
    header = lines[0].split("\t")
    return [dict(zip(header, line.split("\t"))) for line in lines[1:]]


def format_value(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return repr(value)
    return str(value).replace("\t", " ").replace("\n", " ")


def parse_optional_float(text: str):
    return None if text in ("-", "", "None") else float(text)


class OutputLock:
    """
    Exclusive ownership of an output directory through a ``.lock`` file

    Usage:
        with OutputLock(out_dir):
            ...
    """

    def __init__(self, directory: PathLike, lock_name: str = ".lock"):
        self.directory = Path(directory)
        self.lock_path = self.directory / lock_name
        self._fd = None

    def __enter__(self):
        self.directory.mkdir(parents=True, exist_ok=True)
        try:
            self._fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise OutputLockedError(
                f"Output directory is locked by another run: {self.directory} "
                f"(remove {self.lock_path} if no run is active)"
            )
        os.write(self._fd, str(os.getpid()).encode())
        return self

    def __exit__(self, exc_type, exc, tb):
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
        if self.lock_path.exists():
            self.lock_path.unlink()
        return False
