"""CSV/JSON artifacts, run manifests and the on-disk eigenvalue cache."""
from __future__ import annotations

import csv
import hashlib
import json
import os
import platform
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .hilbert import SystemParams

CACHE_FORMAT = "dissrabi-spectrum"
CACHE_VERSION = 1


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (complex, np.complexfloating)):
        return repr(complex(v)).strip("()")
    return str(v)


def write_csv(path, header, rows) -> Path:
    """RFC-4180 CSV with '.' decimals and round-trip float formatting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (complex, np.complexfloating)):
        return [float(o.real), float(o.imag)]
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # write-then-rename keeps a single writer from leaving half a file behind
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_default)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def manifest(command: str, config: dict, artifacts: list, wall_time: float, status: int = 0,
             extra: dict | None = None) -> dict:
    out = {
        "command": command,
        "config": config,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "artifacts": [str(a) for a in artifacts],
        "wall_time_s": wall_time,
        "status": status,
    }
    if extra:
        out.update(extra)
    return out


# --- eigenvalue cache --------------------------------------------------------------

def cache_key(params: SystemParams, fock_cutoff: int, k: int, **extra) -> str:
    payload = json.dumps({"params": params.as_dict(), "N": int(fock_cutoff), "k": int(k), **extra},
                         sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


class SpectrumCache:
    """Directory of ``<key>.npz`` files holding eigenvalues with a versioned header."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def path(self, key: str) -> Path:
        return self.directory / f"{key}.npz"

    def load(self, key: str):
        """(eigenvalues, meta) or None on a miss or an incompatible file."""
        p = self.path(key)
        if not p.exists():
            return None
        try:
            with np.load(p, allow_pickle=False) as z:
                header = json.loads(str(z["header"]))
                if header.get("format") != CACHE_FORMAT or header.get("version") != CACHE_VERSION \
                        or header.get("key") != key:
                    return None
                return np.array(z["eigenvalues"]), header.get("meta", {})
        except (OSError, ValueError, KeyError):
            return None

    def store(self, key: str, eigenvalues: np.ndarray, meta: dict | None = None) -> Path:
        header = json.dumps({"format": CACHE_FORMAT, "version": CACHE_VERSION, "key": key,
                             "meta": meta or {}}, default=_default)
        p = self.path(key)
        fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".npz")
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, header=np.array(header), eigenvalues=np.asarray(eigenvalues, dtype=complex))
        os.replace(tmp, p)
        return p
