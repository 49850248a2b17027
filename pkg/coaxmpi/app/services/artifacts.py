import csv
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# JSON documents and hashes
# ---------------------------------------------------------------------------

def canonical_json(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(doc: Any) -> str:
    return hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()


def write_json(path: Path, doc: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # float repr round-trips, so re-reading gives bit-identical values
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_json(path: Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def update_manifest(
    out_dir: Path,
    command: str,
    config_digest: str,
    seed: int,
    files: Iterable[Path],
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """Record one command's outputs in <out_dir>/manifest.json.

    Entries are keyed by command so re-running a command replaces only its own
    entry. No timestamps are written; the manifest is a pure function of the run.
    """
    out_dir = Path(out_dir)
    path = out_dir / MANIFEST_NAME
    manifest: Dict[str, Any] = {"schema_version": MANIFEST_SCHEMA_VERSION, "commands": {}}
    if path.exists():
        try:
            manifest = read_json(path)
        except ValueError:
            logger.warning("replacing unreadable manifest at %s", path)
    entry: Dict[str, Any] = {
        "config_hash": config_digest,
        "seed": seed,
        "files": {_relative_name(f, out_dir): sha256_file(f) for f in sorted(Path(f) for f in files)},
    }
    if extra:
        entry.update(extra)
    manifest.setdefault("commands", {})[command] = entry
    return write_json(path, manifest)


def _relative_name(path: Path, root: Path) -> str:
    try:
        return Path(path).resolve().relative_to(root.resolve()).as_posix()
    except ValueError:
        return Path(path).as_posix()


# ---------------------------------------------------------------------------
# Tables and image grids
# ---------------------------------------------------------------------------

def write_rows_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def write_grid_csv(path: Path, grid: np.ndarray) -> Path:
    """One CSV line per image row, top row first; masked pixels are written as nan."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(grid, dtype=float).tolist():
            writer.writerow([repr(v) for v in row])
    return path


def write_pfm(path: Path, grid: np.ndarray) -> Path:
    """Single-channel little-endian PFM; rows are stored bottom-up as the format requires."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 2:
        raise ValueError(f"PFM needs a 2-D grid, got shape {grid.shape}")
    height, width = grid.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"Pf\n{width} {height}\n-1.0\n".encode("ascii")
    path.write_bytes(header + np.flipud(grid).astype("<f4").tobytes())
    return path


def read_pfm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    lines: List[bytes] = []
    offset = 0
    while len(lines) < 3:
        end = data.index(b"\n", offset)
        lines.append(data[offset:end].strip())
        offset = end + 1
    if lines[0] != b"Pf":
        raise ValueError(f"{path}: not a single-channel PFM file")
    width, height = (int(v) for v in lines[1].split())
    dtype = "<f4" if float(lines[2]) < 0 else ">f4"
    grid = np.frombuffer(data[offset:], dtype=dtype, count=width * height).reshape(height, width)
    return np.flipud(grid).astype(float)


def write_pgm(path: Path, mask: np.ndarray) -> Path:
    """Binary PGM (P5) of a boolean mask: 255 where set, top row first."""
    mask = np.asarray(mask, dtype=bool)
    height, width = mask.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    path.write_bytes(header + np.where(mask, 255, 0).astype(np.uint8).tobytes())
    return path
