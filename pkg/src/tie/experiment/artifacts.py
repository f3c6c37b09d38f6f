"""File formats for run outputs: CSV tables, binary PGM grids and the manifest."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MANIFEST_FORMAT = "tie-run-manifest"
MANIFEST_VERSION = 1


def format_cell(v) -> str:
    """Text for one CSV cell; floats use ``repr`` so values round-trip exactly."""
    if v is None:
        return "N/A"
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise ValueError(f"{path.name}: row has {len(row)} cells, header has {len(header)}")
            w.writerow([format_cell(v) for v in row])
    return path


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    return rows[0], rows[1:]


def quantize(values) -> np.ndarray:
    """Map [0, 1] floats to bytes with ``floor(255 v + 0.5)`` (halves round up)."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(255.0 * v + 0.5).astype(np.uint8)


def write_pgm(path, pixels: np.ndarray) -> Path:
    """Binary P5 greymap, maxval 255, rows written top to bottom."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 2:
        raise ValueError("write_pgm: expected a 2-D uint8 array")
    h, w = pixels.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    body = raw[pos + 1:]
    if len(body) < w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=w * h).reshape(h, w)


def image_grid(samples: np.ndarray, image_shape: tuple[int, int], cols: int = 8, pad: int = 1) -> np.ndarray:
    """Tile flattened images into one byte image with ``pad`` black pixels between tiles."""
    samples = np.asarray(samples, dtype=np.float64)
    h, w = image_shape
    if samples.ndim != 2 or samples.shape[1] != h * w:
        raise ValueError(f"image_grid: samples of dim {samples.shape[-1]} do not match image {h}x{w}")
    n = len(samples)
    cols = max(1, min(cols, n))
    rows = -(-n // cols)
    grid = np.zeros((rows * (h + pad) - pad, cols * (w + pad) - pad), dtype=np.uint8)
    tiles = quantize(samples).reshape(n, h, w)
    for i, tile in enumerate(tiles):
        r, c = divmod(i, cols)
        grid[r * (h + pad):r * (h + pad) + h, c * (w + pad):c * (w + pad) + w] = tile
    return grid


def image_shape_for(dim: int, image_shape: tuple[int, int] | None) -> tuple[int, int] | None:
    """Known shape, else a square side when ``dim`` is a perfect square above 2-D."""
    if image_shape is not None:
        return tuple(image_shape)
    side = math.isqrt(dim)
    return (side, side) if dim > 2 and side * side == dim else None


def dump_inversions(out_dir, samples: np.ndarray, targets: np.ndarray, n_outputs: int,
                    image_shape: tuple[int, int] | None, prefix: str = "class") -> list[Path]:
    """One PGM grid per class for image data; a single CSV of points for 2-D data."""
    out_dir = Path(out_dir)
    samples = np.asarray(samples, dtype=np.float64)
    targets = np.asarray(targets)
    shape = image_shape_for(samples.shape[1], image_shape)
    if shape is None:
        if samples.shape[1] != 2:
            raise ValueError(f"cannot lay out {samples.shape[1]}-dimensional samples as images")
        return [write_csv(out_dir / f"{prefix}_points.csv", ["class", "x", "y"],
                          ((int(t), s[0], s[1]) for s, t in zip(samples, targets)))]
    paths = []
    for c in range(n_outputs):
        chosen = samples[targets == c]
        if len(chosen):
            paths.append(write_pgm(out_dir / f"{prefix}_{c:02d}.pgm", image_grid(chosen, shape)))
    return paths


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(run_dir, config_json: str, config_hash: str, seeds: dict, status: str,
                   extra: dict | None = None) -> Path:
    """Hash every file in ``run_dir`` (except the manifest) next to the config and seeds."""
    run_dir = Path(run_dir)
    files = {}
    for p in sorted(run_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[p.relative_to(run_dir).as_posix()] = sha256_file(p)
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "status": status,
        "config_hash": config_hash,
        "config": json.loads(config_json),
        "seeds": seeds,
        "files": files,
        **(extra or {}),
    }
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        m = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read manifest {path}: {exc}") from exc
    if m.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path}: not a run manifest")
    return m
