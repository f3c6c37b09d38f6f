"""IDX image/label files, synthetic blob benchmarks and downsampling."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IDXFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Samples in [0, 1] with optional labels; OOD sets carry no training labels."""

    samples: np.ndarray
    labels: np.ndarray | None
    name: str
    image_shape: tuple[int, int] | None = None
    is_ood: bool = False
    n_classes: int | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise ValueError(f"{self.name}: samples must be (M, D), got {self.samples.shape}")
        if self.samples.size and (self.samples.min() < 0.0 or self.samples.max() > 1.0):
            raise ValueError(f"{self.name}: samples must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.samples):
                raise ValueError(f"{self.name}: {len(self.samples)} samples but {len(self.labels)} labels")
            if self.n_classes is not None and self.labels.size and (
                    self.labels.min() < 0 or self.labels.max() >= self.n_classes):
                raise ValueError(f"{self.name}: labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def dim(self) -> int:
        return self.samples.shape[1]


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _header(raw: bytes, path, magic: int, ndims: int) -> tuple[int, ...]:
    need = 4 * (1 + ndims)
    if len(raw) < 4:
        raise IDXFormatError(f"{path}: missing magic number (file has {len(raw)} bytes, offset 0)")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IDXFormatError(f"{path}: bad magic 0x{got:08x} at offset 0, expected 0x{magic:08x}")
    if len(raw) < need:
        raise IDXFormatError(f"{path}: truncated header, need {need} bytes, file ends at offset {len(raw)}")
    return struct.unpack(">" + "I" * ndims, raw[4:need])


def read_idx_images(path) -> np.ndarray:
    """``(M, H, W)`` float array of ``byte / 255``. Gzipped files are read transparently."""
    raw = _read_bytes(path)
    m, h, w = _header(raw, path, IMAGE_MAGIC, 3)
    body = raw[16:]
    need = m * h * w
    if len(body) < need:
        raise IDXFormatError(f"{path}: truncated payload, expected {need} pixel bytes from offset 16, "
                             f"data ends at offset {16 + len(body)}")
    pixels = np.frombuffer(body, dtype=np.uint8, count=need)
    return pixels.reshape(m, h, w).astype(np.float64) / 255.0


def read_idx_labels(path) -> np.ndarray:
    raw = _read_bytes(path)
    (m,) = _header(raw, path, LABEL_MAGIC, 1)
    body = raw[8:]
    if len(body) < m:
        raise IDXFormatError(f"{path}: truncated payload, expected {m} label bytes from offset 8, "
                             f"data ends at offset {8 + len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=m).astype(np.int64)


def _write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".gz":
        # fixed mtime keeps the bytes reproducible
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images)
    if images.dtype != np.uint8 or images.ndim != 3:
        raise ValueError("write_idx_images: expected a (M, H, W) uint8 array")
    _write(path, struct.pack(">IIII", IMAGE_MAGIC, *images.shape) + images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError("write_idx_labels: expected a 1-D array of byte values")
    _write(path, struct.pack(">II", LABEL_MAGIC, len(labels)) + labels.astype(np.uint8).tobytes())


def downsample(images: np.ndarray, factor: int = 2) -> np.ndarray:
    """Mean-pool ``(M, H, W)`` images over ``factor x factor`` blocks."""
    images = np.asarray(images, dtype=np.float64)
    m, h, w = images.shape
    if h % factor or w % factor:
        raise ValueError(f"downsample: image size {h}x{w} not divisible by {factor}")
    return images.reshape(m, h // factor, factor, w // factor, factor).mean(axis=(2, 4))


def load_idx_dataset(images_path, labels_path=None, name: str = "idx", n_classes: int | None = None,
                     downsample_factor: int = 1, limit: int | None = None, is_ood: bool = False) -> Dataset:
    images = read_idx_images(images_path)
    labels = None
    if labels_path is not None:
        labels = read_idx_labels(labels_path)
        if len(labels) != len(images):
            raise IDXFormatError(f"{labels_path}: {len(labels)} labels for {len(images)} images in {images_path}")
    if limit is not None:
        images = images[:limit]
        labels = labels[:limit] if labels is not None else None
    if downsample_factor > 1:
        images = downsample(images, downsample_factor)
    m, h, w = images.shape
    return Dataset(images.reshape(m, h * w), None if is_ood else labels, name, (h, w), is_ood, n_classes)


@dataclass
class SynthSpec:
    """2-D Gaussian blobs plus an OOD ring or box, mapped into the unit square.

    Raw coordinates map affinely by ``center + raw / (2 * extent)``; with the
    default centre of 0.5 the square ``[-extent, extent]^2`` fills ``[0, 1]^2``.
    """

    means: np.ndarray
    stds: np.ndarray
    samples_per_class: int = 500
    ood_kind: str = "ring"
    ring_radius: float = 10.0
    ring_width: float = 1.0
    box: float = 10.0
    ood_count: int = 1000
    extent: float = 12.0
    center: float | tuple[float, float] = 0.5
    name: str = "blobs"
    exclusion_sigmas: float = 4.0

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 2)
        self.stds = np.broadcast_to(np.asarray(self.stds, dtype=np.float64), (len(self.means),)).copy()
        if np.any(self.stds <= 0):
            raise ValueError("SynthSpec: stds must be positive")
        if self.ood_kind not in ("ring", "uniform"):
            raise ValueError("SynthSpec: ood_kind must be 'ring' or 'uniform'")
        if self.ood_kind == "ring" and self.ring_radius - self.ring_width / 2 <= self.max_spread:
            raise ValueError("SynthSpec: ring must lie outside every blob (radius > max blob spread)")
        self.center = np.broadcast_to(np.asarray(self.center, dtype=np.float64), (2,)).copy()
        outer = self.ring_radius + self.ring_width / 2 if self.ood_kind == "ring" else self.box * np.sqrt(2)
        lo = self.to_unit(np.stack([self.means.min(axis=0) - 5 * self.stds.max(), np.full(2, -outer)]).min(axis=0))
        hi = self.to_unit(np.stack([self.means.max(axis=0) + 5 * self.stds.max(), np.full(2, outer)]).max(axis=0))
        if np.any(lo < 0) or np.any(hi > 1):
            raise ValueError("SynthSpec: data does not fit inside the unit square under this extent/center")

    @property
    def n_classes(self) -> int:
        return len(self.means)

    @property
    def max_spread(self) -> float:
        return float(np.max(np.linalg.norm(self.means, axis=1) + self.exclusion_sigmas * self.stds))

    def to_unit(self, pts: np.ndarray) -> np.ndarray:
        return self.center + np.asarray(pts) / (2 * self.extent)

    def from_unit(self, u: np.ndarray) -> np.ndarray:
        return (np.asarray(u) - self.center) * (2 * self.extent)


def triangle_spec(side: float = 4.0, std: float = 0.5, **kwargs) -> SynthSpec:
    """Three blobs on the vertices of an origin-centred equilateral triangle."""
    r = side / np.sqrt(3.0)
    angles = np.pi / 2 + np.arange(3) * 2 * np.pi / 3
    means = np.column_stack([r * np.cos(angles), r * np.sin(angles)])
    return SynthSpec(means=means, stds=np.full(3, std), **kwargs)


def synth_blobs(spec: SynthSpec, seed: int) -> tuple[Dataset, Dataset]:
    rng = np.random.default_rng(seed)
    pts, labels = [], []
    for c, (mu, sd) in enumerate(zip(spec.means, spec.stds)):
        pts.append(rng.normal(mu, sd, size=(spec.samples_per_class, 2)))
        labels.append(np.full(spec.samples_per_class, c))
    id_pts = np.concatenate(pts)
    if spec.ood_kind == "ring":
        theta = rng.uniform(0, 2 * np.pi, spec.ood_count)
        radius = spec.ring_radius + rng.uniform(-0.5, 0.5, spec.ood_count) * spec.ring_width
        ood = np.column_stack([radius * np.cos(theta), radius * np.sin(theta)])
    else:
        keep = []
        while sum(len(k) for k in keep) < spec.ood_count:
            cand = rng.uniform(-spec.box, spec.box, size=(spec.ood_count, 2))
            d = np.linalg.norm(cand[:, None, :] - spec.means[None], axis=2)
            keep.append(cand[np.all(d > spec.exclusion_sigmas * spec.stds[None], axis=1)])
        ood = np.concatenate(keep)[:spec.ood_count]
    id_set = Dataset(np.clip(spec.to_unit(id_pts), 0, 1), np.concatenate(labels), spec.name,
                     n_classes=spec.n_classes)
    ood_set = Dataset(np.clip(spec.to_unit(ood), 0, 1), None, f"{spec.name}-{spec.ood_kind}", is_ood=True)
    return id_set, ood_set
