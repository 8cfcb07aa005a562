"""Volume files, synthetic phantoms, augmentation and dataset layout.

Volume file layout (little-endian)::

    offset  size  field
    0       4     magic b"CGAV"
    4       2     format version (u16, currently 1)
    6       2     dtype tag (u16: 0 = float32, 1 = uint8)
    8       16    extents C, D, H, W (4 x u32)
    24      ...   payload, C*D*H*W elements in row-major order
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .sam import CLASS_LABELS, channels_to_labels, labels_to_channels, onehot

__all__ = [
    "VolumeFormatError",
    "read_volume",
    "write_volume",
    "PhantomSpec",
    "generate_phantom",
    "augment",
    "onehot",
    "labels_to_channels",
    "channels_to_labels",
    "zscore",
    "write_dataset",
    "load_case",
    "read_manifest",
]

MAGIC = b"CGAV"
VERSION = 1
_HEADER = struct.Struct("<4sHH4I")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_TAGS = {np.dtype("float32"): 0, np.dtype("uint8"): 1}


class VolumeFormatError(ValueError):
    """Malformed volume file: bad magic, unknown version or dtype, truncation."""


def write_volume(path, volume: np.ndarray) -> None:
    """Write a 3-D (D, H, W) or 4-D (C, D, H, W) float32/uint8 array."""
    arr = np.asarray(volume)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"volume must be 3-D or 4-D, got shape {arr.shape}")
    if arr.dtype not in _TAGS:
        raise ValueError(f"unsupported volume dtype {arr.dtype}; use float32 or uint8")
    tag = _TAGS[arr.dtype]
    header = _HEADER.pack(MAGIC, VERSION, tag, *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_volume(path) -> np.ndarray:
    """Read a volume written by :func:`write_volume`; always returns (C, D, H, W)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise VolumeFormatError(f"{path}: truncated header ({len(raw)} of {_HEADER.size} bytes)")
    magic, version, tag, *dims = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VolumeFormatError(f"{path}: unknown format version {version}")
    if tag not in _DTYPES:
        raise VolumeFormatError(f"{path}: unknown dtype tag {tag}")
    dt = _DTYPES[tag]
    expected = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    actual = len(raw) - _HEADER.size
    if actual != expected:
        raise VolumeFormatError(f"{path}: truncated payload, expected {expected} bytes, found {actual}")
    return np.frombuffer(raw, dtype=dt, offset=_HEADER.size).reshape(dims).astype(dt.newbyteorder("="))


@dataclass
class PhantomSpec:
    """Nested ellipsoidal 'tumour' phantoms.

    Label 2 (edema) encloses label 1 (shell) which encloses label 4 (core).
    Radii of the inner structures are fractions of the enclosing ones.
    ``intensities[k][c]`` is the mean of image channel ``c`` for the class
    at channel index ``k``.
    """

    extent: int = 32
    seed: int = 0
    n_tumours: int = 1
    edema_radius: tuple[float, float] = (8.0, 11.0)
    shell_fraction: tuple[float, float] = (0.65, 0.8)
    core_fraction: tuple[float, float] = (0.6, 0.75)
    shell_probability: float = 1.0
    core_probability: float = 1.0
    center_jitter: float = 1.0
    placement: str = "random"  # or "center"
    noise: float = 0.35
    intensities: tuple[tuple[float, ...], ...] = (
        (0.0, 0.0, 0.0, 0.0),
        (1.0, -0.6, 0.4, 1.2),
        (0.3, 1.0, 1.0, 0.0),
        (-0.6, 1.3, -0.5, 1.5),
    )
    normalize: bool = True

    def validate(self) -> None:
        if self.extent < 16:
            raise ValueError(f"phantom extent {self.extent} below minimum 16")
        lo, hi = self.edema_radius
        if lo <= 0 or hi < lo:
            raise ValueError(f"bad edema radius range {self.edema_radius}")
        if 2 * hi >= self.extent:
            raise ValueError(f"edema radius {hi} does not fit in extent {self.extent}")
        if len(self.intensities) != len(CLASS_LABELS):
            raise ValueError("intensities need one row per class")


def _ellipsoid(grid, center, radii) -> np.ndarray:
    acc = 0.0
    for g, c, r in zip(grid, center, radii):
        acc = acc + ((g - c) / r) ** 2
    return acc <= 1.0


def zscore(image: np.ndarray) -> np.ndarray:
    """Per-channel zero mean, unit variance."""
    mu = image.mean(axis=(1, 2, 3), keepdims=True)
    sd = image.std(axis=(1, 2, 3), keepdims=True)
    return ((image - mu) / np.where(sd > 0, sd, 1.0)).astype(np.float32)


def generate_phantom(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Image ``(4, S, S, S)`` float32 and labels ``(S, S, S)`` uint8 for ``spec``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    S = spec.extent
    grid = np.meshgrid(*(np.arange(S, dtype=np.float64),) * 3, indexing="ij")
    labels = np.zeros((S, S, S), np.uint8)
    for _ in range(spec.n_tumours):
        r_ed = rng.uniform(*spec.edema_radius, size=3) if spec.placement != "center" \
            else np.full(3, spec.edema_radius[0])
        if spec.placement == "center":
            center = np.full(3, S / 2.0)
        else:
            center = np.array([rng.uniform(r + 1, S - r - 2) for r in r_ed])
        edema = _ellipsoid(grid, center, r_ed)
        labels[edema & (labels == 0)] = 2
        if rng.random() < spec.shell_probability:
            r_sh = r_ed * rng.uniform(*spec.shell_fraction)
            c_sh = center + rng.normal(0, spec.center_jitter, 3) * (spec.placement != "center")
            shell = _ellipsoid(grid, c_sh, r_sh) & edema
            labels[shell] = 1
            if rng.random() < spec.core_probability:
                r_co = r_sh * rng.uniform(*spec.core_fraction)
                c_co = c_sh + rng.normal(0, spec.center_jitter / 2, 3) * (spec.placement != "center")
                labels[_ellipsoid(grid, c_co, r_co) & shell] = 4
    table = np.asarray(spec.intensities, dtype=np.float64)  # (K, C)
    image = np.moveaxis(table[labels_to_channels(labels)], -1, 0)
    if spec.noise > 0:
        image = image + rng.normal(0.0, spec.noise, image.shape)
    image = zscore(image) if spec.normalize else image.astype(np.float32)
    return image, labels


def augment(image: np.ndarray, labels: np.ndarray, rng: np.random.Generator, crop: int | None = None,
            flip_p: float = 0.5, shift: float = 0.1, scale: tuple[float, float] = (0.9, 1.1)):
    """Random crop, per-axis mirror flips, per-channel intensity scale and shift.

    Geometric ops touch image and labels identically; intensity ops touch
    the image only.
    """
    spatial = labels.shape
    if crop is not None:
        if any(crop > s for s in spatial):
            raise ValueError(f"crop {crop} larger than volume {spatial}")
        offs = [int(rng.integers(0, s - crop + 1)) for s in spatial]
        sl = tuple(slice(o, o + crop) for o in offs)
        image = image[(slice(None),) + sl]
        labels = labels[sl]
    for axis in range(3):
        if rng.random() < flip_p:
            image = np.flip(image, axis=axis + 1)
            labels = np.flip(labels, axis=axis)
    c = image.shape[0]
    factor = rng.uniform(scale[0], scale[1], size=(c, 1, 1, 1))
    offset = rng.uniform(-shift, shift, size=(c, 1, 1, 1))
    image = (image * factor + offset).astype(np.float32)
    return np.ascontiguousarray(image), np.ascontiguousarray(labels)


def write_dataset(root, n_cases: int, spec: PhantomSpec, folds: int = 5, seed: int = 0) -> Path:
    """Generate ``n_cases`` phantoms as ``case_<id>/{image,labels}.cgav`` plus ``manifest.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_cases)
    fold_of = {int(case): int(i % folds) for i, case in enumerate(order)}
    cases = []
    for i in range(n_cases):
        cid = f"{i:03d}"
        case_spec = PhantomSpec(**{**asdict(spec), "seed": int(spec.seed * 100003 + i)})
        image, labels = generate_phantom(case_spec)
        d = root / f"case_{cid}"
        d.mkdir(exist_ok=True)
        write_volume(d / "image.cgav", image)
        write_volume(d / "labels.cgav", labels)
        cases.append({"id": cid, "fold": fold_of[i]})
    manifest = {"version": 1, "folds": folds, "phantom": asdict(spec), "cases": cases}
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return root


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {root}")
    with open(path) as fh:
        return json.load(fh)


def load_case(root, case_id: str) -> tuple[np.ndarray, np.ndarray]:
    d = Path(root) / f"case_{case_id}"
    image = read_volume(d / "image.cgav")
    labels = read_volume(d / "labels.cgav")[0]
    return image, labels


def file_sha256(path) -> str:
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def is_writable_dir(path) -> bool:
    path = Path(path)
    probe = path if path.exists() else path.parent
    return os.access(probe, os.W_OK)
