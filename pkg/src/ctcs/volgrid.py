"""Voxel grids, the CTCSV1/CTCSM1 file formats, preprocessing and lesion extraction."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

HU_MIN = -1024
HU_MAX = 3071

ARTERIES = {1: "LM", 2: "LAD", 3: "LCX", 4: "RCA"}
ARTERY_CODES = {name: code for code, name in ARTERIES.items()}

DEFAULT_SPACING = (0.5, 0.5, 2.5)

VOLUME_MAGIC = "CTCSV1"
MASK_MAGIC = "CTCSM1"


class VolumeFormatError(ValueError):
    """Raised for malformed or inconsistent volume/mask files."""


@dataclass(frozen=True)
class Volume:
    """HU grid stored as an int16 array shaped (nz, ny, nx); x varies fastest."""

    hu: np.ndarray
    spacing: tuple = DEFAULT_SPACING

    def __post_init__(self):
        hu = np.ascontiguousarray(self.hu, dtype=np.int16)
        if hu.ndim != 3 or min(hu.shape) < 1:
            raise ValueError(f"hu must be a non-empty 3-D array, got shape {hu.shape}")
        if hu.size and (int(hu.min()) < HU_MIN or int(hu.max()) > HU_MAX):
            raise ValueError(f"HU values must lie in [{HU_MIN}, {HU_MAX}]")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        hu.setflags(write=False)
        object.__setattr__(self, "hu", hu)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self):
        """(nx, ny, nz)."""
        nz, ny, nx = self.hu.shape
        return (nx, ny, nz)

    @property
    def voxel_volume(self):
        dx, dy, dz = self.spacing
        return dx * dy * dz


@dataclass(frozen=True)
class ArteryLabelMap:
    labels: np.ndarray
    spacing: tuple = DEFAULT_SPACING

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if labels.ndim != 3:
            raise ValueError("labels must be a 3-D array")
        if labels.size and int(labels.max()) > 4:
            raise ValueError("artery label codes must be in 0..4")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self):
        nz, ny, nx = self.labels.shape
        return (nx, ny, nz)


@dataclass(frozen=True)
class PreprocessConfig:
    clip_lo: int = -1024
    clip_hi: int = 1024
    normalize: bool = True

    def __post_init__(self):
        if not self.clip_lo < self.clip_hi:
            raise ValueError("clip_lo must be below clip_hi")


@dataclass(frozen=True)
class ExtractionConfig:
    threshold_hu: int = 130
    connectivity: int = 26
    min_lesion_voxels: int = 1

    def __post_init__(self):
        if self.connectivity not in (6, 18, 26):
            raise ValueError(f"connectivity must be 6, 18 or 26, got {self.connectivity}")
        if self.min_lesion_voxels < 1:
            raise ValueError("min_lesion_voxels must be >= 1")
        if self.threshold_hu <= PreprocessConfig().clip_lo:
            raise ValueError("threshold_hu must exceed the clip floor")


@dataclass
class LesionComponent:
    """One connected calcified lesion confined to a single artery label.

    ``voxels`` is an (n, 3) int array of (x, y, z) indices in scan order and
    ``hu`` the matching HU values.
    """

    id: int
    artery: int
    voxels: np.ndarray
    hu: np.ndarray
    spacing: tuple
    per_slice_area: dict = field(default_factory=dict)
    per_slice_peak: dict = field(default_factory=dict)

    @property
    def voxel_count(self):
        return int(len(self.voxels))

    @property
    def peak_hu(self):
        return int(self.hu.max())

    @property
    def min_hu(self):
        return int(self.hu.min())

    @property
    def mean_hu(self):
        return float(self.hu.sum()) / len(self.hu)

    @property
    def centroid(self):
        """Centroid in mm, voxel centres at index * spacing."""
        return self.voxels.mean(axis=0) * np.asarray(self.spacing)

    @property
    def artery_name(self):
        return ARTERIES[self.artery]


def _header_bytes(magic, dims, spacing, dtype):
    nx, ny, nz = dims
    dx, dy, dz = spacing
    header = {"magic": magic, "nx": nx, "ny": ny, "nz": nz, "dx": dx, "dy": dy, "dz": dz, "dtype": dtype}
    return (json.dumps(header, separators=(",", ":")) + "\n").encode("utf-8")


def save_volume(path, volume):
    payload = volume.hu.astype("<i2").tobytes()
    Path(path).write_bytes(_header_bytes(VOLUME_MAGIC, volume.dims, volume.spacing, "i16le") + payload)


def save_mask(path, mask):
    payload = mask.labels.astype(np.uint8).tobytes()
    Path(path).write_bytes(_header_bytes(MASK_MAGIC, mask.dims, mask.spacing, "u8") + payload)


def _read_container(path, magic, dtype, itemsize):
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise VolumeFormatError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"{path}: malformed header: {exc}") from None
    if not isinstance(header, dict) or header.get("magic") != magic:
        raise VolumeFormatError(f"{path}: expected magic {magic!r}")
    if header.get("dtype") != dtype:
        raise VolumeFormatError(f"{path}: expected dtype {dtype!r}, got {header.get('dtype')!r}")
    try:
        nx, ny, nz = (int(header[k]) for k in ("nx", "ny", "nz"))
        spacing = tuple(float(header[k]) for k in ("dx", "dy", "dz"))
    except (KeyError, TypeError, ValueError):
        raise VolumeFormatError(f"{path}: header lacks dims/spacing") from None
    if min(nx, ny, nz) < 1 or min(spacing) <= 0:
        raise VolumeFormatError(f"{path}: dims and spacing must be positive")
    payload = raw[nl + 1:]
    expected = nx * ny * nz * itemsize
    if len(payload) < expected:
        raise VolumeFormatError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    if len(payload) > expected:
        raise VolumeFormatError(f"{path}: trailing bytes after payload ({len(payload) - expected} extra)")
    return header, (nz, ny, nx), spacing, payload, nl + 1


def load_volume(path):
    """Read a CTCSV1 file; raw HU values are returned unmodified."""
    _, shape, spacing, payload, offset = _read_container(path, VOLUME_MAGIC, "i16le", 2)
    hu = np.frombuffer(payload, dtype="<i2").reshape(shape)
    bad = np.flatnonzero((hu < HU_MIN) | (hu > HU_MAX))
    if bad.size:
        i = int(bad[0])
        raise VolumeFormatError(
            f"{path}: HU {int(hu.flat[i])} out of range at byte offset {offset + 2 * i}"
        )
    return Volume(hu.astype(np.int16), spacing)


def load_mask(path):
    _, shape, spacing, payload, offset = _read_container(path, MASK_MAGIC, "u8", 1)
    labels = np.frombuffer(payload, dtype=np.uint8).reshape(shape)
    bad = np.flatnonzero(labels > 4)
    if bad.size:
        i = int(bad[0])
        raise VolumeFormatError(f"{path}: label {int(labels.flat[i])} invalid at byte offset {offset + i}")
    return ArteryLabelMap(labels.copy(), spacing)


def clip_normalize(volume, cfg=PreprocessConfig()):
    """Clamp HU to [clip_lo, clip_hi] and optionally rescale to [0, 1]."""
    hu = np.clip(volume.hu.astype(np.float64), cfg.clip_lo, cfg.clip_hi)
    if not cfg.normalize:
        return hu
    return (hu - cfg.clip_lo) / (cfg.clip_hi - cfg.clip_lo)


def normalize_hu(values, cfg=PreprocessConfig()):
    values = np.clip(np.asarray(values, dtype=np.float64), cfg.clip_lo, cfg.clip_hi)
    return (values - cfg.clip_lo) / (cfg.clip_hi - cfg.clip_lo)


def extract_lesions(volume, mask, cfg=ExtractionConfig()):
    """Connected supra-threshold components within each artery label.

    Lesions are ordered by (artery, min z, min y, min x) and numbered from 1.
    """
    if volume.hu.shape != mask.labels.shape:
        raise ValueError(f"volume dims {volume.dims} do not match mask dims {mask.dims}")
    candidates = ((volume.hu >= cfg.threshold_hu) & (mask.labels > 0)).astype(np.uint8)
    if not candidates.any():
        return []
    labels, n = kernels.label_components(candidates, mask.labels, cfg.connectivity)

    flat = labels.ravel()
    idx = np.flatnonzero(flat)
    comp = flat[idx]
    order = np.argsort(comp, kind="stable")
    idx = idx[order]
    comp = comp[order]
    starts = np.flatnonzero(np.r_[True, comp[1:] != comp[:-1]])
    ends = np.r_[starts[1:], len(comp)]

    nz, ny, nx = volume.hu.shape
    hu_flat = volume.hu.ravel()
    art_flat = mask.labels.ravel()
    dx, dy, _ = volume.spacing
    pieces = []
    for s, e in zip(starts, ends):
        vox_idx = idx[s:e]
        if len(vox_idx) < cfg.min_lesion_voxels:
            continue
        z, rem = np.divmod(vox_idx, ny * nx)
        y, x = np.divmod(rem, nx)
        key = (int(art_flat[vox_idx[0]]), int(z.min()), int(y.min()), int(x.min()), int(vox_idx[0]))
        pieces.append((key, np.stack([x, y, z], axis=1).astype(np.int64), hu_flat[vox_idx].astype(np.int64)))
    pieces.sort(key=lambda p: p[0])

    lesions = []
    for lid, (key, voxels, hu) in enumerate(pieces, start=1):
        zs = voxels[:, 2]
        areas = {}
        peaks = {}
        for zval in np.unique(zs):
            sel = zs == zval
            areas[int(zval)] = int(sel.sum()) * dx * dy
            peaks[int(zval)] = int(hu[sel].max())
        lesions.append(LesionComponent(lid, key[0], voxels, hu, volume.spacing, areas, peaks))
    return lesions
