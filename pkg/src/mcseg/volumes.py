"""
Volume, mask and probability-map types plus the raw container format.

A container is two files: a small text header (``key = value`` per line)
and a sidecar ``.raw`` payload of little-endian float32 voxels stored
x-fastest (axis 0 varies fastest, i.e. Fortran order).
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np

PathLike = Union[str, Path]

DTYPE_TAG = "f32"
ORDER_TAG = "le-xfastest"
PAYLOAD_SUFFIX = ".raw"

PROB_ROLES = ("decoder_A", "decoder_B", "soft_pseudo_label", "ensemble")


class ContainerError(ValueError):
    """Raised for malformed, truncated or non-finite container files."""


def _frozen(data, dtype) -> np.ndarray:
    arr = np.array(data, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _check_spacing(spacing) -> Tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
        raise ValueError(f"spacing must be three positive numbers, got {spacing}")
    return spacing


def _check_3d(arr: np.ndarray, what: str):
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ValueError(f"{what} must be a non-empty 3D array, got shape {arr.shape}")


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar intensity grid with per-axis voxel size in mm."""

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = _frozen(self.data, np.float32)
        _check_3d(data, "Volume")
        if not np.all(np.isfinite(data)):
            raise ValueError("Volume contains non-finite values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self):
        return self.data.shape

    def __eq__(self, other):
        return (isinstance(other, Volume) and self.spacing == other.spacing
                and np.array_equal(self.data, other.data))


@dataclass(frozen=True, eq=False)
class LabelMask:
    """Binary ground-truth grid."""

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.dtype != bool and not np.all((raw == 0) | (raw == 1)):
            raise ValueError("LabelMask values must be exactly 0 or 1")
        data = _frozen(raw, np.uint8)
        _check_3d(data, "LabelMask")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self):
        return self.data.shape

    def __eq__(self, other):
        return (isinstance(other, LabelMask) and self.spacing == other.spacing
                and np.array_equal(self.data, other.data))


@dataclass(frozen=True, eq=False)
class ProbabilityMap:
    """Per-voxel foreground probability tagged with where it came from."""

    data: np.ndarray
    role: str = "ensemble"

    def __post_init__(self):
        data = _frozen(self.data, np.float32)
        _check_3d(data, "ProbabilityMap")
        if not np.all((data >= 0) & (data <= 1)):
            raise ValueError("ProbabilityMap values must lie in [0, 1]")
        if self.role not in PROB_ROLES:
            raise ValueError(f"unknown role {self.role!r}; expected one of {PROB_ROLES}")
        object.__setattr__(self, "data", data)

    @property
    def shape(self):
        return self.data.shape


def check_pair(volume: Volume, mask: LabelMask):
    if volume.shape != mask.shape:
        raise ValueError(f"volume shape {volume.shape} != mask shape {mask.shape}")


def payload_path(path: PathLike) -> Path:
    return Path(path).with_suffix(PAYLOAD_SUFFIX)


def format_header(shape, spacing) -> str:
    return (
        f"shape = {' '.join(str(int(s)) for s in shape)}\n"
        f"spacing = {' '.join(repr(float(s)) for s in spacing)}\n"
        f"dtype = {DTYPE_TAG}\n"
        f"order = {ORDER_TAG}\n"
    )


def parse_header(text: str) -> dict:
    fields = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ContainerError(f"header line {lineno} is not 'key = value': {line!r}")
        fields[key.strip()] = value.strip()
    missing = {"shape", "spacing", "dtype", "order"} - fields.keys()
    if missing:
        raise ContainerError(f"header missing keys: {sorted(missing)}")
    if fields["dtype"] != DTYPE_TAG:
        raise ContainerError(f"unsupported dtype {fields['dtype']!r}")
    if fields["order"] != ORDER_TAG:
        raise ContainerError(f"unsupported voxel order {fields['order']!r}")
    try:
        shape = tuple(int(s) for s in fields["shape"].split())
        spacing = tuple(float(s) for s in fields["spacing"].split())
    except ValueError as exc:
        raise ContainerError(f"unparsable shape/spacing: {exc}") from None
    if len(shape) != 3 or min(shape) < 1:
        raise ContainerError(f"shape must be three positive ints, got {shape}")
    return {"shape": shape, "spacing": spacing}


def write_array(data: np.ndarray, spacing, path: PathLike):
    """Write any finite 3D array as a container (header at `path`, payload beside it)."""
    arr = np.asarray(data, dtype=np.float32)
    _check_3d(arr, "payload")
    if not np.all(np.isfinite(arr)):
        raise ContainerError("refusing to write non-finite voxels")
    spacing = _check_spacing(spacing)
    path = Path(path)
    path.write_text(format_header(arr.shape, spacing))
    payload_path(path).write_bytes(arr.astype("<f4").tobytes(order="F"))


def read_array(path: PathLike):
    """Read a container into ``(float32 array, spacing)`` after validating it."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no container header at {path}")
    raw_path = payload_path(path)
    if not raw_path.exists():
        raise FileNotFoundError(f"no payload beside header: {raw_path}")
    header = parse_header(path.read_text())
    shape = header["shape"]
    payload = raw_path.read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(payload) != expected:
        raise ContainerError(
            f"payload length mismatch: header shape {shape} needs {expected} bytes, "
            f"found {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape, order="F").astype(np.float32)
    bad = ~np.isfinite(arr)
    if bad.any():
        first = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ContainerError(f"{int(bad.sum())} non-finite voxels, first at {first}")
    return arr, header["spacing"]


def write_volume(v: Volume, path: PathLike):
    write_array(v.data, v.spacing, path)


def read_volume(path: PathLike) -> Volume:
    arr, spacing = read_array(path)
    return Volume(arr, spacing)


def write_mask(m: LabelMask, path: PathLike):
    write_array(m.data, m.spacing, path)


def read_mask(path: PathLike) -> LabelMask:
    arr, spacing = read_array(path)
    try:
        return LabelMask(arr, spacing)
    except ValueError as exc:
        raise ContainerError(f"{path}: {exc}") from None


def write_probability(p: ProbabilityMap, path: PathLike, spacing=(1.0, 1.0, 1.0)):
    write_array(p.data, spacing, path)


def read_probability(path: PathLike, role: str = "ensemble") -> ProbabilityMap:
    arr, _ = read_array(path)
    try:
        return ProbabilityMap(arr, role)
    except ValueError as exc:
        raise ContainerError(f"{path}: {exc}") from None


def read_pair(volume_path: PathLike, mask_path: PathLike):
    """Load a training pair, rejecting mismatched shapes."""
    volume = read_volume(volume_path)
    mask = read_mask(mask_path)
    check_pair(volume, mask)
    return volume, mask
