"""Volume grids, orthogonal slices, 2D mask morphology and MetaImage-style I/O.

Arrays are stored numpy-style as ``(nz, ny, nx)`` so that the flattened
buffer is x-fastest. Slice directions follow the anatomical convention
0 = sagittal (fixed x), 1 = coronal (fixed y), 2 = transverse (fixed z).
A slice keeps the remaining two axes in array order, e.g. a transverse
slice is indexed ``[y, x]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

__all__ = [
    "VolumeGrid",
    "axis_of",
    "slice_count",
    "extract_slice",
    "insert_slice",
    "erode_mask",
    "connected_components",
    "label_components",
    "bounding_rect",
    "read_volume",
    "write_volume",
]

DIRECTIONS = (0, 1, 2)

_CROSS = ndimage.generate_binary_structure(2, 1)

_ELEMENT_TYPES = {"FLOAT32": np.dtype("<f4"), "UINT8": np.dtype("u1")}


@dataclass(frozen=True)
class VolumeGrid:
    """3D scalar intensity field with voxel spacing in mm.

    ``data`` has shape ``(nz, ny, nx)``; ``dims`` reports ``(nx, ny, nz)``.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be 3D and non-empty, got shape {data.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return nx, ny, nz

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


def axis_of(direction: int) -> int:
    """numpy axis that is held fixed by a slice in ``direction``."""
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be 0, 1 or 2, got {direction}")
    return 2 - direction


def slice_count(shape: tuple[int, ...], direction: int) -> int:
    return shape[axis_of(direction)]


def _index(direction: int, index: int, shape: tuple[int, ...]):
    axis = axis_of(direction)
    if not 0 <= index < shape[axis]:
        raise IndexError(
            f"slice index {index} out of range for direction {direction} (extent {shape[axis]})"
        )
    key = [slice(None)] * 3
    key[axis] = index
    return tuple(key)


def extract_slice(vol, direction: int, index: int) -> np.ndarray:
    """Return a copy of the orthogonal plane ``index`` along ``direction``.

    Accepts a :class:`VolumeGrid` or a plain 3D array (e.g. a boolean mask).
    """
    arr = vol.data if isinstance(vol, VolumeGrid) else np.asarray(vol)
    return arr[_index(direction, index, arr.shape)].copy()


def insert_slice(vol: np.ndarray, direction: int, index: int, plane: np.ndarray) -> None:
    """Write ``plane`` into ``vol`` in place; inverse of :func:`extract_slice`."""
    key = _index(direction, index, vol.shape)
    if vol[key].shape != plane.shape:
        raise ValueError(f"plane shape {plane.shape} does not match slice shape {vol[key].shape}")
    vol[key] = plane


def erode_mask(mask: np.ndarray, iterations: int = 1) -> np.ndarray:
    """Binary erosion with the 4-neighbourhood cross; outside the image is background."""
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    mask = np.asarray(mask, dtype=bool)
    if iterations == 0 or not mask.any():
        return mask.copy()
    return ndimage.binary_erosion(mask, structure=_CROSS, iterations=iterations, border_value=0)


def _first_encounter_order(labels: np.ndarray, count: int) -> np.ndarray:
    # relabel so ids increase with the row-major position of each component's first pixel
    if count == 0:
        return labels
    flat = labels.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids != 0
    ids, first = ids[keep], first[keep]
    order = ids[np.argsort(first, kind="stable")]
    lut = np.zeros(flat.max() + 1, dtype=np.int32)
    lut[order] = np.arange(1, len(order) + 1, dtype=np.int32)
    return lut[labels]


def connected_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """4-connected components of a 2D mask.

    Returns ``(labels, count)`` with background 0 and ids ``1..count`` in
    row-major first-encounter order.
    """
    mask = np.asarray(mask, dtype=bool)
    labels, count = ndimage.label(mask, structure=_CROSS)
    return _first_encounter_order(labels.astype(np.int32), count), int(count)


def label_components(label_map: np.ndarray) -> tuple[np.ndarray, int]:
    """Split a 2D label map into 4-connected regions of equal label.

    Every pixel belongs to exactly one region; ids are ``1..count`` in
    row-major first-encounter order.
    """
    label_map = np.asarray(label_map)
    out = np.zeros(label_map.shape, dtype=np.int32)
    offset = 0
    for value in np.unique(label_map):
        comp, n = ndimage.label(label_map == value, structure=_CROSS)
        sel = comp > 0
        out[sel] = comp[sel] + offset
        offset += n
    return _first_encounter_order(out, offset), offset


def bounding_rect(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    """Tight inclusive ``(row_min, row_max, col_min, col_max)``, or None if empty."""
    mask = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])


# -- file I/O ---------------------------------------------------------------


def write_volume(path, data: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> Path:
    """Write a header (``.mhd``) plus raw little-endian voxel file.

    Boolean and integer data are stored as UINT8, everything else as FLOAT32.
    Returns the header path.
    """
    path = Path(path)
    if path.suffix != ".mhd":
        path = path.with_suffix(".mhd")
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError("only 3D volumes can be written")
    if data.dtype == bool or np.issubdtype(data.dtype, np.integer):
        if data.size and (data.min() < 0 or data.max() > 255):
            raise ValueError("integer volume does not fit UINT8")
        etype = "UINT8"
    else:
        etype = "FLOAT32"
    raw_name = path.with_suffix(".raw").name
    nz, ny, nx = data.shape
    header = (
        "NDims = 3\n"
        f"DimSize = {nx} {ny} {nz}\n"
        f"ElementSpacing = {_fmt(spacing[0])} {_fmt(spacing[1])} {_fmt(spacing[2])}\n"
        f"ElementType = {etype}\n"
        f"ElementDataFile = {raw_name}\n"
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(header)
    np.ascontiguousarray(data, dtype=_ELEMENT_TYPES[etype]).tofile(path.with_name(raw_name))
    return path


def _fmt(value: float) -> str:
    return repr(float(value))


def read_volume(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Read a volume written by :func:`write_volume`.

    Returns ``(data, spacing)``; UINT8 volumes come back as ``uint8``.
    """
    path = Path(path)
    fields = {}
    for line in path.read_text().splitlines():
        if "=" not in line:
            continue
        key, value = line.split("=", 1)
        fields[key.strip()] = value.strip()
    missing = {"NDims", "DimSize", "ElementType", "ElementDataFile"} - fields.keys()
    if missing:
        raise ValueError(f"{path}: header lacks {sorted(missing)}")
    if int(fields["NDims"]) != 3:
        raise ValueError(f"{path}: only NDims = 3 is supported")
    nx, ny, nz = (int(v) for v in fields["DimSize"].split())
    spacing = tuple(float(v) for v in fields.get("ElementSpacing", "1 1 1").split())
    etype = fields["ElementType"]
    if etype not in _ELEMENT_TYPES:
        raise ValueError(f"{path}: unsupported ElementType {etype}")
    raw = path.parent / fields["ElementDataFile"]
    data = np.fromfile(raw, dtype=_ELEMENT_TYPES[etype])
    if data.size != nx * ny * nz:
        raise ValueError(f"{raw}: expected {nx * ny * nz} voxels, found {data.size}")
    data = data.reshape(nz, ny, nx)
    if etype == "FLOAT32":
        data = data.astype(np.float32, copy=False)
    return data, spacing
