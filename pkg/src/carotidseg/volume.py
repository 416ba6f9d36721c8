"""3D image / label volumes and their on-disk format.

A volume is stored as two files sharing a stem: ``<stem>.vvolh`` holds a JSON
header and ``<stem>.vvol`` the raw little-endian payload in z-major, then y,
then x order, so voxel ``(z, y, x)`` sits at offset ``((z*H) + y)*W + x``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HEADER_SUFFIX = ".vvolh"
PAYLOAD_SUFFIX = ".vvol"

DTYPES = {"u8": np.dtype("<u1"), "f32": np.dtype("<f4")}
LABEL_CLASSES = (0, 1, 2)
BACKGROUND, LUMEN, WALL = LABEL_CLASSES


class VolumeFormatError(ValueError):
    """Raised for malformed headers, unknown dtypes and payload size mismatches."""


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ValueError(f"spacing must be 3 positive reals, got {spacing}")
    return spacing


def _dtype_tag(dtype) -> str:
    dtype = np.dtype(dtype)
    for tag, dt in DTYPES.items():
        if dtype == dt or dtype == dt.newbyteorder("="):
            return tag
    raise VolumeFormatError(f"unsupported dtype {dtype}")


@dataclass(eq=False)
class Volume3D:
    """Scalar image on a (D, H, W) grid with spacing (sz, sy, sx) in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    intensity_range: tuple[float, float] | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {self.data.shape}")
        _dtype_tag(self.data.dtype)
        self.spacing = _check_spacing(self.spacing)
        if self.intensity_range is not None:
            self.intensity_range = tuple(float(v) for v in self.intensity_range)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def kind(self) -> str:
        return "image"

    def __eq__(self, other):
        return (type(other) is type(self) and self.spacing == other.spacing
                and self.data.dtype == other.data.dtype
                and self.intensity_range == other.intensity_range
                and np.array_equal(self.data, other.data))


@dataclass(eq=False)
class LabelVolume:
    """Voxel-wise class map (0 background, 1 lumen, 2 wall) plus the axial
    slices that carry labels."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    annotated_slices: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"label data must be a non-empty 3D array, got shape {self.data.shape}")
        if self.data.dtype != np.uint8:
            if self.data.dtype.kind not in "iub":
                raise ValueError(f"label data must be integer, got {self.data.dtype}")
            self.data = self.data.astype(np.uint8)
        if self.data.max(initial=0) > 2:
            bad = sorted(set(np.unique(self.data).tolist()) - set(LABEL_CLASSES))
            raise ValueError(f"label values outside {{0,1,2}}: {bad}")
        self.spacing = _check_spacing(self.spacing)
        slices = tuple(int(z) for z in self.annotated_slices)
        if any(b <= a for a, b in zip(slices, slices[1:])):
            raise ValueError(f"annotated_slices must be strictly increasing: {slices}")
        if slices and (slices[0] < 0 or slices[-1] >= self.data.shape[0]):
            raise ValueError(f"annotated_slices out of range [0, {self.data.shape[0]}): {slices}")
        self.annotated_slices = slices

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def kind(self) -> str:
        return "label"

    def copy(self) -> "LabelVolume":
        return LabelVolume(self.data.copy(), self.spacing, self.annotated_slices)

    def __eq__(self, other):
        return (type(other) is type(self) and self.spacing == other.spacing
                and self.annotated_slices == other.annotated_slices
                and np.array_equal(self.data, other.data))


@dataclass
class VolumeHeader:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    dtype: str
    kind: str
    annotated_slices: tuple[int, ...] = ()
    intensity_range: tuple[float, float] | None = None
    byte_order: str = "little"
    layout: str = "zyx"

    def to_json(self) -> str:
        doc = {
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "dtype": self.dtype,
            "byte_order": self.byte_order,
            "layout": self.layout,
            "kind": self.kind,
        }
        if self.kind == "label":
            doc["annotated_slices"] = list(self.annotated_slices)
        if self.intensity_range is not None:
            doc["intensity_range"] = list(self.intensity_range)
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "VolumeHeader":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise VolumeFormatError(f"header is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise VolumeFormatError("header must be a JSON object")
        required = {"dims", "spacing", "dtype", "byte_order", "layout", "kind"}
        missing = required - doc.keys()
        if missing:
            raise VolumeFormatError(f"header missing keys: {sorted(missing)}")
        unknown = doc.keys() - required - {"annotated_slices", "intensity_range"}
        if unknown:
            raise VolumeFormatError(f"header has unknown keys: {sorted(unknown)}")
        dims = doc["dims"]
        if (not isinstance(dims, list) or len(dims) != 3
                or not all(isinstance(d, int) and d > 0 for d in dims)):
            raise VolumeFormatError(f"dims must be 3 positive integers, got {dims!r}")
        if doc["dtype"] not in DTYPES:
            raise VolumeFormatError(f"unknown dtype {doc['dtype']!r}; expected one of {sorted(DTYPES)}")
        if doc["byte_order"] != "little":
            raise VolumeFormatError(f"unsupported byte_order {doc['byte_order']!r}")
        if doc["layout"] != "zyx":
            raise VolumeFormatError(f"unsupported layout {doc['layout']!r}")
        if doc["kind"] not in ("image", "label"):
            raise VolumeFormatError(f"unknown kind {doc['kind']!r}")
        if doc["kind"] == "label" and doc["dtype"] != "u8":
            raise VolumeFormatError("label volumes must be u8")
        try:
            spacing = _check_spacing(doc["spacing"])
        except (TypeError, ValueError) as exc:
            raise VolumeFormatError(str(exc)) from None
        rng = doc.get("intensity_range")
        return cls(dims=tuple(dims), spacing=spacing, dtype=doc["dtype"], kind=doc["kind"],
                   annotated_slices=tuple(doc.get("annotated_slices", ())),
                   intensity_range=tuple(rng) if rng is not None else None)

    @property
    def payload_nbytes(self) -> int:
        d, h, w = self.dims
        return d * h * w * DTYPES[self.dtype].itemsize


def volume_paths(path) -> tuple[Path, Path]:
    """Header and payload paths for ``path`` (either file, or the bare stem)."""
    path = Path(path)
    if path.suffix in (HEADER_SUFFIX, PAYLOAD_SUFFIX):
        path = path.with_suffix("")
    return path.with_name(path.name + HEADER_SUFFIX), path.with_name(path.name + PAYLOAD_SUFFIX)


def write_volume(v: Volume3D | LabelVolume, path) -> Path:
    """Write header + payload; returns the header path."""
    header_path, payload_path = volume_paths(path)
    header = VolumeHeader(
        dims=v.dims, spacing=v.spacing, dtype=_dtype_tag(v.data.dtype), kind=v.kind,
        annotated_slices=getattr(v, "annotated_slices", ()),
        intensity_range=getattr(v, "intensity_range", None),
    )
    payload = np.ascontiguousarray(v.data, dtype=DTYPES[header.dtype]).tobytes(order="C")
    header_path.parent.mkdir(parents=True, exist_ok=True)
    payload_path.write_bytes(payload)
    header_path.write_text(header.to_json())
    return header_path


def read_volume(path) -> Volume3D | LabelVolume:
    header_path, payload_path = volume_paths(path)
    header = VolumeHeader.from_json(header_path.read_text())
    payload = payload_path.read_bytes()
    if len(payload) != header.payload_nbytes:
        raise VolumeFormatError(
            f"{payload_path}: payload is {len(payload)} bytes, header dims {list(header.dims)} "
            f"with dtype {header.dtype} need {header.payload_nbytes}")
    data = np.frombuffer(payload, dtype=DTYPES[header.dtype]).reshape(header.dims).copy()
    try:
        if header.kind == "label":
            return LabelVolume(data, header.spacing, header.annotated_slices)
        return Volume3D(data, header.spacing, header.intensity_range)
    except ValueError as exc:
        raise VolumeFormatError(f"{header_path}: {exc}") from None


def extract_slice(v: Volume3D | LabelVolume, z: int) -> np.ndarray:
    """Copy of axial plane ``z`` as an (H, W) array."""
    if not 0 <= z < v.dims[0]:
        raise IndexError(f"slice {z} out of range [0, {v.dims[0]})")
    return v.data[z].copy()


def insert_slice(v: Volume3D | LabelVolume, z: int, plane: np.ndarray) -> None:
    if not 0 <= z < v.dims[0]:
        raise IndexError(f"slice {z} out of range [0, {v.dims[0]})")
    plane = np.asarray(plane)
    if plane.shape != v.dims[1:]:
        raise ValueError(f"plane shape {plane.shape} != {v.dims[1:]}")
    if isinstance(v, LabelVolume) and plane.size and plane.max() > 2:
        raise ValueError("label plane has values outside {0,1,2}")
    v.data[z] = plane


def read_nifti(path, kind: str = "image", annotated_slices=None) -> Volume3D | LabelVolume:
    """One-way NIfTI import: the (x, y, z) voxel grid becomes (z, y, x) and
    pixdim supplies spacing. Orientation beyond axis order is ignored."""
    import nibabel as nib

    img = nib.load(str(path))
    arr = np.asarray(img.dataobj)
    if arr.ndim == 4 and arr.shape[3] == 1:
        arr = arr[..., 0]
    if arr.ndim != 3:
        raise VolumeFormatError(f"{path}: expected a 3D image, got shape {arr.shape}")
    arr = np.ascontiguousarray(arr.transpose(2, 1, 0))
    sx, sy, sz = (float(s) for s in img.header.get_zooms()[:3])
    spacing = (sz, sy, sx)
    if kind == "label":
        data = np.rint(arr).astype(np.uint8)
        if annotated_slices is None:
            annotated_slices = ()
        return LabelVolume(data, spacing, tuple(annotated_slices))
    if kind != "image":
        raise ValueError(f"unknown kind {kind!r}")
    if arr.dtype == np.uint8:
        return Volume3D(arr, spacing)
    return Volume3D(arr.astype(np.float32), spacing)
