"""Loading, validating, slicing and preprocessing labelled CT volumes.

Two on-disk containers are supported:

* ``raw_json``: little-endian voxel payload files plus a JSON sidecar
  (``dims``, ``spacing_mm``, ``dtype``, ``classes``, ``files``).
* ``nifti1``: uncompressed single-file NIfTI-1 (int16, uint8, uint16, float32).

Arrays are held in C order with shape ``dims``; the axial axis defaults to the
third dimension.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

HU_MIN = -200.0
HU_MAX = 200.0
SLICE_SIZE = 256
DEFAULT_MARGIN = 16

LABEL_DTYPE = np.dtype("<u2")


class VolumeFormatError(ValueError):
    """Malformed header, payload size mismatch or unsupported datatype."""


@dataclass
class LabeledVolume:
    image: np.ndarray
    ground_truth: np.ndarray | None
    candidate: np.ndarray | None = None
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    id: str = ""
    classes: dict[int, str] = field(default_factory=dict)
    axial_axis: int = 2

    def __post_init__(self):
        self.image = np.asarray(self.image)
        if self.image.ndim != 3:
            raise VolumeFormatError(f"{self.id}: image must be 3D, got {self.image.shape}")
        for name in ("ground_truth", "candidate"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr)
            if arr.shape != self.image.shape:
                raise VolumeFormatError(
                    f"{self.id}: {name} shape {arr.shape} != image shape {self.image.shape}")
            setattr(self, name, arr)
        sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 3 or not all(np.isfinite(s) and s > 0 for s in sp):
            raise VolumeFormatError(f"{self.id}: spacing must be 3 positive finite values, got {sp}")
        self.spacing = sp
        if self.axial_axis not in (0, 1, 2):
            raise VolumeFormatError(f"{self.id}: axial_axis must be 0, 1 or 2")
        self.classes = {int(k): str(v) for k, v in self.classes.items()}
        self._register_unknown_classes()

    def _register_unknown_classes(self):
        for arr in (self.ground_truth, self.candidate):
            if arr is None:
                continue
            for cid in np.unique(arr):
                cid = int(cid)
                if cid != 0 and cid not in self.classes:
                    log.warning("%s: class id %d not in class table; registered as placeholder",
                                self.id, cid)
                    self.classes[cid] = f"class_{cid}"

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.image.shape)

    def labels(self, source: str) -> np.ndarray:
        if source == "ground_truth":
            arr = self.ground_truth
        elif source == "candidate":
            arr = self.candidate
        else:
            raise ValueError(f"unknown label source {source!r}")
        if arr is None:
            raise ValueError(f"{self.id}: no {source} labels")
        return arr

    def n_slices(self) -> int:
        return self.image.shape[self.axial_axis]

    def slice_of(self, arr: np.ndarray, index: int, axis: int | None = None) -> np.ndarray:
        axis = self.axial_axis if axis is None else axis
        return np.take(arr, index, axis=axis)


@dataclass
class SlicePair:
    """One preprocessed 2D sample: normalized image, binary class mask, DSC target."""

    pixels: np.ndarray
    mask: np.ndarray
    class_id: int
    true_dsc: float | None = None
    volume_id: str = ""
    slice_index: int = 0
    empty_mask: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.true_dsc is not None and not 0.0 <= self.true_dsc <= 1.0:
            raise ValueError(f"true_dsc {self.true_dsc} outside [0, 1]")


# raw_json ------------------------------------------------------------------

def _read_raw(path: Path, dtype, dims) -> np.ndarray:
    if not path.exists():
        raise FileNotFoundError(path)
    dt = np.dtype(dtype).newbyteorder("<")
    data = np.fromfile(path, dtype=dt)
    expected = int(np.prod(dims))
    if data.size != expected or path.stat().st_size != expected * dt.itemsize:
        raise VolumeFormatError(
            f"{path.name}: payload has {path.stat().st_size} bytes, header implies "
            f"{expected} voxels x {dt.itemsize} bytes")
    return data.reshape(dims).astype(dt.newbyteorder("="), copy=False)


def load_raw_json(path) -> LabeledVolume:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        hdr = json.loads(path.read_text())
        dims = tuple(int(d) for d in hdr["dims"])
        spacing = tuple(float(s) for s in hdr["spacing_mm"])
        files = hdr["files"]
        image_dtype = hdr.get("dtype", "int16")
        classes = hdr.get("classes", {})
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"{path}: malformed sidecar ({exc})") from exc
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise VolumeFormatError(f"{path}: dims must be three positive integers")
    base = path.parent
    image = _read_raw(base / files["image"], image_dtype, dims)
    gt = _read_raw(base / files["ground_truth"], LABEL_DTYPE, dims) if files.get("ground_truth") else None
    cand = _read_raw(base / files["candidate"], LABEL_DTYPE, dims) if files.get("candidate") else None
    return LabeledVolume(image=image, ground_truth=gt, candidate=cand, spacing=spacing,
                         id=hdr.get("id", path.stem), classes=classes,
                         axial_axis=int(hdr.get("axial_axis", 2)))


def write_raw_json(volume: LabeledVolume, path) -> Path:
    """Write ``volume`` as a JSON sidecar at ``path`` plus ``.raw`` payload files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stem = path.stem
    image_dtype = np.dtype(volume.image.dtype).newbyteorder("<")
    files = {"image": f"{stem}_image.raw"}
    volume.image.astype(image_dtype, copy=False).tofile(path.parent / files["image"])
    for name in ("ground_truth", "candidate"):
        arr = getattr(volume, name)
        if arr is not None:
            files[name] = f"{stem}_{name}.raw"
            np.asarray(arr).astype(LABEL_DTYPE, copy=False).tofile(path.parent / files[name])
    hdr = {
        "id": volume.id,
        "dims": list(volume.dims),
        "spacing_mm": list(volume.spacing),
        "dtype": image_dtype.name,
        "axial_axis": volume.axial_axis,
        "classes": {str(k): v for k, v in sorted(volume.classes.items())},
        "files": files,
    }
    path.write_text(json.dumps(hdr, indent=2, sort_keys=True))
    return path


# NIfTI-1 -------------------------------------------------------------------

_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32, 512: np.uint16}


def read_nifti(path) -> tuple[np.ndarray, tuple[float, ...]]:
    """Read an uncompressed single-file NIfTI-1 volume.

    Returns the array in (i, j, k) index order and the pixdim spacing.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.suffix == ".gz":
        raise VolumeFormatError(f"{path}: compressed NIfTI is not supported")
    raw = path.read_bytes()
    if len(raw) < 348:
        raise VolumeFormatError(f"{path}: file shorter than a NIfTI-1 header")
    for end in ("<", ">"):
        if struct.unpack(end + "i", raw[:4])[0] == 348:
            break
    else:
        raise VolumeFormatError(f"{path}: sizeof_hdr is not 348")
    if raw[344:348] not in (b"n+1\x00",):
        raise VolumeFormatError(f"{path}: not a single-file NIfTI-1 (magic {raw[344:348]!r})")
    dim = struct.unpack(end + "8h", raw[40:56])
    datatype, _bitpix = struct.unpack(end + "2h", raw[70:74])
    pixdim = struct.unpack(end + "8f", raw[76:108])
    vox_offset = int(struct.unpack(end + "f", raw[108:112])[0])
    slope, inter = struct.unpack(end + "2f", raw[112:120])
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise VolumeFormatError(f"{path}: invalid dim[0]={ndim}")
    shape = tuple(int(d) for d in dim[1:1 + ndim])
    # trailing singleton dims are common (e.g. dim[0]=4 with dim[4]=1)
    while len(shape) > 3 and shape[-1] == 1:
        shape = shape[:-1]
    if len(shape) != 3:
        raise VolumeFormatError(f"{path}: expected a 3D volume, got dims {shape}")
    if datatype not in _NIFTI_DTYPES:
        raise VolumeFormatError(f"{path}: unsupported NIfTI datatype code {datatype}")
    dt = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(end)
    n = int(np.prod(shape))
    if len(raw) < vox_offset + n * dt.itemsize:
        raise VolumeFormatError(f"{path}: payload shorter than header dims imply")
    data = np.frombuffer(raw, dtype=dt, count=n, offset=vox_offset)
    arr = data.reshape(shape, order="F").astype(dt.newbyteorder("="))
    if slope not in (0.0, 1.0) or inter != 0.0:
        arr = arr * np.float32(slope if slope != 0.0 else 1.0) + np.float32(inter)
    spacing = tuple(float(p) for p in pixdim[1:4])
    return np.ascontiguousarray(arr), spacing


def load_nifti_volume(image_path, ground_truth=None, candidate=None, classes=None,
                      volume_id=None, axial_axis: int = 2) -> LabeledVolume:
    image, spacing = read_nifti(image_path)
    if not np.issubdtype(image.dtype, np.integer):
        image = np.rint(image).astype(np.int16)

    def labels(p):
        if p is None:
            return None
        arr, _ = read_nifti(p)
        return np.rint(arr).astype(np.uint16) if not np.issubdtype(arr.dtype, np.integer) \
            else arr.astype(np.uint16)

    return LabeledVolume(image=image, ground_truth=labels(ground_truth),
                         candidate=labels(candidate), spacing=spacing,
                         id=volume_id or Path(image_path).name.split(".")[0],
                         classes=classes or {}, axial_axis=axial_axis)


def load_volume(path, format: str = "raw_json", **kwargs) -> LabeledVolume:
    """Load a volume; ``format`` is ``raw_json`` or ``nifti1``.

    For ``nifti1`` the label files are passed as ``ground_truth=``/``candidate=``.
    """
    if format == "raw_json":
        return load_raw_json(path)
    if format == "nifti1":
        return load_nifti_volume(path, **kwargs)
    raise ValueError(f"unknown volume format {format!r}")


def load_manifest(path) -> list[dict]:
    """Dataset manifest: JSON list of volume entries, paths relative to the manifest."""
    path = Path(path)
    entries = json.loads(path.read_text())
    if not isinstance(entries, list):
        raise VolumeFormatError(f"{path}: manifest must be a JSON list")
    base = path.parent
    out = []
    for e in entries:
        e = dict(e)
        for key in ("path", "image", "ground_truth", "candidate"):
            if e.get(key):
                e[key] = str(base / e[key])
        out.append(e)
    return out


def load_entry(entry: dict) -> LabeledVolume:
    fmt = entry.get("format", "raw_json")
    if fmt == "raw_json":
        vol = load_raw_json(entry["path"])
        if "id" in entry:
            vol.id = entry["id"]
        if "axial_axis" in entry:
            vol.axial_axis = int(entry["axial_axis"])
        return vol
    classes = {int(k): v for k, v in entry.get("classes", {}).items()}
    return load_nifti_volume(entry["image"], entry.get("ground_truth"), entry.get("candidate"),
                             classes=classes, volume_id=entry.get("id"),
                             axial_axis=int(entry.get("axial_axis", 2)))


def write_manifest(paths, manifest_path) -> Path:
    manifest_path = Path(manifest_path)
    entries = []
    for p in paths:
        p = Path(p)
        entries.append({"id": json.loads(p.read_text()).get("id", p.stem), "format": "raw_json",
                        "path": str(p.relative_to(manifest_path.parent))})
    manifest_path.write_text(json.dumps(entries, indent=2))
    return manifest_path


# slicing and preprocessing -------------------------------------------------

def slices_containing(volume: LabeledVolume, class_id: int, source: str = "ground_truth",
                      axis: int | None = None) -> list[int]:
    axis = volume.axial_axis if axis is None else axis
    hit = volume.labels(source) == class_id
    other = tuple(a for a in range(3) if a != axis)
    return [int(i) for i in np.flatnonzero(hit.any(axis=other))]


def normalize_hu(image: np.ndarray) -> np.ndarray:
    """Clip to [HU_MIN, HU_MAX] and map affinely onto [0, 1]."""
    x = np.clip(np.asarray(image, dtype=np.float32), HU_MIN, HU_MAX)
    return (x - np.float32(HU_MIN)) / np.float32(HU_MAX - HU_MIN)


def crop_box(mask: np.ndarray, margin: int) -> tuple[int, int, int, int] | None:
    """Tight bounding box of ``mask`` grown by ``margin``, clamped; (r0, r1, c0, c1) half-open."""
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    h, w = mask.shape
    return (max(rows[0] - margin, 0), min(rows[-1] + 1 + margin, h),
            max(cols[0] - margin, 0), min(cols[-1] + 1 + margin, w))


def _bilinear_axis(n_in: int, n_out: int):
    # half-pixel centres, edge-clamped
    x = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    x = np.clip(x, 0.0, n_in - 1)
    lo = np.floor(x).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, (x - lo).astype(np.float32)


def resize_bilinear(img: np.ndarray, size: int = SLICE_SIZE) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    r0, r1, fr = _bilinear_axis(img.shape[0], size)
    c0, c1, fc = _bilinear_axis(img.shape[1], size)
    rows = img[r0] * (1 - fr)[:, None] + img[r1] * fr[:, None]
    return rows[:, c0] * (1 - fc)[None, :] + rows[:, c1] * fc[None, :]


def resize_nearest(img: np.ndarray, size: int = SLICE_SIZE) -> np.ndarray:
    h, w = img.shape
    ri = np.minimum(((np.arange(size) + 0.5) * h / size).astype(np.intp), h - 1)
    ci = np.minimum(((np.arange(size) + 0.5) * w / size).astype(np.intp), w - 1)
    return img[np.ix_(ri, ci)]


def preprocess_arrays(image2d: np.ndarray, mask2d: np.ndarray, margin: int = DEFAULT_MARGIN,
                      size: int = SLICE_SIZE) -> tuple[np.ndarray, np.ndarray, bool]:
    """Normalize, crop around the mask and resize one 2D image/mask pair.

    Returns ``(pixels, mask, empty)``; an empty mask keeps the full frame.
    """
    if min(image2d.shape) < 2:
        raise ValueError(f"slice must be at least 2x2, got {image2d.shape}")
    mask2d = np.asarray(mask2d, dtype=bool)
    box = crop_box(mask2d, margin)
    empty = box is None
    if not empty:
        r0, r1, c0, c1 = box
        image2d = image2d[r0:r1, c0:c1]
        mask2d = mask2d[r0:r1, c0:c1]
    pixels = resize_bilinear(normalize_hu(image2d), size)
    # bilinear weights can overshoot [0, 1] by an ulp
    np.clip(pixels, 0.0, 1.0, out=pixels)
    mask = resize_nearest(mask2d.astype(np.uint8), size)
    return pixels, mask, empty


def preprocess_slice(volume: LabeledVolume, axis_index: int | None, slice_index: int,
                     class_id: int, source: str = "candidate", margin: int = DEFAULT_MARGIN,
                     size: int = SLICE_SIZE) -> SlicePair:
    if class_id != 0 and class_id not in volume.classes:
        raise KeyError(f"class {class_id} not in class table of {volume.id}")
    axis = volume.axial_axis if axis_index is None else axis_index
    if not 0 <= slice_index < volume.image.shape[axis]:
        raise IndexError(f"slice {slice_index} out of range for axis {axis}")
    img = volume.slice_of(volume.image, slice_index, axis)
    lab = volume.slice_of(volume.labels(source), slice_index, axis) == class_id
    pixels, mask, empty = preprocess_arrays(img, lab, margin, size)
    return SlicePair(pixels=pixels, mask=mask, class_id=int(class_id), volume_id=volume.id,
                     slice_index=int(slice_index), empty_mask=empty)
