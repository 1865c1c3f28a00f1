"""Volume container, NIfTI-1 and raw+sidecar IO, preprocessing and augmentation.

Arrays are indexed ``(H, W, D)`` = NIfTI ``(i, j, k)``.  NIfTI stores the
first axis fastest, so payloads are read and written in Fortran order.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import ndimage

INTENSITY = "intensity"
LABEL = "label"
KINDS = (INTENSITY, LABEL)


class VolumeFormatError(ValueError):
    """Base class for unreadable volume files."""


class BadMagicError(VolumeFormatError):
    pass


class UnsupportedDatatypeError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


@dataclass(frozen=True)
class Volume:
    """Dense 3D grid with voxel spacing in mm.

    ``values`` is stored read-only; derive new volumes with :meth:`replace`.
    """

    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: str = INTENSITY
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        values = np.array(self.values, copy=True)
        if values.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {values.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == LABEL:
            if not np.issubdtype(values.dtype, np.integer):
                raise ValueError(f"label volume needs an integer dtype, got {values.dtype}")
            if values.size and values.min() < 0:
                raise ValueError("label volume contains negative values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def voxel_volume(self) -> float:
        """mm^3 per voxel."""
        return float(np.prod(self.spacing))

    def replace(self, **changes) -> "Volume":
        fields = {"values": self.values, "spacing": self.spacing, "kind": self.kind, "origin": self.origin}
        fields.update(changes)
        return Volume(**fields)


# ---------------------------------------------------------------------------
# NIfTI-1
# ---------------------------------------------------------------------------

NIFTI_HEADER_SIZE = 348
NIFTI_INTENT_LABEL = 1002

DATATYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
    512: np.dtype(np.uint16),
}
DATATYPE_CODES = {dt: code for code, dt in DATATYPES.items()}

# byte offsets of the fields this module reads or writes
_OFF_DIM = 40
_OFF_INTENT_CODE = 68
_OFF_DATATYPE = 70
_OFF_BITPIX = 72
_OFF_PIXDIM = 76
_OFF_VOX_OFFSET = 108
_OFF_SCL_SLOPE = 112
_OFF_SCL_INTER = 116
_OFF_XYZT_UNITS = 123
_OFF_QFORM_CODE = 252
_OFF_SFORM_CODE = 254
_OFF_QOFFSET = 268
_OFF_SROW = 280
_OFF_MAGIC = 344


def _open_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


@dataclass
class NiftiHeader:
    endian: str
    dims: tuple[int, ...]
    datatype: int
    pixdim: tuple[float, ...]
    vox_offset: int
    scl_slope: float
    scl_inter: float
    intent_code: int
    origin: tuple[float, float, float]
    magic: bytes = field(default=b"n+1\0")


def parse_nifti_header(blob: bytes) -> NiftiHeader:
    if len(blob) < NIFTI_HEADER_SIZE:
        raise TruncatedPayloadError(f"header needs {NIFTI_HEADER_SIZE} bytes, got {len(blob)}")
    for endian in "<>":
        if struct.unpack_from(endian + "i", blob, 0)[0] == NIFTI_HEADER_SIZE:
            break
    else:
        raise BadMagicError("sizeof_hdr is not 348 in either byte order")
    magic = blob[_OFF_MAGIC : _OFF_MAGIC + 4]
    if magic not in (b"n+1\0", b"ni1\0"):
        raise BadMagicError(f"bad NIfTI-1 magic {magic!r}")

    def get(fmt, off):
        return struct.unpack_from(endian + fmt, blob, off)

    dim = get("8h", _OFF_DIM)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise VolumeFormatError(f"dim[0] must be in [1, 7], got {ndim}")
    dims = tuple(int(d) for d in dim[1 : ndim + 1])
    if any(d < 1 for d in dims):
        raise VolumeFormatError(f"non-positive extent in dims {dims}")
    datatype = get("h", _OFF_DATATYPE)[0]
    if datatype not in DATATYPES:
        raise UnsupportedDatatypeError(f"NIfTI datatype code {datatype} is not supported")
    pixdim = get("8f", _OFF_PIXDIM)
    sform_code = get("h", _OFF_SFORM_CODE)[0]
    if sform_code > 0:
        srow = get("12f", _OFF_SROW)
        origin = (srow[3], srow[7], srow[11])
    else:
        origin = get("3f", _OFF_QOFFSET)
    vox_offset = get("f", _OFF_VOX_OFFSET)[0]
    if magic == b"ni1\0":
        vox_offset = 0
    elif vox_offset < NIFTI_HEADER_SIZE:
        vox_offset = NIFTI_HEADER_SIZE
    return NiftiHeader(
        endian=endian,
        dims=dims,
        datatype=datatype,
        pixdim=tuple(float(p) for p in pixdim),
        vox_offset=int(vox_offset),
        scl_slope=float(get("f", _OFF_SCL_SLOPE)[0]),
        scl_inter=float(get("f", _OFF_SCL_INTER)[0]),
        intent_code=int(get("h", _OFF_INTENT_CODE)[0]),
        origin=tuple(float(o) for o in origin),
        magic=magic,
    )


def _payload_source(path: Path, hdr: NiftiHeader) -> tuple[bytes | None, int]:
    """Separate payload bytes (``ni1`` pairs only) and the data offset."""
    if hdr.magic == b"ni1\0":
        name = str(path)
        for ext in (".hdr.gz", ".hdr"):
            if name.endswith(ext):
                img = Path(name[: -len(ext)] + ext.replace("hdr", "img"))
                return _open_bytes(img), 0
        raise VolumeFormatError(f"{path}: 'ni1' header without a matching .img file")
    return None, hdr.vox_offset


def decode_nifti(blob: bytes, kind: str | None = None, path: Path | None = None) -> Volume:
    """Decode an uncompressed NIfTI-1 byte string.

    ``kind`` defaults to ``label`` when the intent code is NIFTI_INTENT_LABEL
    and ``intensity`` otherwise.  Scaling by ``scl_slope``/``scl_inter`` is
    applied when the slope is nonzero and not the identity.  ``path`` is only
    needed to locate the ``.img`` half of a two-file pair.
    """
    hdr = parse_nifti_header(blob)
    separate, offset = _payload_source(path, hdr) if path is not None else (None, hdr.vox_offset)
    data_src = blob if separate is None else separate
    dims = hdr.dims + (1,) * (3 - len(hdr.dims))
    if any(d != 1 for d in dims[3:]):
        raise VolumeFormatError(f"only 3D volumes are supported, got dims {hdr.dims}")
    dims = dims[:3]
    dtype = DATATYPES[hdr.datatype].newbyteorder(hdr.endian)
    count = int(np.prod(dims))
    nbytes = count * dtype.itemsize
    if len(data_src) < offset + nbytes:
        raise TruncatedPayloadError(
            f"payload needs {nbytes} bytes at offset {offset}, only {max(0, len(data_src) - offset)} present"
        )
    flat = np.frombuffer(data_src, dtype=dtype, count=count, offset=offset)
    values = flat.reshape(dims, order="F").astype(dtype.newbyteorder("="))
    if hdr.scl_slope != 0 and math.isfinite(hdr.scl_slope) and (hdr.scl_slope, hdr.scl_inter) != (1.0, 0.0):
        out_dtype = np.float64 if values.dtype == np.float64 else np.float32
        values = values.astype(out_dtype) * out_dtype(hdr.scl_slope) + out_dtype(hdr.scl_inter)
    if kind is None:
        kind = LABEL if hdr.intent_code == NIFTI_INTENT_LABEL and np.issubdtype(values.dtype, np.integer) else INTENSITY
    spacing = tuple(abs(p) if p else 1.0 for p in hdr.pixdim[1:4])
    return Volume(values, spacing, kind, hdr.origin)


def read_nifti(path: str | Path, kind: str | None = None) -> Volume:
    """Read a 3D NIfTI-1 file (``.nii``, ``.nii.gz`` or ``.hdr``/``.img`` pair)."""
    path = Path(path)
    try:
        return decode_nifti(_open_bytes(path), kind, path)
    except TruncatedPayloadError as exc:
        raise TruncatedPayloadError(f"{path}: {exc}") from exc


def storable(values: np.ndarray) -> np.ndarray:
    """Narrow integer or boolean arrays to the smallest NIfTI-1 type that holds them."""
    if values.dtype in DATATYPE_CODES:
        return values
    if values.dtype == bool or np.issubdtype(values.dtype, np.integer):
        lo, hi = (int(values.min()), int(values.max())) if values.size else (0, 0)
        for dt in (np.uint8, np.uint16, np.int16, np.int32):
            info = np.iinfo(dt)
            if info.min <= lo and hi <= info.max:
                return values.astype(dt)
    raise UnsupportedDatatypeError(f"cannot store dtype {values.dtype} in NIfTI-1")


def nifti_header_bytes(vol: Volume, endian: str = "<") -> bytes:
    dtype = vol.values.dtype
    if dtype not in DATATYPE_CODES:
        raise UnsupportedDatatypeError(f"cannot store dtype {dtype} in NIfTI-1")
    hdr = bytearray(NIFTI_HEADER_SIZE)

    def put(fmt, off, *vals):
        struct.pack_into(endian + fmt, hdr, off, *vals)

    put("i", 0, NIFTI_HEADER_SIZE)
    put("8h", _OFF_DIM, 3, *vol.shape, 1, 1, 1, 1)
    put("h", _OFF_INTENT_CODE, NIFTI_INTENT_LABEL if vol.kind == LABEL else 0)
    put("h", _OFF_DATATYPE, DATATYPE_CODES[dtype])
    put("h", _OFF_BITPIX, dtype.itemsize * 8)
    put("8f", _OFF_PIXDIM, 1.0, *vol.spacing, 0.0, 0.0, 0.0, 0.0)
    put("f", _OFF_VOX_OFFSET, 352.0)
    put("f", _OFF_SCL_SLOPE, 0.0)
    put("f", _OFF_SCL_INTER, 0.0)
    hdr[_OFF_XYZT_UNITS] = 2  # mm
    put("h", _OFF_QFORM_CODE, 0)
    put("h", _OFF_SFORM_CODE, 1)
    sx, sy, sz = vol.spacing
    ox, oy, oz = vol.origin
    put("12f", _OFF_SROW, sx, 0, 0, ox, 0, sy, 0, oy, 0, 0, sz, oz)
    hdr[_OFF_MAGIC : _OFF_MAGIC + 4] = b"n+1\0"
    return bytes(hdr)


def encode_nifti(vol: Volume, endian: str = "<") -> bytes:
    """Single-file NIfTI-1 bytes: header, empty extension flag, payload at offset 352."""
    values = storable(vol.values)
    if values is not vol.values:
        vol = vol.replace(values=values)
    header = nifti_header_bytes(vol, endian)
    payload = np.asarray(values, dtype=values.dtype.newbyteorder(endian)).tobytes(order="F")
    return header + b"\0\0\0\0" + payload


def write_nifti(vol: Volume, path: str | Path, endian: str = "<") -> Path:
    """Write a single-file NIfTI-1; a ``.gz`` suffix gzips the output."""
    path = Path(path)
    blob = encode_nifti(vol, endian)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".gz":
        # mtime=0 keeps the gzip stream reproducible
        blob = gzip.compress(blob, mtime=0)
    path.write_bytes(blob)
    return path


# ---------------------------------------------------------------------------
# raw + sidecar
# ---------------------------------------------------------------------------

RAW_DTYPES = {INTENSITY: np.dtype("<f4"), LABEL: np.dtype("<u2")}


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".txt")


def write_raw(vol: Volume, path: str | Path) -> Path:
    """Headerless payload (row-major, little-endian float32 or uint16) plus a ``.txt`` sidecar."""
    path = Path(path)
    dtype = RAW_DTYPES[vol.kind]
    if vol.kind == LABEL and vol.values.size and vol.values.max() > np.iinfo(np.uint16).max:
        raise ValueError("label values exceed the uint16 range of the raw format")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(vol.values, dtype=dtype).tobytes())
    lines = [
        f"extents = {' '.join(str(e) for e in vol.shape)}",
        f"spacing = {' '.join(repr(s) for s in vol.spacing)}",
        f"origin = {' '.join(repr(o) for o in vol.origin)}",
        f"kind = {vol.kind}",
    ]
    _sidecar(path).write_text("\n".join(lines) + "\n")
    return path


def read_raw(path: str | Path) -> Volume:
    path = Path(path)
    meta = {}
    for line in _sidecar(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            key, _, value = line.partition("=")
            meta[key.strip()] = value.split()
    try:
        extents = tuple(int(v) for v in meta["extents"])
        spacing = tuple(float(v) for v in meta["spacing"])
        kind = meta["kind"][0]
    except KeyError as exc:
        raise VolumeFormatError(f"{_sidecar(path)}: missing key {exc.args[0]!r}") from exc
    origin = tuple(float(v) for v in meta.get("origin", ("0", "0", "0")))
    if kind not in RAW_DTYPES:
        raise VolumeFormatError(f"{_sidecar(path)}: unknown kind {kind!r}")
    dtype = RAW_DTYPES[kind]
    raw = path.read_bytes()
    need = int(np.prod(extents)) * dtype.itemsize
    if len(raw) < need:
        raise TruncatedPayloadError(f"{path}: payload needs {need} bytes, file has {len(raw)}")
    values = np.frombuffer(raw, dtype=dtype, count=int(np.prod(extents))).reshape(extents)
    return Volume(values.astype(dtype.newbyteorder("=")), spacing, kind, origin)


def read_volume(path: str | Path, kind: str | None = None) -> Volume:
    """Dispatch on suffix: ``.raw`` uses the sidecar format, everything else NIfTI."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such volume: {path}")
    if path.suffix == ".raw":
        vol = read_raw(path)
        return vol if kind is None or kind == vol.kind else vol.replace(kind=kind)
    return read_nifti(path, kind)


def write_volume(vol: Volume, path: str | Path) -> Path:
    return write_raw(vol, path) if Path(path).suffix == ".raw" else write_nifti(vol, path)


VOLUME_SUFFIXES = (".nii", ".nii.gz", ".raw")


def volume_id(path: Path) -> str:
    name = path.name
    for suffix in VOLUME_SUFFIXES:
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return path.stem


def list_volumes(directory: str | Path) -> dict[str, Path]:
    """Map of volume id to path for every readable volume file in ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    out = {}
    for p in sorted(directory.iterdir()):
        if p.is_file() and any(p.name.endswith(s) for s in VOLUME_SUFFIXES):
            out[volume_id(p)] = p
    return out


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

CT_WINDOW = (-175.0, 275.0)


def intensity_window(vol: Volume, lo: float = CT_WINDOW[0], hi: float = CT_WINDOW[1]) -> Volume:
    """Clamp ``(x - lo) / (hi - lo)`` to [0, 1]."""
    if not lo < hi:
        raise ValueError(f"window needs lo < hi, got ({lo}, {hi})")
    x = vol.values.astype(np.float32)
    out = np.clip((x - np.float32(lo)) / np.float32(hi - lo), 0.0, 1.0)
    return vol.replace(values=out, kind=INTENSITY)


def resampled_extents(shape, spacing, target) -> tuple[int, int, int]:
    # half-up rounding, not Python's round-half-even
    return tuple(max(1, int(math.floor(n * s / t + 0.5))) for n, s, t in zip(shape, spacing, target))


def resample(vol: Volume, target_spacing) -> Volume:
    """Resample onto ``target_spacing`` keeping the first voxel centre fixed.

    Output voxel ``i`` samples input coordinate ``i * target / spacing``;
    trilinear for intensities, nearest neighbour for labels, edge values
    beyond the last voxel.
    """
    target = tuple(float(t) for t in target_spacing)
    if len(target) != 3 or not all(t > 0 for t in target):
        raise ValueError(f"target spacing must be three positive numbers, got {target_spacing}")
    if target == vol.spacing:
        return vol
    extents = resampled_extents(vol.shape, vol.spacing, target)
    axes = [np.arange(n, dtype=np.float64) * (t / s) for n, s, t in zip(extents, vol.spacing, target)]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    if vol.kind == LABEL:
        # explicit rounding keeps nearest-neighbour independent of spline conventions
        idx = [np.clip(np.floor(c + 0.5).astype(np.intp), 0, n - 1) for c, n in zip(coords, vol.shape)]
        values = vol.values[tuple(idx)]
    else:
        src = vol.values.astype(np.float64)
        values = ndimage.map_coordinates(src, coords, order=1, mode="nearest")
        values = values.astype(vol.values.dtype if np.issubdtype(vol.values.dtype, np.floating) else np.float32)
    return vol.replace(values=values, spacing=target)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

ROTATION_PLANES = ((0, 1), (0, 2), (1, 2))


@dataclass(frozen=True)
class AugmentPlan:
    """Randomly drawn transform; every draw happens regardless of which ops fire."""

    flips: tuple[bool, bool, bool]
    rotate: bool
    plane: tuple[int, int]
    quarter_turns: int
    intensity: bool
    scale: float
    shift: float

    @property
    def is_identity(self) -> bool:
        return not (any(self.flips) or self.rotate or self.intensity)


def augment_plan(seed, p: float = 0.1) -> AugmentPlan:
    rng = np.random.default_rng(seed)
    flips = tuple(bool(f) for f in rng.random(3) < p)
    rotate = bool(rng.random() < p)
    plane = ROTATION_PLANES[int(rng.integers(3))]
    turns = int(rng.integers(1, 4))
    intensity = bool(rng.random() < p)
    scale = float(rng.uniform(0.9, 1.1))
    shift = float(rng.uniform(-0.1, 0.1))
    return AugmentPlan(flips, rotate, plane, turns, intensity, scale, shift)


def apply_spatial(arr: np.ndarray, plan: AugmentPlan) -> np.ndarray:
    """Apply the spatial part of ``plan`` to the trailing three axes."""
    lead = arr.ndim - 3
    for axis, flip in enumerate(plan.flips):
        if flip:
            arr = np.flip(arr, axis=lead + axis)
    if plan.rotate:
        a, b = plan.plane
        arr = np.rot90(arr, k=plan.quarter_turns, axes=(lead + a, lead + b))
    return np.ascontiguousarray(arr)


def augment(image: np.ndarray, label: np.ndarray, seed, p: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Random flips, a 90-degree rotation and an intensity scale/shift, each with probability ``p``.

    ``image`` is ``(H, W, D)`` or ``(C, H, W, D)``; ``label`` is ``(H, W, D)``.
    Both receive the same spatial transform; the label is never rescaled.
    """
    image = np.asarray(image)
    label = np.asarray(label)
    if image.shape[-3:] != label.shape or label.ndim != 3:
        raise ValueError(f"image extents {image.shape[-3:]} do not match label {label.shape}")
    plan = augment_plan(seed, p)
    image = apply_spatial(image, plan)
    label = apply_spatial(label, plan)
    if plan.intensity:
        image = image * image.dtype.type(plan.scale) + image.dtype.type(plan.shift)
    return image, label


# ---------------------------------------------------------------------------
# cropping and data streams
# ---------------------------------------------------------------------------


def pad_to(arr: np.ndarray, window, mode: str = "edge") -> np.ndarray:
    """Pad the trailing three axes symmetrically up to ``window``."""
    lead = arr.ndim - 3
    pads = [(0, 0)] * lead
    for n, w in zip(arr.shape[lead:], window):
        extra = max(0, w - n)
        pads.append((extra // 2, extra - extra // 2))
    if all(p == (0, 0) for p in pads):
        return arr
    return np.pad(arr, pads, mode=mode)


def random_crop(
    image: np.ndarray, label: np.ndarray, window, rng: np.random.Generator, foreground_prob: float = 0.5
) -> tuple[np.ndarray, np.ndarray]:
    """Crop ``window`` from ``(C, H, W, D)`` image and ``(H, W, D)`` label.

    With probability ``foreground_prob`` the crop is centred (then clamped) on
    a uniformly chosen foreground voxel; otherwise the start is uniform.
    """
    window = tuple(window)
    image = pad_to(image, window, "edge")
    label = pad_to(label, window, "constant")
    shape = label.shape
    want_fg = rng.random() < foreground_prob
    fg = np.flatnonzero(label) if want_fg else np.empty(0, np.intp)
    if fg.size:
        centre = np.unravel_index(fg[rng.integers(fg.size)], shape)
        start = [min(max(c - w // 2, 0), n - w) for c, w, n in zip(centre, window, shape)]
    else:
        start = [int(rng.integers(n - w + 1)) for n, w in zip(shape, window)]
    sl = tuple(slice(s, s + w) for s, w in zip(start, window))
    return image[(slice(None),) + sl], label[sl]


def synthetic_shapes(extent: int = 32, seed: int = 0, noise: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """One 3-class volume: background, a sphere (1) and a box (2).

    Returns ``image (1, n, n, n)`` float32 and ``label (n, n, n)`` int64.
    Class intensities are 0.1, 0.55 and 0.9 plus Gaussian noise.
    """
    rng = np.random.default_rng(seed)
    n = extent
    f = n / 32.0
    i, j, k = np.meshgrid(*(np.arange(n),) * 3, indexing="ij")
    label = np.zeros((n,) * 3, np.int64)
    r = 6 * f
    label[(i - 10 * f) ** 2 + (j - 11 * f) ** 2 + (k - 12 * f) ** 2 <= r * r] = 1
    lo, hi = (np.array([18, 16, 6]) * f).round().astype(int), (np.array([28, 26, 14]) * f).round().astype(int)
    label[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = 2
    image = np.choose(label, [0.1, 0.55, 0.9]).astype(np.float32)
    image += rng.normal(0.0, noise, label.shape).astype(np.float32)
    return image[None], label


def random_shapes(extent: int, classes: int, rng: np.random.Generator, noise: float = 0.05):
    """Randomly placed spheres and boxes, one per foreground class."""
    n = extent
    i, j, k = np.meshgrid(*(np.arange(n),) * 3, indexing="ij")
    label = np.zeros((n,) * 3, np.int64)
    for c in range(1, classes):
        r = rng.uniform(0.12, 0.25) * n
        centre = rng.uniform(r, n - r, size=3)
        if c % 2:
            mask = (i - centre[0]) ** 2 + (j - centre[1]) ** 2 + (k - centre[2]) ** 2 <= r * r
        else:
            mask = (abs(i - centre[0]) <= r) & (abs(j - centre[1]) <= r) & (abs(k - centre[2]) <= r)
        label[mask] = c
    levels = np.linspace(0.1, 0.9, classes)
    image = levels[label].astype(np.float32) + rng.normal(0.0, noise, label.shape).astype(np.float32)
    return image[None], label


def training_stream(
    pairs: list[tuple[np.ndarray, np.ndarray]],
    window,
    seed: int,
    foreground_prob: float = 0.5,
    augment_prob: float = 0.1,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Endless seed-deterministic stream of augmented random crops.

    ``pairs`` holds ``(image (C, H, W, D), label (H, W, D))``.  Each sample
    draws its volume, crop and augmentation seed from one generator.
    """
    if not pairs:
        raise ValueError("training stream needs at least one volume")
    rng = np.random.default_rng(seed)
    while True:
        image, label = pairs[int(rng.integers(len(pairs)))]
        image, label = random_crop(image, label, window, rng, foreground_prob)
        aug_seed = int(rng.integers(2**63))
        if augment_prob > 0:
            image, label = augment(image, label, aug_seed, augment_prob)
        yield np.ascontiguousarray(image, dtype=np.float32), np.ascontiguousarray(label, dtype=np.int64)
