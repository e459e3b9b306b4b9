"""Image stack containers, raw/PGM file I/O and resampling primitives.

Arrays are stored in C order with axes ``(z, y, x)`` so that the on-disk
payload order (x fastest, then y, then z) maps directly onto memory.
``dims`` and ``spacing`` are reported in ``(x, y, z)`` order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

PathLike = Union[str, Path]

#: Default voxel size (nm) for PGM slice directories: HR lateral pixel, 0.3 um z-step.
DEFAULT_PGM_SPACING = (100.0, 100.0, 300.0)

_DTYPES = {
    "u8": (np.dtype("<u1"), (0.0, 255.0)),
    "u16": (np.dtype("<u2"), (0.0, 65535.0)),
    "f32": (np.dtype("<f4"), None),
}


class StackFormatError(ValueError):
    """Raised for malformed headers, payloads or slice directories."""


@dataclass(frozen=True)
class StackHeader:
    width: int
    height: int
    depth: int
    dtype: str
    voxel_size_nm: Tuple[float, float, float]

    def __post_init__(self):
        if self.dtype not in _DTYPES:
            raise StackFormatError(f"unsupported dtype tag {self.dtype!r}")
        if min(self.width, self.height, self.depth) < 1:
            raise StackFormatError("header dimensions must be >= 1")

    @property
    def payload_bytes(self) -> int:
        return self.width * self.height * self.depth * _DTYPES[self.dtype][0].itemsize

    def to_json(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "depth": self.depth,
            "dtype": self.dtype,
            "voxel_size_nm": list(self.voxel_size_nm),
        }

    @classmethod
    def from_json(cls, d: dict) -> "StackHeader":
        try:
            return cls(
                width=int(d["width"]),
                height=int(d["height"]),
                depth=int(d["depth"]),
                dtype=str(d["dtype"]),
                voxel_size_nm=tuple(float(v) for v in d["voxel_size_nm"]),
            )
        except KeyError as exc:
            raise StackFormatError(f"header missing field {exc}") from None


@dataclass(frozen=True, eq=False)
class ImageStack:
    """A 3D scalar volume with anisotropic voxel spacing.

    Parameters
    ----------
    voxels : np.ndarray
        Array of shape ``(nz, ny, nx)``; converted to float32.
    spacing : tuple of float
        Voxel size ``(sx, sy, sz)`` in nanometres.
    intensity_range : tuple of float, optional
        Declared data range ``(lo, hi)``. Defaults to the observed range.
    """

    voxels: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    intensity_range: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim == 2:
            v = v[np.newaxis]
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"voxels must be a non-empty 3D array, got shape {v.shape}")
        v = np.ascontiguousarray(v, dtype=np.float32)
        if not np.all(np.isfinite(v)):
            raise ValueError("voxels contain non-finite values")
        sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 3 or min(sp) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        lo_obs, hi_obs = float(v.min()), float(v.max())
        rng = self.intensity_range
        if rng is None:
            rng = (lo_obs, hi_obs)
        rng = (float(rng[0]), float(rng[1]))
        if not (rng[0] <= lo_obs and hi_obs <= rng[1]):
            raise ValueError(f"intensity range {rng} does not contain data [{lo_obs}, {hi_obs}]")
        v.setflags(write=False)
        object.__setattr__(self, "voxels", v)
        object.__setattr__(self, "spacing", sp)
        object.__setattr__(self, "intensity_range", rng)

    @property
    def dims(self) -> Tuple[int, int, int]:
        nz, ny, nx = self.voxels.shape
        return nx, ny, nz

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.voxels.shape

    @property
    def data_range(self) -> float:
        return self.intensity_range[1] - self.intensity_range[0]

    def replace(self, voxels=None, spacing=None, intensity_range=None) -> "ImageStack":
        return ImageStack(
            self.voxels if voxels is None else voxels,
            self.spacing if spacing is None else spacing,
            self.intensity_range if intensity_range is None else intensity_range,
        )


@dataclass(frozen=True, eq=False)
class BinaryVolume:
    """Boolean volume ``(nz, ny, nx)`` with the spacing of its source stack."""

    bits: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        b = np.asarray(self.bits, dtype=bool)
        if b.ndim == 2:
            b = b[np.newaxis]
        if b.ndim != 3:
            raise ValueError("bits must be 3D")
        object.__setattr__(self, "bits", b)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> Tuple[int, int, int]:
        nz, ny, nx = self.bits.shape
        return nx, ny, nz


# ----------------------------------------------------------------------------
# I/O
# ----------------------------------------------------------------------------

def _split_pair(path: Path) -> Tuple[Path, Path]:
    stem = path.with_suffix("") if path.suffix in (".json", ".raw") else path
    return stem.with_suffix(".json"), stem.with_suffix(".raw")


def _read_pgm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    tokens = []
    pos = 0
    # magic, width, height, maxval; '#' comments allowed between tokens
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise StackFormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P5":
        raise StackFormatError(f"{path}: not a binary PGM (P5)")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dt.itemsize
    payload = data[pos : pos + need]
    if len(payload) != need:
        raise StackFormatError(f"{path}: payload has {len(payload)} bytes, expected {need}")
    return np.frombuffer(payload, dtype=dt).reshape(h, w)


def write_pgm(path: PathLike, image: np.ndarray) -> None:
    """Write a 2D uint8/uint16 array as a binary PGM (big-endian for 16 bit)."""
    image = np.asarray(image)
    if image.dtype == np.uint8:
        maxval, payload = 255, image.tobytes()
    else:
        maxval, payload = 65535, image.astype(">u2").tobytes()
    h, w = image.shape
    Path(path).write_bytes(b"P5\n%d %d\n%d\n" % (w, h, maxval) + payload)


def load_stack(path: PathLike, spacing: Optional[Tuple[float, float, float]] = None) -> ImageStack:
    """Load a stack from a ``.json``/``.raw`` pair or a directory of PGM slices.

    Values are converted to float32 without rescaling. The declared
    intensity range follows the storage type: ``u8`` -> [0, 255],
    ``u16`` -> [0, 65535], ``f32`` -> observed [min, max].

    Parameters
    ----------
    path : str or Path
        Header/payload path (either suffix or the common stem), or a
        directory whose ``*.pgm`` files are read in lexicographic order.
    spacing : tuple of float, optional
        Voxel size for PGM directories, which carry no spacing. Defaults to
        ``DEFAULT_PGM_SPACING``. Ignored for raw stacks.
    """
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".pgm")
        if not files:
            raise FileNotFoundError(f"no .pgm slices in {path}")
        slices = [_read_pgm(f) for f in files]
        shapes = {s.shape for s in slices}
        if len(shapes) != 1:
            raise StackFormatError(f"slices in {path} differ in size: {sorted(shapes)}")
        rng = (0.0, 65535.0) if slices[0].dtype.itemsize == 2 else (0.0, 255.0)
        vox = np.stack(slices).astype(np.float32)
        return ImageStack(vox, spacing or DEFAULT_PGM_SPACING, rng)

    header_path, raw_path = _split_pair(path)
    if not header_path.exists():
        raise FileNotFoundError(header_path)
    if not raw_path.exists():
        raise FileNotFoundError(raw_path)
    header = StackHeader.from_json(json.loads(header_path.read_text()))
    payload = raw_path.read_bytes()
    if len(payload) != header.payload_bytes:
        raise StackFormatError(
            f"payload {raw_path} has {len(payload)} bytes, header implies {header.payload_bytes}"
        )
    dt, rng = _DTYPES[header.dtype]
    arr = np.frombuffer(payload, dtype=dt).reshape(header.depth, header.height, header.width)
    vox = arr.astype(np.float32)
    if header.dtype == "f32":
        if not np.all(np.isfinite(vox)):
            raise StackFormatError(f"{raw_path}: non-finite values in f32 payload")
        rng = (float(vox.min()), float(vox.max()))
    return ImageStack(vox, header.voxel_size_nm, rng)


def quantize(values: np.ndarray, dtype: str) -> np.ndarray:
    """Clamp to the integer type's range and round half-up."""
    dt, (lo, hi) = _DTYPES[dtype]
    v = np.clip(np.asarray(values, dtype=np.float64), lo, hi)
    return np.floor(v + 0.5).astype(dt)


def save_stack(stack: ImageStack, path: PathLike, dtype: str = "f32") -> Path:
    """Write ``stack`` as a JSON header plus little-endian raw payload.

    Returns the header path.
    """
    if dtype not in _DTYPES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
    header_path, raw_path = _split_pair(Path(path))
    nx, ny, nz = stack.dims
    header = StackHeader(nx, ny, nz, dtype, stack.spacing)
    if dtype == "f32":
        payload = stack.voxels.astype("<f4").tobytes()
    else:
        payload = quantize(stack.voxels, dtype).tobytes()
    header_path.parent.mkdir(parents=True, exist_ok=True)
    raw_path.write_bytes(payload)
    header_path.write_text(json.dumps(header.to_json(), indent=2) + "\n")
    return header_path


# ----------------------------------------------------------------------------
# Resampling
# ----------------------------------------------------------------------------

def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def resample_z(stack: ImageStack, factor: float) -> ImageStack:
    """Linearly resample along z by ``factor``.

    Sample positions are endpoint-anchored: output slice ``k`` sits at
    input coordinate ``k * (nz - 1) / (nz' - 1)`` with
    ``nz' = round(nz * factor)``. The reported z spacing becomes
    ``sz / factor``. X-Y data are untouched.
    """
    if not factor > 0:
        raise ValueError("factor must be > 0")
    if factor == 1:
        return stack
    nz = stack.voxels.shape[0]
    if nz < 2:
        raise ValueError("z resampling needs at least two slices")
    nz_out = round_half_up(nz * factor)
    if nz_out < 2:
        raise ValueError(f"factor {factor} leaves fewer than two slices")
    pos = np.arange(nz_out, dtype=np.float64) * ((nz - 1) / (nz_out - 1))
    i0 = np.clip(np.floor(pos).astype(np.int64), 0, nz - 2)
    w = (pos - i0).astype(np.float32)[:, None, None]
    v = stack.voxels
    out = v[i0] * (np.float32(1) - w) + v[i0 + 1] * w
    # keep the exact endpoint values
    out[0] = v[0]
    out[-1] = v[-1]
    sx, sy, sz = stack.spacing
    return ImageStack(out, (sx, sy, sz / factor), stack.intensity_range)


def upsample_nn(image: np.ndarray, target_shape: Tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour block replication of a 2D image to ``target_shape``.

    ``target_shape`` is ``(rows, cols)`` and must be an integer multiple of
    the source shape along each axis.
    """
    image = np.asarray(image)
    ry, rem_y = divmod(target_shape[0], image.shape[0])
    rx, rem_x = divmod(target_shape[1], image.shape[1])
    if rem_y or rem_x or ry < 1 or rx < 1:
        raise ValueError(f"target {target_shape} is not an integer multiple of {image.shape}")
    return np.repeat(np.repeat(image, ry, axis=0), rx, axis=1)
