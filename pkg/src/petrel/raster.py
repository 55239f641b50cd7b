"""Raster and point-label I/O, MS-to-PAN band alignment, patch cropping."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_BANDS = ("pan", "blue", "green", "red", "nir1")


class RasterFormatError(ValueError):
    pass


@dataclass
class Raster:
    """Band-planar image; ``pixels`` has shape (bands, height, width), float32 in [0, 1]."""

    pixels: np.ndarray
    bands: list[str] = field(default_factory=lambda: list(DEFAULT_BANDS))

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[None]
        if self.pixels.ndim != 3:
            raise RasterFormatError(f"pixels must be (bands, h, w), got {self.pixels.shape}")
        self.bands = list(self.bands)
        if len(self.bands) != self.pixels.shape[0]:
            raise RasterFormatError(f"{len(self.bands)} band names for {self.pixels.shape[0]} planes")
        if len(set(self.bands)) != len(self.bands):
            raise RasterFormatError(f"duplicate band names {self.bands}")
        if not np.all(np.isfinite(self.pixels)):
            raise RasterFormatError("non-finite pixel values")
        if self.pixels.size and (self.pixels.min() < 0 or self.pixels.max() > 1):
            raise RasterFormatError("pixel values outside [0, 1]")

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    def band(self, name: str) -> np.ndarray:
        return self.pixels[self.bands.index(name)]


@dataclass
class PointLabelSet:
    observer_id: str
    points: np.ndarray  # (n, 2) float64 columns x, y

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.points)

    def validate(self, width: int, height: int) -> None:
        x, y = self.points[:, 0], self.points[:, 1]
        if np.any((x < 0) | (x >= width) | (y < 0) | (y >= height)):
            raise ValueError(f"{self.observer_id}: label outside {width}x{height} raster")
        if len(np.unique(self.points, axis=0)) != len(self.points):
            raise ValueError(f"{self.observer_id}: duplicate points")


# -------------------------------------------------------------------- files

def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    name = path.name
    for suffix in (".hdr.json", ".bin"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    return path.with_name(name + ".hdr.json"), path.with_name(name + ".bin")


def save_raster(raster: Raster, path) -> None:
    """Write ``{name}.hdr.json`` + ``{name}.bin``; ``path`` may name either or the stem."""
    hdr, payload = _paths(path)
    header = {"width": raster.width, "height": raster.height, "bands": raster.bands, "dtype": "f32le"}
    hdr.write_text(json.dumps(header) + "\n")
    payload.write_bytes(np.ascontiguousarray(raster.pixels, dtype="<f4").tobytes())


def load_raster(path) -> Raster:
    hdr, payload = _paths(path)
    try:
        header = json.loads(hdr.read_text())
        width, height = int(header["width"]), int(header["height"])
        bands = list(header["bands"])
        dtype = header.get("dtype", "f32le")
    except (KeyError, TypeError, ValueError) as exc:
        raise RasterFormatError(f"malformed header {hdr}: {exc}") from exc
    if dtype != "f32le":
        raise RasterFormatError(f"unsupported dtype {dtype!r}")
    if width < 1 or height < 1 or not bands or not all(isinstance(b, str) for b in bands):
        raise RasterFormatError(f"malformed header {hdr}")
    data = np.frombuffer(payload.read_bytes(), dtype="<f4")
    expected = width * height * len(bands)
    if data.size * 4 != payload.stat().st_size or data.size != expected:
        raise RasterFormatError(f"payload has {data.size} values, header declares {expected}")
    return Raster(data.reshape(len(bands), height, width).astype(np.float32), bands)


def save_labels(labels: PointLabelSet, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["observer_id", "x", "y"])
        for x, y in labels.points:
            writer.writerow([labels.observer_id, repr(float(x)), repr(float(y))])


def load_labels(path) -> PointLabelSet:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"observer_id", "x", "y"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected header observer_id,x,y")
        rows = list(reader)
    observer = rows[0]["observer_id"] if rows else Path(path).stem
    if len({r["observer_id"] for r in rows}) > 1:
        raise ValueError(f"{path}: more than one observer_id")
    return PointLabelSet(observer, [(float(r["x"]), float(r["y"])) for r in rows])


# --------------------------------------------------------------- resampling

def _bilinear_axis(n_in: int, scale: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = (np.arange(n_in * scale) + 0.5) / scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def bilinear_upsample(plane: np.ndarray, scale: int) -> np.ndarray:
    """Integer-factor bilinear upsampling of a 2-D array, half-pixel sampling."""
    plane = np.asarray(plane, dtype=np.float64)
    r0, r1, rw = _bilinear_axis(plane.shape[0], scale)
    c0, c1, cw = _bilinear_axis(plane.shape[1], scale)
    rows = plane[r0] * (1 - rw)[:, None] + plane[r1] * rw[:, None]
    return rows[:, c0] * (1 - cw) + rows[:, c1] * cw


def upsample_ms_to_pan(ms: Raster, pan: Raster) -> Raster:
    """Stack PAN with every MS band resampled onto the PAN grid."""
    if len(pan.bands) != 1:
        raise ValueError(f"pan raster must have 1 band, has {len(pan.bands)}")
    sy, ry = divmod(pan.height, ms.height)
    sx, rx = divmod(pan.width, ms.width)
    if ry or rx or sx != sy or sx < 1:
        raise ValueError(
            f"PAN {pan.width}x{pan.height} is not an integer multiple of MS {ms.width}x{ms.height}"
        )
    planes = [pan.pixels[0]] + [bilinear_upsample(p, sx) for p in ms.pixels]
    return Raster(np.stack(planes).astype(np.float32), list(pan.bands) + list(ms.bands))


# ------------------------------------------------------------------ patches

def crop_patch(raster: Raster, origin: tuple[int, int], size: int) -> np.ndarray:
    """Channel-first (bands, size, size) crop with top-left at ``origin`` = (x, y)."""
    x0, y0 = int(origin[0]), int(origin[1])
    if x0 < 0 or y0 < 0 or x0 + size > raster.width or y0 + size > raster.height:
        raise ValueError(f"crop at {origin} size {size} outside {raster.width}x{raster.height}")
    return raster.pixels[:, y0:y0 + size, x0:x0 + size].copy()


def reflect_pad(raster: Raster, pad: int | tuple[int, int, int, int]) -> Raster:
    """Mirror-pad by ``pad`` pixels, or (left, top, right, bottom)."""
    left, top, right, bottom = (pad,) * 4 if isinstance(pad, int) else pad
    padded = np.pad(raster.pixels, ((0, 0), (top, bottom), (left, right)), mode="reflect")
    return Raster(padded, raster.bands)


def rasterize_labels(labels: PointLabelSet, patch_origin: tuple[int, int], out_size: int,
                     margin: int) -> np.ndarray:
    """Binary (out_size, out_size) target: a 3x3 square per point in the output window.

    ``patch_origin`` is the input window's top-left in raster coordinates;
    the output window starts ``margin`` pixels further in.
    """
    target = np.zeros((out_size, out_size), dtype=np.uint8)
    if len(labels) == 0:
        return target
    cols = np.rint(labels.points[:, 0]).astype(int) - (int(patch_origin[0]) + margin)
    rows = np.rint(labels.points[:, 1]).astype(int) - (int(patch_origin[1]) + margin)
    inside = (cols >= 0) & (cols < out_size) & (rows >= 0) & (rows < out_size)
    for r, c in zip(rows[inside], cols[inside]):
        target[max(r - 1, 0):r + 2, max(c - 1, 0):c + 2] = 1
    return target
