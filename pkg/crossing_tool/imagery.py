"""Raster and camera imagery I/O.

Dataset records point at imagery with a relative reference:

* ``"maps/t0.png"`` a whole image file,
* ``"maps/t0.png#3/28"`` tile 3 of a vertical sprite sheet holding 28 equal tiles,
* ``"maps/t0.rawt#3"`` slice 3 along the first axis of a raw-tensor sidecar.

Everything is returned channel-first (``[C, H, W]``) in its stored dtype.
"""

import os
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

from .constants import RAW_TENSOR_MAGIC
from .storage import atomic_output

RAW_DTYPES = {"u8": np.dtype("u1"), "f8": np.dtype("<f8")}


class ImageryError(ValueError):
    """Raised when an imagery reference cannot be resolved or decoded."""


@dataclass(frozen=True)
class ImageRef:
    path: str
    index: int | None = None
    count: int | None = None

    @classmethod
    def parse(cls, ref: str) -> "ImageRef":
        path, sep, selector = ref.partition("#")
        if not path:
            raise ImageryError(f"Empty imagery path in reference '{ref}'")
        if not sep:
            return cls(path)
        index, slash, count = selector.partition("/")
        try:
            return cls(path, int(index), int(count) if slash else None)
        except ValueError:
            raise ImageryError(f"Bad imagery selector in reference '{ref}'") from None

    def __str__(self) -> str:
        if self.index is None:
            return self.path
        return f"{self.path}#{self.index}" + (f"/{self.count}" if self.count is not None else "")

    def rebased(self, source: Path, target: Path) -> "ImageRef":
        """The same image addressed from directory ``target`` instead of ``source``."""
        if Path(self.path).is_absolute():
            return self
        image = Path(source) / self.path
        try:
            moved = Path(os.path.relpath(image, Path(target))).as_posix()
        except ValueError:
            # no relative path across drives
            moved = image.resolve().as_posix()
        return replace(self, path=moved)


def write_raw_tensor(path: Path, array: np.ndarray, dtype: str = "u8") -> None:
    if dtype not in RAW_DTYPES:
        raise ImageryError(f"Unsupported raw tensor dtype '{dtype}'. Use one of: {', '.join(RAW_DTYPES)}")
    data = np.ascontiguousarray(array, dtype=RAW_DTYPES[dtype])
    header = " ".join([RAW_TENSOR_MAGIC, dtype, *map(str, data.shape)]) + "\n"
    with atomic_output(Path(path), "wb") as handle:
        handle.write(header.encode("ascii"))
        handle.write(data.tobytes())


def read_raw_tensor(path: Path) -> np.ndarray:
    payload = Path(path).read_bytes()
    newline = payload.find(b"\n")
    parts = payload[:newline].decode("ascii", errors="replace").split() if newline > 0 else []
    if len(parts) < 3 or parts[0] != RAW_TENSOR_MAGIC or parts[1] not in RAW_DTYPES:
        raise ImageryError(f"{path}: not a raw tensor file")
    dtype = RAW_DTYPES[parts[1]]
    try:
        shape = tuple(int(d) for d in parts[2:])
    except ValueError:
        raise ImageryError(f"{path}: bad raw tensor dimensions {parts[2:]}") from None
    body = payload[newline + 1 :]
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(body) != expected:
        raise ImageryError(f"{path}: raw tensor body has {len(body)} bytes, header implies {expected}")
    return np.frombuffer(body, dtype=dtype).reshape(shape)


def _channels_first(pixels: np.ndarray) -> np.ndarray:
    if pixels.ndim == 2:
        return pixels[None]
    return np.ascontiguousarray(pixels.transpose(2, 0, 1))


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        return _channels_first(np.asarray(img))


def write_sprite_sheet(path: Path, frames: list[np.ndarray]) -> None:
    """Stack ``[C, H, W]`` uint8 frames vertically into one PNG (C is 1 or 3)."""
    sheet = np.concatenate([np.asarray(f, dtype=np.uint8) for f in frames], axis=1)
    pixels = sheet[0] if sheet.shape[0] == 1 else sheet.transpose(1, 2, 0)
    with atomic_output(Path(path), "wb") as handle:
        Image.fromarray(np.ascontiguousarray(pixels)).save(handle, "PNG", optimize=False, compress_level=6)


@lru_cache(maxsize=128)
def _read_file(path: str) -> np.ndarray:
    try:
        if path.endswith(".rawt"):
            data = read_raw_tensor(Path(path))
        else:
            data = read_image(Path(path))
    except OSError as exc:
        raise ImageryError(f"Cannot read imagery {path}: {exc}") from exc
    data.setflags(write=False)
    return data


class ImageStore:
    """Resolves imagery references relative to a dataset directory."""

    def __init__(self, root: Path):
        self.root = Path(root)

    def load(self, ref: str) -> np.ndarray:
        parsed = ImageRef.parse(ref)
        data = _read_file(str(self.root / parsed.path))
        if parsed.index is None:
            return data
        if parsed.path.endswith(".rawt"):
            if not 0 <= parsed.index < data.shape[0]:
                raise ImageryError(f"{ref}: index out of range for {data.shape[0]} slices")
            return data[parsed.index]
        count = parsed.count or 1
        tile = data.shape[1] // count
        if tile * count != data.shape[1] or not 0 <= parsed.index < count:
            raise ImageryError(f"{ref}: sheet of height {data.shape[1]} does not hold tile {parsed.index}/{count}")
        return data[:, parsed.index * tile : (parsed.index + 1) * tile]


def resample(image: np.ndarray, size: tuple[int, int], *, nearest: bool = False) -> np.ndarray:
    """Resize every channel of ``[C, H, W]`` to ``size`` (height, width) as float64."""
    height, width = size
    if image.shape[1:] == (height, width):
        return np.asarray(image, dtype=np.float64)
    method = Image.Resampling.NEAREST if nearest else Image.Resampling.BILINEAR
    channels = [
        np.asarray(Image.fromarray(np.asarray(ch, dtype=np.float32)).resize((width, height), method))
        for ch in image
    ]
    return np.stack(channels).astype(np.float64)


def one_hot(classes: np.ndarray, count: int) -> np.ndarray:
    """``[1, H, W]`` (or ``[H, W]``) class ids to ``[count, H, W]`` indicator planes."""
    ids = np.asarray(classes).reshape(classes.shape[-2:]).astype(np.int64)
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= count:
        raise ImageryError(f"Class ids must lie in [0, {count}), got range [{ids.min()}, {ids.max()}]")
    return (ids[None] == np.arange(count)[:, None, None]).astype(np.float64)


def crop_square(image: np.ndarray, left: int, top: int, side: int) -> np.ndarray:
    """Square window of ``image`` [C, H, W]; parts beyond the border replicate edge pixels."""
    _, height, width = image.shape
    pad_top, pad_left = max(0, -top), max(0, -left)
    pad_bottom = max(0, top + side - height)
    pad_right = max(0, left + side - width)
    top_c, left_c = max(0, top), max(0, left)
    bottom_c, right_c = min(height, top + side), min(width, left + side)
    if bottom_c <= top_c or right_c <= left_c:
        raise ImageryError(f"Crop at ({left}, {top}) side {side} lies outside the {width}x{height} image")
    window = image[:, top_c:bottom_c, left_c:right_c]
    return np.pad(window, ((0, 0), (pad_top, pad_bottom), (pad_left, pad_right)), mode="edge")
