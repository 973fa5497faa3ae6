"""Image containers, HDR file IO, and the shared numeric primitives.

Images are HxWxC float32 arrays in linear radiance (HDR, unbounded). Depth
images are 1-channel with +inf marking rays that hit nothing. Masks are HxW
float32 in [0, 1]; binary masks contain only {0, 1}.

HDR images are stored as little-endian PFM (scale -1.0, bottom-up scanlines
per the format spec); masks as 8-bit grayscale PNG.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

# Radiance floor used before entering the log domain. Proxy renders and hard
# shadows contain true zeros which the log cannot represent.
LOG_FLOOR = 1e-4

# 5-tap binomial blur used for pyramid construction.
_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0], dtype=np.float64) / 16.0


class ImageError(ValueError):
    """Raised for malformed image data or files."""


@dataclass
class ImageBuffer:
    """HxWxC float32 image. C is 1 or 3 (2C for stacked gradient images)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 2, 3, 6):
            raise ImageError(f"expected HxWxC data with C in (1,2,3,6), got shape {arr.shape}")
        if np.isnan(arr).any():
            raise ImageError("image contains NaN pixels")
        if np.isneginf(arr).any():
            raise ImageError("image contains -inf pixels")
        self.data = np.ascontiguousarray(arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def copy(self) -> "ImageBuffer":
        return ImageBuffer(self.data.copy())


@dataclass
class MaskImage:
    """HxW float32 mask with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 2:
            raise ImageError(f"expected HxW mask, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ImageError("mask contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ImageError("mask values outside [0, 1]")
        self.data = np.ascontiguousarray(arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def is_binary(self) -> bool:
        return bool(np.isin(self.data, (0.0, 1.0)).all())

    def copy(self) -> "MaskImage":
        return MaskImage(self.data.copy())


def log_transform(img: ImageBuffer, floor: float = LOG_FLOOR) -> ImageBuffer:
    """ln(max(x, floor)) per pixel. exp_transform inverts it for x >= floor."""
    if floor <= 0.0:
        raise ImageError("log floor must be positive")
    bad = ~np.isfinite(img.data)
    if bad.any():
        y, x, c = np.argwhere(bad)[0]
        raise ImageError(
            f"log_transform input has {int(bad.sum())} non-finite pixels "
            f"(first at y={y} x={x} c={c})"
        )
    return ImageBuffer(np.log(np.maximum(img.data, np.float32(floor))))


def exp_transform(img: ImageBuffer) -> ImageBuffer:
    """Inverse of log_transform."""
    return ImageBuffer(np.exp(img.data))


def _blur_axis(arr: np.ndarray, axis: int) -> np.ndarray:
    """Separable binomial blur along one axis with edge-clamp padding."""
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (2, 2)
    padded = np.pad(arr, pad, mode="edge")
    out = np.zeros_like(arr, dtype=np.float64)
    for k, w in enumerate(_BINOMIAL5):
        sl = [slice(None)] * arr.ndim
        sl[axis] = slice(k, k + arr.shape[axis])
        out += w * padded[tuple(sl)]
    return out


def gaussian_pyramid(img: ImageBuffer, levels: int) -> list[ImageBuffer]:
    """Level 0 is the input; each next level is binomial-blurred then 2x decimated."""
    if levels < 1:
        raise ImageError("levels must be >= 1")
    need = 2 ** (levels - 1)
    if img.height < need or img.width < need:
        raise ImageError(
            f"image {img.height}x{img.width} too small for {levels} pyramid levels"
        )
    out = [img]
    cur = img.data.astype(np.float64)
    for _ in range(levels - 1):
        blurred = _blur_axis(_blur_axis(cur, 0), 1)
        cur = blurred[::2, ::2]
        out.append(ImageBuffer(cur.astype(np.float32)))
    return out


def spatial_gradient(img: ImageBuffer) -> ImageBuffer:
    """Forward differences, zero at the last row/column.

    Output has 2C channels: the first C are d/dx, the last C are d/dy.
    """
    if img.height < 2 or img.width < 2:
        raise ImageError("spatial_gradient needs at least a 2x2 image")
    a = img.data
    gx = np.zeros_like(a)
    gy = np.zeros_like(a)
    gx[:, :-1, :] = a[:, 1:, :] - a[:, :-1, :]
    gy[:-1, :, :] = a[1:, :, :] - a[:-1, :, :]
    return ImageBuffer(np.concatenate([gx, gy], axis=2))


def channelwise_median(img: ImageBuffer, mask: MaskImage) -> np.ndarray:
    """Per-channel median over mask==1 pixels. Even counts use the midpoint."""
    if (img.height, img.width) != (mask.height, mask.width):
        raise ImageError("image/mask shape mismatch")
    sel = mask.data > 0.5
    if not sel.any():
        raise ImageError("median over an empty mask")
    return np.median(img.data[sel], axis=0).astype(np.float32)


# ---------------------------------------------------------------------------
# PFM (HDR float) and PNG (mask) file IO


def write_pfm(path, img: ImageBuffer) -> None:
    """Little-endian PFM, scale -1.0, rows bottom-to-top."""
    if not np.isfinite(img.data).all():
        raise ImageError("write_pfm requires finite pixels; use write_pfm_depth")
    _write_pfm_raw(path, img.data)


def write_pfm_depth(path, img: ImageBuffer) -> None:
    """Depth variant: +inf no-hit sentinels are stored as +inf float32."""
    if img.channels != 1:
        raise ImageError("depth images are 1-channel")
    _write_pfm_raw(path, img.data)


def _write_pfm_raw(path, data: np.ndarray) -> None:
    channels = data.shape[2]
    header = b"PF\n" if channels == 3 else b"Pf\n"
    with open(path, "wb") as f:
        f.write(header)
        f.write(f"{data.shape[1]} {data.shape[0]}\n".encode("ascii"))
        f.write(b"-1.0\n")
        flipped = np.ascontiguousarray(data[::-1], dtype="<f4")
        f.write(flipped.tobytes())


def read_pfm(path) -> ImageBuffer:
    """Reads PF/Pf files; raises ImageError on malformed headers or short payloads."""
    with open(path, "rb") as f:
        magic = _read_token(f, path)
        if magic == b"PF":
            channels = 3
        elif magic == b"Pf":
            channels = 1
        else:
            raise ImageError(f"{path}: bad PFM magic {magic!r}")
        try:
            width = int(_read_token(f, path))
            height = int(_read_token(f, path))
            scale = float(_read_token(f, path))
        except ValueError as e:
            raise ImageError(f"{path}: bad PFM header: {e}") from e
        if width <= 0 or height <= 0:
            raise ImageError(f"{path}: bad PFM dimensions {width}x{height}")
        count = width * height * channels
        payload = f.read(4 * count)
        if len(payload) != 4 * count:
            raise ImageError(f"{path}: truncated PFM payload")
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(payload, dtype=dtype).reshape(height, width, channels)
        arr = np.ascontiguousarray(data[::-1]).astype(np.float32)
        if np.isnan(arr).any():
            raise ImageError(f"{path}: PFM payload contains NaN")
        return ImageBuffer(arr)


def _read_token(f, path) -> bytes:
    # Tokens are separated by single whitespace bytes per the PFM spec.
    tok = b""
    while True:
        c = f.read(1)
        if not c:
            raise ImageError(f"{path}: unexpected end of PFM header")
        if c in b" \t\r\n":
            if tok:
                return tok
            continue
        tok += c


def write_png_mask(path, mask: MaskImage) -> None:
    """8-bit grayscale PNG; 0 -> 0, 1 -> 255."""
    arr = np.round(mask.data * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def read_png_mask(path) -> MaskImage:
    with Image.open(path) as im:
        if im.mode != "L":
            im = im.convert("L")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return MaskImage(arr)
