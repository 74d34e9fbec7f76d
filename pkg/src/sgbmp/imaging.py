"""Image and float-map I/O plus the resampling used between prior and matching resolutions.

Images are plain ``uint8`` arrays of shape ``(height, width)``.  Float maps are
``float32`` arrays of the same layout in which ``INVALID`` (+inf) marks pixels
without data.
"""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

INVALID = np.float32(np.inf)


class ImageIOError(OSError):
    """Raised when an image or map file cannot be read or written."""

    def __init__(self, path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)
        self.reason = reason


def is_valid(fmap: np.ndarray) -> np.ndarray:
    return np.isfinite(fmap)


def as_float_map(values) -> np.ndarray:
    """Copy ``values`` into a float32 map; every non-finite entry becomes ``INVALID``."""
    out = np.array(values, dtype=np.float32, copy=True)
    if out.ndim != 2:
        raise ValueError(f"float map must be 2-D, got shape {out.shape}")
    out[~np.isfinite(out)] = INVALID
    return out


# --------------------------------------------------------------------------
# header tokenizer shared by PGM and PFM


class _Header:
    def __init__(self, raw: bytes, path, comments: bool):
        self.raw = raw
        self.pos = 0
        self.path = path
        self.comments = comments

    def token(self) -> bytes:
        raw, n = self.raw, len(self.raw)
        while self.pos < n:
            c = raw[self.pos : self.pos + 1]
            if c.isspace():
                self.pos += 1
            elif self.comments and c == b"#":
                while self.pos < n and raw[self.pos : self.pos + 1] not in (b"\n", b"\r"):
                    self.pos += 1
            else:
                break
        start = self.pos
        while self.pos < n and not raw[self.pos : self.pos + 1].isspace():
            self.pos += 1
        if start == self.pos:
            raise ImageIOError(self.path, "unexpected end of file")
        return raw[start : self.pos]

    def body(self) -> bytes:
        # exactly one whitespace byte separates the header from the raster
        if self.pos >= len(self.raw):
            raise ImageIOError(self.path, "unexpected end of file")
        return self.raw[self.pos + 1 :]


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise ImageIOError(path, f"unreadable file ({exc.strerror or exc})") from exc


def _positive_int(tok: bytes, path, what: str) -> int:
    try:
        v = int(tok)
    except ValueError:
        raise ImageIOError(path, f"malformed {what} {tok!r}") from None
    if v < 1:
        raise ImageIOError(path, f"non-positive {what} {v}")
    return v


# --------------------------------------------------------------------------
# grayscale images


def _load_pgm(raw: bytes, path) -> np.ndarray:
    hdr = _Header(raw, path, comments=True)
    hdr.token()
    width = _positive_int(hdr.token(), path, "width")
    height = _positive_int(hdr.token(), path, "height")
    maxval = _positive_int(hdr.token(), path, "maxval")
    if maxval > 255:
        raise ImageIOError(path, f"unsupported bit depth (maxval {maxval}, only 8-bit is supported)")
    data = hdr.body()
    if len(data) < width * height:
        raise ImageIOError(path, "unexpected end of file")
    return np.frombuffer(data, dtype=np.uint8, count=width * height).reshape(height, width).copy()


def rgb_to_gray(rgb: np.ndarray) -> np.ndarray:
    """Rec.601 luma of an ``(h, w, 3)`` uint8 array, rounded to uint8."""
    rgb = rgb.astype(np.float64)
    y = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.clip(np.rint(y), 0, 255).astype(np.uint8)


def load_gray(path) -> np.ndarray:
    """Load an 8-bit PGM (P5) or PNG file as a grayscale intensity image.

    Color inputs are converted with Rec.601 luma. Files with more than 8 bits
    per sample are rejected rather than silently rescaled.
    """
    raw = _read_bytes(path)
    if raw[:2] == b"P5":
        return _load_pgm(raw, path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I", "F"):
                raise ImageIOError(path, f"unsupported bit depth (mode {mode})")
            if mode == "P":
                im = im.convert("RGBA" if "transparency" in im.info else "RGB")
                mode = im.mode
            arr = np.asarray(im)
    except ImageIOError:
        raise
    except (OSError, SyntaxError, ValueError) as exc:
        msg = str(exc)
        if "truncated" in msg or "end of file" in msg.lower():
            msg = "unexpected end of file"
        raise ImageIOError(path, msg) from exc
    if mode in ("L", "1"):
        return arr.astype(np.uint8)
    if mode == "LA":
        return arr[..., 0].astype(np.uint8)
    if mode in ("RGB", "RGBA"):
        return rgb_to_gray(arr[..., :3])
    raise ImageIOError(path, f"unsupported image mode {mode}")


def save_pgm(img: np.ndarray, path) -> None:
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def save_png(img: np.ndarray, path) -> None:
    """Write a gray ``(h, w)`` or RGB ``(h, w, 3)`` uint8 array as PNG."""
    Image.fromarray(np.ascontiguousarray(img, dtype=np.uint8)).save(path, format="PNG")


# --------------------------------------------------------------------------
# PFM


def load_pfm(path) -> np.ndarray:
    """Read a single-channel PFM into a float map.

    Non-finite entries (Middlebury stores unknown disparity as +inf) become
    ``INVALID``; NaNs are counted and reported through the logger.
    """
    raw = _read_bytes(path)
    hdr = _Header(raw, path, comments=False)
    magic = hdr.token()
    if magic == b"PF":
        raise ImageIOError(path, "unsupported PFM: 3-channel 'PF' maps are not supported")
    if magic != b"Pf":
        raise ImageIOError(path, f"not a PFM file (magic {magic[:8]!r})")
    width = _positive_int(hdr.token(), path, "width")
    height = _positive_int(hdr.token(), path, "height")
    try:
        scale = float(hdr.token())
    except ValueError:
        raise ImageIOError(path, "malformed scale") from None
    if scale == 0.0:
        raise ImageIOError(path, "malformed scale 0")
    dtype = "<f4" if scale < 0 else ">f4"
    data = hdr.body()
    if len(data) < 4 * width * height:
        raise ImageIOError(path, "unexpected end of file")
    arr = np.frombuffer(data, dtype=dtype, count=width * height).reshape(height, width)
    out = np.flipud(arr).astype(np.float32)
    nan = np.isnan(out)
    n_nan = int(nan.sum())
    if n_nan:
        log.warning("%s: %d NaN entries mapped to the invalid marker", path, n_nan)
    out[~np.isfinite(out)] = INVALID
    return out


def save_pfm(fmap: np.ndarray, path) -> None:
    """Write a float map as little-endian PFM; invalid pixels are stored as +inf."""
    fmap = np.asarray(fmap)
    if fmap.ndim != 2:
        raise ValueError("save_pfm expects a 2-D map")
    h, w = fmap.shape
    data = np.flipud(fmap).astype("<f4")
    data[~np.isfinite(data)] = np.inf
    try:
        with open(path, "wb") as f:
            f.write(b"Pf\n%d %d\n-1.0\n" % (w, h))
            f.write(data.tobytes())
    except OSError as exc:
        raise ImageIOError(path, f"cannot write ({exc.strerror or exc})") from exc


# --------------------------------------------------------------------------
# resolution changes


def downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean downsampling; edge rows/columns are replicated up to a multiple of ``factor``."""
    if factor < 1:
        raise ValueError(f"downsample factor must be >= 1, got {factor}")
    img = np.asarray(img, dtype=np.uint8)
    if factor == 1:
        return img.copy()
    h, w = img.shape
    oh, ow = -(-h // factor), -(-w // factor)
    padded = np.pad(img, ((0, oh * factor - h), (0, ow * factor - w)), mode="edge")
    sums = padded.reshape(oh, factor, ow, factor).sum(axis=(1, 3), dtype=np.int64)
    n = factor * factor
    return ((sums + n // 2) // n).astype(np.uint8)


def _lerp(a, b, t):
    # clipped so the result never leaves [min(a, b), max(a, b)] under rounding
    v = a + t * (b - a)
    return np.clip(v, np.minimum(a, b), np.maximum(a, b))


def upsample_float(fmap: np.ndarray, factor: int, value_scale: float = 1.0, method: str = "bilinear") -> np.ndarray:
    """Scale the values of ``fmap`` and enlarge it ``factor`` times in both directions.

    Bilinear sampling uses pixel-center alignment. Invalid source pixels are
    left out of the interpolation: an invalid partner of a lerp is replaced by
    the valid one, so a target pixel is invalid only when all four source
    neighbors are.
    """
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    src = np.asarray(fmap, dtype=np.float64)
    valid = np.isfinite(src)
    vals = np.where(valid, src * value_scale, np.nan)
    h, w = src.shape
    if method == "nearest":
        out = np.repeat(np.repeat(vals, factor, axis=0), factor, axis=1)
    elif method == "bilinear":
        def axis(n):
            c = (np.arange(n * factor) + 0.5) / factor - 0.5
            c = np.clip(c, 0.0, n - 1)
            i0 = np.floor(c).astype(np.intp)
            i1 = np.minimum(i0 + 1, n - 1)
            return i0, i1, c - i0

        y0, y1, ty = axis(h)
        x0, x1, tx = axis(w)
        tx = tx[None, :]
        ty = ty[:, None]

        def row(yi):
            a = vals[yi][:, x0]
            b = vals[yi][:, x1]
            a_ok, b_ok = ~np.isnan(a), ~np.isnan(b)
            a = np.where(a_ok, a, b)
            b = np.where(b_ok, b, a)
            with np.errstate(invalid="ignore"):
                return _lerp(a, b, tx)

        top, bot = row(y0), row(y1)
        top_ok, bot_ok = ~np.isnan(top), ~np.isnan(bot)
        top = np.where(top_ok, top, bot)
        bot = np.where(bot_ok, bot, top)
        with np.errstate(invalid="ignore"):
            out = _lerp(top, bot, ty)
    else:
        raise ValueError(f"unknown interpolation method {method!r}")
    res = out.astype(np.float32)
    res[~np.isfinite(out)] = INVALID
    return res
