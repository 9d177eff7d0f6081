"""Dense pyramidal Lucas-Kanade optical flow and the pooling front-end.

Flow solves the per-pixel 2x2 normal equations of the brightness-constancy
linearization over a square window, refined coarse-to-fine across a box
pyramid.  Pixels whose windowed structure tensor is near-singular (smallest
eigenvalue below a threshold) keep zero flow and are marked low-confidence.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ShapeError

DEFAULT_WINDOW = 15
DEFAULT_LEVELS = 3
# smallest eigenvalue of the window-summed structure tensor; intensities in [0,1]
DEFAULT_TAU = 1e-4
REFINE_ITERS = 3


@dataclass
class Image:
    """Grayscale image, row-major float64 intensities in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ShapeError(f"image must be 2-D, got shape {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("image contains non-finite values")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class FlowField:
    """Per-pixel (u, v) displacement grids; valid marks confident pixels."""

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ShapeError("u and v must be matching 2-D grids")
        if self.valid is None:
            self.valid = np.ones(self.u.shape, dtype=np.bool_)
        else:
            self.valid = np.asarray(self.valid, dtype=np.bool_)
            if self.valid.shape != self.u.shape:
                raise ShapeError("valid mask must match flow dimensions")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise ValueError("flow contains non-finite values")

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    def as_stack(self) -> np.ndarray:
        """(H, W, 2) array with u in channel 0 and v in channel 1."""
        return np.stack([self.u, self.v], axis=-1)


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    img = img[: h - h % 2, : w - w % 2]
    return 0.25 * (img[0::2, 0::2] + img[0::2, 1::2] + img[1::2, 0::2] + img[1::2, 1::2])


def _upsample_flow(f: np.ndarray, shape) -> np.ndarray:
    up = 2.0 * np.repeat(np.repeat(f, 2, axis=0), 2, axis=1)
    out = np.zeros(shape, dtype=np.float64)
    h = min(shape[0], up.shape[0])
    w = min(shape[1], up.shape[1])
    out[:h, :w] = up[:h, :w]
    if h < shape[0]:
        out[h:, :w] = out[h - 1, :w]
    if w < shape[1]:
        out[:, w:] = out[:, w - 1 : w]
    return out


def lucas_kanade(
    prev: Image,
    nxt: Image,
    window: int = DEFAULT_WINDOW,
    levels: int = DEFAULT_LEVELS,
    tau: float = DEFAULT_TAU,
) -> FlowField:
    """Dense flow from prev to nxt over a coarse-to-fine pyramid."""
    if prev.pixels.shape != nxt.pixels.shape:
        raise ShapeError(
            f"image sizes differ: {prev.pixels.shape} vs {nxt.pixels.shape}"
        )
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    pyr_prev = [np.ascontiguousarray(prev.pixels)]
    pyr_next = [np.ascontiguousarray(nxt.pixels)]
    for _ in range(levels - 1):
        pyr_prev.append(_downsample2(pyr_prev[-1]))
        pyr_next.append(_downsample2(pyr_next[-1]))
    if min(pyr_prev[-1].shape) < window:
        raise ValueError(
            f"coarsest level {pyr_prev[-1].shape} smaller than window {window}"
        )
    u = np.zeros(pyr_prev[-1].shape)
    v = np.zeros(pyr_prev[-1].shape)
    valid = np.ones(pyr_prev[-1].shape, dtype=np.bool_)
    for lvl in range(levels - 1, -1, -1):
        if lvl < levels - 1:
            u = _upsample_flow(u, pyr_prev[lvl].shape)
            v = _upsample_flow(v, pyr_prev[lvl].shape)
        u, v, valid = kernels.lk_refine_level(
            pyr_prev[lvl], pyr_next[lvl], u, v, window, tau, REFINE_ITERS
        )
    u = np.where(valid, u, 0.0)
    v = np.where(valid, v, 0.0)
    return FlowField(u, v, valid)


def mean_pool(f: FlowField, k: int) -> FlowField:
    """Non-overlapping k x k block means per channel (stride k)."""
    h, w = f.height, f.width
    if k < 1 or h % k != 0 or w % k != 0:
        raise ShapeError(f"pool size {k} must divide dimensions {h}x{w}")
    def pool(g):
        return g.reshape(h // k, k, w // k, k).mean(axis=(1, 3))
    # a block counts as confident when all its pixels are
    valid = f.valid.reshape(h // k, k, w // k, k).all(axis=(1, 3))
    return FlowField(pool(f.u), pool(f.v), valid)


# --- file formats -------------------------------------------------------------

FLOW_MAGIC = b"PFLW"


def save_flow(path, f: FlowField) -> None:
    """Binary flow file: magic, u32 width, u32 height, f32 u grid, f32 v grid."""
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<II", f.width, f.height))
        fh.write(f.u.astype("<f4").tobytes())
        fh.write(f.v.astype("<f4").tobytes())


def load_flow(path) -> FlowField:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FLOW_MAGIC:
            raise ValueError(f"not a flow file (magic {magic!r})")
        w, h = struct.unpack("<II", fh.read(8))
        n = w * h
        u = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(h, w)
        v = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(h, w)
    return FlowField(u.astype(np.float64), v.astype(np.float64))


def save_pgm(path, img: Image) -> None:
    """8-bit binary PGM (P5)."""
    data = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.width} {img.height}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def load_pgm(path) -> Image:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise ValueError("not a binary PGM (P5) file")
    # header: magic, width, height, maxval, single whitespace, then raster
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1
    w, h, maxval = fields
    raster = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return Image(raster.reshape(h, w).astype(np.float64) / float(maxval))
