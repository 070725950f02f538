"""Full-frame compression: non-overlapping patch tiling, per-patch encoding
into 4F Heaviside bits, a little-endian packed bitstream, decoding through
the patch decoder, and the PSNR / MS-SSIM quality metrics."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .datasets import to_unit_float
from .models import Net, Purenet
from .tensor import Tensor

MAGIC = b"NQEB"
VERSION = 1
_HEADER = struct.Struct("<4sBIIHHHH")


@dataclass(frozen=True)
class PatchGrid:
    rows: int
    cols: int
    patches: np.ndarray  # (rows*cols, 3, p, p), row-major

    @property
    def patch(self) -> int:
        return self.patches.shape[-1]


def extract_patches(image: np.ndarray, patch: int = 32) -> PatchGrid:
    """Tile (3, H, W) into non-overlapping patches; dimensions must divide."""
    c, h, w = image.shape
    if c != 3:
        raise ValueError(f"expected a (3, H, W) image, got {image.shape}")
    if h % patch or w % patch:
        raise ValueError(f"{h}x{w} not divisible into {patch}x{patch} patches")
    rows, cols = h // patch, w // patch
    tiles = (
        image.reshape(c, rows, patch, cols, patch)
        .transpose(1, 3, 0, 2, 4)
        .reshape(rows * cols, c, patch, patch)
    )
    return PatchGrid(rows, cols, tiles.copy())


def assemble_patches(grid: PatchGrid) -> np.ndarray:
    p = grid.patch
    c = grid.patches.shape[1]
    return (
        grid.patches.reshape(grid.rows, grid.cols, c, p, p)
        .transpose(2, 0, 3, 1, 4)
        .reshape(c, grid.rows * p, grid.cols * p)
    )


@dataclass(frozen=True)
class Bitstream:
    height: int
    width: int
    patch: int
    rows: int
    cols: int
    code_units: int
    payload: bytes

    def __post_init__(self):
        if self.rows * self.patch != self.height or self.cols * self.patch != self.width:
            raise ValueError("grid does not tile the declared frame size")
        if len(self.payload) != (self.bit_count + 7) // 8:
            raise ValueError(
                f"payload holds {len(self.payload)} bytes, "
                f"expected {(self.bit_count + 7) // 8} for {self.bit_count} bits"
            )

    @property
    def bit_count(self) -> int:
        return self.rows * self.cols * self.code_units

    @property
    def bits_per_pixel(self) -> float:
        return self.code_units / (self.patch * self.patch)

    def codes(self) -> np.ndarray:
        """(rows*cols, code_units) array of 0/1, row-major patch order."""
        bits = np.unpackbits(
            np.frombuffer(self.payload, dtype=np.uint8),
            count=self.bit_count,
            bitorder="little",
        )
        return bits.reshape(self.rows * self.cols, self.code_units)

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(
            MAGIC, VERSION, self.height, self.width,
            self.patch, self.rows, self.cols, self.code_units,
        )
        return head + self.payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Bitstream":
        if len(blob) < _HEADER.size:
            raise ValueError("truncated header")
        magic, version, height, width, patch, rows, cols, units = _HEADER.unpack(
            blob[: _HEADER.size]
        )
        if magic != MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        if version != VERSION:
            raise ValueError(f"unsupported version {version}")
        payload = blob[_HEADER.size :]
        expect = (rows * cols * units + 7) // 8
        if len(payload) != expect:
            raise ValueError(f"payload is {len(payload)} bytes, expected {expect}")
        return cls(height, width, patch, rows, cols, units, payload)


def _pack_codes(bits: np.ndarray, grid: PatchGrid, code_units: int) -> Bitstream:
    payload = np.packbits(
        bits.astype(np.uint8).ravel(), bitorder="little"
    ).tobytes()
    p = grid.patch
    return Bitstream(grid.rows * p, grid.cols * p, p, grid.rows, grid.cols,
                     code_units, payload)


def encode_image(image: np.ndarray, encoder, patch: int = 32) -> Bitstream:
    """Per-patch encoding of a uint8 (3, H, W) frame.

    ``encoder`` is either the real-path model (evaluation mode) or a lowered
    integer model; both yield the same bits.
    """
    if image.dtype != np.uint8:
        raise ValueError("encode_image expects a uint8 image")
    grid = extract_patches(image, patch)
    if isinstance(encoder, Net):
        units = encoder.config.code_units
        if encoder.config.input_hw != patch:
            raise ValueError(
                f"encoder eats {encoder.config.input_hw}x{encoder.config.input_hw}"
                f" patches, asked to encode {patch}x{patch}"
            )
        bits = encoder.encode(Tensor(to_unit_float(grid.patches)), mode="infer").data
    else:
        units = encoder.code_units
        if encoder.input_hw != patch:
            raise ValueError(
                f"encoder eats {encoder.input_hw}x{encoder.input_hw}"
                f" patches, asked to encode {patch}x{patch}"
            )
        bits = encoder.encode(grid.patches)
    if bits.shape != (grid.rows * grid.cols, units):
        raise ValueError(f"encoder emitted {bits.shape}, expected code length {units}")
    return _pack_codes(bits, grid, units)


def decode_image(bs: Bitstream, decoder: Purenet, clamp: bool = True) -> np.ndarray:
    """Reconstruct a float (3, H, W) frame in [0, 1] from a bitstream."""
    if decoder.code_units != bs.code_units:
        raise ValueError(
            f"decoder expects {decoder.code_units}-bit codes, stream has {bs.code_units}"
        )
    if decoder.cfg.patch != bs.patch:
        raise ValueError(
            f"decoder renders {decoder.cfg.patch}-pixel patches, stream has {bs.patch}"
        )
    codes = Tensor(bs.codes().astype(np.float64))
    out = decoder.forward(codes, bs.rows, bs.cols, mode="infer").data[0]
    return np.clip(out, 0.0, 1.0) if clamp else out


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; inf when equal."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


_MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_WINDOW_SIZE = 11
_WINDOW_SIGMA = 1.5
_K1, _K2 = 0.01, 0.03


def _gaussian_window() -> np.ndarray:
    x = np.arange(_WINDOW_SIZE, dtype=np.float64) - (_WINDOW_SIZE - 1) / 2.0
    g = np.exp(-0.5 * (x / _WINDOW_SIGMA) ** 2)
    return g / g.sum()


_WINDOW = _gaussian_window()


def _filter_valid(img: np.ndarray) -> np.ndarray:
    """Separable 11-tap Gaussian, valid region only. img: (H, W)."""
    from numpy.lib.stride_tricks import sliding_window_view

    rows = sliding_window_view(img, _WINDOW_SIZE, axis=0)
    a = rows @ _WINDOW
    cols = sliding_window_view(a, _WINDOW_SIZE, axis=1)
    return cols @ _WINDOW


def _ssim_and_cs(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    c1, c2 = _K1 * _K1, _K2 * _K2
    mx, my = _filter_valid(x), _filter_valid(y)
    sxx = _filter_valid(x * x) - mx * mx
    syy = _filter_valid(y * y) - my * my
    sxy = _filter_valid(x * y) - mx * my
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def _halve(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    if h % 2 or w % 2:  # extend bottom/right so a 2x2 mean tiles exactly
        img = np.pad(img, ((0, h % 2), (0, w % 2)), mode="symmetric")
        h, w = img.shape
    return img.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def ms_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Five-scale multi-scale SSIM on [0, 1] images, channel-averaged.

    Needs both dimensions >= 176 so the coarsest scale still fits the
    11-pixel window.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    scales = len(_MSSSIM_WEIGHTS)
    need = _WINDOW_SIZE * 2 ** (scales - 1)
    if min(a.shape[1:]) < need:
        raise ValueError(f"images must be at least {need}x{need} for {scales} scales")
    values = []
    for ch in range(a.shape[0]):
        x, y = a[ch], b[ch]
        factors = []
        for level in range(scales):
            ssim_val, cs_val = _ssim_and_cs(x, y)
            if level < scales - 1:
                factors.append(max(cs_val, 0.0))
                x, y = _halve(x), _halve(y)
            else:
                factors.append(max(ssim_val, 0.0))
        values.append(np.prod([f**w for f, w in zip(factors, _MSSSIM_WEIGHTS)]))
    return float(np.mean(values))
