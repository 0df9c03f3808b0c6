"""Toy patch encoder, grid region proposer, cropping and the IMG0 raster format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .numerics import Linear, Module, Tensor, concat, sinusoidal_positions
from .numerics.tensor import add, mul, reshape, sum_axis

IMG_MAGIC = b"IMG0"


@dataclass
class ImageGrid:
    """``pixels`` is ``[H, W, C]`` float64 with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3:
            raise ShapeError(f"image must be [H, W, C], got {self.pixels.shape}")
        if np.any(self.pixels < 0.0) or np.any(self.pixels > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return self.pixels.shape[2]


@dataclass
class PatchSequence:
    """Encoder output ``[1 + P, d_V]``: global token first, then patches."""

    tokens: Tensor

    @property
    def global_token(self):
        return self.tokens.data[0]

    @property
    def patches(self):
        return self.tokens.data[1:]

    @property
    def d_v(self):
        return self.tokens.shape[-1]

    def __len__(self):
        return self.tokens.shape[0]


@dataclass
class Region:
    box: tuple  # (row0, col0, row1, col1), half-open
    confidence: float
    padded: bool = field(default=False, compare=False)


def patchify(pixels, patch):
    """``[B, H, W, C]`` -> ``[B, P, patch*patch*C]`` in reading order."""
    B, H, W, C = pixels.shape
    if H % patch or W % patch:
        raise ConfigError(f"image {H}x{W} is not divisible by patch size {patch}")
    t = pixels.reshape(B, H // patch, patch, W // patch, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return t.reshape(B, (H // patch) * (W // patch), patch * patch * C)


class VisionEncoder(Module):
    """Linear patch embedding plus fixed sinusoidal position codes.

    The global token is a learnable map of the mean patch embedding.
    """

    def __init__(self, image_size=32, patch=8, channels=3, d_model=64, group="vision"):
        if image_size % patch:
            raise ConfigError(f"image size {image_size} is not divisible by patch {patch}")
        self.image_size = image_size
        self.patch = patch
        self.channels = channels
        self.d_model = d_model
        self.n_patches = (image_size // patch) ** 2
        self.embed = Linear(patch * patch * channels, d_model, group)
        self.to_global = Linear(d_model, d_model, group)
        self._pos = sinusoidal_positions(self.n_patches, d_model)

    def __call__(self, pixels):
        """``pixels`` ``[B, H, W, C]`` array -> ``Tensor[B, 1 + P, d_V]``."""
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim == 3:
            pixels = pixels[None]
        if pixels.shape[1:] != (self.image_size, self.image_size, self.channels):
            raise ShapeError(f"encoder expects {self.image_size}x{self.image_size}x"
                             f"{self.channels} images, got {pixels.shape[1:]}")
        flat = Tensor(patchify(pixels, self.patch))
        emb = add(self.embed(flat), Tensor(self._pos))
        B, P, d = emb.shape
        mean = mul(sum_axis(emb, 1), 1.0 / P)
        glob = reshape(self.to_global(mean), (B, 1, d))
        return concat([glob, emb], axis=1)

    def encode_image(self, image):
        return PatchSequence(reshape(self(image.pixels[None]), (1 + self.n_patches, self.d_model)))


class RegionProposer(Protocol):
    def __call__(self, image: ImageGrid, k: int = 5) -> list: ...


class GridRegionProposer:
    """Deterministic stand-in for a segmenter.

    Candidates are the four quadrants in reading order plus the centre crop.
    Confidence is the mean per-pixel energy above ``threshold`` rescaled to
    [0, 1]; a stable sort keeps candidate order on ties.
    """

    def __init__(self, threshold=0.1):
        self.threshold = threshold

    def candidates(self, height, width):
        h2, w2 = height // 2, width // 2
        h4, w4 = height // 4, width // 4
        return [(0, 0, h2, w2), (0, w2, h2, width), (h2, 0, height, w2),
                (h2, w2, height, width), (h4, w4, h4 + h2, w4 + w2)]

    def confidence(self, pixels, box):
        r0, c0, r1, c1 = box
        energy = pixels[r0:r1, c0:c1].mean(axis=2)
        lit = np.clip(energy - self.threshold, 0.0, None) / (1.0 - self.threshold)
        return float(np.clip(lit.mean(), 0.0, 1.0))

    def __call__(self, image, k=5):
        boxes = self.candidates(image.height, image.width)
        scored = [Region(b, self.confidence(image.pixels, b)) for b in boxes]
        scored.sort(key=lambda r: -r.confidence)
        return scored[:k]


def propose_regions(image, k=5, proposer=None):
    return (proposer or GridRegionProposer())(image, k)


def pad_regions(regions, k=5):
    """Repeat the top region until there are ``k``; padded copies are flagged."""
    if not regions:
        raise ValueError("cannot pad an empty region list")
    out = list(regions[:k])
    while len(out) < k:
        top = regions[0]
        out.append(Region(top.box, top.confidence, padded=True))
    return out


def crop_region(image, region, out_hw=None):
    """Crop ``region`` and resample nearest-neighbour to ``out_hw`` (default: input size)."""
    r0, c0, r1, c1 = region.box
    H, W = image.height, image.width
    if not (0 <= r0 < r1 <= H and 0 <= c0 < c1 <= W):
        raise IndexError(f"region {region.box} outside image bounds {H}x{W}")
    oh, ow = out_hw or (H, W)
    rows = r0 + (np.arange(oh) * (r1 - r0)) // oh
    cols = c0 + (np.arange(ow) * (c1 - c0)) // ow
    return ImageGrid(image.pixels[rows][:, cols])


# ------------------------------------------------------------------ IMG0 io

def image_to_bytes(image):
    H, W, C = image.pixels.shape
    return IMG_MAGIC + struct.pack("<III", H, W, C) + image.pixels.astype("<f4").tobytes()


def image_from_bytes(buf):
    if buf[:4] != IMG_MAGIC:
        raise FormatError("not an IMG0 raster (bad magic)")
    if len(buf) < 16:
        raise FormatError("IMG0 header truncated")
    H, W, C = struct.unpack("<III", buf[4:16])
    n = H * W * C
    if len(buf) != 16 + 4 * n:
        raise FormatError(f"IMG0 payload holds {len(buf) - 16} bytes, expected {4 * n}")
    px = np.frombuffer(buf, dtype="<f4", count=n, offset=16).astype(np.float64)
    return ImageGrid(np.clip(px.reshape(H, W, C), 0.0, 1.0))


def save_image(image, path):
    with open(path, "wb") as fh:
        fh.write(image_to_bytes(image))


def load_image(path):
    with open(path, "rb") as fh:
        return image_from_bytes(fh.read())
