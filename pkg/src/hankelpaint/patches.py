"""Patch extraction, tiling, masks, and PNG I/O.

Images are (H, W, 3) float64 arrays in [0, 1]; masks are (H, W) uint8 arrays
with 1 = observed and 0 = missing, shared across the three channels.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

PATCH_SIZE = 64


def child_rng(master_seed: int, *key: int) -> np.random.Generator:
    """Independent per-worker stream derived from the master seed and indices."""
    return np.random.default_rng(np.random.SeedSequence([master_seed, *key]))


def load_image(path) -> np.ndarray:
    """Read an 8-bit RGB PNG into a float64 array in [0, 1] (v / 255)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image(image: np.ndarray, path) -> None:
    """Write a [0, 1] image as 8-bit RGB PNG: round(v * 255), clamped."""
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    """Read a single-channel mask PNG: 255 = observed, 0 = missing."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr >= 128).astype(np.uint8)


def save_mask(mask: np.ndarray, path) -> None:
    Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(path, format="PNG")


def list_training_images(directory, count: int | None = None) -> list[Path]:
    """PNG files in lexicographic order; the first `count` form the corpus."""
    files = sorted(Path(directory).glob("*.png"))
    if count is not None:
        files = files[:count]
    return files


def random_crop(image: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random size x size crop."""
    h, w = image.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than crop size {size}")
    top = int(rng.integers(h - size + 1))
    left = int(rng.integers(w - size + 1))
    return image[top:top + size, left:left + size].copy()


@dataclass(frozen=True)
class TileGrid:
    orig_h: int
    orig_w: int
    pad_top: int
    pad_left: int
    padded_h: int
    padded_w: int
    patch: int

    @property
    def grid_rows(self) -> int:
        return self.padded_h // self.patch

    @property
    def grid_cols(self) -> int:
        return self.padded_w // self.patch

    @property
    def n_patches(self) -> int:
        return self.grid_rows * self.grid_cols


def _pad_amount(size: int, patch: int) -> int:
    # 256 gets the canonical 32-per-side margin (-> 320); other sizes pad up
    # to the next multiple of the patch size (0 when already aligned).
    if size == 4 * patch:
        return patch
    return (-size) % patch


def make_grid(height: int, width: int, patch: int = PATCH_SIZE) -> TileGrid:
    pad_h = _pad_amount(height, patch)
    pad_w = _pad_amount(width, patch)
    return TileGrid(
        orig_h=height, orig_w=width,
        pad_top=pad_h // 2, pad_left=pad_w // 2,
        padded_h=height + pad_h, padded_w=width + pad_w,
        patch=patch)


def pad_and_tile(image: np.ndarray, patch: int = PATCH_SIZE):
    """Replicate-pad the image and cut it into non-overlapping patches.

    A 256x256 input is padded by 32 pixels per side to 320x320 and yields a
    5x5 grid of 25 patches; other sizes pad to the next multiple of the patch
    size with centered margins.  Returns (grid, patches) with patches in
    row-major order.
    """
    h, w = image.shape[:2]
    grid = make_grid(h, w, patch)
    pad_bottom = grid.padded_h - h - grid.pad_top
    pad_right = grid.padded_w - w - grid.pad_left
    padded = np.pad(
        image,
        ((grid.pad_top, pad_bottom), (grid.pad_left, pad_right), (0, 0)),
        mode="edge")
    tiles = []
    for r in range(grid.grid_rows):
        for c in range(grid.grid_cols):
            tiles.append(padded[r * patch:(r + 1) * patch,
                                c * patch:(c + 1) * patch].copy())
    return grid, tiles


def tile_mask(grid: TileGrid, mask: np.ndarray) -> list[np.ndarray]:
    """Tile a (H, W) mask on the same grid; padded border pixels count as
    observed (they replicate real observations)."""
    if mask.shape != (grid.orig_h, grid.orig_w):
        raise ValueError("mask shape does not match grid")
    pad_bottom = grid.padded_h - grid.orig_h - grid.pad_top
    pad_right = grid.padded_w - grid.orig_w - grid.pad_left
    padded = np.pad(
        mask, ((grid.pad_top, pad_bottom), (grid.pad_left, pad_right)),
        mode="edge")
    p = grid.patch
    return [padded[r * p:(r + 1) * p, c * p:(c + 1) * p].copy()
            for r in range(grid.grid_rows) for c in range(grid.grid_cols)]


def untile(grid: TileGrid, patches) -> np.ndarray:
    """Concatenate row-major patches and crop the padding margins."""
    if len(patches) != grid.n_patches:
        raise ValueError(f"expected {grid.n_patches} patches, got {len(patches)}")
    p = grid.patch
    out = np.zeros((grid.padded_h, grid.padded_w, 3))
    k = 0
    for r in range(grid.grid_rows):
        for c in range(grid.grid_cols):
            if patches[k].shape != (p, p, 3):
                raise ValueError(f"patch {k} has shape {patches[k].shape}")
            out[r * p:(r + 1) * p, c * p:(c + 1) * p] = patches[k]
            k += 1
    return out[grid.pad_top:grid.pad_top + grid.orig_h,
               grid.pad_left:grid.pad_left + grid.orig_w]


def random_mask(shape, missing_ratio: float, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. Bernoulli mask with P(missing) = missing_ratio per pixel."""
    if not 0.0 <= missing_ratio < 1.0:
        raise ValueError(f"missing ratio must be in [0, 1), got {missing_ratio}")
    return (rng.random(shape) >= missing_ratio).astype(np.uint8)


def block_mask(shape, coverage: float = 0.5) -> np.ndarray:
    """Centered axis-aligned rectangle covering `coverage` of the area."""
    if not 0.0 <= coverage < 1.0:
        raise ValueError(f"block coverage must be in [0, 1), got {coverage}")
    h, w = shape
    side = np.sqrt(coverage)
    bh = int(round(h * side))
    bw = int(round(w * side))
    mask = np.ones(shape, dtype=np.uint8)
    top = (h - bh) // 2
    left = (w - bw) // 2
    mask[top:top + bh, left:left + bw] = 0
    return mask


def text_mask(shape, overlay_path) -> np.ndarray:
    """Dark pixels (luminance < 0.5) of a glyph overlay become missing."""
    with Image.open(overlay_path) as im:
        overlay = np.asarray(
            im.convert("L").resize((shape[1], shape[0]), Image.NEAREST),
            dtype=np.float64) / 255.0
    return (overlay >= 0.5).astype(np.uint8)


def make_mask(kind: str, shape, rng: np.random.Generator | None = None,
              ratio: float = 0.5, overlay=None) -> np.ndarray:
    if kind == "random":
        if rng is None:
            raise ValueError("random mask requires an rng")
        return random_mask(shape, ratio, rng)
    if kind == "block":
        return block_mask(shape, ratio)
    if kind == "text":
        if overlay is None:
            raise ValueError("text mask requires an overlay path")
        return text_mask(shape, overlay)
    raise ValueError(f"unknown mask kind {kind!r}")


def apply_mask(image: np.ndarray, mask: np.ndarray, noise_level: float = 0.0,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Degradation y = D x + e: missing pixels zeroed on all channels,
    observed pixels optionally perturbed by Gaussian noise."""
    if image.shape[:2] != mask.shape:
        raise ValueError(f"mask {mask.shape} does not match image {image.shape}")
    if noise_level < 0:
        raise ValueError("noise level must be >= 0")
    out = image * mask[:, :, None]
    if noise_level > 0:
        if rng is None:
            raise ValueError("noisy observation requires an rng")
        out = out + noise_level * rng.standard_normal(image.shape) * mask[:, :, None]
    return out
