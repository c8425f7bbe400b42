"""Structural block-Hankel lifting of RGB patches and its exact pseudo-inverse.

A patch of shape (H, W, 3) is lifted by sliding a w x w x 3 window over all
valid top-left positions (row-major).  Each window is vectorized channel-major,
then row-major inside the window, giving one row of an L x K matrix with
L = (H-w+1)(W-w+1) and K = 3*w*w.  Because every pixel lands in many matrix
entries, averaging the entries mapped to one pixel inverts the lifting exactly.

Fold/unfold reshape the large Hankel matrix into a smaller multi-channel
tensor (and back, losslessly) so it can feed a convolutional score model.
All arithmetic in this module is float64.
"""

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHANNELS = 3


@dataclass(frozen=True)
class HankelLayout:
    """Geometry of the lifting: patch size and sliding-window size."""

    patch_h: int
    patch_w: int
    window: int

    def __post_init__(self):
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if self.window > min(self.patch_h, self.patch_w):
            raise ValueError(
                f"window {self.window} exceeds patch {self.patch_h}x{self.patch_w}")

    @property
    def rows(self) -> int:
        return (self.patch_h - self.window + 1) * (self.patch_w - self.window + 1)

    @property
    def cols(self) -> int:
        return CHANNELS * self.window * self.window


@dataclass
class HankelMatrix:
    layout: HankelLayout
    data: np.ndarray  # (rows, cols) float64

    def __post_init__(self):
        expected = (self.layout.rows, self.layout.cols)
        if self.data.shape != expected:
            raise ValueError(f"matrix shape {self.data.shape} != layout {expected}")


@dataclass(frozen=True)
class FoldSpec:
    """Shape bookkeeping for the matrix <-> tensor reshape, incl. zero padding."""

    layout: HankelLayout
    fold_h: int
    fold_w: int
    fold_c: int
    pad_tail: int

    def __post_init__(self):
        total = self.fold_h * self.fold_w * self.fold_c
        n = self.layout.rows * self.layout.cols
        if total != n + self.pad_tail:
            raise ValueError("fold shape inconsistent with layout entry count")
        if not 0 <= self.pad_tail < self.fold_h * self.fold_w:
            raise ValueError(f"pad_tail {self.pad_tail} out of range")


@dataclass
class FoldedTensor:
    spec: FoldSpec
    data: np.ndarray  # (fold_h, fold_w, fold_c) float64

    def __post_init__(self):
        expected = (self.spec.fold_h, self.spec.fold_w, self.spec.fold_c)
        if self.data.shape != expected:
            raise ValueError(f"tensor shape {self.data.shape} != spec {expected}")


@lru_cache(maxsize=16)
def _pixel_index(layout: HankelLayout):
    """Flat (H*W*3) pixel index for every matrix entry, plus adjoint helpers.

    Returns (pix, first_idx, counts): pix[l, k] is the flat index of the source
    pixel of entry (l, k); first_idx[p] is the flat matrix position of the first
    copy of pixel p; counts[p] is the copy multiplicity.
    """
    H, W, w = layout.patch_h, layout.patch_w, layout.window
    gh, gw = H - w + 1, W - w + 1
    i = np.arange(gh)
    j = np.arange(gw)
    c = np.arange(CHANNELS)
    dr = np.arange(w)
    dc = np.arange(w)
    rows_pix = (i[:, None, None, None, None] + dr[None, None, None, :, None])
    cols_pix = (j[None, :, None, None, None] + dc[None, None, None, None, :])
    chan = c[None, None, :, None, None]
    pix = (rows_pix * W + cols_pix) * CHANNELS + chan
    pix = np.broadcast_to(pix, (gh, gw, CHANNELS, w, w)).reshape(
        layout.rows, layout.cols)
    flat = pix.ravel()
    n_pix = H * W * CHANNELS
    first_idx = np.full(n_pix, -1, dtype=np.int64)
    # first occurrence in raveled (l, k) order
    uniq, first = np.unique(flat, return_index=True)
    first_idx[uniq] = first
    counts = np.bincount(flat, minlength=n_pix)
    return pix, first_idx, counts


def lift(patch: np.ndarray, layout: HankelLayout) -> HankelMatrix:
    """Lift an (H, W, 3) patch to its L x K structural Hankel matrix."""
    expected = (layout.patch_h, layout.patch_w, CHANNELS)
    if patch.shape != expected:
        raise ValueError(f"patch shape {patch.shape} != layout {expected}")
    if not np.all(np.isfinite(patch)):
        raise ValueError("patch contains non-finite values")
    w = layout.window
    win = sliding_window_view(patch, (w, w), axis=(0, 1))  # (gh, gw, 3, w, w)
    data = np.ascontiguousarray(win, dtype=np.float64).reshape(
        layout.rows, layout.cols)
    return HankelMatrix(layout, data)


def adjoint(matrix: HankelMatrix) -> np.ndarray:
    """Pseudo-inverse of lift: per-pixel mean of all copies of that pixel.

    Computed as anchor + mean(deltas) with the anchor being the first copy of
    each pixel, so a structurally consistent matrix (all copies equal) round
    trips with zero floating-point error.
    """
    layout = matrix.layout
    pix, first_idx, counts = _pixel_index(layout)
    flat = matrix.data.ravel()
    anchors = flat[first_idx]
    deltas = flat - anchors[pix.ravel()]
    sums = np.bincount(pix.ravel(), weights=deltas, minlength=counts.size)
    out = anchors + sums / counts
    return out.reshape(layout.patch_h, layout.patch_w, CHANNELS)


def multiplicity_map(layout: HankelLayout) -> np.ndarray:
    """Per-pixel copy count in the lifted matrix, shaped like the patch."""
    _, _, counts = _pixel_index(layout)
    return counts.reshape(layout.patch_h, layout.patch_w, CHANNELS)


def default_fold_target(layout: HankelLayout) -> tuple[int, int]:
    """Square fold target K x K (192 x 192 for 64x64 patches, w=8)."""
    return layout.cols, layout.cols


def fold_spec(layout: HankelLayout, target_h: int, target_w: int) -> FoldSpec:
    if target_h < 1 or target_w < 1:
        raise ValueError("fold target must be positive")
    n = layout.rows * layout.cols
    plane = target_h * target_w
    fold_c = -(-n // plane)  # ceil
    return FoldSpec(layout, target_h, target_w, fold_c, fold_c * plane - n)


def fold(matrix: HankelMatrix, target_h: int, target_w: int) -> FoldedTensor:
    """Reshape the matrix row-major into a (target_h, target_w, fold_c) tensor.

    Entries are read row-major and written channel-major: channel k of the
    tensor is the k-th contiguous (target_h * target_w)-entry chunk.  The last
    chunk is zero padded with pad_tail entries.
    """
    spec = fold_spec(matrix.layout, target_h, target_w)
    flat = np.zeros(spec.fold_h * spec.fold_w * spec.fold_c)
    flat[:matrix.data.size] = matrix.data.ravel()
    chunks = flat.reshape(spec.fold_c, spec.fold_h, spec.fold_w)
    return FoldedTensor(spec, np.ascontiguousarray(np.moveaxis(chunks, 0, -1)))


def unfold(tensor: FoldedTensor) -> HankelMatrix:
    """Exact left inverse of fold; the pad tail is discarded."""
    spec = tensor.spec
    layout = spec.layout
    flat = np.moveaxis(tensor.data, -1, 0).ravel()
    n = layout.rows * layout.cols
    if flat.size != n + spec.pad_tail:
        raise ValueError("tensor size inconsistent with its spec")
    return HankelMatrix(layout, flat[:n].reshape(layout.rows, layout.cols))


def save_matrix(matrix: HankelMatrix, path) -> None:
    """Diagnostic dump: little-endian i32 header (L, K, patch_h, patch_w,
    channels, window), then row-major float64 data."""
    layout = matrix.layout
    header = struct.pack(
        "<6i", layout.rows, layout.cols, layout.patch_h, layout.patch_w,
        CHANNELS, layout.window)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(matrix.data, dtype="<f8").tobytes())


def load_matrix(path) -> HankelMatrix:
    with open(path, "rb") as fh:
        head = fh.read(24)
        if len(head) != 24:
            raise ValueError("truncated Hankel matrix dump")
        L, K, ph, pw, ch, w = struct.unpack("<6i", head)
        if ch != CHANNELS:
            raise ValueError(f"unsupported channel count {ch}")
        layout = HankelLayout(ph, pw, w)
        if (L, K) != (layout.rows, layout.cols):
            raise ValueError("header dimensions inconsistent with layout")
        data = np.frombuffer(fh.read(L * K * 8), dtype="<f8").reshape(L, K)
    return HankelMatrix(layout, data.astype(np.float64))
