"""Render cross-attention rows as 8-bit grayscale maps."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from . import numcore as nc
from .data import write_pgm

DEFAULT_SCALE = 0.06


def scale_and_clip(row, grid: tuple[int, int], scale: float = DEFAULT_SCALE) -> np.ndarray:
    """Attention row of length H·W → H×W map divided by ``scale`` and clipped to [0, 1]."""
    if scale <= 0:
        raise ValueError("attention scale must be positive")
    h, w = grid
    row = np.asarray(row, dtype=np.float64)
    if row.size != h * w:
        raise ValueError(f"attention row of length {row.size} does not fit a {h}×{w} grid")
    return np.clip(row.reshape(h, w) / scale, 0.0, 1.0)


def upsample(m: np.ndarray, size: tuple[int, int], mode: str = "nearest") -> np.ndarray:
    h, w = m.shape
    if mode == "nearest":
        if size[0] % h or size[1] % w:
            raise ValueError(f"{size} is not an integer multiple of the {h}×{w} grid")
        return np.repeat(np.repeat(m, size[0] // h, axis=0), size[1] // w, axis=1)
    if mode == "bilinear":
        out = ndimage.zoom(m, (size[0] / h, size[1] / w), order=1, mode="nearest", grid_mode=True)
        return np.clip(out, 0.0, 1.0)
    raise ValueError(f"unknown upsampling mode {mode!r}")


def quantize(m: np.ndarray) -> np.ndarray:
    return np.round(255.0 * m).astype(np.uint8)


def attention_image(row, grid, size, scale: float = DEFAULT_SCALE, mode: str = "nearest") -> np.ndarray:
    return quantize(upsample(scale_and_clip(row, grid, scale), size, mode))


def export_attention(model, image: np.ndarray, labels, out_dir, scale: float = DEFAULT_SCALE,
                     mode: str = "nearest", layer: int = -1) -> list[Path]:
    """Write per-head and head-mean maps of one decoder layer for each label.

    Files are ``label{k:02d}_head{h}.pgm`` and ``label{k:02d}_mean.pgm``.  The
    mean is taken over the scaled and clipped head maps.
    """
    k_total = model.config.n_classes
    for k in labels:
        if not 0 <= k < k_total:
            raise ValueError(f"label {k} outside [0, {k_total})")
    x = image.astype(nc.get_default_dtype()) / 255.0 if image.dtype == np.uint8 else image
    with nc.no_grad():
        maps = model.forward(x).cross_maps[layer].data  # heads×K×HW
    g = model.config.grid
    size = image.shape[:2]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for k in labels:
        clipped = [scale_and_clip(maps[h, k], (g, g), scale) for h in range(maps.shape[0])]
        for h, m in enumerate(clipped):
            path = out / f"label{k:02d}_head{h}.pgm"
            write_pgm(path, quantize(upsample(m, size, mode)))
            written.append(path)
        path = out / f"label{k:02d}_mean.pgm"
        write_pgm(path, quantize(upsample(np.mean(clipped, axis=0), size, mode)))
        written.append(path)
    return written
