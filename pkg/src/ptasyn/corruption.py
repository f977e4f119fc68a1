"""Block-level image corruption for the local-structure pretext task.

An image is partitioned into non-overlapping square blocks; one random
subset is rotated by 90/180/270 degrees (counterclockwise, the frozen
convention for this package) and a disjoint random subset is masked with a
fill value. The CorruptionRecord makes the transform exactly invertible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .data import Slice, make_slice
from .seeding import derive_rng

ANGLES = (90, 180, 270)


@dataclass(frozen=True)
class BlockGrid:
    block_size: int
    rows: int
    cols: int
    height: int
    width: int

    @property
    def num_blocks(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class CorruptionRecord:
    """Which blocks were rotated (with angle) or masked, plus the sampling seed.

    JSON schema (reproducibility dumps): {"block_size": int,
    "rotated": [[row, col, angle], ...], "masked": [[row, col], ...],
    "fill_value": float, "seed": int}.
    """

    block_size: int
    rotated: tuple      # ((block_row, block_col, angle), ...)
    masked: tuple       # ((block_row, block_col), ...)
    fill_value: float
    seed: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "block_size": self.block_size,
                "rotated": [list(t) for t in self.rotated],
                "masked": [list(t) for t in self.masked],
                "fill_value": self.fill_value,
                "seed": self.seed,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "CorruptionRecord":
        doc = json.loads(text)
        return cls(
            block_size=int(doc["block_size"]),
            rotated=tuple((int(r), int(c), int(a)) for r, c, a in doc["rotated"]),
            masked=tuple((int(r), int(c)) for r, c in doc["masked"]),
            fill_value=float(doc["fill_value"]),
            seed=int(doc["seed"]),
        )


def grid_for(height: int, width: int, block_size: int) -> BlockGrid:
    if block_size <= 0:
        raise ValueError("block_size must be positive")
    if height % block_size != 0 or width % block_size != 0:
        raise ValueError(
            f"block_size={block_size} must divide image dims {height}x{width}"
        )
    return BlockGrid(block_size, height // block_size, width // block_size, height, width)


def partition_blocks(s: Slice, block_size: int) -> BlockGrid:
    h, w = s.pixels.shape
    return grid_for(h, w, block_size)


def rotate_block(block: np.ndarray, angle: int) -> np.ndarray:
    """Exact counterclockwise rotation of a square block (no interpolation)."""
    if block.shape[0] != block.shape[1]:
        raise ValueError(f"block must be square, got {block.shape}")
    if angle not in ANGLES:
        raise ValueError(f"angle must be one of {ANGLES}, got {angle}")
    return np.rot90(block, k=angle // 90).copy()


def sample_record(
    grid: BlockGrid,
    rotate_fraction: float,
    mask_fraction: float,
    fill: float,
    seed: int,
) -> CorruptionRecord:
    """Choose disjoint rotated/masked block subsets, deterministic in seed.

    Block counts are floor(fraction * num_blocks); selection is without
    replacement over a seeded permutation of all blocks, so the two subsets
    are disjoint by construction.
    """
    if rotate_fraction < 0 or mask_fraction < 0:
        raise ValueError("corruption fractions must be >= 0")
    if rotate_fraction + mask_fraction > 1.0:
        raise ValueError(
            f"rotate_fraction + mask_fraction = {rotate_fraction + mask_fraction} > 1"
        )
    total = grid.num_blocks
    n_rot = int(rotate_fraction * total)
    n_mask = int(mask_fraction * total)
    rng = derive_rng(seed, "corrupt")
    perm = rng.permutation(total)
    rotated_flat = perm[:n_rot]
    masked_flat = perm[n_rot:n_rot + n_mask]
    angles = rng.choice(ANGLES, size=n_rot)
    rotated = tuple(
        (int(b // grid.cols), int(b % grid.cols), int(a))
        for b, a in zip(rotated_flat, angles)
    )
    masked = tuple((int(b // grid.cols), int(b % grid.cols)) for b in masked_flat)
    return CorruptionRecord(
        block_size=grid.block_size,
        rotated=rotated,
        masked=masked,
        fill_value=float(fill),
        seed=seed,
    )


def _check_indices(record: CorruptionRecord, grid: BlockGrid) -> None:
    for r, c, _ in record.rotated:
        if not (0 <= r < grid.rows and 0 <= c < grid.cols):
            raise ValueError(f"rotated block ({r}, {c}) outside {grid.rows}x{grid.cols} grid")
    for r, c in record.masked:
        if not (0 <= r < grid.rows and 0 <= c < grid.cols):
            raise ValueError(f"masked block ({r}, {c}) outside {grid.rows}x{grid.cols} grid")


def apply_record(pixels: np.ndarray, record: CorruptionRecord) -> np.ndarray:
    """Apply a sampled record to a 2D array; pixels outside recorded blocks are untouched."""
    bs = record.block_size
    grid = grid_for(pixels.shape[0], pixels.shape[1], bs)
    _check_indices(record, grid)
    out = pixels.copy()
    for r, c, angle in record.rotated:
        out[r * bs:(r + 1) * bs, c * bs:(c + 1) * bs] = rotate_block(
            pixels[r * bs:(r + 1) * bs, c * bs:(c + 1) * bs], angle
        )
    for r, c in record.masked:
        out[r * bs:(r + 1) * bs, c * bs:(c + 1) * bs] = record.fill_value
    return out


def apply_record_torch(image: torch.Tensor, record: CorruptionRecord) -> torch.Tensor:
    """Differentiable record application for [..., H, W] tensors.

    Rotations are index permutations so gradients flow through rotated
    blocks; masked blocks are constant-filled (zero gradient there).
    """
    bs = record.block_size
    grid = grid_for(image.shape[-2], image.shape[-1], bs)
    _check_indices(record, grid)
    out = image.clone()
    for r, c, angle in record.rotated:
        block = image[..., r * bs:(r + 1) * bs, c * bs:(c + 1) * bs]
        out[..., r * bs:(r + 1) * bs, c * bs:(c + 1) * bs] = torch.rot90(
            block, k=angle // 90, dims=(-2, -1)
        )
    for r, c in record.masked:
        out[..., r * bs:(r + 1) * bs, c * bs:(c + 1) * bs] = record.fill_value
    return out


def corrupt_array(
    pixels: np.ndarray,
    block_size: int,
    rotate_fraction: float,
    mask_fraction: float,
    fill: float,
    seed: int,
):
    grid = grid_for(pixels.shape[0], pixels.shape[1], block_size)
    record = sample_record(grid, rotate_fraction, mask_fraction, fill, seed)
    return apply_record(pixels, record), record


def corrupt(
    s: Slice,
    block_size: int,
    rotate_fraction: float,
    mask_fraction: float,
    fill: float,
    seed: int,
):
    """Corrupt a slice; returns (corrupted slice, record)."""
    out, record = corrupt_array(
        s.pixels, block_size, rotate_fraction, mask_fraction, fill, seed
    )
    return (
        make_slice(out, s.intensity_range, s.contrast_tag, s.volume_id, s.slice_index),
        record,
    )


def invert_corruption_array(
    corrupted: np.ndarray,
    record: CorruptionRecord,
    original: np.ndarray,
) -> np.ndarray:
    """Undo a record: rotate back by the inverse angle, restore masked blocks
    by copying from the original. Bit-exact inverse of apply_record."""
    bs = record.block_size
    grid = grid_for(corrupted.shape[0], corrupted.shape[1], bs)
    _check_indices(record, grid)
    out = corrupted.copy()
    for r, c, angle in record.rotated:
        out[r * bs:(r + 1) * bs, c * bs:(c + 1) * bs] = rotate_block(
            corrupted[r * bs:(r + 1) * bs, c * bs:(c + 1) * bs], 360 - angle
        )
    for r, c in record.masked:
        out[r * bs:(r + 1) * bs, c * bs:(c + 1) * bs] = original[
            r * bs:(r + 1) * bs, c * bs:(c + 1) * bs
        ]
    return out


def invert_corruption(c: Slice, record: CorruptionRecord, original: Slice) -> Slice:
    out = invert_corruption_array(c.pixels, record, original.pixels)
    return make_slice(out, c.intensity_range, c.contrast_tag, c.volume_id, c.slice_index)
