"""Group-of-pictures codec over 16x16 patches.

Frame 0 of a clip is kept whole (the I-frame, an N x 768 patch matrix).
Every later frame stores, per patch, the index of its best-matching
I-frame patch under the sum of absolute differences, plus the exact
signed residual. Decoding is therefore bit-exact by construction:

    patch[t][n] == i_frame[motion[t-1][n]] + residual[t-1][n]

Patch layout is row-major in both senses: patch n = grid_w * row + col,
and inside a patch the 768 columns run over (y, x, channel).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .numcore import active_counter
from .videoio import PATCH, RawClip

_MAGIC = b"GOPV1\x00"
PATCH_DIM = PATCH * PATCH * 3  # 768


def flatten_index(row: int, col: int, grid_w: int) -> int:
    if grid_w < 1:
        raise ValidationError("grid_w must be >= 1")
    if col < 0 or col >= grid_w or row < 0:
        raise ValidationError(f"patch coordinate ({row}, {col}) outside grid width {grid_w}")
    return grid_w * row + col


def unflatten_index(v: int, grid_w: int) -> tuple[int, int]:
    if grid_w < 1:
        raise ValidationError("grid_w must be >= 1")
    if v < 0:
        raise ValidationError(f"patch index {v} is negative")
    return v // grid_w, v % grid_w


@dataclass
class PatchGrid:
    """One frame as an (N, 768) int16 matrix plus its grid shape."""

    patches: np.ndarray
    grid_h: int
    grid_w: int

    def __post_init__(self):
        n = self.grid_h * self.grid_w
        p = self.patches
        if not isinstance(p, np.ndarray) or p.dtype != np.int16:
            raise ValidationError("patches must be an int16 array")
        if p.shape != (n, PATCH_DIM):
            raise ValidationError(f"patches must be ({n}, {PATCH_DIM}), got {p.shape}")

    @property
    def count(self) -> int:
        return self.grid_h * self.grid_w


def patchify(frame: np.ndarray) -> PatchGrid:
    """Split an (H, W, 3) uint8 frame into flattened 16x16 patches."""
    if not isinstance(frame, np.ndarray) or frame.dtype != np.uint8:
        raise ValidationError("frame must be a uint8 array")
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValidationError(f"frame must be (H, W, 3), got {frame.shape}")
    h, w, _ = frame.shape
    if h % PATCH or w % PATCH or h == 0 or w == 0:
        raise ValidationError(f"frame size {h}x{w} not a multiple of {PATCH}")
    gh, gw = h // PATCH, w // PATCH
    tiles = frame.reshape(gh, PATCH, gw, PATCH, 3).transpose(0, 2, 1, 3, 4)
    return PatchGrid(patches=tiles.reshape(gh * gw, PATCH_DIM).astype(np.int16),
                     grid_h=gh, grid_w=gw)


def unpatchify(grid: PatchGrid) -> np.ndarray:
    p = grid.patches
    if p.min(initial=0) < 0 or p.max(initial=0) > 255:
        raise ValidationError("patch values outside [0, 255] cannot form a frame")
    gh, gw = grid.grid_h, grid.grid_w
    tiles = p.reshape(gh, gw, PATCH, PATCH, 3).transpose(0, 2, 1, 3, 4)
    return tiles.reshape(gh * PATCH, gw * PATCH, 3).astype(np.uint8)


# ---------------------------------------------------------------------------
# SAD search
# ---------------------------------------------------------------------------


def sad_nearest(queries: np.ndarray, keys: np.ndarray,
                chunk: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Exhaustive L1 nearest key per query row; first minimum wins ties.

    Exact integer arithmetic on uint8/int16 inputs: |a - b| is computed as
    max - min to stay inside the unsigned domain. Returns (indices, sums).
    """
    q = np.asarray(queries)
    k = np.asarray(keys)
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise ValidationError(f"incompatible SAD shapes {q.shape} vs {k.shape}")
    if k.shape[0] == 0:
        raise ValidationError("SAD search needs at least one key")
    counter = active_counter()
    if counter is not None:
        counter.note_uncounted("sad_compares", q.shape[0] * k.shape[0] * q.shape[1])
    idx = np.empty(q.shape[0], dtype=np.int32)
    best = np.empty(q.shape[0], dtype=np.int32)
    for lo in range(0, q.shape[0], chunk):
        hi = min(lo + chunk, q.shape[0])
        block = q[lo:hi, None, :]
        upper = np.maximum(block, k[None, :, :])
        lower = np.minimum(block, k[None, :, :])
        sad = (upper - lower).sum(axis=2, dtype=np.int32)
        idx[lo:hi] = sad.argmin(axis=1)
        best[lo:hi] = sad[np.arange(hi - lo), idx[lo:hi]]
    return idx, best


# ---------------------------------------------------------------------------
# GOP container
# ---------------------------------------------------------------------------


@dataclass
class GopClip:
    """Encoded clip: I-frame patches, per-P-frame motion and residuals."""

    i_frame: PatchGrid
    motion: np.ndarray
    residual: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        gh, gw = self.height // PATCH, self.width // PATCH
        if (gh, gw) != (self.i_frame.grid_h, self.i_frame.grid_w):
            raise ValidationError("I-frame grid does not match clip dimensions")
        n = self.i_frame.count
        m, r = self.motion, self.residual
        if not isinstance(m, np.ndarray) or m.dtype != np.int32 or m.ndim != 2 \
                or m.shape[1] != n:
            raise ValidationError(f"motion must be int32 (T-1, {n})")
        if not isinstance(r, np.ndarray) or r.dtype != np.int16 \
                or r.shape != (m.shape[0], n, PATCH_DIM):
            raise ValidationError(f"residual must be int16 (T-1, {n}, {PATCH_DIM})")
        if m.size and (m.min() < 0 or m.max() >= n):
            raise ValidationError("motion index outside the I-frame grid")
        if r.size and (r.min() < -255 or r.max() > 255):
            raise ValidationError("residual outside [-255, 255]")

    @property
    def frames(self) -> int:
        return self.motion.shape[0] + 1


def encode_gop(clip: RawClip) -> GopClip:
    """Motion-compensate every P-frame against the I-frame, keeping exact
    residuals. Labels and masks are not part of the encoded stream."""
    i_grid = patchify(clip.pixels[0])
    i_u8 = i_grid.patches.astype(np.uint8)
    n = i_grid.count
    t_minus_1 = clip.frames - 1
    motion = np.empty((t_minus_1, n), dtype=np.int32)
    residual = np.empty((t_minus_1, n, PATCH_DIM), dtype=np.int16)
    for t in range(1, clip.frames):
        p_grid = patchify(clip.pixels[t])
        idx, _ = sad_nearest(p_grid.patches.astype(np.uint8), i_u8)
        motion[t - 1] = idx
        residual[t - 1] = p_grid.patches - i_grid.patches[idx]
    return GopClip(i_frame=i_grid, motion=motion, residual=residual,
                   height=clip.height, width=clip.width)


def decode_gop(gop: GopClip) -> RawClip:
    frames = [unpatchify(gop.i_frame)]
    base = gop.i_frame.patches
    for t in range(gop.motion.shape[0]):
        patches = base[gop.motion[t]] + gop.residual[t]
        frames.append(unpatchify(PatchGrid(patches=patches.astype(np.int16),
                                           grid_h=gop.i_frame.grid_h,
                                           grid_w=gop.i_frame.grid_w)))
    return RawClip(pixels=np.stack(frames, axis=0))


def write_gop(gop: GopClip, path) -> None:
    blob = bytearray()
    blob += _MAGIC
    blob += struct.pack("<III", gop.height, gop.width, gop.frames)
    blob += gop.i_frame.patches.astype(np.uint8).tobytes()
    blob += gop.motion.astype("<i4").tobytes()
    blob += gop.residual.astype("<i2").tobytes()
    Path(path).write_bytes(bytes(blob))


def read_gop(path) -> GopClip:
    data = Path(path).read_bytes()
    if len(data) < len(_MAGIC) or data[: len(_MAGIC)] != _MAGIC:
        raise ParseError("bad or missing GOPV1 magic", offset=0)
    pos = len(_MAGIC)
    if len(data) < pos + 12:
        raise ParseError("truncated header", offset=len(data))
    height, width, frames = struct.unpack_from("<III", data, pos)
    if frames < 1 or height < 1 or width < 1 or height % PATCH or width % PATCH:
        raise ParseError(f"invalid dimensions {frames}x{height}x{width}", offset=pos)
    pos += 12
    n = (height // PATCH) * (width // PATCH)

    size_i = n * PATCH_DIM
    if len(data) < pos + size_i:
        raise ParseError("truncated I-frame section", offset=len(data))
    i_patches = np.frombuffer(data, dtype=np.uint8, count=size_i, offset=pos)
    i_patches = i_patches.reshape(n, PATCH_DIM).astype(np.int16)
    pos += size_i

    count_m = (frames - 1) * n
    if len(data) < pos + 4 * count_m:
        raise ParseError("truncated motion section", offset=len(data))
    motion = np.frombuffer(data, dtype="<i4", count=count_m, offset=pos)
    motion = motion.reshape(frames - 1, n).astype(np.int32)
    if motion.size and (motion.min() < 0 or motion.max() >= n):
        raise ParseError("motion index outside the I-frame grid", offset=pos)
    pos += 4 * count_m

    count_r = (frames - 1) * n * PATCH_DIM
    if len(data) < pos + 2 * count_r:
        raise ParseError("truncated residual section", offset=len(data))
    residual = np.frombuffer(data, dtype="<i2", count=count_r, offset=pos)
    residual = residual.reshape(frames - 1, n, PATCH_DIM).astype(np.int16)
    if residual.size and (np.abs(residual).max() > 255):
        raise ParseError("residual outside [-255, 255]", offset=pos)
    pos += 2 * count_r
    if pos != len(data):
        raise ParseError("trailing bytes after residual section", offset=pos)

    grid = PatchGrid(patches=i_patches,
                     grid_h=height // PATCH, grid_w=width // PATCH)
    return GopClip(i_frame=grid, motion=motion, residual=residual,
                   height=height, width=width)
