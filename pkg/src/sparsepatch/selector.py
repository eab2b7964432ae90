"""Differentiable patch selection over an encoded clip.

Per P-frame patch, three feature blocks feed a small scoring MLP:

* the codec's motion residual (what the I-frame cannot explain),
* saliency-scaled semantics from a shallow 3-D CNN (where the mover is),
* a progressive residual against a pool of already-kept pixel patches
  (what previous selections cannot explain either).

Scores pass a zero-threshold gate. During training the score is jittered
with unit Gaussian noise and the hard 0/1 decision backpropagates through
a saturating-sigmoid surrogate (see numcore.hard_gate); at inference the
gate is a plain strict sign test. Selected patches join the pool so later
frames can skip content that was already kept.
"""

from __future__ import annotations

from contextlib import nullcontext
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ShapeError, ValidationError
from .gopcodec import PATCH_DIM, GopClip, decode_gop, sad_nearest
from .numcore import ParamSet, Tensor
from .spectral import SaliencyVector, prominent_eigvec
from .videoio import RawClip

CNN_CHANNELS = (3, 16, 32, 64, 64)
SEMANTIC_DIM = CNN_CHANNELS[-1]
FEATURE_DIM = PATCH_DIM + SEMANTIC_DIM + PATCH_DIM  # 1600
MLP_WIDTHS = (FEATURE_DIM, 256, 64, 1)
_KERNEL = 27  # 3x3x3 neighborhood


# ---------------------------------------------------------------------------
# shallow 3-D CNN
# ---------------------------------------------------------------------------

_INDEX_CACHE: dict[tuple[int, int, int], list[np.ndarray]] = {}


def _layer_neighbors(t: int, h: int, w: int, offset: int) -> np.ndarray:
    """im2col indices for one stride-2 (spatial) conv layer.

    Rows follow (frame, y, x) order of the output grid; the 27 columns run
    over (dt, dy, dx) offsets. -1 marks zero padding. ``offset`` shifts
    the spatial sampling centers by one input cell.
    """
    ho, wo = h // 2, w // 2
    off = np.arange(_KERNEL)
    dt, dy, dx = off // 9 - 1, (off % 9) // 3 - 1, off % 3 - 1
    t_in = np.arange(t)[:, None, None, None] + dt
    y_in = 2 * np.arange(ho)[None, :, None, None] + offset + dy
    x_in = 2 * np.arange(wo)[None, None, :, None] + offset + dx
    t_in, y_in, x_in = np.broadcast_arrays(t_in, y_in, x_in)
    flat = (t_in * h + y_in) * w + x_in
    valid = ((t_in >= 0) & (t_in < t) & (y_in >= 0) & (y_in < h)
             & (x_in >= 0) & (x_in < w))
    return np.where(valid, flat, -1).reshape(t * ho * wo, _KERNEL)


# the last layer samples at odd positions so the stacked receptive fields
# center on 16x16 patch centers (16*v + 8) instead of patch corners
_LAYER_OFFSETS = (0, 0, 0, 1)


def _conv_indices(t: int, h: int, w: int) -> list[np.ndarray]:
    key = (t, h, w)
    if key not in _INDEX_CACHE:
        layers = []
        ch, cw = h, w
        for offset in _LAYER_OFFSETS:
            layers.append(_layer_neighbors(t, ch, cw, offset))
            ch, cw = ch // 2, cw // 2
        _INDEX_CACHE[key] = layers
    return _INDEX_CACHE[key]


@dataclass
class SemanticsFeatures:
    """Per-frame (N, 64) patch features from the shallow CNN."""

    f_maps: list[Tensor]
    grid_h: int
    grid_w: int

    @property
    def frames(self) -> int:
        return len(self.f_maps)


# conv0 channel split: backward temporal difference / color-opponent /
# gray, with per-group gains. Bias channels on the last conv give every
# patch a shared feature floor. See init_selector_params.
_MOTION_CHANNELS = 8
_COLOR_CHANNELS = 4
_MOTION_GAIN = 8.0
_COLOR_GAIN = 4.0
_GRAY_GAIN = 0.3
_BIAS_CHANNELS = 8
_BIAS_VALUE = 0.3
_BIAS_W_SCALE = 0.1


def init_selector_params(seed: int, params: ParamSet | None = None) -> ParamSet:
    """Structured init that makes the untrained saliency informative.

    The first conv splits its channels into backward temporal difference
    (zero response on static content), color-opponent (zero on gray
    content), and low-gain gray groups; deeper convs start from their
    center tap so a patch's feature depends on (nearly) its own pixels;
    the last conv reserves a few positive-bias channels so every patch
    shares a feature floor and the frame graph stays connected. With
    inner-product affinities this seeds a clean mover-vs-rest spectral
    split before any training; training is free to reshape all of it.
    """
    if params is None:
        params = ParamSet()
    rng = nc.rng_stream(seed, "init", "sel.conv0")
    w0 = np.zeros((_KERNEL * CNN_CHANNELS[0], CNN_CHANNELS[1]))
    cin = CNN_CHANNELS[0]
    for ch in range(CNN_CHANNELS[1]):
        if ch < _MOTION_CHANNELS:
            g = rng.standard_normal(9 * cin) * (np.sqrt(2.0 / (27 * cin)) * _MOTION_GAIN)
            w0[0 * 9 * cin:1 * 9 * cin, ch] = g    # dt = -1
            w0[1 * 9 * cin:2 * 9 * cin, ch] = -g   # dt = 0
        elif ch < _MOTION_CHANNELS + _COLOR_CHANNELS:
            ab = rng.standard_normal((9, 2)) * (np.sqrt(2.0 / (9 * cin)) * _COLOR_GAIN)
            opp = np.stack([ab[:, 0], ab[:, 1], -ab[:, 0] - ab[:, 1]], axis=1)
            w0[9 * cin:2 * 9 * cin, ch] = opp.reshape(-1)
        else:
            lum = rng.standard_normal(9) * (np.sqrt(2.0 / (9 * cin)) * _GRAY_GAIN)
            w0[9 * cin:2 * 9 * cin, ch] = np.repeat(lum, cin)
    params.add("sel.conv0.w", w0)
    params.add("sel.conv0.b", np.zeros((1, CNN_CHANNELS[1])))
    for i in (1, 2, 3):
        cin, cout = CNN_CHANNELS[i], CNN_CHANNELS[i + 1]
        rng = nc.rng_stream(seed, "init", f"sel.conv{i}")
        w = np.zeros((_KERNEL * cin, cout))
        # center tap sits at (dt,dy,dx)=(0,0,0): kernel slot 13
        w[13 * cin:14 * cin, :] = rng.standard_normal((cin, cout)) * np.sqrt(2.0 / cin)
        b = np.zeros((1, cout))
        if i == 3:
            w[:, :_BIAS_CHANNELS] *= _BIAS_W_SCALE
            b[0, :_BIAS_CHANNELS] = _BIAS_VALUE
        params.add(f"sel.conv{i}.w", w)
        params.add(f"sel.conv{i}.b", b)
    for i in range(3):
        fan_in, fan_out = MLP_WIDTHS[i], MLP_WIDTHS[i + 1]
        rng = nc.rng_stream(seed, "init", f"sel.mlp{i}")
        gain = 2.0 if i < 2 else 1.0  # relu layers vs the linear head
        params.add(f"sel.mlp{i}.w",
                   rng.standard_normal((fan_in, fan_out)) * np.sqrt(gain / fan_in))
        params.add(f"sel.mlp{i}.b", np.zeros((1, fan_out)))
    return params


def shallow_3dcnn(clip: RawClip, params: ParamSet) -> SemanticsFeatures:
    """Four 3x3x3 conv+ReLU layers, spatial stride 2 each, temporal stride 1.

    Spatial extent shrinks 16x, so the output grid matches the patch grid
    and row v of frame t's map describes patch v exactly.
    """
    t, h, w = clip.frames, clip.height, clip.width
    if h % 16 or w % 16:
        raise ValidationError("clip dimensions must be multiples of 16")
    x = Tensor(clip.pixels.reshape(t * h * w, 3) / 255.0 - 0.5)
    counter = nc.active_counter()
    with counter.stage("selection_cnn") if counter else nullcontext():
        for i, nbr in enumerate(_conv_indices(t, h, w)):
            cols = nc.neighborhood_rows(x, nbr)
            x = nc.relu(nc.linear(cols, params[f"sel.conv{i}.w"],
                                  params[f"sel.conv{i}.b"]))
    gh, gw = h // 16, w // 16
    n = gh * gw
    f_maps = [nc.slice_rows(x, ti * n, (ti + 1) * n) for ti in range(t)]
    return SemanticsFeatures(f_maps=f_maps, grid_h=gh, grid_w=gw)


def patch_semantics(f_map: Tensor, saliency: SaliencyVector) -> Tensor:
    """Scale each patch's feature row by its saliency score."""
    if f_map.shape[0] != saliency.values.shape[0]:
        raise ValidationError(
            f"saliency length {saliency.values.shape[0]} != patch count {f_map.shape[0]}")
    weights = Tensor(saliency.values.reshape(-1, 1))
    return nc.mul(f_map, weights)


# ---------------------------------------------------------------------------
# progressive residual pool
# ---------------------------------------------------------------------------


class PatchPool:
    """Grow-only store of kept pixel patches, queried by L1 distance.

    Entry order is the tie-break order: I-frame patches first (by patch
    index), then selections appended frame by frame in ascending patch
    index. ``entries`` records (frame, patch_index) provenance.
    """

    def __init__(self, capacity: int, dim: int = PATCH_DIM):
        self._buf = np.empty((capacity, dim), dtype=np.int16)
        self._size = 0
        self.entries: list[tuple[int, int]] = []

    @classmethod
    def from_iframe(cls, gop: GopClip) -> "PatchPool":
        n = gop.i_frame.count
        pool = cls(capacity=n * gop.frames)
        pool.append(gop.i_frame.patches, frame=0,
                    indices=np.arange(n, dtype=np.int64))
        return pool

    @property
    def size(self) -> int:
        return self._size

    def append(self, patches: np.ndarray, frame: int, indices) -> None:
        indices = np.asarray(indices, dtype=np.int64)
        if patches.shape != (indices.size, self._buf.shape[1]):
            raise ValidationError(f"pool append shape mismatch {patches.shape}")
        if indices.size and np.any(np.diff(indices) <= 0):
            raise ValidationError("pool appends must use strictly ascending indices")
        end = self._size + indices.size
        if end > self._buf.shape[0]:
            raise ValidationError("pool capacity exceeded")
        self._buf[self._size:end] = patches
        self.entries.extend((frame, int(i)) for i in indices)
        self._size = end

    def query(self, patches: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self._size == 0:
            raise ValidationError("pool is empty")
        return sad_nearest(patches, self._buf[: self._size])


def progressive_residual(patch: np.ndarray, pool: PatchPool) -> tuple[np.ndarray, int]:
    """Signed difference to the pool's L1-nearest patch (earliest on ties)."""
    patch = np.asarray(patch, dtype=np.int16).reshape(1, -1)
    idx, _ = pool.query(patch)
    k = int(idx[0])
    return (patch[0] - pool._buf[k]).astype(np.int16), k


# ---------------------------------------------------------------------------
# scoring gate
# ---------------------------------------------------------------------------


@dataclass
class GateDecision:
    """Gate outputs for one P-frame: raw scores, jittered scores, decisions."""

    score: Tensor          # (N, 1) raw MLP output
    shifted: Tensor        # (N, 1) score + noise in train mode, alias otherwise
    hard: np.ndarray       # (N,) uint8 keep decisions
    gate: Tensor           # (N, 1) multiplier carrying straight-through grads
    soft: np.ndarray       # (N,) saturating-sigmoid confidence values


def score_gate(features: Tensor, params: ParamSet, mode: str,
               noise: np.ndarray | None = None) -> GateDecision:
    if mode not in ("train", "infer"):
        raise ValidationError(f"mode must be 'train' or 'infer', got {mode!r}")
    if features.shape[1] != FEATURE_DIM:
        raise ShapeError(f"gate features must be (N, {FEATURE_DIM}), got {features.shape}")
    h = features
    h = nc.relu(nc.linear(h, params["sel.mlp0.w"], params["sel.mlp0.b"]))
    h = nc.relu(nc.linear(h, params["sel.mlp1.w"], params["sel.mlp1.b"]))
    score = nc.linear(h, params["sel.mlp2.w"], params["sel.mlp2.b"])

    if mode == "train":
        if noise is None or noise.shape != score.shape:
            raise ValidationError("train mode needs (N, 1) gate noise")
        shifted = nc.add(score, Tensor(noise))
        gate = nc.hard_gate(shifted)
    else:
        if noise is not None:
            raise ValidationError("inference gating takes no noise")
        shifted = score
        gate = Tensor((score.data > 0.0).astype(np.float64))
    hard = (shifted.data[:, 0] > 0.0).astype(np.uint8)
    soft = nc.soft_gate_value(shifted.data[:, 0])
    return GateDecision(score=score, shifted=shifted, hard=hard, gate=gate, soft=soft)


# ---------------------------------------------------------------------------
# full selection pass
# ---------------------------------------------------------------------------


@dataclass
class SelectionResult:
    """Everything downstream consumers need about one clip's selection.

    ``selected[t-1]`` holds ascending kept patch indices for P-frame t;
    ``gates[t-1]`` is the (N, 1) multiplier tensor whose straight-through
    gradients reach the CNN and scoring MLP in train mode. ``pool`` is the
    final progressive pool (I-frame patches plus every kept patch).
    """

    frames: int
    grid_h: int
    grid_w: int
    mode: str
    selected: list[np.ndarray]
    gates: list[Tensor]
    scores: list[np.ndarray]
    shifted_scores: list[np.ndarray]
    soft_values: list[np.ndarray]
    saliency: list[SaliencyVector]
    pool: PatchPool
    semantics: SemanticsFeatures

    @property
    def patch_count(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def kept_counts(self) -> list[int]:
        return [int(s.size) for s in self.selected]

    @property
    def kept_fraction(self) -> float:
        if self.frames < 2:
            return 0.0
        return sum(self.kept_counts) / (self.patch_count * (self.frames - 1))

    def summary(self) -> dict:
        return {
            "frames": self.frames,
            "grid": [self.grid_h, self.grid_w],
            "mode": self.mode,
            "kept_per_frame": self.kept_counts,
            "kept_fraction": round(self.kept_fraction, 6),
            "pool_size": self.pool.size,
            "selected": [s.tolist() for s in self.selected],
        }


def select_patches(gop: GopClip, params: ParamSet, mode: str = "infer",
                   seed: int = 0,
                   semantics: SemanticsFeatures | None = None) -> SelectionResult:
    """Run the full selection pipeline over an encoded clip.

    Frames are processed in time order; each P-frame's progressive
    residuals are measured against the pool as it stood *before* that
    frame, then its kept patches are appended. A clip with one frame
    yields an empty selection.
    """
    counter = nc.active_counter()
    if semantics is None:
        semantics = shallow_3dcnn(decode_gop(gop), params)
    n = gop.i_frame.count
    if semantics.frames != gop.frames or semantics.grid_h * semantics.grid_w != n:
        raise ValidationError("semantics do not match the encoded clip")

    pool = PatchPool.from_iframe(gop)
    selected: list[np.ndarray] = []
    gates: list[Tensor] = []
    scores: list[np.ndarray] = []
    shifted_scores: list[np.ndarray] = []
    soft_values: list[np.ndarray] = []
    saliencies: list[SaliencyVector] = []
    base = gop.i_frame.patches

    for t in range(1, gop.frames):
        f_map = semantics.f_maps[t]
        # the Gram product inside the saliency graph is a real matmul even
        # though it runs outside the tape; charge it so counted == analytic
        if counter is not None:
            with counter.stage("selection_cnn"):
                counter.add(n * n * SEMANTIC_DIM)
            counter.note_uncounted("eig_decompositions", 1)
        sal = prominent_eigvec(f_map.data)
        s_feat = patch_semantics(f_map, sal)

        recon = base[gop.motion[t - 1]] + gop.residual[t - 1]
        prog_idx, _ = pool.query(recon)
        prog = recon - pool._buf[prog_idx]

        feats = nc.concat_cols([
            Tensor(gop.residual[t - 1] / 255.0),
            s_feat,
            Tensor(prog / 255.0),
        ])
        noise = None
        if mode == "train":
            noise = nc.rng_stream(seed, "gate-noise", t).standard_normal((n, 1))
        with counter.stage("selector_mlp") if counter else nullcontext():
            gate = score_gate(feats, params, mode, noise)

        keep = np.nonzero(gate.hard)[0]
        pool.append(recon[keep].astype(np.int16), frame=t, indices=keep)
        selected.append(keep.astype(np.int64))
        gates.append(gate.gate)
        scores.append(gate.score.data[:, 0].copy())
        shifted_scores.append(gate.shifted.data[:, 0].copy())
        soft_values.append(gate.soft.copy())
        saliencies.append(sal)

    return SelectionResult(
        frames=gop.frames, grid_h=semantics.grid_h, grid_w=semantics.grid_w,
        mode=mode, selected=selected, gates=gates, scores=scores,
        shifted_scores=shifted_scores, soft_values=soft_values,
        saliency=saliencies, pool=pool, semantics=semantics)
