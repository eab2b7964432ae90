"""Analytic MAC estimators and runtime-counter comparison reports.

Two estimators share one cost kernel. ``estimate_vit`` prices a plain
per-frame transformer over every patch of every frame. ``estimate_ours``
prices the selective pipeline: the first frame at full width, later
frames at their kept-patch widths, warp and routing overheads per
(layer, frame), and optionally the selection network itself.

The counting rule everywhere: one MAC per multiply-accumulate of a
matmul; elementwise work, normalization, softmax, reductions, the SAD
search, and eigendecompositions cost zero and are disclosed separately
as uncounted operations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .gopcodec import PATCH_DIM
from .numcore import MacCounter
from .selector import CNN_CHANNELS, MLP_WIDTHS, SEMANTIC_DIM

__all__ = [
    "Geometry",
    "CostReport",
    "STAGES",
    "msa_macs",
    "estimate_vit",
    "estimate_ours",
    "exact_cost",
    "runtime_counter_report",
    "bisect_kept_fraction",
]

STAGES = ("embedding", "i_frame_msa", "p_frame_msa", "patchwise_warp",
          "global_warp", "routing", "selection_cnn", "selector_mlp")


@dataclass(frozen=True)
class Geometry:
    height: int = 128
    width: int = 256
    frames: int = 8
    dim: int = 768
    layers: int = 12
    heads: int = 12

    def __post_init__(self):
        if min(self.height, self.width, self.frames, self.dim,
               self.layers, self.heads) < 1:
            raise ValidationError("geometry fields must be positive")
        if self.height % 16 or self.width % 16:
            raise ValidationError("height and width must be multiples of 16")
        if self.dim % self.heads:
            raise ValidationError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def patch_count(self) -> int:
        return (self.height // 16) * (self.width // 16)

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def warp_hidden(self) -> int:
        return max(32, self.dim // 6)

    def to_dict(self) -> dict:
        return {"height": self.height, "width": self.width,
                "frames": self.frames, "dim": self.dim,
                "layers": self.layers, "heads": self.heads}


@dataclass
class CostReport:
    analytic_gmacs: float
    counted_gmacs: float | None
    breakdown: dict[str, float]
    inputs: dict
    uncounted: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        total = sum(self.breakdown.values())
        if self.analytic_gmacs > 0 and \
                abs(total - self.analytic_gmacs) > 1e-3 * self.analytic_gmacs:
            raise ValidationError(
                f"breakdown sums to {total}, not {self.analytic_gmacs}")

    def to_json_dict(self) -> dict:
        return {
            "analytic_gmacs": self.analytic_gmacs,
            "counted_gmacs": self.counted_gmacs,
            "breakdown": dict(self.breakdown),
            "inputs": self.inputs,
            "uncounted": dict(self.uncounted),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2)


# ---------------------------------------------------------------------------
# shared cost kernel
# ---------------------------------------------------------------------------


def msa_macs(m: float, aux: float, d: int) -> float:
    """One pre-norm MSA+FFN block over m main and aux key/value-only rows."""
    if m <= 0:
        return 0.0
    return m * 12 * d * d + aux * 2 * d * d + 2 * m * (m + aux) * d


def _warp_row_macs(geom: Geometry) -> float:
    """Per-patch cost of the coarse warp MLP plus one-head refinement."""
    d, h, dk, n = geom.dim, geom.warp_hidden, geom.head_dim, geom.patch_count
    return (d + PATCH_DIM) * h + h * h + h * d + d * dk + n * dk + n * d


def _kv_macs(geom: Geometry) -> float:
    """Key/value projections over the full first-frame token grid."""
    n, d, dk = geom.patch_count, geom.dim, geom.head_dim
    return n * d * dk + n * d * d


def _context_mlp_macs(geom: Geometry) -> float:
    """One evolution MLP plus one warp MLP evaluation (a 2d->h->d pair)."""
    return 6 * geom.dim * geom.warp_hidden


def _selection_macs(geom: Geometry) -> tuple[float, float]:
    """(selection_cnn, selector_mlp) MACs for one clip."""
    t, n = geom.frames, geom.patch_count
    cnn = 0.0
    hw = geom.height * geom.width
    for i in range(len(CNN_CHANNELS) - 1):
        positions = t * hw // (4 ** (i + 1))
        cnn += positions * 27 * CNN_CHANNELS[i] * CNN_CHANNELS[i + 1]
    cnn += (t - 1) * n * n * SEMANTIC_DIM  # saliency-graph Gram product
    mlp = (t - 1) * n * sum(a * b for a, b in zip(MLP_WIDTHS, MLP_WIDTHS[1:]))
    return cnn, mlp


def _report(breakdown_macs: dict[str, float], inputs: dict,
            counted: float | None = None,
            uncounted: dict | None = None) -> CostReport:
    breakdown = {k: v / 1e9 for k, v in breakdown_macs.items()}
    return CostReport(
        analytic_gmacs=sum(breakdown.values()),
        counted_gmacs=counted,
        breakdown=breakdown,
        inputs=inputs,
        uncounted=uncounted or {},
    )


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------


def estimate_vit(geom: Geometry) -> CostReport:
    """Plain per-frame transformer over all patches of all frames."""
    n, d, l, t = geom.patch_count, geom.dim, geom.layers, geom.frames
    per_frame_layers = l * (12 * d * d * n + 2 * n * n * d)
    breakdown = {k: 0.0 for k in STAGES}
    breakdown["embedding"] = t * n * PATCH_DIM * d
    breakdown["i_frame_msa"] = per_frame_layers
    breakdown["p_frame_msa"] = (t - 1) * per_frame_layers
    return _report(breakdown, {"kept_fraction": 1.0, "gate_open_rate": 0.0,
                               "geometry": geom.to_dict()})


def _per_frame_rates(value, count: int, name: str) -> list[float]:
    if np.isscalar(value):
        rates = [float(value)] * count
    else:
        rates = [float(v) for v in value]
        if len(rates) != count:
            raise ValidationError(f"{name} needs {count} values, got {len(rates)}")
    for r in rates:
        if not 0.0 <= r <= 1.0:
            raise ValidationError(f"{name} {r} outside [0, 1]")
    return rates


def estimate_ours(geom: Geometry, kept_fraction, gate_open_rate,
                  include_selection: bool = True) -> CostReport:
    """Selective pipeline cost at uniform (or per-frame/per-layer) rates.

    ``kept_fraction`` applies per P-frame, ``gate_open_rate`` per layer.
    Key/value projections for the warp refinement are charged once per
    layer that opens at least one frame, so at rate g the expected number
    of charged layers is L * (1 - (1-g)^(T-1)), plus one unconditional
    build for the post-stack reinstatement pass.
    """
    n, d, l, t = geom.patch_count, geom.dim, geom.layers, geom.frames
    kept = [f * n for f in _per_frame_rates(kept_fraction, max(t - 1, 0),
                                            "kept_fraction")]
    opens = _per_frame_rates(gate_open_rate, l, "gate_open_rate")
    w_row = _warp_row_macs(geom)
    breakdown = {k: 0.0 for k in STAGES}
    breakdown["embedding"] = n * PATCH_DIM * d + sum(kept) * PATCH_DIM * d
    breakdown["i_frame_msa"] = l * msa_macs(n, 0, d)
    for g in opens:
        for k in kept:
            breakdown["p_frame_msa"] += (1 - g) * msa_macs(k, 1, d) \
                + g * msa_macs(k, 9, d)
            breakdown["patchwise_warp"] += g * (n - k) * w_row
    breakdown["global_warp"] = l * (t - 1) * _context_mlp_macs(geom)
    breakdown["routing"] = l * (t - 1) * _context_mlp_macs(geom)
    kv_layers = sum(1.0 - (1.0 - g) ** (t - 1) for g in opens)
    if t > 1:
        breakdown["patchwise_warp"] += (kv_layers + 1) * _kv_macs(geom)
        breakdown["patchwise_warp"] += sum(n - k for k in kept) * w_row
    if include_selection:
        cnn, mlp = _selection_macs(geom)
        breakdown["selection_cnn"] = cnn
        breakdown["selector_mlp"] = mlp
    scalar_f = float(kept_fraction) if np.isscalar(kept_fraction) else \
        float(np.mean([k / n for k in kept])) if kept else 0.0
    scalar_g = float(gate_open_rate) if np.isscalar(gate_open_rate) else \
        float(np.mean(opens))
    return _report(breakdown, {"kept_fraction": scalar_f,
                               "gate_open_rate": scalar_g,
                               "geometry": geom.to_dict()})


def exact_cost(geom: Geometry, kept_counts: list[int],
               open_pattern: list[tuple[int, int]],
               include_selection: bool = True) -> CostReport:
    """Cost of one concrete run: integer kept counts, explicit open set.

    ``open_pattern`` holds (layer, frame) pairs with frame >= 1; this is
    the exact accounting the runtime counter should reproduce MAC for MAC.
    """
    n, d, l, t = geom.patch_count, geom.dim, geom.layers, geom.frames
    if len(kept_counts) != max(t - 1, 0):
        raise ValidationError(f"need {t - 1} kept counts, got {len(kept_counts)}")
    for k in kept_counts:
        if not 0 <= k <= n:
            raise ValidationError(f"kept count {k} outside [0, {n}]")
    open_set = set()
    for layer, frame in open_pattern:
        if not (0 <= layer < l and 1 <= frame < t):
            raise ValidationError(f"open entry ({layer}, {frame}) out of range")
        open_set.add((layer, frame))
    w_row = _warp_row_macs(geom)
    breakdown = {k: 0.0 for k in STAGES}
    breakdown["embedding"] = n * PATCH_DIM * d + sum(kept_counts) * PATCH_DIM * d
    breakdown["i_frame_msa"] = l * msa_macs(n, 0, d)
    breakdown["global_warp"] = l * (t - 1) * _context_mlp_macs(geom)
    breakdown["routing"] = l * (t - 1) * _context_mlp_macs(geom)
    for layer in range(l):
        layer_opens = [f for f in range(1, t) if (layer, f) in open_set]
        if layer_opens:
            breakdown["patchwise_warp"] += _kv_macs(geom)
        for frame in range(1, t):
            k = kept_counts[frame - 1]
            if (layer, frame) in open_set:
                breakdown["patchwise_warp"] += (n - k) * w_row
                breakdown["p_frame_msa"] += msa_macs(k, 9, d)
            else:
                breakdown["p_frame_msa"] += msa_macs(k, 1, d)
    if t > 1:
        breakdown["patchwise_warp"] += _kv_macs(geom)
        breakdown["patchwise_warp"] += sum(n - k for k in kept_counts) * w_row
    if include_selection:
        cnn, mlp = _selection_macs(geom)
        breakdown["selection_cnn"] = cnn
        breakdown["selector_mlp"] = mlp
    mean_f = float(np.mean([k / n for k in kept_counts])) if kept_counts else 0.0
    rate = len(open_set) / (l * (t - 1)) if t > 1 else 0.0
    return _report(breakdown, {"kept_fraction": mean_f,
                               "gate_open_rate": rate,
                               "geometry": geom.to_dict()})


def runtime_counter_report(counter: MacCounter, geom: Geometry,
                           kept_counts: list[int],
                           open_pattern: list[tuple[int, int]],
                           include_selection: bool = True) -> CostReport:
    """Compare a live counter against the exact cost of the same run."""
    if counter is None or counter.total == 0:
        raise ValidationError("runtime report needs a counter with recorded MACs")
    analytic = exact_cost(geom, kept_counts, open_pattern, include_selection)
    return CostReport(
        analytic_gmacs=analytic.analytic_gmacs,
        counted_gmacs=counter.total / 1e9,
        breakdown=analytic.breakdown,
        inputs=analytic.inputs,
        uncounted=dict(counter.uncounted),
    )


def bisect_kept_fraction(geom: Geometry, target_gmacs: float,
                         gate_open_rate: float = 0.0,
                         bounds: tuple[float, float] = (0.0, 1.0),
                         include_selection: bool = True,
                         iters: int = 80) -> tuple[float, CostReport]:
    """Uniform kept_fraction whose estimate is closest to the target.

    The estimate is strictly increasing in the fraction, so bisection
    converges; targets outside the reachable range clamp to a bound.
    """
    lo, hi = bounds
    if not 0.0 <= lo < hi <= 1.0:
        raise ValidationError(f"bad bounds {bounds}")
    if target_gmacs <= 0:
        raise ValidationError("target must be positive")

    def value(f):
        return estimate_ours(geom, f, gate_open_rate,
                             include_selection).analytic_gmacs

    if value(lo) >= target_gmacs:
        f = lo
    elif value(hi) <= target_gmacs:
        f = hi
    else:
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            if value(mid) < target_gmacs:
                lo = mid
            else:
                hi = mid
        f = 0.5 * (lo + hi)
    return f, estimate_ours(geom, f, gate_open_rate, include_selection)
