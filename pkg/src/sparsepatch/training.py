"""Losses and the two-stage optimization loop over synthetic identities.

Stage 1 trains the transformer densely: every frame contributes all of
its patches and the per-layer context token is the true mean of that
frame's tokens. Stage 2 switches to the sparse pipeline (selection,
warping, routing) and adds a ranking penalty that teaches the context
reconstruction cost to grow with the amount of noise injected into the
context it reconstructs, which is what makes the cost usable as a
routing signal.

Identity supervision uses a linear classifier head (cross entropy) plus
a batch-hard triplet loss on the clip features. Batches follow the P x K
convention: a handful of identities, a fixed number of clips each.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ValidationError
from .gopcodec import GopClip, encode_gop
from .numcore import ParamSet, Tensor
from .psformer import (
    PsformerConfig,
    _ev,
    _gw,
    dense_forward,
    init_psformer_params,
    psformer_forward,
)
from .selector import init_selector_params, select_patches
from .videoio import SynthSpec, synth_clip

__all__ = [
    "TrainConfig",
    "ClipRecord",
    "TrainResult",
    "cross_entropy",
    "hard_triplet",
    "error_constraint_loss",
    "Adam",
    "lr_for_epoch",
    "make_dataset",
    "extract_feature",
    "rank1",
    "two_stage_train",
    "log_to_csv",
]


@dataclass(frozen=True)
class TrainConfig:
    stage1_epochs: int = 20
    stage2_epochs: int = 20
    learning_rate: float = 5e-4
    decay_every: int = 40
    decay_factor: float = 0.1
    weight_decay: float = 5e-4
    triplet_margin: float = 0.3
    noise_samples: int = 4
    batch_identities: int = 4
    batch_clips: int = 2
    error_weight: float = 1.0
    threshold: float = 0.5
    heldout_clips: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValidationError("epoch counts must be >= 0")
        if self.noise_samples < 2:
            raise ValidationError("noise_samples must be >= 2")
        if self.batch_identities < 2 or self.batch_clips < 2:
            raise ValidationError(
                "triplet mining needs >= 2 identities and >= 2 clips each")
        if self.heldout_clips < 0:
            raise ValidationError("heldout_clips must be >= 0")

    @property
    def total_epochs(self) -> int:
        return self.stage1_epochs + self.stage2_epochs


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log softmax probability of the true class."""
    shifted = nc.sub(logits, nc.rowmax_detached(logits))
    log_z = nc.log_(nc.rowsum(nc.exp_(shifted)))
    log_p = nc.sub(nc.gather_labels(shifted, labels), log_z)
    return nc.neg(nc.mean_all(log_p))


def hard_triplet(features: Tensor, labels, margin: float = 0.3) -> Tensor:
    """Batch-hard triplet loss with Euclidean distances.

    Per anchor: hardest (farthest) positive minus hardest (closest)
    negative plus margin, hinged at zero, averaged over anchors.
    """
    labels = np.asarray(labels).ravel()
    b = features.shape[0]
    if labels.shape[0] != b:
        raise ValidationError(f"need {b} labels, got {labels.shape[0]}")
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(b, dtype=bool)
    neg_mask = ~same
    if not pos_mask.any(axis=1).all():
        raise ValidationError("some anchor has no positive in the batch")
    if not neg_mask.any(axis=1).all():
        raise ValidationError("some anchor has no negative in the batch")

    sq = nc.rowsum(nc.mul(features, features))
    cross = nc.matmul(features, nc.transpose(features))
    d2 = nc.add(nc.add(sq, nc.transpose(sq)), nc.scale(cross, -2.0))
    dist = nc.sqrt_(nc.add_const(nc.relu(d2), 1e-12))

    hardest_pos = nc.rowmax(nc.add(dist, Tensor(np.where(pos_mask, 0.0, -1e18))))
    hardest_neg = nc.rowmin(nc.add(dist, Tensor(np.where(neg_mask, 0.0, 1e18))))
    hinge = nc.relu(nc.add_const(nc.sub(hardest_pos, hardest_neg), margin))
    return nc.mean_all(hinge)


def error_constraint_loss(context_pairs, params: ParamSet,
                          noise_samples: int = 4, seed: int = 0) -> Tensor:
    """Ranking penalty tying reconstruction cost to injected noise level.

    For each layer's (current, previous) context pair, blend the current
    context with standard Gaussian noise at ``noise_samples`` sorted
    mixing levels, push each blend through the context-evolution and
    global-warp networks, and penalize every sample pair whose
    reconstruction cost fails to increase with the mixing level.
    """
    if noise_samples < 2:
        raise ValidationError("noise_samples must be >= 2")
    total = None
    for layer, (c_cur, c_prev) in enumerate(context_pairs):
        rng = nc.rng_stream(seed, "errloss", layer)
        alphas = np.sort(rng.uniform(0.0, 1.0, size=noise_samples))
        costs = []
        for alpha in alphas:
            noise = Tensor(rng.standard_normal((1, c_cur.shape[1])))
            mixed = nc.add(nc.scale(c_cur, 1.0 - float(alpha)),
                           nc.scale(noise, float(alpha)))
            evolved = _ev(nc.concat_cols([mixed, c_prev]), params)
            recon = _gw(nc.concat_cols([evolved, c_prev]), params)
            costs.append(nc.cosine_distance(recon, c_cur))
        for i in range(noise_samples):
            for j in range(i + 1, noise_samples):
                term = nc.relu(nc.sub(costs[i], costs[j]))
                total = term if total is None else nc.add(total, term)
    if total is None:
        return Tensor(np.zeros((1, 1)))
    return total


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adaptive moment estimation over a ParamSet.

    Only parameters that received a gradient in the current step are
    touched; everything else keeps its value and its moment state. The
    weight decay is classic L2 (added to the gradient).
    """

    def __init__(self, params: ParamSet, lr: float = 5e-4,
                 betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 5e-4):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._state: dict[str, list] = {}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            if name not in self._state:
                self._state[name] = [np.zeros_like(p.data),
                                     np.zeros_like(p.data), 0]
            m, v, t = self._state[name]
            t += 1
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self._state[name] = [m, v, t]
            m_hat = m / (1.0 - b1 ** t)
            v_hat = v / (1.0 - b2 ** t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def lr_for_epoch(base: float, epoch: int, decay_every: int = 40,
                 decay_factor: float = 0.1) -> float:
    return base * decay_factor ** (epoch // decay_every)


# ---------------------------------------------------------------------------
# dataset and evaluation
# ---------------------------------------------------------------------------


@dataclass
class ClipRecord:
    gop: GopClip
    identity: int
    clip: int


def make_dataset(spec: SynthSpec) -> list[ClipRecord]:
    """Render and encode every (identity, clip) combination of a SynthSpec."""
    records = []
    for ident in range(spec.identity_count):
        for clip in range(spec.clips_per_identity):
            raw = synth_clip(spec, identity=ident, clip_seed=clip)
            records.append(ClipRecord(gop=encode_gop(raw), identity=ident,
                                      clip=clip))
    return records


def extract_feature(gop: GopClip, params: ParamSet, model: PsformerConfig,
                    mode: str = "sparse", threshold: float = 0.5,
                    seed: int = 0) -> np.ndarray:
    """Clip feature by the dense (stage 1) or sparse (stage 2) path."""
    if mode == "dense":
        return dense_forward(gop, params, model).feature.data.copy()
    if mode != "sparse":
        raise ValidationError(f"unknown feature mode {mode!r}")
    sel = select_patches(gop, params, mode="infer", seed=seed)
    res = psformer_forward(gop, sel, params, model, threshold=threshold)
    return res.feature.data.copy()


def rank1(features: np.ndarray, labels) -> float:
    """Leave-one-out nearest-neighbor identity accuracy."""
    labels = np.asarray(labels).ravel()
    m = features.shape[0]
    if m < 2:
        raise ValidationError("rank-1 needs at least two samples")
    d2 = ((features[:, None, :] - features[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    nearest = d2.argmin(axis=1)
    return float((labels[nearest] == labels).mean())


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ParamSet
    model: PsformerConfig
    log: list = field(default_factory=list)

    @property
    def final_heldout_rank1(self) -> float:
        return self.log[-1]["heldout_rank1"] if self.log else 0.0


def _pk_batches(records: list[ClipRecord], config: TrainConfig,
                rng: np.random.Generator) -> list[list[ClipRecord]]:
    """Partition identities into P-sized groups, K random clips each."""
    by_id: dict[int, list[ClipRecord]] = {}
    for rec in records:
        by_id.setdefault(rec.identity, []).append(rec)
    idents = sorted(by_id)
    if len(idents) < 2:
        raise ValidationError("training needs >= 2 identities")
    for ident in idents:
        if len(by_id[ident]) < config.batch_clips:
            raise ValidationError(
                f"identity {ident} has fewer than {config.batch_clips} clips")
    order = rng.permutation(idents)
    batches = []
    p = config.batch_identities
    for start in range(0, len(order), p):
        group = order[start:start + p]
        if len(group) < 2:
            continue  # a lone trailing identity cannot form triplets
        batch = []
        for ident in group:
            clips = by_id[int(ident)]
            picks = rng.choice(len(clips), size=config.batch_clips,
                               replace=False)
            batch.extend(clips[i] for i in picks)
        batches.append(batch)
    return batches


def _eval_rank1(records: list[ClipRecord], params: ParamSet,
                model: PsformerConfig, mode: str, threshold: float) -> float:
    feats = np.vstack([
        extract_feature(r.gop, params, model, mode=mode, threshold=threshold)
        for r in records])
    return rank1(feats, [r.identity for r in records])


def two_stage_train(spec: SynthSpec, config: TrainConfig,
                    model: PsformerConfig | None = None,
                    eval_every: int = 1) -> TrainResult:
    """Dense warm-up then sparse fine-tuning over a synthetic dataset.

    Returns the trained parameters plus a per-epoch convergence log with
    rank-1 scores on a training subsample and on the held-out clips.
    """
    if model is None:
        model = PsformerConfig(dim=64, layers=4, heads=4,
                               grid_h=spec.height // 16,
                               grid_w=spec.width // 16,
                               max_frames=spec.frames)
    records = make_dataset(spec)
    if config.heldout_clips >= spec.clips_per_identity:
        raise ValidationError("heldout_clips must leave clips to train on")
    train = [r for r in records
             if r.clip < spec.clips_per_identity - config.heldout_clips]
    heldout = [r for r in records
               if r.clip >= spec.clips_per_identity - config.heldout_clips]
    if not train:
        raise ValidationError("empty training split")

    params = init_psformer_params(model, seed=config.seed)
    init_selector_params(seed=config.seed + 1, params=params)
    head_rng = nc.rng_stream(config.seed, "init", "cls")
    params.add("cls.w", head_rng.standard_normal(
        (model.dim, spec.identity_count)) / np.sqrt(model.dim))
    params.add("cls.b", np.zeros((1, spec.identity_count)))

    opt = Adam(params, lr=config.learning_rate,
               weight_decay=config.weight_decay)
    # fixed subsample keeps the per-epoch train metric comparable over time
    train_probe = [r for r in train if r.clip < 2]
    log: list[dict] = []
    step = 0

    for epoch in range(config.total_epochs):
        stage = 1 if epoch < config.stage1_epochs else 2
        lr = lr_for_epoch(config.learning_rate, epoch, config.decay_every,
                          config.decay_factor)
        batch_rng = nc.rng_stream(config.seed, "batch", epoch)
        sums = {"cent": 0.0, "tri": 0.0, "err": 0.0}
        batches = _pk_batches(train, config, batch_rng)
        for batch in batches:
            params.zero_grad()
            labels = [r.identity for r in batch]
            with nc.tape() as t:
                feats = []
                err_terms = []
                for slot, rec in enumerate(batch):
                    if stage == 1:
                        res = dense_forward(rec.gop, params, model)
                    else:
                        sel = select_patches(rec.gop, params, mode="train",
                                             seed=step * 131 + slot)
                        res = psformer_forward(rec.gop, sel, params, model,
                                               threshold=config.threshold)
                    feats.append(res.feature)
                    if stage == 2 and config.error_weight > 0.0:
                        err_terms.append(error_constraint_loss(
                            res.context_pairs, params,
                            noise_samples=config.noise_samples,
                            seed=step * 131 + slot))
                f = nc.concat_rows(feats)
                logits = nc.linear(f, params["cls.w"], params["cls.b"])
                l_cent = cross_entropy(logits, labels)
                l_tri = hard_triplet(f, labels, config.triplet_margin)
                loss = nc.add(l_cent, l_tri)
                if err_terms:
                    l_err = nc.scale(
                        _sum_tensors(err_terms),
                        config.error_weight / len(err_terms))
                    loss = nc.add(loss, l_err)
                    sums["err"] += float(l_err.data[0, 0])
                t.backward(loss)
            opt.step(lr=lr)
            sums["cent"] += float(l_cent.data[0, 0])
            sums["tri"] += float(l_tri.data[0, 0])
            step += 1

        nb = max(1, len(batches))
        row = {
            "epoch": epoch,
            "stage": stage,
            "loss_cent": sums["cent"] / nb,
            "loss_tri": sums["tri"] / nb,
            "loss_error": sums["err"] / nb,
            "train_rank1": float("nan"),
            "heldout_rank1": float("nan"),
        }
        last = epoch == config.total_epochs - 1
        if last or (eval_every > 0 and epoch % eval_every == 0):
            mode = "dense" if stage == 1 else "sparse"
            row["train_rank1"] = _eval_rank1(train_probe, params, model,
                                             mode, config.threshold)
            if heldout:
                row["heldout_rank1"] = _eval_rank1(heldout, params, model,
                                                   mode, config.threshold)
        log.append(row)

    return TrainResult(params=params, model=model, log=log)


def _sum_tensors(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = nc.add(total, t)
    return total


def log_to_csv(log: list[dict]) -> str:
    cols = ["epoch", "stage", "loss_cent", "loss_tri", "loss_error",
            "train_rank1", "heldout_rank1"]
    lines = [",".join(cols)]
    for row in log:
        lines.append(",".join(
            f"{row[c]:.6f}" if isinstance(row[c], float) else str(row[c])
            for c in cols))
    return "\n".join(lines) + "\n"
