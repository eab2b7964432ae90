"""Command-line surface for the patch-sparse video pipeline.

Subcommands cover dataset synthesis, GOP encoding, patch selection,
sparse/dense forward passes, toy two-stage training, analytic cost
estimation, gradient checking, and the routing-threshold sweep.

Exit codes: 0 success, 2 usage, 3 I/O or parse failure, 4 numerical
failure, 5 contract violation. The environment variable SPARSEPATCH_SEED
overrides --seed for any command that accepts one.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import numcore as nc
from .costmodel import (
    Geometry,
    STAGES,
    bisect_kept_fraction,
    estimate_ours,
    estimate_vit,
    exact_cost,
)
from .errors import (
    NumericalError,
    ParseError,
    SparsepatchError,
    UsageError,
    ValidationError,
)
from .gopcodec import decode_gop, encode_gop, read_gop, write_gop
from .numcore import ParamSet, Tensor
from .psformer import (
    PsformerConfig,
    dense_forward,
    init_psformer_params,
    psformer_forward,
)
from .selector import (
    init_selector_params,
    score_gate,
    select_patches,
    shallow_3dcnn,
)
from .training import (
    TrainConfig,
    cross_entropy,
    error_constraint_loss,
    hard_triplet,
    log_to_csv,
    rank1,
    two_stage_train,
)
from .videoio import RawClip, SynthSpec, read_rawvid, synth_clip, write_rawvid

GRADCHECK_TOL = 1e-4

# every recognized config key with its type and default; unknown keys are
# rejected so typos fail loudly instead of silently using a default
CONFIG_SCHEMA: dict[str, tuple[type, object]] = {
    "identities": (int, 10),
    "clips_per_identity": (int, 8),
    "height": (int, 64),
    "width": (int, 64),
    "frames": (int, 8),
    "background": (str, "textured"),
    "motion_amplitude": (float, 2.0),
    "dim": (int, 64),
    "layers": (int, 4),
    "heads": (int, 4),
    "threshold": (float, 0.5),
    "stage1_epochs": (int, 20),
    "stage2_epochs": (int, 20),
    "learning_rate": (float, 5e-4),
    "weight_decay": (float, 5e-4),
    "decay_every": (int, 40),
    "decay_factor": (float, 0.1),
    "triplet_margin": (float, 0.3),
    "noise_samples": (int, 4),
    "batch_identities": (int, 4),
    "batch_clips": (int, 2),
    "error_weight": (float, 1.0),
    "heldout_clips": (int, 2),
    "eval_every": (int, 1),
    "seed": (int, 0),
}


def parse_config_text(text: str) -> dict:
    """key=value lines with # comments; unknown keys and bad values reject."""
    values = {key: default for key, (_, default) in CONFIG_SCHEMA.items()}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in CONFIG_SCHEMA:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        kind, _ = CONFIG_SCHEMA[key]
        try:
            values[key] = kind(val)
        except ValueError:
            raise UsageError(
                f"config line {lineno}: {key} needs {kind.__name__}, got {val!r}"
            ) from None
    return values


def load_config(path: str | None) -> dict:
    if path is None:
        return {key: default for key, (_, default) in CONFIG_SCHEMA.items()}
    return parse_config_text(Path(path).read_text())


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _spec_from_config(cfg: dict, seed: int) -> SynthSpec:
    return SynthSpec(
        identity_count=cfg["identities"],
        clips_per_identity=cfg["clips_per_identity"],
        height=cfg["height"],
        width=cfg["width"],
        frames=cfg["frames"],
        background=cfg["background"],
        motion_amplitude=cfg["motion_amplitude"],
        seed=seed,
    )


def _model_from_config(cfg: dict) -> PsformerConfig:
    return PsformerConfig(
        dim=cfg["dim"],
        layers=cfg["layers"],
        heads=cfg["heads"],
        grid_h=cfg["height"] // 16,
        grid_w=cfg["width"] // 16,
        max_frames=cfg["frames"],
    )


def _resolve_seed(args, cfg: dict | None = None) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    if cfg is not None:
        return cfg["seed"]
    return 0


def _load_or_init_params(args, model: PsformerConfig, seed: int) -> ParamSet:
    if getattr(args, "params", None):
        params = ParamSet.load_npz(args.params)
        if "embed.w" in params:
            got = params["embed.w"].shape
            if got != (768, model.dim):
                raise ValidationError(
                    f"checkpoint embed.w is {got}, model wants (768, {model.dim})")
        return params
    params = init_psformer_params(model, seed=seed)
    init_selector_params(seed=seed + 1, params=params)
    return params


def _params_fingerprint(params: ParamSet) -> str:
    digest = hashlib.sha256()
    for name, tensor in params.items():
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(tensor.data).tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    seed = _resolve_seed(args, cfg)
    spec = _spec_from_config(cfg, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for ident in range(spec.identity_count):
        for clip_idx in range(spec.clips_per_identity):
            clip = synth_clip(spec, identity=ident, clip_seed=clip_idx)
            name = f"id{ident:03d}_clip{clip_idx:02d}.rv1"
            write_rawvid(clip, out / name)
            files.append({
                "path": name,
                "identity": ident,
                "clip": clip_idx,
                "sha256": hashlib.sha256((out / name).read_bytes()).hexdigest(),
            })
    manifest = {
        "spec": {
            "identities": spec.identity_count,
            "clips_per_identity": spec.clips_per_identity,
            "height": spec.height,
            "width": spec.width,
            "frames": spec.frames,
            "background": spec.background,
            "motion_amplitude": spec.motion_amplitude,
            "seed": spec.seed,
        },
        "files": files,
    }
    (out / "manifest.json").write_text(_canonical_json(manifest))
    print(f"wrote {len(files)} clips and manifest.json under {out}")
    return 0


def cmd_encode(args) -> int:
    clip = read_rawvid(args.infile)
    gop = encode_gop(clip)
    decoded = decode_gop(gop)
    if not np.array_equal(decoded.pixels, clip.pixels):
        raise NumericalError("encode/decode round trip is not bit exact")
    write_gop(gop, args.out)
    print(f"encoded {args.infile}: {gop.frames} frames, "
          f"grid {gop.i_frame.grid_h}x{gop.i_frame.grid_w} -> {args.out}")
    return 0


def cmd_select(args) -> int:
    gop = read_gop(args.gop)
    if args.clip:
        raw = read_rawvid(args.clip)
        if not np.array_equal(decode_gop(gop).pixels, raw.pixels):
            raise ValidationError("gop does not decode to the given clip")
    model = PsformerConfig(
        dim=args.dim, layers=args.layers, heads=args.heads,
        grid_h=gop.i_frame.grid_h, grid_w=gop.i_frame.grid_w,
        max_frames=max(gop.frames, 1))
    seed = _resolve_seed(args)
    params = _load_or_init_params(args, model, seed)
    counter = nc.MacCounter()
    with nc.mac_counting(counter):
        selection = select_patches(gop, params, mode=args.mode, seed=seed)
    payload = selection.summary()
    payload["counted_macs"] = counter.total
    payload["seed"] = seed
    Path(args.out).write_text(_canonical_json(payload))
    print(f"selection: kept {payload['kept_per_frame']} "
          f"(fraction {payload['kept_fraction']}) -> {args.out}")
    return 0


def cmd_forward(args) -> int:
    gop = read_gop(args.gop)
    if args.clip:
        raw = read_rawvid(args.clip)
        if not np.array_equal(decode_gop(gop).pixels, raw.pixels):
            raise ValidationError("gop does not decode to the given clip")
    model = PsformerConfig(
        dim=args.dim, layers=args.layers, heads=args.heads,
        grid_h=gop.i_frame.grid_h, grid_w=gop.i_frame.grid_w,
        max_frames=max(gop.frames, 1))
    seed = _resolve_seed(args)
    params = _load_or_init_params(args, model, seed)
    counter = nc.MacCounter()
    with nc.mac_counting(counter):
        if args.dense:
            res = dense_forward(gop, params, model)
            kept = [model.patch_count] * max(gop.frames - 1, 0)
        else:
            selection = select_patches(gop, params, mode="infer", seed=seed)
            res = psformer_forward(gop, selection, params, model,
                                   threshold=args.threshold)
            kept = selection.kept_counts
    feature = res.feature.data[0]
    if not np.all(np.isfinite(feature)):
        raise NumericalError("forward produced non-finite feature values")
    payload = {
        "feature": [float(v) for v in feature],
        "dense": bool(args.dense),
        "threshold": args.threshold,
        "seed": seed,
        "kept_per_frame": kept,
        "open_rate": res.open_rate,
        "routing": [
            {"layer": r.layer, "frame": r.frame, "cost": r.cost,
             "open": r.open_path}
            for r in res.routing
        ],
        "counted_macs": counter.total,
        "macs_by_stage": dict(sorted(counter.by_stage.items())),
        "uncounted": dict(sorted(counter.uncounted.items())),
    }
    Path(args.out).write_text(_canonical_json(payload))
    print(f"feature dim {len(payload['feature'])}, open_rate "
          f"{payload['open_rate']:.3f}, {counter.total / 1e6:.1f} MMACs "
          f"-> {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = _resolve_seed(args, cfg)
    spec = _spec_from_config(cfg, seed)
    config = TrainConfig(
        stage1_epochs=cfg["stage1_epochs"],
        stage2_epochs=cfg["stage2_epochs"],
        learning_rate=cfg["learning_rate"],
        decay_every=cfg["decay_every"],
        decay_factor=cfg["decay_factor"],
        weight_decay=cfg["weight_decay"],
        triplet_margin=cfg["triplet_margin"],
        noise_samples=cfg["noise_samples"],
        batch_identities=cfg["batch_identities"],
        batch_clips=cfg["batch_clips"],
        error_weight=cfg["error_weight"],
        threshold=cfg["threshold"],
        heldout_clips=cfg["heldout_clips"],
        seed=seed,
    )
    model = _model_from_config(cfg)
    result = two_stage_train(spec, config, model=model,
                             eval_every=cfg["eval_every"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.params.save_npz(out / "params.npz")
    (out / "log.csv").write_text(log_to_csv(result.log))
    summary = {
        "final_heldout_rank1": result.final_heldout_rank1,
        "final_train_rank1": result.log[-1]["train_rank1"] if result.log else 0.0,
        "epochs": config.total_epochs,
        "stage1_epochs": config.stage1_epochs,
        "stage2_epochs": config.stage2_epochs,
        "seed": seed,
        "model": {"dim": model.dim, "layers": model.layers,
                  "heads": model.heads},
        "params_sha256": _params_fingerprint(result.params),
    }
    (out / "result.json").write_text(_canonical_json(summary))
    print(f"trained {config.total_epochs} epochs, heldout rank-1 "
          f"{summary['final_heldout_rank1']:.3f} -> {out}")
    return 0


def _print_cost_table(report, file=None) -> None:
    file = file if file is not None else sys.stdout
    print(f"{'stage':<16} {'GMACs':>12}", file=file)
    for stage in STAGES:
        print(f"{stage:<16} {report.breakdown.get(stage, 0.0):>12.4f}",
              file=file)
    print(f"{'total':<16} {report.analytic_gmacs:>12.4f}", file=file)
    if report.counted_gmacs is not None:
        print(f"{'counted':<16} {report.counted_gmacs:>12.4f}", file=file)


def cmd_macs(args) -> int:
    geom = Geometry(height=args.height, width=args.width, frames=args.frames,
                    dim=args.dim, layers=args.layers, heads=args.heads)
    bisect_info = None
    if args.baseline:
        report = estimate_vit(geom)
    elif args.target is not None:
        fraction, report = bisect_kept_fraction(
            geom, args.target, gate_open_rate=args.open_rate,
            bounds=(args.lo, args.hi),
            include_selection=not args.no_selection)
        bisect_info = {
            "target_gmacs": args.target,
            "kept_fraction": fraction,
            "achieved_gmacs": report.analytic_gmacs,
            "relative_error": abs(report.analytic_gmacs - args.target)
            / args.target,
        }
    else:
        report = estimate_ours(geom, args.kept_fraction, args.open_rate,
                               include_selection=not args.no_selection)
    if args.json:
        payload = report.to_json_dict()
        if bisect_info is not None:
            payload["bisect"] = bisect_info
        sys.stdout.write(_canonical_json(payload))
    else:
        _print_cost_table(report)
        if bisect_info is not None:
            print(f"{'bisect f':<16} {bisect_info['kept_fraction']:>12.6f}")
            print(f"{'target':<16} {bisect_info['target_gmacs']:>12.4f}")
    return 0


def _tiny_gradcheck_setup(seed: int):
    spec = SynthSpec(identity_count=2, clips_per_identity=1, height=32,
                     width=64, frames=2, background="textured",
                     motion_amplitude=2.0, seed=seed)
    clip = synth_clip(spec, identity=0, clip_seed=1)
    return encode_gop(clip)


def _gradcheck_selector(seed: int) -> list[tuple[str, float]]:
    """FD-check the selection network with frozen auxiliary features.

    Saliency weights and residual features are captured once from a
    reference pass and held constant, so the checked function is smooth:
    conv parameters reach the loss through the semantics maps, MLP
    parameters through the scores. The structured init leaves many ReLU
    pre-activations at exactly zero, where central differences see half
    a slope; jittering every parameter first makes the point generic.
    """
    gop = _tiny_gradcheck_setup(seed)
    params = init_selector_params(seed=seed)
    for name, tensor in params.items():
        noise = nc.rng_stream(seed, "gradcheck-jitter", name)
        tensor.data += noise.standard_normal(tensor.data.shape) * 0.03
    reference = select_patches(gop, params, mode="infer", seed=0)
    base = gop.i_frame.patches
    frozen = []
    for t in range(1, gop.frames):
        sal = reference.saliency[t - 1].values.reshape(-1, 1)
        recon = base[gop.motion[t - 1]] + gop.residual[t - 1]
        pool_idx, _ = reference.pool.query(recon)
        prog = recon - reference.pool._buf[pool_idx]
        frozen.append((Tensor(sal),
                       Tensor(gop.residual[t - 1] / 255.0),
                       Tensor(prog / 255.0)))

    def build_loss():
        sem = shallow_3dcnn(decode_gop(gop), params)
        total = None
        for t in range(1, gop.frames):
            sal, residual, prog = frozen[t - 1]
            s_feat = nc.mul(sem.f_maps[t], sal)
            feats = nc.concat_cols([residual, s_feat, prog])
            score = score_gate(feats, params, "infer").score
            part = nc.sum_all(score)
            total = part if total is None else nc.add(total, part)
        return total

    names = ["sel.conv0.w", "sel.conv1.w", "sel.conv2.w", "sel.conv3.w",
             "sel.conv3.b", "sel.mlp0.w", "sel.mlp1.w", "sel.mlp2.w",
             "sel.mlp2.b"]
    errs = nc.grad_check_params(build_loss, params, names, eps=1e-5,
                                max_coords=8, seed=seed)
    return [(f"selector/{n}", e) for n, e in errs.items()]


def _gradcheck_psformer(seed: int) -> list[tuple[str, float]]:
    gop = _tiny_gradcheck_setup(seed)
    model = PsformerConfig(dim=16, layers=1, heads=2, grid_h=2, grid_w=4,
                           max_frames=4)
    params = init_psformer_params(model, seed=seed)
    init_selector_params(seed=seed + 1, params=params)
    selection = select_patches(gop, params, mode="infer", seed=0)
    probe = Tensor(nc.rng_stream(seed, "probe").standard_normal((model.dim, 1)))
    names = ["embed.w", "pos", "layer0.attn.kv.w", "layer0.attn.out.w",
             "layer0.ffn.l1.w", "warp.pw.l1.w", "warp.ev.l1.w",
             "warp.gw.l2.w", "warp.k.w", "warp.v.w"]
    rows = []
    for label, threshold in (("closed", 3.0), ("open", -1.0)):
        def build_loss():
            res = psformer_forward(gop, selection, params, model,
                                   threshold=threshold)
            loss = nc.matmul(res.feature, probe)
            for cur, prev in res.context_pairs:
                loss = nc.add(loss, nc.matmul(nc.mul(cur, prev), probe))
            return nc.sum_all(loss)

        errs = nc.grad_check_params(build_loss, params, names, eps=1e-5,
                                    max_coords=5, seed=seed)
        rows.extend((f"psformer[{label}]/{n}", e) for n, e in errs.items())
    return rows


def _gradcheck_losses(seed: int) -> list[tuple[str, float]]:
    rng = nc.rng_stream(seed, "losses")
    rows = []
    logits = Tensor(rng.standard_normal((6, 5)), requires_grad=True)
    labels = rng.integers(0, 5, size=6)
    rows.append(("losses/cross_entropy",
                 nc.grad_check(lambda t: cross_entropy(t, labels), logits,
                               eps=1e-6)))
    feats = Tensor(rng.standard_normal((6, 8)), requires_grad=True)
    rows.append(("losses/hard_triplet",
                 nc.grad_check(lambda t: hard_triplet(t, [0, 0, 1, 1, 2, 2]),
                               feats, eps=1e-6)))
    model = PsformerConfig(dim=16, layers=1, heads=2, grid_h=2, grid_w=4)
    params = init_psformer_params(model, seed=seed)
    pairs = [(Tensor(rng.standard_normal((1, 16))),
              Tensor(rng.standard_normal((1, 16)))) for _ in range(2)]

    def build_loss():
        return nc.sum_all(error_constraint_loss(pairs, params,
                                                noise_samples=3, seed=seed))

    errs = nc.grad_check_params(
        build_loss, params,
        ["warp.ev.l1.w", "warp.ev.l2.w", "warp.gw.l1.w", "warp.gw.l2.w"],
        eps=1e-6, max_coords=4, seed=seed)
    rows.extend((f"losses/error_constraint/{n}", e) for n, e in errs.items())
    return rows


def cmd_gradcheck(args) -> int:
    seed = _resolve_seed(args)
    modules = {
        "selector": _gradcheck_selector,
        "psformer": _gradcheck_psformer,
        "losses": _gradcheck_losses,
    }
    picked = list(modules) if args.module == "all" else [args.module]
    rows = []
    for name in picked:
        rows.extend(modules[name](seed))
    width = max(len(r[0]) for r in rows)
    worst = 0.0
    for target, err in rows:
        status = "ok" if err < GRADCHECK_TOL else "FAIL"
        print(f"{target:<{width}} {err:12.3e} {status}")
        worst = max(worst, err)
    print(f"{'worst':<{width}} {worst:12.3e} "
          f"{'ok' if worst < GRADCHECK_TOL else 'FAIL'}")
    if worst >= GRADCHECK_TOL:
        raise NumericalError(
            f"gradient check failed: worst relative error {worst:.3e}")
    return 0


def cmd_sweep_s(args) -> int:
    if args.s_step <= 0:
        raise UsageError("--step must be positive")
    if args.s_to < args.s_from:
        raise UsageError("--to must be >= --from")
    cfg = load_config(args.config)
    seed = _resolve_seed(args, cfg)
    spec = _spec_from_config(cfg, seed)
    model = _model_from_config(cfg)
    params = _load_or_init_params(args, model, seed)
    geom = Geometry(height=spec.height, width=spec.width, frames=spec.frames,
                    dim=model.dim, layers=model.layers, heads=model.heads)

    # evaluate on the held-out clips of the configured dataset
    first_heldout = spec.clips_per_identity - cfg["heldout_clips"]
    clips = []
    for ident in range(spec.identity_count):
        for clip_idx in range(first_heldout, spec.clips_per_identity):
            raw = synth_clip(spec, identity=ident, clip_seed=clip_idx)
            clips.append((encode_gop(raw), ident))
    if len(clips) < 2:
        raise ValidationError("sweep needs at least two held-out clips")

    selections = [
        (gop, ident, select_patches(gop, params, mode="infer", seed=seed))
        for gop, ident in clips
    ]
    thresholds = []
    s = args.s_from
    while s <= args.s_to + 1e-9:
        thresholds.append(round(s, 10))
        s += args.s_step

    lines = ["s,open_rate,gmacs,heldout_rank1"]
    for s in thresholds:
        counter = nc.MacCounter()
        feats, labels, rates = [], [], []
        with nc.mac_counting(counter):
            for gop, ident, selection in selections:
                res = psformer_forward(gop, selection, params, model,
                                       threshold=s)
                feats.append(res.feature.data[0])
                labels.append(ident)
                rates.append(res.open_rate)
        gmacs = counter.total / len(selections) / 1e9
        score = rank1(np.vstack(feats), labels)
        lines.append(f"{s:.4f},{float(np.mean(rates)):.6f},"
                     f"{gmacs:.6f},{score:.6f}")
    text = "\n".join(lines) + "\n"
    Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsepatch",
        description="patch-sparse video feature pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a labeled synthetic dataset")
    p.add_argument("--spec", "--config", dest="config", default=None,
                   help="key=value run config describing the dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("encode", help="encode a raw clip into a GOP file")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("select", help="run patch selection over a GOP file")
    p.add_argument("--gop", required=True)
    p.add_argument("--clip", default=None,
                   help="optional raw clip to cross-check the GOP against")
    p.add_argument("--params", default=None)
    p.add_argument("--mode", choices=("infer", "train"), default="infer")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    _add_model_flags(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("forward", help="sparse or dense forward pass")
    p.add_argument("--gop", required=True)
    p.add_argument("--clip", default=None,
                   help="optional raw clip to cross-check the GOP against")
    p.add_argument("--params", default=None)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--dense", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    _add_model_flags(p)
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("train", help="two-stage toy training run")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("macs", help="analytic MACs estimate")
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--dim", type=int, default=768)
    p.add_argument("--layers", type=int, default=12)
    p.add_argument("--heads", type=int, default=12)
    p.add_argument("--kept-fraction", type=float, default=0.25)
    p.add_argument("--open-rate", type=float, default=0.0)
    p.add_argument("--baseline", action="store_true",
                   help="price the plain per-frame transformer instead")
    p.add_argument("--no-selection", action="store_true",
                   help="exclude the selection network from the estimate")
    p.add_argument("--target", type=float, default=None,
                   help="bisect kept fraction to hit this GMAC total")
    p.add_argument("--lo", type=float, default=0.0)
    p.add_argument("--hi", type=float, default=1.0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_macs)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--module", choices=("all", "selector", "psformer",
                                        "losses"), default="all")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep-s", help="routing threshold sweep CSV")
    p.add_argument("--from", dest="s_from", type=float, default=0.4)
    p.add_argument("--to", dest="s_to", type=float, default=0.9)
    p.add_argument("--step", dest="s_step", type=float, default=0.1)
    p.add_argument("--config", default=None)
    p.add_argument("--params", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_s)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    env_seed = os.environ.get("SPARSEPATCH_SEED")
    if env_seed is not None and hasattr(args, "seed"):
        try:
            args.seed = int(env_seed)
        except ValueError:
            print(f"error: SPARSEPATCH_SEED must be an integer, got {env_seed!r}",
                  file=sys.stderr)
            return 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except SparsepatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
