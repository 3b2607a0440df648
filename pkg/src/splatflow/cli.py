"""Command-line interface.

Subcommands: gen-scene, render, flow, fit, gradcheck, eval. Exit codes are 0
on success, 1 for usage or configuration problems, and 2 for numerical
failures (divergence, failed gradient checks).

Scene datasets on disk are one directory per view (frame PNGs plus .flo
reference flows), a ground-truth checkpoint, and the resolved config; `fit`
reads those files back rather than regenerating in memory, so the formats are
exercised end to end.
"""

from __future__ import annotations

import argparse
import math
import sys
import time
from pathlib import Path

import numpy as np

from .backward import GRADCHECK_TOLERANCE, gradcheck
from .dynamics import (
    DynamicField,
    SceneSequence,
    TrainConfig,
    field_at,
    fit,
    psnr,
    scene_extent,
    total_loss,
)
from .flow import gaussian_flow, make_pair
from .formats import (
    flow_to_color,
    load_yaml,
    merge_config,
    read_checkpoint,
    read_flo,
    read_png,
    save_yaml,
    set_config_value,
    write_checkpoint,
    write_flo,
    write_loss_log,
    write_png,
)
from .rasterize import RenderConfig, render
from .scenes import (
    CameraRigSpec,
    ClusterSpec,
    InitSpec,
    MotionSpec,
    SceneSpec,
    dynamic_union_mask,
    generate_scene,
    perturb_field,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2

PREVIEW_EVERY = 50

_CLUSTER_DEFAULTS = {
    "count": 1,
    "center": [0.0, 0.0, 4.0],
    "spread": 0.0,
    "sigma": [0.1, 0.1],
    "sigma_z": 1e-4,
    "opacity": 0.8,
    "color": None,
    "motion": {
        "kind": "static",
        "velocity": [0.0, 0.0, 0.0],
        "pivot": [0.0, 0.0],
        "rate": 0.0,
        "factor": 1.0,
    },
}


def default_config() -> dict:
    return {
        "scene": {
            "seed": 0,
            "frames": 2,
            "background": [0.0, 0.0, 0.0],
            "rig": {
                "fx": 48.0,
                "fy": 48.0,
                "width": 32,
                "height": 32,
                "positions": [[0.0, 0.0, 0.0]],
                "train_views": None,
                "eval_views": [],
            },
            "clusters": [],
        },
        "render": {
            "tile_size": 16,
            "top_k": 20,
            "alpha_threshold": 1.0 / 255.0,
            "transmittance_floor": 1e-4,
        },
        "train": {
            "iterations": 300,
            "lambda_flow": 0.5,
            "flow_norm": "l1",
            "isotropic": False,
            "attach_weights": True,
            "lr_means": None,
            "lr_delta_means": None,
            "lr_quats": 1e-3,
            "lr_log_scales": 5e-3,
            "lr_opacity": 5e-2,
            "lr_colors": 2.5e-3,
            "lr_decay": 1.0,
            "seed": 0,
            "workers": 1,
        },
        "init": {
            "mean_sigma": 0.0,
            "quat_sigma": 0.0,
            "log_scale_sigma": 0.0,
            "logit_sigma": 0.0,
            "color_sigma": 0.0,
            "seed": 0,
        },
    }


def resolve_config(user: dict) -> dict:
    """Merge a user config over the defaults, validating every key. Cluster
    entries are validated against the cluster template."""
    clusters = user.get("scene", {}).get("clusters", None)
    if clusters is not None:
        user = {**user, "scene": {**user["scene"], "clusters": []}}
    cfg = merge_config(default_config(), user)
    if clusters is not None:
        if not isinstance(clusters, list):
            raise ValueError("scene.clusters must be a list")
        cfg["scene"]["clusters"] = [
            merge_config(_CLUSTER_DEFAULTS, c, f"scene.clusters[{i}]")
            for i, c in enumerate(clusters)
        ]
    return cfg


def scene_spec_from_config(cfg: dict) -> SceneSpec:
    sc = cfg["scene"]
    rig = sc["rig"]
    clusters = [
        ClusterSpec(
            count=c["count"],
            center=tuple(c["center"]),
            spread=c["spread"],
            sigma=c["sigma"],
            sigma_z=c["sigma_z"],
            opacity=c["opacity"],
            color=None if c["color"] is None else tuple(c["color"]),
            motion=MotionSpec(
                kind=c["motion"]["kind"],
                velocity=tuple(c["motion"]["velocity"]),
                pivot=tuple(c["motion"]["pivot"]),
                rate=c["motion"]["rate"],
                factor=c["motion"]["factor"],
            ),
        )
        for c in sc["clusters"]
    ]
    return SceneSpec(
        frames=sc["frames"],
        rig=CameraRigSpec(
            fx=rig["fx"],
            fy=rig["fy"],
            width=rig["width"],
            height=rig["height"],
            positions=tuple(tuple(p) for p in rig["positions"]),
            train_views=None if rig["train_views"] is None else tuple(rig["train_views"]),
            eval_views=tuple(rig["eval_views"]),
        ),
        clusters=clusters,
        background=tuple(sc["background"]),
        seed=sc["seed"],
    )


def render_config_from_config(cfg: dict) -> RenderConfig:
    rc = cfg["render"]
    background = np.asarray(cfg["scene"]["background"], dtype=np.float64)
    return RenderConfig(
        tile_size=rc["tile_size"],
        top_k=rc["top_k"],
        alpha_threshold=rc["alpha_threshold"],
        transmittance_floor=rc["transmittance_floor"],
        background=background,
    )


def train_config_from_config(cfg: dict) -> TrainConfig:
    tr = cfg["train"]
    return TrainConfig(
        iterations=tr["iterations"],
        lambda_flow=tr["lambda_flow"],
        flow_norm=tr["flow_norm"],
        isotropic=tr["isotropic"],
        attach_weights=tr["attach_weights"],
        lr_means=tr["lr_means"],
        lr_delta_means=tr["lr_delta_means"],
        lr_quats=tr["lr_quats"],
        lr_log_scales=tr["lr_log_scales"],
        lr_opacity=tr["lr_opacity"],
        lr_colors=tr["lr_colors"],
        lr_decay=tr["lr_decay"],
        seed=tr["seed"],
        workers=tr["workers"],
        render=render_config_from_config(cfg),
    )


def init_spec_from_config(cfg: dict) -> InitSpec:
    ini = cfg["init"]
    return InitSpec(
        mean_sigma=ini["mean_sigma"],
        quat_sigma=ini["quat_sigma"],
        log_scale_sigma=ini["log_scale_sigma"],
        logit_sigma=ini["logit_sigma"],
        color_sigma=ini["color_sigma"],
        seed=ini["seed"],
    )


def bundle_to_config(scene: SceneSpec, train: TrainConfig, init: InitSpec) -> dict:
    """Plain-dict echo of a scene, train, and init description."""
    cfg = default_config()
    sc = cfg["scene"]
    sc["seed"] = scene.seed
    sc["frames"] = scene.frames
    sc["background"] = list(scene.background)
    rig = sc["rig"]
    rig["fx"], rig["fy"] = scene.rig.fx, scene.rig.fy
    rig["width"], rig["height"] = scene.rig.width, scene.rig.height
    rig["positions"] = [list(p) for p in scene.rig.positions]
    rig["train_views"] = list(scene.rig.train_views)
    rig["eval_views"] = list(scene.rig.eval_views)
    sc["clusters"] = [
        {
            "count": c.count,
            "center": list(c.center),
            "spread": c.spread,
            "sigma": list(c.sigma),
            "sigma_z": c.sigma_z,
            "opacity": c.opacity,
            "color": None if c.color is None else list(c.color),
            "motion": {
                "kind": c.motion.kind,
                "velocity": list(c.motion.velocity),
                "pivot": list(c.motion.pivot),
                "rate": c.motion.rate,
                "factor": c.motion.factor,
            },
        }
        for c in scene.clusters
    ]
    rc = cfg["render"]
    rc["tile_size"] = train.render.tile_size
    rc["top_k"] = train.render.top_k
    rc["alpha_threshold"] = train.render.alpha_threshold
    rc["transmittance_floor"] = train.render.transmittance_floor
    tr = cfg["train"]
    tr["iterations"] = train.iterations
    tr["lambda_flow"] = train.lambda_flow
    tr["flow_norm"] = train.flow_norm
    tr["isotropic"] = train.isotropic
    tr["attach_weights"] = train.attach_weights
    tr["lr_means"] = train.lr_means
    tr["lr_delta_means"] = train.lr_delta_means
    tr["lr_quats"] = train.lr_quats
    tr["lr_log_scales"] = train.lr_log_scales
    tr["lr_opacity"] = train.lr_opacity
    tr["lr_colors"] = train.lr_colors
    tr["lr_decay"] = train.lr_decay
    tr["seed"] = train.seed
    tr["workers"] = train.workers
    ini = cfg["init"]
    ini["mean_sigma"] = init.mean_sigma
    ini["quat_sigma"] = init.quat_sigma
    ini["log_scale_sigma"] = init.log_scale_sigma
    ini["logit_sigma"] = init.logit_sigma
    ini["color_sigma"] = init.color_sigma
    ini["seed"] = init.seed
    return cfg


def _load_cli_config(args, require_file: bool = True) -> dict:
    user = {}
    if args.config is not None:
        user = load_yaml(args.config)
    elif require_file:
        raise ValueError("--config is required")
    cfg = resolve_config(user)
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        set_config_value(cfg, key.strip(), value)
    if getattr(args, "seed", None) is not None:
        cfg["scene"]["seed"] = args.seed
        cfg["train"]["seed"] = args.seed
        cfg["init"]["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        cfg["train"]["workers"] = args.threads
    return cfg


def _view_dir(root: Path, view: int) -> Path:
    return root / f"view_{view:03d}"


def cmd_gen_scene(args) -> int:
    cfg = _load_cli_config(args)
    spec = scene_spec_from_config(cfg)
    render_cfg = render_config_from_config(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    field, sequences = generate_scene(spec, render_cfg)
    save_yaml(out / "config.yaml", cfg)
    write_checkpoint(
        out / "gt.bin", field, iteration=0, seed=spec.seed, adam=None, config=cfg
    )
    for view, seq in enumerate(sequences):
        vdir = _view_dir(out, view)
        vdir.mkdir(exist_ok=True)
        for k, frame in enumerate(seq.frames):
            write_png(vdir / f"frame_{k:04d}.png", frame)
        for k, flow in enumerate(seq.flows):
            write_flo(vdir / f"flow_{k:04d}.flo", flow)
            write_png(vdir / f"flowvis_{k:04d}.png", flow_to_color(flow))
    print(
        f"wrote {len(sequences)} views x {spec.frames} frames "
        f"({len(field.base)} gaussians) to {out} in {time.time() - t0:.2f}s"
    )
    return EXIT_OK


def _load_dataset(data: Path):
    """Read back a generated scene directory. Returns (cfg, spec, sequences)
    with one sequence per view, in rig order."""
    cfg = resolve_config(load_yaml(data / "config.yaml"))
    spec = scene_spec_from_config(cfg)
    sequences = []
    for view in range(len(spec.rig.positions)):
        vdir = _view_dir(data, view)
        cam = spec.rig.camera(view)
        frames = []
        flows = []
        for k in range(spec.frames):
            path = vdir / f"frame_{k:04d}.png"
            if not path.exists():
                raise ValueError(f"missing frame image {path}")
            frames.append(read_png(path))
        for k in range(spec.frames - 1):
            path = vdir / f"flow_{k:04d}.flo"
            if not path.exists():
                raise ValueError(f"missing flow file {path}")
            flows.append(read_flo(path))
        sequences.append(
            SceneSequence(frames=frames, flows=flows, cameras=[cam] * spec.frames)
        )
    return cfg, spec, sequences


def _preview_strip(seq: SceneSequence, field: DynamicField, cfg: TrainConfig):
    """Target, render, and flow panels for the first frame, side by side."""
    target = seq.frames[0]
    if field.motion_steps > 0:
        pair = make_pair(
            field_at(field, 0), field_at(field, 1), seq.cameras[0], seq.cameras[1],
            cfg.render, workers=cfg.workers,
        )
        image = pair.aux.image
        panels = [target, image, flow_to_color(gaussian_flow(pair, isotropic=cfg.isotropic))]
    else:
        out = render(field_at(field, 0), seq.cameras[0], cfg.render, workers=cfg.workers)
        panels = [target, out.image]
    sep = np.ones((target.shape[0], 1, 3))
    strip = panels[0]
    for panel in panels[1:]:
        strip = np.concatenate([strip, sep, panel], axis=1)
    return strip


def cmd_fit(args) -> int:
    data = Path(args.data)
    cfg, spec, sequences = _load_dataset(data)
    if args.config is not None:
        cfg = resolve_config(load_yaml(args.config))
    for item in args.set or []:
        key, _, value = item.partition("=")
        set_config_value(cfg, key.strip(), value)
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
        cfg["init"]["seed"] = args.seed
    if args.threads is not None:
        cfg["train"]["workers"] = args.threads
    train_cfg = train_config_from_config(cfg)
    init_spec = init_spec_from_config(cfg)
    train_seqs = [sequences[v] for v in spec.rig.train_views]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    adam = None
    start_iteration = 0
    if args.resume is not None:
        ck = read_checkpoint(args.resume)
        field = ck["field"]
        adam = ck["adam"]
        start_iteration = ck["iteration"]
        if adam is None:
            raise ValueError(f"{args.resume} has no optimizer state to resume from")
        # Reuse the learning rate the interrupted run pinned, not one derived
        # from the evolved extent, so continuation repeats the same steps.
        pinned = (ck["config"] or {}).get("train", {}).get("lr_means")
        if train_cfg.lr_means is None and pinned is not None:
            train_cfg.lr_means = pinned
    else:
        gt = read_checkpoint(data / "gt.bin")
        field = perturb_field(gt["field"], init_spec)
    if train_cfg.lr_means is None:
        train_cfg.lr_means = 1.6e-4 * scene_extent(field.base)
    cfg["train"]["lr_means"] = train_cfg.lr_means

    def preview(it, field, row):
        if it % PREVIEW_EVERY == 0 or it == train_cfg.iterations - 1:
            write_png(out / f"preview_{it:04d}.png", _preview_strip(train_seqs[0], field, train_cfg))
        if it % 50 == 0:
            print(f"iter {it:5d}  L_photo {row[1]:.6f}  L_flow {row[2]:.6f}  total {row[3]:.6f}")

    t0 = time.time()
    result = fit(
        train_seqs, field, train_cfg,
        adam=adam, start_iteration=start_iteration, callback=preview,
    )
    write_checkpoint(
        out / "ckpt.bin", result.field,
        iteration=result.iteration, seed=train_cfg.seed, adam=result.adam, config=cfg,
    )
    write_loss_log(out / "loss.csv", result.log, config=cfg)
    final = result.log[-1]
    print(
        f"fit done in {time.time() - t0:.1f}s: L_photo {final[1]:.6f} "
        f"L_flow {final[2]:.6f} total {final[3]:.6f} -> {out}"
    )
    return EXIT_OK


def _checkpoint_and_config(args):
    ck = read_checkpoint(args.checkpoint)
    if args.config is not None:
        cfg = resolve_config(load_yaml(args.config))
    elif ck["config"]:
        cfg = resolve_config(ck["config"])
    else:
        raise ValueError("checkpoint has no embedded config; pass --config")
    for item in args.set or []:
        key, _, value = item.partition("=")
        set_config_value(cfg, key.strip(), value)
    return ck, cfg


def cmd_render(args) -> int:
    ck, cfg = _checkpoint_and_config(args)
    spec = scene_spec_from_config(cfg)
    render_cfg = render_config_from_config(cfg)
    field = ck["field"]
    cam = spec.rig.camera(args.view)
    workers = args.threads or 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(field.frame_count):
        result = render(field_at(field, k), cam, render_cfg, workers=workers)
        write_png(out / f"frame_{k:04d}.png", result.image)
    print(f"rendered {field.frame_count} frames (view {args.view}) to {out}")
    return EXIT_OK


def cmd_flow(args) -> int:
    ck, cfg = _checkpoint_and_config(args)
    spec = scene_spec_from_config(cfg)
    render_cfg = render_config_from_config(cfg)
    field = ck["field"]
    if field.motion_steps == 0:
        raise ValueError("checkpoint field has a single frame, no flow to compute")
    cam = spec.rig.camera(args.view)
    workers = args.threads or 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(field.motion_steps):
        pair = make_pair(
            field_at(field, k), field_at(field, k + 1), cam, cam, render_cfg,
            workers=workers,
        )
        flow = gaussian_flow(pair, isotropic=args.isotropic)
        write_flo(out / f"flow_{k:04d}.flo", flow)
        write_png(out / f"flowvis_{k:04d}.png", flow_to_color(flow))
    print(f"wrote {field.motion_steps} flow fields (view {args.view}) to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    worst = 0.0
    rows = []
    for seed in range(args.seeds):
        report = gradcheck(seed, isotropic=args.isotropic)
        worst = max(worst, report.max_rel_err)
        status = "pass" if report.passed() else "FAIL"
        print(
            f"seed {seed}: max rel err {report.max_rel_err:.3e} "
            f"({report.runtime_s:.2f}s) {status}"
        )
        rows.extend(report.lines())
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "gradcheck.csv", "w") as f:
            f.write("loss,timestep,block,rel_err\n")
            for line in rows:
                f.write(line + "\n")
    if worst >= GRADCHECK_TOLERANCE:
        print(f"gradient check failed: {worst:.3e} >= {GRADCHECK_TOLERANCE}")
        return EXIT_NUMERICAL
    print(f"gradient check passed: {worst:.3e} < {GRADCHECK_TOLERANCE}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = read_checkpoint(args.checkpoint)
    data = Path(args.data)
    cfg, spec, sequences = _load_dataset(data)
    if ck["config"]:
        train_cfg = train_config_from_config(resolve_config(ck["config"]))
    else:
        train_cfg = train_config_from_config(cfg)
    field = ck["field"]
    train_seqs = [sequences[v] for v in spec.rig.train_views]
    lp = 0.0
    lf = 0.0
    for seq in train_seqs:
        for k in range(len(seq.frames)):
            part = total_loss(field, seq, k, train_cfg)
            lp += part.photometric
            lf += part.flow
    total = lp + train_cfg.lambda_flow * lf
    print(f"train views: L_photo {lp:.9f} L_flow {lf:.9f} total {total:.9f}")
    rows = [("kind", "view", "frame", "psnr", "dynamic_psnr")]
    for view in range(len(sequences)):
        kind = "eval" if view in spec.rig.eval_views else "train"
        seq = sequences[view]
        mask = dynamic_union_mask(seq) if seq.flows else None
        for k in range(len(seq.frames)):
            image = render(
                field_at(field, k), seq.cameras[k], train_cfg.render,
                workers=train_cfg.workers,
            ).image
            value = psnr(image, seq.frames[k])
            dyn = psnr(image, seq.frames[k], mask) if mask is not None else math.nan
            rows.append((kind, view, k, f"{value:.6f}", f"{dyn:.6f}"))
            print(f"{kind} view {view} frame {k}: psnr {value:.3f} dynamic {dyn:.3f}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval.csv", "w") as f:
        for row in rows:
            f.write(",".join(str(v) for v in row) + "\n")
    with open(out / "eval_loss.txt", "w") as f:
        f.write(f"{lp!r} {lf!r} {total!r}\n")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    """Argument errors exit with the usage status code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_common(p, config=True, out=True, seed=True, threads=True):
    if config:
        p.add_argument("--config", help="YAML config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry, e.g. train.lambda_flow=0")
    if out:
        p.add_argument("--out", required=True, help="output directory")
    if seed:
        p.add_argument("--seed", type=int, help="override every seed in the config")
    if threads:
        p.add_argument("--threads", type=int, help="render worker threads")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="splatflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-scene", help="render a synthetic scene to disk")
    _add_common(p)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("fit", help="optimize a field against a generated scene")
    p.add_argument("--data", required=True, help="gen-scene output directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("render", help="render checkpoint frames for one view")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--view", type=int, default=0)
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("flow", help="write flow maps between checkpoint frames")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--isotropic", action="store_true",
                   help="drop the covariance transport term")
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("gradcheck", help="compare analytic and numeric gradients")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--isotropic", action="store_true")
    p.add_argument("--out", help="directory for gradcheck.csv")
    p.add_argument("--set", action="append", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("eval", help="losses and PSNR of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    _add_common(p, config=False, seed=False, threads=False)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RuntimeError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
