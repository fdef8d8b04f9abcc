"""Command-line pipeline: gen-data, train, render, composite,
match-appearance, and eval over a shared workspace directory.

Every artifact directory gets a run manifest embedding the seed and the
sha256 of the resolved config, so identical configs reproduce identical
outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .blocks import (
    BlockEntry,
    BlockLayout,
    CompositeConfig,
    NoCoverageError,
    composite_images,
    place_blocks_intersections,
    place_blocks_uniform,
    propagate_appearance,
    save_appearance_assignment,
    load_appearance_assignment,
    save_layout,
    select_blocks,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import psnr, ssim
from .nets import ModelConfig
from .raster import write_raster
from .rendering import Camera, RenderConfig, render_image, block_t_far, generate_rays
from .scenes import (
    CameraRig,
    make_cross_scene,
    make_street_scene,
    make_wall_scene,
    read_dataset,
    simulate_capture,
    write_dataset,
)
from .training import TrainConfig, apply_pose_offset, fit_appearance_embedding, train_block

log = logging.getLogger(__name__)

DEFAULT_CONFIG = {
    "seed": 7,
    "scene": {"kind": "street", "length": 1.0, "n_runs": 4, "appearance_strength": 0.0, "seed": 7},
    "capture": {
        "image_size": 64,
        "fov_deg": 75.0,
        "spacing": 0.12,
        "exposure_range": [0.5, 2.0],
        "pose_noise_rot_deg": 0.0,
        "pose_noise_trans": 0.0,
    },
    "layout": {"kind": "single", "radius": 0.55},
    "model": {},
    "train": {},
    "render": {"n_coarse": 32, "n_fine": 32},
    "composite": {"mode": "idw2d", "idw_power": 1.0, "visibility_threshold": 0.05, "selection_radius": 0.0},
    "eval": {"test_percent": 15, "fit_iterations": 60, "fit_rays": 512, "max_views": 12},
}


class CliError(RuntimeError):
    pass


def load_config(path, seed_override=None) -> dict:
    cfg = json.loads(Path(path).read_text())
    merged = json.loads(json.dumps(DEFAULT_CONFIG))
    for key, val in cfg.items():
        if isinstance(val, dict) and key in merged:
            merged[key].update(val)
        else:
            merged[key] = val
    if seed_override is not None:
        merged["seed"] = seed_override
    return merged


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def write_run_manifest(out_dir: Path, command: str, cfg: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{command}_run.json").write_text(
        json.dumps({"command": command, "seed": cfg["seed"], "config_hash": config_hash(cfg)}, indent=1, sort_keys=True)
    )


def build_scene(cfg):
    sc = cfg["scene"]
    kind = sc.get("kind", "street")
    if kind == "street":
        scene = make_street_scene(
            length=sc.get("length", 1.0),
            n_runs=sc.get("n_runs", 4),
            seed=sc.get("seed", cfg["seed"]),
            appearance_strength=sc.get("appearance_strength", 0.0),
            n_buildings_per_side=sc.get("n_buildings_per_side", 6),
            with_transients=sc.get("with_transients", False),
        )
    elif kind == "cross":
        scene = make_cross_scene(
            arm=sc.get("arm", 0.5),
            n_runs=sc.get("n_runs", 3),
            seed=sc.get("seed", cfg["seed"]),
            appearance_strength=sc.get("appearance_strength", 0.1),
        )
    elif kind == "wall":
        scene = make_wall_scene(seed=sc.get("seed", cfg["seed"]))
    else:
        raise CliError(f"unknown scene kind {kind!r}")
    trajectory = scene.streets[0]
    return scene, trajectory


def build_rig(cfg) -> CameraRig:
    cap = cfg["capture"]
    size = cap.get("image_size", 64)
    return CameraRig(
        yaw_offsets_deg=tuple(cap.get("cameras", (0.0, 90.0, 180.0, 270.0))),
        fov_deg=cap.get("fov_deg", 75.0),
        width=size,
        height_px=size,
    )


def build_layout(cfg, trajectory, scene=None) -> BlockLayout:
    lay = cfg["layout"]
    kind = lay.get("kind", "single")
    if kind == "single":
        pts = np.asarray(trajectory, dtype=float)
        center = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
        span = np.linalg.norm(pts - center, axis=1).max()
        radius = lay.get("radius", float(span) + 0.2)
        return BlockLayout(entries=[BlockEntry(block_id=0, origin=center, radius=radius)], adjacency=set())
    if kind == "uniform":
        return place_blocks_uniform(trajectory, lay["spacing"], lay["radius"])
    if kind == "intersections":
        if scene is None:
            raise CliError("intersection layout needs the scene's street graph")
        return place_blocks_intersections(scene.streets, scene.nodes)
    raise CliError(f"unknown layout kind {kind!r}")


def record_split(records, seed, test_percent):
    """Deterministic hash-based train/test split on record id."""
    train, test = [], []
    for rec in records:
        h = int(hashlib.sha256(f"{seed}:{rec.id}".encode()).hexdigest(), 16) % 100
        (test if h < test_percent else train).append(rec)
    return train, test


def make_train_config(cfg) -> TrainConfig:
    return TrainConfig(seed=cfg["seed"], **cfg["train"])


def make_model_config(cfg) -> ModelConfig:
    return ModelConfig(**cfg["model"])


def make_render_config(cfg, **over) -> RenderConfig:
    base = dict(cfg["render"])
    base.update(over)
    return RenderConfig(**base)


def make_composite_config(cfg, mode=None) -> CompositeConfig:
    base = dict(cfg["composite"])
    if mode:
        base["mode"] = mode
    return CompositeConfig(**base)


def record_camera(record) -> Camera:
    return Camera(
        pose=record.pose,
        fx=record.fx,
        fy=record.fy,
        cx=record.cx,
        cy=record.cy,
        width=record.width,
        height=record.height,
    )


def corrected_camera(model, record) -> Camera:
    """Record's camera with the model's learned segment offset applied."""
    cam = record_camera(record)
    seg_map = getattr(model, "segment_id_map", {})
    dense = seg_map.get(record.segment_id)
    if dense is not None and dense in model.pose_offsets:
        from . import autodiff as ad

        pose = apply_pose_offset(record.pose, model.pose_offsets[dense])
        cam = Camera(
            pose=ad.data_of(pose),
            fx=record.fx,
            fy=record.fy,
            cx=record.cx,
            cy=record.cy,
            width=record.width,
            height=record.height,
        )
    return cam


# --- subcommands -----------------------------------------------------------


def cmd_gen_data(cfg, out: Path, args) -> int:
    scene, trajectory = build_scene(cfg)
    rig = build_rig(cfg)
    cap = cfg["capture"]
    records, noise_info = simulate_capture(
        scene,
        trajectory,
        rig,
        exposure_range=tuple(cap.get("exposure_range", (0.5, 2.0))),
        seed=cfg["seed"],
        pose_noise_rot_deg=cap.get("pose_noise_rot_deg", 0.0),
        pose_noise_trans=cap.get("pose_noise_trans", 0.0),
        spacing=cap.get("spacing", 0.12),
    )
    ds_dir = out / "dataset"
    write_dataset(records, ds_dir, scene=scene)
    noise_payload = {
        str(seg): {"rotation": info["rotation"].tolist(), "translation": info["translation"].tolist()}
        for seg, info in noise_info.items()
    }
    (ds_dir / "pose_noise.json").write_text(json.dumps(noise_payload, indent=1, sort_keys=True))
    write_run_manifest(out, "gen-data", cfg)
    print(f"wrote {len(records)} records to {ds_dir}")
    return 0


def _load_workspace(cfg, out: Path):
    ds_dir = out / "dataset"
    manifest, records = read_dataset(ds_dir)
    scene, trajectory = build_scene(cfg)
    layout = build_layout(cfg, trajectory, scene)
    return records, scene, trajectory, layout


def checkpoint_path(out: Path, block_id: int) -> Path:
    return out / "checkpoints" / f"block_{block_id:03d}.ckpt"


def cmd_train(cfg, out: Path, args) -> int:
    records, scene, trajectory, layout = _load_workspace(cfg, out)
    train_records, _ = record_split(records, cfg["seed"], cfg["eval"]["test_percent"])
    tc = make_train_config(cfg)
    mc = make_model_config(cfg)
    block_ids = [args.block_id] if args.block_id is not None else [e.block_id for e in layout.entries]
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    for bid in block_ids:
        entry = layout.entry(bid)
        model, logs = train_block(train_records, entry.origin, entry.radius, tc, model_config=mc)
        ckpt = checkpoint_path(out, bid)
        save_checkpoint(model, ckpt, extra={"seed": cfg["seed"], "config_hash": config_hash(cfg), "block_id": bid})
        entry.checkpoint = str(ckpt.relative_to(out))
        log_path = out / "logs" / f"block_{bid:03d}.jsonl"
        with open(log_path, "w") as f:
            for row in logs:
                f.write(json.dumps(row, sort_keys=True) + "\n")
        print(f"block {bid}: final loss {logs[-1]['loss']:.5f} -> {ckpt}")
    save_layout(layout, out / "layout.json", extra={"seed": cfg["seed"], "config_hash": config_hash(cfg)})
    write_run_manifest(out, "train", cfg)
    return 0


def _load_models(out: Path, layout: BlockLayout, block_ids=None):
    models = {}
    for entry in layout.entries:
        if block_ids is not None and entry.block_id not in block_ids:
            continue
        ckpt = checkpoint_path(out, entry.block_id)
        if ckpt.exists():
            models[entry.block_id] = load_checkpoint(ckpt)
    if not models:
        raise CliError(f"no checkpoints under {out / 'checkpoints'}; run train first")
    return models


def cmd_render(cfg, out: Path, args) -> int:
    records, scene, trajectory, layout = _load_workspace(cfg, out)
    _, test_records = record_split(records, cfg["seed"], cfg["eval"]["test_percent"])
    bid = args.block_id if args.block_id is not None else layout.entries[0].block_id
    models = _load_models(out, layout, [bid])
    model = models[bid]
    rc = make_render_config(cfg)
    render_dir = out / "renders" / f"block_{bid:03d}"
    render_dir.mkdir(parents=True, exist_ok=True)
    done = 0
    for rec in test_records[: cfg["eval"]["max_views"]]:
        cam = corrected_camera(model, rec)
        app_map = getattr(model, "appearance_id_map", {})
        app_id = app_map.get(rec.capture_id)
        emb = None
        if model.config.use_appearance and app_id is None:
            emb = model.appearance.mean_embedding()
        result = render_image(
            model, cam, appearance_id=app_id, exposure=(rec.shutter, rec.gain), cfg=rc, appearance_embedding=emb
        )
        write_raster(render_dir / f"view_{rec.id:06d}.ras", (result.rgb * 255).round().astype(np.uint8))
        write_raster(render_dir / f"depth_{rec.id:06d}.ras", result.depth.astype(np.float32))
        done += 1
    write_run_manifest(out, "render", cfg)
    print(f"rendered {done} test views from block {bid} into {render_dir}")
    return 0


def _path_cameras(trajectory, rig: CameraRig, n_frames, height=0.025):
    from .scenes import _camera_rotation, _sample_trajectory

    pts, yaws = _sample_trajectory(trajectory, _trajectory_length(trajectory) / max(n_frames - 1, 1))
    cams = []
    intr = rig.intrinsics()
    for pt, yaw in zip(pts[:n_frames], yaws[:n_frames]):
        pose = np.eye(4)
        pose[:3, :3] = _camera_rotation(yaw, rig.pitch_deg)
        pose[:3, 3] = pt + np.array([0.0, 0.0, height])
        cams.append(Camera(pose=pose, **intr))
    return cams


def _trajectory_length(trajectory):
    pts = np.asarray(trajectory, dtype=float)
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


def _block_embeddings(out: Path, models):
    """Appearance codes for path rendering: the match-appearance assignment
    when present, otherwise each block's mean training embedding."""
    assign_path = out / "appearance_assignment.json"
    if assign_path.exists():
        return load_appearance_assignment(assign_path)
    return {bid: m.appearance.mean_embedding() for bid, m in models.items() if m.config.use_appearance}


def cmd_composite(cfg, out: Path, args) -> int:
    records, scene, trajectory, layout = _load_workspace(cfg, out)
    models = _load_models(out, layout)
    ccfg = make_composite_config(cfg, args.mode)
    rc = make_render_config(cfg, compute_visibility=ccfg.mode == "pixelwise_visibility")
    rig = build_rig(cfg)
    n_frames = getattr(args, "frames", None) or 24
    cams = _path_cameras(trajectory, rig, n_frames)
    embeddings = _block_embeddings(out, models)
    frame_dir = out / "composite" / ccfg.mode
    frame_dir.mkdir(parents=True, exist_ok=True)
    for i, cam in enumerate(cams):
        try:
            candidates = select_blocks(layout, cam, ccfg, models)
        except NoCoverageError as e:
            raise CliError(str(e)) from e
        renders = []
        for c in candidates:
            m = models[c.block_id]
            emb = embeddings.get(c.block_id)
            renders.append(render_image(m, cam, exposure=(1.0, 1.0), cfg=rc, appearance_embedding=emb))
        frame = composite_images(renders, candidates, cam, ccfg, layout)
        write_raster(frame_dir / f"frame_{i:04d}.ras", (frame * 255).round().astype(np.uint8))
    write_run_manifest(out, "composite", cfg)
    print(f"wrote {len(cams)} composited frames to {frame_dir}")
    return 0


def cmd_match_appearance(cfg, out: Path, args) -> int:
    records, scene, trajectory, layout = _load_workspace(cfg, out)
    models = _load_models(out, layout)
    root = layout.entries[0].block_id
    root_model = models[root]
    root_emb = root_model.appearance.mean_embedding()
    assignment = propagate_appearance(
        layout,
        models,
        root,
        root_emb,
        iterations=cfg["eval"].get("fit_iterations", 60),
        trajectory=trajectory,
        render_cfg=make_render_config(cfg),
    )
    save_appearance_assignment(
        assignment, out / "appearance_assignment.json", extra={"seed": cfg["seed"], "config_hash": config_hash(cfg)}
    )
    write_run_manifest(out, "match-appearance", cfg)
    print(f"matched appearance across {len(assignment)} blocks (root {root})")
    return 0


def _fit_test_embedding(model, cam, record, rc, cfg, rng):
    """Half-image appearance fitting: optimize on the left half of the test
    view, evaluate on the right half."""
    rays = generate_rays(cam, t_far=block_t_far(model), dtype=model.dtype)
    cols = rays.pixels[:, 1]
    left = np.nonzero(cols < record.width // 2)[0]
    n_fit = min(cfg["eval"].get("fit_rays", 512), left.size)
    pick = rng.choice(left, size=n_fit, replace=False)
    target = (record.image.reshape(-1, 3)[pick] / 255.0).astype(model.dtype)
    app_map = getattr(model, "appearance_id_map", {})
    dense = app_map.get(record.capture_id)
    if dense is not None:
        init = model.appearance.embeddings.data[dense]
    else:
        init = model.appearance.mean_embedding()
    emb, _ = fit_appearance_embedding(
        model,
        rays.origins[pick],
        rays.directions[pick],
        rays.t_near[pick],
        rays.t_far[pick],
        rays.base_radius[pick],
        target,
        init_embedding=init,
        exposure=(record.shutter, record.gain),
        iterations=cfg["eval"].get("fit_iterations", 60),
        n_coarse=rc.n_coarse,
        n_fine=rc.n_fine,
    )
    return emb


def evaluate_views(cfg, out, records, layout, models, mode, max_views=None):
    """Composite held-out views under ``mode``; per-view PSNR/SSIM on the
    right half (appearance fitted on the left half)."""
    ccfg = make_composite_config(cfg, mode)
    rc = make_render_config(cfg, compute_visibility=mode == "pixelwise_visibility")
    rng = np.random.default_rng(cfg["seed"])
    rows = []
    max_views = max_views or cfg["eval"]["max_views"]
    for rec in records[:max_views]:
        try:
            candidates = select_blocks(layout, record_camera(rec), ccfg, models)
        except NoCoverageError:
            log.warning("view %d: no candidate blocks; skipped", rec.id)
            continue
        renders = []
        for c in candidates:
            model = models[c.block_id]
            cam = corrected_camera(model, rec)
            emb = None
            if model.config.use_appearance:
                emb = _fit_test_embedding(model, cam, rec, rc, cfg, rng)
            renders.append(
                render_image(model, cam, exposure=(rec.shutter, rec.gain), cfg=rc, appearance_embedding=emb)
            )
        frame = composite_images(renders, candidates, record_camera(rec), ccfg, layout)
        gt = rec.image / 255.0
        half = rec.width // 2
        rows.append(
            {
                "id": rec.id,
                "psnr": psnr(frame[:, half:], gt[:, half:]),
                "ssim": ssim(frame[:, half:], gt[:, half:]),
            }
        )
    return rows


def cmd_eval(cfg, out: Path, args) -> int:
    records, scene, trajectory, layout = _load_workspace(cfg, out)
    _, test_records = record_split(records, cfg["seed"], cfg["eval"]["test_percent"])
    if not test_records:
        raise CliError("test split is empty; lower eval.test_percent or add data")
    models = _load_models(out, layout)
    mode = args.mode or cfg["composite"]["mode"]
    rows = evaluate_views(cfg, out, test_records, layout, models, mode)
    if not rows:
        raise CliError("no views could be evaluated")

    eval_dir = out / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    table = ["id\tpsnr\tssim\tlpips"]
    for r in rows:
        table.append(f"{r['id']}\t{r['psnr']:.4f}\t{r['ssim']:.4f}\tn/a")
    mean_psnr = float(np.mean([r["psnr"] for r in rows]))
    mean_ssim = float(np.mean([r["ssim"] for r in rows]))
    table.append(f"mean\t{mean_psnr:.4f}\t{mean_ssim:.4f}\tn/a")
    (eval_dir / "metrics.tsv").write_text("\n".join(table) + "\n")
    payload = {
        "seed": cfg["seed"],
        "config_hash": config_hash(cfg),
        "mode": mode,
        "views": rows,
        "mean_psnr": mean_psnr,
        "mean_ssim": mean_ssim,
    }
    if getattr(args, "all_modes", False):
        comparison = {}
        for m in ("nearest", "idw2d", "idw3d", "pixelwise_visibility", "imagewise_visibility"):
            mrows = evaluate_views(cfg, out, test_records, layout, models, m)
            comparison[m] = {
                "psnr": float(np.mean([r["psnr"] for r in mrows])),
                "ssim": float(np.mean([r["ssim"] for r in mrows])),
            }
        payload["mode_comparison"] = comparison
        lines = ["mode\tpsnr\tssim\tlpips"]
        for m, v in comparison.items():
            lines.append(f"{m}\t{v['psnr']:.4f}\t{v['ssim']:.4f}\tn/a")
        (eval_dir / "mode_comparison.tsv").write_text("\n".join(lines) + "\n")
    (eval_dir / "metrics.json").write_text(json.dumps(payload, indent=1, sort_keys=True))
    write_run_manifest(out, "eval", cfg)
    print(f"eval [{mode}]: mean PSNR {mean_psnr:.2f} dB, mean SSIM {mean_ssim:.3f} over {len(rows)} views")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="nerfblocks", description="Block-decomposed radiance field pipeline")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="path to a JSON run config")
        p.add_argument("--out", required=True, help="workspace directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    common(p)
    p = sub.add_parser("train", help="train one block (or all)")
    common(p)
    p.add_argument("--block-id", type=int, default=None)
    p = sub.add_parser("render", help="render held-out views from one block")
    common(p)
    p.add_argument("--block-id", type=int, default=None)
    p = sub.add_parser("composite", help="render a camera path with block compositing")
    common(p)
    p.add_argument("--mode", default=None)
    p.add_argument("--frames", type=int, default=24)
    p = sub.add_parser("match-appearance", help="propagate appearance codes from a root block")
    common(p)
    p = sub.add_parser("eval", help="held-out metrics table")
    common(p)
    p.add_argument("--mode", default=None)
    p.add_argument("--all-modes", action="store_true")

    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.WARNING))
    cfg = load_config(args.config, args.seed)
    out = Path(args.out)
    handlers = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "render": cmd_render,
        "composite": cmd_composite,
        "match-appearance": cmd_match_appearance,
        "eval": cmd_eval,
    }
    try:
        return handlers[args.command](cfg, out, args)
    except Exception as e:  # noqa: BLE001 - single-line cause, nonzero exit
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
