"""Procedural synthetic environment with an analytic ray-tracing oracle,
capture simulation (appearance, exposure, transients, pose noise), and the
on-disk dataset format.

Scene units: street layouts are specified on a ~100 m grid and normalized so
one scene unit is 100 m; cameras sit a couple of centimeters (scene scale)
above the ground plane z = 0.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .raster import read_raster, write_raster

__all__ = [
    "Box",
    "TransientBox",
    "CaptureParams",
    "SceneSpec",
    "ImageRecord",
    "CameraRig",
    "DatasetError",
    "trace_ground_truth",
    "simulate_capture",
    "write_dataset",
    "read_dataset",
    "geographic_filter",
    "make_wall_scene",
    "make_street_scene",
    "make_cross_scene",
    "SKY_DEPTH",
]

log = logging.getLogger(__name__)

SKY_DEPTH = np.inf  # depth sentinel for rays that escape to the sky
MIN_FRAME_SPACING = 0.1  # drop frames that moved less than this since the last kept one


@dataclass
class Box:
    """Axis-aligned textured box."""

    lo: tuple
    hi: tuple
    base_color: tuple
    freq_a: tuple = (21.0, 0.0, 13.0)
    freq_b: tuple = (0.0, 17.0, 29.0)
    phase: tuple = (0.0, 0.0)

    def albedo(self, points):
        """Deterministic smooth procedural albedo at world ``points`` (N, 3)."""
        a = points @ np.asarray(self.freq_a) + self.phase[0]
        b = points @ np.asarray(self.freq_b) + self.phase[1]
        pattern = 0.7 + 0.3 * np.sin(a) * np.sin(b)
        return np.asarray(self.base_color) * pattern[:, None]


@dataclass
class TransientBox:
    """A movable object present only during [t_start, t_end)."""

    box: Box
    t_start: float
    t_end: float

    def present_at(self, timestamp) -> bool:
        return self.t_start <= timestamp < self.t_end


@dataclass
class CaptureParams:
    """Per-capture lighting/weather: one entry per data-collection run."""

    sun_dir: tuple = (0.3, 0.2, 0.93)  # unit-ish, toward the sun
    sun_rgb: tuple = (0.9, 0.85, 0.8)
    ambient_rgb: tuple = (0.45, 0.45, 0.5)
    fog_density: float = 2.2
    sky_horizon: tuple = (0.65, 0.72, 0.82)
    sky_zenith: tuple = (0.25, 0.45, 0.75)

    def normalized_sun(self):
        s = np.asarray(self.sun_dir, dtype=float)
        return s / np.linalg.norm(s)


@dataclass
class SceneSpec:
    """Static geometry plus per-capture appearance and transient objects."""

    seed: int
    streets: list  # list of (P_i, 3) polylines (scene units)
    nodes: list = field(default_factory=list)  # intersection points (3,)
    boxes: list = field(default_factory=list)  # list[Box]
    ground_color: tuple = (0.45, 0.42, 0.4)
    ground_freq: tuple = (9.0, 23.0, 0.0)
    captures: list = field(default_factory=lambda: [CaptureParams()])
    transients: list = field(default_factory=list)  # list[TransientBox]
    bounds: tuple = ((-2.0, -2.0, -0.1), (2.0, 2.0, 1.0))

    def ground_albedo(self, points):
        a = points @ np.asarray(self.ground_freq)
        b = points @ np.asarray((31.0, 7.0, 0.0))
        pattern = 0.7 + 0.3 * np.sin(a) * np.sin(b)
        return np.asarray(self.ground_color) * pattern[:, None]

    def to_json(self) -> str:
        payload = {
            "seed": self.seed,
            "streets": [np.asarray(s).tolist() for s in self.streets],
            "nodes": [np.asarray(n).tolist() for n in self.nodes],
            "boxes": [asdict(b) for b in self.boxes],
            "ground_color": list(self.ground_color),
            "ground_freq": list(self.ground_freq),
            "captures": [asdict(c) for c in self.captures],
            "transients": [
                {"box": asdict(t.box), "t_start": t.t_start, "t_end": t.t_end}
                for t in self.transients
            ],
            "bounds": [list(self.bounds[0]), list(self.bounds[1])],
        }
        return json.dumps(payload, indent=1, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "SceneSpec":
        d = json.loads(text)
        return SceneSpec(
            seed=d["seed"],
            streets=[np.asarray(s) for s in d["streets"]],
            nodes=[np.asarray(n) for n in d["nodes"]],
            boxes=[Box(**{k: tuple(v) if isinstance(v, list) else v for k, v in b.items()}) for b in d["boxes"]],
            ground_color=tuple(d["ground_color"]),
            ground_freq=tuple(d["ground_freq"]),
            captures=[CaptureParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in c.items()}) for c in d["captures"]],
            transients=[
                TransientBox(
                    Box(**{k: tuple(v) if isinstance(v, list) else v for k, v in t["box"].items()}),
                    t["t_start"],
                    t["t_end"],
                )
                for t in d["transients"]
            ],
            bounds=(tuple(d["bounds"][0]), tuple(d["bounds"][1])),
        )


# --- analytic tracing --------------------------------------------------


def _intersect_boxes(origins, dirs, boxes):
    """Nearest-hit slab test over all boxes: returns (t, box_idx, normal)."""
    n = origins.shape[0]
    best_t = np.full(n, np.inf)
    best_idx = np.full(n, -1, dtype=np.int64)
    best_normal = np.zeros((n, 3))
    if not boxes:
        return best_t, best_idx, best_normal
    lo = np.asarray([b.lo for b in boxes], dtype=float)  # (M, 3)
    hi = np.asarray([b.hi for b in boxes], dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(dirs != 0.0, 1.0 / dirs, np.inf)
    o = origins[:, None, :]
    i = inv[:, None, :]
    ta = (lo[None] - o) * i
    tb = (hi[None] - o) * i
    tmin_ax = np.minimum(ta, tb)
    tmax_ax = np.maximum(ta, tb)
    # rays parallel to a slab: inf*0 gave nan; parallel inside -> -inf/+inf
    inside_par = (dirs[:, None, :] == 0.0) & (o >= lo[None]) & (o <= hi[None])
    tmin_ax = np.where(np.isnan(tmin_ax), np.where(inside_par, -np.inf, np.inf), tmin_ax)
    tmax_ax = np.where(np.isnan(tmax_ax), np.where(inside_par, np.inf, -np.inf), tmax_ax)
    tmin = tmin_ax.max(axis=2)  # (N, M)
    tmax = tmax_ax.min(axis=2)
    hit = (tmax >= tmin) & (tmin > 1e-9)
    tmin = np.where(hit, tmin, np.inf)
    idx = tmin.argmin(axis=1)
    rows = np.arange(n)
    t = tmin[rows, idx]
    good = np.isfinite(t)
    best_t[good] = t[good]
    best_idx[good] = idx[good]
    axis = tmin_ax[rows, idx].argmax(axis=1)
    signs = -np.sign(dirs[rows, axis])
    normals = np.zeros((n, 3))
    normals[rows, axis] = signs
    best_normal[good] = normals[good]
    return best_t, best_idx, best_normal


def trace_ground_truth(scene: SceneSpec, capture: CaptureParams, origins, dirs, timestamp=None, t_query=None):
    """Analytic nearest-intersection shading of a ray batch.

    Returns a dict with 'rgb' (N, 3) linear radiance before exposure, 'depth'
    (N,) with +inf for sky, 'transient' (N,) bool marking rays whose nearest
    hit is a transient object, and, when ``t_query`` (N, S) is given,
    'transmittance' (N, S): 1.0 strictly before the first hit, 0.0 after.
    """
    origins = np.asarray(origins, dtype=float)
    dirs = np.asarray(dirs, dtype=float)
    n = origins.shape[0]

    boxes = list(scene.boxes)
    n_static = len(boxes)
    if timestamp is not None:
        boxes += [t.box for t in scene.transients if t.present_at(timestamp)]

    t_box, idx_box, n_box = _intersect_boxes(origins, dirs, boxes)

    # ground plane z = 0
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(dirs[:, 2] < 0.0, -origins[:, 2] / dirs[:, 2], np.inf)
    t_ground = np.where(t_ground > 1e-9, t_ground, np.inf)

    depth = np.minimum(t_box, t_ground)
    hit_ground = t_ground < t_box
    transient = (idx_box >= n_static) & ~hit_ground & np.isfinite(depth)

    sun = capture.normalized_sun()
    sun_rgb = np.asarray(capture.sun_rgb)
    amb = np.asarray(capture.ambient_rgb)

    rgb = np.zeros((n, 3))
    hit = np.isfinite(depth)
    if hit.any():
        p = origins[hit] + depth[hit, None] * dirs[hit]
        normal = np.where(hit_ground[hit, None], [[0.0, 0.0, 1.0]], n_box[hit])
        albedo = np.empty((hit.sum(), 3))
        ground_rows = hit_ground[hit]
        if ground_rows.any():
            albedo[ground_rows] = scene.ground_albedo(p[ground_rows])
        box_rows = ~ground_rows
        if box_rows.any():
            sub_idx = idx_box[hit][box_rows]
            sub_p = p[box_rows]
            alb = np.empty((box_rows.sum(), 3))
            for bi in np.unique(sub_idx):
                m = sub_idx == bi
                alb[m] = boxes[bi].albedo(sub_p[m])
            albedo[box_rows] = alb
        diffuse = np.maximum(normal @ sun, 0.0)[:, None]
        shaded = albedo * (amb + diffuse * sun_rgb)
        atten = np.exp(-capture.fog_density * depth[hit])[:, None]
        fog_rgb = np.asarray(capture.sky_horizon)
        rgb[hit] = atten * shaded + (1.0 - atten) * fog_rgb

    if (~hit).any():
        elev = np.clip(dirs[~hit, 2], 0.0, 1.0)[:, None]
        sky = (1.0 - elev) * np.asarray(capture.sky_horizon) + elev * np.asarray(capture.sky_zenith)
        rgb[~hit] = sky

    out = {"rgb": np.clip(rgb, 0.0, 1.0), "depth": depth, "transient": transient}
    if t_query is not None:
        out["transmittance"] = (np.asarray(t_query) < depth[:, None]).astype(float)
    return out


# --- capture simulation -------------------------------------------------


@dataclass
class CameraRig:
    """Vehicle-mounted rig: yaw offsets (deg) per camera, shared intrinsics."""

    yaw_offsets_deg: tuple = (0.0, 90.0, 180.0, 270.0)
    height: float = 0.025
    pitch_deg: float = -8.0
    fov_deg: float = 75.0
    width: int = 64
    height_px: int = 64

    @property
    def fx(self) -> float:
        return self.width / (2.0 * np.tan(np.deg2rad(self.fov_deg) / 2.0))

    def intrinsics(self):
        return dict(
            fx=self.fx,
            fy=self.fx,
            cx=(self.width - 1) / 2.0,
            cy=(self.height_px - 1) / 2.0,
            width=self.width,
            height=self.height_px,
        )


@dataclass
class ImageRecord:
    """One posed, exposed, masked training image."""

    id: int
    pose: np.ndarray  # (4, 4) camera-to-world
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) uint8, 1 = transient, ignore
    shutter: float
    gain: float
    capture_id: int
    segment_id: int
    timestamp: float

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise DatasetError(f"record {self.id}: image and mask dimensions differ")
        if self.shutter <= 0 or self.gain <= 0:
            raise DatasetError(f"record {self.id}: exposure must be positive")

    @property
    def position(self):
        return self.pose[:3, 3]


class DatasetError(ValueError):
    """Raised for malformed datasets/manifests."""


def _rot_z(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rodrigues(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    kx, ky, kz = axis
    K = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def _camera_rotation(yaw, pitch):
    """Camera-to-world rotation for a camera with x-right, y-down, z-forward
    axes, given vehicle yaw (around world z) and pitch (around camera x)."""
    forward_yaw = _rot_z(yaw)
    # base alignment: camera z -> world x (heading), camera x -> world -y, camera y -> world -z
    base = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]]).T
    pitch_mat = _rodrigues([1.0, 0.0, 0.0], np.deg2rad(pitch))
    return forward_yaw @ base @ pitch_mat


def _sample_trajectory(path, spacing):
    """Arc-length resampling of a polyline: positions plus heading yaw."""
    path = np.asarray(path, dtype=float)
    seg = np.diff(path, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    total = seg_len.sum()
    arcs = np.arange(0.0, total + 1e-9, spacing)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    pts, yaws = [], []
    for a in arcs:
        i = min(np.searchsorted(cum, a, side="right") - 1, len(seg) - 1)
        frac = (a - cum[i]) / max(seg_len[i], 1e-12)
        pts.append(path[i] + frac * seg[i])
        yaws.append(np.arctan2(seg[i][1], seg[i][0]))
    return np.asarray(pts), np.asarray(yaws)


def simulate_capture(
    scene: SceneSpec,
    trajectory,
    rig: CameraRig,
    exposure_range=(0.5, 2.0),
    seed=0,
    pose_noise_rot_deg=0.0,
    pose_noise_trans=0.0,
    lateral_jitter=0.015,
    spacing=0.12,
):
    """Render posed, exposed, masked images for every capture run of ``scene``.

    One run per entry of ``scene.captures``: the trajectory is re-traversed
    under that run's appearance with per-run lateral/height jitter, per-image
    exposure drawn log-uniformly from ``exposure_range``, and transient
    objects rasterized (and masked) at the frame timestamp.  Optional pose
    noise is injected per segment (run); the returned info dict carries the
    true poses and injected offsets so tests can score recovery.

    Returns (records, info) where info = {segment_id: {"rotation": R_noise,
    "translation": t_noise}} and each record's stored pose is the noisy one.
    """
    rng = np.random.default_rng(seed)
    base_pts, base_yaws = _sample_trajectory(trajectory, spacing)
    intr = rig.intrinsics()

    # per-segment injected noise, centered so the segment-mean offset is zero
    # (a shared component is an unobservable gauge the model cannot recover)
    n_runs = len(scene.captures)
    rot_vecs = np.zeros((n_runs, 3))
    trans_vecs = np.zeros((n_runs, 3))
    if pose_noise_rot_deg > 0 or pose_noise_trans > 0:
        axes = rng.normal(size=(n_runs, 3))
        axes /= np.linalg.norm(axes, axis=1, keepdims=True)
        rot_vecs = axes * np.deg2rad(pose_noise_rot_deg)
        tdirs = rng.normal(size=(n_runs, 3))
        tdirs /= np.linalg.norm(tdirs, axis=1, keepdims=True)
        trans_vecs = tdirs * pose_noise_trans
        if n_runs > 1:
            rot_vecs -= rot_vecs.mean(axis=0)
            trans_vecs -= trans_vecs.mean(axis=0)

    records = []
    info = {}
    rid = 0
    for run, capture in enumerate(scene.captures):
        jitter = rng.normal(0.0, lateral_jitter, size=2)
        height_jit = rng.normal(0.0, lateral_jitter / 3.0)
        angle = np.linalg.norm(rot_vecs[run])
        r_noise = np.eye(3) if angle < 1e-12 else _rodrigues(rot_vecs[run], angle)
        info[run] = {"rotation": r_noise, "translation": trans_vecs[run].copy()}

        last_kept = None
        dropped = 0
        for k, (pt, yaw) in enumerate(zip(base_pts, base_yaws)):
            pos = pt + np.array([jitter[0], jitter[1], rig.height + height_jit])
            # redundant-capture filter: skip frames that barely moved
            if last_kept is not None and np.linalg.norm(pos - last_kept) < MIN_FRAME_SPACING:
                dropped += 1
                continue
            last_kept = pos
            timestamp = run * 1000.0 + float(k)
            for cam_i, yaw_off in enumerate(rig.yaw_offsets_deg):
                r_true = _camera_rotation(yaw + np.deg2rad(yaw_off), rig.pitch_deg)
                pose_true = np.eye(4)
                pose_true[:3, :3] = r_true
                pose_true[:3, 3] = pos
                # render ground truth from the TRUE pose
                from .rendering import Camera, generate_rays

                cam = Camera(pose=pose_true, camera_id=cam_i, **intr)
                rays = generate_rays(cam, t_near=0.01, t_far=10.0)
                traced = trace_ground_truth(scene, capture, rays.origins, rays.directions, timestamp=timestamp)
                shutter = float(np.exp(rng.uniform(np.log(exposure_range[0]), np.log(exposure_range[1]))))
                gain = 1.0
                scaled = np.minimum(1.0, traced["rgb"] * (shutter * gain))
                img = np.round(scaled * 255.0).astype(np.uint8).reshape(rig.height_px, rig.width, 3)
                mask = traced["transient"].astype(np.uint8).reshape(rig.height_px, rig.width)
                # stored pose carries the injected per-segment noise
                pose_noisy = np.eye(4)
                pose_noisy[:3, :3] = r_noise @ r_true
                pose_noisy[:3, 3] = pos + trans_vecs[run]
                records.append(
                    ImageRecord(
                        id=rid,
                        pose=pose_noisy,
                        image=img,
                        mask=mask,
                        shutter=shutter,
                        gain=gain,
                        capture_id=run,
                        segment_id=run,
                        timestamp=timestamp,
                        **intr,
                    )
                )
                rid += 1
        if dropped:
            log.info("run %d: dropped %d redundant frames", run, dropped)
    return records, info


def geographic_filter(records, origin, radius):
    """Records whose camera position lies within ``radius`` of ``origin``."""
    if radius <= 0:
        raise DatasetError("radius must be positive")
    origin = np.asarray(origin, dtype=float)
    return [r for r in records if np.linalg.norm(r.position - origin) <= radius]


# --- dataset on-disk format ---------------------------------------------

MANIFEST_VERSION = 1


def write_dataset(records, path, scene: SceneSpec | None = None) -> None:
    """Write a manifest plus per-record image/mask rasters under ``path``."""
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    (path / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in records:
        image_rel = f"images/{rec.id:06d}.ras"
        mask_rel = f"masks/{rec.id:06d}.ras"
        write_raster(path / image_rel, rec.image)
        write_raster(path / mask_rel, rec.mask)
        entries.append(
            {
                "id": rec.id,
                "image": image_rel,
                "mask": mask_rel,
                "pose": [float(x) for x in rec.pose.reshape(-1)],
                "fx": rec.fx,
                "fy": rec.fy,
                "cx": rec.cx,
                "cy": rec.cy,
                "width": rec.width,
                "height": rec.height,
                "shutter": rec.shutter,
                "gain": rec.gain,
                "capture_id": rec.capture_id,
                "segment_id": rec.segment_id,
                "timestamp": rec.timestamp,
            }
        )
    manifest = {
        "version": MANIFEST_VERSION,
        "scene_seed": scene.seed if scene is not None else 0,
        "records": entries,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    if scene is not None:
        (path / "scene.json").write_text(scene.to_json())


_REQUIRED_FIELDS = (
    "id",
    "image",
    "mask",
    "pose",
    "fx",
    "fy",
    "cx",
    "cy",
    "width",
    "height",
    "shutter",
    "gain",
    "capture_id",
    "segment_id",
    "timestamp",
)


def read_dataset(path):
    """Load a dataset directory; returns (manifest dict, list[ImageRecord])."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"no manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{manifest_path}: malformed manifest at line {e.lineno}: {e.msg}") from e
    if manifest.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"unsupported manifest version {manifest.get('version')}")
    records = []
    for i, entry in enumerate(manifest.get("records", [])):
        for fieldname in _REQUIRED_FIELDS:
            if fieldname not in entry:
                raise DatasetError(f"record {i}: missing field '{fieldname}'")
        image_path = path / entry["image"]
        mask_path = path / entry["mask"]
        if not image_path.exists():
            raise DatasetError(f"record {entry['id']}: missing image file {image_path}")
        if not mask_path.exists():
            raise DatasetError(f"record {entry['id']}: missing mask file {mask_path}")
        pose = np.asarray(entry["pose"], dtype=float).reshape(4, 4)
        records.append(
            ImageRecord(
                id=entry["id"],
                pose=pose,
                fx=entry["fx"],
                fy=entry["fy"],
                cx=entry["cx"],
                cy=entry["cy"],
                width=entry["width"],
                height=entry["height"],
                image=read_raster(image_path),
                mask=read_raster(mask_path),
                shutter=entry["shutter"],
                gain=entry["gain"],
                capture_id=entry["capture_id"],
                segment_id=entry["segment_id"],
                timestamp=entry["timestamp"],
            )
        )
    return manifest, records


# --- scene factories -----------------------------------------------------


def make_wall_scene(seed=0):
    """A single textured wall facing the cameras; one calm capture."""
    wall = Box(lo=(0.25, -0.6, 0.0), hi=(0.35, 0.6, 0.45), base_color=(0.75, 0.5, 0.35))
    capture = CaptureParams(sun_rgb=(0.25, 0.25, 0.25), ambient_rgb=(0.6, 0.6, 0.62), fog_density=0.4)
    return SceneSpec(
        seed=seed,
        streets=[np.array([[-0.1, 0.0, 0.0], [0.1, 0.0, 0.0]])],
        boxes=[wall],
        captures=[capture],
    )


def _street_buildings(rng, x0, x1, y_offsets, n_per_side):
    boxes = []
    xs = np.linspace(x0, x1, n_per_side + 1)
    palette = np.array(
        [
            [0.78, 0.55, 0.38],
            [0.55, 0.62, 0.72],
            [0.72, 0.68, 0.52],
            [0.6, 0.45, 0.45],
            [0.5, 0.66, 0.55],
            [0.7, 0.6, 0.68],
        ]
    )
    for side, y0 in enumerate(y_offsets):
        for i in range(n_per_side):
            gap = 0.015 + 0.01 * rng.random()
            lo_x, hi_x = xs[i] + gap / 2, xs[i + 1] - gap / 2
            depth = 0.05 + 0.04 * rng.random()
            height = 0.1 + 0.14 * rng.random()
            y_lo = y0 if y0 > 0 else y0 - depth
            y_hi = y0 + depth if y0 > 0 else y0
            color = palette[rng.integers(len(palette))] * (0.85 + 0.3 * rng.random())
            freq_a = (float(rng.uniform(14, 30)), float(rng.uniform(0, 6)), float(rng.uniform(10, 26)))
            freq_b = (float(rng.uniform(0, 8)), float(rng.uniform(12, 30)), float(rng.uniform(14, 34)))
            boxes.append(
                Box(
                    lo=(lo_x, y_lo, 0.0),
                    hi=(hi_x, y_hi, height),
                    base_color=tuple(np.clip(color, 0.1, 0.95)),
                    freq_a=freq_a,
                    freq_b=freq_b,
                    phase=(float(rng.uniform(0, 6.28)), float(rng.uniform(0, 6.28))),
                )
            )
    return boxes


def _default_captures(rng, n_runs, appearance_strength=0.0):
    caps = []
    for _ in range(n_runs):
        tint = 1.0 + appearance_strength * rng.uniform(-1.0, 1.0, size=3)
        sun_elev = rng.uniform(0.5, 1.2)
        sun_az = rng.uniform(0, 2 * np.pi)
        sun = np.array([np.cos(sun_az), np.sin(sun_az), np.tan(sun_elev)])
        sun /= np.linalg.norm(sun)
        brightness = 1.0 + appearance_strength * rng.uniform(-0.5, 0.5)
        caps.append(
            CaptureParams(
                sun_dir=tuple(sun),
                sun_rgb=tuple(np.clip(0.85 * brightness * tint, 0.05, 1.5)),
                ambient_rgb=tuple(np.clip(0.45 * brightness * tint, 0.05, 1.2)),
                fog_density=2.2,
                sky_horizon=tuple(np.clip(np.array([0.65, 0.72, 0.82]) * tint, 0.05, 1.0)),
                sky_zenith=tuple(np.clip(np.array([0.25, 0.45, 0.75]) * tint, 0.05, 1.0)),
            )
        )
    return caps


def make_street_scene(
    length=1.0,
    n_runs=4,
    seed=7,
    appearance_strength=0.0,
    n_buildings_per_side=6,
    street_half_width=0.07,
    with_transients=False,
):
    """A straight street along x lined with textured buildings.

    ``appearance_strength`` scales per-run lighting/tint variation; 0 gives
    identical conditions across runs.
    """
    rng = np.random.default_rng(seed)
    x0, x1 = -length / 2.0, length / 2.0
    boxes = _street_buildings(rng, x0 - 0.1, x1 + 0.1, (street_half_width, -street_half_width), n_buildings_per_side)
    transients = []
    if with_transients:
        for k in range(2):
            cx = rng.uniform(x0 + 0.15, x1 - 0.15)
            transients.append(
                TransientBox(
                    Box(
                        lo=(cx - 0.02, -0.025, 0.0),
                        hi=(cx + 0.02, 0.015, 0.03),
                        base_color=(0.85, 0.15, 0.12),
                        freq_a=(5.0, 3.0, 7.0),
                        freq_b=(2.0, 6.0, 4.0),
                    ),
                    t_start=k * 1000.0,
                    t_end=k * 1000.0 + 1000.0,
                )
            )
    street = np.array([[x0, 0.0, 0.0], [x1, 0.0, 0.0]])
    return SceneSpec(
        seed=seed,
        streets=[street],
        nodes=[np.array([x0, 0.0, 0.0]), np.array([x1, 0.0, 0.0])],
        boxes=boxes,
        captures=_default_captures(rng, n_runs, appearance_strength),
        transients=transients,
    )


def make_cross_scene(arm=0.5, n_runs=3, seed=11, appearance_strength=0.1):
    """Two perpendicular streets crossing at the origin (4 intersection-ish
    nodes: the crossing plus the four arm ends)."""
    rng = np.random.default_rng(seed)
    boxes = []
    half = 0.07
    boxes += _street_buildings(rng, -arm, arm, (half, -half), max(int(arm * 10), 3))
    # buildings along the y street, rotated roles of x/y
    for b in _street_buildings(rng, -arm, arm, (half, -half), max(int(arm * 10), 3)):
        lo = (b.lo[1], b.lo[0], b.lo[2])
        hi = (b.hi[1], b.hi[0], b.hi[2])
        boxes.append(Box(lo=lo, hi=hi, base_color=b.base_color, freq_a=b.freq_a, freq_b=b.freq_b, phase=b.phase))
    # clear the crossing area
    boxes = [
        b
        for b in boxes
        if not (abs((b.lo[0] + b.hi[0]) / 2) < half + 0.06 and abs((b.lo[1] + b.hi[1]) / 2) < half + 0.06)
    ]
    streets = [
        np.array([[-arm, 0.0, 0.0], [arm, 0.0, 0.0]]),
        np.array([[0.0, -arm, 0.0], [0.0, arm, 0.0]]),
    ]
    nodes = [
        np.array([0.0, 0.0, 0.0]),
        np.array([-arm, 0.0, 0.0]),
        np.array([arm, 0.0, 0.0]),
        np.array([0.0, -arm, 0.0]),
        np.array([0.0, arm, 0.0]),
    ]
    return SceneSpec(
        seed=seed,
        streets=streets,
        nodes=nodes,
        boxes=boxes,
        captures=_default_captures(rng, n_runs, appearance_strength),
    )
