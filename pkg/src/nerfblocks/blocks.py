"""Multi-block orchestration: layout/placement, candidate selection by
radius and mean visibility, image compositing modes, and appearance matching
with scene-wide propagation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .nets import BlockModel, ConfigurationError
from .rendering import Camera, RenderConfig, RenderOutput, render_image, render_visibility
from .training import fit_appearance_embedding

__all__ = [
    "BlockLayout",
    "BlockEntry",
    "CompositeConfig",
    "CoverageError",
    "NoCoverageError",
    "MatchingError",
    "place_blocks_uniform",
    "place_blocks_intersections",
    "select_blocks",
    "composite_images",
    "choose_matching_location",
    "match_appearance",
    "propagate_appearance",
    "save_layout",
    "load_layout",
    "save_appearance_assignment",
    "load_appearance_assignment",
]

log = logging.getLogger(__name__)


class CoverageError(ConfigurationError):
    """A placement leaves part of the trajectory uncovered."""


class NoCoverageError(RuntimeError):
    """No block passed selection; the caller should relax the radius."""


class MatchingError(RuntimeError):
    """No mutually visible matching location could be found."""


@dataclass
class BlockEntry:
    block_id: int
    origin: np.ndarray  # (3,)
    radius: float
    checkpoint: str = ""

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)


@dataclass
class BlockLayout:
    """Block origins/radii plus overlap adjacency."""

    entries: list  # list[BlockEntry]
    adjacency: set = field(default_factory=set)  # frozenset pairs of block ids

    def entry(self, block_id) -> BlockEntry:
        for e in self.entries:
            if e.block_id == block_id:
                return e
        raise KeyError(f"no block {block_id} in layout")

    def neighbors(self, block_id):
        out = []
        for pair in self.adjacency:
            if block_id in pair:
                (other,) = set(pair) - {block_id}
                out.append(other)
        return sorted(out)

    def validate_coverage(self, points, tol=1e-9):
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        origins = np.stack([e.origin for e in self.entries])
        radii = np.array([e.radius for e in self.entries])
        dist = np.linalg.norm(points[:, None, :] - origins[None], axis=2)
        covered = (dist <= radii[None] + tol).any(axis=1)
        if not covered.all():
            worst = points[~covered][0]
            raise CoverageError(f"trajectory point {worst.round(4).tolist()} lies outside every block")
        return True


def _build_adjacency(entries):
    adjacency = set()
    for i, a in enumerate(entries):
        for b in entries[i + 1 :]:
            if np.linalg.norm(a.origin - b.origin) < a.radius + b.radius:
                adjacency.add(frozenset((a.block_id, b.block_id)))
    return adjacency


def _polyline_arc_points(polyline, step=0.01):
    polyline = np.asarray(polyline, dtype=float)
    seg = np.diff(polyline, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    total = float(seg_len.sum())
    arcs = np.linspace(0.0, total, max(int(total / step) + 2, 2))
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    pts = []
    for a in arcs:
        i = min(np.searchsorted(cum, a, side="right") - 1, len(seg) - 1)
        frac = (a - cum[i]) / max(seg_len[i], 1e-12)
        pts.append(polyline[i] + frac * seg[i])
    return np.asarray(pts), total


def place_blocks_uniform(trajectory, spacing, radius) -> BlockLayout:
    """Blocks at uniform arc-length intervals along the trajectory.

    ``spacing == radius`` gives 50% overlap between adjacent blocks.  Raises
    :class:`CoverageError` when the requested spacing cannot cover the path.
    """
    if spacing > 2.0 * radius:
        raise CoverageError(f"spacing {spacing} exceeds 2 x radius {radius}: coverage impossible")
    pts, total = _polyline_arc_points(trajectory)
    arcs = np.arange(0.0, total + 1e-9, spacing)
    entries = []
    polyline = np.asarray(trajectory, dtype=float)
    seg = np.diff(polyline, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    for bid, a in enumerate(arcs):
        i = min(np.searchsorted(cum, a, side="right") - 1, len(seg) - 1)
        frac = (a - cum[i]) / max(seg_len[i], 1e-12)
        origin = polyline[i] + frac * seg[i]
        entries.append(BlockEntry(block_id=bid, origin=origin, radius=radius))
    layout = BlockLayout(entries=entries, adjacency=_build_adjacency(entries))
    layout.validate_coverage(pts)
    return layout


def place_blocks_intersections(streets, nodes, coverage_fraction=0.75) -> BlockLayout:
    """One block per intersection node; each block reaches 75% of the way
    down every incident street (radius = max over incident streets), with
    connector blocks inserted wherever residual gaps remain."""
    nodes = [np.asarray(n, dtype=float) for n in nodes]
    if not nodes:
        raise ConfigurationError("street graph has no intersection nodes")

    def node_index(p):
        for i, n in enumerate(nodes):
            if np.linalg.norm(p - n) < 1e-9:
                return i
        return None

    street_lens = []
    incident = {i: [] for i in range(len(nodes))}
    for s in streets:
        s = np.asarray(s, dtype=float)
        _, length = _polyline_arc_points(s)
        street_lens.append(length)
        for endpoint in (s[0], s[-1]):
            ni = node_index(endpoint)
            if ni is not None:
                incident[ni].append(length)

    entries = []
    for i, n in enumerate(nodes):
        if not incident[i]:
            continue
        radius = coverage_fraction * max(incident[i])
        entries.append(BlockEntry(block_id=len(entries), origin=n, radius=radius))
    if not entries:
        raise ConfigurationError("no intersection node touches a street")

    # connector insertion: walk each street and plug any uncovered stretch
    all_pts = []
    for s in streets:
        pts, _ = _polyline_arc_points(s)
        all_pts.append(pts)
    for pts in all_pts:
        for _ in range(8):
            origins = np.stack([e.origin for e in entries])
            radii = np.array([e.radius for e in entries])
            dist = np.linalg.norm(pts[:, None, :] - origins[None], axis=2)
            uncovered = ~(dist <= radii[None]).any(axis=1)
            if not uncovered.any():
                break
            gap = pts[uncovered]
            center = gap.mean(axis=0)
            span = np.linalg.norm(gap - center, axis=1).max()
            entries.append(BlockEntry(block_id=len(entries), origin=center, radius=max(span * 1.5, 1e-3)))
            log.info("inserted connector block %d at %s", entries[-1].block_id, center.round(3).tolist())

    layout = BlockLayout(entries=entries, adjacency=_build_adjacency(entries))
    for pts in all_pts:
        layout.validate_coverage(pts)
    return layout


@dataclass
class CompositeConfig:
    """Selection and interpolation settings for merging block renders."""

    selection_radius: float = 0.0  # 0 -> max block radius in the layout
    visibility_threshold: float = 0.05
    mode: str = "idw2d"  # nearest | idw2d | idw3d | pixelwise_visibility | imagewise_visibility
    idw_power: float = 1.0

    def __post_init__(self):
        if self.idw_power <= 0:
            raise ConfigurationError("idw power must be positive")
        if not 0.0 <= self.visibility_threshold <= 1.0:
            raise ConfigurationError("visibility threshold must lie in [0, 1]")
        modes = ("nearest", "idw2d", "idw3d", "pixelwise_visibility", "imagewise_visibility")
        if self.mode not in modes:
            raise ConfigurationError(f"unknown composite mode {self.mode!r}; pick from {modes}")


@dataclass
class BlockCandidate:
    block_id: int
    distance: float
    mean_visibility: float


def select_blocks(layout: BlockLayout, camera: Camera, cfg: CompositeConfig, models: dict) -> list:
    """Distance + mean-visibility filtering of candidate blocks.

    Returns surviving :class:`BlockCandidate` rows sorted by distance
    (nearest first, block id breaking ties).  Raises NoCoverageError when
    nothing survives.
    """
    if not layout.entries:
        raise ConfigurationError("layout has no blocks")
    sel_radius = cfg.selection_radius or max(e.radius for e in layout.entries)
    cam_pos = np.asarray(camera.pose[:3, 3], dtype=float)
    survivors = []
    for entry in layout.entries:
        dist = float(np.linalg.norm(cam_pos - entry.origin))
        if dist > sel_radius:
            continue
        vis = render_visibility(models[entry.block_id], camera)
        if vis < cfg.visibility_threshold:
            log.info("block %d discarded: mean visibility %.3f < %.3f", entry.block_id, vis, cfg.visibility_threshold)
            continue
        survivors.append(BlockCandidate(entry.block_id, dist, vis))
    if not survivors:
        raise NoCoverageError(
            f"no block within radius {sel_radius:g} passed the visibility threshold; relax the selection radius"
        )
    return sorted(survivors, key=lambda c: (c.distance, c.block_id))


def _idw_weights(distances, power):
    d = np.asarray(distances, dtype=float)
    with np.errstate(divide="ignore"):
        w = d ** (-power)
    if np.isinf(w).any():
        w = np.where(np.isinf(w), 1.0, 0.0)
    return w / w.sum()


def composite_images(
    renders: list,
    candidates: list,
    camera: Camera,
    cfg: CompositeConfig,
    layout: BlockLayout | None = None,
) -> np.ndarray:
    """Merge per-block renders of the same camera into one image.

    Weights are always normalized per pixel; pixels with zero total weight
    fall back to the nearest candidate (counted and reported).
    """
    if not renders:
        raise ConfigurationError("need at least one render to composite")
    shapes = {r.rgb.shape for r in renders}
    if len(shapes) != 1:
        raise ConfigurationError("all renders must share a resolution")
    imgs = np.stack([r.rgb for r in renders])  # (K, H, W, 3)
    k, h, w, _ = imgs.shape
    nearest_idx = min(range(k), key=lambda i: (candidates[i].distance, candidates[i].block_id))

    if cfg.mode == "nearest" or k == 1:
        return imgs[nearest_idx].copy()

    if cfg.mode == "idw2d":
        weights = _idw_weights([c.distance for c in candidates], cfg.idw_power)
        return np.einsum("k,khwc->hwc", weights, imgs)

    if cfg.mode == "imagewise_visibility":
        vis = np.array([c.mean_visibility for c in candidates], dtype=float)
        total = vis.sum()
        if total <= 0:
            log.warning("imagewise visibility weights all zero; falling back to nearest")
            return imgs[nearest_idx].copy()
        return np.einsum("k,khwc->hwc", vis / total, imgs)

    if cfg.mode == "pixelwise_visibility":
        maps = []
        for r in renders:
            if r.per_pixel_visibility is None:
                raise ConfigurationError("pixelwise_visibility requires renders with per-pixel visibility")
            maps.append(r.per_pixel_visibility)
        wmap = np.stack(maps)  # (K, H, W)
    elif cfg.mode == "idw3d":
        if layout is None:
            raise ConfigurationError("idw3d requires the layout for block origins")
        # unproject pixels through the nearest block's expected depth
        from .rendering import generate_rays

        rays = generate_rays(camera, t_far=10.0)
        depth = renders[nearest_idx].depth.reshape(-1, 1)
        points = rays.origins + rays.directions * depth  # (H*W, 3)
        wmap = np.empty((k, h, w))
        for i, c in enumerate(candidates):
            origin = layout.entry(c.block_id).origin
            d = np.linalg.norm(points - origin, axis=1).reshape(h, w)
            with np.errstate(divide="ignore"):
                wmap[i] = d ** (-cfg.idw_power)
        wmap = np.where(np.isinf(wmap), 1e12, wmap)
    else:
        raise ConfigurationError(f"unhandled mode {cfg.mode}")

    total = wmap.sum(axis=0)  # (H, W)
    dead = total <= 0.0
    if dead.any():
        log.warning("composite: %d pixels had zero total weight; using nearest render there", int(dead.sum()))
        wmap[:, dead] = 0.0
        wmap[nearest_idx][dead] = 1.0
        total = wmap.sum(axis=0)
    weights = wmap / total  # (K, H, W)
    return np.einsum("khw,khwc->hwc", weights, imgs)


# --- appearance matching -------------------------------------------------


def _point_visibility(model: BlockModel, point, n_dirs=8):
    """Mean f_v over a horizontal ring of view directions at ``point``."""
    from .encoding import positional_encode
    from .nets import visibility_forward

    angles = np.linspace(0.0, 2.0 * np.pi, n_dirs, endpoint=False)
    dirs = np.stack([np.cos(angles), np.sin(angles), np.zeros(n_dirs)], axis=1)
    pts = np.broadcast_to(np.asarray(point, dtype=float), (n_dirs, 3))
    enc_cfg = model.encoding
    # treat the query as a near-point gaussian so the IPE damping is mild
    var = np.full((n_dirs, 3), 1e-8)
    from .encoding import ConicalGaussian, integrated_positional_encode

    g = ConicalGaussian(mu=pts.astype(model.dtype), sigma=None, diag_sigma=var.astype(model.dtype))
    with ad.no_grad():
        pos_enc = integrated_positional_encode(g, enc_cfg.levels_position)
        dir_enc = positional_encode(dirs.astype(model.dtype), enc_cfg.levels_direction)
        v = visibility_forward(model.f_visibility, pos_enc, dir_enc)
    return float(ad.data_of(v).mean())


def choose_matching_location(entry_a: BlockEntry, entry_b: BlockEntry, models: dict, grid=5, min_visibility=0.1):
    """Point in the geometric overlap maximizing min(visibility_a, visibility_b)
    over a deterministic grid."""
    gap = np.linalg.norm(entry_a.origin - entry_b.origin)
    if gap >= entry_a.radius + entry_b.radius:
        raise MatchingError(f"blocks {entry_a.block_id} and {entry_b.block_id} do not overlap")
    lo = np.minimum(entry_a.origin - entry_a.radius, entry_b.origin - entry_b.radius)
    hi = np.maximum(entry_a.origin + entry_a.radius, entry_b.origin + entry_b.radius)
    axes = [np.linspace(lo[i], hi[i], grid) for i in range(2)]
    zs = np.array([0.01, 0.04, 0.08])
    best = (-1.0, None)
    ma, mb = models[entry_a.block_id], models[entry_b.block_id]
    for x in axes[0]:
        for y in axes[1]:
            for z in zs:
                p = np.array([x, y, z])
                if np.linalg.norm(p - entry_a.origin) > entry_a.radius:
                    continue
                if np.linalg.norm(p - entry_b.origin) > entry_b.radius:
                    continue
                score = min(_point_visibility(ma, p), _point_visibility(mb, p))
                if score > best[0]:
                    best = (score, p)
    if best[1] is None or best[0] < min_visibility:
        raise MatchingError(
            f"no mutually visible location between blocks {entry_a.block_id} and {entry_b.block_id} "
            f"(best min-visibility {max(best[0], 0.0):.3f})"
        )
    return best[1]


def _default_look_from(location, trajectory=None, height=0.025, back_off=0.12):
    """Viewpoint for a matching patch: the nearest trajectory pose when a
    trajectory is known, else a camera-height point backed off from the
    location along the street axis."""
    location = np.asarray(location, dtype=float)
    if trajectory is not None:
        pts, _ = _polyline_arc_points(trajectory)
        pts = pts + np.array([0.0, 0.0, height])
        dists = np.linalg.norm(pts - location, axis=1)
        dists = np.where(dists < back_off / 2, np.inf, dists)  # avoid degenerate look-at
        return pts[int(np.argmin(dists))]
    return location + np.array([-back_off, 0.0, height])


def _matching_camera(location, look_from, patch=32, fov_deg=60.0):
    """Small camera at ``look_from`` aimed at ``location``."""
    location = np.asarray(location, dtype=float)
    look_from = np.asarray(look_from, dtype=float)
    forward = location - look_from
    norm = np.linalg.norm(forward)
    if norm < 1e-9:
        forward = np.array([1.0, 0.0, 0.0])
        norm = 1.0
    forward = forward / norm
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-6:
        right = np.array([1.0, 0.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    pose = np.eye(4)
    pose[:3, :3] = np.stack([right, down, forward], axis=1)
    pose[:3, 3] = look_from
    f = patch / (2.0 * np.tan(np.deg2rad(fov_deg) / 2.0))
    return Camera(pose=pose, fx=f, fy=f, cx=(patch - 1) / 2.0, cy=(patch - 1) / 2.0, width=patch, height=patch)


def match_appearance(
    source_model: BlockModel,
    source_embedding,
    target_model: BlockModel,
    matching_location,
    look_from=None,
    iterations=100,
    patch=32,
    lr=0.05,
    render_cfg: RenderConfig | None = None,
    exposure=(1.0, 1.0),
):
    """Optimize the target block's appearance code to match the source's
    render of a patch around the matching location.  Network weights stay
    bit-identical; returns (embedding, loss history).
    """
    render_cfg = render_cfg or RenderConfig()
    if look_from is None:
        look_from = _default_look_from(matching_location)
    cam = _matching_camera(matching_location, look_from, patch=patch)
    src = render_image(
        source_model,
        cam,
        exposure=exposure,
        cfg=render_cfg,
        appearance_embedding=np.asarray(source_embedding, dtype=source_model.dtype),
    )
    from .rendering import generate_rays, block_t_far

    rays = generate_rays(cam, t_far=block_t_far(target_model), dtype=target_model.dtype)
    emb, losses = fit_appearance_embedding(
        target_model,
        rays.origins,
        rays.directions,
        rays.t_near,
        rays.t_far,
        rays.base_radius,
        src.rgb.reshape(-1, 3),
        init_embedding=target_model.appearance.mean_embedding(),
        exposure=exposure,
        iterations=iterations,
        lr=lr,
        n_coarse=render_cfg.n_coarse,
        n_fine=render_cfg.n_fine,
    )
    return emb, losses


def propagate_appearance(
    layout: BlockLayout,
    models: dict,
    root_block: int,
    root_embedding,
    iterations=100,
    trajectory=None,
    render_cfg: RenderConfig | None = None,
):
    """Breadth-first appearance propagation from a root block.

    Each newly reached block optimizes one code against the summed patch
    losses of all already-matched neighbors.  Returns {block_id: embedding}.
    """
    ids = [e.block_id for e in layout.entries]
    if root_block not in ids:
        raise KeyError(f"root block {root_block} not in layout")
    assigned = {root_block: np.asarray(root_embedding, dtype=float)}
    frontier = [root_block]
    visited = {root_block}
    order = []
    while frontier:
        nxt = []
        for b in frontier:
            for nb in layout.neighbors(b):
                if nb not in visited:
                    visited.add(nb)
                    nxt.append(nb)
                    order.append(nb)
        frontier = nxt
    if set(ids) - visited:
        missing = sorted(set(ids) - visited)
        raise ConfigurationError(
            f"adjacency graph is disconnected; blocks {missing} unreachable from root {root_block} "
            "(provide a root per component)"
        )

    for target_id in order:
        matched_neighbors = [nb for nb in layout.neighbors(target_id) if nb in assigned]
        emb = _joint_match(layout, models, target_id, matched_neighbors, assigned, iterations, render_cfg, trajectory)
        assigned[target_id] = emb
        log.info("appearance matched block %d against %s", target_id, matched_neighbors)
    return assigned


def _joint_match(layout, models, target_id, neighbor_ids, assigned, iterations, render_cfg, trajectory=None):
    """Optimize one code against every already-matched neighbor jointly: the
    per-neighbor patch rays and targets are concatenated into one loss."""
    render_cfg = render_cfg or RenderConfig()
    from .rendering import generate_rays, block_t_far

    target_model = models[target_id]
    all_origins, all_dirs, all_tn, all_tf, all_br, all_targets = [], [], [], [], [], []
    for nb in neighbor_ids:
        loc = choose_matching_location(layout.entry(nb), layout.entry(target_id), models)
        cam = _matching_camera(loc, _default_look_from(loc, trajectory))
        src = render_image(models[nb], cam, cfg=render_cfg, appearance_embedding=np.asarray(assigned[nb], dtype=target_model.dtype))
        rays = generate_rays(cam, t_far=block_t_far(target_model), dtype=target_model.dtype)
        all_origins.append(rays.origins)
        all_dirs.append(rays.directions)
        all_tn.append(rays.t_near)
        all_tf.append(rays.t_far)
        all_br.append(rays.base_radius)
        all_targets.append(src.rgb.reshape(-1, 3))
    emb, _ = fit_appearance_embedding(
        target_model,
        np.concatenate(all_origins),
        np.concatenate(all_dirs),
        np.concatenate(all_tn),
        np.concatenate(all_tf),
        np.concatenate(all_br),
        np.concatenate(all_targets),
        iterations=iterations,
        n_coarse=render_cfg.n_coarse,
        n_fine=render_cfg.n_fine,
    )
    return emb


# --- layout / assignment files -------------------------------------------


def save_layout(layout: BlockLayout, path, extra=None) -> None:
    payload = {
        "entries": [
            {
                "block_id": e.block_id,
                "origin": [float(x) for x in e.origin],
                "radius": e.radius,
                "checkpoint": e.checkpoint,
            }
            for e in layout.entries
        ],
        "adjacency": sorted(sorted(pair) for pair in layout.adjacency),
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def load_layout(path) -> BlockLayout:
    d = json.loads(Path(path).read_text())
    entries = [
        BlockEntry(block_id=e["block_id"], origin=e["origin"], radius=e["radius"], checkpoint=e.get("checkpoint", ""))
        for e in d["entries"]
    ]
    adjacency = {frozenset(pair) for pair in d["adjacency"]}
    return BlockLayout(entries=entries, adjacency=adjacency)


def save_appearance_assignment(assignment: dict, path, extra=None) -> None:
    payload = {
        "embeddings": {str(k): [float(x) for x in v] for k, v in assignment.items()},
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def load_appearance_assignment(path) -> dict:
    d = json.loads(Path(path).read_text())
    return {int(k): np.asarray(v, dtype=float) for k, v in d["embeddings"].items()}
