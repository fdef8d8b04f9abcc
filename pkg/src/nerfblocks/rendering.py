"""Ray generation, stratified and hierarchical sampling, and volumetric
compositing, producing color, expected depth, and visibility renders.

The sampling and compositing core works on batches of rays and runs on
either plain arrays or autodiff Tensors; the training loop drives the same
code paths with gradients enabled.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .encoding import (
    InvalidInputError,
    exposure_encode,
    frustum_to_gaussian,
    integrated_positional_encode,
    pixel_base_radius,
    positional_encode,
)
from .nets import BlockModel, ConfigurationError, color_forward, density_forward, visibility_forward

__all__ = [
    "Camera",
    "RayBatch",
    "RenderConfig",
    "RenderOutput",
    "generate_rays",
    "stratified_sample",
    "hierarchical_resample",
    "composite_ray",
    "composite",
    "render_rays",
    "render_ray",
    "render_image",
    "render_visibility",
    "DEPTH_EPS",
]

log = logging.getLogger(__name__)

DEPTH_EPS = 1e-6
DEFAULT_T_NEAR = 0.05


@dataclass
class Camera:
    """Pinhole camera: camera-to-world pose and intrinsics.

    Rays go through integer pixel coordinates; camera axes are x-right,
    y-down, z-forward.
    """

    pose: np.ndarray  # (4, 4) rigid camera-to-world
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    camera_id: int = 0

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigurationError("focal lengths must be positive")
        R = self.pose[:3, :3]
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-6 or np.linalg.det(R) < 0:
            raise ConfigurationError("camera pose must be a rigid transform")

    def pixel_directions(self, dtype=np.float64):
        """Unit ray directions in the camera frame, one per pixel, (H*W, 3)."""
        u, v = np.meshgrid(np.arange(self.width), np.arange(self.height))
        d = np.stack(
            [(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u, dtype=float)],
            axis=-1,
        ).reshape(-1, 3)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return d.astype(dtype)


@dataclass
class RayBatch:
    """A batch of rays with per-ray metadata (arrays share leading length)."""

    origins: np.ndarray  # (N, 3)
    directions: np.ndarray  # (N, 3) unit
    t_near: np.ndarray  # (N,)
    t_far: np.ndarray  # (N,)
    base_radius: np.ndarray  # (N,)
    pixels: np.ndarray | None = None  # (N, 2) (row, col)
    camera_ids: np.ndarray | None = None
    segment_ids: np.ndarray | None = None
    appearance_ids: np.ndarray | None = None
    exposure: np.ndarray | None = None  # (N, 2) shutter, gain

    def __post_init__(self):
        if np.any(self.t_near <= 0) or np.any(self.t_far <= self.t_near):
            raise InvalidInputError("rays require 0 < t_near < t_far")
        norms = np.linalg.norm(self.directions, axis=-1)
        tol = 1e-9 if self.directions.dtype.itemsize >= 8 else 1e-5
        if np.abs(norms - 1.0).max() > tol:
            raise InvalidInputError("ray directions must be unit length")

    def __len__(self):
        return self.origins.shape[0]

    def slice(self, idx) -> "RayBatch":
        pick = lambda a: None if a is None else a[idx]
        return RayBatch(
            self.origins[idx],
            self.directions[idx],
            self.t_near[idx],
            self.t_far[idx],
            self.base_radius[idx],
            pick(self.pixels),
            pick(self.camera_ids),
            pick(self.segment_ids),
            pick(self.appearance_ids),
            pick(self.exposure),
        )


@dataclass
class RenderConfig:
    """Quality knobs for rendering."""

    n_coarse: int = 32
    n_fine: int = 32
    chunk: int = 2048
    compute_visibility: bool = False
    seed: int = 0


@dataclass
class RenderOutput:
    """One block's rendering of a target camera."""

    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W)
    mean_visibility: float = 1.0
    per_pixel_visibility: np.ndarray | None = None  # (H, W)

    def validate(self):
        if self.rgb.shape[:2] != self.depth.shape:
            raise InvalidInputError("rgb/depth shapes disagree")
        if not (np.all(np.isfinite(self.rgb)) and np.all(np.isfinite(self.depth))):
            raise InvalidInputError("render output has non-finite values")
        if self.per_pixel_visibility is not None:
            if self.per_pixel_visibility.shape != self.depth.shape:
                raise InvalidInputError("visibility map shape disagrees")
            if abs(float(self.per_pixel_visibility.mean()) - self.mean_visibility) > 1e-6:
                raise InvalidInputError("mean_visibility inconsistent with per-pixel map")
        return self


def generate_rays(camera: Camera, t_near=DEFAULT_T_NEAR, t_far=1.5, dtype=np.float64) -> RayBatch:
    """One ray per pixel of ``camera``, through integer pixel coordinates."""
    d_cam = camera.pixel_directions(dtype)
    R = camera.pose[:3, :3].astype(dtype)
    origin = camera.pose[:3, 3].astype(dtype)
    dirs = d_cam @ R.T
    n = dirs.shape[0]
    u, v = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    pixels = np.stack([v.ravel(), u.ravel()], axis=-1)
    return RayBatch(
        origins=np.broadcast_to(origin, (n, 3)).copy(),
        directions=dirs,
        t_near=np.full(n, t_near, dtype=dtype),
        t_far=np.full(n, t_far, dtype=dtype),
        base_radius=np.full(n, pixel_base_radius(camera.fx), dtype=dtype),
        pixels=pixels,
        camera_ids=np.full(n, camera.camera_id, dtype=np.int64),
    )


def stratified_sample(t_near, t_far, n: int, rng):
    """One uniform draw per equal-width stratum of [t_near, t_far].

    ``t_near``/``t_far`` may be scalars or (B,) arrays; returns (n,) or
    (B, n) strictly increasing values.
    """
    if n < 2:
        raise InvalidInputError("need at least 2 samples")
    t_near = np.asarray(t_near, dtype=float)
    t_far = np.asarray(t_far, dtype=float)
    batched = t_near.ndim > 0
    b = t_near.shape[0] if batched else 1
    u = (np.arange(n) + np.asarray(rng.random((b, n)))) / n
    out = t_near.reshape(-1, 1) + (t_far - t_near).reshape(-1, 1) * u
    return out if batched else out[0]


def hierarchical_resample(t_vals, weights, n: int, rng):
    """Inverse-CDF draws from the piecewise-constant distribution that puts
    mass ``weights[i]`` on interval [t_vals[i], t_vals[i+1]].

    Accepts (S+1,)/(S,) single-ray inputs or (B, S+1)/(B, S) batches; returns
    sorted samples of shape (n,) or (B, n).  Rows whose weights are all zero
    fall back to stratified sampling over the full range (reported).
    """
    t_vals = np.asarray(t_vals, dtype=float)
    weights = np.asarray(weights, dtype=float)
    single = t_vals.ndim == 1
    if single:
        t_vals, weights = t_vals[None], weights[None]
    if np.any(weights < 0):
        raise InvalidInputError("weights must be non-negative")
    b, s = weights.shape

    total = weights.sum(axis=1)
    dead = total <= 0.0
    safe_w = np.where(dead[:, None], 1.0, weights)
    pdf = safe_w / safe_w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((b, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0

    u = np.asarray(rng.random((b, n)))
    # interval index: number of cdf values <= u, over the interior boundaries
    idx = (cdf[:, None, :-1] <= u[:, :, None]).sum(axis=2) - 1
    idx = np.clip(idx, 0, s - 1)
    rows = np.arange(b)[:, None]
    lo, hi = cdf[rows, idx], cdf[rows, idx + 1]
    t_lo, t_hi = t_vals[rows, idx], t_vals[rows, idx + 1]
    denom = hi - lo
    frac = np.where(denom > 0, (u - lo) / np.where(denom > 0, denom, 1.0), 0.5)
    out = np.sort(t_lo + frac * (t_hi - t_lo), axis=1)

    if dead.any():
        log.warning("hierarchical_resample: %d rays had all-zero weights; used stratified fallback", int(dead.sum()))
        out[dead] = stratified_sample(t_vals[dead, 0], t_vals[dead, -1], n, rng)
    return out[0] if single else out


def composite(sigmas, colors, t_vals):
    """Batched volumetric compositing (Tensor-safe).

    ``sigmas`` (B, S), ``colors`` (B, S, 3), ``t_vals`` (B, S+1) boundaries.
    Returns dict with rgb (B, 3), weights (B, S), trans (B, S), acc (B,),
    depth (B,).  weights_i = T_i (1 - e^{-delta_i sigma_i}) with
    T_i = exp(-sum_{j<i} delta_j sigma_j).
    """
    t_data = ad.data_of(t_vals)
    delta = t_data[..., 1:] - t_data[..., :-1]
    if np.any(delta <= 0):
        raise InvalidInputError("t values must be strictly increasing")
    if not np.all(np.isfinite(ad.data_of(sigmas))):
        raise ad.GradientError("composite received non-finite densities")
    dsig = sigmas * delta
    inclusive = ad.cumsum(dsig, axis=-1)
    trans = ad.exp(-(inclusive - dsig))  # exclusive prefix sum
    alpha = 1.0 - ad.exp(-dsig)
    weights = trans * alpha
    acc = ad.tensor_sum(weights, axis=-1)
    rgb = ad.tensor_sum(ad.reshape(weights, ad.data_of(weights).shape + (1,)) * colors, axis=-2)
    t_mid = 0.5 * (t_data[..., 1:] + t_data[..., :-1])
    depth = ad.tensor_sum(weights * t_mid, axis=-1) / ad.maximum(acc, DEPTH_EPS)
    return {"rgb": rgb, "weights": weights, "trans": trans, "acc": acc, "depth": depth}


def composite_ray(sigmas, colors, t_vals):
    """Single-ray compositing on plain arrays.

    Returns (rgb, weights, transmittances, expected_depth).
    """
    sigmas = np.asarray(sigmas, dtype=float)
    colors = np.asarray(colors, dtype=float)
    t_vals = np.asarray(t_vals, dtype=float)
    if np.any(sigmas < 0):
        raise InvalidInputError("densities must be non-negative")
    out = composite(sigmas[None], colors[None], t_vals[None])
    return out["rgb"][0], out["weights"][0], out["trans"][0], float(out["depth"][0])


def _encode_samples(model: BlockModel, origins, directions, bounds, base_radius):
    """IPE features for the frustums defined by ``bounds`` -> (B*S, Dpos)."""
    g = frustum_to_gaussian(
        origins,
        directions,
        ad.data_of(bounds)[:, :-1],
        ad.data_of(bounds)[:, 1:],
        np.asarray(base_radius)[:, None],
        full_covariance=False,
    )
    feats = integrated_positional_encode(g, model.encoding.levels_position)
    shape = ad.data_of(feats).shape
    return ad.reshape(feats, (shape[0] * shape[1], shape[2]))


def _per_sample(x, n_samples):
    """Broadcast per-ray features (B, D) to (B*S, D)."""
    data_shape = ad.data_of(x).shape
    b, d = data_shape
    x = ad.reshape(x, (b, 1, d))
    x = ad.broadcast_to(x, (b, n_samples, d))
    return ad.reshape(x, (b * n_samples, d))


def _run_pass(model, nets, origins, directions, bounds, base_radius, dir_enc, exposure_enc, app_emb):
    """One network pass over all intervals of ``bounds``; composited result."""
    f_sigma, f_color = nets
    b, s = ad.data_of(bounds).shape[0], ad.data_of(bounds).shape[1] - 1
    pos_feats = _encode_samples(model, origins, directions, bounds, base_radius)
    sigma_flat, feature = density_forward(f_sigma, pos_feats)
    rgb_flat = color_forward(f_color, feature, dir_enc, exposure_enc, app_emb, n_samples=s)
    sigmas = ad.reshape(sigma_flat, (b, s))
    colors = ad.reshape(rgb_flat, (b, s, 3))
    out = composite(sigmas, colors, bounds)
    out["pos_feats"] = pos_feats
    out["n_samples"] = s
    return out


def render_rays(
    model: BlockModel,
    origins,
    directions,
    t_near,
    t_far,
    base_radius,
    rng,
    appearance_ids=None,
    appearance_embedding=None,
    exposure=None,
    exposure_encoded=None,
    n_coarse=32,
    n_fine=32,
    want_visibility=False,
):
    """Two-pass rendering of a ray batch against one block model.

    Coarse pass: stratified boundaries; fine pass: hierarchical resampling
    merged (union) with the coarse boundaries.  Returns a dict of Tensors
    (arrays when no input requires grad): final 'rgb' (sky-composited),
    'depth', 'acc', plus the raw per-pass results under 'coarse'/'fine' and,
    when requested, per-ray 'visibility' and flat 'vis_samples' with their
    'vis_targets'.

    With ``n_fine=0`` the fine pass is skipped and the coarse pass is final.
    """
    b = ad.data_of(origins).shape[0]
    dtype = model.dtype
    t_near = np.broadcast_to(np.asarray(t_near, dtype=dtype), (b,))
    t_far = np.broadcast_to(np.asarray(t_far, dtype=dtype), (b,))
    base_radius = np.broadcast_to(np.asarray(base_radius, dtype=dtype), (b,))

    dir_enc = positional_encode(directions, model.encoding.levels_direction)
    if model.config.use_exposure:
        if exposure_encoded is not None:
            exposure_enc = exposure_encoded
        elif exposure is not None:
            exposure = np.broadcast_to(np.asarray(exposure, dtype=float).reshape(-1, 2), (b, 2))
            exposure_enc = exposure_encode(exposure[:, 0], exposure[:, 1], model.encoding).astype(dtype)
        else:
            raise ConfigurationError("model uses exposure input but none was given")
    else:
        exposure_enc = None
    if model.config.use_appearance:
        if appearance_embedding is not None:
            emb = appearance_embedding
            if ad.data_of(emb).ndim == 1:
                emb = ad.broadcast_to(ad.reshape(emb, (1, -1)), (b, ad.data_of(emb).shape[-1]))
        elif appearance_ids is not None:
            emb = model.appearance.lookup(np.broadcast_to(np.asarray(appearance_ids), (b,)))
        else:
            raise ConfigurationError("model uses appearance input but no ids/embedding given")
    else:
        emb = None

    coarse_bounds = stratified_sample(t_near, t_far, n_coarse + 1, rng).astype(dtype)
    coarse = _run_pass(
        model,
        (model.f_sigma_coarse, model.f_color_coarse),
        origins,
        directions,
        coarse_bounds,
        base_radius,
        dir_enc,
        exposure_enc,
        emb,
    )

    sky = model.sky_color()
    out = {"coarse": coarse, "coarse_bounds": coarse_bounds}

    if n_fine > 0:
        w = ad.data_of(coarse["weights"])
        new_t = hierarchical_resample(coarse_bounds, w, n_fine, rng)
        fine_bounds = np.sort(np.concatenate([coarse_bounds, new_t.astype(dtype)], axis=1), axis=1)
        # resampled values can coincide with coarse boundaries; a tiny strictly
        # increasing ramp keeps every interval non-degenerate
        eps = ((t_far - t_near) * 4e-6)[:, None].astype(dtype)
        fine_bounds = fine_bounds + eps * np.arange(fine_bounds.shape[1], dtype=dtype)
        fine = _run_pass(
            model,
            (model.f_sigma, model.f_color),
            origins,
            directions,
            fine_bounds,
            base_radius,
            dir_enc,
            exposure_enc,
            emb,
        )
        out["fine"] = fine
        out["fine_bounds"] = fine_bounds
        final = fine
        final_bounds = fine_bounds
    else:
        final = coarse
        final_bounds = coarse_bounds

    leftover = ad.reshape(1.0 - final["acc"], (b, 1))
    out["rgb"] = final["rgb"] + leftover * ad.reshape(sky, (1, 3))
    out["depth"] = final["depth"]
    out["acc"] = final["acc"]

    if want_visibility:
        s = ad.data_of(final_bounds).shape[1] - 1
        vis = visibility_forward(model.f_visibility, final["pos_feats"], dir_enc, n_samples=s)
        vis = ad.reshape(vis, (b, s))
        delta = final_bounds[:, 1:] - final_bounds[:, :-1]
        norm = delta / delta.sum(axis=1, keepdims=True)
        out["vis_samples"] = vis
        out["vis_targets"] = ad.detach(final["trans"])
        out["visibility"] = ad.tensor_sum(vis * norm, axis=-1)
    return out


def render_ray(model, ray: RayBatch, rng, n_coarse=32, n_fine=32):
    """Render a single-ray (or small) RayBatch; returns plain arrays."""
    with ad.no_grad():
        out = render_rays(
            model,
            ray.origins.astype(model.dtype),
            ray.directions.astype(model.dtype),
            ray.t_near,
            ray.t_far,
            ray.base_radius,
            rng,
            appearance_ids=ray.appearance_ids,
            exposure=ray.exposure,
            n_coarse=n_coarse,
            n_fine=n_fine,
        )
    return {
        "rgb": ad.data_of(out["rgb"]),
        "depth": ad.data_of(out["depth"]),
        "acc": ad.data_of(out["acc"]),
    }


def block_t_far(model: BlockModel) -> float:
    """Default far plane: three block radii."""
    return 3.0 * model.radius


def render_image(
    model: BlockModel,
    camera: Camera,
    appearance_id=None,
    exposure=(1.0, 1.0),
    cfg: RenderConfig | None = None,
    appearance_embedding=None,
) -> RenderOutput:
    """Render a full camera image from one block (chunked over rays)."""
    cfg = cfg or RenderConfig()
    rays = generate_rays(camera, t_near=DEFAULT_T_NEAR, t_far=block_t_far(model), dtype=model.dtype)
    n = len(rays)
    rgb = np.zeros((n, 3), dtype=np.float64)
    depth = np.zeros(n, dtype=np.float64)
    vis = np.zeros(n, dtype=np.float64) if cfg.compute_visibility else None
    rng = np.random.default_rng(cfg.seed)
    for lo in range(0, n, cfg.chunk):
        hi = min(n, lo + cfg.chunk)
        with ad.no_grad():
            out = render_rays(
                model,
                rays.origins[lo:hi],
                rays.directions[lo:hi],
                rays.t_near[lo:hi],
                rays.t_far[lo:hi],
                rays.base_radius[lo:hi],
                rng,
                appearance_ids=None if appearance_id is None else np.full(hi - lo, appearance_id),
                appearance_embedding=appearance_embedding,
                exposure=np.broadcast_to(np.asarray(exposure, dtype=float), (hi - lo, 2)),
                n_coarse=cfg.n_coarse,
                n_fine=cfg.n_fine,
                want_visibility=cfg.compute_visibility,
            )
        rgb[lo:hi] = np.clip(ad.data_of(out["rgb"]), 0.0, 1.0)
        depth[lo:hi] = ad.data_of(out["depth"])
        if vis is not None:
            vis[lo:hi] = ad.data_of(out["visibility"])
    h, w = camera.height, camera.width
    out_img = RenderOutput(
        rgb=rgb.reshape(h, w, 3),
        depth=depth.reshape(h, w),
        mean_visibility=float(vis.mean()) if vis is not None else 1.0,
        per_pixel_visibility=None if vis is None else vis.reshape(h, w),
    )
    return out_img


def render_visibility(model: BlockModel, camera: Camera, n_samples=32, grid=16) -> float:
    """Mean predicted visibility of ``camera``'s view for this block.

    Deterministic: a low-resolution ray grid with uniformly spaced sample
    boundaries; per-ray averages weight each sample by its interval length.
    """
    low = Camera(
        pose=camera.pose,
        fx=camera.fx * grid / camera.width,
        fy=camera.fy * grid / camera.height,
        cx=camera.cx * grid / camera.width,
        cy=camera.cy * grid / camera.height,
        width=grid,
        height=grid,
        camera_id=camera.camera_id,
    )
    rays = generate_rays(low, t_near=DEFAULT_T_NEAR, t_far=block_t_far(model), dtype=model.dtype)
    b = len(rays)
    bounds = np.linspace(rays.t_near, rays.t_far, n_samples + 1, axis=1).astype(model.dtype)
    with ad.no_grad():
        pos = _encode_samples(model, rays.origins, rays.directions, bounds, rays.base_radius)
        dir_enc = positional_encode(rays.directions, model.encoding.levels_direction)
        v = visibility_forward(model.f_visibility, pos, dir_enc, n_samples=n_samples)
    v = ad.data_of(v).reshape(b, n_samples)
    delta = bounds[:, 1:] - bounds[:, :-1]
    per_ray = (v * delta).sum(axis=1) / delta.sum(axis=1)
    return float(per_ray.mean())
