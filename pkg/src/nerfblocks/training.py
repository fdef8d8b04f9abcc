"""Loss assembly, per-segment pose-offset application, and the per-block
training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoding import EncodingConfig, exposure_encode, positional_encode
from .nets import (
    APPEARANCE_DIM,
    BlockModel,
    ConfigurationError,
    ModelConfig,
    color_forward,
    density_forward,
    init_block_model,
)
from .optim import OptimizerState, adam_step, lr_schedule
from .rendering import DEFAULT_T_NEAR, render_rays, block_t_far
from .scenes import geographic_filter

__all__ = [
    "TrainConfig",
    "TrainingError",
    "orthonormalize_rows",
    "apply_pose_offset",
    "pose_regularization",
    "photometric_loss",
    "visibility_loss",
    "train_block",
    "fit_appearance_embedding",
]

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Raised on divergence or unusable training configuration."""


@dataclass
class TrainConfig:
    """Per-block training hyperparameters (desk-scale defaults)."""

    iterations: int = 20000
    batch_rays: int = 128
    lr_init: float = 2e-3
    lr_final: float = 2e-5
    warmup: int = 1024
    visibility_loss_scale: float = 1e-6
    pose_reg_start: float = 1e5
    pose_reg_end: float = 1e-1
    pose_reg_decay_steps: int = 5000
    seed: int = 0
    n_coarse: int = 32
    n_fine: int = 32
    coarse_loss_weight: float = 0.1
    optimize_poses: bool = True
    log_every: int = 100
    max_skipped_fraction: float = 1e-3

    def __post_init__(self):
        if min(self.iterations, self.batch_rays, self.warmup) <= 0:
            raise ConfigurationError("iterations, batch_rays and warmup must be positive")
        if self.iterations < self.warmup:
            raise ConfigurationError("iterations must be >= warmup")


def orthonormalize_rows(mat):
    """Gram-Schmidt on the rows of a 3x3 matrix, det forced to +1.

    Tape-safe: gradients flow through the projection; the determinant sign
    decision is taken on detached values.
    """
    rows = [mat[i] for i in range(3)]
    basis = []
    for r in rows:
        for b in basis:
            r = r - ad.tensor_sum(r * b) * b
        norm = ad.sqrt(ad.tensor_sum(r * r))
        if float(ad.data_of(norm)) < 1e-12:
            raise TrainingError("orthonormalization failed: singular I + residual")
        basis.append(r / norm)
    u0, u1, u2 = basis
    d0, d1, d2 = (ad.data_of(b) for b in basis)
    det = float(np.dot(np.cross(d0, d1), d2))
    if det < 0.0:
        u2 = -u2
    return ad.stack([u0, u1, u2], axis=0)


def apply_pose_offset(pose, offset):
    """Compose a camera-to-world pose with a learned offset.

    Rotation: orthonormalize(I + residual) applied in the world frame;
    translation added in the world frame.  Returns a 4x4 of the same kind as
    the offset parameters (Tensor-valued offsets give a Tensor pose).
    """
    pose = np.asarray(pose, dtype=float) if not isinstance(pose, Tensor) else pose
    residual = offset.rotation_residual
    eye = np.eye(3, dtype=ad.data_of(residual).dtype)
    q = orthonormalize_rows(eye + residual)
    r_new = ad.matmul(q, pose[:3, :3] if not isinstance(pose, Tensor) else ad.take(pose, (slice(0, 3), slice(0, 3))))
    t_new = (pose[:3, 3] if not isinstance(pose, Tensor) else ad.take(pose, (slice(0, 3), 3))) + offset.translation
    if isinstance(r_new, Tensor) or isinstance(t_new, Tensor):
        top = ad.concatenate([r_new, ad.reshape(t_new, (3, 1))], axis=1)
        bottom = np.array([[0.0, 0.0, 0.0, 1.0]], dtype=ad.data_of(top).dtype)
        return ad.concatenate([top, bottom], axis=0)
    out = np.eye(4)
    out[:3, :3] = r_new
    out[:3, 3] = t_new
    return out


def _pose_reg_weight(step, cfg: TrainConfig) -> float:
    frac = min(step / cfg.pose_reg_decay_steps, 1.0)
    return cfg.pose_reg_start + (cfg.pose_reg_end - cfg.pose_reg_start) * frac


def pose_regularization(offsets, step, cfg: TrainConfig):
    """Decaying elementwise squared-norm penalty over all pose offsets."""
    weight = _pose_reg_weight(step, cfg)
    total = None
    for seg in sorted(offsets):
        off = offsets[seg]
        term = ad.tensor_sum(off.translation * off.translation) + ad.tensor_sum(
            off.rotation_residual * off.rotation_residual
        )
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.zeros(()))
    return total * weight


def photometric_loss(pred, target, mask=None):
    """Mean squared error over unmasked rays (mask 1 = transient, ignored).

    All-masked batches contribute zero loss (reported via the logger).
    """
    target = ad.data_of(target)
    if mask is not None:
        keep = np.asarray(ad.data_of(mask)) == 0
        if not keep.any():
            log.warning("photometric_loss: no supervision, every ray in the batch is masked")
            zero = ad.tensor_sum(pred * 0.0)
            return zero
        pred = ad.take(pred, np.nonzero(keep)[0])
        target = target[keep]
    return ad.tensor_mean((pred - target) ** 2)


def visibility_loss(v_pred, transmittance_targets, scale=1e-6):
    """Scaled MSE regression of per-sample transmittance; targets are
    detached so no gradient reaches the density network through this loss."""
    targets = ad.detach(transmittance_targets)
    return ad.tensor_mean((v_pred - targets) ** 2) * scale


def _dense_id_map(values):
    uniq = sorted(set(int(v) for v in values))
    return {v: i for i, v in enumerate(uniq)}


class _RayStore:
    """Flattened (record, pixel) training pool with cached world-frame rays."""

    def __init__(self, records, dtype, exclude_masked=True):
        dirs_cache = {}
        self.origins = np.stack([r.pose[:3, 3] for r in records]).astype(dtype)
        self.rotations = np.stack([r.pose[:3, :3] for r in records]).astype(dtype)
        dirs_world = []
        targets = []
        base_radius = []
        rec_of_ray = []
        pix_of_ray = []
        from .rendering import Camera

        for ri, rec in enumerate(records):
            key = (rec.fx, rec.fy, rec.cx, rec.cy, rec.width, rec.height)
            if key not in dirs_cache:
                cam = Camera(pose=np.eye(4), fx=rec.fx, fy=rec.fy, cx=rec.cx, cy=rec.cy, width=rec.width, height=rec.height)
                dirs_cache[key] = cam.pixel_directions(dtype)
            d_cam = dirs_cache[key]
            keep = np.ones(rec.width * rec.height, dtype=bool)
            if exclude_masked:
                keep = rec.mask.reshape(-1) == 0
            idx = np.nonzero(keep)[0]
            dirs_world.append((d_cam[idx] @ rec.pose[:3, :3].T.astype(dtype)))
            targets.append((rec.image.reshape(-1, 3)[idx] / 255.0).astype(dtype))
            base_radius.append(np.full(idx.size, 2.0 / (rec.fx * np.sqrt(12.0)), dtype=dtype))
            rec_of_ray.append(np.full(idx.size, ri, dtype=np.int32))
            pix_of_ray.append(idx.astype(np.int32))
        self.dirs = np.concatenate(dirs_world)
        self.targets = np.concatenate(targets)
        self.base_radius = np.concatenate(base_radius)
        self.rec_of_ray = np.concatenate(rec_of_ray)
        self.pix_of_ray = np.concatenate(pix_of_ray)
        self.segment_of_rec = np.array([r.segment_id for r in records], dtype=np.int32)
        self.appearance_of_rec = np.array([r.capture_id for r in records], dtype=np.int32)
        self.exposure_of_rec = np.array([[r.shutter, r.gain] for r in records], dtype=np.float64)

    def __len__(self):
        return self.dirs.shape[0]


def train_block(records, origin, radius, cfg: TrainConfig, model_config: ModelConfig | None = None,
                encoding: EncodingConfig | None = None, pre_filtered=False):
    """Train one block on the records within its geographic bounds.

    Returns (model, log_records): the trained :class:`BlockModel` plus one
    dict per logged step (step, losses, lr, pose regularization weight).
    Appearance and segment ids are densely remapped over the filtered slice;
    the mapping is stored on the returned model for later lookups.
    """
    t_start = time.time()
    slice_records = records if pre_filtered else geographic_filter(records, origin, radius)
    if not slice_records:
        raise ConfigurationError("no training records inside the block after geographic filtering")
    model_config = model_config or ModelConfig()
    encoding = encoding or EncodingConfig()
    dtype = np.dtype(model_config.dtype).type

    app_map = _dense_id_map(r.capture_id for r in slice_records)
    seg_map = _dense_id_map(r.segment_id for r in slice_records)
    model = init_block_model(
        origin,
        radius,
        n_appearance=len(app_map),
        segment_ids=sorted(seg_map.values()),
        encoding=encoding,
        config=model_config,
        seed=cfg.seed,
    )
    model.appearance_id_map = app_map
    model.segment_id_map = seg_map

    store = _RayStore(slice_records, dtype)
    if len(store) < cfg.batch_rays:
        raise ConfigurationError("fewer unmasked rays than batch size")
    exposure_enc_of_rec = exposure_encode(
        store.exposure_of_rec[:, 0], store.exposure_of_rec[:, 1], model.encoding
    ).astype(dtype)
    seg_dense_of_rec = np.array([seg_map[int(s)] for s in store.segment_of_rec], dtype=np.int32)
    app_dense_of_rec = np.array([app_map[int(a)] for a in store.appearance_of_rec], dtype=np.int32)

    rng = np.random.default_rng(cfg.seed)
    params = model.named_parameters(include_pose=cfg.optimize_poses)
    if not cfg.optimize_poses:
        for off in model.pose_offsets.values():
            off.translation.requires_grad = False
            off.rotation_residual.requires_grad = False
    state = OptimizerState()
    t_near = np.full(cfg.batch_rays, DEFAULT_T_NEAR, dtype=dtype)
    t_far = np.full(cfg.batch_rays, block_t_far(model), dtype=dtype)
    logs = []

    for step in range(cfg.iterations):
        ray_idx = rng.integers(0, len(store), cfg.batch_rays)
        rec_idx = store.rec_of_ray[ray_idx]
        dirs0 = store.dirs[ray_idx]
        orig0 = store.origins[rec_idx]
        target = store.targets[ray_idx]
        seg_dense = seg_dense_of_rec[rec_idx]
        app_ids = app_dense_of_rec[rec_idx]
        expo_enc = exposure_enc_of_rec[rec_idx] if model.config.use_exposure else None

        if cfg.optimize_poses and model.pose_offsets:
            origins, directions = _offset_rays(model, orig0, dirs0, seg_dense, dtype)
        else:
            origins, directions = orig0, dirs0

        out = render_rays(
            model,
            origins,
            directions,
            t_near,
            t_far,
            store.base_radius[ray_idx],
            rng,
            appearance_ids=app_ids if model.config.use_appearance else None,
            exposure_encoded=expo_enc,
            n_coarse=cfg.n_coarse,
            n_fine=cfg.n_fine,
            want_visibility=True,
        )
        sky = model.sky_color()
        coarse_rgb = out["coarse"]["rgb"] + ad.reshape(1.0 - out["coarse"]["acc"], (-1, 1)) * ad.reshape(sky, (1, 3))
        loss_fine = photometric_loss(out["rgb"], target)
        loss_coarse = photometric_loss(coarse_rgb, target)
        loss_vis = visibility_loss(out["vis_samples"], out["vis_targets"], cfg.visibility_loss_scale)
        loss = loss_fine + cfg.coarse_loss_weight * loss_coarse + loss_vis
        if cfg.optimize_poses and model.pose_offsets:
            loss_pose = pose_regularization(model.pose_offsets, step, cfg)
            loss = loss + loss_pose
        else:
            loss_pose = None

        loss_val = float(ad.data_of(loss))
        if not np.isfinite(loss_val):
            _diagnose_nonfinite(model, origins, directions, t_near, t_far, store.base_radius[ray_idx],
                                rng, app_ids, expo_enc, cfg)
            raise TrainingError(f"training diverged: non-finite loss at step {step}")

        ad.backward(loss)
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        lr = lr_schedule(step + 1, cfg.iterations, cfg.warmup, cfg.lr_init, cfg.lr_final)
        adam_step(state, params, grads, lr)
        for p in params.values():
            p.grad = None

        if step % cfg.log_every == 0 or step == cfg.iterations - 1:
            logs.append(
                {
                    "step": step,
                    "loss": loss_val,
                    "photometric_fine": float(ad.data_of(loss_fine)),
                    "photometric_coarse": float(ad.data_of(loss_coarse)),
                    "visibility": float(ad.data_of(loss_vis)),
                    "pose_reg": float(ad.data_of(loss_pose)) if loss_pose is not None else 0.0,
                    "lr": lr,
                    "pose_reg_weight": _pose_reg_weight(step, cfg) if cfg.optimize_poses else 0.0,
                }
            )

    if state.skipped_steps > cfg.max_skipped_fraction * cfg.iterations:
        raise TrainingError(
            f"{state.skipped_steps} optimizer steps skipped (> {cfg.max_skipped_fraction:.1%} of run)"
        )
    log.info(
        "trained block at %s (radius %.3g) on %d records / %d rays in %.1fs",
        np.asarray(origin).round(3).tolist(), radius, len(slice_records), len(store), time.time() - t_start,
    )
    return model, logs


def _offset_rays(model, orig0, dirs0, seg_dense, dtype):
    """Apply per-segment learned pose offsets to a mixed batch of rays."""
    origin_parts = []
    dir_parts = []
    order = np.argsort(seg_dense, kind="stable")
    inv = np.empty_like(order)
    inv[order] = np.arange(order.size)
    sorted_seg = seg_dense[order]
    boundaries = np.flatnonzero(np.diff(sorted_seg)) + 1
    groups = np.split(order, boundaries)
    for grp in groups:
        seg = int(seg_dense[grp[0]])
        off = model.pose_offsets[seg]
        eye = np.eye(3, dtype=dtype)
        q = orthonormalize_rows(eye + off.rotation_residual)
        d = ad.matmul(Tensor(dirs0[grp]) if not isinstance(dirs0, Tensor) else dirs0, ad.transpose(q))
        o = orig0[grp] + ad.reshape(off.translation, (1, 3))
        dir_parts.append(d)
        origin_parts.append(o)
    directions = ad.concatenate(dir_parts, axis=0)
    origins = ad.concatenate(origin_parts, axis=0)
    return ad.take(origins, inv), ad.take(directions, inv)


def _diagnose_nonfinite(model, origins, directions, t_near, t_far, base_radius, rng, app_ids, expo_enc, cfg):
    """Re-run the failing batch with finite checks to name the guilty op."""
    try:
        with ad.finite_checks(True):
            render_rays(
                model,
                ad.data_of(origins),
                ad.data_of(directions),
                t_near,
                t_far,
                base_radius,
                rng,
                appearance_ids=app_ids if model.config.use_appearance else None,
                exposure_encoded=expo_enc,
                n_coarse=cfg.n_coarse,
                n_fine=cfg.n_fine,
            )
    except ad.GradientError as e:
        log.error("non-finite diagnostics: %s", e)


def fit_appearance_embedding(
    model: BlockModel,
    origins,
    directions,
    t_near,
    t_far,
    base_radius,
    target_rgb,
    init_embedding=None,
    exposure=(1.0, 1.0),
    iterations=100,
    lr=0.05,
    seed=0,
    n_coarse=32,
    n_fine=32,
):
    """Optimize a single appearance code against target colors, weights frozen.

    The density path does not depend on the code, so sample features, fine
    weights and transmittances are computed once and cached; each iteration
    only re-runs the color network.  Returns (embedding, per-iteration
    losses); the reported loss sequence of accepted (best-so-far) iterates is
    non-increasing and the model parameters are untouched.
    """
    if not model.config.use_appearance:
        raise ConfigurationError("model has no appearance input to optimize")
    dtype = model.dtype
    b = origins.shape[0]
    rng = np.random.default_rng(seed)
    t_near = np.broadcast_to(np.asarray(t_near, dtype=dtype), (b,))
    t_far = np.broadcast_to(np.asarray(t_far, dtype=dtype), (b,))
    base_radius = np.broadcast_to(np.asarray(base_radius, dtype=dtype), (b,))

    with ad.no_grad():
        out = render_rays(
            model,
            origins.astype(dtype),
            directions.astype(dtype),
            t_near,
            t_far,
            base_radius,
            rng,
            appearance_embedding=np.zeros(APPEARANCE_DIM, dtype=dtype),
            exposure=np.broadcast_to(np.asarray(exposure, dtype=float), (b, 2)),
            n_coarse=n_coarse,
            n_fine=n_fine,
        )
        fine = out["fine"] if "fine" in out else out["coarse"]
        bounds = out.get("fine_bounds", out["coarse_bounds"])
        s = bounds.shape[1] - 1
        _, feature = density_forward(model.f_sigma, fine["pos_feats"])
        weights = ad.data_of(fine["weights"])
        acc = ad.data_of(fine["acc"])
        dir_enc = positional_encode(directions.astype(dtype), model.encoding.levels_direction)
        if model.config.use_exposure:
            expo = np.broadcast_to(np.asarray(exposure, dtype=float), (b, 2))
            expo_enc = exposure_encode(expo[:, 0], expo[:, 1], model.encoding).astype(dtype)
        else:
            expo_enc = None
        sky = ad.data_of(model.sky_color())
        feature = ad.data_of(feature)

    target = np.asarray(ad.data_of(target_rgb), dtype=dtype).reshape(b, 3)
    if init_embedding is None:
        init_embedding = model.appearance.mean_embedding()
    emb = Tensor(np.asarray(init_embedding, dtype=dtype).copy(), requires_grad=True)
    opt = OptimizerState()
    best = (np.inf, emb.data.copy())
    losses = []
    base = weights[..., None]
    leftover = (1.0 - acc)[:, None] * sky[None, :]
    for it in range(iterations):
        emb_rows = ad.broadcast_to(ad.reshape(emb, (1, APPEARANCE_DIM)), (b, APPEARANCE_DIM))
        rgb_flat = color_forward(model.f_color, feature, dir_enc, expo_enc, emb_rows, n_samples=s)
        colors = ad.reshape(rgb_flat, (b, s, 3))
        rgb = ad.tensor_sum(colors * base, axis=-2) + leftover
        loss = ad.tensor_mean((rgb - target) ** 2)
        val = float(ad.data_of(loss))
        if val < best[0]:
            best = (val, emb.data.copy())
        losses.append(best[0])
        ad.backward(loss)
        adam_step(opt, {"emb": emb}, {"emb": emb.grad}, lr)
        emb.grad = None
    return best[1], losses
