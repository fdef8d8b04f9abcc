"""Binary model checkpoints.

Layout:

    bytes 0-5   magic ``NBCKPT``
    bytes 6-7   format version (uint16 LE)
    bytes 8-11  header length H (uint32 LE)
    bytes 12-   H bytes of canonical JSON header (utf-8)
    then        float64 little-endian parameter arrays, raw, back to back,
                in the declaration order listed under header["arrays"]

The header records the encoding config, every network's layer shapes and
activations, the block origin/radius, feature flags, appearance/segment id
maps, and the shape of every array so the payload can be sliced without
guessing.  Save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor, data_of
from .encoding import EncodingConfig
from .nets import (
    APPEARANCE_DIM,
    AppearanceTable,
    BlockModel,
    MlpParams,
    ModelConfig,
    PoseOffset,
)

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointError"]

MAGIC = b"NBCKPT"
VERSION = 1


class CheckpointError(ValueError):
    """Raised for malformed or incompatible checkpoint files."""


def _net_meta(net: MlpParams):
    return {"shapes": [list(s) for s in net.shapes()], "activations": list(net.activations)}


def save_checkpoint(model: BlockModel, path, extra=None) -> None:
    """Serialize ``model`` (parameters as float64 LE) plus optional metadata."""
    arrays = []  # (name, np.ndarray) in declaration order
    for name, tensor in model.named_parameters(include_pose=False).items():
        arrays.append((name, data_of(tensor)))
    if not model.config.use_appearance:
        arrays.append(("appearance", data_of(model.appearance.embeddings)))
    for seg in sorted(model.pose_offsets):
        arrays.append((f"pose.{seg}.translation", data_of(model.pose_offsets[seg].translation)))
        arrays.append((f"pose.{seg}.rotation_residual", data_of(model.pose_offsets[seg].rotation_residual)))

    header = {
        "version": VERSION,
        "encoding": {
            "levels_position": model.encoding.levels_position,
            "levels_direction": model.encoding.levels_direction,
            "levels_exposure": model.encoding.levels_exposure,
            "exposure_scale": model.encoding.exposure_scale,
        },
        "model_config": {
            "density_layers": model.config.density_layers,
            "density_width": model.config.density_width,
            "color_layers": model.config.color_layers,
            "color_width": model.config.color_width,
            "visibility_layers": model.config.visibility_layers,
            "visibility_width": model.config.visibility_width,
            "use_appearance": model.config.use_appearance,
            "use_exposure": model.config.use_exposure,
            "dtype": model.config.dtype,
        },
        "nets": {
            "sigma_coarse": _net_meta(model.f_sigma_coarse),
            "color_coarse": _net_meta(model.f_color_coarse),
            "sigma_fine": _net_meta(model.f_sigma),
            "color_fine": _net_meta(model.f_color),
            "visibility": _net_meta(model.f_visibility),
        },
        "origin": [float(x) for x in model.origin],
        "radius": model.radius,
        "appearance_ids": sorted(int(k) for k in getattr(model, "appearance_id_map", {})),
        "segment_ids": sorted(int(k) for k in getattr(model, "segment_id_map", {})),
        "pose_segments": sorted(int(s) for s in model.pose_offsets),
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", VERSION, len(blob)))
        f.write(blob)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> BlockModel:
    """Reconstruct a :class:`BlockModel` from a checkpoint file."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:6] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<HI", data[6:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    cfg = ModelConfig(**header["model_config"])
    dtype = np.dtype(cfg.dtype).type
    enc = EncodingConfig(**header["encoding"])

    offset = 12 + hlen
    loaded = {}
    for meta in header["arrays"]:
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        raw = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        offset += count * 8
        loaded[meta["name"]] = raw.reshape(shape).astype(dtype)
    if offset != len(data):
        raise CheckpointError(f"{path}: trailing bytes after parameter payload")

    def rebuild_net(key):
        meta = header["nets"][key]
        weights, biases = [], []
        for i in range(len(meta["shapes"])):
            weights.append(Tensor(loaded[f"{key}.w{i}"], requires_grad=True))
            biases.append(Tensor(loaded[f"{key}.b{i}"], requires_grad=True))
        return MlpParams(weights, biases, list(meta["activations"]))

    appearance = AppearanceTable(Tensor(loaded["appearance"].reshape(-1, APPEARANCE_DIM), requires_grad=True))
    offsets = {
        int(seg): PoseOffset(
            Tensor(loaded[f"pose.{seg}.translation"], requires_grad=True),
            Tensor(loaded[f"pose.{seg}.rotation_residual"], requires_grad=True),
        )
        for seg in header["pose_segments"]
    }
    model = BlockModel(
        f_sigma=rebuild_net("sigma_fine"),
        f_color=rebuild_net("color_fine"),
        f_sigma_coarse=rebuild_net("sigma_coarse"),
        f_color_coarse=rebuild_net("color_coarse"),
        f_visibility=rebuild_net("visibility"),
        appearance=appearance,
        pose_offsets=offsets,
        origin=np.asarray(header["origin"], dtype=dtype),
        radius=float(header["radius"]),
        encoding=enc,
        sky_logit=Tensor(loaded["sky_logit"], requires_grad=True),
        config=cfg,
    )
    model.appearance_id_map = {int(k): i for i, k in enumerate(header["appearance_ids"])}
    model.segment_id_map = {int(k): i for i, k in enumerate(header["segment_ids"])}
    model.checkpoint_extra = header.get("extra", {})
    return model
