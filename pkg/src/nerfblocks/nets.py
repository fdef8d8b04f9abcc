"""Parameterized differentiable functions: density / color / visibility MLPs,
the appearance-embedding table, and the aggregate per-block model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoding import EncodingConfig

__all__ = [
    "ConfigurationError",
    "MlpParams",
    "AppearanceTable",
    "PoseOffset",
    "BlockModel",
    "ModelConfig",
    "init_mlp",
    "init_block_model",
    "density_forward",
    "color_forward",
    "visibility_forward",
    "APPEARANCE_DIM",
]

APPEARANCE_DIM = 32


class ConfigurationError(ValueError):
    """Raised on shape/configuration mismatches in network wiring."""


@dataclass
class MlpParams:
    """A stack of affine layers with per-layer activations.

    ``weights[i]`` has shape (in_i, out_i); consecutive dimensions chain.
    ``activations[i]`` is one of 'relu', 'linear' and applies after layer i.
    The final layer is linear; heads (softplus/sigmoid) are applied by the
    forward functions.
    """

    weights: list
    biases: list
    activations: list

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ConfigurationError("layer lists must have equal length")
        for i in range(len(self.weights) - 1):
            if ad.data_of(self.weights[i]).shape[1] != ad.data_of(self.weights[i + 1]).shape[0]:
                raise ConfigurationError(
                    f"layer {i} output dim {ad.data_of(self.weights[i]).shape[1]} does not "
                    f"chain into layer {i + 1} input dim {ad.data_of(self.weights[i + 1]).shape[0]}"
                )

    @property
    def in_dim(self) -> int:
        return ad.data_of(self.weights[0]).shape[0]

    @property
    def out_dim(self) -> int:
        return ad.data_of(self.weights[-1]).shape[1]

    def shapes(self):
        return [tuple(ad.data_of(w).shape) for w in self.weights]


def _apply_layers(mlp: MlpParams, x, upto=None):
    n = len(mlp.weights) if upto is None else upto
    for i in range(n):
        x = ad.matmul(x, mlp.weights[i]) + mlp.biases[i]
        if mlp.activations[i] == "relu":
            x = ad.relu(x)
        elif mlp.activations[i] != "linear":
            raise ConfigurationError(f"unknown activation {mlp.activations[i]!r}")
    return x


def _apply_layers_from(mlp: MlpParams, x, start):
    for i in range(start, len(mlp.weights)):
        x = ad.matmul(x, mlp.weights[i]) + mlp.biases[i]
        if mlp.activations[i] == "relu":
            x = ad.relu(x)
        elif mlp.activations[i] != "linear":
            raise ConfigurationError(f"unknown activation {mlp.activations[i]!r}")
    return x


def _check_in_dim(mlp: MlpParams, x, name):
    got = ad.data_of(x).shape[-1]
    if got != mlp.in_dim:
        raise ConfigurationError(f"{name} expects input dim {mlp.in_dim}, got {got}")


def density_forward(params: MlpParams, ipe):
    """Density head: returns (sigma, feature).

    ``sigma`` is softplus of the final linear unit (always >= 0); ``feature``
    is the last hidden activation, consumed by the color network.
    """
    _check_in_dim(params, ipe, "density network")
    feature = _apply_layers(params, ipe, upto=len(params.weights) - 1)
    raw = ad.matmul(feature, params.weights[-1]) + params.biases[-1]
    sigma = ad.softplus(raw)
    if ad.data_of(sigma).shape[-1] == 1:
        sigma = ad.reshape(sigma, ad.data_of(sigma).shape[:-1])
    return sigma, feature


def _split_first_layer(params: MlpParams, sample_parts, ray_parts, n_samples):
    """First layer applied to concat(sample_parts + ray_parts) without
    materializing the per-sample copies of the per-ray inputs.

    ``sample_parts`` rows are (B*S, d); ``ray_parts`` rows are (B, d) and are
    shared by the S samples of each ray.  The first-layer weight matrix is
    sliced per input block and each block contributes its own (cheap) matmul.
    """
    w0, b0 = params.weights[0], params.biases[0]
    got = sum(ad.data_of(p).shape[-1] for p in sample_parts + ray_parts)
    if got != params.in_dim:
        raise ConfigurationError(f"first layer expects input dim {params.in_dim}, got {got}")
    off = 0
    y = None
    for part in sample_parts:
        d = ad.data_of(part).shape[-1]
        term = ad.matmul(part, ad.take(w0, slice(off, off + d)))
        y = term if y is None else y + term
        off += d
    ray_term = None
    for part in ray_parts:
        d = ad.data_of(part).shape[-1]
        term = ad.matmul(part, ad.take(w0, slice(off, off + d)))
        ray_term = term if ray_term is None else ray_term + term
        off += d
    width = ad.data_of(w0).shape[1]
    if ray_term is not None:
        b = ad.data_of(ray_term).shape[0]
        y = ad.reshape(y, (b, n_samples, width))
        y = y + ad.reshape(ray_term, (b, 1, width))
        y = ad.reshape(y, (b * n_samples, width))
    y = y + b0
    if params.activations[0] == "relu":
        y = ad.relu(y)
    return y


def color_forward(params: MlpParams, feature, dir_enc, exposure_enc=None, appearance_emb=None, n_samples=None):
    """Color head: sigmoid RGB from feature + direction (+ exposure,
    appearance when the model uses them).

    With ``n_samples``, feature rows are (B*S, d) while the other inputs are
    per-ray (B, d) and shared across each ray's S samples.
    """
    ray_parts = [p for p in (dir_enc, exposure_enc, appearance_emb) if p is not None]
    if n_samples is None:
        x = ad.concatenate([feature] + ray_parts, axis=-1)
        _check_in_dim(params, x, "color network")
        x = _apply_layers(params, x)
    else:
        x = _split_first_layer(params, [feature], ray_parts, n_samples)
        x = _apply_layers_from(params, x, 1)
    return ad.sigmoid(x)


def visibility_forward(params: MlpParams, pos_enc, dir_enc, n_samples=None):
    """Visibility head: sigmoid scalar per input row.

    With ``n_samples``, ``dir_enc`` is per-ray (B, d) shared across samples.
    """
    if n_samples is None:
        x = ad.concatenate([pos_enc, dir_enc], axis=-1)
        _check_in_dim(params, x, "visibility network")
        x = _apply_layers(params, x)
    else:
        x = _split_first_layer(params, [pos_enc], [dir_enc], n_samples)
        x = _apply_layers_from(params, x, 1)
    v = ad.sigmoid(x)
    return ad.reshape(v, ad.data_of(v).shape[:-1])


@dataclass
class AppearanceTable:
    """Per-capture appearance embeddings, ids dense in [0, n)."""

    embeddings: Tensor  # (n, APPEARANCE_DIM)

    def __post_init__(self):
        if ad.data_of(self.embeddings).ndim != 2 or ad.data_of(self.embeddings).shape[1] != APPEARANCE_DIM:
            raise ConfigurationError(f"appearance embeddings must be (n, {APPEARANCE_DIM})")

    def __len__(self):
        return ad.data_of(self.embeddings).shape[0]

    def lookup(self, ids):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= len(self)):
            raise ConfigurationError("appearance id out of range")
        return ad.take(self.embeddings, ids)

    def mean_embedding(self):
        return ad.data_of(self.embeddings).mean(axis=0)


@dataclass
class PoseOffset:
    """Learned per-segment pose correction: translation plus a residual
    rotation matrix applied as orthonormalize(I + residual)."""

    translation: Tensor  # (3,)
    rotation_residual: Tensor  # (3, 3)


@dataclass
class ModelConfig:
    """Architecture hyperparameters for one block."""

    density_layers: int = 4
    density_width: int = 64
    color_layers: int = 3
    color_width: int = 64
    visibility_layers: int = 4
    visibility_width: int = 32
    use_appearance: bool = True
    use_exposure: bool = True
    dtype: str = "float32"

    def color_in_dim(self, encoding: EncodingConfig) -> int:
        dim = self.density_width + encoding.direction_dim
        if self.use_exposure:
            dim += encoding.exposure_dim
        if self.use_appearance:
            dim += APPEARANCE_DIM
        return dim


def init_mlp(rng, in_dim, width, n_layers, out_dim, dtype=np.float32, zero_head=True) -> MlpParams:
    """He-style fan-in uniform init; the final (head) layer starts at zero so
    untrained heads sit at their neutral activation value."""
    dims = [in_dim] + [width] * (n_layers - 1) + [out_dim]
    weights, biases, acts = [], [], []
    for i in range(len(dims) - 1):
        fan_in = dims[i]
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(dims[i], dims[i + 1])).astype(dtype)
        b = np.zeros(dims[i + 1], dtype=dtype)
        last = i == len(dims) - 2
        if last and zero_head:
            w[:] = 0.0
        weights.append(Tensor(w, requires_grad=True))
        biases.append(Tensor(b, requires_grad=True))
        acts.append("linear" if last else "relu")
    return MlpParams(weights, biases, acts)


@dataclass
class BlockModel:
    """All learnable state of one block: coarse and fine density/color
    networks, the visibility network, appearance table, per-segment pose
    offsets, a trainable sky color, and the block's origin/radius."""

    f_sigma: MlpParams  # fine-pass density network
    f_color: MlpParams  # fine-pass color network
    f_sigma_coarse: MlpParams
    f_color_coarse: MlpParams
    f_visibility: MlpParams
    appearance: AppearanceTable
    pose_offsets: dict  # segment id -> PoseOffset
    origin: np.ndarray  # (3,)
    radius: float
    encoding: EncodingConfig
    sky_logit: Tensor  # (3,), sigmoid -> background color
    config: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.radius <= 0:
            raise ConfigurationError("block radius must be positive")
        enc = self.encoding
        if self.f_sigma.in_dim != enc.position_dim:
            raise ConfigurationError("density input dim does not match position encoding")
        if self.f_visibility.in_dim != enc.position_dim + enc.direction_dim:
            raise ConfigurationError("visibility input dim does not match encodings")
        expect = self.config.color_in_dim(enc)
        if self.f_color.in_dim != expect:
            raise ConfigurationError(
                f"color input dim {self.f_color.in_dim} does not match configured {expect}"
            )

    @property
    def dtype(self):
        return ad.data_of(self.sky_logit).dtype

    def sky_color(self):
        return ad.sigmoid(self.sky_logit)

    def named_parameters(self, include_pose=True):
        """Ordered {name: Tensor} over every trainable array (declaration order)."""
        out = {}
        for net_name, net in (
            ("sigma_coarse", self.f_sigma_coarse),
            ("color_coarse", self.f_color_coarse),
            ("sigma_fine", self.f_sigma),
            ("color_fine", self.f_color),
            ("visibility", self.f_visibility),
        ):
            for i, (w, b) in enumerate(zip(net.weights, net.biases)):
                out[f"{net_name}.w{i}"] = w
                out[f"{net_name}.b{i}"] = b
        out["sky_logit"] = self.sky_logit
        if self.config.use_appearance:
            out["appearance"] = self.appearance.embeddings
        if include_pose:
            for seg in sorted(self.pose_offsets):
                out[f"pose.{seg}.translation"] = self.pose_offsets[seg].translation
                out[f"pose.{seg}.rotation_residual"] = self.pose_offsets[seg].rotation_residual
        return out

    def set_requires_grad(self, flag: bool):
        for t in self.named_parameters().values():
            t.requires_grad = flag


def init_block_model(
    origin,
    radius,
    n_appearance,
    segment_ids=(),
    encoding: EncodingConfig | None = None,
    config: ModelConfig | None = None,
    seed: int = 0,
) -> BlockModel:
    """Seeded construction of a fresh block model."""
    encoding = encoding or EncodingConfig()
    config = config or ModelConfig()
    dtype = np.dtype(config.dtype).type
    rng = np.random.default_rng(seed)

    def density_net():
        return init_mlp(
            rng, encoding.position_dim, config.density_width, config.density_layers + 1, 1, dtype
        )

    def color_net():
        return init_mlp(
            rng, config.color_in_dim(encoding), config.color_width, config.color_layers, 3, dtype
        )

    sigma_c, color_c = density_net(), color_net()
    sigma_f, color_f = density_net(), color_net()
    vis = init_mlp(
        rng,
        encoding.position_dim + encoding.direction_dim,
        config.visibility_width,
        config.visibility_layers,
        1,
        dtype,
    )
    emb = rng.normal(0.0, 0.01, size=(max(n_appearance, 1), APPEARANCE_DIM)).astype(dtype)
    appearance = AppearanceTable(Tensor(emb, requires_grad=True))
    offsets = {
        int(s): PoseOffset(
            Tensor(np.zeros(3, dtype=dtype), requires_grad=True),
            Tensor(np.zeros((3, 3), dtype=dtype), requires_grad=True),
        )
        for s in segment_ids
    }
    sky = Tensor(np.zeros(3, dtype=dtype), requires_grad=True)
    return BlockModel(
        f_sigma=sigma_f,
        f_color=color_f,
        f_sigma_coarse=sigma_c,
        f_color_coarse=color_c,
        f_visibility=vis,
        appearance=appearance,
        pose_offsets=offsets,
        origin=np.asarray(origin, dtype=dtype),
        radius=float(radius),
        encoding=encoding,
        sky_logit=sky,
        config=config,
    )
