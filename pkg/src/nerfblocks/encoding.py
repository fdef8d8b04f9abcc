"""Input featurizations: sinusoidal encodings, integrated encodings over
Gaussians, frustum-to-Gaussian conversion, and exposure encoding.

All functions accept batched inputs (leading axes are preserved) and work on
either plain numpy arrays or autodiff Tensors, so gradients can flow through
the encodings when camera poses are being refined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

__all__ = [
    "ConicalGaussian",
    "EncodingConfig",
    "InvalidInputError",
    "positional_encode",
    "integrated_positional_encode",
    "frustum_to_gaussian",
    "exposure_encode",
    "pixel_base_radius",
]


class InvalidInputError(ValueError):
    """Raised when an encoding input violates its preconditions."""


@dataclass
class ConicalGaussian:
    """Gaussian approximation (mu, sigma) of a ray-interval frustum.

    ``mu`` has shape (..., 3) in world units; ``sigma`` is the full (..., 3, 3)
    symmetric PSD covariance.  ``diag_sigma`` carries the diagonal used by the
    integrated encoding.
    """

    mu: object  # (..., 3) array or Tensor
    sigma: object  # (..., 3, 3) array or Tensor; may be None when only the
    # diagonal is needed (training hot path)
    diag_sigma: object = None  # (..., 3); defaults to diagonal of sigma

    def __post_init__(self):
        if self.diag_sigma is None:
            if self.sigma is None:
                raise InvalidInputError("need sigma or diag_sigma")
            s = ad.data_of(self.sigma)
            self.diag_sigma = np.diagonal(s, axis1=-2, axis2=-1)

    def validate(self, tol=1e-9):
        if self.sigma is None:
            raise InvalidInputError("cannot validate a diagonal-only gaussian")
        s = ad.data_of(self.sigma)
        if not np.all(np.isfinite(ad.data_of(self.mu))) or not np.all(np.isfinite(s)):
            raise InvalidInputError("gaussian has non-finite entries")
        asym = np.abs(s - np.swapaxes(s, -1, -2)).max()
        if asym > tol:
            raise InvalidInputError(f"covariance asymmetry {asym:g} exceeds {tol:g}")
        eig = np.linalg.eigvalsh(0.5 * (s + np.swapaxes(s, -1, -2)))
        if eig.min() < -tol:
            raise InvalidInputError(f"covariance has negative eigenvalue {eig.min():g}")
        return self


@dataclass
class EncodingConfig:
    """Levels for position / view direction / exposure encodings."""

    levels_position: int = 10
    levels_direction: int = 4
    levels_exposure: int = 4
    exposure_scale: float = 1000.0

    def __post_init__(self):
        if min(self.levels_position, self.levels_direction, self.levels_exposure) < 1:
            raise InvalidInputError("all encoding level counts must be >= 1")
        if self.exposure_scale <= 0:
            raise InvalidInputError("exposure_scale must be positive")

    @property
    def position_dim(self) -> int:
        return 2 * self.levels_position * 3

    @property
    def direction_dim(self) -> int:
        return 2 * self.levels_direction * 3

    @property
    def exposure_dim(self) -> int:
        return 2 * self.levels_exposure


def _interleave_sin_cos(s, c, d, levels):
    # (..., L, d) + (..., L, d) -> (..., 2*L*d) ordered sin_l, cos_l per level
    shape = ad.data_of(s).shape
    lead = shape[:-2]
    if not isinstance(s, ad.Tensor) and not isinstance(c, ad.Tensor):
        out = np.empty(lead + (levels, 2, d), dtype=s.dtype)
        out[..., 0, :] = s
        out[..., 1, :] = c
        return out.reshape(lead + (2 * levels * d,))
    s = ad.reshape(s, lead + (levels, 1, d))
    c = ad.reshape(c, lead + (levels, 1, d))
    out = ad.concatenate([s, c], axis=-2)
    return ad.reshape(out, lead + (2 * levels * d,))


def _sin_cos(x):
    """sin and cos of x; on the tape each backward reuses the sibling value."""
    if not isinstance(x, ad.Tensor):
        return np.sin(x), np.cos(x)
    s_data, c_data = np.sin(x.data), np.cos(x.data)

    def backward_sin(g):
        ad._accumulate(x, g * c_data)

    def backward_cos(g):
        ad._accumulate(x, -g * s_data)

    s = ad._make(s_data, (x,), backward_sin, "sin")
    c = ad._make(c_data, (x,), backward_cos, "cos")
    return s, c


def positional_encode(z, levels: int):
    """Componentwise sinusoidal features of ``z``.

    Output is ordered [sin(2^0 z), cos(2^0 z), ..., sin(2^{L-1} z),
    cos(2^{L-1} z)] along the last axis, each block componentwise over z, so a
    (..., d) input becomes (..., 2*L*d).
    """
    if levels < 1:
        raise InvalidInputError("levels must be >= 1")
    data = ad.data_of(z)
    if data.ndim == 0:
        raise InvalidInputError("z must have at least one dimension")
    if not np.all(np.isfinite(data)):
        raise InvalidInputError("positional_encode requires finite input")
    d = data.shape[-1]
    scales = (2.0 ** np.arange(levels)).astype(data.dtype)
    lead = data.shape[:-1]
    zb = ad.reshape(z, lead + (1, d)) * scales[:, None]  # (..., L, d)
    s, c = _sin_cos(zb)
    return _interleave_sin_cos(s, c, d, levels)


def integrated_positional_encode(gaussian: ConicalGaussian, levels: int):
    """Expected sinusoidal features under the Gaussian ``N(mu, sigma)``.

    Uses the closed form E[sin(2^l x)] = sin(2^l mu) * exp(-0.5 * 4^l * var)
    (and the cosine analogue) applied to the covariance diagonal.
    """
    if levels < 1:
        raise InvalidInputError("levels must be >= 1")
    mu, var = gaussian.mu, gaussian.diag_sigma
    mu_data, var_data = ad.data_of(mu), ad.data_of(var)
    if not (np.all(np.isfinite(mu_data)) and np.all(np.isfinite(var_data))):
        raise InvalidInputError("gaussian has non-finite entries")
    if var_data.min() < -1e-9:
        raise InvalidInputError("gaussian variance must be non-negative")
    d = mu_data.shape[-1]
    dtype = mu_data.dtype
    scales = (2.0 ** np.arange(levels)).astype(dtype)
    lead = mu_data.shape[:-1]
    mub = ad.reshape(mu, lead + (1, d)) * scales[:, None]
    varb = ad.reshape(var, lead + (1, d)) * (scales**2)[:, None]
    damp = ad.exp(-0.5 * varb)
    s, c = _sin_cos(mub)
    return _interleave_sin_cos(s * damp, c * damp, d, levels)


def frustum_to_gaussian(origin, direction, t0, t1, base_radius, full_covariance=True) -> ConicalGaussian:
    """Moments of the uniform distribution over a conical frustum.

    The frustum lies along ``origin + t * direction`` between ``t0`` and
    ``t1`` with cross-section radius ``base_radius * t``.  Along-ray and
    perpendicular moments are computed in closed form (stable mip-style
    parameterization around the interval midpoint) and lifted into world
    frame.

    Accepts scalars with (3,) origin/direction, or batched rays: origin and
    direction (B, 3) with t0/t1 of shape (B, S) and base_radius broadcastable
    to (B, S), giving mu of shape (B, S, 3).  With ``full_covariance=False``
    only the covariance diagonal is produced (cheaper; enough for the
    integrated encoding).
    """
    t0d, t1d = ad.data_of(t0), ad.data_of(t1)
    if np.any(t1d <= t0d):
        raise InvalidInputError("frustum requires t1 > t0")
    if np.any(t0d <= 0):
        raise InvalidInputError("frustum requires t0 > 0")
    if np.any(ad.data_of(base_radius) <= 0):
        raise InvalidInputError("base_radius must be positive")
    dir_data = ad.data_of(direction)
    norms = np.linalg.norm(dir_data, axis=-1)
    tol = 1e-9 if dir_data.dtype.itemsize >= 8 else 1e-5
    if np.abs(norms - 1.0).max() > tol:
        raise InvalidInputError("direction must be unit length")

    t_mu = 0.5 * (t0 + t1)
    t_delta = 0.5 * (t1 - t0)
    mu2 = t_mu * t_mu
    d2 = t_delta * t_delta
    denom = 3.0 * mu2 + d2
    mu_t = t_mu + 2.0 * t_mu * d2 / denom
    var_t = d2 / 3.0 - (4.0 / 15.0) * (d2 * d2 * (12.0 * mu2 - d2)) / (denom * denom)
    r2 = base_radius * base_radius
    var_r = r2 * (mu2 / 4.0 + (5.0 / 12.0) * d2 - (4.0 / 15.0) * d2 * d2 / denom)

    t_shape = ad.data_of(mu_t).shape
    lead = dir_data.shape[:-1]
    if t_shape != lead:
        # t carries a trailing sample axis: lift rays to (..., 1, 3)
        direction = ad.reshape(direction, lead + (1, 3))
        origin = ad.reshape(origin, ad.data_of(origin).shape[:-1] + (1, 3))

    mu = origin + ad.reshape(mu_t, t_shape + (1,)) * direction

    dir_sq = direction * direction
    var_t_col = ad.reshape(var_t, t_shape + (1,))
    var_r_col = ad.reshape(var_r, t_shape + (1,))
    diag = var_t_col * dir_sq + var_r_col * (1.0 - dir_sq)

    sigma = None
    if full_covariance:
        d_shape = ad.data_of(direction).shape
        outer = ad.reshape(direction, d_shape + (1,)) * ad.reshape(
            direction, d_shape[:-1] + (1, 3)
        )  # d d^T
        eye = np.eye(3, dtype=ad.data_of(mu).dtype)
        sigma = ad.reshape(var_t, t_shape + (1, 1)) * outer + ad.reshape(
            var_r, t_shape + (1, 1)
        ) * (eye - outer)
    return ConicalGaussian(mu=mu, sigma=sigma, diag_sigma=diag)


def exposure_encode(shutter, gain, cfg: EncodingConfig):
    """Sinusoidal features of shutter*gain scaled by the exposure scale.

    Scalars give an 8-vector (4 levels); (N,) inputs give (N, 8).
    """
    shutter_d, gain_d = np.asarray(shutter, dtype=float), np.asarray(gain, dtype=float)
    if np.any(shutter_d <= 0) or np.any(gain_d <= 0):
        raise InvalidInputError("shutter and gain must be positive")
    value = shutter_d * gain_d / cfg.exposure_scale
    return positional_encode(value[..., None], cfg.levels_exposure)


def pixel_base_radius(fx: float) -> float:
    """Pixel footprint radius at unit distance: pixel width times 2/sqrt(12)."""
    return (1.0 / fx) * (2.0 / np.sqrt(12.0))
