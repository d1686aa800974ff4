"""Spherical Gaussian algebra.

A spherical Gaussian (SG) is a lobe on the unit sphere,

    G(v; axis, sharpness, amplitude) = amplitude * exp(sharpness * (v . axis - 1)),

with a unit axis, positive scalar sharpness shared across channels, and a
per-channel non-negative amplitude.  SGs are closed under pointwise products
and integrate over the sphere in closed form, which is what makes the whole
shading pipeline differentiable without Monte-Carlo sampling.

All functions broadcast over leading batch dimensions and are pure; they are
safe to call concurrently.  Degenerate/clamped events are counted in
DIAGNOSTICS for post-hoc inspection.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

DTYPE = torch.float64

# Sharpness assigned to the constant lobe that replaces a degenerate
# (antipodal, equal-sharpness) product, and the threshold below which the
# sphere integral switches to its small-sharpness series.
TINY_SHARPNESS = 1e-6
SERIES_THRESHOLD = 1e-6

# Single-lobe approximation of the unclamped cosine v . n, valid on the whole
# sphere:  v . n ~= COS_AMPLITUDE * exp(COS_SHARPNESS * (v . n - 1)) - COS_OFFSET.
COS_SHARPNESS = 0.0315
COS_AMPLITUDE = 32.7080
COS_OFFSET = 31.7003

DIAGNOSTICS = {
    "degenerate_products": 0,
    "negative_cosine_integrals": 0,
}


def reset_diagnostics():
    for k in DIAGNOSTICS:
        DIAGNOSTICS[k] = 0


def _as_tensor(x, dtype=DTYPE):
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(x, dtype=dtype)


@dataclass(frozen=True)
class SphericalGaussian:
    """One SG lobe; fields may carry leading batch dimensions."""

    axis: torch.Tensor       # (..., 3), unit
    sharpness: torch.Tensor  # (...,), > 0
    amplitude: torch.Tensor  # (..., 3), >= 0 per channel

    @staticmethod
    def create(axis, sharpness, amplitude) -> "SphericalGaussian":
        """Build from array-likes, broadcasting a scalar amplitude to 3 channels."""
        axis = _as_tensor(axis)
        sharpness = _as_tensor(sharpness)
        amplitude = _as_tensor(amplitude)
        if amplitude.ndim == sharpness.ndim:  # monochrome given as scalar
            amplitude = amplitude[..., None].expand(*amplitude.shape, 3)
        g = SphericalGaussian(axis, sharpness, amplitude)
        g.validate()
        return g

    def validate(self):
        norms = torch.linalg.vector_norm(self.axis, dim=-1)
        if not torch.all((norms - 1.0).abs() <= 1e-6):
            raise ValueError("SG axis must be unit length (within 1e-6)")
        if not torch.all(self.sharpness > 0):
            raise ValueError("SG sharpness must be positive")
        if not torch.all(self.amplitude >= 0):
            raise ValueError("SG amplitude must be non-negative")

    @property
    def batch_shape(self):
        return self.sharpness.shape


@dataclass(frozen=True)
class CosineSg:
    """Fixed SG-plus-offset approximation of the unclamped cosine about n."""

    lobe: SphericalGaussian
    offset: float


def sg_eval(g: SphericalGaussian, dirs) -> torch.Tensor:
    """Evaluate the lobe at unit directions; broadcasts, returns (..., 3)."""
    dirs = _as_tensor(dirs)
    dot = torch.sum(g.axis * dirs, dim=-1)
    return g.amplitude * torch.exp(g.sharpness * (dot - 1.0))[..., None]


def sg_product(g1: SphericalGaussian, g2: SphericalGaussian) -> SphericalGaussian:
    """Pointwise product of two SGs, itself an SG.

    With u = s1*axis1 + s2*axis2 the product has sharpness |u|, axis u/|u| and
    amplitude a1*a2*exp(|u| - s1 - s2); this reproduces g1*g2 exactly.  The
    antipodal equal-sharpness case (|u| = 0) degenerates to a constant
    function; it is returned as a near-constant lobe with TINY_SHARPNESS and
    counted in DIAGNOSTICS.
    """
    u = g1.sharpness[..., None] * g1.axis + g2.sharpness[..., None] * g2.axis
    sq = torch.sum(u * u, dim=-1)
    # smoothed norm keeps the gradient finite at u = 0; the smoothing cancels
    # exactly in the pointwise product because sharpness*axis = u regardless
    norm = torch.sqrt(sq + 1e-20)
    degenerate = sq < TINY_SHARPNESS**2
    if bool(torch.any(degenerate)):
        DIAGNOSTICS["degenerate_products"] += int(degenerate.sum())
    sharpness = torch.where(degenerate, torch.full_like(norm, TINY_SHARPNESS), norm)
    fallback = torch.zeros_like(u)
    fallback[..., 2] = 1.0
    axis = torch.where(degenerate[..., None], fallback, u / norm[..., None])
    amplitude = g1.amplitude * g2.amplitude * torch.exp(
        norm - g1.sharpness - g2.sharpness)[..., None]
    return SphericalGaussian(axis, sharpness, amplitude)


def sg_integral_sphere(g: SphericalGaussian) -> torch.Tensor:
    """Exact integral of the lobe over the whole sphere, per channel.

    Equals 2*pi*amplitude*(1 - exp(-2*sharpness))/sharpness; for sharpness
    below SERIES_THRESHOLD the series limit 4*pi*amplitude*(1 - sharpness) is
    used to avoid 0/0 cancellation.
    """
    lam = g.sharpness
    small = lam < SERIES_THRESHOLD
    lam_safe = torch.where(small, torch.ones_like(lam), lam)
    factor = 2.0 * torch.pi * (1.0 - torch.exp(-2.0 * lam_safe)) / lam_safe
    series = 4.0 * torch.pi * (1.0 - lam)
    return g.amplitude * torch.where(small, series, factor)[..., None]


def cosine_sg(n) -> CosineSg:
    """The fixed-lobe approximation of v . n (unclamped) about unit normal n."""
    n = _as_tensor(n)
    sharpness = torch.full(n.shape[:-1], COS_SHARPNESS, dtype=n.dtype)
    amplitude = torch.full(n.shape[:-1] + (3,), COS_AMPLITUDE, dtype=n.dtype)
    return CosineSg(SphericalGaussian(n, sharpness, amplitude), COS_OFFSET)


def sg_integral_times_cosine(g: SphericalGaussian, n, clamp: bool = True) -> torch.Tensor:
    """Closed-form approximation of integral of g(v) * (v . n) dv over the sphere.

    Computed as I(g * cos_lobe) - offset * I(g).  The approximation can dip
    slightly negative for broad lobes or lobes behind n; negative channels are
    clamped to zero (and counted) so shading stays physical.
    """
    n = _as_tensor(n)
    cos = cosine_sg(n)
    value = sg_integral_sphere(sg_product(g, cos.lobe)) - cos.offset * sg_integral_sphere(g)
    if clamp:
        negative = value < 0
        if bool(torch.any(negative)):
            DIAGNOSTICS["negative_cosine_integrals"] += int(negative.sum())
        value = torch.clamp(value, min=0.0)
    return value
