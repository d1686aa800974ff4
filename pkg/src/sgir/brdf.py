"""Specular microfacet BRDF as a single spherical Gaussian.

The specular term is f_s(wo, wi) = M(wo, wi) * D(h) with half vector
h = (wo + wi)/|wo + wi|.  D is an SG over the half vector centred on the
normal; M collects Fresnel and shadowing:

    M = F(h.wo) * G1(n.wo) * G1(n.wi) / (4 (n.wo)(n.wi))

with Schlick Fresnel and Schlick-Smith masking G1(c) = c / (c(1-k) + k),
k = alpha/2, alpha^2 = 2/sharpness, so the 1/(n.w) factors cancel and M
varies only through the Fresnel term.

For closed-form shading the half-vector lobe is spherically warped into the
incident-direction domain: an SG about the mirror reflection of wo with
sharpness divided by 4(n.wo), and M frozen at the reflection direction.
eval_brdf_exact keeps the unwarped expression and exists for the Monte-Carlo
oracle, so oracle comparisons isolate the warp/constant-M/cosine
approximations rather than the BRDF choice.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .sg import SphericalGaussian, _as_tensor

F0_DEFAULT = 0.04
GRAZING_EPS = 1e-3


@dataclass(frozen=True)
class SpecularBrdf:
    """Shared monochrome isotropic specular lobe parameters."""

    sharpness: torch.Tensor   # scalar, > 0
    amplitude: torch.Tensor   # scalar, > 0; broadcast to all three channels
    fresnel_f0: float = F0_DEFAULT

    @staticmethod
    def create(sharpness, amplitude, fresnel_f0: float = F0_DEFAULT) -> "SpecularBrdf":
        b = SpecularBrdf(_as_tensor(sharpness), _as_tensor(amplitude), float(fresnel_f0))
        b.validate()
        return b

    def validate(self):
        if not torch.all(self.sharpness > 0):
            raise ValueError("specular sharpness must be positive")
        if not torch.all(self.amplitude > 0):
            raise ValueError("specular amplitude must be positive")
        if not 0.0 <= self.fresnel_f0 <= 1.0:
            raise ValueError("fresnel_f0 must lie in [0, 1]")


@dataclass(frozen=True)
class ShadingFrame:
    """Batched surface point, unit normal and unit outgoing (view) direction."""

    x: torch.Tensor    # (..., 3)
    n: torch.Tensor    # (..., 3)
    w_o: torch.Tensor  # (..., 3), points away from the surface


def schlick_fresnel(f0, cos_theta):
    return f0 + (1.0 - f0) * torch.clamp(1.0 - cos_theta, min=0.0) ** 5


def smith_k(sharpness):
    """Schlick-Smith k parameter from SG sharpness via alpha^2 = 2/sharpness."""
    return torch.sqrt(2.0 / sharpness) / 2.0


def masking_term(brdf: SpecularBrdf, cos_o, cos_i, cos_ho):
    """M(wo, wi): Fresnel times Smith shadowing over the 4 cos cos denominator."""
    k = smith_k(brdf.sharpness)
    return schlick_fresnel(brdf.fresnel_f0, cos_ho) / (
        4.0 * (cos_o * (1.0 - k) + k) * (cos_i * (1.0 - k) + k))


def warp_specular(brdf: SpecularBrdf, frame: ShadingFrame) -> SphericalGaussian:
    """Express the half-vector NDF lobe as an SG over incident directions.

    Axis is the mirror reflection of w_o about n, sharpness is
    sharpness/(4 n.w_o) with the dot product clamped at GRAZING_EPS, and the
    amplitude carries the masking term frozen at the reflection direction
    (where h = n and n.w_i = n.w_o).
    """
    cos_o = torch.sum(frame.n * frame.w_o, dim=-1)
    cos_safe = torch.clamp(cos_o, min=GRAZING_EPS)
    axis = 2.0 * cos_o[..., None] * frame.n - frame.w_o
    axis = axis / torch.linalg.vector_norm(axis, dim=-1, keepdim=True)
    sharpness = brdf.sharpness / (4.0 * cos_safe)
    m_x = masking_term(brdf, cos_safe, cos_safe, cos_safe)
    amplitude = (m_x * brdf.amplitude)[..., None].expand(*m_x.shape, 3)
    return SphericalGaussian(axis, sharpness, amplitude)


def eval_brdf_exact(brdf: SpecularBrdf, albedo, n, w_o, w_i) -> torch.Tensor:
    """Full BRDF a/pi + M*D without any SG warping; used by the MC oracle.

    Below-horizon incident directions return zero.
    """
    albedo = _as_tensor(albedo)
    n = _as_tensor(n)
    w_o = _as_tensor(w_o)
    w_i = _as_tensor(w_i)
    cos_i = torch.sum(n * w_i, dim=-1)
    cos_o = torch.sum(n * w_o, dim=-1)
    h = w_o + w_i
    h = h / torch.clamp(torch.linalg.vector_norm(h, dim=-1, keepdim=True), min=1e-12)
    cos_h = torch.sum(n * h, dim=-1)
    cos_ho = torch.sum(h * w_o, dim=-1)
    ndf = brdf.amplitude * torch.exp(brdf.sharpness * (cos_h - 1.0))
    spec = masking_term(brdf, torch.clamp(cos_o, min=GRAZING_EPS),
                        torch.clamp(cos_i, min=GRAZING_EPS), cos_ho) * ndf
    spec = torch.where(cos_i > 0, spec, torch.zeros_like(spec))
    return albedo / torch.pi + spec[..., None]
