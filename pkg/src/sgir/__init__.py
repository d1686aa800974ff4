"""Inverse rendering of glossy objects: SG illumination, SDF geometry, closed-form shading."""

__version__ = "0.1.0"

from .sg import SphericalGaussian, CosineSg, sg_eval, sg_product, sg_integral_sphere
from .sg import cosine_sg, sg_integral_times_cosine
from .brdf import SpecularBrdf, ShadingFrame, warp_specular, eval_brdf_exact
from .envmap import SgEnvmap, envmap_eval, fibonacci_init, bake_latlong

__all__ = [
    "SphericalGaussian", "CosineSg", "sg_eval", "sg_product", "sg_integral_sphere",
    "cosine_sg", "sg_integral_times_cosine",
    "SpecularBrdf", "ShadingFrame", "warp_specular", "eval_brdf_exact",
    "SgEnvmap", "envmap_eval", "fibonacci_init", "bake_latlong",
]
