"""Environment illumination as a mixture of spherical Gaussians.

The map is a sum of M lobes evaluated per direction.  Initialization places
lobe axes on a spherical Fibonacci lattice with sharpness M/2 (so lobes
roughly cover their Voronoi cells), draws monochrome amplitudes uniformly in
[0.5, 1.5], then rescales all amplitudes by one global factor so that a probe
render of a gray sphere comes out at a target mean intensity.

Lat-long convention for baking: +z is the pole, azimuth measured from +x,
pixel (u, v) maps to phi = 2*pi*u/W, theta = pi*v/H (no half-pixel offset),
direction (sin t cos p, sin t sin p, cos t).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .sg import DTYPE, SphericalGaussian, _as_tensor, sg_eval


@dataclass(frozen=True)
class SgEnvmap:
    """Mixture of M lobes stored as stacked tensors (axes unit, per row)."""

    axes: torch.Tensor        # (M, 3)
    sharpness: torch.Tensor   # (M,)
    amplitude: torch.Tensor   # (M, 3)

    @staticmethod
    def create(axes, sharpness, amplitude) -> "SgEnvmap":
        env = SgEnvmap(_as_tensor(axes), _as_tensor(sharpness), _as_tensor(amplitude))
        env.validate()
        return env

    def validate(self):
        if self.axes.ndim != 2 or self.axes.shape[0] < 1:
            raise ValueError("envmap needs at least one lobe")
        self.lobes().validate()

    def lobes(self) -> SphericalGaussian:
        return SphericalGaussian(self.axes, self.sharpness, self.amplitude)

    @property
    def n_lobes(self) -> int:
        return self.axes.shape[0]

    def scaled(self, factor) -> "SgEnvmap":
        return SgEnvmap(self.axes, self.sharpness, self.amplitude * factor)

    def to_json(self) -> list:
        return [
            {"axis": [float(v) for v in self.axes[k]],
             "sharpness": float(self.sharpness[k]),
             "amplitude": [float(v) for v in self.amplitude[k]]}
            for k in range(self.n_lobes)
        ]

    @staticmethod
    def from_json(lobes: list) -> "SgEnvmap":
        for i, lobe in enumerate(lobes):
            for key in ("axis", "sharpness", "amplitude"):
                if key not in lobe:
                    raise ValueError(f"lobe {i}: missing '{key}'")
        axes = torch.tensor([l["axis"] for l in lobes], dtype=DTYPE)
        axes = axes / torch.linalg.vector_norm(axes, dim=-1, keepdim=True)
        return SgEnvmap.create(
            axes,
            torch.tensor([l["sharpness"] for l in lobes], dtype=DTYPE),
            torch.tensor([l["amplitude"] for l in lobes], dtype=DTYPE),
        )

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1)

    @staticmethod
    def load(path) -> "SgEnvmap":
        with open(path) as f:
            return SgEnvmap.from_json(json.load(f))


def envmap_eval(env: SgEnvmap, dirs) -> torch.Tensor:
    """Sum of all lobes at unit directions; dirs (..., 3) -> (..., 3)."""
    dirs = _as_tensor(dirs)
    # (..., M) lobe dots in one shot
    dots = dirs @ env.axes.to(dirs.dtype).T
    vals = env.amplitude.to(dirs.dtype) * torch.exp(
        env.sharpness.to(dirs.dtype) * (dots - 1.0))[..., None]
    return vals.sum(dim=-2)


def fibonacci_lattice(m: int) -> np.ndarray:
    """m near-uniform unit vectors; golden-angle spiral over z in (1, -1)."""
    i = np.arange(m, dtype=np.float64)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    z = 1.0 - 2.0 * i / max(m - 1, 1)
    if m == 1:
        z = np.array([1.0])
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    th = golden * i
    return np.stack([np.cos(th) * r, np.sin(th) * r, z], axis=-1)


def fibonacci_init(m: int, target_intensity: float, rng: np.random.Generator,
                   probe=None) -> SgEnvmap:
    """Deterministic lattice initialization with probe-based exposure scaling.

    probe: callable mapping an SgEnvmap to the mean probe-render intensity;
    defaults to a diffuse gray sphere rendered with the closed-form shader.
    Amplitudes are monochrome draws in [0.5, 1.5] rescaled so the probe hits
    target_intensity.
    """
    if m < 1:
        raise ValueError("need at least one lobe")
    axes = torch.as_tensor(fibonacci_lattice(m), dtype=DTYPE)
    sharpness = torch.full((m,), m / 2.0, dtype=DTYPE)
    draws = torch.as_tensor(rng.uniform(0.5, 1.5, size=m), dtype=DTYPE)
    amplitude = draws[:, None].expand(m, 3).contiguous()
    env = SgEnvmap(axes, sharpness, amplitude)
    if probe is None:
        from .render import gray_sphere_probe
        probe = gray_sphere_probe
    mean = float(probe(env))
    if mean <= 0:
        raise ValueError("probe render produced no intensity; cannot scale")
    return env.scaled(target_intensity / mean)


def latlong_dirs(width: int, height: int, dtype=DTYPE) -> torch.Tensor:
    """Direction grid (H, W, 3) under the documented lat-long convention."""
    u = torch.arange(width, dtype=dtype)
    v = torch.arange(height, dtype=dtype)
    phi = 2.0 * torch.pi * u / width
    theta = torch.pi * v / height
    st = torch.sin(theta)[:, None]
    return torch.stack([
        st * torch.cos(phi)[None, :],
        st * torch.sin(phi)[None, :],
        torch.cos(theta)[:, None].expand(height, width),
    ], dim=-1)


def bake_latlong(env: SgEnvmap, width: int, height: int) -> np.ndarray:
    """Rasterize the mixture to an equirectangular float image (H, W, 3)."""
    if width != 2 * height:
        raise ValueError("lat-long bake expects width = 2 * height")
    dirs = latlong_dirs(width, height)
    return envmap_eval(env, dirs).numpy()


def sample_latlong(image: np.ndarray, dirs) -> torch.Tensor:
    """Bilinear point-sample of a baked lat-long image at unit directions.

    Uses the same pixel mapping as bake_latlong; azimuth wraps, polar angle is
    clamped at the poles.
    """
    dirs = _as_tensor(dirs)
    h, w = image.shape[:2]
    theta = torch.arccos(torch.clamp(dirs[..., 2], -1.0, 1.0))
    phi = torch.atan2(dirs[..., 1], dirs[..., 0]) % (2.0 * torch.pi)
    fu = phi * w / (2.0 * torch.pi)
    fv = theta * h / torch.pi
    u0 = torch.floor(fu).long()
    v0 = torch.floor(fv).long()
    du = (fu - u0)[..., None]
    dv = (fv - v0)[..., None]
    img = torch.as_tensor(image, dtype=dirs.dtype)
    u1 = (u0 + 1) % w
    v1 = torch.clamp(v0 + 1, max=h - 1)
    v0 = torch.clamp(v0, max=h - 1)
    u0 = u0 % w
    top = img[v0, u0] * (1 - du) + img[v0, u1] * du
    bot = img[v1, u0] * (1 - du) + img[v1, u1] * du
    return top * (1 - dv) + bot * dv
