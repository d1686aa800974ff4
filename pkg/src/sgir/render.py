"""Forward rendering: cameras, scenes, closed-form SG shading, MC oracle.

A scene bundles an SDF field, an albedo field, the shared specular lobe, an
SG environment map and the bounding radius.  Rendering a ray:

  (1) sphere trace to the surface (non-differentiable),
  (2) surface normal = normalized SDF gradient (differentiable, second order),
  (3) query diffuse albedo at the hit point,
  (4) closed-form shading: for every environment lobe, the diffuse part
      integrates lobe * cosine and the specular part integrates
      (lobe * warped BRDF lobe) * cosine, everything per channel.

Misses return the background color (black) with a zero hit-mask.  In training
mode the hit point is attached to the parameter graph through the implicit
differentiation rule.

Ray/pixel convention: pixel centers at (i + 0.5, j + 0.5) with i the column
and j the row, camera looks down -z in camera space, x right, y up, image row
index grows downward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from .brdf import ShadingFrame, SpecularBrdf, eval_brdf_exact, warp_specular
from .envmap import SgEnvmap, envmap_eval
from .params import ParamStore, attach_intersection
from .sdf import NeuralSdf, Ray, SphereSdf, normal_from_gradient, positional_encode
from .sdf import sdf_gradient, sphere_trace
from .sg import DTYPE, SphericalGaussian, _as_tensor, sg_integral_times_cosine, sg_product

DIAGNOSTICS = {"backfacing_hits": 0, "non_converged_traces": 0}


# ---------------------------------------------------------------------------
# albedo fields
# ---------------------------------------------------------------------------

class AlbedoNet(torch.nn.Module):
    """Positional-encoded MLP mapping points to (0,1)^3 via a sigmoid.

    Zero-initializing the final layer makes the initial prediction exactly
    0.5 everywhere.
    """

    def __init__(self, n_hidden: int = 3, width: int = 64, n_freq: int = 10,
                 zero_init_last: bool = True, dtype=DTYPE):
        super().__init__()
        self.n_freq = n_freq
        in_dim = 3 * (1 + 2 * n_freq)
        dims = [in_dim] + [width] * n_hidden
        self.hidden = torch.nn.ModuleList(
            [torch.nn.Linear(dims[i], dims[i + 1], dtype=dtype) for i in range(n_hidden)])
        self.out = torch.nn.Linear(width, 3, dtype=dtype)
        if zero_init_last:
            torch.nn.init.zeros_(self.out.weight)
            torch.nn.init.zeros_(self.out.bias)

    def forward(self, x):
        h = positional_encode(x.to(self.out.weight.dtype), self.n_freq)
        for layer in self.hidden:
            h = torch.relu(layer(h))
        return torch.sigmoid(self.out(h))


class ConstantAlbedo:
    def __init__(self, color):
        self.color = _as_tensor(color)

    def __call__(self, x):
        return self.color.to(x.dtype).expand(*x.shape[:-1], 3)


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Camera:
    """Pinhole camera: camera-to-world rigid transform plus intrinsics."""

    c2w: torch.Tensor  # (4, 4)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    @staticmethod
    def create(c2w, fx, fy, cx, cy, width, height) -> "Camera":
        cam = Camera(_as_tensor(c2w), float(fx), float(fy), float(cx), float(cy),
                     int(width), int(height))
        cam.validate()
        return cam

    def validate(self):
        r = self.c2w[:3, :3]
        if not torch.allclose(r @ r.T, torch.eye(3, dtype=r.dtype), atol=1e-6):
            raise ValueError("camera rotation block is not orthonormal")
        if abs(float(torch.linalg.det(r)) - 1.0) > 1e-6:
            raise ValueError("camera rotation must have determinant +1")

    def rays(self, cols, rows) -> Ray:
        """Rays through pixel centers; cols/rows are integer-valued tensors."""
        cols = _as_tensor(cols)
        rows = _as_tensor(rows)
        x = (cols + 0.5 - self.cx) / self.fx
        y = -(rows + 0.5 - self.cy) / self.fy
        d_cam = torch.stack([x, y, -torch.ones_like(x)], dim=-1)
        d_cam = d_cam / torch.linalg.vector_norm(d_cam, dim=-1, keepdim=True)
        r = self.c2w[:3, :3]
        d = d_cam @ r.T
        o = self.c2w[:3, 3].expand_as(d)
        return Ray(o, d)

    def all_rays(self) -> Ray:
        jj, ii = torch.meshgrid(
            torch.arange(self.height, dtype=DTYPE),
            torch.arange(self.width, dtype=DTYPE), indexing="ij")
        return self.rays(ii.reshape(-1), jj.reshape(-1))


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> torch.Tensor:
    """Camera-to-world matrix with -z pointing from eye toward target."""
    eye = _as_tensor(eye)
    target = _as_tensor(target)
    up = _as_tensor(up)
    z = eye - target
    z = z / torch.linalg.vector_norm(z)
    if float(torch.abs(torch.sum(z * up / torch.linalg.vector_norm(up)))) > 0.999:
        up = torch.tensor([0.0, 1.0, 0.0], dtype=eye.dtype)
    x = torch.linalg.cross(up, z)
    x = x / torch.linalg.vector_norm(x)
    y = torch.linalg.cross(z, x)
    c2w = torch.eye(4, dtype=eye.dtype)
    c2w[:3, 0] = x
    c2w[:3, 1] = y
    c2w[:3, 2] = z
    c2w[:3, 3] = eye
    return c2w


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

@dataclass
class FixedScene:
    """Non-trainable scene (ground truth, probes): plain fields, no graph."""

    sdf_field: object
    albedo_fn: Callable
    env: SgEnvmap
    spec: Optional[SpecularBrdf]
    bound_radius: float

    def envmap(self) -> SgEnvmap:
        return self.env

    def specular(self) -> Optional[SpecularBrdf]:
        return self.spec


class SceneModel(torch.nn.Module):
    """Trainable scene: neural SDF/albedo plus raw lighting parameters.

    Raw parameterization keeps optimization unconstrained: lobe axes are
    normalized on use, sharpness and amplitudes are exponentials of the
    stored values.
    """

    def __init__(self, sdf_net: NeuralSdf, albedo_net: AlbedoNet,
                 env_axes, env_log_sharpness, env_log_amplitude,
                 spec_log_sharpness, spec_log_amplitude,
                 bound_radius: float, fresnel_f0: float = 0.04, dtype=DTYPE):
        super().__init__()
        self.sdf_net = sdf_net
        self.albedo_net = albedo_net
        self.env_axes = torch.nn.Parameter(_as_tensor(env_axes, dtype))
        self.env_log_sharpness = torch.nn.Parameter(_as_tensor(env_log_sharpness, dtype))
        self.env_log_amplitude = torch.nn.Parameter(_as_tensor(env_log_amplitude, dtype))
        self.spec_log_sharpness = torch.nn.Parameter(_as_tensor(spec_log_sharpness, dtype))
        self.spec_log_amplitude = torch.nn.Parameter(_as_tensor(spec_log_amplitude, dtype))
        self.bound_radius = float(bound_radius)
        self.fresnel_f0 = float(fresnel_f0)

    @property
    def sdf_field(self):
        return self.sdf_net

    def albedo_fn(self, x):
        return self.albedo_net(x)

    def envmap(self) -> SgEnvmap:
        axes = self.env_axes / torch.linalg.vector_norm(self.env_axes, dim=-1, keepdim=True)
        return SgEnvmap(axes, torch.exp(self.env_log_sharpness),
                        torch.exp(self.env_log_amplitude))

    def specular(self) -> SpecularBrdf:
        return SpecularBrdf(torch.exp(self.spec_log_sharpness),
                            torch.exp(self.spec_log_amplitude), self.fresnel_f0)

    def param_store(self) -> ParamStore:
        return ParamStore({
            "env_axes": [self.env_axes],
            "env_log_sharpness": [self.env_log_sharpness],
            "env_log_amplitude": [self.env_log_amplitude],
            "spec_log_sharpness": [self.spec_log_sharpness],
            "spec_log_amplitude": [self.spec_log_amplitude],
            "sdf_weights": list(self.sdf_net.parameters()),
            "albedo_weights": list(self.albedo_net.parameters()),
        })


# ---------------------------------------------------------------------------
# closed-form shading
# ---------------------------------------------------------------------------

def shade_closed_form(scene, x, n, w_o) -> torch.Tensor:
    """Outgoing radiance at surface points via per-lobe SG integration.

    x, n, w_o: (N, 3) with unit n, w_o and n.w_o > 0 (backfacing points are
    the caller's concern and shade to zero).  Differentiable through every
    argument and all scene parameters.
    """
    env = scene.envmap()
    brdf = scene.specular()
    albedo = scene.albedo_fn(x)

    m = env.n_lobes
    lobes = SphericalGaussian(
        env.axes[None, :, :], env.sharpness[None, :], env.amplitude[None, :, :])

    n_b = n[:, None, :].expand(x.shape[0], m, 3)
    diffuse_terms = sg_integral_times_cosine(lobes, n_b)
    color = albedo / math.pi * diffuse_terms.sum(dim=-2)

    if brdf is not None:
        warped = warp_specular(brdf, ShadingFrame(x, n, w_o))
        warped_b = SphericalGaussian(
            warped.axis[:, None, :], warped.sharpness[:, None], warped.amplitude[:, None, :])
        prod = sg_product(lobes, warped_b)
        spec_terms = sg_integral_times_cosine(prod, n_b)
        color = color + spec_terms.sum(dim=-2)
    return color


def render_rays(scene, ray: Ray, train: bool = False, eps_hit: float | None = None,
                background=None) -> dict:
    """Trace and shade a batch of rays.

    Returns color/albedo/normal (N, 3), hit mask, t, steps.  train=True
    attaches hit points to the parameter graph (implicit differentiation) and
    builds normals with create_graph so second-order terms exist.
    """
    field = scene.sdf_field
    hit = sphere_trace(field, ray, scene.bound_radius, eps_hit=eps_hit)
    mask = hit.converged
    non_conv = int(hit.exhausted.sum())
    if non_conv:
        DIAGNOSTICS["non_converged_traces"] += non_conv

    n_rays = ray.origin.shape[0]
    dtype = ray.origin.dtype
    color = torch.zeros(n_rays, 3, dtype=dtype)
    albedo_img = torch.zeros(n_rays, 3, dtype=dtype)
    normal_img = torch.zeros(n_rays, 3, dtype=dtype)
    if background is not None:
        color = color + _as_tensor(background, dtype)

    if bool(mask.any()):
        idx = mask.nonzero(as_tuple=True)[0]
        d = ray.direction[idx]
        x0 = hit.x[idx]
        if train:
            x = attach_intersection(field, x0, d)
        else:
            x = x0
        g = sdf_gradient(field, x, create_graph=train)
        n_vec = normal_from_gradient(g, fallback=-d)
        w_o = -d
        front = torch.sum(n_vec * w_o, dim=-1) > 0
        n_back = int((~front).sum())
        if n_back:
            DIAGNOSTICS["backfacing_hits"] += n_back
        shaded = torch.zeros_like(x)
        if bool(front.any()):
            fi = front.nonzero(as_tuple=True)[0]
            shaded[fi] = shade_closed_form(scene, x[fi], n_vec[fi], w_o[fi])
        color = color.index_put((idx,), shaded)
        albedo_img = albedo_img.index_put((idx,), scene.albedo_fn(x).detach().to(dtype))
        normal_img = normal_img.index_put((idx,), n_vec.detach().to(dtype))

    return {
        "color": color, "albedo": albedo_img, "normal": normal_img,
        "mask": mask, "t": hit.t, "steps": hit.steps,
    }


def render_pixel(scene, camera: Camera, col: int, row: int, train: bool = False) -> dict:
    """Render one pixel; returns the same fields as render_rays, batch of 1."""
    if not (0 <= col < camera.width and 0 <= row < camera.height):
        raise ValueError("pixel outside the image")
    ray = camera.rays(torch.tensor([float(col)], dtype=DTYPE),
                      torch.tensor([float(row)], dtype=DTYPE))
    return render_rays(scene, ray, train=train)


def render_image(scene, camera: Camera, chunk: int = 8192) -> dict:
    """Full-frame render (no gradients); images shaped (H, W, ...)."""
    ray = camera.all_rays()
    n = ray.origin.shape[0]
    outs = []
    with torch.no_grad():
        for a in range(0, n, chunk):
            b = min(a + chunk, n)
            outs.append(render_rays(scene, Ray(ray.origin[a:b], ray.direction[a:b])))
    h, w = camera.height, camera.width
    out = {k: torch.cat([o[k] for o in outs]) for k in outs[0]}
    return {
        "color": out["color"].reshape(h, w, 3).numpy(),
        "albedo": out["albedo"].reshape(h, w, 3).numpy(),
        "normal": out["normal"].reshape(h, w, 3).numpy(),
        "mask": out["mask"].reshape(h, w).numpy(),
        "t": out["t"].reshape(h, w).numpy(),
    }


# ---------------------------------------------------------------------------
# Monte-Carlo oracle
# ---------------------------------------------------------------------------

def orthonormal_basis(n: torch.Tensor):
    ref = torch.zeros_like(n)
    near_z = n[..., 2].abs() < 0.9
    ref[..., 2] = torch.where(near_z, torch.ones_like(n[..., 2]), torch.zeros_like(n[..., 2]))
    ref[..., 0] = torch.where(near_z, torch.zeros_like(n[..., 0]), torch.ones_like(n[..., 0]))
    t = torch.linalg.cross(ref, n)
    t = t / torch.linalg.vector_norm(t, dim=-1, keepdim=True)
    b = torch.linalg.cross(n, t)
    return t, b


def stratified_cosine_dirs(n: torch.Tensor, n_samples: int, rng: np.random.Generator):
    """Jittered-stratified cosine-weighted directions about a single normal n."""
    k = int(math.sqrt(n_samples))
    u1 = (np.arange(k)[:, None] + rng.random((k, k))) / k
    u2 = (np.arange(k)[None, :] + rng.random((k, k))) / k
    u1 = torch.as_tensor(u1.ravel(), dtype=n.dtype)
    u2 = torch.as_tensor(u2.ravel(), dtype=n.dtype)
    r = torch.sqrt(u1)
    phi = 2.0 * math.pi * u2
    z = torch.sqrt(torch.clamp(1.0 - u1, min=0.0))
    t, b = orthonormal_basis(n[None, :])
    return (r * torch.cos(phi))[:, None] * t + (r * torch.sin(phi))[:, None] * b \
        + z[:, None] * n[None, :]


def oracle_shade(scene, x, n, w_o, n_samples: int = 1_000_000,
                 rng_seed: int = 0) -> torch.Tensor:
    """Monte-Carlo estimate of the shading integral at surface points.

    Stratified cosine-weighted hemisphere sampling around each normal;
    deterministic for a given seed.  Serves as the independent reference for
    shade_closed_form (same BRDF, brute-force integration).
    """
    x = _as_tensor(x)
    n = _as_tensor(n)
    w_o = _as_tensor(w_o)
    squeeze = x.ndim == 1
    if squeeze:
        x, n, w_o = x[None], n[None], w_o[None]
    env = scene.envmap()
    brdf = scene.specular()
    albedo = scene.albedo_fn(x)
    rng = np.random.default_rng(rng_seed)
    out = torch.zeros_like(x)
    with torch.no_grad():
        for i in range(x.shape[0]):
            dirs = stratified_cosine_dirs(n[i], n_samples, rng)
            radiance = envmap_eval(env, dirs)
            if brdf is not None:
                fr = eval_brdf_exact(brdf, albedo[i], n[i], w_o[i], dirs)
            else:
                fr = albedo[i] / math.pi
            out[i] = math.pi * (radiance * fr).mean(dim=0)
    return out[0] if squeeze else out


def oracle_render_image(scene, camera: Camera, n_samples: int = 4096,
                        rng_seed: int = 0, chunk: int = 512) -> dict:
    """Image rendered with oracle_shade at every hit pixel (slow; tests only)."""
    ray = camera.all_rays()
    field = scene.sdf_field
    with torch.no_grad():
        hit = sphere_trace(field, ray, scene.bound_radius)
        color = torch.zeros(ray.origin.shape[0], 3, dtype=DTYPE)
        idx = hit.converged.nonzero(as_tuple=True)[0]
        if idx.numel():
            x = hit.x[idx]
            d = ray.direction[idx]
            g = sdf_gradient(field, x)
            n_vec = normal_from_gradient(g, fallback=-d)
            front = torch.sum(n_vec * -d, dim=-1) > 0
            fi = idx[front]
            vals = oracle_shade(scene, x[front], n_vec[front], -d[front],
                                n_samples=n_samples, rng_seed=rng_seed)
            color[fi] = vals
    h, w = camera.height, camera.width
    return {"color": color.reshape(h, w, 3).numpy(),
            "mask": hit.converged.reshape(h, w).numpy()}


def gray_sphere_probe(env: SgEnvmap, specular: Optional[SpecularBrdf] = None,
                      resolution: int = 32) -> float:
    """Mean rendered intensity of a gray (albedo 0.5) unit sphere under env.

    Used to normalize initial environment amplitudes; deterministic.
    """
    scene = FixedScene(SphereSdf(1.0), ConstantAlbedo((0.5, 0.5, 0.5)), env,
                       specular, bound_radius=1.3)
    c2w = look_at(torch.tensor([0.0, 0.0, 3.25], dtype=DTYPE))
    f = 0.5 * resolution / math.tan(math.radians(20.0))
    cam = Camera.create(c2w, f, f, resolution / 2, resolution / 2, resolution, resolution)
    out = render_image(scene, cam)
    mask = out["mask"]
    if not mask.any():
        return 0.0
    return float(out["color"][mask].mean())
