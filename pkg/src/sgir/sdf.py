"""Signed-distance geometry: analytic primitives, neural SDF, sphere tracing.

Sign convention: positive outside the object, negative inside.  All scenes
live inside a bounding sphere of given radius centred at the origin; rays are
marched starting from their entry into that sphere and abandoned once they
leave it.

Tracing itself runs under no_grad (the marching loop is not part of the
differentiable graph); gradients re-enter through the implicit-differentiation
rule in the params module and through sdf_gradient for normals.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .sg import DTYPE, _as_tensor

HIT_EPS_FACTOR = 5e-5   # eps_hit = factor * bounding radius
MAX_STEPS = 128         # 64 leaves ~0.25% of grazing torus rays unconverged
BISECT_STEPS = 16
GRAD_FALLBACK_EPS = 1e-8

DIAGNOSTICS = {"zero_gradients": 0}


def positional_encode(p: torch.Tensor, n_freq: int) -> torch.Tensor:
    """(p, sin(2^0 p), cos(2^0 p), ..., sin(2^(L-1) p), cos(2^(L-1) p))."""
    parts = [p]
    for i in range(n_freq):
        scaled = (2.0 ** i) * p
        parts.append(torch.sin(scaled))
        parts.append(torch.cos(scaled))
    return torch.cat(parts, dim=-1)


def encoding_dim(n_freq: int, in_dim: int = 3) -> int:
    return in_dim * (1 + 2 * n_freq)


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------

class SphereSdf:
    def __init__(self, radius, center=(0.0, 0.0, 0.0)):
        self.radius = _as_tensor(radius)
        self.center = _as_tensor(center)

    def sdf(self, x):
        return torch.linalg.vector_norm(x - self.center.to(x.dtype), dim=-1) - self.radius.to(x.dtype)


class BoxSdf:
    def __init__(self, half_extents, center=(0.0, 0.0, 0.0)):
        self.half = _as_tensor(half_extents)
        self.center = _as_tensor(center)

    def sdf(self, x):
        q = torch.abs(x - self.center.to(x.dtype)) - self.half.to(x.dtype)
        outside = torch.linalg.vector_norm(torch.clamp(q, min=0.0), dim=-1)
        inside = torch.clamp(q.amax(dim=-1), max=0.0)
        return outside + inside


class TorusSdf:
    """Ring of radius major in the xy-plane, tube radius minor, z up."""

    def __init__(self, major, minor, center=(0.0, 0.0, 0.0)):
        self.major = _as_tensor(major)
        self.minor = _as_tensor(minor)
        self.center = _as_tensor(center)

    def sdf(self, x):
        p = x - self.center.to(x.dtype)
        ring = torch.linalg.vector_norm(p[..., :2], dim=-1) - self.major.to(x.dtype)
        q = torch.stack([ring, p[..., 2]], dim=-1)
        return torch.linalg.vector_norm(q, dim=-1) - self.minor.to(x.dtype)


class UnionSdf:
    def __init__(self, *children):
        self.children = children

    def sdf(self, x):
        vals = torch.stack([c.sdf(x) for c in self.children], dim=-1)
        return vals.amin(dim=-1)


class IntersectionSdf:
    def __init__(self, *children):
        self.children = children

    def sdf(self, x):
        vals = torch.stack([c.sdf(x) for c in self.children], dim=-1)
        return vals.amax(dim=-1)


class NeuralSdf(torch.nn.Module):
    """Positional-encoded MLP S(x); softplus hidden layers, linear output.

    skip_at concatenates the encoded input back in before that hidden layer
    (middle layer by default).  Desk-scale default is 4 hidden layers of
    width 64 with 6 encoding frequencies.
    """

    def __init__(self, n_hidden: int = 4, width: int = 64, n_freq: int = 6,
                 skip_at: int | None = None, softplus_beta: float = 100.0,
                 dtype=DTYPE):
        super().__init__()
        self.n_hidden = n_hidden
        self.width = width
        self.n_freq = n_freq
        self.skip_at = n_hidden // 2 if skip_at is None else skip_at
        self.softplus_beta = softplus_beta
        enc = encoding_dim(n_freq)
        dims_in = []
        for i in range(n_hidden):
            if i == 0:
                dims_in.append(enc)
            elif i == self.skip_at:
                dims_in.append(width + enc)
            else:
                dims_in.append(width)
        self.hidden = torch.nn.ModuleList(
            [torch.nn.Linear(d, width, dtype=dtype) for d in dims_in])
        self.out = torch.nn.Linear(width, 1, dtype=dtype)

    def forward(self, x):
        e = positional_encode(x.to(self.out.weight.dtype), self.n_freq)
        h = e
        for i, layer in enumerate(self.hidden):
            if i == self.skip_at and i > 0:
                h = torch.cat([h, e], dim=-1)
            h = F.softplus(layer(h), beta=self.softplus_beta)
        return self.out(h)[..., 0]

    def sdf(self, x):
        return self.forward(x)


# ---------------------------------------------------------------------------
# rays and tracing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Ray:
    """Batched rays; directions must be unit length."""

    origin: torch.Tensor     # (..., 3)
    direction: torch.Tensor  # (..., 3)

    @staticmethod
    def create(origin, direction) -> "Ray":
        origin = _as_tensor(origin)
        direction = _as_tensor(direction)
        norms = torch.linalg.vector_norm(direction, dim=-1)
        if not torch.all((norms - 1.0).abs() <= 1e-6):
            raise ValueError("ray directions must be unit length")
        return Ray(origin, direction)


@dataclass
class Intersection:
    """Per-ray trace result; misses carry converged=False."""

    x: torch.Tensor          # (..., 3)
    n: torch.Tensor | None   # (..., 3) detached normals, if requested
    t: torch.Tensor          # (...,)
    converged: torch.Tensor  # (...,) bool
    steps: torch.Tensor      # (...,) int
    entered: torch.Tensor    # (...,) bool, ray reached the bounding sphere
    exhausted: torch.Tensor = None  # (...,) bool, ran out of steps unconverged


def ray_sphere_entry(o, d, radius):
    """Entry/exit parameters against the bounding sphere |x| = radius.

    Returns (t_enter, t_exit, hits); t_enter is clamped at zero for origins
    inside the sphere, and hits is False when the sphere is missed entirely
    or lies behind the origin.
    """
    b = torch.sum(o * d, dim=-1)
    c = torch.sum(o * o, dim=-1) - radius * radius
    disc = b * b - c
    hits = disc > 0
    sq = torch.sqrt(torch.clamp(disc, min=0.0))
    t_enter = torch.clamp(-b - sq, min=0.0)
    t_exit = -b + sq
    hits = hits & (t_exit > 0)
    return t_enter, t_exit, hits


@torch.no_grad()
def sphere_trace(field, ray: Ray, radius: float, eps_hit: float | None = None,
                 max_steps: int = MAX_STEPS, bisect_steps: int = BISECT_STEPS,
                 with_normals: bool = False) -> Intersection:
    """March each ray by the signed distance until |S| <= eps_hit.

    Starts at the bounding-sphere entry point; a sign change brackets the
    surface and is refined by bisection.  Rays that leave the sphere or
    exhaust max_steps are misses.
    """
    o = ray.origin
    d = ray.direction
    if eps_hit is None:
        eps_hit = HIT_EPS_FACTOR * radius
    t_enter, t_exit, entered = ray_sphere_entry(o, d, radius)

    flat = o.reshape(-1, 3)
    dflat = d.reshape(-1, 3)
    n_rays = flat.shape[0]
    t = t_enter.reshape(-1).clone()
    t_exit = t_exit.reshape(-1)
    active = entered.reshape(-1).clone()
    converged = torch.zeros(n_rays, dtype=torch.bool)
    steps = torch.zeros(n_rays, dtype=torch.int64)
    t_prev = t.clone()

    for _ in range(max_steps):
        idx = active.nonzero(as_tuple=True)[0]
        if idx.numel() == 0:
            break
        x = flat[idx] + t[idx, None] * dflat[idx]
        s = field.sdf(x)
        steps[idx] += 1

        hit_now = s.abs() <= eps_hit
        overshoot = s < -eps_hit

        hit_idx = idx[hit_now]
        converged[hit_idx] = True
        active[hit_idx] = False

        over_idx = idx[overshoot & ~hit_now]
        if over_idx.numel() > 0:
            lo = t_prev[over_idx].clone()
            hi = t[over_idx].clone()
            for _ in range(bisect_steps):
                mid = 0.5 * (lo + hi)
                sm = field.sdf(flat[over_idx] + mid[:, None] * dflat[over_idx])
                if bool((sm.abs() <= eps_hit).all()):
                    break
                neg = sm < 0
                hi = torch.where(neg, mid, hi)
                lo = torch.where(neg, lo, mid)
            mid = 0.5 * (lo + hi)
            sm = field.sdf(flat[over_idx] + mid[:, None] * dflat[over_idx])
            t[over_idx] = mid
            converged[over_idx] = sm.abs() <= eps_hit
            active[over_idx] = False

        walk = idx[~hit_now & ~overshoot]
        if walk.numel() > 0:
            t_prev[walk] = t[walk]
            t[walk] = t[walk] + s[~hit_now & ~overshoot]
            escaped = walk[t[walk] > t_exit[walk]]
            active[escaped] = False

    shape = t_enter.shape
    t_out = t.reshape(shape)
    x_out = o + t_out[..., None] * d
    conv = converged.reshape(shape)
    normals = None
    if with_normals:
        g = sdf_gradient(field, x_out.reshape(-1, 3), create_graph=False)
        normals = normal_from_gradient(g, -dflat).reshape(o.shape)
    return Intersection(x=x_out, n=normals, t=t_out, converged=conv,
                        steps=steps.reshape(shape), entered=entered,
                        exhausted=active.reshape(shape))


def min_sdf_along_ray(field, ray: Ray, radius: float, samples: int = 100):
    """Minimum S over uniform samples of the in-bounds segment (differentiable).

    Rays that miss the bounding sphere get +inf; gradients flow only through
    the minimizing sample.
    """
    o = ray.origin
    d = ray.direction
    t_enter, t_exit, entered = ray_sphere_entry(o, d, radius)
    frac = torch.linspace(0.0, 1.0, samples, dtype=o.dtype)
    ts = t_enter[..., None] + (t_exit - t_enter)[..., None] * frac
    x = o[..., None, :] + ts[..., None] * d[..., None, :]
    vals = field.sdf(x)
    mins = torch.min(vals, dim=-1).values
    inf = torch.full_like(mins, torch.inf)
    return torch.where(entered, mins, inf)


def sdf_gradient(field, x, create_graph: bool = False):
    """Spatial gradient of the field via autodiff (exact, no finite differences)."""
    needs_local = not x.requires_grad
    xg = x.detach().requires_grad_(True) if needs_local else x
    with torch.enable_grad():
        s = field.sdf(xg)
        (g,) = torch.autograd.grad(s.sum(), xg, create_graph=create_graph)
    return g


def normal_from_gradient(g, fallback=None):
    """Normalize SDF gradients into unit normals.

    Near-zero gradients (norm < GRAD_FALLBACK_EPS) are replaced by the given
    fallback direction (e.g. the reversed ray) and counted in DIAGNOSTICS.
    """
    norm = torch.linalg.vector_norm(g, dim=-1, keepdim=True)
    bad = norm[..., 0] < GRAD_FALLBACK_EPS
    if bool(torch.any(bad)):
        DIAGNOSTICS["zero_gradients"] += int(bad.sum())
        if fallback is None:
            fallback = torch.zeros_like(g)
            fallback[..., 2] = 1.0
        fb = fallback / torch.clamp(
            torch.linalg.vector_norm(fallback, dim=-1, keepdim=True), min=1e-12)
        g = torch.where(bad[..., None], fb, g)
        norm = torch.linalg.vector_norm(g, dim=-1, keepdim=True)
    return g / norm
