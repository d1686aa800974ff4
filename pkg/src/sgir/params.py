"""Flat parameter store and gradient plumbing over the optimizable scene.

Every optimizable quantity lives in a named segment of raw, unconstrained
tensors: environment lobe axes (normalized on use), log sharpness and log
amplitudes for the environment and the specular lobe, and the SDF/albedo MLP
weights.  backward() produces one flat float64 gradient vector aligned with
the store, with per-segment NaN/Inf diagnostics.

attach_intersection implements the implicit-differentiation rule for sphere
traced surface points: with x0 the traced (constant) hit point of ray
(o, d) on S(.; theta) = 0,

    x(theta) = x0 - d * S(x0; theta) / (grad_x S(x0) . d)   [denominator frozen]

so that dx/dtheta = -(d / (grad S . d)) * dS/dtheta at fixed x0, while the
value of x equals x0.  The marching loop itself records nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .sdf import sdf_gradient

GRAZING_DOT_EPS = 1e-6

DIAGNOSTICS = {"detached_grazing_rays": 0}


@dataclass
class Gradient:
    """Flat gradient aligned with a ParamStore's parameter layout."""

    values: np.ndarray
    segments: dict  # name -> (start, stop) into values


class ParamStore:
    """Named segments of torch parameters with flat-vector views."""

    def __init__(self, segments: dict):
        # segments: name -> list of tensors (requires_grad on trainables)
        self.segments = {k: list(v) for k, v in segments.items()}
        self.slices = {}
        start = 0
        for name, tensors in self.segments.items():
            n = sum(t.numel() for t in tensors)
            self.slices[name] = (start, start + n)
            start += n
        self.n_params = start

    def parameters(self):
        for tensors in self.segments.values():
            yield from tensors

    def flat(self) -> np.ndarray:
        out = np.empty(self.n_params, dtype=np.float64)
        pos = 0
        for t in self.parameters():
            n = t.numel()
            out[pos:pos + n] = t.detach().reshape(-1).to(torch.float64).numpy()
            pos += n
        return out

    def load_flat(self, vec: np.ndarray):
        if vec.shape != (self.n_params,):
            raise ValueError("flat vector length mismatch")
        pos = 0
        with torch.no_grad():
            for t in self.parameters():
                n = t.numel()
                t.copy_(torch.as_tensor(vec[pos:pos + n], dtype=t.dtype).reshape(t.shape))
                pos += n

    def locate(self, flat_index: int):
        """Map a flat index to (segment name, tensor, offset within tensor)."""
        pos = 0
        for name, tensors in self.segments.items():
            for t in tensors:
                n = t.numel()
                if flat_index < pos + n:
                    return name, t, flat_index - pos
                pos += n
        raise IndexError(flat_index)

    def perturb(self, flat_index: int, delta: float):
        _, t, off = self.locate(flat_index)
        with torch.no_grad():
            t.reshape(-1)[off] += delta

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def backward(self, scalar: torch.Tensor) -> Gradient:
        """Reverse-mode gradient of a recorded scalar over all raw parameters.

        Untouched parameters get exact zeros.  NaN/Inf anywhere aborts with
        the offending segment named.
        """
        if scalar.numel() != 1:
            raise ValueError("backward expects a scalar output")
        params = list(self.parameters())
        grads = torch.autograd.grad(scalar, params, allow_unused=True, materialize_grads=True)
        out = np.empty(self.n_params, dtype=np.float64)
        pos = 0
        for t, g in zip(params, grads):
            n = t.numel()
            out[pos:pos + n] = g.detach().reshape(-1).to(torch.float64).numpy()
            pos += n
        for name, (a, b) in self.slices.items():
            if not np.all(np.isfinite(out[a:b])):
                raise FloatingPointError(f"non-finite gradient in segment '{name}'")
        return Gradient(out, dict(self.slices))


def attach_intersection(field, x0: torch.Tensor, d: torch.Tensor,
                        grazing_eps: float = GRAZING_DOT_EPS) -> torch.Tensor:
    """Differentiable surface point from a converged (detached) trace.

    x0, d: (..., 3); returns x equal to x0 in value whose gradient w.r.t. the
    field parameters follows the implicit rule.  Rays with |grad S . d| below
    grazing_eps are detached (no position gradient) and counted.
    """
    x0 = x0.detach()
    d = d.detach()
    s = field.sdf(x0)
    g = sdf_gradient(field, x0, create_graph=False).detach()
    denom = torch.sum(g * d, dim=-1)
    grazing = denom.abs() < grazing_eps
    if bool(torch.any(grazing)):
        DIAGNOSTICS["detached_grazing_rays"] += int(grazing.sum())
    safe = torch.where(grazing, torch.ones_like(denom), denom)
    x = x0 - d * (s / safe)[..., None]
    return torch.where(grazing[..., None], x0, x)
