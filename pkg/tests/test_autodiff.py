"""Parameter store, reverse-mode gradients, implicit surface differentiation."""

import math

import numpy as np
import pytest
import torch

from sgir import params as params_mod
from sgir.params import Gradient, ParamStore, attach_intersection
from sgir.sdf import NeuralSdf, Ray, SphereSdf, sdf_gradient, sphere_trace


def small_store():
    a = torch.nn.Parameter(torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64))
    b = torch.nn.Parameter(torch.tensor([[0.5, 0.5], [1.5, -0.5]], dtype=torch.float64))
    return ParamStore({"seg_a": [a], "seg_b": [b]}), a, b


class TestParamStore:
    def test_layout_and_flat(self):
        store, a, b = small_store()
        assert store.n_params == 7
        assert store.slices == {"seg_a": (0, 3), "seg_b": (3, 7)}
        np.testing.assert_allclose(store.flat(), [1, -2, 3, 0.5, 0.5, 1.5, -0.5])

    def test_load_and_perturb(self):
        store, a, b = small_store()
        vec = store.flat()
        vec[4] = 9.0
        store.load_flat(vec)
        assert float(b[0, 1]) == 9.0
        store.perturb(0, 0.25)
        assert float(a[0]) == 1.25

    def test_sum_of_squares_gradient(self):
        store, a, b = small_store()
        f = sum((t**2).sum() for t in store.parameters())
        grad = store.backward(f)
        assert isinstance(grad, Gradient)
        np.testing.assert_allclose(grad.values, 2.0 * store.flat())

    def test_untouched_parameters_get_exact_zeros(self):
        store, a, b = small_store()
        f = (a**2).sum()
        grad = store.backward(f)
        assert np.all(grad.values[3:] == 0.0)

    def test_linearity(self):
        store, a, b = small_store()

        def f():
            return (a * torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)).sum()

        def g():
            return (b**3).sum()

        combined = store.backward(2.0 * f() + 0.5 * g()).values
        separate = 2.0 * store.backward(f()).values + 0.5 * store.backward(g()).values
        np.testing.assert_allclose(combined, separate, rtol=1e-12)

    def test_nonfinite_gradient_reports_segment(self):
        store, a, b = small_store()
        f = torch.sqrt(b.sum() - 2.0) + a.sum()  # d sqrt(0) = inf in seg_b
        with pytest.raises(FloatingPointError, match="seg_b"):
            store.backward(f)

    def test_second_order_eikonal_path(self):
        """Gradient of |grad_x S|^2 w.r.t. the weights matches finite differences."""
        torch.manual_seed(1)
        field = NeuralSdf(n_hidden=2, width=16, n_freq=2)
        store = ParamStore({"sdf_weights": list(field.parameters())})
        x = torch.tensor([[0.2, -0.3, 0.4]], dtype=torch.float64)

        def value():
            g = sdf_gradient(field, x, create_graph=True)
            return (g**2).sum()

        grad = store.backward(value()).values
        rng = np.random.default_rng(0)
        checked = 0
        for idx in rng.choice(store.n_params, size=25, replace=False):
            h = 1e-5 * max(1.0, abs(store.flat()[idx]))
            store.perturb(idx, h)
            fp = float(value())
            store.perturb(idx, -2 * h)
            fm = float(value())
            store.perturb(idx, h)
            fd = (fp - fm) / (2 * h)
            if abs(fd) < 1e-8:
                continue
            assert abs(grad[idx] - fd) / max(abs(fd), 1e-8) < 1e-3
            checked += 1
        assert checked >= 15


class ParamSphere:
    """Sphere with differentiable center offset and radius."""

    def __init__(self, tau, r):
        self.tau = tau
        self.r = r

    def sdf(self, x):
        center = torch.stack([torch.zeros_like(self.tau), torch.zeros_like(self.tau), self.tau])
        return torch.linalg.vector_norm(x - center, dim=-1) - self.r


class TestImplicitDifferentiation:
    def test_translated_sphere_unit_gradient(self):
        # surface point moves one-for-one with the sphere along the ray axis
        tau = torch.tensor(0.0, dtype=torch.float64, requires_grad=True)
        r = torch.tensor(1.0, dtype=torch.float64)
        field = ParamSphere(tau, r)
        ray = Ray(torch.tensor([[0.0, 0.0, 3.0]], dtype=torch.float64),
                  torch.tensor([[0.0, 0.0, -1.0]], dtype=torch.float64))
        hit = sphere_trace(field, ray, radius=2.0, eps_hit=1e-10)
        x = attach_intersection(field, hit.x, ray.direction)
        (dz,) = torch.autograd.grad(x[0, 2], tau)
        assert float(dz) == pytest.approx(1.0, abs=1e-6)

    def test_scaled_sphere_t_gradient(self):
        # for a radial ray, t = |o| - r so dt/dr = -1
        tau = torch.tensor(0.0, dtype=torch.float64)
        r = torch.tensor(1.0, dtype=torch.float64, requires_grad=True)
        field = ParamSphere(tau, r)
        o = torch.tensor([[0.0, 0.0, 3.0]], dtype=torch.float64)
        d = torch.tensor([[0.0, 0.0, -1.0]], dtype=torch.float64)
        hit = sphere_trace(field, Ray(o, d), radius=2.0, eps_hit=1e-10)
        x = attach_intersection(field, hit.x, d)
        t = torch.sum((x - o) * d, dim=-1)
        (dt,) = torch.autograd.grad(t[0], r)
        assert float(dt) == pytest.approx(-1.0, abs=1e-6)

    def test_grazing_rays_detached_and_flagged(self):
        tau = torch.tensor(0.0, dtype=torch.float64, requires_grad=True)
        field = ParamSphere(tau, torch.tensor(1.0, dtype=torch.float64))
        # tangent point: gradient perpendicular to the ray direction
        x0 = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
        d = torch.tensor([[0.0, 0.0, -1.0]], dtype=torch.float64)
        params_mod.DIAGNOSTICS["detached_grazing_rays"] = 0
        x = attach_intersection(field, x0, d)
        assert params_mod.DIAGNOSTICS["detached_grazing_rays"] == 1
        assert not x.requires_grad or torch.autograd.grad(
            x.sum(), tau, allow_unused=True)[0] is None

    def test_neural_sdf_retrace_finite_difference(self):
        """Implicit-path gradients of the hit depth vs re-traced finite differences."""
        torch.manual_seed(2)
        field = NeuralSdf(n_hidden=2, width=16, n_freq=2)
        # pretrain-lite: nudge the net toward a sphere so rays actually hit
        opt = torch.optim.Adam(field.parameters(), lr=1e-2)
        rng = np.random.default_rng(3)
        target = SphereSdf(0.8)
        for _ in range(400):
            pts = torch.as_tensor(rng.uniform(-1.4, 1.4, (256, 3)))
            loss = ((field.sdf(pts) - target.sdf(pts)) ** 2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()

        store = ParamStore({"sdf_weights": list(field.parameters())})
        o = torch.tensor([[0.0, 0.0, 2.5]], dtype=torch.float64)
        d = torch.tensor([[0.0, 0.0, -1.0]], dtype=torch.float64)

        def hit_depth():
            hit = sphere_trace(field, Ray(o, d), radius=1.5, eps_hit=1e-12,
                               max_steps=256, bisect_steps=60)
            return hit

        hit = hit_depth()
        assert bool(hit.converged[0])
        x = attach_intersection(field, hit.x, d)
        t = torch.sum((x - o) * d, dim=-1)
        grad = store.backward(t[0]).values

        passed = total = 0
        for idx in rng.choice(store.n_params, size=30, replace=False):
            h = 1e-4 * max(1.0, abs(store.flat()[idx]))
            store.perturb(idx, h)
            tp = float(hit_depth().t[0])
            store.perturb(idx, -2 * h)
            tm = float(hit_depth().t[0])
            store.perturb(idx, h)
            fd = (tp - tm) / (2 * h)
            if abs(fd) < 1e-7:
                continue
            total += 1
            if abs(grad[idx] - fd) / max(abs(fd), 1e-7) < 1e-2:
                passed += 1
        assert total >= 15
        assert passed / total >= 0.9
