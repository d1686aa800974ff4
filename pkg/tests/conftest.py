"""Shared test helpers: Monte-Carlo references and direction sampling."""

import math

import numpy as np
import pytest
import torch

from sgir.sg import SphericalGaussian, sg_eval


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(2)


def random_unit_vectors(rng: np.random.Generator, n: int) -> torch.Tensor:
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    return torch.as_tensor(v, dtype=torch.float64)


def stratified_sphere_dirs(n_samples: int, rng: np.random.Generator) -> torch.Tensor:
    """Jittered-stratified uniform directions over the whole sphere."""
    k = int(math.sqrt(n_samples))
    u = (np.arange(k)[:, None] + rng.random((k, k))) / k
    v = (np.arange(k)[None, :] + rng.random((k, k))) / k
    ct = 2.0 * u.ravel() - 1.0
    st = np.sqrt(np.clip(1.0 - ct**2, 0.0, None))
    ph = 2.0 * np.pi * v.ravel()
    dirs = np.stack([st * np.cos(ph), st * np.sin(ph), ct], axis=-1)
    return torch.as_tensor(dirs, dtype=torch.float64)


def mc_sphere_integral(g: SphericalGaussian, n_samples: int, rng: np.random.Generator):
    """Stratified Monte-Carlo integral of an SG over the sphere."""
    dirs = stratified_sphere_dirs(n_samples, rng)
    return 4.0 * math.pi * sg_eval(g, dirs).mean(dim=0)


def mc_integral_times_cosine(g: SphericalGaussian, n: torch.Tensor, n_samples: int,
                             rng: np.random.Generator):
    """Stratified cosine-weighted MC of integral g(v) * max(v.n, 0) dv."""
    from sgir.render import stratified_cosine_dirs

    dirs = stratified_cosine_dirs(n, n_samples, rng)
    return math.pi * sg_eval(g, dirs).mean(dim=0)


def make_random_sg(rng: np.random.Generator, lam_lo=0.05, lam_hi=100.0,
                   amp_lo=0.01, amp_hi=10.0) -> SphericalGaussian:
    axis = random_unit_vectors(rng, 1)[0]
    lam = math.exp(rng.uniform(math.log(lam_lo), math.log(lam_hi)))
    amp = np.exp(rng.uniform(math.log(amp_lo), math.log(amp_hi), size=3))
    return SphericalGaussian.create(axis, lam, amp)
