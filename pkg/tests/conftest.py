"""Shared fixtures and the finite-difference gradient checker."""

import numpy as np
import pytest

from vtembed.autograd import Grid2D, Tensor
from vtembed.data import SyntheticTaskSpec, generate_corpus
from vtembed.model import Model, ModelConfig

FD_STEP = 1e-5


def fd_check(fn, tensors, rel_tol=1e-4, n_coords=6, seed=0):
    """Compare analytic gradients of scalar fn(tensors) against central
    finite differences at a few random coordinates per tensor."""
    out = fn()
    out.backward()
    rng = np.random.default_rng(seed)
    for t in tensors:
        assert t.grad is not None, "no gradient reached a checked tensor"
        flat = t.data.ravel()
        coords = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + FD_STEP
            hi = fn().item()
            flat[c] = orig - FD_STEP
            lo = fn().item()
            flat[c] = orig
            num = (hi - lo) / (2 * FD_STEP)
            ana = t.grad.ravel()[c]
            denom = max(abs(num), abs(ana), 1.0)
            assert abs(num - ana) / denom <= rel_tol, (
                f"grad mismatch at coord {c}: analytic {ana}, numeric {num}")


@pytest.fixture(scope="session")
def small_cfg():
    return ModelConfig(vocab_size=64, embed_dim=16, num_layers=2, num_heads=2,
                       patch_h=4, patch_w=4, vision_channels=3,
                       compression_factor=2, max_seq_len=96, seed=0)


@pytest.fixture(scope="session")
def small_corpus(small_cfg):
    spec = SyntheticTaskSpec(task_class="T2I", num_classes=4, corpus_size=24,
                             queries_per_class=5, seed=0)
    return generate_corpus(spec, small_cfg)


@pytest.fixture()
def small_model(small_cfg):
    return Model(small_cfg)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def random_grid(rng, h=4, w=4, c=3):
    return Grid2D(rng.normal(0, 1, (h, w, c)))


def unit_rows(rng, n, d):
    m = rng.normal(0, 1, (n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def tensor_unit_rows(rng, n, d, requires_grad=False):
    return Tensor(unit_rows(rng, n, d), requires_grad=requires_grad)
