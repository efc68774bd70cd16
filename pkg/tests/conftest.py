import numpy as np
import pytest
import torch

from proxytta.data import SceneConfig, generate_scene
from proxytta.model import ModelConfig, init_model, insert_adaptation_layer


TINY_SCENE = SceneConfig(height=32, width=32, depth_min=1.0, depth_max=10.0, density=0.05)
TINY_MODEL = ModelConfig(height=32, width=32)


def tiny_samples(n, seed0=0, scene=TINY_SCENE):
    return [generate_scene(seed0 + i, scene) for i in range(n)]


@pytest.fixture(scope="session")
def tiny_dataset():
    return tiny_samples(24)


@pytest.fixture()
def tiny_model():
    return init_model(TINY_MODEL, seed=0)


@pytest.fixture()
def tiny_model_with_adapt():
    model = init_model(TINY_MODEL, seed=0)
    insert_adaptation_layer(model, seed=1)
    # Nudge the zero-initialized expand conv so gradient checks see a generic
    # operating point instead of the degenerate all-zero one.
    with torch.no_grad():
        for p in model.adaptation_layer.parameters():
            p.add_(torch.randn_like(p) * 0.05)
    return model


def central_difference_grads(f, x, indices, h=1e-4):
    """Central finite differences of scalar f at selected flat indices of x."""
    flat = x.reshape(-1)
    out = []
    with torch.no_grad():
        for idx in indices:
            orig = float(flat[idx])
            flat[idx] = orig + h
            fp = float(f())
            flat[idx] = orig - h
            fm = float(f())
            flat[idx] = orig
            out.append((fp - fm) / (2.0 * h))
    return np.asarray(out)


def assert_grads_close(analytic, fd, rtol=1e-3, floor=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), floor)
    rel = np.abs(analytic - fd) / scale
    mask = np.maximum(np.abs(analytic), np.abs(fd)) >= floor
    assert np.all(rel[mask] <= rtol), f"gradient mismatch: max rel err {rel[mask].max():.2e}"
