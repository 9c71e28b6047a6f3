import numpy as np
import pytest
import torch

from metadenoise.networks import NetworkConfig, build_maskgen, build_network


def toy_config(**kw) -> NetworkConfig:
    base = dict(in_channels=1, base_channels=1, depth=1, head_channels=1, level_convs=1,
                mid_convs=1, kernel_size=1, mask_channels=1, mask_convs=2)
    base.update(kw)
    return NetworkConfig(**base)


def randomize(params, gen, scale=0.5):
    """Overwrite every tensor in place with fresh uniform values (zero-init heads would hide gradients)."""
    with torch.no_grad():
        for t in params.tensors():
            t.copy_(torch.empty_like(t).uniform_(-scale, scale, generator=gen))
    return params


def toy_pair(cfg=None, seed=0, dtype=torch.float64, randomized=True):
    cfg = cfg or toy_config()
    gen = torch.Generator().manual_seed(seed)
    theta1 = build_network(cfg, gen, dtype)
    theta2 = build_maskgen(cfg, gen, dtype)
    if randomized:
        randomize(theta1, gen)
        randomize(theta2, gen)
    return theta1, theta2


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy():
    return toy_pair()


def central_differences(fn, tensors, eps=1e-6):
    """Numerical gradient of scalar ``fn()`` with respect to each tensor, perturbing entries in place."""
    out = []
    with torch.no_grad():
        for t in tensors:
            g = torch.zeros_like(t)
            flat, gflat = t.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = float(fn())
                flat[i] = orig - eps
                lo = float(fn())
                flat[i] = orig
                gflat[i] = (hi - lo) / (2 * eps)
            out.append(g)
    return out


def relative_error(analytic, numeric):
    a = torch.cat([g.reshape(-1) for g in analytic])
    n = torch.cat([g.reshape(-1) for g in numeric])
    return float((a - n).norm() / max(float(n.norm()), 1e-12))


def pytest_terminal_summary(terminalreporter):
    acceptance = __import__("sys").modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance.RESULTS:
        terminalreporter.write_line(line)
