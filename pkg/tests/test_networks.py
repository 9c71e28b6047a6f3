import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_differences, relative_error, toy_config, toy_pair
from metadenoise.errors import ConfigError, DimensionError
from metadenoise.networks import (
    NetworkConfig,
    ParamPartition,
    build_maskgen,
    build_multitask,
    build_network,
    build_parallel_baseline,
    clone_heads,
    count_parameters,
    forward_maskgen,
    forward_multitask,
    replace_heads,
    to_image,
    to_tensor,
)


@pytest.fixture(scope="module")
def default_net():
    return build_multitask(NetworkConfig(), 0)


def test_total_budget(default_net):
    n = count_parameters(default_net)
    assert abs(n - 660_000) <= 0.10 * 660_000


def test_head_budget(default_net):
    n = count_parameters(default_net.pri) + count_parameters(default_net.aux)
    assert abs(n - 120_000) <= 0.20 * 120_000


def test_mask_budget(default_net):
    assert count_parameters(build_maskgen(NetworkConfig(), 0)) <= 0.10 * count_parameters(default_net)


def test_parallel_baseline_budget(default_net):
    par = build_parallel_baseline(NetworkConfig(variant="parallel"), 0)
    seq = count_parameters(default_net)
    assert abs(count_parameters(par) - seq) <= 0.05 * seq


def test_count_parameters_basics(default_net):
    conv = {"w": torch.zeros(16, 8, 3, 3), "b": torch.zeros(16)}
    assert count_parameters(conv) == 1168
    assert count_parameters(None) == 0
    assert count_parameters(ParamPartition(NetworkConfig())) == 0
    parts = sum(count_parameters(getattr(default_net, p)) for p in ("body", "pri", "aux"))
    assert parts == count_parameters(default_net)


def test_partitions_are_disjoint(default_net):
    ids = [id(t) for t in default_net.tensors()]
    assert len(ids) == len(set(ids))
    names = [n for n, _ in default_net.named()]
    assert len(names) == len(set(names))


def test_toy_configs_fit_fd_budget():
    t1, t2 = toy_pair()
    assert count_parameters(t1) + count_parameters(t2) <= 50


def test_equal_seeds_bit_identical():
    a, b = build_multitask(NetworkConfig(), 3), build_multitask(NetworkConfig(), 3)
    assert all(torch.equal(x, y) for x, y in zip(a.tensors(), b.tensors()))
    m1, m2 = build_maskgen(NetworkConfig(), 3), build_maskgen(NetworkConfig(), 3)
    assert all(torch.equal(x, y) for x, y in zip(m1.tensors(), m2.tensors()))


@pytest.mark.parametrize("variant", ["sequential", "parallel"])
def test_fresh_network_identities(variant):
    net = build_network(NetworkConfig(variant=variant, base_channels=8, head_channels=8), 0)
    x = torch.rand(2, 3, 13, 18)
    clean, noisy = forward_multitask(net, x)
    assert clean.shape == x.shape and noisy.shape == x.shape
    assert torch.equal(clean, x)
    assert torch.equal(noisy, torch.zeros_like(x))


def test_channel_mismatch():
    net = build_multitask(toy_config(), 0)
    with pytest.raises(DimensionError):
        forward_multitask(net, torch.rand(1, 3, 8, 8))


def test_invalid_configs():
    for kw in ({"depth": 0}, {"base_channels": 0}, {"variant": "diagonal"}, {"kernel_size": 2}, {"in_channels": 2}):
        with pytest.raises(ConfigError):
            NetworkConfig(**kw)
    with pytest.raises(ConfigError):
        build_parallel_baseline(NetworkConfig(), 0)


@settings(max_examples=30, deadline=None)
@given(h=st.integers(1, 20), w=st.integers(1, 20), seed=st.integers(0, 1000))
def test_shapes_and_mask_range(h, w, seed):
    t1, t2 = toy_pair(toy_config(depth=2, kernel_size=3), seed, torch.float32)
    x = torch.rand(1, 1, h, w, generator=torch.Generator().manual_seed(seed)) * 4 - 2
    clean, noisy = forward_multitask(t1, x)
    mask = forward_maskgen(t2, x)
    assert clean.shape == x.shape and noisy.shape == x.shape
    assert mask.shape == (1, 1, h, w)
    assert float(mask.min()) >= 0.0 and float(mask.max()) <= 1.0


def test_mask_deterministic():
    t2 = build_maskgen(NetworkConfig(), 1)
    x = torch.rand(1, 3, 16, 16)
    assert torch.equal(forward_maskgen(t2, x), forward_maskgen(t2, x))


def test_clone_and_replace_heads():
    t1, _ = toy_pair(toy_config(kernel_size=3, head_channels=2))
    x = torch.rand(1, 1, 8, 8, dtype=torch.float64)
    ref = forward_multitask(t1, x)
    heads = clone_heads(t1)
    again = forward_multitask(replace_heads(t1, heads), x)
    assert all(torch.equal(a, b) for a, b in zip(ref, again))
    before = {k: v.clone() for k, v in t1.pri.items()}
    heads["pri"]["conv0.weight"].add_(1.0)
    assert all(torch.equal(before[k], t1.pri[k]) for k in before)
    swapped = replace_heads(t1, heads)
    assert all(swapped.body[k] is t1.body[k] for k in t1.body)
    bad = clone_heads(t1)
    bad["aux"]["out.weight"] = torch.zeros(3, 3, 3, 3, dtype=torch.float64)
    with pytest.raises(DimensionError):
        replace_heads(t1, bad)


@pytest.mark.parametrize("kw", [{}, {"kernel_size": 3, "depth": 2}, {"variant": "parallel"}])
def test_multitask_forward_finite_differences(kw):
    cfg = toy_config(**kw)
    t1, _ = toy_pair(cfg, seed=4)
    x = torch.rand(1, 1, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    x.requires_grad_(True)
    wc = torch.randn(1, 1, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    wn = torch.randn(1, 1, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(2))

    def objective():
        c, n = forward_multitask(t1, x)
        return (c * wc).sum() + (n * wn).sum()

    tensors = t1.tensors() + [x]
    for t in tensors:
        t.requires_grad_(True)
    analytic = torch.autograd.grad(objective(), tensors)
    assert relative_error(analytic, central_differences(objective, tensors)) < 1e-3


def test_maskgen_forward_finite_differences():
    _, t2 = toy_pair(toy_config(kernel_size=3, mask_convs=3), seed=6)
    x = torch.rand(1, 1, 6, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(3))
    x.requires_grad_(True)
    w = torch.randn(1, 1, 6, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(4))

    def objective():
        return (forward_maskgen(t2, x) * w).sum()

    tensors = t2.tensors() + [x]
    for t in tensors:
        t.requires_grad_(True)
    analytic = torch.autograd.grad(objective(), tensors)
    assert relative_error(analytic, central_differences(objective, tensors)) < 1e-3


def test_tensor_image_round_trip():
    img = np.random.default_rng(0).random((5, 4, 3)).astype(np.float32)
    t = to_tensor(img)
    assert t.shape == (1, 3, 5, 4)
    assert np.array_equal(to_image(t), img)
    assert to_tensor([img, img]).shape == (2, 3, 5, 4)
