import math

import numpy as np
import pytest
import torch
from PIL import Image

from conftest import toy_config, toy_pair
from metadenoise.adapt_eval import (
    AdaptConfig,
    evaluate,
    meta_test_adapt,
    minmax_normalize,
    predict,
    unfold_adaptation,
    visualize_features,
    visualize_masks,
)
from metadenoise.errors import ConfigError, DomainError
from metadenoise.imaging import PatchPair
from metadenoise.losses import masked_rec_loss
from metadenoise.networks import (
    NetworkConfig,
    build_maskgen,
    clone_heads,
    forward_maskgen,
    forward_multitask,
    map_mask,
    replace_heads,
    to_tensor,
)


def small():
    cfg = toy_config(kernel_size=3, head_channels=3, depth=2, base_channels=2)
    return toy_pair(cfg, seed=2, dtype=torch.float32)


def pairs(n=4, size=16, seed=0):
    r = np.random.default_rng(seed)
    out = []
    for i in range(n):
        clean = r.random((size, size, 1)).astype(np.float32)
        noisy = np.clip(clean + r.normal(0, 0.1, clean.shape), 0, 1).astype(np.float32)
        out.append((f"im{i}", PatchPair(noisy, clean)))
    return out


def test_defaults():
    cfg = AdaptConfig()
    assert (cfg.K, cfg.alpha, cfg.restore_after) == (5, 1e-5, True)
    with pytest.raises(ConfigError):
        AdaptConfig(K=-1)
    with pytest.raises(ConfigError):
        AdaptConfig(alpha=0)


def test_body_and_mask_stay_frozen():
    t1, t2 = small()
    body = {k: v.clone() for k, v in t1.body.items()}
    heads = clone_heads(t1)
    mask = [t.clone() for t in t2.tensors()]
    adapted, trace = meta_test_adapt(t1, t2, pairs(1)[0][1].noisy, AdaptConfig(K=5, alpha=1e-2))
    assert all(torch.equal(body[k], t1.body[k]) for k in body)
    assert all(torch.equal(a, b) for a, b in zip(mask, t2.tensors()))
    assert all(torch.equal(heads[p][k], getattr(t1, p)[k]) for p in heads for k in heads[p])
    assert len(trace.per_step) == 5 and not trace.diverged
    assert any(not torch.equal(adapted["pri"][k], t1.pri[k]) for k in t1.pri)


def test_single_step_matches_plain_gradient():
    t1, t2 = small()
    noisy = pairs(1)[0][1].noisy
    x = to_tensor(noisy)
    heads = [t.detach().clone().requires_grad_(True) for t in list(t1.pri.values()) + list(t1.aux.values())]
    names = [("pri", k) for k in t1.pri] + [("aux", k) for k in t1.aux]
    hd = {"pri": {}, "aux": {}}
    for (p, k), t in zip(names, heads):
        hd[p][k] = t
    _, n = forward_multitask(replace_heads(t1, hd), x)
    with torch.no_grad():
        m = forward_maskgen(t2, x)
    g = torch.autograd.grad(masked_rec_loss(n, x, m), heads)
    adapted, _ = meta_test_adapt(t1, t2, noisy, AdaptConfig(K=1, alpha=0.1))
    for (p, k), t0, gi in zip(names, heads, g):
        assert torch.allclose(adapted[p][k], t0.detach() - 0.1 * gi, atol=1e-7, rtol=0)


def test_mask_is_constant_across_steps():
    _, t2 = small()
    x = to_tensor(pairs(1)[0][1].noisy)
    frozen = map_mask(t2, torch.Tensor.detach)
    assert torch.equal(forward_maskgen(frozen, x), forward_maskgen(frozen, x))


def test_zero_steps_equal_unadapted_output():
    t1, t2 = small()
    noisy = pairs(1)[0][1].noisy
    _, trace = meta_test_adapt(t1, t2, noisy, AdaptConfig(K=0))
    assert torch.equal(trace.final_clean, predict(t1, noisy))
    data = pairs()
    a = evaluate(data, t1, t2, "adapt", 16, AdaptConfig(K=0))
    b = evaluate(data, t1, t2, "no-adapt", 16)
    assert a.per_image == b.per_image


def test_dataset_order_does_not_change_metrics():
    t1, t2 = small()
    data = pairs(5)
    cfg = AdaptConfig(K=3, alpha=1e-3)
    a = evaluate(data, t1, t2, "adapt", 16, cfg)
    b = evaluate(list(reversed(data)), t1, t2, "adapt", 16, cfg)
    assert a.per_image == b.per_image
    assert [r[0] for r in a.per_image] == sorted(k for k, _ in data)


def test_evaluate_errors():
    t1, t2 = small()
    with pytest.raises(ConfigError):
        evaluate([], t1, t2)
    with pytest.raises(ConfigError):
        evaluate(pairs(1), t1, t2, "sometimes")
    with pytest.raises(ConfigError):
        evaluate(pairs(1), t1, t2, "adapt", cfg=AdaptConfig(restore_after=False))


def test_divergence_stops_early():
    t1, t2 = small()
    noisy = np.full((16, 16, 1), np.nan, dtype=np.float32)
    _, trace = meta_test_adapt(t1, t2, noisy, AdaptConfig(K=5))
    assert trace.diverged and len(trace.per_step) == 0


def test_minmax_normalization_rule():
    fmap = np.zeros((2, 2, 2))
    fmap[:, :, 0] = [[3.0, 7.0], [7.0, 3.0]]
    fmap[:, :, 1] = 5.0
    out = minmax_normalize(fmap)
    assert np.array_equal(out[:, :, 0], [[0.0, 1.0], [1.0, 0.0]])
    assert np.array_equal(out[:, :, 1], np.zeros((2, 2)))


def test_mask_figures(tmp_path):
    cfg = NetworkConfig(in_channels=1, mask_channels=2, mask_convs=2, kernel_size=3)
    t2 = build_maskgen(cfg, 0)
    with torch.no_grad():
        for t in t2.tensors():
            t.zero_()
    images = [p.noisy for _, p in pairs(3)]
    written = visualize_masks([t2, t2], images, tmp_path)
    assert len(written) == 2 * 3 + 1
    px = np.asarray(Image.open(tmp_path / "mask_ckpt00_img00.png"))
    assert np.all(px == 128)
    assert (tmp_path / "mask_ckpt00_img01.png").read_bytes() == (tmp_path / "mask_ckpt01_img01.png").read_bytes()
    with pytest.raises(DomainError):
        visualize_masks([], images, tmp_path)


def test_feature_figures(tmp_path):
    t1, _ = small()
    noisy = pairs(1)[0][1].noisy
    written = visualize_features(t1, clone_heads(t1), noisy, tmp_path)
    channels = t1.config.head_channels
    assert len(written) == 2 * channels + 1
    assert np.all(np.asarray(Image.open(tmp_path / "features_diff_panel.png")) == 0)


def test_unfold_emits_k_plus_one_frames(tmp_path):
    t1, t2 = small()
    noisy = pairs(1)[0][1].noisy
    written, trace = unfold_adaptation(t1, t2, noisy, AdaptConfig(K=4, alpha=1e-5), tmp_path, "x")
    assert [p.name for p in written] == [f"x_step{k}.png" for k in range(5)]
    assert (tmp_path / "x_trace.csv").is_file()
    assert all(math.isfinite(loss) for _, loss, _ in trace.per_step)
    assert torch.equal(trace.initial_clean, predict(t1, noisy))
    with pytest.raises(DomainError):
        unfold_adaptation(t1, t2, noisy, AdaptConfig(K=0), tmp_path)
