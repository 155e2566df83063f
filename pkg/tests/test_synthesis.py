import math
from dataclasses import replace

import numpy as np
import pytest

from dfqvit import kde
from dfqvit import synthesis as syn
from dfqvit import tensor as T
from dfqvit.model import forward
from dfqvit.synthesis import SynthesisConfig
from dfqvit.tensor import Tape, Tensor
from helpers import numeric_grad


# schedule

@pytest.mark.parametrize("T_total", [1, 7, 500])
def test_schedule_endpoints_and_monotone(T_total):
    vals = [syn.e2h_schedule(t, T_total, 0.08, 1.0) for t in range(T_total + 1)]
    assert vals[0] == 1.0 and vals[-1] == 0.08
    assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_schedule_midpoint_and_errors():
    assert syn.e2h_schedule(50, 100, 0.2, 0.6) == pytest.approx(0.4)
    with pytest.raises(ValueError):
        syn.e2h_schedule(11, 10, 0.1, 1.0)
    with pytest.raises(ValueError):
        syn.e2h_schedule(0, 0, 0.1, 1.0)


def test_fixed_strategy_keeps_upper_scale():
    cfg = SynthesisConfig(iterations=20, strategy=syn.FIXED)
    assert {syn.crop_scale(t, cfg) for t in range(21)} == {cfg.delta_upper}


@pytest.mark.parametrize("kwargs", [dict(iterations=0), dict(delta_lower=0.0),
                                    dict(delta_lower=0.5, delta_upper=0.4), dict(strategy="random"),
                                    dict(beta=-1.0)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        SynthesisConfig(**kwargs)


# crops

def test_full_scale_crop_is_identity():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(3, 12, 12))
    out, box = syn.random_resized_crop(img, 1.0, 1.0, rng)
    assert box == syn.CropBox(0, 0, 12, 12)
    np.testing.assert_array_equal(out, img)


def test_crop_boxes_fit_and_track_scale():
    rng = np.random.default_rng(1)
    areas = []
    for _ in range(2000):
        b = syn.sample_crop(32, 32, 0.08, 1.0, rng)
        assert 0 <= b.top and b.top + b.height <= 32 and 0 <= b.left and b.left + b.width <= 32
        areas.append(b.height * b.width / 1024)
    assert min(areas) < 0.12 and max(areas) > 0.9


def test_crop_fallback_is_centered():
    rng = np.random.default_rng(2)
    # an aspect ratio range far outside what fits forces the fallback
    box = syn.sample_crop(8, 8, 1.0, 1.0, rng, ratio=(4.0, 5.0))
    assert box == syn.CropBox(3, 0, 2, 8)


def test_resize_matrix_rows_are_convex():
    A = syn.resize_matrix(3, 5, 16, 16)
    np.testing.assert_allclose(A.sum(axis=1), 1.0)
    assert A.min() >= 0.0
    assert np.all(A[:, :3] == 0) and np.all(A[:, 8:] == 0)


def test_crop_of_constant_image_is_constant():
    rng = np.random.default_rng(3)
    out, _ = syn.random_resized_crop(np.full((3, 10, 10), 0.3), 0.1, 0.5, rng)
    np.testing.assert_allclose(out, 0.3)


def test_bilinear_matches_direct_interpolation():
    img = np.random.default_rng(4).uniform(size=(1, 6, 6))
    box = syn.CropBox(1, 2, 4, 3)
    ry, rx = syn.crop_matrices(box, 6, 6, 5, 5)
    out = (ry @ img[0] @ rx.T)

    def source(start, length, n, o):
        return start + min(max((o + 0.5) * length / n - 0.5, 0.0), length - 1.0)

    for oy in range(5):
        for ox in range(5):
            y, x = source(1, 4, 5, oy), source(2, 3, 5, ox)
            y0, x0 = int(math.floor(y)), int(math.floor(x))
            y1, x1 = min(y0 + 1, 4), min(x0 + 1, 4)
            fy, fx = y - y0, x - x0
            ref = ((1 - fy) * (1 - fx) * img[0, y0, x0] + (1 - fy) * fx * img[0, y0, x1]
                   + fy * (1 - fx) * img[0, y1, x0] + fy * fx * img[0, y1, x1])
            assert out[oy, ox] == pytest.approx(ref, abs=1e-14)


# losses

def test_patch_similarity_against_brute_force():
    x = np.random.default_rng(5).normal(size=(6, 4))
    G = syn.patch_similarity(Tensor(x)).data
    for i in range(6):
        for j in range(6):
            ref = x[i] @ x[j] / (np.linalg.norm(x[i]) * np.linalg.norm(x[j]))
            assert G[i, j] == pytest.approx(ref, abs=1e-12)
    np.testing.assert_allclose(np.diag(G), 1.0)


def test_similarity_entropy_matches_dense_reference():
    x = np.random.default_rng(6).normal(size=(2, 9, 5))
    got = syn.similarity_entropy(Tensor(x)).data
    for b in range(2):
        G = syn.patch_similarity(Tensor(x[b])).data
        c = G[np.triu_indices(9, 1)]
        assert got[b] == pytest.approx(kde.differential_entropy(c, kde.silverman_bandwidth(c)), abs=1e-10)


def test_tv_loss_brute_force():
    img = np.random.default_rng(7).uniform(size=(3, 5, 4))
    ref = 0.0
    for c in range(3):
        for i in range(5):
            for j in range(4):
                if i + 1 < 5:
                    ref += abs(img[c, i + 1, j] - img[c, i, j])
                if j + 1 < 4:
                    ref += abs(img[c, i, j + 1] - img[c, i, j])
    assert syn.tv_loss(Tensor(img)).item() == pytest.approx(ref / 20)
    assert syn.tv_loss(Tensor(np.ones((3, 4, 4)))).item() == 0.0


def test_one_hot_loss_is_cross_entropy():
    logits = np.array([[2.0, 0.0, -1.0]])
    ref = -np.log(np.exp(2.0) / np.exp([2.0, 0.0, -1.0]).sum())
    assert syn.one_hot_loss(Tensor(logits), [0]).data[0] == pytest.approx(ref)
    with pytest.raises(ValueError):
        syn.one_hot_loss(Tensor(logits), [3])


def test_total_is_weighted_sum(tiny_model):
    cfg = SynthesisConfig(alpha=0.7, beta=0.3)
    x = Tensor(np.random.default_rng(8).uniform(size=(2, 3, 8, 8)))
    comps = syn.loss_components(forward(x, tiny_model, trace=True), x, [1, 2], cfg)
    np.testing.assert_allclose(comps["total"].data,
                               comps["pse"].data + 0.7 * comps["oh"].data + 0.3 * comps["tv"].data)


def test_pse_needs_trace(tiny_model):
    with pytest.raises(ValueError):
        syn.pse_loss(forward(np.zeros((3, 8, 8)), tiny_model))


def crop_loss_fn(model, classes, rows, cols, cfg):
    def f(canvas: Tensor) -> Tensor:
        crop = syn.apply_crop(canvas, rows, cols)
        return T.sum(syn.total_loss(forward(crop, model, trace=True), crop, classes, cfg))
    return f


@pytest.mark.parametrize("seed", [0, 1])
def test_canvas_gradient_through_crop(tiny_model, seed):
    rng = np.random.default_rng(seed)
    canvas = rng.uniform(size=(2, 3, 8, 8))
    cfg = SynthesisConfig()
    boxes = [syn.sample_crop(8, 8, 0.3, 1.0, rng) for _ in range(2)]
    mats = [syn.crop_matrices(b, 8, 8, 8, 8) for b in boxes]
    rows, cols = np.stack([m[0] for m in mats]), np.stack([m[1] for m in mats])
    f = crop_loss_fn(tiny_model, [3, 8], rows, cols, cfg)
    x = Tensor(canvas, requires_grad=True)
    with Tape() as tape:
        loss = f(x)
    tape.backward(loss)
    # the loss carries ~1e-13 rounding noise, so a 1e-5 step balances it against truncation
    num = numeric_grad(lambda v: f(Tensor(v)).item(), canvas, 1e-5)
    err = np.abs(x.grad - num) / np.maximum(np.maximum(np.abs(x.grad), np.abs(num)), 1e-7)
    assert err.max() < 1e-3


# optimization

def test_synthesis_is_deterministic_and_batch_independent(tiny_model):
    cfg = SynthesisConfig(iterations=4, seed=11)
    a = syn.synthesize(tiny_model, cfg, [0, 1, 2])
    b = syn.synthesize(tiny_model, cfg, [0, 1, 2])
    assert np.array_equal(a.images, b.images) and np.array_equal(a.history, b.history)
    solo = syn.synthesize(tiny_model, cfg, [1], indices=[1])
    np.testing.assert_allclose(solo.images[0], a.images[1], rtol=1e-10, atol=1e-12)


def test_pairs_share_initialization(tiny_model):
    base = SynthesisConfig(iterations=3, seed=5)
    e = syn.synthesize(tiny_model, base, [0, 1], record_crops=True)
    f = syn.synthesize(tiny_model, SynthesisConfig(iterations=3, seed=5, strategy=syn.FIXED), [0, 1],
                       record_crops=True)
    assert e.initial_images.tobytes() == f.initial_images.tobytes()
    assert all(b == syn.CropBox(0, 0, 8, 8) for step in f.crops for b in step)
    assert e.initial_images.min() >= 0.0 and e.initial_images.max() <= 1.0


def test_synthesis_reduces_loss(tiny_model):
    cfg = SynthesisConfig(iterations=40, strategy=syn.FIXED, lr=0.05)
    res = syn.synthesize(tiny_model, cfg, [4, 9])
    assert res.history[-1].mean() < res.history[0].mean()
    assert set(res.final) == {"pse", "oh", "tv", "total"}


def test_round_robin_classes(tiny_model):
    np.testing.assert_array_equal(syn.round_robin_classes(12, 10), [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 0, 1])
    res = syn.synthesize_batch(tiny_model, SynthesisConfig(iterations=1), count=3)
    assert res.images.shape == (3, 3, 8, 8)


def test_non_finite_loss_aborts(tiny_model):
    tiny_model.params["head.bias"].data[0] = np.nan
    with pytest.raises(syn.SynthesisError):
        syn.synthesize(tiny_model, SynthesisConfig(iterations=2), [0])


def test_crop_averaged_loss_shares_geometry(tiny_model):
    imgs = np.random.default_rng(9).uniform(size=(2, 3, 8, 8))
    cfg = SynthesisConfig()
    a = syn.crop_averaged_loss(tiny_model, imgs, [0, 1], cfg, 0.3, draws=3, seed=4)
    b = syn.crop_averaged_loss(tiny_model, imgs, [0, 1], cfg, 0.3, draws=3, seed=4)
    assert np.array_equal(a, b) and a.shape == (2,)


def test_single_full_image_step(tiny_model):
    # T=1 with delta fixed at 1: one Adam step of size lr on the uncropped canvas
    cfg = SynthesisConfig(iterations=1, delta_lower=1.0, delta_upper=1.0, lr=0.01, seed=2)
    res = syn.synthesize(tiny_model, cfg, [5])
    x = Tensor(res.initial_images.copy(), requires_grad=True)
    with Tape() as tape:
        loss = T.sum(syn.total_loss(forward(x, tiny_model, trace=True), x, [5], cfg))
    tape.backward(loss)
    expected = res.initial_images - 0.01 * x.grad / (np.abs(x.grad) + 1e-8)
    np.testing.assert_allclose(res.images, np.clip(expected, 0, 1), rtol=0, atol=1e-12)
    raw = syn.synthesize(tiny_model, replace(cfg, clip_images=False), [5])
    np.testing.assert_allclose(raw.images, expected, rtol=0, atol=1e-12)


def test_images_stay_in_pixel_range(tiny_model):
    res = syn.synthesize_batch(tiny_model, SynthesisConfig(iterations=5, lr=2.0), count=2)
    assert res.images.min() >= 0.0 and res.images.max() <= 1.0
    raw = syn.synthesize_batch(tiny_model, SynthesisConfig(iterations=5, lr=2.0, clip_images=False), count=2)
    assert raw.images.min() < 0.0 or raw.images.max() > 1.0


def test_distinct_samples_and_losses_nonnegative(tiny_model):
    res = syn.synthesize_batch(tiny_model, SynthesisConfig(iterations=2), count=10)
    from dfqvit.data import image_digest
    assert len({image_digest(x) for x in res.images}) == 10
    assert sorted(res.classes.tolist()) == list(range(10))
    assert np.all(res.final["oh"] >= 0) and np.all(res.final["tv"] >= 0)
    assert np.all(np.isfinite(res.final["total"]))
