import numpy as np
import pytest
from PIL import Image

from ignoreattn import cam, ops
from ignoreattn.attention import AttentionMode
from ignoreattn.autograd import numeric_grad
from ignoreattn.models import Model, ModelConfig, Stage

import oracles


def small(mode="cbam-ign1", stages=(Stage(1, 8, 1), Stage(1, 8, 2)), seed=0):
    cfg = ModelConfig(stages=stages, attention=AttentionMode.parse(mode), num_classes=3,
                      input_shape=(3, 16, 16), stem_channels=8)
    return Model(cfg, seed)


def test_single_channel_identity_head(rng):
    m = small("none", stages=(Stage(1, 1, 1),))
    m.head.weight.value = np.array([[1.0], [-1.0], [0.5]])
    img = rng.normal(size=(3, 16, 16))
    heat = cam.grad_cam(m, img, 0)
    m(img[None], capture=("stage1.unit0",))
    act = m.activations["stage1.unit0"].value[0, 0]
    expect = cam.minmax_normalize(cam.bilinear_resize(np.maximum(act, 0), 16, 16))
    np.testing.assert_allclose(heat.values, expect, atol=1e-12)
    assert heat.values.min() == 0 and heat.values.max() == 1


def test_constant_map_normalizes_to_zero():
    assert np.all(cam.minmax_normalize(np.full((4, 4), 3.0)) == 0)
    act = np.ones((2, 3, 3))
    assert np.all(cam.minmax_normalize(cam.weighted_cam(act, np.array([1.0, -2.0]))) == 0)


def test_weights_match_finite_differences(rng):
    m = small("cbam-ign2", seed=3)
    img = rng.normal(size=(3, 16, 16))
    layer = "stage1.unit0"
    m(img[None], capture=(layer,))
    act = m.activations[layer].value.copy()
    logits = m(img[None], capture=(layer,))
    seed = np.zeros(logits.shape)
    seed[0, 2] = 1.0
    logits.backward(seed)
    analytic = cam.cam_weights(m.activations[layer].grad[0])
    numeric = numeric_grad(lambda a: ops.slice_axis(m.forward_from(layer, a), 1, 2, 3), act)
    est = cam.cam_weights(numeric[0])
    rel = np.max(np.abs(analytic - est)) / max(np.max(np.abs(est)), 1e-12)
    assert rel < 1e-3


def test_cam_leaves_no_parameter_grads(rng):
    m = small()
    cam.grad_cam(m, rng.normal(size=(3, 16, 16)), 1)
    assert not any(p.has_grad for p in m.parameters())


def test_cam_errors(rng):
    m = small()
    with pytest.raises(KeyError):
        cam.grad_cam(m, rng.normal(size=(3, 16, 16)), 0, layer="nope")
    with pytest.raises(ValueError):
        cam.grad_cam(m, rng.normal(size=(3, 16, 16)), 5)
    assert cam.default_layer(m) == "stage2.unit0"


def test_heatmap_invariant_to_head_scaling(rng):
    m = small("se", seed=1)
    m.head.bias.value = np.zeros(3)
    img = rng.normal(size=(3, 16, 16))
    h1 = cam.grad_cam(m, img, 1).values
    m.head.weight.value = m.head.weight.value * 7.5
    h2 = cam.grad_cam(m, img, 1).values
    assert np.max(np.abs(h1 - h2)) < 1e-10


def test_weighted_cam_vs_loop(rng):
    for _ in range(20):
        act, grad = rng.normal(size=(4, 5, 3)), rng.normal(size=(4, 5, 3))
        got = cam.weighted_cam(act, cam.cam_weights(grad))
        assert np.max(np.abs(got - oracles.cam(act, grad))) < 1e-10


def test_bilinear_resize_properties(rng):
    p = rng.normal(size=(4, 4))
    assert np.array_equal(cam.bilinear_resize(p, 4, 4), p)
    assert np.all(cam.bilinear_resize(np.full((3, 3), 2.0), 9, 9) == 2.0)
    up = cam.bilinear_resize(p, 8, 8)
    assert up.min() >= p.min() - 1e-12 and up.max() <= p.max() + 1e-12


def test_region_stats_examples(rng):
    s = cam.ignore_mask_stats(np.full((1, 10, 10), 0.3), 2)
    assert s.border_mean == s.interior_mean == pytest.approx(0.3)
    frame = np.zeros((10, 12))
    frame[:2], frame[-2:], frame[:, :2], frame[:, -2:] = 1, 1, 1, 1
    s = cam.ignore_mask_stats(frame, 2)
    assert (s.border_mean, s.interior_mean, s.border_width) == (1.0, 0.0, 2)
    for _ in range(20):
        h, w, b = rng.integers(5, 12), rng.integers(5, 12), 0
        b = int(rng.integers(1, (min(h, w) - 1) // 2 + 1))
        mask = rng.random((h, w))
        s = cam.ignore_mask_stats(mask, b)
        bm, im, nb, ni = oracles.region_means(mask, b)
        assert nb + ni == h * w
        assert abs(s.border_mean - bm) < 1e-12 and abs(s.interior_mean - im) < 1e-12
    with pytest.raises(ValueError):
        cam.ignore_mask_stats(np.zeros((8, 8)), 4)
    with pytest.raises(ValueError):
        cam.ignore_mask_stats(np.zeros((8, 8)), 0)


def test_ignoring_response_sources(rng):
    x = rng.normal(size=(2, 3, 16, 16))
    ign = small("cbam-ign1")
    ign(x)
    rec = ign.masks["stage1.unit0"]
    assert np.array_equal(cam.ignoring_response(ign), rec["spatial_ignore"])
    att = small("cbam")
    att(x)
    np.testing.assert_array_equal(cam.ignoring_response(att), 1 - att.masks["stage1.unit0"]["spatial"])
    se = small("se")
    se(x)
    with pytest.raises(ValueError):
        cam.ignoring_response(se)


def test_export_zero_map(tmp_path):
    path = tmp_path / "z.pgm"
    cam.export_image(np.zeros((5, 7)), path)
    with Image.open(path) as im:
        assert im.mode == "L" and im.size == (7, 5)
        assert np.all(np.asarray(im) == 0)


def test_export_quantization_and_round_trip(tmp_path, rng):
    vals = rng.random((6, 4))
    vals[0, 0], vals[0, 1] = 1.0, 0.0
    img = rng.random((3, 6, 4))
    written = cam.export_image(vals, tmp_path / "h.pgm", image=img)
    assert [p.suffix for p in written] == [".pgm", ".ppm"]
    gray = cam.read_pnm(written[0])
    assert gray[0, 0] == 255 and gray[0, 1] == 0
    assert np.array_equal(gray, np.rint(vals * 255).astype(np.uint8))
    with Image.open(written[0]) as im:
        assert np.array_equal(np.asarray(im), gray)
    over = cam.read_pnm(written[1])
    expect = np.rint((0.5 * img + 0.5 * vals[None]) * 255).astype(np.uint8).transpose(1, 2, 0)
    assert np.array_equal(over, expect)
    with Image.open(written[1]) as im:
        assert im.mode == "RGB" and np.array_equal(np.asarray(im), expect)


def test_export_errors(tmp_path):
    with pytest.raises(ValueError):
        cam.export_image(np.full((2, 2), 1.5), tmp_path / "bad.pgm")
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        cam.export_image(np.zeros((2, 2)), blocker / "sub" / "x.pgm")
