import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from m2gan.errors import ConfigurationError, IngestionError, PreconditionError
from m2gan.maps import (LabelMapSegmenter, ToySegmenter, attention_rain_map, import_label_map,
                        init_priors, resize_nearest)

images = arrays(np.float32, (1, 3, 6, 5), elements=st.floats(0, 1, width=32))


@given(images)
def test_rain_map_of_equal_images_is_zero(o):
    o = torch.from_numpy(o)
    m = attention_rain_map(o, o.clone())
    assert m.shape == (1, 1, 6, 5)
    assert torch.count_nonzero(m) == 0


def test_rain_map_uniform_difference():
    est = torch.full((1, 3, 4, 4), 0.3, dtype=torch.float64)
    m = attention_rain_map(est + 0.1, est)
    assert torch.allclose(m, torch.full_like(m, 0.5), atol=1e-12)


def test_rain_map_single_pixel_single_channel():
    o = torch.zeros(1, 3, 4, 4)
    e = o.clone()
    o[0, 1, 2, 3] = 1.0
    m = attention_rain_map(o, e)
    expected = torch.zeros(1, 1, 4, 4)
    expected[0, 0, 2, 3] = 1.0
    assert torch.equal(m, expected)


@given(images, images, st.floats(-0.5, 0.5))
def test_rain_map_symmetric_and_shift_invariant(a, b, c):
    a, b = torch.from_numpy(a).double(), torch.from_numpy(b).double()
    m = attention_rain_map(a, b)
    assert torch.equal(m, attention_rain_map(b, a))
    assert torch.allclose(m, attention_rain_map(a + c, b + c), atol=1e-12)
    assert m.min() >= 0 and m.max() <= 1


def test_rain_map_shape_mismatch():
    with pytest.raises(PreconditionError):
        attention_rain_map(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5))


def test_rain_map_carries_no_gradient():
    e = torch.rand(1, 3, 4, 4, requires_grad=True)
    assert not attention_rain_map(torch.rand(1, 3, 4, 4), e).requires_grad


# -- segmenters ------------------------------------------------------------------

def test_toy_segmenter_single_colour():
    img = torch.full((1, 3, 8, 8), 0.4)
    img[0, 1] = 0.7
    s = ToySegmenter(5, seed=0)(img)
    assert s.shape == (1, 5, 8, 8)
    top = s.argmax(1)
    assert (top == top[0, 0, 0]).all()
    assert torch.allclose(s.max(1).values, torch.ones(1, 8, 8), atol=1e-6)


@given(st.integers(0, 1000))
def test_toy_segmenter_simplex(seed):
    g = torch.Generator().manual_seed(seed)
    img = torch.rand(2, 3, 7, 9, generator=g)
    s = ToySegmenter(5, seed=seed % 3)(img)
    assert (s >= 0).all()
    assert torch.allclose(s.sum(1), torch.ones(2, 7, 9), atol=1e-5)


def test_toy_segmenter_deterministic():
    img = torch.rand(1, 3, 10, 10)
    assert torch.equal(ToySegmenter(5, seed=3)(img), ToySegmenter(5, seed=3)(img))


def test_toy_segmenter_differentiable():
    img = torch.rand(1, 3, 6, 6, requires_grad=True)
    (ToySegmenter(4)(img)[:, 0] ** 2).sum().backward()
    assert img.grad is not None and torch.isfinite(img.grad).all()


def test_toy_segmenter_validation():
    with pytest.raises(ConfigurationError):
        ToySegmenter(1)
    with pytest.raises(PreconditionError):
        ToySegmenter(3)(torch.rand(1, 4, 4, 4))


def _write_labels(path, arr):
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="L").save(path)
    return path


def test_import_all_zero(tmp_path):
    m = import_label_map(_write_labels(tmp_path / "z.png", np.zeros((4, 6))), 5)
    assert m.shape == (5, 4, 6)
    assert (m[0] == 1).all() and (m[1:] == 0).all()


def test_import_out_of_range_lists_value(tmp_path):
    arr = np.zeros((4, 4))
    arr[1, 1] = 5
    with pytest.raises(IngestionError, match=r"\[5\]"):
        import_label_map(_write_labels(tmp_path / "bad.png", arr), 5)


def test_import_checkerboard_matches_decode(tmp_path):
    arr = np.indices((6, 8)).sum(0) % 2
    path = _write_labels(tmp_path / "cb.png", arr)
    m = import_label_map(path, 3).numpy()
    decoded = np.array(Image.open(path))   # independent decode
    for i in range(6):
        for j in range(8):
            expected = np.zeros(3)
            expected[decoded[i, j]] = 1
            assert np.array_equal(m[:, i, j], expected)
    assert m[0, 0, 0] == 1 and m[1, 0, 1] == 1


def test_import_missing_and_size(tmp_path):
    with pytest.raises(IngestionError, match="not found"):
        import_label_map(tmp_path / "none.png", 3)
    p = _write_labels(tmp_path / "l.png", np.zeros((4, 4)))
    with pytest.raises(IngestionError):
        import_label_map(p, 3, size=(5, 5))


def test_label_map_segmenter(tmp_path):
    p = _write_labels(tmp_path / "l.png", np.eye(4) * 2)
    seg = LabelMapSegmenter.from_files([p], 3)
    assert seg.kind == "external-import"
    out = seg(torch.rand(1, 3, 4, 4))
    assert torch.equal(out[0, 2], torch.eye(4))
    with pytest.raises(IngestionError):
        seg(torch.rand(1, 3, 5, 5))
    with pytest.raises(IngestionError):
        seg(torch.rand(2, 3, 4, 4))


# -- priors --------------------------------------------------------------------------

def test_init_priors_720x480():
    o = torch.rand(1, 3, 480, 720)
    rain, seg = init_priors(o, ToySegmenter(5))
    assert rain.shape == (1, 1, 480, 720) and seg.shape == (1, 5, 480, 720)
    assert (rain == 0.5).all()
    assert torch.allclose(seg.sum(1), torch.ones(1, 480, 720), atol=1e-5)


def test_init_priors_constant_gray():
    rain, seg = init_priors(torch.full((1, 3, 5, 5), 0.5), ToySegmenter(5))
    assert (rain == 0.5).all()
    assert torch.allclose(seg.max(1).values, torch.ones(1, 5, 5), atol=1e-6)


def test_resize_nearest():
    m = torch.arange(4.0).reshape(1, 1, 2, 2)
    r = resize_nearest(m, (4, 4))
    assert r.shape == (1, 1, 4, 4) and torch.equal(r[0, 0, ::2, ::2], m[0, 0])
    assert resize_nearest(m, (2, 2)) is m
