import math
from decimal import ROUND_HALF_UP, Decimal

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from deffgan.errors import ImageFormatError, InvalidInputError, InvalidSpecError
from deffgan.pyramid import (
    ImageSample,
    area_resize,
    build_pyramid,
    build_spec,
    discover_images,
    load_image,
    make_fixed_noise,
    upsample,
)


def half_up(x):
    return int(Decimal(repr(x)).quantize(0, rounding=ROUND_HALF_UP))


def box_oracle(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Replicate every pixel to the lcm grid, then average blocks."""
    c, H, W = img.shape
    ly, lx = math.lcm(H, h), math.lcm(W, w)
    big = np.repeat(np.repeat(img, ly // H, axis=1), lx // W, axis=2)
    return big.reshape(c, h, ly // h, w, lx // w).mean(axis=(2, 4))


def _png(path, arr):
    Image.fromarray(arr.astype(np.uint8)).save(path)
    return path


class TestLoadImage:
    def test_resize_and_range(self, tmp_path):
        rng = np.random.default_rng(0)
        p = _png(tmp_path / "a.png", rng.integers(0, 256, (512, 512, 3)))
        s = load_image(p, 256)
        assert s.dims == (256, 256)
        assert s.pixels.min() >= -1 and s.pixels.max() <= 1

    def test_black_and_white(self, tmp_path):
        black = load_image(_png(tmp_path / "b.png", np.zeros((40, 30, 3))), 40)
        white = load_image(_png(tmp_path / "w.png", np.full((40, 30, 3), 255)), 40)
        assert torch.all(black.pixels == -1)
        assert torch.all(white.pixels == 1)

    def test_aspect_preserved(self, tmp_path):
        s = load_image(_png(tmp_path / "r.png", np.zeros((376, 512, 3))), 256)
        assert s.dims == (188, 256)

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_image(tmp_path / "nope.png", 64)

    def test_non_image(self, tmp_path):
        p = tmp_path / "fake.png"
        p.write_text("not an image")
        with pytest.raises(ImageFormatError):
            load_image(p, 64)

    def test_out_of_range_sample_rejected(self):
        with pytest.raises(InvalidInputError):
            ImageSample(pixels=torch.full((3, 4, 4), 1.5))


def test_discover_flat_and_nested(tmp_path):
    flat = tmp_path / "flat"
    flat.mkdir()
    for name in ("b.png", "a.png"):
        _png(flat / name, np.zeros((8, 8, 3)))
    entries, names = discover_images(flat)
    assert names == ["a.png", "b.png"]
    assert [c for _, c in entries] == [0, 1]

    nested = tmp_path / "nested"
    for cls, n in (("dog", 2), ("cat", 1)):
        (nested / cls).mkdir(parents=True)
        for i in range(n):
            _png(nested / cls / f"{i}.png", np.zeros((8, 8, 3)))
    entries, names = discover_images(nested)
    assert names == ["cat", "dog"]
    assert sorted(c for _, c in entries) == [0, 1, 1]


class TestBuildSpec:
    def test_geometric_square(self):
        oracle = [half_up(25 * (256 / 25) ** (i / 5)) for i in range(6)]
        assert oracle == [25, 40, 63, 101, 161, 256]
        spec = build_spec((256, 256), 6, 25)
        assert [max(d) for d in spec.stage_dims] == oracle
        assert spec.stage_dims[-1] == (256, 256)

    def test_two_stages(self):
        assert [max(d) for d in build_spec((256, 256), 2, 25).stage_dims] == [25, 256]

    def test_non_square_aspect(self):
        spec = build_spec((188, 256), 6, 25)
        for h, w in spec.stage_dims:
            assert abs(h - w * 188 / 256) <= 1
        assert spec.stage_dims[-1] == (188, 256)
        assert max(spec.stage_dims[0]) == 25

    def test_invalid(self):
        with pytest.raises(InvalidSpecError):
            build_spec((64, 64), 4, 64)
        with pytest.raises(InvalidSpecError):
            build_spec((64, 64), 1, 25)

    @settings(max_examples=60, deadline=None)
    @given(
        h=st.integers(40, 300),
        w=st.integers(40, 300),
        n=st.integers(2, 8),
        c=st.integers(8, 30),
    )
    def test_properties(self, h, w, n, c):
        if c >= max(h, w):
            return
        try:
            spec = build_spec((h, w), n, c)
        except InvalidSpecError:
            # only legitimate when the rounded geometric sizes really collide
            m = max(h, w)
            sizes = [half_up(c * (m / c) ** (i / (n - 1))) for i in range(n - 1)] + [m]
            assert any(b <= a for a, b in zip(sizes, sizes[1:]))
            return
        maxes = [max(d) for d in spec.stage_dims]
        assert maxes[0] == c and spec.stage_dims[-1] == (h, w)
        assert all(b > a for a, b in zip(maxes, maxes[1:]))
        for sh, sw in spec.stage_dims:
            assert abs(sh * w - sw * h) <= max(h, w)  # within one pixel of the final aspect


class TestPyramid:
    def test_top_level_identity_and_dims(self):
        img = ImageSample(pixels=torch.rand(3, 64, 48) * 2 - 1)
        spec = build_spec((64, 48), 4, 20)
        pyr = build_pyramid(img, spec)
        assert torch.equal(pyr[3], img.pixels)
        for level, d in zip(pyr.levels, spec.stage_dims):
            assert tuple(level.shape[1:]) == d

    def test_constant_image(self):
        img = ImageSample(pixels=torch.full((3, 64, 64), 0.3))
        for level in build_pyramid(img, build_spec((64, 64), 5, 25)).levels:
            assert torch.allclose(level, torch.full_like(level, 0.3), atol=1e-7)

    def test_gradient_matches_box_oracle(self):
        yy, xx = torch.meshgrid(torch.linspace(-1, 1, 64), torch.linspace(-1, 1, 64), indexing="ij")
        px = torch.stack([xx, yy, xx * yy])
        spec = build_spec((64, 64), 2, 25)
        level0 = build_pyramid(ImageSample(pixels=px), spec)[0]
        expected = box_oracle(px.double().numpy(), 25, 25)
        assert np.abs(level0.double().numpy() - expected).max() < 1e-6

    def test_area_resize_non_square_oracle(self, np_rng):
        img = np_rng.uniform(-1, 1, (3, 30, 21))
        got = area_resize(torch.from_numpy(img), (12, 7)).numpy()
        assert np.abs(got - box_oracle(img, 12, 7)).max() < 1e-12

    def test_dim_mismatch(self):
        with pytest.raises(InvalidInputError):
            build_pyramid(ImageSample(pixels=torch.zeros(3, 32, 32)), build_spec((64, 64), 3, 25))

    def test_upsample_chain_bounded(self):
        yy, xx = torch.meshgrid(torch.linspace(-1, 1, 64), torch.linspace(-1, 1, 64), indexing="ij")
        img = ImageSample(pixels=torch.stack([xx, yy, 0.5 * xx]))
        spec = build_spec((64, 64), 4, 25)
        pyr = build_pyramid(img, spec)
        for i in range(3):
            up = upsample(pyr[i], spec.stage_dims[i + 1])
            assert (up - pyr[i + 1]).abs().max() < 0.1


class TestNoise:
    def test_deterministic(self):
        a = make_fixed_noise(2, (25, 25), 7)
        b = make_fixed_noise(2, (25, 25), 7)
        assert all(torch.equal(x.data, y.data) for x, y in zip(a, b))
        assert not torch.equal(a[0].data, a[1].data)
        assert a[0].fixed and a[1].owner_image == 1

    def test_statistics(self):
        m = make_fixed_noise(1, (25, 25), 3)[0].data
        assert m.shape == (3, 25, 25)
        assert abs(m.mean().item()) < 0.2
        assert abs(m.std().item() - 1) < 0.2

    def test_intact_flag(self):
        m = make_fixed_noise(1, (5, 5), 0)[0]
        assert m.is_intact()
        m.data.add_(1.0)
        assert not m.is_intact()

    def test_k_zero(self):
        with pytest.raises(InvalidInputError):
            make_fixed_noise(0, (5, 5), 0)


class TestUpsample:
    def test_identity(self):
        x = torch.rand(3, 9, 7)
        assert torch.equal(upsample(x, (9, 7)), x)

    def test_constant(self):
        x = torch.full((2, 3, 5, 5), -0.25)
        assert torch.allclose(upsample(x, (13, 11)), torch.full((2, 3, 13, 11), -0.25))

    def test_hand_bilinear(self):
        x = torch.tensor([[[0.0, 1.0], [0.0, 1.0]]])
        out = upsample(x, (2, 4))
        expected = torch.tensor([[[0, 1 / 3, 2 / 3, 1], [0, 1 / 3, 2 / 3, 1]]])
        assert torch.allclose(out, expected, atol=1e-6)

    def test_downscale_rejected(self):
        with pytest.raises(InvalidInputError):
            upsample(torch.zeros(3, 8, 8), (4, 8))
