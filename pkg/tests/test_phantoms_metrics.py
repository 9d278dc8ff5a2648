import numpy as np
import pytest

from patrecon.errors import DegenerateSignalError, DimensionError
from patrecon.grid import ImageGrid
from patrecon.io import write_array, write_png
from patrecon.metrics import fom, negative_mass_fraction, scanline, ssim
from patrecon.phantoms import (DERENZO_OUTER, DERENZO_RADII, PhantomSpec, derenzo_layout,
                               embed_centered, make_phantom)


def ssim_oracle(x, y, data_range, sigma=1.5, radius=5):
    """Windowed SSIM over pixels whose full 11x11 window fits in the image."""
    t = np.arange(-radius, radius + 1)
    k = np.exp(-t ** 2 / (2 * sigma ** 2))
    w = np.outer(k, k) / np.sum(k) ** 2
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    vals = []
    for i in range(radius, x.shape[0] - radius):
        for j in range(radius, x.shape[1] - radius):
            a = x[i - radius:i + radius + 1, j - radius:j + radius + 1]
            b = y[i - radius:i + radius + 1, j - radius:j + radius + 1]
            ma, mb = np.sum(w * a), np.sum(w * b)
            va = np.sum(w * a * a) - ma ** 2
            vb = np.sum(w * b * b) - mb ** 2
            cov = np.sum(w * a * b) - ma * mb
            vals.append((2 * ma * mb + c1) * (2 * cov + c2)
                        / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_ssim_matches_windowed_oracle(rng):
    ref = make_phantom(PhantomSpec("disks", 32)).data
    x = ref + 0.1 * rng.standard_normal(ref.shape)
    assert ssim(x, ref) == pytest.approx(ssim_oracle(x, ref, ref.max() - ref.min()), abs=1e-10)
    assert ssim(ref, ref) == pytest.approx(1.0)


def test_ssim_region_and_errors(rng):
    big = np.zeros((40, 40))
    ref = make_phantom(PhantomSpec("disks", 24)).data
    big[8:32, 8:32] = ref
    region = ImageGrid(40, 40).center_region(24)
    noisy = big + 0.05 * rng.standard_normal(big.shape)
    assert ssim(noisy, big, region) == pytest.approx(ssim(noisy[8:32, 8:32], ref))
    with pytest.raises(DimensionError):
        ssim(np.zeros((20, 20)), np.zeros((21, 20)))
    with pytest.raises(DegenerateSignalError):
        ssim(noisy, np.ones((40, 40)))
    value, smap = ssim(noisy, big, full=True)
    assert smap.shape == big.shape and value == pytest.approx(ssim(noisy, big))


def test_fom_hand_values():
    x = np.zeros((2, 2))
    x[0, 0] = 1.0
    assert fom(x) == pytest.approx(20 * np.log10(4 / np.sqrt(3)))
    y = np.array([[2.0, 0.0], [0.0, 2.0]])
    assert fom(y) == pytest.approx(20 * np.log10(2.0))
    with pytest.raises(DegenerateSignalError):
        fom(np.ones((3, 3)))


def test_negative_fraction_and_scanline():
    x = np.array([[1.0, -1.0], [2.0, 0.0]])
    assert negative_mass_fraction(x) == pytest.approx(0.25)
    assert negative_mass_fraction(np.zeros((2, 2))) == 0.0
    a = np.arange(12.0).reshape(4, 3)
    assert scanline(a).tolist() == [1.0, 4.0, 7.0, 10.0]
    assert scanline(a, 0, axis=0).tolist() == [0.0, 1.0, 2.0]


def test_derenzo_layout_geometry():
    size = 128
    rods = derenzo_layout(size)
    sectors = {k for k, *_ in rods}
    assert sectors == set(range(6))
    for k, cx, cy, r in rods:
        assert r == pytest.approx(DERENZO_RADII[k] * size)
        assert np.hypot(cx, cy) + r <= DERENZO_OUTER * size + 1e-9
        ang = np.degrees(np.arctan2(cy, cx)) % 360
        assert 60 * k <= ang < 60 * (k + 1)
    for k in range(6):
        c = np.array([(cx, cy) for kk, cx, cy, _ in rods if kk == k])
        if len(c) > 1:
            d = np.hypot(*(c[:, None, :] - c[None, :, :]).transpose(2, 0, 1))
            d[np.diag_indices(len(c))] = np.inf
            assert d.min() >= 4 * DERENZO_RADII[k] * size - 1e-9
    counts = [sum(1 for kk, *_ in rods if kk == k) for k in range(6)]
    assert counts == sorted(counts, reverse=True)


def test_derenzo_image_mass_and_range():
    size = 128
    ph = make_phantom(PhantomSpec("derenzo", size, amplitude=2.0)).data
    assert ph.min() == 0.0 and ph.max() == pytest.approx(2.0)
    area = sum(np.pi * r * r for *_, r in derenzo_layout(size))
    assert np.sum(ph) / 2.0 == pytest.approx(area, rel=0.02)


def test_vessel_is_seeded():
    a = make_phantom(PhantomSpec("vessel", 64, seed=3)).data
    b = make_phantom(PhantomSpec("vessel", 64, seed=3)).data
    c = make_phantom(PhantomSpec("vessel", 64, seed=4)).data
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert 0.01 < np.mean(a > 0) < 0.6


def test_file_phantom_round_trip(tmp_path):
    src = make_phantom(PhantomSpec("disks", 32)).data
    write_array(tmp_path / "p.bin", src, {"kind": "image"})
    back = make_phantom(PhantomSpec("file", 32, path=str(tmp_path / "p.bin"))).data
    assert np.allclose(back, src / src.max())
    write_png(tmp_path / "p.png", src)
    png = make_phantom(PhantomSpec("file", 32, path=str(tmp_path / "p.png"))).data
    assert np.max(np.abs(png - src / src.max())) <= 0.5 / 255 + 1e-12
    with pytest.raises(FileNotFoundError):
        make_phantom(PhantomSpec("file", 32, path=str(tmp_path / "missing.png")))


def test_spec_validation_and_embedding():
    with pytest.raises(ValueError):
        PhantomSpec("cube")
    with pytest.raises(ValueError):
        PhantomSpec("file")
    ph = make_phantom(PhantomSpec("disks", 16))
    out = embed_centered(ph, ImageGrid(32, 32))
    assert np.array_equal(out[8:24, 8:24], ph.data) and out.sum() == pytest.approx(ph.data.sum())
