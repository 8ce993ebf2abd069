import numpy as np
import pytest
from scipy.signal import convolve2d

from handavatar.metrics import composite_white, iou, l1, ms_ssim, psnr


def _gauss11(sigma=1.5):
    x = np.arange(-5, 6)
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _ref_ms_ssim(a, b):
    """Direct transcription: explicit 11x11 window, symmetric borders, 2x2 box downsampling."""
    w = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
    k = _gauss11()
    c1, c2 = 0.01 ** 2, 0.03 ** 2

    def filt(x):
        return convolve2d(x, k, mode="same", boundary="symm")

    out = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        prod = 1.0
        for s in range(5):
            mx, my = filt(x), filt(y)
            vx = filt(x * x) - mx ** 2
            vy = filt(y * y) - my ** 2
            cxy = filt(x * y) - mx * my
            cs = np.mean((2 * cxy + c2) / (vx + vy + c2))
            if s == 4:
                val = np.mean((2 * mx * my + c1) / (mx ** 2 + my ** 2 + c1) * (2 * cxy + c2) / (vx + vy + c2))
            else:
                val = cs
            prod *= max(val, 0.0) ** w[s]
            h, wd = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
            x = x[:h, :wd].reshape(h // 2, 2, wd // 2, 2).mean((1, 3))
            y = y[:h, :wd].reshape(h // 2, 2, wd // 2, 2).mean((1, 3))
        out.append(prod)
    return float(np.mean(out))


def test_identical_inputs():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (64, 64, 3))
    assert ms_ssim(img, img) == pytest.approx(1.0, abs=1e-6)
    assert l1(img, img) == 0.0
    m = img[..., 0] > 0.5
    assert iou(m, m) == 1.0
    assert psnr(img, img) == float("inf")


def test_disjoint_masks():
    a = np.zeros((8, 8), bool)
    b = np.zeros((8, 8), bool)
    a[:4] = True
    b[4:] = True
    assert iou(a, b) == 0.0
    c = np.zeros((8, 8), bool)
    c[2:6] = True
    assert iou(a, c) == pytest.approx(16 / 48)


def test_black_vs_gray_against_reference():
    black, gray = np.zeros((64, 64, 3)), np.full((64, 64, 3), 0.5)
    assert l1(black, gray) == 0.5
    assert ms_ssim(black, gray) == pytest.approx(_ref_ms_ssim(black, gray), abs=1e-4)
    assert psnr(black, gray) == pytest.approx(10 * np.log10(4), abs=1e-12)


def test_textured_against_reference():
    rng = np.random.default_rng(1)
    a = rng.uniform(0, 1, (96, 80, 3))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    ours = ms_ssim(a, b)
    assert ours == pytest.approx(_ref_ms_ssim(a, b), abs=1e-4)
    assert 0.0 <= ours <= 1.0


def test_symmetry():
    rng = np.random.default_rng(2)
    a, b = rng.uniform(0, 1, (2, 64, 64, 3))
    assert ms_ssim(a, b) == ms_ssim(b, a)
    assert l1(a, b) == l1(b, a)
    ma, mb = a[..., 0] > 0.4, b[..., 0] > 0.6
    assert iou(ma, mb) == iou(mb, ma)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        l1(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        iou(np.zeros((4, 4)), np.zeros((5, 4)))
    with pytest.raises(ValueError):
        ms_ssim(np.zeros((64, 64, 3)), np.zeros((64, 64, 1)))


def test_composite_white():
    img = np.full((2, 2, 3), 0.2)
    m = np.array([[True, False], [False, True]])
    out = composite_white(img, m)
    assert (out[0, 0] == 0.2).all() and (out[0, 1] == 1.0).all()
