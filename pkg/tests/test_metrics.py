import json

import numpy as np
import pytest

from glassmat import metrics as M


class TestPsnr:
    def test_identical_cap(self):
        x = np.random.default_rng(0).random((8, 8, 3))
        assert M.psnr(x, x) == 99.0

    @pytest.mark.parametrize("err, expected", [(0.1, 20.0), (0.5, 10 * np.log10(4.0))])
    def test_uniform_error(self, err, expected):
        a = np.full((6, 5, 3), 0.2)
        assert M.psnr(a + err, a) == pytest.approx(expected, abs=1e-9)

    def test_masked(self):
        a = np.zeros((4, 4, 3))
        b = a.copy()
        b[0, 0] = 1.0
        mask = np.zeros((4, 4), bool)
        mask[2:, 2:] = True
        assert M.psnr(b, a, mask) == 99.0
        assert M.psnr(b, a) < 99.0

    def test_empty_mask(self):
        with pytest.raises(M.ZeroPixelMask):
            M.psnr(np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((3, 3), bool))

    def test_shape_mismatch(self):
        with pytest.raises(M.MetricError):
            M.psnr(np.zeros((3, 3)), np.zeros((3, 4)))


class TestSsim:
    def test_identical(self):
        x = np.random.default_rng(1).random((16, 16, 3))
        assert M.ssim(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_negative(self):
        x = np.random.default_rng(2).random((24, 24, 3))
        assert M.ssim(x, 1.0 - x) < 0.0

    def test_constant_luminance(self):
        mu1, mu2 = 0.3, 0.7
        c1 = 0.01**2
        expected = (2 * mu1 * mu2 + c1) / (mu1**2 + mu2**2 + c1)
        v = M.ssim(np.full((12, 12), mu1), np.full((12, 12), mu2))
        assert v == pytest.approx(expected, abs=1e-12)

    def test_window(self):
        w = M.gaussian_window()
        assert w.shape == (11, 11) and w.sum() == pytest.approx(1.0)
        assert w[5, 5] == w.max()

    def test_too_small(self):
        with pytest.raises(M.ImageTooSmall):
            M.ssim(np.zeros((10, 20)), np.zeros((10, 20)))

    def test_symmetric(self):
        rng = np.random.default_rng(3)
        a, b = rng.random((20, 18, 3)), rng.random((20, 18, 3))
        assert abs(M.ssim(a, b) - M.ssim(b, a)) <= 1e-12


class TestAngular:
    def test_identical(self):
        d = np.eye(3)
        assert M.angular_error(d, d) == (0.0, 0.0)

    def test_orthogonal(self):
        mean, med = M.angular_error(np.eye(3), np.roll(np.eye(3), 1, axis=0))
        assert mean == pytest.approx(90.0) and med == pytest.approx(90.0)

    def test_mixed(self):
        a = np.array([[1.0, 0, 0], [1.0, 0, 0]])
        b = np.array([[1.0, 0, 0], [0.0, 1, 0]])
        assert M.angular_error(a, b) == pytest.approx((45.0, 45.0))

    def test_length(self):
        with pytest.raises(M.LengthMismatch):
            M.angular_error(np.eye(3), np.eye(3)[:2])

    def test_clamp(self):
        d = np.array([[1.0 + 1e-15, 0.0, 0.0]])
        assert np.isfinite(M.angular_error(d, d)[0])


class TestChamfer:
    def test_identical(self):
        p = np.random.default_rng(0).random((50, 3))
        assert M.chamfer_l1(p, p) == 0.0

    def test_single(self):
        assert M.chamfer_l1([[0, 0, 0]], [[1, 0, 0]]) == 1.0

    def test_enumerated(self):
        assert M.chamfer_l1([[0, 0, 0], [2, 0, 0]], [[1, 0, 0]]) == 1.0

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(4)
        a, b = rng.random((40, 3)), rng.random((55, 3))
        d = np.linalg.norm(a[:, None] - b[None], axis=-1)
        expected = 0.5 * (d.min(1).mean() + d.min(0).mean())
        assert M.chamfer_l1(a, b) == pytest.approx(expected, rel=1e-12)

    def test_empty(self):
        with pytest.raises(M.EmptySet):
            M.chamfer_l1(np.zeros((0, 3)), np.zeros((2, 3)))


class TestIou:
    def test_identical(self):
        m = np.eye(4, dtype=bool)
        assert M.mask_iou(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), bool)
        b = a.copy()
        a[0] = True
        b[1] = True
        assert M.mask_iou(a, b) == 0.0

    def test_half_overlap(self):
        a = np.zeros((4, 4), bool)
        b = a.copy()
        a[:2] = True
        b[1:3] = True
        assert M.mask_iou(a, b) == pytest.approx(1 / 3)

    def test_both_empty(self):
        z = np.zeros((3, 3), bool)
        assert M.mask_iou(z, z) == 1.0


def test_report(tmp_path):
    rows = [{"view": 0, "psnr": 20.0, "ssim": 0.5}, {"view": 1, "psnr": 30.0, "ssim": 0.7}]
    M.write_report(rows, tmp_path / "r.json", tmp_path / "r.tsv")
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["aggregate"] == pytest.approx({"psnr": 25.0, "ssim": 0.6})
    lines = (tmp_path / "r.tsv").read_text().splitlines()
    assert lines[0] == "view\tpsnr\tssim" and lines[-1].startswith("mean\t25.0")
