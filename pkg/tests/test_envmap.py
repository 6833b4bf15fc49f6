import numpy as np
import pytest

from glassmat import envmap as E


def _bilinear_oracle(tex, u, v):
    # plain-loop bilinear filter with u wrap and v clamp
    h, w, _ = tex.shape
    px, py = u * w - 0.5, v * h - 0.5
    x0, y0 = int(np.floor(px)), int(np.floor(py))
    fx, fy = px - x0, py - y0
    out = np.zeros(3)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy = min(max(y0 + dy, 0), h - 1)
            xx = (x0 + dx) % w
            out += wy * wx * tex[yy, xx]
    return out


class TestMapping:
    def test_zenith(self):
        _, v = E.dir_to_uv(np.array([0.0, 1.0, 0.0]))
        assert v == 0.0

    def test_nadir(self):
        _, v = E.dir_to_uv(np.array([0.0, -1.0, 0.0]))
        assert v == pytest.approx(1.0)

    def test_forward(self):
        u, v = E.dir_to_uv(np.array([0.0, 0.0, -1.0]))
        assert (u, v) == (pytest.approx(0.5), pytest.approx(0.5))

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        u, v = rng.random(50), 0.05 + 0.9 * rng.random(50)
        u2, v2 = E.dir_to_uv(E.uv_to_dir(u, v))
        np.testing.assert_allclose(v2, v, atol=1e-12)
        np.testing.assert_allclose((u2 - u + 0.5) % 1.0 - 0.5, 0.0, atol=1e-12)


class TestSample:
    def test_constant(self):
        env = E.EnvironmentMap(np.full((4, 8, 3), 0.7))
        d = E.uv_to_dir(np.array([0.1, 0.6]), np.array([0.3, 0.9]))
        np.testing.assert_allclose(env.sample(d), 0.7)

    def test_2x2_centre(self):
        tex = np.arange(12, dtype=float).reshape(2, 2, 3)
        env = E.EnvironmentMap(tex)
        out = env.sample(np.array([0.0, 0.0, -1.0]))
        # (u, v) = (0.5, 0.5) lands exactly between all four texels
        np.testing.assert_allclose(out, tex.reshape(4, 3).mean(axis=0), atol=1e-12)

    def test_zenith_is_top_row_blend(self):
        tex = np.random.default_rng(1).random((4, 6, 3))
        env = E.EnvironmentMap(tex)
        d = np.array([0.0, 1.0, 0.0])
        u, v = E.dir_to_uv(d)
        np.testing.assert_allclose(env.sample(d), _bilinear_oracle(tex, float(u), float(v)), atol=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        tex = rng.random((5, 7, 3))
        env = E.EnvironmentMap(tex)
        d = rng.normal(size=(40, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        u, v = E.dir_to_uv(d)
        ref = np.stack([_bilinear_oracle(tex, a, b) for a, b in zip(u, v)])
        np.testing.assert_allclose(env.sample(d), ref, atol=1e-12)

    def test_seam_continuity(self):
        tex = np.random.default_rng(3).random((8, 16, 3))
        env = E.EnvironmentMap(tex)
        eps = 1e-9
        a = env.sample(E.uv_to_dir(np.array(1 - eps), np.array(0.4)))
        b = env.sample(E.uv_to_dir(np.array(eps), np.array(0.4)))
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_sample_gradient(self):
        env = E.procedural("sky", 64, 32)
        rng = np.random.default_rng(4)
        d = rng.normal(size=(20, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        _, jac = env.sample_with_grad(d)
        h = 1e-7
        for k in range(3):
            dp, dm = d.copy(), d.copy()
            dp[:, k] += h
            dm[:, k] -= h
            fd = (env.sample(dp) - env.sample(dm)) / (2 * h)
            np.testing.assert_allclose(jac[:, :, k], fd, atol=1e-4)

    def test_invalid_texels(self):
        with pytest.raises(ValueError):
            E.EnvironmentMap(np.full((1, 4, 3), 1.0))
        with pytest.raises(ValueError):
            E.EnvironmentMap(np.full((2, 4, 3), -1.0))
        with pytest.raises(ValueError):
            E.EnvironmentMap(np.full((2, 4, 3), np.nan))

    def test_immutable(self):
        env = E.EnvironmentMap(np.ones((2, 2, 3)))
        with pytest.raises(ValueError):
            env.texels[0, 0, 0] = 5.0


class TestPfm:
    def test_round_trip(self, tmp_path):
        tex = np.random.default_rng(0).random((3, 5, 3)).astype(np.float32)
        env = E.EnvironmentMap(tex)
        E.save_pfm(env, tmp_path / "a.pfm")
        back = E.load_pfm(tmp_path / "a.pfm")
        assert np.array_equal(back.texels.astype(np.float32), tex)

    def test_1x1_payload_size(self, tmp_path):
        p = tmp_path / "one.pfm"
        E.write_pfm(p, np.array([[[0.25, 0.5, 1.0]]], dtype=np.float32))
        data = p.read_bytes()
        header = b"PF\n1 1\n-1.0\n"
        assert data.startswith(header)
        assert len(data) - len(header) == 12
        np.testing.assert_array_equal(E.read_pfm(p)[0, 0], [0.25, 0.5, 1.0])

    def test_rows_bottom_to_top(self, tmp_path):
        img = np.zeros((2, 1, 3), dtype=np.float32)
        img[0] = 1.0  # top row
        p = tmp_path / "r.pfm"
        E.write_pfm(p, img)
        payload = np.frombuffer(p.read_bytes()[-24:], dtype="<f4")
        assert payload[:3].tolist() == [0.0, 0.0, 0.0]

    def test_grayscale_rejected(self, tmp_path):
        p = tmp_path / "g.pfm"
        p.write_bytes(b"Pf\n1 1\n-1.0\n" + b"\0" * 4)
        with pytest.raises(E.MalformedHeader):
            E.read_pfm(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "t.pfm"
        p.write_bytes(b"PF\n2 2\n-1.0\n" + b"\0" * 10)
        with pytest.raises(E.UnexpectedEof):
            E.read_pfm(p)

    def test_zero_dims(self, tmp_path):
        p = tmp_path / "z.pfm"
        p.write_bytes(b"PF\n0 2\n-1.0\n")
        with pytest.raises(E.NonPositiveDimensions):
            E.read_pfm(p)


class TestProcedural:
    @pytest.mark.parametrize("name", ["gradient", "sky", "checker", "constant:0.2,0.3,0.4"])
    def test_valid(self, name):
        env = E.procedural(name, 32, 16)
        assert env.texels.shape == (16, 32, 3)
        assert env.texels.min() >= 0

    def test_resolve_path(self, tmp_path):
        env = E.procedural("sky", 16, 8)
        E.save_pfm(env, tmp_path / "s.pfm")
        assert E.resolve_env(str(tmp_path / "s.pfm")).texels.shape == (8, 16, 3)

    def test_unknown(self):
        with pytest.raises(ValueError):
            E.procedural("nope")

    def test_png_preview_round_trip(self, tmp_path):
        img = np.full((4, 4, 3), 0.5)
        E.save_png(tmp_path / "p.png", img)
        back = E.load_png(tmp_path / "p.png")
        np.testing.assert_allclose(back, 0.5, atol=0.01)
