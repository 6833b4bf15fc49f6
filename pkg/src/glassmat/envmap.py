"""Equirectangular environment radiance maps.

Direction convention: ``+y`` is the zenith. A unit direction ``d`` maps to

    v = acos(d.y) / pi
    u = fract(0.5 + atan2(d.x, -d.z) / (2 pi))

so ``-z`` sits at the centre of the image. Texel centres are at half-integer
offsets; ``u`` wraps around and ``v`` clamps at the poles.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image

GAMMA = 2.2


class PfmError(ValueError):
    pass


class MalformedHeader(PfmError):
    pass


class UnexpectedEof(PfmError):
    pass


class NonPositiveDimensions(PfmError):
    pass


def dir_to_uv(d):
    d = np.asarray(d, dtype=float)
    v = np.arccos(np.clip(d[..., 1], -1.0, 1.0)) / np.pi
    u = 0.5 + np.arctan2(d[..., 0], -d[..., 2]) / (2.0 * np.pi)
    u = u - np.floor(u)
    return u, v


def uv_to_dir(u, v):
    """Inverse of :func:`dir_to_uv` (for texel-centre directions)."""
    phi = (np.asarray(u, dtype=float) - 0.5) * 2.0 * np.pi
    theta = np.asarray(v, dtype=float) * np.pi
    s = np.sin(theta)
    return np.stack([s * np.sin(phi), np.cos(theta), -s * np.cos(phi)], axis=-1)


class EnvironmentMap:
    """Immutable H x W x 3 grid of linear radiance."""

    def __init__(self, texels):
        texels = np.array(texels, dtype=np.float64)
        if texels.ndim != 3 or texels.shape[2] != 3:
            raise ValueError(f"texels must have shape (H, W, 3), got {texels.shape}")
        if texels.shape[0] < 2 or texels.shape[1] < 2:
            raise ValueError("environment map must be at least 2x2")
        if not np.all(np.isfinite(texels)) or np.any(texels < 0):
            raise ValueError("environment texels must be finite and non-negative")
        texels.setflags(write=False)
        self._texels = texels

    @property
    def texels(self):
        return self._texels

    @property
    def height(self) -> int:
        return self._texels.shape[0]

    @property
    def width(self) -> int:
        return self._texels.shape[1]

    def _lookup(self, d):
        u, v = dir_to_uv(d)
        px = u * self.width - 0.5
        py = v * self.height - 0.5
        x0 = np.floor(px)
        y0 = np.floor(py)
        fx = px - x0
        fy = py - y0
        x0 = x0.astype(np.int64)
        y0 = y0.astype(np.int64)
        xa = np.mod(x0, self.width)
        xb = np.mod(x0 + 1, self.width)
        ya = np.clip(y0, 0, self.height - 1)
        yb = np.clip(y0 + 1, 0, self.height - 1)
        t = self._texels
        return (t[ya, xa], t[ya, xb], t[yb, xa], t[yb, xb]), fx[..., None], fy[..., None]

    def sample(self, d):
        """Bilinearly filtered radiance seen along direction(s) ``d``."""
        (t00, t01, t10, t11), fx, fy = self._lookup(d)
        top = t00 + fx * (t01 - t00)
        bottom = t10 + fx * (t11 - t10)
        return top + fy * (bottom - top)

    def sample_with_grad(self, d):
        """Return ``(rgb, jac)`` where ``jac[..., c, k] = d rgb_c / d d_k``."""
        d = np.asarray(d, dtype=float)
        (t00, t01, t10, t11), fx, fy = self._lookup(d)
        top = t00 + fx * (t01 - t00)
        bottom = t10 + fx * (t11 - t10)
        rgb = top + fy * (bottom - top)
        dc_dpx = (1.0 - fy) * (t01 - t00) + fy * (t11 - t10)
        dc_dpy = bottom - top

        dx, dy, dz = d[..., 0], d[..., 1], d[..., 2]
        rho2 = np.maximum(dx * dx + dz * dz, 1e-20)
        du = np.stack(
            [-dz / (2.0 * np.pi * rho2), np.zeros_like(dx), dx / (2.0 * np.pi * rho2)], axis=-1
        )
        sin_theta = np.sqrt(np.maximum(1.0 - np.clip(dy, -1.0, 1.0) ** 2, 1e-12))
        dv = np.zeros_like(d)
        dv[..., 1] = -1.0 / (np.pi * sin_theta)
        jac = (
            dc_dpx[..., :, None] * (self.width * du)[..., None, :]
            + dc_dpy[..., :, None] * (self.height * dv)[..., None, :]
        )
        return rgb, jac

    def max_radiance(self) -> float:
        return float(self._texels.max())


def read_pfm(path):
    """Read a colour PFM file into an (H, W, 3) float32 array, top row first."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    for _ in range(4):
        m = re.compile(rb"\s*(\S+)").match(data, pos)
        if m is None:
            raise UnexpectedEof(f"{path}: truncated header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"PF":
        raise MalformedHeader(f"{path}: unsupported PFM variant {tokens[0]!r}")
    try:
        width, height, scale = int(tokens[1]), int(tokens[2]), float(tokens[3])
    except ValueError as exc:
        raise MalformedHeader(f"{path}: bad header field") from exc
    if width <= 0 or height <= 0:
        raise NonPositiveDimensions(f"{path}: {width}x{height}")
    if scale == 0.0:
        raise MalformedHeader(f"{path}: zero scale")
    # exactly one whitespace byte separates the header from the payload
    pos += 1
    count = width * height * 3
    payload = data[pos:]
    if len(payload) < 4 * count:
        raise UnexpectedEof(f"{path}: expected {4 * count} payload bytes, got {len(payload)}")
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(payload, dtype=dtype, count=count).reshape(height, width, 3)
    return arr[::-1].astype(np.float32)


def write_pfm(path, image):
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("PFM writer expects an (H, W, 3) array")
    height, width = image.shape[:2]
    header = f"PF\n{width} {height}\n-1.0\n".encode("ascii")
    body = np.ascontiguousarray(image[::-1]).astype("<f4").tobytes()
    Path(path).write_bytes(header + body)


def load_pfm(path) -> EnvironmentMap:
    return EnvironmentMap(read_pfm(path))


def save_pfm(env: EnvironmentMap, path):
    write_pfm(path, env.texels)


def tonemap(image):
    """Clamp to [0, 1] and apply the display gamma."""
    return np.clip(np.asarray(image, dtype=float), 0.0, 1.0) ** (1.0 / GAMMA)


def to_uint8(image):
    return np.round(tonemap(image) * 255.0).astype(np.uint8)


def save_png(path, image):
    Image.fromarray(to_uint8(image), mode="RGB").save(path)


def load_png(path):
    """Load an 8-bit PNG and undo the display gamma (linear radiance out)."""
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return img**GAMMA


def load_env(path) -> EnvironmentMap:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return load_pfm(path)
    return EnvironmentMap(load_png(path))


def _texel_dirs(width, height):
    u = (np.arange(width) + 0.5) / width
    v = (np.arange(height) + 0.5) / height
    uu, vv = np.meshgrid(u, v)
    return uv_to_dir(uu, vv)


def procedural(name: str, width: int = 256, height: int = 128) -> EnvironmentMap:
    """Built-in maps.

    ``gradient``: smooth map whose colour encodes the direction, which keeps
    refracted directions identifiable from colour. ``sky``: soft sky/ground
    split with a sun lobe. ``checker``: high-contrast structured map for
    relighting probes. ``constant:r,g,b``: uniform radiance.
    """
    d = _texel_dirs(width, height)
    if name.startswith("constant:"):
        rgb = [float(c) for c in name.split(":", 1)[1].split(",")]
        if len(rgb) == 1:
            rgb = rgb * 3
        return EnvironmentMap(np.broadcast_to(np.array(rgb), (height, width, 3)))
    if name == "gradient":
        tex = 0.5 + 0.35 * d
        tex[..., 0] += 0.05 * np.sin(3.0 * d[..., 2])
        return EnvironmentMap(np.clip(tex, 0.0, None))
    if name == "sky":
        y = d[..., 1]
        sky = np.array([0.35, 0.55, 0.9]) * (0.6 + 0.4 * np.clip(y, 0, 1))[..., None]
        ground = np.array([0.4, 0.3, 0.2]) * (0.7 + 0.3 * np.clip(-y, 0, 1))[..., None]
        w = 0.5 + 0.5 * np.tanh(8.0 * y)[..., None]
        sun_dir = np.array([0.4, 0.6, -0.7]) / np.linalg.norm([0.4, 0.6, -0.7])
        sun = np.exp(40.0 * (d @ sun_dir - 1.0))[..., None] * np.array([1.0, 0.9, 0.7])
        return EnvironmentMap(w * sky + (1 - w) * ground + 0.6 * sun)
    if name == "checker":
        u = (np.arange(width) + 0.5) / width
        v = (np.arange(height) + 0.5) / height
        uu, vv = np.meshgrid(u, v)
        cell = (np.floor(uu * 16) + np.floor(vv * 8)) % 2
        tex = np.where(cell[..., None] > 0, [0.9, 0.8, 0.2], [0.1, 0.2, 0.7])
        return EnvironmentMap(tex)
    raise ValueError(f"unknown procedural environment {name!r}")


def resolve_env(spec: str) -> EnvironmentMap:
    """Accept a file path or ``procedural:<name>``."""
    if spec.startswith("procedural:"):
        return procedural(spec.split(":", 1)[1])
    return load_env(spec)
