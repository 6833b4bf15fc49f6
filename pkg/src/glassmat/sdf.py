"""Signed distance fields, sphere tracing and interior tracing.

Fields are vectorised: ``query`` takes an ``(N, 3)`` array of points and
returns ``(N,)`` distances, ``gradient`` returns ``(N, 3)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_STEPS = 256
REFINE_STEPS = 8
HIT_EPS_SCALE = 1e-5
BOX_MARGIN = 0.1


class DegenerateGradient(ArithmeticError):
    pass


class NoExit(RuntimeError):
    pass


@dataclass(frozen=True)
class Aabb:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float))

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    def union(self, other: Aabb) -> Aabb:
        return Aabb(np.minimum(self.lo, other.lo), np.maximum(self.hi, other.hi))

    def intersection(self, other: Aabb) -> Aabb:
        return Aabb(np.maximum(self.lo, other.lo), np.minimum(self.hi, other.hi))

    def sample(self, n: int, rng) -> np.ndarray:
        return self.lo + rng.random((n, 3)) * (self.hi - self.lo)

    def clip(self, origins, dirs):
        """Slab test. Returns ``(t_near, t_far, valid)`` with ``t_near >= 0``."""
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            inv = 1.0 / dirs
            t0 = (self.lo - origins) * inv
            t1 = (self.hi - origins) * inv
        tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
        tmax = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
        t_near = np.maximum(tmin.max(axis=-1), 0.0)
        t_far = tmax.min(axis=-1)
        return t_near, t_far, t_far >= t_near


class SdfField:
    """Base class; subclasses provide ``query``, ``gradient`` and a box."""

    bounding_box: Aabb
    #: exact metric fields march with full steps; learned ones are relaxed
    step_scale = 1.0

    def query(self, x):
        raise NotImplementedError

    def gradient(self, x):
        raise NotImplementedError

    def normal(self, x):
        g = self.gradient(np.atleast_2d(x))
        norm = np.linalg.norm(g, axis=-1, keepdims=True)
        if np.any(norm <= 1e-8):
            raise DegenerateGradient("SDF gradient vanishes")
        out = g / norm
        return out if np.ndim(x) > 1 else out[0]

    def describe(self) -> dict:
        raise NotImplementedError

    def __and__(self, other):
        return Composite("intersection", [self, other])

    def __or__(self, other):
        return Composite("union", [self, other])

    def __sub__(self, other):
        return Composite("difference", [self, other])


def _pad_box(lo, hi, margin=BOX_MARGIN):
    return Aabb(np.asarray(lo, float) - margin, np.asarray(hi, float) + margin)


class Sphere(SdfField):
    def __init__(self, center=(0.0, 0.0, 0.0), radius=1.0):
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)
        self.bounding_box = _pad_box(self.center - self.radius, self.center + self.radius)

    def query(self, x):
        return np.linalg.norm(np.asarray(x) - self.center, axis=-1) - self.radius

    def gradient(self, x):
        p = np.asarray(x) - self.center
        return p / np.maximum(np.linalg.norm(p, axis=-1, keepdims=True), 1e-300)

    def describe(self):
        return {"type": "sphere", "center": self.center.tolist(), "radius": self.radius}


class Box(SdfField):
    def __init__(self, center=(0.0, 0.0, 0.0), half_extents=(1.0, 1.0, 1.0)):
        self.center = np.asarray(center, dtype=float)
        self.half_extents = np.asarray(half_extents, dtype=float)
        self.bounding_box = _pad_box(self.center - self.half_extents, self.center + self.half_extents)

    def query(self, x):
        q = np.abs(np.asarray(x) - self.center) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return outside + np.minimum(q.max(axis=-1), 0.0)

    def gradient(self, x):
        p = np.asarray(x) - self.center
        q = np.abs(p) - self.half_extents
        sign = np.where(p >= 0, 1.0, -1.0)
        qpos = np.maximum(q, 0.0)
        norm = np.linalg.norm(qpos, axis=-1, keepdims=True)
        out_grad = sign * qpos / np.maximum(norm, 1e-300)
        in_grad = np.zeros_like(p)
        k = np.argmax(q, axis=-1)
        np.put_along_axis(in_grad, k[..., None], np.take_along_axis(sign, k[..., None], -1), -1)
        return np.where((q.max(axis=-1) > 0)[..., None], out_grad, in_grad)

    def describe(self):
        return {
            "type": "box",
            "center": self.center.tolist(),
            "half_extents": self.half_extents.tolist(),
        }


class Torus(SdfField):
    """Torus around the z axis (tube circle lies in the xy plane)."""

    def __init__(self, center=(0.0, 0.0, 0.0), major_radius=1.0, minor_radius=0.25):
        self.center = np.asarray(center, dtype=float)
        self.major_radius = float(major_radius)
        self.minor_radius = float(minor_radius)
        ext = np.array([self.major_radius + self.minor_radius] * 2 + [self.minor_radius])
        self.bounding_box = _pad_box(self.center - ext, self.center + ext)

    def query(self, x):
        p = np.asarray(x) - self.center
        rho = np.linalg.norm(p[..., :2], axis=-1)
        return np.hypot(rho - self.major_radius, p[..., 2]) - self.minor_radius

    def gradient(self, x):
        p = np.asarray(x) - self.center
        rho = np.linalg.norm(p[..., :2], axis=-1)
        a = rho - self.major_radius
        length = np.maximum(np.hypot(a, p[..., 2]), 1e-300)
        radial = p[..., :2] / np.maximum(rho, 1e-300)[..., None]
        g = np.empty_like(p)
        g[..., :2] = (a / length)[..., None] * radial
        g[..., 2] = p[..., 2] / length
        return g

    def describe(self):
        return {
            "type": "torus",
            "center": self.center.tolist(),
            "major_radius": self.major_radius,
            "minor_radius": self.minor_radius,
        }


class Composite(SdfField):
    """Boolean combination: ``union``, ``intersection`` or ``difference``.

    ``difference`` subtracts every child after the first from the first.
    """

    OPS = ("union", "intersection", "difference")

    def __init__(self, op: str, children):
        if op not in self.OPS:
            raise ValueError(f"unknown CSG op {op!r}")
        if len(children) < 2:
            raise ValueError("CSG node needs at least two children")
        self.op = op
        self.children = list(children)
        boxes = [c.bounding_box for c in self.children]
        box = boxes[0]
        if op == "union":
            for b in boxes[1:]:
                box = box.union(b)
        elif op == "intersection":
            for b in boxes[1:]:
                box = box.intersection(b)
        self.bounding_box = box

    def _stack(self, x):
        vals = np.stack([c.query(x) for c in self.children], axis=-1)
        if self.op == "difference":
            vals[..., 1:] *= -1.0
        return vals

    def _select(self, vals):
        if self.op == "union":
            return np.argmin(vals, axis=-1)
        return np.argmax(vals, axis=-1)

    def query(self, x):
        vals = self._stack(x)
        return np.take_along_axis(vals, self._select(vals)[..., None], -1)[..., 0]

    def gradient(self, x):
        x = np.asarray(x)
        idx = self._select(self._stack(x))
        out = np.zeros(x.shape, dtype=float)
        for i, child in enumerate(self.children):
            sel = idx == i
            if np.any(sel):
                g = child.gradient(x[sel])
                out[sel] = -g if (self.op == "difference" and i > 0) else g
        return out

    def describe(self):
        return {"type": self.op, "children": [c.describe() for c in self.children]}


def field_from_dict(desc: dict) -> SdfField:
    """Build an analytic field from its JSON description (see ``describe``)."""
    kind = desc["type"]
    if kind == "sphere":
        return Sphere(desc.get("center", (0, 0, 0)), desc.get("radius", 1.0))
    if kind == "box":
        return Box(desc.get("center", (0, 0, 0)), desc.get("half_extents", (1, 1, 1)))
    if kind == "torus":
        return Torus(
            desc.get("center", (0, 0, 0)),
            desc.get("major_radius", 1.0),
            desc.get("minor_radius", 0.25),
        )
    if kind in Composite.OPS:
        return Composite(kind, [field_from_dict(c) for c in desc["children"]])
    raise ValueError(f"unknown shape type {kind!r}")


@dataclass
class SurfaceHit:
    """Batch of ray/surface intersections. Misses have ``t = inf``."""

    hit: np.ndarray
    t: np.ndarray
    x: np.ndarray
    n: np.ndarray

    def __len__(self):
        return len(self.hit)


def hit_epsilon(field: SdfField) -> float:
    return HIT_EPS_SCALE * field.bounding_box.diagonal


def _refine(func, origins, dirs, ta, fa, tb, fb, iters=REFINE_STEPS):
    """Illinois regula falsi on brackets with ``fa > 0 >= fb``."""
    ta, fa, tb, fb = ta.copy(), fa.copy(), tb.copy(), fb.copy()
    for _ in range(iters):
        denom = fb - fa
        tc = np.where(denom != 0, tb - fb * (tb - ta) / np.where(denom != 0, denom, 1.0), tb)
        tc = np.clip(tc, np.minimum(ta, tb), np.maximum(ta, tb))
        fc = func(origins + tc[:, None] * dirs)
        flip = fc * fb < 0
        ta = np.where(flip, tb, ta)
        fa = np.where(flip, fb, fa * 0.5)
        tb, fb = tc, fc
    return np.where(np.abs(fa) < np.abs(fb), ta, tb)


def _march(func, origins, dirs, t0, t_far, field, eps, min_step, converge=True):
    """Shared marcher on ``func`` (positive away from the target surface).

    Returns ``(found, t)`` where ``found`` marks rays that reached the surface.
    """
    n = len(origins)
    diag = field.bounding_box.diagonal
    scale = field.step_scale
    t = t0.astype(float).copy()
    found = np.zeros(n, dtype=bool)
    t_prev = np.full(n, np.nan)
    f_prev = np.full(n, np.nan)
    br_a = np.zeros(n)
    br_fa = np.zeros(n)
    br_b = np.zeros(n)
    br_fb = np.zeros(n)
    bracketed = np.zeros(n, dtype=bool)
    active = t <= t_far
    for _ in range(MAX_STEPS):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        f = func(origins[idx] + t[idx, None] * dirs[idx])
        crossed = f < 0
        near = (~crossed) & (f < eps) if converge else np.zeros_like(crossed)
        # sign change against the previous sample gives a bracket directly
        has_prev = ~np.isnan(f_prev[idx])
        sel = idx[crossed & has_prev]
        br_a[sel], br_fa[sel] = t_prev[sel], f_prev[sel]
        br_b[sel], br_fb[sel] = t[sel], f[crossed & has_prev]
        bracketed[sel] = True
        done = crossed | near
        found[idx[done]] = True
        stepped = idx[~done]
        t_prev[stepped] = t[stepped]
        f_prev[stepped] = f[~done]
        step = scale * np.clip(f[~done], min_step, diag)
        t[stepped] += step
        active[idx[done]] = False
        active[stepped] = t[stepped] <= t_far[stepped]
    # rays that converged without crossing: probe forward for a sign change
    probe = np.flatnonzero(found & ~bracketed)
    if probe.size:
        tp = t[probe]
        fp = func(origins[probe] + tp[:, None] * dirs[probe])
        pos = fp >= 0
        cand = probe[pos]
        if cand.size:
            ta = t[cand]
            fa = fp[pos]
            h = np.maximum(2.0 * fa, eps)
            pending = np.ones(cand.size, dtype=bool)
            for _ in range(6):
                tb = ta + h
                fb = func(origins[cand] + tb[:, None] * dirs[cand])
                ok = pending & (fb < 0)
                br_a[cand[ok]], br_fa[cand[ok]] = ta[ok], fa[ok]
                br_b[cand[ok]], br_fb[cand[ok]] = tb[ok], fb[ok]
                bracketed[cand[ok]] = True
                pending &= ~ok
                h = h * 2.0
                if not pending.any():
                    break
    ref = np.flatnonzero(bracketed)
    if ref.size:
        t[ref] = _refine(
            func, origins[ref], dirs[ref], br_a[ref], br_fa[ref], br_b[ref], br_fb[ref]
        )
    return found, t


def _as_rays(origins, dirs):
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    origins, dirs = np.broadcast_arrays(origins, dirs)
    return np.ascontiguousarray(origins), np.ascontiguousarray(dirs)


def _finish(field, found, t, origins, dirs):
    n = len(origins)
    x = np.zeros((n, 3))
    normals = np.zeros((n, 3))
    t = np.where(found, t, np.inf)
    if found.any():
        x[found] = origins[found] + t[found, None] * dirs[found]
        g = field.gradient(x[found])
        norm = np.linalg.norm(g, axis=-1, keepdims=True)
        normals[found] = g / np.maximum(norm, 1e-12)
    return SurfaceHit(found, t, x, normals)


def sphere_trace(field: SdfField, origins, dirs) -> SurfaceHit:
    """First intersection of each ray with the zero level set of ``field``.

    The ray is clipped to the field's bounding box, marched with SDF-sized
    steps and, on convergence, refined on a sign-change bracket.
    """
    origins, dirs = _as_rays(origins, dirs)
    t_near, t_far, valid = field.bounding_box.clip(origins, dirs)
    eps = hit_epsilon(field)
    found = np.zeros(len(origins), dtype=bool)
    t = np.full(len(origins), np.inf)
    idx = np.flatnonzero(valid)
    if idx.size:
        f_ok, t_ok = _march(
            field.query, origins[idx], dirs[idx], t_near[idx], t_far[idx], field, eps, 0.0
        )
        found[idx] = f_ok
        t[idx] = t_ok
    return _finish(field, found, t, origins, dirs)


def inside_trace(field: SdfField, origins, dirs, strict: bool = False) -> SurfaceHit:
    """Exit point of rays starting on or inside the surface.

    Marches on ``-f`` after a ``2 eps`` offset with a minimum step of ``eps``,
    so the exit is always found through a sign change and then refined.
    Returned normals are outward (``n . d > 0`` at the exit). Rays that never
    leave are reported as misses, or raise :class:`NoExit` if ``strict``.
    """
    origins, dirs = _as_rays(origins, dirs)
    eps = hit_epsilon(field)
    box = field.bounding_box
    t0 = np.full(len(origins), 2.0 * eps)
    _, t_far, _ = box.clip(origins, dirs)
    t_far = np.maximum(t_far, t0) + eps
    found, t = _march(
        lambda p: -field.query(p), origins, dirs, t0, t_far, field, eps, eps, converge=False
    )
    if strict and not found.all():
        raise NoExit(f"{int((~found).sum())} ray(s) did not leave the surface")
    return _finish(field, found, t, origins, dirs)


class LearnedField(SdfField):
    """Adapter exposing an :class:`~glassmat.nn.SdfNetwork` as a field.

    Learned fields are not guaranteed metric, so marching uses relaxed steps.
    """

    step_scale = 0.9
    expensive = True

    def __init__(self, network, half_extent=1.5, chunk=1 << 14):
        self.network = network
        self.half_extent = float(half_extent)
        self.bounding_box = Aabb(-np.full(3, self.half_extent), np.full(3, self.half_extent))
        self.chunk = chunk

    def query(self, x):
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-1]
        flat = x.reshape(-1, 3)
        out = np.empty(len(flat))
        for s in range(0, len(flat), self.chunk):
            out[s : s + self.chunk] = self.network(flat[s : s + self.chunk])
        return out.reshape(shape)

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        shape = x.shape
        flat = x.reshape(-1, 3)
        out = np.empty_like(flat)
        for s in range(0, len(flat), self.chunk):
            out[s : s + self.chunk] = self.network.value_and_grad(flat[s : s + self.chunk])[1]
        return out.reshape(shape)

    def describe(self):
        return {"type": "learned", "half_extent": self.half_extent}
