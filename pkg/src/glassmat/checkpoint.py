"""Binary checkpoints for trained models.

Layout (all little-endian)::

    b"NMTO"  u32 version
    u32 n    n bytes of UTF-8 JSON metadata (config, shape, step, ...)
    u32 count of networks, then per network:
        u8 name length, name, u32 layers, layers x (u32 fan_in, u32 fan_out)
    parameters of every network as f64, in declaration order [W0, b0, W1, ...]
    per network: u8 has_adam; if set u64 t, 4 x f64 (lr, beta1, beta2, eps),
        then first moments followed by second moments as f64
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .nn import Adam

MAGIC = b"NMTO"
VERSION = 1


class CheckpointError(ValueError):
    pass


class VersionMismatch(CheckpointError):
    pass


def _networks(model):
    nets = [("rbn", model.rbn.mlp)]
    if model.sdf_net is not None:
        nets.append(("sdf", model.sdf_net.mlp))
    return nets


def _f64(arrays):
    return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)


def save_checkpoint(path, model, config, optimizers=None, step=0, shape=None, extra=None):
    optimizers = optimizers or {}
    meta = {
        "config": config.to_dict(),
        "shape": shape,
        "step": int(step),
        "ior_air": model.ior_air,
    }
    if extra:
        meta.update(extra)
    blob = json.dumps(meta, sort_keys=True).encode()
    nets = _networks(model)
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(blob)), blob,
             struct.pack("<I", len(nets))]
    for name, mlp in nets:
        nb = name.encode()
        parts.append(struct.pack("<B", len(nb)) + nb + struct.pack("<I", mlp.num_layers))
        for k in range(mlp.num_layers):
            parts.append(struct.pack("<II", *mlp.layer_shape(k)))
    for _, mlp in nets:
        parts.append(_f64(mlp.params))
    for name, _ in nets:
        opt = optimizers.get(name)
        if opt is None:
            parts.append(struct.pack("<B", 0))
            continue
        parts.append(struct.pack("<BQ4d", 1, opt.t, opt.lr, opt.beta1, opt.beta2, opt.eps))
        parts.append(_f64(opt.m) + _f64(opt.v))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def arrays(self, shapes):
        out = []
        for shape in shapes:
            n = int(np.prod(shape))
            out.append(np.frombuffer(self.take(8 * n), dtype="<f8").reshape(shape).astype(float))
        return out


def read_checkpoint(path) -> dict:
    """Parse a checkpoint into a plain dictionary (no model construction)."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {VERSION}")
    (n,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(n).decode())
    except ValueError as exc:
        raise CheckpointError("corrupt checkpoint metadata") from exc
    (count,) = r.unpack("<I")
    tables = []
    for _ in range(count):
        (ln,) = r.unpack("<B")
        name = r.take(ln).decode()
        (layers,) = r.unpack("<I")
        tables.append((name, [r.unpack("<II") for _ in range(layers)]))

    def shapes(table):
        return [s for fi, fo in table for s in ((fi, fo), (fo,))]

    params = {name: r.arrays(shapes(t)) for name, t in tables}
    adam = {}
    for name, t in tables:
        (flag,) = r.unpack("<B")
        if flag:
            t_step, lr, b1, b2, eps = r.unpack("<Q4d")
            m = r.arrays(shapes(t))
            v = r.arrays(shapes(t))
            adam[name] = {"t": t_step, "lr": lr, "beta1": b1, "beta2": b2, "eps": eps, "m": m, "v": v}
    if r.pos != len(data):
        raise CheckpointError("trailing bytes in checkpoint")
    return {"version": version, "meta": meta, "layers": dict(tables), "params": params, "adam": adam}


def load_checkpoint(path):
    """Rebuild ``(model, config, optimizers, meta)`` from a checkpoint file."""
    from .training import TrainConfig, build_model

    ck = read_checkpoint(path)
    meta = ck["meta"]
    config = TrainConfig.from_dict(meta["config"])
    model = build_model(config, meta.get("shape"), meta.get("ior_air", 1.00028))
    optimizers = {}
    for name, mlp in _networks(model):
        if name not in ck["params"]:
            raise CheckpointError(f"checkpoint lacks network {name!r}")
        expected = [mlp.layer_shape(k) for k in range(mlp.num_layers)]
        if [tuple(s) for s in ck["layers"][name]] != expected:
            raise CheckpointError(f"layer table of {name!r} does not match its config")
        for dst, src in zip(mlp.params, ck["params"][name]):
            dst[...] = src
        st = ck["adam"].get(name)
        if st is not None:
            opt = Adam(mlp.params, st["lr"], st["beta1"], st["beta2"], st["eps"])
            opt.t, opt.m, opt.v = st["t"], st["m"], st["v"]
            optimizers[name] = opt
    return model, config, optimizers, meta
