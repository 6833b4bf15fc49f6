"""Reading and writing the on-disk dataset layout.

::

    cameras.json            list of cameras with a "split" field
    images/view_%04d.pfm    linear HDR renders
    images/view_%04d.png    tone-mapped previews
    masks/view_%04d.png     object masks (0 / 255)
    env.pfm                 environment map
    meta.json               ior_object, ior_air, seed, n_views (+ shape)
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import envmap as envmod


class DatasetError(ValueError):
    pass


def save_mask(path, mask):
    Image.fromarray((np.asarray(mask, dtype=bool) * 255).astype(np.uint8), mode="L").save(path)


def load_mask(path):
    return np.asarray(Image.open(path).convert("L")) > 127


@dataclass
class View:
    index: int
    camera: object
    split: str
    image: np.ndarray
    mask: np.ndarray


@dataclass
class Dataset:
    root: Path
    views: list
    env: envmod.EnvironmentMap
    meta: dict

    def split(self, name: str):
        return [v for v in self.views if v.split == name]

    @property
    def train(self):
        return self.split("train")

    @property
    def test(self):
        return self.split("test")

    @property
    def ior_object(self):
        return self.meta.get("ior_object")

    @property
    def ior_air(self):
        return self.meta.get("ior_air", 1.00028)


def read_cameras(root):
    from .oracle import Camera

    root = Path(root)
    path = root / "cameras.json"
    if not path.exists():
        raise DatasetError(f"{path} not found")
    records = json.loads(path.read_text())
    return [(Camera.from_dict(r), r.get("split", "train")) for r in records]


def load_dataset(root, load_images: bool = True) -> Dataset:
    root = Path(root)
    for name in ("cameras.json", "env.pfm", "meta.json"):
        if not (root / name).exists():
            raise DatasetError(f"{root / name} not found")
    cams = read_cameras(root)
    meta = json.loads((root / "meta.json").read_text())
    env = envmod.load_pfm(root / "env.pfm")
    views = []
    for i, (cam, split) in enumerate(cams):
        image = mask = None
        if load_images:
            ipath = root / "images" / f"view_{i:04d}.pfm"
            mpath = root / "masks" / f"view_{i:04d}.png"
            if not ipath.exists() or not mpath.exists():
                raise DatasetError(f"missing image or mask for view {i}")
            image = envmod.read_pfm(ipath).astype(np.float64)
            mask = load_mask(mpath)
        views.append(View(i, cam, split, image, mask))
    return Dataset(root, views, env, meta)
