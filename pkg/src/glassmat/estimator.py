"""scikit-learn style wrapper around training and rendering.

``fit`` takes a dataset (or its directory) and trains; ``predict`` renders
rays given as rows ``[ox, oy, oz, dx, dy, dz]``; ``transform`` returns the
predicted exit direction and index per ray.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .dataset import Dataset, load_dataset
from .training import TrainConfig, train


def check_rays(X):
    """Validate an ``(N, 6)`` ray array and return ``(origins, unit dirs)``."""
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    if X.shape[1] != 6:
        raise ValueError(f"expected 6 columns (origin, direction), got {X.shape[1]}")
    d = X[:, 3:]
    norm = np.linalg.norm(d, axis=1, keepdims=True)
    if np.any(norm < 1e-12):
        raise ValueError("ray directions must be non-zero")
    return X[:, :3], d / norm


def check_dataset(X) -> Dataset:
    if isinstance(X, Dataset):
        return X
    if isinstance(X, (str, Path)):
        return load_dataset(X)
    raise TypeError(f"expected a Dataset or a dataset directory, got {type(X).__name__}")


def camera_rays(camera) -> np.ndarray:
    o, d = camera.rays()
    return np.hstack([o, d])


class TransparentObjectEstimator(BaseEstimator):
    """Learns geometry and light transport of one transparent object."""

    def __init__(self, iterations=20000, geometry="learned", freeze_geometry=False, patches=64,
                 patch_size=4, sil_samples=32, eik_samples=1024, lr=5e-4, seed=0,
                 guide_ior=None, out_dir=None, env=None):
        self.iterations = iterations
        self.geometry = geometry
        self.freeze_geometry = freeze_geometry
        self.patches = patches
        self.patch_size = patch_size
        self.sil_samples = sil_samples
        self.eik_samples = eik_samples
        self.lr = lr
        self.seed = seed
        self.guide_ior = guide_ior
        self.out_dir = out_dir
        self.env = env

    def _config(self) -> TrainConfig:
        return TrainConfig(
            iterations=self.iterations, geometry=self.geometry, freeze_geometry=self.freeze_geometry,
            patches=self.patches, patch_size=self.patch_size, sil_samples=self.sil_samples,
            eik_samples=self.eik_samples, lr=self.lr, seed=self.seed, guide_ior=self.guide_ior,
        ).validate()

    def fit(self, X, y=None):
        ds = check_dataset(X)
        self.config_ = self._config()
        self.model_, self.log_ = train(ds, self.config_, self.out_dir)
        self.env_ = ds.env if self.env is None else self.env
        self.dataset_meta_ = dict(ds.meta)
        return self

    def _render(self, X):
        check_is_fitted(self, "model_")
        o, d = check_rays(X)
        return self.model_.render_rays(o, d, self.env_)

    def predict(self, X):
        """Linear RGB per ray (zero for rays missing the object)."""
        return self._render(X)["rgb"]

    def transform(self, X):
        """``[wx, wy, wz, eta]`` per ray; zeros where the ray misses."""
        out = self._render(X)
        return np.hstack([out["omega_t"], out["eta_t"][:, None]])

    def predict_mask(self, X):
        return self._render(X)["mask"]

    def score(self, X, y=None):
        """Mean tone-mapped PSNR over the test views of a dataset."""
        from .evaluation import evaluate_views, summarize

        check_is_fitted(self, "model_")
        ds = check_dataset(X)
        rows, _ = evaluate_views(self.model_, ds, "test", env=self.env_, directions=False)
        return summarize(rows)["psnr"]
