"""Joint optimisation of the SDF network and the ray bending network."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import losses as L
from .nn import Adam, RayBendingNetwork, SdfNetwork
from .optics import refract_masked
from .model import MattingModel
from .sdf import SurfaceHit, field_from_dict, sphere_trace

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "loss_total", "loss_pix", "loss_sil", "loss_e", "loss_rg", "loss_rs",
               "lambda_rg", "alpha")


class NonFiniteLoss(FloatingPointError):
    def __init__(self, component: str, step: int):
        self.component = component
        self.step = step
        super().__init__(f"non-finite {component} loss at step {step}")


@dataclass
class TrainConfig:
    iterations: int = 20000
    patches: int = 64
    patch_size: int = 4
    sil_samples: int = 32
    eik_samples: int = 1024
    alpha_start: float = 50.0
    alpha_factor: float = 2.0
    alpha_intervals: int = 4
    lr: float = 5e-4
    seed: int = 0
    checkpoint_every: int = 1000
    geometry: str = "learned"
    freeze_geometry: bool = False
    guide_ior: float | None = None
    detach_rbn_inputs: bool = True
    sdf_layers: int = 8
    sdf_width: int = 256
    sdf_frequencies: int = 6
    sdf_beta: float = 100.0
    init_radius: float = 1.0
    scene_half_extent: float = 1.5
    rbn_layers: int = 4
    rbn_width: int = 256
    rbn_dir_frequencies: int = 6
    rbn_pos_frequencies: int = 8
    rbn_beta: float = 1.0
    weights: L.LossWeights = field(default_factory=L.LossWeights)

    def validate(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.patch_size < 2:
            raise ValueError("patch_size (m) must be >= 2")
        if self.patches < 1:
            raise ValueError("patches (M) must be >= 1")
        if self.sil_samples < 8:
            raise ValueError("sil_samples (K) must be >= 8")
        if self.eik_samples < 1:
            raise ValueError("eik_samples (V) must be >= 1")
        if self.geometry not in ("learned", "analytic"):
            raise ValueError("geometry must be 'learned' or 'analytic'")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        for name, value in asdict(self.weights).items():
            if value is not None and value < 0:
                raise ValueError(f"loss weight {name} must be non-negative")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        w = d.pop("weights", None) or {}
        cfg = cls(**d, weights=L.LossWeights(**w))
        return cfg.validate()

    @classmethod
    def load(cls, path) -> TrainConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def build_model(config: TrainConfig, shape: dict | None = None, ior_air=1.00028) -> MattingModel:
    rbn = RayBendingNetwork(
        config.rbn_layers, config.rbn_width, config.rbn_dir_frequencies,
        config.rbn_pos_frequencies, config.rbn_beta, seed=config.seed,
    )
    if config.geometry == "analytic":
        if shape is None:
            raise ValueError("analytic geometry requires a shape description")
        return MattingModel(rbn, analytic=field_from_dict(shape), ior_air=ior_air)
    sdf = SdfNetwork(
        config.sdf_layers, config.sdf_width, config.sdf_frequencies, (config.sdf_layers // 2,),
        config.sdf_beta, config.init_radius, seed=config.seed + 1,
    )
    return MattingModel(rbn, sdf_net=sdf, half_extent=config.scene_half_extent, ior_air=ior_air)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class TrainBatch:
    """``M`` patches of ``m x m`` rays, flattened patch-major."""

    origins: np.ndarray
    dirs: np.ndarray
    target: np.ndarray
    mask: np.ndarray
    hits: SurfaceHit
    patches: int
    patch_size: int

    def __len__(self):
        return len(self.origins)

    @property
    def inside(self):
        """Rays that hit the surface and lie inside the object mask."""
        return self.hits.hit & self.mask

    @property
    def outside(self):
        return ~self.inside

    def full_patches(self):
        m2 = self.patch_size**2
        return self.inside.reshape(self.patches, m2).all(axis=1)


class HitCache:
    """Per-view tracing results for fixed geometry."""

    def __init__(self, field, views):
        self.records = {}
        for v in views:
            o, d = v.camera.rays()
            self.records[v.index] = sphere_trace(field, o, d)

    def lookup(self, view_index, flat_idx):
        h = self.records[view_index]
        return SurfaceHit(h.hit[flat_idx], h.t[flat_idx], h.x[flat_idx], h.n[flat_idx])


def sample_batch(views, config: TrainConfig, rng, field, cache: HitCache | None = None) -> TrainBatch:
    m = config.patch_size
    origins, dirs, target, mask = [], [], [], []
    hit_parts = []
    for _ in range(config.patches):
        view = views[int(rng.integers(len(views)))]
        cam = view.camera
        r0 = int(rng.integers(cam.height - m + 1))
        c0 = int(rng.integers(cam.width - m + 1))
        rows, cols = np.meshgrid(np.arange(r0, r0 + m), np.arange(c0, c0 + m), indexing="ij")
        rows, cols = rows.ravel(), cols.ravel()
        o, d = cam.pixel_rays(rows, cols)
        origins.append(o)
        dirs.append(d)
        target.append(view.image[rows, cols])
        mask.append(view.mask[rows, cols])
        if cache is not None:
            hit_parts.append(cache.lookup(view.index, rows * cam.width + cols))
    origins = np.concatenate(origins)
    dirs = np.concatenate(dirs)
    if cache is not None:
        hits = SurfaceHit(*(np.concatenate([getattr(h, k) for h in hit_parts])
                            for k in ("hit", "t", "x", "n")))
    else:
        hits = sphere_trace(field, origins, dirs)
    return TrainBatch(origins, dirs, np.concatenate(target), np.concatenate(mask), hits,
                      config.patches, m)


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


def refract_normal_vjp(omega_i, n, ratio, g_out):
    """Cotangent on ``n`` of ``refract(omega_i, n)`` (rows with TIR must carry zero ``g_out``)."""
    c = np.sum(omega_i * n, axis=-1, keepdims=True)
    root = np.sqrt(np.maximum(1.0 - ratio**2 * (1.0 - c * c), 1e-300))
    g_dot_n = np.sum(g_out * n, axis=-1, keepdims=True)
    return (ratio * c - root) * g_out + g_dot_n * (ratio - ratio**2 * c / root) * omega_i


@dataclass
class ObjectiveResult:
    components: dict
    total: float
    lambda_rg: float
    alpha: float
    rbn_grads: list | None
    sdf_grads: list | None


def objective(model: MattingModel, batch: TrainBatch, env, config: TrainConfig, step: int,
              rng, guide_ior: float, train_geometry: bool) -> ObjectiveResult:
    """All loss terms for one batch together with weight gradients."""
    w = config.weights
    iters = config.iterations
    lam_rg = w.rg(step, iters)
    alpha = L.alpha_schedule(step, iters, config.alpha_start, config.alpha_factor,
                             config.alpha_intervals)
    inside = batch.inside
    idx_in = np.flatnonzero(inside)
    idx_out = np.flatnonzero(~inside)
    omega_i = -batch.dirs[idx_in]
    x_in = batch.hits.x[idx_in]
    box = model.field.bounding_box
    learned = model.learned_geometry

    # silhouette: minimum SDF along each outside ray
    pts, valid = L.silhouette_samples(batch.origins[idx_out], batch.dirs[idx_out], box,
                                      config.sil_samples, rng)
    k = config.sil_samples
    z_all = model.field.query(pts.reshape(-1, 3)).reshape(-1, k) if len(idx_out) else np.zeros((0, k))
    arg = np.argmin(z_all, axis=1) if len(idx_out) else np.zeros(0, dtype=int)
    z_min = z_all[np.arange(len(idx_out)), arg]
    p_min = pts[np.arange(len(idx_out)), arg]
    eik_pts = box.sample(config.eik_samples, rng) if learned else np.zeros((0, 3))

    sdf_tape = None
    if learned and train_geometry:
        all_pts = np.concatenate([x_in, p_min, eik_pts])
        _, grads_all, sdf_tape = model.sdf_net.forward_with_grad(all_pts)
        n_raw = grads_all[: len(idx_in)]
        eik_g = grads_all[len(idx_in) + len(idx_out):]
    elif learned:
        n_raw = model.sdf_net.value_and_grad(x_in)[1] if len(idx_in) else np.zeros((0, 3))
        eik_g = model.sdf_net.value_and_grad(eik_pts)[1]
    else:
        n_raw = batch.hits.n[idx_in]
        eik_g = np.zeros((0, 3))
    n_norm = np.maximum(np.linalg.norm(n_raw, axis=-1, keepdims=True), 1e-12)
    n = n_raw / n_norm

    comps = {}
    rbn_grads = None
    g_n = np.zeros_like(n)
    if len(idx_in):
        rgb, cache = model.shade(omega_i, x_in, n, env, record=True)
        comps["pix"], g_rgb = L.loss_pix(rgb, batch.target[idx_in])
        omega_a, tir = refract_masked(omega_i, n, model.ior_air, guide_ior)
        keep = ~tir
        comps["rg"], g_rg_part = L.loss_rg(cache.rbn_out.omega_t[keep], omega_a[keep])
        g_rg = np.zeros_like(omega_a)
        g_rg[keep] = g_rg_part
        g_a = np.zeros_like(omega_a)
        g_a[keep] = L.loss_rg(omega_a[keep], cache.rbn_out.omega_t[keep])[1]
        # smoothness over patches made only of inside rays
        m2 = batch.patch_size**2
        full = batch.full_patches()
        omega_full = np.zeros((len(batch), 3))
        omega_full[idx_in] = cache.rbn_out.omega_t
        comps["rs"], g_rs_full = L.loss_rs(omega_full.reshape(batch.patches, m2, 3), full)
        g_rs = g_rs_full.reshape(-1, 3)[idx_in]
        g_n, rbn_grads = model.shade_backward(
            cache, w.pix * g_rgb, lam_rg * g_rg + w.rs * g_rs, config.detach_rbn_inputs
        )
        g_n = g_n + lam_rg * refract_normal_vjp(omega_i, n, model.ior_air / guide_ior, g_a)
    else:
        comps["pix"] = comps["rg"] = comps["rs"] = 0.0
        rbn_grads = [np.zeros_like(p) for p in model.rbn.params]

    comps["sil"], g_z = L.loss_sil(z_min, alpha, batch.mask[idx_out], valid)
    comps["eik"], g_eik = L.loss_eik(eik_g)

    total = L.total_loss(comps, w, step, iters)
    for name in L.COMPONENTS:
        if not np.isfinite(comps[name]):
            raise NonFiniteLoss(name, step)

    sdf_grads = None
    if sdf_tape is not None:
        g_nraw = (g_n - np.sum(g_n * n, axis=-1, keepdims=True) * n) / n_norm
        cot_val = np.concatenate([np.zeros(len(idx_in)), w.sil * g_z, np.zeros(len(eik_pts))])
        cot_grad = np.concatenate([g_nraw, np.zeros((len(idx_out), 3)), w.eik * g_eik])
        sdf_grads = model.sdf_net.backward(sdf_tape, cot_val, cot_grad)
    return ObjectiveResult(comps, total, lam_rg, alpha, rbn_grads, sdf_grads)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


def format_log_row(row: dict) -> str:
    return "\t".join([str(row["step"])] + [repr(float(row[c])) for c in LOG_COLUMNS[1:]])


def resolve_guide_ior(config: TrainConfig, dataset) -> float:
    if config.guide_ior is not None:
        return float(config.guide_ior)
    if dataset.ior_object is not None:
        return float(dataset.ior_object)
    return 1.5


class Trainer:
    """Owns the model, optimisers and RNG for one training run."""

    def __init__(self, dataset, config: TrainConfig, model: MattingModel | None = None):
        self.dataset = dataset
        self.config = config.validate()
        self.model = model or build_model(config, dataset.meta.get("shape"), dataset.ior_air)
        self.rng = np.random.default_rng(config.seed)
        self.rbn_opt = Adam(self.model.rbn.params, lr=config.lr)
        self.sdf_opt = Adam(self.model.sdf_net.params, lr=config.lr) if self.model.learned_geometry else None
        self.train_geometry = self.model.learned_geometry and not config.freeze_geometry
        self.guide_ior = resolve_guide_ior(config, dataset)
        self.views = dataset.train
        if not self.views:
            raise ValueError("dataset has no training views")
        self.cache = None if self.train_geometry else HitCache(self.model.field, self.views)
        self.step = 0

    def run_step(self) -> dict:
        cfg = self.config
        batch = sample_batch(self.views, cfg, self.rng, self.model.field, self.cache)
        res = objective(self.model, batch, self.dataset.env, cfg, self.step, self.rng,
                        self.guide_ior, self.train_geometry)
        self.rbn_opt.step(self.model.rbn.params, res.rbn_grads)
        if res.sdf_grads is not None:
            self.sdf_opt.step(self.model.sdf_net.params, res.sdf_grads)
        row = {
            "step": self.step,
            "loss_total": float(res.total),
            "loss_pix": float(res.components["pix"]),
            "loss_sil": float(res.components["sil"]),
            "loss_e": float(res.components["eik"]),
            "loss_rg": float(res.components["rg"]),
            "loss_rs": float(res.components["rs"]),
            "lambda_rg": float(res.lambda_rg),
            "alpha": float(res.alpha),
        }
        self.step += 1
        return row

    def optimizers(self):
        opts = {"rbn": self.rbn_opt}
        if self.sdf_opt is not None:
            opts["sdf"] = self.sdf_opt
        return opts


def train(dataset, config: TrainConfig, out_dir=None, callback=None):
    """Run the optimisation loop; returns ``(model, log_rows)``.

    With ``out_dir`` the config, a tab-separated log (one line per step) and
    checkpoints every ``checkpoint_every`` steps are written there.
    """
    from .checkpoint import save_checkpoint

    trainer = Trainer(dataset, config)
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        config.save(out / "config.json")
        log_fh = open(out / "train_log.tsv", "w")
        log_fh.write("\t".join(LOG_COLUMNS) + "\n")
    rows = []
    try:
        for _ in range(config.iterations):
            row = trainer.run_step()
            rows.append(row)
            if log_fh is not None:
                log_fh.write(format_log_row(row) + "\n")
            if callback is not None:
                callback(trainer, row)
            if out is not None and trainer.step % config.checkpoint_every == 0:
                save_checkpoint(out / "checkpoints" / f"step_{trainer.step:06d}.nmto", trainer.model,
                                config, trainer.optimizers(), trainer.step, dataset.meta.get("shape"))
    finally:
        if log_fh is not None:
            log_fh.close()
    if out is not None:
        save_checkpoint(out / "model.nmto", trainer.model, config, trainer.optimizers(),
                        trainer.step, dataset.meta.get("shape"))
    return trainer.model, rows
