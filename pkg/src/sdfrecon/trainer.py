"""Optimization loop: batching, Adam, checkpointing, loss logging.

Each step samples one training image and a pixel batch from it (the
depth scale/shift solve needs rays from a single image), renders the
batch differentiably, applies the full objective, and takes one Adam
step with separate learning rates for the feature grid and the MLPs.

All randomness is derived statelessly from (seed, iteration), so
training is bit-reproducible and resuming from a checkpoint continues
the exact same trajectory as an uninterrupted run.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses as L
from .dataio import SceneDataset
from .errors import TrainingDiverged
from .field import FieldConfig, FieldParams, FieldTensors, load_checkpoint, save_checkpoint, sdf_graph
from .rendering import RayBundle, ray_cube_bounds, render_samples_graph, sample_rays_for_field


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    rays_per_batch: int = 1024
    lr_mlp: float = 5e-4
    lr_grid: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_beta: float = 2e-3  # density sharpness anneals faster than the MLPs
    seed: int = 0
    checkpoint_interval: int = 1000
    log_interval: int = 10
    n_coarse: int = 64
    n_fine: int = 64
    space_points: int = 1024  # uniform cube points for eikonal + distinction
    r_bg: float = 0.75

    def __post_init__(self):
        if self.rays_per_batch < 2:
            raise ValueError("rays_per_batch must be >= 2")
        if self.lr_mlp <= 0 or self.lr_grid <= 0:
            raise ValueError("learning rates must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


class Adam:
    """Adaptive-moment optimizer over named parameter arrays (in place)."""

    def __init__(self, params: FieldParams, cfg: TrainConfig):
        self.cfg = cfg
        self.arrays: dict[str, np.ndarray] = {}
        self.lrs: dict[str, float] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0
        for name, arr, group in params.named_arrays():
            self.arrays[name] = arr
            if name == "log_beta":
                self.lrs[name] = cfg.lr_beta
            else:
                self.lrs[name] = cfg.lr_grid if group == "grid" else cfg.lr_mlp
            self.m[name] = np.zeros_like(arr)
            self.v[name] = np.zeros_like(arr)

    def step(self, grads: dict[str, np.ndarray | None]) -> None:
        self.t += 1
        b1, b2, eps = self.cfg.adam_beta1, self.cfg.adam_beta2, self.cfg.adam_eps
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, arr in self.arrays.items():
            g = grads.get(name)
            m, v = self.m[name], self.v[name]
            m *= b1
            v *= b2
            if g is not None:
                m += (1 - b1) * g
                v += (1 - b2) * (g * g)
            arr -= (self.lrs[name] * (m / c1)) / (np.sqrt(v / c2) + eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam_t": np.array(self.t, dtype=np.int64)}
        for name in self.arrays:
            out[f"adam_m/{name}"] = self.m[name]
            out[f"adam_v/{name}"] = self.v[name]
        return out

    def load_state(self, state: dict) -> None:
        self.t = int(state["adam_t"])
        for name in self.arrays:
            self.m[name] = state[f"adam_m/{name}"].astype(self.m[name].dtype).reshape(self.m[name].shape).copy()
            self.v[name] = state[f"adam_v/{name}"].astype(self.v[name].dtype).reshape(self.v[name].shape).copy()


def _step_rng(seed: int, iteration: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, iteration, stream)))


def sample_batch(ds: SceneDataset, cfg: TrainConfig, iteration: int) -> dict:
    """One random image, then rays_per_batch random pixels from it.

    Rays and pseudo-normals are expressed in normalized scene coords;
    pseudo depth stays in its stored units (the scale/shift solve absorbs
    both the normalization scale and any baked corruption).
    """
    rng = _step_rng(cfg.seed, iteration, 0)
    fi = int(rng.integers(len(ds.frames)))
    fr = ds.frames[fi]
    h, w = fr.mask.shape
    flat = rng.integers(0, h * w, size=cfg.rays_per_batch)
    v, u = np.divmod(flat, w)
    pixels = np.stack([u, v], axis=1)
    origins, dirs = fr.camera.pixel_rays(pixels)
    origins_n = (origins - ds.center) / ds.scale
    near, far, valid = ray_cube_bounds(origins_n, dirs)
    if not valid.all():
        raise TrainingDiverged(f"frame {fi}: {int((~valid).sum())} rays miss the scene cube")
    rays = RayBundle(origins_n, dirs, near, far)
    ids = fr.mask[v, u]
    onehot = np.zeros((cfg.rays_per_batch, ds.k_objects))
    onehot[np.arange(cfg.rays_per_batch), ids] = 1.0
    n_world = fr.normal[v, u].astype(np.float64) @ fr.camera.rotation.T
    return {
        "frame": fi,
        "rays": rays,
        "colors": fr.rgb[v, u].astype(np.float64) / 255.0,
        "opacity_targets": onehot,
        "pseudo_depth": fr.depth[v, u].astype(np.float64),
        "pseudo_normal": n_world,
    }


def step_inputs(ft: FieldTensors, batch: dict, cfg: TrainConfig, iteration: int):
    """Quadrature samples and uniform space points for one step (detached)."""
    samples = sample_rays_for_field(
        ft, batch["rays"], cfg.n_coarse, cfg.n_fine, _step_rng(cfg.seed, iteration, 1)
    )
    pts = _step_rng(cfg.seed, iteration, 2).uniform(-1.0, 1.0, (cfg.space_points, 3))
    return samples, pts


def loss_graph(
    ft: FieldTensors,
    batch: dict,
    samples,
    space_points: np.ndarray,
    weights: L.LossWeights,
) -> tuple[ad.Tensor, dict]:
    """Objective graph for one batch at fixed quadrature samples and points."""
    rg = render_samples_graph(ft, batch["rays"], samples)
    ev_u = sdf_graph(ft, space_points, want_jvp=True)

    n, s = rg.samples.t.shape
    k = ft.cfg.k_objects
    grads_all = ad.concat(
        [ad.reshape(rg.grads, (n * s, k, 3)), ev_u.grads], axis=0
    )
    scene_grads_all = ad.concat(
        [ad.reshape(rg.scene_grads, (n * s, 3)), ev_u.scene_grad], axis=0
    )
    dtype = ft.log_beta.dtype
    w_t, q_t, _singular = L.solve_depth_scale_shift(
        rg.depth, batch["pseudo_depth"].astype(dtype)
    )
    parts = {
        "rec": L.loss_rec(rg.color, batch["colors"].astype(dtype)),
        "opacity": L.loss_opacity(
            rg.object_opacities, batch["opacity_targets"].astype(dtype)
        ),
        "eikonal": L.loss_eikonal(grads_all, scene_grads_all),
        "distinction": L.loss_distinction(ev_u.d),
        "depth": L.loss_depth(rg.depth, batch["pseudo_depth"].astype(dtype), w_t, q_t),
        "normal": L.loss_normal(rg.normal, batch["pseudo_normal"].astype(dtype)),
    }
    return L.loss_total(parts, weights), parts


def compute_losses(
    ft: FieldTensors, batch: dict, cfg: TrainConfig, weights: L.LossWeights, iteration: int
) -> tuple[ad.Tensor, dict]:
    samples, pts = step_inputs(ft, batch, cfg, iteration)
    return loss_graph(ft, batch, samples, pts, weights)


def train_step(
    params: FieldParams,
    optimizer: Adam,
    batch: dict,
    cfg: TrainConfig,
    weights: L.LossWeights,
    iteration: int,
) -> dict:
    """One forward/backward/update; returns the loss record."""
    ft = FieldTensors(params, trainable=True)
    total, parts = compute_losses(ft, batch, cfg, weights, iteration)
    if not np.isfinite(total.data):
        bad = {
            "iteration": iteration,
            "frame": batch["frame"],
            "origins": batch["rays"].origins.tolist(),
            "dirs": batch["rays"].dirs.tolist(),
            "parts": {k: float(v.data) for k, v in parts.items()},
        }
        raise TrainingDiverged(
            f"non-finite loss at iteration {iteration} "
            f"(parts: {bad['parts']})",
            ray_dump=bad,
        )
    total.backward()
    grads = {name: leaf.grad for name, leaf in ft.named_leaves()}
    optimizer.step(grads)
    record = {"iter": iteration}
    record.update({k: float(v.data) for k, v in parts.items()})
    record["total"] = float(total.data)
    record["beta"] = params.beta
    return record


def _checkpoint_path(out_dir: str, iteration: int) -> str:
    return os.path.join(out_dir, f"ckpt_{iteration:06d}.sdfr")


def latest_checkpoint(out_dir: str) -> str | None:
    if not os.path.isdir(out_dir):
        return None
    names = sorted(
        n for n in os.listdir(out_dir) if n.startswith("ckpt_") and n.endswith(".sdfr")
    )
    return os.path.join(out_dir, names[-1]) if names else None


def fit(
    ds: SceneDataset,
    field_cfg: FieldConfig,
    cfg: TrainConfig,
    weights: L.LossWeights,
    out_dir: str | None = None,
    resume: bool = True,
    progress=None,
) -> tuple[FieldParams, list[dict]]:
    """Run the training loop; returns final params and the loss history.

    Writes checkpoints (with optimizer state) and an append-only
    losses.jsonl under ``out_dir``; an interrupted run resumes from the
    latest checkpoint onto the identical trajectory.
    """
    if field_cfg.k_objects != ds.k_objects:
        raise ValueError(
            f"field has {field_cfg.k_objects} channels, dataset {ds.k_objects}"
        )
    start = 0
    params = None
    optimizer = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        ckpt = latest_checkpoint(out_dir) if resume else None
        if ckpt:
            params, state = load_checkpoint(ckpt)
            start = int(state["iteration"])
            optimizer = Adam(params, cfg)
            optimizer.load_state(state)
    if params is None:
        params = FieldParams.create(
            field_cfg, _step_rng(cfg.seed, 0, 99), r_bg=cfg.r_bg
        )
        optimizer = Adam(params, cfg)

    history: list[dict] = []
    log_f = open(os.path.join(out_dir, "losses.jsonl"), "a") if out_dir else None
    try:
        for it in range(start, cfg.iterations):
            batch = sample_batch(ds, cfg, it)
            record = train_step(params, optimizer, batch, cfg, weights, it)
            history.append(record)
            if log_f and (it % cfg.log_interval == 0 or it == cfg.iterations - 1):
                log_f.write(json.dumps(record) + "\n")
                log_f.flush()
            if progress is not None:
                progress(record)
            if out_dir and cfg.checkpoint_interval > 0 and (it + 1) % cfg.checkpoint_interval == 0:
                _save(out_dir, params, optimizer, it + 1, ds)
    finally:
        if log_f:
            log_f.close()
    if out_dir:
        _save(out_dir, params, optimizer, cfg.iterations, ds)
    return params, history


def _save(
    out_dir: str, params: FieldParams, optimizer: Adam, iteration: int, ds: SceneDataset
) -> None:
    state = {
        "iteration": iteration,
        "norm_center": [float(c) for c in ds.center],
        "norm_scale": ds.scale,
    }
    state.update(optimizer.state_arrays())
    save_checkpoint(_checkpoint_path(out_dir, iteration), params, state)
