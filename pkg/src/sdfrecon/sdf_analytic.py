"""Analytic signed-distance scenes: exact primitives, gradients, tracing.

These closed forms serve as ground truth for baking supervision data and
as oracles in tests.  A scene is an ordered set of primitives with object
ids 1..K, exactly one of which is designated background; the background
SDF is sign-flipped (interior positive) so taking the channel-wise
minimum stays meaningful.  Channel layout: background occupies channel 0
(requiring the background primitive to carry object id K), foreground
primitives keep their ids as channel indices.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass

import numpy as np

from . import kernels
from .kernels_numpy import _primitive_sdf

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

KIND_CODES = {"sphere": 0, "box": 1, "plane": 2}
DEFAULT_HIT_EPS = 1e-5
DEFAULT_MAX_STEPS = 256
GRAD_DISCONTINUITY_EPS = 1e-9


@dataclass(frozen=True)
class Primitive:
    kind: str
    object_id: int
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.0
    half_extents: tuple = (0.0, 0.0, 0.0)
    normal: tuple = (0.0, 0.0, 1.0)
    offset: float = 0.0
    albedo: tuple = (0.7, 0.7, 0.7)

    def __post_init__(self):
        if self.kind not in KIND_CODES:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if self.kind == "sphere" and self.radius <= 0:
            raise ValueError("sphere radius must be > 0")
        if self.kind == "box" and any(h <= 0 for h in self.half_extents):
            raise ValueError("box half extents must be > 0")
        if self.kind == "plane":
            n = np.linalg.norm(self.normal)
            if abs(n - 1.0) > 1e-6:
                raise ValueError("plane normal must have unit length")
        if any(not 0.0 <= a <= 1.0 for a in self.albedo):
            raise ValueError("albedo components must be in [0, 1]")


@dataclass
class SdfVector:
    """Per-point object SDFs (channel order) plus the scene minimum."""

    per_object: np.ndarray  # (n, K)
    scene: np.ndarray  # (n,)
    argmin: np.ndarray  # (n,) channel index


@dataclass
class TraceResult:
    hit: np.ndarray  # (n,) bool
    t: np.ndarray  # (n,) float
    channel: np.ndarray  # (n,) int, -1 on miss
    exhausted: np.ndarray  # (n,) bool, step budget ran out


class AnalyticScene:
    def __init__(self, primitives: list[Primitive], bounds, background_id: int):
        ids = sorted(p.object_id for p in primitives)
        k = len(primitives)
        if ids != list(range(1, k + 1)):
            raise ValueError(f"object ids must be 1..K, got {ids}")
        if background_id != k:
            raise ValueError(
                f"the background primitive must carry object id K={k} "
                f"(channel 0), got {background_id}"
            )
        self.primitives = sorted(primitives, key=lambda p: p.object_id % k)
        self.background_id = background_id
        self.bounds_min = np.asarray(bounds[0], dtype=np.float64)
        self.bounds_max = np.asarray(bounds[1], dtype=np.float64)
        if not np.all(self.bounds_min < self.bounds_max):
            raise ValueError("bounds must satisfy min < max per axis")
        self._check_containment()
        # flat arrays for the trace kernels, in channel order
        self.kinds = np.array([KIND_CODES[p.kind] for p in self.primitives], np.int8)
        self.centers = np.array([p.center for p in self.primitives], np.float64)
        self.params = np.zeros((k, 4), np.float64)
        for j, p in enumerate(self.primitives):
            if p.kind == "sphere":
                self.params[j, 0] = p.radius
            elif p.kind == "box":
                self.params[j, :3] = p.half_extents
            else:
                self.params[j, :3] = p.normal
                self.params[j, 3] = p.offset
        self.inverted = np.array(
            [p.object_id == background_id for p in self.primitives], bool
        )
        self.albedos = np.array([p.albedo for p in self.primitives], np.float64)

    @property
    def k_objects(self) -> int:
        return len(self.primitives)

    @property
    def background_channel(self) -> int:
        return 0

    def _check_containment(self):
        for p in self.primitives:
            if p.object_id == self.background_id or p.kind == "plane":
                continue
            c = np.asarray(p.center)
            r = p.radius if p.kind == "sphere" else np.asarray(p.half_extents)
            if np.any(c - r < self.bounds_min) or np.any(c + r > self.bounds_max):
                raise ValueError(
                    f"primitive id={p.object_id} is not inside the scene bounds"
                )

    # -- queries -------------------------------------------------------------

    def eval_sdf(self, p: np.ndarray) -> SdfVector:
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        if not np.all(np.isfinite(p)):
            raise ValueError("points must be finite")
        d = _primitive_sdf(p, self.kinds, self.centers, self.params, self.inverted)
        arg = np.argmin(d, axis=1)
        return SdfVector(d, d.min(axis=1), arg)

    def analytic_gradient(self, p: np.ndarray):
        """Closed-form per-channel gradients (n, K, 3) and a near-discontinuity
        flag (n, K); flagged entries are within GRAD_DISCONTINUITY_EPS of a
        gradient jump (sphere center, interior box-face tie)."""
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        n = p.shape[0]
        k = self.k_objects
        grads = np.zeros((n, k, 3))
        flags = np.zeros((n, k), dtype=bool)
        eps = GRAD_DISCONTINUITY_EPS
        for j, prim in enumerate(self.primitives):
            v = p - self.centers[j]
            if prim.kind == "sphere":
                r = np.linalg.norm(v, axis=1)
                flags[:, j] = r < eps
                safe = np.maximum(r, eps)
                grads[:, j] = v / safe[:, None]
            elif prim.kind == "box":
                q = np.abs(v) - self.params[j, :3]
                outside = np.any(q > 0, axis=1)
                m = np.maximum(q, 0.0)
                mn = np.linalg.norm(m, axis=1)
                g_out = np.sign(v) * m / np.maximum(mn, eps)[:, None]
                qs = np.sort(q, axis=1)
                axis = np.argmax(q, axis=1)
                g_in = np.zeros((n, 3))
                g_in[np.arange(n), axis] = np.sign(v[np.arange(n), axis])
                grads[:, j] = np.where(outside[:, None], g_out, g_in)
                flags[:, j] = np.where(
                    outside, mn < eps, qs[:, 2] - qs[:, 1] < eps
                )
            else:
                grads[:, j] = self.params[j, :3]
            if self.inverted[j]:
                grads[:, j] = -grads[:, j]
        return grads, flags

    def sphere_trace(
        self,
        origins: np.ndarray,
        dirs: np.ndarray,
        t_start=0.0,
        t_max=None,
        max_steps: int = DEFAULT_MAX_STEPS,
        hit_eps: float = DEFAULT_HIT_EPS,
    ) -> TraceResult:
        """Batched sphere tracing against the exact scene SDF."""
        origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
        dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
        if max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        norms = np.linalg.norm(dirs, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("ray directions must be unit length")
        n = origins.shape[0]
        t0 = np.broadcast_to(np.asarray(t_start, dtype=np.float64), (n,)).copy()
        if t_max is None:
            diag = float(np.linalg.norm(self.bounds_max - self.bounds_min))
            t_max = np.full(n, 4.0 * diag)
        else:
            t_max = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (n,)).copy()
        hit, t, prim, exhausted = kernels.sphere_trace(
            origins,
            dirs,
            self.kinds,
            self.centers,
            self.params,
            self.inverted,
            t0,
            t_max,
            max_steps,
            hit_eps,
        )
        return TraceResult(hit, t, np.where(hit, prim, -1), exhausted)


def eval_sdf(scene: AnalyticScene, p: np.ndarray) -> SdfVector:
    return scene.eval_sdf(p)


def analytic_gradient(scene: AnalyticScene, p: np.ndarray):
    return scene.analytic_gradient(p)


def sphere_trace(scene: AnalyticScene, origins, dirs, **kw) -> TraceResult:
    return scene.sphere_trace(origins, dirs, **kw)


# -- config io -----------------------------------------------------------------


def scene_from_dict(cfg: dict) -> AnalyticScene:
    if "primitives" not in cfg or "bounds" not in cfg or "background" not in cfg:
        raise ValueError("scene config needs 'primitives', 'bounds', 'background'")
    prims = []
    for entry in cfg["primitives"]:
        known = {
            "kind",
            "object_id",
            "center",
            "radius",
            "half_extents",
            "normal",
            "offset",
            "albedo",
        }
        unknown = set(entry) - known
        if unknown:
            raise ValueError(f"unknown primitive keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in entry.items()}
        prims.append(Primitive(**kw))
    return AnalyticScene(prims, cfg["bounds"], int(cfg["background"]))


def load_scene(path: str) -> AnalyticScene:
    with open(path, "rb") as f:
        return scene_from_dict(tomllib.load(f))
