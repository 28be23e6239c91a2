"""Dataset schema, synthetic baking, loading, and validation.

Directory layout (all binaries little-endian):

    cameras.json        list of {intrinsics: {fx,fy,cx,cy,width,height},
                        c2w: 16 floats, row-major camera-to-world}
    rgb/%04d.png        8-bit RGB
    mask/%04d.png       16-bit grayscale instance ids (0 = background)
    depth/%04d.bin      float32 ray-distance map + %04d.json sidecar
    normal/%04d.bin     float32 camera-frame unit normals + sidecar
    meta.json           k_objects, normalization {center, scale}, units,
                        optional per-frame depth corruption (w, q)

The baker renders supervision from an analytic scene: sphere tracing
gives the hit channel (mask), ray distance (pseudo depth), and the exact
SDF gradient (pseudo normal); RGB is Lambertian shading of per-object
albedo plus a 0.2 ambient floor under a fixed directional light.  An
optional per-image affine depth corruption exercises the scale-invariant
depth alignment downstream.

Normalization maps scene coords into the cube [-1, 1]^3:
x = (p - center) / scale; the map is isotropic so directions, normals,
and SDF ratios are preserved.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import DatasetError
from .sdf_analytic import AnalyticScene

SCHEMA_VERSION = 1
NORMALIZATION_MARGIN = 1.1
DEFAULT_LIGHT = (0.35, 0.25, 0.9)
AMBIENT = 0.2


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    c2w: np.ndarray  # (4, 4) row-major

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        r = self.c2w[:3, :3]
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-6:
            raise ValueError("camera rotation must be orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.c2w[:3, :3]

    @property
    def position(self) -> np.ndarray:
        return self.c2w[:3, 3]

    def pixel_rays(self, pixels: np.ndarray):
        """World-space rays through pixel centers; pixels are (N, 2) as (u, v)."""
        px = np.atleast_2d(pixels).astype(np.float64)
        x = (px[:, 0] + 0.5 - self.cx) / self.fx
        y = (px[:, 1] + 0.5 - self.cy) / self.fy
        d_cam = np.stack([x, y, np.ones_like(x)], axis=1)
        d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
        dirs = d_cam @ self.rotation.T
        origins = np.broadcast_to(self.position, dirs.shape).copy()
        return origins, dirs

    def all_pixels(self) -> np.ndarray:
        u, v = np.meshgrid(np.arange(self.width), np.arange(self.height))
        return np.stack([u.ravel(), v.ravel()], axis=1)

    def to_dict(self) -> dict:
        return {
            "intrinsics": {
                "fx": self.fx,
                "fy": self.fy,
                "cx": self.cx,
                "cy": self.cy,
                "width": self.width,
                "height": self.height,
            },
            "c2w": [float(v) for v in self.c2w.reshape(-1)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        i = d["intrinsics"]
        return cls(
            fx=i["fx"], fy=i["fy"], cx=i["cx"], cy=i["cy"],
            width=int(i["width"]), height=int(i["height"]),
            c2w=np.array(d["c2w"], dtype=np.float64).reshape(4, 4),
        )


def look_at_camera(
    position, target, width: int, height: int, fov_deg: float = 60.0, up=(0, 0, 1)
) -> Camera:
    """OpenCV-convention camera (x right, y down, z forward) looking at target."""
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    nr = np.linalg.norm(right)
    if nr < 1e-9:  # looking straight along up; pick any perpendicular
        right = np.cross(fwd, (1.0, 0.0, 0.0))
        nr = np.linalg.norm(right)
    right /= nr
    down = np.cross(fwd, right)
    c2w = np.eye(4)
    c2w[:3, 0] = right
    c2w[:3, 1] = down
    c2w[:3, 2] = fwd
    c2w[:3, 3] = position
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    return Camera(f, f, width / 2, height / 2, width, height, c2w)


def orbit_cameras(
    n: int,
    center,
    radius: float,
    elevation: float,
    width: int,
    height: int,
    fov_deg: float = 60.0,
) -> list[Camera]:
    center = np.asarray(center, dtype=np.float64)
    cams = []
    for i in range(n):
        theta = 2 * np.pi * i / n
        pos = center + np.array(
            [radius * np.cos(theta), radius * np.sin(theta), elevation]
        )
        cams.append(look_at_camera(pos, center, width, height, fov_deg))
    return cams


@dataclass
class Frame:
    rgb: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) int32, ids in [0, K)
    depth: np.ndarray  # (H, W) float32, ray distance in scene units
    normal: np.ndarray  # (H, W, 3) float32, camera frame
    camera: Camera


@dataclass
class SceneDataset:
    frames: list[Frame]
    k_objects: int
    center: np.ndarray  # normalization center (3,)
    scale: float  # normalization scale (isotropic)
    depth_noise: list | None = None  # per-frame (w, q) applied by the baker
    path: str | None = None

    def normalize_points(self, p: np.ndarray) -> np.ndarray:
        return (np.asarray(p, dtype=np.float64) - self.center) / self.scale

    def denormalize_points(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.scale + self.center


def normalization_from_bounds(bounds_min, bounds_max):
    """Isotropic scene -> [-1,1]^3 map with a margin so geometry stays interior."""
    bounds_min = np.asarray(bounds_min, dtype=np.float64)
    bounds_max = np.asarray(bounds_max, dtype=np.float64)
    center = (bounds_min + bounds_max) / 2
    scale = float(np.max(bounds_max - bounds_min) / 2 * NORMALIZATION_MARGIN)
    return center, scale


# -- bake ------------------------------------------------------------------------


def _shade(albedo: np.ndarray, normals: np.ndarray, light_dir) -> np.ndarray:
    l = np.asarray(light_dir, dtype=np.float64)
    l = l / np.linalg.norm(l)
    lam = np.maximum(normals @ l, 0.0)
    return np.clip(albedo * (AMBIENT + (1 - AMBIENT) * lam)[:, None], 0.0, 1.0)


def bake_dataset(
    scene: AnalyticScene,
    cameras: list[Camera],
    out_dir: str,
    depth_noise: bool = False,
    seed: int = 0,
    light_dir=DEFAULT_LIGHT,
    hit_eps: float = 1e-6,
) -> SceneDataset:
    """Render ground-truth supervision for every camera and write the schema."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 777)))
    center, scale = normalization_from_bounds(scene.bounds_min, scene.bounds_max)
    frames = []
    noise_params = [] if depth_noise else None
    for ci, cam in enumerate(cameras):
        pix = cam.all_pixels()
        origins, dirs = cam.pixel_rays(pix)
        # grazing rays near wall corners converge slowly; give them room
        tr = scene.sphere_trace(origins, dirs, hit_eps=hit_eps, max_steps=8192)
        if not tr.hit.all():
            raise DatasetError(
                f"camera {ci}: {int((~tr.hit).sum())} rays hit no geometry; "
                "cameras must view the bounded scene"
            )
        hit_pts = origins + tr.t[:, None] * dirs
        grads, _ = scene.analytic_gradient(hit_pts)
        n_world = grads[np.arange(len(pix)), tr.channel]
        rgb = _shade(scene.albedos[tr.channel], n_world, light_dir)
        n_cam = n_world @ cam.rotation  # R^T n, world -> camera frame
        h, w = cam.height, cam.width
        depth = tr.t.astype(np.float64)
        if depth_noise:
            wq = (rng.uniform(0.6, 1.8), rng.uniform(-0.15, 0.15) * scale)
            noise_params.append([float(wq[0]), float(wq[1])])
            depth = wq[0] * depth + wq[1]
        frames.append(
            Frame(
                rgb=np.round(rgb * 255).astype(np.uint8).reshape(h, w, 3),
                mask=tr.channel.astype(np.int32).reshape(h, w),
                depth=depth.astype(np.float32).reshape(h, w),
                normal=n_cam.astype(np.float32).reshape(h, w, 3),
                camera=cam,
            )
        )
    ds = SceneDataset(frames, scene.k_objects, center, scale, noise_params, out_dir)
    save_dataset(ds, out_dir)
    return ds


# -- disk io ---------------------------------------------------------------------


def _write_plane(path_base: str, arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr, dtype="<f4")
    with open(path_base + ".bin", "wb") as f:
        f.write(data.tobytes())
    with open(path_base + ".json", "w") as f:
        json.dump({"dtype": "<f4", "shape": list(arr.shape), "order": "C"}, f)


def _read_plane(path_base: str) -> np.ndarray:
    with open(path_base + ".json") as f:
        side = json.load(f)
    raw = np.fromfile(path_base + ".bin", dtype=np.dtype(side["dtype"]))
    return raw.reshape(side["shape"]).astype(np.float32)


def save_dataset(ds: SceneDataset, out_dir: str) -> None:
    for sub in ("rgb", "mask", "depth", "normal"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    with open(os.path.join(out_dir, "cameras.json"), "w") as f:
        json.dump([fr.camera.to_dict() for fr in ds.frames], f, indent=1)
    meta = {
        "version": SCHEMA_VERSION,
        "k_objects": ds.k_objects,
        "normalization": {"center": [float(c) for c in ds.center], "scale": ds.scale},
        "units": "scene",
        "frames": len(ds.frames),
        "depth_noise": ds.depth_noise,
    }
    with open(os.path.join(out_dir, "meta.json"), "w") as f:
        json.dump(meta, f, indent=1)
    for i, fr in enumerate(ds.frames):
        Image.fromarray(fr.rgb).save(os.path.join(out_dir, f"rgb/{i:04d}.png"))
        Image.fromarray(fr.mask.astype(np.uint16)).save(
            os.path.join(out_dir, f"mask/{i:04d}.png")
        )
        _write_plane(os.path.join(out_dir, f"depth/{i:04d}"), fr.depth)
        _write_plane(os.path.join(out_dir, f"normal/{i:04d}"), fr.normal)


def load_dataset(path: str) -> SceneDataset:
    meta_path = os.path.join(path, "meta.json")
    if not os.path.exists(meta_path):
        raise DatasetError(f"{path}: no meta.json (no frames found)")
    with open(meta_path) as f:
        meta = json.load(f)
    n = int(meta.get("frames", 0))
    if n == 0:
        raise DatasetError(f"{path}: dataset lists no frames")
    with open(os.path.join(path, "cameras.json")) as f:
        cameras = [Camera.from_dict(d) for d in json.load(f)]
    if len(cameras) != n:
        raise DatasetError(f"{path}: {len(cameras)} cameras for {n} frames")
    frames = []
    for i in range(n):
        rgb = np.asarray(Image.open(os.path.join(path, f"rgb/{i:04d}.png")))
        mask = np.asarray(
            Image.open(os.path.join(path, f"mask/{i:04d}.png"))
        ).astype(np.int32)
        depth = _read_plane(os.path.join(path, f"depth/{i:04d}"))
        normal = _read_plane(os.path.join(path, f"normal/{i:04d}"))
        frames.append(Frame(rgb, mask, depth, normal, cameras[i]))
    return SceneDataset(
        frames,
        int(meta["k_objects"]),
        np.array(meta["normalization"]["center"], dtype=np.float64),
        float(meta["normalization"]["scale"]),
        meta.get("depth_noise"),
        path,
    )


@dataclass
class ValidationReport:
    issues: list[str]

    @property
    def ok(self) -> bool:
        return not self.issues


def validate(ds: SceneDataset) -> ValidationReport:
    """Structural checks; lists violations per frame without aborting."""
    issues = []
    for i, fr in enumerate(ds.frames):
        h, w = fr.rgb.shape[:2]
        cam = fr.camera
        if (cam.height, cam.width) != (h, w):
            issues.append(f"frame {i}: camera size {cam.height}x{cam.width} != rgb {h}x{w}")
        for name, plane, shape in (
            ("mask", fr.mask, (h, w)),
            ("depth", fr.depth, (h, w)),
            ("normal", fr.normal, (h, w, 3)),
        ):
            if plane.shape != shape:
                issues.append(f"frame {i}: {name} shape {plane.shape} != {shape}")
        if fr.mask.min() < 0 or fr.mask.max() >= ds.k_objects:
            bad = np.unique(fr.mask[(fr.mask < 0) | (fr.mask >= ds.k_objects)])
            issues.append(f"frame {i}: mask ids {bad.tolist()} outside [0, {ds.k_objects})")
        valid = fr.depth > 0
        if valid.any():
            norms = np.linalg.norm(fr.normal[valid], axis=-1)
            off = np.abs(norms - 1.0) > 1e-3
            if off.any():
                issues.append(f"frame {i}: {int(off.sum())} non-unit normals")
    return ValidationReport(issues)
