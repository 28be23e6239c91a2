"""Trainable object-compositional SDF field.

A multi-resolution feature grid feeds a small softplus MLP that predicts
one signed distance per object channel plus a geometry feature; a second
MLP predicts view-dependent color.  The scene SDF is the channel-wise
minimum.  Spatial derivatives are produced by propagating three forward
tangents through the same graph ("analytic" mode), so losses built on
them backpropagate to parameters through ordinary reverse mode.

Initialization shapes every object channel into an approximate sphere
SDF of radius ``r_obj`` and flips the sign of the background channel
(interior positive) with radius ``r_bg``, keeping objects inside the
background at the start of optimization.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field as dc_field, asdict

import numpy as np

from . import autodiff as ad
from .hashgrid import GridConfig, clamp_to_cube, encode_graph, init_tables

SOFTPLUS_SHARPNESS = 100.0

CHECKPOINT_MAGIC = b"SDFRECON"
CHECKPOINT_VERSION = 1


class FieldEvalError(RuntimeError):
    """Raised when a forward pass produces non-finite activations."""


@dataclass(frozen=True)
class FieldConfig:
    grid: GridConfig = dc_field(default_factory=GridConfig)
    k_objects: int = 2
    background_channel: int = 0
    sdf_width: int = 256
    sdf_hidden: int = 2
    color_width: int = 256
    color_hidden: int = 4
    beta_init: float = 0.1
    dtype: str = "float64"

    def __post_init__(self):
        if self.k_objects < 1:
            raise ValueError("k_objects must be >= 1")
        if not 0 <= self.background_channel < self.k_objects:
            raise ValueError("background_channel out of range")
        if self.beta_init <= 0:
            raise ValueError("beta_init must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def geo_feat_dim(self) -> int:
        return self.sdf_width

    def sdf_dims(self) -> list[int]:
        return (
            [self.grid.feature_dim]
            + [self.sdf_width] * self.sdf_hidden
            + [self.k_objects + self.geo_feat_dim]
        )

    def color_dims(self) -> list[int]:
        return [9 + self.geo_feat_dim] + [self.color_width] * self.color_hidden + [3]


class FieldParams:
    """All trainable arrays: grid tables, MLP weights/biases, log(beta)."""

    def __init__(self, cfg: FieldConfig, tables, sdf_layers, color_layers, log_beta):
        self.cfg = cfg
        self.tables = tables
        self.sdf_layers = sdf_layers
        self.color_layers = color_layers
        self.log_beta = log_beta

    @property
    def beta(self) -> float:
        return float(np.exp(self.log_beta))

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    def named_arrays(self):
        """Yield (name, array, group); group selects the learning rate."""
        for i, t in enumerate(self.tables):
            yield f"table_{i:02d}", t, "grid"
        for i, (w, b) in enumerate(self.sdf_layers):
            yield f"sdf_w{i}", w, "mlp"
            yield f"sdf_b{i}", b, "mlp"
        for i, (w, b) in enumerate(self.color_layers):
            yield f"color_w{i}", w, "mlp"
            yield f"color_b{i}", b, "mlp"
        yield "log_beta", self.log_beta, "mlp"

    def copy(self) -> "FieldParams":
        return FieldParams(
            self.cfg,
            [t.copy() for t in self.tables],
            [(w.copy(), b.copy()) for w, b in self.sdf_layers],
            [(w.copy(), b.copy()) for w, b in self.color_layers],
            self.log_beta.copy(),
        )

    @classmethod
    def create(
        cls,
        cfg: FieldConfig,
        rng: np.random.Generator,
        r_bg: float = 0.75,
        r_obj: float | None = None,
    ) -> "FieldParams":
        dtype = np.dtype(cfg.dtype)
        tables = init_tables(cfg.grid, rng, dtype=dtype)

        def layer(din, dout, std):
            w = rng.normal(0.0, std, size=(din, dout)).astype(dtype)
            return w, np.zeros(dout, dtype=dtype)

        sdf_layers = [
            layer(din, dout, np.sqrt(2.0) / np.sqrt(dout))
            for din, dout in zip(cfg.sdf_dims()[:-1], cfg.sdf_dims()[1:])
        ]
        color_layers = [
            layer(din, dout, np.sqrt(2.0) / np.sqrt(dout))
            for din, dout in zip(cfg.color_dims()[:-1], cfg.color_dims()[1:])
        ]
        log_beta = np.array(np.log(cfg.beta_init), dtype=dtype)
        params = cls(cfg, tables, sdf_layers, color_layers, log_beta)
        geometric_init(params, rng, r_bg=r_bg, r_obj=r_obj)
        return params


def geometric_init(
    params: FieldParams,
    rng: np.random.Generator,
    r_bg: float = 0.75,
    r_obj: float | None = None,
) -> None:
    """Shape the initial SDF head into spheres: objects at radius r_obj
    (default r_bg / 2), background sign-flipped at radius r_bg."""
    if not 0.0 < r_bg:
        raise ValueError("r_bg must be positive")
    if r_obj is None:
        r_obj = r_bg / 2.0
    if not 0.0 < r_obj < r_bg:
        raise ValueError("need 0 < r_obj < r_bg")
    cfg = params.cfg
    dtype = params.dtype
    k, bg = cfg.k_objects, cfg.background_channel
    grid_dim = cfg.grid.levels * cfg.grid.features

    w0, b0 = params.sdf_layers[0]
    w0[:] = 0.0
    # quasi-uniform xyz directions keep the raw head nearly rotationally
    # symmetric, which random rows only achieve at large width
    width = w0.shape[1]
    w0[grid_dim : grid_dim + 3, :] = (
        _fibonacci_sphere(width).T * (np.sqrt(2.0) / np.sqrt(width))
    ).astype(dtype)
    b0[:] = 0.0

    # identity middles preserve the radial profile (softplus is ~identity
    # on the non-negative first-layer activations)
    for w, b in params.sdf_layers[1:-1]:
        w[:] = np.eye(w.shape[0], dtype=dtype)
        b[:] = 0.0

    w_last, b_last = params.sdf_layers[-1]
    fan_in = w_last.shape[0]
    mean = np.sqrt(np.pi) / np.sqrt(fan_in)
    w_last[:, :k] = rng.normal(mean, 1e-4, size=(fan_in, k)).astype(dtype)
    b_last[:] = 0.0
    w_last[:, k:] = rng.normal(
        0.0, np.sqrt(2.0) / np.sqrt(fan_in), size=(fan_in, w_last.shape[1] - k)
    ).astype(dtype)

    # Narrow softplus nets bend the raw head away from an exact ||x|| - r;
    # probe each channel around its target radius and fold a scale/shift
    # into the last layer so the zero crossing lands exactly on the target
    # sphere with unit local slope.
    dirs = _fibonacci_sphere(64).astype(dtype)
    targets = np.full(k, r_obj, dtype=dtype)
    targets[bg] = r_bg
    f_center = field_forward(np.zeros((1, 3), dtype=dtype), params).sdf_vector[0]
    for ch in range(k):
        r0 = targets[ch]
        f_ring = field_forward(r0 * dirs, params).sdf_vector[:, ch].mean()
        scale = (f_ring - f_center[ch]) / r0
        w_last[:, ch] /= scale
        b_last[ch] = -f_ring / scale
        if ch == bg:
            w_last[:, ch] = -w_last[:, ch]
            b_last[ch] = -b_last[ch]


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    theta = np.pi * (1.0 + np.sqrt(5.0)) * i
    return np.stack(
        [np.sin(phi) * np.cos(theta), np.sin(phi) * np.sin(theta), np.cos(phi)], axis=1
    )


class FieldTensors:
    """Autodiff leaves wrapping a FieldParams, rebuilt once per step."""

    def __init__(self, params: FieldParams, trainable: bool = True):
        self.cfg = params.cfg
        self.tables = [ad.Tensor(t, requires_grad=trainable) for t in params.tables]
        self.sdf_layers = [
            (ad.Tensor(w, requires_grad=trainable), ad.Tensor(b, requires_grad=trainable))
            for w, b in params.sdf_layers
        ]
        self.color_layers = [
            (ad.Tensor(w, requires_grad=trainable), ad.Tensor(b, requires_grad=trainable))
            for w, b in params.color_layers
        ]
        self.log_beta = ad.Tensor(params.log_beta, requires_grad=trainable)

    def beta(self) -> ad.Tensor:
        return ad.exp(self.log_beta)

    def named_leaves(self):
        for i, t in enumerate(self.tables):
            yield f"table_{i:02d}", t
        for i, (w, b) in enumerate(self.sdf_layers):
            yield f"sdf_w{i}", w
            yield f"sdf_b{i}", b
        for i, (w, b) in enumerate(self.color_layers):
            yield f"color_w{i}", w
            yield f"color_b{i}", b
        yield "log_beta", self.log_beta


def _check_finite(t: ad.Tensor, where: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise FieldEvalError(f"non-finite activations in {where}")


def _mlp_with_jvp(x, jvp, layers, sharpness: float, tag: str):
    """Run a softplus MLP, propagating the (n,3,.) tangent alongside."""
    n = x.shape[0]
    h, jh = x, jvp
    last = len(layers) - 1
    for li, (w, b) in enumerate(layers):
        z = ad.add(ad.matmul(h, w), b)
        _check_finite(z, f"{tag} layer {li}")
        if jh is not None:
            jz = ad.reshape(ad.matmul(ad.reshape(jh, (3 * n, -1)), w), (n, 3, -1))
        else:
            jz = None
        if li == last:
            return z, jz
        if jz is not None:
            h, gate = ad.softplus_and_gate(z, sharpness)
            jh = ad.mul(ad.reshape(gate, (n, 1, z.shape[1])), jz)
        else:
            h = ad.softplus(z, sharpness)
            jh = None
    raise AssertionError("empty MLP")


class SdfEval:
    """Graph handles from one SDF forward pass."""

    __slots__ = ("d", "scene", "feat", "grads", "scene_grad", "argmin", "clamped")

    def __init__(self, d, scene, feat, grads, scene_grad, argmin, clamped):
        self.d = d  # (n, K)
        self.scene = scene  # (n,)
        self.feat = feat  # (n, G)
        self.grads = grads  # (n, K, 3) or None
        self.scene_grad = scene_grad  # (n, 3) or None
        self.argmin = argmin  # (n,) ndarray
        self.clamped = clamped  # (n,) ndarray bool


def sdf_graph(ft: FieldTensors, x: np.ndarray, want_jvp: bool = False) -> SdfEval:
    """Evaluate object SDFs (and optionally spatial gradients) at points x.

    x lives in the normalized scene cube [-1, 1]^3 (the hash grid remaps
    to [0, 1]^3 internally); out-of-cube points are clamped and flagged.
    Gradients are taken w.r.t. x, so a unit-slope SDF has unit gradient.
    """
    cfg = ft.cfg
    x = np.asarray(x, dtype=ft.log_beta.dtype)
    q, clamped = clamp_to_cube((x + 1.0) / 2.0)
    feats, jvp = encode_graph(q, cfg.grid, ft.tables, with_jvp=want_jvp)
    if jvp is not None:
        jvp = ad.mul(jvp, 0.5)  # d(grid coords)/dx
    out, jout = _mlp_with_jvp(feats, jvp, ft.sdf_layers, SOFTPLUS_SHARPNESS, "sdf")
    k = cfg.k_objects
    d = out[:, :k]
    feat = out[:, k:]
    argmin = np.argmin(d.data, axis=1)
    n = q.shape[0]
    rows = np.arange(n)
    scene = ad.take(d, (rows, argmin), unique=True)
    grads = scene_grad = None
    if want_jvp:
        grads = ad.transpose(jout[:, :, :k], (0, 2, 1))  # (n, K, 3)
        scene_grad = ad.take(grads, (rows, argmin), unique=True)
    return SdfEval(d, scene, feat, grads, scene_grad, argmin, clamped)


def color_graph(ft: FieldTensors, x: np.ndarray, view_dir: np.ndarray, normal, feat):
    """RGB head: sigmoid(MLP(point, view dir, normal, geometry feature))."""
    c = np.asarray(x, dtype=ft.log_beta.dtype)
    v = np.asarray(view_dir, dtype=ft.log_beta.dtype)
    h = ad.concat([ad.Tensor(c), ad.Tensor(v), normal, feat], axis=-1)
    z, _ = _mlp_with_jvp(h, None, ft.color_layers, SOFTPLUS_SHARPNESS, "color")
    return ad.sigmoid(z)


@dataclass
class FieldOutput:
    sdf_vector: np.ndarray
    scene_sdf: np.ndarray
    geometry_feature: np.ndarray
    gradients: np.ndarray | None
    scene_gradient: np.ndarray | None
    clamped: np.ndarray


def field_forward(
    p: np.ndarray, params: FieldParams, want_gradients: bool = False
) -> FieldOutput:
    """Numpy-facing forward pass (no graph retained)."""
    with ad.no_grad():
        ft = FieldTensors(params, trainable=False)
        ev = sdf_graph(ft, np.atleast_2d(p), want_jvp=want_gradients)
    return FieldOutput(
        sdf_vector=ev.d.data,
        scene_sdf=ev.scene.data,
        geometry_feature=ev.feat.data,
        gradients=None if ev.grads is None else ev.grads.data,
        scene_gradient=None if ev.scene_grad is None else ev.scene_grad.data,
        clamped=ev.clamped,
    )


def color_forward(
    p: np.ndarray,
    view_dir: np.ndarray,
    normal: np.ndarray,
    geometry_feature: np.ndarray,
    params: FieldParams,
) -> np.ndarray:
    with ad.no_grad():
        ft = FieldTensors(params, trainable=False)
        rgb = color_graph(
            ft, np.atleast_2d(p), view_dir, ad.Tensor(normal), ad.Tensor(geometry_feature)
        )
    return rgb.data


def spatial_gradient(
    p: np.ndarray, params: FieldParams, mode: str = "analytic", eps: float = 1e-4
) -> np.ndarray:
    """d(object SDFs)/d(position), shape (n, K, 3).

    "analytic" differentiates the interpolation and the MLP exactly;
    "central-difference" is the independent oracle path.
    """
    p = np.atleast_2d(p)
    if mode == "analytic":
        return field_forward(p, params, want_gradients=True).gradients
    if mode != "central-difference":
        raise ValueError(f"unknown mode {mode!r}")
    if eps <= 0:
        raise ValueError("eps must be positive for central differences")
    k = params.cfg.k_objects
    out = np.empty((p.shape[0], k, 3), dtype=params.dtype)
    for ax in range(3):
        dp = np.zeros(3, dtype=params.dtype)
        dp[ax] = eps
        hi = field_forward(p + dp, params).sdf_vector
        lo = field_forward(p - dp, params).sdf_vector
        out[:, :, ax] = (hi - lo) / (2 * eps)
    return out


# -- checkpoint io -------------------------------------------------------------


def save_checkpoint(path: str, params: FieldParams, train_state: dict | None = None):
    """Versioned binary checkpoint (see README for the exact layout).

    Written atomically: temp file in the same directory, then rename.
    """
    arrays: list[tuple[str, np.ndarray]] = [
        (name, arr) for name, arr, _ in params.named_arrays()
    ]
    extra_scalars = {}
    if train_state:
        for key, val in train_state.items():
            if isinstance(val, np.ndarray):
                arrays.append((f"opt/{key}", val))
            else:
                extra_scalars[key] = val
    manifest = []
    offset = 0
    for name, arr in arrays:
        dt = arr.dtype.newbyteorder("<")
        manifest.append(
            {"name": name, "dtype": dt.str, "shape": list(arr.shape), "offset": offset}
        )
        offset += arr.size * dt.itemsize
    header = {
        "field": {
            "grid": asdict(params.cfg.grid),
            "k_objects": params.cfg.k_objects,
            "background_channel": params.cfg.background_channel,
            "sdf_width": params.cfg.sdf_width,
            "sdf_hidden": params.cfg.sdf_hidden,
            "color_width": params.cfg.color_width,
            "color_hidden": params.cfg.color_hidden,
            "beta_init": params.cfg.beta_init,
            "dtype": params.cfg.dtype,
        },
        "beta": params.beta,
        "arrays": manifest,
        "train_state": extra_scalars,
    }
    blob = json.dumps(header).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(np.array(CHECKPOINT_VERSION, dtype="<u4").tobytes())
        f.write(np.array(len(blob), dtype="<u8").tobytes())
        f.write(blob)
        for _, arr in arrays:
            f.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[FieldParams, dict]:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a field checkpoint")
        version = int(np.frombuffer(f.read(4), dtype="<u4")[0])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        hlen = int(np.frombuffer(f.read(8), dtype="<u8")[0])
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    fcfg = header["field"]
    grid = GridConfig(
        levels=fcfg["grid"]["levels"],
        r_min=fcfg["grid"]["r_min"],
        r_max=fcfg["grid"]["r_max"],
        table_size=fcfg["grid"]["table_size"],
        features=fcfg["grid"]["features"],
        primes=tuple(fcfg["grid"]["primes"]),
        pe_bands=fcfg["grid"]["pe_bands"],
    )
    cfg = FieldConfig(
        grid=grid,
        k_objects=fcfg["k_objects"],
        background_channel=fcfg["background_channel"],
        sdf_width=fcfg["sdf_width"],
        sdf_hidden=fcfg["sdf_hidden"],
        color_width=fcfg["color_width"],
        color_hidden=fcfg["color_hidden"],
        beta_init=fcfg["beta_init"],
        dtype=fcfg["dtype"],
    )
    loaded: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(
            payload, dtype=dt, count=count, offset=entry["offset"]
        ).reshape(entry["shape"])
        loaded[entry["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
    n_tables = grid.levels
    tables = [loaded[f"table_{i:02d}"] for i in range(n_tables)]
    sdf_layers = [
        (loaded[f"sdf_w{i}"], loaded[f"sdf_b{i}"]) for i in range(cfg.sdf_hidden + 1)
    ]
    color_layers = [
        (loaded[f"color_w{i}"], loaded[f"color_b{i}"])
        for i in range(cfg.color_hidden + 1)
    ]
    params = FieldParams(cfg, tables, sdf_layers, color_layers, loaded["log_beta"])
    train_state = dict(header.get("train_state", {}))
    for name, arr in loaded.items():
        if name.startswith("opt/"):
            train_state[name[4:]] = arr
    return params, train_state
