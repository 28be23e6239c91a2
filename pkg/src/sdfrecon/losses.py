"""Training objectives.

Reductions follow the conventions below deliberately (they differ per
term): color reconstruction and depth/normal terms are sums over the ray
batch, opacity is a mean over rays of a per-ray channel mean, Eikonal
and distinction terms are means over sampled points.  The distinction
term is computed in its subtract-min form, which excludes the minimum
channel while staying differentiable; the direct masked form is kept as
a numpy oracle for equivalence tests.

All loss functions accept autodiff tensors (graph mode) or plain arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class LossWeights:
    depth: float = 0.1
    normal: float = 0.05
    eikonal: float = 0.1
    distinction: float = 0.5

    def __post_init__(self):
        for name in ("depth", "normal", "eikonal", "distinction"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


def loss_rec(pred_color, target_color):
    """Sum over rays of the L1 color error."""
    diff = ad.sub(ad.as_tensor(pred_color), target_color)
    return ad.sum_(ad.absolute(diff))


def loss_opacity(pred_opacities, target_opacities):
    """Mean over rays of the per-ray channel-mean |predicted - gt| opacity gap."""
    diff = ad.sub(ad.as_tensor(pred_opacities), target_opacities)
    return ad.mean(ad.mean(ad.absolute(diff), axis=1))


def _norm(v, axis=-1):
    v = ad.as_tensor(v)
    return ad.sqrt(ad.add(ad.sum_(ad.mul(v, v), axis=axis), 1e-20))


def loss_eikonal(object_grads, scene_grads):
    """Per-channel mean of (|grad| - 1)^2, summed over channels, plus the
    same penalty on the scene gradient.

    object_grads: (M, K, 3); scene_grads: (M2, 3). Pass the union of ray
    samples and uniform space points.
    """
    g_obj = _norm(object_grads)  # (M, K)
    obj_term = ad.sum_(ad.mean(ad.powi(ad.sub(g_obj, 1.0), 2), axis=0))
    g_scene = _norm(scene_grads)  # (M2,)
    scene_term = ad.mean(ad.powi(ad.sub(g_scene, 1.0), 2))
    return ad.add(obj_term, scene_term)


def loss_distinction(sdf_vectors):
    """Mean over points of sum_i ReLU(-d_i - d_min), excluding the minimum
    channel via the subtract-min identity."""
    d = ad.as_tensor(sdf_vectors)
    d_min = ad.amin(d, axis=1, keepdims=True)
    per_channel = ad.relu(ad.mul(ad.add(d, d_min), -1.0))  # (M, K)
    correction = ad.relu(ad.mul(ad.mul(d_min[:, 0], 2.0), -1.0))  # (M,)
    total = ad.sub(ad.sum_(per_channel, axis=1), correction)
    return ad.mean(total)


def loss_distinction_direct(sdf_vectors: np.ndarray) -> float:
    """Oracle: masked form summing ReLU(-d_i - d_min) only over channels
    whose value differs from the minimum."""
    d = np.asarray(sdf_vectors, dtype=np.float64)
    d_min = d.min(axis=1, keepdims=True)
    term = np.maximum(-d - d_min, 0.0)
    term[d == d_min] = 0.0
    return float(term.sum(axis=1).mean())


def solve_depth_scale_shift(rendered, pseudo, var_eps: float = 1e-12):
    """Closed-form least squares of w*rendered + q ~= pseudo (2x2 normal
    equations).  Returns (w, q, singular); when the system is singular
    (all rendered depths equal) w = 0 and q = mean(pseudo), flagged.

    Gradients flow through the solve when ``rendered`` is a graph tensor.
    """
    x = ad.as_tensor(rendered)
    y = ad.as_tensor(pseudo)
    if x.data.size < 2:
        raise ValueError("need at least 2 rays for the scale/shift solve")
    mx = ad.mean(x)
    my = ad.mean(y)
    dx = ad.sub(x, mx)
    var = ad.mean(ad.mul(dx, dx))
    scale = float(np.mean(x.data**2)) + 1.0
    if float(var.data) <= var_eps * scale:
        return ad.Tensor(np.zeros_like(var.data)), my, True
    cov = ad.mean(ad.mul(dx, ad.sub(y, my)))
    w = ad.div(cov, var)
    q = ad.sub(my, ad.mul(w, mx))
    return w, q, False


def loss_depth(rendered, pseudo, w, q):
    """Sum of squared residuals after the scale/shift alignment."""
    r = ad.sub(ad.add(ad.mul(ad.as_tensor(rendered), w), q), pseudo)
    return ad.sum_(ad.mul(r, r))


def loss_normal(pred_normal, pseudo_normal):
    """Sum over rays of the L1 gap plus the angular term |1 - n_hat . n_bar|."""
    n_hat = ad.as_tensor(pred_normal)
    l1 = ad.sum_(ad.absolute(ad.sub(n_hat, pseudo_normal)))
    dots = ad.sum_(ad.mul(n_hat, pseudo_normal), axis=-1)
    ang = ad.sum_(ad.absolute(ad.sub(dots, 1.0)))
    return ad.add(l1, ang)


def loss_total(parts: dict, weights: LossWeights):
    """rec + opacity + w_d*depth + w_n*normal + w_e*eikonal + w_r*distinction."""
    total = ad.add(parts["rec"], parts["opacity"])
    total = ad.add(total, ad.mul(parts["depth"], weights.depth))
    total = ad.add(total, ad.mul(parts["normal"], weights.normal))
    total = ad.add(total, ad.mul(parts["eikonal"], weights.eikonal))
    total = ad.add(total, ad.mul(parts["distinction"], weights.distinction))
    return total
