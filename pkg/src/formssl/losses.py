"""Distance-ratio triplet loss and its finite-difference check."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DimensionMismatch, NonFiniteInput

DIST_EPS = 1e-12


def pair_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # the epsilon keeps the gradient finite when a == b
    return torch.sqrt(((a - b) ** 2).sum(-1) + DIST_EPS)


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x, True
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), False


def distance_ratio_loss(phi_anc, phi_pos, phi_neg, reduction: str = "mean"):
    """``-log(exp(-d_pos) / (exp(-d_pos) + exp(-d_neg)))`` with Euclidean ``d``.

    Evaluated as ``softplus(d_pos - d_neg)``, which is the same quantity
    without underflow. Inputs are (D,) or (B, D); tensors in give a tensor
    out, anything else gives a Python float (or array with ``reduction="none"``).
    """
    (a, is_t), (p, _), (n, _) = _as_tensor(phi_anc), _as_tensor(phi_pos), _as_tensor(phi_neg)
    if not (a.shape == p.shape == n.shape):
        raise DimensionMismatch(f"shapes {tuple(a.shape)}, {tuple(p.shape)}, {tuple(n.shape)}")
    with torch.no_grad():
        finite = bool(torch.isfinite(a).all() and torch.isfinite(p).all() and torch.isfinite(n).all())
    if not finite:
        raise NonFiniteInput("embeddings contain NaN or inf")
    loss = F.softplus(pair_distance(a, p) - pair_distance(a, n))
    if reduction == "mean":
        loss = loss.mean()
    elif reduction == "sum":
        loss = loss.sum()
    elif reduction != "none":
        raise ValueError(f"unknown reduction {reduction!r}")
    if is_t:
        return loss
    return float(loss) if loss.ndim == 0 else loss.numpy()


def analytic_gradient(phi_anc, phi_pos, phi_neg):
    """Closed-form gradient of the single-triplet loss w.r.t. (anchor, positive, negative).

    With ``s = sigmoid(d_pos - d_neg)``:
    dL/da = s (a - p) / d_pos - s (a - n) / d_neg, dL/dp = -s (a - p) / d_pos,
    dL/dn = s (a - n) / d_neg.
    """
    a, p, n = (np.asarray(v, dtype=np.float64) for v in (phi_anc, phi_pos, phi_neg))
    d_pos = np.sqrt(((a - p) ** 2).sum() + DIST_EPS)
    d_neg = np.sqrt(((a - n) ** 2).sum() + DIST_EPS)
    s = 1.0 / (1.0 + np.exp(-(d_pos - d_neg)))
    g_pos = s * (a - p) / d_pos
    g_neg = s * (a - n) / d_neg
    return g_pos - g_neg, -g_pos, g_neg


def autograd_gradient(phi_anc, phi_pos, phi_neg):
    """Gradient of :func:`distance_ratio_loss` via torch autograd, in float64."""
    legs = [torch.tensor(np.asarray(v, dtype=np.float64), requires_grad=True)
            for v in (phi_anc, phi_pos, phi_neg)]
    distance_ratio_loss(*legs).backward()
    return tuple(t.grad.numpy() for t in legs)


def _loss64(a, p, n) -> float:
    return distance_ratio_loss(a, p, n)


def finite_difference_gradient(phi_anc, phi_pos, phi_neg, h: float = 1e-4):
    """Central differences of the loss w.r.t. every coordinate of all three embeddings."""
    legs = [np.array(v, dtype=np.float64) for v in (phi_anc, phi_pos, phi_neg)]
    grads = []
    for k in range(3):
        g = np.zeros_like(legs[k])
        for i in range(legs[k].size):
            orig = legs[k].flat[i]
            legs[k].flat[i] = orig + h
            up = _loss64(*legs)
            legs[k].flat[i] = orig - h
            down = _loss64(*legs)
            legs[k].flat[i] = orig
            g.flat[i] = (up - down) / (2 * h)
        grads.append(g)
    return tuple(grads)


def gradient_check(phi_anc, phi_pos, phi_neg, h: float = 1e-4) -> float:
    """Relative error between the autograd gradient and central differences.

    Error is ``||g - g_fd|| / max(||g||, ||g_fd||, 1e-12)`` over the
    concatenated gradient of all three embeddings.
    """
    if max(np.size(phi_anc), np.size(phi_pos), np.size(phi_neg)) > 64:
        raise DimensionMismatch("gradient_check is limited to embeddings of dimension <= 64")
    g = np.concatenate([v.ravel() for v in autograd_gradient(phi_anc, phi_pos, phi_neg)])
    g_fd = np.concatenate([v.ravel() for v in finite_difference_gradient(phi_anc, phi_pos, phi_neg, h)])
    denom = max(np.linalg.norm(g), np.linalg.norm(g_fd), 1e-12)
    return float(np.linalg.norm(g - g_fd) / denom)
