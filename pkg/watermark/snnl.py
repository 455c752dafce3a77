"""
Soft nearest neighbor loss
==========================
For points x_1..x_N with groups y_i and temperature T::

    SNNL = -1/N sum_i log( (sum_{j != i, y_j = y_i} exp(-|x_i - x_j|^2 / T) + eps)
                           / sum_{k != i} exp(-|x_i - x_k|^2 / T) )

with eps = 1e-12.  High values mean the groups are entangled.  The loss is a
single tape primitive evaluated in float64 in the log domain (per-row max
shift), so neither exponentials nor eps can underflow; its gradient flows to
the points and, when ``temperature`` is a tensor, to T.

Squared distances grow with the width of a layer, so a fixed T that suits a
64-unit dense layer leaves a wide conv layer with exp(-d/T) = 0 for every pair
and no gradient at all.  ``calibrated_temperature`` starts T at the scale of
the layer's own distances.
"""

from __future__ import annotations

import numpy as np

from common import tensor_autodiff as ad
from common.errors import ContractError
from common.tensor_autodiff import Tensor

EPS = 1e-12
LOG_EPS = np.log(EPS)


def _check(points, groups, temperature):
    if points.ndim != 2:
        raise ContractError(f"snnl: points must be (N, d), got {points.shape}")
    n = points.shape[0]
    if n < 2:
        raise ContractError(f"snnl: need at least 2 points, got {n}")
    groups = np.asarray(groups).reshape(-1)
    if groups.shape[0] != n:
        raise ContractError(f"snnl: {groups.shape[0]} group ids for {n} points")
    t = float(np.asarray(temperature.data if isinstance(temperature, Tensor) else temperature).reshape(-1)[0])
    if not t > 0 or not np.isfinite(t):
        raise ContractError(f"snnl: temperature must be positive and finite, got {t}")
    return groups, t


def _terms(x64, groups, t):
    """Per-pair log-weights and the pieces the forward value and gradient share."""
    n = x64.shape[0]
    norms = np.einsum("ij,ij->i", x64, x64)
    d = np.maximum(norms[:, None] + norms[None, :] - 2.0 * (x64 @ x64.T), 0.0)
    np.fill_diagonal(d, 0.0)
    off = ~np.eye(n, dtype=bool)
    same = (groups[:, None] == groups[None, :]) & off
    s = np.where(off, -d / t, -np.inf)
    m = s.max(axis=1, keepdims=True)
    e = np.exp(s - m)
    log_den = m[:, 0] + np.log(e.sum(axis=1))
    num = np.where(same, e, 0.0).sum(axis=1)
    with np.errstate(divide="ignore"):
        log_num = np.logaddexp(m[:, 0] + np.log(num), LOG_EPS)
    return d, s, same, log_num, log_den


def snnl(points, groups, temperature):
    """Soft nearest neighbor loss of ``points`` grouped by ``groups`` at ``temperature``.

    ``points`` is a Tensor (or array) of shape (N, d) or (N,); ``temperature``
    is a positive float or a one-element Tensor holding T.
    """
    if not isinstance(points, Tensor):
        arr = np.asarray(points)
        points = Tensor(arr, dtype=np.float64 if arr.dtype == np.float64 else None)
    if points.ndim == 1:
        points = ad.reshape(points, (points.shape[0], 1))
    elif points.ndim > 2:
        points = ad.flatten(points)
    groups, t = _check(points, groups, temperature)
    n = points.shape[0]
    x64 = points.data.astype(np.float64)
    d, s, same, log_num, log_den = _terms(x64, groups, t)
    value = np.asarray(np.mean(log_den - log_num), dtype=points.dtype)

    inputs = (points,)
    t_tensor = temperature if isinstance(temperature, Tensor) else None
    if t_tensor is not None:
        inputs = inputs + (t_tensor,)

    def backward(g):
        scale = float(g.reshape(-1)[0]) / n
        with np.errstate(under="ignore"):
            w_den = np.exp(s - log_den[:, None])
            w_num = np.where(same, np.exp(s - log_num[:, None]), 0.0)
        gs = scale * (w_den - w_num)           # dL/ds
        gd = -gs / t                           # dL/dD
        sym = gd + gd.T
        gx = 2.0 * (sym.sum(axis=1)[:, None] * x64 - sym @ x64)
        grads = (gx.astype(points.dtype),)
        if t_tensor is not None:
            gt = float(np.sum(gs * np.where(np.isfinite(s), d, 0.0))) / (t * t)
            grads = grads + (np.full(t_tensor.shape, gt, dtype=t_tensor.dtype),)
        return grads

    return ad.emit("snnl", inputs, value, backward)


TEMPERATURE_SCALES = ("absolute", "median")


def median_sq_distance(points):
    """Median squared Euclidean distance over distinct pairs of the flattened ``points``."""
    x = np.asarray(points.data if isinstance(points, Tensor) else points, dtype=np.float64)
    x = x.reshape(len(x), -1)
    if len(x) < 2:
        return 0.0
    norms = np.einsum("ij,ij->i", x, x)
    d = np.maximum(norms[:, None] + norms[None, :] - 2.0 * (x @ x.T), 0.0)
    return float(np.median(d[np.triu_indices(len(x), k=1)]))


def calibrated_temperature(points, temperature, scale="absolute"):
    """Initial temperature for a layer whose representation of a batch is ``points``.

    ``absolute`` returns ``temperature`` unchanged.  ``median`` multiplies it by the
    median pairwise squared distance, so that ``temperature = 1`` weighs a typical
    pair by exp(-1) whatever the width and scale of the layer; a batch with no
    spread falls back to ``temperature``.
    """
    if scale not in TEMPERATURE_SCALES:
        raise ContractError(f"temperature scale must be one of {TEMPERATURE_SCALES}, got {scale!r}")
    if not temperature > 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    if scale == "absolute":
        return float(temperature)
    spread = median_sq_distance(points)
    return float(temperature) * spread if spread > 0 else float(temperature)


def snnl_value(points, groups, temperature):
    with ad.no_grad():
        return snnl(points, groups, temperature).item()


def snnl_grad_input(points, groups, temperature):
    """d SNNL / d points, shape of ``points``."""
    arr = np.asarray(points)
    x = Tensor(arr, requires_grad=True, dtype=np.float64 if arr.dtype == np.float64 else np.float32)
    with ad.Tape() as tape:
        loss = snnl(x, groups, temperature)
        ad.backward(loss, tape)
    return x.grad


def snnl_grad_temperature(points, groups, temperature):
    """d SNNL / d T at the given temperature."""
    t = Tensor(np.array([float(temperature)]), requires_grad=True, dtype=np.float64)
    x = Tensor(np.asarray(points, dtype=np.float64), dtype=np.float64)
    with ad.Tape() as tape:
        loss = snnl(x, groups, t)
        ad.backward(loss, tape)
    return float(t.grad[0])


def snnl_reference(points, groups, temperature):
    """Direct float64 evaluation of the defining formula, no shifting."""
    x = np.asarray(points, dtype=np.float64)
    x = x.reshape(len(x), -1)
    groups = np.asarray(groups).reshape(-1)
    n = len(x)
    total = 0.0
    for i in range(n):
        num = 0.0
        den = 0.0
        for k in range(n):
            if k == i:
                continue
            w = np.exp(-np.sum((x[i] - x[k]) ** 2) / temperature)
            den += w
            if groups[k] == groups[i]:
                num += w
        total += np.log((num + EPS) / den)
    return -total / n
