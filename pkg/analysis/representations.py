"""
Representation diagnostics
==========================
How entangled are watermarks with the target class inside a model?

- activation frequencies: which neurons fire (> 0) for legitimate vs watermark data
- linear CKA between two sets of representations of the same samples
- PCA projections of penultimate-layer representations, and the distance of the
  projected watermarks to the target-class centroid
- the per-epoch trade-off between watermark success and task accuracy
"""

import logging
import warnings

import numpy as np

from common.errors import ContractError
from nn_models.models import activations

logger = logging.getLogger(__name__)


def _inputs(data):
    inputs = data.inputs if hasattr(data, "inputs") else np.asarray(data)
    if len(inputs) == 0:
        raise ContractError("representation analysis needs nonempty data")
    return inputs


def activation_frequency(model, data, layers=None):
    """{layer: fraction of samples with activation > 0, per neuron} for each captured layer."""
    layers = tuple(model.spec.entanglement_layers() if layers is None else layers)
    acts = activations(model, _inputs(data), layers)
    return {layer: (a > 0).mean(axis=0) for layer, a in zip(layers, acts)}


def frequency_similarity(freq_a, freq_b):
    """{layer: cosine similarity} between two activation-frequency maps."""
    out = {}
    for layer in freq_a:
        a, b = np.asarray(freq_a[layer], dtype=np.float64), np.asarray(freq_b[layer], dtype=np.float64)
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        out[layer] = 0.0 if na == 0 or nb == 0 else float(a @ b / (na * nb))
    return out


def cka(reps_a, reps_b):
    """Linear CKA with feature centring; 0 (with a warning) for zero-variance input."""
    a = np.asarray(reps_a, dtype=np.float64)
    b = np.asarray(reps_b, dtype=np.float64)
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    if len(a) != len(b):
        raise ContractError(f"cka needs the same samples on both sides, got {len(a)} and {len(b)}")
    if len(a) < 2:
        raise ContractError(f"cka needs at least 2 samples, got {len(a)}")
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    norm_a = np.linalg.norm(a.T @ a)
    norm_b = np.linalg.norm(b.T @ b)
    if norm_a == 0 or norm_b == 0:
        warnings.warn("cka: zero-variance representations, similarity set to 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.linalg.norm(b.T @ a) ** 2 / (norm_a * norm_b))


def pca_project(reps, dims=2):
    """(coordinates (N, dims), explained variance fraction per component).

    Components are eigenvectors of the covariance (of the Gram matrix when the
    feature count exceeds the sample count).  Each component's sign makes its
    largest-magnitude coordinate positive.  Missing components are zero-padded.
    """
    x = np.asarray(reps, dtype=np.float64)
    x = x.reshape(len(x), -1)
    n, d = x.shape
    if n <= dims:
        raise ContractError(f"pca_project needs more than {dims} samples, got {n}")
    x = x - x.mean(axis=0)
    total = float(np.sum(x * x))
    if d > n:
        vals, vecs = np.linalg.eigh(x @ x.T)
        order = np.argsort(vals)[::-1]
        vals, vecs = vals[order], vecs[:, order]
        coords = vecs * np.sqrt(np.clip(vals, 0.0, None))
    else:
        vals, vecs = np.linalg.eigh(x.T @ x)
        order = np.argsort(vals)[::-1]
        vals, vecs = vals[order], vecs[:, order]
        coords = x @ vecs
    tol = max(n, d) * np.finfo(np.float64).eps * (vals[0] if len(vals) and vals[0] > 0 else 1.0)
    rank = int(np.sum(vals > tol))
    keep = min(dims, rank)
    out = np.zeros((n, dims))
    out[:, :keep] = coords[:, :keep]
    for j in range(keep):
        if out[np.argmax(np.abs(out[:, j])), j] < 0:
            out[:, j] = -out[:, j]
    explained = np.zeros(dims)
    if total > 0:
        explained[:keep] = vals[:keep] / total
    if keep < dims:
        warnings.warn(f"pca_project: representations have rank {rank} < {dims}, padding with zeros",
                      RuntimeWarning, stacklevel=2)
    return out, explained


def watermark_target_distance(model, wm, target_inputs, layer=None):
    """Mean distance of projected watermarks to the target-class centroid.

    Reported relative to the mean spread of the target class around its own
    centroid, so models with differently scaled representations compare.
    """
    layer = model.spec.penultimate_index() if layer is None else layer
    target_inputs = _inputs(target_inputs)
    reps = activations(model, np.concatenate([target_inputs, wm.inputs]), [layer])[0]
    coords, _ = pca_project(reps, 2)
    target, marks = coords[:len(target_inputs)], coords[len(target_inputs):]
    centre = target.mean(axis=0)
    spread = float(np.mean(np.linalg.norm(target - centre, axis=1)))
    distance = float(np.mean(np.linalg.norm(marks - centre, axis=1)))
    return distance / spread if spread > 0 else distance


def layer_cka(model, wm, target_inputs, layers=None):
    """{layer: CKA between watermark and target-class representations}, paired sample by sample."""
    layers = tuple(model.spec.entanglement_layers() if layers is None else layers)
    target_inputs = _inputs(target_inputs)
    n = min(len(wm), len(target_inputs))
    wm_acts = activations(model, wm.inputs[:n], layers)
    target_acts = activations(model, target_inputs[:n], layers)
    return {layer: cka(a, b) for layer, a, b in zip(layers, wm_acts, target_acts)}


def training_tradeoff(history):
    """Per epoch: gain in watermark success over the accuracy lost since the first epoch.

    Rows are dicts with epoch, task_acc, wm_success_raw and ratio; ratio is NaN
    while accuracy has not dropped.
    """
    if not history:
        return []
    first = history[0]
    rows = []
    for m in history:
        gain = m.wm_success_raw - first.wm_success_raw
        loss = first.task_acc - m.task_acc
        rows.append({
            "epoch": m.epoch,
            "task_acc": m.task_acc,
            "wm_success_raw": m.wm_success_raw,
            "ratio": gain / loss if loss > 0 else float("nan"),
        })
    return rows
