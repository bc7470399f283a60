"""Model inspection: input-gradient saliency, PCA on latent features,
confusion matrices, and loss-ranked misclassifications.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import imgio
from . import tensor as T
from .errors import NumericalError
from .models import Network
from .tensor import Tensor


@dataclass
class SaliencyMap:
    """Per-pixel sensitivity of the predicted-class probability."""

    values: np.ndarray  # (H, W), non-negative

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def saliency_map(net: Network, image: np.ndarray) -> SaliencyMap:
    """L2 norm over channels of d p(y_hat) / d input, per pixel.

    `image` is a single already-scaled network input (C,H,W); the network
    must be in eval mode so the pass is deterministic.
    """
    if net.training:
        raise ValueError("saliency needs the network in eval mode")
    x = Tensor(np.asarray(image, np.float32)[None], requires_grad=True)
    out = net.forward(x)
    probs = T.softmax(out["logits"], axis=1)
    y_hat = int(probs.data[0].argmax())
    T.backward(T.pick(probs, (0, y_hat)))
    grad = x.grad if x.grad is not None else np.zeros_like(x.data)
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite saliency gradients")
    values = np.sqrt((grad[0].astype(np.float64) ** 2).sum(axis=0))
    return SaliencyMap(values.astype(np.float32))


def save_saliency(out_stem, smap: SaliencyMap) -> None:
    """`<stem>.saliency.png` (heat, normalized by max) + `.saliency.csv`."""
    out_stem = Path(out_stem)
    peak = float(smap.values.max())
    heat = smap.values / peak if peak > 0 else np.zeros_like(smap.values)
    imgio.write_gray(out_stem.with_name(out_stem.name + ".saliency.png"), heat)
    with open(out_stem.with_name(out_stem.name + ".saliency.csv"), "w") as f:
        for row in smap.values:
            f.write(",".join(f"{v:.8g}" for v in row) + "\n")


def extract_latent(net: Network, images_scaled: np.ndarray,
                   batch_size: int = 32) -> np.ndarray:
    """Post-convolutional features, one row per image (N, d)."""
    was_training = net.training
    net.eval()
    rows = []
    try:
        for start in range(0, len(images_scaled), batch_size):
            xb = images_scaled[start:start + batch_size]
            out = net.forward(Tensor(np.asarray(xb, np.float32)))
            rows.append(out["latent"].data.copy())
    finally:
        if was_training:
            net.train()
    return np.concatenate(rows, axis=0)


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

@dataclass
class PcaModel:
    mean: np.ndarray                 # (d,)
    components: np.ndarray           # (k, d), rows orthonormal
    explained_variance: np.ndarray   # (k,), descending
    total_variance: float

    @property
    def explained_variance_ratio(self) -> np.ndarray:
        return self.explained_variance / self.total_variance


def pca_fit(features: np.ndarray, k: int) -> PcaModel:
    """Top-k principal components via eigendecomposition of whichever of the
    covariance (d x d) or Gram (N x N) matrix is smaller.

    Sign convention: the largest-magnitude entry of each component is
    positive. Variances use the 1/(N-1) normalization.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("features must be a 2D (N, d) matrix")
    n, d = X.shape
    if n < 2:
        raise ValueError("need at least 2 samples")
    if k < 1 or k > min(n - 1, d):
        raise ValueError(f"k={k} out of range; achievable k is 1..{min(n - 1, d)}")
    mean = X.mean(axis=0)
    Xc = X - mean

    if d <= n:
        cov = (Xc.T @ Xc) / (n - 1)
        eigvals, eigvecs = np.linalg.eigh(cov)
        order = np.argsort(eigvals)[::-1]
        eigvals = eigvals[order]
        comps = eigvecs[:, order].T
    else:
        gram = Xc @ Xc.T
        eigvals_g, eigvecs_g = np.linalg.eigh(gram)
        order = np.argsort(eigvals_g)[::-1]
        eigvals_g = eigvals_g[order]
        eigvecs_g = eigvecs_g[:, order]
        eigvals = eigvals_g / (n - 1)
        scale = np.sqrt(np.maximum(eigvals_g, 1e-300))
        comps = (Xc.T @ eigvecs_g / scale).T

    eigvals = np.maximum(eigvals, 0.0)
    rank = int((eigvals > max(eigvals[0], 1e-12) * 1e-9).sum())
    if k > rank:
        raise ValueError(f"k={k} exceeds feature rank; achievable k is 1..{rank}")

    comps = comps[:k].copy()
    for row in comps:
        peak = np.abs(row).argmax()
        if row[peak] < 0:
            row *= -1.0
    total = float((Xc * Xc).sum() / (n - 1))
    return PcaModel(mean=mean, components=comps,
                    explained_variance=eigvals[:k].copy(), total_variance=total)


def pca_project(model: PcaModel, features: np.ndarray) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None]
    if X.shape[1] != model.mean.shape[0]:
        raise ValueError(f"feature dim {X.shape[1]} != model dim {model.mean.shape[0]}")
    coeffs = (X - model.mean) @ model.components.T
    return coeffs[0] if single else coeffs


def flip_to_positive_correlation(coeffs: np.ndarray, reference: Sequence[float],
                                 col: int = 0) -> np.ndarray:
    """Copy of `coeffs` with column `col` sign-flipped if it anticorrelates
    with `reference` (used to orient PC1 along defect severity)."""
    coeffs = np.array(coeffs, dtype=np.float64, copy=True)
    ref = np.asarray(reference, dtype=np.float64)
    if len(ref) != len(coeffs):
        raise ValueError("reference length mismatch")
    c = coeffs[:, col]
    if c.std() > 0 and ref.std() > 0:
        r = float(np.corrcoef(c, ref)[0, 1])
        if r < 0:
            coeffs[:, col] = -c
    return coeffs


def write_pca_coeffs(path, ids: Sequence[str], labels: Sequence[int],
                     coeffs: np.ndarray) -> None:
    from .data import GRADE_NAMES
    k = coeffs.shape[1]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "label"] + [f"pc{j + 1}" for j in range(k)])
        for i, (name, lab) in enumerate(zip(ids, labels)):
            w.writerow([name, GRADE_NAMES[lab]] + [f"{v:.8g}" for v in coeffs[i]])


def write_pca_model(path, model: PcaModel) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["mean"] + [f"{v:.8g}" for v in model.mean])
        for j, row in enumerate(model.components):
            w.writerow([f"component_{j + 1}"] + [f"{v:.8g}" for v in row])
        w.writerow(["explained_variance"]
                   + [f"{v:.8g}" for v in model.explained_variance])
        w.writerow(["total_variance", f"{model.total_variance:.8g}"])


# ---------------------------------------------------------------------------
# confusion matrix and misclassification ranking
# ---------------------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (3,3), rows = truth, cols = prediction

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)


def confusion_matrix(predictions: Sequence[int], labels: Sequence[int]) -> ConfusionMatrix:
    preds = np.asarray(predictions)
    labs = np.asarray(labels)
    if preds.shape != labs.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {labs.shape}")
    if preds.size == 0:
        raise ValueError("empty prediction list")
    if preds.min() < 0 or preds.max() > 2 or labs.min() < 0 or labs.max() > 2:
        raise ValueError("grades must be in {0,1,2}")
    counts = np.zeros((3, 3), dtype=np.int64)
    for t, p in zip(labs, preds):
        counts[t, p] += 1
    return ConfusionMatrix(counts)


def write_confusion_csv(path, cm: ConfusionMatrix) -> None:
    from .data import GRADE_NAMES
    with open(path, "w", newline="") as f:
        f.write("," + ",".join(GRADE_NAMES) + "\n")
        for g, row in zip(GRADE_NAMES, cm.counts):
            f.write(g + "," + ",".join(str(int(v)) for v in row) + "\n")


def per_sample_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(labels)), labels]


def rank_misclassified(net: Network, images_scaled: np.ndarray,
                       labels: np.ndarray, names: Optional[Sequence[str]] = None,
                       batch_size: int = 32) -> List[Dict]:
    """Misclassified samples sorted by descending cross-entropy loss."""
    was_training = net.training
    net.eval()
    logits_all = []
    try:
        for start in range(0, len(images_scaled), batch_size):
            out = net.forward(Tensor(np.asarray(
                images_scaled[start:start + batch_size], np.float32)))
            logits_all.append(out["logits"].data.copy())
    finally:
        if was_training:
            net.train()
    logits = np.concatenate(logits_all, axis=0)
    labels = np.asarray(labels)
    losses = per_sample_cross_entropy(logits, labels)
    preds = logits.argmax(axis=1)
    rows = []
    for i in np.nonzero(preds != labels)[0]:
        rows.append({
            "name": names[i] if names is not None else str(i),
            "index": int(i),
            "label": int(labels[i]),
            "prediction": int(preds[i]),
            "loss": float(losses[i]),
        })
    rows.sort(key=lambda r: -r["loss"])
    return rows
