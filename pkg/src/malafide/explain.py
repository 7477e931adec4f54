"""Grad-CAM heatmaps for the detectors, averaging, and PGM/PPM rendering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pnm import save_image

LABELS = ("bona_fide", "spoof")


@dataclass
class Heatmap:
    values: np.ndarray
    target_label: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.target_label not in LABELS:
            raise ValueError(f"target_label must be one of {LABELS}, got {self.target_label!r}")
        if self.values.ndim != 2:
            raise ValueError(f"heatmap values must be 2D, got shape {self.values.shape}")


def _minmax(m: np.ndarray) -> np.ndarray:
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def gradcam_batch(detector, images, target_label: str) -> list[Heatmap]:
    """Grad-CAM at the output of the detector's last spatial convolution block.

    The target logit is the score for ``bona_fide`` and its negation for
    ``spoof``.
    """
    if target_label not in LABELS:
        raise ValueError(f"target_label must be one of {LABELS}, got {target_label!r}")
    if not getattr(detector, "frozen", False):
        raise ValueError("detector must be frozen")
    if getattr(detector, "cam_index", None) is None:
        raise ValueError("detector has no convolution layer to explain")
    x = detector._check(images)
    sign = 1.0 if target_label == "bona_fide" else -1.0
    out = []
    for i in range(0, len(x), 32):
        s, caches, acts = detector.forward(x[i : i + 32])
        _, _, g = detector.backward(caches, np.full_like(s, sign), capture=detector.cam_index, want_input=False)
        a = acts[detector.cam_index]
        weights = g.mean(axis=(1, 2))  # (N, K)
        cams = np.maximum(np.einsum("nhwk,nk->nhw", a, weights), 0.0)
        out += [Heatmap(_minmax(c), target_label) for c in cams]
    return out


def gradcam(detector, image, target_label: str) -> Heatmap:
    return gradcam_batch(detector, np.asarray(image, dtype=np.float64)[None], target_label)[0]


def average_heatmaps(heatmaps) -> Heatmap:
    """Elementwise mean followed by min-max normalisation.

    Values are sorted along the stacking axis before summing so the result
    does not depend on the input order.
    """
    heatmaps = list(heatmaps)
    if not heatmaps:
        raise ValueError("cannot average an empty sequence of heatmaps")
    shape, label = heatmaps[0].values.shape, heatmaps[0].target_label
    for h in heatmaps:
        if h.values.shape != shape:
            raise ValueError(f"mixed heatmap shapes {shape} and {h.values.shape}")
        if h.target_label != label:
            raise ValueError(f"mixed target labels {label!r} and {h.target_label!r}")
    stack = np.sort(np.stack([h.values for h in heatmaps]), axis=0)
    return Heatmap(_minmax(stack.sum(axis=0) / len(heatmaps)), label)


def upsample_nearest(values: np.ndarray, shape) -> np.ndarray:
    h, w = values.shape
    H, W = int(shape[0]), int(shape[1])
    rows = np.minimum(((np.arange(H) + 0.5) * h / H).astype(int), h - 1)
    cols = np.minimum(((np.arange(W) + 0.5) * w / W).astype(int), w - 1)
    return values[np.ix_(rows, cols)]


def heatmap_image(heatmap: Heatmap, base_image=None, shape=None) -> np.ndarray:
    """Grayscale ``H x W x 1`` heatmap, or an RGB overlay on a dimmed base image."""
    if base_image is not None:
        base = np.asarray(base_image, dtype=np.float64)
        if base.ndim == 2:
            base = base[:, :, None]
        shape = base.shape[:2]
    elif shape is None:
        shape = heatmap.values.shape
    heat = np.clip(upsample_nearest(heatmap.values, shape), 0.0, 1.0)
    if base_image is None:
        return heat[:, :, None]
    rgb = 0.5 * (np.repeat(base, 3, axis=2) if base.shape[2] == 1 else base)
    rgb[:, :, 0] = np.clip(rgb[:, :, 0] + heat, 0.0, 1.0)
    return rgb


def render_heatmap(heatmap: Heatmap, path, base_image=None, shape=None) -> None:
    """Write a PGM (no base image) or a red-channel PPM overlay."""
    save_image(heatmap_image(heatmap, base_image, shape), path)
