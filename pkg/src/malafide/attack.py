"""Attack-specific convolutional filters that push spoof scores towards bona fide.

A filter is one ``L x L`` kernel shared by all colour channels. The attacked
image is ``normalize_image(conv2d_same(p, m))`` and the filter maximises the
summed detector score of the attacked spoofs of one attack algorithm.
"""

from __future__ import annotations

import base64
import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .metrics import compute_eer
from .numcore import adam_init, adam_step, conv2d_kernel_grad, conv2d_same

FILTER_FORMAT = "malafide-filter"
FILTER_VERSION = 1
DEFAULT_SIZES = (3, 9, 27, 81)
_CHUNK = 32


@dataclass
class MalafideFilter:
    attack_id: str
    size: int
    coefficients: np.ndarray
    trained_on: str | None = None

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64)
        if self.size < 1 or self.size % 2 == 0:
            raise ValueError(f"filter size must be odd and positive, got {self.size}")
        if self.coefficients.shape != (self.size, self.size):
            raise ValueError(f"coefficients shape {self.coefficients.shape} != ({self.size}, {self.size})")
        if not np.all(np.isfinite(self.coefficients)):
            raise ValueError("filter coefficients must be finite")


def init_identity_filter(attack_id: str, L: int) -> MalafideFilter:
    if int(L) != L or L < 1 or L % 2 == 0:
        raise ValueError(f"filter size must be a positive odd integer, got {L}")
    k = np.zeros((L, L))
    k[L // 2, L // 2] = 1.0
    return MalafideFilter(attack_id, int(L), k)


# -- normalisation ---------------------------------------------------------


def _per_image(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, int(np.prod(x.shape[-3:])))


def normalize_image(image) -> np.ndarray:
    """Pass images already in [0, 1] through; min-max rescale the others.

    Works per image on ``(H, W, C)`` or batched ``(N, H, W, C)`` input. A
    constant image outside [0, 1] becomes all 0.5.
    """
    out, _ = _normalize_forward(image)
    return out


def _normalize_forward(image):
    x = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot normalize an image with non-finite values")
    flat = _per_image(x)
    lo, hi = flat.min(axis=1), flat.max(axis=1)
    inside = (lo >= 0.0) & (hi <= 1.0)
    rng = hi - lo
    out = flat.copy()
    for n in np.flatnonzero(~inside):
        out[n] = 0.5 if rng[n] == 0 else (flat[n] - lo[n]) / rng[n]
    cache = (flat, inside, lo, rng)
    return out.reshape(x.shape), cache


def _normalize_backward(cache, upstream, exact=True) -> np.ndarray:
    flat, inside, lo, rng = cache
    g = _per_image(np.asarray(upstream, dtype=np.float64))
    dx = g.copy()
    for n in np.flatnonzero(~inside):
        if rng[n] == 0:
            dx[n] = 0.0
            continue
        dx[n] = g[n] / rng[n]
        if exact:
            # min and max move with the pixels that attain them
            out = (flat[n] - lo[n]) / rng[n]
            dx[n, np.argmin(flat[n])] += np.dot(g[n], out - 1.0) / rng[n]
            dx[n, np.argmax(flat[n])] -= np.dot(g[n], out) / rng[n]
    return dx.reshape(np.shape(upstream))


def apply_filter(image, filt: MalafideFilter) -> np.ndarray:
    """Convolve with the filter, then normalise; output always lies in [0, 1]."""
    return normalize_image(conv2d_same(image, filt.coefficients))


# -- objective -------------------------------------------------------------


def objective(spoof_batch, filt: MalafideFilter, detector) -> float:
    """Sum of detector scores over the filtered spoof batch."""
    x = np.asarray(spoof_batch, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if len(x) == 0:
        raise ValueError("empty spoof batch")
    return float(np.sum(detector.scores(apply_filter(x, filt))))


def objective_and_grad(spoof_batch, filt: MalafideFilter, detector, exact_norm_grad: bool = True):
    """Return the summed score of the filtered batch and its gradient w.r.t. the coefficients."""
    x = np.asarray(spoof_batch, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if len(x) == 0:
        raise ValueError("empty spoof batch")
    total = 0.0
    grad = np.zeros_like(filt.coefficients)
    for i in range(0, len(x), _CHUNK):
        chunk = x[i : i + _CHUNK]
        filtered = conv2d_same(chunk, filt.coefficients)
        attacked, cache = _normalize_forward(filtered)
        s, g_img = detector.scores_and_input_grads(attacked)
        total += float(np.sum(s))
        g_filtered = _normalize_backward(cache, g_img, exact=exact_norm_grad)
        grad += conv2d_kernel_grad(chunk, g_filtered, filt.size)
    return total, grad


# -- optimisation ----------------------------------------------------------


@dataclass(frozen=True)
class AttackConfig:
    learning_rate: float = 1e-2
    weight_decay: float = 0.0
    batch_size: int = 32
    max_epochs: int = 100
    eer_stop_threshold: float = 50.0
    seed: int = 0
    exact_norm_grad: bool = True

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.eer_stop_threshold <= 100.0:
            raise ValueError("eer_stop_threshold must lie in (0, 100]")


# per-architecture learning rates at the reference size, tuned per detector
DEFAULT_ATTACK_LR = {"A": 2e-3, "B": 6e-3}
REFERENCE_SIZE = 27


def default_attack_lr(architecture_id: str, size: int = REFERENCE_SIZE) -> float:
    """Default rate for an ``size x size`` filter.

    Adam moves every coefficient by about the learning rate per step, so the
    filter's DC gain moves by about ``lr * size**2``. Scaling the rate by
    ``REFERENCE_SIZE / size`` keeps large filters out of the regime where one
    step swings the overall gain.
    """
    return DEFAULT_ATTACK_LR.get(architecture_id, 2e-3) * REFERENCE_SIZE / size


def default_attack_config(architecture_id: str, size: int = REFERENCE_SIZE, **overrides) -> AttackConfig:
    return AttackConfig(**({"learning_rate": default_attack_lr(architecture_id, size)} | overrides))


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    objective: float
    eer: float


@dataclass
class AttackLog:
    records: list[EpochRecord] = field(default_factory=list)
    stop_reason: str | None = None
    initial_objective: float | None = None
    initial_eer: float | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "objective", "eer"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.objective), repr(r.eer)])
        return buf.getvalue()


class AttackDiverged(FloatingPointError):
    """The objective or its gradient became non-finite."""


def optimize_filter(
    spoof_train,
    bona_train,
    detector,
    L: int,
    config: AttackConfig = AttackConfig(),
    attack_id: str = "attack",
    monitor: Callable[[int, MalafideFilter], tuple] | None = None,
    progress: Callable[[EpochRecord], None] | None = None,
):
    """Gradient ascent on the summed score of filtered spoofs, from the identity filter.

    After every epoch the monitored EER compares unfiltered ``bona_train``
    scores with filtered ``spoof_train`` scores; training stops once it exceeds
    ``config.eer_stop_threshold`` or after ``config.max_epochs`` epochs.
    ``monitor(epoch, filter)``, if given, replaces the detector scoring used for
    monitoring and must return ``(bona_scores, spoof_scores)``.
    """
    if not getattr(detector, "frozen", False):
        raise ValueError("the detector must be frozen before attacking it")
    spoofs = np.asarray(spoof_train, dtype=np.float64)
    bona = np.asarray(bona_train, dtype=np.float64)
    if spoofs.ndim != 4 or len(spoofs) == 0:
        raise ValueError("spoof_train must be a non-empty (N, H, W, C) stack")
    flat = spoofs.reshape(len(spoofs), -1)
    if np.all(flat.max(axis=1) == flat.min(axis=1)):
        raise ValueError("all spoof images are constant; the filter gradient is degenerate")

    filt = init_identity_filter(attack_id, L)
    state = adam_init(filt.coefficients, config.learning_rate, config.weight_decay)
    rng = np.random.default_rng(config.seed)

    if monitor is None:
        bona_scores = detector.scores(bona)

        def monitor(epoch, f):
            return bona_scores, detector.scores(apply_filter(spoofs, f))

    log = AttackLog()
    b0, s0 = monitor(0, filt)
    log.initial_objective = float(np.mean(s0))
    log.initial_eer = compute_eer(b0, s0)

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(spoofs))
        for start in range(0, len(spoofs), config.batch_size):
            batch = spoofs[order[start : start + config.batch_size]]
            total, grad = objective_and_grad(batch, filt, detector, config.exact_norm_grad)
            if not np.isfinite(total) or not np.all(np.isfinite(grad)):
                raise AttackDiverged(f"non-finite objective for attack {attack_id!r} at epoch {epoch}")
            # Adam minimises; ascend the mean batch score
            coeffs, state = adam_step(filt.coefficients, -grad / len(batch), state, name=f"filter[{attack_id}]")
            filt = MalafideFilter(attack_id, filt.size, coeffs)
        bona_scores_e, spoof_scores_e = monitor(epoch, filt)
        mean_obj = float(np.mean(spoof_scores_e))
        if not np.isfinite(mean_obj):
            raise AttackDiverged(f"non-finite objective for attack {attack_id!r} at epoch {epoch}")
        rec = EpochRecord(epoch, mean_obj, compute_eer(bona_scores_e, spoof_scores_e))
        log.records.append(rec)
        if progress is not None:
            progress(rec)
        if rec.eer > config.eer_stop_threshold:
            log.stop_reason = "eer_threshold"
            break
    else:
        log.stop_reason = "epoch_cap"
    return filt, log


# -- filter files ----------------------------------------------------------


def filter_to_bytes(filt: MalafideFilter) -> bytes:
    doc = {
        "format": FILTER_FORMAT,
        "version": FILTER_VERSION,
        "attack_id": filt.attack_id,
        "size": filt.size,
        "trained_on": filt.trained_on,
        "coefficients": base64.b64encode(np.ascontiguousarray(filt.coefficients, dtype="<f8").tobytes()).decode(),
    }
    return (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode("ascii")


def save_filter(filt: MalafideFilter, path) -> None:
    Path(path).write_bytes(filter_to_bytes(filt))


def load_filter(path) -> MalafideFilter:
    doc = json.loads(Path(path).read_bytes())
    if doc.get("format") != FILTER_FORMAT:
        raise ValueError(f"{path}: not a filter file")
    if doc.get("version") != FILTER_VERSION:
        raise ValueError(f"{path}: unsupported filter version {doc.get('version')}")
    L = int(doc["size"])
    raw = base64.b64decode(doc["coefficients"])
    if len(raw) != 8 * L * L:
        raise ValueError(f"{path}: expected {L * L} coefficients, found {len(raw) // 8}")
    coeffs = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(L, L)
    return MalafideFilter(doc["attack_id"], L, coeffs, doc.get("trained_on"))
