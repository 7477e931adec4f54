"""Two small differentiable deepfake detectors with hand-written backprop.

A detector maps a batch of images ``(N, H, W, C)`` to one real score per image,
a logit where larger means more bona fide. Both architectures start with a
fixed front end that appends a high-pass residual of the input to the
(centred) input itself.

``A``
    three 3x3 convolutions (the first with stride 2, average pooling after
    the second), a 1x1 patch-logit head, local 2x2 average pooling of the
    patch logits and a smooth global max (log-mean-exp) over them.
``B``
    two 5x5 convolutions (the first with stride 2), global average pooling
    and a two-layer dense head. Trained with horizontal flips and brightness
    jitter.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numcore import adam_init, adam_step, conv_layer_backward, conv_layer_forward, sigmoid, softplus

ARCHITECTURES = ("A", "B")
CHECKPOINT_FORMAT = "malafide-detector"
CHECKPOINT_VERSION = 1
_CHUNK = 64


# -- layers ----------------------------------------------------------------


@dataclass(frozen=True)
class Conv:
    name: str
    k: int
    cin: int
    cout: int
    stride: int = 1

    def init(self, rng):
        std = np.sqrt(2.0 / (self.k * self.k * self.cin))
        return {
            f"{self.name}.w": rng.normal(0.0, std, (self.k, self.k, self.cin, self.cout)),
            f"{self.name}.b": np.zeros(self.cout),
        }

    def forward(self, p, x):
        out, cols = conv_layer_forward(x, p[f"{self.name}.w"], p[f"{self.name}.b"], self.stride)
        return out, (cols, x.shape[1:3])

    def backward(self, p, cache, dy, need_dx=True, need_dw=True):
        cols, in_hw = cache
        dx, dw, db = conv_layer_backward(dy, cols, p[f"{self.name}.w"], need_dx, need_dw, self.stride, in_hw)
        return dx, ({f"{self.name}.w": dw, f"{self.name}.b": db} if need_dw else {})


@dataclass(frozen=True)
class Dense:
    name: str
    cin: int
    cout: int

    def init(self, rng):
        std = np.sqrt(2.0 / self.cin)
        return {f"{self.name}.w": rng.normal(0.0, std, (self.cin, self.cout)), f"{self.name}.b": np.zeros(self.cout)}

    def forward(self, p, x):
        return x @ p[f"{self.name}.w"] + p[f"{self.name}.b"], x

    def backward(self, p, x, dy, need_dx=True, need_dw=True):
        grads = {f"{self.name}.w": x.T @ dy, f"{self.name}.b": dy.sum(axis=0)} if need_dw else {}
        return (dy @ p[f"{self.name}.w"].T if need_dx else None), grads


@dataclass(frozen=True)
class Softplus:
    """``softplus(beta * x) / beta``: smooth, but close to ReLU at small activations."""

    beta: float = 10.0

    def forward(self, p, x):
        z = self.beta * x
        e = np.exp(-np.abs(z))
        # keep exp(-|z|) so the backward sigmoid costs no second exp
        return (np.maximum(z, 0.0) + np.log1p(e)) / self.beta, (z >= 0, e)

    def backward(self, p, cache, dy):
        pos, e = cache
        return dy * np.where(pos, 1.0, e) / (1.0 + e), {}


def _box3(x):
    # 3x3 zero-padded neighbourhood sum, a self-adjoint linear map
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    H, W = x.shape[1:3]
    return sum(xp[:, i : i + H, j : j + W] for i in range(3) for j in range(3))


@dataclass(frozen=True)
class HighPassFront:
    """Fixed front end: ``concat(x - 0.5, gain * (x - local_mean(x)))``.

    The local mean averages the valid pixels of each 3x3 neighbourhood. The
    residual channels expose high-frequency artifacts to the first layer.
    """

    gain: float = 4.0

    def _counts(self, shape):
        return _box3(np.ones((1,) + tuple(shape[1:3]) + (1,)))

    def forward(self, p, x):
        cnt = self._counts(x.shape)
        resid = x - _box3(x) / cnt
        return np.concatenate([x - 0.5, self.gain * resid], axis=3), cnt

    def backward(self, p, cnt, dy):
        C = dy.shape[3] // 2
        dr = self.gain * dy[..., C:]
        return dy[..., :C] + dr - _box3(dr / cnt), {}


@dataclass(frozen=True)
class AvgPool2:
    def forward(self, p, x):
        N, H, W, C = x.shape
        if H % 2 or W % 2:
            raise ValueError(f"average pooling needs even spatial dims, got {H}x{W}")
        return x.reshape(N, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4)), x.shape

    def backward(self, p, shape, dy):
        dx = np.repeat(np.repeat(dy, 2, axis=1), 2, axis=2) * 0.25
        return dx.reshape(shape), {}


@dataclass(frozen=True)
class LogMeanExp:
    """Smooth global max over all spatial logits: ``(N, h, w, 1) -> (N,)``."""

    def forward(self, p, x):
        z = x.reshape(len(x), -1)
        zmax = z.max(axis=1, keepdims=True)
        e = np.exp(z - zmax)
        s = e.sum(axis=1, keepdims=True)
        y = zmax[:, 0] + np.log(s[:, 0] / z.shape[1])
        return y, (e / s, x.shape)

    def backward(self, p, cache, dy):
        weights, shape = cache
        return (dy[:, None] * weights).reshape(shape), {}


@dataclass(frozen=True)
class GlobalAvg:
    def forward(self, p, x):
        return x.mean(axis=(1, 2)), x.shape

    def backward(self, p, shape, dy):
        N, H, W, C = shape
        return np.broadcast_to(dy[:, None, None, :] / (H * W), shape).copy(), {}


@dataclass(frozen=True)
class Flatten1:
    def forward(self, p, x):
        return x[:, 0], None

    def backward(self, p, cache, dy):
        return dy[:, None], {}


def build_layers(architecture_id: str, channels: int = 3):
    """Return ``(layers, cam_index)``; ``cam_index`` is the output of the last spatial convolution block."""
    if architecture_id == "A":
        layers = [
            HighPassFront(), Conv("conv1", 3, 2 * channels, 8, stride=2), Softplus(),
            Conv("conv2", 3, 8, 16), Softplus(), AvgPool2(),
            Conv("conv3", 3, 16, 16), Softplus(),
            Conv("patch", 1, 16, 1), AvgPool2(), LogMeanExp(),
        ]  # fmt: skip
        return layers, 7
    if architecture_id == "B":
        layers = [
            HighPassFront(),
            Conv("conv1", 5, 2 * channels, 8, stride=2), Softplus(), AvgPool2(),
            Conv("conv2", 5, 8, 24), Softplus(),
            GlobalAvg(), Dense("fc1", 24, 16), Softplus(), Dense("fc2", 16, 1), Flatten1(),
        ]  # fmt: skip
        return layers, 5
    raise ValueError(f"unknown architecture {architecture_id!r}; expected one of {ARCHITECTURES}")


# -- detector --------------------------------------------------------------


@dataclass
class Detector:
    architecture_id: str
    input_shape: tuple[int, int, int]
    params: dict[str, np.ndarray]
    frozen: bool = False
    layers: list = field(init=False, repr=False)
    cam_index: int | None = field(init=False, repr=False)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.layers, self.cam_index = build_layers(self.architecture_id, self.input_shape[2])

    def freeze(self) -> "Detector":
        for v in self.params.values():
            v.setflags(write=False)
        self.frozen = True
        return self

    def _check(self, images) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ValueError(f"expected images of shape (N, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        return x

    def forward(self, x):
        caches, acts = [], []
        for layer in self.layers:
            x, cache = layer.forward(self.params, x)
            caches.append(cache)
            acts.append(x)
        return x, caches, acts

    def backward(self, caches, dscore, want_params=False, capture=None, want_input=True):
        """Backpropagate ``dscore`` (shape ``(N,)``).

        Returns ``(dx, param_grads, captured)``; ``captured`` is the gradient
        with respect to the output of layer ``capture``. The pass only goes as
        deep as the requested quantities need; ``dx`` is ``None`` unless
        ``want_input``.
        """
        n = len(self.layers)
        lowest = n
        if want_input:
            lowest = 0
        if want_params:
            lowest = min(lowest, min(i for i, layer in enumerate(self.layers) if hasattr(layer, "init")))
        if capture is not None:
            lowest = min(lowest, capture + 1)
        d, grads, captured = dscore, {}, None
        for i in range(n - 1, -1, -1):
            if i == capture:
                captured = d
            if i < lowest:
                break
            layer = self.layers[i]
            if hasattr(layer, "init"):
                need_dx = want_input or i > lowest or i - 1 == capture
                d, g = layer.backward(self.params, caches[i], d, need_dx=need_dx, need_dw=want_params)
                grads.update(g)
            else:
                d, _ = layer.backward(self.params, caches[i], d)
        return (d if want_input else None), grads, captured

    def scores(self, images) -> np.ndarray:
        x = self._check(images)
        out = [self.forward(x[i : i + _CHUNK])[0] for i in range(0, len(x), _CHUNK)]
        return np.concatenate(out) if out else np.zeros(0)

    def scores_and_input_grads(self, images):
        x = self._check(images)
        s_all, g_all = [], []
        for i in range(0, len(x), _CHUNK):
            s, caches, _ = self.forward(x[i : i + _CHUNK])
            dx, _, _ = self.backward(caches, np.ones_like(s))
            s_all.append(s)
            g_all.append(dx)
        return np.concatenate(s_all), np.concatenate(g_all)

    def serialize(self) -> bytes:
        return _encode_checkpoint(self)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.serialize()).hexdigest()


def build_detector(architecture_id: str, input_shape=(64, 64, 3), seed: int = 0) -> Detector:
    layers, _ = build_layers(architecture_id, input_shape[2])
    rng = np.random.default_rng(seed)
    params = {}
    for layer in layers:
        if hasattr(layer, "init"):
            params.update(layer.init(rng))
    return Detector(architecture_id, tuple(input_shape), params)


def score(detector: Detector, image) -> float:
    """Bona fide support logit for a single ``H x W x C`` image."""
    return float(detector.scores(np.asarray(image, dtype=np.float64)[None])[0])


def score_input_grad(detector: Detector, image) -> np.ndarray:
    """Gradient of :func:`score` with respect to every input pixel."""
    _, g = detector.scores_and_input_grads(np.asarray(image, dtype=np.float64)[None])
    return g[0]


# -- training --------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# per-architecture schedules that reach a clean baseline on the default corpus
DEFAULT_TRAIN_LR = {"A": 3e-3, "B": 1e-2}
DEFAULT_TRAIN_EPOCHS = {"A": 30, "B": 80}


def default_train_config(architecture_id: str, **overrides) -> TrainConfig:
    base = {
        "learning_rate": DEFAULT_TRAIN_LR.get(architecture_id, 1e-3),
        "epochs": DEFAULT_TRAIN_EPOCHS.get(architecture_id, 30),
    }
    return TrainConfig(**(base | overrides))


def _augment(x, rng):
    flip = rng.random(len(x)) < 0.5
    x = np.where(flip[:, None, None, None], x[:, :, ::-1, :], x)
    jitter = rng.uniform(-0.05, 0.05, (len(x), 1, 1, 1))
    return np.clip(x + jitter, 0.0, 1.0)


def train_detector(corpus, partition, architecture_id: str, config: TrainConfig = TrainConfig(), log=None) -> Detector:
    """Fit a detector on Part 1 with class-balanced binary cross-entropy and Adam.

    Returns the detector frozen. ``log``, if given, is called as
    ``log(epoch, mean_loss)`` after every epoch.
    """
    bona, spoofs = corpus.select(partition.part1)
    spoof_all = np.concatenate([v for v in spoofs.values()]) if spoofs else np.zeros((0,) + corpus.image_shape)
    if len(bona) == 0 or len(spoof_all) == 0:
        raise ValueError("training data must contain both bona fide and spoof images")
    x = np.concatenate([bona, spoof_all])
    y = np.concatenate([np.ones(len(bona)), np.zeros(len(spoof_all))])
    # class-balanced weights with mean 1 over the training set
    w = np.where(y == 1, len(x) / (2.0 * len(bona)), len(x) / (2.0 * len(spoof_all)))

    det = build_detector(architecture_id, corpus.image_shape, seed=config.seed)
    rng = np.random.default_rng([config.seed, 1])
    states = {k: adam_init(v, config.learning_rate, config.weight_decay) for k, v in det.params.items()}
    for epoch in range(config.epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = x[idx]
            if architecture_id == "B":
                xb = _augment(xb, rng)
            s, caches, _ = det.forward(xb)
            yb, wb = y[idx], w[idx]
            # loss = softplus(s) - y*s  == BCE(sigmoid(s), y)
            total += float(np.sum(wb * (softplus(s) - yb * s)))
            ds = wb * (sigmoid(s) - yb) / len(idx)
            _, grads, _ = det.backward(caches, ds, want_params=True, want_input=False)
            for k in det.params:
                det.params[k], states[k] = adam_step(det.params[k], grads[k], states[k], name=k)
        if log is not None:
            log(epoch, total / len(x))
    return det.freeze()


# -- checkpoints -----------------------------------------------------------


def _b64(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _encode_checkpoint(det: Detector) -> bytes:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture_id": det.architecture_id,
        "input_shape": list(det.input_shape),
        "frozen": bool(det.frozen),
        "params": {k: {"shape": list(v.shape), "data": _b64(v)} for k, v in sorted(det.params.items())},
    }
    return (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode("ascii")


def save_detector(det: Detector, path) -> None:
    Path(path).write_bytes(det.serialize())


def load_detector(path) -> Detector:
    """Read a checkpoint; the returned detector is frozen if the file says so."""
    doc = json.loads(Path(path).read_bytes())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a detector checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    params = {}
    for k, rec in doc["params"].items():
        arr = np.frombuffer(base64.b64decode(rec["data"]), dtype="<f8").astype(np.float64)
        params[k] = arr.reshape(rec["shape"])
    det = Detector(doc["architecture_id"], tuple(doc["input_shape"]), params)
    expected = build_detector(det.architecture_id, det.input_shape).params
    for k, v in expected.items():
        if k not in params or params[k].shape != v.shape:
            raise ValueError(f"{path}: parameter {k} missing or mis-shaped")
    return det.freeze() if doc.get("frozen") else det


__all__ = [
    "ARCHITECTURES",
    "Detector",
    "DEFAULT_TRAIN_EPOCHS",
    "DEFAULT_TRAIN_LR",
    "TrainConfig",
    "build_detector",
    "default_train_config",
    "load_detector",
    "save_detector",
    "score",
    "score_input_grad",
    "train_detector",
]
