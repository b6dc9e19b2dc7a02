"""Feed-forward networks written against numpy, trained as siamese triplet embedders.

Batches are row-major: dense inputs are ``(n, d)``; images travel through the
conv stack as ``(n, height, width, channels)``. Every network input is given
as a flat feature vector and reshaped according to ``NetworkSpec.input_shape``
(``(channels, height, width)`` for images, ``(d,)`` for vectors).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import SpecError, TrainingError, ValidationError

log = logging.getLogger(__name__)

LAYER_KINDS = ("dense", "conv", "maxpool", "relu")


def grow_channels(channels: int, growth: float) -> int:
    """``round(growth * channels)`` with halves rounded up."""
    return int(math.floor(growth * channels + 0.5))


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: Optional[int] = None
    kernel: int = 3
    growth: float = 1.5

    def to_dict(self) -> dict:
        if self.kind == "dense":
            return {"kind": "dense", "units": self.units}
        if self.kind == "conv":
            return {"kind": "conv", "kernel": self.kernel, "growth": self.growth}
        if self.kind == "maxpool":
            return {"kind": "maxpool", "kernel": 2}
        return {"kind": self.kind}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        kind = d["kind"]
        if kind == "dense":
            return cls("dense", units=int(d["units"]))
        if kind == "conv":
            return cls("conv", kernel=int(d.get("kernel", 3)), growth=float(d.get("growth", 1.5)))
        if kind in ("maxpool", "relu"):
            return cls(kind)
        raise SpecError(f"unknown layer kind {kind!r}")


@dataclass(frozen=True)
class NetworkSpec:
    layers: Tuple[LayerSpec, ...]
    input_shape: Tuple[int, ...]
    output_dim: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        self.param_shapes()  # validates

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    def param_shapes(self) -> List[Tuple[int, ...]]:
        """Walk the stack, checking every layer fits its input; return parameter shapes."""
        if len(self.input_shape) not in (1, 3):
            raise SpecError(f"input_shape must be (d,) or (C, H, W), got {self.input_shape}")
        if not self.layers:
            raise SpecError("network has no layers")
        shapes: List[Tuple[int, ...]] = []
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if layer.kind not in LAYER_KINDS:
                raise SpecError(f"layer {i}: unknown kind {layer.kind!r}")
            if layer.kind == "dense":
                if layer.units is None or layer.units < 1:
                    raise SpecError(f"layer {i}: dense needs units >= 1")
                fan_in = int(np.prod(shape))
                shapes += [(layer.units, fan_in), (layer.units,)]
                shape = (layer.units,)
            elif layer.kind == "conv":
                if len(shape) != 3:
                    raise SpecError(f"layer {i}: conv after flattening")
                c, h, w = shape
                k = layer.kernel
                if h < k or w < k:
                    raise SpecError(f"layer {i}: conv kernel {k} exceeds spatial extent {h}x{w}")
                f = grow_channels(c, layer.growth)
                shapes += [(f, c, k, k), (f,)]
                shape = (f, h - k + 1, w - k + 1)
            elif layer.kind == "maxpool":
                if len(shape) != 3:
                    raise SpecError(f"layer {i}: maxpool after flattening")
                c, h, w = shape
                if h < 2 or w < 2:
                    raise SpecError(f"layer {i}: maxpool on {h}x{w} extent")
                shape = (c, h // 2, w // 2)
        last = self.layers[-1]
        if last.kind != "dense":
            raise SpecError("last layer must be a linear dense embedding head")
        if last.units != self.output_dim:
            raise SpecError(f"head has {last.units} units but output_dim is {self.output_dim}")
        return shapes

    def n_params(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes()))

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape), "output_dim": self.output_dim,
                "layers": [layer.to_dict() for layer in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(LayerSpec.from_dict(x) for x in d["layers"]),
                   tuple(d["input_shape"]), int(d["output_dim"]))


def dense_spec(input_dim: int, hidden: Sequence[int] = (100, 100, 100),
               output_dim: int = 50) -> NetworkSpec:
    layers = []
    for units in hidden:
        layers += [LayerSpec("dense", units=units), LayerSpec("relu")]
    layers.append(LayerSpec("dense", units=output_dim))
    return NetworkSpec(tuple(layers), (input_dim,), output_dim)


def image_spec(input_shape: Tuple[int, int, int] = (3, 58, 100), n_conv: int = 6,
               pool_after: Sequence[int] = (2, 4, 6), growth: float = 1.5,
               hidden: Sequence[int] = (100, 100), output_dim: int = 100) -> NetworkSpec:
    """Conv stack with relu after each conv and a 2x2 max-pool after the listed convs
    (1-based), followed by a dense head."""
    layers = []
    for i in range(1, n_conv + 1):
        layers += [LayerSpec("conv", kernel=3, growth=growth), LayerSpec("relu")]
        if i in pool_after:
            layers.append(LayerSpec("maxpool"))
    for units in hidden:
        layers += [LayerSpec("dense", units=units), LayerSpec("relu")]
    layers.append(LayerSpec("dense", units=output_dim))
    return NetworkSpec(tuple(layers), tuple(input_shape), output_dim)


@dataclass
class TrainConfig:
    margin: float = 1.0
    learning_rate: float = 0.001
    batch_size: int = 256
    epochs: int = 100
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.margin >= 0:
            raise ValidationError(f"margin must be >= 0, got {self.margin}")
        if not self.learning_rate >= 0:
            raise ValidationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValidationError("batch_size must be >= 1 and epochs >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError(f"optimizer must be adam or sgd, got {self.optimizer!r}")


@dataclass
class EmbeddingModel:
    spec: NetworkSpec
    weights: List[np.ndarray]
    train_log: List[float] = field(default_factory=list)

    @property
    def output_dim(self) -> int:
        return self.spec.output_dim

    def n_params(self) -> int:
        return int(sum(w.size for w in self.weights))

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(self.spec, [w.copy() for w in self.weights], list(self.train_log))


def init_network(spec: NetworkSpec, seed: int = 0) -> EmbeddingModel:
    """He-style uniform init: weights ~ U(-b, b), b = sqrt(6 / fan_in); zero biases."""
    rng = np.random.default_rng(seed)
    weights = []
    for shape in spec.param_shapes():
        if len(shape) == 1:
            weights.append(np.zeros(shape))
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-bound, bound, size=shape))
    return EmbeddingModel(spec, weights)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

_CONV_CHUNK = 32


def _im2col(x, k):
    n, h, w, c = x.shape
    cols = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    # (n, ho, wo, c, k, k) -> rows of length c*k*k
    return cols.reshape(n * (h - k + 1) * (w - k + 1), c * k * k)


def _conv_forward(x, w, b):
    n, h, wd, _ = x.shape
    f, c, k, _ = w.shape
    ho, wo = h - k + 1, wd - k + 1
    wmat = w.reshape(f, c * k * k).T
    out = np.empty((n, ho, wo, f))
    for s in range(0, n, _CONV_CHUNK):
        xs = x[s:s + _CONV_CHUNK]
        out[s:s + _CONV_CHUNK] = (_im2col(xs, k) @ wmat).reshape(len(xs), ho, wo, f)
    out += b
    return out


def _conv_backward(x, w, dout):
    n = x.shape[0]
    f, c, k, _ = w.shape
    _, ho, wo, _ = dout.shape
    wmat = w.reshape(f, c * k * k)
    dw = np.zeros((f, c * k * k))
    dx = np.zeros_like(x)
    for s in range(0, n, _CONV_CHUNK):
        xs = x[s:s + _CONV_CHUNK]
        m = len(xs)
        d = dout[s:s + _CONV_CHUNK].reshape(-1, f)
        dw += d.T @ _im2col(xs, k)
        dcols = (d @ wmat).reshape(m, ho, wo, c, k, k)
        dxs = dx[s:s + _CONV_CHUNK]
        for i in range(k):
            for j in range(k):
                dxs[:, i:i + ho, j:j + wo, :] += dcols[..., i, j]
    return dx, dw.reshape(w.shape), dout.sum(axis=(0, 1, 2))


def _pool_forward(x):
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    blocks = (x[:, :2 * h2, :2 * w2, :]
              .reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4))
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _pool_backward(x_shape, arg, dout):
    n, h, w, c = x_shape
    h2, w2 = h // 2, w // 2
    blocks = np.zeros((n, h2, w2, c, 4))
    np.put_along_axis(blocks, arg[..., None], dout[..., None], axis=-1)
    dx = np.zeros(x_shape)
    dx[:, :2 * h2, :2 * w2, :] = (blocks.reshape(n, h2, w2, c, 2, 2)
                                  .transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c))
    return dx


class Network:
    """Evaluates one ``EmbeddingModel``; the layers read ``model.weights`` in place,
    so every input pushed through a ``Network`` uses the same parameter objects."""

    def __init__(self, model: EmbeddingModel):
        self.model = model
        self.spec = model.spec
        self._cache: list = []

    def _prepare(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        size = self.spec.input_size
        if x.ndim == len(self.spec.input_shape) + 1 and x.shape[1:] == self.spec.input_shape:
            x = x.reshape(x.shape[0], -1)
        if x.ndim != 2 or x.shape[1] != size:
            raise ValidationError(
                f"input of shape {x.shape} does not match network input {self.spec.input_shape}")
        if len(self.spec.input_shape) == 3:
            c, h, w = self.spec.input_shape
            x = x.reshape(-1, c, h, w).transpose(0, 2, 3, 1)
        return x

    def forward(self, x, keep_cache: bool = False) -> np.ndarray:
        x = self._prepare(x)
        weights = self.model.weights
        cache = []
        p = 0
        for layer in self.spec.layers:
            if layer.kind == "dense":
                if x.ndim > 2:
                    cache.append(("flatten", x.shape))
                    x = x.reshape(x.shape[0], -1)
                w, b = weights[p], weights[p + 1]
                cache.append(("dense", x, p))
                x = x @ w.T + b
                p += 2
            elif layer.kind == "conv":
                w, b = weights[p], weights[p + 1]
                cache.append(("conv", x, p))
                x = _conv_forward(x, w, b)
                p += 2
            elif layer.kind == "relu":
                cache.append(("relu", x > 0))
                x = np.maximum(x, 0.0)
            elif layer.kind == "maxpool":
                out, arg = _pool_forward(x)
                cache.append(("maxpool", x.shape, arg))
                x = out
        if keep_cache:
            self._cache = cache
        return x

    def backward(self, dout: np.ndarray) -> List[np.ndarray]:
        """Gradients of ``sum(dout * output)`` w.r.t. every weight array."""
        weights = self.model.weights
        grads: List[Optional[np.ndarray]] = [None] * len(weights)
        d = dout
        for entry in reversed(self._cache):
            kind = entry[0]
            if kind == "dense":
                _, x, p = entry
                grads[p] = d.T @ x
                grads[p + 1] = d.sum(axis=0)
                d = d @ weights[p]
            elif kind == "conv":
                _, x, p = entry
                d, grads[p], grads[p + 1] = _conv_backward(x, weights[p], d)
            elif kind == "relu":
                d = d * entry[1]
            elif kind == "maxpool":
                d = _pool_backward(entry[1], entry[2], d)
            elif kind == "flatten":
                d = d.reshape(entry[1])
        self._cache = []
        return grads

    def relu_preactivations(self, x) -> List[np.ndarray]:
        """Inputs of every relu for a batch; used to locate kinks."""
        self.forward(x, keep_cache=True)
        pre = []
        feed = None
        for entry in self._cache:
            if entry[0] in ("dense", "conv"):
                feed = entry
            if entry[0] == "relu":
                pre.append(feed)
        self._cache = []
        return pre


def forward(model: EmbeddingModel, x) -> np.ndarray:
    """Embed one input (1-D result) or a batch (2-D result)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1 or (len(model.spec.input_shape) == 3 and x.ndim == 3)
    out = Network(model).forward(x[None] if single and x.ndim == 3 else x)
    return out[0] if single else out


def embed_all(model: EmbeddingModel, features, chunk: int = 512) -> np.ndarray:
    """Row ``i`` is ``forward(model, features[i])``; order preserved."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] == 0:
        return np.zeros((0, model.output_dim))
    if features.ndim == 1:
        raise ValidationError("embed_all expects a batch of inputs, got one vector")
    net = Network(model)
    return np.concatenate([net.forward(features[i:i + chunk])
                           for i in range(0, features.shape[0], chunk)])


# ---------------------------------------------------------------------------
# triplet loss
# ---------------------------------------------------------------------------

def triplet_losses(ea, eb, ec, margin: float) -> np.ndarray:
    ea, eb, ec = (np.atleast_2d(np.asarray(e, dtype=np.float64)) for e in (ea, eb, ec))
    if not ea.shape == eb.shape == ec.shape:
        raise ValidationError(f"embedding shapes differ: {ea.shape}, {eb.shape}, {ec.shape}")
    d_ab = np.linalg.norm(ea - eb, axis=1)
    d_ac = np.linalg.norm(ea - ec, axis=1)
    return np.maximum(0.0, d_ab - d_ac + margin)


def triplet_loss(ea, eb, ec, margin: float) -> float:
    """Mean hinge ``max(0, |a-b| - |a-c| + margin)`` over the given triplets."""
    return float(triplet_losses(ea, eb, ec, margin).mean())


def triplet_loss_grad(ea, eb, ec, margin: float):
    """Mean triplet loss and its gradients w.r.t. the three embedding batches.

    At coincident points the norm's subgradient 0 is used.
    """
    n = ea.shape[0]
    u_ab = ea - eb
    u_ac = ea - ec
    d_ab = np.linalg.norm(u_ab, axis=1)
    d_ac = np.linalg.norm(u_ac, axis=1)
    hinge = d_ab - d_ac + margin
    loss = float(np.maximum(0.0, hinge).mean())
    active = (hinge > 0).astype(np.float64) / n
    with np.errstate(invalid="ignore", divide="ignore"):
        g_ab = np.where(d_ab[:, None] > 0, u_ab / d_ab[:, None], 0.0) * active[:, None]
        g_ac = np.where(d_ac[:, None] > 0, u_ac / d_ac[:, None], 0.0) * active[:, None]
    return loss, g_ab - g_ac, -g_ab, g_ac


# ---------------------------------------------------------------------------
# triplet sampling and training
# ---------------------------------------------------------------------------

@dataclass
class TripletBatch:
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    anchor_idx: np.ndarray
    positive_idx: np.ndarray
    negative_idx: np.ndarray
    anchor_labels: np.ndarray
    negative_labels: np.ndarray


class TripletSampler:
    """Index bookkeeping for repeated triplet draws from one labelled set."""

    def __init__(self, labels):
        labels = np.asarray(labels)
        subjects, inverse = np.unique(labels, return_inverse=True)
        if len(subjects) < 2:
            raise ValidationError("triplet sampling needs at least 2 subjects")
        self.labels = labels
        self.members = [np.flatnonzero(inverse == s) for s in range(len(subjects))]
        self.eligible = np.array([s for s, m in enumerate(self.members) if len(m) >= 2])
        if self.eligible.size == 0:
            raise ValidationError("no subject has 2 views; cannot form anchor/positive pairs")
        self.n_subjects = len(subjects)
        self._flat = np.concatenate(self.members)
        self._start = np.cumsum([0] + [len(m) for m in self.members])[:-1]
        self._count = np.array([len(m) for m in self.members])

    def draw(self, batch_size: int, rng: np.random.Generator):
        subj = self.eligible[rng.integers(len(self.eligible), size=batch_size)]
        cnt = self._count[subj]
        i = rng.integers(cnt)
        j = rng.integers(cnt - 1)
        j = j + (j >= i)
        neg_subj = rng.integers(self.n_subjects - 1, size=batch_size)
        neg_subj = neg_subj + (neg_subj >= subj)
        k = rng.integers(self._count[neg_subj])
        start = self._start
        return (self._flat[start[subj] + i], self._flat[start[subj] + j],
                self._flat[start[neg_subj] + k])


def sample_triplets(features, labels, batch_size: int, rng: np.random.Generator) -> TripletBatch:
    """Draw ``batch_size`` triplets.

    The anchor subject is uniform over subjects with >= 2 views, anchor and
    positive are two distinct views of it, and the negative is a uniform view
    of a uniformly chosen other subject.
    """
    features = np.asarray(features)
    labels = np.asarray(labels)
    a, p, c = TripletSampler(labels).draw(batch_size, rng)
    return TripletBatch(features[a], features[p], features[c], a, p, c, labels[a], labels[c])


class Adam:
    def __init__(self, weights, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(w) for w in weights]
        self.v = [np.zeros_like(w) for w in weights]
        self.t = 0

    def step(self, weights, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for w, g, m, v in zip(weights, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            w -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, weights, lr):
        self.lr = lr

    def step(self, weights, grads):
        for w, g in zip(weights, grads):
            w -= self.lr * g


def make_optimizer(weights, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(weights, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    return SGD(weights, cfg.learning_rate)


def batch_loss_and_grads(model: EmbeddingModel, xa, xb, xc, margin: float):
    """Mean triplet loss of one batch and its gradient w.r.t. ``model.weights``.

    The three members are stacked and pushed through a single ``Network``, so
    all of them see the same parameter arrays.
    """
    n = len(xa)
    net = Network(model)
    emb = net.forward(np.concatenate([xa, xb, xc]), keep_cache=True)
    loss, ga, gb, gc = triplet_loss_grad(emb[:n], emb[n:2 * n], emb[2 * n:], margin)
    grads = net.backward(np.concatenate([ga, gb, gc]))
    return loss, grads


def indexed_loss_and_grads(model: EmbeddingModel, features, a, p, c, margin: float):
    """Like ``batch_loss_and_grads`` for triplets given as row indices.

    Each distinct row is embedded once and its gradient contributions are
    summed, which is exact and much cheaper when rows repeat within a batch.
    """
    n = len(a)
    uniq, inv = np.unique(np.concatenate([a, p, c]), return_inverse=True)
    net = Network(model)
    emb = net.forward(features[uniq], keep_cache=True)
    loss, ga, gb, gc = triplet_loss_grad(emb[inv[:n]], emb[inv[n:2 * n]], emb[inv[2 * n:]], margin)
    d_emb = np.zeros_like(emb)
    np.add.at(d_emb, inv, np.concatenate([ga, gb, gc]))
    return loss, net.backward(d_emb)


def train_siamese(features, labels, spec: NetworkSpec, cfg: TrainConfig,
                  model: Optional[EmbeddingModel] = None) -> EmbeddingModel:
    """Train a siamese embedding network on labelled training features.

    Each epoch runs ``ceil(n / batch_size)`` optimizer steps on freshly drawn
    triplets; ``train_log`` holds the mean batch loss of every epoch.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.shape[0] != labels.shape[0]:
        raise ValidationError("features and labels differ in length")
    if model is None:
        model = init_network(spec, seed=cfg.seed)
    else:
        model = model.copy()
    sampler = TripletSampler(labels)
    rng = np.random.default_rng([cfg.seed, 1])
    opt = make_optimizer(model.weights, cfg)
    n_batches = max(1, math.ceil(features.shape[0] / cfg.batch_size))
    for epoch in range(cfg.epochs):
        total = 0.0
        for b in range(n_batches):
            a, p, c = sampler.draw(cfg.batch_size, rng)
            loss, grads = indexed_loss_and_grads(model, features, a, p, c, cfg.margin)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            opt.step(model.weights, grads)
            if not all(np.all(np.isfinite(w)) for w in model.weights):
                raise TrainingError(f"non-finite weights after epoch {epoch}, batch {b}")
            total += loss
        model.train_log.append(total / n_batches)
        log.debug("epoch %d loss %.5f", epoch, model.train_log[-1])
    return model
