"""Feed-forward victim classifiers (fully connected and convolutional).

Gradients are composed by hand from the kernels in `numkernel`; there is no
autodiff tape. Models are plain parameter containers, so prediction and
input-gradient queries are pure functions of (model, input).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from . import modelio
from .dataio import Dataset, batches
from .errors import ShapeError, ValidationError

K_CLASSES = 10


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 5
    lr: float = 1e-3
    seed: int = 0
    momentum: float = 0.9

    def validate(self):
        if self.batch_size < 1 or self.epochs < 1 or self.lr <= 0:
            raise ValidationError(f"non-positive training config: {self}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError(f"momentum must be in [0,1), got {self.momentum}")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Dense:
    def __init__(self, w: np.ndarray, b: np.ndarray):
        self.w = w
        self.b = b

    @property
    def params(self):
        return [self.w, self.b]

    def forward(self, x):
        return x @ self.w + self.b, x

    def backward(self, gy, cache):
        x = cache
        return gy @ self.w.T, [x.T @ gy, gy.sum(axis=0)]


class Conv:
    def __init__(self, k: np.ndarray, b: np.ndarray, stride: int, padding: int):
        self.k = k
        self.b = b
        self.stride = stride
        self.padding = padding

    @property
    def params(self):
        return [self.k, self.b]

    def forward(self, x):
        y = nk.conv2d(x, self.k, self.stride, self.padding)
        return y + self.b[None, :, None, None], x

    def backward(self, gy, cache):
        gx, gk = nk.conv2d_backward(cache, self.k, gy, self.stride, self.padding)
        return gx, [gk, gy.sum(axis=(0, 2, 3))]


class ReLU:
    params: list = []

    def forward(self, x):
        return nk.relu(x), x

    def backward(self, gy, cache):
        return gy * nk.relu_deriv(cache), []


class MaxPool2:
    params: list = []

    def forward(self, x):
        y, idx = nk.maxpool2(x)
        return y, (idx, x.shape)

    def backward(self, gy, cache):
        idx, shape = cache
        return nk.maxpool2_backward(gy, idx, shape), []


class Flatten:
    params: list = []

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, gy, cache):
        return gy.reshape(cache), []


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


class FFModel:
    def __init__(self, arch_id: str, input_shape: tuple, layers: list):
        self.arch_id = arch_id
        self.input_shape = tuple(input_shape)  # (C, H, W)
        self.layers = layers
        self.k = K_CLASSES

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    def _as_batch(self, images: np.ndarray) -> np.ndarray:
        images = nk.as_f64(images)
        d = int(np.prod(self.input_shape))
        if images.ndim == 1 and images.size == d:
            images = images.reshape(self.input_shape)[None]
        elif images.shape == self.input_shape:
            images = images[None]
        elif images.ndim == 2 and images.shape[1] == d:
            images = images.reshape(-1, *self.input_shape)
        elif images.ndim == 4 and images.shape[1:] == self.input_shape:
            pass
        else:
            raise ShapeError(f"input {images.shape} does not match model shape {self.input_shape}")
        return images

    def forward(self, images: np.ndarray, want_caches: bool = False):
        x = self._as_batch(images)
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return (x, caches) if want_caches else x

    def backward(self, grad_logits: np.ndarray, caches: list):
        """Backprop grad_logits to the input; returns (grad_input, param_grads)."""
        g = grad_logits
        param_grads: list = []
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            g, grads = layer.backward(g, cache)
            param_grads = grads + param_grads
        return g, param_grads


# architecture table; CNN channel counts pick the documented flatten sizes
# (490 for the 28x28 stack, 4096 for the 32x32 stack)
def _arch_layers(arch_id: str, rng: np.random.Generator):
    def dense(n_in, n_out):
        return Dense(rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out)), np.zeros(n_out))

    def conv(c_in, c_out, k, stride, pad):
        fan_in = c_in * k * k
        return Conv(
            rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k)),
            np.zeros(c_out),
            stride,
            pad,
        )

    if arch_id == "mnist_fc":
        return (1, 28, 28), [Flatten(), dense(784, 50), ReLU(), dense(50, 20), ReLU(), dense(20, 10)]
    if arch_id == "cifar_fc":
        return (3, 32, 32), [Flatten(), dense(3072, 512), ReLU(), dense(512, 10)]
    if arch_id == "mnist_cnn":
        return (1, 28, 28), [
            conv(1, 5, 5, 1, 2), ReLU(), MaxPool2(),
            conv(5, 10, 5, 1, 2), ReLU(), MaxPool2(),
            Flatten(), dense(490, 32), ReLU(), dense(32, 10),
        ]
    if arch_id == "cifar_cnn":
        return (3, 32, 32), [
            conv(3, 16, 3, 1, 1), ReLU(),
            conv(16, 16, 3, 1, 1), ReLU(), MaxPool2(),
            Flatten(), dense(4096, 512), ReLU(), dense(512, 10),
        ]
    raise ValidationError(f"unknown ffnet arch {arch_id!r}")


ARCH_IDS = ("mnist_fc", "mnist_cnn", "cifar_fc", "cifar_cnn")


def build(arch_id: str, seed: int = 0) -> FFModel:
    """Construct a victim model with seeded scaled-Gaussian init."""
    rng = np.random.default_rng(seed)
    input_shape, layers = _arch_layers(arch_id, rng)
    return FFModel(arch_id, input_shape, layers)


def predict(model: FFModel, images: np.ndarray):
    """Argmax-of-softmax labels plus the probability rows (ties -> smallest)."""
    logits = model.forward(images)
    probs = nk.softmax(logits)
    return logits.argmax(axis=1), probs


def input_grad(model: FFModel, image: np.ndarray, target_onehot: np.ndarray) -> np.ndarray:
    """d(cross-entropy)/d(pixels) for one image or a batch (per-sample)."""
    batch = model._as_batch(image)
    t = nk.as_f64(target_onehot).reshape(batch.shape[0], model.k)
    logits, caches = model.forward(batch, want_caches=True)
    _, grad_logits = nk.softmax_xent(logits, t)
    gx, _ = model.backward(grad_logits, caches)
    if np.ndim(image) <= 3 and batch.shape[0] == 1:
        return gx[0].reshape(np.shape(image))
    return gx


def loss_and_param_grads(model: FFModel, images, labels):
    logits, caches = model.forward(images, want_caches=True)
    loss, grad_logits = nk.batch_xent(logits, labels)
    _, pgrads = model.backward(grad_logits, caches)
    return loss, pgrads, logits


def train(model: FFModel, ds: Dataset, cfg: TrainConfig) -> list[dict]:
    """Minibatch SGD (optional momentum) on softmax cross-entropy."""
    cfg.validate()
    if ds.images.shape[1:] != model.input_shape:
        raise ShapeError(f"dataset {ds.images.shape[1:]} vs model {model.input_shape}")
    params = model.parameters()
    velocity = [np.zeros_like(p) for p in params]
    log = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        total_loss = 0.0
        total_correct = 0
        total_n = 0
        for images, labels in batches(ds, cfg.batch_size, cfg.seed + 7919 * epoch):
            loss, pgrads, logits = loss_and_param_grads(model, images, labels)
            for p, v, g in zip(params, velocity, pgrads):
                if cfg.momentum > 0.0:
                    v *= cfg.momentum
                    v += g
                    p -= cfg.lr * v
                else:
                    p -= cfg.lr * g
            total_loss += loss * len(labels)
            total_correct += int((logits.argmax(axis=1) == labels).sum())
            total_n += len(labels)
        log.append(
            {
                "epoch": epoch,
                "loss": total_loss / total_n,
                "accuracy": total_correct / total_n,
                "elapsed_s": time.perf_counter() - t0,
            }
        )
    return log


def accuracy(model: FFModel, ds: Dataset, chunk: int = 512) -> float:
    correct = 0
    for start in range(0, len(ds), chunk):
        lab, _ = predict(model, ds.images[start : start + chunk])
        correct += int((lab == ds.labels[start : start + chunk]).sum())
    return correct / len(ds)


def save(model: FFModel, path):
    tensors = {}
    for i, layer in enumerate(model.layers):
        for j, p in enumerate(layer.params):
            tensors[f"layer{i}.p{j}"] = p
    extra = {"input_shape": list(model.input_shape)}
    modelio.save_model(path, kind="ffnet", arch=model.arch_id, tensors=tensors, extra=extra)


def load(path, arch_id: str | None = None) -> FFModel:
    arch, tensors, _ = modelio.load_model(path, expect_kind="ffnet", expect_arch=arch_id)
    model = build(arch, seed=0)
    for i, layer in enumerate(model.layers):
        for j in range(len(layer.params)):
            src = tensors[f"layer{i}.p{j}"]
            layer.params[j][...] = src
    return model
