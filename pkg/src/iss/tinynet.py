"""Small numpy classifiers with hand-written backpropagation.

Three architectures are supported: a linear softmax classifier, a ReLU MLP and
a small CNN (3x3 same-padded convolutions, one 2x2 max-pool, one dense
layer).  Parameters live in one flat vector; per-layer views are cut from it
according to a layout derived from the architecture.  The parameter dtype is
the compute dtype.
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dataset import LabeledDataset, to_byte, to_unit
from .imageops import CompressionOp, apply_op, augment_batch


class NumericalError(ArithmeticError):
    pass


class TrainingFailure(NumericalError):
    def __init__(self, epoch: int, message: str = "loss became non-finite"):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Architecture:
    kind: str = "mlp"  # linear | mlp | cnn
    hidden: tuple[int, ...] = (256,)
    conv_channels: tuple[int, ...] = (8, 16)
    input_shape: tuple[int, int, int] = (32, 32, 3)
    num_classes: int = 10

    def __post_init__(self):
        if self.kind not in ("linear", "mlp", "cnn"):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.kind == "mlp" and (not self.hidden or min(self.hidden) <= 0):
            raise ValueError("MLP hidden sizes must be positive")
        if self.kind == "cnn":
            if not self.conv_channels or min(self.conv_channels) <= 0:
                raise ValueError("conv channel counts must be positive")
            h, w, _ = self.input_shape
            if h % 2 or w % 2:
                raise ValueError("cnn input height and width must be even for the 2x2 pool")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "hidden": list(self.hidden),
            "conv_channels": list(self.conv_channels),
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(
            kind=d["kind"],
            hidden=tuple(d.get("hidden", (256,))),
            conv_channels=tuple(d.get("conv_channels", (8, 16))),
            input_shape=tuple(d.get("input_shape", (32, 32, 3))),
            num_classes=int(d.get("num_classes", 10)),
        )


LINEAR = Architecture("linear")
MLP = Architecture("mlp", hidden=(256,))
SMALL_CNN = Architecture("cnn", conv_channels=(8, 16))


@dataclass(frozen=True)
class Layer:
    name: str
    kind: str  # dense | conv
    w_shape: tuple[int, ...]
    offset: int

    @property
    def w_size(self) -> int:
        return math.prod(self.w_shape)

    @property
    def b_size(self) -> int:
        return self.w_shape[-1]

    @property
    def size(self) -> int:
        return self.w_size + self.b_size

    @property
    def fan_in(self) -> int:
        return math.prod(self.w_shape[:-1])


def layout(arch: Architecture) -> list[Layer]:
    h, w, c = arch.input_shape
    layers, offset = [], 0

    def add(name, kind, shape):
        nonlocal offset
        layer = Layer(name, kind, tuple(shape), offset)
        layers.append(layer)
        offset += layer.size

    if arch.kind == "linear":
        add("fc", "dense", (h * w * c, arch.num_classes))
    elif arch.kind == "mlp":
        prev = h * w * c
        for i, units in enumerate(arch.hidden):
            add(f"fc{i}", "dense", (prev, units))
            prev = units
        add("out", "dense", (prev, arch.num_classes))
    else:
        prev = c
        for i, ch in enumerate(arch.conv_channels):
            add(f"conv{i}", "conv", (3, 3, prev, ch))
            prev = ch
        add("out", "dense", ((h // 2) * (w // 2) * prev, arch.num_classes))
    return layers


def param_count(arch: Architecture) -> int:
    last = layout(arch)[-1]
    return last.offset + last.size


@dataclass(frozen=True)
class TinyModel:
    arch: Architecture
    params: np.ndarray
    epoch: int | None = None

    def __post_init__(self):
        p = np.asarray(self.params)
        if p.ndim != 1 or p.size != param_count(self.arch):
            raise ShapeError(f"expected {param_count(self.arch)} parameters, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            raise NumericalError("model parameters must be finite")

    @property
    def layers(self) -> list[Layer]:
        return layout(self.arch)

    def weights(self, layer: Layer, params: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        p = self.params if params is None else params
        w = p[layer.offset : layer.offset + layer.w_size].reshape(layer.w_shape)
        b = p[layer.offset + layer.w_size : layer.offset + layer.size]
        return w, b


def init_model(arch: Architecture, seed: int = 0, dtype=np.float64) -> TinyModel:
    """He-normal weights for layers followed by ReLU, LeCun-normal for the output layer, zero biases."""
    rng = np.random.default_rng(seed)
    layers = layout(arch)
    params = np.zeros(param_count(arch), dtype=np.float64)
    for i, layer in enumerate(layers):
        gain = 1.0 if i == len(layers) - 1 else 2.0
        std = math.sqrt(gain / layer.fan_in)
        params[layer.offset : layer.offset + layer.w_size] = rng.normal(0.0, std, layer.w_size)
    return TinyModel(arch, params.astype(dtype), epoch=0)


def zeros_model(arch: Architecture, dtype=np.float64) -> TinyModel:
    return TinyModel(arch, np.zeros(param_count(arch), dtype=dtype), epoch=0)


def checkpoint(model: TinyModel, epoch: int) -> TinyModel:
    """Immutable deep copy of ``model`` tagged with ``epoch``."""
    p = np.array(model.params, copy=True)
    p.flags.writeable = False
    return TinyModel(model.arch, p, epoch=epoch)


# --- forward / backward -----------------------------------------------------------

def _check_batch(model: TinyModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if tuple(x.shape[1:]) != model.arch.input_shape:
        raise ShapeError(f"batch shape {x.shape[1:]} does not match {model.arch.input_shape}")
    if x.dtype == np.uint8:
        x = to_unit(x)
    return x.astype(model.params.dtype, copy=False)


def _im2col(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2))  # n, h, w, c, 3, 3
    return cols.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, 9 * c)


def _col2im(dcols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    n, h, w, c = shape
    d = dcols.reshape(n, h, w, 3, 3, c)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    for di in range(3):
        for dj in range(3):
            dxp[:, di : di + h, dj : dj + w, :] += d[:, :, :, di, dj, :]
    return dxp[:, 1:-1, 1:-1, :]


def _forward(model: TinyModel, x: np.ndarray):
    """Return logits and the cache needed by ``_backward``."""
    cache = []
    layers = model.layers
    a = x
    for i, layer in enumerate(layers):
        w, b = model.weights(layer)
        last = i == len(layers) - 1
        if layer.kind == "conv":
            n, h, wd, _ = a.shape
            cols = _im2col(a)
            z = (cols @ w.reshape(-1, w.shape[-1]) + b).reshape(n, h, wd, -1)
            out = np.maximum(z, 0.0)
            cache.append(("conv", a.shape, cols, z))
            a = out
            if layers[i + 1].kind == "dense":
                r = a.reshape(n, h // 2, 2, wd // 2, 2, a.shape[-1])
                win = r.transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, wd // 2, a.shape[-1], 4)
                arg = win.argmax(axis=-1)
                cache.append(("pool", a.shape, arg))
                a = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        else:
            flat_shape = a.shape
            a2 = a.reshape(len(a), -1)
            z = a2 @ w + b
            cache.append(("dense", flat_shape, a2, z, last))
            a = z if last else np.maximum(z, 0.0)
    return a, cache


def _backward(model: TinyModel, cache, dlogits: np.ndarray, want_params: bool = True):
    grads = np.zeros_like(model.params) if want_params else None
    layers = model.layers
    li = len(layers) - 1
    g = dlogits
    for entry in reversed(cache):
        if entry[0] == "dense":
            _, in_shape, a2, z, last = entry
            layer = layers[li]
            w, _ = model.weights(layer)
            if not last:
                g = g * (z > 0)
            if want_params:
                grads[layer.offset : layer.offset + layer.w_size] = (a2.T @ g).ravel()
                grads[layer.offset + layer.w_size : layer.offset + layer.size] = g.sum(axis=0)
            g = (g @ w.T).reshape(in_shape)
            li -= 1
        elif entry[0] == "pool":
            _, in_shape, arg = entry
            n, h, w_, c = in_shape
            win = np.zeros((n, h // 2, w_ // 2, c, 4), dtype=g.dtype)
            np.put_along_axis(win, arg[..., None], g[..., None], axis=-1)
            g = win.reshape(n, h // 2, w_ // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(in_shape)
        else:
            _, in_shape, cols, z = entry
            layer = layers[li]
            w, _ = model.weights(layer)
            g = g * (z > 0)
            g2 = g.reshape(-1, g.shape[-1])
            if want_params:
                grads[layer.offset : layer.offset + layer.w_size] = (cols.T @ g2).ravel()
                grads[layer.offset + layer.w_size : layer.offset + layer.size] = g2.sum(axis=0)
            g = _col2im(g2 @ w.reshape(-1, w.shape[-1]).T, in_shape)
            li -= 1
    return grads, g


def forward(model: TinyModel, x: np.ndarray) -> np.ndarray:
    """Logits, one row per example."""
    logits, _ = _forward(model, _check_batch(model, x))
    return logits


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _targets(labels, k: int, dtype) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim == 1 and np.issubdtype(y.dtype, np.integer):
        if y.size and (y.min() < 0 or y.max() >= k):
            raise ValueError(f"labels must lie in [0, {k})")
        out = np.zeros((len(y), k), dtype=dtype)
        out[np.arange(len(y)), y] = 1.0
        return out
    return y.astype(dtype, copy=False)


def cross_entropy(logits: np.ndarray, labels) -> float:
    q = _targets(labels, logits.shape[-1], logits.dtype)
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return float(-(q * logp).sum(axis=-1).mean())


def loss_and_grads(
    model: TinyModel,
    x: np.ndarray,
    labels,
    want_params: bool = True,
    per_example: bool = False,
):
    """Mean softmax cross-entropy with parameter and input gradients.

    ``labels`` may be integer class ids or soft label rows.  Returns
    ``(loss, param_grads, input_grads)``; ``param_grads`` is None when
    ``want_params`` is false.  With ``per_example`` the input gradient is that
    of the per-example loss (the batch mean's gradient times N), which is what
    per-image PGD wants.
    """
    xb = _check_batch(model, x)
    logits, cache = _forward(model, xb)
    q = _targets(labels, logits.shape[-1], logits.dtype)
    z = logits - logits.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    loss = float(-(q * (z - logsum)).sum(axis=-1).mean())
    if not math.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss}")
    n = len(xb)
    dlogits = (np.exp(z - logsum) - q) / n
    grads, gin = _backward(model, cache, dlogits, want_params)
    if per_example:
        gin = gin * n
    return loss, grads, gin


def predict(model: TinyModel, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
    out = []
    for i in range(0, len(x), batch_size):
        out.append(forward(model, x[i : i + batch_size]).argmax(axis=-1))
    return np.concatenate(out) if out else np.empty(0, np.int64)


# --- training ----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 128
    lr: float = 0.025
    momentum: float = 0.9
    lr_schedule: str = "cosine"  # constant | cosine
    weight_decay: float = 5e-4
    seed: int = 0
    augment: str | None = None  # cutout | cutmix | mixup
    preprocess: CompressionOp | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.augment not in (None, "cutout", "cutmix", "mixup"):
            raise ValueError(f"unknown augmentation {self.augment!r}")

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / self.epochs))

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "momentum": self.momentum,
            "lr_schedule": self.lr_schedule,
            "weight_decay": self.weight_decay,
            "seed": self.seed,
            "augment": self.augment,
            "preprocess": None if self.preprocess is None else str(self.preprocess),
        }


class SGD:
    """Heavy-ball SGD with coupled L2 weight decay on a flat parameter vector."""

    def __init__(self, model: TinyModel, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.arch = model.arch
        self.params = np.array(model.params, copy=True)
        self.velocity = np.zeros_like(self.params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay

    @property
    def model(self) -> TinyModel:
        return TinyModel(self.arch, self.params)

    def step(self, x: np.ndarray, labels) -> float:
        loss, grads, _ = loss_and_grads(self.model, x, labels)
        if self.weight_decay:
            grads += self.weight_decay * self.params
        self.velocity *= self.momentum
        self.velocity += grads
        self.params -= self.lr * self.velocity
        return loss


class Checkpointer:
    """Collects immutable snapshots at the requested epochs during ``train``."""

    def __init__(self, epochs: Iterable[int]):
        self.epochs = sorted(set(int(e) for e in epochs))
        self.snapshots: dict[int, TinyModel] = {}

    def __call__(self, epoch: int, model: TinyModel) -> None:
        if epoch in self.epochs:
            self.snapshots[epoch] = checkpoint(model, epoch)

    def ordered(self) -> list[TinyModel]:
        return [self.snapshots[e] for e in self.epochs if e in self.snapshots]


def prepare_inputs(images: np.ndarray, preprocess: CompressionOp | None, dtype) -> np.ndarray:
    """Apply a countermeasure to Byte images, then map to the Unit domain."""
    if preprocess is not None:
        images = apply_op(preprocess, to_byte(images))
    return to_unit(images, dtype=dtype)


def pgd_linf(
    model: TinyModel,
    x: np.ndarray,
    labels,
    eps: float,
    steps: int,
    step_size: float,
    direction: int = 1,
    delta: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    transform=None,
    trace: list | None = None,
) -> np.ndarray:
    """Sign-gradient PGD inside the L-inf ball of radius ``eps`` (Unit scale).

    ``direction=+1`` ascends the loss, ``-1`` descends it.  ``delta`` warm
    starts the search; otherwise ``rng`` (if given) draws a uniform random
    start.  ``transform`` is an optional differentiable map applied to the
    perturbed input, given as an object with ``forward`` and ``backward``.
    Returns the perturbation such that ``x + delta`` lies in ``[0, 1]``.
    """
    x = np.asarray(x, dtype=model.params.dtype)
    if delta is not None:
        d = np.array(delta, dtype=x.dtype, copy=True)
    elif rng is not None:
        d = rng.uniform(-eps, eps, size=x.shape).astype(x.dtype)
    else:
        d = np.zeros_like(x)
    d = np.clip(np.clip(d, -eps, eps) + x, 0.0, 1.0) - x
    for _ in range(steps):
        z = x + d
        zin = transform.forward(z) if transform is not None else z
        loss, _, g = loss_and_grads(model, zin, labels, want_params=False, per_example=True)
        if trace is not None:
            trace.append(loss)
        if transform is not None:
            g = transform.backward(g)
        d = d + direction * step_size * np.sign(g)
        d = np.clip(d, -eps, eps)
        d = np.clip(x + d, 0.0, 1.0) - x
    if trace is not None:
        zin = transform.forward(x + d) if transform is not None else x + d
        trace.append(cross_entropy(forward(model, zin), labels))
    return d


def train(
    model: TinyModel,
    ds: LabeledDataset,
    cfg: TrainConfig,
    checkpointer: Callable[[int, TinyModel], None] | None = None,
    adversary: dict | None = None,
) -> TinyModel:
    """Mini-batch SGD with momentum on ``ds`` after applying ``cfg.preprocess``.

    ``adversary`` (``eps``, ``steps``, ``step_size`` in Byte scale) swaps each
    batch for L-inf PGD examples before the update.
    """
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    dtype = model.params.dtype
    x_all = prepare_inputs(ds.images, cfg.preprocess, dtype)
    y_all = ds.labels
    opt = SGD(model, cfg.lr, cfg.momentum, cfg.weight_decay)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    aug_rng = np.random.default_rng([cfg.seed, 2])
    adv_rng = np.random.default_rng([cfg.seed, 3])
    if checkpointer is not None:
        checkpointer(0, opt.model)
    n = len(ds)
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        order = shuffle_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            if cfg.augment:
                xb, yb = augment_batch(xb, yb, cfg.augment, aug_rng, model.arch.num_classes)
                xb = xb.astype(dtype, copy=False)
            if adversary is not None:
                eps = adversary["eps"] / 255.0
                delta = pgd_linf(
                    opt.model, xb, yb, eps, adversary["steps"], adversary["step_size"] / 255.0,
                    direction=1, rng=adv_rng,
                )
                xb = xb + delta
            try:
                loss = opt.step(xb, yb)
            except NumericalError as exc:
                raise TrainingFailure(epoch, str(exc)) from exc
            if not math.isfinite(loss) or not np.all(np.isfinite(opt.params)):
                raise TrainingFailure(epoch)
        if checkpointer is not None:
            checkpointer(epoch + 1, opt.model)
    return TinyModel(model.arch, opt.params, epoch=(model.epoch or 0) + cfg.epochs)


def adversarial_train(
    model: TinyModel,
    ds: LabeledDataset,
    cfg: TrainConfig,
    eps: float = 8.0,
    steps: int = 10,
    step_size: float = 2.0,
    checkpointer=None,
) -> TinyModel:
    """PGD adversarial training; ``eps`` and ``step_size`` in Byte scale."""
    if eps < 0 or steps < 1:
        raise ValueError("need eps >= 0 and steps >= 1")
    return train(model, ds, cfg, checkpointer, adversary={"eps": eps, "steps": steps, "step_size": step_size})


def evaluate(model: TinyModel, ds: LabeledDataset, preprocess: CompressionOp | None = None) -> float:
    """Fraction of examples whose arg-max prediction equals the label."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    x = prepare_inputs(ds.images, preprocess, model.params.dtype)
    return float(np.mean(predict(model, x) == ds.labels))


# --- ITM1 -------------------------------------------------------------------------
# magic "ITM1", u32 descriptor length, JSON descriptor, u8 compute dtype,
# u64 parameter count, f64 parameters, i32 epoch tag (-1 when absent).

_ITM1_MAGIC = b"ITM1"
_DTYPES = {0: np.float64, 1: np.float32}


def save_model(path: str | os.PathLike, model: TinyModel) -> None:
    desc = json.dumps(model.arch.to_dict(), sort_keys=True).encode()
    tag = 1 if model.params.dtype == np.float32 else 0
    with open(path, "wb") as f:
        f.write(_ITM1_MAGIC)
        f.write(struct.pack("<I", len(desc)))
        f.write(desc)
        f.write(struct.pack("<BQ", tag, model.params.size))
        f.write(np.asarray(model.params, dtype="<f8").tobytes())
        f.write(struct.pack("<i", -1 if model.epoch is None else model.epoch))


def load_model(path: str | os.PathLike) -> TinyModel:
    from .dataset import MalformedFileError

    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _ITM1_MAGIC:
        raise MalformedFileError(f"{path}: not an ITM1 file")
    (dlen,) = struct.unpack_from("<I", blob, 4)
    pos = 8 + dlen
    arch = Architecture.from_dict(json.loads(blob[8:pos]))
    tag, count = struct.unpack_from("<BQ", blob, pos)
    pos += 9
    if tag not in _DTYPES or len(blob) != pos + 8 * count + 4:
        raise MalformedFileError(f"{path}: inconsistent ITM1 payload")
    params = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).astype(_DTYPES[tag])
    (epoch,) = struct.unpack_from("<i", blob, pos + 8 * count)
    return TinyModel(arch, params, epoch=None if epoch < 0 else epoch)
