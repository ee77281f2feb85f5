"""Perturbative availability poisons.

Surrogate-free class-wise poisons (LSP, AR, OPS), surrogate-based PGD poisons
(error-minimizing EM and HYPO, targeted adversarial TAP), epoch-swept
error-min/max poisons and composites.  Perturbations are Unit-scale float64
tensors ``(N, H, W, C)``.  L-inf budgets are quoted in Byte levels, L2
budgets on the flattened Unit-scale vector, L0 budgets in pixel positions.
"""
from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dataset import LabeledDataset, read_itf1, to_byte, to_unit, write_itf1
from .tinynet import (
    MLP,
    SGD,
    Architecture,
    ShapeError,
    TinyModel,
    TrainConfig,
    cross_entropy,
    forward,
    init_model,
    pgd_linf,
    predict,
)

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


class PoisonWarning(UserWarning):
    pass


@dataclass
class Perturbation:
    deltas: np.ndarray
    norm: str  # linf | l2 | l0
    eps: float
    method: str
    surrogate_epoch: int | None = None
    seed: int | None = None
    class_deltas: np.ndarray | None = None
    meta: dict = field(default_factory=dict)
    surrogate: TinyModel | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.deltas)

    def budget_ok(self, tol: float = 1e-9) -> np.ndarray:
        """Per-image check of the norm bound."""
        return budget_ok(self.deltas, self.norm, self.eps, tol)

    def sidecar(self) -> dict:
        return {
            "method": self.method,
            "norm": self.norm,
            "eps": self.eps,
            "seed": self.seed,
            "surrogateEpoch": self.surrogate_epoch,
            "count": len(self),
            "meta": self.meta,
        }

    def transfer(self, ds: LabeledDataset) -> "Perturbation":
        """Class-wise perturbation for another dataset by the same per-class rule."""
        if self.class_deltas is not None:
            deltas = self.class_deltas[ds.labels]
        elif "class_pixels" in self.meta:
            deltas = _ops_deltas(to_unit(ds.images), ds.labels, self.meta["class_pixels"])
        else:
            raise ValueError(f"{self.method} perturbations are per-image; regenerate them for new data")
        return replace(self, deltas=deltas)


def budget_ok(deltas: np.ndarray, norm: str, eps: float, tol: float = 1e-9) -> np.ndarray:
    d = np.asarray(deltas, dtype=np.float64)
    flat = d.reshape(len(d), -1)
    if norm == "linf":
        return np.abs(flat).max(axis=1) <= eps / 255.0 + tol
    if norm == "l2":
        return np.linalg.norm(flat, axis=1) <= eps + tol
    if norm == "l0":
        return changed_positions(d) <= eps
    raise ValueError(f"unknown norm {norm!r}")


def changed_positions(deltas: np.ndarray) -> np.ndarray:
    """Number of pixel positions (any channel) with a nonzero change, per image."""
    return np.any(np.asarray(deltas) != 0, axis=-1).reshape(len(deltas), -1).sum(axis=1)


def apply_perturbation(ds: LabeledDataset, pert: Perturbation) -> LabeledDataset:
    """Add deltas to the flagged images, clamp to [0, 1] and store as Byte.

    Images whose poison mask is false are left untouched.
    """
    if len(pert) != len(ds):
        raise ShapeError(f"{len(pert)} deltas for {len(ds)} images")
    mask = ds.poison_mask.reshape(-1, 1, 1, 1)
    x = to_unit(ds.images) + np.where(mask, pert.deltas, 0.0)
    return ds.with_images(to_byte(np.clip(x, 0.0, 1.0)))


# --- surrogate-free ------------------------------------------------------------

def _upsample(grid: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(grid, factor, axis=-3), factor, axis=-2)


def _scale_l2(d: np.ndarray, eps: float) -> np.ndarray:
    return d * (eps / np.linalg.norm(d))


def _classwise(ds: LabeledDataset, class_deltas: np.ndarray, **kw) -> Perturbation:
    return Perturbation(deltas=class_deltas[ds.labels], class_deltas=class_deltas, **kw)


def lsp(ds: LabeledDataset, patch_size: int = 8, eps: float = 1.0, seed: int = 0) -> Perturbation:
    """Class-wise Gaussian patches, nearest-neighbour upsampled, L2-normalized to ``eps``."""
    h, w, c = ds.shape
    if patch_size <= 0 or h % patch_size or w % patch_size:
        raise ValueError(f"patch size {patch_size} must divide {h}x{w}")
    rng = np.random.default_rng(seed)
    grids = rng.standard_normal((ds.num_classes, h // patch_size, w // patch_size, c))
    class_deltas = np.stack([_scale_l2(_upsample(g, patch_size), eps) for g in grids])
    return _classwise(ds, class_deltas, norm="l2", eps=eps, method="lsp", seed=seed,
                      meta={"patch_size": patch_size})


def lsp_adaptive(ds: LabeledDataset, eps: float = 1.0, seed: int = 0) -> Perturbation:
    """LSP with 16x16 patches and one sample shared by all channels."""
    h, w, c = ds.shape
    if (h, w, c) != (32, 32, 3):
        raise ValueError("adaptive LSP is defined for 32x32x3 images")
    rng = np.random.default_rng(seed)
    grids = rng.standard_normal((ds.num_classes, 2, 2, 1))
    class_deltas = np.stack([
        _scale_l2(np.repeat(_upsample(g, 16), 3, axis=-1), eps) for g in grids
    ])
    return _classwise(ds, class_deltas, norm="l2", eps=eps, method="lsp_adaptive", seed=seed,
                      meta={"patch_size": 16})


# causal 3x3 window with the current pixel at its bottom-right corner
_AR_OFFSETS = [(di, dj) for di in (-2, -1, 0) for dj in (-2, -1, 0) if (di, dj) != (0, 0)]


def ar_coefficients(rng: np.random.Generator) -> np.ndarray:
    """Eight causal coefficients summing to a value drawn uniformly from [-1, 1]."""
    total = rng.uniform(-1.0, 1.0)
    raw = rng.uniform(-1.0, 1.0, size=len(_AR_OFFSETS))
    return raw - raw.mean() + total / len(_AR_OFFSETS)


def ar_process(coef: np.ndarray, h: int, w: int, rng: np.random.Generator, noise: float = 0.1) -> np.ndarray:
    """Run the 2-D recurrence; the first two rows and columns are N(0, 1) seeds."""
    x = np.zeros((h, w))
    x[:2, :] = rng.standard_normal((2, w))
    x[:, :2] = rng.standard_normal((h, 2))
    innov = rng.normal(0.0, noise, size=(h, w))
    for i in range(2, h):
        for j in range(2, w):
            acc = innov[i, j]
            for (di, dj), a in zip(_AR_OFFSETS, coef):
                acc += a * x[i + di, j + dj]
            x[i, j] = acc
    return x


def ar(ds: LabeledDataset, eps: float = 1.0, seed: int = 0, noise: float = 0.1) -> Perturbation:
    """Class-wise autoregressive texture, one process per class and channel."""
    h, w, c = ds.shape
    if c != 3:
        raise ValueError("AR poisons are defined for 3-channel images")
    rng = np.random.default_rng(seed)
    class_deltas, coefs = [], []
    for _ in range(ds.num_classes):
        while True:
            cc = [ar_coefficients(rng) for _ in range(c)]
            d = np.stack([ar_process(k, h, w, rng, noise) for k in cc], axis=-1)
            n = np.linalg.norm(d)
            if np.isfinite(n) and n > 0:
                break
        class_deltas.append(d / n * eps)
        coefs.append([k.tolist() for k in cc])
    return _classwise(ds, np.stack(class_deltas), norm="l2", eps=eps, method="ar", seed=seed,
                      meta={"coefficients": coefs})


def ops_scores(images: np.ndarray) -> np.ndarray:
    """Score of every (position, value) candidate for one class.

    ``images`` is ``(n, H, W, C)`` in the Unit domain.  Returns ``(H*W, 2)``
    scores for setting the position to black (column 0) or white (column 1):
    mean absolute change minus the in-class standard deviation, averaged over
    channels.
    """
    x = images.reshape(len(images), -1, images.shape[-1])
    std = x.std(axis=0)
    scores = []
    for v in (0.0, 1.0):
        scores.append((np.abs(v - x).mean(axis=0) - std).mean(axis=-1))
    return np.stack(scores, axis=-1)


def _ops_deltas(x: np.ndarray, labels: np.ndarray, class_pixels: Sequence) -> np.ndarray:
    n, h, w, c = x.shape
    deltas = np.zeros_like(x, dtype=np.float64)
    for cls, (pos, value) in enumerate(class_pixels):
        idx = np.flatnonzero(labels == cls)
        i, j = divmod(pos, w)
        deltas[idx, i, j, :] = value / 255.0 - x[idx, i, j, :]
    return deltas


def ops(ds: LabeledDataset) -> Perturbation:
    """One-pixel shortcut: one extreme-valued pixel per class.

    Each class takes the highest scoring (position, value) pair, ties broken
    by lowest row-major position then value 0 before 255; a pair already used
    by an earlier class is skipped in favour of the next best.
    """
    x = to_unit(ds.images)
    _, h, w, _ = x.shape
    taken, class_pixels, best_scores = set(), [], []
    for cls in range(ds.num_classes):
        members = x[ds.labels == cls]
        if len(members) == 0:
            raise ValueError(f"class {cls} has no images")
        flat = ops_scores(members).ravel()  # index = pos * 2 + value_idx
        order = np.argsort(-flat, kind="stable")
        for k in order:
            pos, vi = divmod(int(k), 2)
            if (pos, vi) not in taken:
                break
        taken.add((pos, vi))
        class_pixels.append((pos, 255 * vi))
        best_scores.append(float(flat[k]))
    deltas = _ops_deltas(x, ds.labels, class_pixels)
    return Perturbation(deltas, norm="l0", eps=1, method="ops",
                        meta={"class_pixels": class_pixels, "scores": best_scores})


# --- surrogate-based ---------------------------------------------------------------

@dataclass(frozen=True)
class PoisonBudget:
    norm: str = "linf"
    eps: float = 8.0
    pgd_steps: int = 20
    pgd_step_size: float | None = None  # Byte scale; defaults to eps / 10
    outer_iters: int = 30
    stop_loss: float = 0.05

    def __post_init__(self):
        if self.eps < 0 or self.pgd_steps < 0 or self.outer_iters < 1 or self.stop_loss <= 0:
            raise ValueError("budget fields must be positive")

    @property
    def step(self) -> float:
        return (self.eps / 10.0 if self.pgd_step_size is None else self.pgd_step_size) / 255.0

    @property
    def radius(self) -> float:
        return self.eps / 255.0


class LuminanceMap:
    """Differentiable grayscale: luminance copied to all channels, no rounding."""

    def forward(self, z: np.ndarray) -> np.ndarray:
        lum = z @ LUMA_WEIGHTS.astype(z.dtype)
        return np.repeat(lum[..., None], 3, axis=-1)

    def backward(self, g: np.ndarray) -> np.ndarray:
        return g.sum(axis=-1, keepdims=True) * LUMA_WEIGHTS.astype(g.dtype)


def _check_surrogate(model: TinyModel, ds: LabeledDataset) -> None:
    if model.arch.input_shape != ds.shape:
        raise ShapeError(f"surrogate expects {model.arch.input_shape}, data is {ds.shape}")


def _chunked_pgd(model, x, targets, budget, direction, delta=None, transform=None, chunk=1000):
    out = np.zeros_like(x) if delta is None else delta
    for i in range(0, len(x), chunk):
        s = slice(i, i + chunk)
        out[s] = pgd_linf(
            model, x[s], targets[s], budget.radius, budget.pgd_steps, budget.step,
            direction=direction, delta=None if delta is None else delta[s], transform=transform,
        )
    return out


def _finalize(deltas: np.ndarray, ds: LabeledDataset, budget: PoisonBudget) -> np.ndarray:
    """Re-project low-precision PGD output onto the budget in float64."""
    x = to_unit(ds.images)
    d = np.clip(deltas.astype(np.float64), -budget.radius, budget.radius)
    return np.clip(x + d, 0.0, 1.0) - x


def mean_loss(model: TinyModel, x: np.ndarray, labels: np.ndarray, transform=None, chunk: int = 1000) -> float:
    total = 0.0
    for i in range(0, len(x), chunk):
        xb = x[i : i + chunk]
        if transform is not None:
            xb = transform.forward(xb)
        total += cross_entropy(forward(model, xb), labels[i : i + chunk]) * len(xb)
    return total / len(x)


def error_min_poison(
    ds: LabeledDataset,
    surrogate: TinyModel | TrainConfig | None = None,
    budget: PoisonBudget = PoisonBudget(),
    mode: str = "em",
    adaptive_gray: bool = False,
    arch: Architecture = MLP,
    seed: int = 0,
    train_steps_per_round: int = 10,
    dtype=np.float32,
) -> Perturbation:
    """Error-minimizing noise.

    ``mode="em"`` alternates a few surrogate SGD steps on the current poisoned
    data with per-image PGD descent on the true-label loss, until the mean
    loss drops below ``budget.stop_loss`` or ``budget.outer_iters`` rounds
    pass.  The surrogate starts from scratch (seeded) unless a model is given.
    ``mode="hypo"`` runs only the PGD phase against a fixed, given surrogate.
    With ``adaptive_gray`` both phases see the luminance-mapped input.
    """
    if budget.norm != "linf":
        raise ValueError("error-minimizing poisons use an L-inf budget")
    transform = LuminanceMap() if adaptive_gray else None
    method = ("hypo" if mode == "hypo" else "em") + ("_gray" if adaptive_gray else "")
    if mode == "hypo":
        if not isinstance(surrogate, TinyModel):
            raise ValueError("hypo mode needs a trained surrogate model")
        _check_surrogate(surrogate, ds)
        x = to_unit(ds.images, surrogate.params.dtype)
        deltas = _chunked_pgd(surrogate, x, ds.labels, budget, -1, transform=transform)
        return Perturbation(_finalize(deltas, ds, budget), "linf", budget.eps, method,
                            surrogate_epoch=surrogate.epoch, seed=seed, surrogate=surrogate)
    if mode != "em":
        raise ValueError(f"unknown mode {mode!r}")

    cfg = surrogate if isinstance(surrogate, TrainConfig) else TrainConfig(seed=seed)
    model = surrogate if isinstance(surrogate, TinyModel) else init_model(arch, seed, dtype)
    _check_surrogate(model, ds)
    x = to_unit(ds.images, model.params.dtype)
    y = ds.labels
    opt = SGD(model, cfg.lr, cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng([seed, 7])
    deltas = np.zeros_like(x)
    order, cursor, steps_taken = rng.permutation(len(x)), 0, 0
    history, converged = [], False
    for _ in range(budget.outer_iters):
        for _ in range(train_steps_per_round):
            if cursor >= len(order):
                order, cursor = rng.permutation(len(x)), 0
            idx = order[cursor : cursor + cfg.batch_size]
            cursor += cfg.batch_size
            xb = np.clip(x[idx] + deltas[idx], 0.0, 1.0)
            opt.step(transform.forward(xb) if transform else xb, y[idx])
            steps_taken += 1
        if budget.pgd_steps == 0:
            break
        deltas = _chunked_pgd(opt.model, x, y, budget, -1, delta=deltas, transform=transform)
        loss = mean_loss(opt.model, x + deltas, y, transform)
        history.append(loss)
        if loss < budget.stop_loss:
            converged = True
            break
    if budget.pgd_steps and not converged:
        warnings.warn(f"{method} stopped after {len(history)} rounds at loss {history[-1]:.4f}", PoisonWarning)
    return Perturbation(
        _finalize(deltas, ds, budget), "linf", budget.eps, method, seed=seed,
        meta={"converged": converged, "loss_history": history, "surrogate_steps": steps_taken},
        surrogate=opt.model,
    )


def default_target_map(num_classes: int) -> np.ndarray:
    return (np.arange(num_classes) + 1) % num_classes


def targeted_adv_poison(
    ds: LabeledDataset,
    surrogate: TinyModel,
    budget: PoisonBudget = PoisonBudget(),
    target_map: Sequence[int] | None = None,
) -> Perturbation:
    """Per-image PGD toward a class-consistent wrong label on a trained surrogate."""
    _check_surrogate(surrogate, ds)
    tmap = default_target_map(ds.num_classes) if target_map is None else np.asarray(target_map)
    if sorted(tmap.tolist()) != list(range(ds.num_classes)):
        raise ValueError("target map must be a permutation of the classes")
    if np.any(tmap == np.arange(ds.num_classes)):
        raise ValueError("target map must have no fixed point")
    x = to_unit(ds.images, surrogate.params.dtype)
    targets = tmap[ds.labels]
    deltas = _chunked_pgd(surrogate, x, targets, budget, -1)
    return Perturbation(_finalize(deltas, ds, budget), "linf", budget.eps, "tap",
                        surrogate_epoch=surrogate.epoch, meta={"target_map": tmap.tolist()},
                        surrogate=surrogate)


def target_success(pert: Perturbation, ds: LabeledDataset) -> float:
    """Fraction of poisoned images the TAP surrogate assigns to their target class."""
    tmap = np.asarray(pert.meta["target_map"])
    x = np.clip(to_unit(ds.images) + pert.deltas, 0, 1)
    return float(np.mean(predict(pert.surrogate, x) == tmap[ds.labels]))


def epoch_sweep_poison(
    ds: LabeledDataset,
    checkpoints: Sequence[TinyModel],
    budget: PoisonBudget = PoisonBudget(),
    loss: str = "min",
) -> list[Perturbation]:
    """Error-minimizing (``min``) or error-maximizing (``max``) PGD per checkpoint."""
    if len(checkpoints) < 2:
        raise ValueError("need at least two checkpoints")
    epochs = [c.epoch for c in checkpoints]
    if any(e is None for e in epochs) or epochs != sorted(epochs):
        raise ValueError("checkpoints must carry ascending epoch tags")
    if loss not in ("min", "max"):
        raise ValueError(f"loss must be 'min' or 'max', got {loss!r}")
    direction = -1 if loss == "min" else 1
    out = []
    for ck in checkpoints:
        _check_surrogate(ck, ds)
        x = to_unit(ds.images, ck.params.dtype)
        deltas = _chunked_pgd(ck, x, ds.labels, budget, direction)
        out.append(Perturbation(_finalize(deltas, ds, budget), "linf", budget.eps, f"error_{loss}",
                                surrogate_epoch=ck.epoch))
    return out


def composite(a: Perturbation, b: Perturbation, mode: str = "sum") -> Perturbation:
    """Element-wise sum or average of two perturbation sets."""
    if a.deltas.shape != b.deltas.shape:
        raise ShapeError(f"shape mismatch {a.deltas.shape} vs {b.deltas.shape}")
    if a.norm != b.norm:
        raise ValueError("composite perturbations need the same norm kind")
    if mode == "sum":
        deltas, eps = a.deltas + b.deltas, a.eps + b.eps
    elif mode == "average":
        deltas, eps = (a.deltas + b.deltas) / 2.0, (a.eps + b.eps) / 2.0
    else:
        raise ValueError(f"unknown composite mode {mode!r}")
    return Perturbation(deltas, a.norm, eps, f"{a.method}+{b.method}",
                        meta={"mode": mode, "parts": [a.method, b.method]})


# --- storage -----------------------------------------------------------------------

def save_perturbation(path: str | os.PathLike, pert: Perturbation, extra: dict | None = None) -> None:
    """Write deltas as a Unit-domain ITF1 file plus a ``.json`` sidecar."""
    write_itf1(path, pert.deltas.astype(np.float32))
    side = pert.sidecar()
    if extra:
        side.update(extra)
    with open(str(path) + ".json", "w") as f:
        json.dump(side, f, indent=2, sort_keys=True, default=_json_default)


def load_perturbation(path: str | os.PathLike) -> Perturbation:
    deltas = read_itf1(path).astype(np.float64)
    with open(str(path) + ".json") as f:
        side = json.load(f)
    return Perturbation(deltas, side["norm"], side["eps"], side["method"],
                        surrogate_epoch=side.get("surrogateEpoch"), seed=side.get("seed"),
                        meta=side.get("meta", {}))


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")
