"""Experiment pipelines: poison, optionally compress, train, evaluate, report.

A matrix run takes one :class:`ExperimentSpec` per poison method (a report
row).  Each spec lists the countermeasures to try (report columns) and the
seeds to average over.  Poisons are generated once per (spec, seed) and
shared by all countermeasure cells of that row.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import poisongen as pg
from .dataset import LabeledDataset, SplitSpec, mark_poisoned, subset
from .imageops import CompressionOp, parse_op
from .tinynet import (
    Architecture,
    Checkpointer,
    TinyModel,
    TrainConfig,
    adversarial_train,
    evaluate,
    init_model,
    predict,
    train,
)

log = logging.getLogger(__name__)

AUGMENTATIONS = ("cutout", "cutmix", "mixup")
POISONS = ("none", "lsp", "lsp_adaptive", "ar", "ops", "em", "em_gray", "hypo", "tap")

# Countermeasure each poison family is matched with when the caller does not say.
DEFAULT_ISS = {
    "lsp": "gray", "em": "gray", "hypo": "gray", "em_gray": "jpeg:10",
    "lsp_adaptive": "jpeg:10", "ar": "jpeg:10", "tap": "jpeg:10", "ops": "jpeg:10",
}

# Published full-scale numbers (ResNet-18, 50k CIFAR-10 images), kept as context only.
PAPER_SCALE_REFERENCE = {
    "em": {"w/o": 21.05, "gray": 93.01},
    "tap": {"w/o": 8.17, "jpeg:10": 83.87},
}


@dataclass(frozen=True)
class ExperimentSpec:
    poison: str = "none"
    poison_params: dict = field(default_factory=dict)
    fraction: float | None = 1.0
    target_class: int | None = None
    countermeasures: tuple[str, ...] = ("identity",)
    arch: Architecture = Architecture()
    train_cfg: TrainConfig = TrainConfig()
    apply_to_test: bool = False
    seeds: tuple[int, ...] = (0, 1, 2)
    train_count: int = 5000
    test_count: int = 2000
    data_seed: int = 0
    dtype: str = "float32"
    at_params: dict = field(default_factory=lambda: {"eps": 8.0, "steps": 10, "step_size": 2.0})

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if self.poison not in POISONS:
            raise ValueError(f"unknown poison {self.poison!r}")
        if self.fraction is not None and not 0.0 <= self.fraction <= 1.0:
            raise ValueError(f"fraction {self.fraction} outside [0, 1]")
        if (self.fraction is None) == (self.target_class is None):
            raise ValueError("give exactly one of fraction and target_class")
        for cm in self.countermeasures:
            if cm not in AUGMENTATIONS and cm != "at":
                parse_op(cm)

    @property
    def row_name(self) -> str:
        name = self.poison
        if self.fraction not in (None, 1.0):
            name += f"@{self.fraction:g}"
        if self.target_class is not None:
            name += f"@class{self.target_class}"
        return name

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.to_dict()
        d["train_cfg"] = self.train_cfg.to_dict()
        d["countermeasures"] = list(self.countermeasures)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        if "arch" in d:
            d["arch"] = Architecture.from_dict(d["arch"]) if isinstance(d["arch"], dict) else _arch_by_name(d["arch"])
        if "train_cfg" in d:
            cfg = dict(d["train_cfg"])
            if cfg.get("preprocess"):
                cfg["preprocess"] = parse_op(cfg["preprocess"])
            d["train_cfg"] = TrainConfig(**cfg)
        for key in ("countermeasures", "seeds"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _arch_by_name(name: str) -> Architecture:
    from .tinynet import LINEAR, MLP, SMALL_CNN

    table = {"linear": LINEAR, "mlp": MLP, "cnn": SMALL_CNN, "smallcnn": SMALL_CNN}
    if name.lower() not in table:
        raise ValueError(f"unknown architecture {name!r}")
    return table[name.lower()]


@dataclass
class CellResult:
    poison: str
    countermeasure: str
    seed: int
    status: str  # ok | warning | error
    accuracy: float | None
    message: str = ""


@dataclass
class ExperimentReport:
    rows: list[str]
    cols: list[str]
    cells: list[CellResult]
    metadata: dict

    def summary(self, row: str, col: str) -> tuple[float, float, int]:
        """Mean and population std of accuracy over the usable seeds, plus their count."""
        accs = [c.accuracy for c in self.cells
                if c.poison == row and c.countermeasure == col and c.accuracy is not None]
        if not accs:
            return float("nan"), float("nan"), 0
        return float(np.mean(accs)), float(np.std(accs)), len(accs)

    def mean(self, row: str, col: str) -> float:
        return self.summary(row, col)[0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["poison"]
        for col in self.cols:
            header += [f"{col}_mean", f"{col}_std"]
        w.writerow(header)
        for row in self.rows:
            line = [row]
            for col in self.cols:
                m, s, n = self.summary(row, col)
                line += ["" if n == 0 else f"{m:.4f}", "" if n == 0 else f"{s:.4f}"]
            w.writerow(line)
        return buf.getvalue()

    def to_json(self) -> str:
        table = {}
        for row in self.rows:
            table[row] = {}
            for col in self.cols:
                m, s, n = self.summary(row, col)
                table[row][col] = {"mean": None if n == 0 else round(m, 6),
                                   "std": None if n == 0 else round(s, 6), "n": n}
        doc = {
            "rows": self.rows,
            "cols": self.cols,
            "table": table,
            "cells": [asdict(c) for c in self.cells],
            "metadata": self.metadata,
        }
        return json.dumps(doc, indent=2, sort_keys=True, default=pg._json_default)


# --- building blocks ----------------------------------------------------------------

def desk_split(train_full: LabeledDataset, test_full: LabeledDataset, spec: ExperimentSpec):
    tr, _ = subset(train_full, SplitSpec(spec.train_count, 0, True, spec.data_seed))
    te, _ = subset(test_full, SplitSpec(spec.test_count, 0, True, spec.data_seed))
    audit_disjoint(tr, te)
    return tr, te


def audit_disjoint(train_ds: LabeledDataset, test_ds: LabeledDataset) -> None:
    """Refuse to continue if any test-split image is in the training set."""
    if train_ds.source and train_ds.source == test_ds.source and train_ds.indices is not None \
            and test_ds.indices is not None and np.intersect1d(train_ds.indices, test_ds.indices).size:
        raise ValueError("training set overlaps the test split")


def budget_from(params: dict) -> pg.PoisonBudget:
    keys = {"eps", "pgd_steps", "pgd_step_size", "outer_iters", "stop_loss"}
    return pg.PoisonBudget(**{k: v for k, v in params.items() if k in keys})


def train_surrogate(ds: LabeledDataset, arch: Architecture, cfg: TrainConfig, seed: int, dtype=np.float32,
                    checkpointer: Checkpointer | None = None) -> TinyModel:
    return train(init_model(arch, seed, dtype), ds, replace(cfg, seed=seed), checkpointer)


def make_poison(method: str, ds: LabeledDataset, seed: int, params: dict | None = None,
                arch: Architecture = Architecture(), cfg: TrainConfig = TrainConfig(),
                dtype=np.float32) -> pg.Perturbation | None:
    """Generate a perturbation for every image of ``ds`` (the mask is applied later)."""
    params = dict(params or {})
    if method == "none":
        return None
    if method == "lsp":
        return pg.lsp(ds, params.get("patch_size", 8), params.get("eps", 1.0), seed)
    if method == "lsp_adaptive":
        return pg.lsp_adaptive(ds, params.get("eps", 1.0), seed)
    if method == "ar":
        return pg.ar(ds, params.get("eps", 1.0), seed)
    if method == "ops":
        return pg.ops(ds)
    budget = budget_from(params)
    if method in ("em", "em_gray"):
        return pg.error_min_poison(ds, replace(cfg, seed=seed), budget, "em", method == "em_gray",
                                   arch, seed, dtype=dtype)
    surrogate = train_surrogate(ds, arch, cfg, seed, dtype)
    if method == "hypo":
        return pg.error_min_poison(ds, surrogate, budget, "hypo", seed=seed)
    if method == "tap":
        return pg.targeted_adv_poison(ds, surrogate, budget, params.get("target_map"))
    raise ValueError(f"unknown poison method {method!r}")


def poisoned_set(ds: LabeledDataset, spec: ExperimentSpec, seed: int) -> tuple[LabeledDataset, pg.Perturbation | None]:
    if spec.fraction is not None:
        masked = mark_poisoned(ds, fraction=spec.fraction, seed=seed)
    else:
        masked = mark_poisoned(ds, class_id=spec.target_class)
    pert = make_poison(spec.poison, masked, seed, spec.poison_params, spec.arch, spec.train_cfg,
                       np.dtype(spec.dtype))
    if pert is None:
        return masked, None
    return pg.apply_perturbation(masked, pert), pert


def train_with_countermeasure(ds: LabeledDataset, cm: str, spec: ExperimentSpec, seed: int) -> tuple[TinyModel, CompressionOp | None]:
    """Train one model; returns it with the op to apply at test time (if any)."""
    cfg = replace(spec.train_cfg, seed=seed)
    model = init_model(spec.arch, seed, np.dtype(spec.dtype))
    if cm == "at":
        return adversarial_train(model, ds, cfg, **spec.at_params), None
    if cm in AUGMENTATIONS:
        return train(model, ds, replace(cfg, augment=cm)), None
    op = parse_op(cm)
    return train(model, ds, replace(cfg, preprocess=op)), op if spec.apply_to_test else None


def _run_row_seed(args) -> list[CellResult]:
    spec, seed, train_ds, test_ds = args
    cells = []
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", pg.PoisonWarning)
            poisoned, _ = poisoned_set(train_ds, spec, seed)
        note = "; ".join(str(w.message) for w in caught)
    except Exception as exc:  # a broken cell must not stop the matrix
        log.warning("poison %s seed %d failed: %s", spec.poison, seed, exc)
        return [CellResult(spec.row_name, cm, seed, "error", None, f"{type(exc).__name__}: {exc}")
                for cm in spec.countermeasures]
    for cm in spec.countermeasures:
        try:
            model, test_op = train_with_countermeasure(poisoned, cm, spec, seed)
            acc = evaluate(model, test_ds, test_op)
            cells.append(CellResult(spec.row_name, cm, seed, "warning" if note else "ok", acc, note))
        except Exception as exc:
            log.warning("cell %s/%s seed %d failed: %s", spec.poison, cm, seed, exc)
            cells.append(CellResult(spec.row_name, cm, seed, "error", None, f"{type(exc).__name__}: {exc}"))
        log.info("cell %s / %s / seed %d done", spec.row_name, cm, seed)
    return cells


def run_matrix(specs: Sequence[ExperimentSpec], train_full: LabeledDataset, test_full: LabeledDataset,
               jobs: int = 1) -> ExperimentReport:
    """Run every (poison, countermeasure, seed) cell and aggregate over seeds.

    Cells that raise are recorded with status ``error`` and the run goes on.
    With ``jobs > 1`` (spec, seed) units run in worker processes; results are
    assembled in a fixed order so the report does not depend on scheduling.
    """
    units = []
    for spec in specs:
        tr, te = desk_split(train_full, test_full, spec)
        units += [(spec, seed, tr, te) for seed in spec.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_row_seed, units))
    else:
        results = [_run_row_seed(u) for u in units]
    cells = [c for r in results for c in r]
    rows = list(dict.fromkeys(s.row_name for s in specs))
    cols = list(dict.fromkeys(cm for s in specs for cm in s.countermeasures))
    first = specs[0]
    metadata = {
        "train_count": first.train_count,
        "test_count": first.test_count,
        "arch": first.arch.to_dict(),
        "budgets": {s.row_name: s.poison_params for s in specs},
        "specs": [s.to_dict() for s in specs],
        "paper_scale_reference": {k: v for k, v in PAPER_SCALE_REFERENCE.items() if k in rows},
    }
    return ExperimentReport(rows, cols, cells, metadata)


# --- diagnostics --------------------------------------------------------------------

def test_perturbation(pert: pg.Perturbation, test_ds: LabeledDataset, method: str,
                      budget: pg.PoisonBudget = pg.PoisonBudget()) -> pg.Perturbation:
    """Poison the test split with the rule that produced ``pert``."""
    if pert.class_deltas is not None or "class_pixels" in pert.meta:
        return pert.transfer(test_ds)
    if pert.surrogate is None:
        raise ValueError(f"cannot poison test images for {method}: no surrogate kept")
    if method.startswith("tap"):
        return pg.targeted_adv_poison(test_ds, pert.surrogate, budget, pert.meta.get("target_map"))
    return pg.error_min_poison(test_ds, pert.surrogate, budget, "hypo", adaptive_gray=method.endswith("_gray"))


test_perturbation.__test__ = False  # not a pytest test despite the name


@dataclass
class DiagnosticResult:
    acc_poisoned_test: float
    acc_clean_test: float
    acc_iss_poisoned_test: float
    iss: str


def poisoned_test_diagnostic(spec: ExperimentSpec, train_full: LabeledDataset, test_full: LabeledDataset,
                             seed: int, iss: str | None = None) -> DiagnosticResult:
    """Train on the poisoned training set (no ISS) and test on three test sets."""
    tr, te = desk_split(train_full, test_full, spec)
    poisoned, pert = poisoned_set(tr, spec, seed)
    if pert is None:
        raise ValueError("diagnostic needs a poison")
    model = train(init_model(spec.arch, seed, np.dtype(spec.dtype)), poisoned, replace(spec.train_cfg, seed=seed))
    test_pert = test_perturbation(pert, te, spec.poison, budget_from(spec.poison_params))
    te_poisoned = pg.apply_perturbation(mark_poisoned(te, fraction=1.0), test_pert)
    iss = iss or DEFAULT_ISS.get(spec.poison, "gray")
    return DiagnosticResult(
        evaluate(model, te_poisoned),
        evaluate(model, te),
        evaluate(model, te_poisoned, parse_op(iss)),
        iss,
    )


def preference_diagnostic(a_train: pg.Perturbation, b_train: pg.Perturbation, labels_train: np.ndarray,
                          a_test: pg.Perturbation, b_test: pg.Perturbation, labels_test: np.ndarray,
                          arch: Architecture = Architecture(), cfg: TrainConfig = TrainConfig(epochs=10),
                          seed: int = 0) -> dict:
    """Learning curves of a model trained on summed perturbations alone.

    Inputs are the perturbations themselves, each divided by its L-inf
    radius so their values are O(1).  The model is evaluated after every
    epoch on the a-only and b-only test perturbations.
    """
    comp = pg.composite(a_train, b_train, "sum")

    def as_input(p, eps):
        return (p.deltas / (eps / 255.0)).astype(np.float32)

    x_train = as_input(comp, (a_train.eps + b_train.eps) / 2.0)
    ds = LabeledDataset(x_train, np.asarray(labels_train), np.zeros(len(x_train), bool), arch.num_classes)
    ck = Checkpointer(range(1, cfg.epochs + 1))
    train(init_model(arch, seed, np.float32), ds, replace(cfg, seed=seed), ck)
    xa, xb = as_input(a_test, a_test.eps), as_input(b_test, b_test.eps)
    curve_a, curve_b = [], []
    for m in ck.ordered():
        curve_a.append(float(np.mean(predict(m, xa) == labels_test)))
        curve_b.append(float(np.mean(predict(m, xb) == labels_test)))
    return {"epochs": [m.epoch for m in ck.ordered()], "a": curve_a, "b": curve_b}


def chance(num_classes: int) -> float:
    return 1.0 / num_classes


__all__ = [
    "ExperimentSpec", "ExperimentReport", "CellResult", "DiagnosticResult", "run_matrix",
    "poisoned_test_diagnostic", "preference_diagnostic", "make_poison", "poisoned_set",
    "desk_split", "train_surrogate", "test_perturbation", "chance",
]
