"""Robustness evaluation harness.

Robust accuracy is the fraction of test samples still classified correctly
after the attack. Sweeping the evaluation budget over a grid yields a
robustness curve, the global robustness measure; fixing single budgets gives
the point-wise table view. Saliency maps show which pixels drive the
true-class score. The obfuscated-gradients battery stresses a model with a
long-horizon attack at the same budget and an unconstrained attack: a
defense whose accuracy survives the long attack but collapses under the
unconstrained one is behaving like a genuinely robust model rather than a
gradient-masking artifact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch

from .attacks import ClassifierView, ThreatModel, UNBOUNDED, pgd_attack
from .data import LabeledBatch, batch_iterator, stratified_subset
from .errors import AttackError, ContractError
from .seeding import derive_seed

MNIST_EVAL_EPSILONS = (0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5)
RGB_EVAL_EPSILONS = tuple(i / 255 for i in range(2, 21, 2))

FAST_EVAL_SAMPLES = 1000
STABILITY_GAP = 0.05      # verdict: long-horizon accuracy drop considered stable
BREAK_ACCURACY = 0.05     # verdict: unconstrained attack counts as breaking the model


def eval_grid(dataset: str):
    return MNIST_EVAL_EPSILONS if dataset in ("mnist", "toy") else RGB_EVAL_EPSILONS


@dataclass
class RobustnessCurve:
    """Accuracy as a function of the evaluation perturbation budget."""

    model_name: str
    model_kind: str            # "composite" or "classifier", used for line styles
    train_epsilon: float | None
    epsilons: tuple
    accuracies: tuple
    attack_configs: tuple      # ThreatModel JSON per grid point
    sample_count: int

    def __post_init__(self):
        eps = list(self.epsilons)
        if eps != sorted(eps) or len(set(eps)) != len(eps):
            raise ContractError(f"epsilon grid must be strictly increasing, got {eps}")
        for a in self.accuracies:
            if not (0.0 <= a <= 1.0):
                raise ContractError(f"accuracy {a} outside [0,1]")

    def accuracy_at(self, epsilon: float) -> float:
        for e, a in zip(self.epsilons, self.accuracies):
            if math.isclose(e, epsilon, rel_tol=0, abs_tol=1e-12):
                return a
        raise ContractError(f"curve for {self.model_name} has no grid point {epsilon}")

    def to_json(self) -> dict:
        return {
            "model": self.model_name,
            "model_kind": self.model_kind,
            "train_epsilon": self.train_epsilon,
            "epsilons": list(self.epsilons),
            "accuracies": list(self.accuracies),
            "attack_configs": list(self.attack_configs),
            "sample_count": self.sample_count,
        }


def clean_accuracy(view: ClassifierView, data: LabeledBatch, batch_size: int = 512) -> float:
    if len(data) == 0:
        raise ContractError("cannot evaluate on empty data")
    view.eval()
    correct = 0
    with torch.no_grad():
        for batch in batch_iterator(data, batch_size):
            pred = view(batch.images).argmax(dim=1)
            correct += int((pred == batch.labels).sum())
    return correct / len(data)


def robust_accuracy(view: ClassifierView, data: LabeledBatch, threat: ThreatModel,
                    seed: int = 0, batch_size: int = 256) -> float:
    """Accuracy after attacking every sample at the given threat.

    A zero-radius threat degenerates to clean accuracy exactly: the attack
    returns the clean pixels bit for bit.
    """
    if len(data) == 0:
        raise ContractError("cannot evaluate on empty data")
    view.eval()
    correct = 0
    for i, batch in enumerate(batch_iterator(data, batch_size)):
        adv = pgd_attack(view, batch, threat, derive_seed(seed, "eval-attack", i))
        with torch.no_grad():
            pred = view(adv.x_adv).argmax(dim=1)
        correct += int((pred == batch.labels).sum())
    return correct / len(data)


def robustness_curve(view: ClassifierView, data: LabeledBatch, grid,
                     threat_template: ThreatModel, seed: int = 0,
                     train_epsilon: float | None = None, model_kind: str = "classifier",
                     batch_size: int = 256) -> RobustnessCurve:
    """Evaluate robust accuracy over an increasing budget grid.

    Every grid point shares the base seed, so attack-start noise is a scaled
    version of the same draw across budgets. A zero budget in the grid is
    evaluated as clean accuracy (exactly, by construction of the attack).
    """
    grid = tuple(grid)
    if not grid:
        raise ContractError("epsilon grid must be nonempty")
    accuracies, configs = [], []
    for eps in grid:
        threat = replace(threat_template, epsilon=eps)
        accuracies.append(robust_accuracy(view, data, threat, seed, batch_size))
        configs.append(threat.to_json())
    return RobustnessCurve(view.name, model_kind, train_epsilon, grid,
                           tuple(accuracies), tuple(configs), len(data))


@dataclass
class PointwiseTable:
    """Rows = evaluation budgets, columns = models, cells = accuracies.

    ``ranks`` mirrors the cell layout with 1 marking the best accuracy in
    the row (rendered darkest).
    """

    rows: tuple
    columns: tuple
    cells: tuple          # tuple of row tuples
    ranks: tuple

    def to_csv(self) -> str:
        lines = ["epsilon," + ",".join(self.columns)]
        for eps, row in zip(self.rows, self.cells):
            lines.append(f"{eps}," + ",".join(f"{a:.4f}" for a in row))
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {"rows": list(self.rows), "columns": list(self.columns),
                "cells": [list(r) for r in self.cells],
                "ranks": [list(r) for r in self.ranks]}


def pointwise_table(curves, rows) -> PointwiseTable:
    """Cross-tabulate robustness curves at selected budgets."""
    if not curves:
        raise ContractError("pointwise_table needs at least one curve")
    columns = tuple(c.model_name for c in curves)
    cells, ranks = [], []
    for eps in rows:
        row = tuple(c.accuracy_at(eps) for c in curves)
        order = sorted(range(len(row)), key=lambda i: -row[i])
        rank_row = [0] * len(row)
        for rank, idx in enumerate(order, start=1):
            rank_row[idx] = rank
        cells.append(row)
        ranks.append(tuple(rank_row))
    return PointwiseTable(tuple(rows), columns, tuple(cells), tuple(ranks))


@dataclass
class SaliencyMap:
    """Per-pixel influence of the input on the true-class score: absolute
    input gradient, channel-reduced by max, normalized to [0,1]."""

    values: torch.Tensor   # (H, W), in [0,1]
    peak: float            # max absolute gradient before normalization

    def to_numpy(self):
        return self.values.numpy()


def saliency_map(view: ClassifierView, x: torch.Tensor, y: int) -> SaliencyMap:
    """Gradient saliency of one image: |d score_y / d x|, max over channels,
    scaled by its peak (zero map if the gradient vanishes everywhere)."""
    if x.ndim != 3:
        raise ContractError(f"saliency_map expects a single (H,W,C) image, got {tuple(x.shape)}")
    view.eval()
    xb = x.unsqueeze(0).clone().requires_grad_(True)
    score = view(xb)[0, int(y)]
    if score.grad_fn is None:  # score does not depend on the input at all
        grad = torch.zeros_like(xb)
    else:
        (grad,) = torch.autograd.grad(score, xb, allow_unused=True)
        if grad is None:
            grad = torch.zeros_like(xb)
    if not torch.isfinite(grad).all():
        raise AttackError(f"non-finite saliency gradient on {view.name}")
    mag = grad[0].abs().max(dim=-1).values  # channel reduction
    peak = float(mag.max())
    values = mag / peak if peak > 0 else torch.zeros_like(mag)
    return SaliencyMap(values.detach(), peak)


def obfuscated_gradients_test(view: ClassifierView, data: LabeledBatch,
                              base_threat: ThreatModel, seed: int = 0,
                              long_steps: int = 1000, unbounded_steps: int = 100,
                              unbounded_step_size: float = 0.05,
                              batch_size: int = 256) -> dict:
    """Three measurements and two verdicts.

    Accuracy under the base threat, under a long-horizon attack at the same
    budget, and under an unconstrained attack. ``long_horizon_stable`` holds
    when the long attack costs at most ``STABILITY_GAP`` accuracy;
    ``unbounded_breaks`` when the unconstrained attack drives accuracy below
    ``BREAK_ACCURACY``. A real defense should be stable yet breakable.
    """
    base_acc = robust_accuracy(view, data, base_threat, seed, batch_size)
    long_threat = replace(base_threat, steps=long_steps)
    long_acc = robust_accuracy(view, data, long_threat, seed, batch_size)
    unbounded = ThreatModel(UNBOUNDED, steps=unbounded_steps,
                            step_size=unbounded_step_size, init=base_threat.init)
    unbounded_acc = robust_accuracy(view, data, unbounded, seed, batch_size)
    return {
        "model": view.name,
        "sample_count": len(data),
        "base": {"threat": base_threat.to_json(), "accuracy": base_acc},
        "long_horizon": {"threat": long_threat.to_json(), "accuracy": long_acc},
        "unbounded": {"threat": unbounded.to_json(), "accuracy": unbounded_acc},
        "long_horizon_stable": abs(base_acc - long_acc) <= STABILITY_GAP,
        "unbounded_breaks": unbounded_acc < BREAK_ACCURACY,
        "thresholds": {"stability_gap": STABILITY_GAP, "break_accuracy": BREAK_ACCURACY},
    }


def fast_subset(data: LabeledBatch, fast: bool) -> LabeledBatch:
    """Benchmark evaluations use the full split; fast mode a fixed
    1000-sample stratified subset."""
    return stratified_subset(data, FAST_EVAL_SAMPLES) if fast else data
