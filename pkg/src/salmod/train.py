"""Minibatch SGD, the k-shot evaluation protocol and gradient-energy
instrumentation."""
from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Sample, SplitPlan, subset
from .layers import softmax_cross_entropy
from .model import ModelState, NetworkConfig, build, forward, is_saliency_param, transfer
from .tensor import backward

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    epochs: int = 40
    lr: float = 0.01
    weight_decay: float = 0.003
    momentum: float = 0.9
    batch_size: int = 16

    def validate(self) -> None:
        if self.epochs < 0:
            raise TrainingError("epochs must be >= 0")
        if self.lr < 0:
            raise TrainingError("lr must be >= 0")
        if self.weight_decay < 0:
            raise TrainingError("weight_decay must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise TrainingError("momentum must lie in [0,1)")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")


@dataclass
class TrainResult:
    state: ModelState
    losses: list[float]
    grad_fractions: list[float] = field(default_factory=list)


def stack_inputs(samples: Sequence[Sample], config: NetworkConfig):
    images = np.stack([s.image for s in samples])
    if not config.uses_saliency:
        return images, None
    missing = [s.name for s in samples if s.saliency is None]
    if missing:
        raise TrainingError(f"{len(missing)} samples lack a saliency map (first: {missing[0]})")
    return images, np.stack([s.saliency for s in samples])


def project_bbox(bbox, stride: int, fh: int, fw: int) -> tuple[int, int, int, int]:
    """Project an inclusive pixel box onto a feature grid, rounding outward."""
    x0, y0, x1, y1 = bbox
    fx0 = min(int(math.floor(x0 / stride)), fw - 1)
    fy0 = min(int(math.floor(y0 / stride)), fh - 1)
    fx1 = min(max(int(math.ceil((x1 + 1) / stride)) - 1, fx0), fw - 1)
    fy1 = min(max(int(math.ceil((y1 + 1) / stride)) - 1, fy0), fh - 1)
    return fx0, fy0, fx1, fy1


def energy_fractions(grad: np.ndarray, bboxes, stride: int) -> np.ndarray:
    """Share of per-sample L1 gradient mass at feature cells inside each box."""
    energy = np.abs(grad).sum(axis=1)
    _, fh, fw = energy.shape
    out = np.empty(len(energy))
    for i, (e, bbox) in enumerate(zip(energy, bboxes)):
        x0, y0, x1, y1 = project_bbox(bbox, stride, fh, fw)
        total = e.sum()
        if total == 0:
            log.info("zero gradient energy; using the box area fraction")
            out[i] = (x1 - x0 + 1) * (y1 - y0 + 1) / (fh * fw)
        else:
            out[i] = e[y0:y1 + 1, x0:x1 + 1].sum() / total
    return out


def gradient_energy_fraction(state: ModelState, sample: Sample, config: NetworkConfig) -> float:
    """Fraction of the backpropagated gradient at the fusion-entry features
    that falls inside the sample's bounding box."""
    images, sal = stack_inputs([sample], config)
    fr = forward(state, config, images, sal, record_fusion_input=True)
    backward(softmax_cross_entropy(fr.logits, [sample.label]))
    return float(energy_fractions(fr.features.grad, [sample.bbox], fr.feature_stride)[0])


def trainable_names(state: ModelState, config: NetworkConfig, frozen: Sequence[str] = ()) -> set[str]:
    names = set(state.params) - set(frozen)
    if config.freeze_saliency:
        names = {n for n in names if not is_saliency_param(n)}
    return names


def train(state: ModelState, config: NetworkConfig, samples: Sequence[Sample], hyper: Hyperparams,
          seed: int, frozen: Sequence[str] = (), grad_energy: bool = False) -> TrainResult:
    """SGD with momentum and L2 weight decay on softmax cross-entropy.

    The shuffle order depends only on ``seed`` and the epoch. With
    ``grad_energy`` the per-epoch mean gradient-energy fraction is recorded
    from the training backward passes.
    """
    hyper.validate()
    if not samples:
        raise TrainingError("cannot train on an empty subset")
    state = state.copy()
    images, sal = stack_inputs(samples, config)
    labels = np.array([s.label for s in samples])
    bboxes = [s.bbox for s in samples]
    n = len(samples)
    bs = min(hyper.batch_size, n)
    names = sorted(trainable_names(state, config, frozen))
    velocity = {k: np.zeros_like(state.params[k]) for k in names}
    rng = np.random.default_rng([seed, 3])
    losses, fractions = [], []
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        total, frac_sum = 0.0, 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            fr = forward(state, config, images[idx], None if sal is None else sal[idx],
                         record_fusion_input=grad_energy, trainable=names)
            loss = softmax_cross_entropy(fr.logits, labels[idx])
            value = float(loss.value[0])
            if not math.isfinite(value):
                raise TrainingError(
                    f"loss diverged to {value} at epoch {epoch}, batch {start // bs} (lr={hyper.lr})"
                )
            backward(loss)
            total += value * len(idx)
            if grad_energy:
                frac_sum += energy_fractions(fr.features.grad, [bboxes[i] for i in idx], fr.feature_stride).sum()
            for name in names:
                node = fr.params[name]
                g = node.grad if node.grad is not None else 0.0
                w = state.params[name]
                v = velocity[name]
                v *= hyper.momentum
                v += g + hyper.weight_decay * w
                state.params[name] = w - hyper.lr * v
        losses.append(total / n)
        if grad_energy:
            fractions.append(frac_sum / n)
    return TrainResult(state, losses, fractions)


def predict(state: ModelState, config: NetworkConfig, samples: Sequence[Sample], batch: int = 100) -> np.ndarray:
    preds = []
    for start in range(0, len(samples), batch):
        chunk = samples[start:start + batch]
        images, sal = stack_inputs(chunk, config)
        logits = forward(state, config, images, sal, trainable=()).logits.value
        preds.append(logits.argmax(axis=1))
    return np.concatenate(preds)


def evaluate(state: ModelState, config: NetworkConfig, samples: Sequence[Sample]) -> float:
    """Percentage of samples whose argmax logit matches the label."""
    if not samples:
        raise TrainingError("cannot evaluate on no samples")
    preds = predict(state, config, samples)
    labels = np.array([s.label for s in samples])
    return 100.0 * float((preds == labels).mean())


# -- protocol ------------------------------------------------------------------

@dataclass
class Cell:
    k: object
    seed: int
    accuracy: float
    losses: list[float]
    grad_fractions: list[float] = field(default_factory=list)


@dataclass
class RunReport:
    name: str
    cells: list[Cell]

    @property
    def k_list(self) -> list:
        seen = []
        for c in self.cells:
            if c.k not in seen:
                seen.append(c.k)
        return seen

    def accuracies(self, k) -> list[float]:
        return [c.accuracy for c in self.cells if c.k == k]

    def summary(self) -> list[tuple[object, float, float]]:
        """(k, mean, population std) of test accuracy over seeds."""
        out = []
        for k in self.k_list:
            acc = np.array(self.accuracies(k))
            out.append((k, float(acc.mean()), float(acc.std())))
        return out

    def mean(self, k) -> float:
        return float(np.mean(self.accuracies(k)))

    def grad_series(self, k) -> list[float]:
        """Per-epoch gradient-energy fraction averaged over seeds."""
        series = [c.grad_fractions for c in self.cells if c.k == k and c.grad_fractions]
        if not series:
            return []
        return [float(v) for v in np.mean(np.array(series), axis=0)]

    def write_results(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "seed", "accuracy"])
            for c in self.cells:
                w.writerow([c.k, c.seed, repr(c.accuracy)])

    def write_summary(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "mean", "std"])
            for k, m, s in self.summary():
                w.writerow([k, repr(m), repr(s)])

    def write_losses(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "seed", "epoch", "loss"])
            for c in self.cells:
                for e, loss in enumerate(c.losses):
                    w.writerow([c.k, c.seed, e, repr(loss)])


def write_grad_series(path, saliency: Sequence[float], baseline: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "fraction_saliency", "fraction_baseline"])
        for e, (a, b) in enumerate(zip(saliency, baseline)):
            w.writerow([e, repr(float(a)), repr(float(b))])


def read_summary(path) -> list[tuple[str, float, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(r["k"], float(r["mean"]), float(r["std"])) for r in rows]


def initial_state(config: NetworkConfig, seed: int, pretrained=None) -> ModelState:
    """Fresh model for one protocol cell according to ``config.init``.

    ``pretrained`` is a :class:`~salmod.pretrain.Pretrained` bundle and is
    required unless ``config.init == "none"``.
    """
    if config.init == "none":
        return build(config, seed)
    if pretrained is None:
        raise TrainingError(f"init={config.init} requires pretrained weights")
    if config.init == "scratch":
        return transfer(pretrained.backbone, config, seed, skip_saliency=True)
    if pretrained.two_branch is None:
        raise TrainingError("init=pretrained requires a pretrained saliency branch")
    return transfer(pretrained.two_branch, config, seed)


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("SALMOD_THREADS", "1")))
    except ValueError:
        return 1


def _run_cell(args) -> Cell:
    samples, plan, config, hyper, k, seed, pretrained, grad_energy = args
    state = initial_state(config, seed, pretrained)
    train_ids = subset(plan, k, seed)
    result = train(state, config, [samples[i] for i in train_ids], hyper, seed, grad_energy=grad_energy)
    acc = evaluate(result.state, config, [samples[i] for i in plan.test_ids()])
    log.info("k=%s seed=%d accuracy=%.2f", k, seed, acc)
    return Cell(k, seed, acc, result.losses, result.grad_fractions), result.state


def scarce_protocol(samples: Sequence[Sample], plan: SplitPlan, config: NetworkConfig, hyper: Hyperparams,
                    k_list: Sequence, n_seeds: int, pretrained=None, grad_energy: bool = False,
                    threads: int | None = None, name: str = "", keep_states: bool = False):
    """Train and test one model per (k, seed) cell on the fixed test split.

    Returns a :class:`RunReport` (and the final states when ``keep_states``).
    """
    config.validate()
    for k in k_list:
        if k != "K" and int(k) > plan.max_k():
            raise TrainingError(f"k={k} exceeds the smallest class pool ({plan.max_k()})")
    jobs = [(samples, plan, config, hyper, k, seed, pretrained, grad_energy)
            for k in k_list for seed in range(n_seeds)]
    threads = thread_count() if threads is None else threads
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]
    report = RunReport(name or config.variant, [c for c, _ in results])
    if keep_states:
        return report, [s for _, s in results]
    return report
