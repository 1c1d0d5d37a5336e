"""SGD training, stratified k-fold cross-validation and evaluation metrics."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .dataset import LabeledDataset, to_input
from .errors import EmptyInput, LabelOutOfRange, ShapeMismatch, StratificationImpossible
from .model import Model, NetworkSpec, init_parameters, run_network
from .thermal import QuantizedImage


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 256
    epochs: int = 350
    momentum: float = 0.9
    seed: int = 0
    shuffle_each_epoch: bool = True

    def __post_init__(self):
        # lr 0 is allowed as a no-op run (parameters stay unchanged)
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "momentum": self.momentum,
            "seed": self.seed,
            "shuffle_each_epoch": self.shuffle_each_epoch,
        }


# --- folds ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FoldPlan:
    k: int
    assignments: np.ndarray
    seed: int

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != fold)


def make_folds(labels, k: int, seed: int = 0) -> FoldPlan:
    """Stratified k-fold assignment.

    Each class is shuffled and dealt round-robin onto the folds, starting where
    the previous class stopped, so per-class and total fold sizes each differ
    by at most one.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    classes, counts = np.unique(labels, return_counts=True)
    if labels.size == 0 or counts.min() < k:
        raise StratificationImpossible(f"every class needs at least {k} samples")
    rng = np.random.default_rng(seed)
    assignments = np.empty(labels.size, dtype=np.int64)
    start = 0
    for c in classes:
        idx = rng.permutation(np.flatnonzero(labels == c))
        assignments[idx] = (start + np.arange(idx.size)) % k
        start = (start + idx.size) % k
    return FoldPlan(k, assignments, seed)


# --- training ---------------------------------------------------------------


def _check_labels(labels, classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise LabelOutOfRange(f"labels must lie in [0, {classes})")
    return labels


def _as_arrays(model: Model, data) -> tuple:
    if isinstance(data, LabeledDataset):
        return data.inputs(model.input_side), data.labels
    x, y = data
    return np.asarray(x, dtype=np.float32), np.asarray(y)


def train(model: Model, data, config: TrainConfig) -> tuple:
    """Minibatch SGD with momentum (v <- mu*v - lr*g; w <- w + v).

    ``data`` is a LabeledDataset (resized to the network input) or an
    ``(inputs, labels)`` pair. Returns a trained copy and per-epoch mean loss.
    """
    x, y = _as_arrays(model, data)
    if len(x) == 0:
        raise EmptyInput("cannot train on an empty dataset")
    side = model.input_side
    if x.ndim != 4 or x.shape[1:] != (model.spec.channels, side, side):
        raise ShapeMismatch(f"expected inputs [N,{model.spec.channels},{side},{side}], got {x.shape}")
    y = _check_labels(y, model.spec.classes)
    if len(y) != len(x):
        raise ShapeMismatch("inputs and labels differ in length")

    model = model.copy()
    dtype = model.params_dtype
    x = x.astype(dtype, copy=False)
    names = sorted(model.params)
    velocity = {n: np.zeros_like(model.params[n]) for n in names}
    lr = np.asarray(config.learning_rate, dtype=dtype)
    mu = np.asarray(config.momentum, dtype=dtype)
    rng = np.random.default_rng(config.seed)
    order = np.arange(len(x))
    losses = []
    for _ in range(config.epochs):
        if config.shuffle_each_epoch:
            order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), config.batch_size):
            batch = order[start : start + config.batch_size]
            params = {n: ad.Tensor(model.params[n], requires_grad=True) for n in names}
            logits = run_network(model.spec, params, ad.Tensor(x[batch]), True, rng)
            loss, _ = ad.softmax_xent(logits, y[batch])
            loss.backward()
            total += float(loss.data) * len(batch)
            for n in names:
                g = params[n].grad
                if g is None:
                    continue
                velocity[n] = mu * velocity[n] - lr * g
                model.params[n] = model.params[n] + velocity[n]
        losses.append(total / len(x))
    model.training_meta = dict(model.training_meta, train=config.to_dict(), epochs_run=config.epochs)
    if isinstance(data, LabeledDataset):
        model.training_meta["conditions"] = sorted(set(data.condition_tags))
    return model, losses


# --- metrics ----------------------------------------------------------------


@dataclass
class EvalReport:
    confusion: np.ndarray
    labels: tuple
    fold_accuracies: list = field(default_factory=list)
    fold_mean_class_accuracies: list = field(default_factory=list)
    unseen_conditions: list = field(default_factory=list)

    @property
    def supports(self) -> np.ndarray:
        return self.confusion.sum(axis=1)

    @property
    def per_class_accuracy(self) -> np.ndarray:
        """Diagonal over row sums; NaN for classes with no test samples."""
        sup = self.supports
        diag = np.diag(self.confusion).astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(sup > 0, diag / np.maximum(sup, 1), np.nan)

    @property
    def mean_class_accuracy(self) -> float:
        acc = self.per_class_accuracy
        acc = acc[~np.isnan(acc)]
        return float(acc.mean()) if acc.size else float("nan")

    @property
    def overall_accuracy(self) -> float:
        total = self.confusion.sum()
        return float(np.trace(self.confusion) / total) if total else float("nan")

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def fold_mean(self) -> float:
        return float(np.mean(self.fold_accuracies)) if self.fold_accuracies else self.overall_accuracy

    @property
    def fold_sd(self) -> float:
        return float(np.std(self.fold_accuracies)) if self.fold_accuracies else 0.0

    def to_dict(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v

        return {
            "labels": list(self.labels),
            "confusion": self.confusion.astype(int).tolist(),
            "per_class_accuracy": [clean(float(a)) for a in self.per_class_accuracy],
            "mean_class_accuracy": clean(self.mean_class_accuracy),
            "overall_accuracy": clean(self.overall_accuracy),
            "fold_accuracies": [float(a) for a in self.fold_accuracies],
            "fold_mean_class_accuracies": [float(a) for a in self.fold_mean_class_accuracies],
            "fold_mean": clean(self.fold_mean),
            "fold_sd": clean(self.fold_sd),
            "samples": self.total,
            "unseen_conditions": list(self.unseen_conditions),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def confusion_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["true\\predicted", *self.labels])
        for name, row in zip(self.labels, self.confusion):
            writer.writerow([name, *[int(v) for v in row]])
        return buf.getvalue()


def confusion_matrix(predictions, labels, classes: int) -> np.ndarray:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = _check_labels(labels, classes)
    if predictions.shape != labels.shape:
        raise ShapeMismatch("predictions and labels differ in length")
    if predictions.size and (predictions.min() < 0 or predictions.max() >= classes):
        raise LabelOutOfRange("prediction outside the class range")
    cm = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


def report_from_predictions(predictions, labels, vocabulary) -> EvalReport:
    return EvalReport(confusion_matrix(predictions, labels, len(vocabulary)), tuple(vocabulary))


def predict_labels(predictor, dataset: LabeledDataset) -> np.ndarray:
    """Argmax class per sample (lowest index wins exact ties).

    ``predictor`` is a Model or a callable mapping a dataset to label ids.
    """
    if not isinstance(predictor, Model):
        return np.asarray(predictor(dataset), dtype=np.int64)
    if len(dataset) == 0:
        return np.zeros(0, dtype=np.int64)
    x = dataset.inputs(predictor.input_side)
    out = []
    for start in range(0, len(x), 256):
        out.append(predictor.forward(x[start : start + 256], mode="eval").argmax(axis=1))
    return np.concatenate(out)


def evaluate(model, dataset: LabeledDataset) -> EvalReport:
    vocab = model.class_labels if isinstance(model, Model) else dataset.vocabulary
    if len(dataset.vocabulary) != len(vocab):
        raise LabelOutOfRange("dataset vocabulary does not match the model")
    return report_from_predictions(predict_labels(model, dataset), dataset.labels, vocab)


def _fold_task(args):
    spec, dataset, plan, fold, config, seed, trainer = args
    train_ds = dataset.subset(plan.train_indices(fold))
    test_ds = dataset.subset(plan.test_indices(fold))
    if trainer is None:
        model = init_parameters(spec, seed, dataset.vocabulary)
        fold_cfg = TrainConfig(**dict(config.to_dict(), seed=seed))
        predictor, _ = train(model, train_ds, fold_cfg)
    else:
        predictor = trainer(train_ds, fold, seed)
    preds = predict_labels(predictor, test_ds)
    return fold, test_ds.labels, preds


def fold_seeds(seed: int, k: int) -> list:
    """Independent per-fold seeds derived from one master seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(k)]


def cross_validate(
    spec: NetworkSpec,
    dataset: LabeledDataset,
    k: int,
    config: TrainConfig,
    seed: int | None = None,
    jobs: int = 1,
    trainer: Callable | None = None,
) -> EvalReport:
    """Train a fresh model per fold and pool the held-out confusion matrices.

    ``trainer(train_dataset, fold, seed)`` replaces the default init+train
    and may return a Model or any predictor accepted by predict_labels.
    """
    seed = config.seed if seed is None else seed
    plan = make_folds(dataset.labels, k, seed)
    if trainer is None:
        dataset = dataset.resized(spec.input_side)
    seeds = fold_seeds(seed, k)
    tasks = [(spec, dataset, plan, f, config, seeds[f], trainer) for f in range(k)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_fold_task, tasks))
    else:
        results = [_fold_task(t) for t in tasks]
    results.sort(key=lambda r: r[0])

    C = len(dataset.vocabulary)
    pooled = np.zeros((C, C), dtype=np.int64)
    fold_acc, fold_mca = [], []
    for _, labels, preds in results:
        rep = report_from_predictions(preds, labels, dataset.vocabulary)
        pooled += rep.confusion
        fold_acc.append(rep.overall_accuracy)
        fold_mca.append(rep.mean_class_accuracy)
    return EvalReport(pooled, dataset.vocabulary, fold_acc, fold_mca)


# --- gated prediction and cross-condition tests -----------------------------


@dataclass(frozen=True)
class GatedPrediction:
    class_index: int | None
    score: float
    threshold: float

    @property
    def abstained(self) -> bool:
        return self.class_index is None


def gate(probs: np.ndarray, threshold: float) -> GatedPrediction:
    probs = np.asarray(probs).reshape(-1)
    top = int(np.argmax(probs))
    score = probs[top]
    return GatedPrediction(top if score > threshold else None, float(score), float(threshold))


def predict_gated(
    model: Model, image: QuantizedImage, threshold: float = 0.5, reject_flat: bool = True
) -> GatedPrediction:
    """Top class if its softmax probability exceeds ``threshold``, else abstain.

    Flat frames (dynamics == 0) abstain with score 0 when ``reject_flat``.
    """
    if image.n != model.input_side:
        raise ShapeMismatch(f"image side {image.n} != model input side {model.input_side}")
    if reject_flat and image.dynamics == 0:
        return GatedPrediction(None, 0.0, float(threshold))
    probs = model.forward(to_input([image]), mode="eval")[0]
    return gate(probs, threshold)


def cross_condition_eval(model: Model, held: LabeledDataset) -> EvalReport:
    """Evaluate on data from (possibly) unseen capture conditions.

    Conditions absent from ``model.training_meta['conditions']`` are listed in
    the report's ``unseen_conditions``.
    """
    if len(held) == 0:
        raise EmptyInput("held-out condition set is empty")
    report = evaluate(model, held)
    seen = set(model.training_meta.get("conditions", []))
    report.unseen_conditions = sorted(set(held.condition_tags) - seen)
    return report
