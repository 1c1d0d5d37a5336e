"""Desk-scale experiments shared by ``scripts/`` and the acceptance tests."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .dataset import Condition, LabeledDataset, SynthConfig, generate_synthetic, load_corpus, split_by_condition
from .model import build_study2_spec, init_parameters
from .training import EvalReport, TrainConfig, cross_condition_eval, cross_validate, evaluate, make_folds, train

# 30 epochs of lr 0.01 / batch 32 learn the synthetic corpus; the original
# lr 0.001 / batch 256 regime needs hundreds of epochs to move at all
DESK_TRAIN = TrainConfig(learning_rate=0.01, batch_size=32, epochs=30, momentum=0.9, seed=0)

# textures 1.4x coarser and sensor noise doubled
SHIFTED_CONDITION = Condition("B", scale=1.4, noise_sd=0.10)


def chance_bound(n: int, classes: int, alpha: float = 0.01) -> float:
    """Accuracy a uniform guesser exceeds with probability at most ``alpha``
    over ``n`` trials (one-sided binomial upper bound)."""
    p = 1.0 / classes
    tail = 0.0
    for c in range(n, -1, -1):
        tail += math.comb(n, c) * p**c * (1 - p) ** (n - c)
        if tail > alpha:
            return (c + 1) / n if c < n else 1.0
    return 0.0


def desk_xval(data: LabeledDataset, k: int = 5, config: TrainConfig = DESK_TRAIN,
              seed: int = 0, jobs: int = 1) -> EvalReport:
    spec = build_study2_spec(len(data.vocabulary))
    return cross_validate(spec, data, k, config, seed=seed, jobs=jobs)


@dataclass
class CrossConditionResult:
    in_fold: EvalReport
    shifted: EvalReport
    chance: float
    bound: float

    @property
    def passed(self) -> bool:
        acc = self.shifted.overall_accuracy
        return self.bound < acc < self.in_fold.overall_accuracy


def cross_condition(out_dir, frames_per_class: int = 200, shifted: Condition = SHIFTED_CONDITION,
                    config: TrainConfig = DESK_TRAIN, seed: int = 0) -> CrossConditionResult:
    """Train on condition A (80% of it), test on the remaining A frames and on
    every frame captured under ``shifted``."""
    synth = SynthConfig(frames_per_class=frames_per_class, conditions=(Condition("A"), shifted), seed=seed)
    generate_synthetic(synth, out_dir)
    data = load_corpus(out_dir)
    base, held = split_by_condition(data, [shifted.tag])
    plan = make_folds(base.labels, 5, seed)
    model = init_parameters(build_study2_spec(len(data.vocabulary)), seed, data.vocabulary)
    model, _ = train(model, base.subset(plan.train_indices(0)), config)
    in_fold = evaluate(model, base.subset(plan.test_indices(0)))
    report = cross_condition_eval(model, held)
    classes = len(data.vocabulary)
    return CrossConditionResult(in_fold, report, 1.0 / classes, chance_bound(report.total, classes))
