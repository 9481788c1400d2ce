"""Accuracy metrics and bandit diagnostics.

All rates are computed against ground truth after collapsing extra negative
modes onto the semantic negative class 0, so models trained with several
negative labels are scored on what they mean, not how they encode it.
Pure functions over immutable inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .classifiers import TrainedModel, predict_arrays
from .data import Dataset
from .errors import EvaluationError, ParameterError, RegimeError


@dataclass
class MetricsReport:
    """Flat bundle of everything the evaluation command reports."""

    bag_accuracy: float | None = None
    instance_accuracy: float | None = None
    per_class_accuracy: dict[int, float] = field(default_factory=dict)
    inference_accuracy: float | None = None
    confusion: list[list[int]] = field(default_factory=list)
    reward_trace: list[float] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "bag_accuracy": self.bag_accuracy,
            "instance_accuracy": self.instance_accuracy,
            "per_class_accuracy": {str(k): v for k, v in sorted(self.per_class_accuracy.items())},
            "inference_accuracy": self.inference_accuracy,
            "confusion": self.confusion,
            "reward_trace": self.reward_trace,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n"


def collapse_negative(label: int, num_classes: int) -> int:
    """Map any negative-mode id (0 or an id above the dataset's class range)
    onto the semantic negative class."""
    return label if 0 < label < num_classes else 0


def bag_accuracy(model: TrainedModel, dataset: Dataset) -> float:
    """Fraction of bags whose MIL rule label (positive iff any member is
    predicted positive) matches the bag's binary weak label."""
    if dataset.regime != "binary-mil":
        raise RegimeError(f"bag accuracy is defined for binary MIL, not {dataset.regime!r}")
    ids = [inst.id for inst in dataset.instances]
    features = np.stack([inst.features for inst in dataset.instances])
    raw_labels, _ = predict_arrays(model, features)
    predicted = {
        i: collapse_negative(int(l), dataset.num_classes) for i, l in zip(ids, raw_labels)
    }
    correct = 0
    for bag in dataset.bags:
        bag_predicted = 1 if any(predicted[i] == 1 for i in bag.instance_ids) else 0
        correct += bag_predicted == bag.weak_label.value
    return correct / len(dataset.bags)


def instance_accuracy(labels_or_model, dataset: Dataset):
    """Overall accuracy, per-class accuracy, and the confusion matrix.

    Accepts either a map instance id -> label or a trained model (whose
    predictions are computed here). Labels are collapsed onto the dataset's
    semantic classes before comparison. Returns (overall, per_class,
    confusion) with integer confusion counts, rows indexed by true class.
    """
    if not dataset.has_ground_truth():
        raise EvaluationError("dataset has no ground truth to evaluate against")
    truth = dataset.ground_truth_map()
    if isinstance(labels_or_model, TrainedModel):
        features = np.stack([inst.features for inst in dataset.instances])
        raw, _ = predict_arrays(labels_or_model, features)
        predicted = {inst.id: int(l) for inst, l in zip(dataset.instances, raw)}
    else:
        predicted = dict(labels_or_model)
        missing = truth.keys() - predicted.keys()
        if missing:
            raise EvaluationError(f"labels missing for instances {sorted(missing)[:5]}")
    m = dataset.num_classes
    confusion = [[0] * m for _ in range(m)]
    for iid, true_label in truth.items():
        true_c = collapse_negative(int(true_label), m)
        pred_c = collapse_negative(int(predicted[iid]), m)
        confusion[true_c][pred_c] += 1
    total = sum(map(sum, confusion))
    overall = sum(confusion[c][c] for c in range(m)) / total
    per_class = {
        c: confusion[c][c] / support
        for c in range(m)
        if (support := sum(confusion[c])) > 0
    }
    return overall, per_class, confusion


def reward_trace_summary(pull_log: list[dict]) -> dict:
    """Replay a pull log into per-round series.

    Returns the round indices, the mean reward of each round's pulls, and the
    running mean (over instances) of each instance's best arm average so far.
    Round 0, when present, holds the initialization sweep.
    """
    if not pull_log:
        raise ParameterError("pull log is empty")
    by_round: dict[int, list[dict]] = {}
    for record in pull_log:
        by_round.setdefault(int(record["round"]), []).append(record)
    arm_count: dict[tuple[int, int], int] = {}
    arm_sum: dict[tuple[int, int], float] = {}
    rounds, round_mean, running_best = [], [], []
    for rnd in sorted(by_round):
        records = by_round[rnd]
        for rec in records:
            key = (rec["instance_id"], rec["label"])
            arm_count[key] = arm_count.get(key, 0) + 1
            arm_sum[key] = arm_sum.get(key, 0.0) + float(rec["reward"])
        best_by_instance: dict[int, float] = {}
        for (x, label), count in arm_count.items():
            mean = arm_sum[(x, label)] / count
            if mean > best_by_instance.get(x, -np.inf):
                best_by_instance[x] = mean
        rounds.append(rnd)
        round_mean.append(float(np.mean([r["reward"] for r in records])))
        running_best.append(float(np.mean(list(best_by_instance.values()))))
    return {"rounds": rounds, "round_mean": round_mean, "running_best_mean": running_best}
