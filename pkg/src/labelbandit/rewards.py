"""Weak-supervision regimes expressed as bounded per-instance reward functions.

Given a candidate labelling, a classifier is trained on it and run on a
weakly labelled held-out set; each training instance is then scored in
[0, 1] by how well the resulting predictions respect the held-out weak
labels near that instance in classifier-output space. Every regime shares
the modelability gate: an instance whose assigned label the freshly trained
classifier cannot reproduce on the training fold scores exactly 0.

A ``RewardContext`` precomputes everything shared across instances for one
evaluation (per-bag recall, per-instance precision, neighbour lists, raw
distance gaps); the per-instance reward functions then read from it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .classifiers import (
    ClassifierSpec,
    Prediction,
    fit,
    nearest_indices_1d,
    nearest_indices_rows,
    predict_arrays,
)
from .data import NEGATIVE_CLASS, Bag
from .errors import ParameterError, RegimeError, RewardRangeError, ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RewardParams:
    """Knobs shared by the reward regimes.

    alpha is the minimum average neighbourhood recall at which the precision
    term starts to apply, gamma weighs recall against precision, tau scales
    the distance-gap normalization (None means: calibrate to the median
    absolute raw gap on first use), and num_negative_labels > 1 gives the
    negative class several interchangeable modes.
    """

    k: int = 5
    alpha: float = 1.0
    gamma: float = 1.0 / 7.0
    tau: float | None = None
    distgap_enabled: bool = False
    num_negative_labels: int = 1
    distgap_space: str = "output"

    def __post_init__(self):
        if self.k < 1:
            raise ParameterError(f"k must be >= 1, got {self.k}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 < self.gamma < 1.0:
            raise ParameterError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.tau is not None and self.tau <= 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        if self.num_negative_labels < 1:
            raise ParameterError(
                f"num_negative_labels must be >= 1, got {self.num_negative_labels}"
            )
        if self.distgap_space not in ("output", "features"):
            raise ParameterError(
                f"distgap_space must be 'output' or 'features', got {self.distgap_space!r}"
            )


class RewardContext:
    """Per-evaluation tables read by the reward functions.

    Internally array-backed (row-aligned with sorted instance ids) so the
    per-instance reward functions stay cheap; the dict views over Prediction
    objects are materialized lazily for callers that want them.
    """

    def __init__(
        self,
        regime: str,
        negative_labels: frozenset[int],
        k: int,
        heldout_bags: list[Bag],
        bag_index: dict[int, Bag],
        train_ids: list[int],
        train_labels: np.ndarray,
        train_embeddings: np.ndarray,
        heldout_ids: list[int],
        heldout_labels: np.ndarray,
        heldout_embeddings: np.ndarray,
        neighbor_rows: list[np.ndarray],
        rec_by_bag: dict[int, float],
        rec_row: np.ndarray,
        prec_row: np.ndarray,
        proportion_error_row: np.ndarray,
        raw_distgap: dict[int, float],
        tau: float | None,
    ):
        self.regime = regime
        self.negative_labels = negative_labels
        self.k = k
        self.heldout_bags = heldout_bags
        self.bag_index = bag_index
        self.rec_by_bag = rec_by_bag
        self.raw_distgap = raw_distgap
        self.tau = tau
        self._train_ids = train_ids
        self._train_row = {iid: row for row, iid in enumerate(train_ids)}
        self._train_labels = train_labels
        self._train_embeddings = train_embeddings
        self._heldout_ids = heldout_ids
        self._heldout_labels = heldout_labels
        self._heldout_embeddings = heldout_embeddings
        self._neighbor_rows = neighbor_rows
        self._rec_row = rec_row
        self._prec_row = prec_row
        self._proportion_error_row = proportion_error_row
        self._train_prediction_view = None
        self._heldout_prediction_view = None

    @property
    def train_predictions(self) -> dict[int, Prediction]:
        if self._train_prediction_view is None:
            self._train_prediction_view = {
                iid: Prediction(int(self._train_labels[row]), self._train_embeddings[row])
                for iid, row in self._train_row.items()
            }
        return self._train_prediction_view

    @property
    def heldout_predictions(self) -> dict[int, Prediction]:
        if self._heldout_prediction_view is None:
            self._heldout_prediction_view = {
                iid: Prediction(int(self._heldout_labels[row]), self._heldout_embeddings[row])
                for row, iid in enumerate(self._heldout_ids)
            }
        return self._heldout_prediction_view

    def predicted_label(self, instance_id: int) -> int:
        return int(self._train_labels[self._train_row[instance_id]])

    def neighbor_ids(self, instance_id: int) -> list[int]:
        rows = self._neighbor_rows[self._train_row[instance_id]]
        return [self._heldout_ids[r] for r in rows]

    @property
    def neighbors(self) -> dict[int, list[int]]:
        return {iid: self.neighbor_ids(iid) for iid in self._train_ids}

    @property
    def prec_by_instance(self) -> dict[int, float]:
        return {iid: float(self._prec_row[row]) for row, iid in enumerate(self._heldout_ids)}

    @property
    def proportion_error_by_bag(self) -> dict[int, float]:
        position = {iid: row for row, iid in enumerate(self._heldout_ids)}
        return {
            bag.id: float(self._proportion_error_row[position[bag.instance_ids[0]]])
            for bag in self.heldout_bags
        }


# ---------------------------------------------------------------------------
# Recall / precision components (definitional forms)
# ---------------------------------------------------------------------------


def rec_binary(bag: Bag, heldout_predictions: dict[int, Prediction]) -> float:
    """1 for a negative bag; for a positive bag, 1 iff some member is predicted positive."""
    if bag.weak_label.value == 0:
        return 1.0
    return 1.0 if any(heldout_predictions[i].label == 1 for i in bag.instance_ids) else 0.0


def prec_binary(
    instance_id: int,
    heldout_predictions: dict[int, Prediction],
    bag_index: dict[int, Bag],
) -> float:
    """1 unless the instance is predicted positive while sitting in a negative bag."""
    if heldout_predictions[instance_id].label != 1:
        return 1.0
    return 1.0 if bag_index[instance_id].weak_label.value == 1 else 0.0


def rec_multiclass(bag: Bag, heldout_predictions: dict[int, Prediction]) -> float:
    """Fraction of the bag's label set realized by its members' predictions."""
    label_set = bag.weak_label.value
    if not label_set:
        return 1.0
    realized = {heldout_predictions[i].label for i in bag.instance_ids}
    return len(label_set & realized) / len(label_set)


def prec_multiclass(
    instance_id: int,
    heldout_predictions: dict[int, Prediction],
    bag_index: dict[int, Bag],
    negative_labels: frozenset[int] = frozenset({NEGATIVE_CLASS}),
) -> float:
    """1 for negatively predicted instances; positives must appear in the bag's label set."""
    predicted = heldout_predictions[instance_id].label
    if predicted in negative_labels:
        return 1.0
    return 1.0 if predicted in bag_index[instance_id].weak_label.value else 0.0


# ---------------------------------------------------------------------------
# Per-instance rewards
# ---------------------------------------------------------------------------


def _mean_rec_prec(instance_id: int, ctx: RewardContext) -> tuple[float, float]:
    rows = ctx._neighbor_rows[ctx._train_row[instance_id]]
    return float(ctx._rec_row[rows].mean()), float(ctx._prec_row[rows].mean())


def _gated_base(instance_id: int, ctx: RewardContext, params: RewardParams) -> float:
    """gamma * meanRec + (1 - gamma) * [meanRec >= alpha] * meanPrec."""
    mean_rec, mean_prec = _mean_rec_prec(instance_id, ctx)
    value = params.gamma * mean_rec
    if mean_rec >= params.alpha:
        value += (1.0 - params.gamma) * mean_prec
    return value


def binary_mil_reward(
    instance_id: int, assigned: int, ctx: RewardContext, params: RewardParams
) -> float:
    if assigned != ctx.predicted_label(instance_id):
        return 0.0
    return _gated_base(instance_id, ctx, params)


def multiclass_mil_reward(
    instance_id: int, assigned: int, ctx: RewardContext, params: RewardParams
) -> float:
    """Same structure as the binary reward with the multi-class recall/precision
    tables and neighbours taken along the predicted-class output dimension;
    with two classes and one negative label it coincides with the binary reward."""
    if assigned != ctx.predicted_label(instance_id):
        return 0.0
    return _gated_base(instance_id, ctx, params)


def eta(raw: float, tau: float) -> float:
    """Clip raw/tau to [-1, 1] and map affinely onto [0, 1]; eta(0) = 0.5."""
    return min(max(raw / tau, -1.0), 1.0) / 2.0 + 0.5


def distance_gap(vector: np.ndarray, same_bag_points, other_bag_points, k: int) -> float:
    """Raw gap: mean distance to the k nearest members of each other-label bag
    minus the same quantity over same-label bags. Positive when the point sits
    close to bags sharing its bag's label and far from the rest. Bags smaller
    than k contribute the mean over all their members."""
    if not same_bag_points or not other_bag_points:
        raise ParameterError("distance gap needs at least one same-label and one other-label bag")

    def mean_knn_distance(points: np.ndarray) -> float:
        d = np.linalg.norm(points - vector, axis=1)
        kk = min(k, d.shape[0])
        return float(np.partition(d, kk - 1)[:kk].mean())

    other = np.mean([mean_knn_distance(p) for p in other_bag_points])
    same = np.mean([mean_knn_distance(p) for p in same_bag_points])
    return float(other - same)


def distgap(instance_id: int, ctx: RewardContext) -> float:
    """Normalized distance gap in [0, 1] for a training instance."""
    if instance_id not in ctx.raw_distgap:
        raise ParameterError(f"no distance gap available for instance {instance_id}")
    return eta(ctx.raw_distgap[instance_id], ctx.tau)


def distgap_augmented_reward(
    instance_id: int, assigned: int, ctx: RewardContext, params: RewardParams
) -> float:
    """Base reward scaled by the distance gap for positive assignments and by
    its complement for negative-mode assignments; the gate is unchanged."""
    if assigned != ctx.predicted_label(instance_id):
        return 0.0
    gap = distgap(instance_id, ctx)
    base = _gated_base(instance_id, ctx, params)
    if assigned in ctx.negative_labels:
        return (1.0 - gap) * base
    return gap * base


def llp_example_reward(
    instance_id: int, assigned: int, ctx: RewardContext, params: RewardParams
) -> float:
    """Worked example of a user-defined regime for proportion-labelled bags:
    one minus the mean absolute error between each neighbouring bag's labelled
    and predicted positive fraction, behind the usual gate."""
    if ctx.regime != "llp":
        raise RegimeError("llp reward requires proportion-labelled bags")
    if assigned != ctx.predicted_label(instance_id):
        return 0.0
    rows = ctx._neighbor_rows[ctx._train_row[instance_id]]
    return float(1.0 - ctx._proportion_error_row[rows].mean())


def reward_for(
    instance_id: int, assigned: int, ctx: RewardContext, params: RewardParams
) -> float:
    """Dispatch on the context's regime (and the distance-gap flag)."""
    if ctx.regime == "llp":
        return llp_example_reward(instance_id, assigned, ctx, params)
    if ctx.regime in ("binary-mil", "multiclass-mil"):
        if params.distgap_enabled:
            return distgap_augmented_reward(instance_id, assigned, ctx, params)
        if ctx.regime == "binary-mil":
            return binary_mil_reward(instance_id, assigned, ctx, params)
        return multiclass_mil_reward(instance_id, assigned, ctx, params)
    raise RegimeError(f"no built-in reward for regime {ctx.regime!r}; supply a custom environment")


# ---------------------------------------------------------------------------
# Context construction
# ---------------------------------------------------------------------------

_REGIME_LABEL_KIND = {"binary-mil": "binary", "multiclass-mil": "label_set", "llp": "proportion"}


def _check_bag_kinds(regime: str, bags: list[Bag]):
    expected = _REGIME_LABEL_KIND.get(regime)
    if expected is None:
        raise RegimeError(f"no built-in reward for regime {regime!r}")
    for bag in bags:
        if bag.weak_label.kind != expected:
            raise RegimeError(
                f"regime {regime!r} needs {expected!r} weak labels, "
                f"but bag {bag.id} carries {bag.weak_label.kind!r}"
            )


def _full_space_neighbors(queries: np.ndarray, pool: np.ndarray, k: int) -> list[np.ndarray]:
    """Euclidean k-nearest rows of ``pool`` for each query, chunked to bound memory."""
    out = []
    chunk = max(1, int(2**22 // max(1, pool.shape[0] * pool.shape[1])))
    for start in range(0, queries.shape[0], chunk):
        block = queries[start : start + chunk]
        d = np.linalg.norm(block[:, None, :] - pool[None, :, :], axis=2)
        out.extend(nearest_indices_rows(d, k))
    return out


def _unpack_predictions(predictions: dict[int, Prediction]):
    ids = sorted(predictions)
    labels = np.array([predictions[i].label for i in ids], dtype=np.intp)
    embeddings = np.stack([predictions[i].embedding for i in ids])
    return ids, labels, embeddings


def build_reward_context(
    regime: str,
    params: RewardParams,
    train_predictions: dict[int, Prediction] | None = None,
    heldout_predictions: dict[int, Prediction] | None = None,
    heldout_bags: list[Bag] | None = None,
    train_bag_index: dict[int, Bag] | None = None,
    negative_labels: frozenset[int] = frozenset({NEGATIVE_CLASS}),
    train_points: dict[int, np.ndarray] | None = None,
    heldout_points: dict[int, np.ndarray] | None = None,
    tau: float | None = None,
    prediction_arrays=None,
) -> RewardContext:
    """Precompute every shared quantity for one reward evaluation.

    Neighbour pools are ordered by ascending held-out instance id, so distance
    ties resolve to the lower id. For the distance gap, ``train_bag_index``
    must map each training instance to its bag, and raw feature vectors are
    used instead of embeddings when ``params.distgap_space == "features"``.

    ``prediction_arrays`` is a performance path for callers that already hold
    row-aligned arrays: ((train_ids, labels, embeddings), (heldout_ids,
    labels, embeddings)) with ids sorted ascending; it replaces the two
    prediction dicts.
    """
    if heldout_bags is None:
        raise ParameterError("heldout_bags is required")
    _check_bag_kinds(regime, heldout_bags)
    if prediction_arrays is not None:
        (tr_ids, tr_labels, tr_emb), (ho_ids, ho_labels, ho_emb) = prediction_arrays
    else:
        if train_predictions is None or heldout_predictions is None:
            raise ParameterError("prediction maps are required")
        tr_ids, tr_labels, tr_emb = _unpack_predictions(train_predictions)
        ho_ids, ho_labels, ho_emb = _unpack_predictions(heldout_predictions)
    if not ho_ids:
        raise ParameterError("held-out set is empty")

    bag_index: dict[int, Bag] = {}
    for bag in heldout_bags:
        for iid in bag.instance_ids:
            bag_index[iid] = bag
    position_of = {iid: row for row, iid in enumerate(ho_ids)}
    missing = [i for i in ho_ids if i not in bag_index]
    if missing:
        raise ValidationError(f"held-out instances without a bag: {sorted(missing)[:5]}")

    if params.k > len(ho_ids):
        logger.warning("k=%d exceeds the held-out pool size %d; clamping", params.k, len(ho_ids))
    k = min(params.k, len(ho_ids))

    # neighbours: full embedding space, or the predicted-class coordinate
    neighbor_rows: list[np.ndarray]
    if regime == "multiclass-mil":
        neighbor_rows = [None] * len(tr_ids)  # type: ignore[list-item]
        for cls in np.unique(tr_labels):
            member_rows = np.flatnonzero(tr_labels == cls)
            found = nearest_indices_1d(ho_emb[:, cls], tr_emb[member_rows, cls], k)
            for row, hits in zip(member_rows, found):
                neighbor_rows[row] = hits
    else:
        neighbor_rows = _full_space_neighbors(tr_emb, ho_emb, k)

    # per-bag recall and per-instance precision tables, row-aligned
    rec_by_bag: dict[int, float] = {}
    rec_row = np.ones(len(ho_ids))
    prec_row = np.ones(len(ho_ids))
    proportion_error_row = np.zeros(len(ho_ids))
    # label ids are small ints, so membership checks run through lookup tables
    label_space = 1 + max(
        ho_emb.shape[1] - 1,
        int(ho_labels.max(initial=0)),
        max(negative_labels, default=0),
        max((bag.weak_label.max_class_id() for bag in heldout_bags), default=0),
    )
    negative_table = np.zeros(label_space, dtype=bool)
    negative_table[list(negative_labels)] = True
    negative_row = negative_table[ho_labels]
    for bag in heldout_bags:
        rows = np.fromiter(
            (position_of[i] for i in bag.instance_ids), dtype=np.intp, count=len(bag.instance_ids)
        )
        member_labels = ho_labels[rows]
        if regime == "binary-mil":
            rec = 1.0 if bag.weak_label.value == 0 else float((member_labels == 1).any())
            if bag.weak_label.value == 0:
                prec_row[rows[member_labels == 1]] = 0.0
        elif regime == "multiclass-mil":
            label_set = bag.weak_label.value
            if label_set:
                wanted = np.fromiter(label_set, dtype=np.intp, count=len(label_set))
                realized = np.bincount(member_labels, minlength=label_space) > 0
                rec = float(realized[wanted].mean())
                allowed = np.zeros(label_space, dtype=bool)
                allowed[wanted] = True
                bad = ~(negative_row[rows] | allowed[member_labels])
            else:
                rec = 1.0
                bad = ~negative_row[rows]
            prec_row[rows[bad]] = 0.0
        else:  # llp
            fraction = float((member_labels == 1).mean())
            proportion_error_row[rows] = abs(fraction - bag.weak_label.value)
            rec = 1.0
        rec_by_bag[bag.id] = rec
        rec_row[rows] = rec

    raw_distgap: dict[int, float] = {}
    if params.distgap_enabled:
        if train_bag_index is None:
            raise ParameterError("distance gap needs train_bag_index (instance -> bag)")
        if params.distgap_space == "features":
            if train_points is None or heldout_points is None:
                raise ParameterError("distgap_space='features' needs raw feature vectors")
            bag_points = {
                bag.id: np.stack([heldout_points[i] for i in bag.instance_ids])
                for bag in heldout_bags
            }
            query_of = {x: train_points[x] for x in tr_ids}
        else:
            bag_points = {
                bag.id: ho_emb[[position_of[i] for i in bag.instance_ids]]
                for bag in heldout_bags
            }
            query_of = {x: tr_emb[row] for row, x in enumerate(tr_ids)}
        by_label: dict[object, list[int]] = {}
        for bag in heldout_bags:
            by_label.setdefault(bag.weak_label, []).append(bag.id)
        for x in tr_ids:
            own_label = train_bag_index[x].weak_label
            same = [bag_points[b] for b in by_label.get(own_label, [])]
            other = [
                bag_points[b]
                for label, bids in by_label.items()
                if label != own_label
                for b in bids
            ]
            raw_distgap[x] = distance_gap(query_of[x], same, other, k)
        if tau is None:
            sample = np.abs([raw_distgap[x] for x in tr_ids[:100]])
            median = float(np.median(sample))
            tau = median if median > 0 else 1.0
        for x in tr_ids:
            bag_index.setdefault(x, train_bag_index[x])

    return RewardContext(
        regime=regime,
        negative_labels=frozenset(negative_labels),
        k=k,
        heldout_bags=heldout_bags,
        bag_index=bag_index,
        train_ids=list(tr_ids),
        train_labels=tr_labels,
        train_embeddings=tr_emb,
        heldout_ids=list(ho_ids),
        heldout_labels=ho_labels,
        heldout_embeddings=ho_emb,
        neighbor_rows=neighbor_rows,
        rec_by_bag=rec_by_bag,
        rec_row=rec_row,
        prec_row=prec_row,
        proportion_error_row=proportion_error_row,
        raw_distgap=raw_distgap,
        tau=tau,
    )


# ---------------------------------------------------------------------------
# The environment: labelling -> rewards, through a freshly trained classifier
# ---------------------------------------------------------------------------


class RewardEnvironment:
    """Callable scoring one candidate labelling of the training fold.

    Each call fits the classifier on (fold features, labelling) with a fresh
    seed drawn from the supplied rng (the only source of reward noise),
    predicts the fold and the held-out set, builds a RewardContext, and
    returns one reward per training instance. Instances fixed by earlier
    bootstrap passes can be appended to every fit via ``extra_features`` /
    ``extra_labels``. Safe to call from several threads.
    """

    def __init__(
        self,
        regime: str,
        train_ids: list[int],
        train_features: np.ndarray,
        train_bag_index: dict[int, Bag],
        heldout_ids: list[int],
        heldout_features: np.ndarray,
        heldout_bags: list[Bag],
        classifier_spec: ClassifierSpec,
        params: RewardParams,
        negative_labels: frozenset[int] = frozenset({NEGATIVE_CLASS}),
        extra_features: np.ndarray | None = None,
        extra_labels: np.ndarray | None = None,
    ):
        if len(train_ids) != train_features.shape[0]:
            raise ValidationError("train_ids and train_features disagree on length")
        if len(heldout_ids) != heldout_features.shape[0]:
            raise ValidationError("heldout_ids and heldout_features disagree on length")
        self.regime = regime
        self.params = params
        self.classifier_spec = classifier_spec
        self.heldout_bags = heldout_bags
        self.negative_labels = frozenset(negative_labels)
        self.extra_features = extra_features
        self.extra_labels = extra_labels
        # keep everything row-aligned with ascending instance ids
        train_order = np.argsort(np.asarray(train_ids))
        self.train_ids = [int(train_ids[j]) for j in train_order]
        self.train_features = train_features[train_order]
        self.train_bag_index = train_bag_index
        heldout_order = np.argsort(np.asarray(heldout_ids))
        self.heldout_ids = [int(heldout_ids[j]) for j in heldout_order]
        self.heldout_features = heldout_features[heldout_order]
        self._tau = params.tau
        if params.distgap_space == "features":
            self._train_points = {i: f for i, f in zip(self.train_ids, self.train_features)}
            self._heldout_points = {i: f for i, f in zip(self.heldout_ids, self.heldout_features)}
        else:
            self._train_points = None
            self._heldout_points = None

    def evaluate(self, assignment: dict[int, int], rng) -> dict[int, float]:
        seed = int(rng.integers(0, 2**63))
        try:
            y = np.array([assignment[i] for i in self.train_ids], dtype=np.intp)
        except KeyError as exc:
            raise ParameterError(f"assignment is missing instance {exc.args[0]}") from exc
        X = self.train_features
        if self.extra_features is not None and len(self.extra_features):
            X = np.vstack([X, self.extra_features])
            y = np.concatenate([y, self.extra_labels])
        model = fit(self.classifier_spec, X, y, seed=seed)
        train_labels, train_emb = predict_arrays(model, self.train_features)
        ho_labels, ho_emb = predict_arrays(model, self.heldout_features)
        ctx = build_reward_context(
            self.regime,
            self.params,
            heldout_bags=self.heldout_bags,
            train_bag_index=self.train_bag_index,
            negative_labels=self.negative_labels,
            train_points=self._train_points,
            heldout_points=self._heldout_points,
            tau=self._tau,
            prediction_arrays=(
                (self.train_ids, train_labels, train_emb),
                (self.heldout_ids, ho_labels, ho_emb),
            ),
        )
        if self._tau is None and ctx.tau is not None:
            self._tau = ctx.tau  # calibrated once, on the first evaluation
        rewards = {}
        for x in self.train_ids:
            r = reward_for(x, assignment[x], ctx, self.params)
            if not 0.0 <= r <= 1.0:
                raise RewardRangeError(f"reward {r!r} for instance {x} escaped [0, 1]")
            rewards[x] = r
        return rewards

    __call__ = evaluate


def evaluate_environment(
    env: RewardEnvironment, assignment: dict[int, int], rng
) -> dict[int, float]:
    return env.evaluate(assignment, rng)
