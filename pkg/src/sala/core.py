"""The task-adaptive semi-supervised episode: metrics, pseudo-labels,
progressive selection, prototype refinement, and the episode loss.

One episode proceeds as: embed everything, average support embeddings into
per-class prototypes, generate per-class metric weights from the prototypes
(when the task-adaptive metric is on), pseudo-label the unlabeled samples by
weighted squared distance, keep only the ``n`` most confident of them (the
count grows with training progress), fold the kept samples into the
prototypes weighted by their soft class probabilities, and score the query
set against the refined prototypes with the same metric. Everything except
the discrete selection is differentiable end to end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Episode
from .models import ModelPair, PrototypeSet, compute_prototypes, generate_task_weights

__all__ = [
    "RunMode",
    "SelectionSchedule",
    "PseudoLabelTable",
    "EpisodeResult",
    "euclidean_distance",
    "adaptive_distance",
    "class_probabilities",
    "pseudo_label",
    "selection_count",
    "select_top_n",
    "refine_prototypes",
    "episode_loss",
    "run_episode",
]


@dataclass(frozen=True)
class RunMode:
    """Feature switches: the task-adaptive metric (TM), progressive neighbor
    selection (PNS), and whether unlabeled data participates at all.

    With TM and PNS both off (unlabeled on) an episode is exactly one-step
    soft k-means refinement under the Euclidean metric; with unlabeled off it
    is the plain supervised prototype classifier.
    """

    use_task_metric: bool = True
    use_progressive_selection: bool = True
    use_unlabeled: bool = True

    @classmethod
    def sala(cls) -> "RunMode":
        return cls(True, True, True)

    @classmethod
    def soft_kmeans(cls) -> "RunMode":
        return cls(False, False, True)

    @classmethod
    def supervised(cls) -> "RunMode":
        return cls(False, False, False)

    def flags(self) -> dict:
        return {"tm": self.use_task_metric, "pns": self.use_progressive_selection,
                "unlabeled": self.use_unlabeled}


@dataclass(frozen=True)
class SelectionSchedule:
    """How many unlabeled samples to trust at a given point in training.

    The selection weight w(t) = exp(-eta * (1 - t)^2) rises from exp(-eta)
    to exactly 1 as training progress t goes 0 -> 1; the kept count is
    floor(w(t) * m0), never above m0.
    """

    eta: float
    m0: int
    total_episodes: int

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.m0 < 0:
            raise ValueError(f"m0 must be >= 0, got {self.m0}")
        if self.total_episodes < 1:
            raise ValueError(f"total_episodes must be >= 1, got {self.total_episodes}")

    def progress(self, episode_index: int) -> float:
        if not (0 <= episode_index < self.total_episodes):
            raise ValueError(
                f"episode_index {episode_index} outside [0, {self.total_episodes})"
            )
        if self.total_episodes == 1:
            return 0.0
        return episode_index / (self.total_episodes - 1)

    def weight(self, t: float) -> float:
        return math.exp(-self.eta * (1.0 - t) ** 2)


def selection_count(schedule: SelectionSchedule, episode_index: int) -> int:
    """floor(w(t) * m0), capped at m0; callers clamp to the unlabeled count."""
    w = schedule.weight(schedule.progress(episode_index))
    return min(int(math.floor(w * schedule.m0)), schedule.m0)


def default_m0(spec) -> int:
    """Largest trusted-count default: half the unlabeled set when distractors
    are present, the whole set otherwise."""
    m = spec.unlabeled_total
    return m // 2 if spec.distractors > 0 else m


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def euclidean_distance(x_emb: np.ndarray, c: np.ndarray) -> float:
    """Squared Euclidean distance between an embedding and a center."""
    x_emb = np.asarray(x_emb, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if x_emb.shape != c.shape:
        raise ValueError(f"dimension mismatch: {x_emb.shape} vs {c.shape}")
    d = x_emb - c
    return float(np.sum(d * d))


def adaptive_distance(x_emb: np.ndarray, c_i: np.ndarray, alpha_i: np.ndarray) -> float:
    """Per-dimension weighted squared distance; weights must be positive.

    With all weights equal to one this reduces exactly (bit for bit, same
    summation order) to :func:`euclidean_distance`.
    """
    x_emb = np.asarray(x_emb, dtype=np.float64)
    c_i = np.asarray(c_i, dtype=np.float64)
    alpha_i = np.asarray(alpha_i, dtype=np.float64)
    if not (x_emb.shape == c_i.shape == alpha_i.shape):
        raise ValueError(
            f"dimension mismatch: x {x_emb.shape}, center {c_i.shape}, weights {alpha_i.shape}"
        )
    if np.any(alpha_i <= 0):
        raise ValueError("metric weights must be strictly positive")
    d = x_emb - c_i
    return float(np.sum(alpha_i * (d * d)))


def class_probabilities(distances: np.ndarray) -> np.ndarray:
    """softmax(-distances) with max-subtraction for stability; sums to one."""
    d = np.asarray(distances, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise ValueError("distances must be finite")
    z = -d + d.min()
    e = np.exp(z)
    return e / e.sum()


def _pairwise_distances(embs: Tensor, centers: Tensor, weights: Tensor | None) -> Tensor:
    """(m, N) tensor of weighted squared distances, differentiable throughout."""
    m = embs.data.shape[0]
    n = centers.data.shape[0]
    cols = []
    for i in range(n):
        ci = ad.repeat_rows(ad.slice0(centers, i, i + 1), m)
        diff = ad.sub(embs, ci)
        sq = ad.mul(diff, diff)
        if weights is not None:
            wi = ad.repeat_rows(ad.slice0(weights, i, i + 1), m)
            sq = ad.mul(wi, sq)
        cols.append(ad.rowsum(sq))
    return ad.concat1(cols)


def _softmax_neg(dist: Tensor) -> Tensor:
    """Row-wise softmax of negated distances (stable via a detached row max)."""
    n = dist.data.shape[1]
    shift = Tensor((-dist.data).max(axis=1, keepdims=True))  # constant under backward
    z = ad.sub(ad.neg(dist), ad.repeat_cols(shift, n))
    e = ad.exp(z)
    return ad.div(e, ad.repeat_cols(ad.rowsum(e), n))


@dataclass
class PseudoLabelTable:
    """Soft class probabilities plus the confidence summary per unlabeled sample."""

    probabilities: Tensor       # (M, N), rows sum to one, differentiable
    distances: np.ndarray       # (M, N) snapshot of the metric values
    best_distance: np.ndarray   # (M,) min over classes
    best_class: np.ndarray      # (M,) argmin, lowest index on ties

    @property
    def n_unlabeled(self) -> int:
        return self.distances.shape[0]


def pseudo_label(prototypes: PrototypeSet, weights: Tensor | None,
                 unlabeled_embs: Tensor, mode: RunMode) -> PseudoLabelTable:
    """Distance every unlabeled sample to every prototype and soft-label it.

    The task-adaptive weights are used only when the mode enables them;
    otherwise the metric falls back to all-ones (plain squared Euclidean).
    """
    w = weights if mode.use_task_metric else None
    dist = _pairwise_distances(unlabeled_embs, prototypes.centers, w)
    probs = _softmax_neg(dist)
    d = dist.data
    return PseudoLabelTable(
        probabilities=probs,
        distances=d.copy(),
        best_distance=d.min(axis=1),
        best_class=d.argmin(axis=1),
    )


def select_top_n(table: PseudoLabelTable, n: int) -> np.ndarray:
    """Indices of the n most confident samples (smallest best distance);
    ties keep original sample order."""
    if not (0 <= n <= table.n_unlabeled):
        raise ValueError(f"n={n} outside [0, {table.n_unlabeled}]")
    order = np.argsort(table.best_distance, kind="stable")
    return np.sort(order[:n])


def refine_prototypes(prototypes: PrototypeSet, support_embs: Tensor, labels,
                      table: PseudoLabelTable, selected: np.ndarray,
                      unlabeled_embs: Tensor) -> PrototypeSet:
    """Fold the selected unlabeled samples into the prototypes.

    Each new center is (sum of its support embeddings + probability-weighted
    sum of selected unlabeled embeddings) / (support count + probability
    mass). With nothing selected this reproduces the support-only prototypes
    exactly.
    """
    labels = np.asarray(labels, dtype=np.intp)
    n_classes = prototypes.n_classes
    d = support_embs.data.shape[1]
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)

    z = np.zeros((n_classes, len(labels)))
    z[labels, np.arange(len(labels))] = 1.0
    support_sums = ad.matmul(Tensor(z), support_embs)            # (N, d)

    selected = np.asarray(selected, dtype=np.intp)
    if selected.size == 0:
        centers = ad.mul(support_sums,
                         Tensor(np.repeat(1.0 / counts[:, None], d, axis=1)))
        return PrototypeSet(centers=centers, counts=counts)

    p_sel = ad.gather_rows(table.probabilities, selected)        # (n, N)
    e_sel = ad.gather_rows(unlabeled_embs, selected)             # (n, d)
    pt = ad.transpose(p_sel)                                     # (N, n)
    soft_sums = ad.matmul(pt, e_sel)                             # (N, d)
    mass = ad.rowsum(pt)                                         # (N, 1)

    numerator = ad.add(support_sums, soft_sums)
    denominator = ad.add(mass, Tensor(counts[:, None]))
    centers = ad.div(numerator, ad.repeat_cols(denominator, d))
    return PrototypeSet(centers=centers,
                        counts=counts + table.probabilities.data[selected].sum(axis=0))


def _query_scores(prototypes: PrototypeSet, weights: Tensor | None, query_embs: Tensor,
                  query_labels, mode: RunMode) -> tuple[Tensor, np.ndarray]:
    """Episode cross-entropy (sum over queries) and the raw distance matrix."""
    labels = np.asarray(query_labels, dtype=np.intp)
    n_classes = prototypes.n_classes
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"query labels must lie in [0, {n_classes})")
    w = weights if mode.use_task_metric else None
    dist = _pairwise_distances(query_embs, prototypes.centers, w)

    logits = ad.neg(dist)
    shift = Tensor(logits.data.max(axis=1, keepdims=True))       # detached row max
    z = ad.sub(logits, ad.repeat_cols(shift, n_classes))
    lse = ad.add(ad.log(ad.rowsum(ad.exp(z))), shift)            # (Q, 1)
    onehot = np.zeros((len(labels), n_classes))
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = ad.rowsum(ad.mul(logits, Tensor(onehot)))           # (Q, 1)
    loss = ad.sum_all(ad.sub(lse, picked))
    return loss, dist.data


def episode_loss(refined_prototypes: PrototypeSet, weights: Tensor | None,
                 query_embs: Tensor, query_labels, mode: RunMode) -> Tensor:
    """Sum over queries of the negative log probability of the true class,
    scored against the refined prototypes with the episode's metric."""
    loss, _ = _query_scores(refined_prototypes, weights, query_embs, query_labels, mode)
    return loss


@dataclass
class EpisodeResult:
    loss: Tensor
    metrics: dict
    prototypes: np.ndarray            # refined centers snapshot (N, d)
    selected: np.ndarray              # indices into the unlabeled set
    table: PseudoLabelTable | None


def run_episode(models: ModelPair, episode: Episode, schedule: SelectionSchedule,
                episode_index: int, mode: RunMode, train: bool = True,
                hidden_truth=None, class_ids=None) -> EpisodeResult:
    """One full episode pass; returns the loss tensor and a metrics record.

    ``hidden_truth``/``class_ids`` form the diagnostics channel: when given
    (dataset-level class per unlabeled sample, and the episode's class ids),
    the metrics include pseudo-label precision over the selected set. The
    algorithm itself never reads them.
    """
    n_way = episode.n_way
    n_support = episode.support_x.shape[0]
    n_query = episode.query_x.shape[0]
    m = episode.unlabeled_x.shape[0]

    if mode.use_unlabeled:
        batch = np.concatenate([episode.support_x, episode.unlabeled_x, episode.query_x])
        embs = models.embed(Tensor(batch), train=train)
        s_emb = ad.slice0(embs, 0, n_support)
        u_emb = ad.slice0(embs, n_support, n_support + m)
        q_emb = ad.slice0(embs, n_support + m, n_support + m + n_query)
    else:
        batch = np.concatenate([episode.support_x, episode.query_x])
        embs = models.embed(Tensor(batch), train=train)
        s_emb = ad.slice0(embs, 0, n_support)
        u_emb = None
        q_emb = ad.slice0(embs, n_support, n_support + n_query)

    protos = compute_prototypes(s_emb, episode.support_y, n_way)
    weights = generate_task_weights(models.se, protos) if mode.use_task_metric else None

    table = None
    selected = np.empty(0, dtype=np.intp)
    n_kept = 0
    if mode.use_unlabeled:
        table = pseudo_label(protos, weights, u_emb, mode)
        if mode.use_progressive_selection:
            n_kept = min(selection_count(schedule, episode_index), m)
        else:
            n_kept = m
        selected = select_top_n(table, n_kept)
        refined = refine_prototypes(protos, s_emb, episode.support_y, table,
                                    selected, u_emb)
    else:
        refined = protos

    loss, query_dist = _query_scores(refined, weights, q_emb, episode.query_y, mode)

    predictions = query_dist.argmin(axis=1)
    query_acc = float((predictions == episode.query_y).mean())

    pseudo_precision = None
    if hidden_truth is not None and class_ids is not None and selected.size:
        truth = np.asarray(hidden_truth)
        guessed = np.asarray(class_ids)[table.best_class[selected]]
        pseudo_precision = float((guessed == truth[selected]).mean())

    metrics = {
        **mode.flags(),
        "n": int(len(selected)),
        "query_acc": query_acc,
        "loss": float(loss.data),
        "pseudo_precision": pseudo_precision,
        "mean_best_distance": float(table.best_distance.mean()) if table else None,
    }
    return EpisodeResult(loss=loss, metrics=metrics, prototypes=refined.centers.data.copy(),
                         selected=selected, table=table)
