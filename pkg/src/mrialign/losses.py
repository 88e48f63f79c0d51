"""Triplet losses for image/report alignment and the negative samplers they use.

Distances are cosine distances, ``1 - cos``. The global loss weights the
negative distance by ``c`` when anchor and negative share a tumour location.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .alignment import LocalAlignment
from .diffcore import Node

MIN_LOSS_WEIGHT = 0.05


class BatchTooSmallError(ValueError):
    pass


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 0.25
    location_coef: float = 0.5

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if not 0 < self.location_coef < 1:
            raise ValueError(f"location_coef must lie in (0, 1), got {self.location_coef}")


@dataclass(frozen=True)
class NegativeSamplingStrategy:
    kind: str = "semi-hard"
    sample_size: int = 2

    def __post_init__(self):
        if self.kind not in ("random", "semi-hard", "hard"):
            raise ValueError(f"unknown negative sampling kind {self.kind!r}")
        if self.sample_size < 1:
            raise ValueError("sample_size must be >= 1")

    @classmethod
    def parse(cls, text: str) -> "NegativeSamplingStrategy":
        """Parse ``random``, ``hard`` or ``semihard:S``."""
        text = text.strip().lower()
        if text in ("random", "hard"):
            return cls(text)
        if text.startswith(("semihard", "semi-hard")):
            _, _, size = text.partition(":")
            return cls("semi-hard", int(size) if size else 2)
        raise ValueError(f"cannot parse negative sampling strategy {text!r}")

    def __str__(self) -> str:
        return f"semihard:{self.sample_size}" if self.kind == "semi-hard" else self.kind


@dataclass
class GlobalBatch:
    img_reps: Node
    txt_reps: Node
    location_labels: np.ndarray

    def __post_init__(self):
        self.img_reps = dc.constant(self.img_reps)
        self.txt_reps = dc.constant(self.txt_reps)
        self.location_labels = np.asarray(self.location_labels, dtype=np.int64)
        if self.img_reps.shape != self.txt_reps.shape or self.img_reps.ndim != 2:
            raise dc.DimensionError(
                f"image/text batches must be matching [n x d], got {self.img_reps.shape} and {self.txt_reps.shape}")
        if len(self.location_labels) != len(self):
            raise ValueError("one location label per pair required")

    def __len__(self) -> int:
        return self.img_reps.shape[0]


@dataclass
class LossWeights:
    alpha_raw: Node
    beta_raw: Node

    @classmethod
    def from_params(cls, params: dict[str, Node]) -> "LossWeights":
        return cls(params["loss.alpha_raw"], params["loss.beta_raw"])

    @property
    def alpha(self) -> Node:
        return dc.clamp_min(self.alpha_raw, MIN_LOSS_WEIGHT)

    @property
    def beta(self) -> Node:
        return dc.clamp_min(self.beta_raw, MIN_LOSS_WEIGHT)


def init_loss_weights(alpha: float = 1.0, beta: float = 1.0) -> dict[str, Node]:
    return {"loss.alpha_raw": dc.parameter(alpha, "loss.alpha_raw"),
            "loss.beta_raw": dc.parameter(beta, "loss.beta_raw")}


# ---------------------------------------------------------------- sampling

def cosine_distances(anchors: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    a = anchors / np.linalg.norm(anchors, axis=-1, keepdims=True)
    b = candidates / np.linalg.norm(candidates, axis=-1, keepdims=True)
    return 1.0 - a @ b.T


def _pick(j: int, dist_row: np.ndarray, strategy: NegativeSamplingStrategy,
          rng: np.random.Generator) -> int:
    n = len(dist_row)
    others = np.delete(np.arange(n), j)
    if strategy.kind == "random":
        return int(others[rng.integers(n - 1)])
    if strategy.kind == "hard":
        return int(others[np.argmin(dist_row[others])])
    # A batch with fewer than s other pairs offers all of them as candidates.
    drawn = np.sort(rng.choice(others, size=min(strategy.sample_size, n - 1), replace=False))
    chosen = int(drawn[np.argmin(dist_row[drawn])])
    assert np.all(dist_row[chosen] <= dist_row[drawn])
    return chosen


def choose_negatives(dist: np.ndarray, strategy: NegativeSamplingStrategy,
                     rng: np.random.Generator) -> np.ndarray:
    """One negative per anchor row of the [n x n] anchor/candidate distance matrix."""
    n = dist.shape[0]
    if n < 2:
        raise BatchTooSmallError(f"negative sampling needs at least 2 pairs, got {n}")
    return np.array([_pick(j, dist[j], strategy, rng) for j in range(n)], dtype=np.int64)


def sample_negative(anchor_idx: int, batch: GlobalBatch, strategy: NegativeSamplingStrategy,
                    anchor_modality: str, rng: np.random.Generator) -> int:
    if len(batch) < 2:
        raise BatchTooSmallError(f"negative sampling needs at least 2 pairs, got {len(batch)}")
    if anchor_modality == "image":
        anchors, candidates = batch.img_reps.value, batch.txt_reps.value
    elif anchor_modality == "text":
        anchors, candidates = batch.txt_reps.value, batch.img_reps.value
    else:
        raise ValueError(f"anchor_modality must be 'image' or 'text', got {anchor_modality!r}")
    dist = cosine_distances(anchors[anchor_idx:anchor_idx + 1], candidates)[0]
    return _pick(anchor_idx, dist, strategy, rng)


# ---------------------------------------------------------------- global loss

def location_weighted_triplet(cos_ap: Node, cos_an: Node, same_location, coef: float,
                              margin: float) -> Node:
    """Per-anchor hinge max(0, d_pos - ((1 - l) + c l) d_neg + m)."""
    same = np.asarray(same_location, dtype=np.float64)
    weight = (1.0 - same) + coef * same
    d_pos = 1.0 - dc.constant(cos_ap)
    d_neg = 1.0 - dc.constant(cos_an)
    return dc.relu(d_pos - d_neg * weight + margin)


def draw_global_negatives(batch: GlobalBatch, strategy: NegativeSamplingStrategy,
                          rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Negatives for image anchors, then (independently) for text anchors."""
    img, txt = batch.img_reps.value, batch.txt_reps.value
    neg_for_img = choose_negatives(cosine_distances(img, txt), strategy, rng)
    neg_for_txt = choose_negatives(cosine_distances(txt, img), strategy, rng)
    return neg_for_img, neg_for_txt


def global_loss(batch: GlobalBatch, cfg: TripletConfig, strategy: NegativeSamplingStrategy,
                rng: np.random.Generator | None = None,
                negatives: tuple[np.ndarray, np.ndarray] | None = None,
                use_location: bool = True) -> Node:
    """Location-weighted triplet loss summed over both anchor directions.

    Pass ``negatives`` to reuse a fixed draw (gradient checks, replays).
    """
    if len(batch) < 2:
        raise BatchTooSmallError(f"global loss needs at least 2 pairs, got {len(batch)}")
    if negatives is None:
        negatives = draw_global_negatives(batch, strategy, rng)
    labels = batch.location_labels
    total = None
    for anchors, positives, neg_idx in ((batch.img_reps, batch.txt_reps, negatives[0]),
                                        (batch.txt_reps, batch.img_reps, negatives[1])):
        same = labels == labels[neg_idx] if use_location else np.zeros(len(labels), bool)
        terms = location_weighted_triplet(dc.cosine_similarity(anchors, positives),
                                          dc.cosine_similarity(anchors, positives[neg_idx]),
                                          same, cfg.location_coef, cfg.margin)
        total = dc.sum(terms) if total is None else total + dc.sum(terms)
    return total


# ---------------------------------------------------------------- local loss

LOCAL_TERMS = (("img", "orig"), ("img", "weighted"), ("txt", "orig"), ("txt", "weighted"))


def _pooled_local(aligned: LocalAlignment) -> dict[str, tuple[Node, Node]]:
    """Mean-pooled (original, weighted) pairs per modality, each [n x d]."""
    return {
        "img": (dc.mean(aligned.img_local_proj, axis=-2), dc.mean(aligned.img_weighted, axis=-2)),
        "txt": (dc.mean(aligned.txt_local_proj, axis=-2), dc.mean(aligned.txt_weighted, axis=-2)),
    }


def _anchor_positive(pooled, modality: str, anchor_kind: str) -> tuple[Node, Node]:
    orig, weighted = pooled[modality]
    return (orig, weighted) if anchor_kind == "orig" else (weighted, orig)


def draw_local_negatives(aligned: LocalAlignment, strategy: NegativeSamplingStrategy,
                         rng: np.random.Generator) -> dict[tuple[str, str], np.ndarray]:
    pooled = _pooled_local(aligned)
    out = {}
    for modality, anchor_kind in LOCAL_TERMS:
        a, p = _anchor_positive(pooled, modality, anchor_kind)
        out[(modality, anchor_kind)] = choose_negatives(cosine_distances(a.value, p.value), strategy, rng)
    return out


def local_loss(aligned: LocalAlignment, cfg: TripletConfig, strategy: NegativeSamplingStrategy,
               rng: np.random.Generator | None = None,
               negatives: dict[tuple[str, str], np.ndarray] | None = None) -> Node:
    """Triplet loss between pooled local representations and their weighted counterparts.

    For each modality, the original is anchored against its own weighted
    version and vice versa; the negative is the counterpart of another pair.
    """
    pooled = _pooled_local(aligned)
    n = pooled["img"][0].shape[0]
    if n < 2:
        raise BatchTooSmallError(f"local loss needs at least 2 pairs, got {n}")
    if negatives is None:
        negatives = draw_local_negatives(aligned, strategy, rng)
    total = None
    for modality, anchor_kind in LOCAL_TERMS:
        a, p = _anchor_positive(pooled, modality, anchor_kind)
        neg = p[negatives[(modality, anchor_kind)]]
        d_pos = 1.0 - dc.cosine_similarity(a, p)
        d_neg = 1.0 - dc.cosine_similarity(a, neg)
        term = dc.sum(dc.relu(d_pos - d_neg + cfg.margin))
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------- ablation + total

def pairwise_contrastive(anchors: Node, positives: Node, margin: float) -> Node:
    """Margin-based pairwise loss in both anchor directions.

    Positive pairs contribute their distance; every mismatched pair closer than
    ``margin`` contributes ``margin - distance``.
    """
    n = anchors.shape[0]
    if n < 2:
        raise BatchTooSmallError(f"contrastive loss needs at least 2 pairs, got {n}")
    off_diag = 1.0 - np.eye(n)
    total = None
    for a, p in ((anchors, positives), (positives, anchors)):
        dist = 1.0 - dc.cosine_matrix(a, p)
        pos = dc.sum(dist * np.eye(n))
        neg = dc.sum(dc.relu(margin - dist) * off_diag)
        total = pos + neg if total is None else total + pos + neg
    return total


def pairwise_contrastive_loss(batch: GlobalBatch, margin: float) -> Node:
    return pairwise_contrastive(batch.img_reps, batch.txt_reps, margin)


def local_contrastive_loss(aligned: LocalAlignment, margin: float) -> Node:
    pooled = _pooled_local(aligned)
    return pairwise_contrastive(*pooled["img"], margin) + pairwise_contrastive(*pooled["txt"], margin)


def total_loss(g: Node, l: Node, w: LossWeights) -> Node:
    return w.alpha * dc.constant(g) + w.beta * dc.constant(l)
