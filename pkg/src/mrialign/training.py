"""Optimizer, learning-rate schedule, contrastive pretraining and fine-tuning loops."""

from __future__ import annotations

import dataclasses
import logging
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .alignment import align_local, init_alignment_params
from .containers import IncompatibleCheckpointError, check_compatible
from .diffcore import Node
from .encoders import (EncoderOutput, ReportEncoderConfig, VolumeEncoderConfig, encode_report,
                       encode_volume, extract_attention_heatmap, freeze_prefix, init_projection_head,
                       init_report_params, init_volume_params, projection_head)
from .evaluation import (BinaryPredictions, HeatmapEvalConfig, UndefinedMetricError, auc,
                         explainability_scores, precision_recall_f1)
from .losses import (GlobalBatch, LossWeights, NegativeSamplingStrategy, TripletConfig,
                     global_loss, init_loss_weights, local_contrastive_loss, local_loss,
                     pairwise_contrastive_loss, total_loss)
from .synthdata import PatientRecord, make_folds

log = logging.getLogger(__name__)

ABLATION_MODES = ("full", "global-only", "local-only", "no-location", "contrastive", "hard-negative")


class PoisonedGradientError(FloatingPointError):
    pass


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    base_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: dict[str, Node], state: OptimizerState, lr: float | None = None) -> None:
    """One AdamW update from each parameter's ``grad``, in place.

    Frozen parameters and parameters that received no gradient are skipped.
    """
    lr = state.base_lr if lr is None else lr
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    live = [(n, p) for n, p in params.items() if p.requires_grad and p.grad is not None]
    for name, p in live:
        if not np.all(np.isfinite(p.grad)):
            raise PoisonedGradientError(f"non-finite gradient in parameter {name!r}")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in live:
        g = p.grad
        m = state.first_moment.get(name)
        if m is None:
            m = np.zeros_like(p.value)
            state.second_moment[name] = np.zeros_like(p.value)
        v = state.second_moment[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.first_moment[name], state.second_moment[name] = m, v
        p.value *= 1.0 - lr * state.weight_decay
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def reset_grads(params: dict[str, Node]) -> None:
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------- schedule

@dataclass(frozen=True)
class SchedulerConfig:
    warmup_epochs: int = 10
    decay_factor: float = 0.5
    decay_every: int = 10


def scheduler_lr(epoch: int, cfg: SchedulerConfig, base_lr: float) -> float:
    """Linear warm-up to ``base_lr``, then halve at the start of every decay block.

    Post-warm-up block b (0-based) runs at base * factor**(b + 1).
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < cfg.warmup_epochs:
        return base_lr * (epoch + 1) / cfg.warmup_epochs
    block = (epoch - cfg.warmup_epochs) // cfg.decay_every
    return base_lr * cfg.decay_factor ** (block + 1)


# ---------------------------------------------------------------- run config

@dataclass(frozen=True)
class TrainRunConfig:
    batch_size: int = 16
    pretrain_epochs: int = 340
    finetune_epochs: int = 20
    seed: int = 0
    strategy: str = "semihard:2"
    margin: float = 0.25
    location_coef: float = 0.5
    ablation_mode: str = "full"
    lr: float = 1e-4
    finetune_lr: float = 1e-4
    weight_decay: float = 0.01
    dropout: float = 0.25
    proj_dim: int = 64
    frozen_stages: int = 2
    text_frozen_layers: int = 1
    folds: int = 5
    warmup_epochs: int = 10
    decay_every: int = 10
    decay_factor: float = 0.5

    def __post_init__(self):
        if self.ablation_mode not in ABLATION_MODES:
            raise ValueError(f"ablation_mode must be one of {ABLATION_MODES}, got {self.ablation_mode!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        NegativeSamplingStrategy.parse(self.strategy)
        TripletConfig(self.margin, self.location_coef)

    @property
    def triplet(self) -> TripletConfig:
        return TripletConfig(self.margin, self.location_coef)

    @property
    def sampling(self) -> NegativeSamplingStrategy:
        if self.ablation_mode == "hard-negative":
            return NegativeSamplingStrategy("hard")
        return NegativeSamplingStrategy.parse(self.strategy)

    @property
    def scheduler(self) -> SchedulerConfig:
        return SchedulerConfig(self.warmup_epochs, self.decay_factor, self.decay_every)

    def replace(self, **changes) -> "TrainRunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {f.name: type(f.default) for f in dataclasses.fields(cls)}

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "TrainRunConfig":
        types = cls.field_types()
        unknown = set(values) - set(types)
        if unknown:
            raise KeyError(f"unknown config keys {sorted(unknown)}; valid keys: {sorted(types)}")
        return cls(**{k: types[k](v) for k, v in values.items()})


def streams(seed: int, *scope) -> dict[str, np.random.Generator]:
    """Independent named generators derived from one master seed."""
    def gen(name):
        key = [zlib.crc32(str(s).encode()) for s in (*scope, name)]
        return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))

    return {name: gen(name) for name in ("init", "shuffle", "sampler", "dropout")}


# ---------------------------------------------------------------- model

@dataclass(frozen=True)
class ModelShapes:
    volume: VolumeEncoderConfig
    report: ReportEncoderConfig

    @classmethod
    def for_data(cls, dims, vocab_size: int, run: TrainRunConfig) -> "ModelShapes":
        return cls(VolumeEncoderConfig(input_dims=tuple(dims), proj_dim=run.proj_dim, dropout_rate=run.dropout),
                   ReportEncoderConfig(vocab_size=vocab_size, frozen_prefix_layers=run.text_frozen_layers))


def init_framework_params(shapes: ModelShapes, rng: np.random.Generator) -> dict[str, Node]:
    """Every parameter of the contrastive framework, drawn in a fixed order."""
    v, r = shapes.volume, shapes.report
    params = init_volume_params(v, rng)
    params.update(init_report_params(r, rng))
    params.update(init_projection_head("head.img", v.global_dim, v.proj_dim, rng))
    params.update(init_projection_head("head.txt", r.embed_dim, v.proj_dim, rng))
    params.update(init_alignment_params(v.local_shape()[1], r.embed_dim, v.proj_dim, rng))
    params.update(init_loss_weights())
    return params


def _batch_arrays(records: list[PatientRecord], idx: np.ndarray):
    vols = np.stack([records[i].volume for i in idx])
    lengths = {len(records[i].report_tokens) for i in idx}
    if len(lengths) != 1:
        raise ValueError("reports in a batch must have equal token counts")
    toks = np.stack([records[i].report_tokens for i in idx])
    locs = np.array([records[i].location for i in idx])
    return vols, toks, locs


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < 2:
        tail = out.pop()
        out[-1] = np.concatenate([out[-1], tail])
    return out


@dataclass
class StepLosses:
    global_loss: Node
    local_loss: Node
    total: Node


def pretrain_step_loss(params: dict[str, Node], shapes: ModelShapes, run: TrainRunConfig,
                       vols, toks, locs, sampler_rng=None, dropout_rng=None,
                       negatives: dict | None = None, training: bool = True) -> StepLosses:
    """Forward pass of the framework on one batch under ``run.ablation_mode``.

    ``negatives`` may carry fixed {"global": ..., "local": ...} draws.
    """
    mode = run.ablation_mode
    negatives = negatives or {}
    vo = encode_volume(vols, shapes.volume, params, training, dropout_rng)
    to = encode_report(toks, shapes.report, params)
    weights = LossWeights.from_params(params)
    zero = dc.constant(0.0)

    g = zero
    if mode != "local-only":
        batch = GlobalBatch(projection_head(vo.global_rep, params, "head.img", training),
                            projection_head(to.global_rep, params, "head.txt", training), locs)
        if mode == "contrastive":
            g = pairwise_contrastive_loss(batch, run.margin)
        else:
            g = global_loss(batch, run.triplet, run.sampling, sampler_rng,
                            negatives=negatives.get("global"), use_location=mode != "no-location")
    l = zero
    if mode != "global-only":
        aligned = align_local(vo.local_rep, to.local_rep, params)
        if mode == "contrastive":
            l = local_contrastive_loss(aligned, run.margin)
        else:
            l = local_loss(aligned, run.triplet, run.sampling, sampler_rng, negatives=negatives.get("local"))

    if mode == "global-only":
        total = weights.alpha * g
    elif mode == "local-only":
        total = weights.beta * l
    else:
        total = total_loss(g, l, weights)
    return StepLosses(g, l, total)


TRAJECTORY_COLUMNS = ("epoch", "global_loss", "local_loss", "alpha", "beta", "total")


@dataclass
class PretrainResult:
    params: dict[str, Node]
    trajectory: list[dict[str, float]]
    shapes: ModelShapes

    def checkpoint_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.value for k, p in self.params.items()}

    def trajectory_csv(self) -> str:
        lines = [",".join(TRAJECTORY_COLUMNS)]
        for row in self.trajectory:
            lines.append(",".join([str(int(row["epoch"]))] + [repr(float(row[c])) for c in TRAJECTORY_COLUMNS[1:]]))
        return "\n".join(lines) + "\n"


def pretrain(records: list[PatientRecord], run: TrainRunConfig, params: dict[str, Node] | None = None,
             vocab_size: int = 64, epochs: int | None = None) -> PretrainResult:
    """Contrastive pretraining; returns final parameters and per-epoch mean losses."""
    if run.batch_size > len(records):
        raise ValueError(f"batch_size {run.batch_size} exceeds dataset size {len(records)}")
    shapes = ModelShapes.for_data(records[0].volume.shape, vocab_size, run)
    rngs = streams(run.seed, "pretrain")
    if params is None:
        params = init_framework_params(shapes, streams(run.seed)["init"])
    freeze_prefix(params, run.frozen_stages, "volume")
    freeze_prefix(params, run.text_frozen_layers, "report")
    state = OptimizerState(base_lr=run.lr, weight_decay=run.weight_decay)
    trajectory = []
    for epoch in range(run.pretrain_epochs if epochs is None else epochs):
        sums = np.zeros(5)
        batches = _batches(len(records), run.batch_size, rngs["shuffle"])
        for b, idx in enumerate(batches):
            try:
                vols, toks, locs = _batch_arrays(records, idx)
                reset_grads(params)
                losses = pretrain_step_loss(params, shapes, run, vols, toks, locs,
                                            rngs["sampler"], rngs["dropout"])
                dc.backward(losses.total)
                optimizer_step(params, state)
            except (ValueError, FloatingPointError, ArithmeticError) as exc:
                raise TrainingError(f"pretraining failed at epoch {epoch}, batch {b}: {exc}") from exc
            w = LossWeights.from_params(params)
            sums += [losses.global_loss.item(), losses.local_loss.item(),
                     w.alpha.item(), w.beta.item(), losses.total.item()]
        mean = sums / len(batches)
        trajectory.append(dict(zip(TRAJECTORY_COLUMNS, [epoch, *mean])))
        log.debug("pretrain epoch %d total %.5f", epoch, mean[-1])
    return PretrainResult(params, trajectory, shapes)


# ---------------------------------------------------------------- fine-tuning

def cross_entropy(logits: Node, labels) -> Node:
    labels = np.asarray(labels, dtype=np.int64)
    logp = dc.log_softmax_rows(logits)
    picked = logp[np.arange(len(labels)), labels]
    return -dc.mean(picked)


def init_classifier(shapes: ModelShapes, rng: np.random.Generator, n_classes: int = 2) -> dict[str, Node]:
    d = shapes.volume.global_dim
    return {"cls.w": dc.parameter(np.zeros((d, n_classes)), "cls.w"),
            "cls.b": dc.parameter(np.zeros(n_classes), "cls.b")}


def classifier_logits(vo: EncoderOutput, params: dict[str, Node]) -> Node:
    return vo.global_rep @ params["cls.w"] + params["cls.b"]


def volume_params_from(source: dict[str, np.ndarray] | None, shapes: ModelShapes, seed: int) -> dict[str, Node]:
    """Volume-encoder parameters from a checkpoint, or the seed's random initialization."""
    fresh = {k: p for k, p in init_framework_params(shapes, streams(seed)["init"]).items()
             if k.startswith("vol.")}
    if source is None:
        return fresh
    check_compatible({k: p.shape for k, p in fresh.items()}, source)
    return {k: Node(np.array(source[k], dtype=np.float64), requires_grad=p.requires_grad, name=k)
            for k, p in fresh.items()}


@dataclass
class FoldResult:
    fold: int
    internal: dict[str, float]
    external: dict[str, float]
    params: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    losses: list[float] = field(default_factory=list)


def predict(records: list[PatientRecord], idx, params: dict[str, Node], shapes: ModelShapes,
            batch_size: int = 64) -> tuple[np.ndarray, list[np.ndarray]]:
    """Positive-class probabilities and per-patient attention matrices (no dropout)."""
    scores, attn = [], []
    idx = np.asarray(idx)
    for start in range(0, len(idx), batch_size):
        chunk = idx[start:start + batch_size]
        vo = encode_volume(np.stack([records[i].volume for i in chunk]), shapes.volume, params)
        logits = classifier_logits(vo, params).value
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        scores.append(e[:, 1] / e.sum(axis=1))
        attn.extend(vo.attn_weights.value)
    return np.concatenate(scores), attn


def evaluate_classifier(records: list[PatientRecord], idx, params: dict[str, Node], shapes: ModelShapes,
                        heatmap_cfg: HeatmapEvalConfig = HeatmapEvalConfig()) -> dict[str, float]:
    idx = np.asarray(idx)
    scores, attn = predict(records, idx, params, shapes)
    labels = np.array([records[i].marker_label for i in idx])
    preds = BinaryPredictions(scores, labels)
    try:
        auc_value = auc(preds)
    except UndefinedMetricError:
        auc_value = float("nan")
    prf = precision_recall_f1(preds)
    d2, d3 = [], []
    for i, weights in zip(idx, attn):
        out = EncoderOutput(None, None, Node(weights), shapes.volume.stage_grid(4))
        heatmap = extract_attention_heatmap(out, shapes.volume.input_dims)
        a, b = explainability_scores(heatmap, records[i].seg_mask, heatmap_cfg)
        d2.append(a)
        d3.append(b)
    return {"auc": auc_value, "precision": prf.precision, "recall": prf.recall, "f1": prf.f1,
            "dice2d": float(np.mean(d2)), "dice3d": float(np.mean(d3))}


def finetune_fold(records: list[PatientRecord], train_idx, run: TrainRunConfig, shapes: ModelShapes,
                  init: dict[str, np.ndarray] | None, fold: int = 0) -> tuple[dict[str, Node], list[float]]:
    """Train the classifier on ``train_idx``; returns parameters and per-epoch mean loss."""
    params = volume_params_from(init, shapes, run.seed)
    rngs = streams(run.seed, "finetune", fold)
    params.update(init_classifier(shapes, streams(run.seed, "classifier")["init"]))
    freeze_prefix(params, run.frozen_stages, "volume")
    state = OptimizerState(base_lr=run.finetune_lr, weight_decay=run.weight_decay)
    train_idx = np.asarray(train_idx)
    losses = []
    for epoch in range(run.finetune_epochs):
        lr = scheduler_lr(epoch, run.scheduler, run.finetune_lr)
        total = 0.0
        batches = _batches(len(train_idx), run.batch_size, rngs["shuffle"])
        for idx in batches:
            chunk = train_idx[idx]
            vols = np.stack([records[i].volume for i in chunk])
            labels = [records[i].marker_label for i in chunk]
            reset_grads(params)
            vo = encode_volume(vols, shapes.volume, params, True, rngs["dropout"])
            loss = cross_entropy(classifier_logits(vo, params), labels)
            dc.backward(loss)
            optimizer_step(params, state, lr)
            total += loss.item()
        losses.append(total / len(batches))
    return params, losses


def finetune(records: list[PatientRecord], run: TrainRunConfig, init: dict[str, np.ndarray] | None = None,
             external: list[PatientRecord] | None = None, vocab_size: int = 64,
             keep_params: bool = False) -> list[FoldResult]:
    """Stratified k-fold fine-tuning of the volume encoder plus a linear head.

    ``init`` is a checkpoint's arrays (pretrained) or None (random). Every fold
    model is scored on its held-out fold and, if given, on ``external``.
    """
    shapes = ModelShapes.for_data(records[0].volume.shape, vocab_size, run)
    results = []
    for fold, (train_idx, test_idx) in enumerate(make_folds(records, run.folds, run.seed)):
        params, losses = finetune_fold(records, train_idx, run, shapes, init, fold)
        internal = evaluate_classifier(records, test_idx, params, shapes)
        ext = evaluate_classifier(external, np.arange(len(external)), params, shapes) if external else {}
        results.append(FoldResult(fold, internal, ext,
                                  {k: p.value.copy() for k, p in params.items()} if keep_params else {},
                                  losses))
    return results
