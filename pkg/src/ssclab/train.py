"""Adam, plateau scheduling and the consistency-regularized training loop."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .consistency import (ConsistencyConfig, ConsistencyMemory, aggregate_cams,
                          batch_aggregates, freeze_from_baseline, save_memory, semc_loss,
                          spac_loss, update_memory, weighted_gap)
from .data import AugmentationConfig, Dataset, iterate_batches, positive_ratios
from .loss import AttributeStats, LossBreakdown, bce_loss, gate_open, total_loss, weighted_bce
from .metrics import EvalReport, evaluate
from .nn import BackboneConfig, Model, compute_cams, save_checkpoint

log = logging.getLogger(__name__)

TRAIN_VARIANTS = ("baseline", "soft", "hard", "fix")
HISTORY_COLUMNS = ("epoch", "lr", "train_cls", "train_spac", "train_semc", "val_loss",
                   "val_mA", "val_accu", "val_prec", "val_recall", "val_f1")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch, batch, terms):
        self.epoch, self.batch, self.terms = epoch, batch, terms
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {terms}")


class MissingGradError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 5e-4
    batch_size: int = 32
    epochs: int = 30
    scheduler_factor: float = 0.1
    scheduler_patience: int = 4
    scheduler_threshold: float = 1e-4
    seed: int = 0
    variant: str = "soft"
    weighted_loss: bool = True
    consistency_enabled: bool = True
    augment: bool = True
    dtype: str = "float32"
    eval_batch_size: int = 250
    prior_bias: bool = True
    consistency: ConsistencyConfig = field(default_factory=ConsistencyConfig)

    def __post_init__(self):
        if isinstance(self.consistency, dict):
            self.consistency = ConsistencyConfig(**self.consistency)
        if self.variant not in TRAIN_VARIANTS:
            raise ValueError(f"variant must be one of {TRAIN_VARIANTS}, got {self.variant!r}")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("lr and batch_size must be positive, epochs non-negative")
        if self.scheduler_patience < 1:
            raise ValueError("scheduler_patience must be >= 1")
        if not 0 < self.scheduler_factor < 1:
            raise ValueError("scheduler_factor must lie in (0, 1)")

    def resolved(self) -> "TrainConfig":
        """Fold ``variant`` into the consistency settings."""
        c = self.consistency
        if self.variant == "baseline":
            c = replace(c, lambda1=0.0, lambda2=0.0, variant="soft")
        else:
            c = replace(c, variant=self.variant)
        return replace(self, consistency=c)

    def to_dict(self):
        return asdict(self)


# -- optimizer -------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr, wd=0.0):
    """In-place bias-corrected Adam with L2 decay folded into the gradient."""
    if any(g is None for g in grads):
        raise MissingGradError("every parameter needs a gradient before adam_step")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if wd:
            g = g + wd * p
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    def __init__(self, params, lr=1e-4, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.state = AdamState.for_params([p.data for p in self.params])

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        missing = [p.name for p in self.params if p.grad is None]
        if missing:
            raise MissingGradError(f"no gradient for {missing}")
        adam_step([p.data for p in self.params], [p.grad for p in self.params],
                  self.state, self.lr, self.weight_decay)


class PlateauScheduler:
    """Multiply the lr by ``factor`` once ``patience`` consecutive epochs fail to
    improve the best monitored loss by more than ``threshold`` (relative)."""

    def __init__(self, lr, factor=0.1, patience=4, threshold=1e-4):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.best = math.inf
        self.bad_epochs = 0
        self.reductions = 0

    def step(self, loss):
        if loss < self.best * (1 - self.threshold) or self.best == math.inf:
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.reductions += 1
                self.bad_epochs = 0
        return self.lr

    def reset(self):
        """Forget the best loss (the monitored objective changed); keep the lr."""
        self.best = math.inf
        self.bad_epochs = 0


# -- training loop ---------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    cls: float
    spac: float
    semc: float
    total: float
    steps: int
    seconds: float


@dataclass
class StepInfo:
    epoch: int
    batch: int
    breakdown: LossBreakdown
    n_q: np.ndarray | None
    n_p: np.ndarray | None
    memory_before: ConsistencyMemory | None
    memory: ConsistencyMemory | None


def new_memory(model: Model, config: BackboneConfig | None = None):
    cfg = config or model.backbone.config
    h, w = cfg.feature_extents()
    return ConsistencyMemory.zeros(model.num_attributes, h, w, cfg.out_channels)


def _consistency_terms(fb, weight, labels, memory, ccfg, epoch):
    """Batch aggregates plus, when the gate is open, the weighted-in regularizers.

    A regularizer whose lambda is zero is not built at all.
    """
    gate = gate_open(epoch, ccfg.initial_epoch)
    want_spac = gate and ccfg.lambda1 > 0
    want_semc = gate and ccfg.lambda2 > 0
    agg = batch_aggregates(fb.features.data, compute_cams(fb.features.data, weight.data),
                           fb.probs, labels, ccfg, differentiable=False)
    zero = T.Tensor(np.zeros((), dtype=fb.logits.dtype))
    spac = semc = zero
    if want_spac or want_semc:
        positives = np.asarray(labels) == 1
        cams = compute_cams(fb.features, weight)
        if want_spac:
            spac = spac_loss(aggregate_cams(cams, positives)[0], agg.n_p, memory, ccfg.eps)
        if want_semc:
            v_p = aggregate_cams(weighted_gap(fb.features, cams), positives)[0]
            semc = semc_loss(v_p, agg.n_p, memory, ccfg.eps)
    return agg, spac, semc


def classification_loss(logits, labels, cfg: TrainConfig, stats: AttributeStats):
    if cfg.weighted_loss:
        return weighted_bce(logits, labels, stats)
    return bce_loss(logits, labels)


def train_epoch(model: Model, memory: ConsistencyMemory | None, dataset: Dataset,
                cfg: TrainConfig, epoch: int, optimizer: Adam, stats: AttributeStats,
                on_step: Callable[[StepInfo], None] | None = None) -> EpochStats:
    """One pass: forward, CAMs, losses against the pre-step memory, backward,
    Adam step, then the memory update from the batch's qualified samples."""
    ccfg = cfg.consistency
    use_consistency = cfg.consistency_enabled and memory is not None
    aug = AugmentationConfig(enabled=cfg.augment)
    sums = np.zeros(4)
    steps = 0
    t0 = time.perf_counter()
    for b, (images, labels, _) in enumerate(
            iterate_batches(dataset, cfg.batch_size, cfg.seed, epoch, True, aug)):
        fb = model(images, labels)
        cls = classification_loss(fb.logits, labels, cfg, stats)
        agg = None
        if use_consistency:
            agg, spac, semc = _consistency_terms(fb, model.head.weight, labels, memory, ccfg,
                                                 epoch)
            breakdown = total_loss(cls, spac, semc, epoch, ccfg)
        else:
            breakdown = LossBreakdown(cls, cls.item(), 0.0, 0.0, False)
        terms = (breakdown.cls, breakdown.spac, breakdown.semc, breakdown.total_value)
        if not all(math.isfinite(t) for t in terms):
            raise NonFiniteLossError(epoch, b, dict(zip(("cls", "spac", "semc", "total"), terms)))
        optimizer.zero_grad()
        T.backward(breakdown.total)
        optimizer.step()
        before = memory.copy() if (on_step is not None and use_consistency) else None
        if use_consistency:
            update_memory(memory, agg.a_q, agg.v_q, agg.n_q, ccfg)
        if on_step is not None:
            on_step(StepInfo(epoch, b, breakdown, agg.n_q if agg else None,
                             agg.n_p if agg else None, before, memory if use_consistency else None))
        sums += terms
        steps += 1
    means = sums / max(steps, 1)
    return EpochStats(epoch, *means, steps, time.perf_counter() - t0)


def predict(model: Model, dataset: Dataset, batch_size: int = 250):
    """Probabilities, features and CAMs are not retained; returns (probs, logits)."""
    probs, logits = [], []
    with T.no_grad():
        for images, _, _ in iterate_batches(dataset, batch_size, shuffle=False):
            fb = model(images)
            probs.append(fb.probs)
            logits.append(fb.logits.data)
    return np.concatenate(probs), np.concatenate(logits)


def evaluate_model(model: Model, dataset: Dataset, cfg: TrainConfig, stats: AttributeStats,
                   memory: ConsistencyMemory | None = None, epoch: int = 0):
    """EvalReport plus the total loss (classification and gated consistency terms)."""
    ccfg = cfg.consistency
    total, n = 0.0, 0
    probs = []
    with T.no_grad():
        for images, labels, _ in iterate_batches(dataset, cfg.eval_batch_size, shuffle=False):
            fb = model(images, labels)
            cls = classification_loss(fb.logits, labels, cfg, stats)
            if cfg.consistency_enabled and memory is not None:
                _, spac, semc = _consistency_terms(fb, model.head.weight, labels, memory, ccfg,
                                                   epoch)
                value = total_loss(cls, spac, semc, epoch, ccfg).total_value
            else:
                value = cls.item()
            total += value * len(labels)
            n += len(labels)
            probs.append(fb.probs)
    report = evaluate(np.concatenate(probs), dataset.labels, attribute_names=dataset.attribute_names)
    return report, total / n


@dataclass
class FitResult:
    config: TrainConfig
    model: Model
    memory: ConsistencyMemory | None
    history: list
    best_state: dict
    best_epoch: int
    best_report: EvalReport | None
    stage_one: "FitResult | None" = None

    @property
    def best_mA(self):
        return self.best_report.mA if self.best_report else float("nan")

    def best_model(self) -> Model:
        m = Model(self.model.num_attributes, self.model.backbone.config, dtype=self.model.dtype)
        m.load_state_dict(self.best_state)
        return m

    def history_csv(self) -> str:
        return history_to_csv(self.history)


def history_to_csv(history) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_COLUMNS)
    for row in history:
        writer.writerow([row["epoch"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])
    return buf.getvalue()


def init_prior_bias(model: Model, stats: AttributeStats, weighted: bool = True):
    """Set head biases to the best constant predictor of the training objective.

    For positive rate ``r`` and class weights ``w1, w0`` the weighted BCE of a
    constant probability is minimized at ``p = w1 r / (w1 r + w0 (1 - r))``.
    """
    r = np.clip(stats.ratios, 1e-3, 1 - 1e-3)
    w1, w0 = (np.exp(1 - r), np.exp(r)) if weighted else (1.0, 1.0)
    p = w1 * r / (w1 * r + w0 * (1 - r))
    model.head.bias.data = np.log(p / (1 - p)).astype(model.head.bias.dtype)
    return model


def fit(cfg: TrainConfig, train: Dataset, val: Dataset, out_dir=None,
        backbone: BackboneConfig = BackboneConfig(), stage_one: FitResult | None = None,
        on_step=None, on_epoch=None) -> FitResult:
    """Train for ``cfg.epochs``, keeping the parameters with the best validation mA.

    The fix variant first trains (or reuses) a baseline, freezes the spatial
    memory from its qualified CAMs over the training set and then trains a
    freshly initialized model against that memory.
    """
    cfg = cfg.resolved()
    ccfg = cfg.consistency
    dtype = np.dtype(cfg.dtype)
    stats = positive_ratios(train.labels)
    if train.num_attributes != val.num_attributes:
        raise ValueError("train and validation attribute counts differ")

    model = Model(train.num_attributes, backbone, seed=cfg.seed, dtype=dtype)
    if cfg.prior_bias:
        init_prior_bias(model, stats, cfg.weighted_loss)
    memory = new_memory(model) if cfg.consistency_enabled else None
    if cfg.variant == "fix":
        if stage_one is None:
            log.info("fix variant: training stage-one baseline")
            stage_one = fit(replace(cfg, variant="baseline"), train, val, None, backbone)
        baseline = stage_one.best_model()
        batches = ((imgs, labels) for imgs, labels, _ in
                   iterate_batches(train, cfg.eval_batch_size, shuffle=False))
        memory = freeze_from_baseline(baseline, batches, ccfg, memory or new_memory(model))

    optimizer = Adam(model.parameters(), cfg.lr, cfg.weight_decay)
    scheduler = PlateauScheduler(cfg.lr, cfg.scheduler_factor, cfg.scheduler_patience,
                                 cfg.scheduler_threshold)
    consistency_active = cfg.consistency_enabled and (ccfg.lambda1 > 0 or ccfg.lambda2 > 0)
    history = []
    best_state, best_epoch, best_report = model.state_dict(), -1, None
    for epoch in range(cfg.epochs):
        optimizer.lr = scheduler.lr
        es = train_epoch(model, memory, train, cfg, epoch, optimizer, stats, on_step)
        report, val_loss = evaluate_model(model, val, cfg, stats, memory, epoch)
        row = {"epoch": epoch, "lr": optimizer.lr, "train_cls": es.cls, "train_spac": es.spac,
               "train_semc": es.semc, "val_loss": val_loss, "val_mA": report.mA,
               "val_accu": report.accu, "val_prec": report.prec, "val_recall": report.recall,
               "val_f1": report.f1}
        history.append(row)
        log.info("epoch %d lr %.1e cls %.4f spac %.4f semc %.4f val_loss %.4f val_mA %.4f (%.1fs)",
                 epoch, optimizer.lr, es.cls, es.spac, es.semc, val_loss, report.mA, es.seconds)
        if best_report is None or report.mA > best_report.mA:
            best_state, best_epoch, best_report = model.state_dict(), epoch, report
        if consistency_active and epoch == ccfg.initial_epoch + 1:
            # the gated terms join the monitored loss here; earlier values are not comparable
            scheduler.reset()
        scheduler.step(val_loss)
        if on_epoch is not None:
            on_epoch(epoch, row, memory)

    result = FitResult(cfg, model, memory, history, best_state, best_epoch, best_report, stage_one)
    if out_dir is not None:
        write_run(result, out_dir)
    return result


def write_run(result: FitResult, out_dir, config_doc: dict | None = None):
    """Checkpoint, memory dump, history CSV, resolved config and report.

    ``config_doc`` replaces the training config in ``config.json`` when the
    caller holds a fuller record (data and model sections, paths).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.bin", result.best_state)
    memory = result.memory
    if memory is None:
        memory = new_memory(result.model)
    save_memory(out / "memory.bin", memory)
    (out / "history.csv").write_text(result.history_csv())
    doc = result.config.to_dict() if config_doc is None else config_doc
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    report = {"best_epoch": result.best_epoch,
              "val": result.best_report.to_dict() if result.best_report else None}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return out
