"""Empirical risk minimisation for retrieval-augmented models.

Four paradigms decide which networks move:

* ``no_retriever``: the store is replaced by one all-zero evidence and only
  the predictor trains;
* ``fixed_retriever``: the retriever stays at its initial value;
* ``fixed_predictor``: the predictor stays put (callers initialise it from a
  finished ``fixed_retriever`` run) and the retriever trains;
* ``joint``: both train.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .errors import ConfigError, TrainingDiverged
from .objectives import (ObjectiveKind, PDist, RceTopK, TopKCache, objective_eval, rce_exact,
                         rce_topk, retrieval_ce, subset_k, validate_objective)
from .ram import (DataStore, LabeledDataset, RamModel, clipped_nll, pair_inputs, predict_batch,
                  sample_evidences, score_matrix, softmax)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


class Paradigm(str, enum.Enum):
    NO_RETRIEVER = "no_retriever"
    FIXED_RETRIEVER = "fixed_retriever"
    FIXED_PREDICTOR = "fixed_predictor"
    JOINT = "joint"

    @property
    def trains_retriever(self) -> bool:
        return self in (Paradigm.FIXED_PREDICTOR, Paradigm.JOINT)

    @property
    def trains_predictor(self) -> bool:
        return self is not Paradigm.FIXED_PREDICTOR


@dataclass(frozen=True)
class TrainConfig:
    paradigm: Paradigm = Paradigm.JOINT
    objective: ObjectiveKind = field(default_factory=RceTopK)
    steps: int = 2000
    batch_size: int = 32
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    weight_decay: float = 0.1
    seed: int = 0
    ell_max: float | None = None  # None keeps the model's own level
    eval_every: int = 100
    grad_clip: float = 10.0

    def validate(self) -> None:
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("steps >= 0, batch_size >= 1 and eval_every >= 1 are required")
        if not self.peak_lr > 0:
            raise ConfigError("peak_lr must be positive")
        if self.steps and not 0 <= self.warmup_steps < self.steps:
            raise ConfigError("warmup_steps must lie in [0, steps)")
        if self.weight_decay < 0 or self.grad_clip <= 0:
            raise ConfigError("weight_decay must be >= 0 and grad_clip > 0")
        validate_objective(self.objective)


# Values used for the question-answering runs the method was designed around;
# far too slow for the toy networks here, kept for reference runs.
QA_SCALE_PRESET = dict(steps=40000, warmup_steps=2000, batch_size=64, peak_lr=1e-4, weight_decay=0.1)
QA_SCALE_TOPK = RceTopK(k=64, refresh_every=500)


@dataclass
class TraceRecord:
    step: int
    train_loss: float
    test_acc: float
    test_recall: float
    gnorm_theta: float
    gnorm_xi: float


@dataclass
class TrainTrace:
    records: list[TraceRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)

    HEADER = ("step", "train_loss", "test_acc", "test_recall", "gnorm_theta", "gnorm_xi")

    def rows(self):
        for r in self.records:
            yield [str(r.step)] + [repr(float(getattr(r, h))) for h in self.HEADER[1:]]


# -- schedule and optimiser ---------------------------------------------------------------

def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up from 0 to ``peak_lr``, then linear decay reaching 0 at ``steps``."""
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    return cfg.peak_lr * (cfg.steps - step) / (cfg.steps - cfg.warmup_steps)


@dataclass
class AdamMoments:
    first: nn.MlpParams
    second: nn.MlpParams

    @classmethod
    def zeros(cls, like: nn.MlpParams) -> AdamMoments:
        return cls(like.zeros_like(), like.zeros_like())


def adamw_step(params: nn.MlpParams, grads: nn.GradBuffer, moments: AdamMoments, step: int,
               lr: float, weight_decay: float) -> tuple[nn.MlpParams, AdamMoments]:
    """One AdamW update; ``step`` counts updates from 1 for bias correction.

    Decoupled decay ``p <- p - lr * wd * p`` is applied before the adaptive step.
    """
    if not grads.is_finite():
        raise TrainingDiverged(step, "non-finite gradient")
    c1 = 1.0 - BETA1 ** step
    c2 = 1.0 - BETA2 ** step
    new_p, new_m, new_v = params.zeros_like(), params.zeros_like(), params.zeros_like()
    for group in ("weights", "biases"):
        ps, gs = getattr(params, group), getattr(grads, group)
        ms, vs = getattr(moments.first, group), getattr(moments.second, group)
        for i, (p, g, m, v) in enumerate(zip(ps, gs, ms, vs)):
            m = BETA1 * m + (1.0 - BETA1) * g
            v = BETA2 * v + (1.0 - BETA2) * g * g
            p = p - lr * weight_decay * p
            p = p - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
            getattr(new_p, group)[i] = p
            getattr(new_m, group)[i] = m
            getattr(new_v, group)[i] = v
    return new_p, AdamMoments(new_m, new_v)


# -- training -------------------------------------------------------------------------------

def null_store(d_z: int) -> DataStore:
    return DataStore(np.zeros((1, d_z)))


def evaluate(model: RamModel, store: DataStore, test: LabeledDataset,
             test_oracle: np.ndarray | None = None) -> tuple[float, float]:
    """Top-1 test accuracy and oracle recall (0 when no oracle is given)."""
    cls, ev = predict_batch(model, store, test.xs)
    acc = float(np.mean(cls == test.ys))
    recall = float(np.mean(ev == test_oracle)) if test_oracle is not None else 0.0
    return acc, recall


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches from reshuffled epochs."""
    perm, pos = rng.permutation(n), 0
    while True:
        if pos + batch_size <= n:
            yield perm[pos:pos + batch_size]
            pos += batch_size
        else:
            head = perm[pos:]
            perm, pos = rng.permutation(n), batch_size - head.size
            yield np.concatenate([head, perm[:pos]])


def train(m0: RamModel, store: DataStore, data: LabeledDataset, test: LabeledDataset,
          cfg: TrainConfig, test_oracle: np.ndarray | None = None) -> tuple[RamModel, TrainTrace]:
    cfg.validate()
    paradigm = Paradigm(cfg.paradigm)
    model = m0.copy()
    if cfg.ell_max is not None:
        model = replace(model, ell_max=float(cfg.ell_max))
    trace = TrainTrace()
    if cfg.steps == 0:
        return model, trace

    if paradigm is Paradigm.NO_RETRIEVER:
        store = null_store(model.d_z)
        test_oracle = None
    ss = np.random.SeedSequence(cfg.seed).spawn(2)
    batch_rng, pg_rng = np.random.default_rng(ss[0]), np.random.default_rng(ss[1])
    k = subset_k(cfg.objective)
    cache = TopKCache(data.xs, k, cfg.objective.refresh_every) if k is not None else None
    mom_theta, mom_xi = AdamMoments.zeros(model.retriever), AdamMoments.zeros(model.predictor)
    batches = _batches(data.n, min(cfg.batch_size, data.n), batch_rng)
    window: list[float] = []

    for t in range(cfg.steps):
        rows = next(batches)
        batch = data.subset(rows)
        rep = objective_eval(cfg.objective, model, store, batch, cache=cache, rows=rows,
                             step=t, seed=pg_rng)
        g_theta, g_xi = rep.grad_theta, rep.grad_xi
        if isinstance(cfg.objective, PDist) and paradigm.trains_predictor:
            # the distillation loss only moves the retriever; the predictor
            # follows the joint objective on the same evidence subset
            if cache is None:
                g_xi = rce_exact(model, store, batch).grad_xi
            else:
                g_xi = rce_topk(model, store, batch, cache.lookup(rows)).grad_xi
        if not math.isfinite(rep.value):
            raise TrainingDiverged(t, "non-finite loss")
        if not paradigm.trains_retriever:
            g_theta = g_theta.zeros_like()
        if not paradigm.trains_predictor:
            g_xi = g_xi.zeros_like()
        raw_theta, raw_xi = math.sqrt(nn.sq_norm(g_theta)), math.sqrt(nn.sq_norm(g_xi))
        total = math.hypot(raw_theta, raw_xi)
        if not math.isfinite(total):
            raise TrainingDiverged(t, "non-finite gradient")
        scale = min(1.0, cfg.grad_clip / total) if total > 0 else 1.0
        lr = lr_at(t, cfg)
        if paradigm.trains_retriever:
            g = nn.add_scaled(g_theta.zeros_like(), g_theta, scale)
            retr, mom_theta = adamw_step(model.retriever, g, mom_theta, t + 1, lr, cfg.weight_decay)
            model = replace(model, retriever=retr)
        if paradigm.trains_predictor:
            g = nn.add_scaled(g_xi.zeros_like(), g_xi, scale)
            pred, mom_xi = adamw_step(model.predictor, g, mom_xi, t + 1, lr, cfg.weight_decay)
            model = replace(model, predictor=pred)
        if not (model.retriever.is_finite() and model.predictor.is_finite()):
            raise TrainingDiverged(t, "non-finite parameters")
        trace.step_losses.append(rep.value)
        window.append(rep.value)

        if (t + 1) % cfg.eval_every == 0 or t + 1 == cfg.steps:
            acc, recall = evaluate(model, store, test, test_oracle)
            trace.records.append(TraceRecord(t + 1, float(np.mean(window)), acc, recall,
                                             raw_theta, raw_xi))
            window = []
    return model, trace


def pretrain_retriever(model: RamModel, store: DataStore, xs: np.ndarray, targets: np.ndarray, *,
                       steps: int = 1000, batch_size: int = 64, peak_lr: float = 3e-3,
                       warmup_steps: int = 50, weight_decay: float = 0.1, seed: int = 0) -> RamModel:
    """Fit the retriever alone to supervised relevance labels ``targets``.

    Produces the starting retriever for the fixed-retriever, fixed-predictor
    and joint paradigms. The predictor is left untouched.
    """
    cfg = TrainConfig(steps=steps, batch_size=batch_size, peak_lr=peak_lr,
                      warmup_steps=warmup_steps, weight_decay=weight_decay, seed=seed)
    cfg.validate()
    xs = np.asarray(xs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    batches = _batches(xs.shape[0], min(batch_size, xs.shape[0]), np.random.default_rng(seed))
    retr, mom = model.retriever, AdamMoments.zeros(model.retriever)
    for t in range(steps):
        rows = next(batches)
        rep = retrieval_ce(replace(model, retriever=retr), store, xs[rows], targets[rows])
        if not math.isfinite(rep.value):
            raise TrainingDiverged(t, "non-finite pretraining loss")
        retr, mom = adamw_step(retr, rep.grad_theta, mom, t + 1, lr_at(t, cfg), weight_decay)
    return replace(model, retriever=retr)


# -- risk estimates ---------------------------------------------------------------------

def empirical_risk(model: RamModel, store: DataStore, data: LabeledDataset) -> float:
    """Clipped loss averaged exactly over the retriever distribution."""
    return rce_exact(model, store, data).value


def sampled_risk(model: RamModel, store: DataStore, data: LabeledDataset,
                 seed=0) -> tuple[float, float]:
    """Monte-Carlo risk with one evidence drawn per example; returns (mean, standard error)."""
    p = softmax(score_matrix(model, store, data.xs), axis=1)
    z = sample_evidences(p, 1, seed)
    h, _ = nn.forward_batch(model.predictor, pair_inputs(data.xs, store.evidences, z))
    loss, _ = clipped_nll(h, data.ys, model.ell_max)
    return float(loss.mean()), float(loss.std(ddof=1) / math.sqrt(loss.size))
