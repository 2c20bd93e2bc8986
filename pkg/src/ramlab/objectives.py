"""End-to-end training objectives and their parameter gradients.

Every objective works on an index matrix ``idx[i, j]`` naming which
evidences enter example ``i``'s sum. The full data-store is the special
case ``idx[i] = 0..m-1``; top-K variants pass a (possibly stale) cache.
Retriever probabilities are always the softmax over the scores of the
indexed evidences, so a subset is renormalised.

Gradients are obtained by computing the upstream derivative of the batch
objective with respect to every retriever score and predictor logit, then
running one batched backward pass per network.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import nn
from .errors import ConfigError, NumericalDomainError, ShapeError
from .ram import (DataStore, LabeledDataset, RamModel, clipped_nll, log_softmax,
                  pair_inputs, sample_evidences, score_matrix, softmax, top_k_indices)

MARGINAL_FLOOR = 1e-300


# -- objective kinds ---------------------------------------------------------------

@dataclass(frozen=True)
class RceExact:
    """Expected (clipped) predictor loss under the retriever, summed over the whole store."""
    clip: bool = True
    name = "rce_exact"


@dataclass(frozen=True)
class Emdr2:
    """Negative log of the retrieval-marginalised label likelihood.

    ``k=None`` sums over the whole store; otherwise over a top-k cache.
    """
    k: int | None = None
    refresh_every: int = 100
    name = "emdr2"


@dataclass(frozen=True)
class PDist:
    """Cross-entropy from the predictor-utility distribution to the retriever."""
    k: int | None = None
    refresh_every: int = 100
    name = "pdist"


@dataclass(frozen=True)
class RceTopK:
    k: int = 8
    refresh_every: int = 100
    name = "rce_topk"


@dataclass(frozen=True)
class RcePG:
    k: int = 8
    baseline: float = 5.0
    name = "rce_pg"


ObjectiveKind = Union[RceExact, Emdr2, PDist, RceTopK, RcePG]

_KINDS = {"rce_exact": RceExact, "emdr2": Emdr2, "pdist": PDist, "rce_topk": RceTopK, "rce_pg": RcePG}


def objective_from_dict(obj: dict | str) -> ObjectiveKind:
    if isinstance(obj, str):
        obj = {"kind": obj}
    obj = dict(obj)
    kind = obj.pop("kind", None)
    if kind not in _KINDS:
        raise ConfigError(f"unknown objective {kind!r}; expected one of {sorted(_KINDS)}")
    try:
        out = _KINDS[kind](**obj)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for objective {kind}: {exc}") from exc
    validate_objective(out)
    return out


def objective_to_dict(kind: ObjectiveKind) -> dict:
    d = {"kind": kind.name}
    d.update(kind.__dict__)
    return d


def validate_objective(kind: ObjectiveKind) -> None:
    k = getattr(kind, "k", 1)
    if k is not None and k < 1:
        raise ConfigError(f"{kind.name}: k must be >= 1")
    if getattr(kind, "refresh_every", 1) < 1:
        raise ConfigError(f"{kind.name}: refresh_every must be >= 1")


@dataclass
class LossReport:
    value: float
    grad_theta: nn.GradBuffer
    grad_xi: nn.GradBuffer
    per_example: np.ndarray = field(repr=False)


# -- shared evaluation ------------------------------------------------------------------

@dataclass
class _Pairs:
    scores: np.ndarray  # [n, k]
    logits: np.ndarray  # [n, k, |Y|]
    rcache: list
    pcache: list


def _full_index(n: int, m: int) -> np.ndarray:
    return np.broadcast_to(np.arange(m), (n, m))


def _check_idx(idx, batch: LabeledDataset, store: DataStore) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 2 or idx.shape[0] != batch.n:
        raise ConfigError(f"evidence index lists {idx.shape} do not align with a batch of {batch.n}")
    if idx.size and (idx.min() < 0 or idx.max() >= store.size):
        raise ConfigError("evidence index out of range for the data-store")
    return idx


def _evaluate(model: RamModel, store: DataStore, batch: LabeledDataset, idx: np.ndarray,
              with_retriever: bool = True) -> _Pairs:
    if batch.n == 0:
        raise ConfigError("empty batch")
    if batch.d_x != model.d_x or store.d_z != model.d_z:
        raise ShapeError("batch/store dimensions do not match the model")
    if np.any(batch.ys >= model.num_classes):
        raise ShapeError("label outside the model's class range")
    n, k = idx.shape
    X = pair_inputs(batch.xs, store.evidences, idx)
    h, pcache = nn.forward_batch(model.predictor, X)
    s, rcache = None, None
    if with_retriever:
        s, rcache = nn.forward_batch(model.retriever, X)
        s = s.reshape(n, k)
    return _Pairs(s, h.reshape(n, k, model.num_classes), rcache, pcache)


def _logit_grad(logits: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """d(-log softmax(h)[y]) / dh for every row, shape of ``logits``."""
    onehot = np.arange(logits.shape[-1]) == ys[:, None, None]
    return softmax(logits) - onehot


def _grads(model: RamModel, pairs: _Pairs, d_scores, d_logits) -> tuple[nn.GradBuffer, nn.GradBuffer]:
    if d_scores is None:
        g_theta = model.retriever.zeros_like()
    else:
        g_theta = nn.backward_batch(model.retriever, pairs.rcache, d_scores.reshape(-1, 1))
    if d_logits is None:
        g_xi = model.predictor.zeros_like()
    else:
        g_xi = nn.backward_batch(model.predictor, pairs.pcache, d_logits.reshape(-1, model.num_classes))
    return g_theta, g_xi


def _rce(model, store, batch, idx, clip: bool) -> LossReport:
    idx = _check_idx(idx, batch, store)
    pairs = _evaluate(model, store, batch, idx)
    n = batch.n
    p = softmax(pairs.scores, axis=1)
    clipped, nll = clipped_nll(pairs.logits, batch.ys[:, None], model.ell_max)
    ell = clipped if clip else nll
    per = np.sum(p * ell, axis=1)
    d_scores = p * (ell - per[:, None]) / n
    # on the clipped branch (including the kink) the loss is flat
    active = (nll < model.ell_max) if clip else np.ones_like(nll, dtype=bool)
    d_logits = (p * active / n)[..., None] * _logit_grad(pairs.logits, batch.ys)
    g_theta, g_xi = _grads(model, pairs, d_scores, d_logits)
    return LossReport(float(per.mean()), g_theta, g_xi, per)


# -- objectives ---------------------------------------------------------------------------

def rce_exact(model: RamModel, store: DataStore, batch: LabeledDataset, clip: bool = True) -> LossReport:
    return _rce(model, store, batch, _full_index(batch.n, store.size), clip)


def rce_topk(model: RamModel, store: DataStore, batch: LabeledDataset, cached_topk,
             clip: bool = True) -> LossReport:
    return _rce(model, store, batch, cached_topk, clip)


def emdr2(model: RamModel, store: DataStore, batch: LabeledDataset, subset=None) -> LossReport:
    idx = _full_index(batch.n, store.size) if subset is None else subset
    idx = _check_idx(idx, batch, store)
    pairs = _evaluate(model, store, batch, idx)
    n = batch.n
    log_p = log_softmax(pairs.scores, axis=1)
    _, nll = clipped_nll(pairs.logits, batch.ys[:, None], np.inf)
    joint = log_p - nll
    top = joint.max(axis=1, keepdims=True)
    log_marg = top[:, 0] + np.log(np.exp(joint - top).sum(axis=1))
    if np.any(log_marg < np.log(MARGINAL_FLOOR)):
        raise NumericalDomainError("marginal label probability underflowed below 1e-300")
    posterior = np.exp(joint - log_marg[:, None])
    per = -log_marg
    d_scores = (np.exp(log_p) - posterior) / n
    d_logits = (posterior / n)[..., None] * _logit_grad(pairs.logits, batch.ys)
    g_theta, g_xi = _grads(model, pairs, d_scores, d_logits)
    return LossReport(float(per.mean()), g_theta, g_xi, per)


def pdist_target(nll: np.ndarray) -> np.ndarray:
    """Predictor-assigned distribution over evidences, ``p(y|x,z) / sum_z' p(y|x,z')``."""
    return softmax(-nll, axis=1)


def pdist_retriever_loss(model: RamModel, store: DataStore, batch: LabeledDataset,
                         subset=None) -> LossReport:
    idx = _full_index(batch.n, store.size) if subset is None else subset
    idx = _check_idx(idx, batch, store)
    pairs = _evaluate(model, store, batch, idx)
    n = batch.n
    log_p = log_softmax(pairs.scores, axis=1)
    _, nll = clipped_nll(pairs.logits, batch.ys[:, None], np.inf)
    target = pdist_target(nll)
    per = -np.sum(target * log_p, axis=1)
    d_scores = (np.exp(log_p) - target) / n
    g_theta, g_xi = _grads(model, pairs, d_scores, None)
    return LossReport(float(per.mean()), g_theta, g_xi, per)


def retrieval_ce(model: RamModel, store: DataStore, xs: np.ndarray, targets) -> LossReport:
    """Supervised cross-entropy of the retriever distribution against given evidence indices.

    Used to pretrain a retriever; only the retriever gradient is non-zero.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.int64)
    n, m = xs.shape[0], store.size
    if targets.shape != (n,) or targets.min() < 0 or targets.max() >= m:
        raise ConfigError("targets must be one valid evidence index per input")
    X = pair_inputs(xs, store.evidences, _full_index(n, m))
    s, rcache = nn.forward_batch(model.retriever, X)
    log_p = log_softmax(s.reshape(n, m), axis=1)
    per = -log_p[np.arange(n), targets]
    d_scores = np.exp(log_p)
    d_scores[np.arange(n), targets] -= 1.0
    g_theta = nn.backward_batch(model.retriever, rcache, (d_scores / n).reshape(-1, 1))
    return LossReport(float(per.mean()), g_theta, model.predictor.zeros_like(), per)


def rce_pg(model: RamModel, store: DataStore, batch: LabeledDataset, k: int, b: float,
           seed=0, samples=None) -> LossReport:
    """Score-function estimate of the unclipped joint objective's gradient.

    ``k`` evidences per example are drawn with replacement from the
    retriever distribution over the whole store (or taken from ``samples``
    when given, an [n, k] index array). The retriever gradient is the
    baselined REINFORCE estimator; the predictor gradient averages the
    log-loss gradient over the same draws.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    n, m = batch.n, store.size
    full = _full_index(n, m)
    if batch.n == 0:
        raise ConfigError("empty batch")
    X_all = pair_inputs(batch.xs, store.evidences, full)
    s, rcache = nn.forward_batch(model.retriever, X_all)
    p = softmax(s.reshape(n, m), axis=1)
    if samples is None:
        samples = sample_evidences(p, k, seed)
    samples = _check_idx(samples, batch, store)
    k = samples.shape[1]
    pairs = _evaluate(model, store, batch, samples, with_retriever=False)
    _, nll = clipped_nll(pairs.logits, batch.ys[:, None], np.inf)
    coef = (nll + b) / (n * k)  # multiplies grad log p(z_j | x_i)
    hits = np.zeros((n, m))
    np.add.at(hits, (np.repeat(np.arange(n), k), samples.reshape(-1)), coef.reshape(-1))
    d_scores = hits - hits.sum(axis=1, keepdims=True) * p
    g_theta = nn.backward_batch(model.retriever, rcache, d_scores.reshape(-1, 1))
    d_logits = _logit_grad(pairs.logits, batch.ys) / (n * k)
    g_xi = nn.backward_batch(model.predictor, pairs.pcache, d_logits.reshape(-1, model.num_classes))
    per = nll.mean(axis=1)
    return LossReport(float(per.mean()), g_theta, g_xi, per)


def pg_expected_grad_theta(model: RamModel, store: DataStore, batch: LabeledDataset, b: float) -> np.ndarray:
    """Exact expectation of the ``rce_pg`` retriever estimator (flat vector).

    Each example's k draws are i.i.d., so the expectation of the k-sample
    average equals the single-draw expectation, enumerated over the store.
    """
    total = np.zeros(model.retriever.size)
    for i in range(batch.n):
        one = batch.subset([i])
        p = softmax(score_matrix(model, store, one.xs)[0])
        for z in range(store.size):
            rep = rce_pg(model, store, one, 1, b, samples=np.array([[z]]))
            total += p[z] * rep.grad_theta.flat()
    return total / batch.n


# -- top-K cache and dispatch ----------------------------------------------------------------

class TopKCache:
    """Per-example top-k evidence lists, recomputed on a fixed cadence."""

    def __init__(self, xs: np.ndarray, k: int, refresh_every: int, chunk: int = 1024):
        if k < 1 or refresh_every < 1:
            raise ConfigError("cache needs k >= 1 and refresh_every >= 1")
        self.xs = np.asarray(xs, dtype=np.float64)
        self.k = k
        self.refresh_every = refresh_every
        self.chunk = chunk
        self.idx: np.ndarray | None = None
        self.refreshes = 0

    def refresh(self, model: RamModel, store: DataStore) -> None:
        k = min(self.k, store.size)
        parts = [top_k_indices(score_matrix(model, store, self.xs[a:a + self.chunk]), k)
                 for a in range(0, self.xs.shape[0], self.chunk)]
        self.idx = np.concatenate(parts, axis=0)
        self.refreshes += 1

    def maybe_refresh(self, model: RamModel, store: DataStore, step: int) -> bool:
        if self.idx is None or step % self.refresh_every == 0:
            self.refresh(model, store)
            return True
        return False

    def lookup(self, rows) -> np.ndarray:
        if self.idx is None:
            raise ConfigError("cache used before its first refresh")
        return self.idx[rows]


def subset_k(kind: ObjectiveKind) -> int | None:
    """Size of the evidence subset a kind restricts to (None: whole store)."""
    if isinstance(kind, RceTopK):
        return kind.k
    if isinstance(kind, (Emdr2, PDist)):
        return kind.k
    return None


def objective_eval(kind: ObjectiveKind, model: RamModel, store: DataStore, batch: LabeledDataset,
                   *, cache: TopKCache | None = None, rows=None, step: int = 0,
                   seed=0) -> LossReport:
    """Dispatch on ``kind``.

    For cached kinds, ``cache`` holds the lists for the full training set
    and ``rows`` picks the batch's entries; the cache is refreshed when
    ``step`` hits its cadence. Without a cache the top-k lists are computed
    fresh from the current retriever.
    """
    validate_objective(kind)
    if isinstance(kind, RceExact):
        return rce_exact(model, store, batch, clip=kind.clip)
    if isinstance(kind, RcePG):
        return rce_pg(model, store, batch, kind.k, kind.baseline, seed)
    k = subset_k(kind)
    subset = None
    if k is not None:
        if cache is None:
            subset = top_k_indices(score_matrix(model, store, batch.xs), min(k, store.size))
        else:
            cache.maybe_refresh(model, store, step)
            subset = cache.lookup(np.arange(batch.n) if rows is None else rows)
    if isinstance(kind, RceTopK):
        return rce_topk(model, store, batch, subset)
    if isinstance(kind, Emdr2):
        return emdr2(model, store, batch, subset)
    if isinstance(kind, PDist):
        return pdist_retriever_loss(model, store, batch, subset)
    raise ConfigError(f"unknown objective kind {kind!r}")
