"""Retrieval-augmented classifier: data-store, retriever and predictor.

Both networks read the concatenation ``(x, z)`` of an input and one
evidence. The retriever emits a single relevance score, the predictor one
score per class.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .errors import ConfigError, ShapeError


@dataclass
class DataStore:
    evidences: np.ndarray  # [m, d_z]

    def __post_init__(self):
        self.evidences = np.asarray(self.evidences, dtype=np.float64)
        if self.evidences.ndim != 2 or self.evidences.shape[0] < 1:
            raise ShapeError(f"data-store must be a non-empty [m, d_z] array, got {self.evidences.shape}")
        if np.any(np.abs(self.evidences) > 1.0):
            raise ConfigError("evidence coordinates must lie in [-1, 1]")

    @property
    def size(self) -> int:
        return self.evidences.shape[0]

    @property
    def d_z(self) -> int:
        return self.evidences.shape[1]


@dataclass
class LabeledDataset:
    xs: np.ndarray  # [n, d_x]
    ys: np.ndarray  # [n]

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=np.float64)
        self.ys = np.asarray(self.ys, dtype=np.int64)
        if self.xs.ndim != 2 or self.ys.shape != (self.xs.shape[0],):
            raise ShapeError(f"xs {self.xs.shape} and ys {self.ys.shape} are not aligned")
        if np.any(np.abs(self.xs) > 1.0):
            raise ConfigError("input coordinates must lie in [-1, 1]")
        if np.any(self.ys < 0):
            raise ConfigError("labels must be non-negative class indices")

    @property
    def n(self) -> int:
        return self.xs.shape[0]

    @property
    def d_x(self) -> int:
        return self.xs.shape[1]

    def subset(self, idx) -> LabeledDataset:
        return LabeledDataset(self.xs[idx], self.ys[idx])


@dataclass
class RamModel:
    retriever: nn.MlpParams
    predictor: nn.MlpParams
    ell_max: float
    num_classes: int
    d_x: int

    def __post_init__(self):
        if self.retriever.in_dim != self.predictor.in_dim:
            raise ShapeError("retriever and predictor must read the same (x, z) input")
        if self.retriever.out_dim != 1:
            raise ShapeError("retriever must output a single score")
        if self.predictor.out_dim != self.num_classes:
            raise ShapeError("predictor output dim must equal the number of classes")
        if not 0 < self.d_x < self.retriever.in_dim:
            raise ShapeError("d_x must leave room for at least one evidence coordinate")
        if self.ell_max < np.log(self.num_classes) or self.ell_max <= 0:
            raise ConfigError(f"ell_max={self.ell_max} must be positive and at least log|Y|")

    @property
    def d_z(self) -> int:
        return self.retriever.in_dim - self.d_x

    def copy(self) -> RamModel:
        return RamModel(self.retriever.copy(), self.predictor.copy(), self.ell_max,
                        self.num_classes, self.d_x)


def ram_init(d_x: int, d_z: int, num_classes: int, *, ret_depth: int = 2,
             ret_width: int = nn.DEFAULT_WIDTH, pred_depth: int = 2,
             pred_width: int = nn.DEFAULT_WIDTH, ell_max: float | None = None,
             seed: int = 0) -> RamModel:
    if ell_max is None:
        ell_max = np.log(num_classes) + 5.0
    d = d_x + d_z
    ss = np.random.SeedSequence(seed).spawn(2)
    retriever = nn.mlp_init(d, 1, ret_width, ret_depth, int(ss[0].generate_state(1)[0]))
    predictor = nn.mlp_init(d, num_classes, pred_width, pred_depth, int(ss[1].generate_state(1)[0]))
    return RamModel(retriever, predictor, float(ell_max), num_classes, d_x)


# -- softmax helpers -------------------------------------------------------------

def softmax(s: np.ndarray, axis: int = -1) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    e = np.exp(s - s.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(s: np.ndarray, axis: int = -1) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    shifted = s - s.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def pair_inputs(xs: np.ndarray, evidences: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Rows ``concat(xs[i], evidences[idx[i, j]])`` flattened to [n*k, d_x+d_z]."""
    n, k = idx.shape
    left = np.repeat(xs, k, axis=0)
    right = evidences[idx.reshape(-1)]
    return np.concatenate([left, right], axis=1)


def _check_x(model: RamModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.d_x:
        raise ShapeError(f"input has {x.shape[-1]} features, model expects {model.d_x}")
    return x


def _check_store(model: RamModel, store: DataStore) -> None:
    if store.d_z != model.d_z:
        raise ShapeError(f"store evidence dim {store.d_z} != model evidence dim {model.d_z}")


# -- operations --------------------------------------------------------------------

def score_matrix(model: RamModel, store: DataStore, xs: np.ndarray) -> np.ndarray:
    """Retriever scores for every (input row, evidence) pair, shape [n, m]."""
    xs = _check_x(model, np.atleast_2d(xs))
    _check_store(model, store)
    n, m = xs.shape[0], store.size
    idx = np.broadcast_to(np.arange(m), (n, m))
    out, _ = nn.forward_batch(model.retriever, pair_inputs(xs, store.evidences, idx))
    return out.reshape(n, m)


def retriever_scores(model: RamModel, store: DataStore, x: np.ndarray) -> np.ndarray:
    x = _check_x(model, x)
    if x.ndim != 1:
        raise ShapeError("retriever_scores expects a single input vector")
    return score_matrix(model, store, x[None, :])[0]


def retriever_dist(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ConfigError("cannot form a distribution over an empty data-store")
    return softmax(scores)


def predictor_scores(model: RamModel, x: np.ndarray, z: np.ndarray) -> np.ndarray:
    x = _check_x(model, x)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (model.d_z,):
        raise ShapeError(f"evidence shape {z.shape} != ({model.d_z},)")
    return nn.mlp_forward(model.predictor, np.concatenate([x, z]))


def predictor_dist(model: RamModel, x: np.ndarray, z: np.ndarray) -> np.ndarray:
    return softmax(predictor_scores(model, x, z))


def clipped_nll(logits: np.ndarray, ys: np.ndarray, ell_max: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-row ``min(ell_max, logsumexp(h) - h[y])`` and the unclipped value.

    ``logits`` has shape [..., |Y|]; ``ys`` broadcasts against ``logits[..., 0]``.
    """
    lp = log_softmax(logits)
    nll = -np.take_along_axis(lp, np.asarray(ys)[..., None], axis=-1)[..., 0]
    # the log-softmax can come out a hair below zero on a saturated row
    nll = np.maximum(nll, 0.0)
    return np.minimum(nll, ell_max), nll


def bounded_log_loss(model: RamModel, x: np.ndarray, z: np.ndarray, y: int) -> float:
    if not 0 <= y < model.num_classes:
        raise ShapeError(f"class {y} outside [0, {model.num_classes})")
    h = predictor_scores(model, x, z)
    return float(clipped_nll(h[None, :], np.array([y]), model.ell_max)[0][0])


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, ties toward the smaller index."""
    scores = np.asarray(scores, dtype=np.float64)
    m = scores.shape[-1]
    if not 1 <= k <= m:
        raise ConfigError(f"k={k} must lie in [1, {m}]")
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :k]


def sample_evidences(dist: np.ndarray, k: int, seed) -> np.ndarray:
    """``k`` i.i.d. draws with replacement from ``dist`` (rows, if 2-D).

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    dist = np.asarray(dist, dtype=np.float64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    single = dist.ndim == 1
    d2 = np.atleast_2d(dist)
    cdf = np.cumsum(d2, axis=1)
    u = rng.random((d2.shape[0], k)) * cdf[:, -1:]
    idx = np.empty((d2.shape[0], k), dtype=np.int64)
    for i in range(d2.shape[0]):
        idx[i] = np.searchsorted(cdf[i], u[i], side="right")
    np.minimum(idx, d2.shape[1] - 1, out=idx)
    return idx[0] if single else idx


def predict_batch(model: RamModel, store: DataStore, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Top-1 retrieval followed by argmax prediction, for every row of ``xs``."""
    xs = _check_x(model, np.atleast_2d(xs))
    scores = score_matrix(model, store, xs)
    ev = np.argmax(scores, axis=1)  # first maximum wins ties
    h, _ = nn.forward_batch(model.predictor, np.concatenate([xs, store.evidences[ev]], axis=1))
    return np.argmax(h, axis=1), ev


def predict(model: RamModel, store: DataStore, x: np.ndarray) -> tuple[int, int]:
    x = _check_x(model, x)
    if x.ndim != 1:
        raise ShapeError("predict expects a single input vector")
    cls, ev = predict_batch(model, store, x[None, :])
    return int(cls[0]), int(ev[0])


# -- CSV files -----------------------------------------------------------------------

def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_rows(path: Path) -> list[list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"{path} is empty")
    return rows


def save_store_csv(store: DataStore, path: str | Path) -> None:
    header = [f"z{j}" for j in range(store.d_z)]
    _write_rows(Path(path), header, ([repr(float(v)) for v in row] for row in store.evidences))


def load_store_csv(path: str | Path) -> DataStore:
    rows = _read_rows(Path(path))
    body = rows[1:] if rows[0] and rows[0][0].startswith("z") else rows
    return DataStore(np.array([[float(v) for v in r] for r in body], dtype=np.float64))


def save_dataset_csv(data: LabeledDataset, path: str | Path) -> None:
    header = [f"x{j}" for j in range(data.d_x)] + ["y"]
    rows = ([repr(float(v)) for v in x] + [str(int(y))] for x, y in zip(data.xs, data.ys))
    _write_rows(Path(path), header, rows)


def load_dataset_csv(path: str | Path) -> LabeledDataset:
    rows = _read_rows(Path(path))
    body = rows[1:] if rows[0] and rows[0][-1] == "y" else rows
    xs = np.array([[float(v) for v in r[:-1]] for r in body], dtype=np.float64)
    ys = np.array([int(r[-1]) for r in body], dtype=np.int64)
    return LabeledDataset(xs, ys)
