"""Seeded synthetic retrieval-classification tasks with planted structure.

The generative story:

* evidences are uniform in the box ``[-1, 1]^d_z``;
* every input ``x`` has a relevant evidence ``z*(x)``, the store element
  nearest to ``A x`` for a fixed random matrix ``A`` (rows rescaled so
  ``A x`` stays in the box);
* class scores come from a smooth function ``h*(x, z)`` built out of random
  Fourier features whose frequency scale ``omega`` controls smoothness
  (input coordinates use ``omega * input_freq_ratio``);
* labels are drawn from ``softmax(h*(x, z*(x)))`` and, with probability
  ``label_noise``, replaced by a uniform class.

``h*`` vanishes identically as ``omega -> 0`` (each feature is centred at
the origin), so tiny ``omega`` gives near-uniform label distributions.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .ram import (DataStore, LabeledDataset, _write_rows, save_dataset_csv, save_store_csv,
                  softmax)


@dataclass(frozen=True)
class TaskSpec:
    d_x: int = 4
    d_z: int = 4
    num_classes: int = 4
    store_size: int = 64
    n_train: int = 4096
    n_test: int = 1024
    omega: float = 3.0
    relevance_seed: int = 0
    data_seed: int = 1
    label_noise: float = 0.05
    score_scale: float = 8.0
    num_features: int = 16
    # frequency scale of the input coordinates relative to the evidence ones;
    # below 1 the label is carried mostly by the relevant evidence
    input_freq_ratio: float = 0.25

    def validate(self) -> None:
        dims = (self.d_x, self.d_z, self.num_classes, self.store_size, self.num_features)
        if min(dims) < 1 or self.n_train < 1 or self.n_test < 1:
            raise ConfigError("task dimensions and sizes must be >= 1")
        if not self.omega > 0:
            raise ConfigError("omega must be positive")
        if not 0 <= self.label_noise < 1:
            raise ConfigError("label_noise must lie in [0, 1)")
        if self.input_freq_ratio < 0:
            raise ConfigError("input_freq_ratio must be non-negative")
        if self.score_scale < 0:
            raise ConfigError("score_scale must be non-negative")

    @classmethod
    def from_dict(cls, obj: dict) -> TaskSpec:
        known = set(cls.__dataclass_fields__)
        extra = set(obj) - known
        if extra:
            raise ConfigError(f"unknown task fields: {sorted(extra)}")
        spec = cls(**obj)
        spec.validate()
        return spec


@dataclass
class ScoreFunction:
    """``h*``: one random-Fourier-feature expansion per class."""
    freqs: np.ndarray  # [|Y|, F, d_x + d_z]
    phases: np.ndarray  # [|Y|, F]
    amps: np.ndarray  # [|Y|, F]
    scale: float

    def __call__(self, u: np.ndarray) -> np.ndarray:
        """Class scores for rows of ``u`` ([n, d_x+d_z]) -> [n, |Y|]."""
        arg = np.einsum("nd,yfd->nyf", u, self.freqs) + self.phases
        feats = np.cos(arg) - np.cos(self.phases)
        return self.scale * np.einsum("nyf,yf->ny", feats, self.amps)


@dataclass
class SynthTask:
    spec: TaskSpec
    store: DataStore
    train: LabeledDataset
    test: LabeledDataset
    train_oracle: np.ndarray
    test_oracle: np.ndarray
    bayes_probs: np.ndarray  # [n_test, |Y|], the true label law at each test input
    relevance_map: np.ndarray = field(repr=False)  # A, [d_z, d_x]
    score_fn: ScoreFunction = field(repr=False)

    def oracle_evidence(self, xs: np.ndarray) -> np.ndarray:
        return nearest_evidence(self.relevance_map, self.store.evidences, xs)

    def planted_probs(self, xs: np.ndarray, evidence_idx: np.ndarray) -> np.ndarray:
        """``softmax(h*(x, z))`` for each row and its chosen evidence (noise-free)."""
        u = np.concatenate([xs, self.store.evidences[evidence_idx]], axis=1)
        return softmax(self.score_fn(u))


def nearest_evidence(A: np.ndarray, evidences: np.ndarray, xs: np.ndarray) -> np.ndarray:
    target = np.atleast_2d(xs) @ A.T
    d2 = ((target[:, None, :] - evidences[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)  # first minimum wins ties


def _label_law(probs: np.ndarray, noise: float) -> np.ndarray:
    return (1.0 - noise) * probs + noise / probs.shape[1]


def generate(spec: TaskSpec) -> SynthTask:
    spec.validate()
    world = np.random.default_rng(spec.relevance_seed)
    data = np.random.default_rng(spec.data_seed)
    d_tot = spec.d_x + spec.d_z
    Y, F = spec.num_classes, spec.num_features

    store = DataStore(world.uniform(-1.0, 1.0, size=(spec.store_size, spec.d_z)))
    A = world.normal(size=(spec.d_z, spec.d_x))
    A /= np.abs(A).sum(axis=1, keepdims=True)  # |A x|_inf <= 1 on the input box
    freqs = world.normal(0.0, spec.omega, size=(Y, F, d_tot))
    freqs[..., :spec.d_x] *= spec.input_freq_ratio
    score_fn = ScoreFunction(
        freqs=freqs,
        phases=world.uniform(0.0, 2 * np.pi, size=(Y, F)),
        amps=world.normal(0.0, np.sqrt(2.0 / F), size=(Y, F)),
        scale=spec.score_scale,
    )

    def draw(n):
        xs = data.uniform(-1.0, 1.0, size=(n, spec.d_x))
        oracle = nearest_evidence(A, store.evidences, xs)
        u = np.concatenate([xs, store.evidences[oracle]], axis=1)
        law = _label_law(softmax(score_fn(u)), spec.label_noise)
        cdf = np.cumsum(law, axis=1)
        r = data.random(n)[:, None] * cdf[:, -1:]
        ys = np.minimum((cdf <= r).sum(axis=1), Y - 1)
        return LabeledDataset(xs, ys), oracle, law

    train, train_oracle, _ = draw(spec.n_train)
    test, test_oracle, law = draw(spec.n_test)
    return SynthTask(spec, store, train, test, train_oracle, test_oracle, law, A, score_fn)


def oracle_accuracy(task: SynthTask) -> float:
    """Bayes accuracy of a model that sees the planted evidence."""
    return float(np.mean(np.max(task.bayes_probs, axis=1)))


def oracle_recall(task: SynthTask, retrieved) -> float:
    retrieved = np.asarray(retrieved)
    if retrieved.shape != task.test_oracle.shape:
        raise ConfigError(f"{retrieved.shape[0] if retrieved.ndim else 0} retrieved indices for "
                          f"{task.test_oracle.shape[0]} test samples")
    return float(np.mean(retrieved == task.test_oracle))


def retrieval_free_accuracy(task: SynthTask) -> float:
    """Accuracy of predicting from ``h*`` averaged over a uniformly drawn evidence.

    Stands in for the best predictor that cannot locate the relevant
    evidence; scored against the true label law of each test input.
    """
    xs = task.test.xs
    m = task.store.size
    avg = np.zeros_like(task.bayes_probs)
    for j in range(m):
        avg += task.planted_probs(xs, np.full(xs.shape[0], j))
    pred = np.argmax(avg, axis=1)
    return float(np.mean(task.bayes_probs[np.arange(xs.shape[0]), pred]))


def proxy_relevance_map(task: SynthTask, noise: float, seed: int) -> np.ndarray:
    """A perturbed copy of the planted relevance matrix.

    Nearest-evidence labels under this map imitate a retriever pretrained on
    related but not identical relevance judgements. ``noise`` is relative to
    the mean absolute entry of the planted map.
    """
    A = task.relevance_map
    rng = np.random.default_rng(seed)
    B = A + noise * np.abs(A).mean() * rng.normal(size=A.shape)
    return B / np.abs(B).sum(axis=1, keepdims=True)


def write_task(task: SynthTask, out_dir: str | Path) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_store_csv(task.store, out / "store.csv")
    save_dataset_csv(task.train, out / "train.csv")
    save_dataset_csv(task.test, out / "test.csv")
    rows = [("train", i, int(j)) for i, j in enumerate(task.train_oracle)]
    rows += [("test", i, int(j)) for i, j in enumerate(task.test_oracle)]
    _write_rows(out / "oracle.csv", ["split", "sample", "evidence"], rows)
    meta = {"schema": 1, "task": asdict(task.spec), "bayes_accuracy": oracle_accuracy(task),
            "retrieval_free_accuracy": retrieval_free_accuracy(task)}
    (out / "task.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return meta
