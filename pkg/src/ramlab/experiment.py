"""Experiment pipelines shared by the command-line tool and the acceptance suite.

A sweep is the product of run specifications and seeds. Each seed owns a
fresh model initialisation, its own retriever pretraining and its own
training randomness; the task itself is fixed by the task spec.
"""

from __future__ import annotations

import json
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import nn
from .errors import ConfigError, NumericalDomainError, ShapeError, TrainingDiverged
from .objectives import ObjectiveKind, RceTopK, objective_from_dict, objective_to_dict
from .ram import DataStore, RamModel, predict, ram_init
from .synthgen import SynthTask, TaskSpec, generate, nearest_evidence, proxy_relevance_map
from .trainer import (Paradigm, TrainConfig, TrainTrace, evaluate, null_store, pretrain_retriever,
                      train)

SCHEMA = 1
SIZE_PRESETS = {"small": 1, "base": 2, "large": 4}

RESULT_HEADER = ["paradigm", "objective", "ret_size", "pred_size", "seed", "accuracy", "recall",
                 "qps", "wall_seconds", "error"]
SUMMARY_HEADER = ["paradigm", "objective", "ret_size", "pred_size", "runs", "accuracy_mean",
                  "accuracy_std", "recall_mean", "recall_std", "qps_mean"]
TIMING_COLUMNS = ("qps", "wall_seconds", "qps_mean")


def fmt(v: float) -> str:
    return repr(float(v))


# -- configuration ---------------------------------------------------------------------

@dataclass(frozen=True)
class RetrieverInit:
    """How the non-trivial paradigms obtain their starting retriever.

    ``pretrained`` fits the retriever to nearest-evidence labels under a
    perturbed relevance map before any paradigm runs; ``random`` keeps the
    fresh initialisation.
    """
    kind: str = "pretrained"
    noise: float = 0.5
    steps: int = 1000
    corpus_size: int = 8192
    batch_size: int = 64
    peak_lr: float = 3e-3
    warmup_steps: int = 50

    def validate(self) -> None:
        if self.kind not in ("pretrained", "random"):
            raise ConfigError(f"retriever_init.kind must be 'pretrained' or 'random', got {self.kind!r}")
        if self.noise < 0 or self.steps < 1 or self.corpus_size < 1 or self.batch_size < 1:
            raise ConfigError("retriever_init needs noise >= 0 and positive steps/corpus/batch sizes")
        if not self.peak_lr > 0 or not 0 <= self.warmup_steps < self.steps:
            raise ConfigError("retriever_init needs peak_lr > 0 and warmup_steps in [0, steps)")


@dataclass(frozen=True)
class RunSpec:
    paradigm: Paradigm
    objective: ObjectiveKind
    ret_size: str = "base"
    pred_size: str = "base"
    overrides: dict = field(default_factory=dict, hash=False, compare=False)

    def validate(self) -> None:
        for s in (self.ret_size, self.pred_size):
            if s not in SIZE_PRESETS:
                raise ConfigError(f"size preset {s!r} not in {sorted(SIZE_PRESETS)}")


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskSpec
    runs: list
    seeds: list
    output_dir: str | None = None
    train: dict = field(default_factory=dict, hash=False)
    retriever_init: RetrieverInit = field(default_factory=RetrieverInit)
    width: int = nn.DEFAULT_WIDTH

    def validate(self) -> None:
        if not self.runs or not self.seeds:
            raise ConfigError("a sweep needs at least one run and one seed")
        for r in self.runs:
            r.validate()
        self.retriever_init.validate()
        for s in self.seeds:
            if not isinstance(s, int) or s < 0:
                raise ConfigError(f"seeds must be non-negative integers, got {s!r}")
        self.train_config(self.runs[0], self.seeds[0]).validate()

    def train_config(self, run: RunSpec, seed: int) -> TrainConfig:
        try:
            return TrainConfig(paradigm=run.paradigm, objective=run.objective, seed=seed,
                               **{**self.train, **run.overrides})
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"paradigm", "objective", "seed"}


def _train_overrides(obj: dict, where: str) -> dict:
    extra = set(obj) - _TRAIN_KEYS
    if extra:
        raise ConfigError(f"unknown training fields in {where}: {sorted(extra)}")
    return dict(obj)


def run_from_dict(obj: dict) -> RunSpec:
    obj = dict(obj)
    known = {"paradigm", "objective", "ret_size", "pred_size", "train"}
    if set(obj) - known:
        raise ConfigError(f"unknown run fields: {sorted(set(obj) - known)}")
    try:
        paradigm = Paradigm(obj.get("paradigm", "joint"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    objective = objective_from_dict(obj.get("objective", {"kind": "rce_topk"}))
    spec = RunSpec(paradigm, objective, obj.get("ret_size", "base"), obj.get("pred_size", "base"),
                   _train_overrides(obj.get("train", {}), "run"))
    spec.validate()
    return spec


def run_to_dict(run: RunSpec) -> dict:
    return {"paradigm": run.paradigm.value, "objective": objective_to_dict(run.objective),
            "ret_size": run.ret_size, "pred_size": run.pred_size, "train": dict(run.overrides)}


def _check_schema(obj: dict) -> None:
    if not isinstance(obj, dict):
        raise ConfigError("configuration must be a JSON object")
    if obj.get("schema") != SCHEMA:
        raise ConfigError(f"configuration schema must be {SCHEMA}, got {obj.get('schema')!r}")


def experiment_from_dict(obj: dict) -> ExperimentConfig:
    _check_schema(obj)
    known = {"schema", "task", "runs", "run", "seeds", "seed", "output_dir", "train",
             "retriever_init", "width"}
    if set(obj) - known:
        raise ConfigError(f"unknown configuration fields: {sorted(set(obj) - known)}")
    runs = obj.get("runs", [obj["run"]] if "run" in obj else None)
    if runs is None:
        raise ConfigError("configuration needs 'runs' (or a single 'run')")
    seeds = obj.get("seeds", [obj["seed"]] if "seed" in obj else [0])
    try:
        init = RetrieverInit(**obj.get("retriever_init", {}))
    except TypeError as exc:
        raise ConfigError(f"bad retriever_init: {exc}") from exc
    try:
        task = TaskSpec.from_dict(obj.get("task", {}))
    except TypeError as exc:
        raise ConfigError(f"bad task: {exc}") from exc
    cfg = ExperimentConfig(task=task, runs=[run_from_dict(r) for r in runs], seeds=list(seeds),
                           output_dir=obj.get("output_dir"),
                           train=_train_overrides(obj.get("train", {}), "train"),
                           retriever_init=init, width=int(obj.get("width", nn.DEFAULT_WIDTH)))
    if cfg.width < 1:
        raise ConfigError("width must be >= 1")
    cfg.validate()
    return cfg


def experiment_to_dict(cfg: ExperimentConfig) -> dict:
    return {"schema": SCHEMA, "task": asdict(cfg.task), "runs": [run_to_dict(r) for r in cfg.runs],
            "seeds": list(cfg.seeds), "train": dict(cfg.train),
            "retriever_init": asdict(cfg.retriever_init), "width": cfg.width}


def load_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


# -- single runs ------------------------------------------------------------------------

def init_model(task: SynthTask, ret_size: str, pred_size: str, seed: int,
               width: int = nn.DEFAULT_WIDTH) -> RamModel:
    spec = task.spec
    return ram_init(spec.d_x, spec.d_z, spec.num_classes, ret_depth=SIZE_PRESETS[ret_size],
                    ret_width=width, pred_depth=SIZE_PRESETS[pred_size], pred_width=width,
                    seed=seed)


def initial_retriever(task: SynthTask, model: RamModel, init: RetrieverInit, seed: int) -> RamModel:
    """Apply the configured retriever initialisation to a fresh model."""
    if init.kind == "random":
        return model
    rng = np.random.default_rng([seed, 7])
    proxy = proxy_relevance_map(task, init.noise, int(rng.integers(2**31)))
    xs = rng.uniform(-1.0, 1.0, size=(init.corpus_size, task.spec.d_x))
    targets = nearest_evidence(proxy, task.store.evidences, xs)
    return pretrain_retriever(model, task.store, xs, targets, steps=init.steps,
                              batch_size=init.batch_size, peak_lr=init.peak_lr,
                              warmup_steps=init.warmup_steps, seed=seed)


def _rate(model: RamModel, store: DataStore, xs: np.ndarray) -> float:
    lat = np.empty(xs.shape[0])
    for i, x in enumerate(xs):
        t0 = time.perf_counter()
        predict(model, store, x)
        lat[i] = time.perf_counter() - t0
    return 1.0 / max(float(np.median(lat)), 1e-12)


def measure_qps(cells: dict, xs: np.ndarray, trials: int = 3) -> dict:
    """Queries per second for each ``{key: (model, store)}``, answering one query at a time.

    A trial times every query separately and converts the median latency to
    a rate. Trials are interleaved across cells so slow phases of the
    machine hit all cells alike; each cell reports its median trial.
    """
    for model, store in cells.values():
        for x in xs[:32]:  # warm-up
            predict(model, store, x)
    rates: dict = {k: [] for k in cells}
    for _ in range(trials):
        for k, (model, store) in cells.items():
            rates[k].append(_rate(model, store, xs))
    return {k: float(statistics.median(v)) for k, v in rates.items()}


@dataclass
class RunResult:
    paradigm: str
    objective: str
    ret_size: str
    pred_size: str
    seed: int
    accuracy: float | None = None
    recall: float | None = None
    qps: float | None = None
    wall_seconds: float | None = None
    error: str = ""
    model: RamModel | None = field(default=None, repr=False)
    trace: TrainTrace | None = field(default=None, repr=False)

    def row(self) -> list[str]:
        def cell(v):
            return "" if v is None else fmt(v)
        return [self.paradigm, self.objective, self.ret_size, self.pred_size, str(self.seed),
                cell(self.accuracy), cell(self.recall), cell(self.qps), cell(self.wall_seconds),
                self.error]


class SeedContext:
    """Per-seed caches: the task, starting models and fixed-retriever predictors."""

    def __init__(self, cfg: ExperimentConfig, seed: int, task: SynthTask | None = None):
        self.cfg, self.seed = cfg, seed
        self.task = task if task is not None else generate(cfg.task)
        self._starts: dict = {}
        self._fixed: dict = {}

    def start_model(self, ret_size: str, pred_size: str, pretrained: bool) -> RamModel:
        key = (ret_size, pred_size, pretrained)
        if key not in self._starts:
            m = init_model(self.task, ret_size, pred_size, self.seed, self.cfg.width)
            if pretrained:
                m = initial_retriever(self.task, m, self.cfg.retriever_init, self.seed)
            self._starts[key] = m
        return self._starts[key]

    def _fixed_key(self, run: RunSpec, objective: ObjectiveKind) -> tuple:
        return (run.ret_size, run.pred_size, objective, json.dumps(run.overrides, sort_keys=True))

    def fixed_retriever_model(self, run: RunSpec) -> RamModel:
        """Model after a fixed-retriever run (default objective) sharing ``run``'s sizes and settings."""
        key = self._fixed_key(run, RceTopK())
        if key not in self._fixed:
            self.train_run(replace(run, paradigm=Paradigm.FIXED_RETRIEVER, objective=RceTopK()))
        return self._fixed[key]

    def train_run(self, run: RunSpec) -> tuple[RamModel, TrainTrace]:
        task = self.task
        cfg = self.cfg.train_config(run, self.seed)
        m0 = self.start_model(run.ret_size, run.pred_size, run.paradigm is not Paradigm.NO_RETRIEVER)
        if run.paradigm is Paradigm.FIXED_PREDICTOR:
            m0 = replace(m0, predictor=self.fixed_retriever_model(run).predictor)
        model, trace = train(m0, task.store, task.train, task.test, cfg, task.test_oracle)
        if run.paradigm is Paradigm.FIXED_RETRIEVER:
            self._fixed.setdefault(self._fixed_key(run, run.objective), model)
        return model, trace

    def run(self, run: RunSpec) -> RunResult:
        res = RunResult(run.paradigm.value, run.objective.name, run.ret_size, run.pred_size, self.seed)
        t0 = time.perf_counter()
        try:
            model, trace = self.train_run(run)
            store, oracle = self.task.store, self.task.test_oracle
            if run.paradigm is Paradigm.NO_RETRIEVER:
                store, oracle = null_store(model.d_z), None
            res.accuracy, res.recall = evaluate(model, store, self.task.test, oracle)
            res.model, res.trace = model, trace
        except (ConfigError, ShapeError, NumericalDomainError, TrainingDiverged) as exc:
            res.error = f"{type(exc).__name__}: {exc}".replace("\n", " ")
        res.wall_seconds = time.perf_counter() - t0
        return res


QPS_QUERIES = 256


def _run_seed(args) -> list[RunResult]:
    cfg, seed = args
    ctx = SeedContext(cfg, seed)
    out = []
    for run in cfg.runs:
        res = ctx.run(run)
        res.model = res.trace = None  # keep worker results small
        out.append(res)
    return out


def _qps_cell(run: RunSpec) -> tuple:
    return (run.paradigm is Paradigm.NO_RETRIEVER, run.ret_size, run.pred_size)


def size_cell_qps(cfg: ExperimentConfig, task: SynthTask | None = None, trials: int = 3) -> dict:
    """QPS for every (store used?, retriever size, predictor size) cell of the sweep.

    Cost does not depend on the trained weights, so each cell is timed once
    on a fresh model.
    """
    task = generate(cfg.task) if task is None else task
    cells = {}
    for run in cfg.runs:
        key = _qps_cell(run)
        if key not in cells:
            model = init_model(task, run.ret_size, run.pred_size, 0, cfg.width)
            store = null_store(model.d_z) if key[0] else task.store
            cells[key] = (model, store)
    return measure_qps(cells, task.test.xs[:QPS_QUERIES], trials)


def run_sweep(cfg: ExperimentConfig, threads: int = 1, timing: bool = True) -> list[RunResult]:
    """Every run for every seed; rows ordered seed-major, then by run order."""
    cfg.validate()
    jobs = [(cfg, s) for s in cfg.seeds]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            per_seed = list(pool.map(_run_seed, jobs))
    else:
        per_seed = [_run_seed(j) for j in jobs]
    results = [r for rows in per_seed for r in rows]
    if timing:
        qps = size_cell_qps(cfg)
        for run_idx, r in enumerate(results):
            if not r.error:
                r.qps = qps[_qps_cell(cfg.runs[run_idx % len(cfg.runs)])]
    return results


def summarize(results: list[RunResult]) -> list[list[str]]:
    cells: dict = {}
    for r in results:
        cells.setdefault((r.paradigm, r.objective, r.ret_size, r.pred_size), []).append(r)
    rows = []
    for key, rs in cells.items():
        ok = [r for r in rs if not r.error]
        acc = [r.accuracy for r in ok]
        rec = [r.recall for r in ok]
        qps = [r.qps for r in ok if r.qps is not None]

        def stat(vals, f):
            return fmt(f(vals)) if vals else ""
        rows.append(list(key) + [str(len(ok)), stat(acc, np.mean), stat(acc, np.std),
                                 stat(rec, np.mean), stat(rec, np.std), stat(qps, np.mean)])
    return rows
