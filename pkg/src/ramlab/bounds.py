"""Closed-form excess-risk bounds for retrieval-augmented MLPs.

Every suppressed constant is set to 1, so values are in normalised units:
use them for shapes, orderings and crossovers rather than absolute risk.
Logarithms are natural and their arguments are floored at ``e``.
Depths are positive reals here; nothing is rounded.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import nn
from .errors import ConfigError, ShapeError
from .ram import DataStore, LabeledDataset, RamModel, clipped_nll, pair_inputs, softmax

BREAKDOWN_HEADER = ["l_ret", "l_pred", "gen_ret", "gen_pred", "approx_ret", "approx_pred_net",
                    "approx_pred_clip", "approx_pred_store", "total"]
STORE_GAIN_HEADER = ["n", "store_size", "joint_rate", "no_retrieval_rate", "crossover"]


def flog(v: float) -> float:
    """Natural log with the argument floored at e (so the result is >= 1)."""
    return math.log(max(v, math.e))


@dataclass(frozen=True)
class BoundInputs:
    n: int = 10_000
    store_size: int = 1000
    num_classes: int = 4
    d_x: int = 4
    d_z: int = 4
    kappa: float = 4.0
    kappa_store: float = 4.0
    gamma_store: float = 1.0
    c_store: float = 1.0
    l_ret: float = 8.0
    l_pred: float = 8.0
    ell_max: float = math.log(4) + 1.0
    kappa_true: float = 1.0

    @property
    def d_tot(self) -> int:
        return self.d_x + self.d_z

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"bound input {f.name} must be a finite positive number, got {v!r}")
        if self.n < 1 or self.store_size < 1 or self.num_classes < 1:
            raise ConfigError("n, store_size and num_classes must be >= 1")

    @classmethod
    def from_dict(cls, obj: dict) -> BoundInputs:
        extra = set(obj) - {f.name for f in fields(cls)}
        if extra:
            raise ConfigError(f"unknown bound inputs: {sorted(extra)}")
        bi = cls(**obj)
        bi.validate()
        return bi


@dataclass(frozen=True)
class BoundBreakdown:
    gen_ret: float
    gen_pred: float
    approx_ret: float
    approx_pred_net: float
    approx_pred_clip: float
    approx_pred_store: float
    total: float

    def parts(self) -> list[float]:
        return [self.gen_ret, self.gen_pred, self.approx_ret, self.approx_pred_net,
                self.approx_pred_clip, self.approx_pred_store]


def excess_risk_bound(bi: BoundInputs) -> BoundBreakdown:
    bi.validate()
    n, m, Y, d = bi.n, bi.store_size, bi.num_classes, bi.d_tot
    w_ret, w_pred = d, Y * d
    lr, lp, ell = bi.l_ret, bi.l_pred, bi.ell_max
    gen_ret = ell * lr * w_ret * math.sqrt(flog(lr * w_ret) * flog(n * m)) / math.sqrt(n)
    gen_pred = ell * math.sqrt((lp * flog(Y) + lp ** 2 * w_pred ** 2 * flog(lp * w_pred))
                               * flog(n * m * Y)) / math.sqrt(n)
    approx_ret = ell * lr ** (-4 * bi.kappa / (3 * d)) * flog(m) ** (1 / 3)
    approx_net = lp ** (-2 * bi.kappa_store / d)
    approx_clip = (Y - 1) * math.exp(-ell)
    approx_store = bi.c_store * m ** (-bi.gamma_store) * math.exp(ell)
    parts = [gen_ret, gen_pred, approx_ret, approx_net, approx_clip, approx_store]
    return BoundBreakdown(*parts, total=math.fsum(parts))


def breakdown_row(bi: BoundInputs, b: BoundBreakdown | None = None) -> list[float]:
    b = excess_risk_bound(bi) if b is None else b
    return [bi.l_ret, bi.l_pred, *b.parts(), b.total]


def optimal_schedules(n: float, num_classes: float, d_tot: float, kappa: float,
                      kappa_store: float) -> tuple[float, float, float]:
    """Data-size-dependent retriever depth, predictor depth and clipping level."""
    l_ret = n ** (3 * d_tot / (6 * d_tot + 8 * kappa))
    l_pred = (math.sqrt(n) / num_classes) ** (d_tot / (2 * d_tot + 4 * kappa_store))
    ell = math.log(num_classes) + kappa_store / (d_tot + 2 * kappa_store) * math.log(n)
    return l_ret, l_pred, ell


def joint_rate(n: float, store_size: float, num_classes: float, d_tot: float, kappa: float,
               kappa_store: float, gamma_store: float) -> float:
    e = kappa_store / (d_tot + 2 * kappa_store)
    store_term = store_size ** (-gamma_store) * num_classes * n ** e
    sample_term = (n / num_classes ** 2) ** (-e)
    return n ** (-2 * kappa / (3 * d_tot + 4 * kappa)) + max(store_term, sample_term)


def no_retrieval_rate(n: float, num_classes: float, d_x: float, kappa_true: float) -> float:
    return (n / num_classes ** 2) ** (-kappa_true / (d_x + 2 * kappa_true))


def store_threshold(n: float, num_classes: float, d_tot: float, kappa_store: float,
                    gamma_store: float) -> float:
    """Store size at which the two branches of the joint rate's max coincide."""
    den = d_tot + 2 * kappa_store
    return (num_classes ** (d_tot / gamma_store / den)
            * n ** (2 * kappa_store / gamma_store / den))


@dataclass(frozen=True)
class GainReport:
    gain: bool
    store_margin: float  # log(|I| / threshold)
    kappa_margin: float  # kappa - 3 d_tot / (2 d_x) * kappa_true
    kappa_store_margin: float  # kappa_I - d_tot / d_x * kappa_true


def retrieval_gain_check(n, store_size, num_classes, d_x, d_tot, kappa, kappa_store, kappa_true,
                         gamma_store) -> GainReport:
    thr = store_threshold(n, num_classes, d_tot, kappa_store, gamma_store)
    store_margin = math.log(store_size) - math.log(thr)
    km = kappa - 3 * d_tot / (2 * d_x) * kappa_true
    ksm = kappa_store - d_tot / d_x * kappa_true
    # the store condition is an inclusive inequality; allow for rounding in the threshold
    ok = store_margin >= -1e-12 and km > 0 and ksm > 0
    return GainReport(ok, store_margin, km, ksm)


def tradeoff_surface(bi_base: BoundInputs, lret_grid, lpred_grid) -> list[list[float]]:
    """One breakdown row per (L_ret, L_pred) grid point, L_ret varying slowest."""
    lret_grid, lpred_grid = list(lret_grid), list(lpred_grid)
    if not lret_grid or not lpred_grid:
        raise ConfigError("trade-off grids must be non-empty")
    return [breakdown_row(replace(bi_base, l_ret=float(a), l_pred=float(b)))
            for a in lret_grid for b in lpred_grid]


def store_gain_curve(bi_base: BoundInputs, store_grid, n_grid) -> tuple[list[list], dict]:
    """Joint vs no-retrieval rates over (n, |I|).

    Returns the rows (``crossover`` is 1 on the first store size of each
    ``n`` where retrieval wins, else 0) and ``{n: crossover |I| or None}``.
    """
    store_grid, n_grid = sorted(store_grid), list(n_grid)
    if not store_grid or not n_grid:
        raise ConfigError("store and sample-size grids must be non-empty")
    b = bi_base
    rows, cross = [], {}
    for n in n_grid:
        base = no_retrieval_rate(n, b.num_classes, b.d_x, b.kappa_true)
        cross[n] = None
        for m in store_grid:
            jr = joint_rate(n, m, b.num_classes, b.d_tot, b.kappa, b.kappa_store, b.gamma_store)
            first = cross[n] is None and jr < base
            if first:
                cross[n] = m
            rows.append([n, m, jr, base, int(first)])
    return rows, cross


def covering_norms(u: np.ndarray, model: RamModel, store: DataStore,
                   batch: LabeledDataset) -> tuple[float, float]:
    """Empirical L2 norms entering the covering-number definitions.

    ``u[i, z]`` weights evidence ``z`` for example ``i``; the loss is the
    clipped log-loss.
    """
    u = np.asarray(u, dtype=np.float64)
    n, m = batch.n, store.size
    if u.shape != (n, m):
        raise ShapeError(f"weights have shape {u.shape}, expected ({n}, {m})")
    X = pair_inputs(batch.xs, store.evidences, np.broadcast_to(np.arange(m), (n, m)))
    s, _ = nn.forward_batch(model.retriever, X)
    h, _ = nn.forward_batch(model.predictor, X)
    p = softmax(s.reshape(n, m), axis=1)
    loss, _ = clipped_nll(h.reshape(n, m, -1), batch.ys[:, None], model.ell_max)
    norm_xi = math.sqrt(np.mean(np.sum(u * loss, axis=1) ** 2))
    norm_theta = math.sqrt(np.mean(np.sum(p * u, axis=1) ** 2))
    return norm_xi, norm_theta


def inputs_to_dict(bi: BoundInputs) -> dict:
    return asdict(bi)
