"""Distribution-based evaluation metrics for attention maps.

All metrics use natural logarithms. The divergence direction is fixed to
ground-truth-against-prediction so that prediction mass missing where the
truth has mass is penalized heavily (false negatives cost more than false
positives); Pearson correlation weighs both error kinds equally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .core import AttentionMap

#: Regularizer added in both guard positions of the divergence.
DEFAULT_KL_EPSILON = 1e-7

#: Largest grid (in cells) accepted by the exact transport solver.
MAX_EMD_CELLS = 256

MapLike = Union[AttentionMap, np.ndarray]


class UndefinedMetricError(ValueError):
    """Raised when a metric has no defined value for the given inputs."""


def _grid(m: MapLike) -> np.ndarray:
    if isinstance(m, AttentionMap):
        return m.values
    return np.asarray(m, dtype=np.float64)


def _check_same_shape(p: np.ndarray, q: np.ndarray) -> None:
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")


def cc(p: MapLike, q: MapLike) -> float:
    """Pearson correlation coefficient over flattened cells.

    Accepts raw grids as well as normalized maps (the statistic is invariant
    to positive affine rescaling). Constant inputs have no defined
    correlation and raise :class:`UndefinedMetricError`.
    """
    a = _grid(p).ravel()
    b = _grid(q).ravel()
    _check_same_shape(a, b)
    sa = float(a.std())
    sb = float(b.std())
    if sa == 0.0 or sb == 0.0:
        raise UndefinedMetricError("correlation undefined for a constant map")
    cov = float(((a - a.mean()) * (b - b.mean())).mean())
    return cov / (sa * sb)


def kl(pred: MapLike, gt: MapLike, epsilon: float = DEFAULT_KL_EPSILON) -> float:
    """Divergence of the ground truth against the prediction, in nats.

    Computed as ``sum(gt * log(gt / (pred + epsilon) + epsilon))`` and clamped
    at zero; epsilon regularizes empirical maps with empty cells.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    p = _grid(pred)
    g = _grid(gt)
    _check_same_shape(p, g)
    ratio = g / (p + epsilon) + epsilon
    terms = np.where(g > 0.0, g * np.log(ratio), 0.0)
    return max(float(terms.sum()), 0.0)


def entropy(p: MapLike) -> float:
    """Shannon entropy ``-sum(p * ln p)`` in nats, with 0 ln 0 = 0."""
    v = _grid(p)
    pos = v[v > 0.0]
    return float(-(pos * np.log(pos)).sum())


def downsample_map(p: AttentionMap, factor: int) -> AttentionMap:
    """Sum mass within each ``factor x factor`` block and renormalize."""
    if factor < 1:
        raise ValueError(f"factor must be a positive integer, got {factor}")
    h, w = p.shape
    if h % factor or w % factor:
        raise ValueError(f"dimensions {h}x{w} not divisible by factor {factor}")
    blocks = p.values.reshape(h // factor, factor, w // factor, factor).sum(axis=(1, 3))
    total = blocks.sum()
    return AttentionMap(blocks / total)


# Cached per grid shape: pairwise Euclidean distances between cell centers
# (cell side = 1) and the sparse transportation constraint matrix.
_COST_CACHE: Dict[Tuple[int, int], np.ndarray] = {}
_CONSTRAINT_CACHE: Dict[Tuple[int, int], sparse.csr_matrix] = {}


def _ground_distance(shape: Tuple[int, int]) -> np.ndarray:
    cached = _COST_CACHE.get(shape)
    if cached is not None:
        return cached
    h, w = shape
    rows, cols = np.divmod(np.arange(h * w), w)
    dr = rows[:, None] - rows[None, :]
    dc = cols[:, None] - cols[None, :]
    dist = np.sqrt(dr.astype(np.float64) ** 2 + dc.astype(np.float64) ** 2)
    _COST_CACHE[shape] = dist
    return dist


def _transport_constraints(shape: Tuple[int, int]) -> sparse.csr_matrix:
    cached = _CONSTRAINT_CACHE.get(shape)
    if cached is not None:
        return cached
    n = shape[0] * shape[1]
    # Variables x[i, j] flattened row-major; n supply rows then n demand rows.
    var = np.arange(n * n)
    supply_rows = var // n
    demand_rows = n + var % n
    rows = np.concatenate([supply_rows, demand_rows])
    cols = np.concatenate([var, var])
    data = np.ones(2 * n * n)
    mat = sparse.csr_matrix((data, (rows, cols)), shape=(2 * n, n * n))
    _CONSTRAINT_CACHE[shape] = mat
    return mat


def emd(p: MapLike, q: MapLike) -> float:
    """Exact earth mover's distance between two normalized maps.

    Ground distance is the Euclidean distance between cell centers with a
    cell side of one unit. Solved as the exact transportation linear program;
    grids larger than ``MAX_EMD_CELLS`` cells must be reduced first with
    :func:`downsample_map`.
    """
    a = _grid(p)
    b = _grid(q)
    _check_same_shape(a, b)
    if a.size > MAX_EMD_CELLS:
        raise ValueError(
            f"grid has {a.size} cells; exact transport is limited to {MAX_EMD_CELLS}, downsample first"
        )
    ta, tb = float(a.sum()), float(b.sum())
    if ta <= 0.0 or tb <= 0.0:
        raise ValueError("transport distance needs positive total mass on both sides")
    a = (a / ta).ravel()
    b = (b / tb).ravel()
    if np.array_equal(a, b):
        return 0.0
    shape = _grid(p).shape
    cost = _ground_distance(shape)
    constraints = _transport_constraints(shape)
    rhs = np.concatenate([a, b])
    # The constraint system has one redundant row; dropping it keeps the LP
    # full-rank for the solver.
    res = linprog(
        cost.ravel(),
        A_eq=constraints[:-1],
        b_eq=rhs[:-1],
        bounds=(0, None),
        method="highs",
    )
    if not res.success:
        raise RuntimeError(f"transport solve failed: {res.message}")
    return max(float(res.fun), 0.0)


@dataclass(frozen=True)
class MetricReport:
    """Arithmetic means of the per-frame metrics over ``count`` frames."""

    cc: float
    kl: float
    entropy: float
    count: int

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ValueError(f"a report needs at least one frame, got {self.count}")


def mean_report(
    preds: Sequence[MapLike],
    gts: Sequence[MapLike],
    epsilon: float = DEFAULT_KL_EPSILON,
) -> MetricReport:
    """Average per-frame cc/kl/entropy over paired predictions and truths.

    Frames where the correlation is undefined (a constant map on either
    side) are skipped for the cc mean only; if no frame defines it, cc is NaN.
    """
    if len(preds) != len(gts):
        raise ValueError("prediction and ground-truth sequences differ in length")
    if not preds:
        raise ValueError("cannot aggregate metrics over zero frames")
    kls, ents, ccs = [], [], []
    for pm, gm in zip(preds, gts):
        kls.append(kl(pm, gm, epsilon))
        ents.append(entropy(pm))
        try:
            ccs.append(cc(pm, gm))
        except UndefinedMetricError:
            pass
    cc_mean = float(np.mean(ccs)) if ccs else math.nan
    return MetricReport(cc=cc_mean, kl=float(np.mean(kls)), entropy=float(np.mean(ents)), count=len(preds))
