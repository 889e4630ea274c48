"""Diagnostics around block removal.

Covers four instruments: MMD² shift of hidden-state distributions between
the original model and its ablated variants, largest-singular-value
screening of weight matrices, Spearman rank correlation for validating the
probe score as a selection proxy, and the closed-form efficiency accounting
for removed attention blocks. Also holds the int8 per-channel weight
quantization used in the composition study.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .data import Sample, pack_batches
from .model import (
    BlockMask,
    ModelConfig,
    ScaleSet,
    Weights,
    model_forward,
    named_tensors,
    weights_from_arrays,
)
from .tensor import no_grad

MMD_MAX_ROWS = 2000


def collect_hidden_states(
    w: Weights,
    s: ScaleSet,
    data: list[Sample],
    layers: list[int],
    batch_size: int = 32,
) -> dict[int, np.ndarray]:
    """Post-block residual-stream states at scored token positions.

    Returns one [m, d] float64 matrix per requested layer; m counts every
    loss-masked position across the dataset, in batch order.
    """
    rows: dict[int, list[np.ndarray]] = {l: [] for l in layers}
    with no_grad():
        for batch in pack_batches(data, batch_size, max_len=w.config.max_seq_len):
            _, hidden = model_forward(batch.tokens, w, s, collect_hidden=layers)
            keep = batch.mask > 0
            for l in layers:
                rows[l].append(hidden[l].data[keep].astype(np.float64))
    return {l: np.concatenate(rows[l], axis=0) for l in layers}


def _subsample(x: np.ndarray, max_rows: int, seed: int) -> np.ndarray:
    if x.shape[0] <= max_rows:
        return x
    idx = np.random.default_rng(seed).choice(x.shape[0], size=max_rows, replace=False)
    return x[np.sort(idx)]


def mmd2(x: np.ndarray, y: np.ndarray, max_rows: int = MMD_MAX_ROWS, seed: int = 0) -> float:
    """Squared maximum mean discrepancy, biased V-statistic, RBF kernel.

    The bandwidth is the median of pairwise distances over the
    pooled sample (median heuristic); a degenerate all-equal pool falls back
    to unit bandwidth. Kernel sums use math.fsum, so the result is invariant
    under row permutation and mmd2(x, x) is exactly 0. Sides larger than
    ``max_rows`` are subsampled with a fixed seed.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError("mmd2 needs two nonempty [m, d] samples")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    x = _subsample(x, max_rows, seed)
    y = _subsample(y, max_rows, seed)

    pooled = np.concatenate([x, y], axis=0)
    pool_d2 = cdist(pooled, pooled, "sqeuclidean")
    iu = np.triu_indices(pooled.shape[0], k=1)
    med = float(np.median(np.sqrt(pool_d2[iu]))) if iu[0].size else 0.0
    gamma = 1.0 / (2.0 * med * med) if med > 0.0 else 1.0

    def kernel_mean(a: np.ndarray, b: np.ndarray) -> float:
        k = np.exp(-gamma * cdist(a, b, "sqeuclidean"))
        return math.fsum(k.ravel()) / (a.shape[0] * b.shape[0])

    return kernel_mean(x, x) + kernel_mean(y, y) - 2.0 * kernel_mean(x, y)


def mmd_report(
    w: Weights,
    data: list[Sample],
    scales_hopscotch: ScaleSet,
    mask: BlockMask,
    layers: list[int],
    batch_size: int = 32,
) -> dict[int, dict[str, float]]:
    """Per-layer MMD² of NoScale and scaled variants against the original.

    NoScale pins the masked blocks with every remaining scalar at 1.0; the
    scaled variant uses the trained ScaleSet. Output keys follow the
    requested layer order.
    """
    original = collect_hidden_states(w, ScaleSet.ones(w.config.n_layers), data, layers, batch_size)
    noscale = collect_hidden_states(
        w, ScaleSet.ones(w.config.n_layers, mask), data, layers, batch_size
    )
    scaled = collect_hidden_states(w, scales_hopscotch, data, layers, batch_size)
    return {
        l: {
            "noscale": mmd2(original[l], noscale[l]),
            "hopscotch": mmd2(original[l], scaled[l]),
        }
        for l in layers
    }


@dataclass
class SingularReport:
    """Largest singular value per 2-D weight matrix, keyed by tensor name."""

    sigma_max: dict[str, float]

    def layer_matrix(self, layer: int, name: str) -> float:
        return self.sigma_max[f"layers.{layer}.{name}"]


def _power_sigma_max(mat: np.ndarray, iters: int = 200, tol: float = 1e-10) -> float:
    """sqrt of the top eigenvalue of WᵀW via power iteration, seed 0."""
    a = np.asarray(mat, dtype=np.float64)
    if not np.any(a):
        return 0.0
    v = np.random.default_rng(0).normal(size=a.shape[1])
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        u = a.T @ (a @ v)
        norm = np.linalg.norm(u)
        if norm == 0.0:
            return 0.0
        v = u / norm
        new_est = float(np.linalg.norm(a @ v))
        if abs(new_est - est) < tol * max(new_est, 1.0):
            return new_est
        est = new_est
    return est


def max_singular_values(w: Weights) -> SingularReport:
    """σ_max for every 2-D weight matrix (gains and embeddings included iff 2-D)."""
    out = {}
    for name, t in named_tensors(w):
        if t.data.ndim == 2:
            out[name] = _power_sigma_max(t.data)
    return SingularReport(out)


def _average_ranks(a: np.ndarray) -> np.ndarray:
    order = np.argsort(a, kind="stable")
    ranks = np.empty(len(a), dtype=np.float64)
    i = 0
    while i < len(a):
        j = i
        while j < len(a) and a[order[j]] == a[order[i]]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j - 1) + 1.0
        i = j
    return ranks


def spearman(xs, ys) -> float:
    """Rank correlation with average ranks for ties."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("spearman needs two equal-length 1-D vectors")
    if len(xs) < 2:
        raise ValueError("spearman needs n >= 2")
    rx = _average_ranks(xs)
    ry = _average_ranks(ys)
    if np.all(rx == rx[0]) or np.all(ry == ry[0]):
        raise ValueError("spearman undefined: zero rank variance")
    return float(np.corrcoef(rx, ry)[0, 1])


@dataclass(frozen=True)
class EfficiencyInput:
    total_params: float
    n_layers: int
    removed: int
    attn_time_fraction: float = 0.66
    bytes_per_param: int = 2

    def __post_init__(self):
        if not 0.0 < self.attn_time_fraction <= 1.0:
            raise ValueError("attn_time_fraction must be in (0, 1]")
        if self.n_layers < 1 or self.total_params <= 0:
            raise ValueError("need positive layer and parameter counts")
        if not 0 <= self.removed <= self.n_layers:
            raise ValueError(f"removed {self.removed} outside [0, {self.n_layers}]")


def efficiency_report(inp: EfficiencyInput) -> dict[str, float]:
    """Approximate savings from removing attention blocks.

    Time assumes attention consumes ``attn_time_fraction`` of the forward
    pass spread evenly over layers; parameters assume attention is one third
    of each decoder layer. Deliberately an accounting model, not a
    measurement.
    """
    time_pct = 100.0 * inp.removed * inp.attn_time_fraction / inp.n_layers
    saved_params = inp.removed * (inp.total_params / inp.n_layers) / 3.0
    return {
        "time_reduction_pct": time_pct,
        "param_reduction_pct": 100.0 * saved_params / inp.total_params,
        "memory_reduction_bytes": saved_params * inp.bytes_per_param,
    }


@dataclass
class QuantizedTensor:
    """int8 codes with one float scale per output channel (column)."""

    codes: np.ndarray
    scales: np.ndarray

    def dequantized(self) -> np.ndarray:
        return (self.codes.astype(np.float32)) * self.scales.astype(np.float32)


@dataclass
class QuantizedWeights:
    config: ModelConfig
    quantized: dict[str, QuantizedTensor]
    passthrough: dict[str, np.ndarray]


def _quantize_matrix(mat: np.ndarray) -> QuantizedTensor:
    a = np.asarray(mat, dtype=np.float64)
    scales = (np.abs(a).max(axis=0) / 127.0).astype(np.float32)
    safe = np.where(scales > 0.0, scales.astype(np.float64), 1.0)
    codes = np.clip(np.rint(a / safe), -127, 127).astype(np.int8)
    codes[:, scales == 0.0] = 0
    return QuantizedTensor(codes, scales)


def quantize_int8(w: Weights) -> QuantizedWeights:
    """Symmetric round-to-nearest int8 over every 2-D projection matrix.

    The per-column max maps to ±127; an all-zero column gets scale 0 and
    all-zero codes. Embeddings stay in float (they are lookups, not
    matmuls), as do the 1-D norm gains.
    """
    quantized = {}
    passthrough = {}
    for name, t in named_tensors(w):
        if t.data.ndim == 2 and not name.endswith(("tok_emb", "pos_emb")):
            quantized[name] = _quantize_matrix(t.data)
        else:
            passthrough[name] = t.data.copy()
    return QuantizedWeights(w.config, quantized, passthrough)


def dequantize(qw: QuantizedWeights) -> Weights:
    """Materialize a float Weights whose matrices are the dequantized codes."""
    arrays = dict(qw.passthrough)
    arrays.update({name: qt.dequantized() for name, qt in qw.quantized.items()})
    return weights_from_arrays(qw.config, arrays)
