"""Greedy attention-block selection.

The core loop: probe-score every candidate block by pinning its attention
scale to zero and training the remaining scalars for a single cheap epoch,
remove the block whose probe loss is lowest, rescale at a small learning
rate, repeat. A one-shot "full greedy" comparator and a random-removal
baseline share the same trace format so downstream reports treat all three
strategies uniformly.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Sample
from .model import BlockMask, ScaleSet, Weights
from .train import TrainConfig, dataset_loss, derive_seed, evaluate_all, train_scales

STRATEGIES = ("iterative", "full-greedy", "random")


class NoElbowWarning(UserWarning):
    """Loss curve has no discernible kink; the elbow index is arbitrary."""


@dataclass
class HopscotchConfig:
    """Stopping rule plus probe/rescale hyperparameters.

    Exactly one of ``remove_count`` and ``loss_threshold`` must be set. With
    a threshold, removal continues until the post-rescale loss first exceeds
    it (that final step is kept in the trace and the mask).
    """

    remove_count: int | None = None
    loss_threshold: float | None = None
    probe_lr: float = 1e-2
    rescale: TrainConfig = field(default_factory=TrainConfig)
    candidates: tuple[int, ...] | None = None

    def __post_init__(self):
        if (self.remove_count is None) == (self.loss_threshold is None):
            raise ValueError(
                "exactly one stopping criterion: set remove_count or loss_threshold"
            )
        if self.remove_count is not None and self.remove_count < 0:
            raise ValueError("remove_count must be >= 0")
        if self.probe_lr <= 0:
            raise ValueError("probe_lr must be positive")


@dataclass
class StepRecord:
    """One removal step: candidate scores, the pick, and what rescaling did."""

    scores: dict[int, float]
    chosen: int
    rescale_trace: list[float] = field(default_factory=list)
    eval_accuracy: dict[str, float] | None = None

    @property
    def post_loss(self) -> float:
        return min(self.rescale_trace) if self.rescale_trace else math.nan


@dataclass
class RemovalTrace:
    strategy: str
    seed: int
    baseline_loss: float | None = None
    baseline_accuracy: dict[str, float] | None = None
    steps: list[StepRecord] = field(default_factory=list)

    def removed_layers(self) -> list[int]:
        return [st.chosen for st in self.steps]

    def validate(self) -> None:
        removed = self.removed_layers()
        if len(set(removed)) != len(removed):
            raise ValueError(f"trace removes a layer twice: {removed}")
        for i, st in enumerate(self.steps):
            if not st.scores:
                continue  # random-baseline steps carry no probe scores
            want = select_block(st.scores)
            if st.chosen != want:
                raise ValueError(
                    f"step {i} chose layer {st.chosen}, argmin of its scores is {want}"
                )

    def loss_curve(self) -> list[float]:
        """Baseline loss followed by each step's best post-rescale loss."""
        curve = [] if self.baseline_loss is None else [self.baseline_loss]
        curve.extend(st.post_loss for st in self.steps)
        return curve


def score_block(
    w: Weights,
    s: ScaleSet,
    data: list[Sample],
    l: int,
    probe_lr: float = 1e-2,
    batch_size: int = 32,
    shuffle_seed: int = 0,
) -> float:
    """Average training loss of one probe epoch with b_att[l] pinned to 0.

    All other free scalars train from their current values at ``probe_lr``
    with a fresh optimizer, then everything is thrown away: the caller's
    ScaleSet is never touched. Candidates probed with the same shuffle_seed
    see identical batch order, so their scores differ only through the pin.
    """
    if l in s.pinned:
        raise ValueError(f"layer {l} is already removed")
    probe = s.clone()
    probe.pin_attention(l)
    cfg = TrainConfig(
        learning_rate=probe_lr, batch_size=batch_size, epochs=1, shuffle_seed=shuffle_seed
    )
    _, trace = train_scales(w, probe, data, cfg)
    return trace[0]


def probe_all(
    w: Weights,
    s: ScaleSet,
    data: list[Sample],
    layers: list[int],
    probe_lr: float,
    batch_size: int,
    shuffle_seed: int,
    workers: int = 1,
) -> dict[int, float]:
    """Score every candidate; probes are independent so threads are safe."""

    def one(l: int) -> tuple[int, float]:
        return l, score_block(w, s, data, l, probe_lr, batch_size, shuffle_seed)

    if workers <= 1 or len(layers) <= 1:
        return dict(one(l) for l in layers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return dict(pool.map(one, layers))


def select_block(scores: dict[int, float]) -> int:
    """Argmin over probe scores; ties break toward the lowest layer index."""
    if not scores:
        raise ValueError("select_block on an empty score map")
    return min(scores, key=lambda l: (scores[l], l))


def _candidates(cfg: HopscotchConfig, n_layers: int) -> list[int]:
    cand = list(range(n_layers)) if cfg.candidates is None else sorted(set(cfg.candidates))
    for l in cand:
        if not 0 <= l < n_layers:
            raise ValueError(f"candidate layer {l} outside [0, {n_layers})")
    return cand


def run_hopscotch(
    w: Weights,
    data: list[Sample],
    cfg: HopscotchConfig,
    seed: int = 0,
    eval_set: list[Sample] | None = None,
    workers: int = 1,
) -> tuple[ScaleSet, BlockMask, RemovalTrace]:
    """The iterative loop: probe, remove the least damaging block, rescale."""
    n_layers = w.config.n_layers
    cand = _candidates(cfg, n_layers)
    if cfg.remove_count is not None:
        if cfg.remove_count >= n_layers:
            raise ValueError(f"remove_count {cfg.remove_count} must be < {n_layers} layers")
        budget = cfg.remove_count
    else:
        budget = min(len(cand), n_layers - 1)

    scales = ScaleSet(n_layers)
    trace = RemovalTrace(
        strategy="iterative",
        seed=seed,
        baseline_loss=dataset_loss(w, scales, data, cfg.rescale.batch_size),
        baseline_accuracy=evaluate_all(w, scales, eval_set) if eval_set else None,
    )
    for step in range(budget):
        remaining = [l for l in cand if l not in scales.pinned]
        if not remaining:
            break
        scores = probe_all(
            w,
            scales,
            data,
            remaining,
            cfg.probe_lr,
            cfg.rescale.batch_size,
            derive_seed(seed, "probe", step),
            workers,
        )
        chosen = select_block(scores)
        scales.pin_attention(chosen)
        rescale_cfg = replace(cfg.rescale, shuffle_seed=derive_seed(seed, "rescale", step))
        scales, epoch_losses = train_scales(w, scales, data, rescale_cfg)
        trace.steps.append(
            StepRecord(
                scores=scores,
                chosen=chosen,
                rescale_trace=epoch_losses,
                eval_accuracy=evaluate_all(w, scales, eval_set) if eval_set else None,
            )
        )
        if cfg.loss_threshold is not None and trace.steps[-1].post_loss > cfg.loss_threshold:
            break
    return scales, scales.block_mask(), trace


def full_greedy(
    w: Weights,
    data: list[Sample],
    k: int,
    cfg: HopscotchConfig,
    seed: int = 0,
    eval_set: list[Sample] | None = None,
    workers: int = 1,
) -> tuple[ScaleSet, BlockMask, RemovalTrace]:
    """Score every block once on the intact model, pin the K lowest, rescale once.

    The trace lists one step per pinned layer (scores of later steps are the
    stale first-pass map minus already-chosen layers), with the single
    rescale attached to the last step.
    """
    n_layers = w.config.n_layers
    if k >= n_layers:
        raise ValueError(f"k {k} must be < {n_layers} layers")
    cand = _candidates(cfg, n_layers)
    if k > len(cand):
        raise ValueError(f"k {k} exceeds {len(cand)} candidates")

    scales = ScaleSet(n_layers)
    trace = RemovalTrace(
        strategy="full-greedy",
        seed=seed,
        baseline_loss=dataset_loss(w, scales, data, cfg.rescale.batch_size),
        baseline_accuracy=evaluate_all(w, scales, eval_set) if eval_set else None,
    )
    if k == 0:
        return scales, scales.block_mask(), trace

    scores = probe_all(
        w,
        scales,
        data,
        cand,
        cfg.probe_lr,
        cfg.rescale.batch_size,
        derive_seed(seed, "probe", 0),
        workers,
    )
    pool = dict(scores)
    for _ in range(k):
        chosen = select_block(pool)
        scales.pin_attention(chosen)
        trace.steps.append(StepRecord(scores=dict(pool), chosen=chosen))
        del pool[chosen]

    rescale_cfg = replace(cfg.rescale, shuffle_seed=derive_seed(seed, "rescale", 0))
    scales, epoch_losses = train_scales(w, scales, data, rescale_cfg)
    last = trace.steps[-1]
    last.rescale_trace = epoch_losses
    last.eval_accuracy = evaluate_all(w, scales, eval_set) if eval_set else None
    return scales, scales.block_mask(), trace


def run_random(
    w: Weights,
    data: list[Sample],
    k: int,
    cfg: HopscotchConfig,
    seed: int = 0,
    rescale: bool = True,
    eval_set: list[Sample] | None = None,
) -> tuple[ScaleSet, BlockMask, RemovalTrace]:
    """Random-removal baseline: K blocks drawn from the interior layers.

    The first and last layers are excluded from the pool. With
    ``rescale=False`` the remaining scalars stay at 1.0 (the NoScale
    baseline); the drawn mask depends only on ``seed`` and ``k``, so paired
    scaled/unscaled runs see the same mask.
    """
    n_layers = w.config.n_layers
    cand = _candidates(cfg, n_layers)
    pool = [l for l in cand if 0 < l < n_layers - 1]
    if k > len(pool):
        raise ValueError(f"k {k} exceeds {len(pool)} interior candidates")

    rng = np.random.default_rng(derive_seed(seed, "random-removal"))
    drawn = [int(l) for l in rng.choice(pool, size=k, replace=False)]

    scales = ScaleSet(n_layers)
    trace = RemovalTrace(
        strategy="random",
        seed=seed,
        baseline_loss=dataset_loss(w, scales, data, cfg.rescale.batch_size),
        baseline_accuracy=evaluate_all(w, scales, eval_set) if eval_set else None,
    )
    for l in drawn:
        scales.pin_attention(l)
        trace.steps.append(StepRecord(scores={}, chosen=l))
    if k and rescale:
        rescale_cfg = replace(cfg.rescale, shuffle_seed=derive_seed(seed, "rescale", 0))
        scales, epoch_losses = train_scales(w, scales, data, rescale_cfg)
        trace.steps[-1].rescale_trace = epoch_losses
    if trace.steps and eval_set:
        trace.steps[-1].eval_accuracy = evaluate_all(w, scales, eval_set)
    return scales, scales.block_mask(), trace


def detect_elbow(losses: list[float]) -> int:
    """Index maximizing the discrete second difference of a loss curve.

    Ties break toward the smallest index. When even the largest second
    difference is below 1e-6 the curve is effectively straight and a
    NoElbowWarning is issued alongside the (arbitrary) index.
    """
    if len(losses) < 3:
        raise ValueError(f"detect_elbow needs >= 3 points, got {len(losses)}")
    arr = np.asarray(losses, dtype=np.float64)
    second = arr[2:] - 2.0 * arr[1:-1] + arr[:-2]
    k = int(np.argmax(second)) + 1
    if float(second.max()) < 1e-6:
        warnings.warn("no elbow: loss curve has no discernible kink", NoElbowWarning)
    return k
