"""Frozen-weight scale training, toy pretraining, Adam, and eval metrics.

Scale training minimizes the masked next-token NLL while the transformer
weights stay frozen; only ScaleSet scalars receive updates. Pretraining is
plumbing that manufactures the frozen base model and is the only path that
takes gradients through the weight matrices.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import (
    VOCAB,
    PackedBatch,
    Sample,
    TaskSpec,
    gen_task,
    generate_greedy,
    last_integer,
    pack_batches,
)
from .model import (
    ModelConfig,
    ScaleSet,
    Weights,
    freeze,
    init_weights,
    model_forward,
    named_tensors,
)
from .tensor import ShapeError, Tensor, backward, mul, no_grad, sequence_nll, tsum

METRICS = ("strict", "flexible")


def derive_seed(root: int, *keys) -> int:
    """Stable child seed from a root seed and a path of ints/strings."""
    entropy = []
    for k in (root, *keys):
        if isinstance(k, str):
            k = int.from_bytes(hashlib.sha256(k.encode()).digest()[:8], "little")
        entropy.append(int(k) & 0xFFFFFFFFFFFFFFFF)
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


@dataclass
class TrainConfig:
    learning_rate: float = 3e-3
    batch_size: int = 32
    epochs: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    shuffle_seed: int = 0
    patience: int = 2
    min_delta: float = 1e-4

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class AdamState:
    """First/second moment accumulators and the shared step counter."""

    def __init__(self, named_params: list[tuple[str, Tensor]]):
        self.names = [name for name, _ in named_params]
        self.m = [np.zeros_like(t.data) for _, t in named_params]
        self.v = [np.zeros_like(t.data) for _, t in named_params]
        self.step = 0


def adam_step(
    params: list[Tensor],
    grads: list[np.ndarray | None],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Standard Adam with bias correction, updating params in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError(
            f"adam_step arity mismatch: {len(params)} params, {len(grads)} grads, "
            f"{len(state.m)} moment slots"
        )
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if np.isnan(g).any():
            raise RuntimeError(f"NaN gradient for parameter {state.names[i]}")
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * np.square(g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = p.data - p.dtype.type(lr) * m_hat / (np.sqrt(v_hat) + p.dtype.type(eps))


def scale_loss(w: Weights, s: ScaleSet, batch: PackedBatch) -> Tensor:
    """Mean over batch rows of per-row masked token-mean NLL (differentiable)."""
    if batch.tokens.size == 0:
        raise ValueError("scale_loss on an empty batch")
    logits = model_forward(batch.tokens, w, s)
    rows = sequence_nll(logits, batch.targets, batch.mask)
    return mul(tsum(rows), 1.0 / batch.batch_size)


def hidden_state_loss(
    w: Weights, s: ScaleSet, batch: PackedBatch, reference_hidden: np.ndarray
) -> Tensor:
    """Mean squared L2 distance of final-layer hidden states to a reference.

    The mean runs over scored (masked-in) token positions; the reference must
    come from the unmodified model on the same batch. Kept for the loss
    comparison study; the default pipeline trains on NLL.
    """
    last = w.config.n_layers - 1
    _, hidden = model_forward(batch.tokens, w, s, collect_hidden=(last,))
    h = hidden[last]
    reference_hidden = np.asarray(reference_hidden, dtype=h.dtype)
    if reference_hidden.shape != h.shape:
        raise ShapeError(
            f"reference hidden shape {reference_hidden.shape} != model hidden {h.shape}"
        )
    count = int((batch.mask > 0).sum())
    if count == 0:
        raise ValueError("hidden_state_loss with no scored positions")
    diff = h - Tensor(reference_hidden, dtype=h.dtype)
    sq = mul(diff, diff)
    masked = mul(sq, batch.mask.astype(h.dtype)[..., None])
    return mul(tsum(masked), 1.0 / count)


def dataset_loss(w: Weights, s: ScaleSet, data: list[Sample], batch_size: int = 32) -> float:
    """Mean scale_loss over the whole dataset, no gradients, no shuffling."""
    if not data:
        raise ValueError("dataset_loss on empty data")
    batches = pack_batches(data, batch_size, max_len=w.config.max_seq_len)
    with no_grad():
        vals = [scale_loss(w, s, b).item() for b in batches]
    return sum(vals) / len(vals)


def train_scales(
    w: Weights, s: ScaleSet, data: list[Sample], cfg: TrainConfig
) -> tuple[ScaleSet, list[float]]:
    """Adam over the free scalars; early stop on an epoch-loss plateau.

    Does not mutate ``s``. Per-epoch loss is the mean of batch training
    losses; the returned ScaleSet is the state at the end of the best epoch.
    """
    if not data:
        raise ValueError("train_scales needs nonempty data")
    work = s.clone()
    named = work.free_parameters()
    params = [t for _, t in named]
    state = AdamState(named)

    best = work.clone()
    best_loss = math.inf
    stale = 0
    trace: list[float] = []
    for epoch in range(cfg.epochs):
        batches = pack_batches(
            data,
            cfg.batch_size,
            max_len=w.config.max_seq_len,
            shuffle_seed=derive_seed(cfg.shuffle_seed, "epoch", epoch),
        )
        losses = []
        for batch in batches:
            loss = scale_loss(w, work, batch)
            backward(loss)
            adam_step(
                params,
                [p.grad for p in params],
                state,
                cfg.learning_rate,
                cfg.beta1,
                cfg.beta2,
                cfg.adam_eps,
            )
            losses.append(loss.item())
        epoch_loss = sum(losses) / len(losses)
        trace.append(epoch_loss)
        if epoch_loss < best_loss:
            best = work.clone()
        if epoch_loss < best_loss - cfg.min_delta:
            stale = 0
        else:
            stale += 1
        best_loss = min(best_loss, epoch_loss)
        if stale >= cfg.patience:
            break
    return best, trace


@dataclass
class PretrainResult:
    weights: Weights
    final_accuracy: float
    steps_run: int
    eval_history: list[tuple[int, float]] = field(default_factory=list)


def pretrain(
    config: ModelConfig,
    task: TaskSpec,
    steps: int,
    lr: float,
    seed: int = 0,
    batch_size: int = 32,
    target_accuracy: float = 0.9,
    eval_every: int = 250,
    eval_n: int = 128,
) -> PretrainResult:
    """Full-weight training on freshly generated task batches.

    Stops early once held-out flexible-extract accuracy reaches
    ``target_accuracy``. Returns frozen weights plus the recorded accuracy.
    """
    w = init_weights(config, seed=derive_seed(seed, "init"), requires_grad=True)
    scales = ScaleSet(config.n_layers, trainable=False)
    named = list(named_tensors(w))
    params = [t for _, t in named]
    state = AdamState(named)
    eval_set = gen_task(replace(task, seed=derive_seed(seed, "pretrain-eval")), eval_n)

    history: list[tuple[int, float]] = []
    steps_run = 0
    for step in range(steps):
        samples = gen_task(
            replace(task, seed=derive_seed(seed, "pretrain-data", step)), batch_size
        )
        batch = pack_batches(samples, batch_size, config.max_seq_len)[0]
        loss = scale_loss(w, scales, batch)
        backward(loss)
        adam_step(params, [p.grad for p in params], state, lr)
        steps_run = step + 1
        if steps_run % eval_every == 0 or steps_run == steps:
            acc = evaluate(w, scales, eval_set, "flexible")
            history.append((steps_run, acc))
            if acc >= target_accuracy:
                break
    final_accuracy = history[-1][1] if history else evaluate(w, scales, eval_set, "flexible")
    return PretrainResult(freeze(w), final_accuracy, steps_run, history)


def evaluate_all(
    w: Weights, s: ScaleSet, eval_set: list[Sample], max_new: int | None = None
) -> dict[str, float]:
    """Greedy-generate once per prompt and score both metrics."""
    if not eval_set:
        raise ValueError("evaluate on an empty set")
    hits = {m: 0 for m in METRICS}
    for sample in eval_set:
        room = w.config.max_seq_len - len(sample.prompt) - 3
        budget = min(room, len(sample.target) + 16) if max_new is None else max_new
        gen = generate_greedy(w, s, sample.prompt, budget)
        text = VOCAB.decode(gen)
        truth = sample.target_text
        if text == truth:
            hits["strict"] += 1
        want = last_integer(truth)
        if want is not None and last_integer(text) == want:
            hits["flexible"] += 1
    return {m: hits[m] / len(eval_set) for m in METRICS}


def evaluate(
    w: Weights, s: ScaleSet, eval_set: list[Sample], metric: str, max_new: int | None = None
) -> float:
    """Accuracy under one metric: exact string match or last-integer match."""
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")
    return evaluate_all(w, s, eval_set, max_new)[metric]
