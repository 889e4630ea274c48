"""Causal transformer with per-layer scalar gates on every block output.

Each decoder layer computes

    x1    = b_att * Attention(Norm(x_in)) + s_att * x_in
    x_out = b_mlp * MLP(Norm(x1))         + s_mlp * x1

where the four scalars live in a ScaleSet. All ones recovers the plain
model; pinning b_att of a layer to zero skips its attention block entirely
(the sub-computation is not executed, not multiplied by zero). Weights are
frozen during every scale-training phase; only the toy pretraining path ever
takes gradients through them.

Architecture: pre-norm RMSNorm, standard multi-head causal attention
(equal d x d q/k/v/o projections), two-projection MLP (d -> d_ff -> d) with
SiLU, learned absolute position embeddings, no biases.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import (
    Tensor,
    add,
    embedding,
    masked_fill,
    matmul,
    mul,
    reshape,
    rms_norm,
    silu,
    softmax_rows,
    transpose,
)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_seq_len: int
    norm_eps: float = 1e-5

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ModelConfig.{name} must be positive")
        if self.norm_eps <= 0:
            raise ValueError("ModelConfig.norm_eps must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "norm_eps": self.norm_eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LayerWeights:
    """One decoder layer. Attention fields are None after physical removal."""

    wq: Tensor | None
    wk: Tensor | None
    wv: Tensor | None
    wo: Tensor | None
    attn_gain: Tensor | None
    w_up: Tensor
    w_down: Tensor
    mlp_gain: Tensor

    @property
    def attention_present(self) -> bool:
        return self.wq is not None


@dataclass
class Weights:
    config: ModelConfig
    tok_emb: Tensor
    pos_emb: Tensor
    layers: list[LayerWeights]
    final_gain: Tensor
    head: Tensor


_ATTN_NAMES = ("wq", "wk", "wv", "wo", "attn_gain")
_LAYER_NAMES = _ATTN_NAMES + ("w_up", "w_down", "mlp_gain")


def init_weights(
    config: ModelConfig, seed: int, dtype=np.float32, requires_grad: bool = False
) -> Weights:
    """Gaussian init (std 0.02), residual projections scaled down by sqrt(2L)."""
    rng = np.random.default_rng(seed)
    std = 0.02
    res_std = std / math.sqrt(2 * config.n_layers)

    def mat(rows, cols, s):
        return Tensor(rng.normal(0.0, s, size=(rows, cols)), requires_grad, dtype)

    def gain(n):
        return Tensor(np.ones(n), requires_grad, dtype)

    d, dff = config.d_model, config.d_ff
    layers = [
        LayerWeights(
            wq=mat(d, d, std),
            wk=mat(d, d, std),
            wv=mat(d, d, std),
            wo=mat(d, d, res_std),
            attn_gain=gain(d),
            w_up=mat(d, dff, std),
            w_down=mat(dff, d, res_std),
            mlp_gain=gain(d),
        )
        for _ in range(config.n_layers)
    ]
    return Weights(
        config=config,
        tok_emb=mat(config.vocab_size, d, std),
        pos_emb=mat(config.max_seq_len, d, std),
        layers=layers,
        final_gain=gain(d),
        head=mat(d, config.vocab_size, std),
    )


def named_tensors(w: Weights):
    """Yield (name, Tensor) in a fixed canonical order, skipping removed mats."""
    yield "tok_emb", w.tok_emb
    yield "pos_emb", w.pos_emb
    for i, lw in enumerate(w.layers):
        for name in _LAYER_NAMES:
            t = getattr(lw, name)
            if t is not None:
                yield f"layers.{i}.{name}", t
    yield "final_gain", w.final_gain
    yield "head", w.head


def n_params(w: Weights) -> int:
    return sum(t.data.size for _, t in named_tensors(w))


def weights_hash(w: Weights) -> str:
    """Content hash over tensor names, shapes, and little-endian bytes."""
    h = hashlib.sha256()
    for name, t in named_tensors(w):
        h.update(name.encode())
        h.update(repr(t.shape).encode())
        h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return h.hexdigest()


def freeze(w: Weights) -> Weights:
    """Return the same weights with gradient tracking disabled everywhere."""
    for _, t in named_tensors(w):
        t.requires_grad = False
    return w


def weights_from_arrays(
    config: ModelConfig, arrays, requires_grad: bool = False
) -> Weights:
    """Rebuild Weights from a {canonical name: array} mapping.

    A layer may omit all five attention tensors (a removed block) but never
    a subset of them; everything else is required.
    """

    def fetch(name, required=True):
        arr = arrays.get(name)
        if arr is None:
            if required:
                raise ValueError(f"missing tensor {name}")
            return None
        return Tensor(arr, requires_grad)

    layers = []
    for i in range(config.n_layers):
        have = [f"layers.{i}.{n}" in arrays for n in _ATTN_NAMES]
        if any(have) != all(have):
            raise ValueError(f"layer {i} has a partial attention block")
        lw = LayerWeights(
            **{n: fetch(f"layers.{i}.{n}", required=False) for n in _ATTN_NAMES},
            **{n: fetch(f"layers.{i}.{n}") for n in ("w_up", "w_down", "mlp_gain")},
        )
        layers.append(lw)
    return Weights(
        config=config,
        tok_emb=fetch("tok_emb"),
        pos_emb=fetch("pos_emb"),
        layers=layers,
        final_gain=fetch("final_gain"),
        head=fetch("head"),
    )


@dataclass(frozen=True)
class BlockMask:
    """Set of layer indices whose attention block is skipped."""

    removed: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "removed", frozenset(self.removed))

    def validate(self, n_layers: int) -> None:
        bad = [l for l in self.removed if not 0 <= l < n_layers]
        if bad:
            raise ValueError(f"mask layers {sorted(bad)} outside [0, {n_layers})")

    def sorted(self) -> list[int]:
        return sorted(self.removed)


class ScaleSet:
    """The trainable scalars: b_att, s_att, b_mlp, s_mlp per layer.

    All start at 1.0 (identity). ``pin_attention`` fixes a layer's b_att to
    exactly 0.0 and drops it from the free parameter set; the other three
    scalars of that layer stay trainable.
    """

    GROUPS = ("b_att", "s_att", "b_mlp", "s_mlp")

    def __init__(self, n_layers: int, dtype=np.float32, trainable: bool = True):
        self.n_layers = n_layers
        self.dtype = np.dtype(dtype)
        self.pinned: set[int] = set()
        for group in self.GROUPS:
            setattr(
                self,
                group,
                [Tensor(1.0, requires_grad=trainable, dtype=dtype) for _ in range(n_layers)],
            )

    def pin_attention(self, layer: int) -> None:
        if not 0 <= layer < self.n_layers:
            raise ValueError(f"layer {layer} outside [0, {self.n_layers})")
        self.b_att[layer] = Tensor(0.0, requires_grad=False, dtype=self.dtype)
        self.pinned.add(layer)

    def free_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for group in self.GROUPS:
            for l, t in enumerate(getattr(self, group)):
                if group == "b_att" and l in self.pinned:
                    continue
                out.append((f"{group}[{l}]", t))
        return out

    def clone(self) -> "ScaleSet":
        c = ScaleSet(self.n_layers, dtype=self.dtype)
        for group in self.GROUPS:
            src = getattr(self, group)
            dst = getattr(c, group)
            for l in range(self.n_layers):
                dst[l] = Tensor(
                    src[l].data.copy(), requires_grad=src[l].requires_grad, dtype=self.dtype
                )
        c.pinned = set(self.pinned)
        return c

    def values(self) -> dict[str, list[float]]:
        return {
            group: [float(t.data) for t in getattr(self, group)] for group in self.GROUPS
        }

    @classmethod
    def from_values(
        cls, values: dict[str, list[float]], pinned, dtype=np.float32
    ) -> "ScaleSet":
        n_layers = len(values["b_att"])
        s = cls(n_layers, dtype=dtype)
        for group in cls.GROUPS:
            lst = getattr(s, group)
            for l, v in enumerate(values[group]):
                lst[l] = Tensor(v, requires_grad=True, dtype=dtype)
        for l in pinned:
            s.pin_attention(l)
            if values["b_att"][l] != 0.0:
                raise ValueError(f"pinned layer {l} carries nonzero b_att")
        return s

    def block_mask(self) -> BlockMask:
        return BlockMask(frozenset(self.pinned))

    @classmethod
    def ones(cls, n_layers: int, mask: BlockMask | None = None, dtype=np.float32) -> "ScaleSet":
        """All-ones scales, optionally with a mask pre-pinned (the NoScale baseline)."""
        s = cls(n_layers, dtype=dtype)
        if mask is not None:
            for l in mask.sorted():
                s.pin_attention(l)
        return s


_causal_cache: dict[int, np.ndarray] = {}


def _causal_mask(t: int) -> np.ndarray:
    m = _causal_cache.get(t)
    if m is None:
        m = np.tril(np.ones((t, t), dtype=bool))
        _causal_cache[t] = m
    return m


def _attention(x: Tensor, lw: LayerWeights, config: ModelConfig, eps: float) -> Tensor:
    """Multi-head causal self-attention on [..., T, d]."""
    n_heads = config.n_heads
    d_head = config.d_model // n_heads
    t_len = x.shape[-2]

    h = rms_norm(x, lw.attn_gain, eps)
    q = matmul(h, lw.wq)
    k = matmul(h, lw.wk)
    v = matmul(h, lw.wv)

    split = x.shape[:-1] + (n_heads, d_head)
    # [..., T, H, dh] -> [..., H, T, dh]
    perm = tuple(range(len(split) - 3)) + (len(split) - 2, len(split) - 3, len(split) - 1)
    q = transpose(reshape(q, split), perm)
    k = transpose(reshape(k, split), perm)
    v = transpose(reshape(v, split), perm)

    kt_axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = mul(matmul(q, transpose(k, kt_axes)), 1.0 / math.sqrt(d_head))
    scores = masked_fill(scores, _causal_mask(t_len), -np.inf)
    ctx = matmul(softmax_rows(scores), v)

    ctx = transpose(ctx, perm)  # back to [..., T, H, dh]
    ctx = reshape(ctx, x.shape[:-1] + (config.d_model,))
    return matmul(ctx, lw.wo)


def block_forward(x: Tensor, layer: int, w: Weights, s: ScaleSet) -> Tensor:
    """Apply one scaled decoder layer to hidden states [..., T, d]."""
    config = w.config
    if not 0 <= layer < config.n_layers:
        raise ValueError(f"layer {layer} outside [0, {config.n_layers})")
    lw = w.layers[layer]

    if layer in s.pinned:
        x1 = mul(s.s_att[layer], x)
    else:
        if not lw.attention_present:
            raise ValueError(f"layer {layer} attention weights removed but not pinned")
        att = _attention(x, lw, config, config.norm_eps)
        x1 = add(mul(s.b_att[layer], att), mul(s.s_att[layer], x))

    h = rms_norm(x1, lw.mlp_gain, config.norm_eps)
    m = matmul(silu(matmul(h, lw.w_up)), lw.w_down)
    return add(mul(s.b_mlp[layer], m), mul(s.s_mlp[layer], x1))


def model_forward(tokens, w: Weights, s: ScaleSet, collect_hidden=None):
    """Run the full model on token ids [T] or [B, T].

    Returns logits ([T, V] or [B, T, V]); with ``collect_hidden`` (an iterable
    of layer indices) returns (logits, {layer: post-block hidden Tensor}).
    """
    config = w.config
    tokens = np.asarray(tokens, dtype=np.int64)
    t_len = tokens.shape[-1]
    if t_len > config.max_seq_len:
        raise ValueError(f"sequence length {t_len} exceeds max_seq_len {config.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise ValueError("token id out of range")

    wanted = frozenset(collect_hidden) if collect_hidden is not None else frozenset()
    x = add(embedding(w.tok_emb, tokens), embedding(w.pos_emb, np.arange(t_len)))
    hidden: dict[int, Tensor] = {}
    for layer in range(config.n_layers):
        x = block_forward(x, layer, w, s)
        if layer in wanted:
            hidden[layer] = x
    logits = matmul(rms_norm(x, w.final_gain, config.norm_eps), w.head)
    if collect_hidden is not None:
        return logits, hidden
    return logits


def physically_remove(w: Weights, mask: BlockMask) -> Weights:
    """Drop q/k/v/o and the attention norm gain of masked layers.

    Remaining tensors are shared, not copied. A forward pass over the result
    with the mask pinned in the ScaleSet matches the pinned forward on the
    original weights.
    """
    mask.validate(w.config.n_layers)
    layers = []
    for i, lw in enumerate(w.layers):
        if i in mask.removed:
            layers.append(
                replace(lw, wq=None, wk=None, wv=None, wo=None, attn_gain=None)
            )
        else:
            layers.append(lw)
    return Weights(
        config=w.config,
        tok_emb=w.tok_emb,
        pos_emb=w.pos_emb,
        layers=layers,
        final_gain=w.final_gain,
        head=w.head,
    )
