"""Synthetic tasks, the character tokenizer, batching, and teacher data.

Tasks are deterministic functions of (spec, seed). The arithmetic chain is
the on-task set (the one scale training recovers); copy/reverse/parity are
off-task evaluation analogs and are never used for training scales.

Arithmetic chains evaluate left to right (no operator precedence), reducing
every intermediate modulo the task modulus. Targets spell out each step and
end with the answer sentinel, e.g. prompt ``7+3*2=?`` with modulus 100 gives
target ``7+3=10,10*2=20,ans 20``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from string import ascii_lowercase

import numpy as np

from .model import ScaleSet, Weights, model_forward
from .tensor import no_grad


class DataError(ValueError):
    """Invalid task parameters or unbatchable samples."""


class Vocabulary:
    """Fixed character table: digits, operators, a-z, space, and 4 specials.

    Encode/decode are bijective for any string over the covered characters.
    """

    SPECIALS = ("<pad>", "<bos>", "<eos>", "<sep>")
    CHARS = "0123456789" + "+-*=%,?" + ascii_lowercase + " "

    def __init__(self):
        self.pad, self.bos, self.eos, self.sep = range(4)
        self._id_to_char = list(self.SPECIALS) + list(self.CHARS)
        self._char_to_id = {c: len(self.SPECIALS) + i for i, c in enumerate(self.CHARS)}

    def __len__(self) -> int:
        return len(self._id_to_char)

    def encode(self, text: str) -> list[int]:
        try:
            return [self._char_to_id[c] for c in text]
        except KeyError as exc:
            raise DataError(f"character {exc.args[0]!r} not in vocabulary") from exc

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self._id_to_char):
                raise DataError(f"token id {i} out of range")
            if i >= len(self.SPECIALS):
                out.append(self._id_to_char[i])
        return "".join(out)


VOCAB = Vocabulary()


@dataclass(frozen=True)
class Sample:
    """Prompt and target token ids plus a loss mask over the target."""

    prompt: tuple[int, ...]
    target: tuple[int, ...]
    loss_mask: tuple[int, ...]

    def __post_init__(self):
        if len(self.loss_mask) != len(self.target):
            raise DataError(
                f"loss_mask length {len(self.loss_mask)} != target length {len(self.target)}"
            )

    @classmethod
    def from_text(cls, prompt: str, response: str) -> "Sample":
        target = tuple(VOCAB.encode(response))
        return cls(tuple(VOCAB.encode(prompt)), target, (1,) * len(target))

    @property
    def prompt_text(self) -> str:
        return VOCAB.decode(self.prompt)

    @property
    def target_text(self) -> str:
        return VOCAB.decode(self.target)


@dataclass
class PackedBatch:
    """Row-per-sample token/label/mask matrices; PAD is never scored."""

    tokens: np.ndarray  # [B, T] int64 inputs
    targets: np.ndarray  # [B, T] int64 next-token labels
    mask: np.ndarray  # [B, T] int8, 1 = scored

    @property
    def batch_size(self) -> int:
        return self.tokens.shape[0]


TASK_KINDS = ("arith-chain", "copy", "reverse", "parity")


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "arith-chain"
    chain_len: int = 3
    operand_lo: int = 0
    operand_hi: int = 9
    modulus: int = 100
    str_len: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise DataError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if self.chain_len < 1:
            raise DataError("chain_len must be >= 1")
        if not 0 <= self.operand_lo <= self.operand_hi:
            raise DataError("need 0 <= operand_lo <= operand_hi")
        if self.modulus < 2:
            raise DataError("modulus must be >= 2")
        if self.str_len < 1:
            raise DataError("str_len must be >= 1")


def _rng_for(seed: int, index: int) -> np.random.Generator:
    # per-index streams keep sample i independent of how many others are drawn
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


_OPS = "+-*"
_APPLY = {
    "+": lambda a, b, m: (a + b) % m,
    "-": lambda a, b, m: (a - b) % m,
    "*": lambda a, b, m: (a * b) % m,
}


def _gen_arith(spec: TaskSpec, rng: np.random.Generator) -> tuple[str, str]:
    k = int(rng.integers(1, spec.chain_len + 1))
    operands = [int(v) for v in rng.integers(spec.operand_lo, spec.operand_hi + 1, size=k + 1)]
    ops = [_OPS[int(i)] for i in rng.integers(0, len(_OPS), size=k)]
    prompt = str(operands[0])
    for op, b in zip(ops, operands[1:]):
        prompt += f"{op}{b}"
    prompt += "=?"
    acc = operands[0] % spec.modulus
    steps = []
    for op, b in zip(ops, operands[1:]):
        nxt = _APPLY[op](acc, b, spec.modulus)
        steps.append(f"{acc}{op}{b}={nxt}")
        acc = nxt
    target = ",".join(steps + [f"ans {acc}"])
    return prompt, target


def _gen_string(spec: TaskSpec, rng: np.random.Generator) -> tuple[str, str]:
    n = int(rng.integers(1, spec.str_len + 1))
    if spec.kind == "parity":
        s = "".join(str(int(b)) for b in rng.integers(0, 2, size=n))
        return f"par {s}=?", f"ans {s.count('1') % 2}"
    s = "".join(str(int(d)) for d in rng.integers(0, 10, size=n))
    if spec.kind == "copy":
        return f"copy {s}=?", f"ans {s}"
    return f"rev {s}=?", f"ans {s[::-1]}"


def gen_task(spec: TaskSpec, count: int) -> list[Sample]:
    """Generate ``count`` samples; identical (spec, count) gives identical data."""
    if count <= 0:
        raise DataError(f"count must be positive, got {count}")
    make = _gen_arith if spec.kind == "arith-chain" else _gen_string
    samples = []
    for i in range(count):
        prompt, target = make(spec, _rng_for(spec.seed, i))
        samples.append(Sample.from_text(prompt, target))
    return samples


def encoded_length(sample: Sample) -> int:
    # BOS + prompt + SEP + target + EOS, minus one for the shift
    return len(sample.prompt) + len(sample.target) + 2


def _encode_row(sample: Sample, max_len: int, truncate: bool):
    prompt, target, bits = sample.prompt, sample.target, sample.loss_mask
    if encoded_length(sample) > max_len:
        if not truncate:
            raise DataError(
                f"sample of encoded length {encoded_length(sample)} exceeds max_len "
                f"{max_len} and truncation is disabled"
            )
        keep = max_len - len(prompt) - 2
        if keep < 0:
            raise DataError(f"prompt alone exceeds max_len {max_len}")
        target, bits = target[:keep], bits[:keep]
    full = [VOCAB.bos, *prompt, VOCAB.sep, *target, VOCAB.eos]
    inputs = full[:-1]
    labels = full[1:]
    mask = [0] * len(labels)
    base = len(prompt) + 1  # first label index inside the target region
    for j, bit in enumerate(bits):
        mask[base + j] = int(bit)
    mask[base + len(target)] = 1  # the EOS prediction is always scored
    return inputs, labels, mask


def pack_batches(
    samples: list[Sample],
    batch_size: int,
    max_len: int,
    shuffle_seed: int | None = None,
    truncate: bool = False,
) -> list[PackedBatch]:
    """Pad samples into row-per-sample batches.

    Ordering is the input order, or a fixed permutation of it when
    ``shuffle_seed`` is given. Each batch is padded to its own longest row.
    """
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    rows = [_encode_row(s, max_len, truncate) for s in samples]
    order = np.arange(len(rows))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(rows))
    batches = []
    for start in range(0, len(rows), batch_size):
        chunk = [rows[i] for i in order[start : start + batch_size]]
        width = max(len(r[0]) for r in chunk)
        tokens = np.full((len(chunk), width), VOCAB.pad, dtype=np.int64)
        targets = np.full((len(chunk), width), VOCAB.pad, dtype=np.int64)
        mask = np.zeros((len(chunk), width), dtype=np.int8)
        for b, (inp, lab, m) in enumerate(chunk):
            tokens[b, : len(inp)] = inp
            targets[b, : len(lab)] = lab
            mask[b, : len(m)] = m
        batches.append(PackedBatch(tokens, targets, mask))
    return batches


def generate_greedy(w: Weights, s: ScaleSet, prompt, max_new: int) -> list[int]:
    """Greedy continuation of BOS + prompt + SEP; stops at EOS or max_new.

    Argmax ties break toward the lowest token id. The returned list excludes
    the terminating EOS.
    """
    prompt = list(prompt)
    if not prompt:
        raise DataError("generate_greedy requires a nonempty prompt")
    seq = [VOCAB.bos, *prompt, VOCAB.sep]
    out: list[int] = []
    with no_grad():
        for _ in range(max_new):
            if len(seq) >= w.config.max_seq_len:
                break
            logits = model_forward(np.asarray(seq), w, s)
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == VOCAB.eos:
                break
            seq.append(nxt)
            out.append(nxt)
    return out


def build_teacher_set(w: Weights, prompts, max_new: int | None = None) -> list[Sample]:
    """Teacher targets: greedy generations of the unmodified model.

    The loss mask covers the generation only (the prompt is conditioned on,
    never scored). Empty generations still score their EOS position once
    packed.
    """
    base = ScaleSet.ones(w.config.n_layers)
    samples = []
    for prompt in prompts:
        prompt = tuple(int(t) for t in prompt)
        budget = max_new
        if budget is None:
            budget = w.config.max_seq_len - len(prompt) - 3
        gen = tuple(generate_greedy(w, base, prompt, budget))
        samples.append(Sample(prompt, gen, (1,) * len(gen)))
    return samples


def last_integer(text: str) -> int | None:
    """The final run of digits in ``text`` as an int, or None."""
    runs = re.findall(r"\d+", text)
    return int(runs[-1]) if runs else None


def save_samples(path, samples: list[Sample]) -> None:
    """Write samples as line-delimited {"prompt", "response"} records."""
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(json.dumps({"prompt": s.prompt_text, "response": s.target_text}) + "\n")


def load_samples(path) -> list[Sample]:
    samples = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            samples.append(Sample.from_text(rec["prompt"], rec["response"]))
    return samples
