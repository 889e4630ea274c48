"""Hopscotch: learn which attention blocks of a causal transformer to skip
and how to rescale the remaining blocks' outputs.

The package splits into a small reverse-mode tensor engine (`tensor`), the
scaled transformer (`model`), synthetic tasks and teacher data (`data`),
frozen-weight scale training (`train`), the greedy block-selection loop
(`selection`), diagnostics (`analysis`), serialization (`persist`), and a
CLI (`cli`).
"""

from .analysis import (
    EfficiencyInput,
    SingularReport,
    collect_hidden_states,
    dequantize,
    efficiency_report,
    max_singular_values,
    mmd2,
    mmd_report,
    quantize_int8,
    spearman,
)
from .data import (
    VOCAB,
    DataError,
    PackedBatch,
    Sample,
    TaskSpec,
    build_teacher_set,
    gen_task,
    generate_greedy,
    load_samples,
    pack_batches,
    save_samples,
)
from .model import (
    BlockMask,
    ModelConfig,
    ScaleSet,
    Weights,
    init_weights,
    model_forward,
    n_params,
    physically_remove,
    weights_hash,
)
from .persist import (
    Checkpoint,
    RunReport,
    load_checkpoint,
    load_trace,
    save_checkpoint,
    save_trace,
)
from .selection import (
    HopscotchConfig,
    RemovalTrace,
    StepRecord,
    detect_elbow,
    full_greedy,
    run_hopscotch,
    run_random,
    score_block,
    select_block,
)
from .tensor import ShapeError, Tensor, backward, no_grad
from .train import (
    AdamState,
    PretrainResult,
    TrainConfig,
    adam_step,
    dataset_loss,
    derive_seed,
    evaluate,
    evaluate_all,
    hidden_state_loss,
    pretrain,
    scale_loss,
    train_scales,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "BlockMask",
    "Checkpoint",
    "DataError",
    "EfficiencyInput",
    "HopscotchConfig",
    "ModelConfig",
    "PackedBatch",
    "PretrainResult",
    "RemovalTrace",
    "RunReport",
    "Sample",
    "ScaleSet",
    "ShapeError",
    "SingularReport",
    "StepRecord",
    "Tensor",
    "TaskSpec",
    "TrainConfig",
    "VOCAB",
    "Weights",
    "adam_step",
    "backward",
    "build_teacher_set",
    "collect_hidden_states",
    "dataset_loss",
    "dequantize",
    "derive_seed",
    "detect_elbow",
    "efficiency_report",
    "evaluate",
    "evaluate_all",
    "full_greedy",
    "gen_task",
    "generate_greedy",
    "hidden_state_loss",
    "init_weights",
    "load_checkpoint",
    "load_samples",
    "load_trace",
    "max_singular_values",
    "mmd2",
    "mmd_report",
    "model_forward",
    "n_params",
    "no_grad",
    "pack_batches",
    "physically_remove",
    "pretrain",
    "quantize_int8",
    "run_hopscotch",
    "run_random",
    "save_checkpoint",
    "save_samples",
    "save_trace",
    "scale_loss",
    "score_block",
    "select_block",
    "spearman",
    "train_scales",
    "weights_hash",
]
