"""Transferable knowledge-prefix training for toy seq2seq code tasks.

Two stages: (1) continual learning over source tasks trains per-layer
key/value prefixes against fresh backbones, with batch budgets allocated by
smoothed log-proportional sampling; (2) the trained prefix is concatenated
to a fresh backbone and tuned on a target task, including low-resource
subsampling and a random-prefix ablation arm.
"""

from .autodiff import (
    AdamState,
    GradientTape,
    Tensor,
    adam_step,
    backward,
    check_mode,
    named_stream,
)
from .data import (
    Corpus,
    Example,
    TaskSpec,
    Vocab,
    build_vocab,
    encode_corpus,
    generate_minilang_corpus,
    load_jsonl,
    subsample,
)
from .metrics import EvalResult, accuracy, bleu4_smoothed, evaluate
from .model import (
    Backbone,
    BackboneSnapshot,
    ModelConfig,
    PrefixBank,
    attention_with_prefix,
    collapse_prefix_encoder,
    forward,
    generate_greedy,
    load_backbone,
    loss_on_batch,
    snapshot,
)
from .sampling import SamplerState, plan_epoch, sampling_distribution
from .training import (
    SourceTrainPlan,
    TrainReport,
    ablate_random_prefix,
    low_resource_run,
    order_experiment,
    pretrain_base,
    specify_target,
    train_source,
)

__version__ = "0.1.0"
