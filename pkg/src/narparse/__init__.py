"""narparse: one-step non-autoregressive semantic parsing.

A small numpy library implementing decoupled parse trees, a tape-based
autodiff tensor core, a convolutional encoder-decoder with a pointer
generator and length prediction, mask-everything training, length-beam
decoding, and a latency benchmarking harness.
"""

from narparse.bench import BenchReport, LatencyBucket, bench_latency, bucket_by_length
from narparse.data import (
    Example,
    ToyGrammarSpec,
    Vocabulary,
    build_vocab,
    default_toy_grammar,
    encode_example,
    gen_toy,
    read_tsv,
    validate_tsv,
    write_tsv,
)
from narparse.decoding import (
    EQ_SUM,
    LENGTH_NORMALIZED,
    Candidate,
    DecodeConfig,
    DecodeResult,
    decode_ar,
    decode_nar,
    decode_with_gold_length,
    rank_candidates,
)
from narparse.model import AR, NAR, Model, ModelConfig
from narparse.tensor import Parameter, RngState, Tape, Tensor, adam_step, grad_check
from narparse.training import (
    Snapshot,
    TrainConfig,
    build_ar_batch,
    build_masked_batch,
    evaluate,
    fit,
    joint_loss,
    lr_plateau_step,
)
from narparse.trees import (
    ParseNode,
    ParseTree,
    exact_match,
    from_flat,
    parse_serialized,
    serialize,
    tree_stats,
    validate_against_source,
)

__all__ = [
    "AR",
    "BenchReport",
    "Candidate",
    "DecodeConfig",
    "DecodeResult",
    "EQ_SUM",
    "Example",
    "LENGTH_NORMALIZED",
    "LatencyBucket",
    "Model",
    "ModelConfig",
    "NAR",
    "Parameter",
    "ParseNode",
    "ParseTree",
    "RngState",
    "Snapshot",
    "Tape",
    "Tensor",
    "ToyGrammarSpec",
    "TrainConfig",
    "Vocabulary",
    "adam_step",
    "bench_latency",
    "bucket_by_length",
    "build_ar_batch",
    "build_masked_batch",
    "build_vocab",
    "decode_ar",
    "decode_nar",
    "decode_with_gold_length",
    "default_toy_grammar",
    "encode_example",
    "evaluate",
    "exact_match",
    "fit",
    "from_flat",
    "gen_toy",
    "grad_check",
    "joint_loss",
    "lr_plateau_step",
    "parse_serialized",
    "rank_candidates",
    "read_tsv",
    "serialize",
    "tree_stats",
    "validate_against_source",
    "validate_tsv",
    "write_tsv",
]

__version__ = "0.1.0"
