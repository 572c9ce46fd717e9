"""Training loop: mask-everything batches, the joint label/length loss,
plateau-driven learning-rate decay, and EM-based snapshot selection.

Every target position is replaced by MASK during training (the default), so
one decoder pass supervises the whole sequence.  The loss is a weighted sum
of two label-smoothed cross entropies: the pointer labels (beta = 0.1) and
the length classifier (beta = 0.5, weight 0.25).  Validation runs a greedy
k=1 decode each epoch; the best snapshot by exact-match accuracy is kept.
Learning rate drops by a factor of 10 after 10 epochs without a strictly
better EM, and training stops after 20.
"""

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import (
    BOS_ID,
    EOS_ID,
    MASK_ID,
    PAD_ID,
    EncodedExample,
    Example,
    TargetTooLong,
    Vocabulary,
    encode_example,
)
from .decoding import DecodeConfig, decode_ar, decode_nar, decode_with_gold_length
from .model import AR, NAR, Model
from .tensor import RngState, Tensor, adam_step

MASK_ALL = "mask_all"
RANDOM_SUBSET = "random_subset"
_MASK_STRATEGIES = (MASK_ALL, RANDOM_SUBSET)

LR_MIN, LR_MAX = 7e-5, 4e-4
_EPOCH_STREAM = 211

LENGTH_BUCKETS = ((0, 10), (10, 20), (20, 30), (30, 40), (40, None))


def bucket_label(length: int) -> str:
    for lo, hi in LENGTH_BUCKETS:
        if hi is None:
            if length >= lo:
                return f">={lo}"
        elif lo <= length < hi:
            return f"<{hi}" if lo == 0 else f"{lo}-{hi}"
    raise ValueError(f"negative length {length}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 4e-4
    batch_size: int = 8
    label_beta: float = 0.1
    length_beta: float = 0.5
    length_loss_weight: float = 0.25
    plateau_patience: int = 10
    early_stop_patience: int = 20
    lr_decay_factor: float = 10.0
    mask_strategy: str = MASK_ALL
    max_epochs: int = 150
    seed: int = 0

    def __post_init__(self):
        if not LR_MIN <= self.lr <= LR_MAX:
            raise ValueError(f"lr {self.lr} outside [{LR_MIN}, {LR_MAX}]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.length_loss_weight < 0:
            raise ValueError("length loss weight must be non-negative")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be positive")
        if self.lr_decay_factor <= 1.0:
            raise ValueError("lr_decay_factor must exceed 1")
        if self.mask_strategy not in _MASK_STRATEGIES:
            raise ValueError(f"mask_strategy must be one of {_MASK_STRATEGIES}")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be positive")


@dataclass(frozen=True)
class Batch:
    """Padded arrays for one optimizer step.

    `target_ids` live in pointer space (ontology id, or n_ontology + source
    position).  `loss_mask` marks the positions the label loss counts: all
    real positions under mask_all, only the masked ones under random_subset.
    """

    src_ids: np.ndarray
    src_pad_mask: np.ndarray
    dec_input_ids: np.ndarray
    dec_pad_mask: np.ndarray
    target_ids: np.ndarray
    loss_mask: np.ndarray
    lengths: np.ndarray

    @property
    def size(self) -> int:
        return self.src_ids.shape[0]


def _ensure_encoded(examples, vocab: Vocabulary, t_max) -> list[EncodedExample]:
    out = []
    for ex in examples:
        if isinstance(ex, EncodedExample):
            if t_max is not None and ex.target_length > t_max:
                raise TargetTooLong(f"target length {ex.target_length} exceeds {t_max}")
            out.append(ex)
        else:
            out.append(encode_example(ex, vocab, t_max=t_max))
    return out


def _pad_rows(rows: list[np.ndarray], fill: int) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), fill, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def build_masked_batch(
    examples: Sequence,
    vocab: Vocabulary,
    strategy: str = MASK_ALL,
    rng: np.random.Generator | None = None,
    t_max: int | None = None,
) -> Batch:
    """Assemble a non-autoregressive training batch.

    mask_all feeds MASK at every decoder position.  random_subset masks a
    uniform-random count >= 1 of positions per example (gold pointer ids
    elsewhere) and counts the loss only on the masked ones; drawing all
    positions reproduces mask_all exactly.
    """
    if strategy not in _MASK_STRATEGIES:
        raise ValueError(f"unknown mask strategy {strategy!r}")
    if strategy == RANDOM_SUBSET and rng is None:
        raise ValueError("random_subset masking needs an rng")
    if len(examples) == 0:
        raise ValueError("empty batch")
    encoded = _ensure_encoded(examples, vocab, t_max)
    src = _pad_rows([np.asarray(e.source_ids) for e in encoded], PAD_ID)
    lengths = np.array([e.target_length for e in encoded], dtype=np.int64)
    t_width = int(lengths.max())
    n = len(encoded)
    dec_input = np.full((n, t_width), PAD_ID, dtype=np.int64)
    targets = np.full((n, t_width), PAD_ID, dtype=np.int64)
    loss_mask = np.zeros((n, t_width), dtype=bool)
    for i, e in enumerate(encoded):
        t = e.target_length
        gold = np.asarray(e.target_ids, dtype=np.int64)
        targets[i, :t] = gold
        if strategy == MASK_ALL:
            dec_input[i, :t] = MASK_ID
            loss_mask[i, :t] = True
        else:
            n_masked = int(rng.integers(1, t + 1))
            picks = rng.choice(t, size=n_masked, replace=False)
            dec_input[i, :t] = gold
            dec_input[i, picks] = MASK_ID
            loss_mask[i, picks] = True
    return Batch(
        src_ids=src,
        src_pad_mask=src == PAD_ID,
        dec_input_ids=dec_input,
        dec_pad_mask=~loss_mask if strategy == MASK_ALL else _pad_region(lengths, t_width),
        target_ids=targets,
        loss_mask=loss_mask,
        lengths=lengths,
    )


def _pad_region(lengths: np.ndarray, width: int) -> np.ndarray:
    return np.arange(width)[None, :] >= lengths[:, None]


def build_ar_batch(
    examples: Sequence,
    vocab: Vocabulary,
    t_max: int | None = None,
) -> Batch:
    """Teacher-forced batch: BOS-shifted inputs, EOS-terminated targets."""
    if len(examples) == 0:
        raise ValueError("empty batch")
    encoded = _ensure_encoded(examples, vocab, t_max)
    lengths = np.array([e.target_length + 1 for e in encoded], dtype=np.int64)
    t_width = int(lengths.max())
    n = len(encoded)
    dec_input = np.full((n, t_width), PAD_ID, dtype=np.int64)
    targets = np.full((n, t_width), PAD_ID, dtype=np.int64)
    for i, e in enumerate(encoded):
        gold = np.asarray(e.target_ids, dtype=np.int64)
        t = len(gold)
        dec_input[i, 0] = BOS_ID
        dec_input[i, 1 : t + 1] = gold
        targets[i, :t] = gold
        targets[i, t] = EOS_ID
    pad = _pad_region(lengths, t_width)
    src = _pad_rows([np.asarray(e.source_ids) for e in encoded], PAD_ID)
    return Batch(
        src_ids=src,
        src_pad_mask=src == PAD_ID,
        dec_input_ids=dec_input,
        dec_pad_mask=pad,
        target_ids=targets,
        loss_mask=~pad,
        lengths=lengths,
    )


def joint_loss(
    pointer_logits: Tensor,
    pointer_support: np.ndarray,
    batch: Batch,
    cfg: TrainConfig,
    length_logits: Tensor | None = None,
) -> tuple[Tensor, dict]:
    """Label CE plus weighted length CE; returns the tape scalar and floats.

    `pointer_logits` is [B, T, V+L] and `pointer_support` [B, V+L]; both are
    flattened so each target position is one cross-entropy row.  The length
    term smooths over all T_max classes and is skipped when `length_logits`
    is None (the autoregressive variant) or the weight is zero.
    """
    b, t, v = pointer_logits.shape
    flat_logits = T.reshape(pointer_logits, (b * t, v))
    flat_support = np.repeat(pointer_support, t, axis=0)
    label = T.label_smoothed_ce(
        flat_logits,
        batch.target_ids.reshape(-1),
        cfg.label_beta,
        support_mask=flat_support,
        row_mask=batch.loss_mask.reshape(-1),
    )
    parts = {"label_loss": float(label.data)}
    if length_logits is None or cfg.length_loss_weight == 0.0:
        parts["length_loss"] = 0.0
        parts["loss"] = parts["label_loss"]
        return label, parts
    length = T.label_smoothed_ce(
        length_logits,
        batch.lengths - 1,
        cfg.length_beta,
    )
    total = T.add(label, T.scale(length, cfg.length_loss_weight))
    parts["length_loss"] = float(length.data)
    parts["loss"] = float(total.data)
    return total, parts


@dataclass(frozen=True)
class PlateauState:
    best_em: float = -math.inf
    stale: int = 0
    lr: float = 0.0


def lr_plateau_step(
    state: PlateauState, val_em: float, cfg: TrainConfig
) -> tuple[PlateauState, bool]:
    """Advance the schedule by one epoch of validation EM.

    Improvement means strictly greater EM than the best seen.  After
    plateau_patience stagnant epochs the lr divides by the decay factor
    (again at each further multiple); at early_stop_patience the run stops
    without another decay.
    """
    if val_em > state.best_em:
        return PlateauState(val_em, 0, state.lr), False
    stale = state.stale + 1
    if stale >= cfg.early_stop_patience:
        return replace(state, stale=stale), True
    lr = state.lr
    if stale % cfg.plateau_patience == 0:
        lr = lr / cfg.lr_decay_factor
    return PlateauState(state.best_em, stale, lr), False


@dataclass(frozen=True)
class Snapshot:
    model_bytes: bytes
    epoch: int
    val_em: float

    def load(self) -> Model:
        return Model.load_bytes(self.model_bytes)


def _greedy_em(model: Model, examples: Sequence[Example]) -> float:
    cfg = DecodeConfig(k=1)
    hits = 0
    for ex in examples:
        if model.config.variant == NAR:
            result = decode_nar(model, ex.source, cfg)
        else:
            result = decode_ar(model, ex.source, cfg)
        hits += result.best.tokens == ex.target
    return hits / len(examples)


def _train_step(model: Model, batch: Batch, cfg: TrainConfig, lr: float) -> dict:
    with T.Tape() as tape:
        enc = model.encode(batch.src_ids, batch.src_pad_mask)
        dec_out = model.decoder_forward(batch.dec_input_ids, enc, batch.dec_pad_mask)
        logits, support = model.pointer_logits(dec_out, enc)
        length_logits = model.length_logits(enc) if model.config.variant == NAR else None
        loss, parts = joint_loss(logits, support, batch, cfg, length_logits)
        tape.backward(loss)
    for p in model.parameters():
        if p.grad is not None:
            adam_step(p, lr)
        p.zero_grad()
    return parts


def fit(
    model: Model,
    train_set: Sequence[Example],
    val_set: Sequence[Example],
    cfg: TrainConfig,
    history_path=None,
) -> tuple[Snapshot, list[dict]]:
    """Train to convergence; return the best-EM snapshot and epoch history."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation splits must be non-empty")
    t_max = model.config.t_max
    # validation examples are never encoded: decoding compares strings, so
    # out-of-vocabulary or oversize val targets simply score as misses
    train_enc = _ensure_encoded(train_set, model.vocab, t_max)

    sched = PlateauState(lr=cfg.lr)
    best: Snapshot | None = None
    history: list[dict] = []
    build = build_masked_batch if model.config.variant == NAR else None

    for epoch in range(1, cfg.max_epochs + 1):
        rng = RngState(cfg.seed).generator(_EPOCH_STREAM, epoch)
        order = rng.permutation(len(train_enc))
        sums = {"label_loss": 0.0, "length_loss": 0.0, "loss": 0.0}
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            chunk = [train_enc[i] for i in order[start : start + cfg.batch_size]]
            if build is not None:
                batch = build(chunk, model.vocab, cfg.mask_strategy, rng, t_max)
            else:
                batch = build_ar_batch(chunk, model.vocab, t_max)
            parts = _train_step(model, batch, cfg, sched.lr)
            for k in sums:
                sums[k] += parts[k]
            n_batches += 1
        val_em = _greedy_em(model, val_set)
        record = {
            "epoch": epoch,
            "lr": sched.lr,
            "train_label_loss": sums["label_loss"] / n_batches,
            "train_length_loss": sums["length_loss"] / n_batches,
            "train_loss": sums["loss"] / n_batches,
            "val_em": val_em,
        }
        history.append(record)
        if best is None or val_em > best.val_em:
            best = Snapshot(model.save_bytes(), epoch, val_em)
        sched, stop = lr_plateau_step(sched, val_em, cfg)
        if stop:
            break
    if history_path is not None:
        write_history(history, history_path)
    return best, history


def write_history(history: list[dict], path) -> None:
    lines = [json.dumps(rec, sort_keys=True) for rec in history]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_history(path) -> list[dict]:
    text = Path(path).read_text(encoding="utf-8")
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def evaluate(model: Model, dataset: Sequence[Example], k: int = 5) -> dict:
    """Exact-match metrics over a dataset.

    For the non-autoregressive variant: `em` scores the ranked-best
    candidate, `em_at_k` counts gold anywhere in the k-candidate set,
    `length_top_k_acc` counts gold length among the k proposed lengths, and
    `em_with_gold_length` decodes at the true length.  Buckets split by
    target token length.  The autoregressive variant reports em, em_at_k
    (equal: one hypothesis), and the buckets.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    nar = model.config.variant == NAR
    cfg = DecodeConfig(k=k)
    em_n = emk_n = len_n = gold_n = 0
    bucket_hits: dict[str, int] = {}
    bucket_counts: dict[str, int] = {}
    for ex in dataset:
        gold = ex.target
        t_gold = len(gold)
        if nar:
            result = decode_nar(model, ex.source, cfg)
            hit = result.best.tokens == gold
            emk_n += any(c.tokens == gold for c in result.candidates)
            len_n += any(c.length == t_gold for c in result.candidates)
            if t_gold <= model.config.t_max:
                gold_cand = decode_with_gold_length(model, ex.source, t_gold)
                gold_n += gold_cand.tokens == gold
        else:
            result = decode_ar(model, ex.source, cfg)
            hit = result.best.tokens == gold
            emk_n += hit
        em_n += hit
        label = bucket_label(t_gold)
        bucket_counts[label] = bucket_counts.get(label, 0) + 1
        bucket_hits[label] = bucket_hits.get(label, 0) + hit
    n = len(dataset)
    report = {
        "em": em_n / n,
        "em_at_k": emk_n / n,
        "em_by_length_bucket": {
            lbl: bucket_hits[lbl] / cnt for lbl, cnt in sorted(bucket_counts.items())
        },
        "n": n,
        "k": k,
    }
    if nar:
        report["length_top_k_acc"] = len_n / n
        report["em_with_gold_length"] = gold_n / n
    return report
