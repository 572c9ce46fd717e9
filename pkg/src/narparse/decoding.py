"""Decoding front ends for trained parsers.

The non-autoregressive path predicts a set of candidate lengths, fills each
with MASK tokens, decodes every position of every candidate in a single
decoder pass per length, and ranks the results.  The ranking score is

    S(X, Y) = (sum_i P(y_i | X, T)) * P(T)

computed exactly as written: the token probabilities are summed, not
multiplied or averaged, so longer candidates receive systematically larger
sums.  A length-normalized mode (mean instead of sum) is available behind
``score_mode`` for comparison, but the default reproduces the formula.

The autoregressive baseline decodes left to right with a small beam and
needs one decoder pass per emitted token, including the terminating EOS.
"""

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import BOS_ID, EOS_ID, resolve_pointer_ids
from .model import AR, NAR, EncoderState, Model
from .tensor import Tensor

EQ_SUM = "eq5_verbatim"
LENGTH_NORMALIZED = "length_normalized"
_SCORE_MODES = (EQ_SUM, LENGTH_NORMALIZED)


class EmptySource(ValueError):
    """Decoding needs at least one source token."""


@dataclass(frozen=True)
class DecodeConfig:
    k: int = 5
    score_mode: str = EQ_SUM
    ar_beam: int = 1

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"length beam size must be >= 1, got {self.k}")
        if self.score_mode not in _SCORE_MODES:
            raise ValueError(f"score_mode must be one of {_SCORE_MODES}")
        if self.ar_beam < 1:
            raise ValueError(f"ar_beam must be >= 1, got {self.ar_beam}")


@dataclass(frozen=True)
class Candidate:
    """One decoded hypothesis: T resolved tokens plus the scoring terms."""

    length: int
    tokens: tuple[str, ...]
    token_probs: tuple[float, ...]
    length_prob: float
    score: float

    def __post_init__(self):
        if len(self.tokens) != self.length:
            raise ValueError(
                f"candidate claims length {self.length} but has {len(self.tokens)} tokens"
            )
        if len(self.token_probs) != self.length:
            raise ValueError("one probability per token required")
        if not 0.0 < self.length_prob <= 1.0:
            raise ValueError(f"length probability {self.length_prob} outside (0, 1]")

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass(frozen=True)
class DecodeResult:
    best: Candidate
    candidates: tuple[Candidate, ...]
    decoder_passes: int


def score_candidate(cand: Candidate, mode: str = EQ_SUM) -> float:
    probs = np.asarray(cand.token_probs, dtype=np.float64)
    if mode == EQ_SUM:
        return float(probs.sum() * cand.length_prob)
    if mode == LENGTH_NORMALIZED:
        return float(probs.mean() * cand.length_prob)
    raise ValueError(f"unknown score mode {mode!r}")


def rank_candidates(cands: Sequence[Candidate], mode: str = EQ_SUM) -> list[Candidate]:
    """Order candidates by score; ties prefer shorter, then lexicographic tokens."""
    if not cands:
        raise ValueError("need at least one candidate to rank")
    scored = [dataclasses.replace(c, score=score_candidate(c, mode)) for c in cands]
    return sorted(scored, key=lambda c: (-c.score, c.length, c.tokens))


def _prob(log_prob: float) -> float:
    """exp() with a floor: a predicted length, however unlikely, never has
    probability exactly zero (Candidate requires P(T) > 0)."""
    return float(max(np.exp(log_prob), 1e-300))


def _encode_source(model: Model, source_tokens: Sequence[str]) -> EncoderState:
    if len(source_tokens) == 0:
        raise EmptySource("source utterance has no tokens")
    ids = np.array([[model.vocab.source_id(t) for t in source_tokens]], dtype=np.int64)
    return model.encode(ids, np.zeros_like(ids, dtype=bool))


def _read_positions(model: Model, dec_out, enc: EncoderState,
                    source_tokens: Sequence[str]):
    """Argmax each position of a pointer distribution; resolve to strings."""
    probs = model.pointer_project(dec_out, enc).data[0]
    ids = probs.argmax(axis=-1)
    picked = probs[np.arange(len(ids)), ids]
    tokens = resolve_pointer_ids(ids, tuple(source_tokens), model.vocab)
    return tokens, tuple(float(p) for p in picked), ids


def decode_with_gold_length(model: Model, source_tokens: Sequence[str],
                            t_gold: int) -> Candidate:
    """Single masked decode at a known target length."""
    if model.config.variant != NAR:
        raise ValueError("masked decoding requires the non-autoregressive variant")
    enc = _encode_source(model, source_tokens)
    logp = model.length_log_probs(enc)[0]
    dec_out = model.decode_masked(t_gold, enc)
    tokens, probs, _ = _read_positions(model, dec_out, enc, source_tokens)
    cand = Candidate(t_gold, tokens, probs, _prob(logp[t_gold - 1]), 0.0)
    return dataclasses.replace(cand, score=score_candidate(cand))


def decode_nar(model: Model, source_tokens: Sequence[str],
               cfg: DecodeConfig = DecodeConfig()) -> DecodeResult:
    """Length-beam decode: one decoder pass per candidate length."""
    if model.config.variant != NAR:
        raise ValueError("decode_nar requires the non-autoregressive variant")
    enc = _encode_source(model, source_tokens)
    lengths = model.predict_length_topk(enc, cfg.k)[0]
    cands = []
    passes = 0
    for t, log_prob in lengths:
        dec_out = model.decode_masked(t, enc)
        passes += 1
        tokens, probs, _ = _read_positions(model, dec_out, enc, source_tokens)
        cands.append(Candidate(t, tokens, probs, _prob(log_prob), 0.0))
    ranked = rank_candidates(cands, cfg.score_mode)
    return DecodeResult(ranked[0], tuple(ranked), passes)


def decode_ar(model: Model, source_tokens: Sequence[str],
              cfg: DecodeConfig = DecodeConfig()) -> DecodeResult:
    """Left-to-right beam decode until every beam emits EOS or hits T_max.

    One decoder pass per step; the pass that produces EOS is counted, so a
    greedy decode of a T-token tree uses T + 1 passes.  The candidate score
    is the sequence probability (product of step probabilities, EOS
    included) rather than the length-beam ranking score.
    """
    if model.config.variant != AR:
        raise ValueError("decode_ar requires the autoregressive variant")
    enc = _encode_source(model, source_tokens)
    t_max = model.config.t_max
    # beams hold (emitted ids, cumulative log prob, per-step probs, finished)
    beams: list[tuple[list[int], float, list[float], bool]] = [([], 0.0, [], False)]
    passes = 0
    for _ in range(t_max):
        live = [b for b in beams if not b[3]]
        if not live:
            break
        prefix = np.array(
            [[BOS_ID] + b[0] for b in live], dtype=np.int64
        )
        src = np.repeat(enc.src_ids, len(live), axis=0)
        batch_enc = EncoderState(
            states=_tile_states(enc, len(live)),
            src_ids=src,
            pad_mask=np.repeat(enc.pad_mask, len(live), axis=0),
        )
        dec_out = model.decoder_forward(prefix, batch_enc)
        last = Tensor(dec_out.data[:, -1:, :])
        probs = model.pointer_project(last, batch_enc).data[:, 0, :]
        passes += 1
        grown = [b for b in beams if b[3]]
        for row, (ids, logp, steps, _) in zip(probs, live):
            top = np.argsort(-row)[: cfg.ar_beam]
            for tok in top:
                p = float(row[tok])
                if p <= 0.0:
                    continue
                grown.append(
                    (ids + [int(tok)], logp + float(np.log(p)), steps + [p],
                     int(tok) == EOS_ID)
                )
        grown.sort(key=lambda b: -b[1])
        beams = grown[: cfg.ar_beam]
    best_ids, best_logp, best_steps, finished = beams[0]
    if finished:  # drop the terminating EOS; its probability stays in the score
        best_ids, best_steps = best_ids[:-1], best_steps[:-1]
    tokens = resolve_pointer_ids(best_ids, tuple(source_tokens), model.vocab)
    cand = Candidate(
        length=len(tokens),
        tokens=tokens,
        token_probs=tuple(best_steps),
        length_prob=1.0,
        score=float(np.exp(best_logp)),
    )
    return DecodeResult(cand, (cand,), passes)


def _tile_states(enc: EncoderState, n: int) -> Tensor:
    return Tensor(np.repeat(enc.states.data, n, axis=0))
