"""Convolutional encoder-decoder with a length head and pointer projection.

Two variants share the code path. The one-step variant decodes every
target position from MASK inputs in a single pass, so its decoder uses
non-causal convolutions and self-attention over all positions, plus a
length-prediction head. The autoregressive variant drops self-attention
and the length head entirely and makes the decoder convolutions causal.

All forward methods take batch-first arrays ([B, L] ids with a True=pad
mask) and work with or without an active gradient tape.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import MASK_ID, Vocabulary
from .tensor import Parameter, RngState, Tensor

MAGIC = b"NARPARSE"
FORMAT_VERSION = 1

NAR, AR = "nar", "ar"


class EmptyInput(ValueError):
    pass


class LengthOutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. model_dim is word_dim + pos_dim."""

    variant: str = NAR
    word_dim: int = 128
    pos_dim: int = 32
    encoder_kernels: tuple[int, ...] = (3, 7, 15, 21, 27)
    decoder_kernels: tuple[int, ...] = (7, 27)
    self_attn_heads: int = 1
    cross_attn_heads: int = 2
    pointer_heads: int = 8
    conv_heads: int = 2
    ffn_dim: int = 320
    length_dim: int = 512
    length_kernels: tuple[int, ...] = (3, 9)
    length_hidden: int = 256
    t_max: int = 100

    @property
    def model_dim(self) -> int:
        return self.word_dim + self.pos_dim

    def __post_init__(self):
        if self.variant not in (NAR, AR):
            raise ValueError(f"variant must be {NAR!r} or {AR!r}, got {self.variant!r}")
        if self.word_dim < 1 or self.pos_dim < 1:
            raise ValueError("embedding dims must be positive")
        if self.pos_dim % 2 != 0:
            raise ValueError("pos_dim must be even (sin/cos pairs)")
        if not self.encoder_kernels or not self.decoder_kernels:
            raise ValueError("kernel lists must be non-empty")
        if any(k < 1 for k in self.encoder_kernels + self.decoder_kernels + self.length_kernels):
            raise ValueError("kernel sizes must be positive")
        d = self.model_dim
        for name in ("self_attn_heads", "cross_attn_heads", "pointer_heads", "conv_heads"):
            h = getattr(self, name)
            if h < 1 or d % h != 0:
                raise ValueError(f"{name}={h} must divide model_dim={d}")
        if self.length_dim % self.conv_heads != 0:
            raise ValueError("length_dim must be divisible by conv_heads")
        if self.ffn_dim < 1 or self.length_dim < 1 or self.length_hidden < 1:
            raise ValueError("hidden dims must be positive")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")


def config_to_dict(config: ModelConfig) -> dict:
    return asdict(config)


def config_from_dict(d: dict) -> ModelConfig:
    kw = dict(d)
    for key in ("encoder_kernels", "decoder_kernels", "length_kernels"):
        kw[key] = tuple(kw[key])
    return ModelConfig(**kw)


@dataclass
class EncoderState:
    """Encoder output plus what the decoder needs to attend and copy."""

    states: Tensor  # [B, L, model_dim], pad positions zeroed
    src_ids: np.ndarray  # [B, L] int
    pad_mask: np.ndarray  # [B, L] bool, True = pad

    @property
    def batch(self) -> int:
        return self.states.shape[0]

    @property
    def length(self) -> int:
        return self.states.shape[1]


def sinusoidal_positions(n: int, dim: int) -> np.ndarray:
    """Interleaved sin/cos encodings; position 0 is [0, 1, 0, 1, ...]."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / dim)
    pe = np.empty((n, dim), dtype=np.float32)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


class Model:
    """Parameter container plus the forward passes.

    Parameters live in an insertion-ordered name -> Parameter dict; the
    order is fixed by construction and shared by init, checkpoint save,
    and checkpoint load, which keeps serialization byte-stable.
    """

    def __init__(self, config: ModelConfig, vocab: Vocabulary):
        self.config = config
        self.vocab = vocab
        self._params: dict[str, Parameter] = {}
        self._build()

    # ------------------------------------------------------------------
    # construction

    def _add(self, name: str, shape: tuple[int, ...]) -> None:
        self._params[name] = Parameter(name, np.zeros(shape, dtype=np.float32))

    def _build(self) -> None:
        cfg = self.config
        d, f = cfg.model_dim, cfg.ffn_dim
        self._add("embed.word_src", (self.vocab.n_source, cfg.word_dim))
        self._add("embed.word_onto", (self.vocab.n_ontology, cfg.word_dim))

        def add_norm(prefix):
            self._add(f"{prefix}.norm_g", (d,))
            self._add(f"{prefix}.norm_b", (d,))

        def add_attn(prefix):
            add_norm(prefix)
            for n in ("wq", "wk", "wv", "wo"):
                self._add(f"{prefix}.{n}", (d, d))
                self._add(f"{prefix}.{n}_b", (d,))

        def add_conv(prefix, kernel):
            add_norm(prefix)
            self._add(f"{prefix}.w_in", (d, 2 * d))
            self._add(f"{prefix}.b_in", (2 * d,))
            self._add(f"{prefix}.kernel", (cfg.conv_heads, kernel))
            self._add(f"{prefix}.w_out", (d, d))
            self._add(f"{prefix}.b_out", (d,))

        def add_ffn(prefix):
            add_norm(prefix)
            self._add(f"{prefix}.w1", (d, f))
            self._add(f"{prefix}.b1", (f,))
            self._add(f"{prefix}.w2", (f, d))
            self._add(f"{prefix}.b2", (d,))

        with_self_attn = cfg.variant == NAR
        for i, kernel in enumerate(cfg.encoder_kernels):
            if with_self_attn:
                add_attn(f"enc.{i}.attn")
            add_conv(f"enc.{i}.conv", kernel)
            add_ffn(f"enc.{i}.ffn")
        add_norm("enc.final")

        for i, kernel in enumerate(cfg.decoder_kernels):
            if with_self_attn:
                add_attn(f"dec.{i}.attn")
            add_conv(f"dec.{i}.conv", kernel)
            add_attn(f"dec.{i}.cross")
            add_ffn(f"dec.{i}.ffn")
        add_norm("dec.final")

        if cfg.variant == NAR:
            ld = cfg.length_dim
            self._add("length.w_in", (d, ld))
            self._add("length.b_in", (ld,))
            for i, kernel in enumerate(cfg.length_kernels):
                self._add(f"length.conv{i}.w_in", (ld, 2 * ld))
                self._add(f"length.conv{i}.b_in", (2 * ld,))
                self._add(f"length.conv{i}.kernel", (cfg.conv_heads, kernel))
                self._add(f"length.conv{i}.w_out", (ld, ld))
                self._add(f"length.conv{i}.b_out", (ld,))
            self._add("length.w_hidden", (ld, cfg.length_hidden))
            self._add("length.b_hidden", (cfg.length_hidden,))
            self._add("length.w_cls", (cfg.length_hidden, cfg.t_max))
            self._add("length.b_cls", (cfg.t_max,))

        self._add("pointer.w_gen", (d, self.vocab.n_ontology))
        self._add("pointer.b_gen", (self.vocab.n_ontology,))
        for n in ("wq", "wk"):
            self._add(f"pointer.{n}", (d, d))
            self._add(f"pointer.{n}_b", (d,))

    @classmethod
    def init(cls, config: ModelConfig, vocab: Vocabulary, seed: int) -> "Model":
        """Random initialization: normal embeddings, Xavier-uniform linears,
        uniform (zero-logit) conv kernels, identity layer norms."""
        model = cls(config, vocab)
        rng = RngState(seed).generator(11)
        for name, p in model._params.items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf.startswith("word"):
                p.data = (rng.standard_normal(p.data.shape) * 0.1).astype(np.float32)
            elif leaf == "norm_g":
                p.data = np.ones(p.data.shape, dtype=np.float32)
            elif leaf == "kernel" or leaf.endswith("_b") or leaf.startswith("b"):
                pass  # stay zero
            else:
                fan_in, fan_out = p.data.shape
                bound = np.sqrt(6.0 / (fan_in + fan_out))
                p.data = rng.uniform(-bound, bound, p.data.shape).astype(np.float32)
        return model

    # ------------------------------------------------------------------
    # parameter access

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def param(self, name: str) -> Parameter:
        return self._params[name]

    def count_parameters(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def _t(self, name: str) -> Tensor:
        return self._params[name].tensor

    # ------------------------------------------------------------------
    # shared sub-blocks (pre-norm residual wiring)

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        return T.layer_norm(x, self._t(f"{prefix}.norm_g"), self._t(f"{prefix}.norm_b"))

    def _attention(self, prefix: str, query: Tensor, memory: Tensor,
                   key_pad: np.ndarray, heads: int) -> Tensor:
        b, t, d = query.shape
        s = memory.shape[1]
        dh = d // heads

        def split(x, n):
            return T.transpose(T.reshape(x, (b, n, heads, dh)), (0, 2, 1, 3))

        q = split(T.linear(query, self._t(f"{prefix}.wq"), self._t(f"{prefix}.wq_b")), t)
        k = split(T.linear(memory, self._t(f"{prefix}.wk"), self._t(f"{prefix}.wk_b")), s)
        v = split(T.linear(memory, self._t(f"{prefix}.wv"), self._t(f"{prefix}.wv_b")), s)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        attn = T.masked_softmax(scores, key_pad[:, None, None, :])
        mixed = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
        return T.linear(mixed, self._t(f"{prefix}.wo"), self._t(f"{prefix}.wo_b"))

    def _self_attn_block(self, prefix: str, x: Tensor, pad: np.ndarray) -> Tensor:
        xn = self._norm(x, prefix)
        return T.add(x, self._attention(prefix, xn, xn, pad, self.config.self_attn_heads))

    def _cross_attn_block(self, prefix: str, x: Tensor, enc: EncoderState) -> Tensor:
        xn = self._norm(x, prefix)
        out = self._attention(prefix, xn, enc.states, enc.pad_mask, self.config.cross_attn_heads)
        return T.add(x, out)

    def _conv_block(self, prefix: str, x: Tensor, pad: np.ndarray, causal: bool) -> Tensor:
        xn = self._norm(x, prefix)
        h = T.glu(T.linear(xn, self._t(f"{prefix}.w_in"), self._t(f"{prefix}.b_in")))
        h = T.conv1d_depthwise_shared(
            h, self._t(f"{prefix}.kernel"), self.config.conv_heads, pad_mask=pad, causal=causal
        )
        return T.add(x, T.linear(h, self._t(f"{prefix}.w_out"), self._t(f"{prefix}.b_out")))

    def _ffn_block(self, prefix: str, x: Tensor) -> Tensor:
        xn = self._norm(x, prefix)
        h = T.relu(T.linear(xn, self._t(f"{prefix}.w1"), self._t(f"{prefix}.b1")))
        return T.add(x, T.linear(h, self._t(f"{prefix}.w2"), self._t(f"{prefix}.b2")))

    # ------------------------------------------------------------------
    # embeddings

    def _positional(self, batch: int, length: int) -> Tensor:
        pe = sinusoidal_positions(length, self.config.pos_dim)
        return Tensor(np.broadcast_to(pe[None], (batch, length, self.config.pos_dim)).copy())

    def embed_source(self, src_ids: np.ndarray) -> Tensor:
        b, l = src_ids.shape
        word = T.embedding_lookup(src_ids, self._t("embed.word_src"))
        return T.concat([word, self._positional(b, l)], axis=-1)

    def embed_target_ids(self, ids: np.ndarray, src_ids: np.ndarray) -> Tensor:
        """Embed decoder input ids from the pointer space.

        Ontology ids use the ontology word table; copy ids use the source
        word table row of the token they point at, so a copied token keeps
        the identity it had on the encoder side.
        """
        b, t = ids.shape
        n_onto = self.vocab.n_ontology
        is_copy = ids >= n_onto
        onto_ids = np.where(is_copy, 0, ids)
        pos = np.clip(ids - n_onto, 0, src_ids.shape[1] - 1)
        copy_token_ids = np.take_along_axis(src_ids, pos, axis=1)
        onto_part = T.embedding_lookup(onto_ids, self._t("embed.word_onto"))
        copy_part = T.embedding_lookup(copy_token_ids, self._t("embed.word_src"))
        pick = is_copy[..., None].astype(np.float32)
        word = T.add(T.mul_const(copy_part, pick), T.mul_const(onto_part, 1.0 - pick))
        return T.concat([word, self._positional(b, t)], axis=-1)

    # ------------------------------------------------------------------
    # encoder

    def encode(self, src_ids: np.ndarray, pad_mask: np.ndarray) -> EncoderState:
        src_ids = np.asarray(src_ids)
        pad_mask = np.asarray(pad_mask, dtype=bool)
        if src_ids.ndim != 2 or src_ids.shape[1] < 1:
            raise EmptyInput("encoder needs at least one source token")
        if (~pad_mask).sum(axis=1).min() < 1:
            raise EmptyInput("a batch row is entirely padding")
        with_self_attn = self.config.variant == NAR
        x = self.embed_source(src_ids)
        for i in range(len(self.config.encoder_kernels)):
            if with_self_attn:
                x = self._self_attn_block(f"enc.{i}.attn", x, pad_mask)
            x = self._conv_block(f"enc.{i}.conv", x, pad_mask, causal=False)
            x = self._ffn_block(f"enc.{i}.ffn", x)
        x = self._norm(x, "enc.final")
        keep = (~pad_mask)[..., None].astype(np.float32)
        x = T.mul_const(x, keep)  # pad positions carry zero vectors
        return EncoderState(x, src_ids, pad_mask)

    # ------------------------------------------------------------------
    # decoder

    def decoder_forward(
        self,
        dec_input_ids: np.ndarray,
        enc: EncoderState,
        dec_pad_mask: np.ndarray | None = None,
    ) -> Tensor:
        """Run the decoder stack over given input ids; returns [B, T, d]."""
        b, t = dec_input_ids.shape
        if t < 1:
            raise EmptyInput("decoder needs at least one position")
        if dec_pad_mask is None:
            dec_pad_mask = np.zeros((b, t), dtype=bool)
        causal = self.config.variant == AR
        x = self.embed_target_ids(dec_input_ids, enc.src_ids)
        for i in range(len(self.config.decoder_kernels)):
            if self.config.variant == NAR:
                x = self._self_attn_block(f"dec.{i}.attn", x, dec_pad_mask)
            x = self._conv_block(f"dec.{i}.conv", x, dec_pad_mask, causal=causal)
            x = self._cross_attn_block(f"dec.{i}.cross", x, enc)
            x = self._ffn_block(f"dec.{i}.ffn", x)
        return self._norm(x, "dec.final")

    def decode_masked(self, t: int, enc: EncoderState) -> Tensor:
        """One-step decode: T MASK inputs in, all T positions out."""
        if not 1 <= t <= self.config.t_max:
            raise LengthOutOfRange(f"length {t} outside 1..{self.config.t_max}")
        ids = np.full((enc.batch, t), MASK_ID, dtype=np.int64)
        return self.decoder_forward(ids, enc)

    # ------------------------------------------------------------------
    # length prediction

    def length_logits(self, enc: EncoderState) -> Tensor:
        """Logits over length classes 1..t_max (index i means length i+1)."""
        if self.config.variant != NAR:
            raise ValueError("the autoregressive variant has no length head")
        pad = enc.pad_mask
        h = T.linear(enc.states, self._t("length.w_in"), self._t("length.b_in"))
        for i, _ in enumerate(self.config.length_kernels):
            prefix = f"length.conv{i}"
            g = T.glu(T.linear(h, self._t(f"{prefix}.w_in"), self._t(f"{prefix}.b_in")))
            g = T.conv1d_depthwise_shared(
                g, self._t(f"{prefix}.kernel"), self.config.conv_heads, pad_mask=pad
            )
            g = T.linear(g, self._t(f"{prefix}.w_out"), self._t(f"{prefix}.b_out"))
            h = T.add(h, g)
        keep = (~pad).astype(np.float32)
        pooled = T.sum_axis(T.mul_const(h, keep[..., None]), 1)
        pooled = T.mul_const(pooled, (1.0 / keep.sum(axis=1))[:, None].astype(np.float32))
        hidden = T.relu(T.linear(pooled, self._t("length.w_hidden"), self._t("length.b_hidden")))
        return T.linear(hidden, self._t("length.w_cls"), self._t("length.b_cls"))

    def length_log_probs(self, enc: EncoderState) -> np.ndarray:
        return T.log_softmax_np(self.length_logits(enc).data)

    def predict_length_topk(self, enc: EncoderState, k: int) -> list[list[tuple[int, float]]]:
        """Per batch row: the k most probable lengths as (T, log P(T)),
        sorted by probability descending, ties to the smaller length."""
        if k < 1:
            raise ValueError("k must be >= 1")
        logp = self.length_log_probs(enc)
        k = min(k, self.config.t_max)
        out = []
        for row in logp:
            order = sorted(range(len(row)), key=lambda i: (-row[i], i))[:k]
            out.append([(i + 1, float(row[i])) for i in order])
        return out

    # ------------------------------------------------------------------
    # pointer projection

    def pointer_logits(self, dec_out: Tensor, enc: EncoderState) -> tuple[Tensor, np.ndarray]:
        """Joint output logits [B, T, n_ontology + L] and the boolean
        support mask [B, n_ontology + L] of legal classes."""
        b, t, d = dec_out.shape
        heads = self.config.pointer_heads
        dh = d // heads
        gen = T.linear(dec_out, self._t("pointer.w_gen"), self._t("pointer.b_gen"))
        q = T.linear(dec_out, self._t("pointer.wq"), self._t("pointer.wq_b"))
        k = T.linear(enc.states, self._t("pointer.wk"), self._t("pointer.wk_b"))
        q = T.transpose(T.reshape(q, (b, t, heads, dh)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(k, (b, enc.length, heads, dh)), (0, 2, 1, 3))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        copy = T.scale(T.sum_axis(scores, 1), 1.0 / heads)  # mean over heads
        logits = T.concat([gen, copy], axis=-1)
        gen_support = self.vocab.generation_support(include_eos=self.config.variant == AR)
        support = np.concatenate(
            [np.broadcast_to(gen_support, (b, len(gen_support))), ~enc.pad_mask], axis=1
        )
        return logits, support

    def pointer_project(self, dec_out: Tensor, enc: EncoderState) -> Tensor:
        """Per-position probabilities over [ontology vocab + source positions]."""
        logits, support = self.pointer_logits(dec_out, enc)
        return T.masked_softmax(logits, ~support[:, None, :])

    # ------------------------------------------------------------------
    # checkpointing

    def save_bytes(self) -> bytes:
        header = {
            "format_version": FORMAT_VERSION,
            "config": config_to_dict(self.config),
            "vocab_lines": self.vocab.to_lines(),
            "params": [
                {"name": name, "shape": list(p.data.shape)}
                for name, p in self._params.items()
            ],
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        out = io.BytesIO()
        out.write(MAGIC)
        out.write(struct.pack("<I", FORMAT_VERSION))
        out.write(struct.pack("<Q", len(blob)))
        out.write(blob)
        for p in self._params.values():
            out.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return out.getvalue()

    def save(self, path) -> None:
        Path(path).write_bytes(self.save_bytes())

    @classmethod
    def load_bytes(cls, raw: bytes) -> "Model":
        if raw[: len(MAGIC)] != MAGIC:
            raise ValueError("not a model checkpoint (bad magic)")
        off = len(MAGIC)
        (version,) = struct.unpack_from("<I", raw, off)
        off += 4
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack_from("<Q", raw, off)
        off += 8
        header = json.loads(raw[off : off + hlen].decode("utf-8"))
        off += hlen
        config = config_from_dict(header["config"])
        vocab = Vocabulary.from_lines(header["vocab_lines"])
        model = cls(config, vocab)
        expected = [(name, tuple(p.data.shape)) for name, p in model._params.items()]
        given = [(e["name"], tuple(e["shape"])) for e in header["params"]]
        if expected != given:
            raise ValueError("checkpoint parameter manifest does not match the config")
        for name, shape in expected:
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape)
            off += 4 * n
            model._params[name].data = arr.copy()
        if off != len(raw):
            raise ValueError("trailing bytes after checkpoint payload")
        return model

    @classmethod
    def load(cls, path) -> "Model":
        return cls.load_bytes(Path(path).read_bytes())
