"""Data plumbing: examples, vocabularies, pointer-space encoding, TSV I/O,
and a synthetic compositional grammar for desk-scale experiments.

Target sequences use a pointer space: ids below the ontology size select
ontology symbols ("[IN:*", "[SL:*", "]"), ids at or above it select a
source position to copy. Copying is positional, so out-of-vocabulary
source tokens still come through verbatim.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import RngState
from .trees import ParseNode, ParseTree, TreeError, iter_leaves, parse_serialized, serialize

PAD, MASK, BOS, EOS, UNK = "<PAD>", "<MASK>", "<BOS>", "<EOS>", "<UNK>"
SPECIAL_TOKENS = (PAD, MASK, BOS, EOS, UNK)
PAD_ID, MASK_ID, BOS_ID, EOS_ID, UNK_ID = range(5)
N_SPECIALS = len(SPECIAL_TOKENS)

_GENTOY_STREAM = 101


class BadRow(ValueError):
    """A TSV row that cannot become a valid Example."""

    def __init__(self, line_no: int, cause: str):
        super().__init__(f"line {line_no}: {cause}")
        self.line_no = line_no
        self.cause = cause


class DecoupledViolation(ValueError):
    """A target leaf token that does not occur in the source utterance."""


class UnalignableLeaf(ValueError):
    """A target token that is neither a known ontology symbol nor copyable."""


class TargetTooLong(ValueError):
    pass


@dataclass(frozen=True)
class Example:
    """One utterance paired with its serialized parse.

    Construction validates the pair: the target must parse and every leaf
    token must occur in the source (the decoupled invariant).
    """

    source: tuple[str, ...]
    target: tuple[str, ...]

    def __post_init__(self):
        if not self.source:
            raise ValueError("empty source utterance")
        tree = parse_serialized(" ".join(self.target))
        available = set(self.source)
        for leaf in iter_leaves(tree):
            if leaf not in available:
                raise DecoupledViolation(f"leaf {leaf!r} not present in source")

    @classmethod
    def from_strings(cls, source: str, target: str) -> "Example":
        return cls(tuple(source.split()), tuple(target.split()))

    @property
    def source_text(self) -> str:
        return " ".join(self.source)

    @property
    def target_text(self) -> str:
        return " ".join(self.target)

    @property
    def target_length(self) -> int:
        return len(self.target)

    def tree(self) -> ParseTree:
        return parse_serialized(self.target_text)


def _is_ontology_token(token: str) -> bool:
    return token == "]" or token.startswith("[")


class Vocabulary:
    """Paired source and ontology id spaces sharing the special symbols.

    Both spaces reserve ids 0..4 for PAD, MASK, BOS, EOS, UNK; real tokens
    start at 5, sorted lexicographically so construction is deterministic.
    """

    def __init__(self, source_tokens: tuple[str, ...], ontology_tokens: tuple[str, ...]):
        for space in (source_tokens, ontology_tokens):
            if tuple(space[:N_SPECIALS]) != SPECIAL_TOKENS:
                raise ValueError("vocabulary must start with the special symbols")
            if len(set(space)) != len(space):
                raise ValueError("duplicate token in vocabulary")
        self.source_tokens = tuple(source_tokens)
        self.ontology_tokens = tuple(ontology_tokens)
        self.source_ids = {t: i for i, t in enumerate(self.source_tokens)}
        self.ontology_ids = {t: i for i, t in enumerate(self.ontology_tokens)}

    @property
    def n_source(self) -> int:
        return len(self.source_tokens)

    @property
    def n_ontology(self) -> int:
        return len(self.ontology_tokens)

    def source_id(self, token: str) -> int:
        return self.source_ids.get(token, UNK_ID)

    def generation_support(self, include_eos: bool = False) -> np.ndarray:
        """Boolean mask over ontology ids that are legal output symbols."""
        support = np.ones(self.n_ontology, dtype=bool)
        support[:N_SPECIALS] = False
        if include_eos:
            support[EOS_ID] = True
        return support

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Vocabulary)
            and self.source_tokens == other.source_tokens
            and self.ontology_tokens == other.ontology_tokens
        )

    def to_lines(self) -> list[str]:
        lines = [f"{t}\t{i}\tspecial" for i, t in enumerate(SPECIAL_TOKENS)]
        lines += [
            f"{t}\t{i}\tsource"
            for i, t in enumerate(self.source_tokens)
            if i >= N_SPECIALS
        ]
        lines += [
            f"{t}\t{i}\tontology"
            for i, t in enumerate(self.ontology_tokens)
            if i >= N_SPECIALS
        ]
        return lines

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.to_lines()) + "\n", encoding="utf-8")

    @classmethod
    def from_lines(cls, lines) -> "Vocabulary":
        source = {i: t for i, t in enumerate(SPECIAL_TOKENS)}
        ontology = dict(source)
        for raw in lines:
            raw = raw.rstrip("\n")
            if not raw:
                continue
            parts = raw.split("\t")
            if len(parts) != 3:
                raise ValueError(f"malformed vocabulary line: {raw!r}")
            token, id_str, cls_name = parts
            idx = int(id_str)
            if cls_name == "special":
                if idx >= N_SPECIALS or SPECIAL_TOKENS[idx] != token:
                    raise ValueError(f"special {token!r} at unexpected id {idx}")
            elif cls_name == "source":
                source[idx] = token
            elif cls_name == "ontology":
                ontology[idx] = token
            else:
                raise ValueError(f"unknown vocabulary class {cls_name!r}")

        def as_dense(table: dict[int, str], name: str) -> tuple[str, ...]:
            if sorted(table) != list(range(len(table))):
                raise ValueError(f"{name} ids are not dense")
            return tuple(table[i] for i in range(len(table)))

        return cls(as_dense(source, "source"), as_dense(ontology, "ontology"))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_lines(Path(path).read_text(encoding="utf-8").splitlines())


def build_vocab(train: list[Example], min_count: int = 1) -> Vocabulary:
    """Collect source tokens (those below min_count fall back to UNK) and
    ontology symbols from the targets; specials occupy ids 0..4."""
    if not train:
        raise ValueError("cannot build a vocabulary from no examples")
    counts = Counter(tok for ex in train for tok in ex.source)
    source = sorted(
        t for t, c in counts.items() if c >= min_count and t not in SPECIAL_TOKENS
    )
    ontology = sorted(
        {
            tok
            for ex in train
            for tok in ex.target
            if _is_ontology_token(tok) and tok not in SPECIAL_TOKENS
        }
    )
    return Vocabulary(SPECIAL_TOKENS + tuple(source), SPECIAL_TOKENS + tuple(ontology))


@dataclass(frozen=True)
class EncodedExample:
    """An Example rendered as id arrays: source ids plus pointer-space targets."""

    example: Example
    source_ids: np.ndarray
    target_ids: np.ndarray

    @property
    def source_length(self) -> int:
        return len(self.source_ids)

    @property
    def target_length(self) -> int:
        return len(self.target_ids)


def encode_example(ex: Example, vocab: Vocabulary, t_max: int | None = None) -> EncodedExample:
    """Map an Example into id space.

    Ontology target tokens take their ontology id; any other target token
    is a copy and takes n_ontology + its first source position (zero
    based). Raises UnalignableLeaf when a token is neither, TargetTooLong
    when the target exceeds t_max.
    """
    if t_max is not None and len(ex.target) > t_max:
        raise TargetTooLong(f"target has {len(ex.target)} tokens, limit {t_max}")
    source_ids = np.array([vocab.source_id(t) for t in ex.source], dtype=np.int64)
    target_ids = np.empty(len(ex.target), dtype=np.int64)
    for i, tok in enumerate(ex.target):
        oid = vocab.ontology_ids.get(tok)
        if oid is not None and oid >= N_SPECIALS:
            target_ids[i] = oid
        else:
            try:
                pos = ex.source.index(tok)
            except ValueError:
                raise UnalignableLeaf(
                    f"target token {tok!r} is not an ontology symbol and does not occur in the source"
                ) from None
            target_ids[i] = vocab.n_ontology + pos
    return EncodedExample(ex, source_ids, target_ids)


def resolve_pointer_ids(ids, source_tokens: tuple[str, ...], vocab: Vocabulary) -> tuple[str, ...]:
    """Inverse of encode_example's target mapping: ids back to token strings."""
    out = []
    for i in np.asarray(ids).tolist():
        if i < 0:
            raise IndexError(f"negative pointer id {i}")
        if i < vocab.n_ontology:
            out.append(vocab.ontology_tokens[i])
        else:
            pos = i - vocab.n_ontology
            if pos >= len(source_tokens):
                raise IndexError(f"copy position {pos} beyond source of {len(source_tokens)}")
            out.append(source_tokens[pos])
    return tuple(out)


# ---------------------------------------------------------------------------
# TSV I/O: two tab-separated columns, no escaping


def _iter_rows(path):
    text = Path(path).read_text(encoding="utf-8")
    for line_no, raw in enumerate(text.splitlines(), start=1):
        yield line_no, raw


def _row_to_example(raw: str) -> Example:
    parts = raw.split("\t")
    if len(parts) != 2:
        raise ValueError(f"expected 2 tab-separated columns, found {len(parts)}")
    source, target = parts
    if not source.split():
        raise ValueError("empty source column")
    if not target.split():
        raise ValueError("empty target column")
    return Example.from_strings(source, target)


def read_tsv(path) -> list[Example]:
    """Read and validate a dataset; raises BadRow at the first invalid row."""
    examples = []
    for line_no, raw in _iter_rows(path):
        try:
            examples.append(_row_to_example(raw))
        except (ValueError, TreeError) as e:
            raise BadRow(line_no, str(e)) from None
    return examples


@dataclass(frozen=True)
class TsvReport:
    """Row-level validation outcome for a whole file."""

    n_rows: int
    issues: tuple[tuple[int, str], ...]

    @property
    def ok(self) -> bool:
        return not self.issues


def validate_tsv(path) -> TsvReport:
    """Like read_tsv but collects every bad row instead of raising."""
    n_rows = 0
    issues = []
    for line_no, raw in _iter_rows(path):
        n_rows += 1
        try:
            _row_to_example(raw)
        except (ValueError, TreeError) as e:
            issues.append((line_no, str(e)))
    return TsvReport(n_rows, tuple(issues))


def write_tsv(path, examples: list[Example]) -> None:
    lines = [f"{ex.source_text}\t{ex.target_text}" for ex in examples]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# synthetic compositional grammar


@dataclass(frozen=True)
class SlotSpec:
    """A slot label with its flat fillers and the intents it may nest."""

    label: str
    fillers: tuple[tuple[str, ...], ...]
    nested: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.fillers:
            raise ValueError(f"slot {self.label} needs at least one filler")
        for filler in self.fillers:
            if not filler:
                raise ValueError(f"slot {self.label} has an empty filler")


@dataclass(frozen=True)
class IntentSpec:
    """An intent label with carrier templates; "{X}" marks slot X."""

    label: str
    templates: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        if not self.templates:
            raise ValueError(f"intent {self.label} needs at least one template")


def _slot_ref(token: str) -> str | None:
    if token.startswith("{") and token.endswith("}"):
        return token[1:-1]
    return None


@dataclass(frozen=True)
class ToyGrammarSpec:
    """Nested template grammar: intents own templates, templates reference
    slots, slots either emit flat fillers or recurse into nested intents."""

    intents: tuple[IntentSpec, ...]
    slots: tuple[SlotSpec, ...]
    max_depth: int = 4
    nest_prob: float = 0.5
    median_length_target: int = 12

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not 0.0 <= self.nest_prob <= 1.0:
            raise ValueError("nest_prob must be in [0, 1]")
        intent_labels = {i.label for i in self.intents}
        slot_labels = {s.label for s in self.slots}
        for intent in self.intents:
            for template in intent.templates:
                for tok in template:
                    ref = _slot_ref(tok)
                    if ref is not None and ref not in slot_labels:
                        raise ValueError(f"template of {intent.label} references unknown slot {ref}")
        for slot in self.slots:
            for label in slot.nested:
                if label not in intent_labels:
                    raise ValueError(f"slot {slot.label} nests unknown intent {label}")

    def intent(self, label: str) -> IntentSpec:
        for i in self.intents:
            if i.label == label:
                return i
        raise KeyError(label)

    def slot(self, label: str) -> SlotSpec:
        for s in self.slots:
            if s.label == label:
                return s
        raise KeyError(label)


def default_toy_grammar() -> ToyGrammarSpec:
    """8 intents, 12 slots, depth up to 4, median target length near 12."""
    intents = (
        IntentSpec("CREATE_ALARM", (
            ("set", "an", "alarm", "for", "{DATETIME}"),
            ("wake", "me", "up", "{DATETIME}"),
        )),
        IntentSpec("CREATE_CALL", (
            ("call", "{CONTACT}"),
            ("call", "{CONTACT}", "on", "{METHOD}"),
            ("make", "a", "call", "to", "{CONTACT}"),
        )),
        IntentSpec("CREATE_REMINDER", (
            ("remind", "{PERSON}", "to", "{TODO}"),
            ("remind", "{PERSON}", "to", "{TODO}", "{DATETIME}"),
            ("remind", "{PERSON}", "{DATETIME}", "to", "{TODO}"),
            ("set", "a", "reminder", "for", "{PERSON}", "to", "{TODO}", "{DATETIME}"),
            ("dont", "forget", "to", "{TODO}", "{DATETIME}"),
        )),
        IntentSpec("GET_DIRECTIONS", (
            ("directions", "to", "{DESTINATION}"),
            ("how", "do", "i", "get", "to", "{DESTINATION}", "from", "{LOCATION}"),
        )),
        IntentSpec("GET_EVENT", (
            ("find", "{EVENT}", "events", "near", "{LOCATION}"),
            ("any", "{EVENT}", "events", "near", "{LOCATION}", "{DATETIME}"),
            ("find", "{EVENT}", "events", "near", "{LOCATION}", "{DATETIME}"),
        )),
        IntentSpec("GET_WEATHER", (
            ("whats", "the", "weather", "in", "{LOCATION}"),
            ("whats", "the", "weather", "in", "{LOCATION}", "{DATETIME}"),
            ("how", "cold", "is", "it", "in", "{LOCATION}"),
        )),
        IntentSpec("PLAY_MUSIC", (
            ("play", "something",),
            ("play", "{TRACK}", "by", "{ARTIST}"),
            ("play", "some", "{GENRE}"),
        )),
        IntentSpec("SEND_MESSAGE", (
            ("text", "{CONTACT}", "saying", "{MESSAGE}"),
            ("text", "{CONTACT}", "{DATETIME}", "saying", "{MESSAGE}"),
            ("send", "a", "message", "to", "{CONTACT}", "saying", "{MESSAGE}"),
        )),
    )
    slots = (
        SlotSpec("ARTIST", (("queen",), ("the", "beatles"), ("the", "rolling", "stones"))),
        SlotSpec("CONTACT", (
            ("john",), ("sarah",), ("my", "dentist"), ("uncle", "joe"),
            ("aunt", "maria"), ("the", "plumber"),
        )),
        SlotSpec("DATETIME", (
            ("tomorrow",), ("tonight",), ("next", "friday"), ("at", "noon"),
            ("in", "an", "hour"), ("on", "monday", "morning"), ("this", "weekend"),
            ("a", "week", "from", "now"),
        )),
        SlotSpec("DESTINATION", (
            ("the", "airport"), ("grand", "central"), ("the", "nearest", "pharmacy"),
        ), nested=("GET_EVENT",)),
        SlotSpec("EVENT", (("jazz",), ("food", "truck"), ("comedy",), ("live", "music"))),
        SlotSpec("GENRE", (("blues",), ("classic", "rock"), ("lo", "fi", "beats"))),
        SlotSpec("LOCATION", (
            ("boston",), ("new", "york"), ("the", "office"),
            ("downtown", "seattle"), ("san", "francisco"),
        )),
        SlotSpec("MESSAGE", (
            ("i", "will", "be", "late"), ("happy", "birthday"),
            ("call", "me", "back"), ("dinner", "is", "ready"),
            ("the", "meeting", "moved", "to", "friday"),
        )),
        SlotSpec("METHOD", (("skype",), ("whatsapp",), ("my", "work", "phone"))),
        SlotSpec("PERSON", (
            ("me",), ("my", "mom"), ("my", "boss"), ("grandma",),
            ("the", "kids"), ("my", "little", "sister"),
        )),
        SlotSpec("TODO", (
            ("buy", "groceries"), ("water", "the", "plants"),
            ("do", "laundry"), ("pay", "the", "bills"), ("clean", "the", "garage"),
            ("schedule", "the", "team", "meeting"),
        ), nested=("CREATE_CALL", "PLAY_MUSIC", "SEND_MESSAGE")),
        SlotSpec("TRACK", (
            ("bohemian", "rhapsody"), ("hey", "jude"), ("stairway", "to", "heaven"),
        )),
    )
    return ToyGrammarSpec(intents=intents, slots=slots, nest_prob=0.8)


def _sample_intent(
    spec: ToyGrammarSpec,
    rng: np.random.Generator,
    intent_labels: tuple[str, ...],
    node_depth: int,
) -> tuple[list[str], ParseNode]:
    # uniform over (intent, template) pairs, so richer intents appear more
    pairs = [
        (spec.intent(label), t)
        for label in intent_labels
        for t in spec.intent(label).templates
    ]
    intent, template = pairs[rng.integers(len(pairs))]
    source: list[str] = []
    children: list[ParseNode] = []
    for tok in template:
        ref = _slot_ref(tok)
        if ref is None:
            source.append(tok)
            continue
        slot = spec.slot(ref)
        # a nested intent adds two levels of labeled nodes below the slot's
        # parent intent, so it fits only when node_depth + 3 <= max_depth
        can_nest = bool(slot.nested) and node_depth + 3 <= spec.max_depth
        if can_nest and rng.random() < spec.nest_prob:
            sub_source, sub_node = _sample_intent(spec, rng, slot.nested, node_depth + 2)
            source.extend(sub_source)
            children.append(ParseNode(f"SL:{slot.label}", (sub_node,)))
        else:
            filler = slot.fillers[rng.integers(len(slot.fillers))]
            source.extend(filler)
            children.append(ParseNode(f"SL:{slot.label}", tuple(filler)))
    return source, ParseNode(f"IN:{intent.label}", tuple(children))


def gen_toy(spec: ToyGrammarSpec, seed: int, n: int) -> list[Example]:
    """Sample n examples; identical (spec, seed, n) yields identical lists."""
    if n < 1:
        raise ValueError("n must be >= 1")
    labels = tuple(i.label for i in spec.intents)
    rng = RngState(seed).generator(_GENTOY_STREAM)
    examples = []
    for _ in range(n):
        source, root = _sample_intent(spec, rng, labels, node_depth=1)
        target = serialize(ParseTree(root))
        examples.append(Example(tuple(source), tuple(target.split())))
    return examples
