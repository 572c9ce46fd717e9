"""Decoupled semantic parse trees.

A parse is a nested structure of intent nodes ("IN:*") and slot nodes
("SL:*") whose leaves are raw tokens copied from the source utterance.
The serialized form is whitespace-tokenized bracket notation::

    [IN:CREATE_REMINDER [SL:PERSON_REMINDED me ] [SL:TODO ... ] ]

Open tokens are "[" + label, every subtree is closed by a bare "]".
All functions here are pure and operate on immutable values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence, Union

INTENT_PREFIX = "IN:"
SLOT_PREFIX = "SL:"
CLOSE_TOKEN = "]"


class TreeError(ValueError):
    """Malformed serialized tree. `token_index` locates the offending token."""

    def __init__(self, message: str, token_index: int):
        super().__init__(f"{message} (token index {token_index})")
        self.token_index = token_index


class UnbalancedBrackets(TreeError):
    pass


class EmptyTree(TreeError):
    pass


class NonIntentRoot(TreeError):
    pass


class MalformedLabel(TreeError):
    pass


class InvalidNesting(TreeError):
    """Intent directly under intent, or slot directly under slot."""


class SpanError(ValueError):
    pass


class OverlappingSlots(SpanError):
    pass


class SpanOutOfBounds(SpanError):
    pass


Child = Union["ParseNode", str]


@dataclass(frozen=True)
class ParseNode:
    """One labeled tree node; children mix nodes and leaf token strings."""

    label: str
    children: tuple[Child, ...] = ()

    @property
    def is_intent(self) -> bool:
        return self.label.startswith(INTENT_PREFIX)

    @property
    def is_slot(self) -> bool:
        return self.label.startswith(SLOT_PREFIX)


@dataclass(frozen=True)
class ParseTree:
    """A decoupled parse. `source_ref` is metadata and excluded from equality."""

    root: ParseNode
    source_ref: tuple[str, ...] | None = field(default=None, compare=False)


@dataclass(frozen=True)
class ValidationReport:
    """Leaf tokens that do not occur in the source utterance."""

    missing: tuple[str, ...]

    @property
    def ok(self) -> bool:
        return not self.missing


@dataclass(frozen=True)
class TreeStats:
    depth: int
    node_count: int
    token_length: int


def tokenize(text: str) -> list[str]:
    """Split on ASCII whitespace; case preserved, no sub-word units."""
    return text.split()


def _is_open(token: str) -> bool:
    return token.startswith("[")


def _open_label(token: str, index: int) -> str:
    label = token[1:]
    for prefix in (INTENT_PREFIX, SLOT_PREFIX):
        if label.startswith(prefix):
            if len(label) == len(prefix):
                raise MalformedLabel(f"empty label in open token {token!r}", index)
            return label
    raise MalformedLabel(f"open token {token!r} is neither intent nor slot", index)


def parse_serialized(text: str) -> ParseTree:
    """Parse bracket notation into a ParseTree.

    Raises a positioned TreeError subclass on malformed input; never
    returns a partial tree.
    """
    tokens = tokenize(text)
    if not tokens:
        raise EmptyTree("no tokens", 0)

    # stack of (label, children-so-far); root is set once the stack empties
    stack: list[tuple[str, list[Child]]] = []
    root: ParseNode | None = None

    for i, tok in enumerate(tokens):
        if root is not None:
            raise UnbalancedBrackets("content after the root closed", i)
        if tok == CLOSE_TOKEN:
            if not stack:
                raise UnbalancedBrackets("close token with no open node", i)
            label, children = stack.pop()
            node = ParseNode(label, tuple(children))
            if stack:
                stack[-1][1].append(node)
            else:
                root = node
        elif _is_open(tok):
            label = _open_label(tok, i)
            if not stack:
                if not label.startswith(INTENT_PREFIX):
                    raise NonIntentRoot("root must be an intent node", i)
            else:
                parent_is_intent = stack[-1][0].startswith(INTENT_PREFIX)
                child_is_intent = label.startswith(INTENT_PREFIX)
                if parent_is_intent == child_is_intent:
                    kind = "intent" if child_is_intent else "slot"
                    raise InvalidNesting(f"{kind} nested directly under {kind}", i)
            stack.append((label, []))
        else:
            if not stack:
                raise NonIntentRoot("leaf token outside any node", i)
            stack[-1][1].append(tok)

    if stack:
        raise UnbalancedBrackets(
            f"{len(stack)} unclosed node(s) at end of input", len(tokens)
        )
    assert root is not None
    return ParseTree(root)


def _serialize_node(node: ParseNode, out: list[str]) -> None:
    out.append("[" + node.label)
    for child in node.children:
        if isinstance(child, ParseNode):
            _serialize_node(child, out)
        else:
            out.append(child)
    out.append(CLOSE_TOKEN)


def serialize(tree: ParseTree) -> str:
    """Render the tree back to its space-joined token sequence."""
    out: list[str] = []
    _serialize_node(tree.root, out)
    return " ".join(out)


def iter_leaves(tree: ParseTree) -> Iterator[str]:
    """Yield leaf tokens in left-to-right order."""

    def walk(node: ParseNode) -> Iterator[str]:
        for child in node.children:
            if isinstance(child, ParseNode):
                yield from walk(child)
            else:
                yield child

    yield from walk(tree.root)


def validate_against_source(tree: ParseTree, source: Sequence[str]) -> ValidationReport:
    """Check the decoupled invariant: every leaf token occurs in the source."""
    have = set(source)
    missing = tuple(leaf for leaf in iter_leaves(tree) if leaf not in have)
    return ValidationReport(missing)


def exact_match(pred: str, gold: str) -> bool:
    """Token-sequence equality; insensitive to whitespace runs, case-sensitive."""
    return tokenize(pred) == tokenize(gold)


def from_flat(
    intent: str,
    slots: Sequence[tuple[str, int, int]],
    tokens: Sequence[str],
) -> ParseTree:
    """Build the depth-2 decoupled tree for a flat intent/slot annotation.

    Slot spans are (label, start, end) with end exclusive, in token
    coordinates. Spans may be given in any order and are sorted by start.
    """
    if not intent.startswith(INTENT_PREFIX):
        raise ValueError(f"intent label must start with {INTENT_PREFIX!r}: {intent!r}")
    ordered = sorted(slots, key=lambda s: (s[1], s[2]))
    children: list[Child] = []
    prev_end = 0
    for label, start, end in ordered:
        if not label.startswith(SLOT_PREFIX):
            raise ValueError(f"slot label must start with {SLOT_PREFIX!r}: {label!r}")
        if start < 0 or end > len(tokens) or start >= end:
            raise SpanOutOfBounds(f"span ({start}, {end}) outside 0..{len(tokens)}")
        if start < prev_end:
            raise OverlappingSlots(f"span ({start}, {end}) overlaps a previous span")
        prev_end = end
        children.append(ParseNode(label, tuple(tokens[start:end])))
    root = ParseNode(intent, tuple(children))
    return ParseTree(root, source_ref=tuple(tokens))


def tree_stats(tree: ParseTree) -> TreeStats:
    """Depth and node count over labeled nodes, plus serialized token length."""

    def walk(node: ParseNode) -> tuple[int, int]:
        depth = 1
        count = 1
        for child in node.children:
            if isinstance(child, ParseNode):
                d, c = walk(child)
                depth = max(depth, 1 + d)
                count += c
        return depth, count

    depth, count = walk(tree.root)
    return TreeStats(depth, count, len(tokenize(serialize(tree))))
