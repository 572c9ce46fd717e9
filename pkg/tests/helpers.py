"""Shared test utilities: random tree generation for round-trip checks."""

from __future__ import annotations

import numpy as np

from narparse.trees import ParseNode, ParseTree

INTENTS = [f"IN:INTENT_{i}" for i in range(12)]
SLOTS = [f"SL:SLOT_{i}" for i in range(16)]
WORDS = [
    "please", "remind", "me", "to", "call", "john", "mary", "weather",
    "boston", "play", "jazz", "tomorrow", "alarm", "set", "the", "a",
    "message", "directions", "airport", "tonight",
]


def random_tree(rng: np.random.Generator, max_depth: int = 4) -> ParseTree:
    """A random structurally-valid tree: intents and slots alternate."""

    def gen_node(label: str, depth: int) -> ParseNode:
        is_intent = label.startswith("IN:")
        n_children = int(rng.integers(0, 4)) if is_intent else int(rng.integers(1, 4))
        children = []
        for _ in range(n_children):
            # leaves always possible; nested nodes only within the depth budget
            if depth < max_depth and rng.random() < 0.4:
                sub_label = rng.choice(SLOTS) if is_intent else rng.choice(INTENTS)
                children.append(gen_node(str(sub_label), depth + 1))
            else:
                children.append(str(rng.choice(WORDS)))
        return ParseNode(label, tuple(children))

    return ParseTree(gen_node(str(rng.choice(INTENTS)), 1))
