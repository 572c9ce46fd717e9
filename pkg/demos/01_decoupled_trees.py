"""Decoupled parse trees: parsing, validation, and round-trip serialization.

The target representation is a bracket-serialized intent/slot tree whose
leaves are words copied verbatim from the utterance.  Because every leaf
must appear in the source, a parser can produce leaves by pointing at
source positions instead of generating from an open vocabulary.
"""

from narparse import (
    exact_match,
    parse_serialized,
    serialize,
    tree_stats,
    validate_against_source,
)

SOURCE = "Please remind me to call John"
TARGET = (
    "[IN:CREATE_REMINDER [SL:PERSON_REMINDED me ] "
    "[SL:TODO [IN:CREATE_CALL [SL:METHOD call ] [SL:CONTACT John ] ] ] ]"
)


def show(node, depth=0):
    pad = "  " * depth
    print(f"{pad}{node.label}")
    for child in node.children:
        if isinstance(child, str):
            print(f"{pad}  '{child}'")
        else:
            show(child, depth + 1)


def main():
    print("utterance:", SOURCE)
    print("serialized parse:", TARGET)
    print()

    tree = parse_serialized(TARGET)
    print("parsed structure:")
    show(tree.root)
    print()

    stats = tree_stats(tree)
    print(f"stats: {stats}")
    print()

    round_trip = serialize(tree)
    print("re-serialized:", round_trip)
    print("round-trip identical:", round_trip == TARGET)
    print("exact match against itself:", exact_match(round_trip, TARGET))
    print()

    report = validate_against_source(tree, tuple(SOURCE.split()))
    print("decoupled validation (all leaves appear in the source):", report)
    print()

    # the property that makes copying possible: a leaf not present in the
    # utterance is a representation error, caught before training ever runs
    bad = parse_serialized("[IN:CREATE_CALL [SL:CONTACT Maria ] ]")
    bad_report = validate_against_source(bad, tuple(SOURCE.split()))
    print(f"a leaf outside the utterance is flagged: ok={bad_report.ok}, "
          f"missing={bad_report.missing}")


if __name__ == "__main__":
    main()
