"""The synthetic compositional grammar used for desk-scale experiments.

Generates reminder/call/weather-style utterances with nested intents,
shows the length distribution that drives the latency story (most parses
are short, a tail is long), and writes a TSV split to demos/out/.
"""

import collections
import pathlib

from narparse import build_vocab, default_toy_grammar, gen_toy, tree_stats, write_tsv

OUT = pathlib.Path(__file__).parent / "out"


def main():
    spec = default_toy_grammar()
    print(f"grammar: {len(spec.intents)} intents, {len(spec.slots)} slot types")
    print()

    examples = gen_toy(spec, seed=13, n=2400)
    print("first five generated examples:")
    for ex in examples[:5]:
        print(f"  {' '.join(ex.source)}")
        print(f"    -> {' '.join(ex.target)}")
    print()

    lengths = [len(ex.target) for ex in examples]
    depths = [tree_stats(ex.tree()).depth for ex in examples]
    hist = collections.Counter((n // 5) * 5 for n in lengths)
    print("target length histogram (bucket width 5):")
    for lo in sorted(hist):
        bar = "#" * (hist[lo] // 12)
        print(f"  {lo:3d}-{lo + 4:<3d} {hist[lo]:5d} {bar}")
    print()
    print(f"length: min {min(lengths)}, median {sorted(lengths)[len(lengths) // 2]}, max {max(lengths)}")
    print(f"share with >= 20 target tokens: {sum(n >= 20 for n in lengths) / len(lengths):.1%}")
    print(f"nesting depth: max {max(depths)}")
    print()

    train, dev, test = examples[:2000], examples[2000:2200], examples[2200:]
    OUT.mkdir(exist_ok=True)
    for name, split in [("train", train), ("dev", dev), ("test", test)]:
        path = OUT / f"toy.{name}.tsv"
        write_tsv(path, split)
        print(f"wrote {len(split):4d} examples to {path}")
    print()

    vocab = build_vocab(train)
    print(f"vocabulary over the train split: {vocab.n_source} source tokens, "
          f"{vocab.n_ontology} ontology symbols (including specials)")
    brackets = [t for t in vocab.ontology_tokens if t.startswith("[")]
    print("ontology symbols include:", ", ".join(sorted(brackets)[:5]), "...")


if __name__ == "__main__":
    main()
