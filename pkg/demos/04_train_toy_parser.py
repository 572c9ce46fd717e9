"""Train a one-shot parser on the toy grammar, end to end.

Uses a reduced model (48+16 dims) so the run finishes in a few minutes on
a laptop CPU.  The best snapshot and the training history are written to
demos/out/ and reused by the decoding and benchmark demos.

Pass --quick to train a much smaller model for under a minute; accuracy
will be lower but every later demo still works.
"""

import pathlib
import sys

from narparse import (
    Model,
    ModelConfig,
    NAR,
    TrainConfig,
    build_vocab,
    default_toy_grammar,
    evaluate,
    fit,
    gen_toy,
)

OUT = pathlib.Path(__file__).parent / "out"

REDUCED = dict(
    word_dim=48,
    pos_dim=16,
    ffn_dim=128,
    length_dim=128,
    length_hidden=128,
    t_max=60,
)
QUICK = dict(
    word_dim=16,
    pos_dim=8,
    encoder_kernels=(3, 9),
    decoder_kernels=(3, 9),
    ffn_dim=64,
    length_dim=64,
    length_hidden=64,
    t_max=60,
)


def main():
    quick = "--quick" in sys.argv
    examples = gen_toy(default_toy_grammar(), seed=13, n=2400)
    train, dev, test = examples[:2000], examples[2000:2200], examples[2200:]
    vocab = build_vocab(train)

    cfg = ModelConfig(variant=NAR, **(QUICK if quick else REDUCED))
    model = Model.init(cfg, vocab, seed=1)
    print(f"model: {model.count_parameters():,} parameters "
          f"({'quick' if quick else 'reduced'} config)")

    tcfg = TrainConfig(lr=4e-4, max_epochs=8 if quick else 40, seed=0)
    OUT.mkdir(exist_ok=True)
    print(f"training on {len(train)} examples, validating on {len(dev)} "
          f"({'about a minute' if quick else 'a few minutes'})...")
    best, history = fit(model, train, dev, tcfg,
                        history_path=OUT / "toy.history.jsonl")

    print("last five epochs:")
    for rec in history[-5:]:
        print(f"  epoch {rec['epoch']:3d}  lr {rec['lr']:.1e}  "
              f"loss {rec['train_loss']:.3f}  dev em {rec['val_em']:.3f}")
    print(f"best dev em {best.val_em:.3f} at epoch {best.epoch}")
    print()

    model = best.load()
    metrics = evaluate(model, test, k=5)
    print("held-out test metrics (best snapshot):")
    for key in ("em", "em_at_k", "length_top_k_acc", "em_with_gold_length"):
        print(f"  {key:22s} {metrics[key]:.3f}")
    print()

    snap = OUT / "toy.ckpt"
    model.save(snap)
    print(f"snapshot -> {snap}")
    print(f"history  -> {OUT / 'toy.history.jsonl'}")


if __name__ == "__main__":
    main()
