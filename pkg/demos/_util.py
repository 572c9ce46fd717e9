"""Shared helpers for the demo scripts: cached small trained models."""

import dataclasses
import pathlib

from narparse import (
    AR,
    Model,
    ModelConfig,
    NAR,
    TrainConfig,
    build_vocab,
    default_toy_grammar,
    fit,
    gen_toy,
)

OUT = pathlib.Path(__file__).parent / "out"

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


def toy_splits():
    examples = gen_toy(default_toy_grammar(), seed=13, n=2400)
    return examples[:2000], examples[2000:2200], examples[2200:]


def quick_model(variant: str, epochs: int = 10) -> Model:
    """Return a small trained model, training and caching it on first use."""
    path = OUT / f"quick.{variant}.ckpt"
    if path.exists():
        return Model.load(path)
    train, dev, _ = toy_splits()
    model = Model.init(ModelConfig(variant=variant, **QUICK), build_vocab(train), seed=1)
    print(f"no cached {variant} model; training a small one (about a minute)...")
    best, _ = fit(model, train, dev, TrainConfig(lr=4e-4, max_epochs=epochs, seed=0))
    model = best.load()
    OUT.mkdir(exist_ok=True)
    model.save(path)
    print(f"cached -> {path}  (dev em {best.val_em:.3f})")
    return model


def nar_model() -> Model:
    """Prefer the snapshot from demo 04 when it exists; fall back to quick."""
    trained = OUT / "toy.ckpt"
    if trained.exists():
        return Model.load(trained)
    return quick_model(NAR)


def ar_twin(nar: Model, epochs: int = 10) -> Model:
    """An autoregressive model at the same dimensions as `nar`."""
    path = OUT / "quick.ar_twin.ckpt"
    if path.exists():
        twin = Model.load(path)
        if twin.config == dataclasses.replace(nar.config, variant=AR):
            return twin
    train, dev, _ = toy_splits()
    cfg = dataclasses.replace(nar.config, variant=AR)
    model = Model.init(cfg, nar.vocab, seed=1)
    print("training an autoregressive twin at the same size (a few minutes)...")
    best, _ = fit(model, train, dev, TrainConfig(lr=4e-4, max_epochs=epochs, seed=0))
    model = best.load()
    OUT.mkdir(exist_ok=True)
    model.save(path)
    print(f"cached -> {path}  (dev em {best.val_em:.3f})")
    return model
