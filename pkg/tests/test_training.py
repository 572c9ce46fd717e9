"""Tests for batch assembly, the joint loss, the plateau schedule, the
training loop, and evaluation metrics."""

import math

import numpy as np
import pytest

from narparse.data import (
    BOS_ID,
    EOS_ID,
    MASK_ID,
    PAD_ID,
    Example,
    TargetTooLong,
    build_vocab,
    default_toy_grammar,
    encode_example,
    gen_toy,
)
from narparse.model import AR, NAR, Model, ModelConfig
from narparse.tensor import Tensor
from narparse.training import (
    MASK_ALL,
    RANDOM_SUBSET,
    Batch,
    PlateauState,
    Snapshot,
    TrainConfig,
    bucket_label,
    build_ar_batch,
    build_masked_batch,
    evaluate,
    fit,
    joint_loss,
    lr_plateau_step,
    read_history,
    write_history,
)

EXAMPLES = [
    Example.from_strings("please remind me", "[IN:REMIND [SL:P me ] ]"),
    Example.from_strings("call john now", "[IN:CALL [SL:C john ] [SL:T now ] ]"),
    Example.from_strings("play it", "[IN:PLAY [SL:M it ] ]"),
]
VOCAB = build_vocab(EXAMPLES)


def tiny_model(variant=NAR, seed=0, t_max=40) -> Model:
    cfg = ModelConfig(
        variant=variant,
        word_dim=12,
        pos_dim=4,
        encoder_kernels=(3,),
        decoder_kernels=(3,),
        self_attn_heads=1,
        cross_attn_heads=2,
        pointer_heads=4,
        conv_heads=2,
        ffn_dim=24,
        length_dim=16,
        length_kernels=(3, 9),
        length_hidden=8,
        t_max=t_max,
    )
    return Model.init(cfg, VOCAB, seed=seed)


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.batch_size == 8
        assert cfg.label_beta == 0.1
        assert cfg.length_beta == 0.5
        assert cfg.length_loss_weight == 0.25
        assert (cfg.plateau_patience, cfg.early_stop_patience) == (10, 20)

    def test_lr_bounds(self):
        TrainConfig(lr=7e-5)
        TrainConfig(lr=4e-4)
        with pytest.raises(ValueError):
            TrainConfig(lr=5e-4)
        with pytest.raises(ValueError):
            TrainConfig(lr=1e-5)

    def test_other_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(length_loss_weight=-0.1)
        with pytest.raises(ValueError):
            TrainConfig(plateau_patience=0)
        with pytest.raises(ValueError):
            TrainConfig(lr_decay_factor=1.0)
        with pytest.raises(ValueError):
            TrainConfig(mask_strategy="alternate")
        with pytest.raises(ValueError):
            TrainConfig(max_epochs=0)


class TestBucketLabel:
    def test_edges_are_left_closed(self):
        assert bucket_label(9) == "<10"
        assert bucket_label(10) == "10-20"
        assert bucket_label(19) == "10-20"
        assert bucket_label(20) == "20-30"
        assert bucket_label(39) == "30-40"
        assert bucket_label(40) == ">=40"
        assert bucket_label(87) == ">=40"


class _AllPositionsRng:
    """Stub generator that always masks every position."""

    def integers(self, low, high):
        return high - 1

    def choice(self, n, size, replace):
        return np.arange(size)


class TestBuildMaskedBatch:
    def test_mask_all_feeds_mask_everywhere(self):
        batch = build_masked_batch(EXAMPLES, VOCAB, MASK_ALL)
        lengths = [e.target_length for e in EXAMPLES]
        assert batch.lengths.tolist() == lengths
        for i, t in enumerate(lengths):
            assert (batch.dec_input_ids[i, :t] == MASK_ID).all()
            assert (batch.dec_input_ids[i, t:] == PAD_ID).all()
            assert batch.loss_mask[i, :t].all()
            assert not batch.loss_mask[i, t:].any()
            assert batch.dec_pad_mask[i, t:].all()

    def test_targets_are_pointer_space(self):
        batch = build_masked_batch(EXAMPLES, VOCAB, MASK_ALL)
        for i, ex in enumerate(EXAMPLES):
            enc = encode_example(ex, VOCAB)
            t = ex.target_length
            assert batch.target_ids[i, :t].tolist() == list(enc.target_ids)

    def test_copy_target_points_at_source_position(self):
        ex = Example.from_strings("a b c d e f john", "[IN:X john ]")
        vocab = build_vocab([ex])
        batch = build_masked_batch([ex], vocab, MASK_ALL)
        assert batch.target_ids[0, 1] == vocab.n_ontology + 6

    def test_random_subset_forcing_all_equals_mask_all(self):
        all_rng = _AllPositionsRng()
        a = build_masked_batch(EXAMPLES, VOCAB, RANDOM_SUBSET, all_rng)
        b = build_masked_batch(EXAMPLES, VOCAB, MASK_ALL)
        assert np.array_equal(a.dec_input_ids, b.dec_input_ids)
        assert np.array_equal(a.loss_mask, b.loss_mask)
        assert np.array_equal(a.target_ids, b.target_ids)

    def test_random_subset_masks_at_least_one_and_counts_only_masked(self):
        rng = np.random.default_rng(3)
        batch = build_masked_batch(EXAMPLES, VOCAB, RANDOM_SUBSET, rng)
        for i, ex in enumerate(EXAMPLES):
            t = ex.target_length
            row_in = batch.dec_input_ids[i, :t]
            masked = row_in == MASK_ID
            assert masked.sum() >= 1
            gold = np.asarray(encode_example(ex, VOCAB).target_ids)
            assert (row_in[~masked] == gold[~masked]).all()
            assert np.array_equal(batch.loss_mask[i, :t], masked)

    def test_random_subset_requires_rng(self):
        with pytest.raises(ValueError):
            build_masked_batch(EXAMPLES, VOCAB, RANDOM_SUBSET)

    def test_unknown_strategy_and_empty_batch(self):
        with pytest.raises(ValueError):
            build_masked_batch(EXAMPLES, VOCAB, "everything")
        with pytest.raises(ValueError):
            build_masked_batch([], VOCAB, MASK_ALL)

    def test_target_too_long(self):
        with pytest.raises(TargetTooLong):
            build_masked_batch(EXAMPLES, VOCAB, MASK_ALL, t_max=5)

    def test_source_padding(self):
        batch = build_masked_batch(EXAMPLES, VOCAB, MASK_ALL)
        widths = [len(e.source) for e in EXAMPLES]
        assert batch.src_ids.shape[1] == max(widths)
        for i, w in enumerate(widths):
            assert not batch.src_pad_mask[i, :w].any()
            assert batch.src_pad_mask[i, w:].all()


class TestBuildArBatch:
    def test_bos_shift_and_eos(self):
        batch = build_ar_batch(EXAMPLES, VOCAB)
        for i, ex in enumerate(EXAMPLES):
            gold = list(encode_example(ex, VOCAB).target_ids)
            t = len(gold)
            assert batch.lengths[i] == t + 1
            assert batch.dec_input_ids[i, 0] == BOS_ID
            assert batch.dec_input_ids[i, 1 : t + 1].tolist() == gold
            assert batch.target_ids[i, :t].tolist() == gold
            assert batch.target_ids[i, t] == EOS_ID
            assert batch.loss_mask[i, : t + 1].all()
            assert not batch.loss_mask[i, t + 1 :].any()

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            build_ar_batch([], VOCAB)


def _hand_label_loss() -> float:
    # position 0: logits [ln2, 0, 0] -> probs [1/2, 1/4, 1/4], target 1
    logp0 = np.log(np.array([0.5, 0.25, 0.25]))
    loss0 = 0.9 * -logp0[1] - (0.1 / 3) * logp0.sum()
    # position 1: uniform logits -> smoothed loss is exactly log 3
    return (loss0 + math.log(3)) / 2


class TestJointLoss:
    def _batch(self):
        return Batch(
            src_ids=np.array([[5, 6]]),
            src_pad_mask=np.zeros((1, 2), dtype=bool),
            dec_input_ids=np.array([[MASK_ID, MASK_ID]]),
            dec_pad_mask=np.zeros((1, 2), dtype=bool),
            target_ids=np.array([[1, 2]]),
            loss_mask=np.ones((1, 2), dtype=bool),
            lengths=np.array([2]),
        )

    def _logits(self):
        return Tensor(np.array([[[math.log(2), 0.0, 0.0], [0.0, 0.0, 0.0]]]))

    def test_hand_case_with_length_term(self):
        support = np.ones((1, 3), dtype=bool)
        length_logits = Tensor(np.zeros((1, 4)))  # uniform -> log 4 at any beta
        total, parts = joint_loss(
            self._logits(), support, self._batch(), TrainConfig(), length_logits
        )
        assert parts["label_loss"] == pytest.approx(_hand_label_loss(), abs=1e-9)
        assert parts["length_loss"] == pytest.approx(math.log(4), abs=1e-9)
        want = _hand_label_loss() + 0.25 * math.log(4)
        assert parts["loss"] == pytest.approx(want, abs=1e-9)
        assert float(total.data) == pytest.approx(want, abs=1e-9)

    def test_zero_weight_drops_length_term(self):
        support = np.ones((1, 3), dtype=bool)
        cfg = TrainConfig(length_loss_weight=0.0)
        total, parts = joint_loss(
            self._logits(), support, self._batch(), cfg, Tensor(np.zeros((1, 4)))
        )
        assert parts["length_loss"] == 0.0
        assert float(total.data) == pytest.approx(parts["label_loss"], abs=1e-12)

    def test_missing_length_logits_means_label_only(self):
        support = np.ones((1, 3), dtype=bool)
        total, parts = joint_loss(self._logits(), support, self._batch(), TrainConfig())
        assert parts["loss"] == parts["label_loss"]
        assert parts["length_loss"] == 0.0


class TestPlateauSchedule:
    CFG = TrainConfig()

    def run_trace(self, ems, lr=4e-4):
        state = PlateauState(lr=lr)
        seen = []
        for em in ems:
            state, stop = lr_plateau_step(state, em, self.CFG)
            seen.append((state.lr, stop))
            if stop:
                break
        return seen

    def test_improving_trace_never_decays_or_stops(self):
        seen = self.run_trace([i / 100 for i in range(30)])
        assert all(lr == 4e-4 for lr, _ in seen)
        assert not any(stop for _, stop in seen)

    def test_flat_trace_decays_at_10_and_stops_at_20(self):
        seen = self.run_trace([0.5] + [0.5] * 25)
        # first call improves over -inf; stagnation starts at the second
        lrs = [lr for lr, _ in seen]
        assert lrs[:10] == [4e-4] * 10  # epochs 1..10: decay fires AT stagnant #10
        assert lrs[10] == pytest.approx(4e-5)
        assert lrs[19] == pytest.approx(4e-5)
        assert len(seen) == 21  # stopped at the 20th stagnant epoch
        assert seen[-1][1] is True

    def test_equal_em_is_not_improvement(self):
        state = PlateauState(lr=4e-4)
        state, _ = lr_plateau_step(state, 0.7, self.CFG)
        state, _ = lr_plateau_step(state, 0.7, self.CFG)
        assert state.stale == 1

    def test_improvement_resets_counter(self):
        trace = [0.5] + [0.5] * 8 + [0.6] + [0.6] * 12
        seen = self.run_trace(trace)
        # reset at the 0.6 jump: only 12 stagnant epochs afterwards, no stop
        assert not any(stop for _, stop in seen)
        assert seen[-1][0] == pytest.approx(4e-5)  # one decay after the reset

    def test_stop_step_does_not_decay_again(self):
        seen = self.run_trace([0.5] + [0.5] * 30)
        assert seen[-1][0] == pytest.approx(4e-5)  # not 4e-6


def toy_split(n_train=60, n_val=12):
    examples = gen_toy(default_toy_grammar(), seed=21, n=n_train + n_val)
    return examples[:n_train], examples[n_train:]


class TestFit:
    def test_empty_splits_rejected(self):
        train, val = toy_split()
        model = tiny_model()
        with pytest.raises(ValueError):
            fit(model, [], val, TrainConfig(max_epochs=1))
        with pytest.raises(ValueError):
            fit(model, train, [], TrainConfig(max_epochs=1))

    def test_history_and_snapshot_shape(self):
        train, val = toy_split()
        vocab = build_vocab(train)
        model = Model.init(tiny_model().config, vocab, seed=1)
        snap, hist = fit(model, train, val, TrainConfig(max_epochs=3, seed=5))
        assert len(hist) == 3
        assert [h["epoch"] for h in hist] == [1, 2, 3]
        for h in hist:
            assert h["lr"] == 4e-4
            assert 0.0 <= h["val_em"] <= 1.0
            assert h["train_loss"] > 0
        assert snap.val_em == max(h["val_em"] for h in hist)
        assert isinstance(snap.load(), Model)

    def test_same_seed_runs_identical(self):
        train, val = toy_split(40, 8)
        vocab = build_vocab(train)
        cfg = TrainConfig(max_epochs=2, seed=9)
        snap_a, hist_a = fit(Model.init(tiny_model().config, vocab, seed=3), train, val, cfg)
        snap_b, hist_b = fit(Model.init(tiny_model().config, vocab, seed=3), train, val, cfg)
        assert hist_a == hist_b
        assert snap_a.model_bytes == snap_b.model_bytes

    def test_loss_decreases_by_epoch_five(self):
        train, val = toy_split()
        vocab = build_vocab(train)
        model = Model.init(tiny_model().config, vocab, seed=1)
        _, hist = fit(model, train, val, TrainConfig(max_epochs=5, seed=0))
        assert hist[4]["train_loss"] < hist[0]["train_loss"]

    def test_ar_variant_trains_without_length_loss(self):
        train, val = toy_split(40, 8)
        vocab = build_vocab(train)
        model = Model.init(tiny_model(AR).config, vocab, seed=1)
        _, hist = fit(model, train, val, TrainConfig(max_epochs=2, seed=0))
        assert all(h["train_length_loss"] == 0.0 for h in hist)
        assert hist[1]["train_label_loss"] < hist[0]["train_label_loss"]

    def test_memorizes_single_example(self):
        # replicated so each epoch provides several optimizer steps
        ex = EXAMPLES[1]
        model = tiny_model(seed=2)
        snap, hist = fit(model, [ex] * 128, [ex], TrainConfig(max_epochs=60, seed=0))
        assert snap.val_em == 1.0
        # plateau stop: 20 stagnant epochs after EM first hits 1.0
        assert len(hist) < 60

    def test_history_file_round_trip(self, tmp_path):
        train, val = toy_split(40, 8)
        vocab = build_vocab(train)
        model = Model.init(tiny_model().config, vocab, seed=1)
        path = tmp_path / "history.jsonl"
        _, hist = fit(model, train, val, TrainConfig(max_epochs=2, seed=0), history_path=path)
        assert read_history(path) == hist
        write_history(hist, path)
        assert read_history(path) == hist


class TestEvaluate:
    def test_metric_inequalities_hold_even_untrained(self):
        train, val = toy_split(30, 10)
        vocab = build_vocab(train)
        model = Model.init(tiny_model().config, vocab, seed=1)
        report = evaluate(model, val, k=5)
        assert 0.0 <= report["em"] <= 1.0
        assert report["em"] <= report["em_at_k"]
        assert report["em_at_k"] <= report["length_top_k_acc"]
        assert report["em"] <= report["em_with_gold_length"]
        assert report["n"] == 10 and report["k"] == 5

    def test_buckets_partition_dataset(self):
        train, val = toy_split(30, 10)
        vocab = build_vocab(train)
        model = Model.init(tiny_model().config, vocab, seed=1)
        report = evaluate(model, val, k=2)
        want = {bucket_label(len(e.target)) for e in val}
        assert set(report["em_by_length_bucket"]) == want

    def test_ar_report_has_no_length_metrics(self):
        train, val = toy_split(20, 6)
        vocab = build_vocab(train)
        model = Model.init(tiny_model(AR).config, vocab, seed=1)
        report = evaluate(model, val, k=1)
        assert "length_top_k_acc" not in report
        assert "em_with_gold_length" not in report
        assert report["em"] == report["em_at_k"]

    def test_validation(self):
        model = tiny_model()
        with pytest.raises(ValueError):
            evaluate(model, EXAMPLES, k=0)
        with pytest.raises(ValueError):
            evaluate(model, [], k=1)
