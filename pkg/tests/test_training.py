import numpy as np
import pytest

from attrdialog import evaluation
from attrdialog.corpus import AttributeSchema, Dialog, synthesize_corpus
from attrdialog.model import DialogModel, ModelConfig
from attrdialog.training import (
    CheckpointError,
    TrainHyper,
    TrainingDiverged,
    checkpoint_from_model,
    load_checkpoint,
    make_batches,
    model_from_checkpoint,
    save_checkpoint,
    split_dialogs,
    train_mle,
)

from test_model import small_config, utt


def tiny_corpus():
    return [
        Dialog([utt([4, 5], (0, 1)), utt([6, 7, 8], (1, 0)), utt([9], (2, 1))]),
        Dialog([utt([10, 11], (0, 0)), utt([4, 6], (1, 1))]),
        Dialog([utt([5], (2, 0)), utt([7, 9], (0, 1)), utt([8], (1, 0))]),
    ]


def pattern_config():
    """Deterministic two-template corpus: entropy zero given the context."""
    return {
        "families": [{"name": "act", "labels": ["ping", "pong"]}],
        "transitions": {"act": {
            "unknown|unknown": {"ping": 1.0},
            "ping|unknown": {"pong": 1.0},
            "pong|ping": {"ping": 1.0},
            "ping|pong": {"pong": 1.0},
        }},
        "templates": {"family": "act", "by_label": {
            "ping": [["we sail at dawn", 1.0]],
            "pong": [["the tide turns soon", 1.0]],
        }},
        "num_dialogs": 30,
        "dialog_length": {"3": 1.0},
    }


# ---------------------------------------------------------------------------
# batching


def test_make_batches_counts():
    corpus = tiny_corpus()
    schema = small_config().schema
    rng = np.random.default_rng(0)
    batches = make_batches(corpus, batch_size=2, context_window=2,
                           rng=rng, schema=schema)
    total = sum(b.size for b in batches)
    assert total == sum(len(d) - 1 for d in corpus)
    assert all(b.size <= 2 for b in batches)


def test_make_batches_window_controls_context():
    corpus = [Dialog([utt([4]), utt([5]), utt([6]), utt([7])])]
    schema = small_config().schema
    batches = make_batches(corpus, batch_size=100, context_window=1,
                           rng=np.random.default_rng(0), schema=schema)
    assert batches[0].ctx_tokens.shape[1] == 1


def test_make_batches_pad_masking():
    corpus = tiny_corpus()
    schema = small_config().schema
    batches = make_batches(corpus, batch_size=3, context_window=2,
                           rng=np.random.default_rng(1), schema=schema)
    for b in batches:
        for i in range(b.size):
            n = int(b.tgt_mask[i].sum())
            # The mask is a prefix covering exactly the real target tokens,
            # and everything beyond it is PAD.
            assert b.tgt_mask[i, :n].all() and not b.tgt_mask[i, n:].any()
            assert (b.tgt_out[i, n:] == 0).all()
            assert b.tgt_out[i, n - 1] == 3


def test_make_batches_errors():
    schema = small_config().schema
    with pytest.raises(ValueError):
        make_batches(tiny_corpus(), 0, 2, np.random.default_rng(0), schema)
    with pytest.raises(ValueError):
        make_batches([], 2, 2, np.random.default_rng(0), schema)


def test_split_dialogs_fraction():
    dialogs = tiny_corpus() * 10
    train, valid = split_dialogs(dialogs, 0.1, np.random.default_rng(0))
    assert len(valid) == 3
    assert len(train) + len(valid) == len(dialogs)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_byte_identical(tmp_path):
    model = DialogModel(small_config(), rng=np.random.default_rng(0))
    ckpt = checkpoint_from_model(model, rng_seed=0, step=17)
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    save_checkpoint(ckpt, p1)
    save_checkpoint(load_checkpoint(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_restores_identical_outputs(tmp_path):
    model = DialogModel(small_config(), rng=np.random.default_rng(1))
    path = tmp_path / "m.ckpt"
    save_checkpoint(checkpoint_from_model(model), path)
    clone = model_from_checkpoint(load_checkpoint(path))

    prefix = [utt([4, 5]), utt([6])]
    ctx_a = model.encode_dialog_context(prefix)
    ctx_b = clone.encode_dialog_context(prefix)
    assert np.array_equal(ctx_a.s.data, ctx_b.s.data)
    cond_a = model.build_conditioning_vector(ctx_a, [1, 1])
    cond_b = clone.build_conditioning_vector(ctx_b, [1, 1])
    la, _ = model.decode_utterance_nll(cond_a, utt([7, 8]))
    lb, _ = clone.decode_utterance_nll(cond_b, utt([7, 8]))
    assert la.item() == lb.item()


def test_checkpoint_mismatched_hidden_size_rejected(tmp_path):
    model = DialogModel(small_config(), rng=np.random.default_rng(2))
    ckpt = checkpoint_from_model(model)
    ckpt.config["encoder_hidden"] = 16
    path = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, path)
    with pytest.raises(CheckpointError, match="shape"):
        model_from_checkpoint(load_checkpoint(path))


def test_checkpoint_version_and_truncation(tmp_path):
    model = DialogModel(small_config(), rng=np.random.default_rng(3))
    path = tmp_path / "m.ckpt"
    save_checkpoint(checkpoint_from_model(model), path)

    raw = path.read_bytes()
    truncated = tmp_path / "t.ckpt"
    truncated.write_bytes(raw[:-10])
    with pytest.raises(CheckpointError, match="bytes"):
        load_checkpoint(truncated)

    bad_version = tmp_path / "v.ckpt"
    header, rest = raw.split(b"\n", 1)
    bad_version.write_bytes(header.replace(b'"format_version":1',
                                           b'"format_version":9') + b"\n" + rest)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(bad_version)


def test_checkpoint_name_set_mismatch(tmp_path):
    model = DialogModel(small_config(), rng=np.random.default_rng(4))
    ckpt = checkpoint_from_model(model)
    del ckpt.params["out.b"]
    path = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, path)
    with pytest.raises(CheckpointError, match="name"):
        model_from_checkpoint(load_checkpoint(path))


def test_checkpoint_adam_state_round_trip(tmp_path):
    corpus = tiny_corpus()
    result = train_mle(corpus, small_config(),
                       TrainHyper(batch_size=2, lr=1e-3, max_epochs=2,
                                  valid_fraction=0.0),
                       seed=0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(result.checkpoint, path)
    loaded = load_checkpoint(path)
    assert loaded.adam is not None
    assert loaded.adam.t == result.checkpoint.adam.t
    for name, arr in result.checkpoint.adam.m.items():
        assert np.array_equal(loaded.adam.m[name], arr)


# ---------------------------------------------------------------------------
# training loop


def test_training_reproducible_bitwise():
    corpus = tiny_corpus()
    hyper = TrainHyper(batch_size=2, lr=1e-3, max_epochs=3, valid_fraction=0.34)
    a = train_mle(corpus, small_config(), hyper, seed=11)
    b = train_mle(corpus, small_config(), hyper, seed=11)
    assert a.history == b.history
    for name, arr in a.checkpoint.params.items():
        assert np.array_equal(arr, b.checkpoint.params[name])


def test_training_validation_matches_evaluation_module():
    corpus = tiny_corpus() * 4
    hyper = TrainHyper(batch_size=4, lr=1e-3, max_epochs=2, valid_fraction=0.25)
    result = train_mle(corpus, small_config(), hyper, seed=5)
    recomputed = evaluation.perplexity(result.model, result.valid_dialogs)
    assert recomputed == pytest.approx(result.best_valid_ppl, abs=1e-9)


def test_single_batch_overfit():
    """Capacity sanity: one batch memorized to below 0.1 NLL per token."""
    corpus = [
        Dialog([utt([4, 5], (0, 1)), utt([6, 7], (1, 0))]),
        Dialog([utt([8, 9], (2, 0)), utt([10, 11], (0, 1))]),
    ]
    config = small_config(encoder_hidden=16, decoder_hidden=16,
                          token_embed_dim=12)
    hyper = TrainHyper(batch_size=2, lr=0.01, max_epochs=300, patience=300,
                       valid_fraction=0.0)
    result = train_mle(corpus, config, hyper, seed=2)
    final_nll = result.history[-1]["train_nll"]
    assert final_nll < 0.1, final_nll


def test_training_on_deterministic_corpus_reaches_floor():
    """Generator entropy is zero, so perplexity can approach 1."""
    synth = synthesize_corpus(pattern_config(), seed=0)
    config = ModelConfig(vocab_size=synth.vocab.size, schema=synth.schema,
                         token_embed_dim=12, encoder_hidden=16,
                         decoder_hidden=16, dropout=0.0, context_window=2)
    hyper = TrainHyper(batch_size=16, lr=0.01, max_epochs=200, patience=200,
                       valid_fraction=0.2)
    result = train_mle(synth.dialogs, config, hyper, seed=0)
    assert result.best_valid_ppl < 1.2, result.best_valid_ppl


def test_training_divergence_reported():
    corpus = tiny_corpus()
    model = DialogModel(small_config(), rng=np.random.default_rng(0))
    model.out_w.data[:] = np.nan
    with pytest.raises(TrainingDiverged, match="epoch 0"):
        train_mle(corpus, small_config(),
                  TrainHyper(batch_size=2, max_epochs=1, valid_fraction=0.0),
                  seed=0, model=model)


def test_k0_schema_trains_as_plain_seq2seq():
    dialogs = [
        Dialog([utt([4, 5], ()), utt([6, 7], ())]),
        Dialog([utt([8], ()), utt([9, 10], ())]),
    ]
    for d in dialogs:
        for u in d.utterances:
            u.attrs = []
    config = ModelConfig(vocab_size=12, schema=AttributeSchema.empty(),
                         token_embed_dim=6, encoder_hidden=8, decoder_hidden=8,
                         dropout=0.0)
    result = train_mle(dialogs, config, TrainHyper(batch_size=2, max_epochs=2,
                                                   valid_fraction=0.0), seed=0)
    assert all(not n.startswith("attr") for n in result.checkpoint.params)
