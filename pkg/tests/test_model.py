import numpy as np
import pytest

from attrdialog import autodiff as ad
from attrdialog import layers
from attrdialog.autodiff import check_gradients
from attrdialog.corpus import (
    EOS,
    AttributeFamily,
    AttributeSchema,
    Dialog,
    Utterance,
)
from attrdialog.model import (
    DialogModel,
    ModelConfig,
    build_batch,
    iter_examples,
)


def small_schema():
    return AttributeSchema([
        AttributeFamily("act", ["ask", "tell", "nod"]),
        AttributeFamily("mood", ["up", "down"]),
    ])


def small_config(**overrides):
    base = dict(vocab_size=12, schema=small_schema(), token_embed_dim=5,
                encoder_hidden=6, decoder_hidden=7, encoder_layers=1,
                decoder_layers=1, attr_embed_dims={"act": 3, "mood": 2},
                attr_rnn_hidden=4, attr_head_hidden=5, dropout=0.0)
    base.update(overrides)
    return ModelConfig(**base)


def utt(ids, attrs=(0, 0)):
    return Utterance(token_ids=list(ids) + [EOS], attrs=list(attrs))


@pytest.fixture
def model():
    return DialogModel(small_config(), rng=np.random.default_rng(42))


def test_config_rejects_bad_dims():
    with pytest.raises(ValueError):
        small_config(encoder_hidden=0)
    with pytest.raises(ValueError):
        small_config(attr_embed_dims={"act": 3, "mood": 2, "ghost": 4})


def test_config_round_trips_through_dict():
    cfg = small_config()
    again = ModelConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()


# ---------------------------------------------------------------------------
# context encoding


def test_encode_empty_prefix_rejected(model):
    with pytest.raises(ValueError):
        model.encode_dialog_context([])


def test_encode_single_utterance_matches_manual_composition(model):
    u = utt([4, 5, 6])
    ctx = model.encode_dialog_context([u])
    xs = [ad.lookup(model.tok_emb, np.array([t])) for t in u.token_ids]
    _, tok_final = layers.gru_sequence(xs, None, model.enc_tok)
    _, utt_final = layers.gru_sequence([tok_final[-1]], None, model.enc_utt)
    assert np.allclose(ctx.s.data, utt_final[-1].data)


def test_encode_order_sensitivity(model):
    a, b = utt([4, 5]), utt([6, 7, 8])
    s_ab = model.encode_dialog_context([a, b]).s.data
    s_ba = model.encode_dialog_context([b, a]).s.data
    assert not np.allclose(s_ab, s_ba)


def test_encode_zero_params_zero_context():
    model = DialogModel(small_config(), rng=np.random.default_rng(0))
    for p in model.parameters().values():
        p.data[:] = 0.0
    ctx = model.encode_dialog_context([utt([4, 5])])
    assert np.array_equal(ctx.s.data, np.zeros_like(ctx.s.data))


def test_padded_batch_encoding_matches_single(model):
    """Right-padding with masks must not change any example's encoding."""
    ex1 = ([utt([4, 5, 6, 7]), utt([8])], utt([9, 10]))
    ex2 = ([utt([5])], utt([6]))
    batch = build_batch([ex1, ex2], model.config.schema)
    ctx = model.encode_context_batch(batch)
    for i, ex in enumerate((ex1, ex2)):
        single = model.encode_dialog_context(ex[0])
        assert np.allclose(ctx.s.data[i], single.s.data[0], atol=1e-12)
        assert np.allclose(ctx.attr_history.data[i], single.attr_history.data[0],
                           atol=1e-12)


# ---------------------------------------------------------------------------
# attribute prediction


def test_attribute_distributions_normalized(model):
    ctx = model.encode_dialog_context([utt([4, 5]), utt([6])])
    for dist in model.predict_next_attributes(ctx):
        assert abs(dist.sum() - 1.0) < 1e-9


def test_zero_heads_give_uniform(model):
    for name, mlp in model.attr_heads.items():
        for w in mlp.weights:
            w.data[:] = 0.0
        for b in mlp.biases:
            b.data[:] = 0.0
    ctx = model.encode_dialog_context([utt([4, 5])])
    dists = model.predict_next_attributes(ctx)
    assert np.allclose(dists[0], 1.0 / 3)   # act has 3 known labels
    assert np.allclose(dists[1], 1.0 / 2)   # mood has 2
    # NLL at uniform equals ln(known label count).
    assert abs(-np.log(dists[0][0, 1]) - np.log(3)) < 1e-12


def test_unknown_label_excluded_from_prediction_support(model):
    ctx = model.encode_dialog_context([utt([4])])
    dists = model.predict_next_attributes(ctx)
    fam = model.config.schema.families[0]
    assert dists[0].shape == (1, fam.num_known)


# ---------------------------------------------------------------------------
# conditioning vector


def test_conditioning_vector_length(model):
    ctx = model.encode_dialog_context([utt([4])])
    cond = model.build_conditioning_vector(ctx, [1, 0])
    assert cond.c.shape == (1, 6 + 3 + 2)
    assert cond.offsets == [0, 6, 9, 11]


def test_conditioning_locality(model):
    ctx = model.encode_dialog_context([utt([4])])
    a = model.build_conditioning_vector(ctx, [0, 0]).c.data
    b = model.build_conditioning_vector(ctx, [2, 0]).c.data
    assert not np.allclose(a[:, 6:9], b[:, 6:9])
    assert np.array_equal(a[:, :6], b[:, :6])
    assert np.array_equal(a[:, 9:], b[:, 9:])


def test_conditioning_matches_manual_gather(model):
    ctx = model.encode_dialog_context([utt([4])])
    cond = model.build_conditioning_vector(ctx, [1, 1])
    manual = np.concatenate([
        ctx.s.data,
        model.attr_emb["act"].data[[1]],
        model.attr_emb["mood"].data[[1]],
    ], axis=1)
    assert np.array_equal(cond.c.data, manual)


def test_conditioning_invalid_label(model):
    ctx = model.encode_dialog_context([utt([4])])
    with pytest.raises(ValueError):
        model.build_conditioning_vector(ctx, [7, 0])


# ---------------------------------------------------------------------------
# decoding


def test_zero_output_layer_gives_log_vocab_nll(model):
    model.out_w.data[:] = 0.0
    model.out_b.data[:] = 0.0
    ctx = model.encode_dialog_context([utt([4, 5])])
    cond = model.build_conditioning_vector(ctx, [0, 0])
    loss, per_token = model.decode_utterance_nll(cond, utt([6, 7, 8]))
    assert np.allclose(per_token, np.log(model.config.vocab_size))
    assert abs(loss.item() - np.log(model.config.vocab_size)) < 1e-12


def test_decode_requires_eos_termination(model):
    ctx = model.encode_dialog_context([utt([4])])
    cond = model.build_conditioning_vector(ctx, [0, 0])
    with pytest.raises(ValueError):
        model.decode_utterance_nll(cond, Utterance(token_ids=[4, 5], attrs=[0, 0]))


def test_decoder_causality(model):
    """Per-token NLLs equal the stepwise next-token NLLs of each prefix."""
    ctx = model.encode_dialog_context([utt([4, 5])])
    cond = model.build_conditioning_vector(ctx, [1, 1])
    ids = [6, 7, 8, EOS]
    _, per_token = model.decode_utterance_nll(cond, Utterance(ids, [0, 0]))
    for t in range(len(ids)):
        dist = model.step_distributions(cond, ids[:t])
        assert abs(per_token[t] + np.log(dist[ids[t]])) < 1e-12


def test_conditioning_sensitivity_of_nll(model):
    ctx = model.encode_dialog_context([utt([4, 5])])
    target = utt([6, 7])
    nll_a = model.decode_utterance_nll(
        model.build_conditioning_vector(ctx, [0, 0]), target)[0].item()
    nll_b = model.decode_utterance_nll(
        model.build_conditioning_vector(ctx, [2, 1]), target)[0].item()
    assert nll_a != nll_b


def test_decode_gradients_match_finite_differences(model):
    ctx_utts = [utt([4, 5])]
    target = utt([6, 7, 8])

    # Check through the whole pipeline, encoder included.
    params = {k: v for k, v in model.parameters().items()}

    def computation():
        ctx = model.encode_dialog_context(ctx_utts)
        cond = model.build_conditioning_vector(ctx, [1, 0])
        loss, _ = model.decode_utterance_nll(cond, target)
        return loss

    subset = {k: params[k] for k in
              ["tok_emb", "out.w", "out.b", "dec.l0.wh", "dec.l0.uh",
               "dec_init.l0.w", "enc_tok.l0.wz", "enc_utt.l0.wr",
               "attr_emb.act", "attr_emb.mood"]}
    report = check_gradients(computation, subset)
    assert report.ok(1e-4), report.failures(1e-4)


# ---------------------------------------------------------------------------
# generation


def test_generation_terminates(model):
    ctx = model.encode_dialog_context([utt([4])])
    cond = model.build_conditioning_vector(ctx, [0, 0])
    out = model.generate_utterance(cond, max_len=7)
    assert out[-1] == EOS or len(out) == 7


def test_greedy_generation_deterministic(model):
    ctx = model.encode_dialog_context([utt([4, 5])])
    cond = model.build_conditioning_vector(ctx, [1, 1])
    a = model.generate_utterance(cond, max_len=10)
    b = model.generate_utterance(cond, max_len=10)
    assert a == b


def test_sampled_first_token_frequencies(model):
    ctx = model.encode_dialog_context([utt([4])])
    cond = model.build_conditioning_vector(ctx, [0, 0])
    expected = model.step_distributions(cond, [])
    rng = np.random.default_rng(0)
    counts = np.zeros(model.config.vocab_size)
    draws = 10_000
    for _ in range(draws):
        first = model.generate_utterance(cond, mode="sample", max_len=1, rng=rng)[0]
        counts[first] += 1
    assert np.max(np.abs(counts / draws - expected)) < 0.02


def test_generate_bad_args(model):
    ctx = model.encode_dialog_context([utt([4])])
    cond = model.build_conditioning_vector(ctx, [0, 0])
    with pytest.raises(ValueError):
        model.generate_utterance(cond, max_len=0)
    with pytest.raises(ValueError):
        model.generate_utterance(cond, mode="beam")


# ---------------------------------------------------------------------------
# joint objective


def test_joint_nll_equals_constituent_sum(model):
    dialog = Dialog([utt([4, 5], (0, 1)), utt([6, 7], (2, 0))])
    joint = model.joint_nll(dialog, m=2).item()

    ctx = model.encode_dialog_context(dialog.utterances[:1])
    dists = model.predict_next_attributes(ctx)
    attr_nll = -np.log(dists[0][0, 2]) - np.log(dists[1][0, 0])
    cond = model.build_conditioning_vector(ctx, [2, 0])
    token_nll = model.decode_utterance_nll(cond, dialog.utterances[1])[0].item()
    assert abs(joint - (attr_nll + token_nll)) < 1e-12


def test_joint_nll_masks_unknown_gold_labels(model):
    fam0, fam1 = model.config.schema.families
    dialog = Dialog([
        utt([4, 5], (0, 1)),
        Utterance([6, 7, EOS], [fam0.unknown_id, 0]),
    ])
    joint = model.joint_nll(dialog, m=2).item()
    ctx = model.encode_dialog_context(dialog.utterances[:1])
    dists = model.predict_next_attributes(ctx)
    cond = model.build_conditioning_vector(ctx, [fam0.unknown_id, 0])
    token_nll = model.decode_utterance_nll(cond, dialog.utterances[1])[0].item()
    assert abs(joint - (-np.log(dists[1][0, 0]) + token_nll)) < 1e-12


def test_joint_nll_k0_reduces_to_seq2seq():
    cfg = ModelConfig(vocab_size=10, schema=AttributeSchema.empty(),
                      token_embed_dim=4, encoder_hidden=5, decoder_hidden=5,
                      dropout=0.0)
    model = DialogModel(cfg, rng=np.random.default_rng(1))
    dialog = Dialog([Utterance([4, 5, EOS], []), Utterance([6, EOS], [])])
    joint = model.joint_nll(dialog, m=2).item()
    ctx = model.encode_dialog_context(dialog.utterances[:1])
    cond = model.build_conditioning_vector(ctx, [])
    token_nll = model.decode_utterance_nll(cond, dialog.utterances[1])[0].item()
    assert abs(joint - token_nll) < 1e-15


def test_joint_nll_m_out_of_range(model):
    dialog = Dialog([utt([4]), utt([5])])
    with pytest.raises(ValueError):
        model.joint_nll(dialog, m=1)
    with pytest.raises(ValueError):
        model.joint_nll(dialog, m=3)


def test_batch_loss_is_mean_of_single_example_losses(model):
    dialogs = [
        Dialog([utt([4, 5], (0, 1)), utt([6], (1, 0)), utt([7, 8], (2, 1))]),
        Dialog([utt([9], (1, 1)), utt([10, 11], (0, 0))]),
    ]
    examples = list(iter_examples(dialogs, window=2))
    batch = build_batch(examples, model.config.schema)
    batch_loss, _ = model.batch_joint_loss(batch)

    singles = []
    for dialog in dialogs:
        for m in range(2, len(dialog) + 1):
            singles.append(model.joint_nll(dialog, m).item())
    assert abs(batch_loss.item() - np.mean(singles)) < 1e-12


def test_two_layer_model_batch_matches_single():
    config = small_config(encoder_layers=2, decoder_layers=2)
    model = DialogModel(config, rng=np.random.default_rng(20))
    ex1 = ([utt([4, 5, 6]), utt([7])], utt([8, 9]))
    ex2 = ([utt([10])], utt([11]))
    batch = build_batch([ex1, ex2], config.schema)
    batch_loss, _ = model.batch_joint_loss(batch)
    singles = []
    for ctx_utts, target in (ex1, ex2):
        ctx = model.encode_dialog_context(ctx_utts)
        dists = model.predict_next_attributes(ctx)
        attr_nll = sum(-np.log(d[0, t]) for d, t in zip(dists, target.attrs))
        cond = model.build_conditioning_vector(ctx, target.attrs)
        token_nll = model.decode_utterance_nll(cond, target)[0].item()
        singles.append(attr_nll + token_nll)
    assert batch_loss.item() == pytest.approx(np.mean(singles), abs=1e-12)
    out = model.generate_utterance(
        model.build_conditioning_vector(
            model.encode_dialog_context([utt([4])]), [0, 0]), max_len=5)
    assert out[-1] == EOS or len(out) == 5


def test_training_dropout_is_seed_reproducible():
    from attrdialog.training import TrainHyper, train_mle

    dialogs = [Dialog([utt([4, 5], (0, 1)), utt([6, 7], (1, 0))]),
               Dialog([utt([8], (2, 0)), utt([9, 10], (0, 1))])]
    config = small_config(encoder_layers=2, decoder_layers=2, dropout=0.3)
    hyper = TrainHyper(batch_size=2, lr=1e-3, max_epochs=2, valid_fraction=0.0)
    a = train_mle(dialogs, config, hyper, seed=4)
    b = train_mle(dialogs, config, hyper, seed=4)
    assert a.history == b.history


def test_iter_examples_enumeration():
    d = Dialog([utt([4]), utt([5]), utt([6])])
    examples = list(iter_examples([d], window=2))
    assert len(examples) == 2
    assert len(examples[0][0]) == 1      # m=2 sees one context utterance
    assert len(examples[1][0]) == 2      # m=3 sees two
    total = sum(len(d) - 1 for d in [d])
    assert len(examples) == total
