import numpy as np
import pytest

from attrdialog.corpus import EOS, Dialog, Utterance
from attrdialog.evaluation import (
    distinct_n,
    embedding_metrics,
    generic_response_rate,
    load_word_vectors,
    perplexity,
)
from attrdialog.model import DialogModel

from test_model import small_config, utt


def toy_dialogs():
    return [
        Dialog([utt([4, 5], (0, 1)), utt([6, 7, 8], (1, 0)), utt([9], (2, 1))]),
        Dialog([utt([10, 11], (0, 0)), utt([4, 6], (1, 1))]),
    ]


# ---------------------------------------------------------------------------
# perplexity


def test_uniform_model_perplexity_is_vocab_size():
    model = DialogModel(small_config(), rng=np.random.default_rng(0))
    model.out_w.data[:] = 0.0
    model.out_b.data[:] = 0.0
    ppl = perplexity(model, toy_dialogs())
    assert ppl == pytest.approx(model.config.vocab_size, rel=1e-10)


def test_perfect_model_perplexity_is_one():
    # Zeroed parameters make the logits equal the output bias; a +1000 bias
    # on EOS drives P(EOS) to exactly 1.0 in float64, and a target of just
    # [EOS] makes every gold token certain.
    model = DialogModel(small_config(), rng=np.random.default_rng(0))
    for p in model.parameters().values():
        p.data[:] = 0.0
    model.out_b.data[EOS] = 1000.0
    dialogs = [Dialog([Utterance([EOS], [0, 0]), Utterance([EOS], [0, 0])])]
    assert perplexity(model, dialogs) == 1.0


def test_perplexity_matches_two_pass_accumulation_oracle():
    model = DialogModel(small_config(), rng=np.random.default_rng(3))
    dialogs = toy_dialogs()
    got = perplexity(model, dialogs)

    total, count = 0.0, 0
    for dialog in dialogs:
        for m in range(2, len(dialog) + 1):
            lo = max(0, (m - 1) - model.config.context_window)
            ctx = model.encode_dialog_context(dialog.utterances[lo:m - 1])
            cond = model.build_conditioning_vector(
                ctx, dialog.utterances[m - 1].attrs)
            _, per_token = model.decode_utterance_nll(cond, dialog.utterances[m - 1])
            total += per_token.sum()
            count += len(per_token)
    assert got == pytest.approx(np.exp(total / count), abs=1e-9)


def test_perplexity_invariant_to_dialog_order():
    model = DialogModel(small_config(), rng=np.random.default_rng(4))
    dialogs = toy_dialogs()
    a = perplexity(model, dialogs)
    b = perplexity(model, dialogs[::-1])
    assert a == pytest.approx(b, abs=1e-9)


def test_perplexity_empty_split_rejected():
    model = DialogModel(small_config(), rng=np.random.default_rng(5))
    with pytest.raises(ValueError):
        perplexity(model, [])


def test_decode_nll_equals_singleton_perplexity():
    """exp(mean per-token NLL) is the perplexity of a one-example corpus."""
    model = DialogModel(small_config(), rng=np.random.default_rng(6))
    dialog = Dialog([utt([4, 5], (0, 1)), utt([6, 7], (1, 0))])
    ctx = model.encode_dialog_context(dialog.utterances[:1])
    cond = model.build_conditioning_vector(ctx, dialog.utterances[1].attrs)
    loss, _ = model.decode_utterance_nll(cond, dialog.utterances[1])
    assert np.exp(loss.item()) == pytest.approx(perplexity(model, [dialog]),
                                                abs=1e-9)


# ---------------------------------------------------------------------------
# distinct-n


def test_distinct1_repeated_response():
    resp = ["i dont know".split(), "i dont know".split()]
    assert distinct_n(resp, 1) == 0.5


def test_distinct1_unique_tokens():
    assert distinct_n(["a b c d".split()], 1) == 1.0


def test_distinct2_hand_example():
    assert distinct_n(["a b c".split(), "a b d".split()], 2) == 0.75


def test_distinct_n_bad_args():
    with pytest.raises(ValueError):
        distinct_n([["a"]], 0)
    with pytest.raises(ValueError):
        distinct_n([], 1)
    with pytest.raises(ValueError):
        distinct_n([["a"]], 2)


def test_distinct_n_permutation_invariant_and_duplication():
    rng = np.random.default_rng(7)
    responses = [[int(t) for t in rng.integers(0, 6, size=rng.integers(1, 8))]
                 for _ in range(20)]
    base = distinct_n(responses, 2)
    shuffled = [responses[i] for i in rng.permutation(len(responses))]
    assert distinct_n(shuffled, 2) == base
    unique = [["a", "b"], ["c", "d"]]
    assert distinct_n(unique + unique, 2) == distinct_n(unique, 2) / 2


def test_distinct_n_matches_brute_force_counting():
    rng = np.random.default_rng(8)
    for _ in range(50):
        responses = [[int(t) for t in rng.integers(0, 5, size=rng.integers(1, 7))]
                     for _ in range(rng.integers(1, 10))]
        for n in (1, 2):
            grams = []
            for r in responses:
                grams.extend(tuple(r[i:i + n]) for i in range(len(r) - n + 1))
            if not grams:
                continue
            assert distinct_n(responses, n) == len(set(grams)) / len(grams)


# ---------------------------------------------------------------------------
# embedding metrics


VECS = {
    "sun": np.array([1.0, 0.0]),
    "moon": np.array([0.0, 1.0]),
    "star": np.array([1.0, 1.0]),
    "<unk>": np.array([0.5, -0.5]),
}


def test_embedding_metrics_identical_pair():
    m = embedding_metrics([(["sun", "moon"], ["sun", "moon"])], VECS)
    assert m.average == pytest.approx(1.0)
    assert m.greedy == pytest.approx(1.0)
    assert m.extrema == pytest.approx(1.0)


def test_embedding_metrics_orthogonal_average():
    m = embedding_metrics([(["sun"], ["moon"])], VECS)
    assert m.average == pytest.approx(0.0, abs=1e-12)


def test_embedding_metrics_greedy_hand_computed():
    # ref = [sun, moon], hyp = [star]: every max-cosine is cos(45 deg).
    # Forward = (c+c)/2 = c; backward = max(c, c) = c; symmetric mean = c.
    c = 1.0 / np.sqrt(2.0)
    m = embedding_metrics([(["sun", "moon"], ["star"])], VECS)
    assert m.greedy == pytest.approx(c, abs=1e-9)


def test_embedding_metrics_extrema_tie_goes_positive():
    vecs = {"a": np.array([1.0, -1.0]), "b": np.array([-1.0, 1.0])}
    # Sequence [a, b]: each dimension ties at |1|, so extrema = [+1, +1].
    m = embedding_metrics([(["a", "b"], ["a", "b"])], vecs)
    assert m.extrema == pytest.approx(1.0)


def test_embedding_metrics_unk_fallback_and_empty_error():
    m = embedding_metrics([(["zzz"], ["zzz"])], VECS)
    assert m.average == pytest.approx(1.0)
    with pytest.raises(ValueError):
        embedding_metrics([([], ["sun"])], VECS)
    with pytest.raises(ValueError):
        embedding_metrics([], VECS)


def test_word_vector_file_round_trip(tmp_path):
    path = tmp_path / "vecs.txt"
    path.write_text("sun 1.0 0.0\nmoon 0.0 1.0\n")
    vecs = load_word_vectors(path)
    assert np.array_equal(vecs["sun"], [1.0, 0.0])
    bad = tmp_path / "bad.txt"
    bad.write_text("sun 1.0 0.0\nmoon 0.0\n")
    with pytest.raises(ValueError):
        load_word_vectors(bad)


# ---------------------------------------------------------------------------
# generic response rate


def test_generic_rate_full_overlap():
    phrase = ("i", "dont", "know")
    other = ("thank", "you")
    responses = [phrase] * 4
    rates = generic_response_rate(responses, [phrase, other])
    assert rates[phrase] == 100.0
    assert rates[other] == 0.0


def test_generic_rate_no_overlap():
    rates = generic_response_rate([("a", "b")], [("c",), ("d", "e")])
    assert all(v == 0.0 for v in rates.values())


def test_generic_rate_prefix_semantics():
    responses = [("i", "dont", "know", "why"), ("i", "dont",)]
    rates = generic_response_rate(responses, [("i", "dont", "know")])
    assert rates[("i", "dont", "know")] == 50.0


def test_generic_rate_counts_every_matching_phrase():
    # One response can prefix-match several listed phrases at once.
    responses = [("i", "dont", "know", "why")]
    rates = generic_response_rate(responses,
                                  [("i",), ("i", "dont"),
                                   ("i", "dont", "know"), ("why",)])
    assert rates[("i",)] == 100.0
    assert rates[("i", "dont")] == 100.0
    assert rates[("i", "dont", "know")] == 100.0
    assert rates[("why",)] == 0.0


def test_generic_rate_matches_brute_force():
    rng = np.random.default_rng(9)
    for _ in range(30):
        responses = [tuple(rng.integers(0, 4, size=rng.integers(1, 6)))
                     for _ in range(rng.integers(1, 12))]
        phrases = [tuple(rng.integers(0, 4, size=rng.integers(1, 3)))
                   for _ in range(3)]
        rates = generic_response_rate(responses, phrases)
        for phrase in phrases:
            want = 100.0 * sum(r[:len(phrase)] == phrase for r in responses) \
                / len(responses)
            assert rates[phrase] == want
            assert 0.0 <= rates[phrase] <= 100.0


def test_generic_rate_empty_phrases_rejected():
    with pytest.raises(ValueError):
        generic_response_rate([("a",)], [])
