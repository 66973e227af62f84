"""Shared corpora and trained models for the acceptance suite.

The expensive fixtures are session-scoped: the RL corpus and its
supervised checkpoint back several acceptance criteria.
"""

import pytest

from attrdialog.corpus import DullSet, synthesize_corpus
from attrdialog.model import ModelConfig
from attrdialog.training import TrainHyper, train_mle

DIVERSE_LABELS = ["redwood", "comet", "harbor", "meadow"]
RL_LABELS = ["dull"] + DIVERSE_LABELS
# The action that makes a dull continuation unlikely, per previous label.
RL_MATCH = {"dull": "redwood", "redwood": "comet", "comet": "harbor",
            "harbor": "meadow", "meadow": "redwood", "unknown": "redwood"}
DULL_TEMPLATES = [
    ("i dont know", 0.4),
    ("i am not sure", 0.2),
    ("thank you so much", 0.15),
    ("i have no idea", 0.15),
    ("that is fine", 0.1),
]
RL_DIVERSE_TEMPLATES = {
    "redwood": [("the redwood grove shades the trail", 0.7),
                ("tall redwoods line the ridge", 0.3)],
    "comet": [("a bright comet crosses the night sky", 0.7),
              ("the comet tail glows faintly", 0.3)],
    "harbor": [("small boats rest in the harbor", 0.7),
               ("fog rolls over the harbor wall", 0.3)],
    "meadow": [("wildflowers cover the spring meadow", 0.7),
               ("bees hum across the meadow grass", 0.3)],
}


def rl_generator_config(num_dialogs=3000):
    """Dull responses dominate every next-label distribution, but the dull
    probability drops from 0.7 to 0.25 when the chosen label 'answers' the
    previous one, so the anti-dull action varies with the context."""
    rows = {}
    for l1 in RL_LABELS + ["unknown"]:
        for l2 in RL_LABELS + ["unknown"]:
            dull_p = 0.25 if l1 == RL_MATCH[l2] else 0.7
            row = {"dull": dull_p}
            for d in DIVERSE_LABELS:
                row[d] = (1.0 - dull_p) / 4
            rows[f"{l1}|{l2}"] = row
    by_label = {"dull": [list(t) for t in DULL_TEMPLATES]}
    for label, temps in RL_DIVERSE_TEMPLATES.items():
        by_label[label] = [list(t) for t in temps]
    return {
        "families": [{"name": "act", "labels": RL_LABELS}],
        "transitions": {"act": rows},
        "templates": {"family": "act", "by_label": by_label},
        "num_dialogs": num_dialogs,
        "dialog_length": {"4": 1.0},
    }


@pytest.fixture(scope="session")
def rl_synth():
    return synthesize_corpus(rl_generator_config(), seed=0)


@pytest.fixture(scope="session")
def rl_supervised(rl_synth):
    config = ModelConfig(vocab_size=rl_synth.vocab.size, schema=rl_synth.schema,
                         token_embed_dim=16, encoder_hidden=24,
                         decoder_hidden=24, attr_embed_dims={"act": 8},
                         attr_rnn_hidden=12, attr_head_hidden=32,
                         dropout=0.0, context_window=2)
    hyper = TrainHyper(batch_size=64, lr=3e-3, max_epochs=15, patience=15,
                       valid_fraction=0.1)
    return train_mle(rl_synth.dialogs, config, hyper, seed=0)


@pytest.fixture(scope="session")
def rl_dull_set(rl_synth):
    texts = [t for t, _ in DULL_TEMPLATES]
    ids = [list(rl_synth.vocab.encode_text(t, add_eos=False)) for t in texts]
    return DullSet(utterances=ids, counts=[len(i) for i in ids], texts=texts)
