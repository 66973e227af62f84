"""Standalone attribute classifiers and the corpus auto-annotation pipeline.

Three architectures per family: variant "u" reads the utterance's tokens
through a GRU; variant "da" reads the two previous utterances' labels
through a single-layer GRU; variant "uda" concatenates both
representations. Each feeds a two-layer MLP over the family's known
labels. Annotation fills only "unknown" labels, left to right, so history
conditioned variants see previously predicted labels.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import AdamState, Tensor
from .corpus import AttributeSchema, Dialog, Utterance
from .training import Checkpoint, CheckpointError, assign_params

KIND_CLASSIFIER = "attribute_classifier"
VARIANTS = ("u", "da", "uda")


@dataclass
class ClassifierConfig:
    family: str
    variant: str
    vocab_size: int
    schema: AttributeSchema
    token_embed_dim: int = 16
    encoder_hidden: int = 24
    encoder_layers: int = 2
    attr_embed_dim: int = 8
    attr_hidden: int = 12
    mlp_hidden: int = 32

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        self.schema.family(self.family)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "family", "variant", "vocab_size", "token_embed_dim",
            "encoder_hidden", "encoder_layers", "attr_embed_dim",
            "attr_hidden", "mlp_hidden")}
        d["schema"] = self.schema.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierConfig":
        d = dict(d)
        d["schema"] = AttributeSchema.from_dict(d["schema"])
        return cls(**d)


class AttributeClassifier:
    """One family's label classifier in one of the three variants."""

    def __init__(self, config: ClassifierConfig,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.config = config
        fam = config.schema.family(config.family)
        self.uses_text = config.variant in ("u", "uda")
        self.uses_history = config.variant in ("da", "uda")

        self.tok_emb = None
        self.encoder = None
        if self.uses_text:
            self.tok_emb = layers.init_embedding(rng, config.vocab_size,
                                                 config.token_embed_dim)
            self.encoder = layers.init_gru(rng, config.token_embed_dim,
                                           config.encoder_hidden,
                                           config.encoder_layers)
        self.attr_emb = None
        self.attr_rnn = None
        if self.uses_history:
            self.attr_emb = layers.init_embedding(rng, fam.num_labels,
                                                  config.attr_embed_dim)
            self.attr_rnn = layers.init_gru(rng, config.attr_embed_dim,
                                            config.attr_hidden, 1)
        feat_dim = (config.encoder_hidden if self.uses_text else 0) + \
                   (config.attr_hidden if self.uses_history else 0)
        self.mlp = layers.init_mlp(rng, [feat_dim, config.mlp_hidden,
                                         fam.num_known])

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.uses_text:
            out["tok_emb"] = self.tok_emb
            out.update(self.encoder.named("enc"))
        if self.uses_history:
            out["attr_emb"] = self.attr_emb
            out.update(self.attr_rnn.named("attr_rnn"))
        out.update(self.mlp.named("mlp"))
        return out

    # -- forward -------------------------------------------------------------

    def _text_features(self, tokens: np.ndarray, keep: np.ndarray) -> Tensor:
        b, l = tokens.shape
        xs = [ad.lookup(self.tok_emb, tokens[:, t]) for t in range(l)]
        masks = [Tensor(np.repeat(keep[:, t][:, None],
                                  self.config.encoder_hidden, axis=1))
                 for t in range(l)]
        _, final = layers.gru_sequence(xs, None, self.encoder, step_masks=masks)
        return final[-1]

    def _history_features(self, prev2: np.ndarray, prev1: np.ndarray) -> Tensor:
        # Chronological order: the older label first.
        xs = [ad.lookup(self.attr_emb, prev2), ad.lookup(self.attr_emb, prev1)]
        _, final = layers.gru_sequence(xs, None, self.attr_rnn)
        return final[-1]

    def logits_batch(self, tokens: np.ndarray, keep: np.ndarray,
                     prev1: np.ndarray, prev2: np.ndarray) -> Tensor:
        feats = []
        if self.uses_text:
            feats.append(self._text_features(tokens, keep))
        if self.uses_history:
            feats.append(self._history_features(prev2, prev1))
        feat = feats[0] if len(feats) == 1 else ad.concat(feats, axis=1)
        return layers.mlp_forward(feat, self.mlp)

    def classify_utterance(self, utterance: Utterance | Sequence[int],
                           prev_attrs: tuple[int, int] | None = None) -> np.ndarray:
        """Distribution over the family's known labels.

        prev_attrs is (label of U_{t-1}, label of U_{t-2}); missing history
        defaults to the unknown sentinel.
        """
        fam = self.config.schema.family(self.config.family)
        ids = utterance.token_ids if isinstance(utterance, Utterance) else list(utterance)
        if prev_attrs is None:
            prev_attrs = (fam.unknown_id, fam.unknown_id)
        tokens = np.array([ids], dtype=np.int64)
        keep = np.ones((1, len(ids)))
        prev1 = np.array([prev_attrs[0]], dtype=np.int64)
        prev2 = np.array([prev_attrs[1]], dtype=np.int64)
        with ad.no_grad():
            logits = self.logits_batch(tokens, keep, prev1, prev2)
        return ad.stable_softmax(logits.data)[0]


# ---------------------------------------------------------------------------
# training


@dataclass
class ClassifierExample:
    token_ids: list[int]
    prev1: int
    prev2: int
    gold: int


def classifier_examples(dialogs: Sequence[Dialog], schema: AttributeSchema,
                        family: str) -> list[ClassifierExample]:
    fam = schema.family(family)
    fi = schema.family_index(family)
    out = []
    for dialog in dialogs:
        for t, utt in enumerate(dialog.utterances):
            gold = utt.attrs[fi]
            if gold == fam.unknown_id:
                continue
            prev1 = dialog.utterances[t - 1].attrs[fi] if t >= 1 else fam.unknown_id
            prev2 = dialog.utterances[t - 2].attrs[fi] if t >= 2 else fam.unknown_id
            out.append(ClassifierExample(utt.token_ids, prev1, prev2, gold))
    return out


def _example_batch(examples: list[ClassifierExample]):
    b = len(examples)
    l = max(len(e.token_ids) for e in examples)
    tokens = np.zeros((b, l), dtype=np.int64)
    keep = np.zeros((b, l))
    for i, e in enumerate(examples):
        tokens[i, :len(e.token_ids)] = e.token_ids
        keep[i, :len(e.token_ids)] = 1.0
    prev1 = np.array([e.prev1 for e in examples], dtype=np.int64)
    prev2 = np.array([e.prev2 for e in examples], dtype=np.int64)
    gold = np.array([e.gold for e in examples], dtype=np.int64)
    return tokens, keep, prev1, prev2, gold


def _accuracy(clf: AttributeClassifier, examples: list[ClassifierExample],
              batch_size: int = 256) -> float:
    hits = 0
    with ad.no_grad():
        for lo in range(0, len(examples), batch_size):
            tokens, keep, prev1, prev2, gold = _example_batch(
                examples[lo:lo + batch_size])
            logits = clf.logits_batch(tokens, keep, prev1, prev2)
            hits += int((logits.data.argmax(axis=1) == gold).sum())
    return hits / len(examples)


@dataclass
class ClassifierHyper:
    batch_size: int = 32
    lr: float = 3e-3
    max_epochs: int = 20
    patience: int = 5
    valid_fraction: float = 0.1


@dataclass
class ClassifierResult:
    classifier: AttributeClassifier
    valid_accuracy: float
    majority_baseline: float
    history: list[dict] = field(default_factory=list)


def train_classifier(dialogs: Sequence[Dialog], config: ClassifierConfig,
                     hyper: ClassifierHyper | None = None,
                     seed: int = 0) -> ClassifierResult:
    """Adam MLE training with a held-out split; returns the best-validation
    parameters together with the majority-class baseline accuracy."""
    hyper = hyper or ClassifierHyper()
    rng = np.random.default_rng(seed)
    clf = AttributeClassifier(config, rng=rng)
    params = clf.parameters()
    adam = AdamState.for_params(params, lr=hyper.lr)

    order = rng.permutation(len(dialogs))
    n_valid = int(len(dialogs) * hyper.valid_fraction)
    valid_ids = set(order[:n_valid].tolist())
    train_dialogs = [d for i, d in enumerate(dialogs) if i not in valid_ids]
    valid_dialogs = [d for i, d in enumerate(dialogs) if i in valid_ids]

    train_ex = classifier_examples(train_dialogs, config.schema, config.family)
    valid_ex = classifier_examples(valid_dialogs, config.schema, config.family) \
        or train_ex
    if not train_ex:
        raise ValueError(f"no labeled examples for family {config.family!r}")

    counts = np.bincount([e.gold for e in train_ex])
    majority = int(counts.argmax())
    majority_acc = float(np.mean([e.gold == majority for e in valid_ex]))

    result = ClassifierResult(classifier=clf, valid_accuracy=0.0,
                              majority_baseline=majority_acc)
    best_params = None
    best_acc = -1.0
    stale = 0
    for epoch in range(hyper.max_epochs):
        perm = rng.permutation(len(train_ex))
        for lo in range(0, len(train_ex), hyper.batch_size):
            chunk = [train_ex[i] for i in perm[lo:lo + hyper.batch_size]]
            tokens, keep, prev1, prev2, gold = _example_batch(chunk)
            ad.zero_grads(params)
            logits = clf.logits_batch(tokens, keep, prev1, prev2)
            loss, _ = ad.softmax_cross_entropy(logits, gold)
            loss.backward()
            grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data))
                     for n, p in params.items()}
            ad.adam_step(params, grads, adam)
        acc = _accuracy(clf, valid_ex)
        result.history.append({"epoch": epoch, "valid_accuracy": acc})
        if acc > best_acc:
            best_acc = acc
            best_params = {n: p.data.copy() for n, p in params.items()}
            stale = 0
        else:
            stale += 1
            if stale >= hyper.patience:
                break
    if best_params is not None:
        for n, p in params.items():
            p.data[:] = best_params[n]
    result.valid_accuracy = best_acc
    return result


# ---------------------------------------------------------------------------
# annotation


def annotate_corpus(dialogs: Sequence[Dialog],
                    classifiers: dict[str, AttributeClassifier],
                    schema: AttributeSchema) -> list[Dialog]:
    """Fill unknown labels with argmax predictions, left to right.

    Gold labels are never overwritten, so annotating an already-annotated
    corpus returns it unchanged.
    """
    for family, clf in classifiers.items():
        if clf.config.family != family:
            raise ValueError(
                f"classifier for {clf.config.family!r} registered as {family!r}")
        schema.family(family)
    out = copy.deepcopy(list(dialogs))
    for dialog in out:
        for family, clf in classifiers.items():
            fam = schema.family(family)
            fi = schema.family_index(family)
            for t, utt in enumerate(dialog.utterances):
                if utt.attrs[fi] != fam.unknown_id:
                    continue
                prev1 = dialog.utterances[t - 1].attrs[fi] if t >= 1 \
                    else fam.unknown_id
                prev2 = dialog.utterances[t - 2].attrs[fi] if t >= 2 \
                    else fam.unknown_id
                dist = clf.classify_utterance(utt, (prev1, prev2))
                utt.attrs[fi] = int(dist.argmax())
    return out


# ---------------------------------------------------------------------------
# persistence


def checkpoint_from_classifier(clf: AttributeClassifier,
                               rng_seed: int | None = None) -> Checkpoint:
    return Checkpoint(kind=KIND_CLASSIFIER, config=clf.config.to_dict(),
                      params={n: p.data.copy()
                              for n, p in clf.parameters().items()},
                      rng_seed=rng_seed)


def classifier_from_checkpoint(ckpt: Checkpoint) -> AttributeClassifier:
    if ckpt.kind != KIND_CLASSIFIER:
        raise CheckpointError(f"checkpoint kind {ckpt.kind!r} is not a classifier")
    clf = AttributeClassifier(ClassifierConfig.from_dict(ckpt.config))
    assign_params(clf.parameters(), ckpt.params)
    return clf
