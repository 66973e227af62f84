"""Dialog data model, corpus files, vocabulary, and synthetic corpora.

Corpus files are UTF-8 JSON lines, one dialog per line:

    {"utterances": [{"text": "...", "attrs": {"<family>": "<label>"}}, ...]}

Tokenization is lowercase + whitespace split everywhere. Token ids are
EOS-terminated in memory. Attribute families carry an "unknown" sentinel
label, always kept last in the label list, used for unannotated utterances.

The synthetic generator samples dialogs from explicit second-order label
transition tables and per-label template distributions, and exposes those
tables so tests can compute exact likelihoods of anything it produced.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PAD, UNK, SOS, EOS = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<unk>", "<sos>", "<eos>")
UNKNOWN_LABEL = "unknown"

_ROW_TOL = 1e-9


class CorpusError(ValueError):
    """Malformed corpus input; message carries the offending location."""


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class Vocabulary:
    """Bijection between surface tokens and ids with reserved specials."""

    def __init__(self, tokens: list[str]):
        if list(tokens[:4]) != list(RESERVED_TOKENS):
            raise CorpusError(
                f"vocabulary must start with reserved tokens {RESERVED_TOKENS}")
        self.id_to_token: list[str] = list(tokens)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(tokens)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise CorpusError("duplicate token in vocabulary")

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def encode_token(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def encode_text(self, text: str, add_eos: bool = True) -> list[int]:
        ids = [self.encode_token(t) for t in tokenize(text)]
        if add_eos:
            ids.append(EOS)
        return ids

    def decode(self, ids, strip_special: bool = True) -> str:
        toks = []
        for i in ids:
            if strip_special and i in (PAD, SOS, EOS):
                continue
            toks.append(self.id_to_token[i])
        return " ".join(toks)

    def tokens_of(self, ids) -> list[str]:
        return [self.id_to_token[i] for i in ids if i not in (PAD, SOS, EOS)]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if len(lines) < 4 or lines[:4] != list(RESERVED_TOKENS):
            raise CorpusError(
                f"{path}: vocabulary file must begin with {RESERVED_TOKENS}")
        return cls(lines)


def build_vocab(token_seqs, cap: int) -> Vocabulary:
    """Keep the cap-4 most frequent tokens; ties break lexicographically."""
    if cap < 5:
        raise CorpusError(f"vocabulary cap must be at least 5, got {cap}")
    counts: Counter[str] = Counter()
    for seq in token_seqs:
        counts.update(seq)
    for special in RESERVED_TOKENS:
        counts.pop(special, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, _ in ranked[: cap - 4]]
    return Vocabulary(list(RESERVED_TOKENS) + kept)


@dataclass
class AttributeFamily:
    """One discrete label family; 'unknown' is always the last label."""

    name: str
    labels: list[str]

    def __post_init__(self):
        if UNKNOWN_LABEL not in self.labels:
            self.labels = list(self.labels) + [UNKNOWN_LABEL]
        if self.labels[-1] != UNKNOWN_LABEL:
            raise CorpusError(
                f"family {self.name!r}: {UNKNOWN_LABEL!r} must be the last label")
        if len(set(self.labels)) != len(self.labels):
            raise CorpusError(f"family {self.name!r}: duplicate labels")
        self._index = {l: i for i, l in enumerate(self.labels)}

    @property
    def num_labels(self) -> int:
        return len(self.labels)

    @property
    def num_known(self) -> int:
        return len(self.labels) - 1

    @property
    def unknown_id(self) -> int:
        return len(self.labels) - 1

    def label_id(self, label: str) -> int:
        if label not in self._index:
            raise CorpusError(f"family {self.name!r}: unknown label {label!r}")
        return self._index[label]


class AttributeSchema:
    """The ordered collection of attribute families (K may be zero)."""

    def __init__(self, families: list[AttributeFamily]):
        names = [f.name for f in families]
        if len(set(names)) != len(names):
            raise CorpusError("duplicate family names in schema")
        self.families = list(families)
        self._by_name = {f.name: f for f in families}

    @property
    def k(self) -> int:
        return len(self.families)

    def family(self, name: str) -> AttributeFamily:
        if name not in self._by_name:
            raise CorpusError(f"unknown attribute family {name!r}")
        return self._by_name[name]

    def family_index(self, name: str) -> int:
        return [f.name for f in self.families].index(name)

    def unknown_assignment(self) -> list[int]:
        return [f.unknown_id for f in self.families]

    def to_dict(self) -> dict:
        return {"families": [{"name": f.name, "labels": f.labels}
                             for f in self.families]}

    @classmethod
    def from_dict(cls, d: dict) -> "AttributeSchema":
        return cls([AttributeFamily(f["name"], list(f["labels"]))
                    for f in d.get("families", [])])

    @classmethod
    def empty(cls) -> "AttributeSchema":
        return cls([])


@dataclass
class Utterance:
    """EOS-terminated token ids plus one label id per schema family."""

    token_ids: list[int]
    attrs: list[int]

    def content_ids(self) -> list[int]:
        return [t for t in self.token_ids if t not in (PAD, SOS, EOS)]


@dataclass
class Dialog:
    utterances: list[Utterance]

    def __post_init__(self):
        if len(self.utterances) < 2:
            raise CorpusError("a dialog needs at least two utterances")

    def __len__(self) -> int:
        return len(self.utterances)


def _parse_attrs(raw: dict | None, schema: AttributeSchema, where: str) -> list[int]:
    attrs = schema.unknown_assignment()
    if raw is None:
        return attrs
    if not isinstance(raw, dict):
        raise CorpusError(f"{where}: attrs must be an object")
    for fam_name, label in raw.items():
        fam = schema.family(fam_name)
        attrs[schema.family_index(fam_name)] = fam.label_id(label)
    return attrs


def iter_corpus_records(path):
    """Yield (line_number, record) for each non-blank corpus line."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc})")
            if not isinstance(record, dict) or "utterances" not in record:
                raise CorpusError(f"{path}:{lineno}: missing 'utterances'")
            yield lineno, record


def corpus_token_seqs(path):
    """Token sequences of every utterance in the file (for vocab building)."""
    for _, record in iter_corpus_records(path):
        for utt in record["utterances"]:
            yield tokenize(utt.get("text", ""))


def load_corpus(path, schema: AttributeSchema,
                vocab: Vocabulary | None = None,
                vocab_cap: int | None = None) -> tuple[list[Dialog], Vocabulary]:
    """Load dialogs; with vocab None, build one from the file first.

    Tokens map through the vocabulary with UNK fallback; utterances with no
    "attrs" field get the all-unknown assignment.
    """
    if vocab is None:
        cap = vocab_cap if vocab_cap is not None else 10 ** 9
        vocab = build_vocab(corpus_token_seqs(path), cap)
    dialogs = []
    for lineno, record in iter_corpus_records(path):
        utterances = []
        for j, utt in enumerate(record["utterances"]):
            if "text" not in utt:
                raise CorpusError(f"{path}:{lineno}: utterance {j} missing 'text'")
            token_ids = vocab.encode_text(utt["text"])
            attrs = _parse_attrs(utt.get("attrs"), schema,
                                 f"{path}:{lineno} utterance {j}")
            utterances.append(Utterance(token_ids=token_ids, attrs=attrs))
        if len(utterances) < 2:
            raise CorpusError(f"{path}:{lineno}: dialog has fewer than 2 utterances")
        dialogs.append(Dialog(utterances=utterances))
    return dialogs, vocab


def save_corpus(dialogs: list[Dialog], schema: AttributeSchema,
                vocab: Vocabulary, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for dialog in dialogs:
            utts = []
            for utt in dialog.utterances:
                entry: dict = {"text": vocab.decode(utt.token_ids)}
                attrs = {
                    fam.name: fam.labels[utt.attrs[i]]
                    for i, fam in enumerate(schema.families)
                    if utt.attrs[i] != fam.unknown_id
                }
                if attrs:
                    entry["attrs"] = attrs
                utts.append(entry)
            fh.write(json.dumps({"utterances": utts}, ensure_ascii=False) + "\n")


@dataclass
class DullSet:
    """Token-id sequences of dull phrases with their token counts."""

    utterances: list[list[int]]
    counts: list[int]
    texts: list[str]

    def __len__(self) -> int:
        return len(self.utterances)


def load_dull_set(path, vocab: Vocabulary) -> DullSet:
    """One phrase per line, tokenized exactly like corpus text (no EOS)."""
    utterances, counts, texts = [], [], []
    skipped_blank = 0
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        toks = tokenize(line)
        if not toks:
            skipped_blank += 1
            continue
        ids = [vocab.encode_token(t) for t in toks]
        utterances.append(ids)
        counts.append(len(ids))
        texts.append(" ".join(toks))
    if skipped_blank:
        import warnings
        warnings.warn(f"{path}: skipped {skipped_blank} blank dull-set lines")
    if not utterances:
        raise CorpusError(f"{path}: dull-set file has no utterances")
    return DullSet(utterances=utterances, counts=counts, texts=texts)


def truncate_labels(dialogs: list[Dialog], schema: AttributeSchema,
                    family: str, top_k: int,
                    others_label: str = "others") -> tuple[list[Dialog],
                                                           AttributeSchema]:
    """Keep a family's top_k most frequent labels; the rest fold into an
    "others" bucket.

    Frequencies count gold (non-unknown) labels across the corpus; ties
    break lexicographically. The bucket is always added so the family's
    label count depends only on top_k, not on the corpus. Returns remapped
    dialog copies and the new schema; utterances keep their unknown labels.
    """
    if top_k < 1:
        raise CorpusError("top_k must be at least 1")
    fam = schema.family(family)
    fi = schema.family_index(family)
    counts = Counter()
    for dialog in dialogs:
        for utt in dialog.utterances:
            if utt.attrs[fi] != fam.unknown_id:
                counts[fam.labels[utt.attrs[fi]]] += 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept_names = {name for name, _ in ranked[:top_k]}
    kept = [l for l in fam.labels[:-1] if l in kept_names]
    if others_label in kept:
        raise CorpusError(f"label {others_label!r} already exists in "
                          f"family {family!r}")
    new_family = AttributeFamily(family, kept + [others_label])
    new_schema = AttributeSchema([
        new_family if f.name == family else f for f in schema.families
    ])
    others_id = new_family.label_id(others_label)
    remap = {}
    for old_id, label in enumerate(fam.labels[:-1]):
        remap[old_id] = new_family.label_id(label) if label in kept_names \
            else others_id
    remap[fam.unknown_id] = new_family.unknown_id

    out = []
    for dialog in dialogs:
        utterances = [
            Utterance(token_ids=list(u.token_ids),
                      attrs=[remap[a] if i == fi else a
                             for i, a in enumerate(u.attrs)])
            for u in dialog.utterances
        ]
        out.append(Dialog(utterances=utterances))
    return out, new_schema


# ---------------------------------------------------------------------------
# synthetic corpora


def _normalize_text(text: str) -> str:
    return " ".join(tokenize(text))


def _check_row(probs: dict, where: str) -> None:
    total = sum(probs.values())
    if abs(total - 1.0) > _ROW_TOL:
        raise CorpusError(f"{where}: probabilities sum to {total!r}, not 1")
    if any(p < 0 for p in probs.values()):
        raise CorpusError(f"{where}: negative probability")


class CorpusGenerator:
    """Ground-truth tables behind a synthetic corpus.

    Per family, labels follow P(label_t | label_{t-1}, label_{t-2}) with
    'unknown' standing in for missing history. Utterance tokens follow a
    per-label template distribution keyed by one designated family.
    """

    def __init__(self, config: dict):
        self.schema = AttributeSchema.from_dict(config)
        if self.schema.k == 0:
            raise CorpusError("synthesis needs at least one attribute family")
        self.num_dialogs = int(config["num_dialogs"])
        self.length_dist = {int(k): float(v)
                            for k, v in config["dialog_length"].items()}
        _check_row(self.length_dist, "dialog_length")
        if min(self.length_dist) < 2:
            raise CorpusError("dialog lengths must be at least 2")

        self.transitions: dict[str, dict[tuple[str, str], dict[str, float]]] = {}
        for fam in self.schema.families:
            raw = config["transitions"].get(fam.name)
            if raw is None:
                raise CorpusError(f"no transition table for family {fam.name!r}")
            table = {}
            for key, row in raw.items():
                l1, l2 = key.split("|")
                _check_row(row, f"transitions[{fam.name}][{key}]")
                for label in row:
                    fam.label_id(label)
                table[(l1, l2)] = dict(row)
            self.transitions[fam.name] = table

        tmpl = config["templates"]
        self.template_family = tmpl["family"]
        fam = self.schema.family(self.template_family)
        self.templates: dict[str, list[tuple[str, float]]] = {}
        for label, entries in tmpl["by_label"].items():
            fam.label_id(label)
            row = {_normalize_text(text): float(p) for text, p in entries}
            _check_row(row, f"templates[{label}]")
            self.templates[label] = sorted(row.items())

    @classmethod
    def from_file(cls, path) -> "CorpusGenerator":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    # -- table lookups ------------------------------------------------------

    def _row(self, family: str, prev1: str, prev2: str) -> dict[str, float]:
        table = self.transitions[family]
        key = (prev1, prev2)
        if key not in table:
            raise CorpusError(
                f"family {family!r}: no transition row for history {key}")
        return table[key]

    def transition_prob(self, family: str, label: str, prev1: str, prev2: str) -> float:
        return self._row(family, prev1, prev2).get(label, 0.0)

    def template_prob(self, label: str, text: str) -> float:
        for t, p in self.templates.get(label, []):
            if t == _normalize_text(text):
                return p
        return 0.0

    # -- sampling -----------------------------------------------------------

    def sample_label(self, family: str, prev1: str, prev2: str,
                     rng: np.random.Generator) -> str:
        row = self._row(family, prev1, prev2)
        labels = sorted(row)
        probs = np.array([row[l] for l in labels])
        return labels[rng.choice(len(labels), p=probs / probs.sum())]

    def sample_template(self, label: str, rng: np.random.Generator) -> str:
        entries = self.templates.get(label)
        if not entries:
            raise CorpusError(f"no templates for label {label!r}")
        probs = np.array([p for _, p in entries])
        return entries[rng.choice(len(entries), p=probs / probs.sum())][0]

    def sample_length(self, rng: np.random.Generator) -> int:
        lengths = sorted(self.length_dist)
        probs = np.array([self.length_dist[n] for n in lengths])
        return lengths[rng.choice(len(lengths), p=probs / probs.sum())]

    def sample_raw_dialog(self, rng: np.random.Generator) -> list[tuple[dict, str]]:
        """One dialog as [(labels_by_family, text), ...]."""
        n = self.sample_length(rng)
        history: dict[str, list[str]] = {f.name: [] for f in self.schema.families}
        out = []
        for _ in range(n):
            labels = {}
            for fam in self.schema.families:
                past = history[fam.name]
                prev1 = past[-1] if len(past) >= 1 else UNKNOWN_LABEL
                prev2 = past[-2] if len(past) >= 2 else UNKNOWN_LABEL
                labels[fam.name] = self.sample_label(fam.name, prev1, prev2, rng)
                history[fam.name].append(labels[fam.name])
            text = self.sample_template(labels[self.template_family], rng)
            out.append((labels, text))
        return out

    # -- exact likelihood ---------------------------------------------------

    def dialog_log_likelihood(self, raw_dialog: list[tuple[dict, str]]) -> float:
        """Exact log-probability of a sampled dialog under the tables."""
        logp = 0.0
        history: dict[str, list[str]] = {f.name: [] for f in self.schema.families}
        for labels, text in raw_dialog:
            for fam in self.schema.families:
                past = history[fam.name]
                prev1 = past[-1] if len(past) >= 1 else UNKNOWN_LABEL
                prev2 = past[-2] if len(past) >= 2 else UNKNOWN_LABEL
                p = self.transition_prob(fam.name, labels[fam.name], prev1, prev2)
                logp += np.log(p)
                history[fam.name].append(labels[fam.name])
            logp += np.log(self.template_prob(labels[self.template_family], text))
        logp += np.log(self.length_dist[len(raw_dialog)])
        return float(logp)

    def template_token_seqs(self):
        for entries in self.templates.values():
            for text, _ in entries:
                yield tokenize(text)


@dataclass
class SynthesisResult:
    dialogs: list[Dialog]
    raw_dialogs: list[list[tuple[dict, str]]]
    vocab: Vocabulary
    schema: AttributeSchema
    generator: CorpusGenerator


def synthesize_corpus(config: dict | CorpusGenerator, seed: int) -> SynthesisResult:
    """Sample a corpus exactly from the given tables, deterministically."""
    gen = config if isinstance(config, CorpusGenerator) else CorpusGenerator(config)
    rng = np.random.default_rng(seed)
    vocab = build_vocab(gen.template_token_seqs(), cap=10 ** 9)
    dialogs, raws = [], []
    for _ in range(gen.num_dialogs):
        raw = gen.sample_raw_dialog(rng)
        utterances = []
        for labels, text in raw:
            attrs = [fam.label_id(labels[fam.name]) for fam in gen.schema.families]
            utterances.append(Utterance(token_ids=vocab.encode_text(text),
                                        attrs=attrs))
        dialogs.append(Dialog(utterances=utterances))
        raws.append(raw)
    return SynthesisResult(dialogs=dialogs, raw_dialogs=raws, vocab=vocab,
                           schema=gen.schema, generator=gen)
