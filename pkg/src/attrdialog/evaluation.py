"""Evaluation: token perplexity, distinct-n, embedding metrics, generic rates.

Perplexity is exp(total token NLL / total token count) over every
(context, target) example of a split, conditioning on gold attributes by
default. The text metrics are pure functions over token sequences; word
vectors come from a plain text file, one "token v1 v2 ... vd" line each.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .corpus import EOS, Dialog, Vocabulary
from .model import DialogModel, build_batch, iter_examples


def perplexity(model: DialogModel, dialogs: Sequence[Dialog],
               window: int | None = None, attr_source: str = "gold",
               batch_size: int = 64) -> float:
    """exp(mean per-token NLL) over all examples of the split.

    attr_source "gold" conditions on the targets' gold labels; "predicted"
    conditions on the model's own argmax attribute predictions instead.
    """
    if not dialogs:
        raise ValueError("perplexity of an empty split")
    if attr_source not in ("gold", "predicted"):
        raise ValueError(f"unknown attr_source {attr_source!r}")
    window = model.config.context_window if window is None else window
    examples = list(iter_examples(dialogs, window))
    total_nll = 0.0
    total_tokens = 0
    with ad.no_grad():
        for lo in range(0, len(examples), batch_size):
            batch = build_batch(examples[lo:lo + batch_size], model.config.schema)
            ctx = model.encode_context_batch(batch)
            if attr_source == "gold" or model.config.schema.k == 0:
                assignment = batch.tgt_attrs
            else:
                assignment = model.choose_attributes(ctx, mode="greedy")
            cond = model.build_conditioning_vector(ctx, assignment)
            _, per_token = model.decode_batch_nll(
                cond, batch.tgt_in, batch.tgt_out, batch.tgt_mask)
            total_nll += float(per_token.sum())
            total_tokens += batch.token_count
    return float(np.exp(total_nll / total_tokens))


def generate_responses(model: DialogModel, dialogs: Sequence[Dialog],
                       window: int | None = None, mode: str = "greedy",
                       attr_mode: str = "greedy", max_len: int = 20,
                       rng: np.random.Generator | None = None,
                       batch_size: int = 64):
    """Greedy/sampled responses for every example context of a split.

    Returns (responses, references) as token-id lists without EOS.
    """
    window = model.config.context_window if window is None else window
    examples = list(iter_examples(dialogs, window))
    responses: list[list[int]] = []
    references: list[list[int]] = []
    with ad.no_grad():
        for lo in range(0, len(examples), batch_size):
            chunk = examples[lo:lo + batch_size]
            batch = build_batch(chunk, model.config.schema)
            ctx = model.encode_context_batch(batch)
            if model.config.schema.k:
                assignment = model.choose_attributes(ctx, mode=attr_mode, rng=rng)
            else:
                assignment = np.zeros((batch.size, 0), dtype=np.int64)
            cond = model.build_conditioning_vector(ctx, assignment)
            outs = model.generate_batch(cond, mode=mode, max_len=max_len, rng=rng)
            responses.extend([t for t in seq if t != EOS] for seq in outs)
            references.extend(tgt.content_ids() for _, tgt in chunk)
    return responses, references


# ---------------------------------------------------------------------------
# diversity


def distinct_n(responses: Sequence[Sequence], n: int) -> float:
    """Distinct n-grams over total n-grams across all responses."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if not responses:
        raise ValueError("distinct_n of an empty response list")
    seen = set()
    total = 0
    for resp in responses:
        toks = list(resp)
        for i in range(len(toks) - n + 1):
            seen.add(tuple(toks[i:i + n]))
            total += 1
    if total == 0:
        raise ValueError(f"no {n}-grams in any response")
    return len(seen) / total


def generic_response_rate(responses: Sequence[Sequence],
                          phrases: Sequence[Sequence]) -> dict:
    """Per-phrase percentage of responses that start with the phrase.

    A response counts toward every phrase it prefixes; keys are the phrase
    token tuples.
    """
    if not phrases:
        raise ValueError("phrase list must be non-empty")
    out = {}
    n = len(responses)
    for phrase in phrases:
        p = tuple(phrase)
        hits = sum(1 for resp in responses if tuple(resp[:len(p)]) == p)
        out[p] = 100.0 * hits / n if n else 0.0
    return out


# ---------------------------------------------------------------------------
# embedding metrics


def load_word_vectors(path) -> dict[str, np.ndarray]:
    vectors: dict[str, np.ndarray] = {}
    dim = None
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        vec = np.array([float(x) for x in parts[1:]])
        if dim is None:
            dim = vec.size
        elif vec.size != dim:
            raise ValueError(f"{path}:{lineno}: vector dimension mismatch")
        vectors[parts[0]] = vec
    if not vectors:
        raise ValueError(f"{path}: no word vectors")
    return vectors


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def _sequence_vectors(tokens: Sequence[str], vectors: dict[str, np.ndarray],
                      unk: np.ndarray) -> np.ndarray:
    if not tokens:
        raise ValueError("empty token sequence in embedding metrics")
    return np.stack([vectors.get(t, unk) for t in tokens])


def _extrema_vector(mat: np.ndarray) -> np.ndarray:
    # Per dimension: the entry of largest magnitude; ties go positive.
    hi = mat.max(axis=0)
    lo = mat.min(axis=0)
    return np.where(hi >= -lo, hi, lo)


def _greedy_direction(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean([max(_cosine(v, w) for w in b) for v in a]))


@dataclass
class EmbeddingMetrics:
    average: float
    greedy: float
    extrema: float


def embedding_metrics(pairs, word_vectors: dict[str, np.ndarray]) -> EmbeddingMetrics:
    """Average/greedy/extrema cosine scores, averaged over (ref, hyp) pairs.

    Tokens missing from the vector table fall back to the "<unk>" vector,
    or to zeros when no such entry exists.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("embedding metrics need at least one pair")
    dim = len(next(iter(word_vectors.values())))
    unk = word_vectors.get("<unk>", np.zeros(dim))
    averages, greedys, extremas = [], [], []
    for ref, hyp in pairs:
        rv = _sequence_vectors(ref, word_vectors, unk)
        hv = _sequence_vectors(hyp, word_vectors, unk)
        averages.append(_cosine(rv.mean(axis=0), hv.mean(axis=0)))
        greedys.append(0.5 * (_greedy_direction(rv, hv) + _greedy_direction(hv, rv)))
        extremas.append(_cosine(_extrema_vector(rv), _extrema_vector(hv)))
    return EmbeddingMetrics(average=float(np.mean(averages)),
                            greedy=float(np.mean(greedys)),
                            extrema=float(np.mean(extremas)))


# ---------------------------------------------------------------------------
# full report


def evaluate_model(model: DialogModel, dialogs: Sequence[Dialog],
                   vocab: Vocabulary,
                   word_vectors: dict[str, np.ndarray] | None = None,
                   dull_texts: Sequence[str] | None = None,
                   mode: str = "greedy", max_len: int = 20,
                   rng: np.random.Generator | None = None) -> dict:
    """The standard metrics report; always carries the six core keys."""
    report: dict = {"perplexity": perplexity(model, dialogs)}
    responses, references = generate_responses(model, dialogs, mode=mode,
                                               max_len=max_len, rng=rng)
    nonempty = [r for r in responses if r]
    report["distinct1"] = distinct_n(nonempty, 1) if nonempty else 0.0
    report["distinct2"] = (
        distinct_n(nonempty, 2)
        if any(len(r) >= 2 for r in nonempty) else 0.0)
    pairs = [(vocab.tokens_of(ref), vocab.tokens_of(hyp))
             for ref, hyp in zip(references, responses) if ref and hyp]
    if word_vectors is not None and pairs:
        emb = embedding_metrics(pairs, word_vectors)
        report["emb_average"] = emb.average
        report["emb_greedy"] = emb.greedy
        report["emb_extrema"] = emb.extrema
    else:
        report["emb_average"] = report["emb_greedy"] = report["emb_extrema"] = 0.0
    if dull_texts:
        phrases = [tuple(vocab.encode_text(t, add_eos=False)) for t in dull_texts]
        rates = generic_response_rate([tuple(r) for r in responses], phrases)
        report["generic_rates"] = {
            " ".join(vocab.id_to_token[i] for i in phrase): rate
            for phrase, rate in rates.items()
        }
        report["generic_rate_sum"] = float(sum(rates.values()))
    return report
