"""The attribute-conditional hierarchical dialog model.

A token-level GRU encodes each context utterance; an utterance-level GRU
summarizes them into a context vector s; a single-layer GRU over the
context's attribute labels yields an attribute-history vector. One head per
family predicts the next utterance's label from [s; history]. Generation
conditions every decoder step on c = [s; attr embeddings of the chosen
labels], and the decoder's initial hidden state is a learned affine map
of s.

All model entry points accept batches; the single-example operations are
the batch-of-one case. Batch tensors are right-padded and masked so PAD
never contributes to any loss or hidden state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import Tensor
from .corpus import EOS, SOS, AttributeSchema, Dialog, Utterance


@dataclass
class ModelConfig:
    """Dimensions and schema for a dialog model instance."""

    vocab_size: int
    schema: AttributeSchema
    token_embed_dim: int = 24
    encoder_hidden: int = 32
    decoder_hidden: int = 32
    encoder_layers: int = 1
    decoder_layers: int = 1
    attr_embed_dims: dict[str, int] = field(default_factory=dict)
    attr_rnn_hidden: int = 16
    attr_head_hidden: int = 32
    dropout: float = 0.3
    context_window: int = 2

    def __post_init__(self):
        for fam in self.schema.families:
            self.attr_embed_dims.setdefault(fam.name, 16)
        extra = set(self.attr_embed_dims) - {f.name for f in self.schema.families}
        if extra:
            raise ValueError(f"attr_embed_dims for unknown families: {extra}")
        dims = [self.vocab_size, self.token_embed_dim, self.encoder_hidden,
                self.decoder_hidden, self.encoder_layers, self.decoder_layers,
                self.attr_rnn_hidden, self.attr_head_hidden]
        if any(d <= 0 for d in dims) or any(
                d <= 0 for d in self.attr_embed_dims.values()):
            raise ValueError("all model dimensions must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def attr_dim_total(self) -> int:
        return sum(self.attr_embed_dims[f.name] for f in self.schema.families)

    @property
    def conditioning_dim(self) -> int:
        return self.encoder_hidden + self.attr_dim_total

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "schema": self.schema.to_dict(),
            "token_embed_dim": self.token_embed_dim,
            "encoder_hidden": self.encoder_hidden,
            "decoder_hidden": self.decoder_hidden,
            "encoder_layers": self.encoder_layers,
            "decoder_layers": self.decoder_layers,
            "attr_embed_dims": dict(self.attr_embed_dims),
            "attr_rnn_hidden": self.attr_rnn_hidden,
            "attr_head_hidden": self.attr_head_hidden,
            "dropout": self.dropout,
            "context_window": self.context_window,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["schema"] = AttributeSchema.from_dict(d["schema"])
        return cls(**d)


@dataclass
class ContextState:
    """Summary of the dialog prefix: context vector and attribute history."""

    s: Tensor
    attr_history: Tensor
    batch: int


@dataclass
class ConditioningVector:
    """c = [s; attribute embeddings], with recoverable segment offsets."""

    c: Tensor
    s: Tensor
    segments: list[Tensor]
    offsets: list[int]


@dataclass
class Batch:
    """Padded context/target arrays; PAD positions carry zero mask weight."""

    ctx_tokens: np.ndarray     # int64 [B, W, L]
    ctx_tok_keep: np.ndarray   # float [B, W, L]
    ctx_utt_keep: np.ndarray   # float [B, W]
    ctx_attrs: np.ndarray      # int64 [B, W, K]
    tgt_in: np.ndarray         # int64 [B, T], starts with SOS
    tgt_out: np.ndarray        # int64 [B, T], ends with EOS per row
    tgt_mask: np.ndarray       # bool  [B, T]
    tgt_attrs: np.ndarray      # int64 [B, K]
    tgt_attr_known: np.ndarray  # bool [B, K]

    @property
    def size(self) -> int:
        return self.ctx_tokens.shape[0]

    @property
    def token_count(self) -> int:
        return int(self.tgt_mask.sum())


def iter_examples(dialogs: Sequence[Dialog], window: int):
    """Every (dialog, m) pair with m >= 2 as (context utterances, target)."""
    for dialog in dialogs:
        for m in range(2, len(dialog) + 1):
            lo = max(0, (m - 1) - window)
            yield dialog.utterances[lo:m - 1], dialog.utterances[m - 1]


def build_batch(examples: list[tuple[list[Utterance], Utterance]],
                schema: AttributeSchema) -> Batch:
    """Pack (context, target) examples into padded arrays."""
    if not examples:
        raise ValueError("cannot build an empty batch")
    b = len(examples)
    k = schema.k
    w = max(len(ctx) for ctx, _ in examples)
    l = max((len(u.token_ids) for ctx, _ in examples for u in ctx), default=1)
    t = max(len(tgt.token_ids) for _, tgt in examples)

    ctx_tokens = np.zeros((b, w, l), dtype=np.int64)
    ctx_tok_keep = np.zeros((b, w, l))
    ctx_utt_keep = np.zeros((b, w))
    ctx_attrs = np.zeros((b, w, k), dtype=np.int64)
    for fi, fam in enumerate(schema.families):
        ctx_attrs[:, :, fi] = fam.unknown_id
    tgt_in = np.zeros((b, t), dtype=np.int64)
    tgt_out = np.zeros((b, t), dtype=np.int64)
    tgt_mask = np.zeros((b, t), dtype=bool)
    tgt_attrs = np.zeros((b, k), dtype=np.int64)
    tgt_attr_known = np.zeros((b, k), dtype=bool)

    for i, (ctx, tgt) in enumerate(examples):
        for j, utt in enumerate(ctx):
            ids = utt.token_ids
            ctx_tokens[i, j, :len(ids)] = ids
            ctx_tok_keep[i, j, :len(ids)] = 1.0
            ctx_utt_keep[i, j] = 1.0
            ctx_attrs[i, j, :] = utt.attrs
        ids = tgt.token_ids
        if not ids or ids[-1] != EOS:
            raise ValueError("target utterances must be EOS-terminated")
        tgt_in[i, 0] = SOS
        tgt_in[i, 1:len(ids)] = ids[:-1]
        tgt_out[i, :len(ids)] = ids
        tgt_mask[i, :len(ids)] = True
        for fi, fam in enumerate(schema.families):
            tgt_attrs[i, fi] = tgt.attrs[fi]
            tgt_attr_known[i, fi] = tgt.attrs[fi] != fam.unknown_id
    return Batch(ctx_tokens, ctx_tok_keep, ctx_utt_keep, ctx_attrs,
                 tgt_in, tgt_out, tgt_mask, tgt_attrs, tgt_attr_known)


def _tile_mask(column: np.ndarray, dim: int) -> Tensor:
    return Tensor(np.repeat(column[:, None], dim, axis=1))


class DialogModel:
    """Parameter container plus every forward operation of the model."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None,
                 init_seed: int | None = None):
        if rng is None:
            init_seed = 0 if init_seed is None else init_seed
            rng = np.random.default_rng(init_seed)
        self.config = config
        self.init_seed = init_seed
        c = config

        self.tok_emb = layers.init_embedding(rng, c.vocab_size, c.token_embed_dim)
        self.enc_tok = layers.init_gru(rng, c.token_embed_dim, c.encoder_hidden,
                                       c.encoder_layers)
        self.enc_utt = layers.init_gru(rng, c.encoder_hidden, c.encoder_hidden,
                                       c.encoder_layers)
        self.attr_emb = {
            fam.name: layers.init_embedding(rng, fam.num_labels,
                                            c.attr_embed_dims[fam.name])
            for fam in c.schema.families
        }
        self.attr_rnn = None
        if c.schema.k > 0:
            self.attr_rnn = layers.init_gru(rng, c.attr_dim_total,
                                            c.attr_rnn_hidden, 1)
        head_in = c.encoder_hidden + (c.attr_rnn_hidden if c.schema.k else 0)
        self.attr_heads = {
            fam.name: layers.init_mlp(rng, [head_in, c.attr_head_hidden,
                                            fam.num_known])
            for fam in c.schema.families
        }
        self.dec_init = [
            (ad.parameter(layers.glorot_init(rng, c.encoder_hidden, c.decoder_hidden)),
             ad.parameter(np.zeros(c.decoder_hidden)))
            for _ in range(c.decoder_layers)
        ]
        self.decoder = layers.init_gru(
            rng, c.token_embed_dim + c.conditioning_dim, c.decoder_hidden,
            c.decoder_layers)
        self.out_w = ad.parameter(layers.glorot_init(rng, c.decoder_hidden,
                                                     c.vocab_size))
        self.out_b = ad.parameter(np.zeros(c.vocab_size))

    # -- parameter bookkeeping ----------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {"tok_emb": self.tok_emb}
        out.update(self.enc_tok.named("enc_tok"))
        out.update(self.enc_utt.named("enc_utt"))
        for name, emb in self.attr_emb.items():
            out[f"attr_emb.{name}"] = emb
        if self.attr_rnn is not None:
            out.update(self.attr_rnn.named("attr_rnn"))
        for name, mlp in self.attr_heads.items():
            out.update(mlp.named(f"attr_head.{name}"))
        for i, (w, b) in enumerate(self.dec_init):
            out[f"dec_init.l{i}.w"] = w
            out[f"dec_init.l{i}.b"] = b
        out.update(self.decoder.named("dec"))
        out["out.w"] = self.out_w
        out["out.b"] = self.out_b
        return out

    def policy_parameter_names(self) -> list[str]:
        """Parameters of the attribute-selection policy: encoders, attribute
        machinery, and prediction heads; the decoder side is excluded."""
        keep = ("tok_emb", "enc_tok", "enc_utt", "attr_emb", "attr_rnn",
                "attr_head")
        return [n for n in self.parameters() if n.split(".")[0] in keep]

    def zero_grads(self) -> None:
        ad.zero_grads(self.parameters())

    # -- context encoding -----------------------------------------------------

    def _encode_utterance_tokens(self, tokens: np.ndarray, keep: np.ndarray,
                                 training: bool, rng) -> Tensor:
        """tokens[B, L] -> final top hidden of the token-level GRU, [B, H]."""
        b, l = tokens.shape
        h = self.config.encoder_hidden
        xs = [ad.lookup(self.tok_emb, tokens[:, t]) for t in range(l)]
        masks = [_tile_mask(keep[:, t], h) for t in range(l)]
        _, final = layers.gru_sequence(
            xs, None, self.enc_tok, dropout_rate=self.config.dropout,
            training=training, rng=rng, step_masks=masks)
        return final[-1]

    def encode_context_batch(self, batch: Batch, training: bool = False,
                             rng: np.random.Generator | None = None) -> ContextState:
        b, w, _ = batch.ctx_tokens.shape
        h = self.config.encoder_hidden
        utt_vecs = [
            self._encode_utterance_tokens(batch.ctx_tokens[:, j, :],
                                          batch.ctx_tok_keep[:, j, :],
                                          training, rng)
            for j in range(w)
        ]
        utt_masks = [_tile_mask(batch.ctx_utt_keep[:, j], h) for j in range(w)]
        _, final = layers.gru_sequence(
            utt_vecs, None, self.enc_utt, dropout_rate=self.config.dropout,
            training=training, rng=rng, step_masks=utt_masks)
        s = final[-1]

        if self.config.schema.k == 0:
            return ContextState(s=s, attr_history=Tensor(np.zeros((b, 0))), batch=b)
        attr_inputs = []
        for j in range(w):
            segs = [ad.lookup(self.attr_emb[fam.name], batch.ctx_attrs[:, j, fi])
                    for fi, fam in enumerate(self.config.schema.families)]
            attr_inputs.append(segs[0] if len(segs) == 1 else ad.concat(segs, axis=1))
        attr_masks = [_tile_mask(batch.ctx_utt_keep[:, j],
                                 self.config.attr_rnn_hidden) for j in range(w)]
        _, attr_final = layers.gru_sequence(attr_inputs, None, self.attr_rnn,
                                            step_masks=attr_masks)
        return ContextState(s=s, attr_history=attr_final[-1], batch=b)

    def encode_dialog_context(self, prefix: Sequence[Utterance],
                              training: bool = False,
                              rng: np.random.Generator | None = None) -> ContextState:
        """Single-example surface: encode U_1..U_{m-1} (must be non-empty)."""
        if not prefix:
            raise ValueError("dialog context must contain at least one utterance")
        fake_target = Utterance(token_ids=[EOS], attrs=list(
            self.config.schema.unknown_assignment()))
        batch = build_batch([(list(prefix), fake_target)], self.config.schema)
        return self.encode_context_batch(batch, training=training, rng=rng)

    # -- attribute prediction -------------------------------------------------

    def attribute_logits(self, ctx: ContextState) -> dict[str, Tensor]:
        feat = (ad.concat([ctx.s, ctx.attr_history], axis=1)
                if self.config.schema.k else ctx.s)
        return {fam.name: layers.mlp_forward(feat, self.attr_heads[fam.name])
                for fam in self.config.schema.families}

    def predict_next_attributes(self, ctx: ContextState) -> list[np.ndarray]:
        """Per family, a categorical over the known labels (unknown excluded)."""
        with ad.no_grad():
            logits = self.attribute_logits(ctx)
        return [ad.stable_softmax(logits[f.name].data)
                for f in self.config.schema.families]

    def choose_attributes(self, ctx: ContextState, mode: str = "greedy",
                          rng: np.random.Generator | None = None) -> np.ndarray:
        """Pick one label id per family per batch row; [B, K] ints."""
        dists = self.predict_next_attributes(ctx)
        b = ctx.batch
        out = np.zeros((b, self.config.schema.k), dtype=np.int64)
        for fi, dist in enumerate(dists):
            if mode == "greedy":
                out[:, fi] = dist.argmax(axis=1)
            elif mode == "sample":
                for i in range(b):
                    out[i, fi] = rng.choice(dist.shape[1], p=dist[i] / dist[i].sum())
            else:
                raise ValueError(f"unknown attribute selection mode {mode!r}")
        return out

    # -- conditioning ----------------------------------------------------------

    def build_conditioning_vector(self, ctx: ContextState,
                                  assignment) -> ConditioningVector:
        """assignment: one label id per family ([K] or [B, K])."""
        a = np.asarray(assignment, dtype=np.int64)
        if a.ndim == 1:
            a = np.repeat(a[None, :], ctx.batch, axis=0)
        if a.shape != (ctx.batch, self.config.schema.k):
            raise ValueError(f"assignment shape {a.shape} does not match "
                             f"batch {ctx.batch} and K {self.config.schema.k}")
        segments = [ctx.s]
        offsets = [0, self.config.encoder_hidden]
        for fi, fam in enumerate(self.config.schema.families):
            if a[:, fi].min() < 0 or a[:, fi].max() >= fam.num_labels:
                raise ValueError(f"invalid label id for family {fam.name!r}")
            seg = ad.lookup(self.attr_emb[fam.name], a[:, fi])
            segments.append(seg)
            offsets.append(offsets[-1] + seg.shape[1])
        c = segments[0] if len(segments) == 1 else ad.concat(segments, axis=1)
        return ConditioningVector(c=c, s=ctx.s, segments=segments, offsets=offsets)

    # -- decoding ----------------------------------------------------------------

    def _decoder_initial_hidden(self, s: Tensor) -> list[Tensor]:
        return [ad.add_bias(ad.matmul(s, w), b) for (w, b) in self.dec_init]

    def _decoder_logits(self, cond: ConditioningVector, tgt_in: np.ndarray,
                        training: bool, rng) -> list[Tensor]:
        hidden = self._decoder_initial_hidden(cond.s)
        logits = []
        for t in range(tgt_in.shape[1]):
            emb = ad.lookup(self.tok_emb, tgt_in[:, t])
            inp = ad.concat([emb, cond.c], axis=1)
            for l, layer in enumerate(self.decoder.layers):
                if l > 0 and training and self.config.dropout > 0.0:
                    inp = ad.dropout(inp, self.config.dropout, training, rng)
                hidden[l] = layers.gru_step(inp, hidden[l], layer)
                inp = hidden[l]
            logits.append(ad.add_bias(ad.matmul(hidden[-1], self.out_w), self.out_b))
        return logits

    def decode_batch_nll(self, cond: ConditioningVector, tgt_in, tgt_out, tgt_mask,
                         training: bool = False, rng=None,
                         per_example_mean: bool = True):
        """Teacher-forced NLL over a padded batch.

        Returns (loss Tensor, per-token NLL array [B, T] with zeros at PAD).
        With per_example_mean the loss is the batch mean of per-example
        token-mean NLLs; otherwise the plain mean over all unmasked tokens.
        """
        b, t = tgt_in.shape
        logits = self._decoder_logits(cond, tgt_in, training, rng)
        stacked = logits[0] if t == 1 else ad.concat(logits, axis=0)
        flat_targets = tgt_out.T.reshape(-1)
        flat_mask = tgt_mask.T.reshape(-1)
        if per_example_mean:
            tokens_per_example = tgt_mask.sum(axis=1)
            weights = np.where(
                flat_mask,
                1.0 / (np.tile(tokens_per_example, t) * b),
                0.0)
            loss, probs = ad.softmax_cross_entropy(stacked, flat_targets,
                                                   weights=weights)
        else:
            loss, probs = ad.softmax_cross_entropy(stacked, flat_targets,
                                                   mask=flat_mask)
        rows = np.arange(b * t)
        nll_flat = np.where(flat_mask,
                            -np.log(probs.data[rows, flat_targets]), 0.0)
        return loss, nll_flat.reshape(t, b).T

    def decode_utterance_nll(self, cond: ConditioningVector, target: Utterance,
                             training: bool = False, rng=None):
        """Mean per-token NLL of one EOS-terminated target, plus per-token NLLs."""
        ids = list(target.token_ids) if isinstance(target, Utterance) else list(target)
        if not ids or ids[-1] != EOS:
            raise ValueError("target must be non-empty and EOS-terminated")
        n = len(ids)
        tgt_in = np.array([[SOS] + ids[:-1]], dtype=np.int64)
        tgt_out = np.array([ids], dtype=np.int64)
        mask = np.ones((1, n), dtype=bool)
        loss, nll = self.decode_batch_nll(cond, tgt_in, tgt_out, mask,
                                          training=training, rng=rng)
        return loss, nll[0]

    def sequence_token_nlls(self, cond: ConditioningVector,
                            token_ids: Sequence[int]) -> np.ndarray:
        """Teacher-forced per-token NLLs of exactly the given tokens.

        Unlike decode_utterance_nll this accepts sequences without a
        terminal EOS (dull-set phrases, truncated enumeration outcomes) and
        runs tape-free.
        """
        ids = list(token_ids)
        if not ids:
            raise ValueError("empty token sequence")
        with ad.no_grad():
            tgt_in = np.array([[SOS] + ids[:-1]], dtype=np.int64)
            logits = self._decoder_logits(cond, tgt_in, training=False, rng=None)
            nlls = []
            for t, lg in enumerate(logits):
                probs = ad.stable_softmax(lg.data[0])
                nlls.append(-np.log(probs[ids[t]]))
        return np.array(nlls)

    def step_distributions(self, cond: ConditioningVector,
                           prefix_ids: Sequence[int]) -> np.ndarray:
        """Next-token distribution after teacher-forcing the given prefix."""
        with ad.no_grad():
            tgt_in = np.array([[SOS] + list(prefix_ids)], dtype=np.int64)
            logits = self._decoder_logits(cond, tgt_in, training=False, rng=None)
            return ad.stable_softmax(logits[-1].data[0])

    # -- generation -----------------------------------------------------------

    def generate_batch(self, cond: ConditioningVector, mode: str = "greedy",
                       max_len: int = 20,
                       rng: np.random.Generator | None = None) -> list[list[int]]:
        if max_len < 1:
            raise ValueError("max_len must be at least 1")
        if mode not in ("greedy", "sample"):
            raise ValueError(f"unknown generation mode {mode!r}")
        b = cond.s.shape[0]
        with ad.no_grad():
            hidden = self._decoder_initial_hidden(cond.s)
            current = np.full(b, SOS, dtype=np.int64)
            done = np.zeros(b, dtype=bool)
            out: list[list[int]] = [[] for _ in range(b)]
            for _ in range(max_len):
                emb = ad.lookup(self.tok_emb, current)
                inp = ad.concat([emb, cond.c], axis=1)
                for l, layer in enumerate(self.decoder.layers):
                    hidden[l] = layers.gru_step(inp, hidden[l], layer)
                    inp = hidden[l]
                logits = ad.add_bias(ad.matmul(hidden[-1], self.out_w), self.out_b)
                probs = ad.stable_softmax(logits.data)
                if mode == "greedy":
                    nxt = probs.argmax(axis=1)
                else:
                    nxt = np.array([rng.choice(probs.shape[1],
                                               p=probs[i] / probs[i].sum())
                                    for i in range(b)])
                for i in range(b):
                    if not done[i]:
                        out[i].append(int(nxt[i]))
                        if nxt[i] == EOS:
                            done[i] = True
                if done.all():
                    break
                current = nxt
        return out

    def generate_utterance(self, cond: ConditioningVector, mode: str = "greedy",
                           max_len: int = 20,
                           rng: np.random.Generator | None = None) -> list[int]:
        return self.generate_batch(cond, mode=mode, max_len=max_len, rng=rng)[0]

    def respond(self, prefix: Sequence[Utterance], mode: str = "greedy",
                max_len: int = 20, rng: np.random.Generator | None = None,
                attr_mode: str = "greedy",
                attr_overrides: dict[str, int] | None = None):
        """Full inference: predict attributes, condition, generate.

        Returns (token ids, chosen label id per family).
        """
        ctx = self.encode_dialog_context(prefix)
        if self.config.schema.k:
            chosen = self.choose_attributes(ctx, mode=attr_mode, rng=rng)[0]
        else:
            chosen = np.zeros(0, dtype=np.int64)
        if attr_overrides:
            for fam_name, label_id in attr_overrides.items():
                chosen[self.config.schema.family_index(fam_name)] = label_id
        cond = self.build_conditioning_vector(ctx, chosen)
        tokens = self.generate_utterance(cond, mode=mode, max_len=max_len, rng=rng)
        return tokens, chosen

    # -- joint objective --------------------------------------------------------

    def attribute_loss(self, ctx: ContextState, tgt_attrs: np.ndarray,
                       tgt_attr_known: np.ndarray,
                       per_example_weights: np.ndarray | None = None) -> Tensor | None:
        """Sum over families of masked attribute NLL; None when K = 0.

        The per-example contribution is the plain sum of known-family NLLs;
        rows with unknown gold labels contribute nothing for that family.
        """
        if self.config.schema.k == 0:
            return None
        b = ctx.batch
        base = per_example_weights if per_example_weights is not None \
            else np.full(b, 1.0 / b)
        logits = self.attribute_logits(ctx)
        total: Tensor | None = None
        for fi, fam in enumerate(self.config.schema.families):
            weights = np.where(tgt_attr_known[:, fi], base, 0.0)
            if not weights.any():
                continue
            targets = np.where(tgt_attr_known[:, fi], tgt_attrs[:, fi], 0)
            loss, _ = ad.softmax_cross_entropy(logits[fam.name], targets,
                                               weights=weights)
            total = loss if total is None else ad.add(total, loss)
        return total

    def batch_joint_loss(self, batch: Batch, training: bool = False, rng=None):
        """Batch-mean of per-example joint NLL (attribute sum + token mean).

        Returns (loss Tensor, dict with token NLL sum and token count for
        perplexity bookkeeping).
        """
        ctx = self.encode_context_batch(batch, training=training, rng=rng)
        cond = self.build_conditioning_vector(ctx, batch.tgt_attrs)
        token_loss, per_token = self.decode_batch_nll(
            cond, batch.tgt_in, batch.tgt_out, batch.tgt_mask,
            training=training, rng=rng, per_example_mean=True)
        attr_loss = self.attribute_loss(ctx, batch.tgt_attrs, batch.tgt_attr_known)
        loss = token_loss if attr_loss is None else ad.add(token_loss, attr_loss)
        stats = {
            "token_nll_sum": float(per_token.sum()),
            "token_count": batch.token_count,
        }
        return loss, stats

    def joint_nll(self, dialog: Dialog, m: int, window: int | None = None,
                  training: bool = False, rng=None) -> Tensor:
        """Joint NLL of utterance m (1-indexed, m >= 2): attribute terms plus
        the conditional utterance term, with unknown gold labels masked."""
        if not 2 <= m <= len(dialog):
            raise ValueError(f"target index m={m} out of range for dialog "
                             f"of length {len(dialog)}")
        window = self.config.context_window if window is None else window
        lo = max(0, (m - 1) - window)
        prefix = dialog.utterances[lo:m - 1]
        target = dialog.utterances[m - 1]
        batch = build_batch([(prefix, target)], self.config.schema)
        loss, _ = self.batch_joint_loss(batch, training=training, rng=rng)
        return loss
