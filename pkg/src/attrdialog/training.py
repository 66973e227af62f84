"""Supervised MLE training, batching, and checkpoint persistence.

Checkpoints are a single file: one canonical-JSON header line describing
the format version, kind, model configuration, and the byte offset and
shape of every named array, followed by the concatenated raw little-endian
float64 payloads. Save/load round trips are byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import evaluation
from .autodiff import AdamState, NumericalError
from .corpus import Dialog
from .model import Batch, DialogModel, ModelConfig, build_batch, iter_examples

CHECKPOINT_VERSION = 1
KIND_DIALOG_MODEL = "dialog_model"


class CheckpointError(ValueError):
    """Unreadable, truncated, or incompatible checkpoint file."""


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, cause: str):
        super().__init__(f"training diverged at epoch {epoch}, step {step}: {cause}")
        self.epoch = epoch
        self.step = step


@dataclass
class Checkpoint:
    """Versioned named-parameter collection plus configuration."""

    kind: str
    config: dict
    params: dict[str, np.ndarray]
    adam: AdamState | None = None
    rng_seed: int | None = None
    step: int = 0
    format_version: int = CHECKPOINT_VERSION


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    arrays: list[tuple[str, np.ndarray]] = list(ckpt.params.items())
    adam_header = None
    if ckpt.adam is not None:
        a = ckpt.adam
        adam_header = {"lr": a.lr, "beta1": a.beta1, "beta2": a.beta2,
                       "epsilon": a.epsilon, "t": a.t}
        arrays += [(f"adam.m.{n}", v) for n, v in a.m.items()]
        arrays += [(f"adam.v.{n}", v) for n, v in a.v.items()]
    # Canonical payload order keeps save(load(x)) byte-identical.
    arrays.sort(key=lambda kv: kv[0])

    offset = 0
    index = {}
    for name, arr in arrays:
        index[name] = {"offset": offset, "shape": list(arr.shape)}
        offset += arr.size * 8
    header = {
        "format_version": ckpt.format_version,
        "kind": ckpt.kind,
        "config": ckpt.config,
        "rng_seed": ckpt.rng_seed,
        "step": ckpt.step,
        "adam": adam_header,
        "arrays": index,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(blob + b"\n")
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing checkpoint header")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: bad header ({exc})")
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header.get('format_version')!r}, "
            f"expected {CHECKPOINT_VERSION}")
    payload = raw[nl + 1:]
    expected = sum(int(np.prod(meta["shape"])) * 8
                   for meta in header["arrays"].values())
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}")

    arrays = {}
    for name, meta in header["arrays"].items():
        shape = tuple(meta["shape"])
        count = int(np.prod(shape))
        start = meta["offset"]
        arr = np.frombuffer(payload[start:start + count * 8], dtype="<f8")
        arrays[name] = arr.reshape(shape).copy()

    params = {n: a for n, a in arrays.items() if not n.startswith("adam.")}
    adam = None
    if header.get("adam") is not None:
        h = header["adam"]
        adam = AdamState(lr=h["lr"], beta1=h["beta1"], beta2=h["beta2"],
                         epsilon=h["epsilon"], t=h["t"])
        adam.m = {n[len("adam.m."):]: a for n, a in arrays.items()
                  if n.startswith("adam.m.")}
        adam.v = {n[len("adam.v."):]: a for n, a in arrays.items()
                  if n.startswith("adam.v.")}
    return Checkpoint(kind=header["kind"], config=header["config"], params=params,
                      adam=adam, rng_seed=header.get("rng_seed"),
                      step=header.get("step", 0),
                      format_version=header["format_version"])


def checkpoint_from_model(model: DialogModel, adam: AdamState | None = None,
                          rng_seed: int | None = None, step: int = 0) -> Checkpoint:
    return Checkpoint(
        kind=KIND_DIALOG_MODEL,
        config=model.config.to_dict(),
        params={n: p.data.copy() for n, p in model.parameters().items()},
        adam=adam, rng_seed=rng_seed, step=step)


def model_from_checkpoint(ckpt: Checkpoint) -> DialogModel:
    if ckpt.kind != KIND_DIALOG_MODEL:
        raise CheckpointError(f"checkpoint kind {ckpt.kind!r} is not a dialog model")
    config = ModelConfig.from_dict(ckpt.config)
    model = DialogModel(config, rng=np.random.default_rng(0))
    assign_params(model.parameters(), ckpt.params)
    return model


def assign_params(params, stored: dict[str, np.ndarray]) -> None:
    """Copy stored arrays onto a fresh parameter set, names and shapes exact."""
    if set(params) != set(stored):
        missing = sorted(set(params) - set(stored))
        extra = sorted(set(stored) - set(params))
        raise CheckpointError(
            f"parameter name mismatch (missing {missing}, unexpected {extra})")
    for name, p in params.items():
        if stored[name].shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: stored {stored[name].shape}, "
                f"model expects {p.data.shape}")
        p.data[:] = stored[name]


# ---------------------------------------------------------------------------
# batching


def make_batches(dialogs: Sequence[Dialog], batch_size: int, context_window: int,
                 rng: np.random.Generator, schema) -> list[Batch]:
    """Shuffle all (context, target) examples and group them into batches."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    examples = list(iter_examples(dialogs, context_window))
    if not examples:
        raise ValueError("no training examples in corpus")
    order = rng.permutation(len(examples))
    shuffled = [examples[i] for i in order]
    return [build_batch(shuffled[lo:lo + batch_size], schema)
            for lo in range(0, len(shuffled), batch_size)]


def split_dialogs(dialogs: Sequence[Dialog], valid_fraction: float,
                  rng: np.random.Generator):
    order = rng.permutation(len(dialogs))
    n_valid = int(len(dialogs) * valid_fraction)
    valid_idx = set(order[:n_valid].tolist())
    train = [d for i, d in enumerate(dialogs) if i not in valid_idx]
    valid = [d for i, d in enumerate(dialogs) if i in valid_idx]
    return train, valid


# ---------------------------------------------------------------------------
# trainer


@dataclass
class TrainHyper:
    batch_size: int = 32
    lr: float = 1e-4
    max_epochs: int = 30
    patience: int = 10
    clip_norm: float = 5.0
    valid_fraction: float = 0.1


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: DialogModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_valid_ppl: float = float("inf")
    train_dialogs: list[Dialog] = field(default_factory=list)
    valid_dialogs: list[Dialog] = field(default_factory=list)


def train_mle(dialogs: Sequence[Dialog], config: ModelConfig,
              hyper: TrainHyper | None = None, seed: int = 0,
              log=None, model: DialogModel | None = None) -> TrainResult:
    """Epoch loop of Adam over batch-mean joint NLL with early stopping.

    Validation perplexity each epoch comes from evaluation.perplexity on a
    90/10 by-dialog split (the training split doubles as validation when
    the corpus is too small to hold one out). Returns the best-validation
    checkpoint; a fixed seed reproduces the whole trajectory bitwise.
    Passing ``model`` continues training from existing parameters instead
    of a fresh initialization.
    """
    hyper = hyper or TrainHyper()
    rng = np.random.default_rng(seed)
    if model is None:
        model = DialogModel(config, rng=rng, init_seed=seed)
    params = model.parameters()
    adam = AdamState.for_params(params, lr=hyper.lr)
    train_split, valid_split = split_dialogs(dialogs, hyper.valid_fraction, rng)
    if not train_split:
        raise ValueError("training split is empty")
    if not valid_split:
        valid_split = train_split

    result = TrainResult(checkpoint=None, model=model,
                         train_dialogs=train_split, valid_dialogs=valid_split)
    best_params: dict[str, np.ndarray] | None = None
    epochs_since_best = 0
    step = 0
    for epoch in range(hyper.max_epochs):
        batches = make_batches(train_split, hyper.batch_size,
                               config.context_window, rng, config.schema)
        epoch_nll = 0.0
        epoch_examples = 0
        for batch in batches:
            step += 1
            try:
                ad.zero_grads(params)
                loss, _ = model.batch_joint_loss(batch, training=True, rng=rng)
                loss.backward()
            except NumericalError as exc:
                raise TrainingDiverged(epoch, step, str(exc)) from exc
            ad.clip_grad_norm(params, hyper.clip_norm)
            grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data))
                     for n, p in params.items()}
            ad.adam_step(params, grads, adam)
            epoch_nll += loss.item() * batch.size
            epoch_examples += batch.size

        valid_ppl = evaluation.perplexity(model, valid_split,
                                          window=config.context_window)
        record = {"epoch": epoch, "train_nll": epoch_nll / epoch_examples,
                  "valid_ppl": valid_ppl}
        result.history.append(record)
        if log is not None:
            log(record)

        if valid_ppl < result.best_valid_ppl:
            result.best_valid_ppl = valid_ppl
            result.best_epoch = epoch
            best_params = {n: p.data.copy() for n, p in params.items()}
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= hyper.patience:
                break

    if best_params is not None:
        for n, p in params.items():
            p.data[:] = best_params[n]
    result.checkpoint = checkpoint_from_model(model, adam=adam, rng_seed=seed,
                                              step=step)
    return result
