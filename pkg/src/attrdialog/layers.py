"""GRU cells and stacks, embedding tables, and small MLPs.

All layers are functional: parameters live in plain dataclasses of tensors
and every call threads them through explicitly. Inputs are row-major
batches, so a "vector" is a [B, d] tensor with B = 1 for single examples.

Gating convention, fixed once for the whole project:

    r  = sigmoid(Wr x + Ur h + br)
    z  = sigmoid(Wz x + Uz h + bz)
    h~ = tanh(Wh x + Uh (r*h) + bh)
    h' = (1 - z) * h~ + z * h
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, add, add_bias, add_scalar, matmul, mul, scale


def uniform_init(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


def recurrent_init(rng: np.random.Generator, shape, hidden_dim: int) -> np.ndarray:
    return uniform_init(rng, shape, np.sqrt(1.0 / hidden_dim))


def glorot_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return uniform_init(rng, (fan_in, fan_out), bound)


@dataclass
class GruLayerParams:
    """One GRU layer: input/hidden weight blocks and biases per gate."""

    wr: Tensor
    ur: Tensor
    br: Tensor
    wz: Tensor
    uz: Tensor
    bz: Tensor
    wh: Tensor
    uh: Tensor
    bh: Tensor

    @property
    def input_dim(self) -> int:
        return self.wr.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.ur.shape[0]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k)
                for k in ("wr", "ur", "br", "wz", "uz", "bz", "wh", "uh", "bh")}


@dataclass
class GruParams:
    """A stack of GRU layers; layer l consumes layer l-1 outputs."""

    layers: list[GruLayerParams]

    @property
    def hidden_dim(self) -> int:
        return self.layers[0].hidden_dim

    def named(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"{prefix}.l{i}"))
        return out


def init_gru(rng: np.random.Generator, input_dim: int, hidden_dim: int,
             num_layers: int) -> GruParams:
    layers = []
    for l in range(num_layers):
        in_dim = input_dim if l == 0 else hidden_dim
        layers.append(GruLayerParams(
            wr=ad.parameter(recurrent_init(rng, (in_dim, hidden_dim), hidden_dim)),
            ur=ad.parameter(recurrent_init(rng, (hidden_dim, hidden_dim), hidden_dim)),
            br=ad.parameter(np.zeros(hidden_dim)),
            wz=ad.parameter(recurrent_init(rng, (in_dim, hidden_dim), hidden_dim)),
            uz=ad.parameter(recurrent_init(rng, (hidden_dim, hidden_dim), hidden_dim)),
            bz=ad.parameter(np.zeros(hidden_dim)),
            wh=ad.parameter(recurrent_init(rng, (in_dim, hidden_dim), hidden_dim)),
            uh=ad.parameter(recurrent_init(rng, (hidden_dim, hidden_dim), hidden_dim)),
            bh=ad.parameter(np.zeros(hidden_dim)),
        ))
    return GruParams(layers=layers)


def gru_step(x: Tensor, h: Tensor, params: GruLayerParams) -> Tensor:
    """Advance one GRU layer by one step: x[B, in], h[B, hid] -> h'[B, hid]."""
    if x.shape[1] != params.input_dim or h.shape[1] != params.hidden_dim:
        raise ValueError(
            f"gru_step dims: x{x.shape} h{h.shape} vs params "
            f"({params.input_dim}, {params.hidden_dim})")
    r = ad.sigmoid(add_bias(add(matmul(x, params.wr), matmul(h, params.ur)), params.br))
    z = ad.sigmoid(add_bias(add(matmul(x, params.wz), matmul(h, params.uz)), params.bz))
    cand = ad.tanh(add_bias(add(matmul(x, params.wh), matmul(mul(r, h), params.uh)),
                            params.bh))
    one_minus_z = add_scalar(scale(z, -1.0), 1.0)
    return add(mul(one_minus_z, cand), mul(z, h))


def masked_update(h_new: Tensor, h_old: Tensor, keep: Tensor | None) -> Tensor:
    """Carry h_old through where keep is 0 (padding steps in a batch)."""
    if keep is None:
        return h_new
    inv = add_scalar(scale(keep, -1.0), 1.0)
    return add(mul(h_new, keep), mul(h_old, inv))


def zero_hidden(batch: int, hidden_dim: int) -> Tensor:
    return Tensor(np.zeros((batch, hidden_dim)))


def gru_sequence(
    xs: list[Tensor],
    h0: list[Tensor] | None,
    params: GruParams,
    dropout_rate: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
    step_masks: list[Tensor] | None = None,
) -> tuple[list[Tensor], list[Tensor]]:
    """Run the full stack over a sequence of [B, in] inputs.

    Returns (per-step top-layer hiddens, final hiddens per layer). Dropout
    applies between layers only, during training. ``step_masks`` holds one
    [B, hid] keep-mask per step for padded batches; masked steps leave the
    hidden state unchanged.
    """
    if h0 is None:
        batch = xs[0].shape[0] if xs else 1
        h0 = [zero_hidden(batch, layer.hidden_dim) for layer in params.layers]
    if len(h0) != len(params.layers):
        raise ValueError("h0 must hold one vector per layer")
    hidden = list(h0)
    if not xs:
        return [], hidden
    if step_masks is not None and len(step_masks) != len(xs):
        raise ValueError("one step mask per input required")

    top_outputs: list[Tensor] = []
    for t, x in enumerate(xs):
        keep = step_masks[t] if step_masks is not None else None
        inp = x
        for l, layer in enumerate(params.layers):
            if l > 0 and dropout_rate > 0.0 and training:
                inp = ad.dropout(inp, dropout_rate, training, rng)
            h_new = gru_step(inp, hidden[l], layer)
            hidden[l] = masked_update(h_new, hidden[l], keep)
            inp = hidden[l]
        top_outputs.append(hidden[-1])
    return top_outputs, hidden


@dataclass
class MlpParams:
    """Affine layers with ReLU between them and a linear final layer."""

    weights: list[Tensor]
    biases: list[Tensor]

    def named(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out


def init_mlp(rng: np.random.Generator, dims: list[int]) -> MlpParams:
    """dims = [in, hidden..., out]; consecutive sizes chain."""
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(ad.parameter(glorot_init(rng, fan_in, fan_out)))
        biases.append(ad.parameter(np.zeros(fan_out)))
    return MlpParams(weights=weights, biases=biases)


def mlp_forward(x: Tensor, params: MlpParams) -> Tensor:
    if x.shape[1] != params.weights[0].shape[0]:
        raise ValueError(
            f"mlp input dim {x.shape[1]} != {params.weights[0].shape[0]}")
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = add_bias(matmul(h, w), b)
        if i != last:
            h = ad.relu(h)
    return h


def init_embedding(rng: np.random.Generator, rows: int, dim: int) -> Tensor:
    return ad.parameter(recurrent_init(rng, (rows, dim), dim))
