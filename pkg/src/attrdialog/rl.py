"""REINFORCE fine-tuning of the attribute-selection policy.

The policy is the context encoders plus the attribute prediction heads;
actions are joint label assignments sampled per family. The reward is the
negated, length-normalized average log-likelihood of a fixed dull-phrase
set given the dialog extended by the generated response, so pushing the
reward up pushes dull continuations down. A running-average baseline
reduces variance and an L2 anchor ties every parameter to the supervised
weights; decoder parameters receive only the anchor term since the policy
log-probability never touches them.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor
from .corpus import EOS, Dialog, DullSet, Utterance
from .model import DialogModel, iter_examples
from .training import Checkpoint, checkpoint_from_model, model_from_checkpoint

SCORING_ATTR_MODES = ("argmax", "sample", "expected")


@dataclass
class RlConfig:
    dull_set: DullSet
    baseline_decay: float = 0.95
    anchor_coefficient: float = 0.01
    samples_per_context: int = 1
    generation_mode: str = "greedy"
    generation_max_len: int = 20
    scoring_attr_mode: str = "argmax"
    freeze_scorer: bool = False
    lr: float = 1e-3
    batch_size: int = 8
    steps: int = 500
    context_window: int | None = None
    cache_rewards: bool = False

    def __post_init__(self):
        if not 0.0 < self.baseline_decay <= 1.0:
            raise ValueError("baseline decay must lie in (0, 1]")
        if self.samples_per_context < 1:
            raise ValueError("need at least one sample per context")
        if self.anchor_coefficient < 0.0:
            raise ValueError("anchor coefficient must be non-negative")
        if self.scoring_attr_mode not in SCORING_ATTR_MODES:
            raise ValueError(f"scoring_attr_mode must be one of "
                             f"{SCORING_ATTR_MODES}")
        if self.cache_rewards and not (
                self.freeze_scorer and self.generation_mode == "greedy"
                and self.scoring_attr_mode != "sample"):
            raise ValueError("reward caching requires a frozen scorer, greedy "
                             "generation, and deterministic scoring")


@dataclass
class RewardResult:
    reward: float
    dull_log_likelihoods: list[float]
    generated: list[int]


@dataclass
class BaselineState:
    value: float = 0.0
    initialized: bool = False

    def update(self, mean_reward: float, decay: float) -> None:
        if not self.initialized:
            self.value = mean_reward
            self.initialized = True
        else:
            self.value = decay * self.value + (1.0 - decay) * mean_reward


def aggregate_reward(log_likelihoods: Sequence[float],
                     counts: Sequence[int]) -> float:
    """R = -(1/|S|) sum_s (1/N_s) log P(s | ...).

    The sign follows the textual definition of the ease-of-answering
    reward: likelier dull continuations mean lower reward.
    """
    if len(log_likelihoods) != len(counts) or not log_likelihoods:
        raise ValueError("one log-likelihood per dull utterance required")
    terms = [ll / n for ll, n in zip(log_likelihoods, counts)]
    return -float(np.mean(terms))


def _scoring_assignments(scorer: DialogModel, extended: list[Utterance],
                         mode: str, rng) -> list[tuple[float, np.ndarray]]:
    """Weighted attribute assignments used to condition dull scoring."""
    ctx = scorer.encode_dialog_context(extended)
    dists = scorer.predict_next_attributes(ctx)
    k = scorer.config.schema.k
    if mode == "argmax":
        labels = np.array([d.argmax() for d in dists], dtype=np.int64)
        return [(1.0, labels)]
    if mode == "sample":
        labels = np.array([rng.choice(d.shape[1], p=d[0] / d[0].sum())
                           for d in dists], dtype=np.int64)
        return [(1.0, labels)]
    # expected: enumerate the joint assignment space with product weights.
    supports = [range(d.shape[1]) for d in dists]
    combos = list(itertools.product(*supports))
    if len(combos) > 256:
        raise ValueError("expected-mode scoring over a joint space this large "
                         "is impractical; use argmax or sample")
    out = []
    for combo in combos:
        weight = float(np.prod([dists[i][0, c] for i, c in enumerate(combo)])) \
            if k else 1.0
        out.append((weight, np.array(combo, dtype=np.int64)))
    return out


def dull_log_likelihoods(scorer: DialogModel, extended: list[Utterance],
                         dull: DullSet, mode: str, rng) -> list[float]:
    """log P(s | extended context) for every dull utterance s."""
    assignments = _scoring_assignments(scorer, extended, mode, rng)
    ctx = scorer.encode_dialog_context(extended)
    lls = np.zeros(len(dull))
    for weight, labels in assignments:
        cond = scorer.build_conditioning_vector(ctx, labels)
        for i, ids in enumerate(dull.utterances):
            nll = scorer.sequence_token_nlls(cond, ids).sum()
            lls[i] += weight * (-nll)
    return lls.tolist()


def ease_of_answering_reward(model: DialogModel, prefix: Sequence[Utterance],
                             sampled_attrs: np.ndarray, scorer: DialogModel,
                             config: RlConfig,
                             rng: np.random.Generator) -> RewardResult:
    """Generate U_m under the sampled attributes, append it to the context,
    and score how unlikely the dull set has become."""
    if len(config.dull_set) == 0:
        raise ValueError("ease-of-answering reward needs a non-empty dull set")
    ctx = model.encode_dialog_context(prefix)
    cond = model.build_conditioning_vector(ctx, sampled_attrs)
    generated = model.generate_utterance(cond, mode=config.generation_mode,
                                         max_len=config.generation_max_len,
                                         rng=rng)
    token_ids = generated if generated and generated[-1] == EOS \
        else generated + [EOS]
    extension = Utterance(token_ids=token_ids,
                          attrs=[int(a) for a in sampled_attrs])
    extended = list(prefix) + [extension]
    if config.context_window is not None:
        extended = extended[-config.context_window:]
    lls = dull_log_likelihoods(scorer, extended, config.dull_set,
                               config.scoring_attr_mode, rng)
    reward = aggregate_reward(lls, config.dull_set.counts)
    return RewardResult(reward=reward, dull_log_likelihoods=lls,
                        generated=generated)


# ---------------------------------------------------------------------------
# policy gradient


def policy_log_prob(model: DialogModel, prefix: Sequence[Utterance],
                    labels: np.ndarray) -> Tensor:
    """log P_RL(DA_{1:K} | context) as a differentiable scalar."""
    if model.config.schema.k == 0:
        raise ValueError("the attribute policy needs at least one family")
    ctx = model.encode_dialog_context(prefix)
    logits = model.attribute_logits(ctx)
    total = None
    for fi, fam in enumerate(model.config.schema.families):
        nll, _ = ad.softmax_cross_entropy(logits[fam.name],
                                          [int(labels[fi])],
                                          weights=np.array([1.0]))
        total = nll if total is None else ad.add(total, nll)
    return ad.scale(total, -1.0)


@dataclass
class StepStats:
    mean_reward: float
    baseline: float
    anchor_distance: float
    rewards: list[float] = field(default_factory=list)


def anchor_distance(params, anchor: dict[str, np.ndarray]) -> float:
    total = 0.0
    for name, p in params.items():
        d = p.data - anchor[name]
        total += float((d * d).sum())
    return float(np.sqrt(total))


def _prefix_signature(prefix: Sequence[Utterance]):
    return tuple((tuple(u.token_ids), tuple(u.attrs)) for u in prefix)


def reinforce_step(model: DialogModel, contexts: Sequence[Sequence[Utterance]],
                   anchor: dict[str, np.ndarray], baseline: BaselineState,
                   adam: AdamState, config: RlConfig,
                   rng: np.random.Generator,
                   scorer: DialogModel | None = None,
                   reward_fn: Callable[..., float] | None = None,
                   reward_cache: dict | None = None) -> StepStats:
    """One REINFORCE update over a batch of dialog contexts.

    Per context: sample attribute assignments from the policy, compute the
    reward, and accumulate (R - b) grad log P_RL plus the anchor gradient
    2*lambda*(theta - theta_sup); then apply Adam and refresh the running
    baseline with the batch's mean reward.

    With a reward_cache, generation and scoring both run under the frozen
    scorer so the reward is a fixed function of (context, action) and can
    be memoized across steps.
    """
    params = model.parameters()
    scorer = scorer or model
    n = len(contexts)
    s_per = config.samples_per_context

    def compute_reward(prefix, labels):
        if reward_fn is not None:
            return reward_fn(prefix, labels, rng)
        if reward_cache is None:
            return ease_of_answering_reward(
                model, prefix, labels, scorer, config, rng).reward
        key = (_prefix_signature(prefix), tuple(int(a) for a in labels))
        if key not in reward_cache:
            reward_cache[key] = ease_of_answering_reward(
                scorer, prefix, labels, scorer, config, rng).reward
        return reward_cache[key]

    ad.zero_grads(params)
    all_logits = []
    sampled: list[list[np.ndarray]] = []
    rewards = np.zeros((n, s_per))
    for i, prefix in enumerate(contexts):
        ctx = model.encode_dialog_context(prefix)
        logits = model.attribute_logits(ctx)
        all_logits.append(logits)
        dists = [ad.stable_softmax(logits[f.name].data[0])
                 for f in model.config.schema.families]
        picks = []
        for j in range(s_per):
            labels = np.array([rng.choice(len(d), p=d / d.sum())
                               for d in dists], dtype=np.int64)
            picks.append(labels)
            rewards[i, j] = compute_reward(prefix, labels)
        sampled.append(picks)

    if not np.isfinite(rewards).all():
        raise ad.NumericalError("non-finite reward in reinforce_step")
    mean_reward = float(rewards.mean())
    if not baseline.initialized:
        baseline.update(mean_reward, config.baseline_decay)
    b = baseline.value

    # Descent on -(R - b) log P: weighted cross-entropy rows carry the
    # advantage; identical rewards therefore contribute exactly zero.
    loss = None
    scale = 1.0 / (n * s_per)
    for i in range(n):
        for j in range(s_per):
            advantage = rewards[i, j] - b
            if advantage == 0.0:
                continue
            for fi, fam in enumerate(model.config.schema.families):
                term, _ = ad.softmax_cross_entropy(
                    all_logits[i][fam.name],
                    [int(sampled[i][j][fi])],
                    weights=np.array([advantage * scale]))
                loss = term if loss is None else ad.add(loss, term)
    if loss is not None:
        loss.backward()

    lam = config.anchor_coefficient
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if lam > 0.0:
            g = g + 2.0 * lam * (p.data - anchor[name])
        grads[name] = g
    ad.adam_step(params, grads, adam)

    baseline.update(mean_reward, config.baseline_decay)
    return StepStats(mean_reward=mean_reward, baseline=baseline.value,
                     anchor_distance=anchor_distance(params, anchor),
                     rewards=rewards.reshape(-1).tolist())


@dataclass
class RlResult:
    checkpoint: Checkpoint
    model: DialogModel
    history: list[dict] = field(default_factory=list)


def rl_finetune(dialogs: Sequence[Dialog], supervised: Checkpoint,
                config: RlConfig, seed: int = 0, log=None) -> RlResult:
    """Fine-tune the attribute policy of a supervised checkpoint.

    The anchor is the supervised parameter set and is never mutated; the
    scorer is the live model unless config.freeze_scorer pins it to the
    supervised weights.
    """
    model = model_from_checkpoint(supervised)
    anchor = {n: arr.copy() for n, arr in supervised.params.items()}
    scorer = model_from_checkpoint(supervised) if config.freeze_scorer else model
    rng = np.random.default_rng(seed)
    window = (config.context_window
              if config.context_window is not None
              else model.config.context_window)
    pool = [prefix for prefix, _ in iter_examples(dialogs, window)]
    if not pool:
        raise ValueError("no dialog contexts available for fine-tuning")

    params = model.parameters()
    adam = AdamState.for_params(params, lr=config.lr)
    baseline = BaselineState()
    reward_cache: dict | None = {} if config.cache_rewards else None
    result = RlResult(checkpoint=None, model=model)
    for step in range(config.steps):
        idx = rng.integers(0, len(pool), size=config.batch_size)
        contexts = [pool[i] for i in idx]
        stats = reinforce_step(model, contexts, anchor, baseline, adam,
                               config, rng, scorer=scorer,
                               reward_cache=reward_cache)
        record = {"step": step, "mean_reward": stats.mean_reward,
                  "baseline": stats.baseline,
                  "anchor_distance": stats.anchor_distance}
        result.history.append(record)
        if log is not None:
            log(record)
    result.checkpoint = checkpoint_from_model(model, rng_seed=seed,
                                              step=config.steps)
    return result
