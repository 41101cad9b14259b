"""Joint on-policy training of the insertion and deletion models.

One step, per example: sample a partial hypothesis, score its slots with the
insertion model, insert the argmax tokens (as plain token ids, so nothing
flows back into the insertion model), label the on-policy mistakes, and score
the result with the deletion model. Both losses are averaged over the batch
and optimised together.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, NumericError
from .model import (
    EOS_SLOT,
    STRUCTURAL,
    Canvas,
    SlotTargets,
    build_canvas,
    deletion_probs_batch,
    deletion_targets,
    greedy_parallel_insert,
    insertion_logits_batch,
    letter_ids,
    slot_targets,
)
from .rng import stream
from .tasks import Example
from .transformer import DecoderParams, ModelConfig, init_decoder_params

METRIC_FIELDS = ("ins_loss", "del_loss", "insertions", "invalid_insertions", "del_signal_fraction")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200_000
    batch_size: int = 32
    p_adv: float = 0.0
    tau: float = 1.0
    uniform_weights: bool = False
    del_loss_weight: float = 1.0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 10_000
    eval_every: int = 100

    def __post_init__(self):
        if not 0.0 <= self.p_adv <= 1.0:
            raise ValueError("train.p_adv must be in [0, 1]")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("train.steps must be >= 0 and train.batch_size >= 1")
        if self.tau <= 0:
            raise ValueError("train.tau must be positive")
        if self.checkpoint_every < 1 or self.eval_every < 1:
            raise ValueError("train.checkpoint_every and train.eval_every must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def adam_hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


@dataclass
class TrainState:
    ins: DecoderParams
    dele: DecoderParams
    ins_opt: AdamState
    del_opt: AdamState
    seed: int
    step: int = 0
    window: list = field(default_factory=list)  # metrics since the last emitted record


def init_state(model_config: ModelConfig, train_config: TrainConfig) -> TrainState:
    ins = init_decoder_params(model_config, model_config.vocab_size, stream(train_config.seed, "init", "insertion"))
    dele = init_decoder_params(model_config, 1, stream(train_config.seed, "init", "deletion"))
    hyper = train_config.adam_hyper()
    return TrainState(ins, dele, AdamState.for_params(ins, **hyper), AdamState.for_params(dele, **hyper),
                      seed=train_config.seed)


def sample_partial(example: Example, rng: np.random.Generator) -> Canvas:
    """Keep a uniformly random (i-1)-subset of target positions, i ~ Uniform{1..n}."""
    n = len(example.target)
    i = int(rng.integers(1, n + 1))
    kept = np.sort(rng.choice(n, size=i - 1, replace=False)) if i > 1 else np.zeros(0, dtype=np.int64)
    return build_canvas(example.source, "".join(example.target[k] for k in kept), kept.tolist())


def adversarial_mask(logits: np.ndarray, targets: SlotTargets, p_adv: float, rng: np.random.Generator) -> np.ndarray:
    """With probability ``p_adv``, hide every correct choice in slots that still have work to do.

    In each nonempty-span slot the span's letters, ``[EOS_SLOT]`` and the
    structural tokens are set to -inf, so the argmax is the most confident
    wrong letter. One draw per example.
    """
    if rng.random() >= p_adv:
        return logits
    out = np.array(logits, dtype=np.float64, copy=True)
    for slot, span in enumerate(targets.spans):
        if span:
            out[slot, letter_ids(span)] = -np.inf
            out[slot, [EOS_SLOT, *STRUCTURAL]] = -np.inf
    return out


def all_params(state: TrainState) -> list:
    return [*state.ins, *state.dele]


def step_losses(batch: Sequence[Example], state: TrainState, model_config: ModelConfig,
                train_config: TrainConfig) -> tuple[ad.Tensor, ad.Tensor, dict]:
    """Taped insertion and deletion losses for ``state.step`` plus the step's counters.

    The post-insertion canvases are built from plain token ids, so the
    deletion loss has no path back to the insertion parameters.
    """
    if not batch:
        raise ValueError("empty batch")
    rng = stream(state.seed, "step", state.step)
    canvases = [sample_partial(ex, rng) for ex in batch]
    targets = [slot_targets(c, ex.target, train_config.tau, train_config.uniform_weights)
               for c, ex in zip(canvases, batch)]
    b = len(batch)

    ad.active_tape().clear()
    ad.zero_grads(all_params(state))

    logits, offsets = insertion_logits_batch(canvases, state.ins, model_config, True, rng)
    weights = np.concatenate([t.weights for t in targets])
    row_scale = np.concatenate([np.full(len(t), 1.0 / (b * len(t))) for t in targets])
    ins_loss = ad.weighted_sum(ad.cross_entropy_rows(logits, weights), row_scale)

    scores = logits.data
    after, labels = [], []
    n_ins = n_bad = n_signal = 0
    for c, t, off in zip(canvases, targets, offsets):
        rows = adversarial_mask(scores[off:off + len(t)], t, train_config.p_adv, rng)
        new_canvas, records = greedy_parallel_insert(c, rows, t)
        lab = deletion_targets(records, new_canvas)
        after.append(new_canvas)
        labels.append(lab)
        inserted = [r for r in records if r.token]
        n_ins += len(inserted)
        n_bad += sum(1 for r in inserted if not r.span_valid)
        n_signal += lab.has_signal

    probs = deletion_probs_batch(after, state.dele, model_config, True, rng)
    t_max = probs.shape[1]
    y = np.zeros((b, t_max))
    scale = np.zeros((b, t_max))
    for i, lab in enumerate(labels):
        n = len(lab.labels)
        y[i, :n] = lab.labels
        if lab.mask.any():
            scale[i, :n] = lab.mask / (b * lab.mask.sum())
    del_loss = ad.bce_sum(probs, y, scale) if scale.any() else ad.Tensor(0.0)
    counts = {"insertions": n_ins, "invalid_insertions": n_bad, "del_signal_fraction": n_signal / b}
    return ins_loss, del_loss, counts


def train_step(batch: Sequence[Example], state: TrainState, model_config: ModelConfig,
               train_config: TrainConfig) -> dict:
    """One joint update of both models; returns the step's metrics."""
    ins_loss, del_loss, counts = step_losses(batch, state, model_config, train_config)
    total = ad.add(ins_loss, ad.mul(del_loss, train_config.del_loss_weight))
    if not math.isfinite(float(total.data)):
        ad.active_tape().clear()
        raise NumericError(f"loss diverged at step {state.step}: ins_loss={float(ins_loss.data)}, "
                           f"del_loss={float(del_loss.data)}")
    ad.backward(total)
    ad.adam_step(list(state.ins), state.ins_opt)
    ad.adam_step(list(state.dele), state.del_opt)
    state.step += 1
    return {"ins_loss": float(ins_loss.data), "del_loss": float(del_loss.data), **counts}


def batch_indices(step: int, batch_size: int, n: int, seed: int, cache: dict | None = None) -> list[int]:
    """Dataset indices for ``step``: consecutive slices of per-epoch shuffles."""
    cache = {} if cache is None else cache
    out = []
    for pos in range(step * batch_size, (step + 1) * batch_size):
        epoch, k = divmod(pos, n)
        if epoch not in cache:
            cache.clear()
            cache[epoch] = stream(seed, "shuffle", epoch).permutation(n)
        out.append(int(cache[epoch][k]))
    return out


def train_loop(dataset: Sequence[Example], model_config: ModelConfig, train_config: TrainConfig,
               state: TrainState | None = None,
               on_metrics: Callable[[dict], None] | None = None,
               on_checkpoint: Callable[[TrainState], None] | None = None) -> TrainState:
    """Run until ``train_config.steps``; resumes from ``state.step`` when a state is given.

    Metrics are averaged over each ``eval_every`` window. The last step always
    checkpoints; there is no best-model selection.
    """
    if not dataset:
        raise ValueError("empty dataset")
    if state is None:
        state = init_state(model_config, train_config)
    if state.step >= train_config.steps:
        if on_checkpoint:
            on_checkpoint(state)
        return state

    cache: dict = {}
    window = state.window
    while state.step < train_config.steps:
        idx = batch_indices(state.step, train_config.batch_size, len(dataset), train_config.seed, cache)
        window.append(train_step([dataset[i] for i in idx], state, model_config, train_config))
        last = state.step == train_config.steps
        if state.step % train_config.eval_every == 0 or last:
            record = {"step": state.step}
            record.update({k: float(np.mean([w[k] for w in window])) for k in METRIC_FIELDS})
            window.clear()
            if on_metrics:
                on_metrics(record)
        if on_checkpoint and (state.step % train_config.checkpoint_every == 0 or last):
            on_checkpoint(state)
    return state
